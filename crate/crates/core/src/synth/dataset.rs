use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::degrade::{degrade, sample_spec, BlurSpec, Family};
use super::procedural::{procedural_image, quantize};
use crate::error::{Error, Result};
use crate::metrics::mse;
use crate::ops::map_samples;
use crate::tensor::Tensor;

/// Image sizes must be multiples of this so every network preset accepts them.
pub const SIZE_MULTIPLE: usize = 16;

/// One synthetic training pair, both images on the 8-bit grid.
#[derive(Clone, Debug)]
pub struct Pair {
    pub clean: Tensor<f32>,
    pub degraded: Tensor<f32>,
    pub label: usize,
    pub spec: BlurSpec,
}

/// Pair `index` of a dataset. Randomness comes from `(seed, index)` only,
/// so pairs can be produced in any order.
pub fn synthesize_pair(index: u64, label: usize, size: usize, seed: u64) -> Result<Pair> {
    let family = Family::from_label(label)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let clean = quantize(&procedural_image(size, size, &mut rng));
    let spec = sample_spec(family, size, size, &mut rng);
    let (degraded, label) = degrade(&clean, &spec, rng.gen())?;
    Ok(Pair {
        clean,
        degraded: quantize(&degraded),
        label,
        spec,
    })
}

pub fn check_size(size: usize) -> Result<()> {
    if size == 0 || size % SIZE_MULTIPLE != 0 {
        return Err(Error::invalid(format!(
            "image size must be a positive multiple of {SIZE_MULTIPLE}, got {size}"
        )));
    }
    Ok(())
}

/// `per_class` pairs for each of the first `classes` families, class-major.
pub fn synthesize_pairs(classes: usize, per_class: usize, size: usize, seed: u64) -> Result<Vec<Pair>> {
    check_size(size)?;
    if classes == 0 || classes > Family::ALL.len() {
        return Err(Error::invalid(format!(
            "classes must be in 1..={}, got {classes}",
            Family::ALL.len()
        )));
    }
    let jobs: Vec<(u64, usize)> = (0..classes * per_class)
        .map(|i| (i as u64, i / per_class.max(1)))
        .collect();
    map_samples(jobs.len(), |i| synthesize_pair(jobs[i].0, jobs[i].1, size, seed))
        .into_iter()
        .collect()
}

/// Mean squared error between the two members of a pair.
pub fn pair_mse(p: &Pair) -> Result<f64> {
    mse(&p.degraded, &p.clean)
}

#[cfg(feature = "io")]
pub use with_io::*;

#[cfg(feature = "io")]
mod with_io {
    use std::path::Path;

    use serde_json::json;

    use super::*;
    use crate::io::write_png;
    use crate::synth::manifest::{DatasetManifest, ManifestRecord};

    /// Write pairs as PNGs under `out_dir` (`clean/`, `degraded/`) and return
    /// the manifest, whose paths are relative to `out_dir`.
    pub fn write_pairs(pairs: &[Pair], out_dir: &Path) -> Result<DatasetManifest> {
        for sub in ["clean", "degraded"] {
            let d = out_dir.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let mut records = Vec::with_capacity(pairs.len());
        for (i, p) in pairs.iter().enumerate() {
            let clean = format!("clean/{i:05}.png");
            let degraded = format!("degraded/{i:05}.png");
            write_png(out_dir.join(&clean), &p.clean)?;
            write_png(out_dir.join(&degraded), &p.degraded)?;
            records.push(ManifestRecord {
                degraded,
                clean,
                label: p.label,
                mse: pair_mse(p)?,
            });
        }
        Ok(DatasetManifest::new(records))
    }

    pub fn generate_toy_dataset(
        classes: usize,
        per_class: usize,
        size: usize,
        seed: u64,
        out_dir: &Path,
    ) -> Result<DatasetManifest> {
        let pairs = synthesize_pairs(classes, per_class, size, seed)?;
        let mut m = write_pairs(&pairs, out_dir)?;
        m.log(
            "generate_toy_dataset",
            Some(seed),
            json!({ "classes": classes, "per_class": per_class, "size": size }),
        );
        Ok(m)
    }
}
