//! Synthetic blur formation `y = x (*) k + n`, toy dataset generation and
//! dataset curation.
//!
//! # Real dataset adapter
//!
//! No real data ships with this crate. To train on a real collection, build
//! a [`DatasetManifest`] whose records point at image pairs, e.g. for a
//! directory laid out as
//!
//! ```text
//! <root>/<family>/train/blur/<name>.png
//! <root>/<family>/train/sharp/<name>.png
//! ```
//!
//! where `<family>` is one of the [`Family`] names. [`adapter_manifest`]
//! does exactly this; MSE values are left at zero until computed.

pub mod curate;
pub mod dataset;
pub mod degrade;
pub mod kernel;
pub mod manifest;
pub mod procedural;

pub use curate::{balance_dataset, mse_histogram_subsample};
#[cfg(feature = "io")]
pub use dataset::{generate_toy_dataset, write_pairs};
pub use dataset::{synthesize_pair, synthesize_pairs, Pair};
pub use degrade::{degrade, sample_spec, BlurSpec, Darken, Family, MaskSpec};
pub use kernel::{make_kernel, Kernel, KernelSpec};
pub use manifest::{CurationStep, DatasetManifest, ManifestRecord};

use std::path::Path;

use crate::error::{Error, Result};

/// Manifest for a real dataset in the layout documented above.
pub fn adapter_manifest(root: &Path) -> Result<DatasetManifest> {
    let mut records = Vec::new();
    for family in Family::ALL {
        let blur = root.join(family.as_str()).join("train").join("blur");
        if !blur.is_dir() {
            continue;
        }
        let mut names: Vec<String> = std::fs::read_dir(&blur)
            .map_err(|e| Error::io(&blur, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".png"))
            .collect();
        names.sort();
        for n in names {
            records.push(ManifestRecord {
                degraded: format!("{}/train/blur/{n}", family.as_str()),
                clean: format!("{}/train/sharp/{n}", family.as_str()),
                label: family.label(),
                mse: 0.0,
            });
        }
    }
    if records.is_empty() {
        return Err(Error::Dataset(format!("no image pairs found under {}", root.display())));
    }
    let mut m = DatasetManifest::new(records);
    m.log(
        "adapter",
        None,
        serde_json::json!({ "root": root.display().to_string() }),
    );
    Ok(m)
}
