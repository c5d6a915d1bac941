use demoe::net::{init_checkpoint, ArchConfig, Checkpoint};
use demoe::synth::{DatasetManifest, ManifestRecord};
use demoe::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Initialized checkpoint with every parameter redrawn, so no block is the
/// identity and every expert differs.
pub fn randomized(cfg: &ArchConfig, seed: u64) -> Checkpoint {
    let mut ck = init_checkpoint(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for r in ck.records_mut() {
        for v in &mut r.data {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    ck
}

pub fn image(rng: &mut impl Rng, n: usize, h: usize, w: usize) -> Tensor<f32> {
    Tensor::rand_uniform([n, 3, h, w], 0.0, 1.0, rng)
}

fn record(i: usize, label: usize, mse: f64) -> ManifestRecord {
    ManifestRecord {
        degraded: format!("degraded/{i:05}.png"),
        clean: format!("clean/{i:05}.png"),
        label,
        mse,
    }
}

/// `n` records of one class with distinct MSEs.
pub fn class_records(label: usize, n: usize, offset: usize) -> Vec<ManifestRecord> {
    (0..n)
        .map(|i| record(offset + i, label, (i + 1) as f64 * 1e-4))
        .collect()
}

/// 10200 low-light pairs whose MSEs crowd the low end: equal-width bins
/// over [0, 1] hold 5600, 2600, 1600 and 400 records (the last under 5%).
pub fn lolblur_like_pool() -> DatasetManifest {
    let counts = [5600usize, 2600, 1600, 400];
    let mut records = Vec::new();
    for (b, &c) in counts.iter().enumerate() {
        for i in 0..c {
            let mse = if b == 0 && i == 0 {
                0.0
            } else if b == 3 && i == c - 1 {
                1.0
            } else {
                (b as f64 + (i as f64 + 0.5) / c as f64) * 0.25
            };
            records.push(record(records.len(), 3, mse));
        }
    }
    DatasetManifest::new(records)
}
