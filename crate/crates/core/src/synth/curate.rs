use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::manifest::DatasetManifest;
use crate::error::{Error, Result};

/// Populations below this share of the total make the top bin "sparse".
pub const SPARSE_TAIL_FRACTION: f64 = 0.05;

/// Equal-width bin edges over `[min, max]` (length `bins + 1`).
pub fn bin_edges(values: &[f64], bins: usize) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (0..=bins)
        .map(|i| {
            if i == bins {
                hi
            } else {
                lo + (hi - lo) * i as f64 / bins as f64
            }
        })
        .collect()
}

/// Bin of `v`; the maximum lands in the last bin.
pub fn bin_of(v: f64, edges: &[f64]) -> usize {
    let bins = edges.len() - 1;
    let (lo, hi) = (edges[0], edges[bins]);
    if hi <= lo {
        return 0;
    }
    (((v - lo) / (hi - lo) * bins as f64).floor() as usize).min(bins - 1)
}

/// Keep at most `per_bin` records from each MSE bin, optionally dropping a
/// sparsely populated top bin. Output keeps bin order, then manifest order.
pub fn mse_histogram_subsample(
    manifest: &DatasetManifest,
    bins: usize,
    per_bin: usize,
    drop_sparse_tail: bool,
    seed: u64,
) -> Result<DatasetManifest> {
    if manifest.is_empty() {
        return Err(Error::Dataset("cannot subsample an empty manifest".into()));
    }
    if bins < 2 {
        return Err(Error::invalid(format!("need at least 2 bins, got {bins}")));
    }
    let mses: Vec<f64> = manifest.records.iter().map(|r| r.mse).collect();
    if mses.iter().any(|v| !v.is_finite()) {
        return Err(Error::Dataset("manifest contains a non-finite MSE".into()));
    }
    let edges = bin_edges(&mses, bins);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); bins];
    for (i, &v) in mses.iter().enumerate() {
        members[bin_of(v, &edges)].push(i);
    }
    let counts: Vec<usize> = members.iter().map(Vec::len).collect();
    let tail_dropped = drop_sparse_tail && (counts[bins - 1] as f64) < SPARSE_TAIL_FRACTION * manifest.len() as f64;
    let kept_bins = if tail_dropped { bins - 1 } else { bins };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = DatasetManifest {
        curation_log: manifest.curation_log.clone(),
        ..Default::default()
    };
    let mut selected = Vec::with_capacity(kept_bins);
    for m in &members[..kept_bins] {
        let mut pick: Vec<usize> = if m.len() <= per_bin {
            m.clone()
        } else {
            index::sample(&mut rng, m.len(), per_bin)
                .into_iter()
                .map(|j| m[j])
                .collect()
        };
        pick.sort_unstable();
        selected.push(pick.len());
        out.records
            .extend(pick.into_iter().map(|i| manifest.records[i].clone()));
    }
    out.log(
        "mse_histogram_subsample",
        Some(seed),
        json!({
            "bins": bins,
            "per_bin": per_bin,
            "drop_sparse_tail": drop_sparse_tail,
            "bin_edges": edges,
            "bin_counts": counts,
            "tail_dropped": tail_dropped,
            "selected_per_bin": selected,
        }),
    );
    Ok(out)
}

/// Resize each listed class to its target count: cyclic repetition of a
/// shuffled order when short, uniform subsampling when long. Classes not
/// listed in `targets` pass through unchanged. Output is grouped by label.
pub fn balance_dataset(
    manifest: &DatasetManifest,
    targets: &BTreeMap<usize, usize>,
    seed: u64,
) -> Result<DatasetManifest> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        by_class.entry(r.label).or_default().push(i);
    }
    for (&label, &t) in targets {
        if t == 0 {
            return Err(Error::invalid(format!("target for class {label} must be positive")));
        }
        if !by_class.contains_key(&label) {
            return Err(Error::Dataset(format!("class {label} has a target but no records")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = DatasetManifest {
        curation_log: manifest.curation_log.clone(),
        ..Default::default()
    };
    let mut before = BTreeMap::new();
    for (&label, idx) in &by_class {
        before.insert(label, idx.len());
        let chosen: Vec<usize> = match targets.get(&label) {
            None => idx.clone(),
            Some(&t) if t <= idx.len() => {
                let mut pick: Vec<usize> = index::sample(&mut rng, idx.len(), t)
                    .into_iter()
                    .map(|j| idx[j])
                    .collect();
                pick.shuffle(&mut rng);
                pick
            }
            Some(&t) => {
                let mut order = idx.clone();
                order.shuffle(&mut rng);
                order.iter().cycle().take(t).copied().collect()
            }
        };
        out.records
            .extend(chosen.into_iter().map(|i| manifest.records[i].clone()));
    }
    out.log(
        "balance_dataset",
        Some(seed),
        json!({ "before": before, "targets": targets }),
    );
    Ok(out)
}
