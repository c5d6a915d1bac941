//! Weight-space comparison of two checkpoints: per-filter Pearson
//! correlation averaged per layer, and RBF-kernel CKA over filters.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Checkpoint, Taxonomy};
use crate::ops::map_samples;

pub const HIGH_CORRELATION: f64 = 0.7;

/// One analyzed layer as a filter-major matrix (`filters` rows of `width`).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub name: String,
    pub taxonomy: Taxonomy,
    pub filters: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl LayerWeights {
    pub fn filter(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGroup {
    pub taxonomy: Taxonomy,
    pub layers: Vec<LayerWeights>,
}

/// Group the analyzed parameters by taxonomy, in checkpoint order.
///
/// Convolution weights give one row per output channel. Normalization
/// layers have no filters as such; each of their parameter vectors
/// (scale, shift) becomes one row.
pub fn extract_groups(ckpt: &Checkpoint) -> Vec<LayerGroup> {
    let mut groups: Vec<LayerGroup> = Taxonomy::ANALYZED
        .iter()
        .map(|&taxonomy| LayerGroup {
            taxonomy,
            layers: Vec::new(),
        })
        .collect();
    for rec in ckpt.records() {
        let Some(g) = groups.iter_mut().find(|g| g.taxonomy == rec.taxonomy) else {
            continue;
        };
        let values = rec.data.iter().map(|&v| v as f64);
        if rec.dims.len() == 4 {
            let filters = rec.dims[0];
            g.layers.push(LayerWeights {
                name: rec.name.clone(),
                taxonomy: rec.taxonomy,
                filters,
                width: rec.numel() / filters.max(1),
                data: values.collect(),
            });
            continue;
        }
        let layer = rec.layer();
        match g.layers.last_mut() {
            Some(l) if l.name == layer && l.width == rec.numel() => {
                l.filters += 1;
                l.data.extend(values);
            }
            _ => g.layers.push(LayerWeights {
                name: layer.to_owned(),
                taxonomy: rec.taxonomy,
                filters: 1,
                width: rec.numel(),
                data: values.collect(),
            }),
        }
    }
    groups
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterCorr {
    pub r: f64,
    /// Either side was constant; `r` is then 0 by convention.
    pub skipped: bool,
}

pub fn pearson_filter_corr(a: &[f64], b: &[f64]) -> Result<FilterCorr> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "filter lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::invalid("correlation needs at least two values per filter"));
    }
    let constant = |v: &[f64]| v.iter().all(|&x| x == v[0]);
    if constant(a) || constant(b) {
        return Ok(FilterCorr { r: 0.0, skipped: true });
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(FilterCorr { r: 0.0, skipped: true });
    }
    Ok(FilterCorr {
        r: (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0),
        skipped: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerCorr {
    /// Mean over non-skipped filters; `None` when every filter was skipped.
    pub r_mean: Option<f64>,
    pub filters: usize,
    pub skipped: usize,
}

pub fn mean_layer_corr(a: &LayerWeights, b: &LayerWeights) -> Result<LayerCorr> {
    if a.filters != b.filters || a.width != b.width {
        return Err(Error::shape(format!(
            "layer {} is {}x{} but {} is {}x{}",
            a.name, a.filters, a.width, b.name, b.filters, b.width
        )));
    }
    let mut sum = 0.0;
    let mut used = 0usize;
    for i in 0..a.filters {
        let c = pearson_filter_corr(a.filter(i), b.filter(i))?;
        if !c.skipped {
            sum += c.r;
            used += 1;
        }
    }
    Ok(LayerCorr {
        r_mean: (used > 0).then(|| sum / used as f64),
        filters: a.filters,
        skipped: a.filters - used,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Median of the non-zero pairwise distances, 1 if there are none.
    Median,
    Fixed(f64),
}

impl std::str::FromStr for Bandwidth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "median" {
            return Ok(Bandwidth::Median);
        }
        let v: f64 = s
            .parse()
            .map_err(|_| Error::invalid(format!("bandwidth must be \"median\" or a number, got {s:?}")))?;
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::invalid(format!("bandwidth must be positive, got {s}")));
        }
        Ok(Bandwidth::Fixed(v))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelMatrix {
    pub n: usize,
    pub data: Vec<f64>,
    pub sigma: f64,
}

impl KernelMatrix {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `K_ij = exp(-|x_i - x_j|^2 / (2 sigma^2))` over the `n` rows of `x`.
pub fn rbf_kernel_matrix(x: &[f64], n: usize, bandwidth: Bandwidth) -> Result<KernelMatrix> {
    if n < 2 {
        return Err(Error::invalid(format!("kernel matrix needs at least 2 rows, got {n}")));
    }
    if x.len() % n != 0 {
        return Err(Error::shape(format!("{} values do not split into {n} rows", x.len())));
    }
    let p = x.len() / n;
    let row = |i: usize| &x[i * p..(i + 1) * p];
    let mut d2 = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = sq_dist(row(i), row(j));
            d2[i * n + j] = d;
            d2[j * n + i] = d;
        }
    }
    let sigma = match bandwidth {
        Bandwidth::Fixed(s) if s > 0.0 && s.is_finite() => s,
        Bandwidth::Fixed(s) => return Err(Error::invalid(format!("bandwidth must be positive, got {s}"))),
        Bandwidth::Median => {
            let mut ds: Vec<f64> = (0..n)
                .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
                .map(|(i, j)| d2[i * n + j].sqrt())
                .filter(|&d| d > 0.0)
                .collect();
            if ds.is_empty() {
                1.0
            } else {
                ds.sort_by(f64::total_cmp);
                let m = ds.len();
                if m % 2 == 1 {
                    ds[m / 2]
                } else {
                    0.5 * (ds[m / 2 - 1] + ds[m / 2])
                }
            }
        }
    };
    let denom = 2.0 * sigma * sigma;
    let data = d2.iter().map(|&d| (-d / denom).exp()).collect();
    Ok(KernelMatrix { n, data, sigma })
}

fn check_pair(k: &KernelMatrix, l: &KernelMatrix) -> Result<usize> {
    if k.n != l.n {
        return Err(Error::shape(format!(
            "kernel matrices are {0}x{0} and {1}x{1}",
            k.n, l.n
        )));
    }
    if k.n < 2 {
        return Err(Error::invalid("HSIC needs n >= 2"));
    }
    Ok(k.n)
}

/// `tr(K H L H) / (n-1)^2`, centering K by row and column means instead
/// of forming `H`.
pub fn hsic(k: &KernelMatrix, l: &KernelMatrix) -> Result<f64> {
    let n = check_pair(k, l)?;
    let nf = n as f64;
    let row_mean: Vec<f64> = (0..n).map(|i| (0..n).map(|j| k.at(i, j)).sum::<f64>() / nf).collect();
    let col_mean: Vec<f64> = (0..n).map(|j| (0..n).map(|i| k.at(i, j)).sum::<f64>() / nf).collect();
    let grand = row_mean.iter().sum::<f64>() / nf;
    let mut tr = 0.0;
    for i in 0..n {
        for j in 0..n {
            let kc = k.at(i, j) - row_mean[i] - col_mean[j] + grand;
            tr += kc * l.at(j, i);
        }
    }
    Ok(tr / ((nf - 1.0) * (nf - 1.0)))
}

/// Same quantity through explicit `n`×`n` matrix products.
pub fn hsic_naive(k: &KernelMatrix, l: &KernelMatrix) -> Result<f64> {
    let n = check_pair(k, l)?;
    let nf = n as f64;
    let h: Vec<f64> = (0..n * n)
        .map(|idx| if idx / n == idx % n { 1.0 - 1.0 / nf } else { -1.0 / nf })
        .collect();
    let matmul = |a: &[f64], b: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for t in 0..n {
                let av = a[i * n + t];
                for j in 0..n {
                    out[i * n + j] += av * b[t * n + j];
                }
            }
        }
        out
    };
    let khlh = matmul(&matmul(&matmul(&k.data, &h), &l.data), &h);
    let tr: f64 = (0..n).map(|i| khlh[i * n + i]).sum();
    Ok(tr / ((nf - 1.0) * (nf - 1.0)))
}

/// `HSIC(K, L) / sqrt(HSIC(K, K) HSIC(L, L))`. A kernel with no centered
/// variation has no CKA and reports `Error::Undefined`.
pub fn cka(k: &KernelMatrix, l: &KernelMatrix) -> Result<f64> {
    let kl = hsic(k, l)?;
    let kk = hsic(k, k)?;
    let ll = hsic(l, l)?;
    if !(kk > 0.0 && ll > 0.0) {
        return Err(Error::Undefined(format!(
            "CKA needs positive self-HSIC on both sides, got {kk:e} and {ll:e}"
        )));
    }
    Ok(kl / (kk * ll).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub bandwidth: Bandwidth,
    pub threshold: f64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            bandwidth: Bandwidth::Median,
            threshold: HIGH_CORRELATION,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub taxonomy: Taxonomy,
    pub filters: usize,
    pub skipped: usize,
    pub r: Option<f64>,
    pub cka: Option<f64>,
    pub high_correlation: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub taxonomy: Taxonomy,
    pub layers: usize,
    pub mean_r: Option<f64>,
    pub mean_abs_r: Option<f64>,
    pub mean_cka: Option<f64>,
    pub high_correlation: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub config: ReportConfig,
    pub layers: Vec<LayerEntry>,
    pub groups: Vec<GroupSummary>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn check_same_architecture(a: &Checkpoint, b: &Checkpoint) -> Result<()> {
    let (ra, rb) = (a.records(), b.records());
    for i in 0..ra.len().max(rb.len()) {
        match (ra.get(i), rb.get(i)) {
            (Some(x), Some(y)) if x.name == y.name && x.dims == y.dims && x.taxonomy == y.taxonomy => {}
            (Some(x), Some(y)) => {
                return Err(Error::ArchitectureMismatch(format!(
                    "first differing layer is {} {:?} vs {} {:?}",
                    x.name, x.dims, y.name, y.dims
                )))
            }
            (Some(x), None) | (None, Some(x)) => {
                return Err(Error::ArchitectureMismatch(format!(
                    "first differing layer is {}, present in only one checkpoint",
                    x.name
                )))
            }
            (None, None) => unreachable!(),
        }
    }
    Ok(())
}

fn layer_cka(a: &LayerWeights, b: &LayerWeights, bw: Bandwidth) -> Result<Option<f64>> {
    if a.filters < 2 {
        return Ok(None);
    }
    let k = rbf_kernel_matrix(&a.data, a.filters, bw)?;
    let l = rbf_kernel_matrix(&b.data, b.filters, bw)?;
    match cka(&k, &l) {
        Ok(v) => Ok(Some(v)),
        Err(Error::Undefined(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn similarity_report(a: &Checkpoint, b: &Checkpoint, cfg: &ReportConfig) -> Result<SimilarityReport> {
    check_same_architecture(a, b)?;
    if let Bandwidth::Fixed(s) = cfg.bandwidth {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::invalid(format!("bandwidth must be positive, got {s}")));
        }
    }
    let (ga, gb) = (extract_groups(a), extract_groups(b));
    let pairs: Vec<(&LayerWeights, &LayerWeights)> = ga
        .iter()
        .zip(&gb)
        .flat_map(|(x, y)| x.layers.iter().zip(&y.layers))
        .collect();
    let layers = map_samples(pairs.len(), |i| -> Result<LayerEntry> {
        let (la, lb) = pairs[i];
        let corr = mean_layer_corr(la, lb)?;
        Ok(LayerEntry {
            name: la.name.clone(),
            taxonomy: la.taxonomy,
            filters: corr.filters,
            skipped: corr.skipped,
            r: corr.r_mean,
            cka: layer_cka(la, lb, cfg.bandwidth)?,
            high_correlation: corr.r_mean.is_some_and(|r| r > cfg.threshold),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let groups = Taxonomy::ANALYZED
        .iter()
        .map(|&t| {
            let members: Vec<&LayerEntry> = layers.iter().filter(|l| l.taxonomy == t).collect();
            GroupSummary {
                taxonomy: t,
                layers: members.len(),
                mean_r: mean(members.iter().filter_map(|l| l.r)),
                mean_abs_r: mean(members.iter().filter_map(|l| l.r.map(f64::abs))),
                mean_cka: mean(members.iter().filter_map(|l| l.cka)),
                high_correlation: members.iter().filter(|l| l.high_correlation).count(),
            }
        })
        .collect();
    Ok(SimilarityReport {
        config: *cfg,
        layers,
        groups,
    })
}

impl SimilarityReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Aligned plain-text table, one row per layer then one per group.
    pub fn to_table(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_owned(), |x| format!("{x:.4}"));
        let mut rows: Vec<[String; 7]> = vec![[
            "layer".into(),
            "type".into(),
            "C".into(),
            "skipped".into(),
            "R".into(),
            "CKA".into(),
            format!("R>{}", self.config.threshold),
        ]];
        for l in &self.layers {
            rows.push([
                l.name.clone(),
                l.taxonomy.as_str().into(),
                l.filters.to_string(),
                l.skipped.to_string(),
                opt(l.r),
                opt(l.cka),
                if l.high_correlation { "yes" } else { "" }.into(),
            ]);
        }
        for g in &self.groups {
            rows.push([
                format!("[{}]", g.taxonomy.as_str()),
                "mean".into(),
                g.layers.to_string(),
                String::new(),
                opt(g.mean_r),
                opt(g.mean_cka),
                g.high_correlation.to_string(),
            ]);
        }
        let widths: Vec<usize> = (0..7)
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for r in &rows {
            let mut line = String::new();
            for (c, cell) in r.iter().enumerate() {
                if c == 0 {
                    let _ = write!(line, "{cell:<w$}", w = widths[c]);
                } else {
                    let _ = write!(line, "  {cell:>w$}", w = widths[c]);
                }
            }
            out.push_str(line.trim_end());
            out.push('\n');
        }
        out
    }
}
