//! Per-image inference records and their JSON / CSV / table renderings.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Result};
use demoe::io::{read_png, write_png};
use demoe::metrics::{psnr, ssim, Psnr};
use demoe::net::{demoe_forward, Checkpoint};
use demoe::ops::map_samples;
use demoe::synth::manifest::resolve;
use demoe::synth::DatasetManifest;
use demoe::Tensor;
use serde::{Deserialize, Serialize};

use crate::outputs::Outputs;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
    Table,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            "table" => Ok(Format::Table),
            _ => Err("expected json, csv or table".into()),
        }
    }
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Json => "json",
            Format::Csv => "csv",
            Format::Table => "txt",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    /// Degraded path as written in the manifest.
    pub id: String,
    pub label: usize,
    /// Router argmax; absent for checkpoints without a router.
    pub predicted: Option<usize>,
    pub correct: Option<bool>,
    pub psnr: Psnr,
    pub ssim: f64,
    pub input_psnr: Psnr,
    pub input_ssim: f64,
    pub weights: Vec<f64>,
}

/// Column means of the per-image rows. PSNR columns average the finite
/// values only (identical pairs would make every mean infinite) and are
/// infinite only when every entry is.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub router_accuracy: Option<f64>,
    pub psnr: Psnr,
    pub ssim: f64,
    pub input_psnr: Psnr,
    pub input_ssim: f64,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub dataset: String,
    pub k: usize,
    pub expert: Option<usize>,
    pub images: Vec<ImageRecord>,
    pub mean: Aggregate,
    /// Records that could not be processed, with the reason.
    pub failures: Vec<String>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn psnr_mean(v: impl Iterator<Item = Psnr>) -> Psnr {
    let finite: Vec<f64> = v.map(Psnr::db).filter(|d| d.is_finite()).collect();
    if finite.is_empty() {
        Psnr::Infinite
    } else {
        Psnr::Finite(mean(finite.into_iter()))
    }
}

impl Aggregate {
    pub fn of(images: &[ImageRecord]) -> Result<Self> {
        if images.is_empty() {
            bail!("no records to aggregate");
        }
        let width = images[0].weights.len();
        let router_accuracy = images
            .iter()
            .map(|r| r.correct.map(|c| f64::from(u8::from(c))))
            .collect::<Option<Vec<f64>>>()
            .map(|v| mean(v.into_iter()));
        Ok(Aggregate {
            router_accuracy,
            psnr: psnr_mean(images.iter().map(|r| r.psnr)),
            ssim: mean(images.iter().map(|r| r.ssim)),
            input_psnr: psnr_mean(images.iter().map(|r| r.input_psnr)),
            input_ssim: mean(images.iter().map(|r| r.input_ssim)),
            weights: (0..width)
                .map(|e| mean(images.iter().map(|r| r.weights.get(e).copied().unwrap_or(0.0))))
                .collect(),
        })
    }
}

fn restore_one(
    ckpt: &Checkpoint,
    root: &Path,
    rec: &demoe::synth::ManifestRecord,
    k: usize,
    expert: Option<usize>,
) -> Result<(ImageRecord, Tensor<f32>)> {
    let degraded = read_png(resolve(root, &rec.degraded))?;
    let clean = read_png(resolve(root, &rec.clean))?;
    let r = demoe_forward(ckpt, &degraded, k, expert)?;
    let restored = r.restored.map(|v| v.clamp(0.0, 1.0));
    let w = r.weights.first();
    let predicted = w.map(|w| w.argmax());
    let image = ImageRecord {
        id: rec.degraded.clone(),
        label: rec.label,
        predicted,
        correct: predicted.map(|p| p == rec.label),
        psnr: psnr(&restored, &clean, 1.0)?,
        ssim: ssim(&restored, &clean)?,
        input_psnr: psnr(&degraded, &clean, 1.0)?,
        input_ssim: ssim(&degraded, &clean)?,
        weights: w.map_or_else(Vec::new, |w| w.as_slice().iter().map(|&v| v as f64).collect()),
    };
    Ok((image, restored))
}

/// Restore every record of `manifest` (paths relative to `root`). Restored
/// images go to `restored/NNNNN.png` when `save` is given. Records that fail
/// are listed in the report and skipped.
pub fn infer_batch(
    ckpt: &Checkpoint,
    manifest: &DatasetManifest,
    root: &Path,
    k: usize,
    expert: Option<usize>,
    mut save: Option<&mut Outputs>,
    dataset: &str,
) -> Result<Report> {
    if manifest.is_empty() {
        bail!("manifest has no records");
    }
    let rows = map_samples(manifest.len(), |i| {
        restore_one(ckpt, root, &manifest.records[i], k, expert)
    });
    let mut images = Vec::new();
    let mut failures = Vec::new();
    for (i, row) in rows.into_iter().enumerate() {
        match row {
            Ok((rec, restored)) => {
                if let Some(out) = save.as_deref_mut() {
                    let p = out.claim(format!("restored/{i:05}.png"))?;
                    write_png(&p, &restored)?;
                }
                images.push(rec);
            }
            Err(e) => failures.push(format!("record {i} ({}): {e:#}", manifest.records[i].degraded)),
        }
    }
    if images.is_empty() {
        bail!("every record failed; first: {}", failures[0]);
    }
    Ok(Report {
        dataset: dataset.to_owned(),
        k,
        expert,
        mean: Aggregate::of(&images)?,
        images,
        failures,
    })
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn psnr_field(p: Psnr) -> String {
    match p {
        Psnr::Finite(v) => num(v),
        Psnr::Infinite => "inf".into(),
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn csv_header(width: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "id",
        "label",
        "predicted",
        "correct",
        "psnr",
        "ssim",
        "input_psnr",
        "input_ssim",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend((0..width).map(|e| format!("w{e}")));
    h
}

fn render_csv(r: &Report) -> Result<String> {
    let width = r.mean.weights.len();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(csv_header(width))?;
    for im in &r.images {
        let mut row = vec![
            im.id.clone(),
            im.label.to_string(),
            opt(im.predicted),
            opt(im.correct.map(|c| u8::from(c))),
            psnr_field(im.psnr),
            num(im.ssim),
            psnr_field(im.input_psnr),
            num(im.input_ssim),
        ];
        row.extend(im.weights.iter().map(|&v| num(v)));
        w.write_record(row)?;
    }
    let m = &r.mean;
    let mut row = vec![
        "mean".to_owned(),
        String::new(),
        String::new(),
        opt(m.router_accuracy.map(num)),
        psnr_field(m.psnr),
        num(m.ssim),
        psnr_field(m.input_psnr),
        num(m.input_ssim),
    ];
    row.extend(m.weights.iter().map(|&v| num(v)));
    w.write_record(row)?;
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn render_table(r: &Report) -> String {
    let f4 = |v: f64| format!("{v:.4}");
    let p4 = |p: Psnr| match p {
        Psnr::Finite(v) => f4(v),
        Psnr::Infinite => "inf".into(),
    };
    let mut rows: Vec<[String; 7]> = vec![[
        "id".into(),
        "label".into(),
        "pred".into(),
        "psnr".into(),
        "ssim".into(),
        "in_psnr".into(),
        "in_ssim".into(),
    ]];
    for im in &r.images {
        rows.push([
            im.id.clone(),
            im.label.to_string(),
            im.predicted.map_or_else(|| "-".into(), |p| p.to_string()),
            p4(im.psnr),
            f4(im.ssim),
            p4(im.input_psnr),
            f4(im.input_ssim),
        ]);
    }
    rows.push([
        "mean".into(),
        String::new(),
        r.mean.router_accuracy.map_or_else(|| "-".into(), f4),
        p4(r.mean.psnr),
        f4(r.mean.ssim),
        p4(r.mean.input_psnr),
        f4(r.mean.input_ssim),
    ]);
    let widths: Vec<usize> = (0..7)
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        let mut line = String::new();
        for (c, cell) in row.iter().enumerate() {
            if c == 0 {
                let _ = write!(line, "{cell:<w$}", w = widths[0]);
            } else {
                let _ = write!(line, "  {cell:>w$}", w = widths[c]);
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

pub fn emit_report(r: &Report, format: Format) -> Result<String> {
    if r.images.is_empty() {
        bail!("report has no records");
    }
    match format {
        Format::Json => Ok(serde_json::to_string_pretty(r)? + "\n"),
        Format::Csv => render_csv(r),
        Format::Table => Ok(render_table(r)),
    }
}
