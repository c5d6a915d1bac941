use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use demoe::io::{read_png, write_png};
use demoe::net::macs::layer_costs;
use demoe::net::{count_for_config, count_params_macs, demoe_forward, ArchConfig, Checkpoint};
use demoe::similarity::{similarity_report, Bandwidth, ReportConfig};
use demoe::synth::dataset::{check_size, pair_mse};
use demoe::synth::manifest::resolve;
use demoe::synth::{balance_dataset, mse_histogram_subsample, synthesize_pairs, DatasetManifest, ManifestRecord};
use demoe::train::{load_samples, stage1_train, stage2_finetune, TrainConfig};
use demoe::Shape;
use serde_json::json;

use crate::opts::Settings;
use crate::outputs::Outputs;
use crate::report::{emit_report, infer_batch, Format, Report};
use crate::CliError;

type Res = Result<(), CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn load_manifest(path: &Path) -> Result<(DatasetManifest, PathBuf), CliError> {
    let m = DatasetManifest::load(path)?;
    let root = path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    Ok((m, root))
}

fn load_ckpt(path: &Path) -> Result<Checkpoint, CliError> {
    Ok(Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?)
}

fn preset(name: &str) -> Result<ArchConfig, CliError> {
    match name {
        "toy" => Ok(ArchConfig::toy()),
        "full" => Ok(ArchConfig::full()),
        _ => Err(usage(format!("unknown preset `{name}` (toy or full)"))),
    }
}

pub fn synth(s: &mut Settings, out: &mut Outputs) -> Res {
    let classes: usize = s.get("classes")?;
    let per_class: usize = s.get("per_class")?;
    let size: usize = s.get("size")?;
    let seed: u64 = s.get("seed")?;
    check_size(size).map_err(|e| usage(e.to_string()))?;
    if classes == 0 || classes > 5 || per_class == 0 {
        return Err(usage("--classes must be in 1..=5 and --per-class positive"));
    }
    let pairs = synthesize_pairs(classes, per_class, size, seed)?;
    let mut records = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let clean = format!("clean/{i:05}.png");
        let degraded = format!("degraded/{i:05}.png");
        write_png(out.claim(&clean)?, &p.clean)?;
        write_png(out.claim(&degraded)?, &p.degraded)?;
        records.push(ManifestRecord {
            degraded,
            clean,
            label: p.label,
            mse: pair_mse(p)?,
        });
    }
    let mut m = DatasetManifest::new(records);
    m.log(
        "generate_toy_dataset",
        Some(seed),
        json!({ "classes": classes, "per_class": per_class, "size": size }),
    );
    out.write("manifest.json", m.to_json()?)?;
    println!("{} pairs ({per_class} per class) in {}", m.len(), out.dir().display());
    Ok(())
}

fn parse_targets(spec: &str) -> Result<BTreeMap<usize, usize>, CliError> {
    let mut t = BTreeMap::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (l, n) = part
            .split_once(':')
            .ok_or_else(|| usage(format!("--balance entry `{part}` is not label:count")))?;
        let l: usize = l.trim().parse().map_err(|_| usage(format!("bad label in `{part}`")))?;
        let n: usize = n.trim().parse().map_err(|_| usage(format!("bad count in `{part}`")))?;
        t.insert(l, n);
    }
    if t.is_empty() {
        return Err(usage("--balance has no entries"));
    }
    Ok(t)
}

pub fn curate(s: &mut Settings, out: &mut Outputs) -> Res {
    let path = s.path("manifest")?;
    let bins: usize = s.get("bins")?;
    let per_bin: Option<usize> = s.opt("per_bin")?;
    let drop_tail: bool = s.get("drop_tail")?;
    let balance = s.opt::<String>("balance")?.map(|b| parse_targets(&b)).transpose()?;
    let seed: u64 = s.get("seed")?;
    if per_bin.is_none() && balance.is_none() {
        return Err(usage("curate needs --per-bin, --balance or both"));
    }
    let (mut m, root) = load_manifest(&path)?;
    // the curated manifest lives elsewhere, so point it at the original files
    let root = root
        .canonicalize()
        .with_context(|| format!("resolving {}", root.display()))?;
    for r in &mut m.records {
        r.degraded = resolve(&root, &r.degraded).display().to_string();
        r.clean = resolve(&root, &r.clean).display().to_string();
    }
    if let Some(n) = per_bin {
        m = mse_histogram_subsample(&m, bins, n, drop_tail, seed)?;
    }
    if let Some(t) = &balance {
        m = balance_dataset(&m, t, seed)?;
    }
    out.write("manifest.json", m.to_json()?)?;
    println!("{} records, per class {:?}", m.len(), m.class_counts());
    Ok(())
}

pub fn train(s: &mut Settings, out: &mut Outputs) -> Res {
    let path = s.path("manifest")?;
    let arch = preset(&s.get::<String>("preset")?)?;
    let stage: String = s.get("stage")?;
    let mut cfg = TrainConfig {
        arch,
        epochs_stage1: s.get("epochs1")?,
        epochs_stage2: s.get("epochs2")?,
        batch: s.get("batch")?,
        patch: s.get("patch")?,
        lr0: s.get("lr0")?,
        lr_min: s.get("lr_min")?,
        router_noise: s.get("router_noise")?,
        seed: s.get("seed")?,
        hflip: s.get("hflip")?,
        vflip: s.get("vflip")?,
        ..TrainConfig::toy()
    };
    cfg.loss.lambda_pixel = s.get("lambda_pixel")?;
    cfg.loss.lambda_class = s.get("lambda_class")?;
    cfg.optim.weight_decay = s.get("weight_decay")?;
    let clip: f64 = s.get("grad_clip")?;
    if !(clip >= 0.0) || cfg.optim.weight_decay < 0.0 {
        return Err(usage("--grad-clip and --weight-decay must be non-negative"));
    }
    cfg.optim.grad_clip = (clip > 0.0).then_some(clip);
    cfg.arch.top_k = s.get("top_k")?;
    let (run1, run2) = match stage.as_str() {
        "1" => (true, false),
        "2" => (false, true),
        "both" => (true, true),
        _ => return Err(usage(format!("--stage must be 1, 2 or both, got `{stage}`"))),
    };
    let init = if run1 { None } else { Some(s.path("ckpt")?) };
    cfg.validate().map_err(|e| usage(e.to_string()))?;

    let (m, root) = load_manifest(&path)?;
    let samples = load_samples(&m, &root)?;
    let mut logs = serde_json::Map::new();
    let stage1 = if run1 {
        let (c, log) = stage1_train(&samples, &cfg)?;
        c.save(out.claim("stage1.dmoe")?)?;
        println!(
            "stage 1: {} epochs, final loss {:.5}",
            log.epoch_loss.len(),
            log.epoch_loss.last().unwrap_or(&f64::NAN)
        );
        logs.insert(
            "stage1".into(),
            serde_json::to_value(&log).map_err(anyhow::Error::from)?,
        );
        c
    } else {
        load_ckpt(init.as_deref().expect("checked above"))?
    };
    if run2 {
        let (c, log) = stage2_finetune(&stage1, &samples, &cfg)?;
        c.save(out.claim("stage2.dmoe")?)?;
        println!(
            "stage 2: {} epochs, final loss {:.5}",
            log.epoch_loss.len(),
            log.epoch_loss.last().unwrap_or(&f64::NAN)
        );
        logs.insert(
            "stage2".into(),
            serde_json::to_value(&log).map_err(anyhow::Error::from)?,
        );
    }
    out.write(
        "train_log.json",
        serde_json::to_string_pretty(&logs).map_err(anyhow::Error::from)?,
    )?;
    Ok(())
}

fn write_report(out: &mut Outputs, report: &Report, format: Format) -> Res {
    out.write("report.json", emit_report(report, Format::Json)?)?;
    if format != Format::Json {
        out.write(format!("report.{}", format.extension()), emit_report(report, format)?)?;
    }
    if !report.failures.is_empty() {
        out.write("failures.txt", report.failures.join("\n") + "\n")?;
    }
    let m = &report.mean;
    let acc = m.router_accuracy.map_or_else(|| "-".to_owned(), |a| format!("{a:.4}"));
    println!(
        "{} images: PSNR {} dB (input {}), SSIM {:.4} (input {:.4}), router accuracy {acc}",
        report.images.len(),
        m.psnr,
        m.input_psnr,
        m.ssim,
        m.input_ssim
    );
    if report.failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Incomplete(format!(
            "{} of {} records failed; see failures.txt",
            report.failures.len(),
            report.failures.len() + report.images.len()
        )))
    }
}

fn batch(s: &mut Settings, out: &mut Outputs, save_images: bool) -> Res {
    let ckpt = load_ckpt(&s.path("ckpt")?)?;
    let path = s.path("manifest")?;
    let k: usize = s.opt("k")?.unwrap_or(ckpt.config().top_k);
    let expert: Option<usize> = s.opt("expert")?;
    let format: Format = s.get("format")?;
    let (m, root) = load_manifest(&path)?;
    let save = if save_images { Some(&mut *out) } else { None };
    let report = infer_batch(&ckpt, &m, &root, k, expert, save, &path.display().to_string())?;
    write_report(out, &report, format)
}

pub fn infer(s: &mut Settings, out: &mut Outputs) -> Res {
    if s.opt::<String>("manifest")?.is_some() {
        return batch(s, out, true);
    }
    let ckpt = load_ckpt(&s.path("ckpt")?)?;
    let k: usize = s.opt("k")?.unwrap_or(ckpt.config().top_k);
    let expert: Option<usize> = s.opt("expert")?;
    let input = s
        .path("in")
        .map_err(|_| usage("infer needs --in and --out, or --manifest"))?;
    let output = s
        .path("out")
        .map_err(|_| usage("infer needs --in and --out, or --manifest"))?;
    let y = read_png(&input)?;
    let r = demoe_forward(&ckpt, &y, k, expert)?;
    write_png(out.claim_external(&output)?, &r.restored.map(|v| v.clamp(0.0, 1.0)))?;
    let weights: Vec<Vec<f32>> = r.weights.iter().map(|w| w.as_slice().to_vec()).collect();
    out.write(
        "routing.json",
        serde_json::to_string_pretty(&json!({
            "input": input.display().to_string(),
            "weights": weights,
            "selections": r.selections,
        }))
        .map_err(anyhow::Error::from)?,
    )?;
    println!("wrote {}", output.display());
    Ok(())
}

pub fn eval(s: &mut Settings, out: &mut Outputs) -> Res {
    batch(s, out, false)
}

pub fn analyze(s: &mut Settings, out: &mut Outputs) -> Res {
    let a = load_ckpt(&s.path("a")?)?;
    let b = load_ckpt(&s.path("b")?)?;
    let cfg = ReportConfig {
        bandwidth: s.get::<Bandwidth>("bandwidth")?,
        threshold: s.get("threshold")?,
    };
    let format: String = s.get("format")?;
    if format != "json" && format != "table" {
        return Err(usage(format!("--format must be json or table, got `{format}`")));
    }
    let rep = similarity_report(&a, &b, &cfg)?;
    let json = rep.to_json()?;
    let table = rep.to_table();
    out.write("similarity.json", &json)?;
    out.write("similarity.txt", &table)?;
    if format == "json" {
        println!("{json}");
    } else {
        print!("{table}");
    }
    Ok(())
}

pub fn macs(s: &mut Settings, out: &mut Outputs) -> Res {
    let ckpt = s.opt::<String>("ckpt")?.map(|p| load_ckpt(Path::new(&p))).transpose()?;
    let name: String = s.get("preset")?;
    let size: usize = s.get("size")?;
    let batch: usize = s.get("batch")?;
    let k: usize = s.get("k")?;
    let cfg = match &ckpt {
        Some(c) => *c.config(),
        None => preset(&name)?,
    };
    let shape = Shape::from([batch, 3, size, size]);
    let summary = match &ckpt {
        Some(c) => count_params_macs(c, shape, k)?,
        None => count_for_config(&cfg, shape, k)?,
    };
    let baseline = count_for_config(&cfg.single_expert().without_router(), shape, 1)?;
    let layers = layer_costs(&cfg, size, size)?;
    out.write(
        "macs.json",
        serde_json::to_string_pretty(&json!({
            "input": [batch, 3, size, size],
            "k": k,
            "summary": summary,
            "baseline": baseline,
            "layers": layers,
        }))
        .map_err(anyhow::Error::from)?,
    )?;
    let rows = [
        ("params".to_owned(), summary.params),
        ("active params".to_owned(), summary.active_params),
        (format!("MACs (k={k})"), summary.macs),
        ("router MACs".to_owned(), summary.router_macs),
        ("baseline MACs".to_owned(), baseline.macs),
    ];
    for (name, v) in rows {
        println!("{name:<14}{v:>14}");
    }
    Ok(())
}
