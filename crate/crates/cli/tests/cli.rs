use std::path::{Path, PathBuf};
use std::process::Command;

use demoe::io::{read_png, write_png};
use demoe::net::{demoe_forward, extract_expert, Checkpoint};
use demoe::synth::{DatasetManifest, ManifestRecord};
use demoe_cli::{emit_report, run, Format, Report, CONFIG_ECHO, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, FILE_LIST};
use tempfile::TempDir;

fn demoe(args: &[&str]) -> i32 {
    run(std::iter::once("demoe").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn listed(dir: &Path) -> Vec<String> {
    serde_json::from_str(&std::fs::read_to_string(dir.join(FILE_LIST)).unwrap()).unwrap()
}

/// Tiny dataset plus a briefly trained two-stage checkpoint.
fn trained(tmp: &TempDir, per_class: &str, epochs: &str) -> (PathBuf, PathBuf) {
    let data = tmp.path().join("data");
    let run_dir = tmp.path().join("train");
    let per = per_class.to_owned();
    assert_eq!(
        demoe(&["synth", "--per-class", &per, "--seed", "3", "--out-dir", s(&data)]),
        EXIT_OK
    );
    let manifest = data.join("manifest.json");
    let code = demoe(&[
        "train",
        "--manifest",
        s(&manifest),
        "--epochs1",
        epochs,
        "--epochs2",
        epochs,
        "--out-dir",
        s(&run_dir),
    ]);
    assert_eq!(code, EXIT_OK);
    (manifest, run_dir.join("stage2.dmoe"))
}

#[test]
fn synth_counts_and_echo_reproduces() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let code = demoe(&[
        "synth",
        "--classes",
        "5",
        "--per-class",
        "100",
        "--size",
        "32",
        "--seed",
        "7",
        "--out-dir",
        s(&a),
    ]);
    assert_eq!(code, EXIT_OK);
    let m = DatasetManifest::load(a.join("manifest.json")).unwrap();
    assert_eq!(m.len(), 500);
    assert_eq!(m.class_counts(), vec![100; 5]);
    let files = listed(&a);
    assert_eq!(files.len(), 1000 + 3);
    assert!(files.contains(&CONFIG_ECHO.to_owned()));
    let echo = std::fs::read_to_string(a.join(CONFIG_ECHO)).unwrap();
    assert!(echo.contains("per_class = 100") && echo.contains("seed = 7"));

    let b = tmp.path().join("b");
    assert_eq!(
        demoe(&["synth", "--config", s(&a.join(CONFIG_ECHO)), "--out-dir", s(&b)]),
        EXIT_OK
    );
    for f in files
        .iter()
        .filter(|f| f.ends_with(".png") || f.ends_with(".json") && *f != FILE_LIST)
    {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "# tiny\nper-class = 3\nclasses = 2\nsize = 16\n").unwrap();
    let out = tmp.path().join("o");
    assert_eq!(
        demoe(&["synth", "--config", s(&cfg), "--per-class", "2", "--out-dir", s(&out)]),
        EXIT_OK
    );
    let m = DatasetManifest::load(out.join("manifest.json")).unwrap();
    assert_eq!(m.class_counts(), vec![2, 2]);

    std::fs::write(&cfg, "per_class = 3\nbogus = 1\n").unwrap();
    assert_eq!(demoe(&["synth", "--config", s(&cfg), "--out-dir", s(&out)]), EXIT_USAGE);
    assert_eq!(demoe(&["synth", "--size", "30", "--out-dir", s(&out)]), EXIT_USAGE);
    assert_eq!(
        demoe(&["synth", "--per-class", "many", "--out-dir", s(&out)]),
        EXIT_USAGE
    );
    assert_eq!(demoe(&["eval", "--out-dir", s(&out)]), EXIT_USAGE);
}

#[test]
fn unknown_flag_is_named() {
    let out = Command::new(env!("CARGO_BIN_EXE_demoe"))
        .args(["synth", "--per-clas", "3"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--per-clas"), "{err}");
    let help = Command::new(env!("CARGO_BIN_EXE_demoe"))
        .arg("--help")
        .output()
        .unwrap();
    assert_eq!(help.status.code(), Some(EXIT_OK));
    assert!(String::from_utf8_lossy(&help.stdout).contains("synth"));
}

#[test]
fn env_sets_default_output_root() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_demoe"))
        .args(["macs", "--preset", "toy"])
        .env(demoe_cli::OUT_ROOT_ENV, tmp.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_OK));
    assert!(tmp.path().join("macs/macs.json").exists());
    assert!(tmp.path().join("macs").join(FILE_LIST).exists());
}

#[test]
fn runtime_failure_removes_partial_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(
        demoe(&["synth", "--per-class", "2", "--size", "16", "--out-dir", s(&data)]),
        EXIT_OK
    );
    let out = tmp.path().join("fresh/curated");
    let code = demoe(&[
        "curate",
        "--manifest",
        s(&data.join("manifest.json")),
        "--balance",
        "0:4,7:2",
        "--out-dir",
        s(&out),
    ]);
    assert_eq!(code, EXIT_RUNTIME);
    assert!(!tmp.path().join("fresh").exists());

    // a failing run into an existing directory leaves other files alone
    let keep = tmp.path().join("keep");
    std::fs::create_dir_all(&keep).unwrap();
    std::fs::write(keep.join("note.txt"), "x").unwrap();
    let bad = tmp.path().join("bad.dmoe");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let code = demoe(&[
        "eval",
        "--ckpt",
        s(&bad),
        "--manifest",
        s(&data.join("manifest.json")),
        "--out-dir",
        s(&keep),
    ]);
    assert_eq!(code, EXIT_RUNTIME);
    let left: Vec<_> = std::fs::read_dir(&keep).unwrap().collect();
    assert_eq!(left.len(), 1);
}

#[test]
fn curate_subsamples_and_balances() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(
        demoe(&["synth", "--per-class", "6", "--size", "16", "--out-dir", s(&data)]),
        EXIT_OK
    );
    let out = tmp.path().join("c");
    let code = demoe(&[
        "curate",
        "--manifest",
        s(&data.join("manifest.json")),
        "--balance",
        "0:9,1:6,2:3,3:12,4:6",
        "--seed",
        "4",
        "--out-dir",
        s(&out),
    ]);
    assert_eq!(code, EXIT_OK);
    let m = DatasetManifest::load(out.join("manifest.json")).unwrap();
    assert_eq!(m.class_counts(), vec![9, 6, 3, 12, 6]);
    // paths still point at the original images
    m.validate(5, Some(&out)).unwrap();
    assert_eq!(m.curation_log.last().unwrap().op, "balance_dataset");
    assert_eq!(
        demoe(&[
            "curate",
            "--manifest",
            s(&data.join("manifest.json")),
            "--out-dir",
            s(&out)
        ]),
        EXIT_USAGE
    );
}

#[test]
fn forced_expert_matches_extracted_baseline() {
    let tmp = tempfile::tempdir().unwrap();
    let (manifest, ckpt_path) = trained(&tmp, "2", "1");
    let ckpt = Checkpoint::load(&ckpt_path).unwrap();
    let m = DatasetManifest::load(&manifest).unwrap();
    let input = manifest.parent().unwrap().join(&m.records[4].degraded);
    let out_png = tmp.path().join("b.png");
    let code = demoe(&[
        "infer",
        "--ckpt",
        s(&ckpt_path),
        "--k",
        "1",
        "--expert",
        "3",
        "--in",
        s(&input),
        "--out",
        s(&out_png),
        "--out-dir",
        s(&tmp.path().join("inf")),
    ]);
    assert_eq!(code, EXIT_OK);
    let base = extract_expert(&ckpt, 3).unwrap();
    let y = read_png(&input).unwrap();
    let want = demoe_forward(&base, &y, 1, None)
        .unwrap()
        .restored
        .map(|v| v.clamp(0.0, 1.0));
    let want_png = tmp.path().join("want.png");
    write_png(&want_png, &want).unwrap();
    assert_eq!(std::fs::read(&out_png).unwrap(), std::fs::read(&want_png).unwrap());
    assert!(listed(&tmp.path().join("inf")).iter().any(|f| f.ends_with("b.png")));
}

fn load_report(dir: &Path) -> Report {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn batch_inference_contracts() {
    let tmp = tempfile::tempdir().unwrap();
    let (manifest, ckpt) = trained(&tmp, "4", "3");
    let run_k5 = |name: &str| {
        let dir = tmp.path().join(name);
        let code = demoe(&[
            "infer",
            "--ckpt",
            s(&ckpt),
            "--manifest",
            s(&manifest),
            "--k",
            "5",
            "--format",
            "csv",
            "--out-dir",
            s(&dir),
        ]);
        assert_eq!(code, EXIT_OK);
        dir
    };
    let (a, b) = (run_k5("k5a"), run_k5("k5b"));
    for f in ["report.json", "report.csv", "restored/00007.png"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let rep = load_report(&a);
    assert_eq!(rep.images.len(), 20);
    for im in &rep.images {
        assert_eq!(im.weights.len(), 5);
        assert!((im.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }

    // eval agrees with infer and writes no images
    let e = tmp.path().join("eval");
    let code = demoe(&[
        "eval",
        "--ckpt",
        s(&ckpt),
        "--manifest",
        s(&manifest),
        "--k",
        "5",
        "--out-dir",
        s(&e),
    ]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(load_report(&e).images, rep.images);
    assert!(!e.join("restored").exists());
}

#[test]
fn missing_records_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let (manifest, ckpt) = trained(&tmp, "2", "1");
    let mut m = DatasetManifest::load(&manifest).unwrap();
    m.records.push(ManifestRecord {
        degraded: "degraded/missing.png".into(),
        clean: "clean/missing.png".into(),
        label: 0,
        mse: 0.0,
    });
    let broken = manifest.with_file_name("broken.json");
    m.save(&broken).unwrap();
    let out = tmp.path().join("partial");
    let code = demoe(&[
        "eval",
        "--ckpt",
        s(&ckpt),
        "--manifest",
        s(&broken),
        "--out-dir",
        s(&out),
    ]);
    assert_eq!(code, EXIT_RUNTIME);
    let rep = load_report(&out);
    assert_eq!(rep.images.len(), 10);
    assert_eq!(rep.failures.len(), 1);
    assert!(std::fs::read_to_string(out.join("failures.txt"))
        .unwrap()
        .contains("missing.png"));
}

fn csv_rows(text: &str) -> Vec<csv::StringRecord> {
    csv::Reader::from_reader(text.as_bytes())
        .records()
        .map(Result::unwrap)
        .collect()
}

fn field(v: &str) -> f64 {
    if v == "inf" {
        f64::INFINITY
    } else {
        v.parse().unwrap()
    }
}

#[test]
fn report_formats_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let (manifest, ckpt) = trained(&tmp, "2", "1");
    let out = tmp.path().join("r");
    assert_eq!(
        demoe(&[
            "eval",
            "--ckpt",
            s(&ckpt),
            "--manifest",
            s(&manifest),
            "--out-dir",
            s(&out)
        ]),
        EXIT_OK
    );
    let rep = load_report(&out);
    let rows = csv_rows(&emit_report(&rep, Format::Csv).unwrap());
    assert_eq!(rows.len(), rep.images.len() + 1);
    for (im, row) in rep.images.iter().zip(&rows) {
        assert_eq!(&row[0], im.id);
        assert_eq!(row[1].parse::<usize>().unwrap(), im.label);
        assert_eq!(row[2].parse::<usize>().ok(), im.predicted);
        assert_eq!(field(&row[4]), im.psnr.db());
        assert_eq!(field(&row[5]), im.ssim);
        assert_eq!(field(&row[6]), im.input_psnr.db());
        assert_eq!(field(&row[7]), im.input_ssim);
        let w: Vec<f64> = (8..row.len()).map(|i| field(&row[i])).collect();
        assert_eq!(w, im.weights);
    }
    // the aggregate row is the column mean
    let last = rows.last().unwrap();
    assert_eq!(&last[0], "mean");
    let n = rep.images.len() as f64;
    let mean_of = |f: &dyn Fn(&demoe_cli::ImageRecord) -> f64| rep.images.iter().map(f).sum::<f64>() / n;
    assert!((field(&last[4]) - mean_of(&|r| r.psnr.db())).abs() <= 1e-9);
    assert!((field(&last[5]) - mean_of(&|r| r.ssim)).abs() <= 1e-9);
    assert!((field(&last[7]) - mean_of(&|r| r.input_ssim)).abs() <= 1e-9);
    assert!((field(&last[8]) - mean_of(&|r| r.weights[0])).abs() <= 1e-9);
    let acc = mean_of(&|r| f64::from(u8::from(r.correct.unwrap())));
    assert!((field(&last[3]) - acc).abs() <= 1e-9);

    let t1 = emit_report(&rep, Format::Table).unwrap();
    let t2 = emit_report(&load_report(&out), Format::Table).unwrap();
    assert_eq!(t1, t2);
    assert!(t1.lines().last().unwrap().starts_with("mean"));

    let mut empty = rep.clone();
    empty.images.clear();
    assert!(emit_report(&empty, Format::Json).is_err());
}

#[test]
fn analyze_and_macs() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, ckpt) = trained(&tmp, "1", "1");
    let out = tmp.path().join("sim");
    let code = demoe(&["analyze", "--a", s(&ckpt), "--b", s(&ckpt), "--out-dir", s(&out)]);
    assert_eq!(code, EXIT_OK);
    let rep =
        demoe::similarity::SimilarityReport::from_json(&std::fs::read_to_string(out.join("similarity.json")).unwrap())
            .unwrap();
    assert!(rep.layers.iter().filter_map(|l| l.r).all(|r| (r - 1.0).abs() < 1e-12));
    let txt = std::fs::read_to_string(out.join("similarity.txt")).unwrap();
    assert!(txt.starts_with("layer"));
    assert_eq!(
        demoe(&[
            "analyze",
            "--a",
            s(&ckpt),
            "--b",
            s(&ckpt),
            "--bandwidth=-1",
            "--out-dir",
            s(&out)
        ]),
        EXIT_USAGE
    );

    let m = tmp.path().join("m");
    assert_eq!(
        demoe(&["macs", "--ckpt", s(&ckpt), "--size", "32", "--out-dir", s(&m)]),
        EXIT_OK
    );
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(m.join("macs.json")).unwrap()).unwrap();
    let macs = v["summary"]["macs"].as_u64().unwrap();
    let router = v["summary"]["router_macs"].as_u64().unwrap();
    assert_eq!(macs - router, v["baseline"]["macs"].as_u64().unwrap());
}
