//! Option tables, the flat config file and flag/file merging.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::parser::ValueSource;
use clap::{Arg, ArgMatches, Command};

use crate::CliError;

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "DEMOE_OUT_ROOT";
pub const DEFAULT_OUT_ROOT: &str = "runs";

pub struct Opt {
    pub key: &'static str,
    pub default: Option<&'static str>,
    pub help: &'static str,
}

const fn opt(key: &'static str, default: Option<&'static str>, help: &'static str) -> Opt {
    Opt { key, default, help }
}

pub struct Sub {
    pub name: &'static str,
    pub about: &'static str,
    pub opts: &'static [Opt],
}

pub static SUBCOMMANDS: &[Sub] = &[
    Sub {
        name: "synth",
        about: "Generate the synthetic blur dataset",
        opts: &[
            opt("classes", Some("5"), "number of degradation classes"),
            opt("per_class", Some("100"), "pairs per class"),
            opt("size", Some("32"), "image side in pixels (multiple of 16)"),
            opt("seed", Some("0"), "generator seed"),
        ],
    },
    Sub {
        name: "curate",
        about: "MSE-histogram subsampling and class balancing of a manifest",
        opts: &[
            opt("manifest", None, "input manifest.json"),
            opt("bins", Some("4"), "equal-width MSE bins"),
            opt("per_bin", None, "records drawn per bin (skip subsampling if unset)"),
            opt(
                "drop_tail",
                Some("true"),
                "drop a final bin holding under 5% of the pool",
            ),
            opt("balance", None, "per-class targets, e.g. 0:3758,1:4018"),
            opt("seed", Some("0"), "sampling seed"),
        ],
    },
    Sub {
        name: "train",
        about: "Two-stage training: router + single decoder, then experts",
        opts: &[
            opt("manifest", None, "training manifest.json"),
            opt("preset", Some("toy"), "architecture preset: toy | full"),
            opt("stage", Some("both"), "1 | 2 | both"),
            opt("ckpt", None, "stage-1 checkpoint (required for --stage 2)"),
            opt("epochs1", Some("30"), "stage-1 epochs"),
            opt("epochs2", Some("30"), "stage-2 epochs"),
            opt("batch", Some("8"), "batch size"),
            opt("patch", Some("32"), "training crop side"),
            opt("lr0", Some("0.001"), "initial learning rate"),
            opt("lr_min", Some("0.000001"), "final learning rate"),
            opt("lambda_pixel", Some("1"), "L1 pixel loss weight"),
            opt("lambda_class", Some("0.001"), "router classification loss weight"),
            opt("weight_decay", Some("0"), "AdamW decoupled weight decay"),
            opt("grad_clip", Some("0"), "global gradient-norm clip (0 = off)"),
            opt("hflip", Some("true"), "random horizontal flips"),
            opt("vflip", Some("true"), "random vertical flips"),
            opt(
                "router_noise",
                Some("0"),
                "std of Gaussian noise on router logits in stage 1",
            ),
            opt(
                "top_k",
                Some("1"),
                "experts active in stage-2 training and stored for inference",
            ),
            opt("seed", Some("0"), "training seed"),
        ],
    },
    Sub {
        name: "infer",
        about: "Restore one image (--in/--out) or every record of a manifest",
        opts: &[
            opt("ckpt", None, "checkpoint"),
            opt("k", None, "experts per block (default: the checkpoint's)"),
            opt("expert", None, "force this expert instead of the router choice"),
            opt("in", None, "input PNG"),
            opt("out", None, "output PNG"),
            opt("manifest", None, "manifest for batch inference"),
            opt("format", Some("json"), "report format: json | csv | table"),
        ],
    },
    Sub {
        name: "eval",
        about: "PSNR, SSIM and router accuracy over a manifest",
        opts: &[
            opt("ckpt", None, "checkpoint"),
            opt("manifest", None, "evaluation manifest"),
            opt("k", None, "experts per block (default: the checkpoint's)"),
            opt("expert", None, "force this expert"),
            opt("format", Some("json"), "report format: json | csv | table"),
        ],
    },
    Sub {
        name: "analyze",
        about: "Layer-wise Pearson and CKA similarity of two checkpoints",
        opts: &[
            opt("a", None, "first checkpoint"),
            opt("b", None, "second checkpoint"),
            opt(
                "bandwidth",
                Some("median"),
                "RBF bandwidth: median or a positive number",
            ),
            opt("threshold", Some("0.7"), "high-correlation threshold"),
            opt("format", Some("table"), "stdout format: json | table"),
        ],
    },
    Sub {
        name: "macs",
        about: "Parameter and multiply-accumulate counts",
        opts: &[
            opt("ckpt", None, "checkpoint (overrides --preset)"),
            opt("preset", Some("toy"), "toy | full"),
            opt("size", Some("32"), "input side in pixels"),
            opt("batch", Some("1"), "input batch"),
            opt("k", Some("1"), "active experts"),
        ],
    },
];

fn long(key: &str) -> String {
    key.replace('_', "-")
}

fn leak(s: String) -> &'static str {
    Box::leak(s.into_boxed_str())
}

pub fn command() -> Command {
    let mut cmd = Command::new("demoe")
        .about("Deblurring mixture-of-experts: data, training, inference and analysis")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true);
    for sub in SUBCOMMANDS {
        let mut sc = Command::new(sub.name)
            .about(sub.about)
            .arg(
                Arg::new("config")
                    .long("config")
                    .value_name("FILE")
                    .help("flat key = value config file"),
            )
            .arg(Arg::new("out_dir").long("out-dir").value_name("DIR").help(leak(format!(
                "output directory [default: ${OUT_ROOT_ENV} or {DEFAULT_OUT_ROOT}, then /{}]",
                sub.name
            ))));
        for o in sub.opts {
            let mut a = Arg::new(o.key).long(leak(long(o.key))).value_name("VALUE").help(o.help);
            if let Some(d) = o.default {
                a = a.help(leak(format!("{} [default: {d}]", o.help)));
            }
            sc = sc.arg(a);
        }
        cmd = cmd.subcommand(sc);
    }
    cmd
}

/// Parse a flat `key = value` file. `#` starts a comment line; keys may use
/// dashes or underscores.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected `key = value`, got `{line}`", i + 1))?;
        let k = k.trim().replace('-', "_");
        if k.is_empty() {
            return Err(format!("line {}: empty key", i + 1));
        }
        let v = v.trim().trim_matches('"');
        out.insert(k, v.to_owned());
    }
    Ok(out)
}

pub fn format_config(values: &BTreeMap<String, String>) -> String {
    values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Effective settings for one subcommand run.
pub struct Settings {
    pub sub: &'static Sub,
    values: BTreeMap<String, String>,
    used: BTreeMap<String, String>,
    pub out_dir: PathBuf,
}

impl Settings {
    pub fn from_matches(sub: &'static Sub, m: &ArgMatches) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        if let Some(path) = m.get_one::<String>("config") {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config file {path}: {e}")))?;
            let file = parse_config(&text).map_err(|e| CliError::Usage(format!("{path}: {e}")))?;
            for (k, v) in file {
                if !sub.opts.iter().any(|o| o.key == k) {
                    return Err(CliError::Usage(format!("{path}: unknown key `{k}` for `{}`", sub.name)));
                }
                values.insert(k, v);
            }
        }
        for o in sub.opts {
            if m.value_source(o.key) == Some(ValueSource::CommandLine) {
                if let Some(v) = m.get_one::<String>(o.key) {
                    values.insert(o.key.to_owned(), v.clone());
                }
            }
        }
        let out_dir = match m.get_one::<String>("out_dir") {
            Some(d) => PathBuf::from(d),
            None => {
                let root = std::env::var(OUT_ROOT_ENV).unwrap_or_else(|_| DEFAULT_OUT_ROOT.to_owned());
                Path::new(&root).join(sub.name)
            }
        };
        Ok(Settings {
            sub,
            values,
            used: BTreeMap::new(),
            out_dir,
        })
    }

    fn raw(&mut self, key: &str) -> Option<String> {
        let o = self
            .sub
            .opts
            .iter()
            .find(|o| o.key == key)
            .unwrap_or_else(|| panic!("`{key}` is not an option of `{}`", self.sub.name));
        let v = self.values.get(key).cloned().or(o.default.map(str::to_owned))?;
        self.used.insert(key.to_owned(), v.clone());
        Some(v)
    }

    pub fn opt<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| CliError::Usage(format!("invalid value `{v}` for --{}: {e}", long(key)))),
        }
    }

    pub fn get<T: FromStr>(&mut self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.opt(key)?
            .ok_or_else(|| CliError::Usage(format!("`{}` needs --{}", self.sub.name, long(key))))
    }

    pub fn path(&mut self, key: &str) -> Result<PathBuf, CliError> {
        self.get::<String>(key).map(PathBuf::from)
    }

    /// Every setting consulted so far, defaults included.
    pub fn effective(&self) -> &BTreeMap<String, String> {
        &self.used
    }

    /// Keys given in the file or on the command line but never consulted.
    pub fn unused(&self) -> Vec<&str> {
        self.values
            .keys()
            .filter(|k| !self.used.contains_key(*k))
            .map(String::as_str)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_lines() {
        let m = parse_config("# c\nper-class = 10\n\nseed= \"3\"\n").unwrap();
        assert_eq!(m["per_class"], "10");
        assert_eq!(m["seed"], "3");
        assert!(parse_config("nonsense").is_err());
        assert_eq!(parse_config(&format_config(&m)).unwrap(), m);
    }

    #[test]
    fn every_subcommand_builds() {
        command().debug_assert();
    }
}
