//! Run configuration: a TOML file with sections, overridable key by key from
//! the command line.
//!
//! Resolution order, later wins: built-in defaults, the config file, then
//! `--key value` flags. A flag may name a key as `section.key`, or by its
//! bare name when only one section has it. A few aliases exist for the
//! common cases: `--objective` is `objective.kind`, `--lambda` is
//! `objective.lambda` and `--seeds` is `sweep.seeds`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use esdkit::data::{SplitSpec, SyntheticSpec};
use esdkit::objective::{CalibrationObjective, CalibrationObjectiveSpec};
use esdkit::selection::{default_inner_grid, default_lambda_grid, SB_ECE_BINS};
use esdkit::training::TrainConfig;

use crate::CliError;

pub const OUT_DIR_ENV: &str = "ESDKIT_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "esdkit-out";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Dataset file: dataset JSON, `x_0..,label` CSV, or an IDX image file
    /// when `labels_path` names the matching IDX label file. When absent the
    /// synthetic generator below is used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels_path: Option<PathBuf>,
    pub classes: usize,
    pub per_class: usize,
    pub separation: f64,
    pub label_noise: f64,
    pub dim: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub eval_bins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSection {
    /// `none`, `esd`, `mmce`, `sb_ece` or `ece_soft`.
    pub kind: String,
    pub lambda: f64,
    /// MMCE kernel width.
    pub kernel_width: f64,
    /// SB-ECE bins (default 15) or soft-ECE bins (default 20).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_bins: Option<usize>,
    /// SB-ECE softening temperature.
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// Number of training seeds, starting at `train.seed`.
    pub seeds: u64,
    pub lambda_grid: Vec<f64>,
    /// MMCE widths or SB-ECE temperatures; the objective's default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner_grid: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// 0 is quiet, 1 prints summaries, 2 adds per-epoch lines.
    pub verbosity: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub split: SplitSpec,
    pub train: TrainSection,
    pub objective: ObjectiveSection,
    pub sweep: SweepSection,
    pub output: OutputSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SyntheticSpec::default();
        let train = TrainConfig::default();
        Self {
            data: DataSection {
                path: None,
                labels_path: None,
                classes: synth.classes,
                per_class: synth.per_class,
                separation: synth.separation,
                label_noise: synth.label_noise,
                dim: synth.dim,
                seed: synth.seed,
            },
            split: SplitSpec::default(),
            train: TrainSection {
                epochs: train.epochs,
                batch_size: train.batch_size,
                lr: train.lr,
                weight_decay: train.weight_decay,
                seed: train.seed,
                hidden: train.hidden,
                eval_bins: train.eval_bins,
            },
            objective: ObjectiveSection {
                kind: "none".into(),
                lambda: 0.0,
                kernel_width: 0.4,
                num_bins: None,
                temperature: 0.01,
            },
            sweep: SweepSection {
                seeds: 1,
                lambda_grid: default_lambda_grid(),
                inner_grid: None,
            },
            output: OutputSection {
                dir: None,
                verbosity: 1,
            },
        }
    }
}

const ALIASES: [(&str, &str); 3] = [
    ("objective", "objective.kind"),
    ("lambda", "objective.lambda"),
    ("seeds", "sweep.seeds"),
];

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::usage(msg)
}

fn merge(base: &mut Table, overlay: Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parse a flag value as a TOML literal: numbers, booleans, arrays; a bare
/// comma list becomes an array and anything else a string.
fn parse_value(raw: &str) -> Value {
    let attempt = |text: &str| {
        toml::from_str::<Table>(&format!("v = {text}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
    };
    attempt(raw)
        .or_else(|| {
            raw.contains(',')
                .then(|| attempt(&format!("[{raw}]")))
                .flatten()
        })
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Resolve a flag name to `(section, key)` against the default layout.
fn resolve_key(defaults: &Table, name: &str) -> Result<(String, String), CliError> {
    let name = name.replace('-', "_");
    let full = ALIASES
        .iter()
        .find(|(alias, _)| *alias == name)
        .map(|(_, target)| target.to_string())
        .unwrap_or(name);
    if let Some((section, key)) = full.split_once('.') {
        let known = defaults
            .get(section)
            .and_then(Value::as_table)
            .map(|t| t.contains_key(key) || optional_key(section, key));
        return match known {
            Some(true) => Ok((section.into(), key.into())),
            Some(false) => Err(config_err(format!("unknown config key `{section}.{key}`"))),
            None => Err(config_err(format!("unknown config section `{section}`"))),
        };
    }
    let owners: Vec<&String> = defaults
        .iter()
        .filter(|(s, t)| {
            t.as_table()
                .is_some_and(|t| t.contains_key(&full) || optional_key(s, &full))
        })
        .map(|(s, _)| s)
        .collect();
    match owners.as_slice() {
        [one] => Ok(((*one).clone(), full)),
        [] => Err(config_err(format!("unknown config key `{full}`"))),
        many => Err(config_err(format!(
            "ambiguous key `{full}`; qualify it as one of {}",
            many.iter()
                .map(|s| format!("`{s}.{full}`"))
                .collect::<Vec<_>>()
                .join(", ")
        ))),
    }
}

/// Keys that exist but are omitted from the serialized defaults.
fn optional_key(section: &str, key: &str) -> bool {
    matches!(
        (section, key),
        ("data", "path")
            | ("data", "labels_path")
            | ("objective", "num_bins")
            | ("sweep", "inner_grid")
            | ("output", "dir")
    )
}

/// Split `--key value` / `--key=value` pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            return Err(config_err(format!(
                "unexpected argument `{arg}`; overrides take the form --key value"
            )));
        };
        if let Some((k, v)) = flag.split_once('=') {
            out.push((k.to_string(), v.to_string()));
        } else {
            let value = it
                .next()
                .ok_or_else(|| config_err(format!("flag `--{flag}` needs a value")))?;
            out.push((flag.to_string(), value.clone()));
        }
    }
    Ok(out)
}

impl RunConfig {
    /// Defaults, then `file`, then `overrides`; validated.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let defaults = Value::try_from(RunConfig::default())
            .map_err(|e| CliError::internal(format!("serializing defaults: {e}")))?;
        let Value::Table(defaults) = defaults else {
            return Err(CliError::internal("defaults are not a table"));
        };
        let mut table = defaults.clone();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
            let parsed: Table = toml::from_str(&text)
                .map_err(|e| config_err(format!("config {}: {e}", path.display())))?;
            merge(&mut table, parsed);
        }
        for (name, raw) in overrides {
            let (section, key) = resolve_key(&defaults, name)?;
            let entry = table
                .entry(section.clone())
                .or_insert_with(|| Value::Table(Table::new()));
            let Value::Table(t) = entry else {
                return Err(config_err(format!("`{section}` is not a section")));
            };
            t.insert(key, parse_value(raw));
        }
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_err(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: esdkit::Error| config_err(e.to_string());
        self.split.validate().map_err(usage)?;
        self.train_config()
            .map_err(usage)?
            .validate()
            .map_err(usage)?;
        if self.data.path.is_none() {
            let s = self.synthetic_spec();
            if s.classes < 2 {
                return Err(config_err("`data.classes` must be >= 2"));
            }
            if s.per_class == 0 {
                return Err(config_err("`data.per_class` must be >= 1"));
            }
            if !(0.0..0.5).contains(&s.label_noise) {
                return Err(config_err("`data.label_noise` must be in [0, 0.5)"));
            }
            if !(2..=8).contains(&s.dim) {
                return Err(config_err("`data.dim` must be between 2 and 8"));
            }
            if !(s.separation >= 0.0 && s.separation.is_finite()) {
                return Err(config_err("`data.separation` must be >= 0"));
            }
        }
        if self.sweep.seeds == 0 {
            return Err(config_err("`sweep.seeds` must be >= 1"));
        }
        if self.sweep.lambda_grid.is_empty() {
            return Err(config_err("`sweep.lambda_grid` is empty"));
        }
        if self
            .sweep
            .lambda_grid
            .iter()
            .any(|l| !(*l >= 0.0 && l.is_finite()))
        {
            return Err(config_err("`sweep.lambda_grid` entries must be >= 0"));
        }
        if self.output.verbosity > 2 {
            return Err(config_err("`output.verbosity` must be 0, 1 or 2"));
        }
        Ok(())
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            classes: self.data.classes,
            per_class: self.data.per_class,
            separation: self.data.separation,
            label_noise: self.data.label_noise,
            dim: self.data.dim,
            seed: self.data.seed,
        }
    }

    /// The objective named by `objective.kind` with its hyperparameters.
    pub fn objective(&self) -> esdkit::Result<CalibrationObjective> {
        let o = &self.objective;
        Ok(match CalibrationObjective::from_name(&o.kind)? {
            CalibrationObjective::Mmce { .. } => CalibrationObjective::Mmce {
                kernel_width: o.kernel_width,
            },
            CalibrationObjective::SbEce { .. } => CalibrationObjective::SbEce {
                num_bins: o.num_bins.unwrap_or(SB_ECE_BINS),
                temperature: o.temperature,
            },
            CalibrationObjective::EceSoft { num_bins } => CalibrationObjective::EceSoft {
                num_bins: o.num_bins.unwrap_or(num_bins),
            },
            other => other,
        })
    }

    pub fn objective_spec(&self) -> esdkit::Result<CalibrationObjectiveSpec> {
        let objective = self.objective()?;
        if objective == CalibrationObjective::None {
            return Ok(CalibrationObjectiveSpec::none());
        }
        CalibrationObjectiveSpec::new(objective, self.objective.lambda)
    }

    pub fn train_config(&self) -> esdkit::Result<TrainConfig> {
        let t = &self.train;
        Ok(TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            weight_decay: t.weight_decay,
            seed: t.seed,
            hidden: t.hidden.clone(),
            objective: self.objective_spec()?,
            eval_bins: t.eval_bins,
        })
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.sweep.seeds).map(|i| self.train.seed + i).collect()
    }

    pub fn inner_grid(&self) -> esdkit::Result<Option<Vec<f64>>> {
        Ok(match &self.sweep.inner_grid {
            Some(g) => Some(g.clone()),
            None => default_inner_grid(&self.objective()?),
        })
    }

    /// Output directory: `--out`, then `output.dir`, then the environment
    /// variable, then `./esdkit-out`.
    pub fn out_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.output.dir.clone())
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
    }

    /// SHA-256 of the canonical JSON form, excluding the output section.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("output");
        }
        let digest = Sha256::digest(value.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn defaults_validate_and_hash_is_stable() {
        let a = RunConfig::load(None, &[]).unwrap();
        assert_eq!(a, RunConfig::default());
        assert_eq!(a.hash(), RunConfig::default().hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn overrides_and_aliases() {
        let cfg = RunConfig::load(
            None,
            &ov(&[
                ("objective", "esd"),
                ("lambda", "2.5"),
                ("seeds", "5"),
                ("batch-size", "64"),
                ("train.seed", "9"),
                ("hidden", "32,16"),
            ]),
        )
        .unwrap();
        assert_eq!(cfg.objective.kind, "esd");
        assert_eq!(cfg.objective.lambda, 2.5);
        assert_eq!(cfg.sweep.seeds, 5);
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.train.hidden, vec![32, 16]);
        assert_eq!(cfg.seeds(), vec![9, 10, 11, 12, 13]);
        assert_eq!(cfg.objective_spec().unwrap().lambda, 2.5);
    }

    #[test]
    fn rejects_unknown_and_ambiguous_keys() {
        let err = RunConfig::load(None, &ov(&[("bogus", "1")])).unwrap_err();
        assert!(err.message.contains("bogus"), "{}", err.message);
        let err = RunConfig::load(None, &ov(&[("seed", "1")])).unwrap_err();
        assert!(err.message.contains("ambiguous"), "{}", err.message);
        let err = RunConfig::load(None, &ov(&[("split.train", "1.5")])).unwrap_err();
        assert!(err.message.contains("train"), "{}", err.message);
    }

    #[test]
    fn file_sections_merge_and_unknown_fields_fail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "[train]\nepochs = 3\n[objective]\nkind = \"mmce\"\nlambda = 1.0\n",
        )
        .unwrap();
        let cfg = RunConfig::load(Some(&path), &ov(&[("epochs", "4")])).unwrap();
        assert_eq!(cfg.train.epochs, 4);
        assert_eq!(cfg.train.batch_size, 128);
        assert_eq!(
            cfg.objective().unwrap(),
            CalibrationObjective::Mmce { kernel_width: 0.4 }
        );
        assert_eq!(cfg.inner_grid().unwrap().unwrap().len(), 4);

        std::fs::write(&path, "[train]\nepoch = 3\n").unwrap();
        let err = RunConfig::load(Some(&path), &[]).unwrap_err();
        assert!(err.message.contains("epoch"), "{}", err.message);
    }

    #[test]
    fn hash_ignores_output_section() {
        let a = RunConfig::load(None, &ov(&[("output.dir", "/tmp/x")])).unwrap();
        let b = RunConfig::load(None, &ov(&[("verbosity", "0")])).unwrap();
        let c = RunConfig::load(None, &ov(&[("epochs", "7")])).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn override_flag_parsing() {
        let args: Vec<String> = ["--lambda", "1", "--epochs=3"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(
            parse_overrides(&args).unwrap(),
            ov(&[("lambda", "1"), ("epochs", "3")])
        );
        assert!(parse_overrides(&["--lambda".to_string()]).is_err());
        assert!(parse_overrides(&["stray".to_string()]).is_err());
    }
}
