//! Flat key=value run configuration: file parsing, command-line overrides,
//! and the run manifest that makes every run replayable.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use gnnmoe::error::{Error, Result};
use gnnmoe::experts::ExpertKind;
use gnnmoe::model::{GnnMoeConfig, PropChoice};
use gnnmoe::train::{Monitor, TrainConfig};

/// Everything a run needs, resolvable from defaults, a config file, and
/// `--set key=value` overrides (later sources win).
#[derive(Clone, Debug)]
pub struct RunSettings {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub prop: PropChoice,
    pub gat_slope: f64,
    pub dropout: f64,
    pub tau: f64,
    pub gate_hidden: usize,
    pub ablate_ffn: bool,
    pub ablate_residual: bool,
    pub force_expert: Option<ExpertKind>,
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub monitor: Monitor,
    pub fractions: (f64, f64, f64),
    pub seeds: Vec<u64>,
    pub jobs: usize,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            data: None,
            out: None,
            hidden_dim: 64,
            num_blocks: 2,
            prop: PropChoice::GcnLike,
            gat_slope: 0.2,
            dropout: 0.1,
            tau: 1.0,
            gate_hidden: 16,
            ablate_ffn: false,
            ablate_residual: false,
            force_expert: None,
            lr: 0.01,
            weight_decay: 5e-4,
            max_epochs: 500,
            patience: 100,
            monitor: Monitor::ValAccuracy,
            fractions: (0.48, 0.32, 0.20),
            seeds: (0..10).collect(),
            jobs: 1,
        }
    }
}

fn config_error(context: &str, key: &str, detail: impl Into<String>) -> Error {
    Error::contract(
        "config",
        format!("{context}: key {key:?}: {}", detail.into()),
    )
}

fn parse_bool(context: &str, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(config_error(context, key, format!("bad boolean {value:?}"))),
    }
}

impl RunSettings {
    /// Apply one key=value assignment; `context` names the source for error
    /// messages (the config path or the flag).
    pub fn apply(&mut self, key: &str, value: &str, context: &str) -> Result<()> {
        let bad = |detail: String| config_error(context, key, detail);
        match key {
            "data" => self.data = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "hidden_dim" => {
                self.hidden_dim = value.parse().map_err(|_| bad(format!("bad count {value:?}")))?
            }
            "num_blocks" => {
                self.num_blocks = value.parse().map_err(|_| bad(format!("bad count {value:?}")))?
            }
            "prop" => {
                self.prop = PropChoice::parse(value)
                    .ok_or_else(|| bad(format!("expected gcn|sage|gat, got {value:?}")))?
            }
            "gat_slope" => {
                self.gat_slope = value.parse().map_err(|_| bad(format!("bad real {value:?}")))?
            }
            "dropout" => {
                self.dropout = value.parse().map_err(|_| bad(format!("bad real {value:?}")))?
            }
            "tau" => self.tau = value.parse().map_err(|_| bad(format!("bad real {value:?}")))?,
            "gate_hidden" => {
                self.gate_hidden = value.parse().map_err(|_| bad(format!("bad count {value:?}")))?
            }
            "ablate_ffn" => self.ablate_ffn = parse_bool(context, key, value)?,
            "ablate_residual" => self.ablate_residual = parse_bool(context, key, value)?,
            "force_expert" => {
                self.force_expert = match value {
                    "none" | "" => None,
                    _ => Some(
                        ExpertKind::parse(value)
                            .ok_or_else(|| bad(format!("expected pp|pt|tp|tt|none, got {value:?}")))?,
                    ),
                }
            }
            "lr" => self.lr = value.parse().map_err(|_| bad(format!("bad real {value:?}")))?,
            "weight_decay" => {
                self.weight_decay = value.parse().map_err(|_| bad(format!("bad real {value:?}")))?
            }
            "max_epochs" => {
                self.max_epochs = value.parse().map_err(|_| bad(format!("bad count {value:?}")))?
            }
            "patience" => {
                self.patience = value.parse().map_err(|_| bad(format!("bad count {value:?}")))?
            }
            "monitor" => {
                self.monitor = match value {
                    "accuracy" => Monitor::ValAccuracy,
                    "loss" => Monitor::ValLoss,
                    _ => return Err(bad(format!("expected accuracy|loss, got {value:?}"))),
                }
            }
            "fractions" => {
                let parts: Vec<f64> = value
                    .split(',')
                    .map(|f| f.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad(format!("bad fraction list {value:?}")))?;
                let [a, b, c] = parts[..] else {
                    return Err(bad("expected three comma-separated fractions".into()));
                };
                self.fractions = (a, b, c);
            }
            "seeds" => {
                self.seeds = value
                    .split(',')
                    .map(|f| f.trim().parse::<u64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad(format!("bad seed list {value:?}")))?;
                if self.seeds.is_empty() {
                    return Err(bad("seed list is empty".into()));
                }
            }
            "jobs" => {
                self.jobs = value.parse().map_err(|_| bad(format!("bad count {value:?}")))?;
                if self.jobs == 0 {
                    return Err(bad("jobs must be >= 1".into()));
                }
            }
            // recorded in manifests; carries no behavior
            "fingerprint" => {}
            _ => return Err(config_error(context, key, "unknown key")),
        }
        Ok(())
    }

    /// Read a key=value file ('#' comments allowed) into these settings.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let context = path.display().to_string();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    file: path.to_path_buf(),
                    line: idx + 1,
                    detail: format!("expected key=value, got {line:?}"),
                });
            };
            self.apply(key.trim(), value.trim(), &context)?;
        }
        Ok(())
    }

    /// Apply repeatable `--set key=value` flags.
    pub fn apply_sets(&mut self, sets: &[String]) -> Result<()> {
        for set in sets {
            let Some((key, value)) = set.split_once('=') else {
                return Err(Error::contract(
                    "config",
                    format!("--set expects key=value, got {set:?}"),
                ));
            };
            self.apply(key.trim(), value.trim(), "--set")?;
        }
        Ok(())
    }

    pub fn model_config(&self, input_dim: usize, num_classes: usize) -> GnnMoeConfig {
        GnnMoeConfig {
            input_dim,
            num_classes,
            hidden_dim: self.hidden_dim,
            num_blocks: self.num_blocks,
            prop: self.prop,
            gat_slope: self.gat_slope,
            dropout: self.dropout,
            tau: self.tau,
            gate_hidden: self.gate_hidden,
            ablate_ffn: self.ablate_ffn,
            ablate_residual: self.ablate_residual,
            force_expert: self.force_expert,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            max_epochs: self.max_epochs,
            patience: self.patience,
            split_fractions: self.fractions,
            seeds: self.seeds.clone(),
            monitor: self.monitor,
        }
    }

    /// Serialize back to key=value lines (sorted); parsing the result
    /// reproduces these settings.
    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let mut map = BTreeMap::new();
        if let Some(data) = &self.data {
            map.insert("data".into(), data.display().to_string());
        }
        if let Some(out) = &self.out {
            map.insert("out".into(), out.display().to_string());
        }
        map.insert("hidden_dim".into(), self.hidden_dim.to_string());
        map.insert("num_blocks".into(), self.num_blocks.to_string());
        map.insert("prop".into(), self.prop.name().to_string());
        map.insert("gat_slope".into(), self.gat_slope.to_string());
        map.insert("dropout".into(), self.dropout.to_string());
        map.insert("tau".into(), self.tau.to_string());
        map.insert("gate_hidden".into(), self.gate_hidden.to_string());
        map.insert("ablate_ffn".into(), self.ablate_ffn.to_string());
        map.insert("ablate_residual".into(), self.ablate_residual.to_string());
        map.insert(
            "force_expert".into(),
            self.force_expert.map_or("none".to_string(), |e| e.name().to_string()),
        );
        map.insert("lr".into(), self.lr.to_string());
        map.insert("weight_decay".into(), self.weight_decay.to_string());
        map.insert("max_epochs".into(), self.max_epochs.to_string());
        map.insert("patience".into(), self.patience.to_string());
        map.insert(
            "monitor".into(),
            match self.monitor {
                Monitor::ValAccuracy => "accuracy".to_string(),
                Monitor::ValLoss => "loss".to_string(),
            },
        );
        map.insert(
            "fractions".into(),
            format!("{},{},{}", self.fractions.0, self.fractions.1, self.fractions.2),
        );
        map.insert(
            "seeds".into(),
            self.seeds
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        map.insert("jobs".into(), self.jobs.to_string());
        map
    }
}

/// SHA-256 over the dataset files (name + bytes each), hex-encoded.
pub fn dataset_fingerprint(dir: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for name in ["edges.tsv", "features.csv", "features.bin", "labels.txt"] {
        let path = dir.join(name);
        if path.exists() {
            hasher.update(name.as_bytes());
            hasher.update(fs::read(&path).map_err(|e| Error::io(&path, e))?);
        }
    }
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for byte in digest {
        write!(hex, "{byte:02x}").unwrap();
    }
    Ok(hex)
}

/// The manifest written into a run directory before training starts:
/// resolved settings plus the dataset fingerprint. Replaying it as a config
/// file reproduces the run.
pub fn write_manifest(settings: &RunSettings, fingerprint: &str, path: &Path) -> Result<()> {
    let mut lines = String::new();
    for (key, value) in settings.to_pairs() {
        lines.push_str(&format!("{key}={value}\n"));
    }
    lines.push_str(&format!("fingerprint={fingerprint}\n"));
    fs::write(path, lines).map_err(|e| Error::io(path, e))
}
