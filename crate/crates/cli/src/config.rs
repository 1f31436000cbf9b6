//! Run configuration: built-in defaults, overlaid by a JSON file, overlaid by flags.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use uad_core::autoencoder::{AeTrainConfig, AutoencoderSpec};
use uad_core::classifier::TrainConfig;
use uad_core::eval::{MshotConfig, StandardConfig};
use uad_core::flow::FlowTimeouts;
use uad_core::meta::EpisodeConfig;
use uad_core::rng::derive_seed;
use uad_core::selection::SelectionConfig;
use uad_core::synthetic::SyntheticSpec;

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub idle_timeout_s: f64,
    pub active_timeout_s: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        let t = FlowTimeouts::default();
        FlowConfig {
            idle_timeout_s: t.idle_secs(),
            active_timeout_s: t.active_secs(),
        }
    }
}

impl FlowConfig {
    pub fn timeouts(&self) -> Result<FlowTimeouts, CliError> {
        Ok(FlowTimeouts::new(self.idle_timeout_s, self.active_timeout_s)?)
    }
}

/// Everything a subcommand may read. Module seeds are derived from `seed`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub flow: FlowConfig,
    pub selection: SelectionConfig,
    pub autoencoder: AutoencoderSpec,
    pub ae_training: AeTrainConfig,
    pub episodes: EpisodeConfig,
    pub mshot: MshotConfig,
    pub standard: StandardConfig,
    pub synthetic: SyntheticSpec,
    /// Backbone trained for permutation importance when `select` has no reports.
    pub importance: TrainConfig,
    /// Flows used to fit the ablation autoencoder; all training-class flows when `None`.
    pub ae_flows: Option<usize>,
}

/// Flag values that override the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub m: Option<usize>,
    pub n: Option<usize>,
    pub k: Option<usize>,
    pub episodes: Option<usize>,
    pub beta: Option<f64>,
    pub repeats: Option<usize>,
    pub epochs: Option<usize>,
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

pub const THREADS_ENV: &str = "META_UAD_THREADS";

impl RunConfig {
    /// Defaults < `file` < flags; the threads fallback is the environment, then 1.
    pub fn resolve(file: Option<&Path>, flags: &Overrides) -> Result<RunConfig, CliError> {
        let mut cfg = match file {
            None => RunConfig::default(),
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                let over: Value = serde_json::from_str(&text)
                    .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
                let mut base = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
                merge(&mut base, over);
                serde_json::from_value(base).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?
            }
        };
        let file_threads = file.is_some() && cfg.threads > 0;
        if let Some(s) = flags.seed {
            cfg.seed = s;
        }
        cfg.threads = match flags.threads {
            Some(t) => t,
            None if file_threads => cfg.threads,
            None => match std::env::var(THREADS_ENV) {
                Ok(v) => v
                    .trim()
                    .parse()
                    .map_err(|_| CliError::Usage(format!("{THREADS_ENV}={v:?} is not a thread count")))?,
                Err(_) => 1,
            },
        };
        if cfg.threads == 0 {
            return Err(CliError::Usage("threads must be at least 1".into()));
        }
        if let Some(m) = flags.m {
            cfg.episodes.m = m;
            cfg.mshot.m = m;
        }
        if let Some(n) = flags.n {
            cfg.episodes.n = Some(n);
        }
        if let Some(k) = flags.k {
            cfg.episodes.k = k;
        }
        if let Some(e) = flags.episodes {
            cfg.episodes.episodes = e;
        }
        if let Some(b) = flags.beta {
            cfg.episodes.beta = b;
        }
        if let Some(r) = flags.repeats {
            cfg.mshot.repeats = r;
        }
        if let Some(e) = flags.epochs {
            cfg.ae_training.epochs = e;
        }
        let s = cfg.seed;
        cfg.episodes.seed = derive_seed(s, "episodes", 0);
        cfg.mshot.seed = derive_seed(s, "mshot", 0);
        cfg.standard.seed = derive_seed(s, "standard", 0);
        cfg.ae_training.seed = derive_seed(s, "autoencoder", 0);
        cfg.synthetic.seed = derive_seed(s, "synthetic", 0);
        cfg.episodes.validate()?;
        cfg.flow.timeouts()?;
        Ok(cfg)
    }
}
