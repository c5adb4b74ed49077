//! Experiment configuration (TOML).
//!
//! ```toml
//! method = "bmc"            # bmc | sgd | er | oewc | multitask
//! seed = 0
//! out_dir = "runs/demo"     # optional
//!
//! [stream]
//! kind = "permuted"         # permuted | split_synthetic | file
//! n_tasks = 16
//! classes_per_task = 4
//! dim = 16
//! train_per_task = 500
//! val_per_task = 100
//!
//! [training]                # lr, train_epochs, rehearsal_epochs, batch_size
//! [training.architecture]   # res_blocks, res_layers_per_block, res_dim, hidden_dim, dropout_p
//! [training.plateau]        # factor, patience, min_delta
//! [bmc]                     # experts, lambda, alpha, beta, distill, buffer_capacity, ...
//! [baseline]                # memory_capacity, replay_coef, ewc_penalty, ewc_gamma
//! ```
//!
//! Every table rejects unknown keys; `method` and `stream` are required.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{BaselineConfig, BaselineMethod};
use crate::error::{Error, Result};
use crate::protocol::BmcConfig;
use crate::streams::{generate_stream, load_feature_stream, StreamKind, StreamParams, TaskStream};
use crate::training::TrainingConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Bmc,
    Sgd,
    Er,
    Oewc,
    Multitask,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Bmc => "bmc",
            Method::Sgd => "sgd",
            Method::Er => "er",
            Method::Oewc => "oewc",
            Method::Multitask => "multitask",
        }
    }

    pub fn baseline(self) -> Option<BaselineMethod> {
        match self {
            Method::Sgd => Some(BaselineMethod::Sgd),
            Method::Er => Some(BaselineMethod::Er),
            Method::Oewc => Some(BaselineMethod::Oewc),
            Method::Bmc | Method::Multitask => None,
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bmc" => Ok(Method::Bmc),
            "sgd" => Ok(Method::Sgd),
            "er" => Ok(Method::Er),
            "oewc" => Ok(Method::Oewc),
            "multitask" => Ok(Method::Multitask),
            other => Err(Error::Unknown {
                what: "method",
                value: other.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StreamSpec {
    Permuted(StreamParams),
    SplitSynthetic(StreamParams),
    /// Pre-extracted features in the binary stream format.
    File {
        path: PathBuf,
    },
}

impl StreamSpec {
    /// Generated streams use `seed`; relative file paths resolve against `base_dir`.
    pub fn build(&self, seed: u64, base_dir: Option<&Path>) -> Result<TaskStream> {
        match self {
            StreamSpec::Permuted(p) => generate_stream(StreamKind::Permuted, p, seed),
            StreamSpec::SplitSynthetic(p) => generate_stream(StreamKind::SplitSynthetic, p, seed),
            StreamSpec::File { path } => {
                let path = match base_dir {
                    Some(d) if path.is_relative() => d.join(path),
                    _ => path.clone(),
                };
                Ok(load_feature_stream(path)?.0)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    #[serde(default)]
    pub seed: u64,
    /// Seed of the generated stream; defaults to `seed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stream_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub stream: StreamSpec,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub bmc: BmcConfig,
    #[serde(default)]
    pub baseline: BaselineConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        match self.method {
            Method::Bmc => self.bmc.validate(),
            Method::Multitask => Ok(()),
            m => self.baseline.validate(m.baseline().expect("baseline method")),
        }?;
        if let StreamSpec::Permuted(p) | StreamSpec::SplitSynthetic(p) = &self.stream {
            p.validate()?;
        }
        Ok(())
    }

    pub fn stream_seed(&self) -> u64 {
        self.stream_seed.unwrap_or(self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = r#"
method = "bmc"
seed = 3

[stream]
kind = "permuted"
n_tasks = 4
classes_per_task = 2
dim = 8
train_per_task = 40
val_per_task = 10

[training]
lr = 0.05
rehearsal_epochs = 3

[training.architecture]
res_dim = 16

[bmc]
experts = 2
lambda = 0.5
distill = "kd_logits"
"#;

    #[test]
    fn parses_and_round_trips() {
        let cfg = ExperimentConfig::from_toml(TOY).unwrap();
        assert_eq!(cfg.bmc.experts, 2);
        assert_eq!(cfg.training.architecture.res_dim, 16);
        assert_eq!(cfg.training.architecture.hidden_dim, 128);
        assert_eq!(cfg.bmc.buffer_capacity, 10_000);
        let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn missing_and_unknown_keys_are_named() {
        let no_method = TOY.replace("method = \"bmc\"", "");
        let err = ExperimentConfig::from_toml(&no_method).unwrap_err().to_string();
        assert!(err.contains("method"), "{err}");

        let extra = TOY.replace("lambda = 0.5", "lambda = 0.5\nlamda = 1.0");
        let err = ExperimentConfig::from_toml(&extra).unwrap_err().to_string();
        assert!(err.contains("lamda"), "{err}");

        let extra = TOY.replace("dim = 8", "dim = 8\nwidth = 3");
        let err = ExperimentConfig::from_toml(&extra).unwrap_err().to_string();
        assert!(err.contains("width"), "{err}");

        let bad = TOY.replace("experts = 2", "experts = 0");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
    }
}
