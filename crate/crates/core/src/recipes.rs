//! Comparison runs over one seeded dataset: similarity metrics, post-net
//! and head variants, and separator/text-source variants of the word model.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, Dataset, SimConfig};
use crate::scoring::DerMode;
use crate::send::{
    best_threshold, evaluate, train, validation_posteriors, Head, PostNet, SendConfig, SendError, SendModel,
    TrainConfig,
};
use crate::sendti::{evaluate_words, train_ti, SendTiConfig, SendTiModel, TextConfig, TextSource};
use crate::similarity::Metric;

#[derive(Debug, Error)]
pub enum RecipeError {
    #[error("unknown recipe {0:?} (expected metrics, postnet_pse or sendti_sc)")]
    Unknown(String),
    #[error("invalid recipe config: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Send(#[from] SendError),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    Metrics,
    PostnetPse,
    SendtiSc,
}

impl Recipe {
    pub const ALL: [Recipe; 3] = [Recipe::Metrics, Recipe::PostnetPse, Recipe::SendtiSc];

    pub fn name(self) -> &'static str {
        match self {
            Recipe::Metrics => "metrics",
            Recipe::PostnetPse => "postnet_pse",
            Recipe::SendtiSc => "sendti_sc",
        }
    }
}

impl FromStr for Recipe {
    type Err = RecipeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Recipe::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| RecipeError::Unknown(s.to_string()))
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything a recipe run depends on. Model sizes for the frame-level
/// recipes come from `model`; each row overrides only the field it
/// varies. The word-level recipe uses `text_sim`, `ti_model` and `ti_train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecipeConfig {
    pub seeds: Vec<u64>,
    pub sim: SimConfig,
    pub model: SendConfig,
    pub train: TrainConfig,
    pub text_sim: SimConfig,
    pub ti_model: SendTiConfig,
    pub ti_train: TrainConfig,
    /// Substitution rate of recognition text.
    pub error_rate: f64,
}

impl Default for RecipeConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Simulation setting used for the desk-scale runs: 2-4 speakers, many
/// distinct training speakers so the encoders must generalize.
pub fn desk_sim() -> SimConfig {
    SimConfig {
        seed: 7,
        train_samples: 1000,
        validation_samples: 60,
        pool_speakers: 1000,
        validation_speakers: 20,
        embedding_dim: 32,
        separation: 0.5,
        feature_dim: 32,
        ..SimConfig::default()
    }
}

/// Frame-level model sized for one CPU core.
pub fn desk_model(sim: &SimConfig) -> SendConfig {
    SendConfig {
        feature_dim: sim.input_dim(),
        embedding_dim: sim.embedding_dim,
        encoding_dim: 32,
        capacity: 4,
        max_overlap: 2,
        metric: Metric::SigmaDot,
        head: Head::Pse,
        post_net: PostNet::FsmnFcn,
        speech_blocks: 2,
        speech_hidden: 64,
        speech_filter: 5,
        speaker_layers: 1,
        speaker_hidden: 32,
        post_blocks: 1,
        post_hidden: 16,
        post_filter: 5,
        post_fcn_hidden: 32,
    }
}

pub fn desk_train() -> TrainConfig {
    TrainConfig {
        seed: 0,
        epochs: 4,
        batch_size: 8,
        learning_rate: 3e-3,
        warmup_steps: 100,
        clip_norm: 5.0,
        threshold: 0.5,
    }
}

pub fn desk_text_sim() -> SimConfig {
    SimConfig {
        train_samples: 1000,
        validation_samples: 60,
        lexical_dim: 16,
        vocab_size: 32,
        ..desk_sim()
    }
}

pub fn desk_ti_model(sim: &SimConfig) -> SendTiConfig {
    SendTiConfig {
        feature_dim: sim.input_dim(),
        embedding_dim: sim.embedding_dim,
        encoding_dim: 32,
        capacity: 4,
        vocab_size: sim.vocab_size,
        speech_blocks: 2,
        speech_hidden: 64,
        speech_filter: 5,
        speaker_layers: 1,
        speaker_hidden: 32,
        text_blocks: 1,
        text_heads: 2,
        text_ffn: 32,
        positional: true,
        post_net: PostNet::FsmnFcn,
        post_blocks: 1,
        post_hidden: 16,
        post_filter: 5,
        post_fcn_hidden: 32,
    }
}

pub fn desk_ti_train() -> TrainConfig {
    TrainConfig {
        epochs: 8,
        ..desk_train()
    }
}

impl RecipeConfig {
    pub fn desk() -> Self {
        let sim = desk_sim();
        let text_sim = desk_text_sim();
        Self {
            seeds: vec![1, 2, 3, 4, 5],
            model: desk_model(&sim),
            sim,
            train: desk_train(),
            ti_model: desk_ti_model(&text_sim),
            text_sim,
            ti_train: desk_ti_train(),
            error_rate: 0.15,
        }
    }

    pub fn validate(&self) -> Result<(), RecipeError> {
        if self.seeds.is_empty() {
            return Err(RecipeError::Config("at least one seed is needed".into()));
        }
        if !(0.0..=1.0).contains(&self.error_rate) {
            return Err(RecipeError::Config(format!("error rate {} outside [0, 1]", self.error_rate)));
        }
        self.sim.validate()?;
        self.text_sim.validate()?;
        self.model.validate()?;
        self.ti_model.validate()?;
        self.train.validate()?;
        self.ti_train.validate()?;
        if self.model.feature_dim != self.sim.input_dim() || self.model.embedding_dim != self.sim.embedding_dim {
            return Err(RecipeError::Config("model dims do not match the simulation".into()));
        }
        if self.ti_model.feature_dim != self.text_sim.input_dim()
            || self.ti_model.embedding_dim != self.text_sim.embedding_dim
            || self.ti_model.vocab_size != self.text_sim.vocab_size
        {
            return Err(RecipeError::Config("word model dims do not match the text simulation".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, RecipeError> {
        let c: Self = toml::from_str(text).map_err(|e| RecipeError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    /// Column means over seeds; `None` where a column does not apply.
    pub values: Vec<Option<f64>>,
    /// Per-seed values, same column order.
    pub per_seed: Vec<Vec<Option<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub recipe: Recipe,
    pub seeds: Vec<u64>,
    pub columns: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Mean of column `col` in row `label`.
    pub fn value(&self, label: &str, col: &str) -> Option<f64> {
        let c = self.columns.iter().position(|x| x == col)?;
        self.row(label)?.values[c]
    }

    /// One JSON record per row.
    pub fn to_jsonl(&self) -> String {
        self.rows
            .iter()
            .map(|r| {
                let mut rec = serde_json::Map::new();
                rec.insert("recipe".into(), self.recipe.name().into());
                rec.insert("row".into(), r.label.clone().into());
                for (c, v) in self.columns.iter().zip(&r.values) {
                    rec.insert(c.clone(), v.map_or(serde_json::Value::Null, Into::into));
                }
                rec.insert("per_seed".into(), serde_json::to_value(&r.per_seed).expect("numbers"));
                serde_json::Value::Object(rec).to_string() + "\n"
            })
            .collect()
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(6);
        writeln!(f, "{} (mean over seeds {:?})", self.recipe, self.seeds)?;
        write!(f, "{:<width$}", "config")?;
        for c in &self.columns {
            write!(f, "  {c:>14}")?;
        }
        writeln!(f)?;
        for r in &self.rows {
            write!(f, "{:<width$}", r.label)?;
            for (c, v) in self.columns.iter().zip(&r.values) {
                match v {
                    Some(v) if c.contains("der") => write!(f, "  {:>13.2}%", 100.0 * v)?,
                    Some(v) => write!(f, "  {v:>14.2}")?,
                    None => write!(f, "  {:>14}", "-")?,
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

fn mean_row(label: String, per_seed: Vec<Vec<Option<f64>>>) -> AblationRow {
    let cols = per_seed.first().map_or(0, Vec::len);
    let values = (0..cols)
        .map(|c| {
            let xs: Option<Vec<f64>> = per_seed.iter().map(|s| s[c]).collect();
            xs.map(|xs| xs.iter().sum::<f64>() / xs.len() as f64)
        })
        .collect();
    AblationRow {
        label,
        values,
        per_seed,
    }
}

/// Trains one frame-level model per seed and scores the validation split.
/// Multi-label rows use the best threshold of a 0.05-step sweep.
fn frame_row(
    cfg: &RecipeConfig,
    data: &Dataset,
    model: SendConfig,
    label: String,
    progress: &mut dyn FnMut(&str),
) -> Result<AblationRow, RecipeError> {
    let mut per_seed = Vec::new();
    for &seed in &cfg.seeds {
        let mut m = SendModel::new(model.clone(), seed)?;
        let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
        train(&mut m, data, &train_cfg, &mut |_| {})?;
        let posts = validation_posteriors(&m, &data.validation)?;
        let (der, threshold) = match model.head {
            Head::Pse => (evaluate(&posts, m.table(), None)?.report(DerMode::Full).map_err(SendError::from)?.der, None),
            Head::Multilabel => {
                let (th, der) = best_threshold(&posts, m.table())?;
                (der, Some(th))
            }
        };
        progress(&format!("{label} seed {seed}: DER {:.2}%", 100.0 * der));
        per_seed.push(vec![Some(der), threshold]);
    }
    Ok(mean_row(label, per_seed))
}

pub fn run_recipe(
    recipe: Recipe,
    cfg: &RecipeConfig,
    progress: &mut dyn FnMut(&str),
) -> Result<AblationTable, RecipeError> {
    cfg.validate()?;
    let (columns, rows) = match recipe {
        Recipe::Metrics => {
            let data = Dataset::generate(&cfg.sim)?;
            let mut rows = Vec::new();
            for metric in [Metric::Cosine, Metric::Dot, Metric::SigmaDot] {
                let model = SendConfig {
                    metric,
                    ..cfg.model.clone()
                };
                rows.push(frame_row(cfg, &data, model, metric.name().to_string(), progress)?);
            }
            (vec!["der".to_string(), "threshold".to_string()], rows)
        }
        Recipe::PostnetPse => {
            let data = Dataset::generate(&cfg.sim)?;
            let mut rows = Vec::new();
            for (post_net, head) in [
                (PostNet::None, Head::Multilabel),
                (PostNet::Fcn, Head::Multilabel),
                (PostNet::FsmnFcn, Head::Multilabel),
                (PostNet::Fcn, Head::Pse),
                (PostNet::FsmnFcn, Head::Pse),
            ] {
                let model = SendConfig {
                    post_net,
                    head,
                    ..cfg.model.clone()
                };
                let label = format!("{}/{}", post_net.name(), head.name());
                rows.push(frame_row(cfg, &data, model, label, progress)?);
            }
            (vec!["der".to_string(), "threshold".to_string()], rows)
        }
        Recipe::SendtiSc => {
            let data = Dataset::generate(&cfg.text_sim)?;
            let grand = TextConfig {
                separators: true,
                source: TextSource::Grand,
                error_rate: cfg.error_rate,
            };
            let mut rows = Vec::new();
            for separators in [false, true] {
                for source in [TextSource::Grand, TextSource::Recognition] {
                    let text = TextConfig {
                        separators,
                        source,
                        ..grand.clone()
                    };
                    let label = format!(
                        "sc={}/train={}",
                        if separators { "yes" } else { "no" },
                        match source {
                            TextSource::Grand => "grand",
                            TextSource::Recognition => "recognition",
                        }
                    );
                    let mut per_seed = Vec::new();
                    for &seed in &cfg.seeds {
                        let mut m = SendTiModel::new(cfg.ti_model.clone(), seed)?;
                        let train_cfg = TrainConfig { seed, ..cfg.ti_train.clone() };
                        train_ti(&mut m, &data, &train_cfg, &text, &mut |_| {})?;
                        let mut values = Vec::new();
                        for test_source in [TextSource::Grand, TextSource::Recognition] {
                            let test = TextConfig {
                                source: test_source,
                                ..text.clone()
                            };
                            values.push(Some(evaluate_words(&m, &data.validation, &test, data.config.seed)?.wder));
                        }
                        progress(&format!(
                            "{label} seed {seed}: wDER {:.2}% / {:.2}%",
                            100.0 * values[0].unwrap_or(f64::NAN),
                            100.0 * values[1].unwrap_or(f64::NAN)
                        ));
                        per_seed.push(values);
                    }
                    rows.push(mean_row(label, per_seed));
                }
            }
            (vec!["wder_grand".to_string(), "wder_recognition".to_string()], rows)
        }
    };
    Ok(AblationTable {
        recipe,
        seeds: cfg.seeds.clone(),
        columns,
        rows,
    })
}

/// A very small configuration for smoke tests of the recipe plumbing.
pub fn smoke_config() -> RecipeConfig {
    let sim = SimConfig {
        train_samples: 6,
        validation_samples: 3,
        pool_speakers: 20,
        validation_speakers: 4,
        embedding_dim: 8,
        feature_dim: 8,
        num_speakers: [2, 2],
        turn_length: [10, 16],
        context: 1,
        ..SimConfig::default()
    };
    let text_sim = SimConfig {
        lexical_dim: 4,
        vocab_size: 8,
        ..sim.clone()
    };
    let shrink = |c: SendConfig| SendConfig {
        encoding_dim: 8,
        speech_blocks: 1,
        speech_hidden: 8,
        speaker_hidden: 8,
        post_hidden: 4,
        post_fcn_hidden: 8,
        ..c
    };
    let ti = SendTiConfig {
        encoding_dim: 8,
        speech_blocks: 1,
        speech_hidden: 8,
        speaker_hidden: 8,
        text_ffn: 8,
        post_hidden: 4,
        post_fcn_hidden: 8,
        ..desk_ti_model(&text_sim)
    };
    let train = TrainConfig {
        epochs: 1,
        batch_size: 3,
        ..desk_train()
    };
    RecipeConfig {
        seeds: vec![1, 2],
        model: shrink(desk_model(&sim)),
        sim,
        train: train.clone(),
        ti_model: ti,
        text_sim,
        ti_train: train,
        error_rate: 0.15,
    }
}
