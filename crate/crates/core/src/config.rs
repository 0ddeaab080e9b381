//! Run configuration with one section per stage. Every field has a default,
//! so an empty document is a complete configuration.

use serde::{Deserialize, Serialize};

use crate::bench::BenchConfig;
use crate::domain::{ActionSchema, PreprocessConfig};
use crate::error::Result;
use crate::model::{ModelConfig, Variant};
use crate::synthdata::GeneratorConfig;
use crate::train_eval::TrainConfig;

/// Model widths; the schema and step count come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub scorer_hidden: usize,
    pub head_hidden: usize,
    pub lstm_layers: usize,
    pub lstm_dropout: f64,
    pub variant: Variant,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            embed_dim: m.embed_dim,
            hidden_dim: m.hidden_dim,
            scorer_hidden: m.scorer_hidden,
            head_hidden: m.head_hidden,
            lstm_layers: m.lstm_layers,
            lstm_dropout: m.lstm_dropout,
            variant: m.variant,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self, schema: &ActionSchema, steps: usize) -> ModelConfig {
        ModelConfig {
            schema: schema.clone(),
            steps,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            scorer_hidden: self.scorer_hidden,
            head_hidden: self.head_hidden,
            lstm_layers: self.lstm_layers,
            lstm_dropout: self.lstm_dropout,
            variant: self.variant,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub nodes: usize,
    pub batch: usize,
    pub steps: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub parallel: bool,
}

impl Default for BenchSection {
    fn default() -> Self {
        let b = BenchConfig::default();
        Self {
            nodes: b.nodes,
            batch: b.batch,
            steps: b.steps,
            repetitions: b.repetitions,
            warmup: b.warmup,
            parallel: b.parallel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct FateConfig {
    pub schema: ActionSchema,
    pub generator: GeneratorConfig,
    pub model: ModelSection,
    pub training: TrainConfig,
    pub preprocessing: PreprocessConfig,
    pub bench: BenchSection,
}

impl FateConfig {
    /// Validates each section and their agreement on `K`.
    pub fn check(&self) -> Result<()> {
        self.schema.check()?;
        self.generator_config(None).check()?;
        self.model.resolve(&self.schema, self.generator.steps).check()?;
        self.train_config().check()?;
        Ok(())
    }

    /// Generator settings with the schema applied.
    pub fn generator_config(&self, seed: Option<u64>) -> GeneratorConfig {
        GeneratorConfig {
            seed: seed.unwrap_or(self.generator.seed),
            schema_override: Some(self.schema.clone()),
            ..self.generator.clone()
        }
    }

    pub fn model_config(&self, schema: &ActionSchema, steps: usize) -> ModelConfig {
        self.model.resolve(schema, steps)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            variant: self.model.variant,
            preprocess: self.preprocessing.clone(),
            ..self.training.clone()
        }
    }

    pub fn bench_config(&self) -> BenchConfig {
        BenchConfig {
            model: self.model.resolve(&self.schema, self.generator.steps),
            nodes: self.bench.nodes,
            batch: self.bench.batch,
            steps: self.bench.steps,
            repetitions: self.bench.repetitions,
            warmup: self.bench.warmup,
            parallel: self.bench.parallel,
            ..Default::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::FateError;

    #[test]
    fn empty_document_is_the_default() {
        let c: FateConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, FateConfig::default());
        c.check().unwrap();
        let t = c.train_config();
        assert_eq!((t.batch_size, t.max_epochs, t.patience), (256, 10, 2));
        assert_eq!(t.learning_rate, 1e-3);
        assert_eq!(c.generator.active_friend_fraction, 0.15);
        assert_eq!((c.generator.steps, c.generator.horizon), (14, 7));
        assert_eq!(c.bench.repetitions, 30);
        assert_eq!(c.schema.k(), 13);
    }

    #[test]
    fn sections_override_and_unknown_keys_fail() {
        let c: FateConfig =
            serde_json::from_str(r#"{"model": {"embed_dim": 8, "variant": "tmp"}}"#).unwrap();
        assert_eq!(c.model.embed_dim, 8);
        assert_eq!(c.train_config().variant, Variant::Tmp);
        assert!(serde_json::from_str::<FateConfig>(r#"{"model": {"width": 8}}"#).is_err());
    }

    #[test]
    fn action_count_mismatch_is_rejected() {
        let c = FateConfig {
            schema: ActionSchema::uniform(2, 1, 3).unwrap(),
            ..Default::default()
        };
        assert!(matches!(c.check(), Err(FateError::Config(_))));
    }
}
