//! Alternating EM and gradient training, evaluation metrics and ablations.

mod checkpoint;
mod optim;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, read_checkpoint_for, read_manifest, save_checkpoint, shape_diffs,
    write_checkpoint, CheckpointManifest, TensorEntry,
};
pub use optim::{clip_global_norm, Adam, AdamConfig};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{fit_and_apply_preprocessing, Dataset, PreprocessConfig, TemporalSample};
use crate::error::{FateError, Result};
use crate::explain_em::{
    em_loss_batch, posterior_q, update_global_action, update_global_temporal, GlobalImportance,
    Posterior,
};
use crate::head::{LabelScaler, MixtureOutput};
use crate::model::{forward_vars, Model, ModelConfig, Variant};
use crate::params::ParamStore;
use crate::tape::{Gradients, Tape};

/// Samples per work unit; partial gradients are summed in unit order so
/// results do not depend on the thread count.
const CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub validation_fraction: f64,
    pub patience: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub variant: Variant,
    pub preprocess: PreprocessConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            max_epochs: 10,
            learning_rate: 1e-3,
            validation_fraction: 0.10,
            patience: 2,
            clip_norm: 5.0,
            seed: 0,
            variant: Variant::Full,
            preprocess: PreprocessConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(FateError::Config("validation_fraction must lie in (0, 1)".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(FateError::Config(
                "batch_size, max_epochs and patience must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.clip_norm > 0.0) {
            return Err(FateError::Config("learning_rate and clip_norm must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean EM loss over the epoch's batches, in engagement units.
    pub train_loss: f64,
    pub val_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub rmse: f64,
    pub mae: f64,
    /// `None` when every truth is (near) zero.
    pub mape: Option<f64>,
    pub mape_excluded: usize,
}

/// Truths with magnitude below this are left out of MAPE.
pub const MAPE_EPS: f64 = 1e-6;

pub fn metrics(predictions: &[f64], truth: &[f64]) -> Result<Metrics> {
    if predictions.is_empty() {
        return Err(FateError::Empty("evaluation set"));
    }
    if predictions.len() != truth.len() {
        return Err(FateError::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truth.len()
        )));
    }
    let n = predictions.len() as f64;
    let mut sq = 0.0;
    let mut abs = 0.0;
    let mut pct = 0.0;
    let mut kept = 0usize;
    for (p, t) in predictions.iter().zip(truth) {
        let e = p - t;
        sq += e * e;
        abs += e.abs();
        if t.abs() >= MAPE_EPS {
            pct += (e / t).abs();
            kept += 1;
        }
    }
    Ok(Metrics {
        n: predictions.len(),
        rmse: (sq / n).sqrt(),
        mae: abs / n,
        mape: (kept > 0).then(|| pct / kept as f64),
        mape_excluded: predictions.len() - kept,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub metrics: Metrics,
    pub history: Vec<EpochRecord>,
    pub global_trajectory: Vec<GlobalImportance>,
}

#[cfg(feature = "parallel")]
fn map_chunks<T, F>(items: &[usize], f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&[usize]) -> T + Sync + Send,
{
    use rayon::prelude::*;
    items.par_chunks(CHUNK).map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_chunks<T, F>(items: &[usize], f: F) -> Vec<T>
where
    F: Fn(&[usize]) -> T,
{
    items.chunks(CHUNK).map(f).collect()
}

/// Point predictions for every sample, in dataset order. Samples must
/// already carry the model's feature preprocessing.
pub fn predict_prepared(model: &Model, samples: &[TemporalSample]) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..samples.len()).collect();
    let parts = map_chunks(&idx, |chunk| {
        chunk
            .iter()
            .map(|&i| model.predict(&samples[i]))
            .collect::<Result<Vec<f64>>>()
    });
    let mut out = Vec::with_capacity(samples.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

impl Model {
    /// Copy of `dataset` with this model's feature preprocessing applied.
    pub fn prepare(&self, dataset: &Dataset) -> Result<Dataset> {
        let mut d = dataset.clone();
        if let Some(stats) = &self.feature_stats {
            stats.apply(&mut d)?;
        }
        Ok(d)
    }
}

/// Metrics of `model` on a raw (unpreprocessed) dataset.
pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<EvalReport> {
    let prepared = model.prepare(dataset)?;
    let preds = predict_prepared(model, &prepared.samples)?;
    Ok(EvalReport {
        metrics: metrics(&preds, &dataset.labels())?,
        history: Vec::new(),
        global_trajectory: Vec::new(),
    })
}

/// Model configuration realizing the named ablation of `base`.
pub fn ablation_variant(variant: &str, base: &ModelConfig) -> Result<ModelConfig> {
    let variant: Variant = variant.parse()?;
    Ok(ModelConfig {
        variant,
        ..base.clone()
    })
}

/// Output of the posterior and gradient pass over one batch, computed with
/// parameters frozen.
#[derive(Debug, Clone)]
pub struct BatchResult {
    pub indices: Vec<usize>,
    pub posteriors: Vec<Posterior>,
    pub betas: Vec<Array2<f64>>,
    /// Mean loss gradient over the batch.
    pub gradients: Gradients,
    /// Mean standardized-space EM loss.
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub global: GlobalImportance,
    pub history: Vec<EpochRecord>,
    pub trajectory: Vec<GlobalImportance>,
    pub best_epoch: usize,
}

impl TrainOutcome {
    pub fn history_csv(&self) -> String {
        history_csv(&self.history)
    }
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_rmse\n");
    for r in history {
        s.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.val_rmse));
    }
    s
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: Adam,
    /// Preprocessed training portion.
    pub train: Dataset,
    /// Preprocessed validation portion.
    pub validation: Dataset,
    pub global: GlobalImportance,
    /// Most recent posterior of every training sample.
    pub posteriors: Vec<Posterior>,
    /// Most recent temporal attention of every training sample.
    pub betas: Vec<Array2<f64>>,
    pub epoch: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(dataset: &Dataset, model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.check()?;
        let violations = dataset.validate();
        if let Some((i, v)) = violations.first() {
            return Err(FateError::Validation(format!(
                "{} violations, first at sample {i}: {v:?}",
                violations.len()
            )));
        }
        if dataset.len() < 2 {
            return Err(FateError::Empty("training needs at least two samples"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);
        let n_val = ((dataset.len() as f64 * config.validation_fraction).round() as usize)
            .clamp(1, dataset.len() - 1);
        let (val_idx, train_idx) = order.split_at(n_val);
        let mut train_idx = train_idx.to_vec();
        let mut val_idx = val_idx.to_vec();
        train_idx.sort_unstable();
        val_idx.sort_unstable();

        let raw_train = dataset.subset(&train_idx);
        let (train, stats) = fit_and_apply_preprocessing(raw_train, &config.preprocess)?;
        let mut validation = dataset.subset(&val_idx);
        stats.apply(&mut validation)?;

        let model_config = ModelConfig {
            variant: config.variant,
            steps: dataset.manifest.steps,
            schema: dataset.schema().clone(),
            ..model_config
        };
        let mut model = Model::new(model_config, rng.random())?;
        model.scaler = LabelScaler::fit(&train.labels());
        model.feature_stats = Some(stats);
        let adam = Adam::new(
            AdamConfig {
                learning_rate: config.learning_rate,
                ..Default::default()
            },
            &model.store,
        );
        let k = model.k();
        let steps = model.config.steps;
        let global = GlobalImportance::uniform(k, steps);
        let n = train.len();
        Ok(Self {
            posteriors: vec![
                Posterior {
                    q: global.a_star.clone()
                };
                n
            ],
            betas: vec![global.t_star_matrix(); n],
            config,
            model,
            adam,
            train,
            validation,
            global,
            epoch: 0,
            rng,
        })
    }

    fn dropout_masks(&self, sample_index: usize, batch_seed: u64) -> Option<Vec<Array2<f64>>> {
        let p = self.model.config.lstm_dropout;
        if p == 0.0 {
            return None;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(batch_seed ^ (sample_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let rows = self.model.config.steps;
        let cols = self.model.k() * self.model.config.hidden_dim;
        let keep = 1.0 - p;
        Some(
            (1..self.model.config.lstm_layers)
                .map(|_| {
                    Array2::from_shape_fn((rows, cols), |_| {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                })
                .collect(),
        )
    }

    /// Posteriors, temporal attentions and the mean gradient over `indices`
    /// of the training portion. Reads parameters and `A*` only.
    pub fn e_step(&self, indices: &[usize], batch_seed: u64) -> Result<BatchResult> {
        let model = &self.model;
        let log_a = self.global.log_a_star();
        let standard = LabelScaler::default();
        let parts = map_chunks(indices, |chunk| -> Result<_> {
            let mut grads = Gradients::zeros_like(&model.store);
            let mut items = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let sample = &self.train.samples[i];
                let masks = self.dropout_masks(i, batch_seed);
                let mut tape = Tape::new(&model.store);
                let v = forward_vars(&mut tape, &model.config, &model.layout, sample, masks.as_deref())?;
                let out = MixtureOutput::from_tape(&tape, v.logits, v.gauss, &standard);
                let target = model.scaler.standardize(sample.label);
                let q = posterior_q(target, &out);
                let loss = tape.mixture_em_loss(v.logits, v.gauss, target, &q.q, &log_a);
                tape.backward_into(loss, &mut grads);
                let beta = match v.beta {
                    Some(b) => tape.value(b).to_owned(),
                    None => self.global.t_star_matrix().mapv(|_| 1.0 / model.config.steps as f64),
                };
                items.push((q, beta, tape.scalar(loss)));
            }
            Ok((grads, items))
        });
        let mut gradients = Gradients::zeros_like(&model.store);
        let mut posteriors = Vec::with_capacity(indices.len());
        let mut betas = Vec::with_capacity(indices.len());
        let mut loss = 0.0;
        for part in parts {
            let (g, items) = part?;
            gradients.add_assign(&g);
            for (q, b, l) in items {
                posteriors.push(q);
                betas.push(b);
                loss += l;
            }
        }
        let n = indices.len().max(1) as f64;
        gradients.scale(1.0 / n);
        Ok(BatchResult {
            indices: indices.to_vec(),
            posteriors,
            betas,
            gradients,
            loss: loss / n,
        })
    }

    /// Stores the batch's posteriors and attentions for the epoch-end refresh.
    pub fn record(&mut self, batch: &BatchResult) {
        for ((&i, q), b) in batch.indices.iter().zip(&batch.posteriors).zip(&batch.betas) {
            self.posteriors[i] = q.clone();
            self.betas[i] = b.clone();
        }
    }

    /// Clipped Adam step on the parameters. Touches neither posteriors nor
    /// global importance. Returns the pre-clip gradient norm.
    pub fn apply_update(&mut self, gradients: &mut Gradients, batch: usize, loss: f64) -> Result<f64> {
        let norm = clip_global_norm(gradients, self.config.clip_norm);
        if !loss.is_finite() || !norm.is_finite() {
            return Err(FateError::Diverged {
                epoch: self.epoch,
                batch,
                loss,
                param_norm: self.model.store.l2_norm(),
                grad_norm: norm,
            });
        }
        self.adam.update(&mut self.model.store, gradients);
        Ok(norm)
    }

    /// One pass over the training portion; returns the mean loss in
    /// engagement units.
    pub fn run_epoch(&mut self) -> Result<f64> {
        self.epoch += 1;
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let seed: u64 = self.rng.random();
            let mut batch = self.e_step(chunk, seed)?;
            self.record(&batch);
            let loss = batch.loss;
            self.apply_update(&mut batch.gradients, b, loss)?;
            total += loss;
            batches += 1;
        }
        Ok(total / batches as f64 + self.model.scaler.scale.ln())
    }

    /// Closed-form refresh of `A*` and `T*` from the stored posteriors and
    /// attentions.
    pub fn refresh_global(&mut self) -> Result<()> {
        let a_star = update_global_action(&self.posteriors)?;
        let t_star = update_global_temporal(&self.betas)?;
        self.global = GlobalImportance {
            a_star,
            t_star: t_star.outer_iter().map(|r| r.to_vec()).collect(),
            epoch: self.epoch,
        };
        Ok(())
    }

    /// Mean engagement-unit EM loss over the training portion for the
    /// stored posteriors, current parameters and the given `A*`.
    pub fn em_objective(&self, a_star: &[f64]) -> Result<f64> {
        let prepared = &self.train.samples;
        let mut outputs = Vec::with_capacity(prepared.len());
        for s in prepared {
            outputs.push(self.model.forward(s)?.0);
        }
        em_loss_batch(&self.train.labels(), &outputs, &self.posteriors, a_star)
    }

    pub fn validation_rmse(&self) -> Result<f64> {
        let preds = predict_prepared(&self.model, &self.validation.samples)?;
        Ok(metrics(&preds, &self.validation.labels())?.rmse)
    }

    /// Trains with early stopping on validation RMSE and restores the best
    /// parameters and global importance.
    pub fn fit(self) -> Result<TrainOutcome> {
        self.fit_observed(|_, _| Ok(()))
    }

    /// Like [`Trainer::fit`], calling `observer` after every epoch's global
    /// refresh and validation.
    pub fn fit_observed<F>(mut self, mut observer: F) -> Result<TrainOutcome>
    where
        F: FnMut(&Trainer, &EpochRecord) -> Result<()>,
    {
        let mut history = Vec::new();
        let mut trajectory = Vec::new();
        let mut best: Option<(f64, ParamStore, GlobalImportance, usize)> = None;
        let mut stale = 0;
        while self.epoch < self.config.max_epochs {
            let train_loss = self.run_epoch()?;
            self.refresh_global()?;
            let val_rmse = self.validation_rmse()?;
            let record = EpochRecord {
                epoch: self.epoch,
                train_loss,
                val_rmse,
            };
            observer(&self, &record)?;
            history.push(record);
            trajectory.push(self.global.clone());
            let improved = best.as_ref().is_none_or(|b| val_rmse < b.0);
            if improved {
                best = Some((val_rmse, self.model.store.clone(), self.global.clone(), self.epoch));
                stale = 0;
            } else {
                stale += 1;
                if stale >= self.config.patience {
                    break;
                }
            }
        }
        let (_, store, global, best_epoch) = best.expect("at least one epoch");
        self.model.store = store;
        Ok(TrainOutcome {
            model: self.model,
            global,
            history,
            trajectory,
            best_epoch,
        })
    }
}

pub fn train(dataset: &Dataset, model_config: ModelConfig, config: TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(dataset, model_config, config)?.fit()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::test_support::toy_sample;
    use crate::domain::{ActionSchema, Aggregation, DatasetManifest, EngagementTask};
    use std::collections::hash_map::DefaultHasher;
    use std::hash::{Hash, Hasher};

    #[test]
    fn metric_examples() {
        let m = metrics(&[0.0, 2.0], &[1.0, 1.0]).unwrap();
        assert_eq!((m.rmse, m.mae), (1.0, 1.0));
        let m = metrics(&[1.1], &[1.0]).unwrap();
        assert!((m.mape.unwrap() - 0.1).abs() < 1e-12);
        let m = metrics(&[3.0, -1.0], &[3.0, -1.0]).unwrap();
        assert_eq!((m.rmse, m.mae, m.mape), (0.0, 0.0, Some(0.0)));
        let m = metrics(&[0.5, 2.0], &[0.0, 1.0]).unwrap();
        assert_eq!(m.mape_excluded, 1);
        assert_eq!(m.mape, Some(1.0));
        let m = metrics(&[0.5], &[1e-9]).unwrap();
        assert_eq!((m.mape, m.mape_excluded), (None, 1));
        assert!(metrics(&[], &[]).is_err());
    }

    #[test]
    fn metrics_are_order_invariant() {
        let p = [0.3, 1.7, -2.0, 4.4];
        let t = [0.1, 2.0, -1.5, 4.0];
        let a = metrics(&p, &t).unwrap();
        let b = metrics(&[p[2], p[0], p[3], p[1]], &[t[2], t[0], t[3], t[1]]).unwrap();
        assert!((a.rmse - b.rmse).abs() < 1e-15 && (a.mae - b.mae).abs() < 1e-15);
    }

    #[test]
    fn unknown_ablation_is_an_error() {
        let base = ModelConfig::default();
        assert!(matches!(ablation_variant("nope", &base), Err(FateError::UnknownVariant(_))));
        assert_eq!(ablation_variant("tmp", &base).unwrap().variant, Variant::Tmp);
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            validation_fraction: 1.0,
            ..Default::default()
        };
        assert!(bad.check().is_err());
        assert!(TrainConfig::default().check().is_ok());
    }

    fn toy_dataset(n: usize) -> Dataset {
        let schema = ActionSchema::uniform(2, 1, 3).unwrap();
        let samples = (0..n)
            .map(|i| {
                let mut s = toy_sample(&schema, 3, 1 + i % 3);
                s.user_id = i as u64;
                for g in &mut s.graphs {
                    g.node_features.mapv_inplace(|x| x * (1.0 + i as f64 * 0.1));
                }
                s.label = s.graphs[2].node_features[[0, 0]];
                s
            })
            .collect();
        Dataset {
            manifest: DatasetManifest {
                schema,
                steps: 3,
                task: EngagementTask {
                    metric_id: "a0".into(),
                    horizon: 1,
                    aggregation: Aggregation::Mean,
                },
                generator_seed: None,
                split: "train".into(),
            },
            samples,
        }
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            embed_dim: 3,
            hidden_dim: 3,
            scorer_hidden: 4,
            head_hidden: 4,
            ..Default::default()
        }
    }

    fn tiny_train() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            max_epochs: 3,
            learning_rate: 1e-2,
            validation_fraction: 0.25,
            preprocess: PreprocessConfig {
                winsor_percentile: None,
            },
            ..Default::default()
        }
    }

    fn hash_em_state(t: &Trainer) -> u64 {
        let mut h = DefaultHasher::new();
        for q in &t.posteriors {
            for x in &q.q {
                x.to_bits().hash(&mut h);
            }
        }
        for b in &t.betas {
            for x in b.iter() {
                x.to_bits().hash(&mut h);
            }
        }
        for x in t.global.a_star.iter().chain(t.global.t_star.iter().flatten()) {
            x.to_bits().hash(&mut h);
        }
        h.finish()
    }

    #[test]
    fn gradient_step_leaves_em_state_alone() {
        let data = toy_dataset(12);
        let mut t = Trainer::new(&data, tiny_model(), tiny_train()).unwrap();
        let idx: Vec<usize> = (0..4).collect();
        let mut batch = t.e_step(&idx, 1).unwrap();
        t.record(&batch);
        let before = hash_em_state(&t);
        let params_before = t.model.store.clone();
        t.apply_update(&mut batch.gradients, 0, batch.loss).unwrap();
        assert_eq!(hash_em_state(&t), before);
        assert_ne!(t.model.store, params_before);
    }

    #[test]
    fn training_is_deterministic_and_restores_best() {
        let data = toy_dataset(12);
        let a = train(&data, tiny_model(), tiny_train()).unwrap();
        let b = train(&data, tiny_model(), tiny_train()).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
        let best = a.history.iter().map(|r| r.val_rmse).fold(f64::INFINITY, f64::min);
        let t = Trainer::new(&data, tiny_model(), tiny_train()).unwrap();
        let restored = Trainer { model: a.model.clone(), ..t };
        assert_eq!(restored.validation_rmse().unwrap(), best);
        assert_eq!(a.history[a.best_epoch - 1].val_rmse, best);
    }

    #[test]
    fn global_refresh_is_the_posterior_mean() {
        let data = toy_dataset(12);
        let mut t = Trainer::new(&data, tiny_model(), tiny_train()).unwrap();
        t.run_epoch().unwrap();
        let old = t.global.a_star.clone();
        t.refresh_global().unwrap();
        let mean = update_global_action(&t.posteriors).unwrap();
        assert_eq!(t.global.a_star, mean);
        for k in 0..2 {
            let col: f64 = t.global.t_star.iter().map(|r| r[k]).sum();
            assert!((col - 1.0).abs() < 1e-9);
        }
        assert!(t.em_objective(&t.global.a_star).unwrap() <= t.em_objective(&old).unwrap() + 1e-12);
    }

    #[test]
    fn invalid_dataset_is_rejected() {
        let mut data = toy_dataset(4);
        data.samples[1].graphs[0].node_features[[0, 0]] = f64::NAN;
        assert!(matches!(
            Trainer::new(&data, tiny_model(), tiny_train()),
            Err(FateError::Validation(_))
        ));
    }

    #[test]
    fn divergence_reports_diagnostics() {
        let data = toy_dataset(8);
        let mut t = Trainer::new(&data, tiny_model(), tiny_train()).unwrap();
        let mut g = Gradients::zeros_like(&t.model.store);
        match t.apply_update(&mut g, 3, f64::NAN) {
            Err(FateError::Diverged { batch, param_norm, .. }) => {
                assert_eq!(batch, 3);
                assert!(param_norm > 0.0);
            }
            other => panic!("{other:?}"),
        }
    }
}
