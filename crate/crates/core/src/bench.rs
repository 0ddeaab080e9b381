//! Parameter counts, multiplication counts and wall-clock timing of the
//! tensor-based layers against vanilla layers of the same total widths.

use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::normalize_adjacency;
use crate::error::{FateError, Result};
use crate::friendship::{tgcn_layer, Activation, TgcnLayerParams};
use crate::model::{Model, ModelConfig, Variant};
use crate::params::ParamStore;
use crate::tape::{Gradients, Tape};
use crate::temporal::{tlstm_cell, TlstmParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Gcn,
    Lstm,
}

/// Parameter counts of one layer in both wirings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCount {
    pub layer: String,
    pub kind: LayerKind,
    pub k: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub vanilla: usize,
    pub tensor: usize,
    pub enumerated_vanilla: usize,
    pub enumerated_tensor: usize,
    pub reduction: usize,
    pub predicted_reduction: usize,
    /// Count found in a model of the requested variant.
    pub in_model: Option<usize>,
    /// Count the variant's wiring should have.
    pub expected_in_model: usize,
}

impl LayerCount {
    pub fn consistent(&self) -> bool {
        self.vanilla == self.enumerated_vanilla
            && self.tensor == self.enumerated_tensor
            && self.reduction == self.predicted_reduction
            && self.in_model.is_none_or(|c| c == self.expected_in_model)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub variant: Variant,
    pub layers: Vec<LayerCount>,
    pub model_total: usize,
}

impl ParamCounts {
    fn sum(&self, kind: LayerKind) -> usize {
        self.layers
            .iter()
            .filter(|l| l.kind == kind)
            .map(|l| l.expected_in_model)
            .sum()
    }

    /// Graph-convolution parameters of the variant's wiring.
    pub fn params_gcn(&self) -> usize {
        self.sum(LayerKind::Gcn)
    }

    pub fn params_lstm(&self) -> usize {
        self.sum(LayerKind::Lstm)
    }

    pub fn consistent(&self) -> bool {
        self.layers.iter().all(LayerCount::consistent)
    }
}

fn enumerate_gcn(in_dims: &[usize], d: usize, tensor: bool) -> usize {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    if tensor {
        TgcnLayerParams::tensor(&mut store, "l", in_dims, d, &mut rng);
    } else {
        TgcnLayerParams::vanilla(&mut store, "l", in_dims, d, &mut rng);
    }
    store.scalar_count()
}

fn enumerate_lstm(in_dims: &[usize], d: usize, tensor: bool) -> usize {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    if tensor {
        TlstmParams::tensor(&mut store, "l", in_dims, d, &mut rng);
    } else {
        TlstmParams::vanilla(&mut store, "l", in_dims, d, &mut rng);
    }
    store.scalar_count()
}

/// Graph-convolution layer from per-category input widths to `d` outputs
/// per category.
pub fn gcn_layer_count(name: &str, in_dims: &[usize], d: usize) -> LayerCount {
    let k = in_dims.len();
    let d_in: usize = in_dims.iter().sum();
    let d_out = k * d;
    let vanilla = d_in * d_out;
    let tensor: usize = in_dims.iter().map(|di| di * d).sum();
    LayerCount {
        layer: name.into(),
        kind: LayerKind::Gcn,
        k,
        d_in,
        d_out,
        vanilla,
        tensor,
        enumerated_vanilla: enumerate_gcn(in_dims, d, false),
        enumerated_tensor: enumerate_gcn(in_dims, d, true),
        reduction: vanilla - tensor,
        predicted_reduction: (k - 1) * d_in * d_out / k,
        in_model: None,
        expected_in_model: tensor,
    }
}

/// Recurrent layer from per-category input widths to `d` hidden units per
/// category.
pub fn lstm_layer_count(name: &str, in_dims: &[usize], d: usize) -> LayerCount {
    let k = in_dims.len();
    let d_in: usize = in_dims.iter().sum();
    let d_out = k * d;
    let vanilla = 4 * (d_in * d_out + d_out * d_out + d_out);
    let tensor = 4 * (in_dims.iter().map(|di| di * d).sum::<usize>() + k * d * d + d_out);
    LayerCount {
        layer: name.into(),
        kind: LayerKind::Lstm,
        k,
        d_in,
        d_out,
        vanilla,
        tensor,
        enumerated_vanilla: enumerate_lstm(in_dims, d, false),
        enumerated_tensor: enumerate_lstm(in_dims, d, true),
        reduction: vanilla - tensor,
        predicted_reduction: 4 * (k - 1) * (d_in + d_out) * d_out / k,
        in_model: None,
        expected_in_model: tensor,
    }
}

fn layer_shapes(config: &ModelConfig, variant: Variant) -> Vec<(LayerKind, String, Vec<usize>, usize)> {
    let k = config.k();
    let (d, dh) = (config.embed_dim, config.hidden_dim);
    let mut out = Vec::new();
    if variant != Variant::Fnd {
        out.push((LayerKind::Gcn, "gcn0".into(), config.schema.dims().to_vec(), d));
        out.push((LayerKind::Gcn, "gcn1".into(), vec![d; k], d));
    }
    if variant != Variant::Tmp {
        for l in 0..config.lstm_layers {
            let ins = match (l, variant) {
                (0, Variant::Fnd) => config.schema.dims().to_vec(),
                (0, _) => vec![2 * d; k],
                _ => vec![dh; k],
            };
            out.push((LayerKind::Lstm, format!("lstm{l}"), ins, dh));
        }
    }
    out
}

fn count_named(store: &ParamStore, name: &str) -> usize {
    let dotted = format!("{name}.");
    store
        .names()
        .iter()
        .zip(store.values())
        .filter(|(n, _)| *n == name || n.starts_with(&dotted))
        .map(|(_, v)| v.len())
        .sum()
}

/// Closed-form and enumerated parameter counts of every graph-convolution
/// and recurrent layer the variant builds.
pub fn count_params(config: &ModelConfig, variant: Variant) -> Result<ParamCounts> {
    let config = ModelConfig {
        variant,
        ..config.clone()
    };
    let model = Model::new(config.clone(), 0)?;
    let layers = layer_shapes(&config, variant)
        .into_iter()
        .map(|(kind, name, ins, d)| {
            let mut c = match kind {
                LayerKind::Gcn => gcn_layer_count(&name, &ins, d),
                LayerKind::Lstm => lstm_layer_count(&name, &ins, d),
            };
            c.expected_in_model = if variant == Variant::Ts { c.vanilla } else { c.tensor };
            c.in_model = Some(count_named(&model.store, &name));
            c
        })
        .collect();
    Ok(ParamCounts {
        variant,
        layers,
        model_total: model.param_count(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCount {
    pub layer: String,
    pub kind: LayerKind,
    pub vanilla: u64,
    pub tensor: u64,
    pub reduction: u64,
    pub predicted_reduction: u64,
}

/// Multiplications per forward pass: per ego-network of `nodes` nodes for
/// graph layers, per step for recurrent layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCounts {
    pub nodes: usize,
    pub layers: Vec<FlopCount>,
}

pub fn estimate_flops(config: &ModelConfig, variant: Variant, nodes: usize) -> FlopCounts {
    let n = nodes as u64;
    let layers = layer_shapes(config, variant)
        .into_iter()
        .map(|(kind, name, ins, d)| {
            let k = ins.len() as u64;
            let d_in: u64 = ins.iter().sum::<usize>() as u64;
            let d = d as u64;
            let d_out = k * d;
            let blocked: u64 = ins.iter().map(|&di| di as u64 * d).sum();
            let (vanilla, tensor, predicted) = match kind {
                LayerKind::Gcn => (
                    n * n * d_in + n * d_in * d_out,
                    n * n * d_in + n * blocked,
                    n * (k - 1) * d_in * d_out / k,
                ),
                LayerKind::Lstm => (
                    4 * (d_in * d_out + d_out * d_out) + 3 * d_out,
                    4 * (blocked + k * d * d) + 3 * d_out,
                    4 * (k - 1) * (d_in + d_out) * d_out / k,
                ),
            };
            FlopCount {
                layer: name,
                kind,
                vanilla,
                tensor,
                reduction: vanilla - tensor,
                predicted_reduction: predicted,
            }
        })
        .collect();
    FlopCounts { nodes, layers }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub model: ModelConfig,
    /// Nodes per ego-network, ego included.
    pub nodes: usize,
    pub batch: usize,
    /// Recurrent steps per timed pass.
    pub steps: usize,
    pub repetitions: usize,
    pub warmup: usize,
    /// Also time with the thread pool enabled.
    pub parallel: bool,
    /// Medians below this many seconds double the batch.
    pub min_median_secs: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            nodes: 10,
            batch: 256,
            steps: 1,
            repetitions: 30,
            warmup: 5,
            parallel: false,
            min_median_secs: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub median_secs: f64,
    pub min_secs: f64,
    pub max_secs: f64,
    /// Interquartile range over the median.
    pub relative_iqr: f64,
}

impl TimingStats {
    fn from_samples(mut s: Vec<f64>) -> Self {
        s.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (s.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
        };
        let median = q(0.5);
        Self {
            median_secs: median,
            min_secs: s[0],
            max_secs: s[s.len() - 1],
            relative_iqr: (q(0.75) - q(0.25)) / median.max(f64::MIN_POSITIVE),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub threads: usize,
    pub batch: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub tensor: TimingStats,
    pub vanilla: TimingStats,
    /// Vanilla median over tensor median.
    pub speedup: f64,
    pub adjustments: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub config: BenchConfig,
    pub params: ParamCounts,
    pub vanilla_params: ParamCounts,
    pub flops: FlopCounts,
    pub timing: Option<TimingReport>,
    pub parallel_timing: Option<TimingReport>,
    pub hardware: String,
}

impl ComplexityReport {
    /// Every field that does not depend on the clock.
    pub fn reproducible_json(&self) -> String {
        serde_json::to_string_pretty(&serde_json::json!({
            "params": self.params,
            "vanilla_params": self.vanilla_params,
            "flops": self.flops,
        }))
        .expect("plain data serializes")
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<8} {:>5} {:>7} {:>7} {:>12} {:>12} {:>12} {:>12}\n",
            "layer", "K", "d_in", "d_out", "vanilla", "tensor", "reduction", "flops_red"
        ));
        for (p, f) in self.params.layers.iter().zip(&self.flops.layers) {
            out.push_str(&format!(
                "{:<8} {:>5} {:>7} {:>7} {:>12} {:>12} {:>12} {:>12}\n",
                p.layer, p.k, p.d_in, p.d_out, p.vanilla, p.tensor, p.reduction, f.reduction
            ));
        }
        for t in self.timing.iter().chain(&self.parallel_timing) {
            out.push_str(&format!(
                "timing ({} thread(s), batch {}, {} reps): tensor {:.3} ms, vanilla {:.3} ms, speedup {:.3}\n",
                t.threads,
                t.batch,
                t.repetitions,
                t.tensor.median_secs * 1e3,
                t.vanilla.median_secs * 1e3,
                t.speedup
            ));
            for a in &t.adjustments {
                out.push_str(&format!("  adjustment: {a}\n"));
            }
        }
        out
    }
}

pub fn hardware_description() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!(
        "{cpu}; {threads} hardware thread(s); {}-{}",
        std::env::consts::ARCH,
        std::env::consts::OS
    )
}

struct Wiring {
    store: ParamStore,
    gcn: [TgcnLayerParams; 2],
    lstm: Vec<TlstmParams>,
}

fn wiring(config: &ModelConfig, tensor: bool, seed: u64) -> Wiring {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = config.k();
    let (d, dh) = (config.embed_dim, config.hidden_dim);
    let gcn = |store: &mut ParamStore, name: &str, ins: &[usize], rng: &mut ChaCha8Rng| {
        if tensor {
            TgcnLayerParams::tensor(store, name, ins, d, rng)
        } else {
            TgcnLayerParams::vanilla(store, name, ins, d, rng)
        }
    };
    let g0 = gcn(&mut store, "gcn0", config.schema.dims(), &mut rng);
    let g1 = gcn(&mut store, "gcn1", &vec![d; k], &mut rng);
    let lstm = (0..config.lstm_layers)
        .map(|l| {
            let ins = if l == 0 { vec![2 * d; k] } else { vec![dh; k] };
            let name = format!("lstm{l}");
            if tensor {
                TlstmParams::tensor(&mut store, &name, &ins, dh, &mut rng)
            } else {
                TlstmParams::vanilla(&mut store, &name, &ins, dh, &mut rng)
            }
        })
        .collect();
    Wiring {
        store,
        gcn: [g0, g1],
        lstm,
    }
}

struct BatchInputs {
    adjacency: Vec<Array2<f64>>,
    features: Vec<Array2<f64>>,
}

fn batch_inputs(config: &BenchConfig, batch: usize, seed: u64) -> Result<BatchInputs> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.nodes;
    let width = config.model.schema.total_dim();
    let mut adjacency = Vec::with_capacity(batch);
    let mut features = Vec::with_capacity(batch);
    for _ in 0..batch {
        let mut raw = Array2::zeros((n, n));
        for v in 1..n {
            raw[[0, v]] = 1.0;
            raw[[v, 0]] = 1.0;
            for u in v + 1..n {
                if rng.random::<f64>() < 0.2 {
                    raw[[u, v]] = 1.0;
                    raw[[v, u]] = 1.0;
                }
            }
        }
        adjacency.push(normalize_adjacency(&raw)?);
        features.push(Array2::from_shape_fn((n, width), |_| rng.random_range(-1.0..1.0)));
    }
    Ok(BatchInputs {
        adjacency,
        features,
    })
}

/// Forward and backward through both graph layers of every ego-network and
/// the stacked cells over `steps` steps, with the batch as parallel rows.
fn pass(w: &Wiring, inputs: &BatchInputs, range: std::ops::Range<usize>, steps: usize, k: usize) -> Result<Gradients> {
    let mut tape = Tape::new(&w.store);
    let mut egos = Vec::with_capacity(range.len());
    for i in range.clone() {
        let a = tape.constant(inputs.adjacency[i].clone());
        let x = tape.constant(inputs.features[i].clone());
        let h = tgcn_layer(&mut tape, x, a, &w.gcn[0], Activation::Elu)?;
        let h = tgcn_layer(&mut tape, h, a, &w.gcn[1], Activation::Elu)?;
        egos.push(tape.slice_rows(h, 0, 1));
    }
    let stacked = tape.concat_rows(&egos);
    let g = tape.concat_blocks(&[stacked, stacked], k);
    let rows = range.len();
    let mut input = g;
    for layer in &w.lstm {
        let width = layer.state_width();
        let mut h = tape.constant(Array2::zeros((rows, width)));
        let mut c = h;
        let mut outs = Vec::with_capacity(steps);
        for _ in 0..steps {
            let next = tlstm_cell(&mut tape, input, h, c, layer)?;
            h = next.0;
            c = next.1;
            outs.push(h);
        }
        input = *outs.last().expect("at least one step");
    }
    let width = tape.shape(input).1;
    let left = tape.constant(Array2::ones((1, rows)));
    let right = tape.constant(Array2::ones((width, 1)));
    let pooled = tape.matmul(left, input);
    let root = tape.matmul(pooled, right);
    Ok(tape.backward(root))
}

fn run_once(w: &Wiring, inputs: &BatchInputs, batch: usize, steps: usize, k: usize, threads: usize) -> Result<f64> {
    let start = Instant::now();
    if threads <= 1 {
        pass(w, inputs, 0..batch, steps, k)?;
    } else {
        parallel_pass(w, inputs, batch, steps, k, threads)?;
    }
    Ok(start.elapsed().as_secs_f64())
}

#[cfg(feature = "parallel")]
fn parallel_pass(w: &Wiring, inputs: &BatchInputs, batch: usize, steps: usize, k: usize, threads: usize) -> Result<Gradients> {
    use rayon::prelude::*;
    let chunk = batch.div_ceil(threads);
    let ranges: Vec<_> = (0..batch).step_by(chunk).map(|s| s..(s + chunk).min(batch)).collect();
    let parts: Vec<Result<Gradients>> = ranges.into_par_iter().map(|r| pass(w, inputs, r, steps, k)).collect();
    let mut total = Gradients::zeros_like(&w.store);
    for p in parts {
        total.add_assign(&p?);
    }
    Ok(total)
}

#[cfg(not(feature = "parallel"))]
fn parallel_pass(w: &Wiring, inputs: &BatchInputs, batch: usize, steps: usize, k: usize, _threads: usize) -> Result<Gradients> {
    pass(w, inputs, 0..batch, steps, k)
}

fn parallel_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

fn time_with(config: &BenchConfig, seed: u64, threads: usize) -> Result<TimingReport> {
    let tensor = wiring(&config.model, true, seed);
    let vanilla = wiring(&config.model, false, seed);
    let k = config.model.k();
    let mut batch = config.batch;
    let mut adjustments = Vec::new();
    loop {
        let inputs = batch_inputs(config, batch, seed ^ 0x5eed)?;
        let mut times = [Vec::new(), Vec::new()];
        for _ in 0..config.warmup {
            run_once(&tensor, &inputs, batch, config.steps, k, threads)?;
            run_once(&vanilla, &inputs, batch, config.steps, k, threads)?;
        }
        // Interleaved so drift in machine load hits both wirings alike.
        for _ in 0..config.repetitions {
            times[0].push(run_once(&tensor, &inputs, batch, config.steps, k, threads)?);
            times[1].push(run_once(&vanilla, &inputs, batch, config.steps, k, threads)?);
        }
        let [t, v] = times.map(TimingStats::from_samples);
        if t.median_secs < config.min_median_secs && batch < 1 << 20 {
            adjustments.push(format!(
                "median {:.2e} s below timer floor {:.0e} s at batch {batch}; doubled batch",
                t.median_secs, config.min_median_secs
            ));
            batch *= 2;
            continue;
        }
        return Ok(TimingReport {
            threads,
            batch,
            repetitions: config.repetitions,
            warmup: config.warmup,
            speedup: v.median_secs / t.median_secs,
            tensor: t,
            vanilla: v,
            adjustments,
        });
    }
}

/// Counts, multiplication estimates and median forward+backward timing of
/// both wirings on identical inputs. Timing is single-threaded unless
/// `parallel` is set, in which case both timings are reported.
pub fn time_layers(config: &BenchConfig, seed: u64) -> Result<ComplexityReport> {
    if config.repetitions < 30 {
        return Err(FateError::Config(format!(
            "timing needs at least 30 repetitions, got {}",
            config.repetitions
        )));
    }
    if config.nodes == 0 || config.batch == 0 || config.steps == 0 {
        return Err(FateError::Config("nodes, batch and steps must be positive".into()));
    }
    let mut report = analytic_report(config)?;
    report.timing = Some(time_with(config, seed, 1)?);
    if config.parallel {
        report.parallel_timing = Some(time_with(config, seed, parallel_threads())?);
    }
    Ok(report)
}

/// The clock-free part of the report.
pub fn analytic_report(config: &BenchConfig) -> Result<ComplexityReport> {
    config.model.check()?;
    Ok(ComplexityReport {
        config: config.clone(),
        params: count_params(&config.model, Variant::Full)?,
        vanilla_params: count_params(&config.model, Variant::Ts)?,
        flops: estimate_flops(&config.model, Variant::Full, config.nodes),
        timing: None,
        parallel_timing: None,
        hardware: hardware_description(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::ActionSchema;
    use proptest::prelude::*;

    fn config(k: usize, dims: usize, d: usize) -> ModelConfig {
        ModelConfig {
            schema: ActionSchema::uniform(k, dims, 3).unwrap(),
            steps: 3,
            embed_dim: d,
            hidden_dim: d,
            scorer_hidden: 4,
            head_hidden: 4,
            ..Default::default()
        }
    }

    #[test]
    fn gcn_count_examples() {
        let c = gcn_layer_count("l", &[2, 2], 2);
        assert_eq!((c.vanilla, c.tensor, c.reduction), (16, 8, 8));
        assert!(c.consistent());
        let c = gcn_layer_count("l", &[1; 13], 32);
        assert_eq!((c.d_in, c.d_out), (13, 416));
        assert_eq!((c.vanilla, c.tensor, c.reduction), (5408, 416, 4992));
        assert!(c.consistent());
    }

    #[test]
    fn lstm_count_example() {
        let c = lstm_layer_count("l", &[64; 13], 32);
        assert_eq!((c.d_in, c.d_out), (832, 416));
        assert_eq!(c.vanilla, 2_078_336);
        assert_eq!(c.tensor, 161_408);
        assert_eq!(c.reduction, 1_916_928);
        assert!(c.consistent());
    }

    #[test]
    fn uneven_widths_count_exactly() {
        let c = gcn_layer_count("l", &[1, 3, 2], 5);
        assert_eq!(c.tensor, 30);
        assert_eq!(c.vanilla, 6 * 15);
        assert!(c.consistent());
        assert!(lstm_layer_count("l", &[1, 3, 2], 5).consistent());
    }

    #[test]
    fn model_counts_match_for_every_variant() {
        for v in Variant::ALL {
            let counts = count_params(&config(3, 2, 4), v).unwrap();
            assert!(counts.consistent(), "{v}: {counts:?}");
        }
        let full = count_params(&config(3, 2, 4), Variant::Full).unwrap();
        let ts = count_params(&config(3, 2, 4), Variant::Ts).unwrap();
        let gap: usize = full.layers.iter().map(|l| l.reduction).sum();
        assert_eq!(ts.model_total - full.model_total, gap);
        assert_eq!(ts.params_gcn() - full.params_gcn() + ts.params_lstm() - full.params_lstm(), gap);
    }

    #[test]
    fn flop_examples() {
        let c = config(2, 2, 2);
        let f = estimate_flops(&c, Variant::Full, 10);
        let gcn1 = &f.layers[1];
        assert_eq!(gcn1.reduction, 80);
        assert_eq!(gcn1.predicted_reduction, 80);
        let single = estimate_flops(&config(1, 4, 4), Variant::Full, 10);
        assert!(single.layers.iter().all(|l| l.reduction == 0));
        let wide = estimate_flops(&c, Variant::Full, 50);
        for (a, b) in f.layers.iter().zip(&wide.layers) {
            if a.kind == LayerKind::Lstm {
                assert_eq!(a.reduction, b.reduction);
            }
            assert_eq!(a.reduction, a.predicted_reduction);
            assert_eq!(b.reduction, b.predicted_reduction);
        }
    }

    #[test]
    fn reproducible_fields_are_identical() {
        let cfg = BenchConfig {
            model: config(2, 2, 2),
            ..Default::default()
        };
        let a = analytic_report(&cfg).unwrap().reproducible_json();
        let b = analytic_report(&cfg).unwrap().reproducible_json();
        assert_eq!(a, b);
    }

    #[test]
    fn timing_reports_both_wirings() {
        let cfg = BenchConfig {
            model: config(2, 2, 4),
            nodes: 4,
            batch: 8,
            repetitions: 30,
            warmup: 1,
            min_median_secs: 0.0,
            ..Default::default()
        };
        let r = time_layers(&cfg, 1).unwrap();
        let t = r.timing.unwrap();
        assert!(t.tensor.median_secs > 0.0 && t.vanilla.median_secs > 0.0);
        assert!(r.params.params_gcn() < r.vanilla_params.params_gcn());
        assert!(time_layers(&BenchConfig { repetitions: 29, ..cfg.clone() }, 1).is_err());
    }

    #[test]
    fn tiny_batches_are_enlarged() {
        let cfg = BenchConfig {
            model: config(2, 1, 2),
            nodes: 2,
            batch: 1,
            min_median_secs: 2e-4,
            warmup: 0,
            ..Default::default()
        };
        let t = time_layers(&cfg, 0).unwrap().timing.unwrap();
        assert!(t.batch > 1);
        assert!(!t.adjustments.is_empty());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn enumerated_counts_equal_closed_form(dims in proptest::collection::vec(1usize..5, 1..5), d in 1usize..6) {
            prop_assert!(gcn_layer_count("l", &dims, d).consistent());
            prop_assert!(lstm_layer_count("l", &dims, d).consistent());
        }
    }
}
