use std::collections::HashMap;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::Path;

use anyhow::{anyhow, bail, Context};
use fate_core::bench::{analytic_report, time_layers};
use fate_core::config::FateConfig;
use fate_core::domain::{read_dataset, write_dataset, Dataset};
use fate_core::explain_em::{
    explain_sample, matrix_csv, posterior_q, rows_to_matrix, update_global_action, update_global_temporal, GlobalImportance,
    LocalExplanation,
};
use fate_core::model::{Model, ModelConfig};
use fate_core::synthdata::{generate, ground_truth_report};
use fate_core::train_eval::{
    evaluate, metrics, read_checkpoint, read_checkpoint_for, read_manifest, save_checkpoint, train as fit,
    EpochRecord, EvalReport,
};
use fate_core::FateError;

use crate::manifest::Run;
use crate::plot::heatmap;
use crate::{Common, Failure};

type CmdResult = Result<(), Failure>;

fn load_config(common: &Common, required: bool) -> Result<Option<FateConfig>, Failure> {
    let Some(path) = &common.config else {
        if required {
            return Err(Failure::Config("--config is required for this command".into()));
        }
        return Ok(None);
    };
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
    let config: FateConfig =
        toml::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    config
        .check()
        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    Ok(Some(config))
}

fn read_split(data: &Path, split: &str) -> anyhow::Result<(Dataset, std::path::PathBuf)> {
    let path = data.join(format!("{split}.jsonl"));
    let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    let dataset = read_dataset(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?;
    let violations = dataset.validate();
    if let Some((i, v)) = violations.first() {
        bail!("{}: {} invalid samples, first at {i}: {v:?}", path.display(), violations.len());
    }
    Ok((dataset, path))
}

fn write_split(run: &mut Run, name: &str, dataset: &Dataset) -> anyhow::Result<()> {
    let mut bytes = Vec::new();
    write_dataset(dataset, &mut bytes)?;
    run.write(name, bytes)?;
    Ok(())
}

pub fn gen(common: &Common) -> CmdResult {
    let config = load_config(common, true)?.expect("required");
    let gcfg = config.generator_config(common.seed);
    let mut run = Run::start("gen", &common.out)?;
    run.config(&gcfg).map_err(Failure::Run)?;
    run.seed(gcfg.seed);
    run.input(common.config.as_ref().expect("required"));
    let (train, test, truth) = generate(&gcfg).map_err(anyhow::Error::from)?;
    write_split(&mut run, "train.jsonl", &train)?;
    write_split(&mut run, "test.jsonl", &test)?;
    run.write_json("ground_truth.json", &ground_truth_report(&truth))?;
    for split in ["train", "test"] {
        read_split(&common.out, split)?;
    }
    let m = run.finish()?;
    println!(
        "generated {} train and {} test users into {} ({} files)",
        train.len(),
        test.len(),
        common.out.display(),
        m.outputs.len()
    );
    Ok(())
}

pub fn train(common: &Common, data: &Path) -> CmdResult {
    let config = load_config(common, true)?.expect("required");
    let mut tc = config.train_config();
    if let Some(seed) = common.seed {
        tc.seed = seed;
    }
    let (dataset, path) = read_split(data, "train")?;
    let mc = config.model_config(dataset.schema(), dataset.manifest.steps);
    let mut run = Run::start("train", &common.out)?;
    run.config(&(&mc, &tc)).map_err(Failure::Run)?;
    run.seed(tc.seed);
    run.input(&path);
    let outcome = fit(&dataset, mc, tc).map_err(anyhow::Error::from)?;
    let ckpt = run.path("checkpoint.fate");
    save_checkpoint(&outcome.model, &ckpt).map_err(anyhow::Error::from)?;
    run.produced("checkpoint.fate");
    run.write("history.csv", outcome.history_csv())?;
    run.write_json("history.json", &outcome.history)?;
    run.write_json("global.json", &outcome.global)?;
    run.write_json("trajectory.json", &outcome.trajectory)?;
    let back = read_checkpoint(BufReader::new(File::open(&ckpt).map_err(anyhow::Error::from)?))
        .map_err(anyhow::Error::from)?;
    if back.config != outcome.model.config {
        return Err(Failure::Run(anyhow!("checkpoint round trip changed the model configuration")));
    }
    run.finish()?;
    let last = outcome.history.last().expect("at least one epoch");
    println!(
        "trained {} epochs (best {}), validation RMSE {:.4}; A* argmax {}",
        outcome.history.len(),
        outcome.best_epoch,
        outcome.history[outcome.best_epoch - 1].val_rmse.min(last.val_rmse),
        dataset.schema().names()[outcome.global.dominant_action()]
    );
    Ok(())
}

/// Loads a checkpoint wired for `dataset`, reporting every tensor whose
/// shape disagrees.
fn load_model(config: Option<&FateConfig>, checkpoint: &Path, dataset: &Dataset) -> anyhow::Result<Model> {
    let open = || File::open(checkpoint).with_context(|| format!("opening {}", checkpoint.display()));
    let manifest = read_manifest(BufReader::new(open()?))?;
    let expected = match config {
        Some(c) => c.model_config(dataset.schema(), dataset.manifest.steps),
        None => ModelConfig {
            schema: dataset.schema().clone(),
            steps: dataset.manifest.steps,
            ..manifest.config.clone()
        },
    };
    read_checkpoint_for(BufReader::new(open()?), &expected).map_err(|e| match e {
        FateError::Incompatible(diffs) => anyhow!(
            "checkpoint {} does not fit this data/configuration:\n  {}",
            checkpoint.display(),
            diffs.join("\n  ")
        ),
        other => other.into(),
    })
}

fn sibling<T: serde::de::DeserializeOwned>(checkpoint: &Path, name: &str) -> anyhow::Result<Option<T>> {
    let path = checkpoint.with_file_name(name);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path)?;
    Ok(Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?))
}

fn read_predictions(path: &Path, dataset: &Dataset) -> anyhow::Result<Vec<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut by_user = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("user_id")) {
            continue;
        }
        let (u, p) = line
            .split_once(',')
            .ok_or_else(|| anyhow!("{}:{}: expected `user_id,prediction`", path.display(), i + 1))?;
        let u: u64 = u.trim().parse().with_context(|| format!("{}:{}", path.display(), i + 1))?;
        let p: f64 = p.trim().parse().with_context(|| format!("{}:{}", path.display(), i + 1))?;
        by_user.insert(u, p);
    }
    dataset
        .samples
        .iter()
        .map(|s| {
            by_user
                .get(&s.user_id)
                .copied()
                .ok_or_else(|| anyhow!("no prediction for user {}", s.user_id))
        })
        .collect()
}

pub fn eval(
    common: &Common,
    data: &Path,
    split: &str,
    checkpoint: Option<&Path>,
    predictions: Option<&Path>,
) -> CmdResult {
    let config = load_config(common, false)?;
    let (dataset, path) = read_split(data, split)?;
    let mut run = Run::start("eval", &common.out)?;
    if let Some(c) = &config {
        run.config(c).map_err(Failure::Run)?;
    }
    run.input(&path);
    let report = match (predictions, checkpoint) {
        (Some(pred), _) => {
            run.input(pred);
            let preds = read_predictions(pred, &dataset)?;
            EvalReport {
                metrics: metrics(&preds, &dataset.labels()).map_err(anyhow::Error::from)?,
                history: Vec::new(),
                global_trajectory: Vec::new(),
            }
        }
        (None, Some(ckpt)) => {
            run.input(ckpt);
            let model = load_model(config.as_ref(), ckpt, &dataset)?;
            let mut report = evaluate(&model, &dataset).map_err(anyhow::Error::from)?;
            report.history = sibling::<Vec<EpochRecord>>(ckpt, "history.json")?.unwrap_or_default();
            report.global_trajectory = sibling::<Vec<GlobalImportance>>(ckpt, "trajectory.json")?.unwrap_or_default();
            report
        }
        (None, None) => return Err(Failure::Config("eval needs --checkpoint or --predictions".into())),
    };
    run.write_json("eval_report.json", &report)?;
    run.finish()?;
    let m = &report.metrics;
    println!(
        "{split}: n={} RMSE {:.4} MAE {:.4} MAPE {}",
        m.n,
        m.rmse,
        m.mae,
        m.mape.map_or("n/a".into(), |v| format!("{v:.4}"))
    );
    Ok(())
}

/// Mean posterior and mean temporal attention over `explanations`.
fn global_from(explanations: &[LocalExplanation], model: &Model, prepared: &Dataset) -> anyhow::Result<GlobalImportance> {
    let mut posteriors = Vec::with_capacity(prepared.len());
    for s in &prepared.samples {
        let (out, _) = model.forward(s)?;
        posteriors.push(posterior_q(s.label, &out));
    }
    let betas: Vec<_> = explanations
        .iter()
        .map(|e| rows_to_matrix(&e.temporal))
        .collect();
    let t_star = update_global_temporal(&betas)?;
    Ok(GlobalImportance {
        a_star: update_global_action(&posteriors)?,
        t_star: t_star.outer_iter().map(|r| r.to_vec()).collect(),
        epoch: 0,
    })
}

pub fn explain(common: &Common, data: &Path, split: &str, checkpoint: &Path, users: usize) -> CmdResult {
    let config = load_config(common, false)?;
    let (dataset, path) = read_split(data, split)?;
    let mut run = Run::start("explain", &common.out)?;
    if let Some(c) = &config {
        run.config(c).map_err(Failure::Run)?;
    }
    run.input(&path);
    run.input(checkpoint);
    let model = load_model(config.as_ref(), checkpoint, &dataset)?;
    let prepared = model.prepare(&dataset).map_err(anyhow::Error::from)?;
    let explanations = prepared
        .samples
        .iter()
        .map(|s| explain_sample(s, &model))
        .collect::<fate_core::Result<Vec<_>>>()
        .map_err(anyhow::Error::from)?;
    for e in &explanations {
        let total: f64 = e.action.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Failure::Run(anyhow!("user {}: A sums to {total}", e.user_id)));
        }
    }
    let global = match sibling::<GlobalImportance>(checkpoint, "global.json")? {
        Some(g) => g,
        None => global_from(&explanations, &model, &prepared)?,
    };
    let names: Vec<String> = dataset.schema().names().to_vec();
    let mut step_header = vec!["t".to_string()];
    step_header.extend(names.iter().cloned());
    let with_index = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
        rows.iter()
            .enumerate()
            .map(|(i, r)| std::iter::once(i as f64).chain(r.iter().cloned()).collect())
            .collect()
    };

    run.write_json("local.json", &explanations)?;
    run.write_json("global.json", &global)?;
    run.write("global_A_star.csv", matrix_csv(&[global.a_star.clone()], Some(&names)))?;
    run.write("global_T_star.csv", matrix_csv(&with_index(&global.t_star), Some(&step_header)))?;
    let local_a: Vec<Vec<f64>> = explanations.iter().map(|e| e.action.clone()).collect();
    let mut user_header = vec!["user_id".to_string()];
    user_header.extend(names.iter().cloned());
    let local_rows: Vec<Vec<f64>> = explanations
        .iter()
        .map(|e| std::iter::once(e.user_id as f64).chain(e.action.iter().cloned()).collect())
        .collect();
    run.write("local_A.csv", matrix_csv(&local_rows, Some(&user_header)))?;
    let plots = !common.no_plots;
    if plots {
        heatmap(&global.t_star, &run.path("global_T_star.png"))?;
        run.produced("global_T_star.png");
        heatmap(&local_a, &run.path("local_A.png"))?;
        run.produced("local_A.png");
    }
    for e in explanations.iter().take(users) {
        let stem = format!("users/u{}", e.user_id);
        run.write(&format!("{stem}_Tm.csv"), matrix_csv(&with_index(&e.temporal), Some(&step_header)))?;
        let width = e.friendship.iter().map(Vec::len).max().unwrap_or(0);
        let mut friend_header = vec!["t".to_string()];
        friend_header.extend((0..width).map(|v| format!("friend{v}")));
        run.write(&format!("{stem}_F.csv"), matrix_csv(&with_index(&e.friendship), Some(&friend_header)))?;
        if plots {
            heatmap(&e.temporal, &run.path(&format!("{stem}_Tm.png")))?;
            run.produced(&format!("{stem}_Tm.png"));
            heatmap(&e.friendship, &run.path(&format!("{stem}_F.png")))?;
            run.produced(&format!("{stem}_F.png"));
        }
    }
    run.finish()?;
    println!(
        "explained {} users; global dominant action {}",
        explanations.len(),
        names[global.dominant_action()]
    );
    Ok(())
}

pub fn bench(common: &Common, analytic: bool, parallel: bool) -> CmdResult {
    let config = load_config(common, true)?.expect("required");
    let mut bc = config.bench_config();
    bc.parallel |= parallel;
    let seed = common.seed.unwrap_or(0);
    let mut run = Run::start("bench", &common.out)?;
    run.config(&bc).map_err(Failure::Run)?;
    run.seed(seed);
    run.input(common.config.as_ref().expect("required"));
    let report = if analytic {
        analytic_report(&bc)
    } else {
        time_layers(&bc, seed)
    }
    .map_err(anyhow::Error::from)?;
    if !report.params.consistent() || !report.vanilla_params.consistent() {
        return Err(Failure::Run(anyhow!("enumerated parameter counts disagree with the closed form")));
    }
    run.write_json("complexity_report.json", &report)?;
    run.write("complexity.txt", report.table())?;
    run.finish()?;
    print!("{}", report.table());
    Ok(())
}
