//! Three operations for the static page in `www/`. Each returns a JSON
//! string; the `*_json` functions are the native entry points and the
//! exported wrappers only convert errors into JS exceptions.

use fate_core::bench::count_params;
use fate_core::domain::ActionSchema;
use fate_core::explain_em::{explain_sample, posterior_q};
use fate_core::head::{mixture_log_density, MixtureOutput};
use fate_core::model::{Model, ModelConfig, Variant};
use fate_core::synthdata::{generate, FriendCount, GeneratorConfig, LabelRule, PersonaSpec};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

type Out = Result<String, String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn scalar_config(k: usize, embed_dim: usize, hidden_dim: usize, steps: usize) -> Result<ModelConfig, String> {
    Ok(ModelConfig {
        schema: ActionSchema::uniform(k, 1, 3).map_err(err)?,
        steps,
        embed_dim,
        hidden_dim,
        scorer_hidden: hidden_dim.max(4),
        head_hidden: hidden_dim.max(4),
        ..Default::default()
    })
}

/// Tensor-wired and vanilla parameter counts per layer for `K` scalar actions.
pub fn param_counts_json(k: usize, embed_dim: usize, hidden_dim: usize) -> Out {
    let config = scalar_config(k, embed_dim, hidden_dim, 14)?;
    config.check().map_err(err)?;
    let tensor = count_params(&config, Variant::Full).map_err(err)?;
    let layers: Vec<Value> = tensor
        .layers
        .iter()
        .map(|l| {
            json!({
                "layer": l.layer, "d_in": l.d_in, "d_out": l.d_out,
                "vanilla": l.vanilla, "tensor": l.tensor, "reduction": l.reduction,
            })
        })
        .collect();
    let vanilla = count_params(&config, Variant::Ts).map_err(err)?;
    Ok(json!({
        "k": k,
        "layers": layers,
        "model_total": tensor.model_total,
        "vanilla_model_total": vanilla.model_total,
    })
    .to_string())
}

/// Posterior responsibilities and log density of `observed` under a
/// Gaussian mixture. `probs` is renormalized; `sd` must be positive.
pub fn mixture_posterior_json(observed: f64, probs: &[f64], mu: &[f64], sd: &[f64]) -> Out {
    let k = probs.len();
    if k == 0 || mu.len() != k || sd.len() != k {
        return Err(format!("need equal, non-empty lengths; got {k}, {}, {}", mu.len(), sd.len()));
    }
    if probs.iter().any(|p| !(*p >= 0.0)) || sd.iter().any(|s| !(*s > 0.0)) {
        return Err("weights must be non-negative and sd positive".into());
    }
    let z: f64 = probs.iter().sum();
    if !(z > 0.0) {
        return Err("weights sum to zero".into());
    }
    let out = MixtureOutput::new(probs.iter().map(|p| p / z).collect(), mu.to_vec(), sd.to_vec());
    let q = posterior_q(observed, &out);
    Ok(json!({
        "q": q.q,
        "log_density": mixture_log_density(observed, &out),
        "point_estimate": out.point_estimate,
    })
    .to_string())
}

/// Generates one synthetic ego-network and explains it with a freshly
/// initialized model seeded by `seed`.
pub fn explain_synthetic_json(k: usize, steps: usize, friends: usize, seed: u64) -> Out {
    if k == 0 || steps < 2 || !(1..=50).contains(&friends) {
        return Err("need k >= 1, steps >= 2 and 1 to 50 friends".into());
    }
    let persona = PersonaSpec {
        name: "demo".into(),
        base_rates: (0..k).map(|i| if i == 0 { 6.0 } else { 1.0 + i as f64 % 3.0 }).collect(),
        weekly_amplitude: vec![0.5; k],
        dominant_actions: vec![0],
        weight: 1.0,
    };
    let generator = GeneratorConfig {
        n_users: 2 * friends + 4,
        friends_per_user: FriendCount::Fixed { count: friends },
        steps,
        horizon: (steps / 2).max(1),
        personas: vec![persona],
        label_rule: LabelRule::WindowMean { action: 0 },
        seed,
        test_fraction: 0.5,
        schema_override: Some(ActionSchema::uniform(k, 1, 3).map_err(err)?),
        ..Default::default()
    };
    let (train, _, _) = generate(&generator).map_err(err)?;
    let sample = train.samples.first().ok_or("generator produced no users")?;
    let model = Model::new(scalar_config(k, 4, 8, steps)?, seed).map_err(err)?;
    let e = explain_sample(sample, &model).map_err(err)?;
    serde_json::to_string(&e).map_err(err)
}

fn js(r: Out) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn param_counts(k: usize, embed_dim: usize, hidden_dim: usize) -> Result<String, JsValue> {
    js(param_counts_json(k, embed_dim, hidden_dim))
}

#[wasm_bindgen]
pub fn mixture_posterior(observed: f64, probs: Vec<f64>, mu: Vec<f64>, sd: Vec<f64>) -> Result<String, JsValue> {
    js(mixture_posterior_json(observed, &probs, &mu, &sd))
}

#[wasm_bindgen]
pub fn explain_synthetic(k: usize, steps: usize, friends: usize, seed: u64) -> Result<String, JsValue> {
    js(explain_synthetic_json(k, steps, friends, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Value {
        serde_json::from_str(s).unwrap()
    }

    #[test]
    fn one_action_has_no_reduction() {
        let v = parse(&param_counts_json(1, 4, 4).unwrap());
        for l in v["layers"].as_array().unwrap() {
            assert_eq!(l["reduction"], 0);
        }
    }

    #[test]
    fn equal_components_keep_the_prior() {
        let v = parse(&mixture_posterior_json(0.3, &[1.0, 3.0], &[0.0, 0.0], &[1.0, 1.0]).unwrap());
        let q: Vec<f64> = serde_json::from_value(v["q"].clone()).unwrap();
        assert!((q[0] - 0.25).abs() < 1e-12 && (q[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn bad_mixture_is_rejected() {
        assert!(mixture_posterior_json(0.0, &[1.0], &[0.0, 1.0], &[1.0]).is_err());
        assert!(mixture_posterior_json(0.0, &[1.0], &[0.0], &[0.0]).is_err());
        assert!(mixture_posterior_json(0.0, &[0.0], &[0.0], &[1.0]).is_err());
    }
}
