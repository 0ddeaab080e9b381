//! Posterior responsibilities, the EM objective, closed-form global
//! importance and local explanation export.

use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::domain::TemporalSample;
use crate::error::{FateError, Result};
use crate::head::{gaussian_log_density, ImportanceVectors, MixtureOutput};
use crate::model::Model;

/// Floor applied to global action importance before taking its log.
pub const A_STAR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub q: Vec<f64>,
}

/// `q_k ∝ N(e; μ_k, sd_k²)·p_k`, normalized in log space. Falls back to the
/// prior `p` when every weighted density underflows.
pub fn posterior_q(e_obs: f64, out: &MixtureOutput) -> Posterior {
    let logs: Vec<f64> = (0..out.k())
        .map(|k| {
            let p = out.action_probs[k];
            if p > 0.0 {
                p.ln() + gaussian_log_density(e_obs, out.mu[k], out.sd[k])
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Posterior {
            q: out.action_probs.clone(),
        };
    }
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = w.iter().sum();
    Posterior {
        q: w.into_iter().map(|x| x / z).collect(),
    }
}

/// Negative expected complete-data log-likelihood of one sample, with `q`
/// and `A*` held fixed.
pub fn em_loss(e_obs: f64, out: &MixtureOutput, q: &Posterior, a_star: &[f64]) -> f64 {
    (0..out.k())
        .filter(|&k| q.q[k] > 0.0)
        .map(|k| {
            let nll = -gaussian_log_density(e_obs, out.mu[k], out.sd[k]);
            let log_p = out.action_probs[k].max(f64::MIN_POSITIVE).ln();
            q.q[k] * (nll - log_p - a_star[k].max(A_STAR_FLOOR).ln())
        })
        .sum()
}

/// Batch mean of [`em_loss`].
pub fn em_loss_batch(
    targets: &[f64],
    outputs: &[MixtureOutput],
    posteriors: &[Posterior],
    a_star: &[f64],
) -> Result<f64> {
    if targets.is_empty() {
        return Err(FateError::Empty("batch"));
    }
    let total: f64 = targets
        .iter()
        .zip(outputs)
        .zip(posteriors)
        .map(|((e, o), q)| em_loss(*e, o, q, a_star))
        .sum();
    Ok(total / targets.len() as f64)
}

/// `A* = mean_u q^u`.
pub fn update_global_action(posteriors: &[Posterior]) -> Result<Vec<f64>> {
    let first = posteriors.first().ok_or(FateError::Empty("posterior set"))?;
    let mut acc = vec![0.0; first.q.len()];
    for p in posteriors {
        if p.q.len() != acc.len() {
            return Err(FateError::Shape("posteriors of differing K".into()));
        }
        for (a, q) in acc.iter_mut().zip(&p.q) {
            *a += q;
        }
    }
    let n = posteriors.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// `T*_{t,k} = mean_u β^u_{t,k}`.
pub fn update_global_temporal(betas: &[Array2<f64>]) -> Result<Array2<f64>> {
    let first = betas.first().ok_or(FateError::Empty("attention set"))?;
    let mut acc = Array2::zeros(first.raw_dim());
    for b in betas {
        if b.dim() != acc.dim() {
            return Err(FateError::Shape(format!(
                "temporal attention {:?} differs from {:?}",
                b.dim(),
                acc.dim()
            )));
        }
        acc += b;
    }
    Ok(acc / betas.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalImportance {
    #[serde(rename = "A_star")]
    pub a_star: Vec<f64>,
    /// `T × K`, rows are time steps.
    #[serde(rename = "T_star")]
    pub t_star: Vec<Vec<f64>>,
    pub epoch: usize,
}

impl GlobalImportance {
    pub fn uniform(k: usize, steps: usize) -> Self {
        Self {
            a_star: vec![1.0 / k as f64; k],
            t_star: vec![vec![1.0 / steps as f64; k]; steps],
            epoch: 0,
        }
    }

    pub fn t_star_matrix(&self) -> Array2<f64> {
        rows_to_matrix(&self.t_star)
    }

    pub fn log_a_star(&self) -> Vec<f64> {
        self.a_star.iter().map(|a| a.max(A_STAR_FLOOR).ln()).collect()
    }

    pub fn dominant_action(&self) -> usize {
        argmax(&self.a_star)
    }

    /// Mass of column `k` of `T*` on the last `ceil(T/3)` steps.
    pub fn late_mass(&self, k: usize) -> f64 {
        let steps = self.t_star.len();
        let tail = steps.div_ceil(3);
        self.t_star[steps - tail..].iter().map(|r| r[k]).sum()
    }
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

pub fn rows_to_matrix(rows: &[Vec<f64>]) -> Array2<f64> {
    let r = rows.len();
    let c = rows.first().map(|x| x.len()).unwrap_or(0);
    Array2::from_shape_fn((r, c), |(i, j)| rows[i][j])
}

/// Local explanation of one user, read off a forward pass.
pub fn extract_local(sample: &TemporalSample, model: &Model) -> Result<ImportanceVectors> {
    Ok(model.forward(sample)?.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalExplanation {
    pub user_id: u64,
    #[serde(rename = "A")]
    pub action: Vec<f64>,
    #[serde(rename = "Tm")]
    pub temporal: Vec<Vec<f64>>,
    #[serde(rename = "F")]
    pub friendship: Vec<Vec<f64>>,
    /// Friend ids labelling the columns of `F`, per step.
    pub friends: Vec<Vec<u64>>,
    pub prediction: f64,
    pub label: f64,
}

pub fn explain_sample(sample: &TemporalSample, model: &Model) -> Result<LocalExplanation> {
    let (out, imp) = model.forward(sample)?;
    Ok(LocalExplanation {
        user_id: sample.user_id,
        action: imp.action,
        temporal: imp.temporal,
        friendship: imp.friendship,
        friends: sample.graphs.iter().map(|g| g.friends.clone()).collect(),
        prediction: out.point_estimate,
        label: sample.label,
    })
}

/// Comma-separated matrix with an optional header row.
pub fn matrix_csv(rows: &[Vec<f64>], header: Option<&[String]>) -> String {
    let mut s = String::new();
    if let Some(h) = header {
        s.push_str(&h.join(","));
        s.push('\n');
    }
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        let _ = writeln!(s, "{}", cells.join(","));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn out(p: Vec<f64>, mu: Vec<f64>, sd: Vec<f64>) -> MixtureOutput {
        MixtureOutput::new(p, mu, sd)
    }

    /// Direct density-ratio oracle.
    fn posterior_direct(e: f64, o: &MixtureOutput) -> Vec<f64> {
        let w: Vec<f64> = (0..o.k())
            .map(|k| {
                let z = (e - o.mu[k]) / o.sd[k];
                o.action_probs[k] * (-0.5 * z * z).exp()
                    / (o.sd[k] * (2.0 * std::f64::consts::PI).sqrt())
            })
            .collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|x| x / s).collect()
    }

    #[test]
    fn posterior_examples() {
        let o = out(vec![0.5, 0.5], vec![0.0, 1.0], vec![1.0, 1.0]);
        let q = posterior_q(0.0, &o).q;
        assert!((q[0] - 0.6225).abs() < 1e-4 && (q[1] - 0.3775).abs() < 1e-4);
        let oracle = posterior_direct(0.0, &o);
        assert!((q[0] - oracle[0]).abs() < 1e-12);

        let same = out(vec![0.2, 0.3, 0.5], vec![1.0; 3], vec![2.0; 3]);
        assert_eq!(posterior_q(-4.0, &same).q.len(), 3);
        for (a, b) in posterior_q(-4.0, &same).q.iter().zip(&same.action_probs) {
            assert!((a - b).abs() < 1e-15);
        }

        let hot = out(vec![0.0, 1.0], vec![0.0, 50.0], vec![1.0, 0.1]);
        assert_eq!(posterior_q(0.0, &hot).q, vec![0.0, 1.0]);
    }

    #[test]
    fn posterior_survives_underflow() {
        let o = out(vec![0.3, 0.7], vec![0.0, 1.0], vec![1e-4, 1e-4]);
        let q = posterior_q(1e6, &o).q;
        assert!(q.iter().all(|x| x.is_finite()));
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // Far from both means the nearer component wins outright.
        assert!(q[1] > 0.999);
    }

    #[test]
    fn em_loss_examples() {
        let single = out(vec![1.0], vec![0.5], vec![1.3]);
        let nll = -gaussian_log_density(2.0, 0.5, 1.3);
        assert!((em_loss(2.0, &single, &Posterior { q: vec![1.0] }, &[1.0]) - nll).abs() < 1e-12);

        let k = 4;
        let u = vec![0.25; k];
        let same = out(u.clone(), vec![0.0; k], vec![1.0; k]);
        let loss = em_loss(0.7, &same, &Posterior { q: u.clone() }, &u);
        let expect = -gaussian_log_density(0.7, 0.0, 1.0) + 2.0 * (k as f64).ln();
        assert!((loss - expect).abs() < 1e-12);

        let zero = em_loss(0.0, &out(vec![0.5, 0.5], vec![0.0; 2], vec![1.0; 2]), &Posterior { q: vec![0.5, 0.5] }, &[1.0, 0.0]);
        assert!(zero.is_finite());
    }

    #[test]
    fn global_updates() {
        let a = update_global_action(&[
            Posterior { q: vec![0.6, 0.4] },
            Posterior { q: vec![0.2, 0.8] },
        ])
        .unwrap();
        assert!((a[0] - 0.4).abs() < 1e-12 && (a[1] - 0.6).abs() < 1e-12);
        assert!(update_global_action(&[]).is_err());

        let mut b1 = Array2::zeros((4, 1));
        b1[[0, 0]] = 1.0;
        let mut b2 = Array2::zeros((4, 1));
        b2[[1, 0]] = 1.0;
        let t = update_global_temporal(&[b1.clone(), b2]).unwrap();
        assert_eq!(t.column(0).to_vec(), vec![0.5, 0.5, 0.0, 0.0]);
        assert_eq!(update_global_temporal(&[b1.clone()]).unwrap(), b1);
        assert!(update_global_temporal(&[b1, Array2::zeros((3, 1))]).is_err());
    }

    #[test]
    fn closed_form_matches_grid_search() {
        let qs = [
            Posterior { q: vec![0.9, 0.1] },
            Posterior { q: vec![0.35, 0.65] },
            Posterior { q: vec![0.52, 0.48] },
        ];
        let closed = update_global_action(&qs).unwrap();
        let third = |a: f64| -> f64 {
            qs.iter()
                .map(|p| -(p.q[0] * a.ln() + p.q[1] * (1.0 - a).ln()))
                .sum()
        };
        let best = (1..100_000)
            .map(|i| i as f64 / 100_000.0)
            .min_by(|x, y| third(*x).total_cmp(&third(*y)))
            .unwrap();
        assert!((best - closed[0]).abs() < 2e-5);
    }

    #[test]
    fn late_mass_and_export() {
        let mut g = GlobalImportance::uniform(2, 6);
        assert!((g.late_mass(0) - 1.0 / 3.0).abs() < 1e-12);
        g.a_star = vec![0.2, 0.8];
        assert_eq!(g.dominant_action(), 1);
        let csv = matrix_csv(&[vec![0.5, 1.0]], Some(&["a".into(), "b".into()]));
        assert_eq!(csv, "a,b\n0.5,1\n");
        let json = serde_json::to_value(&g).unwrap();
        assert!(json.get("A_star").is_some() && json.get("T_star").is_some());
    }

    fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.01f64..1.0, k).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn posterior_is_simplex_and_matches_oracle(
            e in -4.0f64..4.0,
            p in simplex(3),
            mu in proptest::collection::vec(-2.0f64..2.0, 3),
            sd in proptest::collection::vec(0.2f64..2.0, 3),
        ) {
            let o = out(p, mu, sd);
            let q = posterior_q(e, &o).q;
            prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (a, b) in q.iter().zip(posterior_direct(e, &o)) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn closed_form_never_increases_loss(
            qs in proptest::collection::vec(simplex(3), 1..6),
            prior in simplex(3),
            e in -2.0f64..2.0,
        ) {
            let o = out(prior.clone(), vec![0.0, 0.5, 1.0], vec![1.0; 3]);
            let posts: Vec<Posterior> = qs.into_iter().map(|q| Posterior { q }).collect();
            let a = update_global_action(&posts).unwrap();
            let targets = vec![e; posts.len()];
            let outs = vec![o; posts.len()];
            let before = em_loss_batch(&targets, &outs, &posts, &prior).unwrap();
            let after = em_loss_batch(&targets, &outs, &posts, &a).unwrap();
            prop_assert!(after <= before + 1e-12);
        }

        #[test]
        fn temporal_update_keeps_simplex_columns(
            cols in proptest::collection::vec(simplex(5), 1..8)
        ) {
            let betas: Vec<Array2<f64>> = cols
                .iter()
                .map(|c| Array2::from_shape_fn((5, 2), |(t, _)| c[t]))
                .collect();
            let t = update_global_temporal(&betas).unwrap();
            for col in t.columns() {
                prop_assert!((col.sum() - 1.0).abs() < 1e-9);
            }
        }
    }
}
