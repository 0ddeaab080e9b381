//! Central finite-difference verification of tape gradients.

use crate::error::Result;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub analytic_norm: f64,
    pub max_abs_error: f64,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`; zero when both
    /// gradients are below [`ZERO_GRADIENT`].
    pub relative_error: f64,
}

/// Gradient norm below which a tensor counts as receiving no gradient.
pub const ZERO_GRADIENT: f64 = 1e-10;

/// Compares the analytic gradient of the scalar built by `f` against central
/// differences refined by Ridders' extrapolation from initial step `h`, for
/// every tensor in `store`.
pub fn check_gradients<F>(store: &mut ParamStore, h: f64, f: F) -> Result<Vec<TensorCheck>>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let root = f(&mut tape)?;
        tape.backward(root)
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(store);
        let root = f(&mut tape)?;
        Ok(tape.scalar(root))
    };
    let mut out = Vec::new();
    for id in store.ids().collect::<Vec<_>>() {
        let (rows, cols) = store.value(id).dim();
        let mut diff_sq = 0.0;
        let mut a_sq = 0.0;
        let mut n_sq = 0.0;
        let mut max_abs: f64 = 0.0;
        for i in 0..rows {
            for j in 0..cols {
                let orig = store.value(id)[[i, j]];
                let numeric = ridders(
                    |offset| {
                        store.value_mut(id)[[i, j]] = orig + offset;
                        eval(store)
                    },
                    h,
                )?
                .0;
                store.value_mut(id)[[i, j]] = orig;
                let a = analytic.get(id)[[i, j]];
                diff_sq += (a - numeric).powi(2);
                a_sq += a * a;
                n_sq += numeric * numeric;
                max_abs = max_abs.max((a - numeric).abs());
            }
        }
        let scale = a_sq.sqrt().max(n_sq.sqrt());
        out.push(TensorCheck {
            name: store.name(id).to_string(),
            entries: rows * cols,
            analytic_norm: a_sq.sqrt(),
            max_abs_error: max_abs,
            relative_error: if scale < ZERO_GRADIENT {
                0.0
            } else {
                diff_sq.sqrt() / scale
            },
        });
    }
    Ok(out)
}

const RIDDERS_SHRINK: f64 = 1.4;
const RIDDERS_TABLE: usize = 16;

/// Derivative at zero of `f(offset)` with an error estimate, by polynomial
/// extrapolation of central differences over shrinking steps. The whole
/// table is searched, so a curvature jump inside the larger steps does not
/// hide the consistent estimates at smaller ones.
pub fn ridders<F>(mut f: F, h: f64) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> Result<f64>,
{
    let c2 = RIDDERS_SHRINK * RIDDERS_SHRINK;
    let mut table = vec![vec![0.0; RIDDERS_TABLE]; RIDDERS_TABLE];
    let mut hh = h;
    table[0][0] = (f(hh)? - f(-hh)?) / (2.0 * hh);
    let mut best = table[0][0];
    let mut err = f64::INFINITY;
    for i in 1..RIDDERS_TABLE {
        hh /= RIDDERS_SHRINK;
        table[0][i] = (f(hh)? - f(-hh)?) / (2.0 * hh);
        let mut fac = c2;
        for j in 1..=i {
            table[j][i] = (table[j - 1][i] * fac - table[j - 1][i - 1]) / (fac - 1.0);
            fac *= c2;
            let e = (table[j][i] - table[j - 1][i])
                .abs()
                .max((table[j][i] - table[j - 1][i - 1]).abs());
            if e <= err {
                err = e;
                best = table[j][i];
            }
        }
    }
    Ok((best, err))
}

/// Largest relative error over a report.
pub fn worst(report: &[TensorCheck]) -> Option<&TensorCheck> {
    report
        .iter()
        .max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ridders_on_smooth_and_kinked_functions() {
        let (d, err) = ridders(|o| Ok((0.3f64 + o).sin() * (0.3 + o).exp()), 0.1).unwrap();
        let exact = 0.3f64.exp() * (0.3f64.sin() + 0.3f64.cos());
        assert!((d - exact).abs() < 1e-10 && err < 1e-8);
        // ELU-like curvature jump a short distance from the evaluation point.
        let kink = 2e-4;
        let f = |o: f64| -> Result<f64> {
            let x = o - kink;
            Ok(if x > 0.0 { x } else { x.exp_m1() })
        };
        let (d, _) = ridders(f, 1e-3).unwrap();
        assert!((d - (-kink).exp()).abs() < 1e-8, "{d}");
    }
}
