//! Block ascent: scaled gradient and limited-memory BFGS directions with a
//! backtracking (Armijo) line search.

use serde::{Deserialize, Serialize};

use crate::error::LearnError;

/// Sufficient-increase constant of the Armijo test.
const ARMIJO: f64 = 1e-4;
const MIN_STEP: f64 = 1e-14;
const MAX_STEP: f64 = 1e4;
const GROWTH: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub iterations: usize,
    pub evaluations: usize,
    pub start_value: f64,
    pub end_value: f64,
}

/// Value and (optionally) gradient at a point.
pub type Eval = (f64, Vec<f64>);

/// Up to `max_iters` ascent steps on `x`. Every accepted step satisfies the
/// Armijo condition, so the objective never decreases. `step` carries the
/// adapted gradient step size between calls. Stops early once an accepted
/// step improves the objective by less than `tol * max(|f|, 1)`.
pub fn ascend<F>(x: &mut Vec<f64>, eval: F, max_iters: usize, step: &mut f64, tol: f64) -> Result<BlockReport, LearnError>
where
    F: FnMut(&[f64]) -> Result<Eval, LearnError>,
{
    ascend_scaled(x, eval, None, max_iters, step, tol)
}

/// Curvature pairs kept by the quasi-Newton direction.
const MEMORY: usize = 8;

/// Limited-memory BFGS history for a maximization problem.
struct History {
    pairs: std::collections::VecDeque<(Vec<f64>, Vec<f64>, f64)>,
}

impl History {
    fn new() -> Self {
        Self {
            pairs: std::collections::VecDeque::with_capacity(MEMORY),
        }
    }

    /// Records `s = x_new - x_old`, `y = g_old - g_new` when the pair has
    /// positive curvature.
    fn push(&mut self, s: Vec<f64>, y: Vec<f64>) {
        let sy = dot(&s, &y);
        if !(sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt()) {
            return;
        }
        if self.pairs.len() == MEMORY {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y, 1.0 / sy));
    }

    /// Two-loop recursion with initial metric `gamma * scale`.
    fn direction(&self, g: &[f64], scale: Option<&[f64]>, out: &mut [f64]) {
        out.copy_from_slice(g);
        let mut alpha = Vec::with_capacity(self.pairs.len());
        for (s, y, rho) in self.pairs.iter().rev() {
            let a = rho * dot(s, out);
            out.iter_mut().zip(y).for_each(|(o, yi)| *o -= a * yi);
            alpha.push(a);
        }
        let gamma = match self.pairs.back() {
            Some((s, y, _)) => {
                let yy: f64 = y.iter().enumerate().map(|(i, v)| v * v * scale.map_or(1.0, |d| d[i])).sum();
                dot(s, y) / yy
            }
            None => 1.0,
        };
        for (i, o) in out.iter_mut().enumerate() {
            *o *= gamma * scale.map_or(1.0, |d| d[i]);
        }
        for ((s, y, rho), a) in self.pairs.iter().zip(alpha.into_iter().rev()) {
            let b = rho * dot(y, out);
            out.iter_mut().zip(s).for_each(|(o, si)| *o += (a - b) * si);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// [`ascend`] preconditioned by a positive diagonal `scale`. The first step
/// follows `scale * gradient` with the adaptive step size; later steps use
/// limited-memory BFGS directions (initial metric proportional to `scale`)
/// with a unit trial step, falling back to the scaled gradient whenever the
/// quasi-Newton direction is not an ascent direction.
pub fn ascend_scaled<F>(
    x: &mut Vec<f64>,
    mut eval: F,
    scale: Option<&[f64]>,
    max_iters: usize,
    step: &mut f64,
    tol: f64,
) -> Result<BlockReport, LearnError>
where
    F: FnMut(&[f64]) -> Result<Eval, LearnError>,
{
    let (mut f, mut g) = eval(x)?;
    if !f.is_finite() {
        return Err(LearnError::Diverged { iterations: 0 });
    }
    let start_value = f;
    let mut evaluations = 1;
    let mut iterations = 0;
    if x.is_empty() {
        return Ok(BlockReport {
            iterations,
            evaluations,
            start_value,
            end_value: f,
        });
    }
    let mut history = History::new();
    let mut cand = vec![0.0; x.len()];
    let mut dir = vec![0.0; x.len()];
    while iterations < max_iters {
        let mut quasi_newton = !history.pairs.is_empty();
        if quasi_newton {
            history.direction(&g, scale, &mut dir);
        }
        let mut slope = dot(&g, &dir);
        if !quasi_newton || !(slope > 0.0) || !dir.iter().all(|d| d.is_finite()) {
            quasi_newton = false;
            for (i, (d, gi)) in dir.iter_mut().zip(&g).enumerate() {
                *d = scale.map_or(1.0, |s| s[i]) * gi;
            }
            slope = dot(&g, &dir);
        }
        if !(slope > 1e-24) {
            break;
        }
        let mut t = if quasi_newton { 1.0 } else { *step };
        let mut accepted = None;
        while t >= MIN_STEP {
            for ((c, xi), di) in cand.iter_mut().zip(x.iter()).zip(&dir) {
                *c = xi + t * di;
            }
            let (fc, gc) = eval(&cand)?;
            evaluations += 1;
            if fc.is_finite() && fc >= f + ARMIJO * t * slope {
                accepted = Some((fc, gc));
                break;
            }
            t *= 0.5;
        }
        let Some((fc, gc)) = accepted else {
            if !quasi_newton {
                *step = t.max(MIN_STEP);
            }
            break;
        };
        if !quasi_newton {
            *step = (t * GROWTH).min(MAX_STEP);
        }
        iterations += 1;
        let s_k: Vec<f64> = cand.iter().zip(x.iter()).map(|(c, xi)| c - xi).collect();
        let y_k: Vec<f64> = g.iter().zip(&gc).map(|(a, b)| a - b).collect();
        history.push(s_k, y_k);
        std::mem::swap(x, &mut cand);
        let improvement = fc - f;
        f = fc;
        g = gc;
        if improvement <= tol * f.abs().max(1.0) {
            break;
        }
    }
    Ok(BlockReport {
        iterations,
        evaluations,
        start_value,
        end_value: f,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maximizes_concave_quadratic_monotonically() {
        let mut x = vec![5.0, -3.0];
        let mut step = 1.0;
        let mut history = Vec::new();
        let report = ascend(
            &mut x,
            |p| {
                let f = -(p[0] - 1.0).powi(2) - 4.0 * (p[1] + 2.0).powi(2);
                history.push(f);
                Ok((f, vec![-2.0 * (p[0] - 1.0), -8.0 * (p[1] + 2.0)]))
            },
            500,
            &mut step,
            1e-14,
        )
        .unwrap();
        assert!((x[0] - 1.0).abs() < 1e-5 && (x[1] + 2.0).abs() < 1e-5, "{x:?}");
        assert!(report.end_value >= report.start_value);
    }

    #[test]
    fn scaling_fixes_ill_conditioning() {
        let f = |p: &[f64]| -> Result<Eval, LearnError> {
            let v = -(p[0] - 1.0).powi(2) * 1000.0 - (p[1] + 2.0).powi(2) * 0.01;
            Ok((v, vec![-2000.0 * (p[0] - 1.0), -0.02 * (p[1] + 2.0)]))
        };
        let mut x = vec![0.0, 0.0];
        let mut step = 1.0;
        ascend_scaled(&mut x, f, Some(&[1.0 / 2000.0, 1.0 / 0.02]), 50, &mut step, 0.0).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-6 && (x[1] + 2.0).abs() < 1e-6, "{x:?}");
    }

    #[test]
    fn empty_block_is_a_no_op() {
        let mut x = Vec::new();
        let mut step = 0.1;
        let r = ascend(&mut x, |_| Ok((2.0, vec![])), 10, &mut step, 1e-6).unwrap();
        assert_eq!(r.iterations, 0);
        assert_eq!(step, 0.1);
    }

    #[test]
    fn non_finite_start_is_divergence() {
        let mut x = vec![0.0];
        let mut step = 0.1;
        let r = ascend(&mut x, |_| Ok((f64::NAN, vec![0.0])), 10, &mut step, 1e-6);
        assert!(matches!(r, Err(LearnError::Diverged { .. })));
    }
}
