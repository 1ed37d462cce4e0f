//! Central finite-difference validation of the tape's backward pass.
//!
//! Analytic gradients are compared entry-by-entry against
//! `(f(x+h) - f(x-h)) / 2h` on a relative scale. This is the independent
//! oracle for every backward formula in the crate: it never calls
//! `compute_gradients` to produce the reference side.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::Result;
use crate::numerics::graph::Graph;
use crate::numerics::tensor::Tensor;

/// Central differences of an O(1) scalar in f64 carry roundoff noise of
/// roughly `eps_forward / h` (a few 1e-9 at h = 1e-7 once forward-pass
/// accumulation is counted), so gradients below this floor are
/// indistinguishable from zero at any step size. The floor keeps such
/// entries from registering as spurious relative error while still flagging
/// any absolute disagreement above `floor * tolerance`.
pub const NEAR_ZERO_FLOOR: f64 = 1e-3;

/// Relative error with an absolute floor so near-zero gradients compare sanely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(NEAR_ZERO_FLOOR)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over all checked entries.
    pub max_rel_err: f64,
    /// Name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    /// Number of entries compared.
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }
}

pub struct CheckSettings {
    /// Central-difference step.
    pub h: f64,
    /// Per-tensor cap on checked entries; tensors at or under the cap are
    /// checked exhaustively, larger ones get a seeded random sample.
    pub max_entries: Option<(usize, u64)>,
}

impl Default for CheckSettings {
    fn default() -> Self {
        CheckSettings { h: 1e-5, max_entries: None }
    }
}

/// Checks `d loss / d p` for every named parameter against central
/// differences of the scalar produced by `build`.
///
/// `build` must be a pure function of the current tensor contents: it is
/// re-run many times with single entries perturbed in place.
pub fn check_gradients<F>(
    params: &[(String, Tensor)],
    build: F,
    settings: &CheckSettings,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Tensor>,
{
    let mut g = Graph::new();
    let loss = build(&mut g)?;
    let grads = g.compute_gradients(&loss)?;

    let eval = |graph_builder: &F| -> Result<f64> {
        let mut g = Graph::inference();
        Ok(graph_builder(&mut g)?.item())
    };

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, checked: 0 };
    for (name, p) in params {
        let n = p.numel();
        let indices: Vec<usize> = match settings.max_entries {
            Some((cap, seed)) if n > cap => {
                let mut rng = ChaCha12Rng::seed_from_u64(seed ^ p.id());
                let mut all: Vec<usize> = (0..n).collect();
                all.shuffle(&mut rng);
                let mut picked = all[..cap].to_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..n).collect(),
        };
        let analytic_all = grads.get(p);
        for &i in &indices {
            let orig = p.data()[i];
            p.data_mut()[i] = orig + settings.h;
            let lp = eval(&build)?;
            p.data_mut()[i] = orig - settings.h;
            let lm = eval(&build)?;
            p.data_mut()[i] = orig;
            let numeric = (lp - lm) / (2.0 * settings.h);
            let analytic = analytic_all.map_or(0.0, |g| g[i]);
            let e = rel_err(analytic, numeric);
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some((name.clone(), i));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Exhaustive per-op check: every entry of every input, default step.
pub fn check_graph_op<F>(params: &[(String, Tensor)], build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Tensor>,
{
    check_gradients(params, build, &CheckSettings::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_floor_handles_zero_pair() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!(rel_err(1e-12, 0.0) < 1e-3);
    }

    #[test]
    fn quadratic_gradient_checks_out() {
        // loss = sum(x . x^T) has gradient 2 * column-sums pattern; the
        // checker should agree with the tape to tight tolerance.
        let x = Tensor::param(&[2, 3], vec![0.5, -1.25, 2.0, 1.5, 0.75, -0.5]).unwrap();
        let params = vec![("x".to_string(), x.clone())];
        let report = check_graph_op(&params, |g| {
            let xt = g.transpose(&x)?;
            let m = g.matmul(&x, &xt)?;
            g.sum(&m)
        })
        .unwrap();
        assert_eq!(report.checked, 6);
        assert!(report.passes(1e-6), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn sampling_caps_checked_entries() {
        let x = Tensor::param(&[10, 10], vec![0.01; 100]).unwrap();
        let params = vec![("x".to_string(), x.clone())];
        let settings = CheckSettings { h: 1e-5, max_entries: Some((7, 42)) };
        let report = check_gradients(
            &params,
            |g| {
                let y = g.gelu(&x)?;
                g.sum(&y)
            },
            &settings,
        )
        .unwrap();
        assert_eq!(report.checked, 7);
        assert!(report.passes(1e-6));
    }

    #[test]
    fn flags_disagreement_between_analytic_and_numeric() {
        // A build whose scale drifts between evaluations makes the numeric
        // estimate disagree with the recorded tape; the checker must fail.
        use std::cell::Cell;
        let x = Tensor::param(&[1, 2], vec![1.0, 2.0]).unwrap();
        let params = vec![("x".to_string(), x.clone())];
        let calls = Cell::new(0.0f64);
        let report = check_gradients(
            &params,
            |g| {
                calls.set(calls.get() + 1.0);
                let s = g.sum(&x)?;
                g.scale(&s, 1.0 + 0.5 * calls.get())
            },
            &CheckSettings::default(),
        )
        .unwrap();
        assert!(!report.passes(1e-6));
        assert!(report.worst.is_some());
    }
}
