//! Metropolis–Hastings step with a position-dependent Gaussian proposal.
//!
//! With `A(x)` an SPD approximation to the negative Hessian of the log
//! target at `x` (expected information plus prior precision), the proposal
//! from `x` is `N(x + c A(x)⁻¹∇log π(x), s²A(x)⁻¹)` with
//! `c = 1 − √(1 − s²)`. For a Gaussian target with precision `A` this leaves
//! the target invariant for every `s ≤ 1` (a Crank–Nicolson move about the
//! mode), so acceptance rises as the target gets closer to Gaussian; for
//! small `s` it reduces to preconditioned MALA. The acceptance ratio uses
//! `A` at both ends, so the chain is exact for any `s`. During burn-in
//! `log s` follows a Robbins–Monro recursion toward acceptance 0.6, capped at
//! `s = 1`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::normal;
use crate::linalg::cholesky;
use crate::Result;

const TARGET_ACCEPTANCE: f64 = 0.6;
const MIN_LOG_STEP: f64 = -7.0;
/// Iterations over which the adaptation gain stays near 1.
const ADAPT_SCALE: f64 = 20.0;
/// Damped Newton iterations used to locate a starting mode.
const MODE_ITERS: usize = 50;

pub(crate) struct Eval {
    pub log_density: f64,
    pub gradient: DVector<f64>,
}

/// Target evaluation plus the factorised proposal precision at one point.
struct Point {
    eval: Eval,
    chol: Cholesky<f64, Dyn>,
    l: DMatrix<f64>,
    half_log_det: f64,
}

impl Point {
    fn new(eval: Eval, a: &DMatrix<f64>) -> Result<Self> {
        let chol = cholesky(a, "proposal precision")?;
        let l = chol.l();
        let half_log_det = l.diagonal().iter().map(|d| d.ln()).sum();
        Ok(Self { eval, chol, l, half_log_det })
    }

    fn mean(&self, x: &DVector<f64>, c: f64) -> DVector<f64> {
        x + self.chol.solve(&self.eval.gradient) * c
    }

    /// `log q(to | from = self)` up to a constant shared by both directions.
    fn log_q(&self, from: &DVector<f64>, to: &DVector<f64>, c: f64, s2: f64) -> f64 {
        let r = to - self.mean(from, c);
        let lr = self.l.tr_mul(&r);
        self.half_log_det - 0.5 / s2 * lr.norm_squared()
    }
}

/// Moves `x` to (near) the mode of `target` by damped Newton steps
/// `x + A(x)⁻¹∇`, halving a step until the log density does not decrease.
pub(crate) fn find_mode<F, P>(x: &mut DVector<f64>, precision: P, target: F) -> Result<()>
where
    F: Fn(&DVector<f64>) -> Eval,
    P: Fn(&DVector<f64>) -> DMatrix<f64>,
{
    let mut cur = target(x);
    for _ in 0..MODE_ITERS {
        let dir = cholesky(&precision(x), "proposal precision")?.solve(&cur.gradient);
        let mut t = 1.0;
        let mut moved = false;
        while t > 1e-6 {
            let cand = &*x + &dir * t;
            let ev = target(&cand);
            if ev.log_density.is_finite() && ev.log_density >= cur.log_density {
                let gain = ev.log_density - cur.log_density;
                *x = cand;
                cur = ev;
                moved = gain > 1e-10 * (1.0 + cur.log_density.abs());
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    Ok(())
}

pub(crate) struct NewtonMh {
    log_step: f64,
    adapt_iter: usize,
    accepted: usize,
    proposed: usize,
}

impl NewtonMh {
    pub fn new() -> Self {
        Self { log_step: 0.0, adapt_iter: 0, accepted: 0, proposed: 0 }
    }

    /// Acceptance rate over steps taken with `record = true`.
    pub fn acceptance(&self) -> Option<f64> {
        (self.proposed > 0).then(|| self.accepted as f64 / self.proposed as f64)
    }

    /// One Metropolis–Hastings update of `x`; returns whether it moved.
    /// `precision(x)` gives `A(x)`.
    pub fn step<F, P>(&mut self, rng: &mut ChaCha8Rng, x: &mut DVector<f64>, precision: P, target: F, adapt: bool, record: bool) -> Result<bool>
    where
        F: Fn(&DVector<f64>) -> Eval,
        P: Fn(&DVector<f64>) -> DMatrix<f64>,
    {
        let s = self.log_step.exp();
        let s2 = s * s;
        let c = 1.0 - (1.0 - s2).max(0.0).sqrt();
        let here = Point::new(target(x), &precision(x))?;
        let xi = DVector::from_fn(x.len(), |_, _| normal(rng));
        let noise = here.l.tr_solve_lower_triangular(&xi).expect("triangular factor is nonsingular");
        let prop = here.mean(x, c) + noise * s;
        let eval = target(&prop);
        let log_alpha = if eval.log_density.is_finite() && eval.gradient.iter().all(|g| g.is_finite()) {
            let there = Point::new(eval, &precision(&prop))?;
            there.eval.log_density - here.eval.log_density + there.log_q(&prop, x, c, s2) - here.log_q(x, &prop, c, s2)
        } else {
            f64::NEG_INFINITY
        };
        let u: f64 = rng.random();
        let accept = u.ln() < log_alpha;
        if accept {
            *x = prop;
        }
        if adapt {
            self.adapt_iter += 1;
            let alpha = log_alpha.min(0.0).exp();
            let gain = (1.0 + self.adapt_iter as f64 / ADAPT_SCALE).powf(-0.6);
            self.log_step = (self.log_step + gain * (alpha - TARGET_ACCEPTANCE)).clamp(MIN_LOG_STEP, 0.0);
        }
        if record {
            self.proposed += 1;
            self.accepted += usize::from(accept);
        }
        Ok(accept)
    }
}
