use nalgebra::DVector;

use super::mcar::MIN_WEIGHT;
use super::proposal::{find_mode, Eval, NewtonMh};
use super::{cell_names, gamma, normal, run_chains, PosteriorDraws, Recorder, RunConfig};
use crate::models::{Likelihood, Model, Observations, Precision, SanovaSpec, SmoothingPrecisions};
use crate::{Error, Result};

/// Dispatches on the likelihood of `spec`.
pub fn fit_sanova(spec: &SanovaSpec, data: &Observations, cfg: &RunConfig) -> Result<PosteriorDraws> {
    match spec.likelihood {
        Likelihood::Normal => gibbs_sanova_normal(spec, data, cfg),
        Likelihood::Poisson => mh_sanova_poisson(spec, data, cfg),
    }
}

struct Layout {
    names: Vec<String>,
    eta0: Option<usize>,
    mu: usize,
}

fn layout(spec: &SanovaSpec) -> Layout {
    let l = spec.design.layout();
    let nc = spec.n_cells();
    let mut names: Vec<String> = (0..nc).map(|k| format!("theta[{k}]")).collect();
    names.extend((0..spec.n_smoothing()).map(|b| format!("tau[{b}]")));
    let eta0 = (spec.likelihood == Likelihood::Normal).then(|| {
        names.push("eta0".into());
        names.len() - 1
    });
    let mu = names.len();
    names.extend(cell_names("mu", l.n_regions, l.n_groups));
    Layout { names, eta0, mu }
}

fn check_tau(spec: &SanovaSpec) -> Result<()> {
    if let SmoothingPrecisions::Fixed(t) = &spec.tau {
        if t.len() != spec.n_smoothing() || t.iter().any(|&x| !(x > 0.0)) {
            return Err(Error::Config(format!("need {} positive fixed smoothing precisions", spec.n_smoothing())));
        }
    }
    Ok(())
}

fn initial_tau(spec: &SanovaSpec, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
    match &spec.tau {
        SmoothingPrecisions::Gamma(_) => (0..spec.n_smoothing()).map(|_| normal(rng).exp()).collect(),
        SmoothingPrecisions::Fixed(t) => t.clone(),
    }
}

/// Conjugate update of every smoothing precision given `Θ`.
fn update_tau(spec: &SanovaSpec, theta: &DVector<f64>, tau: &mut [f64], rng: &mut rand_chacha::ChaCha8Rng) -> Result<()> {
    if let SmoothingPrecisions::Gamma(g) = &spec.tau {
        let l = spec.design.layout();
        let dm = spec.design.car().d_minus();
        let half_rank = 0.5 * spec.design.car().rank() as f64;
        for (b, t) in tau.iter_mut().enumerate() {
            let ss: f64 = l.smoothed(b).enumerate().map(|(k, c)| dm[k] * theta[c] * theta[c]).sum();
            *t = gamma(rng, g.shape + half_rank, g.rate + 0.5 * ss)?;
        }
    }
    Ok(())
}

/// Gibbs sampler for normal-likelihood SANOVA, updating `Θ`, `τ`, `η₀` in turn.
pub fn gibbs_sanova_normal(spec: &SanovaSpec, data: &Observations, cfg: &RunConfig) -> Result<PosteriorDraws> {
    if spec.likelihood != Likelihood::Normal {
        return Err(Error::Config("gibbs_sanova_normal needs a normal-likelihood spec".into()));
    }
    spec.check_data(data)?;
    check_tau(spec)?;
    let Observations::Normal { y } = data else { unreachable!("checked above") };
    let x = spec.design.x();
    let z = x.transpose() * y;
    let nc = spec.n_cells();
    let m = spec.n_active();
    let lay = layout(spec);
    let n_names = lay.names.len();

    run_chains(cfg, lay.names.clone(), lay.mu..n_names, lay.eta0, |_, rng| {
        let mut tau = initial_tau(spec, rng);
        let mut eta0 = match spec.eta0 {
            Precision::Gamma(_) => normal(rng).exp(),
            Precision::Fixed(v) => v,
        };
        let mut theta = DVector::zeros(nc);
        let mut rec = Recorder::new(cfg, n_names);
        for it in 0..cfg.n_iter {
            let p = spec.prior_precision(&tau);
            for k in 0..m {
                let prec = eta0 + p[k];
                theta[k] = eta0 * z[k] / prec + normal(rng) / prec.sqrt();
            }
            update_tau(spec, &theta, &mut tau, rng)?;
            if let Precision::Gamma(g) = spec.eta0 {
                let rss = (&z - &theta).norm_squared();
                eta0 = gamma(rng, g.shape + 0.5 * nc as f64, g.rate + 0.5 * rss)?;
            }
            if cfg.keeps(it) {
                let mu = x * &theta;
                let ll = data.log_likelihood(&mu, Some(eta0))?;
                let row = rec.row();
                row.extend(theta.iter());
                row.extend(&tau);
                row.push(eta0);
                row.extend(mu.iter());
                rec.push(ll);
            }
        }
        Ok(rec.finish(None))
    })
}

/// Metropolis-within-Gibbs sampler for Poisson-likelihood SANOVA: `Θ` by a
/// Newton-type Metropolis–Hastings step, `τ` by conjugate draws.
pub fn mh_sanova_poisson(spec: &SanovaSpec, data: &Observations, cfg: &RunConfig) -> Result<PosteriorDraws> {
    if spec.likelihood != Likelihood::Poisson {
        return Err(Error::Config("mh_sanova_poisson needs a Poisson-likelihood spec".into()));
    }
    spec.check_data(data)?;
    check_tau(spec)?;
    let Observations::Poisson { counts, expected } = data else { unreachable!("checked above") };
    let nc = spec.n_cells();
    let m = spec.n_active();
    let xa = spec.design.x().columns(0, m).into_owned();
    let xat = xa.transpose();
    let log_e = expected.map(f64::ln);
    let start = DVector::from_fn(nc, |c, _| ((counts[c] + 0.5) / expected[c]).ln());
    let theta_start = &xat * &start;
    let lay = layout(spec);
    let n_names = lay.names.len();

    // X_a' diag(w) X_a + diag(p)
    let precision = |theta: &DVector<f64>, p: &DVector<f64>| {
        let eta = &xa * theta;
        let mut xw = xa.clone();
        for (i, mut row) in xw.row_iter_mut().enumerate() {
            row *= (log_e[i] + eta[i]).exp().max(MIN_WEIGHT).sqrt();
        }
        let mut a = xw.transpose() * xw;
        for k in 0..m {
            a[(k, k)] += p[k];
        }
        a
    };
    let target = |th: &DVector<f64>, p: &DVector<f64>| {
        let eta = &xa * th;
        let mut resid = DVector::zeros(nc);
        let mut lp = 0.0;
        for i in 0..nc {
            let mu = (log_e[i] + eta[i]).exp();
            lp += counts[i] * eta[i] - mu;
            resid[i] = counts[i] - mu;
        }
        lp -= 0.5 * th.iter().zip(p.iter()).map(|(t, q)| q * t * t).sum::<f64>();
        Eval { log_density: lp, gradient: &xat * resid - th.component_mul(p) }
    };

    run_chains(cfg, lay.names.clone(), lay.mu..n_names, None, |_, rng| {
        let mut theta = DVector::from_fn(m, |k, _| theta_start[k] + 0.1 * normal(rng));
        let mut tau = initial_tau(spec, rng);
        let mut full = DVector::zeros(nc);
        full.rows_mut(0, m).copy_from(&theta);
        update_tau(spec, &full, &mut tau, rng)?;
        let p0 = spec.prior_precision(&tau);
        find_mode(&mut theta, |t| precision(t, &p0), |t| target(t, &p0))?;
        let mut mh = NewtonMh::new();
        let mut rec = Recorder::new(cfg, n_names);
        for it in 0..cfg.n_iter {
            let burning = it < cfg.burn_in;
            let p = spec.prior_precision(&tau);
            mh.step(rng, &mut theta, |t| precision(t, &p), |t| target(t, &p), cfg.adapt && burning, !burning)?;
            full.rows_mut(0, m).copy_from(&theta);
            update_tau(spec, &full, &mut tau, rng)?;
            if cfg.keeps(it) {
                let eta = &xa * &theta;
                let ll = data.log_likelihood(&eta, None)?;
                let row = rec.row();
                row.extend(full.iter());
                row.extend(&tau);
                row.extend(eta.iter());
                rec.push(ll);
            }
        }
        Ok(rec.finish(mh.acceptance()))
    })
}
