use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;

use super::proposal::{find_mode, Eval, NewtonMh};
use super::{cell_names, gamma, normal, run_chains, sample_wishart, PosteriorDraws, Recorder, RunConfig};
use crate::graph::CarStructure;
use crate::linalg::{cholesky, kron, sorted_symmetric_eigen, symmetrize};
use crate::models::{GammaPrior, Likelihood, McarSpec, McarState, Model, Observations, OmegaPrior, Precision};
use crate::{Error, Result};

/// Floor on the proposal's Poisson weights `E·e^ψ`.
pub(crate) const MIN_WEIGHT: f64 = 1e-6;

/// Dispatches on the likelihood of `spec`.
pub fn fit_mcar(spec: &McarSpec, data: &Observations, cfg: &RunConfig) -> Result<PosteriorDraws> {
    match spec.likelihood {
        Likelihood::Normal => gibbs_mcar_normal(spec, data, cfg),
        Likelihood::Poisson => mh_mcar_poisson(spec, data, cfg),
    }
}

/// Intercept plus intrinsic CAR effects for a single outcome, with
/// `τ ~ Gamma(a, a)`; the likelihood follows `data`.
pub fn fit_univariate_car(car: Arc<CarStructure>, data: &Observations, a: f64, cfg: &RunConfig) -> Result<PosteriorDraws> {
    let spec = McarSpec::new(data.likelihood(), car, 1, OmegaPrior::Gamma(GammaPrior::new(a, a)?))?;
    fit_mcar(&spec, data, cfg)
}

struct Layout {
    names: Vec<String>,
    eta0: Option<usize>,
    mu: usize,
}

fn layout(spec: &McarSpec) -> Layout {
    let (nr, ng) = (spec.car.n_regions(), spec.n_groups);
    let mut names: Vec<String> = (0..ng).map(|j| format!("beta[{j}]")).collect();
    names.extend(cell_names("S", nr, ng));
    for a in 0..ng {
        for b in a..ng {
            names.push(format!("Omega[{a},{b}]"));
        }
    }
    let eta0 = (spec.likelihood == Likelihood::Normal).then(|| {
        names.push("eta0".into());
        names.len() - 1
    });
    let mu = names.len();
    names.extend(cell_names("mu", nr, ng));
    Layout { names, eta0, mu }
}

fn to_matrix(psi: &DVector<f64>, nr: usize, ng: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(nr, ng, psi.as_slice())
}

fn to_vector(m: &DMatrix<f64>) -> DVector<f64> {
    let (nr, ng) = m.shape();
    DVector::from_fn(nr * ng, |c, _| m[(c / ng, c % ng)])
}

/// Conjugate draw of `Ω` given the cell effects `ψ` (as an `N × n` matrix).
/// Centring does not change `S'QS` because `Q1 = 0`.
fn draw_omega(spec: &McarSpec, psi: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> Result<DMatrix<f64>> {
    let mut scatter = psi.transpose() * spec.car.q() * psi;
    symmetrize(&mut scatter);
    let rank = spec.car.rank() as f64;
    match &spec.omega_prior {
        OmegaPrior::Wishart { r, df } => {
            let post = r + scatter;
            let scale = cholesky(&post, "Wishart posterior inverse scale")?.inverse();
            sample_wishart(rng, df + rank, &scale)
        }
        OmegaPrior::Gamma(g) => Ok(DMatrix::from_element(1, 1, gamma(rng, g.shape + 0.5 * rank, g.rate + 0.5 * scatter[(0, 0)])?)),
    }
}

fn record(rec: &mut Recorder, state: &McarState, mu: &DVector<f64>, ll: f64) {
    let ng = state.beta.len();
    let row = rec.row();
    row.extend(state.beta.iter());
    for i in 0..state.s.nrows() {
        row.extend(state.s.row(i).iter());
    }
    for a in 0..ng {
        for b in a..ng {
            row.push(state.omega[(a, b)]);
        }
    }
    if let Some(e) = state.eta0 {
        row.push(e);
    }
    row.extend(mu.iter());
    rec.push(ll);
}

fn initial_omega(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::identity(n, n) * normal(rng).exp()
}

/// Gibbs sampler for the normal-likelihood MCAR model. The cell means
/// `ψ = 1β' + S` are drawn jointly from their Gaussian conditional, split
/// into column means `β` and column-centred `S`, then `Ω` and `η₀` follow.
pub fn gibbs_mcar_normal(spec: &McarSpec, data: &Observations, cfg: &RunConfig) -> Result<PosteriorDraws> {
    if spec.likelihood != Likelihood::Normal {
        return Err(Error::Config("gibbs_mcar_normal needs a normal-likelihood spec".into()));
    }
    spec.check_data(data)?;
    spec.omega_prior.validate(spec.n_groups)?;
    let Observations::Normal { y } = data else { unreachable!("checked above") };
    let (nr, ng) = (spec.car.n_regions(), spec.n_groups);
    let ym = to_matrix(y, nr, ng);
    let v = spec.car.v();
    let d = spec.car.d();
    let vty = v.transpose() * &ym;
    let nc = nr * ng;
    let lay = layout(spec);
    let n_names = lay.names.len();

    run_chains(cfg, lay.names.clone(), lay.mu..n_names, lay.eta0, |_, rng| {
        let mut omega = initial_omega(ng, rng);
        let mut eta0 = match spec.eta0 {
            Precision::Gamma(_) => normal(rng).exp(),
            Precision::Fixed(v) => v,
        };
        let mut rec = Recorder::new(cfg, n_names);
        for it in 0..cfg.n_iter {
            let (e, u) = sorted_symmetric_eigen(&omega);
            let t = &vty * &u;
            let c = DMatrix::from_fn(nr, ng, |k, l| {
                let prec = d[k] * e[l].max(0.0) + eta0;
                (eta0 * t[(k, l)]) / prec + normal(rng) / prec.sqrt()
            });
            let psi = v * c * u.transpose();
            omega = draw_omega(spec, &psi, rng)?;
            if let Precision::Gamma(g) = spec.eta0 {
                let rss = (&ym - &psi).norm_squared();
                eta0 = gamma(rng, g.shape + 0.5 * nc as f64, g.rate + 0.5 * rss)?;
            }
            if cfg.keeps(it) {
                let mu = to_vector(&psi);
                let state = McarState::from_cells(&mu, nr, ng, omega.clone(), Some(eta0));
                let ll = data.log_likelihood(&mu, Some(eta0))?;
                record(&mut rec, &state, &mu, ll);
            }
        }
        Ok(rec.finish(None))
    })
}

/// Metropolis-within-Gibbs sampler for the Poisson MCAR model: the log
/// relative risks `ψ = 1β' + S` by a Newton-type
/// Metropolis–Hastings step, then `Ω`. The intercepts get the same
/// `N(0, 10⁶)` prior as the SANOVA fixed effects, which keeps the posterior
/// proper when a disease has no cases.
pub fn mh_mcar_poisson(spec: &McarSpec, data: &Observations, cfg: &RunConfig) -> Result<PosteriorDraws> {
    if spec.likelihood != Likelihood::Poisson {
        return Err(Error::Config("mh_mcar_poisson needs a Poisson-likelihood spec".into()));
    }
    spec.check_data(data)?;
    spec.omega_prior.validate(spec.n_groups)?;
    let Observations::Poisson { counts, expected } = data else { unreachable!("checked above") };
    let (nr, ng) = (spec.car.n_regions(), spec.n_groups);
    let nc = nr * ng;
    let log_e = expected.map(f64::ln);
    let lay = layout(spec);
    let n_names = lay.names.len();
    let weights = |psi: &DVector<f64>| DVector::from_fn(nc, |i, _| (log_e[i] + psi[i]).exp().max(MIN_WEIGHT));
    // β_j ~ N(0, 10⁶) with β_j = (1/N)Σ_i ψ_ij: precision (10⁻⁶/N²)·11' ⊗ I.
    let intercept = kron(&DMatrix::from_element(nr, nr, spec.intercept_prior().precision() / (nr * nr) as f64), &DMatrix::identity(ng, ng));

    let precision = |x: &DVector<f64>, k: &DMatrix<f64>| {
        let mut a = k.clone();
        for (i, w) in weights(x).iter().enumerate() {
            a[(i, i)] += w;
        }
        a
    };
    let target = |x: &DVector<f64>, k: &DMatrix<f64>| {
        let kx = k * x;
        let mut grad = -&kx;
        let mut lp = -0.5 * x.dot(&kx);
        for i in 0..nc {
            let mu = (log_e[i] + x[i]).exp();
            lp += counts[i] * x[i] - mu;
            grad[i] += counts[i] - mu;
        }
        Eval { log_density: lp, gradient: grad }
    };

    run_chains(cfg, lay.names.clone(), lay.mu..n_names, None, |_, rng| {
        let mut psi = DVector::from_fn(nc, |i, _| ((counts[i] + 0.5) / expected[i]).ln() + 0.1 * normal(rng));
        let mut omega = draw_omega(spec, &to_matrix(&psi, nr, ng), rng)?;
        let k0 = kron(spec.car.q(), &omega) + &intercept;
        find_mode(&mut psi, |x| precision(x, &k0), |x| target(x, &k0))?;
        let mut mh = NewtonMh::new();
        let mut rec = Recorder::new(cfg, n_names);
        for it in 0..cfg.n_iter {
            let burning = it < cfg.burn_in;
            let k = kron(spec.car.q(), &omega) + &intercept;
            mh.step(rng, &mut psi, |x| precision(x, &k), |x| target(x, &k), cfg.adapt && burning, !burning)?;
            omega = draw_omega(spec, &to_matrix(&psi, nr, ng), rng)?;
            if cfg.keeps(it) {
                let state = McarState::from_cells(&psi, nr, ng, omega.clone(), None);
                let ll = data.log_likelihood(&psi, None)?;
                record(&mut rec, &state, &psi, ll);
            }
        }
        Ok(rec.finish(mh.acceptance()))
    })
}
