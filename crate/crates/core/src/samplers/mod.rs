//! MCMC engines, posterior draw storage and convergence diagnostics.
//!
//! Every chain owns a ChaCha8 stream: the master seed picks the key and the
//! chain index picks the stream, so results do not depend on scheduling.
//!
//! Samplers:
//! * normal SANOVA: exact Gibbs in the order `Θ, τ, η₀`. Because `X_D` is
//!   square and orthonormal, `Θ | τ, η₀, y` has diagonal precision
//!   `η₀ + λ_k` with mean `η₀ z_k / (η₀ + λ_k)`, `z = X_D'y`.
//! * Poisson SANOVA: Metropolis–Hastings on `Θ` with a Newton-type
//!   proposal (see `proposal`), then conjugate Gamma draws of `τ`.
//! * normal MCAR: `ψ = 1β' + S` is drawn jointly through the eigenbasis of
//!   `Q ⊗ Ω + η₀I = (V⊗U)(D⊗E + η₀I)(V⊗U)'`, then split into column means
//!   `β` and centred `S`; then `Ω` (Wishart) and `η₀` (Gamma).
//! * Poisson MCAR: the same Newton-type Metropolis–Hastings step
//!   on `ψ`, then `Ω`.

mod mcar;
mod proposal;
mod sanova;

use std::io::Write;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::linalg::cholesky;
use crate::metrics::{dic, quantile_sorted, Dic};
use crate::models::Observations;
use crate::{Error, Result};

pub use mcar::{fit_mcar, fit_univariate_car, gibbs_mcar_normal, mh_mcar_poisson};
pub use sanova::{fit_sanova, gibbs_sanova_normal, mh_sanova_poisson};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub n_chains: usize,
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    /// Adapt the Metropolis step size and linearisation point during
    /// burn-in (Poisson samplers only).
    pub adapt: bool,
}

impl RunConfig {
    /// 3 chains × 10000 iterations, first 2000 discarded.
    pub fn full(seed: u64) -> Self {
        Self { n_chains: 3, n_iter: 10_000, burn_in: 2_000, thin: 1, seed, adapt: true }
    }

    /// 3 chains × 4000 iterations, first 1000 discarded.
    pub fn reduced(seed: u64) -> Self {
        Self { n_chains: 3, n_iter: 4_000, burn_in: 1_000, thin: 1, seed, adapt: true }
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "full" => Ok(Self::full(seed)),
            "reduced" => Ok(Self::reduced(seed)),
            other => Err(Error::Config(format!("unknown run preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_chains == 0 {
            return Err(Error::Config("need at least one chain".into()));
        }
        if self.burn_in >= self.n_iter {
            return Err(Error::Config(format!("burn-in {} must be below the iteration count {}", self.burn_in, self.n_iter)));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be at least 1".into()));
        }
        Ok(())
    }

    pub fn kept_per_chain(&self) -> usize {
        (self.n_iter - self.burn_in).div_ceil(self.thin)
    }

    fn keeps(&self, iter: usize) -> bool {
        iter >= self.burn_in && (iter - self.burn_in).is_multiple_of(self.thin)
    }
}

/// RNG for chain `chain` of a run seeded with `seed`.
pub fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

/// Kept draws of a single chain, stored row-major (draw × parameter).
#[derive(Debug, Clone, PartialEq)]
pub struct ChainDraws {
    pub values: Vec<f64>,
    pub loglik: Vec<f64>,
    /// Post-burn-in Metropolis acceptance rate, if the sampler has one.
    pub acceptance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    names: Vec<String>,
    chains: Vec<ChainDraws>,
    /// Columns holding the cell-level linear predictor.
    predictor: Range<usize>,
    /// Column holding the error precision `η₀`, if any.
    error_precision: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub median: f64,
    pub q975: f64,
    pub rhat: f64,
}

impl PosteriorDraws {
    pub fn new(names: Vec<String>, chains: Vec<ChainDraws>, predictor: Range<usize>, error_precision: Option<usize>) -> Result<Self> {
        let p = names.len();
        let kept = chains.first().map_or(0, |c| c.loglik.len());
        for c in &chains {
            if c.values.len() != p * kept || c.loglik.len() != kept {
                return Err(Error::Dimension("chains have inconsistent draw counts".into()));
            }
            if c.values.iter().chain(&c.loglik).any(|v| !v.is_finite()) {
                return Err(Error::Sampler("non-finite value in posterior draws".into()));
            }
        }
        if predictor.end > p || error_precision.is_some_and(|e| e >= p) {
            return Err(Error::Dimension("parameter ranges exceed the name list".into()));
        }
        Ok(Self { names, chains, predictor, error_precision })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_params(&self) -> usize {
        self.names.len()
    }

    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn kept_per_chain(&self) -> usize {
        self.chains.first().map_or(0, |c| c.loglik.len())
    }

    pub fn chains(&self) -> &[ChainDraws] {
        &self.chains
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn predictor_range(&self) -> Range<usize> {
        self.predictor.clone()
    }

    pub fn chain_column(&self, chain: usize, param: usize) -> Vec<f64> {
        let p = self.n_params();
        self.chains[chain].values.iter().skip(param).step_by(p).copied().collect()
    }

    /// Draws of one parameter pooled over chains.
    pub fn column(&self, param: usize) -> Vec<f64> {
        (0..self.n_chains()).flat_map(|c| self.chain_column(c, param)).collect()
    }

    pub fn mean(&self, param: usize) -> f64 {
        let v = self.column(param);
        v.iter().sum::<f64>() / v.len() as f64
    }

    /// Quantiles of one parameter's pooled draws.
    pub fn quantiles(&self, param: usize, levels: &[f64]) -> Result<Vec<f64>> {
        let mut v = self.column(param);
        v.sort_by(f64::total_cmp);
        levels.iter().map(|&p| quantile_sorted(&v, p)).collect()
    }

    pub fn loglik(&self) -> Vec<f64> {
        self.chains.iter().flat_map(|c| c.loglik.iter().copied()).collect()
    }

    pub fn acceptance(&self) -> Option<f64> {
        let rates: Vec<f64> = self.chains.iter().filter_map(|c| c.acceptance).collect();
        (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64)
    }

    /// Posterior median and 95% equal-tailed interval of each cell's linear
    /// predictor.
    pub fn predictor_summary(&self) -> Result<(Vec<f64>, Vec<(f64, f64)>)> {
        let mut med = Vec::with_capacity(self.predictor.len());
        let mut iv = Vec::with_capacity(self.predictor.len());
        for p in self.predictor.clone() {
            let q = self.quantiles(p, &[0.025, 0.5, 0.975])?;
            med.push(q[1]);
            iv.push((q[0], q[2]));
        }
        Ok((med, iv))
    }

    pub fn predictor_means(&self) -> Vec<f64> {
        self.predictor.clone().map(|p| self.mean(p)).collect()
    }

    pub fn error_precision_mean(&self) -> Option<f64> {
        self.error_precision.map(|e| self.mean(e))
    }

    /// DIC with the likelihood evaluated at the posterior mean of the linear
    /// predictor (and of `η₀` for normal data).
    pub fn dic(&self, data: &Observations) -> Result<Dic> {
        let mean = DVector::from_vec(self.predictor_means());
        let at_mean = data.log_likelihood(&mean, self.error_precision_mean())?;
        dic(&self.loglik(), at_mean)
    }

    pub fn summaries(&self) -> Result<Vec<ParamSummary>> {
        let rhat = if self.n_chains() >= 2 && self.kept_per_chain() >= 10 { Some(gelman_rubin(self)?) } else { None };
        (0..self.n_params())
            .map(|p| {
                let v = self.column(p);
                let n = v.len() as f64;
                let mean = v.iter().sum::<f64>() / n;
                let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
                let q = self.quantiles(p, &[0.025, 0.5, 0.975])?;
                Ok(ParamSummary {
                    name: self.names[p].clone(),
                    mean,
                    sd,
                    q025: q[0],
                    median: q[1],
                    q975: q[2],
                    rhat: rhat.as_ref().map_or(f64::NAN, |r| r[p]),
                })
            })
            .collect()
    }

    /// Columnar text: `chain,iter,<names…>,loglik`, one row per kept draw.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["chain", "iter"].into_iter().chain(self.names.iter().map(String::as_str)).chain(["loglik"]))?;
        let p = self.n_params();
        for (c, chain) in self.chains.iter().enumerate() {
            for (t, row) in chain.values.chunks(p).enumerate() {
                let fields = [c.to_string(), t.to_string()]
                    .into_iter()
                    .chain(row.iter().map(|v| format!("{v:e}")))
                    .chain([format!("{:e}", chain.loglik[t])]);
                out.write_record(fields)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Classic (non-split) Gelman–Rubin potential scale reduction factor per
/// parameter: `R = √(V̂/W)` with `V̂ = (n−1)/n·W + B/n`. A parameter with zero
/// within-chain variance reports 1, and values are floored at 1.
pub fn gelman_rubin(draws: &PosteriorDraws) -> Result<Vec<f64>> {
    let m = draws.n_chains();
    let n = draws.kept_per_chain();
    if m < 2 || n < 10 {
        return Err(Error::InvalidData(format!("R-hat needs ≥ 2 chains and ≥ 10 draws, got {m} × {n}")));
    }
    let nf = n as f64;
    Ok((0..draws.n_params())
        .map(|p| {
            let mut means = Vec::with_capacity(m);
            let mut w = 0.0;
            for c in 0..m {
                let x = draws.chain_column(c, p);
                let mu = x.iter().sum::<f64>() / nf;
                w += x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (nf - 1.0);
                means.push(mu);
            }
            w /= m as f64;
            if w <= 0.0 {
                return 1.0;
            }
            let grand = means.iter().sum::<f64>() / m as f64;
            let b = nf * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>() / (m as f64 - 1.0);
            let v = (nf - 1.0) / nf * w + b / nf;
            (v / w).sqrt().max(1.0)
        })
        .collect())
}

/// Runs `cfg.n_chains` chains (in parallel) and assembles their draws.
pub(crate) fn run_chains<F>(cfg: &RunConfig, names: Vec<String>, predictor: Range<usize>, error_precision: Option<usize>, chain: F) -> Result<PosteriorDraws>
where
    F: Fn(usize, &mut ChaCha8Rng) -> Result<ChainDraws> + Sync,
{
    cfg.validate()?;
    let chains = (0..cfg.n_chains)
        .into_par_iter()
        .map(|c| chain(c, &mut chain_rng(cfg.seed, c)))
        .collect::<Result<Vec<_>>>()?;
    PosteriorDraws::new(names, chains, predictor, error_precision)
}

/// Collects kept draws during a chain.
pub(crate) struct Recorder {
    values: Vec<f64>,
    loglik: Vec<f64>,
    row: Vec<f64>,
}

impl Recorder {
    pub fn new(cfg: &RunConfig, n_params: usize) -> Self {
        let kept = cfg.kept_per_chain();
        Self { values: Vec::with_capacity(kept * n_params), loglik: Vec::with_capacity(kept), row: Vec::with_capacity(n_params) }
    }

    /// Scratch row to be filled and then passed to `push`.
    pub fn row(&mut self) -> &mut Vec<f64> {
        self.row.clear();
        &mut self.row
    }

    pub fn push(&mut self, loglik: f64) {
        self.values.extend_from_slice(&self.row);
        self.loglik.push(loglik);
    }

    pub fn finish(self, acceptance: Option<f64>) -> ChainDraws {
        ChainDraws { values: self.values, loglik: self.loglik, acceptance }
    }
}

pub(crate) fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Gamma draw in shape–rate form.
pub(crate) fn gamma(rng: &mut ChaCha8Rng, shape: f64, rate: f64) -> Result<f64> {
    let g = Gamma::new(shape, 1.0 / rate).map_err(|e| Error::Sampler(format!("Gamma({shape}, {rate}): {e}")))?;
    let x: f64 = g.sample(rng);
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(Error::Sampler(format!("Gamma({shape}, {rate}) produced {x}")))
    }
}

/// Wishart draw with `df` degrees of freedom and scale `Σ` (mean `df·Σ`),
/// by the Bartlett decomposition.
pub fn sample_wishart(rng: &mut ChaCha8Rng, df: f64, scale: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = scale.nrows();
    if df <= n as f64 - 1.0 {
        return Err(Error::Sampler(format!("Wishart degrees of freedom {df} too small for dimension {n}")));
    }
    let l = cholesky(scale, "Wishart scale")?.l();
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        let chi = ChiSquared::new(df - i as f64).map_err(|e| Error::Sampler(e.to_string()))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = normal(rng);
        }
    }
    let la = l * a;
    let mut w = &la * la.transpose();
    crate::linalg::symmetrize(&mut w);
    Ok(w)
}

/// Names `prefix[i,j]` for every cell, region-major.
pub(crate) fn cell_names(prefix: &str, n_regions: usize, n_groups: usize) -> impl Iterator<Item = String> + '_ {
    (0..n_regions * n_groups).map(move |c| format!("{prefix}[{},{}]", c / n_groups, c % n_groups))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn draws_from(chains: Vec<Vec<f64>>) -> PosteriorDraws {
        let chains = chains
            .into_iter()
            .map(|v| ChainDraws { loglik: vec![0.0; v.len()], values: v, acceptance: None })
            .collect();
        PosteriorDraws::new(vec!["x".into()], chains, 0..1, None).unwrap()
    }

    #[test]
    fn rhat_identical_chains_is_one() {
        let mut rng = chain_rng(1, 0);
        let x: Vec<f64> = (0..200).map(|_| normal(&mut rng)).collect();
        assert_eq!(gelman_rubin(&draws_from(vec![x.clone(), x])).unwrap()[0], 1.0);
    }

    #[test]
    fn rhat_offset_chains_is_large() {
        let mut rng = chain_rng(2, 0);
        let x: Vec<f64> = (0..200).map(|_| normal(&mut rng)).collect();
        let y: Vec<f64> = x.iter().map(|v| v + 100.0).collect();
        assert!(gelman_rubin(&draws_from(vec![x, y])).unwrap()[0] > 5.0);
    }

    #[test]
    fn rhat_constant_and_too_short() {
        assert_eq!(gelman_rubin(&draws_from(vec![vec![3.0; 20], vec![3.0; 20]])).unwrap()[0], 1.0);
        assert!(gelman_rubin(&draws_from(vec![vec![0.0; 5], vec![1.0; 5]])).is_err());
        assert!(gelman_rubin(&draws_from(vec![vec![0.0; 50]])).is_err());
    }

    #[test]
    fn chain_streams_differ_and_repeat() {
        use rand::Rng;
        let a: u64 = chain_rng(9, 0).random();
        let b: u64 = chain_rng(9, 1).random();
        let c: u64 = chain_rng(9, 0).random();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn run_config_validation() {
        assert!(RunConfig { burn_in: 10, n_iter: 10, ..RunConfig::reduced(1) }.validate().is_err());
        assert!(RunConfig { thin: 0, ..RunConfig::reduced(1) }.validate().is_err());
        assert_eq!(RunConfig::full(1).kept_per_chain(), 8000);
        assert_eq!(RunConfig { thin: 3, ..RunConfig::reduced(1) }.kept_per_chain(), 1000);
    }

    #[test]
    fn wishart_moments_match_outer_product_sampler() {
        // Integer df: Σ_k x_k x_k' with x_k ~ N(0, Σ) is Wishart(df, Σ).
        let scale = DMatrix::from_row_slice(3, 3, &[1.0, 0.3, -0.2, 0.3, 0.5, 0.1, -0.2, 0.1, 2.0]);
        let df = 5.0;
        let l = cholesky(&scale, "scale").unwrap().l();
        let reps = 20_000;
        let mut rng = chain_rng(3, 0);
        let mut sum_b = DMatrix::zeros(3, 3);
        let mut sq_b = DMatrix::zeros(3, 3);
        let mut sum_o = DMatrix::zeros(3, 3);
        let mut sq_o = DMatrix::zeros(3, 3);
        for _ in 0..reps {
            let w = sample_wishart(&mut rng, df, &scale).unwrap();
            let mut o = DMatrix::zeros(3, 3);
            for _ in 0..5 {
                let z = nalgebra::DVector::from_fn(3, |_, _| normal(&mut rng));
                let x = &l * z;
                o += &x * x.transpose();
            }
            sum_b += &w;
            sq_b += w.component_mul(&w);
            sum_o += &o;
            sq_o += o.component_mul(&o);
        }
        let r = reps as f64;
        for i in 0..3 {
            for j in 0..3 {
                let (mb, mo) = (sum_b[(i, j)] / r, sum_o[(i, j)] / r);
                let vb = sq_b[(i, j)] / r - mb * mb;
                let vo = sq_o[(i, j)] / r - mo * mo;
                let se = ((vb + vo) / r).sqrt();
                assert!((mb - mo).abs() < 3.0 * se + 1e-12, "({i},{j}) {mb} vs {mo}");
                assert!((mb - df * scale[(i, j)]).abs() < 4.0 * (vb / r).sqrt() + 1e-12);
            }
        }
    }

    #[test]
    fn csv_has_chain_column() {
        let d = draws_from(vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().next().unwrap(), "chain,iter,x,loglik");
        assert_eq!(s.lines().count(), 5);
    }
}
