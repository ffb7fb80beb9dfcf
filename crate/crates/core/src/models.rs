//! Model specifications for SANOVA, separable MCAR and univariate CAR, with
//! their log-likelihoods and log-priors.
//!
//! Gamma priors are shape–rate: `Gamma(0.1, 0.1)` has mean 1 and variance 10.
//! Flat priors contribute nothing to `log_prior`; improper CAR and MCAR
//! components contribute their kernels. The likelihoods keep every
//! data-dependent constant so that deviances are comparable across models.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

use crate::design::SanovaDesign;
use crate::graph::CarStructure;
use crate::linalg::{cholesky, log_det_spd};
use crate::{Error, Result};

/// Largest tolerated `|Σ_i S_ij|` for a centred MCAR state.
pub const CENTERING_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Likelihood {
    Normal,
    Poisson,
}

impl std::str::FromStr for Likelihood {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "normal" | "gaussian" => Ok(Self::Normal),
            "poisson" => Ok(Self::Poisson),
            other => Err(Error::Config(format!("unknown likelihood `{other}`"))),
        }
    }
}

/// Shape–rate Gamma distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

impl GammaPrior {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        if !(shape > 0.0 && rate > 0.0 && shape.is_finite() && rate.is_finite()) {
            return Err(Error::Config(format!("Gamma({shape}, {rate}) needs positive finite parameters")));
        }
        Ok(Self { shape, rate })
    }

    /// Mean 1, variance 10.
    pub fn vague() -> Self {
        Self { shape: 0.1, rate: 0.1 }
    }

    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }

    pub fn variance(&self) -> f64 {
        self.shape / (self.rate * self.rate)
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return f64::NEG_INFINITY;
        }
        self.shape * self.rate.ln() - ln_gamma(self.shape) + (self.shape - 1.0) * x.ln() - self.rate * x
    }
}

/// A precision that is either fixed or given a Gamma prior.
#[derive(Debug, Clone, PartialEq)]
pub enum Precision {
    Gamma(GammaPrior),
    Fixed(f64),
}

/// Prior on the SANOVA smoothing precisions: a common Gamma prior for every
/// block, or fixed values (one per smoothed block).
#[derive(Debug, Clone, PartialEq)]
pub enum SmoothingPrecisions {
    Gamma(GammaPrior),
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FixedEffectPrior {
    Flat,
    Normal { variance: f64 },
}

impl FixedEffectPrior {
    pub fn precision(&self) -> f64 {
        match self {
            Self::Flat => 0.0,
            Self::Normal { variance } => 1.0 / variance,
        }
    }
}

/// Which SANOVA effect blocks are present.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SanovaTerms {
    /// Grand mean, group main effect, region main effect and interactions.
    Full,
    /// Interactions removed (fixed at zero).
    MainEffects,
}

/// Observed data over `N × n` cells, region-major.
#[derive(Debug, Clone, PartialEq)]
pub enum Observations {
    Normal { y: DVector<f64> },
    Poisson { counts: DVector<f64>, expected: DVector<f64> },
}

impl Observations {
    pub fn normal(y: Vec<f64>) -> Result<Self> {
        if let Some(v) = y.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!("non-finite observation {v}")));
        }
        Ok(Self::Normal { y: DVector::from_vec(y) })
    }

    pub fn poisson(counts: Vec<f64>, expected: Vec<f64>) -> Result<Self> {
        if counts.len() != expected.len() {
            return Err(Error::Dimension(format!("{} counts but {} offsets", counts.len(), expected.len())));
        }
        if let Some(c) = counts.iter().find(|c| !(c.is_finite() && **c >= 0.0 && c.fract() == 0.0)) {
            return Err(Error::InvalidData(format!("count {c} is not a non-negative integer")));
        }
        if let Some(e) = expected.iter().find(|e| !(e.is_finite() && **e > 0.0)) {
            return Err(Error::InvalidData(format!("expected count {e} is not positive")));
        }
        Ok(Self::Poisson { counts: DVector::from_vec(counts), expected: DVector::from_vec(expected) })
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Normal { y } => y.len(),
            Self::Poisson { counts, .. } => counts.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn likelihood(&self) -> Likelihood {
        match self {
            Self::Normal { .. } => Likelihood::Normal,
            Self::Poisson { .. } => Likelihood::Poisson,
        }
    }

    /// Log-likelihood at cell-level linear predictor `eta` (the mean for
    /// normal data, the log relative risk for Poisson data).
    pub fn log_likelihood(&self, eta: &DVector<f64>, eta0: Option<f64>) -> Result<f64> {
        if eta.len() != self.len() {
            return Err(Error::Dimension(format!("{} predictors for {} cells", eta.len(), self.len())));
        }
        match self {
            Self::Normal { y } => {
                let prec = eta0.ok_or_else(|| Error::InvalidState("normal likelihood needs η₀".into()))?;
                if !(prec > 0.0) {
                    return Err(Error::InvalidState(format!("error precision {prec} is not positive")));
                }
                let rss = (y - eta).norm_squared();
                let n = y.len() as f64;
                Ok(0.5 * n * (prec.ln() - (2.0 * PI).ln()) - 0.5 * prec * rss)
            }
            Self::Poisson { counts, expected } => Ok(counts
                .iter()
                .zip(expected.iter())
                .zip(eta.iter())
                .map(|((&y, &e), &h)| {
                    let log_mu = e.ln() + h;
                    let term = if y > 0.0 { y * log_mu } else { 0.0 };
                    term - log_mu.exp() - ln_gamma(y + 1.0)
                })
                .sum()),
        }
    }
}

/// Common interface of the model specifications.
pub trait Model {
    type State;

    fn likelihood(&self) -> Likelihood;

    /// Cell-level linear predictor of a state.
    fn linear_predictor(&self, state: &Self::State) -> DVector<f64>;

    fn error_precision(&self, state: &Self::State) -> Option<f64>;

    fn log_prior(&self, state: &Self::State) -> Result<f64>;

    fn n_cells(&self) -> usize;

    fn check_data(&self, data: &Observations) -> Result<()> {
        if data.likelihood() != self.likelihood() {
            return Err(Error::InvalidData(format!(
                "model expects {:?} data, got {:?}",
                self.likelihood(),
                data.likelihood()
            )));
        }
        if data.len() != self.n_cells() {
            return Err(Error::Dimension(format!("{} observations for {} cells", data.len(), self.n_cells())));
        }
        Ok(())
    }

    fn log_likelihood(&self, state: &Self::State, data: &Observations) -> Result<f64> {
        self.check_data(data)?;
        data.log_likelihood(&self.linear_predictor(state), self.error_precision(state))
    }
}

#[derive(Debug, Clone)]
pub struct SanovaSpec {
    pub likelihood: Likelihood,
    pub design: Arc<SanovaDesign>,
    pub terms: SanovaTerms,
    pub tau: SmoothingPrecisions,
    /// Error precision prior (normal likelihood only).
    pub eta0: Precision,
    pub fixed_effects: FixedEffectPrior,
}

impl SanovaSpec {
    /// Flat fixed effects, `Gamma(0.1, 0.1)` on every precision.
    pub fn normal(design: Arc<SanovaDesign>) -> Self {
        Self {
            likelihood: Likelihood::Normal,
            design,
            terms: SanovaTerms::Full,
            tau: SmoothingPrecisions::Gamma(GammaPrior::vague()),
            eta0: Precision::Gamma(GammaPrior::vague()),
            fixed_effects: FixedEffectPrior::Flat,
        }
    }

    /// `N(0, 10⁶)` fixed effects, `Gamma(0.1, 0.1)` smoothing precisions.
    pub fn poisson(design: Arc<SanovaDesign>) -> Self {
        Self {
            likelihood: Likelihood::Poisson,
            design,
            terms: SanovaTerms::Full,
            tau: SmoothingPrecisions::Gamma(GammaPrior::vague()),
            eta0: Precision::Fixed(1.0),
            fixed_effects: FixedEffectPrior::Normal { variance: 1e6 },
        }
    }

    pub fn with_terms(mut self, terms: SanovaTerms) -> Self {
        self.terms = terms;
        self
    }

    /// Number of smoothing precisions: one per smoothed block.
    pub fn n_smoothing(&self) -> usize {
        match self.terms {
            SanovaTerms::Full => self.design.layout().n_groups,
            SanovaTerms::MainEffects => 1,
        }
    }

    /// Number of leading design columns in use (`Nn` or `n + N − 1`).
    pub fn n_active(&self) -> usize {
        let l = self.design.layout();
        match self.terms {
            SanovaTerms::Full => l.total(),
            SanovaTerms::MainEffects => l.region_main().end,
        }
    }

    /// Diagonal prior precision over the active `Θ` entries.
    pub fn prior_precision(&self, tau: &[f64]) -> DVector<f64> {
        let l = self.design.layout();
        let dm = self.design.car().d_minus();
        let mut p = DVector::zeros(self.n_active());
        let fp = self.fixed_effects.precision();
        for k in l.fixed() {
            p[k] = fp;
        }
        for (b, &t) in tau.iter().enumerate().take(self.n_smoothing()) {
            for (k, col) in l.smoothed(b).enumerate() {
                p[col] = t * dm[k];
            }
        }
        p
    }
}

/// Parameters of one SANOVA chain.
#[derive(Debug, Clone, PartialEq)]
pub struct SanovaState {
    /// All `Nn` coefficients; inactive (removed) blocks stay zero.
    pub theta: DVector<f64>,
    pub tau: Vec<f64>,
    pub eta0: Option<f64>,
}

impl Model for SanovaSpec {
    type State = SanovaState;

    fn likelihood(&self) -> Likelihood {
        self.likelihood
    }

    fn linear_predictor(&self, state: &SanovaState) -> DVector<f64> {
        self.design.x() * &state.theta
    }

    fn error_precision(&self, state: &SanovaState) -> Option<f64> {
        state.eta0
    }

    fn n_cells(&self) -> usize {
        self.design.n_cells()
    }

    fn log_prior(&self, state: &SanovaState) -> Result<f64> {
        if state.theta.len() != self.n_cells() || state.tau.len() != self.n_smoothing() {
            return Err(Error::Dimension("state does not match the SANOVA layout".into()));
        }
        if let Some(t) = state.tau.iter().find(|&&t| !(t > 0.0)) {
            return Err(Error::InvalidState(format!("smoothing precision {t} is not positive")));
        }
        let l = self.design.layout();
        let car = self.design.car();
        let dm = car.d_minus();
        let mut lp = 0.0;
        if let FixedEffectPrior::Normal { variance } = self.fixed_effects {
            for k in l.fixed() {
                let th = state.theta[k];
                lp += -0.5 * (2.0 * PI * variance).ln() - 0.5 * th * th / variance;
            }
        }
        // Rank-deficient normal on each block: precision τ_b D⁻ with N−G
        // positive entries.
        let log_det_d: f64 = dm.iter().filter(|&&d| d > 0.0).map(|d| d.ln()).sum();
        let rank = car.rank() as f64;
        for (b, &t) in state.tau.iter().enumerate() {
            let quad: f64 = l.smoothed(b).enumerate().map(|(k, c)| dm[k] * state.theta[c].powi(2)).sum();
            lp += 0.5 * rank * (t.ln() - (2.0 * PI).ln()) + 0.5 * log_det_d - 0.5 * t * quad;
            if let SmoothingPrecisions::Gamma(g) = &self.tau {
                lp += g.log_pdf(t);
            }
        }
        if self.terms == SanovaTerms::MainEffects && state.theta.rows_range(self.n_active()..).iter().any(|&x| x != 0.0) {
            return Err(Error::InvalidState("interaction coefficients must be zero".into()));
        }
        if self.likelihood == Likelihood::Normal {
            let e = state.eta0.ok_or_else(|| Error::InvalidState("normal model needs η₀".into()))?;
            if !(e > 0.0) {
                return Err(Error::InvalidState(format!("error precision {e} is not positive")));
            }
            if let Precision::Gamma(g) = &self.eta0 {
                lp += g.log_pdf(e);
            }
        }
        Ok(lp)
    }
}

/// Prior on the MCAR within-region precision `Ω`.
#[derive(Debug, Clone, PartialEq)]
pub enum OmegaPrior {
    /// `Ω ~ Wishart(R, ν)` with `E(Ω) = ν R⁻¹`.
    Wishart { r: DMatrix<f64>, df: f64 },
    /// `n = 1` only: `τ ~ Gamma(shape, rate)`.
    Gamma(GammaPrior),
}

impl OmegaPrior {
    /// `R = scale · I_n`, `ν = n`.
    pub fn wishart_preset(scale: f64, n: usize) -> Self {
        Self::Wishart { r: DMatrix::identity(n, n) * scale, df: n as f64 }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        match self {
            Self::Wishart { r, df } => {
                if r.shape() != (n, n) {
                    return Err(Error::Dimension(format!("R is {:?}, expected {n}x{n}", r.shape())));
                }
                if (r - r.transpose()).abs().max() > 1e-12 * r.abs().max().max(1.0) {
                    return Err(Error::NotPositiveDefinite("Wishart R is not symmetric".into()));
                }
                cholesky(r, "Wishart R")?;
                if *df < n as f64 {
                    return Err(Error::Config(format!("Wishart degrees of freedom {df} < n = {n}")));
                }
                Ok(())
            }
            Self::Gamma(_) if n != 1 => Err(Error::Config("a Gamma precision prior needs n = 1".into())),
            Self::Gamma(_) => Ok(()),
        }
    }

    pub fn log_pdf(&self, omega: &DMatrix<f64>) -> Result<f64> {
        match self {
            Self::Wishart { r, df } => wishart_log_pdf(omega, r, *df),
            Self::Gamma(g) => Ok(g.log_pdf(omega[(0, 0)])),
        }
    }
}

/// Multivariate log-gamma `log Γ_p(a)`.
pub fn ln_multigamma(p: usize, a: f64) -> f64 {
    let pf = p as f64;
    0.25 * pf * (pf - 1.0) * PI.ln() + (0..p).map(|j| ln_gamma(a - 0.5 * j as f64)).sum::<f64>()
}

/// Wishart log-density with inverse scale `R`:
/// `p(Ω) ∝ |Ω|^{(ν−n−1)/2} exp(−tr(RΩ)/2)`.
pub fn wishart_log_pdf(omega: &DMatrix<f64>, r: &DMatrix<f64>, df: f64) -> Result<f64> {
    let n = omega.nrows();
    let ld_omega = log_det_spd(omega, "Ω")?;
    let ld_r = log_det_spd(r, "Wishart R")?;
    let tr = (r * omega).trace();
    let nf = n as f64;
    Ok(0.5 * (df - nf - 1.0) * ld_omega - 0.5 * tr + 0.5 * df * ld_r
        - 0.5 * df * nf * 2f64.ln()
        - ln_multigamma(n, 0.5 * df))
}

#[derive(Debug, Clone)]
pub struct McarSpec {
    pub likelihood: Likelihood,
    pub car: Arc<CarStructure>,
    pub n_groups: usize,
    pub omega_prior: OmegaPrior,
    pub eta0: Precision,
}

impl McarSpec {
    pub fn new(likelihood: Likelihood, car: Arc<CarStructure>, n_groups: usize, omega_prior: OmegaPrior) -> Result<Self> {
        omega_prior.validate(n_groups)?;
        Ok(Self { likelihood, car, n_groups, omega_prior, eta0: Precision::Gamma(GammaPrior::vague()) })
    }

    /// Flat intercepts for normal data; `N(0, 10⁶)` for Poisson data, where a
    /// flat intercept gives an improper posterior for a disease with no cases.
    pub fn intercept_prior(&self) -> FixedEffectPrior {
        match self.likelihood {
            Likelihood::Normal => FixedEffectPrior::Flat,
            Likelihood::Poisson => FixedEffectPrior::Normal { variance: 1e6 },
        }
    }

    /// `S'QS`, the spatial sum-of-squares matrix entering `Ω`'s conditional.
    pub fn spatial_scatter(&self, s: &DMatrix<f64>) -> DMatrix<f64> {
        s.transpose() * self.car.q() * s
    }
}

/// Parameters of one MCAR chain.
#[derive(Debug, Clone, PartialEq)]
pub struct McarState {
    pub beta: DVector<f64>,
    /// `N × n` spatial effects, each column summing to zero.
    pub s: DMatrix<f64>,
    pub omega: DMatrix<f64>,
    pub eta0: Option<f64>,
}

impl McarState {
    /// Splits cell-level predictors into column means and centred effects.
    pub fn from_cells(psi: &DVector<f64>, n_regions: usize, n_groups: usize, omega: DMatrix<f64>, eta0: Option<f64>) -> Self {
        let mut s = DMatrix::from_row_slice(n_regions, n_groups, psi.as_slice());
        let mut beta = DVector::zeros(n_groups);
        for j in 0..n_groups {
            let m = s.column(j).mean();
            beta[j] = m;
            s.column_mut(j).add_scalar_mut(-m);
        }
        Self { beta, s, omega, eta0 }
    }

    pub fn max_column_sum(&self) -> f64 {
        (0..self.s.ncols()).map(|j| self.s.column(j).sum().abs()).fold(0.0, f64::max)
    }
}

impl Model for McarSpec {
    type State = McarState;

    fn likelihood(&self) -> Likelihood {
        self.likelihood
    }

    fn linear_predictor(&self, state: &McarState) -> DVector<f64> {
        let (nr, ng) = state.s.shape();
        DVector::from_fn(nr * ng, |c, _| state.beta[c % ng] + state.s[(c / ng, c % ng)])
    }

    fn error_precision(&self, state: &McarState) -> Option<f64> {
        state.eta0
    }

    fn n_cells(&self) -> usize {
        self.car.n_regions() * self.n_groups
    }

    fn log_prior(&self, state: &McarState) -> Result<f64> {
        if state.s.shape() != (self.car.n_regions(), self.n_groups) || state.beta.len() != self.n_groups {
            return Err(Error::Dimension("state does not match the MCAR layout".into()));
        }
        if state.max_column_sum() > CENTERING_TOL * (1.0 + state.s.abs().max()) * self.car.n_regions() as f64 {
            return Err(Error::InvalidState("spatial effects are not centred".into()));
        }
        let ld = log_det_spd(&state.omega, "Ω")?;
        let scatter = self.spatial_scatter(&state.s);
        let mut lp = self.omega_prior.log_pdf(&state.omega)?;
        lp += 0.5 * self.car.rank() as f64 * ld - 0.5 * (&state.omega * scatter).trace();
        if let FixedEffectPrior::Normal { variance } = self.intercept_prior() {
            lp += state.beta.iter().map(|b| -0.5 * (2.0 * PI * variance).ln() - 0.5 * b * b / variance).sum::<f64>();
        }
        if self.likelihood == Likelihood::Normal {
            let e = state.eta0.ok_or_else(|| Error::InvalidState("normal model needs η₀".into()))?;
            if !(e > 0.0) {
                return Err(Error::InvalidState(format!("error precision {e} is not positive")));
            }
            if let Precision::Gamma(g) = &self.eta0 {
                lp += g.log_pdf(e);
            }
        }
        Ok(lp)
    }
}
