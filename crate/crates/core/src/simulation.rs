//! Simulation experiment: six data-generating cells, six analysis methods,
//! and a paired (repeated-measures) comparison over simulated subjects.
//!
//! A subject is a draw `δ` (and `γ` for normal data). The first `n` entries
//! of `δ` are 5; each smoothed block has entries `z_k / √d_k`, i.e. precision
//! `D⁻`. The data for a subject in a cell are generated from
//! `Θ = diag(1_n, τ₀^{-1/2}1, …, τ_{n−1}^{-1/2}1) δ` and truth `X_D Θ` with the
//! correct contrasts `HA1`:
//! * normal: `y = X_D Θ + γ / √η₀`;
//! * Poisson: `y_c ~ Poisson(E_c exp((X_D Θ)_c))`.
//!
//! The same subjects feed every cell of the same likelihood and every method.

use std::sync::Arc;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::design::{ContrastMatrix, SanovaDesign};
use crate::graph::CarStructure;
use crate::metrics::MethodMetrics;
use crate::models::{Likelihood, McarSpec, Observations, OmegaPrior, SanovaSpec};
use crate::samplers::{fit_mcar, fit_sanova, RunConfig};
use crate::{Error, Result};

/// Value of the fixed (grand mean and group main effect) entries of `δ`.
pub const FIXED_EFFECT: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DesignCell {
    pub name: String,
    pub likelihood: Likelihood,
    /// Error precision (normal cells only).
    pub eta0: Option<f64>,
    /// `τ/η₀` for normal cells, `τ` for Poisson cells.
    pub ratios: [f64; 3],
}

impl DesignCell {
    fn new(name: &str, likelihood: Likelihood, eta0: Option<f64>, ratios: [f64; 3]) -> Self {
        Self { name: name.to_string(), likelihood, eta0, ratios }
    }

    /// Data1–Data6.
    pub fn all() -> Vec<Self> {
        const R1: [f64; 3] = [100.0, 100.0, 0.1];
        const R2: [f64; 3] = [0.1, 100.0, 0.1];
        vec![
            Self::new("Data1", Likelihood::Normal, Some(1.0), R1),
            Self::new("Data2", Likelihood::Normal, Some(1.0), R2),
            Self::new("Data3", Likelihood::Normal, Some(10.0), R1),
            Self::new("Data4", Likelihood::Normal, Some(10.0), R2),
            Self::new("Data5", Likelihood::Poisson, None, R1),
            Self::new("Data6", Likelihood::Poisson, None, R2),
        ]
    }

    pub fn named(name: &str) -> Result<Self> {
        Self::all()
            .into_iter()
            .find(|c| c.name.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Config(format!("unknown design cell `{name}`")))
    }

    /// True smoothing precisions `τ`.
    pub fn tau(&self) -> [f64; 3] {
        let scale = self.eta0.unwrap_or(1.0);
        self.ratios.map(|r| r * scale)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub delta: DVector<f64>,
    /// Standard normal noise (normal subjects only).
    pub gamma: Option<DVector<f64>>,
}

fn subject_rng(seed: u64, index: usize, likelihood: Likelihood) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = match likelihood {
        Likelihood::Normal => 0,
        Likelihood::Poisson => 1,
    };
    rng.set_stream(2 * index as u64 + kind);
    rng
}

/// Draws `count` subjects for a design with `n_groups` groups on `car`.
pub fn generate_subjects(seed: u64, count: usize, likelihood: Likelihood, car: &CarStructure, n_groups: usize) -> Result<Vec<Subject>> {
    if count == 0 {
        return Err(Error::Config("need at least one subject".into()));
    }
    let dm = car.d_minus();
    if dm.iter().any(|&d| d <= 0.0) {
        return Err(Error::InvalidData("subject generation needs a connected graph".into()));
    }
    let nr = car.n_regions();
    Ok((0..count)
        .map(|s| {
            let mut rng = subject_rng(seed, s, likelihood);
            let mut delta = DVector::zeros(nr * n_groups);
            for k in 0..n_groups {
                delta[k] = FIXED_EFFECT;
            }
            for b in 0..n_groups {
                for k in 0..nr - 1 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    delta[n_groups + b * (nr - 1) + k] = z / dm[k].sqrt();
                }
            }
            let gamma = (likelihood == Likelihood::Normal)
                .then(|| DVector::from_fn(nr * n_groups, |_, _| StandardNormal.sample(&mut rng)));
            Subject { delta, gamma }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub observations: Observations,
    /// True cell-level linear predictor `X_D Θ`.
    pub truth: DVector<f64>,
}

/// `Θ` for a subject in a cell: `δ` with smoothed block `b` scaled by `τ_b^{-1/2}`.
pub fn true_theta(subject: &Subject, cell: &DesignCell, design: &SanovaDesign) -> Result<DVector<f64>> {
    let l = design.layout();
    if l.n_groups != 3 || subject.delta.len() != l.total() {
        return Err(Error::Dimension("simulation cells are defined for three groups".into()));
    }
    let tau = cell.tau();
    let mut theta = subject.delta.clone();
    for (b, t) in tau.iter().enumerate() {
        for c in l.smoothed(b) {
            theta[c] /= t.sqrt();
        }
    }
    Ok(theta)
}

/// Builds one simulated dataset. `expected` is required for Poisson cells;
/// `count_seed` drives the Poisson draws.
pub fn make_dataset(subject: &Subject, cell: &DesignCell, design: &SanovaDesign, expected: Option<&DVector<f64>>, count_seed: u64) -> Result<Dataset> {
    let truth = design.x() * true_theta(subject, cell, design)?;
    let observations = match cell.likelihood {
        Likelihood::Normal => {
            let gamma = subject.gamma.as_ref().ok_or_else(|| Error::InvalidData("normal cell needs a normal subject".into()))?;
            let eta0 = cell.eta0.ok_or_else(|| Error::Config("normal cell without η₀".into()))?;
            Observations::normal((&truth + gamma / eta0.sqrt()).as_slice().to_vec())?
        }
        Likelihood::Poisson => {
            if subject.gamma.is_some() {
                return Err(Error::InvalidData("Poisson cell needs a Poisson subject".into()));
            }
            let e = expected.ok_or_else(|| Error::InvalidData("Poisson cell needs expected counts".into()))?;
            if e.len() != truth.len() {
                return Err(Error::Dimension(format!("{} expected counts for {} cells", e.len(), truth.len())));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(count_seed);
            let counts = e
                .iter()
                .zip(truth.iter())
                .map(|(e, t)| {
                    let lambda = e * t.exp();
                    Poisson::new(lambda).map(|p| p.sample(&mut rng)).map_err(|err| Error::InvalidData(format!("Poisson({lambda}): {err}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            Observations::poisson(counts, e.as_slice().to_vec())?
        }
    };
    Ok(Dataset { observations, truth })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Method {
    SanovaHa1,
    SanovaHa2,
    SanovaHam,
    Mcar0002,
    Mcar1,
    Mcar200,
}

impl Method {
    pub fn all() -> [Self; 6] {
        [Self::SanovaHa1, Self::SanovaHa2, Self::SanovaHam, Self::Mcar0002, Self::Mcar1, Self::Mcar200]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::SanovaHa1 => "SANOVA-HA1",
            Self::SanovaHa2 => "SANOVA-HA2",
            Self::SanovaHam => "SANOVA-HAM",
            Self::Mcar0002 => "MCAR-0.002",
            Self::Mcar1 => "MCAR-1",
            Self::Mcar200 => "MCAR-200",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::all()
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Config(format!("unknown method `{name}`")))
    }

    /// Comma-separated names, or `all`.
    pub fn parse_list(list: &str) -> Result<Vec<Self>> {
        if list.eq_ignore_ascii_case("all") {
            return Ok(Self::all().to_vec());
        }
        list.split(',').map(|s| Self::parse(s.trim())).collect()
    }

    pub fn is_sanova(&self) -> bool {
        matches!(self, Self::SanovaHa1 | Self::SanovaHa2 | Self::SanovaHam)
    }
}

/// Inputs shared by every fit: the CAR structure, one design per contrast
/// and the expected counts for Poisson cells.
pub struct SimulationContext {
    pub car: Arc<CarStructure>,
    pub expected: DVector<f64>,
    designs: [Arc<SanovaDesign>; 3],
}

impl SimulationContext {
    pub fn new(car: Arc<CarStructure>, expected: DVector<f64>) -> Result<Self> {
        if expected.len() != car.n_regions() * 3 {
            return Err(Error::Dimension(format!("{} expected counts for {} regions × 3", expected.len(), car.n_regions())));
        }
        let build = |h: ContrastMatrix| SanovaDesign::build(&car, &h).map(Arc::new);
        let designs = [build(ContrastMatrix::ha1())?, build(ContrastMatrix::ha2())?, build(ContrastMatrix::ham())?];
        Ok(Self { car, expected, designs })
    }

    /// The design with the correct contrasts, used to generate data.
    pub fn true_design(&self) -> &SanovaDesign {
        &self.designs[0]
    }

    /// Fits `method` and returns posterior medians and 95% intervals of the
    /// cell-level linear predictor.
    pub fn fit(&self, method: Method, data: &Observations, cfg: &RunConfig) -> Result<(Vec<f64>, Vec<(f64, f64)>)> {
        let likelihood = data.likelihood();
        let draws = match method {
            Method::SanovaHa1 | Method::SanovaHa2 | Method::SanovaHam => {
                let design = match method {
                    Method::SanovaHa1 => &self.designs[0],
                    Method::SanovaHa2 => &self.designs[1],
                    _ => &self.designs[2],
                };
                let spec = match likelihood {
                    Likelihood::Normal => SanovaSpec::normal(design.clone()),
                    Likelihood::Poisson => SanovaSpec::poisson(design.clone()),
                };
                fit_sanova(&spec, data, cfg)?
            }
            Method::Mcar0002 | Method::Mcar1 | Method::Mcar200 => {
                let scale = match method {
                    Method::Mcar0002 => 0.002,
                    Method::Mcar1 => 1.0,
                    _ => 200.0,
                };
                let spec = McarSpec::new(likelihood, self.car.clone(), 3, OmegaPrior::wishart_preset(scale, 3))?;
                fit_mcar(&spec, data, cfg)?
            }
        };
        draws.predictor_summary()
    }
}

#[derive(Debug, Clone)]
pub struct TournamentConfig {
    pub cells: Vec<DesignCell>,
    pub methods: Vec<Method>,
    pub n_subjects: usize,
    pub seed: u64,
    /// MCMC settings; the seed is replaced per fit.
    pub run: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitFailure {
    pub cell: String,
    pub method: String,
    pub subject: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TournamentResult {
    pub rows: Vec<MethodMetrics>,
    pub failures: Vec<FitFailure>,
}

/// SplitMix64 finaliser, used to derive independent per-task seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn task_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ p))
}

/// Every method on every subject's dataset in every cell. Fit errors are
/// recorded rather than aborting the run.
pub fn run_tournament(ctx: &SimulationContext, cfg: &TournamentConfig) -> Result<TournamentResult> {
    cfg.run.validate()?;
    let nr = ctx.car.n_regions();
    let normal = generate_subjects(cfg.seed, cfg.n_subjects, Likelihood::Normal, &ctx.car, 3)?;
    let poisson = generate_subjects(cfg.seed, cfg.n_subjects, Likelihood::Poisson, &ctx.car, 3)?;
    let cell_index = |c: &DesignCell| DesignCell::all().iter().position(|d| d.name == c.name).unwrap_or(0) as u64;

    let mut tasks = Vec::new();
    for (ci, cell) in cfg.cells.iter().enumerate() {
        for s in 0..cfg.n_subjects {
            for (mi, &m) in cfg.methods.iter().enumerate() {
                tasks.push((ci, s, mi, m, cell));
            }
        }
    }
    let outcomes: Vec<_> = tasks
        .par_iter()
        .map(|&(_, s, _, method, cell)| {
            let subject = match cell.likelihood {
                Likelihood::Normal => &normal[s],
                Likelihood::Poisson => &poisson[s],
            };
            let count_seed = task_seed(cfg.seed, &[cell_index(cell), s as u64, u64::MAX]);
            let data = make_dataset(subject, cell, ctx.true_design(), Some(&ctx.expected), count_seed)?;
            let run = RunConfig { seed: task_seed(cfg.seed, &[cell_index(cell), s as u64, method as u64]), ..cfg.run.clone() };
            let (med, iv) = ctx.fit(method, &data.observations, &run)?;
            Ok((med, iv, data.truth.as_slice().to_vec()))
        })
        .collect::<Vec<Result<_>>>();

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (ci, cell) in cfg.cells.iter().enumerate() {
        for (mi, &method) in cfg.methods.iter().enumerate() {
            let mut est = Vec::new();
            let mut ivs = Vec::new();
            let mut truths = Vec::new();
            let mut failed = 0;
            for ((tci, s, tmi, _, _), out) in tasks.iter().zip(&outcomes) {
                if *tci != ci || *tmi != mi {
                    continue;
                }
                match out {
                    Ok((m, iv, t)) => {
                        debug_assert_eq!(m.len(), nr * 3);
                        est.push(m.clone());
                        ivs.push(iv.clone());
                        truths.push(t.clone());
                    }
                    Err(e) => {
                        failed += 1;
                        failures.push(FitFailure { cell: cell.name.clone(), method: method.name().into(), subject: *s, error: e.to_string() });
                    }
                }
            }
            if est.len() >= 2 {
                rows.push(MethodMetrics::compute(&cell.name, method.name(), &est, &ivs, &truths, failed)?);
            }
        }
    }
    Ok(TournamentResult { rows, failures })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::RegionGraph;

    fn small_ctx() -> SimulationContext {
        let pairs = [(0, 1), (1, 2), (2, 3), (3, 0), (1, 3)];
        let car = Arc::new(CarStructure::from_graph(&RegionGraph::from_pairs(4, &pairs).unwrap()).unwrap());
        SimulationContext::new(car, DVector::from_element(12, 20.0)).unwrap()
    }

    #[test]
    fn cells_match_table() {
        let cells = DesignCell::all();
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[2].tau(), [1000.0, 1000.0, 1.0]);
        assert_eq!(cells[4].tau(), [100.0, 100.0, 0.1]);
        assert_eq!(DesignCell::named("data4").unwrap().eta0, Some(10.0));
    }

    #[test]
    fn subjects_have_fixed_fives_and_right_noise() {
        let ctx = small_ctx();
        let s = generate_subjects(4, 5, Likelihood::Normal, &ctx.car, 3).unwrap();
        assert!(s.iter().all(|x| x.delta.rows(0, 3).iter().all(|&v| v == 5.0) && x.gamma.is_some()));
        let p = generate_subjects(4, 5, Likelihood::Poisson, &ctx.car, 3).unwrap();
        assert!(p.iter().all(|x| x.gamma.is_none()));
        assert_eq!(s, generate_subjects(4, 5, Likelihood::Normal, &ctx.car, 3).unwrap());
    }

    #[test]
    fn noiseless_fixed_only_dataset_is_linear() {
        let ctx = small_ctx();
        let mut delta = DVector::zeros(12);
        delta.rows_mut(0, 3).fill(5.0);
        let subj = Subject { delta: delta.clone(), gamma: Some(DVector::zeros(12)) };
        let d = make_dataset(&subj, &DesignCell::named("Data1").unwrap(), ctx.true_design(), None, 0).unwrap();
        let expected = ctx.true_design().x() * delta;
        let Observations::Normal { y } = d.observations else { panic!() };
        assert!((y - expected).amax() < 1e-12);
    }

    #[test]
    fn poisson_scaling() {
        let ctx = small_ctx();
        let subj = &generate_subjects(1, 1, Likelihood::Poisson, &ctx.car, 3).unwrap()[0];
        let th = true_theta(subj, &DesignCell::named("Data5").unwrap(), ctx.true_design()).unwrap();
        let l = ctx.true_design().layout();
        for (b, f) in [(0, 0.1), (1, 0.1), (2, 1.0 / 0.1f64.sqrt())] {
            for c in l.smoothed(b) {
                assert!((th[c] - subj.delta[c] * f).abs() < 1e-12);
            }
        }
        assert!(make_dataset(subj, &DesignCell::named("Data1").unwrap(), ctx.true_design(), None, 0).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::all() {
            assert_eq!(Method::parse(m.name()).unwrap(), m);
        }
        assert_eq!(Method::parse_list("all").unwrap().len(), 6);
        assert!(Method::parse("MCAR-2").is_err());
    }

    #[test]
    fn tiny_tournament_is_deterministic() {
        let ctx = small_ctx();
        let cfg = TournamentConfig {
            cells: vec![DesignCell::named("Data3").unwrap(), DesignCell::named("Data5").unwrap()],
            methods: vec![Method::SanovaHa1, Method::Mcar1],
            n_subjects: 3,
            seed: 9,
            run: RunConfig { n_chains: 2, n_iter: 300, burn_in: 100, thin: 1, seed: 0, adapt: true },
        };
        let a = run_tournament(&ctx, &cfg).unwrap();
        let b = run_tournament(&ctx, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 4);
        assert!(a.failures.is_empty());
    }
}
