use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use sanova::design::{ContrastMatrix, SanovaDesign};
use sanova::graph::{CarStructure, RegionGraph};
use sanova::models::{
    GammaPrior, Likelihood, McarSpec, Observations, OmegaPrior, Precision, SanovaSpec, SmoothingPrecisions,
};
use sanova::samplers::{
    chain_rng, fit_univariate_car, gelman_rubin, gibbs_mcar_normal, gibbs_sanova_normal, mh_mcar_poisson,
    mh_sanova_poisson, PosteriorDraws, RunConfig,
};

fn path(n: usize) -> Arc<CarStructure> {
    let pairs: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
    Arc::new(CarStructure::from_graph(&RegionGraph::from_pairs(n, &pairs).unwrap()).unwrap())
}

fn grid(rows: usize, cols: usize) -> Arc<CarStructure> {
    let mut pairs = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            if c + 1 < cols {
                pairs.push((i, i + 1));
            }
            if r + 1 < rows {
                pairs.push((i, i + cols));
            }
        }
    }
    Arc::new(CarStructure::from_graph(&RegionGraph::from_pairs(rows * cols, &pairs).unwrap()).unwrap())
}

fn cfg(seed: u64, n_iter: usize, burn_in: usize) -> RunConfig {
    RunConfig { n_chains: 3, n_iter, burn_in, thin: 1, seed, adapt: true }
}

fn col(d: &PosteriorDraws, name: &str) -> Vec<f64> {
    d.column(d.index(name).unwrap_or_else(|| panic!("no parameter {name}")))
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

fn median(v: &[f64]) -> f64 {
    sanova::metrics::quantile(v, 0.5).unwrap()
}

#[test]
fn fixed_hyperparameters_match_closed_form_posterior() {
    // Generic linear-model posterior (no use of X'X = I):
    // precision P = η₀X'X + Λ, mean P⁻¹η₀X'y.
    let car = path(3);
    let design = Arc::new(SanovaDesign::build(&car, &ContrastMatrix::helmert(2).unwrap()).unwrap());
    let tau = vec![2.0, 0.5];
    let eta0 = 1.5;
    let mut spec = SanovaSpec::normal(design.clone());
    spec.tau = SmoothingPrecisions::Fixed(tau.clone());
    spec.eta0 = Precision::Fixed(eta0);
    let y = vec![0.3, -1.2, 2.0, 0.4, -0.7, 1.1];
    let data = Observations::normal(y.clone()).unwrap();
    let draws = gibbs_sanova_normal(&spec, &data, &RunConfig { n_chains: 3, n_iter: 5001, burn_in: 1, thin: 1, seed: 11, adapt: false }).unwrap();

    let x = design.x();
    let lambda = DMatrix::from_diagonal(&spec.prior_precision(&tau));
    let p = x.transpose() * x * eta0 + lambda;
    let cov = p.clone().try_inverse().unwrap();
    let mean = &cov * x.transpose() * DVector::from_vec(y) * eta0;

    let n = draws.n_chains() * draws.kept_per_chain();
    assert_eq!(n, 15_000);
    let cols: Vec<Vec<f64>> = (0..6).map(|k| col(&draws, &format!("theta[{k}]"))).collect();
    for k in 0..6 {
        let (m, sd) = mean_sd(&cols[k]);
        assert!((m - mean[k]).abs() < 3.0 * sd / (n as f64).sqrt(), "mean {k}: {m} vs {}", mean[k]);
        for l in 0..6 {
            let (ml, _) = mean_sd(&cols[l]);
            let c = cols[k].iter().zip(&cols[l]).map(|(a, b)| (a - m) * (b - ml)).sum::<f64>() / (n as f64 - 1.0);
            let tol = 0.1 * (cov[(k, k)] * cov[(l, l)]).sqrt();
            assert!((c - cov[(k, l)]).abs() < tol, "cov ({k},{l}): {c} vs {}", cov[(k, l)]);
        }
    }
}

#[test]
fn huge_smoothing_precision_shrinks_to_zero() {
    let car = grid(3, 3);
    let design = Arc::new(SanovaDesign::build(&car, &ContrastMatrix::ha1()).unwrap());
    let mut spec = SanovaSpec::normal(design.clone());
    spec.tau = SmoothingPrecisions::Fixed(vec![1e8; 3]);
    let mut rng = chain_rng(5, 0);
    let y: Vec<f64> = (0..27).map(|_| rng.random::<f64>() * 4.0).collect();
    let draws = gibbs_sanova_normal(&spec, &Observations::normal(y).unwrap(), &cfg(3, 1500, 500)).unwrap();
    for k in 3..27 {
        let v = col(&draws, &format!("theta[{k}]"));
        let (_, sd) = mean_sd(&v);
        assert!(median(&v).abs() < 3.0 * sd, "theta[{k}]");
    }
}

#[test]
fn vanishing_smoothing_recovers_least_squares() {
    let car = grid(2, 3);
    let design = Arc::new(SanovaDesign::build(&car, &ContrastMatrix::ha1()).unwrap());
    let mut spec = SanovaSpec::normal(design.clone());
    spec.tau = SmoothingPrecisions::Fixed(vec![1e-8; 3]);
    let mut rng = chain_rng(6, 0);
    let y: Vec<f64> = (0..18).map(|_| rng.random::<f64>() * 3.0 - 1.0).collect();
    let z = design.x().transpose() * DVector::from_vec(y.clone());
    let draws = gibbs_sanova_normal(&spec, &Observations::normal(y).unwrap(), &cfg(4, 3000, 500)).unwrap();
    let n = (draws.n_chains() * draws.kept_per_chain()) as f64;
    for k in 0..18 {
        let (m, sd) = mean_sd(&col(&draws, &format!("theta[{k}]")));
        assert!((m - z[k]).abs() < 4.0 * sd / n.sqrt(), "theta[{k}] {m} vs {}", z[k]);
    }
}

#[test]
fn normal_sanova_mixes_and_stays_positive() {
    let car = grid(4, 5);
    let design = Arc::new(SanovaDesign::build(&car, &ContrastMatrix::ha1()).unwrap());
    let mut rng = chain_rng(8, 0);
    let theta = DVector::from_fn(60, |k, _| if k < 3 { 5.0 } else { (rng.random::<f64>() - 0.5) * 0.4 });
    let noise = DVector::from_fn(60, |_, _| rng.random::<f64>() - 0.5);
    let y = design.x() * theta + noise;
    let spec = SanovaSpec::normal(design);
    let draws = gibbs_sanova_normal(&spec, &Observations::normal(y.as_slice().to_vec()).unwrap(), &RunConfig::reduced(1)).unwrap();
    let rhat = gelman_rubin(&draws).unwrap();
    assert!(rhat.iter().all(|&r| r < 1.1), "max R-hat {}", rhat.iter().cloned().fold(0.0, f64::max));
    for name in ["tau[0]", "tau[1]", "tau[2]", "eta0"] {
        assert!(col(&draws, name).iter().all(|&v| v > 0.0));
    }
}

#[test]
fn samplers_are_deterministic() {
    let car = grid(2, 3);
    let design = Arc::new(SanovaDesign::build(&car, &ContrastMatrix::ha1()).unwrap());
    let counts: Vec<f64> = (0..18).map(|k| (k % 5) as f64 * 3.0).collect();
    let data = Observations::poisson(counts, vec![4.0; 18]).unwrap();
    let spec = SanovaSpec::poisson(design);
    let c = cfg(21, 600, 200);
    let a = mh_sanova_poisson(&spec, &data, &c).unwrap();
    let b = mh_sanova_poisson(&spec, &data, &c).unwrap();
    assert_eq!(a, b);
    let other = mh_sanova_poisson(&spec, &data, &RunConfig { seed: 22, ..c }).unwrap();
    assert_ne!(a, other);
}

#[test]
fn poisson_counts_equal_to_offsets_give_zero_log_risk() {
    let car = grid(2, 3);
    let design = Arc::new(SanovaDesign::build(&car, &ContrastMatrix::ha1()).unwrap());
    let mut spec = SanovaSpec::poisson(design);
    spec.tau = SmoothingPrecisions::Fixed(vec![1e4; 3]);
    let data = Observations::poisson(vec![40.0; 18], vec![40.0; 18]).unwrap();
    let draws = mh_sanova_poisson(&spec, &data, &cfg(2, 2000, 500)).unwrap();
    for p in draws.predictor_range() {
        let v = draws.column(p);
        let (_, sd) = mean_sd(&v);
        assert!(median(&v).abs() < 3.0 * sd);
    }
    let acc = draws.acceptance().unwrap();
    assert!(acc > 0.2, "acceptance {acc}");
}

#[test]
fn single_cell_poisson_matches_quadrature() {
    let car = Arc::new(CarStructure::from_graph(&RegionGraph::from_pairs(1, &[]).unwrap()).unwrap());
    let design = Arc::new(SanovaDesign::build(&car, &ContrastMatrix::from_matrix(DMatrix::from_element(1, 1, 1.0)).unwrap()).unwrap());
    let spec = SanovaSpec::poisson(design);
    let (y, e) = (7.0, 3.2);
    let data = Observations::poisson(vec![y], vec![e]).unwrap();
    let draws = mh_sanova_poisson(&spec, &data, &cfg(13, 6000, 1000)).unwrap();
    let sampled = median(&col(&draws, "mu[0,0]")).exp();

    // Exact posterior of θ: exp(yθ − E e^θ − θ²/(2·10⁶)), trapezoid rule.
    let (lo, hi, steps) = (-6.0f64, 6.0f64, 200_000);
    let h = (hi - lo) / steps as f64;
    let dens: Vec<f64> = (0..=steps)
        .map(|k| {
            let t = lo + k as f64 * h;
            (y * t - e * t.exp() - t * t / 2e6).exp()
        })
        .collect();
    let total: f64 = dens.windows(2).map(|w| 0.5 * (w[0] + w[1]) * h).sum();
    let mut acc = 0.0;
    let mut med = f64::NAN;
    for (k, w) in dens.windows(2).enumerate() {
        acc += 0.5 * (w[0] + w[1]) * h;
        if acc >= 0.5 * total {
            med = (lo + (k as f64 + 0.5) * h).exp();
            break;
        }
    }
    assert!((sampled / med - 1.0).abs() < 0.02, "sampled {sampled} vs quadrature {med}");
}

#[test]
fn zero_counts_pull_rates_below_one() {
    let car = grid(2, 3);
    let spec = McarSpec::new(Likelihood::Poisson, car, 2, OmegaPrior::wishart_preset(1.0, 2)).unwrap();
    let data = Observations::poisson(vec![0.0; 12], vec![1.0; 12]).unwrap();
    let draws = mh_mcar_poisson(&spec, &data, &cfg(3, 1500, 500)).unwrap();
    for p in draws.predictor_range() {
        assert!(median(&draws.column(p)) < 0.0);
    }
}

fn check_mcar_invariants(draws: &PosteriorDraws, nr: usize, ng: usize) {
    let p = draws.n_params();
    for chain in draws.chains() {
        for row in chain.values.chunks(p) {
            let s = &row[ng..ng + nr * ng];
            for j in 0..ng {
                let sum: f64 = (0..nr).map(|i| s[i * ng + j]).sum();
                assert!(sum.abs() < 1e-10, "column {j} sums to {sum}");
            }
            let upper = &row[ng + nr * ng..ng + nr * ng + ng * (ng + 1) / 2];
            let mut omega = DMatrix::zeros(ng, ng);
            let mut k = 0;
            for a in 0..ng {
                for b in a..ng {
                    omega[(a, b)] = upper[k];
                    omega[(b, a)] = upper[k];
                    k += 1;
                }
            }
            assert!(omega.cholesky().is_some(), "Ω not SPD");
        }
    }
}

#[test]
fn mcar_draws_are_centred_and_spd() {
    let car = grid(3, 4);
    let mut rng = chain_rng(14, 0);
    let y: Vec<f64> = (0..36).map(|k| (k % 3) as f64 + rng.random::<f64>()).collect();
    let spec = McarSpec::new(Likelihood::Normal, car.clone(), 3, OmegaPrior::wishart_preset(1.0, 3)).unwrap();
    let draws = gibbs_mcar_normal(&spec, &Observations::normal(y).unwrap(), &cfg(7, 800, 200)).unwrap();
    check_mcar_invariants(&draws, 12, 3);
    assert!(col(&draws, "eta0").iter().all(|&v| v > 0.0));

    let counts: Vec<f64> = (0..36).map(|k| (k % 7) as f64).collect();
    let spec = McarSpec::new(Likelihood::Poisson, car, 3, OmegaPrior::wishart_preset(0.002, 3)).unwrap();
    let draws = mh_mcar_poisson(&spec, &Observations::poisson(counts, vec![3.0; 36]).unwrap(), &cfg(7, 800, 200)).unwrap();
    check_mcar_invariants(&draws, 12, 3);
}

#[test]
fn one_dimensional_wishart_agrees_with_gamma() {
    // Wishart(R, ν) with n = 1 is Gamma(ν/2, R/2); the two prior forms must
    // give the same posterior.
    let car = grid(3, 3);
    let mut rng = chain_rng(15, 0);
    let y: Vec<f64> = (0..9).map(|k| k as f64 * 0.3 + rng.random::<f64>()).collect();
    let data = Observations::normal(y).unwrap();
    let w = McarSpec::new(Likelihood::Normal, car.clone(), 1, OmegaPrior::Wishart { r: DMatrix::from_element(1, 1, 1.0), df: 1.0 }).unwrap();
    let g = McarSpec::new(Likelihood::Normal, car, 1, OmegaPrior::Gamma(GammaPrior::new(0.5, 0.5).unwrap())).unwrap();
    let c = cfg(31, 6000, 1000);
    let a = gibbs_mcar_normal(&w, &data, &c).unwrap();
    let b = gibbs_mcar_normal(&g, &data, &RunConfig { seed: 32, ..c }).unwrap();
    for p in a.predictor_range() {
        let (ma, sa) = mean_sd(&a.column(p));
        let (mb, _) = mean_sd(&b.column(p));
        // generous MC error allowance for autocorrelated draws
        assert!((ma - mb).abs() < 0.15 * sa + 0.02, "cell {p}: {ma} vs {mb}");
    }
}

#[test]
fn strong_gamma_prior_shrinks_car_effects() {
    let car = grid(3, 4);
    let mut rng = chain_rng(16, 0);
    let counts: Vec<f64> = (0..12).map(|k| ((k * 5) % 11) as f64 + (rng.random::<f64>() * 3.0).floor()).collect();
    let data = Observations::poisson(counts, vec![4.0; 12]).unwrap();
    let c = cfg(17, 2000, 500);
    let loose = fit_univariate_car(car.clone(), &data, 0.001, &c).unwrap();
    let tight = fit_univariate_car(car, &data, 1000.0, &c).unwrap();
    let sd = |d: &PosteriorDraws| -> f64 {
        (0..12).map(|i| mean_sd(&col(d, &format!("S[{i},0]"))).1).sum::<f64>() / 12.0
    };
    assert!(sd(&tight) < sd(&loose), "{} vs {}", sd(&tight), sd(&loose));
}
