use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;

use sanova::design::{parse_matrix, ContrastMatrix, SanovaDesign};
use sanova::graph::{CarStructure, RegionGraph};
use sanova::io::{self, FitConfig, OutputDir};
use sanova::metrics::format_report;
use sanova::models::{GammaPrior, Likelihood, McarSpec, Observations, OmegaPrior, Precision, SanovaSpec, SanovaTerms, SmoothingPrecisions};
use sanova::samplers::{fit_mcar, fit_sanova, fit_univariate_car, PosteriorDraws};
use sanova::simulation::{run_tournament, DesignCell, Method, SimulationContext, TournamentConfig};
use sanova::{Error, Result};

/// Smoothed ANOVA and MCAR models for multivariate areal data.
#[derive(Parser)]
#[command(name = "sanova", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a SANOVA model.
    FitSanova(FitSanovaArgs),
    /// Fit a separable MCAR model.
    FitMcar(FitMcarArgs),
    /// Fit a univariate intrinsic CAR model to each outcome separately.
    FitCar(FitCarArgs),
    /// Run the simulation tournament.
    Simulate(SimulateArgs),
    /// Print a metrics table from a metrics CSV.
    Metrics(MetricsArgs),
    /// Compute DIC from a draws file.
    Dic(DicArgs),
    /// Build a design matrix and report its orthonormality and block sizes.
    CheckDesign(CheckDesignArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML file with run options; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master random seed (required here or in the config file).
    #[arg(long)]
    seed: Option<u64>,
    /// Run preset: `reduced` (3 × 4000) or `full` (3 × 10000).
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    iter: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl RunArgs {
    fn config(&self, extra: FitConfig) -> Result<FitConfig> {
        let base = match &self.config {
            Some(p) => FitConfig::read(p)?,
            None => FitConfig::default(),
        };
        let flags = FitConfig {
            seed: self.seed,
            preset: self.preset.clone(),
            n_chains: self.chains,
            n_iter: self.iter,
            burn_in: self.burn_in,
            thin: self.thin,
            ..extra
        };
        Ok(base.merged(flags))
    }
}

#[derive(Args)]
struct DataArgs {
    /// Counts file (`region,disease,count,population[,expected]`), or for
    /// normal data a `region,disease,value` file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    adjacency: PathBuf,
    /// `poisson` (default) or `normal`.
    #[arg(long)]
    likelihood: Option<String>,
}

#[derive(Args)]
struct FitSanovaArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    run: RunArgs,
    /// HA1, HA2, HAM, helmert, or a matrix file.
    #[arg(long)]
    contrasts: Option<String>,
    /// `full` or `main` (no interactions).
    #[arg(long)]
    terms: Option<String>,
    #[arg(long)]
    tau_shape: Option<f64>,
    #[arg(long)]
    tau_rate: Option<f64>,
}

#[derive(Args)]
struct FitMcarArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    run: RunArgs,
    /// Wishart `R = scale · I`.
    #[arg(long)]
    wishart_scale: Option<f64>,
    /// Matrix file for the Wishart `R`.
    #[arg(long)]
    wishart_r: Option<String>,
    #[arg(long)]
    wishart_df: Option<f64>,
}

#[derive(Args)]
struct FitCarArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    run: RunArgs,
    /// Precision prior `Gamma(a, a)`.
    #[arg(long)]
    car_a: Option<f64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated cells (Data1..Data6) or `all`.
    #[arg(long, default_value = "all")]
    cells: String,
    /// Comma-separated methods or `all`.
    #[arg(long, default_value = "all")]
    methods: String,
    #[arg(long, default_value_t = 100)]
    subjects: usize,
    /// Adjacency for the simulation regions.
    #[arg(long, default_value = "mn20.adj")]
    adjacency: PathBuf,
    /// Counts used to compute expected counts for Poisson cells.
    #[arg(long, default_value = "mn20_counts.csv")]
    counts: PathBuf,
}

#[derive(Args)]
struct MetricsArgs {
    /// Metrics CSV written by `simulate`.
    input: PathBuf,
}

#[derive(Args)]
struct DicArgs {
    /// Draws CSV written by a fit command.
    #[arg(long)]
    draws: PathBuf,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct CheckDesignArgs {
    #[arg(long)]
    adjacency: PathBuf,
    #[arg(long, default_value = "HA1")]
    contrasts: String,
}

struct Loaded {
    car: Arc<CarStructure>,
    n_groups: usize,
    groups: Vec<String>,
    observations: Observations,
    inputs: Vec<PathBuf>,
}

fn likelihood(name: Option<&str>) -> Result<Likelihood> {
    name.unwrap_or("poisson").parse()
}

fn read_graph(path: &Path) -> Result<(RegionGraph, PathBuf)> {
    let path = io::resolve_data_path(path);
    let (graph, warnings) = RegionGraph::read_adjacency(&path)?;
    for w in warnings {
        eprintln!("warning: {w:?}");
    }
    Ok((graph, path))
}

fn load(args: &DataArgs, lik: Likelihood) -> Result<Loaded> {
    let data_path = io::resolve_data_path(&args.data);
    let (graph, adj_path) = read_graph(&args.adjacency)?;
    let (groups, observations) = match lik {
        Likelihood::Poisson => {
            let (ds, _) = io::load_dataset(&data_path, &adj_path)?;
            (ds.diseases.clone(), ds.observations()?)
        }
        Likelihood::Normal => {
            let (groups, m) = io::load_values(&data_path, graph.n_regions())?;
            let y = (0..m.nrows()).flat_map(|i| m.row(i).iter().copied().collect::<Vec<_>>()).collect();
            (groups, Observations::normal(y)?)
        }
    };
    Ok(Loaded {
        car: Arc::new(CarStructure::from_graph(&graph)?),
        n_groups: groups.len(),
        groups,
        observations,
        inputs: vec![data_path, adj_path],
    })
}

fn contrasts(spec: &str, n: usize) -> Result<ContrastMatrix> {
    let path = io::resolve_data_path(Path::new(spec));
    if path.is_file() {
        ContrastMatrix::read(path)
    } else {
        ContrastMatrix::named(spec, n)
    }
}

fn gamma_prior(shape: Option<f64>, rate: Option<f64>) -> Result<GammaPrior> {
    let v = GammaPrior::vague();
    GammaPrior::new(shape.unwrap_or(v.shape), rate.unwrap_or(v.rate))
}

fn to_json(cfg: &FitConfig) -> serde_json::Value {
    serde_json::to_value(cfg).unwrap_or(serde_json::Value::Null)
}

fn report_fit(draws: &PosteriorDraws, data: &Observations, name: &str, out: &mut OutputDir) -> Result<()> {
    out.write_draws(name, draws)?;
    out.write_summary(name, draws)?;
    let dic = draws.dic(data)?;
    out.write_dic(name, &dic)?;
    let max_rhat = draws.summaries()?.iter().map(|s| s.rhat).fold(f64::NAN, f64::max);
    println!("{name}: {} chains x {} draws, max R-hat {max_rhat:.3}", draws.n_chains(), draws.kept_per_chain());
    if let Some(a) = draws.acceptance() {
        println!("{name}: acceptance {a:.3}");
    }
    println!("{name}: Dbar {:.2}  pD {:.2}  DIC {:.2}", dic.dbar, dic.p_d, dic.dic);
    Ok(())
}

fn fit_sanova_cmd(a: &FitSanovaArgs) -> Result<()> {
    let cfg = a.run.config(FitConfig {
        likelihood: a.data.likelihood.clone(),
        contrasts: a.contrasts.clone(),
        terms: a.terms.clone(),
        tau_shape: a.tau_shape,
        tau_rate: a.tau_rate,
        ..FitConfig::default()
    })?;
    let run = cfg.run_config()?;
    let lik = likelihood(cfg.likelihood.as_deref())?;
    let data = load(&a.data, lik)?;
    let h = contrasts(cfg.contrasts.as_deref().unwrap_or("HA1"), data.n_groups)?;
    let design = Arc::new(SanovaDesign::build(&data.car, &h)?);
    let mut spec = match lik {
        Likelihood::Normal => SanovaSpec::normal(design),
        Likelihood::Poisson => SanovaSpec::poisson(design),
    };
    spec.terms = match cfg.terms.as_deref().unwrap_or("full") {
        "full" => SanovaTerms::Full,
        "main" => SanovaTerms::MainEffects,
        t => return Err(Error::Config(format!("unknown terms `{t}`; use full or main"))),
    };
    spec.tau = SmoothingPrecisions::Gamma(gamma_prior(cfg.tau_shape, cfg.tau_rate)?);
    if lik == Likelihood::Normal {
        spec.eta0 = Precision::Gamma(gamma_prior(cfg.eta0_shape, cfg.eta0_rate)?);
    }
    let draws = fit_sanova(&spec, &data.observations, &run)?;
    let mut out = OutputDir::create(&a.run.out)?;
    report_fit(&draws, &data.observations, "sanova", &mut out)?;
    out.finish("fit-sanova", run.seed, to_json(&cfg), &data.inputs)?;
    Ok(())
}

fn fit_mcar_cmd(a: &FitMcarArgs) -> Result<()> {
    let cfg = a.run.config(FitConfig {
        likelihood: a.data.likelihood.clone(),
        wishart_scale: a.wishart_scale,
        wishart_r: a.wishart_r.clone(),
        wishart_df: a.wishart_df,
        ..FitConfig::default()
    })?;
    let run = cfg.run_config()?;
    let lik = likelihood(cfg.likelihood.as_deref())?;
    let mut data = load(&a.data, lik)?;
    let n = data.n_groups;
    let r = match &cfg.wishart_r {
        Some(p) => {
            let path = io::resolve_data_path(Path::new(p));
            let m = parse_matrix(&std::fs::read_to_string(&path)?)?;
            data.inputs.push(path);
            m
        }
        None => DMatrix::identity(n, n) * cfg.wishart_scale.unwrap_or(1.0),
    };
    let prior = OmegaPrior::Wishart { r, df: cfg.wishart_df.unwrap_or(n as f64) };
    let mut spec = McarSpec::new(lik, data.car.clone(), n, prior)?;
    if lik == Likelihood::Normal {
        spec.eta0 = Precision::Gamma(gamma_prior(cfg.eta0_shape, cfg.eta0_rate)?);
    }
    let draws = fit_mcar(&spec, &data.observations, &run)?;
    let mut out = OutputDir::create(&a.run.out)?;
    report_fit(&draws, &data.observations, "mcar", &mut out)?;
    out.finish("fit-mcar", run.seed, to_json(&cfg), &data.inputs)?;
    Ok(())
}

fn fit_car_cmd(a: &FitCarArgs) -> Result<()> {
    let cfg = a.run.config(FitConfig { likelihood: a.data.likelihood.clone(), car_a: a.car_a, ..FitConfig::default() })?;
    let run = cfg.run_config()?;
    let lik = likelihood(cfg.likelihood.as_deref())?;
    let data = load(&a.data, lik)?;
    let n = data.n_groups;
    let mut out = OutputDir::create(&a.run.out)?;
    let mut total = (0.0, 0.0, 0.0);
    for (j, group) in data.groups.iter().enumerate() {
        let obs = column(&data.observations, j, n)?;
        let draws = fit_univariate_car(data.car.clone(), &obs, cfg.car_a.unwrap_or(0.1), &run)?;
        report_fit(&draws, &obs, &format!("car_{group}"), &mut out)?;
        let d = draws.dic(&obs)?;
        total = (total.0 + d.dbar, total.1 + d.p_d, total.2 + d.dic);
    }
    println!("total: Dbar {:.2}  pD {:.2}  DIC {:.2}", total.0, total.1, total.2);
    out.finish("fit-car", run.seed, to_json(&cfg), &data.inputs)?;
    Ok(())
}

/// Observations for outcome `j` out of `n`, from region-major cells.
fn column(obs: &Observations, j: usize, n: usize) -> Result<Observations> {
    let pick = |v: &nalgebra::DVector<f64>| v.iter().skip(j).step_by(n).copied().collect::<Vec<_>>();
    match obs {
        Observations::Normal { y } => Observations::normal(pick(y)),
        Observations::Poisson { counts, expected } => Observations::poisson(pick(counts), pick(expected)),
    }
}

fn simulate_cmd(a: &SimulateArgs) -> Result<()> {
    let cfg = a.run.config(FitConfig::default())?;
    let run = cfg.run_config()?;
    let cells = if a.cells.eq_ignore_ascii_case("all") {
        DesignCell::all()
    } else {
        a.cells.split(',').map(|c| DesignCell::named(c.trim())).collect::<Result<_>>()?
    };
    let methods = Method::parse_list(&a.methods)?;
    let counts = io::resolve_data_path(&a.counts);
    let (ds, graph) = io::load_dataset(&counts, &a.adjacency)?;
    let e = ds.expected_counts()?;
    let expected = nalgebra::DVector::from_iterator(e.len(), (0..e.nrows()).flat_map(|i| e.row(i).iter().copied().collect::<Vec<_>>()));
    let ctx = SimulationContext::new(Arc::new(CarStructure::from_graph(&graph)?), expected)?;
    eprintln!("simulate: {} cells x {} methods x {} subjects", cells.len(), methods.len(), a.subjects);
    let tc = TournamentConfig { cells, methods, n_subjects: a.subjects, seed: run.seed, run: run.clone() };
    let result = run_tournament(&ctx, &tc)?;
    let mut out = OutputDir::create(&a.run.out)?;
    out.write_metrics(&result.rows)?;
    if !result.failures.is_empty() {
        let mut text = String::from("cell,method,subject,error\n");
        for f in &result.failures {
            text.push_str(&format!("{},{},{},\"{}\"\n", f.cell, f.method, f.subject, f.error.replace('"', "'")));
        }
        out.write("metrics", "failures.csv", text.as_bytes())?;
        eprintln!("simulate: {} fits failed", result.failures.len());
    }
    print!("{}", format_report(&result.rows));
    let config = serde_json::json!({
        "fit": to_json(&cfg),
        "cells": a.cells,
        "methods": a.methods,
        "subjects": a.subjects,
        "run": run,
    });
    out.finish("simulate", run.seed, config, &[counts, io::resolve_data_path(&a.adjacency)])?;
    Ok(())
}

fn metrics_cmd(a: &MetricsArgs) -> Result<()> {
    let rows = io::read_metrics_csv(&std::fs::read_to_string(&a.input)?)?;
    print!("{}", format_report(&rows));
    Ok(())
}

fn dic_cmd(a: &DicArgs) -> Result<()> {
    let data = load(&a.data, likelihood(a.data.likelihood.as_deref())?)?;
    let d = io::dic_from_draws_csv(&std::fs::read_to_string(&a.draws)?, &data.observations)?;
    println!("dbar,p_d,dic");
    println!("{},{},{}", d.dbar, d.p_d, d.dic);
    Ok(())
}

fn check_design_cmd(a: &CheckDesignArgs) -> Result<()> {
    let (graph, _) = read_graph(&a.adjacency)?;
    let car = CarStructure::from_graph(&graph)?;
    let n = if Path::new(&a.contrasts).is_file() { ContrastMatrix::read(&a.contrasts)?.n() } else { 3 };
    let design = SanovaDesign::build(&car, &contrasts(&a.contrasts, n)?)?;
    let w = design.layout().widths();
    println!("regions {}  groups {}  islands {}", car.n_regions(), n, car.islands());
    println!("orthonormality residual {:e}", design.orthonormality_residual());
    println!("block widths {}/{}/{}/{}", w[0], w[1], w[2], w[3]);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::FitSanova(a) => fit_sanova_cmd(a),
        Command::FitMcar(a) => fit_mcar_cmd(a),
        Command::FitCar(a) => fit_car_cmd(a),
        Command::Simulate(a) => simulate_cmd(a),
        Command::Metrics(a) => metrics_cmd(a),
        Command::Dic(a) => dic_cmd(a),
        Command::CheckDesign(a) => check_design_cmd(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
