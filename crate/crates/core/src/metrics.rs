//! Simulation outcome measures (AMSE, MBIAS, PI rate) and DIC.
//!
//! Quantiles use linear interpolation between order statistics
//! (Hyndman–Fan type 7): for sorted `x₀ ≤ … ≤ x_{n−1}` and level `p`,
//! `h = (n−1)p` and the value is `x_⌊h⌋ + (h − ⌊h⌋)(x_⌊h⌋+1 − x_⌊h⌋)`.

use std::fmt::Write as _;

use serde::Serialize;

use crate::{Error, Result};

/// Type-7 quantile of unsorted data.
pub fn quantile(data: &[f64], p: f64) -> Result<f64> {
    let mut v = data.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, p)
}

/// Type-7 quantile of data already sorted ascending.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::InvalidData("quantile of an empty sample".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidData(format!("quantile level {p} outside [0, 1]")));
    }
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    Ok(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

fn check_shape(estimates: &[Vec<f64>], truths: &[Vec<f64>]) -> Result<usize> {
    if estimates.len() != truths.len() {
        return Err(Error::Dimension(format!("{} estimate rows vs {} truth rows", estimates.len(), truths.len())));
    }
    let cells = estimates.first().map_or(0, Vec::len);
    for (e, t) in estimates.iter().zip(truths) {
        if e.len() != cells || t.len() != cells {
            return Err(Error::Dimension("replicates have different numbers of cells".into()));
        }
    }
    if cells == 0 {
        return Err(Error::Dimension("no cells".into()));
    }
    Ok(cells)
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

/// Average over replicates of the per-replicate mean squared error, and
/// its Monte Carlo standard error `sd / √L`.
pub fn amse(estimates: &[Vec<f64>], truths: &[Vec<f64>]) -> Result<(f64, f64)> {
    check_shape(estimates, truths)?;
    if estimates.len() < 2 {
        return Err(Error::InvalidData("AMSE needs at least 2 replicates".into()));
    }
    let mse: Vec<f64> = estimates
        .iter()
        .zip(truths)
        .map(|(e, t)| e.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / e.len() as f64)
        .collect();
    let (m, sd) = mean_sd(&mse);
    Ok((m, sd / (mse.len() as f64).sqrt()))
}

/// Per-cell bias of the replicate-averaged estimate.
pub fn cell_bias(estimates: &[Vec<f64>], truths: &[Vec<f64>]) -> Result<Vec<f64>> {
    let cells = check_shape(estimates, truths)?;
    if estimates.is_empty() {
        return Err(Error::InvalidData("no replicates".into()));
    }
    let l = estimates.len() as f64;
    Ok((0..cells)
        .map(|c| estimates.iter().zip(truths).map(|(e, t)| e[c] - t[c]).sum::<f64>() / l)
        .collect())
}

/// 2.5%, 50% and 97.5% quantiles of the per-cell biases.
pub fn mbias(estimates: &[Vec<f64>], truths: &[Vec<f64>]) -> Result<[f64; 3]> {
    let mut b = cell_bias(estimates, truths)?;
    b.sort_by(f64::total_cmp);
    Ok([quantile_sorted(&b, 0.025)?, quantile_sorted(&b, 0.5)?, quantile_sorted(&b, 0.975)?])
}

/// Fraction of (replicate, cell) pairs whose interval contains the truth.
pub fn pi_rate(intervals: &[Vec<(f64, f64)>], truths: &[Vec<f64>]) -> Result<f64> {
    if intervals.len() != truths.len() || intervals.is_empty() {
        return Err(Error::Dimension("interval and truth replicate counts differ".into()));
    }
    let mut hit = 0usize;
    let mut total = 0usize;
    for (iv, t) in intervals.iter().zip(truths) {
        if iv.len() != t.len() {
            return Err(Error::Dimension("interval and truth cell counts differ".into()));
        }
        for (&(lo, hi), &x) in iv.iter().zip(t) {
            if lo > hi {
                return Err(Error::InvalidData(format!("interval lower bound {lo} exceeds upper bound {hi}")));
            }
            hit += usize::from(lo <= x && x <= hi);
            total += 1;
        }
    }
    Ok(hit as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Dic {
    pub dbar: f64,
    pub p_d: f64,
    pub dic: f64,
}

/// `D = −2·loglik`; `p_D = D̄ − D(plug-in)`; `DIC = D̄ + p_D`.
pub fn dic(loglik_draws: &[f64], loglik_at_mean: f64) -> Result<Dic> {
    if loglik_draws.len() < 10 {
        return Err(Error::InvalidData(format!("DIC needs at least 10 draws, got {}", loglik_draws.len())));
    }
    let dbar = -2.0 * loglik_draws.iter().sum::<f64>() / loglik_draws.len() as f64;
    let p_d = dbar + 2.0 * loglik_at_mean;
    Ok(Dic { dbar, p_d, dic: dbar + p_d })
}

/// One row of a per-cell method comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodMetrics {
    pub cell: String,
    pub method: String,
    pub replicates: usize,
    pub failures: usize,
    pub amse: f64,
    pub amse_mcse: f64,
    pub mbias: [f64; 3],
    pub pi_rate: f64,
}

impl MethodMetrics {
    pub fn compute(
        cell: &str,
        method: &str,
        estimates: &[Vec<f64>],
        intervals: &[Vec<(f64, f64)>],
        truths: &[Vec<f64>],
        failures: usize,
    ) -> Result<Self> {
        let (amse, amse_mcse) = amse(estimates, truths)?;
        Ok(Self {
            cell: cell.to_string(),
            method: method.to_string(),
            replicates: estimates.len(),
            failures,
            amse,
            amse_mcse,
            mbias: mbias(estimates, truths)?,
            pi_rate: pi_rate(intervals, truths)?,
        })
    }
}

/// Methods as rows, cells as columns, one value per entry.
pub fn format_table(rows: &[MethodMetrics], value: impl Fn(&MethodMetrics) -> String) -> String {
    let mut cells: Vec<&str> = Vec::new();
    let mut methods: Vec<&str> = Vec::new();
    for r in rows {
        if !cells.contains(&r.cell.as_str()) {
            cells.push(&r.cell);
        }
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let width = methods.iter().map(|m| m.len()).max().unwrap_or(6).max(6);
    let mut out = String::new();
    let _ = write!(out, "{:<width$}", "Model");
    for c in &cells {
        let _ = write!(out, " {c:>16}");
    }
    out.push('\n');
    for m in &methods {
        let _ = write!(out, "{m:<width$}");
        for c in &cells {
            let v = rows.iter().find(|r| r.cell == *c && r.method == *m).map(&value).unwrap_or_else(|| "-".into());
            let _ = write!(out, " {v:>16}");
        }
        out.push('\n');
    }
    out
}

/// Aligned AMSE, MBIAS and PI-rate tables.
pub fn format_report(rows: &[MethodMetrics]) -> String {
    let mut out = String::from("AMSE (mcse)\n");
    out += &format_table(rows, |r| format!("{:.3} ({:.3})", r.amse, r.amse_mcse));
    out += "\nMBIAS median [2.5%, 97.5%]\n";
    out += &format_table(rows, |r| format!("{:.2} [{:.2},{:.2}]", r.mbias[1], r.mbias[0], r.mbias[2]));
    out += "\nPI rate\n";
    out += &format_table(rows, |r| format!("{:.3}", r.pi_rate));
    out
}

/// Comma-delimited version of the metrics rows.
pub fn format_csv(rows: &[MethodMetrics]) -> String {
    let mut out = String::from("cell,method,replicates,failures,amse,amse_mcse,mbias_025,mbias_50,mbias_975,pi_rate\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.cell, r.method, r.replicates, r.failures, r.amse, r.amse_mcse, r.mbias[0], r.mbias[1], r.mbias[2], r.pi_rate
        );
    }
    out
}
