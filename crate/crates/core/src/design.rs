//! Contrast matrices, the orthonormal two-way SANOVA design and the prior
//! precision it induces on the cell-level effects.
//!
//! Cells are ordered region-major: cell `(i, j)` (region `i`, group `j`)
//! lives at row `i * n + j`. With `H = H_A⁽⁺⁾` orthogonal (`n × n`) and
//! `V⁻` the CAR eigenvectors without `(1/√N)·1`, the design is
//!
//! ```text
//! X_D = [ (1/√N)1_N ⊗ H | V⁻ ⊗ h_0 | V⁻ ⊗ h_1 | … | V⁻ ⊗ h_{n-1} ]
//! ```
//!
//! which, when `h_0 = (1/√n)·1`, is the grand mean, the group main effect,
//! the region main effect and the region-by-group interactions.

use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::graph::CarStructure;
use crate::linalg::{kron, max_abs, polar_orthogonal};
use crate::{Error, Result};

const ORTHO_TOL: f64 = 1e-12;
/// Largest deviation from orthogonality accepted before polar projection.
const PROJECTION_LIMIT: f64 = 0.05;

/// An orthogonal `n × n` matrix whose columns define the group contrasts.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastMatrix {
    h: DMatrix<f64>,
    /// Largest entry change made when projecting onto the orthogonal group.
    projection_change: f64,
}

fn scaled_columns(rows: &[f64], scales: &[f64]) -> DMatrix<f64> {
    let n = scales.len();
    DMatrix::from_fn(n, n, |i, j| rows[i * n + j] * scales[j])
}

fn ha_scales() -> [f64; 3] {
    [1.0 / 3f64.sqrt(), 1.0 / 6f64.sqrt(), 1.0 / 2f64.sqrt()]
}

/// The printed two-decimal version of the "very incorrect" contrast matrix.
pub fn ham_printed() -> DMatrix<f64> {
    DMatrix::from_row_slice(3, 3, &[0.56, -0.64, -0.52, -0.53, -0.77, 0.36, -0.63, 0.07, -0.77])
}

impl ContrastMatrix {
    /// The generating contrast matrix of the simulation study.
    pub fn ha1() -> Self {
        let h = scaled_columns(&[1.0, -2.0, 0.0, 1.0, 1.0, -1.0, 1.0, 1.0, 1.0], &ha_scales());
        Self { h, projection_change: 0.0 }
    }

    /// Rows of `HA1` permuted; same first column.
    pub fn ha2() -> Self {
        let h = scaled_columns(&[1.0, 1.0, 1.0, 1.0, -2.0, 0.0, 1.0, 1.0, -1.0], &ha_scales());
        Self { h, projection_change: 0.0 }
    }

    /// The printed matrix with no column proportional to `1`, projected to
    /// the nearest orthogonal matrix.
    pub fn ham() -> Self {
        Self::from_matrix_projected(ham_printed()).expect("printed matrix is nearly orthogonal")
    }

    /// Orthonormal Helmert basis with leading column `(1/√n)·1`.
    pub fn helmert(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidContrast(format!("helmert needs n >= 2, got {n}")));
        }
        let mut h = DMatrix::zeros(n, n);
        let lead = 1.0 / (n as f64).sqrt();
        for i in 0..n {
            h[(i, 0)] = lead;
        }
        for k in 1..n {
            let norm = ((k * (k + 1)) as f64).sqrt();
            for i in 0..k {
                h[(i, k)] = 1.0 / norm;
            }
            h[(k, k)] = -(k as f64) / norm;
        }
        Ok(Self { h, projection_change: 0.0 })
    }

    /// `HA1`, `HA2`, `HAM` (case-insensitive) or `helmert` with `n` groups.
    pub fn named(name: &str, n: usize) -> Result<Self> {
        let c = match name.to_ascii_lowercase().as_str() {
            "ha1" => Self::ha1(),
            "ha2" => Self::ha2(),
            "ham" => Self::ham(),
            "helmert" => return Self::helmert(n),
            _ => return Err(Error::UnknownContrast(name.to_string())),
        };
        if c.n() != n {
            return Err(Error::InvalidContrast(format!("{name} is 3x3 but {n} groups requested")));
        }
        Ok(c)
    }

    /// Accepts an exactly orthogonal matrix (to 1e-12).
    pub fn from_matrix(h: DMatrix<f64>) -> Result<Self> {
        let dev = orthogonality_defect(&h)?;
        if dev > ORTHO_TOL {
            return Err(Error::InvalidContrast(format!("H'H deviates from I by {dev:.3e}")));
        }
        Ok(Self { h, projection_change: 0.0 })
    }

    /// Accepts a nearly orthogonal matrix and replaces it by its orthogonal
    /// polar factor.
    pub fn from_matrix_projected(h: DMatrix<f64>) -> Result<Self> {
        let dev = orthogonality_defect(&h)?;
        if dev <= ORTHO_TOL {
            return Ok(Self { h, projection_change: 0.0 });
        }
        if dev > PROJECTION_LIMIT {
            return Err(Error::InvalidContrast(format!(
                "H'H deviates from I by {dev:.3e}, too far to project"
            )));
        }
        let p = polar_orthogonal(&h);
        let change = max_abs(&(&p - &h));
        Ok(Self { h: p, projection_change: change })
    }

    /// Reads a row-per-line, whitespace-separated square matrix.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_matrix_projected(parse_matrix(&text)?)
    }

    pub fn n(&self) -> usize {
        self.h.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn column(&self, j: usize) -> DVector<f64> {
        self.h.column(j).into_owned()
    }

    /// The contrast block `H_CA` (all columns but the first).
    pub fn contrasts(&self) -> DMatrix<f64> {
        self.h.columns(1, self.n() - 1).into_owned()
    }

    pub fn projection_change(&self) -> f64 {
        self.projection_change
    }

    /// Whether the first column is `(1/√n)·1`, so the other columns are
    /// contrasts.
    pub fn is_centered(&self) -> bool {
        let lead = 1.0 / (self.n() as f64).sqrt();
        self.h.column(0).iter().all(|&x| (x - lead).abs() < 1e-12)
    }
}

fn orthogonality_defect(h: &DMatrix<f64>) -> Result<f64> {
    if h.nrows() != h.ncols() || h.nrows() == 0 {
        return Err(Error::InvalidContrast(format!("need a non-empty square matrix, got {:?}", h.shape())));
    }
    let n = h.nrows();
    Ok(max_abs(&(h.transpose() * h - DMatrix::identity(n, n))))
}

/// Parses a whitespace-separated matrix, one row per line, `#` comments.
pub fn parse_matrix(text: &str) -> Result<DMatrix<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::MalformedRow { row: k + 1, message: format!("bad number `{t}`") })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let nr = rows.len();
    let nc = rows.first().map_or(0, |r| r.len());
    if nr == 0 || rows.iter().any(|r| r.len() != nc) {
        return Err(Error::Dimension("matrix rows must be non-empty and of equal length".into()));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

/// Column ranges of the four effect blocks of the design.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    pub n_regions: usize,
    pub n_groups: usize,
}

impl BlockLayout {
    pub fn grand_mean(&self) -> Range<usize> {
        0..1
    }

    pub fn group_main(&self) -> Range<usize> {
        1..self.n_groups
    }

    /// Grand mean plus group main effect: the unsmoothed columns.
    pub fn fixed(&self) -> Range<usize> {
        0..self.n_groups
    }

    pub fn region_main(&self) -> Range<usize> {
        let s = self.n_groups;
        s..s + self.n_regions - 1
    }

    /// Interaction block `j` for `j = 1..n_groups`.
    pub fn interaction(&self, j: usize) -> Range<usize> {
        assert!(j >= 1 && j < self.n_groups);
        let w = self.n_regions - 1;
        let s = self.n_groups + j * w;
        s..s + w
    }

    /// Smoothed block `b`: `0` is the region main effect, `b ≥ 1` the
    /// interaction groups. Each smoothed block has its own precision.
    pub fn smoothed(&self, b: usize) -> Range<usize> {
        if b == 0 {
            self.region_main()
        } else {
            self.interaction(b)
        }
    }

    pub fn widths(&self) -> [usize; 4] {
        let w = self.n_regions - 1;
        [1, self.n_groups - 1, w, w * (self.n_groups - 1)]
    }

    pub fn total(&self) -> usize {
        self.n_regions * self.n_groups
    }
}

/// The square orthonormal design `X_D`.
#[derive(Debug, Clone)]
pub struct SanovaDesign {
    x: DMatrix<f64>,
    layout: BlockLayout,
    car: CarStructure,
    contrasts: ContrastMatrix,
}

impl SanovaDesign {
    pub fn build(car: &CarStructure, contrasts: &ContrastMatrix) -> Result<Self> {
        let nr = car.n_regions();
        let ng = contrasts.n();
        if nr == 0 || ng == 0 {
            return Err(Error::Dimension(format!("need at least one region and one group, got N={nr}, n={ng}")));
        }
        let layout = BlockLayout { n_regions: nr, n_groups: ng };
        let mut x = DMatrix::zeros(nr * ng, nr * ng);
        let mean_col = DMatrix::from_element(nr, 1, 1.0 / (nr as f64).sqrt());
        x.columns_mut(0, ng).copy_from(&kron(&mean_col, contrasts.matrix()));
        let vm = car.v_minus();
        for b in 0..ng {
            let h = DMatrix::from_column_slice(ng, 1, contrasts.column(b).as_slice());
            let r = layout.smoothed(b);
            x.columns_mut(r.start, r.len()).copy_from(&kron(&vm, &h));
        }
        Ok(Self { x, layout, car: car.clone(), contrasts: contrasts.clone() })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    pub fn car(&self) -> &CarStructure {
        &self.car
    }

    pub fn contrasts(&self) -> &ContrastMatrix {
        &self.contrasts
    }

    pub fn n_cells(&self) -> usize {
        self.layout.total()
    }

    /// `max |X_D'X_D − I|`.
    pub fn orthonormality_residual(&self) -> f64 {
        let n = self.n_cells();
        max_abs(&(self.x.transpose() * &self.x - DMatrix::identity(n, n)))
    }
}

/// Prior precision of the cell-level effects implied by independent
/// `N(0, τ_b D⁻)` priors on the smoothed blocks:
/// `Q ⊗ (H diag(τ) H')`.
pub fn induced_phi_precision(car: &CarStructure, contrasts: &ContrastMatrix, tau: &[f64]) -> Result<DMatrix<f64>> {
    if tau.len() != contrasts.n() {
        return Err(Error::Dimension(format!("{} precisions for {} groups", tau.len(), contrasts.n())));
    }
    if let Some(t) = tau.iter().find(|&&t| !(t > 0.0)) {
        return Err(Error::InvalidState(format!("smoothing precision {t} is not positive")));
    }
    let h = contrasts.matrix();
    let m = h * DMatrix::from_diagonal(&DVector::from_column_slice(tau)) * h.transpose();
    Ok(kron(car.q(), &m))
}

/// MCAR prior precision `Q ⊗ Ω`.
pub fn mcar_precision(q: &DMatrix<f64>, omega: &DMatrix<f64>) -> DMatrix<f64> {
    kron(q, omega)
}

/// The group-space rotation `B = H_true · H_fit⁻¹` that carries a fit with
/// `H_fit` onto a fit with `H_true`, and the MCAR eigenvector matrix
/// `V_Ω = B · H_true` of the data-generating prior seen after that rotation.
#[derive(Debug, Clone)]
pub struct EquivalenceRotation {
    pub b: DMatrix<f64>,
    pub v_omega: DMatrix<f64>,
}

pub fn equivalence_rotation(h_true: &DMatrix<f64>, h_fit: &DMatrix<f64>) -> Result<EquivalenceRotation> {
    let inv = h_fit
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidContrast("fitted contrast matrix is singular".into()))?;
    let b = h_true * inv;
    let v_omega = &b * h_true;
    Ok(EquivalenceRotation { b, v_omega })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::RegionGraph;
    use crate::linalg::relative_frobenius;

    fn path_car(n: usize) -> CarStructure {
        let pairs: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        CarStructure::from_graph(&RegionGraph::from_pairs(n, &pairs).unwrap()).unwrap()
    }

    #[test]
    fn ha1_constant() {
        let s3 = 1.0 / 3f64.sqrt();
        let s6 = 1.0 / 6f64.sqrt();
        let s2 = 1.0 / 2f64.sqrt();
        let expected = DMatrix::from_row_slice(3, 3, &[s3, -2.0 * s6, 0.0, s3, s6, -s2, s3, s6, s2]);
        assert!(max_abs(&(ContrastMatrix::ha1().matrix() - expected)) < 1e-15);
        assert!(ContrastMatrix::ha1().is_centered());
        assert!(ContrastMatrix::ha2().is_centered());
    }

    #[test]
    fn ham_is_projected_close_to_print() {
        let ham = ContrastMatrix::ham();
        assert!(!ham.is_centered());
        assert!(ham.projection_change() > 0.0 && ham.projection_change() < 0.01);
        assert!(max_abs(&(ham.matrix() - ham_printed())) < 0.01);
        let eye = DMatrix::<f64>::identity(3, 3);
        assert!(max_abs(&(ham.matrix().transpose() * ham.matrix() - eye)) < 1e-12);
    }

    #[test]
    fn helmert_two() {
        let s = 1.0 / 2f64.sqrt();
        let h = ContrastMatrix::helmert(2).unwrap();
        assert!(max_abs(&(h.matrix() - DMatrix::from_row_slice(2, 2, &[s, s, s, -s]))) < 1e-15);
        assert!(ContrastMatrix::helmert(1).is_err());
    }

    #[test]
    fn helmert_is_orthonormal_with_zero_sum_contrasts() {
        for n in 2..8 {
            let h = ContrastMatrix::helmert(n).unwrap();
            let eye = DMatrix::<f64>::identity(n, n);
            assert!(max_abs(&(h.matrix().transpose() * h.matrix() - eye)) < 1e-12);
            let sums = DMatrix::from_element(1, n, 1.0) * h.contrasts();
            assert!(max_abs(&sums) < 1e-12);
        }
    }

    #[test]
    fn unknown_name_is_rejected() {
        assert!(matches!(ContrastMatrix::named("HA9", 3), Err(Error::UnknownContrast(_))));
        assert!(ContrastMatrix::named("ha1", 4).is_err());
        assert!(ContrastMatrix::named("Helmert", 4).is_ok());
    }

    #[test]
    fn far_from_orthogonal_is_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        assert!(ContrastMatrix::from_matrix_projected(m.clone()).is_err());
        assert!(ContrastMatrix::from_matrix(m).is_err());
    }

    #[test]
    fn hand_expanded_two_by_two_design() {
        // N = 2 path: V = [[s, s], [-s, s]], V⁻ = (s, -s)'. Helmert(2) H = [[s, s], [s, -s]].
        // Columns: (1/√2)1 ⊗ H gives (1/2)(1,1,1,1) and (1/2)(1,-1,1,-1);
        // V⁻ ⊗ h0 gives (1/2)(1,1,-1,-1); V⁻ ⊗ h1 gives (1/2)(1,-1,-1,1).
        let design = SanovaDesign::build(&path_car(2), &ContrastMatrix::helmert(2).unwrap()).unwrap();
        #[rustfmt::skip]
        let expected = DMatrix::from_row_slice(4, 4, &[
            0.5,  0.5,  0.5,  0.5,
            0.5, -0.5,  0.5, -0.5,
            0.5,  0.5, -0.5, -0.5,
            0.5, -0.5, -0.5,  0.5,
        ]);
        assert!(max_abs(&(design.x() - expected)) < 1e-15);
    }

    #[test]
    fn block_widths_and_orthonormality() {
        let car = path_car(6);
        let d = SanovaDesign::build(&car, &ContrastMatrix::ha1()).unwrap();
        assert_eq!(d.layout().widths(), [1, 2, 5, 10]);
        assert!(d.orthonormality_residual() < 1e-10);
        let first = d.x().column(0);
        assert!(first.iter().all(|&x| (x - 1.0 / 18f64.sqrt()).abs() < 1e-15));
    }

    #[test]
    fn equal_taus_give_scaled_q_kron_identity() {
        let car = path_car(4);
        let p = induced_phi_precision(&car, &ContrastMatrix::ha1(), &[2.5, 2.5, 2.5]).unwrap();
        let expected = kron(car.q(), &DMatrix::identity(3, 3)) * 2.5;
        assert!(relative_frobenius(&p, &expected) < 1e-12);
        assert!(induced_phi_precision(&car, &ContrastMatrix::ha1(), &[1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn three_region_propagation_oracle() {
        // Brute force: covariance of φ = K Θ_s with Θ_s ~ N(0, Λ⁻¹) on the
        // non-null directions, then pseudo-inverse.
        let car = path_car(3);
        let h = ContrastMatrix::helmert(2).unwrap();
        let tau = [1.0, 2.0];
        let d = SanovaDesign::build(&car, &h).unwrap();
        let l = d.layout();
        let dm = car.d_minus();
        let mut cov = DMatrix::zeros(6, 6);
        for b in 0..2 {
            let r = l.smoothed(b);
            for (k, col) in r.clone().enumerate() {
                let x = d.x().column(col);
                cov += (x * x.transpose()) / (tau[b] * dm[k]);
            }
        }
        let pinv = cov.pseudo_inverse(1e-10).unwrap();
        let p = induced_phi_precision(&car, &h, &tau).unwrap();
        assert!(relative_frobenius(&p, &pinv) < 1e-10);
    }

    #[test]
    fn printed_v_omega_is_reproduced() {
        let rot = equivalence_rotation(ContrastMatrix::ha1().matrix(), &ham_printed()).unwrap();
        let printed = DMatrix::from_row_slice(3, 3, &[0.43, -0.74, -0.52, -0.13, -0.63, 0.77, -0.89, -0.26, -0.37]);
        let rounded = rot.v_omega.map(|x| (x * 100.0).round() / 100.0);
        assert_eq!(rounded, printed);
    }

    #[test]
    fn parse_matrix_file_format() {
        let m = parse_matrix("# comment\n1 0\n0 1\n").unwrap();
        assert_eq!(m, DMatrix::identity(2, 2));
        assert!(parse_matrix("1 0\n0\n").is_err());
        assert!(parse_matrix("1 a\n").is_err());
    }
}
