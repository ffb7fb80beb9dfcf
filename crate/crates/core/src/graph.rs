//! Areal adjacency graphs, the intrinsic CAR precision matrix and its
//! spectral reparameterisation.
//!
//! For a graph with `N` regions and `G` connected components ("islands") the
//! intrinsic CAR precision `Q` has `Q_ii = m_i` (neighbour count) and
//! `Q_ij = -1` for neighbours. `Q` is positive semi-definite with rank `N - G`.
//! Writing `Q = V diag(D) V'` and `Θ = V'φ` turns a CAR prior with precision
//! `τQ` on `φ` into independent normal priors with precisions `τ D_k` on the
//! entries of `Θ`; the entry paired with `(1/√N)·1` gets zero precision and
//! plays the role of the grand mean.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::linalg::{relative_frobenius, sorted_symmetric_eigen};
use crate::{Error, Result};

/// Relative threshold below which an eigenvalue of `Q` counts as zero.
pub const ZERO_EIGEN_TOL: f64 = 1e-8;

/// Undirected neighbour structure over regions `0..N`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionGraph {
    neighbors: Vec<Vec<usize>>,
}

/// An adjacency entry that was present in only one direction and has been
/// mirrored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AsymmetryWarning {
    pub listed_by: usize,
    pub missing_from: usize,
}

impl RegionGraph {
    /// Builds a graph from undirected neighbour pairs. Duplicates are merged.
    pub fn from_pairs(n_regions: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut sets = vec![BTreeSet::new(); n_regions];
        for &(a, b) in pairs {
            check_index(a, n_regions)?;
            check_index(b, n_regions)?;
            if a == b {
                return Err(Error::SelfLoop(a));
            }
            sets[a].insert(b);
            sets[b].insert(a);
        }
        Ok(Self { neighbors: sets.into_iter().map(|s| s.into_iter().collect()).collect() })
    }

    /// Builds a graph from per-region neighbour lists. Entries listed in one
    /// direction only are mirrored and reported.
    pub fn from_neighbor_lists(lists: &[Vec<usize>]) -> Result<(Self, Vec<AsymmetryWarning>)> {
        let n = lists.len();
        let mut sets = vec![BTreeSet::new(); n];
        for (i, list) in lists.iter().enumerate() {
            for &j in list {
                check_index(j, n)?;
                if i == j {
                    return Err(Error::SelfLoop(i));
                }
                sets[i].insert(j);
            }
        }
        let mut warnings = Vec::new();
        for i in 0..n {
            let listed: Vec<usize> = sets[i].iter().copied().collect();
            for j in listed {
                if !sets[j].contains(&i) {
                    warnings.push(AsymmetryWarning { listed_by: i, missing_from: j });
                }
            }
        }
        for w in &warnings {
            sets[w.missing_from].insert(w.listed_by);
        }
        let graph = Self { neighbors: sets.into_iter().map(|s| s.into_iter().collect()).collect() };
        Ok((graph, warnings))
    }

    pub fn n_regions(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    /// Each undirected edge once, as `(i, j)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, nb) in self.neighbors.iter().enumerate() {
            out.extend(nb.iter().filter(|&&j| j > i).map(|&j| (i, j)));
        }
        out
    }

    /// Component label for every region, labels numbered in order of first
    /// appearance.
    pub fn component_labels(&self) -> Vec<usize> {
        let n = self.n_regions();
        let mut labels = vec![usize::MAX; n];
        let mut next = 0;
        let mut queue = VecDeque::new();
        for start in 0..n {
            if labels[start] != usize::MAX {
                continue;
            }
            labels[start] = next;
            queue.push_back(start);
            while let Some(i) = queue.pop_front() {
                for &j in &self.neighbors[i] {
                    if labels[j] == usize::MAX {
                        labels[j] = next;
                        queue.push_back(j);
                    }
                }
            }
            next += 1;
        }
        labels
    }

    /// Number of connected components (`G`).
    pub fn count_islands(&self) -> usize {
        self.component_labels().into_iter().max().map_or(0, |m| m + 1)
    }

    /// Induced subgraph on `regions`, renumbered in the given order.
    pub fn subgraph(&self, regions: &[usize]) -> Result<Self> {
        let n = self.n_regions();
        let mut map = vec![usize::MAX; n];
        for (new, &old) in regions.iter().enumerate() {
            check_index(old, n)?;
            map[old] = new;
        }
        let neighbors = regions
            .iter()
            .map(|&old| {
                let mut nb: Vec<usize> = self.neighbors[old]
                    .iter()
                    .filter(|&&j| map[j] != usize::MAX)
                    .map(|&j| map[j])
                    .collect();
                nb.sort_unstable();
                nb
            })
            .collect();
        Ok(Self { neighbors })
    }

    /// Parses the line-oriented adjacency format `id: n1 n2 ...` with
    /// 0-based ids and `#` comments.
    pub fn parse_adjacency(text: &str) -> Result<(Self, Vec<AsymmetryWarning>)> {
        let mut entries: Vec<(usize, Vec<usize>)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::AdjacencyParse { line: lineno + 1, message };
            let (id, rest) =
                line.split_once(':').ok_or_else(|| err("expected `id: neighbours`".into()))?;
            let id: usize = id.trim().parse().map_err(|_| err(format!("bad region id `{}`", id.trim())))?;
            let nb = rest
                .split_whitespace()
                .map(|t| t.parse::<usize>().map_err(|_| err(format!("bad neighbour id `{t}`"))))
                .collect::<Result<Vec<_>>>()?;
            entries.push((id, nb));
        }
        let n = entries.len();
        let mut lists: Vec<Option<Vec<usize>>> = vec![None; n];
        for (id, nb) in entries {
            check_index(id, n)?;
            if lists[id].is_some() {
                return Err(Error::AdjacencyParse {
                    line: 0,
                    message: format!("region {id} listed twice"),
                });
            }
            lists[id] = Some(nb);
        }
        let lists: Vec<Vec<usize>> = lists.into_iter().map(|l| l.unwrap_or_default()).collect();
        Self::from_neighbor_lists(&lists)
    }

    pub fn read_adjacency(path: impl AsRef<Path>) -> Result<(Self, Vec<AsymmetryWarning>)> {
        Self::parse_adjacency(&std::fs::read_to_string(path)?)
    }

    pub fn to_adjacency_string(&self) -> String {
        let mut out = String::new();
        for (i, nb) in self.neighbors.iter().enumerate() {
            let ids: Vec<String> = nb.iter().map(|j| j.to_string()).collect();
            let _ = writeln!(out, "{i}: {}", ids.join(" "));
        }
        out
    }
}

fn check_index(i: usize, n: usize) -> Result<()> {
    if i >= n {
        Err(Error::RegionOutOfRange { index: i, n_regions: n })
    } else {
        Ok(())
    }
}

/// Intrinsic CAR precision (`α = 1`): neighbour counts on the diagonal and
/// `-1` for each neighbour pair.
pub fn car_precision(graph: &RegionGraph) -> DMatrix<f64> {
    let n = graph.n_regions();
    let mut q = DMatrix::zeros(n, n);
    for i in 0..n {
        q[(i, i)] = graph.degree(i) as f64;
        for &j in graph.neighbors(i) {
            q[(i, j)] = -1.0;
        }
    }
    q
}

/// `Q` together with its spectral factors.
#[derive(Debug, Clone)]
pub struct CarStructure {
    q: DMatrix<f64>,
    v: DMatrix<f64>,
    d: DVector<f64>,
    islands: usize,
}

impl CarStructure {
    pub fn from_graph(graph: &RegionGraph) -> Result<Self> {
        spectral_car(&car_precision(graph), graph.count_islands())
    }

    pub fn n_regions(&self) -> usize {
        self.q.nrows()
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    /// Orthogonal eigenvectors; the last column is `(1/√N)·1`.
    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    /// Eigenvalues in descending order; the last `G` are exactly zero.
    pub fn d(&self) -> &DVector<f64> {
        &self.d
    }

    pub fn islands(&self) -> usize {
        self.islands
    }

    /// `N - G`, the rank of `Q` and the CAR exponent on `τ`.
    pub fn rank(&self) -> usize {
        self.n_regions() - self.islands
    }

    /// `V` without its last column.
    pub fn v_minus(&self) -> DMatrix<f64> {
        self.v.columns(0, self.n_regions() - 1).into_owned()
    }

    /// `D` without its last entry.
    pub fn d_minus(&self) -> DVector<f64> {
        self.d.rows(0, self.n_regions() - 1).into_owned()
    }

    /// CAR log-density kernel `((N-G)/2)·log τ − (τ/2)·φ'Qφ`.
    pub fn log_density(&self, phi: &DVector<f64>, tau: f64) -> f64 {
        let quad = phi.dot(&(&self.q * phi));
        0.5 * self.rank() as f64 * tau.ln() - 0.5 * tau * quad
    }
}

/// Spectral decomposition of an intrinsic CAR precision with `islands`
/// zero eigenvalues. Eigenvalues are sorted descending, the exact vector
/// `(1/√N)·1` is installed as the last column of `V`, the remaining null
/// vectors are re-orthonormalised against it, and each column's first
/// non-negligible entry is made positive.
pub fn spectral_car(q: &DMatrix<f64>, islands: usize) -> Result<CarStructure> {
    let n = q.nrows();
    if n == 0 || q.ncols() != n {
        return Err(Error::Dimension(format!("Q must be square and non-empty, got {:?}", q.shape())));
    }
    let (mut d, mut v) = sorted_symmetric_eigen(q);
    let dmax = d.iter().fold(0.0_f64, |a, &x| a.max(x.abs()));
    let thresh = if dmax > 0.0 { ZERO_EIGEN_TOL * dmax } else { f64::MIN_POSITIVE };
    let nullity = d.iter().filter(|x| x.abs() < thresh).count();
    if nullity != islands || islands == 0 {
        return Err(Error::NullityMismatch { expected: islands, found: nullity });
    }
    let first_null = n - islands;
    for k in first_null..n {
        d[k] = 0.0;
    }

    let ones = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    // The null space of Q is spanned by the island indicators. Building it
    // from them is exact, whereas eigenvectors inside a repeated zero
    // eigenvalue can be poorly resolved by the iterative solver.
    let labels = pattern_components(q);
    let n_comp = labels.iter().max().map_or(0, |m| m + 1);
    if n_comp != islands {
        return Err(Error::NullityMismatch { expected: islands, found: n_comp });
    }
    let mut indicators = DMatrix::zeros(n, islands);
    for (i, &l) in labels.iter().enumerate() {
        indicators[(i, l)] = 1.0;
    }
    for mut col in indicators.column_iter_mut() {
        let norm = col.norm();
        col /= norm;
    }
    if islands > 1 {
        let proj = &indicators - &ones * (ones.transpose() * &indicators);
        let svd = proj.svd(true, false);
        let u = svd.u.expect("svd u");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        for (slot, &k) in order.iter().take(islands - 1).enumerate() {
            let mut col = u.column(k).into_owned();
            col -= &ones * ones.dot(&col);
            let norm = col.norm();
            v.set_column(first_null + slot, &(col / norm));
        }
    }
    // Re-orthonormalise the non-null eigenvectors against the exact null
    // space and each other (modified Gram-Schmidt).
    for k in 0..first_null {
        let mut col = v.column(k).into_owned();
        col -= &indicators * (indicators.transpose() * &col);
        for j in 0..k {
            let prev = v.column(j).into_owned();
            col -= &prev * prev.dot(&col);
        }
        let norm = col.norm();
        v.set_column(k, &(col / norm));
    }
    v.set_column(n - 1, &ones);

    for k in 0..n - 1 {
        let mut col = v.column_mut(k);
        if let Some(first) = col.iter().copied().find(|x| x.abs() > 1e-12) {
            if first < 0.0 {
                col.neg_mut();
            }
        }
    }

    Ok(CarStructure { q: q.clone(), v, d, islands })
}

/// Connected components of the off-diagonal sparsity pattern of `q`.
fn pattern_components(q: &DMatrix<f64>) -> Vec<usize> {
    let n = q.nrows();
    let mut labels = vec![usize::MAX; n];
    let mut next = 0;
    for start in 0..n {
        if labels[start] != usize::MAX {
            continue;
        }
        labels[start] = next;
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            for j in 0..n {
                if j != i && q[(i, j)] != 0.0 && labels[j] == usize::MAX {
                    labels[j] = next;
                    queue.push_back(j);
                }
            }
        }
        next += 1;
    }
    labels
}

/// Relative Frobenius residual of `V diag(D) V'` against `Q`.
pub fn reconstruction_error(car: &CarStructure) -> f64 {
    let recon = car.v() * DMatrix::from_diagonal(car.d()) * car.v().transpose();
    relative_frobenius(&recon, car.q())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs;
    use proptest::prelude::*;

    fn path(n: usize) -> RegionGraph {
        let pairs: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        RegionGraph::from_pairs(n, &pairs).unwrap()
    }

    #[test]
    fn single_pair_is_symmetric() {
        let g = RegionGraph::from_pairs(2, &[(0, 1)]).unwrap();
        assert_eq!(g.neighbors(0), &[1]);
        assert_eq!(g.neighbors(1), &[0]);
    }

    #[test]
    fn empty_pairs_give_isolated_regions() {
        let g = RegionGraph::from_pairs(3, &[]).unwrap();
        assert!((0..3).all(|i| g.degree(i) == 0));
        assert_eq!(g.count_islands(), 3);
    }

    #[test]
    fn self_loop_and_out_of_range_are_rejected() {
        assert!(matches!(RegionGraph::from_pairs(2, &[(1, 1)]), Err(Error::SelfLoop(1))));
        assert!(matches!(
            RegionGraph::from_pairs(2, &[(0, 2)]),
            Err(Error::RegionOutOfRange { index: 2, .. })
        ));
    }

    #[test]
    fn asymmetric_lists_are_mirrored_with_warning() {
        let (g, warnings) = RegionGraph::from_neighbor_lists(&[vec![1], vec![], vec![1]]).unwrap();
        assert_eq!(g.neighbors(1), &[0, 2]);
        assert_eq!(warnings.len(), 2);
        assert_eq!(warnings[0], AsymmetryWarning { listed_by: 0, missing_from: 1 });
    }

    #[test]
    fn duplicate_pairs_are_merged() {
        let g = RegionGraph::from_pairs(3, &[(0, 1), (1, 0), (0, 1), (1, 2)]).unwrap();
        assert_eq!(g.edges(), vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn parse_adjacency_with_comments() {
        let text = "# header\n0: 1 # a\n1: 0 2\n\n2: 1\n";
        let (g, w) = RegionGraph::parse_adjacency(text).unwrap();
        assert!(w.is_empty());
        assert_eq!(g, path(3));
        let (again, _) = RegionGraph::parse_adjacency(&g.to_adjacency_string()).unwrap();
        assert_eq!(again, g);
    }

    #[test]
    fn parse_adjacency_rejects_bad_tokens() {
        assert!(RegionGraph::parse_adjacency("0: x\n").is_err());
        assert!(RegionGraph::parse_adjacency("0 1\n").is_err());
        assert!(matches!(
            RegionGraph::parse_adjacency("0: 5\n1: 0\n"),
            Err(Error::RegionOutOfRange { .. })
        ));
    }

    #[test]
    fn precision_of_small_paths() {
        assert_eq!(car_precision(&path(2)), DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
        assert_eq!(
            car_precision(&path(3)),
            DMatrix::from_row_slice(3, 3, &[1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0])
        );
        assert_eq!(car_precision(&path(1)), DMatrix::from_row_slice(1, 1, &[0.0]));
    }

    #[test]
    fn island_counts() {
        assert_eq!(path(3).count_islands(), 1);
        let g = RegionGraph::from_pairs(4, &[(0, 1), (2, 3)]).unwrap();
        assert_eq!(g.count_islands(), 2);
    }

    #[test]
    fn two_region_spectrum() {
        let car = CarStructure::from_graph(&path(2)).unwrap();
        assert!((car.d()[0] - 2.0).abs() < 1e-12);
        assert_eq!(car.d()[1], 0.0);
        let s = 1.0 / 2f64.sqrt();
        let expected = DMatrix::from_row_slice(2, 2, &[s, s, -s, s]);
        assert!(max_abs(&(car.v() - expected)) < 1e-12);
    }

    #[test]
    fn nullity_mismatch_is_an_error() {
        let q = car_precision(&path(3));
        assert!(matches!(spectral_car(&q, 2), Err(Error::NullityMismatch { expected: 2, found: 1 })));
    }

    #[test]
    fn islands_get_exact_ones_column() {
        let g = RegionGraph::from_pairs(5, &[(0, 1), (1, 2), (3, 4)]).unwrap();
        let car = CarStructure::from_graph(&g).unwrap();
        assert_eq!(car.islands(), 2);
        assert_eq!(car.d()[3], 0.0);
        assert_eq!(car.d()[4], 0.0);
        let ones = DVector::from_element(5, 1.0 / 5f64.sqrt());
        assert_eq!(car.v().column(4).into_owned(), ones);
        let vtv = car.v().transpose() * car.v();
        assert!(max_abs(&(vtv - DMatrix::identity(5, 5))) < 1e-12);
        assert!(reconstruction_error(&car) < 1e-10);
    }

    fn arb_graph() -> impl Strategy<Value = RegionGraph> {
        (2usize..=10).prop_flat_map(|n| {
            let all: Vec<(usize, usize)> =
                (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).collect();
            let m = all.len();
            proptest::collection::vec(any::<bool>(), m).prop_map(move |keep| {
                let pairs: Vec<_> =
                    all.iter().zip(&keep).filter(|(_, &k)| k).map(|(&p, _)| p).collect();
                RegionGraph::from_pairs(n, &pairs).unwrap()
            })
        })
    }

    fn connected(g: RegionGraph) -> RegionGraph {
        // Chain the components together so the result is connected.
        let labels = g.component_labels();
        let mut pairs = g.edges();
        let mut reps: Vec<usize> = Vec::new();
        for (i, &l) in labels.iter().enumerate() {
            if l == reps.len() {
                reps.push(i);
            }
        }
        pairs.extend(reps.windows(2).map(|w| (w[0], w[1])));
        RegionGraph::from_pairs(g.n_regions(), &pairs).unwrap()
    }

    proptest! {
        #[test]
        fn spectral_invariants(g in arb_graph()) {
            let q = car_precision(&g);
            let ones = DVector::from_element(g.n_regions(), 1.0);
            prop_assert!((&q * &ones).iter().all(|&x| x == 0.0));
            let car = CarStructure::from_graph(&g).unwrap();
            prop_assert!(reconstruction_error(&car) < 1e-10 || q.iter().all(|&x| x == 0.0));
            let n = g.n_regions();
            let vtv = car.v().transpose() * car.v();
            prop_assert!(max_abs(&(vtv - DMatrix::identity(n, n))) < 1e-12);
            let zeros = car.d().iter().filter(|&&x| x == 0.0).count();
            prop_assert_eq!(zeros, g.count_islands());
            prop_assert!(car.d().iter().take(n - zeros).all(|&x| x > 0.0));
            let col = car.v().column(n - 1);
            prop_assert!(col.iter().all(|&x| x == 1.0 / (n as f64).sqrt()));
            // numeric rank via singular values at 1e-8 relative tolerance
            let sv = q.clone().svd(false, false).singular_values;
            let smax = sv.max();
            let rank = sv.iter().filter(|&&s| s > 1e-8 * smax).count();
            prop_assert_eq!(rank, n - g.count_islands());
        }

        #[test]
        fn car_density_is_translation_invariant(
            g in arb_graph(),
            phi in proptest::collection::vec(-3.0f64..3.0, 10),
            c in -50.0f64..50.0,
            tau in 0.1f64..10.0,
        ) {
            let g = connected(g);
            let n = g.n_regions();
            let car = CarStructure::from_graph(&g).unwrap();
            let phi = DVector::from_iterator(n, phi.into_iter().take(n));
            let shifted = phi.add_scalar(c);
            let a = car.log_density(&phi, tau);
            let b = car.log_density(&shifted, tau);
            prop_assert!((a - b).abs() < 1e-8 * (1.0 + a.abs()));
        }
    }
}
