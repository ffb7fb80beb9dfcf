//! Data ingestion, expected counts, run configuration and output files.
//!
//! Counts files are long-format CSV with header
//! `region,disease,count,population` and an optional trailing `expected`
//! column. Region ids are opaque strings; when paired with an adjacency file
//! they must equal the adjacency ids. Cells are ordered region-major, with
//! diseases in order of first appearance.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::graph::RegionGraph;
use crate::metrics::{Dic, MethodMetrics};
use crate::models::Observations;
use crate::samplers::{PosteriorDraws, RunConfig};
use crate::{Error, Result};

/// Environment variable naming the default data directory.
pub const DATA_DIR_ENV: &str = "SANOVA_DATA_DIR";

#[derive(Debug, Clone, PartialEq)]
pub struct ArealDataset {
    pub regions: Vec<String>,
    pub diseases: Vec<String>,
    pub population: Vec<f64>,
    /// `N × n` observed counts.
    pub counts: DMatrix<f64>,
    /// `N × n` expected counts, if supplied by the file.
    pub expected: Option<DMatrix<f64>>,
}

impl ArealDataset {
    pub fn n_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn n_diseases(&self) -> usize {
        self.diseases.len()
    }

    /// Supplied expected counts, or internal standardisation.
    pub fn expected_counts(&self) -> Result<DMatrix<f64>> {
        match &self.expected {
            Some(e) => Ok(e.clone()),
            None => internal_standardization(&self.counts, &self.population, &self.diseases),
        }
    }

    /// Poisson observations in region-major cell order.
    pub fn observations(&self) -> Result<Observations> {
        let e = self.expected_counts()?;
        Observations::poisson(row_major(&self.counts), row_major(&e))
    }

    /// Observations for a single disease column.
    pub fn disease_observations(&self, j: usize) -> Result<Observations> {
        let e = self.expected_counts()?;
        Observations::poisson(self.counts.column(j).iter().copied().collect(), e.column(j).iter().copied().collect())
    }

    /// Reorders regions to follow `order` (a list of region ids).
    pub fn reorder(&self, order: &[String]) -> Result<Self> {
        let pos: HashMap<&str, usize> = self.regions.iter().enumerate().map(|(i, r)| (r.as_str(), i)).collect();
        if order.len() != self.regions.len() {
            return Err(Error::IdMismatch(format!("{} regions in counts, {} expected", self.regions.len(), order.len())));
        }
        let idx = order
            .iter()
            .map(|r| pos.get(r.as_str()).copied().ok_or_else(|| Error::IdMismatch(format!("region `{r}` has no counts"))))
            .collect::<Result<Vec<_>>>()?;
        let pick = |m: &DMatrix<f64>| DMatrix::from_fn(idx.len(), m.ncols(), |i, j| m[(idx[i], j)]);
        Ok(Self {
            regions: order.to_vec(),
            diseases: self.diseases.clone(),
            population: idx.iter().map(|&i| self.population[i]).collect(),
            counts: pick(&self.counts),
            expected: self.expected.as_ref().map(pick),
        })
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows()).flat_map(|i| m.row(i).iter().copied().collect::<Vec<_>>()).collect()
}

/// `E_ij = P_i · (Σ_i O_ij) / (Σ_i P_i)`.
pub fn internal_standardization(counts: &DMatrix<f64>, population: &[f64], diseases: &[String]) -> Result<DMatrix<f64>> {
    if population.len() != counts.nrows() {
        return Err(Error::Dimension(format!("{} populations for {} regions", population.len(), counts.nrows())));
    }
    if let Some(p) = population.iter().find(|&&p| !(p > 0.0)) {
        return Err(Error::InvalidData(format!("population {p} is not positive")));
    }
    let total_pop: f64 = population.iter().sum();
    let mut e = DMatrix::zeros(counts.nrows(), counts.ncols());
    for j in 0..counts.ncols() {
        let total = counts.column(j).sum();
        if total <= 0.0 {
            let name = diseases.get(j).cloned().unwrap_or_else(|| j.to_string());
            return Err(Error::ZeroTotal(name));
        }
        let rate = total / total_pop;
        for (i, p) in population.iter().enumerate() {
            e[(i, j)] = p * rate;
        }
    }
    Ok(e)
}

/// Parses a counts file.
pub fn read_counts(reader: impl Read) -> Result<ArealDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_ascii_lowercase).collect();
    let expected_header = ["region", "disease", "count", "population"];
    let has_expected = header.len() == 5 && header[4] == "expected";
    if header.len() < 4 || header[..4] != expected_header || !(header.len() == 4 || has_expected) {
        return Err(Error::MalformedRow {
            row: 1,
            message: format!("expected header region,disease,count,population[,expected], got {}", header.join(",")),
        });
    }

    let mut regions: Vec<String> = Vec::new();
    let mut diseases: Vec<String> = Vec::new();
    let mut region_pos: HashMap<String, usize> = HashMap::new();
    let mut disease_pos: HashMap<String, usize> = HashMap::new();
    let mut population: Vec<f64> = Vec::new();
    let mut cells: HashMap<(usize, usize), (f64, Option<f64>)> = HashMap::new();

    for (k, rec) in rdr.records().enumerate() {
        let row = k + 2;
        let rec = rec?;
        let bad = |message: String| Error::MalformedRow { row, message };
        if rec.len() != header.len() {
            return Err(bad(format!("expected {} fields, got {}", header.len(), rec.len())));
        }
        let region = rec[0].to_string();
        let disease = rec[1].to_string();
        if region.is_empty() || disease.is_empty() {
            return Err(bad("empty region or disease".into()));
        }
        let count: i64 = rec[2].parse().map_err(|_| bad(format!("count `{}` is not an integer", &rec[2])))?;
        if count < 0 {
            return Err(Error::NegativeCount { row, count });
        }
        let pop: f64 = rec[3].parse().map_err(|_| bad(format!("population `{}` is not a number", &rec[3])))?;
        if !(pop > 0.0 && pop.is_finite()) {
            return Err(bad(format!("population {pop} is not positive")));
        }
        let expected = if has_expected {
            let e: f64 = rec[4].parse().map_err(|_| bad(format!("expected `{}` is not a number", &rec[4])))?;
            if !(e > 0.0 && e.is_finite()) {
                return Err(bad(format!("expected count {e} is not positive")));
            }
            Some(e)
        } else {
            None
        };
        let ri = *region_pos.entry(region.clone()).or_insert_with(|| {
            regions.push(region.clone());
            population.push(pop);
            regions.len() - 1
        });
        if population[ri] != pop {
            return Err(bad(format!("population for region `{region}` differs from an earlier row")));
        }
        let di = *disease_pos.entry(disease.clone()).or_insert_with(|| {
            diseases.push(disease.clone());
            diseases.len() - 1
        });
        if cells.insert((ri, di), (count as f64, expected)).is_some() {
            return Err(Error::DuplicateEntry { region, disease });
        }
    }
    if regions.is_empty() {
        return Err(Error::InvalidData("counts file has no rows".into()));
    }
    let (nr, nd) = (regions.len(), diseases.len());
    let mut counts = DMatrix::zeros(nr, nd);
    let mut expected = DMatrix::zeros(nr, nd);
    for i in 0..nr {
        for j in 0..nd {
            let (c, e) = cells
                .get(&(i, j))
                .ok_or_else(|| Error::InvalidData(format!("no count for region `{}`, disease `{}`", regions[i], diseases[j])))?;
            counts[(i, j)] = *c;
            expected[(i, j)] = e.unwrap_or(0.0);
        }
    }
    Ok(ArealDataset { regions, diseases, population, counts, expected: has_expected.then_some(expected) })
}

pub fn read_counts_file(path: impl AsRef<Path>) -> Result<ArealDataset> {
    read_counts(fs::File::open(resolve_data_path(path.as_ref()))?)
}

/// Writes a dataset in the counts-file format.
pub fn write_counts(data: &ArealDataset, mut w: impl Write) -> Result<()> {
    let mut out = String::from("region,disease,count,population");
    if data.expected.is_some() {
        out.push_str(",expected");
    }
    out.push('\n');
    for (i, r) in data.regions.iter().enumerate() {
        for (j, d) in data.diseases.iter().enumerate() {
            out.push_str(&format!("{r},{d},{},{}", data.counts[(i, j)], data.population[i]));
            if let Some(e) = &data.expected {
                out.push_str(&format!(",{}", e[(i, j)]));
            }
            out.push('\n');
        }
    }
    w.write_all(out.as_bytes())?;
    Ok(())
}

/// Region names from `# Name` comments in an adjacency file, if present.
pub fn adjacency_names(text: &str) -> Vec<Option<String>> {
    text.lines()
        .filter(|l| !l.trim_start().starts_with('#') && !l.trim().is_empty())
        .map(|l| l.split_once('#').map(|(_, c)| c.trim().to_string()).filter(|c| !c.is_empty()))
        .collect()
}

/// Loads counts and adjacency and checks that their region ids agree. The
/// dataset is reordered to follow the adjacency ids `0..N`.
pub fn load_dataset(counts_path: impl AsRef<Path>, adjacency_path: impl AsRef<Path>) -> Result<(ArealDataset, RegionGraph)> {
    let data = read_counts_file(counts_path)?;
    let (graph, _) = RegionGraph::read_adjacency(resolve_data_path(adjacency_path.as_ref()))?;
    let ids: Vec<String> = (0..graph.n_regions()).map(|i| i.to_string()).collect();
    let known: std::collections::HashSet<&str> = ids.iter().map(String::as_str).collect();
    if let Some(r) = data.regions.iter().find(|r| !known.contains(r.as_str())) {
        return Err(Error::IdMismatch(format!("region `{r}` is in the counts file but not in the adjacency file")));
    }
    let data = data.reorder(&ids)?;
    Ok((data, graph))
}

/// Reads continuous outcomes from a file with header `region,disease,value`
/// and returns `N × n` values ordered like the adjacency ids `0..N`.
pub fn load_values(path: impl AsRef<Path>, n_regions: usize) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(fs::File::open(resolve_data_path(path.as_ref()))?);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_ascii_lowercase).collect();
    if header != ["region", "disease", "value"] {
        return Err(Error::MalformedRow { row: 1, message: format!("expected header region,disease,value, got {}", header.join(",")) });
    }
    let mut diseases: Vec<String> = Vec::new();
    let mut cells: HashMap<(usize, usize), f64> = HashMap::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 2;
        let rec = rec?;
        let bad = |message: String| Error::MalformedRow { row, message };
        if rec.len() != 3 {
            return Err(bad(format!("expected 3 fields, got {}", rec.len())));
        }
        let region: usize = rec[0].parse().map_err(|_| Error::IdMismatch(format!("region `{}` is not an adjacency id", &rec[0])))?;
        if region >= n_regions {
            return Err(Error::IdMismatch(format!("region `{region}` is not in the adjacency file")));
        }
        let value: f64 = rec[2].parse().map_err(|_| bad(format!("value `{}` is not a number", &rec[2])))?;
        if !value.is_finite() {
            return Err(bad(format!("value {value} is not finite")));
        }
        let j = match diseases.iter().position(|d| d == &rec[1]) {
            Some(j) => j,
            None => {
                diseases.push(rec[1].to_string());
                diseases.len() - 1
            }
        };
        if cells.insert((region, j), value).is_some() {
            return Err(Error::DuplicateEntry { region: region.to_string(), disease: rec[1].to_string() });
        }
    }
    let mut m = DMatrix::zeros(n_regions, diseases.len());
    for i in 0..n_regions {
        for (j, d) in diseases.iter().enumerate() {
            m[(i, j)] = *cells
                .get(&(i, j))
                .ok_or_else(|| Error::InvalidData(format!("no value for region {i}, disease `{d}`")))?;
        }
    }
    Ok((diseases, m))
}

/// DIC from a saved draws file: the plug-in point is the mean of the `mu[…]`
/// columns (and of `eta0`, when present).
pub fn dic_from_draws_csv(text: &str, data: &Observations) -> Result<Dic> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    let mu: Vec<usize> = header.iter().enumerate().filter(|(_, h)| h.starts_with("mu[")).map(|(i, _)| i).collect();
    let eta0 = header.iter().position(|h| h == "eta0");
    let ll = header
        .iter()
        .position(|h| h == "loglik")
        .ok_or_else(|| Error::MalformedRow { row: 1, message: "draws file has no loglik column".into() })?;
    if mu.len() != data.len() {
        return Err(Error::Dimension(format!("{} predictor columns for {} cells", mu.len(), data.len())));
    }
    let mut sums = vec![0.0; mu.len()];
    let mut eta_sum = 0.0;
    let mut lls = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |i: usize| rec[i].parse::<f64>().map_err(|_| Error::MalformedRow { row: k + 2, message: format!("bad number `{}`", &rec[i]) });
        for (s, &c) in sums.iter_mut().zip(&mu) {
            *s += num(c)?;
        }
        if let Some(e) = eta0 {
            eta_sum += num(e)?;
        }
        lls.push(num(ll)?);
    }
    let n = lls.len().max(1) as f64;
    let mean = nalgebra::DVector::from_iterator(sums.len(), sums.iter().map(|s| s / n));
    let at_mean = data.log_likelihood(&mean, eta0.map(|_| eta_sum / n))?;
    crate::metrics::dic(&lls, at_mean)
}

/// Data directory shipped with the source tree.
pub fn bundled_data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

/// Resolves a relative path that does not exist relative to the working
/// directory against `$SANOVA_DATA_DIR`, then the bundled data directory.
pub fn resolve_data_path(path: &Path) -> PathBuf {
    if path.is_relative() && !path.exists() {
        let dirs = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).into_iter().chain([bundled_data_dir()]);
        for dir in dirs {
            let candidate = dir.join(path);
            if candidate.exists() {
                return candidate;
            }
        }
    }
    path.to_path_buf()
}

/// Options read from a TOML key-value file; every key is optional and
/// command-line flags take precedence.
#[derive(Debug, Clone, Default, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub likelihood: Option<String>,
    /// `HA1`, `HA2`, `HAM`, `helmert`, or a path to a matrix file.
    pub contrasts: Option<String>,
    /// `full` or `main` (no interactions).
    pub terms: Option<String>,
    pub tau_shape: Option<f64>,
    pub tau_rate: Option<f64>,
    pub eta0_shape: Option<f64>,
    pub eta0_rate: Option<f64>,
    /// Wishart `R = scale · I`.
    pub wishart_scale: Option<f64>,
    /// Path to a Wishart `R` matrix file (overrides `wishart_scale`).
    pub wishart_r: Option<String>,
    pub wishart_df: Option<f64>,
    /// Univariate CAR `Gamma(a, a)` parameter.
    pub car_a: Option<f64>,
    /// `full` or `reduced` run preset.
    pub preset: Option<String>,
    pub n_chains: Option<usize>,
    pub n_iter: Option<usize>,
    pub burn_in: Option<usize>,
    pub thin: Option<usize>,
    pub seed: Option<u64>,
}

impl FitConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Values from `over` replace those in `self`.
    pub fn merged(self, over: Self) -> Self {
        macro_rules! pick {
            ($($f:ident),*) => { Self { $($f: over.$f.or(self.$f)),* } };
        }
        pick!(likelihood, contrasts, terms, tau_shape, tau_rate, eta0_shape, eta0_rate, wishart_scale, wishart_r, wishart_df, car_a, preset, n_chains, n_iter, burn_in, thin, seed)
    }

    /// Run settings: the preset (default `reduced`) with explicit overrides.
    pub fn run_config(&self) -> Result<RunConfig> {
        let seed = self.seed.ok_or_else(|| Error::Config("a seed is required".into()))?;
        let mut cfg = RunConfig::preset(self.preset.as_deref().unwrap_or("reduced"), seed)?;
        if let Some(v) = self.n_chains {
            cfg.n_chains = v;
        }
        if let Some(v) = self.n_iter {
            cfg.n_iter = v;
        }
        if let Some(v) = self.burn_in {
            cfg.burn_in = v;
        }
        if let Some(v) = self.thin {
            cfg.thin = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

/// Output directory with `draws/`, `summary/`, `metrics/` and a manifest.
pub struct OutputDir {
    root: PathBuf,
    outputs: Vec<FileDigest>,
}

impl OutputDir {
    pub fn create(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        for sub in ["draws", "summary", "metrics"] {
            fs::create_dir_all(root.join(sub))?;
        }
        Ok(Self { root, outputs: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Writes `bytes` to `sub/name` and records its checksum.
    pub fn write(&mut self, sub: &str, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let rel = Path::new(sub).join(name);
        let path = self.root.join(&rel);
        fs::write(&path, bytes)?;
        self.outputs.push(FileDigest { path: rel.to_string_lossy().into_owned(), sha256: sha256_hex(bytes) });
        Ok(path)
    }

    pub fn write_draws(&mut self, name: &str, draws: &PosteriorDraws) -> Result<PathBuf> {
        let mut buf = Vec::new();
        draws.write_csv(&mut buf)?;
        self.write("draws", &format!("{name}.csv"), &buf)
    }

    pub fn write_summary(&mut self, name: &str, draws: &PosteriorDraws) -> Result<PathBuf> {
        self.write("summary", &format!("{name}.csv"), summary_csv(draws)?.as_bytes())
    }

    pub fn write_metrics(&mut self, rows: &[MethodMetrics]) -> Result<()> {
        self.write("metrics", "metrics.txt", crate::metrics::format_report(rows).as_bytes())?;
        self.write("metrics", "metrics.csv", crate::metrics::format_csv(rows).as_bytes())?;
        Ok(())
    }

    pub fn write_dic(&mut self, name: &str, dic: &Dic) -> Result<()> {
        let text = format!("dbar,p_d,dic\n{},{},{}\n", dic.dbar, dic.p_d, dic.dic);
        self.write("metrics", &format!("{name}_dic.csv"), text.as_bytes())?;
        Ok(())
    }

    /// Writes `manifest.json`; call last.
    pub fn finish(self, command: &str, seed: u64, config: serde_json::Value, inputs: &[PathBuf]) -> Result<PathBuf> {
        let inputs = inputs
            .iter()
            .map(|p| Ok(FileDigest { path: p.to_string_lossy().into_owned(), sha256: sha256_file(p)? }))
            .collect::<Result<Vec<_>>>()?;
        let manifest = Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config,
            inputs,
            outputs: self.outputs,
        };
        let path = self.root.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(&path, text)?;
        Ok(path)
    }
}

/// `name,mean,sd,q025,median,q975,rhat` per parameter.
pub fn summary_csv(draws: &PosteriorDraws) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["name", "mean", "sd", "q025", "median", "q975", "rhat"])?;
    for s in draws.summaries()? {
        w.write_record([s.name, s.mean.to_string(), s.sd.to_string(), s.q025.to_string(), s.median.to_string(), s.q975.to_string(), s.rhat.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Reads a metrics CSV back into rows.
pub fn read_metrics_csv(text: &str) -> Result<Vec<MethodMetrics>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |m: &str| Error::MalformedRow { row: k + 2, message: m.to_string() };
        if rec.len() != 10 {
            return Err(bad("expected 10 fields"));
        }
        let num = |i: usize| rec[i].parse::<f64>().map_err(|_| bad("bad number"));
        rows.push(MethodMetrics {
            cell: rec[0].to_string(),
            method: rec[1].to_string(),
            replicates: rec[2].parse().map_err(|_| bad("bad replicate count"))?,
            failures: rec[3].parse().map_err(|_| bad("bad failure count"))?,
            amse: num(4)?,
            amse_mcse: num(5)?,
            mbias: [num(6)?, num(7)?, num(8)?],
            pi_rate: num(9)?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardization_examples() {
        let c = DMatrix::from_row_slice(2, 1, &[2.0, 4.0]);
        let e = internal_standardization(&c, &[10.0, 10.0], &["d".into()]).unwrap();
        assert_eq!(e.as_slice(), &[3.0, 3.0]);
        let c = DMatrix::from_row_slice(1, 2, &[7.0, 9.0]);
        let e = internal_standardization(&c, &[123.0], &["a".into(), "b".into()]).unwrap();
        assert_eq!(e, c);
        let z = DMatrix::from_row_slice(2, 1, &[0.0, 0.0]);
        assert!(matches!(internal_standardization(&z, &[1.0, 2.0], &["x".into()]), Err(Error::ZeroTotal(_))));
    }

    #[test]
    fn counts_errors_are_distinct() {
        let dup = "region,disease,count,population\na,x,1,10\na,x,2,10\n";
        assert!(matches!(read_counts(dup.as_bytes()), Err(Error::DuplicateEntry { .. })));
        let neg = "region,disease,count,population\na,x,-1,10\n";
        assert!(matches!(read_counts(neg.as_bytes()), Err(Error::NegativeCount { row: 2, count: -1 })));
        let bad = "region,disease,count,population\na,x,one,10\n";
        assert!(matches!(read_counts(bad.as_bytes()), Err(Error::MalformedRow { row: 2, .. })));
        let header = "region,disease,cases,population\na,x,1,10\n";
        assert!(matches!(read_counts(header.as_bytes()), Err(Error::MalformedRow { row: 1, .. })));
        let missing = "region,disease,count,population\na,x,1,10\nb,y,1,10\n";
        assert!(matches!(read_counts(missing.as_bytes()), Err(Error::InvalidData(_))));
    }

    #[test]
    fn expected_column_is_used() {
        let text = "region,disease,count,population,expected\na,x,1,10,0.5\nb,x,3,10,2.5\n";
        let d = read_counts(text.as_bytes()).unwrap();
        assert_eq!(d.expected_counts().unwrap().as_slice(), &[0.5, 2.5]);
    }

    #[test]
    fn config_merge_and_unknown_keys() {
        let base = FitConfig::parse("seed = 3\nn_iter = 500\nburn_in = 100\ncontrasts = \"HA2\"\n").unwrap();
        let over = FitConfig { contrasts: Some("HA1".into()), ..Default::default() };
        let m = base.merged(over);
        assert_eq!(m.contrasts.as_deref(), Some("HA1"));
        let cfg = m.run_config().unwrap();
        assert_eq!((cfg.seed, cfg.n_iter, cfg.burn_in, cfg.n_chains), (3, 500, 100, 3));
        assert!(FitConfig::parse("sed = 3\n").is_err());
        assert!(FitConfig::default().run_config().is_err());
    }
}
