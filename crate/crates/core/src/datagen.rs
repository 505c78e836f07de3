//! Synthetic linear stochastic systems: Erdős–Rényi ground-truth graphs,
//! linear SDE simulation with optional knockout conditions, and the
//! time-binned snapshot dataset directory format.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::numerics::{Mat, Prng};
use crate::{Result, SfkError};

/// Parameters of the linear synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub d: usize,
    /// Probability of each off-diagonal edge.
    pub sparsity: f64,
    /// Number of snapshot times, including t=0 and t=horizon.
    pub timepoints: usize,
    /// Samples per timepoint.
    pub samples: usize,
    /// Simulation noise level.
    pub sigma: f64,
    pub horizon: f64,
    pub dt: f64,
    /// Shift the diagonal by -(max |row sum| + 0.1) to keep trajectories
    /// bounded; off-diagonal ground truth is untouched.
    pub damping: bool,
    /// Variables knocked out in the interventional conditions.
    pub knockouts: Vec<usize>,
    pub seed: u64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            d: 10,
            sparsity: 0.2,
            timepoints: 5,
            samples: 1000,
            sigma: 0.1,
            horizon: 1.0,
            dt: 0.01,
            damping: true,
            knockouts: Vec::new(),
            seed: 1,
        }
    }
}

/// A ground-truth linear system `dx = (A - offset*I) x dt + sigma dB`.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub d: usize,
    /// Ground-truth interaction matrix; entry (j, i) is the influence of
    /// variable i on variable j. Diagonal is zero before damping.
    pub a: Mat,
    pub sigma_sim: f64,
    pub sparsity: f64,
    pub damping_offset: f64,
    pub seed: u64,
}

impl LinearSystem {
    pub fn new(d: usize, sparsity: f64, sigma: f64, damping: bool, seed: u64) -> Result<Self> {
        let mut prng = Prng::new(seed).substream(&[0xE2]);
        let a = gen_er_graph(d, sparsity, &mut prng)?;
        let damping_offset = if damping {
            let mut g = 0.0f64;
            for j in 0..d {
                g = g.max(a.row(j).iter().map(|v| v.abs()).sum());
            }
            g + 0.1
        } else {
            0.0
        };
        Ok(LinearSystem {
            d,
            a,
            sigma_sim: sigma,
            sparsity,
            damping_offset,
            seed,
        })
    }

    /// Drift matrix actually simulated (ground truth minus damping).
    pub fn drift_matrix(&self) -> Mat {
        let mut m = self.a.clone();
        for i in 0..self.d {
            m.set(i, i, m.get(i, i) - self.damping_offset);
        }
        m
    }
}

/// Erdős–Rényi directed graph: each off-diagonal entry is nonzero with
/// probability `p`, with magnitude uniform in [0.5, 1] and either sign.
pub fn gen_er_graph(d: usize, p: f64, prng: &mut Prng) -> Result<Mat> {
    if !(0.0..=1.0).contains(&p) {
        return Err(SfkError::InvalidArgument(format!("edge probability {} outside [0, 1]", p)));
    }
    let mut a = Mat::zeros(d, d);
    for j in 0..d {
        for i in 0..d {
            if i == j {
                continue;
            }
            if prng.uniform() < p {
                let mag = prng.uniform_range(0.5, 1.0);
                let sign = if prng.uniform() < 0.5 { -1.0 } else { 1.0 };
                a.set(j, i, sign * mag);
            }
        }
    }
    Ok(a)
}

/// Euler–Maruyama simulation of the linear system, returning one `N x d`
/// matrix per snapshot time. Under a knockout the clamped coordinate is held
/// at exactly zero: initial value, drift and noise on it are all dropped.
pub fn simulate_linear(
    system: &LinearSystem,
    timepoints: usize,
    samples: usize,
    horizon: f64,
    dt: f64,
    knockout: Option<usize>,
    prng: &mut Prng,
) -> Result<Vec<Mat>> {
    if timepoints < 2 || samples == 0 {
        return Err(SfkError::InvalidArgument(format!(
            "need >= 2 timepoints and >= 1 sample, got T={} N={}",
            timepoints, samples
        )));
    }
    if horizon <= 0.0 || dt <= 0.0 {
        return Err(SfkError::InvalidArgument(format!("horizon {} and dt {} must be > 0", horizon, dt)));
    }
    let spacing = horizon / (timepoints - 1) as f64;
    let steps_f = spacing / dt;
    let steps_per_segment = steps_f.round() as usize;
    if steps_per_segment == 0 || (steps_f - steps_per_segment as f64).abs() > 1e-9 {
        return Err(SfkError::InvalidArgument(format!(
            "dt {} does not divide snapshot spacing {}",
            dt, spacing
        )));
    }
    if let Some(c) = knockout {
        if c >= system.d {
            return Err(SfkError::InvalidArgument(format!(
                "knockout {} out of range for d={}",
                c, system.d
            )));
        }
    }
    let drift = system.drift_matrix();
    let d = system.d;
    let mut x = Mat::zeros(samples, d);
    let init_std = 0.5f64.sqrt();
    for v in x.as_mut_slice() {
        *v = init_std * prng.gauss();
    }
    if let Some(c) = knockout {
        for i in 0..samples {
            x.set(i, c, 0.0);
        }
    }
    let mut out = Vec::with_capacity(timepoints);
    out.push(x.clone());
    let noise_scale = system.sigma_sim * dt.sqrt();
    let mut noise = Mat::zeros(samples, d);
    for _ in 1..timepoints {
        for _ in 0..steps_per_segment {
            let v = x.matmul_nt(&drift)?;
            prng.fill_gauss(noise.as_mut_slice());
            for ((xv, dv), nv) in x
                .as_mut_slice()
                .iter_mut()
                .zip(v.as_slice())
                .zip(noise.as_slice())
            {
                *xv += dt * dv + noise_scale * nv;
            }
            if let Some(c) = knockout {
                for i in 0..samples {
                    x.set(i, c, 0.0);
                }
            }
            let peak = x.max_abs();
            if !peak.is_finite() || peak > 1e6 {
                return Err(SfkError::Diverged(format!(
                    "trajectory magnitude {} exceeds guard; enable damping or reduce the horizon",
                    peak
                )));
            }
        }
        out.push(x.clone());
    }
    Ok(out)
}

/// One snapshot: all samples observed at a (discrete) timepoint.
#[derive(Debug, Clone)]
pub struct Marginal {
    pub timepoint: usize,
    pub samples: Mat,
}

/// One experimental condition with its retained marginals.
#[derive(Debug, Clone)]
pub struct Condition {
    pub name: String,
    pub knockout: Option<usize>,
    pub marginals: Vec<Marginal>,
}

/// Per-condition, per-timepoint sample matrices plus the ground-truth graph
/// when the data is synthetic.
#[derive(Debug, Clone)]
pub struct SnapshotDataset {
    pub d: usize,
    /// Size of the full snapshot grid the data was generated on.
    pub timepoints: usize,
    pub conditions: Vec<Condition>,
    pub graph: Option<Mat>,
    pub seed: u64,
    pub generator: Option<GeneratorParams>,
}

impl SnapshotDataset {
    pub fn condition(&self, name: &str) -> Option<&Condition> {
        self.conditions.iter().find(|c| c.name == name)
    }

    /// Copy with one condition's marginals removed entirely.
    pub fn without_condition(&self, name: &str) -> Result<SnapshotDataset> {
        if self.condition(name).is_none() {
            return Err(SfkError::InvalidArgument(format!("condition '{}' not in dataset", name)));
        }
        let mut out = self.clone();
        out.conditions.retain(|c| c.name != name);
        Ok(out)
    }

    /// Copy with one timepoint dropped from every condition.
    pub fn without_timepoint(&self, t: usize) -> Result<SnapshotDataset> {
        if t >= self.timepoints {
            return Err(SfkError::InvalidArgument(format!(
                "timepoint {} out of range (T={})",
                t, self.timepoints
            )));
        }
        let mut out = self.clone();
        for c in &mut out.conditions {
            c.marginals.retain(|m| m.timepoint != t);
        }
        Ok(out)
    }
}

fn condition_name(knockout: Option<usize>) -> String {
    match knockout {
        None => "obs".to_string(),
        Some(c) => format!("ko{}", c),
    }
}

/// Generate the full dataset: one observational condition plus one condition
/// per requested knockout, all simulated from the same ground-truth system.
pub fn generate_dataset(params: &GeneratorParams) -> Result<SnapshotDataset> {
    let system = LinearSystem::new(params.d, params.sparsity, params.sigma, params.damping, params.seed)?;
    let master = Prng::new(params.seed);
    let mut conditions = Vec::new();
    let mut kos: Vec<Option<usize>> = vec![None];
    kos.extend(params.knockouts.iter().map(|&c| Some(c)));
    for (ci, ko) in kos.into_iter().enumerate() {
        let mut prng = master.substream(&[1, ci as u64]);
        let snaps = simulate_linear(
            &system,
            params.timepoints,
            params.samples,
            params.horizon,
            params.dt,
            ko,
            &mut prng,
        )?;
        conditions.push(Condition {
            name: condition_name(ko),
            knockout: ko,
            marginals: snaps
                .into_iter()
                .enumerate()
                .map(|(t, samples)| Marginal { timepoint: t, samples })
                .collect(),
        });
    }
    Ok(SnapshotDataset {
        d: params.d,
        timepoints: params.timepoints,
        conditions,
        graph: Some(system.a.clone()),
        seed: params.seed,
        generator: Some(params.clone()),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ConditionMeta {
    name: String,
    knockout: Option<usize>,
    timepoints: Vec<usize>,
    samples: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetMeta {
    d: usize,
    timepoints: usize,
    seed: u64,
    has_graph: bool,
    conditions: Vec<ConditionMeta>,
    generator: Option<GeneratorParams>,
}

/// Write a matrix as plain decimal CSV ('.' radix, '\n' rows). Values use
/// the shortest representation that parses back to the same f64.
pub fn write_matrix_csv(path: &Path, m: &Mat) -> Result<()> {
    let mut buf = String::with_capacity(m.rows() * m.cols() * 8);
    for i in 0..m.rows() {
        let row = m.row(i);
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                buf.push(',');
            }
            buf.push_str(&format!("{}", v));
        }
        buf.push('\n');
    }
    let mut file = fs::File::create(path).map_err(|e| SfkError::io(path.display().to_string(), e))?;
    file.write_all(buf.as_bytes())
        .map_err(|e| SfkError::io(path.display().to_string(), e))?;
    Ok(())
}

/// Read a CSV matrix, requiring `expect_cols` columns when given.
pub fn read_matrix_csv(path: &Path, expect_cols: Option<usize>) -> Result<Mat> {
    let text = fs::read_to_string(path).map_err(|e| SfkError::io(path.display().to_string(), e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut cols = expect_cols;
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| SfkError::Parse {
                path: path.display().to_string(),
                line: ln + 1,
                msg: format!("'{}' is not a number", field.trim()),
            })?;
            row.push(v);
        }
        match cols {
            None => cols = Some(row.len()),
            Some(c) if c != row.len() => {
                return Err(SfkError::Parse {
                    path: path.display().to_string(),
                    line: ln + 1,
                    msg: format!("row has {} columns, expected {}", row.len(), c),
                });
            }
            _ => {}
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(SfkError::Parse {
            path: path.display().to_string(),
            line: 0,
            msg: "empty matrix file".to_string(),
        });
    }
    Mat::from_rows(&rows)
}

fn marginal_file(name: &str, t: usize) -> String {
    format!("cond_{}_t{}.csv", name, t)
}

/// Write the dataset directory: `meta.json`, `graph.csv` when ground truth
/// is present, and one `cond_<name>_t<k>.csv` per marginal.
pub fn write_dataset(dataset: &SnapshotDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| SfkError::io(dir.display().to_string(), e))?;
    let meta = DatasetMeta {
        d: dataset.d,
        timepoints: dataset.timepoints,
        seed: dataset.seed,
        has_graph: dataset.graph.is_some(),
        conditions: dataset
            .conditions
            .iter()
            .map(|c| ConditionMeta {
                name: c.name.clone(),
                knockout: c.knockout,
                timepoints: c.marginals.iter().map(|m| m.timepoint).collect(),
                samples: c.marginals.first().map_or(0, |m| m.samples.rows()),
            })
            .collect(),
        generator: dataset.generator.clone(),
    };
    let meta_path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta)
        .map_err(|e| SfkError::InvalidArgument(format!("meta serialization failed: {}", e)))?;
    fs::write(&meta_path, text).map_err(|e| SfkError::io(meta_path.display().to_string(), e))?;
    if let Some(g) = &dataset.graph {
        write_matrix_csv(&dir.join("graph.csv"), g)?;
    }
    for c in &dataset.conditions {
        for m in &c.marginals {
            write_matrix_csv(&dir.join(marginal_file(&c.name, m.timepoint)), &m.samples)?;
        }
    }
    Ok(())
}

/// Read a dataset directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<SnapshotDataset> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| SfkError::io(meta_path.display().to_string(), e))?;
    let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| SfkError::Parse {
        path: meta_path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    let graph = if meta.has_graph {
        Some(read_matrix_csv(&dir.join("graph.csv"), Some(meta.d))?)
    } else {
        None
    };
    let mut conditions = Vec::new();
    for cm in &meta.conditions {
        let mut marginals = Vec::new();
        for &t in &cm.timepoints {
            let path = dir.join(marginal_file(&cm.name, t));
            let samples = read_matrix_csv(&path, Some(meta.d))?;
            marginals.push(Marginal { timepoint: t, samples });
        }
        conditions.push(Condition {
            name: cm.name.clone(),
            knockout: cm.knockout,
            marginals,
        });
    }
    Ok(SnapshotDataset {
        d: meta.d,
        timepoints: meta.timepoints,
        conditions,
        graph,
        seed: meta.seed,
        generator: meta.generator,
    })
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        out.push_str(&format!("{:02x}", b));
    }
    out
}

/// Content digest of a dataset directory (file names + bytes, sorted).
pub fn dataset_digest(dir: &Path) -> Result<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| SfkError::io(dir.display().to_string(), e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let mut hasher = Sha256::new();
    for name in &names {
        let path = dir.join(name);
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        let bytes = fs::read(&path).map_err(|e| SfkError::io(path.display().to_string(), e))?;
        hasher.update(&bytes);
    }
    Ok(hex_string(&hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::energy_distance;

    #[test]
    fn er_graph_p_zero_empty() {
        let mut p = Prng::new(1);
        let a = gen_er_graph(5, 0.0, &mut p).unwrap();
        assert!(a.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn er_graph_p_one_full() {
        let mut p = Prng::new(2);
        let a = gen_er_graph(3, 1.0, &mut p).unwrap();
        for j in 0..3 {
            for i in 0..3 {
                if i == j {
                    assert_eq!(a.get(j, i), 0.0);
                } else {
                    let m = a.get(j, i).abs();
                    assert!((0.5..=1.0).contains(&m), "magnitude {}", m);
                }
            }
        }
    }

    #[test]
    fn er_graph_edge_count_binomial() {
        let mut p = Prng::new(3);
        let a = gen_er_graph(100, 0.05, &mut p).unwrap();
        let count = a.as_slice().iter().filter(|&&v| v != 0.0).count() as f64;
        let trials = 100.0f64 * 99.0;
        let mean = 0.05 * trials;
        let se = (trials * 0.05 * 0.95).sqrt();
        assert!((count - mean).abs() < 3.0 * se, "count {}", count);
    }

    #[test]
    fn er_graph_invalid_p() {
        let mut p = Prng::new(4);
        assert!(gen_er_graph(3, 1.5, &mut p).is_err());
    }

    #[test]
    fn static_system_keeps_initial_draw() {
        let system = LinearSystem {
            d: 3,
            a: Mat::zeros(3, 3),
            sigma_sim: 0.0,
            sparsity: 0.0,
            damping_offset: 0.0,
            seed: 0,
        };
        let mut prng = Prng::new(5);
        let snaps = simulate_linear(&system, 5, 20, 1.0, 0.01, None, &mut prng).unwrap();
        for s in &snaps[1..] {
            assert_eq!(s.as_slice(), snaps[0].as_slice());
        }
    }

    #[test]
    fn knockout_column_exactly_zero() {
        let system = LinearSystem::new(4, 0.5, 0.1, true, 7).unwrap();
        let mut prng = Prng::new(6);
        let snaps = simulate_linear(&system, 5, 50, 1.0, 0.01, Some(2), &mut prng).unwrap();
        for s in &snaps {
            for i in 0..s.rows() {
                assert_eq!(s.get(i, 2), 0.0);
            }
        }
    }

    #[test]
    fn scalar_euler_closed_form() {
        let system = LinearSystem {
            d: 1,
            a: Mat::from_rows(&[vec![-1.0]]).unwrap(),
            sigma_sim: 0.0,
            sparsity: 0.0,
            damping_offset: 0.0,
            seed: 0,
        };
        // Initial draw is random; check the multiplicative factor instead.
        let mut prng = Prng::new(8);
        let snaps = simulate_linear(&system, 2, 10, 1.0, 0.01, None, &mut prng).unwrap();
        let factor = 0.99f64.powi(100);
        for i in 0..10 {
            let expect = snaps[0].get(i, 0) * factor;
            assert!((snaps[1].get(i, 0) - expect).abs() < 1e-12);
        }
        assert!((factor - 0.36603).abs() < 1e-5);
    }

    #[test]
    fn dt_must_divide_spacing() {
        let system = LinearSystem::new(2, 0.0, 0.1, true, 1).unwrap();
        let mut prng = Prng::new(9);
        assert!(simulate_linear(&system, 5, 10, 1.0, 0.03, None, &mut prng).is_err());
    }

    #[test]
    fn undamped_explosive_system_errors() {
        let system = LinearSystem {
            d: 1,
            a: Mat::from_rows(&[vec![3.0]]).unwrap(),
            sigma_sim: 0.0,
            sparsity: 0.0,
            damping_offset: 0.0,
            seed: 0,
        };
        let mut prng = Prng::new(10);
        let r = simulate_linear(&system, 2, 5, 10.0, 0.01, None, &mut prng);
        match r {
            Err(SfkError::Diverged(msg)) => assert!(msg.contains("damping")),
            other => panic!("expected divergence, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn damping_preserves_edge_set() {
        let system = LinearSystem::new(8, 0.3, 0.1, true, 11).unwrap();
        let drift = system.drift_matrix();
        for j in 0..8 {
            for i in 0..8 {
                if i != j {
                    assert_eq!(system.a.get(j, i), drift.get(j, i));
                }
            }
        }
        assert!(system.damping_offset > 0.0);
    }

    #[test]
    fn dataset_roundtrip_bitwise() {
        let params = GeneratorParams {
            d: 4,
            sparsity: 0.3,
            timepoints: 3,
            samples: 12,
            knockouts: vec![1],
            seed: 42,
            ..GeneratorParams::default()
        };
        let ds = generate_dataset(&params).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.d, ds.d);
        assert_eq!(back.conditions.len(), 2);
        assert_eq!(back.graph.as_ref().unwrap().as_slice(), ds.graph.as_ref().unwrap().as_slice());
        for (a, b) in ds.conditions.iter().zip(&back.conditions) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.knockout, b.knockout);
            for (ma, mb) in a.marginals.iter().zip(&b.marginals) {
                assert_eq!(ma.timepoint, mb.timepoint);
                assert_eq!(ma.samples.as_slice(), mb.samples.as_slice());
            }
        }
    }

    #[test]
    fn same_seed_same_files() {
        let params = GeneratorParams {
            d: 3,
            timepoints: 3,
            samples: 8,
            seed: 77,
            ..GeneratorParams::default()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        write_dataset(&generate_dataset(&params).unwrap(), d1.path()).unwrap();
        write_dataset(&generate_dataset(&params).unwrap(), d2.path()).unwrap();
        assert_eq!(dataset_digest(d1.path()).unwrap(), dataset_digest(d2.path()).unwrap());
    }

    #[test]
    fn malformed_rows_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        fs::write(&path, "1.0,2.0\n3.0\n").unwrap();
        match read_matrix_csv(&path, None) {
            Err(SfkError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {:?}", other.map(|_| ())),
        }
        fs::write(&path, "1.0,abc\n").unwrap();
        assert!(read_matrix_csv(&path, None).is_err());
    }

    #[test]
    fn dataset_without_graph_reads_back() {
        let params = GeneratorParams {
            d: 3,
            timepoints: 3,
            samples: 6,
            ..GeneratorParams::default()
        };
        let mut ds = generate_dataset(&params).unwrap();
        ds.graph = None;
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert!(back.graph.is_none());
    }

    #[test]
    fn knockout_initial_law_matches_observational() {
        let params = GeneratorParams {
            d: 5,
            sparsity: 0.3,
            samples: 1000,
            knockouts: vec![2],
            seed: 5,
            ..GeneratorParams::default()
        };
        let ds = generate_dataset(&params).unwrap();
        let obs0 = &ds.conditions[0].marginals[0].samples;
        let ko0 = &ds.conditions[1].marginals[0].samples;
        // Compare the non-clamped coordinates only.
        let keep: Vec<usize> = (0..5).filter(|&i| i != 2).collect();
        let project = |m: &Mat| {
            let mut out = Mat::zeros(m.rows(), keep.len());
            for r in 0..m.rows() {
                for (ci, &c) in keep.iter().enumerate() {
                    out.set(r, ci, m.get(r, c));
                }
            }
            out
        };
        let ed = energy_distance(&project(obs0), &project(ko0)).unwrap();
        assert!(ed < 0.05, "energy distance {}", ed);
    }
}
