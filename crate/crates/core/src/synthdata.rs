//! Cluster-structured synthetic tasks and Dirichlet non-IID partitioning.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TaskKind;
use crate::numerics::{Matrix, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub input_dim: usize,
    pub output_dim: usize,
    pub num_clusters: usize,
    pub samples: usize,
    /// Scale of the cluster-specific part of each center.
    pub cluster_spread: f64,
    /// Norm of the offset shared by every center.
    pub mean_offset: f64,
    /// Within-cluster input standard deviation.
    pub input_std: f64,
    /// Regression target noise standard deviation.
    pub noise_std: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::Regression,
            input_dim: 8,
            output_dim: 4,
            num_clusters: 8,
            samples: 2048,
            cluster_spread: 2.0,
            mean_offset: 2.0,
            input_std: 0.5,
            noise_std: 0.05,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("task dimensions must be at least 1".into()));
        }
        if self.num_clusters == 0 {
            return Err(Error::Config("task needs at least one cluster".into()));
        }
        if self.samples == 0 {
            return Err(Error::Config("task needs at least one sample".into()));
        }
        if self.kind == TaskKind::Classification && self.output_dim < 2 {
            return Err(Error::Config("classification needs at least two classes".into()));
        }
        for (name, v) in [
            ("cluster_spread", self.cluster_spread),
            ("mean_offset", self.mean_offset),
            ("input_std", self.input_std),
            ("noise_std", self.noise_std),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("task.{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub cluster: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub input_dim: usize,
    pub output_dim: usize,
    pub num_clusters: usize,
    pub samples: Vec<Sample>,
    pub centers: Vec<Vec<f64>>,
    /// One ground-truth `output × input` map per cluster.
    pub maps: Vec<Matrix>,
    pub seed: u64,
}

impl SyntheticTask {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn pairs<'a>(&'a self, idx: &[usize]) -> Vec<(&'a [f64], &'a [f64])> {
        idx.iter().map(|&i| (self.samples[i].x.as_slice(), self.samples[i].y.as_slice())).collect()
    }

    /// Writes `x0..,y0..,cluster` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
        let mut header: Vec<String> = (0..self.input_dim).map(|i| format!("x{i}")).collect();
        header.extend((0..self.output_dim).map(|i| format!("y{i}")));
        header.push("cluster".into());
        w.write_record(&header)?;
        for s in &self.samples {
            let mut rec: Vec<String> = s.x.iter().chain(&s.y).map(|v| v.to_string()).collect();
            rec.push(s.cluster.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a dump written by [`write_csv`](Self::write_csv). Centers and
    /// maps are not part of the dump and come back empty.
    pub fn read_csv(path: &Path, kind: TaskKind) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        let input_dim = header.iter().filter(|h| h.starts_with('x')).count();
        let output_dim = header.iter().filter(|h| h.starts_with('y')).count();
        if header.len() != input_dim + output_dim + 1 || header.get(header.len() - 1) != Some("cluster") {
            return Err(Error::InvalidInput("dataset CSV header must be x*, y*, cluster".into()));
        }
        let mut samples = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let parse = |s: &str| s.parse::<f64>().map_err(|e| Error::InvalidInput(format!("bad value {s:?}: {e}")));
            let x = (0..input_dim).map(|i| parse(&rec[i])).collect::<Result<Vec<_>>>()?;
            let y = (input_dim..input_dim + output_dim).map(|i| parse(&rec[i])).collect::<Result<Vec<_>>>()?;
            let cluster = rec[input_dim + output_dim]
                .parse::<usize>()
                .map_err(|e| Error::InvalidInput(format!("bad cluster id: {e}")))?;
            samples.push(Sample { x, y, cluster });
        }
        if samples.is_empty() {
            return Err(Error::InvalidInput("dataset CSV has no rows".into()));
        }
        let num_clusters = samples.iter().map(|s| s.cluster).max().unwrap_or(0) + 1;
        Ok(Self {
            kind,
            input_dim,
            output_dim,
            num_clusters,
            samples,
            centers: Vec::new(),
            maps: Vec::new(),
            seed: 0,
        })
    }
}

pub fn generate_task(spec: &TaskSpec, rng: &mut Rng) -> Result<SyntheticTask> {
    spec.validate()?;
    let d = spec.input_dim;
    let offset_each = spec.mean_offset / (d as f64).sqrt();
    let centers: Vec<Vec<f64>> = (0..spec.num_clusters)
        .map(|_| (0..d).map(|_| offset_each + spec.cluster_spread * rng.normal()).collect())
        .collect();
    let map_std = 1.0 / (d as f64).sqrt();
    let maps: Vec<Matrix> = (0..spec.num_clusters)
        .map(|_| Matrix::random_normal(spec.output_dim, d, map_std, rng))
        .collect();

    let samples = (0..spec.samples)
        .map(|_| {
            let cluster = rng.index(spec.num_clusters);
            let x: Vec<f64> = centers[cluster].iter().map(|c| c + spec.input_std * rng.normal()).collect();
            let clean = maps[cluster].matvec(&x)?;
            let y = match spec.kind {
                TaskKind::Regression => clean.iter().map(|v| v + spec.noise_std * rng.normal()).collect(),
                TaskKind::Classification => {
                    let label = crate::numerics::topk_indices(&clean, 1)?[0];
                    (0..spec.output_dim).map(|j| if j == label { 1.0 } else { 0.0 }).collect()
                }
            };
            Ok(Sample { x, y, cluster })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(SyntheticTask {
        kind: spec.kind,
        input_dim: d,
        output_dim: spec.output_dim,
        num_clusters: spec.num_clusters,
        samples,
        centers,
        maps,
        seed: rng.seed(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub clients: Vec<Vec<usize>>,
    pub alpha: f64,
    /// Per-client cluster mixture that produced the assignment.
    pub mixtures: Vec<Vec<f64>>,
}

impl Partition {
    /// Shard-size weights `|D_c| / Σ|D|`.
    pub fn weights(&self) -> Vec<f64> {
        let total: usize = self.clients.iter().map(Vec::len).sum();
        self.clients.iter().map(|c| c.len() as f64 / total as f64).collect()
    }

    /// Fraction of each client's shard coming from each cluster.
    pub fn cluster_shares(&self, task: &SyntheticTask) -> Vec<Vec<f64>> {
        self.clients
            .iter()
            .map(|idx| {
                let mut c = vec![0.0; task.num_clusters];
                for &i in idx {
                    c[task.samples[i].cluster] += 1.0;
                }
                let n = idx.len().max(1) as f64;
                c.into_iter().map(|v| v / n).collect()
            })
            .collect()
    }
}

const MAX_RESAMPLES: usize = 10_000;

/// Each client draws a cluster mixture from `Dirichlet(α)`; every sample of
/// cluster `k` then goes to client `c` with probability proportional to the
/// client's weight on `k`. Clients left empty redraw their mixture.
pub fn partition_dirichlet(task: &SyntheticTask, num_clients: usize, alpha: f64, rng: &mut Rng) -> Result<Partition> {
    if num_clients == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Config(format!("dirichlet alpha must be positive and finite, got {alpha}")));
    }
    if num_clients > task.len() {
        return Err(Error::Config(format!(
            "{num_clients} clients but only {} samples",
            task.len()
        )));
    }
    let k = task.num_clusters;
    let conc = vec![alpha; k];
    let mut mixtures: Vec<Vec<f64>> = (0..num_clients).map(|_| rng.dirichlet(&conc)).collect();

    for _ in 0..MAX_RESAMPLES {
        let mut clients = vec![Vec::new(); num_clients];
        for (i, s) in task.samples.iter().enumerate() {
            let weights: Vec<f64> = mixtures.iter().map(|m| m[s.cluster]).collect();
            clients[sample_weighted(&weights, rng)].push(i);
        }
        let empty: Vec<usize> = (0..num_clients).filter(|&c| clients[c].is_empty()).collect();
        if empty.is_empty() {
            return Ok(Partition { clients, alpha, mixtures });
        }
        for c in empty {
            mixtures[c] = rng.dirichlet(&conc);
        }
    }
    Err(Error::Numerical(format!(
        "could not find a partition without empty clients after {MAX_RESAMPLES} resamples"
    )))
}

fn sample_weighted(weights: &[f64], rng: &mut Rng) -> usize {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return rng.index(weights.len());
    }
    let mut u = rng.uniform() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(weights.len() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelParams, StackDims};
    use proptest::prelude::*;
    use crate::numerics::Rng;

    #[test]
    fn same_seed_same_dataset() {
        let spec = TaskSpec::default();
        let a = generate_task(&spec, &mut Rng::new(3)).unwrap();
        let b = generate_task(&spec, &mut Rng::new(3)).unwrap();
        assert_eq!(a, b);
        let c = generate_task(&spec, &mut Rng::new(4)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_empty_spec() {
        let spec = TaskSpec { samples: 0, ..TaskSpec::default() };
        assert!(generate_task(&spec, &mut Rng::new(0)).is_err());
        let spec = TaskSpec { num_clusters: 0, ..TaskSpec::default() };
        assert!(generate_task(&spec, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn separated_clusters_recovered_by_nearest_mean() {
        let spec = TaskSpec {
            cluster_spread: 10.0,
            input_std: 0.1,
            num_clusters: 5,
            samples: 500,
            ..TaskSpec::default()
        };
        let t = generate_task(&spec, &mut Rng::new(12)).unwrap();
        // oracle: empirical class means, then nearest mean
        let mut means = vec![vec![0.0; spec.input_dim]; spec.num_clusters];
        let mut counts = vec![0.0; spec.num_clusters];
        for s in &t.samples {
            counts[s.cluster] += 1.0;
            for (m, x) in means[s.cluster].iter_mut().zip(&s.x) {
                *m += x;
            }
        }
        for (m, c) in means.iter_mut().zip(&counts) {
            m.iter_mut().for_each(|v| *v /= c);
        }
        for s in &t.samples {
            let nearest = (0..spec.num_clusters)
                .min_by(|&a, &b| {
                    let da: f64 = means[a].iter().zip(&s.x).map(|(m, x)| (m - x).powi(2)).sum();
                    let db: f64 = means[b].iter().zip(&s.x).map(|(m, x)| (m - x).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            assert_eq!(nearest, s.cluster);
        }
    }

    #[test]
    fn single_noiseless_cluster_is_learnable() {
        let spec = TaskSpec {
            num_clusters: 1,
            noise_std: 0.0,
            input_dim: 3,
            output_dim: 3,
            samples: 64,
            mean_offset: 0.0,
            cluster_spread: 0.0,
            input_std: 1.0,
            ..TaskSpec::default()
        };
        let t = generate_task(&spec, &mut Rng::new(1)).unwrap();
        for s in &t.samples {
            let y = t.maps[0].matvec(&s.x).unwrap();
            assert_eq!(y, s.y);
        }
        let dims = StackDims {
            input_dim: 3,
            hidden_dim: 3,
            output_dim: 3,
            num_layers: 1,
            num_experts: 2,
            rank: 3,
            alpha: 3.0,
        };
        let mut model = ModelParams::init(&dims, 0.0, &mut Rng::new(2)).unwrap();
        let all: Vec<usize> = (0..t.len()).collect();
        let batch = t.pairs(&all);
        let start = model.eval_loss(&batch, TaskKind::Regression, 2, 2).unwrap();
        for _ in 0..3000 {
            let out = model.loss_and_grad(&batch, TaskKind::Regression, 2, 2).unwrap();
            model.sgd_step(&out.grads, 0.05, false).unwrap();
        }
        let end = model.eval_loss(&batch, TaskKind::Regression, 2, 2).unwrap();
        assert!(end < 1e-4 * start.max(1.0), "start {start}, end {end}");
    }

    #[test]
    fn csv_round_trip() {
        let spec = TaskSpec { samples: 10, ..TaskSpec::default() };
        let t = generate_task(&spec, &mut Rng::new(9)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        t.write_csv(&path).unwrap();
        let back = SyntheticTask::read_csv(&path, TaskKind::Regression).unwrap();
        assert_eq!(back.samples, t.samples);
    }

    #[test]
    fn single_client_owns_everything() {
        let t = generate_task(&TaskSpec { samples: 50, ..TaskSpec::default() }, &mut Rng::new(0)).unwrap();
        let p = partition_dirichlet(&t, 1, 0.1, &mut Rng::new(1)).unwrap();
        assert_eq!(p.clients[0], (0..50).collect::<Vec<_>>());
        assert_eq!(p.weights(), vec![1.0]);
    }

    #[test]
    fn partition_errors() {
        let t = generate_task(&TaskSpec { samples: 5, ..TaskSpec::default() }, &mut Rng::new(0)).unwrap();
        assert!(partition_dirichlet(&t, 6, 1.0, &mut Rng::new(0)).is_err());
        assert!(partition_dirichlet(&t, 2, 0.0, &mut Rng::new(0)).is_err());
        assert!(partition_dirichlet(&t, 0, 1.0, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn huge_alpha_is_near_uniform() {
        let spec = TaskSpec { samples: 40_000, num_clusters: 4, ..TaskSpec::default() };
        let t = generate_task(&spec, &mut Rng::new(2)).unwrap();
        let p = partition_dirichlet(&t, 4, 1e6, &mut Rng::new(3)).unwrap();
        for mix in &p.mixtures {
            for &v in mix {
                assert!((v - 0.25).abs() < 0.05 * 0.25 + 1e-3);
            }
        }
        for share in p.cluster_shares(&t) {
            for v in share {
                assert!((v - 0.25).abs() < 0.05);
            }
        }
    }

    #[test]
    fn small_alpha_is_skewed() {
        // Monte-Carlo over 100 seeds of the drawn mixtures
        let t = generate_task(&TaskSpec { samples: 400, ..TaskSpec::default() }, &mut Rng::new(2)).unwrap();
        let mut total = 0.0;
        for seed in 0..100 {
            let p = partition_dirichlet(&t, 8, 0.1, &mut Rng::new(seed)).unwrap();
            let max_share = p.cluster_shares(&t).iter().flat_map(|s| s.iter().copied()).fold(0.0, f64::max);
            total += max_share;
        }
        assert!(total / 100.0 > 0.5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn partition_is_disjoint_cover(seed in 0u64..10_000, clients in 1usize..10, alpha in 0.05f64..5.0) {
            let t = generate_task(&TaskSpec { samples: 120, ..TaskSpec::default() }, &mut Rng::new(seed)).unwrap();
            let p = partition_dirichlet(&t, clients, alpha, &mut Rng::new(seed + 1)).unwrap();
            let mut all: Vec<usize> = p.clients.iter().flatten().copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..120).collect::<Vec<_>>());
            prop_assert!(p.clients.iter().all(|c| !c.is_empty()));
            prop_assert!((p.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
