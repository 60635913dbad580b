use std::path::Path;

use rayon::prelude::*;

use super::{csv_writer, finetune_eval, finish, sig6, FinetuneConfig, MeanStd};
use crate::data::{sample_tasks, Dataset, TaskSpec};
use crate::error::{Error, Result};
use crate::mlp::{Architecture, ParamSet};
use crate::real::Real;
use crate::stochastics::{SeededRng, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    Xavier,
    He,
}

impl InitScheme {
    pub fn name(self) -> &'static str {
        match self {
            InitScheme::Xavier => "xavier",
            InitScheme::He => "he",
        }
    }

    pub fn sample<T: Real>(self, arch: &Architecture, rng: &mut SeededRng) -> ParamSet<T> {
        match self {
            InitScheme::Xavier => ParamSet::xavier(arch.clone(), rng),
            InitScheme::He => ParamSet::he(arch.clone(), rng),
        }
    }
}

/// One initialisation under comparison. Without `pretrained`, every
/// (seed, task) run draws a fresh network from `init`.
#[derive(Clone, Debug)]
pub struct Candidate<T> {
    pub init: InitScheme,
    /// Label for the `pretrain` column, e.g. `none`, `ours`, `random-label`.
    pub pretrain: String,
    pub pretrained: Option<ParamSet<T>>,
}

#[derive(Clone, Debug)]
pub struct BenchmarkSpec {
    pub dims: Vec<usize>,
    pub ns: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Tasks per seed, drawn afresh for every seed unless `fixed_tasks` is set.
    pub tasks: usize,
    pub fixed_tasks: Option<Vec<TaskSpec>>,
    pub finetune: FinetuneConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkRow {
    pub init: String,
    pub pretrain: String,
    pub n: usize,
    pub seed: u64,
    pub task_mask: u16,
    pub test_acc: f64,
}

/// Aggregate over seeds for one (init, pretrain, N): the mean accuracy of
/// each seed's task suite, and the within-suite standard deviation, each
/// summarised as mean ± std across seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub init: String,
    pub pretrain: String,
    pub n: usize,
    pub runs: usize,
    pub mean_acc: MeanStd,
    pub task_std: MeanStd,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkReport {
    pub rows: Vec<BenchmarkRow>,
    pub summary: Vec<SummaryRow>,
}

impl BenchmarkSpec {
    fn task_suite(&self, seed: u64) -> Result<Vec<TaskSpec>> {
        match &self.fixed_tasks {
            Some(t) => Ok(t.clone()),
            None => sample_tasks(self.tasks, &mut SeededRng::for_purpose(seed, Stream::Tasks)),
        }
    }
}

/// Fine-tunes every candidate on every task of every seed's suite. The
/// suite depends only on the seed, so all candidates see the same tasks.
pub fn run_benchmark<T: Real>(
    candidates: &[Candidate<T>],
    spec: &BenchmarkSpec,
    train: &Dataset<T>,
    test: &Dataset<T>,
) -> Result<BenchmarkReport> {
    if candidates.is_empty() || spec.ns.is_empty() || spec.seeds.is_empty() {
        return Err(Error::Config(
            "benchmark needs at least one init, one N and one seed".into(),
        ));
    }
    let arch = Architecture::classifier(&spec.dims)?;
    if arch.output_dim() != 2 {
        return Err(Error::dims("binary task output", 2, arch.output_dim()));
    }
    for c in candidates {
        if let Some(p) = &c.pretrained {
            if p.arch() != &arch {
                return Err(Error::Config(format!(
                    "pretrained network has dims {:?}, benchmark expects {:?}",
                    p.arch().dims(),
                    spec.dims
                )));
            }
        }
    }
    let suites: Vec<Vec<TaskSpec>> = spec.seeds.iter().map(|&s| spec.task_suite(s)).collect::<Result<_>>()?;
    if suites.iter().any(|s| s.is_empty()) {
        return Err(Error::Config("benchmark needs at least one task".into()));
    }

    let mut jobs = Vec::new();
    for (ci, _) in candidates.iter().enumerate() {
        for &n in &spec.ns {
            for (si, &seed) in spec.seeds.iter().enumerate() {
                for (ti, &task) in suites[si].iter().enumerate() {
                    jobs.push((ci, n, seed, ti, task));
                }
            }
        }
    }
    let rows: Vec<BenchmarkRow> = jobs
        .into_par_iter()
        .map(|(ci, n, seed, ti, task)| {
            let c = &candidates[ci];
            let init = match &c.pretrained {
                Some(p) => p.clone(),
                None => c
                    .init
                    .sample(&arch, &mut SeededRng::for_purpose(seed, Stream::Init).child(ti as u64)),
            };
            let config = FinetuneConfig { seed, ..spec.finetune };
            let out = finetune_eval(&init, task, n, train, test, &config)?;
            log::debug!(
                "{} {} N={n} seed={seed} task={} acc={}",
                c.init.name(),
                c.pretrain,
                task.mask(),
                out.test_accuracy
            );
            Ok(BenchmarkRow {
                init: c.init.name().to_string(),
                pretrain: c.pretrain.clone(),
                n,
                seed,
                task_mask: task.mask(),
                test_acc: out.test_accuracy,
            })
        })
        .collect::<Result<_>>()?;
    let summary = summarize(&rows);
    Ok(BenchmarkReport { rows, summary })
}

/// Groups rows by (init, pretrain, N) in first-appearance order.
pub fn summarize(rows: &[BenchmarkRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, String, usize)> = Vec::new();
    for r in rows {
        let k = (r.init.clone(), r.pretrain.clone(), r.n);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(init, pretrain, n)| {
            let group: Vec<&BenchmarkRow> = rows
                .iter()
                .filter(|r| r.init == init && r.pretrain == pretrain && r.n == n)
                .collect();
            let mut seeds: Vec<u64> = Vec::new();
            for r in &group {
                if !seeds.contains(&r.seed) {
                    seeds.push(r.seed);
                }
            }
            let per_seed: Vec<MeanStd> = seeds
                .iter()
                .map(|&s| {
                    MeanStd::of(
                        &group
                            .iter()
                            .filter(|r| r.seed == s)
                            .map(|r| r.test_acc)
                            .collect::<Vec<_>>(),
                    )
                })
                .collect();
            SummaryRow {
                init,
                pretrain,
                n,
                runs: seeds.len(),
                mean_acc: MeanStd::of(&per_seed.iter().map(|m| m.mean).collect::<Vec<_>>()),
                task_std: MeanStd::of(&per_seed.iter().map(|m| m.std).collect::<Vec<_>>()),
            }
        })
        .collect()
}

/// `init,pretrain,N,seed,task_mask,test_acc`.
pub fn write_benchmark_csv(path: &Path, rows: &[BenchmarkRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["init", "pretrain", "N", "seed", "task_mask", "test_acc"])?;
    for r in rows {
        w.write_record([
            r.init.clone(),
            r.pretrain.clone(),
            r.n.to_string(),
            r.seed.to_string(),
            r.task_mask.to_string(),
            sig6(r.test_acc),
        ])?;
    }
    finish(w, path)
}

/// One row per (init, pretrain, N) with accuracy and task-std columns.
pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "init",
        "pretrain",
        "N",
        "runs",
        "mean_acc",
        "mean_acc_std",
        "task_std",
        "task_std_std",
    ])?;
    for r in rows {
        w.write_record([
            r.init.clone(),
            r.pretrain.clone(),
            r.n.to_string(),
            r.runs.to_string(),
            sig6(r.mean_acc.mean),
            sig6(r.mean_acc.std),
            sig6(r.task_std.mean),
            sig6(r.task_std.std),
        ])?;
    }
    finish(w, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::ndcore::Matrix;

    fn toy() -> (Dataset<f32>, Dataset<f32>) {
        let mut rng = SeededRng::new(5, 1);
        let make = |n: usize, split, rng: &mut SeededRng| {
            let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
            let data = labels
                .iter()
                .flat_map(|&l| (0..6).map(move |j| if j == l as usize % 6 { 2.0 } else { 0.0 }))
                .map(|v: f32| v + 0.3 * f32::std_normal(rng))
                .collect::<Vec<_>>();
            Dataset {
                images: Matrix::from_vec(n, 6, data).unwrap(),
                labels,
                split,
            }
        };
        (make(120, Split::Train, &mut rng), make(60, Split::Test, &mut rng))
    }

    fn spec(seeds: Vec<u64>, tasks: usize) -> BenchmarkSpec {
        BenchmarkSpec {
            dims: vec![6, 8, 2],
            ns: vec![5],
            seeds,
            tasks,
            fixed_tasks: None,
            finetune: FinetuneConfig {
                epochs: 2,
                ..FinetuneConfig::default()
            },
        }
    }

    #[test]
    fn single_run_reduces_to_one_accuracy() {
        let (train, test) = toy();
        let c = vec![Candidate::<f32> {
            init: InitScheme::Xavier,
            pretrain: "none".into(),
            pretrained: None,
        }];
        let r = run_benchmark(&c, &spec(vec![1], 1), &train, &test).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert_eq!(r.summary.len(), 1);
        assert_eq!(r.summary[0].mean_acc.mean, r.rows[0].test_acc);
        assert_eq!(r.summary[0].mean_acc.std, 0.0);
        assert_eq!(r.summary[0].task_std.mean, 0.0);
        assert!((0.0..=100.0).contains(&r.rows[0].test_acc));
    }

    #[test]
    fn candidates_share_task_suites() {
        let (train, test) = toy();
        let pretrained =
            InitScheme::He.sample::<f32>(&Architecture::new(&[6, 8, 2]).unwrap(), &mut SeededRng::new(9, 1));
        let c = vec![
            Candidate {
                init: InitScheme::Xavier,
                pretrain: "none".into(),
                pretrained: None,
            },
            Candidate {
                init: InitScheme::He,
                pretrain: "ours".into(),
                pretrained: Some(pretrained),
            },
        ];
        let r = run_benchmark(&c, &spec(vec![1, 2], 3), &train, &test).unwrap();
        assert_eq!(r.rows.len(), 12);
        let masks = |p: &str, seed| -> Vec<u16> {
            r.rows
                .iter()
                .filter(|x| x.pretrain == p && x.seed == seed)
                .map(|x| x.task_mask)
                .collect()
        };
        assert_eq!(masks("none", 1), masks("ours", 1));
        assert_eq!(masks("none", 2), masks("ours", 2));
        assert_ne!(masks("none", 1), masks("none", 2));
        assert_eq!(r, run_benchmark(&c, &spec(vec![1, 2], 3), &train, &test).unwrap());
    }

    #[test]
    fn summary_statistics() {
        let row = |seed, acc| BenchmarkRow {
            init: "xavier".into(),
            pretrain: "none".into(),
            n: 5,
            seed,
            task_mask: 1,
            test_acc: acc,
        };
        let s = summarize(&[row(1, 80.0), row(1, 90.0), row(2, 70.0), row(2, 70.0)]);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].runs, 2);
        assert_eq!(s[0].mean_acc.mean, 77.5);
        assert!((s[0].mean_acc.std - 15.0 / 2f64.sqrt()).abs() < 1e-12);
        let s1 = 50f64.sqrt();
        assert!((s[0].task_std.mean - s1 / 2.0).abs() < 1e-12);
    }
}
