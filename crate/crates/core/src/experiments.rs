//! Multi-run harnesses: ablation table, noise-robustness sweep and λ sweep,
//! with JSONL and CSV writers whose column sets are fixed.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::dataset::{bucket_by_degree, inject_noise, Axis, InteractionDataset, NoiseSpec, Split};
use crate::error::{contract, Result};
use crate::eval::{all_ranking_evaluate, sparsity_group_report, BucketReport, MetricReport};
use crate::numerics::par;
use crate::trainer::{train, TrainConfig, Variant, KS};

/// Default noise ratios of the robustness sweep.
pub const DEFAULT_RATIOS: [f64; 5] = [0.05, 0.10, 0.15, 0.20, 0.25];
/// Default user-degree bucket boundaries (five buckets).
pub const DEFAULT_BUCKETS: [usize; 4] = [4, 8, 16, 32];

/// Reported metric columns, in CSV order.
pub const METRICS: [&str; 4] = ["recall@20", "ndcg@20", "recall@40", "ndcg@40"];

#[derive(Clone, Debug)]
pub struct SweepOptions {
    pub seeds: Vec<u64>,
    /// Run independent jobs on the worker pool instead of one after another.
    pub parallel: bool,
    pub bucket_boundaries: Vec<usize>,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            seeds: vec![2024],
            parallel: false,
            bucket_boundaries: DEFAULT_BUCKETS.to_vec(),
        }
    }
}

/// One trained-and-tested model.
#[derive(Clone, Debug, Serialize)]
pub struct RunRecord {
    pub variant: String,
    pub seed: u64,
    pub best_epoch: Option<usize>,
    pub valid: MetricReport,
    pub test: MetricReport,
    /// Test Recall@20 / NDCG@20 per user-degree bucket.
    pub buckets: Vec<BucketReport>,
}

/// Trains `variant` with `seed` and scores the best-validation state on the
/// test split.
pub fn run_once(ds: &InteractionDataset, cfg: &TrainConfig, variant: Variant, seed: u64, boundaries: &[usize]) -> Result<RunRecord> {
    let cfg = TrainConfig {
        variant,
        seed,
        ..cfg.clone()
    };
    let out = train(ds, &cfg, None)?;
    let p = out.best_final_embeddings()?;
    let (test, ranking) = all_ranking_evaluate(&p.user, &p.item, ds, Split::Test, &KS)?;
    let buckets = bucket_by_degree(ds, Axis::User, boundaries)?;
    Ok(RunRecord {
        variant: variant.name().to_string(),
        seed,
        best_epoch: out.best.as_ref().map(|b| b.epoch),
        valid: out.best.map(|b| b.valid).unwrap_or_default(),
        test,
        buckets: sparsity_group_report(&ranking, &buckets, Axis::User, 20)?,
    })
}

fn run_jobs<J: Sync, T: Send>(jobs: &[J], parallel: bool, f: impl Fn(&J) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    let out: Vec<Result<T>> = if parallel {
        par::map_indices(jobs.len(), |k| f(&jobs[k]))
    } else {
        jobs.iter().map(&f).collect()
    };
    out.into_iter().collect()
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

#[derive(Clone, Debug, Serialize)]
pub struct AggregateRow {
    pub variant: String,
    pub runs: usize,
    pub mean: BTreeMap<String, f64>,
    pub std: BTreeMap<String, f64>,
}

fn aggregate(variant: &str, runs: &[&RunRecord]) -> AggregateRow {
    let mut mean = BTreeMap::new();
    let mut std = BTreeMap::new();
    for m in METRICS {
        let xs: Vec<f64> = runs.iter().map(|r| r.test.get(m)).collect();
        let (a, b) = mean_std(&xs);
        mean.insert(m.to_string(), a);
        std.insert(m.to_string(), b);
    }
    AggregateRow {
        variant: variant.to_string(),
        runs: runs.len(),
        mean,
        std,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub runs: Vec<RunRecord>,
    pub aggregate: Vec<AggregateRow>,
}

pub fn ablation(ds: &InteractionDataset, cfg: &TrainConfig, variants: &[Variant], opts: &SweepOptions) -> Result<AblationReport> {
    if variants.is_empty() {
        return contract("ablation needs at least one variant");
    }
    if opts.seeds.is_empty() {
        return contract("at least one seed is required");
    }
    let jobs: Vec<(Variant, u64)> = variants.iter().flat_map(|&v| opts.seeds.iter().map(move |&s| (v, s))).collect();
    let runs = run_jobs(&jobs, opts.parallel, |&(v, s)| run_once(ds, cfg, v, s, &opts.bucket_boundaries))?;
    let aggregate = variants
        .iter()
        .map(|v| aggregate(v.name(), &runs.iter().filter(|r| r.variant == v.name()).collect::<Vec<_>>()))
        .collect();
    Ok(AblationReport { runs, aggregate })
}

impl AblationReport {
    /// `variant,seed,recall@20,ndcg@20,recall@40,ndcg@40` per run, then
    /// `variant,mean,...` and `variant,std,...` rows.
    pub fn to_csv(&self) -> String {
        let mut s = format!("variant,seed,{}\n", METRICS.join(","));
        for r in &self.runs {
            let _ = writeln!(s, "{},{},{}", r.variant, r.seed, metric_cells(|m| r.test.get(m)));
        }
        for a in &self.aggregate {
            let _ = writeln!(s, "{},mean,{}", a.variant, metric_cells(|m| a.mean[m]));
            let _ = writeln!(s, "{},std,{}", a.variant, metric_cells(|m| a.std[m]));
        }
        s
    }
}

fn metric_cells(f: impl Fn(&str) -> f64) -> String {
    METRICS.iter().map(|m| format!("{:.6}", f(m))).collect::<Vec<_>>().join(",")
}

/// One (variant, seed, ratio) cell of the robustness sweep.
#[derive(Clone, Debug, Serialize)]
pub struct RobustnessRow {
    pub variant: String,
    pub seed: u64,
    pub ratio: f64,
    pub run: RunRecord,
    /// `(clean − noisy) / clean` per metric; 0 when the clean value is 0.
    pub degradation: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RobustnessTrend {
    pub variant: String,
    pub ratios: Vec<f64>,
    pub mean_recall20: Vec<f64>,
    pub mean_degradation: Vec<f64>,
    /// Whether mean Recall@20 never increases with the ratio.
    pub monotone: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct RobustnessReport {
    pub rows: Vec<RobustnessRow>,
    pub trends: Vec<RobustnessTrend>,
}

/// Trains every variant on the clean data and at every noise ratio, per
/// seed. Noise replaces training edges only; validation and test stay clean.
pub fn noise_robustness_sweep(ds: &InteractionDataset, cfg: &TrainConfig, ratios: &[f64], variants: &[Variant], opts: &SweepOptions) -> Result<RobustnessReport> {
    if variants.is_empty() {
        return contract("robustness sweep needs at least one variant");
    }
    if opts.seeds.is_empty() {
        return contract("at least one seed is required");
    }
    if let Some(r) = ratios.iter().find(|r| !(0.0..=0.5).contains(*r)) {
        return contract(format!("noise ratio {r} outside [0, 0.5]"));
    }
    let mut grid: Vec<f64> = std::iter::once(0.0).chain(ratios.iter().copied()).collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let mut jobs: Vec<(Variant, u64, f64)> = Vec::new();
    for &v in variants {
        for &s in &opts.seeds {
            jobs.extend(grid.iter().map(|&r| (v, s, r)));
        }
    }
    let runs = run_jobs(&jobs, opts.parallel, |&(v, s, r)| {
        let noisy = if r == 0.0 {
            ds.clone()
        } else {
            inject_noise(ds, NoiseSpec { ratio: r, seed: s })?
        };
        run_once(&noisy, cfg, v, s, &opts.bucket_boundaries)
    })?;
    let clean = |v: &str, s: u64| {
        jobs.iter()
            .zip(&runs)
            .find(|((jv, js, jr), _)| jv.name() == v && *js == s && *jr == 0.0)
            .map(|(_, r)| r.test.clone())
            .unwrap_or_default()
    };
    let rows: Vec<RobustnessRow> = jobs
        .iter()
        .zip(runs.iter())
        .filter(|((_, _, r), _)| ratios.contains(r))
        .map(|(&(v, s, r), run)| {
            let base = clean(v.name(), s);
            let degradation = METRICS
                .iter()
                .map(|m| {
                    let c = base.get(m);
                    (m.to_string(), if c > 0.0 { (c - run.test.get(m)) / c } else { 0.0 })
                })
                .collect();
            RobustnessRow {
                variant: v.name().to_string(),
                seed: s,
                ratio: r,
                run: run.clone(),
                degradation,
            }
        })
        .collect();
    let trends = variants
        .iter()
        .map(|v| {
            let per = |r: f64, f: &dyn Fn(&RobustnessRow) -> f64| {
                let xs: Vec<f64> = rows.iter().filter(|x| x.variant == v.name() && x.ratio == r).map(f).collect();
                mean_std(&xs).0
            };
            let recall: Vec<f64> = grid
                .iter()
                .map(|&r| {
                    if r == 0.0 && !ratios.contains(&0.0) {
                        let xs: Vec<f64> = opts.seeds.iter().map(|&s| clean(v.name(), s).recall(20)).collect();
                        mean_std(&xs).0
                    } else {
                        per(r, &|x| x.run.test.recall(20))
                    }
                })
                .collect();
            RobustnessTrend {
                variant: v.name().to_string(),
                ratios: grid.clone(),
                monotone: recall.windows(2).all(|w| w[1] <= w[0]),
                mean_degradation: grid.iter().map(|&r| if r == 0.0 { 0.0 } else { per(r, &|x| x.degradation["recall@20"]) }).collect(),
                mean_recall20: recall,
            }
        })
        .collect();
    Ok(RobustnessReport { rows, trends })
}

impl RobustnessReport {
    /// Rows of the requested ratios (the clean reference run only appears
    /// when 0 is requested). Columns: `variant,seed,ratio,recall@20,ndcg@20,recall@40,ndcg@40,
    /// deg_recall@20,deg_ndcg@20,deg_recall@40,deg_ndcg@40`.
    pub fn to_csv(&self) -> String {
        let deg: Vec<String> = METRICS.iter().map(|m| format!("deg_{m}")).collect();
        let mut s = format!("variant,seed,ratio,{},{}\n", METRICS.join(","), deg.join(","));
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.2},{},{}",
                r.variant,
                r.seed,
                r.ratio,
                metric_cells(|m| r.run.test.get(m)),
                metric_cells(|m| r.degradation[m])
            );
        }
        s
    }

    /// One JSON line per (variant, ratio, seed, bucket); bucket `all` holds
    /// the global metrics.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.rows {
            let base = serde_json::json!({
                "variant": r.variant, "ratio": r.ratio, "seed": r.seed, "bucket": "all",
                "metrics": r.run.test.metrics, "degradation": r.degradation,
            });
            s.push_str(&serde_json::to_string(&base)?);
            s.push('\n');
            for b in &r.run.buckets {
                let line = serde_json::json!({
                    "variant": r.variant, "ratio": r.ratio, "seed": r.seed, "bucket": b.label,
                    "users": b.ids, "evaluated": b.evaluated, "recall@20": b.recall, "ndcg@20": b.ndcg,
                });
                s.push_str(&serde_json::to_string(&line)?);
                s.push('\n');
            }
        }
        Ok(s)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LambdaRow {
    pub lambda_ratio: f64,
    pub runs: Vec<RunRecord>,
    pub mean: BTreeMap<String, f64>,
}

/// Full-model runs per `λ_ratio`, rows sorted by λ.
pub fn lambda_sweep(ds: &InteractionDataset, cfg: &TrainConfig, lambdas: &[f64], opts: &SweepOptions) -> Result<Vec<LambdaRow>> {
    if let Some(l) = lambdas.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
        return contract(format!("lambda values must be positive, got {l}"));
    }
    if opts.seeds.is_empty() {
        return contract("at least one seed is required");
    }
    let mut values = lambdas.to_vec();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let jobs: Vec<(f64, u64)> = values.iter().flat_map(|&l| opts.seeds.iter().map(move |&s| (l, s))).collect();
    let runs = run_jobs(&jobs, opts.parallel, |&(l, s)| {
        let c = TrainConfig {
            lambda_ratio: l,
            ..cfg.clone()
        };
        run_once(ds, &c, cfg.variant, s, &opts.bucket_boundaries)
    })?;
    Ok(values
        .iter()
        .map(|&l| {
            let rs: Vec<RunRecord> = jobs.iter().zip(&runs).filter(|((jl, _), _)| *jl == l).map(|(_, r)| r.clone()).collect();
            let agg = aggregate("", &rs.iter().collect::<Vec<_>>());
            LambdaRow {
                lambda_ratio: l,
                runs: rs,
                mean: agg.mean,
            }
        })
        .collect())
}

/// `lambda_ratio,runs,recall@20,ndcg@20,recall@40,ndcg@40` (means over seeds).
pub fn lambda_csv(rows: &[LambdaRow]) -> String {
    let mut s = format!("lambda_ratio,runs,{}\n", METRICS.join(","));
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.lambda_ratio, r.runs.len(), metric_cells(|m| r.mean[m]));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_examples() {
        assert_eq!(mean_std(&[]), (0.0, 0.0));
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }
}
