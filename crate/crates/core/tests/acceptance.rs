//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines are always printed.
//! Criterion 7 needs the Last.FM `user_artists.dat` file and runs only when
//! `RADAR_LASTFM_PATH` points at it.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::{grad_error, module_grad_error, randn, uniform};
use radar::contrastive::{acl_loss, ib_loss, infonce_loss, predict, AclBatch, AclPredictor};
use radar::dataset::{
    generate_synthetic, load_interactions, split_dataset, InteractionDataset, Interaction, LoadOptions, Split, SyntheticSpec,
};
use radar::denoise::{compose_with_gate, concrete_loss, layer_scores, retention_probs, Denoiser, GraphInputs, ScorerKind};
use radar::diffusion::{build_schedule, elbo_loss, forward_sample, forward_step, DenoiserNet};
use radar::encoder::{bpr_loss, Triple};
use radar::eval::all_ranking_evaluate;
use radar::experiments::{noise_robustness_sweep, SweepOptions};
use radar::graph::build_normalized_adjacency;
use radar::numerics::{RngStream, Tape, Tensor};
use radar::stats::ks_two_sample;
use radar::trainer::{train, train_bpr_mf, Model, RunDir, TrainConfig, Variant};
use radar::vgae::{discriminative_loss, kl_loss, vgae_encode, Vgae};

type Check = fn() -> Result<String, String>;

fn ensure(ok: bool, detail: String) -> Result<String, String> {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() -> ExitCode {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let checks: [(usize, &str, Check); 9] = [
        (1, "gradient suite", criterion_1),
        (2, "metric oracle", criterion_2),
        (3, "diffusion chain equivalence", criterion_3),
        (4, "unit values", criterion_4),
        (5, "training sanity", criterion_5),
        (6, "robustness direction", criterion_6),
        (7, "Last.FM end-to-end", criterion_7),
        (8, "determinism", criterion_8),
        (9, "complexity contract", criterion_9),
    ];
    let mut failed = 0;
    for (n, name, check) in checks {
        let label = format!("criterion_{n}");
        if !filter.is_empty() && !filter.iter().any(|f| label.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(d) if d.starts_with("SKIP") => println!("criterion {n} ({name}): {d} [{secs:.1}s]"),
            Ok(d) => println!("criterion {n} ({name}): PASS - {d} [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL - {d} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn small_graph(seed: u64, users: usize, items: usize) -> InteractionDataset {
    let mut rng = RngStream::new(seed);
    let mut pairs: Vec<(usize, usize)> = (0..users).map(|u| (u, rng.below(items))).collect();
    pairs.extend((0..items).map(|i| (rng.below(users), i)));
    for _ in 0..users {
        pairs.push((rng.below(users), rng.below(items)));
    }
    pairs.sort_unstable();
    pairs.dedup();
    InteractionDataset::from_pairs(users, items, &pairs).unwrap()
}

fn criterion_1() -> Result<String, String> {
    let t = Instant::now();
    let mut worst: Vec<(&str, f64)> = Vec::new();
    for seed in 0..5u64 {
        let (n, m, d) = (6usize, 8usize, 4usize);
        let ds = small_graph(seed, n, m);
        let adj = build_normalized_adjacency(&ds, false).unwrap();
        let eu = randn(n, d, 0.5, seed ^ 1);
        let ev = randn(m, d, 0.5, seed ^ 2);
        let mut rng = RngStream::new(seed ^ 3);
        let triples: Vec<Triple> = (0..10)
            .map(|_| Triple {
                user: rng.below(n),
                pos: rng.below(m),
                neg: rng.below(m),
            })
            .collect();
        let mut push = |name, e: f64| match worst.iter_mut().find(|(k, _)| *k == name) {
            Some(w) => w.1 = w.1.max(e),
            None => worst.push((name, e)),
        };

        push("bpr", grad_error(&[eu.clone(), ev.clone()], |t, v| bpr_loss(t, v[0], v[1], &triples)));

        let mean = randn(n + m, d, 1.0, seed ^ 4);
        let std = uniform(n + m, d, 0.3, 1.5, seed ^ 5);
        push("kl", grad_error(&[mean, std], |t, v| kl_loss(t, &[(v[0], v[1])])));

        let vgae = Vgae::new(d, &mut RngStream::new(seed ^ 6));
        let pattern = Arc::clone(adj.pattern());
        let adj_col = Tensor::column(adj.values().to_vec());
        push(
            "kl (through encoder)",
            module_grad_error(&vgae, |v| v.params(), |v| v.params_mut(), |t, v, tr| {
                let b = v.params().bind(t, tr);
                let lat = vgae_encode(t, &b, &pattern, t.constant(adj_col.clone()), t.constant(eu.clone()), t.constant(ev.clone()), None)?;
                Ok((kl_loss(t, &[(lat.user.mean, lat.user.std), (lat.item.mean, lat.item.std)])?, b))
            }),
        );
        let pos: Vec<(usize, usize)> = triples.iter().map(|x| (x.user, x.pos)).collect();
        let neg: Vec<(usize, usize)> = triples.iter().map(|x| (x.user, x.neg)).collect();
        push(
            "discriminative",
            module_grad_error(&vgae, |v| v.params(), |v| v.params_mut(), |t, v, tr| {
                let b = v.params().bind(t, tr);
                let zu = t.constant(eu.clone());
                let zv = t.constant(ev.clone());
                Ok((discriminative_loss(t, &b, zu, zv, &pos, &neg)?, b))
            }),
        );
        let (zu, zv) = (randn(n, d, 1.0, seed ^ 7), randn(m, d, 1.0, seed ^ 8));
        let vparams: Vec<Tensor> = vgae.params().tensors().to_vec();
        push(
            "discriminative (latents)",
            grad_error(&[zu, zv], |t, v| {
                let b = radar::numerics::Bound(vparams.iter().map(|p| t.constant(p.clone())).collect());
                discriminative_loss(t, &b, v[0], v[1], &pos, &neg)
            }),
        );

        let scores = randn(adj.n_edges(), 1, 2.0, seed ^ 9);
        let log_theta = randn(1, 1, 0.3, seed ^ 10);
        push("concrete", grad_error(&[scores, log_theta], |t, v| concrete_loss(t, &[retention_probs(t, v[0], v[1])?])));
        let den = Denoiser::new(ScorerKind::Relational, 1, d, 5, &mut RngStream::new(seed ^ 11));
        push(
            "concrete (through scorer)",
            module_grad_error(&den, |x| x.params(), |x| x.params_mut(), |t, x, tr| {
                let b = x.params().bind(t, tr);
                let g = GraphInputs::new(t, &adj);
                let s = layer_scores(t, &b, x, 0, &g, t.constant(eu.clone()), t.constant(ev.clone()))?;
                let s = t.scale(s, 0.3)?;
                Ok((concrete_loss(t, &[retention_probs(t, s, t.scalar_const(0.0))?])?, b))
            }),
        );

        let sched = build_schedule(5, 0.5, 0.1, 0.5).unwrap();
        let net = DenoiserNet::new(d, 8, 4, &mut RngStream::new(seed ^ 12));
        let x0 = randn(5, d, 1.0, seed ^ 13);
        push(
            "elbo (net weights)",
            module_grad_error(&net, |x| x.params(), |x| x.params_mut(), |t, x, tr| {
                let on = x.on_tape(t, tr);
                let l = elbo_loss(t, &on, t.constant(x0.clone()), &sched, &mut RngStream::new(seed ^ 14))?;
                Ok((l, on.bound.clone()))
            }),
        );
        push(
            "elbo (inputs)",
            grad_error(std::slice::from_ref(&x0), |t, v| elbo_loss(t, &net.on_tape(t, false), v[0], &sched, &mut RngStream::new(seed ^ 14))),
        );

        let a = randn(7, d, 1.0, seed ^ 15);
        let b2 = randn(7, d, 1.0, seed ^ 16);
        push("infonce", grad_error(&[a, b2], |t, v| infonce_loss(t, v[0], v[1], 0.5)));

        let anchors = 5;
        let ident = randn(anchors, d, 1.0, seed ^ 17);
        let context = randn(n + m, d, 1.0, seed ^ 18);
        let context2 = randn(n + m, d, 1.0, seed ^ 19);
        let ident2 = randn(anchors, d, 1.0, seed ^ 20);
        let mut nrng = RngStream::new(seed ^ 21);
        let neighbors: Vec<Vec<usize>> = (0..anchors)
            .map(|k| if k == 2 { Vec::new() } else { (0..1 + nrng.below(3)).map(|_| nrng.below(n + m)).collect() })
            .collect();
        let pred = AclPredictor::new(d, &mut RngStream::new(seed ^ 22));
        let pparams: Vec<Tensor> = pred.params().tensors().to_vec();
        let batch = |t: &Tape, id: radar::numerics::Var, ctx: radar::numerics::Var| -> radar::Result<AclBatch> {
            let b = radar::numerics::Bound(pparams.iter().map(|p| t.constant(p.clone())).collect());
            Ok(AclBatch {
                identity: id,
                predicted: predict(t, &b, id)?,
                context: ctx,
                neighbors: neighbors.clone(),
            })
        };
        push(
            "acl",
            grad_error(&[ident.clone(), context.clone()], |t, v| Ok(acl_loss(t, &batch(t, v[0], v[1])?, 0.5)?.loss)),
        );
        push(
            "acl (predictor)",
            module_grad_error(&pred, |x| x.params(), |x| x.params_mut(), |t, x, tr| {
                let b = x.params().bind(t, tr);
                let id = t.constant(ident.clone());
                let out = acl_loss(
                    t,
                    &AclBatch {
                        identity: id,
                        predicted: predict(t, &b, id)?,
                        context: t.constant(context.clone()),
                        neighbors: neighbors.clone(),
                    },
                    0.5,
                )?;
                Ok((out.loss, b))
            }),
        );
        push(
            "ib",
            grad_error(&[ident.clone(), context.clone(), ident2, context2], |t, v| {
                ib_loss(t, &batch(t, v[0], v[1])?, &batch(t, v[2], v[3])?, 5.5, 0.5)
            }),
        );
    }
    let elapsed = t.elapsed();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let detail = format!(
        "max rel. error {max:.2e} over {} losses x 5 instances ({})",
        worst.len(),
        worst.iter().map(|(k, e)| format!("{k} {e:.1e}")).collect::<Vec<_>>().join(", ")
    );
    ensure(max < 1e-4 && elapsed < Duration::from_secs(120), detail)
}

/// Rank of `item` among the non-excluded items: count of items scoring
/// higher, or equal with a smaller index.
fn brute_rank(scores: &[f64], excluded: &[usize], item: usize) -> usize {
    (0..scores.len())
        .filter(|j| !excluded.contains(j))
        .filter(|&j| scores[j] > scores[item] || (scores[j] == scores[item] && j < item))
        .count()
}

fn criterion_2() -> Result<String, String> {
    let t = Instant::now();
    let ks = [1usize, 5, 20, 40];
    let mut compared = 0;
    for inst in 0..100u64 {
        let mut rng = RngStream::new(1000 + inst);
        let n = 1 + rng.below(20);
        let m = 2 + rng.below(49);
        let d = 1 + rng.below(4);
        // integer-valued embeddings make score ties common
        let quant = |r: usize, rng: &mut RngStream| {
            Tensor::from_vec(r, d, (0..r * d).map(|_| rng.below(3) as f64 - 1.0).collect()).unwrap()
        };
        let user = quant(n, &mut rng);
        let item = quant(m, &mut rng);
        let mut edges = Vec::new();
        for u in 0..n {
            for i in 0..m {
                let x = rng.uniform();
                let split = if x < 0.15 {
                    Split::Train
                } else if x < 0.25 {
                    Split::Test
                } else {
                    continue;
                };
                edges.push(Interaction { user: u, item: i, weight: 1.0, split });
            }
        }
        let ids = |k: usize, p: &str| (0..k).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
        let ds = InteractionDataset::new(ids(n, "u"), ids(m, "i"), edges).unwrap();
        let (report, _) = all_ranking_evaluate(&user, &item, &ds, Split::Test, &ks).unwrap();
        let train = ds.positives(Split::Train);
        let test = ds.positives(Split::Test);
        for &k in &ks {
            let (mut rec, mut ndcg, mut users) = (0.0, 0.0, 0);
            for u in 0..n {
                if test[u].is_empty() {
                    continue;
                }
                users += 1;
                let scores: Vec<f64> = (0..m).map(|i| user.row(u).iter().zip(item.row(i)).map(|(a, b)| a * b).sum()).collect();
                let ranks: Vec<usize> = test[u].iter().map(|&i| brute_rank(&scores, &train[u], i)).collect();
                let hits: Vec<usize> = ranks.iter().copied().filter(|&r| r < k).collect();
                rec += hits.len() as f64 / test[u].len() as f64;
                let dcg: f64 = hits.iter().map(|&r| 1.0 / ((r + 2) as f64).log2()).sum();
                let idcg: f64 = (0..k.min(test[u].len())).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
                ndcg += dcg / idcg;
            }
            let (er, en) = if users == 0 { (0.0, 0.0) } else { (rec / users as f64, ndcg / users as f64) };
            if (report.recall(k) - er).abs() > 1e-12 || (report.ndcg(k) - en).abs() > 1e-12 {
                return Err(format!("instance {inst}, K={k}: recall {} vs {er}, ndcg {} vs {en}", report.recall(k), report.ndcg(k)));
            }
            compared += 1;
        }
    }
    let elapsed = t.elapsed();
    ensure(elapsed < Duration::from_secs(30), format!("{compared} (instance, K) pairs within 1e-12 of brute-force rank counting"))
}

fn criterion_3() -> Result<String, String> {
    let t = Instant::now();
    let sched = build_schedule(5, 1.0, 0.1, 0.5).map_err(|e| e.to_string())?;
    let endpoints = (1.0 - sched.alpha_bar(1), 1.0 - sched.alpha_bar(5));
    let mut min_p = 1.0f64;
    let n = 10_000;
    let x0 = Tensor::from_vec(n, 2, (0..n).flat_map(|_| [0.7, -1.3]).collect()).unwrap();
    for step in 1..=5usize {
        let closed = forward_sample(&x0, step, &sched, Some(&mut RngStream::new(10 + step as u64))).unwrap();
        let mut iter = x0.clone();
        let mut rng = RngStream::new(20 + step as u64);
        for s in 1..=step {
            iter = forward_step(&iter, s, &sched, Some(&mut rng)).unwrap();
        }
        for c in 0..2 {
            let a: Vec<f64> = (0..n).map(|r| closed.get(r, c)).collect();
            let b: Vec<f64> = (0..n).map(|r| iter.get(r, c)).collect();
            let (_, p) = ks_two_sample(&a, &b).unwrap();
            min_p = min_p.min(p);
        }
    }
    let exact = (endpoints.0 - 0.1).abs() < 1e-15 && (endpoints.1 - 0.5).abs() < 1e-15;
    let s2 = build_schedule(50, 0.2, 0.05, 0.5).unwrap();
    let exact2 = (1.0 - s2.alpha_bar(1) - 0.2 * 0.05).abs() < 1e-15 && (1.0 - s2.alpha_bar(50) - 0.2 * 0.5).abs() < 1e-15;
    ensure(
        min_p > 0.01 && exact && exact2 && t.elapsed() < Duration::from_secs(60),
        format!("min KS p-value {min_p:.3} over t=1..5 x 2 coords; endpoints 1-a1={}, 1-aT={}", endpoints.0, endpoints.1),
    )
}

fn criterion_4() -> Result<String, String> {
    let tape = Tape::new();
    let kl = kl_loss(&tape, &[(tape.constant(Tensor::zeros(3, 4)), tape.constant(Tensor::ones(3, 4)))]).unwrap();
    let kl = tape.item(kl).unwrap();
    let bpr = bpr_loss(
        &tape,
        tape.constant(Tensor::full(2, 3, 0.5)),
        tape.constant(Tensor::full(4, 3, 0.25)),
        &[Triple { user: 0, pos: 1, neg: 2 }, Triple { user: 1, pos: 3, neg: 0 }],
    )
    .unwrap();
    let bpr = tape.item(bpr).unwrap();
    let lc = concrete_loss(&tape, &[tape.constant(Tensor::ones(10, 1)), tape.constant(Tensor::ones(10, 1))]).unwrap();
    let lc = tape.item(lc).unwrap();
    let e = [0.3, -1.2, 2.5];
    let composed = compose_with_gate(&[0.0; 3], &[9.0, 9.0, 9.0], &e);
    let star = InteractionDataset::from_pairs(1, 2, &[(0, 0), (0, 1)]).unwrap();
    let adj = build_normalized_adjacency(&star, false).unwrap();
    let entry = adj.matrix().get(0, 0).max(adj.matrix().get(0, 1));
    let ok = kl.abs() <= 1e-12
        && (bpr - std::f64::consts::LN_2).abs() <= 1e-12
        && lc.abs() <= 1e-12
        && composed == e
        && (entry - std::f64::consts::FRAC_1_SQRT_2).abs() <= 1e-12
        && (adj.matrix().get(0, 0) - adj.matrix().get(0, 1)).abs() <= 1e-12;
    ensure(ok, format!("kl {kl:e}, bpr {bpr} (ln 2 = {}), L_c {lc:e}, compose(g=0) {composed:?}, star entry {entry}", std::f64::consts::LN_2))
}

/// Desk-scale configuration used by the synthetic criteria.
fn desk_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 15,
        phase1_steps: 20,
        batch_size: 512,
        lambda3: 0.01,
        gen_lr: 1e-2,
        diff_steps: 20,
        denoise_steps: 3,
        phase2_steps: 10,
        phase3_steps: 10,
        concrete_weight: 0.1,
        seed,
        ..TrainConfig::default()
    }
}

fn clustered(seed: u64, edges_per_user: usize) -> InteractionDataset {
    let c = generate_synthetic(SyntheticSpec::new(200, 200, 4, edges_per_user, seed)).unwrap();
    split_dataset(&c.dataset, [0.7, 0.2, 0.1], seed).unwrap()
}

fn criterion_5() -> Result<String, String> {
    let t = Instant::now();
    let (mut full, mut mf) = (Vec::new(), Vec::new());
    for seed in 0..5u64 {
        let ds = clustered(seed, 8);
        let cfg = desk_config(seed);
        let out = train(&ds, &cfg, None).map_err(|e| e.to_string())?;
        full.push(out.best.map(|b| b.valid.recall(20)).unwrap_or(0.0));
        mf.push(train_bpr_mf(&ds, &cfg).map_err(|e| e.to_string())?.best_valid.recall(20));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (a, b) = (mean(&full), mean(&mf));
    let random = 20.0 / 200.0;
    ensure(
        a >= 3.0 * random && a >= b && t.elapsed() < Duration::from_secs(600),
        format!("mean valid Recall@20 {a:.4} (3K/M = {:.2}, BPR-MF {b:.4}); per seed {full:.3?} vs {mf:.3?}", 3.0 * random),
    )
}

fn criterion_6() -> Result<String, String> {
    let mut deg = [Vec::new(), Vec::new()];
    for seed in 0..5u64 {
        let ds = clustered(seed, 8);
        let cfg = TrainConfig {
            epochs: 10,
            ..desk_config(seed)
        };
        let r = noise_robustness_sweep(
            &ds,
            &cfg,
            &[0.25],
            &[Variant::Full, Variant::GenGen],
            &SweepOptions {
                seeds: vec![seed],
                ..SweepOptions::default()
            },
        )
        .map_err(|e| e.to_string())?;
        for (k, row) in r.rows.iter().enumerate() {
            deg[k].push(row.degradation["recall@20"]);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (a, b) = (mean(&deg[0]), mean(&deg[1]));
    ensure(a <= b, format!("mean relative Recall@20 degradation at 25% noise: full {a:.4}, gen+gen (no denoiser) {b:.4}"))
}

fn criterion_7() -> Result<String, String> {
    let Ok(path) = std::env::var("RADAR_LASTFM_PATH") else {
        return Ok("SKIP - set RADAR_LASTFM_PATH to the Last.FM user_artists.dat file to run".into());
    };
    let t = Instant::now();
    let opts = LoadOptions {
        header: true,
        ..LoadOptions::default()
    };
    let raw = load_interactions(std::path::Path::new(&path), &opts).map_err(|e| e.to_string())?;
    let ds = split_dataset(&raw, [0.7, 0.2, 0.1], 2024).map_err(|e| e.to_string())?;
    let epochs = std::env::var("RADAR_LASTFM_EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(100);
    let cfg = TrainConfig {
        dim: 64,
        layers: 3,
        epochs,
        phase1_steps: raw.len() / 1024 + 1,
        ..TrainConfig::default()
    };
    let out = train(&ds, &cfg, None).map_err(|e| e.to_string())?;
    let test = out.evaluate(&ds, Split::Test).map_err(|e| e.to_string())?;
    let r = test.recall(20);
    let stretch = if r >= 0.9 * 0.2724 { "stretch target met" } else { "stretch target not met" };
    ensure(
        r >= 0.235 && t.elapsed() < Duration::from_secs(4 * 3600),
        format!("{} interactions, test Recall@20 {r:.4} after {epochs} epochs ({stretch})", raw.len()),
    )
}

fn criterion_8() -> Result<String, String> {
    let ds = clustered(11, 8);
    let cfg = TrainConfig {
        epochs: 3,
        phase1_steps: 5,
        ..desk_config(11)
    };
    let mut logs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let mut run = RunDir::create(dir.path(), "det", &cfg, &ds.checksum()).map_err(|e| e.to_string())?;
        train(&ds, &cfg, Some(&mut run)).map_err(|e| e.to_string())?;
        logs.push(std::fs::read(run.path().join("metrics.jsonl")).unwrap());
    }
    ensure(logs[0] == logs[1] && !logs[0].is_empty(), format!("two runs wrote byte-identical metrics logs ({} bytes)", logs[0].len()))
}

fn phase1_seconds(edges_per_user: usize) -> f64 {
    let c = generate_synthetic(SyntheticSpec::new(1000, 1000, 4, edges_per_user, 5)).unwrap();
    let ds = split_dataset(&c.dataset, [0.7, 0.2, 0.1], 5).unwrap();
    let mut model = Model::new(&ds, &desk_config(5)).unwrap();
    model.run_phase1().unwrap();
    let mut times: Vec<f64> = (0..3)
        .map(|_| {
            let t = Instant::now();
            model.run_phase1().unwrap();
            t.elapsed().as_secs_f64()
        })
        .collect();
    times.sort_by(f64::total_cmp);
    times[1]
}

fn criterion_9() -> Result<String, String> {
    let small = phase1_seconds(20);
    let large = phase1_seconds(40);
    let ratio = large / small;
    ensure(ratio <= 2.5, format!("phase-1 epoch {small:.3}s at |E|=20k, {large:.3}s at |E|=40k, ratio {ratio:.2}"))
}
