use radar::dataset::{generate_synthetic, split_dataset, InteractionDataset, SyntheticSpec};
use radar::experiments::{ablation, lambda_csv, lambda_sweep, noise_robustness_sweep, SweepOptions, DEFAULT_RATIOS};
use radar::trainer::{TrainConfig, Variant};

fn corpus() -> InteractionDataset {
    let c = generate_synthetic(SyntheticSpec::new(40, 50, 3, 6, 9)).unwrap();
    split_dataset(&c.dataset, [0.7, 0.1, 0.2], 9).unwrap()
}

fn tiny() -> TrainConfig {
    TrainConfig {
        dim: 4,
        epochs: 1,
        phase1_steps: 2,
        phase2_steps: 1,
        phase3_steps: 1,
        batch_size: 64,
        diff_steps: 5,
        denoise_steps: 2,
        diff_hidden: 8,
        time_dim: 4,
        ..TrainConfig::default()
    }
}

fn opts(seeds: &[u64]) -> SweepOptions {
    SweepOptions {
        seeds: seeds.to_vec(),
        ..SweepOptions::default()
    }
}

#[test]
fn zero_ratio_alone_gives_one_row_without_degradation() {
    let r = noise_robustness_sweep(&corpus(), &tiny(), &[0.0], &[Variant::Full], &opts(&[1])).unwrap();
    assert_eq!(r.rows.len(), 1);
    assert!(r.rows[0].degradation.values().all(|&d| d == 0.0));
    assert_eq!(r.to_csv().lines().count(), 2);
}

#[test]
fn default_ratios_give_one_row_each() {
    let r = noise_robustness_sweep(&corpus(), &tiny(), &DEFAULT_RATIOS, &[Variant::AclOnly], &opts(&[1])).unwrap();
    let ratios: Vec<f64> = r.rows.iter().map(|x| x.ratio).collect();
    assert_eq!(ratios, DEFAULT_RATIOS.to_vec());
    assert_eq!(r.trends.len(), 1);
    // trends start at the clean reference
    assert_eq!(r.trends[0].ratios.len(), DEFAULT_RATIOS.len() + 1);
    assert_eq!(r.trends[0].ratios[0], 0.0);
    for line in r.to_jsonl().unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["variant"], "acl-only");
    }
}

#[test]
fn out_of_range_ratio_is_rejected() {
    assert!(noise_robustness_sweep(&corpus(), &tiny(), &[0.6], &[Variant::Full], &opts(&[1])).is_err());
    assert!(noise_robustness_sweep(&corpus(), &tiny(), &[0.1], &[], &opts(&[1])).is_err());
}

#[test]
fn lambda_rows_are_sorted_and_deduplicated() {
    let rows = lambda_sweep(&corpus(), &tiny(), &[5.5, 0.5, 2.0, 0.5], &opts(&[1])).unwrap();
    let ls: Vec<f64> = rows.iter().map(|r| r.lambda_ratio).collect();
    assert_eq!(ls, vec![0.5, 2.0, 5.5]);
    assert_eq!(lambda_csv(&rows).lines().count(), 4);
    assert!(lambda_sweep(&corpus(), &tiny(), &[0.0], &opts(&[1])).is_err());
}

#[test]
fn ablation_has_a_row_per_run_plus_aggregates() {
    let variants = [Variant::Full, Variant::NoDacl];
    let r = ablation(&corpus(), &tiny(), &variants, &opts(&[1, 2])).unwrap();
    assert_eq!(r.runs.len(), 4);
    assert_eq!(r.aggregate.len(), 2);
    assert!(r.aggregate.iter().all(|a| a.runs == 2));
    // header, runs, then mean and std per variant
    assert_eq!(r.to_csv().lines().count(), 1 + 4 + 4);
}

#[test]
fn parallel_sweep_matches_sequential() {
    let seq = ablation(&corpus(), &tiny(), &[Variant::Full], &opts(&[1, 2])).unwrap();
    let par = ablation(
        &corpus(),
        &tiny(),
        &[Variant::Full],
        &SweepOptions {
            parallel: true,
            ..opts(&[1, 2])
        },
    )
    .unwrap();
    assert_eq!(seq.to_csv(), par.to_csv());
}
