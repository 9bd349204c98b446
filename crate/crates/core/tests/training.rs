use tirlab::envsim::{stock_task_sets, train, Algorithm, TrainConfig};
use tirlab::reward::RewardVariant;

#[test]
fn prs_parse_success_trends_upward() {
    let (tasks, eval) = stock_task_sets(0);
    for seed in 0..3 {
        let config = TrainConfig {
            algorithm: Algorithm::Vspo,
            reward: RewardVariant::PrsShort,
            eval_every: 20,
            eval_rollouts: 16,
            ..TrainConfig::default()
        };
        let run = train(&config, seed, &tasks, &eval).unwrap();
        let curve = run.eval_curve(|m| m.eval_parse_success);
        assert_eq!(curve.len(), 10);
        let regressions = curve.windows(2).filter(|w| w[1].1 < w[0].1).count();
        assert!(regressions <= 1, "seed {seed}: {curve:?}");
    }
}

#[test]
fn metrics_records_carry_sampler_telemetry() {
    let (tasks, eval) = stock_task_sets(0);
    let config = TrainConfig {
        steps: 10,
        ..TrainConfig::default()
    };
    let run = train(&config, 5, &tasks, &eval).unwrap();
    let mut buf = Vec::new();
    run.write_metrics_jsonl(&mut buf).unwrap();
    let lines: Vec<serde_json::Value> = String::from_utf8(buf)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 10);
    for (i, rec) in lines.iter().enumerate() {
        assert_eq!(rec["step"], i + 1);
        for key in ["loss", "kl", "entropy", "grad_norm", "mean_reward", "valid_group_fraction", "dropped_count", "kept_count", "max_n"] {
            assert!(rec.get(key).is_some(), "missing {key} in {rec}");
        }
        let kept = rec["kept_count"].as_u64().unwrap();
        let dropped = rec["dropped_count"].as_u64().unwrap();
        assert_eq!(kept + dropped, config.batch_size as u64);
    }
    assert!(lines.iter().any(|r| r.get("eval_reward").is_some()));
}
