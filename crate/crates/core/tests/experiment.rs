mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use common::{chain_trajectory, crossing_moves};
use safety_credit::envs::{write_trajectories, EnvConfig, Trajectory};
use safety_credit::experiment::{
    analyze, load_run, run_analyze, run_eval, run_seed, run_train, seed_dir, AnalysisConfig, ExperimentError,
    IterationRecord, RunConfig, RunHooks, RunSummary, SeedResult, Stat, SEED_VAR,
};
use safety_credit::numerics::seeded_rng;
use safety_credit::safety::{build_offline_dataset, train_model, HeadMode, OfflineSpec, SsvConfig, SsvModel, TrainConfig};
use safety_credit::trainer::{chain_constrained_optimum, exact_chain_evaluation, CostMode, CostSource};

fn tiny(mode: CostMode, seeds: Vec<u64>, dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::new(mode, seeds, dir);
    cfg.env = EnvConfig::chain(20);
    cfg.total_steps = 2_000;
    cfg.ppo.rollout_steps = 400;
    cfg.ppo.epochs = 2;
    cfg.ppo.hidden = 8;
    cfg.ssv.hidden = 6;
    cfg.ssv.encoder = 4;
    cfg.ssv.decoder_hidden = 4;
    cfg.ssv.head = HeadMode::Distributional;
    cfg.pretrain.offline.episodes = 20;
    cfg.pretrain.offline.segments = 60;
    cfg.pretrain.train.epochs = 2;
    cfg.continual.window_episodes = 10;
    cfg.continual.retrain.train.epochs = 1;
    cfg.eval.episodes = 10;
    cfg.eval.every = 2;
    cfg.eval.periodic_episodes = 3;
    cfg.checkpoint_every = 2;
    cfg
}

#[test]
fn runs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = tiny(CostMode::Ssv, vec![3], &dir.path().join("a"));
    let b = tiny(CostMode::Ssv, vec![3], &dir.path().join("b"));
    let ra = run_seed(&a, 3, RunHooks::default()).unwrap();
    let rb = run_seed(&b, 3, RunHooks::default()).unwrap();
    assert_eq!(ra, rb);
    for f in ["metrics.jsonl", "policy.json", "critics.json", "ssv.json"] {
        let x = fs::read(seed_dir(&a, 3).join(f)).unwrap();
        let y = fs::read(seed_dir(&b, 3).join(f)).unwrap();
        assert!(x == y, "{f} differs");
    }
}

#[test]
fn run_outputs_are_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(CostMode::Ssv, vec![1, 2], dir.path());
    let summary = run_train(&cfg).unwrap();
    let text = fs::read_to_string(dir.path().join("summary.json")).unwrap();
    let saved: RunSummary = serde_json::from_str(&text).unwrap();
    assert_eq!(saved, summary);

    let mut rewards = Vec::new();
    for seed in [1, 2] {
        let sd = seed_dir(&cfg, seed);
        let r: SeedResult = serde_json::from_str(&fs::read_to_string(sd.join("final_eval.json")).unwrap()).unwrap();
        assert_eq!(r.final_eval.episodes, 10);
        let safe = r.final_eval.fraction_safe.unwrap();
        assert!((0.0..=1.0).contains(&safe));
        rewards.push(r.final_eval.mean_reward.unwrap());

        let records: Vec<IterationRecord> = fs::read_to_string(sd.join("metrics.jsonl"))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(records.len(), 5);
        assert!(records.iter().all(|r| r.lambda >= 0.0));
        assert!(records.windows(2).all(|w| w[1].steps > w[0].steps && w[1].labeled >= w[0].labeled));
        assert!(records[1].eval_reward.is_some() && records[0].eval_reward.is_none());
        assert!(sd.join("checkpoints").is_dir());

        let (policy, model) = load_run(&sd).unwrap();
        assert_eq!(policy.state_dim(), 6 + 11);
        assert!(model.unwrap().as_ssv().is_some());
    }
    let stat = Stat::of(&rewards);
    assert!((summary.reward.mean - stat.mean).abs() < 1e-12);
    assert!((summary.reward.std - stat.std).abs() < 1e-12);
}

#[test]
fn eval_is_reproducible_and_warns_on_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(CostMode::Cb, vec![5], dir.path());
    run_seed(&cfg, 5, RunHooks::default()).unwrap();
    let sd = seed_dir(&cfg, 5);

    let empty = run_eval(&sd, &cfg.env, 0, 9, 0).unwrap();
    assert!(empty.warning.is_some());
    assert_eq!(empty.metrics.mean_reward, None);

    let a = run_eval(&sd, &cfg.env, 8, 100, 0).unwrap();
    let b = run_eval(&sd, &cfg.env, 8, 100, 0).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert!(a.warning.is_none() && sd.join("eval.json").is_file());

    let text = fs::read_to_string(sd.join("eval_trajectories.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 8 * cfg.env.horizon);

    let mut wrong = EnvConfig::hazard_point();
    wrong.seed = 1;
    assert!(matches!(run_eval(&sd, &wrong, 4, 1, 0), Err(ExperimentError::Structure(_))));
}

#[test]
fn oracle_chain_run_respects_budget() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(CostMode::Oracle, vec![2], dir.path());
    cfg.env = EnvConfig::chain(12);
    cfg.env.budget = 3.0;
    cfg.total_steps = 120_000;
    cfg.ppo.rollout_steps = 2_400;
    cfg.ppo.epochs = 4;
    cfg.ppo.hidden = 32;
    cfg.eval.every = 0;
    cfg.checkpoint_every = 0;
    run_seed(&cfg, 2, RunHooks::default()).unwrap();
    let (policy, _) = load_run(&seed_dir(&cfg, 2)).unwrap();
    let env = &cfg.env;
    let exact = exact_chain_evaluation(&env.chain, env.horizon, env.gamma, env.budget, &policy, CostSource::Oracle).unwrap();
    let best = chain_constrained_optimum(&env.chain, env.horizon, env.budget).unwrap();
    assert!((exact.mass - 1.0).abs() < 1e-9);
    assert!(exact.expected_true_cost <= env.budget + 0.5, "{exact:?}");
    assert!(exact.expected_reward >= 0.6 * best.reward, "{exact:?} vs {best:?}");
    assert!(exact.expected_reward <= best.reward + 1e-9 || exact.expected_true_cost > env.budget - 1e-9);
}

fn chain_model(seed: u64) -> (EnvConfig, SsvModel) {
    let env = EnvConfig::chain(60);
    let spec = OfflineSpec {
        segments: 600,
        seed,
        ..OfflineSpec::default()
    };
    let data = build_offline_dataset(&env, &spec).unwrap();
    let dims = env.build().unwrap();
    let mut cfg = SsvConfig::new(dims.obs_dim(), dims.action_dim());
    cfg.hidden = 16;
    cfg.encoder = 16;
    cfg.decoder_hidden = 16;
    cfg.seed = seed;
    let mut model = SsvModel::new(cfg).unwrap();
    train_model(&mut model, &data, &TrainConfig { epochs: 15, seed, ..TrainConfig::default() }).unwrap();
    (env, model)
}

#[test]
fn trained_model_separates_cost_buckets() {
    let (env, model) = chain_model(6);
    let spec = OfflineSpec {
        segments: 400,
        balance: false,
        seed: 66,
        ..OfflineSpec::default()
    };
    let test: Vec<Trajectory> = build_offline_dataset(&env, &spec).unwrap().into_iter().map(|s| s.traj).collect();
    let rep = analyze(&model, &test, &AnalysisConfig::default()).unwrap();
    let low = rep.buckets.first().unwrap();
    let high = rep.buckets.last().unwrap();
    assert!(low.count > 0 && high.count > 0, "{:?}", rep.buckets);
    assert!(high.mean_p_safe.unwrap() < low.mean_p_safe.unwrap());
}

#[test]
fn analysis_is_reproducible() {
    let (env, model) = chain_model(7);
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("ssv.json");
    model.to_checkpoint().save(&ck).unwrap();
    let mut rng = seeded_rng(70);
    let trajs: Vec<Trajectory> = (0..20)
        .map(|i| chain_trajectory(&env.chain, 60, &crossing_moves(&mut rng, 60, 25), i))
        .collect();
    let tp = dir.path().join("trajs.jsonl");
    write_trajectories(fs::File::create(&tp).unwrap(), &trajs).unwrap();
    let cfg = AnalysisConfig::default();
    let a = run_analyze(&ck, &tp, &cfg, &dir.path().join("a")).unwrap();
    let b = run_analyze(&ck, &tp, &cfg, &dir.path().join("b")).unwrap();
    assert_eq!(a, b);
    for f in ["analysis.json", "buckets.csv", "windows.csv", "trajectories.csv", "steps.csv"] {
        let x = fs::read(dir.path().join("a").join(f)).unwrap();
        let y = fs::read(dir.path().join("b").join(f)).unwrap();
        assert!(!x.is_empty() && x == y, "{f}");
    }
    assert_eq!(a.trajectories.iter().filter(|t| t.crossing.is_some()).count(), 20);
    assert!(a.trajectories.iter().all(|t| t.normalized_cost.iter().all(|c| (0.0..=1.0).contains(c))));
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_safety-credit"))
}

#[test]
fn cli_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg_path = dir.path().join("run.toml");
    let cfg = tiny(CostMode::Ssv, vec![1], Path::new("ignored"));
    fs::write(&cfg_path, cfg.to_toml().unwrap()).unwrap();

    let run = |args: &[&str]| {
        let o = bin()
            .args(args)
            .env(SEED_VAR, "4")
            .env("SAFETY_CREDIT_OUTPUT", &out)
            .output()
            .unwrap();
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    };
    let c = cfg_path.to_str().unwrap();
    run(&["pretrain", "--config", c]);
    assert!(out.join("seed_4/pretrain/model.json").is_file());
    let summary: RunSummary = serde_json::from_str(&run(&["train", "--config", c])).unwrap();
    assert_eq!(summary.seeds, vec![4]);
    run(&["eval", "--config", c, "--seed", "4", "--episodes", "5"]);
    let sd = out.join("seed_4");
    run(&[
        "analyze",
        "--checkpoint",
        sd.join("ssv.json").to_str().unwrap(),
        "--trajectories",
        sd.join("eval_trajectories.jsonl").to_str().unwrap(),
        "--out",
        dir.path().join("analysis").to_str().unwrap(),
    ]);
    assert!(dir.path().join("analysis/buckets.csv").is_file());

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "mode = \"ssv\"\nseeds = [1]\n").unwrap();
    let o = bin().args(["train", "--config", bad.to_str().unwrap()]).output().unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("output_dir"));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut runs = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let text = fs::read_to_string(&path).unwrap();
        if path.file_name().unwrap() == "analysis.toml" {
            let cfg: AnalysisConfig = toml::from_str(&text).unwrap();
            assert_eq!(cfg, AnalysisConfig::default());
        } else {
            let cfg = RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            cfg.env.build().unwrap();
            runs += 1;
        }
    }
    assert!(runs >= 5);
}
