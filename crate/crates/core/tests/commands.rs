use std::fs;
use std::path::Path;
use std::process::Command;

use lcr_ser::data::{read_catalog, Instance};
use lcr_ser::eval::{evaluate, NegativeCache};
use lcr_ser::harness::{
    cmd_ablate, cmd_eval, cmd_filter_analyze, cmd_rl, cmd_synth, cmd_train, load_data, mean_std, Checkpoint, RunConfig, Stage,
    Variant, PRETRAINED_FILE, RL_FILE,
};
use lcr_ser::model::Model;
use tempfile::tempdir;

fn tiny(out: &Path) -> RunConfig {
    RunConfig {
        users: 40,
        items: 40,
        words: 21,
        topics: 5,
        d: 8,
        epochs: 1,
        eval_negatives: 19,
        rl_selection_users: 0,
        rl_rounds: 2,
        rl_batch: 4,
        ablate_seeds: 2,
        out: out.to_path_buf(),
        ..RunConfig::default()
    }
}

fn lines(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn synth_is_byte_deterministic_and_refuses_to_overwrite() {
    let dir = tempdir().unwrap();
    let a = cmd_synth(&tiny(&dir.path().join("a"))).unwrap();
    let b = cmd_synth(&tiny(&dir.path().join("b"))).unwrap();
    assert_eq!(fs::read(&a.log).unwrap(), fs::read(&b.log).unwrap());
    assert_eq!(a.users, 40);
    let body = fs::read_to_string(&a.log).unwrap();
    assert_eq!(body.lines().filter(|l| !l.trim().is_empty()).count(), a.search_events + a.rec_events);
    assert_eq!(read_catalog(&a.log).unwrap().items, 40);
    assert!(matches!(cmd_synth(&tiny(&dir.path().join("a"))), Err(lcr_ser::Error::Exists(_))));
    let forced = RunConfig {
        force: true,
        ..tiny(&dir.path().join("a"))
    };
    cmd_synth(&forced).unwrap();
}

#[test]
fn synth_relevance_fraction_is_within_binomial_bounds() {
    let dir = tempdir().unwrap();
    let cfg = RunConfig {
        users: 300,
        search_relevance: 0.5,
        ..tiny(dir.path())
    };
    let o = cmd_synth(&cfg).unwrap();
    let n = o.search_events as f64;
    assert!((o.relevant_fraction - 0.5).abs() <= 3.0 * (0.25 / n).sqrt(), "{}", o.relevant_fraction);
}

#[test]
fn zero_learning_rate_checkpoint_equals_initialization() {
    let dir = tempdir().unwrap();
    let cfg = RunConfig { lr: 0.0, ..tiny(dir.path()) };
    let out = cmd_train(&cfg).unwrap();
    let data = load_data(&cfg).unwrap();
    let init = Model::new(cfg.model_config_for(data.dataset.catalog), cfg.seed).unwrap();
    let expect = Checkpoint::new(Stage::Pretrained, init).to_bytes().unwrap();
    assert_eq!(fs::read(out.checkpoint).unwrap(), expect);
}

#[test]
fn tiny_dataset_is_overfit() {
    let dir = tempdir().unwrap();
    let cfg = RunConfig {
        users: 4,
        min_sessions: 4,
        max_sessions: 4,
        d: 16,
        init_std: 0.3,
        lr: 0.003,
        epochs: 300,
        lambda_tcl: 0.0,
        ..tiny(dir.path())
    };
    cmd_train(&cfg).unwrap();
    let log = lines(&dir.path().join("train_metrics.jsonl"));
    let tail: Vec<f64> = log[log.len() - 10..].iter().map(|e| e["l_rec"].as_f64().unwrap()).collect();
    let mean = tail.iter().sum::<f64>() / tail.len() as f64;
    assert!(mean < 0.05, "final l_rec {tail:?}");
}

#[test]
fn resuming_for_zero_epochs_reproduces_the_checkpoint() {
    let dir = tempdir().unwrap();
    let first = cmd_train(&tiny(&dir.path().join("a"))).unwrap();
    let resumed = RunConfig {
        epochs: 0,
        checkpoint: Some(first.checkpoint.clone()),
        ..tiny(&dir.path().join("b"))
    };
    let second = cmd_train(&resumed).unwrap();
    assert_eq!(fs::read(first.checkpoint).unwrap(), fs::read(second.checkpoint).unwrap());
}

#[test]
fn rl_with_zero_rounds_returns_the_input_checkpoint() {
    let dir = tempdir().unwrap();
    let pre = cmd_train(&tiny(&dir.path().join("pre"))).unwrap();
    let cfg = RunConfig {
        rl_rounds: 0,
        checkpoint: Some(pre.checkpoint.clone()),
        ..tiny(&dir.path().join("rl"))
    };
    let out = cmd_rl(&cfg).unwrap();
    assert_eq!(fs::read(pre.checkpoint).unwrap(), fs::read(out.checkpoint).unwrap());
    assert_eq!(out.before, out.after);
}

#[test]
fn rl_without_exploration_has_no_advantage_signal() {
    let dir = tempdir().unwrap();
    let pre = cmd_train(&tiny(&dir.path().join("pre"))).unwrap();
    let cfg = RunConfig {
        gamma: 0.0,
        rl_rounds: 3,
        checkpoint: Some(pre.checkpoint),
        ..tiny(&dir.path().join("rl"))
    };
    let out = cmd_rl(&cfg).unwrap();
    for round in lines(&dir.path().join("rl/rl_metrics.jsonl")) {
        let objective = round["objective"].as_f64().unwrap();
        let kl = round["mean_kl"].as_f64().unwrap();
        assert!((objective + cfg.lambda_kl * kl).abs() < 1e-12, "{round}");
    }
    assert_eq!(Checkpoint::load(&out.checkpoint).unwrap().stage, Stage::Rl);
    assert!(out.checkpoint.ends_with(RL_FILE));
}

#[test]
fn eval_matches_direct_evaluation() {
    let dir = tempdir().unwrap();
    let pre = cmd_train(&tiny(dir.path())).unwrap();
    let cfg = RunConfig {
        checkpoint: Some(dir.path().join(PRETRAINED_FILE)),
        eval_split: "valid".into(),
        ..tiny(dir.path())
    };
    let report = cmd_eval(&cfg).unwrap();
    let data = load_data(&cfg).unwrap();
    let direct = evaluate(&pre.model, &data.splits.valid, &cfg.eval_protocol(), &NegativeCache::new(), data.num_items()).unwrap();
    assert_eq!(report, direct);
    assert_eq!(report.mean, pre.valid.mean);
    assert!(fs::read_to_string(dir.path().join("eval.txt")).unwrap().contains("pretrained:valid"));
}

#[test]
fn ablation_summary_matches_a_recount() {
    let dir = tempdir().unwrap();
    let cfg = tiny(dir.path());
    let out = cmd_ablate(&cfg).unwrap();
    assert_eq!(out.runs.len(), 2);
    for (i, v) in Variant::ALL.iter().enumerate() {
        let s = &out.summary[i];
        assert!(out.table.contains(&v.header(&cfg)));
        let xs: Vec<f64> = out.runs.iter().map(|r| r.result(*v).unwrap().test.mean.ndcg5).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (xs.len() - 1) as f64;
        assert!((s.mean.ndcg5 - mean).abs() < 1e-12);
        assert!((s.std.ndcg5 - var.sqrt()).abs() < 1e-12);
        assert_eq!(mean_std(&xs), (s.mean.ndcg5, s.std.ndcg5));
    }
    let base = out.runs[0].result(Variant::Base).unwrap();
    assert_eq!(out.runs[0].result(Variant::Lcr).unwrap().test.per_instance.len(), base.test.per_instance.len());
}

#[test]
fn filter_endpoints_match_keep_all_and_drop_all_runs() {
    let dir = tempdir().unwrap();
    let pre = cmd_train(&tiny(&dir.path().join("pre"))).unwrap();
    let cfg = RunConfig {
        checkpoint: Some(pre.checkpoint),
        filter_thresholds: vec![-1.0, 1.0],
        ..tiny(&dir.path().join("filter"))
    };
    let out = cmd_filter_analyze(&cfg).unwrap();
    let data = load_data(&cfg).unwrap();
    let train_on = |strip: bool| {
        let mut d = data.clone();
        if strip {
            for split in [&mut d.splits.train, &mut d.splits.valid, &mut d.splits.test] {
                split.iter_mut().for_each(|i: &mut Instance| i.search.clear());
            }
        }
        let m = lcr_ser::harness::train_variant(Variant::Base, &cfg, &d, None, &mut lcr_ser::harness::discard()).unwrap();
        evaluate(&m, &d.splits.test, &cfg.eval_protocol(), &NegativeCache::new(), d.num_items()).unwrap()
    };
    assert_eq!(out.points[0].stats.retention(), 1.0);
    assert_eq!(out.points[0].test, train_on(false));
    assert_eq!(out.points[1].stats.retention(), 0.0);
    assert_eq!(out.points[1].test, train_on(true));
}

#[test]
fn binary_reports_categorized_errors() {
    let dir = tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_lcr-ser");
    let out = dir.path().join("run");
    let set_out = format!("out={}", out.display());
    let run = |args: &[&str]| Command::new(bin).args(args).env_remove("LCRSER_CONFIG").output().unwrap();

    let bad = run(&["--set", "no_such_key=1", "config"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("no_such_key"));

    let ok = run(&["--set", &set_out, "--set", "users=20", "--set", "items=40", "synth"]);
    assert!(ok.status.success());
    assert!(out.join("config.txt").exists());
    let again = run(&["--set", &set_out, "--set", "users=20", "--set", "items=40", "synth"]);
    assert!(!again.status.success());
    assert_ne!(again.status.code(), Some(2));

    let shown = run(&["--set", "d=24", "config"]);
    assert!(String::from_utf8_lossy(&shown.stdout).lines().any(|l| l.trim() == "d = 24"));
}
