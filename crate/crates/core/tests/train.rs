use std::path::Path;

use mfdconv::config::RunConfig;
use mfdconv::data::Corpus;
use mfdconv::features::{synth_generate, SplitCounts, SynthConfig};
use mfdconv::tensor::ParamStore;
use mfdconv::train::{Trainer, NAN_DUMP_FILE};
use mfdconv::Error;

fn corpus(dir: &Path) -> Corpus {
    let synth = SynthConfig {
        seed: 21,
        counts: SplitCounts { strong: 3, weak: 3, unlabeled: 4, validation: 2 },
        classes: 3,
        clip_seconds: 2.0,
        ..SynthConfig::default()
    };
    synth_generate(&synth, dir).unwrap();
    let cfg = config(&[]);
    Corpus::load(dir, cfg.features).unwrap()
}

fn config(overrides: &[&str]) -> RunConfig {
    let text = "\
[features]
n_mels = 32
[model]
channels = 4,8
pools = 2x4,1x2
hidden = 6
[ssl]
median_seconds = 0.1
ramp_fraction = 0.5
[train]
steps = 12
batch_strong = 2
batch_weak = 1
batch_unlabeled = 2
";
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    RunConfig::from_text(text, &o).unwrap()
}

fn stores_identical(a: &ParamStore, b: &ParamStore) -> bool {
    a.iter().zip(b.iter()).all(|(x, y)| x.1 == y.1 && x.3.data() == y.3.data())
}

#[test]
fn zero_weight_consistency_matches_supervised_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = corpus(tmp.path());
    let sup = Trainer::new(&config(&["ssl.mode=supervised"]), &corpus).unwrap().run(None).unwrap();
    for mode in ["mt", "cmt"] {
        let kv = format!("ssl.mode={mode}");
        let other = Trainer::new(&config(&[&kv, "ssl.lambda_max=0"]), &corpus).unwrap().run(None).unwrap();
        assert!(stores_identical(&sup.student, &other.student), "{mode} student diverged");
        assert!(stores_identical(&sup.teacher, &other.teacher), "{mode} teacher diverged");
        for (a, b) in sup.metrics.iter().zip(&other.metrics) {
            assert_eq!(a.loss_sup.to_bits(), b.loss_sup.to_bits());
            assert_eq!(a.loss_total.to_bits(), b.loss_total.to_bits());
        }
    }
}

#[test]
fn supervised_mode_reports_zero_consistency() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = corpus(tmp.path());
    let out = Trainer::new(&config(&["ssl.mode=supervised"]), &corpus).unwrap().run(None).unwrap();
    assert_eq!(out.metrics.len(), 12);
    for m in &out.metrics {
        assert_eq!((m.loss_w_con, m.loss_s_con, m.lambda), (0.0, 0.0, 0.0));
        assert_eq!(m.loss_total, m.loss_sup);
    }
    let cmt = Trainer::new(&config(&["ssl.mode=cmt"]), &corpus).unwrap().run(None).unwrap();
    assert!(cmt.metrics.iter().skip(1).all(|m| m.lambda > 0.0));
    assert!(cmt.metrics.windows(2).all(|w| w[1].lambda >= w[0].lambda));
}

#[test]
fn reruns_write_identical_step_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = corpus(&tmp.path().join("data"));
    let run = |name: &str| {
        let dir = tmp.path().join(name);
        Trainer::new(&config(&["train.seed=5", "ssl.input_noise=0.1"]), &corpus).unwrap().run(Some(&dir)).unwrap();
        std::fs::read_to_string(dir.join("metrics.jsonl")).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(a.lines().count(), 12);
    assert_eq!(a, b);
    let other = tmp.path().join("c");
    Trainer::new(&config(&["train.seed=6"]), &corpus).unwrap().run(Some(&other)).unwrap();
    assert_ne!(a.lines().next(), std::fs::read_to_string(other.join("metrics.jsonl")).unwrap().lines().next());
}

#[test]
fn diverging_run_aborts_with_batch_dump() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = corpus(&tmp.path().join("data"));
    let out = tmp.path().join("run");
    let err = Trainer::new(&config(&["optim.lr=1e200", "optim.schedule=constant"]), &corpus)
        .unwrap()
        .run(Some(&out))
        .expect_err("training must fail");
    match err {
        Error::Numerical(msg) => assert!(msg.contains(".wav"), "{msg}"),
        other => panic!("expected a numerical failure, got {other}"),
    }
    let dump: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join(NAN_DUMP_FILE)).unwrap()).unwrap();
    assert!(!dump["clips"].as_array().unwrap().is_empty());
}

#[test]
fn checkpoint_keeps_the_best_validation_model() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = corpus(&tmp.path().join("data"));
    let out = tmp.path().join("run");
    let outcome = Trainer::new(&config(&["train.eval_every=4"]), &corpus).unwrap().run(Some(&out)).unwrap();
    assert_eq!(outcome.validation.len(), 3);
    let best = outcome.validation.iter().map(|v| v.collar_f1).fold(f64::NEG_INFINITY, f64::max);
    let first_best = outcome.validation.iter().find(|v| v.collar_f1 == best).unwrap();
    assert_eq!(outcome.best_step, first_best.step);
    let loaded = mfdconv::train::TrainedModel::load(&out.join("best.ckpt")).unwrap();
    assert!(stores_identical(&loaded.store, &outcome.best));
    assert_eq!(loaded.classes, corpus.classes);
}
