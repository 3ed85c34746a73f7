//! Acceptance suite. Runs every criterion in order and prints one
//! PASS/FAIL line each. Criteria 6 and 7 measure directional training
//! trends on a toy corpus; a miss there is reported as FLAGGED and does not
//! fail the run.

mod common;

use std::path::Path;
use std::time::Instant;

use common::{build_layer, naive_dynamic_layer, random_tensor, rng};
use mfdconv::config::RunConfig;
use mfdconv::data::Corpus;
use mfdconv::diagnostics::{crnn_grad_check, variant_grad_check, END_TO_END_TOLERANCE, LAYER_TOLERANCE};
use mfdconv::dynconv::{AttentionPooling, ConvVariant, ConvVariantConfig, DynConvLayer};
use mfdconv::features::{synth_generate, Split, SplitCounts, SynthConfig};
use mfdconv::model::Prediction;
use mfdconv::ssl::{
    cmt_consistency_loss, confidence_weights, ema_update, make_pseudo_labels, median_filter, mt_consistency_loss,
    pseudo_label_batch, FrameGate, MedianFilterSpec, Thresholds,
};
use mfdconv::tensor::{ParamKind, ParamStore, Tape};
use mfdconv::train::{evaluate_clips, median_spec, strong_bce, Trainer};
use mfdconv::Tensor;
use rand::Rng;

#[derive(Clone, Copy, PartialEq)]
enum Verdict {
    Pass,
    Fail,
    Flagged,
}

struct Outcome {
    verdict: Verdict,
    detail: String,
}

impl Outcome {
    fn check(ok: bool, detail: String) -> Self {
        Self { verdict: if ok { Verdict::Pass } else { Verdict::Fail }, detail }
    }

    fn trend(ok: bool, detail: String) -> Self {
        Self { verdict: if ok { Verdict::Pass } else { Verdict::Flagged }, detail }
    }
}

fn randomize(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut r = rng(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = r.gen_range(-scale..scale));
    }
}

fn detached(layer: &DynConvLayer, store: &ParamStore, x: &Tensor, variant: ConvVariant) -> Tensor {
    let tape = Tape::new();
    let vars = store.bind(&tape);
    let xv = tape.constant(x.clone());
    let y = match variant {
        ConvVariant::Static => layer.forward(xv, &vars),
        ConvVariant::DyConv => layer.dyconv_forward(xv, &vars),
        ConvVariant::FdConv => layer.fdconv_forward(xv, &vars),
        ConvVariant::OdConv => layer.odconv_forward(xv, &vars),
        ConvVariant::MfdConv => layer.mfdconv_forward(xv, &vars),
    };
    y.unwrap().detach()
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let (mut layer_worst, mut e2e_worst) = (0.0f64, 0.0f64);
    for seed in 0..10 {
        for variant in ConvVariant::ALL {
            layer_worst = layer_worst.max(variant_grad_check(variant, seed, None).unwrap().max_rel_error);
            e2e_worst = e2e_worst.max(crnn_grad_check(variant, 100 + seed).unwrap().max_rel_error);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::check(
        layer_worst < LAYER_TOLERANCE && e2e_worst < END_TO_END_TOLERANCE && secs < 300.0,
        format!("10 seeds x 5 variants: layer max rel {layer_worst:.2e}, CRNN max rel {e2e_worst:.2e}, {secs:.1}s"),
    )
}

fn oracle_equivalence() -> Outcome {
    let mut worst: f64 = 0.0;
    for case in 0..20u64 {
        let mut r = rng(1000 + case);
        let (t, f) = (r.gen_range(2..7), r.gen_range(2..9));
        let (ci, co, n) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
        let k = [1, 3, 5][r.gen_range(0..3)];
        let mut cfg = ConvVariantConfig::mfdconv(n);
        cfg.r = r.gen_range(1..3);
        let (mut store, layer) = build_layer(cfg, ci, co, k, case);
        randomize(&mut store, 2000 + case, 0.8);
        let x = random_tensor(&mut r, &[t, f, ci], 1.0);
        let got = detached(&layer, &store, &x, ConvVariant::MfdConv);
        worst = worst.max(got.max_abs_diff(&naive_dynamic_layer(&x, &store, &layer, false)));
    }
    Outcome::check(worst <= 1e-10, format!("20 random cases, max deviation {worst:.2e}"))
}

fn degeneracy_ladder() -> Outcome {
    let x = random_tensor(&mut rng(303), &[5, 7, 3], 1.0);

    // no attention and a single basis kernel is a plain convolution
    let mut identity = ConvVariantConfig::mfdconv(1);
    identity.enable_alpha_c = false;
    identity.enable_alpha_f = false;
    identity.enable_alpha_w = false;
    let (mut store, layer) = build_layer(identity, 3, 2, 3, 301);
    randomize(&mut store, 302, 1.0);
    let mut static_store = ParamStore::new();
    let static_layer =
        DynConvLayer::new(&mut static_store, "layer", 3, 2, 3, ConvVariantConfig::static_conv(), &mut rng(0)).unwrap();
    *static_store.get_mut(static_layer.bank.kernels) = store.get(layer.bank.kernels).reshape(&[2, 3, 3, 3]).unwrap();
    *static_store.get_mut(static_layer.bank.bias) = store.get(layer.bank.bias).clone();
    let d_static = detached(&layer, &store, &x, ConvVariant::MfdConv)
        .max_abs_diff(&detached(&static_layer, &static_store, &x, ConvVariant::Static));

    // kernel attention only: frequency dynamic convolution
    let mut kernel_only = ConvVariantConfig::mfdconv(3);
    kernel_only.enable_alpha_c = false;
    kernel_only.enable_alpha_f = false;
    let (mut store, layer) = build_layer(kernel_only.clone(), 3, 4, 3, 311);
    randomize(&mut store, 312, 0.9);
    let d_fd = detached(&layer, &store, &x, ConvVariant::MfdConv).max_abs_diff(&detached(&layer, &store, &x, ConvVariant::FdConv));

    // and with frequency-global pooling: dynamic convolution
    kernel_only.pooling = AttentionPooling::Global;
    let (mut store, layer) = build_layer(kernel_only, 3, 4, 3, 321);
    randomize(&mut store, 322, 0.9);
    let d_dy = detached(&layer, &store, &x, ConvVariant::MfdConv).max_abs_diff(&detached(&layer, &store, &x, ConvVariant::DyConv));

    Outcome::check(
        d_static <= 1e-12 && d_fd <= 1e-10 && d_dy <= 1e-10,
        format!("identity vs static {d_static:.1e}, kernel-only vs FDConv {d_fd:.1e}, global vs DyConv {d_dy:.1e}"),
    )
}

fn t(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::new(shape, v.to_vec()).unwrap()
}

fn brute_median(seq: &[u8], window: usize) -> Vec<u8> {
    let n = seq.len();
    (0..n)
        .map(|i| {
            let h = (window / 2).min(i).min(n - 1 - i);
            let mut w = seq[i - h..=i + h].to_vec();
            w.sort_unstable();
            w[w.len() / 2]
        })
        .collect()
}

fn cmt_suite() -> Outcome {
    let mut failures = Vec::new();
    let mut expect = |ok: bool, what: &str| {
        if !ok {
            failures.push(what.to_string());
        }
    };
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;

    // clip and frame labels, clip gate and median smoothing
    let mf3 = MedianFilterSpec::uniform(2, 3).unwrap();
    let w = t(&[2], &[0.9, 0.3]);
    let s = t(&[5, 2], &[0.6, 0.9, 0.4, 0.9, 0.7, 0.9, 0.8, 0.9, 0.2, 0.9]);
    let (yw, ys) = make_pseudo_labels(&w, &s, Thresholds::default(), &mf3, FrameGate::Clip).unwrap();
    expect(yw.data() == [1.0, 0.0], "clip labels");
    let column = |c: usize| (0..5).map(|i| ys.data()[i * 2 + c]).collect::<Vec<_>>();
    expect(column(0) == [1.0, 1.0, 1.0, 1.0, 0.0], "smoothed frame labels");
    expect(column(1) == [0.0; 5], "clip gate");
    let (yw, _) = make_pseudo_labels(&t(&[1], &[0.7]), &t(&[1, 1], &[0.1]), Thresholds::default(), &MedianFilterSpec::uniform(1, 1).unwrap(), FrameGate::Clip).unwrap();
    expect(yw.data() == [1.0], "clip threshold");

    // confidence weights
    let (cw, cs) = confidence_weights(&t(&[2], &[0.8, 0.3]), &t(&[1, 2], &[0.9, 0.9]), &t(&[2], &[1.0, 0.0]), &t(&[1, 2], &[1.0, 0.0])).unwrap();
    expect(close(cs.data()[0], 0.72) && cs.data()[1] == 0.0, "frame confidence");
    expect(cw.data() == [0.8, 0.0], "clip confidence");

    // consistency losses
    let tape = Tape::new();
    let half_s = tape.constant(Tensor::full(&[3, 4], 0.5));
    let half_w = tape.constant(Tensor::full(&[4], 0.5));
    let teacher = Prediction { strong: Tensor::full(&[3, 4], 0.2), weak: t(&[4], &[0.1, 0.2, 0.9, 0.3]) };
    let mut batch = pseudo_label_batch(&teacher, Thresholds::default(), &MedianFilterSpec::uniform(4, 1).unwrap(), FrameGate::Clip).unwrap();
    batch.c_w = t(&[4], &[0.0, 0.0, 1.0, 0.0]);
    let (lw, ls) = cmt_consistency_loss(&tape, &batch, half_s, half_w).unwrap();
    expect(close(lw.item(), std::f64::consts::LN_2 / 4.0), "single-entry clip loss");
    expect(ls.item() == 0.0, "zero-confidence frame loss");
    let (lw, ls) = mt_consistency_loss(
        &tape,
        &Prediction { strong: t(&[2, 2], &[0.1, 0.5, 0.9, 0.3]), weak: t(&[2], &[0.2, 0.6]) },
        tape.constant(t(&[2, 2], &[0.3, 0.5, 0.6, 0.7])),
        tape.constant(t(&[2], &[0.2, 0.6])),
    )
    .unwrap();
    expect(lw.item() == 0.0 && close(ls.item(), 0.29 / 4.0), "mean-teacher loss");

    // teacher update
    let mut student = ParamStore::new();
    let id = student.add("w", ParamKind::Trainable, Tensor::full(&[2], 4.0)).unwrap();
    let mut teacher = student.clone();
    teacher.get_mut(id).data_mut().fill(2.0);
    ema_update(&mut teacher, &student, 0.5).unwrap();
    expect(teacher.get(id).data() == [3.0, 3.0], "EMA");

    // median filter against sorting every window
    let mut r = rng(2024);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let len = r.gen_range(1..40);
        let density = r.gen_range(0.1..0.9);
        let seq: Vec<u8> = (0..len).map(|_| u8::from(r.gen_bool(density))).collect();
        let window = 2 * r.gen_range(0..8) + 1;
        mismatches += usize::from(median_filter(&seq, window).unwrap() != brute_median(&seq, window));
    }
    expect(mismatches == 0, "median filter");
    Outcome::check(
        failures.is_empty(),
        if failures.is_empty() {
            "fixtures exact, median filter agrees on 1000/1000 sequences".into()
        } else {
            format!("failed: {} ({mismatches} median mismatches)", failures.join(", "))
        },
    )
}

fn corpus(dir: &Path, synth: SynthConfig, n_mels: usize) -> Corpus {
    synth_generate(&synth, dir).unwrap();
    let mut features = RunConfig::default().features;
    features.n_mels = n_mels;
    Corpus::load(dir, features).unwrap()
}

const SMALL_MODEL: &str = "\
[features]
n_mels = 64
[model]
variant = mfdconv
channels = 8,16
pools = 2x4,2x4
hidden = 16
[ssl]
median_seconds = 0.1
";

fn run_config(extra: &str, overrides: &[String]) -> RunConfig {
    RunConfig::from_text(&format!("{SMALL_MODEL}{extra}"), overrides).unwrap()
}

fn overfit() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let synth = SynthConfig {
        seed: 1,
        counts: SplitCounts { strong: 20, weak: 0, unlabeled: 0, validation: 0 },
        classes: 4,
        clip_seconds: 2.0,
        event_seconds: (0.3, 1.2),
        ..SynthConfig::default()
    };
    let corpus = corpus(tmp.path(), synth, 64);
    let cfg = run_config(
        "[ssl]\nmode = supervised\n[optim]\nlr = 0.5\n[train]\nsteps = 500\nbatch_strong = 4\nbatch_weak = 0\nbatch_unlabeled = 0\neval_model = student\n",
        &[],
    );
    let out = Trainer::new(&cfg, &corpus).unwrap().run(None).unwrap();
    let clips = corpus.split(Split::Strong);
    let bce = strong_bce(&out.model, &out.best, &clips).unwrap();
    let hop = cfg.features.hop_seconds() * out.model.cfg.time_factor() as f64;
    let mf = median_spec(&cfg.ssl.median_seconds, corpus.classes.len(), hop).unwrap();
    let report =
        evaluate_clips(&out.model, &out.best, &clips, &corpus.classes, cfg.eval.threshold, &mf, hop, cfg.eval.collar).unwrap();
    let f1 = report.collar.macro_f1;
    let secs = start.elapsed().as_secs_f64();
    Outcome::check(
        bce < 0.05 && f1 > 0.9 && secs < 600.0,
        format!("20 clips, {} steps: training BCE {bce:.4}, collar F1 {f1:.3}, {secs:.1}s", out.total_steps),
    )
}

/// 10% strong, 20% weak, 70% unlabeled, plus a strongly labeled
/// validation split.
fn trend_corpus(dir: &Path) -> Corpus {
    let synth = SynthConfig {
        seed: 2,
        counts: SplitCounts { strong: 10, weak: 20, unlabeled: 70, validation: 40 },
        classes: 4,
        clip_seconds: 2.0,
        event_seconds: (0.3, 1.2),
        ..SynthConfig::default()
    };
    corpus(dir, synth, 64)
}

const TREND_TRAINING: &str = "\
[optim]
lr = 0.5
[train]
steps = 200
batch_strong = 2
batch_weak = 2
batch_unlabeled = 4
eval_every = 50
";

/// Validation collar F1 of the final model.
fn final_f1(cfg: &RunConfig, corpus: &Corpus) -> f64 {
    let out = Trainer::new(cfg, corpus).unwrap().run(None).unwrap();
    out.validation.last().expect("validation split present").collar_f1
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/")
}

fn semi_supervised_trend(corpus: &Corpus) -> Outcome {
    let start = Instant::now();
    let mut means = Vec::new();
    let mut parts = Vec::new();
    for mode in ["supervised", "mt", "cmt"] {
        let scores: Vec<f64> = (0..3)
            .map(|seed| final_f1(&run_config(TREND_TRAINING, &[format!("ssl.mode={mode}"), format!("train.seed={seed}")]), corpus))
            .collect();
        parts.push(format!("{mode} {:.3} ({})", mean(&scores), fmt(&scores)));
        means.push(mean(&scores));
    }
    let (sup, mt, cmt) = (means[0], means[1], means[2]);
    Outcome::trend(
        cmt >= mt && mt >= sup && cmt - sup >= 0.02,
        format!("mean validation F1: {}; {:.0}s", parts.join(", "), start.elapsed().as_secs_f64()),
    )
}

fn ablation(corpus: &Corpus) -> Outcome {
    let start = Instant::now();
    let arms = [("kernel", [true, false, false]), ("out-channel", [false, true, false]), ("in-channel", [false, false, true]), ("all", [true, true, true])];
    let mut means = Vec::new();
    let mut parts = Vec::new();
    for (name, [w, f, c]) in arms {
        let scores: Vec<f64> = (0..3)
            .map(|seed| {
                let o = [
                    "ssl.mode=supervised".to_string(),
                    "train.batch_unlabeled=0".to_string(),
                    format!("model.alpha_w={w}"),
                    format!("model.alpha_f={f}"),
                    format!("model.alpha_c={c}"),
                    format!("train.seed={seed}"),
                ];
                final_f1(&run_config(TREND_TRAINING, &o), corpus)
            })
            .collect();
        parts.push(format!("{name} {:.3} ({})", mean(&scores), fmt(&scores)));
        means.push(mean(&scores));
    }
    let best_single = means[..3].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Outcome::trend(
        means[3] >= best_single,
        format!("mean validation F1: {}; {:.0}s", parts.join(", "), start.elapsed().as_secs_f64()),
    )
}

fn determinism(corpus: &Corpus) -> Outcome {
    let cfg = run_config(TREND_TRAINING, &["ssl.mode=cmt".into(), "train.steps=11".into(), "ssl.input_noise=0.1".into(), "train.seed=9".into()]);
    let lines = || -> Vec<String> {
        let out = Trainer::new(&cfg, corpus).unwrap().run(None).unwrap();
        [0, 10].iter().map(|&i| serde_json::to_string(&out.metrics[i]).unwrap()).collect()
    };
    let (a, b) = (lines(), lines());
    Outcome::check(a == b, format!("step 0 and step 10 JSONL identical across runs: {}", a == b))
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let mut trend: Option<Corpus> = None;
    let mut trend_corpus = || trend.get_or_insert_with(|| trend_corpus(tmp.path())).clone();
    let criteria: Vec<(&str, Box<dyn FnOnce() -> Outcome>)> = vec![
        ("gradient suite", Box::new(gradient_suite)),
        ("oracle equivalence", Box::new(oracle_equivalence)),
        ("degeneracy ladder", Box::new(degeneracy_ladder)),
        ("pseudo-label and consistency suite", Box::new(cmt_suite)),
        ("overfit smoke test", Box::new(overfit)),
        ("semi-supervised trend", {
            let c = trend_corpus();
            Box::new(move || semi_supervised_trend(&c))
        }),
        ("attention ablation", {
            let c = trend_corpus();
            Box::new(move || ablation(&c))
        }),
        ("determinism", {
            let c = trend_corpus();
            Box::new(move || determinism(&c))
        }),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.into_iter().enumerate() {
        let outcome = run();
        let tag = match outcome.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Flagged => "FAIL (flagged, non-fatal)",
        };
        println!("criterion {} {name}: {tag}: {}", i + 1, outcome.detail);
        failed += usize::from(outcome.verdict == Verdict::Fail);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
