mod common;

use common::*;
use mfdconv::dynconv::{
    assemble_effective_kernel, AttentionPooling, ConvVariant, ConvVariantConfig, DynConvLayer, FreqAttentionMaps,
};
use mfdconv::tensor::gradcheck::grad_check_many;
use mfdconv::tensor::{ParamStore, Tape};
use mfdconv::Tensor;
use rand::Rng;

fn randomize(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut r = rng(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = r.gen_range(-scale..scale));
    }
}

fn run(layer: &DynConvLayer, store: &ParamStore, x: &Tensor, route: ConvVariant) -> Tensor {
    let tape = Tape::new();
    let vars = store.bind(&tape);
    let xv = tape.constant(x.clone());
    let y = match route {
        ConvVariant::Static => layer.forward(xv, &vars),
        ConvVariant::DyConv => layer.dyconv_forward(xv, &vars),
        ConvVariant::FdConv => layer.fdconv_forward(xv, &vars),
        ConvVariant::OdConv => layer.odconv_forward(xv, &vars),
        ConvVariant::MfdConv => layer.mfdconv_forward(xv, &vars),
    };
    y.unwrap().detach()
}

#[test]
fn fused_layer_matches_per_frequency_oracle() {
    let mut worst: f64 = 0.0;
    for case in 0..20u64 {
        let mut r = rng(100 + case);
        let t = r.gen_range(2..7);
        let f = r.gen_range(2..9);
        let ci = r.gen_range(1..5);
        let co = r.gen_range(1..5);
        let n = r.gen_range(1..5);
        let k = [1, 3, 5][r.gen_range(0..3)];
        let mut cfg = ConvVariantConfig::mfdconv(n);
        cfg.enable_alpha_c = r.gen_bool(0.7);
        cfg.enable_alpha_f = r.gen_bool(0.7);
        cfg.enable_alpha_w = r.gen_bool(0.8);
        cfg.r = r.gen_range(1..3);
        let (mut store, layer) = build_layer(cfg, ci, co, k, case);
        randomize(&mut store, 500 + case, 0.8);
        let x = random_tensor(&mut r, &[t, f, ci], 1.0);
        let got = run(&layer, &store, &x, ConvVariant::MfdConv);
        let want = naive_dynamic_layer(&x, &store, &layer, false);
        worst = worst.max(got.max_abs_diff(&want));
    }
    assert!(worst <= 1e-10, "max deviation {worst:e}");
}

#[test]
fn assembled_kernel_matches_oracle() {
    let mut r = rng(7);
    let bank = random_tensor(&mut r, &[3, 4, 2, 3, 3], 1.0);
    let maps = FreqAttentionMaps {
        alpha_w: random_tensor(&mut r, &[5, 3], 1.0),
        alpha_f: random_tensor(&mut r, &[5, 4], 1.0),
        alpha_c: random_tensor(&mut r, &[5, 2], 1.0),
        enabled: [true; 3],
    };
    for f in 0..5 {
        let got = assemble_effective_kernel(&bank, &maps, f).unwrap();
        let want = naive_assemble(&bank, maps.alpha_w.row(f), maps.alpha_f.row(f), maps.alpha_c.row(f));
        let diff = got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-14);
    }
}

#[test]
fn attention_head_matches_straight_line_oracle() {
    let (mut store, layer) = build_layer(ConvVariantConfig::mfdconv(2), 2, 3, 3, 11);
    randomize(&mut store, 12, 0.7);
    let x = random_tensor(&mut rng(13), &[4, 8, 2], 1.0);
    let tape = Tape::new();
    let vars = store.bind(&tape);
    let attn = layer.compute_attentions(tape.constant(x.clone()), &vars).unwrap().values();
    let oracle = naive_attention(&x, &store, &layer, false);
    for (got, want) in [&attn.alpha_w, &attn.alpha_f, &attn.alpha_c].into_iter().zip(oracle) {
        let want = Tensor::from_rows(&want.unwrap()).unwrap();
        assert!(got.max_abs_diff(&want) <= 1e-12);
    }
    for f in 0..8 {
        let s: f64 = attn.alpha_w.row(f).iter().sum();
        assert!((s - 1.0).abs() <= 1e-12);
        assert!(attn.alpha_w.row(f).iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn global_routes_match_oracle() {
    for (case, variant) in [ConvVariant::DyConv, ConvVariant::OdConv].into_iter().enumerate() {
        let (mut store, layer) = build_layer(ConvVariantConfig::for_variant(variant, 3), 3, 4, 3, case as u64);
        randomize(&mut store, 40 + case as u64, 0.8);
        let x = random_tensor(&mut rng(50 + case as u64), &[5, 6, 3], 1.0);
        let got = run(&layer, &store, &x, variant);
        let want = naive_dynamic_layer(&x, &store, &layer, true);
        assert!(got.max_abs_diff(&want) <= 1e-10, "{variant}");
    }
}

#[test]
fn fdconv_route_matches_oracle() {
    let (mut store, layer) = build_layer(ConvVariantConfig::fdconv(4), 2, 3, 3, 21);
    randomize(&mut store, 22, 0.8);
    let x = random_tensor(&mut rng(23), &[6, 7, 2], 1.0);
    let got = run(&layer, &store, &x, ConvVariant::FdConv);
    let want = naive_dynamic_layer(&x, &store, &layer, false);
    assert!(got.max_abs_diff(&want) <= 1e-10);
}

#[test]
fn identity_attention_single_kernel_is_static_conv() {
    let mut cfg = ConvVariantConfig::mfdconv(1);
    cfg.enable_alpha_c = false;
    cfg.enable_alpha_f = false;
    cfg.enable_alpha_w = false;
    let (mut store, layer) = build_layer(cfg, 3, 2, 3, 31);
    randomize(&mut store, 32, 1.0);
    let x = random_tensor(&mut rng(33), &[5, 6, 3], 1.0);
    let dynamic = run(&layer, &store, &x, ConvVariant::MfdConv);

    let mut static_store = ParamStore::new();
    let static_layer =
        DynConvLayer::new(&mut static_store, "layer", 3, 2, 3, ConvVariantConfig::static_conv(), &mut rng(0)).unwrap();
    let kernel = store.get(layer.bank.kernels).reshape(&[2, 3, 3, 3]).unwrap();
    *static_store.get_mut(static_layer.bank.kernels) = kernel;
    *static_store.get_mut(static_layer.bank.bias) = store.get(layer.bank.bias).clone();
    let plain = run(&static_layer, &static_store, &x, ConvVariant::Static);
    assert!(dynamic.max_abs_diff(&plain) <= 1e-12);
}

#[test]
fn kernel_only_layer_reproduces_fdconv() {
    let mut cfg = ConvVariantConfig::mfdconv(3);
    cfg.enable_alpha_c = false;
    cfg.enable_alpha_f = false;
    let (mut store, layer) = build_layer(cfg, 3, 4, 3, 41);
    randomize(&mut store, 42, 0.9);
    let x = random_tensor(&mut rng(43), &[4, 9, 3], 1.0);
    let fused = run(&layer, &store, &x, ConvVariant::MfdConv);
    let separate = run(&layer, &store, &x, ConvVariant::FdConv);
    assert!(fused.max_abs_diff(&separate) <= 1e-10);
}

#[test]
fn globally_pooled_kernel_only_layer_reproduces_dyconv() {
    let mut cfg = ConvVariantConfig::mfdconv(3);
    cfg.enable_alpha_c = false;
    cfg.enable_alpha_f = false;
    cfg.pooling = AttentionPooling::Global;
    let (mut store, layer) = build_layer(cfg, 3, 4, 3, 51);
    randomize(&mut store, 52, 0.9);
    let x = random_tensor(&mut rng(53), &[4, 9, 3], 1.0);
    let fused = run(&layer, &store, &x, ConvVariant::MfdConv);
    let aggregated = run(&layer, &store, &x, ConvVariant::DyConv);
    assert!(fused.max_abs_diff(&aggregated) <= 1e-10);
}

#[test]
fn frequency_constant_input_reproduces_odconv() {
    // A pointwise stem keeps every bin's attention identical when the
    // input does not vary along frequency.
    let mut cfg = ConvVariantConfig::mfdconv(3);
    cfg.stem_kernel = 1;
    let (mut store, fused_layer) = build_layer(cfg.clone(), 3, 2, 3, 61);
    randomize(&mut store, 62, 0.9);
    cfg.pooling = AttentionPooling::Global;
    let mut global_store = ParamStore::new();
    let global_layer = DynConvLayer::new(&mut global_store, "layer", 3, 2, 3, cfg, &mut rng(0)).unwrap();
    global_store.load_named(&store.named_tensors()).unwrap();

    let mut r = rng(63);
    let per_time: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
    let x = Tensor::from_fn(&[5, 7, 3], |i| per_time[i / 21][i % 3]);
    let fused = run(&fused_layer, &store, &x, ConvVariant::MfdConv);
    let global = run(&global_layer, &global_store, &x, ConvVariant::OdConv);
    assert!(fused.max_abs_diff(&global) <= 1e-10);
}

#[test]
fn permuting_basis_kernels_leaves_output_unchanged() {
    let (mut store, layer) = build_layer(ConvVariantConfig::mfdconv(4), 3, 2, 3, 71);
    randomize(&mut store, 72, 0.9);
    let x = random_tensor(&mut rng(73), &[4, 6, 3], 1.0);
    let before = run(&layer, &store, &x, ConvVariant::MfdConv);

    let perm = [2usize, 0, 3, 1];
    let bank = store.get(layer.bank.kernels).clone();
    let per_kernel = bank.numel() / 4;
    let mut permuted = bank.clone();
    for (dst, &src) in perm.iter().enumerate() {
        permuted.data_mut()[dst * per_kernel..(dst + 1) * per_kernel]
            .copy_from_slice(&bank.data()[src * per_kernel..(src + 1) * per_kernel]);
    }
    *store.get_mut(layer.bank.kernels) = permuted;
    let branch = layer.head.unwrap().branch_w.unwrap();
    for id in [branch.weight, branch.bias] {
        let t = store.get(id).clone();
        let row = t.numel() / 4;
        let mut p = t.clone();
        for (dst, &src) in perm.iter().enumerate() {
            p.data_mut()[dst * row..(dst + 1) * row].copy_from_slice(&t.data()[src * row..(src + 1) * row]);
        }
        *store.get_mut(id) = p;
    }
    let after = run(&layer, &store, &x, ConvVariant::MfdConv);
    assert!(before.max_abs_diff(&after) <= 1e-12);
}

fn layer_grad_error(cfg: ConvVariantConfig, seed: u64) -> f64 {
    let (mut store, layer) = build_layer(cfg, 3, 2, 3, seed);
    randomize(&mut store, seed + 1000, 0.8);
    let mut r = rng(seed + 2000);
    let x = random_tensor(&mut r, &[4, 5, 3], 1.0);
    let weights = random_tensor(&mut r, &[4, 5, 2], 1.0);
    let mut points = vec![x];
    points.extend(store.ids().map(|id| store.get(id).clone()));
    let report = grad_check_many(
        |tape, vars| {
            let y = layer.forward(vars[0], &vars[1..])?;
            Ok(y.mul(tape.constant(weights.clone()))?.sum())
        },
        &points,
        1e-5,
    )
    .unwrap();
    report.max_rel_error
}

#[test]
fn every_variant_has_correct_gradients() {
    for variant in ConvVariant::ALL {
        let err = layer_grad_error(ConvVariantConfig::for_variant(variant, 3), 90);
        assert!(err < 1e-4, "{variant}: {err:e}");
    }
}
