//! Finite-difference gradient checks of conv layers and a tiny CRNN, shared
//! by the `grad-check` command and the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dynconv::{ConvVariant, ConvVariantConfig, DynConvLayer};
use crate::error::Result;
use crate::model::{supervised_loss, BnMode, ClipTarget, ConvBlockConfig, Crnn, CrnnConfig};
use crate::tensor::gradcheck::grad_check_many;
use crate::tensor::{GradCheckReport, ParamStore, Tensor};

/// Tolerance on the maximum relative error of a single layer.
pub const LAYER_TOLERANCE: f64 = 1e-4;
/// Tolerance for the whole network, where errors compound through the GRU.
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Checks input and parameter gradients of one randomly initialized
/// `variant` layer (3 → 2 channels, 3×3 kernel, 3 basis kernels).
/// `fault` scales the layer's backward pass and must be caught.
pub fn variant_grad_check(variant: ConvVariant, seed: u64, fault: Option<f64>) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let layer = DynConvLayer::new(&mut store, "layer", 3, 2, 3, ConvVariantConfig::for_variant(variant, 3), &mut rng)?;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.8..0.8));
    }
    let x = random(&mut rng, &[4, 5, 3]);
    let weights = random(&mut rng, &[4, 5, 2]);
    let mut points = vec![x];
    points.extend(store.ids().map(|id| store.get(id).clone()));
    grad_check_many(
        |tape, vars| {
            let mut y = layer.forward(vars[0], &vars[1..])?;
            if let Some(factor) = fault {
                y = y.with_faulty_backward(factor);
            }
            Ok(y.mul(tape.constant(weights.clone()))?.sum())
        },
        &points,
        1e-5,
    )
}

/// Two conv blocks, hidden size 8 and three classes.
pub fn tiny_crnn_config(variant: ConvVariant) -> CrnnConfig {
    let conv = ConvVariantConfig::for_variant(variant, 2);
    let mut cfg = CrnnConfig::desk_default(3);
    cfg.n_mels = 8;
    cfg.hidden = 8;
    cfg.blocks = vec![
        ConvBlockConfig { c_out: 4, k: 3, pool: (2, 2), conv: conv.clone() },
        ConvBlockConfig { c_out: 4, k: 3, pool: (1, 2), conv },
    ];
    cfg
}

/// Gradient of the supervised loss of a two-clip batch (one strong, one
/// weak) w.r.t. the input and every parameter of a tiny CRNN.
pub fn crnn_grad_check(variant: ConvVariant, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (model, mut store) = Crnn::new(tiny_crnn_config(variant), &mut rng)?;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        // non-zero biases and perturbed gains exercise every path
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.2..0.2));
    }
    let spec = random(&mut rng, &[8, 8]);
    let strong_y = Tensor::from_fn(&[4, 3], |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
    let weak_y = Tensor::new(&[3], vec![1.0, 0.0, 1.0])?;
    let mut points = vec![spec];
    points.extend(store.ids().map(|id| store.get(id).clone()));
    grad_check_many(
        |tape, vars| {
            let out = model.forward_batch(&vars[1..], &[vars[0], vars[0].scale(0.5)], BnMode::Batch)?;
            let targets = [ClipTarget::Strong(strong_y.clone()), ClipTarget::Weak(weak_y.clone())];
            Ok(supervised_loss(tape, &out.clips, &targets)?.loss)
        },
        &points,
        1e-6,
    )
}
