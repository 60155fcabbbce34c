//! Shared helpers for the integration suites: finite-difference
//! gradient checks over every tape operation and the composed model.

#![allow(dead_code)]

use cwat_core::cae::{decode, encode, CaeConfig, CaeParamIds, CaeParams, LayerSpec};
use cwat_core::classifier::{
    classify, TransformerConfig, TransformerParamIds, TransformerParams,
};
use cwat_core::{Tape, Tensor, TensorId};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;

/// Asserts |a - n| <= max(rel * max(|a|, |n|), abs) elementwise.
pub fn assert_grads_close(analytic: &[f64], numeric: &[f64], rel: f64, abs: f64, what: &str) {
    assert_eq!(analytic.len(), numeric.len(), "{what}: length mismatch");
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let tol = (rel * a.abs().max(n.abs())).max(abs);
        assert!(
            (a - n).abs() <= tol,
            "{what}[{i}]: analytic {a:.12e} vs numeric {n:.12e} (tol {tol:.3e})"
        );
    }
}

pub fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let data: Vec<f64> = (0..shape.iter().product::<usize>())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap().with_grad()
}

/// Keeps every value at least `margin` from zero so kinked ops (relu)
/// stay differentiable at the probe points.
pub fn away_from_zero(mut t: Tensor, margin: f64) -> Tensor {
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = margin.copysign(if *v == 0.0 { 1.0 } else { *v });
        }
    }
    t
}

fn fixed(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..shape.iter().product::<usize>())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// FD-checks d(loss)/d(input) for every element of every input against
/// the tape's backward pass. `build` must rebuild the same graph from
/// plain tensors on each call.
pub fn check_op(
    what: &str,
    inputs: &[Tensor],
    rel: f64,
    abs: f64,
    build: impl Fn(&mut Tape, &[TensorId]) -> TensorId,
) {
    let loss_of = |inputs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let loss = build(&mut tape, &ids);
        tape.value(loss).data()[0]
    };

    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = build(&mut tape, &ids);
    assert_eq!(tape.value(loss).numel(), 1, "{what}: loss must be scalar");
    tape.backward(loss).unwrap();

    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, id) in ids.iter().enumerate() {
        let analytic = tape
            .grad(*id)
            .unwrap_or_else(|| panic!("{what}: input {k} has no gradient"))
            .to_vec();
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..analytic.len() {
            let orig = work[k].data()[j];
            work[k].data_mut()[j] = orig + FD_STEP;
            let up = loss_of(&work);
            work[k].data_mut()[j] = orig - FD_STEP;
            let down = loss_of(&work);
            work[k].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        assert_grads_close(&analytic, &numeric, rel, abs, &format!("{what} input{k}"));
    }
}

/// Scalarizes a non-scalar op output against a fixed target so every
/// output element contributes a distinct gradient signal.
fn mse_vs(tape: &mut Tape, out: TensorId, target: &Tensor) -> TensorId {
    let t = tape.leaf(target);
    tape.mse_loss(out, t).unwrap()
}

pub fn op_matmul(rel: f64, abs: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&[5, 7], &mut rng);
    let b = rand_tensor(&[7, 4], &mut rng);
    let target = fixed(&[5, 4], 100);
    check_op("matmul", &[a, b], rel, abs, |tape, ids| {
        let y = tape.matmul(ids[0], ids[1]).unwrap();
        mse_vs(tape, y, &target)
    });
}

pub fn op_conv_channelwise(rel: f64, abs: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&[6, 16], &mut rng);
    let k = rand_tensor(&[6, 2, 5], &mut rng);
    let target = fixed(&[6, 8], 101);
    check_op("conv groups=3 stride=2", &[x, k], rel, abs, |tape, ids| {
        let y = tape.conv1d_grouped(ids[0], ids[1], 3, 2, 2).unwrap();
        mse_vs(tape, y, &target)
    });
}

pub fn op_conv_dense(rel: f64, abs: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&[4, 10], &mut rng);
    let k = rand_tensor(&[3, 4, 3], &mut rng);
    let target = fixed(&[3, 10], 102);
    check_op("conv groups=1 same-pad", &[x, k], rel, abs, |tape, ids| {
        let y = tape.conv1d_grouped(ids[0], ids[1], 1, 1, 1).unwrap();
        mse_vs(tape, y, &target)
    });
}

pub fn op_conv_wide_stride(rel: f64, abs: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&[2, 13], &mut rng);
    let k = rand_tensor(&[6, 1, 7], &mut rng);
    let target = fixed(&[6, 4], 103);
    check_op("conv groups=2 stride=4", &[x, k], rel, abs, |tape, ids| {
        let y = tape.conv1d_grouped(ids[0], ids[1], 2, 4, 3).unwrap();
        mse_vs(tape, y, &target)
    });
}

pub fn op_layer_norm(rel: f64, abs: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&[4, 8], &mut rng);
    let gain = rand_tensor(&[8], &mut rng);
    let bias = rand_tensor(&[8], &mut rng);
    let target = fixed(&[4, 8], 104);
    check_op("layer_norm", &[x, gain, bias], rel, abs, |tape, ids| {
        let y = tape.layer_norm(ids[0], ids[1], ids[2], 1e-5).unwrap();
        mse_vs(tape, y, &target)
    });
}

pub fn op_softmax(rel: f64, abs: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&[4, 6], &mut rng);
    let target = fixed(&[4, 6], 105);
    check_op("softmax", &[x], rel, abs, |tape, ids| {
        let y = tape.softmax_lastdim(ids[0]);
        mse_vs(tape, y, &target)
    });
}

pub fn op_relu(rel: f64, abs: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = away_from_zero(rand_tensor(&[5, 8], &mut rng), 0.05);
    let target = fixed(&[5, 8], 106);
    check_op("relu", &[x], rel, abs, |tape, ids| {
        let y = tape.relu(ids[0]);
        mse_vs(tape, y, &target)
    });
}

pub fn op_dropout_training(rel: f64, abs: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&[6, 8], &mut rng);
    let target = fixed(&[6, 8], 107);
    // The mask is a function of the seed alone, so each FD rebuild sees
    // the identical mask.
    check_op("dropout training", &[x], rel, abs, |tape, ids| {
        let mut mask_rng = ChaCha8Rng::seed_from_u64(99);
        let y = tape.dropout(ids[0], 0.3, true, &mut mask_rng).unwrap();
        mse_vs(tape, y, &target)
    });
}

pub fn op_dropout_eval(rel: f64, abs: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&[4, 4], &mut rng);
    let target = fixed(&[4, 4], 108);
    check_op("dropout eval", &[x], rel, abs, |tape, ids| {
        let mut mask_rng = ChaCha8Rng::seed_from_u64(99);
        let y = tape.dropout(ids[0], 0.3, false, &mut mask_rng).unwrap();
        mse_vs(tape, y, &target)
    });
}

pub fn op_add(rel: f64, abs: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = rand_tensor(&[6, 7], &mut rng);
    let b = rand_tensor(&[6, 7], &mut rng);
    let target = fixed(&[6, 7], 109);
    check_op("add", &[a, b], rel, abs, |tape, ids| {
        let y = tape.add(ids[0], ids[1]).unwrap();
        mse_vs(tape, y, &target)
    });
}

pub fn op_add_row_vector(rel: f64, abs: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&[5, 8], &mut rng);
    let v = rand_tensor(&[8], &mut rng);
    let target = fixed(&[5, 8], 110);
    check_op("add_row_vector", &[x, v], rel, abs, |tape, ids| {
        let y = tape.add_row_vector(ids[0], ids[1]).unwrap();
        mse_vs(tape, y, &target)
    });
}

pub fn op_mean_lastdim(rel: f64, abs: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_tensor(&[6, 8], &mut rng);
    let target = fixed(&[6], 111);
    check_op("mean_lastdim", &[x], rel, abs, |tape, ids| {
        let y = tape.mean_lastdim(ids[0]);
        mse_vs(tape, y, &target)
    });
}

pub fn op_scale(rel: f64, abs: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = rand_tensor(&[5, 5], &mut rng);
    let target = fixed(&[5, 5], 112);
    check_op("scale", &[x], rel, abs, |tape, ids| {
        let y = tape.scale(ids[0], 1.7);
        mse_vs(tape, y, &target)
    });
}

pub fn op_transpose2d(rel: f64, abs: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = rand_tensor(&[5, 7], &mut rng);
    let target = fixed(&[7, 5], 113);
    check_op("transpose2d", &[x], rel, abs, |tape, ids| {
        let y = tape.transpose2d(ids[0]).unwrap();
        mse_vs(tape, y, &target)
    });
}

pub fn op_reshape(rel: f64, abs: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = rand_tensor(&[4, 6], &mut rng);
    let target = fixed(&[3, 8], 114);
    check_op("reshape", &[x], rel, abs, |tape, ids| {
        let y = tape.reshape(ids[0], vec![3, 8]).unwrap();
        mse_vs(tape, y, &target)
    });
}

pub fn op_sum(rel: f64, abs: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = rand_tensor(&[6, 6], &mut rng);
    check_op("sum", &[x], rel, abs, |tape, ids| tape.sum(ids[0]));
}

pub fn op_downsample_stride(rel: f64, abs: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = rand_tensor(&[5, 13], &mut rng);
    let target = fixed(&[5, 4], 115);
    check_op("downsample_stride", &[x], rel, abs, |tape, ids| {
        let y = tape.downsample_stride(ids[0], 4).unwrap();
        mse_vs(tape, y, &target)
    });
}

pub fn op_upsample_to(rel: f64, abs: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let x = rand_tensor(&[5, 4], &mut rng);
    let target = fixed(&[5, 13], 116);
    check_op("upsample_to", &[x], rel, abs, |tape, ids| {
        let y = tape.upsample_to(ids[0], 4, 13).unwrap();
        mse_vs(tape, y, &target)
    });
}

pub fn op_mse_loss(rel: f64, abs: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let pred = rand_tensor(&[4, 6], &mut rng);
    let target = rand_tensor(&[4, 6], &mut rng);
    check_op("mse_loss", &[pred, target], rel, abs, |tape, ids| {
        tape.mse_loss(ids[0], ids[1]).unwrap()
    });
}

pub fn op_cross_entropy(rel: f64, abs: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let logits = rand_tensor(&[5], &mut rng);
    check_op("cross_entropy label=2", &[logits], rel, abs, |tape, ids| {
        tape.cross_entropy_logits(ids[0], 2).unwrap()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let logits = rand_tensor(&[2], &mut rng);
    check_op("cross_entropy label=0", &[logits], rel, abs, |tape, ids| {
        tape.cross_entropy_logits(ids[0], 0).unwrap()
    });
}

/// Every differentiable tape operation, checked in isolation.
pub const OP_CHECKS: &[(&str, fn(f64, f64))] = &[
    ("matmul", op_matmul),
    ("conv1d_grouped channelwise", op_conv_channelwise),
    ("conv1d_grouped dense", op_conv_dense),
    ("conv1d_grouped wide stride", op_conv_wide_stride),
    ("layer_norm", op_layer_norm),
    ("softmax_lastdim", op_softmax),
    ("relu", op_relu),
    ("dropout training", op_dropout_training),
    ("dropout eval", op_dropout_eval),
    ("add", op_add),
    ("add_row_vector", op_add_row_vector),
    ("mean_lastdim", op_mean_lastdim),
    ("scale", op_scale),
    ("transpose2d", op_transpose2d),
    ("reshape", op_reshape),
    ("sum", op_sum),
    ("downsample_stride", op_downsample_stride),
    ("upsample_to", op_upsample_to),
    ("mse_loss", op_mse_loss),
    ("cross_entropy_logits", op_cross_entropy),
];

// ── composed model ───────────────────────────────────────────────────────

pub fn composite_configs() -> (CaeConfig, TransformerConfig) {
    let cae = CaeConfig {
        channels: 4,
        input_length: 64,
        latent_per_channel: 4,
        layer_specs: vec![
            LayerSpec { kernel_size: 5, stride: 4, feature_multiplier: 2 },
            LayerSpec { kernel_size: 3, stride: 4, feature_multiplier: 1 },
        ],
        norm_kind: Default::default(),
    };
    let tx = TransformerConfig {
        input_dim: 4,
        model_dim: 8,
        key_dim: 4,
        ff_dim: 16,
        n_layers: 1,
        dropout_rate: 0.0,
        seq_axis: Default::default(),
    };
    (cae, tx)
}

/// Reconstruction loss plus classification loss through the whole
/// pipeline; exercises every parameter of both models at once.
fn composite_loss(
    cae: &CaeParams,
    tx: &TransformerParams,
    cae_cfg: &CaeConfig,
    tx_cfg: &TransformerConfig,
    input: &Tensor,
) -> (f64, Tape, Vec<TensorId>, TensorId) {
    let mut tape = Tape::new();
    let cids = CaeParamIds::register(&mut tape, cae);
    let tids = TransformerParamIds::register(&mut tape, tx);
    let x = tape.leaf(input);
    let z = encode(&mut tape, x, &cids, cae_cfg).unwrap();
    let xhat = decode(&mut tape, z, &cids, cae_cfg).unwrap();
    let recon = tape.mse_loss(xhat, x).unwrap();
    let out = classify(&mut tape, z, &tids, tx_cfg, None).unwrap();
    let ce = tape.cross_entropy_logits(out.logits, 1).unwrap();
    let loss = tape.add(recon, ce).unwrap();
    let mut param_ids = cids.flat();
    param_ids.extend(tids.flat());
    param_ids.push(x);
    let v = tape.value(loss).data()[0];
    (v, tape, param_ids, loss)
}

/// Shifts every parameter off its structured init value. Fresh norm
/// biases are exactly zero, and a latent channel fully silenced by the
/// encoder relu turns decoder norm rows into bias alone, which parks
/// relu inputs exactly on the kink where FD is undefined. A generic
/// point keeps every relu input at a safe distance from zero.
fn jitter(cae: &mut CaeParams, tx: &mut TransformerParams, rng: &mut ChaCha8Rng) {
    for (_, t) in cae.named_tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
    for (_, t) in tx.named_tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
}

/// FD check of every parameter element and every input element through
/// the composed encoder + decoder + classifier graph.
pub fn composed_model_check(rel: f64, abs: f64) {
    let (cae_cfg, tx_cfg) = composite_configs();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut cae = CaeParams::init(&cae_cfg, &mut rng).unwrap();
    let mut tx = TransformerParams::init(&tx_cfg, &mut rng).unwrap();
    jitter(&mut cae, &mut tx, &mut rng);
    let mut input = rand_tensor(&[4, 64], &mut rng);

    let (_, mut tape, param_ids, loss) = composite_loss(&cae, &tx, &cae_cfg, &tx_cfg, &input);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = param_ids
        .iter()
        .map(|id| tape.grad(*id).expect("param grad").to_vec())
        .collect();

    let mut names: Vec<String> = cae
        .named_tensors()
        .iter()
        .map(|(n, _)| format!("cae.{n}"))
        .chain(tx.named_tensors().iter().map(|(n, _)| format!("classifier.{n}")))
        .collect();
    names.push("input".to_string());

    let n_cae = cae.named_tensors().len();
    let n_tx = tx.named_tensors().len();
    for k in 0..(n_cae + n_tx + 1) {
        let len = analytic[k].len();
        let mut numeric = Vec::with_capacity(len);
        for j in 0..len {
            let mut eval_at = |delta: f64| -> f64 {
                let shift = |d: f64, cae: &mut CaeParams, tx: &mut TransformerParams, input: &mut Tensor| {
                    if k < n_cae {
                        cae.named_tensors_mut()[k].1.data_mut()[j] += d;
                    } else if k < n_cae + n_tx {
                        tx.named_tensors_mut()[k - n_cae].1.data_mut()[j] += d;
                    } else {
                        input.data_mut()[j] += d;
                    }
                };
                shift(delta, &mut cae, &mut tx, &mut input);
                let (v, _, _, _) = composite_loss(&cae, &tx, &cae_cfg, &tx_cfg, &input);
                shift(-delta, &mut cae, &mut tx, &mut input);
                v
            };
            let up = eval_at(FD_STEP);
            let down = eval_at(-FD_STEP);
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        assert_grads_close(&analytic[k], &numeric, rel, abs, &names[k]);
    }
}
