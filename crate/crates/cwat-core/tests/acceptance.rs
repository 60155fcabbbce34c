//! The exit gate: one test per acceptance criterion, each printing a
//! single PASS line with its measured figures.

mod common;

use std::sync::OnceLock;
use std::time::Instant;

use cwat_core::cae::{
    count_cost_conv, encode, CaeConfig, CaeParamIds, CaeParams, ConvKind, LayerSpec,
};
use cwat_core::classifier::{count_cost_transformer, TransformerConfig, TransformerParams};
use cwat_core::edfio::{parse_edf, write_edf, ChannelData, EegRecording, Label, MONTAGE_10_20};
use cwat_core::evaluation::{confusion, model_cost, per_case_vote, SignalPred};
use cwat_core::preprocess::{downsample, preprocess_recording, PreprocessConfig, Segment};
use cwat_core::synth::{generate_segments, write_edf_fixtures, SynthSpec};
use cwat_core::training::{
    classify_latent, encode_latent, restore_checkpoint, split_by_subject, train,
    write_checkpoint, MetricsRow, TrainConfig, TrainPhase,
};
use cwat_core::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pass(n: u32, what: &str, detail: &str) {
    println!("criterion {n:02} ({what}): PASS — {detail}");
}

#[test]
fn criterion_01_channelwise_conv_cost_ratio() {
    let start = Instant::now();
    let c = 19u64;
    let mut checked = 0u64;
    for kernel in [3usize, 5, 7, 9, 11] {
        for fm_in in [1usize, 2, 4, 8, 16] {
            for fm_out in [1usize, 2, 4, 8, 16] {
                for out_len in [188usize, 750, 3000, 12000] {
                    let standard = count_cost_conv(
                        kernel,
                        19 * fm_in,
                        19 * fm_out,
                        out_len,
                        ConvKind::Standard,
                    );
                    let channelwise = count_cost_conv(
                        kernel,
                        19 * fm_in,
                        19 * fm_out,
                        out_len,
                        ConvKind::Channelwise { channels: 19 },
                    );
                    assert_eq!(standard.flops, c * channelwise.flops, "flops ratio");
                    assert_eq!(standard.params, c * channelwise.params, "params ratio");
                    checked += 1;
                }
            }
        }
    }
    assert!(start.elapsed().as_secs() < 1, "criterion 1 over time budget");
    pass(1, "channelwise conv cost ratio", &format!("{checked} configs, ratio exactly 1/19"));
}

#[test]
fn criterion_02_attention_projection_params() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let d = rng.random_range(1..=256usize);
        let dk = rng.random_range(1..=256usize);
        let cfg = TransformerConfig {
            input_dim: 7,
            model_dim: d,
            key_dim: dk,
            ff_dim: 16,
            n_layers: 1,
            dropout_rate: 0.0,
            seq_axis: Default::default(),
        };
        let rows = count_cost_transformer(&cfg, 19, false);
        let qkv = rows
            .iter()
            .find(|r| r.label == "layer0.qkv_projections")
            .expect("qkv row");
        assert_eq!(qkv.params, 3 * d as u64 * dk as u64, "d={d} dk={dk}");
    }
    assert!(start.elapsed().as_secs() < 1, "criterion 2 over time budget");
    pass(2, "attention projection params", "50 samples, 3*d*d_k exact");
}

#[test]
fn criterion_03_channel_independence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut grad_signal_draws = 0usize;
    for draw in 0..100 {
        let channels = rng.random_range(2..=6usize);
        let input_length = [64, 96, 128][rng.random_range(0..3usize)];
        // Stride products stay at 16 or more: the config contract
        // requires at least 16x temporal compression.
        let n_layers = rng.random_range(1..=2usize);
        let mut layer_specs = Vec::new();
        for l in 0..n_layers {
            layer_specs.push(LayerSpec {
                kernel_size: [3, 5, 7][rng.random_range(0..3usize)],
                stride: if n_layers == 1 { 16 } else { [4, 8][rng.random_range(0..2usize)] },
                feature_multiplier: if l + 1 == n_layers {
                    1
                } else {
                    rng.random_range(1..=3usize)
                },
            });
        }
        let mut cfg = CaeConfig {
            channels,
            input_length,
            latent_per_channel: 0,
            layer_specs,
            norm_kind: Default::default(),
        };
        cfg.latent_per_channel = *cfg.stage_lengths().last().unwrap();
        let params = CaeParams::init(&cfg, &mut rng).unwrap();
        let x0 = common::rand_tensor(&[channels, input_length], &mut rng);

        let run_encode = |input: &Tensor| -> Tensor {
            let mut tape = Tape::new();
            let ids = CaeParamIds::register(&mut tape, &params);
            let x = tape.leaf(input);
            let z = encode(&mut tape, x, &ids, &cfg).unwrap();
            tape.value(z).clone()
        };

        let z0 = run_encode(&x0);
        assert_eq!(z0.shape(), [channels, cfg.latent_per_channel]);

        // Perturbing channel j must leave every other latent row
        // bitwise untouched.
        let j = draw % channels;
        let mut x1 = x0.clone();
        for t in 0..input_length {
            x1.data_mut()[j * input_length + t] += rng.random_range(0.5..1.5);
        }
        let z1 = run_encode(&x1);
        let d = cfg.latent_per_channel;
        for i in 0..channels {
            if i == j {
                continue;
            }
            for k in 0..d {
                let a = z0.data()[i * d + k];
                let b = z1.data()[i * d + k];
                assert_eq!(a.to_bits(), b.to_bits(), "draw {draw}: row {i} moved with row {j}");
            }
        }

        // dz_i/dx_j must be exactly zero for i != j: backpropagate from
        // each latent row i alone and inspect the input gradient.
        let mut any_row_live = false;
        for i in 0..channels {
            let mut tape = Tape::new();
            let ids = CaeParamIds::register(&mut tape, &params);
            let x = tape.leaf(&x0);
            let z = encode(&mut tape, x, &ids, &cfg).unwrap();
            let mut sel = vec![0.0; channels];
            sel[i] = 1.0;
            let sel_id = tape.leaf(&Tensor::new(vec![1, channels], sel).unwrap());
            let row = tape.matmul(sel_id, z).unwrap();
            let loss = tape.sum(row);
            tape.backward(loss).unwrap();
            let gx = tape.grad(x).expect("input gradient");
            for ch in 0..channels {
                for t in 0..input_length {
                    let g = gx[ch * input_length + t];
                    if ch != i {
                        assert_eq!(g, 0.0, "draw {draw}: dz_{i}/dx_{ch}[{t}] nonzero");
                    } else if g != 0.0 {
                        any_row_live = true;
                    }
                }
            }
        }
        if any_row_live {
            grad_signal_draws += 1;
        }
    }
    // The zero-gradient claim is vacuous if no latent row carries
    // gradient; relu can silence single rows but rarely a whole draw.
    assert!(grad_signal_draws >= 95, "only {grad_signal_draws}/100 draws had live gradients");
    assert!(start.elapsed().as_secs() < 30, "criterion 3 over time budget");
    pass(
        3,
        "channel independence",
        &format!("100 draws bitwise row-stable, cross-channel grads all zero ({grad_signal_draws} live)"),
    );
}

#[test]
fn criterion_04_gradient_correctness() {
    let start = Instant::now();
    for (name, check) in common::OP_CHECKS {
        check(1e-4, 1e-7);
        let _ = name;
    }
    common::composed_model_check(1e-4, 1e-7);
    assert!(start.elapsed().as_secs() < 120, "criterion 4 over time budget");
    pass(
        4,
        "gradient correctness",
        &format!("{} ops + composed model within max(1e-4 rel, 1e-7 abs)", common::OP_CHECKS.len()),
    );
}

#[test]
fn criterion_05_majority_vote_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..1000 {
        let n_cases = rng.random_range(1..=30usize);
        let mut preds = Vec::new();
        let mut expected = Vec::new();
        for c in 0..n_cases {
            let case_id = format!("case{c:03}");
            let label = if rng.random::<f64>() < 0.5 { Label::Normal } else { Label::Abnormal };
            let n_signals = rng.random_range(1..=7usize);
            let mut positives = 0usize;
            for _ in 0..n_signals {
                let pred = if rng.random::<f64>() < 0.5 { Label::Normal } else { Label::Abnormal };
                if pred == Label::Abnormal {
                    positives += 1;
                }
                preds.push(SignalPred { case_id: case_id.clone(), label, pred });
            }
            // Brute-force recount with the strict tie rule: abnormal
            // only when positives strictly exceed half.
            let vote = if 2 * positives > n_signals { Label::Abnormal } else { Label::Normal };
            expected.push(SignalPred { case_id: case_id.clone(), label, pred: vote });
        }
        preds.shuffle(&mut rng);
        let got = per_case_vote(&preds).unwrap();
        expected.sort_by(|a, b| a.case_id.cmp(&b.case_id));
        assert_eq!(got, expected, "trial {trial}");
        assert_eq!(
            confusion(&got).unwrap(),
            confusion(&expected).unwrap(),
            "trial {trial} counts"
        );
    }
    assert!(start.elapsed().as_secs() < 5, "criterion 5 over time budget");
    pass(5, "majority vote oracle", "1000 groupings match brute-force recount exactly");
}

#[test]
fn criterion_06_preprocessing_contract() {
    let start = Instant::now();

    // Anti-alias: a 60 Hz tone must not survive resampling to 100 Hz.
    let rate_in = 250.0;
    let n = (rate_in * 32.0) as usize;
    let tone60: Vec<f64> = (0..n)
        .map(|t| (2.0 * std::f64::consts::PI * 60.0 * t as f64 / rate_in).sin())
        .collect();
    let rms = |xs: &[f64]| (xs.iter().map(|v| v * v).sum::<f64>() / xs.len() as f64).sqrt();
    let out = downsample(&tone60, rate_in, 100.0).unwrap();
    let attenuation = rms(&out) / rms(&tone60);
    assert!(attenuation < 0.05, "60 Hz residual RMS ratio {attenuation:.4}");

    // In-band content must pass: otherwise the attenuation figure is
    // trivially satisfiable by discarding everything.
    let tone10: Vec<f64> = (0..n)
        .map(|t| (2.0 * std::f64::consts::PI * 10.0 * t as f64 / rate_in).sin())
        .collect();
    let kept = rms(&downsample(&tone10, rate_in, 100.0).unwrap()) / rms(&tone10);
    assert!(kept > 0.9, "10 Hz passband RMS ratio {kept:.4}");

    // A 16-minute 250 Hz recording becomes 8 segments of 19x12000 with
    // per-channel zero mean.
    let seconds = 16.0 * 60.0;
    let samples = (rate_in * seconds) as usize;
    let channels: Vec<ChannelData> = MONTAGE_10_20
        .iter()
        .enumerate()
        .map(|(c, label)| ChannelData {
            label: label.to_string(),
            sampling_rate_hz: rate_in,
            samples: (0..samples)
                .map(|t| {
                    let s = t as f64 / rate_in;
                    30.0 * (2.0 * std::f64::consts::PI * 10.0 * s + c as f64).sin()
                        + 20.0 * (2.0 * std::f64::consts::PI * 60.0 * s).sin()
                })
                .collect(),
        })
        .collect();
    let rec = EegRecording {
        channels,
        duration_seconds: seconds,
        subject_id: "subj".into(),
        case_id: "case".into(),
        case_label: Some(Label::Normal),
        clamped_samples: 0,
    };
    let segments = preprocess_recording(&rec, &PreprocessConfig::default()).unwrap();
    assert_eq!(segments.len(), 8, "16 min -> 8 two-minute segments");
    let mut worst_mean = 0.0f64;
    for seg in &segments {
        assert_eq!(seg.data.shape(), [19, 12000]);
        for ch in 0..19 {
            let row = &seg.data.data()[ch * 12000..(ch + 1) * 12000];
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            worst_mean = worst_mean.max(mean.abs());
        }
    }
    assert!(worst_mean < 1e-9, "z-norm worst channel mean {worst_mean:e}");
    assert!(start.elapsed().as_secs() < 30, "criterion 6 over time budget");
    pass(
        6,
        "preprocessing contract",
        &format!(
            "8 segments of 19x12000; 60 Hz RMS ratio {attenuation:.4}; worst |mean| {worst_mean:.1e}"
        ),
    );
}

// ── shared training pipeline for criteria 7 and 10 ──────────────────────

struct RunArtifacts {
    pretrain_checkpoint: Vec<u8>,
    classifier_checkpoint: Vec<u8>,
    pretrain_rows: Vec<MetricsRow>,
    classifier_rows: Vec<MetricsRow>,
    per_signal_accuracy: f64,
    per_case_accuracy: f64,
    classifier_epochs: usize,
    wall_seconds: f64,
}

fn pipeline_cae_config() -> CaeConfig {
    CaeConfig {
        channels: 19,
        input_length: 12000,
        latent_per_channel: 188,
        layer_specs: vec![
            LayerSpec { kernel_size: 7, stride: 4, feature_multiplier: 1 },
            LayerSpec { kernel_size: 7, stride: 4, feature_multiplier: 1 },
            LayerSpec { kernel_size: 7, stride: 4, feature_multiplier: 1 },
        ],
        norm_kind: Default::default(),
    }
}

fn pipeline_tx_config() -> TransformerConfig {
    TransformerConfig {
        input_dim: 188,
        model_dim: 64,
        key_dim: 32,
        ff_dim: 128,
        n_layers: 1,
        dropout_rate: 0.0,
        seq_axis: Default::default(),
    }
}

fn run_pipeline() -> RunArtifacts {
    let started = Instant::now();
    let spec = SynthSpec::default();
    assert_eq!((spec.n_cases, spec.segments_per_case), (100, 4));
    let segments = generate_segments(&spec).unwrap();
    assert_eq!(segments.len(), 400);

    let cae_cfg = pipeline_cae_config();
    let tx_cfg = pipeline_tx_config();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut cae = CaeParams::init(&cae_cfg, &mut rng).unwrap();
    let mut tx = TransformerParams::init(&tx_cfg, &mut rng).unwrap();

    let pretrain_cfg = TrainConfig {
        lr: 1e-3,
        weight_decay: 1e-6,
        batch_size: 16,
        epochs: 5,
        warmup_steps: 20,
        seed: 7,
        val_fraction: 0.2,
        phase: TrainPhase::PretrainCae,
        freeze_encoder: true,
        decoupled_weight_decay: false,
    };
    let (train_idx, val_idx) =
        split_by_subject(&segments, pretrain_cfg.val_fraction, pretrain_cfg.seed).unwrap();
    let pre_out = train(
        &mut cae, &mut tx, &cae_cfg, &tx_cfg, &pretrain_cfg, &segments, &train_idx, &val_idx,
    )
    .unwrap();

    let classifier_cfg = TrainConfig {
        epochs: 15,
        phase: TrainPhase::TrainClassifier,
        ..pretrain_cfg.clone()
    };
    let clf_out = train(
        &mut cae, &mut tx, &cae_cfg, &tx_cfg, &classifier_cfg, &segments, &train_idx, &val_idx,
    )
    .unwrap();

    // Score the best-validation-loss checkpoint on the held-out split.
    let mut best_cae = CaeParams::init(&cae_cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut best_tx = TransformerParams::init(&tx_cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    restore_checkpoint(&clf_out.checkpoint, &mut best_cae, &mut best_tx).unwrap();

    let preds: Vec<SignalPred> = val_idx
        .iter()
        .map(|&i| {
            let seg: &Segment = &segments[i];
            let z = encode_latent(&best_cae, &cae_cfg, &seg.data).unwrap();
            let (logits, _) = classify_latent(&best_tx, &tx_cfg, &z).unwrap();
            SignalPred {
                case_id: seg.case_id.clone(),
                label: seg.label,
                pred: if logits[1] > logits[0] { Label::Abnormal } else { Label::Normal },
            }
        })
        .collect();
    let per_signal = confusion(&preds).unwrap();
    let per_case = confusion(&per_case_vote(&preds).unwrap()).unwrap();
    let acc = |c: &cwat_core::evaluation::ConfusionCounts| {
        (c.tp + c.tn) as f64 / c.total() as f64
    };

    RunArtifacts {
        pretrain_checkpoint: write_checkpoint(&pre_out.checkpoint),
        classifier_checkpoint: write_checkpoint(&clf_out.checkpoint),
        pretrain_rows: pre_out.rows,
        classifier_rows: clf_out.rows,
        per_signal_accuracy: acc(&per_signal),
        per_case_accuracy: acc(&per_case),
        classifier_epochs: classifier_cfg.epochs,
        wall_seconds: started.elapsed().as_secs_f64(),
    }
}

fn pipeline_runs() -> &'static (RunArtifacts, RunArtifacts) {
    static RUNS: OnceLock<(RunArtifacts, RunArtifacts)> = OnceLock::new();
    RUNS.get_or_init(|| (run_pipeline(), run_pipeline()))
}

#[test]
fn criterion_07_end_to_end_learnability() {
    let run = &pipeline_runs().0;
    assert!(
        run.per_signal_accuracy >= 0.90,
        "per-signal accuracy {:.4} below 0.90",
        run.per_signal_accuracy
    );
    assert!(
        run.per_case_accuracy >= 0.95,
        "per-case accuracy {:.4} below 0.95",
        run.per_case_accuracy
    );
    assert!(
        run.per_case_accuracy >= run.per_signal_accuracy,
        "voting did not help: per-case {:.4} < per-signal {:.4}",
        run.per_case_accuracy,
        run.per_signal_accuracy
    );
    assert!(run.classifier_epochs <= 15, "classifier ran {} epochs", run.classifier_epochs);
    assert!(run.wall_seconds < 900.0, "run took {:.1}s", run.wall_seconds);
    pass(
        7,
        "end-to-end learnability",
        &format!(
            "val per-signal {:.3}, per-case {:.3}, {} epochs, {:.1}s",
            run.per_signal_accuracy, run.per_case_accuracy, run.classifier_epochs, run.wall_seconds
        ),
    );
}

#[test]
fn criterion_08_cost_report_sanity() {
    let start = Instant::now();
    let report = model_cost(&CaeConfig::default(), &TransformerConfig::default());
    let flops = report.inference_flops as f64;
    assert!(
        (100e6..=400e6).contains(&flops),
        "inference FLOPs {flops:.3e} outside [100M, 400M]"
    );
    let ratio = report.raw_transformer.computed_flops as f64 / flops;
    assert!(ratio >= 20.0, "raw preset only {ratio:.1}x the compressed pipeline");
    assert!(start.elapsed().as_secs() < 1, "criterion 8 over time budget");
    pass(
        8,
        "cost report sanity",
        &format!(
            "inference {:.1}M FLOPs (published {:.1}M), raw preset {ratio:.0}x",
            flops / 1e6,
            report.published_flops / 1e6
        ),
    );
}

#[test]
fn criterion_09_edf_round_trip_and_corruption() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        n_cases: 20,
        segments_per_case: 1,
        ..SynthSpec::default()
    };
    let paths = write_edf_fixtures(&spec, dir.path()).unwrap();
    assert_eq!(paths.len(), 20);

    let mut sample_bytes = Vec::new();
    for path in &paths {
        let bytes = std::fs::read(path).unwrap();
        let parsed = parse_edf(&bytes).unwrap();
        let rewritten = write_edf(&parsed).unwrap();
        let reparsed = parse_edf(&rewritten).unwrap();
        assert_eq!(parsed, reparsed, "{}: headers or samples drifted", path.display());
        sample_bytes = bytes;
    }

    let ns = parse_edf(&sample_bytes).unwrap().header.n_signals;
    let sig = |zone_off: usize| 256 + zone_off * ns;
    let put = |bytes: &mut Vec<u8>, off: usize, text: &[u8]| {
        bytes[off..off + text.len()].copy_from_slice(text);
    };
    let mutants: Vec<(&str, Vec<u8>)> = vec![
        ("empty file", Vec::new()),
        ("100-byte header stub", sample_bytes[..100].to_vec()),
        ("truncated signal headers", sample_bytes[..256 + 104 * ns - 10].to_vec()),
        ("truncated sample data", sample_bytes[..sample_bytes.len() - 100].to_vec()),
        ("negative n_signals", {
            let mut b = sample_bytes.clone();
            put(&mut b, 252, b"-1  ");
            b
        }),
        ("garbage n_records", {
            let mut b = sample_bytes.clone();
            put(&mut b, 236, b"xxxxxxxx");
            b
        }),
        ("zero record duration", {
            let mut b = sample_bytes.clone();
            put(&mut b, 244, b"0       ");
            b
        }),
        ("lying header_bytes", {
            let mut b = sample_bytes.clone();
            put(&mut b, 184, b"99999999");
            b
        }),
        ("digital_min >= digital_max", {
            let mut b = sample_bytes.clone();
            let off = sig(16 + 80 + 8 + 8 + 8);
            put(&mut b, off, b"32767   ");
            b
        }),
        ("physical_min == physical_max", {
            let mut b = sample_bytes.clone();
            let pmin = sig(16 + 80 + 8);
            let pmax = sig(16 + 80 + 8 + 8);
            let max_text: Vec<u8> = b[pmax..pmax + 8].to_vec();
            put(&mut b, pmin, &max_text);
            b
        }),
    ];
    assert_eq!(mutants.len(), 10);
    for (what, bytes) in &mutants {
        let err = parse_edf(bytes).expect_err(&format!("{what}: parse should fail"));
        assert!(!err.to_string().is_empty(), "{what}: error message empty");
    }
    assert!(start.elapsed().as_secs() < 5, "criterion 9 over time budget");
    pass(9, "EDF round trip", "20 fixtures stable, 10 corrupt mutants rejected with errors");
}

#[test]
fn criterion_10_bitwise_determinism() {
    let (a, b) = pipeline_runs();
    assert_eq!(
        a.pretrain_checkpoint, b.pretrain_checkpoint,
        "pretrain checkpoints differ between identical runs"
    );
    assert_eq!(
        a.classifier_checkpoint, b.classifier_checkpoint,
        "classifier checkpoints differ between identical runs"
    );
    let key = |rows: &[MetricsRow]| -> Vec<(usize, String, String, u64, Option<u64>, u64)> {
        rows.iter()
            .map(|r| {
                (
                    r.epoch,
                    r.phase.as_str().to_string(),
                    r.split.to_string(),
                    r.loss.to_bits(),
                    r.accuracy.map(f64::to_bits),
                    r.lr.to_bits(),
                )
            })
            .collect()
    };
    assert_eq!(key(&a.pretrain_rows), key(&b.pretrain_rows), "pretrain metrics differ");
    assert_eq!(key(&a.classifier_rows), key(&b.classifier_rows), "classifier metrics differ");
    assert_eq!(a.per_signal_accuracy.to_bits(), b.per_signal_accuracy.to_bits());
    assert_eq!(a.per_case_accuracy.to_bits(), b.per_case_accuracy.to_bits());
    pass(
        10,
        "bitwise determinism",
        &format!(
            "two runs: checkpoints {} + {} bytes identical, metrics identical",
            a.pretrain_checkpoint.len(),
            a.classifier_checkpoint.len()
        ),
    );
}
