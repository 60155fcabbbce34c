//! Optimization: Adam with linear warmup, subject-disjoint splits, and
//! the phase schedule (reconstruction pretraining, classifier training
//! on a frozen encoder by default, optional joint fine-tune).
//!
//! Batches are gradient accumulation over per-sample tapes, so batch
//! size never changes peak memory. Every random choice flows from the
//! run seed; two runs with the same seed produce bit-identical
//! parameters and loss trajectories.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cae::{decode, encode, CaeConfig, CaeError, CaeParamIds, CaeParams};
use crate::classifier::{
    classify, ClassifierError, TransformerConfig, TransformerParamIds, TransformerParams,
};
use crate::edfio::Label;
use crate::numerics::{NumericsError, Tape, Tensor};
use crate::preprocess::{ManifestEntry, Segment};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TrainPhase {
    PretrainCae,
    TrainClassifier,
    Joint,
}

impl TrainPhase {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainPhase::PretrainCae => "pretrain_cae",
            TrainPhase::TrainClassifier => "train_classifier",
            TrainPhase::Joint => "joint",
        }
    }
}

impl std::str::FromStr for TrainPhase {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pretrain_cae" => Ok(TrainPhase::PretrainCae),
            "train_classifier" => Ok(TrainPhase::TrainClassifier),
            "joint" => Ok(TrainPhase::Joint),
            other => Err(format!(
                "unknown phase {other:?}; expected pretrain_cae, train_classifier, or joint"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_steps: usize,
    pub seed: u64,
    pub val_fraction: f64,
    pub phase: TrainPhase,
    /// Classifier phase only: leave encoder weights untouched and train
    /// on precomputed latents.
    pub freeze_encoder: bool,
    /// Apply weight decay directly to weights (AdamW style) instead of
    /// adding it to the gradient before the moment update.
    pub decoupled_weight_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            weight_decay: 1e-6,
            batch_size: 64,
            epochs: 15,
            warmup_steps: 200,
            seed: 7,
            val_fraction: 0.1,
            phase: TrainPhase::PretrainCae,
            freeze_encoder: true,
            decoupled_weight_decay: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(TrainError::InvalidConfig(
                "lr must be positive and weight_decay non-negative".to_string(),
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.warmup_steps == 0 {
            return Err(TrainError::InvalidConfig(
                "batch_size, epochs, and warmup_steps must be positive".to_string(),
            ));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(TrainError::InvalidConfig(format!(
                "val_fraction {} outside (0, 1)",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("train config: {0}")]
    InvalidConfig(String),
    #[error("subject split: {0}")]
    Split(String),
    #[error("empty training set")]
    EmptyDataset,
    #[error("non-finite gradient in parameter {name}")]
    NonFiniteGradient { name: String },
    #[error("non-finite loss in phase {phase} epoch {epoch}")]
    NonFiniteLoss { phase: &'static str, epoch: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Cae(#[from] CaeError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
}

/// Linear warmup to the configured rate, constant afterwards.
/// `step` counts optimizer updates from 1.
pub fn lr_schedule(step: usize, config: &TrainConfig) -> f64 {
    config.lr * (step as f64 / config.warmup_steps as f64).min(1.0)
}

struct AdamSlot {
    name: String,
    m: Vec<f64>,
    v: Vec<f64>,
}

pub struct AdamState {
    slots: Vec<AdamSlot>,
    pub step: u64,
}

impl AdamState {
    pub fn new(named: &[(String, &Tensor)]) -> AdamState {
        AdamState {
            slots: named
                .iter()
                .map(|(name, t)| AdamSlot {
                    name: name.clone(),
                    m: vec![0.0; t.numel()],
                    v: vec![0.0; t.numel()],
                })
                .collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update over every parameter. Weight decay is
/// coupled by default (added to the gradient before the moment update);
/// `decoupled` applies it straight to the weights instead.
pub fn adam_step(
    params: &mut [(String, &mut Tensor)],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
    decoupled: bool,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.slots.len() {
        return Err(TrainError::InvalidConfig(format!(
            "adam_step: {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.slots.len()
        )));
    }
    for ((name, _), g) in params.iter().zip(grads) {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGradient { name: name.clone() });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (((name, tensor), grad), slot) in
        params.iter_mut().zip(grads).zip(state.slots.iter_mut())
    {
        let w = tensor.data_mut();
        if grad.len() != w.len() || slot.m.len() != w.len() {
            return Err(TrainError::InvalidConfig(format!(
                "adam_step: parameter {name} has {} weights but {} gradient and {} moment entries",
                w.len(),
                grad.len(),
                slot.m.len()
            )));
        }
        for i in 0..w.len() {
            let g = if decoupled { grad[i] } else { grad[i] + weight_decay * w[i] };
            slot.m[i] = ADAM_BETA1 * slot.m[i] + (1.0 - ADAM_BETA1) * g;
            slot.v[i] = ADAM_BETA2 * slot.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = slot.m[i] / bc1;
            let v_hat = slot.v[i] / bc2;
            w[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            if decoupled {
                w[i] -= lr * weight_decay * w[i];
            }
        }
    }
    Ok(())
}

/// Anything splittable by subject.
pub trait SubjectItem {
    fn subject_id(&self) -> &str;
    fn label(&self) -> Label;
}

impl SubjectItem for Segment {
    fn subject_id(&self) -> &str {
        &self.subject_id
    }
    fn label(&self) -> Label {
        self.label
    }
}

impl SubjectItem for ManifestEntry {
    fn subject_id(&self) -> &str {
        &self.subject_id
    }
    fn label(&self) -> Label {
        self.label
    }
}

/// Partitions item indices into (train, val) with no subject on both
/// sides. Subjects are visited in seed-shuffled order; one joins the
/// validation side while that moves its segment count closer to
/// `val_fraction` of the total, with per-label counts breaking ties.
pub fn split_by_subject<T: SubjectItem>(
    items: &[T],
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), TrainError> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(TrainError::Split(format!(
            "val_fraction {val_fraction} outside (0, 1)"
        )));
    }
    let mut by_subject: std::collections::BTreeMap<&str, (Vec<usize>, usize)> =
        std::collections::BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        let entry = by_subject.entry(item.subject_id()).or_default();
        entry.0.push(i);
        entry.1 += (item.label() == Label::Abnormal) as usize;
    }
    if by_subject.len() < 2 {
        return Err(TrainError::Split(format!(
            "need at least 2 subjects to split, found {}",
            by_subject.len()
        )));
    }

    let mut subjects: Vec<(&str, Vec<usize>, usize)> = by_subject
        .into_iter()
        .map(|(s, (idx, abn))| (s, idx, abn))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    subjects.shuffle(&mut rng);

    let total = items.len() as f64;
    let total_abn = subjects.iter().map(|s| s.2).sum::<usize>() as f64;
    let target = val_fraction * total;
    let target_abn = val_fraction * total_abn;

    let mut val_subjects: Vec<usize> = Vec::new();
    let (mut val_n, mut val_abn) = (0.0, 0.0);
    for (si, (_, idx, abn)) in subjects.iter().enumerate() {
        let n = idx.len() as f64;
        let d_skip = (val_n - target).abs();
        let d_add = (val_n + n - target).abs();
        let tie_skip = (val_abn - target_abn).abs();
        let tie_add = (val_abn + *abn as f64 - target_abn).abs();
        if d_add < d_skip || (d_add == d_skip && tie_add < tie_skip) {
            val_subjects.push(si);
            val_n += n;
            val_abn += *abn as f64;
        }
    }
    // Degenerate draws can leave validation empty; hand it the subject
    // whose size best matches the target.
    if val_subjects.is_empty() {
        let best = (0..subjects.len())
            .min_by(|&a, &b| {
                let da = (subjects[a].1.len() as f64 - target).abs();
                let db = (subjects[b].1.len() as f64 - target).abs();
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        val_subjects.push(best);
    }

    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for (si, (_, idx, _)) in subjects.iter().enumerate() {
        if val_subjects.contains(&si) {
            val_idx.extend_from_slice(idx);
        } else {
            train_idx.extend_from_slice(idx);
        }
    }
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    Ok((train_idx, val_idx))
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CWCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointSection {
    pub name: String,
    /// (tensor name, shape, row-major data)
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub sections: Vec<CheckpointSection>,
}

impl Checkpoint {
    pub fn section(&self, name: &str) -> Option<&CheckpointSection> {
        self.sections.iter().find(|s| s.name == name)
    }
}

fn push_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u16).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

pub fn write_checkpoint(cp: &Checkpoint) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(cp.config_text.len() as u32).to_le_bytes());
    buf.extend_from_slice(cp.config_text.as_bytes());
    buf.extend_from_slice(&(cp.sections.len() as u16).to_le_bytes());
    for section in &cp.sections {
        push_str(&mut buf, &section.name);
        buf.extend_from_slice(&(section.tensors.len() as u32).to_le_bytes());
        for (name, shape, data) in &section.tensors {
            push_str(&mut buf, name);
            buf.push(shape.len() as u8);
            for &d in shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], TrainError> {
        if self.pos + n > self.bytes.len() {
            return Err(TrainError::Checkpoint(format!(
                "truncated reading {what}: need {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self, what: &str) -> Result<u16, TrainError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn string(&mut self, what: &str) -> Result<String, TrainError> {
        let len = self.u16(what)? as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| TrainError::Checkpoint(format!("{what} is not UTF-8")))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint, TrainError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(TrainError::Checkpoint(format!(
            "bad magic {magic:02x?}, expected {CHECKPOINT_MAGIC:02x?}"
        )));
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::Checkpoint(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let config_len = r.u32("config length")? as usize;
    let config_text = String::from_utf8(r.take(config_len, "config text")?.to_vec())
        .map_err(|_| TrainError::Checkpoint("config text is not UTF-8".to_string()))?;
    let n_sections = r.u16("section count")?;
    let mut sections = Vec::with_capacity(n_sections as usize);
    for _ in 0..n_sections {
        let name = r.string("section name")?;
        let n_tensors = r.u32("tensor count")?;
        let mut tensors = Vec::with_capacity(n_tensors as usize);
        for _ in 0..n_tensors {
            let tname = r.string("tensor name")?;
            let rank = r.take(1, "tensor rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("tensor dim")? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 8, "tensor data")?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((tname, shape, data));
        }
        sections.push(CheckpointSection { name, tensors });
    }
    if r.pos != bytes.len() {
        return Err(TrainError::Checkpoint(format!(
            "{} trailing bytes after checkpoint body",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint { config_text, sections })
}

fn section_of(name: &str, named: &[(String, &Tensor)]) -> CheckpointSection {
    CheckpointSection {
        name: name.to_string(),
        tensors: named
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec(), t.data().to_vec()))
            .collect(),
    }
}

fn adam_section(state: &AdamState) -> CheckpointSection {
    let mut tensors = vec![("step".to_string(), vec![1], vec![state.step as f64])];
    for slot in &state.slots {
        tensors.push((format!("{}.m", slot.name), vec![slot.m.len()], slot.m.clone()));
        tensors.push((format!("{}.v", slot.name), vec![slot.v.len()], slot.v.clone()));
    }
    CheckpointSection { name: "adam".to_string(), tensors }
}

pub fn build_checkpoint(
    cae: &CaeParams,
    tx: &TransformerParams,
    adam: Option<&AdamState>,
    config_text: &str,
) -> Checkpoint {
    let mut sections = vec![
        section_of("cae", &cae.named_tensors()),
        section_of("classifier", &tx.named_tensors()),
    ];
    if let Some(state) = adam {
        sections.push(adam_section(state));
    }
    Checkpoint { config_text: config_text.to_string(), sections }
}

fn load_section_into(
    section: &CheckpointSection,
    named: &mut [(String, &mut Tensor)],
) -> Result<(), TrainError> {
    if section.tensors.len() != named.len() {
        return Err(TrainError::Checkpoint(format!(
            "section {} holds {} tensors, model has {}",
            section.name,
            section.tensors.len(),
            named.len()
        )));
    }
    for ((sname, shape, data), (mname, tensor)) in section.tensors.iter().zip(named.iter_mut())
    {
        if sname != mname {
            return Err(TrainError::Checkpoint(format!(
                "section {}: tensor {sname} where model expects {mname}",
                section.name
            )));
        }
        if shape != tensor.shape() {
            return Err(TrainError::Checkpoint(format!(
                "tensor {sname}: stored shape {shape:?}, model shape {:?}",
                tensor.shape()
            )));
        }
        tensor.data_mut().copy_from_slice(data);
    }
    Ok(())
}

/// Restores model weights (and the optimizer state when present) from a
/// checkpoint.
pub fn restore_checkpoint(
    cp: &Checkpoint,
    cae: &mut CaeParams,
    tx: &mut TransformerParams,
) -> Result<Option<AdamState>, TrainError> {
    let cae_section = cp
        .section("cae")
        .ok_or_else(|| TrainError::Checkpoint("missing section cae".to_string()))?;
    load_section_into(cae_section, &mut cae.named_tensors_mut())?;
    let tx_section = cp
        .section("classifier")
        .ok_or_else(|| TrainError::Checkpoint("missing section classifier".to_string()))?;
    load_section_into(tx_section, &mut tx.named_tensors_mut())?;

    let Some(adam) = cp.section("adam") else {
        return Ok(None);
    };
    let mut tensors = adam.tensors.iter();
    let step = match tensors.next() {
        Some((name, _, data)) if name == "step" && data.len() == 1 => data[0] as u64,
        _ => {
            return Err(TrainError::Checkpoint(
                "adam section must start with a scalar step".to_string(),
            ))
        }
    };
    let mut slots = Vec::new();
    let rest: Vec<_> = tensors.collect();
    if rest.len() % 2 != 0 {
        return Err(TrainError::Checkpoint(
            "adam section holds an odd number of moment tensors".to_string(),
        ));
    }
    for pair in rest.chunks_exact(2) {
        let (m_name, _, m) = pair[0];
        let (v_name, _, v) = pair[1];
        let base = m_name
            .strip_suffix(".m")
            .ok_or_else(|| TrainError::Checkpoint(format!("unexpected adam tensor {m_name}")))?;
        if v_name.strip_suffix(".v") != Some(base) || m.len() != v.len() {
            return Err(TrainError::Checkpoint(format!(
                "adam moment pair mismatch: {m_name} / {v_name}"
            )));
        }
        slots.push(AdamSlot { name: base.to_string(), m: m.clone(), v: v.clone() });
    }
    Ok(Some(AdamState { slots, step }))
}

/// One line of a canonical key=value snapshot covering every config the
/// run depends on.
pub fn config_snapshot(
    cae: &CaeConfig,
    tx: &TransformerConfig,
    cfg: &TrainConfig,
) -> String {
    let mut out = String::new();
    let mut kv = |k: &str, v: String| out.push_str(&format!("{k}={v}\n"));
    kv("phase", cfg.phase.as_str().to_string());
    kv("lr", format!("{}", cfg.lr));
    kv("weight_decay", format!("{}", cfg.weight_decay));
    kv("batch_size", format!("{}", cfg.batch_size));
    kv("epochs", format!("{}", cfg.epochs));
    kv("warmup_steps", format!("{}", cfg.warmup_steps));
    kv("seed", format!("{}", cfg.seed));
    kv("val_fraction", format!("{}", cfg.val_fraction));
    kv("freeze_encoder", format!("{}", cfg.freeze_encoder));
    kv("decoupled_weight_decay", format!("{}", cfg.decoupled_weight_decay));
    kv("cae.channels", format!("{}", cae.channels));
    kv("cae.input_length", format!("{}", cae.input_length));
    kv("cae.latent_per_channel", format!("{}", cae.latent_per_channel));
    for (i, spec) in cae.layer_specs.iter().enumerate() {
        kv(
            &format!("cae.layer{i}"),
            format!("k{}s{}f{}", spec.kernel_size, spec.stride, spec.feature_multiplier),
        );
    }
    kv("classifier.input_dim", format!("{}", tx.input_dim));
    kv("classifier.model_dim", format!("{}", tx.model_dim));
    kv("classifier.key_dim", format!("{}", tx.key_dim));
    kv("classifier.ff_dim", format!("{}", tx.ff_dim));
    kv("classifier.n_layers", format!("{}", tx.n_layers));
    kv("classifier.dropout_rate", format!("{}", tx.dropout_rate));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub phase: TrainPhase,
    pub split: &'static str,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub lr: f64,
    pub wall_seconds: f64,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("epoch,phase,split,loss,accuracy,lr,wall_seconds\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch,
            r.phase.as_str(),
            r.split,
            r.loss,
            r.accuracy.map(|a| a.to_string()).unwrap_or_default(),
            r.lr,
            r.wall_seconds,
        ));
    }
    out
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    /// Parameter snapshot from the epoch with the best validation loss
    /// (training loss when there is no validation split).
    pub checkpoint: Checkpoint,
    pub best_epoch: usize,
    pub best_loss: f64,
}

/// Per-sample loss plus flattened gradients in parameter registration
/// order. `label` drives the cross-entropy phases; pretraining ignores
/// it.
fn sample_pass(
    phase: TrainPhase,
    cae: &CaeParams,
    tx: &TransformerParams,
    cae_cfg: &CaeConfig,
    tx_cfg: &TransformerConfig,
    input: &Tensor,
    label: Label,
    precomputed_latent: bool,
    dropout_rng: Option<&mut ChaCha8Rng>,
    want_grads: bool,
) -> Result<(f64, bool, Vec<Vec<f64>>), TrainError> {
    let mut tape = Tape::new();
    let (loss, correct, ids): (_, _, Vec<crate::numerics::TensorId>) = match phase {
        TrainPhase::PretrainCae => {
            let ids = CaeParamIds::register(&mut tape, cae);
            let x = tape.leaf(input);
            let z = encode(&mut tape, x, &ids, cae_cfg)?;
            let xhat = decode(&mut tape, z, &ids, cae_cfg)?;
            let loss = tape.mse_loss(xhat, x)?;
            (loss, false, ids.flat())
        }
        TrainPhase::TrainClassifier if precomputed_latent => {
            let ids = TransformerParamIds::register(&mut tape, tx);
            let z = tape.leaf(input);
            let out = classify(&mut tape, z, &ids, tx_cfg, dropout_rng)?;
            let logits = tape.value(out.logits).data();
            let correct = (logits[1] > logits[0]) == (label == Label::Abnormal);
            let loss = tape.cross_entropy_logits(out.logits, label.as_index())?;
            (loss, correct, ids.flat())
        }
        TrainPhase::TrainClassifier | TrainPhase::Joint => {
            let cae_ids = CaeParamIds::register(&mut tape, cae);
            let tx_ids = TransformerParamIds::register(&mut tape, tx);
            let x = tape.leaf(input);
            let z = encode(&mut tape, x, &cae_ids, cae_cfg)?;
            let out = classify(&mut tape, z, &tx_ids, tx_cfg, dropout_rng)?;
            let logits = tape.value(out.logits).data();
            let correct = (logits[1] > logits[0]) == (label == Label::Abnormal);
            let loss = tape.cross_entropy_logits(out.logits, label.as_index())?;
            let mut ids = cae_ids.flat();
            ids.extend(tx_ids.flat());
            (loss, correct, ids)
        }
    };
    let loss_v = tape.value(loss).data()[0];
    if !want_grads {
        return Ok((loss_v, correct, Vec::new()));
    }
    tape.backward(loss)?;
    let grads = ids
        .iter()
        .map(|&id| {
            let numel = tape.value(id).numel();
            match tape.grad(id) {
                Some(g) => g.to_vec(),
                None => vec![0.0; numel],
            }
        })
        .collect();
    Ok((loss_v, correct, grads))
}

/// Eval-mode encoder forward; returns the latent as a plain tensor.
pub fn encode_latent(
    cae: &CaeParams,
    cae_cfg: &CaeConfig,
    segment: &Tensor,
) -> Result<Tensor, TrainError> {
    let mut tape = Tape::new();
    let ids = CaeParamIds::register(&mut tape, cae);
    let x = tape.leaf(segment);
    let z = encode(&mut tape, x, &ids, cae_cfg)?;
    Ok(tape.value(z).clone())
}

/// Decoder forward for a precomputed latent (reconstruction export).
pub fn decode_latent(
    cae: &CaeParams,
    cae_cfg: &CaeConfig,
    latent: &Tensor,
) -> Result<Tensor, TrainError> {
    let mut tape = Tape::new();
    let ids = CaeParamIds::register(&mut tape, cae);
    let z = tape.leaf(latent);
    let xhat = decode(&mut tape, z, &ids, cae_cfg)?;
    Ok(tape.value(xhat).clone())
}

/// Eval-mode classifier forward over a latent; returns (logits,
/// attention matrices).
pub fn classify_latent(
    tx: &TransformerParams,
    tx_cfg: &TransformerConfig,
    latent: &Tensor,
) -> Result<(Vec<f64>, Vec<Tensor>), TrainError> {
    let mut tape = Tape::new();
    let ids = TransformerParamIds::register(&mut tape, tx);
    let z = tape.leaf(latent);
    let out = classify(&mut tape, z, &ids, tx_cfg, None)?;
    let logits = tape.value(out.logits).data().to_vec();
    let attention = out
        .attention
        .iter()
        .map(|&a| tape.value(a).clone())
        .collect();
    Ok((logits, attention))
}

/// Runs one training phase over pre-split segment indices, mutating the
/// parameters in place. Emits one metrics row per epoch per split and
/// keeps the best-validation-loss snapshot as the outcome checkpoint.
pub fn train(
    cae: &mut CaeParams,
    tx: &mut TransformerParams,
    cae_cfg: &CaeConfig,
    tx_cfg: &TransformerConfig,
    cfg: &TrainConfig,
    segments: &[Segment],
    train_idx: &[usize],
    val_idx: &[usize],
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    cae_cfg.validate()?;
    tx_cfg.validate()?;
    if train_idx.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    for &i in train_idx.iter().chain(val_idx) {
        if i >= segments.len() {
            return Err(TrainError::InvalidConfig(format!(
                "segment index {i} out of range for {} segments",
                segments.len()
            )));
        }
    }
    let classifies = cfg.phase != TrainPhase::PretrainCae;
    if classifies && tx_cfg.input_dim != cae_cfg.latent_per_channel {
        return Err(TrainError::InvalidConfig(format!(
            "classifier input_dim {} does not match encoder latent length {}",
            tx_cfg.input_dim, cae_cfg.latent_per_channel
        )));
    }

    let phase = cfg.phase;
    let frozen = phase == TrainPhase::TrainClassifier && cfg.freeze_encoder;
    // Frozen encoder: encode every segment once, train on the latents.
    let latents: Vec<Option<Tensor>> = if frozen {
        let mut all = vec![None; segments.len()];
        for &i in train_idx.iter().chain(val_idx) {
            if all[i].is_none() {
                all[i] = Some(encode_latent(cae, cae_cfg, &segments[i].data)?);
            }
        }
        all
    } else {
        vec![None; segments.len()]
    };
    let input_of = |i: usize| -> &Tensor {
        match &latents[i] {
            Some(z) => z,
            None => &segments[i].data,
        }
    };

    let mut adam = match phase {
        TrainPhase::PretrainCae => AdamState::new(&cae.named_tensors()),
        TrainPhase::TrainClassifier if frozen => AdamState::new(&tx.named_tensors()),
        _ => {
            let mut named = cae.named_tensors();
            named.extend(tx.named_tensors());
            AdamState::new(&named)
        }
    };
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6472_6f70);

    let snapshot = config_snapshot(cae_cfg, tx_cfg, cfg);
    let mut rows = Vec::new();
    let mut best: Option<(f64, usize, Checkpoint)> = None;

    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        let mut order = train_idx.to_vec();
        let mut epoch_rng = ChaCha8Rng::seed_from_u64(
            cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64),
        );
        order.shuffle(&mut epoch_rng);

        let (mut loss_sum, mut correct_sum) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Vec<Vec<f64>> = Vec::new();
            for &i in batch {
                let seg = &segments[i];
                let (loss, correct, grads) = sample_pass(
                    phase,
                    cae,
                    tx,
                    cae_cfg,
                    tx_cfg,
                    input_of(i),
                    seg.label,
                    frozen,
                    Some(&mut dropout_rng),
                    true,
                )?;
                if !loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss { phase: phase.as_str(), epoch });
                }
                loss_sum += loss;
                correct_sum += correct as usize;
                if acc.is_empty() {
                    acc = grads;
                } else {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        for (av, gv) in a.iter_mut().zip(g) {
                            *av += gv;
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for a in &mut acc {
                for v in a {
                    *v *= scale;
                }
            }
            let lr = lr_schedule(adam.step as usize + 1, cfg);
            let mut named: Vec<(String, &mut Tensor)> = match phase {
                TrainPhase::PretrainCae => cae.named_tensors_mut(),
                TrainPhase::TrainClassifier if frozen => tx.named_tensors_mut(),
                _ => {
                    let mut n = cae.named_tensors_mut();
                    n.extend(tx.named_tensors_mut());
                    n
                }
            };
            adam_step(&mut named, &acc, &mut adam, lr, cfg.weight_decay, cfg.decoupled_weight_decay)?;
        }
        let train_loss = loss_sum / train_idx.len() as f64;
        let train_acc = classifies.then(|| correct_sum as f64 / train_idx.len() as f64);
        let lr_now = lr_schedule(adam.step as usize, cfg);
        rows.push(MetricsRow {
            epoch,
            phase,
            split: "train",
            loss: train_loss,
            accuracy: train_acc,
            lr: lr_now,
            wall_seconds: t0.elapsed().as_secs_f64(),
        });

        // Validation pass: dropout off, no gradients.
        let monitored = if val_idx.is_empty() {
            train_loss
        } else {
            let tv = Instant::now();
            let (mut vloss, mut vcorrect) = (0.0, 0usize);
            for &i in val_idx {
                let (loss, correct, _) = sample_pass(
                    phase,
                    cae,
                    tx,
                    cae_cfg,
                    tx_cfg,
                    input_of(i),
                    segments[i].label,
                    frozen,
                    None,
                    false,
                )?;
                if !loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss { phase: phase.as_str(), epoch });
                }
                vloss += loss;
                vcorrect += correct as usize;
            }
            let val_loss = vloss / val_idx.len() as f64;
            rows.push(MetricsRow {
                epoch,
                phase,
                split: "val",
                loss: val_loss,
                accuracy: classifies.then(|| vcorrect as f64 / val_idx.len() as f64),
                lr: lr_now,
                wall_seconds: tv.elapsed().as_secs_f64(),
            });
            val_loss
        };

        if best.as_ref().map_or(true, |(b, _, _)| monitored < *b) {
            best = Some((monitored, epoch, build_checkpoint(cae, tx, Some(&adam), &snapshot)));
        }
    }

    let (best_loss, best_epoch, checkpoint) = best.unwrap();
    Ok(TrainOutcome { rows, checkpoint, best_epoch, best_loss })
}
