//! Channelwise convolutional autoencoder.
//!
//! The encoder is a stack of stages, each: grouped convolution (groups =
//! electrode channels, so no weight ever connects two channels), residual
//! add, layer normalization over the temporal axis, ReLU, then strided
//! downsampling. Three default stages take a 19×12000 segment to a
//! 19×188 latent. The decoder mirrors the stages with zero-stuffing
//! upsampling followed by the same grouped convolutions; its final stage
//! is linear so reconstructions can reach negative z-scored values.
//!
//! Channel independence is structural: every kernel's group count equals
//! the channel count, so row blocks of the activations always belong to
//! exactly one input channel.

use rand::Rng;

use crate::numerics::{NumericsError, Tape, Tensor, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LayerSpec {
    pub kernel_size: usize,
    pub stride: usize,
    /// Feature streams per channel emitted by this stage.
    pub feature_multiplier: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum NormKind {
    #[default]
    LayerNorm,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CaeConfig {
    pub channels: usize,
    pub input_length: usize,
    pub layer_specs: Vec<LayerSpec>,
    /// Latent values per channel (D). Must equal what the stage strides
    /// produce; checked by [`CaeConfig::validate`].
    pub latent_per_channel: usize,
    pub norm_kind: NormKind,
}

impl Default for CaeConfig {
    fn default() -> Self {
        CaeConfig {
            channels: 19,
            input_length: 12000,
            layer_specs: vec![
                LayerSpec { kernel_size: 7, stride: 4, feature_multiplier: 16 },
                LayerSpec { kernel_size: 7, stride: 4, feature_multiplier: 16 },
                LayerSpec { kernel_size: 7, stride: 4, feature_multiplier: 1 },
            ],
            latent_per_channel: 188,
            norm_kind: NormKind::LayerNorm,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CaeError {
    #[error("autoencoder config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

impl CaeConfig {
    /// Temporal lengths entering each stage, ending with the latent
    /// length: `[T, L1, ..., D]`. Downsampling keeps every `stride`-th
    /// sample, so each stage maps `L` to `ceil(L/stride)`.
    pub fn stage_lengths(&self) -> Vec<usize> {
        let mut lengths = vec![self.input_length];
        for spec in &self.layer_specs {
            let l = *lengths.last().unwrap();
            lengths.push(l.div_ceil(spec.stride));
        }
        lengths
    }

    /// Feature streams per channel entering each stage: `[1, fm1, ...]`.
    fn stage_multipliers(&self) -> Vec<usize> {
        let mut fm = vec![1];
        fm.extend(self.layer_specs.iter().map(|s| s.feature_multiplier));
        fm
    }

    pub fn validate(&self) -> Result<(), CaeError> {
        if self.channels == 0 || self.input_length == 0 {
            return Err(CaeError::InvalidConfig(
                "channels and input_length must be positive".to_string(),
            ));
        }
        if self.layer_specs.is_empty() {
            return Err(CaeError::InvalidConfig("at least one stage required".to_string()));
        }
        for (i, spec) in self.layer_specs.iter().enumerate() {
            if spec.kernel_size % 2 == 0 || spec.kernel_size == 0 {
                return Err(CaeError::InvalidConfig(format!(
                    "stage {i}: kernel_size {} must be odd for symmetric same-padding",
                    spec.kernel_size
                )));
            }
            if spec.stride == 0 || spec.feature_multiplier == 0 {
                return Err(CaeError::InvalidConfig(format!(
                    "stage {i}: stride and feature_multiplier must be positive"
                )));
            }
        }
        if self.layer_specs.last().unwrap().feature_multiplier != 1 {
            return Err(CaeError::InvalidConfig(
                "last stage must emit one stream per channel so the latent is channels × D"
                    .to_string(),
            ));
        }
        let produced = *self.stage_lengths().last().unwrap();
        if produced != self.latent_per_channel {
            return Err(CaeError::InvalidConfig(format!(
                "strides produce a latent of {produced} per channel, config declares {}",
                self.latent_per_channel
            )));
        }
        if self.latent_per_channel * 16 > self.input_length {
            return Err(CaeError::InvalidConfig(format!(
                "latent {} exceeds input_length/16 = {}; not a compression",
                self.latent_per_channel,
                self.input_length / 16
            )));
        }
        Ok(())
    }
}

/// One encoder stage: grouped kernel, optional 1-tap grouped shortcut
/// projection (present only when the stream count changes), and the
/// temporal layer-norm affine.
#[derive(Debug, Clone)]
pub struct StageParams {
    pub kernel: Tensor,
    pub shortcut: Option<Tensor>,
    pub norm_gain: Tensor,
    pub norm_bias: Tensor,
}

/// One decoder stage; the last stage is linear (no norm affine).
#[derive(Debug, Clone)]
pub struct DecoderStageParams {
    pub kernel: Tensor,
    pub norm_gain: Option<Tensor>,
    pub norm_bias: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct CaeParams {
    pub encoder: Vec<StageParams>,
    pub decoder: Vec<DecoderStageParams>,
}

impl CaeParams {
    /// Kernels uniform in ±sqrt(1/fan_in) with fan_in = kernel_size ×
    /// streams-per-group; norm gains 1, biases 0. Convolutions carry no
    /// bias terms; the norm affine provides the offset.
    pub fn init<R: Rng>(config: &CaeConfig, rng: &mut R) -> Result<CaeParams, CaeError> {
        config.validate()?;
        let c = config.channels;
        let lengths = config.stage_lengths();
        let fms = config.stage_multipliers();
        let mut encoder = Vec::with_capacity(config.layer_specs.len());
        for (i, spec) in config.layer_specs.iter().enumerate() {
            let (fm_in, fm_out) = (fms[i], fms[i + 1]);
            let bound = (1.0 / (spec.kernel_size * fm_in) as f64).sqrt();
            let kernel =
                Tensor::uniform(vec![c * fm_out, fm_in, spec.kernel_size], bound, rng).with_grad();
            let shortcut = if fm_in == fm_out {
                None
            } else {
                let b = (1.0 / fm_in as f64).sqrt();
                Some(Tensor::uniform(vec![c * fm_out, fm_in, 1], b, rng).with_grad())
            };
            encoder.push(StageParams {
                kernel,
                shortcut,
                norm_gain: Tensor::new(vec![lengths[i]], vec![1.0; lengths[i]])
                    .expect("gain shape")
                    .with_grad(),
                norm_bias: Tensor::zeros(vec![lengths[i]]).with_grad(),
            });
        }
        // Decoder stage j mirrors encoder stage (last - j): it upsamples
        // back to that stage's input length and maps fm_out streams back
        // to fm_in streams.
        let mut decoder = Vec::with_capacity(config.layer_specs.len());
        for (i, spec) in config.layer_specs.iter().enumerate().rev() {
            let (fm_in, fm_out) = (fms[i + 1], fms[i]);
            let bound = (1.0 / (spec.kernel_size * fm_in) as f64).sqrt();
            let kernel =
                Tensor::uniform(vec![c * fm_out, fm_in, spec.kernel_size], bound, rng).with_grad();
            let is_last = i == 0;
            let l = lengths[i];
            decoder.push(DecoderStageParams {
                kernel,
                norm_gain: (!is_last).then(|| {
                    Tensor::new(vec![l], vec![1.0; l]).expect("gain shape").with_grad()
                }),
                norm_bias: (!is_last).then(|| Tensor::zeros(vec![l]).with_grad()),
            });
        }
        Ok(CaeParams { encoder, decoder })
    }

    /// Stable (name, tensor) listing; checkpoint layout and optimizer
    /// state both follow this order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, s) in self.encoder.iter().enumerate() {
            out.push((format!("enc{i}.kernel"), &s.kernel));
            if let Some(sc) = &s.shortcut {
                out.push((format!("enc{i}.shortcut"), sc));
            }
            out.push((format!("enc{i}.norm_gain"), &s.norm_gain));
            out.push((format!("enc{i}.norm_bias"), &s.norm_bias));
        }
        for (i, s) in self.decoder.iter().enumerate() {
            out.push((format!("dec{i}.kernel"), &s.kernel));
            if let Some(g) = &s.norm_gain {
                out.push((format!("dec{i}.norm_gain"), g));
            }
            if let Some(b) = &s.norm_bias {
                out.push((format!("dec{i}.norm_bias"), b));
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, s) in self.encoder.iter_mut().enumerate() {
            out.push((format!("enc{i}.kernel"), &mut s.kernel));
            if let Some(sc) = &mut s.shortcut {
                out.push((format!("enc{i}.shortcut"), sc));
            }
            out.push((format!("enc{i}.norm_gain"), &mut s.norm_gain));
            out.push((format!("enc{i}.norm_bias"), &mut s.norm_bias));
        }
        for (i, s) in self.decoder.iter_mut().enumerate() {
            out.push((format!("dec{i}.kernel"), &mut s.kernel));
            if let Some(g) = &mut s.norm_gain {
                out.push((format!("dec{i}.norm_gain"), g));
            }
            if let Some(b) = &mut s.norm_bias {
                out.push((format!("dec{i}.norm_bias"), b));
            }
        }
        out
    }
}

/// Tape handles for registered autoencoder parameters, in
/// [`CaeParams::named_tensors`] order.
#[derive(Debug, Clone)]
pub struct CaeParamIds {
    encoder: Vec<StageIds>,
    decoder: Vec<DecoderStageIds>,
}

#[derive(Debug, Clone)]
struct StageIds {
    kernel: TensorId,
    shortcut: Option<TensorId>,
    norm_gain: TensorId,
    norm_bias: TensorId,
}

#[derive(Debug, Clone)]
struct DecoderStageIds {
    kernel: TensorId,
    norm_gain: Option<TensorId>,
    norm_bias: Option<TensorId>,
}

impl CaeParamIds {
    pub fn register(tape: &mut Tape, params: &CaeParams) -> CaeParamIds {
        CaeParamIds {
            encoder: params
                .encoder
                .iter()
                .map(|s| StageIds {
                    kernel: tape.leaf(&s.kernel),
                    shortcut: s.shortcut.as_ref().map(|t| tape.leaf(t)),
                    norm_gain: tape.leaf(&s.norm_gain),
                    norm_bias: tape.leaf(&s.norm_bias),
                })
                .collect(),
            decoder: params
                .decoder
                .iter()
                .map(|s| DecoderStageIds {
                    kernel: tape.leaf(&s.kernel),
                    norm_gain: s.norm_gain.as_ref().map(|t| tape.leaf(t)),
                    norm_bias: s.norm_bias.as_ref().map(|t| tape.leaf(t)),
                })
                .collect(),
        }
    }

    /// Ids in [`CaeParams::named_tensors`] order.
    pub fn flat(&self) -> Vec<TensorId> {
        let mut out = Vec::new();
        for s in &self.encoder {
            out.push(s.kernel);
            if let Some(sc) = s.shortcut {
                out.push(sc);
            }
            out.push(s.norm_gain);
            out.push(s.norm_bias);
        }
        for s in &self.decoder {
            out.push(s.kernel);
            if let Some(g) = s.norm_gain {
                out.push(g);
            }
            if let Some(b) = s.norm_bias {
                out.push(b);
            }
        }
        out
    }
}

const NORM_EPS: f64 = 1e-5;

/// Encoder forward pass: `[C × T]` in, `[C × D]` out.
pub fn encode(
    tape: &mut Tape,
    x: TensorId,
    ids: &CaeParamIds,
    config: &CaeConfig,
) -> Result<TensorId, CaeError> {
    let shape = tape.value(x).shape().to_vec();
    if shape != [config.channels, config.input_length] {
        return Err(CaeError::InvalidConfig(format!(
            "encode input shape {shape:?}, config expects [{}, {}]",
            config.channels, config.input_length
        )));
    }
    let mut h = x;
    for (spec, stage) in config.layer_specs.iter().zip(&ids.encoder) {
        let pad = (spec.kernel_size - 1) / 2;
        let conv = tape.conv1d_grouped(h, stage.kernel, config.channels, 1, pad)?;
        let shortcut = match stage.shortcut {
            Some(sk) => tape.conv1d_grouped(h, sk, config.channels, 1, 0)?,
            None => h,
        };
        let added = tape.add(conv, shortcut)?;
        let normed = tape.layer_norm(added, stage.norm_gain, stage.norm_bias, NORM_EPS)?;
        let act = tape.relu(normed);
        h = tape.downsample_stride(act, spec.stride)?;
    }
    Ok(h)
}

/// Decoder forward pass: `[C × D]` in, `[C × T]` out. Intermediate stages
/// use norm + ReLU; the final stage is linear.
pub fn decode(
    tape: &mut Tape,
    z: TensorId,
    ids: &CaeParamIds,
    config: &CaeConfig,
) -> Result<TensorId, CaeError> {
    let shape = tape.value(z).shape().to_vec();
    if shape != [config.channels, config.latent_per_channel] {
        return Err(CaeError::InvalidConfig(format!(
            "decode input shape {shape:?}, config expects [{}, {}]",
            config.channels, config.latent_per_channel
        )));
    }
    let lengths = config.stage_lengths();
    let mut h = z;
    for (j, stage) in ids.decoder.iter().enumerate() {
        let enc_index = config.layer_specs.len() - 1 - j;
        let spec = &config.layer_specs[enc_index];
        let target = lengths[enc_index];
        let up = tape.upsample_to(h, spec.stride, target)?;
        let pad = (spec.kernel_size - 1) / 2;
        let conv = tape.conv1d_grouped(up, stage.kernel, config.channels, 1, pad)?;
        h = match (stage.norm_gain, stage.norm_bias) {
            (Some(g), Some(b)) => {
                let normed = tape.layer_norm(conv, g, b, NORM_EPS)?;
                tape.relu(normed)
            }
            _ => conv,
        };
    }
    Ok(h)
}

// ── Cost model ──────────────────────────────────────────────────────────

/// One multiply-accumulate counts as one FLOP throughout the cost model;
/// every reported figure depends on this convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    Standard,
    Channelwise { channels: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct ConvCost {
    pub flops: u64,
    pub params: u64,
}

/// Cost of one convolution layer: kernel_size × in_maps × out_maps ×
/// out_len multiply-accumulates for the standard form; the channelwise
/// form divides both figures by the channel count, exactly.
pub fn count_cost_conv(
    kernel_size: usize,
    in_maps: usize,
    out_maps: usize,
    out_len: usize,
    kind: ConvKind,
) -> ConvCost {
    let flops = kernel_size as u64 * in_maps as u64 * out_maps as u64 * out_len as u64;
    let params = kernel_size as u64 * in_maps as u64 * out_maps as u64;
    match kind {
        ConvKind::Standard => ConvCost { flops, params },
        ConvKind::Channelwise { channels } => {
            let c = channels as u64;
            debug_assert!(flops % c == 0 && params % c == 0);
            ConvCost {
                flops: flops / c,
                params: params / c,
            }
        }
    }
}

/// One itemized row of a cost report.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct CostLine {
    pub label: String,
    pub flops: u64,
    pub params: u64,
}

impl CostLine {
    pub fn new(label: impl Into<String>, flops: u64, params: u64) -> CostLine {
        CostLine { label: label.into(), flops, params }
    }
}

/// Elementwise cost conventions used across the model: one FLOP per
/// element for adds and ReLU, five per element for layer norm and
/// softmax (statistics plus the affine).
pub const NORM_FLOPS_PER_ELEMENT: u64 = 5;

/// Itemized inference cost of the encoder, stage by stage.
pub fn count_cost_encoder(config: &CaeConfig) -> Vec<CostLine> {
    let c = config.channels;
    let lengths = config.stage_lengths();
    let fms = config.stage_multipliers();
    let mut lines = Vec::new();
    for (i, spec) in config.layer_specs.iter().enumerate() {
        let (fm_in, fm_out) = (fms[i], fms[i + 1]);
        let l = lengths[i];
        let kind = ConvKind::Channelwise { channels: c };
        let conv = count_cost_conv(spec.kernel_size, c * fm_in, c * fm_out, l, kind);
        lines.push(CostLine::new(format!("encoder.stage{i}.conv"), conv.flops, conv.params));
        if fm_in != fm_out {
            let sc = count_cost_conv(1, c * fm_in, c * fm_out, l, kind);
            lines.push(CostLine::new(format!("encoder.stage{i}.shortcut"), sc.flops, sc.params));
        }
        let numel = (c * fm_out * l) as u64;
        lines.push(CostLine::new(format!("encoder.stage{i}.residual_add"), numel, 0));
        lines.push(CostLine::new(
            format!("encoder.stage{i}.layer_norm"),
            NORM_FLOPS_PER_ELEMENT * numel,
            2 * l as u64,
        ));
        lines.push(CostLine::new(format!("encoder.stage{i}.relu"), numel, 0));
    }
    lines
}

/// Itemized cost of the decoder (reconstruction path; not part of
/// inference when only classification is needed).
pub fn count_cost_decoder(config: &CaeConfig) -> Vec<CostLine> {
    let c = config.channels;
    let lengths = config.stage_lengths();
    let fms = config.stage_multipliers();
    let mut lines = Vec::new();
    for (j, i) in (0..config.layer_specs.len()).rev().enumerate() {
        let spec = &config.layer_specs[i];
        let (fm_in, fm_out) = (fms[i + 1], fms[i]);
        let l = lengths[i];
        let kind = ConvKind::Channelwise { channels: c };
        let conv = count_cost_conv(spec.kernel_size, c * fm_in, c * fm_out, l, kind);
        lines.push(CostLine::new(format!("decoder.stage{j}.conv"), conv.flops, conv.params));
        if i != 0 {
            let numel = (c * fm_out * l) as u64;
            lines.push(CostLine::new(
                format!("decoder.stage{j}.layer_norm"),
                NORM_FLOPS_PER_ELEMENT * numel,
                2 * l as u64,
            ));
            lines.push(CostLine::new(format!("decoder.stage{j}.relu"), numel, 0));
        }
    }
    lines
}
