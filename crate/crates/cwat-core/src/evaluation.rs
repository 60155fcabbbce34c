//! Metrics and the model-wide cost report.
//!
//! Abnormal is the positive class. Per-case predictions are strict
//! majority votes over a case's segment predictions; a tie counts as
//! negative. Rates with a zero denominator are reported as undefined
//! rather than 0 or 1, so one-class inputs cannot masquerade as perfect
//! scores.

use std::collections::BTreeMap;

use crate::cae::{count_cost_decoder, count_cost_encoder, CaeConfig, CostLine};
use crate::classifier::{count_cost_transformer, TransformerConfig};
use crate::edfio::Label;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no predictions to score")]
    Empty,
    #[error("case {case_id} carries both labels; case labels must be uniform")]
    MixedCaseLabels { case_id: String },
}

/// One scored prediction. `label` is ground truth.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SignalPred {
    pub case_id: String,
    pub label: Label,
    pub pred: Label,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

pub fn confusion(preds: &[SignalPred]) -> Result<ConfusionCounts, EvalError> {
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut c = ConfusionCounts::default();
    for p in preds {
        match (p.label, p.pred) {
            (Label::Abnormal, Label::Abnormal) => c.tp += 1,
            (Label::Normal, Label::Normal) => c.tn += 1,
            (Label::Normal, Label::Abnormal) => c.fp += 1,
            (Label::Abnormal, Label::Normal) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// `None` marks an undefined rate (zero denominator).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Rates {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub accuracy: Option<f64>,
}

pub fn rates(c: &ConfusionCounts) -> Rates {
    let ratio = |num: usize, den: usize| {
        if den == 0 { None } else { Some(num as f64 / den as f64) }
    };
    Rates {
        sensitivity: ratio(c.tp, c.tp + c.fn_),
        specificity: ratio(c.tn, c.tn + c.fp),
        accuracy: ratio(c.tp + c.tn, c.total()),
    }
}

fn render_rate(r: Option<f64>) -> String {
    match r {
        Some(v) => format!("{:.3}", v),
        None => "n/a".to_string(),
    }
}

/// Collapses segment predictions to one prediction per case: positive
/// iff a strict majority of the case's segments are positive (P > N/2),
/// so ties resolve negative.
pub fn per_case_vote(preds: &[SignalPred]) -> Result<Vec<SignalPred>, EvalError> {
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut groups: BTreeMap<&str, (Label, usize, usize)> = BTreeMap::new();
    for p in preds {
        let entry = groups.entry(&p.case_id).or_insert((p.label, 0, 0));
        if entry.0 != p.label {
            return Err(EvalError::MixedCaseLabels { case_id: p.case_id.clone() });
        }
        entry.1 += if p.pred == Label::Abnormal { 1 } else { 0 };
        entry.2 += 1;
    }
    Ok(groups
        .into_iter()
        .map(|(case_id, (label, positives, n))| SignalPred {
            case_id: case_id.to_string(),
            label,
            pred: if 2 * positives > n { Label::Abnormal } else { Label::Normal },
        })
        .collect())
}

/// Itemized cost of one model component; `flops` and `params` are the
/// row sums.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct ComponentCost {
    pub name: String,
    pub rows: Vec<CostLine>,
    pub flops: u64,
    pub params: u64,
}

impl ComponentCost {
    fn new(name: &str, rows: Vec<CostLine>) -> Self {
        let flops = rows.iter().map(|r| r.flops).sum();
        let params = rows.iter().map(|r| r.params).sum();
        ComponentCost { name: name.to_string(), rows, flops, params }
    }
}

/// A published figure, reproduced as printed.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct ReferenceRow {
    pub network: String,
    pub flops: String,
    pub params: String,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct RawPresetCost {
    pub computed_flops: u64,
    pub computed_params: u64,
    pub published_flops: f64,
    pub published_params: f64,
    /// computed raw-transformer FLOPs over computed inference FLOPs.
    pub reduction_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct CostReport {
    pub components: Vec<ComponentCost>,
    /// Encoder + classifier: the inference path (decoder is train-only).
    pub inference_flops: u64,
    pub inference_params: u64,
    pub total_flops: u64,
    pub total_params: u64,
    pub published_flops: f64,
    pub published_params: f64,
    /// computed inference FLOPs over the published figure.
    pub flops_gap_ratio: f64,
    pub raw_transformer: RawPresetCost,
    pub reference: Vec<ReferenceRow>,
}

pub const PUBLISHED_MODEL_FLOPS: f64 = 202.0e6;
pub const PUBLISHED_MODEL_PARAMS: f64 = 2.9e6;
pub const PUBLISHED_RAW_TRANSFORMER_FLOPS: f64 = 11.9e9;
pub const PUBLISHED_RAW_TRANSFORMER_PARAMS: f64 = 1.3e9;

/// The raw-input single-head transformer baseline: channels as tokens,
/// no embedding, model width equal to the uncompressed segment length.
pub fn raw_transformer_config(cae: &CaeConfig) -> TransformerConfig {
    TransformerConfig {
        input_dim: cae.input_length,
        model_dim: cae.input_length,
        key_dim: cae.input_length,
        ff_dim: 2 * cae.input_length,
        n_layers: 1,
        dropout_rate: 0.0,
        ..TransformerConfig::default()
    }
}

pub fn model_cost(cae: &CaeConfig, tx: &TransformerConfig) -> CostReport {
    let encoder = ComponentCost::new("cae_encoder", count_cost_encoder(cae));
    let decoder = ComponentCost::new("cae_decoder", count_cost_decoder(cae));
    let classifier = ComponentCost::new(
        "classifier",
        count_cost_transformer(tx, cae.channels, false),
    );

    let inference_flops = encoder.flops + classifier.flops;
    let inference_params = encoder.params + classifier.params;
    let total_flops = inference_flops + decoder.flops;
    let total_params = inference_params + decoder.params;

    let raw_cfg = raw_transformer_config(cae);
    let raw_rows = count_cost_transformer(&raw_cfg, cae.channels, true);
    let raw_flops: u64 = raw_rows.iter().map(|r| r.flops).sum();
    let raw_params: u64 = raw_rows.iter().map(|r| r.params).sum();

    CostReport {
        components: vec![encoder, decoder, classifier],
        inference_flops,
        inference_params,
        total_flops,
        total_params,
        published_flops: PUBLISHED_MODEL_FLOPS,
        published_params: PUBLISHED_MODEL_PARAMS,
        flops_gap_ratio: inference_flops as f64 / PUBLISHED_MODEL_FLOPS,
        raw_transformer: RawPresetCost {
            computed_flops: raw_flops,
            computed_params: raw_params,
            published_flops: PUBLISHED_RAW_TRANSFORMER_FLOPS,
            published_params: PUBLISHED_RAW_TRANSFORMER_PARAMS,
            reduction_ratio: raw_flops as f64 / inference_flops.max(1) as f64,
        },
        reference: reference_table(),
    }
}

/// The published comparison table, figures as printed. The FusionCNN
/// parameter cell is reproduced verbatim even though the surrounding
/// text says 3.4M; the note records the discrepancy.
fn reference_table() -> Vec<ReferenceRow> {
    let row = |network: &str, flops: &str, params: &str, note: Option<&str>| ReferenceRow {
        network: network.to_string(),
        flops: flops.to_string(),
        params: params.to_string(),
        note: note.map(|s| s.to_string()),
    };
    vec![
        row("EEGNet", "103.6M", "19.9K", None),
        row("EEG-ARNN", "260.0M", "69.8K", None),
        row("Deep4Conv", "185.3M", "0.2M", None),
        row(
            "FusionCNN",
            "4.5G",
            "3.4G",
            Some("params printed as 3.4G in the source table; its text says 3.4M"),
        ),
        row(
            "Single-head transformer (raw input)",
            "11.9G",
            "1.3G",
            Some("uncompressed baseline, costed but never trained"),
        ),
        row("CwA-T", "202.0M", "2.9M", None),
    ]
}

fn human_units(v: f64) -> String {
    if v >= 1e9 {
        format!("{:.2}G", v / 1e9)
    } else if v >= 1e6 {
        format!("{:.2}M", v / 1e6)
    } else if v >= 1e3 {
        format!("{:.2}K", v / 1e3)
    } else {
        format!("{v:.0}")
    }
}

pub fn render_cost_table(report: &CostReport) -> String {
    let mut out = String::new();
    for comp in &report.components {
        out.push_str(&format!("{}\n", comp.name));
        for row in &comp.rows {
            out.push_str(&format!(
                "  {:<34} {:>10} FLOPs {:>10} params\n",
                row.label,
                human_units(row.flops as f64),
                human_units(row.params as f64),
            ));
        }
        out.push_str(&format!(
            "  {:<34} {:>10} FLOPs {:>10} params\n",
            "subtotal",
            human_units(comp.flops as f64),
            human_units(comp.params as f64),
        ));
    }
    out.push_str(&format!(
        "inference (encoder + classifier): {} FLOPs, {} params\n",
        human_units(report.inference_flops as f64),
        human_units(report.inference_params as f64),
    ));
    out.push_str(&format!(
        "with decoder (training path):     {} FLOPs, {} params\n",
        human_units(report.total_flops as f64),
        human_units(report.total_params as f64),
    ));
    out.push_str(&format!(
        "published reference: {} FLOPs, {} params (computed/published = {:.2}x)\n",
        human_units(report.published_flops),
        human_units(report.published_params),
        report.flops_gap_ratio,
    ));
    let raw = &report.raw_transformer;
    out.push_str(&format!(
        "raw-input transformer preset: computed {} FLOPs / {} params \
         (published {} / {}), {:.0}x the compressed pipeline\n",
        human_units(raw.computed_flops as f64),
        human_units(raw.computed_params as f64),
        human_units(raw.published_flops),
        human_units(raw.published_params),
        raw.reduction_ratio,
    ));
    out.push_str("\nreference table (as printed)\n");
    for r in &report.reference {
        out.push_str(&format!(
            "  {:<38} {:>8} {:>8}{}\n",
            r.network,
            r.flops,
            r.params,
            r.note.as_deref().map(|n| format!("  [{n}]")).unwrap_or_default(),
        ));
    }
    out
}

/// Full evaluation payload: segment-level and case-level scores plus the
/// cost report.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct EvalReport {
    pub per_signal_counts: ConfusionCounts,
    pub per_signal: Rates,
    pub per_case_counts: ConfusionCounts,
    pub per_case: Rates,
    pub cost: CostReport,
}

pub fn evaluation_report(
    preds: &[SignalPred],
    cae: &CaeConfig,
    tx: &TransformerConfig,
) -> Result<EvalReport, EvalError> {
    let per_signal_counts = confusion(preds)?;
    let case_preds = per_case_vote(preds)?;
    let per_case_counts = confusion(&case_preds)?;
    Ok(EvalReport {
        per_signal_counts,
        per_signal: rates(&per_signal_counts),
        per_case_counts,
        per_case: rates(&per_case_counts),
        cost: model_cost(cae, tx),
    })
}

pub fn render_eval_table(report: &EvalReport) -> String {
    let line = |name: &str, c: &ConfusionCounts, r: &Rates| {
        format!(
            "{:<10} sensitivity {:>6}  specificity {:>6}  accuracy {:>6}  \
             (tp {} fn {} tn {} fp {})\n",
            name,
            render_rate(r.sensitivity),
            render_rate(r.specificity),
            render_rate(r.accuracy),
            c.tp,
            c.fn_,
            c.tn,
            c.fp,
        )
    };
    let mut out = line("per-signal", &report.per_signal_counts, &report.per_signal);
    out.push_str(&line("per-case", &report.per_case_counts, &report.per_case));
    out
}
