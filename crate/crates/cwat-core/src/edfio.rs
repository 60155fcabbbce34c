//! European Data Format (EDF) reading, calibration, and montage selection.
//!
//! Layout handled here, bit-exact: a 256-byte main header of fixed-width
//! space-padded ASCII fields, then `n_signals × 256` bytes of signal
//! headers stored field-major (all labels, then all transducers, ...),
//! then data records of 2-byte little-endian two's-complement samples,
//! interleaved record by record, signal by signal.
//!
//! Plain EDF only. EDF+ annotation signals are not decoded; they can be
//! dropped by montage selection like any other unwanted channel. The
//! writer exists to build test fixtures, not clinical files.

use std::fmt::Write as _;

/// Main header: nine fixed-width text fields at fixed offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct EdfHeader {
    pub version: String,
    pub patient_id: String,
    pub recording_id: String,
    pub start_date: String,
    pub start_time: String,
    pub header_bytes: usize,
    pub reserved: String,
    /// −1 means "unknown"; the parser then derives the count from the
    /// data length.
    pub n_records: i64,
    pub record_duration: f64,
    pub n_signals: usize,
}

/// Per-signal header fields (one 256-byte slice of the field-major block).
#[derive(Debug, Clone, PartialEq)]
pub struct SignalHeader {
    pub label: String,
    pub transducer: String,
    pub physical_dimension: String,
    pub physical_min: f64,
    pub physical_max: f64,
    pub digital_min: i32,
    pub digital_max: i32,
    pub prefiltering: String,
    pub samples_per_record: usize,
    pub reserved: String,
}

/// Parsed EDF file: headers plus per-signal digital series with the
/// record interleaving undone.
#[derive(Debug, Clone, PartialEq)]
pub struct EdfFile {
    pub header: EdfHeader,
    pub signals: Vec<SignalHeader>,
    pub digital: Vec<Vec<i16>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Label {
    Normal,
    Abnormal,
}

impl Label {
    pub fn as_index(self) -> usize {
        match self {
            Label::Normal => 0,
            Label::Abnormal => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Abnormal => "abnormal",
        }
    }

    pub fn from_index(i: usize) -> Option<Label> {
        match i {
            0 => Some(Label::Normal),
            1 => Some(Label::Abnormal),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ChannelData {
    pub label: String,
    pub sampling_rate_hz: f64,
    /// Physical-unit samples (microvolts for EEG channels).
    pub samples: Vec<f64>,
}

/// A recording in physical units, ready for preprocessing.
#[derive(Debug, Clone)]
pub struct EegRecording {
    pub channels: Vec<ChannelData>,
    pub duration_seconds: f64,
    pub subject_id: String,
    pub case_id: String,
    pub case_label: Option<Label>,
    /// Digital samples clamped into [digital_min, digital_max] during
    /// calibration.
    pub clamped_samples: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum EdfError {
    #[error("truncated {what}: need {needed} bytes, have {actual}")]
    Truncated {
        what: &'static str,
        needed: usize,
        actual: usize,
    },
    #[error("field `{field}` at byte offset {offset} is not valid: {content:?}")]
    BadField {
        field: &'static str,
        offset: usize,
        content: String,
    },
    #[error(
        "header_bytes at byte offset 184 declares {declared}, but {n_signals} signals require {expected}"
    )]
    HeaderBytesMismatch {
        declared: usize,
        expected: usize,
        n_signals: usize,
    },
    #[error(
        "signal {index} ({label:?}): digital_min {digital_min} >= digital_max {digital_max} (byte offset {offset})"
    )]
    DigitalRange {
        index: usize,
        label: String,
        digital_min: i32,
        digital_max: i32,
        offset: usize,
    },
    #[error(
        "signal {index} ({label:?}): physical_min equals physical_max ({value}) (byte offset {offset})"
    )]
    PhysicalRange {
        index: usize,
        label: String,
        value: f64,
        offset: usize,
    },
    #[error("{expected} bytes of sample data expected, found {actual}")]
    DataLength { expected: usize, actual: usize },
    #[error("montage selection: missing channels {missing:?}")]
    MissingChannels { missing: Vec<String> },
    #[error("montage selection: selected channels disagree on sampling rate: {rates:?}")]
    MixedRates { rates: Vec<(String, f64)> },
    #[error("writer: {0}")]
    Write(String),
}

/// The 19-electrode 10-20 montage, in canonical order.
pub const MONTAGE_10_20: [&str; 19] = [
    "Fp1", "Fp2", "F3", "F4", "F7", "F8", "C3", "C4", "T7", "T8", "P3", "P4", "P7", "P8", "O1",
    "O2", "Fz", "Cz", "Pz",
];

// Main-header field widths in order; offsets are the running sums.
const MAIN_FIELDS: [(&str, usize); 10] = [
    ("version", 8),
    ("patient_id", 80),
    ("recording_id", 80),
    ("start_date", 8),
    ("start_time", 8),
    ("header_bytes", 8),
    ("reserved", 44),
    ("n_records", 8),
    ("record_duration", 8),
    ("n_signals", 4),
];

// Signal-header field widths in field-major block order.
const SIGNAL_FIELDS: [(&str, usize); 10] = [
    ("label", 16),
    ("transducer", 80),
    ("physical_dimension", 8),
    ("physical_min", 8),
    ("physical_max", 8),
    ("digital_min", 8),
    ("digital_max", 8),
    ("prefiltering", 80),
    ("samples_per_record", 8),
    ("reserved", 32),
];

fn field_offset(fields: &[(&str, usize)], name: &str) -> usize {
    let mut off = 0;
    for &(f, w) in fields {
        if f == name {
            return off;
        }
        off += w;
    }
    unreachable!("unknown field {name}");
}

/// Offset of signal-header field `name` for signal `index`, given
/// `n_signals` (field-major layout starting at byte 256).
fn signal_field_offset(name: &str, index: usize, n_signals: usize) -> usize {
    let mut off = 256;
    for &(f, w) in &SIGNAL_FIELDS {
        if f == name {
            return off + index * w;
        }
        off += w * n_signals;
    }
    unreachable!("unknown signal field {name}");
}

fn text_at<'a>(
    bytes: &'a [u8],
    offset: usize,
    width: usize,
    field: &'static str,
) -> Result<&'a str, EdfError> {
    let slice = &bytes[offset..offset + width];
    if !slice.iter().all(|&b| (32..127).contains(&b)) {
        return Err(EdfError::BadField {
            field,
            offset,
            content: String::from_utf8_lossy(slice).into_owned(),
        });
    }
    // Validated as printable ASCII above.
    Ok(std::str::from_utf8(slice).unwrap().trim_end_matches(' '))
}

fn int_at(bytes: &[u8], offset: usize, width: usize, field: &'static str) -> Result<i64, EdfError> {
    let text = text_at(bytes, offset, width, field)?.trim();
    text.parse::<i64>().map_err(|_| EdfError::BadField {
        field,
        offset,
        content: text.to_string(),
    })
}

fn float_at(
    bytes: &[u8],
    offset: usize,
    width: usize,
    field: &'static str,
) -> Result<f64, EdfError> {
    let text = text_at(bytes, offset, width, field)?.trim();
    match text.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(EdfError::BadField {
            field,
            offset,
            content: text.to_string(),
        }),
    }
}

/// Decodes an EDF byte buffer into headers and per-signal digital series.
///
/// Header fields are read strictly within the declared header region; the
/// data region must contain exactly the declared number of records (when
/// the record count is −1 it is derived from the data length instead, and
/// trailing partial records are ignored).
pub fn parse_edf(bytes: &[u8]) -> Result<EdfFile, EdfError> {
    if bytes.len() < 256 {
        return Err(EdfError::Truncated {
            what: "header",
            needed: 256,
            actual: bytes.len(),
        });
    }
    let off = |name| field_offset(&MAIN_FIELDS, name);
    let version = text_at(bytes, off("version"), 8, "version")?.to_string();
    let patient_id = text_at(bytes, off("patient_id"), 80, "patient_id")?.to_string();
    let recording_id = text_at(bytes, off("recording_id"), 80, "recording_id")?.to_string();
    let start_date = text_at(bytes, off("start_date"), 8, "start_date")?.to_string();
    let start_time = text_at(bytes, off("start_time"), 8, "start_time")?.to_string();
    let header_bytes = int_at(bytes, off("header_bytes"), 8, "header_bytes")?;
    let reserved = text_at(bytes, off("reserved"), 44, "reserved")?.to_string();
    let n_records = int_at(bytes, off("n_records"), 8, "n_records")?;
    let record_duration = float_at(bytes, off("record_duration"), 8, "record_duration")?;
    let n_signals_raw = int_at(bytes, off("n_signals"), 4, "n_signals")?;

    if n_signals_raw < 0 {
        return Err(EdfError::BadField {
            field: "n_signals",
            offset: off("n_signals"),
            content: n_signals_raw.to_string(),
        });
    }
    let n_signals = n_signals_raw as usize;
    let expected_header = 256 + 256 * n_signals;
    if header_bytes != expected_header as i64 {
        return Err(EdfError::HeaderBytesMismatch {
            declared: header_bytes.max(0) as usize,
            expected: expected_header,
            n_signals,
        });
    }
    if n_records < -1 {
        return Err(EdfError::BadField {
            field: "n_records",
            offset: off("n_records"),
            content: n_records.to_string(),
        });
    }
    if n_records >= 0 && !(record_duration > 0.0) {
        return Err(EdfError::BadField {
            field: "record_duration",
            offset: off("record_duration"),
            content: record_duration.to_string(),
        });
    }
    if bytes.len() < expected_header {
        return Err(EdfError::Truncated {
            what: "signal headers",
            needed: expected_header,
            actual: bytes.len(),
        });
    }

    let mut signals = Vec::with_capacity(n_signals);
    for i in 0..n_signals {
        let soff = |name| signal_field_offset(name, i, n_signals);
        let label = text_at(bytes, soff("label"), 16, "label")?.to_string();
        let transducer = text_at(bytes, soff("transducer"), 80, "transducer")?.to_string();
        let physical_dimension =
            text_at(bytes, soff("physical_dimension"), 8, "physical_dimension")?.to_string();
        let physical_min = float_at(bytes, soff("physical_min"), 8, "physical_min")?;
        let physical_max = float_at(bytes, soff("physical_max"), 8, "physical_max")?;
        let digital_min = int_at(bytes, soff("digital_min"), 8, "digital_min")?;
        let digital_max = int_at(bytes, soff("digital_max"), 8, "digital_max")?;
        let prefiltering = text_at(bytes, soff("prefiltering"), 80, "prefiltering")?.to_string();
        let samples_per_record = int_at(
            bytes,
            soff("samples_per_record"),
            8,
            "samples_per_record",
        )?;
        let sig_reserved = text_at(bytes, soff("reserved"), 32, "reserved")?.to_string();

        let i32_range = i32::MIN as i64..=i32::MAX as i64;
        if !i32_range.contains(&digital_min) || !i32_range.contains(&digital_max) {
            return Err(EdfError::BadField {
                field: "digital_min",
                offset: soff("digital_min"),
                content: format!("{digital_min}..{digital_max}"),
            });
        }
        if digital_min >= digital_max {
            return Err(EdfError::DigitalRange {
                index: i,
                label: label.clone(),
                digital_min: digital_min as i32,
                digital_max: digital_max as i32,
                offset: soff("digital_min"),
            });
        }
        if physical_min == physical_max {
            return Err(EdfError::PhysicalRange {
                index: i,
                label: label.clone(),
                value: physical_min,
                offset: soff("physical_min"),
            });
        }
        if samples_per_record < 1 {
            return Err(EdfError::BadField {
                field: "samples_per_record",
                offset: soff("samples_per_record"),
                content: samples_per_record.to_string(),
            });
        }
        signals.push(SignalHeader {
            label,
            transducer,
            physical_dimension,
            physical_min,
            physical_max,
            digital_min: digital_min as i32,
            digital_max: digital_max as i32,
            prefiltering,
            samples_per_record: samples_per_record as usize,
            reserved: sig_reserved,
        });
    }

    let record_samples: usize = signals.iter().map(|s| s.samples_per_record).sum();
    let record_bytes = 2 * record_samples;
    let data = &bytes[expected_header..];
    let actual_records = if n_records >= 0 {
        let needed = n_records as usize * record_bytes;
        if data.len() < needed {
            return Err(EdfError::Truncated {
                what: "data records",
                needed: expected_header + needed,
                actual: bytes.len(),
            });
        }
        if data.len() > needed {
            return Err(EdfError::DataLength {
                expected: needed,
                actual: data.len(),
            });
        }
        n_records as usize
    } else if record_bytes == 0 {
        0
    } else {
        data.len() / record_bytes
    };

    let mut digital: Vec<Vec<i16>> = signals
        .iter()
        .map(|s| Vec::with_capacity(s.samples_per_record * actual_records))
        .collect();
    let mut pos = 0;
    for _ in 0..actual_records {
        for (s, sh) in signals.iter().enumerate() {
            for _ in 0..sh.samples_per_record {
                let v = i16::from_le_bytes([data[pos], data[pos + 1]]);
                digital[s].push(v);
                pos += 2;
            }
        }
    }

    Ok(EdfFile {
        header: EdfHeader {
            version,
            patient_id,
            recording_id,
            start_date,
            start_time,
            header_bytes: expected_header,
            reserved,
            n_records: actual_records as i64,
            record_duration,
            n_signals,
        },
        signals,
        digital,
    })
}

/// Affine calibration from digital to physical units. Out-of-range digital
/// values are clamped to the declared range; the count of clamped samples
/// is returned alongside. The blend form makes both range endpoints exact.
pub fn to_physical(digital: &[i16], sh: &SignalHeader) -> (Vec<f64>, usize) {
    let dmin = sh.digital_min as f64;
    let dmax = sh.digital_max as f64;
    let span = dmax - dmin;
    let mut clamped = 0usize;
    let out = digital
        .iter()
        .map(|&d| {
            let mut dv = d as f64;
            if dv < dmin {
                dv = dmin;
                clamped += 1;
            } else if dv > dmax {
                dv = dmax;
                clamped += 1;
            }
            let w = (dv - dmin) / span;
            sh.physical_min * (1.0 - w) + sh.physical_max * w
        })
        .collect();
    (out, clamped)
}

/// Canonical form used to compare channel labels: uppercase, "EEG " prefix
/// and "-REF"/"-LE" reference suffixes stripped.
pub fn normalize_label(label: &str) -> String {
    let mut up = label.trim().to_ascii_uppercase();
    if let Some(stripped) = up.strip_prefix("EEG ") {
        up = stripped.to_string();
    }
    for suffix in ["-REF", "-LE"] {
        if let Some(stripped) = up.strip_suffix(suffix) {
            up = stripped.to_string();
        }
    }
    up.trim().to_string()
}

/// Converts a parsed EDF file to physical units and recording metadata.
///
/// Identity conventions (matched by the fixture writer): `subject_id` is
/// the first whitespace-separated token of the patient field; `case_id` is
/// the first token of the recording field not equal to "Startdate" and not
/// a label word; a token equal to "normal" or "abnormal" (any case) sets
/// the label.
pub fn to_recording(file: &EdfFile) -> EegRecording {
    let h = &file.header;
    let mut clamped_total = 0usize;
    let channels: Vec<ChannelData> = file
        .signals
        .iter()
        .zip(&file.digital)
        .map(|(sh, dig)| {
            let (samples, clamped) = to_physical(dig, sh);
            clamped_total += clamped;
            ChannelData {
                label: sh.label.clone(),
                sampling_rate_hz: sh.samples_per_record as f64 / h.record_duration,
                samples,
            }
        })
        .collect();

    let subject_id = h
        .patient_id
        .split_whitespace()
        .next()
        .unwrap_or("unknown")
        .to_string();
    let mut tokens: Vec<&str> = h.recording_id.split_whitespace().collect();
    // "Startdate <date> ..." prefix carries no identity; drop both tokens.
    if tokens
        .first()
        .is_some_and(|t| t.eq_ignore_ascii_case("startdate"))
    {
        tokens.drain(..tokens.len().min(2));
    }
    let mut case_id = None;
    let mut case_label = None;
    for token in tokens {
        let lower = token.to_ascii_lowercase();
        if lower == "normal" {
            case_label = Some(Label::Normal);
        } else if lower == "abnormal" {
            case_label = Some(Label::Abnormal);
        } else if case_id.is_none() {
            case_id = Some(token.to_string());
        }
    }

    EegRecording {
        channels,
        duration_seconds: h.n_records as f64 * h.record_duration,
        subject_id,
        case_id: case_id.unwrap_or_else(|| "unknown".to_string()),
        case_label,
        clamped_samples: clamped_total,
    }
}

/// Picks `wanted_labels` out of a recording, in the given order, matching
/// labels through [`normalize_label`]. All selected channels must share
/// one sampling rate; resampling is preprocessing's job.
pub fn select_montage(rec: &EegRecording, wanted_labels: &[&str]) -> Result<EegRecording, EdfError> {
    let mut selected = Vec::with_capacity(wanted_labels.len());
    let mut missing = Vec::new();
    for &want in wanted_labels {
        let want_norm = normalize_label(want);
        match rec
            .channels
            .iter()
            .find(|c| normalize_label(&c.label) == want_norm)
        {
            Some(c) => selected.push(ChannelData {
                label: want.to_string(),
                sampling_rate_hz: c.sampling_rate_hz,
                samples: c.samples.clone(),
            }),
            None => missing.push(want.to_string()),
        }
    }
    if !missing.is_empty() {
        return Err(EdfError::MissingChannels { missing });
    }
    let first_rate = selected[0].sampling_rate_hz;
    if selected.iter().any(|c| c.sampling_rate_hz != first_rate) {
        return Err(EdfError::MixedRates {
            rates: selected
                .iter()
                .map(|c| (c.label.clone(), c.sampling_rate_hz))
                .collect(),
        });
    }
    Ok(EegRecording {
        channels: selected,
        duration_seconds: rec.duration_seconds,
        subject_id: rec.subject_id.clone(),
        case_id: rec.case_id.clone(),
        case_label: rec.case_label,
        clamped_samples: rec.clamped_samples,
    })
}

fn pad_field(out: &mut Vec<u8>, text: &str, width: usize, field: &str) -> Result<(), EdfError> {
    if !text.bytes().all(|b| (32..127).contains(&b)) {
        return Err(EdfError::Write(format!(
            "field `{field}` contains non-ASCII text: {text:?}"
        )));
    }
    if text.len() > width {
        return Err(EdfError::Write(format!(
            "field `{field}` value {text:?} exceeds {width} bytes"
        )));
    }
    out.extend_from_slice(text.as_bytes());
    out.extend(std::iter::repeat_n(b' ', width - text.len()));
    Ok(())
}

fn fmt_f64(v: f64) -> String {
    let mut s = String::new();
    write!(s, "{v}").unwrap();
    s
}

/// Serializes an [`EdfFile`] back to bytes. Fixture-grade: canonical
/// left-justified space padding, so `write_edf(parse_edf(b)) == b` holds
/// for buffers this writer produced.
pub fn write_edf(file: &EdfFile) -> Result<Vec<u8>, EdfError> {
    let h = &file.header;
    let n = file.signals.len();
    if h.n_signals != n {
        return Err(EdfError::Write(format!(
            "header declares {} signals, {} signal headers given",
            h.n_signals, n
        )));
    }
    if file.digital.len() != n {
        return Err(EdfError::Write(format!(
            "{} signal headers but {} digital series",
            n,
            file.digital.len()
        )));
    }
    if h.n_records < 0 {
        return Err(EdfError::Write(
            "writer requires an explicit record count".to_string(),
        ));
    }
    let n_records = h.n_records as usize;
    for (i, (sh, dig)) in file.signals.iter().zip(&file.digital).enumerate() {
        if dig.len() != sh.samples_per_record * n_records {
            return Err(EdfError::Write(format!(
                "signal {i} has {} samples, expected {} ({} records × {} samples)",
                dig.len(),
                sh.samples_per_record * n_records,
                n_records,
                sh.samples_per_record
            )));
        }
    }

    let mut out = Vec::with_capacity(256 + 256 * n);
    pad_field(&mut out, &h.version, 8, "version")?;
    pad_field(&mut out, &h.patient_id, 80, "patient_id")?;
    pad_field(&mut out, &h.recording_id, 80, "recording_id")?;
    pad_field(&mut out, &h.start_date, 8, "start_date")?;
    pad_field(&mut out, &h.start_time, 8, "start_time")?;
    pad_field(&mut out, &(256 + 256 * n).to_string(), 8, "header_bytes")?;
    pad_field(&mut out, &h.reserved, 44, "reserved")?;
    pad_field(&mut out, &h.n_records.to_string(), 8, "n_records")?;
    pad_field(&mut out, &fmt_f64(h.record_duration), 8, "record_duration")?;
    pad_field(&mut out, &n.to_string(), 4, "n_signals")?;

    for &(field, width) in &SIGNAL_FIELDS {
        for sh in &file.signals {
            let text = match field {
                "label" => sh.label.clone(),
                "transducer" => sh.transducer.clone(),
                "physical_dimension" => sh.physical_dimension.clone(),
                "physical_min" => fmt_f64(sh.physical_min),
                "physical_max" => fmt_f64(sh.physical_max),
                "digital_min" => sh.digital_min.to_string(),
                "digital_max" => sh.digital_max.to_string(),
                "prefiltering" => sh.prefiltering.clone(),
                "samples_per_record" => sh.samples_per_record.to_string(),
                "reserved" => sh.reserved.clone(),
                _ => unreachable!(),
            };
            pad_field(&mut out, &text, width, field)?;
        }
    }

    for r in 0..n_records {
        for (sh, dig) in file.signals.iter().zip(&file.digital) {
            let spr = sh.samples_per_record;
            for &v in &dig[r * spr..(r + 1) * spr] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}
