//! Recording-to-segment preprocessing: resample to a common rate, cut
//! non-overlapping fixed-length windows, z-normalize per channel.
//!
//! Three steps, nothing else: no artifact rejection, no re-referencing,
//! no band-pass filtering. Resampling uses a zero-phase 127-tap Hamming
//! FIR anti-alias filter (cutoff 0.45 of the target rate) followed by
//! windowed-sinc fractional-rate interpolation, so non-integral rate
//! ratios work. Normalization uses each segment's own per-channel
//! statistics with the population (biased) standard deviation.
//!
//! Preprocessed segments are cached one file per segment (see
//! [`write_segment`]) and listed in a tab-separated manifest that drives
//! dataset loading.

use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

use crate::edfio::{select_montage, EdfError, EegRecording, Label, MONTAGE_10_20};
use crate::numerics::Tensor;

pub const TARGET_RATE_HZ: f64 = 100.0;
pub const WINDOW_SECONDS: f64 = 120.0;
/// Corpus convention: recordings shorter than 15 minutes are usually
/// skipped at ingest. Applied only where callers opt in.
pub const DEFAULT_MIN_DURATION_SECONDS: f64 = 900.0;

const ANTIALIAS_TAPS: usize = 127;
/// Anti-alias cutoff as a fraction of the target rate, leaving a margin
/// below the Nyquist frequency for the filter's transition band.
const CUTOFF_FRACTION: f64 = 0.45;
/// Half-width (in input samples) of the interpolation kernel.
const INTERP_HALF_WIDTH: usize = 8;

/// One model-ready window: `[channels × samples]`, z-normalized.
#[derive(Debug, Clone)]
pub struct Segment {
    pub data: Tensor,
    pub label: Label,
    pub subject_id: String,
    pub case_id: String,
    pub segment_index: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum PreprocessError {
    #[error("cannot resample {from_hz} Hz up to {to_hz} Hz; only downsampling is supported")]
    UnsupportedUpsample { from_hz: f64, to_hz: f64 },
    #[error("{0}")]
    InvalidInput(String),
    #[error(transparent)]
    Montage(#[from] EdfError),
    #[error("segment cache: {0}")]
    Io(#[from] std::io::Error),
    #[error("segment cache: {0}")]
    BadCache(String),
}

#[derive(Debug, Clone)]
pub struct PreprocessConfig {
    pub target_hz: f64,
    pub window_seconds: f64,
    /// Channel labels to select, in order. `None` keeps the recording's
    /// channels as they are.
    pub montage: Option<Vec<String>>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_hz: TARGET_RATE_HZ,
            window_seconds: WINDOW_SECONDS,
            montage: Some(MONTAGE_10_20.iter().map(|s| s.to_string()).collect()),
        }
    }
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Windowed-sinc low-pass taps (Hamming window), normalized to unity DC
/// gain. `n_taps` must be odd so the filter has a center tap and linear
/// phase reduces to zero phase when applied centered.
fn lowpass_taps(n_taps: usize, cutoff_hz: f64, sample_hz: f64) -> Vec<f64> {
    debug_assert!(n_taps % 2 == 1);
    let fc = cutoff_hz / sample_hz;
    let m = (n_taps - 1) as f64 / 2.0;
    let mut taps: Vec<f64> = (0..n_taps)
        .map(|i| {
            let k = i as f64 - m;
            let ideal = 2.0 * fc * sinc(2.0 * fc * k);
            let window = 0.54
                - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n_taps - 1) as f64).cos();
            ideal * window
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in taps.iter_mut() {
        *t /= sum;
    }
    taps
}

/// Centered FIR application with zero padding: linear-phase taps applied
/// symmetrically, so the output has no group delay.
fn filter_zero_phase(x: &[f64], taps: &[f64]) -> Vec<f64> {
    let m = (taps.len() - 1) / 2;
    let n = x.len();
    let mut y = vec![0.0; n];
    for (t, out) in y.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (i, &h) in taps.iter().enumerate() {
            let idx = t as isize + i as isize - m as isize;
            if idx >= 0 && (idx as usize) < n {
                acc += h * x[idx as usize];
            }
        }
        *out = acc;
    }
    y
}

/// Hann-windowed sinc interpolation kernel with half-width
/// [`INTERP_HALF_WIDTH`].
fn interp_kernel(u: f64) -> f64 {
    let w = INTERP_HALF_WIDTH as f64;
    if u.abs() >= w {
        return 0.0;
    }
    sinc(u) * (0.5 + 0.5 * (std::f64::consts::PI * u / w).cos())
}

/// Resamples one series to `to_hz`. Identity when the rates are equal;
/// upsampling is rejected. Output length is `floor(len·to/from)`.
pub fn downsample(series: &[f64], from_hz: f64, to_hz: f64) -> Result<Vec<f64>, PreprocessError> {
    if !(from_hz > 0.0) || !(to_hz > 0.0) {
        return Err(PreprocessError::InvalidInput(format!(
            "sampling rates must be positive, got {from_hz} -> {to_hz}"
        )));
    }
    if from_hz < to_hz {
        return Err(PreprocessError::UnsupportedUpsample { from_hz, to_hz });
    }
    if from_hz == to_hz {
        return Ok(series.to_vec());
    }
    let taps = lowpass_taps(ANTIALIAS_TAPS, CUTOFF_FRACTION * to_hz, from_hz);
    let filtered = filter_zero_phase(series, &taps);

    let out_len = ((series.len() as f64 * to_hz) / from_hz).floor() as usize;
    let n = filtered.len() as isize;
    let half = INTERP_HALF_WIDTH as isize;
    let mut out = Vec::with_capacity(out_len);
    for k in 0..out_len {
        let pos = k as f64 * from_hz / to_hz;
        let base = pos.floor();
        let frac = pos - base;
        let base = base as isize;
        let mut acc = 0.0;
        for j in (1 - half)..=half {
            // Edge samples replicate outward to avoid amplitude droop.
            let idx = (base + j).clamp(0, n - 1) as usize;
            acc += filtered[idx] * interp_kernel(frac - j as f64);
        }
        out.push(acc);
    }
    Ok(out)
}

/// Resamples every channel of a recording to `to_hz`.
pub fn downsample_recording(
    rec: &EegRecording,
    to_hz: f64,
) -> Result<EegRecording, PreprocessError> {
    let mut out = rec.clone();
    for ch in out.channels.iter_mut() {
        ch.samples = downsample(&ch.samples, ch.sampling_rate_hz, to_hz)?;
        ch.sampling_rate_hz = to_hz;
    }
    Ok(out)
}

/// Cuts non-overlapping windows of `window_seconds`; the trailing
/// remainder is dropped, never padded. Segments are raw (not yet
/// normalized). A recording shorter than one window yields an empty list.
pub fn segment(
    rec: &EegRecording,
    window_seconds: f64,
) -> Result<Vec<Segment>, PreprocessError> {
    if rec.channels.is_empty() {
        return Err(PreprocessError::InvalidInput(
            "recording has no channels".to_string(),
        ));
    }
    let rate = rec.channels[0].sampling_rate_hz;
    if rec.channels.iter().any(|c| c.sampling_rate_hz != rate) {
        return Err(PreprocessError::InvalidInput(
            "channels disagree on sampling rate; resample before segmenting".to_string(),
        ));
    }
    let window_f = window_seconds * rate;
    if !(window_f > 0.0) || window_f.fract() != 0.0 {
        return Err(PreprocessError::InvalidInput(format!(
            "window of {window_seconds} s at {rate} Hz is not a whole number of samples"
        )));
    }
    let window = window_f as usize;
    let label = rec.case_label.ok_or_else(|| {
        PreprocessError::InvalidInput(format!("recording {} has no label", rec.case_id))
    })?;
    let min_len = rec.channels.iter().map(|c| c.samples.len()).min().unwrap();
    let n_segments = min_len / window;
    let c = rec.channels.len();
    let mut out = Vec::with_capacity(n_segments);
    for s in 0..n_segments {
        let mut data = Vec::with_capacity(c * window);
        for ch in &rec.channels {
            data.extend_from_slice(&ch.samples[s * window..(s + 1) * window]);
        }
        out.push(Segment {
            data: Tensor::new(vec![c, window], data).expect("segment shape"),
            label,
            subject_id: rec.subject_id.clone(),
            case_id: rec.case_id.clone(),
            segment_index: s,
        });
    }
    Ok(out)
}

/// Z-normalizes each channel with the segment's own statistics
/// (population standard deviation). Channels with vanishing variance
/// (σ < 1e-12) become all zeros.
pub fn znorm(seg: &Segment) -> Segment {
    let shape = seg.data.shape().to_vec();
    let (c, t) = (shape[0], shape[1]);
    let mut data = seg.data.data().to_vec();
    for ch in 0..c {
        let row = &mut data[ch * t..(ch + 1) * t];
        let mean = row.iter().sum::<f64>() / t as f64;
        let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / t as f64;
        let sd = var.sqrt();
        if sd < 1e-12 {
            row.fill(0.0);
        } else {
            for x in row.iter_mut() {
                *x = (*x - mean) / sd;
            }
        }
    }
    Segment {
        data: Tensor::new(shape, data).expect("znorm shape"),
        ..seg.clone()
    }
}

/// Full pipeline for one recording: montage selection, resampling,
/// windowing, per-channel normalization.
pub fn preprocess_recording(
    rec: &EegRecording,
    cfg: &PreprocessConfig,
) -> Result<Vec<Segment>, PreprocessError> {
    let selected = match &cfg.montage {
        Some(labels) => {
            let wanted: Vec<&str> = labels.iter().map(|s| s.as_str()).collect();
            select_montage(rec, &wanted)?
        }
        None => rec.clone(),
    };
    let resampled = downsample_recording(&selected, cfg.target_hz)?;
    Ok(segment(&resampled, cfg.window_seconds)?
        .iter()
        .map(znorm)
        .collect())
}

/// Drops recordings shorter than `min_seconds`.
pub fn filter_min_duration(recs: Vec<EegRecording>, min_seconds: f64) -> Vec<EegRecording> {
    recs.into_iter()
        .filter(|r| r.duration_seconds >= min_seconds)
        .collect()
}

// ── Segment cache ───────────────────────────────────────────────────────
//
// One file per segment: magic "CWAT", format version u16, channel count
// u16, samples-per-channel u32, label u8, segment index u32, then
// case_id and subject_id as u16-length-prefixed UTF-8, then channels ×
// samples little-endian f64.

const CACHE_MAGIC: &[u8; 4] = b"CWAT";
const CACHE_VERSION: u16 = 1;

pub fn write_segment(path: &Path, seg: &Segment) -> Result<(), PreprocessError> {
    let shape = seg.data.shape();
    let (c, t) = (shape[0], shape[1]);
    if c > u16::MAX as usize || t > u32::MAX as usize {
        return Err(PreprocessError::InvalidInput(format!(
            "segment shape {c}×{t} exceeds cache field widths"
        )));
    }
    let mut buf = Vec::with_capacity(32 + seg.data.numel() * 8);
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(c as u16).to_le_bytes());
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.push(seg.label.as_index() as u8);
    buf.extend_from_slice(&(seg.segment_index as u32).to_le_bytes());
    for text in [&seg.case_id, &seg.subject_id] {
        let bytes = text.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(PreprocessError::InvalidInput(format!(
                "id {text:?} too long for cache header"
            )));
        }
        buf.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(bytes);
    }
    for &v in seg.data.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn read_segment(path: &Path) -> Result<Segment, PreprocessError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], PreprocessError> {
        if *pos + n > bytes.len() {
            return Err(PreprocessError::BadCache(format!(
                "{} truncated at byte {}",
                path.display(),
                *pos
            )));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != CACHE_MAGIC {
        return Err(PreprocessError::BadCache(format!(
            "{} is not a segment cache file (bad magic)",
            path.display()
        )));
    }
    let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(PreprocessError::BadCache(format!(
            "{}: unsupported cache version {version}",
            path.display()
        )));
    }
    let c = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
    let t = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let label_byte = take(&mut pos, 1)?[0];
    let label = Label::from_index(label_byte as usize).ok_or_else(|| {
        PreprocessError::BadCache(format!("{}: bad label byte {label_byte}", path.display()))
    })?;
    let segment_index = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut ids = Vec::with_capacity(2);
    for _ in 0..2 {
        let len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let text = std::str::from_utf8(take(&mut pos, len)?)
            .map_err(|_| {
                PreprocessError::BadCache(format!("{}: id is not UTF-8", path.display()))
            })?
            .to_string();
        ids.push(text);
    }
    let mut data = Vec::with_capacity(c * t);
    for _ in 0..c * t {
        data.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
    }
    if pos != bytes.len() {
        return Err(PreprocessError::BadCache(format!(
            "{}: {} trailing bytes",
            path.display(),
            bytes.len() - pos
        )));
    }
    let subject_id = ids.pop().unwrap();
    let case_id = ids.pop().unwrap();
    Ok(Segment {
        data: Tensor::new(vec![c, t], data)
            .map_err(|e| PreprocessError::BadCache(format!("{}: {e}", path.display())))?,
        label,
        subject_id,
        case_id,
        segment_index,
    })
}

/// Writes all segments of a dataset into `dir` and returns the manifest
/// path. File names are `{case_id}_{segment_index}.seg`; the manifest has
/// one tab-separated line per segment: path, case id, subject id, label.
pub fn write_dataset(dir: &Path, segments: &[Segment]) -> Result<PathBuf, PreprocessError> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for seg in segments {
        let name = format!("{}_{:04}.seg", seg.case_id, seg.segment_index);
        write_segment(&dir.join(&name), seg)?;
        manifest.push_str(&format!(
            "{name}\t{}\t{}\t{}\n",
            seg.case_id,
            seg.subject_id,
            seg.label.as_str()
        ));
    }
    let manifest_path = dir.join("manifest.tsv");
    std::fs::write(&manifest_path, manifest)?;
    Ok(manifest_path)
}

/// One manifest row; `path` is resolved against the manifest's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub case_id: String,
    pub subject_id: String,
    pub label: Label,
}

pub fn read_manifest(manifest_path: &Path) -> Result<Vec<ManifestEntry>, PreprocessError> {
    let text = std::fs::read_to_string(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(PreprocessError::BadCache(format!(
                "{}:{}: expected 4 tab-separated fields, got {}",
                manifest_path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        let label = match fields[3] {
            "normal" => Label::Normal,
            "abnormal" => Label::Abnormal,
            other => {
                return Err(PreprocessError::BadCache(format!(
                    "{}:{}: unknown label {other:?}",
                    manifest_path.display(),
                    lineno + 1
                )))
            }
        };
        out.push(ManifestEntry {
            path: base.join(fields[0]),
            case_id: fields[1].to_string(),
            subject_id: fields[2].to_string(),
            label,
        });
    }
    Ok(out)
}

/// Loads every segment listed in a manifest.
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<Segment>, PreprocessError> {
    read_manifest(manifest_path)?
        .iter()
        .map(|e| read_segment(&e.path))
        .collect()
}
