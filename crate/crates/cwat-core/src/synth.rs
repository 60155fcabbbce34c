//! Labeled synthetic EEG for end-to-end verification.
//!
//! Each channel is a mixture of band-limited sinusoids (delta through
//! gamma) plus Gaussian noise. The two classes differ in spectral shape,
//! not overall amplitude, so per-channel z-normalization cannot erase the
//! signal: normal recordings carry occipital-dominant alpha (15-45 uV on
//! O1/O2), abnormal recordings suppress that alpha and add a bursty
//! beta rhythm near 30 Hz on Fz. Everything is drawn from one seeded
//! generator, so a fixed seed reproduces identical bytes.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::edfio::{
    write_edf, ChannelData, EdfError, EdfFile, EdfHeader, EegRecording, Label, SignalHeader,
    MONTAGE_10_20,
};
use crate::preprocess::{preprocess_recording, PreprocessConfig, PreprocessError, Segment};

/// One background rhythm band, applied to every channel.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BandSpec {
    pub name: String,
    pub low_hz: f64,
    pub high_hz: f64,
    pub normal_uv: f64,
    pub abnormal_uv: f64,
}

/// A channel-specific override of one band: the class signature.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChannelSignature {
    pub channel_label: String,
    pub band: String,
    /// Per-case amplitude draw ranges (uniform), by class.
    pub normal_uv: (f64, f64),
    pub abnormal_uv: (f64, f64),
    /// Frequency range override; the band's own range when absent.
    pub freq_hz: Option<(f64, f64)>,
    /// Burst envelope period for the abnormal class; steady when absent.
    pub abnormal_burst_period_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthSpec {
    pub n_cases: usize,
    pub segments_per_case: usize,
    pub channels: usize,
    pub rate_hz: f64,
    pub segment_seconds: f64,
    pub bands: Vec<BandSpec>,
    pub signatures: Vec<ChannelSignature>,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let band = |name: &str, low: f64, high: f64, uv: f64| BandSpec {
            name: name.to_string(),
            low_hz: low,
            high_hz: high,
            normal_uv: uv,
            abnormal_uv: uv,
        };
        let alpha_sig = |label: &str| ChannelSignature {
            channel_label: label.to_string(),
            band: "alpha".to_string(),
            normal_uv: (15.0, 45.0),
            abnormal_uv: (2.0, 2.0),
            freq_hz: None,
            abnormal_burst_period_s: None,
        };
        SynthSpec {
            n_cases: 100,
            segments_per_case: 4,
            channels: 19,
            rate_hz: 100.0,
            segment_seconds: 120.0,
            bands: vec![
                band("delta", 0.5, 4.0, 12.0),
                band("theta", 4.0, 8.0, 8.0),
                band("alpha", 8.0, 13.0, 6.0),
                band("beta", 13.0, 30.0, 5.0),
                band("gamma", 30.0, 50.0, 2.0),
            ],
            signatures: vec![
                alpha_sig("O1"),
                alpha_sig("O2"),
                ChannelSignature {
                    channel_label: "Fz".to_string(),
                    band: "beta".to_string(),
                    normal_uv: (4.0, 6.0),
                    abnormal_uv: (22.0, 28.0),
                    freq_hz: Some((28.0, 32.0)),
                    abnormal_burst_period_s: Some(3.0),
                },
            ],
            noise_std: 8.0,
            seed: 7,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("synth spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Edf(#[from] EdfError),
    #[error("fixture output: {0}")]
    Io(#[from] std::io::Error),
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_cases == 0 || self.segments_per_case == 0 || self.channels == 0 {
            return Err(SynthError::InvalidSpec(
                "n_cases, segments_per_case, and channels must be positive".to_string(),
            ));
        }
        if !(self.rate_hz > 0.0) || !(self.segment_seconds > 0.0) || self.noise_std < 0.0 {
            return Err(SynthError::InvalidSpec(
                "rate, segment length, and noise level must be non-negative".to_string(),
            ));
        }
        // Draws are exclusive of the upper edge, so high == nyquist is fine.
        let nyquist = self.rate_hz / 2.0;
        let check_range = |name: &str, low: f64, high: f64| -> Result<(), SynthError> {
            if !(low > 0.0) || low > high || high > nyquist {
                return Err(SynthError::InvalidSpec(format!(
                    "band {name}: range {low}-{high} Hz outside (0, {nyquist}]"
                )));
            }
            Ok(())
        };
        for b in &self.bands {
            check_range(&b.name, b.low_hz, b.high_hz)?;
            if b.normal_uv < 0.0 || b.abnormal_uv < 0.0 {
                return Err(SynthError::InvalidSpec(format!(
                    "band {}: amplitudes must be >= 0",
                    b.name
                )));
            }
        }
        for s in &self.signatures {
            if !self.bands.iter().any(|b| b.name == s.band) {
                return Err(SynthError::InvalidSpec(format!(
                    "signature on {} names unknown band {:?}",
                    s.channel_label, s.band
                )));
            }
            if let Some((low, high)) = s.freq_hz {
                check_range(&format!("{} signature", s.channel_label), low, high)?;
            }
        }
        Ok(())
    }

    fn channel_labels(&self) -> Vec<String> {
        if self.channels == MONTAGE_10_20.len() {
            MONTAGE_10_20.iter().map(|s| s.to_string()).collect()
        } else {
            (0..self.channels).map(|i| format!("ch{i}")).collect()
        }
    }
}

/// Standard normal draw via Box-Muller; uses two uniform draws per call.
fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>(); // (0, 1]
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

struct ToneSpec {
    freq_hz: f64,
    amplitude_uv: f64,
    bursty: bool,
}

/// Generates all recordings for a spec. Case labels alternate so classes
/// stay balanced; every case gets its own subject.
pub fn generate(spec: &SynthSpec) -> Result<Vec<EegRecording>, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.n_cases)
        .map(|k| Ok(generate_case(spec, k, &mut rng)))
        .collect()
}

fn generate_case(spec: &SynthSpec, k: usize, rng: &mut ChaCha8Rng) -> EegRecording {
    let label = if k % 2 == 0 { Label::Normal } else { Label::Abnormal };
    let labels = spec.channel_labels();
    let seg_len = (spec.segment_seconds * spec.rate_hz).round() as usize;
    let total = seg_len * spec.segments_per_case;

    // Per-case draws: one frequency per band, one amplitude per
    // signature, shared by all segments of the case.
    let draw = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
        if lo == hi { lo } else { rng.random_range(lo..hi) }
    };
    let band_freqs: Vec<f64> = spec
        .bands
        .iter()
        .map(|b| draw(rng, b.low_hz, b.high_hz))
        .collect();
    let sig_draws: Vec<(f64, f64)> = spec
        .signatures
        .iter()
        .map(|s| {
            let (lo, hi) = match label {
                Label::Normal => s.normal_uv,
                Label::Abnormal => s.abnormal_uv,
            };
            let amp = draw(rng, lo, hi);
            let freq = match s.freq_hz {
                Some((lo, hi)) => draw(rng, lo, hi),
                None => {
                    let idx = spec.bands.iter().position(|b| b.name == s.band).unwrap();
                    band_freqs[idx]
                }
            };
            (amp, freq)
        })
        .collect();

    let mut channels: Vec<ChannelData> = labels
        .iter()
        .map(|l| ChannelData {
            label: l.clone(),
            sampling_rate_hz: spec.rate_hz,
            samples: Vec::with_capacity(total),
        })
        .collect();

    for seg in 0..spec.segments_per_case {
        let t0 = (seg * seg_len) as f64 / spec.rate_hz;
        for (ci, ch) in channels.iter_mut().enumerate() {
            // Resolve this channel's tone stack for this segment.
            let mut tones: Vec<ToneSpec> = Vec::with_capacity(spec.bands.len());
            for (bi, band) in spec.bands.iter().enumerate() {
                let sig = spec
                    .signatures
                    .iter()
                    .position(|s| s.channel_label == labels[ci] && s.band == band.name);
                let (amplitude_uv, freq_hz, bursty) = match sig {
                    Some(si) => {
                        let (amp, freq) = sig_draws[si];
                        let bursty = label == Label::Abnormal
                            && spec.signatures[si].abnormal_burst_period_s.is_some();
                        (amp, freq, bursty)
                    }
                    None => {
                        let amp = match label {
                            Label::Normal => band.normal_uv,
                            Label::Abnormal => band.abnormal_uv,
                        };
                        (amp, band_freqs[bi], false)
                    }
                };
                tones.push(ToneSpec { freq_hz, amplitude_uv, bursty });
            }
            let phases: Vec<f64> = tones
                .iter()
                .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
                .collect();
            let burst_period = spec
                .signatures
                .iter()
                .find(|s| s.channel_label == labels[ci])
                .and_then(|s| s.abnormal_burst_period_s)
                .unwrap_or(3.0);

            for i in 0..seg_len {
                let t = t0 + i as f64 / spec.rate_hz;
                let mut v = 0.0;
                for (tone, &phase) in tones.iter().zip(&phases) {
                    let mut a = tone.amplitude_uv;
                    if tone.bursty {
                        let s = (std::f64::consts::PI * t / burst_period).sin();
                        a *= 0.2 + 0.8 * s * s;
                    }
                    v += a * (std::f64::consts::TAU * tone.freq_hz * t + phase).sin();
                }
                if spec.noise_std > 0.0 {
                    v += spec.noise_std * gaussian(rng);
                }
                ch.samples.push(v);
            }
        }
    }

    EegRecording {
        channels,
        duration_seconds: total as f64 / spec.rate_hz,
        subject_id: format!("subj{k:04}"),
        case_id: format!("case{k:04}"),
        case_label: Some(label),
        clamped_samples: 0,
    }
}

/// Generates and preprocesses in one pass (one recording in memory at a
/// time), yielding model-ready z-normalized segments.
pub fn generate_segments(spec: &SynthSpec) -> Result<Vec<Segment>, SynthError> {
    spec.validate()?;
    let cfg = PreprocessConfig {
        target_hz: spec.rate_hz.min(crate::preprocess::TARGET_RATE_HZ),
        window_seconds: spec.segment_seconds,
        montage: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.n_cases * spec.segments_per_case);
    for k in 0..spec.n_cases {
        let rec = generate_case(spec, k, &mut rng);
        out.extend(preprocess_recording(&rec, &cfg)?);
    }
    Ok(out)
}

const FIXTURE_PHYS_MIN: f64 = -3276.8;
const FIXTURE_PHYS_MAX: f64 = 3276.7;

/// Writes one EDF file per case into `dir` and returns the paths.
/// Requires an integral sampling rate and whole-second recordings so the
/// fixed 1-second records tile exactly.
pub fn write_edf_fixtures(spec: &SynthSpec, dir: &Path) -> Result<Vec<PathBuf>, SynthError> {
    spec.validate()?;
    if spec.rate_hz.fract() != 0.0 {
        return Err(SynthError::InvalidSpec(format!(
            "EDF fixtures need an integral sampling rate, got {}",
            spec.rate_hz
        )));
    }
    let seconds_per_case = spec.segment_seconds * spec.segments_per_case as f64;
    if seconds_per_case.fract() != 0.0 {
        return Err(SynthError::InvalidSpec(format!(
            "EDF fixtures need whole-second recordings, got {seconds_per_case} s"
        )));
    }
    std::fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut paths = Vec::with_capacity(spec.n_cases);
    for k in 0..spec.n_cases {
        let rec = generate_case(spec, k, &mut rng);
        let file = recording_to_edf(&rec, spec.rate_hz as usize);
        let bytes = write_edf(&file)?;
        let path = dir.join(format!("{}.edf", rec.case_id));
        std::fs::write(&path, bytes)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Quantizes a recording to 16-bit EDF at 0.1 uV resolution.
fn recording_to_edf(rec: &EegRecording, samples_per_record: usize) -> EdfFile {
    let n_records = rec.channels[0].samples.len() / samples_per_record;
    let label_word = rec.case_label.map_or("", |l| l.as_str());
    let signals: Vec<SignalHeader> = rec
        .channels
        .iter()
        .map(|ch| SignalHeader {
            label: format!("EEG {}-REF", ch.label.to_ascii_uppercase()),
            transducer: "synthetic".to_string(),
            physical_dimension: "uV".to_string(),
            physical_min: FIXTURE_PHYS_MIN,
            physical_max: FIXTURE_PHYS_MAX,
            digital_min: -32768,
            digital_max: 32767,
            prefiltering: String::new(),
            samples_per_record,
            reserved: String::new(),
        })
        .collect();
    let digital: Vec<Vec<i16>> = rec
        .channels
        .iter()
        .map(|ch| {
            ch.samples
                .iter()
                .map(|&v| {
                    let w = (v - FIXTURE_PHYS_MIN) / (FIXTURE_PHYS_MAX - FIXTURE_PHYS_MIN);
                    let d = (w * 65535.0).round() - 32768.0;
                    d.clamp(-32768.0, 32767.0) as i16
                })
                .collect()
        })
        .collect();
    EdfFile {
        header: EdfHeader {
            version: "0".to_string(),
            patient_id: rec.subject_id.clone(),
            recording_id: format!("Startdate 01-JAN-2020 {} {label_word}", rec.case_id),
            start_date: "01.01.20".to_string(),
            start_time: "00.00.00".to_string(),
            header_bytes: 256 + 256 * signals.len(),
            reserved: String::new(),
            n_records: n_records as i64,
            record_duration: 1.0,
            n_signals: signals.len(),
        },
        signals,
        digital,
    }
}
