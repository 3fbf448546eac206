//! Frame-level acoustic features: log-mel filterbank, regression deltas,
//! context splicing and per-utterance mean/variance normalization.

use std::collections::hash_map::DefaultHasher;
use std::f64::consts::PI;
use std::fs;
use std::hash::{Hash, Hasher};
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array2, ArrayView1, Axis};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("audio has {samples} samples, shorter than one {window}-sample window")]
    TooShort { samples: usize, window: usize },
    #[error("need at least {needed} frames, got {got}")]
    TooFewFrames { needed: usize, got: usize },
    #[error("invalid frame spec: {0}")]
    BadSpec(String),
    #[error("delta order must be 1 or 2, got {0}")]
    BadOrder(usize),
    #[error("feature file: {0}")]
    Format(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
}

pub type Result<T> = std::result::Result<T, FeatureError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrameSpec {
    pub sample_rate: u32,
    pub window: f64,
    pub hop: f64,
    pub n_mels: usize,
    pub fft_size: usize,
}

impl Default for FrameSpec {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window: 0.025,
            hop: 0.010,
            n_mels: 40,
            fft_size: 512,
        }
    }
}

impl FrameSpec {
    pub fn window_samples(&self) -> usize {
        (self.window * f64::from(self.sample_rate)).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop * f64::from(self.sample_rate)).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.hop > 0.0 && self.window >= self.hop) {
            return Err(FeatureError::BadSpec("need window >= hop > 0".into()));
        }
        if self.fft_size < self.window_samples() {
            return Err(FeatureError::BadSpec("fft_size shorter than the window".into()));
        }
        if self.n_mels < 2 {
            return Err(FeatureError::BadSpec("need at least 2 mel bands".into()));
        }
        if self.hop_samples() == 0 {
            return Err(FeatureError::BadSpec("hop is below one sample".into()));
        }
        Ok(())
    }

    /// Frame count for `n_samples` of audio.
    pub fn frame_count(&self, n_samples: usize) -> usize {
        let win = self.window_samples();
        if n_samples < win {
            0
        } else {
            1 + (n_samples - win) / self.hop_samples()
        }
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.sample_rate.hash(&mut h);
        self.window.to_bits().hash(&mut h);
        self.hop.to_bits().hash(&mut h);
        self.n_mels.hash(&mut h);
        self.fft_size.hash(&mut h);
        h.finish()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FeatureMeta {
    pub utt_id: String,
    pub spec_hash: u64,
}

/// T x D per-frame features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub data: Array2<f64>,
    pub frame_hop: f64,
    pub meta: FeatureMeta,
}

impl FeatureMatrix {
    pub fn new(data: Array2<f64>, frame_hop: f64) -> Self {
        Self {
            data,
            frame_hop,
            meta: FeatureMeta::default(),
        }
    }

    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    fn with_data(&self, data: Array2<f64>) -> Self {
        Self {
            data,
            frame_hop: self.frame_hop,
            meta: self.meta.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters spanning 0 Hz to Nyquist, one row per band over
/// `fft_size / 2 + 1` bins.
pub fn mel_filterbank(n_mels: usize, fft_size: usize, sample_rate: u32) -> Array2<f64> {
    let bins = fft_size / 2 + 1;
    let nyquist = f64::from(sample_rate) / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = f64::from(sample_rate) / fft_size as f64;
    let mut fb = Array2::zeros((n_mels, bins));
    for m in 0..n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let f = k as f64 * bin_hz;
            let w = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            fb[[m, k]] = w;
        }
    }
    fb
}

/// Center frequency of each mel band.
pub fn mel_centers(n_mels: usize, sample_rate: u32) -> Vec<f64> {
    let top = hz_to_mel(f64::from(sample_rate) / 2.0);
    (1..=n_mels)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect()
}

pub const LOG_FLOOR: f64 = 1e-10;

/// Log-mel filterbank energies: Hamming window, magnitude spectrum, mel
/// triangles, `ln(max(e, 1e-10))`.
pub fn fbank(samples: &[f64], spec: &FrameSpec) -> Result<FeatureMatrix> {
    spec.validate()?;
    let win = spec.window_samples();
    if samples.len() < win {
        return Err(FeatureError::TooShort {
            samples: samples.len(),
            window: win,
        });
    }
    let hop = spec.hop_samples();
    let frames = spec.frame_count(samples.len());
    let hamming: Vec<f64> = (0..win)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (win - 1).max(1) as f64).cos())
        .collect();
    let filters = mel_filterbank(spec.n_mels, spec.fft_size, spec.sample_rate);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(spec.fft_size);
    let bins = spec.fft_size / 2 + 1;
    let mut buf = vec![Complex::new(0.0, 0.0); spec.fft_size];
    let mut magnitude = ndarray::Array1::<f64>::zeros(bins);
    let mut out = Array2::zeros((frames, spec.n_mels));
    for t in 0..frames {
        let frame = &samples[t * hop..t * hop + win];
        for (slot, (x, w)) in buf.iter_mut().zip(frame.iter().zip(&hamming)) {
            *slot = Complex::new(x * w, 0.0);
        }
        buf[win..].fill(Complex::new(0.0, 0.0));
        fft.process(&mut buf);
        for (m, c) in magnitude.iter_mut().zip(&buf[..bins]) {
            *m = c.norm();
        }
        let energies = filters.dot(&magnitude);
        for (o, e) in out.row_mut(t).iter_mut().zip(energies.iter()) {
            *o = e.max(LOG_FLOOR).ln();
        }
    }
    Ok(FeatureMatrix {
        data: out,
        frame_hop: spec.hop,
        meta: FeatureMeta {
            utt_id: String::new(),
            spec_hash: spec.fingerprint(),
        },
    })
}

const DELTA_WINDOW: usize = 2;

fn delta_block(data: &Array2<f64>) -> Array2<f64> {
    let (t, d) = data.dim();
    let denom: f64 = 2.0 * (1..=DELTA_WINDOW).map(|n| (n * n) as f64).sum::<f64>();
    let mut out = Array2::zeros((t, d));
    for i in 0..t {
        let mut row = out.row_mut(i);
        for n in 1..=DELTA_WINDOW {
            let next = data.row((i + n).min(t - 1));
            let prev = data.row(i.saturating_sub(n));
            row.scaled_add(n as f64 / denom, &(&next - &prev));
        }
    }
    out
}

/// Appends regression deltas (window +/-2, edge frames replicated).
pub fn add_deltas(fm: &FeatureMatrix, order: usize) -> Result<FeatureMatrix> {
    if !(1..=2).contains(&order) {
        return Err(FeatureError::BadOrder(order));
    }
    if fm.frames() < 5 {
        return Err(FeatureError::TooFewFrames {
            needed: 5,
            got: fm.frames(),
        });
    }
    let mut blocks = vec![fm.data.clone()];
    for _ in 0..order {
        let next = delta_block(blocks.last().expect("nonempty"));
        blocks.push(next);
    }
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    let data = ndarray::concatenate(Axis(1), &views).expect("equal row counts");
    Ok(fm.with_data(data))
}

/// Concatenates each frame with its `radius` neighbours on both sides,
/// replicating edge frames.
pub fn splice(fm: &FeatureMatrix, radius: usize) -> FeatureMatrix {
    let (t, d) = fm.data.dim();
    let width = 2 * radius + 1;
    let mut out = Array2::zeros((t, d * width));
    for i in 0..t {
        for k in 0..width {
            let src = (i + k).saturating_sub(radius).min(t.saturating_sub(1));
            out.slice_mut(s![i, k * d..(k + 1) * d])
                .assign(&fm.data.row(src));
        }
    }
    fm.with_data(out)
}

/// The center block of a spliced matrix.
pub fn splice_center(fm: &FeatureMatrix, radius: usize) -> FeatureMatrix {
    let d = fm.dim() / (2 * radius + 1);
    fm.with_data(fm.data.slice(s![.., radius * d..(radius + 1) * d]).to_owned())
}

/// Per-dimension zero mean and unit variance over the utterance. Dimensions
/// with variance below 1e-12 are only mean-centered.
pub fn normalize(fm: &FeatureMatrix) -> Result<FeatureMatrix> {
    let t = fm.frames();
    if t < 2 {
        return Err(FeatureError::TooFewFrames { needed: 2, got: t });
    }
    let mut data = fm.data.clone();
    for mut col in data.columns_mut() {
        let (mean, var) = moments(col.view());
        let scale = if var < 1e-12 { 1.0 } else { 1.0 / var.sqrt() };
        col.mapv_inplace(|v| (v - mean) * scale);
    }
    Ok(fm.with_data(data))
}

fn moments(col: ArrayView1<f64>) -> (f64, f64) {
    let n = col.len() as f64;
    let mean = col.sum() / n;
    let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

pub const LMFE_MAGIC: &[u8; 4] = b"LMFE";
pub const LMFE_VERSION: u32 = 1;

/// Serializes to the LMFE layout: magic, u32 version, u32 T, u32 D, f64 hop,
/// then T*D little-endian f32 values in row-major order.
pub fn encode_lmfe(fm: &FeatureMatrix) -> Vec<u8> {
    let (t, d) = fm.data.dim();
    let mut out = Vec::with_capacity(24 + 4 * t * d);
    out.extend_from_slice(LMFE_MAGIC);
    out.extend_from_slice(&LMFE_VERSION.to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&fm.frame_hop.to_le_bytes());
    for v in fm.data.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_lmfe(mut bytes: &[u8]) -> Result<FeatureMatrix> {
    let mut magic = [0u8; 4];
    bytes.read_exact(&mut magic)?;
    if &magic != LMFE_MAGIC {
        return Err(FeatureError::Format("bad magic".into()));
    }
    let mut word = [0u8; 4];
    let mut read_u32 = |b: &mut &[u8]| -> Result<u32> {
        b.read_exact(&mut word)?;
        Ok(u32::from_le_bytes(word))
    };
    let version = read_u32(&mut bytes)?;
    if version != LMFE_VERSION {
        return Err(FeatureError::Format(format!("unsupported version {version}")));
    }
    let t = read_u32(&mut bytes)? as usize;
    let d = read_u32(&mut bytes)? as usize;
    let mut hop = [0u8; 8];
    bytes.read_exact(&mut hop)?;
    let hop = f64::from_le_bytes(hop);
    if bytes.len() != 4 * t * d {
        return Err(FeatureError::Format(format!(
            "payload has {} bytes, header promises {}",
            bytes.len(),
            4 * t * d
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    let data = Array2::from_shape_vec((t, d), values).expect("length checked");
    Ok(FeatureMatrix::new(data, hop))
}

pub fn write_lmfe(path: impl AsRef<Path>, fm: &FeatureMatrix) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_lmfe(fm))?;
    Ok(())
}

pub fn read_lmfe(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    decode_lmfe(&fs::read(path)?)
}

/// Reads a mono 16-bit PCM WAV file as samples scaled to [-1, 1).
pub fn read_wav(path: impl AsRef<Path>) -> Result<(Vec<f64>, u32)> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(FeatureError::Format("only 16-bit PCM WAV is supported".into()));
    }
    let channels = usize::from(spec.channels);
    let raw: Vec<i16> = reader.samples::<i16>().collect::<std::result::Result<_, _>>()?;
    let samples = raw
        .chunks(channels)
        .map(|c| f64::from(c[0]) / 32768.0)
        .collect();
    Ok((samples, spec.sample_rate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(t: usize, d: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array::from_shape_fn((t, d), |_| rng.random_range(-3.0..5.0));
        FeatureMatrix::new(data, 0.01)
    }

    #[test]
    fn fbank_shape_for_one_second() {
        let fm = fbank(&vec![0.1; 16_000], &FrameSpec::default()).unwrap();
        assert_eq!((fm.frames(), fm.dim()), (98, 40));
    }

    #[test]
    fn fbank_silence_hits_floor() {
        let fm = fbank(&vec![0.0; 4000], &FrameSpec::default()).unwrap();
        assert!(fm.data.iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn fbank_too_short() {
        let err = fbank(&[0.0; 399], &FrameSpec::default()).unwrap_err();
        assert!(matches!(err, FeatureError::TooShort { samples: 399, window: 400 }));
    }

    #[test]
    fn fbank_sine_peaks_in_the_1khz_band() {
        let spec = FrameSpec::default();
        let samples: Vec<f64> = (0..16_000)
            .map(|n| (2.0 * PI * 1000.0 * n as f64 / 16_000.0).sin())
            .collect();
        let fm = fbank(&samples, &spec).unwrap();
        // Oracle: the band whose filter responds most to 1 kHz.
        let fb = mel_filterbank(spec.n_mels, spec.fft_size, spec.sample_rate);
        let bin = (1000.0 / (16_000.0 / 512.0)) as usize;
        let expected = (0..spec.n_mels)
            .max_by(|&a, &b| fb[[a, bin]].total_cmp(&fb[[b, bin]]))
            .unwrap();
        let centers = mel_centers(spec.n_mels, spec.sample_rate);
        assert!((centers[expected] - 1000.0).abs() < 120.0);
        for row in fm.data.rows() {
            let arg = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(arg, expected);
        }
    }

    #[test]
    fn frame_spec_validation() {
        let mut spec = FrameSpec::default();
        spec.fft_size = 256;
        assert!(spec.validate().is_err());
        let mut spec = FrameSpec::default();
        spec.hop = 0.03;
        assert!(spec.validate().is_err());
        let mut spec = FrameSpec::default();
        spec.n_mels = 1;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn deltas_of_constant_and_ramp() {
        let fm = FeatureMatrix::new(Array2::from_elem((10, 3), 4.0), 0.01);
        let d = add_deltas(&fm, 2).unwrap();
        assert_eq!(d.dim(), 9);
        assert!(d.data.slice(s![.., 3..]).iter().all(|&v| v == 0.0));

        let ramp = FeatureMatrix::new(Array2::from_shape_fn((12, 2), |(t, j)| (j + 1) as f64 * t as f64), 0.01);
        let d = add_deltas(&ramp, 2).unwrap();
        // interior frames only: replication bends the ramp at the edges
        for t in 4..8 {
            assert!((d.data[[t, 2]] - 1.0).abs() < 1e-12);
            assert!((d.data[[t, 3]] - 2.0).abs() < 1e-12);
            assert!(d.data[[t, 4]].abs() < 1e-12);
            assert!(d.data[[t, 5]].abs() < 1e-12);
        }
        assert_eq!(add_deltas(&random_matrix(6, 40, 1), 2).unwrap().dim(), 120);
        assert!(matches!(add_deltas(&random_matrix(4, 2, 1), 1), Err(FeatureError::TooFewFrames { .. })));
        assert!(matches!(add_deltas(&random_matrix(8, 2, 1), 3), Err(FeatureError::BadOrder(3))));
    }

    #[test]
    fn splice_examples() {
        let fm = random_matrix(7, 4, 2);
        assert_eq!(splice(&fm, 0), fm);
        let small = FeatureMatrix::new(Array2::from_shape_fn((3, 2), |(t, j)| (10 * t + j) as f64), 0.01);
        let sp = splice(&small, 1);
        assert_eq!(sp.dim(), 6);
        assert_eq!(sp.data.row(0).to_vec(), vec![0.0, 1.0, 0.0, 1.0, 10.0, 11.0]);
        assert_eq!(sp.data.row(2).to_vec(), vec![10.0, 11.0, 20.0, 21.0, 20.0, 21.0]);
        assert_eq!(splice(&random_matrix(3, 120, 3), 5).dim(), 1320);
    }

    #[test]
    fn normalize_examples() {
        let fm = random_matrix(100, 40, 4);
        let n = normalize(&fm).unwrap();
        for col in n.data.columns() {
            let (mean, var) = moments(col);
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
        let again = normalize(&n).unwrap();
        assert!(again.data.iter().zip(n.data.iter()).all(|(a, b)| (a - b).abs() < 1e-9));

        let mut c = random_matrix(10, 2, 5);
        c.data.column_mut(1).fill(3.5);
        let n = normalize(&c).unwrap();
        assert!(n.data.column(1).iter().all(|&v| v == 0.0));
        assert!(normalize(&random_matrix(1, 3, 6)).is_err());
    }

    #[test]
    fn lmfe_layout_is_bit_exact() {
        let fm = FeatureMatrix::new(Array2::from_shape_vec((2, 2), vec![1.0, -2.0, 0.5, 3.0]).unwrap(), 0.01);
        let bytes = encode_lmfe(&fm);
        assert_eq!(&bytes[..4], b"LMFE");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..24], &0.01f64.to_le_bytes());
        assert_eq!(&bytes[24..28], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[28..32], &(-2.0f32).to_le_bytes());
        assert_eq!(bytes.len(), 24 + 16);
        assert_eq!(decode_lmfe(&bytes).unwrap(), fm);
        assert!(decode_lmfe(&bytes[..30]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_lmfe(&bad).is_err());
    }

    #[test]
    fn wav_pipeline_matches_direct_samples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        let pcm: Vec<i16> = (0..8000).map(|n| ((n as f64 * 0.05).sin() * 8000.0) as i16).collect();
        for &s in &pcm {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
        let (samples, rate) = read_wav(&path).unwrap();
        assert_eq!(rate, 16_000);
        let direct: Vec<f64> = pcm.iter().map(|&s| f64::from(s) / 32768.0).collect();
        assert_eq!(samples, direct);
        let a = fbank(&samples, &FrameSpec::default()).unwrap();
        let b = fbank(&direct, &FrameSpec::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.frames(), FrameSpec::default().frame_count(8000));
    }

    proptest! {
        #[test]
        fn splice_center_is_identity(t in 1usize..12, d in 1usize..6, r in 0usize..4, seed in any::<u64>()) {
            let fm = random_matrix(t, d, seed);
            prop_assert_eq!(splice_center(&splice(&fm, r), r).data, fm.data);
        }

        #[test]
        fn lmfe_round_trip_at_f32(t in 0usize..10, d in 0usize..6, seed in any::<u64>()) {
            let fm = random_matrix(t, d, seed);
            let back = decode_lmfe(&encode_lmfe(&fm)).unwrap();
            prop_assert_eq!(back.data.dim(), (t, d));
            for (a, b) in back.data.iter().zip(fm.data.iter()) {
                prop_assert_eq!(*a, f64::from(*b as f32));
            }
        }
    }
}
