//! Toy source/target languages with exact phone alignments and Gaussian
//! emission features.
//!
//! Emission means are built as a per-manner centroid plus a per-phone residual.
//! A target language keeps the source manner centroids, so landmark structure
//! carries over, while the residuals that identify individual phones are
//! rotated away from the source.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{write_phn, Gender, Manifest, Manner, PhoneInventory, PhoneSegment, Utterance};
use crate::features::{write_lmfe, FeatureError, FeatureMatrix, FeatureMeta};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid language spec: {0}")]
    Invalid(String),
    #[error("relabel map is empty")]
    EmptyRelabel,
    #[error("manner {0} has no phone in the source language")]
    MissingManner(Manner),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyPhone {
    pub symbol: String,
    pub manner: Manner,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyLanguageSpec {
    pub phones: Vec<ToyPhone>,
    /// Mean phone duration in frames.
    pub phone_mean_frames: usize,
    /// Success probability of the two geometric variables whose difference
    /// jitters each duration. 1.0 disables jitter.
    pub duration_jitter: f64,
    pub emission_means: Vec<Vec<f64>>,
    pub emission_std: f64,
    /// Phones per utterance.
    pub utterance_length: usize,
    pub n_speakers: usize,
    pub speaker_offset_std: f64,
    pub hop: f64,
    pub sample_rate: u32,
}

pub const MIN_PHONE_FRAMES: usize = 3;

impl ToyLanguageSpec {
    pub fn feature_dim(&self) -> usize {
        self.emission_means.first().map_or(0, Vec::len)
    }

    pub fn inventory(&self) -> PhoneInventory {
        PhoneInventory::from_pairs(self.phones.iter().map(|p| (p.symbol.clone(), p.manner)))
            .expect("validated phone list has unique symbols")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SynthError::Invalid(m.to_string()));
        if self.phones.len() != self.emission_means.len() {
            return bad("one emission mean per phone");
        }
        let d = self.feature_dim();
        if d == 0 || self.emission_means.iter().any(|m| m.len() != d) {
            return bad("emission means must share a nonzero dimension");
        }
        let has = |m: Manner| self.phones.iter().any(|p| p.manner == m);
        let manners: std::collections::BTreeSet<_> = self.phones.iter().map(|p| p.manner).collect();
        if manners.len() < 2 || !has(Manner::Vowel) || !has(Manner::Fricative) {
            return bad("need at least two manners including a vowel and a fricative");
        }
        if !(self.emission_std > 0.0 && self.speaker_offset_std > 0.0) {
            return bad("standard deviations must be positive");
        }
        if !(self.duration_jitter > 0.0 && self.duration_jitter <= 1.0) {
            return bad("duration_jitter must lie in (0, 1]");
        }
        if self.utterance_length == 0 || self.n_speakers == 0 || self.hop <= 0.0 {
            return bad("utterance_length, n_speakers and hop must be positive");
        }
        let mut seen = std::collections::HashSet::new();
        if !self.phones.iter().all(|p| seen.insert(p.symbol.as_str())) {
            return bad("phone symbols must be unique");
        }
        Ok(())
    }

    /// Mean of the emission means of each manner.
    pub fn manner_centroids(&self) -> BTreeMap<Manner, Vec<f64>> {
        let mut sums: BTreeMap<Manner, (Vec<f64>, usize)> = BTreeMap::new();
        for (p, mean) in self.phones.iter().zip(&self.emission_means) {
            let entry = sums
                .entry(p.manner)
                .or_insert_with(|| (vec![0.0; mean.len()], 0));
            entry.0.iter_mut().zip(mean).for_each(|(a, b)| *a += b);
            entry.1 += 1;
        }
        sums.into_iter()
            .map(|(m, (s, n))| (m, s.into_iter().map(|v| v / n as f64).collect()))
            .collect()
    }
}

pub fn default_source_phones() -> Vec<ToyPhone> {
    use Manner::*;
    let table: &[(&str, Manner)] = &[
        ("aa", Vowel),
        ("iy", Vowel),
        ("uw", Vowel),
        ("eh", Vowel),
        ("ah", Vowel),
        ("ow", Vowel),
        ("w", Glide),
        ("y", Glide),
        ("l", Glide),
        ("r", Glide),
        ("s", Fricative),
        ("sh", Fricative),
        ("f", Fricative),
        ("z", Fricative),
        ("v", Fricative),
        ("ch", Affricate),
        ("jh", Affricate),
        ("m", Nasal),
        ("n", Nasal),
        ("ng", Nasal),
        ("pcl", StopClosure),
        ("tcl", StopClosure),
        ("kcl", StopClosure),
        ("sil", Other),
        ("dx", Other),
    ];
    table
        .iter()
        .map(|&(s, m)| ToyPhone {
            symbol: s.into(),
            manner: m,
        })
        .collect()
}

/// Target phone set: disjoint symbols over the same manners.
pub fn default_target_relabel() -> Vec<(String, Manner)> {
    use Manner::*;
    [
        ("a", Vowel),
        ("i", Vowel),
        ("u", Vowel),
        ("e", Vowel),
        ("o", Vowel),
        ("E", Vowel),
        ("j", Glide),
        ("W", Glide),
        ("L", Glide),
        ("S", Fricative),
        ("h", Fricative),
        ("Z", Fricative),
        ("c", Affricate),
        ("J", Affricate),
        ("M", Nasal),
        ("N", Nasal),
        ("NG", Nasal),
        ("ny", Nasal),
        ("bcl", StopClosure),
        ("dcl", StopClosure),
        ("gcl", StopClosure),
        ("sp", Other),
        ("q", Other),
    ]
    .into_iter()
    .map(|(s, m)| (s.to_string(), m))
    .collect()
}

/// Knobs for [`source_language`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyLanguageParams {
    pub feature_dim: usize,
    /// Spread of the per-manner centroids.
    pub manner_scale: f64,
    /// Spread of the per-phone residuals around their manner centroid.
    pub phone_scale: f64,
    pub emission_std: f64,
    pub phone_mean_frames: usize,
    pub duration_jitter: f64,
    pub utterance_length: usize,
    pub n_speakers: usize,
    pub speaker_offset_std: f64,
}

impl Default for ToyLanguageParams {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            manner_scale: 1.5,
            phone_scale: 1.0,
            emission_std: 1.0,
            phone_mean_frames: 8,
            duration_jitter: 0.35,
            utterance_length: 30,
            n_speakers: 8,
            speaker_offset_std: 0.3,
        }
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// A source language over `phones` with random centroid-plus-residual means.
pub fn source_language(phones: Vec<ToyPhone>, params: &ToyLanguageParams, seed: u64) -> ToyLanguageSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = params.feature_dim;
    let mut centroids = BTreeMap::new();
    for m in Manner::ALL {
        centroids.insert(m, gaussian_vec(&mut rng, d, params.manner_scale));
    }
    let emission_means = phones
        .iter()
        .map(|p| {
            let residual = gaussian_vec(&mut rng, d, params.phone_scale);
            centroids[&p.manner]
                .iter()
                .zip(residual)
                .map(|(c, r)| c + r)
                .collect()
        })
        .collect();
    ToyLanguageSpec {
        phones,
        phone_mean_frames: params.phone_mean_frames,
        duration_jitter: params.duration_jitter,
        emission_means,
        emission_std: params.emission_std,
        utterance_length: params.utterance_length,
        n_speakers: params.n_speakers,
        speaker_offset_std: params.speaker_offset_std,
        hop: 0.01,
        sample_rate: 16_000,
    }
}

/// Random orthogonal matrix (Gram-Schmidt on a Gaussian matrix).
fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v = gaussian_vec(rng, d, 1.0);
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

/// Derives a target language. Each target phone borrows a source phone of the
/// same manner (a random permutation within each manner, cycled when the
/// target has more phones); its mean keeps the source manner centroid and mixes
/// the borrowed residual `r` as `(1 - s) r + s Q r` for a random orthogonal
/// `Q` and `s = rotation_strength`.
pub fn derive_target(
    source: &ToyLanguageSpec,
    rotation_strength: f64,
    relabel: &[(String, Manner)],
    seed: u64,
) -> Result<ToyLanguageSpec> {
    if relabel.is_empty() {
        return Err(SynthError::EmptyRelabel);
    }
    source.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centroids = source.manner_centroids();
    let mut by_manner: BTreeMap<Manner, Vec<usize>> = BTreeMap::new();
    for (i, p) in source.phones.iter().enumerate() {
        by_manner.entry(p.manner).or_default().push(i);
    }
    for pool in by_manner.values_mut() {
        pool.shuffle(&mut rng);
    }
    let q = random_orthogonal(&mut rng, source.feature_dim());
    let s = rotation_strength;
    let mut used: BTreeMap<Manner, usize> = BTreeMap::new();
    let mut phones = Vec::with_capacity(relabel.len());
    let mut means = Vec::with_capacity(relabel.len());
    for (symbol, manner) in relabel {
        let pool = by_manner
            .get(manner)
            .ok_or(SynthError::MissingManner(*manner))?;
        let k = used.entry(*manner).or_insert(0);
        let src = pool[*k % pool.len()];
        *k += 1;
        let centroid = &centroids[manner];
        let residual: Vec<f64> = source.emission_means[src]
            .iter()
            .zip(centroid)
            .map(|(m, c)| m - c)
            .collect();
        let mean = if s == 0.0 {
            source.emission_means[src].clone()
        } else {
            (0..residual.len())
                .map(|i| {
                    let rotated: f64 = q[i].iter().zip(&residual).map(|(a, b)| a * b).sum();
                    centroid[i] + (1.0 - s) * residual[i] + s * rotated
                })
                .collect()
        };
        phones.push(ToyPhone {
            symbol: symbol.clone(),
            manner: *manner,
        });
        means.push(mean);
    }
    let target = ToyLanguageSpec {
        phones,
        emission_means: means,
        ..source.clone()
    };
    target.validate()?;
    Ok(target)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthUtterance {
    pub utterance: Utterance,
    pub features: FeatureMatrix,
    /// Phone index per frame.
    pub frame_phones: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub inventory: PhoneInventory,
    pub utterances: Vec<SynthUtterance>,
}

fn utterance_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn speaker_offsets(spec: &ToyLanguageSpec, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = utterance_rng(seed, u64::MAX);
    (0..spec.n_speakers)
        .map(|_| gaussian_vec(&mut rng, spec.feature_dim(), spec.speaker_offset_std))
        .collect()
}

fn sample_duration(spec: &ToyLanguageSpec, rng: &mut ChaCha8Rng) -> usize {
    let jitter = if spec.duration_jitter >= 1.0 {
        0
    } else {
        let g = Geometric::new(spec.duration_jitter).expect("validated probability");
        g.sample(rng) as i64 - g.sample(rng) as i64
    };
    (spec.phone_mean_frames as i64 + jitter).max(MIN_PHONE_FRAMES as i64) as usize
}

/// Generates `n_utts` utterances. Utterance `i` draws from its own stream of
/// `seed`, so the result does not depend on generation order.
pub fn generate_language(spec: &ToyLanguageSpec, n_utts: usize, seed: u64, prefix: &str) -> Result<SynthCorpus> {
    spec.validate()?;
    if n_utts == 0 {
        return Err(SynthError::Invalid("n_utts must be at least 1".into()));
    }
    let offsets = speaker_offsets(spec, seed);
    let noise = Normal::new(0.0, spec.emission_std).expect("positive std");
    let d = spec.feature_dim();
    let utterances = (0..n_utts)
        .map(|i| {
            let mut rng = utterance_rng(seed, i as u64);
            let speaker = i % spec.n_speakers;
            let mut frame_phones = Vec::new();
            let mut segments = Vec::with_capacity(spec.utterance_length);
            let mut prev: Option<usize> = None;
            let hop_samples = (spec.hop * f64::from(spec.sample_rate)).round() as usize;
            let seconds = |frame: usize| (frame * hop_samples) as f64 / f64::from(spec.sample_rate);
            for _ in 0..spec.utterance_length {
                let phone = loop {
                    let p = rng.random_range(0..spec.phones.len());
                    if Some(p) != prev {
                        break p;
                    }
                };
                prev = Some(phone);
                let frames = sample_duration(spec, &mut rng);
                let start = frame_phones.len();
                frame_phones.extend(std::iter::repeat_n(phone, frames));
                segments.push(PhoneSegment::new(
                    spec.phones[phone].symbol.clone(),
                    seconds(start),
                    seconds(frame_phones.len()),
                ));
            }
            let t = frame_phones.len();
            let mut data = Array2::zeros((t, d));
            for (f, &p) in frame_phones.iter().enumerate() {
                for j in 0..d {
                    data[[f, j]] = spec.emission_means[p][j] + offsets[speaker][j] + noise.sample(&mut rng);
                }
            }
            let id = format!("{prefix}{i:05}");
            let gender = if speaker.is_multiple_of(2) { Gender::Female } else { Gender::Male };
            let mut utterance = Utterance::new(id.clone(), format!("{prefix}spk{speaker:02}"), gender);
            utterance.sample_rate = spec.sample_rate;
            utterance.segments = segments;
            utterance.flags.has_phone_labels = true;
            SynthUtterance {
                utterance,
                features: FeatureMatrix {
                    data,
                    frame_hop: spec.hop,
                    meta: FeatureMeta {
                        utt_id: id,
                        spec_hash: 0,
                    },
                },
                frame_phones,
            }
        })
        .collect();
    Ok(SynthCorpus {
        inventory: spec.inventory(),
        utterances,
    })
}

impl SynthCorpus {
    pub fn frame_count(&self) -> usize {
        self.utterances.iter().map(|u| u.frame_phones.len()).sum()
    }

    /// Writes `inventory.txt`, one `.phn` and `.lmfe` per utterance and
    /// `manifest.json` under `dir`; returns the manifest.
    pub fn write(&self, dir: &Path) -> Result<Manifest> {
        fs::create_dir_all(dir.join("phn"))?;
        fs::create_dir_all(dir.join("feats"))?;
        fs::write(dir.join("inventory.txt"), self.inventory.to_text())?;
        let mut utts = Vec::with_capacity(self.utterances.len());
        for su in &self.utterances {
            let mut utt = su.utterance.clone();
            let phn = format!("phn/{}.phn", utt.id);
            let feats = format!("feats/{}.lmfe", utt.id);
            fs::write(dir.join(&phn), write_phn(&utt.segments, utt.sample_rate))?;
            write_lmfe(dir.join(&feats), &su.features)?;
            utt.phn = Some(phn.into());
            utt.features = Some(feats.into());
            utt.flags.has_phone_labels = true;
            utts.push(utt);
        }
        let mut manifest = Manifest::new("inventory.txt", utts);
        manifest.base_dir = dir.to_path_buf();
        manifest.save(dir.join("manifest.json"))?;
        Ok(manifest)
    }
}
