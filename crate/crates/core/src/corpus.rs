//! Phone alignments, phone inventories, corpus manifests and speaker-balanced
//! subsampling.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("malformed line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("end before start at line {line}")]
    EndBeforeStart { line: usize },
    #[error("segments overlap: {first} [{first_start}, {first_end}] and {second} [{second_start}, {second_end}]")]
    Overlap {
        first: String,
        first_start: f64,
        first_end: f64,
        second: String,
        second_start: f64,
        second_end: f64,
    },
    #[error("duplicate phone '{0}' in inventory")]
    DuplicatePhone(String),
    #[error("unknown manner '{name}' at line {line}")]
    UnknownManner { name: String, line: usize },
    #[error("unknown phone '{phone}' in utterance '{utterance}'")]
    UnknownPhone { phone: String, utterance: String },
    #[error("fraction must lie in (0, 1], got {0}")]
    BadFraction(f64),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CorpusError>;

pub(crate) fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// One time-aligned phone. Times are in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhoneSegment {
    pub phone: String,
    pub start: f64,
    pub end: f64,
}

impl PhoneSegment {
    pub fn new(phone: impl Into<String>, start: f64, end: f64) -> Self {
        Self {
            phone: phone.into(),
            start,
            end,
        }
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

/// Parses TIMIT `.PHN` text: `start_sample end_sample phone` per line.
pub fn parse_phn(text: &str, sample_rate: u32) -> Result<Vec<PhoneSegment>> {
    let rate = f64::from(sample_rate);
    let mut segments: Vec<(usize, PhoneSegment)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(CorpusError::Malformed {
                line,
                reason: format!("expected 3 fields, found {}", fields.len()),
            });
        }
        let parse_sample = |s: &str| {
            s.parse::<u64>().map_err(|_| CorpusError::Malformed {
                line,
                reason: format!("'{s}' is not a sample index"),
            })
        };
        let start = parse_sample(fields[0])?;
        let end = parse_sample(fields[1])?;
        if end <= start {
            return Err(CorpusError::EndBeforeStart { line });
        }
        segments.push((
            line,
            PhoneSegment::new(fields[2], start as f64 / rate, end as f64 / rate),
        ));
    }
    segments.sort_by(|a, b| a.1.start.total_cmp(&b.1.start).then(a.0.cmp(&b.0)));
    let segments: Vec<PhoneSegment> = segments.into_iter().map(|(_, s)| s).collect();
    check_non_overlapping(&segments)?;
    Ok(segments)
}

pub(crate) fn check_non_overlapping(segments: &[PhoneSegment]) -> Result<()> {
    for pair in segments.windows(2) {
        if pair[0].end > pair[1].start {
            return Err(CorpusError::Overlap {
                first: pair[0].phone.clone(),
                first_start: pair[0].start,
                first_end: pair[0].end,
                second: pair[1].phone.clone(),
                second_start: pair[1].start,
                second_end: pair[1].end,
            });
        }
    }
    Ok(())
}

/// Inverse of [`parse_phn`]; times are rounded to the nearest sample.
pub fn write_phn(segments: &[PhoneSegment], sample_rate: u32) -> String {
    let rate = f64::from(sample_rate);
    let mut out = String::new();
    for seg in segments {
        let start = (seg.start * rate).round() as u64;
        let end = (seg.end * rate).round() as u64;
        out.push_str(&format!("{start} {end} {}\n", seg.phone));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Manner {
    Vowel,
    Glide,
    Fricative,
    Affricate,
    Nasal,
    StopClosure,
    Other,
}

impl Manner {
    pub const ALL: [Manner; 7] = [
        Manner::Vowel,
        Manner::Glide,
        Manner::Fricative,
        Manner::Affricate,
        Manner::Nasal,
        Manner::StopClosure,
        Manner::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Manner::Vowel => "Vowel",
            Manner::Glide => "Glide",
            Manner::Fricative => "Fricative",
            Manner::Affricate => "Affricate",
            Manner::Nasal => "Nasal",
            Manner::StopClosure => "StopClosure",
            Manner::Other => "Other",
        }
    }
}

impl fmt::Display for Manner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Manner {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Manner::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| s.to_string())
    }
}

/// Per-language phone set. Indices are assigned in insertion order and form a
/// contiguous range `0..len()`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PhoneInventory {
    phones: Vec<(String, Manner)>,
    index: HashMap<String, usize>,
}

impl PhoneInventory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, phone: impl Into<String>, manner: Manner) -> Result<usize> {
        let phone = phone.into();
        if self.index.contains_key(&phone) {
            return Err(CorpusError::DuplicatePhone(phone));
        }
        let idx = self.phones.len();
        self.index.insert(phone.clone(), idx);
        self.phones.push((phone, manner));
        Ok(idx)
    }

    pub fn from_pairs<S: Into<String>>(pairs: impl IntoIterator<Item = (S, Manner)>) -> Result<Self> {
        let mut inv = Self::new();
        for (p, m) in pairs {
            inv.push(p, m)?;
        }
        Ok(inv)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut inv = Self::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            // '#' opens a comment only at the start of a token, so "h#" is a phone
            let fields: Vec<&str> = raw
                .split_whitespace()
                .take_while(|tok| !tok.starts_with('#'))
                .collect();
            if fields.is_empty() {
                continue;
            }
            if fields.len() != 2 {
                return Err(CorpusError::Malformed {
                    line,
                    reason: "expected 'phone manner'".into(),
                });
            }
            let manner = fields[1]
                .parse::<Manner>()
                .map_err(|name| CorpusError::UnknownManner { name, line })?;
            inv.push(fields[0], manner)?;
        }
        Ok(inv)
    }

    pub fn to_text(&self) -> String {
        self.phones
            .iter()
            .map(|(p, m)| format!("{p} {m}\n"))
            .collect()
    }

    /// The bundled 48-phone TIMIT set (closures folded to `cl`/`vcl`).
    pub fn timit() -> Self {
        Self::parse(TIMIT_INVENTORY).expect("bundled inventory is valid")
    }

    pub fn len(&self) -> usize {
        self.phones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phones.is_empty()
    }

    pub fn index_of(&self, phone: &str) -> Option<usize> {
        self.index.get(phone).copied()
    }

    pub fn manner(&self, phone: &str) -> Option<Manner> {
        self.index_of(phone).map(|i| self.phones[i].1)
    }

    pub fn phone(&self, index: usize) -> Option<&str> {
        self.phones.get(index).map(|(p, _)| p.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Manner)> {
        self.phones.iter().map(|(p, m)| (p.as_str(), *m))
    }
}

pub fn load_inventory(path: impl AsRef<Path>) -> Result<PhoneInventory> {
    PhoneInventory::parse(&read_to_string(path.as_ref())?)
}

/// Looks up the manner of `phone`, naming `utterance` in the error.
pub fn manner_of(phone: &str, inv: &PhoneInventory, utterance: &str) -> Result<Manner> {
    inv.manner(phone).ok_or_else(|| CorpusError::UnknownPhone {
        phone: phone.to_string(),
        utterance: utterance.to_string(),
    })
}

pub const TIMIT_INVENTORY: &str = include_str!("../data/timit48.inv");

/// Folding of the 61 TIMIT symbols onto the 48-phone set. Symbols absent from
/// this table map to themselves.
const TIMIT_FOLDS: &[(&str, &str)] = &[
    ("ux", "uw"),
    ("axr", "er"),
    ("ax-h", "ax"),
    ("em", "m"),
    ("nx", "n"),
    ("eng", "ng"),
    ("hv", "hh"),
    ("pcl", "cl"),
    ("tcl", "cl"),
    ("kcl", "cl"),
    ("q", "cl"),
    ("bcl", "vcl"),
    ("dcl", "vcl"),
    ("gcl", "vcl"),
    ("h#", "sil"),
    ("pau", "sil"),
];

pub fn fold_timit(phone: &str) -> &str {
    TIMIT_FOLDS
        .iter()
        .find(|(from, _)| *from == phone)
        .map_or(phone, |(_, to)| to)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Gender {
    #[serde(rename = "F", alias = "f")]
    Female,
    #[serde(rename = "M", alias = "m")]
    Male,
    #[default]
    #[serde(rename = "unknown")]
    Unknown,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelFlags {
    pub has_phone_labels: bool,
    pub has_gold_landmarks: bool,
    pub has_pseudo_landmarks: bool,
}

/// Manifest entry. Paths are stored as written and resolved against the
/// manifest directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub speaker: String,
    #[serde(default)]
    pub gender: Gender,
    /// 16-bit PCM WAV file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio: Option<PathBuf>,
    /// LMFE feature file; when present it replaces extraction from `audio`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phn: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmarks: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_landmarks: Option<PathBuf>,
    #[serde(default = "default_sample_rate")]
    pub sample_rate: u32,
    #[serde(default)]
    pub flags: LabelFlags,
    #[serde(skip)]
    pub segments: Vec<PhoneSegment>,
}

fn default_sample_rate() -> u32 {
    16_000
}

impl Utterance {
    pub fn new(id: impl Into<String>, speaker: impl Into<String>, gender: Gender) -> Self {
        Self {
            id: id.into(),
            speaker: speaker.into(),
            gender,
            audio: None,
            features: None,
            phn: None,
            landmarks: None,
            pseudo_landmarks: None,
            sample_rate: default_sample_rate(),
            flags: LabelFlags::default(),
            segments: Vec::new(),
        }
    }

    pub fn duration(&self) -> f64 {
        self.segments.last().map_or(0.0, |s| s.end)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub inventory: PathBuf,
    pub utterances: Vec<Utterance>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(inventory: impl Into<PathBuf>, utterances: Vec<Utterance>) -> Self {
        Self {
            inventory: inventory.into(),
            utterances,
            base_dir: PathBuf::new(),
        }
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    /// Reads the manifest, checks its flags against the files on disk and
    /// loads phone alignments.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut manifest = Self::load_unchecked(path)?;
        manifest.validate_and_load_segments()?;
        Ok(manifest)
    }

    /// Parses the manifest JSON only. Segments stay empty and no file is
    /// checked.
    pub fn load_unchecked(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = read_to_string(path)?;
        let mut manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| CorpusError::Manifest(format!("{}: {e}", path.display())))?;
        manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(manifest)
    }

    /// Parses an utterance's `.phn` file. Errors name the file.
    pub fn read_segments(&self, utt: &Utterance) -> Result<Vec<PhoneSegment>> {
        let phn = utt.phn.as_ref().ok_or_else(|| {
            CorpusError::Manifest(format!("utterance '{}' names no phone label file", utt.id))
        })?;
        let phn = self.resolve(phn);
        let text = read_to_string(&phn)?;
        parse_phn(&text, utt.sample_rate)
            .map_err(|e| CorpusError::Manifest(format!("{} ({}): {e}", phn.display(), utt.id)))
    }

    fn validate_and_load_segments(&mut self) -> Result<()> {
        let mut seen = HashMap::new();
        for (i, utt) in self.utterances.iter().enumerate() {
            if let Some(prev) = seen.insert(utt.id.clone(), i) {
                return Err(CorpusError::Manifest(format!(
                    "utterance id '{}' appears at positions {prev} and {i}",
                    utt.id
                )));
            }
        }
        let base = self.base_dir.clone();
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        for utt in &mut self.utterances {
            let require = |flag: bool, file: &Option<PathBuf>, what: &str| -> Result<()> {
                if !flag {
                    return Ok(());
                }
                match file {
                    Some(p) if resolve(p).is_file() => Ok(()),
                    Some(p) => Err(CorpusError::Manifest(format!(
                        "utterance '{}': {what} file {} does not exist",
                        utt.id,
                        resolve(p).display()
                    ))),
                    None => Err(CorpusError::Manifest(format!(
                        "utterance '{}' is flagged with {what} but names no file",
                        utt.id
                    ))),
                }
            };
            require(utt.flags.has_phone_labels, &utt.phn, "phone label")?;
            require(utt.flags.has_gold_landmarks, &utt.landmarks, "landmark label")?;
            require(utt.flags.has_pseudo_landmarks, &utt.pseudo_landmarks, "pseudo-label")?;
            if utt.audio.is_none() && utt.features.is_none() {
                return Err(CorpusError::Manifest(format!(
                    "utterance '{}' has neither audio nor features",
                    utt.id
                )));
            }
        }
        let segments = self
            .utterances
            .iter()
            .map(|u| if u.flags.has_phone_labels { self.read_segments(u) } else { Ok(Vec::new()) })
            .collect::<Result<Vec<_>>>()?;
        for (utt, segs) in self.utterances.iter_mut().zip(segments) {
            utt.segments = segs;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_inventory(&self) -> Result<PhoneInventory> {
        load_inventory(self.resolve(&self.inventory))
    }

    /// Checks that every labeled phone resolves in `inv`.
    pub fn check_coverage(&self, inv: &PhoneInventory) -> Result<()> {
        for utt in &self.utterances {
            for seg in &utt.segments {
                manner_of(&seg.phone, inv, &utt.id)?;
            }
        }
        Ok(())
    }

    pub fn speakers(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, utt) in self.utterances.iter().enumerate() {
            map.entry(utt.speaker.as_str()).or_default().push(i);
        }
        map
    }

    pub fn total_duration(&self) -> f64 {
        self.utterances.iter().map(Utterance::duration).sum()
    }
}

/// Number of utterances kept for a speaker with `n` utterances.
pub fn per_speaker_quota(n: usize, fraction: f64) -> usize {
    if n == 0 {
        return 0;
    }
    ((fraction * n as f64).round() as usize).clamp(1, n)
}

/// Keeps `round(fraction * n)` (at least one) utterances per speaker, chosen
/// uniformly at random. Original utterance order is preserved.
pub fn subsample(manifest: &Manifest, fraction: f64, seed: u64) -> Result<Manifest> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CorpusError::BadFraction(fraction));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; manifest.utterances.len()];
    for (_, mut indices) in manifest.speakers() {
        let quota = per_speaker_quota(indices.len(), fraction);
        indices.shuffle(&mut rng);
        for &i in &indices[..quota] {
            keep[i] = true;
        }
    }
    let utterances = manifest
        .utterances
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(u, _)| u.clone())
        .collect();
    Ok(Manifest {
        inventory: manifest.inventory.clone(),
        utterances,
        base_dir: manifest.base_dir.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parse_phn_converts_samples() {
        let segs = parse_phn("0 1600 h#\n1600 3200 s", 16_000).unwrap();
        assert_eq!(
            segs,
            vec![PhoneSegment::new("h#", 0.0, 0.1), PhoneSegment::new("s", 0.1, 0.2)]
        );
    }

    #[test]
    fn parse_phn_empty() {
        assert!(parse_phn("", 16_000).unwrap().is_empty());
        assert!(parse_phn("\n  \n", 16_000).unwrap().is_empty());
    }

    #[test]
    fn parse_phn_end_before_start() {
        let err = parse_phn("100 50 s", 16_000).unwrap_err();
        assert_eq!(err.to_string(), "end before start at line 1");
    }

    #[test]
    fn parse_phn_rejects_overlap_and_garbage() {
        let err = parse_phn("0 200 a\n100 300 b\n", 16_000).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("'a'") || msg.contains(" a "), "{msg}");
        assert!(msg.contains('b'), "{msg}");
        let err = parse_phn("0 100 a\nzero 200 b\n", 16_000).unwrap_err();
        assert!(matches!(err, CorpusError::Malformed { line: 2, .. }));
        let err = parse_phn("0 100\n", 16_000).unwrap_err();
        assert!(matches!(err, CorpusError::Malformed { line: 1, .. }));
    }

    #[test]
    fn parse_phn_sorts_and_allows_gaps() {
        let segs = parse_phn("3200 4800 b\n0 1600 a\n", 16_000).unwrap();
        assert_eq!(segs[0].phone, "a");
        assert_eq!(segs[1].phone, "b");
    }

    #[test]
    fn inventory_parse() {
        let inv = PhoneInventory::parse("s Fricative\naa Vowel").unwrap();
        assert_eq!(inv.index_of("s"), Some(0));
        assert_eq!(inv.manner("s"), Some(Manner::Fricative));
        assert_eq!(inv.index_of("aa"), Some(1));
        assert_eq!(inv.manner("aa"), Some(Manner::Vowel));
        let err = PhoneInventory::parse("s Fricative\ns Vowel").unwrap_err();
        assert!(matches!(err, CorpusError::DuplicatePhone(p) if p == "s"));
        let err = PhoneInventory::parse("s Hissing").unwrap_err();
        assert!(matches!(err, CorpusError::UnknownManner { line: 1, .. }));
        let inv = PhoneInventory::parse("# comment\ns Fricative # trailing\n\nh# Other\n").unwrap();
        assert_eq!(inv.len(), 2);
        assert_eq!(inv.manner("h#"), Some(Manner::Other));
    }

    #[test]
    fn timit_inventory_is_a_bijection_of_48() {
        let inv = PhoneInventory::timit();
        assert_eq!(inv.len(), 48);
        let mut hits = vec![0; inv.len()];
        for (p, _) in inv.iter() {
            hits[inv.index_of(p).unwrap()] += 1;
        }
        assert!(hits.iter().all(|&h| h == 1));
        for i in 0..inv.len() {
            assert_eq!(inv.index_of(inv.phone(i).unwrap()), Some(i));
        }
    }

    const TIMIT_61: &[&str] = &[
        "b", "d", "g", "p", "t", "k", "dx", "q", "jh", "ch", "s", "sh", "z", "zh", "f", "th",
        "v", "dh", "m", "n", "ng", "em", "en", "eng", "nx", "l", "r", "w", "y", "hh", "hv",
        "el", "iy", "ih", "eh", "ey", "ae", "aa", "aw", "ay", "ah", "ao", "oy", "ow", "uh",
        "uw", "ux", "er", "ax", "ix", "axr", "ax-h", "pau", "epi", "h#", "bcl", "dcl", "gcl",
        "pcl", "tcl", "kcl",
    ];

    #[test]
    fn timit_folding_covers_all_61_symbols() {
        assert_eq!(TIMIT_61.len(), 61);
        let inv = PhoneInventory::timit();
        // One TIMIT-format utterance using every symbol.
        let mut phn = String::new();
        for (i, p) in TIMIT_61.iter().enumerate() {
            phn.push_str(&format!("{} {} {p}\n", i * 800, (i + 1) * 800));
        }
        let segs = parse_phn(&phn, 16_000).unwrap();
        let mut used = std::collections::HashSet::new();
        for seg in &segs {
            let folded = fold_timit(&seg.phone);
            manner_of(folded, &inv, "sample").unwrap();
            used.insert(folded.to_string());
        }
        assert_eq!(used.len(), 48);
    }

    #[test]
    fn manner_lookup() {
        let inv = PhoneInventory::timit();
        assert_eq!(manner_of("s", &inv, "u").unwrap(), Manner::Fricative);
        assert_eq!(manner_of(fold_timit("h#"), &inv, "u").unwrap(), Manner::Other);
        assert_eq!(manner_of("m", &inv, "u").unwrap(), Manner::Nasal);
        assert_eq!(manner_of(fold_timit("pcl"), &inv, "u").unwrap(), Manner::StopClosure);
        assert_eq!(manner_of("p", &inv, "u").unwrap(), Manner::Other);
        assert_eq!(manner_of("ch", &inv, "u").unwrap(), Manner::Affricate);
        let err = manner_of("xx", &inv, "utt7").unwrap_err();
        assert_eq!(err.to_string(), "unknown phone 'xx' in utterance 'utt7'");
    }

    fn toy_manifest(speakers: usize, per: usize) -> Manifest {
        let mut utts = Vec::new();
        for s in 0..speakers {
            for u in 0..per {
                let g = if s % 2 == 0 { Gender::Female } else { Gender::Male };
                let mut utt = Utterance::new(format!("s{s}_u{u}"), format!("spk{s}"), g);
                utt.segments = vec![PhoneSegment::new("a", 0.0, 1.0 + u as f64 * 0.1)];
                utts.push(utt);
            }
        }
        Manifest::new("inv.txt", utts)
    }

    #[test]
    fn subsample_identity_at_full_fraction() {
        let m = toy_manifest(3, 5);
        for seed in [0, 1, 99] {
            assert_eq!(subsample(&m, 1.0, seed).unwrap(), m);
        }
    }

    #[test]
    fn subsample_quarter_of_four_speakers() {
        let m = toy_manifest(4, 10);
        let sub = subsample(&m, 0.25, 7).unwrap();
        // Brute-force count over the selection.
        let mut per = BTreeMap::new();
        for u in &sub.utterances {
            *per.entry(u.speaker.clone()).or_insert(0usize) += 1;
        }
        assert_eq!(per.len(), 4);
        assert!(per.values().all(|&c| (2..=3).contains(&c)), "{per:?}");
        assert!((8..=12).contains(&sub.utterances.len()));
    }

    #[test]
    fn subsample_rejects_bad_fraction() {
        let m = toy_manifest(1, 2);
        assert!(matches!(subsample(&m, 0.0, 1), Err(CorpusError::BadFraction(_))));
        assert!(matches!(subsample(&m, 1.5, 1), Err(CorpusError::BadFraction(_))));
        assert!(subsample(&m, f64::NAN, 1).is_err());
    }

    #[test]
    fn subsample_keeps_at_least_one_per_speaker() {
        let m = toy_manifest(5, 3);
        let sub = subsample(&m, 0.01, 3).unwrap();
        assert_eq!(sub.speakers().len(), 5);
        assert_eq!(sub.utterances.len(), 5);
    }

    #[test]
    fn standard_fractions() {
        // 6.8 h of training data split over 17 speakers, 1 min per utterance.
        let minutes: f64 = 6.8 * 60.0;
        for (fraction, expected) in [(0.25f64, 100.0f64), (0.10, 40.0)] {
            let kept = fraction * minutes;
            assert!((kept - expected).abs() / expected < 0.05, "{kept}");
        }
    }

    #[test]
    fn manifest_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("inv.txt"), "s Fricative\naa Vowel\n").unwrap();
        fs::write(dir.path().join("a.phn"), "0 1600 s\n1600 3200 aa\n").unwrap();
        fs::write(dir.path().join("a.lmfe"), b"").unwrap();
        let mut utt = Utterance::new("a", "spk", Gender::Female);
        utt.features = Some("a.lmfe".into());
        utt.phn = Some("a.phn".into());
        utt.flags.has_phone_labels = true;
        let m = Manifest::new("inv.txt", vec![utt]);
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        let loaded = Manifest::load(&path).unwrap();
        assert_eq!(loaded.utterances[0].segments.len(), 2);
        let inv = loaded.load_inventory().unwrap();
        loaded.check_coverage(&inv).unwrap();

        let mut bad = loaded.clone();
        bad.utterances[0].flags.has_gold_landmarks = true;
        bad.save(&path).unwrap();
        assert!(matches!(Manifest::load(&path), Err(CorpusError::Manifest(_))));
    }

    #[test]
    fn manifest_rejects_duplicate_ids() {
        let dir = tempfile::tempdir().unwrap();
        let mut u = Utterance::new("a", "spk", Gender::Unknown);
        u.features = Some("x".into());
        let m = Manifest::new("inv.txt", vec![u.clone(), u]);
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        assert!(Manifest::load(&path).is_err());
    }

    fn arb_segments() -> impl Strategy<Value = Vec<PhoneSegment>> {
        prop::collection::vec((0u64..50, 1u64..400, "[a-z]{1,3}"), 0..20).prop_map(|items| {
            let mut t = 0u64;
            items
                .into_iter()
                .map(|(gap, len, phone)| {
                    let start = t + gap;
                    t = start + len;
                    PhoneSegment::new(phone, start as f64 / 16_000.0, t as f64 / 16_000.0)
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn phn_round_trip(segs in arb_segments()) {
            let text = write_phn(&segs, 16_000);
            let back = parse_phn(&text, 16_000).unwrap();
            prop_assert_eq!(back, segs);
        }

        #[test]
        fn subsample_deterministic_and_balanced(
            counts in prop::collection::vec(1usize..12, 1..6),
            fraction in 0.05f64..1.0,
            seed in any::<u64>(),
        ) {
            let mut utts = Vec::new();
            for (s, &n) in counts.iter().enumerate() {
                for u in 0..n {
                    utts.push(Utterance::new(format!("{s}-{u}"), format!("spk{s}"), Gender::Unknown));
                }
            }
            let m = Manifest::new("inv", utts);
            let a = subsample(&m, fraction, seed).unwrap();
            let b = subsample(&m, fraction, seed).unwrap();
            prop_assert_eq!(&a, &b);
            let speakers = a.speakers();
            for (s, &n) in counts.iter().enumerate() {
                let kept = speakers[format!("spk{s}").as_str()].len();
                let exact = fraction * n as f64;
                prop_assert!((kept as f64 - exact).abs() < 1.0 || kept == 1);
            }
        }
    }
}
