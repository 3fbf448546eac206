//! Experiment pipeline: corpus preparation, source training with an alpha
//! sweep, landmark cascading onto the target language, target adaptation at
//! several data fractions and the comparison report.
//!
//! Everything here is deterministic for a fixed configuration and seed. The
//! `threads` knob only parallelizes per-utterance work whose results are
//! collected in input order.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Component, Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cascade::{self, CascadeError, PseudoLabels};
use crate::corpus::{self, CorpusError, Manifest, PhoneInventory, PhoneSegment, Utterance};
use crate::features::{self, FeatureError, FeatureMatrix, FrameSpec};
use crate::landmarks::{self, ClassWeights, FrameLabels, LandmarkClass, LandmarkError};
use crate::net::{self, Activation, History, LabeledBatch, MTLLossConfig, MTLNet, NetError, Task, TrainConfig};
use crate::synth::{self, SynthCorpus, SynthError, ToyLanguageParams};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Missing(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Landmark(#[from] LandmarkError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Cascade(#[from] CascadeError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("utterance '{utt}': {source}")]
    Utterance {
        utt: String,
        #[source]
        source: Box<ExperimentError>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ExperimentError {
    pub fn is_divergence(&self) -> bool {
        match self {
            ExperimentError::Net(NetError::Diverged { .. }) => true,
            ExperimentError::Utterance { source, .. } => source.is_divergence(),
            _ => false,
        }
    }

    fn in_utt(self, utt: &str) -> Self {
        ExperimentError::Utterance {
            utt: utt.to_string(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

/// Toy corpus sizes and language knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub language: ToyLanguageParams,
    pub rotation_strength: f64,
    pub source_train: usize,
    pub source_dev: usize,
    pub target_train: usize,
    pub target_dev: usize,
    pub target_test: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            language: ToyLanguageParams::default(),
            rotation_strength: 0.5,
            source_train: 200,
            source_dev: 40,
            target_train: 160,
            target_dev: 40,
            target_test: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    /// Generate a toy source/target pair instead of reading manifests.
    pub synthetic: Option<SyntheticConfig>,
    pub source_train: Option<PathBuf>,
    pub source_dev: Option<PathBuf>,
    pub target_train: Option<PathBuf>,
    pub target_dev: Option<PathBuf>,
    pub target_test: Option<PathBuf>,
    pub fractions: Vec<f64>,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            synthetic: Some(SyntheticConfig::default()),
            source_train: None,
            source_dev: None,
            target_train: None,
            target_dev: None,
            target_test: None,
            fractions: vec![1.0, 0.25, 0.1],
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LandmarkConfig {
    pub expand_radius: usize,
    pub class_weighting: bool,
}

impl Default for LandmarkConfig {
    fn default() -> Self {
        Self {
            expand_radius: landmarks::DEFAULT_EXPAND_RADIUS,
            class_weighting: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub frame_spec: FrameSpec,
    pub splice_radius: usize,
    /// 0 (statics only), 1 or 2.
    pub delta_order: usize,
    /// Per-utterance mean and variance normalization.
    pub normalize: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            frame_spec: FrameSpec::default(),
            splice_radius: 2,
            delta_order: 0,
            normalize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            activation: Activation::Sigmoid,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MtlConfig {
    /// Fixed alpha; when set no sweep is run.
    pub alpha: Option<f64>,
    pub alpha_sweep: Vec<f64>,
    pub use_confidence: bool,
    /// Pseudo-label confidences below this become 0.
    pub tau: f64,
}

impl Default for MtlConfig {
    fn default() -> Self {
        Self {
            alpha: None,
            alpha_sweep: vec![0.0, 0.1, 0.2, 0.3, 0.5],
            use_confidence: true,
            tau: 0.0,
        }
    }
}

impl MtlConfig {
    pub fn candidates(&self) -> Vec<f64> {
        match self.alpha {
            Some(a) => vec![a],
            None => self.alpha_sweep.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputConfig {
    pub directory: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("runs"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub landmarks: LandmarkConfig,
    pub features: FeatureConfig,
    pub net: NetConfig,
    /// Source-language training.
    pub train: TrainConfig,
    /// Target adaptation; falls back to `train`.
    pub adapt_train: Option<TrainConfig>,
    pub mtl: MtlConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text).map_err(|e| match e {
            ExperimentError::Config(m) => ExperimentError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.corpus.fractions.is_empty() {
            return bad("corpus.fractions is empty".into());
        }
        for &f in &self.corpus.fractions {
            if !(f > 0.0 && f <= 1.0) {
                return bad(format!("fraction {f} outside (0, 1]"));
            }
        }
        let alphas = self.mtl.candidates();
        if alphas.is_empty() {
            return bad("mtl.alpha_sweep is empty".into());
        }
        for a in alphas {
            if !(0.0..=1.0).contains(&a) {
                return bad(format!("alpha {a} outside [0, 1]"));
            }
        }
        if !(0.0..=1.0).contains(&self.mtl.tau) {
            return bad(format!("tau {} outside [0, 1]", self.mtl.tau));
        }
        if self.features.delta_order > 2 {
            return bad("features.delta_order must be 0, 1 or 2".into());
        }
        self.train.validate()?;
        if let Some(t) = &self.adapt_train {
            t.validate()?;
        }
        if self.corpus.synthetic.is_none() {
            let c = &self.corpus;
            if [&c.source_train, &c.source_dev, &c.target_train, &c.target_dev, &c.target_test]
                .iter()
                .any(|p| p.is_none())
            {
                return bad("without corpus.synthetic all five manifest paths are required".into());
            }
        }
        Ok(())
    }

    /// Overrides every seed in the config.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.corpus.seed = seed;
        self.train.seed = seed;
        if let Some(t) = &mut self.adapt_train {
            t.seed = seed;
        }
        self
    }

    pub fn adapt_train_config(&self) -> &TrainConfig {
        self.adapt_train.as_ref().unwrap_or(&self.train)
    }
}

/// Independent sub-seed for component `k` of an experiment seeded with `seed`.
pub fn sub_seed(seed: u64, k: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng.next_u64()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    SourceTrain,
    SourceDev,
    TargetTrain,
    TargetDev,
    TargetTest,
}

impl Split {
    pub const ALL: [Split; 5] = [
        Split::SourceTrain,
        Split::SourceDev,
        Split::TargetTrain,
        Split::TargetDev,
        Split::TargetTest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Split::SourceTrain => "source_train",
            Split::SourceDev => "source_dev",
            Split::TargetTrain => "target_train",
            Split::TargetDev => "target_dev",
            Split::TargetTest => "target_test",
        }
    }
}

/// Toy source and target corpora for every split.
pub fn synthesize(cfg: &SyntheticConfig, seed: u64) -> Result<BTreeMap<Split, SynthCorpus>> {
    let source = synth::source_language(synth::default_source_phones(), &cfg.language, sub_seed(seed, 0));
    let target = synth::derive_target(
        &source,
        cfg.rotation_strength,
        &synth::default_target_relabel(),
        sub_seed(seed, 1),
    )?;
    let plan = [
        (Split::SourceTrain, &source, cfg.source_train, "src_tr_"),
        (Split::SourceDev, &source, cfg.source_dev, "src_dv_"),
        (Split::TargetTrain, &target, cfg.target_train, "tgt_tr_"),
        (Split::TargetDev, &target, cfg.target_dev, "tgt_dv_"),
        (Split::TargetTest, &target, cfg.target_test, "tgt_te_"),
    ];
    plan.into_iter()
        .enumerate()
        .map(|(k, (split, spec, n, prefix))| {
            Ok((split, synth::generate_language(spec, n, sub_seed(seed, 10 + k as u64), prefix)?))
        })
        .collect()
}

/// Writes every synthetic split under `dir/<split>/` and returns the manifest
/// paths.
pub fn write_synthetic(cfg: &SyntheticConfig, seed: u64, dir: &Path) -> Result<BTreeMap<Split, PathBuf>> {
    let corpora = synthesize(cfg, seed)?;
    let mut paths = BTreeMap::new();
    for (split, corpus) in corpora {
        let sub = dir.join(split.name());
        corpus.write(&sub)?;
        paths.insert(split, sub.join("manifest.json"));
    }
    Ok(paths)
}

/// Manifest path per split. Synthetic corpora live under `out/data` and are
/// regenerated only when their settings change; otherwise the paths come from
/// the config.
pub fn resolve_corpus(cfg: &ExperimentConfig, out: &Path) -> Result<BTreeMap<Split, PathBuf>> {
    match &cfg.corpus.synthetic {
        Some(s) => {
            let dir = out.join("data");
            let stamp_path = dir.join("synthetic.json");
            let stamp = serde_json::to_string_pretty(&serde_json::json!({
                "seed": cfg.corpus.seed,
                "synthetic": s,
            }))
            .expect("config serializes")
                + "\n";
            let paths: BTreeMap<Split, PathBuf> = Split::ALL
                .into_iter()
                .map(|sp| (sp, dir.join(sp.name()).join("manifest.json")))
                .collect();
            let fresh = fs::read_to_string(&stamp_path).is_ok_and(|t| t == stamp)
                && paths.values().all(|p| p.is_file());
            if !fresh {
                if dir.exists() {
                    fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
                }
                write_synthetic(s, cfg.corpus.seed, &dir)?;
                write_file(&stamp_path, stamp)?;
            }
            Ok(paths)
        }
        None => {
            let c = &cfg.corpus;
            let paths = [&c.source_train, &c.source_dev, &c.target_train, &c.target_dev, &c.target_test];
            Ok(Split::ALL
                .into_iter()
                .zip(paths)
                .map(|(s, p)| (s, p.clone().expect("validated")))
                .collect())
        }
    }
}

/// Deltas, normalization and splicing, in that order.
pub fn preprocess(fm: &FeatureMatrix, cfg: &FeatureConfig) -> Result<FeatureMatrix> {
    let mut out = if cfg.delta_order > 0 {
        features::add_deltas(fm, cfg.delta_order)?
    } else {
        fm.clone()
    };
    if cfg.normalize {
        out = features::normalize(&out)?;
    }
    if cfg.splice_radius > 0 {
        out = features::splice(&out, cfg.splice_radius);
    }
    Ok(out)
}

/// Phone index of every frame: the segment covering the middle of the frame,
/// or the nearest preceding one inside a gap.
pub fn frame_phone_labels(
    segments: &[PhoneSegment],
    inv: &PhoneInventory,
    frames: usize,
    hop: f64,
    utt: &str,
) -> Result<Vec<usize>> {
    if segments.is_empty() {
        return Err(ExperimentError::Missing(format!("utterance '{utt}' has no phone segments")));
    }
    let ids = segments
        .iter()
        .map(|s| {
            inv.index_of(&s.phone).ok_or_else(|| {
                CorpusError::UnknownPhone {
                    phone: s.phone.clone(),
                    utterance: utt.to_string(),
                }
                .into()
            })
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok((0..frames)
        .map(|t| {
            let mid = (t as f64 + 0.5) * hop;
            let k = segments.partition_point(|s| s.start <= mid);
            ids[k.saturating_sub(1)]
        })
        .collect())
}

/// Gold landmark labels from an alignment, expanded when `radius > 0`.
pub fn gold_landmarks(
    segments: &[PhoneSegment],
    inv: &PhoneInventory,
    frames: usize,
    hop: f64,
    radius: usize,
    utt: &str,
) -> Result<FrameLabels> {
    let events = landmarks::segments_to_events(segments, inv, hop, utt)?;
    let fl = landmarks::events_to_frame_labels(&events, frames, hop);
    Ok(if radius > 0 { landmarks::expand_labels(&fl, radius)? } else { fl })
}

/// One utterance ready for training.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedUtt {
    pub utterance: Utterance,
    /// Network input, after preprocessing.
    pub features: FeatureMatrix,
    pub phones: Vec<usize>,
    pub gold: Option<FrameLabels>,
    pub pseudo: Option<PseudoLabels>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inventory: PhoneInventory,
    pub utts: Vec<PreparedUtt>,
}

/// Which landmark targets a batch carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LandmarkTargets {
    None,
    Gold,
    Pseudo,
}

fn thread_pool(threads: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .expect("thread pool")
}

/// Runs `f` over `items` on `threads` workers; results keep input order.
pub fn par_map<T: Sync, R: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> Result<R> + Sync + Send,
) -> Result<Vec<R>> {
    if threads <= 1 {
        return items.iter().map(f).collect();
    }
    thread_pool(threads).install(|| items.par_iter().map(f).collect())
}

/// Raw features of an utterance: its LMFE file, or filterbanks of its audio.
pub fn raw_features(manifest: &Manifest, utt: &Utterance, spec: &FrameSpec) -> Result<FeatureMatrix> {
    if let Some(p) = &utt.features {
        return Ok(features::read_lmfe(manifest.resolve(p))?);
    }
    let audio = utt.audio.as_ref().expect("manifest requires audio or features");
    let (samples, rate) = features::read_wav(manifest.resolve(audio))?;
    if rate != spec.sample_rate {
        return Err(ExperimentError::Config(format!(
            "{} is {rate} Hz, frame spec expects {} Hz",
            audio.display(),
            spec.sample_rate
        )));
    }
    let mut fm = features::fbank(&samples, spec)?;
    fm.meta.utt_id = utt.id.clone();
    Ok(fm)
}

impl Dataset {
    /// Loads features and labels for every utterance of a manifest.
    pub fn load(manifest: &Manifest, cfg: &ExperimentConfig, threads: usize) -> Result<Self> {
        let inventory = manifest.load_inventory()?;
        manifest.check_coverage(&inventory)?;
        let utts = par_map(&manifest.utterances, threads, |utt| {
            let raw = raw_features(manifest, utt, &cfg.features.frame_spec).map_err(|e| e.in_utt(&utt.id))?;
            let mut prepared = prepare_utt(utt.clone(), &raw, &inventory, cfg).map_err(|e| e.in_utt(&utt.id))?;
            if utt.flags.has_gold_landmarks {
                let path = manifest.resolve(utt.landmarks.as_ref().expect("flag checked"));
                let text = fs::read_to_string(&path).map_err(io_err(&path))?;
                let fl = FrameLabels::from_csv(&text, raw.frame_hop)
                    .map_err(|e| ExperimentError::from(e).in_utt(&utt.id))?;
                check_len(fl.len(), raw.frames(), &path)?;
                prepared.gold = Some(fl);
            }
            if utt.flags.has_pseudo_landmarks {
                let path = manifest.resolve(utt.pseudo_landmarks.as_ref().expect("flag checked"));
                let pl = PseudoLabels::read(&path).map_err(|e| ExperimentError::from(e).in_utt(&utt.id))?;
                check_len(pl.len(), raw.frames(), &path)?;
                prepared.pseudo = Some(pl);
            }
            Ok(prepared)
        })?;
        Ok(Self { inventory, utts })
    }

    pub fn load_path(path: impl AsRef<Path>, cfg: &ExperimentConfig, threads: usize) -> Result<Self> {
        Self::load(&Manifest::load(path)?, cfg, threads)
    }

    /// In-memory equivalent of writing a synthetic corpus and loading it.
    pub fn from_synth(corpus: &SynthCorpus, cfg: &ExperimentConfig) -> Result<Self> {
        let utts = corpus
            .utterances
            .iter()
            .map(|su| prepare_utt(su.utterance.clone(), &su.features, &corpus.inventory, cfg))
            .collect::<Result<_>>()?;
        Ok(Self {
            inventory: corpus.inventory.clone(),
            utts,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.utts.first().map_or(0, |u| u.features.dim())
    }

    pub fn frames(&self) -> usize {
        self.utts.iter().map(|u| u.features.frames()).sum()
    }

    /// Utterances kept by a speaker-balanced subsample.
    pub fn subsample(&self, fraction: f64, seed: u64) -> Result<Self> {
        let manifest = Manifest::new("", self.utts.iter().map(|u| u.utterance.clone()).collect());
        let kept: HashSet<String> = corpus::subsample(&manifest, fraction, seed)?
            .utterances
            .into_iter()
            .map(|u| u.id)
            .collect();
        Ok(Self {
            inventory: self.inventory.clone(),
            utts: self.utts.iter().filter(|u| kept.contains(&u.utterance.id)).cloned().collect(),
        })
    }

    pub fn batch(&self, targets: LandmarkTargets) -> Result<LabeledBatch> {
        let parts = self
            .utts
            .iter()
            .map(|u| {
                let n = u.features.frames();
                let mut b = LabeledBatch::new(u.features.data.clone(), u.phones.clone(), vec![None; n]);
                match targets {
                    LandmarkTargets::None => {}
                    LandmarkTargets::Gold => {
                        let g = u.gold.as_ref().ok_or_else(|| {
                            ExperimentError::Missing(format!("utterance '{}' has no landmark labels", u.utterance.id))
                        })?;
                        b.landmark = g.labels.iter().map(|c| Some(c.index())).collect();
                    }
                    LandmarkTargets::Pseudo => {
                        let p = u.pseudo.as_ref().ok_or_else(|| {
                            ExperimentError::Missing(format!("utterance '{}' has no pseudo-labels", u.utterance.id))
                        })?;
                        b.landmark = p.classes.iter().map(|&c| Some(c)).collect();
                        b.confidence = p.confidences.clone();
                    }
                }
                Ok(b)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LabeledBatch::concat(&parts))
    }
}

fn check_len(got: usize, frames: usize, path: &Path) -> Result<()> {
    if got != frames {
        return Err(ExperimentError::Missing(format!(
            "{} has {got} frames, features have {frames}",
            path.display()
        )));
    }
    Ok(())
}

fn prepare_utt(utterance: Utterance, raw: &FeatureMatrix, inv: &PhoneInventory, cfg: &ExperimentConfig) -> Result<PreparedUtt> {
    let frames = raw.frames();
    let hop = raw.frame_hop;
    let phones = frame_phone_labels(&utterance.segments, inv, frames, hop, &utterance.id)?;
    let gold = gold_landmarks(&utterance.segments, inv, frames, hop, cfg.landmarks.expand_radius, &utterance.id)?;
    let features = preprocess(raw, &cfg.features)?;
    Ok(PreparedUtt {
        utterance,
        features,
        phones,
        gold: Some(gold),
        pseudo: None,
    })
}

fn landmark_weights(batch: &LabeledBatch, cfg: &ExperimentConfig) -> Result<Option<ClassWeights>> {
    if !cfg.landmarks.class_weighting || !batch.has_landmarks() {
        return Ok(None);
    }
    let labels: Vec<usize> = batch.landmark.iter().flatten().copied().collect();
    Ok(Some(ClassWeights::from_indices(&labels, LandmarkClass::COUNT)?))
}

/// One source model of the alpha sweep.
#[derive(Clone, Debug)]
pub struct AlphaRun {
    pub alpha: f64,
    pub net: MTLNet,
    pub history: History,
    pub dev_phone_fer: f64,
    pub dev_landmark_fer: f64,
}

#[derive(Clone, Debug)]
pub struct SourceOutcome {
    pub runs: Vec<AlphaRun>,
    /// Index into `runs` of the single-task (alpha = 0) model.
    pub baseline: usize,
    /// Index into `runs` of the selected multi-task model.
    pub selected: usize,
}

impl SourceOutcome {
    pub fn baseline_run(&self) -> &AlphaRun {
        &self.runs[self.baseline]
    }

    pub fn selected_run(&self) -> &AlphaRun {
        &self.runs[self.selected]
    }

    pub fn summary(&self) -> SourceSummary {
        SourceSummary {
            metric: "frame error rate".into(),
            runs: self
                .runs
                .iter()
                .map(|r| SweepEntry {
                    alpha: r.alpha,
                    dev_phone_fer: r.dev_phone_fer,
                    dev_landmark_fer: r.dev_landmark_fer,
                    epochs: r.history.epochs.len(),
                })
                .collect(),
            baseline_alpha: self.baseline_run().alpha,
            selected_alpha: self.selected_run().alpha,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub alpha: f64,
    pub dev_phone_fer: f64,
    pub dev_landmark_fer: f64,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceSummary {
    pub metric: String,
    pub runs: Vec<SweepEntry>,
    pub baseline_alpha: f64,
    pub selected_alpha: f64,
}

fn new_net(cfg: &ExperimentConfig, input_dim: usize, phones: usize, seed: u64) -> MTLNet {
    MTLNet::new(input_dim, &cfg.net.hidden, phones, LandmarkClass::COUNT, cfg.net.activation, seed)
}

/// Trains the single-task baseline and one multi-task model per candidate
/// alpha on the source language. The multi-task model with the lowest dev
/// phone error among the nonzero alphas is selected; a lone candidate is used
/// directly.
pub fn train_source(cfg: &ExperimentConfig, train: &Dataset, dev: &Dataset) -> Result<SourceOutcome> {
    let train_batch = train.batch(LandmarkTargets::Gold)?;
    let dev_batch = dev.batch(LandmarkTargets::Gold)?;
    let weights = landmark_weights(&train_batch, cfg)?;
    let init = new_net(cfg, train.input_dim(), train.inventory.len(), sub_seed(cfg.train.seed, 100));
    let mut alphas = cfg.mtl.candidates();
    if !alphas.contains(&0.0) {
        alphas.insert(0, 0.0);
    }
    let mut runs = Vec::with_capacity(alphas.len());
    for alpha in alphas {
        let lcfg = MTLLossConfig {
            alpha,
            phone_class_weights: None,
            landmark_class_weights: weights.clone(),
            use_confidence: false,
        };
        let (net, history) = net::train(init.clone(), &train_batch, &dev_batch, &cfg.train, &lcfg)?;
        let dev_phone_fer = net::frame_error(&net, &dev_batch, Task::Phone)?.rate;
        let dev_landmark_fer = net::frame_error(&net, &dev_batch, Task::Landmark)?.rate;
        runs.push(AlphaRun {
            alpha,
            net,
            history,
            dev_phone_fer,
            dev_landmark_fer,
        });
    }
    let baseline = runs.iter().position(|r| r.alpha == 0.0).expect("alpha 0 is always trained");
    let candidates = cfg.mtl.candidates();
    let selected = if candidates.len() == 1 {
        runs.iter().position(|r| r.alpha == candidates[0]).expect("trained")
    } else {
        runs.iter()
            .enumerate()
            .filter(|(_, r)| r.alpha > 0.0)
            .min_by(|a, b| a.1.dev_phone_fer.total_cmp(&b.1.dev_phone_fer))
            .map_or(baseline, |(i, _)| i)
    };
    Ok(SourceOutcome { runs, baseline, selected })
}

/// Attaches pseudo-labels from `net`'s landmark head to every utterance.
pub fn cascade_dataset(net: &MTLNet, ds: &mut Dataset, tau: f64, threads: usize) -> Result<()> {
    let labels = par_map(&ds.utts, threads, |u| {
        let det = cascade::detect(net, &u.features).map_err(|e| ExperimentError::from(e).in_utt(&u.utterance.id))?;
        Ok(cascade::make_pseudo_labels(&det, tau)?)
    })?;
    for (u, pl) in ds.utts.iter_mut().zip(labels) {
        u.pseudo = Some(pl);
    }
    Ok(())
}

/// Replaces pseudo-labels with gold labels in which a `flip_fraction` share of
/// frames is moved to a different random class. Flipped frames get confidence
/// in [0, 0.2), intact frames in [0.8, 1].
pub fn corrupt_pseudo_labels(ds: &mut Dataset, flip_fraction: f64, seed: u64) -> Result<()> {
    for (i, u) in ds.utts.iter_mut().enumerate() {
        let gold = u.gold.as_ref().ok_or_else(|| {
            ExperimentError::Missing(format!("utterance '{}' has no landmark labels", u.utterance.id))
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut classes = Vec::with_capacity(gold.len());
        let mut confidences = Vec::with_capacity(gold.len());
        for c in &gold.labels {
            if rng.random_bool(flip_fraction) {
                let shift = rng.random_range(1..LandmarkClass::COUNT);
                classes.push((c.index() + shift) % LandmarkClass::COUNT);
                confidences.push(rng.random_range(0.0..0.2));
            } else {
                classes.push(c.index());
                confidences.push(rng.random_range(0.8..=1.0));
            }
        }
        u.pseudo = Some(PseudoLabels { classes, confidences });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum System {
    Baseline,
    Mtl,
    MtlConfidence,
}

impl System {
    pub const ALL: [System; 3] = [System::Baseline, System::Mtl, System::MtlConfidence];

    pub fn name(self) -> &'static str {
        match self {
            System::Baseline => "baseline",
            System::Mtl => "mtl",
            System::MtlConfidence => "mtl_confidence",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptRow {
    pub fraction: f64,
    pub system: System,
    pub alpha: f64,
    pub use_confidence: bool,
    pub train_utterances: usize,
    pub train_frames: usize,
    pub dev_phone_fer: f64,
    pub test_phone_fer: f64,
}

#[derive(Clone, Debug)]
pub struct AdaptRun {
    pub row: AdaptRow,
    pub net: MTLNet,
    pub history: History,
}

/// Trains the three target systems for one data fraction. All three start
/// from the same transfer-initialized network and see the same subsample.
#[allow(clippy::too_many_arguments)]
/// Source networks each adapted system starts from: the baseline is
/// transferred from the single-task source net, the MTL systems from the
/// MTL source net that also produced the pseudo-labels.
#[derive(Clone, Copy)]
pub struct AdaptSources<'a> {
    pub baseline: &'a MTLNet,
    pub mtl: &'a MTLNet,
}

pub fn adapt_fraction(
    cfg: &ExperimentConfig,
    sources: AdaptSources<'_>,
    alpha: f64,
    train: &Dataset,
    dev: &Dataset,
    test: &Dataset,
    fraction: f64,
    systems: &[System],
) -> Result<Vec<AdaptRun>> {
    let seed = cfg.corpus.seed;
    let subset = train.subsample(fraction, sub_seed(seed, 200))?;
    let train_batch = subset.batch(LandmarkTargets::Pseudo)?;
    let dev_batch = dev.batch(LandmarkTargets::None)?;
    let test_batch = test.batch(LandmarkTargets::None)?;
    let weights = landmark_weights(&train_batch, cfg)?;
    let init_seed = sub_seed(seed, 201);
    let classes = train.inventory.len();
    let base_init = cascade::transfer_init(sources.baseline, classes, train.input_dim(), init_seed)?;
    let mtl_init = cascade::transfer_init(sources.mtl, classes, train.input_dim(), init_seed)?;
    let tcfg = cfg.adapt_train_config();
    systems
        .iter()
        .map(|&system| {
            let (a, conf) = match system {
                System::Baseline => (0.0, false),
                System::Mtl => (alpha, false),
                System::MtlConfidence => (alpha, true),
            };
            let lcfg = MTLLossConfig {
                alpha: a,
                phone_class_weights: None,
                landmark_class_weights: weights.clone(),
                use_confidence: conf,
            };
            let init = if system == System::Baseline { &base_init } else { &mtl_init };
            let (net, history) = net::train(init.clone(), &train_batch, &dev_batch, tcfg, &lcfg)?;
            let row = AdaptRow {
                fraction,
                system,
                alpha: a,
                use_confidence: conf,
                train_utterances: subset.utts.len(),
                train_frames: train_batch.len(),
                dev_phone_fer: net::frame_error(&net, &dev_batch, Task::Phone)?.rate,
                test_phone_fer: net::frame_error(&net, &test_batch, Task::Phone)?.rate,
            };
            Ok(AdaptRun { row, net, history })
        })
        .collect()
}

/// Relative improvement of `system` over `baseline`, in percent.
pub fn relative_improvement(baseline: f64, system: f64) -> f64 {
    if baseline == 0.0 {
        0.0
    } else {
        100.0 * (baseline - system) / baseline
    }
}

/// Comparison table as CSV, aligned text and a per-fraction trend CSV.
pub struct Report {
    pub csv: String,
    pub text: String,
    pub trend: String,
}

fn sorted_fractions(rows: &[AdaptRow]) -> Vec<f64> {
    let mut f: Vec<f64> = rows.iter().map(|r| r.fraction).collect();
    f.sort_by(|a, b| b.total_cmp(a));
    f.dedup();
    f
}

pub fn render_report(rows: &[AdaptRow]) -> Report {
    let fractions = sorted_fractions(rows);
    let find = |f: f64, s: System| rows.iter().find(|r| r.fraction == f && r.system == s);
    let mut csv = String::from("fraction,system,alpha,train_frames,test_phone_fer,rel_improvement_pct\n");
    let mut table: Vec<[String; 6]> = vec![[
        "fraction".into(),
        "system".into(),
        "alpha".into(),
        "train frames".into(),
        "phone FER %".into(),
        "rel. impr. %".into(),
    ]];
    let mut trend = String::from("fraction,baseline_fer,mtl_fer,mtl_confidence_fer,mtl_gain_pct,mtl_confidence_gain_pct\n");
    for &f in &fractions {
        let base = find(f, System::Baseline).map(|r| r.test_phone_fer);
        for s in System::ALL {
            let Some(r) = find(f, s) else { continue };
            let rel = base.map(|b| relative_improvement(b, r.test_phone_fer));
            let rel_s = rel.map_or(String::new(), |v| format!("{v:.2}"));
            csv.push_str(&format!(
                "{f},{},{},{},{:.6},{rel_s}\n",
                s.name(),
                r.alpha,
                r.train_frames,
                r.test_phone_fer
            ));
            table.push([
                format!("{f}"),
                s.name().into(),
                format!("{}", r.alpha),
                r.train_frames.to_string(),
                format!("{:.2}", 100.0 * r.test_phone_fer),
                rel_s,
            ]);
        }
        let fer = |s| find(f, s).map_or(String::new(), |r| format!("{:.6}", r.test_phone_fer));
        let gain = |s| match (base, find(f, s)) {
            (Some(b), Some(r)) => format!("{:.2}", relative_improvement(b, r.test_phone_fer)),
            _ => String::new(),
        };
        trend.push_str(&format!(
            "{f},{},{},{},{},{}\n",
            fer(System::Baseline),
            fer(System::Mtl),
            fer(System::MtlConfidence),
            gain(System::Mtl),
            gain(System::MtlConfidence)
        ));
    }
    let widths: Vec<usize> = (0..6).map(|c| table.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
    let mut text = String::from("Target-language phone frame error rate (FER, not WER)\n");
    for (i, row) in table.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (cell, &w))| if c < 2 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
            .collect();
        text.push_str(line.join("  ").trim_end());
        text.push('\n');
        if i == 0 {
            text.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            text.push('\n');
        }
    }
    Report { csv, text, trend }
}

/// Path of `target` relative to directory `base`, when both can be
/// canonicalized; `target` unchanged otherwise.
pub fn relative_path(target: &Path, base: &Path) -> PathBuf {
    let (Ok(t), Ok(b)) = (target.canonicalize(), base.canonicalize()) else {
        return target.to_path_buf();
    };
    let tc: Vec<Component> = t.components().collect();
    let bc: Vec<Component> = b.components().collect();
    let common = tc.iter().zip(&bc).take_while(|(x, y)| x == y).count();
    let mut out = PathBuf::new();
    for _ in common..bc.len() {
        out.push("..");
    }
    for c in &tc[common..] {
        out.push(c.as_os_str());
    }
    out
}

/// Writes one `.plk.csv` per utterance under `dir/pseudo/` and a manifest
/// `dir/manifest.json` that references them alongside the original files.
pub fn write_pseudo_manifest(source: &Manifest, ds: &Dataset, dir: &Path) -> Result<PathBuf> {
    let pseudo_dir = dir.join("pseudo");
    fs::create_dir_all(&pseudo_dir).map_err(io_err(&pseudo_dir))?;
    let rebase = |p: &Path| relative_path(&source.resolve(p), dir);
    let mut utts = Vec::with_capacity(ds.utts.len());
    for (orig, prepared) in source.utterances.iter().zip(&ds.utts) {
        let pl = prepared.pseudo.as_ref().ok_or_else(|| {
            ExperimentError::Missing(format!("utterance '{}' has no pseudo-labels", orig.id))
        })?;
        let rel = PathBuf::from("pseudo").join(format!("{}.plk.csv", orig.id));
        write_file(&dir.join(&rel), pl.to_csv())?;
        let mut u = orig.clone();
        u.audio = u.audio.as_deref().map(rebase);
        u.features = u.features.as_deref().map(rebase);
        u.phn = u.phn.as_deref().map(rebase);
        u.landmarks = u.landmarks.as_deref().map(rebase);
        u.pseudo_landmarks = Some(rel);
        u.flags.has_pseudo_landmarks = true;
        utts.push(u);
    }
    let manifest = Manifest::new(rebase(&source.inventory), utts);
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}

/// Median of a nonempty sample.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Target-test phone error per (fraction, system) for one seed, with the
/// whole pipeline run in memory.
#[derive(Clone, Debug)]
pub struct SeedResult {
    pub seed: u64,
    pub selected_alpha: f64,
    pub rows: Vec<AdaptRow>,
}

/// Synthesizes, trains the source models, cascades and adapts for one seed
/// without touching the file system.
pub fn run_in_memory(cfg: &ExperimentConfig, seed: u64) -> Result<SeedResult> {
    run_in_memory_with(cfg, seed, None, &System::ALL)
}

/// As [`run_in_memory`], optionally flipping `corrupt` of the pseudo-labels
/// before adaptation and training only `systems`.
pub fn run_in_memory_with(
    cfg: &ExperimentConfig,
    seed: u64,
    corrupt: Option<f64>,
    systems: &[System],
) -> Result<SeedResult> {
    let cfg = cfg.clone().with_seed(seed);
    let syn = cfg
        .corpus
        .synthetic
        .as_ref()
        .ok_or_else(|| ExperimentError::Config("in-memory runs need corpus.synthetic".into()))?;
    let corpora = synthesize(syn, seed)?;
    let ds = |s: Split| Dataset::from_synth(&corpora[&s], &cfg);
    let source = train_source(&cfg, &ds(Split::SourceTrain)?, &ds(Split::SourceDev)?)?;
    let mtl = source.selected_run();
    let mut target_train = ds(Split::TargetTrain)?;
    cascade_dataset(&mtl.net, &mut target_train, cfg.mtl.tau, 1)?;
    if let Some(flip) = corrupt {
        corrupt_pseudo_labels(&mut target_train, flip, sub_seed(seed, 300))?;
    }
    let dev = ds(Split::TargetDev)?;
    let test = ds(Split::TargetTest)?;
    let mut rows = Vec::new();
    for &f in &cfg.corpus.fractions {
        let sources = AdaptSources { baseline: &source.baseline_run().net, mtl: &mtl.net };
        for run in adapt_fraction(&cfg, sources, mtl.alpha, &target_train, &dev, &test, f, systems)? {
            rows.push(run.row);
        }
    }
    Ok(SeedResult {
        seed,
        selected_alpha: mtl.alpha,
        rows,
    })
}
