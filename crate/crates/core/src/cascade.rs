//! Cross-language landmark detection and pseudo-labels.
//!
//! The landmark head of a source-language network is run over target-language
//! features. Each frame keeps its argmax class `m` and a margin confidence
//!
//! ```text
//! c = P_m - sum_{k != m} P_k / (C - 1)
//! ```
//!
//! which is 1 for a one-hot posterior and 0 for a uniform one.

use std::path::Path;

use ndarray::ArrayView1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::features::FeatureMatrix;
use crate::net::{argmax, Dense, MTLNet, NetError};

#[derive(Debug, Error)]
pub enum CascadeError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("confidence needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("posterior is not a distribution (sum {sum})")]
    NotNormalized { sum: f64 },
    #[error("target phone inventory needs at least 2 classes, got {0}")]
    TooFewPhones(usize),
    #[error("target features have {got} dims, source network expects {expected}")]
    FeatureDim { expected: usize, got: usize },
    #[error("threshold {0} outside [0, 1]")]
    BadThreshold(f64),
    #[error("pseudo-label file line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CascadeError>;

/// Detector output for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub posterior: Vec<f64>,
    pub class: usize,
    pub confidence: f64,
}

const SUM_TOLERANCE: f64 = 1e-6;

/// Margin confidence of a posterior, by direct summation over the non-max
/// entries.
pub fn confidence(p: &[f64]) -> Result<f64> {
    let c = p.len();
    if c < 2 {
        return Err(CascadeError::TooFewClasses(c));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SUM_TOLERANCE || p.iter().any(|&v| !(v >= 0.0)) {
        return Err(CascadeError::NotNormalized { sum });
    }
    let m = argmax(ArrayView1::from(p));
    let rest: f64 = p.iter().enumerate().filter(|&(k, _)| k != m).map(|(_, v)| v).sum();
    Ok((p[m] - rest / (c - 1) as f64).clamp(0.0, 1.0))
}

/// Landmark-head detections, one per frame. The phone head is not evaluated.
pub fn detect(net: &MTLNet, fm: &FeatureMatrix) -> Result<Vec<Detection>> {
    if fm.dim() != net.input_dim() {
        return Err(NetError::DimensionMismatch {
            expected: net.input_dim(),
            got: fm.dim(),
        }
        .into());
    }
    let p = net.landmark_posteriors(fm.data.view())?;
    p.rows()
        .into_iter()
        .map(|row| {
            let posterior = row.to_vec();
            Ok(Detection {
                class: argmax(row),
                confidence: confidence(&posterior)?,
                posterior,
            })
        })
        .collect()
}

/// One utterance's pseudo-labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabels {
    pub classes: Vec<usize>,
    pub confidences: Vec<f64>,
}

impl PseudoLabels {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// `frame,class,confidence` with six decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame,class,confidence\n");
        for (i, (k, c)) in self.classes.iter().zip(&self.confidences).enumerate() {
            out.push_str(&format!("{i},{k},{c:.6}\n"));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "frame,class,confidence" => {}
            _ => {
                return Err(CascadeError::Parse {
                    line: 1,
                    reason: "expected header frame,class,confidence".into(),
                })
            }
        }
        let mut out = PseudoLabels {
            classes: Vec::new(),
            confidences: Vec::new(),
        };
        for (i, raw) in lines {
            let line = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let bad = |reason: &str| CascadeError::Parse {
                line,
                reason: reason.to_string(),
            };
            let fields: Vec<&str> = raw.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(bad("expected 3 fields"));
            }
            let frame: usize = fields[0].parse().map_err(|_| bad("bad frame index"))?;
            if frame != out.classes.len() {
                return Err(bad("frames must be consecutive from 0"));
            }
            let class: usize = fields[1].parse().map_err(|_| bad("bad class index"))?;
            let conf: f64 = fields[2].parse().map_err(|_| bad("bad confidence"))?;
            if !(0.0..=1.0).contains(&conf) {
                return Err(bad("confidence outside [0, 1]"));
            }
            out.classes.push(class);
            out.confidences.push(conf);
        }
        Ok(out)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

/// Keeps every frame's argmax class. Confidences below `tau` become 0;
/// `tau = 0` keeps them all.
pub fn make_pseudo_labels(detections: &[Detection], tau: f64) -> Result<PseudoLabels> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(CascadeError::BadThreshold(tau));
    }
    Ok(PseudoLabels {
        classes: detections.iter().map(|d| d.class).collect(),
        confidences: detections
            .iter()
            .map(|d| if d.confidence < tau { 0.0 } else { d.confidence })
            .collect(),
    })
}

/// Target network seeded from a source network: the trunk and landmark head
/// are copied, the phone head is freshly initialized with `target_phones`
/// outputs.
pub fn transfer_init(
    source: &MTLNet,
    target_phones: usize,
    target_input_dim: usize,
    seed: u64,
) -> Result<MTLNet> {
    if target_phones < 2 {
        return Err(CascadeError::TooFewPhones(target_phones));
    }
    if target_input_dim != source.input_dim() {
        return Err(CascadeError::FeatureDim {
            expected: source.input_dim(),
            got: target_input_dim,
        });
    }
    let width = source.phone_head.inputs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(MTLNet {
        hidden: source.hidden.clone(),
        phone_head: Dense::glorot(width, target_phones, &mut rng),
        landmark_head: source.landmark_head.clone(),
        activation: source.activation,
    })
}
