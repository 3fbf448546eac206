//! Rule-based landmark labels derived from phone alignments.
//!
//! Each phone contributes landmark events according to its manner of
//! articulation:
//!
//! | manner        | events                              |
//! |---------------|-------------------------------------|
//! | Vowel         | `V` at the midpoint                 |
//! | Glide         | `G` at the midpoint                 |
//! | Fricative     | `Fc` at start, `Fr` at end          |
//! | Affricate     | `Sr` at start, `Fc` one hop later, `Fr` at end |
//! | Nasal         | `Nc` at start, `Nr` at end          |
//! | Stop closure  | `Sc` at start, `Sr` at end          |
//! | Other         | none                                |
//!
//! Events are quantized onto frames, optionally widened by a few frames on
//! each side, and weighted by inverse class support for training.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{manner_of, CorpusError, Manner, PhoneInventory, PhoneSegment, Utterance};

#[derive(Debug, Error)]
pub enum LandmarkError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("labels are already expanded")]
    AlreadyExpanded,
    #[error("no frames to weight")]
    Empty,
    #[error("class index {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },
    #[error("events are not sorted by time (event {0})")]
    Unsorted(usize),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, LandmarkError>;

/// The landmark alphabet, in head-output order. `E` means no landmark.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum LandmarkClass {
    #[default]
    E = 0,
    V = 1,
    G = 2,
    Fc = 3,
    Fr = 4,
    Sc = 5,
    Sr = 6,
    Nc = 7,
    Nr = 8,
}

impl LandmarkClass {
    pub const COUNT: usize = 9;
    pub const ALL: [LandmarkClass; 9] = [
        LandmarkClass::E,
        LandmarkClass::V,
        LandmarkClass::G,
        LandmarkClass::Fc,
        LandmarkClass::Fr,
        LandmarkClass::Sc,
        LandmarkClass::Sr,
        LandmarkClass::Nc,
        LandmarkClass::Nr,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn symbol(self) -> &'static str {
        match self {
            LandmarkClass::E => "E",
            LandmarkClass::V => "V",
            LandmarkClass::G => "G",
            LandmarkClass::Fc => "Fc",
            LandmarkClass::Fr => "Fr",
            LandmarkClass::Sc => "Sc",
            LandmarkClass::Sr => "Sr",
            LandmarkClass::Nc => "Nc",
            LandmarkClass::Nr => "Nr",
        }
    }
}

impl fmt::Display for LandmarkClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

impl FromStr for LandmarkClass {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.symbol().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown landmark class '{s}'"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LandmarkEvent {
    pub time: f64,
    pub class: LandmarkClass,
    pub source_segment: usize,
}

/// Events contributed by a single segment of the given manner.
pub fn manner_events(manner: Manner, start: f64, end: f64, hop: f64) -> Vec<(f64, LandmarkClass)> {
    use LandmarkClass::*;
    let middle = 0.5 * (start + end);
    match manner {
        Manner::Vowel => vec![(middle, V)],
        Manner::Glide => vec![(middle, G)],
        Manner::Fricative => vec![(start, Fc), (end, Fr)],
        Manner::Nasal => vec![(start, Nc), (end, Nr)],
        Manner::StopClosure => vec![(start, Sc), (end, Sr)],
        Manner::Affricate => vec![(start, Sr), ((start + hop).min(end), Fc), (end, Fr)],
        Manner::Other => Vec::new(),
    }
}

/// Applies the manner rules to every segment. `hop` staggers the affricate's
/// frication onset one frame after its release. Output is sorted by time, then
/// source segment, then class.
pub fn segments_to_events(
    segments: &[PhoneSegment],
    inv: &PhoneInventory,
    hop: f64,
    utterance: &str,
) -> Result<Vec<LandmarkEvent>> {
    let mut events = Vec::new();
    for (idx, seg) in segments.iter().enumerate() {
        let manner = manner_of(&seg.phone, inv, utterance)?;
        events.extend(
            manner_events(manner, seg.start, seg.end, hop)
                .into_iter()
                .map(|(time, class)| LandmarkEvent {
                    time,
                    class,
                    source_segment: idx,
                }),
        );
    }
    sort_events(&mut events);
    Ok(events)
}

pub fn sort_events(events: &mut [LandmarkEvent]) {
    events.sort_by(|a, b| {
        a.time
            .total_cmp(&b.time)
            .then(a.source_segment.cmp(&b.source_segment))
            .then(a.class.cmp(&b.class))
    });
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameLabels {
    pub labels: Vec<LandmarkClass>,
    pub frame_hop: f64,
    pub expanded: bool,
}

impl FrameLabels {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn landmark_count(&self) -> usize {
        self.labels.iter().filter(|&&c| c != LandmarkClass::E).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.labels.iter().map(|c| c.index()).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame,class\n");
        for (i, c) in self.labels.iter().enumerate() {
            out.push_str(&format!("{i},{c}\n"));
        }
        out
    }

    /// Parses a `frame,class` label file. Frames must be listed in order.
    pub fn from_csv(text: &str, frame_hop: f64) -> Result<Self> {
        let mut labels = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = line.trim();
            if line.is_empty() || (idx == 0 && line.starts_with("frame")) {
                continue;
            }
            let (frame, class) = line.split_once(',').ok_or_else(|| LandmarkError::Parse {
                line: line_no,
                reason: "expected 'frame,class'".into(),
            })?;
            let frame: usize = frame.trim().parse().map_err(|_| LandmarkError::Parse {
                line: line_no,
                reason: format!("bad frame index '{frame}'"),
            })?;
            if frame != labels.len() {
                return Err(LandmarkError::Parse {
                    line: line_no,
                    reason: format!("expected frame {}, found {frame}", labels.len()),
                });
            }
            let class = class
                .trim()
                .parse()
                .map_err(|reason| LandmarkError::Parse { line: line_no, reason })?;
            labels.push(class);
        }
        Ok(Self {
            labels,
            frame_hop,
            expanded: false,
        })
    }
}

/// Index of the frame whose center `(i + 0.5) * hop` is nearest `time`.
/// Equidistant times (exact frame edges) go to the later frame.
pub fn frame_of(time: f64, hop: f64, frames: usize) -> usize {
    let raw = (time / hop + 1e-9).floor();
    if raw <= 0.0 {
        0
    } else {
        (raw as usize).min(frames.saturating_sub(1))
    }
}

/// Quantizes events onto `frames` frames. When two events land on one frame
/// the earlier event in the (sorted) list keeps it.
pub fn events_to_frame_labels(events: &[LandmarkEvent], frames: usize, hop: f64) -> FrameLabels {
    assert!(frames >= 1 && hop > 0.0, "need at least one frame and a positive hop");
    let mut labels = vec![LandmarkClass::E; frames];
    for ev in events {
        let f = frame_of(ev.time, hop, frames);
        if labels[f] == LandmarkClass::E {
            labels[f] = ev.class;
        }
    }
    FrameLabels {
        labels,
        frame_hop: hop,
        expanded: false,
    }
}

pub const DEFAULT_EXPAND_RADIUS: usize = 2;

/// Spreads every landmark frame over `radius` neighbours on each side. A frame
/// reachable from several landmarks takes the nearest one; equal distances go
/// to the lower-index landmark.
pub fn expand_labels(fl: &FrameLabels, radius: usize) -> Result<FrameLabels> {
    if fl.expanded {
        return Err(LandmarkError::AlreadyExpanded);
    }
    let n = fl.labels.len();
    let mut out = fl.labels.clone();
    let sources: Vec<usize> = (0..n).filter(|&i| fl.labels[i] != LandmarkClass::E).collect();
    for (frame, slot) in out.iter_mut().enumerate() {
        // sources are ascending, so the first minimum is the lower index
        let lo = sources.partition_point(|&s| s + radius < frame);
        let best = sources[lo..]
            .iter()
            .take_while(|&&s| s <= frame + radius)
            .min_by_key(|&&s| s.abs_diff(frame));
        if let Some(&s) = best {
            *slot = fl.labels[s];
        }
    }
    Ok(FrameLabels {
        labels: out,
        frame_hop: fl.frame_hop,
        expanded: true,
    })
}

/// Per-class loss weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub w: Vec<f64>,
}

impl ClassWeights {
    pub fn unit(classes: usize) -> Self {
        Self {
            w: vec![1.0; classes],
        }
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    /// Weights proportional to `1 / count`, scaled to mean 1 over the classes
    /// that occur. Absent classes get weight 0.
    pub fn inverse_support(counts: &[usize]) -> Result<Self> {
        let present: Vec<f64> = counts.iter().filter(|&&c| c > 0).map(|&c| 1.0 / c as f64).collect();
        if present.is_empty() {
            return Err(LandmarkError::Empty);
        }
        let scale = present.len() as f64 / present.iter().sum::<f64>();
        let w = counts
            .iter()
            .map(|&c| if c > 0 { scale / c as f64 } else { 0.0 })
            .collect();
        Ok(Self { w })
    }

    /// Inverse-support weights from class indices in `0..classes`.
    pub fn from_indices<'a>(
        labels: impl IntoIterator<Item = &'a usize>,
        classes: usize,
    ) -> Result<Self> {
        let mut counts = vec![0usize; classes];
        for &l in labels {
            *counts
                .get_mut(l)
                .ok_or(LandmarkError::ClassOutOfRange { index: l, classes })? += 1;
        }
        Self::inverse_support(&counts)
    }
}

/// Inverse-support weights over all frames of all utterances.
pub fn class_weights(labels: &[FrameLabels], classes: usize) -> Result<ClassWeights> {
    let mut counts = vec![0usize; classes];
    for fl in labels {
        for &c in &fl.labels {
            let i = c.index();
            *counts
                .get_mut(i)
                .ok_or(LandmarkError::ClassOutOfRange { index: i, classes })? += 1;
        }
    }
    ClassWeights::inverse_support(&counts)
}

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

/// Renders a Praat long-form TextGrid with a single point tier `landmarks`.
pub fn export_textgrid(utt: &Utterance, events: &[LandmarkEvent]) -> Result<String> {
    if let Some(i) = (1..events.len()).find(|&i| events[i].time < events[i - 1].time) {
        return Err(LandmarkError::Unsorted(i));
    }
    let xmax = events
        .last()
        .map_or(0.0, |e| e.time)
        .max(utt.duration());
    let mut out = String::new();
    out.push_str("File type = \"ooTextFile\"\nObject class = \"TextGrid\"\n\n");
    out.push_str(&format!("xmin = 0\nxmax = {xmax}\ntiers? <exists>\nsize = 1\nitem []:\n"));
    out.push_str("    item [1]:\n        class = \"TextTier\"\n");
    out.push_str(&format!("        name = {}\n", quote("landmarks")));
    out.push_str(&format!("        xmin = 0\n        xmax = {xmax}\n"));
    out.push_str(&format!("        points: size = {}\n", events.len()));
    for (i, ev) in events.iter().enumerate() {
        out.push_str(&format!("        points [{}]:\n", i + 1));
        out.push_str(&format!("            number = {}\n", ev.time));
        out.push_str(&format!("            mark = {}\n", quote(ev.class.symbol())));
    }
    Ok(out)
}

/// A point tier read back from a TextGrid.
#[derive(Clone, Debug, PartialEq)]
pub struct PointTier {
    pub name: String,
    pub xmin: f64,
    pub xmax: f64,
    pub points: Vec<(f64, String)>,
}

/// Reads the point tiers of a long-form TextGrid. Interval tiers are skipped.
pub fn parse_textgrid(text: &str) -> Result<Vec<PointTier>> {
    let mut tiers = Vec::new();
    let mut current: Option<PointTier> = None;
    let mut in_point_tier = false;
    let mut pending_time: Option<f64> = None;
    let err = |line: usize, reason: &str| LandmarkError::Parse {
        line,
        reason: reason.to_string(),
    };
    let unquote = |v: &str| -> String {
        let v = v.trim();
        v.strip_prefix('"')
            .and_then(|v| v.strip_suffix('"'))
            .unwrap_or(v)
            .replace("\"\"", "\"")
    };
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        let Some((key, value)) = trimmed.split_once('=') else {
            continue;
        };
        let key = key.trim();
        let num = |v: &str| v.trim().parse::<f64>().map_err(|_| err(line, "bad number"));
        match key {
            "class" => {
                if let Some(t) = current.take() {
                    tiers.push(t);
                }
                in_point_tier = unquote(value) == "TextTier";
                if in_point_tier {
                    current = Some(PointTier {
                        name: String::new(),
                        xmin: 0.0,
                        xmax: 0.0,
                        points: Vec::new(),
                    });
                }
            }
            "name" if in_point_tier => {
                if let Some(t) = current.as_mut() {
                    t.name = unquote(value);
                }
            }
            "xmin" if in_point_tier => {
                if let Some(t) = current.as_mut() {
                    t.xmin = num(value)?;
                }
            }
            "xmax" if in_point_tier => {
                if let Some(t) = current.as_mut() {
                    t.xmax = num(value)?;
                }
            }
            "number" | "time" if in_point_tier => pending_time = Some(num(value)?),
            "mark" if in_point_tier => {
                let time = pending_time.take().ok_or_else(|| err(line, "mark without time"))?;
                if let Some(t) = current.as_mut() {
                    t.points.push((time, unquote(value)));
                }
            }
            _ => {}
        }
    }
    if let Some(t) = current.take() {
        tiers.push(t);
    }
    Ok(tiers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use LandmarkClass::*;

    fn inv() -> PhoneInventory {
        PhoneInventory::from_pairs([
            ("s", Manner::Fricative),
            ("aa", Manner::Vowel),
            ("ch", Manner::Affricate),
            ("m", Manner::Nasal),
            ("cl", Manner::StopClosure),
            ("w", Manner::Glide),
            ("sil", Manner::Other),
        ])
        .unwrap()
    }

    fn classes(events: &[LandmarkEvent]) -> Vec<LandmarkClass> {
        events.iter().map(|e| e.class).collect()
    }

    #[test]
    fn fricative_vowel_affricate_rules() {
        let ev = segments_to_events(&[PhoneSegment::new("s", 0.10, 0.20)], &inv(), 0.01, "u").unwrap();
        assert_eq!(classes(&ev), vec![Fc, Fr]);
        assert_eq!((ev[0].time, ev[1].time), (0.10, 0.20));

        let ev = segments_to_events(&[PhoneSegment::new("aa", 0.30, 0.40)], &inv(), 0.01, "u").unwrap();
        assert_eq!(classes(&ev), vec![V]);
        assert!((ev[0].time - 0.35).abs() < 1e-12);

        let ev = segments_to_events(&[PhoneSegment::new("ch", 0.50, 0.60)], &inv(), 0.01, "u").unwrap();
        assert_eq!(classes(&ev), vec![Sr, Fc, Fr]);
        assert!((ev[0].time - 0.50).abs() < 1e-12);
        assert!((ev[1].time - 0.51).abs() < 1e-12);
        assert!((ev[2].time - 0.60).abs() < 1e-12);
    }

    #[test]
    fn glide_and_other() {
        let segs = [PhoneSegment::new("w", 0.0, 0.1), PhoneSegment::new("sil", 0.1, 0.3)];
        let ev = segments_to_events(&segs, &inv(), 0.01, "u").unwrap();
        assert_eq!(classes(&ev), vec![G]);
    }

    #[test]
    fn unknown_phone_names_utterance() {
        let err = segments_to_events(&[PhoneSegment::new("zz", 0.0, 0.1)], &inv(), 0.01, "utt3")
            .unwrap_err();
        assert!(err.to_string().contains("utt3"));
    }

    #[test]
    fn boundary_ties_order_by_segment() {
        let segs = [PhoneSegment::new("s", 0.0, 0.1), PhoneSegment::new("cl", 0.1, 0.2)];
        let ev = segments_to_events(&segs, &inv(), 0.01, "u").unwrap();
        assert_eq!(classes(&ev), vec![Fc, Fr, Sc, Sr]);
        let fl = events_to_frame_labels(&ev, 30, 0.01);
        assert_eq!(fl.labels[10], Fr);
    }

    #[test]
    fn quantization() {
        let ev = |t, c| LandmarkEvent { time: t, class: c, source_segment: 0 };
        let fl = events_to_frame_labels(&[ev(0.355, V)], 100, 0.01);
        assert_eq!(fl.labels[35], V);
        assert_eq!(fl.landmark_count(), 1);
        let fl = events_to_frame_labels(&[ev(10.0, V)], 50, 0.01);
        assert_eq!(fl.labels[49], V);
        // 0.3 / 0.01 is 29.999999999999996 in binary floating point
        assert_eq!(frame_of(0.3, 0.01, 100), 30);
        assert_eq!(frame_of(0.0, 0.01, 100), 0);
    }

    fn with_sources(n: usize, sources: &[(usize, LandmarkClass)]) -> FrameLabels {
        let mut labels = vec![E; n];
        for &(i, c) in sources {
            labels[i] = c;
        }
        FrameLabels { labels, frame_hop: 0.01, expanded: false }
    }

    #[test]
    fn expansion_single_and_identity() {
        let fl = with_sources(20, &[(10, Fc)]);
        let ex = expand_labels(&fl, 2).unwrap();
        for i in 0..20 {
            let want = if (8..=12).contains(&i) { Fc } else { E };
            assert_eq!(ex.labels[i], want, "frame {i}");
        }
        assert!(ex.expanded);
        assert_eq!(expand_labels(&fl, 0).unwrap().labels, fl.labels);
        assert!(matches!(expand_labels(&ex, 2), Err(LandmarkError::AlreadyExpanded)));
    }

    #[test]
    fn expansion_tie_goes_to_earlier_source() {
        let fl = with_sources(20, &[(10, Fr), (12, Sc)]);
        let ex = expand_labels(&fl, 2).unwrap();
        let expected: Vec<_> = (0..20)
            .map(|i| match i {
                8..=11 => Fr,
                12..=14 => Sc,
                _ => E,
            })
            .collect();
        assert_eq!(ex.labels, expected);
    }

    #[test]
    fn expansion_clips_at_edges() {
        let fl = with_sources(4, &[(0, V), (3, Nr)]);
        let ex = expand_labels(&fl, 2).unwrap();
        assert_eq!(ex.labels, vec![V, V, Nr, Nr]);
    }

    #[test]
    fn class_weight_examples() {
        let mut counts = vec![0; 9];
        counts[0] = 900;
        counts[1] = 50;
        counts[3] = 50;
        let w = ClassWeights::inverse_support(&counts).unwrap();
        // 1/N_j rescaled to mean 1 over the 3 present classes: 3/37 and 54/37.
        assert!((w.w[0] - 3.0 / 37.0).abs() < 1e-12);
        assert!((w.w[0] - 0.081081).abs() < 1e-6);
        assert!((w.w[1] - 1.459459).abs() < 1e-6);
        assert!((w.w[3] - 1.459459).abs() < 1e-6);
        assert_eq!(w.w[2], 0.0);

        let w = ClassWeights::inverse_support(&[7, 7, 7]).unwrap();
        assert!(w.w.iter().all(|&x| (x - 1.0).abs() < 1e-12));
        assert_eq!(ClassWeights::inverse_support(&[5]).unwrap().w, vec![1.0]);
        assert!(matches!(class_weights(&[], 9), Err(LandmarkError::Empty)));
    }

    #[test]
    fn class_weights_over_frame_labels() {
        let fl = with_sources(10, &[(2, V), (5, V), (7, Fc)]);
        let w = class_weights(&[fl.clone(), fl], 9).unwrap();
        // counts E=14, V=4, Fc=2
        assert!((w.w[0] * 14.0 - w.w[1] * 4.0).abs() < 1e-12);
        assert!((w.w[3] * 2.0 - w.w[1] * 4.0).abs() < 1e-12);
    }

    #[test]
    fn symposium_tier() {
        let manners = [
            ("s", Manner::Fricative),
            ("ih", Manner::Vowel),
            ("m", Manner::Nasal),
            ("pcl", Manner::StopClosure),
            ("ow", Manner::Vowel),
            ("z", Manner::Fricative),
            ("iy", Manner::Vowel),
            ("ax", Manner::Vowel),
            ("m2", Manner::Nasal),
        ];
        let inventory = PhoneInventory::from_pairs(manners.iter().map(|&(p, m)| (p, m))).unwrap();
        let segs: Vec<_> = manners
            .iter()
            .enumerate()
            .map(|(i, (p, _))| PhoneSegment::new(*p, i as f64 * 0.08, (i + 1) as f64 * 0.08))
            .collect();
        let events = segments_to_events(&segs, &inventory, 0.01, "symposium").unwrap();
        assert_eq!(
            classes(&events),
            vec![Fc, Fr, V, Nc, Nr, Sc, Sr, V, Fc, Fr, V, V, Nc, Nr]
        );
        let mut utt = Utterance::new("symposium", "spk", Default::default());
        utt.segments = segs;
        let tg = export_textgrid(&utt, &events).unwrap();
        let tiers = parse_textgrid(&tg).unwrap();
        assert_eq!(tiers.len(), 1);
        assert_eq!(tiers[0].name, "landmarks");
        let marks: Vec<_> = tiers[0].points.iter().map(|(_, m)| m.as_str()).collect();
        assert_eq!(
            marks,
            ["Fc", "Fr", "V", "Nc", "Nr", "Sc", "Sr", "V", "Fc", "Fr", "V", "V", "Nc", "Nr"]
        );
    }

    #[test]
    fn textgrid_edge_cases() {
        let utt = Utterance::new("u", "s", Default::default());
        let tg = export_textgrid(&utt, &[]).unwrap();
        let tiers = parse_textgrid(&tg).unwrap();
        assert_eq!(tiers.len(), 1);
        assert!(tiers[0].points.is_empty());

        let ev = [LandmarkEvent { time: 0.1, class: Fc, source_segment: 0 }];
        let tiers = parse_textgrid(&export_textgrid(&utt, &ev).unwrap()).unwrap();
        assert_eq!(tiers[0].points, vec![(0.1, "Fc".to_string())]);

        let unsorted = [
            LandmarkEvent { time: 0.2, class: V, source_segment: 0 },
            LandmarkEvent { time: 0.1, class: V, source_segment: 1 },
        ];
        assert!(matches!(export_textgrid(&utt, &unsorted), Err(LandmarkError::Unsorted(1))));
    }

    #[test]
    fn lmk_csv_round_trip() {
        let fl = with_sources(6, &[(1, Sc), (4, Nr)]);
        let back = FrameLabels::from_csv(&fl.to_csv(), 0.01).unwrap();
        assert_eq!(back.labels, fl.labels);
        assert!(FrameLabels::from_csv("frame,class\n0,E\n2,V\n", 0.01).is_err());
        assert!(FrameLabels::from_csv("frame,class\n0,Q\n", 0.01).is_err());
    }

    fn arb_manners() -> impl Strategy<Value = Vec<(Manner, u32)>> {
        prop::collection::vec((prop::sample::select(Manner::ALL.to_vec()), 3u32..15), 1..40)
    }

    proptest! {
        #[test]
        fn event_count_formula(items in arb_manners()) {
            let inventory = PhoneInventory::from_pairs(
                Manner::ALL.iter().map(|m| (m.name().to_string(), *m))).unwrap();
            let mut t = 0u32;
            let segs: Vec<_> = items.iter().map(|(m, len)| {
                let s = PhoneSegment::new(m.name(), t as f64 * 0.01, (t + len) as f64 * 0.01);
                t += len;
                s
            }).collect();
            let events = segments_to_events(&segs, &inventory, 0.01, "p").unwrap();
            let count = |m: Manner| items.iter().filter(|(x, _)| *x == m).count();
            let expected = 2 * (count(Manner::Fricative) + count(Manner::Nasal) + count(Manner::StopClosure))
                + 3 * count(Manner::Affricate) + count(Manner::Vowel) + count(Manner::Glide);
            prop_assert_eq!(events.len(), expected);
            for ev in &events {
                let seg = &segs[ev.source_segment];
                prop_assert!(ev.time >= seg.start && ev.time <= seg.end);
            }
            for w in events.windows(2) {
                prop_assert!(w[0].time <= w[1].time);
            }
        }

        #[test]
        fn expansion_monotone_and_local(
            sources in prop::collection::btree_map(0usize..60, 1usize..9, 0..10),
            radius in 0usize..4,
        ) {
            let src: Vec<_> = sources.iter()
                .map(|(&i, &c)| (i, LandmarkClass::from_index(c).unwrap()))
                .collect();
            let fl = with_sources(60, &src);
            let ex = expand_labels(&fl, radius).unwrap();
            for i in 0..60 {
                if fl.labels[i] != E {
                    prop_assert_eq!(ex.labels[i], fl.labels[i]);
                }
                let near = src.iter().any(|(s, _)| s.abs_diff(i) <= radius);
                if !near {
                    prop_assert_eq!(ex.labels[i], E);
                } else {
                    prop_assert!(ex.labels[i] != E);
                }
            }
        }

        #[test]
        fn weights_balance_support(counts in prop::collection::vec(0usize..1000, 1..12)) {
            prop_assume!(counts.iter().any(|&c| c > 0));
            let w = ClassWeights::inverse_support(&counts).unwrap();
            let present: Vec<usize> = (0..counts.len()).filter(|&j| counts[j] > 0).collect();
            let mean = present.iter().map(|&j| w.w[j]).sum::<f64>() / present.len() as f64;
            prop_assert!((mean - 1.0).abs() < 1e-9);
            let k = w.w[present[0]] * counts[present[0]] as f64;
            for &j in &present {
                prop_assert!((w.w[j] * counts[j] as f64 - k).abs() <= 1e-9 * k);
            }
        }
    }
}
