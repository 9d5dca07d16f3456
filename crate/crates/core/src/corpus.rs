//! Synthetic sign corpus: generation, manifests, vocabulary and loading.
//!
//! A corpus directory holds
//!
//! ```text
//! manifest.tsv        video_id  signer_id  class_id  num_frames  split
//! annotations.tsv     class_id  gloss tokens  sentence1|...|sentence5
//! signers.json        per-signer transform parameters
//! keypoints/<video_id>.jsonl   one estimator frame object per line
//! ```
//!
//! Each class is a prototype motion: every keypoint of every part follows its own
//! smooth curve (a sum of up to three sinusoids) around a shared canonical skeleton.
//! A signer changes that motion in ways per-part standardization undoes (a per-part,
//! per-axis affine map) and in ways it does not (a static style deformation, a temporal
//! warp and per-frame Gaussian jitter added after the affine map).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::keypoints::{
    parse_frames_jsonl, video_to_features, FeatureSequence, FramePose, Keypoint2D, KeypointError,
    NormalizationMode, PartMask, BODY_POINTS, FACE_POINTS, HAND_POINTS,
};
use crate::metrics::ReferenceSet;
use crate::models::Vocabulary;
use crate::sampler::rng_for;

pub const SENTENCES_PER_CLASS: usize = 5;

const GLOSS_POOL: [&str; 26] = [
    "FIRE",
    "SCAR",
    "HOUSE",
    "HELP",
    "POLICE",
    "CAR",
    "WATER",
    "DOCTOR",
    "PAIN",
    "LEG",
    "ARM",
    "HEAD",
    "CHILD",
    "LOST",
    "STOLEN",
    "ACCIDENT",
    "AMBULANCE",
    "ROAD",
    "BRIDGE",
    "FALL",
    "BLEED",
    "BREATHE",
    "CALL",
    "FAST",
    "NOW",
    "THIEF",
];

const TEMPLATES: [(&str, &str); SENTENCES_PER_CLASS] = [
    ("", ""),
    ("please", ""),
    ("", "now"),
    ("there is", ""),
    ("i need", "please"),
];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid corpus config: {0}")]
    InvalidConfig(String),
    #[error("{path}:{line}: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{path}: {source}")]
    Keypoints {
        path: PathBuf,
        source: KeypointError,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split '{s}'")),
        }
    }
}

/// Which annotation the decoder is trained to produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationLevel {
    Sentence,
    Gloss,
}

impl fmt::Display for AnnotationLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnnotationLevel::Sentence => "sentence",
            AnnotationLevel::Gloss => "gloss",
        })
    }
}

impl FromStr for AnnotationLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "sentence" => Ok(AnnotationLevel::Sentence),
            "gloss" => Ok(AnnotationLevel::Gloss),
            _ => Err(format!("unknown annotation level '{s}'")),
        }
    }
}

/// Whitespace split; sentences are lower-cased, glosses keep their case.
pub fn tokenize(text: &str, level: AnnotationLevel) -> Vec<String> {
    match level {
        AnnotationLevel::Gloss => text.split_whitespace().map(str::to_string).collect(),
        AnnotationLevel::Sentence => text.split_whitespace().map(str::to_lowercase).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignClass {
    pub class_id: usize,
    pub glosses: Vec<String>,
    pub sentences: Vec<String>,
}

impl SignClass {
    pub fn tokens(&self, level: AnnotationLevel) -> Vec<String> {
        match level {
            AnnotationLevel::Gloss => self.glosses.clone(),
            AnnotationLevel::Sentence => tokenize(&self.sentences[0], level),
        }
    }

    pub fn references(&self, level: AnnotationLevel) -> ReferenceSet {
        match level {
            AnnotationLevel::Gloss => ReferenceSet::single(self.glosses.clone()),
            AnnotationLevel::Sentence => {
                ReferenceSet::new(self.sentences.iter().map(|s| tokenize(s, level)).collect())
                    .expect("five sentences")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub video_id: String,
    pub signer_id: usize,
    pub class_id: usize,
    pub num_frames: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("video_id\tsigner_id\tclass_id\tnum_frames\tsplit\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                r.video_id, r.signer_id, r.class_id, r.num_frames, r.split
            ));
        }
        out
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self, CorpusError> {
        let mut rows = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: String| CorpusError::Malformed {
                path: path.to_path_buf(),
                line: i + 1,
                reason,
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(bad(format!("expected 5 fields, got {}", f.len())));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("'{s}': {e}")));
            let row = ManifestRow {
                video_id: f[0].to_string(),
                signer_id: num(f[1])?,
                class_id: num(f[2])?,
                num_frames: num(f[3])?,
                split: f[4].parse().map_err(bad)?,
            };
            if !seen.insert(row.video_id.clone()) {
                return Err(bad(format!("duplicate video id {}", row.video_id)));
            }
            rows.push(row);
        }
        Ok(Manifest { rows })
    }

    pub fn signers(&self, split: Split) -> Vec<usize> {
        let mut s: Vec<usize> = self
            .rows
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.signer_id)
            .collect();
        s.sort_unstable();
        s.dedup();
        s
    }
}

pub fn annotations_to_tsv(classes: &[SignClass]) -> String {
    let mut out = String::from("class_id\tglosses\tsentences\n");
    for c in classes {
        out.push_str(&format!(
            "{}\t{}\t{}\n",
            c.class_id,
            c.glosses.join(" "),
            c.sentences.join("|")
        ));
    }
    out
}

pub fn parse_annotations(path: &Path, text: &str) -> Result<Vec<SignClass>, CorpusError> {
    let mut classes = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| CorpusError::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(bad(format!("expected 3 fields, got {}", f.len())));
        }
        let class_id = f[0].parse().map_err(|e| bad(format!("class id: {e}")))?;
        let glosses = tokenize(f[1], AnnotationLevel::Gloss);
        let sentences: Vec<String> = f[2].split('|').map(str::to_string).collect();
        if glosses.is_empty() || sentences.len() != SENTENCES_PER_CLASS {
            return Err(bad(format!(
                "class {class_id} needs glosses and {SENTENCES_PER_CLASS} sentences"
            )));
        }
        classes.push(SignClass {
            class_id,
            glosses,
            sentences,
        });
    }
    Ok(classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_classes: usize,
    pub n_signers: usize,
    pub samples_per_class_per_signer: usize,
    pub frames_per_video: usize,
    pub seed: u64,
    /// Per-frame Gaussian noise in pixels, added after the signer's affine map.
    pub jitter_std: f64,
    /// Static per-keypoint signer deformation, as a fraction of the part radius.
    pub style_std: f64,
    /// Motion amplitude as a fraction of the part radius.
    pub motion_scale: f64,
    /// Relative per-video perturbation of motion amplitudes.
    pub variation: f64,
    /// Range of per-signer temporal warp exponents, within `[0.5, 2]`.
    pub speed_range: (f64, f64),
    /// Per-part, per-axis scale range (log-uniform) and absolute offset range in pixels.
    pub scale_range: (f64, f64),
    pub offset_range: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_classes: 20,
            n_signers: 4,
            samples_per_class_per_signer: 3,
            frames_per_video: 30,
            seed: 1,
            jitter_std: 1.0,
            style_std: 0.14,
            motion_scale: 0.15,
            variation: 0.1,
            speed_range: (0.7, 1.4),
            scale_range: (0.6, 1.6),
            offset_range: 150.0,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::InvalidConfig(m.to_string()));
        if self.n_classes == 0
            || self.samples_per_class_per_signer == 0
            || self.frames_per_video == 0
        {
            return bad("counts must be at least 1");
        }
        if self.n_signers < 3 {
            return bad("need at least 3 signers so one can be held out");
        }
        let (s0, s1) = self.speed_range;
        if !(0.5..=2.0).contains(&s0) || !(0.5..=2.0).contains(&s1) || s0 > s1 {
            return bad("speed range must lie within [0.5, 2]");
        }
        if self.scale_range.0 <= 0.0 || self.scale_range.0 > self.scale_range.1 {
            return bad("scale range must be positive and ordered");
        }
        if self.jitter_std < 0.0
            || self.style_std < 0.0
            || self.variation < 0.0
            || self.offset_range < 0.0
        {
            return bad("noise levels must be non-negative");
        }
        Ok(())
    }

    pub fn num_test_signers(&self) -> usize {
        self.n_signers.div_ceil(4)
    }
}

/// Parts in estimator order: body, face, left hand, right hand.
const PART_SIZES: [usize; 4] = [BODY_POINTS, FACE_POINTS, HAND_POINTS, HAND_POINTS];
const PART_CENTERS: [(f64, f64); 4] = [
    (640.0, 420.0),
    (640.0, 180.0),
    (470.0, 470.0),
    (810.0, 470.0),
];
const PART_RADII: [f64; 4] = [220.0, 70.0, 55.0, 55.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignerProfile {
    pub signer_id: usize,
    /// `[part][axis]`
    pub scale: [[f64; 2]; 4],
    pub offset: [[f64; 2]; 4],
    pub jitter_std: f64,
    pub speed: f64,
    /// Static displacement per keypoint, `[part][point] = (dx, dy)` in canonical pixels.
    pub style: Vec<Vec<(f64, f64)>>,
}

#[derive(Debug, Clone, Copy)]
struct Wave {
    amp: f64,
    freq: f64,
    phase: f64,
}

/// Per part, per point, per axis: up to three sinusoids.
type Motion = Vec<Vec<[Vec<Wave>; 2]>>;

fn canonical_skeleton(seed: u64) -> Vec<Vec<(f64, f64)>> {
    let mut rng = rng_for(seed, &[0]);
    PART_SIZES
        .iter()
        .enumerate()
        .map(|(p, &n)| {
            (0..n)
                .map(|_| {
                    let r = PART_RADII[p] * rng.random::<f64>().sqrt();
                    let a = rng.random_range(0.0..std::f64::consts::TAU);
                    (
                        PART_CENTERS[p].0 + r * a.cos(),
                        PART_CENTERS[p].1 + r * a.sin(),
                    )
                })
                .collect()
        })
        .collect()
}

fn class_motion(cfg: &SyntheticConfig, class_id: usize) -> Motion {
    let mut rng = rng_for(cfg.seed, &[1, class_id as u64]);
    PART_SIZES
        .iter()
        .enumerate()
        .map(|(p, &n)| {
            (0..n)
                .map(|_| {
                    let mut axis = || {
                        let k = rng.random_range(1..=3);
                        (0..k)
                            .map(|_| Wave {
                                amp: cfg.motion_scale * PART_RADII[p] * rng.random_range(0.3..1.0),
                                freq: rng.random_range(0.5..2.0),
                                phase: rng.random_range(0.0..std::f64::consts::TAU),
                            })
                            .collect()
                    };
                    [axis(), axis()]
                })
                .collect()
        })
        .collect()
}

fn signer_profile(cfg: &SyntheticConfig, signer_id: usize) -> SignerProfile {
    let mut rng = rng_for(cfg.seed, &[2, signer_id as u64]);
    let (lo, hi) = (cfg.scale_range.0.ln(), cfg.scale_range.1.ln());
    let mut scale = [[1.0; 2]; 4];
    let mut offset = [[0.0; 2]; 4];
    for p in 0..4 {
        for a in 0..2 {
            scale[p][a] = if hi > lo {
                rng.random_range(lo..=hi).exp()
            } else {
                lo.exp()
            };
            offset[p][a] = if cfg.offset_range > 0.0 {
                rng.random_range(-cfg.offset_range..=cfg.offset_range)
            } else {
                0.0
            };
        }
    }
    let (s0, s1) = cfg.speed_range;
    let speed = if s1 > s0 {
        rng.random_range(s0..=s1)
    } else {
        s0
    };
    let style = PART_SIZES
        .iter()
        .enumerate()
        .map(|(p, &n)| {
            let sd = cfg.style_std * PART_RADII[p];
            (0..n)
                .map(|_| {
                    if sd > 0.0 {
                        let d = Normal::new(0.0, sd).expect("positive std");
                        (d.sample(&mut rng), d.sample(&mut rng))
                    } else {
                        (0.0, 0.0)
                    }
                })
                .collect()
        })
        .collect();
    SignerProfile {
        signer_id,
        scale,
        offset,
        jitter_std: cfg.jitter_std,
        speed,
        style,
    }
}

fn class_annotation<R: Rng>(
    class_id: usize,
    rng: &mut R,
    taken: &mut HashSet<Vec<String>>,
) -> SignClass {
    let glosses = loop {
        let len = [1, 2, 2, 3, 3, 4][rng.random_range(0..6)];
        let mut pool: Vec<&str> = GLOSS_POOL.to_vec();
        pool.shuffle(rng);
        let g: Vec<String> = pool[..len].iter().map(|s| s.to_string()).collect();
        if taken.insert(g.clone()) {
            break g;
        }
    };
    let words = glosses.join(" ").to_lowercase();
    let sentences = TEMPLATES
        .iter()
        .map(|(pre, post)| {
            [*pre, words.as_str(), *post]
                .iter()
                .filter(|s| !s.is_empty())
                .copied()
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    SignClass {
        class_id,
        glosses,
        sentences,
    }
}

pub fn video_id(class_id: usize, signer_id: usize, sample: usize) -> String {
    format!("c{class_id:03}_s{signer_id:02}_r{sample:02}")
}

fn render_video(
    cfg: &SyntheticConfig,
    skeleton: &[Vec<(f64, f64)>],
    motion: &Motion,
    signer: &SignerProfile,
    key: (usize, usize),
) -> Vec<FramePose> {
    let mut rng = rng_for(
        cfg.seed,
        &[3, key.0 as u64, signer.signer_id as u64, key.1 as u64],
    );
    let gain: Vec<Vec<[f64; 2]>> = PART_SIZES
        .iter()
        .map(|&n| {
            (0..n)
                .map(|_| {
                    let mut g = || 1.0 + cfg.variation * rng.random_range(-1.0..1.0);
                    [g(), g()]
                })
                .collect()
        })
        .collect();
    let jitter = (signer.jitter_std > 0.0)
        .then(|| Normal::new(0.0, signer.jitter_std).expect("positive std"));
    let l = cfg.frames_per_video;
    (0..l)
        .map(|t| {
            let u = if l > 1 {
                t as f64 / (l - 1) as f64
            } else {
                0.0
            };
            let phi = u.powf(signer.speed);
            let mut parts: Vec<Vec<Keypoint2D>> = Vec::with_capacity(4);
            for p in 0..4 {
                let (cx, cy) = PART_CENTERS[p];
                let pts = (0..PART_SIZES[p])
                    .map(|k| {
                        let mut coord = [
                            skeleton[p][k].0 + signer.style[p][k].0,
                            skeleton[p][k].1 + signer.style[p][k].1,
                        ];
                        for (a, c) in coord.iter_mut().enumerate() {
                            *c += gain[p][k][a]
                                * motion[p][k][a]
                                    .iter()
                                    .map(|w| {
                                        w.amp
                                            * (std::f64::consts::TAU * w.freq * phi + w.phase).sin()
                                    })
                                    .sum::<f64>();
                        }
                        let center = [cx, cy];
                        let mut out = [0.0; 2];
                        for a in 0..2 {
                            out[a] = center[a]
                                + (coord[a] - center[a]) * signer.scale[p][a]
                                + signer.offset[p][a];
                            if let Some(j) = &jitter {
                                out[a] += j.sample(&mut rng);
                            }
                        }
                        Keypoint2D {
                            x: out[0],
                            y: out[1],
                            confidence: rng.random_range(0.6..1.0),
                        }
                    })
                    .collect();
                parts.push(pts);
            }
            let right_hand = parts.pop().expect("4 parts");
            let left_hand = parts.pop().expect("4 parts");
            let face = parts.pop().expect("4 parts");
            let body = parts.pop().expect("4 parts");
            FramePose {
                body,
                face,
                left_hand,
                right_hand,
            }
        })
        .collect()
}

/// Everything a generator run produces, before it touches the filesystem.
pub struct SyntheticCorpus {
    pub manifest: Manifest,
    pub classes: Vec<SignClass>,
    pub signers: Vec<SignerProfile>,
    pub videos: BTreeMap<String, Vec<FramePose>>,
}

pub fn synthesize(cfg: &SyntheticConfig) -> Result<SyntheticCorpus, CorpusError> {
    cfg.validate()?;
    let skeleton = canonical_skeleton(cfg.seed);
    let mut ann_rng = rng_for(cfg.seed, &[4]);
    let mut taken = HashSet::new();
    let classes: Vec<SignClass> = (0..cfg.n_classes)
        .map(|c| class_annotation(c, &mut ann_rng, &mut taken))
        .collect();
    let signers: Vec<SignerProfile> = (0..cfg.n_signers).map(|s| signer_profile(cfg, s)).collect();
    let first_test = cfg.n_signers - cfg.num_test_signers();
    let samples = cfg.samples_per_class_per_signer;
    let mut manifest = Manifest::default();
    let mut videos = BTreeMap::new();
    for class in &classes {
        let motion = class_motion(cfg, class.class_id);
        for signer in &signers {
            for r in 0..samples {
                let split = if signer.signer_id >= first_test {
                    Split::Test
                } else if samples >= 2 && r == samples - 1 {
                    Split::Dev
                } else {
                    Split::Train
                };
                let id = video_id(class.class_id, signer.signer_id, r);
                videos.insert(
                    id.clone(),
                    render_video(cfg, &skeleton, &motion, signer, (class.class_id, r)),
                );
                manifest.rows.push(ManifestRow {
                    video_id: id,
                    signer_id: signer.signer_id,
                    class_id: class.class_id,
                    num_frames: cfg.frames_per_video,
                    split,
                });
            }
        }
    }
    Ok(SyntheticCorpus {
        manifest,
        classes,
        signers,
        videos,
    })
}

/// Generates a corpus and writes it under `out_dir`.
pub fn generate_synthetic_corpus(
    cfg: &SyntheticConfig,
    out_dir: &Path,
) -> Result<Manifest, CorpusError> {
    let corpus = synthesize(cfg)?;
    let kp_dir = out_dir.join("keypoints");
    fs::create_dir_all(&kp_dir).map_err(io_err(&kp_dir))?;
    let write = |path: PathBuf, text: String| fs::write(&path, text).map_err(io_err(&path));
    for (id, frames) in &corpus.videos {
        let mut text = String::new();
        for f in frames {
            text.push_str(&f.to_json());
            text.push('\n');
        }
        write(kp_dir.join(format!("{id}.jsonl")), text)?;
    }
    write(out_dir.join("manifest.tsv"), corpus.manifest.to_tsv())?;
    write(
        out_dir.join("annotations.tsv"),
        annotations_to_tsv(&corpus.classes),
    )?;
    let signers = serde_json::to_string_pretty(&corpus.signers).expect("plain data");
    write(out_dir.join("signers.json"), signers + "\n")?;
    let config = serde_json::to_string_pretty(cfg).expect("plain data");
    write(out_dir.join("synthetic.json"), config + "\n")?;
    Ok(corpus.manifest)
}

/// Ids 0..3 reserved; other tokens by descending frequency, then lexicographically.
/// Counts one occurrence per training video; tokens seen fewer than `min_count` times are dropped.
pub fn build_vocab(
    manifest: &Manifest,
    classes: &[SignClass],
    level: AnnotationLevel,
    min_count: usize,
) -> Vocabulary {
    let by_id: HashMap<usize, &SignClass> = classes.iter().map(|c| (c.class_id, c)).collect();
    let mut counts: HashMap<String, usize> = HashMap::new();
    for row in manifest.rows.iter().filter(|r| r.split == Split::Train) {
        if let Some(class) = by_id.get(&row.class_id) {
            let tokens: Vec<String> = match level {
                AnnotationLevel::Gloss => class.glosses.clone(),
                AnnotationLevel::Sentence => class
                    .sentences
                    .iter()
                    .flat_map(|s| tokenize(s, level))
                    .collect(),
            };
            for t in tokens {
                *counts.entry(t).or_insert(0) += 1;
            }
        }
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_count.max(1))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Vocabulary::with_tokens(ranked.into_iter().map(|(t, _)| t))
}

#[derive(Debug, Clone)]
pub struct SignSample {
    pub video_id: String,
    pub signer_id: usize,
    pub class_id: usize,
    pub split: Split,
    /// All frames of the video.
    pub features: FeatureSequence,
    /// Target ids ending in `EOS`.
    pub target: Vec<usize>,
    pub references: ReferenceSet,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub level: AnnotationLevel,
    pub vocab: Vocabulary,
    pub classes: Vec<SignClass>,
    pub samples: Vec<SignSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&SignSample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn feature_dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.features.dim())
    }

    /// Re-encodes every target with `vocab`, e.g. the vocabulary a checkpoint was trained with.
    pub fn with_vocab(mut self, vocab: Vocabulary) -> Self {
        for s in &mut self.samples {
            if let Some(class) = self.classes.iter().find(|c| c.class_id == s.class_id) {
                s.target = vocab.encode_target(&class.tokens(self.level));
            }
        }
        self.vocab = vocab;
        self
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, CorpusError> {
    let path = dir.join("manifest.tsv");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    Manifest::parse(&path, &text)
}

pub fn read_annotations(dir: &Path) -> Result<Vec<SignClass>, CorpusError> {
    let path = dir.join("annotations.tsv");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    parse_annotations(&path, &text)
}

pub fn read_video(dir: &Path, video_id: &str) -> Result<Vec<FramePose>, CorpusError> {
    let path = dir.join("keypoints").join(format!("{video_id}.jsonl"));
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    parse_frames_jsonl(&text).map_err(|source| CorpusError::Keypoints { path, source })
}

/// Reads every manifest row and normalizes its keypoints. The vocabulary comes from the
/// training split.
pub fn load_dataset(
    dir: &Path,
    level: AnnotationLevel,
    mask: PartMask,
    mode: NormalizationMode,
) -> Result<Dataset, CorpusError> {
    let manifest = read_manifest(dir)?;
    let classes = read_annotations(dir)?;
    let vocab = build_vocab(&manifest, &classes, level, 1);
    let by_id: HashMap<usize, &SignClass> = classes.iter().map(|c| (c.class_id, c)).collect();
    let mut samples = Vec::with_capacity(manifest.rows.len());
    for (i, row) in manifest.rows.iter().enumerate() {
        let class = by_id
            .get(&row.class_id)
            .ok_or_else(|| CorpusError::Malformed {
                path: dir.join("manifest.tsv"),
                line: i + 2,
                reason: format!("unknown class {}", row.class_id),
            })?;
        let frames = read_video(dir, &row.video_id)?;
        if frames.len() != row.num_frames {
            return Err(CorpusError::Malformed {
                path: dir
                    .join("keypoints")
                    .join(format!("{}.jsonl", row.video_id)),
                line: frames.len(),
                reason: format!(
                    "manifest says {} frames, file has {}",
                    row.num_frames,
                    frames.len()
                ),
            });
        }
        let features =
            video_to_features(&frames, mask, mode).map_err(|source| CorpusError::Keypoints {
                path: dir
                    .join("keypoints")
                    .join(format!("{}.jsonl", row.video_id)),
                source,
            })?;
        samples.push(SignSample {
            video_id: row.video_id.clone(),
            signer_id: row.signer_id,
            class_id: row.class_id,
            split: row.split,
            features,
            target: vocab.encode_target(&class.tokens(level)),
            references: class.references(level),
        });
    }
    Ok(Dataset {
        level,
        vocab,
        classes,
        samples,
    })
}
