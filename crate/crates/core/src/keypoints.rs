//! Estimator keypoint ingestion and per-frame feature normalization.
//!
//! A frame from the pose estimator carries 137 keypoints split into body (25),
//! face (70), left hand (21) and right hand (21). Only the upper body is kept,
//! so a full-mask frame contributes 12 + 21 + 21 + 70 = 124 points, i.e. a
//! 248-value feature vector once x and y are laid out side by side.

use std::fmt;
use std::str::FromStr;

use serde::Deserialize;
use thiserror::Error;

pub const BODY_POINTS: usize = 25;
pub const FACE_POINTS: usize = 70;
pub const HAND_POINTS: usize = 21;

/// Body indices kept by the upper-body selection: nose, neck, shoulders,
/// elbows, wrists, eyes and ears.
pub const UPPER_BODY_INDICES: [usize; 12] = [0, 1, 2, 3, 4, 5, 6, 7, 15, 16, 17, 18];

/// Zero-variance guard: a part-axis whose population std falls below this maps to zeros.
const DEGENERATE_STD: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum KeypointError {
    #[error("frame has no detected person")]
    MissingPerson,
    #[error("malformed keypoints in {part}: {reason}")]
    MalformedKeypoints { part: &'static str, reason: String },
    #[error("video has no frames")]
    EmptyVideo,
    #[error("part mask selects no keypoints")]
    EmptyMask,
    #[error("invalid keypoint json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint2D {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FramePose {
    pub body: Vec<Keypoint2D>,
    pub face: Vec<Keypoint2D>,
    pub left_hand: Vec<Keypoint2D>,
    pub right_hand: Vec<Keypoint2D>,
}

#[derive(Deserialize)]
struct RawFrame {
    people: Vec<RawPerson>,
}

#[derive(Deserialize)]
struct RawPerson {
    pose_keypoints_2d: Vec<f64>,
    face_keypoints_2d: Vec<f64>,
    hand_left_keypoints_2d: Vec<f64>,
    hand_right_keypoints_2d: Vec<f64>,
}

fn decode_triplets(
    part: &'static str,
    flat: &[f64],
    expected: usize,
) -> Result<Vec<Keypoint2D>, KeypointError> {
    if !flat.len().is_multiple_of(3) {
        return Err(KeypointError::MalformedKeypoints {
            part,
            reason: format!("{} values is not a multiple of 3", flat.len()),
        });
    }
    if flat.len() != expected * 3 {
        return Err(KeypointError::MalformedKeypoints {
            part,
            reason: format!("expected {} points, found {}", expected, flat.len() / 3),
        });
    }
    flat.chunks_exact(3)
        .map(|c| {
            let (x, y, confidence) = (c[0], c[1], c[2]);
            if !x.is_finite() || !y.is_finite() {
                return Err(KeypointError::MalformedKeypoints {
                    part,
                    reason: "non-finite coordinate".into(),
                });
            }
            if !(0.0..=1.0).contains(&confidence) {
                return Err(KeypointError::MalformedKeypoints {
                    part,
                    reason: format!("confidence {confidence} outside [0, 1]"),
                });
            }
            Ok(Keypoint2D { x, y, confidence })
        })
        .collect()
}

/// Decodes one estimator frame file (first detected person only).
pub fn parse_frame_json(bytes: &[u8]) -> Result<FramePose, KeypointError> {
    let raw: RawFrame = serde_json::from_slice(bytes)?;
    let person = raw
        .people
        .into_iter()
        .next()
        .ok_or(KeypointError::MissingPerson)?;
    Ok(FramePose {
        body: decode_triplets("pose_keypoints_2d", &person.pose_keypoints_2d, BODY_POINTS)?,
        face: decode_triplets("face_keypoints_2d", &person.face_keypoints_2d, FACE_POINTS)?,
        left_hand: decode_triplets(
            "hand_left_keypoints_2d",
            &person.hand_left_keypoints_2d,
            HAND_POINTS,
        )?,
        right_hand: decode_triplets(
            "hand_right_keypoints_2d",
            &person.hand_right_keypoints_2d,
            HAND_POINTS,
        )?,
    })
}

/// Decodes the consolidated per-video form: one frame object per line.
pub fn parse_frames_jsonl(text: &str) -> Result<Vec<FramePose>, KeypointError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| parse_frame_json(l.as_bytes()))
        .collect()
}

/// Formats a real with 9 significant digits and no exponent for the
/// magnitudes pose coordinates take.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return "0".to_string();
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (8 - magnitude).clamp(0, 17) as usize;
    let s = format!("{v:.decimals$}");
    let s = if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    };
    if s == "-0" {
        "0".to_string()
    } else {
        s
    }
}

impl FramePose {
    /// Serializes in the estimator's layout with sorted keys and fixed float formatting,
    /// so identical poses always produce identical bytes.
    pub fn to_json(&self) -> String {
        fn flat(points: &[Keypoint2D]) -> String {
            let mut out = String::with_capacity(points.len() * 30);
            out.push('[');
            for (i, p) in points.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&format_sig9(p.x));
                out.push(',');
                out.push_str(&format_sig9(p.y));
                out.push(',');
                out.push_str(&format_sig9(p.confidence));
            }
            out.push(']');
            out
        }
        format!(
            "{{\"people\":[{{\"face_keypoints_2d\":{},\"hand_left_keypoints_2d\":{},\"hand_right_keypoints_2d\":{},\"pose_keypoints_2d\":{}}}],\"version\":1.3}}",
            flat(&self.face),
            flat(&self.left_hand),
            flat(&self.right_hand),
            flat(&self.body)
        )
    }
}

/// Which keypoint groups feed the feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct PartMask {
    pub use_body: bool,
    pub use_hands: bool,
    pub use_face: bool,
}

impl PartMask {
    pub const FULL: PartMask = PartMask {
        use_body: true,
        use_hands: true,
        use_face: true,
    };

    pub fn new(use_body: bool, use_hands: bool, use_face: bool) -> Result<Self, KeypointError> {
        if !(use_body || use_hands || use_face) {
            return Err(KeypointError::EmptyMask);
        }
        Ok(PartMask {
            use_body,
            use_hands,
            use_face,
        })
    }

    pub fn num_points(&self) -> usize {
        let mut m = 0;
        if self.use_body {
            m += UPPER_BODY_INDICES.len();
        }
        if self.use_hands {
            m += 2 * HAND_POINTS;
        }
        if self.use_face {
            m += FACE_POINTS;
        }
        m
    }

    pub fn feature_dim(&self) -> usize {
        2 * self.num_points()
    }

    /// All seven non-empty masks, in a fixed order.
    pub fn all() -> Vec<PartMask> {
        let mut out = Vec::new();
        for bits in 1u8..8 {
            out.push(PartMask {
                use_body: bits & 1 != 0,
                use_hands: bits & 2 != 0,
                use_face: bits & 4 != 0,
            });
        }
        out
    }
}

impl Default for PartMask {
    fn default() -> Self {
        PartMask::FULL
    }
}

impl fmt::Display for PartMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut names = Vec::new();
        if self.use_body {
            names.push("body");
        }
        if self.use_hands {
            names.push("hands");
        }
        if self.use_face {
            names.push("face");
        }
        write!(f, "{}", names.join("+"))
    }
}

impl FromStr for PartMask {
    type Err = KeypointError;

    /// Parses `body+hands+face`, `body,hands` or `full`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("full") || s.eq_ignore_ascii_case("all") {
            return Ok(PartMask::FULL);
        }
        let (mut b, mut h, mut f) = (false, false, false);
        for tok in s.split(['+', ',']).map(str::trim).filter(|t| !t.is_empty()) {
            match tok.to_ascii_lowercase().as_str() {
                "body" => b = true,
                "hands" | "hand" => h = true,
                "face" => f = true,
                _ => {
                    return Err(KeypointError::MalformedKeypoints {
                        part: "mask",
                        reason: format!("unknown part '{tok}'"),
                    })
                }
            }
        }
        PartMask::new(b, h, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMode {
    /// One mean/std over every scalar of the frame.
    Feature,
    /// One mean/std per axis over all parts.
    #[serde(rename = "2d")]
    TwoD,
    /// One mean/std per part over both axes.
    Object,
    /// One mean/std per part and per axis.
    #[serde(rename = "object_2d")]
    Object2D,
}

impl NormalizationMode {
    pub const ALL: [NormalizationMode; 4] = [
        NormalizationMode::Feature,
        NormalizationMode::TwoD,
        NormalizationMode::Object,
        NormalizationMode::Object2D,
    ];
}

impl fmt::Display for NormalizationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormalizationMode::Feature => "feature",
            NormalizationMode::TwoD => "2d",
            NormalizationMode::Object => "object",
            NormalizationMode::Object2D => "object_2d",
        })
    }
}

impl FromStr for NormalizationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "feature" => Ok(NormalizationMode::Feature),
            "2d" | "two_d" => Ok(NormalizationMode::TwoD),
            "object" => Ok(NormalizationMode::Object),
            "object_2d" | "object2d" => Ok(NormalizationMode::Object2D),
            other => Err(format!("unknown normalization mode '{other}'")),
        }
    }
}

/// Coordinates of one selected part, split by axis in keypoint order.
#[derive(Debug, Clone, PartialEq)]
pub struct PartGroup {
    pub name: &'static str,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

impl PartGroup {
    fn from_points<'a>(name: &'static str, points: impl Iterator<Item = &'a Keypoint2D>) -> Self {
        let (xs, ys) = points.map(|p| (p.x, p.y)).unzip();
        PartGroup { name, xs, ys }
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }
}

/// Keeps the masked parts in the fixed order body, left hand, right hand, face.
/// Confidences are dropped.
pub fn select_parts(pose: &FramePose, mask: PartMask) -> Vec<PartGroup> {
    let mut groups = Vec::with_capacity(4);
    if mask.use_body {
        groups.push(PartGroup::from_points(
            "body",
            UPPER_BODY_INDICES.iter().map(|&i| &pose.body[i]),
        ));
    }
    if mask.use_hands {
        groups.push(PartGroup::from_points("left_hand", pose.left_hand.iter()));
        groups.push(PartGroup::from_points("right_hand", pose.right_hand.iter()));
    }
    if mask.use_face {
        groups.push(PartGroup::from_points("face", pose.face.iter()));
    }
    groups
}

/// A frame's normalized feature vector: all x-derived values then all y-derived values.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFrame {
    pub values: Vec<f64>,
}

impl FeatureFrame {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub frames: Vec<FeatureFrame>,
    pub mask: PartMask,
    pub mode: NormalizationMode,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.frames.first().map_or(0, FeatureFrame::len)
    }

    /// Picks frames by 1-based index.
    pub fn select(&self, indices: &[usize]) -> FeatureSequence {
        FeatureSequence {
            frames: indices
                .iter()
                .map(|&i| self.frames[i - 1].clone())
                .collect(),
            mask: self.mask,
            mode: self.mode,
        }
    }
}

/// Population mean and standard deviation.
fn moments<'a>(values: impl Iterator<Item = &'a f64> + Clone) -> (f64, f64) {
    let mut n = 0usize;
    let mut sum = 0.0;
    for v in values.clone() {
        sum += v;
        n += 1;
    }
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

fn standardize(v: f64, mean: f64, std: f64) -> f64 {
    if std < DEGENERATE_STD {
        0.0
    } else {
        (v - mean) / std
    }
}

/// Standardizes one frame's part groups under `mode`. Zero-variance slices become zeros.
pub fn normalize_frame(groups: &[PartGroup], mode: NormalizationMode) -> FeatureFrame {
    let m: usize = groups.iter().map(PartGroup::len).sum();
    let mut values = Vec::with_capacity(2 * m);
    let all_x = || groups.iter().flat_map(|g| g.xs.iter());
    let all_y = || groups.iter().flat_map(|g| g.ys.iter());
    match mode {
        NormalizationMode::Feature => {
            let (mean, std) = moments(all_x().chain(all_y()));
            values.extend(all_x().chain(all_y()).map(|&v| standardize(v, mean, std)));
        }
        NormalizationMode::TwoD => {
            let (mx, sx) = moments(all_x());
            let (my, sy) = moments(all_y());
            values.extend(all_x().map(|&v| standardize(v, mx, sx)));
            values.extend(all_y().map(|&v| standardize(v, my, sy)));
        }
        NormalizationMode::Object => {
            let stats: Vec<(f64, f64)> = groups
                .iter()
                .map(|g| moments(g.xs.iter().chain(g.ys.iter())))
                .collect();
            for (g, &(mean, std)) in groups.iter().zip(&stats) {
                values.extend(g.xs.iter().map(|&v| standardize(v, mean, std)));
            }
            for (g, &(mean, std)) in groups.iter().zip(&stats) {
                values.extend(g.ys.iter().map(|&v| standardize(v, mean, std)));
            }
        }
        NormalizationMode::Object2D => {
            for g in groups {
                let (mean, std) = moments(g.xs.iter());
                values.extend(g.xs.iter().map(|&v| standardize(v, mean, std)));
            }
            for g in groups {
                let (mean, std) = moments(g.ys.iter());
                values.extend(g.ys.iter().map(|&v| standardize(v, mean, std)));
            }
        }
    }
    FeatureFrame { values }
}

pub fn video_to_features(
    frames: &[FramePose],
    mask: PartMask,
    mode: NormalizationMode,
) -> Result<FeatureSequence, KeypointError> {
    if frames.is_empty() {
        return Err(KeypointError::EmptyVideo);
    }
    let frames = frames
        .iter()
        .map(|pose| normalize_frame(&select_parts(pose, mask), mode))
        .collect();
    Ok(FeatureSequence { frames, mask, mode })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pose_with(f: impl Fn(usize, usize) -> (f64, f64)) -> FramePose {
        let part = |p: usize, n: usize| {
            (0..n)
                .map(|i| {
                    let (x, y) = f(p, i);
                    Keypoint2D {
                        x,
                        y,
                        confidence: 0.9,
                    }
                })
                .collect::<Vec<_>>()
        };
        FramePose {
            body: part(0, BODY_POINTS),
            face: part(1, FACE_POINTS),
            left_hand: part(2, HAND_POINTS),
            right_hand: part(3, HAND_POINTS),
        }
    }

    fn json_with_lengths(pose: usize, face: usize, lh: usize, rh: usize) -> String {
        let arr = |n: usize| {
            let v: Vec<String> = (0..n)
                .map(|i| {
                    if i % 3 == 2 {
                        "0.5".into()
                    } else {
                        i.to_string()
                    }
                })
                .collect();
            format!("[{}]", v.join(","))
        };
        format!(
            "{{\"people\":[{{\"pose_keypoints_2d\":{},\"face_keypoints_2d\":{},\"hand_left_keypoints_2d\":{},\"hand_right_keypoints_2d\":{}}}]}}",
            arr(pose),
            arr(face),
            arr(lh),
            arr(rh)
        )
    }

    #[test]
    fn parses_full_frame() {
        let pose = parse_frame_json(json_with_lengths(75, 210, 63, 63).as_bytes()).unwrap();
        assert_eq!(
            (
                pose.body.len(),
                pose.face.len(),
                pose.left_hand.len(),
                pose.right_hand.len()
            ),
            (25, 70, 21, 21)
        );
        assert_eq!(
            pose.body[1],
            Keypoint2D {
                x: 3.0,
                y: 4.0,
                confidence: 0.5
            }
        );
    }

    #[test]
    fn empty_people_is_missing_person() {
        let err = parse_frame_json(br#"{"people": []}"#).unwrap_err();
        assert!(matches!(err, KeypointError::MissingPerson));
    }

    #[test]
    fn bad_lengths_are_malformed() {
        let err = parse_frame_json(json_with_lengths(74, 210, 63, 63).as_bytes()).unwrap_err();
        assert!(matches!(
            err,
            KeypointError::MalformedKeypoints {
                part: "pose_keypoints_2d",
                ..
            }
        ));
        let err = parse_frame_json(json_with_lengths(75, 207, 63, 63).as_bytes()).unwrap_err();
        assert!(matches!(
            err,
            KeypointError::MalformedKeypoints {
                part: "face_keypoints_2d",
                ..
            }
        ));
    }

    #[test]
    fn json_writer_round_trips() {
        let pose = pose_with(|p, i| (100.0 * p as f64 + i as f64 * 1.25, 7.5 - i as f64));
        let back = parse_frame_json(pose.to_json().as_bytes()).unwrap();
        assert_eq!(back, pose);
        assert_eq!(
            parse_frames_jsonl(&format!("{}\n{}\n", pose.to_json(), pose.to_json()))
                .unwrap()
                .len(),
            2
        );
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(1234.567891234), "1234.56789");
        assert_eq!(format_sig9(0.5), "0.5");
        assert_eq!(format_sig9(-0.0), "0");
        assert_eq!(format_sig9(12.0), "12");
        assert_eq!(format_sig9(0.000123456789123), "0.000123456789");
    }

    #[test]
    fn part_selection_counts() {
        let pose = pose_with(|p, i| (p as f64, i as f64));
        let full = select_parts(&pose, PartMask::FULL);
        let sizes: Vec<usize> = full.iter().map(PartGroup::len).collect();
        assert_eq!(sizes, vec![12, 21, 21, 70]);
        assert_eq!(sizes.iter().sum::<usize>(), 124);

        let body = select_parts(&pose, PartMask::new(true, false, false).unwrap());
        assert_eq!(body.len(), 1);
        let idx: Vec<usize> = body[0].ys.iter().map(|&y| y as usize).collect();
        assert_eq!(idx, vec![0, 1, 2, 3, 4, 5, 6, 7, 15, 16, 17, 18]);

        let hands = select_parts(&pose, PartMask::new(false, true, false).unwrap());
        assert_eq!(hands.iter().map(PartGroup::len).sum::<usize>(), 42);
        assert_eq!(hands[0].name, "left_hand");
    }

    #[test]
    fn feature_dim_formula() {
        for mask in PartMask::all() {
            let expected = 2
                * (12 * mask.use_body as usize
                    + 42 * mask.use_hands as usize
                    + 70 * mask.use_face as usize);
            assert_eq!(mask.feature_dim(), expected);
            let pose = pose_with(|p, i| ((p * 7 + i) as f64, (i * i) as f64));
            let f = normalize_frame(&select_parts(&pose, mask), NormalizationMode::Object2D);
            assert_eq!(f.len(), expected);
        }
        assert!(PartMask::new(false, false, false).is_err());
    }

    #[test]
    fn object_2d_toy_part() {
        let g = PartGroup {
            name: "toy",
            xs: vec![0.0, 1.0, 2.0],
            ys: vec![5.0, 5.0, 5.0],
        };
        let f = normalize_frame(&[g], NormalizationMode::Object2D);
        let expected = [-1.224744871391589, 0.0, 1.224744871391589];
        for (a, b) in f.values[..3].iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(&f.values[3..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_variance_in_every_mode() {
        let g = PartGroup {
            name: "flat",
            xs: vec![0.1; 4],
            ys: vec![0.1; 4],
        };
        for mode in NormalizationMode::ALL {
            let f = normalize_frame(std::slice::from_ref(&g), mode);
            assert!(f.values.iter().all(|&v| v == 0.0), "{mode}");
        }
    }

    #[test]
    fn feature_mode_flat_vector() {
        let g = PartGroup {
            name: "p",
            xs: vec![0.0, 0.0],
            ys: vec![2.0, 2.0],
        };
        let f = normalize_frame(&[g], NormalizationMode::Feature);
        assert_eq!(f.values, vec![-1.0, -1.0, 1.0, 1.0]);
    }

    #[test]
    fn layout_is_x_block_then_y_block() {
        let a = PartGroup {
            name: "a",
            xs: vec![0.0, 2.0],
            ys: vec![0.0, 4.0],
        };
        let b = PartGroup {
            name: "b",
            xs: vec![10.0, 30.0],
            ys: vec![1.0, 1.0],
        };
        let f = normalize_frame(&[a, b], NormalizationMode::Object2D);
        assert_eq!(f.values, vec![-1.0, 1.0, -1.0, 1.0, -1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn object_mode_shares_stats_across_axes() {
        let g = PartGroup {
            name: "p",
            xs: vec![0.0, 0.0],
            ys: vec![2.0, 2.0],
        };
        let f = normalize_frame(&[g], NormalizationMode::Object);
        assert_eq!(f.values, vec![-1.0, -1.0, 1.0, 1.0]);
    }

    #[test]
    fn video_features() {
        let pose = pose_with(|p, i| ((p * 3 + i) as f64, (i * 2 + p) as f64 * 0.5));
        let frames = vec![pose.clone(); 50];
        let seq = video_to_features(&frames, PartMask::FULL, NormalizationMode::Object2D).unwrap();
        assert_eq!(seq.len(), 50);
        assert!(seq.frames.iter().all(|f| f.len() == 248));
        let one =
            video_to_features(&frames[..1], PartMask::FULL, NormalizationMode::Feature).unwrap();
        assert_eq!(one.len(), 1);
        assert!(matches!(
            video_to_features(&[], PartMask::FULL, NormalizationMode::Feature),
            Err(KeypointError::EmptyVideo)
        ));
    }

    #[test]
    fn mask_and_mode_parse() {
        assert_eq!(
            "body+hands".parse::<PartMask>().unwrap(),
            PartMask::new(true, true, false).unwrap()
        );
        assert_eq!("full".parse::<PartMask>().unwrap(), PartMask::FULL);
        assert!("tail".parse::<PartMask>().is_err());
        for mode in NormalizationMode::ALL {
            assert_eq!(mode.to_string().parse::<NormalizationMode>().unwrap(), mode);
        }
    }
}
