//! Vocabulary shared by every stage: scenario labels, boxes, detections,
//! density maps, annotations and per-frame results.

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The five capture scenarios. The discriminant is the stable code used to
/// index probability vectors, confusion matrices and routing tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioLabel {
    SideView = 0,
    LongShot = 1,
    TopView = 2,
    ProtectiveSuit = 3,
    Crowd = 4,
}

pub const NUM_SCENARIOS: usize = 5;

impl ScenarioLabel {
    pub const ALL: [ScenarioLabel; NUM_SCENARIOS] = [
        ScenarioLabel::SideView,
        ScenarioLabel::LongShot,
        ScenarioLabel::TopView,
        ScenarioLabel::ProtectiveSuit,
        ScenarioLabel::Crowd,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    /// Inverse of [`ScenarioLabel::code`].
    pub fn from_code(code: i64) -> Result<Self> {
        usize::try_from(code)
            .ok()
            .and_then(|c| Self::ALL.get(c).copied())
            .ok_or(Error::InvalidScenarioCode(code))
    }

    /// Manifest tag, e.g. `"side-view"`.
    pub fn tag(self) -> &'static str {
        match self {
            ScenarioLabel::SideView => "side-view",
            ScenarioLabel::LongShot => "long-shot",
            ScenarioLabel::TopView => "top-view",
            ScenarioLabel::ProtectiveSuit => "protective-suit",
            ScenarioLabel::Crowd => "crowd",
        }
    }

    /// Display name used in report tables.
    pub fn title(self) -> &'static str {
        match self {
            ScenarioLabel::SideView => "Side-View",
            ScenarioLabel::LongShot => "Long-Shot",
            ScenarioLabel::TopView => "Top-View",
            ScenarioLabel::ProtectiveSuit => "Protective-Suit",
            ScenarioLabel::Crowd => "Crowd",
        }
    }
}

/// Converts an integer code into a label.
pub fn label_of_code(code: i64) -> Result<ScenarioLabel> {
    ScenarioLabel::from_code(code)
}

pub fn code_of_label(label: ScenarioLabel) -> usize {
    label.code()
}

impl fmt::Display for ScenarioLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ScenarioLabel {
    type Err = Error;

    /// Strict: no trimming, no case folding.
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.tag() == s)
            .ok_or_else(|| Error::UnknownScenario(s.to_string()))
    }
}

/// Axis-aligned box in pixel coordinates, stored as corners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let finite = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite());
        if !finite || x_min > x_max || y_min > y_max {
            return Err(Error::InvalidBox {
                x_min,
                y_min,
                x_max,
                y_max,
            });
        }
        Ok(BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }
    pub fn y_min(&self) -> f64 {
        self.y_min
    }
    pub fn x_max(&self) -> f64 {
        self.x_max
    }
    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    /// Area of the overlap with `other`, 0 when disjoint or touching.
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Clips the box to `[0, width] x [0, height]`. `None` when nothing remains.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        let x_min = self.x_min.clamp(0.0, width);
        let x_max = self.x_max.clamp(0.0, width);
        let y_min = self.y_min.clamp(0.0, height);
        let y_max = self.y_max.clamp(0.0, height);
        if x_max <= x_min || y_max <= y_min {
            None
        } else {
            Some(BBox {
                x_min,
                y_min,
                x_max,
                y_max,
            })
        }
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectionKind {
    Body,
    Head,
}

/// A scored box for one person (body) or head instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(deserialize_with = "de_score")]
    pub score: f64,
    pub kind: DetectionKind,
}

fn de_score<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    let s = f64::deserialize(d)?;
    if (0.0..=1.0).contains(&s) {
        Ok(s)
    } else {
        Err(serde::de::Error::custom(Error::InvalidScore(s)))
    }
}

impl Detection {
    pub fn new(bbox: BBox, score: f64, kind: DetectionKind) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidScore(score));
        }
        Ok(Detection { bbox, score, kind })
    }
}

/// Row-major grid of per-cell person mass.
///
/// Construction only checks the shape; values may be negative or even
/// non-finite as emitted by a backend. The counting and blurring routines
/// reject non-finite cells and clamp negative ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDensityMap")]
pub struct DensityMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

#[derive(Deserialize)]
struct RawDensityMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl TryFrom<RawDensityMap> for DensityMap {
    type Error = Error;

    fn try_from(raw: RawDensityMap) -> Result<Self> {
        DensityMap::new(raw.height, raw.width, raw.values)
    }
}

impl DensityMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::InvalidDensityShape {
                height,
                width,
                len: values.len(),
            });
        }
        Ok(DensityMap {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0.0; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.values[row * self.width + col] = v;
    }

    /// Plain sum of all cells, no clamping.
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn transposed(&self) -> DensityMap {
        let mut values = Vec::with_capacity(self.values.len());
        for c in 0..self.width {
            for r in 0..self.height {
                values.push(self.get(r, c));
            }
        }
        DensityMap {
            height: self.width,
            width: self.height,
            values,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl From<[f64; 2]> for Point {
    fn from(v: [f64; 2]) -> Self {
        Point { x: v[0], y: v[1] }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// Ground truth attached to a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "data", rename_all = "snake_case")]
pub enum Annotation {
    BodyBoxes(Vec<BBox>),
    HeadBoxes(Vec<BBox>),
    HeadDots(Vec<Point>),
    #[serde(rename = "count")]
    CountOnly(u64),
}

impl Annotation {
    pub const TYPE_TAGS: [&'static str; 4] = ["body_boxes", "head_boxes", "head_dots", "count"];
}

/// Number of persons implied by an annotation.
pub fn count_of_annotation(ann: &Annotation) -> u64 {
    match ann {
        Annotation::BodyBoxes(b) | Annotation::HeadBoxes(b) => b.len() as u64,
        Annotation::HeadDots(d) => d.len() as u64,
        Annotation::CountOnly(n) => *n,
    }
}

/// One dataset record: an image reference, its scenario tag and annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub image: String,
    pub scenario: ScenarioLabel,
    pub annotation: Annotation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
}

impl Sample {
    pub fn count(&self) -> u64 {
        count_of_annotation(&self.annotation)
    }

    /// Checks that head dots fall inside the image when its size is known.
    pub fn validate(&self) -> Result<()> {
        if let (Annotation::HeadDots(dots), Some(w), Some(h)) =
            (&self.annotation, self.width, self.height)
        {
            let (w, h) = (f64::from(w), f64::from(h));
            if let Some(p) = dots
                .iter()
                .find(|p| !(0.0..=w).contains(&p.x) || !(0.0..=h).contains(&p.y))
            {
                return Err(Error::InvalidParameter(format!(
                    "sample {:?}: dot ({}, {}) outside {}x{} image",
                    self.id, p.x, p.y, w, h
                )));
            }
        }
        Ok(())
    }
}

/// Side products of counting, kept for rendering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Artifacts {
    Detections(Vec<Detection>),
    Density(DensityMap),
}

/// Result of running one frame through the pipeline. Equality ignores
/// latency.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameResult {
    pub id: String,
    pub label: ScenarioLabel,
    /// Label emitted by the classifier before stream smoothing; only set
    /// when smoothing is enabled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classified_label: Option<ScenarioLabel>,
    pub probs: [f64; NUM_SCENARIOS],
    #[serde(rename = "model")]
    pub model_id: String,
    pub count: u64,
    /// Cells clamped to zero before summing a density map.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clamped_cells: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifacts: Option<Artifacts>,
    #[serde(skip)]
    pub latency: Duration,
}

impl PartialEq for FrameResult {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
            && self.label == other.label
            && self.classified_label == other.classified_label
            && self.probs == other.probs
            && self.model_id == other.model_id
            && self.count == other.count
            && self.clamped_cells == other.clamped_cells
            && self.artifacts == other.artifacts
    }
}

/// Round half away from zero. The single rounding rule used for density
/// counts and split sizes.
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_only_returns_stored_value() {
        assert_eq!(count_of_annotation(&Annotation::CountOnly(34)), 34);
    }

    #[test]
    fn empty_boxes_count_zero() {
        assert_eq!(count_of_annotation(&Annotation::BodyBoxes(vec![])), 0);
    }

    #[test]
    fn dots_count_by_length() {
        let dots = vec![[1.0, 2.0].into(), [3.0, 4.0].into(), [5.0, 6.0].into()];
        assert_eq!(count_of_annotation(&Annotation::HeadDots(dots)), 3);
    }

    #[test]
    fn code_table() {
        assert_eq!(label_of_code(0).unwrap(), ScenarioLabel::SideView);
        assert_eq!(label_of_code(4).unwrap(), ScenarioLabel::Crowd);
        let err = label_of_code(5).unwrap_err();
        assert!(err.to_string().contains("invalid scenario code"));
        assert!(label_of_code(-1).is_err());
        for l in ScenarioLabel::ALL {
            assert_eq!(label_of_code(code_of_label(l) as i64).unwrap(), l);
        }
    }

    #[test]
    fn strict_tags() {
        assert_eq!(
            "top-view".parse::<ScenarioLabel>().unwrap(),
            ScenarioLabel::TopView
        );
        assert!("sideview ".parse::<ScenarioLabel>().is_err());
        assert!("side-view ".parse::<ScenarioLabel>().is_err());
        assert!("Side-View".parse::<ScenarioLabel>().is_err());
    }

    #[test]
    fn bbox_rejects_inverted_and_nan() {
        assert!(BBox::new(10.0, 0.0, 5.0, 5.0).is_err());
        assert!(BBox::new(0.0, f64::NAN, 5.0, 5.0).is_err());
        assert!(BBox::new(0.0, 0.0, 0.0, 0.0).is_ok());
        let parsed: std::result::Result<BBox, _> = serde_json::from_str("[5, 5, 1, 1]");
        assert!(parsed.is_err());
    }

    #[test]
    fn detection_score_range() {
        let b = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        assert!(Detection::new(b, 1.2, DetectionKind::Body).is_err());
        assert!(Detection::new(b, 1.0, DetectionKind::Body).is_ok());
        let bad = r#"{"box":[0,0,1,1],"score":-0.1,"kind":"head"}"#;
        assert!(serde_json::from_str::<Detection>(bad).is_err());
    }

    #[test]
    fn density_shape_checked() {
        assert!(DensityMap::new(0, 3, vec![]).is_err());
        assert!(DensityMap::new(2, 2, vec![0.0; 3]).is_err());
        let m = DensityMap::new(2, 3, (0..6).map(f64::from).collect()).unwrap();
        let t = m.transposed();
        assert_eq!((t.height(), t.width()), (3, 2));
        assert_eq!(t.get(2, 1), m.get(1, 2));
    }

    #[test]
    fn dots_outside_image_rejected() {
        let s = Sample {
            id: "a".into(),
            image: "a.jpg".into(),
            scenario: ScenarioLabel::Crowd,
            annotation: Annotation::HeadDots(vec![[20.0, 5.0].into()]),
            width: Some(10),
            height: Some(10),
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        assert_eq!(round_half_away(1.5), 2.0);
        assert_eq!(round_half_away(2.5), 3.0);
        assert_eq!(round_half_away(-0.5), -1.0);
        assert_eq!(round_half_away(743.8), 744.0);
    }
}

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn count_is_permutation_invariant(mut pts in prop::collection::vec((0.0f64..100.0, 0.0f64..100.0), 0..40), seed in any::<u64>()) {
            let a = Annotation::HeadDots(pts.iter().map(|&(x, y)| Point { x, y }).collect());
            // deterministic shuffle
            let n = pts.len();
            let mut s = seed;
            for i in (1..n).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                pts.swap(i, (s >> 33) as usize % (i + 1));
            }
            let b = Annotation::HeadDots(pts.iter().map(|&(x, y)| Point { x, y }).collect());
            prop_assert_eq!(count_of_annotation(&a), count_of_annotation(&b));
        }
    }
}
