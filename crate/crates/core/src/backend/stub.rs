//! Deterministic stub backends driven by ground truth.
//!
//! Every stub output is a pure function of (parameters, seed, frame id):
//! the random stream is keyed by the frame id, never by call order.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{keyed_rng, ClassifierBackend, DensityBackend, DetectorBackend, Frame, ImageTensor};
use crate::domain::{
    Annotation, BBox, DensityMap, Detection, DetectionKind, Sample, ScenarioLabel, NUM_SCENARIOS,
};
use crate::error::{Error, Result};

/// Logit given to the drawn class; the rest get 0.
const STUB_LOGIT: f32 = 4.0;

/// Image size assumed when neither pixels nor manifest dimensions exist.
const FALLBACK_SIZE: (f64, f64) = (640.0, 480.0);

fn truth<'a>(name: &str, frame: &'a Frame) -> Result<&'a Sample> {
    frame
        .truth
        .as_deref()
        .ok_or_else(|| Error::MissingTruth(format!("{} ({name})", frame.id)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ConfusionSpec {
    /// `"identity"` or `"uniform"`.
    Named(String),
    /// Row-stochastic 5x5 matrix indexed `[ground truth][prediction]`.
    Matrix(Vec<Vec<f64>>),
}

impl ConfusionSpec {
    pub fn matrix(&self) -> Result<[[f64; NUM_SCENARIOS]; NUM_SCENARIOS]> {
        let mut m = [[0.0; NUM_SCENARIOS]; NUM_SCENARIOS];
        match self {
            ConfusionSpec::Named(n) if n == "identity" => {
                for (i, row) in m.iter_mut().enumerate() {
                    row[i] = 1.0;
                }
            }
            ConfusionSpec::Named(n) if n == "uniform" => {
                m = [[1.0 / NUM_SCENARIOS as f64; NUM_SCENARIOS]; NUM_SCENARIOS];
            }
            ConfusionSpec::Named(n) => {
                return Err(Error::InvalidParameter(format!(
                    "unknown confusion preset {n:?} (expected \"identity\" or \"uniform\")"
                )))
            }
            ConfusionSpec::Matrix(rows) => {
                if rows.len() != NUM_SCENARIOS || rows.iter().any(|r| r.len() != NUM_SCENARIOS) {
                    return Err(Error::InvalidParameter(
                        "confusion matrix must be 5x5".into(),
                    ));
                }
                for (g, row) in rows.iter().enumerate() {
                    if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                        return Err(Error::InvalidParameter(format!(
                            "confusion row {g} has a negative or non-finite entry"
                        )));
                    }
                    let sum: f64 = row.iter().sum();
                    if (sum - 1.0).abs() > 1e-9 {
                        return Err(Error::InvalidParameter(format!(
                            "confusion row {g} sums to {sum}, not 1"
                        )));
                    }
                    m[g].copy_from_slice(row);
                }
            }
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierStubParams {
    pub confusion: ConfusionSpec,
    #[serde(default)]
    pub seed: u64,
}

/// Predicts a label drawn from the confusion row of the frame's true
/// scenario.
pub struct StubClassifier {
    name: String,
    matrix: [[f64; NUM_SCENARIOS]; NUM_SCENARIOS],
    seed: u64,
}

impl StubClassifier {
    pub fn new(name: &str, p: &ClassifierStubParams) -> Result<Self> {
        Ok(StubClassifier {
            name: name.to_string(),
            matrix: p.confusion.matrix()?,
            seed: p.seed,
        })
    }

    pub fn predict(&self, id: &str, truth: ScenarioLabel) -> ScenarioLabel {
        let row = &self.matrix[truth.code()];
        let u: f64 = keyed_rng(self.seed, "classifier", id).random();
        let mut acc = 0.0;
        for (p, &w) in row.iter().enumerate() {
            acc += w;
            if u < acc {
                return ScenarioLabel::ALL[p];
            }
        }
        // u landed in the rounding slack above the last positive entry
        let last = row.iter().rposition(|&w| w > 0.0).unwrap_or(truth.code());
        ScenarioLabel::ALL[last]
    }
}

impl ClassifierBackend for StubClassifier {
    fn name(&self) -> &str {
        &self.name
    }

    fn needs_pixels(&self) -> bool {
        false
    }

    fn infer(&self, frame: &Frame, _input: Option<&ImageTensor>) -> Result<Vec<f32>> {
        let t = truth(&self.name, frame)?;
        let mut logits = vec![0.0f32; NUM_SCENARIOS];
        logits[self.predict(&frame.id, t.scenario).code()] = STUB_LOGIT;
        Ok(logits)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreDistribution {
    Constant(f64),
    Uniform([f64; 2]),
}

impl Default for ScoreDistribution {
    fn default() -> Self {
        ScoreDistribution::Constant(0.9)
    }
}

impl ScoreDistribution {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            ScoreDistribution::Constant(s) => (0.0..=1.0).contains(&s),
            ScoreDistribution::Uniform([lo, hi]) => {
                (0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi) && lo <= hi
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "score distribution {self:?} outside [0, 1]"
            )))
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            ScoreDistribution::Constant(s) => s,
            ScoreDistribution::Uniform([lo, hi]) => lo + (hi - lo) * rng.random::<f64>(),
        }
    }
}

/// Detector error model: each true box is dropped with `miss_rate`; one
/// spurious box is added with probability `false_positive_rate`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ErrorModel {
    pub miss_rate: f64,
    pub false_positive_rate: f64,
    pub scores: ScoreDistribution,
}

impl Default for ErrorModel {
    fn default() -> Self {
        ErrorModel {
            miss_rate: 0.0,
            false_positive_rate: 0.0,
            scores: ScoreDistribution::default(),
        }
    }
}

impl ErrorModel {
    fn validate(&self) -> Result<()> {
        for (n, v) in [
            ("miss_rate", self.miss_rate),
            ("false_positive_rate", self.false_positive_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidParameter(format!("{n} = {v} outside [0, 1]")));
            }
        }
        self.scores.validate()
    }
}

fn default_dot_box() -> f64 {
    8.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorStubParams {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_kind", rename = "boxes")]
    pub kind: DetectionKind,
    #[serde(default)]
    pub miss_rate: f64,
    #[serde(default)]
    pub false_positive_rate: f64,
    #[serde(default)]
    pub scores: ScoreDistribution,
    /// Overrides of the error model for frames of a given true scenario.
    #[serde(default)]
    pub per_scenario: BTreeMap<ScenarioLabel, ErrorModel>,
    /// Side of the square box placed around each annotated head dot.
    #[serde(default = "default_dot_box")]
    pub dot_box_size: f64,
}

fn default_kind() -> DetectionKind {
    DetectionKind::Body
}

impl Default for DetectorStubParams {
    fn default() -> Self {
        DetectorStubParams {
            seed: 0,
            kind: DetectionKind::Body,
            miss_rate: 0.0,
            false_positive_rate: 0.0,
            scores: ScoreDistribution::default(),
            per_scenario: BTreeMap::new(),
            dot_box_size: default_dot_box(),
        }
    }
}

impl DetectorStubParams {
    pub fn base_model(&self) -> ErrorModel {
        ErrorModel {
            miss_rate: self.miss_rate,
            false_positive_rate: self.false_positive_rate,
            scores: self.scores,
        }
    }

    pub fn model_for(&self, scenario: ScenarioLabel) -> ErrorModel {
        self.per_scenario
            .get(&scenario)
            .copied()
            .unwrap_or_else(|| self.base_model())
    }
}

/// Degrades ground-truth boxes according to an [`ErrorModel`].
pub struct StubDetector {
    name: String,
    params: DetectorStubParams,
}

impl StubDetector {
    pub fn new(name: &str, params: &DetectorStubParams) -> Result<Self> {
        params.base_model().validate()?;
        for m in params.per_scenario.values() {
            m.validate()?;
        }
        if !(params.dot_box_size.is_finite() && params.dot_box_size > 0.0) {
            return Err(Error::InvalidParameter(
                "dot_box_size must be positive".into(),
            ));
        }
        Ok(StubDetector {
            name: name.to_string(),
            params: params.clone(),
        })
    }

    /// Ground-truth boxes implied by an annotation: boxes as they are, a
    /// square around each head dot, or a grid of boxes for a bare count.
    pub fn truth_boxes(&self, sample: &Sample, size: (f64, f64)) -> Vec<BBox> {
        let half = self.params.dot_box_size / 2.0;
        match &sample.annotation {
            Annotation::BodyBoxes(b) | Annotation::HeadBoxes(b) => b.clone(),
            Annotation::HeadDots(dots) => dots
                .iter()
                .filter_map(|p| BBox::new(p.x - half, p.y - half, p.x + half, p.y + half).ok())
                .collect(),
            Annotation::CountOnly(n) => grid_boxes(*n as usize, size),
        }
    }
}

fn grid_boxes(n: usize, (w, h): (f64, f64)) -> Vec<BBox> {
    if n == 0 {
        return Vec::new();
    }
    let cols = ((n as f64 * w / h).sqrt().ceil() as usize).max(1);
    let rows = n.div_ceil(cols);
    let (cw, ch) = (w / cols as f64, h / rows as f64);
    (0..n)
        .filter_map(|i| {
            let (r, c) = ((i / cols) as f64, (i % cols) as f64);
            BBox::new(
                c * cw + 0.1 * cw,
                r * ch + 0.1 * ch,
                c * cw + 0.9 * cw,
                r * ch + 0.9 * ch,
            )
            .ok()
        })
        .collect()
}

fn frame_size(frame: &Frame, boxes: &[BBox]) -> (f64, f64) {
    if let Some((w, h)) = frame.dimensions() {
        return (f64::from(w), f64::from(h));
    }
    if boxes.is_empty() {
        return FALLBACK_SIZE;
    }
    let w = boxes.iter().map(BBox::x_max).fold(1.0, f64::max);
    let h = boxes.iter().map(BBox::y_max).fold(1.0, f64::max);
    (w, h)
}

impl DetectorBackend for StubDetector {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> DetectionKind {
        self.params.kind
    }

    fn detect(&self, frame: &Frame) -> Result<Vec<Detection>> {
        let sample = truth(&self.name, frame)?;
        let model = self.params.model_for(sample.scenario);
        let size = match frame.dimensions() {
            Some((w, h)) => (f64::from(w), f64::from(h)),
            None => FALLBACK_SIZE,
        };
        let boxes = self.truth_boxes(sample, size);
        let (w, h) = frame_size(frame, &boxes);
        let mut rng = keyed_rng(self.params.seed, "detector", &frame.id);
        let mut out = Vec::with_capacity(boxes.len() + 1);
        for b in &boxes {
            let missed = rng.random::<f64>() < model.miss_rate;
            let score = model.scores.sample(&mut rng);
            if !missed {
                out.push(Detection::new(*b, score, self.params.kind)?);
            }
        }
        if rng.random::<f64>() < model.false_positive_rate {
            let (bw, bh) = match boxes.first() {
                Some(b) if b.area() > 0.0 => (b.width(), b.height()),
                _ => (0.05 * w, 0.1 * h),
            };
            let x = rng.random::<f64>() * (w - bw).max(0.0);
            let y = rng.random::<f64>() * (h - bh).max(0.0);
            let score = model.scores.sample(&mut rng);
            out.push(Detection::new(
                BBox::new(x, y, x + bw, y + bh)?,
                score,
                self.params.kind,
            )?);
        }
        Ok(out)
    }
}

/// Density error model: `mass = c + bias + absolute_sd * z1 + relative_sd * c * z2`
/// for a true count `c`, clamped at zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensityErrorModel {
    pub bias: f64,
    pub absolute_sd: f64,
    pub relative_sd: f64,
}

impl DensityErrorModel {
    fn validate(&self) -> Result<()> {
        let ok = self.bias.is_finite()
            && self.absolute_sd.is_finite()
            && self.absolute_sd >= 0.0
            && self.relative_sd.is_finite()
            && self.relative_sd >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "invalid density error model {self:?}"
            )))
        }
    }
}

fn default_grid() -> [usize; 2] {
    [24, 32]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityStubParams {
    #[serde(default)]
    pub seed: u64,
    /// Emit this total mass regardless of ground truth.
    #[serde(default)]
    pub constant_mass: Option<f64>,
    #[serde(default)]
    pub bias: f64,
    #[serde(default)]
    pub absolute_sd: f64,
    #[serde(default)]
    pub relative_sd: f64,
    #[serde(default)]
    pub per_scenario: BTreeMap<ScenarioLabel, DensityErrorModel>,
    /// Output map size `[height, width]`.
    #[serde(default = "default_grid")]
    pub grid: [usize; 2],
}

impl Default for DensityStubParams {
    fn default() -> Self {
        DensityStubParams {
            seed: 0,
            constant_mass: None,
            bias: 0.0,
            absolute_sd: 0.0,
            relative_sd: 0.0,
            per_scenario: BTreeMap::new(),
            grid: default_grid(),
        }
    }
}

impl DensityStubParams {
    pub fn base_model(&self) -> DensityErrorModel {
        DensityErrorModel {
            bias: self.bias,
            absolute_sd: self.absolute_sd,
            relative_sd: self.relative_sd,
        }
    }

    pub fn model_for(&self, scenario: ScenarioLabel) -> DensityErrorModel {
        self.per_scenario
            .get(&scenario)
            .copied()
            .unwrap_or_else(|| self.base_model())
    }
}

/// Emits a density map whose mass follows a [`DensityErrorModel`] around the
/// true count, or a fixed mass.
pub struct StubDensity {
    name: String,
    params: DensityStubParams,
}

impl StubDensity {
    pub fn new(name: &str, params: &DensityStubParams) -> Result<Self> {
        params.base_model().validate()?;
        for m in params.per_scenario.values() {
            m.validate()?;
        }
        if let Some(m) = params.constant_mass {
            if !(m.is_finite() && m >= 0.0) {
                return Err(Error::InvalidParameter(format!("constant_mass = {m}")));
            }
        }
        if params.grid[0] == 0 || params.grid[1] == 0 {
            return Err(Error::InvalidParameter(
                "density grid must be at least 1x1".into(),
            ));
        }
        Ok(StubDensity {
            name: name.to_string(),
            params: params.clone(),
        })
    }

    fn uniform(&self, mass: f64) -> Result<DensityMap> {
        let [h, w] = self.params.grid;
        DensityMap::new(h, w, vec![mass / (h * w) as f64; h * w])
    }
}

impl DensityBackend for StubDensity {
    fn name(&self) -> &str {
        &self.name
    }

    fn estimate(&self, frame: &Frame) -> Result<DensityMap> {
        if let Some(mass) = self.params.constant_mass {
            return self.uniform(mass);
        }
        let sample = truth(&self.name, frame)?;
        let c = sample.count() as f64;
        let model = self.params.model_for(sample.scenario);
        let mut rng = keyed_rng(self.params.seed, "density", &frame.id);
        let z1: f64 = StandardNormal.sample(&mut rng);
        let z2: f64 = StandardNormal.sample(&mut rng);
        let mass = (c + model.bias + model.absolute_sd * z1 + model.relative_sd * c * z2).max(0.0);

        let Annotation::HeadDots(dots) = &sample.annotation else {
            return self.uniform(mass);
        };
        let Some((iw, ih)) = frame.dimensions() else {
            return self.uniform(mass);
        };
        if dots.is_empty() {
            return self.uniform(mass);
        }
        // deposit each dot's share of the mass in the cell under it
        let [h, w] = self.params.grid;
        let share = mass / dots.len() as f64;
        let mut map = DensityMap::zeros(h, w)?;
        for p in dots {
            let col = ((p.x / f64::from(iw)) * w as f64).clamp(0.0, (w - 1) as f64) as usize;
            let row = ((p.y / f64::from(ih)) * h as f64).clamp(0.0, (h - 1) as f64) as usize;
            map.set(row, col, map.get(row, col) + share);
        }
        Ok(map)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::FrameImage;
    use crate::density::count_density;
    use crate::domain::Point;
    use std::sync::Arc;

    fn frame(id: &str, scenario: ScenarioLabel, annotation: Annotation) -> Frame {
        let s = Sample {
            id: id.to_string(),
            image: String::new(),
            scenario,
            annotation,
            width: Some(1000),
            height: Some(1000),
        };
        Frame::new(id, FrameImage::Absent, Some(Arc::new(s)))
    }

    fn boxes(n: usize) -> Vec<BBox> {
        (0..n)
            .map(|i| {
                let x = (i % 30) as f64 * 30.0;
                let y = (i / 30) as f64 * 30.0;
                BBox::new(x, y, x + 20.0, y + 20.0).unwrap()
            })
            .collect()
    }

    fn classifier(confusion: ConfusionSpec, seed: u64) -> StubClassifier {
        StubClassifier::new("cls", &ClassifierStubParams { confusion, seed }).unwrap()
    }

    #[test]
    fn identity_confusion_is_perfect() {
        let c = classifier(ConfusionSpec::Named("identity".into()), 9);
        for (i, l) in ScenarioLabel::ALL.iter().cycle().take(200).enumerate() {
            let f = frame(&format!("f{i}"), *l, Annotation::CountOnly(1));
            let logits = c.infer(&f, None).unwrap();
            let best = (0..5)
                .max_by(|&a, &b| logits[a].total_cmp(&logits[b]))
                .unwrap();
            assert_eq!(best, l.code());
        }
    }

    #[test]
    fn uniform_rows_give_one_fifth_accuracy() {
        let c = classifier(ConfusionSpec::Named("uniform".into()), 2);
        let n = 20_000;
        let hits = (0..n)
            .filter(|i| {
                c.predict(&format!("s{i}"), ScenarioLabel::LongShot) == ScenarioLabel::LongShot
            })
            .count();
        // binomial sd = sqrt(0.2 * 0.8 / n) ~ 0.0028; allow 5 sd
        let acc = hits as f64 / n as f64;
        assert!((acc - 0.2).abs() < 0.015, "{acc}");
    }

    #[test]
    fn diagonal_098_gives_recall_near_098() {
        let mut rows = vec![vec![0.0; 5]; 5];
        for (i, r) in rows.iter_mut().enumerate() {
            r[i] = 1.0;
        }
        rows[2] = vec![0.005, 0.005, 0.98, 0.005, 0.005];
        let c = classifier(ConfusionSpec::Matrix(rows), 3);
        let n = 20_000;
        let hits = (0..n)
            .filter(|i| {
                c.predict(&format!("t{i}"), ScenarioLabel::TopView) == ScenarioLabel::TopView
            })
            .count();
        let recall = hits as f64 / n as f64;
        assert!((recall - 0.98).abs() < 0.005, "{recall}");
    }

    #[test]
    fn non_stochastic_confusion_rejected() {
        let mut rows = vec![vec![0.2; 5]; 5];
        rows[1][1] = 0.3;
        assert!(ConfusionSpec::Matrix(rows).matrix().is_err());
        assert!(ConfusionSpec::Matrix(vec![vec![0.25; 4]; 5])
            .matrix()
            .is_err());
        let mut neg = vec![vec![0.0; 5]; 5];
        for (i, r) in neg.iter_mut().enumerate() {
            r[i] = 1.0;
        }
        neg[0] = vec![1.2, -0.2, 0.0, 0.0, 0.0];
        assert!(ConfusionSpec::Matrix(neg).matrix().is_err());
        assert!(ConfusionSpec::Named("perfect".into()).matrix().is_err());
    }

    #[test]
    fn classifier_needs_truth() {
        let c = classifier(ConfusionSpec::Named("identity".into()), 0);
        let f = Frame::new("x", FrameImage::Absent, None);
        assert!(matches!(c.infer(&f, None), Err(Error::MissingTruth(_))));
    }

    fn detector(p: DetectorStubParams) -> StubDetector {
        StubDetector::new("det", &p).unwrap()
    }

    #[test]
    fn perfect_detector_returns_truth() {
        let d = detector(DetectorStubParams::default());
        let b = boxes(6);
        let dets = d
            .detect(&frame(
                "a",
                ScenarioLabel::SideView,
                Annotation::BodyBoxes(b.clone()),
            ))
            .unwrap();
        assert_eq!(dets.iter().map(|d| d.bbox).collect::<Vec<_>>(), b);
        assert!(dets
            .iter()
            .all(|d| d.score == 0.9 && d.kind == DetectionKind::Body));
    }

    #[test]
    fn full_miss_rate_empties() {
        let d = detector(DetectorStubParams {
            miss_rate: 1.0,
            ..Default::default()
        });
        let dets = d
            .detect(&frame(
                "a",
                ScenarioLabel::SideView,
                Annotation::BodyBoxes(boxes(10)),
            ))
            .unwrap();
        assert!(dets.is_empty());
    }

    #[test]
    fn miss_rate_is_binomial() {
        let d = detector(DetectorStubParams {
            miss_rate: 0.1,
            seed: 4,
            ..Default::default()
        });
        let dets = d
            .detect(&frame(
                "big",
                ScenarioLabel::SideView,
                Annotation::BodyBoxes(boxes(1000)),
            ))
            .unwrap();
        // mean 900, sd sqrt(1000 * 0.1 * 0.9) ~ 9.5; allow 4 sd
        assert!((dets.len() as f64 - 900.0).abs() < 38.0, "{}", dets.len());
    }

    #[test]
    fn false_positives_and_overrides() {
        let mut per = BTreeMap::new();
        per.insert(
            ScenarioLabel::Crowd,
            ErrorModel {
                miss_rate: 1.0,
                false_positive_rate: 1.0,
                scores: ScoreDistribution::Constant(0.7),
            },
        );
        let d = detector(DetectorStubParams {
            per_scenario: per,
            ..Default::default()
        });
        let side = d
            .detect(&frame(
                "a",
                ScenarioLabel::SideView,
                Annotation::BodyBoxes(boxes(3)),
            ))
            .unwrap();
        assert_eq!(side.len(), 3);
        let crowd = d
            .detect(&frame(
                "a",
                ScenarioLabel::Crowd,
                Annotation::BodyBoxes(boxes(3)),
            ))
            .unwrap();
        assert_eq!(crowd.len(), 1);
        assert_eq!(crowd[0].score, 0.7);
        assert!(crowd[0].bbox.x_max() <= 1000.0 && crowd[0].bbox.y_max() <= 1000.0);
    }

    #[test]
    fn detector_is_pure_in_frame_id() {
        let d = detector(DetectorStubParams {
            miss_rate: 0.3,
            false_positive_rate: 0.5,
            scores: ScoreDistribution::Uniform([0.4, 1.0]),
            seed: 8,
            ..Default::default()
        });
        let f = frame(
            "same",
            ScenarioLabel::TopView,
            Annotation::HeadBoxes(boxes(50)),
        );
        assert_eq!(d.detect(&f).unwrap(), d.detect(&f).unwrap());
        let g = frame(
            "other",
            ScenarioLabel::TopView,
            Annotation::HeadBoxes(boxes(50)),
        );
        assert_ne!(d.detect(&f).unwrap(), d.detect(&g).unwrap());
    }

    #[test]
    fn dots_and_counts_become_boxes() {
        let d = detector(DetectorStubParams::default());
        let dots =
            Annotation::HeadDots(vec![Point { x: 10.0, y: 10.0 }, Point { x: 50.0, y: 50.0 }]);
        assert_eq!(
            d.detect(&frame("a", ScenarioLabel::Crowd, dots))
                .unwrap()
                .len(),
            2
        );
        let dets = d
            .detect(&frame("b", ScenarioLabel::Crowd, Annotation::CountOnly(37)))
            .unwrap();
        assert_eq!(dets.len(), 37);
        for i in 0..dets.len() {
            for j in i + 1..dets.len() {
                assert_eq!(dets[i].bbox.intersection_area(&dets[j].bbox), 0.0);
            }
        }
    }

    #[test]
    fn invalid_rates_rejected() {
        assert!(StubDetector::new(
            "d",
            &DetectorStubParams {
                miss_rate: 1.5,
                ..Default::default()
            }
        )
        .is_err());
        assert!(StubDensity::new(
            "d",
            &DensityStubParams {
                relative_sd: -1.0,
                ..Default::default()
            }
        )
        .is_err());
    }

    #[test]
    fn constant_mass_density() {
        let d = StubDensity::new(
            "dm",
            &DensityStubParams {
                constant_mass: Some(743.8),
                ..Default::default()
            },
        )
        .unwrap();
        let m = d
            .estimate(&Frame::new("x", FrameImage::Absent, None))
            .unwrap();
        assert!((m.total() - 743.8).abs() < 1e-9);
        assert_eq!(count_density(&m).unwrap().count, 744);
    }

    #[test]
    fn exact_density_reproduces_count() {
        let d = StubDensity::new("dm", &DensityStubParams::default()).unwrap();
        let dots: Vec<Point> = (0..96)
            .map(|i| Point {
                x: i as f64 * 10.0,
                y: 500.0,
            })
            .collect();
        for ann in [Annotation::HeadDots(dots), Annotation::CountOnly(96)] {
            let m = d.estimate(&frame("c", ScenarioLabel::Crowd, ann)).unwrap();
            assert_eq!(count_density(&m).unwrap().count, 96);
        }
    }

    #[test]
    fn density_noise_is_keyed_by_id() {
        let d = StubDensity::new(
            "dm",
            &DensityStubParams {
                relative_sd: 0.2,
                seed: 5,
                ..Default::default()
            },
        )
        .unwrap();
        let f = frame("k", ScenarioLabel::Crowd, Annotation::CountOnly(500));
        assert_eq!(d.estimate(&f).unwrap(), d.estimate(&f).unwrap());
    }
}
