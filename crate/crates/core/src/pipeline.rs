//! Classify, route, count.
//!
//! A frame is classified, its label is looked up in a total routing table,
//! and the chosen model counts it: detector models by confidence filtering
//! plus NMS, the density model by summing its map. Misroutes are never
//! corrected.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{ClassifierBackend, DensityBackend, DetectorBackend, Frame};
use crate::classifier::{classify, ClassifierOutput, ClassifierSettings};
use crate::density::count_density;
use crate::detection::{count_detections, NmsConfig};
use crate::domain::{Artifacts, FrameResult, ScenarioLabel, NUM_SCENARIOS};
use crate::error::{Error, Result};

/// Default model id per scenario, in code order.
pub const DEFAULT_MODEL_IDS: [&str; NUM_SCENARIOS] = [
    "yolov5-i",
    "yolov5-ii",
    "yolov5-iii",
    "yolov5-iv",
    "dm-count",
];

/// Total map from scenario label to model id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutingTable {
    routes: [String; NUM_SCENARIOS],
}

impl Default for RoutingTable {
    fn default() -> Self {
        RoutingTable {
            routes: DEFAULT_MODEL_IDS.map(String::from),
        }
    }
}

impl RoutingTable {
    /// Fails unless every label has a route.
    pub fn new(routes: &BTreeMap<ScenarioLabel, String>) -> Result<Self> {
        let missing: Vec<&str> = ScenarioLabel::ALL
            .iter()
            .filter(|l| !routes.contains_key(l))
            .map(|l| l.tag())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Routing(format!(
                "no route for {}",
                missing.join(", ")
            )));
        }
        Ok(RoutingTable {
            routes: ScenarioLabel::ALL.map(|l| routes[&l].clone()),
        })
    }

    pub fn route(&self, label: ScenarioLabel) -> &str {
        &self.routes[label.code()]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ScenarioLabel, &str)> {
        ScenarioLabel::ALL.into_iter().map(|l| (l, self.route(l)))
    }
}

/// How a model turns a frame into a count.
#[derive(Clone)]
pub enum CountingPath {
    Detector {
        backend: Arc<dyn DetectorBackend>,
        nms: NmsConfig,
    },
    Density {
        backend: Arc<dyn DensityBackend>,
    },
}

impl std::fmt::Debug for CountingPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CountingPath::Detector { backend, nms } => f
                .debug_struct("Detector")
                .field("backend", &backend.name())
                .field("nms", nms)
                .finish(),
            CountingPath::Density { backend } => f
                .debug_struct("Density")
                .field("backend", &backend.name())
                .finish(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountOutcome {
    pub count: u64,
    pub clamped_cells: Option<usize>,
    pub artifacts: Artifacts,
}

#[derive(Debug, Clone)]
pub struct ModelEntry {
    pub id: String,
    pub path: CountingPath,
}

impl ModelEntry {
    pub fn detector(
        id: impl Into<String>,
        backend: Arc<dyn DetectorBackend>,
        nms: NmsConfig,
    ) -> Self {
        ModelEntry {
            id: id.into(),
            path: CountingPath::Detector { backend, nms },
        }
    }

    pub fn density(id: impl Into<String>, backend: Arc<dyn DensityBackend>) -> Self {
        ModelEntry {
            id: id.into(),
            path: CountingPath::Density { backend },
        }
    }

    pub fn count(&self, frame: &Frame) -> Result<CountOutcome> {
        match &self.path {
            CountingPath::Detector { backend, nms } => {
                let raw = backend.detect(frame)?;
                let (count, kept) = count_detections(&raw, nms);
                Ok(CountOutcome {
                    count,
                    clamped_cells: None,
                    artifacts: Artifacts::Detections(kept),
                })
            }
            CountingPath::Density { backend } => {
                let map = backend.estimate(frame)?;
                let c = count_density(&map)?;
                Ok(CountOutcome {
                    count: c.count,
                    clamped_cells: Some(c.clamped_cells),
                    artifacts: Artifacts::Density(map),
                })
            }
        }
    }
}

/// Pipeline stage at which a frame failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Decode,
    Classify,
    Count,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameError {
    pub id: String,
    pub stage: Stage,
    /// Set when classification succeeded before the failure.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<ScenarioLabel>,
    #[serde(default, rename = "model", skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    pub message: String,
}

/// One output record per input frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum FrameRecord {
    Ok(FrameResult),
    Error(FrameError),
}

impl FrameRecord {
    pub fn id(&self) -> &str {
        match self {
            FrameRecord::Ok(r) => &r.id,
            FrameRecord::Error(e) => &e.id,
        }
    }

    pub fn result(&self) -> Option<&FrameResult> {
        match self {
            FrameRecord::Ok(r) => Some(r),
            FrameRecord::Error(_) => None,
        }
    }

    pub fn into_result(self) -> std::result::Result<FrameResult, FrameError> {
        match self {
            FrameRecord::Ok(r) => Ok(r),
            FrameRecord::Error(e) => Err(e),
        }
    }

    /// Drops counting artifacts, keeping the record small.
    pub fn without_artifacts(mut self) -> Self {
        if let FrameRecord::Ok(r) = &mut self {
            r.artifacts = None;
        }
        self
    }

    pub fn failed(id: impl Into<String>, stage: Stage, err: impl std::fmt::Display) -> Self {
        FrameRecord::Error(FrameError {
            id: id.into(),
            stage,
            label: None,
            model_id: None,
            message: err.to_string(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    /// Majority-vote window over classified labels; 1 disables smoothing.
    pub smoothing_window: usize,
    /// Upper bound on frames processed at once.
    pub parallelism: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            smoothing_window: 1,
            parallelism: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.smoothing_window == 0 || self.smoothing_window.is_multiple_of(2) {
            return Err(Error::InvalidParameter(format!(
                "stream.smoothing_window = {} must be a positive odd integer",
                self.smoothing_window
            )));
        }
        if self.parallelism == 0 {
            return Err(Error::InvalidParameter(
                "stream.parallelism must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Majority label over a window; ties go to the label seen most recently.
pub fn majority_label(window: &VecDeque<ScenarioLabel>) -> Option<ScenarioLabel> {
    let mut counts = [0usize; NUM_SCENARIOS];
    let mut last_seen = [0usize; NUM_SCENARIOS];
    for (i, l) in window.iter().enumerate() {
        counts[l.code()] += 1;
        last_seen[l.code()] = i;
    }
    (0..NUM_SCENARIOS)
        .filter(|&c| counts[c] > 0)
        .max_by_key(|&c| (counts[c], last_seen[c]))
        .map(|c| ScenarioLabel::ALL[c])
}

/// Rolling majority vote over the last `w` classified labels.
#[derive(Debug, Clone)]
pub struct LabelSmoother {
    window: usize,
    recent: VecDeque<ScenarioLabel>,
}

impl LabelSmoother {
    pub fn new(window: usize) -> Self {
        LabelSmoother {
            window: window.max(1),
            recent: VecDeque::with_capacity(window),
        }
    }

    /// Adds the newest label and returns the effective one.
    pub fn push(&mut self, label: ScenarioLabel) -> ScenarioLabel {
        if self.recent.len() == self.window {
            self.recent.pop_front();
        }
        self.recent.push_back(label);
        majority_label(&self.recent).unwrap_or(label)
    }
}

pub struct Pipeline {
    classifier: Arc<dyn ClassifierBackend>,
    settings: ClassifierSettings,
    routing: RoutingTable,
    models: BTreeMap<String, ModelEntry>,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline")
            .field("classifier", &self.classifier.name())
            .field("routing", &self.routing)
            .field("models", &self.models.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl Pipeline {
    /// Fails fast if a routed model id has no entry.
    pub fn new(
        classifier: Arc<dyn ClassifierBackend>,
        settings: ClassifierSettings,
        routing: RoutingTable,
        models: impl IntoIterator<Item = ModelEntry>,
    ) -> Result<Self> {
        let mut map = BTreeMap::new();
        for m in models {
            if map.contains_key(&m.id) {
                return Err(Error::Routing(format!("model {:?} defined twice", m.id)));
            }
            map.insert(m.id.clone(), m);
        }
        for (label, id) in routing.iter() {
            if !map.contains_key(id) {
                return Err(Error::Routing(format!(
                    "{label} routes to unknown model {id:?}"
                )));
            }
        }
        settings.normalization.validate()?;
        Ok(Pipeline {
            classifier,
            settings,
            routing,
            models: map,
        })
    }

    pub fn routing(&self) -> &RoutingTable {
        &self.routing
    }

    pub fn model(&self, id: &str) -> Option<&ModelEntry> {
        self.models.get(id)
    }

    pub fn models(&self) -> impl Iterator<Item = &ModelEntry> {
        self.models.values()
    }

    pub fn classifier_name(&self) -> &str {
        self.classifier.name()
    }

    /// Number of counting backends (the classifier not included).
    pub fn backend_count(&self) -> usize {
        self.models.len()
    }

    pub fn route(&self, label: ScenarioLabel) -> &ModelEntry {
        &self.models[self.routing.route(label)]
    }

    pub fn classify(&self, frame: &Frame) -> Result<ClassifierOutput> {
        classify(frame, self.classifier.as_ref(), &self.settings)
    }

    /// Counts with a named model, bypassing the classifier.
    pub fn count_with(&self, model_id: &str, frame: &Frame) -> Result<CountOutcome> {
        self.models
            .get(model_id)
            .ok_or_else(|| Error::Routing(format!("unknown model {model_id:?}")))?
            .count(frame)
    }

    /// Counts a classified frame using `label` for routing.
    fn finish(
        &self,
        frame: &Frame,
        cls: &ClassifierOutput,
        label: ScenarioLabel,
        smoothed: bool,
        started: Instant,
        classify_time: Duration,
    ) -> FrameRecord {
        let entry = self.route(label);
        let counted_at = Instant::now();
        match entry.count(frame) {
            Ok(out) => FrameRecord::Ok(FrameResult {
                id: frame.id.clone(),
                label,
                classified_label: smoothed.then_some(cls.label),
                probs: cls.probs,
                model_id: entry.id.clone(),
                count: out.count,
                clamped_cells: out.clamped_cells,
                artifacts: Some(out.artifacts),
                latency: if smoothed {
                    classify_time + counted_at.elapsed()
                } else {
                    started.elapsed()
                },
            }),
            Err(e) => {
                tracing::warn!(frame = %frame.id, model = %entry.id, error = %e, "counting failed");
                FrameRecord::Error(FrameError {
                    id: frame.id.clone(),
                    stage: Stage::Count,
                    label: Some(label),
                    model_id: Some(entry.id.clone()),
                    message: e.to_string(),
                })
            }
        }
    }

    fn classify_record(
        &self,
        frame: &Frame,
    ) -> std::result::Result<(ClassifierOutput, Duration), FrameRecord> {
        let t = Instant::now();
        self.classify(frame).map(|c| (c, t.elapsed())).map_err(|e| {
            tracing::warn!(frame = %frame.id, error = %e, "classification failed");
            FrameRecord::failed(frame.id.clone(), Stage::Classify, e)
        })
    }

    /// Classify, route and count one frame. Failures become error records.
    pub fn process_frame(&self, frame: &Frame) -> FrameRecord {
        let started = Instant::now();
        match self.classify_record(frame) {
            Ok((cls, dt)) => self.finish(frame, &cls, cls.label, false, started, dt),
            Err(rec) => rec,
        }
    }

    /// Processes an ordered stream. Frames run concurrently up to
    /// `cfg.parallelism`; output keeps input order, one record per frame.
    /// With a window above 1 each frame is routed by the majority of the
    /// last `w` successfully classified labels.
    pub fn process_stream(&self, frames: &[Frame], cfg: &StreamConfig) -> Result<Vec<FrameRecord>> {
        cfg.validate()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.parallelism)
            .build()
            .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
        if cfg.smoothing_window == 1 {
            return Ok(pool.install(|| frames.par_iter().map(|f| self.process_frame(f)).collect()));
        }
        let classified: Vec<_> =
            pool.install(|| frames.par_iter().map(|f| self.classify_record(f)).collect());
        let mut smoother = LabelSmoother::new(cfg.smoothing_window);
        let effective: Vec<Option<ScenarioLabel>> = classified
            .iter()
            .map(|c| c.as_ref().ok().map(|(cls, _)| smoother.push(cls.label)))
            .collect();
        Ok(pool.install(|| {
            frames
                .par_iter()
                .zip(classified.into_par_iter())
                .zip(effective.into_par_iter())
                .map(|((frame, c), label)| match (c, label) {
                    (Ok((cls, dt)), Some(label)) => {
                        self.finish(frame, &cls, label, true, Instant::now(), dt)
                    }
                    (Err(rec), _) => rec,
                    (Ok(_), None) => unreachable!("classified frames always get a label"),
                })
                .collect()
        }))
    }
}
