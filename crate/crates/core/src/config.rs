//! TOML pipeline configuration. Unknown keys are rejected everywhere so a
//! misspelled threshold fails loudly instead of silently using a default.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::{load_backend, BackendSpec, Family, Frame, FrameImage};
use crate::classifier::{ClassifierSettings, Normalization};
use crate::dataset::{load_manifest, resolve_image};
use crate::density::BlurConfig;
use crate::detection::NmsConfig;
use crate::domain::{DetectionKind, Sample, ScenarioLabel};
use crate::error::{Error, Result};
use crate::eval::EvalDataset;
use crate::pipeline::{ModelEntry, Pipeline, RoutingTable, StreamConfig};
use crate::visualize::RenderConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub backend: BackendSpec,
    #[serde(default)]
    pub output_is_probabilities: bool,
    #[serde(default)]
    pub normalization: Normalization,
}

impl ClassifierConfig {
    pub fn settings(&self) -> ClassifierSettings {
        ClassifierSettings {
            output_is_probabilities: self.output_is_probabilities,
            normalization: self.normalization,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathKind {
    Detector,
    Density,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub path: PathKind,
    pub backend: BackendSpec,
    /// Per-model override of the global `[nms]` section.
    #[serde(default)]
    pub nms: Option<NmsConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    /// Column title in reports.
    pub name: String,
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub datasets: Vec<DatasetEntry>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TruthConfig {
    /// Manifests whose images are indexed by content hash, so frames that
    /// arrive as raw bytes can be paired with ground truth. Only stub
    /// backends read it.
    pub manifests: Vec<PathBuf>,
}

pub const DEFAULT_LISTEN: &str = "127.0.0.1:8080";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceConfig {
    pub listen: String,
    /// Requests processed at once.
    pub parallelism: usize,
    /// Requests allowed to wait for a slot before the service answers 429.
    pub queue: usize,
    pub max_body_bytes: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            listen: DEFAULT_LISTEN.into(),
            parallelism: std::thread::available_parallelism().map_or(1, |n| n.get()),
            queue: 64,
            max_body_bytes: 16 * 1024 * 1024,
        }
    }
}

impl ServiceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.parallelism == 0 {
            return Err(Error::Config(
                "service.parallelism must be at least 1".into(),
            ));
        }
        if self.max_body_bytes == 0 {
            return Err(Error::Config(
                "service.max_body_bytes must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub classifier: ClassifierConfig,
    #[serde(default)]
    pub nms: NmsConfig,
    #[serde(default)]
    pub density: BlurConfig,
    #[serde(default)]
    pub stream: StreamConfig,
    #[serde(default)]
    pub truth: TruthConfig,
    /// Defaults to the five standard routes.
    #[serde(default)]
    pub routing: Option<BTreeMap<ScenarioLabel, String>>,
    pub models: BTreeMap<String, ModelConfig>,
    #[serde(default)]
    pub render: RenderConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub service: ServiceConfig,
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        PipelineConfig::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.nms.validate()?;
        BlurConfig::new(self.density.sigma)?;
        self.stream.validate()?;
        self.render.validate()?;
        self.service.validate()?;
        self.classifier.normalization.validate()?;
        for (label, id) in self.routing_table()?.iter() {
            if !self.models.contains_key(id) {
                return Err(Error::Config(format!(
                    "routing.{label} names undefined model {id:?}"
                )));
            }
        }
        for (id, m) in &self.models {
            if let Some(n) = &m.nms {
                n.validate()?;
            }
            if m.path == PathKind::Density && m.nms.is_some() {
                return Err(Error::Config(format!(
                    "models.{id}: nms applies to detector models only"
                )));
            }
        }
        Ok(())
    }

    pub fn routing_table(&self) -> Result<RoutingTable> {
        match &self.routing {
            Some(r) => RoutingTable::new(r),
            None => Ok(RoutingTable::default()),
        }
    }

    /// Loads every backend and assembles the pipeline. Relative paths
    /// resolve against `base_dir`.
    pub fn build_pipeline(&self, base_dir: &Path) -> Result<Pipeline> {
        let classifier = load_backend(
            "classifier",
            &self.classifier.backend,
            Family::Classifier,
            base_dir,
        )?
        .into_classifier()
        .expect("family checked by load_backend");
        let mut models = Vec::with_capacity(self.models.len());
        for (id, m) in &self.models {
            let entry = match m.path {
                PathKind::Detector => {
                    let b = load_backend(id, &m.backend, Family::Detector, base_dir)?
                        .into_detector()
                        .expect("family checked by load_backend");
                    ModelEntry::detector(id.clone(), b, m.nms.unwrap_or(self.nms))
                }
                PathKind::Density => {
                    let b = load_backend(id, &m.backend, Family::Density, base_dir)?
                        .into_density()
                        .expect("family checked by load_backend");
                    ModelEntry::density(id.clone(), b)
                }
            };
            models.push(entry);
        }
        let pipeline = Pipeline::new(
            classifier,
            self.classifier.settings(),
            self.routing_table()?,
            models,
        )?;
        tracing::info!(models = self.models.len(), "pipeline loaded");
        Ok(pipeline)
    }

    /// Validation sets named in `[evaluation]`, as frames with truth.
    pub fn evaluation_datasets(&self, base_dir: &Path) -> Result<Vec<EvalDataset>> {
        if self.evaluation.datasets.is_empty() {
            return Err(Error::Config("[evaluation] lists no datasets".into()));
        }
        self.evaluation
            .datasets
            .iter()
            .map(|d| {
                let path = base_dir.join(&d.manifest);
                let m = load_manifest(&path)?;
                Ok(EvalDataset {
                    name: d.name.clone(),
                    frames: frames_of(&path, &m.samples),
                })
            })
            .collect()
    }

    /// Detection kind a detector model declares, for display.
    pub fn model_kind(&self, id: &str) -> Option<DetectionKind> {
        match &self.models.get(id)?.backend {
            BackendSpec::StubDetector(p) => Some(p.kind),
            BackendSpec::Onnx(x) => Some(x.kind.unwrap_or(DetectionKind::Body)),
            _ => None,
        }
    }
}

/// Frames for manifest samples; pixels load lazily when the file exists.
pub fn frames_of(manifest_path: &Path, samples: &[Sample]) -> Vec<Frame> {
    samples
        .iter()
        .map(|s| {
            let img = resolve_image(manifest_path, s);
            let image = if !s.image.is_empty() && img.is_file() {
                FrameImage::File(img)
            } else {
                FrameImage::Absent
            };
            Frame::new(s.id.clone(), image, Some(Arc::new(s.clone())))
        })
        .collect()
}

/// Ground truth looked up by the content hash of image bytes.
#[derive(Debug, Clone, Default)]
pub struct TruthIndex {
    by_hash: HashMap<String, Arc<Sample>>,
}

impl TruthIndex {
    /// Hashes every readable image of the listed manifests. Samples whose
    /// image is missing are skipped.
    pub fn load(cfg: &TruthConfig, base_dir: &Path) -> Result<Self> {
        let mut by_hash = HashMap::new();
        for m in &cfg.manifests {
            let path = base_dir.join(m);
            let manifest = load_manifest(&path)?;
            for s in manifest.samples {
                let img = resolve_image(&path, &s);
                match std::fs::read(&img) {
                    Ok(bytes) => {
                        by_hash.insert(crate::backend::content_id(&bytes), Arc::new(s));
                    }
                    Err(e) => {
                        tracing::warn!(sample = %s.id, image = %img.display(), error = %e, "truth image unreadable; skipped")
                    }
                }
            }
        }
        Ok(TruthIndex { by_hash })
    }

    pub fn insert(&mut self, bytes: &[u8], sample: Sample) {
        self.by_hash
            .insert(crate::backend::content_id(bytes), Arc::new(sample));
    }

    pub fn get(&self, content_id: &str) -> Option<Arc<Sample>> {
        self.by_hash.get(content_id).cloned()
    }

    pub fn len(&self) -> usize {
        self.by_hash.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_hash.is_empty()
    }

    /// Decodes image bytes into a frame and attaches any known truth.
    pub fn frame(&self, bytes: &[u8]) -> Result<Frame> {
        let f = Frame::from_bytes(bytes)?;
        let truth = self.get(&f.id);
        Ok(f.with_truth(truth))
    }
}

/// A config file plus everything it loads.
pub struct Loaded {
    pub config: PipelineConfig,
    pub base_dir: PathBuf,
    pub pipeline: Pipeline,
    pub truth: TruthIndex,
}

impl Loaded {
    pub fn from_path(path: &Path) -> Result<Self> {
        let config = PipelineConfig::load(path)?;
        let base_dir = path
            .parent()
            .map_or_else(|| PathBuf::from("."), Path::to_path_buf);
        let pipeline = config.build_pipeline(&base_dir)?;
        let truth = TruthIndex::load(&config.truth, &base_dir)?;
        Ok(Loaded {
            config,
            base_dir,
            pipeline,
            truth,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const STUBS: &str = r#"
[classifier]
backend = { kind = "stub-classifier", confusion = "identity" }

[models.yolov5-i]
path = "detector"
backend = { kind = "stub-detector" }
[models.yolov5-ii]
path = "detector"
backend = { kind = "stub-detector" }
[models.yolov5-iii]
path = "detector"
backend = { kind = "stub-detector", kind_ = 1 }
[models.yolov5-iv]
path = "detector"
backend = { kind = "stub-detector" }
[models.dm-count]
path = "density"
backend = { kind = "stub-density" }
"#;

    fn valid() -> String {
        STUBS.replace(", kind_ = 1", "")
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = PipelineConfig::parse(STUBS).unwrap_err().to_string();
        assert!(err.contains("kind_"), "{err}");
        let typo = valid().replace(
            "[models.yolov5-i]",
            "[nms]\niou_treshold = 0.5\n[models.yolov5-i]",
        );
        assert!(PipelineConfig::parse(&typo)
            .unwrap_err()
            .to_string()
            .contains("iou_treshold"));
    }

    #[test]
    fn defaults_apply() {
        let cfg = PipelineConfig::parse(&valid()).unwrap();
        assert_eq!(cfg.nms, NmsConfig::default());
        assert_eq!(cfg.density.sigma, 1.0);
        assert_eq!(cfg.stream.smoothing_window, 1);
        assert_eq!(cfg.classifier.normalization, Normalization::default());
        let p = cfg.build_pipeline(Path::new(".")).unwrap();
        assert_eq!(p.backend_count(), 5);
        assert_eq!(p.route(ScenarioLabel::Crowd).id, "dm-count");
    }

    #[test]
    fn missing_model_fails_fast() {
        let text = valid().replace(
            "[models.dm-count]\npath = \"density\"\nbackend = { kind = \"stub-density\" }\n",
            "",
        );
        let err = PipelineConfig::parse(&text).unwrap_err();
        assert!(err.to_string().contains("dm-count"), "{err}");
    }

    #[test]
    fn partial_routing_rejected() {
        let text = format!("{}\n[routing]\ncrowd = \"dm-count\"\n", valid());
        assert!(PipelineConfig::parse(&text)
            .unwrap_err()
            .to_string()
            .contains("no route"));
    }

    #[test]
    fn bad_values_rejected() {
        let text = format!("{}\n[stream]\nsmoothing_window = 4\n", valid());
        assert!(PipelineConfig::parse(&text).is_err());
        let text = format!("{}\n[density]\nsigma = 0.0\n", valid());
        assert!(PipelineConfig::parse(&text).is_err());
        let text = valid().replace(
            "path = \"density\"\n",
            "path = \"density\"\nnms = { iou_threshold = 0.3 }\n",
        );
        assert!(PipelineConfig::parse(&text).is_err());
    }

    #[test]
    fn wrong_family_is_a_load_error() {
        let text = valid().replace(
            "[models.dm-count]\npath = \"density\"\nbackend = { kind = \"stub-density\" }",
            "[models.dm-count]\npath = \"density\"\nbackend = { kind = \"stub-detector\" }",
        );
        let cfg = PipelineConfig::parse(&text).unwrap();
        assert!(cfg.build_pipeline(Path::new(".")).is_err());
    }
}
