//! Inference backends for the three model families.
//!
//! A backend is an opaque inference function. Classifier backends return
//! five raw scores (logits, or probabilities when the exported graph ends in
//! a softmax); detector backends return decoded, pre-NMS detections; density
//! backends return a density map at their native resolution. Every backend
//! is either a deterministic stub or an ONNX exchange file.

mod onnx;
mod stub;

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{DensityMap, Detection, DetectionKind, Sample, NUM_SCENARIOS};
use crate::error::{Error, Result};

pub use onnx::{ExchangeFileSpec, OnnxClassifier, OnnxDensity, OnnxDetector};
pub use stub::{
    ClassifierStubParams, ConfusionSpec, DensityErrorModel, DensityStubParams, DetectorStubParams,
    ErrorModel, ScoreDistribution, StubClassifier, StubDensity, StubDetector,
};

/// Planar float image, channel-major (`C x H x W`).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Where a frame's pixels come from.
#[derive(Debug, Clone)]
pub enum FrameImage {
    Decoded(Arc<RgbImage>),
    File(PathBuf),
    /// Synthetic frames used with stub backends carry no pixels.
    Absent,
}

/// One unit of work: an image plus, optionally, its ground truth (which only
/// stub backends read).
#[derive(Debug)]
pub struct Frame {
    pub id: String,
    pub image: FrameImage,
    pub truth: Option<Arc<Sample>>,
    decoded: OnceLock<Arc<RgbImage>>,
}

impl Clone for Frame {
    fn clone(&self) -> Self {
        Frame {
            id: self.id.clone(),
            image: self.image.clone(),
            truth: self.truth.clone(),
            decoded: self.decoded.clone(),
        }
    }
}

impl Frame {
    pub fn new(id: impl Into<String>, image: FrameImage, truth: Option<Arc<Sample>>) -> Self {
        Frame {
            id: id.into(),
            image,
            truth,
            decoded: OnceLock::new(),
        }
    }

    /// A frame built from a dataset sample, pixels loaded lazily from
    /// `image_path` if given.
    pub fn from_sample(sample: Arc<Sample>, image_path: Option<PathBuf>) -> Self {
        let image = image_path.map_or(FrameImage::Absent, FrameImage::File);
        Frame::new(sample.id.clone(), image, Some(sample))
    }

    /// Decodes encoded image bytes; the frame id is the content hash.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)?.to_rgb8();
        if img.width() == 0 || img.height() == 0 {
            return Err(Error::EmptyImage);
        }
        Ok(Frame::new(
            content_id(bytes),
            FrameImage::Decoded(Arc::new(img)),
            None,
        ))
    }

    pub fn with_truth(mut self, truth: Option<Arc<Sample>>) -> Self {
        self.truth = truth;
        self
    }

    /// Decoded RGB pixels.
    pub fn rgb(&self) -> Result<Arc<RgbImage>> {
        match &self.image {
            FrameImage::Decoded(img) => Ok(img.clone()),
            FrameImage::Absent => Err(Error::MissingImage(self.id.clone())),
            FrameImage::File(path) => {
                if let Some(img) = self.decoded.get() {
                    return Ok(img.clone());
                }
                let img = image::open(path)
                    .map_err(|e| match e {
                        image::ImageError::IoError(io) => Error::io(path, io),
                        other => Error::Image(other),
                    })?
                    .to_rgb8();
                Ok(self.decoded.get_or_init(|| Arc::new(img)).clone())
            }
        }
    }

    /// Image size if known without decoding a file.
    pub fn dimensions(&self) -> Option<(u32, u32)> {
        if let FrameImage::Decoded(img) = &self.image {
            return Some(img.dimensions());
        }
        if let Some(img) = self.decoded.get() {
            return Some(img.dimensions());
        }
        let t = self.truth.as_ref()?;
        Some((t.width?, t.height?))
    }
}

/// Content-addressed frame id: first 16 bytes of SHA-256, hex.
pub fn content_id(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest[..16].iter().map(|b| format!("{b:02x}")).collect()
}

/// How a backend may be called from several threads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Concurrency {
    Shared,
    /// Calls must be serialized; the loader wraps the backend in a lock.
    Serialized,
}

pub trait ClassifierBackend: Send + Sync {
    fn name(&self) -> &str;

    /// Whether the backend reads the preprocessed tensor. Stubs don't, which
    /// lets the frontend skip preprocessing.
    fn needs_pixels(&self) -> bool {
        true
    }

    /// Five raw scores for the frame.
    fn infer(&self, frame: &Frame, input: Option<&ImageTensor>) -> Result<Vec<f32>>;

    fn concurrency(&self) -> Concurrency {
        Concurrency::Shared
    }
}

pub trait DetectorBackend: Send + Sync {
    fn name(&self) -> &str;

    fn kind(&self) -> DetectionKind;

    /// Decoded detections before confidence filtering and NMS.
    fn detect(&self, frame: &Frame) -> Result<Vec<Detection>>;

    fn concurrency(&self) -> Concurrency {
        Concurrency::Shared
    }
}

pub trait DensityBackend: Send + Sync {
    fn name(&self) -> &str;

    fn estimate(&self, frame: &Frame) -> Result<DensityMap>;

    fn concurrency(&self) -> Concurrency {
        Concurrency::Shared
    }
}

/// Serializes calls to a backend that declared [`Concurrency::Serialized`].
struct Serialized<B: ?Sized> {
    name: String,
    inner: Mutex<Box<B>>,
}

impl<B: ?Sized> Serialized<B> {
    fn lock(&self) -> std::sync::MutexGuard<'_, Box<B>> {
        self.inner
            .lock()
            .unwrap_or_else(|poisoned| poisoned.into_inner())
    }
}

impl ClassifierBackend for Serialized<dyn ClassifierBackend> {
    fn name(&self) -> &str {
        &self.name
    }
    fn needs_pixels(&self) -> bool {
        self.lock().needs_pixels()
    }
    fn infer(&self, frame: &Frame, input: Option<&ImageTensor>) -> Result<Vec<f32>> {
        self.lock().infer(frame, input)
    }
}

impl DetectorBackend for Serialized<dyn DetectorBackend> {
    fn name(&self) -> &str {
        &self.name
    }
    fn kind(&self) -> DetectionKind {
        self.lock().kind()
    }
    fn detect(&self, frame: &Frame) -> Result<Vec<Detection>> {
        self.lock().detect(frame)
    }
}

impl DensityBackend for Serialized<dyn DensityBackend> {
    fn name(&self) -> &str {
        &self.name
    }
    fn estimate(&self, frame: &Frame) -> Result<DensityMap> {
        self.lock().estimate(frame)
    }
}

pub fn share_classifier(b: Box<dyn ClassifierBackend>) -> Arc<dyn ClassifierBackend> {
    match b.concurrency() {
        Concurrency::Shared => Arc::from(b),
        Concurrency::Serialized => Arc::new(Serialized {
            name: b.name().to_string(),
            inner: Mutex::new(b),
        }),
    }
}

pub fn share_detector(b: Box<dyn DetectorBackend>) -> Arc<dyn DetectorBackend> {
    match b.concurrency() {
        Concurrency::Shared => Arc::from(b),
        Concurrency::Serialized => Arc::new(Serialized {
            name: b.name().to_string(),
            inner: Mutex::new(b),
        }),
    }
}

pub fn share_density(b: Box<dyn DensityBackend>) -> Arc<dyn DensityBackend> {
    match b.concurrency() {
        Concurrency::Shared => Arc::from(b),
        Concurrency::Serialized => Arc::new(Serialized {
            name: b.name().to_string(),
            inner: Mutex::new(b),
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Classifier,
    Detector,
    Density,
}

/// How to obtain a backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackendSpec {
    StubClassifier(ClassifierStubParams),
    StubDetector(DetectorStubParams),
    StubDensity(DensityStubParams),
    Onnx(ExchangeFileSpec),
}

impl BackendSpec {
    fn kind_name(&self) -> &'static str {
        match self {
            BackendSpec::StubClassifier(_) => "stub-classifier",
            BackendSpec::StubDetector(_) => "stub-detector",
            BackendSpec::StubDensity(_) => "stub-density",
            BackendSpec::Onnx(_) => "onnx",
        }
    }
}

#[derive(Clone)]
pub enum BackendHandle {
    Classifier(Arc<dyn ClassifierBackend>),
    Detector(Arc<dyn DetectorBackend>),
    Density(Arc<dyn DensityBackend>),
}

impl std::fmt::Debug for BackendHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (family, name) = match self {
            BackendHandle::Classifier(b) => ("classifier", b.name()),
            BackendHandle::Detector(b) => ("detector", b.name()),
            BackendHandle::Density(b) => ("density", b.name()),
        };
        write!(f, "BackendHandle::{family}({name})")
    }
}

impl BackendHandle {
    pub fn family(&self) -> Family {
        match self {
            BackendHandle::Classifier(_) => Family::Classifier,
            BackendHandle::Detector(_) => Family::Detector,
            BackendHandle::Density(_) => Family::Density,
        }
    }

    pub fn into_classifier(self) -> Option<Arc<dyn ClassifierBackend>> {
        match self {
            BackendHandle::Classifier(b) => Some(b),
            _ => None,
        }
    }

    pub fn into_detector(self) -> Option<Arc<dyn DetectorBackend>> {
        match self {
            BackendHandle::Detector(b) => Some(b),
            _ => None,
        }
    }

    pub fn into_density(self) -> Option<Arc<dyn DensityBackend>> {
        match self {
            BackendHandle::Density(b) => Some(b),
            _ => None,
        }
    }
}

/// Instantiates a backend of the requested family. Relative exchange-file
/// paths resolve against `base_dir`. Exchange files have their declared
/// tensor shapes checked against the family contract here.
pub fn load_backend(
    name: &str,
    spec: &BackendSpec,
    family: Family,
    base_dir: &Path,
) -> Result<BackendHandle> {
    let handle = match (spec, family) {
        (BackendSpec::StubClassifier(p), Family::Classifier) => {
            BackendHandle::Classifier(share_classifier(Box::new(StubClassifier::new(name, p)?)))
        }
        (BackendSpec::StubDetector(p), Family::Detector) => {
            BackendHandle::Detector(share_detector(Box::new(StubDetector::new(name, p)?)))
        }
        (BackendSpec::StubDensity(p), Family::Density) => {
            BackendHandle::Density(share_density(Box::new(StubDensity::new(name, p)?)))
        }
        (BackendSpec::Onnx(x), Family::Classifier) => BackendHandle::Classifier(share_classifier(
            Box::new(OnnxClassifier::load(name, x, base_dir)?),
        )),
        (BackendSpec::Onnx(x), Family::Detector) => BackendHandle::Detector(share_detector(
            Box::new(OnnxDetector::load(name, x, base_dir)?),
        )),
        (BackendSpec::Onnx(x), Family::Density) => BackendHandle::Density(share_density(Box::new(
            OnnxDensity::load(name, x, base_dir)?,
        ))),
        (spec, family) => {
            return Err(Error::Config(format!(
                "{name}: backend kind `{}` cannot serve the {family:?} family",
                spec.kind_name()
            )))
        }
    };
    Ok(handle)
}

/// Checks a classifier output against the five-score contract.
pub(crate) fn check_classifier_output(backend: &str, out: &[f32]) -> Result<()> {
    if out.len() != NUM_SCENARIOS {
        return Err(Error::ShapeMismatch {
            backend: backend.to_string(),
            what: "output dim",
            expected: NUM_SCENARIOS.to_string(),
            found: out.len().to_string(),
        });
    }
    if let Some(i) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::Inference {
            backend: backend.to_string(),
            message: format!("non-finite score at index {i}"),
        });
    }
    Ok(())
}

/// Per-frame RNG derived from a seed, a stream name and the frame id, so
/// stub output does not depend on call order. Xoshiro256++ rather than a
/// ChaCha stream: stubs draw per box and need speed, not secrecy.
pub(crate) fn keyed_rng(seed: u64, stream: &str, id: &str) -> rand_xoshiro::Xoshiro256PlusPlus {
    use rand::SeedableRng;
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.as_bytes());
    h.update([0u8]);
    h.update(id.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    rand_xoshiro::Xoshiro256PlusPlus::from_seed(key)
}
