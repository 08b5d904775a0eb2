//! ONNX exchange-file backends, executed with tract.
//!
//! Shapes are checked once at load time against the family contract so a
//! wrong file fails at startup, not on the first frame.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::{imageops, Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use tract_onnx::prelude::*;

use super::{
    check_classifier_output, ClassifierBackend, Concurrency, DensityBackend, DetectorBackend,
    Frame, ImageTensor,
};
use crate::classifier::{image_to_chw, Normalization, INPUT_SIZE};
use crate::domain::{BBox, DensityMap, Detection, DetectionKind, NUM_SCENARIOS};
use crate::error::{Error, Result};

/// Detector input side used when neither the graph nor the config fixes it.
pub const DEFAULT_DETECTOR_SIZE: usize = 640;

/// Gray used to pad letterboxed detector inputs.
const LETTERBOX_FILL: u8 = 114;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExchangeFileSpec {
    pub path: PathBuf,
    /// Input tensor name; defaults to the graph's first input.
    #[serde(default)]
    pub input: Option<String>,
    /// Output tensor name; defaults to the graph's first output.
    #[serde(default)]
    pub output: Option<String>,
    /// Detection kind for detector files. Spelled `boxes` in config files
    /// because `kind` names the backend.
    #[serde(default, rename = "boxes")]
    pub kind: Option<DetectionKind>,
    /// `[height, width]` fed to detector or density graphs whose input
    /// dimensions are symbolic.
    #[serde(default)]
    pub input_size: Option<[usize; 2]>,
    /// Per-channel normalization for detector and density inputs, applied
    /// after scaling to [0, 1]. Classifier normalization lives in the
    /// classifier config instead.
    #[serde(default)]
    pub normalization: Option<Normalization>,
    /// Serialize calls through a lock instead of running concurrently.
    #[serde(default)]
    pub serialize: bool,
}

type Plan = Arc<TypedRunnableModel>;

fn tract_err(backend: &str, e: impl std::fmt::Display) -> Error {
    Error::Inference {
        backend: backend.to_string(),
        message: format!("{e:#}"),
    }
}

fn fmt_shape(dims: &[usize]) -> String {
    format!("{dims:?}")
}

/// A parsed graph with its input and output selected, still untyped.
fn open_graph(name: &str, spec: &ExchangeFileSpec, base_dir: &Path) -> Result<InferenceModel> {
    let path = if spec.path.is_absolute() {
        spec.path.clone()
    } else {
        base_dir.join(&spec.path)
    };
    if !path.is_file() {
        return Err(Error::io(
            &path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "exchange file not found"),
        ));
    }
    let mut model = onnx()
        .model_for_path(&path)
        .map_err(|e| tract_err(name, e))?;
    if let Some(input) = &spec.input {
        model = model
            .with_input_names([input])
            .map_err(|e| tract_err(name, e))?;
    }
    if let Some(output) = &spec.output {
        model = model
            .with_outputs_by_name([output])
            .map_err(|e| tract_err(name, e))?;
    }
    if model.inputs.len() != 1 {
        return Err(Error::ShapeMismatch {
            backend: name.to_string(),
            what: "input count",
            expected: "1".into(),
            found: model.inputs.len().to_string(),
        });
    }
    Ok(model)
}

/// Declared input dims if all of them are known.
fn declared_input(name: &str, model: &InferenceModel) -> Result<Option<Vec<usize>>> {
    let fact = model.input_fact(0).map_err(|e| tract_err(name, e))?;
    Ok(fact
        .shape
        .as_concrete_finite()
        .ok()
        .flatten()
        .map(|d| d.to_vec()))
}

/// Fixes the input to f32 `[1, 3, h, w]`, checking any declared shape.
fn fix_input(name: &str, model: InferenceModel, h: usize, w: usize) -> Result<InferenceModel> {
    let expected = vec![1, 3, h, w];
    if let Some(found) = declared_input(name, &model)? {
        if found != expected {
            return Err(Error::ShapeMismatch {
                backend: name.to_string(),
                what: "input shape",
                expected: fmt_shape(&expected),
                found: fmt_shape(&found),
            });
        }
    }
    model
        .with_input_fact(0, InferenceFact::dt_shape(f32::datum_type(), expected))
        .map_err(|e| tract_err(name, e))
}

/// `[h, w]` of a `[1, 3, h, w]` declared input, or the configured size.
fn input_hw(
    name: &str,
    model: &InferenceModel,
    spec: &ExchangeFileSpec,
) -> Result<Option<[usize; 2]>> {
    if let Some(d) = declared_input(name, model)? {
        if d.len() != 4 || d[0] != 1 || d[1] != 3 {
            return Err(Error::ShapeMismatch {
                backend: name.to_string(),
                what: "input shape",
                expected: "[1, 3, H, W]".into(),
                found: fmt_shape(&d),
            });
        }
        if let Some([h, w]) = spec.input_size {
            if [h, w] != [d[2], d[3]] {
                return Err(Error::ShapeMismatch {
                    backend: name.to_string(),
                    what: "input size",
                    expected: fmt_shape(&[h, w]),
                    found: fmt_shape(&d[2..]),
                });
            }
        }
        return Ok(Some([d[2], d[3]]));
    }
    Ok(spec.input_size)
}

fn typed(name: &str, model: InferenceModel) -> Result<(TypedModel, Option<Vec<usize>>)> {
    let typed = model.into_typed().map_err(|e| tract_err(name, e))?;
    let out = typed
        .output_fact(0)
        .map_err(|e| tract_err(name, e))?
        .shape
        .as_concrete()
        .map(<[usize]>::to_vec);
    Ok((typed, out))
}

fn runnable(name: &str, model: TypedModel) -> Result<Plan> {
    model
        .into_optimized()
        .and_then(|m| m.into_runnable())
        .map_err(|e| tract_err(name, e))
}

fn concurrency(spec: &ExchangeFileSpec) -> Concurrency {
    if spec.serialize {
        Concurrency::Serialized
    } else {
        Concurrency::Shared
    }
}

fn run(name: &str, plan: &Plan, input: Tensor) -> Result<(Vec<usize>, Vec<f32>)> {
    let out = plan
        .run(tvec!(input.into()))
        .map_err(|e| tract_err(name, e))?;
    let t = out[0].cast_to::<f32>().map_err(|e| tract_err(name, e))?;
    let view = t
        .to_plain_array_view::<f32>()
        .map_err(|e| tract_err(name, e))?;
    Ok((view.shape().to_vec(), view.iter().copied().collect()))
}

fn tensor(name: &str, h: usize, w: usize, data: Vec<f32>) -> Result<Tensor> {
    Tensor::from_shape(&[1, 3, h, w], &data).map_err(|e| tract_err(name, e))
}

/// Classifier exchange file: `[1, 3, 224, 224]` in, five scores out.
pub struct OnnxClassifier {
    name: String,
    plan: Plan,
    concurrency: Concurrency,
}

impl OnnxClassifier {
    pub fn load(name: &str, spec: &ExchangeFileSpec, base_dir: &Path) -> Result<Self> {
        let model = fix_input(
            name,
            open_graph(name, spec, base_dir)?,
            INPUT_SIZE,
            INPUT_SIZE,
        )?;
        let (model, out) = typed(name, model)?;
        if let Some(out) = out {
            let last = out.last().copied().unwrap_or(1);
            let lead: usize = out.iter().rev().skip(1).product();
            if last != NUM_SCENARIOS || lead != 1 {
                return Err(Error::ShapeMismatch {
                    backend: name.to_string(),
                    what: "output dim",
                    expected: NUM_SCENARIOS.to_string(),
                    found: if lead == 1 {
                        last.to_string()
                    } else {
                        fmt_shape(&out)
                    },
                });
            }
        }
        Ok(OnnxClassifier {
            name: name.to_string(),
            plan: runnable(name, model)?,
            concurrency: concurrency(spec),
        })
    }
}

impl ClassifierBackend for OnnxClassifier {
    fn name(&self) -> &str {
        &self.name
    }

    fn infer(&self, frame: &Frame, input: Option<&ImageTensor>) -> Result<Vec<f32>> {
        let input = input.ok_or_else(|| Error::MissingImage(frame.id.clone()))?;
        if input.shape() != [3, INPUT_SIZE, INPUT_SIZE] {
            return Err(Error::ShapeMismatch {
                backend: self.name.clone(),
                what: "input tensor",
                expected: fmt_shape(&[3, INPUT_SIZE, INPUT_SIZE]),
                found: fmt_shape(&input.shape()),
            });
        }
        let t = tensor(&self.name, INPUT_SIZE, INPUT_SIZE, input.data.clone())?;
        let (_, out) = run(&self.name, &self.plan, t)?;
        check_classifier_output(&self.name, &out)?;
        Ok(out)
    }

    fn concurrency(&self) -> Concurrency {
        self.concurrency
    }
}

/// Maps letterboxed coordinates back to the source image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Letterbox {
    pub scale: f64,
    pub pad_x: f64,
    pub pad_y: f64,
}

impl Letterbox {
    pub fn unmap(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.pad_x) / self.scale, (y - self.pad_y) / self.scale)
    }
}

/// Resizes `img` to fit `h x w` with its aspect ratio kept, centered on a
/// gray canvas.
pub(crate) fn letterbox(img: &RgbImage, h: usize, w: usize) -> (RgbImage, Letterbox) {
    let (iw, ih) = (f64::from(img.width()), f64::from(img.height()));
    let scale = (w as f64 / iw).min(h as f64 / ih);
    let nw = ((iw * scale).round() as u32).clamp(1, w as u32);
    let nh = ((ih * scale).round() as u32).clamp(1, h as u32);
    let resized = if (nw, nh) == img.dimensions() {
        img.clone()
    } else {
        imageops::resize(img, nw, nh, imageops::FilterType::Triangle)
    };
    let pad_x = (w as u32 - nw) / 2;
    let pad_y = (h as u32 - nh) / 2;
    let mut canvas = RgbImage::from_pixel(w as u32, h as u32, Rgb([LETTERBOX_FILL; 3]));
    imageops::replace(&mut canvas, &resized, i64::from(pad_x), i64::from(pad_y));
    // effective per-axis scale may differ slightly after rounding; use the
    // horizontal one for both so the mapping stays a similarity
    let map = Letterbox {
        scale: f64::from(nw) / iw,
        pad_x: f64::from(pad_x),
        pad_y: f64::from(pad_y),
    };
    (canvas, map)
}

/// Detector exchange file: `[1, 3, H, W]` letterboxed input; output
/// `[.., N, K]` with `K >= 5` columns `x1, y1, x2, y2, score` in input
/// pixels.
pub struct OnnxDetector {
    name: String,
    kind: DetectionKind,
    size: [usize; 2],
    normalization: Option<Normalization>,
    plan: Plan,
    concurrency: Concurrency,
}

impl OnnxDetector {
    pub fn load(name: &str, spec: &ExchangeFileSpec, base_dir: &Path) -> Result<Self> {
        let model = open_graph(name, spec, base_dir)?;
        let [h, w] = input_hw(name, &model, spec)?.unwrap_or([DEFAULT_DETECTOR_SIZE; 2]);
        let (model, out) = typed(name, fix_input(name, model, h, w)?)?;
        if let Some(out) = out {
            let ok = out.len() >= 2
                && out[out.len() - 1] >= 5
                && out[..out.len() - 2].iter().all(|&d| d == 1);
            if !ok {
                return Err(Error::ShapeMismatch {
                    backend: name.to_string(),
                    what: "output shape",
                    expected: "[1, N, >=5]".into(),
                    found: fmt_shape(&out),
                });
            }
        }
        Ok(OnnxDetector {
            name: name.to_string(),
            kind: spec.kind.unwrap_or(DetectionKind::Body),
            size: [h, w],
            normalization: spec.normalization,
            plan: runnable(name, model)?,
            concurrency: concurrency(spec),
        })
    }
}

impl DetectorBackend for OnnxDetector {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> DetectionKind {
        self.kind
    }

    fn detect(&self, frame: &Frame) -> Result<Vec<Detection>> {
        let img = frame.rgb()?;
        let [h, w] = self.size;
        let (boxed, map) = letterbox(&img, h, w);
        let t = tensor(
            &self.name,
            h,
            w,
            image_to_chw(&boxed, self.normalization.as_ref()),
        )?;
        let (shape, out) = run(&self.name, &self.plan, t)?;
        let k = shape.last().copied().unwrap_or(0);
        if k < 5 {
            return Err(tract_err(
                &self.name,
                format!("output shape {shape:?} has fewer than 5 columns"),
            ));
        }
        let (iw, ih) = (f64::from(img.width()), f64::from(img.height()));
        let mut dets = Vec::with_capacity(out.len() / k);
        for (i, row) in out.chunks_exact(k).enumerate() {
            let v: Vec<f64> = row[..5].iter().map(|&x| f64::from(x)).collect();
            if v.iter().any(|x| !x.is_finite()) {
                return Err(tract_err(
                    &self.name,
                    format!("non-finite value in detection {i}"),
                ));
            }
            let score = v[4];
            if !(0.0..=1.0).contains(&score) {
                return Err(tract_err(
                    &self.name,
                    format!("detection {i} score {score} outside [0, 1]"),
                ));
            }
            let (x1, y1) = map.unmap(v[0].min(v[2]), v[1].min(v[3]));
            let (x2, y2) = map.unmap(v[0].max(v[2]), v[1].max(v[3]));
            let Some(bbox) = BBox::new(x1, y1, x2, y2)?.clip(iw, ih) else {
                continue;
            };
            dets.push(Detection::new(bbox, score, self.kind)?);
        }
        Ok(dets)
    }

    fn concurrency(&self) -> Concurrency {
        self.concurrency
    }
}

/// Density exchange file: `[1, 3, H, W]` input (plain resize when the size
/// is fixed, native resolution otherwise); output whose last two dims are
/// the map.
pub struct OnnxDensity {
    name: String,
    size: Option<[usize; 2]>,
    normalization: Option<Normalization>,
    plan: Plan,
    concurrency: Concurrency,
}

impl OnnxDensity {
    pub fn load(name: &str, spec: &ExchangeFileSpec, base_dir: &Path) -> Result<Self> {
        let model = open_graph(name, spec, base_dir)?;
        let size = input_hw(name, &model, spec)?;
        let model = match size {
            Some([h, w]) => fix_input(name, model, h, w)?,
            None => model,
        };
        let (model, out) = typed(name, model)?;
        let rank_ok = |d: &[usize]| d.len() >= 2 && d[..d.len() - 2].iter().all(|&x| x == 1);
        if let Some(out) = out {
            if !rank_ok(&out) || out[out.len() - 1] == 0 || out[out.len() - 2] == 0 {
                return Err(Error::ShapeMismatch {
                    backend: name.to_string(),
                    what: "output shape",
                    expected: "[.., H, W] with H, W >= 1".into(),
                    found: fmt_shape(&out),
                });
            }
        } else {
            let rank = model.output_fact(0).map_err(|e| tract_err(name, e))?.rank();
            if rank < 2 {
                return Err(Error::ShapeMismatch {
                    backend: name.to_string(),
                    what: "output rank",
                    expected: ">= 2".into(),
                    found: rank.to_string(),
                });
            }
        }
        Ok(OnnxDensity {
            name: name.to_string(),
            size,
            normalization: spec.normalization,
            plan: runnable(name, model)?,
            concurrency: concurrency(spec),
        })
    }
}

impl DensityBackend for OnnxDensity {
    fn name(&self) -> &str {
        &self.name
    }

    fn estimate(&self, frame: &Frame) -> Result<DensityMap> {
        let img = frame.rgb()?;
        let img = match self.size {
            Some([h, w]) if (w as u32, h as u32) != img.dimensions() => Arc::new(imageops::resize(
                img.as_ref(),
                w as u32,
                h as u32,
                imageops::FilterType::Triangle,
            )),
            _ => img,
        };
        let (w, h) = (img.width() as usize, img.height() as usize);
        let t = tensor(
            &self.name,
            h,
            w,
            image_to_chw(&img, self.normalization.as_ref()),
        )?;
        let (shape, out) = run(&self.name, &self.plan, t)?;
        if shape.len() < 2 {
            return Err(tract_err(
                &self.name,
                format!("output shape {shape:?} has rank < 2"),
            ));
        }
        let (mh, mw) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if mh * mw != out.len() {
            return Err(tract_err(
                &self.name,
                format!("output shape {shape:?} holds more than one map"),
            ));
        }
        DensityMap::new(mh, mw, out.into_iter().map(f64::from).collect())
    }

    fn concurrency(&self) -> Concurrency {
        self.concurrency
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn letterbox_wide_image() {
        let img = RgbImage::from_pixel(200, 100, Rgb([10, 20, 30]));
        let (out, map) = letterbox(&img, 64, 64);
        assert_eq!(out.dimensions(), (64, 64));
        assert_eq!(map.scale, 0.32);
        assert_eq!((map.pad_x, map.pad_y), (0.0, 16.0));
        assert_eq!(out.get_pixel(5, 5), &Rgb([LETTERBOX_FILL; 3]));
        assert_eq!(out.get_pixel(32, 32), &Rgb([10, 20, 30]));
        let (x, y) = map.unmap(32.0, 32.0);
        assert!((x - 100.0).abs() < 1e-9 && (y - 50.0).abs() < 1e-9);
    }

    #[test]
    fn letterbox_exact_fit_is_identity() {
        let img = RgbImage::from_fn(8, 8, |x, y| Rgb([x as u8, y as u8, 0]));
        let (out, map) = letterbox(&img, 8, 8);
        assert_eq!(out, img);
        assert_eq!(map.unmap(3.0, 4.0), (3.0, 4.0));
    }

    #[test]
    fn missing_file_is_an_error() {
        let spec = ExchangeFileSpec {
            path: "no/such/model.onnx".into(),
            input: None,
            output: None,
            kind: None,
            input_size: None,
            normalization: None,
            serialize: false,
        };
        let err = OnnxClassifier::load("c", &spec, Path::new("/nonexistent"))
            .err()
            .unwrap();
        assert!(matches!(err, Error::Io { .. }), "{err}");
    }
}
