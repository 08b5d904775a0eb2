//! Scenario classifier frontend: preprocessing, softmax, argmax.

use image::{imageops, RgbImage};
use serde::{Deserialize, Serialize};

use crate::backend::{ClassifierBackend, Frame, ImageTensor};
use crate::domain::{ScenarioLabel, NUM_SCENARIOS};
use crate::error::{Error, Result};

/// Side of the square classifier input.
pub const INPUT_SIZE: usize = 224;

/// Per-channel `(x - mean) / std` applied after scaling pixels to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    /// ImageNet statistics.
    fn default() -> Self {
        Normalization {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl Normalization {
    pub fn identity() -> Self {
        Normalization {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|s| !(s.is_finite() && *s > 0.0))
            || self.mean.iter().any(|m| !m.is_finite())
        {
            return Err(Error::InvalidParameter(format!(
                "normalization std must be positive and finite: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Channel-major floats in [0, 1], normalized if asked.
pub(crate) fn image_to_chw(img: &RgbImage, norm: Option<&Normalization>) -> Vec<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            let mut v = f32::from(px.0[c]) / 255.0;
            if let Some(n) = norm {
                v = (v - n.mean[c]) / n.std[c];
            }
            data[(c * h + y as usize) * w + x as usize] = v;
        }
    }
    data
}

/// Bilinear resize to 224x224 (aspect ratio not kept), scale to [0, 1],
/// then normalize.
pub fn preprocess(img: &RgbImage, norm: &Normalization) -> Result<ImageTensor> {
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::EmptyImage);
    }
    let side = INPUT_SIZE as u32;
    let data = if img.dimensions() == (side, side) {
        image_to_chw(img, Some(norm))
    } else {
        let resized = imageops::resize(img, side, side, imageops::FilterType::Triangle);
        image_to_chw(&resized, Some(norm))
    };
    Ok(ImageTensor {
        channels: 3,
        height: INPUT_SIZE,
        width: INPUT_SIZE,
        data,
    })
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLogit(i));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierOutput {
    pub label: ScenarioLabel,
    pub probs: [f64; NUM_SCENARIOS],
}

impl ClassifierOutput {
    /// Builds the output from raw backend scores.
    pub fn from_scores(scores: &[f32], output_is_probabilities: bool) -> Result<Self> {
        let raw: Vec<f64> = scores.iter().map(|&v| f64::from(v)).collect();
        if raw.len() != NUM_SCENARIOS {
            return Err(Error::Contract(format!(
                "classifier returned {} scores, expected {NUM_SCENARIOS}",
                raw.len()
            )));
        }
        let probs = if output_is_probabilities {
            if let Some(i) = raw.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLogit(i));
            }
            let sum: f64 = raw.iter().sum();
            if raw.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-3 {
                return Err(Error::Contract(format!(
                    "classifier output is not a probability vector (sum {sum})"
                )));
            }
            // re-normalize float32 rounding away
            raw.iter().map(|p| p / sum).collect()
        } else {
            softmax(&raw)?
        };
        let mut out = [0.0; NUM_SCENARIOS];
        out.copy_from_slice(&probs);
        Ok(ClassifierOutput {
            label: ScenarioLabel::ALL[argmax(&out)],
            probs: out,
        })
    }
}

/// Frontend settings for a classifier backend.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSettings {
    /// The backend already ends in a softmax; skip ours.
    pub output_is_probabilities: bool,
    pub normalization: Normalization,
}

/// Runs the backend on a frame and maps the result to a label.
pub fn classify(
    frame: &Frame,
    backend: &dyn ClassifierBackend,
    settings: &ClassifierSettings,
) -> Result<ClassifierOutput> {
    let tensor = if backend.needs_pixels() {
        let img = frame.rgb()?;
        Some(preprocess(&img, &settings.normalization)?)
    } else {
        None
    };
    let scores = backend.infer(frame, tensor.as_ref())?;
    crate::backend::check_classifier_output(backend.name(), &scores)?;
    ClassifierOutput::from_scores(&scores, settings.output_is_probabilities)
}
