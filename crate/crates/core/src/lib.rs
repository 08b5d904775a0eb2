//! Scenario-routed person counting.
//!
//! A five-way scenario classifier labels each frame (side-view, long-shot,
//! top-view, protective-suit, crowd) and the frame is counted by the model
//! routed to that label: a detector, counted by confidence filter plus NMS,
//! or a density estimator, counted by summing its map.
//!
//! ```
//! use scenecount::synthetic::specialist_pipeline;
//! use scenecount::{Frame, FrameImage, Sample, Annotation, ScenarioLabel};
//! use std::sync::Arc;
//!
//! let pipeline = specialist_pipeline(0.5, 0).unwrap();
//! let sample = Sample {
//!     id: "cam-3/000417".into(),
//!     image: String::new(),
//!     scenario: ScenarioLabel::TopView,
//!     annotation: Annotation::CountOnly(9),
//!     width: Some(640),
//!     height: Some(480),
//! };
//! let frame = Frame::new(sample.id.clone(), FrameImage::Absent, Some(Arc::new(sample)));
//! let result = pipeline.process_frame(&frame).into_result().unwrap();
//! assert_eq!(result.model_id, "yolov5-iii");
//! assert_eq!(result.count, 9);
//! ```
//!
//! The guide in `book/` walks through each stage; its code blocks are
//! compiled as doc-tests of this crate.

pub mod backend;
pub mod classifier;
pub mod config;
pub mod dataset;
pub mod density;
pub mod detection;
pub mod domain;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod synthetic;
pub mod visualize;

pub use backend::{load_backend, BackendSpec, Family, Frame, FrameImage};
pub use classifier::{classify, ClassifierOutput, ClassifierSettings};
pub use config::{Loaded, PipelineConfig, TruthIndex};
pub use dataset::{load_manifest, split_dataset, DatasetManifest, SplitSpec};
pub use density::{count_density, gaussian_blur_5x5, BlurConfig};
pub use detection::{count_detections, iou, nms, NmsConfig};
pub use domain::{
    Annotation, Artifacts, BBox, DensityMap, Detection, DetectionKind, FrameResult, Point, Sample,
    ScenarioLabel,
};
pub use error::{Error, Result};
pub use eval::{cross_evaluate, mae, rmse, ConfusionMatrix, CrossEvalReport, EvalDataset};
pub use pipeline::{FrameRecord, Pipeline, RoutingTable, StreamConfig};
pub use visualize::{render_result, RenderConfig};

#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/routing.md")]
    pub mod routing {}
    #[doc = include_str!("../../../book/src/detections.md")]
    pub mod detections {}
    #[doc = include_str!("../../../book/src/density.md")]
    pub mod density {}
    #[doc = include_str!("../../../book/src/datasets.md")]
    pub mod datasets {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub mod evaluation {}
    #[doc = include_str!("../../../book/src/visualization.md")]
    pub mod visualization {}
    #[doc = include_str!("../../../book/src/configuration.md")]
    pub mod configuration {}
    #[doc = include_str!("../../../book/src/serving.md")]
    pub mod serving {}
}
