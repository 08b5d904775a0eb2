//! HTTP service and shared output helpers for the `scenecount` binary.

pub mod service;

use scenecount::FrameResult;
use serde_json::Value;

/// JSON body for one counted frame, as printed by `scenecount count` and
/// returned by `POST /v1/count`.
pub fn count_json(result: &FrameResult) -> Value {
    let mut r = result.clone();
    r.artifacts = None;
    serde_json::to_value(&r).expect("frame results serialize")
}

/// JSON body for one classified frame.
pub fn classify_json(id: &str, out: &scenecount::ClassifierOutput) -> Value {
    serde_json::json!({ "id": id, "label": out.label, "probs": out.probs })
}
