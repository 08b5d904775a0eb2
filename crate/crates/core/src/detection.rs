//! Detector-path postprocessing: confidence filtering, IoU, greedy NMS and
//! box counting.
//!
//! Conventions: a detection survives the confidence filter when
//! `score >= threshold`; a box is suppressed when `IoU > threshold` against
//! an already kept box, so a pair at exactly the threshold both survive.
//! Equal scores are ordered by ascending input index.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::domain::{BBox, Detection};
use crate::error::{Error, Result};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.45;
pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NmsConfig {
    pub iou_threshold: f64,
    pub confidence_threshold: f64,
}

impl Default for NmsConfig {
    fn default() -> Self {
        NmsConfig {
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            confidence_threshold: DEFAULT_CONFIDENCE_THRESHOLD,
        }
    }
}

impl NmsConfig {
    pub fn new(iou_threshold: f64, confidence_threshold: f64) -> Result<Self> {
        let cfg = NmsConfig {
            iou_threshold,
            confidence_threshold,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("nms.iou_threshold", self.iou_threshold),
            ("nms.confidence_threshold", self.confidence_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidParameter(format!(
                    "{name} = {v} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Intersection over union; 0 when the union has no area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).min(1.0)
    }
}

/// Keeps detections with `score >= threshold`, preserving order.
pub fn filter_confidence(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    dets.iter()
        .filter(|d| d.score >= threshold)
        .copied()
        .collect()
}

/// Greedy non-maximum suppression. Output is in keep order (descending
/// score).
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    nms_indices(dets, iou_threshold)
        .into_iter()
        .map(|i| dets[i])
        .collect()
}

/// Same as [`nms`] but returns indices into `dets`.
pub fn nms_indices(dets: &[Detection], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    if dets.len() <= DENSE_LIMIT {
        return greedy_dense(dets, &order, iou_threshold);
    }
    match SpatialGrid::build(dets) {
        Some(grid) => greedy_grid(dets, &order, iou_threshold, &grid),
        None => greedy_dense(dets, &order, iou_threshold),
    }
}

const DENSE_LIMIT: usize = 64;

fn greedy_dense(dets: &[Detection], order: &[usize], t: f64) -> Vec<usize> {
    let mut suppressed = vec![false; order.len()];
    let mut keep = Vec::new();
    for (r, &i) in order.iter().enumerate() {
        if suppressed[r] {
            continue;
        }
        keep.push(i);
        for (s, &j) in order.iter().enumerate().skip(r + 1) {
            if !suppressed[s] && iou(&dets[i].bbox, &dets[j].bbox) > t {
                suppressed[s] = true;
            }
        }
    }
    keep
}

/// Uniform bucket grid over box extents. Two boxes with positive
/// intersection always share a bucket, and `IoU > t >= 0` needs positive
/// intersection, so only bucket neighbours need testing.
struct SpatialGrid {
    origin: (f64, f64),
    cell: f64,
    cols: usize,
    rows: usize,
    /// Bucket `b` holds `entries[starts[b]..starts[b + 1]]`.
    starts: Vec<usize>,
    entries: Vec<usize>,
}

impl SpatialGrid {
    const MAX_AXIS: usize = 512;

    fn build(dets: &[Detection]) -> Option<Self> {
        let boxes: Vec<&BBox> = dets
            .iter()
            .map(|d| &d.bbox)
            .filter(|b| b.area() > 0.0)
            .collect();
        if boxes.is_empty() {
            return None;
        }
        let x0 = boxes
            .iter()
            .map(|b| b.x_min())
            .fold(f64::INFINITY, f64::min);
        let y0 = boxes
            .iter()
            .map(|b| b.y_min())
            .fold(f64::INFINITY, f64::min);
        let x1 = boxes
            .iter()
            .map(|b| b.x_max())
            .fold(f64::NEG_INFINITY, f64::max);
        let y1 = boxes
            .iter()
            .map(|b| b.y_max())
            .fold(f64::NEG_INFINITY, f64::max);
        let mean_side =
            boxes.iter().map(|b| b.width().max(b.height())).sum::<f64>() / boxes.len() as f64;
        let span = (x1 - x0).max(y1 - y0);
        let cell = mean_side.max(span / Self::MAX_AXIS as f64);
        if !(cell.is_finite() && cell > 0.0) {
            return None;
        }
        let cols = ((x1 - x0) / cell) as usize + 1;
        let rows = ((y1 - y0) / cell) as usize + 1;
        let mut grid = SpatialGrid {
            origin: (x0, y0),
            cell,
            cols,
            rows,
            starts: vec![0; cols * rows + 1],
            entries: Vec::new(),
        };
        let mut inserted = 0usize;
        for d in dets.iter().filter(|d| d.bbox.area() > 0.0) {
            let (c0, c1, r0, r1) = grid.span_of(&d.bbox);
            for r in r0..=r1 {
                for c in c0..=c1 {
                    grid.starts[r * grid.cols + c + 1] += 1;
                }
            }
            inserted += (c1 - c0 + 1) * (r1 - r0 + 1);
            // a few huge boxes make the grid pointless
            if inserted > 16 * dets.len() {
                return None;
            }
        }
        for b in 1..grid.starts.len() {
            grid.starts[b] += grid.starts[b - 1];
        }
        let mut fill = grid.starts.clone();
        grid.entries = vec![0; inserted];
        for (i, d) in dets.iter().enumerate() {
            if d.bbox.area() <= 0.0 {
                continue;
            }
            let (c0, c1, r0, r1) = grid.span_of(&d.bbox);
            for r in r0..=r1 {
                for c in c0..=c1 {
                    let b = r * grid.cols + c;
                    grid.entries[fill[b]] = i;
                    fill[b] += 1;
                }
            }
        }
        Some(grid)
    }

    fn span_of(&self, b: &BBox) -> (usize, usize, usize, usize) {
        let idx =
            |v: f64, o: f64, n: usize| (((v - o) / self.cell).floor().max(0.0) as usize).min(n - 1);
        (
            idx(b.x_min(), self.origin.0, self.cols),
            idx(b.x_max(), self.origin.0, self.cols),
            idx(b.y_min(), self.origin.1, self.rows),
            idx(b.y_max(), self.origin.1, self.rows),
        )
    }

    fn cells_of(&self, b: &BBox) -> impl Iterator<Item = usize> + '_ {
        let (c0, c1, r0, r1) = self.span_of(b);
        (r0..=r1).flat_map(move |r| (c0..=c1).map(move |c| r * self.cols + c))
    }

    fn bucket(&self, b: usize) -> &[usize] {
        &self.entries[self.starts[b]..self.starts[b + 1]]
    }
}

fn greedy_grid(dets: &[Detection], order: &[usize], t: f64, grid: &SpatialGrid) -> Vec<usize> {
    let n = dets.len();
    let mut rank = vec![0usize; n];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    let mut suppressed = vec![false; n];
    let mut visited = vec![usize::MAX; n];
    let mut keep = Vec::new();
    for &i in order {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        if dets[i].bbox.area() <= 0.0 {
            continue;
        }
        for cell in grid.cells_of(&dets[i].bbox) {
            for &j in grid.bucket(cell) {
                if rank[j] <= rank[i] || suppressed[j] || visited[j] == i {
                    continue;
                }
                visited[j] = i;
                if iou(&dets[i].bbox, &dets[j].bbox) > t {
                    suppressed[j] = true;
                }
            }
        }
    }
    keep
}

/// Confidence filter, then NMS, then count. Zero-area boxes are dropped
/// before suppression; they could neither suppress nor be suppressed.
pub fn count_detections(raw: &[Detection], cfg: &NmsConfig) -> (u64, Vec<Detection>) {
    let confident: Vec<Detection> = filter_confidence(raw, cfg.confidence_threshold)
        .into_iter()
        .filter(|d| d.bbox.area() > 0.0)
        .collect();
    let kept = nms(&confident, cfg.iou_threshold);
    (kept.len() as u64, kept)
}
