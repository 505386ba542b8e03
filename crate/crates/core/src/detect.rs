//! Region-layer decoding, non-maximum suppression and box drawing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::netcfg::RegionDesc;
use crate::tensor::FeatureMap;

pub const DEFAULT_CONF_THRESH: f32 = 0.24;
pub const DEFAULT_NMS_IOU: f32 = 0.45;

pub const VOC_LABELS: [&str; 20] = [
    "aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat", "chair", "cow",
    "diningtable", "dog", "horse", "motorbike", "person", "pottedplant", "sheep", "sofa", "train",
    "tvmonitor",
];

/// One detected object. `bbox` is `[cx, cy, w, h]` relative to the image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class: usize,
    pub label: String,
    pub confidence: f32,
    #[serde(rename = "box")]
    pub bbox: [f32; 4],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeOptions {
    pub conf_thresh: f32,
    pub nms_iou: f32,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            conf_thresh: DEFAULT_CONF_THRESH,
            nms_iou: DEFAULT_NMS_IOU,
        }
    }
}

pub fn label_for(class: usize) -> String {
    VOC_LABELS
        .get(class)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("class{class}"))
}

fn logistic(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Clips a center-format box to the unit square.
pub fn clip_box(b: [f32; 4]) -> [f32; 4] {
    let x0 = (b[0] - b[2] / 2.0).clamp(0.0, 1.0);
    let x1 = (b[0] + b[2] / 2.0).clamp(0.0, 1.0);
    let y0 = (b[1] - b[3] / 2.0).clamp(0.0, 1.0);
    let y1 = (b[1] + b[3] / 2.0).clamp(0.0, 1.0);
    [(x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0]
}

pub fn iou(a: [f32; 4], b: [f32; 4]) -> f32 {
    let overlap = |ca: f32, wa: f32, cb: f32, wb: f32| {
        let lo = (ca - wa / 2.0).max(cb - wb / 2.0);
        let hi = (ca + wa / 2.0).min(cb + wb / 2.0);
        (hi - lo).max(0.0)
    };
    let inter = overlap(a[0], a[2], b[0], b[2]) * overlap(a[1], a[3], b[1], b[3]);
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy per-class suppression: visiting boxes by falling confidence, drop
/// any whose IoU with a kept box of its class reaches `nms_iou`.
pub fn nms(mut dets: Vec<Detection>, nms_iou: f32) -> Vec<Detection> {
    dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        if kept
            .iter()
            .all(|k| k.class != d.class || iou(k.bbox, d.bbox) < nms_iou)
        {
            kept.push(d);
        }
    }
    kept
}

/// Decodes a region layer's input into detections.
///
/// Channels hold, per anchor, planes `x, y, w, h, objectness` followed by
/// one score plane per class. Boxes come back relative to the network
/// input, clipped to `[0, 1]`, sorted by falling confidence.
pub fn decode_detections(fm: &FeatureMap, region: &RegionDesc, opts: &DecodeOptions) -> Result<Vec<Detection>> {
    let (c, h, w) = fm.dims();
    let per = region.classes + 5;
    if c != region.num * per || region.anchors.len() != 2 * region.num {
        return Err(Error::Geometry(format!(
            "region decoding needs {} channels and {} anchor values, got {c} and {}",
            region.num * per,
            2 * region.num,
            region.anchors.len()
        )));
    }
    let plane = h * w;
    let data = fm.data();
    let mut dets = Vec::new();
    let mut probs = vec![0.0f32; region.classes];
    for n in 0..region.num {
        let base = n * per * plane;
        let at = |k: usize, cell: usize| data[base + k * plane + cell];
        for row in 0..h {
            for col in 0..w {
                let cell = row * w + col;
                let objectness = logistic(at(4, cell));
                let peak = (0..region.classes).map(|k| at(5 + k, cell)).fold(f32::MIN, f32::max);
                let mut sum = 0.0;
                for (k, p) in probs.iter_mut().enumerate() {
                    *p = (at(5 + k, cell) - peak).exp();
                    sum += *p;
                }
                let bbox = clip_box([
                    (col as f32 + logistic(at(0, cell))) / w as f32,
                    (row as f32 + logistic(at(1, cell))) / h as f32,
                    at(2, cell).min(20.0).exp() * region.anchors[2 * n] / w as f32,
                    at(3, cell).min(20.0).exp() * region.anchors[2 * n + 1] / h as f32,
                ]);
                for (class, p) in probs.iter().enumerate() {
                    let confidence = objectness * p / sum;
                    if confidence >= opts.conf_thresh {
                        dets.push(Detection {
                            class,
                            label: label_for(class),
                            confidence,
                            bbox,
                        });
                    }
                }
            }
        }
    }
    Ok(nms(dets, opts.nms_iou))
}

/// Distinct color per class.
pub fn class_color(class: usize) -> [u8; 3] {
    let hue = (class * 7 % 20) as f32 / 20.0 * 6.0;
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    let (r, g, b) = match hue as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}

/// Pixel rectangle `(left, top, right, bottom)`, inclusive, clamped to the
/// image.
pub fn box_pixels(img: &Image, bbox: [f32; 4]) -> (usize, usize, usize, usize) {
    let (wf, hf) = (img.width() as f32, img.height() as f32);
    let clamp = |v: f32, hi: usize| (v.max(0.0) as usize).min(hi - 1);
    (
        clamp((bbox[0] - bbox[2] / 2.0) * wf, img.width()),
        clamp((bbox[1] - bbox[3] / 2.0) * hf, img.height()),
        clamp((bbox[0] + bbox[2] / 2.0) * wf, img.width()),
        clamp((bbox[1] + bbox[3] / 2.0) * hf, img.height()),
    )
}

/// Outlines every detection with a 2-pixel frame in its class color.
pub fn draw_boxes(img: &Image, dets: &[Detection]) -> Image {
    let mut out = img.clone();
    for d in dets {
        let color = class_color(d.class);
        let (l, t, r, b) = box_pixels(img, d.bbox);
        for inset in 0..2 {
            let (l, t) = (l + inset, t + inset);
            if l > r.saturating_sub(inset) || t > b.saturating_sub(inset) {
                break;
            }
            let (r, b) = (r - inset, b - inset);
            for x in l..=r {
                out.set_pixel(x, t, color);
                out.set_pixel(x, b, color);
            }
            for y in t..=b {
                out.set_pixel(l, y, color);
                out.set_pixel(r, y, color);
            }
        }
    }
    out
}

pub fn detections_to_json(dets: &[Detection]) -> String {
    serde_json::to_string_pretty(dets).expect("plain data")
}

pub fn detections_from_json(text: &str) -> Result<Vec<Detection>> {
    Ok(serde_json::from_str(text)?)
}
