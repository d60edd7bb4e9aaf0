//! Signer-region geometry: detections to a single crop plan.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("no boxes to combine")]
    EmptyInput,
    #[error("box {0:?} is not a valid finite box")]
    InvalidBox([f64; 4]),
    #[error("target aspect {aspect} cannot fit a {frame_w}x{frame_h} frame")]
    Unsatisfiable { aspect: f64, frame_w: u32, frame_h: u32 },
    #[error("crop is empty after rounding")]
    DegenerateBox,
}

/// Axis-aligned box in pixel coordinates, `x0 <= x1`, `y0 <= y1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, GeometryError> {
        let ok = [x0, y0, x1, y1].iter().all(|v| v.is_finite()) && x0 <= x1 && y0 <= y1;
        if ok {
            Ok(BBox { x0, y0, x1, y1 })
        } else {
            Err(GeometryError::InvalidBox([x0, y0, x1, y1]))
        }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }

    pub fn within_frame(&self, frame_w: u32, frame_h: u32) -> bool {
        self.x0 >= 0.0 && self.y0 >= 0.0 && self.x1 <= frame_w as f64 && self.y1 <= frame_h as f64
    }

    pub fn clamp(&self, frame_w: u32, frame_h: u32) -> BBox {
        let (w, h) = (frame_w as f64, frame_h as f64);
        let x0 = self.x0.clamp(0.0, w);
        let y0 = self.y0.clamp(0.0, h);
        BBox {
            x0,
            y0,
            x1: self.x1.clamp(x0, w),
            y1: self.y1.clamp(y0, h),
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeometryError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub frame_index: usize,
    pub bbox: BBox,
    pub score: f64,
}

/// Why a clip produced no signer region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SkipReason {
    MultiPerson,
    NoDetection,
}

impl SkipReason {
    pub fn as_str(self) -> &'static str {
        match self {
            SkipReason::MultiPerson => "MultiPerson",
            SkipReason::NoDetection => "NoDetection",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Region {
    Signer(BBox),
    Skip(SkipReason),
}

/// Integer crop rectangle plus output size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropPlan {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    pub out_w: u32,
    pub out_h: u32,
}

impl CropPlan {
    pub fn crop_box(&self) -> BBox {
        BBox {
            x0: self.x as f64,
            y0: self.y as f64,
            x1: (self.x + self.w) as f64,
            y1: (self.y + self.h) as f64,
        }
    }
}

pub fn union_boxes(boxes: &[BBox]) -> Result<BBox, GeometryError> {
    let (first, rest) = boxes.split_first().ok_or(GeometryError::EmptyInput)?;
    Ok(rest.iter().fold(*first, |acc, b| BBox {
        x0: acc.x0.min(b.x0),
        y0: acc.y0.min(b.y0),
        x1: acc.x1.max(b.x1),
        y1: acc.y1.max(b.y1),
    }))
}

/// Grow each side by `pad_fraction` of the box's own extent on that axis,
/// then clamp to the frame.
pub fn pad_box(b: &BBox, pad_fraction: f64, frame_w: u32, frame_h: u32) -> BBox {
    let dx = b.width() * pad_fraction;
    let dy = b.height() * pad_fraction;
    BBox {
        x0: b.x0 - dx,
        y0: b.y0 - dy,
        x1: b.x1 + dx,
        y1: b.y1 + dy,
    }
    .clamp(frame_w, frame_h)
}

/// Threshold detections, then pick the clip's signer region.
///
/// Any frame left with two or more detections skips the clip as
/// multi-person; if no frame has a detection the clip is skipped as empty.
/// Otherwise the region is the union of every surviving detection.
pub fn select_signer_region(detections: &BTreeMap<usize, Vec<Detection>>, min_score: f64) -> Region {
    let mut survivors = Vec::new();
    for dets in detections.values() {
        let kept: Vec<BBox> = dets.iter().filter(|d| d.score >= min_score).map(|d| d.bbox).collect();
        if kept.len() >= 2 {
            return Region::Skip(SkipReason::MultiPerson);
        }
        survivors.extend(kept);
    }
    match union_boxes(&survivors) {
        Ok(b) => Region::Signer(b),
        Err(_) => Region::Skip(SkipReason::NoDetection),
    }
}

/// Widen or heighten `b` about its center until `width / height` equals
/// `target_aspect`, then slide it back inside the frame.
///
/// Fails with [`GeometryError::Unsatisfiable`] when the expanded box is
/// larger than the frame; callers fall back to the clamped input box.
pub fn expand_to_aspect(b: &BBox, target_aspect: f64, frame_w: u32, frame_h: u32) -> Result<BBox, GeometryError> {
    let (w, h) = (b.width(), b.height());
    let (cx, cy) = ((b.x0 + b.x1) / 2.0, (b.y0 + b.y1) / 2.0);
    let (nw, nh) = if h == 0.0 || w / h < target_aspect {
        (h * target_aspect, h)
    } else {
        (w, w / target_aspect)
    };
    let (nw, nh) = (nw.max(w), nh.max(h));
    let (fw, fh) = (frame_w as f64, frame_h as f64);
    if nw > fw || nh > fh {
        return Err(GeometryError::Unsatisfiable {
            aspect: target_aspect,
            frame_w,
            frame_h,
        });
    }
    let shift = |lo: f64, size: f64, limit: f64| lo.max(0.0).min(limit - size);
    let x0 = shift(cx - nw / 2.0, nw, fw);
    let y0 = shift(cy - nh / 2.0, nh, fh);
    Ok(BBox {
        x0,
        y0,
        x1: x0 + nw,
        y1: y0 + nh,
    })
}

pub fn make_crop_plan(
    b: &BBox,
    resize: Option<(u32, u32)>,
    frame_w: u32,
    frame_h: u32,
) -> Result<CropPlan, GeometryError> {
    let r = BBox {
        x0: b.x0.floor(),
        y0: b.y0.floor(),
        x1: b.x1.ceil(),
        y1: b.y1.ceil(),
    }
    .clamp(frame_w, frame_h);
    let (w, h) = (r.width() as u32, r.height() as u32);
    if w == 0 || h == 0 {
        return Err(GeometryError::DegenerateBox);
    }
    let (out_w, out_h) = resize.unwrap_or((w, h));
    if out_w == 0 || out_h == 0 {
        return Err(GeometryError::DegenerateBox);
    }
    Ok(CropPlan {
        x: r.x0 as u32,
        y: r.y0 as u32,
        w,
        h,
        out_w,
        out_h,
    })
}
