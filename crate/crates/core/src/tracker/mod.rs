//! Median Flow bounding-box tracking.
//!
//! A grid of points inside the box is tracked forward with pyramidal
//! Lucas-Kanade, then backward again; points whose round trip lands far from
//! where they started are discarded. The box follows the median displacement
//! of the surviving half and scales by the median change in pairwise
//! distances. Too few survivors, or a large median forward-backward error,
//! declares the track lost.

mod image;
mod lk;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use image::{GrayImage, Pyramid};
pub use lk::{fb_error, fb_error_pyr, lk_flow, lk_flow_pyr, LkParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f32,
    pub y: f32,
}

impl Point {
    pub fn new(x: f32, y: f32) -> Self {
        Self { x, y }
    }

    pub fn dist(self, o: Point) -> f32 {
        ((self.x - o.x).powi(2) + (self.y - o.y).powi(2)).sqrt()
    }
}

/// Axis-aligned box in pixels, described by its center and size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f32,
    pub cy: f32,
    pub width: f32,
    pub height: f32,
}

impl BBox {
    pub fn center(&self) -> Point {
        Point::new(self.cx, self.cy)
    }

    /// Shrinks the box to the frame if needed and shifts it fully inside.
    pub fn clamped(self, frame_w: usize, frame_h: usize) -> BBox {
        let (fw, fh) = (frame_w as f32, frame_h as f32);
        let width = self.width.clamp(1.0, fw);
        let height = self.height.clamp(1.0, fh);
        BBox {
            cx: self.cx.clamp(width / 2.0, fw - width / 2.0),
            cy: self.cy.clamp(height / 2.0, fh - height / 2.0),
            width,
            height,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackStatus {
    Idle,
    Active,
    Failed,
}

impl TrackStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            TrackStatus::Idle => "idle",
            TrackStatus::Active => "active",
            TrackStatus::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerState {
    pub status: TrackStatus,
    pub bbox: BBox,
    pub points: Vec<Point>,
    pub frame_index: usize,
}

impl TrackerState {
    pub fn idle() -> Self {
        Self {
            status: TrackStatus::Idle,
            bbox: BBox {
                cx: 0.0,
                cy: 0.0,
                width: 1.0,
                height: 1.0,
            },
            points: Vec::new(),
            frame_index: 0,
        }
    }

    pub fn is_active(&self) -> bool {
        self.status == TrackStatus::Active
    }

    /// The tracked box, only while the track is alive.
    pub fn active_bbox(&self) -> Option<BBox> {
        self.is_active().then_some(self.bbox)
    }

    fn failed(&self, frame_index: usize) -> Self {
        Self {
            status: TrackStatus::Failed,
            bbox: self.bbox,
            points: Vec::new(),
            frame_index,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackerParams {
    pub lk: LkParams,
    /// Points per side of the seeded grid.
    pub grid: usize,
    pub max_median_fb: f32,
    pub min_kept_fraction: f32,
    /// Default box side as a fraction of the frame height.
    pub bbox_fraction: f32,
}

impl Default for TrackerParams {
    fn default() -> Self {
        Self {
            lk: LkParams::default(),
            grid: 10,
            max_median_fb: 2.0,
            min_kept_fraction: 0.2,
            bbox_fraction: 0.25,
        }
    }
}

impl TrackerParams {
    pub fn default_bbox_side(&self, frame_height: usize) -> f32 {
        self.bbox_fraction * frame_height as f32
    }

    /// Largest per-frame box displacement accepted as a real motion.
    pub fn max_displacement(&self) -> f32 {
        (1u32 << (self.lk.levels + 2)) as f32
    }
}

fn seed_points(bbox: &BBox, grid: usize) -> Vec<Point> {
    let x0 = bbox.cx - bbox.width / 2.0;
    let y0 = bbox.cy - bbox.height / 2.0;
    let mut pts = Vec::with_capacity(grid * grid);
    for j in 0..grid {
        for i in 0..grid {
            pts.push(Point::new(
                x0 + (i as f32 + 0.5) * bbox.width / grid as f32,
                y0 + (j as f32 + 0.5) * bbox.height / grid as f32,
            ));
        }
    }
    pts
}

/// Starts a track centered on `center`. `bbox_size` defaults to a square of
/// `bbox_fraction * frame height`.
pub fn init_track(
    frame: &GrayImage,
    center: Point,
    bbox_size: Option<(f32, f32)>,
    frame_index: usize,
    params: &TrackerParams,
) -> Result<TrackerState> {
    let (w, h) = (frame.width() as f32, frame.height() as f32);
    if !(center.x >= 0.0 && center.x < w && center.y >= 0.0 && center.y < h) {
        return Err(Error::Usage(format!(
            "track center ({}, {}) outside {}x{} frame",
            center.x,
            center.y,
            frame.width(),
            frame.height()
        )));
    }
    let side = params.default_bbox_side(frame.height());
    let (width, height) = bbox_size.unwrap_or((side, side));
    let bbox = BBox {
        cx: center.x,
        cy: center.y,
        width,
        height,
    }
    .clamped(frame.width(), frame.height());
    Ok(TrackerState {
        status: TrackStatus::Active,
        points: seed_points(&bbox, params.grid),
        bbox,
        frame_index,
    })
}

fn median(values: &mut [f32]) -> f32 {
    values.sort_by(f32::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Advances an active track by one frame.
pub fn update_track(
    state: &TrackerState,
    prev: &GrayImage,
    next: &GrayImage,
    frame_index: usize,
    params: &TrackerParams,
) -> Result<TrackerState> {
    let prev = Pyramid::build(prev, params.lk.levels);
    let next = Pyramid::build(next, params.lk.levels);
    update_track_pyr(state, &prev, &next, frame_index, params)
}

/// [`update_track`] over prebuilt pyramids.
pub fn update_track_pyr(
    state: &TrackerState,
    prev: &Pyramid,
    next: &Pyramid,
    frame_index: usize,
    params: &TrackerParams,
) -> Result<TrackerState> {
    if !state.is_active() {
        return Err(Error::Usage(format!(
            "update_track on a {} tracker",
            state.status.as_str()
        )));
    }
    let forward = lk_flow_pyr(prev, next, &state.points, &params.lk)?;
    let moved: Vec<Point> = forward
        .iter()
        .zip(&state.points)
        .map(|(f, p)| f.unwrap_or(*p))
        .collect();
    let backward = lk_flow_pyr(next, prev, &moved, &params.lk)?;

    let mut tracked = Vec::new();
    for i in 0..state.points.len() {
        if let (Some(f), Some(b)) = (forward[i], backward[i]) {
            tracked.push((state.points[i], f, b.dist(state.points[i])));
        }
    }
    if tracked.is_empty() {
        return Ok(state.failed(frame_index));
    }
    let mut errors: Vec<f32> = tracked.iter().map(|t| t.2).collect();
    let median_fb = median(&mut errors);
    let kept: Vec<(Point, Point)> = tracked
        .iter()
        .filter(|t| t.2 <= median_fb)
        .map(|t| (t.0, t.1))
        .collect();
    let seeded = state.points.len() as f32;
    if (kept.len() as f32) < params.min_kept_fraction * seeded || median_fb > params.max_median_fb {
        return Ok(state.failed(frame_index));
    }

    let mut dx: Vec<f32> = kept.iter().map(|(a, b)| b.x - a.x).collect();
    let mut dy: Vec<f32> = kept.iter().map(|(a, b)| b.y - a.y).collect();
    let (mdx, mdy) = (median(&mut dx), median(&mut dy));
    if (mdx * mdx + mdy * mdy).sqrt() > params.max_displacement() {
        return Ok(state.failed(frame_index));
    }
    let mut ratios = Vec::with_capacity(kept.len() * kept.len() / 2);
    for i in 0..kept.len() {
        for j in i + 1..kept.len() {
            let before = kept[i].0.dist(kept[j].0);
            if before > 1e-3 {
                ratios.push(kept[i].1.dist(kept[j].1) / before);
            }
        }
    }
    let scale = if ratios.is_empty() {
        1.0
    } else {
        median(&mut ratios)
    };

    let (fw, fh) = (prev.width(), prev.height());
    let cx = state.bbox.cx + mdx;
    let cy = state.bbox.cy + mdy;
    if !(cx >= 0.0 && cx < fw as f32 && cy >= 0.0 && cy < fh as f32) {
        return Ok(state.failed(frame_index));
    }
    let bbox = BBox {
        cx,
        cy,
        width: (state.bbox.width * scale).max(2.0),
        height: (state.bbox.height * scale).max(2.0),
    }
    .clamped(fw, fh);
    Ok(TrackerState {
        status: TrackStatus::Active,
        points: seed_points(&bbox, params.grid),
        bbox,
        frame_index,
    })
}
