//! Iterative pyramidal Lucas-Kanade point flow.

use super::image::{GrayImage, Pyramid};
use super::Point;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LkParams {
    pub levels: usize,
    /// Window side in pixels (odd).
    pub window: usize,
    pub max_iterations: usize,
    /// Stop once an iteration moves the estimate by less than this (px).
    pub epsilon: f32,
    /// Smallest accepted eigenvalue of the structure tensor per window pixel.
    pub min_eigen: f32,
    /// Smallest accepted normalized cross-correlation between the window and
    /// its match.
    pub min_ncc: f32,
}

impl Default for LkParams {
    fn default() -> Self {
        Self {
            levels: 3,
            window: 11,
            max_iterations: 20,
            epsilon: 0.03,
            min_eigen: 1e-5,
            min_ncc: 0.65,
        }
    }
}

fn check_sizes(prev: &Pyramid, next: &Pyramid) -> Result<()> {
    if prev.width() != next.width() || prev.height() != next.height() {
        return Err(Error::Usage(format!(
            "frame sizes differ: {}x{} vs {}x{}",
            prev.width(),
            prev.height(),
            next.width(),
            next.height()
        )));
    }
    Ok(())
}

fn ncc(a: &[f32], b: &[f32]) -> f32 {
    let n = a.len() as f32;
    let ma = a.iter().sum::<f32>() / n;
    let mb = b.iter().sum::<f32>() / n;
    let (mut ab, mut aa, mut bb) = (0f32, 0f32, 0f32);
    for (x, y) in a.iter().zip(b) {
        ab += (x - ma) * (y - mb);
        aa += (x - ma) * (x - ma);
        bb += (y - mb) * (y - mb);
    }
    if aa <= 0.0 || bb <= 0.0 {
        return 0.0;
    }
    ab / (aa * bb).sqrt()
}

fn track_point(prev: &Pyramid, next: &Pyramid, p: Point, params: &LkParams) -> Option<Point> {
    let half = (params.window / 2) as isize;
    let n = (params.window * params.window) as f32;
    let mut guess = (0f32, 0f32);
    let levels = prev.levels.len().min(next.levels.len());
    let mut window_i = Vec::with_capacity(params.window * params.window);
    let mut window_g = Vec::with_capacity(params.window * params.window);
    for l in (0..levels).rev() {
        let scale = (1u32 << l) as f32;
        let (px, py) = (p.x / scale, p.y / scale);
        let lp = &prev.levels[l];
        let ln = &next.levels[l];

        window_i.clear();
        window_g.clear();
        let (mut gxx, mut gxy, mut gyy) = (0f32, 0f32, 0f32);
        for wy in -half..=half {
            for wx in -half..=half {
                let (x, y) = (px + wx as f32, py + wy as f32);
                let ix = lp.grad_x.sample(x, y);
                let iy = lp.grad_y.sample(x, y);
                gxx += ix * ix;
                gxy += ix * iy;
                gyy += iy * iy;
                window_i.push(lp.image.sample(x, y));
                window_g.push((ix, iy));
            }
        }
        let det = gxx * gyy - gxy * gxy;
        let tr = 0.5 * (gxx + gyy);
        let min_eig = tr - (0.25 * (gxx - gyy).powi(2) + gxy * gxy).sqrt();
        if min_eig / n < params.min_eigen || det <= 0.0 {
            if l == 0 {
                return None;
            }
            guess = (2.0 * guess.0, 2.0 * guess.1);
            continue;
        }

        let (mut vx, mut vy) = (0f32, 0f32);
        let mut converged = false;
        for _ in 0..params.max_iterations {
            let (mut bx, mut by) = (0f32, 0f32);
            let mut k = 0;
            for wy in -half..=half {
                for wx in -half..=half {
                    let j = ln
                        .image
                        .sample(px + wx as f32 + guess.0 + vx, py + wy as f32 + guess.1 + vy);
                    let e = window_i[k] - j;
                    bx += e * window_g[k].0;
                    by += e * window_g[k].1;
                    k += 1;
                }
            }
            let ex = (gyy * bx - gxy * by) / det;
            let ey = (gxx * by - gxy * bx) / det;
            vx += ex;
            vy += ey;
            if !(vx.is_finite() && vy.is_finite()) {
                return None;
            }
            if (ex * ex + ey * ey).sqrt() < params.epsilon {
                converged = true;
                break;
            }
        }
        if l > 0 && (!converged || vx.hypot(vy) > half as f32) {
            (vx, vy) = (0.0, 0.0);
        }
        let d = (guess.0 + vx, guess.1 + vy);
        if l == 0 {
            if !converged {
                return None;
            }
            let mut matched = Vec::with_capacity(window_i.len());
            for wy in -half..=half {
                for wx in -half..=half {
                    matched.push(ln.image.sample(px + wx as f32 + d.0, py + wy as f32 + d.1));
                }
            }
            if ncc(&window_i, &matched) < params.min_ncc {
                return None;
            }
        }
        guess = if l > 0 { (2.0 * d.0, 2.0 * d.1) } else { d };
    }
    let out = Point::new(p.x + guess.0, p.y + guess.1);
    let (w, h) = (prev.width() as f32, prev.height() as f32);
    if out.x < 0.0 || out.y < 0.0 || out.x > w - 1.0 || out.y > h - 1.0 {
        return None;
    }
    Some(out)
}

/// Tracks each point from `prev` into `next`; `None` marks a point that left
/// the frame, sits on flat structure, failed to converge or failed to match.
pub fn lk_flow(
    prev: &GrayImage,
    next: &GrayImage,
    points: &[Point],
    params: &LkParams,
) -> Result<Vec<Option<Point>>> {
    let a = Pyramid::build(prev, params.levels);
    let b = Pyramid::build(next, params.levels);
    lk_flow_pyr(&a, &b, points, params)
}

pub fn lk_flow_pyr(
    prev: &Pyramid,
    next: &Pyramid,
    points: &[Point],
    params: &LkParams,
) -> Result<Vec<Option<Point>>> {
    check_sizes(prev, next)?;
    Ok(points
        .iter()
        .map(|p| track_point(prev, next, *p, params))
        .collect())
}

/// Forward-backward error per point; `f32::INFINITY` when either direction
/// is invalid.
pub fn fb_error(
    prev: &GrayImage,
    next: &GrayImage,
    points: &[Point],
    params: &LkParams,
) -> Result<Vec<f32>> {
    let a = Pyramid::build(prev, params.levels);
    let b = Pyramid::build(next, params.levels);
    fb_error_pyr(&a, &b, points, params)
}

pub fn fb_error_pyr(
    prev: &Pyramid,
    next: &Pyramid,
    points: &[Point],
    params: &LkParams,
) -> Result<Vec<f32>> {
    let forward = lk_flow_pyr(prev, next, points, params)?;
    Ok(points
        .iter()
        .zip(forward)
        .map(|(p, f)| match f {
            Some(f) => track_point(next, prev, f, params).map_or(f32::INFINITY, |b| b.dist(*p)),
            None => f32::INFINITY,
        })
        .collect())
}
