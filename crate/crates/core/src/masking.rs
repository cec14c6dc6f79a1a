//! Click-derived layer masks for localized learning.
//!
//! A click on the final-layer grid defines a softened disk: cells within
//! radius `r` of the click get weight 1, cells outside decay as
//! `exp(-4 ln2 * d / (1.5 r)^2)` where `d` is the Euclidean distance in
//! cells. The negative mask is the complement `1 - Z`. Both are rescaled so
//! the grid mean is 1 before being multiplied into the activations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Radius used on a 14x14 grid. Other grid sizes scale it linearly.
pub const REFERENCE_RADIUS: f64 = 4.0;
pub const REFERENCE_GRID: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

/// Integer cell coordinates on the S x S grid; `x` is the column, `y` the row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridPoint {
    pub x: usize,
    pub y: usize,
}

impl GridPoint {
    pub fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }
}

/// Normalized S x S mask, stored row-major (`values[y * side + x]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMask {
    side: usize,
    values: Vec<f64>,
    polarity: Polarity,
    click: GridPoint,
}

impl LayerMask {
    /// Wraps arbitrary nonnegative values without rescaling. Used for binary
    /// region masks and the all-zero annihilating mask.
    pub fn unnormalized(
        side: usize,
        values: Vec<f64>,
        polarity: Polarity,
        click: GridPoint,
    ) -> Result<Self> {
        if values.len() != side * side {
            return Err(Error::Usage(format!(
                "mask has {} cells, expected {}",
                values.len(),
                side * side
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Numeric(
                "mask values must be finite and nonnegative".into(),
            ));
        }
        Ok(Self {
            side,
            values,
            polarity,
            click,
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn polarity(&self) -> Polarity {
        self.polarity
    }

    pub fn click(&self) -> GridPoint {
        self.click
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.side + x]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Mask radius for a grid of side `side`, keeping the covered fraction of the
/// grid equal to that of r = 4 on a 14x14 grid.
pub fn default_radius(side: usize) -> f64 {
    REFERENCE_RADIUS * side as f64 / REFERENCE_GRID as f64
}

/// Maps a normalized image coordinate in [0, 1) to its grid cell.
pub fn click_to_cell(u: f64, v: f64, side: usize) -> Result<GridPoint> {
    if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
        return Err(Error::Usage(format!(
            "click ({u}, {v}) outside normalized image range [0, 1)"
        )));
    }
    let cell = |t: f64| ((t * side as f64).floor() as usize).min(side - 1);
    Ok(GridPoint::new(cell(u), cell(v)))
}

/// Softened-disk value at Euclidean distance `d` (in cells) for radius `r`.
pub fn disk_value(d: f64, r: f64) -> f64 {
    if d * d <= r * r {
        1.0
    } else {
        // distance over squared width, kept exactly as formulated
        (-4.0 * std::f64::consts::LN_2 * d / (1.5 * r).powi(2)).exp()
    }
}

pub fn raw_positive_mask(click: GridPoint, r: f64, side: usize) -> Result<Vec<f64>> {
    if click.x >= side || click.y >= side {
        return Err(Error::Usage(format!(
            "click ({}, {}) outside {side}x{side} grid",
            click.x, click.y
        )));
    }
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::Usage(format!(
            "mask radius must be positive, got {r}"
        )));
    }
    let mut raw = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let dx = x as f64 - click.x as f64;
            let dy = y as f64 - click.y as f64;
            raw.push(disk_value((dx * dx + dy * dy).sqrt(), r));
        }
    }
    Ok(raw)
}

pub fn raw_negative_mask(raw_positive: &[f64]) -> Vec<f64> {
    raw_positive.iter().map(|z| 1.0 - z).collect()
}

pub fn normalize_mask(
    raw: Vec<f64>,
    side: usize,
    polarity: Polarity,
    click: GridPoint,
) -> Result<LayerMask> {
    if raw.len() != side * side {
        return Err(Error::Usage(format!(
            "raw mask has {} cells, expected {}",
            raw.len(),
            side * side
        )));
    }
    if raw.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Numeric(
            "raw mask values must be finite and nonnegative".into(),
        ));
    }
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    if mean <= 0.0 {
        return Err(Error::DegenerateMask);
    }
    let values = raw.into_iter().map(|v| v / mean).collect();
    Ok(LayerMask {
        side,
        values,
        polarity,
        click,
    })
}

/// The normalized positive and negative masks produced by one click.
pub fn mask_pair(click: GridPoint, r: f64, side: usize) -> Result<(LayerMask, LayerMask)> {
    let positive = raw_positive_mask(click, r, side)?;
    let negative = raw_negative_mask(&positive);
    Ok((
        normalize_mask(positive, side, Polarity::Positive, click)?,
        normalize_mask(negative, side, Polarity::Negative, click)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn click_cell_is_one() {
        let raw = raw_positive_mask(GridPoint::new(3, 5), 4.0, 14).unwrap();
        assert_eq!(raw[5 * 14 + 3], 1.0);
    }

    #[test]
    fn radius_boundary_is_inclusive() {
        // (4, 0) offset is exactly d = r
        let raw = raw_positive_mask(GridPoint::new(0, 0), 4.0, 14).unwrap();
        assert_eq!(raw[4], 1.0);
        assert!(raw[5] < 1.0);
    }

    #[test]
    fn decay_value_at_twice_radius() {
        let raw = raw_positive_mask(GridPoint::new(0, 0), 4.0, 14).unwrap();
        let expected = 2f64.powf(-8.0 / 9.0);
        assert_abs_diff_eq!(raw[8], expected, epsilon = 1e-12);
        assert_abs_diff_eq!(raw[8], 0.5400, epsilon = 1e-4);
        let neg = raw_negative_mask(&raw);
        assert_abs_diff_eq!(neg[8], 0.4600, epsilon = 1e-4);
        assert_eq!(neg[0], 0.0);
    }

    #[test]
    fn out_of_grid_click_rejected() {
        assert!(matches!(
            raw_positive_mask(GridPoint::new(14, 0), 4.0, 14),
            Err(Error::Usage(_))
        ));
        assert!(raw_positive_mask(GridPoint::new(0, 0), 0.0, 14).is_err());
    }

    #[test]
    fn constant_raw_rescales_to_ones() {
        let m = normalize_mask(vec![0.5; 49], 7, Polarity::Positive, GridPoint::new(0, 0)).unwrap();
        assert!(m.values().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn zero_raw_is_degenerate() {
        let err = normalize_mask(vec![0.0; 49], 7, Polarity::Negative, GridPoint::new(3, 3));
        assert!(matches!(err, Err(Error::DegenerateMask)));
        // a radius covering the whole grid leaves nothing for the background
        let raw = raw_positive_mask(GridPoint::new(3, 3), 20.0, 7).unwrap();
        let neg = raw_negative_mask(&raw);
        assert!(matches!(
            normalize_mask(neg, 7, Polarity::Negative, GridPoint::new(3, 3)),
            Err(Error::DegenerateMask)
        ));
    }

    #[test]
    fn centre_click_peak_is_inverse_mean() {
        let click = GridPoint::new(7, 7);
        let raw = raw_positive_mask(click, 4.0, 14).unwrap();
        // independent evaluation of the disk formula over the grid
        let mut sum = 0.0;
        for y in 0..14i32 {
            for x in 0..14i32 {
                let d2 = ((x - 7).pow(2) + (y - 7).pow(2)) as f64;
                sum += if d2 <= 16.0 {
                    1.0
                } else {
                    (-4.0 * 2f64.ln() * d2.sqrt() / 36.0).exp()
                };
            }
        }
        let mean = sum / 196.0;
        let m = normalize_mask(raw, 14, Polarity::Positive, click).unwrap();
        let max = m.values().iter().cloned().fold(f64::MIN, f64::max);
        assert_abs_diff_eq!(max, 1.0 / mean, epsilon = 1e-12);
        assert_abs_diff_eq!(m.get(7, 7), 1.0 / mean, epsilon = 1e-12);
    }

    #[test]
    fn click_mapping_floors() {
        assert_eq!(click_to_cell(0.5, 0.99, 7).unwrap(), GridPoint::new(3, 6));
        assert_eq!(click_to_cell(0.0, 0.0, 14).unwrap(), GridPoint::new(0, 0));
        assert!(click_to_cell(1.0, 0.2, 7).is_err());
        assert!(click_to_cell(-0.1, 0.2, 7).is_err());
    }

    #[test]
    fn default_radius_scales_with_grid() {
        assert_eq!(default_radius(14), 4.0);
        assert_eq!(default_radius(7), 2.0);
    }

    proptest! {
        #[test]
        fn normalized_mean_is_one(raw in proptest::collection::vec(0.0f64..10.0, 49)) {
            prop_assume!(raw.iter().sum::<f64>() > 1e-6);
            let m = normalize_mask(raw.clone(), 7, Polarity::Positive, GridPoint::new(0, 0)).unwrap();
            prop_assert!((m.mean() - 1.0).abs() <= 1e-9);
            // ratios and argmax survive the rescale
            let argmax = |v: &[f64]| v.iter().enumerate().fold(0, |b, (i, x)| if *x > v[b] { i } else { b });
            prop_assert_eq!(argmax(&raw), argmax(m.values()));
        }

        #[test]
        fn masks_are_complementary_and_monotone(x in 0usize..14, y in 0usize..14, r in 0.5f64..6.0) {
            let click = GridPoint::new(x, y);
            let pos = raw_positive_mask(click, r, 14).unwrap();
            let neg = raw_negative_mask(&pos);
            for (p, n) in pos.iter().zip(&neg) {
                prop_assert!(*p > 0.0 && *p <= 1.0);
                prop_assert_eq!(p + n, 1.0);
            }
            // strictly decreasing with distance outside the disk
            let mut by_dist: Vec<(f64, f64)> = (0..196)
                .map(|i| {
                    let dx = (i % 14) as f64 - x as f64;
                    let dy = (i / 14) as f64 - y as f64;
                    ((dx * dx + dy * dy).sqrt(), pos[i])
                })
                .filter(|(d, _)| *d > r)
                .collect();
            by_dist.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            for w in by_dist.windows(2) {
                if w[1].0 > w[0].0 {
                    prop_assert!(w[0].1 > w[1].1);
                }
            }
        }

        #[test]
        fn mirrored_click_mirrors_mask(x in 0usize..7, y in 0usize..7) {
            let a = raw_positive_mask(GridPoint::new(x, y), 2.0, 7).unwrap();
            let b = raw_positive_mask(GridPoint::new(6 - x, y), 2.0, 7).unwrap();
            for row in 0..7 {
                for col in 0..7 {
                    prop_assert_eq!(a[row * 7 + col], b[row * 7 + (6 - col)]);
                }
            }
        }
    }
}
