use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Annotation, Frame, Scenario};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenParams {
    pub train_frames: usize,
    pub test_frames: usize,
    /// Frames are square.
    pub frame_side: usize,
    pub sprite_min: usize,
    pub sprite_max: usize,
    /// Largest per-frame target displacement, in pixels.
    pub max_step: f64,
    /// Presence segment length range, in frames.
    pub segment_min: usize,
    pub segment_max: usize,
    /// Number of distinct background textures in the world.
    pub backgrounds: usize,
    /// Largest per-frame camera translation along each axis, in pixels.
    pub jitter: usize,
    pub distractor: bool,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            train_frames: 400,
            test_frames: 200,
            frame_side: 112,
            sprite_min: 24,
            sprite_max: 32,
            max_step: 6.0,
            segment_min: 20,
            segment_max: 50,
            backgrounds: 4,
            jitter: 1,
            distractor: true,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.train_frames == 0 {
            return fail("train_frames must be positive".into());
        }
        if self.test_frames == 0 || self.test_frames % 2 != 0 {
            return fail(format!(
                "test_frames must be even and positive, got {}",
                self.test_frames
            ));
        }
        if self.frame_side < 16 {
            return fail(format!("frame_side {} is below 16", self.frame_side));
        }
        if self.sprite_min < 4 || self.sprite_min > self.sprite_max {
            return fail(format!(
                "sprite size range {}..={} is invalid",
                self.sprite_min, self.sprite_max
            ));
        }
        if self.sprite_max >= self.frame_side {
            return fail(format!(
                "sprite size {} does not fit a {} px frame",
                self.sprite_max, self.frame_side
            ));
        }
        if !(self.max_step.is_finite() && self.max_step >= 2.0) {
            return fail(format!("max_step {} must be at least 2", self.max_step));
        }
        if self.segment_min == 0 || self.segment_min > self.segment_max {
            return fail(format!(
                "segment range {}..={} is invalid",
                self.segment_min, self.segment_max
            ));
        }
        if self.backgrounds == 0 {
            return fail("backgrounds must be positive".into());
        }
        Ok(())
    }

    fn world_side(&self) -> usize {
        self.frame_side * 3
    }

    /// Target speed leaving room for rounding positions to whole pixels.
    fn max_speed(&self) -> f64 {
        self.max_step - std::f64::consts::SQRT_2
    }
}

type Rgb = [f32; 3];

const PALETTES: [[Rgb; 2]; 6] = [
    [[70.0, 98.0, 52.0], [122.0, 140.0, 78.0]],
    [[116.0, 94.0, 70.0], [160.0, 138.0, 104.0]],
    [[92.0, 94.0, 98.0], [142.0, 142.0, 136.0]],
    [[58.0, 82.0, 96.0], [96.0, 118.0, 128.0]],
    [[104.0, 112.0, 64.0], [150.0, 146.0, 100.0]],
    [[84.0, 72.0, 62.0], [124.0, 118.0, 108.0]],
];

const TARGET_COLORS: [Rgb; 2] = [[214.0, 38.0, 30.0], [120.0, 12.0, 10.0]];
const DISTRACTOR_COLORS: [Rgb; 2] = [[226.0, 228.0, 232.0], [40.0, 70.0, 170.0]];

/// Smooth random field on a coarse lattice, bilinearly interpolated.
struct ValueNoise {
    cell: f32,
    cols: usize,
    values: Vec<f32>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, side: usize, cell: f32) -> Self {
        let cols = (side as f32 / cell) as usize + 2;
        let values = (0..cols * cols).map(|_| rng.gen::<f32>()).collect();
        Self { cell, cols, values }
    }

    fn at(&self, x: f32, y: f32) -> f32 {
        let (gx, gy) = (x / self.cell, y / self.cell);
        let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
        let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
        let (tx, ty) = (smooth(gx - ix as f32), smooth(gy - iy as f32));
        let v = |i: usize, j: usize| {
            self.values[(j.min(self.cols - 1)) * self.cols + i.min(self.cols - 1)]
        };
        let top = v(ix, iy) * (1.0 - tx) + v(ix + 1, iy) * tx;
        let bottom = v(ix, iy + 1) * (1.0 - tx) + v(ix + 1, iy + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

struct World {
    side: usize,
    pixels: Vec<Rgb>,
}

impl World {
    fn build(rng: &mut ChaCha8Rng, params: &GenParams) -> Self {
        let side = params.world_side();
        let sites: Vec<(f32, f32)> = (0..params.backgrounds)
            .map(|_| {
                (
                    rng.gen::<f32>() * side as f32,
                    rng.gen::<f32>() * side as f32,
                )
            })
            .collect();
        let mut palette_order: Vec<usize> = (0..PALETTES.len()).collect();
        palette_order.shuffle(rng);
        let regions: Vec<(usize, ValueNoise, ValueNoise)> = (0..params.backgrounds)
            .map(|i| {
                let cell = rng.gen_range(10.0..24.0);
                let coarse = ValueNoise::new(rng, side, cell);
                let cell = rng.gen_range(2.5..5.0);
                let fine = ValueNoise::new(rng, side, cell);
                (palette_order[i % PALETTES.len()], coarse, fine)
            })
            .collect();
        let warp = ValueNoise::new(rng, side, 40.0);
        let mut pixels = Vec::with_capacity(side * side);
        for y in 0..side {
            for x in 0..side {
                let (xf, yf) = (x as f32, y as f32);
                let (wx, wy) = (xf + 30.0 * warp.at(xf, yf), yf + 30.0 * warp.at(yf, xf));
                let region = sites
                    .iter()
                    .enumerate()
                    .map(|(i, (sx, sy))| (i, (sx - wx).powi(2) + (sy - wy).powi(2)))
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .map_or(0, |r| r.0);
                let (palette, coarse, fine) = &regions[region];
                let [a, b] = PALETTES[*palette];
                let t = (0.65 * coarse.at(xf, yf) + 0.35 * fine.at(xf, yf)).clamp(0.0, 1.0);
                pixels.push([
                    a[0] + (b[0] - a[0]) * t,
                    a[1] + (b[1] - a[1]) * t,
                    a[2] + (b[2] - a[2]) * t,
                ]);
            }
        }
        Self { side, pixels }
    }
}

/// Square sprite pattern sampled at any size.
struct Sprite {
    pattern: Vec<Rgb>,
}

const PATTERN_SIDE: usize = 16;

impl Sprite {
    fn new(rng: &mut ChaCha8Rng, colors: [Rgb; 2]) -> Self {
        let noise = ValueNoise::new(rng, PATTERN_SIDE, 3.0);
        let mut pattern = Vec::with_capacity(PATTERN_SIDE * PATTERN_SIDE);
        for y in 0..PATTERN_SIDE {
            for x in 0..PATTERN_SIDE {
                let stripe = (y / 4) % 2 == 1 && (2..PATTERN_SIDE - 2).contains(&x);
                let t = if stripe {
                    0.8
                } else {
                    0.35 * noise.at(x as f32, y as f32)
                };
                let [a, b] = colors;
                pattern.push([
                    a[0] + (b[0] - a[0]) * t,
                    a[1] + (b[1] - a[1]) * t,
                    a[2] + (b[2] - a[2]) * t,
                ]);
            }
        }
        Self { pattern }
    }

    fn at(&self, x: usize, y: usize, size: usize) -> Rgb {
        self.pattern[(y * PATTERN_SIDE / size) * PATTERN_SIDE + x * PATTERN_SIDE / size]
    }
}

/// One moving object: real-valued top-left corner, velocity and size.
#[derive(Debug, Clone, Copy)]
struct Mover {
    x: f64,
    y: f64,
    heading: f64,
    speed: f64,
    size: usize,
}

impl Mover {
    fn spawn(rng: &mut ChaCha8Rng, params: &GenParams) -> Self {
        let size = rng.gen_range(params.sprite_min..=params.sprite_max);
        let span = (params.frame_side - size) as f64;
        let vmax = params.max_speed();
        Self {
            x: rng.gen::<f64>() * span,
            y: rng.gen::<f64>() * span,
            heading: rng.gen::<f64>() * std::f64::consts::TAU,
            speed: rng.gen_range(0.4 * vmax..=vmax),
            size,
        }
    }

    fn step(&mut self, rng: &mut ChaCha8Rng, params: &GenParams, turn: &Normal<f64>) {
        self.heading += turn.sample(rng);
        let span = (params.frame_side - self.size) as f64;
        let (mut vx, mut vy) = (
            self.speed * self.heading.cos(),
            self.speed * self.heading.sin(),
        );
        self.x += vx;
        self.y += vy;
        if self.x < 0.0 || self.x > span {
            self.x = if self.x < 0.0 {
                -self.x
            } else {
                2.0 * span - self.x
            };
            vx = -vx;
        }
        if self.y < 0.0 || self.y > span {
            self.y = if self.y < 0.0 {
                -self.y
            } else {
                2.0 * span - self.y
            };
            vy = -vy;
        }
        self.heading = vy.atan2(vx);
    }

    fn corner(&self) -> (usize, usize) {
        (self.x.round() as usize, self.y.round() as usize)
    }

    fn annotation(&self, frame_side: usize) -> Annotation {
        let (x, y) = self.corner();
        let half = self.size as f64 / 2.0;
        Annotation::at(
            (x as f64 + half) / frame_side as f64,
            (y as f64 + half) / frame_side as f64,
        )
    }
}

/// Alternating presence schedule in contiguous segments.
fn presence_schedule(rng: &mut ChaCha8Rng, frames: usize, params: &GenParams) -> Vec<bool> {
    let mut out = Vec::with_capacity(frames);
    let mut present = rng.gen::<bool>();
    while out.len() < frames {
        let len = rng.gen_range(params.segment_min..=params.segment_max);
        out.extend(std::iter::repeat(present).take(len));
        present = !present;
    }
    out.truncate(frames);
    out
}

fn render(
    world: &World,
    camera: (usize, usize),
    layers: &[(&Sprite, Mover)],
    side: usize,
) -> Vec<u8> {
    let mut rgb = vec![0f32; 3 * side * side];
    for y in 0..side {
        for x in 0..side {
            let p = world.pixels[(camera.1 + y) * world.side + camera.0 + x];
            rgb[3 * (y * side + x)..][..3].copy_from_slice(&p);
        }
    }
    for (sprite, m) in layers {
        let (x0, y0) = m.corner();
        for y in 0..m.size {
            for x in 0..m.size {
                let p = sprite.at(x, y, m.size);
                rgb[3 * ((y0 + y) * side + x0 + x)..][..3].copy_from_slice(&p);
            }
        }
    }
    rgb.iter()
        .map(|v| v.round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Adds a little per-pixel sensor noise, deterministic in `rng`.
fn add_grain(rng: &mut ChaCha8Rng, pixels: &mut [u8]) {
    for p in pixels {
        let n: i16 = rng.gen_range(-3..=3);
        *p = (*p as i16 + n).clamp(0, 255) as u8;
    }
}

/// Generates a scenario deterministically from `seed`.
pub fn generate_scenario(params: &GenParams, seed: u64) -> Result<Scenario> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let world = World::build(&mut rng, params);
    let target = Sprite::new(&mut rng, TARGET_COLORS);
    let distractor = Sprite::new(&mut rng, DISTRACTOR_COLORS);
    let side = params.frame_side;
    let cam_span = world.side - side;
    let turn = Normal::new(0.0, 0.15).expect("valid normal");

    let target_on = presence_schedule(&mut rng, params.train_frames, params);
    let distractor_on = if params.distractor {
        presence_schedule(&mut rng, params.train_frames, params)
    } else {
        vec![false; params.train_frames]
    };
    let mut camera = (
        rng.gen_range(0..=cam_span) as i64,
        rng.gen_range(0..=cam_span) as i64,
    );
    let mut drift = (rng.gen_range(-1..=1i64), rng.gen_range(-1..=1i64));
    let jitter = params.jitter as i64;
    let mut movers: [Option<Mover>; 2] = [None, None];
    let mut train = Vec::with_capacity(params.train_frames);
    for i in 0..params.train_frames {
        if i > 0 {
            if rng.gen::<f64>() < 0.1 {
                drift = (
                    rng.gen_range(-jitter..=jitter),
                    rng.gen_range(-jitter..=jitter),
                );
            }
            for (c, d) in [(&mut camera.0, &mut drift.0), (&mut camera.1, &mut drift.1)] {
                if *c + *d < 0 || *c + *d > cam_span as i64 {
                    *d = -*d;
                }
                *c += *d;
            }
        }
        for (slot, on) in movers.iter_mut().zip([target_on[i], distractor_on[i]]) {
            *slot = match (on, slot.take()) {
                (false, _) => None,
                (true, None) => Some(Mover::spawn(&mut rng, params)),
                (true, Some(mut m)) => {
                    m.step(&mut rng, params, &turn);
                    Some(m)
                }
            };
        }
        let mut layers = Vec::new();
        if let Some(m) = movers[1] {
            layers.push((&distractor, m));
        }
        if let Some(m) = movers[0] {
            layers.push((&target, m));
        }
        let mut pixels = render(
            &world,
            (camera.0 as usize, camera.1 as usize),
            &layers,
            side,
        );
        add_grain(&mut rng, &mut pixels);
        let ann = movers[0].map_or(Annotation::absent(), |m| m.annotation(side));
        train.push((Frame::new(i + 1, side, side, pixels)?, ann));
    }

    let mut labels: Vec<bool> = (0..params.test_frames).map(|i| i % 2 == 0).collect();
    labels.shuffle(&mut rng);
    let mut test = Vec::with_capacity(params.test_frames);
    for (i, present) in labels.into_iter().enumerate() {
        let cam = (rng.gen_range(0..=cam_span), rng.gen_range(0..=cam_span));
        let mut layers = Vec::new();
        if params.distractor && rng.gen::<bool>() {
            layers.push((&distractor, Mover::spawn(&mut rng, params)));
        }
        let mut ann = Annotation::absent();
        if present {
            let m = Mover::spawn(&mut rng, params);
            ann = m.annotation(side);
            layers.push((&target, m));
        }
        let mut pixels = render(&world, cam, &layers, side);
        add_grain(&mut rng, &mut pixels);
        test.push((Frame::new(i + 1, side, side, pixels)?, ann));
    }

    Ok(Scenario {
        name: format!("synthetic-{seed}"),
        train,
        test,
        origin: Some((seed, params.clone())),
    })
}
