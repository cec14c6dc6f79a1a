/// Single-channel float image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height, "gray buffer size");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self::new(width, height, vec![value; width * height])
    }

    /// Luma conversion (0.299 R + 0.587 G + 0.114 B) of interleaved RGB8.
    pub fn from_rgb8(width: usize, height: usize, rgb: &[u8]) -> Self {
        assert_eq!(rgb.len(), 3 * width * height, "rgb buffer size");
        let data = rgb
            .chunks_exact(3)
            .map(|p| (0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32) / 255.0)
            .collect();
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    fn clamped(&self, x: isize, y: isize) -> f32 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.data[y * self.width + x]
    }

    /// Bilinear sample with edge replication outside the image.
    #[inline]
    pub fn sample(&self, x: f32, y: f32) -> f32 {
        let x0 = x.floor();
        let y0 = y.floor();
        let (fx, fy) = (x - x0, y - y0);
        let (xi, yi) = (x0 as isize, y0 as isize);
        let a = self.clamped(xi, yi);
        let b = self.clamped(xi + 1, yi);
        let c = self.clamped(xi, yi + 1);
        let d = self.clamped(xi + 1, yi + 1);
        (a * (1.0 - fx) + b * fx) * (1.0 - fy) + (c * (1.0 - fx) + d * fx) * fy
    }

    /// Half-resolution image after a separable [1 4 6 4 1]/16 blur.
    pub fn pyr_down(&self) -> GrayImage {
        const K: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
        let (w, h) = (self.width, self.height);
        let mut tmp = vec![0f32; w * h];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = (0..5)
                    .map(|k| K[k] * self.clamped(x as isize + k as isize - 2, y as isize))
                    .sum();
            }
        }
        let blurred = GrayImage::new(w, h, tmp);
        let (nw, nh) = (w.div_ceil(2), h.div_ceil(2));
        let mut out = vec![0f32; nw * nh];
        for y in 0..nh {
            for x in 0..nw {
                out[y * nw + x] = (0..5)
                    .map(|k| {
                        K[k] * blurred.clamped(2 * x as isize, 2 * y as isize + k as isize - 2)
                    })
                    .sum();
            }
        }
        GrayImage::new(nw, nh, out)
    }

    /// Central-difference gradients `(d/dx, d/dy)` with replicated borders.
    pub fn gradients(&self) -> (GrayImage, GrayImage) {
        let (w, h) = (self.width, self.height);
        let mut gx = vec![0f32; w * h];
        let mut gy = vec![0f32; w * h];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let i = y as usize * w + x as usize;
                gx[i] = 0.5 * (self.clamped(x + 1, y) - self.clamped(x - 1, y));
                gy[i] = 0.5 * (self.clamped(x, y + 1) - self.clamped(x, y - 1));
            }
        }
        (GrayImage::new(w, h, gx), GrayImage::new(w, h, gy))
    }
}

/// Image pyramid with precomputed gradients, level 0 at full resolution.
#[derive(Debug, Clone)]
pub struct Pyramid {
    pub(crate) levels: Vec<Level>,
}

#[derive(Debug, Clone)]
pub(crate) struct Level {
    pub image: GrayImage,
    pub grad_x: GrayImage,
    pub grad_y: GrayImage,
}

impl Pyramid {
    pub fn build(image: &GrayImage, levels: usize) -> Self {
        let mut out = Vec::with_capacity(levels);
        let mut current = image.clone();
        for l in 0..levels.max(1) {
            if l > 0 {
                current = current.pyr_down();
            }
            let (grad_x, grad_y) = current.gradients();
            out.push(Level {
                image: current.clone(),
                grad_x,
                grad_y,
            });
        }
        Self { levels: out }
    }

    pub fn width(&self) -> usize {
        self.levels[0].image.width()
    }

    pub fn height(&self) -> usize {
        self.levels[0].image.height()
    }

    pub fn base(&self) -> &GrayImage {
        &self.levels[0].image
    }
}
