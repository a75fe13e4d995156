//! Procedural shapes and textures.

use crate::numerics::Rng;

pub const SHAPES: [&str; 8] = [
    "disk", "square", "triangle", "cross", "ring", "diamond", "star", "crescent",
];

pub const TEXTURES: [&str; 8] = [
    "stripes", "checker", "gradient", "speckle", "dots", "waves", "grid", "blobs",
];

/// Sub-pixel samples per axis used for anti-aliasing.
const SUPERSAMPLE: usize = 4;

/// Placement and colour of a foreground shape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeSpec {
    pub shape: usize,
    /// Centre in pixels.
    pub cx: f64,
    pub cy: f64,
    /// Circumscribed radius in pixels.
    pub radius: f64,
    pub angle: f64,
    pub color: [f64; 3],
}

impl ShapeSpec {
    pub fn sample(shape: usize, size: usize, rng: &mut Rng) -> Self {
        let s = size as f64;
        let radius = s * rng.uniform_in(0.26, 0.38);
        let margin = radius * 0.9;
        Self {
            shape,
            cx: rng.uniform_in(margin, s - margin),
            cy: rng.uniform_in(margin, s - margin),
            radius,
            angle: rng.uniform_in(-0.4, 0.4),
            color: vivid_color(rng),
        }
    }

    /// Whether a point in shape-local units (radius 1) is inside.
    fn inside(&self, u: f64, v: f64) -> bool {
        let r = u.hypot(v);
        match self.shape % SHAPES.len() {
            0 => r <= 0.85,
            1 => u.abs().max(v.abs()) <= 0.68,
            // Apex up (image y grows downward).
            2 => (-0.9..=0.6).contains(&v) && u.abs() <= 0.85 * (v + 0.9) / 1.5,
            3 => (u.abs() <= 0.28 && v.abs() <= 0.9) || (v.abs() <= 0.28 && u.abs() <= 0.9),
            4 => (0.5..=0.92).contains(&r),
            5 => u.abs() + v.abs() <= 0.95,
            6 => {
                let theta = v.atan2(u);
                let spike = 0.55 + 0.4 * (5.0 * theta).cos().max(0.0).powf(2.0);
                r <= spike
            }
            _ => r <= 0.9 && (u - 0.4).hypot(v) > 0.62,
        }
    }

    /// Anti-aliased coverage of every pixel of a `size × size` image.
    pub fn coverage(&self, size: usize) -> Vec<f64> {
        let (sin, cos) = self.angle.sin_cos();
        let step = 1.0 / SUPERSAMPLE as f64;
        let total = (SUPERSAMPLE * SUPERSAMPLE) as f64;
        let mut out = vec![0.0; size * size];
        for y in 0..size {
            for x in 0..size {
                let mut hits = 0usize;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px = x as f64 + (sx as f64 + 0.5) * step - self.cx;
                        let py = y as f64 + (sy as f64 + 0.5) * step - self.cy;
                        let u = (cos * px + sin * py) / self.radius;
                        let v = (-sin * px + cos * py) / self.radius;
                        hits += self.inside(u, v) as usize;
                    }
                }
                out[y * size + x] = hits as f64 / total;
            }
        }
        out
    }
}

fn vivid_color(rng: &mut Rng) -> [f64; 3] {
    let hue = rng.uniform() * 6.0;
    let sat = rng.uniform_in(0.6, 1.0);
    let val = rng.uniform_in(0.7, 1.0);
    hsv(hue, sat, val)
}

fn muted_color(rng: &mut Rng) -> [f64; 3] {
    let hue = rng.uniform() * 6.0;
    hsv(hue, rng.uniform_in(0.1, 0.6), rng.uniform_in(0.15, 0.85))
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// One random realization of a texture family.
#[derive(Clone, Debug, PartialEq)]
pub struct TextureSpec {
    pub texture: usize,
    a: [f64; 3],
    b: [f64; 3],
    freq: f64,
    phase: f64,
    angle: f64,
    seed: u64,
}

impl TextureSpec {
    pub fn sample(texture: usize, rng: &mut Rng) -> Self {
        Self {
            texture,
            a: muted_color(rng),
            b: muted_color(rng),
            freq: rng.uniform_in(0.7, 1.3),
            phase: rng.uniform_in(0.0, std::f64::consts::TAU),
            angle: rng.uniform_in(0.0, std::f64::consts::PI),
            seed: rng.next_u64(),
        }
    }

    /// RGB pixels of a `size × size` background, row-major.
    pub fn render(&self, size: usize) -> Vec<[f64; 3]> {
        let mut noise = Rng::new(self.seed);
        let (sin, cos) = self.angle.sin_cos();
        let blobs: Vec<(f64, f64, f64)> = (0..6)
            .map(|_| {
                let s = size as f64;
                (noise.uniform() * s, noise.uniform() * s, s * noise.uniform_in(0.12, 0.3))
            })
            .collect();
        let mut out = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let (xf, yf) = (x as f64, y as f64);
                let along = cos * xf + sin * yf;
                let tau = std::f64::consts::TAU;
                let t = match self.texture % TEXTURES.len() {
                    0 => step((tau * along / (6.0 * self.freq) + self.phase).sin()),
                    1 => {
                        let c = (8.0 * self.freq).round().max(3.0);
                        let off = self.phase / tau * c;
                        (((xf + off) / c).floor() + ((yf + off) / c).floor()).rem_euclid(2.0)
                    }
                    2 => (along / (size as f64 * 1.42) + 0.15).clamp(0.0, 1.0),
                    3 => noise.uniform(),
                    4 => {
                        let c = 7.0 * self.freq;
                        let dx = (xf + self.phase).rem_euclid(c) - c / 2.0;
                        let dy = (yf + self.phase).rem_euclid(c) - c / 2.0;
                        (dx.hypot(dy) < c * 0.28) as u8 as f64
                    }
                    5 => {
                        let w = (tau * yf / (9.0 * self.freq) + 2.0 * (tau * xf / 14.0 + self.phase).sin()).sin();
                        0.5 + 0.5 * w
                    }
                    6 => {
                        let c = (6.0 * self.freq).round().max(3.0);
                        ((xf.rem_euclid(c) < 1.0) || (yf.rem_euclid(c) < 1.0)) as u8 as f64
                    }
                    _ => {
                        let v: f64 = blobs
                            .iter()
                            .map(|&(bx, by, r)| (-((xf - bx).powi(2) + (yf - by).powi(2)) / (2.0 * r * r)).exp())
                            .sum();
                        v.min(1.0)
                    }
                };
                out.push(mix(self.a, self.b, t));
            }
        }
        out
    }
}

fn step(s: f64) -> f64 {
    if s >= 0.0 {
        1.0
    } else {
        0.0
    }
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

/// `alpha·fg + (1 - alpha)·bg` as an interleaved RGB buffer.
pub fn composite(alpha: &[f64], color: [f64; 3], bg: &[[f64; 3]]) -> Vec<f64> {
    let mut out = Vec::with_capacity(alpha.len() * 3);
    for (&a, px) in alpha.iter().zip(bg) {
        for c in 0..3 {
            out.push((a * color[c] + (1.0 - a) * px[c]).clamp(0.0, 1.0));
        }
    }
    out
}
