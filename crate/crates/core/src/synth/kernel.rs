use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest kernel half-width produced by any generator.
pub const MAX_RADIUS: usize = 15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    Delta,
    /// Uniform line through the center; `angle` in radians from the x axis.
    Linear {
        length: f64,
        angle: f64,
    },
    /// Anti-aliased disk.
    Disk {
        radius: f64,
    },
    /// Random-walk camera trajectory.
    Shake {
        steps: usize,
        seed: u64,
    },
}

/// Odd-sized square point-spread function, entries summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    pub size: usize,
    pub data: Vec<f64>,
}

impl Kernel {
    pub fn delta() -> Self {
        Kernel {
            size: 1,
            data: vec![1.0],
        }
    }

    pub fn radius(&self) -> usize {
        self.size / 2
    }

    pub fn at(&self, dy: isize, dx: isize) -> f64 {
        let r = self.radius() as isize;
        if dy.abs() > r || dx.abs() > r {
            return 0.0;
        }
        self.data[((dy + r) as usize) * self.size + (dx + r) as usize]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Drop all-zero outer rings so degenerate kernels collapse to 1x1.
    fn trimmed(self) -> Self {
        let mut r = self.radius();
        let ring_empty = |k: &Kernel, r: usize| {
            let s = k.size;
            let c = s / 2;
            (0..s).all(|i| {
                let (lo, hi) = (c - r, c + r);
                k.data[lo * s + i] == 0.0
                    && k.data[hi * s + i] == 0.0
                    && k.data[i * s + lo] == 0.0
                    && k.data[i * s + hi] == 0.0
            })
        };
        while r > 0 && ring_empty(&self, r) {
            r -= 1;
        }
        let c = self.radius();
        let size = 2 * r + 1;
        let mut data = Vec::with_capacity(size * size);
        for y in c - r..=c + r {
            data.extend_from_slice(&self.data[y * self.size + c - r..=y * self.size + c + r]);
        }
        Kernel { size, data }
    }

    fn normalized(mut self) -> Result<Self> {
        let s = self.sum();
        if !(s > 0.0) {
            return Err(Error::invalid("kernel has no mass"));
        }
        for v in &mut self.data {
            *v /= s;
        }
        Ok(self.trimmed())
    }
}

fn segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((px - qx).powi(2) + (py - qy).powi(2)).sqrt()
}

/// Rasterize a polyline with a one-pixel tent profile; overlapping
/// segments take the maximum so shared vertices are not counted twice.
fn raster_polyline(points: &[(f64, f64)]) -> Kernel {
    let extent = points.iter().fold(0.0f64, |m, p| m.max(p.0.abs()).max(p.1.abs()));
    let r = (extent.ceil() as usize + 1).min(MAX_RADIUS);
    let size = 2 * r + 1;
    let mut data = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 - r as f64, y as f64 - r as f64);
            let mut best = 0.0f64;
            if points.len() == 1 {
                best = 1.0 - segment_distance(px, py, points[0], points[0]);
            }
            for w in points.windows(2) {
                best = best.max(1.0 - segment_distance(px, py, w[0], w[1]));
            }
            data[y * size + x] = best.max(0.0);
        }
    }
    Kernel { size, data }
}

pub fn linear_kernel(length: f64, angle: f64) -> Result<Kernel> {
    if !(length >= 1.0) || !angle.is_finite() {
        return Err(Error::invalid(format!(
            "motion length must be >= 1 (got {length}) with a finite angle"
        )));
    }
    let half = ((length - 1.0) / 2.0).min(MAX_RADIUS as f64 - 1.0);
    let (c, s) = (angle.cos(), angle.sin());
    // round away float noise so axis-aligned lines land exactly on pixels
    let snap = |v: f64| (v * 1e9).round() / 1e9;
    let a = (snap(-half * c), snap(-half * s));
    let b = (snap(half * c), snap(half * s));
    raster_polyline(&[a, b]).normalized()
}

pub fn disk_kernel(radius: f64) -> Result<Kernel> {
    if !(radius >= 0.0) {
        return Err(Error::invalid(format!("disk radius must be >= 0, got {radius}")));
    }
    let radius = radius.min(MAX_RADIUS as f64 - 1.0);
    let r = radius.ceil() as usize + 1;
    let size = 2 * r + 1;
    let mut data = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let d = ((x as f64 - r as f64).powi(2) + (y as f64 - r as f64).powi(2)).sqrt();
            data[y * size + x] = (radius + 0.5 - d).clamp(0.0, 1.0);
        }
    }
    Kernel { size, data }.normalized()
}

/// Random walk with momentum, centered on its mean position.
pub fn shake_kernel(steps: usize, seed: u64) -> Result<Kernel> {
    if steps == 0 {
        return Err(Error::invalid("shake trajectory needs at least one step"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = vec![(0.0f64, 0.0f64)];
    let mut heading: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    for _ in 0..steps {
        heading += rng.gen_range(-1.2..1.2);
        let len = rng.gen_range(0.5..1.2);
        let last = *pts.last().unwrap();
        pts.push((last.0 + len * heading.cos(), last.1 + len * heading.sin()));
    }
    let n = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let lim = MAX_RADIUS as f64 - 1.0;
    let pts: Vec<(f64, f64)> = pts
        .iter()
        .map(|p| ((p.0 - mx / n).clamp(-lim, lim), (p.1 - my / n).clamp(-lim, lim)))
        .collect();
    raster_polyline(&pts).normalized()
}

pub fn make_kernel(spec: &KernelSpec) -> Result<Kernel> {
    match *spec {
        KernelSpec::Delta => Ok(Kernel::delta()),
        KernelSpec::Linear { length, angle } => linear_kernel(length, angle),
        KernelSpec::Disk { radius } => disk_kernel(radius),
        KernelSpec::Shake { steps, seed } => shake_kernel(steps, seed),
    }
}
