use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::kernel::{make_kernel, Kernel, KernelSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    GlobalMotion,
    LocalMotion,
    Defocus,
    LowlightMotion,
    MixedMotion,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::GlobalMotion,
        Family::LocalMotion,
        Family::Defocus,
        Family::LowlightMotion,
        Family::MixedMotion,
    ];

    pub fn label(self) -> usize {
        self as usize
    }

    pub fn from_label(label: usize) -> Result<Self> {
        Self::ALL
            .get(label)
            .copied()
            .ok_or_else(|| Error::invalid(format!("no blur family with label {label}")))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Family::GlobalMotion => "global_motion",
            Family::LocalMotion => "local_motion",
            Family::Defocus => "defocus",
            Family::LowlightMotion => "lowlight_motion",
            Family::MixedMotion => "mixed_motion",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown blur family {s:?}")))
    }
}

/// Axis-aligned rectangle in pixels with a linear feather of `feather` pixels
/// outside its edge.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub feather: f64,
}

impl MaskSpec {
    pub fn empty() -> Self {
        MaskSpec {
            top: 0,
            left: 0,
            height: 0,
            width: 0,
            feather: 0.0,
        }
    }

    /// Blend weight at a pixel: 1 inside, fading to 0 across the feather.
    pub fn weight(&self, y: usize, x: usize) -> f64 {
        if self.height == 0 || self.width == 0 {
            return 0.0;
        }
        let gap = |v: usize, lo: usize, len: usize| -> f64 {
            if v < lo {
                (lo - v) as f64
            } else if v >= lo + len {
                (v + 1 - lo - len) as f64
            } else {
                0.0
            }
        };
        let d = gap(y, self.top, self.height).max(gap(x, self.left, self.width));
        if d == 0.0 {
            1.0
        } else if self.feather <= 0.0 {
            0.0
        } else {
            (1.0 - d / (self.feather + 1.0)).max(0.0)
        }
    }
}

/// `gain * x^gamma`, applied before blurring.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Darken {
    pub gain: f64,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlurSpec {
    pub family: Family,
    pub kernel: KernelSpec,
    pub noise_sigma: f64,
    pub mask: Option<MaskSpec>,
    pub darken: Option<Darken>,
}

impl BlurSpec {
    pub fn identity(family: Family) -> Self {
        BlurSpec {
            family,
            kernel: KernelSpec::Delta,
            noise_sigma: 0.0,
            mask: None,
            darken: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid(format!(
                "noise sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        if let Some(d) = self.darken {
            if !(d.gain > 0.0 && d.gamma > 0.0) {
                return Err(Error::invalid(format!(
                    "darkening needs positive gain and gamma, got {d:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Draw a random degradation of the given family for an `h`×`w` image.
pub fn sample_spec(family: Family, h: usize, w: usize, rng: &mut impl Rng) -> BlurSpec {
    use std::f64::consts::PI;
    let mut spec = BlurSpec::identity(family);
    match family {
        Family::GlobalMotion => {
            spec.kernel = KernelSpec::Linear {
                length: rng.gen_range(5.0..11.0),
                angle: rng.gen_range(0.0..PI),
            };
        }
        Family::LocalMotion => {
            spec.kernel = KernelSpec::Linear {
                length: rng.gen_range(7.0..13.0),
                angle: rng.gen_range(0.0..PI),
            };
            let area = (h * w) as f64 * rng.gen_range(0.10..0.40);
            let aspect: f64 = rng.gen_range(0.5..2.0);
            let height = ((area * aspect).sqrt().round() as usize).clamp(1, h);
            let width = ((area / height as f64).round() as usize).clamp(1, w);
            spec.mask = Some(MaskSpec {
                top: rng.gen_range(0..=h - height),
                left: rng.gen_range(0..=w - width),
                height,
                width,
                feather: 4.0,
            });
        }
        Family::Defocus => {
            spec.kernel = KernelSpec::Disk {
                radius: rng.gen_range(1.5..3.5),
            };
        }
        Family::LowlightMotion => {
            spec.kernel = KernelSpec::Linear {
                length: rng.gen_range(3.0..9.0),
                angle: rng.gen_range(0.0..PI),
            };
            spec.darken = Some(Darken {
                gain: rng.gen_range(0.1..0.4),
                gamma: rng.gen_range(1.5..3.0),
            });
            spec.noise_sigma = 0.01;
        }
        Family::MixedMotion => {
            spec.kernel = KernelSpec::Shake {
                steps: rng.gen_range(8..=24),
                seed: rng.gen(),
            };
        }
    }
    spec
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Per-channel 2-D convolution with reflect padding, in f64.
pub fn convolve_reflect(plane: &[f64], h: usize, w: usize, k: &Kernel) -> Vec<f64> {
    let r = k.radius() as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in -r..=r {
                let sy = reflect(y as isize - dy, h);
                for dx in -r..=r {
                    let kv = k.at(dy, dx);
                    if kv != 0.0 {
                        acc += kv * plane[sy * w + reflect(x as isize - dx, w)];
                    }
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// `y = clamp(mask * (darken(x) (*) k) + (1 - mask) * darken(x) + n)`.
/// Accepts a single RGB image (1, 3, H, W) with values in [0, 1].
pub fn degrade(x: &Tensor<f32>, spec: &BlurSpec, seed: u64) -> Result<(Tensor<f32>, usize)> {
    spec.validate()?;
    let s = x.shape();
    if s.n != 1 || s.c != 3 || s.h == 0 || s.w == 0 {
        return Err(Error::shape(format!("degrade expects one RGB image, got {s}")));
    }
    let kernel = make_kernel(&spec.kernel)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).map_err(|e| Error::invalid(e.to_string()))?;
    let (h, w) = (s.h, s.w);
    let plane = h * w;
    let mut out = Vec::with_capacity(3 * plane);
    for c in 0..3 {
        let mut base: Vec<f64> = x.data()[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).collect();
        if let Some(d) = spec.darken {
            for v in &mut base {
                *v = d.gain * v.max(0.0).powf(d.gamma);
            }
        }
        let blurred = if kernel.size == 1 {
            base.clone()
        } else {
            convolve_reflect(&base, h, w, &kernel)
        };
        for i in 0..plane {
            let mut v = match &spec.mask {
                Some(m) => {
                    let a = m.weight(i / w, i % w);
                    if a == 0.0 {
                        base[i]
                    } else {
                        a * blurred[i] + (1.0 - a) * base[i]
                    }
                }
                None => blurred[i],
            };
            if spec.noise_sigma > 0.0 {
                v += noise.sample(&mut rng);
            }
            out.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    Ok((Tensor::from_vec(s, out)?, spec.family.label()))
}
