//! Browser bindings for the demo page in `www/`: blur kernels, synthetic
//! degradations with their PSNR/SSIM, and expert gating.
//!
//! The plain functions are ordinary Rust and are what the tests exercise;
//! the `#[wasm_bindgen]` wrappers only translate errors.

use demoe::metrics::{psnr, ssim, Psnr};
use demoe::net::{ExpertSelection, RouterWeights};
use demoe::ops::softmax;
use demoe::synth::{make_kernel, synthesize_pair, Family, KernelSpec};
use demoe::Tensor;
use wasm_bindgen::prelude::*;

/// Square kernel, row-major, entries summing to one.
#[wasm_bindgen]
pub struct KernelView {
    size: usize,
    data: Vec<f64>,
}

#[wasm_bindgen]
impl KernelView {
    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.size
    }

    #[wasm_bindgen(getter)]
    pub fn data(&self) -> Vec<f64> {
        self.data.clone()
    }

    /// Grayscale RGBA for a canvas, scaled so the peak is white.
    pub fn rgba(&self) -> Vec<u8> {
        let peak = self.data.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        self.data
            .iter()
            .flat_map(|&v| {
                let g = (255.0 * v / peak).round() as u8;
                [g, g, g, 255]
            })
            .collect()
    }
}

/// `kind` is linear (a = length, b = angle in degrees), disk (a = radius)
/// or shake (a = steps, seed).
pub fn build_kernel(kind: &str, a: f64, b: f64, seed: u32) -> demoe::Result<KernelView> {
    let spec = match kind {
        "linear" => KernelSpec::Linear {
            length: a,
            angle: b.to_radians(),
        },
        "disk" => KernelSpec::Disk { radius: a },
        "shake" => KernelSpec::Shake {
            steps: a.max(0.0) as usize,
            seed: seed as u64,
        },
        "delta" => KernelSpec::Delta,
        _ => return Err(demoe::Error::InvalidArgument(format!("unknown kernel kind {kind:?}"))),
    };
    let k = make_kernel(&spec)?;
    Ok(KernelView {
        size: k.size,
        data: k.data,
    })
}

#[wasm_bindgen]
pub fn kernel(kind: &str, a: f64, b: f64, seed: u32) -> Result<KernelView, JsError> {
    build_kernel(kind, a, b, seed).map_err(|e| JsError::new(&e.to_string()))
}

/// A clean image, its degraded version and how far apart they are.
#[wasm_bindgen]
pub struct Preview {
    size: usize,
    clean: Tensor<f32>,
    degraded: Tensor<f32>,
    psnr: f64,
    ssim: f64,
    spec: String,
}

fn to_rgba(t: &Tensor<f32>) -> Vec<u8> {
    let s = t.shape();
    let mut out = Vec::with_capacity(s.h * s.w * 4);
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                out.push((t.at(0, c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
            out.push(255);
        }
    }
    out
}

#[wasm_bindgen]
impl Preview {
    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.size
    }

    /// Infinite when the two images are identical.
    #[wasm_bindgen(getter)]
    pub fn psnr(&self) -> f64 {
        self.psnr
    }

    #[wasm_bindgen(getter)]
    pub fn ssim(&self) -> f64 {
        self.ssim
    }

    /// The sampled degradation as JSON.
    #[wasm_bindgen(getter)]
    pub fn spec(&self) -> String {
        self.spec.clone()
    }

    pub fn clean_rgba(&self) -> Vec<u8> {
        to_rgba(&self.clean)
    }

    pub fn degraded_rgba(&self) -> Vec<u8> {
        to_rgba(&self.degraded)
    }
}

pub fn build_preview(family: &str, size: usize, seed: u32) -> demoe::Result<Preview> {
    let label = Family::ALL
        .iter()
        .position(|f| f.as_str() == family)
        .ok_or_else(|| demoe::Error::InvalidArgument(format!("unknown blur family {family:?}")))?;
    demoe::synth::dataset::check_size(size)?;
    let pair = synthesize_pair(0, label, size, seed as u64)?;
    let psnr = match psnr(&pair.degraded, &pair.clean, 1.0)? {
        Psnr::Finite(v) => v,
        Psnr::Infinite => f64::INFINITY,
    };
    Ok(Preview {
        size,
        ssim: ssim(&pair.degraded, &pair.clean)?,
        psnr,
        spec: serde_json::to_string(&pair.spec).expect("blur spec serializes"),
        clean: pair.clean,
        degraded: pair.degraded,
    })
}

/// Family names in label order.
#[wasm_bindgen]
pub fn families() -> Vec<String> {
    Family::ALL.iter().map(|f| f.as_str().to_owned()).collect()
}

#[wasm_bindgen]
pub fn preview(family: &str, size: usize, seed: u32) -> Result<Preview, JsError> {
    build_preview(family, size, seed).map_err(|e| JsError::new(&e.to_string()))
}

/// Dense gate row: softmax of `logits`, then either the top `k` renormalized
/// or, for `expert >= 0`, that expert alone.
pub fn gate_row(logits: &[f64], k: usize, expert: i32) -> demoe::Result<Vec<f64>> {
    let p: Vec<f32> = softmax(logits)?.into_iter().map(|v| v as f32).collect();
    let n = p.len();
    let sel = if expert >= 0 {
        ExpertSelection::manual(expert as usize, n)?
    } else {
        ExpertSelection::top_k(&RouterWeights::new(p)?, k)?
    };
    Ok(sel.dense(n).into_iter().map(f64::from).collect())
}

#[wasm_bindgen]
pub fn gate(logits: Vec<f64>, k: usize, expert: i32) -> Result<Vec<f64>, JsError> {
    gate_row(&logits, k, expert).map_err(|e| JsError::new(&e.to_string()))
}
