//! 8-bit RGB PNG to and from (1, 3, H, W) tensors in [0, 1].

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn read_png(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    Ok(rgb_to_tensor(&img))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    for (x, y, px) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec([1, 3, h, w], data).expect("shape matches")
}

pub fn tensor_to_rgb(t: &Tensor<f32>) -> Result<RgbImage> {
    let s = t.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::shape(format!("PNG output needs one RGB image, got {s}")));
    }
    let plane = s.plane();
    let d = t.data();
    Ok(ImageBuffer::from_fn(s.w as u32, s.h as u32, |x, y| {
        let i = y as usize * s.w + x as usize;
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([q(d[i]), q(d[plane + i]), q(d[2 * plane + i])])
    }))
}

pub fn write_png(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    tensor_to_rgb(t)?.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::procedural::quantize;

    #[test]
    fn png_round_trip_of_quantized_image() {
        let dir = tempfile::tempdir().unwrap();
        let t = quantize(&Tensor::from_vec([1, 3, 2, 3], (0..18).map(|i| i as f32 / 17.0).collect()).unwrap());
        let p = dir.path().join("a.png");
        write_png(&p, &t).unwrap();
        assert!(read_png(&p).unwrap().bitwise_eq(&t));
        assert!(read_png(dir.path().join("missing.png")).is_err());
    }
}
