use rand::Rng;

use crate::tensor::Tensor;

fn random_color(rng: &mut impl Rng) -> [f64; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

/// Clean test image: a color gradient overlaid with random rectangles,
/// disks, a checker patch and stripes. Values lie in [0, 1].
pub fn procedural_image(h: usize, w: usize, rng: &mut impl Rng) -> Tensor<f32> {
    let plane = h * w;
    let mut img = vec![0.0f64; 3 * plane];
    let (c0, c1) = (random_color(rng), random_color(rng));
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let norm = (h.max(w)) as f64;
    for y in 0..h {
        for x in 0..w {
            let t = (0.5 + ((x as f64) * ca + (y as f64) * sa) / (2.0 * norm)).clamp(0.0, 1.0);
            for c in 0..3 {
                img[c * plane + y * w + x] = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }

    let shapes = rng.gen_range(3..7);
    for _ in 0..shapes {
        let color = random_color(rng);
        let kind = rng.gen_range(0..4);
        let cy = rng.gen_range(0..h) as f64;
        let cx = rng.gen_range(0..w) as f64;
        let ry = rng.gen_range(2.0..(h as f64 / 3.0).max(3.0));
        let rx = rng.gen_range(2.0..(w as f64 / 3.0).max(3.0));
        let cell = rng.gen_range(2..5) as usize;
        let period = rng.gen_range(3.0..7.0);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let inside = match kind {
                    0 => dy.abs() <= ry && dx.abs() <= rx,
                    1 => (dy / ry).powi(2) + (dx / rx).powi(2) <= 1.0,
                    2 => dy.abs() <= ry && dx.abs() <= rx && ((y / cell + x / cell) % 2 == 0),
                    _ => dy.abs() <= ry && dx.abs() <= rx && ((x as f64 + y as f64) / period).floor() as i64 % 2 == 0,
                };
                if inside {
                    for c in 0..3 {
                        img[c * plane + y * w + x] = color[c];
                    }
                }
            }
        }
    }
    Tensor::from_vec([1, 3, h, w], img.into_iter().map(|v| v as f32).collect()).expect("shape matches")
}

/// Round to the 8-bit grid used by PNG storage.
pub fn quantize(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn images_are_in_range_and_seeded() {
        let a = procedural_image(32, 32, &mut ChaCha8Rng::seed_from_u64(3));
        let b = procedural_image(32, 32, &mut ChaCha8Rng::seed_from_u64(3));
        assert!(a.bitwise_eq(&b));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let q = quantize(&a);
        assert!(quantize(&q).bitwise_eq(&q));
    }
}
