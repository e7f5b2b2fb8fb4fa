//! Seeded image augmentation used to double the labelled normal data.
//!
//! The default chain mixes several short random sequences of
//! shift / rotate / contrast operations and blends the mixture convexly with
//! the original image. Every operation maps the zero image to itself and
//! keeps pixels in `[0, 1]`.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng as _;

use crate::data::ImageShape;
use crate::rng::Rng;
use crate::scalar::{c, Scalar};

/// Anything that can produce one augmented copy per input row.
pub trait Augmenter<A: Scalar>: Send + Sync {
    fn augment(&self, x: ArrayView2<'_, A>, shape: ImageShape, rng: &mut Rng) -> Array2<A>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixAugment {
    pub width: usize,
    pub max_depth: usize,
    pub max_shift: i64,
    pub max_rotation_deg: f64,
    pub contrast_range: (f64, f64),
}

impl Default for MixAugment {
    fn default() -> Self {
        Self {
            width: 3,
            max_depth: 3,
            max_shift: 2,
            max_rotation_deg: 15.0,
            contrast_range: (0.5, 1.5),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Shift(i64, i64),
    Rotate(f64),
    Contrast(f64),
}

impl MixAugment {
    fn random_op(&self, rng: &mut Rng) -> Op {
        match rng.random_range(0..3) {
            0 => {
                let s = self.max_shift;
                Op::Shift(rng.random_range(-s..=s), rng.random_range(-s..=s))
            }
            1 => {
                let r = self.max_rotation_deg.to_radians();
                Op::Rotate(rng.random_range(-r..=r))
            }
            _ => {
                let (lo, hi) = self.contrast_range;
                Op::Contrast(rng.random_range(lo..=hi))
            }
        }
    }

    fn augment_one<A: Scalar>(&self, img: ArrayView1<'_, A>, shape: ImageShape, rng: &mut Rng) -> Vec<A> {
        let orig: Vec<f64> = img.iter().map(|v| v.as_f64()).collect();
        // Dirichlet(1, …, 1) weights via normalized exponentials.
        let mut weights: Vec<f64> = (0..self.width)
            .map(|_| -(1.0 - rng.random::<f64>()).ln())
            .collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        let blend: f64 = rng.random();

        let mut mix = vec![0.0; orig.len()];
        for w in weights {
            let depth = rng.random_range(1..=self.max_depth);
            let mut cur = orig.clone();
            for _ in 0..depth {
                cur = apply(self.random_op(rng), &cur, shape);
            }
            for (m, v) in mix.iter_mut().zip(&cur) {
                *m += w * v;
            }
        }
        orig.iter()
            .zip(&mix)
            .map(|(o, m)| c::<A>(((1.0 - blend) * o + blend * m).clamp(0.0, 1.0)))
            .collect()
    }
}

impl<A: Scalar> Augmenter<A> for MixAugment {
    fn augment(&self, x: ArrayView2<'_, A>, shape: ImageShape, rng: &mut Rng) -> Array2<A> {
        assert_eq!(x.ncols(), shape.n_pixels(), "augment: row width vs image shape");
        let mut out = Array2::zeros(x.raw_dim());
        for (i, row) in x.rows().into_iter().enumerate() {
            let aug = self.augment_one(row, shape, rng);
            out.row_mut(i).assign(&ArrayView1::from(&aug));
        }
        out
    }
}

fn apply(op: Op, img: &[f64], shape: ImageShape) -> Vec<f64> {
    let plane = shape.height * shape.width;
    let mut out = vec![0.0; img.len()];
    for ch in 0..shape.channels {
        let src = &img[ch * plane..(ch + 1) * plane];
        let dst = &mut out[ch * plane..(ch + 1) * plane];
        match op {
            Op::Shift(dx, dy) => shift(src, dst, shape, dx, dy),
            Op::Rotate(theta) => rotate(src, dst, shape, theta),
            Op::Contrast(f) => contrast(src, dst, f),
        }
    }
    out
}

fn shift(src: &[f64], dst: &mut [f64], s: ImageShape, dx: i64, dy: i64) {
    let (h, w) = (s.height as i64, s.width as i64);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = (x - dx, y - dy);
            if (0..w).contains(&sx) && (0..h).contains(&sy) {
                dst[(y * w + x) as usize] = src[(sy * w + sx) as usize];
            }
        }
    }
}

fn rotate(src: &[f64], dst: &mut [f64], s: ImageShape, theta: f64) {
    let (h, w) = (s.height, s.width);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = theta.sin_cos();
    let at = |x: i64, y: i64| -> f64 {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            0.0
        } else {
            src[y as usize * w + x as usize]
        }
    };
    for y in 0..h {
        for x in 0..w {
            // inverse map output pixel back into the source
            let (ox, oy) = (x as f64 - cx, y as f64 - cy);
            let sx = cos * ox + sin * oy + cx;
            let sy = -sin * ox + cos * oy + cy;
            let (x0, y0) = (sx.floor() as i64, sy.floor() as i64);
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            let v = at(x0, y0) * (1.0 - fx) * (1.0 - fy)
                + at(x0 + 1, y0) * fx * (1.0 - fy)
                + at(x0, y0 + 1) * (1.0 - fx) * fy
                + at(x0 + 1, y0 + 1) * fx * fy;
            dst[y * w + x] = v.clamp(0.0, 1.0);
        }
    }
}

fn contrast(src: &[f64], dst: &mut [f64], factor: f64) {
    let mean = src.iter().sum::<f64>() / src.len() as f64;
    for (d, &v) in dst.iter_mut().zip(src) {
        *d = (mean + factor * (v - mean)).clamp(0.0, 1.0);
    }
}

/// Augmented copies of `x` (same row count) under the default chain.
pub fn augment_normal_labelled<A: Scalar>(x: ArrayView2<'_, A>, shape: ImageShape, rng: &mut Rng) -> Array2<A> {
    MixAugment::default().augment(x, shape, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    const MNIST: ImageShape = ImageShape::new(1, 28, 28);

    #[test]
    fn zero_image_is_fixed() {
        let x = Array2::<f32>::zeros((4, 784));
        let out = augment_normal_labelled(x.view(), MNIST, &mut derive_rng(1, "aug", 0));
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_and_range_contract() {
        let mut r = derive_rng(5, "fill", 0);
        let x = Array2::<f32>::from_shape_simple_fn((6, 784), || r.random::<f32>());
        let out = augment_normal_labelled(x.view(), MNIST, &mut derive_rng(2, "aug", 0));
        assert_eq!(out.dim(), (6, 784));
        assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn seeded_batches_are_bit_identical() {
        let mut r = derive_rng(5, "fill", 0);
        let x = Array2::<f64>::from_shape_simple_fn((5, 784), || r.random::<f64>());
        let a = augment_normal_labelled(x.view(), MNIST, &mut derive_rng(3, "aug", 0));
        let b = augment_normal_labelled(x.view(), MNIST, &mut derive_rng(3, "aug", 0));
        assert_eq!(a, b);
        let c = augment_normal_labelled(x.view(), MNIST, &mut derive_rng(4, "aug", 0));
        assert_ne!(a, c);
    }

    #[test]
    fn shift_moves_pixels() {
        let s = ImageShape::new(1, 3, 3);
        let mut img = vec![0.0; 9];
        img[4] = 1.0;
        let out = apply(Op::Shift(1, 0), &img, s);
        assert_eq!(out[5], 1.0);
        assert_eq!(out.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn zero_rotation_is_identity() {
        let s = ImageShape::new(1, 4, 4);
        let img: Vec<f64> = (0..16).map(|i| i as f64 / 16.0).collect();
        let out = apply(Op::Rotate(0.0), &img, s);
        for (a, b) in img.iter().zip(&out) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn multi_channel_images_keep_channels_apart() {
        let s = ImageShape::new(3, 4, 4);
        let mut img = vec![0.0; 48];
        img[16..32].iter_mut().for_each(|v| *v = 0.5);
        let out = apply(Op::Contrast(1.5), &img, s);
        assert!(out[..16].iter().all(|&v| v == 0.0));
        assert!(out[16..32].iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }
}
