//! Built-in stand-in embedding: low-frequency DCT signature of a 16x16
//! grayscale thumbnail.
//!
//! Pipeline: clamp to `[0, 1]`, luma with weights (0.299, 0.587, 0.114),
//! area-average down to 16x16, orthonormal 2-D DCT-II, take the first 64
//! zig-zag coefficients after DC, L2-normalize. Every stage before the
//! normalization is linear, so the pullback is exact.

use std::sync::OnceLock;

use super::{Embedding, EmbeddingOracle, OracleError};
use crate::image::{Image, PixelDelta, CHANNELS};

pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];
pub const THUMB: usize = 16;
pub const REFERENCE_DIM: usize = 64;
const DEGENERATE_NORM: f64 = 1e-9;

#[derive(Debug, Clone, Default)]
pub struct ReferenceEmbedding {
    /// `(height, width)`; `None` accepts any size.
    pub input_size: Option<(usize, usize)>,
}

/// Row-major `THUMB x N` matrix averaging source cells onto the thumbnail grid.
fn area_weights(src: usize) -> Vec<f64> {
    let mut w = vec![0.0; THUMB * src];
    let cell = src as f64 / THUMB as f64;
    for i in 0..THUMB {
        let (lo, hi) = (i as f64 * cell, (i + 1) as f64 * cell);
        let first = lo.floor() as usize;
        let last = (hi.ceil() as usize).min(src);
        for j in first..last {
            let overlap = (hi.min(j as f64 + 1.0) - lo.max(j as f64)).max(0.0);
            w[i * src + j] = overlap / cell;
        }
    }
    w
}

/// Orthonormal DCT-II basis, `basis[k * THUMB + n]`.
fn dct_basis() -> &'static [f64] {
    static BASIS: OnceLock<Vec<f64>> = OnceLock::new();
    BASIS.get_or_init(|| {
        let n = THUMB as f64;
        let mut b = vec![0.0; THUMB * THUMB];
        for k in 0..THUMB {
            let alpha = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            for i in 0..THUMB {
                b[k * THUMB + i] =
                    alpha * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2.0 * n)).cos();
            }
        }
        b
    })
}

/// `(row, col)` of the first `REFERENCE_DIM` zig-zag positions after DC.
pub fn zigzag_positions() -> &'static [(usize, usize)] {
    static ORDER: OnceLock<Vec<(usize, usize)>> = OnceLock::new();
    ORDER.get_or_init(|| {
        let mut order = Vec::with_capacity(THUMB * THUMB);
        for s in 0..(2 * THUMB - 1) {
            let lo = s.saturating_sub(THUMB - 1);
            let hi = s.min(THUMB - 1);
            let rows: Vec<usize> = if s % 2 == 1 {
                (lo..=hi).collect()
            } else {
                (lo..=hi).rev().collect()
            };
            order.extend(rows.into_iter().map(|r| (r, s - r)));
        }
        order[1..=REFERENCE_DIM].to_vec()
    })
}

// out (m x p) = a (m x n) * b (n x p)
fn matmul(a: &[f64], b: &[f64], m: usize, n: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..p {
                out[i * p + j] += aik * b[k * p + j];
            }
        }
    }
    out
}

fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

struct Forward {
    ay: Vec<f64>,
    ax: Vec<f64>,
    coeffs: Vec<f64>,
    norm: f64,
}

impl ReferenceEmbedding {
    pub fn new() -> Self {
        Self::default()
    }

    fn check_size(&self, img: &Image) -> Result<(), OracleError> {
        if let Some((h, w)) = self.input_size {
            if img.height() != h || img.width() != w {
                return Err(OracleError::WrongSize {
                    got_w: img.width(),
                    got_h: img.height(),
                    want_w: w,
                    want_h: h,
                });
            }
        }
        Ok(())
    }

    fn forward(&self, img: &Image) -> Forward {
        let (h, w) = (img.height(), img.width());
        let gray: Vec<f64> = img
            .data()
            .chunks_exact(CHANNELS)
            .map(|p| {
                LUMA_WEIGHTS[0] * p[0].clamp(0.0, 1.0)
                    + LUMA_WEIGHTS[1] * p[1].clamp(0.0, 1.0)
                    + LUMA_WEIGHTS[2] * p[2].clamp(0.0, 1.0)
            })
            .collect();
        let ay = area_weights(h);
        let ax = area_weights(w);
        // thumb = Ay * gray * Ax^T
        let rows = matmul(&ay, &gray, THUMB, h, w);
        let thumb = matmul(&rows, &transpose(&ax, THUMB, w), THUMB, w, THUMB);
        // coefficients = C * thumb * C^T
        let c = dct_basis();
        let tmp = matmul(c, &thumb, THUMB, THUMB, THUMB);
        let full = matmul(&tmp, &transpose(c, THUMB, THUMB), THUMB, THUMB, THUMB);
        let coeffs: Vec<f64> = zigzag_positions()
            .iter()
            .map(|&(r, col)| full[r * THUMB + col])
            .collect();
        let norm = coeffs.iter().map(|v| v * v).sum::<f64>().sqrt();
        Forward { ay, ax, coeffs, norm }
    }

    fn finish(fwd: &Forward) -> Embedding {
        if fwd.norm <= DEGENERATE_NORM {
            Embedding {
                values: vec![0.0; REFERENCE_DIM],
                unit_norm: false,
            }
        } else {
            Embedding {
                values: fwd.coeffs.iter().map(|v| v / fwd.norm).collect(),
                unit_norm: true,
            }
        }
    }
}

impl EmbeddingOracle for ReferenceEmbedding {
    fn embed(&self, img: &Image) -> Result<Embedding, OracleError> {
        self.check_size(img)?;
        Ok(Self::finish(&self.forward(img)))
    }

    fn supports_gradient(&self) -> bool {
        true
    }

    fn embed_vjp(
        &self,
        img: &Image,
        cotangent: &dyn Fn(&Embedding) -> Vec<f64>,
    ) -> Result<(Embedding, PixelDelta), OracleError> {
        self.check_size(img)?;
        let (h, w) = (img.height(), img.width());
        let fwd = self.forward(img);
        let emb = Self::finish(&fwd);
        let g = cotangent(&emb);
        if g.len() != REFERENCE_DIM {
            return Err(OracleError::LengthMismatch(g.len(), REFERENCE_DIM));
        }
        if fwd.norm <= DEGENERATE_NORM {
            // the zero-vector output is locally constant
            return Ok((emb, PixelDelta::zeros(h, w)));
        }
        // d(z/|z|) = (I - e e^T) dz / |z|
        let e_dot_g: f64 = emb.values.iter().zip(&g).map(|(e, g)| e * g).sum();
        let mut grid = vec![0.0; THUMB * THUMB];
        for (k, &(r, col)) in zigzag_positions().iter().enumerate() {
            grid[r * THUMB + col] = (g[k] - emb.values[k] * e_dot_g) / fwd.norm;
        }
        // adjoint of C * X * C^T is C^T * G * C
        let c = dct_basis();
        let ct = transpose(c, THUMB, THUMB);
        let tmp = matmul(&ct, &grid, THUMB, THUMB, THUMB);
        let d_thumb = matmul(&tmp, c, THUMB, THUMB, THUMB);
        // adjoint of Ay * G * Ax^T is Ay^T * D * Ax
        let tmp = matmul(&transpose(&fwd.ay, THUMB, h), &d_thumb, h, THUMB, THUMB);
        let d_gray = matmul(&tmp, &fwd.ax, h, THUMB, w);
        let mut out = Vec::with_capacity(h * w * CHANNELS);
        for (p, &dg) in img.data().chunks_exact(CHANNELS).zip(&d_gray) {
            for c in 0..CHANNELS {
                let live = (0.0..=1.0).contains(&p[c]);
                out.push(if live { LUMA_WEIGHTS[c] * dg } else { 0.0 });
            }
        }
        Ok((emb, PixelDelta::new(h, w, out)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::distance;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct double-sum DCT-II, written independently of the matrix path.
    fn naive_dct(x: &[f64], n: usize) -> Vec<f64> {
        let pi = std::f64::consts::PI;
        let mut out = vec![0.0; n * n];
        for v in 0..n {
            for u in 0..n {
                let mut acc = 0.0;
                for y in 0..n {
                    for xx in 0..n {
                        acc += x[y * n + xx]
                            * (pi / n as f64 * (y as f64 + 0.5) * v as f64).cos()
                            * (pi / n as f64 * (xx as f64 + 0.5) * u as f64).cos();
                    }
                }
                let cu = if u == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
                let cv = if v == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
                out[v * n + u] = cu * cv * acc;
            }
        }
        out
    }

    #[test]
    fn zigzag_starts_like_jpeg() {
        let z = zigzag_positions();
        assert_eq!(z.len(), 64);
        assert_eq!(&z[..5], &[(0, 1), (1, 0), (2, 0), (1, 1), (0, 2)]);
        assert_eq!(z[63], (1, 9));
    }

    #[test]
    fn constant_image_is_degenerate() {
        let e = ReferenceEmbedding::new()
            .embed(&Image::filled(160, 160, [0.4, 0.5, 0.6]))
            .unwrap();
        assert!(!e.unit_norm);
        assert!(e.values.iter().all(|&v| v == 0.0));
        assert_eq!(e.len(), REFERENCE_DIM);
    }

    #[test]
    fn deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = Image::from_fn(40, 40, |_, _| [rng.random(), rng.random(), rng.random()]);
        let o = ReferenceEmbedding::new();
        let a = o.embed(&img).unwrap();
        assert_eq!(a, o.embed(&img).unwrap());
        assert!(a.unit_norm);
        let norm: f64 = a.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ramp_matches_independent_dct() {
        let img = Image::from_fn(16, 16, |x, y| {
            let v = (x as f64 + 2.0 * y as f64) / 46.0;
            [v, 0.5 * v, 1.0 - v]
        });
        let gray: Vec<f64> = img
            .data()
            .chunks(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect();
        let full = naive_dct(&gray, 16);
        let picked: Vec<f64> = zigzag_positions().iter().map(|&(r, c)| full[r * 16 + c]).collect();
        let norm = picked.iter().map(|v| v * v).sum::<f64>().sqrt();
        let e = ReferenceEmbedding::new().embed(&img).unwrap();
        for (a, b) in e.values.iter().zip(&picked) {
            assert!((a - b / norm).abs() < 1e-9);
        }
    }

    #[test]
    fn area_downsample_of_integer_ratio_is_block_mean() {
        let w = area_weights(160);
        for i in 0..THUMB {
            let row = &w[i * 160..(i + 1) * 160];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (j, &v) in row.iter().enumerate() {
                let inside = j / 10 == i;
                assert!((v - if inside { 0.1 } else { 0.0 }).abs() < 1e-12);
            }
        }
        let odd = area_weights(37);
        for i in 0..THUMB {
            assert!((odd[i * 37..(i + 1) * 37].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_size_rejected() {
        let o = ReferenceEmbedding {
            input_size: Some((160, 160)),
        };
        assert!(matches!(
            o.embed(&Image::filled(10, 10, [0.0; 3])),
            Err(OracleError::WrongSize { .. })
        ));
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let img = Image::from_fn(24, 20, |_, _| {
            [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)]
        });
        let target = Embedding::from_values((0..64).map(|i| ((i * 7 % 11) as f64 - 5.0) / 20.0).collect());
        let o = ReferenceEmbedding::new();
        let (_, grad) = o
            .embed_vjp(&img, &|e: &Embedding| {
                e.values.iter().zip(&target.values).map(|(a, b)| 2.0 * (a - b)).collect()
            })
            .unwrap();
        let j = |im: &Image| distance(&o.embed(im).unwrap(), &target).unwrap();
        let h = 1e-6;
        for _ in 0..30 {
            let i = rng.random_range(0..img.data().len());
            let mut p = img.clone();
            let mut m = img.clone();
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let fd = (j(&p) - j(&m)) / (2.0 * h);
            let g = grad.data()[i];
            assert!((fd - g).abs() <= 1e-6 + 1e-4 * g.abs(), "{fd} vs {g}");
        }
    }

    #[test]
    fn saturated_pixels_get_no_gradient() {
        let img = Image::from_fn(16, 16, |x, y| [1.5, (x + y) as f64 / 30.0, -0.2]);
        let (_, grad) = ReferenceEmbedding::new()
            .embed_vjp(&img, &|e: &Embedding| e.values.iter().map(|v| v + 0.1).collect())
            .unwrap();
        for p in grad.data().chunks(3) {
            assert_eq!(p[0], 0.0);
            assert_eq!(p[2], 0.0);
        }
        assert!(grad.data().chunks(3).any(|p| p[1] != 0.0));
    }

    #[test]
    fn single_pixel_lipschitz_regression() {
        // Measured worst case over these seeds is ~6.8e-6.
        let o = ReferenceEmbedding::new();
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let img = Image::from_fn(160, 160, |x, y| {
                let base = 0.5 + 0.3 * ((x as f64 / 17.0).sin() * (y as f64 / 23.0).cos());
                [base, base * 0.8, base * 0.6 + rng.random_range(0.0..0.05)]
            });
            let e0 = o.embed(&img).unwrap();
            for _ in 0..20 {
                let mut p = img.clone();
                let (x, y, c) = (rng.random_range(0..160), rng.random_range(0..160), rng.random_range(0..3));
                let v = p.get(x, y, c);
                p.set(x, y, c, v + 1.0 / 255.0);
                let d = distance(&e0, &o.embed(&p).unwrap()).unwrap().sqrt();
                assert!(d < 5e-5, "single-pixel change moved embedding by {d}");
            }
        }
    }
}
