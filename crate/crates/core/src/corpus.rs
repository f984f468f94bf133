//! Procedural face-like images for exercising the pipeline without a dataset.
//!
//! Faces are smooth compositions (head ellipse, hair, eyes, brows, nose
//! shading, mouth, background and lighting gradient) whose geometry and tones
//! are drawn from a seeded RNG. Victims at a prescribed embedding distance
//! from an attacker are produced by blending the attacker towards another face
//! and solving for the blend weight.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::{save_image, Image, ImageError};
use crate::oracle::{distance, EmbeddingOracle, OracleError};

#[derive(Debug, Clone)]
struct FaceParams {
    background: [f64; 3],
    skin: [f64; 3],
    hair: [f64; 3],
    center: (f64, f64),
    radii: (f64, f64),
    hairline: f64,
    eye_y: f64,
    eye_dx: f64,
    eye_size: f64,
    mouth_y: f64,
    mouth_w: f64,
    light: (f64, f64),
}

impl FaceParams {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let tone = rng.random_range(0.35..0.85);
        Self {
            background: [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)],
            skin: [
                tone,
                tone * rng.random_range(0.7..0.85),
                tone * rng.random_range(0.55..0.75),
            ],
            hair: {
                let h = rng.random_range(0.03..0.45);
                [h, h * rng.random_range(0.7..1.0), h * rng.random_range(0.5..0.9)]
            },
            center: (rng.random_range(0.45..0.55), rng.random_range(0.5..0.58)),
            radii: (rng.random_range(0.27..0.36), rng.random_range(0.36..0.46)),
            hairline: rng.random_range(0.18..0.32),
            eye_y: rng.random_range(0.4..0.48),
            eye_dx: rng.random_range(0.1..0.15),
            eye_size: rng.random_range(0.025..0.045),
            mouth_y: rng.random_range(0.68..0.76),
            mouth_w: rng.random_range(0.08..0.14),
            light: (rng.random_range(-0.25..0.25), rng.random_range(-0.15..0.15)),
        }
    }
}

fn smoothstep(edge: f64, softness: f64, v: f64) -> f64 {
    let t = ((edge - v) / softness + 0.5).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

fn render(p: &FaceParams, height: usize, width: usize) -> Image {
    Image::from_fn(height, width, |x, y| {
        let u = (x as f64 + 0.5) / width as f64;
        let v = (y as f64 + 0.5) / height as f64;
        let soft = 0.02;
        let mut px = p.background;

        let (cx, cy) = p.center;
        let r = (((u - cx) / p.radii.0).powi(2) + ((v - cy) / p.radii.1).powi(2)).sqrt();
        let head = smoothstep(1.0, soft / p.radii.0, r);
        px = mix(px, p.skin, head);

        // hair cap above the hairline, slightly wider than the head
        let r_hair = (((u - cx) / (p.radii.0 * 1.08)).powi(2) + ((v - cy) / (p.radii.1 * 1.05)).powi(2)).sqrt();
        let cap = smoothstep(1.0, soft / p.radii.0, r_hair) * smoothstep(p.hairline, soft, v);
        px = mix(px, p.hair, cap);

        for side in [-1.0, 1.0] {
            let ex = cx + side * p.eye_dx;
            let d_eye = (((u - ex) / (1.6 * p.eye_size)).powi(2) + ((v - p.eye_y) / p.eye_size).powi(2)).sqrt();
            px = mix(px, [0.08, 0.06, 0.05], smoothstep(1.0, 0.3, d_eye));
            let d_brow = (((u - ex) / (2.2 * p.eye_size)).powi(2)
                + ((v - (p.eye_y - 2.2 * p.eye_size)) / (0.45 * p.eye_size)).powi(2))
            .sqrt();
            px = mix(px, p.hair, 0.8 * smoothstep(1.0, 0.3, d_brow));
        }

        let nose_shade = (-((u - cx) / 0.03).powi(2) - ((v - (p.eye_y + p.mouth_y) / 2.0) / 0.07).powi(2)).exp();
        px = mix(px, mix(p.skin, [0.0; 3], 0.35), 0.5 * nose_shade * head);

        let d_mouth = (((u - cx) / p.mouth_w).powi(2) + ((v - p.mouth_y) / 0.018).powi(2)).sqrt();
        px = mix(px, [0.55, 0.2, 0.22], smoothstep(1.0, 0.25, d_mouth));

        let light = 1.0 + p.light.0 * (u - 0.5) + p.light.1 * (v - 0.5);
        [
            (px[0] * light).clamp(0.0, 1.0),
            (px[1] * light).clamp(0.0, 1.0),
            (px[2] * light).clamp(0.0, 1.0),
        ]
    })
}

/// A seeded synthetic face.
pub fn synthetic_face(height: usize, width: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    render(&FaceParams::sample(&mut rng), height, width)
}

/// Pixelwise `(1 - t) a + t b`.
pub fn blend(a: &Image, b: &Image, t: f64) -> Image {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| (1.0 - t) * x + t * y).collect();
    Image::new(a.height(), a.width(), data).expect("same shape")
}

/// A face whose embedding distance to `attacker` is `target` (within `tol`).
///
/// Draws donor faces from `seed` until one is farther than `target`, then
/// bisects the blend weight between attacker and donor.
pub fn victim_at_distance(
    attacker: &Image,
    target: f64,
    seed: u64,
    oracle: &dyn EmbeddingOracle,
    tol: f64,
) -> Result<Image, OracleError> {
    let anchor = oracle.embed(attacker)?;
    let d = |img: &Image| -> Result<f64, OracleError> { distance(&anchor, &oracle.embed(img)?) };
    let mut donor_seed = seed;
    let donor = loop {
        let candidate = synthetic_face(attacker.height(), attacker.width(), donor_seed);
        if d(&candidate)? > target {
            break candidate;
        }
        donor_seed = donor_seed.wrapping_add(0x9E37_79B9);
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut best = donor.clone();
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let img = blend(attacker, &donor, mid);
        let dm = d(&img)?;
        best = img;
        if (dm - target).abs() <= tol {
            break;
        }
        if dm < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(best)
}

/// Write `n` victims with distances spread evenly over `(lo, hi]` as
/// `synth<k>_0001.png`, `k` counting from `first`, into `dir`. Returns the
/// file names written.
#[allow(clippy::too_many_arguments)]
pub fn write_victim_corpus(
    dir: &Path,
    attacker: &Image,
    first: usize,
    n: usize,
    lo: f64,
    hi: f64,
    seed: u64,
    oracle: &dyn EmbeddingOracle,
) -> Result<Vec<String>, CorpusError> {
    std::fs::create_dir_all(dir).map_err(|e| CorpusError::Image(ImageError::Write {
        path: dir.display().to_string(),
        source: e,
    }))?;
    let mut names = Vec::with_capacity(n);
    for k in 0..n {
        let target = lo + (hi - lo) * (k as f64 + 0.5) / n as f64;
        // quantization on save moves the distance slightly; aim well inside the cell
        let victim = victim_at_distance(attacker, target, seed.wrapping_mul(1000).wrapping_add(k as u64), oracle, 1e-4)?;
        let name = format!("synth{:03}_0001.png", first + k);
        save_image(&victim, dir.join(&name))?;
        names.push(name);
    }
    Ok(names)
}

/// Independent synthetic identities whose distance to `attacker` falls in
/// each `(lo, hi]` bin, `per_bin` of each, drawn by rejection from seeds
/// counting up from `seed`. Written as `face<seed>_0001.png`; returns the
/// names per bin.
pub fn write_binned_corpus(
    dir: &Path,
    attacker: &Image,
    bins: &[(f64, f64)],
    per_bin: usize,
    seed: u64,
    max_draws: usize,
    oracle: &dyn EmbeddingOracle,
) -> Result<Vec<Vec<String>>, CorpusError> {
    std::fs::create_dir_all(dir).map_err(|e| CorpusError::Image(ImageError::Write {
        path: dir.display().to_string(),
        source: e,
    }))?;
    let anchor = oracle.embed(&attacker.clamped())?;
    let mut names = vec![Vec::new(); bins.len()];
    for draw in 0..max_draws as u64 {
        if names.iter().all(|n| n.len() >= per_bin) {
            return Ok(names);
        }
        let face_seed = seed.wrapping_add(draw);
        // what lands on disk is 8-bit, so bin by the quantized face
        let face = synthetic_face(attacker.height(), attacker.width(), face_seed).quantized();
        let d = distance(&anchor, &oracle.embed(&face)?)?;
        if let Some(b) = bins.iter().position(|&(lo, hi)| d > lo && d <= hi) {
            if names[b].len() < per_bin {
                let name = format!("face{face_seed}_0001.png");
                save_image(&face, dir.join(&name))?;
                names[b].push(name);
            }
        }
    }
    Err(CorpusError::Exhausted(max_draws))
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("bins not filled after {0} draws")]
    Exhausted(usize),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::ReferenceEmbedding;

    #[test]
    fn faces_are_deterministic_and_distinct() {
        let a = synthetic_face(48, 48, 1);
        assert_eq!(a, synthetic_face(48, 48, 1));
        assert_ne!(a, synthetic_face(48, 48, 2));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn victim_hits_requested_distance() {
        let o = ReferenceEmbedding::new();
        let a = synthetic_face(64, 64, 3);
        let v = victim_at_distance(&a, 1.3, 77, &o, 1e-6).unwrap();
        let d = distance(&o.embed(&a).unwrap(), &o.embed(&v).unwrap()).unwrap();
        assert!((d - 1.3).abs() < 1e-6, "{d}");
    }
}
