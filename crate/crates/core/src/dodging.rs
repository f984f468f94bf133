//! Dodging: make the attacker stop matching themself.
//!
//! Two ways to win. The embedding of the perturbed face drifts past the
//! threshold from the clean one, or the landmark predictor that aligns faces
//! before embedding gives up entirely. The second is typically reached by
//! flooding the face with infrared.

use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::image::Image;
use crate::oracle::wire::{self, Transport};
use crate::oracle::{distance, EmbeddingOracle, OracleError, LUMA_WEIGHTS};

/// Keypoints returned by a landmark predictor, or nothing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum LandmarkResult {
    None,
    Detected { points: Vec<(f64, f64)> },
}

impl LandmarkResult {
    pub fn is_none(&self) -> bool {
        matches!(self, LandmarkResult::None)
    }

    pub fn points(&self) -> &[(f64, f64)] {
        match self {
            LandmarkResult::None => &[],
            LandmarkResult::Detected { points } => points,
        }
    }
}

pub trait LandmarkOracle: Send + Sync {
    fn landmarks(&self, img: &Image) -> Result<LandmarkResult, OracleError>;
}

/// Test stand-in for a landmark predictor: fails when the clamped image's
/// mean luma exceeds `threshold`, otherwise reports five fixed keypoints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LuminanceLandmarkStub {
    pub threshold: f64,
}

impl Default for LuminanceLandmarkStub {
    fn default() -> Self {
        Self { threshold: 0.85 }
    }
}

/// Mean Rec.601 luma of the image clamped to `[0, 1]`.
pub fn mean_luma(img: &Image) -> f64 {
    let total: f64 = img
        .data()
        .chunks_exact(3)
        .map(|p| (0..3).map(|c| LUMA_WEIGHTS[c] * p[c].clamp(0.0, 1.0)).sum::<f64>())
        .sum();
    total / (img.height() * img.width()) as f64
}

impl LandmarkOracle for LuminanceLandmarkStub {
    fn landmarks(&self, img: &Image) -> Result<LandmarkResult, OracleError> {
        if mean_luma(img) > self.threshold {
            return Ok(LandmarkResult::None);
        }
        let (w, h) = ((img.width() - 1) as f64, (img.height() - 1) as f64);
        let points = crate::attack::CANONICAL_LOCI.iter().map(|&(u, v)| (u * w, v * h)).collect();
        Ok(LandmarkResult::Detected { points })
    }
}

/// Landmark predictor behind the line protocol (`op: "landmarks"`).
pub struct ExternalLandmarks {
    transport: Mutex<Box<dyn Transport>>,
}

impl ExternalLandmarks {
    pub fn new(transport: Box<dyn Transport>) -> Self {
        Self { transport: Mutex::new(transport) }
    }

    pub fn connect(endpoint: &str, timeout_secs: f64) -> Result<Self, OracleError> {
        Ok(Self::new(wire::connect(endpoint, timeout_secs)?))
    }
}

/// Parse a `landmarks` reply.
pub fn parse_landmarks(reply: &Value) -> Result<LandmarkResult, OracleError> {
    wire::check_error(reply)?;
    let result: LandmarkResult = serde_json::from_value(reply.clone())
        .map_err(|e| OracleError::Malformed(format!("landmarks: {e}")))?;
    if result.points().iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(OracleError::Malformed("landmarks: non-finite point".into()));
    }
    Ok(result)
}

impl LandmarkOracle for ExternalLandmarks {
    fn landmarks(&self, img: &Image) -> Result<LandmarkResult, OracleError> {
        let request = wire::image_request("landmarks", img);
        let reply = self.transport.lock().expect("transport lock").call(&request)?;
        parse_landmarks(&reply)
    }
}

/// Add `strength * ratio` to every pixel. Not clamped.
pub fn flood_illuminate(base: &Image, strength: f64, ratio: [f64; 3]) -> Image {
    let data = base
        .data()
        .chunks_exact(3)
        .flat_map(|p| [p[0] + strength * ratio[0], p[1] + strength * ratio[1], p[2] + strength * ratio[2]])
        .collect();
    Image::new(base.height(), base.width(), data).expect("same shape")
}

/// True iff the landmark predictor finds nothing on `img`.
pub fn check_dodge_landmark(img: &Image, oracle: &dyn LandmarkOracle) -> Result<bool, OracleError> {
    Ok(oracle.landmarks(img)?.is_none())
}

/// True iff the perturbed face's embedding is farther than `threshold` from
/// the clean one.
pub fn check_dodge_embedding(
    base: &Image,
    perturbed: &Image,
    oracle: &dyn EmbeddingOracle,
    threshold: f64,
) -> Result<bool, OracleError> {
    if base.height() != perturbed.height() || base.width() != perturbed.width() {
        return Err(OracleError::WrongSize {
            got_w: perturbed.width(),
            got_h: perturbed.height(),
            want_w: base.width(),
            want_h: base.height(),
        });
    }
    let a = oracle.embed(&base.clamped())?;
    let b = oracle.embed(&perturbed.clamped())?;
    Ok(distance(&a, &b)? > threshold)
}

/// Smallest flood strength at which the clamped image's mean luma exceeds
/// `target`, found by bisection; `None` if even full saturation does not.
pub fn flood_strength_for_luma(base: &Image, ratio: [f64; 3], target: f64) -> Option<f64> {
    let luma_at = |s: f64| mean_luma(&flood_illuminate(base, s, ratio));
    let mut hi = 1.0;
    while luma_at(hi) <= target {
        hi *= 2.0;
        if hi > 1e9 {
            return None;
        }
    }
    let mut lo = 0.0;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if luma_at(mid) > target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi)
}
