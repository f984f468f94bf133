//! Parametric infrared light spots and synthesis of the perturbed face.
//!
//! Each spot is a radially symmetric attenuating dot with a center, a spread
//! and a brightness coefficient. The spots are summed into a grayscale field,
//! tinted with the camera's infrared channel response and added to the base
//! image scaled by a global amplification.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{Image, PixelDelta, CHANNELS};

/// Per-channel (R, G, B) response of the reference camera to infrared light.
pub const DEFAULT_COLOR_RATIO: [f64; 3] = [0.0852, 0.0533, 0.1521];

/// Number of optimizable parameters per spot.
pub const PARAMS_PER_SPOT: usize = 4;

/// Field-precise invariant violation.
#[derive(Debug, Clone, Error, PartialEq)]
#[error("{field}: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpotParams {
    pub px: f64,
    pub py: f64,
    pub sigma: f64,
    pub s: f64,
}

impl SpotParams {
    pub fn new(px: f64, py: f64, sigma: f64, s: f64) -> Self {
        Self { px, py, sigma, s }
    }

    /// Radius at which a single spot falls to half its center brightness.
    pub fn half_radius(&self) -> f64 {
        self.sigma * (2.0 * std::f64::consts::LN_2).sqrt()
    }

    /// Whether the center lies inside the canvas grown by `3 sigma` on every side.
    pub fn within_margin(&self, height: usize, width: usize) -> bool {
        let m = 3.0 * self.sigma;
        self.px >= -m
            && self.px <= (width as f64 - 1.0) + m
            && self.py >= -m
            && self.py <= (height as f64 - 1.0) + m
    }
}

fn default_ratio() -> [f64; 3] {
    DEFAULT_COLOR_RATIO
}

/// The full optimization variable: global amplification plus a list of spots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConfig {
    pub amp: f64,
    #[serde(default = "default_ratio")]
    pub color_ratio: [f64; 3],
    pub spots: Vec<SpotParams>,
}

impl PerturbationConfig {
    pub fn new(amp: f64, spots: Vec<SpotParams>) -> Self {
        Self {
            amp,
            color_ratio: DEFAULT_COLOR_RATIO,
            spots,
        }
    }

    /// Canvas-independent invariants.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.amp.is_finite() && self.amp >= 0.0) {
            return Err(ConfigError::new("amp", "must be finite and >= 0"));
        }
        for (c, r) in self.color_ratio.iter().enumerate() {
            if !(r.is_finite() && *r > 0.0) {
                return Err(ConfigError::new(format!("color_ratio[{c}]"), "must be > 0"));
            }
        }
        if self.spots.is_empty() {
            return Err(ConfigError::new("spots", "at least one spot is required"));
        }
        for (i, s) in self.spots.iter().enumerate() {
            if !(s.px.is_finite() && s.py.is_finite()) {
                return Err(ConfigError::new(format!("spots[{i}].px"), "must be finite"));
            }
            if !(s.sigma.is_finite() && s.sigma > 0.0) {
                return Err(ConfigError::new(format!("spots[{i}].sigma"), "must be > 0"));
            }
            if !(s.s.is_finite() && s.s >= 0.0) {
                return Err(ConfigError::new(format!("spots[{i}].s"), "must be >= 0"));
            }
        }
        Ok(())
    }

    /// All invariants, including that every center lies within the margin.
    pub fn validate_for_canvas(&self, height: usize, width: usize) -> Result<(), ConfigError> {
        self.validate()?;
        for (i, s) in self.spots.iter().enumerate() {
            if !s.within_margin(height, width) {
                return Err(ConfigError::new(
                    format!("spots[{i}]"),
                    format!("center ({}, {}) outside canvas + 3 sigma", s.px, s.py),
                ));
            }
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        1 + PARAMS_PER_SPOT * self.spots.len()
    }

    /// Flat parameter vector `[amp, px_0, py_0, sigma_0, s_0, px_1, ...]`.
    pub fn to_params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        v.push(self.amp);
        for s in &self.spots {
            v.extend([s.px, s.py, s.sigma, s.s]);
        }
        v
    }

    /// Inverse of [`to_params`](Self::to_params); keeps this config's color ratio.
    pub fn with_params(&self, params: &[f64]) -> PerturbationConfig {
        assert_eq!(params.len(), self.n_params(), "parameter vector length");
        PerturbationConfig {
            amp: params[0],
            color_ratio: self.color_ratio,
            spots: params[1..]
                .chunks_exact(PARAMS_PER_SPOT)
                .map(|p| SpotParams::new(p[0], p[1], p[2], p[3]))
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<PerturbationConfig, ConfigError> {
        let cfg: PerturbationConfig =
            serde_json::from_str(text).map_err(|e| ConfigError::new("$", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Attenuation profile of one spot as a function of squared distance.
///
/// The brightness contributed at squared distance `d2` is `s * weight(d2, sigma)`.
pub trait SpotKernel: Sync {
    fn weight(&self, d2: f64, sigma: f64) -> f64;

    /// `(weight, d weight / d d2, d weight / d sigma)`.
    fn weight_grad(&self, d2: f64, sigma: f64) -> (f64, f64, f64);
}

/// `exp(-d^2 / (2 sigma^2))`: unit peak, so the center brightness equals `s`.
#[derive(Debug, Clone, Copy, Default)]
pub struct GaussianKernel;

impl SpotKernel for GaussianKernel {
    #[inline]
    fn weight(&self, d2: f64, sigma: f64) -> f64 {
        (-d2 / (2.0 * sigma * sigma)).exp()
    }

    #[inline]
    fn weight_grad(&self, d2: f64, sigma: f64) -> (f64, f64, f64) {
        let s2 = sigma * sigma;
        let w = (-d2 / (2.0 * s2)).exp();
        (w, -w / (2.0 * s2), w * d2 / (s2 * sigma))
    }
}

/// Normal pdf evaluated at the squared distance itself, `N(d2; 0, sigma)`.
///
/// Kept as an alternative reading of the spot formula; its peak is
/// `1 / (sigma sqrt(2 pi))` rather than 1.
#[derive(Debug, Clone, Copy, Default)]
pub struct SquaredDistancePdfKernel;

impl SpotKernel for SquaredDistancePdfKernel {
    fn weight(&self, d2: f64, sigma: f64) -> f64 {
        let norm = 1.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt());
        norm * (-(d2 * d2) / (2.0 * sigma * sigma)).exp()
    }

    fn weight_grad(&self, d2: f64, sigma: f64) -> (f64, f64, f64) {
        let w = self.weight(d2, sigma);
        let s2 = sigma * sigma;
        (w, -w * d2 / s2, w * (d2 * d2 / (s2 * sigma) - 1.0 / sigma))
    }
}

/// Brightness of one spot at pixel `(x, y)` under the default kernel.
pub fn spot_brightness(spot: &SpotParams, x: f64, y: f64) -> f64 {
    spot_brightness_with(&GaussianKernel, spot, x, y)
}

pub fn spot_brightness_with(kernel: &dyn SpotKernel, spot: &SpotParams, x: f64, y: f64) -> f64 {
    let (dx, dy) = (spot.px - x, spot.py - y);
    spot.s * kernel.weight(dx * dx + dy * dy, spot.sigma)
}

/// Grayscale accumulation of all spots over the canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct SpotField {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl SpotField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Sum of spot brightness at every integer pixel center.
pub fn render_field(config: &PerturbationConfig, height: usize, width: usize) -> SpotField {
    render_field_with(&GaussianKernel, config, height, width)
}

pub fn render_field_with(
    kernel: &dyn SpotKernel,
    config: &PerturbationConfig,
    height: usize,
    width: usize,
) -> SpotField {
    let mut data = vec![0.0; height * width];
    if width > 0 {
        data.par_chunks_mut(width).enumerate().for_each(|(y, row)| {
            for (x, out) in row.iter_mut().enumerate() {
                // fixed per-pixel summation order, independent of the row split
                let mut acc = 0.0;
                for spot in &config.spots {
                    acc += spot_brightness_with(kernel, spot, x as f64, y as f64);
                }
                *out = acc;
            }
        });
    }
    SpotField { height, width, data }
}

/// Tint a grayscale field: channel `c` becomes `ratio[c] * field`.
pub fn colorize(field: &SpotField, ratio: [f64; 3]) -> PixelDelta {
    let mut data = Vec::with_capacity(field.data.len() * CHANNELS);
    for &v in &field.data {
        data.extend([ratio[0] * v, ratio[1] * v, ratio[2] * v]);
    }
    PixelDelta::new(field.height, field.width, data).expect("field shape is valid")
}

/// `base + amp * colorize(field)`, left unclamped.
pub fn synthesize(base: &Image, config: &PerturbationConfig) -> Image {
    synthesize_with(&GaussianKernel, base, config)
}

pub fn synthesize_with(kernel: &dyn SpotKernel, base: &Image, config: &PerturbationConfig) -> Image {
    let field = render_field_with(kernel, config, base.height(), base.width());
    let mut out = base.clone();
    let r = config.color_ratio;
    for (px, &v) in out.data_mut().chunks_exact_mut(CHANNELS).zip(&field.data) {
        let a = config.amp * v;
        px[0] += a * r[0];
        px[1] += a * r[1];
        px[2] += a * r[2];
    }
    out
}

/// Partial derivatives of the synthesized image with respect to every parameter,
/// in [`PerturbationConfig::to_params`] order.
#[derive(Debug, Clone)]
pub struct SpotJacobian {
    pub partials: Vec<PixelDelta>,
}

impl SpotJacobian {
    pub fn amp(&self) -> &PixelDelta {
        &self.partials[0]
    }

    /// `[d/dpx, d/dpy, d/dsigma, d/ds]` for spot `i`.
    pub fn spot(&self, i: usize) -> &[PixelDelta] {
        let start = 1 + PARAMS_PER_SPOT * i;
        &self.partials[start..start + PARAMS_PER_SPOT]
    }
}

/// Analytic Jacobian of `synthesize(base, config)`. Independent of `base`
/// apart from its shape.
pub fn spot_jacobian(base: &Image, config: &PerturbationConfig) -> SpotJacobian {
    let (h, w) = (base.height(), base.width());
    let field = render_field(config, h, w);
    let mut partials = vec![colorize(&field, config.color_ratio)];
    for spot in &config.spots {
        let mut grads: [SpotField; PARAMS_PER_SPOT] = std::array::from_fn(|_| SpotField::zeros(h, w));
        for y in 0..h {
            for x in 0..w {
                let g = spot_param_grad(&GaussianKernel, spot, x as f64, y as f64);
                for (k, gk) in g.iter().enumerate() {
                    grads[k].data[y * w + x] = config.amp * gk;
                }
            }
        }
        partials.extend(grads.iter().map(|f| colorize(f, config.color_ratio)));
    }
    SpotJacobian { partials }
}

/// Gradient of one spot's brightness at `(x, y)` with respect to `[px, py, sigma, s]`.
#[inline]
pub fn spot_param_grad(kernel: &dyn SpotKernel, spot: &SpotParams, x: f64, y: f64) -> [f64; 4] {
    let (dx, dy) = (spot.px - x, spot.py - y);
    let d2 = dx * dx + dy * dy;
    let (w, w_d2, w_sigma) = kernel.weight_grad(d2, spot.sigma);
    [
        spot.s * w_d2 * 2.0 * dx,
        spot.s * w_d2 * 2.0 * dy,
        spot.s * w_sigma,
        w,
    ]
}
