//! Compare a photographed spot layout against the computed one.
//!
//! Given a photo with the LEDs on and one with them off, the difference image
//! isolates the realized spots. Each spot is localized by correlating the
//! model's own spot template around its intended center, then its brightness
//! (relative to the whole face) and its half-brightness radius are compared
//! with what the model predicts.
//!
//! All analysis runs on a matched-filter luminance: channel weights
//! `ratio / |ratio|^2`, so a pure spot delta `ratio * v` maps back to `v`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{diff, Image, ImageError, PixelDelta, Shape, CHANNELS};
use crate::oracle::{distance, Embedding, EmbeddingOracle};
use crate::spot::{synthesize, PerturbationConfig, SpotParams};

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("spot not found: {0}")]
    NotFound(String),
    #[error("not measurable: {0}")]
    NotMeasurable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSettings {
    /// Radius of the correlation search window around the intended center, px.
    pub search_radius: f64,
    /// Relative tolerance on the brightness ratio.
    pub brightness_tolerance: f64,
    /// Relative tolerance on the half-brightness radius.
    pub size_tolerance: f64,
    /// Peak correlation below this multiple of the window noise floor is flagged.
    pub min_confidence: f64,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self {
            search_radius: 20.0,
            brightness_tolerance: 0.15,
            size_tolerance: 0.20,
            min_confidence: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BrightnessVerdict {
    TooBright,
    TooDim,
    Ok,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeVerdict {
    TooLarge,
    TooSmall,
    Ok,
}

/// Where a spot was found.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub center: (f64, f64),
    pub peak: f64,
    /// Peak over the correlation a noise field with the window's RMS would give.
    pub confidence: f64,
    pub low_confidence: bool,
    /// The search window extended past the canvas and was clipped.
    pub window_clipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpotReport {
    pub spot_index: usize,
    pub found: bool,
    pub theoretical_center: (f64, f64),
    pub detected_center: Option<(f64, f64)>,
    /// `theoretical_center - detected_center`: the way to move the LED.
    pub offset_vector: Option<(f64, f64)>,
    pub low_confidence: bool,
    pub brightness_ratio_measured: Option<f64>,
    pub brightness_ratio_theoretical: Option<f64>,
    pub brightness_verdict: Option<BrightnessVerdict>,
    pub half_radius_measured: Option<f64>,
    pub half_radius_theoretical: f64,
    pub size_verdict: Option<SizeVerdict>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub spots: Vec<SpotReport>,
    /// Distance between the LEDs-on photo and the victim embedding.
    pub current_loss: Option<f64>,
    pub loss_error: Option<String>,
    /// Seconds since the Unix epoch; filled in by callers that have a clock.
    pub timestamp: Option<u64>,
}

impl CalibrationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn all_ok(&self) -> bool {
        self.spots.iter().all(|s| {
            s.found
                && s.brightness_verdict == Some(BrightnessVerdict::Ok)
                && s.size_verdict == Some(SizeVerdict::Ok)
        })
    }
}

/// Channel weights that invert the spot tint.
pub fn luminance_weights(ratio: [f64; 3]) -> [f64; 3] {
    let n2: f64 = ratio.iter().map(|r| r * r).sum();
    [ratio[0] / n2, ratio[1] / n2, ratio[2] / n2]
}

/// Matched-filter luminance plane, row-major.
pub fn luminance(data: &[f64], ratio: [f64; 3]) -> Vec<f64> {
    let w = luminance_weights(ratio);
    data.chunks_exact(CHANNELS)
        .map(|p| w[0] * p[0] + w[1] * p[1] + w[2] * p[2])
        .collect()
}

/// A channel at or above this level in the LEDs-on photo counts as clipped:
/// the sensor could not record the full spot there.
pub const SATURATION_LEVEL: f64 = 1.0 - 0.5 / 255.0;

/// Per-pixel flag, row-major: any channel of `on` is clipped.
pub fn saturation_mask(on: &Image) -> Vec<bool> {
    on.data()
        .chunks_exact(CHANNELS)
        .map(|p| p.iter().any(|&v| v >= SATURATION_LEVEL))
        .collect()
}

struct Plane<'a> {
    values: &'a [f64],
    /// Empty, or one flag per pixel; flagged pixels are unreliable.
    mask: &'a [bool],
    height: usize,
    width: usize,
}

impl Plane<'_> {
    fn at(&self, x: i64, y: i64) -> f64 {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            0.0
        } else {
            self.values[y as usize * self.width + x as usize]
        }
    }

    /// In-canvas and flagged. Off-canvas pixels read as a reliable zero.
    fn masked(&self, x: i64, y: i64) -> bool {
        !self.mask.is_empty()
            && x >= 0
            && y >= 0
            && x < self.width as i64
            && y < self.height as i64
            && self.mask[y as usize * self.width + x as usize]
    }

    /// `None` off the canvas or when any contributing pixel is masked.
    fn bilinear(&self, x: f64, y: f64) -> Option<f64> {
        if x < 0.0 || y < 0.0 || x > (self.width - 1) as f64 || y > (self.height - 1) as f64 {
            return None;
        }
        let (x0, y0) = (x.floor() as i64, y.floor() as i64);
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let corners = [(x0, y0, (1.0 - fx) * (1.0 - fy)), (x0 + 1, y0, fx * (1.0 - fy)), (x0, y0 + 1, (1.0 - fx) * fy), (x0 + 1, y0 + 1, fx * fy)];
        if corners.iter().any(|&(cx, cy, wgt)| wgt > 0.0 && self.masked(cx, cy)) {
            return None;
        }
        let top = self.at(x0, y0) * (1.0 - fx) + self.at(x0 + 1, y0) * fx;
        let bottom = self.at(x0, y0 + 1) * (1.0 - fx) + self.at(x0 + 1, y0 + 1) * fx;
        Some(top * (1.0 - fy) + bottom * fy)
    }

    /// Mean over pixels within `radius` of `(cx, cy)`; masked pixels take
    /// `fill`'s value. `None` if the disc is empty or a masked pixel has no fill.
    fn disc_mean(&self, cx: f64, cy: f64, radius: f64, fill: Option<&GaussianFit>) -> Option<f64> {
        let (mut sum, mut n) = (0.0, 0usize);
        let r2 = radius * radius;
        let (x_lo, x_hi) = ((cx - radius).floor().max(0.0) as i64, (cx + radius).ceil() as i64);
        let (y_lo, y_hi) = ((cy - radius).floor().max(0.0) as i64, (cy + radius).ceil() as i64);
        for y in y_lo..=y_hi.min(self.height as i64 - 1) {
            for x in x_lo..=x_hi.min(self.width as i64 - 1) {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                if d2 <= r2 {
                    sum += if self.masked(x, y) { fill?.value_at(x as f64, y as f64) } else { self.at(x, y) };
                    n += 1;
                }
            }
        }
        (n > 0).then(|| sum / n as f64)
    }
}

/// `amplitude * exp(-|p - center|^2 / (2 sigma^2))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianFit {
    pub center: (f64, f64),
    pub amplitude: f64,
    pub sigma: f64,
}

impl GaussianFit {
    pub fn value_at(&self, x: f64, y: f64) -> f64 {
        let d2 = (x - self.center.0).powi(2) + (y - self.center.1).powi(2);
        self.amplitude * (-d2 / (2.0 * self.sigma * self.sigma)).exp()
    }
}

/// Solve the 4x4 system `a x = b` by elimination with partial pivoting.
fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> Option<[f64; 4]> {
    for col in 0..4 {
        let pivot = (col..4).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..4 {
            let f = a[row][col] / a[col][col];
            for k in col..4 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 4];
    for row in (0..4).rev() {
        let tail: f64 = (row + 1..4).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row][row];
    }
    Some(x)
}

/// Fit a Gaussian with free center, amplitude and width to the unmasked
/// pixels within `reach` of `around` that exceed a fifth of the brightest of
/// them. `ln v = c0 + c1 x + c2 y + c3 (x^2 + y^2)` is linear in the
/// coefficients, solved by least squares weighted with `v^2`.
fn fit_gaussian(plane: &Plane, around: (f64, f64), reach: f64) -> Option<GaussianFit> {
    let mut samples = Vec::new();
    let r2 = reach * reach;
    for y in (around.1 - reach).floor() as i64..=(around.1 + reach).ceil() as i64 {
        for x in (around.0 - reach).floor() as i64..=(around.0 + reach).ceil() as i64 {
            if x < 0 || y < 0 || x >= plane.width as i64 || y >= plane.height as i64 || plane.masked(x, y) {
                continue;
            }
            let (fx, fy) = (x as f64 - around.0, y as f64 - around.1);
            if fx * fx + fy * fy <= r2 {
                samples.push((fx, fy, plane.at(x, y)));
            }
        }
    }
    let peak = samples.iter().map(|s| s.2).fold(0.0, f64::max);
    if peak <= 0.0 {
        return None;
    }
    let (mut ata, mut atb, mut n) = ([[0.0; 4]; 4], [0.0; 4], 0);
    for &(fx, fy, v) in samples.iter().filter(|s| s.2 > 0.2 * peak) {
        let row = [1.0, fx, fy, fx * fx + fy * fy];
        let (wgt, ly) = (v * v, v.ln());
        for i in 0..4 {
            for j in 0..4 {
                ata[i][j] += wgt * row[i] * row[j];
            }
            atb[i] += wgt * row[i] * ly;
        }
        n += 1;
    }
    if n < 6 {
        return None;
    }
    let c = solve4(ata, atb)?;
    if !(c[3] < 0.0) {
        return None;
    }
    let s2 = -0.5 / c[3];
    let (ox, oy) = (c[1] * s2, c[2] * s2);
    let amplitude = (c[0] + (ox * ox + oy * oy) / (2.0 * s2)).exp();
    let fit = GaussianFit { center: (around.0 + ox, around.1 + oy), amplitude, sigma: s2.sqrt() };
    (fit.amplitude.is_finite() && fit.sigma.is_finite() && ox.hypot(oy) <= reach).then_some(fit)
}

/// True if any flagged pixel lies within `radius` of `center`.
fn mask_touches(plane: &Plane, center: (f64, f64), radius: f64) -> bool {
    if plane.mask.is_empty() {
        return false;
    }
    let r2 = radius * radius;
    let y_range = (center.1 - radius).floor() as i64..=(center.1 + radius).ceil() as i64;
    y_range.into_iter().any(|y| {
        ((center.0 - radius).floor() as i64..=(center.0 + radius).ceil() as i64).any(|x| {
            (x as f64 - center.0).powi(2) + (y as f64 - center.1).powi(2) <= r2 && plane.masked(x, y)
        })
    })
}

/// Sub-pixel center for a spot whose footprint around `detected` is partly
/// clipped, from a Gaussian fit to the unclipped pixels. `None` when nothing
/// near the spot is clipped or the fit fails.
pub fn refine_clipped_center(
    delta: &PixelDelta,
    saturated: &[bool],
    spot: &SpotParams,
    ratio: [f64; 3],
    detected: (f64, f64),
) -> Option<(f64, f64)> {
    let (h, w) = delta.shape();
    let lum = luminance(delta.data(), ratio);
    let plane = Plane { values: &lum, mask: saturated, height: h, width: w };
    let reach = 3.0 * spot.sigma;
    if !mask_touches(&plane, detected, reach) {
        return None;
    }
    fit_gaussian(&plane, detected, reach).map(|f| f.center)
}

/// Cross-correlate the spot template with the difference luminance inside a
/// disc of `search_radius` around the spot's intended center and return the
/// correlation peak.
///
/// Ties go to the candidate nearest the intended center, then to the first in
/// row-major order.
pub fn locate_spot(
    delta: &PixelDelta,
    spot: &SpotParams,
    ratio: [f64; 3],
    search_radius: f64,
    min_confidence: f64,
) -> Result<Localization, CalibrationError> {
    locate_spot_masked(delta, &[], spot, ratio, search_radius, min_confidence)
}

/// [`locate_spot`] ignoring pixels flagged in `saturated` (empty for none).
///
/// Each candidate's correlation is normalized by the template energy over
/// the pixels it actually uses, so a spot partly clipped by the sensor still
/// peaks at its center. With nothing flagged this is plain correlation.
pub fn locate_spot_masked(
    delta: &PixelDelta,
    saturated: &[bool],
    spot: &SpotParams,
    ratio: [f64; 3],
    search_radius: f64,
    min_confidence: f64,
) -> Result<Localization, CalibrationError> {
    let (h, w) = delta.shape();
    let lum = luminance(delta.data(), ratio);
    let plane = Plane { values: &lum, mask: saturated, height: h, width: w };

    let reach = (3.0 * spot.sigma).ceil() as i64;
    let mut template = Vec::new();
    for dy in -reach..=reach {
        for dx in -reach..=reach {
            let d2 = (dx * dx + dy * dy) as f64;
            if d2 <= 9.0 * spot.sigma * spot.sigma {
                template.push((dx, dy, (-d2 / (2.0 * spot.sigma * spot.sigma)).exp()));
            }
        }
    }
    let template_energy = template.iter().map(|t| t.2 * t.2).sum::<f64>();
    let template_norm = template_energy.sqrt();

    let r2 = search_radius * search_radius;
    let (x_lo, x_hi) = ((spot.px - search_radius).floor() as i64, (spot.px + search_radius).ceil() as i64);
    let (y_lo, y_hi) = ((spot.py - search_radius).floor() as i64, (spot.py + search_radius).ceil() as i64);
    let mut window_clipped = false;
    let mut best: Option<(f64, f64, (i64, i64))> = None;
    let (mut sq_sum, mut n) = (0.0, 0usize);
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let d2 = (x as f64 - spot.px).powi(2) + (y as f64 - spot.py).powi(2);
            if d2 > r2 {
                continue;
            }
            if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                window_clipped = true;
                continue;
            }
            if !plane.masked(x, y) {
                let v = plane.at(x, y);
                sq_sum += v * v;
                n += 1;
            }
            let (mut corr, mut energy) = (0.0, template_energy);
            for &(dx, dy, t) in &template {
                if plane.masked(x + dx, y + dy) {
                    energy -= t * t;
                } else {
                    corr += t * plane.at(x + dx, y + dy);
                }
            }
            // less than a tenth of the template visible: too little to score
            if energy < 0.1 * template_energy {
                continue;
            }
            let score = if energy == template_energy { corr / template_norm } else { corr / energy.sqrt() };
            let better = match best {
                None => true,
                Some((c, bd2, _)) => score > c || (score == c && d2 < bd2),
            };
            if better {
                best = Some((score, d2, (x, y)));
            }
        }
    }
    if window_clipped {
        tracing::warn!(px = spot.px, py = spot.py, "calibration search window clipped to canvas");
    }
    let Some((score, _, (bx, by))) = best else {
        return Err(CalibrationError::NotFound("search window lies outside the canvas or is saturated".into()));
    };
    if n == 0 {
        return Err(CalibrationError::NotFound("search window is saturated".into()));
    }
    let rms = (sq_sum / n as f64).sqrt();
    if rms == 0.0 {
        return Err(CalibrationError::NotFound("difference image is zero in the search window".into()));
    }
    let confidence = score / rms;
    Ok(Localization {
        center: (bx as f64, by as f64),
        peak: score * template_norm,
        confidence,
        low_confidence: confidence < min_confidence,
        window_clipped,
    })
}

/// Measured and predicted ratio of spot brightness to overall face brightness.
///
/// Returns `(measured, theoretical, verdict)`. The measured ratio averages the
/// difference luminance within the spot's half-brightness radius of the
/// detected center and divides by the mean luminance of the LEDs-on photo.
/// The prediction repeats this on the model's synthesis over the LEDs-off
/// photo (`on - diff`) at the intended center.
///
/// Where `on` is clipped the spot's true brightness is unknown; those pixels
/// take the value of a Gaussian fitted to the unclipped part of the spot, and
/// the prediction likewise uses the unclipped model.
pub fn brightness_check(
    delta: &PixelDelta,
    on: &Image,
    config: &PerturbationConfig,
    spot_index: usize,
    detected: (f64, f64),
    tolerance: f64,
) -> Result<(f64, f64, BrightnessVerdict), CalibrationError> {
    let (h, w) = on.shape();
    if !on.same_shape(delta) {
        return Err(ImageError::DimensionMismatch {
            a_w: w,
            a_h: h,
            b_w: delta.width(),
            b_h: delta.height(),
        }
        .into());
    }
    let spot = &config.spots[spot_index];
    let radius = spot.half_radius();
    let ratio = config.color_ratio;

    let saturated = saturation_mask(on);
    let lum_delta = luminance(delta.data(), ratio);
    let plane = Plane { values: &lum_delta, mask: &saturated, height: h, width: w };
    let fill = fit_gaussian(&plane, detected, 3.0 * spot.sigma);
    let measured_spot = plane
        .disc_mean(detected.0, detected.1, radius, fill.as_ref())
        .ok_or_else(|| CalibrationError::NotMeasurable("spot region is empty or clipped beyond recovery".into()))?;
    let measured_face = mean(&luminance(on.data(), ratio));

    let off_data: Vec<f64> = on.data().iter().zip(delta.data()).map(|(a, d)| a - d).collect();
    let off = Image::new(h, w, off_data)?;
    let synth = synthesize(&off, config);
    let predicted_delta = diff(&synth, &off)?;
    let lum_pred = luminance(predicted_delta.data(), ratio);
    let predicted_spot = Plane { values: &lum_pred, mask: &[], height: h, width: w }
        .disc_mean(spot.px, spot.py, radius, None)
        .ok_or_else(|| CalibrationError::NotMeasurable("spot center lies off the canvas".into()))?;
    let predicted_face = mean(&luminance(synth.clamped().data(), ratio));

    if measured_face <= 0.0 || predicted_face <= 0.0 {
        return Err(CalibrationError::NotMeasurable("face luminance is zero".into()));
    }
    let measured = measured_spot / measured_face;
    let theoretical = predicted_spot / predicted_face;
    if theoretical <= 0.0 {
        return Err(CalibrationError::NotMeasurable("predicted spot has no brightness".into()));
    }
    let rel = measured / theoretical - 1.0;
    let verdict = if rel > tolerance {
        BrightnessVerdict::TooBright
    } else if rel < -tolerance {
        BrightnessVerdict::TooDim
    } else {
        BrightnessVerdict::Ok
    };
    Ok((measured, theoretical, verdict))
}

const RAY_STEP: f64 = 0.25;

/// Half-brightness radius: median over 8 rays of the first radius at which
/// the difference luminance falls below half of its value at the center.
///
/// Returns `(measured, verdict)` against `sigma * sqrt(2 ln 2)`.
pub fn size_check(
    delta: &PixelDelta,
    spot: &SpotParams,
    ratio: [f64; 3],
    detected: (f64, f64),
    tolerance: f64,
) -> Result<(f64, SizeVerdict), CalibrationError> {
    size_check_masked(delta, &[], spot, ratio, detected, tolerance)
}

/// [`size_check`] where pixels flagged in `saturated` read from a Gaussian
/// fitted to the unflagged part of the spot.
pub fn size_check_masked(
    delta: &PixelDelta,
    saturated: &[bool],
    spot: &SpotParams,
    ratio: [f64; 3],
    detected: (f64, f64),
    tolerance: f64,
) -> Result<(f64, SizeVerdict), CalibrationError> {
    let (h, w) = delta.shape();
    let lum = luminance(delta.data(), ratio);
    let plane = Plane { values: &lum, mask: saturated, height: h, width: w };
    let fit = if saturated.iter().any(|&m| m) { fit_gaussian(&plane, detected, 3.0 * spot.sigma) } else { None };
    let sample = |r: f64, dx: f64, dy: f64| -> Option<f64> {
        let (x, y) = (detected.0 + r * dx, detected.1 + r * dy);
        if x < 0.0 || y < 0.0 || x > (w - 1) as f64 || y > (h - 1) as f64 {
            return None;
        }
        plane.bilinear(x, y).or_else(|| fit.map(|f| f.value_at(x, y)))
    };
    let center = sample(0.0, 0.0, 0.0)
        .ok_or_else(|| CalibrationError::NotMeasurable("detected center is off the canvas or clipped".into()))?;
    if center <= 1e-9 {
        return Err(CalibrationError::NotMeasurable("center luminance is ~0".into()));
    }
    let half = 0.5 * center;
    let mut radii = Vec::with_capacity(8);
    for k in 0..8 {
        let theta = k as f64 * std::f64::consts::FRAC_PI_4;
        let (dx, dy) = (theta.cos(), theta.sin());
        let mut prev = center;
        let mut r = 0.0;
        loop {
            r += RAY_STEP;
            let Some(v) = sample(r, dx, dy) else {
                break;
            };
            if v < half {
                // linear interpolation of the crossing inside the last step
                let t = if prev > v { (prev - half) / (prev - v) } else { 1.0 };
                radii.push(r - RAY_STEP + t * RAY_STEP);
                break;
            }
            prev = v;
        }
    }
    if radii.is_empty() {
        return Err(CalibrationError::NotMeasurable("no ray reached half brightness".into()));
    }
    radii.sort_by(f64::total_cmp);
    let m = radii.len();
    let measured = if m % 2 == 1 {
        radii[m / 2]
    } else {
        0.5 * (radii[m / 2 - 1] + radii[m / 2])
    };
    let rel = measured / spot.half_radius() - 1.0;
    let verdict = if rel > tolerance {
        SizeVerdict::TooLarge
    } else if rel < -tolerance {
        SizeVerdict::TooSmall
    } else {
        SizeVerdict::Ok
    };
    Ok((measured, verdict))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// One pass of the measurement loop over every spot of `target`.
pub fn calibrate_once(
    on: &Image,
    off: &Image,
    target: &PerturbationConfig,
    victim: &Embedding,
    oracle: &dyn EmbeddingOracle,
    settings: &CalibrationSettings,
) -> Result<CalibrationReport, CalibrationError> {
    let delta = diff(on, off)?;
    let saturated = saturation_mask(on);
    let ratio = target.color_ratio;
    let spots = target
        .spots
        .iter()
        .enumerate()
        .map(|(i, spot)| {
            let mut report = SpotReport {
                spot_index: i,
                found: false,
                theoretical_center: (spot.px, spot.py),
                detected_center: None,
                offset_vector: None,
                low_confidence: false,
                brightness_ratio_measured: None,
                brightness_ratio_theoretical: None,
                brightness_verdict: None,
                half_radius_measured: None,
                half_radius_theoretical: spot.half_radius(),
                size_verdict: None,
                notes: Vec::new(),
            };
            let loc = match locate_spot_masked(&delta, &saturated, spot, ratio, settings.search_radius, settings.min_confidence) {
                Ok(loc) => loc,
                Err(e) => {
                    report.notes.push(e.to_string());
                    return report;
                }
            };
            if loc.window_clipped {
                report.notes.push("search window clipped to canvas".into());
            }
            let mut center = loc.center;
            if let Some(refined) = refine_clipped_center(&delta, &saturated, spot, ratio, center) {
                if (refined.0 - center.0).hypot(refined.1 - center.1) <= spot.sigma {
                    report.notes.push("spot partly saturated; center refined by Gaussian fit".into());
                    center = refined;
                }
            }
            report.found = true;
            report.low_confidence = loc.low_confidence;
            report.detected_center = Some(center);
            report.offset_vector = Some((spot.px - center.0, spot.py - center.1));
            match brightness_check(&delta, on, target, i, center, settings.brightness_tolerance) {
                Ok((m, t, v)) => {
                    report.brightness_ratio_measured = Some(m);
                    report.brightness_ratio_theoretical = Some(t);
                    report.brightness_verdict = Some(v);
                }
                Err(e) => report.notes.push(format!("brightness: {e}")),
            }
            match size_check_masked(&delta, &saturated, spot, ratio, center, settings.size_tolerance) {
                Ok((r, v)) => {
                    report.half_radius_measured = Some(r);
                    report.size_verdict = Some(v);
                }
                Err(e) => report.notes.push(format!("size: {e}")),
            }
            report
        })
        .collect();
    let (current_loss, loss_error) = match oracle
        .embed(&on.clamped())
        .and_then(|e| distance(&e, victim))
    {
        Ok(d) => (Some(d), None),
        Err(e) => (None, Some(e.to_string())),
    };
    Ok(CalibrationReport {
        spots,
        current_loss,
        loss_error,
        timestamp: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::objective;
    use crate::oracle::ReferenceEmbedding;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn base(seed: u64) -> Image {
        crate::corpus::synthetic_face(120, 120, seed)
    }

    fn target() -> PerturbationConfig {
        PerturbationConfig::new(
            1.2,
            vec![
                SpotParams::new(40.3, 35.6, 6.0, 1.0),
                SpotParams::new(82.0, 50.2, 5.0, 0.8),
                SpotParams::new(60.7, 90.1, 7.0, 1.1),
            ],
        )
    }

    fn shot(off: &Image, cfg: &PerturbationConfig) -> Image {
        synthesize(off, cfg).clamped()
    }

    #[test]
    fn exact_spot_found_at_center() {
        let off = Image::filled(64, 64, [0.3; 3]);
        let cfg = PerturbationConfig::new(1.0, vec![SpotParams::new(30.0, 25.0, 6.0, 1.0)]);
        let d = diff(&synthesize(&off, &cfg), &off).unwrap();
        let loc = locate_spot(&d, &cfg.spots[0], cfg.color_ratio, 20.0, 5.0).unwrap();
        assert_eq!(loc.center, (30.0, 25.0));
        assert!(!loc.low_confidence);
    }

    #[test]
    fn shifted_spot_recovered() {
        let off = base(1);
        let spot = SpotParams::new(50.0, 60.0, 6.0, 1.0);
        let planted = PerturbationConfig::new(1.0, vec![SpotParams::new(54.0, 57.0, 6.0, 1.0)]);
        let d = diff(&shot(&off, &planted), &off).unwrap();
        let loc = locate_spot(&d, &spot, planted.color_ratio, 20.0, 5.0).unwrap();
        assert!((loc.center.0 - 54.0).abs() <= 1.0 && (loc.center.1 - 57.0).abs() <= 1.0);
    }

    #[test]
    fn noise_only_is_low_confidence() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = (0..80 * 80 * 3).map(|_| rng.random_range(-0.005..0.005)).collect();
            let d = PixelDelta::new(80, 80, data).unwrap();
            let loc = locate_spot(&d, &SpotParams::new(40.0, 40.0, 6.0, 1.0), crate::spot::DEFAULT_COLOR_RATIO, 20.0, 5.0)
                .unwrap();
            assert!(loc.low_confidence, "seed {seed}: confidence {}", loc.confidence);
        }
    }

    #[test]
    fn zero_diff_not_found_and_clipped_window() {
        let d = PixelDelta::zeros(40, 40);
        let spot = SpotParams::new(20.0, 20.0, 4.0, 1.0);
        assert!(matches!(
            locate_spot(&d, &spot, crate::spot::DEFAULT_COLOR_RATIO, 10.0, 5.0),
            Err(CalibrationError::NotFound(_))
        ));
        let off = Image::filled(40, 40, [0.2; 3]);
        let edge = PerturbationConfig::new(1.0, vec![SpotParams::new(3.0, 20.0, 4.0, 1.0)]);
        let d = diff(&synthesize(&off, &edge), &off).unwrap();
        let loc = locate_spot(&d, &edge.spots[0], edge.color_ratio, 10.0, 5.0).unwrap();
        assert!(loc.window_clipped);
        // the template is truncated at the border, which biases the peak inward slightly
        assert!((loc.center.0 - 3.0).abs() <= 1.0 && loc.center.1 == 20.0);
        let far = SpotParams::new(-100.0, 20.0, 4.0, 1.0);
        assert!(locate_spot(&d, &far, edge.color_ratio, 10.0, 5.0).is_err());
    }

    #[test]
    fn brightness_verdicts() {
        let off = base(2);
        let cfg = target();
        for (k, want) in [(1.0, BrightnessVerdict::Ok), (2.0, BrightnessVerdict::TooBright), (0.5, BrightnessVerdict::TooDim)] {
            let mut planted = cfg.clone();
            planted.spots[0].s *= k;
            let on = shot(&off, &planted);
            let d = diff(&on, &off).unwrap();
            let c = (cfg.spots[0].px.round(), cfg.spots[0].py.round());
            let (_, _, v) = brightness_check(&d, &on, &cfg, 0, c, 0.15).unwrap();
            assert_eq!(v, want, "s x{k}");
        }
    }

    #[test]
    fn size_of_exact_spot() {
        let off = Image::filled(80, 80, [0.2; 3]);
        let cfg = PerturbationConfig::new(1.0, vec![SpotParams::new(40.0, 40.0, 6.0, 1.0)]);
        let d = diff(&synthesize(&off, &cfg), &off).unwrap();
        let (r, v) = size_check(&d, &cfg.spots[0], cfg.color_ratio, (40.0, 40.0), 0.2).unwrap();
        let want = 6.0 * (2.0 * std::f64::consts::LN_2).sqrt();
        assert!((r - want).abs() < 0.5, "{r} vs {want}");
        assert_eq!(v, SizeVerdict::Ok);
    }

    #[test]
    fn size_verdicts() {
        let off = base(3);
        let cfg = target();
        for (k, want) in [(2.0, SizeVerdict::TooLarge), (0.5, SizeVerdict::TooSmall)] {
            let mut planted = cfg.clone();
            planted.spots[1].sigma *= k;
            let d = diff(&shot(&off, &planted), &off).unwrap();
            let (_, v) = size_check(&d, &cfg.spots[1], cfg.color_ratio, (82.0, 50.0), 0.2).unwrap();
            assert_eq!(v, want);
        }
        let zero = PixelDelta::zeros(120, 120);
        assert!(matches!(
            size_check(&zero, &cfg.spots[0], cfg.color_ratio, (40.0, 35.0), 0.2),
            Err(CalibrationError::NotMeasurable(_))
        ));
    }

    #[test]
    fn perfect_implementation_report() {
        let o = ReferenceEmbedding::new();
        let off = base(4);
        let cfg = target();
        let victim = o.embed(&base(5)).unwrap();
        let on = shot(&off, &cfg);
        let report = calibrate_once(&on, &off, &cfg, &victim, &o, &CalibrationSettings::default()).unwrap();
        assert!(report.all_ok(), "{}", report.to_json());
        for s in &report.spots {
            let (dx, dy) = s.offset_vector.unwrap();
            assert!(dx.hypot(dy) <= 1.0);
        }
        let want = objective(&off, &victim, &cfg, &o).unwrap();
        assert_eq!(report.current_loss, Some(want));
    }

    #[test]
    fn planted_shift_reported_as_offset() {
        let o = ReferenceEmbedding::new();
        let off = base(6);
        let cfg = target();
        let mut planted = cfg.clone();
        planted.spots.iter_mut().for_each(|s| s.px += 5.0);
        let on = shot(&off, &planted);
        let report = calibrate_once(&on, &off, &cfg, &Embedding::from_values(vec![0.0; 64]), &o, &CalibrationSettings::default())
            .unwrap();
        for s in &report.spots {
            let (dx, dy) = s.offset_vector.unwrap();
            assert!((dx + 5.0).abs() <= 1.0 && dy.abs() <= 1.0, "{dx},{dy}");
        }
    }

    #[test]
    fn no_perturbation_means_not_found() {
        let o = ReferenceEmbedding::new();
        let off = base(7);
        let report =
            calibrate_once(&off, &off, &target(), &o.embed(&off).unwrap(), &o, &CalibrationSettings::default()).unwrap();
        assert!(report.spots.iter().all(|s| !s.found && s.detected_center.is_none()));
        assert_eq!(report.current_loss, Some(0.0));
    }

    #[test]
    fn size_mismatch_is_an_error() {
        let o = ReferenceEmbedding::new();
        let r = calibrate_once(
            &Image::filled(10, 10, [0.0; 3]),
            &Image::filled(12, 10, [0.0; 3]),
            &target(),
            &Embedding::from_values(vec![0.0; 64]),
            &o,
            &CalibrationSettings::default(),
        );
        assert!(matches!(r, Err(CalibrationError::Image(_))));
    }

    #[test]
    fn applying_offsets_converges() {
        let o = ReferenceEmbedding::new();
        let off = base(8);
        let cfg = target();
        let mut planted = cfg.clone();
        for (i, s) in planted.spots.iter_mut().enumerate() {
            s.px += [4.0, -3.0, 5.0][i];
            s.py += [-3.0, 5.0, 2.0][i];
        }
        let emb = Embedding::from_values(vec![0.0; 64]);
        let settings = CalibrationSettings::default();
        let report = calibrate_once(&shot(&off, &planted), &off, &cfg, &emb, &o, &settings).unwrap();
        for (s, r) in planted.spots.iter_mut().zip(&report.spots) {
            let (dx, dy) = r.offset_vector.unwrap();
            s.px += dx;
            s.py += dy;
        }
        let again = calibrate_once(&shot(&off, &planted), &off, &cfg, &emb, &o, &settings).unwrap();
        for r in &again.spots {
            let (dx, dy) = r.offset_vector.unwrap();
            assert!(dx.hypot(dy) < 1.0, "{dx},{dy}");
        }
    }

    #[test]
    fn brightness_verdict_monotone_in_s() {
        let off = base(9);
        let cfg = target();
        let mut last = None;
        for step in 0..12 {
            let k = 1.0 + 0.1 * step as f64;
            let mut planted = cfg.clone();
            planted.spots[2].s *= k;
            let on = shot(&off, &planted);
            let d = diff(&on, &off).unwrap();
            let (m, _, v) = brightness_check(&d, &on, &cfg, 2, (61.0, 90.0), 0.15).unwrap();
            if let Some((prev_m, prev_v)) = last {
                assert!(m > prev_m);
                assert!(!(prev_v == BrightnessVerdict::TooBright && v == BrightnessVerdict::Ok));
            }
            last = Some((m, v));
        }
        assert_eq!(last.unwrap().1, BrightnessVerdict::TooBright);
    }

    #[test]
    fn gaussian_fit_is_exact_on_a_rendered_spot() {
        let cfg = PerturbationConfig::new(1.0, vec![SpotParams::new(30.4, 27.7, 5.5, 0.9)]);
        let off = Image::filled(64, 64, [0.2; 3]);
        let d = diff(&synthesize(&off, &cfg), &off).unwrap();
        let lum = luminance(d.data(), cfg.color_ratio);
        let mask: Vec<bool> = (0..64 * 64).map(|k| k % 64 < 30).collect();
        let plane = Plane { values: &lum, mask: &mask, height: 64, width: 64 };
        let fit = fit_gaussian(&plane, (32.0, 26.0), 16.5).unwrap();
        assert!((fit.center.0 - 30.4).abs() < 1e-6 && (fit.center.1 - 27.7).abs() < 1e-6, "{fit:?}");
        assert!((fit.sigma - 5.5).abs() < 1e-6 && (fit.amplitude - 0.9).abs() < 1e-6);
    }

    #[test]
    fn saturation_mask_flags_any_clipped_channel() {
        let mut img = Image::filled(2, 2, [0.5; 3]);
        img.set(1, 0, 2, 1.0);
        img.set(0, 1, 0, 254.0 / 255.0);
        assert_eq!(saturation_mask(&img), vec![false, true, false, false]);
    }

    #[test]
    fn spot_on_a_white_patch_is_measured_through_the_clipping() {
        // off is near white on the left half, so the planted spot clips there
        let off = Image::from_fn(80, 80, |x, _| if x < 40 { [0.93; 3] } else { [0.3; 3] }).quantized();
        let target = PerturbationConfig::new(1.2, vec![SpotParams::new(45.0, 40.0, 6.0, 1.0)]);
        let settings = CalibrationSettings::default();
        let victim = Embedding::from_values(vec![0.0; 64]);
        let o = ReferenceEmbedding::new();
        for (dx, dy) in [(-5.0, 3.0), (-5.0, -3.0), (0.0, 0.0)] {
            let mut planted = target.clone();
            planted.spots[0].px += dx;
            planted.spots[0].py += dy;
            let on = shot(&off, &planted).quantized();
            assert!(saturation_mask(&on).iter().any(|&m| m));
            let r = &calibrate_once(&on, &off, &target, &victim, &o, &settings).unwrap().spots[0];
            let (ox, oy) = r.offset_vector.unwrap();
            assert!((ox + dx).hypot(oy + dy) <= 1.0, "shift ({dx},{dy}) offset ({ox},{oy})");
            assert_eq!(r.brightness_verdict, Some(BrightnessVerdict::Ok), "{r:?}");
            assert_eq!(r.size_verdict, Some(SizeVerdict::Ok), "{r:?}");
        }
    }
}
