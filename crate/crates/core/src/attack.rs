//! Spot-layout search: Adam over `[amp, (px, py, sigma, s)_i]` minimizing
//! (impersonation) or maximizing (dodging) the squared embedding distance.
//!
//! Gradients come either from the oracle's image-space pullback chained
//! through the spot model (white box) or from forward differences of oracle
//! queries (black box).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adam::Adam;
use crate::image::Image;
use crate::oracle::{distance, Embedding, EmbeddingOracle, OracleError, DEFAULT_THRESHOLD};
use crate::spot::{
    render_field, spot_param_grad, synthesize, GaussianKernel, PerturbationConfig, SpotParams,
    PARAMS_PER_SPOT,
};

/// Relative `(x, y)` loci of the initial spots: forehead, cheeks, nose bridge, chin.
pub const CANONICAL_LOCI: [(f64, f64); 5] = [
    (0.5, 0.25),
    (0.3, 0.55),
    (0.7, 0.55),
    (0.5, 0.45),
    (0.5, 0.8),
];

/// Consecutive iterations at `s == 0` after which a spot is dropped.
pub const ZERO_S_PATIENCE: u32 = 20;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("objective is not finite at iteration {iteration} (value {value})")]
    NonFinite { iteration: usize, value: f64 },
    #[error("attacker is {a_w}x{a_h} but victim is {b_w}x{b_h}")]
    CanvasMismatch {
        a_w: usize,
        a_h: usize,
        b_w: usize,
        b_h: usize,
    },
    #[error("invalid attack configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub sigma: Range,
    pub s: Range,
    pub amp: Range,
    /// Centers may leave the canvas by this many sigmas.
    pub margin_sigmas: f64,
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            sigma: Range::new(1.0, 30.0),
            s: Range::new(0.0, 10.0),
            amp: Range::new(0.0, 5.0),
            margin_sigmas: 3.0,
        }
    }
}

/// Per-group values, used for learning rates and difference steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupValues {
    pub position: f64,
    pub sigma: f64,
    pub s: f64,
    pub amp: f64,
}

impl GroupValues {
    /// Expand to one value per parameter for `n_spots` spots.
    pub fn expand(&self, n_spots: usize) -> Vec<f64> {
        let mut v = vec![self.amp];
        for _ in 0..n_spots {
            v.extend([self.position, self.position, self.sigma, self.s]);
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamSettings {
    pub lr: GroupValues,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        Self {
            lr: GroupValues {
                position: 0.05,
                sigma: 0.01,
                s: 0.01,
                amp: 0.01,
            },
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradMode {
    Whitebox,
    Blackbox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FdScheme {
    Forward,
    Central,
}

/// Missing fields take their defaults when deserialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub n_spots: usize,
    pub max_iters: usize,
    pub refine_iters: usize,
    pub adam: AdamSettings,
    pub grad_mode: GradMode,
    pub fd_scheme: FdScheme,
    pub fd_step: GroupValues,
    pub threshold: f64,
    pub seed: u64,
    pub bounds: Bounds,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            n_spots: 5,
            max_iters: 200,
            refine_iters: 200,
            adam: AdamSettings::default(),
            grad_mode: GradMode::Whitebox,
            fd_scheme: FdScheme::Forward,
            fd_step: GroupValues {
                position: 0.5,
                sigma: 0.1,
                s: 0.01,
                amp: 0.01,
            },
            threshold: DEFAULT_THRESHOLD,
            seed: 0,
            bounds: Bounds::default(),
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), AttackError> {
        let bad = |m: &str| Err(AttackError::Config(m.to_string()));
        if self.n_spots == 0 {
            return bad("n_spots must be >= 1");
        }
        let b = &self.bounds;
        for (name, r) in [("sigma", b.sigma), ("s", b.s), ("amp", b.amp)] {
            if !(r.lo.is_finite() && r.hi.is_finite() && r.lo <= r.hi) {
                return bad(&format!("bounds.{name} must satisfy lo <= hi"));
            }
        }
        if !(b.sigma.lo > 0.0) || b.s.lo < 0.0 || b.amp.lo < 0.0 || !(b.margin_sigmas >= 0.0) {
            return bad("bounds must keep sigma > 0, s >= 0, amp >= 0");
        }
        let fd = &self.fd_step;
        if !(fd.position > 0.0 && fd.sigma > 0.0 && fd.s > 0.0 && fd.amp > 0.0) {
            return bad("fd_step must be > 0 for every parameter group");
        }
        if !self.threshold.is_finite() {
            return bad("threshold must be finite");
        }
        Ok(())
    }
}

/// Whether the search drives the distance down or up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Goal {
    Impersonate,
    Dodge,
}

impl Goal {
    fn better(self, candidate: f64, incumbent: f64) -> bool {
        match self {
            Goal::Impersonate => candidate < incumbent,
            Goal::Dodge => candidate > incumbent,
        }
    }

    /// Strict threshold test: below for impersonation, above for dodging.
    pub fn succeeds(self, distance: f64, threshold: f64) -> bool {
        match self {
            Goal::Impersonate => distance < threshold,
            Goal::Dodge => distance > threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub goal: Goal,
    pub best_config: PerturbationConfig,
    pub best_distance: f64,
    /// Distance of the unperturbed attacker image.
    pub initial_distance: f64,
    pub success: bool,
    /// First iteration whose best distance crossed the threshold; `0` means the
    /// unperturbed image already did.
    pub success_iteration: Option<usize>,
    /// Objective at the start of every Adam iteration.
    pub trajectory: Vec<f64>,
    /// Embedding queries made by the search, excluding the target embedding.
    pub oracle_calls: u64,
    pub dropped_spots: Vec<usize>,
    pub iterations: usize,
}

impl AttackResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes")
    }
}

/// `distance(embed(clamp(synthesize(base, config))), target)`.
pub fn objective(
    base: &Image,
    target: &Embedding,
    config: &PerturbationConfig,
    oracle: &dyn EmbeddingOracle,
) -> Result<f64, OracleError> {
    let synth = synthesize(base, config).clamped();
    distance(&oracle.embed(&synth)?, target)
}

/// Objective and its analytic gradient in [`PerturbationConfig::to_params`]
/// order, chaining the oracle's image gradient through the spot model.
pub fn whitebox_gradient(
    base: &Image,
    target: &Embedding,
    config: &PerturbationConfig,
    oracle: &dyn EmbeddingOracle,
) -> Result<(f64, Vec<f64>), OracleError> {
    if !oracle.supports_gradient() {
        return Err(OracleError::NoGradient);
    }
    let (h, w) = (base.height(), base.width());
    let synth = synthesize(base, config);
    let (emb, image_grad) = oracle.embed_vjp(&synth, &|e: &Embedding| {
        e.values
            .iter()
            .zip(&target.values)
            .map(|(a, b)| 2.0 * (a - b))
            .collect()
    })?;
    let value = distance(&emb, target)?;

    // dJ/dfield at every pixel, folding in the channel tint
    let r = config.color_ratio;
    let field_grad: Vec<f64> = image_grad
        .data()
        .chunks_exact(3)
        .map(|g| r[0] * g[0] + r[1] * g[1] + r[2] * g[2])
        .collect();
    let field = render_field(config, h, w);
    let mut grad = vec![0.0; config.n_params()];
    grad[0] = field_grad.iter().zip(field.data()).map(|(g, f)| g * f).sum();
    for (i, spot) in config.spots.iter().enumerate() {
        let mut acc = [0.0; PARAMS_PER_SPOT];
        for y in 0..h {
            for x in 0..w {
                let g = field_grad[y * w + x];
                if g == 0.0 {
                    continue;
                }
                let d = spot_param_grad(&GaussianKernel, spot, x as f64, y as f64);
                for k in 0..PARAMS_PER_SPOT {
                    acc[k] += g * d[k];
                }
            }
        }
        for k in 0..PARAMS_PER_SPOT {
            grad[1 + PARAMS_PER_SPOT * i + k] = config.amp * acc[k];
        }
    }
    Ok((value, grad))
}

/// Finite-difference gradient from oracle queries alone.
///
/// Returns `(J(theta), gradient, oracle_calls)`. The forward scheme makes one
/// base query plus one per parameter; the central scheme one base query plus
/// two per parameter.
pub fn fd_gradient(
    base: &Image,
    target: &Embedding,
    config: &PerturbationConfig,
    oracle: &dyn EmbeddingOracle,
    steps: &GroupValues,
    scheme: FdScheme,
) -> Result<(f64, Vec<f64>, u64), OracleError> {
    difference_gradient(
        &config.to_params(),
        &steps.expand(config.spots.len()),
        scheme,
        |params| objective(base, target, &config.with_params(params), oracle),
    )
}

/// Difference-quotient gradient of an arbitrary scalar function.
pub fn difference_gradient<E>(
    theta: &[f64],
    deltas: &[f64],
    scheme: FdScheme,
    mut f: impl FnMut(&[f64]) -> Result<f64, E>,
) -> Result<(f64, Vec<f64>, u64), E> {
    let j0 = f(theta)?;
    let mut calls = 1;
    let mut grad = Vec::with_capacity(theta.len());
    let mut probe = theta.to_vec();
    for (k, &delta) in deltas.iter().enumerate() {
        probe[k] = theta[k] + delta;
        let jp = f(&probe)?;
        calls += 1;
        grad.push(match scheme {
            FdScheme::Forward => (jp - j0) / delta,
            FdScheme::Central => {
                probe[k] = theta[k] - delta;
                calls += 1;
                (jp - f(&probe)?) / (2.0 * delta)
            }
        });
        probe[k] = theta[k];
    }
    Ok((j0, grad, calls))
}

/// Canonical starting layout for a `height x width` canvas, jittered by `seed`.
pub fn initial_config(height: usize, width: usize, n_spots: usize, seed: u64) -> PerturbationConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jitter = || 1.0 + rng.random_range(-0.05..=0.05);
    let amp = 0.1 * jitter();
    let spots = (0..n_spots)
        .map(|i| {
            let (rx, ry) = CANONICAL_LOCI[i % CANONICAL_LOCI.len()];
            SpotParams::new(
                (rx * jitter()) * (width as f64 - 1.0),
                (ry * jitter()) * (height as f64 - 1.0),
                8.0 * jitter(),
                jitter(),
            )
        })
        .collect();
    PerturbationConfig::new(amp, spots)
}

/// Clamp every parameter into `bounds`; returns which spot centers had to be
/// pulled back inside the margin.
pub fn project(config: &mut PerturbationConfig, bounds: &Bounds, height: usize, width: usize) -> Vec<bool> {
    config.amp = bounds.amp.clamp(config.amp);
    config
        .spots
        .iter_mut()
        .map(|spot| {
            spot.sigma = bounds.sigma.clamp(spot.sigma);
            spot.s = bounds.s.clamp(spot.s);
            let m = bounds.margin_sigmas * spot.sigma;
            let (px, py) = (
                spot.px.clamp(-m, width as f64 - 1.0 + m),
                spot.py.clamp(-m, height as f64 - 1.0 + m),
            );
            let left = px != spot.px || py != spot.py;
            spot.px = px;
            spot.py = py;
            left
        })
        .collect()
}

/// Resumable optimizer state for one attacker/target pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackState {
    pub goal: Goal,
    pub config: PerturbationConfig,
    adam: Adam,
    zero_s_runs: Vec<u32>,
    frozen: Vec<bool>,
    dropped: Vec<usize>,
    pub iteration: usize,
}

impl AttackState {
    pub fn new(goal: Goal, config: PerturbationConfig, settings: &AdamSettings) -> Self {
        let n = config.spots.len();
        Self {
            goal,
            adam: Adam::new(config.n_params(), settings.beta1, settings.beta2, settings.epsilon),
            config,
            zero_s_runs: vec![0; n],
            frozen: vec![false; n],
            dropped: Vec::new(),
            iteration: 0,
        }
    }

    /// Spots dropped so far, in the order they were dropped.
    pub fn dropped_spots(&self) -> &[usize] {
        &self.dropped
    }

    /// Replace the configuration by hand. Moment estimates and drop tracking
    /// restart since they no longer describe the trajectory.
    pub fn override_config(&mut self, config: PerturbationConfig) {
        let n = config.spots.len();
        if config.n_params() != self.config.n_params() {
            self.adam = Adam::new(config.n_params(), self.adam.beta1, self.adam.beta2, self.adam.epsilon);
        } else {
            self.adam.reset();
        }
        self.config = config;
        self.zero_s_runs = vec![0; n];
        self.frozen = vec![false; n];
        self.dropped.clear();
    }

    /// Objective and its gradient at the current configuration.
    pub fn evaluate(
        &self,
        base: &Image,
        target: &Embedding,
        oracle: &dyn EmbeddingOracle,
        cfg: &AttackConfig,
    ) -> Result<(f64, Vec<f64>, u64), OracleError> {
        match cfg.grad_mode {
            GradMode::Whitebox => {
                let (j, g) = whitebox_gradient(base, target, &self.config, oracle)?;
                Ok((j, g, 1))
            }
            GradMode::Blackbox => fd_gradient(base, target, &self.config, oracle, &cfg.fd_step, cfg.fd_scheme),
        }
    }

    /// Apply one Adam update from a gradient of the distance, then project.
    pub fn apply(&mut self, grad: &[f64], cfg: &AttackConfig, height: usize, width: usize) {
        let sign = match self.goal {
            Goal::Impersonate => 1.0,
            Goal::Dodge => -1.0,
        };
        let descent: Vec<f64> = grad.iter().map(|g| sign * g).collect();
        let mut frozen_params = vec![false; self.config.n_params()];
        for (i, &f) in self.frozen.iter().enumerate() {
            if f {
                frozen_params[1 + PARAMS_PER_SPOT * i..1 + PARAMS_PER_SPOT * (i + 1)].fill(true);
            }
        }
        let mut params = self.config.to_params();
        let lrs = cfg.adam.lr.expand(self.config.spots.len());
        self.adam.step(&mut params, &descent, &lrs, &frozen_params);
        self.config = self.config.with_params(&params);
        let left = project(&mut self.config, &cfg.bounds, height, width);
        for i in 0..self.config.spots.len() {
            if self.frozen[i] {
                continue;
            }
            if self.config.spots[i].s <= 0.0 {
                self.zero_s_runs[i] += 1;
            } else {
                self.zero_s_runs[i] = 0;
            }
            if left[i] || self.zero_s_runs[i] >= ZERO_S_PATIENCE {
                self.frozen[i] = true;
                self.dropped.push(i);
            }
        }
        self.iteration += 1;
    }
}

/// Search a layout that makes `base` match `victim` under `oracle`.
pub fn run_attack(
    base: &Image,
    victim: &Image,
    cfg: &AttackConfig,
    oracle: &dyn EmbeddingOracle,
) -> Result<AttackResult, AttackError> {
    if !base.same_shape(victim) {
        return Err(AttackError::CanvasMismatch {
            a_w: base.width(),
            a_h: base.height(),
            b_w: victim.width(),
            b_h: victim.height(),
        });
    }
    let target = oracle.embed(&victim.clamped())?;
    search(base, &target, cfg, oracle, Goal::Impersonate)
}

/// Search a layout that pushes `base` away from its own embedding.
pub fn run_dodge(
    base: &Image,
    cfg: &AttackConfig,
    oracle: &dyn EmbeddingOracle,
) -> Result<AttackResult, AttackError> {
    let target = oracle.embed(&base.clamped())?;
    search(base, &target, cfg, oracle, Goal::Dodge)
}

/// Run the full budget against a precomputed target embedding.
///
/// `max_iters` Adam iterations run first; if the best distance then satisfies
/// the threshold, `refine_iters` more are run. The best configuration over
/// every evaluation is returned.
pub fn search(
    base: &Image,
    target: &Embedding,
    cfg: &AttackConfig,
    oracle: &dyn EmbeddingOracle,
    goal: Goal,
) -> Result<AttackResult, AttackError> {
    cfg.validate()?;
    if cfg.grad_mode == GradMode::Whitebox && !oracle.supports_gradient() {
        return Err(OracleError::NoGradient.into());
    }
    let (h, w) = (base.height(), base.width());
    let mut start = initial_config(h, w, cfg.n_spots, cfg.seed);
    project(&mut start, &cfg.bounds, h, w);

    let unperturbed = PerturbationConfig { amp: 0.0, ..start.clone() };
    let initial = objective(base, target, &unperturbed, oracle)?;
    if !initial.is_finite() {
        return Err(AttackError::NonFinite { iteration: 0, value: initial });
    }
    let mut calls = 1u64;
    let mut best = (initial, unperturbed);
    let mut success_iteration = goal.succeeds(initial, cfg.threshold).then_some(0);
    let mut state = AttackState::new(goal, start, &cfg.adam);
    let mut trajectory = Vec::new();

    // nothing can beat an exact match
    let settled = goal == Goal::Impersonate && initial == 0.0;
    let mut budget = if settled { 0 } else { cfg.max_iters };
    let mut refined = false;
    let mut it = 0;
    while it < budget {
        let (value, grad, used) = state.evaluate(base, target, oracle, cfg)?;
        calls += used;
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(AttackError::NonFinite { iteration: it + 1, value });
        }
        trajectory.push(value);
        if goal.better(value, best.0) {
            best = (value, state.config.clone());
        }
        if success_iteration.is_none() && goal.succeeds(best.0, cfg.threshold) {
            success_iteration = Some(it + 1);
        }
        state.apply(&grad, cfg, h, w);
        it += 1;
        if it == budget && !refined {
            refined = true;
            if goal.succeeds(best.0, cfg.threshold) {
                budget += cfg.refine_iters;
            }
        }
    }
    tracing::debug!(iterations = it, best = best.0, calls, "search finished");

    Ok(AttackResult {
        goal,
        success: goal.succeeds(best.0, cfg.threshold),
        best_distance: best.0,
        best_config: best.1,
        initial_distance: initial,
        success_iteration,
        trajectory,
        oracle_calls: calls,
        dropped_spots: state.dropped,
        iterations: it,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::ReferenceEmbedding;

    /// Oracle whose embedding is the flat pixel data; used for counting.
    struct Counting {
        inner: ReferenceEmbedding,
        calls: std::sync::atomic::AtomicU64,
    }

    impl EmbeddingOracle for Counting {
        fn embed(&self, img: &Image) -> Result<Embedding, OracleError> {
            self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            self.inner.embed(img)
        }
    }

    fn face(seed: u64) -> Image {
        crate::corpus::synthetic_face(64, 64, seed)
    }

    #[test]
    fn initial_layout_follows_loci() {
        let c = initial_config(160, 160, 5, 7);
        assert_eq!(c.spots.len(), 5);
        for (s, &(rx, ry)) in c.spots.iter().zip(&CANONICAL_LOCI) {
            assert!((s.px - rx * 159.0).abs() <= 0.05 * rx * 159.0 + 1e-9);
            assert!((s.py - ry * 159.0).abs() <= 0.05 * ry * 159.0 + 1e-9);
            assert!((s.sigma - 8.0).abs() <= 0.4 + 1e-12);
            assert!((s.s - 1.0).abs() <= 0.05 + 1e-12);
        }
        assert!((c.amp - 0.1).abs() <= 0.005 + 1e-12);
        assert_eq!(c, initial_config(160, 160, 5, 7));
        assert_ne!(c, initial_config(160, 160, 5, 8));
    }

    #[test]
    fn projection_clamps_every_group() {
        let mut c = PerturbationConfig::new(
            9.0,
            vec![SpotParams::new(-100.0, 50.0, 0.2, -1.0), SpotParams::new(10.0, 10.0, 40.0, 12.0)],
        );
        let left = project(&mut c, &Bounds::default(), 32, 32);
        assert_eq!(left, vec![true, false]);
        assert_eq!(c.amp, 5.0);
        assert_eq!(c.spots[0].sigma, 1.0);
        assert_eq!(c.spots[0].px, -3.0);
        assert_eq!(c.spots[0].s, 0.0);
        assert_eq!(c.spots[1].sigma, 30.0);
        assert_eq!(c.spots[1].s, 10.0);
    }

    #[test]
    fn objective_identities() {
        let o = ReferenceEmbedding::new();
        let a = face(1);
        let v = face(2);
        let ea = o.embed(&a).unwrap();
        let ev = o.embed(&v).unwrap();
        let mut cfg = initial_config(64, 64, 3, 0);
        cfg.amp = 0.0;
        assert_eq!(objective(&a, &ea, &cfg, &o).unwrap(), 0.0);
        assert_eq!(objective(&a, &ev, &cfg, &o).unwrap(), distance(&ea, &ev).unwrap());
        cfg.amp = 0.8;
        let chained = distance(&o.embed(&synthesize(&a, &cfg).clamped()).unwrap(), &ev).unwrap();
        assert!((objective(&a, &ev, &cfg, &o).unwrap() - chained).abs() < 1e-12);
    }

    #[test]
    fn forward_difference_of_quadratic() {
        let theta = [0.3, -1.2, 2.5, 0.0];
        let deltas = [0.01, 0.5, 0.1, 0.01];
        let (j0, g, calls) = difference_gradient(&theta, &deltas, FdScheme::Forward, |t| {
            Ok::<_, ()>(t.iter().map(|v| v * v).sum::<f64>())
        })
        .unwrap();
        assert!((j0 - 7.78).abs() < 1e-12);
        assert_eq!(calls, 5);
        for k in 0..4 {
            assert!((g[k] - (2.0 * theta[k] + deltas[k])).abs() < 1e-9);
        }
        let (_, g, calls) = difference_gradient(&theta, &deltas, FdScheme::Central, |t| {
            Ok::<_, ()>(t.iter().map(|v| v * v).sum::<f64>())
        })
        .unwrap();
        assert_eq!(calls, 9);
        for k in 0..4 {
            assert!((g[k] - 2.0 * theta[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn fd_call_count_and_offcanvas_spot() {
        let o = Counting {
            inner: ReferenceEmbedding::new(),
            calls: Default::default(),
        };
        let a = face(3);
        let target = o.inner.embed(&face(4)).unwrap();
        let mut cfg = initial_config(64, 64, 2, 1);
        cfg.amp = 0.5;
        // far outside the canvas: no pixel sees it
        cfg.spots[1] = SpotParams::new(-500.0, -500.0, 2.0, 1.0);
        let (_, g, calls) =
            fd_gradient(&a, &target, &cfg, &o, &AttackConfig::default().fd_step, FdScheme::Forward).unwrap();
        assert_eq!(calls, 4 * 2 + 2);
        assert_eq!(o.calls.load(std::sync::atomic::Ordering::SeqCst), calls);
        assert_eq!(&g[5..9], &[0.0; 4]);
        assert!(g[..5].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn whitebox_amp_term_is_inner_product() {
        let o = ReferenceEmbedding::new();
        let a = face(5);
        let target = o.embed(&face(6)).unwrap();
        let mut cfg = initial_config(64, 64, 3, 2);
        cfg.amp = 0.0;
        let (_, g) = whitebox_gradient(&a, &target, &cfg, &o).unwrap();
        let (_, image_grad) = o
            .embed_vjp(&a, &|e: &Embedding| {
                e.values.iter().zip(&target.values).map(|(x, y)| 2.0 * (x - y)).collect()
            })
            .unwrap();
        let colored = crate::spot::colorize(&render_field(&cfg, 64, 64), cfg.color_ratio);
        assert!((g[0] - image_grad.dot(&colored)).abs() < 1e-12);
        // amp = 0 leaves no spot-parameter sensitivity
        assert!(g[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn whitebox_ignores_saturated_region() {
        let o = ReferenceEmbedding::new();
        let a = Image::filled(32, 32, [1.0, 1.0, 1.0]);
        let target = o.embed(&face(7)).unwrap();
        let cfg = PerturbationConfig::new(2.0, vec![SpotParams::new(16.0, 16.0, 4.0, 1.0)]);
        let (_, g) = whitebox_gradient(&a, &target, &cfg, &o).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn whitebox_requires_gradient_capability() {
        let o = Counting {
            inner: ReferenceEmbedding::new(),
            calls: Default::default(),
        };
        let a = face(1);
        let res = run_attack(&a, &face(2), &AttackConfig::default(), &o);
        assert!(matches!(res, Err(AttackError::Oracle(OracleError::NoGradient))));
    }

    #[test]
    fn self_attack_succeeds_immediately() {
        let o = ReferenceEmbedding::new();
        let a = face(8);
        let r = run_attack(&a, &a, &AttackConfig::default(), &o).unwrap();
        assert!(r.success);
        assert_eq!(r.best_distance, 0.0);
        assert_eq!(r.success_iteration, Some(0));
        assert_eq!(r.best_config.amp, 0.0);
        assert_eq!(r.iterations, 0);
    }

    #[test]
    fn canvas_mismatch_rejected() {
        let o = ReferenceEmbedding::new();
        let res = run_attack(&face(1), &Image::filled(10, 10, [0.5; 3]), &AttackConfig::default(), &o);
        assert!(matches!(res, Err(AttackError::CanvasMismatch { .. })));
    }

    #[test]
    fn blackbox_call_accounting() {
        let o = Counting {
            inner: ReferenceEmbedding::new(),
            calls: Default::default(),
        };
        let cfg = AttackConfig {
            n_spots: 3,
            max_iters: 7,
            refine_iters: 5,
            grad_mode: GradMode::Blackbox,
            threshold: 10.0, // always succeeds, so refinement runs
            ..AttackConfig::default()
        };
        let r = run_attack(&face(9), &face(10), &cfg, &o).unwrap();
        assert_eq!(r.iterations, 12);
        assert_eq!(r.oracle_calls, 12 * (4 * 3 + 2) + 1);
        // plus the victim embedding
        assert_eq!(o.calls.load(std::sync::atomic::Ordering::SeqCst), r.oracle_calls + 1);
    }

    #[test]
    fn no_refinement_without_success() {
        let o = ReferenceEmbedding::new();
        let cfg = AttackConfig {
            max_iters: 6,
            threshold: 1e-9,
            ..AttackConfig::default()
        };
        let r = run_attack(&face(11), &face(12), &cfg, &o).unwrap();
        assert_eq!(r.iterations, 6);
        assert!(!r.success);
        assert_eq!(r.trajectory.len(), 6);
    }

    #[test]
    fn best_is_trajectory_minimum_and_in_bounds() {
        let o = ReferenceEmbedding::new();
        let cfg = AttackConfig {
            max_iters: 40,
            refine_iters: 10,
            ..AttackConfig::default()
        };
        let r = run_attack(&face(13), &face(14), &cfg, &o).unwrap();
        let min = r.trajectory.iter().cloned().fold(r.initial_distance, f64::min);
        assert_eq!(r.best_distance, min);
        assert_eq!(r.success, r.best_distance < cfg.threshold);
        let mut projected = r.best_config.clone();
        project(&mut projected, &cfg.bounds, 64, 64);
        assert_eq!(projected, r.best_config);
    }

    #[test]
    fn attack_is_deterministic() {
        let o = ReferenceEmbedding::new();
        let cfg = AttackConfig {
            max_iters: 15,
            refine_iters: 5,
            seed: 42,
            ..AttackConfig::default()
        };
        let a = run_attack(&face(15), &face(16), &cfg, &o).unwrap();
        let b = run_attack(&face(15), &face(16), &cfg, &o).unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn dodge_edge_cases() {
        let o = ReferenceEmbedding::new();
        let base = face(17);
        let zero_threshold = AttackConfig {
            max_iters: 3,
            refine_iters: 0,
            threshold: 0.0,
            ..AttackConfig::default()
        };
        let r = run_dodge(&base, &zero_threshold, &o).unwrap();
        assert!(r.success);
        assert_eq!(r.initial_distance, 0.0);
        assert_eq!(r.success_iteration, Some(1));

        let mut no_amp = AttackConfig {
            max_iters: 10,
            ..AttackConfig::default()
        };
        no_amp.bounds.amp = Range::new(0.0, 0.0);
        let r = run_dodge(&base, &no_amp, &o).unwrap();
        assert!(!r.success);
        assert_eq!(r.best_distance, 0.0);
    }

    #[test]
    fn dodge_improves_self_distance() {
        let o = ReferenceEmbedding::new();
        let cfg = AttackConfig {
            max_iters: 60,
            ..AttackConfig::default()
        };
        let r = run_dodge(&face(18), &cfg, &o).unwrap();
        assert!(r.best_distance > r.initial_distance);
        let max = r.trajectory.iter().cloned().fold(r.initial_distance, f64::max);
        assert_eq!(r.best_distance, max);
    }

    #[test]
    fn zero_brightness_spot_is_dropped() {
        let mut state = AttackState::new(
            Goal::Impersonate,
            PerturbationConfig::new(1.0, vec![SpotParams::new(10.0, 10.0, 3.0, 0.0), SpotParams::new(20.0, 20.0, 3.0, 1.0)]),
            &AdamSettings::default(),
        );
        let cfg = AttackConfig::default();
        // gradient pushing s_0 further negative every step
        let mut g = vec![0.0; 9];
        g[4] = 1.0;
        for _ in 0..ZERO_S_PATIENCE {
            state.apply(&g, &cfg, 32, 32);
        }
        assert_eq!(state.dropped_spots(), &[0]);
        let before = state.config.spots[0];
        g[1] = 5.0;
        state.apply(&g, &cfg, 32, 32);
        assert_eq!(state.config.spots[0], before);
    }

    #[test]
    fn spot_leaving_canvas_is_dropped() {
        let mut state = AttackState::new(
            Goal::Impersonate,
            PerturbationConfig::new(1.0, vec![SpotParams::new(-8.98, 10.0, 3.0, 1.0)]),
            &AdamSettings::default(),
        );
        state.apply(&[0.0, 1.0, 0.0, 0.0, 0.0], &AttackConfig::default(), 32, 32);
        assert_eq!(state.dropped_spots(), &[0]);
        assert_eq!(state.config.spots[0].px, -9.0);
    }

    #[test]
    fn override_resets_moments() {
        let cfg = AttackConfig::default();
        let start = initial_config(32, 32, 2, 0);
        let mut a = AttackState::new(Goal::Impersonate, start.clone(), &cfg.adam);
        let g = vec![0.3; 9];
        a.apply(&g, &cfg, 32, 32);
        a.override_config(start.clone());
        let mut fresh = AttackState::new(Goal::Impersonate, start, &cfg.adam);
        a.apply(&g, &cfg, 32, 32);
        fresh.apply(&g, &cfg, 32, 32);
        assert_eq!(a.config, fresh.config);
    }

    #[test]
    fn config_validation() {
        let mut cfg = AttackConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.fd_step.sigma = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = AttackConfig::default();
        cfg.bounds.sigma = Range::new(5.0, 1.0);
        assert!(cfg.validate().is_err());
        let cfg = AttackConfig { n_spots: 0, ..AttackConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
