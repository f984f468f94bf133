//! Black-box face-embedding oracles, the squared-L2 metric and the
//! same-person decision.

mod external;
mod reference;
pub mod wire;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{Image, ImageError, PixelDelta};

pub use external::ExternalEmbedding;
pub use reference::{ReferenceEmbedding, LUMA_WEIGHTS, REFERENCE_DIM};

/// Squared-L2 decision threshold for same-person matches.
pub const DEFAULT_THRESHOLD: f64 = 1.242;

/// Default per-request timeout for external oracles, in seconds.
pub const DEFAULT_TIMEOUT_SECS: f64 = 10.0;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("oracle unreachable: {0}")]
    Unreachable(String),
    #[error("oracle timed out after {0:.1}s")]
    Timeout(f64),
    #[error("malformed oracle response: {0}")]
    Malformed(String),
    #[error("oracle reported an error: {0}")]
    Remote(String),
    #[error("image is {got_w}x{got_h}, oracle expects {want_w}x{want_h}")]
    WrongSize {
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("embedding length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("oracle does not expose image gradients")]
    NoGradient,
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Output of an embedding oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub values: Vec<f64>,
    /// Set when `values` has unit L2 norm (within 1e-6).
    pub unit_norm: bool,
}

impl Embedding {
    /// Wrap raw values, deriving the unit-norm flag.
    pub fn from_values(values: Vec<f64>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        Self {
            unit_norm: (norm - 1.0).abs() <= 1e-6,
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `sum_i (a_i - b_i)^2`.
pub fn distance(a: &Embedding, b: &Embedding) -> Result<f64, OracleError> {
    if a.len() != b.len() {
        return Err(OracleError::LengthMismatch(a.len(), b.len()));
    }
    Ok(a.values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (x - y) * (x - y))
        .sum())
}

/// Strictly below the threshold counts as the same identity.
pub fn same_person(a: &Embedding, b: &Embedding, threshold: f64) -> Result<bool, OracleError> {
    Ok(distance(a, b)? < threshold)
}

/// A face-embedding model queried as a black box.
pub trait EmbeddingOracle: Send + Sync {
    /// Embed an image. Implementations clamp to `[0, 1]` at this boundary.
    fn embed(&self, img: &Image) -> Result<Embedding, OracleError>;

    fn supports_gradient(&self) -> bool {
        false
    }

    /// Embed `img` and pull the cotangent returned by `cotangent(embedding)`
    /// back to image space. Saturated (clamped) pixels get zero gradient.
    fn embed_vjp(
        &self,
        _img: &Image,
        _cotangent: &dyn Fn(&Embedding) -> Vec<f64>,
    ) -> Result<(Embedding, PixelDelta), OracleError> {
        Err(OracleError::NoGradient)
    }
}

impl<T: EmbeddingOracle + ?Sized> EmbeddingOracle for Box<T> {
    fn embed(&self, img: &Image) -> Result<Embedding, OracleError> {
        (**self).embed(img)
    }

    fn supports_gradient(&self) -> bool {
        (**self).supports_gradient()
    }

    fn embed_vjp(
        &self,
        img: &Image,
        cotangent: &dyn Fn(&Embedding) -> Vec<f64>,
    ) -> Result<(Embedding, PixelDelta), OracleError> {
        (**self).embed_vjp(img, cotangent)
    }
}

impl<T: EmbeddingOracle + ?Sized> EmbeddingOracle for std::sync::Arc<T> {
    fn embed(&self, img: &Image) -> Result<Embedding, OracleError> {
        (**self).embed(img)
    }

    fn supports_gradient(&self) -> bool {
        (**self).supports_gradient()
    }

    fn embed_vjp(
        &self,
        img: &Image,
        cotangent: &dyn Fn(&Embedding) -> Vec<f64>,
    ) -> Result<(Embedding, PixelDelta), OracleError> {
        (**self).embed_vjp(img, cotangent)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleKind {
    Reference,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub kind: OracleKind,
    /// `http(s)://` base URL or a shell command speaking the line protocol.
    pub endpoint: Option<String>,
    pub threshold: f64,
    /// `(height, width)` the oracle expects, if it is strict about it.
    pub input_size: Option<(usize, usize)>,
    pub timeout_secs: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            kind: OracleKind::Reference,
            endpoint: None,
            threshold: DEFAULT_THRESHOLD,
            input_size: None,
            timeout_secs: DEFAULT_TIMEOUT_SECS,
        }
    }
}

impl OracleConfig {
    /// Parse a CLI oracle selector: `reference`, a URL, or a command
    /// (optionally prefixed with `cmd:`).
    pub fn from_selector(selector: &str) -> Self {
        if selector == "reference" {
            Self::default()
        } else {
            let endpoint = selector.strip_prefix("cmd:").unwrap_or(selector);
            Self {
                kind: OracleKind::External,
                endpoint: Some(endpoint.to_string()),
                ..Self::default()
            }
        }
    }

    /// Open a fresh oracle connection.
    pub fn connect(&self) -> Result<Box<dyn EmbeddingOracle>, OracleError> {
        if !(self.threshold > 0.0) {
            return Err(OracleError::Malformed(format!(
                "threshold must be > 0, got {}",
                self.threshold
            )));
        }
        match self.kind {
            OracleKind::Reference => Ok(Box::new(ReferenceEmbedding {
                input_size: self.input_size,
            })),
            OracleKind::External => {
                let endpoint = self
                    .endpoint
                    .as_deref()
                    .ok_or_else(|| OracleError::Unreachable("no endpoint configured".into()))?;
                let transport = wire::connect(endpoint, self.timeout_secs)?;
                Ok(Box::new(ExternalEmbedding::new(transport, self.input_size)))
            }
        }
    }
}
