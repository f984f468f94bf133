//! Infrared light-spot adversarial perturbations for face recognition.
//!
//! The crate models LED light spots on an aligned face as a small set of
//! Gaussian dots, searches spot layouts that move a face embedding towards
//! (impersonation) or away from (dodging) a target, and analyzes photos of a
//! physical implementation against the computed layout.

pub mod image;
pub mod oracle;
pub mod spot;
pub mod adam;
pub mod attack;
pub mod corpus;
pub mod calibration;
pub mod dodging;
pub mod study;
pub mod radiometry;
pub mod service;
