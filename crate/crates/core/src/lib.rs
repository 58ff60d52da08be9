//! Sensor-prior visual localization.
//!
//! Modules, bottom-up:
//! - [`geom`]: poses, pinhole projection, angle helpers.
//! - [`sensors`]: GPS/compass/gravity readings and the prior pose built from them.
//! - [`retrieval`]: prior-filtered global-descriptor retrieval and its metrics.
//! - [`matching`]: track aggregation, dual-softmax coarse matching, fine refinement.
//! - [`pnp`]: P3P, gravity-gated LO-RANSAC and pose refinement.
//! - [`gtopt`]: multi-sensor trajectory optimization and rigid map alignment.

mod binio;
pub mod geom;
pub mod gtopt;
pub mod matching;
pub mod pnp;
pub mod retrieval;
pub mod sensors;

pub use binio::FormatError;
