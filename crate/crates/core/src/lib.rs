//! Parameter retrieval for ptychographic imaging.
//!
//! Two measurement configurations are modelled:
//!
//! * dark-field Fourier ptychography of sub-wavelength scatterers treated as
//!   point dipoles ([`forward_dipole`]), and
//! * real-space ptychography of a single rectangle embedded in a unit
//!   background ([`forward_rect`]).
//!
//! Complex fields are reconstructed with a PIE-style engine ([`recon`]), the
//! physical parameters are then retrieved by bound-constrained least squares
//! ([`fit`]). [`fisher_crlb`] computes the Poisson Fisher information and the
//! Cramér-Rao lower bounds, and [`montecarlo`] validates them with seeded
//! noise campaigns.

pub mod error;
pub mod fields;
pub mod fisher_crlb;
pub mod fit;
pub mod forward_dipole;
pub mod forward_rect;
pub mod montecarlo;
pub mod recon;

pub use error::{Error, Result};
pub use fields::{ComplexField, GridSpec, RealField, C64};
