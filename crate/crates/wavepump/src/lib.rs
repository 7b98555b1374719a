//! Numerical laboratory for resonance crossing in the driven cubic Klein-Gordon
//! equation
//!
//! A small force with a slowly chirped phase drives the cubic Klein-Gordon
//! equation
//!
//! ```text
//! u_tt - u_xx + u + gamma u^3 = eps^2 f(eps x) exp(i S(eps^2 t, eps^2 x)/eps^2) + c.c.
//! ```
//!
//! through a local resonance: the driving phase crosses the dispersion relation
//! of the free equation on a curve in the slow plane, and the crossing pumps an
//! O(eps^2) driven ripple up to an O(eps) free wave packet whose envelope obeys
//! a cubic Schrodinger equation. For large enough forcing the packet carries
//! solitary waves.
//!
//! The crate implements the three matched asymptotic regimes and a direct
//! solver, so every prediction can be checked against an honest simulation:
//!
//! * [`phase`], [`geometry`] - the driving phase, the resonance curve
//!   `l = (S_t2)^2 - (S_x2)^2 - 1 = 0`, characteristics of the layer transport
//!   equation, and the eikonal phase of the emitted wave.
//! * [`wkb`] - the pre-resonance expansion in powers of eps with coefficients
//!   singular on the resonance curve.
//! * [`layer`] - the resonance layer: oscillatory Duhamel quadrature along
//!   characteristics and the accumulated amplitude that seeds the wave packet.
//! * [`envelope`], [`zakharov`] - the post-resonance cubic Schrodinger
//!   evolution and the Zakharov-Shabat soliton census.
//! * [`direct`], [`demod`] - a symplectic solver for the full equation and the
//!   demodulation used to extract envelopes from raw fields.
//! * [`experiments`] - region-by-region comparisons, eps sweeps, and the
//!   soliton generation scenario.
//!
//! The `wavepump` binary exposes the same pipeline as CLI subcommands; see the
//! book under `book/` for a guided tour.

pub mod config;
pub mod demod;
pub mod direct;
pub mod envelope;
pub mod error;
pub mod experiments;
pub mod expr;
pub mod force;
pub mod geometry;
pub mod io;
pub mod layer;
pub mod ode;
pub mod phase;
pub mod quad;
pub mod wkb;
pub mod zakharov;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[cfg(doctest)]
mod book;
