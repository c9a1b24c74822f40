//! Error type shared by the whole engine.
//!
//! The messages are part of the crate's contract: callers (and the CLI) match
//! on them to map numerical failures to exit codes.

use thiserror::Error;

/// Everything that can go wrong while building or evaluating the engine.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    /// A direction vector passed where a unit vector is required.
    #[error("non-unit direction")]
    NonUnitDirection,

    /// The drift matrix is singular: the laser parameters admit no unique
    /// relaxed steady state.
    #[error("non-relaxing drift")]
    NonRelaxingDrift,

    /// The drift matrix is too close to defective for a stable
    /// eigendecomposition; the caller should evaluate resolvents by direct
    /// linear solves instead.
    #[error("near-defective drift; use direct solve")]
    NearDefectiveDrift,

    /// A pole of a spectral density sits (numerically) on the real frequency
    /// axis, so residue integration is ill-defined.
    #[error("marginal pole")]
    MarginalPole,

    /// A rational density decays slower than 1/Δ², so its frequency integral
    /// does not exist.
    #[error("non-integrable tail")]
    NonIntegrableTail,

    /// The three-body linear system (𝟙 − I[Δ']) is singular.
    #[error("three-body resonance")]
    ThreeBodyResonance,

    /// The coupling-order fit of the optical-Bloch oracle does not close at
    /// the requested polynomial degree.
    #[error("expansion contaminated")]
    ExpansionContaminated,

    /// Enhancement factor requested on a non-positive ladder background.
    #[error("invalid background")]
    InvalidBackground,

    /// The effective-medium mean free path is too short for the dilute-medium
    /// description to hold.
    #[error("dilute condition violated")]
    DiluteConditionViolated,
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
