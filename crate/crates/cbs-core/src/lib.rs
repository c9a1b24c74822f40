//! Frequency-domain quantum Langevin engine for the fluorescence of two strongly
//! driven `J_g = 0 → J_e = 1` atoms coupled by the vacuum field.
//!
//! The crate computes, for a pair of laser-driven atoms a distance `R` apart
//! (dimensionless separation `kR ≫ 1`):
//!
//! * the single-atom resonance-fluorescence (Mollow) spectrum, split into its
//!   elastic δ-peak and inelastic density;
//! * the pair correlators order by order in the dipole-dipole coupling
//!   `g = i(3Γ/2) e^{ikR}/kR`, up to the order `gḡ` at which interference
//!   observables first appear;
//! * the coherent-backscattering (CBS) ladder and crossed spectra, their
//!   elastic/inelastic totals, and the enhancement factor `η = 1 + C_tot/L_tot`;
//! * an independent brute-force optical-Bloch oracle over the full two-atom
//!   operator space, used to validate every perturbative result.
//!
//! Everything is expressed in units of the spontaneous decay rate, `Γ = 1`.
//!
//! The computational strategy is spectral throughout: single-atom dynamics are
//! encoded in a 15-dimensional drift matrix `M` whose resolvent
//! `G[Δ] = (−iΔ·𝟙 − M)^{-1}` is rational in the frequency `Δ`, so correlation
//! spectra are manipulated exactly as sums of complex poles
//! (see [`freq_integral`]) and integrated by residues. Only the non-Gaussian
//! three-force contributions of [`three_body`] require pointwise numerical
//! evaluation.

pub mod algebra;
pub mod cbs;
pub mod error;
pub mod freq_integral;
pub mod ob_oracle;
pub mod single_atom;
pub mod three_body;
pub mod two_atom;

pub use error::Error;

/// Complex double — the scalar type used everywhere.
pub type C64 = num_complex::Complex64;

/// Shorthand for a dense complex matrix.
pub type CMat = ndarray::Array2<C64>;

/// Shorthand for a dense complex vector.
pub type CVec = ndarray::Array1<C64>;
