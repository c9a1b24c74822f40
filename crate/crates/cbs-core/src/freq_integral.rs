//! Exact spectral calculus for rational frequency densities, plus the
//! adaptive-quadrature oracle and the Green-pair convolution kernel.
//!
//! Every spectral density handled here is a finite sum of complex poles,
//!
//! ```text
//!   f(Δ) = Σ_j  r_j / (iΔ − p_j)^{m_j},        Re p_j ≠ 0,
//! ```
//!
//! because it is built from resolvents `G[Δ] = (−iΔ𝟙 − M)⁻¹` of damped
//! systems. The sign of `Re p` encodes causality: writing `f` as the Fourier
//! transform of a time signal (`f[Δ] = ∫ f(t) e^{iΔt} dt`),
//!
//! * `Re p > 0` terms come from retarded (causal) signals `∝ t^{m−1} e^{−pt} θ(t)`,
//! * `Re p < 0` terms come from advanced signals supported on `t < 0`.
//!
//! This single bookkeeping yields closed forms for the three operations the
//! engine needs:
//!
//! * **pointwise products** — exact partial fractions;
//! * **frequency convolutions** `(f ⋆ g)(Δ) = (1/2π)∫ f(Δ₁) g(Δ−Δ₁) dΔ₁` —
//!   products of the time signals, so only same-causality pole pairs survive
//!   and the result is again a pole sum at `p₁ + p₂`;
//! * **full integrals** `(1/2π)∫ f(Δ) dΔ` — half-residues `±r/2` per simple
//!   pole (sign `−sgn Re p`), zero for higher orders, with an explicit check
//!   that the `1/Δ` tails cancel.
//!
//! All results are cross-checked against the adaptive quadrature in
//! [`quadrature`], which is also the designated fallback for near-defective
//! drift matrices.

use crate::error::{Error, Result};
use crate::single_atom::PoleData;
use crate::{C64, CMat};
use ndarray::Array2;

/// Two poles closer than this (absolutely) are merged into one higher-order
/// pole during products and convolutions.
const POLE_MERGE_TOL: f64 = 1e-9;

/// A pole sits on the real axis if `|Re p|` is below this.
const MARGINAL_TOL: f64 = 1e-9;

/// One pole term `r / (iΔ − p)^m`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoleTerm {
    /// Numerator.
    pub r: C64,
    /// Pole location in the `u = iΔ` variable.
    pub p: C64,
    /// Order `m ≥ 1`.
    pub m: u32,
}

/// A rational spectral density: finite sum of [`PoleTerm`]s.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RationalDensity {
    /// The pole terms. Kept unsorted; [`RationalDensity::compress`] merges
    /// coincident poles.
    pub terms: Vec<PoleTerm>,
}

impl RationalDensity {
    /// The zero density.
    pub fn zero() -> Self {
        Self { terms: Vec::new() }
    }

    /// A single pole term.
    pub fn term(r: C64, p: C64, m: u32) -> Self {
        Self { terms: vec![PoleTerm { r, p, m }] }
    }

    /// Evaluate at a real frequency.
    pub fn eval(&self, delta: f64) -> C64 {
        let u = C64::new(0.0, delta);
        self.terms
            .iter()
            .map(|t| t.r / (u - t.p).powu(t.m))
            .sum()
    }

    /// In-place sum.
    pub fn add_assign(&mut self, other: &Self) {
        self.terms.extend_from_slice(&other.terms);
    }

    /// Scaled sum.
    pub fn scaled(&self, c: C64) -> Self {
        Self { terms: self.terms.iter().map(|t| PoleTerm { r: t.r * c, ..*t }).collect() }
    }

    /// Merge terms with (numerically) identical poles and orders, dropping
    /// negligible numerators. Keeps representations small after long sums.
    pub fn compress(&mut self) {
        let scale = self.terms.iter().map(|t| t.r.norm()).fold(0.0, f64::max);
        if scale == 0.0 {
            self.terms.clear();
            return;
        }
        let mut out: Vec<PoleTerm> = Vec::with_capacity(self.terms.len());
        for t in &self.terms {
            if let Some(prev) = out
                .iter_mut()
                .find(|o| o.m == t.m && (o.p - t.p).norm() < POLE_MERGE_TOL)
            {
                prev.r += t.r;
            } else {
                out.push(*t);
            }
        }
        out.retain(|t| t.r.norm() > scale * 1e-300);
        self.terms = out;
    }

    /// Pointwise product, by exact partial fractions.
    pub fn product(&self, other: &Self) -> Self {
        let mut out = Self::zero();
        for a in &self.terms {
            for b in &other.terms {
                product_pair(a, b, &mut out.terms);
            }
        }
        out.compress();
        out
    }

    /// Frequency convolution `(1/2π) ∫ f(Δ₁) g(Δ−Δ₁) dΔ₁`.
    ///
    /// Only pole pairs on the same causality side contribute; each surviving
    /// pair `(r₁,p₁,m₁)×(r₂,p₂,m₂)` yields a term of order `m₁+m₂−1` at
    /// `p₁+p₂` with weight `∓ r₁r₂ C(m₁+m₂−2, m₁−1)` (−: causal, +: advanced).
    pub fn convolve(&self, other: &Self) -> Self {
        let mut out = Self::zero();
        for a in &self.terms {
            for b in &other.terms {
                if (a.p.re > 0.0) != (b.p.re > 0.0) {
                    continue;
                }
                let sign = if a.p.re > 0.0 { -1.0 } else { 1.0 };
                let coeff = binomial(a.m + b.m - 2, a.m - 1) * sign;
                out.terms.push(PoleTerm {
                    r: a.r * b.r * coeff,
                    p: a.p + b.p,
                    m: a.m + b.m - 1,
                });
            }
        }
        out.compress();
        out
    }

    /// Full frequency integral `(1/2π) ∫ f(Δ) dΔ`.
    ///
    /// Each simple pole contributes the half-residue `−sgn(Re p)·r/2`;
    /// higher-order poles integrate to zero. Errors if a pole touches the
    /// real axis or if the `1/Δ` tails do not cancel (density decaying slower
    /// than `1/Δ²`).
    pub fn integrate(&self) -> Result<C64> {
        let mut tail = C64::new(0.0, 0.0);
        let mut total = C64::new(0.0, 0.0);
        let mut scale: f64 = 0.0;
        for t in &self.terms {
            if t.p.re.abs() < MARGINAL_TOL {
                return Err(Error::MarginalPole);
            }
            if t.m == 1 {
                tail += t.r;
                scale += t.r.norm();
                total += t.r * if t.p.re > 0.0 { -0.5 } else { 0.5 };
            }
        }
        if scale > 0.0 && tail.norm() > 1e-8 * scale {
            return Err(Error::NonIntegrableTail);
        }
        Ok(total)
    }

    /// The density with `Δ → −Δ`.
    pub fn reflected(&self) -> Self {
        Self {
            terms: self
                .terms
                .iter()
                .map(|t| {
                    // r/(−iΔ−p)^m = r(−1)^m/(iΔ+p)^m
                    let sign = if t.m % 2 == 0 { 1.0 } else { -1.0 };
                    PoleTerm { r: t.r * sign, p: -t.p, m: t.m }
                })
                .collect(),
        }
    }

    /// Complex conjugate density: `g(Δ) = conj(f(Δ))` for real `Δ`.
    pub fn conjugated(&self) -> Self {
        Self {
            terms: self
                .terms
                .iter()
                .map(|t| {
                    // conj(r/(iΔ−p)^m) = conj(r)(−1)^m/(iΔ+conj(p))^m
                    let sign = if t.m % 2 == 0 { 1.0 } else { -1.0 };
                    PoleTerm { r: t.r.conj() * sign, p: -t.p.conj(), m: t.m }
                })
                .collect(),
        }
    }
}

/// Binomial coefficient as a float (orders stay tiny).
fn binomial(n: u32, k: u32) -> f64 {
    let mut acc = 1.0;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

/// Partial-fraction expansion of one term pair into `out`.
fn product_pair(a: &PoleTerm, b: &PoleTerm, out: &mut Vec<PoleTerm>) {
    let r = a.r * b.r;
    if (a.p - b.p).norm() < POLE_MERGE_TOL {
        out.push(PoleTerm { r, p: (a.p + b.p) * 0.5, m: a.m + b.m });
        return;
    }
    // 1/((u−p)^m (u−q)^n) = Σ_j A_j/(u−p)^j + (p ↔ q), with
    // A_j = (−1)^{m−j} C(n+m−j−1, m−j) (p−q)^{−(n+m−j)}.
    for (p, m, q, n) in [(a.p, a.m, b.p, b.m), (b.p, b.m, a.p, a.m)] {
        for j in 1..=m {
            let k = m - j;
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            let coeff = sign * binomial(n + k - 1, k);
            let denom = (p - q).powu(n + k);
            out.push(PoleTerm { r: r * coeff / denom, p, m: j });
        }
    }
}

/// A stationary two-frequency correlator `⟨A[Δ′]B[Δ]⟩`, which time-translation
/// invariance forces to be `2πδ[Δ+Δ′]` times a function of `Δ`. That function
/// splits into an elastic δ-peak at the laser frequency and a smooth
/// (inelastic) density:
///
/// ```text
///   ⟨A[Δ′]B[Δ]⟩ = 2πδ[Δ+Δ′] { 2πδ[Δ]·elastic + inelastic(Δ) }.
/// ```
///
/// The two parts are stored separately and never mixed numerically.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SpectralObject {
    /// Weight of the `2πδ[Δ]` elastic peak.
    pub elastic: C64,
    /// Smooth inelastic density over `Δ`.
    pub inelastic: RationalDensity,
}

impl SpectralObject {
    /// The zero correlator.
    pub fn zero() -> Self {
        Self::default()
    }

    /// Scaled copy.
    pub fn scaled(&self, c: C64) -> Self {
        Self { elastic: self.elastic * c, inelastic: self.inelastic.scaled(c) }
    }

    /// In-place sum.
    pub fn add_assign(&mut self, other: &Self) {
        self.elastic += other.elastic;
        self.inelastic.add_assign(&other.inelastic);
    }

    /// Stationary (equal-time) value: elastic weight plus `(1/2π)∫ inelastic`.
    pub fn stationary(&self) -> Result<C64> {
        Ok(self.elastic + self.inelastic.integrate()?)
    }
}

/// A matrix whose entries are rational densities (e.g. `G[Δ]` as a function).
pub type RationalMatrix = Array2<RationalDensity>;

/// Which frequency argument a Green's function is evaluated at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GreenArg {
    /// `G[Δ]` — causal poles (`Re p > 0` in the `u` variable).
    Plus,
    /// `G[−Δ]` — advanced poles.
    Minus,
}

/// The resolvent `G[±Δ]` as a matrix of rational densities, from the pole
/// expansion `G[Δ] = Σ_k R_k/(−iΔ − λ_k)`.
pub fn green_matrix(poles: &PoleData, arg: GreenArg) -> RationalMatrix {
    let n = poles.lambda.len();
    let mut out = RationalMatrix::from_elem((n, n), RationalDensity::zero());
    for k in 0..n {
        let rk = poles.residue(k);
        let lam = poles.lambda[k];
        for i in 0..n {
            for j in 0..n {
                if rk[[i, j]].norm() == 0.0 {
                    continue;
                }
                let t = match arg {
                    // R/(−iΔ−λ) = −R/(iΔ+λ):  p = −λ, causal.
                    GreenArg::Plus => PoleTerm { r: -rk[[i, j]], p: -lam, m: 1 },
                    // R/(iΔ−λ): p = λ, advanced.
                    GreenArg::Minus => PoleTerm { r: rk[[i, j]], p: lam, m: 1 },
                };
                out[[i, j]].terms.push(t);
            }
        }
    }
    out
}

/// Green-pair convolution kernel
/// `K_{(ia),(kc)}[Δ′] = (1/2π)∫ dΔ₃ G^A_{ia}[Δ₃] G^B_{kc}[Δ′−Δ₃]`
/// as an `n² × n²` matrix over the row-major composite indices `(i,a)`, `(k,c)`.
///
/// Closed form: `K = Σ_{k₁k₂} vec(R^A_{k₁}) vec(R^B_{k₂})^T / (−iΔ′ − λ_{k₁} − μ_{k₂})`,
/// evaluated as one small matrix product per frequency.
pub struct GreenPairKernel {
    /// `n² × n` matrix of vectorized residues of system A.
    a: CMat,
    /// `n² × n` matrix of vectorized residues of system B.
    b: CMat,
    /// Eigenvalues of A.
    lam_a: Vec<C64>,
    /// Eigenvalues of B.
    lam_b: Vec<C64>,
}

impl GreenPairKernel {
    /// Precompute the residue factors for a pair of (diagonalizable) systems.
    pub fn new(pa: &PoleData, pb: &PoleData) -> Self {
        let n = pa.lambda.len();
        let vec_res = |p: &PoleData| {
            let mut m = CMat::zeros((n * n, n));
            for k in 0..n {
                let r = p.residue(k);
                for i in 0..n {
                    for j in 0..n {
                        m[[i * n + j, k]] = r[[i, j]];
                    }
                }
            }
            m
        };
        Self {
            a: vec_res(pa),
            b: vec_res(pb),
            lam_a: pa.lambda.to_vec(),
            lam_b: pb.lambda.to_vec(),
        }
    }

    /// Evaluate the kernel at `Δ′`.
    pub fn eval(&self, delta_p: f64) -> CMat {
        let na = self.lam_a.len();
        let nb = self.lam_b.len();
        let mut w = CMat::zeros((na, nb));
        for (k1, l1) in self.lam_a.iter().enumerate() {
            for (k2, l2) in self.lam_b.iter().enumerate() {
                w[[k1, k2]] = (C64::new(0.0, -delta_p) - l1 - l2).inv();
            }
        }
        self.a.dot(&w).dot(&self.b.t())
    }
}

/// Zero matrix of densities.
pub fn rm_zeros(rows: usize, cols: usize) -> RationalMatrix {
    RationalMatrix::from_elem((rows, cols), RationalDensity::zero())
}

/// In-place sum of two density matrices.
pub fn rm_add_assign(a: &mut RationalMatrix, b: &RationalMatrix) {
    for (x, y) in a.iter_mut().zip(b.iter()) {
        x.add_assign(y);
    }
}

/// Scaled copy of a density matrix.
pub fn rm_scale(a: &RationalMatrix, c: C64) -> RationalMatrix {
    a.mapv(|d| d.scaled(c))
}

/// Transpose of a density matrix.
pub fn rm_transpose(a: &RationalMatrix) -> RationalMatrix {
    a.t().to_owned()
}

/// Right product with a constant matrix: `(A·C)(Δ)`.
pub fn rm_mul_const(a: &RationalMatrix, c: &CMat) -> RationalMatrix {
    let (n, k) = a.dim();
    let m = c.dim().1;
    let mut out = rm_zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            let mut acc = RationalDensity::zero();
            for l in 0..k {
                if c[[l, j]].norm() != 0.0 {
                    acc.add_assign(&a[[i, l]].scaled(c[[l, j]]));
                }
            }
            acc.compress();
            out[[i, j]] = acc;
        }
    }
    out
}

/// Left product with a constant matrix: `(C·A)(Δ)`.
pub fn const_mul_rm(c: &CMat, a: &RationalMatrix) -> RationalMatrix {
    let (k, m) = a.dim();
    let n = c.dim().0;
    let mut out = rm_zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            let mut acc = RationalDensity::zero();
            for l in 0..k {
                if c[[i, l]].norm() != 0.0 {
                    acc.add_assign(&a[[l, j]].scaled(c[[i, l]]));
                }
            }
            acc.compress();
            out[[i, j]] = acc;
        }
    }
    out
}

/// Pointwise matrix product of two density matrices, `(A·B)(Δ)`, by exact
/// partial fractions entrywise.
pub fn rm_mul(a: &RationalMatrix, b: &RationalMatrix) -> RationalMatrix {
    let (n, k) = a.dim();
    let m = b.dim().1;
    let mut out = rm_zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            let mut acc = RationalDensity::zero();
            for l in 0..k {
                if a[[i, l]].terms.is_empty() || b[[l, j]].terms.is_empty() {
                    continue;
                }
                acc.add_assign(&a[[i, l]].product(&b[[l, j]]));
            }
            acc.compress();
            out[[i, j]] = acc;
        }
    }
    out
}

/// Matrix–vector action with a constant vector: `(A·v)(Δ)` as a density vector.
pub fn rm_apply_vec(a: &RationalMatrix, v: &crate::CVec) -> Vec<RationalDensity> {
    let (n, k) = a.dim();
    (0..n)
        .map(|i| {
            let mut acc = RationalDensity::zero();
            for l in 0..k {
                if v[l].norm() != 0.0 {
                    acc.add_assign(&a[[i, l]].scaled(v[l]));
                }
            }
            acc.compress();
            acc
        })
        .collect()
}

/// Adaptive quadrature over the whole real line, used as the verification
/// oracle for every residue computation (and as the fallback path).
pub mod quadrature {
    use crate::C64;

    /// `∫_{-∞}^{∞} f(Δ) dΔ` by the compactifying map `Δ = tan θ` and adaptive
    /// Simpson refinement to absolute tolerance `tol`.
    pub fn integrate_line<F: Fn(f64) -> C64>(f: F, tol: f64) -> C64 {
        let half_pi = std::f64::consts::FRAC_PI_2;
        let g = |theta: f64| -> C64 {
            let c = theta.cos();
            if c.abs() < 1e-12 {
                return C64::new(0.0, 0.0);
            }
            f(theta.tan()) / (c * c)
        };
        // Split at 0 to keep the peak structure near Δ = 0 well resolved.
        adaptive(&g, -half_pi + 1e-12, 0.0, tol / 2.0, 60)
            + adaptive(&g, 0.0, half_pi - 1e-12, tol / 2.0, 60)
    }

    /// `(1/2π) ∫ f(Δ) dΔ`.
    pub fn mean_over_line<F: Fn(f64) -> C64>(f: F, tol: f64) -> C64 {
        integrate_line(f, tol * 2.0 * std::f64::consts::PI) / (2.0 * std::f64::consts::PI)
    }

    fn simpson<F: Fn(f64) -> C64>(f: &F, a: f64, b: f64) -> (C64, C64, C64, C64) {
        let m = 0.5 * (a + b);
        let (fa, fm, fb) = (f(a), f(m), f(b));
        ((fa + fm * 4.0 + fb) * ((b - a) / 6.0), fa, fm, fb)
    }

    fn adaptive<F: Fn(f64) -> C64>(f: &F, a: f64, b: f64, tol: f64, depth: u32) -> C64 {
        let (whole, _, _, _) = simpson(f, a, b);
        adaptive_inner(f, a, b, whole, tol, depth)
    }

    fn adaptive_inner<F: Fn(f64) -> C64>(
        f: &F,
        a: f64,
        b: f64,
        whole: C64,
        tol: f64,
        depth: u32,
    ) -> C64 {
        let m = 0.5 * (a + b);
        let (left, _, _, _) = simpson(f, a, m);
        let (right, _, _, _) = simpson(f, m, b);
        let refined = left + right;
        if depth == 0 || (refined - whole).norm() < 15.0 * tol {
            return refined + (refined - whole) / 15.0;
        }
        adaptive_inner(f, a, m, left, tol / 2.0, depth - 1)
            + adaptive_inner(f, m, b, right, tol / 2.0, depth - 1)
    }
}
