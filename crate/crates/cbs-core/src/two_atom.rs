//! Perturbative pair machinery: cross-atom force correlations and the
//! expansion of two-atom spectral correlators in powers of the dipole-dipole
//! couplings.
//!
//! Two driven atoms at separation `R` couple through the exchanged field. In
//! the phase-factored (tilde) frame each atom keeps its single-atom drift
//! `(M, L)` and Langevin force `F^α`, and acquires the coupling terms
//!
//! ```text
//!   dX^α_i/dt ⊃ g_α Σ_{qq′} (T^{q+})_{ij} X^α_j 𝒫_{qq′} 𝒟^{β−}_{q′}
//!             + ḡ_α Σ_{qq′} 𝒟^{β+}_q 𝒫_{qq′} (T^{q′−})_{ij} X^α_j ,
//! ```
//!
//! with `𝒫` the transverse projector of the separation direction and
//! `g_α = g e^{±iφ}` the phase-split couplings (`g = i(3Γ/2)e^{ikR}/kR`,
//! `φ = k_L·R`). For `kR ≫ 1` the couplings are small and every pair
//! correlator expands in the monomials `g₁^{a₁}ḡ₁^{b₁}g₂^{a₂}ḡ₂^{b₂}`.
//!
//! This module produces, per monomial, the full matrix of stationary
//! spectral correlators
//!
//! ```text
//!   ⟨X^β_{i′}[Δ′] X^α_i[Δ]⟩ = (2π)²δ[Δ′]δ[Δ]·E_{i′i}
//!                            + 2πδ[Δ′+Δ]·S_{i′i}(Δ),
//! ```
//!
//! with elastic weights `E` and rational inelastic densities `S`. Three
//! physical ingredients beyond the bare iteration feed the coefficients:
//!
//! * same-atom force statistics follow the *interacting* steady state, so the
//!   diffusion matrix acquires first-order shifts through `⟨X^α⟩`;
//! * forces of different atoms are correlated at first order,
//!   `⟨F^β_{i′}[Δ′]F^α_i[Δ]⟩ = −(1/2)(g_β+ḡ_α)·2πδ[Δ′+Δ]·D̃^{βα}_{i′i}`,
//!   the vacuum-correlation term that a naive uncoupled-noise treatment
//!   would miss;
//! * at second order the forces are non-Gaussian: three-force correlators
//!   from the `three_body` module enter the assembly.
//!
//! Every coefficient produced here is validated against the independent
//! optical-Bloch oracle ([`crate::ob_oracle`]), which fixes all sign, index
//! and normalization conventions unambiguously.

use crate::algebra::{self, NX};
use crate::error::Result;
use crate::freq_integral::{
    green_matrix, rm_add_assign, rm_apply_vec, rm_mul, rm_mul_const, rm_scale,
    rm_transpose, rm_zeros, GreenArg, RationalDensity, RationalMatrix, SpectralObject,
};
use crate::ob_oracle::Monomial;
use crate::single_atom::{
    build_drift, diffusion_matrix, diffusion_matrix_commutator, steady_state, DriftSystem,
    LaserField, PoleData, Tables,
};
use crate::{C64, CMat, CVec};
use std::collections::BTreeMap;

/// Geometric configuration of the pair.
#[derive(Debug, Clone)]
pub struct PairConfig {
    /// Dimensionless separation `kR` (far field: `kR ≫ 1`).
    pub kr: f64,
    /// Unit vector along the separation.
    pub u: [f64; 3],
}

impl PairConfig {
    /// Dipole-dipole coupling `g = i(3Γ/2)e^{ikR}/kR` (units `Γ = 1`).
    pub fn coupling(&self) -> C64 {
        C64::i() * 1.5 * C64::from_polar(1.0, self.kr) / self.kr
    }

    /// Transverse projector of the separation direction.
    pub fn projector(&self) -> Result<CMat> {
        algebra::transverse_projector(self.u)
    }
}

/// One monomial's worth of the pair correlator matrix: elastic weights plus
/// inelastic densities over the 15×15 index pairs `(i′, i)`.
#[derive(Debug, Clone)]
pub struct PairSlice {
    /// Coefficients of `(2π)²δ[Δ′]δ[Δ]`.
    pub elastic: CMat,
    /// Coefficients of `2πδ[Δ′+Δ]`, as densities in `Δ`.
    pub inelastic: RationalMatrix,
}

impl PairSlice {
    /// The zero slice.
    pub fn zero() -> Self {
        Self { elastic: CMat::zeros((NX, NX)), inelastic: rm_zeros(NX, NX) }
    }

    /// One `(i′, i)` entry as a scalar spectral object.
    pub fn entry(&self, ip: usize, i: usize) -> SpectralObject {
        SpectralObject { elastic: self.elastic[[ip, i]], inelastic: self.inelastic[[ip, i]].clone() }
    }

    /// Stationary (equal-time) matrix: elastic weight plus frequency integral
    /// of each density.
    pub fn stationary(&self) -> Result<CMat> {
        let mut out = self.elastic.clone();
        for ip in 0..NX {
            for i in 0..NX {
                out[[ip, i]] += self.inelastic[[ip, i]].integrate()?;
            }
        }
        Ok(out)
    }

    /// In-place sum.
    pub fn add_assign(&mut self, other: &Self) {
        self.elastic = &self.elastic + &other.elastic;
        rm_add_assign(&mut self.inelastic, &other.inelastic);
    }

    /// Scaled copy.
    pub fn scaled(&self, c: C64) -> Self {
        Self { elastic: self.elastic.mapv(|z| z * c), inelastic: rm_scale(&self.inelastic, c) }
    }
}

/// Stationary value of a scalar spectral object (elastic weight plus
/// `(1/2π)∫` of the inelastic density).
pub fn stationary_from_spectrum(obj: &SpectralObject) -> Result<C64> {
    obj.stationary()
}

/// Everything fixed by (laser, separation direction): single-atom solution,
/// resolvent densities, coupling kernels and first-order mean shifts.
///
/// The correlator coefficients depend on the couplings only through the
/// monomial labels, so one context serves every `kR`.
pub struct PairContext {
    /// Algebra tables.
    pub tables: Tables,
    /// Single-atom drift system (shared by both atoms in the tilde frame).
    pub sys: DriftSystem,
    /// Pole data of the drift.
    pub poles: PoleData,
    /// Single-atom steady state `x`.
    pub x: CVec,
    /// Single-atom diffusion matrix `D⁰`.
    pub d0: CMat,
    /// Transverse projector `𝒫` of the separation direction.
    pub proj: CMat,
    /// `G[Δ]` as a density matrix.
    pub gp: RationalMatrix,
    /// `G[−Δ]` as a density matrix.
    pub gm: RationalMatrix,
    /// `G[0]`.
    pub g0: CMat,
    /// Zeroth-order spectral matrix `S⁰(Δ) = G[−Δ]·D⁰·G[Δ]ᵀ`
    /// (inelastic density of `⟨X_{i′}[Δ′]X_i[Δ]⟩` for one atom).
    pub spec0: RationalMatrix,
    /// Coupling kernels `K⁺_{q′} = Σ_q T^{q+}𝒫_{qq′}` (pairs with `𝒟^{β−}_{q′}`),
    /// indexed `q′ + 1`.
    pub kp: [CMat; 3],
    /// Coupling kernels `K⁻_q = Σ_{q′} 𝒫_{qq′}T^{q′−}` (pairs with `𝒟^{β+}_q`),
    /// indexed `q + 1`.
    pub km: [CMat; 3],
    /// First-order mean shift `⟨X^α⟩^{(g_α)}`.
    pub dx_g: CVec,
    /// First-order mean shift `⟨X^α⟩^{(ḡ_α)}`.
    pub dx_gbar: CVec,
    /// Mean-contracted kernel `A⁺ = Σ_{q′} ⟨𝒟^−_{q′}⟩ K⁺_{q′}`.
    pub a_plus: CMat,
    /// Mean-contracted kernel `A⁻ = Σ_q ⟨𝒟^+_q⟩ K⁻_q`.
    pub a_minus: CMat,
}

impl PairContext {
    /// Build the context for a driving field and a separation-direction
    /// projector.
    pub fn new(laser: &LaserField, proj: CMat) -> Result<Self> {
        let tables = Tables::new();
        let sys = build_drift(&tables, laser);
        let poles = PoleData::new(&sys)?;
        let x = steady_state(&sys)?;
        let d0 = diffusion_matrix(&tables, &sys, &x);
        let gp = green_matrix(&poles, GreenArg::Plus);
        let gm = green_matrix(&poles, GreenArg::Minus);
        let g0 = poles.green(0.0);
        let spec0 = rm_mul(&rm_mul_const(&gm, &d0), &rm_transpose(&gp));

        let t = &tables.commutators;
        let kp: [CMat; 3] = std::array::from_fn(|qd| {
            let mut k = CMat::zeros((NX, NX));
            for q in -1..=1i32 {
                let p = proj[[(q + 1) as usize, qd]];
                if p.norm() > 0.0 {
                    k = k + t.plus(q) * p;
                }
            }
            k
        });
        let km: [CMat; 3] = std::array::from_fn(|qd| {
            let mut k = CMat::zeros((NX, NX));
            for q in -1..=1i32 {
                let p = proj[[qd, (q + 1) as usize]];
                if p.norm() > 0.0 {
                    k = k + t.minus(q) * p;
                }
            }
            k
        });

        // Mean shifts: the stationary (elastic) weight of the first-order
        // iteration, ⟨X⟩^{(g)} = G[0]·Σ_{q′} K⁺_{q′}⟨X⟩·⟨𝒟^−_{q′}⟩, etc.
        let mut v_plus = CVec::zeros(NX);
        let mut v_minus = CVec::zeros(NX);
        let mut a_plus = CMat::zeros((NX, NX));
        let mut a_minus = CMat::zeros((NX, NX));
        for qd in 0..3usize {
            let q = qd as i32 - 1;
            let dm = x[algebra::dminus_index(q)];
            let dp = x[algebra::dplus_index(q)];
            v_plus = v_plus + kp[qd].dot(&x).mapv(|z| z * dm);
            v_minus = v_minus + km[qd].dot(&x).mapv(|z| z * dp);
            a_plus = a_plus + &kp[qd] * dm;
            a_minus = a_minus + &km[qd] * dp;
        }
        let dx_g = g0.dot(&v_plus);
        let dx_gbar = g0.dot(&v_minus);

        Ok(Self {
            tables,
            sys,
            poles,
            x,
            d0,
            proj,
            gp,
            gm,
            g0,
            spec0,
            kp,
            km,
            dx_g,
            dx_gbar,
            a_plus,
            a_minus,
        })
    }
}

/// Cross-atom diffusion matrix
/// `D̃^{βα}_{ab} = 4 Σ_{q′q} (T^{q′+}⟨X^β⟩)_a 𝒫_{q′q} (T^{q−}⟨X^α⟩)_b`
/// at zeroth order (factorized means). The accompanying coupling prefactor is
/// `−(1/2)(g_β + ḡ_α)`, tracked symbolically by the callers.
pub fn cross_diffusion(ctx: &PairContext) -> CMat {
    let t = &ctx.tables.commutators;
    let mut d = CMat::zeros((NX, NX));
    for q1 in -1..=1i32 {
        let va = t.plus(q1).dot(&ctx.x);
        for q2 in -1..=1i32 {
            let p = ctx.proj[[(q1 + 1) as usize, (q2 + 1) as usize]];
            if p.norm() == 0.0 {
                continue;
            }
            let vb = t.minus(q2).dot(&ctx.x);
            for a in 0..NX {
                for b in 0..NX {
                    d[[a, b]] += 4.0 * p * va[a] * vb[b];
                }
            }
        }
    }
    d
}

/// First-order shift of the same-atom diffusion matrix for a mean shift `dx`:
/// `δD_{ab} = 4 Σ_q (T^{q+})_{aa′}(T^{q−})_{bb′} ε_{a′b′}^u dx_u`.
///
/// The commutator form of the diffusion matrix is affine in the state, so the
/// shift is evaluated as a difference of that (independently tested) routine.
pub fn diffusion_shift(tables: &Tables, dx: &CVec) -> CMat {
    let zero = CVec::zeros(NX);
    diffusion_matrix_commutator(tables, dx) - diffusion_matrix_commutator(tables, &zero)
}

/// First-order slices of the cross-atom correlator `⟨X^β_{i′}[Δ′]X^α_i[Δ]⟩`.
pub struct CrossOrderOne {
    /// Monomial `g_α`.
    pub g_a: PairSlice,
    /// Monomial `ḡ_α`.
    pub gbar_a: PairSlice,
    /// Monomial `g_β`.
    pub g_b: PairSlice,
    /// Monomial `ḡ_β`.
    pub gbar_b: PairSlice,
}

/// First-order slices of the same-atom correlator `⟨X^α_{i′}[Δ′]X^α_i[Δ]⟩`.
pub struct SameOrderOne {
    /// Monomial `g_α`.
    pub g_a: PairSlice,
    /// Monomial `ḡ_α`.
    pub gbar_a: PairSlice,
}

/// Outer product of a column of densities with a row of densities, added into
/// `out` — `out_{i′i} += col_{i′}·row_i`.
fn add_outer(out: &mut RationalMatrix, col: &[RationalDensity], row: &[RationalDensity]) {
    for ip in 0..NX {
        if col[ip].terms.is_empty() {
            continue;
        }
        for i in 0..NX {
            if row[i].terms.is_empty() {
                continue;
            }
            let mut prod = col[ip].product(&row[i]);
            prod.compress();
            out[[ip, i]].add_assign(&prod);
        }
    }
}

/// Rank-one elastic matrix `a b^T`.
fn outer(a: &CVec, b: &CVec) -> CMat {
    let mut m = CMat::zeros((NX, NX));
    for i in 0..NX {
        for j in 0..NX {
            m[[i, j]] = a[i] * b[j];
        }
    }
    m
}

/// All first-order cross-atom slices.
///
/// Per monomial, the inelastic density collects (i) the force pairing between
/// the iterated coupling term and the partner's zeroth-order fluctuation,
/// which lands on a column or row of the single-atom spectral matrix `S⁰`,
/// and (ii) for the monomials `ḡ_α` and `g_β` only, the cross-force
/// (vacuum-correlation) term `−(1/2)·G[−Δ]·D̃^{βα}·G[Δ]ᵀ`. Elastic weights
/// are products of a bare mean with a first-order mean shift.
pub fn order_one_cross(ctx: &PairContext) -> CrossOrderOne {
    let dx_cross = cross_diffusion(ctx);
    // −(1/2)·G[−Δ]·D̃^{βα}·G[Δ]ᵀ, shared by the ḡ_α and g_β slices.
    let vac = rm_scale(
        &rm_mul(&rm_mul_const(&ctx.gm, &dx_cross), &rm_transpose(&ctx.gp)),
        C64::new(-0.5, 0.0),
    );

    let mut g_a = PairSlice::zero();
    let mut gbar_a = PairSlice::zero();
    let mut g_b = PairSlice::zero();
    let mut gbar_b = PairSlice::zero();

    g_a.elastic = outer(&ctx.x, &ctx.dx_g);
    gbar_a.elastic = outer(&ctx.x, &ctx.dx_gbar);
    g_b.elastic = outer(&ctx.dx_g, &ctx.x);
    gbar_b.elastic = outer(&ctx.dx_gbar, &ctx.x);

    rm_add_assign(&mut gbar_a.inelastic, &vac);
    rm_add_assign(&mut g_b.inelastic, &vac);

    for qd in 0..3usize {
        let q = qd as i32 - 1;
        let dm = algebra::dminus_index(q);
        let dp = algebra::dplus_index(q);
        // Retarded coupling-weighted means  w^±(Δ) = G[Δ]·K^±_q·⟨X⟩ and their
        // advanced counterparts (arguments −Δ).
        let wp = rm_apply_vec(&ctx.gp, &ctx.kp[qd].dot(&ctx.x));
        let wm = rm_apply_vec(&ctx.gp, &ctx.km[qd].dot(&ctx.x));
        let wp_adv = rm_apply_vec(&ctx.gm, &ctx.kp[qd].dot(&ctx.x));
        let wm_adv = rm_apply_vec(&ctx.gm, &ctx.km[qd].dot(&ctx.x));

        let col_dm: Vec<RationalDensity> =
            (0..NX).map(|ip| ctx.spec0[[ip, dm]].clone()).collect();
        let col_dp: Vec<RationalDensity> =
            (0..NX).map(|ip| ctx.spec0[[ip, dp]].clone()).collect();
        let row_dm: Vec<RationalDensity> =
            (0..NX).map(|i| ctx.spec0[[dm, i]].clone()).collect();
        let row_dp: Vec<RationalDensity> =
            (0..NX).map(|i| ctx.spec0[[dp, i]].clone()).collect();

        // g_α:  Σ_q (G[Δ]K⁺_q⟨X⟩)_i · S⁰_{i′,𝒟⁻_q}(Δ)
        add_outer(&mut g_a.inelastic, &col_dm, &wp);
        // ḡ_α:  Σ_q (G[Δ]K⁻_q⟨X⟩)_i · S⁰_{i′,𝒟⁺_q}(Δ)
        add_outer(&mut gbar_a.inelastic, &col_dp, &wm);
        // g_β:  Σ_q (G[−Δ]K⁺_q⟨X⟩)_{i′} · S⁰_{𝒟⁻_q,i}(Δ)
        add_outer(&mut g_b.inelastic, &wp_adv, &row_dm);
        // ḡ_β:  Σ_q (G[−Δ]K⁻_q⟨X⟩)_{i′} · S⁰_{𝒟⁺_q,i}(Δ)
        add_outer(&mut gbar_b.inelastic, &wm_adv, &row_dp);
    }

    CrossOrderOne { g_a, gbar_a, g_b, gbar_b }
}

/// All first-order same-atom slices.
///
/// Besides the two iteration terms (one per side of the correlator, with the
/// partner dipole taken at its mean), the diffusion matrix itself shifts with
/// the first-order mean, adding `G[−Δ]·δD·G[Δ]ᵀ`.
pub fn order_one_same(ctx: &PairContext) -> SameOrderOne {
    let build = |a_k: &CMat, dx: &CVec| -> PairSlice {
        let mut slice = PairSlice::zero();
        slice.elastic = outer(&ctx.x, dx) + outer(dx, &ctx.x);

        // S⁰·(G[Δ]·A)ᵀ — iteration on the `i` side.
        let t1 = rm_mul(&ctx.spec0, &rm_transpose(&rm_mul_const(&ctx.gp, a_k)));
        // (G[−Δ]·A)·S⁰ — iteration on the `i′` side.
        let t2 = rm_mul(&rm_mul_const(&ctx.gm, a_k), &ctx.spec0);
        // G[−Δ]·δD·G[Δ]ᵀ — interacting-state shift of the force statistics.
        let dd = diffusion_shift(&ctx.tables, dx);
        let t0 = rm_mul(&rm_mul_const(&ctx.gm, &dd), &rm_transpose(&ctx.gp));

        rm_add_assign(&mut slice.inelastic, &t1);
        rm_add_assign(&mut slice.inelastic, &t2);
        rm_add_assign(&mut slice.inelastic, &t0);
        slice
    };

    let g_a = build(&ctx.a_plus, &ctx.dx_g);
    let gbar_a = build(&ctx.a_minus, &ctx.dx_gbar);
    SameOrderOne { g_a, gbar_a }
}

/// First-order slices keyed by monomial, in the atom assignment `α = 1`,
/// `β = 2`: the `cross` map holds `⟨X²_{i′}[Δ′]X¹_i[Δ]⟩`, the `same` map
/// holds `⟨X¹_{i′}[Δ′]X¹_i[Δ]⟩`.
pub struct PairExpansion {
    /// Cross-atom slices by monomial `(a₁,b₁,a₂,b₂)` in `(g₁,ḡ₁,g₂,ḡ₂)`.
    pub cross: BTreeMap<Monomial, PairSlice>,
    /// Same-atom slices by monomial.
    pub same: BTreeMap<Monomial, PairSlice>,
}

/// Assemble the total-order-1 expansion slices.
pub fn order_g_pair(ctx: &PairContext) -> PairExpansion {
    let c = order_one_cross(ctx);
    let s = order_one_same(ctx);
    let mut cross = BTreeMap::new();
    let mut same = BTreeMap::new();
    cross.insert((1, 0, 0, 0), c.g_a);
    cross.insert((0, 1, 0, 0), c.gbar_a);
    cross.insert((0, 0, 1, 0), c.g_b);
    cross.insert((0, 0, 0, 1), c.gbar_b);
    same.insert((1, 0, 0, 0), s.g_a);
    same.insert((0, 1, 0, 0), s.gbar_a);
    PairExpansion { cross, same }
}

// ---------------------------------------------------------------------------
// Second order: the phase-carrying monomials g_αḡ_α (ladder) and g_αḡ_β
// (crossed).
// ---------------------------------------------------------------------------

/// Second-order mean shift `⟨X^α⟩^{(g_αḡ_α)}`, from the stationary first-order
/// pair correlators closing the mean equation:
///
/// ```text
///   0 = M·dx₂ + Σ_q K⁺_q⟨X 𝒟^{β−}_q⟩^{(ḡ_α)} + Σ_q K⁻_q⟨𝒟^{β+}_q X⟩^{(g_α)} .
/// ```
pub fn second_order_mean(ctx: &PairContext, c1: &CrossOrderOne) -> Result<CVec> {
    let st_gbar = c1.gbar_a.stationary()?;
    let st_g = c1.g_a.stationary()?;
    let mut v = CVec::zeros(NX);
    for qd in 0..3usize {
        let q = qd as i32 - 1;
        let dm = algebra::dminus_index(q);
        let dp = algebra::dplus_index(q);
        let col1: CVec = (0..NX).map(|j| st_gbar[[dm, j]]).collect();
        let col2: CVec = (0..NX).map(|j| st_g[[dp, j]]).collect();
        v = v + ctx.kp[qd].dot(&col1) + ctx.km[qd].dot(&col2);
    }
    Ok(ctx.g0.dot(&v))
}

/// Cross second-order mean shifts `(⟨X^α⟩^{(g_αḡ_β)}, ⟨X^β⟩^{(g_αḡ_β)})`.
///
/// Each atom's mean equation closes on a stationary first-order pair
/// correlator carrying the *partner's* conjugate coupling:
///
/// ```text
///   ⟨X^α⟩^{(g_αḡ_β)} = G[0]·Σ_q K⁺_q ⟨X^α 𝒟^{β−}_q⟩^{(ḡ_β)} ,
///   ⟨X^β⟩^{(g_αḡ_β)} = G[0]·Σ_q K⁻_q ⟨𝒟^{α+}_q X^β⟩^{(g_α)} .
/// ```
pub fn second_order_mean_cross(ctx: &PairContext, c1: &CrossOrderOne) -> Result<(CVec, CVec)> {
    let st_g = c1.g_a.stationary()?;
    let st_gbar_b = c1.gbar_b.stationary()?;
    let mut va = CVec::zeros(NX);
    let mut vb = CVec::zeros(NX);
    for qd in 0..3usize {
        let q = qd as i32 - 1;
        let dm = algebra::dminus_index(q);
        let dp = algebra::dplus_index(q);
        // ⟨X^α_j 𝒟^{β−}_q⟩ = stationary ⟨X^β_{𝒟⁻_q} X^α_j⟩ (equal-time
        // cross-atom factors commute).
        let cola: CVec = (0..NX).map(|j| st_gbar_b[[dm, j]]).collect();
        let colb: CVec = (0..NX).map(|j| st_g[[j, dp]]).collect();
        va = va + ctx.kp[qd].dot(&cola);
        vb = vb + ctx.km[qd].dot(&colb);
    }
    Ok((ctx.g0.dot(&va), ctx.g0.dot(&vb)))
}

/// Hermitian mirror of a density matrix:
/// `mirror(T)_{i′i}(Δ) = conj(T_{i†, i′†}(Δ))`.
///
/// Conjugating `⟨X_{i′}[Δ′]X_i[Δ]⟩` and restoring the slot order maps each
/// term group of a self-conjugate monomial onto its partner group, so only
/// half the groups need explicit assembly.
fn mirror_rm(a: &RationalMatrix) -> RationalMatrix {
    let mut out = rm_zeros(NX, NX);
    for ip in 0..NX {
        for i in 0..NX {
            out[[ip, i]] =
                a[[algebra::adjoint_index(i), algebra::adjoint_index(ip)]].conjugated();
        }
    }
    out
}

/// Pointwise hermitian mirror of an evaluated matrix.
fn mirror_mat(m: &CMat) -> CMat {
    let mut out = CMat::zeros((NX, NX));
    for ip in 0..NX {
        for i in 0..NX {
            out[[ip, i]] = m[[algebra::adjoint_index(i), algebra::adjoint_index(ip)]].conj();
        }
    }
    out
}

/// The mixed three-body moment, pre-sampled and pre-contracted on a frequency
/// grid: per node `ν`, the matrices
///
/// ```text
///   P^q_{ac}(ν)  = Σ_b G_{𝒟⁺_q, b}[ν] · E^b_{ac}(ν)   (ladder use),
///   Q^{j′}_{ac}(ν) = Σ_b G_{j′b}[ν] · E^b_{ac}(ν)      (crossed use),
/// ```
///
/// where `E^b = 4Σ_u T^{u+}T^{u−}·Ȳ^b` is the outer-pairing contraction of
/// the channel-resolved mixed moment.
struct MixedSamples {
    /// `(ν, weight)` quadrature nodes.
    nodes: Vec<(f64, f64)>,
    /// Per node: `P^q` for the three plus-side polarizations.
    p: Vec<[CMat; 3]>,
    /// Per node: `Q^{j′}` for all 15 propagator rows.
    q: Vec<Vec<CMat>>,
}

/// Width of the frequency window holding the spectral features: the largest
/// resonance frequency of the drift spectrum, at least one linewidth.
fn grid_scale(ctx: &PairContext) -> f64 {
    ctx.poles.lambda.iter().fold(1.0f64, |m, l| m.max(l.im.abs()))
}

/// Solve the mixed three-body system on a grid and contract.
fn sample_mixed(ctx: &PairContext, n: usize) -> Result<MixedSamples> {
    use crate::three_body::{frequency_grid_scaled, sample_three_body, MixedThreeBodyEngine};
    let engine = MixedThreeBodyEngine::new(ctx)?;
    let nodes = frequency_grid_scaled(n, grid_scale(ctx));
    let sampled = sample_three_body(engine.kernel.tt(), &nodes, |d| engine.solve_all(d))?;
    let mut p = Vec::with_capacity(nodes.len());
    let mut q = Vec::with_capacity(nodes.len());
    for (k, &(nu, _)) in nodes.iter().enumerate() {
        let g = ctx.poles.green(nu);
        let e = &sampled.e[k];
        let pn: [CMat; 3] = std::array::from_fn(|qi| {
            let row = algebra::dplus_index(qi as i32 - 1);
            let mut m = CMat::zeros((NX, NX));
            for (b, eb) in e.iter().enumerate() {
                if g[[row, b]].norm() > 0.0 {
                    m = m + eb * g[[row, b]];
                }
            }
            m
        });
        let qn: Vec<CMat> = (0..NX)
            .map(|jp| {
                let mut m = CMat::zeros((NX, NX));
                for (b, eb) in e.iter().enumerate() {
                    if g[[jp, b]].norm() > 0.0 {
                        m = m + eb * g[[jp, b]];
                    }
                }
                m
            })
            .collect();
        p.push(pn);
        q.push(qn);
    }
    Ok(MixedSamples { nodes, p, q })
}

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Mixed-moment contribution to the ladder density at one frequency (before
/// the hermitian mirror):
///
/// ```text
///   Σ_q Σ_{ac} G_{i′a}[−Δ] · (1/2π)∫dν G_{jc}[Δ−ν] P^q_{ac}(ν) dν
///            · (G[Δ]K⁻_q)_{ij} .
/// ```
fn ladder_mixed_density(ctx: &PairContext, mix: &MixedSamples, delta: f64) -> CMat {
    let gm_e = ctx.poles.green(-delta);
    let gp_e = ctx.poles.green(delta);
    let mut w: [CMat; 3] = std::array::from_fn(|_| CMat::zeros((NX, NX)));
    for (n, &(nu, wt)) in mix.nodes.iter().enumerate() {
        let g2 = ctx.poles.green(delta - nu);
        for (qi, wq) in w.iter_mut().enumerate() {
            *wq = &*wq + &(mix.p[n][qi].dot(&g2.t()) * C64::from(wt / TWO_PI));
        }
    }
    let mut out = CMat::zeros((NX, NX));
    for (qi, wq) in w.iter().enumerate() {
        let gpk = gp_e.dot(&ctx.km[qi]);
        out = out + gm_e.dot(wq).dot(&gpk.t());
    }
    out
}

/// Mixed-moment contribution to the crossed density at one frequency (before
/// the hermitian mirror):
///
/// ```text
///   Σ_q Σ_{j′} (G[−Δ]K⁻_q)_{i′j′} Σ_{ac}
///     [(1/2π)∫dμ G_{𝒟⁺_q,a}[−Δ−μ] Q^{j′}_{ac}(μ)] · G_{ic}[Δ] .
/// ```
fn crossed_mixed_density(ctx: &PairContext, mix: &MixedSamples, delta: f64) -> CMat {
    let gp_e = ctx.poles.green(delta);
    let gm_e = ctx.poles.green(-delta);
    let mut v: [CMat; 3] = std::array::from_fn(|_| CMat::zeros((NX, NX)));
    for (n, &(mu, wt)) in mix.nodes.iter().enumerate() {
        let ga = ctx.poles.green(-delta - mu);
        for (qi, vq) in v.iter_mut().enumerate() {
            let row = ga.row(algebra::dplus_index(qi as i32 - 1));
            for jp in 0..NX {
                let add = row.dot(&mix.q[n][jp]) * C64::from(wt / TWO_PI);
                let mut tgt = vq.row_mut(jp);
                tgt += &add;
            }
        }
    }
    let mut out = CMat::zeros((NX, NX));
    for (qi, vq) in v.iter().enumerate() {
        let gmk = gm_e.dot(&ctx.km[qi]);
        out = out + gmk.dot(vq).dot(&gp_e.t());
    }
    out
}

/// The one-sided ladder term groups (each to be completed by its hermitian
/// mirror), kept separate for diagnostics.
struct LadderGroups {
    /// Self-mirror: force statistics at the second-order mean.
    sh2: RationalMatrix,
    /// Force pairing with a first-order coefficient correlator.
    d1: RationalMatrix,
    /// Conjugate iteration, cross-force pairing, partner slot at its mean.
    l6a: RationalMatrix,
    /// Conjugate iteration, cross-force pairing, inner slot fluctuating.
    l6b: RationalMatrix,
    /// Conjugate iteration, partner at mean, g-shifted force statistics.
    d2mean: RationalMatrix,
    /// Double insertion on the i side, forward-then-conjugate.
    a1: RationalMatrix,
    /// Double insertion on the i side, conjugate-then-forward.
    a2: RationalMatrix,
    /// One insertion per side.
    l3: RationalMatrix,
    /// One insertion per side, opposite coupling ordering.
    l3b: RationalMatrix,
}

impl LadderGroups {
    /// Total one-sided sum: everything except the self-mirror groups `sh2`,
    /// `l3` and `l3b` (the one-insertion-per-side groups map onto themselves
    /// under the hermitian mirror and must be counted once).
    fn one_sided(&self) -> RationalMatrix {
        let mut s = rm_zeros(NX, NX);
        for g in [&self.d1, &self.l6a, &self.l6b, &self.d2mean, &self.a1, &self.a2] {
            rm_add_assign(&mut s, g);
        }
        s
    }
}

/// Exact (pole-form) part of the ladder slice `⟨X^α_{i′}X^α_i⟩^{(g_αḡ_α)}`,
/// including the hermitian-mirrored groups but *excluding* the sampled
/// mixed-moment term.
fn ladder_exact(ctx: &PairContext, c1: &CrossOrderOne, dx2: &CVec) -> PairSlice {
    let groups = ladder_groups(ctx, c1, dx2);
    let mut slice = PairSlice::zero();
    slice.elastic = outer(&ctx.x, dx2)
        + outer(&ctx.dx_g, &ctx.dx_gbar)
        + outer(&ctx.dx_gbar, &ctx.dx_g)
        + outer(dx2, &ctx.x);
    rm_add_assign(&mut slice.inelastic, &groups.sh2);
    rm_add_assign(&mut slice.inelastic, &groups.l3);
    rm_add_assign(&mut slice.inelastic, &groups.l3b);
    let s = groups.one_sided();
    let mirrored = mirror_rm(&s);
    rm_add_assign(&mut slice.inelastic, &s);
    rm_add_assign(&mut slice.inelastic, &mirrored);
    for e in slice.inelastic.iter_mut() {
        e.compress();
    }
    slice
}

/// Build the ladder term groups.
fn ladder_groups(ctx: &PairContext, c1: &CrossOrderOne, dx2: &CVec) -> LadderGroups {
    let t = &ctx.tables.commutators;
    let gp = &ctx.gp;
    let gm = &ctx.gm;
    let spec0 = &ctx.spec0;
    let n4 = crate::three_body::contraction_tensor(&ctx.tables);

    // Self-mirror group: force statistics at the second-order mean.
    let sh2 = rm_mul(
        &rm_mul_const(gm, &diffusion_shift(&ctx.tables, dx2)),
        &rm_transpose(gp),
    );

    // Kernels and coupling-weighted means.
    let gpk_p: Vec<RationalMatrix> = (0..3).map(|qd| rm_mul_const(gp, &ctx.kp[qd])).collect();
    let gpk_m: Vec<RationalMatrix> = (0..3).map(|qd| rm_mul_const(gp, &ctx.km[qd])).collect();
    let gmk_p: Vec<RationalMatrix> = (0..3).map(|qd| rm_mul_const(gm, &ctx.kp[qd])).collect();
    let wm: Vec<Vec<RationalDensity>> =
        (0..3).map(|qd| rm_apply_vec(gp, &ctx.km[qd].dot(&ctx.x))).collect();
    let wp_adv: Vec<Vec<RationalDensity>> =
        (0..3).map(|qd| rm_apply_vec(gm, &ctx.kp[qd].dot(&ctx.x))).collect();
    let gpa_p = rm_mul_const(gp, &ctx.a_plus);
    let gpa_m = rm_mul_const(gp, &ctx.a_minus);
    let gma_p = rm_mul_const(gm, &ctx.a_plus);
    let vac = rm_scale(
        &rm_mul(&rm_mul_const(gm, &cross_diffusion(ctx)), &rm_transpose(gp)),
        C64::new(-0.5, 0.0),
    );
    let sh_g = rm_mul(
        &rm_mul_const(gm, &diffusion_shift(&ctx.tables, &ctx.dx_g)),
        &rm_transpose(gp),
    );

    // Force pairing across the correlator with a first-order coefficient
    // correlator: the pairing's operator-valued part closes on the
    // exchange-relabeled ḡ slice of the cross correlator.
    let mut d1 = rm_zeros(NX, NX);
    let gnu: Vec<RationalMatrix> = (0..NX)
        .map(|u| {
            let mut nt = CMat::zeros((NX, NX));
            for a in 0..NX {
                for b in 0..NX {
                    nt[[b, a]] = n4[[a, b, u]];
                }
            }
            rm_mul_const(gp, &nt)
        })
        .collect();
    for qd in 0..3usize {
        let dm = algebra::dminus_index(qd as i32 - 1);
        let mut cq = rm_zeros(NX, NX); // (a, j)
        for u in 0..NX {
            let ew = c1.gbar_b.elastic[[u, dm]];
            let sw = &c1.gbar_b.inelastic[[u, dm]];
            if ew.norm() == 0.0 && sw.terms.is_empty() {
                continue;
            }
            for a in 0..NX {
                for j in 0..NX {
                    let g = &gnu[u][[j, a]];
                    if g.terms.is_empty() {
                        continue;
                    }
                    if ew.norm() > 0.0 {
                        cq[[a, j]].add_assign(&g.scaled(ew));
                    }
                    if !sw.terms.is_empty() {
                        cq[[a, j]].add_assign(&g.convolve(sw));
                    }
                }
            }
        }
        for e in cq.iter_mut() {
            e.compress();
        }
        rm_add_assign(&mut d1, &rm_mul(&rm_mul(gm, &cq), &rm_transpose(&gpk_p[qd])));
    }

    // Conjugate iteration with the cross-force (vacuum) pairing: partner slot
    // at its mean …
    let mut l6a = rm_zeros(NX, NX);
    for qd in 0..3usize {
        let dp = algebra::dplus_index(qd as i32 - 1);
        for ip in 0..NX {
            for i in 0..NX {
                if vac[[ip, dp]].terms.is_empty() || wm[qd][i].terms.is_empty() {
                    continue;
                }
                l6a[[ip, i]].add_assign(&vac[[ip, dp]].product(&wm[qd][i]));
            }
        }
    }
    // … and with the inner slot fluctuating against the i′-side force.
    let mut l6b = rm_zeros(NX, NX);
    let gmtp: Vec<RationalMatrix> =
        (0..3).map(|ui| rm_mul_const(gm, t.plus(ui as i32 - 1))).collect();
    for qd in 0..3usize {
        let dp = algebra::dplus_index(qd as i32 - 1);
        for ui in 0..3usize {
            let f = &wm[ui][dp];
            if f.terms.is_empty() {
                continue;
            }
            let mut b = rm_zeros(NX, NX); // (a′, j)
            for ap in 0..NX {
                for j in 0..NX {
                    if spec0[[ap, j]].terms.is_empty() {
                        continue;
                    }
                    b[[ap, j]] = f.convolve(&spec0[[ap, j]]);
                }
            }
            rm_add_assign(
                &mut l6b,
                &rm_scale(
                    &rm_mul(&rm_mul(&gmtp[ui], &b), &rm_transpose(&gpk_m[qd])),
                    C64::from(-2.0),
                ),
            );
        }
    }
    // Conjugate iteration with the partner slot at its mean and the force
    // statistics at the g-shifted mean.
    let d2mean = rm_mul(&sh_g, &rm_transpose(&gpa_m));

    // Double insertion on the i side (both orderings), with the partner pair
    // at means or closed on its connected spectrum.
    let mut a1 = rm_mul(spec0, &rm_transpose(&rm_mul(&gpa_p, &gpa_m)));
    let mut a2 = rm_mul(spec0, &rm_transpose(&rm_mul(&gpa_m, &gpa_p)));
    for qd in 0..3usize {
        let dmq = algebra::dminus_index(qd as i32 - 1);
        let dpq = algebra::dplus_index(qd as i32 - 1);
        let mut bq = rm_zeros(NX, NX);
        let mut cq = rm_zeros(NX, NX);
        for pd in 0..3usize {
            let dpp = algebra::dplus_index(pd as i32 - 1);
            let dmp = algebra::dminus_index(pd as i32 - 1);
            let s1 = &spec0[[dpp, dmq]];
            let s2 = spec0[[dpq, dmp]].reflected();
            for j in 0..NX {
                for l in 0..NX {
                    if !gpk_m[pd][[j, l]].terms.is_empty() && !s1.terms.is_empty() {
                        bq[[j, l]].add_assign(&gpk_m[pd][[j, l]].convolve(s1));
                    }
                    if !gpk_p[pd][[j, l]].terms.is_empty() && !s2.terms.is_empty() {
                        cq[[j, l]].add_assign(&gpk_p[pd][[j, l]].convolve(&s2));
                    }
                }
            }
        }
        rm_add_assign(
            &mut a1,
            &rm_mul(spec0, &rm_transpose(&rm_mul(&gpk_p[qd], &bq))),
        );
        rm_add_assign(
            &mut a2,
            &rm_mul(spec0, &rm_transpose(&rm_mul(&gpk_m[qd], &cq))),
        );
    }

    // One-insertion-per-side group.
    let mut l3 = rm_mul(&rm_mul(&gma_p, spec0), &rm_transpose(&gpa_m));
    for pd in 0..3usize {
        let dmp = algebra::dminus_index(pd as i32 - 1);
        for qd in 0..3usize {
            let dpq = algebra::dplus_index(qd as i32 - 1);
            let sc = &spec0[[dmp, dpq]];
            if !sc.terms.is_empty() {
                for ip in 0..NX {
                    for i in 0..NX {
                        if wp_adv[pd][ip].terms.is_empty() || wm[qd][i].terms.is_empty() {
                            continue;
                        }
                        l3[[ip, i]]
                            .add_assign(&wp_adv[pd][ip].product(&wm[qd][i]).product(sc));
                    }
                }
                let mut cm = rm_zeros(NX, NX);
                for jp in 0..NX {
                    for j in 0..NX {
                        if !spec0[[jp, j]].terms.is_empty() {
                            cm[[jp, j]] = spec0[[jp, j]].convolve(sc);
                        }
                    }
                }
                rm_add_assign(
                    &mut l3,
                    &rm_mul(&rm_mul(&gmk_p[pd], &cm), &rm_transpose(&gpk_m[qd])),
                );
            }
        }
    }

    // One-insertion-per-side group, opposite coupling ordering (conjugate
    // coupling on the advanced side). Also maps onto itself under the
    // hermitian mirror, hence a separate group counted once.
    let gma_m = rm_mul_const(gm, &ctx.a_minus);
    let gmk_m: Vec<RationalMatrix> = (0..3).map(|qd| rm_mul_const(gm, &ctx.km[qd])).collect();
    let wm_adv: Vec<Vec<RationalDensity>> =
        (0..3).map(|qd| rm_apply_vec(gm, &ctx.km[qd].dot(&ctx.x))).collect();
    let wp: Vec<Vec<RationalDensity>> =
        (0..3).map(|qd| rm_apply_vec(gp, &ctx.kp[qd].dot(&ctx.x))).collect();
    let mut l3b = rm_mul(&rm_mul(&gma_m, spec0), &rm_transpose(&gpa_p));
    for qd in 0..3usize {
        let dpq = algebra::dplus_index(qd as i32 - 1);
        for pd in 0..3usize {
            let dmp = algebra::dminus_index(pd as i32 - 1);
            let sc = &spec0[[dpq, dmp]];
            if sc.terms.is_empty() {
                continue;
            }
            for ip in 0..NX {
                for i in 0..NX {
                    if wm_adv[qd][ip].terms.is_empty() || wp[pd][i].terms.is_empty() {
                        continue;
                    }
                    l3b[[ip, i]].add_assign(&wm_adv[qd][ip].product(&wp[pd][i]).product(sc));
                }
            }
            let mut cm = rm_zeros(NX, NX);
            for jp in 0..NX {
                for j in 0..NX {
                    if !spec0[[jp, j]].terms.is_empty() {
                        cm[[jp, j]] = spec0[[jp, j]].convolve(sc);
                    }
                }
            }
            rm_add_assign(
                &mut l3b,
                &rm_mul(&rm_mul(&gmk_m[qd], &cm), &rm_transpose(&gpk_p[pd])),
            );
        }
    }

    LadderGroups { sh2, d1, l6a, l6b, d2mean, a1, a2, l3, l3b }
}

/// Exact (pole-form) part of the crossed slice `⟨X^β_{i′}X^α_i⟩^{(g_αḡ_β)}`,
/// mirrored groups included, sampled mixed-moment term excluded.
fn crossed_exact(ctx: &PairContext, c1: &CrossOrderOne) -> Result<PairSlice> {
    let (dxc_a, dxc_b) = second_order_mean_cross(ctx, c1)?;
    let groups = crossed_groups(ctx);
    let mut slice = PairSlice::zero();
    slice.elastic = outer(&ctx.dx_gbar, &ctx.dx_g)
        + outer(&dxc_b, &ctx.x)
        + outer(&ctx.x, &dxc_a);
    let mut s = rm_zeros(NX, NX);
    rm_add_assign(&mut s, &groups.pa);
    rm_add_assign(&mut s, &groups.pbmean);
    rm_add_assign(&mut s, &groups.cb);
    let mirrored = mirror_rm(&s);
    rm_add_assign(&mut slice.inelastic, &s);
    rm_add_assign(&mut slice.inelastic, &mirrored);
    rm_add_assign(&mut slice.inelastic, &groups.cc);
    for e in slice.inelastic.iter_mut() {
        e.compress();
    }
    Ok(slice)
}

/// Term groups of the exact part of the crossed slice. The first three are
/// one-sided (conjugate-coupling insertion on the advanced β factor) and are
/// completed by the hermitian mirror; `cc` maps onto itself under the mirror
/// and is counted once.
struct CrossedGroups {
    /// Cross-force pairing with the inner slot fluctuating.
    pa: RationalMatrix,
    /// β remainder at its mean against the g-shifted force statistics.
    pbmean: RationalMatrix,
    /// Double insertion on the advanced side.
    cb: RationalMatrix,
    /// One insertion per side (self-mirror).
    cc: RationalMatrix,
}

/// Build the crossed term groups.
fn crossed_groups(ctx: &PairContext) -> CrossedGroups {
    let t = &ctx.tables.commutators;
    let gp = &ctx.gp;
    let gm = &ctx.gm;
    let spec0 = &ctx.spec0;

    let gpk_p: Vec<RationalMatrix> = (0..3).map(|qd| rm_mul_const(gp, &ctx.kp[qd])).collect();
    let gmk_m: Vec<RationalMatrix> = (0..3).map(|qd| rm_mul_const(gm, &ctx.km[qd])).collect();
    let wp: Vec<Vec<RationalDensity>> =
        (0..3).map(|qd| rm_apply_vec(gp, &ctx.kp[qd].dot(&ctx.x))).collect();
    let wm: Vec<Vec<RationalDensity>> =
        (0..3).map(|qd| rm_apply_vec(gp, &ctx.km[qd].dot(&ctx.x))).collect();
    let wm_adv: Vec<Vec<RationalDensity>> =
        (0..3).map(|qd| rm_apply_vec(gm, &ctx.km[qd].dot(&ctx.x))).collect();
    let gptp: Vec<RationalMatrix> =
        (0..3).map(|ui| rm_mul_const(gp, t.plus(ui as i32 - 1))).collect();
    let sh_g = rm_mul(
        &rm_mul_const(gm, &diffusion_shift(&ctx.tables, &ctx.dx_g)),
        &rm_transpose(gp),
    );
    let gma_p_s0 = rm_mul(&rm_mul_const(gm, &ctx.a_plus), spec0);
    let gpa_p_s0t = rm_mul(&rm_mul_const(gp, &ctx.a_plus), &rm_transpose(spec0));
    let gma_m_s0 = rm_mul(&rm_mul_const(gm, &ctx.a_minus), spec0);

    // Mirror-paired half: the conjugate iteration of the β side against the
    // zeroth-order α factor.
    let mut pa = rm_zeros(NX, NX);
    let mut pbmean = rm_zeros(NX, NX);
    let mut cb = rm_zeros(NX, NX);
    for qd in 0..3usize {
        let dpq = algebra::dplus_index(qd as i32 - 1);

        // Cross-force pairing between the introduced α dipole and the β
        // remainder, with the α coefficient closing on the α factor.
        let mut aq = rm_zeros(NX, NX); // (j′, a′)
        for ui in 0..3usize {
            for jp in 0..NX {
                if wm[ui][jp].terms.is_empty() {
                    continue;
                }
                for ap in 0..NX {
                    let g = &gptp[ui][[dpq, ap]];
                    if g.terms.is_empty() {
                        continue;
                    }
                    aq[[jp, ap]]
                        .add_assign(&g.convolve(&wm[ui][jp]).reflected().scaled(C64::from(-2.0)));
                }
            }
        }
        rm_add_assign(&mut pa, &rm_mul(&rm_mul(&gmk_m[qd], &aq), spec0));

        // β remainder at its mean, α dipole closing on the g-shifted force
        // statistics.
        for ip in 0..NX {
            for i in 0..NX {
                if wm_adv[qd][ip].terms.is_empty() || sh_g[[dpq, i]].terms.is_empty() {
                    continue;
                }
                pbmean[[ip, i]].add_assign(&wm_adv[qd][ip].product(&sh_g[[dpq, i]]));
            }
        }

        // Coupling inserted on the introduced α dipole line.
        for ip in 0..NX {
            for i in 0..NX {
                if wm_adv[qd][ip].terms.is_empty() || gma_p_s0[[dpq, i]].terms.is_empty() {
                    continue;
                }
                cb[[ip, i]].add_assign(&wm_adv[qd][ip].product(&gma_p_s0[[dpq, i]]));
            }
        }
        let mut uq = rm_zeros(NX, NX); // (j′, l)
        for pd in 0..3usize {
            let dmp = algebra::dminus_index(pd as i32 - 1);
            for jp in 0..NX {
                if spec0[[dmp, jp]].terms.is_empty() {
                    continue;
                }
                for l in 0..NX {
                    let g = &gpk_p[pd][[dpq, l]];
                    if g.terms.is_empty() {
                        continue;
                    }
                    uq[[jp, l]].add_assign(&g.convolve(&spec0[[dmp, jp]]).reflected());
                }
            }
        }
        rm_add_assign(&mut cb, &rm_mul(&rm_mul(&gmk_m[qd], &uq), spec0));
    }

    // Self-mirror group: one conjugate iteration on the β side against one
    // iteration on the α side.
    let mut cc = rm_zeros(NX, NX);
    for pd in 0..3usize {
        let dpp = algebra::dplus_index(pd as i32 - 1);
        for ip in 0..NX {
            for i in 0..NX {
                if wm_adv[pd][ip].terms.is_empty() || gpa_p_s0t[[i, dpp]].terms.is_empty() {
                    continue;
                }
                cc[[ip, i]].add_assign(&wm_adv[pd][ip].product(&gpa_p_s0t[[i, dpp]]));
            }
        }
    }
    for qd in 0..3usize {
        let dmq = algebra::dminus_index(qd as i32 - 1);
        for ip in 0..NX {
            for i in 0..NX {
                if gma_m_s0[[ip, dmq]].terms.is_empty() || wp[qd][i].terms.is_empty() {
                    continue;
                }
                cc[[ip, i]].add_assign(&gma_m_s0[[ip, dmq]].product(&wp[qd][i]));
            }
        }
    }
    for pd in 0..3usize {
        let dpp = algebra::dplus_index(pd as i32 - 1);
        for qd in 0..3usize {
            let dmq = algebra::dminus_index(qd as i32 - 1);
            let mut cm = rm_zeros(NX, NX); // (j′, j)
            for jp in 0..NX {
                for j in 0..NX {
                    if spec0[[jp, dmq]].terms.is_empty() || spec0[[dpp, j]].terms.is_empty() {
                        continue;
                    }
                    cm[[jp, j]] = spec0[[jp, dmq]].convolve(&spec0[[dpp, j]]);
                }
            }
            rm_add_assign(
                &mut cc,
                &rm_mul(&rm_mul(&gmk_m[pd], &cm), &rm_transpose(&gpk_p[qd])),
            );
        }
    }

    CrossedGroups { pa, pbmean, cb, cc }
}

/// Quadrature controls of the second-order assembly.
#[derive(Debug, Clone)]
pub struct GgbarOptions {
    /// Nodes of the mixed-moment sampling grid (odd).
    pub mixed_nodes: usize,
    /// Nodes of the outer frequency integral for stationary values (odd).
    pub outer_nodes: usize,
}

impl Default for GgbarOptions {
    fn default() -> Self {
        Self { mixed_nodes: 201, outer_nodes: 301 }
    }
}

/// The two phase-carrying second-order slices: the *ladder* monomial `g_αḡ_α`
/// of the same-atom correlator `⟨X^α_{i′}[Δ′]X^α_i[Δ]⟩` and the *crossed*
/// monomial `g_αḡ_β` of `⟨X^β_{i′}[Δ′]X^α_i[Δ]⟩`.
///
/// Both split into an exact pole-form part ([`PairSlice`]) and a sampled
/// mixed-moment part evaluated by quadrature; [`GgbarPair::ladder_density`]
/// and friends assemble the totals.
pub struct GgbarPair<'a> {
    ctx: &'a PairContext,
    /// Exact part of the ladder slice.
    pub ladder: PairSlice,
    /// Exact part of the crossed slice.
    pub crossed: PairSlice,
    mixed: MixedSamples,
    outer_nodes: usize,
}

impl GgbarPair<'_> {
    /// Total inelastic ladder density at one frequency.
    pub fn ladder_density(&self, delta: f64) -> CMat {
        let mut m = self.ladder.inelastic.mapv(|f| f.eval(delta));
        let t = ladder_mixed_density(self.ctx, &self.mixed, delta);
        m = m + &t + mirror_mat(&t);
        m
    }

    /// Total inelastic crossed density at one frequency.
    pub fn crossed_density(&self, delta: f64) -> CMat {
        let mut m = self.crossed.inelastic.mapv(|f| f.eval(delta));
        let t = crossed_mixed_density(self.ctx, &self.mixed, delta);
        m = m + &t + mirror_mat(&t);
        m
    }

    /// Stationary ladder matrix (elastic weight plus frequency integral).
    pub fn ladder_stationary(&self) -> Result<CMat> {
        let mut m = self.ladder.stationary()?;
        let t = self.integrate_mixed(|d| ladder_mixed_density(self.ctx, &self.mixed, d));
        m = m + &t + mirror_mat(&t);
        Ok(m)
    }

    /// Stationary crossed matrix.
    pub fn crossed_stationary(&self) -> Result<CMat> {
        let mut m = self.crossed.stationary()?;
        let t = self.integrate_mixed(|d| crossed_mixed_density(self.ctx, &self.mixed, d));
        m = m + &t + mirror_mat(&t);
        Ok(m)
    }

    /// `(1/2π)∫dΔ` of a sampled matrix density over the outer grid.
    fn integrate_mixed(&self, f: impl Fn(f64) -> CMat + Sync) -> CMat {
        use rayon::prelude::*;
        let nodes =
            crate::three_body::frequency_grid_scaled(self.outer_nodes, grid_scale(self.ctx));
        nodes
            .par_iter()
            .map(|&(d, w)| f(d) * C64::from(w / TWO_PI))
            .reduce(|| CMat::zeros((NX, NX)), |a, b| a + b)
    }
}

/// Assemble the second-order pair slices.
///
/// The ladder slice sums the second-order mean-shifted force statistics, the
/// force pairings with first-order coefficient correlators, single and double
/// coupling insertions, the non-Gaussian mixed-moment term, and the hermitian
/// mirrors of all one-sided groups. The crossed slice collects the conjugate
/// β-side iteration closed at first order against the α factor, its mirror,
/// and the self-mirrored one-each-side group.
pub fn order_ggbar_pair<'a>(
    ctx: &'a PairContext,
    opts: &GgbarOptions,
) -> Result<GgbarPair<'a>> {
    let c1 = order_one_cross(ctx);
    let dx2 = second_order_mean(ctx, &c1)?;
    let mixed = sample_mixed(ctx, opts.mixed_nodes)?;
    let ladder = ladder_exact(ctx, &c1, &dx2);
    let crossed = crossed_exact(ctx, &c1)?;
    Ok(GgbarPair { ctx, ladder, crossed, mixed, outer_nodes: opts.outer_nodes })
}
