//! Single-atom dynamics: drift system `(M, L)`, steady state, Green's
//! function, and the diffusion matrix of the vacuum Langevin forces.
//!
//! In the rotating frame, every atomic observable `𝒪` obeys the quantum
//! Langevin equation (units `Γ = 1`):
//!
//! ```text
//!   d𝒪/dt = iδ[𝒪, Π^e]
//!           − (i/2) Σ_q (−1)^q [𝒪, 𝒟^+_q] Ω^{L+}_{−q}
//!           − (i/2) Σ_q [𝒪, 𝒟^−_q] Ω^{L−}_q
//!           − (1/2)(𝒪Π^e + Π^e𝒪) + Σ_q 𝒟^+_q 𝒪 𝒟^−_q
//!           + ℱ_𝒪(t)
//! ```
//!
//! Applied to the 15 canonical operators `X` and re-expanded on `{𝟙, X}` this
//! yields the linear system `dX/dt = M X + L + F(t)` with stationary solution
//! `⟨X⟩ = −M⁻¹L` and resolvent `G[Δ] = (−iΔ𝟙 − M)⁻¹`, whose poles (the
//! eigenvalues of `M`) all lie in the lower half of the complex `Δ` plane.
//!
//! The white-noise force correlator `⟨F_p(t) F_q(t′)⟩ = D_pq δ(t−t′)`
//! (equivalently `⟨F_p[Δ′]F_q[Δ]⟩ = 2πδ[Δ′+Δ] D_pq`) is obtained from the
//! generalized Einstein relation
//!
//! ```text
//!   D_pq = ⟨𝒜(X_p X_q)⟩ − ⟨𝒜(X_p) X_q⟩ − ⟨X_p 𝒜(X_q)⟩    (steady state)
//! ```
//!
//! where `𝒜` is the deterministic drift above. This construction fixes the
//! normalization unambiguously: the integrated inelastic spectrum it produces
//! equals the connected equal-time correlator (see the sum-rule tests), which
//! pins the bookkeeping between the time- and frequency-domain conventions.

use crate::algebra::{
    self, CommutatorTable, OperatorBasis, StructureTable, NX,
};
use crate::error::{Error, Result};
use crate::{C64, CMat, CVec};
use ndarray_linalg::{Eig, Inverse, Solve};

/// All precomputed algebra tables, bundled for convenience.
#[derive(Debug, Clone)]
pub struct Tables {
    /// Operator basis and expansion machinery.
    pub basis: OperatorBasis,
    /// Multiplication table of the traceless basis.
    pub structure: StructureTable,
    /// Commutator tables `T^{q±}`.
    pub commutators: CommutatorTable,
}

impl Tables {
    /// Build every table once; everything downstream borrows from here.
    pub fn new() -> Self {
        let basis = OperatorBasis::new();
        let structure = algebra::structure_constants(&basis);
        let commutators = algebra::commutator_tables(&basis);
        Self { basis, structure, commutators }
    }
}

impl Default for Tables {
    fn default() -> Self {
        Self::new()
    }
}

/// Monochromatic driving field in the rotating frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LaserField {
    /// Laser detuning `δ = ω_L − ω_0` in units of `Γ`.
    pub delta: f64,
    /// Spherical components `Ω^{L+}_q` of the positive-frequency Rabi field,
    /// indexed `q + 1`.
    pub rabi_plus: [C64; 3],
}

impl LaserField {
    /// Positive-helicity (σ+) plane wave propagating along `+ẑ`, with
    /// `|Ω_L|² = s₀Γ²/2`.
    ///
    /// The polarization vector is `ε_{+1} = −ε̄_{−1}`, and the Rabi components
    /// are taken in the `ε̄`-expansion (`Ω = Σ_q Ω_q ε̄_q`), so the single
    /// nonzero component is `Ω^{L+}_{−1} = −Ω_L`. The drift equation couples
    /// the sublevel `m` through `Ω^{L+}_{−m}`, so this drive populates the
    /// `m = +1` excited sublevel, as positive-helicity light must.
    pub fn sigma_plus(s0: f64, delta: f64) -> Self {
        assert!(s0 >= 0.0, "saturation parameter must be nonnegative");
        let omega = (s0 / 2.0).sqrt();
        Self { delta, rabi_plus: [C64::new(-omega, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0)] }
    }

    /// On-resonance saturation parameter `s₀ = 2|Ω_L|²/Γ²`.
    pub fn s0(&self) -> f64 {
        2.0 * self.rabi_plus.iter().map(|z| z.norm_sqr()).sum::<f64>()
    }

    /// Saturation parameter at the actual detuning,
    /// `s(δ) = s₀ / (1 + (2δ/Γ)²)`.
    pub fn s(&self) -> f64 {
        self.s0() / (1.0 + 4.0 * self.delta * self.delta)
    }

    /// Negative-frequency components `Ω^{L−}_q = (−1)^q conj(Ω^{L+}_{−q})`.
    pub fn rabi_minus(&self, q: i32) -> C64 {
        let sign = if q % 2 == 0 { 1.0 } else { -1.0 };
        self.rabi_plus[(-q + 1) as usize].conj() * sign
    }
}

/// Apply the deterministic drift `𝒜` to an arbitrary 4×4 operator.
pub fn drift_action(tables: &Tables, laser: &LaserField, o: &CMat) -> CMat {
    let b = &tables.basis;
    let i = C64::new(0.0, 1.0);
    let comm = |a: &CMat, c: &CMat| a.dot(c) - c.dot(a);

    // iδ [𝒪, Π^e]
    let mut out = comm(o, &b.pi_e) * (i * laser.delta);
    for q in -1..=1i32 {
        let sign = if q % 2 == 0 { 1.0 } else { -1.0 };
        let dp = &b.x[algebra::dplus_index(q)];
        let dm = &b.x[algebra::dminus_index(q)];
        // −(i/2) (−1)^q [𝒪, 𝒟^+_q] Ω^{L+}_{−q}
        out = out + comm(o, dp) * (-i * 0.5 * sign * laser.rabi_plus[(-q + 1) as usize]);
        // −(i/2) [𝒪, 𝒟^−_q] Ω^{L−}_q
        out = out + comm(o, dm) * (-i * 0.5 * laser.rabi_minus(q));
        // +Σ_q 𝒟^+_q 𝒪 𝒟^−_q
        out = out + dp.dot(o).dot(dm);
    }
    // −(1/2)(𝒪Π^e + Π^e𝒪)
    out = out - (o.dot(&b.pi_e) + b.pi_e.dot(o)) * C64::new(0.5, 0.0);
    out
}

/// The linear single-atom system `dX/dt = M X + L + F`.
#[derive(Debug, Clone)]
pub struct DriftSystem {
    /// Drift matrix `M` (15×15).
    pub m: CMat,
    /// Constant source vector `L`.
    pub l: CVec,
    /// The driving field that generated the system.
    pub laser: LaserField,
}

/// Build `(M, L)` by applying the drift to each basis operator and projecting
/// the result back onto `{𝟙, X}`.
pub fn build_drift(tables: &Tables, laser: &LaserField) -> DriftSystem {
    let mut m = CMat::zeros((NX, NX));
    let mut l = CVec::zeros(NX);
    for i in 0..NX {
        let dxi = drift_action(tables, laser, &tables.basis.x[i]);
        let (c0, c) = tables.basis.expand(&dxi);
        l[i] = c0;
        for j in 0..NX {
            m[[i, j]] = c[j];
        }
    }
    DriftSystem { m, l, laser: laser.clone() }
}

/// Stationary expectation values `⟨X⟩ = −M⁻¹L`.
pub fn steady_state(sys: &DriftSystem) -> Result<CVec> {
    let rhs = sys.l.mapv(|z| -z);
    let x = sys.m.solve(&rhs).map_err(|_| Error::NonRelaxingDrift)?;
    // Guard against a nominally successful solve of a singular system.
    let residual = sys.m.dot(&x) + &sys.l;
    if residual.iter().map(|z| z.norm()).fold(0.0, f64::max) > 1e-9 {
        return Err(Error::NonRelaxingDrift);
    }
    Ok(x)
}

/// Resolvent `G[Δ] = (−iΔ𝟙 − M)⁻¹` by a direct linear solve.
pub fn green_function(sys: &DriftSystem, delta: f64) -> CMat {
    let a = CMat::eye(NX) * C64::new(0.0, -delta) - &sys.m;
    a.inv().expect("resolvent exists off the spectrum of M")
}

/// Eigendecomposition `M = V Λ V⁻¹` with per-pole residue matrices
/// `R_k = v_k w_k^T` (right/left eigenvectors), so that
/// `G[Δ] = Σ_k R_k / (−iΔ − λ_k)`.
#[derive(Debug, Clone)]
pub struct PoleData {
    /// Eigenvalues `λ_k` of `M`; all have `Re λ_k < 0` for a damped atom.
    pub lambda: CVec,
    /// Right eigenvectors (columns).
    pub v: CMat,
    /// Inverse of `v` (rows are left eigenvectors).
    pub v_inv: CMat,
}

impl PoleData {
    /// Diagonalize a drift system. Fails with [`Error::NearDefectiveDrift`] if
    /// the eigenvector matrix is too ill-conditioned to trust residues.
    pub fn new(sys: &DriftSystem) -> Result<Self> {
        let (lambda, v) = sys.m.eig().map_err(|_| Error::NearDefectiveDrift)?;
        let v_inv = v.inv().map_err(|_| Error::NearDefectiveDrift)?;
        let norm = |m: &CMat| m.iter().map(|z| z.norm()).fold(0.0, f64::max);
        if norm(&v) * norm(&v_inv) > 1e8 {
            return Err(Error::NearDefectiveDrift);
        }
        Ok(Self { lambda, v, v_inv })
    }

    /// Residue matrix `R_k = v_k w_k^T` of the pole `λ_k`.
    pub fn residue(&self, k: usize) -> CMat {
        let vk = self.v.column(k);
        let wk = self.v_inv.row(k);
        let mut r = CMat::zeros((NX, NX));
        for i in 0..NX {
            for j in 0..NX {
                r[[i, j]] = vk[i] * wk[j];
            }
        }
        r
    }

    /// Evaluate `G[Δ]` from the pole expansion (O(n²) per frequency).
    pub fn green(&self, delta: f64) -> CMat {
        let d = self
            .lambda
            .mapv(|l| (C64::new(0.0, -delta) - l).inv());
        // V · diag(d) · V⁻¹
        let mut scaled = self.v.clone();
        for (mut col, dk) in scaled.columns_mut().into_iter().zip(d.iter()) {
            col.mapv_inplace(|z| z * dk);
        }
        scaled.dot(&self.v_inv)
    }
}

/// Diffusion matrix `D_pq` of the Langevin forces, from the generalized
/// Einstein relation evaluated in the state `⟨X⟩ = x_ss`.
pub fn diffusion_matrix(tables: &Tables, sys: &DriftSystem, x_ss: &CVec) -> CMat {
    let b = &tables.basis;
    let mut d = CMat::zeros((NX, NX));
    // Precompute drift images of the basis operators.
    let drift_x: Vec<CMat> = (0..NX).map(|i| drift_action(tables, &sys.laser, &b.x[i])).collect();
    for p in 0..NX {
        for q in 0..NX {
            let prod = b.x[p].dot(&b.x[q]);
            let combo = drift_action(tables, &sys.laser, &prod)
                - drift_x[p].dot(&b.x[q])
                - b.x[p].dot(&drift_x[q]);
            d[[p, q]] = b.expectation(&combo, x_ss);
        }
    }
    d
}

/// Same diffusion matrix from the normally-ordered commutator form
/// `D_pq = −⟨Σ_q₀ [X_p, 𝒟^+_q₀][X_q, 𝒟^−_q₀]⟩` (in units `Γ = 1`).
///
/// Algebraically identical to [`diffusion_matrix`] — the Hamiltonian parts of
/// the drift cancel in the Einstein combination by the Leibniz rule and the
/// dissipator leaves exactly this commutator contraction. Kept as an
/// independent cross-check.
pub fn diffusion_matrix_commutator(tables: &Tables, x_ss: &CVec) -> CMat {
    let b = &tables.basis;
    let comm = |a: &CMat, c: &CMat| a.dot(c) - c.dot(a);
    let mut d = CMat::zeros((NX, NX));
    for p in 0..NX {
        for q in 0..NX {
            let mut acc = CMat::zeros((algebra::DIM, algebra::DIM));
            for q0 in -1..=1i32 {
                let dp = &b.x[algebra::dplus_index(q0)];
                let dm = &b.x[algebra::dminus_index(q0)];
                acc = acc + comm(&b.x[p], dp).dot(&comm(&b.x[q], dm));
            }
            d[[p, q]] = -b.expectation(&acc, x_ss);
        }
    }
    d
}

/// The dipole–dipole spectral correlator `⟨𝒟^+_{q′}[Δ′] 𝒟^−_q[Δ]⟩` of one
/// driven atom (the resonance-fluorescence / Mollow spectrum before
/// polarization contraction).
///
/// * elastic weight: `⟨𝒟^+_{q′}⟩⟨𝒟^−_q⟩`;
/// * inelastic density: `Σ_{p′p} G_{i′p′}[−Δ] G_{ip}[Δ] D_{p′p}` with
///   `i′, i` the `𝒟^+_{q′}`, `𝒟^−_q` rows.
pub fn dipole_spectrum(
    _sys: &DriftSystem,
    poles: &PoleData,
    diffusion: &CMat,
    x_ss: &CVec,
    q_plus: i32,
    q_minus: i32,
) -> crate::freq_integral::SpectralObject {
    use crate::freq_integral::{green_matrix, GreenArg, RationalDensity, SpectralObject};
    let ip = algebra::dplus_index(q_plus);
    let im = algebra::dminus_index(q_minus);
    let gm = green_matrix(poles, GreenArg::Minus);
    let gp = green_matrix(poles, GreenArg::Plus);
    let mut inelastic = RationalDensity::zero();
    for pp in 0..NX {
        for p in 0..NX {
            let d = diffusion[[pp, p]];
            if d.norm() == 0.0 {
                continue;
            }
            inelastic.add_assign(&gm[[ip, pp]].product(&gp[[im, p]]).scaled(d));
        }
    }
    inelastic.compress();
    SpectralObject { elastic: x_ss[ip] * x_ss[im], inelastic }
}

/// Equal-time correlator `⟨X_i X_j⟩` in the state `x_ss`, via the
/// multiplication table.
pub fn equal_time(tables: &Tables, x_ss: &CVec, i: usize, j: usize) -> C64 {
    let (c0, c) = tables.structure.product(i, j);
    c0 + c.dot(x_ss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::{dminus_index, dplus_index, piz_index};
    use approx::assert_abs_diff_eq;
    use ndarray_linalg::Eigh;

    fn max_abs(m: &CMat) -> f64 {
        m.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    #[test]
    fn no_drive_steady_state_is_ground() {
        let t = Tables::new();
        let sys = build_drift(&t, &LaserField::sigma_plus(0.0, 0.0));
        let x = steady_state(&sys).unwrap();
        for m in -1..=1 {
            assert_abs_diff_eq!(x[piz_index(m)].re, -0.5, epsilon = 1e-12);
        }
        let coh: f64 = (3..NX).map(|i| x[i].norm()).sum();
        assert!(coh < 1e-12);
    }

    #[test]
    fn saturated_two_level_population() {
        let t = Tables::new();
        for (s0, delta) in [(2.0, 0.0), (0.02, 0.0), (2.0, 5.0), (50.0, 0.0)] {
            let laser = LaserField::sigma_plus(s0, delta);
            let s = laser.s();
            let sys = build_drift(&t, &laser);
            let x = steady_state(&sys).unwrap();
            // ⟨Π^e_{+1,+1}⟩ = ⟨Π^z_{+1}⟩ + ⟨Π^g⟩/2 + ... easier via expectation:
            let pe = {
                let mut op = CMat::zeros((4, 4));
                op[[3, 3]] = C64::new(1.0, 0.0);
                t.basis.expectation(&op, &x)
            };
            let expect = (s / 2.0) / (1.0 + s);
            assert_abs_diff_eq!(pe.re, expect, epsilon = 1e-12);
            assert!(pe.im.abs() < 1e-12);
            // Elastic dipole: |⟨𝒟⟩|² = (s/2)/(1+s)².
            let dp = x[dplus_index(1)];
            let dm = x[dminus_index(1)];
            assert_abs_diff_eq!((dp * dm).re, (s / 2.0) / (1.0 + s).powi(2), epsilon = 1e-12);
            assert!((dp - dm.conj()).norm() < 1e-12);
        }
    }

    #[test]
    fn steady_density_is_physical() {
        let t = Tables::new();
        for (s0, delta) in [(0.02, 0.0), (2.0, 0.0), (2.0, 5.0), (50.0, 0.0), (1e4, 0.0)] {
            let sys = build_drift(&t, &LaserField::sigma_plus(s0, delta));
            let x = steady_state(&sys).unwrap();
            let rho = t.basis.density_from_mean(&x);
            // Hermitian, unit trace, eigenvalues in [0, 1].
            assert!(max_abs(&(rho.clone() - rho.t().mapv(|z| z.conj()))) < 1e-12);
            assert_abs_diff_eq!(rho.diag().sum().re, 1.0, epsilon = 1e-12);
            let (evals, _) = rho.eigh(ndarray_linalg::UPLO::Lower).unwrap();
            for ev in evals.iter() {
                assert!(*ev > -1e-12 && *ev < 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn drift_is_stable_and_adjoint_consistent() {
        let t = Tables::new();
        for s0 in [1e-4, 0.02, 2.0, 50.0, 1e4] {
            for delta in [-20.0, -5.0, 0.0, 1.0, 20.0] {
                let sys = build_drift(&t, &LaserField::sigma_plus(s0, delta));
                let poles = PoleData::new(&sys).unwrap();
                for l in poles.lambda.iter() {
                    assert!(l.re < 0.0, "unstable eigenvalue {l} at s0={s0}, δ={delta}");
                }
                // Hermiticity transport: M_{a(i)a(j)} = conj(M_{ij}).
                for i in 0..NX {
                    let ai = algebra::adjoint_index(i);
                    assert!((sys.l[ai] - sys.l[i].conj()).norm() < 1e-12);
                    for j in 0..NX {
                        let aj = algebra::adjoint_index(j);
                        assert!((sys.m[[ai, aj]] - sys.m[[i, j]].conj()).norm() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn green_function_properties() {
        let t = Tables::new();
        let sys = build_drift(&t, &LaserField::sigma_plus(2.0, 0.0));
        // G[0] = −M⁻¹.
        let g0 = green_function(&sys, 0.0);
        let minv = sys.m.inv().unwrap();
        assert!(max_abs(&(g0 + minv)) < 1e-10);
        // Large |Δ|: G → (i/Δ)·𝟙.
        let big = 1e6;
        let g = green_function(&sys, big);
        let want = CMat::eye(NX) * C64::new(0.0, 1.0 / big);
        assert!(max_abs(&(g - want)) < 1e-5 / big);
        // Pole expansion agrees with direct solve.
        let poles = PoleData::new(&sys).unwrap();
        for d in [-3.7, 0.0, 0.9, 12.0] {
            assert!(max_abs(&(poles.green(d) - green_function(&sys, d))) < 1e-9);
        }
    }

    #[test]
    fn mollow_sidebands_in_eigenvalues() {
        let t = Tables::new();
        let s0 = 5000.0f64;
        let omega = (s0 / 2.0).sqrt();
        let sys = build_drift(&t, &LaserField::sigma_plus(s0, 0.0));
        let poles = PoleData::new(&sys).unwrap();
        // Strong drive: a pair of eigenvalues with Im λ ≈ ±Ω_L.
        let has = |target: f64| {
            poles.lambda.iter().any(|l| (l.im - target).abs() < omega * 2e-3)
        };
        assert!(has(omega) && has(-omega));
    }

    #[test]
    fn diffusion_vanishes_without_drive() {
        let t = Tables::new();
        let sys = build_drift(&t, &LaserField::sigma_plus(0.0, 0.0));
        let x = steady_state(&sys).unwrap();
        let d = diffusion_matrix(&t, &sys, &x);
        // From the pure ground state the only nonzero entries could involve
        // raising on the left of lowering; physically all fluorescence rows
        // vanish. The dipole-dipole block that feeds the spectrum must be 0.
        for q in -1..=1 {
            for qp in -1..=1 {
                for p in 0..NX {
                    assert!(d[[dplus_index(q), p]].norm() < 1e-13 || p != dminus_index(qp));
                }
            }
        }
        // Total inelastic weight Σ_q ⟨𝒟⁺𝒟⁻⟩ − |⟨𝒟⟩|² is zero in the ground
        // state, so the spectrum carries no weight regardless of D.
    }

    #[test]
    fn mollow_sum_rules_and_elastic_fraction() {
        let t = Tables::new();
        for s0 in [0.02, 2.0, 50.0] {
            let laser = LaserField::sigma_plus(s0, 0.0);
            let s = laser.s();
            let sys = build_drift(&t, &laser);
            let poles = PoleData::new(&sys).unwrap();
            let x = steady_state(&sys).unwrap();
            let d = diffusion_matrix(&t, &sys, &x);
            // σ+ drive populates only the q = +1 dipole.
            let spec = dipole_spectrum(&sys, &poles, &d, &x, 1, 1);
            let inel = spec.inelastic.integrate().unwrap();
            // Sum rule: (1/2π)∫S_inel = ⟨𝒟⁺𝒟⁻⟩ − ⟨𝒟⁺⟩⟨𝒟⁻⟩.
            let connected =
                equal_time(&t, &x, dplus_index(1), dminus_index(1)) - spec.elastic;
            assert!((inel - connected).norm() < 1e-10, "s0={s0}");
            // Elastic fraction 1/(1+s), inelastic fraction s/(1+s).
            let total = spec.stationary().unwrap();
            assert_abs_diff_eq!((spec.elastic / total).re, 1.0 / (1.0 + s), epsilon = 1e-10);
            assert_abs_diff_eq!((inel / total).re, s / (1.0 + s), epsilon = 1e-10);
            // Other polarizations carry no light under σ+ drive.
            for q in [-1, 0] {
                let other = dipole_spectrum(&sys, &poles, &d, &x, q, q);
                assert!(other.stationary().unwrap().norm() < 1e-12);
            }
        }
    }

    #[test]
    fn mollow_triplet_shape() {
        let t = Tables::new();
        let s0 = 50.0;
        let omega = (s0 / 2.0f64).sqrt();
        let sys = build_drift(&t, &LaserField::sigma_plus(s0, 0.0));
        let poles = PoleData::new(&sys).unwrap();
        let x = steady_state(&sys).unwrap();
        let d = diffusion_matrix(&t, &sys, &x);
        let spec = dipole_spectrum(&sys, &poles, &d, &x, 1, 1);
        // Real and nonnegative density over a wide grid, with local maxima at
        // Δ ≈ 0 and ±Ω_L (the Mollow triplet).
        let n = 2001;
        let w = 3.0 * omega;
        let vals: Vec<f64> = (0..n)
            .map(|k| {
                let delta = -w + 2.0 * w * k as f64 / (n - 1) as f64;
                let z = spec.inelastic.eval(delta);
                assert!(z.im.abs() < 1e-12);
                assert!(z.re > -1e-12);
                z.re
            })
            .collect();
        let mut peaks = Vec::new();
        for k in 1..n - 1 {
            if vals[k] > vals[k - 1] && vals[k] > vals[k + 1] {
                peaks.push(-w + 2.0 * w * k as f64 / (n - 1) as f64);
            }
        }
        assert_eq!(peaks.len(), 3, "peaks at {peaks:?}");
        assert!(peaks[0] + omega < 0.2 && peaks[1].abs() < 0.2 && (peaks[2] - omega).abs() < 0.2);
    }

    #[test]
    fn einstein_relation_matches_commutator_form() {
        let t = Tables::new();
        for (s0, delta) in [(0.02, 0.0), (2.0, 0.0), (2.0, 5.0), (50.0, 0.0)] {
            let sys = build_drift(&t, &LaserField::sigma_plus(s0, delta));
            let x = steady_state(&sys).unwrap();
            let d1 = diffusion_matrix(&t, &sys, &x);
            let d2 = diffusion_matrix_commutator(&t, &x);
            assert!(max_abs(&(d1 - d2)) < 1e-11, "s0={s0}, δ={delta}");
        }
    }
}

#[cfg(test)]
mod diffusion_normalization {
    use super::*;
    use crate::algebra::NX;
    use crate::C64;

    #[test]
    fn diffusion_vs_t_contraction() {
        let t = Tables::new();
        let sys = build_drift(&t, &LaserField::sigma_plus(2.0, 0.0));
        let x = steady_state(&sys).unwrap();
        let d = diffusion_matrix(&t, &sys, &x);
        // candidate: c * sum_q T^{q+}_{aa'} T^{q-}_{bb'} <X_a' X_b'>
        let mut cand = crate::CMat::zeros((NX, NX));
        for q in -1..=1i32 {
            let tp = t.commutators.plus(q);
            let tm = t.commutators.minus(q);
            for a in 0..NX {
                for b in 0..NX {
                    let mut s = C64::new(0.0, 0.0);
                    for ap in 0..NX {
                        if tp[[a, ap]].norm() == 0.0 { continue; }
                        for bp in 0..NX {
                            if tm[[b, bp]].norm() == 0.0 { continue; }
                            s += tp[[a, ap]] * tm[[b, bp]] * equal_time(&t, &x, ap, bp);
                        }
                    }
                    cand[[a, b]] += s;
                }
            }
        }
        // The Einstein-relation diffusion matrix equals the commutator
        // contraction 4 T^{q+} T^{q-} <X X> exactly; this pins the relative
        // normalization between the same-atom and cross-atom correlators.
        let norm_d: f64 = d.iter().map(|z| z.norm()).sum();
        let diff: f64 = d.iter().zip(cand.iter()).map(|(a, b)| (a - b * 4.0).norm()).sum();
        assert!(diff / norm_d < 1e-12, "rel diff {:.3e}", diff / norm_d);
    }
}
