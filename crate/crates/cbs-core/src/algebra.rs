//! Exact operator algebra for a single `J_g = 0 → J_e = 1` atom.
//!
//! The atom has four internal states, ordered `{|0 0⟩, |1 −1⟩, |1 0⟩, |1 +1⟩}`.
//! Its operator space is spanned by 16 elementary operators:
//!
//! ```text
//!   Π^g           = |0 0⟩⟨0 0|                 (ground projector)
//!   Π^e_{m m′}    = |1 m⟩⟨1 m′|                (excited populations/coherences)
//!   𝒟^+_m         = |1 m⟩⟨0 0|                 (raising dipole components)
//!   𝒟^−_m         = |0 0⟩⟨1 m|                 (lowering dipole components)
//! ```
//!
//! Since `Π^g + Σ_m Π^e_{mm} = 𝟙`, one population is redundant; the dynamics
//! closes on the 15 traceless operators collected in the canonical column
//! vector `X`:
//!
//! ```text
//!   X = [Π^z_{−1}, Π^z_0, Π^z_{+1},
//!        Π^e_{−1,0}, Π^e_{−1,+1}, Π^e_{0,−1}, Π^e_{0,+1}, Π^e_{+1,−1}, Π^e_{+1,0},
//!        𝒟^+_{−1}, 𝒟^+_0, 𝒟^+_{+1}, 𝒟^−_{−1}, 𝒟^−_0, 𝒟^−_{+1}]
//! ```
//!
//! with `Π^z_m = (Π^e_{mm} − Π^g)/2`. Every matrix in the crate (drift,
//! diffusion, Green's functions, commutator tables, …) uses this ordering.
//!
//! All tables in this module are computed numerically from the dense 4×4
//! representation — the 4×4 matrices are the ground truth, and reconstruction
//! tests demand exact agreement at double precision.
//!
//! Spherical-basis conventions: `ε_{±1} = ∓(x̂ ± iŷ)/√2`, `ε_0 = ẑ`, with the
//! conjugation rule `ε̄_q = (−1)^q ε_{−q}`.

use crate::error::{Error, Result};
use crate::{C64, CMat, CVec};
use ndarray::{Array3, s};
use ndarray_linalg::Inverse;

/// Number of traceless basis operators.
pub const NX: usize = 15;

/// Hilbert-space dimension of one atom.
pub const DIM: usize = 4;

/// Complex zero.
pub(crate) const ZERO: C64 = C64::new(0.0, 0.0);
/// Complex one.
pub(crate) const ONE: C64 = C64::new(1.0, 0.0);

/// State index of the excited sublevel `|1 m⟩` for `m ∈ {−1, 0, +1}`
/// (the ground state `|0 0⟩` is index 0).
#[inline]
pub fn state_index(m: i32) -> usize {
    debug_assert!((-1..=1).contains(&m));
    (m + 2) as usize
}

/// Position of `Π^z_m` in the canonical `X` vector.
#[inline]
pub fn piz_index(m: i32) -> usize {
    (m + 1) as usize
}

/// Position of the excited coherence `Π^e_{m m′}` (`m ≠ m′`) in `X`.
#[inline]
pub fn pie_index(m: i32, mp: i32) -> usize {
    debug_assert_ne!(m, mp);
    // Row-major over ordered pairs (−1,0),(−1,+1),(0,−1),(0,+1),(+1,−1),(+1,0).
    let row = (m + 1) as usize;
    let col = (mp + 1) as usize;
    let off = if col > row { col - 1 } else { col };
    3 + row * 2 + off
}

/// Position of the raising dipole `𝒟^+_q` in `X`.
#[inline]
pub fn dplus_index(q: i32) -> usize {
    (9 + (q + 1)) as usize
}

/// Position of the lowering dipole `𝒟^−_q` in `X`.
#[inline]
pub fn dminus_index(q: i32) -> usize {
    (12 + (q + 1)) as usize
}

/// Index of the adjoint: `X_i† = X_{adjoint_index(i)}`.
///
/// `Π^z_m` and the population combinations are self-adjoint; `Π^e_{m m′}`
/// maps to `Π^e_{m′ m}`, and `𝒟^+_q ↔ 𝒟^−_q`.
pub fn adjoint_index(i: usize) -> usize {
    match i {
        0..=2 => i,
        3..=8 => {
            let (m, mp) = PIE_PAIRS[i - 3];
            pie_index(mp, m)
        }
        9..=11 => i + 3,
        12..=14 => i - 3,
        _ => panic!("basis index out of range"),
    }
}

/// The ordered `(m, m′)` pairs of the excited coherences in `X`.
pub const PIE_PAIRS: [(i32, i32); 6] = [(-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0)];

/// Matrix unit `|r⟩⟨c|` as a dense 4×4 matrix.
fn unit(r: usize, c: usize) -> CMat {
    let mut m = CMat::zeros((DIM, DIM));
    m[[r, c]] = ONE;
    m
}

/// The 16 elementary operators and the canonical traceless vector `X`,
/// together with the expansion machinery that projects an arbitrary 4×4
/// operator back onto `{𝟙, X}`.
#[derive(Debug, Clone)]
pub struct OperatorBasis {
    /// Ground-state projector `Π^g`.
    pub pi_g: CMat,
    /// Total excited projector `Π^e = Σ_m Π^e_{mm}`.
    pub pi_e: CMat,
    /// The 15 canonical traceless operators, in `X` order.
    pub x: Vec<CMat>,
    /// Inverse of the 16×16 matrix whose columns are `vec(𝟙), vec(X_1), …`;
    /// multiplying it into `vec(A)` yields the expansion coefficients of `A`.
    expand_inv: CMat,
}

impl OperatorBasis {
    /// Build the basis. Deterministic; all entries are exact small rationals.
    pub fn new() -> Self {
        let pi_g = unit(0, 0);
        let mut pi_e = CMat::zeros((DIM, DIM));
        for m in -1..=1 {
            pi_e = pi_e + unit(state_index(m), state_index(m));
        }

        let mut x: Vec<CMat> = Vec::with_capacity(NX);
        // Π^z_m = (Π^e_{mm} − Π^g)/2
        for m in -1..=1 {
            let op = (unit(state_index(m), state_index(m)) - &pi_g) * C64::new(0.5, 0.0);
            x.push(op);
        }
        // Excited coherences.
        for &(m, mp) in PIE_PAIRS.iter() {
            x.push(unit(state_index(m), state_index(mp)));
        }
        // 𝒟^+_q = |1 q⟩⟨0 0|.
        for q in -1..=1 {
            x.push(unit(state_index(q), 0));
        }
        // 𝒟^−_q = |0 0⟩⟨1 q|.
        for q in -1..=1 {
            x.push(unit(0, state_index(q)));
        }

        // Expansion matrix: columns are vec(𝟙) and vec(X_i).
        let mut b = CMat::zeros((DIM * DIM, NX + 1));
        let eye = CMat::eye(DIM);
        for (col, op) in std::iter::once(&eye).chain(x.iter()).enumerate() {
            for r in 0..DIM {
                for c in 0..DIM {
                    b[[r * DIM + c, col]] = op[[r, c]];
                }
            }
        }
        let expand_inv = b.inv().expect("the extended operator basis is nonsingular");

        Self { pi_g, pi_e, x, expand_inv }
    }

    /// Expand an arbitrary 4×4 operator as `A = c₀·𝟙 + Σ_j c_j X_j`.
    ///
    /// Returns `(c₀, [c_1 … c_15])`. Exact up to rounding in one 16×16
    /// matrix-vector product.
    pub fn expand(&self, a: &CMat) -> (C64, CVec) {
        let mut v = CVec::zeros(DIM * DIM);
        for r in 0..DIM {
            for c in 0..DIM {
                v[r * DIM + c] = a[[r, c]];
            }
        }
        let coeffs = self.expand_inv.dot(&v);
        (coeffs[0], coeffs.slice(s![1..]).to_owned())
    }

    /// Expectation value of an arbitrary 4×4 operator in a state described by
    /// the mean vector `⟨X⟩`: `⟨A⟩ = c₀ + Σ_j c_j ⟨X_j⟩`.
    pub fn expectation(&self, a: &CMat, x_mean: &CVec) -> C64 {
        let (c0, c) = self.expand(a);
        c0 + c.dot(x_mean)
    }

    /// Reconstruct the density matrix from `⟨X⟩`.
    ///
    /// Solves `S c = ⟨X⟩` with the trace Gram matrix `S_ij = Tr(X_i X_j)`
    /// (the basis is not trace-orthogonal) and returns
    /// `ρ = 𝟙/4 + Σ_ij (S^{-1})_{ij} ⟨X_j⟩ X_i`, the unique operator with unit
    /// trace reproducing all 15 means.
    pub fn density_from_mean(&self, x_mean: &CVec) -> CMat {
        use ndarray_linalg::Solve;
        let mut s_mat = CMat::zeros((NX, NX));
        for i in 0..NX {
            for j in 0..NX {
                s_mat[[i, j]] = self.x[i].dot(&self.x[j]).diag().sum();
            }
        }
        let c = s_mat.solve(x_mean).expect("trace form is nondegenerate");
        let mut rho = CMat::eye(DIM) * C64::new(0.25, 0.0);
        for i in 0..NX {
            rho = rho + &self.x[i] * c[i];
        }
        rho
    }
}

impl Default for OperatorBasis {
    fn default() -> Self {
        Self::new()
    }
}

/// Multiplication table of the traceless basis:
/// `X_i X_j = c_{ij}·𝟙 + Σ_k ε_{ij}^k X_k`.
#[derive(Debug, Clone)]
pub struct StructureTable {
    /// Identity coefficients `c_{ij} = Tr(X_i X_j)/4`.
    pub id_coeff: CMat,
    /// Structure constants `ε_{ij}^k`, indexed `[i, j, k]`.
    pub eps: Array3<C64>,
}

/// Compute the full multiplication table by dense 4×4 products and exact
/// re-expansion.
pub fn structure_constants(basis: &OperatorBasis) -> StructureTable {
    let mut id_coeff = CMat::zeros((NX, NX));
    let mut eps = Array3::zeros((NX, NX, NX));
    for i in 0..NX {
        for j in 0..NX {
            let prod = basis.x[i].dot(&basis.x[j]);
            let (c0, c) = basis.expand(&prod);
            id_coeff[[i, j]] = c0;
            for k in 0..NX {
                eps[[i, j, k]] = c[k];
            }
        }
    }
    StructureTable { id_coeff, eps }
}

impl StructureTable {
    /// Expansion of the product `X_i X_j` as `(identity coeff, X coeffs)`.
    pub fn product(&self, i: usize, j: usize) -> (C64, CVec) {
        (self.id_coeff[[i, j]], self.eps.slice(s![i, j, ..]).to_owned())
    }
}

/// Commutator tables `T^{q±}`: six 15×15 matrices with
/// `[X_i, 𝒟^±_q] = ±2 Σ_j (T^{q±})_{ij} X_j`.
///
/// Commutators are traceless, so no identity component arises.
#[derive(Debug, Clone)]
pub struct CommutatorTable {
    /// `T^{q+}` for `q = −1, 0, +1` (index `q + 1`).
    pub t_plus: [CMat; 3],
    /// `T^{q−}` for `q = −1, 0, +1` (index `q + 1`).
    pub t_minus: [CMat; 3],
}

impl CommutatorTable {
    /// `T^{q+}` by signed spherical index.
    #[inline]
    pub fn plus(&self, q: i32) -> &CMat {
        &self.t_plus[(q + 1) as usize]
    }
    /// `T^{q−}` by signed spherical index.
    #[inline]
    pub fn minus(&self, q: i32) -> &CMat {
        &self.t_minus[(q + 1) as usize]
    }
}

/// Compute the commutator tables from dense 4×4 commutators.
pub fn commutator_tables(basis: &OperatorBasis) -> CommutatorTable {
    let mut t_plus: [CMat; 3] = std::array::from_fn(|_| CMat::zeros((NX, NX)));
    let mut t_minus: [CMat; 3] = std::array::from_fn(|_| CMat::zeros((NX, NX)));
    for q in -1..=1i32 {
        for (sign, d_idx, table) in [
            (1.0, dplus_index(q), &mut t_plus),
            (-1.0, dminus_index(q), &mut t_minus),
        ] {
            let d = basis.x[d_idx].clone();
            for i in 0..NX {
                let comm = basis.x[i].dot(&d) - d.dot(&basis.x[i]);
                let (c0, c) = basis.expand(&comm);
                debug_assert!(c0.norm() < 1e-14, "commutators are traceless");
                for j in 0..NX {
                    // [X_i, 𝒟^±_q] = ±2 T^{q±}_{ij} X_j.
                    table[(q + 1) as usize][[i, j]] = c[j] * C64::new(0.5 * sign, 0.0);
                }
            }
        }
    }
    CommutatorTable { t_plus, t_minus }
}

/// Spherical components `v_q = ε_q · v` of a real Cartesian vector
/// (plain bilinear contraction, no conjugation), indexed `q + 1`.
pub fn spherical_components(v: [f64; 3]) -> [C64; 3] {
    let [x, y, z] = v;
    let r2 = std::f64::consts::FRAC_1_SQRT_2;
    [
        C64::new(x * r2, -y * r2),  // ε_{−1}·v = (x − iy)/√2
        C64::new(z, 0.0),           // ε_0·v = z
        C64::new(-x * r2, -y * r2), // ε_{+1}·v = −(x + iy)/√2
    ]
}

/// Projector onto the plane transverse to the unit vector `u`, in the
/// spherical basis: `𝒫^u_{qq′} = δ_{qq′} − (−1)^q u_{−q} u_{q′}`.
///
/// Rows/columns are indexed `q + 1` for `q = −1, 0, +1`. The matrix is
/// Hermitian, idempotent, has trace 2, and annihilates the direction `u`
/// itself: acting on the conjugate components `ū_q = (−1)^q u_{−q} = ε̄_q·u`
/// it gives zero, which is the statement `(𝟙 − ûû^T)û = 0` transported to the
/// spherical basis.
pub fn transverse_projector(u: [f64; 3]) -> Result<CMat> {
    let norm2 = u[0] * u[0] + u[1] * u[1] + u[2] * u[2];
    if (norm2.sqrt() - 1.0).abs() > 1e-12 {
        return Err(Error::NonUnitDirection);
    }
    let uq = spherical_components(u);
    let mut p = CMat::eye(3);
    for q in -1..=1i32 {
        for qp in -1..=1i32 {
            let sign = if q % 2 == 0 { 1.0 } else { -1.0 };
            p[[(q + 1) as usize, (qp + 1) as usize]] -=
                C64::new(sign, 0.0) * uq[(-q + 1) as usize] * uq[(qp + 1) as usize];
        }
    }
    Ok(p)
}

/// The isotropic angular average of the transverse projector, `(2/3)δ_{qq′}`.
pub fn isotropic_projector() -> CMat {
    CMat::eye(3) * C64::new(2.0 / 3.0, 0.0)
}
