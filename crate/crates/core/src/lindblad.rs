//! Structure maps on the truncated GNS space and the Lindbladians built
//! from them.
//!
//! Two kinds of matrices live here:
//!
//! * [`GnsOperator`]: a linear map on `A_{Δ_n}` viewed as its GNS space,
//!   e.g. `C^{(n)}(x) = [r_n, x]`, its adjoint, and `G^{(n)} = -½ C* C`.
//! * [`Superoperator`]: a linear map on operators. The
//!   [`Flavor::GnsForm`] maps act on `B(H_n)` where `H_n` is the GNS space
//!   (`L(X) = C*XC + XG + G*X`); the [`Flavor::AlgebraForm`] maps act on
//!   `A_{Δ_n}` itself (`L(X) = Σ_j W_j*XW_j − ½{W_j*W_j, X}`).
//!
//! Every matrix uses column-stacking vectorization (see [`crate::linalg`]).
//! In that convention the matrix-unit basis of `A_{Δ_n}` is GNS-orthonormal
//! up to a common scale, so the GNS adjoint of a [`GnsOperator`] is its
//! plain conjugate transpose.

use std::fmt;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::linalg::{self, CMat};
use crate::tensor_algebra::{checked_side, Capacity, LocalOperator, ShellFamily, Window};

/// Eigenvalues of a Choi matrix at or above `-CHOI_TOL` count as
/// non-negative.
pub const CHOI_TOL: f64 = 1e-10;

/// A linear operator on the GNS space of `A_{Δ_n}`.
#[derive(Debug, Clone, PartialEq)]
pub struct GnsOperator {
    window: Window,
    local_dim: usize,
    matrix: CMat,
}

impl GnsOperator {
    pub fn new(window: Window, local_dim: usize, matrix: CMat) -> Result<Self> {
        let side = checked_side(window.side(local_dim) as usize, 2);
        if matrix.nrows() as u128 != side || matrix.ncols() as u128 != side {
            return Err(Error::DimensionMismatch(format!(
                "GNS operator must be {side}x{side}, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        Ok(GnsOperator {
            window,
            local_dim,
            matrix,
        })
    }

    pub fn window(&self) -> &Window {
        &self.window
    }

    pub fn local_dim(&self) -> usize {
        self.local_dim
    }

    pub fn matrix(&self) -> &CMat {
        &self.matrix
    }

    /// Side of the algebra elements it acts on.
    pub fn operand_side(&self) -> usize {
        self.window.side(self.local_dim) as usize
    }

    pub fn apply(&self, x: &LocalOperator) -> Result<LocalOperator> {
        if x.window() != &self.window || x.local_dim() != self.local_dim {
            return Err(Error::WindowMismatch {
                left: self.window.radius(),
                right: x.window().radius(),
            });
        }
        let out = linalg::unvec_col(&self.matrix.dot(&linalg::vec_col(x.matrix())), self.operand_side());
        LocalOperator::new(self.window.clone(), self.local_dim, out)
    }

    /// GNS adjoint.
    pub fn adjoint(&self) -> Self {
        GnsOperator {
            window: self.window.clone(),
            local_dim: self.local_dim,
            matrix: linalg::adjoint(&self.matrix),
        }
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &GnsOperator) -> Result<Self> {
        if self.window != other.window || self.local_dim != other.local_dim {
            return Err(Error::WindowMismatch {
                left: self.window.radius(),
                right: other.window.radius(),
            });
        }
        Ok(GnsOperator {
            window: self.window.clone(),
            local_dim: self.local_dim,
            matrix: self.matrix.dot(&other.matrix),
        })
    }

    pub fn scale(&self, z: f64) -> Self {
        GnsOperator {
            window: self.window.clone(),
            local_dim: self.local_dim,
            matrix: self.matrix.mapv(|v| v * z),
        }
    }
}

/// Matrix of `x ↦ [a, x]` in column-stacking order: `1 ⊗ a − aᵀ ⊗ 1`.
pub fn commutator_matrix(a: &CMat) -> CMat {
    let id = linalg::identity(a.nrows());
    linalg::kron(&id, a) - linalg::kron(&linalg::transpose(a), &id)
}

fn gns_window(r: &ShellFamily, level: usize, cap: &Capacity) -> Result<Window> {
    let window = r.window(level, cap)?;
    cap.check_superop(
        &format!("GNS space of Δ_{level}"),
        checked_side(window.side(r.local_dim()) as usize, 2),
    )?;
    Ok(window)
}

/// `C_r^{(n)}`: the matrix of `x ↦ [r_n, x]` on `A_{Δ_n}`.
pub fn shell_commutator_op(r: &ShellFamily, level: usize, cap: &Capacity) -> Result<GnsOperator> {
    let window = gns_window(r, level, cap)?;
    let rn = r.partial_sum_on(level, &window)?;
    GnsOperator::new(window, r.local_dim(), commutator_matrix(rn.matrix()))
}

/// `C_{r*}^{(n)}`: the matrix of `x ↦ [r_n*, x]`, built from the adjoint
/// shells rather than by transposing [`shell_commutator_op`].
pub fn adjoint_shell_op(r: &ShellFamily, level: usize, cap: &Capacity) -> Result<GnsOperator> {
    shell_commutator_op(&r.adjoint(), level, cap)
}

/// `G^{(n)} = −½ C_{r*}^{(n)} C_r^{(n)}`, assembled from its four Kronecker
/// terms `x ↦ −½(r*r x − r* x r − r x r* + x r r*)`.
pub fn g_op(r: &ShellFamily, level: usize, cap: &Capacity) -> Result<GnsOperator> {
    let window = gns_window(r, level, cap)?;
    let rn = r.partial_sum_on(level, &window)?;
    let a = rn.matrix();
    let a_adj = linalg::adjoint(a);
    let id = linalg::identity(a.nrows());
    let m = linalg::kron(&id, &a_adj.dot(a))
        - linalg::kron(&linalg::transpose(a), &a_adj)
        - linalg::kron(&linalg::conj(a), a)
        + linalg::kron(&linalg::transpose(&a.dot(&a_adj)), &id);
    GnsOperator::new(window, r.local_dim(), m.mapv(|z| z * -0.5))
}

fn check_time(t: f64) -> Result<()> {
    if !t.is_finite() || t < 0.0 {
        return Err(Error::InvalidTime(t));
    }
    Ok(())
}

/// `S_t^{(n)} = e^{tG^{(n)}}`.
pub fn semigroup_on_gns(g: &GnsOperator, t: f64) -> Result<GnsOperator> {
    check_time(t)?;
    Ok(GnsOperator {
        window: g.window.clone(),
        local_dim: g.local_dim,
        matrix: linalg::expm(&g.matrix.mapv(|z| z * t)),
    })
}

/// Which operator space a [`Superoperator`] acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Flavor {
    /// Acts on `B(H_n)`, operators on the GNS space of `A_{Δ_n}`.
    GnsForm,
    /// Acts on `A_{Δ_n}` directly.
    AlgebraForm,
}

impl fmt::Display for Flavor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Flavor::GnsForm => "gns_form",
            Flavor::AlgebraForm => "algebra_form",
        })
    }
}

impl Flavor {
    /// Side of the operators the flavor acts on, for a window of algebra
    /// side `s`.
    pub fn operand_side(self, algebra_side: usize) -> u128 {
        match self {
            Flavor::GnsForm => checked_side(algebra_side, 2),
            Flavor::AlgebraForm => algebra_side as u128,
        }
    }
}

/// A linear map on operators, as a matrix on their column-stacked vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Superoperator {
    window: Window,
    local_dim: usize,
    flavor: Flavor,
    matrix: CMat,
}

impl Superoperator {
    pub fn from_matrix(window: Window, local_dim: usize, flavor: Flavor, matrix: CMat) -> Result<Self> {
        let operand = flavor.operand_side(window.side(local_dim) as usize);
        let side = operand.saturating_mul(operand);
        if matrix.nrows() as u128 != side || matrix.ncols() as u128 != side {
            return Err(Error::DimensionMismatch(format!(
                "{flavor} superoperator must be {side}x{side}, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        Ok(Superoperator {
            window,
            local_dim,
            flavor,
            matrix,
        })
    }

    pub fn window(&self) -> &Window {
        &self.window
    }

    pub fn local_dim(&self) -> usize {
        self.local_dim
    }

    pub fn flavor(&self) -> Flavor {
        self.flavor
    }

    pub fn matrix(&self) -> &CMat {
        &self.matrix
    }

    pub fn operand_side(&self) -> usize {
        self.flavor.operand_side(self.window.side(self.local_dim) as usize) as usize
    }

    pub fn apply(&self, x: &CMat) -> Result<CMat> {
        let d = self.operand_side();
        if x.dim() != (d, d) {
            return Err(Error::DimensionMismatch(format!(
                "operand is {}x{}, {} superoperator expects {d}x{d}",
                x.nrows(),
                x.ncols(),
                self.flavor
            )));
        }
        Ok(linalg::unvec_col(&self.matrix.dot(&linalg::vec_col(x)), d))
    }

    fn check_compatible(&self, other: &Superoperator) -> Result<()> {
        if self.flavor != other.flavor {
            return Err(Error::FlavorMismatch {
                left: self.flavor.to_string(),
                right: other.flavor.to_string(),
            });
        }
        if self.window != other.window || self.local_dim != other.local_dim {
            return Err(Error::WindowMismatch {
                left: self.window.radius(),
                right: other.window.radius(),
            });
        }
        Ok(())
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Superoperator) -> Result<Self> {
        self.check_compatible(other)?;
        Ok(Superoperator {
            matrix: self.matrix.dot(&other.matrix),
            ..self.clone()
        })
    }

    pub fn add(&self, other: &Superoperator) -> Result<Self> {
        self.check_compatible(other)?;
        Ok(Superoperator {
            matrix: &self.matrix + &other.matrix,
            ..self.clone()
        })
    }

    pub fn sub(&self, other: &Superoperator) -> Result<Self> {
        self.check_compatible(other)?;
        Ok(Superoperator {
            matrix: &self.matrix - &other.matrix,
            ..self.clone()
        })
    }

    pub fn scale(&self, z: f64) -> Self {
        Superoperator {
            matrix: self.matrix.mapv(|v| v * z),
            ..self.clone()
        }
    }

    pub fn identity_map(window: Window, local_dim: usize, flavor: Flavor) -> Self {
        let d = flavor.operand_side(window.side(local_dim) as usize) as usize;
        Superoperator {
            window,
            local_dim,
            flavor,
            matrix: linalg::identity(d * d),
        }
    }

    /// `‖L(I)‖` in operator norm; zero for a conservative generator.
    pub fn annihilation_defect(&self) -> f64 {
        let d = self.operand_side();
        linalg::op_norm(&self.apply(&linalg::identity(d)).expect("operand side"))
    }

    /// `‖T(I) − I‖` in operator norm; zero for a unital map.
    pub fn identity_defect(&self) -> f64 {
        let d = self.operand_side();
        let id = linalg::identity(d);
        linalg::op_norm(&(self.apply(&id).expect("operand side") - id))
    }
}

/// Matrix-free form of `L(X) = Σ_j W_j* X W_j − ½(W_j*W_j X + X W_j*W_j)`.
///
/// Works on any window containing the shells, which is how the
/// multi-site studies avoid forming the full superoperator.
#[derive(Debug, Clone)]
pub struct AlgebraGenerator {
    terms: Vec<(CMat, CMat, CMat)>,
    side: usize,
}

impl AlgebraGenerator {
    /// Shells of level `≤ n` embedded into `target`.
    pub fn new(shells: &ShellFamily, level: usize, target: &Window) -> Result<Self> {
        let terms = shells
            .embedded_terms(level, target)?
            .into_iter()
            .map(|(_, w)| {
                let w = w.into_matrix();
                let w_adj = linalg::adjoint(&w);
                let ww = w_adj.dot(&w);
                (w, w_adj, ww)
            })
            .collect();
        Ok(AlgebraGenerator {
            terms,
            side: target.side(shells.local_dim()) as usize,
        })
    }

    pub fn apply(&self, x: &CMat) -> CMat {
        let mut out = Array2::zeros((self.side, self.side));
        for (w, w_adj, ww) in &self.terms {
            out += &w_adj.dot(x).dot(w);
            out.scaled_add(linalg::c(-0.5), &ww.dot(x));
            out.scaled_add(linalg::c(-0.5), &x.dot(ww));
        }
        out
    }

    /// Bound on the operator norm of `L` in any unitarily invariant norm.
    pub fn norm_bound(&self) -> f64 {
        self.terms
            .iter()
            .map(|(w, _, _)| 2.0 * linalg::frobenius(w).powi(2))
            .sum()
    }

    /// `e^{tL}(X)` without forming the superoperator.
    pub fn evolve(&self, x: &CMat, t: f64) -> Result<CMat> {
        check_time(t)?;
        Ok(linalg::expm_action(|v| self.apply(v), self.norm_bound(), t, x))
    }

    /// The superoperator matrix, column-stacking.
    pub fn matrix(&self) -> CMat {
        let n = self.side;
        let id = linalg::identity(n);
        let mut m = Array2::zeros((n * n, n * n));
        for (w, w_adj, ww) in &self.terms {
            m += &linalg::kron(&linalg::transpose(w), w_adj);
            m.scaled_add(linalg::c(-0.5), &linalg::kron(&id, ww));
            m.scaled_add(linalg::c(-0.5), &linalg::kron(&linalg::transpose(ww), &id));
        }
        m
    }
}

/// Lindbladian on `B(H_n)`: `L(X) = C*XC + XG + G*X` with `C = C_r^{(n)}`
/// and `G = G^{(n)}`.
pub fn lindblad_form_superop(r: &ShellFamily, level: usize, cap: &Capacity) -> Result<Superoperator> {
    let window = r.window(level, cap)?;
    let operand = Flavor::GnsForm.operand_side(window.side(r.local_dim()) as usize);
    cap.check_superop(
        &format!("gns_form superoperator on Δ_{level}"),
        operand.saturating_mul(operand),
    )?;
    let c_op = shell_commutator_op(r, level, cap)?;
    let g = g_op(r, level, cap)?;
    let c_mat = c_op.matrix();
    let g_mat = g.matrix();
    let id = linalg::identity(c_mat.nrows());
    let m = linalg::kron(&linalg::transpose(c_mat), &linalg::adjoint(c_mat))
        + linalg::kron(&linalg::transpose(g_mat), &id)
        + linalg::kron(&id, &linalg::adjoint(g_mat));
    Superoperator::from_matrix(window, r.local_dim(), Flavor::GnsForm, m)
}

/// Lindbladian on `A_{Δ_n}`:
/// `L(X) = ½ Σ_{j≤n} (W_j*[X, W_j] + [W_j*, X] W_j)`.
pub fn algebra_lindblad_superop(shells: &ShellFamily, level: usize, cap: &Capacity) -> Result<Superoperator> {
    let window = shells.window(level, cap)?;
    let side = window.side(shells.local_dim());
    cap.check_superop(
        &format!("algebra_form superoperator on Δ_{level}"),
        side.saturating_mul(side),
    )?;
    let generator = AlgebraGenerator::new(shells, level, &window)?;
    Superoperator::from_matrix(window, shells.local_dim(), Flavor::AlgebraForm, generator.matrix())
}

/// `T_t = e^{tL}`.
pub fn semigroup(l: &Superoperator, t: f64) -> Result<Superoperator> {
    check_time(t)?;
    Ok(Superoperator {
        matrix: linalg::expm(&l.matrix.mapv(|z| z * t)),
        ..l.clone()
    })
}

/// Complete-positivity and conservativity diagnostics of a map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CpReport {
    pub min_choi_eigenvalue: f64,
    /// `‖T(I) − I‖` in operator norm.
    pub identity_defect: f64,
    /// `max|J − J*|` for the Choi matrix `J`; zero iff `T` preserves
    /// adjoints.
    pub hermiticity_defect: f64,
}

impl CpReport {
    pub fn is_psd(&self, tol: f64) -> bool {
        self.min_choi_eigenvalue >= -tol
    }

    pub fn is_cp(&self) -> bool {
        self.is_psd(CHOI_TOL)
    }
}

/// Choi matrix `J = Σ_{ij} E_ij ⊗ T(E_ij)`.
pub fn choi_matrix(t: &Superoperator) -> CMat {
    let d = t.operand_side();
    let m = t.matrix();
    Array2::from_shape_fn((d * d, d * d), |(row, col)| {
        let (i, k) = (row / d, row % d);
        let (j, l) = (col / d, col % d);
        m[(k + l * d, i + j * d)]
    })
}

pub fn cp_certify(t: &Superoperator) -> CpReport {
    let choi = choi_matrix(t);
    let eig = linalg::hermitian_eigenvalues(&choi);
    CpReport {
        min_choi_eigenvalue: eig.first().copied().unwrap_or(0.0),
        identity_defect: t.identity_defect(),
        hermiticity_defect: linalg::hermiticity_defect(&choi),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{max_abs, max_abs_diff, C64};
    use crate::tensor_algebra::{gns_inner, matrix_unit_basis, pauli, Window};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sigma_x_model() -> ShellFamily {
        let (sx, _, _) = pauli();
        ShellFamily::from_site_operators(2, 1, vec![(0, sx)], &Capacity::default()).unwrap()
    }

    #[test]
    fn zero_shells_give_zero_operators() {
        let cap = Capacity::default();
        let z = ShellFamily::from_site_operators(2, 1, vec![(1, linalg::zeros(4))], &cap).unwrap();
        assert_eq!(max_abs(shell_commutator_op(&z, 1, &cap).unwrap().matrix()), 0.0);
        assert_eq!(max_abs(g_op(&z, 1, &cap).unwrap().matrix()), 0.0);
    }

    #[test]
    fn sigma_x_commutator_spectrum() {
        let cap = Capacity::default();
        let c_op = shell_commutator_op(&sigma_x_model(), 0, &cap).unwrap();
        assert_eq!(c_op.matrix().dim(), (4, 4));
        assert!(linalg::hermiticity_defect(c_op.matrix()) < 1e-15);
        let eig = linalg::hermitian_eigenvalues(c_op.matrix());
        let want = [-2.0, 0.0, 0.0, 2.0];
        for (g, w) in eig.iter().zip(want) {
            assert!((g - w).abs() < 1e-12, "{eig:?}");
        }
    }

    #[test]
    fn commutator_op_matches_defining_action_on_basis() {
        let cap = Capacity::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let r = ShellFamily::random(&mut rng, 2, 1, &[1], &cap).unwrap();
        let c_op = shell_commutator_op(&r, 1, &cap).unwrap();
        let rn = r.partial_sum(1, &cap).unwrap();
        for x in matrix_unit_basis(c_op.window(), 2) {
            let want = crate::tensor_algebra::commutator(&rn, &x).unwrap();
            assert!(c_op.apply(&x).unwrap().max_diff(&want).unwrap() < 1e-12);
        }
    }

    #[test]
    fn adjoint_op_pairs_with_commutator_op_under_gns_inner() {
        let cap = Capacity::default();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let r = ShellFamily::random(&mut rng, 2, 1, &[0, 1], &cap).unwrap();
        let c_op = shell_commutator_op(&r, 1, &cap).unwrap();
        let c_adj = adjoint_shell_op(&r, 1, &cap).unwrap();
        let basis = matrix_unit_basis(c_op.window(), 2);
        for x in basis.iter().step_by(5) {
            let cx = c_adj.apply(x).unwrap();
            for y in basis.iter().step_by(3) {
                let lhs = gns_inner(&cx, y).unwrap();
                let rhs = gns_inner(x, &c_op.apply(y).unwrap()).unwrap();
                assert!((lhs - rhs).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn adjoint_op_is_conjugate_transpose_for_non_hermitian_shell() {
        let cap = Capacity::default();
        let (sx, _, sz) = pauli();
        let w = &sx + &sz.mapv(|z| z * linalg::I);
        let r = ShellFamily::from_site_operators(2, 1, vec![(0, w)], &cap).unwrap();
        let c_op = shell_commutator_op(&r, 0, &cap).unwrap();
        let c_adj = adjoint_shell_op(&r, 0, &cap).unwrap();
        assert!(max_abs_diff(c_adj.matrix(), &linalg::adjoint(c_op.matrix())) < 1e-15);
        // and not trivially equal to C itself
        assert!(max_abs_diff(c_adj.matrix(), c_op.matrix()) > 0.5);
    }

    #[test]
    fn self_adjoint_shells_have_equal_adjoint_op() {
        let cap = Capacity::default();
        let r = sigma_x_model();
        assert_eq!(
            shell_commutator_op(&r, 0, &cap).unwrap(),
            adjoint_shell_op(&r, 0, &cap).unwrap()
        );
    }

    #[test]
    fn g_op_matches_product_of_commutator_ops() {
        let cap = Capacity::default();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let r = ShellFamily::random(&mut rng, 2, 1, &[0, 1], &cap).unwrap();
        let prod = adjoint_shell_op(&r, 1, &cap)
            .unwrap()
            .compose(&shell_commutator_op(&r, 1, &cap).unwrap())
            .unwrap()
            .scale(-0.5);
        let g = g_op(&r, 1, &cap).unwrap();
        assert!(max_abs_diff(g.matrix(), prod.matrix()) < 1e-12);
        assert!(linalg::hermiticity_defect(g.matrix()) < 1e-12);
        assert!(*linalg::hermitian_eigenvalues(g.matrix()).last().unwrap() <= 1e-12);
    }

    #[test]
    fn sigma_x_g_and_semigroup_spectra() {
        let cap = Capacity::default();
        let g = g_op(&sigma_x_model(), 0, &cap).unwrap();
        let eig = linalg::hermitian_eigenvalues(g.matrix());
        for (e, w) in eig.iter().zip([-2.0, -2.0, 0.0, 0.0]) {
            assert!((e - w).abs() < 1e-12);
        }
        let t = 0.37;
        let s = semigroup_on_gns(&g, t).unwrap();
        let eig = linalg::hermitian_eigenvalues(s.matrix());
        let decay = (-2.0 * t).exp();
        for (e, w) in eig.iter().zip([decay, decay, 1.0, 1.0]) {
            assert!((e - w).abs() < 1e-12);
        }
        assert!(linalg::op_norm(s.matrix()) <= 1.0 + 1e-10);
        assert_eq!(semigroup_on_gns(&g, 0.0).unwrap().matrix(), &linalg::identity(4));
        assert!(matches!(semigroup_on_gns(&g, f64::NAN), Err(Error::InvalidTime(_))));
    }

    #[test]
    fn gns_semigroup_law() {
        let cap = Capacity::default();
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let r = ShellFamily::random(&mut rng, 2, 1, &[1], &cap).unwrap();
        let g = g_op(&r, 1, &cap).unwrap();
        let (s, t) = (0.13, 0.29);
        let lhs = semigroup_on_gns(&g, s)
            .unwrap()
            .compose(&semigroup_on_gns(&g, t).unwrap())
            .unwrap();
        let rhs = semigroup_on_gns(&g, s + t).unwrap();
        assert!(max_abs_diff(lhs.matrix(), rhs.matrix()) < 1e-10);
    }

    #[test]
    fn lindblad_form_annihilates_identity_and_commutant() {
        let cap = Capacity::default();
        let r = sigma_x_model();
        let l = lindblad_form_superop(&r, 0, &cap).unwrap();
        assert_eq!(l.flavor(), Flavor::GnsForm);
        assert_eq!(l.matrix().dim(), (16, 16));
        assert!(l.annihilation_defect() < 1e-12);
        let c_op = shell_commutator_op(&r, 0, &cap).unwrap();
        assert!(max_abs(&l.apply(c_op.matrix()).unwrap()) < 1e-12);
    }

    #[test]
    fn lindblad_form_matches_sesquilinear_terms() {
        let cap = Capacity::default();
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let r = ShellFamily::random(&mut rng, 2, 1, &[0], &cap).unwrap();
        let l = lindblad_form_superop(&r, 0, &cap).unwrap();
        let c_op = shell_commutator_op(&r, 0, &cap).unwrap();
        let g = g_op(&r, 0, &cap).unwrap();
        let (c_m, g_m) = (c_op.matrix(), g.matrix());
        let inner = |a: &ndarray::Array1<C64>, b: &ndarray::Array1<C64>| -> C64 {
            a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum()
        };
        for _ in 0..5 {
            let x = linalg::random_matrix(&mut rng, 4, 4);
            let u = linalg::random_matrix(&mut rng, 4, 1).column(0).to_owned();
            let v = linalg::random_matrix(&mut rng, 4, 1).column(0).to_owned();
            let lhs = inner(&u, &l.apply(&x).unwrap().dot(&v));
            let rhs = inner(&u, &x.dot(&g_m.dot(&v)))
                + inner(&g_m.dot(&u), &x.dot(&v))
                + inner(&c_m.dot(&u), &x.dot(&c_m.dot(&v)));
            assert!((lhs - rhs).norm() < 1e-12);
        }
    }

    #[test]
    fn lindblad_form_entries_match_term_by_term_oracle() {
        let cap = Capacity::default();
        let r = sigma_x_model();
        let l = lindblad_form_superop(&r, 0, &cap).unwrap();
        let c_m = shell_commutator_op(&r, 0, &cap).unwrap().matrix().clone();
        let g_m = linalg::adjoint(&c_m).dot(&c_m).mapv(|z| z * -0.5);
        // rank-one left-multiplication unit E_{ab}: L(E)_{kl} by explicit index sums
        for a in 0..4 {
            for b in 0..4 {
                let mut e = linalg::zeros(4);
                e[(a, b)] = linalg::ONE;
                let got = l.apply(&e).unwrap();
                for k in 0..4 {
                    for q in 0..4 {
                        let jump = c_m[(a, k)].conj() * c_m[(b, q)];
                        let right = if k == a { g_m[(b, q)] } else { linalg::ZERO };
                        let left = if q == b { g_m[(a, k)].conj() } else { linalg::ZERO };
                        assert!((got[(k, q)] - (jump + right + left)).norm() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn algebra_lindblad_sigma_x() {
        let cap = Capacity::default();
        let (_, _, sz) = pauli();
        let l = algebra_lindblad_superop(&sigma_x_model(), 0, &cap).unwrap();
        assert_eq!(l.apply(&linalg::identity(2)).unwrap(), linalg::zeros(2));
        let out = l.apply(&sz).unwrap();
        assert!(max_abs_diff(&out, &sz.mapv(|z| z * -2.0)) < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let x = linalg::random_matrix(&mut rng, 2, 2);
        let (sx, _, _) = pauli();
        let want = sx.dot(&x).dot(&sx) - &x;
        assert!(max_abs_diff(&l.apply(&x).unwrap(), &want) < 1e-14);
    }

    #[test]
    fn algebra_lindblad_is_stable_under_enlargement() {
        let cap = Capacity::default();
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let r = ShellFamily::random(&mut rng, 2, 1, &[0, 1], &cap).unwrap();
        let l1 = algebra_lindblad_superop(&r, 1, &cap).unwrap();
        let big = Window::new(2, 1).unwrap();
        let gen_big = AlgebraGenerator::new(&r, 1, &big).unwrap();
        let x = LocalOperator::new(l1.window().clone(), 2, linalg::random_matrix(&mut rng, 8, 8)).unwrap();
        let lx = LocalOperator::new(l1.window().clone(), 2, l1.apply(x.matrix()).unwrap()).unwrap();
        let got = gen_big.apply(x.embed_into(&big).unwrap().matrix());
        assert!(max_abs_diff(&got, lx.embed_into(&big).unwrap().matrix()) < 1e-12);
    }

    #[test]
    fn semigroup_sigma_x_decay() {
        let cap = Capacity::default();
        let (_, _, sz) = pauli();
        let l = algebra_lindblad_superop(&sigma_x_model(), 0, &cap).unwrap();
        for t in [0.1, 0.5, 1.0] {
            let tt = semigroup(&l, t).unwrap();
            let got = tt.apply(&sz).unwrap();
            assert!(max_abs_diff(&got, &sz.mapv(|z| z * (-2.0 * t).exp())) < 1e-12);
            assert!(tt.identity_defect() < 1e-10);
        }
        assert_eq!(semigroup(&l, 0.0).unwrap().matrix(), &linalg::identity(4));
        assert!(matches!(semigroup(&l, f64::INFINITY), Err(Error::InvalidTime(_))));
    }

    #[test]
    fn algebra_generator_action_matches_dense_semigroup() {
        let cap = Capacity::default();
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let r = ShellFamily::random(&mut rng, 2, 1, &[0, 1], &cap).unwrap();
        let l = algebra_lindblad_superop(&r, 1, &cap).unwrap();
        let generator = AlgebraGenerator::new(&r, 1, l.window()).unwrap();
        let x = linalg::random_matrix(&mut rng, 8, 8);
        let want = semigroup(&l, 0.4).unwrap().apply(&x).unwrap();
        let got = generator.evolve(&x, 0.4).unwrap();
        assert!(max_abs_diff(&got, &want) / max_abs(&want) < 1e-11);
    }

    #[test]
    fn flavors_do_not_mix() {
        let cap = Capacity::default();
        let r = sigma_x_model();
        let a = algebra_lindblad_superop(&r, 0, &cap).unwrap();
        let w = a.window().clone();
        let b = Superoperator::from_matrix(w, 2, Flavor::GnsForm, linalg::zeros(16)).unwrap();
        assert!(matches!(a.compose(&b), Err(Error::FlavorMismatch { .. })));
        assert!(matches!(a.add(&b), Err(Error::FlavorMismatch { .. })));
    }

    #[test]
    fn gns_form_is_capped_to_single_site() {
        let cap = Capacity::default();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let r = ShellFamily::random(&mut rng, 2, 1, &[1], &cap).unwrap();
        assert!(matches!(
            lindblad_form_superop(&r, 1, &cap),
            Err(Error::Capacity { .. })
        ));
    }

    #[test]
    fn cp_certify_identity_and_transpose() {
        let w = Window::new(0, 1).unwrap();
        let id = Superoperator::identity_map(w.clone(), 2, Flavor::AlgebraForm);
        let rep = cp_certify(&id);
        assert!(rep.min_choi_eigenvalue.abs() < 1e-12);
        assert!(rep.is_cp());
        let choi = choi_matrix(&id);
        let eig = linalg::hermitian_eigenvalues(&choi);
        assert!((eig[3] - 2.0).abs() < 1e-12 && eig[2].abs() < 1e-12);

        // transpose: vec(Xᵀ) = P vec(X)
        let mut p = linalg::zeros(4);
        for i in 0..2 {
            for j in 0..2 {
                p[(j + i * 2, i + j * 2)] = linalg::ONE;
            }
        }
        let tr = Superoperator::from_matrix(w, 2, Flavor::AlgebraForm, p).unwrap();
        let rep = cp_certify(&tr);
        assert!((rep.min_choi_eigenvalue + 1.0).abs() < 1e-12);
        assert!(!rep.is_cp());
        assert!(rep.identity_defect < 1e-15);
    }

    #[test]
    fn sigma_x_gns_semigroup_is_cp() {
        let cap = Capacity::default();
        let l = lindblad_form_superop(&sigma_x_model(), 0, &cap).unwrap();
        let rep = cp_certify(&semigroup(&l, 0.3).unwrap());
        assert_eq!(choi_matrix(&semigroup(&l, 0.3).unwrap()).dim(), (16, 16));
        assert!(rep.is_cp(), "{rep:?}");
        assert!(rep.identity_defect < 1e-10);
        assert!(rep.hermiticity_defect < 1e-12);
    }
}
