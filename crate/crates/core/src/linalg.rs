//! Dense complex matrix helpers shared by every other module.
//!
//! Matrices are `ndarray::Array2<Complex64>`. Vectorization of a matrix is
//! always column-stacking: `vec(x)[i + j * n] = x[(i, j)]`, so that
//! `vec(a · x · b) = (bᵀ ⊗ a) · vec(x)`.

use ndarray::{linalg::kron as nd_kron, s, Array1, Array2, ArrayView2, Axis};
pub use num_complex::Complex64 as C64;
use rand::Rng;

pub type CMat = Array2<C64>;
pub type CVec = Array1<C64>;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

#[inline]
pub fn c(re: f64) -> C64 {
    C64::new(re, 0.0)
}

pub fn identity(n: usize) -> CMat {
    Array2::from_diag_elem(n, ONE)
}

pub fn zeros(n: usize) -> CMat {
    Array2::zeros((n, n))
}

pub fn kron(a: &CMat, b: &CMat) -> CMat {
    nd_kron(a, b)
}

/// Conjugate transpose.
pub fn adjoint(a: &CMat) -> CMat {
    a.t().mapv(|z| z.conj())
}

/// Entrywise complex conjugate.
pub fn conj(a: &CMat) -> CMat {
    a.mapv(|z| z.conj())
}

pub fn transpose(a: &CMat) -> CMat {
    a.t().to_owned()
}

pub fn trace(a: &CMat) -> C64 {
    a.diag().sum()
}

pub fn commutator(a: &CMat, b: &CMat) -> CMat {
    a.dot(b) - b.dot(a)
}

/// Column-stacking vectorization.
pub fn vec_col(x: &CMat) -> CVec {
    let (rows, cols) = x.dim();
    let mut out = Array1::zeros(rows * cols);
    for j in 0..cols {
        for i in 0..rows {
            out[i + j * rows] = x[(i, j)];
        }
    }
    out
}

/// Inverse of [`vec_col`] for a square `n × n` matrix.
pub fn unvec_col(v: &CVec, n: usize) -> CMat {
    assert_eq!(v.len(), n * n, "unvec_col: length {} is not {}²", v.len(), n);
    Array2::from_shape_fn((n, n), |(i, j)| v[i + j * n])
}

/// Largest entry modulus.
pub fn max_abs(a: &CMat) -> f64 {
    a.iter().fold(0.0, |m, z| m.max(z.norm()))
}

pub fn max_abs_diff(a: &CMat, b: &CMat) -> f64 {
    assert_eq!(a.dim(), b.dim(), "max_abs_diff: shape mismatch");
    a.iter().zip(b.iter()).fold(0.0, |m, (x, y)| m.max((x - y).norm()))
}

pub fn frobenius(a: &CMat) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Maximum absolute column sum.
pub fn norm_1(a: &CMat) -> f64 {
    a.axis_iter(Axis(1))
        .map(|col| col.iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn to_nalgebra(a: &CMat) -> nalgebra::DMatrix<C64> {
    let (r, cdim) = a.dim();
    nalgebra::DMatrix::from_fn(r, cdim, |i, j| a[(i, j)])
}

/// Operator (spectral) norm, the largest singular value.
pub fn op_norm(a: &CMat) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    to_nalgebra(a).singular_values().max()
}

/// Eigenvalues of the Hermitian part `(a + a†)/2`, ascending.
pub fn hermitian_eigenvalues(a: &CMat) -> Vec<f64> {
    let h = (a + &adjoint(a)).mapv(|z| z * 0.5);
    let eig = nalgebra::linalg::SymmetricEigen::new(to_nalgebra(&h));
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|x, y| x.total_cmp(y));
    vals
}

/// ‖a − a†‖ in max-norm.
pub fn hermiticity_defect(a: &CMat) -> f64 {
    max_abs_diff(a, &adjoint(a))
}

/// ‖a†a − I‖ in operator norm.
pub fn unitarity_defect(a: &CMat) -> f64 {
    let n = a.nrows();
    op_norm(&(adjoint(a).dot(a) - identity(n)))
}

/// Uniform entries in the unit square of the complex plane, centred at 0.
pub fn random_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> CMat {
    Array2::from_shape_fn((rows, cols), |_| {
        C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    })
}

pub fn random_hermitian<R: Rng + ?Sized>(rng: &mut R, n: usize) -> CMat {
    let a = random_matrix(rng, n, n);
    (&a + &adjoint(&a)).mapv(|z| z * 0.5)
}

/// Haar-ish random unitary: exponential of `i` times a random Hermitian matrix.
pub fn random_unitary<R: Rng + ?Sized>(rng: &mut R, n: usize) -> CMat {
    let h = random_hermitian(rng, n);
    expm(&h.mapv(|z| z * I))
}

/// Solve `a · x = b` by LU with partial pivoting.
///
/// Panics if `a` is singular to working precision; callers only pass
/// Padé denominators, which are well conditioned after scaling.
pub fn solve(a: &CMat, b: &CMat) -> CMat {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "solve: matrix not square");
    assert_eq!(n, b.nrows(), "solve: rhs rows");
    let mut lu = a.clone();
    let mut x = b.clone();
    for col in 0..n {
        let (pivot_row, pivot_abs) = (col..n)
            .map(|r| (r, lu[(r, col)].norm()))
            .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        assert!(pivot_abs > 0.0, "solve: singular matrix");
        if pivot_row != col {
            for j in 0..n {
                lu.swap((col, j), (pivot_row, j));
            }
            for j in 0..x.ncols() {
                x.swap((col, j), (pivot_row, j));
            }
        }
        let pivot = lu[(col, col)];
        for r in (col + 1)..n {
            let factor = lu[(r, col)] / pivot;
            if factor == ZERO {
                continue;
            }
            for j in col..n {
                let v = lu[(col, j)];
                lu[(r, j)] -= factor * v;
            }
            for j in 0..x.ncols() {
                let v = x[(col, j)];
                x[(r, j)] -= factor * v;
            }
        }
    }
    for col in (0..n).rev() {
        let pivot = lu[(col, col)];
        for j in 0..x.ncols() {
            let mut acc = x[(col, j)];
            for k in (col + 1)..n {
                acc -= lu[(col, k)] * x[(k, j)];
            }
            x[(col, j)] = acc / pivot;
        }
    }
    x
}

const THETA: [(usize, f64); 4] = [
    (3, 1.495585217958292e-2),
    (5, 2.539_398_330_063_23e-1),
    (7, 9.504178996162932e-1),
    (9, 2.097847961257068e0),
];
const THETA_13: f64 = 5.371920351148152e0;

const B3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const B5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const B7: [f64; 8] = [17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0];
const B9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const B13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

/// Matrix exponential by scaling and squaring with a diagonal Padé
/// approximant of degree 3, 5, 7, 9 or 13, chosen from the 1-norm.
pub fn expm(a: &CMat) -> CMat {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "expm: matrix not square");
    if n == 0 {
        return a.clone();
    }
    let norm = norm_1(a);
    for &(m, theta) in THETA.iter() {
        if norm <= theta {
            let coeffs: &[f64] = match m {
                3 => &B3,
                5 => &B5,
                7 => &B7,
                _ => &B9,
            };
            return pade_low(a, coeffs);
        }
    }
    let squarings = if norm > THETA_13 {
        (norm / THETA_13).log2().ceil().max(0.0) as i32
    } else {
        0
    };
    let scaled = a.mapv(|z| z / 2f64.powi(squarings));
    let mut result = pade13(&scaled);
    for _ in 0..squarings {
        result = result.dot(&result);
    }
    result
}

fn pade_low(a: &CMat, coeffs: &[f64]) -> CMat {
    let n = a.nrows();
    let a2 = a.dot(a);
    let mut powers = vec![identity(n)];
    for k in 1..coeffs.len() / 2 {
        let next = powers[k - 1].dot(&a2);
        powers.push(next);
    }
    let mut u_inner = zeros(n);
    let mut v = zeros(n);
    for (k, p) in powers.iter().enumerate() {
        v.scaled_add(c(coeffs[2 * k]), p);
        u_inner.scaled_add(c(coeffs[2 * k + 1]), p);
    }
    let u = a.dot(&u_inner);
    solve(&(&v - &u), &(&v + &u))
}

fn pade13(a: &CMat) -> CMat {
    let n = a.nrows();
    let b = &B13;
    let id = identity(n);
    let a2 = a.dot(a);
    let a4 = a2.dot(&a2);
    let a6 = a2.dot(&a4);
    let w1 = &a6 * c(b[13]) + &a4 * c(b[11]) + &a2 * c(b[9]);
    let w2 = w1.dot(&a6) + &a6 * c(b[7]) + &a4 * c(b[5]) + &a2 * c(b[3]) + &id * c(b[1]);
    let u = a.dot(&w2);
    let z1 = &a6 * c(b[12]) + &a4 * c(b[10]) + &a2 * c(b[8]);
    let v = z1.dot(&a6) + &a6 * c(b[6]) + &a4 * c(b[4]) + &a2 * c(b[2]) + &id * c(b[0]);
    solve(&(&v - &u), &(&v + &u))
}

/// `exp(t·A)(x)` for a linear map `A` given only by its action, using a
/// truncated Taylor series on `substeps` equal sub-intervals.
///
/// `norm_bound` must bound the operator norm of `A` in the norm used for
/// `x` (any submultiplicative bound works); it fixes the number of
/// sub-intervals and terms, so the routine is deterministic.
pub fn expm_action<F>(apply: F, norm_bound: f64, t: f64, x: &CMat) -> CMat
where
    F: Fn(&CMat) -> CMat,
{
    let (substeps, terms) = taylor_plan(norm_bound * t.abs());
    let dt = t / substeps as f64;
    let mut state = x.clone();
    for _ in 0..substeps {
        let mut term = state.clone();
        let mut acc = state.clone();
        for k in 1..=terms {
            term = apply(&term).mapv(|z| z * (dt / k as f64));
            acc += &term;
        }
        state = acc;
    }
    state
}

/// Sub-interval count and Taylor degree so that each sub-interval has
/// norm at most 1/2 and the truncation remainder is below 1e-18.
pub fn taylor_plan(total_norm: f64) -> (usize, usize) {
    let substeps = if total_norm > 0.5 {
        (total_norm / 0.5).ceil() as usize
    } else {
        1
    };
    let local = total_norm / substeps as f64;
    let mut terms = 1usize;
    let mut remainder = local;
    while remainder > 1e-18 && terms < 60 {
        terms += 1;
        remainder *= local / terms as f64;
    }
    (substeps, terms)
}

/// Copy `block` into `target` with its top-left corner at `(row, col)`.
pub fn set_block(target: &mut CMat, row: usize, col: usize, block: ArrayView2<C64>) {
    let (r, cdim) = block.dim();
    target.slice_mut(s![row..row + r, col..col + cdim]).assign(&block);
}

pub fn block(source: &CMat, row: usize, col: usize, size: usize) -> CMat {
    source.slice(s![row..row + size, col..col + size]).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn reference_exp(a: &CMat) -> CMat {
        let m = to_nalgebra(a).exp();
        Array2::from_shape_fn(a.dim(), |(i, j)| m[(i, j)])
    }

    #[test]
    fn expm_of_zero_is_identity() {
        assert_eq!(expm(&zeros(4)), identity(4));
    }

    #[test]
    fn expm_matches_nalgebra_across_norm_regimes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for scale in [1e-3, 0.1, 0.6, 1.5, 4.0, 20.0] {
            let a = random_matrix(&mut rng, 7, 7).mapv(|z| z * scale);
            let got = expm(&a);
            let want = reference_exp(&a);
            let rel = max_abs_diff(&got, &want) / max_abs(&want);
            assert!(rel < 1e-12, "scale {scale}: rel err {rel:e}");
        }
    }

    #[test]
    fn expm_of_pauli_rotation() {
        // exp(-iθσ_x) = cos θ I - i sin θ σ_x
        let theta = 0.7f64;
        let sx = ndarray::array![[ZERO, ONE], [ONE, ZERO]];
        let got = expm(&sx.mapv(|z| z * C64::new(0.0, -theta)));
        let want = identity(2).mapv(|z| z * theta.cos()) + sx.mapv(|z| z * C64::new(0.0, -theta.sin()));
        assert!(max_abs_diff(&got, &want) < 1e-15);
    }

    #[test]
    fn expm_action_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_matrix(&mut rng, 5, 5);
        let x = random_matrix(&mut rng, 5, 2);
        let bound = norm_1(&a);
        for t in [0.0, 0.3, 2.5] {
            let got = expm_action(|v| a.dot(v), bound, t, &x);
            let want = expm(&a.mapv(|z| z * t)).dot(&x);
            assert!(max_abs_diff(&got, &want) < 1e-11, "t={t}");
        }
    }

    #[test]
    fn vec_identity_for_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_matrix(&mut rng, 3, 3);
        let x = random_matrix(&mut rng, 3, 3);
        let b = random_matrix(&mut rng, 3, 3);
        let lhs = vec_col(&a.dot(&x).dot(&b));
        let rhs = kron(&transpose(&b), &a).dot(&vec_col(&x));
        let diff = (&lhs - &rhs).iter().fold(0.0f64, |m, z| m.max(z.norm()));
        assert!(diff < 1e-13);
        assert_eq!(unvec_col(&vec_col(&x), 3), x);
    }

    #[test]
    fn solve_recovers_known_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_matrix(&mut rng, 6, 6) + identity(6).mapv(|z| z * 3.0);
        let x = random_matrix(&mut rng, 6, 3);
        let b = a.dot(&x);
        assert!(max_abs_diff(&solve(&a, &b), &x) < 1e-12);
    }

    #[test]
    fn random_unitary_is_unitary() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = random_unitary(&mut rng, 6);
        assert!(unitarity_defect(&u) < 1e-12);
    }

    #[test]
    fn op_norm_of_diagonal() {
        let d = Array2::from_diag(&ndarray::arr1(&[c(1.0), c(-3.0), C64::new(0.0, 2.0)]));
        assert!((op_norm(&d) - 3.0).abs() < 1e-12);
    }
}
