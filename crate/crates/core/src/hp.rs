//! Hudson–Parthasarathy coefficients and a repeated-interaction
//! discretization of the resulting unitary cocycle.
//!
//! Time `[0, t]` is cut into `K` slots of width `h`. Each slot carries a
//! fresh `(1+m)`-dimensional noise space (vacuum `|0⟩` plus one level per
//! channel), and step `k` acts on the system and slot `k` only. The
//! discretized cocycle is `U_K = V_K ⋯ V_1`.
//!
//! Step matrices are stored noise-slot major: the `(a, b)` block of side
//! `system_dim` is `⟨a|V|b⟩`.

use std::fmt;
use std::sync::Arc;

use ndarray::{s, Array1, Array2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, CMat, CVec, C64};
use crate::lindblad::GnsOperator;
use crate::tensor_algebra::{
    conditional_expectation, support, Capacity, LocalOperator, ShellFamily, Window, SUPPORT_TOL,
};

pub const ITO_TOL: f64 = 1e-10;
pub const SELF_ADJOINT_TOL: f64 = 1e-12;
pub const UNITARY_TOL: f64 = 1e-10;
/// Largest slot count for which full noise-space vectors are formed.
pub const DEFAULT_SLOT_CAP: usize = 14;

/// The coefficient family `(H, L_i, S_j^i)` together with the derived
/// blocks `L_j^i`, `0 ≤ i, j ≤ m`.
#[derive(Debug, Clone, PartialEq)]
pub struct HPCoefficients {
    system_dim: usize,
    channels: usize,
    hamiltonian: CMat,
    couplings: Vec<CMat>,
    // scattering[i][j] = S_{j+1}^{i+1}
    scattering: Vec<Vec<CMat>>,
    // blocks[i][j] = L_j^i
    blocks: Vec<Vec<CMat>>,
}

fn check_square(what: &str, m: &CMat, dim: usize) -> Result<()> {
    if m.dim() != (dim, dim) {
        return Err(Error::DimensionMismatch(format!(
            "{what} is {}x{}, expected {dim}x{dim}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

/// `Σ_{ij} S_j^i ⊗ |e_i⟩⟨e_j|` in channel-major layout.
fn assemble_scattering(scattering: &[Vec<CMat>], dim: usize) -> CMat {
    let m = scattering.len();
    let mut out = Array2::zeros((m * dim, m * dim));
    for (i, row) in scattering.iter().enumerate() {
        for (j, s_ij) in row.iter().enumerate() {
            linalg::set_block(&mut out, i * dim, j * dim, s_ij.view());
        }
    }
    out
}

fn derive_blocks(hamiltonian: &CMat, couplings: &[CMat], scattering: &[Vec<CMat>]) -> Vec<Vec<CMat>> {
    let dim = hamiltonian.nrows();
    let m = couplings.len();
    let adj: Vec<CMat> = couplings.iter().map(linalg::adjoint).collect();
    let mut blocks = vec![vec![linalg::zeros(dim); m + 1]; m + 1];

    let mut dissipation = linalg::zeros(dim);
    for (l, l_adj) in couplings.iter().zip(&adj) {
        dissipation += &l_adj.dot(l);
    }
    blocks[0][0] = -(hamiltonian.mapv(|z| z * linalg::I) + dissipation.mapv(|z| z * 0.5));

    for i in 1..=m {
        blocks[i][0] = couplings[i - 1].clone();
    }
    for j in 1..=m {
        let mut acc = linalg::zeros(dim);
        for k in 1..=m {
            acc += &adj[k - 1].dot(&scattering[k - 1][j - 1]);
        }
        blocks[0][j] = -acc;
    }
    for i in 1..=m {
        for j in 1..=m {
            let mut b = scattering[i - 1][j - 1].clone();
            if i == j {
                b -= &linalg::identity(dim);
            }
            blocks[i][j] = b;
        }
    }
    blocks
}

/// Validate `(H, L, S)` and derive the blocks `L_j^i`.
///
/// `scattering[i][j]` is `S_{j+1}^{i+1}`.
pub fn assemble_coefficients(
    hamiltonian: &CMat,
    couplings: &[CMat],
    scattering: &[Vec<CMat>],
) -> Result<HPCoefficients> {
    let dim = hamiltonian.nrows();
    check_square("H", hamiltonian, dim)?;
    let m = couplings.len();
    if m == 0 {
        return Err(Error::DimensionMismatch("at least one channel is required".into()));
    }
    for (i, l) in couplings.iter().enumerate() {
        check_square(&format!("L_{}", i + 1), l, dim)?;
    }
    if scattering.len() != m || scattering.iter().any(|row| row.len() != m) {
        return Err(Error::DimensionMismatch(format!(
            "scattering must be a {m}x{m} block family"
        )));
    }
    for (i, row) in scattering.iter().enumerate() {
        for (j, s_ij) in row.iter().enumerate() {
            check_square(&format!("S_{}^{}", j + 1, i + 1), s_ij, dim)?;
        }
    }

    let defect = linalg::op_norm(&(hamiltonian - &linalg::adjoint(hamiltonian)));
    if defect > SELF_ADJOINT_TOL {
        return Err(Error::NotSelfAdjoint { defect });
    }
    let defect = linalg::unitarity_defect(&assemble_scattering(scattering, dim));
    if defect > UNITARY_TOL {
        return Err(Error::NotUnitary { defect });
    }

    Ok(HPCoefficients {
        system_dim: dim,
        channels: m,
        hamiltonian: hamiltonian.clone(),
        couplings: couplings.to_vec(),
        scattering: scattering.to_vec(),
        blocks: derive_blocks(hamiltonian, couplings, scattering),
    })
}

impl HPCoefficients {
    /// `H = 0`, `L_1 = C`, `S = I`.
    pub fn from_coupling(c: &CMat) -> Result<Self> {
        let dim = c.nrows();
        assemble_coefficients(
            &linalg::zeros(dim),
            std::slice::from_ref(c),
            &[vec![linalg::identity(dim)]],
        )
    }

    /// Random valid coefficients: Hermitian `H`, couplings with entries of
    /// modulus at most `coupling_scale·√2`, Haar-ish scattering.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, dim: usize, channels: usize, coupling_scale: f64) -> Result<Self> {
        let h = linalg::random_hermitian(rng, dim);
        let l: Vec<CMat> = (0..channels)
            .map(|_| linalg::random_matrix(rng, dim, dim).mapv(|z| z * coupling_scale))
            .collect();
        let u = linalg::random_unitary(rng, dim * channels);
        let s: Vec<Vec<CMat>> = (0..channels)
            .map(|i| {
                (0..channels)
                    .map(|j| linalg::block(&u, i * dim, j * dim, dim))
                    .collect()
            })
            .collect();
        assemble_coefficients(&h, &l, &s)
    }

    pub fn system_dim(&self) -> usize {
        self.system_dim
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn hamiltonian(&self) -> &CMat {
        &self.hamiltonian
    }

    pub fn couplings(&self) -> &[CMat] {
        &self.couplings
    }

    fn check_index(&self, i: usize, j: usize) -> Result<()> {
        if i > self.channels || j > self.channels {
            return Err(Error::IndexOutOfRange {
                i,
                j,
                channels: self.channels,
            });
        }
        Ok(())
    }

    /// `S_j^i` for `1 ≤ i, j ≤ m`.
    pub fn scattering(&self, i: usize, j: usize) -> Result<&CMat> {
        self.check_index(i, j)?;
        if i == 0 || j == 0 {
            return Err(Error::IndexOutOfRange {
                i,
                j,
                channels: self.channels,
            });
        }
        Ok(&self.scattering[i - 1][j - 1])
    }

    /// `L_j^i` for `0 ≤ i, j ≤ m`.
    pub fn block(&self, i: usize, j: usize) -> Result<&CMat> {
        self.check_index(i, j)?;
        Ok(&self.blocks[i][j])
    }

    /// Copy with `L_j^i` overwritten and nothing re-derived. Used to build
    /// inconsistent coefficient sets for negative controls.
    pub fn with_block(&self, i: usize, j: usize, value: CMat) -> Result<Self> {
        self.check_index(i, j)?;
        check_square("replacement block", &value, self.system_dim)?;
        let mut out = self.clone();
        out.blocks[i][j] = value;
        Ok(out)
    }

    /// Blocks `L_j^i + δ_j^i` for `i, j ≥ 1`, assembled as one matrix.
    fn scattering_from_blocks(&self) -> CMat {
        let (d, m) = (self.system_dim, self.channels);
        let mut out = Array2::zeros((m * d, m * d));
        for i in 1..=m {
            for j in 1..=m {
                let mut b = self.blocks[i][j].clone();
                if i == j {
                    b += &linalg::identity(d);
                }
                linalg::set_block(&mut out, (i - 1) * d, (j - 1) * d, b.view());
            }
        }
        out
    }
}

/// Defects of the algebraic unitarity conditions, all in operator norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ItoReport {
    /// `‖L_0^0 + (L_0^0)* + Σ_k (L_0^k)* L_0^k‖`.
    pub conservativity: f64,
    /// `‖θ_0^0(I)‖`.
    pub theta_identity: f64,
    /// `‖S*S − I‖` with `S` rebuilt from the blocks.
    pub scattering_unitarity: f64,
}

impl ItoReport {
    pub fn max_defect(&self) -> f64 {
        self.conservativity
            .max(self.theta_identity)
            .max(self.scattering_unitarity)
    }

    pub fn passes(&self) -> bool {
        self.max_defect() <= ITO_TOL
    }
}

pub fn check_ito_unitarity(c: &HPCoefficients) -> ItoReport {
    let d = c.system_dim;
    let l00 = &c.blocks[0][0];
    let mut cons = l00 + &linalg::adjoint(l00);
    for k in 1..=c.channels {
        let lk = &c.blocks[k][0];
        cons += &linalg::adjoint(lk).dot(lk);
    }
    let theta = theta_map(c, 0, 0, &linalg::identity(d)).expect("valid index and shape");
    ItoReport {
        conservativity: linalg::op_norm(&cons),
        theta_identity: linalg::op_norm(&theta),
        scattering_unitarity: linalg::unitarity_defect(&c.scattering_from_blocks()),
    }
}

/// `θ_j^i(X) = X L_j^i + (L_i^j)* X + Σ_{k=1}^m (L_i^k)* X L_j^k`.
pub fn theta_map(c: &HPCoefficients, i: usize, j: usize, x: &CMat) -> Result<CMat> {
    c.check_index(i, j)?;
    check_square("X", x, c.system_dim)?;
    let b = &c.blocks;
    let mut out = x.dot(&b[j][i]) + linalg::adjoint(&b[i][j]).dot(x);
    for row in &b[1..] {
        out += &linalg::adjoint(&row[i]).dot(x).dot(&row[j]);
    }
    Ok(out)
}

/// Column-stacking matrix of `X ↦ θ_j^i(X)`.
pub fn theta_superop(c: &HPCoefficients, i: usize, j: usize) -> Result<CMat> {
    c.check_index(i, j)?;
    let b = &c.blocks;
    let id = linalg::identity(c.system_dim);
    let mut out = linalg::kron(&linalg::transpose(&b[j][i]), &id) + linalg::kron(&id, &linalg::adjoint(&b[i][j]));
    for row in &b[1..] {
        out += &linalg::kron(&linalg::transpose(&row[j]), &linalg::adjoint(&row[i]));
    }
    Ok(out)
}

/// Uniform time grid of `steps` slots on `[0, t_final]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyFockGrid {
    t_final: f64,
    steps: usize,
}

impl ToyFockGrid {
    pub fn new(t_final: f64, steps: usize) -> Result<Self> {
        if !t_final.is_finite() || t_final <= 0.0 {
            return Err(Error::InvalidTime(t_final));
        }
        if steps == 0 {
            return Err(Error::InvalidStepSize(f64::INFINITY));
        }
        Ok(ToyFockGrid { t_final, steps })
    }

    pub fn t_final(&self) -> f64 {
        self.t_final
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn h(&self) -> f64 {
        self.t_final / self.steps as f64
    }

    /// Left endpoints `t_k = k·h`, `k = 0..K`.
    pub fn left_endpoints(&self) -> impl Iterator<Item = f64> + '_ {
        let h = self.h();
        (0..self.steps).map(move |k| k as f64 * h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    ExactExponential,
    FirstOrderBlock,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::ExactExponential => "exact_exponential",
            Scheme::FirstOrderBlock => "first_order_block",
        })
    }
}

fn check_h(h: f64) -> Result<()> {
    if !h.is_finite() || h <= 0.0 {
        return Err(Error::InvalidStepSize(h));
    }
    Ok(())
}

/// `exp(√h Σ_j (L_j ⊗ |j⟩⟨0| − L_j* ⊗ |0⟩⟨j|))` on system ⊗ `C^{1+m}`.
pub fn coupling_step_matrix(couplings: &[CMat], h: f64) -> Result<CMat> {
    check_h(h)?;
    let Some(first) = couplings.first() else {
        return Err(Error::DimensionMismatch("at least one channel is required".into()));
    };
    let d = first.nrows();
    let q = couplings.len() + 1;
    let sh = h.sqrt();
    let mut a = Array2::zeros((q * d, q * d));
    for (j, l) in couplings.iter().enumerate() {
        check_square("coupling", l, d)?;
        linalg::set_block(&mut a, (j + 1) * d, 0, l.mapv(|z| z * sh).view());
        linalg::set_block(&mut a, 0, (j + 1) * d, linalg::adjoint(l).mapv(|z| z * -sh).view());
    }
    let v = linalg::expm(&a);
    let defect = linalg::unitarity_defect(&v);
    if defect > UNITARY_TOL {
        return Err(Error::NotUnitary { defect });
    }
    Ok(v)
}

/// `exp(√h (C ⊗ σ⁺ − C* ⊗ σ⁻))` with `σ⁺ = |1⟩⟨0|`.
pub fn step_unitary_exact(c: &GnsOperator, h: f64) -> Result<CMat> {
    coupling_step_matrix(std::slice::from_ref(c.matrix()), h)
}

/// First-order block step for general coefficients:
///
/// ```text
/// (0,0): I + h L_0^0      (0,j): √h L_j^0
/// (i,0): √h L_0^i         (i,j): S_j^i − (h/2) Σ_k L_i L_k* S_j^k
/// ```
///
/// The `(i,j)` correction cancels the order-`h` term of `V*V − I`, leaving
/// a defect of order `h^{3/2}`.
#[allow(clippy::needless_range_loop)]
pub fn step_first_order(c: &HPCoefficients, h: f64) -> Result<CMat> {
    check_h(h)?;
    let (d, m) = (c.system_dim, c.channels);
    let sh = h.sqrt();
    let b = &c.blocks;
    let mut v = Array2::zeros(((m + 1) * d, (m + 1) * d));
    let v00 = linalg::identity(d) + b[0][0].mapv(|z| z * h);
    linalg::set_block(&mut v, 0, 0, v00.view());
    for i in 1..=m {
        linalg::set_block(&mut v, i * d, 0, b[i][0].mapv(|z| z * sh).view());
        linalg::set_block(&mut v, 0, i * d, b[0][i].mapv(|z| z * sh).view());
    }
    for i in 1..=m {
        for j in 1..=m {
            let mut corr = linalg::zeros(d);
            for k in 1..=m {
                corr += &c.couplings[i - 1]
                    .dot(&linalg::adjoint(&c.couplings[k - 1]))
                    .dot(&c.scattering[k - 1][j - 1]);
            }
            let block = &c.scattering[i - 1][j - 1] - &corr.mapv(|z| z * (h / 2.0));
            linalg::set_block(&mut v, i * d, j * d, block.view());
        }
    }
    Ok(v)
}

/// `⟨0|V*(X ⊗ I)V|0⟩ = Σ_a V_{a0}* X V_{a0}`.
pub fn compress_vacuum(v: &CMat, system_dim: usize, x: &CMat) -> CMat {
    let q = v.nrows() / system_dim;
    let mut out = linalg::zeros(system_dim);
    for a in 0..q {
        let col = v.slice(s![a * system_dim..(a + 1) * system_dim, 0..system_dim]);
        out += &col.t().mapv(|z| z.conj()).dot(x).dot(&col);
    }
    out
}

/// `V*(X ⊗ I)V` on system ⊗ slot.
pub fn heisenberg_step(v: &CMat, system_dim: usize, x: &CMat) -> CMat {
    let q = v.nrows() / system_dim;
    let lifted = linalg::kron(&linalg::identity(q), x);
    linalg::adjoint(v).dot(&lifted).dot(v)
}

/// One step `exp(√h (C ⊗ σ⁺ − C* ⊗ σ⁻))` with `C = [r, ·]` on the GNS
/// space of a window, applied without forming `C`.
///
/// GNS vectors are the column-stacked algebra elements. The step is
/// evaluated from its closed form as power series in `h C*C` and `h CC*`.
#[derive(Debug, Clone, PartialEq)]
pub struct CommutatorStep {
    r: CMat,
    r_adj: CMat,
    h: f64,
    terms: usize,
}

impl CommutatorStep {
    pub fn new(r: &CMat, h: f64) -> Result<Self> {
        check_h(h)?;
        // ‖[r, ·]‖ ≤ 2‖r‖
        let beta = h * (2.0 * linalg::op_norm(r)).powi(2);
        let mut terms = 0usize;
        let mut bound = 1.0f64;
        while bound > 1e-20 && terms < 80 {
            terms += 1;
            bound *= beta / ((2 * terms - 1) * (2 * terms)) as f64;
        }
        Ok(CommutatorStep {
            r: r.clone(),
            r_adj: linalg::adjoint(r),
            h,
            terms,
        })
    }

    pub fn side(&self) -> usize {
        self.r.nrows()
    }

    pub fn system_dim(&self) -> usize {
        self.side() * self.side()
    }

    fn c(&self, x: &CMat) -> CMat {
        self.r.dot(x) - x.dot(&self.r)
    }

    fn c_adj(&self, x: &CMat) -> CMat {
        self.r_adj.dot(x) - x.dot(&self.r_adj)
    }

    /// `(Σ (−h)^k P^k x / (2k)!, Σ (−h)^k P^k x / (2k+1)!)` for
    /// `P = C*C` (`outer = false`) or `P = CC*` (`outer = true`).
    fn series(&self, x: &CMat, outer: bool) -> (CMat, CMat) {
        let mut cos_acc = x.clone();
        let mut sinc_acc = x.clone();
        let mut power = x.clone();
        let mut fact_even = 1.0f64;
        let mut fact_odd = 1.0f64;
        for k in 1..=self.terms {
            power = if outer {
                self.c(&self.c_adj(&power))
            } else {
                self.c_adj(&self.c(&power))
            };
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            let hk = sign * self.h.powi(k as i32);
            fact_even *= ((2 * k - 1) * (2 * k)) as f64;
            fact_odd *= ((2 * k) * (2 * k + 1)) as f64;
            cos_acc.scaled_add(linalg::c(hk / fact_even), &power);
            sinc_acc.scaled_add(linalg::c(hk / fact_odd), &power);
        }
        (cos_acc, sinc_acc)
    }

    fn apply(&self, slots: &[CVec]) -> Vec<CVec> {
        let n = self.side();
        let sh = self.h.sqrt();
        let is_zero = |v: &CVec| v.iter().all(|z| *z == linalg::ZERO);
        let mut out0 = Array2::zeros((n, n));
        let mut out1 = Array2::zeros((n, n));
        if !is_zero(&slots[0]) {
            let x = linalg::unvec_col(&slots[0], n);
            let (cos_x, sinc_x) = self.series(&x, false);
            out0 += &cos_x;
            out1.scaled_add(linalg::c(sh), &self.c(&sinc_x));
        }
        if !is_zero(&slots[1]) {
            let y = linalg::unvec_col(&slots[1], n);
            let (_, sinc_y) = self.series(&self.c_adj(&y), false);
            out0.scaled_add(linalg::c(-sh), &sinc_y);
            let (cos_y, _) = self.series(&y, true);
            out1 += &cos_y;
        }
        vec![linalg::vec_col(&out0), linalg::vec_col(&out1)]
    }

    /// `V*`: the same step built from `−r`.
    fn adjoint(&self) -> Self {
        CommutatorStep {
            r: self.r.mapv(|z| -z),
            r_adj: self.r_adj.mapv(|z| -z),
            ..self.clone()
        }
    }
}

/// One step unitary, dense or matrix-free.
#[derive(Debug, Clone, PartialEq)]
pub enum StepKernel {
    Dense { matrix: CMat, system_dim: usize },
    Commutator(CommutatorStep),
}

impl StepKernel {
    pub fn dense(matrix: CMat, system_dim: usize) -> Result<Self> {
        if system_dim == 0 || matrix.nrows() != matrix.ncols() || !matrix.nrows().is_multiple_of(system_dim) {
            return Err(Error::DimensionMismatch(format!(
                "step matrix {}x{} is not a block matrix over system dimension {system_dim}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        Ok(StepKernel::Dense { matrix, system_dim })
    }

    pub fn system_dim(&self) -> usize {
        match self {
            StepKernel::Dense { system_dim, .. } => *system_dim,
            StepKernel::Commutator(step) => step.system_dim(),
        }
    }

    /// `1 + m`.
    pub fn slot_dim(&self) -> usize {
        match self {
            StepKernel::Dense { matrix, system_dim } => matrix.nrows() / system_dim,
            StepKernel::Commutator(_) => 2,
        }
    }

    pub fn matrix(&self) -> Option<&CMat> {
        match self {
            StepKernel::Dense { matrix, .. } => Some(matrix),
            StepKernel::Commutator(_) => None,
        }
    }

    /// Apply to a vector given by its slot components `ψ_a ∈ C^D`.
    pub fn apply(&self, slots: &[CVec]) -> Vec<CVec> {
        match self {
            StepKernel::Dense { matrix, system_dim } => {
                let d = *system_dim;
                let mut stacked = Array1::zeros(matrix.nrows());
                for (a, v) in slots.iter().enumerate() {
                    stacked.slice_mut(s![a * d..(a + 1) * d]).assign(v);
                }
                let out = matrix.dot(&stacked);
                (0..slots.len())
                    .map(|a| out.slice(s![a * d..(a + 1) * d]).to_owned())
                    .collect()
            }
            StepKernel::Commutator(step) => step.apply(slots),
        }
    }

    pub fn adjoint(&self) -> Self {
        match self {
            StepKernel::Dense { matrix, system_dim } => StepKernel::Dense {
                matrix: linalg::adjoint(matrix),
                system_dim: *system_dim,
            },
            StepKernel::Commutator(step) => StepKernel::Commutator(step.adjoint()),
        }
    }
}

/// The `K` step unitaries of a discretized cocycle.
#[derive(Debug, Clone)]
pub struct StepSequence {
    grid: ToyFockGrid,
    scheme: Scheme,
    system_dim: usize,
    channels: usize,
    steps: Vec<Arc<StepKernel>>,
}

impl StepSequence {
    /// All `K` slots share one kernel.
    pub fn homogeneous(grid: ToyFockGrid, scheme: Scheme, kernel: StepKernel) -> Self {
        let kernel = Arc::new(kernel);
        StepSequence {
            grid,
            scheme,
            system_dim: kernel.system_dim(),
            channels: kernel.slot_dim() - 1,
            steps: vec![kernel; grid.steps()],
        }
    }

    pub fn from_kernels(grid: ToyFockGrid, scheme: Scheme, kernels: Vec<StepKernel>) -> Result<Self> {
        if kernels.len() != grid.steps() {
            return Err(Error::DimensionMismatch(format!(
                "{} kernels for a grid of {} steps",
                kernels.len(),
                grid.steps()
            )));
        }
        let first = &kernels[0];
        let (d, q) = (first.system_dim(), first.slot_dim());
        if kernels.iter().any(|k| k.system_dim() != d || k.slot_dim() != q) {
            return Err(Error::DimensionMismatch("step kernels differ in shape".into()));
        }
        Ok(StepSequence {
            grid,
            scheme,
            system_dim: d,
            channels: q - 1,
            steps: kernels.into_iter().map(Arc::new).collect(),
        })
    }

    /// Exact steps for the single-channel coupling `C`.
    pub fn exact(c: &GnsOperator, grid: ToyFockGrid) -> Result<Self> {
        Self::exact_from_matrix(c.matrix(), grid)
    }

    pub fn exact_from_matrix(c: &CMat, grid: ToyFockGrid) -> Result<Self> {
        let v = coupling_step_matrix(std::slice::from_ref(c), grid.h())?;
        Ok(Self::homogeneous(
            grid,
            Scheme::ExactExponential,
            StepKernel::dense(v, c.nrows())?,
        ))
    }

    /// Exact steps for `C = [r, ·]`, matrix-free.
    pub fn commutator(r: &CMat, grid: ToyFockGrid) -> Result<Self> {
        let step = CommutatorStep::new(r, grid.h())?;
        Ok(Self::homogeneous(
            grid,
            Scheme::ExactExponential,
            StepKernel::Commutator(step),
        ))
    }

    pub fn first_order(c: &HPCoefficients, grid: ToyFockGrid) -> Result<Self> {
        let v = step_first_order(c, grid.h())?;
        Ok(Self::homogeneous(
            grid,
            Scheme::FirstOrderBlock,
            StepKernel::dense(v, c.system_dim)?,
        ))
    }

    pub fn grid(&self) -> &ToyFockGrid {
        &self.grid
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn system_dim(&self) -> usize {
        self.system_dim
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn kernels(&self) -> impl Iterator<Item = &StepKernel> {
        self.steps.iter().map(|k| k.as_ref())
    }

    /// `‖V_k*V_k − I‖` for each dense step.
    pub fn unitarity_defects(&self) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.len());
        for (k, kernel) in self.steps.iter().enumerate() {
            if k > 0 && Arc::ptr_eq(kernel, &self.steps[k - 1]) {
                out.push(out[k - 1]);
                continue;
            }
            let v = kernel.matrix().ok_or(Error::MatrixFree("unitarity check"))?;
            out.push(linalg::unitarity_defect(v));
        }
        Ok(out)
    }

    /// Largest slotwise difference of dense step matrices.
    pub fn max_step_diff(&self, other: &StepSequence) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::DimensionMismatch("sequences differ in length".into()));
        }
        let mut worst = 0.0f64;
        for (k, (a, b)) in self.steps.iter().zip(&other.steps).enumerate() {
            if k > 0 && Arc::ptr_eq(a, &self.steps[k - 1]) && Arc::ptr_eq(b, &other.steps[k - 1]) {
                continue;
            }
            let (Some(a), Some(b)) = (a.matrix(), b.matrix()) else {
                return Err(Error::MatrixFree("slotwise comparison"));
            };
            if a.dim() != b.dim() {
                return Err(Error::DimensionMismatch("step matrices differ in shape".into()));
            }
            worst = worst.max(linalg::max_abs_diff(a, b));
        }
        Ok(worst)
    }
}

/// Apply `U_K = V_K ⋯ V_1` to a full system ⊗ noise vector.
///
/// Layout: the system index is most significant, then slot 1, …, slot K.
pub fn evolve(steps: &StepSequence, psi: &CVec) -> Result<CVec> {
    evolve_with_cap(steps, psi, DEFAULT_SLOT_CAP)
}

pub fn evolve_with_cap(steps: &StepSequence, psi: &CVec, slot_cap: usize) -> Result<CVec> {
    let k_total = steps.len();
    if k_total > slot_cap {
        return Err(Error::SlotCap {
            slots: k_total,
            cap: slot_cap,
        });
    }
    let d = steps.system_dim;
    let q = steps.channels + 1;
    let noise = q.pow(k_total as u32);
    if psi.len() != d * noise {
        return Err(Error::DimensionMismatch(format!(
            "state has length {}, expected {d}·{q}^{k_total} = {}",
            psi.len(),
            d * noise
        )));
    }
    let mut state = psi.clone();
    for (k, kernel) in steps.kernels().enumerate() {
        let inner = q.pow((k_total - k - 1) as u32);
        let outer = noise / (inner * q);
        for p in 0..outer {
            for rr in 0..inner {
                let index = |i: usize, a: usize| i * noise + (p * q + a) * inner + rr;
                let slots: Vec<CVec> = (0..q)
                    .map(|a| Array1::from_shape_fn(d, |i| state[index(i, a)]))
                    .collect();
                for (a, v) in kernel.apply(&slots).into_iter().enumerate() {
                    for (i, z) in v.into_iter().enumerate() {
                        state[index(i, a)] = z;
                    }
                }
            }
        }
    }
    Ok(state)
}

/// `e(f)` on the slot lattice: slot `k` holds `(1, √h f(t_k))`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizedExponentialVector {
    grid: ToyFockGrid,
    amplitudes: Vec<CVec>,
}

/// Sample `f` at the left endpoints. `f` returns one value per channel.
pub fn exp_vector<F>(f: F, grid: ToyFockGrid, channels: usize) -> Result<DiscretizedExponentialVector>
where
    F: Fn(f64) -> Vec<C64>,
{
    let sh = grid.h().sqrt();
    let mut amplitudes = Vec::with_capacity(grid.steps());
    for t in grid.left_endpoints() {
        let values = f(t);
        if values.len() != channels {
            return Err(Error::DimensionMismatch(format!(
                "f({t}) has {} components, expected {channels}",
                values.len()
            )));
        }
        if values.iter().any(|z| !z.is_finite()) {
            return Err(Error::DimensionMismatch(format!("f({t}) is not finite")));
        }
        let mut slot = Array1::zeros(channels + 1);
        slot[0] = linalg::ONE;
        for (j, z) in values.into_iter().enumerate() {
            slot[j + 1] = z * sh;
        }
        amplitudes.push(slot);
    }
    Ok(DiscretizedExponentialVector { grid, amplitudes })
}

impl DiscretizedExponentialVector {
    pub fn vacuum(grid: ToyFockGrid, channels: usize) -> Self {
        exp_vector(|_| vec![linalg::ZERO; channels], grid, channels).expect("zero is finite")
    }

    pub fn grid(&self) -> &ToyFockGrid {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.amplitudes.first().map_or(0, |a| a.len() - 1)
    }

    pub fn slot(&self, k: usize) -> &CVec {
        &self.amplitudes[k]
    }

    /// `⟨self, other⟩ = Π_k ⟨slot_k, slot_k'⟩`, conjugate-linear in `self`.
    pub fn inner(&self, other: &Self) -> Result<C64> {
        if self.amplitudes.len() != other.amplitudes.len() || self.channels() != other.channels() {
            return Err(Error::DimensionMismatch(
                "exponential vectors live on different grids".into(),
            ));
        }
        Ok(self
            .amplitudes
            .iter()
            .zip(&other.amplitudes)
            .map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum::<C64>())
            .product())
    }

    pub fn norm_sqr(&self) -> f64 {
        self.inner(self).expect("same grid").re
    }

    /// The full tensor product over all slots, slot 1 most significant.
    pub fn to_fock_vector(&self, slot_cap: usize) -> Result<CVec> {
        if self.amplitudes.len() > slot_cap {
            return Err(Error::SlotCap {
                slots: self.amplitudes.len(),
                cap: slot_cap,
            });
        }
        let mut out = Array1::from_elem(1, linalg::ONE);
        for slot in &self.amplitudes {
            out = Array1::from_shape_fn(out.len() * slot.len(), |idx| {
                out[idx / slot.len()] * slot[idx % slot.len()]
            });
        }
        Ok(out)
    }
}

fn check_pair(steps: &StepSequence, g: &DiscretizedExponentialVector, f: &DiscretizedExponentialVector) -> Result<()> {
    for e in [g, f] {
        if e.amplitudes.len() != steps.len() || e.channels() != steps.channels {
            return Err(Error::DimensionMismatch(
                "exponential vector does not match the step sequence".into(),
            ));
        }
    }
    Ok(())
}

/// `⟨e(g)| U_k |e(f)⟩ y` for `k = 0..=K`, by slotwise contraction
/// `M_k ⋯ M_1 y` with `M_k = Σ_{a,b} conj(ĝ_a) f̂_b ⟨a|V_k|b⟩`.
pub fn matrix_element_trajectory(
    steps: &StepSequence,
    g: &DiscretizedExponentialVector,
    f: &DiscretizedExponentialVector,
    y: &CVec,
) -> Result<Vec<CVec>> {
    check_pair(steps, g, f)?;
    if y.len() != steps.system_dim {
        return Err(Error::DimensionMismatch(format!(
            "system vector has length {}, expected {}",
            y.len(),
            steps.system_dim
        )));
    }
    let mut out = Vec::with_capacity(steps.len() + 1);
    let mut state = y.clone();
    out.push(state.clone());
    for (k, kernel) in steps.kernels().enumerate() {
        let (gk, fk) = (g.slot(k), f.slot(k));
        let slots: Vec<CVec> = fk.iter().map(|&b| state.mapv(|z| z * b)).collect();
        let mut next = Array1::zeros(state.len());
        for (a, v) in kernel.apply(&slots).into_iter().enumerate() {
            next.scaled_add(gk[a].conj(), &v);
        }
        state = next;
        out.push(state.clone());
    }
    Ok(out)
}

pub fn matrix_element(
    steps: &StepSequence,
    g: &DiscretizedExponentialVector,
    f: &DiscretizedExponentialVector,
    y: &CVec,
) -> Result<CVec> {
    Ok(matrix_element_trajectory(steps, g, f, y)?
        .pop()
        .expect("trajectory is never empty"))
}

/// `T̂(X) = ⟨e(0)| U_K*(X ⊗ I)U_K |e(0)⟩ = Φ_1 ∘ ⋯ ∘ Φ_K (X)` with
/// `Φ_k` the vacuum compression of step `k`.
pub fn vacuum_expectation_flow(steps: &StepSequence, x: &CMat) -> Result<CMat> {
    check_square("X", x, steps.system_dim)?;
    let mut out = x.clone();
    for kernel in steps.steps.iter().rev() {
        let v = kernel.matrix().ok_or(Error::MatrixFree("vacuum expectation"))?;
        out = compress_vacuum(v, steps.system_dim, &out);
    }
    Ok(out)
}

/// Time-reversed adjoint sequence: slot order reversed, each step
/// replaced by its adjoint.
pub fn dual_steps(steps: &StepSequence) -> Result<StepSequence> {
    if steps.scheme != Scheme::ExactExponential {
        return Err(Error::SchemeMismatch {
            expected: Scheme::ExactExponential.to_string(),
            got: steps.scheme.to_string(),
        });
    }
    let mut reversed: Vec<Arc<StepKernel>> = Vec::with_capacity(steps.len());
    let mut previous: Option<&Arc<StepKernel>> = None;
    for kernel in steps.steps.iter().rev() {
        let adjoint = match (previous, reversed.last()) {
            (Some(p), Some(last)) if Arc::ptr_eq(p, kernel) => Arc::clone(last),
            _ => Arc::new(kernel.adjoint()),
        };
        reversed.push(adjoint);
        previous = Some(kernel);
    }
    Ok(StepSequence {
        steps: reversed,
        ..steps.clone()
    })
}

/// Vacuum-compressed Evans–Hudson flow and its locality record.
#[derive(Debug, Clone)]
pub struct EvansHudsonFlow {
    /// Compressed flow after `k = 0..=K` steps.
    pub outputs: Vec<LocalOperator>,
    /// Max-norm of the part of each output not supported in `Δ_n`.
    pub leaks: Vec<f64>,
    pub channels: usize,
}

impl EvansHudsonFlow {
    pub fn last(&self) -> &LocalOperator {
        self.outputs.last().expect("flow has at least the initial value")
    }

    pub fn max_leak(&self) -> f64 {
        self.leaks.iter().copied().fold(0.0, f64::max)
    }
}

/// Flow `X ↦ V_K* ⋯ V_1* (X ⊗ I) V_1 ⋯ V_K` with
/// `V = exp(√h Σ_j (W_j ⊗ |j⟩⟨0| − W_j* ⊗ |0⟩⟨j|))`, one channel per shell
/// of level `≤ n`, compressed by the vacuum after every step.
///
/// `x` may live on any window containing `Δ_n`; the shells are embedded
/// there, so the recorded leak measures whether the flow stays in `Δ_n`.
pub fn evans_hudson_flow(
    shells: &ShellFamily,
    level: usize,
    x: &LocalOperator,
    grid: ToyFockGrid,
    cap: &Capacity,
) -> Result<EvansHudsonFlow> {
    let ambient = x.window().clone();
    let inner = Window::new(level, shells.dim())?;
    if !inner.is_within(&ambient) {
        return Err(Error::WindowMismatch {
            left: level,
            right: ambient.radius(),
        });
    }
    if let Some(site) = support(x, SUPPORT_TOL).into_iter().find(|s| !inner.contains(s)) {
        return Err(Error::SupportViolation {
            level,
            site: site.to_string(),
        });
    }
    let couplings: Vec<CMat> = shells
        .embedded_terms(level, &ambient)?
        .into_iter()
        .map(|(_, w)| w.into_matrix())
        .collect();
    let side = x.side();
    let channels = couplings.len();
    cap.check_superop("Evans-Hudson step", (side as u128).saturating_mul(channels as u128 + 1))?;
    let v = coupling_step_matrix(&couplings, grid.h())?;

    let leak = |op: &LocalOperator| -> Result<f64> {
        let restricted = conditional_expectation(op, &inner)?.embed_into(&ambient)?;
        op.max_diff(&restricted)
    };
    let mut outputs = Vec::with_capacity(grid.steps() + 1);
    let mut leaks = Vec::with_capacity(grid.steps() + 1);
    let mut current = x.clone();
    leaks.push(leak(&current)?);
    outputs.push(current.clone());
    for _ in 0..grid.steps() {
        let next = compress_vacuum(&v, side, current.matrix());
        current = LocalOperator::new(ambient.clone(), x.local_dim(), next)?;
        leaks.push(leak(&current)?);
        outputs.push(current.clone());
    }
    Ok(EvansHudsonFlow {
        outputs,
        leaks,
        channels,
    })
}

/// Result of comparing two truncation levels on embedded inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct CompatibilityReport {
    pub low: usize,
    pub high: usize,
    pub inputs: usize,
    /// Max over inputs of the mismatch after `k = 0..=K` steps.
    pub per_step: Vec<f64>,
}

impl CompatibilityReport {
    pub fn max_mismatch(&self) -> f64 {
        self.per_step.iter().copied().fold(0.0, f64::max)
    }
}

/// Evolve every matrix unit of `A_{Δ_low}` under the level-`low` and the
/// level-`high` exact steps (matrix-free), and compare
/// `⟨e(g)| U_k |x e(0)⟩` after each step with the low-level result
/// embedded into `Δ_high`. `g` is the constant `probe`.
pub fn compatibility_mismatch(
    shells: &ShellFamily,
    low: usize,
    high: usize,
    grid: ToyFockGrid,
    probe: C64,
    cap: &Capacity,
) -> Result<CompatibilityReport> {
    let low_window = shells.window(low, cap)?;
    let basis = crate::tensor_algebra::matrix_unit_basis(&low_window, shells.local_dim());
    compatibility_mismatch_on(shells, low, high, grid, probe, &basis, cap)
}

/// As [`compatibility_mismatch`] for chosen inputs on `Δ_low`.
pub fn compatibility_mismatch_on(
    shells: &ShellFamily,
    low: usize,
    high: usize,
    grid: ToyFockGrid,
    probe: C64,
    inputs: &[LocalOperator],
    cap: &Capacity,
) -> Result<CompatibilityReport> {
    if low > high {
        return Err(Error::WindowMismatch { left: low, right: high });
    }
    let n = shells.local_dim();
    let low_window = shells.window(low, cap)?;
    let high_window = shells.window(high, cap)?;
    let low_seq = StepSequence::commutator(shells.partial_sum_on(low, &low_window)?.matrix(), grid)?;
    let high_seq = StepSequence::commutator(shells.partial_sum_on(high, &high_window)?.matrix(), grid)?;
    let vacuum = DiscretizedExponentialVector::vacuum(grid, 1);
    let g = exp_vector(|_| vec![probe], grid, 1)?;

    let low_side = low_window.side(n) as usize;
    let mut per_step = vec![0.0f64; grid.steps() + 1];
    for x in inputs {
        if x.window() != &low_window {
            return Err(Error::WindowMismatch {
                left: low,
                right: x.window().radius(),
            });
        }
        let low_traj = matrix_element_trajectory(&low_seq, &g, &vacuum, &linalg::vec_col(x.matrix()))?;
        let lifted = x.embed_into(&high_window)?;
        let high_traj = matrix_element_trajectory(&high_seq, &g, &vacuum, &linalg::vec_col(lifted.matrix()))?;
        for (k, (a, b)) in low_traj.iter().zip(&high_traj).enumerate() {
            let a =
                LocalOperator::new(low_window.clone(), n, linalg::unvec_col(a, low_side))?.embed_into(&high_window)?;
            let b = linalg::unvec_col(b, a.side());
            per_step[k] = per_step[k].max(linalg::max_abs_diff(a.matrix(), &b));
        }
    }
    Ok(CompatibilityReport {
        low,
        high,
        inputs: inputs.len(),
        per_step,
    })
}
