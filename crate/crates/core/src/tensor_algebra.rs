//! Finite truncations of the quasi-local spin algebra over `Z^d`.
//!
//! A [`Window`] is the box `Δ_n = {j : ‖j‖∞ ≤ n}` with a fixed lexicographic
//! site order; that order fixes the Kronecker factor order of every
//! [`LocalOperator`] on the window (first site = most significant factor).
//! The algebra `A_{Δ_n}` is represented by `N^{|Δ_n|}`-square matrices, and
//! the GNS space of the normalized trace is the same matrix space with
//! `⟨x, y⟩ = tr(x* y)`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use ndarray::Array2;
use num_complex::Complex64 as C64;
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, CMat};

/// Default support-detection tolerance (max-norm).
pub const SUPPORT_TOL: f64 = 1e-10;

/// Size limits for dense objects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Capacity {
    /// Largest allowed matrix side `N^{|Δ_n|}` for algebra elements.
    pub max_local_side: usize,
    /// Largest allowed side of a matrix acting on vectorized operators
    /// (GNS operators and superoperators).
    pub max_superop_side: usize,
}

impl Default for Capacity {
    fn default() -> Self {
        Capacity {
            max_local_side: 256,
            max_superop_side: 1024,
        }
    }
}

impl Capacity {
    pub fn check_local(&self, what: &str, side: u128) -> Result<usize> {
        check_cap(what, side, self.max_local_side)
    }

    pub fn check_superop(&self, what: &str, side: u128) -> Result<usize> {
        check_cap(what, side, self.max_superop_side)
    }
}

fn check_cap(what: &str, side: u128, cap: usize) -> Result<usize> {
    if side > cap as u128 {
        Err(Error::Capacity {
            what: what.to_string(),
            dimension: side,
            cap,
        })
    } else {
        Ok(side as usize)
    }
}

/// `base^exp`, saturating at `u128::MAX`.
pub fn checked_side(base: usize, exp: usize) -> u128 {
    (base as u128)
        .checked_pow(exp.min(u32::MAX as usize) as u32)
        .unwrap_or(u128::MAX)
}

/// A lattice position `j ∈ Z^d`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SiteIndex(pub Vec<i64>);

impl SiteIndex {
    pub fn origin(d: usize) -> Self {
        SiteIndex(vec![0; d])
    }

    /// Sup-norm `max_i |j_i|`.
    pub fn norm(&self) -> u64 {
        self.0.iter().map(|c| c.unsigned_abs()).max().unwrap_or(0)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

impl fmt::Display for SiteIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.len() == 1 {
            write!(f, "{}", self.0[0])
        } else {
            let parts: Vec<String> = self.0.iter().map(|c| c.to_string()).collect();
            write!(f, "({})", parts.join(","))
        }
    }
}

impl From<i64> for SiteIndex {
    fn from(j: i64) -> Self {
        SiteIndex(vec![j])
    }
}

/// The box `Δ_n` in `Z^d` with its sites in lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    radius: usize,
    dim: usize,
    sites: Vec<SiteIndex>,
}

impl Window {
    /// Builds `Δ_n` without any size check.
    pub fn new(radius: usize, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::ZeroLatticeDim);
        }
        let r = radius as i64;
        let mut sites = vec![SiteIndex(Vec::with_capacity(dim))];
        for _ in 0..dim {
            sites = sites
                .into_iter()
                .flat_map(|prefix| {
                    (-r..=r).map(move |c| {
                        let mut coords = prefix.0.clone();
                        coords.push(c);
                        SiteIndex(coords)
                    })
                })
                .collect();
        }
        Ok(Window { radius, dim, sites })
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sites(&self) -> &[SiteIndex] {
        &self.sites
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn position(&self, site: &SiteIndex) -> Option<usize> {
        self.sites.binary_search(site).ok()
    }

    pub fn contains(&self, site: &SiteIndex) -> bool {
        self.position(site).is_some()
    }

    /// `true` when every site of `self` is a site of `other`.
    pub fn is_within(&self, other: &Window) -> bool {
        self.dim == other.dim && self.radius <= other.radius
    }

    /// Matrix side `N^{|Δ_n|}`.
    pub fn side(&self, local_dim: usize) -> u128 {
        checked_side(local_dim, self.len())
    }
}

/// `Δ_n` in `Z^d`, rejecting windows whose algebra would exceed the cap.
pub fn make_window(radius: usize, dim: usize, local_dim: usize, cap: &Capacity) -> Result<Window> {
    if local_dim < 2 {
        return Err(Error::LocalDim(local_dim));
    }
    if dim == 0 {
        return Err(Error::ZeroLatticeDim);
    }
    // (2n+1)^d sites; check before allocating the site list
    let count = checked_side(2 * radius + 1, dim);
    let side = if count > 128 {
        u128::MAX
    } else {
        checked_side(local_dim, count as usize)
    };
    cap.check_local(&format!("window Δ_{radius} (d={dim}, N={local_dim})"), side)?;
    Window::new(radius, dim)
}

/// `∂Δ_n = {j : ‖j‖ = n}` in canonical order.
pub fn boundary_sites(radius: usize, dim: usize) -> Result<Vec<SiteIndex>> {
    if radius == 0 {
        return Err(Error::BoundaryRadiusZero);
    }
    Ok(Window::new(radius, dim)?
        .sites
        .into_iter()
        .filter(|s| s.norm() == radius as u64)
        .collect())
}

/// Sites a shell at `level` may act on: `∂Δ_level`, or the origin for
/// level 0 (single-site models).
pub fn shell_sites(level: usize, dim: usize) -> Result<Vec<SiteIndex>> {
    if level == 0 {
        if dim == 0 {
            return Err(Error::ZeroLatticeDim);
        }
        Ok(vec![SiteIndex::origin(dim)])
    } else {
        boundary_sites(level, dim)
    }
}

/// An element of `A_{Δ_n}` (equivalently a vector of its GNS space).
#[derive(Debug, Clone, PartialEq)]
pub struct LocalOperator {
    window: Window,
    local_dim: usize,
    matrix: CMat,
}

impl LocalOperator {
    pub fn new(window: Window, local_dim: usize, matrix: CMat) -> Result<Self> {
        if local_dim < 2 {
            return Err(Error::LocalDim(local_dim));
        }
        let side = window.side(local_dim);
        if matrix.nrows() as u128 != side || matrix.ncols() as u128 != side {
            return Err(Error::DimensionMismatch(format!(
                "matrix is {}x{}, window needs side {side}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        Ok(LocalOperator {
            window,
            local_dim,
            matrix,
        })
    }

    pub fn identity(window: &Window, local_dim: usize) -> Self {
        let side = window.side(local_dim) as usize;
        LocalOperator {
            window: window.clone(),
            local_dim,
            matrix: linalg::identity(side),
        }
    }

    pub fn zero(window: &Window, local_dim: usize) -> Self {
        let side = window.side(local_dim) as usize;
        LocalOperator {
            window: window.clone(),
            local_dim,
            matrix: linalg::zeros(side),
        }
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

    pub fn into_matrix(self) -> CMat {
        self.matrix
    }

    pub fn side(&self) -> usize {
        self.matrix.nrows()
    }

    /// Same window and local dimension, new matrix (unchecked shape).
    pub(crate) fn with_matrix(&self, matrix: CMat) -> Self {
        debug_assert_eq!(matrix.dim(), self.matrix.dim());
        LocalOperator {
            window: self.window.clone(),
            local_dim: self.local_dim,
            matrix,
        }
    }

    fn check_same(&self, other: &LocalOperator) -> Result<()> {
        if self.window != other.window {
            return Err(Error::WindowMismatch {
                left: self.window.radius,
                right: other.window.radius,
            });
        }
        if self.local_dim != other.local_dim {
            return Err(Error::DimensionMismatch(format!(
                "local dimensions {} and {}",
                self.local_dim, other.local_dim
            )));
        }
        Ok(())
    }

    pub fn adjoint(&self) -> Self {
        self.with_matrix(linalg::adjoint(&self.matrix))
    }

    pub fn mul(&self, other: &LocalOperator) -> Result<Self> {
        self.check_same(other)?;
        Ok(self.with_matrix(self.matrix.dot(&other.matrix)))
    }

    pub fn add(&self, other: &LocalOperator) -> Result<Self> {
        self.check_same(other)?;
        Ok(self.with_matrix(&self.matrix + &other.matrix))
    }

    pub fn sub(&self, other: &LocalOperator) -> Result<Self> {
        self.check_same(other)?;
        Ok(self.with_matrix(&self.matrix - &other.matrix))
    }

    pub fn scale(&self, z: C64) -> Self {
        self.with_matrix(self.matrix.mapv(|v| v * z))
    }

    /// `x ⊗ 1` on a larger window.
    pub fn embed_into(&self, target: &Window) -> Result<Self> {
        if self.window.dim != target.dim {
            return Err(Error::DimensionMismatch(format!(
                "lattice dimensions {} and {}",
                self.window.dim, target.dim
            )));
        }
        if self.window == *target {
            return Ok(self.clone());
        }
        embed_on_sites(&self.matrix, &self.window.sites, target, self.local_dim)
    }

    pub fn normalized_trace(&self) -> C64 {
        normalized_trace(self)
    }

    /// Max-norm distance to another operator on the same window.
    pub fn max_diff(&self, other: &LocalOperator) -> Result<f64> {
        self.check_same(other)?;
        Ok(linalg::max_abs_diff(&self.matrix, &other.matrix))
    }

    /// GNS norm `tr(x*x)^{1/2}`.
    pub fn gns_norm(&self) -> f64 {
        linalg::frobenius(&self.matrix) / (self.side() as f64).sqrt()
    }
}

/// Place `op`, whose tensor factors correspond to `sites` in the given
/// order, into `target` with identity on every other site.
pub fn embed_on_sites(op: &CMat, sites: &[SiteIndex], target: &Window, local_dim: usize) -> Result<LocalOperator> {
    if local_dim < 2 {
        return Err(Error::LocalDim(local_dim));
    }
    let mut positions = Vec::with_capacity(sites.len());
    let mut seen = BTreeSet::new();
    for site in sites {
        if site.dim() != target.dim {
            return Err(Error::SiteDimension {
                site: site.to_string(),
                got: site.dim(),
                expected: target.dim,
            });
        }
        let pos = target.position(site).ok_or_else(|| Error::SiteOutsideWindow {
            site: site.to_string(),
            radius: target.radius,
        })?;
        if !seen.insert(pos) {
            return Err(Error::DuplicateSite(site.to_string()));
        }
        positions.push(pos);
    }
    let sub_side = checked_side(local_dim, sites.len());
    if op.nrows() as u128 != sub_side || op.ncols() as u128 != sub_side {
        return Err(Error::DimensionMismatch(format!(
            "operator is {}x{}, {} sites need side {sub_side}",
            op.nrows(),
            op.ncols(),
            sites.len()
        )));
    }
    let side = target.side(local_dim) as usize;
    let (sel, rest) = offset_tables(target.len(), &positions, local_dim);
    let mut out = Array2::zeros((side, side));
    for &r in &rest {
        for (i, &oi) in sel.iter().enumerate() {
            for (j, &oj) in sel.iter().enumerate() {
                out[(oi + r, oj + r)] = op[(i, j)];
            }
        }
    }
    Ok(LocalOperator {
        window: target.clone(),
        local_dim,
        matrix: out,
    })
}

/// Offsets contributed by the selected positions (indexed by the
/// sub-system multi-index, first listed site most significant) and by the
/// remaining positions (in window order).
fn offset_tables(num_sites: usize, positions: &[usize], local_dim: usize) -> (Vec<usize>, Vec<usize>) {
    let weight = |pos: usize| local_dim.pow((num_sites - 1 - pos) as u32);
    let digits_to_offsets = |ps: &[usize]| -> Vec<usize> {
        let mut offs = vec![0usize];
        for &p in ps {
            let w = weight(p);
            offs = offs
                .iter()
                .flat_map(|&o| (0..local_dim).map(move |d| o + d * w))
                .collect();
        }
        offs
    };
    let rest_positions: Vec<usize> = (0..num_sites).filter(|p| !positions.contains(p)).collect();
    (digits_to_offsets(positions), digits_to_offsets(&rest_positions))
}

/// Kronecker product of single-site factors over `target`, identity at
/// sites without a factor.
pub fn embed(factors: &BTreeMap<SiteIndex, CMat>, target: &Window, local_dim: usize) -> Result<LocalOperator> {
    let mut sites = Vec::with_capacity(factors.len());
    let mut product = linalg::identity(1);
    for (site, factor) in factors {
        if factor.nrows() != local_dim || factor.ncols() != local_dim {
            return Err(Error::FactorDimension {
                site: site.to_string(),
                rows: factor.nrows(),
                cols: factor.ncols(),
                expected: local_dim,
            });
        }
        if !target.contains(site) {
            return Err(Error::SiteOutsideWindow {
                site: site.to_string(),
                radius: target.radius,
            });
        }
        sites.push(site.clone());
        product = linalg::kron(&product, factor);
    }
    embed_on_sites(&product, &sites, target, local_dim)
}

/// `Tr(x) / N^{|Δ|}`.
pub fn normalized_trace(x: &LocalOperator) -> C64 {
    linalg::trace(&x.matrix) / x.side() as f64
}

/// GNS inner product `tr(x* y)`, conjugate-linear in `x`.
pub fn gns_inner(x: &LocalOperator, y: &LocalOperator) -> Result<C64> {
    x.check_same(y)?;
    let sum: C64 = x.matrix.iter().zip(y.matrix.iter()).map(|(a, b)| a.conj() * b).sum();
    Ok(sum / x.side() as f64)
}

pub fn commutator(a: &LocalOperator, x: &LocalOperator) -> Result<LocalOperator> {
    a.check_same(x)?;
    Ok(a.with_matrix(linalg::commutator(&a.matrix, &x.matrix)))
}

/// `(tr_j x / N) ⊗ 1_j`: the part of `x` that acts trivially at site `pos`.
fn average_out_position(x: &LocalOperator, pos: usize) -> CMat {
    let n = x.local_dim;
    let w = n.pow((x.window.len() - 1 - pos) as u32);
    let side = x.side();
    let digit = |idx: usize| (idx / w) % n;
    let mut out = Array2::zeros((side, side));
    for row in 0..side {
        let rd = digit(row);
        for col in 0..side {
            if digit(col) != rd {
                continue;
            }
            let mut acc = C64::new(0.0, 0.0);
            for a in 0..n {
                acc += x.matrix[(row - rd * w + a * w, col - rd * w + a * w)];
            }
            out[(row, col)] = acc / n as f64;
        }
    }
    out
}

/// Sites at which `x` does not factor as the identity, decided in max-norm
/// with tolerance `tol`.
pub fn support(x: &LocalOperator, tol: f64) -> BTreeSet<SiteIndex> {
    (0..x.window.len())
        .filter(|&pos| linalg::max_abs_diff(&x.matrix, &average_out_position(x, pos)) > tol)
        .map(|pos| x.window.sites[pos].clone())
        .collect()
}

/// Normalized partial trace onto a sub-window: the conditional expectation
/// `A_{Δ_n} → A_{Δ_p}`.
pub fn conditional_expectation(x: &LocalOperator, sub: &Window) -> Result<LocalOperator> {
    if !sub.is_within(&x.window) {
        return Err(Error::WindowMismatch {
            left: sub.radius,
            right: x.window.radius,
        });
    }
    let positions: Vec<usize> = sub
        .sites
        .iter()
        .map(|s| x.window.position(s).expect("sub-window site"))
        .collect();
    let (sel, rest) = offset_tables(x.window.len(), &positions, x.local_dim);
    let sub_side = sel.len();
    let mut out = Array2::zeros((sub_side, sub_side));
    for (i, &oi) in sel.iter().enumerate() {
        for (j, &oj) in sel.iter().enumerate() {
            let acc: C64 = rest.iter().map(|&r| x.matrix[(oi + r, oj + r)]).sum();
            out[(i, j)] = acc / rest.len() as f64;
        }
    }
    LocalOperator::new(sub.clone(), x.local_dim, out)
}

/// GNS-orthonormal matrix-unit basis `N^{|Δ|/2} E_{ij}`, listed in
/// column-stacking order (`k = i + j·side`).
pub fn matrix_unit_basis(window: &Window, local_dim: usize) -> Vec<LocalOperator> {
    let side = window.side(local_dim) as usize;
    let scale = (side as f64).sqrt();
    let mut out = Vec::with_capacity(side * side);
    for j in 0..side {
        for i in 0..side {
            let mut m = Array2::zeros((side, side));
            m[(i, j)] = C64::new(scale, 0.0);
            out.push(LocalOperator {
                window: window.clone(),
                local_dim,
                matrix: m,
            });
        }
    }
    out
}

/// Pauli matrices `(σ_x, σ_y, σ_z)`.
pub fn pauli() -> (CMat, CMat, CMat) {
    let o = C64::new(0.0, 0.0);
    let l = C64::new(1.0, 0.0);
    let i = C64::new(0.0, 1.0);
    (
        ndarray::array![[o, l], [l, o]],
        ndarray::array![[o, -i], [i, o]],
        ndarray::array![[l, o], [o, -l]],
    )
}

/// The truncated formal sum `r = Σ_k W_k`, one operator per shell, each
/// stored on its own window `Δ_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShellFamily {
    local_dim: usize,
    dim: usize,
    shells: BTreeMap<usize, LocalOperator>,
    max_shell: usize,
}

impl ShellFamily {
    /// Validates that each `W_k` is supported on the shell sites of level
    /// `k` (tolerance [`SUPPORT_TOL`]).
    pub fn new(local_dim: usize, dim: usize, shells: Vec<(usize, LocalOperator)>) -> Result<Self> {
        let family = Self::new_unchecked(local_dim, dim, shells)?;
        for (&level, w) in &family.shells {
            let allowed: BTreeSet<SiteIndex> = shell_sites(level, dim)?.into_iter().collect();
            if let Some(bad) = support(w, SUPPORT_TOL).into_iter().find(|s| !allowed.contains(s)) {
                return Err(Error::SupportViolation {
                    level,
                    site: bad.to_string(),
                });
            }
        }
        Ok(family)
    }

    /// Skips the boundary-support check; used to build negative controls.
    pub fn new_unchecked(local_dim: usize, dim: usize, shells: Vec<(usize, LocalOperator)>) -> Result<Self> {
        if local_dim < 2 {
            return Err(Error::LocalDim(local_dim));
        }
        if dim == 0 {
            return Err(Error::ZeroLatticeDim);
        }
        let mut map = BTreeMap::new();
        for (level, w) in shells {
            if w.local_dim != local_dim || w.window.dim != dim || w.window.radius != level {
                return Err(Error::DimensionMismatch(format!(
                    "shell {level} must live on Δ_{level} with N={local_dim}, d={dim}"
                )));
            }
            if map.insert(level, w).is_some() {
                return Err(Error::DuplicateShell(level));
            }
        }
        let max_shell = map.keys().next_back().copied().unwrap_or(0);
        Ok(ShellFamily {
            local_dim,
            dim,
            shells: map,
            max_shell,
        })
    }

    /// Builds each `W_k` from an operator on the shell sites of level `k`.
    pub fn from_site_operators(
        local_dim: usize,
        dim: usize,
        shells: Vec<(usize, CMat)>,
        cap: &Capacity,
    ) -> Result<Self> {
        let mut ops = Vec::with_capacity(shells.len());
        for (level, m) in shells {
            let window = make_window(level, dim, local_dim, cap)?;
            let sites = shell_sites(level, dim)?;
            ops.push((level, embed_on_sites(&m, &sites, &window, local_dim)?));
        }
        Self::new(local_dim, dim, ops)
    }

    /// Independent uniformly random operators on the shell sites of each
    /// listed level.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        local_dim: usize,
        dim: usize,
        levels: &[usize],
        cap: &Capacity,
    ) -> Result<Self> {
        let mut shells = Vec::with_capacity(levels.len());
        for &level in levels {
            let count = shell_sites(level, dim)?.len();
            let side = cap.check_local(&format!("shell {level}"), checked_side(local_dim, count))?;
            shells.push((level, linalg::random_matrix(rng, side, side)));
        }
        Self::from_site_operators(local_dim, dim, shells, cap)
    }

    pub fn local_dim(&self) -> usize {
        self.local_dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_shell(&self) -> usize {
        self.max_shell
    }

    pub fn shells(&self) -> impl Iterator<Item = (usize, &LocalOperator)> {
        self.shells.iter().map(|(&k, w)| (k, w))
    }

    pub fn levels(&self) -> Vec<usize> {
        self.shells.keys().copied().collect()
    }

    /// `r* = Σ W_k*`.
    pub fn adjoint(&self) -> Self {
        ShellFamily {
            local_dim: self.local_dim,
            dim: self.dim,
            shells: self.shells.iter().map(|(&k, w)| (k, w.adjoint())).collect(),
            max_shell: self.max_shell,
        }
    }

    /// Operator norm of each shell.
    pub fn shell_norms(&self) -> Vec<(usize, f64)> {
        self.shells
            .iter()
            .map(|(&k, w)| (k, linalg::op_norm(w.matrix())))
            .collect()
    }

    fn check_level(&self, level: usize) -> Result<()> {
        if level > self.max_shell {
            return Err(Error::LevelOutOfRange {
                level,
                max: self.max_shell,
            });
        }
        Ok(())
    }

    /// The window `Δ_n` of truncation level `n`, capacity-checked.
    pub fn window(&self, level: usize, cap: &Capacity) -> Result<Window> {
        self.check_level(level)?;
        make_window(level, self.dim, self.local_dim, cap)
    }

    /// Shells of level `≤ n`, each embedded into `target`.
    pub fn embedded_terms(&self, level: usize, target: &Window) -> Result<Vec<(usize, LocalOperator)>> {
        self.check_level(level)?;
        self.shells
            .range(..=level)
            .map(|(&k, w)| Ok((k, w.embed_into(target)?)))
            .collect()
    }

    /// The partial sum `r_n = Σ_{k≤n} W_k` on `Δ_n`.
    pub fn partial_sum(&self, level: usize, cap: &Capacity) -> Result<LocalOperator> {
        let window = self.window(level, cap)?;
        self.partial_sum_on(level, &window)
    }

    /// `r_n` embedded into an arbitrary window containing `Δ_n`.
    pub fn partial_sum_on(&self, level: usize, target: &Window) -> Result<LocalOperator> {
        let mut acc = LocalOperator::zero(target, self.local_dim);
        for (_, w) in self.embedded_terms(level, target)? {
            acc.matrix += &w.matrix;
        }
        Ok(acc)
    }
}
