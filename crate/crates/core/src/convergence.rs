//! Convergence analysis of the inner BP loop.
//!
//! With `b` active edges between indirect factors and variables, the
//! factor-to-variable variances evolve as `v ← f(v)` and, once variances are
//! fixed, the means follow the affine iteration `r ← r̃ − Ω·r`. All matrices
//! are diagonal or block-structured over the canonical edge order, so `Ω` is
//! applied as an operator:
//!
//! * `Γ·Σ⁻¹·x`: per edge, the sum of `x_j / v_j` over the other edges of its variable
//! * `𝔇(A)⁻¹`: divide by `L_k + Σ_{j≠k} 1/v_j` over the same edges
//! * `D = C⁻¹ΠC`: per edge, `(1/C_k)·Σ_{j≠k} C_j·u_j` over the other edges of its factor
//!
//! Randomized damping with masks `Q`, `R` turns `Ω` into
//! `Ω̄ = QΩ + α₂RΩ − α₁R`.

use nalgebra::{DMatrix, DVector, Schur};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::factor_graph::{build_graph_with, FactorGraph};
use crate::gnbp::{damping_mask, exclusive_sums, ActiveTopology, Damping, SolverConfig};
use crate::measurement::MeasurementSet;
use crate::network::NetworkModel;
use crate::wls::{gauss_newton, GaussNewtonConfig};

/// Largest edge count `analyze` accepts.
pub const MAX_EDGES: usize = 20_000;
/// Operators up to this size are handled by a dense eigensolver directly.
pub const DENSE_LIMIT: usize = 64;
/// Arnoldi failures fall back to the dense eigensolver up to this size.
pub const DENSE_FALLBACK_LIMIT: usize = 3000;

/// Diagonal and incidence data of the edge-indexed matrices at one
/// linearization point. Index `k` runs over the active edges in canonical
/// order.
#[derive(Debug, Clone)]
pub struct ConvergenceMatrices {
    /// Graph edge id of each index.
    pub edges: Vec<usize>,
    /// `C`
    pub coefficient: Vec<f64>,
    /// `Σ_a`
    pub factor_variance: Vec<f64>,
    /// `r_a`
    pub factor_residual: Vec<f64>,
    /// `L`
    pub local_precision: Vec<f64>,
    /// `L·r_b`
    pub local_information: Vec<f64>,
    /// Blocks of `Π`, one per indirect factor with active edges.
    pub factor_ptr: Vec<usize>,
    /// Indices sharing a variable, grouped per variable (structure of `Γ`).
    pub var_ptr: Vec<usize>,
    pub var_members: Vec<usize>,
    /// Variable of each index.
    pub variable: Vec<usize>,
    max_degree: usize,
}

impl ConvergenceMatrices {
    pub fn from_graph(graph: &FactorGraph) -> Self {
        let topo = ActiveTopology::new(graph);
        let edges = topo.factor_edges.clone();
        let blocks: Vec<usize> = topo.factor_ptr.windows(2).map(|w| w[1] - w[0]).collect();
        let pick = |f: &dyn Fn(usize) -> f64| edges.iter().map(|&e| f(e)).collect::<Vec<f64>>();
        let coefficient = pick(&|e| graph.edges[e].coefficient);
        let factor_variance = pick(&|e| graph.factors[graph.edges[e].factor].variance);
        let factor_residual = pick(&|e| graph.factors[graph.edges[e].factor].residual);
        let local_precision = pick(&|e| graph.prior_precision[graph.edges[e].variable]);
        let local_information = pick(&|e| graph.prior_information[graph.edges[e].variable]);
        let variable = edges.iter().map(|&e| graph.edges[e].variable).collect();
        let mut m = ConvergenceMatrices::new(
            coefficient,
            factor_variance,
            factor_residual,
            local_precision,
            local_information,
            &blocks,
            variable,
        );
        m.edges = edges;
        m
    }

    /// Matrices from raw per-index data; `blocks` are the consecutive factor
    /// block sizes and `variable` the variable of each index.
    pub fn new(
        coefficient: Vec<f64>,
        factor_variance: Vec<f64>,
        factor_residual: Vec<f64>,
        local_precision: Vec<f64>,
        local_information: Vec<f64>,
        blocks: &[usize],
        variable: Vec<usize>,
    ) -> Self {
        let b = coefficient.len();
        assert!(
            [factor_variance.len(), factor_residual.len(), local_precision.len(), local_information.len(), variable.len()]
                .iter()
                .all(|&l| l == b),
            "inconsistent lengths"
        );
        assert_eq!(blocks.iter().sum::<usize>(), b, "blocks must cover every index");
        let mut factor_ptr = vec![0];
        for &d in blocks {
            factor_ptr.push(factor_ptr.last().unwrap() + d);
        }
        let vars = variable.iter().map(|v| v + 1).max().unwrap_or(0);
        let mut by_var = vec![Vec::new(); vars];
        for (k, &v) in variable.iter().enumerate() {
            by_var[v].push(k);
        }
        let mut var_ptr = vec![0];
        let mut var_members = Vec::with_capacity(b);
        let mut max_degree = blocks.iter().copied().max().unwrap_or(0);
        for members in by_var.iter().filter(|m| !m.is_empty()) {
            var_members.extend_from_slice(members);
            var_ptr.push(var_members.len());
            max_degree = max_degree.max(members.len());
        }
        ConvergenceMatrices {
            edges: (0..b).collect(),
            coefficient,
            factor_variance,
            factor_residual,
            local_precision,
            local_information,
            factor_ptr,
            var_ptr,
            var_members,
            variable,
            max_degree,
        }
    }

    pub fn dim(&self) -> usize {
        self.edges.len()
    }

    fn buffers(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let d = self.max_degree;
        (vec![0.0; d], vec![0.0; d + 1], vec![0.0; d])
    }

    /// `𝔇(ΓΣ⁻¹Γᵀ + L)` for variances `v`.
    pub fn a_diagonal(&self, v: &[f64]) -> Vec<f64> {
        let (mut a, mut prefix, mut out) = self.buffers();
        let mut diag = vec![0.0; self.dim()];
        for g in 0..self.var_ptr.len() - 1 {
            let members = &self.var_members[self.var_ptr[g]..self.var_ptr[g + 1]];
            let d = members.len();
            for (i, &k) in members.iter().enumerate() {
                a[i] = 1.0 / v[k];
            }
            exclusive_sums(&a[..d], &mut prefix, &mut out[..d]);
            for (i, &k) in members.iter().enumerate() {
                diag[k] = self.local_precision[k] + out[i];
            }
        }
        diag
    }

    /// `Σ_{j≠k} g(C_j)·u_j` within each factor block, with `g` the identity
    /// or the square.
    fn factor_exclusive(&self, u: &[f64], squared: bool, out: &mut [f64]) {
        let (mut a, mut prefix, mut ex) = self.buffers();
        for w in self.factor_ptr.windows(2) {
            let d = w[1] - w[0];
            for i in 0..d {
                let k = w[0] + i;
                let c = self.coefficient[k];
                a[i] = if squared { c * c } else { c } * u[k];
            }
            exclusive_sums(&a[..d], &mut prefix, &mut ex[..d]);
            for i in 0..d {
                out[w[0] + i] = ex[i];
            }
        }
    }

    /// One step of the variance recursion.
    pub fn variance_step(&self, v: &[f64]) -> Vec<f64> {
        let diag = self.a_diagonal(v);
        let u: Vec<f64> = diag.iter().map(|a| 1.0 / a).collect();
        let mut out = vec![0.0; self.dim()];
        self.factor_exclusive(&u, true, &mut out);
        for k in 0..self.dim() {
            let c = self.coefficient[k];
            out[k] = (self.factor_variance[k] + out[k]) / (c * c);
        }
        out
    }

    /// Iterates the variance recursion from `v0` until the largest relative
    /// change drops below `tol`.
    pub fn variance_fixed_point(&self, v0: &[f64], tol: f64, max_iter: usize) -> Result<Vec<f64>> {
        assert!(v0.iter().all(|v| *v > 0.0), "initial variances must be positive");
        let mut v = v0.to_vec();
        for _ in 0..max_iter {
            let next = self.variance_step(&v);
            let change = next
                .iter()
                .zip(&v)
                .map(|(a, b)| ((a - b) / a).abs())
                .fold(0.0, f64::max);
            v = next;
            if change < tol {
                return Ok(v);
            }
        }
        Err(Error::VarianceNotConverged(max_iter))
    }

    pub fn omega(&self, v_hat: &[f64]) -> OmegaOperator<'_> {
        let a_diag = self.a_diagonal(v_hat);
        OmegaOperator {
            m: self,
            inv_v: v_hat.iter().map(|v| 1.0 / v).collect(),
            a_diag,
        }
    }
}

/// `Ω = D·𝔇(Â)⁻¹·Γ·Σ̂⁻¹` applied without forming the matrix.
pub struct OmegaOperator<'m> {
    m: &'m ConvergenceMatrices,
    inv_v: Vec<f64>,
    a_diag: Vec<f64>,
}

impl OmegaOperator<'_> {
    pub fn dim(&self) -> usize {
        self.m.dim()
    }

    /// `y = Ω·x`
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        let m = self.m;
        let (mut a, mut prefix, mut out) = m.buffers();
        let mut u = vec![0.0; m.dim()];
        for g in 0..m.var_ptr.len() - 1 {
            let members = &m.var_members[m.var_ptr[g]..m.var_ptr[g + 1]];
            let d = members.len();
            for (i, &k) in members.iter().enumerate() {
                a[i] = x[k] * self.inv_v[k];
            }
            exclusive_sums(&a[..d], &mut prefix, &mut out[..d]);
            for (i, &k) in members.iter().enumerate() {
                u[k] = out[i] / self.a_diag[k];
            }
        }
        m.factor_exclusive(&u, false, y);
        for k in 0..m.dim() {
            y[k] /= m.coefficient[k];
        }
    }

    /// `r̃ = C⁻¹r_a − D·𝔇(Â)⁻¹·L·r_b`
    pub fn r_tilde(&self) -> Vec<f64> {
        let m = self.m;
        let u: Vec<f64> = (0..m.dim()).map(|k| m.local_information[k] / self.a_diag[k]).collect();
        let mut y = vec![0.0; m.dim()];
        m.factor_exclusive(&u, false, &mut y);
        (0..m.dim())
            .map(|k| (m.factor_residual[k] - y[k]) / m.coefficient[k])
            .collect()
    }

    pub fn dense(&self) -> DMatrix<f64> {
        dense_from_operator(self.dim(), |x, y| self.apply(x, y))
    }

    /// `r̂ = (I + Ω)⁻¹·r̃` by dense LU.
    pub fn mean_fixed_point(&self) -> Result<Vec<f64>> {
        let b = self.dim();
        let mut lhs = self.dense();
        for i in 0..b {
            lhs[(i, i)] += 1.0;
        }
        let rhs = DVector::from_vec(self.r_tilde());
        lhs.lu()
            .solve(&rhs)
            .map(|r| r.as_slice().to_vec())
            .ok_or(Error::SingularJacobian("mean fixed point"))
    }

    pub fn damped<'a>(&'a self, mask: &'a [bool], alpha1: f64) -> DampedOmega<'a> {
        assert_eq!(mask.len(), self.dim());
        DampedOmega { omega: self, mask, alpha1 }
    }
}

/// `Ω̄ = QΩ + α₂RΩ − α₁R` for the diagonal 0/1 mask `R` (`Q = I − R`).
pub struct DampedOmega<'a> {
    omega: &'a OmegaOperator<'a>,
    mask: &'a [bool],
    alpha1: f64,
}

impl DampedOmega<'_> {
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.omega.apply(x, y);
        let alpha2 = 1.0 - self.alpha1;
        for k in 0..y.len() {
            if self.mask[k] {
                y[k] = alpha2 * y[k] - self.alpha1 * x[k];
            }
        }
    }

    pub fn dense(&self) -> DMatrix<f64> {
        dense_from_operator(self.omega.dim(), |x, y| self.apply(x, y))
    }
}

/// `Ω̄` from an explicit `Ω`.
pub fn build_omega_damped(omega: &DMatrix<f64>, mask: &[bool], alpha1: f64) -> DMatrix<f64> {
    let alpha2 = 1.0 - alpha1;
    let mut out = omega.clone();
    for (i, &damped) in mask.iter().enumerate() {
        if damped {
            for j in 0..out.ncols() {
                out[(i, j)] *= alpha2;
            }
            out[(i, i)] -= alpha1;
        }
    }
    out
}

pub fn dense_from_operator(b: usize, apply: impl Fn(&[f64], &mut [f64])) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(b, b);
    let mut e = vec![0.0; b];
    let mut col = vec![0.0; b];
    for j in 0..b {
        e[j] = 1.0;
        apply(&e, &mut col);
        out.column_mut(j).copy_from_slice(&col);
        e[j] = 0.0;
    }
    out
}

/// Largest eigenvalue modulus of a dense matrix.
pub fn spectral_radius_dense(m: &DMatrix<f64>) -> Result<f64> {
    let b = m.nrows();
    if b == 0 {
        return Ok(0.0);
    }
    let schur = Schur::try_new(m.clone(), f64::EPSILON, 100 * b.max(10)).ok_or(Error::EigenNotConverged(b))?;
    Ok(schur.complex_eigenvalues().iter().map(|l| l.norm()).fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArnoldiOptions {
    pub basis: usize,
    pub max_restarts: usize,
    pub tol: f64,
}

impl Default for ArnoldiOptions {
    fn default() -> Self {
        ArnoldiOptions {
            basis: 60,
            max_restarts: 300,
            tol: 1e-10,
        }
    }
}

fn cdot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn cnormalize(v: &mut [Complex64]) -> f64 {
    let n = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Givens rotation `[c s; −s̄ c]` mapping `(f, g)` to `(r, 0)`.
fn givens(f: Complex64, g: Complex64) -> (f64, Complex64) {
    if g == Complex64::new(0.0, 0.0) {
        return (1.0, Complex64::new(0.0, 0.0));
    }
    if f == Complex64::new(0.0, 0.0) {
        return (0.0, g.conj() / g.norm());
    }
    let (fa, ga) = (f.norm(), g.norm());
    let d = fa.hypot(ga);
    (fa / d, (f / fa) * g.conj() / d)
}

/// Applies `[x; y] ← [c s; −s̄ c]·[x; y]` elementwise.
fn rotate(x: &mut Complex64, y: &mut Complex64, c: f64, s: Complex64) {
    let t = *x * c + s * *y;
    *y = *y * c - s.conj() * *x;
    *x = t;
}

/// Swaps the adjacent diagonal entries `k`, `k+1` of the upper triangular
/// `t`, updating the Schur vectors `z`.
fn swap_schur(t: &mut DMatrix<Complex64>, z: &mut DMatrix<Complex64>, k: usize) {
    let n = t.nrows();
    let (t11, t22) = (t[(k, k)], t[(k + 1, k + 1)]);
    let (c, s) = givens(t[(k, k + 1)], t22 - t11);
    for j in k + 2..n {
        let (mut x, mut y) = (t[(k, j)], t[(k + 1, j)]);
        rotate(&mut x, &mut y, c, s);
        t[(k, j)] = x;
        t[(k + 1, j)] = y;
    }
    for i in 0..k {
        let (mut x, mut y) = (t[(i, k)], t[(i, k + 1)]);
        rotate(&mut x, &mut y, c, s.conj());
        t[(i, k)] = x;
        t[(i, k + 1)] = y;
    }
    t[(k, k)] = t22;
    t[(k + 1, k + 1)] = t11;
    for i in 0..z.nrows() {
        let (mut x, mut y) = (z[(i, k)], z[(i, k + 1)]);
        rotate(&mut x, &mut y, c, s.conj());
        z[(i, k)] = x;
        z[(i, k + 1)] = y;
    }
}

/// Complex Schur form `h = z·t·zᴴ` with the `lead` largest-modulus
/// eigenvalues moved to the top left, in decreasing modulus.
fn sorted_schur(h: DMatrix<Complex64>, lead: usize) -> Option<(DMatrix<Complex64>, DMatrix<Complex64>)> {
    let n = h.nrows();
    let (mut z, mut t) = Schur::try_new(h, f64::EPSILON, 100 * n.max(10))?.unpack();
    for j in 0..n {
        for i in j + 1..n {
            t[(i, j)] = Complex64::new(0.0, 0.0);
        }
    }
    for p in 0..lead.min(n) {
        let best = (p..n).max_by(|&a, &b| t[(a, a)].norm().total_cmp(&t[(b, b)].norm()))?;
        for k in (p..best).rev() {
            swap_schur(&mut t, &mut z, k);
        }
    }
    Some((z, t))
}

/// Spectral radius of the real operator `apply` by Krylov-Schur iteration
/// in complex arithmetic.
pub fn spectral_radius_arnoldi(b: usize, apply: impl Fn(&[f64], &mut [f64]), opts: &ArnoldiOptions) -> Result<f64> {
    if b == 0 {
        return Ok(0.0);
    }
    let zero = Complex64::new(0.0, 0.0);
    let m = opts.basis.min(b).max(2);
    let keep_target = (m / 2).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_a5d1);
    let mut v0: Vec<Complex64> = (0..b).map(|_| Complex64::new(rng.random_range(-1.0..1.0), 0.0)).collect();
    cnormalize(&mut v0);

    let mut basis: Vec<Vec<Complex64>> = vec![v0];
    let mut h = DMatrix::<Complex64>::zeros(m + 1, m);
    let mut k = 0;
    let (mut re, mut im) = (vec![0.0; b], vec![0.0; b]);
    let (mut are, mut aim) = (vec![0.0; b], vec![0.0; b]);
    let mut w = vec![zero; b];
    let mut scale: f64 = 0.0;
    for _ in 0..opts.max_restarts {
        let mut size = m;
        let mut breakdown = false;
        for j in k..m {
            for (i, c) in basis[j].iter().enumerate() {
                re[i] = c.re;
                im[i] = c.im;
            }
            apply(&re, &mut are);
            apply(&im, &mut aim);
            for i in 0..b {
                w[i] = Complex64::new(are[i], aim[i]);
            }
            scale = scale.max(w.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt());
            for _pass in 0..2 {
                for (i, q) in basis.iter().enumerate() {
                    let c = cdot(q, &w);
                    h[(i, j)] += c;
                    for (wk, qk) in w.iter_mut().zip(q) {
                        *wk -= c * qk;
                    }
                }
            }
            let beta = cnormalize(&mut w);
            h[(j + 1, j)] = Complex64::new(beta, 0.0);
            if beta <= 1e-13 * scale || beta == 0.0 {
                size = j + 1;
                breakdown = true;
                break;
            }
            basis.push(w.clone());
        }
        let hm = h.view((0, 0), (size, size)).into_owned();
        let keep = keep_target.min(size.saturating_sub(1)).max(1);
        let (z, t) = sorted_schur(hm, keep).ok_or(Error::EigenNotConverged(b))?;
        let lead = t[(0, 0)].norm();
        if breakdown {
            return Ok(lead);
        }
        let beta = h[(size, size - 1)];
        let coupling: Vec<Complex64> = (0..size).map(|j| beta * z[(size - 1, j)]).collect();
        if coupling[0].norm() <= opts.tol * lead.max(1e-3 * scale) {
            return Ok(lead);
        }
        // truncate to the leading Schur vectors and keep the residual direction
        let mut next: Vec<Vec<Complex64>> = Vec::with_capacity(m + 1);
        for col in 0..keep {
            let mut v = vec![zero; b];
            for (j, q) in basis.iter().take(size).enumerate() {
                let c = z[(j, col)];
                for (vk, qk) in v.iter_mut().zip(q) {
                    *vk += c * qk;
                }
            }
            next.push(v);
        }
        next.push(basis[size].clone());
        basis = next;
        h.fill(zero);
        for i in 0..keep {
            for j in 0..keep {
                h[(i, j)] = t[(i, j)];
            }
            h[(keep, i)] = coupling[i];
        }
        k = keep;
    }
    Err(Error::EigenNotConverged(b))
}

/// Spectral radius of an edge-indexed operator: dense for small sizes,
/// Arnoldi otherwise with a dense fallback.
pub fn spectral_radius(b: usize, apply: impl Fn(&[f64], &mut [f64])) -> Result<f64> {
    if b <= DENSE_LIMIT {
        return spectral_radius_dense(&dense_from_operator(b, &apply));
    }
    match spectral_radius_arnoldi(b, &apply, &ArnoldiOptions::default()) {
        Ok(rho) => Ok(rho),
        Err(Error::EigenNotConverged(_)) if b <= DENSE_FALLBACK_LIMIT => {
            log::debug!("Arnoldi did not converge for b = {b}; using the dense eigensolver");
            spectral_radius_dense(&dense_from_operator(b, &apply))
        }
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisConfig {
    /// Start, seed and damping are taken from the solver configuration so the
    /// masks match what the solver draws.
    pub solver: SolverConfig,
    /// Number of linearization points `x^(0) … x^(count−1)`.
    pub points: usize,
    pub variance_tol: f64,
    pub variance_max_iter: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            solver: SolverConfig {
                damping: Damping::randomized_default(),
                ..SolverConfig::default()
            },
            points: 12,
            variance_tol: 1e-14,
            variance_max_iter: 200_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointSpectrum {
    pub nu: usize,
    pub edges: usize,
    pub rho_syn: f64,
    pub rho_rd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralReport {
    pub points: Vec<PointSpectrum>,
    pub rho_syn: f64,
    pub rho_rd: Option<f64>,
}

/// Spectral radii of `Ω` and `Ω̄` at one linearization of `graph`.
pub fn point_spectrum(graph: &FactorGraph, nu: usize, cfg: &AnalysisConfig) -> Result<PointSpectrum> {
    let mats = ConvergenceMatrices::from_graph(graph);
    let b = mats.dim();
    if b > MAX_EDGES {
        return Err(Error::TooLarge(b, MAX_EDGES));
    }
    let v_hat = mats.variance_fixed_point(&vec![1.0; b], cfg.variance_tol, cfg.variance_max_iter)?;
    let omega = mats.omega(&v_hat);
    let rho_syn = spectral_radius(b, |x, y| omega.apply(x, y))?;
    let rho_rd = match cfg.solver.damping {
        Damping::Off => None,
        Damping::Randomized { p, alpha1 } => {
            let full = damping_mask(cfg.solver.seed, nu, graph.edges.len(), p);
            let mask: Vec<bool> = mats.edges.iter().map(|&e| full[e]).collect();
            let damped = omega.damped(&mask, alpha1);
            Some(spectral_radius(b, |x, y| damped.apply(x, y))?)
        }
    };
    Ok(PointSpectrum {
        nu,
        edges: b,
        rho_syn,
        rho_rd,
    })
}

/// Spectral radii along the centralized Gauss-Newton trajectory.
pub fn analyze(net: &NetworkModel, ms: &MeasurementSet, cfg: &AnalysisConfig) -> Result<SpectralReport> {
    let gn = gauss_newton(
        net,
        ms,
        &GaussNewtonConfig {
            start: cfg.solver.start.clone(),
            iterations: cfg.points.saturating_sub(1),
            tol: 0.0,
            seed: cfg.solver.seed,
            slack_variance: cfg.solver.graph.slack_variance,
            slack_angle: cfg.solver.graph.slack_angle,
        },
    )?;
    let mut graph = build_graph_with(net, ms, cfg.solver.graph);
    let mut points = Vec::with_capacity(cfg.points);
    for (nu, x) in gn.trajectory.iter().take(cfg.points).enumerate() {
        graph.refresh_coefficients(net, x);
        points.push(point_spectrum(&graph, nu, cfg)?);
    }
    let rho_syn = points.iter().map(|p| p.rho_syn).fold(0.0, f64::max);
    let rho_rd = points
        .iter()
        .map(|p| p.rho_rd)
        .try_fold(0.0_f64, |acc, r| r.map(|r| acc.max(r)));
    Ok(SpectralReport {
        points,
        rho_syn,
        rho_rd,
    })
}
