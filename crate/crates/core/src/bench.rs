//! End-to-end solvers on a shared fine reference space, worst-case
//! `L2 -> L2` error measurement, and the periodic cell problem.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, LU};
use thiserror::Error;

use crate::corrector::{compute_all_correctors, CorrectorError, CorrectorSet, LodContext, Oversampling};
use crate::effective::{assemble_kernel, assemble_local_system, assemble_quasilocal_system, local_coefficient, EffectiveError, LocalTensorField};
use crate::fem::{assemble_mass, assemble_mixed_mass, assemble_stiffness, CoefficientField, FeSpace, FemError, SpaceKind, SpdFactor, Tensor};
use crate::sparse::{dot, ProfileCholesky, SolverError, SparseOp};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Corrector(#[from] CorrectorError),
    #[error(transparent)]
    Effective(#[from] EffectiveError),
    #[error("{0:?} solver needs a corrector set")]
    MissingCorrectors(SolverKind),
    #[error("singular {0} system")]
    Singular(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SolverKind {
    Reference,
    StandardFem,
    QuasiLocal,
    Local,
    BestApproximation,
}

/// Operators shared by every solver on one coarse/fine pair. Right-hand
/// sides are nodal vectors on all fine vertices; solutions are fine dof
/// vectors.
#[derive(Debug)]
pub struct Bench {
    pub ctx: Arc<LodContext>,
    /// `(phi_i, psi_j)`: fine dofs by fine vertices.
    pub load: SparseOp,
    pub mass: SparseOp,
    pub full_mass: SparseOp,
    full_mass_factor: ProfileCholesky,
    reference: SpdFactor,
}

impl Bench {
    pub fn new(ctx: Arc<LodContext>) -> Result<Self, BenchError> {
        let full = FeSpace::unconstrained(ctx.fine.mesh_arc().clone())?;
        let load = assemble_mixed_mass(&ctx.fine, &full);
        let mass = assemble_mass(&ctx.fine);
        let full_mass = assemble_mass(&full);
        let full_mass_factor = ProfileCholesky::factor(&full_mass)?;
        let reference = SpdFactor::new(&ctx.fine, &ctx.stiffness)?;
        Ok(Self {
            ctx,
            load,
            mass,
            full_mass,
            full_mass_factor,
            reference,
        })
    }

    pub fn full_dim(&self) -> usize {
        self.load.ncols()
    }

    /// `L2` norm of a fine dof vector.
    pub fn l2_norm(&self, u: &[f64]) -> f64 {
        dot(u, &self.mass.matvec(u)).max(0.0).sqrt()
    }
}

/// Dense coarse solver for `A u = F` and `A^T y = G`; periodic systems are
/// bordered by the mass vector.
#[derive(Debug, Clone)]
struct CoarseSolver {
    forward: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    backward: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    n: usize,
}

impl CoarseSolver {
    fn new(op: &SparseOp, border: Option<Vec<f64>>, what: &'static str) -> Result<Self, BenchError> {
        let n = op.nrows();
        let dim = n + usize::from(border.is_some());
        let mut a = DMatrix::zeros(dim, dim);
        for (i, j, v) in op.triplets() {
            a[(i, j)] += v;
        }
        if let Some(mass) = border {
            for (i, m) in mass.into_iter().enumerate() {
                a[(i, n)] = m;
                a[(n, i)] = m;
            }
        }
        let forward = a.clone().lu();
        let backward = a.transpose().lu();
        if !forward.is_invertible() || !backward.is_invertible() {
            return Err(BenchError::Singular(what));
        }
        Ok(Self { forward, backward, n })
    }

    fn solve_with(lu: &LU<f64, nalgebra::Dyn, nalgebra::Dyn>, n: usize, rhs: &[f64]) -> Vec<f64> {
        let mut b = DVector::zeros(lu.l().nrows());
        b.rows_mut(0, n).copy_from_slice(rhs);
        let x = lu.solve(&b).expect("invertibility checked at construction");
        x.as_slice()[..n].to_vec()
    }

    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        Self::solve_with(&self.forward, self.n, rhs)
    }

    fn solve_transpose(&self, rhs: &[f64]) -> Vec<f64> {
        Self::solve_with(&self.backward, self.n, rhs)
    }
}

#[derive(Debug, Clone)]
enum HandleOp {
    Reference,
    Coarse(CoarseSolver),
    Best(CoarseSolver),
}

/// A prepared linear solution operator `f -> u`.
#[derive(Debug, Clone)]
pub struct SolverHandle {
    pub kind: SolverKind,
    bench: Arc<Bench>,
    op: HandleOp,
    /// Local effective field, kept for reporting.
    pub field: Option<LocalTensorField>,
}

/// Prepares a solver; `Local` and `QuasiLocal` need correctors.
pub fn make_solver(bench: &Arc<Bench>, kind: SolverKind, set: Option<&CorrectorSet>) -> Result<SolverHandle, BenchError> {
    let ctx = &bench.ctx;
    let border = (ctx.coarse.kind() == SpaceKind::PeriodicMeanFree).then(|| ctx.coarse.mass_vector());
    let mut field = None;
    let op = match kind {
        SolverKind::Reference => HandleOp::Reference,
        SolverKind::StandardFem => {
            let kc = ctx.prolongation.transpose().matmul(&ctx.stiffness.matmul(&ctx.prolongation));
            HandleOp::Coarse(CoarseSolver::new(&kc, border, "standard FEM")?)
        }
        SolverKind::QuasiLocal => {
            let set = set.ok_or(BenchError::MissingCorrectors(kind))?;
            let g = assemble_quasilocal_system(ctx, set)?;
            HandleOp::Coarse(CoarseSolver::new(&g.transpose(), border, "quasi-local")?)
        }
        SolverKind::Local => {
            let set = set.ok_or(BenchError::MissingCorrectors(kind))?;
            let f = local_coefficient(&assemble_kernel(ctx, set)?)?;
            let l = assemble_local_system(&f, &ctx.coarse);
            field = Some(f);
            HandleOp::Coarse(CoarseSolver::new(&l.transpose(), border, "local")?)
        }
        SolverKind::BestApproximation => {
            let mc = ctx.prolongation.transpose().matmul(&bench.mass.matmul(&ctx.prolongation));
            // the coarse mass matrix is invertible for every space kind
            let solver = CoarseSolver::new(&mc, None, "coarse mass")?;
            HandleOp::Best(solver)
        }
    };
    Ok(SolverHandle {
        kind,
        bench: bench.clone(),
        op,
        field,
    })
}

impl SolverHandle {
    /// Fine dof load `b` to fine dof solution.
    fn solve_load(&self, b: &[f64]) -> Vec<f64> {
        let ctx = &self.bench.ctx;
        match &self.op {
            HandleOp::Reference => self.bench.reference.solve(b),
            HandleOp::Coarse(s) => ctx.prolongation.matvec(&s.solve(&ctx.prolongation.matvec_transpose(b))),
            HandleOp::Best(s) => {
                let u = self.bench.reference.solve(b);
                let mu = self.bench.mass.matvec(&u);
                ctx.prolongation.matvec(&s.solve(&ctx.prolongation.matvec_transpose(&mu)))
            }
        }
    }

    fn solve_load_transpose(&self, y: &[f64]) -> Vec<f64> {
        let ctx = &self.bench.ctx;
        match &self.op {
            HandleOp::Reference => self.bench.reference.solve(y),
            HandleOp::Coarse(s) => {
                ctx.prolongation.matvec(&s.solve_transpose(&ctx.prolongation.matvec_transpose(y)))
            }
            HandleOp::Best(s) => {
                let z = ctx.prolongation.matvec(&s.solve_transpose(&ctx.prolongation.matvec_transpose(y)));
                self.bench.reference.solve(&self.bench.mass.matvec(&z))
            }
        }
    }

    /// Solution for the nodal right-hand side `f` on all fine vertices.
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        self.solve_load(&self.bench.load.matvec(f))
    }

    /// Adjoint of [`Self::apply`] in the Euclidean inner products.
    pub fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        self.bench.load.matvec_transpose(&self.solve_load_transpose(y))
    }

    pub fn bench(&self) -> &Arc<Bench> {
        &self.bench
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorstCaseError {
    pub sigma: f64,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    /// Sigma estimate after every iteration.
    pub history: Vec<f64>,
}

pub const POWER_ITERATION_CAP: usize = 500;

/// Largest singular value of `S_a - S_b` from `L2(fine P1)` to `L2`, by
/// power iteration on `M_full^-1 E^T M E`.
pub fn worst_case_error(a: &SolverHandle, b: &SolverHandle, tol: f64) -> WorstCaseError {
    let bench = a.bench.clone();
    let n = bench.full_dim();
    let m_norm = |x: &[f64]| dot(x, &bench.full_mass.matvec(x)).max(0.0).sqrt();
    let mut x = vec![1.0; n];
    let s = m_norm(&x);
    x.iter_mut().for_each(|v| *v /= s);
    let mut history = Vec::new();
    let mut prev = f64::NAN;
    let mut residual = f64::INFINITY;
    for it in 1..=POWER_ITERATION_CAP {
        let e: Vec<f64> = a.apply(&x).iter().zip(b.apply(&x)).map(|(u, v)| u - v).collect();
        let me = bench.mass.matvec(&e);
        let sigma2 = dot(&e, &me).max(0.0);
        let sigma = sigma2.sqrt();
        history.push(sigma);
        let mut z: Vec<f64> = a
            .apply_transpose(&me)
            .iter()
            .zip(b.apply_transpose(&me))
            .map(|(u, v)| u - v)
            .collect();
        bench.full_mass_factor.solve_in_place(&mut z);
        let r: Vec<f64> = z.iter().zip(&x).map(|(zi, xi)| zi - sigma2 * xi).collect();
        residual = m_norm(&r);
        if sigma == 0.0 || (sigma - prev).abs() <= tol * sigma {
            return WorstCaseError {
                sigma,
                iterations: it,
                residual,
                converged: true,
                history,
            };
        }
        prev = sigma;
        let zn = m_norm(&z);
        x = z.into_iter().map(|v| v / zn).collect();
    }
    WorstCaseError {
        sigma: prev,
        iterations: POWER_ITERATION_CAP,
        residual,
        converged: false,
        history,
    }
}

/// Classical homogenized tensor from the periodic cell problem.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicHomogenizedTensor {
    pub a0: Tensor,
    pub cell_cells: usize,
    pub corrector_energies: [f64; 2],
}

/// Solves `a(v, q_j) = (grad v, A e_j)` on the torus and returns
/// `(A0)_jk = int (e_j - grad q_j) . A e_k`.
pub fn classical_cell_tensor(coeff: &CoefficientField, space: &FeSpace) -> Result<PeriodicHomogenizedTensor, BenchError> {
    if space.kind() != SpaceKind::PeriodicMeanFree {
        return Err(FemError::KindMismatch(space.kind(), SpaceKind::PeriodicMeanFree).into());
    }
    let k = assemble_stiffness(space, coeff)?;
    let factor = SpdFactor::new(space, &k)?;
    let mesh = space.mesh();
    let values = coeff.values();
    let mut a0 = Tensor::zeros();
    let mut energies = [0.0; 2];
    for j in 0..2 {
        let mut rhs = vec![0.0; space.dof_count()];
        for e in 0..mesh.num_elements() {
            let g = mesh.gradients(e);
            let flux = values[e].column(j).into_owned() * mesh.area(e);
            for (c, d) in space.element_dofs(e).iter().enumerate() {
                if let Some(d) = d {
                    rhs[*d] += g[c][0] * flux[0] + g[c][1] * flux[1];
                }
            }
        }
        let q = factor.solve(&rhs);
        energies[j] = dot(&q, &k.matvec(&q));
        for e in 0..mesh.num_elements() {
            let mut left = -space.gradient(&q, e);
            left[j] += 1.0;
            let w = values[e].transpose() * left * mesh.area(e);
            a0[(j, 0)] += w[0];
            a0[(j, 1)] += w[1];
        }
    }
    Ok(PeriodicHomogenizedTensor {
        a0,
        cell_cells: mesh.cells_per_side(),
        corrector_energies: energies,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicLimitReport {
    /// `max_T |A_H|_T - mean|` (max entry) at the whole-domain order.
    pub constancy: f64,
    pub mean: Tensor,
    pub cell_tensor: Tensor,
    /// `|mean - A0|` (max entry).
    pub cell_discrepancy: f64,
    /// `(l, max_T |A_H^inf - A_H^l|)`.
    pub ell_decay: Vec<(usize, f64)>,
    /// Constancy within `tolerance`.
    pub aligned: bool,
}

fn local_field(ctx: &LodContext, ell: Oversampling) -> Result<LocalTensorField, BenchError> {
    let set = compute_all_correctors(ctx, ell)?;
    Ok(local_coefficient(&assemble_kernel(ctx, &set)?)?)
}

/// Whole-domain effective tensors on periodic spaces compared with their
/// mean, the cell tensor, and truncated orders `ells`.
pub fn periodic_limit_check(
    ctx: &LodContext,
    cell: &PeriodicHomogenizedTensor,
    ells: &[usize],
    tolerance: f64,
) -> Result<PeriodicLimitReport, BenchError> {
    let mesh = ctx.coarse.mesh();
    let full = local_field(ctx, Oversampling::Global)?;
    let total: f64 = (0..mesh.num_elements()).map(|t| mesh.area(t)).sum();
    let mean: Tensor = full
        .tensors
        .iter()
        .enumerate()
        .map(|(t, a)| a * mesh.area(t))
        .sum::<Tensor>()
        / total;
    let constancy = full.tensors.iter().map(|a| (a - mean).abs().max()).fold(0.0, f64::max);
    let ell_decay = ells
        .iter()
        .map(|&l| {
            let f = local_field(ctx, Oversampling::Layers(l))?;
            let d = f
                .tensors
                .iter()
                .zip(&full.tensors)
                .map(|(a, b)| (a - b).abs().max())
                .fold(0.0, f64::max);
            Ok((l, d))
        })
        .collect::<Result<Vec<_>, BenchError>>()?;
    Ok(PeriodicLimitReport {
        constancy,
        mean,
        cell_tensor: cell.a0,
        cell_discrepancy: (mean - cell.a0).abs().max(),
        ell_decay,
        aligned: constancy <= tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{checkerboard, laminate};
    use crate::geometry::{build_uniform_mesh, refine_uniform};

    fn bench(n: usize, levels: u32, a: impl Fn([f64; 2]) -> f64) -> Arc<Bench> {
        let c = Arc::new(build_uniform_mesh(n).unwrap());
        let f = Arc::new(refine_uniform(&c, levels));
        let coeff = CoefficientField::from_scalar_fn(f.clone(), a).unwrap();
        let ctx = LodContext::new(FeSpace::dirichlet(c).unwrap(), FeSpace::dirichlet(f).unwrap(), coeff).unwrap();
        Arc::new(Bench::new(Arc::new(ctx)).unwrap())
    }

    fn torus(n: usize, a: impl Fn([f64; 2]) -> f64) -> (CoefficientField, FeSpace) {
        let m = Arc::new(build_uniform_mesh(n).unwrap());
        (
            CoefficientField::from_scalar_fn(m.clone(), a).unwrap(),
            FeSpace::periodic(m).unwrap(),
        )
    }

    #[test]
    fn handles_are_adjoint_and_repeatable() {
        let b = bench(4, 2, |p| 1.0 + p[0]);
        let set = compute_all_correctors(&b.ctx, Oversampling::Layers(1)).unwrap();
        let n = b.full_dim();
        let m = b.ctx.fine.dof_count();
        let f: Vec<f64> = (0..n).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let y: Vec<f64> = (0..m).map(|i| ((i * 5) % 13) as f64 - 6.0).collect();
        for kind in [
            SolverKind::Reference,
            SolverKind::StandardFem,
            SolverKind::QuasiLocal,
            SolverKind::Local,
            SolverKind::BestApproximation,
        ] {
            let h = make_solver(&b, kind, Some(&set)).unwrap();
            let (u, u2) = (h.apply(&f), h.apply(&f));
            assert_eq!(u, u2);
            let lhs = dot(&u, &y);
            let rhs = dot(&f, &h.apply_transpose(&y));
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "{kind:?}");
        }
    }

    #[test]
    fn self_comparison_is_zero() {
        let b = bench(4, 2, |_| 1.0);
        let h = make_solver(&b, SolverKind::StandardFem, None).unwrap();
        let r = worst_case_error(&h, &h, 1e-8);
        assert_eq!(r.sigma, 0.0);
        assert!(r.converged);
    }

    #[test]
    fn power_iteration_is_monotone() {
        let b = bench(4, 2, |p| 1.0 + 9.0 * ((8.0 * p[0]).floor() % 2.0));
        let r = make_solver(&b, SolverKind::Reference, None).unwrap();
        let h = make_solver(&b, SolverKind::StandardFem, None).unwrap();
        let w = worst_case_error(&r, &h, 1e-10);
        for pair in w.history.windows(2) {
            assert!(pair[1] >= pair[0] - 1e-13);
        }
        assert!(w.sigma > 0.0);
    }

    #[test]
    fn cell_tensor_constant_and_laminate() {
        let a = Tensor::new(2.0, 0.3, 0.3, 1.0);
        let m = Arc::new(build_uniform_mesh(4).unwrap());
        let coeff = CoefficientField::constant(m.clone(), a).unwrap();
        let t = classical_cell_tensor(&coeff, &FeSpace::periodic(m).unwrap()).unwrap();
        assert!((t.a0 - a).abs().max() < 1e-12);
        assert!(t.corrector_energies.iter().all(|&e| e.abs() < 1e-20));

        let (coeff, space) = torus(8, laminate(1.0, 1.0, 10.0));
        let t = classical_cell_tensor(&coeff, &space).unwrap();
        let exact = Tensor::new(20.0 / 11.0, 0.0, 0.0, 5.5);
        assert!((t.a0 - exact).abs().max() < 1e-10, "{}", t.a0);
        assert!((t.a0 - t.a0.transpose()).abs().max() < 1e-10);
    }

    #[test]
    fn checkerboard_cell_tensor_near_geometric_mean() {
        let (coeff, space) = torus(32, checkerboard(1.0, 1.0, 4.0));
        let t = classical_cell_tensor(&coeff, &space).unwrap();
        let (lo, hi) = crate::fem::sym_eigenvalues(&t.a0);
        assert!(lo >= 1.0 && hi <= 4.0);
        assert!((lo - 2.0).abs() < 0.1 && (hi - 2.0).abs() < 0.1, "{}", t.a0);
    }

    #[test]
    fn periodic_constant_coefficient_check() {
        let c = Arc::new(build_uniform_mesh(2).unwrap());
        let f = Arc::new(refine_uniform(&c, 2));
        let a = Tensor::new(1.5, 0.2, 0.2, 0.8);
        let coeff = CoefficientField::constant(f.clone(), a).unwrap();
        let ctx = LodContext::new(FeSpace::periodic(c).unwrap(), FeSpace::periodic(f).unwrap(), coeff).unwrap();
        let (coeff, space) = torus(4, |_| 1.0);
        let mut cell = classical_cell_tensor(&coeff, &space).unwrap();
        cell.a0 = a;
        let r = periodic_limit_check(&ctx, &cell, &[0, 1], 1e-9).unwrap();
        assert!(r.constancy <= 1e-9 && r.cell_discrepancy <= 1e-9);
        assert!(r.ell_decay.iter().all(|&(_, d)| d <= 1e-9));
    }
}
