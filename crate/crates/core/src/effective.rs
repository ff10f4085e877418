//! Effective coarse models built from a corrector set: the quasi-local
//! kernel, its piecewise-constant compression `A_H`, spectral bounds and
//! the jump indicator `eta`.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use nalgebra::Vector2;
use rayon::prelude::*;
use thiserror::Error;

use crate::corrector::{CorrectorError, CorrectorSet, LodContext, Oversampling};
use crate::fem::{assemble_tensor_stiffness, sym_eigenvalues, ElementGradients, FeSpace, Tensor};
use crate::geometry::{interior_faces, TriMesh};
use crate::sparse::{SparseOp, TripletBuilder};

#[derive(Debug, Error)]
pub enum EffectiveError {
    #[error(transparent)]
    Corrector(#[from] CorrectorError),
    #[error(transparent)]
    Mesh(#[from] crate::geometry::MeshError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Blocks `K_{T,K}` of the quasi-local kernel, keyed by `(T, K)`.
#[derive(Debug, Clone)]
pub struct KernelBlockMatrix {
    pub coarse_mesh: Arc<TriMesh>,
    pub ell: Oversampling,
    pub blocks: BTreeMap<(usize, usize), Tensor>,
    /// Volume average of the coefficient over every coarse element.
    pub diagonal_means: Vec<Tensor>,
}

impl KernelBlockMatrix {
    /// Kernel values `A_{T,K} = delta_{TK} / |K| mean_T A - K_{T,K}`.
    pub fn quasi_local_block(&self, t: usize, k: usize) -> Tensor {
        let mut a = self.blocks.get(&(t, k)).map_or_else(Tensor::zeros, |b| -b);
        if t == k {
            a += self.diagonal_means[t] / self.coarse_mesh.area(t);
        }
        a
    }

    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "T,K,K11,K12,K21,K22")?;
        for (&(t, k), b) in &self.blocks {
            writeln!(
                w,
                "{t},{k},{:.16e},{:.16e},{:.16e},{:.16e}",
                b[(0, 0)],
                b[(0, 1)],
                b[(1, 0)],
                b[(1, 1)]
            )?;
        }
        Ok(())
    }
}

/// Piecewise-constant effective tensor with its spectral bounds and
/// interior face jumps (aligned with [`interior_faces`]).
#[derive(Debug, Clone)]
pub struct LocalTensorField {
    pub mesh: Arc<TriMesh>,
    pub tensors: Vec<Tensor>,
    pub alpha_h: f64,
    pub beta_h: f64,
    pub face_jumps: Vec<f64>,
}

impl LocalTensorField {
    pub fn from_tensors(mesh: Arc<TriMesh>, tensors: Vec<Tensor>) -> Result<Self, EffectiveError> {
        let (alpha_h, beta_h) = spectral_bounds(&tensors);
        let face_jumps = interior_faces(&mesh)?
            .iter()
            .map(|f| (tensors[f.plus] - tensors[f.minus]).abs().max())
            .collect();
        Ok(Self {
            mesh,
            tensors,
            alpha_h,
            beta_h,
            face_jumps,
        })
    }

    pub fn is_positive(&self) -> bool {
        self.alpha_h > 0.0
    }

    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "element,x,y,A11,A12,A21,A22")?;
        for (e, a) in self.tensors.iter().enumerate() {
            let c = self.mesh.barycenter(e);
            writeln!(
                w,
                "{e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                c[0],
                c[1],
                a[(0, 0)],
                a[(0, 1)],
                a[(1, 0)],
                a[(1, 1)]
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorReport {
    /// `None` when `alpha_h <= 0`.
    pub eta: Option<f64>,
    pub max_face_jump: f64,
    pub alpha_h: f64,
    pub beta_h: f64,
    pub h: f64,
}

/// Per fine element of the patch of `T`: the dense corrector gradients.
fn corrector_gradients(ctx: &LodContext, set: &CorrectorSet, t: usize, buf: &mut [f64]) -> Vec<(usize, [Vector2<f64>; 2])> {
    let (q0, q1) = (set.get(t, 0), set.get(t, 1));
    let mut out = Vec::new();
    let mut grads = [Vec::new(), Vec::new()];
    for (k, q) in [q0, q1].into_iter().enumerate() {
        q.add_scaled_to(1.0, buf);
        for &p in &q.patch {
            for &s in ctx.fine.children(p).expect("nested fine mesh") {
                grads[k].push((s, ctx.fine.gradient(buf, s)));
            }
        }
        q.add_scaled_to(-1.0, buf);
        // exact reset: the buffer held only this corrector
        for &d in &q.dofs {
            buf[d] = 0.0;
        }
    }
    for (a, b) in grads[0].iter().zip(&grads[1]) {
        out.push((a.0, [a.1, b.1]));
    }
    out
}

/// Integrates the fluxes `A grad q_{T,k}` over every coarse element `K`.
pub fn assemble_kernel(ctx: &LodContext, set: &CorrectorSet) -> Result<KernelBlockMatrix, EffectiveError> {
    set.check_context(ctx)?;
    let cmesh = ctx.coarse.mesh_arc().clone();
    let fmesh = ctx.fine.mesh();
    let parents = fmesh.parent_of().expect("nested fine mesh");
    let coeff = ctx.coeff.values();
    let nt = cmesh.num_elements();
    let nf = ctx.fine.dof_count();
    let rows: Vec<Vec<((usize, usize), Tensor)>> = (0..nt)
        .into_par_iter()
        .map_init(
            || vec![0.0; nf],
            |buf, t| {
                let mut flux: BTreeMap<usize, Tensor> = BTreeMap::new();
                for (s, g) in corrector_gradients(ctx, set, t, buf) {
                    let area = fmesh.area(s);
                    let entry = flux.entry(parents[s]).or_insert_with(Tensor::zeros);
                    for k in 0..2 {
                        let f = coeff[s] * g[k] * area;
                        entry[(0, k)] += f[0];
                        entry[(1, k)] += f[1];
                    }
                }
                let at = cmesh.area(t);
                flux.into_iter()
                    .filter(|(_, b)| b.iter().any(|&v| v != 0.0))
                    .map(|(k, b)| ((t, k), b / (at * cmesh.area(k))))
                    .collect()
            },
        )
        .collect();
    let diagonal_means = ctx.coeff.coarse_means(&ctx.fine, nt).map_err(CorrectorError::from)?;
    Ok(KernelBlockMatrix {
        coarse_mesh: cmesh,
        ell: set.oversampling,
        blocks: rows.into_iter().flatten().collect(),
        diagonal_means,
    })
}

/// `D`: maps coarse dofs to per-element gradients, row `2 T + j`.
fn gradient_operator(coarse: &FeSpace) -> SparseOp {
    let grads = ElementGradients::new(coarse);
    let nt = coarse.mesh().num_elements();
    let mut b = TripletBuilder::new(2 * nt, coarse.dof_count());
    for (t, row) in grads.per_element.iter().enumerate() {
        for (d, g) in row {
            if let Some(d) = d {
                b.push(2 * t, *d, g[0]);
                b.push(2 * t + 1, *d, g[1]);
            }
        }
    }
    b.build()
}

/// Correctors as columns of a fine-by-`2 card(T_H)` matrix.
fn corrector_matrix(ctx: &LodContext, set: &CorrectorSet) -> SparseOp {
    let mut b = TripletBuilder::new(ctx.fine.dof_count(), set.len());
    for c in set.iter() {
        for (&d, &v) in c.dofs.iter().zip(&c.values) {
            b.push(d, 2 * c.element + c.direction, v);
        }
    }
    b.build()
}

/// `G[i][j] = a(P l_i, P l_j - C l_j)`; the quasi-local system is
/// `G^T u = F`.
pub fn assemble_quasilocal_system(ctx: &LodContext, set: &CorrectorSet) -> Result<SparseOp, EffectiveError> {
    set.check_context(ctx)?;
    let p = &ctx.prolongation;
    let pt = p.transpose();
    let kp = ctx.stiffness.matmul(p);
    let ptkp = pt.matmul(&kp);
    let kq = ctx.stiffness.matmul(&corrector_matrix(ctx, set));
    let correction = pt.matmul(&kq).matmul(&gradient_operator(&ctx.coarse));
    Ok(ptkp.add_scaled(-1.0, &correction))
}

/// The same operator from the kernel double sum
/// `sum_{T,K} |T||K| grad l_i|_K . A_{T,K} grad l_j|_T`.
pub fn assemble_quasilocal_from_kernel(kernel: &KernelBlockMatrix, coarse: &FeSpace) -> SparseOp {
    let mesh = &kernel.coarse_mesh;
    let grads = ElementGradients::new(coarse);
    let n = coarse.dof_count();
    let mut b = TripletBuilder::new(n, n);
    let mut add = |t: usize, k: usize, a: &Tensor| {
        let w = mesh.area(t) * mesh.area(k);
        for (di, gi) in &grads.per_element[k] {
            let Some(di) = di else { continue };
            for (dj, gj) in &grads.per_element[t] {
                let Some(dj) = dj else { continue };
                b.push(*di, *dj, w * gi.dot(&(a * gj)));
            }
        }
    };
    for t in 0..mesh.num_elements() {
        add(t, t, &(kernel.diagonal_means[t] / mesh.area(t)));
    }
    for (&(t, k), blk) in &kernel.blocks {
        add(t, k, &(-blk));
    }
    b.build()
}

/// `A_H|_T = mean_T A - sum_K |K| K_{T,K}`.
pub fn local_coefficient(kernel: &KernelBlockMatrix) -> Result<LocalTensorField, EffectiveError> {
    let mesh = &kernel.coarse_mesh;
    let mut tensors = kernel.diagonal_means.clone();
    for (&(t, k), blk) in &kernel.blocks {
        tensors[t] -= blk * mesh.area(k);
    }
    LocalTensorField::from_tensors(mesh.clone(), tensors)
}

/// The two patch-integral forms of `A_H|_T`, computed directly from the
/// correctors:
/// `|T|^-1 int e_j . A (chi_T e_k - grad q_k)` and
/// `|T|^-1 int (e_j - grad q_j) . A (chi_T e_k - grad q_k)`.
pub fn patch_integral_forms(ctx: &LodContext, set: &CorrectorSet) -> Result<Vec<(Tensor, Tensor)>, EffectiveError> {
    set.check_context(ctx)?;
    let cmesh = ctx.coarse.mesh();
    let fmesh = ctx.fine.mesh();
    let parents = fmesh.parent_of().expect("nested fine mesh");
    let coeff = ctx.coeff.values();
    let nf = ctx.fine.dof_count();
    Ok((0..cmesh.num_elements())
        .into_par_iter()
        .map_init(
            || vec![0.0; nf],
            |buf, t| {
                let mut flux_form = Tensor::zeros();
                let mut energy_form = Tensor::zeros();
                for (s, g) in corrector_gradients(ctx, set, t, buf) {
                    let area = fmesh.area(s);
                    let chi = if parents[s] == t { 1.0 } else { 0.0 };
                    for k in 0..2 {
                        let mut right = -g[k];
                        right[k] += chi;
                        let flux = coeff[s] * right * area;
                        for j in 0..2 {
                            let mut left = -g[j];
                            left[j] += 1.0;
                            flux_form[(j, k)] += flux[j];
                            energy_form[(j, k)] += left.dot(&flux);
                        }
                    }
                }
                let at = cmesh.area(t);
                (flux_form / at, energy_form / at)
            },
        )
        .collect())
}

/// Largest entrywise deviation of both patch-integral forms from the field.
pub fn patch_form_discrepancy(ctx: &LodContext, set: &CorrectorSet, field: &LocalTensorField) -> Result<f64, EffectiveError> {
    let forms = patch_integral_forms(ctx, set)?;
    Ok(forms
        .iter()
        .zip(&field.tensors)
        .map(|((a, b), c)| (a - c).abs().max().max((b - c).abs().max()))
        .fold(0.0, f64::max))
}

/// Extremal eigenvalues of the symmetric parts over all tensors.
pub fn spectral_bounds(tensors: &[Tensor]) -> (f64, f64) {
    tensors.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), a| {
        let (l, h) = sym_eigenvalues(a);
        (lo.min(l), hi.max(h))
    })
}

/// `eta = H^-1 J (1 + J / alpha_H)` with `J` the largest face jump.
pub fn eta_estimator(field: &LocalTensorField) -> EstimatorReport {
    let j = field.face_jumps.iter().copied().fold(0.0, f64::max);
    let h = field.mesh.mesh_size();
    let eta = field.is_positive().then(|| j / h * (1.0 + j / field.alpha_h));
    EstimatorReport {
        eta,
        max_face_jump: j,
        alpha_h: field.alpha_h,
        beta_h: field.beta_h,
        h,
    }
}

/// P1 stiffness of the piecewise-constant field; the local system is
/// `L^T u = F`.
pub fn assemble_local_system(field: &LocalTensorField, coarse: &FeSpace) -> SparseOp {
    assemble_tensor_stiffness(coarse, &field.tensors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corrector::compute_all_correctors;
    use crate::fem::{assemble_stiffness, CoefficientField, SpaceKind};
    use crate::geometry::{build_uniform_mesh, refine_uniform};
    use nalgebra::Rotation2;

    fn exp1(p: [f64; 2]) -> f64 {
        use std::f64::consts::PI;
        let s = |e: f64| (2.0 * PI * p[0] / e).sin() * (2.0 * PI * p[1] / e).sin();
        1.0 / (5.5 + s(0.125) + 4.0 * s(0.03125))
    }

    fn context(n: usize, levels: u32, a: impl Fn([f64; 2]) -> f64) -> LodContext {
        let c = Arc::new(build_uniform_mesh(n).unwrap());
        let f = Arc::new(refine_uniform(&c, levels));
        let coeff = CoefficientField::from_scalar_fn(f.clone(), a).unwrap();
        LodContext::new(FeSpace::dirichlet(c).unwrap(), FeSpace::dirichlet(f).unwrap(), coeff).unwrap()
    }

    fn max_rel_diff(a: &SparseOp, b: &SparseOp) -> f64 {
        let scale = a.max_abs().max(b.max_abs());
        a.add_scaled(-1.0, b).max_abs() / scale
    }

    #[test]
    fn zero_correctors_reduce_to_means() {
        let ctx = context(4, 0, exp1);
        let set = compute_all_correctors(&ctx, Oversampling::Layers(1)).unwrap();
        let kernel = assemble_kernel(&ctx, &set).unwrap();
        assert!(kernel.blocks.is_empty());
        let field = local_coefficient(&kernel).unwrap();
        for (a, b) in field.tensors.iter().zip(ctx.coeff.values()) {
            assert_eq!(a, b);
        }
        let g = assemble_quasilocal_system(&ctx, &set).unwrap();
        let k = assemble_stiffness(&ctx.coarse, &ctx.coeff).unwrap();
        assert!(max_rel_diff(&g, &k) < 1e-14);
    }

    #[test]
    fn two_routes_agree() {
        let ctx = context(4, 2, exp1);
        let set = compute_all_correctors(&ctx, Oversampling::Layers(1)).unwrap();
        let kernel = assemble_kernel(&ctx, &set).unwrap();
        let fine_route = assemble_quasilocal_system(&ctx, &set).unwrap();
        let kernel_route = assemble_quasilocal_from_kernel(&kernel, &ctx.coarse);
        assert!(max_rel_diff(&fine_route, &kernel_route) <= 1e-11);
    }

    #[test]
    fn compression_and_patch_forms() {
        let ctx = context(4, 2, exp1);
        let set = compute_all_correctors(&ctx, Oversampling::Layers(1)).unwrap();
        let kernel = assemble_kernel(&ctx, &set).unwrap();
        let field = local_coefficient(&kernel).unwrap();
        let mesh = ctx.coarse.mesh();
        for t in 0..mesh.num_elements() {
            let mut sum = field.tensors[t];
            for ((tt, k), b) in kernel.blocks.range((t, 0)..(t + 1, 0)) {
                assert_eq!(*tt, t);
                sum += b * mesh.area(*k);
            }
            assert!((sum - kernel.diagonal_means[t]).abs().max() <= 1e-13);
        }
        assert!(patch_form_discrepancy(&ctx, &set, &field).unwrap() <= 1e-10);
    }

    #[test]
    fn block_sparsity_follows_patches() {
        let ctx = context(8, 2, exp1);
        let ell = 2;
        let set = compute_all_correctors(&ctx, Oversampling::Layers(ell)).unwrap();
        let kernel = assemble_kernel(&ctx, &set).unwrap();
        let mut census = 0;
        for t in 0..ctx.coarse.mesh().num_elements() {
            let patch = &set.get(t, 0).patch;
            census += patch.len();
            for ((_, k), _) in kernel.blocks.range((t, 0)..(t + 1, 0)) {
                assert!(patch.binary_search(k).is_ok());
            }
        }
        assert!(kernel.blocks.len() <= census);
        assert!(kernel.blocks.len() <= 128 * 2 * (2 * ell + 1) * (2 * ell + 1));
    }

    #[test]
    fn global_kernel_symmetry() {
        let ctx = context(4, 2, exp1);
        let set = compute_all_correctors(&ctx, Oversampling::Global).unwrap();
        let kernel = assemble_kernel(&ctx, &set).unwrap();
        let scale = kernel.blocks.values().map(|b| b.abs().max()).fold(0.0, f64::max);
        for (&(t, k), b) in &kernel.blocks {
            let other = kernel.blocks.get(&(k, t)).copied().unwrap_or_else(Tensor::zeros);
            assert!((b - other.transpose()).abs().max() <= 1e-9 * scale);
        }
        // oracle: a(q_{K,j}, q_{T,k}) / (|T||K|)
        let n = ctx.fine.dof_count();
        let mesh = ctx.coarse.mesh();
        for (t, k) in [(5usize, 6usize), (10, 10), (3, 20)] {
            let b = kernel.blocks.get(&(t, k)).copied().unwrap_or_else(Tensor::zeros);
            for j in 0..2 {
                for kk in 0..2 {
                    let qk = set.get(k, j).to_dense(n);
                    let qt = set.get(t, kk).to_dense(n);
                    let a = crate::sparse::dot(&qk, &ctx.stiffness.matvec(&qt)) / (mesh.area(t) * mesh.area(k));
                    assert!((a - b[(j, kk)]).abs() <= 1e-9 * scale);
                }
            }
        }
    }

    #[test]
    fn constant_coefficient_global_mean() {
        let a0 = Tensor::new(2.0, 0.5, 0.5, 1.0);
        let c = Arc::new(build_uniform_mesh(4).unwrap());
        let f = Arc::new(refine_uniform(&c, 2));
        let coeff = CoefficientField::constant(f.clone(), a0).unwrap();
        let ctx = LodContext::new(FeSpace::dirichlet(c).unwrap(), FeSpace::dirichlet(f).unwrap(), coeff).unwrap();
        let set = compute_all_correctors(&ctx, Oversampling::Global).unwrap();
        let field = local_coefficient(&assemble_kernel(&ctx, &set).unwrap()).unwrap();
        let mesh = ctx.coarse.mesh();
        let mean: Tensor = (0..mesh.num_elements()).map(|t| field.tensors[t] * mesh.area(t)).sum();
        assert!((mean - a0).abs().max() <= 1e-9);
    }

    #[test]
    fn spectral_bounds_cases() {
        let tensors = vec![Tensor::identity() * 0.2, Tensor::identity() * 0.5];
        let (lo, hi) = spectral_bounds(&tensors);
        assert!((lo - 0.2).abs() < 1e-15 && (hi - 0.5).abs() < 1e-15);
        let field: Vec<Tensor> = vec![Tensor::new(1.0, 0.3, 0.1, 2.0), Tensor::new(0.7, -0.2, 0.0, 0.4)];
        let r = Rotation2::new(0.37).into_inner();
        let rotated: Vec<Tensor> = field.iter().map(|a| r * a * r.transpose()).collect();
        let (a, b) = (spectral_bounds(&field), spectral_bounds(&rotated));
        assert!((a.0 - b.0).abs() <= 1e-12 && (a.1 - b.1).abs() <= 1e-12);
    }

    #[test]
    fn eta_cases() {
        let mesh = Arc::new(build_uniform_mesh(1).unwrap());
        let field = LocalTensorField::from_tensors(mesh.clone(), vec![Tensor::identity() * 0.7; 2]).unwrap();
        assert_eq!(eta_estimator(&field).eta, Some(0.0));
        let (a, j) = (0.5, 0.25);
        let field =
            LocalTensorField::from_tensors(mesh.clone(), vec![Tensor::identity() * a, Tensor::identity() * (a + j)])
                .unwrap();
        let h = mesh.mesh_size();
        let r = eta_estimator(&field);
        assert!((r.eta.unwrap() - j / h * (1.0 + j / a)).abs() < 1e-15);
        let field = LocalTensorField::from_tensors(mesh, vec![-Tensor::identity(), Tensor::identity()]).unwrap();
        assert_eq!(eta_estimator(&field).eta, None);
    }

    #[test]
    fn local_system_matches_stiffness() {
        let mesh = Arc::new(build_uniform_mesh(5).unwrap());
        let space = FeSpace::new(mesh.clone(), SpaceKind::Unconstrained).unwrap();
        let tensors: Vec<Tensor> = (0..mesh.num_elements())
            .map(|e| Tensor::identity() * (1.0 + e as f64 * 0.01))
            .collect();
        let field = LocalTensorField::from_tensors(mesh.clone(), tensors.clone()).unwrap();
        let l = assemble_local_system(&field, &space);
        let coeff = CoefficientField::new(mesh.clone(), tensors).unwrap();
        assert_eq!(l.add_scaled(-1.0, &assemble_stiffness(&space, &coeff).unwrap()).max_abs(), 0.0);
        for i in 0..l.nrows() {
            assert!(l.row(i).1.iter().sum::<f64>().abs() < 1e-13);
        }
        let id = LocalTensorField::from_tensors(mesh.clone(), vec![Tensor::identity(); mesh.num_elements()]).unwrap();
        let lap = assemble_local_system(&id, &space);
        assert!((lap.get(7, 7) - 4.0).abs() < 1e-13);
    }

    #[test]
    fn kernel_row_bound_is_uniform() {
        let mut constants = Vec::new();
        for n in [4usize, 8, 16] {
            let ctx = context(n, 2, exp1);
            let set = compute_all_correctors(&ctx, Oversampling::Layers(2)).unwrap();
            let kernel = assemble_kernel(&ctx, &set).unwrap();
            let mesh = ctx.coarse.mesh();
            let h = mesh.mesh_size();
            let mut worst: f64 = 0.0;
            for t in 0..mesh.num_elements() {
                let row: f64 = kernel
                    .blocks
                    .range((t, 0)..(t + 1, 0))
                    .map(|((_, k), b)| mesh.area(*k) * b.norm_squared())
                    .sum();
                worst = worst.max(row * h * h);
            }
            constants.push(worst);
        }
        let (lo, hi) = constants.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &c| (l.min(c), h.max(c)));
        assert!(hi / lo < 10.0, "row constants {constants:?}");
    }
}
