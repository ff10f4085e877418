//! P1 finite elements on [`TriMesh`]: spaces, coefficient fields, exact
//! assembly for piecewise-constant tensors, the quasi-interpolation
//! `I_H = E_H o Pi_H` as a sparse matrix, and prolongation between nested
//! meshes.

use std::sync::Arc;

use nalgebra::{Matrix2, Vector2};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{p1_gradients, periodic_identify, Adjacency, MeshError, Point, TriMesh};
use crate::sparse::{ProfileCholesky, SolverError, SparseOp, TripletBuilder};

pub type Tensor = Matrix2<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FemError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("coefficient sampled on a {coeff}-cell mesh, space lives on a {space}-cell mesh")]
    CoefficientMismatch { coeff: usize, space: usize },
    #[error("meshes are not nested: {0}")]
    NotNested(String),
    #[error("fine mesh carries no parent map")]
    MissingParentMap,
    #[error("coefficient on element {element} is not symmetric positive definite: {reason}")]
    InvalidCoefficient { element: usize, reason: String },
    #[error("space kinds differ: {0:?} vs {1:?}")]
    KindMismatch(SpaceKind, SpaceKind),
    #[error("vector has length {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpaceKind {
    /// Zero trace; dofs are the interior vertices.
    Dirichlet,
    /// Opposite sides identified; solutions are normalized to zero mean.
    PeriodicMeanFree,
    /// Every vertex is a dof (used for right-hand sides and L2 norms).
    Unconstrained,
}

/// A P1 space on a mesh with its vertex-to-dof map.
#[derive(Debug, Clone)]
pub struct FeSpace {
    mesh: Arc<TriMesh>,
    kind: SpaceKind,
    dof_map: Vec<Option<usize>>,
    dof_vertex: Vec<usize>,
    adjacency: Adjacency,
    children: Option<Vec<Vec<usize>>>,
}

impl FeSpace {
    pub fn new(mesh: Arc<TriMesh>, kind: SpaceKind) -> Result<Self, FemError> {
        let nv = mesh.num_vertices();
        let mut dof_map = vec![None; nv];
        let mut dof_vertex = Vec::new();
        let adjacency = match kind {
            SpaceKind::Dirichlet | SpaceKind::Unconstrained => {
                for v in 0..nv {
                    if kind == SpaceKind::Unconstrained || !mesh.is_boundary(v) {
                        dof_map[v] = Some(dof_vertex.len());
                        dof_vertex.push(v);
                    }
                }
                Adjacency::new(&mesh)
            }
            SpaceKind::PeriodicMeanFree => {
                let map = periodic_identify(&mesh)?;
                for v in 0..nv {
                    if map.vertex_class[v] == v {
                        dof_map[v] = Some(dof_vertex.len());
                        dof_vertex.push(v);
                    }
                }
                for v in 0..nv {
                    dof_map[v] = dof_map[map.vertex_class[v]];
                }
                Adjacency::periodic(&mesh, &map)
            }
        };
        let children = mesh.lineage().map(|l| {
            let count = 2 * l.parent_cells_per_side * l.parent_cells_per_side;
            let mut kids = vec![Vec::new(); count];
            for (e, &p) in l.parent_of.iter().enumerate() {
                kids[p].push(e);
            }
            kids
        });
        Ok(Self {
            mesh,
            kind,
            dof_map,
            dof_vertex,
            adjacency,
            children,
        })
    }

    pub fn dirichlet(mesh: Arc<TriMesh>) -> Result<Self, FemError> {
        Self::new(mesh, SpaceKind::Dirichlet)
    }

    pub fn periodic(mesh: Arc<TriMesh>) -> Result<Self, FemError> {
        Self::new(mesh, SpaceKind::PeriodicMeanFree)
    }

    pub fn unconstrained(mesh: Arc<TriMesh>) -> Result<Self, FemError> {
        Self::new(mesh, SpaceKind::Unconstrained)
    }

    pub fn mesh(&self) -> &TriMesh {
        &self.mesh
    }

    pub fn mesh_arc(&self) -> &Arc<TriMesh> {
        &self.mesh
    }

    pub fn kind(&self) -> SpaceKind {
        self.kind
    }

    pub fn dof_count(&self) -> usize {
        self.dof_vertex.len()
    }

    pub fn dof(&self, vertex: usize) -> Option<usize> {
        self.dof_map[vertex]
    }

    pub fn dof_map(&self) -> &[Option<usize>] {
        &self.dof_map
    }

    /// A representative vertex of every dof.
    pub fn dof_vertex(&self, dof: usize) -> usize {
        self.dof_vertex[dof]
    }

    pub fn adjacency(&self) -> &Adjacency {
        &self.adjacency
    }

    pub fn element_dofs(&self, e: usize) -> [Option<usize>; 3] {
        self.mesh.elements()[e].map(|v| self.dof_map[v])
    }

    /// Elements in whose closure the basis function of `dof` is supported.
    pub fn dof_elements(&self, dof: usize) -> &[usize] {
        self.adjacency.elements_at(self.dof_vertex[dof])
    }

    /// Children of coarse element `t` when this space lives on a refined mesh.
    pub fn children(&self, t: usize) -> Result<&[usize], FemError> {
        let kids = self.children.as_ref().ok_or(FemError::MissingParentMap)?;
        kids.get(t).map(|k| k.as_slice()).ok_or(FemError::Mesh(MeshError::InvalidElement {
            id: t,
            count: kids.len(),
        }))
    }

    /// Nodal values on all vertices (zero on eliminated boundary vertices).
    pub fn expand(&self, u: &[f64]) -> Vec<f64> {
        self.dof_map.iter().map(|d| d.map_or(0.0, |d| u[d])).collect()
    }

    /// Gradient of the dof vector `u` on element `e`.
    pub fn gradient(&self, u: &[f64], e: usize) -> Vector2<f64> {
        let grads = self.mesh.gradients(e);
        let mut g = Vector2::zeros();
        for (k, d) in self.element_dofs(e).iter().enumerate() {
            if let Some(d) = d {
                g += Vector2::new(grads[k][0], grads[k][1]) * u[*d];
            }
        }
        g
    }

    /// `M 1`: integrals of the basis functions.
    pub fn mass_vector(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dof_count()];
        for e in 0..self.mesh.num_elements() {
            let third = self.mesh.area(e) / 3.0;
            for d in self.element_dofs(e).into_iter().flatten() {
                m[d] += third;
            }
        }
        m
    }

    /// Shifts `u` to zero mean; no-op unless the space is periodic.
    pub fn normalize(&self, mass_vector: &[f64], u: &mut [f64]) {
        if self.kind != SpaceKind::PeriodicMeanFree {
            return;
        }
        let total: f64 = mass_vector.iter().sum();
        let mean = crate::sparse::dot(mass_vector, u) / total;
        u.iter_mut().for_each(|x| *x -= mean);
    }

    fn check_same_mesh(&self, coeff: &CoefficientField) -> Result<(), FemError> {
        let (a, b) = (coeff.mesh.cells_per_side(), self.mesh.cells_per_side());
        if a != b || coeff.values.len() != self.mesh.num_elements() {
            return Err(FemError::CoefficientMismatch { coeff: a, space: b });
        }
        Ok(())
    }
}

/// Symmetric positive definite 2x2 tensor per element with cached global
/// spectral bounds.
#[derive(Debug, Clone)]
pub struct CoefficientField {
    mesh: Arc<TriMesh>,
    values: Vec<Tensor>,
    alpha: f64,
    beta: f64,
}

/// Eigenvalues of the symmetric part, ascending.
pub fn sym_eigenvalues(a: &Tensor) -> (f64, f64) {
    let (p, q, r) = (a[(0, 0)], 0.5 * (a[(0, 1)] + a[(1, 0)]), a[(1, 1)]);
    let mean = 0.5 * (p + r);
    let rad = (0.25 * (p - r) * (p - r) + q * q).sqrt();
    (mean - rad, mean + rad)
}

impl CoefficientField {
    pub fn new(mesh: Arc<TriMesh>, values: Vec<Tensor>) -> Result<Self, FemError> {
        if values.len() != mesh.num_elements() {
            return Err(FemError::CoefficientMismatch {
                coeff: values.len(),
                space: mesh.num_elements(),
            });
        }
        let mut alpha = f64::INFINITY;
        let mut beta = f64::NEG_INFINITY;
        for (e, a) in values.iter().enumerate() {
            let scale = a.abs().max();
            if !a.iter().all(|v| v.is_finite()) {
                return Err(FemError::InvalidCoefficient {
                    element: e,
                    reason: "non-finite entry".into(),
                });
            }
            if (a[(0, 1)] - a[(1, 0)]).abs() > 1e-12 * scale {
                return Err(FemError::InvalidCoefficient {
                    element: e,
                    reason: "not symmetric".into(),
                });
            }
            let (lo, hi) = sym_eigenvalues(a);
            if lo <= 0.0 {
                return Err(FemError::InvalidCoefficient {
                    element: e,
                    reason: format!("smallest eigenvalue {lo:e}"),
                });
            }
            alpha = alpha.min(lo);
            beta = beta.max(hi);
        }
        Ok(Self {
            mesh,
            values,
            alpha,
            beta,
        })
    }

    /// Samples `f` at element barycenters.
    pub fn from_fn(mesh: Arc<TriMesh>, f: impl Fn(Point) -> Tensor) -> Result<Self, FemError> {
        let values = (0..mesh.num_elements()).map(|e| f(mesh.barycenter(e))).collect();
        Self::new(mesh, values)
    }

    pub fn from_scalar_fn(mesh: Arc<TriMesh>, f: impl Fn(Point) -> f64) -> Result<Self, FemError> {
        Self::from_fn(mesh, |x| Tensor::identity() * f(x))
    }

    pub fn constant(mesh: Arc<TriMesh>, a: Tensor) -> Result<Self, FemError> {
        let n = mesh.num_elements();
        Self::new(mesh, vec![a; n])
    }

    pub fn mesh(&self) -> &TriMesh {
        &self.mesh
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Stable 64-bit digest of the mesh size and every tensor entry.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        h.update((self.mesh.cells_per_side() as u64).to_le_bytes());
        for a in &self.values {
            for v in a.iter() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }

    /// Volume averages over the coarse elements of the parent mesh.
    pub fn coarse_means(&self, fine_space: &FeSpace, num_coarse: usize) -> Result<Vec<Tensor>, FemError> {
        fine_space.check_same_mesh(self)?;
        (0..num_coarse)
            .map(|t| {
                let kids = fine_space.children(t)?;
                let mut sum = Tensor::zeros();
                let mut area = 0.0;
                for &c in kids {
                    let a = self.mesh.area(c);
                    sum += self.values[c] * a;
                    area += a;
                }
                Ok(sum / area)
            })
            .collect()
    }
}

const LOCAL_MASS: [[f64; 3]; 3] = [[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]];

/// Element stiffness `|t| grad lambda_i . (A grad lambda_j)` of a triangle.
pub fn local_stiffness(p: [Point; 3], a: &Tensor) -> [[f64; 3]; 3] {
    let area = 0.5 * ((p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]));
    let g = p1_gradients(p).map(|g| Vector2::new(g[0], g[1]));
    std::array::from_fn(|i| std::array::from_fn(|j| area * g[i].dot(&(a * g[j]))))
}

/// Element mass matrix of a triangle with the given area.
pub fn local_mass(area: f64) -> [[f64; 3]; 3] {
    LOCAL_MASS.map(|row| row.map(|v| v * area / 12.0))
}

/// Stiffness with per-element tensors: entry `(i, j)` is
/// `sum_t |t| grad phi_i . (A_t grad phi_j)`.
pub fn assemble_tensor_stiffness(space: &FeSpace, tensors: &[Tensor]) -> SparseOp {
    let mesh = space.mesh();
    assert_eq!(tensors.len(), mesh.num_elements(), "one tensor per element");
    let n = space.dof_count();
    let mut b = TripletBuilder::new(n, n);
    for (e, a) in tensors.iter().enumerate() {
        let local = local_stiffness(mesh.coords(e), a);
        let dofs = space.element_dofs(e);
        for i in 0..3 {
            let Some(di) = dofs[i] else { continue };
            for j in 0..3 {
                let Some(dj) = dofs[j] else { continue };
                b.push(di, dj, local[i][j]);
            }
        }
    }
    b.build()
}

pub fn assemble_stiffness(space: &FeSpace, coeff: &CoefficientField) -> Result<SparseOp, FemError> {
    space.check_same_mesh(coeff)?;
    Ok(assemble_tensor_stiffness(space, &coeff.values))
}

pub fn assemble_mass(space: &FeSpace) -> SparseOp {
    let mesh = space.mesh();
    let n = space.dof_count();
    let mut b = TripletBuilder::new(n, n);
    for e in 0..mesh.num_elements() {
        let w = mesh.area(e) / 12.0;
        let dofs = space.element_dofs(e);
        for i in 0..3 {
            let Some(di) = dofs[i] else { continue };
            for j in 0..3 {
                let Some(dj) = dofs[j] else { continue };
                b.push(di, dj, w * LOCAL_MASS[i][j]);
            }
        }
    }
    b.build()
}

/// Mass coupling between the dofs of `test` and the dofs of `trial`, both
/// on the same mesh: entry `(i, j) = (phi_i, psi_j)`.
pub fn assemble_mixed_mass(test: &FeSpace, trial: &FeSpace) -> SparseOp {
    let mesh = test.mesh();
    let mut b = TripletBuilder::new(test.dof_count(), trial.dof_count());
    for e in 0..mesh.num_elements() {
        let w = mesh.area(e) / 12.0;
        let (r, c) = (test.element_dofs(e), trial.element_dofs(e));
        for i in 0..3 {
            let Some(di) = r[i] else { continue };
            for j in 0..3 {
                let Some(dj) = c[j] else { continue };
                b.push(di, dj, w * LOCAL_MASS[i][j]);
            }
        }
    }
    b.build()
}

fn check_nested(coarse: &FeSpace, fine: &FeSpace) -> Result<(), FemError> {
    if coarse.kind != fine.kind {
        return Err(FemError::KindMismatch(coarse.kind, fine.kind));
    }
    let lineage = fine.mesh.lineage().ok_or(FemError::MissingParentMap)?;
    if lineage.parent_cells_per_side != coarse.mesh.cells_per_side() {
        return Err(FemError::NotNested(format!(
            "fine mesh refines a {}-cell mesh, coarse mesh has {} cells per side",
            lineage.parent_cells_per_side,
            coarse.mesh.cells_per_side()
        )));
    }
    Ok(())
}

/// Load of the element corrector problem for coarse element `t` and
/// direction `j`: entry `i = sum_{s in t} |s| grad phi_i|_s . (A_s e_j)`.
pub fn assemble_corrector_load(
    fine: &FeSpace,
    coeff: &CoefficientField,
    t: usize,
    j: usize,
) -> Result<Vec<f64>, FemError> {
    fine.check_same_mesh(coeff)?;
    let mesh = fine.mesh();
    let mut load = vec![0.0; fine.dof_count()];
    for &s in fine.children(t)? {
        let area = mesh.area(s);
        let flux = coeff.values[s].column(j).into_owned();
        let g = mesh.gradients(s);
        for (k, d) in fine.element_dofs(s).iter().enumerate() {
            if let Some(d) = d {
                load[*d] += area * (g[k][0] * flux[0] + g[k][1] * flux[1]);
            }
        }
    }
    Ok(load)
}

/// `I_H = E_H o Pi_H` from fine dofs to coarse dofs. `Pi_H` is the exact
/// elementwise L2 projection onto discontinuous P1, `E_H` averages the
/// elementwise values at each free coarse vertex over the adjacent elements.
pub fn quasi_interpolation_matrix(coarse: &FeSpace, fine: &FeSpace) -> Result<SparseOp, FemError> {
    check_nested(coarse, fine)?;
    let cmesh = coarse.mesh();
    let fmesh = fine.mesh();
    let mut b = TripletBuilder::new(coarse.dof_count(), fine.dof_count());
    for t in 0..cmesh.num_elements() {
        let area_t = cmesh.area(t);
        // inverse of the local P1 mass matrix |T|/12 [[2,1,1],[1,2,1],[1,1,2]]
        let minv = |a: usize, c: usize| 3.0 / area_t * if a == c { 3.0 } else { -1.0 };
        let cdofs = coarse.element_dofs(t);
        let weights: [f64; 3] = std::array::from_fn(|a| match cdofs[a] {
            Some(_) => 1.0 / coarse.adjacency().elements_at(cmesh.elements()[t][a]).len() as f64,
            None => 0.0,
        });
        for &s in fine.children(t)? {
            let w = fmesh.area(s) / 12.0;
            let lam: [[f64; 3]; 3] =
                std::array::from_fn(|k| cmesh.barycentric(t, fmesh.vertices()[fmesh.elements()[s][k]]));
            let fdofs = fine.element_dofs(s);
            for (i, fd) in fdofs.iter().enumerate() {
                let Some(fd) = fd else { continue };
                // coefficient of v_i in b_T,c = (v, lambda_c)_s
                let bt: [f64; 3] =
                    std::array::from_fn(|c| (0..3).map(|k| lam[k][c] * w * LOCAL_MASS[i][k]).sum());
                for a in 0..3 {
                    let Some(cd) = cdofs[a] else { continue };
                    let val: f64 = (0..3).map(|c| minv(a, c) * bt[c]).sum();
                    b.push(cd, *fd, weights[a] * val);
                }
            }
        }
    }
    Ok(b.build())
}

/// Nodal interpolation of coarse P1 functions on the fine vertices.
pub fn prolongation(coarse: &FeSpace, fine: &FeSpace) -> Result<SparseOp, FemError> {
    check_nested(coarse, fine)?;
    let parents = fine.mesh.parent_of().ok_or(FemError::MissingParentMap)?;
    let cmesh = coarse.mesh();
    let fmesh = fine.mesh();
    let mut b = TripletBuilder::new(fine.dof_count(), coarse.dof_count());
    for d in 0..fine.dof_count() {
        let v = fine.dof_vertex(d);
        let t = parents[fmesh.vertex_elements(v)[0]];
        let lam = cmesh.barycentric(t, fmesh.vertices()[v]);
        for (a, cd) in coarse.element_dofs(t).iter().enumerate() {
            if let Some(cd) = cd {
                let l = lam[a];
                if l.abs() > 1e-14 {
                    b.push(d, *cd, l);
                }
            }
        }
    }
    Ok(b.build())
}

/// Per coarse element, the dofs and constant gradients of its three basis
/// functions (boundary vertices carry `None`).
#[derive(Debug, Clone)]
pub struct ElementGradients {
    pub per_element: Vec<[(Option<usize>, Vector2<f64>); 3]>,
}

impl ElementGradients {
    pub fn new(space: &FeSpace) -> Self {
        let mesh = space.mesh();
        let per_element = (0..mesh.num_elements())
            .map(|e| {
                let g = mesh.gradients(e);
                let d = space.element_dofs(e);
                std::array::from_fn(|k| (d[k], Vector2::new(g[k][0], g[k][1])))
            })
            .collect();
        Self { per_element }
    }

    pub fn gradient(&self, u: &[f64], e: usize) -> Vector2<f64> {
        self.per_element[e]
            .iter()
            .filter_map(|(d, g)| d.map(|d| g * u[d]))
            .sum()
    }
}

/// Cholesky factorization of a space's stiffness-like operator. Periodic
/// operators have constants in their kernel; one dof is pinned, the right
/// hand side is made compatible and solutions are shifted to zero mean.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    kind: SpaceKind,
    chol: ProfileCholesky,
    mass_vector: Vec<f64>,
}

impl SpdFactor {
    pub fn new(space: &FeSpace, op: &SparseOp) -> Result<Self, FemError> {
        let n = space.dof_count();
        if op.nrows() != n {
            return Err(FemError::Dimension {
                expected: n,
                got: op.nrows(),
            });
        }
        let mass_vector = space.mass_vector();
        let chol = match space.kind() {
            SpaceKind::PeriodicMeanFree => {
                let rows: Vec<usize> = (1..n).collect();
                let col_map: Vec<usize> = (0..n).map(|j| j.wrapping_sub(1)).collect();
                ProfileCholesky::factor(&op.extract(&rows, &col_map, n - 1))?
            }
            _ => ProfileCholesky::factor(op)?,
        };
        Ok(Self {
            kind: space.kind(),
            chol,
            mass_vector,
        })
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        match self.kind {
            SpaceKind::PeriodicMeanFree => {
                let total: f64 = self.mass_vector.iter().sum();
                let shift = rhs.iter().sum::<f64>() / total;
                let mut reduced: Vec<f64> = rhs[1..]
                    .iter()
                    .zip(&self.mass_vector[1..])
                    .map(|(b, m)| b - shift * m)
                    .collect();
                self.chol.solve_in_place(&mut reduced);
                let mut u = Vec::with_capacity(rhs.len());
                u.push(0.0);
                u.extend(reduced);
                let mean = crate::sparse::dot(&self.mass_vector, &u) / total;
                u.iter_mut().for_each(|x| *x -= mean);
                u
            }
            _ => self.chol.solve(rhs),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_uniform_mesh, refine_uniform};
    use crate::sparse::{dot, solve_spd};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mesh(n: usize) -> Arc<TriMesh> {
        Arc::new(build_uniform_mesh(n).unwrap())
    }

    fn nested(n: usize, levels: u32) -> (FeSpace, FeSpace) {
        let c = mesh(n);
        let f = Arc::new(refine_uniform(&c, levels));
        (FeSpace::dirichlet(c).unwrap(), FeSpace::dirichlet(f).unwrap())
    }

    #[test]
    fn analytic_reference_triangle() {
        let p = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let k = local_stiffness(p, &Tensor::identity());
        let expected = [[1.0, -0.5, -0.5], [-0.5, 0.5, 0.0], [-0.5, 0.0, 0.5]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((k[i][j] - expected[i][j]).abs() < 1e-15);
            }
        }
        let m = local_mass(0.5);
        assert!((m[0][0] - 1.0 / 12.0).abs() < 1e-16 && (m[0][1] - 1.0 / 24.0).abs() < 1e-16);
    }

    #[test]
    fn local_matrices_on_reference_triangle() {
        // the lower triangle of the n = 1 mesh is (0,0),(1,0),(1,1); check the
        // analytic matrices on the congruent reference triangle through the
        // element gradients directly
        let m = mesh(1);
        let space = FeSpace::unconstrained(m.clone()).unwrap();
        let coeff = CoefficientField::constant(m.clone(), Tensor::identity()).unwrap();
        let k = assemble_stiffness(&space, &coeff).unwrap();
        // vertex 1 = (1,0) is the right-angle corner of element 0 and is not
        // touched by element 1
        let g = m.gradients(0);
        let area = m.area(0);
        let local: Vec<Vec<f64>> = (0..3)
            .map(|i| (0..3).map(|j| area * (g[i][0] * g[j][0] + g[i][1] * g[j][1])).collect())
            .collect();
        // right angle at local vertex 1: 1/2 [[1,-1,0],[-1,2,-1],[0,-1,1]]
        let expected = [[0.5, -0.5, 0.0], [-0.5, 1.0, -0.5], [0.0, -0.5, 0.5]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((local[i][j] - expected[i][j]).abs() < 1e-15);
            }
        }
        assert!((k.get(1, 1) - 1.0).abs() < 1e-15);
        // row sums vanish
        for row in k.to_dense() {
            assert!(row.iter().sum::<f64>().abs() < 1e-13);
        }
        let coeff2 = CoefficientField::constant(m, Tensor::identity() * 2.0).unwrap();
        let k2 = assemble_stiffness(&space, &coeff2).unwrap();
        for (i, j, v) in k.triplets() {
            assert_eq!(k2.get(i, j), 2.0 * v);
        }
    }

    #[test]
    fn mass_properties() {
        let m = mesh(5);
        let space = FeSpace::unconstrained(m.clone()).unwrap();
        let mm = assemble_mass(&space);
        let total: f64 = mm.triplets().map(|(_, _, v)| v).sum();
        assert!((total - 1.0).abs() < 1e-14);
        let ones = vec![1.0; space.dof_count()];
        assert!((dot(&ones, &mm.matvec(&ones)).sqrt() - 1.0).abs() < 1e-14);
        let area = m.area(0);
        // the corner vertex touches two elements
        assert!((mm.get(0, 0) - 2.0 * area / 12.0 * 2.0).abs() < 1e-16);
        assert!(mm.asymmetry() < 1e-15);
    }

    #[test]
    fn coefficient_validation() {
        let m = mesh(2);
        let asym = Tensor::new(1.0, 0.5, 0.0, 1.0);
        assert!(CoefficientField::constant(m.clone(), asym).is_err());
        assert!(CoefficientField::constant(m.clone(), Tensor::new(1.0, 0.0, 0.0, -1.0)).is_err());
        let c = CoefficientField::from_scalar_fn(m.clone(), |x| 1.0 + x[0]).unwrap();
        assert!(c.alpha() > 1.0 && c.beta() < 2.0);
        assert_eq!(c.fingerprint(), c.clone().fingerprint());
        let other = CoefficientField::from_scalar_fn(m, |x| 1.0 + x[1]).unwrap();
        assert_ne!(c.fingerprint(), other.fingerprint());
        let space = FeSpace::dirichlet(mesh(3)).unwrap();
        assert!(matches!(
            assemble_stiffness(&space, &c),
            Err(FemError::CoefficientMismatch { .. })
        ));
    }

    #[test]
    fn corrector_load_support_and_mean() {
        let (_, fine) = nested(2, 2);
        let fm = fine.mesh_arc().clone();
        let coeff = CoefficientField::constant(fm, Tensor::identity()).unwrap();
        for t in 0..8 {
            for j in 0..2 {
                let load = assemble_corrector_load(&fine, &coeff, t, j).unwrap();
                // support inside the closure of t
                let kids = fine.children(t).unwrap();
                for (d, &v) in load.iter().enumerate() {
                    if v != 0.0 {
                        assert!(fine.dof_elements(d).iter().any(|s| kids.contains(s)));
                    }
                }
            }
        }
        // with the unconstrained space the load applied to 1 is int_T d_j 1 = 0
        let fu = FeSpace::unconstrained(fine.mesh_arc().clone()).unwrap();
        let coeff = CoefficientField::from_scalar_fn(fine.mesh_arc().clone(), |x| 1.0 + x[0] * x[1]).unwrap();
        let load = assemble_corrector_load(&fu, &coeff, 3, 1).unwrap();
        assert!(load.iter().sum::<f64>().abs() < 1e-14);
        let flat = FeSpace::dirichlet(mesh(2)).unwrap();
        assert_eq!(
            assemble_corrector_load(&flat, &CoefficientField::constant(mesh(2), Tensor::identity()).unwrap(), 0, 0),
            Err(FemError::MissingParentMap)
        );
    }

    #[test]
    fn corrector_load_on_unrefined_mesh_is_stiffness_column() {
        // fine = coarse: the load of (T, j) is the element stiffness of T
        // applied to the coordinate function x_j
        let c = mesh(1);
        let f = Arc::new(refine_uniform(&c, 0));
        let space = FeSpace::unconstrained(f.clone()).unwrap();
        let coeff = CoefficientField::constant(f.clone(), Tensor::new(2.0, 0.5, 0.5, 1.0)).unwrap();
        for t in 0..2 {
            let mut tensors = vec![Tensor::zeros(); 2];
            tensors[t] = coeff.values()[t];
            let kt = assemble_tensor_stiffness(&space, &tensors);
            for j in 0..2 {
                let xj: Vec<f64> = f.vertices().iter().map(|p| p[j]).collect();
                let expected = kt.matvec(&xj);
                let load = assemble_corrector_load(&space, &coeff, t, j).unwrap();
                for (a, b) in load.iter().zip(&expected) {
                    assert!((a - b).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn interpolation_is_projection() {
        for (n, l) in [(2, 1), (3, 2), (4, 2)] {
            let (coarse, fine) = nested(n, l);
            let ih = quasi_interpolation_matrix(&coarse, &fine).unwrap();
            let p = prolongation(&coarse, &fine).unwrap();
            let ip = ih.matmul(&p);
            let id = SparseOp::identity(coarse.dof_count());
            assert!(ip.add_scaled(-1.0, &id).max_abs() < 1e-13);
        }
        let c = mesh(3);
        let same = Arc::new(refine_uniform(&c, 0));
        let cs = FeSpace::dirichlet(c).unwrap();
        let fs = FeSpace::dirichlet(same).unwrap();
        let ih = quasi_interpolation_matrix(&cs, &fs).unwrap();
        assert!(ih.add_scaled(-1.0, &SparseOp::identity(cs.dof_count())).max_abs() < 1e-13);
        // periodic as well
        let c = mesh(4);
        let f = Arc::new(refine_uniform(&c, 2));
        let cs = FeSpace::periodic(c).unwrap();
        let fs = FeSpace::periodic(f).unwrap();
        let ih = quasi_interpolation_matrix(&cs, &fs).unwrap();
        let p = prolongation(&cs, &fs).unwrap();
        assert!(ih.matmul(&p).add_scaled(-1.0, &SparseOp::identity(16)).max_abs() < 1e-13);
    }

    #[test]
    fn interpolation_rejects_unnested() {
        let c = FeSpace::dirichlet(mesh(3)).unwrap();
        let f = FeSpace::dirichlet(Arc::new(refine_uniform(&build_uniform_mesh(2).unwrap(), 2))).unwrap();
        assert!(matches!(quasi_interpolation_matrix(&c, &f), Err(FemError::NotNested(_))));
        assert!(matches!(prolongation(&c, &FeSpace::dirichlet(mesh(6)).unwrap()), Err(FemError::MissingParentMap)));
    }

    /// Empirical L2 stability constant of I_H over random fine vectors.
    fn stability_constant(n: usize) -> f64 {
        let (coarse, fine) = nested(n, 2);
        let ih = quasi_interpolation_matrix(&coarse, &fine).unwrap();
        let mf = assemble_mass(&fine);
        let mc = assemble_mass(&coarse);
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let v: Vec<f64> = (0..fine.dof_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let iv = ih.matvec(&v);
            let ratio = (dot(&iv, &mc.matvec(&iv)) / dot(&v, &mf.matvec(&v))).sqrt();
            worst = worst.max(ratio);
        }
        worst
    }

    #[test]
    fn interpolation_l2_stability_is_mesh_independent() {
        let cs: Vec<f64> = [4, 8, 16].iter().map(|&n| stability_constant(n)).collect();
        for c in &cs {
            assert!(*c < 3.0, "constants {cs:?}");
        }
        let (lo, hi) = cs.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &c| (a.min(c), b.max(c)));
        assert!(hi / lo < 1.5, "constants {cs:?}");
    }

    #[test]
    fn interpolation_has_full_row_rank() {
        for n in [2usize, 4, 8] {
            let (coarse, fine) = nested(n, 1);
            let ih = quasi_interpolation_matrix(&coarse, &fine).unwrap();
            let gram = ih.matmul(&ih.transpose());
            // I_H I_H^T SPD iff full row rank
            assert!(ProfileCholesky::factor(&gram).is_ok());
        }
    }

    #[test]
    fn prolongation_properties() {
        let (coarse, fine) = nested(3, 2);
        let p = prolongation(&coarse, &fine).unwrap();
        // hat at a coarse vertex takes 1/2 at the fine midpoints
        let col = p.transpose();
        let (_, vals) = col.row(0);
        assert!(vals.iter().any(|&v| (v - 0.5).abs() < 1e-14));
        assert!(vals.iter().all(|&v| v > 0.0 && v <= 1.0 + 1e-14));
        // affine functions are reproduced: use the unconstrained spaces
        let cu = FeSpace::unconstrained(coarse.mesh_arc().clone()).unwrap();
        let fu = FeSpace::unconstrained(fine.mesh_arc().clone()).unwrap();
        let pu = prolongation(&cu, &fu).unwrap();
        let lin = |q: &[f64; 2]| 0.3 + 2.0 * q[0] - 1.5 * q[1];
        let vc: Vec<f64> = cu.mesh().vertices().iter().map(lin).collect();
        let vf = pu.matvec(&vc);
        for (x, q) in vf.iter().zip(fu.mesh().vertices()) {
            assert!((x - lin(q)).abs() < 1e-14);
        }
        // Galerkin identities
        let mf = assemble_mass(&fine);
        let mc = assemble_mass(&coarse);
        let pt = p.transpose();
        assert!(pt.matmul(&mf).matmul(&p).add_scaled(-1.0, &mc).max_abs() < 1e-12);
        let cmesh = coarse.mesh_arc().clone();
        let fine_coeff = CoefficientField::from_fn(fine.mesh_arc().clone(), |x| {
            let t = cmesh.locate(x);
            let s = 1.0 + t as f64 * 0.1;
            Tensor::new(s, 0.2, 0.2, 2.0 * s)
        })
        .unwrap();
        let means = fine_coeff.coarse_means(&fine, cmesh.num_elements()).unwrap();
        let kf = assemble_stiffness(&fine, &fine_coeff).unwrap();
        let kc = assemble_tensor_stiffness(&coarse, &means);
        let diff = pt.matmul(&kf).matmul(&p).add_scaled(-1.0, &kc).max_abs();
        assert!(diff < 1e-12 * kc.max_abs(), "{diff}");
    }

    /// Series solution of -Laplace u = 1 on the unit square at the center.
    fn poisson_center_value() -> f64 {
        let pi = std::f64::consts::PI;
        let mut s = 0.0;
        for m in (1..200).step_by(2) {
            for n in (1..200).step_by(2) {
                let (mf, nf) = (m as f64, n as f64);
                let sign = if ((m + n) / 2 - 1) % 2 == 0 { 1.0 } else { -1.0 };
                s += sign * 16.0 / (pi.powi(4) * mf * nf * (mf * mf + nf * nf));
            }
        }
        s
    }

    #[test]
    fn poisson_maximum_matches_series() {
        let exact = poisson_center_value();
        assert!((exact - 0.07367).abs() < 1e-5);
        let m = mesh(8);
        let space = FeSpace::dirichlet(m.clone()).unwrap();
        let k = assemble_stiffness(&space, &CoefficientField::constant(m, Tensor::identity()).unwrap()).unwrap();
        let rhs = space.mass_vector();
        let u = solve_spd(&k, &rhs, 1e-10).unwrap();
        let max = u.iter().cloned().fold(f64::MIN, f64::max);
        assert!((max - exact).abs() < 3e-3, "max {max} vs {exact}");
        let r: Vec<f64> = k.matvec(&u).iter().zip(&rhs).map(|(a, b)| a - b).collect();
        assert!(dot(&r, &r).sqrt() / dot(&rhs, &rhs).sqrt() <= 1e-10);
    }

    #[test]
    fn periodic_factor_returns_mean_free_solution() {
        let m = mesh(6);
        let space = FeSpace::periodic(m.clone()).unwrap();
        let coeff = CoefficientField::from_scalar_fn(m, |x| 2.0 + (6.0 * x[0]).sin()).unwrap();
        let k = assemble_stiffness(&space, &coeff).unwrap();
        let f = SpdFactor::new(&space, &k).unwrap();
        let rhs: Vec<f64> = (0..space.dof_count()).map(|i| (i as f64 * 0.7).cos()).collect();
        let u = f.solve(&rhs);
        let mv = space.mass_vector();
        assert!(dot(&mv, &u).abs() < 1e-11);
        // residual against the compatible right-hand side
        let total: f64 = mv.iter().sum();
        let shift = rhs.iter().sum::<f64>() / total;
        let ku = k.matvec(&u);
        for i in 0..rhs.len() {
            assert!((ku[i] - (rhs[i] - shift * mv[i])).abs() < 1e-10);
        }
    }
}
