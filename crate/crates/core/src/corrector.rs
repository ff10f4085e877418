//! Element correctors on oversampling patches, the corrector operator and
//! the decay of idealized correctors.
//!
//! A corrector `q_{T,j}` lives in the kernel of the quasi-interpolation and
//! is supported on the fine dofs interior to `N^l(T)`. Elements whose
//! patches coincide share one saddle-point factorization.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fem::{
    assemble_corrector_load, assemble_stiffness, prolongation, quasi_interpolation_matrix, CoefficientField,
    ElementGradients, FeSpace, FemError, SpaceKind,
};
use crate::geometry::Patch;
use crate::sparse::{SaddleSolver, SolverError, SparseOp, TripletBuilder};

/// Default bound on the fine dof count for whole-domain correctors.
pub const DEFAULT_GLOBAL_DOF_CAP: usize = 20_000;

#[derive(Debug, Error)]
pub enum CorrectorError {
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error("patch of element {element} has no interior fine dofs; refine the fine mesh")]
    NoInteriorDofs { element: usize },
    #[error("whole-domain correctors need {dofs} fine dofs, the cap is {cap}")]
    GlobalTooLarge { dofs: usize, cap: usize },
    #[error("corrector ({element}, {direction}): {source}")]
    Solve {
        element: usize,
        direction: usize,
        source: SolverError,
    },
    #[error("coarse vector has length {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("corrector cache i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrector cache does not match: {0}")]
    CacheMismatch(String),
}

/// Oversampling order of the patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Oversampling {
    Layers(usize),
    /// The patch is the whole mesh.
    Global,
}

impl Oversampling {
    fn code(self) -> u64 {
        match self {
            Self::Layers(l) => l as u64,
            Self::Global => u64::MAX,
        }
    }

    fn from_code(c: u64) -> Self {
        if c == u64::MAX {
            Self::Global
        } else {
            Self::Layers(c as usize)
        }
    }
}

impl fmt::Display for Oversampling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Layers(l) => write!(f, "{l}"),
            Self::Global => write!(f, "inf"),
        }
    }
}

/// Shared immutable data of one coarse/fine pair and coefficient.
#[derive(Debug, Clone)]
pub struct LodContext {
    pub coarse: FeSpace,
    pub fine: FeSpace,
    pub coeff: CoefficientField,
    /// Fine stiffness on fine dofs.
    pub stiffness: SparseOp,
    /// `I_H`, coarse dofs by fine dofs.
    pub interpolation: SparseOp,
    /// Nodal prolongation, fine dofs by coarse dofs.
    pub prolongation: SparseOp,
    pub global_dof_cap: usize,
}

impl LodContext {
    pub fn new(coarse: FeSpace, fine: FeSpace, coeff: CoefficientField) -> Result<Self, CorrectorError> {
        let stiffness = assemble_stiffness(&fine, &coeff)?;
        let interpolation = quasi_interpolation_matrix(&coarse, &fine)?;
        let prolongation = prolongation(&coarse, &fine)?;
        Ok(Self {
            coarse,
            fine,
            coeff,
            stiffness,
            interpolation,
            prolongation,
            global_dof_cap: DEFAULT_GLOBAL_DOF_CAP,
        })
    }

    pub fn with_global_dof_cap(mut self, cap: usize) -> Self {
        self.global_dof_cap = cap;
        self
    }

    fn parents(&self) -> &[usize] {
        self.fine.mesh().parent_of().expect("nested fine mesh")
    }

    /// `N^l(T)` on the coarse mesh (wrapping for periodic spaces), with its
    /// interior fine dofs filled in.
    pub fn patch(&self, element: usize, ell: Oversampling) -> Result<Patch, CorrectorError> {
        let cmesh = self.coarse.mesh();
        let order = match ell {
            Oversampling::Layers(l) => l,
            Oversampling::Global => {
                if self.fine.dof_count() > self.global_dof_cap {
                    return Err(CorrectorError::GlobalTooLarge {
                        dofs: self.fine.dof_count(),
                        cap: self.global_dof_cap,
                    });
                }
                cmesh.num_elements()
            }
        };
        let mut patch = self
            .coarse
            .adjacency()
            .patch(cmesh, element, order)
            .map_err(FemError::from)?;
        patch.interior_fine_dofs = Some(self.interior_dofs(&patch.elements)?);
        Ok(patch)
    }

    /// Fine dofs all of whose elements have their parent in `elements`.
    pub fn interior_dofs(&self, elements: &[usize]) -> Result<Vec<usize>, CorrectorError> {
        let parents = self.parents();
        let mut inside = vec![false; self.coarse.mesh().num_elements()];
        for &t in elements {
            inside[t] = true;
        }
        let mut candidates = Vec::new();
        for &t in elements {
            for &s in self.fine.children(t)? {
                candidates.extend(self.fine.element_dofs(s).into_iter().flatten());
            }
        }
        candidates.sort_unstable();
        candidates.dedup();
        candidates.retain(|&d| self.fine.dof_elements(d).iter().all(|&s| inside[parents[s]]));
        Ok(candidates)
    }

    /// Coarse dofs whose basis support meets `elements`.
    fn constraint_rows(&self, elements: &[usize]) -> Vec<usize> {
        let mut rows: Vec<usize> = elements
            .iter()
            .flat_map(|&t| self.coarse.element_dofs(t).into_iter().flatten())
            .collect();
        rows.sort_unstable();
        rows.dedup();
        rows
    }

    pub fn energy(&self, u: &[f64]) -> f64 {
        crate::sparse::dot(u, &self.stiffness.matvec(u))
    }
}

/// One corrector `q_{T,j}` as a sparse fine-dof vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Corrector {
    pub element: usize,
    pub direction: usize,
    /// Coarse elements of the patch.
    pub patch: Vec<usize>,
    /// Interior fine dofs of the patch, ascending.
    pub dofs: Vec<usize>,
    pub values: Vec<f64>,
}

impl Corrector {
    pub fn to_dense(&self, n: usize) -> Vec<f64> {
        let mut u = vec![0.0; n];
        self.add_scaled_to(1.0, &mut u);
        u
    }

    pub fn add_scaled_to(&self, alpha: f64, u: &mut [f64]) {
        for (&d, &v) in self.dofs.iter().zip(&self.values) {
            u[d] += alpha * v;
        }
    }
}

/// All `2 card(T_H)` correctors of one oversampling order. Corrector
/// `(T, j)` is stored at index `2 T + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectorSet {
    pub oversampling: Oversampling,
    pub coarse_cells: usize,
    pub fine_cells: usize,
    pub kind: SpaceKind,
    pub fingerprint: u64,
    correctors: Vec<Corrector>,
}

impl CorrectorSet {
    pub fn len(&self) -> usize {
        self.correctors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.correctors.is_empty()
    }

    pub fn get(&self, element: usize, direction: usize) -> &Corrector {
        &self.correctors[2 * element + direction]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Corrector> {
        self.correctors.iter()
    }

    /// Content digest; equal sets give equal digests.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.oversampling.code().to_le_bytes());
        h.update(self.fingerprint.to_le_bytes());
        for c in &self.correctors {
            h.update((c.element as u64).to_le_bytes());
            h.update([c.direction as u8]);
            for &d in &c.dofs {
                h.update((d as u64).to_le_bytes());
            }
            for v in &c.values {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Checks that the set was computed for this context.
    pub fn check_context(&self, ctx: &LodContext) -> Result<(), CorrectorError> {
        let expect = (
            ctx.coarse.mesh().cells_per_side(),
            ctx.fine.mesh().cells_per_side(),
            ctx.fine.kind(),
            ctx.coeff.fingerprint(),
        );
        let got = (self.coarse_cells, self.fine_cells, self.kind, self.fingerprint);
        if expect != got {
            return Err(CorrectorError::CacheMismatch(format!(
                "set built for {got:?}, context is {expect:?}"
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), CorrectorError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(CACHE_MAGIC)?;
        let kind = match self.kind {
            SpaceKind::Dirichlet => 0u8,
            SpaceKind::PeriodicMeanFree => 1,
            SpaceKind::Unconstrained => 2,
        };
        w.write_all(&[kind])?;
        for v in [
            self.oversampling.code(),
            self.coarse_cells as u64,
            self.fine_cells as u64,
            self.fingerprint,
            self.correctors.len() as u64,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for c in &self.correctors {
            w.write_all(&(c.element as u64).to_le_bytes())?;
            w.write_all(&[c.direction as u8])?;
            w.write_all(&(c.patch.len() as u64).to_le_bytes())?;
            for &t in &c.patch {
                w.write_all(&(t as u64).to_le_bytes())?;
            }
            w.write_all(&(c.dofs.len() as u64).to_le_bytes())?;
            for (&d, &v) in c.dofs.iter().zip(&c.values) {
                w.write_all(&(d as u64).to_le_bytes())?;
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Loads a cache file and checks it against the context and order.
    pub fn load(path: &Path, ctx: &LodContext, ell: Oversampling) -> Result<Self, CorrectorError> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(CorrectorError::CacheMismatch("bad magic".into()));
        }
        let kind = match read_u8(&mut r)? {
            0 => SpaceKind::Dirichlet,
            1 => SpaceKind::PeriodicMeanFree,
            2 => SpaceKind::Unconstrained,
            k => return Err(CorrectorError::CacheMismatch(format!("unknown space kind {k}"))),
        };
        let oversampling = Oversampling::from_code(read_u64(&mut r)?);
        let coarse_cells = read_u64(&mut r)? as usize;
        let fine_cells = read_u64(&mut r)? as usize;
        let fingerprint = read_u64(&mut r)?;
        let count = read_u64(&mut r)? as usize;
        let mut correctors = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let element = read_u64(&mut r)? as usize;
            let direction = read_u8(&mut r)? as usize;
            let np = read_u64(&mut r)? as usize;
            let patch = (0..np).map(|_| read_u64(&mut r).map(|v| v as usize)).collect::<Result<_, _>>()?;
            let nnz = read_u64(&mut r)? as usize;
            let mut dofs = Vec::with_capacity(nnz);
            let mut values = Vec::with_capacity(nnz);
            for _ in 0..nnz {
                dofs.push(read_u64(&mut r)? as usize);
                values.push(f64::from_le_bytes(read_array(&mut r)?));
            }
            correctors.push(Corrector {
                element,
                direction,
                patch,
                dofs,
                values,
            });
        }
        let set = Self {
            oversampling,
            coarse_cells,
            fine_cells,
            kind,
            fingerprint,
            correctors,
        };
        set.check_context(ctx)?;
        if set.oversampling != ell {
            return Err(CorrectorError::CacheMismatch(format!(
                "cache has oversampling {}, requested {ell}",
                set.oversampling
            )));
        }
        if set.correctors.len() != 2 * ctx.coarse.mesh().num_elements() {
            return Err(CorrectorError::CacheMismatch("corrector count".into()));
        }
        Ok(set)
    }
}

const CACHE_MAGIC: &[u8; 4] = b"LODC";

fn read_array<const N: usize>(r: &mut impl Read) -> std::io::Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    read_array(r).map(u64::from_le_bytes)
}

fn read_u8(r: &mut impl Read) -> std::io::Result<u8> {
    read_array::<1>(r).map(|b| b[0])
}

/// Prepared saddle-point solver for one patch.
struct PatchSolver {
    elements: Vec<usize>,
    dofs: Vec<usize>,
    /// Periodic whole-domain patches pin the first dof and shift afterwards.
    pinned: bool,
    /// `None` when the patch has no interior dofs.
    saddle: Option<SaddleSolver>,
}

impl PatchSolver {
    fn new(ctx: &LodContext, patch: &Patch) -> Result<Self, SolverError> {
        let dofs = patch.interior_fine_dofs.clone().unwrap_or_default();
        // an unrefined fine mesh has a trivial kernel
        let unrefined = ctx.fine.mesh().cells_per_side() == ctx.coarse.mesh().cells_per_side();
        if dofs.is_empty() || unrefined {
            return Ok(Self {
                elements: patch.elements.clone(),
                dofs: Vec::new(),
                pinned: false,
                saddle: None,
            });
        }
        let n_fine = ctx.fine.dof_count();
        let pinned = ctx.fine.kind() == SpaceKind::PeriodicMeanFree && dofs.len() == n_fine;
        let unknowns: Vec<usize> = if pinned { dofs[1..].to_vec() } else { dofs.clone() };
        let mut col_map = vec![usize::MAX; n_fine];
        for (k, &d) in unknowns.iter().enumerate() {
            col_map[d] = k;
        }
        let op = ctx.stiffness.extract(&unknowns, &col_map, unknowns.len());
        let rows = ctx.constraint_rows(&patch.elements);
        let mut constraints = ctx.interpolation.extract(&rows, &col_map, unknowns.len());
        if pinned && !rows.is_empty() {
            // only differences of I_H q are constrained; constants stay free
            let mut b = TripletBuilder::new(rows.len() - 1, unknowns.len());
            let (c0, v0) = constraints.row(0);
            for r in 1..rows.len() {
                let (cols, vals) = constraints.row(r);
                for (&c, &v) in cols.iter().zip(vals) {
                    b.push(r - 1, c, v);
                }
                for (&c, &v) in c0.iter().zip(v0) {
                    b.push(r - 1, c, -v);
                }
            }
            constraints = b.build();
        }
        let saddle = Some(SaddleSolver::new(&op, &constraints)?);
        Ok(Self {
            elements: patch.elements.clone(),
            dofs,
            pinned,
            saddle,
        })
    }

    fn solve(&self, ctx: &LodContext, element: usize, direction: usize) -> Result<Corrector, CorrectorError> {
        let load = assemble_corrector_load(&ctx.fine, &ctx.coeff, element, direction)?;
        let Some(saddle) = &self.saddle else {
            return Ok(Corrector {
                element,
                direction,
                patch: self.elements.clone(),
                dofs: Vec::new(),
                values: Vec::new(),
            });
        };
        let values = if self.pinned {
            let rhs: Vec<f64> = self.dofs[1..].iter().map(|&d| load[d]).collect();
            let mut q = vec![0.0];
            q.extend(saddle.solve(&rhs));
            // I_H q is constant; shifting by it puts q in the kernel
            let shift = ctx.interpolation.matvec(&q).first().copied().unwrap_or(0.0);
            q.iter_mut().for_each(|v| *v -= shift);
            q
        } else {
            let rhs: Vec<f64> = self.dofs.iter().map(|&d| load[d]).collect();
            saddle.solve(&rhs)
        };
        Ok(Corrector {
            element,
            direction,
            patch: self.elements.clone(),
            dofs: self.dofs.clone(),
            values,
        })
    }
}

fn prepare(ctx: &LodContext, patch: &Patch) -> Result<PatchSolver, CorrectorError> {
    let unrefined = ctx.fine.mesh().cells_per_side() == ctx.coarse.mesh().cells_per_side();
    if !unrefined && patch.interior_fine_dofs.as_ref().is_none_or(|d| d.is_empty()) {
        return Err(CorrectorError::NoInteriorDofs {
            element: patch.center_element,
        });
    }
    PatchSolver::new(ctx, patch).map_err(|source| CorrectorError::Solve {
        element: patch.center_element,
        direction: 0,
        source,
    })
}

/// Solves the single corrector problem for `(element, direction)`.
pub fn solve_element_corrector(
    ctx: &LodContext,
    element: usize,
    direction: usize,
    ell: Oversampling,
) -> Result<Corrector, CorrectorError> {
    let patch = ctx.patch(element, ell)?;
    prepare(ctx, &patch)?.solve(ctx, element, direction)
}

/// All correctors for one oversampling order. Elements with identical
/// patches share a factorization; groups run in parallel.
pub fn compute_all_correctors(ctx: &LodContext, ell: Oversampling) -> Result<CorrectorSet, CorrectorError> {
    let nt = ctx.coarse.mesh().num_elements();
    let mut groups: BTreeMap<Vec<usize>, (Patch, Vec<usize>)> = BTreeMap::new();
    for t in 0..nt {
        let patch = ctx.patch(t, ell)?;
        groups
            .entry(patch.elements.clone())
            .or_insert_with(|| (patch, Vec::new()))
            .1
            .push(t);
    }
    let groups: Vec<(Patch, Vec<usize>)> = groups.into_values().collect();
    let solved: Vec<Vec<Corrector>> = groups
        .par_iter()
        .map(|(patch, members)| {
            let solver = prepare(ctx, patch)?;
            let mut out = Vec::with_capacity(2 * members.len());
            for &t in members {
                for j in 0..2 {
                    out.push(solver.solve(ctx, t, j).map_err(|e| match e {
                        CorrectorError::Solve { source, .. } => CorrectorError::Solve {
                            element: t,
                            direction: j,
                            source,
                        },
                        e => e,
                    })?);
                }
            }
            Ok(out)
        })
        .collect::<Result<_, CorrectorError>>()?;
    let mut slots: Vec<Option<Corrector>> = vec![None; 2 * nt];
    for c in solved.into_iter().flatten() {
        let i = 2 * c.element + c.direction;
        slots[i] = Some(c);
    }
    Ok(CorrectorSet {
        oversampling: ell,
        coarse_cells: ctx.coarse.mesh().cells_per_side(),
        fine_cells: ctx.fine.mesh().cells_per_side(),
        kind: ctx.fine.kind(),
        fingerprint: ctx.coeff.fingerprint(),
        correctors: slots.into_iter().map(|c| c.expect("every slot solved")).collect(),
    })
}

/// `C v_H = sum_T sum_j (d_j v_H|_T) q_{T,j}` as a fine dof vector.
pub fn apply_corrector(ctx: &LodContext, set: &CorrectorSet, v_h: &[f64]) -> Result<Vec<f64>, CorrectorError> {
    let expected = ctx.coarse.dof_count();
    if v_h.len() != expected {
        return Err(CorrectorError::Dimension {
            expected,
            got: v_h.len(),
        });
    }
    let grads = ElementGradients::new(&ctx.coarse);
    let mut out = vec![0.0; ctx.fine.dof_count()];
    for t in 0..ctx.coarse.mesh().num_elements() {
        let g = grads.gradient(v_h, t);
        for j in 0..2 {
            if g[j] != 0.0 {
                set.get(t, j).add_scaled_to(g[j], &mut out);
            }
        }
    }
    Ok(out)
}

/// Energy of `q` outside `N^m(T)` for `m = 0..=m_max`; `m_max` defaults to
/// the saturation order of `T`.
pub fn decay_profile(ctx: &LodContext, corrector: &Corrector, m_max: Option<usize>) -> Vec<(usize, f64)> {
    let cmesh = ctx.coarse.mesh();
    let fmesh = ctx.fine.mesh();
    let parents = ctx.parents();
    let q = corrector.to_dense(ctx.fine.dof_count());
    let values = ctx.coeff.values();
    let element_energy: Vec<f64> = (0..fmesh.num_elements())
        .map(|s| {
            let g = ctx.fine.gradient(&q, s);
            fmesh.area(s) * g.dot(&(values[s] * g))
        })
        .collect();
    let adjacency = ctx.coarse.adjacency();
    let t = corrector.element;
    let m_max = m_max.unwrap_or_else(|| adjacency.saturation_order(cmesh, t));
    let mut inside = vec![false; cmesh.num_elements()];
    let mut set = std::collections::BTreeSet::from([t]);
    let mut out = Vec::with_capacity(m_max + 1);
    for m in 0..=m_max {
        if m > 0 {
            set = adjacency.grow(cmesh, &set);
        }
        for &e in &set {
            inside[e] = true;
        }
        let tail: f64 = element_energy
            .iter()
            .zip(parents)
            .map(|(&w, &p)| if inside[p] { 0.0 } else { w })
            .sum();
        out.push((m, tail));
    }
    out
}
