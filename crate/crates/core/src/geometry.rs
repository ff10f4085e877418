//! Structured triangulations of the unit square, red refinement, element
//! patches and periodic vertex identification.
//!
//! Every mesh is a tensor grid of `n x n` square cells, each split along the
//! lower-left to upper-right diagonal into a lower and an upper triangle.
//! Vertices are numbered row-major (`j * (n + 1) + i` for the vertex at
//! `(i / n, j / n)`), cells row-major, and the two triangles of cell `c` are
//! elements `2c` (lower) and `2c + 1` (upper).

use std::collections::{BTreeSet, HashMap};

use thiserror::Error;

pub type Point = [f64; 2];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("invalid mesh size: {0} cells per side")]
    InvalidSize(usize),
    #[error("element id {id} out of range ({count} elements)")]
    InvalidElement { id: usize, count: usize },
    #[error("non-conforming mesh: edge ({0}, {1}) shared by {2} elements")]
    NonConforming(usize, usize, usize),
    #[error("boundary vertex {0} has no periodic partner")]
    MissingPartner(usize),
}

/// An interior edge with its two neighbouring elements, `plus < minus`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Face {
    pub vertices: [usize; 2],
    pub plus: usize,
    pub minus: usize,
}

/// Lineage of a refined mesh back to the mesh it was refined from.
#[derive(Debug, Clone, PartialEq)]
pub struct Lineage {
    pub parent_cells_per_side: usize,
    pub parent_of: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TriMesh {
    cells_per_side: usize,
    vertices: Vec<Point>,
    elements: Vec<[usize; 3]>,
    boundary: Vec<bool>,
    faces: Vec<Face>,
    vertex_elements: Vec<Vec<usize>>,
    mesh_size: f64,
    lineage: Option<Lineage>,
}

/// Builds the structured `n x n` mesh of the unit square.
pub fn build_uniform_mesh(n: usize) -> Result<TriMesh, MeshError> {
    if n == 0 {
        return Err(MeshError::InvalidSize(n));
    }
    let np = n + 1;
    let mut vertices = Vec::with_capacity(np * np);
    let mut boundary = Vec::with_capacity(np * np);
    for j in 0..np {
        for i in 0..np {
            vertices.push([i as f64 / n as f64, j as f64 / n as f64]);
            boundary.push(i == 0 || j == 0 || i == n || j == n);
        }
    }
    let mut elements = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            let v00 = j * np + i;
            let v10 = v00 + 1;
            let v01 = v00 + np;
            let v11 = v01 + 1;
            elements.push([v00, v10, v11]);
            elements.push([v00, v11, v01]);
        }
    }
    let mut vertex_elements = vec![Vec::new(); vertices.len()];
    for (e, tri) in elements.iter().enumerate() {
        for &v in tri {
            vertex_elements[v].push(e);
        }
    }
    let mut mesh = TriMesh {
        cells_per_side: n,
        vertices,
        elements,
        boundary,
        faces: Vec::new(),
        vertex_elements,
        mesh_size: std::f64::consts::SQRT_2 / n as f64,
        lineage: None,
    };
    mesh.faces = interior_faces(&mesh)?;
    Ok(mesh)
}

/// Red refinement applied `levels` times. Vertex coordinates of the input
/// mesh are reproduced bit-for-bit and `parent_of` maps every new element to
/// the input element containing it.
pub fn refine_uniform(mesh: &TriMesh, levels: u32) -> TriMesh {
    let n = mesh.cells_per_side;
    let scale = 1usize << levels;
    let mut fine = build_uniform_mesh(n * scale).expect("refined size is positive");
    let nf = n * scale;
    let mut parent_of = Vec::with_capacity(fine.elements.len());
    for cell in 0..nf * nf {
        let (fi, fj) = (cell % nf, cell / nf);
        let (ci, cj) = (fi / scale, fj / scale);
        let (a, b) = (fi % scale, fj % scale);
        let coarse_cell = cj * n + ci;
        // lower fine triangle lies in the lower coarse triangle iff a >= b,
        // upper fine triangle iff a > b
        parent_of.push(2 * coarse_cell + usize::from(a < b));
        parent_of.push(2 * coarse_cell + usize::from(a <= b));
    }
    fine.lineage = Some(Lineage {
        parent_cells_per_side: n,
        parent_of,
    });
    fine
}

impl TriMesh {
    pub fn cells_per_side(&self) -> usize {
        self.cells_per_side
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn elements(&self) -> &[[usize; 3]] {
        &self.elements
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn is_boundary(&self, v: usize) -> bool {
        self.boundary[v]
    }

    pub fn boundary_flags(&self) -> &[bool] {
        &self.boundary
    }

    /// Interior faces, sorted by `(plus, minus)`.
    pub fn faces(&self) -> &[Face] {
        &self.faces
    }

    /// Elements containing vertex `v`, ascending.
    pub fn vertex_elements(&self, v: usize) -> &[usize] {
        &self.vertex_elements[v]
    }

    /// Maximal element diameter `H`.
    pub fn mesh_size(&self) -> f64 {
        self.mesh_size
    }

    pub fn lineage(&self) -> Option<&Lineage> {
        self.lineage.as_ref()
    }

    pub fn parent_of(&self) -> Option<&[usize]> {
        self.lineage.as_ref().map(|l| l.parent_of.as_slice())
    }

    pub fn check_element(&self, id: usize) -> Result<(), MeshError> {
        if id < self.elements.len() {
            Ok(())
        } else {
            Err(MeshError::InvalidElement {
                id,
                count: self.elements.len(),
            })
        }
    }

    pub fn coords(&self, e: usize) -> [Point; 3] {
        let [a, b, c] = self.elements[e];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn signed_area(&self, e: usize) -> f64 {
        let [p0, p1, p2] = self.coords(e);
        0.5 * ((p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]))
    }

    pub fn area(&self, e: usize) -> f64 {
        self.signed_area(e).abs()
    }

    pub fn barycenter(&self, e: usize) -> Point {
        let [p0, p1, p2] = self.coords(e);
        [
            (p0[0] + p1[0] + p2[0]) / 3.0,
            (p0[1] + p1[1] + p2[1]) / 3.0,
        ]
    }

    /// Constant gradients of the three barycentric coordinates on element `e`.
    pub fn gradients(&self, e: usize) -> [[f64; 2]; 3] {
        p1_gradients(self.coords(e))
    }

    /// Barycentric coordinates of `x` with respect to element `e`.
    pub fn barycentric(&self, e: usize, x: Point) -> [f64; 3] {
        let [p0, p1, p2] = self.coords(e);
        let twice = 2.0 * self.signed_area(e);
        let l1 = ((x[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (x[1] - p0[1])) / twice;
        let l2 = ((p1[0] - p0[0]) * (x[1] - p0[1]) - (x[0] - p0[0]) * (p1[1] - p0[1])) / twice;
        [1.0 - l1 - l2, l1, l2]
    }

    /// Element containing `x` (ties resolved towards the lower-left cell).
    pub fn locate(&self, x: Point) -> usize {
        let n = self.cells_per_side;
        let fx = (x[0] * n as f64).clamp(0.0, n as f64);
        let fy = (x[1] * n as f64).clamp(0.0, n as f64);
        let i = (fx.floor() as usize).min(n - 1);
        let j = (fy.floor() as usize).min(n - 1);
        let cell = j * n + i;
        if fx - i as f64 >= fy - j as f64 {
            2 * cell
        } else {
            2 * cell + 1
        }
    }
}

/// Gradients of the barycentric coordinates of a counterclockwise triangle.
pub fn p1_gradients(p: [Point; 3]) -> [[f64; 2]; 3] {
    let [p0, p1, p2] = p;
    let twice = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]);
    [
        [(p1[1] - p2[1]) / twice, (p2[0] - p1[0]) / twice],
        [(p2[1] - p0[1]) / twice, (p0[0] - p2[0]) / twice],
        [(p0[1] - p1[1]) / twice, (p1[0] - p0[0]) / twice],
    ]
}

/// Edge census: every edge shared by exactly two elements, ordered by
/// ascending element ids. Edges with more than two neighbours are rejected.
pub fn interior_faces(mesh: &TriMesh) -> Result<Vec<Face>, MeshError> {
    let mut edges: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    for (e, tri) in mesh.elements.iter().enumerate() {
        for k in 0..3 {
            let (a, b) = (tri[k], tri[(k + 1) % 3]);
            edges.entry((a.min(b), a.max(b))).or_default().push(e);
        }
    }
    let mut faces = Vec::new();
    for ((a, b), elems) in edges {
        match elems.len() {
            1 => {}
            2 => faces.push(Face {
                vertices: [a, b],
                plus: elems[0].min(elems[1]),
                minus: elems[0].max(elems[1]),
            }),
            k => return Err(MeshError::NonConforming(a, b, k)),
        }
    }
    faces.sort_by_key(|f| (f.plus, f.minus));
    Ok(faces)
}

/// Identification of opposite boundary vertices on a structured mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicMap {
    /// Representative vertex (lowest id in its class) for every vertex.
    pub vertex_class: Vec<usize>,
    pub mean_constraint: bool,
}

impl PeriodicMap {
    pub fn num_classes(&self) -> usize {
        self.vertex_class
            .iter()
            .enumerate()
            .filter(|(v, &r)| *v == r)
            .count()
    }
}

pub fn periodic_identify(mesh: &TriMesh) -> Result<PeriodicMap, MeshError> {
    let n = mesh.cells_per_side as f64;
    let key = |p: Point| ((p[0] * n).round() as i64, (p[1] * n).round() as i64);
    let mut lookup = HashMap::with_capacity(mesh.vertices.len());
    for (v, &p) in mesh.vertices.iter().enumerate() {
        lookup.insert(key(p), v);
    }
    let nn = mesh.cells_per_side as i64;
    let mut vertex_class = Vec::with_capacity(mesh.vertices.len());
    for (v, &p) in mesh.vertices.iter().enumerate() {
        let (i, j) = key(p);
        let (ri, rj) = (i % nn, j % nn);
        let rep = *lookup.get(&(ri, rj)).ok_or(MeshError::MissingPartner(v))?;
        let q = mesh.vertices[rep];
        let shift = [(i - ri) as f64 / n, (j - rj) as f64 / n];
        let matches = (0..2).all(|k| (q[k] - (p[k] - shift[k])).abs() <= 1e-12);
        if !matches {
            return Err(MeshError::MissingPartner(v));
        }
        vertex_class.push(rep);
    }
    Ok(PeriodicMap {
        vertex_class,
        mean_constraint: true,
    })
}

/// An element patch `N^m(T)` as a sorted list of element ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Patch {
    pub center_element: usize,
    pub order: usize,
    pub elements: Vec<usize>,
    /// Fine dofs whose basis support lies inside the patch; filled in when the
    /// patch is paired with a fine space.
    pub interior_fine_dofs: Option<Vec<usize>>,
}

impl Patch {
    pub fn contains(&self, e: usize) -> bool {
        self.elements.binary_search(&e).is_ok()
    }
}

/// Vertex-to-element incidence up to a vertex identification. With the
/// identity classes this is plain mesh adjacency; with periodic classes
/// patches wrap around the torus.
#[derive(Debug, Clone)]
pub struct Adjacency {
    class_of: Vec<usize>,
    class_elements: Vec<Vec<usize>>,
}

impl Adjacency {
    pub fn new(mesh: &TriMesh) -> Self {
        Self::with_classes(mesh, (0..mesh.num_vertices()).collect())
    }

    pub fn periodic(mesh: &TriMesh, map: &PeriodicMap) -> Self {
        Self::with_classes(mesh, map.vertex_class.clone())
    }

    fn with_classes(mesh: &TriMesh, class_of: Vec<usize>) -> Self {
        let mut class_elements = vec![Vec::new(); mesh.num_vertices()];
        for (e, tri) in mesh.elements.iter().enumerate() {
            for &v in tri {
                let list: &mut Vec<usize> = &mut class_elements[class_of[v]];
                if list.last() != Some(&e) {
                    list.push(e);
                }
            }
        }
        Self {
            class_of,
            class_elements,
        }
    }

    /// Elements touching the (identified) vertex `v`.
    pub fn elements_at(&self, v: usize) -> &[usize] {
        &self.class_elements[self.class_of[v]]
    }

    /// One round of growth: all elements sharing a vertex with `set`.
    pub fn grow(&self, mesh: &TriMesh, set: &BTreeSet<usize>) -> BTreeSet<usize> {
        let mut out = set.clone();
        for &e in set {
            for &v in &mesh.elements[e] {
                out.extend(self.elements_at(v).iter().copied());
            }
        }
        out
    }

    pub fn patch(&self, mesh: &TriMesh, element: usize, m: usize) -> Result<Patch, MeshError> {
        mesh.check_element(element)?;
        let mut set = BTreeSet::from([element]);
        for _ in 0..m {
            let next = self.grow(mesh, &set);
            if next.len() == set.len() {
                break;
            }
            set = next;
        }
        Ok(Patch {
            center_element: element,
            order: m,
            elements: set.into_iter().collect(),
            interior_fine_dofs: None,
        })
    }

    /// Smallest `m` with `N^m(T)` equal to the whole mesh.
    pub fn saturation_order(&self, mesh: &TriMesh, element: usize) -> usize {
        let mut set = BTreeSet::from([element]);
        let mut m = 0;
        while set.len() < mesh.num_elements() {
            set = self.grow(mesh, &set);
            m += 1;
        }
        m
    }
}

/// `N^m(T)` on the plain (non-periodic) mesh.
pub fn element_patch(mesh: &TriMesh, element: usize, m: usize) -> Result<Patch, MeshError> {
    Adjacency::new(mesh).patch(mesh, element, m)
}
