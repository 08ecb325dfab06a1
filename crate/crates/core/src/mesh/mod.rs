//! Tetrahedral meshes: storage, validation, topology and geometric queries.

mod io;
mod support;

pub use io::{load_mesh, parse_medit, parse_tet, save_tet, write_medit, write_obj, write_tet, MeshFormat};
pub use support::{convex_hull, polygon_area, polygon_centroid, support_polygon, SupportPolygon};

use std::collections::BTreeMap;

use nalgebra::{DVector, Matrix3, Vector3};

use crate::error::{Error, Result};

/// Smallest admissible element volume (m³).
pub const DEFAULT_MIN_VOLUME: f64 = 1e-12;

/// Vertex positions plus tetrahedral connectivity.
#[derive(Debug, Clone, PartialEq)]
pub struct TetMesh {
    positions: Vec<Vector3<f64>>,
    elements: Vec<[usize; 4]>,
}

impl TetMesh {
    /// Builds a mesh, checking that every element index is in range.
    pub fn new(positions: Vec<Vector3<f64>>, elements: Vec<[usize; 4]>) -> Result<Self> {
        if positions.len() < 4 {
            return Err(Error::Invalid(format!("mesh needs at least 4 vertices, got {}", positions.len())));
        }
        if elements.is_empty() {
            return Err(Error::Invalid("mesh has no tetrahedra".into()));
        }
        let n = positions.len();
        for (t, e) in elements.iter().enumerate() {
            if let Some(&bad) = e.iter().find(|&&i| i >= n) {
                return Err(Error::Index { tet: t, index: bad, count: n });
            }
        }
        Ok(Self { positions, elements })
    }

    pub fn num_vertices(&self) -> usize {
        self.positions.len()
    }

    pub fn num_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn positions(&self) -> &[Vector3<f64>] {
        &self.positions
    }

    pub fn elements(&self) -> &[[usize; 4]] {
        &self.elements
    }

    /// Positions as a flat `3N` vector `[x0, y0, z0, x1, ...]`.
    pub fn flat_positions(&self) -> DVector<f64> {
        DVector::from_iterator(3 * self.positions.len(), self.positions.iter().flat_map(|p| p.iter().copied()))
    }

    /// Same connectivity, new positions.
    pub fn with_positions(&self, x: &DVector<f64>) -> Result<Self> {
        let n = self.positions.len();
        if x.len() != 3 * n {
            return Err(Error::DimensionMismatch { expected: 3 * n, got: x.len() });
        }
        Ok(Self {
            positions: (0..n).map(|i| vertex(x, i)).collect(),
            elements: self.elements.clone(),
        })
    }

    pub fn signed_volume(&self, tet: usize) -> f64 {
        let [a, b, c, d] = self.elements[tet];
        let p = &self.positions;
        tet_signed_volume(&p[a], &p[b], &p[c], &p[d])
    }

    pub fn element_volumes(&self) -> Vec<f64> {
        (0..self.elements.len()).map(|t| self.signed_volume(t)).collect()
    }

    pub fn bbox(&self) -> (Vector3<f64>, Vector3<f64>) {
        bbox_of(self.positions.iter())
    }

    pub fn bbox_diagonal(&self) -> f64 {
        let (lo, hi) = self.bbox();
        (hi - lo).norm()
    }

    /// Flips negatively oriented tets (swapping their last two indices) and
    /// rejects any whose volume magnitude is below `min_volume`.
    pub fn validate_and_orient(&self, min_volume: f64) -> Result<TetMesh> {
        let mut elements = self.elements.clone();
        for (t, e) in elements.iter_mut().enumerate() {
            let mut seen = *e;
            seen.sort_unstable();
            if seen.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::DegenerateElement(t));
            }
            let v = self.signed_volume(t);
            if !(v.abs() >= min_volume) {
                return Err(Error::DegenerateElement(t));
            }
            if v < 0.0 {
                e.swap(2, 3);
            }
        }
        Ok(TetMesh {
            positions: self.positions.clone(),
            elements,
        })
    }

    /// Components under vertex-sharing adjacency. Labels are the smallest
    /// vertex index in each component.
    pub fn connected_components(&self) -> (usize, Vec<usize>) {
        let n = self.positions.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        for e in &self.elements {
            for k in 1..4 {
                let a = find(&mut parent, e[0]);
                let b = find(&mut parent, e[k]);
                // keep the smaller index as root
                if a < b {
                    parent[b] = a;
                } else if b < a {
                    parent[a] = b;
                }
            }
        }
        let labels: Vec<usize> = (0..n).map(|i| find(&mut parent, i)).collect();
        let count = labels.iter().enumerate().filter(|&(i, &l)| i == l).count();
        (count, labels)
    }

    /// Faces belonging to exactly one tet, oriented outward (for positively
    /// oriented tets), in order of first appearance.
    pub fn boundary_surface(&self) -> Result<Vec<[usize; 3]>> {
        let mut count: BTreeMap<[usize; 3], usize> = BTreeMap::new();
        let mut faces = Vec::with_capacity(4 * self.elements.len());
        for e in &self.elements {
            for f in tet_faces(e) {
                *count.entry(sorted3(f)).or_default() += 1;
                faces.push(f);
            }
        }
        if let Some((key, _)) = count.iter().find(|(_, &c)| c > 2) {
            return Err(Error::NonManifoldFace(*key));
        }
        Ok(faces.into_iter().filter(|f| count[&sorted3(*f)] == 1).collect())
    }

    /// Mass-weighted mean of element centroids at the mesh's own positions.
    pub fn center_of_mass(&self, element_mass: &[f64]) -> Result<Vector3<f64>> {
        center_of_mass(self, &self.flat_positions(), element_mass)
    }

    /// Pairs of face-adjacent elements `(a, b)` with `a < b`, sorted.
    pub fn face_adjacency(&self) -> Vec<(usize, usize)> {
        let mut owners: BTreeMap<[usize; 3], Vec<usize>> = BTreeMap::new();
        for (t, e) in self.elements.iter().enumerate() {
            for f in tet_faces(e) {
                owners.entry(sorted3(f)).or_default().push(t);
            }
        }
        let mut pairs: Vec<(usize, usize)> = owners
            .values()
            .filter(|ts| ts.len() == 2)
            .map(|ts| (ts[0].min(ts[1]), ts[0].max(ts[1])))
            .collect();
        pairs.sort_unstable();
        pairs.dedup();
        pairs
    }
}

/// Outward faces of a positively oriented tet.
pub fn tet_faces(e: &[usize; 4]) -> [[usize; 3]; 4] {
    let [a, b, c, d] = *e;
    [[a, c, b], [a, b, d], [a, d, c], [b, c, d]]
}

fn sorted3(mut f: [usize; 3]) -> [usize; 3] {
    f.sort_unstable();
    f
}

pub fn tet_signed_volume(a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>, d: &Vector3<f64>) -> f64 {
    Matrix3::from_columns(&[b - a, c - a, d - a]).determinant() / 6.0
}

#[inline]
pub fn vertex(x: &DVector<f64>, i: usize) -> Vector3<f64> {
    Vector3::new(x[3 * i], x[3 * i + 1], x[3 * i + 2])
}

#[inline]
pub fn set_vertex(x: &mut DVector<f64>, i: usize, v: &Vector3<f64>) {
    x[3 * i] = v.x;
    x[3 * i + 1] = v.y;
    x[3 * i + 2] = v.z;
}

/// Applies to all of `x` the rotation and translation that best map its
/// `verts` (every vertex when empty) onto the same vertices of `target`, in
/// the least-squares sense.
pub fn rigid_align(x: &DVector<f64>, target: &DVector<f64>, verts: &[usize]) -> DVector<f64> {
    let all: Vec<usize>;
    let verts = if verts.is_empty() {
        all = (0..x.len() / 3).collect();
        &all
    } else {
        verts
    };
    if verts.is_empty() {
        return x.clone();
    }
    let k = verts.len() as f64;
    let ca = verts.iter().map(|&v| vertex(x, v)).sum::<Vector3<f64>>() / k;
    let cb = verts.iter().map(|&v| vertex(target, v)).sum::<Vector3<f64>>() / k;
    let mut h = Matrix3::zeros();
    for &v in verts {
        h += (vertex(x, v) - ca) * (vertex(target, v) - cb).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut d = Matrix3::identity();
    if (vt.transpose() * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = vt.transpose() * d * u.transpose();
    let mut out = x.clone();
    for i in 0..x.len() / 3 {
        set_vertex(&mut out, i, &(r * (vertex(x, i) - ca) + cb));
    }
    out
}

pub(crate) fn bbox_of<'a>(pts: impl Iterator<Item = &'a Vector3<f64>>) -> (Vector3<f64>, Vector3<f64>) {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in pts {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (lo, hi)
}

/// Bounding-box diagonal of a flat `3N` position vector.
pub fn flat_bbox_diagonal(x: &DVector<f64>) -> f64 {
    let pts: Vec<Vector3<f64>> = (0..x.len() / 3).map(|i| vertex(x, i)).collect();
    let (lo, hi) = bbox_of(pts.iter());
    (hi - lo).norm()
}

/// Mass-weighted average of element centroids for positions `x`.
pub fn center_of_mass(mesh: &TetMesh, x: &DVector<f64>, element_mass: &[f64]) -> Result<Vector3<f64>> {
    if element_mass.len() != mesh.num_elements() {
        return Err(Error::DimensionMismatch { expected: mesh.num_elements(), got: element_mass.len() });
    }
    let total: f64 = element_mass.iter().sum();
    if !(total > 0.0) {
        return Err(Error::ZeroMass);
    }
    let mut acc = Vector3::zeros();
    for (e, &m) in mesh.elements().iter().zip(element_mass) {
        let c = e.iter().map(|&i| vertex(x, i)).sum::<Vector3<f64>>() / 4.0;
        acc += m * c;
    }
    Ok(acc / total)
}

/// Structured box mesh of `cells[0] × cells[1] × cells[2]` cubes, each split
/// into five tets with alternating parity so neighboring cells conform.
/// Elements are positively oriented.
pub fn box_mesh(cells: [usize; 3], cell_size: Vector3<f64>, origin: Vector3<f64>) -> TetMesh {
    let [nx, ny, nz] = cells;
    let mut all = Vec::with_capacity(nx * ny * nz);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                all.push([i, j, k]);
            }
        }
    }
    voxel_mesh(&all, cell_size, origin).expect("structured box mesh is valid")
}

/// Mesh of the listed grid cells, five tets per cell, sharing vertices
/// between touching cells. Vertices are numbered in (k, j, i) lattice order.
pub fn voxel_mesh(cells: &[[usize; 3]], cell_size: Vector3<f64>, origin: Vector3<f64>) -> Result<TetMesh> {
    const EVEN: [[usize; 4]; 5] = [[0, 1, 2, 4], [3, 2, 1, 7], [5, 1, 4, 7], [6, 4, 2, 7], [1, 2, 4, 7]];
    const ODD: [[usize; 4]; 5] = [[1, 0, 3, 5], [2, 3, 0, 6], [4, 0, 5, 6], [7, 3, 5, 6], [0, 3, 5, 6]];
    let corner = |c: &[usize; 3], n: usize| [c[0] + (n & 1), c[1] + ((n >> 1) & 1), c[2] + ((n >> 2) & 1)];
    let mut lattice: BTreeMap<[usize; 3], usize> = BTreeMap::new();
    for c in cells {
        for n in 0..8 {
            let [i, j, k] = corner(c, n);
            lattice.insert([k, j, i], 0);
        }
    }
    let mut positions = Vec::with_capacity(lattice.len());
    for (idx, (&[k, j, i], slot)) in lattice.iter_mut().enumerate() {
        *slot = idx;
        positions.push(origin + Vector3::new(i as f64, j as f64, k as f64).component_mul(&cell_size));
    }
    let mut elements = Vec::with_capacity(5 * cells.len());
    for c in cells {
        let id = |n: usize| {
            let [i, j, k] = corner(c, n);
            lattice[&[k, j, i]]
        };
        let pattern = if (c[0] + c[1] + c[2]) % 2 == 0 { &EVEN } else { &ODD };
        for t in pattern {
            elements.push([id(t[0]), id(t[1]), id(t[2]), id(t[3])]);
        }
    }
    TetMesh::new(positions, elements)?.validate_and_orient(0.0)
}
