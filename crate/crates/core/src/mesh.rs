//! Triangle meshes, grid cloth construction and per-face areas.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpringClass {
    Structural,
    Shear,
    Bend,
}

impl SpringClass {
    pub const ALL: [SpringClass; 3] = [SpringClass::Structural, SpringClass::Shear, SpringClass::Bend];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RestEdge<T> {
    pub i: usize,
    pub j: usize,
    pub rest_length: T,
    pub class: SpringClass,
}

/// Grid dimensions of a mesh built by [`build_grid_cloth`]. Vertex `(i, j)` has index `j * nx + i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridShape {
    pub nx: usize,
    pub ny: usize,
}

impl GridShape {
    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TriMesh<T> {
    /// Rest positions.
    pub vertices: Vec<Vec3<T>>,
    pub faces: Vec<[usize; 3]>,
    pub rest_edges: Vec<RestEdge<T>>,
    pub grid: Option<GridShape>,
}

impl<T: Real> TriMesh<T> {
    pub fn new(
        vertices: Vec<Vec3<T>>,
        faces: Vec<[usize; 3]>,
        rest_edges: Vec<RestEdge<T>>,
    ) -> Result<Self> {
        let mesh = TriMesh {
            vertices,
            faces,
            rest_edges,
            grid: None,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        for (fi, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&v| v >= n) {
                return Err(Error::invalid(
                    format!("faces[{fi}]"),
                    format!("vertex index out of range (vertex count {n})"),
                ));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::invalid(format!("faces[{fi}]"), "repeated vertex index"));
            }
        }
        for (ei, e) in self.rest_edges.iter().enumerate() {
            if e.i >= n || e.j >= n || e.i == e.j {
                return Err(Error::invalid(format!("rest_edges[{ei}]"), "bad endpoint indices"));
            }
            if !(e.rest_length > T::zero()) {
                return Err(Error::invalid(format!("rest_edges[{ei}]"), "rest length must be positive"));
            }
        }
        let mut springs: std::collections::HashSet<(usize, usize)> =
            std::collections::HashSet::with_capacity(self.rest_edges.len());
        for e in &self.rest_edges {
            springs.insert((e.i.min(e.j), e.i.max(e.j)));
        }
        for (fi, f) in self.faces.iter().enumerate() {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                if !springs.contains(&(a.min(b), a.max(b))) {
                    return Err(Error::invalid(
                        format!("faces[{fi}]"),
                        format!("edge ({a}, {b}) has no spring"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Face centroids at the given positions.
    pub fn centroids(&self, positions: &[Vec3<T>]) -> Vec<Vec3<T>> {
        let third = T::one() / T::lit(3.0);
        self.faces
            .iter()
            .map(|f| (positions[f[0]] + positions[f[1]] + positions[f[2]]) * third)
            .collect()
    }

    pub fn rest_diagonal(&self) -> T {
        let mut lo = Vec3([T::infinity(); 3]);
        let mut hi = Vec3([T::neg_infinity(); 3]);
        for p in &self.vertices {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (hi - lo).norm()
    }
}

/// Placement of a grid cloth: center point, plane normal and an in-plane rotation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridPlacement<T> {
    pub center: Vec3<T>,
    pub normal: Vec3<T>,
    /// Rotation of the grid axes about `normal`, radians.
    pub rotation: T,
}

impl<T: Real> GridPlacement<T> {
    pub fn flat(center: Vec3<T>) -> Self {
        GridPlacement {
            center,
            normal: Vec3::new(T::zero(), T::zero(), T::one()),
            rotation: T::zero(),
        }
    }

    /// In-plane unit axes `(u, v)` with `u × v = normal`.
    pub fn axes(&self) -> Result<(Vec3<T>, Vec3<T>)> {
        let n = self
            .normal
            .normalized()
            .ok_or_else(|| Error::invalid("normal", "zero vector"))?;
        // project world x (or y, when the normal is close to x) into the plane
        let x = Vec3::new(T::one(), T::zero(), T::zero());
        let y = Vec3::new(T::zero(), T::one(), T::zero());
        let r = if n.dot(x).abs() < T::lit(0.9) { x } else { y };
        let u0 = (r - n * n.dot(r)).normalized().expect("reference axis not parallel to normal");
        let v0 = n.cross(u0);
        let (s, c) = self.rotation.sin_cos();
        let u = u0 * c + v0 * s;
        let v = v0 * c - u0 * s;
        Ok((u, v))
    }
}

/// Regular `nx × ny` grid cloth with structural, shear and bending springs.
///
/// Each cell `(i, j)..(i+1, j+1)` is split along its `(i+1, j)–(i, j+1)` diagonal.
/// Structural springs follow grid edges, shear springs both cell diagonals, bending
/// springs connect vertices two apart along either grid axis. Rest lengths are the
/// initial distances.
pub fn build_grid_cloth<T: Real>(
    nx: usize,
    ny: usize,
    spacing: T,
    placement: &GridPlacement<T>,
) -> Result<TriMesh<T>> {
    if nx < 2 || ny < 2 {
        return Err(Error::invalid("grid", format!("need nx, ny >= 2, got {nx} x {ny}")));
    }
    if !(spacing > T::zero()) || !spacing.is_finite() {
        return Err(Error::invalid("spacing", "must be positive"));
    }
    let (u, v) = placement.axes()?;
    let grid = GridShape { nx, ny };
    let half_x = T::lit((nx - 1) as f64) * T::lit(0.5);
    let half_y = T::lit((ny - 1) as f64) * T::lit(0.5);
    let mut vertices = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let a = (T::lit(i as f64) - half_x) * spacing;
            let b = (T::lit(j as f64) - half_y) * spacing;
            vertices.push(placement.center + u * a + v * b);
        }
    }

    let mut faces = Vec::with_capacity(2 * (nx - 1) * (ny - 1));
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            let a = grid.index(i, j);
            let b = grid.index(i + 1, j);
            let c = grid.index(i, j + 1);
            let d = grid.index(i + 1, j + 1);
            faces.push([a, b, c]);
            faces.push([b, d, c]);
        }
    }

    let mut pairs: Vec<(usize, usize, SpringClass)> = Vec::new();
    for j in 0..ny {
        for i in 0..nx - 1 {
            pairs.push((grid.index(i, j), grid.index(i + 1, j), SpringClass::Structural));
        }
    }
    for j in 0..ny - 1 {
        for i in 0..nx {
            pairs.push((grid.index(i, j), grid.index(i, j + 1), SpringClass::Structural));
        }
    }
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            pairs.push((grid.index(i, j), grid.index(i + 1, j + 1), SpringClass::Shear));
            pairs.push((grid.index(i + 1, j), grid.index(i, j + 1), SpringClass::Shear));
        }
    }
    for j in 0..ny {
        for i in 0..nx.saturating_sub(2) {
            pairs.push((grid.index(i, j), grid.index(i + 2, j), SpringClass::Bend));
        }
    }
    for j in 0..ny.saturating_sub(2) {
        for i in 0..nx {
            pairs.push((grid.index(i, j), grid.index(i, j + 2), SpringClass::Bend));
        }
    }
    let rest_edges = pairs
        .into_iter()
        .map(|(i, j, class)| RestEdge {
            i,
            j,
            rest_length: (vertices[j] - vertices[i]).norm(),
            class,
        })
        .collect();

    let mut mesh = TriMesh::new(vertices, faces, rest_edges)?;
    mesh.grid = Some(grid);
    Ok(mesh)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaceGeometry<T> {
    pub face_index: usize,
    pub area: T,
    /// Sum of the areas of faces `0..=face_index`.
    pub cumulative_area: T,
}

#[inline]
pub fn triangle_area<T: Real>(p1: Vec3<T>, p2: Vec3<T>, p3: Vec3<T>) -> T {
    (p2 - p1).cross(p3 - p1).norm() * T::lit(0.5)
}

pub fn face_areas<T: Real>(mesh: &TriMesh<T>, positions: &[Vec3<T>]) -> Vec<FaceGeometry<T>> {
    assert_eq!(positions.len(), mesh.vertex_count(), "positions do not match mesh");
    let mut acc = T::zero();
    mesh.faces
        .iter()
        .enumerate()
        .map(|(face_index, f)| {
            let area = triangle_area(positions[f[0]], positions[f[1]], positions[f[2]]);
            acc += area;
            FaceGeometry {
                face_index,
                area,
                cumulative_area: acc,
            }
        })
        .collect()
}
