//! Area-weighted surface sampling with barycentric provenance, occlusion masks and
//! sensor-style augmentation.
//!
//! A sampled point is `x = u p1 + v p2 + w p3` for its face `(p1, p2, p3)`, so
//! `dx/dp1 = u I`, `dx/dp2 = v I`, `dx/dp3 = w I`. The face choice and the
//! coefficients are held fixed when differentiating.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::mesh::{triangle_area, TriMesh};
use crate::real::Real;

/// Mixes a base seed with a sequence of integers (splitmix64 finaliser, order-sensitive).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts
        .iter()
        .fold(mix(base), |acc, &p| mix(acc.rotate_left(17) ^ mix(p)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleCoords<T> {
    pub face_index: usize,
    pub u: T,
    pub v: T,
    pub w: T,
}

impl<T: Real> SampleCoords<T> {
    /// Coefficients from two uniform draws in `[0, 1)`, uniform over the triangle.
    pub fn from_uniform(face_index: usize, r1: T, r2: T) -> Self {
        let s = r1.sqrt();
        SampleCoords {
            face_index,
            u: T::one() - s,
            v: s * (T::one() - r2),
            w: s * r2,
        }
    }

    #[inline]
    pub fn point(&self, mesh: &TriMesh<T>, positions: &[Vec3<T>]) -> Vec3<T> {
        let [a, b, c] = mesh.faces[self.face_index];
        positions[a] * self.u + positions[b] * self.v + positions[c] * self.w
    }
}

/// `(dx/dp1, dx/dp2, dx/dp3)` as scalars multiplying the identity.
#[inline]
pub fn point_vertex_jacobian<T: Real>(coords: &SampleCoords<T>) -> [T; 3] {
    [coords.u, coords.v, coords.w]
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampledCloud<T> {
    pub points: Vec<Vec3<T>>,
    /// Absent for clouds that were loaded from disk or augmented.
    pub provenance: Option<Vec<SampleCoords<T>>>,
}

impl<T: Real> SampledCloud<T> {
    pub fn from_points(points: Vec<Vec3<T>>) -> Self {
        SampledCloud {
            points,
            provenance: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Same faces and coefficients, evaluated at new vertex positions.
    pub fn reposition(&self, mesh: &TriMesh<T>, positions: &[Vec3<T>]) -> Result<Self> {
        let prov = self.provenance.as_ref().ok_or(Error::MissingProvenance)?;
        Ok(SampledCloud {
            points: prov.iter().map(|c| c.point(mesh, positions)).collect(),
            provenance: Some(prov.clone()),
        })
    }
}

/// Draws `n` points with faces chosen proportionally to their current area.
///
/// `face_mask` restricts the eligible faces; zero-area faces are never chosen.
pub fn sample_surface<T: Real>(
    mesh: &TriMesh<T>,
    positions: &[Vec3<T>],
    n: usize,
    face_mask: Option<&[usize]>,
    rng_seed: u64,
) -> Result<SampledCloud<T>> {
    if n == 0 {
        return Err(Error::invalid("sample count", "must be at least 1"));
    }
    if positions.len() != mesh.vertex_count() {
        return Err(Error::invalid("positions", "length does not match mesh"));
    }
    let all: Vec<usize>;
    let eligible = match face_mask {
        Some([]) => return Err(Error::invalid("face mask", "empty")),
        Some(m) => {
            if let Some(&bad) = m.iter().find(|&&f| f >= mesh.faces.len()) {
                return Err(Error::invalid("face mask", format!("face {bad} out of range")));
            }
            m
        }
        None => {
            all = (0..mesh.faces.len()).collect();
            &all
        }
    };
    let mut cumulative = Vec::with_capacity(eligible.len());
    let mut total = T::zero();
    for &f in eligible {
        let [a, b, c] = mesh.faces[f];
        total += triangle_area(positions[a], positions[b], positions[c]);
        cumulative.push(total);
    }
    if !(total > T::zero()) {
        return Err(Error::DegenerateSurface);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut points = Vec::with_capacity(n);
    let mut provenance = Vec::with_capacity(n);
    for _ in 0..n {
        let r = T::lit(rng.random::<f64>()) * total;
        let k = cumulative.partition_point(|&c| c <= r).min(eligible.len() - 1);
        let coords = SampleCoords::from_uniform(eligible[k], T::lit(rng.random::<f64>()), T::lit(rng.random::<f64>()));
        points.push(coords.point(mesh, positions));
        provenance.push(coords);
    }
    Ok(SampledCloud {
        points,
        provenance: Some(provenance),
    })
}

/// Adds each point gradient to its face's vertices, weighted by the barycentric coefficients.
pub fn scatter_point_gradients<T: Real>(
    cloud: &SampledCloud<T>,
    point_grads: &[Vec3<T>],
    mesh: &TriMesh<T>,
) -> Result<Vec<Vec3<T>>> {
    let prov = cloud.provenance.as_ref().ok_or(Error::MissingProvenance)?;
    if point_grads.len() != prov.len() {
        return Err(Error::invalid(
            "point gradients",
            format!("{} gradients for {} points", point_grads.len(), prov.len()),
        ));
    }
    let mut out = vec![Vec3::zero(); mesh.vertex_count()];
    for (c, g) in prov.iter().zip(point_grads) {
        let [a, b, d] = mesh.faces[c.face_index];
        let [ju, jv, jw] = point_vertex_jacobian(c);
        out[a] += *g * ju;
        out[b] += *g * jv;
        out[d] += *g * jw;
    }
    Ok(out)
}

/// I.i.d. zero-mean Gaussian offsets on every coordinate. Drops provenance.
pub fn add_gaussian_noise<T: Real>(cloud: &SampledCloud<T>, sigma: T, rng_seed: u64) -> Result<SampledCloud<T>> {
    if !(sigma >= T::zero()) || !sigma.is_finite() {
        return Err(Error::invalid("noise sigma", "must be non-negative"));
    }
    if sigma == T::zero() {
        return Ok(SampledCloud::from_points(cloud.points.clone()));
    }
    let normal = Normal::new(0.0, sigma.as_f64()).map_err(|e| Error::invalid("noise sigma", e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let points = cloud
        .points
        .iter()
        .map(|p| {
            let mut q = *p;
            for a in 0..3 {
                q[a] += T::lit(normal.sample(&mut rng));
            }
            q
        })
        .collect();
    Ok(SampledCloud::from_points(points))
}

/// Which faces a simulated sensor sees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OcclusionRule {
    All,
    /// Faces whose rest centroid lies above the middle of the rest bounding box along `axis`.
    UpperHalf { axis: usize },
    Explicit { faces: Vec<usize> },
    /// Drops `round(fraction * face_count)` faces chosen by `seed`.
    RandomDrop { fraction: f64, seed: u64 },
}

/// Deterministic face subset (sorted) for a rule.
pub fn occlusion_subset<T: Real>(mesh: &TriMesh<T>, rule: &OcclusionRule) -> Result<Vec<usize>> {
    let nf = mesh.faces.len();
    let faces: Vec<usize> = match rule {
        OcclusionRule::All => (0..nf).collect(),
        OcclusionRule::UpperHalf { axis } => {
            if *axis > 2 {
                return Err(Error::invalid("occlusion axis", "must be 0, 1 or 2"));
            }
            let (lo, hi) = mesh
                .vertices
                .iter()
                .fold((T::infinity(), T::neg_infinity()), |(lo, hi), p| (lo.min(p[*axis]), hi.max(p[*axis])));
            let mid = (lo + hi) * T::lit(0.5);
            mesh.centroids(&mesh.vertices)
                .iter()
                .enumerate()
                .filter(|(_, c)| c[*axis] > mid)
                .map(|(i, _)| i)
                .collect()
        }
        OcclusionRule::Explicit { faces } => {
            if let Some(bad) = faces.iter().find(|&&f| f >= nf) {
                return Err(Error::invalid("occlusion faces", format!("face {bad} out of range")));
            }
            let mut f = faces.clone();
            f.sort_unstable();
            f.dedup();
            f
        }
        OcclusionRule::RandomDrop { fraction, seed } => {
            if !(0.0..=1.0).contains(fraction) {
                return Err(Error::invalid("dropout fraction", "must lie in [0, 1]"));
            }
            let mut idx: Vec<usize> = (0..nf).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(*seed));
            let keep = nf - (fraction * nf as f64).round() as usize;
            idx.truncate(keep);
            idx.sort_unstable();
            idx
        }
    };
    if faces.is_empty() {
        return Err(Error::invalid("occlusion rule", "selects no faces"));
    }
    Ok(faces)
}

/// Uniform points on the lateral surface of a cylinder.
pub fn sample_cylinder_surface<T: Real>(
    center: Vec3<T>,
    axis: Vec3<T>,
    radius: T,
    half_length: T,
    n: usize,
    rng_seed: u64,
) -> Vec<Vec3<T>> {
    let helper = if axis.x().abs() < T::lit(0.9) {
        Vec3::new(T::one(), T::zero(), T::zero())
    } else {
        Vec3::new(T::zero(), T::one(), T::zero())
    };
    let e1 = (helper - axis * axis.dot(helper)).normalized().expect("axis is unit length");
    let e2 = axis.cross(e1);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    (0..n)
        .map(|_| {
            let h = T::lit(rng.random_range(-1.0..1.0)) * half_length;
            let (s, c) = T::lit(rng.random_range(0.0..std::f64::consts::TAU)).sin_cos();
            center + axis * h + (e1 * c + e2 * s) * radius
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_grid_cloth, GridPlacement};

    fn grid(n: usize) -> TriMesh<f64> {
        build_grid_cloth(n, n, 0.05, &GridPlacement::flat(Vec3::zero())).unwrap()
    }

    #[test]
    fn vertex_and_centroid_coefficients() {
        let m = grid(2);
        let c = SampleCoords { face_index: 0, u: 1.0, v: 0.0, w: 0.0 };
        assert_eq!(c.point(&m, &m.vertices), m.vertices[m.faces[0][0]]);
        let third = 1.0 / 3.0;
        let c = SampleCoords { face_index: 1, u: third, v: third, w: third };
        let f = m.faces[1];
        let centroid = (m.vertices[f[0]] + m.vertices[f[1]] + m.vertices[f[2]]) * third;
        assert!((c.point(&m, &m.vertices) - centroid).norm() < 1e-15);
    }

    #[test]
    fn jacobian_is_the_coefficients() {
        let c = SampleCoords { face_index: 0, u: 1.0, v: 0.0, w: 0.0 };
        assert_eq!(point_vertex_jacobian(&c), [1.0, 0.0, 0.0]);
        let c = SampleCoords { face_index: 3, u: 0.2, v: 0.3, w: 0.5 };
        assert_eq!(point_vertex_jacobian(&c), [0.2, 0.3, 0.5]);
    }

    #[test]
    fn perturbing_first_vertex_moves_point_by_u_delta() {
        let m = grid(3);
        let c = SampleCoords { face_index: 5, u: 0.2, v: 0.3, w: 0.5 };
        let base = c.point(&m, &m.vertices);
        let delta = Vec3::new(1e-4, -2e-4, 3e-4);
        let mut moved = m.vertices.clone();
        moved[m.faces[5][0]] += delta;
        let diff = c.point(&m, &moved) - base;
        assert!((diff - delta * 0.2).norm() < 1e-15);
    }

    #[test]
    fn coefficients_are_a_partition_of_unity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let c = SampleCoords::from_uniform(0, rng.random::<f64>(), rng.random::<f64>());
            assert!(c.u >= 0.0 && c.v >= 0.0 && c.w >= 0.0);
            assert!((c.u + c.v + c.w - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_errors() {
        let m = grid(3);
        assert!(sample_surface(&m, &m.vertices, 0, None, 1).is_err());
        assert!(sample_surface(&m, &m.vertices, 5, Some(&[]), 1).is_err());
        let collapsed = vec![Vec3::new(0.1, 0.1, 0.1); m.vertex_count()];
        assert!(matches!(
            sample_surface(&m, &collapsed, 5, None, 1),
            Err(Error::DegenerateSurface)
        ));
    }

    #[test]
    fn zero_area_faces_are_never_drawn() {
        let m = grid(3);
        let mut pos = m.vertices.clone();
        // collapse face 0 onto a point by moving its vertices together... only vertex 0 is private
        // to faces of cell (0,0); squash cell (0,0) instead by moving vertex 0 onto vertex 1
        pos[0] = pos[1];
        let cloud = sample_surface(&m, &pos, 2000, None, 9).unwrap();
        assert!(cloud.provenance.unwrap().iter().all(|c| c.face_index != 0));
    }

    #[test]
    fn sampling_is_reproducible_and_respects_mask() {
        let m = grid(4);
        let mask = vec![1, 4, 7];
        let a = sample_surface(&m, &m.vertices, 500, Some(&mask), 42).unwrap();
        let b = sample_surface(&m, &m.vertices, 500, Some(&mask), 42).unwrap();
        assert_eq!(a, b);
        assert!(a.provenance.as_ref().unwrap().iter().all(|c| mask.contains(&c.face_index)));
    }

    #[test]
    fn scatter_examples() {
        let m = grid(3);
        let cloud = sample_surface(&m, &m.vertices, 50, None, 1).unwrap();
        let zero = vec![Vec3::zero(); 50];
        assert!(scatter_point_gradients(&cloud, &zero, &m).unwrap().iter().all(|g| *g == Vec3::zero()));

        let c = SampleCoords { face_index: 2, u: 0.2, v: 0.3, w: 0.5 };
        let one = SampledCloud { points: vec![c.point(&m, &m.vertices)], provenance: Some(vec![c]) };
        let g = Vec3::new(1.0, -2.0, 0.5);
        let out = scatter_point_gradients(&one, &[g], &m).unwrap();
        let [a, b, d] = m.faces[2];
        assert_eq!((out[a], out[b], out[d]), (g * 0.2, g * 0.3, g * 0.5));

        let bare = SampledCloud::from_points(vec![Vec3::zero()]);
        assert!(matches!(scatter_point_gradients(&bare, &[g], &m), Err(Error::MissingProvenance)));
    }

    #[test]
    fn noise_examples() {
        let m = grid(3);
        let cloud = sample_surface(&m, &m.vertices, 100, None, 1).unwrap();
        let same = add_gaussian_noise(&cloud, 0.0, 5).unwrap();
        assert_eq!(same.points, cloud.points);
        assert!(same.provenance.is_none());
        let a = add_gaussian_noise(&cloud, 0.01, 5).unwrap();
        let b = add_gaussian_noise(&cloud, 0.01, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noise_standard_deviation() {
        let n = 100_000;
        let cloud = SampledCloud::from_points(vec![Vec3::<f64>::zero(); n]);
        let noisy = add_gaussian_noise(&cloud, 0.01, 77).unwrap();
        for a in 0..3 {
            let mean: f64 = noisy.points.iter().map(|p| p[a]).sum::<f64>() / n as f64;
            let var: f64 = noisy.points.iter().map(|p| (p[a] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!((var.sqrt() - 0.01).abs() < 0.02 * 0.01, "axis {a}: std {}", var.sqrt());
        }
    }

    #[test]
    fn occlusion_rules() {
        let m = grid(7);
        assert_eq!(occlusion_subset(&m, &OcclusionRule::All).unwrap().len(), 72);
        let upper = occlusion_subset(&m, &OcclusionRule::UpperHalf { axis: 1 }).unwrap();
        assert_eq!(upper.len(), 36);
        let cents = m.centroids(&m.vertices);
        assert!(upper.iter().all(|&f| cents[f].y() > 0.0));
        let r = OcclusionRule::RandomDrop { fraction: 0.5, seed: 3 };
        let a = occlusion_subset(&m, &r).unwrap();
        assert_eq!(a, occlusion_subset(&m, &r).unwrap());
        assert_eq!(a.len(), 36);
        assert!(occlusion_subset(&m, &OcclusionRule::RandomDrop { fraction: 1.0, seed: 3 }).is_err());
        assert!(occlusion_subset(&m, &OcclusionRule::Explicit { faces: vec![] }).is_err());
        assert_eq!(
            occlusion_subset(&m, &OcclusionRule::Explicit { faces: vec![5, 2, 5] }).unwrap(),
            vec![2, 5]
        );
    }

    #[test]
    fn upper_half_of_diamond_grid() {
        // enumerate rest centroids of the 45-degree rotated grid by hand: grid indices with
        // centroid i + j above 6 (the anti-diagonal through the side corners)
        let p = GridPlacement { center: Vec3::zero(), normal: Vec3::new(0.0, 0.0, 1.0), rotation: std::f64::consts::FRAC_PI_4 };
        let m = build_grid_cloth(7, 7, 0.05, &p).unwrap();
        let upper = occlusion_subset(&m, &OcclusionRule::UpperHalf { axis: 1 }).unwrap();
        let mut expected = Vec::new();
        for (fi, f) in m.faces.iter().enumerate() {
            let s: usize = f.iter().map(|&v| v % 7 + v / 7).sum();
            if s > 18 {
                expected.push(fi);
            }
        }
        assert_eq!(upper, expected);
        assert_eq!(upper.len(), 36);
    }

    #[test]
    fn cylinder_points_lie_on_surface() {
        let axis = Vec3::<f64>::new(0.0, 0.0, 1.0);
        let c = Vec3::new(0.1, 0.2, 0.3);
        for p in sample_cylinder_surface(c, axis, 0.02, 0.3, 200, 4) {
            let rel = p - c;
            let h = rel.dot(axis);
            assert!(h.abs() <= 0.3);
            assert!(((rel - axis * h).norm() - 0.02).abs() < 1e-12);
        }
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, &[1, 0]), derive_seed(1, &[0, 1]));
        assert_ne!(derive_seed(1, &[2]), derive_seed(2, &[1]));
        assert_eq!(derive_seed(7, &[3, 4]), derive_seed(7, &[3, 4]));
    }
}
