use crate::geom::{Mat3, Vec3};
use crate::mesh::TriMesh;
use crate::real::Real;

use super::{Obstacle, Shape, SimParams, SimState};

/// Springs shorter than this have no defined direction and exert no force.
const MIN_SPRING_LENGTH: f64 = 1e-9;

/// Spring and pairwise damping forces, without gravity or contact.
pub fn internal_forces<T: Real>(state: &SimState<T>, mesh: &TriMesh<T>, params: &SimParams<T>) -> Vec<Vec3<T>> {
    assert_eq!(state.positions.len(), mesh.vertex_count());
    let mut out = vec![Vec3::zero(); mesh.vertex_count()];
    add_spring_forces(mesh, params, &state.positions, &state.velocities, &mut out, None);
    out
}

/// Penalty contact forces against static obstacles.
pub fn contact_forces<T: Real>(state: &SimState<T>, obstacles: &[Obstacle<T>], params: &SimParams<T>) -> Vec<Vec3<T>> {
    let mut out = vec![Vec3::zero(); state.positions.len()];
    add_contact_forces(obstacles, params, &state.positions, &state.velocities, &mut out);
    out
}

/// Adds spring forces to `out`. When `unscaled` is given, also accumulates the Hooke
/// part computed with the base stiffness (the derivative of the force in `w_stiff`).
pub(crate) fn add_spring_forces<T: Real>(
    mesh: &TriMesh<T>,
    params: &SimParams<T>,
    x: &[Vec3<T>],
    v: &[Vec3<T>],
    out: &mut [Vec3<T>],
    mut unscaled: Option<&mut [Vec3<T>]>,
) {
    let min_len = T::lit(MIN_SPRING_LENGTH);
    for e in &mesh.rest_edges {
        let d = x[e.j] - x[e.i];
        let l = d.norm();
        if l < min_len {
            log::debug!("spring ({}, {}) has zero length; skipped", e.i, e.j);
            continue;
        }
        let n = d * (T::one() / l);
        let class = e.class.index();
        let stretch = l - e.rest_length;
        let rel_v = (v[e.j] - v[e.i]).dot(n);
        let hooke0 = n * (params.material.base_stiffness[class] * stretch);
        let f = hooke0 * params.w_stiff + n * (params.material.damping[class] * rel_v);
        out[e.i] += f;
        out[e.j] -= f;
        if let Some(u) = unscaled.as_deref_mut() {
            u[e.i] += hooke0;
            u[e.j] -= hooke0;
        }
    }
}

/// Penetration depth `phi > 0`, outward normal `n` and `dn/dx`.
struct ContactProbe<T> {
    depth: T,
    normal: Vec3<T>,
    dnormal: Mat3<T>,
}

fn probe<T: Real>(shape: &Shape<T>, p: Vec3<T>) -> Option<ContactProbe<T>> {
    match *shape {
        Shape::Plane { point, normal } => {
            let depth = (point - p).dot(normal);
            (depth > T::zero()).then(|| ContactProbe {
                depth,
                normal,
                dnormal: Mat3::zero(),
            })
        }
        Shape::Cylinder {
            center,
            axis,
            radius,
            half_length,
        } => {
            let rel = p - center;
            let h = rel.dot(axis);
            let cap_depth = half_length - h.abs();
            if cap_depth <= T::zero() {
                return None;
            }
            let radial = rel - axis * h;
            let rho = radial.norm();
            let radial_depth = radius - rho;
            if radial_depth <= T::zero() {
                return None;
            }
            if cap_depth < radial_depth || rho < T::lit(1e-12) {
                let s = if h >= T::zero() { T::one() } else { -T::one() };
                Some(ContactProbe {
                    depth: cap_depth,
                    normal: axis * s,
                    dnormal: Mat3::zero(),
                })
            } else {
                let n = radial * (T::one() / rho);
                // d(radial / |radial|)/dx = (I - a aᵀ - n nᵀ) / rho
                let dn = (Mat3::identity() - Mat3::outer(axis, axis) - Mat3::outer(n, n)).scale(T::one() / rho);
                Some(ContactProbe {
                    depth: radial_depth,
                    normal: n,
                    dnormal: dn,
                })
            }
        }
    }
}

// Contact force for depth phi, normal n, velocity v:
//   F = phi * A,  A = (kc - cd (v.n)) n - mu kc (v - (v.n) n)
fn contact_force<T: Real>(c: &ContactProbe<T>, v: Vec3<T>, kc: T, cd: T, mu: T) -> Vec3<T> {
    let vn = v.dot(c.normal);
    let vt = v - c.normal * vn;
    (c.normal * (kc - cd * vn) - vt * (mu * kc)) * c.depth
}

pub(crate) fn add_contact_forces<T: Real>(
    obstacles: &[Obstacle<T>],
    params: &SimParams<T>,
    x: &[Vec3<T>],
    v: &[Vec3<T>],
    out: &mut [Vec3<T>],
) {
    let m = &params.material;
    for o in obstacles {
        let mu = m.contact_friction_scale * o.friction;
        for (i, &p) in x.iter().enumerate() {
            if let Some(c) = probe(&o.shape, p) {
                out[i] += contact_force(&c, v[i], m.contact_stiffness, m.contact_damping, mu);
            }
        }
    }
}

pub(crate) fn add_drag_forces<T: Real>(params: &SimParams<T>, v: &[Vec3<T>], out: &mut [Vec3<T>]) {
    let c = params.material.air_drag;
    if c > T::zero() {
        for (f, v) in out.iter_mut().zip(v) {
            *f -= *v * c;
        }
    }
}

/// Vector-Jacobian product of the total non-gravity force.
///
/// `mu[i]` is the adjoint of the force on vertex `i`. Adds `(dF/dx)ᵀ mu` to `ax`,
/// `(dF/dv)ᵀ mu` to `av`, and returns `mu · dF/dw_stiff`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn force_vjp<T: Real>(
    mesh: &TriMesh<T>,
    obstacles: &[Obstacle<T>],
    params: &SimParams<T>,
    x: &[Vec3<T>],
    v: &[Vec3<T>],
    mu: &[Vec3<T>],
    ax: &mut [Vec3<T>],
    av: &mut [Vec3<T>],
) -> T {
    let min_len = T::lit(MIN_SPRING_LENGTH);
    let mut d_stiff = T::zero();
    for e in &mesh.rest_edges {
        let d = x[e.j] - x[e.i];
        let l = d.norm();
        if l < min_len {
            continue;
        }
        // the force on i is f, on j is -f
        let g = mu[e.i] - mu[e.j];
        if g == Vec3::zero() {
            continue;
        }
        let n = d * (T::one() / l);
        let class = e.class.index();
        let k0 = params.material.base_stiffness[class];
        let k = k0 * params.w_stiff;
        let c = params.material.damping[class];
        let big_l = e.rest_length;
        let r = v[e.j] - v[e.i];
        let s = r.dot(n);
        let gn = g.dot(n);

        d_stiff += gn * k0 * (l - big_l);

        // Hooke: K = k [(1 - L/l) I + (L/l) n nᵀ], symmetric
        let ratio = big_l / l;
        let hooke = g * (k * (T::one() - ratio)) + n * (k * ratio * gn);
        // damping wrt positions: D = (c/l)(n rᵀ P + s P), P = I - n nᵀ
        let pr = r - n * s;
        let pg = g - n * gn;
        let damp_x = (pr * gn + pg * s) * (c / l);
        let dx = hooke + damp_x;
        ax[e.j] += dx;
        ax[e.i] -= dx;
        // damping wrt velocities: c n nᵀ
        let dv = n * (c * gn);
        av[e.j] += dv;
        av[e.i] -= dv;
    }

    let m = &params.material;
    if m.air_drag > T::zero() {
        for (a, g) in av.iter_mut().zip(mu) {
            *a -= *g * m.air_drag;
        }
    }
    let (kc, cd) = (m.contact_stiffness, m.contact_damping);
    for o in obstacles {
        let mu_f = m.contact_friction_scale * o.friction;
        for (i, &p) in x.iter().enumerate() {
            let Some(c) = probe(&o.shape, p) else { continue };
            let g = mu[i];
            let n = c.normal;
            let vi = v[i];
            let vn = vi.dot(n);
            let vt = vi - n * vn;
            let a = n * (kc - cd * vn) - vt * (mu_f * kc);
            // Jx = -A nᵀ + phi [ (kc - cd vn + mu kc vn) N + (mu kc - cd) n (Nᵀ v)ᵀ ]
            let nt_v = c.dnormal.tr_mul_vec(vi);
            let jx = Mat3::outer(a, n).scale(-T::one())
                + (c.dnormal.scale(kc - cd * vn + mu_f * kc * vn)
                    + Mat3::outer(n, nt_v).scale(mu_f * kc - cd))
                .scale(c.depth);
            ax[i] += jx.tr_mul_vec(g);
            // Jv = -phi [ cd n nᵀ + mu kc (I - n nᵀ) ], symmetric
            let gn = g.dot(n);
            av[i] -= (n * (cd * gn) + (g - n * gn) * (mu_f * kc)) * c.depth;
        }
    }
    d_stiff
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{RestEdge, SpringClass};
    use crate::sim::Material;

    fn material() -> Material<f64> {
        Material {
            base_mass_per_vertex: 1.0,
            base_stiffness: [3.0, 2.0, 1.0],
            damping: [0.2, 0.1, 0.05],
            gravity: Vec3::new(0.0, 0.0, -9.8),
            contact_stiffness: 100.0,
            contact_damping: 10.0,
            contact_friction_scale: 0.5,
            air_drag: 0.01,
        }
    }

    fn params() -> SimParams<f64> {
        SimParams {
            w_stiff: 1.0,
            w_mass: 1.0,
            material: material(),
        }
    }

    fn one_spring(rest: f64) -> TriMesh<f64> {
        TriMesh {
            vertices: vec![Vec3::zero(), Vec3::new(rest, 0.0, 0.0)],
            faces: vec![],
            rest_edges: vec![RestEdge {
                i: 0,
                j: 1,
                rest_length: rest,
                class: SpringClass::Structural,
            }],
            grid: None,
        }
    }

    #[test]
    fn spring_at_rest_length_is_force_free() {
        let mesh = one_spring(0.5);
        let s = SimState::at_rest(mesh.vertices.clone());
        let f = internal_forces(&s, &mesh, &params());
        assert!(f.iter().all(|f| *f == Vec3::zero()));
    }

    #[test]
    fn stretched_spring_pulls_endpoints_together() {
        let mesh = one_spring(0.5);
        let s = SimState::at_rest(vec![Vec3::zero(), Vec3::new(1.0, 0.0, 0.0)]);
        let p = params();
        let f = internal_forces(&s, &mesh, &p);
        let k = p.stiffness(0);
        // magnitude k * L, attractive
        assert!((f[0] - Vec3::new(k * 0.5, 0.0, 0.0)).norm() < 1e-15);
        assert!((f[1] + f[0]).norm() == 0.0);
    }

    #[test]
    fn zero_length_spring_exerts_nothing() {
        let mesh = one_spring(0.5);
        let s = SimState::at_rest(vec![Vec3::new(0.2, 0.2, 0.2); 2]);
        let f = internal_forces(&s, &mesh, &params());
        assert!(f.iter().all(|f| *f == Vec3::zero() && f.is_finite()));
    }

    #[test]
    fn translation_leaves_forces_unchanged() {
        let mesh = one_spring(0.5);
        let mut s = SimState::at_rest(vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(0.75, 0.25, 0.0)]);
        s.velocities = vec![Vec3::new(0.5, 0.0, 0.0), Vec3::new(0.0, -0.25, 0.0)];
        let a = internal_forces(&s, &mesh, &params());
        for p in s.positions.iter_mut() {
            *p += Vec3::new(4.0, -8.0, 16.0);
        }
        let b = internal_forces(&s, &mesh, &params());
        assert_eq!(a, b);
    }

    fn floor() -> Obstacle<f64> {
        Obstacle {
            shape: Shape::Plane {
                point: Vec3::zero(),
                normal: Vec3::new(0.0, 0.0, 1.0),
            },
            friction: 1.0,
        }
    }

    #[test]
    fn floor_contact_examples() {
        let p = params();
        let above = SimState::at_rest(vec![Vec3::new(0.0, 0.0, 0.1)]);
        assert_eq!(contact_forces(&above, &[floor()], &p)[0], Vec3::zero());
        let on = SimState::at_rest(vec![Vec3::new(0.3, 0.1, 0.0)]);
        assert_eq!(contact_forces(&on, &[floor()], &p)[0], Vec3::zero());
        let below = SimState::at_rest(vec![Vec3::new(0.0, 0.0, -0.01)]);
        let f = contact_forces(&below, &[floor()], &p)[0];
        assert!((f - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn friction_opposes_tangential_motion() {
        let p = params();
        let mut s = SimState::at_rest(vec![Vec3::new(0.0, 0.0, -0.01)]);
        s.velocities[0] = Vec3::new(1.0, 0.0, 0.0);
        let f = contact_forces(&s, &[floor()], &p)[0];
        assert!(f.x() < 0.0);
        assert!((f.z() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cylinder_pushes_radially_outward() {
        let pole = Obstacle {
            shape: Shape::Cylinder {
                center: Vec3::zero(),
                axis: Vec3::new(0.0, 0.0, 1.0),
                radius: 0.1,
                half_length: 1.0,
            },
            friction: 0.0,
        };
        let s = SimState::at_rest(vec![Vec3::new(0.09, 0.0, 0.3), Vec3::new(0.2, 0.0, 0.0), Vec3::new(0.0, 0.05, 1.2)]);
        let f = contact_forces(&s, &[pole], &params());
        assert!((f[0] - Vec3::new(100.0 * 0.01, 0.0, 0.0)).norm() < 1e-12);
        assert_eq!(f[1], Vec3::zero());
        assert_eq!(f[2], Vec3::zero());
        // near the cap the cap face is closer
        let s = SimState::at_rest(vec![Vec3::new(0.0, 0.05, 0.99)]);
        let f = contact_forces(&s, &[pole], &params());
        assert!((f[0] - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-10);
    }

    /// Total force as a flat vector, for finite differences.
    fn total_force(mesh: &TriMesh<f64>, obs: &[Obstacle<f64>], p: &SimParams<f64>, x: &[Vec3<f64>], v: &[Vec3<f64>]) -> Vec<Vec3<f64>> {
        let mut out = vec![Vec3::zero(); x.len()];
        add_spring_forces(mesh, p, x, v, &mut out, None);
        add_contact_forces(obs, p, x, v, &mut out);
        add_drag_forces(p, v, &mut out);
        out
    }

    #[test]
    fn vjp_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mesh = crate::mesh::build_grid_cloth(3, 3, 0.1, &crate::mesh::GridPlacement::flat(Vec3::zero())).unwrap();
        let obstacles = vec![
            floor(),
            Obstacle {
                shape: Shape::Cylinder {
                    center: Vec3::new(0.05, 0.0, 0.0),
                    axis: Vec3::new(0.0, 1.0, 0.0),
                    radius: 0.06,
                    half_length: 0.5,
                },
                friction: 0.7,
            },
        ];
        let mut p = params();
        p.w_stiff = 1.7;
        let n = mesh.vertex_count();
        let mut jitter = |s: f64| Vec3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s));
        let x: Vec<_> = mesh.vertices.iter().map(|p| *p + jitter(0.03) - Vec3::new(0.0, 0.0, 0.01)).collect();
        let v: Vec<_> = (0..n).map(|_| jitter(1.0)).collect();
        let mu: Vec<_> = (0..n).map(|_| jitter(1.0)).collect();
        let mut ax = vec![Vec3::zero(); n];
        let mut av = vec![Vec3::zero(); n];
        let d_stiff = force_vjp(&mesh, &obstacles, &p, &x, &v, &mu, &mut ax, &mut av);

        let objective = |p: &SimParams<f64>, x: &[Vec3<f64>], v: &[Vec3<f64>]| -> f64 {
            total_force(&mesh, &obstacles, p, x, v).iter().zip(&mu).map(|(f, m)| f.dot(*m)).sum()
        };
        let h = 1e-6;
        for i in 0..n {
            for a in 0..3 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i][a] += h;
                xm[i][a] -= h;
                let fd = (objective(&p, &xp, &v) - objective(&p, &xm, &v)) / (2.0 * h);
                assert!((fd - ax[i][a]).abs() < 1e-5 * (1.0 + fd.abs()), "x[{i}][{a}]: {fd} vs {}", ax[i][a]);
                let mut vp = v.clone();
                let mut vm = v.clone();
                vp[i][a] += h;
                vm[i][a] -= h;
                let fd = (objective(&p, &x, &vp) - objective(&p, &x, &vm)) / (2.0 * h);
                assert!((fd - av[i][a]).abs() < 1e-5 * (1.0 + fd.abs()), "v[{i}][{a}]: {fd} vs {}", av[i][a]);
            }
        }
        let mut pp = p.clone();
        let mut pm = p.clone();
        pp.w_stiff += h;
        pm.w_stiff -= h;
        let fd = (objective(&pp, &x, &v) - objective(&pm, &x, &v)) / (2.0 * h);
        assert!((fd - d_stiff).abs() < 1e-6 * (1.0 + fd.abs()));
        // the jittered cloth must actually touch both obstacles for this test to mean anything
        assert!(x.iter().any(|p| p.z() < 0.0));
    }
}
