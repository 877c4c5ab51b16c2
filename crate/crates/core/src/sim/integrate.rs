use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::mesh::TriMesh;
use crate::real::Real;

use super::forces::{add_contact_forces, add_drag_forces, add_spring_forces};
use super::{Material, Scene, SimParams, SimState, Trajectory};

/// Largest substep satisfying the explicit stability bound over the whole multiplier range.
///
/// Uses `dt < 2 sqrt(m / k)` with a 0.5 safety factor, where `m` is the lightest vertex
/// mass and `k` the largest per-vertex sum of incident spring stiffness (plus contact
/// stiffness when obstacles exist), both at the range extremes. Damping adds the
/// condition `dt < 0.5 m / c` with `c` the largest per-vertex incident damping sum plus air drag.
pub fn stable_substep<T: Real>(
    mesh: &TriMesh<T>,
    material: &Material<T>,
    has_obstacles: bool,
    w_lo: T,
    w_hi: T,
) -> T {
    let n = mesh.vertex_count();
    let mut k_sum = vec![T::zero(); n];
    let mut c_sum = vec![T::zero(); n];
    for e in &mesh.rest_edges {
        let k = material.base_stiffness[e.class.index()] * w_hi;
        let c = material.damping[e.class.index()];
        for v in [e.i, e.j] {
            k_sum[v] += k;
            c_sum[v] += c;
        }
    }
    let contact = if has_obstacles { material.contact_stiffness } else { T::zero() };
    let k_max = k_sum.iter().fold(T::zero(), |a, &b| a.max(b)) + contact;
    let c_max = c_sum.iter().fold(T::zero(), |a, &b| a.max(b)) + material.air_drag;
    let m_min = material.base_mass_per_vertex * w_lo;
    let half = T::lit(0.5);
    let mut dt = T::infinity();
    if k_max > T::zero() {
        dt = dt.min(half * T::lit(2.0) * (m_min / k_max).sqrt());
    }
    if c_max > T::zero() {
        dt = dt.min(half * m_min / c_max);
    }
    dt
}

impl<T: Real> Scene<T> {
    /// Anchor position and velocity at state index `s`, for the anchor's waypoints.
    pub(crate) fn anchor_at(&self, waypoints: &[Vec3<T>], s: usize) -> (Vec3<T>, Vec3<T>) {
        if s == 0 {
            return (waypoints[0], Vec3::zero());
        }
        // state s is produced by step s - 1, which belongs to frame segment (s - 1) / substeps
        let seg = (s - 1) / self.substeps;
        let t = T::lit(((s - 1) % self.substeps + 1) as f64) / T::lit(self.substeps as f64);
        let (a, b) = (waypoints[seg], waypoints[seg + 1]);
        (Vec3::lerp(a, b, t), (b - a) * (T::one() / self.frame_dt))
    }

    /// Total non-gravity force at a state.
    pub(crate) fn forces_into(
        &self,
        params: &SimParams<T>,
        x: &[Vec3<T>],
        v: &[Vec3<T>],
        out: &mut [Vec3<T>],
        unscaled_spring: Option<&mut [Vec3<T>]>,
    ) {
        out.iter_mut().for_each(|f| *f = Vec3::zero());
        add_spring_forces(&self.mesh, params, x, v, out, unscaled_spring);
        add_contact_forces(&self.obstacles, params, x, v, out);
        add_drag_forces(params, v, out);
    }

    /// One semi-implicit Euler substep from `state` (whose `step_index` selects the anchor
    /// keyframes). Anchored vertices are overwritten with their interpolated waypoints.
    pub fn step(&self, state: &SimState<T>, params: &SimParams<T>) -> Result<SimState<T>> {
        let mut force = vec![Vec3::zero(); self.mesh.vertex_count()];
        self.step_with(state, params, &mut force)
    }

    fn step_with(&self, state: &SimState<T>, params: &SimParams<T>, force: &mut [Vec3<T>]) -> Result<SimState<T>> {
        let dt = self.dt();
        let inv_m = T::one() / params.vertex_mass();
        let g = params.material.gravity;
        self.forces_into(params, &state.positions, &state.velocities, force, None);
        let mut velocities = Vec::with_capacity(force.len());
        let mut positions = Vec::with_capacity(force.len());
        for ((x, v), f) in state.positions.iter().zip(&state.velocities).zip(force.iter()) {
            let v_new = *v + (*f * inv_m + g) * dt;
            velocities.push(v_new);
            positions.push(*x + v_new * dt);
        }
        let s = state.step_index + 1;
        for a in &self.anchors {
            let (p, v) = self.anchor_at(&a.waypoints, s);
            positions[a.vertex_index] = p;
            velocities[a.vertex_index] = v;
        }
        let next = SimState {
            positions,
            velocities,
            step_index: s,
        };
        if !next.is_finite() {
            return Err(Error::Diverged {
                substep: state.step_index,
                w_stiff: params.w_stiff.as_f64(),
                w_mass: params.w_mass.as_f64(),
            });
        }
        Ok(next)
    }

    /// Forward rollout over the whole horizon, keeping every substep state.
    pub fn rollout(&self, params: &SimParams<T>) -> Result<Trajectory<T>> {
        params.validate()?;
        let total = self.total_substeps();
        let mut states = Vec::with_capacity(total + 1);
        states.push(self.initial_state());
        let mut force = vec![Vec3::zero(); self.mesh.vertex_count()];
        for _ in 0..total {
            let next = self.step_with(states.last().unwrap(), params, &mut force)?;
            states.push(next);
        }
        Ok(Trajectory {
            states,
            horizon: self.horizon,
            substeps: self.substeps,
            dt: self.dt(),
        })
    }
}
