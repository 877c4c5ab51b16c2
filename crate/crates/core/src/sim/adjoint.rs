use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::real::Real;

use super::forces::force_vjp;
use super::{FrameAdjoint, ParamGrad, Scene, SimParams, Trajectory};

impl<T: Real> Scene<T> {
    /// Gradient of a loss with respect to `(w_stiff, w_mass)`, given the loss gradient
    /// with respect to vertex positions at each loss frame.
    pub fn rollout_grad(&self, params: &SimParams<T>, adjoint: &FrameAdjoint<T>) -> Result<ParamGrad<T>> {
        self.check_adjoint(adjoint)?;
        let traj = self.rollout(params)?;
        self.rollout_grad_from(&traj, params, adjoint)
    }

    fn check_adjoint(&self, adjoint: &FrameAdjoint<T>) -> Result<()> {
        for (&frame, grads) in adjoint {
            if !self.loss_frames.contains(&frame) {
                return Err(Error::AdjointFrame { frame });
            }
            if grads.len() != self.mesh.vertex_count() {
                return Err(Error::invalid(
                    format!("loss adjoint for frame {frame}"),
                    format!("{} entries for {} vertices", grads.len(), self.mesh.vertex_count()),
                ));
            }
        }
        Ok(())
    }

    /// Backpropagation through time over a trajectory produced by [`Scene::rollout`]
    /// with the same `params`.
    pub fn rollout_grad_from(
        &self,
        traj: &Trajectory<T>,
        params: &SimParams<T>,
        adjoint: &FrameAdjoint<T>,
    ) -> Result<ParamGrad<T>> {
        self.check_adjoint(adjoint)?;
        let total = self.total_substeps();
        if traj.states.len() != total + 1 || traj.substeps != self.substeps {
            return Err(Error::invalid("trajectory", "does not belong to this scene"));
        }
        let n = self.mesh.vertex_count();
        let dt = self.dt();
        let mass = params.vertex_mass();
        let mut ax = vec![Vec3::zero(); n];
        let mut av = vec![Vec3::zero(); n];
        let mut mu = vec![Vec3::zero(); n];
        let mut force = vec![Vec3::zero(); n];
        let mut grad = ParamGrad::default();

        let add_frame = |s: usize, ax: &mut [Vec3<T>]| {
            if s.is_multiple_of(self.substeps) {
                if let Some(g) = adjoint.get(&(s / self.substeps)) {
                    for (a, g) in ax.iter_mut().zip(g) {
                        *a += *g;
                    }
                }
            }
        };
        add_frame(total, &mut ax);

        for s in (0..total).rev() {
            // ax, av hold the adjoint of state s + 1; anchored coordinates of that state
            // were overwritten and do not depend on anything upstream
            for a in &self.anchors {
                ax[a.vertex_index] = Vec3::zero();
                av[a.vertex_index] = Vec3::zero();
            }
            // x' = x + dt v',  v' = v + dt (F / m + g)
            let scale = dt / mass;
            for i in 0..n {
                av[i] += ax[i] * dt;
                mu[i] = av[i] * scale;
            }
            let state = &traj.states[s];
            self.forces_into(params, &state.positions, &state.velocities, &mut force, None);
            let mut d_mass = T::zero();
            for (m, f) in mu.iter().zip(&force) {
                d_mass += m.dot(*f);
            }
            grad.w_mass -= d_mass / params.w_mass;
            grad.w_stiff += force_vjp(
                &self.mesh,
                &self.obstacles,
                params,
                &state.positions,
                &state.velocities,
                &mu,
                &mut ax,
                &mut av,
            );
            add_frame(s, &mut ax);
        }
        Ok(grad)
    }
}
