//! Differentiable mass-spring thin-shell dynamics.
//!
//! Forward rollouts use semi-implicit Euler with keyframed anchors, spring forces,
//! gravity and penalty contact against static obstacles. [`Scene::rollout_grad`]
//! runs the exact reverse accumulation of that computation to obtain the loss
//! gradient with respect to the stiffness and mass multipliers.

mod adjoint;
mod forces;
mod integrate;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::mesh::TriMesh;
use crate::real::Real;

pub use forces::{contact_forces, internal_forces};
pub use integrate::stable_substep;

/// Basis material: the quantities the multipliers scale, plus fixed contact settings.
#[derive(Clone, Debug, PartialEq)]
pub struct Material<T> {
    pub base_mass_per_vertex: T,
    /// Indexed by [`crate::mesh::SpringClass::index`].
    pub base_stiffness: [T; 3],
    pub damping: [T; 3],
    pub gravity: Vec3<T>,
    pub contact_stiffness: T,
    /// Depth-weighted normal damping of penalty contacts.
    pub contact_damping: T,
    pub contact_friction_scale: T,
    /// Linear drag on absolute vertex velocity, not scaled by either multiplier.
    pub air_drag: T,
}

impl<T: Real> Material<T> {
    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: T| {
            if v > T::zero() && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(name, "must be positive and finite"))
            }
        };
        let nonneg = |name: &str, v: T| {
            if v >= T::zero() && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(name, "must be non-negative and finite"))
            }
        };
        pos("base_mass_per_vertex", self.base_mass_per_vertex)?;
        for k in self.base_stiffness {
            pos("base_stiffness", k)?;
        }
        for c in self.damping {
            nonneg("damping", c)?;
        }
        pos("contact_stiffness", self.contact_stiffness)?;
        nonneg("contact_damping", self.contact_damping)?;
        nonneg("contact_friction_scale", self.contact_friction_scale)?;
        nonneg("air_drag", self.air_drag)?;
        if !self.gravity.is_finite() {
            return Err(Error::invalid("gravity", "must be finite"));
        }
        Ok(())
    }
}

/// Material plus the two multipliers being estimated.
#[derive(Clone, Debug, PartialEq)]
pub struct SimParams<T> {
    pub w_stiff: T,
    pub w_mass: T,
    pub material: Material<T>,
}

impl<T: Real> SimParams<T> {
    #[inline]
    pub fn vertex_mass(&self) -> T {
        self.w_mass * self.material.base_mass_per_vertex
    }

    #[inline]
    pub fn stiffness(&self, class: usize) -> T {
        self.w_stiff * self.material.base_stiffness[class]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("w_stiff", self.w_stiff), ("w_mass", self.w_mass)] {
            if !(w > T::zero() && w.is_finite()) {
                return Err(Error::invalid(name, format!("must be positive and finite, got {w}")));
            }
        }
        self.material.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimState<T> {
    pub positions: Vec<Vec3<T>>,
    pub velocities: Vec<Vec3<T>>,
    pub step_index: usize,
}

impl<T: Real> SimState<T> {
    pub fn at_rest(positions: Vec<Vec3<T>>) -> Self {
        let n = positions.len();
        SimState {
            positions,
            velocities: vec![Vec3::zero(); n],
            step_index: 0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.positions.iter().all(|p| p.is_finite()) && self.velocities.iter().all(|v| v.is_finite())
    }
}

/// Keyframed vertex. `waypoints[f]` is the prescribed position at frame `f`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorTrack<T> {
    pub vertex_index: usize,
    pub waypoints: Vec<Vec3<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape<T> {
    /// Half-space below the plane (opposite the normal) is solid.
    Plane { point: Vec3<T>, normal: Vec3<T> },
    /// Solid capped cylinder.
    Cylinder {
        center: Vec3<T>,
        axis: Vec3<T>,
        radius: T,
        half_length: T,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Obstacle<T> {
    pub shape: Shape<T>,
    /// Multiplier on the material's contact friction scale.
    pub friction: T,
}

impl<T: Real> Obstacle<T> {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: Vec3<T>| {
            if (v.norm() - T::one()).abs() <= T::lit(1e-6) {
                Ok(())
            } else {
                Err(Error::invalid(name, "direction must be unit length"))
            }
        };
        match self.shape {
            Shape::Plane { normal, point } => {
                unit("plane normal", normal)?;
                if !point.is_finite() {
                    return Err(Error::invalid("plane point", "must be finite"));
                }
            }
            Shape::Cylinder {
                axis,
                radius,
                half_length,
                center,
            } => {
                unit("cylinder axis", axis)?;
                if !(radius > T::zero()) {
                    return Err(Error::invalid("cylinder radius", "must be positive"));
                }
                if !(half_length > T::zero()) {
                    return Err(Error::invalid("cylinder half_length", "must be positive"));
                }
                if !center.is_finite() {
                    return Err(Error::invalid("cylinder center", "must be finite"));
                }
            }
        }
        if !(self.friction >= T::zero()) {
            return Err(Error::invalid("obstacle friction", "must be non-negative"));
        }
        Ok(())
    }
}

/// Every substep state of a rollout. `states[0]` is the initial condition.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T> {
    pub states: Vec<SimState<T>>,
    pub horizon: usize,
    pub substeps: usize,
    pub dt: T,
}

impl<T: Real> Trajectory<T> {
    /// Vertex positions at frame `f`.
    pub fn frame(&self, f: usize) -> &[Vec3<T>] {
        &self.states[f * self.substeps].positions
    }

    pub fn frame_count(&self) -> usize {
        self.horizon + 1
    }
}

/// `dL/dw_stiff`, `dL/dw_mass`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ParamGrad<T> {
    pub w_stiff: T,
    pub w_mass: T,
}

/// Per-frame adjoint of the loss with respect to vertex positions.
pub type FrameAdjoint<T> = BTreeMap<usize, Vec<Vec3<T>>>;

/// A fully resolved simulation setup: mesh, basis material, anchors, obstacles and timing.
#[derive(Clone, Debug)]
pub struct Scene<T> {
    pub mesh: TriMesh<T>,
    pub material: Material<T>,
    pub anchors: Vec<AnchorTrack<T>>,
    pub obstacles: Vec<Obstacle<T>>,
    pub horizon: usize,
    pub substeps: usize,
    pub frame_dt: T,
    pub loss_frames: Vec<usize>,
    anchored: Vec<bool>,
}

impl<T: Real> Scene<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        mesh: TriMesh<T>,
        material: Material<T>,
        anchors: Vec<AnchorTrack<T>>,
        obstacles: Vec<Obstacle<T>>,
        horizon: usize,
        substeps: usize,
        frame_dt: T,
        loss_frames: Vec<usize>,
    ) -> Result<Self> {
        mesh.validate()?;
        material.validate()?;
        if substeps == 0 {
            return Err(Error::invalid("substeps_per_frame", "must be at least 1"));
        }
        if !(frame_dt > T::zero()) {
            return Err(Error::invalid("frame_dt_s", "must be positive"));
        }
        let mut anchored = vec![false; mesh.vertex_count()];
        for (k, a) in anchors.iter().enumerate() {
            if a.vertex_index >= mesh.vertex_count() {
                return Err(Error::invalid(format!("anchors[{k}]"), "vertex index out of range"));
            }
            if anchored[a.vertex_index] {
                return Err(Error::invalid(
                    format!("anchors[{k}]"),
                    format!("vertex {} anchored twice", a.vertex_index),
                ));
            }
            if a.waypoints.len() != horizon + 1 {
                return Err(Error::invalid(
                    format!("anchors[{k}]"),
                    format!("expected {} waypoints, got {}", horizon + 1, a.waypoints.len()),
                ));
            }
            anchored[a.vertex_index] = true;
        }
        for o in &obstacles {
            o.validate()?;
        }
        if let Some(&f) = loss_frames.iter().find(|&&f| f > horizon) {
            return Err(Error::invalid("loss_frames", format!("frame {f} beyond horizon {horizon}")));
        }
        Ok(Scene {
            mesh,
            material,
            anchors,
            obstacles,
            horizon,
            substeps,
            frame_dt,
            loss_frames,
            anchored,
        })
    }

    #[inline]
    pub fn dt(&self) -> T {
        self.frame_dt / T::lit(self.substeps as f64)
    }

    pub fn total_substeps(&self) -> usize {
        self.horizon * self.substeps
    }

    pub fn is_anchored(&self, v: usize) -> bool {
        self.anchored[v]
    }

    pub fn params(&self, w_stiff: T, w_mass: T) -> SimParams<T> {
        SimParams {
            w_stiff,
            w_mass,
            material: self.material.clone(),
        }
    }

    pub fn initial_state(&self) -> SimState<T> {
        let mut positions = self.mesh.vertices.clone();
        for a in &self.anchors {
            positions[a.vertex_index] = a.waypoints[0];
        }
        SimState::at_rest(positions)
    }
}
