//! Gradient-based recovery of the stiffness and mass multipliers.
//!
//! The multipliers are optimised through unconstrained latents,
//! `w = sigmoid(s) * (hi - lo) + lo`, with Adam. Each iteration rolls the scene out,
//! samples the simulated surface at the loss frames, scores it against the target
//! with the unidirectional Chamfer loss and chains the gradient back through the
//! sampler and the simulator. The lowest-loss iterate is reported.

use std::collections::BTreeMap;
use std::time::Instant;

use crate::chamfer::{chamfer_point_gradients, unidirectional_chamfer_indexed, NeighborIndex};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::real::Real;
use crate::sampler::{derive_seed, sample_surface, scatter_point_gradients, SampledCloud};
use crate::sim::{FrameAdjoint, ParamGrad, Scene, SimParams, Trajectory};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LatentParams<T> {
    pub s_stiff: T,
    pub s_mass: T,
}

impl<T: Real> LatentParams<T> {
    pub fn zero() -> Self {
        LatentParams {
            s_stiff: T::zero(),
            s_mass: T::zero(),
        }
    }

    pub fn as_array(self) -> [T; 2] {
        [self.s_stiff, self.s_mass]
    }

    pub fn from_array(a: [T; 2]) -> Self {
        LatentParams {
            s_stiff: a[0],
            s_mass: a[1],
        }
    }
}

/// `(w_stiff, w_mass)` in simulator units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Multipliers<T> {
    pub w_stiff: T,
    pub w_mass: T,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamRange<T> {
    pub lo: T,
    pub hi: T,
}

impl<T: Real> ParamRange<T> {
    pub fn new(lo: T, hi: T) -> Result<Self> {
        if !(lo > T::zero() && lo < hi && hi.is_finite()) {
            return Err(Error::invalid("parameter range", format!("need 0 < lo < hi, got [{lo}, {hi}]")));
        }
        Ok(ParamRange { lo, hi })
    }

    pub fn contains(&self, w: T) -> bool {
        w >= self.lo && w <= self.hi
    }

    pub fn midpoint(&self) -> T {
        (self.lo + self.hi) * T::lit(0.5)
    }
}

impl ParamRange<f64> {
    /// `[0.1, 10]`
    pub fn standard() -> Self {
        ParamRange { lo: 0.1, hi: 10.0 }
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    // split by sign so exp never overflows
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn map_params<T: Real>(s: LatentParams<T>, range: ParamRange<T>) -> Multipliers<T> {
    let span = range.hi - range.lo;
    Multipliers {
        w_stiff: sigmoid(s.s_stiff) * span + range.lo,
        w_mass: sigmoid(s.s_mass) * span + range.lo,
    }
}

/// Inverse of [`map_params`] for a value strictly inside the range.
pub fn unmap_param<T: Real>(w: T, range: ParamRange<T>) -> T {
    let p = (w - range.lo) / (range.hi - range.lo);
    (p / (T::one() - p)).ln()
}

/// Chain rule through the sigmoid mapping: `dL/ds = dL/dw · σ(s)(1 − σ(s))(hi − lo)`.
pub fn map_params_grad<T: Real>(s: LatentParams<T>, range: ParamRange<T>, dl_dw: ParamGrad<T>) -> LatentParams<T> {
    let span = range.hi - range.lo;
    let d = |x: T| {
        let q = sigmoid(x);
        q * (T::one() - q) * span
    };
    LatentParams {
        s_stiff: dl_dw.w_stiff * d(s.s_stiff),
        s_mass: dl_dw.w_mass * d(s.s_mass),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig<T> {
    pub learning_rate: T,
    pub max_iterations: usize,
    pub loss_threshold: Option<T>,
    pub loss_frames: Vec<usize>,
    pub adam_beta1: T,
    pub adam_beta2: T,
    pub adam_epsilon: T,
    pub run_seed: u64,
}

impl<T: Real> OptimConfig<T> {
    pub fn new(learning_rate: T, max_iterations: usize, loss_frames: Vec<usize>) -> Self {
        OptimConfig {
            learning_rate,
            max_iterations,
            loss_threshold: None,
            loss_frames,
            adam_beta1: T::lit(0.9),
            adam_beta2: T::lit(0.999),
            adam_epsilon: T::lit(1e-8),
            run_seed: 0,
        }
    }

    pub fn validate(&self, horizon: usize) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations", "must be at least 1"));
        }
        if !(self.learning_rate > T::zero()) {
            return Err(Error::invalid("learning_rate", "must be positive"));
        }
        if self.loss_frames.is_empty() {
            return Err(Error::invalid("loss_frames", "empty"));
        }
        if let Some(f) = self.loss_frames.iter().find(|&&f| f > horizon) {
            return Err(Error::invalid("loss_frames", format!("frame {f} beyond horizon {horizon}")));
        }
        if let Some(t) = self.loss_threshold {
            if !(t > T::zero()) {
                return Err(Error::invalid("loss_threshold", "must be positive"));
            }
        }
        Ok(())
    }
}

/// First and second moment estimates of Adam for the two latents.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: [T; 2],
    pub v: [T; 2],
    /// Number of updates applied so far.
    pub t: usize,
}

impl<T: Real> Default for AdamState<T> {
    fn default() -> Self {
        AdamState {
            m: [T::zero(); 2],
            v: [T::zero(); 2],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update; returns the new latents.
pub fn adam_step<T: Real>(
    state: &mut AdamState<T>,
    latent: LatentParams<T>,
    grad: LatentParams<T>,
    config: &OptimConfig<T>,
    learning_rate: T,
) -> LatentParams<T> {
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    let mut s = latent.as_array();
    for (k, g) in grad.as_array().into_iter().enumerate() {
        state.m[k] = b1 * state.m[k] + (T::one() - b1) * g;
        state.v[k] = b2 * state.v[k] + (T::one() - b2) * g * g;
        let m_hat = state.m[k] / bc1;
        let v_hat = state.v[k] / bc2;
        s[k] -= learning_rate * m_hat / (v_hat.sqrt() + config.adam_epsilon);
    }
    LatentParams::from_array(s)
}

/// How the sim surface is observed: points per frame and the visible faces.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub points_per_frame: usize,
    pub face_mask: Option<Vec<usize>>,
}

/// A scene paired with target clouds at its loss frames.
#[derive(Clone, Debug)]
pub struct AlignmentProblem<T> {
    scene: Scene<T>,
    observation: Observation,
    targets: BTreeMap<usize, NeighborIndex<T>>,
}

/// Loss value and its gradient with respect to the multipliers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossEval<T> {
    pub loss: T,
    pub grad: ParamGrad<T>,
}

impl<T: Real> AlignmentProblem<T> {
    /// `target_frames[f]` is the target cloud at frame `f`; only the loss frames are used.
    pub fn new(
        scene: &Scene<T>,
        observation: Observation,
        target_frames: &[Vec<Vec3<T>>],
        loss_frames: &[usize],
    ) -> Result<Self> {
        if loss_frames.is_empty() {
            return Err(Error::invalid("loss_frames", "empty"));
        }
        if observation.points_per_frame == 0 {
            return Err(Error::invalid("points_per_frame", "must be at least 1"));
        }
        let mut targets = BTreeMap::new();
        for &f in loss_frames {
            let pts = target_frames.get(f).ok_or_else(|| {
                Error::invalid(
                    "target",
                    format!("no target for loss frame {f} ({} frames given)", target_frames.len()),
                )
            })?;
            targets.insert(f, NeighborIndex::build(pts.clone())?);
        }
        let mut scene = scene.clone();
        scene.loss_frames = loss_frames.to_vec();
        let scene = Scene::new(
            scene.mesh,
            scene.material,
            scene.anchors,
            scene.obstacles,
            scene.horizon,
            scene.substeps,
            scene.frame_dt,
            scene.loss_frames,
        )?;
        Ok(AlignmentProblem {
            scene,
            observation,
            targets,
        })
    }

    pub fn scene(&self) -> &Scene<T> {
        &self.scene
    }

    pub fn loss_frames(&self) -> Vec<usize> {
        self.targets.keys().copied().collect()
    }

    pub fn params(&self, w: Multipliers<T>) -> SimParams<T> {
        self.scene.params(w.w_stiff, w.w_mass)
    }

    /// Simulated clouds at every loss frame, each from a seed derived from `(seed, frame)`.
    pub fn sample(&self, traj: &Trajectory<T>, seed: u64) -> Result<BTreeMap<usize, SampledCloud<T>>> {
        self.targets
            .keys()
            .map(|&f| {
                let cloud = sample_surface(
                    &self.scene.mesh,
                    traj.frame(f),
                    self.observation.points_per_frame,
                    self.observation.face_mask.as_deref(),
                    derive_seed(seed, &[f as u64]),
                )?;
                Ok((f, cloud))
            })
            .collect()
    }

    fn score(
        &self,
        traj: &Trajectory<T>,
        params: &SimParams<T>,
        clouds: &BTreeMap<usize, SampledCloud<T>>,
        with_grad: bool,
    ) -> Result<LossEval<T>> {
        let mut loss = T::zero();
        let mut adjoint = FrameAdjoint::new();
        for (&f, cloud) in clouds {
            let target = &self.targets[&f];
            let mut report = unidirectional_chamfer_indexed(&cloud.points, target)?;
            report.frame_index = f;
            loss += report.value;
            if with_grad {
                let pg = chamfer_point_gradients(&report, &cloud.points, target.points())?;
                adjoint.insert(f, scatter_point_gradients(cloud, &pg, &self.scene.mesh)?);
            }
        }
        let grad = if with_grad {
            self.scene.rollout_grad_from(traj, params, &adjoint)?
        } else {
            ParamGrad::default()
        };
        Ok(LossEval { loss, grad })
    }

    /// Summed unidirectional Chamfer loss over the loss frames.
    pub fn loss(&self, w: Multipliers<T>, seed: u64) -> Result<T> {
        let params = self.params(w);
        let traj = self.scene.rollout(&params)?;
        let clouds = self.sample(&traj, seed)?;
        Ok(self.score(&traj, &params, &clouds, false)?.loss)
    }

    pub fn loss_and_grad(&self, w: Multipliers<T>, seed: u64) -> Result<LossEval<T>> {
        let params = self.params(w);
        let traj = self.scene.rollout(&params)?;
        let clouds = self.sample(&traj, seed)?;
        self.score(&traj, &params, &clouds, true)
    }

    /// Loss and gradient with faces and barycentric coefficients taken from `frozen`
    /// instead of drawn afresh. This makes the loss a smooth function of the multipliers,
    /// which finite-difference checks need.
    pub fn loss_and_grad_frozen(&self, w: Multipliers<T>, frozen: &BTreeMap<usize, SampledCloud<T>>) -> Result<LossEval<T>> {
        let params = self.params(w);
        let traj = self.scene.rollout(&params)?;
        let clouds = frozen
            .iter()
            .map(|(&f, c)| Ok((f, c.reposition(&self.scene.mesh, traj.frame(f))?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        if clouds.keys().ne(self.targets.keys()) {
            return Err(Error::invalid("frozen samples", "frames differ from the loss frames"));
        }
        self.score(&traj, &params, &clouds, true)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    Threshold,
    Budget,
    Divergence,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::Threshold => "threshold",
            Termination::Budget => "budget",
            Termination::Divergence => "divergence",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord<T> {
    /// 1-based.
    pub iteration: usize,
    pub latent: LatentParams<T>,
    pub params: Multipliers<T>,
    /// Infinite when the rollout diverged.
    pub loss: T,
    /// `dL/ds`; absent for diverged iterates.
    pub gradient: Option<LatentParams<T>>,
    pub sampling_seed: u64,
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimateResult<T> {
    pub best_params: Multipliers<T>,
    pub best_loss: T,
    pub best_iteration: usize,
    pub history: Vec<IterationRecord<T>>,
    pub termination: Termination,
}

/// Sampling seed of an iteration.
pub fn iteration_seed(run_seed: u64, iteration: usize) -> u64 {
    derive_seed(run_seed, &[iteration as u64])
}

/// Runs the optimisation loop from the range midpoint.
///
/// A diverged rollout is recorded with infinite loss; the last update is then retried
/// once with half the learning rate, and a second divergence ends the run.
pub fn estimate<T: Real>(problem: &AlignmentProblem<T>, range: ParamRange<T>, config: &OptimConfig<T>) -> Result<EstimateResult<T>> {
    config.validate(problem.scene.horizon)?;
    if config.loss_frames != problem.loss_frames() {
        return Err(Error::invalid("loss_frames", "config and problem disagree"));
    }
    let mut latent = LatentParams::zero();
    let mut adam = AdamState::default();
    let mut previous: Option<(LatentParams<T>, AdamState<T>, LatentParams<T>)> = None;
    let mut retried = false;
    let mut history = Vec::new();
    let mut termination = Termination::Budget;
    let mut best: Option<usize> = None;

    for iteration in 1..=config.max_iterations {
        let started = Instant::now();
        let params = map_params(latent, range);
        let seed = iteration_seed(config.run_seed, iteration);
        match problem.loss_and_grad(params, seed) {
            Err(Error::Diverged { substep, .. }) => {
                log::warn!(
                    "iteration {iteration}: rollout diverged at substep {substep} (w_stiff {}, w_mass {})",
                    params.w_stiff,
                    params.w_mass
                );
                history.push(IterationRecord {
                    iteration,
                    latent,
                    params,
                    loss: T::infinity(),
                    gradient: None,
                    sampling_seed: seed,
                    wall_clock_s: started.elapsed().as_secs_f64(),
                });
                match (&previous, retried) {
                    (Some((prev_latent, prev_adam, prev_grad)), false) => {
                        retried = true;
                        adam = prev_adam.clone();
                        latent = adam_step(&mut adam, *prev_latent, *prev_grad, config, config.learning_rate * T::lit(0.5));
                    }
                    _ => {
                        termination = Termination::Divergence;
                        break;
                    }
                }
            }
            Err(e) => return Err(e),
            Ok(eval) => {
                let grad = map_params_grad(latent, range, eval.grad);
                let finite_grad = grad.s_stiff.is_finite() && grad.s_mass.is_finite();
                history.push(IterationRecord {
                    iteration,
                    latent,
                    params,
                    loss: eval.loss,
                    gradient: Some(grad),
                    sampling_seed: seed,
                    wall_clock_s: started.elapsed().as_secs_f64(),
                });
                let idx = history.len() - 1;
                if eval.loss.is_finite() && best.is_none_or(|b| eval.loss < history[b].loss) {
                    best = Some(idx);
                }
                log::debug!(
                    "iteration {iteration}: loss {} at (w_stiff {}, w_mass {})",
                    eval.loss,
                    params.w_stiff,
                    params.w_mass
                );
                if config.loss_threshold.is_some_and(|t| eval.loss < t) {
                    termination = Termination::Threshold;
                    break;
                }
                if !finite_grad || !eval.loss.is_finite() {
                    termination = Termination::Divergence;
                    break;
                }
                if iteration == config.max_iterations {
                    break;
                }
                previous = Some((latent, adam.clone(), grad));
                latent = adam_step(&mut adam, latent, grad, config, config.learning_rate);
            }
        }
    }

    let (best_params, best_loss, best_iteration) = match best {
        Some(b) => (history[b].params, history[b].loss, history[b].iteration),
        None => (map_params(LatentParams::zero(), range), T::infinity(), 0),
    };
    Ok(EstimateResult {
        best_params,
        best_loss,
        best_iteration,
        history,
        termination,
    })
}
