//! Scenario configs, the built-in lift / fold / band-stretch scenes, synthetic target
//! generation, the shared evaluation metric and dataset generation.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{AlignmentProblem, Multipliers, Observation, ParamRange};
use crate::geom::Vec3;
use crate::mesh::{build_grid_cloth, GridPlacement, GridShape, TriMesh};
use crate::real::Real;
use crate::sampler::{
    add_gaussian_noise, derive_seed, occlusion_subset, sample_cylinder_surface, sample_surface, OcclusionRule,
};
use crate::sim::{stable_substep, AnchorTrack, Material, Obstacle, Scene, Shape};

/// Smallest automatic substep count per frame.
pub const MIN_SUBSTEPS_PER_FRAME: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridRecipe {
    pub nx: usize,
    pub ny: usize,
    pub spacing_m: f64,
    /// Position of the grid centre.
    pub center_m: [f64; 3],
    pub normal: [f64; 3],
    /// In-plane rotation of the grid axes about `normal`.
    #[serde(default)]
    pub rotation_rad: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialSpec {
    pub base_mass_per_vertex_kg: f64,
    pub structural_stiffness_n_per_m: f64,
    pub shear_stiffness_n_per_m: f64,
    pub bend_stiffness_n_per_m: f64,
    pub structural_damping_n_s_per_m: f64,
    pub shear_damping_n_s_per_m: f64,
    pub bend_damping_n_s_per_m: f64,
    pub gravity_m_per_s2: [f64; 3],
    pub contact_stiffness_n_per_m: f64,
    /// Normal damping per unit penetration depth.
    pub contact_damping_n_s_per_m2: f64,
    pub contact_friction_scale: f64,
    #[serde(default)]
    pub air_drag_n_s_per_m: f64,
}

impl Default for MaterialSpec {
    fn default() -> Self {
        MaterialSpec {
            base_mass_per_vertex_kg: 0.002,
            structural_stiffness_n_per_m: 20.0,
            shear_stiffness_n_per_m: 10.0,
            bend_stiffness_n_per_m: 4.0,
            structural_damping_n_s_per_m: 0.05,
            shear_damping_n_s_per_m: 0.02,
            bend_damping_n_s_per_m: 0.01,
            gravity_m_per_s2: [0.0, 0.0, -9.8],
            contact_stiffness_n_per_m: 1000.0,
            contact_damping_n_s_per_m2: 10.0,
            contact_friction_scale: 1.0,
            air_drag_n_s_per_m: 0.005,
        }
    }
}

impl MaterialSpec {
    pub fn to_material<T: Real>(&self) -> Material<T> {
        Material {
            base_mass_per_vertex: T::lit(self.base_mass_per_vertex_kg),
            base_stiffness: [
                T::lit(self.structural_stiffness_n_per_m),
                T::lit(self.shear_stiffness_n_per_m),
                T::lit(self.bend_stiffness_n_per_m),
            ],
            damping: [
                T::lit(self.structural_damping_n_s_per_m),
                T::lit(self.shear_damping_n_s_per_m),
                T::lit(self.bend_damping_n_s_per_m),
            ],
            gravity: Vec3::from_f64(self.gravity_m_per_s2),
            contact_stiffness: T::lit(self.contact_stiffness_n_per_m),
            contact_damping: T::lit(self.contact_damping_n_s_per_m2),
            contact_friction_scale: T::lit(self.contact_friction_scale),
            air_drag: T::lit(self.air_drag_n_s_per_m),
        }
    }
}

/// A mesh vertex, by raw index, by grid coordinates or by grid column.
///
/// Negative grid coordinates count from the far edge (`-1` is the last row/column).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum VertexSelector {
    Index(usize),
    Grid([i64; 2]),
    /// Every vertex of grid column `i`.
    Column(i64),
}

impl VertexSelector {
    fn resolve(&self, grid: GridShape, vertex_count: usize) -> Result<Vec<usize>> {
        let wrap = |k: i64, n: usize, what: &str| -> Result<usize> {
            let r = if k < 0 { n as i64 + k } else { k };
            if r < 0 || r >= n as i64 {
                Err(Error::invalid("anchor vertex", format!("{what} {k} outside a grid of {n}")))
            } else {
                Ok(r as usize)
            }
        };
        match self {
            VertexSelector::Index(i) if *i < vertex_count => Ok(vec![*i]),
            VertexSelector::Index(i) => Err(Error::invalid(
                "anchor vertex",
                format!("index {i} outside a mesh of {vertex_count} vertices"),
            )),
            VertexSelector::Grid([i, j]) => {
                Ok(vec![grid.index(wrap(*i, grid.nx, "column")?, wrap(*j, grid.ny, "row")?)])
            }
            VertexSelector::Column(i) => {
                let i = wrap(*i, grid.nx, "column")?;
                Ok((0..grid.ny).map(|j| grid.index(i, j)).collect())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Easing {
    Linear,
    #[default]
    Smoothstep,
}

impl Easing {
    fn apply(self, t: f64) -> f64 {
        let t = t.clamp(0.0, 1.0);
        match self {
            Easing::Linear => t,
            Easing::Smoothstep => t * t * (3.0 - 2.0 * t),
        }
    }
}

/// Keyframed motion of a set of anchored vertices, relative to their rest positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AnchorMotion {
    /// Straight-line displacement reached at the last frame and held there.
    Translate {
        offset_m: [f64; 3],
        #[serde(default)]
        easing: Easing,
    },
    /// Semicircle in the vertical plane through the anchor and the rest position of
    /// `vertex`, ending `clearance_m` above that vertex.
    ArcToVertex {
        vertex: VertexSelector,
        clearance_m: f64,
        #[serde(default)]
        easing: Easing,
    },
    /// Explicit absolute positions, one per frame (`horizon_frames + 1`).
    Waypoints { positions_m: Vec<[f64; 3]> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorRecipe {
    pub vertices: VertexSelector,
    pub motion: AnchorMotion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObstacleSpec {
    Plane {
        point_m: [f64; 3],
        normal: [f64; 3],
        friction: f64,
    },
    Cylinder {
        center_m: [f64; 3],
        axis: [f64; 3],
        radius_m: f64,
        half_length_m: f64,
        friction: f64,
        /// Points sampled from the lateral surface and appended to every target frame.
        #[serde(default)]
        target_points: usize,
    },
}

/// Complete, serialisable scenario description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    pub mesh: GridRecipe,
    #[serde(default)]
    pub material: MaterialSpec,
    pub anchors: Vec<AnchorRecipe>,
    #[serde(default)]
    pub obstacles: Vec<ObstacleSpec>,
    pub horizon_frames: usize,
    pub frame_dt_s: f64,
    /// Derived from the stability bound when absent.
    #[serde(default)]
    pub substeps_per_frame: Option<usize>,
    pub loss_frames: Vec<usize>,
    pub occlusion: OcclusionRule,
    pub points_per_frame: usize,
    pub param_range: [f64; 2],
    pub default_learning_rate: f64,
    #[serde(default)]
    pub default_loss_threshold: Option<f64>,
    pub default_max_iterations: usize,
}

/// A scenario resolved into simulator objects.
#[derive(Clone, Debug)]
pub struct CompiledScenario<T> {
    pub scene: Scene<T>,
    pub observation: Observation,
    pub range: ParamRange<T>,
}

fn unit(v: [f64; 3], field: &str) -> Result<Vec3<f64>> {
    Vec3::from_f64(v)
        .normalized()
        .filter(|n| n.is_finite())
        .ok_or_else(|| Error::invalid(field, "zero or non-finite direction"))
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        self.compile::<f64>().map(|_| ())
    }

    pub fn range(&self) -> Result<ParamRange<f64>> {
        ParamRange::new(self.param_range[0], self.param_range[1])
            .map_err(|e| Error::invalid("param_range", e.to_string()))
    }

    /// Rest mesh of the configured grid.
    pub fn build_mesh<T: Real>(&self) -> Result<TriMesh<T>> {
        let m = &self.mesh;
        let placement = GridPlacement {
            center: Vec3::from_f64(m.center_m),
            normal: Vec3::from_f64(unit(m.normal, "mesh.normal")?.0),
            rotation: T::lit(m.rotation_rad),
        };
        build_grid_cloth(m.nx, m.ny, T::lit(m.spacing_m), &placement)
    }

    fn obstacles<T: Real>(&self) -> Result<Vec<Obstacle<T>>> {
        self.obstacles
            .iter()
            .enumerate()
            .map(|(k, o)| {
                let field = format!("obstacles[{k}]");
                let obstacle = match o {
                    ObstacleSpec::Plane {
                        point_m,
                        normal,
                        friction,
                    } => Obstacle {
                        shape: Shape::Plane {
                            point: Vec3::from_f64(*point_m),
                            normal: Vec3::from_f64(unit(*normal, &field)?.0),
                        },
                        friction: T::lit(*friction),
                    },
                    ObstacleSpec::Cylinder {
                        center_m,
                        axis,
                        radius_m,
                        half_length_m,
                        friction,
                        ..
                    } => Obstacle {
                        shape: Shape::Cylinder {
                            center: Vec3::from_f64(*center_m),
                            axis: Vec3::from_f64(unit(*axis, &field)?.0),
                            radius: T::lit(*radius_m),
                            half_length: T::lit(*half_length_m),
                        },
                        friction: T::lit(*friction),
                    },
                };
                obstacle.validate().map_err(|e| Error::invalid(field, e.to_string()))?;
                Ok(obstacle)
            })
            .collect()
    }

    fn anchor_tracks<T: Real>(&self, mesh: &TriMesh<T>) -> Result<Vec<AnchorTrack<T>>> {
        let grid = mesh.grid.expect("grid meshes carry their shape");
        let horizon = self.horizon_frames;
        let mut tracks = Vec::new();
        for (k, recipe) in self.anchors.iter().enumerate() {
            let field = format!("anchors[{k}]");
            let vertices = recipe
                .vertices
                .resolve(grid, mesh.vertex_count())
                .map_err(|e| Error::invalid(field.clone(), e.to_string()))?;
            for v in vertices {
                let rest = Vec3::from_f64(mesh.vertices[v].to_f64());
                let frac = |f: usize| f as f64 / horizon as f64;
                let waypoints: Vec<Vec3<f64>> = match &recipe.motion {
                    AnchorMotion::Translate { offset_m, easing } => {
                        let off = Vec3::from_f64(*offset_m);
                        (0..=horizon).map(|f| rest + off * easing.apply(frac(f))).collect()
                    }
                    AnchorMotion::ArcToVertex {
                        vertex,
                        clearance_m,
                        easing,
                    } => {
                        let to = vertex
                            .resolve(grid, mesh.vertex_count())
                            .map_err(|e| Error::invalid(field.clone(), e.to_string()))?;
                        if to.len() != 1 {
                            return Err(Error::invalid(field, "arc target must be a single vertex"));
                        }
                        let up = Vec3::new(0.0, 0.0, 1.0);
                        let end = Vec3::from_f64(mesh.vertices[to[0]].to_f64()) + up * *clearance_m;
                        let chord = end - rest;
                        let flat = chord - up * chord.dot(up);
                        let dir = flat
                            .normalized()
                            .ok_or_else(|| Error::invalid(field.clone(), "arc endpoints are vertically aligned"))?;
                        let center = (rest + end) * 0.5;
                        let radius = chord.norm() * 0.5;
                        let span = chord.normalized().expect("endpoints differ");
                        // arc plane spanned by the chord and the horizontal normal to it
                        let side = dir.cross(up);
                        let lift = side.cross(span);
                        (0..=horizon)
                            .map(|f| {
                                let theta = std::f64::consts::PI * easing.apply(frac(f));
                                center - span * (radius * theta.cos()) + lift * (radius * theta.sin())
                            })
                            .collect()
                    }
                    AnchorMotion::Waypoints { positions_m } => {
                        if positions_m.len() != horizon + 1 {
                            return Err(Error::invalid(
                                field,
                                format!("expected {} waypoints, got {}", horizon + 1, positions_m.len()),
                            ));
                        }
                        positions_m.iter().map(|p| Vec3::from_f64(*p)).collect()
                    }
                };
                tracks.push(AnchorTrack {
                    vertex_index: v,
                    waypoints: waypoints.into_iter().map(|p| Vec3::from_f64(p.0)).collect(),
                });
            }
        }
        Ok(tracks)
    }

    /// Substeps per frame: the configured value, checked against the stability bound,
    /// or the smallest count meeting the bound (at least [`MIN_SUBSTEPS_PER_FRAME`]).
    pub fn resolve_substeps<T: Real>(&self, mesh: &TriMesh<T>, material: &Material<T>) -> Result<usize> {
        let range = self.range()?;
        let dt_max = stable_substep(
            mesh,
            material,
            !self.obstacles.is_empty(),
            T::lit(range.lo),
            T::lit(range.hi),
        )
        .as_f64();
        let needed = (self.frame_dt_s / dt_max).ceil() as usize;
        match self.substeps_per_frame {
            None => Ok(needed.max(MIN_SUBSTEPS_PER_FRAME)),
            Some(n) if n >= needed && n > 0 => Ok(n),
            Some(n) => Err(Error::invalid(
                "substeps_per_frame",
                format!("{n} substeps give dt above the stability bound {dt_max:.3e} s; need at least {needed}"),
            )),
        }
    }

    pub fn compile<T: Real>(&self) -> Result<CompiledScenario<T>> {
        if self.horizon_frames == 0 {
            return Err(Error::invalid("horizon_frames", "must be at least 1"));
        }
        if !(self.frame_dt_s > 0.0 && self.frame_dt_s.is_finite()) {
            return Err(Error::invalid("frame_dt_s", "must be positive"));
        }
        if self.points_per_frame == 0 {
            return Err(Error::invalid("points_per_frame", "must be at least 1"));
        }
        if self.loss_frames.is_empty() {
            return Err(Error::invalid("loss_frames", "empty"));
        }
        if !(self.default_learning_rate > 0.0) {
            return Err(Error::invalid("default_learning_rate", "must be positive"));
        }
        if self.default_max_iterations == 0 {
            return Err(Error::invalid("default_max_iterations", "must be at least 1"));
        }
        if self.default_loss_threshold.is_some_and(|t| !(t > 0.0)) {
            return Err(Error::invalid("default_loss_threshold", "must be positive"));
        }
        let mut loss_frames = self.loss_frames.clone();
        loss_frames.sort_unstable();
        loss_frames.dedup();
        let range = self.range()?;
        let mesh = self.build_mesh::<T>().map_err(|e| Error::invalid("mesh", e.to_string()))?;
        let material = self.material.to_material::<T>();
        material.validate().map_err(|e| Error::invalid("material", e.to_string()))?;
        let obstacles = self.obstacles::<T>()?;
        let anchors = self.anchor_tracks(&mesh)?;
        let substeps = self.resolve_substeps(&mesh, &material)?;
        let face_mask = match self.occlusion {
            OcclusionRule::All => None,
            ref rule => Some(occlusion_subset(&mesh, rule).map_err(|e| Error::invalid("occlusion", e.to_string()))?),
        };
        let scene = Scene::new(
            mesh,
            material,
            anchors,
            obstacles,
            self.horizon_frames,
            substeps,
            T::lit(self.frame_dt_s),
            loss_frames,
        )?;
        Ok(CompiledScenario {
            scene,
            observation: Observation {
                points_per_frame: self.points_per_frame,
                face_mask,
            },
            range: ParamRange {
                lo: T::lit(range.lo),
                hi: T::lit(range.hi),
            },
        })
    }

    /// Copy with at most `resolution` vertices per grid side and horizon `horizon`.
    ///
    /// Spacing is kept, so the cloth shrinks; anchor offsets and obstacle geometry shrink
    /// about the grid centre by the same factor. Loss frames keep their relative position
    /// in the horizon and the sample count is capped at 400.
    pub fn downscaled(&self, resolution: usize, horizon: usize) -> Result<ScenarioSpec> {
        if resolution < 2 {
            return Err(Error::invalid("resolution", "must be at least 2"));
        }
        let mut s = self.clone();
        let old = self.mesh.nx.max(self.mesh.ny);
        s.mesh.nx = s.mesh.nx.min(resolution);
        s.mesh.ny = s.mesh.ny.min(resolution);
        let factor = (s.mesh.nx.max(s.mesh.ny) - 1) as f64 / (old - 1) as f64;
        let c = Vec3::from_f64(self.mesh.center_m);
        let about = |p: [f64; 3]| (c + (Vec3::from_f64(p) - c) * factor).0;
        for a in &mut s.anchors {
            match &mut a.motion {
                AnchorMotion::Translate { offset_m, .. } => *offset_m = (Vec3::from_f64(*offset_m) * factor).0,
                AnchorMotion::ArcToVertex { clearance_m, .. } => *clearance_m *= factor,
                AnchorMotion::Waypoints { .. } => {
                    return Err(Error::invalid("anchors", "explicit waypoints cannot be rescaled"));
                }
            }
        }
        for o in &mut s.obstacles {
            match o {
                ObstacleSpec::Plane { point_m, .. } => *point_m = about(*point_m),
                ObstacleSpec::Cylinder {
                    center_m,
                    radius_m,
                    half_length_m,
                    ..
                } => {
                    *center_m = about(*center_m);
                    *radius_m *= factor;
                    *half_length_m *= factor;
                }
            }
        }
        s.horizon_frames = horizon;
        s.substeps_per_frame = None;
        s.points_per_frame = s.points_per_frame.min(400);
        for f in &mut s.loss_frames {
            *f = ((*f as f64) * horizon as f64 / self.horizon_frames as f64).round() as usize;
        }
        s.validate()?;
        Ok(s)
    }
}

fn base_spec(name: &str) -> ScenarioSpec {
    ScenarioSpec {
        name: name.to_string(),
        mesh: GridRecipe {
            nx: 7,
            ny: 7,
            spacing_m: 0.05,
            center_m: [0.0, 0.0, 0.0],
            normal: [0.0, 0.0, 1.0],
            rotation_rad: 0.0,
        },
        material: MaterialSpec::default(),
        anchors: Vec::new(),
        obstacles: vec![ObstacleSpec::Plane {
            point_m: [0.0, 0.0, 0.0],
            normal: [0.0, 0.0, 1.0],
            friction: 1.0,
        }],
        horizon_frames: 25,
        frame_dt_s: 0.1,
        substeps_per_frame: None,
        loss_frames: vec![25],
        occlusion: OcclusionRule::All,
        points_per_frame: 3500,
        param_range: [0.1, 10.0],
        default_learning_rate: 0.2,
        default_loss_threshold: None,
        default_max_iterations: 50,
    }
}

/// 7×7 cloth flat on the floor, one corner lifted straight up.
pub fn make_lift() -> ScenarioSpec {
    let mut s = base_spec("lift");
    s.anchors.push(AnchorRecipe {
        vertices: VertexSelector::Grid([-1, -1]),
        motion: AnchorMotion::Translate {
            offset_m: [0.0, 0.0, 0.5],
            easing: Easing::Smoothstep,
        },
    });
    s
}

/// 7×7 cloth on the floor in diamond orientation; the top corner is carried over the
/// cloth towards the bottom corner. Only the upper half is observed.
pub fn make_fold() -> ScenarioSpec {
    let mut s = base_spec("fold");
    s.mesh.rotation_rad = std::f64::consts::FRAC_PI_4;
    s.anchors.push(AnchorRecipe {
        vertices: VertexSelector::Grid([-1, -1]),
        motion: AnchorMotion::ArcToVertex {
            vertex: VertexSelector::Grid([0, 0]),
            clearance_m: 0.02,
            easing: Easing::Smoothstep,
        },
    });
    s.loss_frames = vec![s.horizon_frames / 2];
    s.occlusion = OcclusionRule::UpperHalf { axis: 1 };
    s.obstacles[0] = ObstacleSpec::Plane {
        point_m: [0.0, 0.0, 0.0],
        normal: [0.0, 0.0, 1.0],
        friction: 0.2,
    };
    s
}

/// Vertical strip held at both short edges and pulled sideways into a pole.
pub fn make_band_stretch() -> ScenarioSpec {
    let mut s = base_spec("band_stretch");
    s.mesh = GridRecipe {
        nx: 11,
        ny: 3,
        spacing_m: 0.05,
        center_m: [0.0, 0.0, 0.0],
        normal: [0.0, 1.0, 0.0],
        rotation_rad: 0.0,
    };
    for column in [0, -1] {
        s.anchors.push(AnchorRecipe {
            vertices: VertexSelector::Column(column),
            motion: AnchorMotion::Translate {
                offset_m: [0.0, 0.2, 0.0],
                easing: Easing::Smoothstep,
            },
        });
    }
    s.obstacles = vec![ObstacleSpec::Cylinder {
        center_m: [0.0, 0.08, 0.0],
        axis: [0.0, 0.0, 1.0],
        radius_m: 0.04,
        half_length_m: 0.3,
        friction: 0.1,
        target_points: 1000,
    }];
    s.default_learning_rate = 0.4;
    s.default_loss_threshold = Some(5e-4);
    s
}

pub fn builtin(name: &str) -> Option<ScenarioSpec> {
    match name {
        "lift" => Some(make_lift()),
        "fold" => Some(make_fold()),
        "band_stretch" | "band-stretch" => Some(make_band_stretch()),
        _ => None,
    }
}

pub const BUILTIN_NAMES: [&str; 3] = ["lift", "fold", "band_stretch"];

/// Target augmentation. Dropout removes a fresh random face subset every frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Augmentation {
    pub noise_sigma_m: f64,
    pub dropout_fraction: f64,
}

impl Augmentation {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma_m >= 0.0 && self.noise_sigma_m.is_finite()) {
            return Err(Error::invalid("noise", "sigma must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.dropout_fraction) {
            return Err(Error::invalid("dropout", "fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Everything needed to regenerate a target sequence exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetMeta {
    pub scenario: String,
    pub horizon_frames: usize,
    pub points_per_frame: usize,
    /// `(w_stiff, w_mass)` for synthetic targets.
    pub true_params: Option<[f64; 2]>,
    pub seed: Option<u64>,
    pub augmentation: Augmentation,
    /// Obstacle surface points appended after the cloth points of every frame.
    pub obstacle_points: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetSequence<T> {
    /// `horizon_frames + 1` non-empty point sets.
    pub frames: Vec<Vec<Vec3<T>>>,
    pub meta: TargetMeta,
}

impl<T: Real> TargetSequence<T> {
    pub fn validate(&self) -> Result<()> {
        if self.frames.len() != self.meta.horizon_frames + 1 {
            return Err(Error::invalid(
                "target",
                format!("{} frames for horizon {}", self.frames.len(), self.meta.horizon_frames),
            ));
        }
        if let Some(f) = self.frames.iter().position(|f| f.is_empty()) {
            return Err(Error::invalid("target", format!("frame {f} is empty")));
        }
        Ok(())
    }
}

/// Rolls the scenario out at `true_params` and samples every frame.
///
/// Cloth points come first in each frame, then the obstacle surface points
/// (identical in every frame since obstacles are static).
pub fn generate_target<T: Real>(
    spec: &ScenarioSpec,
    true_params: Multipliers<T>,
    seed: u64,
    augment: Augmentation,
) -> Result<TargetSequence<T>> {
    augment.validate()?;
    let compiled = spec.compile::<T>()?;
    let range = compiled.range;
    for (name, w) in [("w_stiff", true_params.w_stiff), ("w_mass", true_params.w_mass)] {
        if !range.contains(w) {
            return Err(Error::invalid(
                name,
                format!("{w} outside [{}, {}]", range.lo, range.hi),
            ));
        }
    }
    let scene = &compiled.scene;
    let traj = scene.rollout(&scene.params(true_params.w_stiff, true_params.w_mass))?;

    let mut obstacle_cloud = Vec::new();
    for (k, o) in spec.obstacles.iter().enumerate() {
        if let ObstacleSpec::Cylinder {
            center_m,
            axis,
            radius_m,
            half_length_m,
            target_points,
            ..
        } = o
        {
            obstacle_cloud.extend(sample_cylinder_surface(
                Vec3::from_f64(*center_m),
                Vec3::from_f64(unit(*axis, "obstacle axis")?.0),
                T::lit(*radius_m),
                T::lit(*half_length_m),
                *target_points,
                derive_seed(seed, &[3, k as u64]),
            ));
        }
    }

    let visible = compiled.observation.face_mask.clone();
    let mut frames = Vec::with_capacity(spec.horizon_frames + 1);
    for f in 0..=spec.horizon_frames {
        let f64f = f as u64;
        let mask = if augment.dropout_fraction > 0.0 {
            let kept = occlusion_subset(
                &scene.mesh,
                &OcclusionRule::RandomDrop {
                    fraction: augment.dropout_fraction,
                    seed: derive_seed(seed, &[2, f64f]),
                },
            )?;
            let kept: Vec<usize> = match &visible {
                Some(v) => kept.into_iter().filter(|k| v.binary_search(k).is_ok()).collect(),
                None => kept,
            };
            // keep at least one visible face
            Some(if kept.is_empty() {
                visible.clone().unwrap_or_else(|| (0..scene.mesh.faces.len()).collect())[..1].to_vec()
            } else {
                kept
            })
        } else {
            visible.clone()
        };
        let cloud = sample_surface(
            &scene.mesh,
            traj.frame(f),
            spec.points_per_frame,
            mask.as_deref(),
            derive_seed(seed, &[0, f64f]),
        )?;
        let cloud = add_gaussian_noise(&cloud, T::lit(augment.noise_sigma_m), derive_seed(seed, &[1, f64f]))?;
        let mut points = cloud.points;
        points.extend_from_slice(&obstacle_cloud);
        frames.push(points);
    }
    Ok(TargetSequence {
        frames,
        meta: TargetMeta {
            scenario: spec.name.clone(),
            horizon_frames: spec.horizon_frames,
            points_per_frame: spec.points_per_frame,
            true_params: Some([true_params.w_stiff.as_f64(), true_params.w_mass.as_f64()]),
            seed: Some(seed),
            augmentation: augment,
            obstacle_points: obstacle_cloud.len(),
        },
    })
}

/// Builds the optimisation problem for a scenario and a target sequence.
pub fn alignment_problem<T: Real>(spec: &ScenarioSpec, target: &TargetSequence<T>) -> Result<AlignmentProblem<T>> {
    target.validate()?;
    if target.frames.len() != spec.horizon_frames + 1 {
        return Err(Error::invalid(
            "target",
            format!(
                "{} frames but scenario '{}' has horizon {}",
                target.frames.len(),
                spec.name,
                spec.horizon_frames
            ),
        ));
    }
    let compiled = spec.compile::<T>()?;
    let loss_frames = compiled.scene.loss_frames.clone();
    AlignmentProblem::new(&compiled.scene, compiled.observation, &target.frames, &loss_frames)
}

/// Loss of `params` against `target`: rollout, sampling at the loss frames with
/// `sampling_seed`, unidirectional Chamfer summed over loss frames.
pub fn evaluate_alignment<T: Real>(
    spec: &ScenarioSpec,
    params: Multipliers<T>,
    target: &TargetSequence<T>,
    sampling_seed: u64,
) -> Result<T> {
    let range = spec.range()?;
    for (name, w) in [("w_stiff", params.w_stiff), ("w_mass", params.w_mass)] {
        if !(w.as_f64() >= range.lo && w.as_f64() <= range.hi) {
            return Err(Error::invalid(name, format!("{w} outside [{}, {}]", range.lo, range.hi)));
        }
    }
    alignment_problem(spec, target)?.loss(params, sampling_seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub train: usize,
    pub test: usize,
    /// Uniform sampling range for both multipliers.
    pub param_range: [f64; 2],
    #[serde(default)]
    pub augmentation: Augmentation,
    pub seed: u64,
    /// Redraws allowed per example after a diverged rollout.
    pub max_retries: usize,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train == 0 || self.test == 0 {
            return Err(Error::invalid("dataset counts", "train and test must both be at least 1"));
        }
        ParamRange::new(self.param_range[0], self.param_range[1])?;
        self.augmentation.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetLabel {
    pub id: String,
    pub split: String,
    pub w_stiff: f64,
    pub w_mass: f64,
}

/// Draws the parameters and target seed of example `index`, attempt `attempt`.
pub fn dataset_draw(dspec: &DatasetSpec, index: usize, attempt: usize) -> (Multipliers<f64>, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(dspec.seed, &[index as u64, attempt as u64]));
    let [lo, hi] = dspec.param_range;
    let w_stiff = rng.random_range(lo..=hi);
    let w_mass = rng.random_range(lo..=hi);
    (Multipliers { w_stiff, w_mass }, rng.random())
}

/// Generates `train + test` labelled target sequences under `out`, in parallel.
///
/// Example `k` lives in `example_{k:05}`; `labels.csv` maps ids to parameters.
/// A diverged rollout is redrawn up to `max_retries` times before the whole run fails.
pub fn generate_dataset(spec: &ScenarioSpec, dspec: &DatasetSpec, out: &Path) -> Result<Vec<DatasetLabel>> {
    dspec.validate()?;
    spec.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let total = dspec.train + dspec.test;
    let labels = (0..total)
        .into_par_iter()
        .map(|k| {
            let id = format!("example_{k:05}");
            let split = if k < dspec.train { "train" } else { "test" };
            for attempt in 0..=dspec.max_retries {
                let (params, seed) = dataset_draw(dspec, k, attempt);
                match generate_target(spec, params, seed, dspec.augmentation) {
                    Ok(target) => {
                        crate::io::write_target_dir(&out.join(&id), &target)?;
                        return Ok(DatasetLabel {
                            id,
                            split: split.to_string(),
                            w_stiff: params.w_stiff,
                            w_mass: params.w_mass,
                        });
                    }
                    Err(Error::Diverged { substep, .. }) => {
                        log::warn!("{id}: rollout diverged at substep {substep}, redrawing (attempt {attempt})");
                    }
                    Err(e) => return Err(e),
                }
            }
            Err(Error::invalid(
                "dataset",
                format!("{id}: every draw diverged after {} retries", dspec.max_retries),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    crate::io::write_labels(&out.join("labels.csv"), &labels)?;
    Ok(labels)
}
