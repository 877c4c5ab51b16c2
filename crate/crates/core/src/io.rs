//! File formats: `.xyz` point frames, target directories, PLY meshes, JSON documents
//! and the CSV outputs.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::EstimateResult;
use crate::geom::Vec3;
use crate::mesh::TriMesh;
use crate::real::Real;
use crate::scenarios::{DatasetLabel, ScenarioSpec, TargetMeta, TargetSequence};
use crate::sim::Trajectory;

pub const FORMAT_VERSION: u32 = 1;

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

/// One point per line, `x y z`, nine significant digits.
pub fn write_xyz<T: Real>(path: &Path, points: &[Vec3<T>]) -> Result<()> {
    let mut w = create(path)?;
    for p in points {
        let [x, y, z] = p.to_f64();
        writeln!(w, "{x:.8e} {y:.8e} {z:.8e}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_xyz<T: Real>(path: &Path) -> Result<Vec<Vec3<T>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut points = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let vals = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| parse_err(format!("'{t}': {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != 3 {
            return Err(parse_err(format!("expected 3 values, found {}", vals.len())));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(parse_err("non-finite coordinate".into()));
        }
        points.push(Vec3::from_f64([vals[0], vals[1], vals[2]]));
    }
    Ok(points)
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn read_json<D: DeserializeOwned>(path: &Path) -> Result<D> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads and validates a scenario config.
pub fn load_scenario(path: &Path) -> Result<ScenarioSpec> {
    let spec: ScenarioSpec = read_json(path)?;
    spec.validate()?;
    Ok(spec)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetManifest {
    pub format_version: u32,
    #[serde(flatten)]
    pub meta: TargetMeta,
    pub frame_files: Vec<String>,
    /// How the directory was produced, when written by a command.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<RunManifest>,
}

pub fn frame_file_name(frame: usize) -> String {
    format!("frame_{frame:04}.xyz")
}

/// Writes `manifest.json` and one `.xyz` file per frame.
pub fn write_target_dir<T: Real>(dir: &Path, target: &TargetSequence<T>) -> Result<()> {
    write_target_dir_with_run(dir, target, None)
}

pub fn write_target_dir_with_run<T: Real>(dir: &Path, target: &TargetSequence<T>, run: Option<&RunManifest>) -> Result<()> {
    target.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut frame_files = Vec::with_capacity(target.frames.len());
    for (f, pts) in target.frames.iter().enumerate() {
        let name = frame_file_name(f);
        write_xyz(&dir.join(&name), pts)?;
        frame_files.push(name);
    }
    write_json(
        &dir.join("manifest.json"),
        &TargetManifest {
            format_version: FORMAT_VERSION,
            meta: target.meta.clone(),
            frame_files,
            run: run.cloned(),
        },
    )
}

pub fn read_target_dir<T: Real>(dir: &Path) -> Result<TargetSequence<T>> {
    let manifest: TargetManifest = read_json(&dir.join("manifest.json"))?;
    if manifest.frame_files.len() != manifest.meta.horizon_frames + 1 {
        return Err(Error::invalid(
            "target manifest",
            format!(
                "{} frame files listed for horizon {}",
                manifest.frame_files.len(),
                manifest.meta.horizon_frames
            ),
        ));
    }
    let frames = manifest
        .frame_files
        .iter()
        .map(|name| read_xyz(&dir.join(name)))
        .collect::<Result<Vec<_>>>()?;
    let target = TargetSequence {
        frames,
        meta: manifest.meta,
    };
    target.validate()?;
    Ok(target)
}

/// ASCII PLY with vertex positions and triangle faces.
pub fn write_ply<T: Real>(path: &Path, mesh: &TriMesh<T>, positions: &[Vec3<T>]) -> Result<()> {
    if positions.len() != mesh.vertex_count() {
        return Err(Error::invalid("positions", "length does not match mesh"));
    }
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    write!(
        w,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nelement face {}\nproperty list uchar int vertex_indices\nend_header\n",
        positions.len(),
        mesh.faces.len()
    )
    .map_err(io)?;
    for p in positions {
        let [x, y, z] = p.to_f64();
        writeln!(w, "{x:.8e} {y:.8e} {z:.8e}").map_err(io)?;
    }
    for [a, b, c] in &mesh.faces {
        writeln!(w, "3 {a} {b} {c}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// One PLY per frame, `frame_0000.ply` …, in `dir`.
pub fn write_trajectory_ply<T: Real>(dir: &Path, mesh: &TriMesh<T>, traj: &Trajectory<T>) -> Result<()> {
    for f in 0..traj.frame_count() {
        write_ply(&dir.join(format!("frame_{f:04}.ply")), mesh, traj.frame(f))?;
    }
    Ok(())
}

pub fn write_labels(path: &Path, labels: &[DatasetLabel]) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_writer(create(path)?);
    for l in labels {
        w.serialize(l).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<Vec<DatasetLabel>> {
    let mut r = csv::Reader::from_path(path).map_err(|source| Error::Csv {
        path: path.to_path_buf(),
        source,
    })?;
    r.deserialize()
        .collect::<std::result::Result<Vec<DatasetLabel>, _>>()
        .map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationEntry {
    pub iteration: usize,
    pub s_stiff: f64,
    pub s_mass: f64,
    pub w_stiff: f64,
    pub w_mass: f64,
    /// `null` when the rollout diverged.
    pub loss: Option<f64>,
    pub grad_s_stiff: Option<f64>,
    pub grad_s_mass: Option<f64>,
    pub sampling_seed: u64,
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub best_w_stiff: f64,
    pub best_w_mass: f64,
    pub best_loss: Option<f64>,
    pub best_iteration: usize,
    pub termination: String,
    pub total_wall_clock_s: f64,
    pub history: Vec<IterationEntry>,
}

impl ResultsFile {
    pub fn from_result<T: Real>(r: &EstimateResult<T>) -> Self {
        let finite = |x: T| Some(x.as_f64()).filter(|v| v.is_finite());
        ResultsFile {
            best_w_stiff: r.best_params.w_stiff.as_f64(),
            best_w_mass: r.best_params.w_mass.as_f64(),
            best_loss: finite(r.best_loss),
            best_iteration: r.best_iteration,
            termination: r.termination.as_str().to_string(),
            total_wall_clock_s: r.history.iter().map(|h| h.wall_clock_s).sum(),
            history: r
                .history
                .iter()
                .map(|h| IterationEntry {
                    iteration: h.iteration,
                    s_stiff: h.latent.s_stiff.as_f64(),
                    s_mass: h.latent.s_mass.as_f64(),
                    w_stiff: h.params.w_stiff.as_f64(),
                    w_mass: h.params.w_mass.as_f64(),
                    loss: finite(h.loss),
                    grad_s_stiff: h.gradient.map(|g| g.s_stiff.as_f64()),
                    grad_s_mass: h.gradient.map(|g| g.s_mass.as_f64()),
                    sampling_seed: h.sampling_seed,
                    wall_clock_s: h.wall_clock_s,
                })
                .collect(),
        }
    }
}

#[derive(Serialize)]
struct LossRow {
    iteration: usize,
    loss: f64,
    w_stiff: f64,
    w_mass: f64,
}

/// `iteration,loss,w_stiff,w_mass`; diverged iterations carry `inf`.
pub fn write_loss_curve<T: Real>(path: &Path, r: &EstimateResult<T>) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_writer(create(path)?);
    for h in &r.history {
        w.serialize(LossRow {
            iteration: h.iteration,
            loss: h.loss.as_f64(),
            w_stiff: h.params.w_stiff.as_f64(),
            w_mass: h.params.w_mass.as_f64(),
        })
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Provenance record written next to every command output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub arguments: Vec<String>,
    /// Fully resolved configuration (scenario plus command options).
    pub config: serde_json::Value,
    pub seeds: serde_json::Value,
    /// Seconds per phase, in execution order.
    pub timings_s: Vec<(String, f64)>,
}
