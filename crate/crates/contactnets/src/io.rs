//! File formats: trajectory JSON, model parameter files, and training
//! checkpoints. Floats are written with 17 significant digits so every
//! value round-trips bit-exactly.

use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::MlpSpec;
use crate::dynamics::{RigidBodyParams, State, Trajectory};
use crate::geometry::{ContactModel, DeepParams, PolytopeParams};
use crate::loss::LossWeights;
use crate::training::{E2EBaselineParams, OptimConfig, TrainHistory};

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("state row {0} has {1} entries, expected 13")]
    BadStateRow(usize, usize),
    #[error("trajectory has no states")]
    EmptyTrajectory,
    #[error("non-positive dt {0}")]
    BadDt(f64),
    #[error("checkpoint holds a {0} model, expected {1}")]
    WrongModelKind(&'static str, &'static str),
}

fn fmt_f64(x: f64) -> String {
    format!("{:.16e}", x)
}

/// Serialize a trajectory as `{dt, states: [[p(3), quat(4) (w,x,y,z),
/// v_lin(3), omega(3)], ...]}`.
pub fn trajectory_to_json(t: &Trajectory) -> String {
    let mut s = String::new();
    s.push_str("{\n  \"dt\": ");
    s.push_str(&fmt_f64(t.dt));
    s.push_str(",\n  \"states\": [\n");
    for (i, st) in t.states.iter().enumerate() {
        let ([px, py, pz], [qw, qx, qy, qz]) = st.configuration();
        let row = [
            px, py, pz, qw, qx, qy, qz, st.v[0], st.v[1], st.v[2], st.v[3], st.v[4], st.v[5],
        ];
        s.push_str("    [");
        for (k, v) in row.iter().enumerate() {
            if k > 0 {
                s.push_str(", ");
            }
            s.push_str(&fmt_f64(*v));
        }
        s.push(']');
        if i + 1 < t.states.len() {
            s.push(',');
        }
        s.push('\n');
    }
    s.push_str("  ]\n}\n");
    s
}

#[derive(Deserialize)]
struct TrajectoryFile {
    dt: f64,
    states: Vec<Vec<f64>>,
}

pub fn trajectory_from_json(text: &str) -> Result<Trajectory, IoError> {
    let file: TrajectoryFile = serde_json::from_str(text)?;
    if file.dt <= 0.0 {
        return Err(IoError::BadDt(file.dt));
    }
    if file.states.is_empty() {
        return Err(IoError::EmptyTrajectory);
    }
    let mut states = Vec::with_capacity(file.states.len());
    for (i, row) in file.states.iter().enumerate() {
        if row.len() != 13 {
            return Err(IoError::BadStateRow(i, row.len()));
        }
        // new_unchecked keeps the stored coordinates bit-exact; states are
        // normalized before saving
        let quat = UnitQuaternion::new_unchecked(Quaternion::new(row[3], row[4], row[5], row[6]));
        states.push(State::new(
            Vector3::new(row[0], row[1], row[2]),
            quat,
            Vector6::from_column_slice(&row[7..13]),
        ));
    }
    Ok(Trajectory {
        dt: file.dt,
        states,
    })
}

pub fn save_trajectory(path: &Path, t: &Trajectory) -> Result<(), IoError> {
    std::fs::write(path, trajectory_to_json(t))?;
    Ok(())
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory, IoError> {
    trajectory_from_json(&std::fs::read_to_string(path)?)
}

/// On-disk model parameters, tagged by `model_type`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "model_type", rename_all = "lowercase")]
pub enum ModelFile {
    Polytope {
        vertices: Vec<[f64; 3]>,
        normal: [f64; 3],
        offset: f64,
        friction_scale: f64,
    },
    Deep {
        vertices: Vec<[f64; 3]>,
        normal: [f64; 3],
        offset: f64,
        friction_scale: f64,
        net_n: MlpSpec,
        net_t: MlpSpec,
        net_scale: f64,
    },
    E2e {
        mlp: MlpSpec,
        input_mean: Vec<f64>,
        input_std: Vec<f64>,
    },
}

fn poly_fields(p: &PolytopeParams) -> (Vec<[f64; 3]>, [f64; 3], f64, f64) {
    (
        p.vertices.iter().map(|v| [v.x, v.y, v.z]).collect(),
        [p.normal.x, p.normal.y, p.normal.z],
        p.offset,
        p.friction_scale,
    )
}

fn poly_params(
    vertices: &[[f64; 3]],
    normal: &[f64; 3],
    offset: f64,
    friction_scale: f64,
) -> PolytopeParams {
    PolytopeParams {
        vertices: vertices
            .iter()
            .map(|v| Vector3::new(v[0], v[1], v[2]))
            .collect(),
        normal: Vector3::new(normal[0], normal[1], normal[2]),
        offset,
        friction_scale,
    }
}

impl ModelFile {
    pub fn from_contact_model(model: &ContactModel) -> ModelFile {
        match model {
            ContactModel::Polytope(p) => {
                let (vertices, normal, offset, friction_scale) = poly_fields(p);
                ModelFile::Polytope {
                    vertices,
                    normal,
                    offset,
                    friction_scale,
                }
            }
            ContactModel::Deep(d) => {
                let (vertices, normal, offset, friction_scale) = poly_fields(&d.poly);
                ModelFile::Deep {
                    vertices,
                    normal,
                    offset,
                    friction_scale,
                    net_n: d.net_n.clone(),
                    net_t: d.net_t.clone(),
                    net_scale: d.net_scale,
                }
            }
        }
    }

    pub fn from_baseline(params: &E2EBaselineParams) -> ModelFile {
        ModelFile::E2e {
            mlp: params.mlp.clone(),
            input_mean: params.input_mean.clone(),
            input_std: params.input_std.clone(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ModelFile::Polytope { .. } => "polytope",
            ModelFile::Deep { .. } => "deep",
            ModelFile::E2e { .. } => "e2e",
        }
    }

    pub fn to_contact_model(&self) -> Result<ContactModel, IoError> {
        match self {
            ModelFile::Polytope {
                vertices,
                normal,
                offset,
                friction_scale,
            } => Ok(ContactModel::Polytope(poly_params(
                vertices,
                normal,
                *offset,
                *friction_scale,
            ))),
            ModelFile::Deep {
                vertices,
                normal,
                offset,
                friction_scale,
                net_n,
                net_t,
                net_scale,
            } => Ok(ContactModel::Deep(DeepParams {
                poly: poly_params(vertices, normal, *offset, *friction_scale),
                net_n: net_n.clone(),
                net_t: net_t.clone(),
                net_scale: *net_scale,
            })),
            ModelFile::E2e { .. } => Err(IoError::WrongModelKind("e2e", "polytope or deep")),
        }
    }

    pub fn to_baseline(&self) -> Result<E2EBaselineParams, IoError> {
        match self {
            ModelFile::E2e {
                mlp,
                input_mean,
                input_std,
            } => Ok(E2EBaselineParams {
                mlp: mlp.clone(),
                input_mean: input_mean.clone(),
                input_std: input_std.clone(),
            }),
            other => Err(IoError::WrongModelKind(other.kind(), "e2e")),
        }
    }
}

pub fn save_model(path: &Path, model: &ModelFile) -> Result<(), IoError> {
    std::fs::write(path, serde_json::to_string_pretty(model)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelFile, IoError> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Training checkpoint: learned parameters plus everything needed to
/// evaluate or resume them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: ModelFile,
    pub body: RigidBodyParams,
    pub optim: OptimConfig,
    pub loss_weights: Option<LossWeights>,
    pub friction_dirs: usize,
    pub dt: f64,
    pub seed: u64,
    pub history: TrainHistory,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), IoError> {
    std::fs::write(path, serde_json::to_string_pretty(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, IoError> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}
