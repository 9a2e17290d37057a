//! CSV and JSON artifacts. Floats are written in their shortest
//! round-trip form, so reading a file back gives the same bits.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ddp::SolveReport;
use crate::diagnostics::{ClosenessStudy, OrderStudy};
use crate::diff::Quadraticization;
use crate::error::{Error, Result};
use crate::game::Trajectory;
use crate::newton::DenseNewtonSystem;

pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Writes `bytes` to a temporary file next to `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .map_err(|e| Error::Io(e.error.to_string()))?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn csv_bytes(header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(header).map_err(io)?;
    for row in rows {
        w.write_record(&row).map_err(io)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.to_string()))
}

pub fn trajectory_csv(traj: &Trajectory) -> Result<Vec<u8>> {
    let nx = traj.states.first().map_or(0, |x| x.len());
    let nu = traj.inputs.first().map_or(0, |u| u.len());
    let header: Vec<String> = std::iter::once("k".to_string())
        .chain((0..nx).map(|i| format!("x_{i}")))
        .chain((0..nu).map(|i| format!("u_{i}")))
        .collect();
    let rows = traj
        .states
        .iter()
        .zip(&traj.inputs)
        .enumerate()
        .map(|(k, (x, u))| {
            std::iter::once(k.to_string())
                .chain(x.iter().chain(u.iter()).map(|v| fmt_f64(*v)))
                .collect()
        });
    csv_bytes(&header, rows)
}

pub fn read_trajectory_csv(text: &str) -> Result<Trajectory> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r
        .headers()
        .map_err(|e| Error::Parse(e.to_string()))?
        .clone();
    let nx = headers.iter().filter(|h| h.starts_with("x_")).count();
    let nu = headers.iter().filter(|h| h.starts_with("u_")).count();
    if headers.len() != 1 + nx + nu || headers.get(0) != Some("k") {
        return Err(Error::Parse(format!(
            "unexpected trajectory header {headers:?}"
        )));
    }
    let mut states = Vec::new();
    let mut inputs = Vec::new();
    for (row, record) in r.records().enumerate() {
        let record = record.map_err(|e| Error::Parse(e.to_string()))?;
        let values: Vec<f64> = record
            .iter()
            .skip(1)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("row {row}: {e}")))
            })
            .collect::<Result<_>>()?;
        states.push(DVector::from_column_slice(&values[..nx]));
        inputs.push(DVector::from_column_slice(&values[nx..]));
    }
    Ok(Trajectory { states, inputs })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryJson {
    pub problem_id: String,
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
}

impl TrajectoryJson {
    pub fn new(problem_id: &str, traj: &Trajectory) -> Self {
        let rows = |v: &[DVector<f64>]| v.iter().map(|x| x.as_slice().to_vec()).collect();
        Self {
            problem_id: problem_id.to_string(),
            states: rows(&traj.states),
            inputs: rows(&traj.inputs),
        }
    }

    pub fn trajectory(&self) -> Trajectory {
        let vecs = |v: &[Vec<f64>]| v.iter().map(|x| DVector::from_column_slice(x)).collect();
        Trajectory {
            states: vecs(&self.states),
            inputs: vecs(&self.inputs),
        }
    }
}

pub fn report_csv(report: &SolveReport) -> Result<Vec<u8>> {
    let players = report.initial.costs.len();
    let header: Vec<String> = ["iter", "residual", "step_norm", "lambda", "accepted"]
        .iter()
        .map(|s| s.to_string())
        .chain((1..=players).map(|n| format!("J_{n}")))
        .collect();
    let rows = report.all_records().map(|r| {
        [
            r.iter.to_string(),
            fmt_f64(r.residual),
            fmt_f64(r.step_norm),
            fmt_f64(r.lambda),
            r.accepted.to_string(),
        ]
        .into_iter()
        .chain(r.costs.iter().map(|c| fmt_f64(*c)))
        .collect()
    });
    csv_bytes(&header, rows)
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[derive(Debug, Serialize)]
struct StageDump {
    stage: usize,
    has_dynamics: bool,
    a: Option<Vec<Vec<f64>>>,
    b: Option<Vec<Vec<f64>>>,
    g: Option<Vec<Vec<Vec<f64>>>>,
    m: Vec<Vec<Vec<f64>>>,
}

/// Per-stage derivative matrices as row-major nested arrays.
pub fn derivatives_json(quads: &Quadraticization) -> serde_json::Value {
    let stages: Vec<StageDump> = quads
        .stages
        .iter()
        .map(|st| StageDump {
            stage: st.stage,
            has_dynamics: st.dynamics.is_some(),
            a: st.dynamics.as_ref().map(|d| rows_of(&d.a)),
            b: st.dynamics.as_ref().map(|d| rows_of(&d.b)),
            g: st
                .dynamics
                .as_ref()
                .map(|d| d.g.iter().map(rows_of).collect()),
            m: st.m.iter().map(rows_of).collect(),
        })
        .collect();
    serde_json::json!({
        "state_dim": quads.dims.state_dim,
        "input_dims": quads.dims.input_dims,
        "stages": stages,
    })
}

pub fn newton_json(system: &DenseNewtonSystem) -> serde_json::Value {
    serde_json::json!({
        "jacobian": rows_of(&system.jacobian),
        "rhs": system.rhs.as_slice(),
        "solution": system.solution.as_slice(),
        "relative_residual": system.relative_residual,
    })
}

pub fn closeness_csv(study: &ClosenessStudy) -> Result<Vec<u8>> {
    let header: Vec<String> = ["epsilon", "direction_id", "quantity", "value"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows = study.records.iter().map(|r| {
        vec![
            fmt_f64(r.epsilon),
            r.direction_id.to_string(),
            r.quantity.name().to_string(),
            fmt_f64(r.value),
        ]
    });
    csv_bytes(&header, rows)
}

/// `<quantity>_slope` keys (null when no fit was made) alongside the full fits.
pub fn slopes_json(study: &ClosenessStudy) -> serde_json::Value {
    let mut out = serde_json::Map::new();
    for (name, fit) in &study.slopes {
        out.insert(
            format!("{name}_slope"),
            fit.slope()
                .map_or(serde_json::Value::Null, |s| serde_json::json!(s)),
        );
    }
    let exactly_equal: Vec<&str> = study
        .slopes
        .iter()
        .filter(|(_, f)| matches!(f, crate::diagnostics::SlopeFit::ExactlyEqual))
        .map(|(n, _)| *n)
        .collect();
    out.insert("exactly_equal".into(), serde_json::json!(exactly_equal));
    out.insert("fits".into(), serde_json::json!(study.slopes));
    out.insert("epsilons".into(), serde_json::json!(study.epsilons));
    out.insert("directions".into(), serde_json::json!(study.directions));
    out.insert(
        "equilibrium_residual".into(),
        serde_json::json!(study.equilibrium_residual),
    );
    out.insert("dropped".into(), serde_json::json!(study.dropped));
    serde_json::Value::Object(out)
}

pub fn order_json(study: &OrderStudy) -> serde_json::Value {
    let side = |r: &std::result::Result<crate::diagnostics::ConvergenceOrderEstimate, String>| {
        match r {
            Ok(est) => {
                serde_json::json!({ "order": est.order, "pairwise": est.pairwise, "window": est.window, "cutoff": est.cutoff })
            }
            Err(e) => serde_json::json!({ "order": null, "error": e }),
        }
    };
    serde_json::json!({
        "equilibrium_residual": study.equilibrium_residual,
        "basin_entry": study.basin_entry,
        "ddp": side(&study.ddp),
        "newton": side(&study.newton),
    })
}

/// `method,iter,error`: distance to the equilibrium per iterate, DDP run first.
pub fn iterate_errors_csv(study: &OrderStudy) -> Result<Vec<u8>> {
    let header: Vec<String> = ["method", "iter", "error"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let ddp = study
        .ddp_errors
        .iter()
        .enumerate()
        .map(|(i, e)| vec!["ddp".to_string(), i.to_string(), fmt_f64(*e)]);
    let newton = study.newton_errors.iter().enumerate().map(|(i, e)| {
        vec![
            "newton".to_string(),
            (study.basin_entry + i).to_string(),
            fmt_f64(*e),
        ]
    });
    csv_bytes(&header, ddp.chain(newton))
}
