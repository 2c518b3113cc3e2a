//! Atomic file writes and the CSV files for plotting.

use std::f64::consts::TAU;
use std::io::Write;
use std::path::Path;

use cpcontrol::conformal::{PredictionRegion, RegionKind, ScoreNorm};
use cpcontrol::linalg::{spd_inverse, sym_sqrt};
use cpcontrol::relaxed::{ConeRule, TightenedConstraints};
use cpcontrol::{ConstraintSpec, Trajectory};
use nalgebra::{DMatrix, DVector};

use crate::error::{CliError, CliResult};

/// Vertices per closed polyline (the first vertex is repeated at the end).
pub const POLYLINE_POINTS: usize = 128;

/// Write through a temporary file in the target directory and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn finish(w: csv::Writer<Vec<u8>>) -> CliResult<Vec<u8>> {
    w.into_inner().map_err(|e| CliError::Internal(e.to_string()))
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Internal(e.to_string())
}

fn numbered(prefix: &str, count: usize) -> impl Iterator<Item = String> + '_ {
    (1..=count).map(move |i| format!("{prefix}{i}"))
}

/// `t,z1..zn,v1..vm`; the input columns are empty at `t = N`.
pub fn nominal_csv(z: &[DVector<f64>], v: &[DVector<f64>]) -> CliResult<Vec<u8>> {
    let n = z.first().map_or(0, |x| x.len());
    let m = v.first().map_or(0, |u| u.len());
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<String> = std::iter::once("t".to_string())
        .chain(numbered("z", n))
        .chain(numbered("v", m))
        .collect();
    w.write_record(&header).map_err(csv_err)?;
    for (t, zt) in z.iter().enumerate() {
        let mut record = vec![t.to_string()];
        record.extend(zt.iter().map(f64::to_string));
        match v.get(t) {
            Some(vt) => record.extend(vt.iter().map(f64::to_string)),
            None => record.extend(std::iter::repeat_n(String::new(), m)),
        }
        w.write_record(&record).map_err(csv_err)?;
    }
    finish(w)
}

/// `sample,t,x1..xn,u1..um`; the input columns are empty at `t = N`.
pub fn samples_csv(trajectories: &[Trajectory]) -> CliResult<Vec<u8>> {
    let first = trajectories.first();
    let n = first.and_then(|tr| tr.states.first()).map_or(0, |x| x.len());
    let m = first.and_then(|tr| tr.inputs.first()).map_or(0, |u| u.len());
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<String> = ["sample".to_string(), "t".to_string()]
        .into_iter()
        .chain(numbered("x", n))
        .chain(numbered("u", m))
        .collect();
    w.write_record(&header).map_err(csv_err)?;
    for (sample, tr) in trajectories.iter().enumerate() {
        for (t, x) in tr.states.iter().enumerate() {
            let mut record = vec![sample.to_string(), t.to_string()];
            record.extend(x.iter().map(f64::to_string));
            match tr.inputs.get(t) {
                Some(u) => record.extend(u.iter().map(f64::to_string)),
                None => record.extend(std::iter::repeat_n(String::new(), m)),
            }
            w.write_record(&record).map_err(csv_err)?;
        }
    }
    finish(w)
}

/// A named planar outline for one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct Outline {
    pub region: &'static str,
    pub t: usize,
    pub points: Vec<[f64; 2]>,
}

/// Boundary of `{‖S^½(x − c)‖ ≤ ρ}`: `c + ρ S^{-½} u` over unit `u`.
fn ellipse_outline(center: &DVector<f64>, shape_sqrt_inv: &DMatrix<f64>, rho: f64) -> Vec<[f64; 2]> {
    (0..=POLYLINE_POINTS)
        .map(|i| {
            let a = TAU * (i % POLYLINE_POINTS) as f64 / POLYLINE_POINTS as f64;
            let p = center + shape_sqrt_inv * DVector::from_vec(vec![a.cos(), a.sin()]) * rho;
            [p[0], p[1]]
        })
        .collect()
}

fn rule_outline(rule: &ConeRule) -> CliResult<Vec<[f64; 2]>> {
    let inv = rule
        .shape_sqrt
        .clone()
        .try_inverse()
        .ok_or_else(|| CliError::Internal("singular tightened-set shape".into()))?;
    Ok(ellipse_outline(&rule.center, &inv, rule.rho.max(0.0)))
}

fn region_outline(region: &PredictionRegion) -> CliResult<Vec<[f64; 2]>> {
    let origin = DVector::zeros(2);
    match &region.kind {
        RegionKind::Ball {
            radius,
            norm: ScoreNorm::Euclidean,
            ..
        } => Ok(ellipse_outline(&origin, &DMatrix::identity(2, 2), *radius)),
        RegionKind::Ball {
            radius,
            norm: ScoreNorm::Infinity,
            ..
        } => {
            let r = *radius;
            Ok(vec![[r, r], [-r, r], [-r, -r], [r, -r], [r, r]])
        }
        RegionKind::Ellipsoid(e) => {
            let inv_sqrt = sym_sqrt(&spd_inverse(e.shape(), "region outline").map_err(|e| CliError::Internal(e.to_string()))?)
                .map_err(|e| CliError::Internal(e.to_string()))?;
            Ok(ellipse_outline(e.center(), &inv_sqrt, 1.0))
        }
    }
}

/// State sets, tightened sets and the error region for planar states. Sets
/// are emitted at `t = 1` and again whenever they change. Empty for other
/// state dimensions.
pub fn region_outlines(
    constraints: &ConstraintSpec,
    tightened: Option<&TightenedConstraints>,
    error_region: Option<&PredictionRegion>,
) -> CliResult<Vec<Outline>> {
    if constraints.state_dim() != 2 {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for t in 1..=constraints.horizon() {
        let changed = t == 1 || constraints.state_set(t) != constraints.state_set(t - 1);
        if changed {
            let s = constraints.state_set(t);
            let rule = ConeRule {
                center: s.center().clone(),
                shape_sqrt: sym_sqrt(s.shape()).map_err(|e| CliError::Internal(e.to_string()))?,
                rho: 1.0,
            };
            out.push(Outline {
                region: "state_set",
                t,
                points: rule_outline(&rule)?,
            });
        }
        if let Some(tightened) = tightened {
            if changed || tightened.state_rule(t) != tightened.state_rule(t - 1) {
                out.push(Outline {
                    region: "tightened_state_set",
                    t,
                    points: rule_outline(tightened.state_rule(t))?,
                });
            }
        }
    }
    if let Some(region) = error_region {
        out.push(Outline {
            region: "error_region",
            t: region.horizon.first,
            points: region_outline(region)?,
        });
    }
    Ok(out)
}

/// `region,t,point,x1,x2`.
pub fn regions_csv(outlines: &[Outline]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["region", "t", "point", "x1", "x2"]).map_err(csv_err)?;
    for o in outlines {
        for (i, p) in o.points.iter().enumerate() {
            w.write_record([
                o.region.to_string(),
                o.t.to_string(),
                i.to_string(),
                p[0].to_string(),
                p[1].to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    finish(w)
}
