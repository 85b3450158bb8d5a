//! Observers: activation and FLOP accounting, equilibrium internalization,
//! trajectory projection and metric export.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{masked_loss, Family, Model};
use crate::solver::RESIDUAL_FLOOR;
use crate::tasks::TaskBatch;
use crate::tensor::{Real, Tape, Tensor};
use crate::training::TrainRecord;

/// Stored activation elements of a tape (values of non-parameter nodes plus
/// saved buffers).
pub fn count_activations<T: Real>(tape: &Tape<T>) -> usize {
    tape.activation_count()
}

/// Running peak of per-step activation counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ActivationCounter {
    pub last: usize,
    pub peak: usize,
}

impl ActivationCounter {
    pub fn observe(&mut self, count: usize) {
        self.last = count;
        self.peak = self.peak.max(count);
    }
}

/// Running FLOP totals split by component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopsCounter {
    pub backbone: u64,
    pub cell: u64,
}

impl FlopsCounter {
    pub fn observe(&mut self, rec: &TrainRecord) {
        self.backbone += rec.flops_backbone;
        self.cell += rec.flops_cell;
    }

    pub fn total(&self) -> u64 {
        self.backbone + self.cell
    }
}

/// Iteration budgets probed by [`internalization_metrics`]; `None` means
/// "solve to tolerance".
pub const SWEEP_BUDGETS: [Option<usize>; 6] = [Some(0), Some(1), Some(2), Some(4), Some(8), None];

#[derive(Clone, Debug, PartialEq)]
pub struct InternalizationRecord {
    /// Mean over rows of `‖y0 − y*‖ / ‖y*‖`.
    pub distance: f64,
    pub mean_iterations: f64,
    pub converged_fraction: f64,
    /// `(budget, loss)` for each entry of [`SWEEP_BUDGETS`].
    pub losses: Vec<(Option<usize>, f64)>,
}

fn row_distance<T: Real>(y0: &Tensor<T>, ys: &Tensor<T>, rows: usize) -> f64 {
    let n = ys.numel() / rows.max(1);
    let mut total = 0.0;
    for r in 0..rows {
        let (a, b) = (&y0.data()[r * n..(r + 1) * n], &ys.data()[r * n..(r + 1) * n]);
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x.f64() - y.f64()).powi(2)).sum();
        let norm: f64 = b.iter().map(|y| y.f64().powi(2)).sum();
        total += diff.sqrt() / norm.sqrt().max(RESIDUAL_FLOOR);
    }
    total / rows.max(1) as f64
}

/// Distance from proposal to equilibrium, solver effort, and loss as a
/// function of the iteration budget, averaged over `batches`.
pub fn internalization_metrics<T: Real>(model: &Model<T>, batches: &[TaskBatch]) -> Result<InternalizationRecord> {
    if !matches!(model.spec.family, Family::Attractor | Family::Deq) {
        return Err(Error::contract("internalization needs an equilibrium model"));
    }
    let mut rec = InternalizationRecord {
        distance: 0.0,
        mean_iterations: 0.0,
        converged_fraction: 0.0,
        losses: SWEEP_BUDGETS.iter().map(|&t| (t, 0.0)).collect(),
    };
    if batches.is_empty() {
        return Ok(rec);
    }
    for b in batches {
        for (t, loss) in rec.losses.iter_mut() {
            let out = model.forward(&b.inputs, b.batch, *t, false)?;
            *loss += masked_loss(&out.logits, b)?;
            if t.is_none() {
                let res = out.solver.as_ref().expect("equilibrium model reports its solve");
                let y0 = out.proposal.as_ref().expect("equilibrium model reports its proposal");
                rec.distance += row_distance(y0, &res.y_star, b.batch);
                rec.mean_iterations += res.iterations as f64;
                rec.converged_fraction += res.converged as u8 as f64;
            }
        }
    }
    let n = batches.len() as f64;
    rec.distance /= n;
    rec.mean_iterations /= n;
    rec.converged_fraction /= n;
    for (_, l) in rec.losses.iter_mut() {
        *l /= n;
    }
    Ok(rec)
}

const PCA_ITERS: usize = 100;
const PCA_TOL: f64 = 1e-9;

/// Projects the final-position state of each iterate onto the top two
/// principal directions of the centered trajectory. Every iterate is
/// `[B, L, d]`; the last position of the first row is used.
pub fn pca2_trajectory<T: Real>(trajectory: &[Tensor<T>]) -> Result<Vec<[f64; 2]>> {
    if trajectory.len() < 3 {
        return Err(Error::contract(format!("need at least 3 iterates, got {}", trajectory.len())));
    }
    let shape = trajectory[0].shape();
    if shape.len() != 3 {
        return Err(Error::contract("trajectory states must be [B, L, d]"));
    }
    let (l, d) = (shape[1], shape[2]);
    let start = (l - 1) * d;
    let points: Vec<Vec<f64>> = trajectory
        .iter()
        .map(|t| t.data()[start..start + d].iter().map(|x| x.f64()).collect())
        .collect();
    Ok(pca2(&points))
}

/// Top-two principal coordinates of `points` (rows), by orthogonal power
/// iteration with deflation on the covariance.
pub fn pca2(points: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let n = points.len();
    let d = points[0].len();
    let mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
    let centered: Vec<Vec<f64>> = points.iter().map(|p| p.iter().zip(&mean).map(|(x, m)| x - m).collect()).collect();
    // Covariance-vector product without forming the d×d matrix.
    let cov_mul = |v: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; d];
        for p in &centered {
            let s: f64 = p.iter().zip(v).map(|(a, b)| a * b).sum();
            for (o, a) in out.iter_mut().zip(p) {
                *o += s * a;
            }
        }
        out
    };
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    for c in 0..2 {
        let mut v: Vec<f64> = (0..d).map(|j| 1.0 + ((j * 7 + c * 3) % 5) as f64 * 0.1).collect();
        for _ in 0..PCA_ITERS {
            let mut w = cov_mul(&v);
            for u in &dirs {
                let s: f64 = w.iter().zip(u).map(|(a, b)| a * b).sum();
                w.iter_mut().zip(u).for_each(|(a, b)| *a -= s * b);
            }
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-300 {
                v = vec![0.0; d];
                break;
            }
            w.iter_mut().for_each(|x| *x /= norm);
            let change = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = w;
            if change < PCA_TOL {
                break;
            }
        }
        dirs.push(v);
    }
    centered
        .iter()
        .map(|p| {
            let proj = |u: &Vec<f64>| p.iter().zip(u).map(|(a, b)| a * b).sum::<f64>();
            [proj(&dirs[0]), proj(&dirs[1])]
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricsFormat {
    Csv,
    Jsonl,
}

pub const METRIC_COLUMNS: [&str; 11] = [
    "step",
    "loss",
    "iters_fwd",
    "iters_bwd",
    "internalization_dist",
    "act_peak",
    "flops_backbone",
    "flops_cell",
    "lr",
    "grad_norm",
    "rho_estimate",
];

/// `%.9g`-style formatting: 9 significant digits, shortest exponent form.
pub fn fmt_g9(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    if x == 0.0 {
        return "0".into();
    }
    let exp = x.abs().log10().floor() as i32;
    let s = if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        let s = format!("{x:.8e}");
        let (m, e) = s.split_once('e').expect("exponent form");
        let m = if m.contains('.') { m.trim_end_matches('0').trim_end_matches('.') } else { m };
        let e: i32 = e.parse().expect("exponent");
        format!("{m}e{}{:02}", if e < 0 { '-' } else { '+' }, e.abs())
    };
    s
}

fn record_fields(r: &TrainRecord) -> [Option<String>; 11] {
    [
        Some(r.step.to_string()),
        Some(fmt_g9(r.loss)),
        Some(r.iters_fwd.to_string()),
        Some(r.iters_bwd.to_string()),
        r.internalization_dist.map(fmt_g9),
        Some(r.act_peak.to_string()),
        Some(r.flops_backbone.to_string()),
        Some(r.flops_cell.to_string()),
        Some(fmt_g9(r.lr)),
        Some(fmt_g9(r.grad_norm)),
        r.rho_estimate.map(fmt_g9),
    ]
}

/// Serializes records in a fixed column order. Missing values are empty in
/// CSV and `null` in JSONL.
pub fn metrics_to_bytes(records: &[TrainRecord], format: MetricsFormat) -> Vec<u8> {
    let mut out = Vec::new();
    match format {
        MetricsFormat::Csv => {
            let mut w = csv::Writer::from_writer(&mut out);
            w.write_record(METRIC_COLUMNS).expect("in-memory write");
            for r in records {
                w.write_record(record_fields(r).iter().map(|f| f.as_deref().unwrap_or("")))
                    .expect("in-memory write");
            }
            w.flush().expect("in-memory write");
        }
        MetricsFormat::Jsonl => {
            for r in records {
                let body: Vec<String> = METRIC_COLUMNS
                    .iter()
                    .zip(record_fields(r))
                    .map(|(k, v)| format!("\"{k}\":{}", v.unwrap_or_else(|| "null".into())))
                    .collect();
                writeln!(out, "{{{}}}", body.join(",")).expect("in-memory write");
            }
        }
    }
    out
}

pub fn export_metrics(records: &[TrainRecord], path: &Path, format: MetricsFormat) -> Result<()> {
    std::fs::write(path, metrics_to_bytes(records, format)).map_err(|e| Error::io(path, e))
}

/// Parses a CSV written by [`export_metrics`].
pub fn read_metrics_csv(path: &Path) -> Result<Vec<TrainRecord>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let bad = |what: &str| Error::Numeric(format!("metrics file {}: {what}", path.display()));
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row.map_err(|e| bad(&e.to_string()))?;
        let get = |i: usize| row.get(i).unwrap_or("");
        let num = |i: usize| get(i).parse::<f64>().map_err(|_| bad(METRIC_COLUMNS[i]));
        let int = |i: usize| get(i).parse::<u64>().map_err(|_| bad(METRIC_COLUMNS[i]));
        let opt = |i: usize| if get(i).is_empty() { Ok(None) } else { num(i).map(Some) };
        out.push(TrainRecord {
            step: int(0)? as usize,
            loss: num(1)?,
            iters_fwd: int(2)? as usize,
            iters_bwd: int(3)? as usize,
            internalization_dist: opt(4)?,
            act_peak: int(5)? as usize,
            flops_backbone: int(6)?,
            flops_cell: int(7)?,
            lr: num(8)?,
            grad_norm: num(9)?,
            rho_estimate: opt(10)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_tape_has_no_activations() {
        assert_eq!(count_activations(&Tape::<f32>::new()), 0);
    }

    #[test]
    fn g9_formatting() {
        assert_eq!(fmt_g9(1.0), "1");
        assert_eq!(fmt_g9(0.1), "0.1");
        assert_eq!(fmt_g9(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_g9(123456789.0), "123456789");
        assert_eq!(fmt_g9(1234567890.0), "1.23456789e+09");
        assert_eq!(fmt_g9(1e-10), "1e-10");
        assert_eq!(fmt_g9(-2.5e-3), "-0.0025");
        for x in [0.1f32, 3.7e-7, 12345.678, 1.0e20] {
            assert_eq!(fmt_g9(x as f64).parse::<f32>().unwrap(), x);
        }
    }

    #[test]
    fn collinear_points_have_no_second_component() {
        let pts: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect();
        let p = pca2(&pts);
        let spread = p.iter().map(|q| q[0].abs()).fold(0.0, f64::max);
        assert!(p.iter().all(|q| q[1].abs() <= 1e-6 * spread));
    }

    #[test]
    fn projection_never_expands_distances() {
        let pts: Vec<Vec<f64>> = (0..8)
            .map(|i| (0..5).map(|j| ((i * 13 + j * 7) % 11) as f64 - 5.0).collect())
            .collect();
        let p = pca2(&pts);
        for a in 0..pts.len() {
            for b in 0..pts.len() {
                let orig: f64 = pts[a].iter().zip(&pts[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                let proj = ((p[a][0] - p[b][0]).powi(2) + (p[a][1] - p[b][1]).powi(2)).sqrt();
                assert!(proj <= orig + 1e-9);
            }
        }
    }

    #[test]
    fn short_trajectories_are_rejected() {
        let t = vec![Tensor::<f64>::zeros(&[1, 2, 3]); 2];
        assert!(matches!(pca2_trajectory(&t), Err(Error::Contract(_))));
    }

    fn records() -> Vec<TrainRecord> {
        vec![
            TrainRecord {
                step: 0,
                loss: 4.5,
                iters_fwd: 7,
                iters_bwd: 1,
                internalization_dist: Some(0.25),
                act_peak: 1200,
                flops_backbone: 10,
                flops_cell: 20,
                lr: 1e-3,
                grad_norm: 0.5,
                rho_estimate: None,
            },
            TrainRecord {
                step: 1,
                loss: 3.25,
                rho_estimate: Some(0.4),
                ..Default::default()
            },
        ]
    }

    #[test]
    fn jsonl_rows_parse_with_nulls() {
        let bytes = metrics_to_bytes(&records(), MetricsFormat::Jsonl);
        let rows: Vec<serde_json::Value> = std::str::from_utf8(&bytes)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0]["iters_fwd"], 7);
        assert_eq!(rows[0]["lr"], 0.001);
        assert!(rows[0]["rho_estimate"].is_null());
        assert!(rows[1]["internalization_dist"].is_null());
        assert_eq!(rows[1]["rho_estimate"], 0.4);
        let keys: Vec<&String> = rows[0].as_object().unwrap().keys().collect();
        assert_eq!(keys.len(), METRIC_COLUMNS.len());
    }

    #[test]
    fn csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        export_metrics(&records(), &path, MetricsFormat::Csv).unwrap();
        assert_eq!(read_metrics_csv(&path).unwrap(), records());
    }
}
