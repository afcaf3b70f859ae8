//! Position estimates from grouped distances and time differences.
//!
//! Both solvers run Levenberg-Marquardt in a local 2-D frame. Multilateration
//! starts from the linearised subtract-first-anchor system; the hyperbolic
//! solver starts from the best point of a coarse grid around the foci.

use crate::server::store::{ResultKind, ResultRecord};
use crate::types::{NodeId, SPEED_OF_LIGHT};
use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::Serialize;
use std::collections::BTreeMap;
use thiserror::Error;

pub const MAX_ITERATIONS: usize = 100;
pub const STEP_TOLERANCE_M: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum LocalizationError {
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(&'static str),
    #[error("no convergence after {0} iterations")]
    NonConvergence(usize),
    #[error("insufficient measurements: {have} anchors, need {need}")]
    InsufficientMeasurements { have: usize, need: usize },
    #[error("invalid input: {0}")]
    InvalidInput(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Anchor {
    pub node_id: NodeId,
    pub x: f64,
    pub y: f64,
}

impl Anchor {
    pub fn new(node_id: NodeId, x: f64, y: f64) -> Self {
        Self { node_id, x, y }
    }

    fn v(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PositionEstimate {
    pub x: f64,
    pub y: f64,
    pub rmse_m: Option<f64>,
    pub n_measurements: usize,
    pub iterations: usize,
}

impl PositionEstimate {
    pub fn error_to(&self, x: f64, y: f64) -> f64 {
        ((self.x - x).powi(2) + (self.y - y).powi(2)).sqrt()
    }

    pub fn with_truth(mut self, x: f64, y: f64) -> Self {
        self.rmse_m = Some(self.error_to(x, y));
        self
    }
}

/// Root mean square of the distances between `estimates` and `truth`.
pub fn rmse(estimates: &[(f64, f64)], truth: (f64, f64)) -> f64 {
    if estimates.is_empty() {
        return 0.0;
    }
    let ss: f64 = estimates
        .iter()
        .map(|(x, y)| (x - truth.0).powi(2) + (y - truth.1).powi(2))
        .sum();
    (ss / estimates.len() as f64).sqrt()
}

/// Ratio of the smaller to the larger principal spread of `points`.
fn spread_ratio(points: &[Vector2<f64>]) -> f64 {
    let n = points.len() as f64;
    let mean = points.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
    let mut cov = Matrix2::zeros();
    for p in points {
        let d = p - mean;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    if hi <= 0.0 {
        0.0
    } else {
        lo / hi
    }
}

/// Minimises `Σ r_i(p)²` from `start`. `f` returns residuals and Jacobian rows.
fn levenberg_marquardt(
    start: Vector2<f64>,
    f: impl Fn(&Vector2<f64>) -> (Vec<f64>, Vec<[f64; 2]>),
) -> Result<(Vector2<f64>, usize), LocalizationError> {
    let cost = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>();
    let mut p = start;
    let (mut r, mut jac) = f(&p);
    let mut c = cost(&r);
    let mut lambda = 1e-3;
    for it in 1..=MAX_ITERATIONS {
        let mut jtj = Matrix2::zeros();
        let mut jtr = Vector2::zeros();
        for (ri, j) in r.iter().zip(&jac) {
            let jv = Vector2::new(j[0], j[1]);
            jtj += jv * jv.transpose();
            jtr += jv * *ri;
        }
        if jtr.norm() < 1e-14 * (1.0 + c) {
            return Ok((p, it));
        }
        loop {
            let mut a = jtj;
            a[(0, 0)] += lambda * jtj[(0, 0)].max(1e-12);
            a[(1, 1)] += lambda * jtj[(1, 1)].max(1e-12);
            let Some(step) = a.lu().solve(&(-jtr)) else {
                return Err(LocalizationError::DegenerateGeometry("singular normal equations"));
            };
            let cand = p + step;
            let (r2, j2) = f(&cand);
            let c2 = cost(&r2);
            if c2 <= c {
                p = cand;
                r = r2;
                jac = j2;
                let improved = c - c2;
                c = c2;
                lambda = (lambda / 10.0).max(1e-12);
                if step.norm() < STEP_TOLERANCE_M || improved <= 1e-15 * c.max(1e-300) {
                    return Ok((p, it));
                }
                break;
            }
            lambda *= 10.0;
            if lambda > 1e12 {
                // no descent direction left: at a minimum to machine precision
                return Ok((p, it));
            }
        }
    }
    Err(LocalizationError::NonConvergence(MAX_ITERATIONS))
}

fn unit(d: Vector2<f64>) -> Vector2<f64> {
    let n = d.norm();
    if n < 1e-12 {
        Vector2::zeros()
    } else {
        d / n
    }
}

/// Least-squares fix from ranges to at least three non-collinear anchors.
pub fn multilaterate(anchors: &[Anchor], distances: &[f64]) -> Result<PositionEstimate, LocalizationError> {
    if anchors.len() != distances.len() {
        return Err(LocalizationError::InvalidInput("anchor and distance counts differ"));
    }
    if anchors.len() < 3 {
        return Err(LocalizationError::DegenerateGeometry("fewer than three anchors"));
    }
    if distances.iter().any(|d| !d.is_finite() || *d < 0.0) {
        return Err(LocalizationError::InvalidInput("distances must be finite and non-negative"));
    }
    let pts: Vec<_> = anchors.iter().map(Anchor::v).collect();
    if spread_ratio(&pts) < 1e-8 {
        return Err(LocalizationError::DegenerateGeometry("anchors are collinear"));
    }
    // linearised start: 2 (a_i - a_0) . p = d_0² - d_i² + |a_i|² - |a_0|²
    let n = anchors.len() - 1;
    let mut a = DMatrix::zeros(n, 2);
    let mut b = DVector::zeros(n);
    for i in 1..anchors.len() {
        let d = pts[i] - pts[0];
        a[(i - 1, 0)] = 2.0 * d.x;
        a[(i - 1, 1)] = 2.0 * d.y;
        b[i - 1] = distances[0].powi(2) - distances[i].powi(2) + pts[i].norm_squared() - pts[0].norm_squared();
    }
    let start = a
        .svd(true, true)
        .solve(&b, 1e-12)
        .map(|s| Vector2::new(s[0], s[1]))
        .unwrap_or_else(|_| pts.iter().fold(Vector2::zeros(), |s, p| s + p) / pts.len() as f64);
    let (p, iterations) = levenberg_marquardt(start, |p| {
        let mut r = Vec::with_capacity(pts.len());
        let mut j = Vec::with_capacity(pts.len());
        for (a, d) in pts.iter().zip(distances) {
            let diff = p - a;
            r.push(diff.norm() - d);
            let u = unit(diff);
            j.push([u.x, u.y]);
        }
        (r, j)
    })?;
    Ok(PositionEstimate {
        x: p.x,
        y: p.y,
        rmse_m: None,
        n_measurements: distances.len(),
        iterations,
    })
}

/// Sum of squared range residuals at `(x, y)`.
pub fn range_cost(anchors: &[Anchor], distances: &[f64], x: f64, y: f64) -> f64 {
    anchors
        .iter()
        .zip(distances)
        .map(|(a, d)| (((x - a.x).powi(2) + (y - a.y).powi(2)).sqrt() - d).powi(2))
        .sum()
}

/// Hyperbolic residual in meters for one (master, slave) pair.
fn hyperbolic_residual(m: &Vector2<f64>, s: &Vector2<f64>, p: &Vector2<f64>, delta_t: f64) -> f64 {
    (m - s).norm() + (p - s).norm() - (p - m).norm() - SPEED_OF_LIGHT * delta_t
}

/// Fix from listener time differences over at least three exchanges.
pub fn hyperbolic_locate(pairs: &[(Anchor, Anchor)], delta_ts: &[f64]) -> Result<PositionEstimate, LocalizationError> {
    if pairs.len() != delta_ts.len() {
        return Err(LocalizationError::InvalidInput("pair and delta_t counts differ"));
    }
    if pairs.len() < 3 {
        return Err(LocalizationError::DegenerateGeometry("fewer than three exchanges"));
    }
    if delta_ts.iter().any(|d| !d.is_finite()) {
        return Err(LocalizationError::InvalidInput("time differences must be finite"));
    }
    let foci: Vec<(Vector2<f64>, Vector2<f64>)> = pairs.iter().map(|(m, s)| (m.v(), s.v())).collect();
    if foci.iter().all(|(m, s)| (m - s).norm() < 1e-6) {
        return Err(LocalizationError::DegenerateGeometry("every master sits on its slave"));
    }
    let mut distinct: Vec<Vector2<f64>> = Vec::new();
    for (m, s) in &foci {
        for q in [m, s] {
            if distinct.iter().all(|d| (d - q).norm() > 1e-6) {
                distinct.push(*q);
            }
        }
    }
    if distinct.len() < 3 || spread_ratio(&distinct) < 1e-8 {
        return Err(LocalizationError::DegenerateGeometry("foci are collinear"));
    }
    let cost = |p: &Vector2<f64>| -> f64 {
        foci.iter()
            .zip(delta_ts)
            .map(|((m, s), dt)| hyperbolic_residual(m, s, p, *dt).powi(2))
            .sum()
    };
    let (mut lo, mut hi) = (distinct[0], distinct[0]);
    for q in &distinct {
        lo = lo.inf(q);
        hi = hi.sup(q);
    }
    let pad = (hi - lo).max() * 1.0;
    let (lo, hi) = (lo - Vector2::repeat(pad), hi + Vector2::repeat(pad));
    const GRID: usize = 60;
    let mut best = (f64::INFINITY, lo);
    for i in 0..=GRID {
        for k in 0..=GRID {
            let p = Vector2::new(
                lo.x + (hi.x - lo.x) * i as f64 / GRID as f64,
                lo.y + (hi.y - lo.y) * k as f64 / GRID as f64,
            );
            let c = cost(&p);
            if c < best.0 {
                best = (c, p);
            }
        }
    }
    let (p, iterations) = levenberg_marquardt(best.1, |p| {
        let mut r = Vec::with_capacity(foci.len());
        let mut j = Vec::with_capacity(foci.len());
        for ((m, s), dt) in foci.iter().zip(delta_ts) {
            r.push(hyperbolic_residual(m, s, p, *dt));
            let g = unit(p - s) - unit(p - m);
            j.push([g.x, g.y]);
        }
        (r, j)
    })?;
    Ok(PositionEstimate {
        x: p.x,
        y: p.y,
        rmse_m: None,
        n_measurements: delta_ts.len(),
        iterations,
    })
}

/// Averages each anchor's point-to-point distances to `target` under one
/// ranging id and multilaterates. Passive results are ignored here.
pub fn batch_locate(
    results: &[&ResultRecord],
    anchors: &[Anchor],
    target: NodeId,
) -> Result<PositionEstimate, LocalizationError> {
    let mut per_anchor: BTreeMap<NodeId, (f64, usize)> = BTreeMap::new();
    let mut used = 0;
    for r in results {
        if let ResultKind::Ptp {
            master,
            slave,
            distance_m,
            ..
        } = r.result
        {
            let other = if slave == target {
                master
            } else if master == target {
                slave
            } else {
                continue;
            };
            if anchors.iter().any(|a| a.node_id == other) {
                let e = per_anchor.entry(other).or_insert((0.0, 0));
                e.0 += distance_m;
                e.1 += 1;
                used += 1;
            }
        }
    }
    if per_anchor.len() < 3 {
        return Err(LocalizationError::InsufficientMeasurements {
            have: per_anchor.len(),
            need: 3,
        });
    }
    let mut sel = Vec::new();
    let mut dist = Vec::new();
    for (id, (sum, n)) in per_anchor {
        let a = anchors.iter().find(|a| a.node_id == id).copied().unwrap();
        sel.push(a);
        dist.push((sum / n as f64).max(0.0));
    }
    let mut est = multilaterate(&sel, &dist)?;
    est.n_measurements = used;
    Ok(est)
}
