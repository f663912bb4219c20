//! Distances between predicted and ground-truth distributions: forward and
//! reverse KL divergence and the Earth Mover's Distance.

mod ot;

pub use ot::{sinkhorn, transport_simplex, TransportPlan};

use std::fmt;

use crate::error::{Error, Result};
use crate::mapgrid::{ProbGrid, ScalarGrid};

/// Smoothing added to every cell before taking logarithms.
pub const DEFAULT_EPS: f64 = 1e-12;

/// Largest `|supp(P)|·|supp(Q)|` the exact solver accepts by default.
pub const DEFAULT_PAIR_CAP: usize = 65_536;

/// Side length that the automatic EMD mode downsamples large grids to.
pub const AUTO_TARGET_SIDE: usize = 32;

fn same_shape(p: &ProbGrid, q: &ProbGrid, op: &'static str) -> Result<()> {
    if p.height() != q.height() || p.width() != q.width() {
        return Err(Error::dim(op, &[p.height(), p.width()], &[q.height(), q.width()]));
    }
    Ok(())
}

fn smooth(p: &[f64], eps: f64) -> Vec<f64> {
    let z = 1.0 + eps * p.len() as f64;
    p.iter().map(|&v| (v + eps) / z).collect()
}

/// `KL(P‖Q)` in nats after adding `eps` to every cell of both grids and
/// renormalizing.
pub fn kl_div(p: &ProbGrid, q: &ProbGrid, eps: f64) -> Result<f64> {
    same_shape(p, q, "kl_div")?;
    if !(eps >= 0.0) {
        return Err(Error::Config(format!("smoothing must be nonnegative, got {eps}")));
    }
    let ps = smooth(p.mass(), eps);
    let qs = smooth(q.mass(), eps);
    Ok(ps
        .iter()
        .zip(&qs)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a / b).ln())
        .sum())
}

/// `KL(Q‖P)`, penalizing predicted mass where the ground truth has none.
pub fn reverse_kl(p: &ProbGrid, q: &ProbGrid, eps: f64) -> Result<f64> {
    kl_div(q, p, eps)
}

pub fn nats_to_bits(nats: f64) -> f64 {
    nats / std::f64::consts::LN_2
}

/// Clamps a raw prediction to nonnegative values and renormalizes it.
pub fn prepare_prediction(pred: &ScalarGrid) -> Result<ProbGrid> {
    pred.to_distribution()
        .ok_or_else(|| Error::Data("prediction has no positive mass".into()))
}

/// Nonzero cells as `(row, col, mass)`.
fn support(p: &ProbGrid) -> Vec<(usize, usize, f64)> {
    let w = p.width();
    p.mass()
        .iter()
        .enumerate()
        .filter(|(_, &m)| m > 0.0)
        .map(|(i, &m)| (i / w, i % w, m))
        .collect()
}

/// Optimal plan between two grids with Euclidean cell-center distances.
/// A `(row, col)` grid cell.
pub type Cell = (usize, usize);

#[derive(Clone, Debug, PartialEq)]
pub struct EmdSolution {
    pub distance: f64,
    /// `((row, col) in P, (row, col) in Q, mass)`.
    pub plan: Vec<(Cell, Cell, f64)>,
}

fn solve_supports(p: &ProbGrid, q: &ProbGrid, cap: Option<usize>) -> Result<EmdSolution> {
    same_shape(p, q, "emd")?;
    let sp = support(p);
    let sq = support(q);
    if let Some(cap) = cap {
        if sp.len() * sq.len() > cap {
            return Err(Error::Config(format!(
                "exact EMD over {}x{} support pairs exceeds the cap of {cap}; \
                 use a downsampled or entropic approximation",
                sp.len(),
                sq.len()
            )));
        }
    }
    let a: Vec<f64> = sp.iter().map(|s| s.2).collect();
    let b: Vec<f64> = sq.iter().map(|s| s.2).collect();
    let cost = ground_costs(&sp, &sq);
    let plan = transport_simplex(&a, &b, &cost)?;
    Ok(EmdSolution {
        distance: plan.cost,
        plan: plan
            .flows
            .into_iter()
            .map(|(i, j, f)| ((sp[i].0, sp[i].1), (sq[j].0, sq[j].1), f))
            .collect(),
    })
}

fn ground_costs(sp: &[(usize, usize, f64)], sq: &[(usize, usize, f64)]) -> Vec<f64> {
    let mut cost = Vec::with_capacity(sp.len() * sq.len());
    for &(r0, c0, _) in sp {
        for &(r1, c1, _) in sq {
            cost.push((r0 as f64 - r1 as f64).hypot(c0 as f64 - c1 as f64));
        }
    }
    cost
}

/// Exact EMD in pixel units, refusing problems above [`DEFAULT_PAIR_CAP`].
pub fn emd_exact(p: &ProbGrid, q: &ProbGrid) -> Result<EmdSolution> {
    emd_exact_capped(p, q, DEFAULT_PAIR_CAP)
}

pub fn emd_exact_capped(p: &ProbGrid, q: &ProbGrid, cap: usize) -> Result<EmdSolution> {
    solve_supports(p, q, Some(cap))
}

/// How [`emd_grid`] solves a problem.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EmdMode {
    /// Exact when under the pair cap, otherwise block-downsampled so the
    /// longer side is at most [`AUTO_TARGET_SIDE`], then solved exactly.
    Auto,
    Exact,
    /// Sum `k×k` blocks, solve exactly, scale the distance by `k`.
    Downsample(usize),
    /// Sinkhorn with inverse temperature `lambda`.
    Entropic { lambda: f64, max_iters: usize },
}

impl fmt::Display for EmdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EmdMode::Auto => write!(f, "auto"),
            EmdMode::Exact => write!(f, "exact"),
            EmdMode::Downsample(k) => write!(f, "downsample({k})"),
            EmdMode::Entropic { lambda, max_iters } => {
                write!(f, "entropic({lambda};{max_iters})")
            }
        }
    }
}

impl std::str::FromStr for EmdMode {
    type Err = Error;

    /// Accepts `auto`, `exact`, `downsample:K` and `entropic:LAMBDA:ITERS`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid EMD mode `{s}`"));
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["auto"] => Ok(EmdMode::Auto),
            ["exact"] => Ok(EmdMode::Exact),
            ["downsample", k] => match k.parse() {
                Ok(k) if k > 0 => Ok(EmdMode::Downsample(k)),
                _ => Err(bad()),
            },
            ["entropic", l, it] => Ok(EmdMode::Entropic {
                lambda: l.parse().map_err(|_| bad())?,
                max_iters: it.parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }
}

/// Block sums over `k×k` tiles; edge tiles may be partial.
pub fn downsample(p: &ProbGrid, k: usize) -> Result<ProbGrid> {
    if k == 0 {
        return Err(Error::Config("downsample factor must be positive".into()));
    }
    let (h, w) = (p.height(), p.width());
    let (hh, ww) = (h.div_ceil(k), w.div_ceil(k));
    let mut out = vec![0.0; hh * ww];
    for r in 0..h {
        for c in 0..w {
            out[(r / k) * ww + c / k] += p.as_grid().get(r, c);
        }
    }
    let total: f64 = out.iter().sum();
    ProbGrid::from_vec(hh, ww, out.into_iter().map(|v| v / total).collect())
}

/// EMD under the requested mode; returns the distance and the mode that was
/// actually applied.
pub fn emd_grid(p: &ProbGrid, q: &ProbGrid, mode: EmdMode) -> Result<(f64, EmdMode)> {
    same_shape(p, q, "emd_grid")?;
    match mode {
        EmdMode::Exact => Ok((emd_exact(p, q)?.distance, mode)),
        EmdMode::Downsample(k) => {
            let d = solve_supports(&downsample(p, k)?, &downsample(q, k)?, None)?;
            Ok((d.distance * k as f64, mode))
        }
        EmdMode::Entropic { lambda, max_iters } => {
            let sp = support(p);
            let sq = support(q);
            let a: Vec<f64> = sp.iter().map(|s| s.2).collect();
            let b: Vec<f64> = sq.iter().map(|s| s.2).collect();
            let plan = sinkhorn(&a, &b, &ground_costs(&sp, &sq), lambda, max_iters, 1e-9)?;
            Ok((plan.cost, mode))
        }
        EmdMode::Auto => {
            let pairs = support(p).len() * support(q).len();
            if pairs <= DEFAULT_PAIR_CAP {
                return emd_grid(p, q, EmdMode::Exact);
            }
            let k = p.height().max(p.width()).div_ceil(AUTO_TARGET_SIDE).max(1);
            emd_grid(p, q, EmdMode::Downsample(k))
        }
    }
}

/// All three distances between a ground truth and a prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub kl: f64,
    pub rkl: f64,
    pub emd: f64,
    pub eps: f64,
    pub shape: (usize, usize),
    /// EMD mode actually used.
    pub mode: String,
}

impl MetricReport {
    pub fn csv_header() -> &'static str {
        "kl,rkl,emd,mode,eps"
    }

    pub fn csv_line(&self) -> String {
        format!("{},{},{},{},{:e}", self.kl, self.rkl, self.emd, self.mode, self.eps)
    }
}

/// Compares a ground truth against a raw prediction (clamped and
/// renormalized first).
pub fn evaluate(gt: &ProbGrid, pred: &ScalarGrid, eps: f64, mode: EmdMode) -> Result<MetricReport> {
    let q = prepare_prediction(pred)?;
    evaluate_distributions(gt, &q, eps, mode)
}

pub fn evaluate_distributions(
    gt: &ProbGrid,
    q: &ProbGrid,
    eps: f64,
    mode: EmdMode,
) -> Result<MetricReport> {
    let kl = kl_div(gt, q, eps)?;
    let rkl = reverse_kl(gt, q, eps)?;
    let (emd, used) = emd_grid(gt, q, mode)?;
    Ok(MetricReport {
        kl,
        rkl,
        emd: emd.max(0.0),
        eps,
        shape: (gt.height(), gt.width()),
        mode: used.to_string(),
    })
}
