//! Closed-form bounds: tolerance frontiers, fork branch counts, confirmation
//! thresholds, deposit flux and finalization blockdepth.

use num_rational::Ratio;
use serde::Serialize;
use thiserror::Error;

use crate::committee::{threshold_tolerated, FaultProfile};

#[derive(Clone, Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("agreement threshold overwhelmed")]
    ThresholdOverwhelmed,
    #[error("no finite blockdepth")]
    NoFiniteBlockdepth,
    #[error("parameter out of range: {0}")]
    OutOfRange(&'static str),
}

/// Largest number of disjoint branches a coalition of `dt` processes can
/// sustain: floor((n-dt)/(h-dt)), floored at 1.
pub fn max_branches(n: usize, h: usize, dt: usize) -> Result<usize, AnalysisError> {
    if dt >= h {
        return Err(AnalysisError::ThresholdOverwhelmed);
    }
    Ok(((n.saturating_sub(dt)) / (h - dt)).max(1))
}

/// Exhaustive oracle for [`max_branches`]: the largest k such that the n-dt
/// non-coalition processes split into k non-empty groups, each of which
/// reaches h together with the coalition.
pub fn max_branches_by_partition(n: usize, h: usize, dt: usize) -> Result<usize, AnalysisError> {
    if dt >= h {
        return Err(AnalysisError::ThresholdOverwhelmed);
    }
    let honest = n.saturating_sub(dt);
    fn feasible(rest: usize, groups: usize, min_part: usize, need: usize) -> bool {
        if groups == 0 {
            return true;
        }
        // parts in non-decreasing order, all >= need
        let lo = min_part.max(need);
        (lo..=rest).any(|part| {
            let left = rest - part;
            if groups == 1 {
                left == 0
            } else {
                left >= part * (groups - 1) && feasible(left, groups - 1, part, need)
            }
        })
    }
    let need = h - dt;
    let best = (1..=honest)
        .filter(|&k| feasible(honest, k, 1, need))
        .max()
        .unwrap_or(1);
    Ok(best)
}

fn ceil_guarded(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r
    } else {
        x.ceil()
    }
}

/// Worst-case branch count for deposit sizing: ceil((1-delta)/(h_ratio-delta)).
pub fn conservative_branches(delta: f64, h_ratio: f64) -> Result<u64, AnalysisError> {
    if !(0.0..1.0).contains(&delta) || !(0.5..=1.0).contains(&h_ratio) {
        return Err(AnalysisError::OutOfRange("delta in [0,1), h-ratio in [1/2,1]"));
    }
    if delta >= h_ratio {
        return Err(AnalysisError::ThresholdOverwhelmed);
    }
    Ok(ceil_guarded((1.0 - delta) / (h_ratio - delta)) as u64)
}

/// Real-valued branch ratio (1-delta)/(h_ratio-delta), before rounding.
pub fn branch_ratio(delta: f64, h_ratio: f64) -> Result<f64, AnalysisError> {
    if delta >= h_ratio {
        return Err(AnalysisError::ThresholdOverwhelmed);
    }
    Ok((1.0 - delta) / (h_ratio - delta))
}

/// Smallest integer c with c > n - h + alpha*n, computed exactly. When the
/// bound reaches n no larger set exists and all n processes are required.
pub fn alpha_confirm_threshold(n: usize, h: usize, alpha: Ratio<u64>) -> usize {
    let bound = Ratio::from_integer((n - h) as u64) + alpha * Ratio::from_integer(n as u64);
    ((bound.floor().to_integer() + 1) as usize).min(n)
}

/// Parameters of the zero-loss analysis.
#[derive(Copy, Clone, Debug, PartialEq, Serialize)]
pub struct ZeroLossParams {
    pub a: f64,
    pub b: f64,
    pub rho: f64,
    pub w: u32,
}

/// g(a,b,rho,w) = (1 - rho^(w+1)) b - (a-1) rho^(w+1), in units of the gain cap.
pub fn deposit_flux(p: &ZeroLossParams) -> f64 {
    let r = p.rho.powi(p.w as i32 + 1);
    (1.0 - r) * p.b - (p.a - 1.0) * r
}

/// The closed-form real bound log(c)/log(rho) - 1 with c = b/(a-1+b).
pub fn blockdepth_closed_form(a: f64, b: f64, rho: f64) -> Result<f64, AnalysisError> {
    validate_zero_loss(a, b, rho)?;
    if b <= 0.0 {
        return Err(AnalysisError::NoFiniteBlockdepth);
    }
    let c = b / (a - 1.0 + b);
    Ok(c.ln() / rho.ln() - 1.0)
}

fn validate_zero_loss(a: f64, b: f64, rho: f64) -> Result<(), AnalysisError> {
    if rho >= 1.0 {
        return Err(AnalysisError::NoFiniteBlockdepth);
    }
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(AnalysisError::OutOfRange("rho in (0,1)"));
    }
    if !(a >= 1.0) || !a.is_finite() {
        return Err(AnalysisError::OutOfRange("a >= 1"));
    }
    if !(b >= 0.0) || !b.is_finite() {
        return Err(AnalysisError::OutOfRange("b >= 0"));
    }
    Ok(())
}

/// Smallest w with deposit_flux(a,b,rho,w) >= 0, by direct search, cross-checked
/// against the closed form.
pub fn min_blockdepth(a: f64, b: f64, rho: f64) -> Result<u32, AnalysisError> {
    validate_zero_loss(a, b, rho)?;
    if a > 1.0 && b <= 0.0 {
        return Err(AnalysisError::NoFiniteBlockdepth);
    }
    let flux = |w| deposit_flux(&ZeroLossParams { a, b, rho, w });
    let mut w = 0u32;
    while flux(w) < 0.0 {
        w = w.checked_add(1).ok_or(AnalysisError::NoFiniteBlockdepth)?;
    }
    if a > 1.0 {
        let cf = blockdepth_closed_form(a, b, rho)?;
        debug_assert!(
            (w as f64 - cf.max(0.0).ceil()).abs() <= 1.0,
            "search {w} vs closed form {cf}"
        );
    }
    Ok(w)
}

/// One extremal profile for a threshold.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FrontierPoint {
    pub n: usize,
    pub h: usize,
    pub t: usize,
    pub d: usize,
    pub q: usize,
}

fn tolerated(n: usize, h: usize, t: usize, d: usize, q: usize) -> bool {
    if t + d + q > n {
        return false;
    }
    let p = FaultProfile { n, t, d, q };
    matches!(threshold_tolerated(&p, h), Ok((true, true)))
}

/// Profiles tolerated at threshold h where incrementing any of t, d, q breaks tolerance.
pub fn frontier(n: usize, h: usize) -> Result<Vec<FrontierPoint>, AnalysisError> {
    if 2 * h <= n || h > n {
        return Err(AnalysisError::OutOfRange("threshold out of (n/2, n]"));
    }
    let mut out = Vec::new();
    for t in 0..=n {
        for d in 0..=n - t {
            for q in 0..=n - t - d {
                if tolerated(n, h, t, d, q)
                    && !tolerated(n, h, t + 1, d, q)
                    && !tolerated(n, h, t, d + 1, q)
                    && !tolerated(n, h, t, d, q + 1)
                {
                    out.push(FrontierPoint { n, h, t, d, q });
                }
            }
        }
    }
    Ok(out)
}

/// Row of the branch-count curve over deceitful ratio.
#[derive(Copy, Clone, Debug, PartialEq, Serialize)]
pub struct BranchRow {
    pub delta: f64,
    pub h_ratio: f64,
    pub ratio: f64,
    pub conservative: u64,
    pub exact: usize,
}

/// Branch counts for n processes at threshold ratio h_ratio, sweeping dt.
pub fn branch_curve(n: usize, h_ratio: f64) -> Vec<BranchRow> {
    let h = (h_ratio * n as f64 - 1e-9).ceil() as usize;
    (0..h)
        .map(|dt| {
            let delta = dt as f64 / n as f64;
            BranchRow {
                delta,
                h_ratio,
                ratio: branch_ratio(delta, h_ratio).unwrap_or(f64::INFINITY),
                conservative: conservative_branches(delta, h_ratio).unwrap_or(0),
                exact: max_branches(n, h, dt).unwrap_or(0),
            }
        })
        .collect()
}

/// Row of the blockdepth curve over attack success probability.
#[derive(Copy, Clone, Debug, PartialEq, Serialize)]
pub struct BlockdepthRow {
    pub a: f64,
    pub b: f64,
    pub rho: f64,
    pub closed_form: f64,
    pub w: u32,
}

pub fn blockdepth_curve(a: f64, b: f64, rhos: &[f64]) -> Vec<BlockdepthRow> {
    rhos.iter()
        .filter_map(|&rho| {
            let w = min_blockdepth(a, b, rho).ok()?;
            let closed_form = blockdepth_closed_form(a, b, rho).unwrap_or(0.0);
            Some(BlockdepthRow {
                a,
                b,
                rho,
                closed_form,
                w,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn branches() {
        assert_eq!(max_branches(9, 6, 3), Ok(2));
        assert_eq!(max_branches(90, 60, 49), Ok(3));
        assert_eq!(max_branches(9, 6, 6), Err(AnalysisError::ThresholdOverwhelmed));
        assert_eq!(max_branches(30, 20, 14), Ok(2));
        assert_eq!(conservative_branches(0.5, 2.0 / 3.0), Ok(3));
        assert_eq!(conservative_branches(0.6, 2.0 / 3.0), Ok(6));
        assert_eq!(conservative_branches(0.64, 2.0 / 3.0), Ok(14));
        assert_eq!(conservative_branches(0.66, 2.0 / 3.0), Ok(51));
    }

    #[test]
    fn alpha() {
        assert_eq!(alpha_confirm_threshold(9, 6, Ratio::new(4, 9)), 8);
        assert_eq!(alpha_confirm_threshold(9, 6, Ratio::new(2, 3)), 9);
        assert_eq!(alpha_confirm_threshold(9, 6, Ratio::from_integer(0)), 4);
    }

    #[test]
    fn blockdepth() {
        assert_eq!(min_blockdepth(3.0, 0.1, 0.9), Ok(28));
        assert_eq!(min_blockdepth(6.0, 0.1, 0.9), Ok(37));
        assert_eq!(min_blockdepth(14.0, 0.1, 0.9), Ok(46));
        // the closed form is 58.003, so exact search lands one block later
        assert_eq!(min_blockdepth(51.0, 0.1, 0.9), Ok(59));
        assert_eq!(min_blockdepth(3.0, 0.1, 0.55), Ok(5));
        assert_eq!(min_blockdepth(3.0, 0.1, 1.0), Err(AnalysisError::NoFiniteBlockdepth));
        assert_eq!(min_blockdepth(2.0, 0.1, 0.0), Err(AnalysisError::OutOfRange("rho in (0,1)")));
    }

    #[test]
    fn frontier_examples() {
        let f = frontier(9, 7).unwrap();
        assert!(f.contains(&FrontierPoint { n: 9, h: 7, t: 0, d: 4, q: 2 }));
        for n in 4..=12 {
            let h = crate::committee::default_threshold(n);
            let tmax = f_max_t(&frontier(n, h).unwrap());
            assert_eq!(tmax, (2 * h - n - 1).min(n - h), "n={n}");
        }
        let top = frontier(7, 7).unwrap();
        assert!(top.iter().all(|p| p.q + p.t == 0));
    }

    fn f_max_t(f: &[FrontierPoint]) -> usize {
        f.iter().map(|p| p.t).max().unwrap_or(0)
    }
}
