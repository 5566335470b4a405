//! Hölder regularity of the splitting: theoretical budget and empirical pair checks.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{chart_difference, subspace_distance, Subspace, TorusPoint};
use crate::lyapnorm::{c_const, AdaptedNormEvaluator};
use crate::oseledets::{classify_at, BlockParams, SplittingOptions, Trajectory};
use crate::systems::SystemSpec;

/// Longest iterate used when certifying `D`.
pub const D_HORIZON: usize = 20;
pub const D_SAFETY: f64 = 2.0;
/// Absolute slack for distances that should be exactly zero.
pub const ZERO_TOL: f64 = 1e-10;

pub const BUNDLES: [&str; 5] = ["s", "cs", "c", "cu", "u"];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HolderBudget {
    pub alpha: f64,
    pub eps: f64,
    pub a: f64,
    pub d: f64,
    /// Exponent fractions for s, cs, u, cu.
    pub fractions: [f64; 4],
    pub a1: f64,
    pub b1: f64,
    pub b2: f64,
    pub theta: f64,
}

impl HolderBudget {
    pub fn exponent(&self) -> f64 {
        self.a1 * self.alpha
    }

    pub fn ambient_bound(&self, k: u32, sep: f64) -> f64 {
        if self.d == 0.0 {
            return 0.0;
        }
        self.b1 * (4.0 * k as f64 * self.eps).exp() * sep.powf(self.exponent())
    }

    pub fn adapted_bound(&self, k: u32, sep: f64) -> f64 {
        if self.d == 0.0 {
            return 0.0;
        }
        self.b2 * (6.0 * k as f64 * self.eps).exp() * sep.powf(self.exponent())
    }

    /// `δ_k = ((1-ς) ξ / (b₂ e^{6kε}))^{1/(a₁α)}`; infinite for a zero budget.
    pub fn delta_k(&self, k: u32, xi: f64, sigma: f64) -> f64 {
        if self.d == 0.0 {
            return f64::INFINITY;
        }
        ((1.0 - sigma) * xi / (self.b2 * (6.0 * k as f64 * self.eps).exp())).powf(1.0 / self.exponent())
    }
}

/// The four exponent fractions (s, cs, u, cu) for a given base `a`.
pub fn exponent_fractions(p: &BlockParams, a: f64) -> Result<[f64; 4]> {
    let e = p.eps;
    let ns = p.lambda - p.lambda_p - 3.0 * e;
    let nu = p.mu - p.mu_p - 3.0 * e;
    if ns <= 0.0 {
        return Err(Error::InvalidParameter("lambda".into(), "lambda - lambda' - 3 eps must be positive".into()));
    }
    if nu <= 0.0 {
        return Err(Error::InvalidParameter("mu".into(), "mu - mu' - 3 eps must be positive".into()));
    }
    let la = a.ln();
    Ok([
        ns / (la + p.lambda - e),
        nu / (la - p.mu_p - e),
        nu / (la + p.mu - e),
        ns / (la - p.lambda_p - e),
    ])
}

/// Smallest `D` with `|D_x f^{±n} - D_y f^{±n}| <= D a^n |x-y|^α` on a grid, n <= 20.
pub fn empirical_cocycle_constant(sys: &SystemSpec, a: f64) -> f64 {
    if sys.is_linear() {
        return 0.0;
    }
    let d = sys.dimension;
    let g: usize = if d == 1 { 64 } else if d == 2 { 12 } else { 5 };
    let h = 1e-4;
    let alpha = sys.holder_exponent;
    let mut best: f64 = 0.0;
    let total = g.pow(d as u32);
    for idx in 0..total {
        let mut p = vec![0.0; d];
        let mut r = idx;
        for c in p.iter_mut() {
            *c = (r % g) as f64 / g as f64 + 0.37 / g as f64;
            r /= g;
        }
        for dir in 0..d {
            let mut q = p.clone();
            q[dir] += h;
            for forward in [true, false] {
                let (mut xp, mut xq) = (p.clone(), q.clone());
                let mut mp = DMatrix::identity(d, d);
                let mut mq = DMatrix::identity(d, d);
                let mut an = 1.0;
                for _ in 0..D_HORIZON {
                    if forward {
                        mp = sys.jacobian(&xp) * mp;
                        mq = sys.jacobian(&xq) * mq;
                        sys.step(&mut xp);
                        sys.step(&mut xq);
                    } else {
                        sys.step_inv(&mut xp);
                        sys.step_inv(&mut xq);
                        mp = sys.jacobian_inv(&xp) * mp;
                        mq = sys.jacobian_inv(&xq) * mq;
                    }
                    an *= a;
                    let diff = crate::geometry::spectral_norm(&(&mp - &mq));
                    best = best.max(diff / (an * h.powf(alpha)));
                }
            }
        }
    }
    best
}

/// Budget from block parameters; `a` defaults to `1.01 L^{1+α}`.
pub fn holder_constants(sys: &SystemSpec, params: &BlockParams, a: Option<f64>) -> Result<HolderBudget> {
    params.validate()?;
    let alpha = sys.holder_exponent;
    let a = a.unwrap_or(1.01 * sys.derivative_bound.max(1.0).powf(1.0 + alpha));
    if a <= 1.0 {
        return Err(Error::InvalidParameter("a".into(), "must exceed 1".into()));
    }
    let fractions = exponent_fractions(params, a)?;
    let a1 = fractions.iter().cloned().fold(0.0, f64::max);
    let d = D_SAFETY * empirical_cocycle_constant(sys, a);
    let e = params.eps;
    let pre = [
        (params.lambda - params.lambda_p - 3.0 * e).exp(),
        (params.mu - params.mu_p - 3.0 * e).exp(),
    ]
    .iter()
    .cloned()
    .fold(0.0, f64::max);
    let b1 = if d == 0.0 {
        0.0
    } else {
        3.0 * pre * fractions.iter().map(|f| d.powf(*f)).fold(0.0, f64::max)
    };
    let b2 = FRAC_PI_2 * 6.0 * c_const(e) * b1 * 3f64.powf(a1 * alpha);
    Ok(HolderBudget { alpha, eps: e, a, d, fractions, a1, b1, b2, theta: a1 * alpha })
}

/// Subspaces of the five bundles at one trajectory index.
fn bundles_at(t: &Trajectory, i: i64) -> [Subspace; 5] {
    let sp = t.splitting(i);
    [sp.es.clone(), t.ecs(i).clone(), sp.ec.clone(), t.ecu(i).clone(), sp.eu.clone()]
}

/// Linear map taking the adapted inner product at the anchor to the Euclidean one.
fn adapted_frame(ev: &AdaptedNormEvaluator) -> DMatrix<f64> {
    let t = ev.trajectory();
    let sp = t.splitting(ev.index);
    let d = t.dim;
    let mut g = DMatrix::zeros(d, d);
    let (ds, dc, _) = sp.dims();
    let mut row = 0;
    for b in 0..3 {
        let basis = sp.bundle(b).basis();
        for j in 0..basis.ncols() {
            let w = ev.component_norms(&basis.column(j).into_owned())[b];
            let off = match b {
                0 => 0,
                1 => ds,
                _ => ds + dc,
            };
            g.row_mut(row).copy_from(&(sp.frame_inv().row(off + j) * w));
            row += 1;
        }
    }
    g
}

fn map_subspace(g: &DMatrix<f64>, s: &Subspace) -> Result<Subspace> {
    if s.rank() == 0 {
        return Ok(s.clone());
    }
    Subspace::from_columns(&(g * s.basis()))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HolderRow {
    pub pair_id: usize,
    pub bundle: String,
    pub k: u32,
    pub separation: f64,
    pub distance: f64,
    pub bound: f64,
    pub adapted_separation: f64,
    pub adapted_distance: f64,
    pub adapted_bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HolderReport {
    pub rows: Vec<HolderRow>,
    pub pairs: usize,
    pub excluded: usize,
    pub pass_rate: f64,
    pub slope: Option<f64>,
    pub exponent: f64,
}

/// One candidate pair: anchor index on the shared trajectory and chart offset.
#[derive(Debug, Clone)]
pub struct PairSpec {
    pub anchor: i64,
    pub offset: Vec<f64>,
}

/// Checks the Hölder bounds on pairs `(z_i, z_i + offset)`.
#[allow(clippy::too_many_arguments)]
pub fn empirical_holder_fit(
    sys: &SystemSpec,
    budget: &HolderBudget,
    params: &BlockParams,
    traj: &Trajectory,
    pairs: &[PairSpec],
    n_h: usize,
    k_max: u32,
    min_pairs: usize,
) -> Result<HolderReport> {
    if pairs.len() < min_pairs {
        return Err(Error::Insufficient(format!("{} pairs, need {}", pairs.len(), min_pairs)));
    }
    let opts = SplittingOptions::default();
    let m = (opts.margin + n_h) as i64;
    let mut rows = Vec::new();
    let mut excluded = 0;
    let mut used = 0;
    let mut fit: Vec<(f64, f64)> = Vec::new();
    for (pid, ps) in pairs.iter().enumerate() {
        let cx = match classify_at(traj, ps.anchor, params, n_h, k_max) {
            Ok(c) => c,
            Err(_) => {
                excluded += 1;
                continue;
            }
        };
        let x = traj.torus_point(ps.anchor);
        let y = x.translate(&ps.offset);
        let ty = Trajectory::new(sys, &y, -m, m, &opts)?;
        let cy = match classify_at(&ty, 0, params, n_h, k_max) {
            Ok(c) => c,
            Err(_) => {
                excluded += 1;
                continue;
            }
        };
        if ty.dims != traj.dims {
            excluded += 1;
            continue;
        }
        let k = cx.kappa.max(cy.kappa);
        let ev = AdaptedNormEvaluator::new(traj, ps.anchor, k, params, None)?;
        let g = adapted_frame(&ev);
        let diff = chart_difference(&x, &TorusPoint::new(ty.point(0).to_vec()))?;
        let sep = diff.norm();
        let sep_a = ev.norm(&diff);
        let bx = bundles_at(traj, ps.anchor);
        let by = bundles_at(&ty, 0);
        used += 1;
        for (b, name) in BUNDLES.iter().enumerate() {
            if bx[b].rank() == 0 || bx[b].rank() == traj.dim {
                continue;
            }
            let dist = subspace_distance(&bx[b], &by[b])?;
            let dist_a = subspace_distance(&map_subspace(&g, &bx[b])?, &map_subspace(&g, &by[b])?)?;
            let bound = budget.ambient_bound(k, sep);
            let bound_a = budget.adapted_bound(k, sep_a);
            let pass = dist <= bound + ZERO_TOL && dist_a <= bound_a + ZERO_TOL;
            if dist > 1e-12 && sep > 0.0 {
                fit.push((sep.ln(), dist.ln()));
            }
            rows.push(HolderRow {
                pair_id: pid,
                bundle: name.to_string(),
                k,
                separation: sep,
                distance: dist,
                bound,
                adapted_separation: sep_a,
                adapted_distance: dist_a,
                adapted_bound: bound_a,
                pass,
            });
        }
    }
    let pass_rate = if rows.is_empty() {
        1.0
    } else {
        rows.iter().filter(|r| r.pass).count() as f64 / rows.len() as f64
    };
    Ok(HolderReport { rows, pairs: used, excluded, pass_rate, slope: slope_fit(&fit), exponent: budget.exponent() })
}

/// Least-squares slope; `None` without spread in x.
pub fn slope_fit(pts: &[(f64, f64)]) -> Option<f64> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx < 1e-12 {
        return None;
    }
    Some(sxy / sxx)
}

/// `E^c` against the intersection of the `E^cs`, `E^cu` estimates.
pub fn center_consistency(t: &Trajectory, i: i64) -> Result<f64> {
    let sp = t.splitting(i);
    if sp.ec.rank() == 0 {
        return Ok(0.0);
    }
    let inter = crate::oseledets::intersect(t.ecs(i), t.ecu(i), sp.ec.rank(), 1e-3)?;
    subspace_distance(&sp.ec, &inter)
}

/// Unit vectors of a rank-one subspace, for diagnostics.
pub fn direction(s: &Subspace) -> Option<DVector<f64>> {
    (s.rank() == 1).then(|| s.basis().column(0).into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::make_system;
    use std::collections::BTreeMap;

    #[test]
    fn quoted_fraction() {
        let p = BlockParams::default();
        let f = exponent_fractions(&p, 2f64.exp()).unwrap();
        let oracle = (0.96 - 0.001 - 0.03) / (2.0 + 0.96 - 0.01);
        assert!((f[0] - oracle).abs() < 1e-15);
        assert!((f[0] - 0.3149).abs() < 1e-4);
        assert!(f.iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn linear_budget_is_zero() {
        let s = make_system("cat", &BTreeMap::new()).unwrap();
        let b = holder_constants(&s, &BlockParams::default(), None).unwrap();
        assert_eq!(b.d, 0.0);
        assert_eq!(b.ambient_bound(3, 0.1), 0.0);
        assert!(b.delta_k(1, 0.1, 0.5).is_infinite());
        assert!(b.a1 > 0.0 && b.a1 < 1.0);
    }

    #[test]
    fn perturbed_budget_monotone() {
        let s = make_system("cat_x_rot_perturbed", &BTreeMap::new()).unwrap();
        let b = holder_constants(&s, &BlockParams::default(), None).unwrap();
        assert!(b.d > 0.0 && b.b2 > b.b1);
        for k in 1..10 {
            assert!(b.ambient_bound(k + 1, 1e-3) > b.ambient_bound(k, 1e-3));
            assert!(b.adapted_bound(k + 1, 1e-3) > b.adapted_bound(k, 1e-3));
            assert!(b.delta_k(k + 1, 0.1, 0.5) < b.delta_k(k, 0.1, 0.5));
        }
    }

    #[test]
    fn bad_params_rejected() {
        let p = BlockParams { lambda: 0.02, ..BlockParams::default() };
        assert!(exponent_fractions(&p, 10.0).is_err());
    }

    #[test]
    fn slope_of_line() {
        let pts: Vec<_> = (0..5).map(|i| (i as f64, 0.5 * i as f64 + 1.0)).collect();
        assert!((slope_fit(&pts).unwrap() - 0.5).abs() < 1e-12);
        assert!(slope_fit(&[(1.0, 1.0)]).is_none());
    }
}
