//! Adapted norms on block points, their translations to nearby points, and
//! cone-field checks.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::dist2_raw;
use crate::oseledets::{BlockParams, Trajectory};
use crate::systems::SystemSpec;

/// Relative truncation tolerance for the series.
pub const TAIL_TOL: f64 = 1e-8;

/// `C = sum_{n in Z} e^{-eps |n|}` in closed form.
pub fn c_const(eps: f64) -> f64 {
    (1.0 + (-eps).exp()) / (1.0 - (-eps).exp())
}

/// Relative tail factor `2 e^{eps k} e^{-eps (N+1)} / (1 - e^{-eps})`.
pub fn tail_factor(eps: f64, k: u32, ntr: usize) -> f64 {
    2.0 * (eps * k as f64).exp() * (-eps * (ntr as f64 + 1.0)).exp() / (1.0 - (-eps).exp())
}

/// Smallest truncation length whose tail factor is below [`TAIL_TOL`].
pub fn truncation_for(eps: f64, k: u32) -> usize {
    let need = (2.0 * (eps * k as f64).exp() / ((1.0 - (-eps).exp()) * TAIL_TOL)).ln() / eps - 1.0;
    let mut n = need.ceil().max(1.0) as usize;
    while tail_factor(eps, k, n) > TAIL_TOL {
        n += 1;
    }
    n
}

/// Adapted norm `|.|'` at orbit index `i` of a trajectory.
#[derive(Debug, Clone)]
pub struct AdaptedNormEvaluator<'a> {
    traj: &'a Trajectory,
    pub index: i64,
    pub k: u32,
    pub params: BlockParams,
    pub ntr: usize,
    pub tail_rel: f64,
    weights: [Option<f64>; 3],
}

impl<'a> AdaptedNormEvaluator<'a> {
    pub fn new(traj: &'a Trajectory, index: i64, k: u32, params: &BlockParams, ntr: Option<usize>) -> Result<Self> {
        let ntr = ntr.unwrap_or_else(|| truncation_for(params.eps, k));
        if !traj.is_valid(index - ntr as i64) || !traj.is_valid(index + ntr as i64) {
            return Err(Error::Precondition(format!("trajectory too short for truncation {ntr}")));
        }
        let tail_rel = tail_factor(params.eps, k, ntr);
        let mut ev = AdaptedNormEvaluator { traj, index, k, params: *params, ntr, tail_rel, weights: [None; 3] };
        for b in 0..3 {
            if traj.bundles[b].rank == 1 {
                let one = DVector::from_element(1, 1.0);
                ev.weights[b] = Some(ev.series(b, &one));
            }
        }
        Ok(ev)
    }

    pub fn trajectory(&self) -> &Trajectory {
        self.traj
    }

    /// Truncated series for bundle coordinates `a`.
    fn series(&self, b: usize, a: &DVector<f64>) -> f64 {
        let (l1, m1, lp1, mp1) = self.params.rates1();
        let t = self.traj;
        let i = self.index;
        let n = self.ntr;
        let sum = |rate: f64, forward: bool, from: usize| -> f64 {
            t.log_orbit_norms(b, i, n, forward, a)
                .iter()
                .enumerate()
                .skip(from)
                .map(|(k, l)| (rate * k as f64 + l).exp())
                .sum()
        };
        match b {
            0 => sum(l1, true, 0),
            1 => sum(-mp1, true, 0) + sum(-lp1, false, 1),
            _ => sum(m1, false, 0),
        }
    }

    /// `(|v_s|'_s, |v_c|'_c, |v_u|'_u)` after decomposing `v` along the splitting.
    pub fn component_norms(&self, v: &DVector<f64>) -> [f64; 3] {
        let sp = self.traj.splitting(self.index);
        let (a, b, c) = sp.coords(v);
        let coords = [a, b, c];
        let mut out = [0.0; 3];
        for k in 0..3 {
            if coords[k].is_empty() {
                continue;
            }
            out[k] = match self.weights[k] {
                Some(w) => coords[k][0].abs() * w,
                None => self.series(k, &coords[k]),
            };
        }
        out
    }

    pub fn norm(&self, v: &DVector<f64>) -> f64 {
        let c = self.component_norms(v);
        c[0].max(c[1]).max(c[2])
    }

    /// Ambient norms of the three components.
    pub fn component_ambient(&self, v: &DVector<f64>) -> [f64; 3] {
        let sp = self.traj.splitting(self.index);
        let (a, b, c) = sp.coords(v);
        [a.norm(), b.norm(), c.norm()]
    }

    pub fn anchor(&self) -> &[f64] {
        self.traj.point(self.index)
    }
}

pub fn adapted_norm(ev: &AdaptedNormEvaluator, v: &DVector<f64>) -> Result<f64> {
    if v.len() != ev.trajectory().dim {
        return Err(Error::DimensionMismatch(v.len(), ev.trajectory().dim));
    }
    let n = ev.norm(v);
    if !n.is_finite() {
        return Err(Error::DegenerateSplitting("non-finite adapted norm".into()));
    }
    Ok(n)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckRecord {
    pub check: String,
    pub anchor: Vec<f64>,
    pub k: u32,
    pub margin: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct NormReport {
    pub records: Vec<CheckRecord>,
}

impl NormReport {
    pub fn pass(&self) -> bool {
        self.records.iter().all(|r| r.pass)
    }

    pub fn worst_margin(&self) -> f64 {
        self.records.iter().map(|r| r.margin).fold(f64::INFINITY, f64::min)
    }

    pub fn failures(&self) -> usize {
        self.records.iter().filter(|r| !r.pass).count()
    }

    fn push(&mut self, check: &str, anchor: &[f64], k: u32, margin: f64, tol: f64) {
        self.records.push(CheckRecord {
            check: check.to_string(),
            anchor: anchor.to_vec(),
            k,
            margin,
            pass: margin >= -tol,
        });
    }

    pub fn extend(&mut self, other: NormReport) {
        self.records.extend(other.records);
    }
}

/// Relative slack of `lhs <= rhs`.
fn rel(lhs: f64, rhs: f64) -> f64 {
    let s = rhs.abs().max(lhs.abs()).max(1e-300);
    (rhs - lhs) / s
}

fn project(ev: &AdaptedNormEvaluator, v: &DVector<f64>, b: usize) -> DVector<f64> {
    let sp = ev.trajectory().splitting(ev.index);
    let (a, c, u) = sp.coords(v);
    match b {
        0 => sp.es.basis() * a,
        1 => sp.ec.basis() * c,
        _ => sp.eu.basis() * u,
    }
}

/// One-step rate inequalities of the adapted norm at `x` using the evaluators at
/// `f^-1 x`, `x`, `f x` (all built on the same trajectory).
pub fn verify_adapted_contraction(
    sys: &SystemSpec,
    prev: &AdaptedNormEvaluator,
    ev: &AdaptedNormEvaluator,
    next: &AdaptedNormEvaluator,
    samples: &[DVector<f64>],
) -> NormReport {
    let t = ev.trajectory();
    let i = ev.index;
    let (l1, m1, lp1, mp1) = ev.params.rates1();
    let lo = 1.0 / sys.derivative_bound;
    let tol = ev.tail_rel + next.tail_rel.max(prev.tail_rel) + 1e-12;
    let mut rep = NormReport::default();
    let x = ev.anchor();
    let fwd = t.jac(i);
    let bwd = t.jac_inv(i - 1);
    for v in samples {
        let vs = project(ev, v, 0);
        if vs.norm() > 0.0 {
            let a = ev.component_norms(&vs)[0];
            let b = next.norm(&(fwd * &vs));
            rep.push("stable_upper", x, ev.k, rel(b, (-l1).exp() * a), tol);
            rep.push("stable_lower", x, ev.k, rel(lo * a, b), tol);
        }
        let vc = project(ev, v, 1);
        if vc.norm() > 0.0 {
            let a = ev.component_norms(&vc)[1];
            let b = next.norm(&(fwd * &vc));
            rep.push("center_upper", x, ev.k, rel(b, mp1.exp() * a), tol);
            rep.push("center_lower", x, ev.k, rel((-lp1).exp() * a, b), tol);
        }
        let vu = project(ev, v, 2);
        if vu.norm() > 0.0 {
            let a = ev.component_norms(&vu)[2];
            let b = prev.norm(&(bwd * &vu));
            rep.push("unstable_upper", x, ev.k, rel(b, (-m1).exp() * a), tol);
            rep.push("unstable_lower", x, ev.k, rel(lo * a, b), tol);
        }
    }
    rep
}

/// `(1/3)|v| <= |v|' <= C e^{eps k} |v|` on samples.
pub fn norm_equivalence_bounds(ev: &AdaptedNormEvaluator, samples: &[DVector<f64>]) -> NormReport {
    let c = c_const(ev.params.eps);
    let up = c * (ev.params.eps * ev.k as f64).exp();
    let mut rep = NormReport::default();
    let x = ev.anchor();
    for v in samples {
        let n = v.norm();
        let a = ev.norm(v);
        if n == 0.0 {
            rep.push("equiv_zero", x, ev.k, if a == 0.0 { 0.0 } else { -1.0 }, 0.0);
            continue;
        }
        rep.push("equiv_lower", x, ev.k, rel(n / 3.0, a), 1e-12);
        rep.push("equiv_upper", x, ev.k, rel(a, up * n), ev.tail_rel);
    }
    rep
}

/// Recomputes the norm with a 50% longer truncation and compares against the tail bound.
pub fn truncation_soundness(ev: &AdaptedNormEvaluator, samples: &[DVector<f64>]) -> Result<NormReport> {
    let longer = (ev.ntr * 3).div_ceil(2);
    let ev2 = AdaptedNormEvaluator::new(ev.trajectory(), ev.index, ev.k, &ev.params, Some(longer))?;
    let mut rep = NormReport::default();
    let x = ev.anchor();
    for v in samples {
        let a = ev.component_norms(v);
        let b = ev2.component_norms(v);
        let amb = ev.component_ambient(v);
        for k in 0..3 {
            let bound = ev.tail_rel * amb[k];
            let diff = (b[k] - a[k]).abs();
            rep.push("truncation", x, ev.k, bound + 1e-14 * a[k] - diff, 0.0);
        }
    }
    Ok(rep)
}

/// ε_k by the four-branch formula (all branches infinite when K = 0).
pub fn eps_k(params: &BlockParams, k_const: f64, alpha: f64, k: u32) -> f64 {
    if k_const == 0.0 {
        return 1.0;
    }
    let e = params.eps;
    let (l1, m1, lp1, mp1) = params.rates1();
    let (l2, m2, lp2, mp2) = (l1 - e, m1 - e, lp1 + e, mp1 + e);
    let denom = 3.0 * c_const(e) * (e * (k as f64 + 1.0)).exp() * k_const;
    let branches = [
        (-l2).exp() - (-l1).exp(),
        lp2.exp() - lp1.exp(),
        (-m2).exp() - (-m1).exp(),
        mp2.exp() - mp1.exp(),
    ];
    branches
        .iter()
        .map(|b| (b / denom).powf(1.0 / alpha))
        .fold(1.0, f64::min)
}

/// `ε₀ = min_k ε_k e^{k ϵ}` with `ϵ = eps/alpha`.
pub fn eps0(params: &BlockParams, k_const: f64, alpha: f64, k_max: u32) -> f64 {
    let eb = params.eps / alpha;
    (1..=k_max)
        .map(|k| eps_k(params, k_const, alpha, k) * (eb * k as f64).exp())
        .fold(f64::INFINITY, f64::min)
}

/// Radius `ε₀ e^{-k ϵ}` of the certified ball at index k.
pub fn ball_radius(params: &BlockParams, alpha: f64, eps0: f64, k: u32) -> f64 {
    eps0 * (-(params.eps / alpha) * k as f64).exp()
}

/// The translated-norm inequalities at `y` near `x = z_i`.
pub fn translated_norm_check(
    sys: &SystemSpec,
    prev: &AdaptedNormEvaluator,
    ev: &AdaptedNormEvaluator,
    next: &AdaptedNormEvaluator,
    y: &[f64],
    eps0: f64,
    samples: &[DVector<f64>],
) -> Result<NormReport> {
    let x = ev.anchor();
    let d = dist2_raw(x, y).sqrt();
    let alpha = sys.holder_exponent;
    let radius = ball_radius(&ev.params, alpha, eps0, ev.k);
    if d >= radius {
        return Err(Error::OutsideBall { dist: d, radius });
    }
    let e = ev.params.eps;
    let (l1, m1, lp1, mp1) = ev.params.rates1();
    let (l2, m2, lp2, mp2) = (l1 - e, m1 - e, lp1 + e, mp1 + e);
    let lo = 1.0 / sys.derivative_bound - (e.exp() - 1.0);
    let fwd = sys.jacobian(y);
    let mut ym = y.to_vec();
    sys.step_inv(&mut ym);
    let bwd = sys.jacobian_inv(&ym);
    let tol = ev.tail_rel + next.tail_rel.max(prev.tail_rel) + 1e-12;
    let mut rep = NormReport::default();
    for v in samples {
        let vs = project(ev, v, 0);
        if vs.norm() > 0.0 {
            let a = ev.component_norms(&vs)[0];
            let b = next.norm(&(&fwd * &vs));
            rep.push("translated_stable_upper", x, ev.k, rel(b, (-l2).exp() * a), tol);
            rep.push("translated_stable_lower", x, ev.k, rel(lo * a, b), tol);
        }
        let vc = project(ev, v, 1);
        if vc.norm() > 0.0 {
            let a = ev.component_norms(&vc)[1];
            let b = next.norm(&(&fwd * &vc));
            rep.push("translated_center_upper", x, ev.k, rel(b, mp2.exp() * a), tol);
            rep.push("translated_center_lower", x, ev.k, rel((-lp2).exp() * a, b), tol);
        }
        let vu = project(ev, v, 2);
        if vu.norm() > 0.0 {
            let a = ev.component_norms(&vu)[2];
            let b = prev.norm(&(&bwd * &vu));
            rep.push("translated_unstable_upper", x, ev.k, rel(b, (-m2).exp() * a), tol);
            rep.push("translated_unstable_lower", x, ev.k, rel(lo * a, b), tol);
        }
    }
    Ok(rep)
}

/// Stronger bound from the proof: `e^{-λ₁} + 3 C e^{ε(k+1)} K |y-x|^α`.
pub fn proof_level_stable_rate(sys: &SystemSpec, params: &BlockParams, k: u32, dist: f64) -> f64 {
    let (l1, ..) = params.rates1();
    (-l1).exp()
        + 3.0 * c_const(params.eps) * (params.eps * (k as f64 + 1.0)).exp() * sys.holder_constant * dist.powf(sys.holder_exponent)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConeKind {
    U,
    Cu,
    S,
    Cs,
}

impl ConeKind {
    pub const ALL: [ConeKind; 4] = [ConeKind::U, ConeKind::Cu, ConeKind::S, ConeKind::Cs];

    /// (base bundles, complement bundles, forward?)
    pub fn layout(self) -> (&'static [usize], &'static [usize], bool) {
        match self {
            ConeKind::U => (&[2], &[0, 1], true),
            ConeKind::Cu => (&[1, 2], &[0], true),
            ConeKind::S => (&[0], &[1, 2], false),
            ConeKind::Cs => (&[0, 1], &[2], false),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ConeKind::U => "u",
            ConeKind::Cu => "cu",
            ConeKind::S => "s",
            ConeKind::Cs => "cs",
        }
    }
}

/// Width `|v_2|'' / |v_1|''` of `v` relative to a cone kind at an evaluator.
pub fn cone_width(ev: &AdaptedNormEvaluator, v: &DVector<f64>, kind: ConeKind) -> f64 {
    let (base, comp, _) = kind.layout();
    let c = ev.component_norms(v);
    let nb = base.iter().map(|&b| c[b]).fold(0.0, f64::max);
    let nc = comp.iter().map(|&b| c[b]).fold(0.0, f64::max);
    if nb == 0.0 {
        return f64::INFINITY;
    }
    nc / nb
}

/// Domination rate `ς₁` of the adapted norms: no cone width can grow faster.
pub fn sigma1(params: &BlockParams) -> f64 {
    let (l1, m1, lp1, mp1) = params.rates1();
    (-(l1 - lp1).min(m1 - mp1)).exp()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConeReport {
    pub xi: f64,
    pub sigma: f64,
    pub sigma_hat: f64,
    pub per_kind: Vec<(String, f64)>,
    pub rates: NormReport,
    pub pass: bool,
}

/// Builds boundary vectors `v1 + v2` with `|v2|'' = xi |v1|''` from raw samples.
fn boundary_vectors(ev: &AdaptedNormEvaluator, kind: ConeKind, xi: f64, samples: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let (base, comp, _) = kind.layout();
    let sp = ev.trajectory().splitting(ev.index);
    let present = |set: &[usize]| set.iter().any(|&b| sp.bundle(b).rank() > 0);
    if !present(base) {
        return Vec::new();
    }
    let mut out = Vec::new();
    let side = |v: &DVector<f64>, set: &[usize], equalize: bool| -> DVector<f64> {
        let mut w = DVector::zeros(v.len());
        for &b in set {
            let p = project(ev, v, b);
            if p.norm() == 0.0 {
                continue;
            }
            if equalize {
                let n = ev.component_norms(&p)[b];
                w += p / n;
            } else {
                w += p;
            }
        }
        w
    };
    for (j, v) in samples.iter().enumerate() {
        let equalize = j % 2 == 1;
        let v1 = side(v, base, equalize);
        if v1.norm() == 0.0 {
            continue;
        }
        let n1 = cone_norm(ev, &v1, base);
        let mut cand = v1.clone();
        if present(comp) {
            let v2 = side(v, comp, equalize);
            let n2 = cone_norm(ev, &v2, comp);
            if n2 > 0.0 {
                cand += v2 * (xi * n1 / n2);
            }
        }
        out.push(cand);
    }
    out
}

fn cone_norm(ev: &AdaptedNormEvaluator, v: &DVector<f64>, set: &[usize]) -> f64 {
    let c = ev.component_norms(v);
    set.iter().map(|&b| c[b]).fold(0.0, f64::max)
}

/// Cone nesting and the cone-rate inequalities at `y` near `x = z_i`.
#[allow(clippy::too_many_arguments)]
pub fn cone_invariance_check(
    sys: &SystemSpec,
    prev: &AdaptedNormEvaluator,
    ev: &AdaptedNormEvaluator,
    next: &AdaptedNormEvaluator,
    y: &[f64],
    xi: f64,
    sigma: f64,
    samples: &[DVector<f64>],
) -> ConeReport {
    let fwd = sys.jacobian(y);
    let mut ym = y.to_vec();
    sys.step_inv(&mut ym);
    let bwd = sys.jacobian_inv(&ym);
    let e = ev.params.eps;
    let (l1, m1, lp1, mp1) = ev.params.rates1();
    let (l3, m3, lp3, mp3) = (l1 - 2.0 * e, m1 - 2.0 * e, lp1 + 2.0 * e, mp1 + 2.0 * e);
    let mut sigma_hat: f64 = 0.0;
    let mut per_kind = Vec::new();
    for kind in ConeKind::ALL {
        let (_, _, forward) = kind.layout();
        let vs = boundary_vectors(ev, kind, xi, samples);
        if vs.is_empty() {
            continue;
        }
        let (map, target) = if forward { (&fwd, next) } else { (&bwd, prev) };
        let mut worst: f64 = 0.0;
        for v in &vs {
            let w = map * v;
            worst = worst.max(cone_width(target, &w, kind) / xi);
        }
        sigma_hat = sigma_hat.max(worst);
        per_kind.push((kind.name().to_string(), worst));
    }
    let tol = ev.tail_rel + next.tail_rel.max(prev.tail_rel) + 1e-12;
    let x = ev.anchor();
    let mut rates = NormReport::default();
    let sp = ev.trajectory().splitting(ev.index);
    // s-cone under Df, c-cone under Df, u-cone under Df^-1
    let cone_s = |b: usize, comp: &[usize]| -> Vec<DVector<f64>> {
        let mut out = Vec::new();
        for (j, v) in samples.iter().enumerate() {
            let p = project(ev, v, b);
            if p.norm() == 0.0 {
                continue;
            }
            let n1 = ev.component_norms(&p)[b];
            let mut q = DVector::zeros(v.len());
            for &c in comp {
                let pc = project(ev, v, c);
                if pc.norm() > 0.0 {
                    let nc = ev.component_norms(&pc)[c];
                    q += if j % 2 == 1 { pc / nc } else { pc };
                }
            }
            let nq = cone_norm(ev, &q, comp);
            let mut cand = p.clone();
            if nq > 0.0 {
                cand += q * (xi * n1 / nq);
            }
            out.push(cand);
        }
        out
    };
    if sp.es.rank() > 0 {
        for v in cone_s(0, &[1, 2]) {
            let a = ev.norm(&v);
            let b = next.norm(&(&fwd * &v));
            rates.push("cone_stable_rate", x, ev.k, rel(b, (-l3).exp() * a), tol);
        }
    }
    if sp.ec.rank() > 0 {
        for v in cone_s(1, &[0, 2]) {
            let a = ev.norm(&v);
            let b = next.norm(&(&fwd * &v));
            rates.push("cone_center_upper", x, ev.k, rel(b, mp3.exp() * a), tol);
            rates.push("cone_center_lower", x, ev.k, rel((-lp3).exp() * a, b), tol);
        }
    }
    if sp.eu.rank() > 0 {
        for v in cone_s(2, &[0, 1]) {
            let a = ev.norm(&v);
            let b = prev.norm(&(&bwd * &v));
            rates.push("cone_unstable_rate", x, ev.k, rel(b, (-m3).exp() * a), tol);
        }
    }
    let pass = sigma_hat <= sigma && rates.pass();
    ConeReport { xi, sigma, sigma_hat, per_kind, rates, pass }
}

/// Largest `a = 2^-j` with `C e^{(k+1)eps} K (a ε_k)^α <= a^α`; the algebraic
/// condition does not depend on `a`, so `accept` carries the empirical angle test.
pub fn choose_a_xi(
    sys: &SystemSpec,
    params: &BlockParams,
    k: u32,
    eps0: f64,
    mut accept: impl FnMut(f64) -> bool,
) -> Option<f64> {
    let alpha = sys.holder_exponent;
    let ek = ball_radius(params, alpha, eps0, k);
    let lead = c_const(params.eps) * (params.eps * (k as f64 + 1.0)).exp() * sys.holder_constant;
    for j in 0..40 {
        let a = 0.5f64.powi(j);
        if lead * (a * ek).powf(alpha) <= a.powf(alpha) && accept(a) {
            return Some(a);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::TorusPoint;
    use crate::oseledets::{classify_at, SplittingOptions};
    use crate::systems::{cat_lambda, golden, make_system};
    use std::collections::BTreeMap;

    fn traj(name: &str, ext: i64) -> (SystemSpec, Trajectory) {
        let s = make_system(name, &BTreeMap::new()).unwrap();
        let x = TorusPoint::new(vec![0.31, 0.67, 0.12][..s.dimension].to_vec());
        let o = SplittingOptions::default();
        let m = o.margin as i64;
        let t = Trajectory::new(&s, &x, -ext - m, ext + m, &o).unwrap();
        (s, t)
    }

    #[test]
    fn closed_form_c() {
        assert!((c_const(0.1) - 20.016663889550088).abs() < 1e-9);
        assert!((c_const(0.01) - 200.00166666).abs() < 1e-6);
    }

    #[test]
    fn cat_stable_series() {
        let (_s, t) = traj("cat", 3000);
        let p = BlockParams::default();
        let ev = AdaptedNormEvaluator::new(&t, 0, 1, &p, None).unwrap();
        let es = t.splitting(0).es.basis().column(0).into_owned();
        let chi = cat_lambda().ln();
        let oracle = 1.0 / (1.0 - (0.94f64 - chi).exp());
        assert!((oracle - 45.10).abs() < 0.01, "{oracle}");
        let got = adapted_norm(&ev, &es).unwrap();
        assert!((got - oracle).abs() < 1e-6 * oracle);
        assert_eq!(adapted_norm(&ev, &DVector::zeros(2)).unwrap(), 0.0);
        assert!(got <= c_const(0.01) * 0.01f64.exp());
    }

    #[test]
    fn fiber_series_closed_form() {
        let (_s, t) = traj("cat_x_rot", 3000);
        let p = BlockParams::default();
        let ev = AdaptedNormEvaluator::new(&t, 0, 1, &p, None).unwrap();
        let v = DVector::from_vec(vec![0.0, 0.0, 1.0]);
        let (_, _, lp1, mp1) = p.rates1();
        let n = ev.ntr as f64;
        let f = (1.0 - (-mp1 * (n + 1.0)).exp()) / (1.0 - (-mp1).exp());
        let g = (-lp1).exp() * (1.0 - (-lp1 * n).exp()) / (1.0 - (-lp1).exp());
        assert!((ev.norm(&v) - (f + g)).abs() < 1e-9 * (f + g));
    }

    #[test]
    fn truncation_length_meets_tolerance() {
        for k in [1, 10, 64] {
            let n = truncation_for(0.01, k);
            assert!(tail_factor(0.01, k, n) <= TAIL_TOL);
            assert!(tail_factor(0.01, k, n - 1) > TAIL_TOL);
        }
    }

    #[test]
    fn contraction_and_corruption() {
        let (s, t) = traj("cat", 3000);
        let p = BlockParams::default();
        let ev = |i| AdaptedNormEvaluator::new(&t, i, 1, &p, None).unwrap();
        let samples = vec![DVector::from_vec(vec![1.0, 0.3]), DVector::from_vec(vec![-0.2, 1.0])];
        let rep = verify_adapted_contraction(&s, &ev(-1), &ev(0), &ev(1), &samples);
        assert!(rep.pass(), "{:?}", rep.records);
        // stable ratio is exactly e^{-chi}
        let es = t.splitting(0).es.basis().column(0).into_owned();
        let r = ev(1).norm(&(t.jac(0) * &es)) / ev(0).norm(&es);
        assert!((r - (-cat_lambda().ln()).exp()).abs() < 1e-9);

        // swap E^s and E^u in a fresh trajectory-free check
        let bad_es = t.splitting(0).eu.basis().column(0).into_owned();
        let a = ev(0).norm(&bad_es);
        let b = ev(1).norm(&(t.jac(0) * &bad_es));
        let (l1, ..) = p.rates1();
        assert!(b > (-l1).exp() * a);
    }

    #[test]
    fn rotation_center_ratio_is_one() {
        let (s, t) = {
            let s = make_system("rotation", &BTreeMap::new()).unwrap();
            let o = SplittingOptions::default();
            let t = Trajectory::new(&s, &TorusPoint::new(vec![0.2]), -3100, 3100, &o).unwrap();
            (s, t)
        };
        let p = BlockParams::default();
        let ev = |i| AdaptedNormEvaluator::new(&t, i, 1, &p, None).unwrap();
        let v = vec![DVector::from_vec(vec![1.0])];
        let r = ev(1).norm(&(t.jac(0) * &v[0])) / ev(0).norm(&v[0]);
        assert!((r - 1.0).abs() < 1e-12);
        assert!(verify_adapted_contraction(&s, &ev(-1), &ev(0), &ev(1), &v).pass());
    }

    #[test]
    fn equivalence_holds_on_cat() {
        let (_s, t) = traj("cat", 3700);
        let p = BlockParams::default();
        let ev = AdaptedNormEvaluator::new(&t, 0, 1, &p, None).unwrap();
        let samples: Vec<_> = (0..16)
            .map(|j| {
                let a = j as f64 * 0.4;
                DVector::from_vec(vec![a.cos(), a.sin()])
            })
            .chain(std::iter::once(DVector::zeros(2)))
            .collect();
        assert!(norm_equivalence_bounds(&ev, &samples).pass());
        assert!(truncation_soundness(&ev, &samples).unwrap().pass());
    }

    #[test]
    fn cat_cone_widths() {
        let (s, t) = traj("cat", 3000);
        let p = BlockParams::default();
        let ev = |i| AdaptedNormEvaluator::new(&t, i, 1, &p, None).unwrap();
        let samples = vec![DVector::from_vec(vec![1.0, golden()]), DVector::from_vec(vec![0.3, -0.8])];
        let rep = cone_invariance_check(&s, &ev(-1), &ev(0), &ev(1), t.point(0), 0.1, 0.5, &samples);
        let chi = cat_lambda().ln();
        assert!((rep.sigma_hat - (-2.0 * chi).exp()).abs() < 1e-9, "{}", rep.sigma_hat);
        assert!(rep.pass);
        let wide = cone_invariance_check(&s, &ev(-1), &ev(0), &ev(1), t.point(0), 10.0, 0.5, &samples);
        assert!(!wide.rates.pass());
    }

    #[test]
    fn eps0_linear_and_perturbed() {
        let p = BlockParams::default();
        assert!((eps0(&p, 0.0, 1.0, 64) - 0.01f64.exp()).abs() < 1e-15);
        let e = eps0(&p, 6.0, 1.0, 64);
        assert!(e > 0.0 && e < 1e-5);
        // ε₀ e^{-kϵ} never exceeds ε_k
        for k in 1..=64 {
            assert!(ball_radius(&p, 1.0, e, k) <= eps_k(&p, 6.0, 1.0, k) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn product_certificate_feeds_evaluator() {
        let (s, t) = traj("cat_x_rot", 3000);
        let p = BlockParams::default();
        let c = classify_at(&t, 0, &p, 50, 64).unwrap();
        let ev = AdaptedNormEvaluator::new(&t, 0, c.kappa, &p, None).unwrap();
        let y: Vec<f64> = t.point(0).iter().map(|v| (v + 0.2) % 1.0).collect();
        let e0 = eps0(&p, s.holder_constant, s.holder_exponent, 64);
        let prev = AdaptedNormEvaluator::new(&t, -1, c.kappa, &p, None).unwrap();
        let next = AdaptedNormEvaluator::new(&t, 1, c.kappa, &p, None).unwrap();
        let samples = vec![DVector::from_vec(vec![0.3, -0.2, 0.9])];
        assert!(translated_norm_check(&s, &prev, &ev, &next, &y, e0, &samples).unwrap().pass());
    }
}
