//! Pseudo-orbits and the quasi-shadowing solver, with closing and specification modes.

use std::cell::OnceCell;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap01, wrapped_delta, Splitting, TorusPoint};
use crate::lyapnorm::{c_const, eps0, sigma1};
use crate::oseledets::{classify_block_with, BlockParams, SplittingOptions};
use crate::regularity::HolderBudget;
use crate::systems::SystemSpec;

/// Constants of the δ schedule and the shadowing scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Schedule {
    pub eta: f64,
    pub xi: f64,
    pub sigma: f64,
    pub eps: f64,
    pub alpha: f64,
    /// ϵ = ε/α.
    pub eps_bar: f64,
    pub eps0: f64,
    pub c: f64,
    pub c_tilde: f64,
    pub c1: f64,
    pub c2: f64,
    pub theta: f64,
    pub gamma: f64,
    pub lambda3: f64,
    pub budget: HolderBudget,
    pub delta_override: Option<f64>,
}

impl Schedule {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        sys: &SystemSpec,
        params: &BlockParams,
        budget: &HolderBudget,
        eta: f64,
        xi: f64,
        sigma: f64,
        c_tilde: f64,
        theta: Option<f64>,
        k_max: u32,
    ) -> Result<Self> {
        let bad = |k: &str, m: &str| Err(Error::InvalidParameter(k.into(), m.into()));
        if !(eta > 0.0 && eta.is_finite()) {
            return bad("eta", "must be positive");
        }
        if !(xi > 0.0 && xi.is_finite()) {
            return bad("xi", "must be positive");
        }
        let s1 = sigma1(params);
        if !(sigma > s1 && sigma < 1.0) {
            return bad("sigma", &format!("must lie in ({s1}, 1)"));
        }
        let theta = theta.unwrap_or(budget.theta);
        if !(theta > 0.0 && theta < 1.0) {
            return bad("theta", "must lie in (0, 1)");
        }
        let alpha = sys.holder_exponent;
        let eps = params.eps;
        let eps_bar = eps / alpha;
        let lambda3 = params.lambda - 4.0 * eps;
        if lambda3 <= eps_bar / theta {
            return bad("theta", "lambda_3 must exceed eps/(alpha theta)");
        }
        let e0 = eps0(params, sys.holder_constant, alpha, k_max);
        let c1 = c_tilde + 1.0;
        let c2 = 2.0 * sys.derivative_bound.max(1.0) * c1;
        let gamma = (e0 * eta / (3.0 * c2)).powf(1.0 / theta);
        Ok(Schedule {
            eta,
            xi,
            sigma,
            eps,
            alpha,
            eps_bar,
            eps0: e0,
            c: c_const(eps),
            c_tilde,
            c1,
            c2,
            theta,
            gamma,
            lambda3,
            budget: budget.clone(),
            delta_override: None,
        })
    }

    pub fn with_override(mut self, delta: Option<f64>) -> Self {
        self.delta_override = delta;
        self
    }

    /// ε_k = ε₀ e^{-kϵ}.
    pub fn eps_scale(&self, k: u32) -> f64 {
        self.eps0 * (-self.eps_bar * k as f64).exp()
    }

    pub fn target(&self, k: u32) -> f64 {
        self.eta * self.eps_scale(k)
    }

    pub fn junction_delta(&self, k: u32) -> f64 {
        let t = 1.0 / self.theta;
        self.gamma / 2.0 * (1.0 - (-self.lambda3 + t * self.eps_bar).exp()) / self.c
            * (-(1.0 + t) * k as f64 * self.eps_bar).exp()
    }

    pub fn holder_delta(&self, k: u32) -> f64 {
        self.budget.delta_k(k, self.xi, self.sigma)
    }

    pub fn certified_delta(&self, k: u32) -> f64 {
        self.junction_delta(k).min(self.holder_delta(k))
    }

    pub fn delta(&self, k: u32) -> f64 {
        self.delta_override.unwrap_or_else(|| self.certified_delta(k))
    }
}

/// Block-index certification with a cached answer for linear systems.
pub struct Certifier<'a> {
    pub sys: &'a SystemSpec,
    pub params: BlockParams,
    pub n_h: usize,
    pub k_max: u32,
    pub opts: SplittingOptions,
    constant: OnceCell<(u32, Splitting)>,
}

impl<'a> Certifier<'a> {
    pub fn new(sys: &'a SystemSpec, params: &BlockParams, n_h: usize, k_max: u32) -> Self {
        Certifier { sys, params: *params, n_h, k_max, opts: SplittingOptions::default(), constant: OnceCell::new() }
    }

    fn run(&self, x: &[f64]) -> Result<(u32, Splitting)> {
        let c = classify_block_with(self.sys, &TorusPoint::new(x.to_vec()), &self.params, self.n_h, self.k_max, &self.opts)?;
        let s = c.splitting.to_splitting(self.sys.dimension)?;
        Ok((c.kappa, s))
    }

    /// κ̂ and the splitting at `x`.
    pub fn certify(&self, x: &[f64]) -> Result<(u32, Splitting)> {
        if self.sys.is_linear() {
            if let Some(c) = self.constant.get() {
                return Ok(c.clone());
            }
            let c = self.run(x)?;
            let _ = self.constant.set(c.clone());
            return Ok(c);
        }
        self.run(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JumpNorm {
    Full,
    /// Only the part off `E^c` at the landing anchor is scheduled.
    Transverse,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Segment {
    pub anchor: Vec<f64>,
    pub length: usize,
    pub k_start: u32,
    pub k_end: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PseudoOrbit {
    pub segments: Vec<Segment>,
    /// `jumps[n]` = chart difference from `f^{a_n}(x_n)` to `x_{n+1}`.
    pub jumps: Vec<Vec<f64>>,
    pub schedule: Vec<f64>,
    pub periodic: bool,
    pub jump_norm: JumpNorm,
}

impl PseudoOrbit {
    pub fn junctions(&self) -> usize {
        if self.periodic {
            self.segments.len()
        } else {
            self.segments.len().saturating_sub(1)
        }
    }

    pub fn next(&self, n: usize) -> usize {
        (n + 1) % self.segments.len()
    }
}

/// Segment end `f^{a}(x)`.
pub fn segment_end(sys: &SystemSpec, x: &[f64], a: usize) -> Vec<f64> {
    let mut p = x.to_vec();
    sys.iterate_raw(&mut p, a as i64);
    p
}

/// Coordinatewise representative of `b - a`, no size guard.
pub fn delta_vec(a: &[f64], b: &[f64]) -> DVector<f64> {
    DVector::from_iterator(a.len(), a.iter().zip(b).map(|(x, y)| wrapped_delta(*x, *y)))
}

fn transverse_norm(sp: &Splitting, v: &DVector<f64>) -> f64 {
    let (s, _, u) = sp.coords(v);
    s.norm().max(u.norm())
}

/// Checks the stored invariants; `splits` are only needed for transverse schedules.
pub fn validate_pseudo_orbit(sys: &SystemSpec, po: &PseudoOrbit, splits: Option<&[Splitting]>) -> Result<()> {
    let m = po.segments.len();
    if m == 0 {
        return Err(Error::Precondition("empty pseudo-orbit".into()));
    }
    if po.jumps.len() != po.junctions() || po.schedule.len() != po.junctions() {
        return Err(Error::Precondition("jump list does not match segments".into()));
    }
    for (n, s) in po.segments.iter().enumerate() {
        if s.length == 0 {
            return Err(Error::Precondition(format!("segment {n} has length 0")));
        }
        if s.anchor.len() != sys.dimension {
            return Err(Error::DimensionMismatch(s.anchor.len(), sys.dimension));
        }
    }
    for n in 0..po.junctions() {
        let s = &po.segments[n];
        let t = &po.segments[po.next(n)];
        if s.k_end.abs_diff(t.k_start) > 1 {
            return Err(Error::Precondition(format!("index jump at junction {n}")));
        }
        let end = segment_end(sys, &s.anchor, s.length);
        let j = delta_vec(&end, &t.anchor);
        if j.iter().zip(&po.jumps[n]).any(|(a, b)| a != b) {
            return Err(Error::Precondition(format!("stored jump {n} does not match the orbit")));
        }
        let size = match (po.jump_norm, splits) {
            (JumpNorm::Full, _) => j.norm(),
            (JumpNorm::Transverse, Some(sp)) => transverse_norm(&sp[po.next(n)], &j),
            (JumpNorm::Transverse, None) => return Err(Error::Precondition("transverse schedule needs splittings".into())),
        };
        if size > 0.0 && size >= po.schedule[n] {
            return Err(Error::Precondition(format!("jump {n} of size {size} exceeds schedule {}", po.schedule[n])));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateOptions {
    pub segments: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub rho: f64,
    pub max_retries: usize,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions { segments: 40, len_min: 1, len_max: 20, rho: 0.5, max_retries: 50 }
    }
}

fn random_unit<R: Rng>(d: usize, rng: &mut R) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(d, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Random pseudo-orbit from a certified start; returns the anchor splittings too.
pub fn generate_pseudo_orbit<R: Rng>(
    cert: &Certifier,
    schedule: &Schedule,
    x0: &[f64],
    opts: &GenerateOptions,
    rng: &mut R,
) -> Result<(PseudoOrbit, Vec<Splitting>)> {
    let sys = cert.sys;
    if !(0.0..=1.0).contains(&opts.rho) {
        return Err(Error::InvalidParameter("rho".into(), "must lie in [0, 1]".into()));
    }
    if opts.len_min == 0 || opts.len_max < opts.len_min || opts.segments == 0 {
        return Err(Error::InvalidParameter("segments".into(), "need segments >= 1 and 1 <= len_min <= len_max".into()));
    }
    let mut x: Vec<f64> = x0.iter().map(|v| wrap01(*v)).collect();
    let (mut k, mut sp) = cert.certify(&x)?;
    let mut segments = Vec::new();
    let mut splits = Vec::new();
    let mut jumps = Vec::new();
    let mut sched = Vec::new();
    for n in 0..opts.segments {
        let a = rng.random_range(opts.len_min..=opts.len_max);
        let end = segment_end(sys, &x, a);
        let (k_end, _) = cert.certify(&end)?;
        segments.push(Segment { anchor: x.clone(), length: a, k_start: k, k_end });
        splits.push(sp.clone());
        if n + 1 == opts.segments {
            break;
        }
        let delta = schedule.delta(k_end);
        let mut accepted = None;
        for _ in 0..opts.max_retries.max(1) {
            let r = opts.rho * delta * rng.random::<f64>();
            let dir = random_unit(sys.dimension, rng);
            let next: Vec<f64> = end.iter().zip(dir.iter()).map(|(e, d)| wrap01(e + r * d)).collect();
            match cert.certify(&next) {
                Ok((kn, spn)) if kn.abs_diff(k_end) <= 1 => {
                    accepted = Some((next, kn, spn));
                    break;
                }
                _ => continue,
            }
        }
        let (next, kn, spn) = accepted.ok_or_else(|| Error::RetryExhausted(format!("junction {n}")))?;
        jumps.push(delta_vec(&end, &next).iter().cloned().collect());
        sched.push(delta);
        x = next;
        k = kn;
        sp = spn;
    }
    Ok((PseudoOrbit { segments, jumps, schedule: sched, periodic: false, jump_norm: JumpNorm::Full }, splits))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShadowOptions {
    pub tol_su: f64,
    pub tol_leaf: f64,
    pub max_iter: usize,
    pub damping: f64,
}

impl Default for ShadowOptions {
    fn default() -> Self {
        ShadowOptions { tol_su: 1e-10, tol_leaf: 1e-8, max_iter: 200, damping: 0.5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShadowResult {
    /// `y_n = x_n + offsets[n]` (mod 1).
    pub starts: Vec<Vec<f64>>,
    pub offsets: Vec<Vec<f64>>,
    /// Center part of `f^{a_n}(y_n) - y_{n+1}` per junction.
    pub center_displacements: Vec<Vec<f64>>,
    pub step_errors: Vec<Vec<f64>>,
    pub su_residuals: Vec<f64>,
    pub targets: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub residual_history: Vec<f64>,
    /// Largest center component of any applied correction.
    pub max_center_leak: f64,
}

impl ShadowResult {
    pub fn sup_error(&self) -> f64 {
        self.step_errors.iter().flatten().cloned().fold(0.0, f64::max)
    }

    pub fn max_center_disp(&self) -> f64 {
        self.center_displacements.iter().map(|u| norm(u)).fold(0.0, f64::max)
    }

    pub fn cumulative_center(&self) -> f64 {
        self.center_displacements.iter().map(|u| norm(u)).sum()
    }

    /// Moves start `n` by `v` (used to build deliberately wrong results).
    pub fn displace(&mut self, n: usize, v: &[f64]) {
        for (k, d) in v.iter().enumerate() {
            self.offsets[n][k] += d;
            self.starts[n][k] = wrap01(self.starts[n][k] + d);
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Runs `(x, c)` for `a` steps; returns the end pair and `|c|` at every step.
pub fn propagate(sys: &SystemSpec, x: &[f64], c: &[f64], a: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut p = x.to_vec();
    let mut q = c.to_vec();
    let mut errs = Vec::with_capacity(a + 1);
    errs.push(norm(&q));
    for _ in 0..a {
        sys.step_offset(&mut p, &mut q);
        errs.push(norm(&q));
    }
    (p, q, errs)
}

struct Blocks {
    ss: DMatrix<f64>,
    uu: DMatrix<f64>,
}

fn block(m: &DMatrix<f64>, off: usize, r: usize) -> DMatrix<f64> {
    m.view((off, off), (r, r)).into_owned()
}

/// `Δ_{n+1} = A_n Δ_n + f_n`, n = 0..len, optionally cyclic (`Δ_len = Δ_0`).
fn forward_recursion(mats: &[DMatrix<f64>], force: &[DVector<f64>], r: usize, cyclic: bool) -> Result<Vec<DVector<f64>>> {
    let m = mats.len();
    let mut out = vec![DVector::zeros(r); if cyclic { m } else { m + 1 }];
    if r == 0 {
        return Ok(out);
    }
    if cyclic {
        let mut phi = DMatrix::identity(r, r);
        let mut b = DVector::zeros(r);
        for n in 0..m {
            phi = &mats[n] * phi;
            b = &mats[n] * b + &force[n];
        }
        let lhs = DMatrix::identity(r, r) - phi;
        out[0] = lhs.lu().solve(&b).ok_or_else(|| Error::Divergence(0))?;
    }
    for n in 0..m {
        if cyclic && n + 1 == m {
            break;
        }
        out[n + 1] = &mats[n] * &out[n] + &force[n];
    }
    Ok(out)
}

/// Junction defects `f^{a_n}(y_n) - y_{n+1}` from offsets; the anchor part is the stored jump.
fn defects(sys: &SystemSpec, po: &PseudoOrbit, cs: &[DVector<f64>]) -> Vec<DVector<f64>> {
    (0..po.junctions())
        .map(|n| {
            let s = &po.segments[n];
            let (_, end_c, _) = propagate(sys, &s.anchor, cs[n].as_slice(), s.length);
            let j = DVector::from_column_slice(&po.jumps[n]);
            DVector::from_vec(end_c) - &cs[po.next(n)] - j
        })
        .collect()
}

/// Chord-Newton iteration on the start offsets.
fn solve_core(
    sys: &SystemSpec,
    po: &PseudoOrbit,
    splits: &[Splitting],
    opts: &ShadowOptions,
) -> Result<(Vec<DVector<f64>>, usize, Vec<f64>, f64)> {
    let m = po.segments.len();
    let d = sys.dimension;
    let (ds, dc, du) = splits[0].dims();
    let nj = po.junctions();
    let mut blocks = Vec::with_capacity(nj);
    for n in 0..nj {
        let s = &po.segments[n];
        let a = sys.cocycle(&TorusPoint::new(s.anchor.clone()), s.length as i64)?;
        let t = splits[po.next(n)].frame_inv() * a * splits[n].frame();
        blocks.push(Blocks { ss: block(&t, 0, ds), uu: block(&t, ds + dc, du) });
    }
    let ss: Vec<DMatrix<f64>> = blocks.iter().map(|b| b.ss.clone()).collect();
    let mut uinv = Vec::with_capacity(nj);
    for b in blocks.iter().rev() {
        uinv.push(b.uu.clone().try_inverse().ok_or(Error::Divergence(0))?);
    }
    let residual = |cs: &[DVector<f64>]| -> (f64, Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let mut worst: f64 = 0.0;
        let mut ws = Vec::with_capacity(nj);
        let mut wu = Vec::with_capacity(nj);
        for (n, w) in defects(sys, po, cs).iter().enumerate() {
            let (s, _, u) = splits[po.next(n)].coords(w);
            worst = worst.max(s.norm()).max(u.norm());
            ws.push(s);
            wu.push(u);
        }
        (worst, ws, wu)
    };
    let mut cs = vec![DVector::zeros(d); m];
    let (mut res, mut ws, mut wu) = residual(&cs);
    let mut history = vec![res];
    let initial = res.max(1e-300);
    let mut iter = 0;
    let mut step = 1.0;
    let mut leak: f64 = 0.0;
    while res >= opts.tol_su {
        if iter >= opts.max_iter {
            return Err(Error::Divergence(iter));
        }
        iter += 1;
        // new defect w + A Δ_n - Δ_{n+1}: s forward, u backward
        let fs: Vec<DVector<f64>> = ws.iter().map(|w| w.clone()).collect();
        let ds_sol = forward_recursion(&ss, &fs, ds, po.periodic)?;
        let fu: Vec<DVector<f64>> = (0..nj).rev().map(|n| -(&uinv[nj - 1 - n] * &wu[n])).collect();
        let du_rev = forward_recursion(&uinv, &fu, du, po.periodic)?;
        let mut du_sol = vec![DVector::zeros(du); m];
        for (j, v) in du_rev.iter().enumerate() {
            let idx = if po.periodic { (m - j) % m } else { nj - j };
            du_sol[idx] = v.clone();
        }
        let mut corr = Vec::with_capacity(m);
        for n in 0..m {
            let sp = &splits[n];
            let mut c = DVector::zeros(d);
            if ds > 0 {
                c += sp.es.basis() * &ds_sol[n];
            }
            if du > 0 {
                c += sp.eu.basis() * &du_sol[n];
            }
            if dc > 0 {
                let (_, cc, _) = sp.coords(&c);
                leak = leak.max(cc.norm());
            }
            corr.push(c);
        }
        loop {
            let trial: Vec<DVector<f64>> = cs.iter().zip(&corr).map(|(c, dlt)| c + dlt * step).collect();
            let (r2, ws2, wu2) = residual(&trial);
            if !r2.is_finite() {
                return Err(Error::Divergence(iter));
            }
            if r2 <= res || step < 1e-6 {
                cs = trial;
                res = r2;
                ws = ws2;
                wu = wu2;
                break;
            }
            step *= opts.damping;
        }
        history.push(res);
        if res > 1e6 * initial {
            return Err(Error::Divergence(iter));
        }
    }
    Ok((cs, iter, history, leak))
}

/// Solves and fills diagnostics without judging the contract.
pub fn solve_unchecked(
    sys: &SystemSpec,
    po: &PseudoOrbit,
    splits: &[Splitting],
    schedule: &Schedule,
    opts: &ShadowOptions,
) -> Result<ShadowResult> {
    if splits.len() != po.segments.len() {
        return Err(Error::DimensionMismatch(splits.len(), po.segments.len()));
    }
    if po.segments.is_empty() {
        return Err(Error::Precondition("empty pseudo-orbit".into()));
    }
    if po.segments.iter().any(|s| s.length == 0) {
        return Err(Error::Precondition("segment of length 0".into()));
    }
    if po.jumps.len() != po.junctions() {
        return Err(Error::Precondition("jump list does not match segments".into()));
    }
    let (cs, iterations, history, leak) = solve_core(sys, po, splits, opts)?;
    let offsets: Vec<Vec<f64>> = cs.iter().map(|c| c.iter().cloned().collect()).collect();
    let starts = po
        .segments
        .iter()
        .zip(&offsets)
        .map(|(s, c)| s.anchor.iter().zip(c).map(|(a, b)| wrap01(a + b)).collect())
        .collect();
    let mut res = ShadowResult {
        starts,
        offsets,
        center_displacements: Vec::new(),
        step_errors: Vec::new(),
        su_residuals: Vec::new(),
        targets: po.segments.iter().map(|s| schedule.target(s.k_start)).collect(),
        iterations,
        converged: true,
        residual_history: history,
        max_center_leak: leak,
    };
    let rep = measure(sys, po, splits, &res.offsets, schedule, opts);
    res.step_errors = rep.step_errors;
    res.center_displacements = rep.junctions.iter().map(|j| j.center.clone()).collect();
    res.su_residuals = rep.junctions.iter().map(|j| j.su_residual).collect();
    Ok(res)
}

/// Full solve; a converged run that violates the contract is an error.
pub fn quasi_shadow_solve(
    sys: &SystemSpec,
    po: &PseudoOrbit,
    splits: &[Splitting],
    schedule: &Schedule,
    opts: &ShadowOptions,
) -> Result<ShadowResult> {
    let mut res = solve_unchecked(sys, po, splits, schedule, opts)?;
    let rep = verify_quasi_shadow(sys, po, splits, &res, schedule, opts);
    if !rep.pass {
        res.converged = false;
        let seg = rep.segments.iter().find(|s| !s.pass).map(|s| s.segment);
        let jun = rep.junctions.iter().find(|j| !j.pass).map(|j| j.junction);
        return Err(Error::ContractFailure(format!("segment {seg:?}, junction {jun:?}")));
    }
    Ok(res)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentCheck {
    pub segment: usize,
    pub worst_error: f64,
    pub target: f64,
    pub margin: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JunctionCheck {
    pub junction: usize,
    pub jump_norm: f64,
    pub center: Vec<f64>,
    pub center_disp_norm: f64,
    pub su_residual: f64,
    pub cone_pass: bool,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShadowReport {
    pub segments: Vec<SegmentCheck>,
    pub junctions: Vec<JunctionCheck>,
    #[serde(skip)]
    pub step_errors: Vec<Vec<f64>>,
    pub sup_error: f64,
    pub cumulative_center: f64,
    pub pass: bool,
}

fn measure(
    sys: &SystemSpec,
    po: &PseudoOrbit,
    splits: &[Splitting],
    offsets: &[Vec<f64>],
    schedule: &Schedule,
    opts: &ShadowOptions,
) -> ShadowReport {
    let mut segments = Vec::new();
    let mut step_errors = Vec::new();
    for (n, s) in po.segments.iter().enumerate() {
        let (_, _, errs) = propagate(sys, &s.anchor, &offsets[n], s.length);
        let worst = errs.iter().cloned().fold(0.0, f64::max);
        let target = schedule.target(s.k_start);
        segments.push(SegmentCheck { segment: n, worst_error: worst, target, margin: target - worst, pass: worst < target });
        step_errors.push(errs);
    }
    let cs: Vec<DVector<f64>> = offsets.iter().map(|c| DVector::from_column_slice(c)).collect();
    let mut junctions = Vec::new();
    for (n, w) in defects(sys, po, &cs).iter().enumerate() {
        let sp = &splits[po.next(n)];
        let (s, c, u) = sp.coords(w);
        let su = s.norm().max(u.norm());
        let center: Vec<f64> = if c.is_empty() { vec![0.0; w.len()] } else { (sp.ec.basis() * &c).iter().cloned().collect() };
        let cn = c.norm();
        let cone_pass = su <= schedule.xi * cn || w.norm() <= opts.tol_leaf;
        junctions.push(JunctionCheck {
            junction: n,
            jump_norm: norm(&po.jumps[n]),
            center_disp_norm: cn,
            center,
            su_residual: su,
            cone_pass,
            pass: cone_pass && su <= opts.tol_leaf,
        });
    }
    let sup_error = step_errors.iter().flatten().cloned().fold(0.0, f64::max);
    let cumulative_center = junctions.iter().map(|j| j.center_disp_norm).sum();
    let pass = segments.iter().all(|s| s.pass) && junctions.iter().all(|j| j.pass);
    ShadowReport { segments, junctions, step_errors, sup_error, cumulative_center, pass }
}

/// Recomputes every per-step distance and junction test from the start offsets alone.
pub fn verify_quasi_shadow(
    sys: &SystemSpec,
    po: &PseudoOrbit,
    splits: &[Splitting],
    result: &ShadowResult,
    schedule: &Schedule,
    opts: &ShadowOptions,
) -> ShadowReport {
    measure(sys, po, splits, &result.offsets, schedule, opts)
}

/// Closing along `x, ..., f^{p-1}(x)` treated as a periodic pseudo-orbit.
pub fn quasi_close(
    cert: &Certifier,
    schedule: &Schedule,
    x: &[f64],
    p: usize,
    beta: Option<f64>,
    opts: &ShadowOptions,
) -> Result<(ShadowResult, PseudoOrbit)> {
    let sys = cert.sys;
    if p == 0 {
        return Err(Error::Precondition("period must be positive".into()));
    }
    let x: Vec<f64> = x.iter().map(|v| wrap01(*v)).collect();
    let end = segment_end(sys, &x, p);
    let (k0, sp) = cert.certify(&x)?;
    let (k1, _) = cert.certify(&end)?;
    let k = k0.max(k1);
    let b = beta.unwrap_or_else(|| schedule.delta(k));
    let j = delta_vec(&end, &x);
    let d = j.norm();
    if d >= b {
        return Err(Error::Precondition(format!("d(x, f^p x) = {d} is not below beta = {b}")));
    }
    let po = PseudoOrbit {
        segments: vec![Segment { anchor: x, length: p, k_start: k, k_end: k }],
        jumps: vec![j.iter().cloned().collect()],
        schedule: vec![b],
        periodic: true,
        jump_norm: JumpNorm::Full,
    };
    let splits = vec![sp];
    let res = quasi_shadow_solve(sys, &po, &splits, schedule, opts)?;
    Ok((res, po))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MiningOptions {
    pub reference_len: usize,
    pub horizon: usize,
    pub radius: f64,
    pub start: Vec<f64>,
}

/// Transitions found by the reference-orbit scan.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Transition {
    pub from: usize,
    pub to: usize,
    pub point: Vec<f64>,
    pub time: usize,
    pub found_at: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpecificationResult {
    pub result: ShadowResult,
    pub pseudo: PseudoOrbit,
    pub transitions: Vec<Transition>,
    pub report: ShadowReport,
}

/// Longest orbit piece solved as one shooting segment; longer ones are cut with zero jumps.
pub const MAX_SHOOT: usize = 10;

fn shoot_pieces(cert: &Certifier, x: &[f64], a: usize, segments: &mut Vec<Segment>, splits: &mut Vec<Splitting>) -> Result<()> {
    let mut z = x.to_vec();
    let mut left = a;
    while left > 0 {
        let len = left.min(MAX_SHOOT);
        let (k0, sp) = cert.certify(&z)?;
        let end = segment_end(cert.sys, &z, len);
        let (k1, _) = cert.certify(&end)?;
        segments.push(Segment { anchor: z, length: len, k_start: k0, k_end: k1 });
        splits.push(sp);
        z = end;
        left -= len;
    }
    Ok(())
}

/// Glues `(x_i, a_i)` cyclically through mined transition segments and shadows the loop.
pub fn quasi_specification(
    cert: &Certifier,
    schedule: &Schedule,
    segs: &[(Vec<f64>, usize)],
    mining: &MiningOptions,
    opts: &ShadowOptions,
) -> Result<SpecificationResult> {
    let sys = cert.sys;
    let l = segs.len();
    if l == 0 {
        return Err(Error::Precondition("no segments".into()));
    }
    let mut certs = Vec::with_capacity(l);
    for (x, a) in segs {
        if *a == 0 {
            return Err(Error::Precondition("segment of length 0".into()));
        }
        let x: Vec<f64> = x.iter().map(|v| wrap01(*v)).collect();
        let end = segment_end(sys, &x, *a);
        let (k0, sp0) = cert.certify(&x)?;
        let (k1, sp1) = cert.certify(&end)?;
        certs.push((x, *a, end, k0, k1, sp0, sp1));
    }
    // transverse projectors at each target anchor
    let proj: Vec<DMatrix<f64>> = certs
        .iter()
        .map(|c| {
            let d = sys.dimension;
            DMatrix::identity(d, d) - c.5.projector(1)
        })
        .collect();
    let src_proj: Vec<DMatrix<f64>> = certs
        .iter()
        .map(|c| {
            let d = sys.dimension;
            DMatrix::identity(d, d) - c.6.projector(1)
        })
        .collect();
    let near = |p: &[f64], q: &[f64], pr: &DMatrix<f64>| -> bool { (pr * delta_vec(q, p)).norm() < mining.radius };
    let mut last_src: Vec<Option<(usize, Vec<f64>)>> = vec![None; l];
    let mut found: Vec<Option<Transition>> = vec![None; l];
    let mut p = mining.start.iter().map(|v| wrap01(*v)).collect::<Vec<f64>>();
    for t in 0..mining.reference_len {
        for i in 0..l {
            if found[i].is_some() {
                continue;
            }
            let j = (i + 1) % l;
            if let Some((t0, z)) = &last_src[i] {
                let x_gap = t - t0;
                if x_gap >= 1 && x_gap <= mining.horizon && near(&p, &certs[j].0, &proj[j]) {
                    if let Ok((kz, _)) = cert.certify(z) {
                        if kz.abs_diff(certs[i].4) <= 1 {
                            found[i] = Some(Transition { from: i, to: j, point: z.clone(), time: x_gap, found_at: t });
                            continue;
                        }
                    }
                }
            }
            if near(&p, &certs[i].2, &src_proj[i]) {
                last_src[i] = Some((t, p.clone()));
            }
        }
        if found.iter().all(|f| f.is_some()) {
            break;
        }
        sys.step(&mut p);
    }
    let transitions: Vec<Transition> = found
        .into_iter()
        .enumerate()
        .map(|(i, f)| f.ok_or(Error::NoTransition(i)))
        .collect::<Result<_>>()?;
    let mut segments = Vec::new();
    let mut splits = Vec::new();
    for (i, c) in certs.iter().enumerate() {
        shoot_pieces(cert, &c.0, c.1, &mut segments, &mut splits)?;
        let tr = &transitions[i];
        shoot_pieces(cert, &tr.point, tr.time, &mut segments, &mut splits)?;
    }
    let m = segments.len();
    let mut jumps = Vec::with_capacity(m);
    for n in 0..m {
        let end = segment_end(sys, &segments[n].anchor, segments[n].length);
        jumps.push(delta_vec(&end, &segments[(n + 1) % m].anchor).iter().cloned().collect());
    }
    let pseudo = PseudoOrbit { segments, jumps, schedule: vec![mining.radius; m], periodic: true, jump_norm: JumpNorm::Transverse };
    validate_pseudo_orbit(sys, &pseudo, Some(&splits))?;
    let result = solve_unchecked(sys, &pseudo, &splits, schedule, opts)?;
    let report = verify_quasi_shadow(sys, &pseudo, &splits, &result, schedule, opts);
    Ok(SpecificationResult { result, pseudo, transitions, report })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub segment: usize,
    pub step: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub step_error: f64,
    pub eps_scale: f64,
    pub pass: bool,
}

/// Rows for `shadow_trace.csv`.
pub fn trace_rows(sys: &SystemSpec, po: &PseudoOrbit, res: &ShadowResult, schedule: &Schedule) -> Vec<TraceRow> {
    let mut rows = Vec::new();
    for (n, s) in po.segments.iter().enumerate() {
        let mut x = s.anchor.clone();
        let mut c = res.offsets[n].clone();
        let scale = schedule.target(s.k_start);
        for i in 0..=s.length {
            let e = norm(&c);
            let y = x.iter().zip(&c).map(|(a, b)| wrap01(a + b)).collect();
            rows.push(TraceRow { segment: n, step: i, x: x.clone(), y, step_error: e, eps_scale: scale, pass: e < scale });
            if i < s.length {
                sys.step_offset(&mut x, &mut c);
            }
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regularity::holder_constants;
    use crate::systems::{cat_lambda, make_system};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn setup(name: &str) -> (SystemSpec, Schedule) {
        let s = make_system(name, &BTreeMap::new()).unwrap();
        let p = BlockParams::default();
        let b = holder_constants(&s, &p, None).unwrap();
        let sc = Schedule::new(&s, &p, &b, 0.1, 0.1, 0.5, 1.0, None, 64).unwrap();
        (s, sc)
    }

    #[test]
    fn rho_zero_is_true_orbit() {
        let (s, sc) = setup("cat_x_rot");
        let c = Certifier::new(&s, &BlockParams::default(), 50, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let o = GenerateOptions { segments: 8, rho: 0.0, ..Default::default() };
        let (po, sp) = generate_pseudo_orbit(&c, &sc, &[0.1, 0.2, 0.3], &o, &mut rng).unwrap();
        assert!(po.jumps.iter().flatten().all(|v| *v == 0.0));
        validate_pseudo_orbit(&s, &po, None).unwrap();
        let r = quasi_shadow_solve(&s, &po, &sp, &sc, &ShadowOptions::default()).unwrap();
        assert_eq!(r.iterations, 0);
        assert!(r.max_center_disp() == 0.0);
        for (y, seg) in r.starts.iter().zip(&po.segments) {
            assert_eq!(y, &seg.anchor);
        }
    }

    #[test]
    fn cat_classical_shadowing() {
        let (s, sc) = setup("cat");
        let sc = sc.with_override(Some(1e-6));
        let c = Certifier::new(&s, &BlockParams::default(), 50, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let o = GenerateOptions { segments: 100, len_min: 1, len_max: 1, rho: 1.0, max_retries: 5 };
        let (po, sp) = generate_pseudo_orbit(&c, &sc, &[0.3, 0.6], &o, &mut rng).unwrap();
        let r = quasi_shadow_solve(&s, &po, &sp, &sc, &ShadowOptions::default()).unwrap();
        assert_eq!(r.iterations, 1);
        assert!(r.residual_history[1] <= 1e-12);
        assert!(r.sup_error() <= 4e-6, "{}", r.sup_error());
        assert_eq!(r.max_center_disp(), 0.0);
        // eigencoordinates: |Δs| <= δ/(1-q), |Δu| <= δ q/(1-q), same bound one step later
        let q = 1.0 / cat_lambda();
        let oracle = (1.0 + q * q).sqrt() / (1.0 - q);
        assert!((oracle - 3f64.sqrt()).abs() < 1e-12);
        assert!(r.sup_error() <= oracle * 1e-6 * (1.0 + 1e-9));
    }

    #[test]
    fn fiber_jumps_are_pure_center() {
        let (s, sc) = setup("cat_x_rot");
        let c = Certifier::new(&s, &BlockParams::default(), 50, 64);
        let (k, sp) = c.certify(&[0.1, 0.2, 0.3]).unwrap();
        let mut segs = Vec::new();
        let mut jumps = Vec::new();
        let mut x = vec![0.1, 0.2, 0.3];
        for n in 0..5 {
            let end = segment_end(&s, &x, 3);
            segs.push(Segment { anchor: x.clone(), length: 3, k_start: k, k_end: k });
            let mut nx = end.clone();
            nx[2] = wrap01(nx[2] + 1e-9 * (n as f64 + 1.0));
            jumps.push(delta_vec(&end, &nx).iter().cloned().collect::<Vec<_>>());
            x = nx;
        }
        jumps.pop();
        let po = PseudoOrbit { segments: segs, jumps: jumps.clone(), schedule: vec![1e-8; 4], periodic: false, jump_norm: JumpNorm::Full };
        validate_pseudo_orbit(&s, &po, None).unwrap();
        let splits = vec![sp; 5];
        let r = quasi_shadow_solve(&s, &po, &splits, &sc, &ShadowOptions::default()).unwrap();
        for (y, seg) in r.starts.iter().zip(&po.segments) {
            assert_eq!(y, &seg.anchor);
        }
        for (u, j) in r.center_displacements.iter().zip(&jumps) {
            for (a, b) in u.iter().zip(j) {
                assert!((a + b).abs() < 1e-15, "{a} {b}");
            }
        }
    }

    #[test]
    fn displaced_start_fails_verification() {
        let (s, sc) = setup("cat_x_rot");
        let c = Certifier::new(&s, &BlockParams::default(), 50, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (po, sp) = generate_pseudo_orbit(&c, &sc, &[0.4, 0.1, 0.7], &GenerateOptions { segments: 6, ..Default::default() }, &mut rng).unwrap();
        let mut r = quasi_shadow_solve(&s, &po, &sp, &sc, &ShadowOptions::default()).unwrap();
        let o = ShadowOptions::default();
        assert!(verify_quasi_shadow(&s, &po, &sp, &r, &sc, &o).pass);
        let u = sp[2].eu.basis().column(0).into_owned() * (2.0 * sc.target(po.segments[2].k_start));
        r.displace(2, u.as_slice());
        let rep = verify_quasi_shadow(&s, &po, &sp, &r, &sc, &o);
        assert!(!rep.pass);
        assert!(!rep.segments[2].pass);
    }

    #[test]
    fn fixed_point_closes_to_itself() {
        let (s, sc) = setup("cat");
        let c = Certifier::new(&s, &BlockParams::default(), 50, 64);
        let (r, _) = quasi_close(&c, &sc, &[0.0, 0.0], 1, None, &ShadowOptions::default()).unwrap();
        assert_eq!(r.starts[0], vec![0.0, 0.0]);
        assert_eq!(r.max_center_disp(), 0.0);
    }

    #[test]
    fn product_closing_drift() {
        let (s, sc) = setup("cat_x_rot");
        let c = Certifier::new(&s, &BlockParams::default(), 50, 64);
        // (0.2, 0.4) has period 2 under the cat map
        let x = [0.2, 0.4, 0.55];
        let (r, _) = quasi_close(&c, &sc, &x, 2, Some(0.01), &ShadowOptions::default()).unwrap();
        let alpha = s.parameters["alpha_rot"];
        let u = &r.center_displacements[0];
        assert!((u[2] - 2.0 * alpha).abs() < 1e-8);
        assert!(u[0].abs() < 1e-12 && u[1].abs() < 1e-12);
    }

    #[test]
    fn specification_glues_three_segments() {
        let (s, sc) = setup("cat_x_rot");
        let c = Certifier::new(&s, &BlockParams::default(), 50, 64);
        let segs = vec![(vec![0.31, 0.77, 0.2], 6), (vec![0.52, 0.13, 0.6], 6), (vec![0.05, 0.91, 0.9], 6)];
        let m = MiningOptions { reference_len: 3_000_000, horizon: 64, radius: 0.01, start: vec![0.123, 0.456, 0.789] };
        let r = quasi_specification(&c, &sc, &segs, &m, &ShadowOptions::default()).unwrap();
        assert!(r.report.pass);
        assert!(r.pseudo.periodic);
        assert!(r.pseudo.segments.iter().all(|g| g.length <= MAX_SHOOT));
        for (i, t) in r.transitions.iter().enumerate() {
            assert_eq!((t.from, t.to), (i, (i + 1) % 3));
            assert!(t.time >= 1 && t.time <= 64);
        }
        // the pieces of one orbit run meet exactly
        let total: usize = r.pseudo.segments.iter().map(|g| g.length).sum();
        assert_eq!(total, 18 + r.transitions.iter().map(|t| t.time).sum::<usize>());
    }

    #[test]
    fn schedule_rejects_sigma_below_domination() {
        let s = make_system("cat", &BTreeMap::new()).unwrap();
        let p = BlockParams::default();
        let b = holder_constants(&s, &p, None).unwrap();
        let e = Schedule::new(&s, &p, &b, 0.1, 0.1, 0.2, 1.0, None, 64).unwrap_err();
        assert!(matches!(e, Error::InvalidParameter(k, _) if k == "sigma"));
    }
}
