//! One runner per subcommand. Each returns an [`Outcome`]; numerical failures become FAIL
//! outcomes, configuration errors propagate.

use std::collections::BTreeSet;
use std::time::Instant;

use nalgebra::DVector;
use rand::Rng;
use serde_json::json;

use super::config::ExperimentConfig;
use super::{coord_cells, coord_header, par_map, substream, to_value, Cell, Outcome, Table};
use crate::entropy::{
    build_kn, cat_exact_rows, harvest_quasi_periodic, katok_entropy, qpp_rows, return_trend, sample_points, theorem_c_check,
    validate_kn, verify_qpp_set, EntropyEstimate, OrbitTable, QppBudget, QppRow, Sampler,
};
use crate::error::{Error, Result};
use crate::geometry::{wrapped_delta, TorusPoint};
use crate::lyapnorm::{
    ball_radius, cone_invariance_check, eps0, norm_equivalence_bounds, translated_norm_check, truncation_for, truncation_soundness,
    verify_adapted_contraction, AdaptedNormEvaluator, ConeReport, NormReport,
};
use crate::oseledets::{check_gap, classify_at, classify_block_with, lyapunov_spectrum, BlockParams, SplittingOptions, Trajectory};
use crate::regularity::{empirical_holder_fit, holder_constants, PairSpec, ZERO_TOL};
use crate::shadowing::{
    delta_vec, generate_pseudo_orbit, quasi_close, quasi_specification, segment_end, solve_unchecked, trace_rows, verify_quasi_shadow,
    Certifier, GenerateOptions, MiningOptions, PseudoOrbit, Schedule, ShadowOptions, ShadowReport, ShadowResult,
};
use crate::systems::{SystemKind, SystemSpec};

/// Everything a runner needs, built once from the configuration.
pub struct Setup<'c> {
    pub cfg: &'c ExperimentConfig,
    pub sys: SystemSpec,
    pub params: BlockParams,
    pub schedule: Schedule,
    pub opts: ShadowOptions,
    pub jobs: usize,
}

impl<'c> Setup<'c> {
    pub fn new(cfg: &'c ExperimentConfig, jobs: usize) -> Result<Self> {
        cfg.validate()?;
        let sys = cfg.system_spec()?;
        let params = cfg.block_params();
        let budget = holder_constants(&sys, &params, None)?;
        let s = &cfg.shadow;
        let schedule = Schedule::new(&sys, &params, &budget, s.eta, s.xi, s.sigma, s.c_tilde, None, cfg.blocks.k_max)
            .map_err(|e| match e {
                Error::InvalidParameter(k, m) => Error::Config { key: format!("shadow.{k}"), msg: m },
                e => e,
            })?
            .with_override(s.delta_override);
        let opts = ShadowOptions { tol_su: s.tol_su, tol_leaf: s.tol_leaf, max_iter: s.max_iter, damping: s.damping };
        Ok(Setup { cfg, sys, params, schedule, opts, jobs: jobs.max(1) })
    }

    pub fn certifier(&self) -> Certifier<'_> {
        Certifier::new(&self.sys, &self.params, self.cfg.blocks.horizon, self.cfg.blocks.k_max)
    }

    fn rng(&self, name: &str) -> rand_chacha::ChaCha8Rng {
        substream(self.cfg.seed, name)
    }

    fn d(&self) -> usize {
        self.sys.dimension
    }
}

/// Splits `items` into one chunk per job; `f` sees a whole chunk (so it can own a certifier).
fn chunked<T: Sync, R: Send>(jobs: usize, items: &[T], f: impl Fn(usize, &[T]) -> Vec<R> + Sync) -> Vec<R> {
    if items.is_empty() {
        return Vec::new();
    }
    let size = items.len().div_ceil(jobs.max(1));
    let chunks: Vec<&[T]> = items.chunks(size).collect();
    par_map(jobs, &chunks, |c, part| f(c * size, part)).into_iter().flatten().collect()
}

fn uniform<R: Rng>(d: usize, rng: &mut R) -> Vec<f64> {
    (0..d).map(|_| rng.random::<f64>()).collect()
}

fn unit<R: Rng>(d: usize, rng: &mut R) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(d, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

fn opt(v: Option<f64>) -> Cell {
    Cell::F(v.unwrap_or(f64::NAN))
}

fn finish(o: Result<Outcome>, name: &str, t0: Instant) -> Result<Outcome> {
    let mut o = match o {
        Ok(o) => o,
        Err(e @ Error::Config { .. }) => return Err(e),
        Err(e) => Outcome::failed(name, &e),
    };
    if let serde_json::Value::Object(m) = &mut o.summary {
        m.insert("runtime_s".into(), json!(t0.elapsed().as_secs_f64()));
    }
    Ok(o)
}

/// Runs one subcommand, or every experiment in order for `all`.
pub fn run_named(sub: &str, cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<Outcome>> {
    let s = Setup::new(cfg, jobs)?;
    let one = |name: &str, f: &dyn Fn(&Setup) -> Result<Outcome>| -> Result<Outcome> {
        let t0 = Instant::now();
        finish(f(&s), name, t0)
    };
    match sub {
        "lyap" => Ok(vec![one("lyap", &lyap)?]),
        "blocks" => Ok(vec![one("blocks", &blocks)?]),
        "norms" => Ok(vec![one("norms", &norms)?]),
        "holder" => Ok(vec![one("holder", &holder)?]),
        "shadow" => Ok(vec![one("shadow", &shadow)?]),
        "close" => Ok(vec![one("close", &close)?]),
        "spec" => Ok(vec![one("spec", &spec)?]),
        "entropy" => Ok(vec![one("entropy", &entropy)?]),
        "qpp" => Ok(vec![one("qpp", &qpp)?]),
        "theorem-c" => Ok(vec![one("theorem-c", &|s| theorem_c(s, None))?]),
        "all" => {
            let mut out = Vec::new();
            for (name, f) in [
                ("lyap", &lyap as &dyn Fn(&Setup) -> Result<Outcome>),
                ("blocks", &blocks),
                ("norms", &norms),
                ("holder", &holder),
                ("shadow", &shadow),
                ("close", &close),
                ("spec", &spec),
                ("qpp", &qpp),
            ] {
                out.push(one(name, f)?);
            }
            let t0 = Instant::now();
            let est = estimate_entropy(&s);
            out.push(finish(est.clone().map(|e| entropy_outcome(&s, e)), "entropy", t0)?);
            let t0 = Instant::now();
            out.push(finish(theorem_c(&s, est.ok()), "theorem-c", t0)?);
            Ok(out)
        }
        other => Err(Error::Config { key: "subcommand".into(), msg: format!("unknown subcommand `{other}`") }),
    }
}

pub fn lyap(s: &Setup) -> Result<Outcome> {
    let d = s.d();
    let mut rng = s.rng("lyap");
    let pts: Vec<Vec<f64>> = (0..s.cfg.lyap.points).map(|_| uniform(d, &mut rng)).collect();
    let h = s.cfg.lyap.horizon;
    let specs = par_map(s.jobs, &pts, |_, p| lyapunov_spectrum(&s.sys, &TorusPoint::new(p.clone()), h));
    let mut header = vec!["point".to_string()];
    header.extend(coord_header("x", d));
    header.extend(coord_header("exp", d));
    header.push("gap_ok".into());
    let mut t = Table::with_header("lyap.csv", header);
    let mut mean = vec![0.0; d];
    let mut gaps = true;
    let degenerate = s.sys.bundle_dims.0 == 0 && s.sys.bundle_dims.2 == 0;
    for (j, (p, sp)) in pts.iter().zip(specs).enumerate() {
        let sp = sp?;
        // no hyperbolic bundle: the whole space is center, so only neutrality is checked
        let gap = if degenerate {
            sp.exponents.iter().all(|e| e.abs() <= 4.0 * s.params.eps)
        } else {
            check_gap(&sp.exponents, s.sys.bundle_dims, s.params.eps).is_ok()
        };
        gaps &= gap;
        for (m, e) in mean.iter_mut().zip(&sp.exponents) {
            *m += e / pts.len() as f64;
        }
        let mut row = vec![Cell::from(j)];
        row.extend(coord_cells(p));
        row.extend(coord_cells(&sp.exponents));
        row.push(gap.into());
        t.push(row);
    }
    let mut o = Outcome::new("lyap");
    o.pass = gaps;
    o.summary = json!({ "horizon": h, "points": pts.len(), "mean_exponents": mean, "gap_ok": gaps, "degenerate": degenerate });
    o.tables.push(t);
    Ok(o)
}

pub fn blocks(s: &Setup) -> Result<Outcome> {
    let d = s.d();
    let b = &s.cfg.blocks;
    let mut rng = s.rng("blocks");
    let pts: Vec<Vec<f64>> = (0..b.points).map(|_| uniform(d, &mut rng)).collect();
    let so = SplittingOptions::default();
    let certs =
        par_map(s.jobs, &pts, |_, p| classify_block_with(&s.sys, &TorusPoint::new(p.clone()), &s.params, b.horizon, b.k_max, &so));
    let mut header = vec!["point".to_string()];
    header.extend(coord_header("x", d));
    for h in ["certified", "kappa", "margin_stable", "margin_center_fwd", "margin_center_bwd", "margin_unstable"] {
        header.push(h.into());
    }
    let mut t = Table::with_header("blocks.csv", header);
    let mut kept = Vec::new();
    let mut structural = Vec::new();
    let mut hist = std::collections::BTreeMap::new();
    for (j, (p, c)) in pts.iter().zip(certs).enumerate() {
        let mut row = vec![Cell::from(j)];
        row.extend(coord_cells(p));
        match c {
            Ok(c) => {
                *hist.entry(c.kappa).or_insert(0usize) += 1;
                let m = c.margins;
                row.extend([true.into(), c.kappa.into(), opt(m.stable), opt(m.center_fwd), opt(m.center_bwd), opt(m.unstable)]);
                kept.push(c);
            }
            Err(e) => {
                if !matches!(e, Error::NoIndex(_)) {
                    structural.push(e.to_string());
                }
                row.extend([false.into(), Cell::I(-1), opt(None), opt(None), opt(None), opt(None)]);
            }
        }
        t.push(row);
    }
    let mut o = Outcome::new("blocks");
    o.pass = !kept.is_empty() && structural.is_empty();
    o.summary = json!({
        "points": pts.len(),
        "certified": kept.len(),
        "kappa_histogram": hist,
        "errors": structural,
    });
    o.json.push(("certificates.json".into(), json!({ "certificates": to_value(&kept) })));
    o.tables.push(t);
    Ok(o)
}

/// Shared orbit window covering anchors `0, stride, ..` with room for truncated norms.
fn anchor_trajectory(s: &Setup, start: &[f64], span: usize) -> Result<Trajectory> {
    let so = SplittingOptions::default();
    // room for the 3/2-length truncation check
    let ext = ((truncation_for(s.params.eps, s.cfg.blocks.k_max) * 3).div_ceil(2) + s.cfg.blocks.horizon + so.margin + 2) as i64;
    Trajectory::new(&s.sys, &TorusPoint::new(start.to_vec()), -ext, span as i64 + ext, &so)
}

struct NormPoint {
    anchor: i64,
    k: u32,
    norms: NormReport,
    cones: ConeReport,
}

pub fn norms(s: &Setup) -> Result<Outcome> {
    let d = s.d();
    let c = &s.cfg.norms;
    let mut rng = s.rng("norms");
    let start = uniform(d, &mut rng);
    // spare anchors stand in for uncertified ones
    let anchors = c.points + c.points / 10 + 10;
    let t = anchor_trajectory(s, &start, (anchors - 1) * c.stride)?;
    let e0 = eps0(&s.params, s.sys.holder_constant, s.sys.holder_exponent, s.cfg.blocks.k_max);
    let inputs: Vec<(i64, Vec<DVector<f64>>, DVector<f64>)> = (0..anchors)
        .map(|j| {
            let v = (0..c.vectors).map(|_| unit(d, &mut rng)).collect();
            ((j * c.stride) as i64, v, unit(d, &mut rng))
        })
        .collect();
    let results = par_map(s.jobs, &inputs, |_, (i, samples, dir)| -> Result<Option<NormPoint>> {
        let cert = match classify_at(&t, *i, &s.params, s.cfg.blocks.horizon, s.cfg.blocks.k_max) {
            Ok(c) => c,
            Err(_) => return Ok(None),
        };
        let k = cert.kappa;
        let ev = |m: i64| AdaptedNormEvaluator::new(&t, m, k, &s.params, None);
        let (prev, cur, next) = (ev(i - 1)?, ev(*i)?, ev(i + 1)?);
        let mut rep = verify_adapted_contraction(&s.sys, &prev, &cur, &next, samples);
        rep.extend(norm_equivalence_bounds(&cur, samples));
        rep.extend(truncation_soundness(&cur, samples)?);
        let r = 0.5 * ball_radius(&s.params, s.sys.holder_exponent, e0, k).min(0.2);
        let y: Vec<f64> = t.point(*i).iter().zip(dir.iter()).map(|(a, b)| a + r * b).collect();
        rep.extend(translated_norm_check(&s.sys, &prev, &cur, &next, &y, e0, samples)?);
        let cones = cone_invariance_check(&s.sys, &prev, &cur, &next, &y, c.xi, c.sigma, samples);
        Ok(Some(NormPoint { anchor: *i, k, norms: rep, cones }))
    });
    let mut all = NormReport::default();
    let mut cone_rows: Option<Table> = None;
    let (mut used, mut excluded, mut cone_pass, mut sigma_max) = (0usize, 0usize, 0usize, 0.0f64);
    let mut cone_failures = Vec::new();
    for r in results {
        if used == c.points {
            break;
        }
        let Some(p) = r? else {
            excluded += 1;
            continue;
        };
        used += 1;
        all.extend(p.norms);
        let cr = &p.cones;
        sigma_max = sigma_max.max(cr.sigma_hat);
        if cr.pass {
            cone_pass += 1;
        } else {
            cone_failures.push(json!({ "anchor": p.anchor, "sigma_hat": cr.sigma_hat, "failures": cr.rates.failures() }));
        }
        let tab = cone_rows.get_or_insert_with(|| {
            let mut h = vec!["anchor".to_string(), "k".into(), "sigma".into(), "sigma_hat".into()];
            h.extend(cr.per_kind.iter().map(|(n, _)| format!("width_{n}")));
            h.push("pass".into());
            Table::with_header("cones.csv", h)
        });
        let mut row: Vec<Cell> = vec![Cell::I(p.anchor), p.k.into(), cr.sigma.into(), cr.sigma_hat.into()];
        row.extend(cr.per_kind.iter().map(|(_, w)| Cell::F(*w)));
        row.push(cr.pass.into());
        tab.push(row);
    }
    let cone_rate = if used == 0 { 0.0 } else { cone_pass as f64 / used as f64 };
    let cone_ok = if s.sys.is_linear() { cone_pass == used && sigma_max <= c.sigma } else { cone_rate >= c.min_cone_rate };
    let mut o = Outcome::new("norms");
    o.pass = used == c.points && all.pass() && cone_ok;
    o.summary = json!({
        "points": c.points,
        "certified": used,
        "excluded": excluded,
        "records": all.records.len(),
        "norm_failures": all.failures(),
        "worst_margin": all.worst_margin(),
        "cone_pass_rate": cone_rate,
        "sigma_hat_max": sigma_max,
        "sigma": c.sigma,
        "xi": c.xi,
    });
    o.json.push((
        "norms.json".into(),
        json!({ "records": to_value(&all.records), "cone_failures": cone_failures, "pass": o.pass }),
    ));
    o.tables.extend(cone_rows);
    Ok(o)
}

pub fn holder(s: &Setup) -> Result<Outcome> {
    let d = s.d();
    let h = &s.cfg.holder;
    let mut rng = s.rng("holder");
    let start = uniform(d, &mut rng);
    let t = anchor_trajectory(s, &start, (h.pairs - 1) * h.stride)?;
    let budget = holder_constants(&s.sys, &s.params, None)?;
    let pairs: Vec<PairSpec> = (0..h.pairs)
        .map(|j| {
            let sep = 10f64.powf(rng.random_range(h.log_sep_min..h.log_sep_max));
            let dir = unit(d, &mut rng);
            PairSpec { anchor: (j * h.stride) as i64, offset: (dir * sep).iter().cloned().collect() }
        })
        .collect();
    let reports = chunked(s.jobs, &pairs, |off, part| {
        vec![(off, empirical_holder_fit(&s.sys, &budget, &s.params, &t, part, s.cfg.blocks.horizon, s.cfg.blocks.k_max, 0))]
    });
    let mut t = Table::new(
        "holder_report.csv",
        &[
            "pair_id",
            "bundle",
            "k",
            "separation",
            "distance",
            "bound",
            "adapted_separation",
            "adapted_distance",
            "adapted_bound",
            "pass",
        ],
    );
    let (mut used, mut excluded, mut passed, mut total, mut max_dist) = (0, 0, 0, 0, 0.0f64);
    for (offset, rep) in reports {
        let rep = rep?;
        used += rep.pairs;
        excluded += rep.excluded;
        for r in &rep.rows {
            total += 1;
            passed += r.pass as usize;
            max_dist = max_dist.max(r.distance);
            t.push(vec![
                (r.pair_id + offset).into(),
                r.bundle.as_str().into(),
                r.k.into(),
                r.separation.into(),
                r.distance.into(),
                r.bound.into(),
                r.adapted_separation.into(),
                r.adapted_distance.into(),
                r.adapted_bound.into(),
                r.pass.into(),
            ]);
        }
    }
    let rate = if total == 0 { 1.0 } else { passed as f64 / total as f64 };
    let mut o = Outcome::new("holder");
    o.pass = used > 0 && if s.sys.is_linear() { max_dist <= ZERO_TOL } else { rate >= h.min_pass_rate };
    o.summary = json!({
        "pairs": used,
        "excluded": excluded,
        "rows": total,
        "pass_rate": rate,
        "max_distance": max_dist,
        "exponent": budget.exponent(),
        "budget": to_value(&budget),
    });
    o.tables.push(t);
    Ok(o)
}

/// One shadowing trial: a valid pseudo-orbit (redrawn until certified) and its solve.
pub struct Trial {
    pub trial: usize,
    pub redraws: usize,
    pub pseudo: Option<PseudoOrbit>,
    pub result: Option<ShadowResult>,
    pub report: Option<ShadowReport>,
    pub error: Option<String>,
}

pub const MAX_REDRAWS: usize = 200;

pub fn shadow_trial(s: &Setup, cert: &Certifier, trial: usize) -> Trial {
    let c = &s.cfg.shadow;
    let mut rng = s.rng(&format!("shadow/trial/{trial}"));
    let gen = GenerateOptions { segments: c.segments, len_min: c.len_min, len_max: c.len_max, rho: c.rho, max_retries: 50 };
    let mut last = String::new();
    for redraws in 0..MAX_REDRAWS {
        let x0 = uniform(s.d(), &mut rng);
        let (po, splits) = match generate_pseudo_orbit(cert, &s.schedule, &x0, &gen, &mut rng) {
            Ok(v) => v,
            Err(e) => {
                last = e.to_string();
                continue;
            }
        };
        return match solve_unchecked(&s.sys, &po, &splits, &s.schedule, &s.opts) {
            Ok(r) => {
                let rep = verify_quasi_shadow(&s.sys, &po, &splits, &r, &s.schedule, &s.opts);
                Trial { trial, redraws, pseudo: Some(po), result: Some(r), report: Some(rep), error: None }
            }
            Err(e) => Trial { trial, redraws, pseudo: Some(po), result: None, report: None, error: Some(e.to_string()) },
        };
    }
    Trial { trial, redraws: MAX_REDRAWS, pseudo: None, result: None, report: None, error: Some(format!("no valid pseudo-orbit: {last}")) }
}

pub fn shadow(s: &Setup) -> Result<Outcome> {
    let d = s.d();
    let c = &s.cfg.shadow;
    let ids: Vec<usize> = (0..c.trials).collect();
    let trials = chunked(s.jobs, &ids, |_, part| {
        let cert = s.certifier();
        part.iter().map(|&t| shadow_trial(s, &cert, t)).collect()
    });
    let mut header = vec!["trial".to_string(), "segment".into(), "step".into()];
    header.extend(coord_header("x", d));
    header.extend(coord_header("y", d));
    header.extend(["step_error".to_string(), "eps_scale".into(), "pass".into()]);
    let mut trace = Table::with_header("shadow_trace.csv", header);
    let mut junc = Table::new(
        "junction.csv",
        &["trial", "junction", "jump_norm", "center_disp_norm", "su_residual", "cone_pass", "pass"],
    );
    let (mut generated, mut converged, mut verified, mut redraws, mut max_iter) = (0, 0, 0, 0, 0);
    let (mut sup, mut worst_ratio, mut max_center, mut max_su) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut errors = Vec::new();
    for t in &trials {
        redraws += t.redraws;
        if let Some(e) = &t.error {
            errors.push(json!({ "trial": t.trial, "error": e }));
        }
        let Some(po) = &t.pseudo else { continue };
        generated += 1;
        let (Some(r), Some(rep)) = (&t.result, &t.report) else { continue };
        converged += 1;
        verified += rep.pass as usize;
        max_iter = max_iter.max(r.iterations);
        sup = sup.max(rep.sup_error);
        max_center = max_center.max(r.max_center_disp());
        for sc in &rep.segments {
            worst_ratio = worst_ratio.max(sc.worst_error / sc.target);
        }
        for row in trace_rows(&s.sys, po, r, &s.schedule) {
            let mut cells = vec![t.trial.into(), row.segment.into(), row.step.into()];
            cells.extend(coord_cells(&row.x));
            cells.extend(coord_cells(&row.y));
            cells.extend([row.step_error.into(), row.eps_scale.into(), row.pass.into()]);
            trace.push(cells);
        }
        for j in &rep.junctions {
            max_su = max_su.max(j.su_residual);
            junc.push(vec![
                t.trial.into(),
                j.junction.into(),
                j.jump_norm.into(),
                j.center_disp_norm.into(),
                j.su_residual.into(),
                j.cone_pass.into(),
                j.pass.into(),
            ]);
        }
    }
    let frac = if generated == 0 { 0.0 } else { converged as f64 / generated as f64 };
    let mut o = Outcome::new("shadow");
    o.pass = generated == c.trials && frac >= c.min_converged && verified == converged;
    o.summary = json!({
        "trials": c.trials,
        "generated": generated,
        "redraws": redraws,
        "converged": converged,
        "converged_fraction": frac,
        "verified": verified,
        "max_iterations": max_iter,
        "sup_error": sup,
        "worst_error_over_target": worst_ratio,
        "max_center_displacement": max_center,
        "max_su_residual": max_su,
        "delta_k1": s.schedule.delta(1),
        "target_k1": s.schedule.target(1),
        "gamma": s.schedule.gamma,
        "eps0": s.schedule.eps0,
        "delta_override": c.delta_override,
        "errors": errors,
    });
    o.json.push(("shadow.json".into(), o.summary.clone()));
    o.tables.push(trace);
    o.tables.push(junc);
    Ok(o)
}

/// Grid seeds on the base coordinates (first two), the rest fixed at 1/2.
fn grid_seeds(d: usize, grid: usize) -> Vec<Vec<f64>> {
    let g = |i: usize| (i as f64 + 0.5) / grid as f64;
    match d {
        1 => (0..grid).map(|i| vec![g(i)]).collect(),
        _ => (0..grid * grid)
            .map(|k| {
                let mut p = vec![0.5; d];
                p[0] = g(k / grid);
                p[1] = g(k % grid);
                p
            })
            .collect(),
    }
}

/// Fiber drift `p α` per step of the rotation factor, when the system has one.
fn fiber_drift(sys: &SystemSpec, p: usize) -> Option<Vec<f64>> {
    let alpha = match sys.kind {
        SystemKind::CatXRot { alpha_rot } | SystemKind::Rotation { alpha_rot } => alpha_rot,
        _ => return None,
    };
    let mut v = vec![0.0; sys.dimension];
    v[sys.dimension - 1] = wrapped_delta(0.0, (p as f64 * alpha).rem_euclid(1.0));
    Some(v)
}

fn cat_fixed_count(p: usize) -> usize {
    crate::entropy::cat_fixed_counts(&[p])[0] as usize
}

pub fn close(s: &Setup) -> Result<Outcome> {
    let d = s.d();
    let c = &s.cfg.close;
    let p = c.period;
    let seeds = grid_seeds(d, c.grid);
    let hits: Vec<&Vec<f64>> = seeds.iter().filter(|x| delta_vec(&segment_end(&s.sys, x, p), x).norm() < c.beta).collect();
    let closed = chunked(s.jobs, &hits, |_, part| {
        let cert = s.certifier();
        part.iter().map(|x| quasi_close(&cert, &s.schedule, x, p, Some(c.beta), &s.opts).map(|(r, _)| r)).collect()
    });
    let drift = fiber_drift(&s.sys, p);
    let mut header = coord_header("z", d);
    header.extend(coord_header("u", d));
    header.extend(["su_residual".to_string(), "center_disp_norm".into(), "return_error".into(), "drift_error".into(), "seeds".into()]);
    let mut t = Table::with_header("close.csv", header);
    let mut distinct: std::collections::BTreeMap<Vec<i64>, (Vec<f64>, Vec<f64>, f64, f64, f64, f64, usize)> = Default::default();
    let (mut ok, mut failed, mut max_ret, mut max_drift, mut max_su) = (0, 0, 0.0f64, 0.0f64, 0.0f64);
    let mut errors = BTreeSet::new();
    for r in closed {
        let r = match r {
            Ok(r) => r,
            Err(e) => {
                failed += 1;
                errors.insert(e.to_string().chars().take(80).collect::<String>());
                continue;
            }
        };
        ok += 1;
        let z = &r.starts[0];
        let u = &r.center_displacements[0];
        let ret = delta_vec(&segment_end(&s.sys, z, p), z).norm();
        let de = drift.as_ref().map(|v| u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()).unwrap_or(0.0);
        max_ret = max_ret.max(ret);
        max_drift = max_drift.max(de);
        max_su = max_su.max(r.su_residuals[0]);
        let key: Vec<i64> = z.iter().map(|v| ((v * 1e8).round() as i64).rem_euclid(100_000_000)).collect();
        let e = distinct.entry(key).or_insert_with(|| (z.clone(), u.clone(), r.su_residuals[0], r.max_center_disp(), ret, de, 0));
        e.6 += 1;
    }
    for (z, u, su, cd, ret, de, n) in distinct.values() {
        let mut row = coord_cells(z);
        row.extend(coord_cells(u));
        row.extend([(*su).into(), (*cd).into(), (*ret).into(), (*de).into(), (*n).into()]);
        t.push(row);
    }
    let oracle = matches!(s.sys.kind, SystemKind::Cat).then(|| cat_fixed_count(p));
    let mut o = Outcome::new("close");
    o.pass = ok > 0
        && max_su <= s.opts.tol_leaf
        && match (&oracle, &drift) {
            (Some(n), _) => distinct.len() == *n && max_ret <= 1e-12,
            (None, Some(_)) => max_drift <= 1e-8,
            (None, None) => true,
        };
    o.summary = json!({
        "period": p,
        "beta": c.beta,
        "grid": c.grid,
        "seeds": seeds.len(),
        "recurrences": hits.len(),
        "closed": ok,
        "failed": failed,
        "distinct": distinct.len(),
        "oracle": oracle,
        "max_return_error": max_ret,
        "max_drift_error": drift.as_ref().map(|_| max_drift),
        "max_su_residual": max_su,
        "errors": errors,
    });
    o.json.push(("close.json".into(), o.summary.clone()));
    o.tables.push(t);
    Ok(o)
}

pub fn spec(s: &Setup) -> Result<Outcome> {
    let d = s.d();
    let c = &s.cfg.spec;
    let cert = s.certifier();
    let mut rng = s.rng("spec");
    let mut segs = Vec::new();
    for _ in 0..c.segments {
        let mut x = None;
        for _ in 0..MAX_REDRAWS {
            let cand = uniform(d, &mut rng);
            let end = segment_end(&s.sys, &cand, c.length);
            if cert.certify(&cand).is_ok() && cert.certify(&end).is_ok() {
                x = Some(cand);
                break;
            }
        }
        let x = x.ok_or_else(|| Error::RetryExhausted("no certified segment start".into()))?;
        segs.push((x, c.length));
    }
    let mining = MiningOptions { reference_len: c.reference_len, horizon: c.horizon, radius: c.radius, start: uniform(d, &mut rng) };
    let r = quasi_specification(&cert, &s.schedule, &segs, &mining, &s.opts)?;
    let mut header = vec!["segment".to_string(), "step".into()];
    header.extend(coord_header("x", d));
    header.extend(coord_header("y", d));
    header.extend(["step_error".to_string(), "eps_scale".into(), "pass".into()]);
    let mut trace = Table::with_header("spec_trace.csv", header);
    for row in trace_rows(&s.sys, &r.pseudo, &r.result, &s.schedule) {
        let mut cells = vec![row.segment.into(), row.step.into()];
        cells.extend(coord_cells(&row.x));
        cells.extend(coord_cells(&row.y));
        cells.extend([row.step_error.into(), row.eps_scale.into(), row.pass.into()]);
        trace.push(cells);
    }
    let mut junc = Table::new("spec_junction.csv", &["junction", "jump_norm", "center_disp_norm", "su_residual", "cone_pass", "pass"]);
    for j in &r.report.junctions {
        junc.push(vec![
            j.junction.into(),
            j.jump_norm.into(),
            j.center_disp_norm.into(),
            j.su_residual.into(),
            j.cone_pass.into(),
            j.pass.into(),
        ]);
    }
    let within = r.transitions.iter().all(|t| t.time <= c.horizon);
    let mut o = Outcome::new("spec");
    o.pass = r.report.pass && within;
    o.summary = json!({
        "segments": c.segments,
        "length": c.length,
        "horizon": c.horizon,
        "radius": c.radius,
        "transitions": to_value(&r.transitions),
        "transitions_within_horizon": within,
        "segments_pass": r.report.segments.iter().all(|x| x.pass),
        "junctions_pass": r.report.junctions.iter().all(|x| x.pass),
        "sup_error": r.report.sup_error,
        "cumulative_center": r.report.cumulative_center,
        "iterations": r.result.iterations,
    });
    o.json.push(("spec.json".into(), o.summary.clone()));
    o.tables.push(trace);
    o.tables.push(junc);
    Ok(o)
}

fn entropy_sampler(s: &Setup) -> Sampler {
    let w = s.cfg.entropy.window;
    if w >= 1.0 {
        Sampler::Uniform
    } else {
        Sampler::Window { lo: vec![0.0; s.d()], hi: vec![w; s.d()] }
    }
}

pub fn estimate_entropy(s: &Setup) -> Result<EntropyEstimate> {
    let e = &s.cfg.entropy;
    let mut rng = s.rng("entropy");
    let pts = sample_points(&s.sys, &entropy_sampler(s), e.samples, &mut rng);
    let t = OrbitTable::build(&s.sys, &pts, e.n_max);
    let ns: Vec<usize> = (e.n_min..=e.n_max).collect();
    katok_entropy(&t, e.gamma, e.delta, &ns)
}

fn entropy_outcome(s: &Setup, est: EntropyEstimate) -> Outcome {
    let mut t = Table::new("entropy.csv", &["n", "N_cover", "N_separated", "N_cover_2gamma", "in_fit"]);
    for r in &est.rows {
        t.push(vec![r.n.into(), r.n_cover.into(), r.n_separated.into(), r.n_cover_double.into(), r.in_fit.into()]);
    }
    let mut o = Outcome::new("entropy");
    o.pass = true;
    o.summary = json!({
        "h_hat": est.h_hat,
        "fit_range": est.fit_range,
        "residual": est.residual,
        "gamma": est.gamma,
        "delta": est.delta,
        "samples": est.samples,
        "window": s.cfg.entropy.window,
    });
    o.json.push(("entropy.json".into(), o.summary.clone()));
    o.tables.push(t);
    o
}

pub fn entropy(s: &Setup) -> Result<Outcome> {
    estimate_entropy(s).map(|e| entropy_outcome(s, e))
}

fn qpp_budget(s: &Setup) -> QppBudget {
    let q = &s.cfg.qpp;
    let mut rng = s.rng("qpp");
    QppBudget { reference_len: q.reference_len, beta: q.beta, start: uniform(s.d(), &mut rng), max_candidates: q.max_candidates }
}

fn qpp_table(rows: &[QppRow], rates: &[(f64, f64)]) -> Table {
    let mut t = Table::new("qpp.csv", &["n", "epsilon", "count", "candidates", "in_fit", "rate_fit"]);
    for r in rows {
        let rate = rates.iter().find(|(e, _)| *e == r.epsilon).map(|x| x.1).unwrap_or(f64::NAN);
        t.push(vec![r.n.into(), r.epsilon.into(), r.count.into(), r.candidates.into(), r.in_fit.into(), rate.into()]);
    }
    t
}

pub fn qpp(s: &Setup) -> Result<Outcome> {
    let q = &s.cfg.qpp;
    let cert = s.certifier();
    let ns: Vec<usize> = (q.n_min..=q.n_max).collect();
    let rows = qpp_rows(&cert, &s.schedule, &ns, &q.epsilons, &qpp_budget(s), &s.opts)?;
    let fit = theorem_c_check(0.0, s.cfg.entropy.gamma, rows.clone(), None);
    let rates: Vec<(f64, f64)> = fit.as_ref().map(|r| r.rates.iter().map(|x| (x.epsilon, x.rate)).collect()).unwrap_or_default();
    let mut o = Outcome::new("qpp");
    o.pass = fit.is_ok();
    o.summary = json!({
        "rates": rates.iter().map(|(e, r)| json!({ "epsilon": e, "rate": r })).collect::<Vec<_>>(),
        "rows": rows.len(),
        "error": fit.err().map(|e| e.to_string()),
    });
    o.tables.push(qpp_table(&rows, &rates));
    Ok(o)
}

pub fn theorem_c(s: &Setup, est: Option<EntropyEstimate>) -> Result<Outcome> {
    let est = match est {
        Some(e) => e,
        None => estimate_entropy(s)?,
    };
    let cert = s.certifier();
    let q = &s.cfg.qpp;
    let rows = if matches!(s.sys.kind, SystemKind::Cat) {
        let e = &s.cfg.entropy;
        let ns: Vec<usize> = (e.n_min..=e.n_max).collect();
        let eps = q.epsilons.iter().cloned().fold(f64::INFINITY, f64::min);
        cat_exact_rows(&s.sys, &ns, eps)?
    } else {
        let ns: Vec<usize> = (q.n_min..=q.n_max).collect();
        qpp_rows(&cert, &s.schedule, &ns, &q.epsilons, &qpp_budget(s), &s.opts)?
    };
    let k = &s.cfg.kn;
    let n_top = *k.n_values.iter().max().expect("validated non-empty");
    let mut rng = s.rng("kn");
    let pts = sample_points(&s.sys, &Sampler::Uniform, k.samples, &mut rng);
    let t = OrbitTable::build(&s.sys, &pts, ((1.0 + k.window) * n_top as f64).floor() as usize + 1);
    let trend = return_trend(&cert, &t, k.k, k.window, k.trend_beta, &k.n_values)?;
    // a pure isometry returns whenever nα is near 0, so the trend only gates hyperbolic systems
    let degenerate = s.sys.bundle_dims.0 == 0 && s.sys.bundle_dims.2 == 0;
    let report = theorem_c_check(est.h_hat, est.gamma, rows, (!degenerate).then(|| trend.clone()))?;

    let mut kt = Table::new(
        "kn.csv",
        &[
            "n",
            "in_block",
            "returning",
            "return_fraction",
            "members",
            "valid",
            "kept",
            "harvest_failures",
            "separation",
            "separated",
            "largest_set",
            "set_verified",
        ],
    );
    let mut audit = true;
    let mut notes = Vec::new();
    for &n in &k.n_values {
        let kn = build_kn(&cert, &t, k.k, k.window, k.l, n, k.beta)?;
        let v = validate_kn(&cert, &kn);
        if kn.members.is_empty() {
            notes.push(format!("n = {n}: K_n empty"));
            let mut row: Vec<Cell> = vec![n.into(), kn.in_block.into(), kn.returning.into(), kn.return_fraction().into(), 0usize.into()];
            row.extend([v.pass().into(), 0usize.into(), 0usize.into(), (1.0 / (3.0 * kn.l)).into(), true.into(), 0usize.into(), true.into()]);
            kt.push(row);
            continue;
        }
        let h = harvest_quasi_periodic(&cert, &s.schedule, &kn, &s.opts)?;
        let (set_ok, why) = verify_qpp_set(&cert, &h.largest, s.schedule.xi, s.opts.tol_leaf);
        audit &= v.pass() && h.separated && set_ok;
        notes.extend(v.failures.iter().take(5).map(|f| format!("n = {n}: {f}")));
        notes.extend(why.iter().take(5).map(|f| format!("n = {n}: {f}")));
        kt.push(vec![
            n.into(),
            kn.in_block.into(),
            kn.returning.into(),
            kn.return_fraction().into(),
            kn.members.len().into(),
            v.pass().into(),
            h.kept.len().into(),
            h.failures.len().into(),
            h.separation.into(),
            h.separated.into(),
            h.largest.cardinality().into(),
            set_ok.into(),
        ]);
    }
    let rates: Vec<(f64, f64)> = report.rates.iter().map(|x| (x.epsilon, x.rate)).collect();
    let mut o = Outcome::new("theorem-c");
    o.pass = report.pass && audit;
    o.summary = json!({
        "h_hat": report.h_hat,
        "gamma": report.gamma,
        "threshold": report.h_hat / (1.0 + report.gamma),
        "rates": to_value(&report.rates),
        "trend": to_value(&trend),
        "trend_gated": !degenerate,
        "margin_pass": report.pass,
        "kn_audit_pass": audit,
        "kn_notes": notes,
    });
    o.json.push(("theoremC.json".into(), json!({ "report": to_value(&report), "kn_audit_pass": audit, "pass": o.pass })));
    o.tables.push(qpp_table(&report.rows, &rates));
    o.tables.push(kt);
    Ok(o)
}
