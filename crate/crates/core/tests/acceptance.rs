//! Acceptance run: prints one PASS/FAIL line per criterion and exits non-zero on any FAIL.
//!
//! `cargo test --release --test acceptance -- 7 10` runs only the listed criteria.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DVector, Vector2};
use qshadow::entropy::EntropyEstimate;
use qshadow::geometry::{subspace_distance, Subspace, TorusPoint};
use qshadow::harness::experiments::{self, shadow_trial, Setup};
use qshadow::harness::{self, parse_config, ExperimentConfig, Outcome};
use qshadow::oseledets::{estimate_splitting, lyapunov_spectrum};
use qshadow::systems::make_system;
use serde_json::Value;

/// Largest eigenvalue of [[2,1],[1,1]] from its characteristic polynomial t² − 3t + 1.
fn cat_root() -> f64 {
    (3.0 + (9.0f64 - 4.0).sqrt()) / 2.0
}

/// Trace recurrence t_n = 3 t_{n-1} − t_{n-2}, t_0 = 2, t_1 = 3; #Fix(A^n) = t_n − 2.
fn fixed_points(n: usize) -> u64 {
    let (mut a, mut b) = (2u64, 3u64);
    for _ in 0..n {
        (a, b) = (b, 3 * b - a);
    }
    a - 2
}

fn config(name: &str) -> ExperimentConfig {
    ExperimentConfig::minimal(name)
}

fn load(file: &str) -> ExperimentConfig {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(file);
    parse_config(&std::fs::read_to_string(&p).unwrap()).unwrap()
}

fn run(cfg: &ExperimentConfig, f: fn(&Setup) -> qshadow::Result<Outcome>) -> Outcome {
    let s = Setup::new(cfg, 1).expect("valid config");
    f(&s).unwrap_or_else(|e| Outcome::failed("run", &e))
}

fn num(o: &Outcome, key: &str) -> f64 {
    o.summary.get(key).and_then(Value::as_f64).unwrap_or(f64::NAN)
}

fn err(o: &Outcome) -> String {
    o.summary.get("error").and_then(Value::as_str).map(|e| format!(" error: {e}")).unwrap_or_default()
}

#[derive(Default)]
struct Shared {
    norms: BTreeMap<&'static str, Outcome>,
    entropy: BTreeMap<&'static str, EntropyEstimate>,
    theorem: BTreeMap<&'static str, Outcome>,
}

const REGISTRY: [&str; 4] = ["cat", "cat_x_rot", "cat_x_rot_perturbed", "rotation"];

impl Shared {
    fn norms(&mut self) -> &BTreeMap<&'static str, Outcome> {
        if self.norms.is_empty() {
            for name in REGISTRY {
                self.norms.insert(name, run(&config(name), experiments::norms));
            }
        }
        &self.norms
    }

    fn entropy(&mut self, name: &'static str) -> Option<EntropyEstimate> {
        if !self.entropy.contains_key(name) {
            let cfg = config(name);
            let s = Setup::new(&cfg, 1).unwrap();
            match experiments::estimate_entropy(&s) {
                Ok(e) => {
                    self.entropy.insert(name, e);
                }
                Err(e) => eprintln!("entropy on {name}: {e}"),
            }
        }
        self.entropy.get(name).cloned()
    }

    fn theorem(&mut self, name: &'static str) -> &Outcome {
        if !self.theorem.contains_key(name) {
            let est = self.entropy(name);
            let cfg = config(name);
            let s = Setup::new(&cfg, 1).unwrap();
            let o = experiments::theorem_c(&s, est).unwrap_or_else(|e| Outcome::failed("theorem-c", &e));
            self.theorem.insert(name, o);
        }
        &self.theorem[name]
    }
}

type Check = fn(&mut Shared) -> (bool, String);

fn c1(_: &mut Shared) -> (bool, String) {
    let chi = cat_root().ln();
    let sys = make_system("cat", &BTreeMap::new()).unwrap();
    let sp = lyapunov_spectrum(&sys, &TorusPoint::new(vec![0.3, 0.7]), 10_000).unwrap();
    let (e0, e1) = (sp.exponents[0], sp.exponents[1]);
    let dev = (e0 - chi).abs().max((e1 + chi).abs());
    (dev <= 1e-6, format!("exponents {e0:.9} {e1:.9}, oracle ±{chi:.9}, deviation {dev:.2e}"))
}

fn c2(_: &mut Shared) -> (bool, String) {
    let lam = cat_root();
    let cat = make_system("cat", &BTreeMap::new()).unwrap();
    let sp = estimate_splitting(&cat, &TorusPoint::new(vec![0.21, 0.58]), 200).unwrap();
    // A (1, λ−2) = λ (1, λ−2)
    let eig = Vector2::new(1.0, lam - 2.0);
    assert!(((nalgebra::Matrix2::new(2.0, 1.0, 1.0, 1.0) * eig) - eig * lam).norm() < 1e-12);
    let du = subspace_distance(&sp.eu, &Subspace::span(&[1.0, lam - 2.0]).unwrap()).unwrap();
    let prod = make_system("cat_x_rot", &BTreeMap::new()).unwrap();
    let sp = estimate_splitting(&prod, &TorusPoint::new(vec![0.21, 0.58, 0.4]), 200).unwrap();
    let dc = subspace_distance(&sp.ec, &Subspace::span(&[0.0, 0.0, 1.0]).unwrap()).unwrap();
    (du <= 1e-8 && dc <= 1e-8, format!("cat E^u distance {du:.2e}, cat×rotation E^c distance {dc:.2e}"))
}

fn c3(sh: &mut Shared) -> (bool, String) {
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, o) in sh.norms() {
        let certified = num(o, "certified") as usize;
        let fails = num(o, "norm_failures");
        ok &= certified == 1000 && fails == 0.0;
        parts.push(format!("{name}: {certified} points, {fails} failures{}", err(o)));
    }
    (ok, parts.join("; "))
}

fn c4(sh: &mut Shared) -> (bool, String) {
    let n = sh.norms();
    let chi = cat_root().ln();
    let mut ok = true;
    let mut parts = Vec::new();
    for name in ["cat", "cat_x_rot"] {
        let o = &n[name];
        let (rate, sig) = (num(o, "cone_pass_rate"), num(o, "sigma_hat_max"));
        ok &= rate == 1.0 && sig <= num(o, "sigma");
        parts.push(format!("{name}: pass rate {rate}, sigma_hat {sig:.6}"));
    }
    // the cat base contracts cone width by λ^{-2} in one step
    let pred = (-2.0 * chi).exp();
    let cat_sig = num(&n["cat"], "sigma_hat_max");
    ok &= (cat_sig - pred).abs() < 1e-9;
    let p = &n["cat_x_rot_perturbed"];
    let rate = num(p, "cone_pass_rate");
    ok &= rate >= 0.95;
    parts.push(format!("cat prediction {pred:.6}; perturbed pass rate {rate}"));
    (ok, parts.join("; "))
}

fn c5(_: &mut Shared) -> (bool, String) {
    let mut ok = true;
    let mut parts = Vec::new();
    for name in ["cat", "cat_x_rot", "rotation"] {
        let o = run(&config(name), experiments::holder);
        let d = num(&o, "max_distance");
        ok &= o.pass && d <= qshadow::regularity::ZERO_TOL;
        parts.push(format!("{name}: max distance {d:.1e}"));
    }
    let o = run(&load("perturbed.toml"), experiments::holder);
    let (pairs, rate) = (num(&o, "pairs"), num(&o, "pass_rate"));
    ok &= pairs >= 1000.0 && rate >= 0.95;
    parts.push(format!("perturbed: {pairs} pairs, pass rate {rate:.4}{}", err(&o)));
    (ok, parts.join("; "))
}

fn c6(_: &mut Shared) -> (bool, String) {
    let mut cfg = config("cat");
    cfg.shadow.delta_override = Some(1e-6);
    cfg.shadow.segments = 100;
    cfg.shadow.len_min = 1;
    cfg.shadow.len_max = 1;
    cfg.shadow.rho = 1.0;
    let s = Setup::new(&cfg, 1).unwrap();
    let cert = s.certifier();
    let lam = cat_root();
    let q = 1.0 / lam;
    let eu = DVector::from_vec(vec![1.0, lam - 2.0]).normalize();
    let es = DVector::from_vec(vec![2.0 - lam, 1.0]).normalize();
    let (mut ok, mut sup, mut oracle_gap, mut worst_res) = (true, 0.0f64, 0.0f64, 0.0f64);
    for t in 0..1000 {
        let tr = shadow_trial(&s, &cert, t);
        let (Some(po), Some(r)) = (tr.pseudo, tr.result) else {
            return (false, format!("trial {t}: {:?}", tr.error));
        };
        ok &= r.iterations == 1 && r.max_center_disp() == 0.0;
        worst_res = worst_res.max(r.residual_history[1]);
        sup = sup.max(r.sup_error());
        // y_{n+1} = A y_n and x_{n+1} = A x_n + j_n, so c_{n+1} = A c_n − j_n;
        // s-part runs forward from 0, u-part backward from 0 at the last start.
        let m = po.segments.len();
        let js: Vec<f64> = po.jumps.iter().map(|j| DVector::from_column_slice(j).dot(&es)).collect();
        let ju: Vec<f64> = po.jumps.iter().map(|j| DVector::from_column_slice(j).dot(&eu)).collect();
        let mut sig = vec![0.0; m];
        for n in 0..m - 1 {
            sig[n + 1] = q * sig[n] - js[n];
        }
        let mut ups = vec![0.0; m];
        for n in (0..m - 1).rev() {
            ups[n] = (ups[n + 1] + ju[n]) / lam;
        }
        for n in 0..m {
            let c = DVector::from_column_slice(&r.offsets[n]);
            oracle_gap = oracle_gap.max((c.dot(&es) - sig[n]).abs()).max((c.dot(&eu) - ups[n]).abs());
        }
    }
    ok &= sup <= 4e-6 && worst_res <= 1e-12 && oracle_gap <= 1e-15;
    (ok, format!("1000 runs, one sweep each, residual after sweep {worst_res:.1e}, sup error {sup:.3e} (4δ = 4e-6), geometric-series gap {oracle_gap:.1e}"))
}

fn shadow_line(label: &str, o: &Outcome) -> (bool, String) {
    let (g, conv, ver) = (num(o, "generated"), num(o, "converged"), num(o, "verified"));
    let ok = g == 100.0 && conv / g >= 0.99 && ver == conv;
    (
        ok,
        format!(
            "{label}: {conv}/{g} converged, {ver} verified, worst error/target {:.1e}, max s/u residual {:.1e}, delta_1 {:.1e}{}",
            num(o, "worst_error_over_target"),
            num(o, "max_su_residual"),
            num(o, "delta_k1"),
            err(o)
        ),
    )
}

fn c7(_: &mut Shared) -> (bool, String) {
    let a = shadow_line("cat×rotation", &run(&config("cat_x_rot"), experiments::shadow));
    let b = shadow_line("perturbed", &run(&config("cat_x_rot_perturbed"), experiments::shadow));
    let c = shadow_line("perturbed δ=1e-9", &run(&load("perturbed_stress.toml"), experiments::shadow));
    (a.0 && b.0 && c.0, [a.1, b.1, c.1].join("; "))
}

fn c8(_: &mut Shared) -> (bool, String) {
    let want = fixed_points(5);
    let o = run(&config("cat"), experiments::close);
    let (distinct, ret) = (num(&o, "distinct"), num(&o, "max_return_error"));
    let cat_ok = distinct == want as f64 && ret <= 1e-12;
    let p = run(&config("cat_x_rot"), experiments::close);
    let drift = num(&p, "max_drift_error");
    let ok = cat_ok && drift <= 1e-8 && num(&p, "closed") > 0.0;
    (
        ok,
        format!(
            "cat: {distinct} distinct period-5 points (oracle {want}), |f^5 y − y| ≤ {ret:.1e}; cat×rotation: {} closings, drift error {drift:.1e}",
            num(&p, "closed")
        ),
    )
}

fn c9(_: &mut Shared) -> (bool, String) {
    let o = run(&config("cat_x_rot"), experiments::spec);
    let times: Vec<u64> = o.summary["transitions"].as_array().map(|a| a.iter().filter_map(|t| t["time"].as_u64()).collect()).unwrap_or_default();
    let ok = o.pass && times.len() == 3;
    (ok, format!("transitions {times:?} within H = 64, junctions pass {}, sup error {:.2e}{}", o.summary["junctions_pass"], num(&o, "sup_error"), err(&o)))
}

fn c10(sh: &mut Shared) -> (bool, String) {
    let chi = cat_root().ln();
    let mut ok = true;
    let mut parts = Vec::new();
    for name in ["cat", "cat_x_rot"] {
        match sh.entropy(name) {
            Some(e) => {
                let rel = (e.h_hat - chi).abs() / chi;
                ok &= rel <= 0.1;
                parts.push(format!("{name}: ĥ = {:.4} (n {}..{}), relative error {rel:.3}", e.h_hat, e.fit_range.0, e.fit_range.1));
            }
            None => {
                ok = false;
                parts.push(format!("{name}: no estimate"));
            }
        }
    }
    match sh.entropy("rotation") {
        Some(e) => {
            ok &= e.h_hat <= 0.02;
            parts.push(format!("rotation: ĥ = {:.4}", e.h_hat));
        }
        None => ok = false,
    }
    (ok, parts.join("; "))
}

fn rate_at(o: &Outcome, eps: f64) -> Option<f64> {
    o.summary["rates"].as_array()?.iter().find(|r| (r["epsilon"].as_f64().unwrap_or(0.0) - eps).abs() < 1e-12)?["rate"].as_f64()
}

fn c11(sh: &mut Shared) -> (bool, String) {
    let cat = sh.theorem("cat").clone();
    let h_cat = num(&cat, "h_hat");
    let r_cat = cat.summary["rates"][0]["rate"].as_f64().unwrap_or(f64::NAN);
    let prod = sh.theorem("cat_x_rot").clone();
    let h = num(&prod, "h_hat");
    let r = rate_at(&prod, 0.05).unwrap_or(f64::NAN);
    let bound = h / 1.05 - 0.1;
    let ok = r_cat >= h_cat && r >= bound && prod.summary["margin_pass"] == Value::Bool(true);
    (
        ok,
        format!("cat: exact-count rate {r_cat:.4} vs ĥ {h_cat:.4}; cat×rotation: rate {r:.4} at ε = 0.05 vs ĥ/(1+γ) − 0.1 = {bound:.4}{}", err(&prod)),
    )
}

fn c12(sh: &mut Shared) -> (bool, String) {
    let prod = sh.theorem("cat_x_rot").clone();
    let cat = sh.theorem("cat").clone();
    let audit = prod.summary["kn_audit_pass"] == Value::Bool(true) && cat.summary["kn_audit_pass"] == Value::Bool(true);
    let empty = prod.summary["kn_notes"].as_array().is_some_and(|n| n.iter().any(|x| x.as_str().is_some_and(|x| x.ends_with("K_n empty"))));
    let audit = audit && !empty;
    let trend = prod.summary["trend"]["pass"] == Value::Bool(true);
    let fr = prod.summary["trend"]["fraction"].clone();
    (audit && trend, format!("K_n audit (cat, cat×rotation) {audit}, empty sets {empty}; return fractions {fr} rising {trend}"))
}

fn csvs(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(csvs(&p));
        } else if p.extension().is_some_and(|x| x == "csv") {
            out.insert(p.clone(), std::fs::read(&p).unwrap());
        }
    }
    out
}

fn c13(_: &mut Shared) -> (bool, String) {
    let cfg = load("smoke.toml");
    let root = std::env::temp_dir().join(format!("qshadow-determinism-{}", std::process::id()));
    let (a, b) = (root.join("a"), root.join("b"));
    let ra = harness::run("all", &cfg, &a, 1);
    let rb = harness::run("all", &cfg, &b, 2);
    if ra.is_err() || rb.is_err() {
        return (false, format!("run failed: {ra:?} {rb:?}"));
    }
    let (fa, fb) = (csvs(&a), csvs(&b));
    let names = |m: &BTreeMap<PathBuf, Vec<u8>>, base: &Path| -> Vec<PathBuf> { m.keys().map(|k| k.strip_prefix(base).unwrap().to_path_buf()).collect() };
    let same_set = names(&fa, &a) == names(&fb, &b);
    let differing: Vec<String> = fa
        .iter()
        .filter(|(k, v)| fb.get(&b.join(k.strip_prefix(&a).unwrap())) != Some(*v))
        .map(|(k, _)| k.strip_prefix(&a).unwrap().display().to_string())
        .collect();
    let _ = std::fs::remove_dir_all(&root);
    (same_set && differing.is_empty() && fa.len() >= 10, format!("{} CSVs compared (jobs 1 vs 2), differing: {differing:?}", fa.len()))
}

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, Check, Option<f64>); 13] = [
        (1, "Lyapunov exactness", c1, Some(1.0)),
        (2, "splitting exactness", c2, Some(1.0)),
        (3, "adapted-norm suite", c3, Some(30.0)),
        (4, "cone invariance", c4, Some(60.0)),
        (5, "Hölder regularity", c5, Some(120.0)),
        (6, "classical shadowing", c6, Some(30.0)),
        (7, "quasi-shadowing contract", c7, Some(300.0)),
        (8, "quasi-closing", c8, Some(120.0)),
        (9, "quasi-specification", c9, Some(300.0)),
        (10, "entropy", c10, Some(600.0)),
        (11, "growth-rate margin", c11, Some(600.0)),
        (12, "K_n pipeline audit", c12, None),
        (13, "determinism", c13, None),
    ];
    let mut sh = Shared::default();
    let mut failed = 0;
    for (id, name, check, limit) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let t0 = Instant::now();
        let (ok, detail) = check(&mut sh);
        let secs = t0.elapsed().as_secs_f64();
        let in_time = limit.is_none_or(|l| secs < l);
        let pass = ok && in_time;
        failed += !pass as usize;
        let time = match limit {
            Some(l) => format!("{secs:.1} s < {l} s: {in_time}"),
            None => format!("{secs:.1} s"),
        };
        println!("criterion {id:>2} {} {name} [{time}] {detail}", if pass { "PASS" } else { "FAIL" });
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
