//! Katok covering numbers, the `K_n` construction and quasi-periodic point counting.

use std::collections::{BinaryHeap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dist2_raw, wrap01};
use crate::shadowing::{delta_vec, quasi_close, Certifier, Schedule, ShadowOptions};
use crate::systems::{SystemKind, SystemSpec};

/// How points of the invariant measure are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Sampler {
    /// Lebesgue; invariant for the volume-preserving systems.
    Uniform,
    /// Lebesgue restricted to the box `[lo, hi)`.
    Window { lo: Vec<f64>, hi: Vec<f64> },
    /// Every `stride`-th point of one orbit after `burn` steps.
    Orbit { start: Vec<f64>, burn: usize, stride: usize },
}

pub fn sample_points<R: Rng>(sys: &SystemSpec, sampler: &Sampler, count: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let d = sys.dimension;
    match sampler {
        Sampler::Uniform => (0..count).map(|_| (0..d).map(|_| rng.random::<f64>()).collect()).collect(),
        Sampler::Window { lo, hi } => {
            (0..count).map(|_| (0..d).map(|k| lo[k] + (hi[k] - lo[k]) * rng.random::<f64>()).collect()).collect()
        }
        Sampler::Orbit { start, burn, stride } => {
            let mut p: Vec<f64> = start.iter().map(|v| wrap01(*v)).collect();
            sys.iterate_raw(&mut p, *burn as i64);
            let mut out = Vec::with_capacity(count);
            for _ in 0..count {
                out.push(p.clone());
                sys.iterate_raw(&mut p, (*stride).max(1) as i64);
            }
            out
        }
    }
}

/// Forward orbits `f^i(x_j)`, `i = 0..len`, stored contiguously.
#[derive(Debug, Clone)]
pub struct OrbitTable {
    pub dim: usize,
    pub len: usize,
    pub count: usize,
    data: Vec<f64>,
}

impl OrbitTable {
    pub fn build(sys: &SystemSpec, points: &[Vec<f64>], len: usize) -> Self {
        let d = sys.dimension;
        let mut data = Vec::with_capacity(points.len() * len * d);
        for x in points {
            let mut p = x.clone();
            for i in 0..len {
                if i > 0 {
                    sys.step(&mut p);
                }
                data.extend_from_slice(&p);
            }
        }
        OrbitTable { dim: d, len, count: points.len(), data }
    }

    #[inline]
    pub fn point(&self, j: usize, i: usize) -> &[f64] {
        let o = (j * self.len + i) * self.dim;
        &self.data[o..o + self.dim]
    }

    /// `d_n(x_a, x_b) <= r`, checked from the last iterate backwards.
    #[inline]
    pub fn within(&self, a: usize, b: usize, n: usize, r: f64) -> bool {
        let r2 = r * r;
        (0..n).rev().all(|i| dist2_raw(self.point(a, i), self.point(b, i)) <= r2)
    }

    pub fn bowen(&self, a: usize, b: usize, n: usize) -> f64 {
        (0..n).map(|i| dist2_raw(self.point(a, i), self.point(b, i))).fold(0.0, f64::max).sqrt()
    }
}

/// Bowen distance between two explicit points.
pub fn bowen_distance(sys: &SystemSpec, x: &[f64], y: &[f64], n: usize) -> f64 {
    let mut p = x.to_vec();
    let mut q = y.to_vec();
    let mut m: f64 = 0.0;
    for i in 0..n {
        if i > 0 {
            sys.step(&mut p);
            sys.step(&mut q);
        }
        m = m.max(dist2_raw(&p, &q));
    }
    m.sqrt()
}

/// Uniform cells of side `>= r` on the first and last iterate; `d_n <= r` pairs sit in adjacent cells.
struct CellIndex {
    cells: i64,
    last: usize,
    map: HashMap<u64, Vec<u32>>,
    offsets: Vec<Vec<i64>>,
}

impl CellIndex {
    fn new(dim: usize, n: usize, r: f64) -> Self {
        let cells = ((1.0 / r).floor() as i64).max(1);
        let span: Vec<i64> = if cells >= 3 { vec![-1, 0, 1] } else { (0..cells).collect() };
        let dims = if n > 1 { 2 * dim } else { dim };
        let mut offsets = vec![vec![]];
        for _ in 0..dims {
            offsets = offsets.into_iter().flat_map(|o: Vec<i64>| span.iter().map(move |s| [o.clone(), vec![*s]].concat())).collect();
        }
        CellIndex { cells, last: n - 1, map: HashMap::new(), offsets }
    }

    fn cell(&self, t: &OrbitTable, j: usize) -> Vec<i64> {
        let c = self.cells;
        let mut k: Vec<i64> = t.point(j, 0).iter().map(|v| ((v * c as f64) as i64).min(c - 1)).collect();
        if self.last > 0 {
            k.extend(t.point(j, self.last).iter().map(|v| ((v * c as f64) as i64).min(c - 1)));
        }
        k
    }

    fn pack(&self, k: impl Iterator<Item = i64>) -> u64 {
        k.fold(0u64, |acc, v| acc * self.cells as u64 + v as u64)
    }

    fn insert(&mut self, t: &OrbitTable, j: usize) {
        let k = self.pack(self.cell(t, j).into_iter());
        self.map.entry(k).or_default().push(j as u32);
    }

    fn neighbours<'a>(&'a self, t: &OrbitTable, j: usize) -> impl Iterator<Item = u32> + 'a {
        let base = self.cell(t, j);
        let c = self.cells;
        self.offsets.iter().flat_map(move |o| {
            let k = self.pack(base.iter().zip(o).map(|(b, s)| if c >= 3 { (b + s).rem_euclid(c) } else { *s }));
            self.map.get(&k).map(|v| v.as_slice()).unwrap_or(&[]).iter().copied()
        })
    }
}

/// Maximal `(n, r)`-separated subset, scanning `order`.
pub fn maximal_separated(t: &OrbitTable, n: usize, r: f64, order: impl IntoIterator<Item = usize>) -> Vec<usize> {
    let mut idx = CellIndex::new(t.dim, n, r);
    let mut out = Vec::new();
    for j in order {
        if idx.neighbours(t, j).any(|s| t.within(j, s as usize, n, r)) {
            continue;
        }
        idx.insert(t, j);
        out.push(j);
    }
    out
}

/// Pairs `(j, i)`, `j < i`, with `d_n <= r`; an empty result certifies `(n, r)`-separation.
pub fn separation_violations(sys: &SystemSpec, points: &[Vec<f64>], n: usize, r: f64) -> Vec<(usize, usize)> {
    let t = OrbitTable::build(sys, points, n);
    let mut idx = CellIndex::new(t.dim, n, r);
    for j in 0..t.count {
        idx.insert(&t, j);
    }
    let mut out = Vec::new();
    for i in 0..t.count {
        for j in idx.neighbours(&t, i) {
            let j = j as usize;
            if j < i && t.within(i, j, n, r) {
                out.push((j, i));
            }
        }
    }
    out.sort_unstable();
    out
}

/// Greedy max-coverage by `d_n`-balls of radius `r` about `centers` until `frac` of all samples is covered.
pub fn greedy_cover(t: &OrbitTable, n: usize, r: f64, centers: &[usize], frac: f64) -> usize {
    let mut idx = CellIndex::new(t.dim, n, r);
    for j in 0..t.count {
        idx.insert(t, j);
    }
    let balls: Vec<Vec<u32>> = centers
        .iter()
        .map(|&c| idx.neighbours(t, c).filter(|&s| t.within(c, s as usize, n, r)).collect())
        .collect();
    let need = (frac * t.count as f64).ceil() as usize;
    let mut covered = vec![false; t.count];
    let mut done = 0;
    let mut heap: BinaryHeap<(usize, std::cmp::Reverse<usize>)> =
        balls.iter().enumerate().map(|(i, b)| (b.len(), std::cmp::Reverse(i))).collect();
    let mut used = 0;
    while done < need {
        let Some((gain, std::cmp::Reverse(i))) = heap.pop() else { break };
        let fresh = balls[i].iter().filter(|&&s| !covered[s as usize]).count();
        if fresh < gain {
            if fresh > 0 {
                heap.push((fresh, std::cmp::Reverse(i)));
            }
            continue;
        }
        for &s in &balls[i] {
            if !covered[s as usize] {
                covered[s as usize] = true;
                done += 1;
            }
        }
        used += 1;
    }
    used
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntropyRow {
    pub n: usize,
    pub n_cover: usize,
    pub n_separated: usize,
    /// Greedy cover at radius `2γ` from the separated centers.
    pub n_cover_double: usize,
    pub in_fit: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntropyEstimate {
    pub gamma: f64,
    pub delta: f64,
    pub samples: usize,
    pub rows: Vec<EntropyRow>,
    pub h_hat: f64,
    pub fit_range: (usize, usize),
    pub residual: f64,
}

/// Least-squares slope and rms residual of `y` on `x`.
pub fn fit_line(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let m = x.len() as f64;
    let mx = x.iter().sum::<f64>() / m;
    let my = y.iter().sum::<f64>() / m;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let icpt = my - slope * mx;
    let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - icpt - slope * a).powi(2)).sum();
    (slope, icpt, (rss / m).sqrt())
}

/// Fraction of the sample a cover may use before it counts as saturated.
pub const SATURATION: f64 = 0.1;

pub fn katok_entropy(t: &OrbitTable, gamma: f64, delta: f64, ns: &[usize]) -> Result<EntropyEstimate> {
    if !(gamma > 0.0 && gamma < 0.5) || !(0.0..1.0).contains(&delta) {
        return Err(Error::InvalidParameter("gamma/delta".into(), format!("{gamma}, {delta}")));
    }
    if ns.iter().any(|&n| n == 0 || n > t.len) {
        return Err(Error::Precondition(format!("n range exceeds orbit windows of length {}", t.len)));
    }
    let mut rows = Vec::new();
    for &n in ns {
        let sep = maximal_separated(t, n, gamma, 0..t.count);
        let cover = greedy_cover(t, n, gamma, &sep, 1.0 - delta);
        let cover2 = greedy_cover(t, n, 2.0 * gamma, &sep, 1.0 - delta);
        if sep.len() < cover2 {
            return Err(Error::ContractFailure(format!("separated {} below 2γ cover {} at n = {n}", sep.len(), cover2)));
        }
        let in_fit = (sep.len() as f64) <= SATURATION * t.count as f64;
        rows.push(EntropyRow { n, n_cover: cover, n_separated: sep.len(), n_cover_double: cover2, in_fit });
        // saturation only grows with n; larger n carry no information
        if !in_fit {
            break;
        }
    }
    let fit: Vec<&EntropyRow> = rows.iter().filter(|r| r.in_fit).collect();
    if fit.len() < 2 {
        return Err(Error::Insufficient(format!("{} unsaturated n values; raise the sample count", fit.len())));
    }
    if let Some(r) = fit.iter().find(|r| r.n_separated as f64 > 4.0 * r.n_cover as f64) {
        return Err(Error::Insufficient(format!("bracket gap {} / {} at n = {}", r.n_separated, r.n_cover, r.n)));
    }
    let x: Vec<f64> = fit.iter().map(|r| r.n as f64).collect();
    let y: Vec<f64> = fit.iter().map(|r| (r.n_cover as f64).ln()).collect();
    let (h, _, res) = fit_line(&x, &y);
    Ok(EntropyEstimate {
        gamma,
        delta,
        samples: t.count,
        fit_range: (fit[0].n, fit[fit.len() - 1].n),
        rows,
        h_hat: h,
        residual: res,
    })
}

/// One member of `K_n` with its return data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnMember {
    pub point: Vec<f64>,
    pub kappa: u32,
    pub m: usize,
    pub kappa_return: u32,
    pub return_distance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnSet {
    pub k: u32,
    pub gamma: f64,
    pub l: f64,
    pub n: usize,
    pub beta: f64,
    /// Side of the partition cells; their diameter is below `beta`.
    pub mesh: f64,
    pub samples: usize,
    pub in_block: usize,
    pub returning: usize,
    pub members: Vec<KnMember>,
}

impl KnSet {
    pub fn m_max(&self) -> usize {
        ((1.0 + self.gamma) * self.n as f64).floor() as usize
    }

    /// Sampled `m(Λ_{k,n}) / m(Λ_k)`.
    pub fn return_fraction(&self) -> f64 {
        if self.in_block == 0 {
            0.0
        } else {
            self.returning as f64 / self.in_block as f64
        }
    }
}

fn grid_cell(p: &[f64], cells: usize) -> Vec<usize> {
    p.iter().map(|v| ((v * cells as f64) as usize).min(cells - 1)).collect()
}

/// Builds `K_n(γ, l)` from the sampled orbits in `t`.
pub fn build_kn(cert: &Certifier, t: &OrbitTable, k: u32, gamma: f64, l: f64, n: usize, beta: f64) -> Result<KnSet> {
    if n == 0 || !(gamma > 0.0) || !(l > 0.0) || !(beta > 0.0) {
        return Err(Error::InvalidParameter("n/gamma/l/beta".into(), format!("{n}, {gamma}, {l}, {beta}")));
    }
    let m_max = ((1.0 + gamma) * n as f64).floor() as usize;
    if t.len < m_max + 1 {
        return Err(Error::Precondition(format!("orbit windows of length {} are shorter than (1+γ)n + 1 = {}", t.len, m_max + 1)));
    }
    let d = t.dim;
    let cells = ((d as f64).sqrt() / beta * (1.0 + 1e-9)).floor() as usize + 1;
    let mesh = 1.0 / cells as f64;
    let mut in_block = 0;
    let mut returning = Vec::new();
    for j in 0..t.count {
        let x = t.point(j, 0);
        let kappa = match cert.certify(x) {
            Ok((kx, _)) if kx <= k => kx,
            _ => continue,
        };
        in_block += 1;
        let home = grid_cell(x, cells);
        for m in n..=m_max {
            let y = t.point(j, m);
            if grid_cell(y, cells) != home {
                continue;
            }
            if let Ok((ky, _)) = cert.certify(y) {
                if ky <= k {
                    let dist = dist2_raw(x, y).sqrt();
                    returning.push((j, KnMember { point: x.to_vec(), kappa, m, kappa_return: ky, return_distance: dist }));
                    break;
                }
            }
        }
    }
    let order: Vec<usize> = returning.iter().map(|(j, _)| *j).collect();
    let keep = maximal_separated(t, n, 1.0 / l, order);
    let mut by_index: HashMap<usize, KnMember> = returning.iter().cloned().collect();
    let members = keep.iter().map(|j| by_index.remove(j).expect("member")).collect();
    Ok(KnSet { k, gamma, l, n, beta, mesh, samples: t.count, in_block, returning: returning.len(), members })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnValidation {
    pub block: bool,
    pub separated: bool,
    pub returns: bool,
    pub failures: Vec<String>,
}

impl KnValidation {
    pub fn pass(&self) -> bool {
        self.block && self.separated && self.returns
    }
}

/// Rechecks (i) block membership, (ii) `(n, 1/l)`-separation and (iii) return data from the stored points only.
pub fn validate_kn(cert: &Certifier, kn: &KnSet) -> KnValidation {
    let sys = cert.sys;
    let mut v = KnValidation { block: true, separated: true, returns: true, failures: Vec::new() };
    for (i, x) in kn.members.iter().enumerate() {
        if !matches!(cert.certify(&x.point), Ok((kx, _)) if kx <= kn.k) {
            v.block = false;
            v.failures.push(format!("member {i}: not in block {}", kn.k));
        }
        let mut y = x.point.clone();
        sys.iterate_raw(&mut y, x.m as i64);
        let dist = dist2_raw(&x.point, &y).sqrt();
        let in_window = x.m >= kn.n && x.m <= kn.m_max();
        let lands = matches!(cert.certify(&y), Ok((ky, _)) if ky <= kn.k);
        if !(in_window && lands && dist <= kn.beta) {
            v.returns = false;
            v.failures.push(format!("member {i}: return m = {}, distance {dist}", x.m));
        }
    }
    let pts: Vec<Vec<f64>> = kn.members.iter().map(|m| m.point.clone()).collect();
    for (j, i) in separation_violations(sys, &pts, kn.n, 1.0 / kn.l) {
        v.separated = false;
        v.failures.push(format!("members {j}, {i}: d_n <= 1/l"));
    }
    v
}

/// A point `z` with `f^p(z)` on its own center leaf, with its certificate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QppPoint {
    pub point: Vec<f64>,
    pub seed: Vec<f64>,
    pub period: usize,
    pub su_residual: f64,
    pub center_displacement: f64,
    pub shadow_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeparatedQppSet {
    pub period: usize,
    pub separation: f64,
    pub points: Vec<QppPoint>,
    /// Bundles `d_s = d_u = 0`: counted by packing alone.
    pub degenerate: bool,
}

impl SeparatedQppSet {
    pub fn cardinality(&self) -> usize {
        self.points.len()
    }
}

/// s/u and center parts of `f^p(z) - z` at `z`.
pub fn quasi_period_certificate(cert: &Certifier, z: &[f64], p: usize) -> Result<(f64, f64)> {
    let (_, sp) = cert.certify(z)?;
    let mut y = z.to_vec();
    cert.sys.iterate_raw(&mut y, p as i64);
    let w = delta_vec(z, &y);
    let (s, c, u) = sp.coords(&w);
    Ok((s.norm().max(u.norm()), c.norm()))
}

/// Independent recheck of a separated set: pairwise `d_n > ε` and every quasi-period certificate.
pub fn verify_qpp_set(cert: &Certifier, set: &SeparatedQppSet, xi: f64, tol_leaf: f64) -> (bool, Vec<String>) {
    let mut fails = Vec::new();
    let n = set.period;
    for (i, z) in set.points.iter().enumerate() {
        if set.degenerate {
            continue;
        }
        match quasi_period_certificate(cert, &z.point, z.period) {
            Ok((su, c)) if su <= tol_leaf && (su <= xi * c || su + c <= tol_leaf) => {}
            Ok((su, c)) => fails.push(format!("point {i}: s/u {su:e}, center {c:e}")),
            Err(e) => fails.push(format!("point {i}: {e}")),
        }
    }
    let pts: Vec<Vec<f64>> = set.points.iter().map(|q| q.point.clone()).collect();
    for (j, i) in separation_violations(cert.sys, &pts, n, set.separation) {
        fails.push(format!("points {j}, {i} not separated"));
    }
    (fails.is_empty(), fails)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Harvest {
    pub kept: Vec<QppPoint>,
    pub failures: Vec<(usize, String)>,
    pub separation: f64,
    pub separated: bool,
    pub largest: SeparatedQppSet,
}

/// Closes every `K_n` member at its return time and keeps `z(x)` that stay within `1/(3l)` of `x`.
pub fn harvest_quasi_periodic(cert: &Certifier, schedule: &Schedule, kn: &KnSet, opts: &ShadowOptions) -> Result<Harvest> {
    if kn.members.is_empty() {
        return Err(Error::Precondition("K_n is empty".into()));
    }
    let r = 1.0 / (3.0 * kn.l);
    let mut kept = Vec::new();
    let mut failures = Vec::new();
    for (i, x) in kn.members.iter().enumerate() {
        match quasi_close(cert, schedule, &x.point, x.m, Some(kn.beta), opts) {
            Ok((res, _)) => {
                let err = res.sup_error();
                if err >= r {
                    failures.push((i, format!("shadow error {err} >= 1/(3l)")));
                    continue;
                }
                kept.push(QppPoint {
                    point: res.starts[0].clone(),
                    seed: x.point.clone(),
                    period: x.m,
                    su_residual: res.su_residuals[0],
                    center_displacement: res.max_center_disp(),
                    shadow_error: err,
                });
            }
            Err(e) => failures.push((i, e.to_string())),
        }
    }
    let pts: Vec<Vec<f64>> = kept.iter().map(|q| q.point.clone()).collect();
    let separated = separation_violations(cert.sys, &pts, kn.n, r).is_empty();
    let mut classes: std::collections::BTreeMap<usize, Vec<QppPoint>> = Default::default();
    for z in &kept {
        classes.entry(z.period).or_default().push(z.clone());
    }
    let (period, points) = classes
        .into_iter()
        .max_by_key(|(m, v)| (v.len(), std::cmp::Reverse(*m)))
        .unwrap_or((kn.n, Vec::new()));
    let largest = SeparatedQppSet { period, separation: r, points, degenerate: false };
    Ok(Harvest { kept, failures, separation: r, separated, largest })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QppBudget {
    pub reference_len: usize,
    pub beta: f64,
    pub start: Vec<f64>,
    pub max_candidates: usize,
}

impl Default for QppBudget {
    fn default() -> Self {
        QppBudget { reference_len: 1_000_000, beta: 0.05, start: vec![0.1234, 0.5678, 0.9012], max_candidates: 50_000 }
    }
}

/// Quasi-periodic points closed from `β`-recurrences at lag `n` of one reference orbit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClosedCandidates {
    pub n: usize,
    pub candidates: usize,
    pub points: Vec<QppPoint>,
    pub degenerate: bool,
}

/// Largest `m` with `1/m > ε`: equally spaced points on a circle.
fn circle_packing(eps: f64) -> usize {
    let mut m = (1.0 / eps).ceil() as usize;
    while m > 1 && 1.0 / m as f64 <= eps {
        m -= 1;
    }
    m
}

pub fn close_candidates(cert: &Certifier, schedule: &Schedule, n: usize, budget: &QppBudget, opts: &ShadowOptions) -> Result<ClosedCandidates> {
    let sys = cert.sys;
    if n == 0 {
        return Err(Error::InvalidParameter("n".into(), "must be positive".into()));
    }
    let (ds, _, du) = sys.bundle_dims;
    if ds == 0 && du == 0 {
        // the whole space is one center leaf
        return Ok(ClosedCandidates { n, candidates: 0, points: Vec::new(), degenerate: true });
    }
    let d = sys.dimension;
    let mut ring = vec![vec![0.0; d]; n + 1];
    let mut p: Vec<f64> = budget.start.iter().take(d).map(|v| wrap01(*v)).collect();
    if p.len() != d {
        return Err(Error::DimensionMismatch(p.len(), d));
    }
    let mut seeds = Vec::new();
    let b2 = budget.beta * budget.beta;
    for step in 0..budget.reference_len {
        ring[step % (n + 1)].clone_from(&p);
        if step >= n {
            let back = &ring[(step - n) % (n + 1)];
            if dist2_raw(back, &p) < b2 {
                seeds.push(back.clone());
                if seeds.len() >= budget.max_candidates {
                    break;
                }
            }
        }
        sys.step(&mut p);
    }
    let mut points = Vec::new();
    for x in &seeds {
        let Ok((res, _)) = quasi_close(cert, schedule, x, n, Some(budget.beta), opts) else { continue };
        let z = res.starts[0].clone();
        let Ok((su, c)) = quasi_period_certificate(cert, &z, n) else { continue };
        if su > opts.tol_leaf {
            continue;
        }
        points.push(QppPoint { point: z, seed: x.clone(), period: n, su_residual: su, center_displacement: c, shadow_error: res.sup_error() });
    }
    Ok(ClosedCandidates { n, candidates: seeds.len(), points, degenerate: false })
}

/// Greedy `(n, ε)`-separated subset of the closed points, in mining order.
pub fn separate_candidates(sys: &SystemSpec, closed: &ClosedCandidates, eps: f64) -> SeparatedQppSet {
    let n = closed.n;
    if closed.degenerate {
        let m = circle_packing(eps);
        let d = sys.dimension;
        let points = (0..m)
            .map(|i| {
                let mut z = vec![0.0; d];
                z[0] = i as f64 / m as f64;
                QppPoint { point: z.clone(), seed: z, period: n, su_residual: 0.0, center_displacement: 0.0, shadow_error: 0.0 }
            })
            .collect();
        return SeparatedQppSet { period: n, separation: eps, points, degenerate: true };
    }
    let pts: Vec<Vec<f64>> = closed.points.iter().map(|q| q.point.clone()).collect();
    let table = OrbitTable::build(sys, &pts, n);
    let keep = maximal_separated(&table, n, eps, 0..pts.len());
    SeparatedQppSet { period: n, separation: eps, points: keep.iter().map(|&j| closed.points[j].clone()).collect(), degenerate: false }
}

/// Greedy lower bound on the number of `(n, ε)`-separated quasi-periodic points of period `n`.
pub fn count_separated_qpp(
    cert: &Certifier,
    schedule: &Schedule,
    n: usize,
    eps: f64,
    budget: &QppBudget,
    opts: &ShadowOptions,
) -> Result<SeparatedQppSet> {
    if !(eps > 0.0) {
        return Err(Error::InvalidParameter("epsilon".into(), format!("{eps}")));
    }
    let closed = close_candidates(cert, schedule, n, budget, opts)?;
    Ok(separate_candidates(cert.sys, &closed, eps))
}

/// `|Fix(A^n)| = t_n - 2` for the cat map, `t_n = 3 t_{n-1} - t_{n-2}`.
pub fn cat_fixed_counts(ns: &[usize]) -> Vec<f64> {
    ns.iter()
        .map(|&n| {
            let (mut a, mut b) = (2.0f64, 3.0f64);
            for _ in 0..n {
                let c = 3.0 * b - a;
                a = b;
                b = c;
            }
            a - 2.0
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QppRow {
    pub n: usize,
    pub epsilon: f64,
    pub count: usize,
    pub candidates: usize,
    pub in_fit: bool,
}

/// Exact rows for the cat map from the trace recurrence.
pub fn cat_exact_rows(sys: &SystemSpec, ns: &[usize], eps: f64) -> Result<Vec<QppRow>> {
    if !matches!(sys.kind, SystemKind::Cat) {
        return Err(Error::Precondition(format!("exact counts need the cat map, got {}", sys.name)));
    }
    Ok(ns
        .iter()
        .zip(cat_fixed_counts(ns))
        .map(|(&n, c)| QppRow { n, epsilon: eps, count: c as usize, candidates: 0, in_fit: true })
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QppRate {
    pub epsilon: f64,
    pub rate: f64,
    pub fit_range: (usize, usize),
    pub margin: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReturnTrend {
    pub n: Vec<usize>,
    pub fraction: Vec<f64>,
    pub slope: f64,
    pub pass: bool,
}

/// Sampled `m(Λ_{k,n}) / m(Λ_k)` should rise with `n`.
pub fn return_trend(cert: &Certifier, t: &OrbitTable, k: u32, gamma: f64, beta: f64, ns: &[usize]) -> Result<ReturnTrend> {
    let mut fraction = Vec::new();
    for &n in ns {
        let mut kn = build_kn(cert, t, k, gamma, 1.0, n, beta)?;
        kn.members.clear();
        fraction.push(kn.return_fraction());
    }
    let x: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
    let (slope, _, _) = fit_line(&x, &fraction);
    let pass = slope > 0.0 && fraction.last() >= fraction.first();
    Ok(ReturnTrend { n: ns.to_vec(), fraction, slope, pass })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheoremCReport {
    pub h_hat: f64,
    pub gamma: f64,
    pub rows: Vec<QppRow>,
    pub rates: Vec<QppRate>,
    pub trend: Option<ReturnTrend>,
    pub pass: bool,
}

/// Fraction of converged candidates a count may reach and still enter the rate fit.
pub const QPP_SATURATION: f64 = 0.2;

/// Fits growth rates per `ε` and compares with `ĥ/(1+γ)`; PASS iff the margin at the smallest `ε` is `>= -0.1`.
pub fn theorem_c_check(h_hat: f64, gamma: f64, rows: Vec<QppRow>, trend: Option<ReturnTrend>) -> Result<TheoremCReport> {
    let mut eps: Vec<f64> = rows.iter().map(|r| r.epsilon).collect();
    eps.sort_by(|a, b| b.partial_cmp(a).unwrap());
    eps.dedup();
    let mut rates = Vec::new();
    for e in &eps {
        let fit: Vec<&QppRow> = rows.iter().filter(|r| r.epsilon == *e && r.in_fit && r.count > 0).collect();
        if fit.len() < 2 {
            return Err(Error::Insufficient(format!("fewer than two unsaturated counts at epsilon = {e}")));
        }
        let x: Vec<f64> = fit.iter().map(|r| r.n as f64).collect();
        let y: Vec<f64> = fit.iter().map(|r| (r.count as f64).ln()).collect();
        let (rate, _, _) = fit_line(&x, &y);
        rates.push(QppRate { epsilon: *e, rate, fit_range: (fit[0].n, fit[fit.len() - 1].n), margin: rate - h_hat / (1.0 + gamma) });
    }
    let pass = rates.last().map(|r| r.margin >= -0.1).unwrap_or(false) && trend.as_ref().map(|t| t.pass).unwrap_or(true);
    Ok(TheoremCReport { h_hat, gamma, rows, rates, trend, pass })
}

/// Counts over `ns` for every `ε`; rows past saturation are kept but excluded from the fit.
pub fn qpp_rows(
    cert: &Certifier,
    schedule: &Schedule,
    ns: &[usize],
    epsilons: &[f64],
    budget: &QppBudget,
    opts: &ShadowOptions,
) -> Result<Vec<QppRow>> {
    let mut rows = Vec::new();
    for &n in ns {
        let closed = close_candidates(cert, schedule, n, budget, opts)?;
        for &eps in epsilons {
            let set = separate_candidates(cert.sys, &closed, eps);
            let in_fit = set.degenerate || (set.cardinality() as f64) <= QPP_SATURATION * closed.points.len() as f64;
            rows.push(QppRow { n, epsilon: eps, count: set.cardinality(), candidates: closed.candidates, in_fit });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oseledets::BlockParams;
    use crate::regularity::holder_constants;
    use crate::systems::make_system;
    use nalgebra::Matrix2;
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
    fn fixed_counts_match_determinant() {
        let a = Matrix2::new(2i64, 1, 1, 1);
        let mut m: Matrix2<i64> = Matrix2::identity();
        let ns: Vec<usize> = (1..=12).collect();
        let got = cat_fixed_counts(&ns);
        for (i, n) in ns.iter().enumerate() {
            m *= a;
            let det: i64 = (m[(0, 0)] - 1) * (m[(1, 1)] - 1) - m[(0, 1)] * m[(1, 0)];
            assert_eq!(got[i], det.abs() as f64, "n = {n}");
        }
        assert_eq!(&got[..5], &[1.0, 5.0, 16.0, 45.0, 121.0]);
    }

    #[test]
    fn line_fit_is_exact_on_a_line() {
        let x = [1.0, 2.0, 3.0, 5.0];
        let y: Vec<f64> = x.iter().map(|v| 0.7 * v - 2.0).collect();
        let (s, i, r) = fit_line(&x, &y);
        assert!((s - 0.7).abs() < 1e-12 && (i + 2.0).abs() < 1e-12 && r < 1e-12);
    }

    #[test]
    fn circle_packing_is_strict() {
        assert_eq!(circle_packing(0.03), 33);
        assert_eq!(circle_packing(0.05), 19);
        assert_eq!(circle_packing(0.3), 3);
    }

    #[test]
    fn rotation_has_flat_covers() {
        let (s, _) = setup("rotation");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = sample_points(&s, &Sampler::Uniform, 5000, &mut rng);
        let t = OrbitTable::build(&s, &pts, 17);
        let e = katok_entropy(&t, 0.05, 0.1, &(4..=16).collect::<Vec<_>>()).unwrap();
        assert!(e.h_hat.abs() <= 0.02, "{}", e.h_hat);
        assert!(e.rows.iter().all(|r| r.n_cover == e.rows[0].n_cover));
        assert!(e.rows.iter().all(|r| r.n_separated >= r.n_cover_double));
    }

    #[test]
    fn saturated_sample_is_reported() {
        let (s, _) = setup("cat");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = sample_points(&s, &Sampler::Uniform, 500, &mut rng);
        let t = OrbitTable::build(&s, &pts, 17);
        assert!(matches!(katok_entropy(&t, 0.05, 0.1, &[8, 9, 10]), Err(Error::Insufficient(_))));
    }

    #[test]
    fn kn_needs_long_windows() {
        let (s, _) = setup("cat");
        let cert = Certifier::new(&s, &BlockParams::default(), 50, 64);
        let t = OrbitTable::build(&s, &[vec![0.1, 0.2]], 9);
        assert!(matches!(build_kn(&cert, &t, 1, 0.25, 5.0, 8, 0.05), Err(Error::Precondition(_))));
    }

    #[test]
    fn cat_kn_validates_and_harvests() {
        let (s, sc) = setup("cat");
        let cert = Certifier::new(&s, &BlockParams::default(), 50, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = sample_points(&s, &Sampler::Uniform, 20000, &mut rng);
        let t = OrbitTable::build(&s, &pts, 11);
        let kn = build_kn(&cert, &t, 1, 0.25, 10.0 / 3.0, 8, 0.05).unwrap();
        assert!(!kn.members.is_empty());
        let v = validate_kn(&cert, &kn);
        assert!(v.pass(), "{:?}", v.failures);
        let h = harvest_quasi_periodic(&cert, &sc, &kn, &ShadowOptions::default()).unwrap();
        assert!(h.separated);
        let (ok, f) = verify_qpp_set(&cert, &h.largest, 0.1, 1e-8);
        assert!(ok, "{f:?}");
        // genuine periodic points: no center to move along
        assert!(h.kept.iter().all(|z| z.center_displacement == 0.0));
    }

    #[test]
    fn periodic_member_closes_to_itself() {
        let (s, sc) = setup("cat");
        let cert = Certifier::new(&s, &BlockParams::default(), 50, 64);
        // (0.2, 0.4) has period 2 under the cat map
        let kn = KnSet {
            k: 1,
            gamma: 0.25,
            l: 5.0,
            n: 2,
            beta: 0.05,
            mesh: 0.03,
            samples: 1,
            in_block: 1,
            returning: 1,
            members: vec![KnMember { point: vec![0.2, 0.4], kappa: 1, m: 2, kappa_return: 1, return_distance: 0.0 }],
        };
        let h = harvest_quasi_periodic(&cert, &sc, &kn, &ShadowOptions::default()).unwrap();
        let z = &h.kept[0].point;
        assert!((z[0] - 0.2).abs() < 1e-12 && (z[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn rotation_kn_respects_packing() {
        let (s, _) = setup("rotation");
        let cert = Certifier::new(&s, &BlockParams::default(), 50, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = sample_points(&s, &Sampler::Uniform, 5000, &mut rng);
        let t = OrbitTable::build(&s, &pts, 21);
        let l = 5.0;
        for n in [5, 8, 13] {
            let kn = build_kn(&cert, &t, 1, 0.5, l, n, 0.1).unwrap();
            assert!(kn.members.len() as f64 <= l.ceil(), "{}", kn.members.len());
        }
    }

    #[test]
    fn cat_period_five_count() {
        let (s, sc) = setup("cat");
        let cert = Certifier::new(&s, &BlockParams::default(), 50, 64);
        let set = count_separated_qpp(&cert, &sc, 5, 0.05, &QppBudget::default(), &ShadowOptions::default()).unwrap();
        let c = set.cardinality();
        assert!((61..=121).contains(&c), "{c}");
        let (ok, f) = verify_qpp_set(&cert, &set, 0.1, 1e-8);
        assert!(ok, "{f:?}");
    }

    #[test]
    fn verification_catches_duplicates() {
        let (s, _) = setup("cat");
        let cert = Certifier::new(&s, &BlockParams::default(), 50, 64);
        let z = QppPoint { point: vec![0.2, 0.4], seed: vec![0.2, 0.4], period: 2, su_residual: 0.0, center_displacement: 0.0, shadow_error: 0.0 };
        let set = SeparatedQppSet { period: 2, separation: 0.05, points: vec![z.clone(), z], degenerate: false };
        assert!(!verify_qpp_set(&cert, &set, 0.1, 1e-8).0);
    }

    #[test]
    fn rotation_counts_by_packing() {
        let (s, sc) = setup("rotation");
        let cert = Certifier::new(&s, &BlockParams::default(), 50, 64);
        for n in [3, 9] {
            let set = count_separated_qpp(&cert, &sc, n, 0.03, &QppBudget::default(), &ShadowOptions::default()).unwrap();
            assert!(set.degenerate);
            assert_eq!(set.cardinality(), 33);
        }
    }

    #[test]
    fn exact_cat_rate_beats_entropy() {
        let (s, _) = setup("cat");
        let ns: Vec<usize> = (4..=16).collect();
        let rows = cat_exact_rows(&s, &ns, 0.05).unwrap();
        let h = crate::systems::cat_lambda().ln();
        let rep = theorem_c_check(h, 0.05, rows, None).unwrap();
        assert!(rep.rates[0].rate >= h, "{}", rep.rates[0].rate);
        assert!(rep.pass);
    }
}
