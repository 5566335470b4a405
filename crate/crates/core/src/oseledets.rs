//! Lyapunov spectra, splitting estimates along orbit windows, and finite-horizon
//! block classification.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{concat_columns, spectral_norm, Splitting, Subspace, TorusPoint};
use crate::systems::SystemSpec;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LyapunovSpectrum {
    pub exponents: Vec<f64>,
    pub horizon: usize,
    pub point: TorusPoint,
}

/// Steps of backward history used to align the QR frame before averaging.
pub const QR_WARMUP: usize = 100;

/// Generic full-rank starting frame: a fixed, well-conditioned lower triangle.
fn generic_frame(d: usize, r: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(d, r);
    for j in 0..r {
        for i in 0..d {
            m[(i, j)] = match i.cmp(&j) {
                std::cmp::Ordering::Equal => 1.0,
                _ => 0.3183098861837907 * ((i + 2 * j + 1) as f64).sqrt() / (1.0 + (i as f64 - j as f64).abs()),
            };
        }
    }
    m
}

fn qr_step(m: DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let r = m.ncols();
    let qr = m.qr();
    let rr = qr.r();
    let q = qr.q().columns(0, r).into_owned();
    let mut diag = DVector::zeros(r);
    let mut q = q;
    // fix signs so the diagonal of R is positive
    for i in 0..r {
        let v = rr[(i, i)];
        if v < 0.0 {
            let mut c = q.column_mut(i);
            c.neg_mut();
        }
        diag[i] = v.abs();
    }
    (q, diag)
}

pub fn lyapunov_spectrum(sys: &SystemSpec, x: &TorusPoint, n: usize) -> Result<LyapunovSpectrum> {
    if n < 100 {
        return Err(Error::Precondition(format!("horizon {n} < 100")));
    }
    if x.dim() != sys.dimension {
        return Err(Error::DimensionMismatch(x.dim(), sys.dimension));
    }
    sys.check_iter((n + QR_WARMUP) as i64)?;
    let d = sys.dimension;
    let mut p = x.coords().to_vec();
    sys.iterate_raw(&mut p, -(QR_WARMUP as i64));
    let mut q = generic_frame(d, d);
    for _ in 0..QR_WARMUP {
        let (q2, _) = qr_step(sys.jacobian(&p) * q);
        q = q2;
        sys.step(&mut p);
    }
    let mut sums = vec![0.0; d];
    for _ in 0..n {
        let (q2, diag) = qr_step(sys.jacobian(&p) * q);
        for i in 0..d {
            if !(diag[i] > 0.0) || !diag[i].is_finite() {
                return Err(Error::Precondition("overflow guard: degenerate QR factor".into()));
            }
            sums[i] += diag[i].ln();
        }
        q = q2;
        sys.step(&mut p);
    }
    let mut exponents: Vec<f64> = sums.iter().map(|s| s / n as f64).collect();
    exponents.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(LyapunovSpectrum { exponents, horizon: n, point: x.clone() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub lambda: f64,
    pub mu: f64,
    /// λ′
    pub lambda_p: f64,
    /// μ′
    pub mu_p: f64,
    pub eps: f64,
}

impl Default for BlockParams {
    fn default() -> Self {
        BlockParams { lambda: 0.96, mu: 0.96, lambda_p: 0.001, mu_p: 0.001, eps: 0.01 }
    }
}

impl BlockParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: &str| Err(Error::InvalidParameter(k.into(), m.into()));
        let all = [self.lambda, self.mu, self.lambda_p, self.mu_p, self.eps];
        if all.iter().any(|v| !v.is_finite()) {
            return bad("block", "all rates must be finite");
        }
        if self.lambda <= 0.0 {
            return bad("lambda", "lambda > 0");
        }
        if self.mu <= 0.0 {
            return bad("mu", "mu > 0");
        }
        if self.lambda_p >= self.lambda {
            return bad("lambda_p", "-lambda < -lambda'");
        }
        if self.lambda_p + self.mu_p <= 0.0 {
            return bad("mu_p", "-lambda' < mu'");
        }
        if self.mu_p >= self.mu {
            return bad("mu_p", "mu' < mu");
        }
        if self.eps <= 0.0 {
            return bad("eps", "eps > 0");
        }
        let m = self
            .lambda
            .min(self.mu)
            .min(self.lambda - self.lambda_p)
            .min(self.mu - self.mu_p);
        if self.eps >= 0.1 * m {
            return bad(
                "eps",
                "eps < min(lambda, mu, |lambda - lambda'|, |mu - mu'|)/10",
            );
        }
        Ok(())
    }

    /// λ₁, μ₁, λ′₁, μ′₁.
    pub fn rates1(&self) -> (f64, f64, f64, f64) {
        let e = self.eps;
        (self.lambda - 2.0 * e, self.mu - 2.0 * e, self.lambda_p + 2.0 * e, self.mu_p + 2.0 * e)
    }

    /// Block parameters read off a spectrum with the given bundle dims and margin.
    pub fn from_spectrum(exps: &[f64], dims: (usize, usize, usize), margin: f64, eps: f64) -> Result<Self> {
        let (ds, dc, du) = dims;
        if ds == 0 || du == 0 {
            return Err(Error::GapViolation("no hyperbolic bundle on one side".into()));
        }
        // exps sorted descending: u block first, then c, then s
        let mu = exps[du - 1] - margin;
        let lambda = -exps[du + dc] - margin;
        let (mu_p, lambda_p) = if dc == 0 {
            (margin, margin)
        } else {
            (exps[du].max(-margin) + margin, (-exps[du + dc - 1]).max(-margin) + margin)
        };
        let p = BlockParams { lambda, mu, lambda_p, mu_p, eps };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SplittingOptions {
    /// Convergence margin of the frame iterations, in steps.
    pub margin: usize,
    /// Sine tolerance for recognising the intersection `E^cs ∩ E^cu`.
    pub angle_tol: f64,
}

impl Default for SplittingOptions {
    fn default() -> Self {
        SplittingOptions { margin: 48, angle_tol: 1e-6 }
    }
}

/// Restriction of the derivative cocycle to one bundle, in orthonormal bundle coordinates.
#[derive(Debug, Clone)]
pub struct BundleCocycle {
    pub rank: usize,
    /// `fwd[j]`: coordinates at valid index j to j+1 under `Df`.
    fwd: Vec<DMatrix<f64>>,
    /// `bwd[j]`: coordinates at valid index j+1 to j under `Df^-1`.
    bwd: Vec<DMatrix<f64>>,
    fwd_log: Vec<f64>,
    bwd_log: Vec<f64>,
}

impl BundleCocycle {
    fn new(rank: usize, fwd: Vec<DMatrix<f64>>, bwd: Vec<DMatrix<f64>>) -> Self {
        let mut fwd_log = vec![0.0];
        let mut bwd_log = vec![0.0];
        if rank == 1 {
            for m in &fwd {
                let l = fwd_log.last().unwrap() + m[(0, 0)].abs().ln();
                fwd_log.push(l);
            }
            for m in &bwd {
                let l = bwd_log.last().unwrap() + m[(0, 0)].abs().ln();
                bwd_log.push(l);
            }
        }
        BundleCocycle { rank, fwd, bwd, fwd_log, bwd_log }
    }

    pub fn fwd_step(&self, j: usize) -> &DMatrix<f64> {
        &self.fwd[j]
    }

    pub fn bwd_step(&self, j: usize) -> &DMatrix<f64> {
        &self.bwd[j]
    }

    /// `ln |Df^n|_E(z_j)|` for rank-one bundles.
    pub fn log_fwd(&self, j: usize, n: usize) -> f64 {
        self.fwd_log[j + n] - self.fwd_log[j]
    }

    /// `ln |Df^-n|_E(z_j)|` for rank-one bundles.
    pub fn log_bwd(&self, j: usize, n: usize) -> f64 {
        self.bwd_log[j] - self.bwd_log[j - n]
    }
}

/// An orbit window `z_lo..=z_hi` around `z_0 = x` with Jacobians, splitting estimates
/// on the converged interior and restricted bundle cocycles.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub dim: usize,
    pub lo: i64,
    pub hi: i64,
    pub dims: (usize, usize, usize),
    points: Vec<f64>,
    jac: Vec<DMatrix<f64>>,
    jac_inv: Vec<DMatrix<f64>>,
    /// Valid splitting range `vlo..=vhi` (orbit indices).
    pub vlo: i64,
    pub vhi: i64,
    splittings: Vec<Splitting>,
    ecs: Vec<Subspace>,
    ecu: Vec<Subspace>,
    pub bundles: [BundleCocycle; 3],
}

impl Trajectory {
    /// Builds the window `[lo, hi]` with splittings valid on `[lo + margin, hi - margin]`.
    pub fn new(sys: &SystemSpec, x: &TorusPoint, lo: i64, hi: i64, opts: &SplittingOptions) -> Result<Self> {
        Self::with_dims(sys, x, lo, hi, opts, sys.bundle_dims)
    }

    pub fn with_dims(
        sys: &SystemSpec,
        x: &TorusPoint,
        lo: i64,
        hi: i64,
        opts: &SplittingOptions,
        dims: (usize, usize, usize),
    ) -> Result<Self> {
        if x.dim() != sys.dimension {
            return Err(Error::DimensionMismatch(x.dim(), sys.dimension));
        }
        if lo > 0 || hi < 0 {
            return Err(Error::Precondition("window must contain the base point".into()));
        }
        sys.check_iter(lo)?;
        sys.check_iter(hi)?;
        let d = sys.dimension;
        let (ds, dc, du) = dims;
        if ds + dc + du != d {
            return Err(Error::DegenerateSplitting("dims do not sum to the dimension".into()));
        }
        let m = opts.margin as i64;
        let vlo = lo + m;
        let vhi = hi - m;
        if vlo > vhi {
            return Err(Error::Precondition("window shorter than twice the convergence margin".into()));
        }
        let len = (hi - lo + 1) as usize;
        let mut points = vec![0.0; len * d];
        let base = (-lo) as usize;
        let mut p = x.coords().to_vec();
        for i in base..len {
            points[i * d..(i + 1) * d].copy_from_slice(&p);
            sys.step(&mut p);
        }
        let mut q = x.coords().to_vec();
        for k in 1..=(-lo) as usize {
            sys.step_inv(&mut q);
            let i = (-lo) as usize - k;
            points[i * d..(i + 1) * d].copy_from_slice(&q);
        }
        let mut jac = Vec::with_capacity(len);
        let mut jac_inv = Vec::with_capacity(len);
        for i in 0..len {
            let z = &points[i * d..(i + 1) * d];
            jac.push(sys.jacobian(z));
            jac_inv.push(sys.jacobian_inv(z));
        }
        let nvalid = (vhi - vlo + 1) as usize;
        let off = (vlo - lo) as usize;

        let forward = |r: usize| -> Vec<Subspace> {
            if r == 0 {
                return vec![Subspace::zero(d); nvalid];
            }
            if r == d {
                return vec![Subspace::from_columns(&DMatrix::identity(d, d)).unwrap(); nvalid];
            }
            let mut q = generic_frame(d, r);
            let mut out = Vec::with_capacity(nvalid);
            for i in 0..(off + nvalid) {
                if i >= off {
                    out.push(Subspace::from_columns(&q).unwrap());
                }
                let (q2, _) = qr_step(&jac[i] * q);
                q = q2;
            }
            out
        };
        let backward = |r: usize| -> Vec<Subspace> {
            if r == 0 {
                return vec![Subspace::zero(d); nvalid];
            }
            if r == d {
                return vec![Subspace::from_columns(&DMatrix::identity(d, d)).unwrap(); nvalid];
            }
            let mut q = generic_frame(d, r);
            let mut out = vec![Subspace::zero(d); nvalid];
            let mut i = len - 1;
            loop {
                if i >= off && i < off + nvalid {
                    out[i - off] = Subspace::from_columns(&q).unwrap();
                }
                if i == off {
                    break;
                }
                // z_{i-1} = f^-1 z_i: apply (D_{z_{i-1}} f)^-1
                let (q2, _) = qr_step(&jac_inv[i - 1] * q);
                q = q2;
                i -= 1;
            }
            out
        };
        let eu = forward(du);
        let ecu = forward(dc + du);
        let es = backward(ds);
        let ecs = backward(ds + dc);
        let mut splittings = Vec::with_capacity(nvalid);
        for j in 0..nvalid {
            let ec = intersect(&ecs[j], &ecu[j], dc, opts.angle_tol)?;
            splittings.push(Splitting::new(es[j].clone(), ec, eu[j].clone())?);
        }
        let mut bundles_fwd: [Vec<DMatrix<f64>>; 3] = Default::default();
        let mut bundles_bwd: [Vec<DMatrix<f64>>; 3] = Default::default();
        let offsets = [0, ds, ds + dc];
        let ranks = [ds, dc, du];
        for j in 0..nvalid.saturating_sub(1) {
            let a = &splittings[j];
            let b = &splittings[j + 1];
            let i = off + j;
            let fimg = &jac[i] * a.frame();
            let fco = b.frame_inv() * fimg;
            let bimg = &jac_inv[i] * b.frame();
            let bco = a.frame_inv() * bimg;
            for k in 0..3 {
                let r = ranks[k];
                let o = offsets[k];
                bundles_fwd[k].push(fco.view((o, o), (r, r)).into_owned());
                bundles_bwd[k].push(bco.view((o, o), (r, r)).into_owned());
            }
        }
        let [f0, f1, f2] = bundles_fwd;
        let [b0, b1, b2] = bundles_bwd;
        let bundles = [
            BundleCocycle::new(ds, f0, b0),
            BundleCocycle::new(dc, f1, b1),
            BundleCocycle::new(du, f2, b2),
        ];
        Ok(Trajectory {
            dim: d,
            lo,
            hi,
            dims,
            points,
            jac,
            jac_inv,
            vlo,
            vhi,
            splittings,
            ecs,
            ecu,
            bundles,
        })
    }

    #[inline]
    fn slot(&self, i: i64) -> usize {
        debug_assert!(i >= self.lo && i <= self.hi);
        (i - self.lo) as usize
    }

    pub fn point(&self, i: i64) -> &[f64] {
        let s = self.slot(i);
        &self.points[s * self.dim..(s + 1) * self.dim]
    }

    pub fn torus_point(&self, i: i64) -> TorusPoint {
        TorusPoint::new(self.point(i).to_vec())
    }

    /// `D_{z_i} f`.
    pub fn jac(&self, i: i64) -> &DMatrix<f64> {
        &self.jac[self.slot(i)]
    }

    /// `(D_{z_i} f)^-1`.
    pub fn jac_inv(&self, i: i64) -> &DMatrix<f64> {
        &self.jac_inv[self.slot(i)]
    }

    pub fn is_valid(&self, i: i64) -> bool {
        i >= self.vlo && i <= self.vhi
    }

    fn vslot(&self, i: i64) -> usize {
        assert!(self.is_valid(i), "index {i} outside converged range [{}, {}]", self.vlo, self.vhi);
        (i - self.vlo) as usize
    }

    pub fn splitting(&self, i: i64) -> &Splitting {
        &self.splittings[self.vslot(i)]
    }

    pub fn ecs(&self, i: i64) -> &Subspace {
        &self.ecs[self.vslot(i)]
    }

    pub fn ecu(&self, i: i64) -> &Subspace {
        &self.ecu[self.vslot(i)]
    }

    /// `|Df^n|_{E_b(z_i)}|` in the ambient norm (orthonormal bundle bases).
    pub fn restricted_norm_fwd(&self, b: usize, i: i64, n: usize) -> f64 {
        let bc = &self.bundles[b];
        if bc.rank == 0 {
            return 0.0;
        }
        let j = self.vslot(i);
        assert!(self.is_valid(i + n as i64));
        if bc.rank == 1 {
            return bc.log_fwd(j, n).exp();
        }
        let mut m = DMatrix::identity(bc.rank, bc.rank);
        for t in 0..n {
            m = bc.fwd_step(j + t) * m;
        }
        spectral_norm(&m)
    }

    /// `|Df^-n|_{E_b(z_i)}|`.
    pub fn restricted_norm_bwd(&self, b: usize, i: i64, n: usize) -> f64 {
        let bc = &self.bundles[b];
        if bc.rank == 0 {
            return 0.0;
        }
        let j = self.vslot(i);
        assert!(self.is_valid(i - n as i64));
        if bc.rank == 1 {
            return bc.log_bwd(j, n).exp();
        }
        let mut m = DMatrix::identity(bc.rank, bc.rank);
        for t in 0..n {
            m = bc.bwd_step(j - t - 1) * m;
        }
        spectral_norm(&m)
    }

    /// Log operator norms `ln|Df^n|_{E_b(z_i)}|` for n = 0..=nmax (forward) in one sweep.
    pub fn log_norms_fwd(&self, b: usize, i: i64, nmax: usize) -> Vec<f64> {
        let bc = &self.bundles[b];
        let j = self.vslot(i);
        assert!(self.is_valid(i + nmax as i64));
        if bc.rank == 0 {
            return vec![f64::NEG_INFINITY; nmax + 1];
        }
        if bc.rank == 1 {
            return (0..=nmax).map(|n| bc.log_fwd(j, n)).collect();
        }
        let mut m = DMatrix::identity(bc.rank, bc.rank);
        let mut out = vec![0.0];
        for t in 0..nmax {
            m = bc.fwd_step(j + t) * m;
            out.push(spectral_norm(&m).ln());
        }
        out
    }

    pub fn log_norms_bwd(&self, b: usize, i: i64, nmax: usize) -> Vec<f64> {
        let bc = &self.bundles[b];
        let j = self.vslot(i);
        assert!(self.is_valid(i - nmax as i64));
        if bc.rank == 0 {
            return vec![f64::NEG_INFINITY; nmax + 1];
        }
        if bc.rank == 1 {
            return (0..=nmax).map(|n| bc.log_bwd(j, n)).collect();
        }
        let mut m = DMatrix::identity(bc.rank, bc.rank);
        let mut out = vec![0.0];
        for t in 0..nmax {
            m = bc.bwd_step(j - t - 1) * m;
            out.push(spectral_norm(&m).ln());
        }
        out
    }

    /// `ln|Df^{±k} a|` for k = 0..=n along the orbit of bundle coordinates `a`.
    pub fn log_orbit_norms(&self, b: usize, i: i64, n: usize, forward: bool, a: &DVector<f64>) -> Vec<f64> {
        let bc = &self.bundles[b];
        let reach = if forward { i + n as i64 } else { i - n as i64 };
        assert!(self.is_valid(reach));
        let a0 = a.norm();
        if bc.rank == 0 || a0 == 0.0 {
            return vec![f64::NEG_INFINITY; n + 1];
        }
        let j = self.vslot(i);
        if bc.rank == 1 {
            let l0 = a[0].abs().ln();
            return (0..=n)
                .map(|k| l0 + if forward { bc.log_fwd(j, k) } else { bc.log_bwd(j, k) })
                .collect();
        }
        let mut out = Vec::with_capacity(n + 1);
        let mut v = a / a0;
        let mut scale = a0.ln();
        out.push(scale);
        for t in 0..n {
            v = if forward { bc.fwd_step(j + t) * v } else { bc.bwd_step(j - t - 1) * v };
            let r = v.norm();
            scale += r.ln();
            v /= r;
            out.push(scale);
        }
        out
    }

    /// `|Df^n a|` for bundle coordinates `a` at `z_i` (n may be negative).
    pub fn restricted_apply_norm(&self, b: usize, i: i64, n: i64, a: &DVector<f64>) -> f64 {
        let bc = &self.bundles[b];
        if bc.rank == 0 {
            return 0.0;
        }
        let j = self.vslot(i);
        assert!(self.is_valid(i + n));
        if bc.rank == 1 {
            let l = if n >= 0 { bc.log_fwd(j, n as usize) } else { bc.log_bwd(j, (-n) as usize) };
            return a[0].abs() * l.exp();
        }
        let mut v = a.clone();
        if n >= 0 {
            for t in 0..n as usize {
                v = bc.fwd_step(j + t) * v;
            }
        } else {
            for t in 0..(-n) as usize {
                v = bc.bwd_step(j - t - 1) * v;
            }
        }
        v.norm()
    }
}

/// `A ∩ B` via principal vectors whose angle sine is below `tol`.
pub fn intersect(a: &Subspace, b: &Subspace, want: usize, tol: f64) -> Result<Subspace> {
    let d = a.ambient_dim();
    if want == 0 {
        return Ok(Subspace::zero(d));
    }
    if a.rank() == d {
        return Ok(b.clone());
    }
    if b.rank() == d {
        return Ok(a.clone());
    }
    let m = a.basis().transpose() * b.basis();
    let svd = m.svd(true, false);
    let u = svd.u.unwrap();
    let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    idx.sort_by(|&i, &j| svd.singular_values[j].partial_cmp(&svd.singular_values[i]).unwrap());
    let got = idx
        .iter()
        .filter(|&&i| {
            let c = svd.singular_values[i].min(1.0);
            (1.0 - c * c).max(0.0).sqrt() < tol
        })
        .count();
    if got != want {
        return Err(Error::IntersectionDim { got, want });
    }
    let cols: Vec<DVector<f64>> = idx[..want].iter().map(|&i| a.basis() * u.column(i)).collect();
    Subspace::from_vectors(&cols)
}

fn block_groups(exps: &[f64], dims: (usize, usize, usize)) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (ds, dc, du) = dims;
    (
        exps[du + dc..du + dc + ds].to_vec(),
        exps[du..du + dc].to_vec(),
        exps[..du].to_vec(),
    )
}

/// Checks the block gaps of a spectrum: every adjacent pair of nonempty bundles
/// separated by more than `4 eps`, and at least one hyperbolic bundle.
pub fn check_gap(exps: &[f64], dims: (usize, usize, usize), eps: f64) -> Result<()> {
    let (s, c, u) = block_groups(exps, dims);
    if s.is_empty() && u.is_empty() {
        return Err(Error::GapViolation("no hyperbolic bundle".into()));
    }
    let groups: Vec<&Vec<f64>> = [&s, &c, &u].into_iter().filter(|g| !g.is_empty()).collect();
    for w in groups.windows(2) {
        let lower = w[0].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let upper = w[1].iter().cloned().fold(f64::INFINITY, f64::min);
        if upper - lower <= 4.0 * eps {
            return Err(Error::GapViolation(format!("gap {:.3e} <= 4 eps", upper - lower)));
        }
    }
    if !s.is_empty() && s.iter().any(|v| *v >= -4.0 * eps) {
        return Err(Error::GapViolation("stable exponent not negative".into()));
    }
    if !u.is_empty() && u.iter().any(|v| *v <= 4.0 * eps) {
        return Err(Error::GapViolation("unstable exponent not positive".into()));
    }
    Ok(())
}

pub fn estimate_splitting(sys: &SystemSpec, x: &TorusPoint, horizon: usize) -> Result<Splitting> {
    estimate_splitting_with(sys, x, horizon, 0.01, &SplittingOptions::default())
}

pub fn estimate_splitting_with(
    sys: &SystemSpec,
    x: &TorusPoint,
    horizon: usize,
    eps: f64,
    opts: &SplittingOptions,
) -> Result<Splitting> {
    let spec = lyapunov_spectrum(sys, x, horizon.max(100))?;
    check_gap(&spec.exponents, sys.bundle_dims, eps)?;
    let h = horizon.max(opts.margin) as i64;
    let o = SplittingOptions { margin: h as usize, ..*opts };
    let t = Trajectory::new(sys, x, -h, h, &o)?;
    Ok(t.splitting(0).clone())
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SplittingRecord {
    pub es: Vec<Vec<f64>>,
    pub ec: Vec<Vec<f64>>,
    pub eu: Vec<Vec<f64>>,
}

fn cols(s: &Subspace) -> Vec<Vec<f64>> {
    s.basis().column_iter().map(|c| c.iter().cloned().collect()).collect()
}

impl SplittingRecord {
    pub fn from_splitting(s: &Splitting) -> Self {
        SplittingRecord { es: cols(&s.es), ec: cols(&s.ec), eu: cols(&s.eu) }
    }

    pub fn to_splitting(&self, d: usize) -> Result<Splitting> {
        let sub = |v: &Vec<Vec<f64>>| -> Result<Subspace> {
            if v.is_empty() {
                return Ok(Subspace::zero(d));
            }
            let vs: Vec<DVector<f64>> = v.iter().map(|c| DVector::from_vec(c.clone())).collect();
            Subspace::from_vectors(&vs)
        };
        Splitting::new(sub(&self.es)?, sub(&self.ec)?, sub(&self.eu)?)
    }
}

/// Worst log-slack per condition family at the certified index; `None` when vacuous.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Margins {
    pub stable: Option<f64>,
    pub center_fwd: Option<f64>,
    pub center_bwd: Option<f64>,
    pub unstable: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockCertificate {
    pub x: TorusPoint,
    pub params: BlockParams,
    pub horizon: usize,
    pub kappa: u32,
    pub splitting: SplittingRecord,
    pub margins: Margins,
}

pub const DEFAULT_K_MAX: u32 = 64;

/// Per-family maximal excess `ln|..| - rate n - eps |m|` over the window, in log units.
#[derive(Debug, Clone, Copy)]
struct Excess {
    stable: Option<f64>,
    center_fwd: Option<f64>,
    center_bwd: Option<f64>,
    unstable: Option<f64>,
}

fn window_excess(t: &Trajectory, i0: i64, p: &BlockParams, n_h: usize) -> Excess {
    let (ds, dc, du) = t.dims;
    let e = p.eps;
    let nh = n_h as i64;
    let mut ex = Excess { stable: None, center_fwd: None, center_bwd: None, unstable: None };
    let upd = |slot: &mut Option<f64>, v: f64| {
        *slot = Some(slot.map_or(v, |s: f64| s.max(v)));
    };
    for m in -nh..=nh {
        let nmax = (nh - m.abs()) as usize;
        let i = i0 + m;
        let em = e * m.abs() as f64;
        if ds > 0 {
            for (n, l) in t.log_norms_fwd(0, i, nmax).into_iter().enumerate() {
                upd(&mut ex.stable, l + (p.lambda - e) * n as f64 - em);
            }
        }
        if dc > 0 {
            for (n, l) in t.log_norms_fwd(1, i, nmax).into_iter().enumerate() {
                upd(&mut ex.center_fwd, l - (p.mu_p + e) * n as f64 - em);
            }
            for (n, l) in t.log_norms_bwd(1, i, nmax).into_iter().enumerate() {
                upd(&mut ex.center_bwd, l - (p.lambda_p + e) * n as f64 - em);
            }
        }
        if du > 0 {
            for (n, l) in t.log_norms_bwd(2, i, nmax).into_iter().enumerate() {
                upd(&mut ex.unstable, l + (p.mu - e) * n as f64 - em);
            }
        }
    }
    ex
}

/// Smallest k >= 1 with `eps k >= excess` for every family.
fn minimal_index(ex: &Excess, eps: f64) -> u32 {
    let worst = [ex.stable, ex.center_fwd, ex.center_bwd, ex.unstable]
        .iter()
        .flatten()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    if worst <= eps {
        return 1;
    }
    // guard against rounding right at an integer boundary
    let k = (worst / eps - 1e-9).ceil();
    if k > u32::MAX as f64 {
        u32::MAX
    } else {
        k.max(1.0) as u32
    }
}

/// Classifies `z_i` of an existing trajectory; the window `[i-N, i+N]` must be converged.
pub fn classify_at(t: &Trajectory, i: i64, params: &BlockParams, n_h: usize, k_max: u32) -> Result<BlockCertificate> {
    let nh = n_h as i64;
    if !t.is_valid(i - nh) || !t.is_valid(i + nh) {
        return Err(Error::Precondition("splitting window not converged".into()));
    }
    let ex = window_excess(t, i, params, n_h);
    let k = minimal_index(&ex, params.eps);
    if k > k_max {
        return Err(Error::NoIndex(k_max));
    }
    let slack = |v: Option<f64>| v.map(|x| params.eps * k as f64 - x);
    Ok(BlockCertificate {
        x: t.torus_point(i),
        params: *params,
        horizon: n_h,
        kappa: k,
        splitting: SplittingRecord::from_splitting(t.splitting(i)),
        margins: Margins {
            stable: slack(ex.stable),
            center_fwd: slack(ex.center_fwd),
            center_bwd: slack(ex.center_bwd),
            unstable: slack(ex.unstable),
        },
    })
}

/// Re-checks every inequality of the window at index `k`.
pub fn passes_at_index(t: &Trajectory, i: i64, params: &BlockParams, n_h: usize, k: u32) -> bool {
    let ex = window_excess(t, i, params, n_h);
    let bound = params.eps * k as f64 + 1e-12;
    [ex.stable, ex.center_fwd, ex.center_bwd, ex.unstable].iter().flatten().all(|v| *v <= bound)
}

pub fn classify_block(sys: &SystemSpec, x: &TorusPoint, params: &BlockParams, n_h: usize) -> Result<BlockCertificate> {
    classify_block_with(sys, x, params, n_h, DEFAULT_K_MAX, &SplittingOptions::default())
}

pub fn classify_block_with(
    sys: &SystemSpec,
    x: &TorusPoint,
    params: &BlockParams,
    n_h: usize,
    k_max: u32,
    opts: &SplittingOptions,
) -> Result<BlockCertificate> {
    params.validate()?;
    let w = (n_h + opts.margin) as i64;
    let t = Trajectory::new(sys, x, -w, w, opts)?;
    classify_at(&t, 0, params, n_h, k_max)
}

/// Certifies `count` points `z_{j*stride}` of one long orbit from `x0`.
pub fn classify_orbit(
    sys: &SystemSpec,
    x0: &TorusPoint,
    count: usize,
    stride: usize,
    params: &BlockParams,
    n_h: usize,
    k_max: u32,
    opts: &SplittingOptions,
) -> Result<(Trajectory, Vec<(i64, Result<BlockCertificate>)>)> {
    params.validate()?;
    let w = (n_h + opts.margin) as i64;
    let span = (count.saturating_sub(1) * stride) as i64;
    let t = Trajectory::new(sys, x0, -w, span + w, opts)?;
    let certs = (0..count)
        .map(|j| {
            let i = (j * stride) as i64;
            (i, classify_at(&t, i, params, n_h, k_max))
        })
        .collect();
    Ok((t, certs))
}

/// Concatenated `[E^s | E^c | E^u]` basis of a trajectory splitting, for diagnostics.
pub fn frame_of(s: &Splitting) -> DMatrix<f64> {
    concat_columns(&[s.es.basis(), s.ec.basis(), s.eu.basis()])
}
