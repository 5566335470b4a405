//! Registry of torus diffeomorphisms with analytic inverses and Jacobians.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{spectral_norm, wrap01, TorusPoint};

pub const TWO_PI: f64 = 2.0 * PI;

/// Golden mean conjugate `(sqrt 5 - 1)/2`.
pub fn golden() -> f64 {
    (5f64.sqrt() - 1.0) / 2.0
}

/// Leading eigenvalue of the cat matrix, `(3 + sqrt 5)/2`.
pub fn cat_lambda() -> f64 {
    (3.0 + 5f64.sqrt()) / 2.0
}

pub const DEFAULT_MAX_ITER: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SystemKind {
    Cat,
    CatXRot { alpha_rot: f64 },
    CatXRotPerturbed { alpha_rot: f64, nu: f64 },
    Rotation { alpha_rot: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemSpec {
    pub name: String,
    pub kind: SystemKind,
    pub dimension: usize,
    pub parameters: BTreeMap<String, f64>,
    pub holder_exponent: f64,
    pub holder_constant: f64,
    pub derivative_bound: f64,
    /// Declared bundle dimensions (d_s, d_c, d_u).
    pub bundle_dims: (usize, usize, usize),
    pub max_iter: u64,
}

pub const REGISTRY: [&str; 4] = ["cat", "cat_x_rot", "cat_x_rot_perturbed", "rotation"];

pub fn default_alpha_rot(name: &str) -> f64 {
    match name {
        // small drift keeps fiber returns inside a partition cell over short windows
        "cat_x_rot" | "cat_x_rot_perturbed" => 1e-3 * golden(),
        _ => golden(),
    }
}

pub fn make_system(name: &str, params: &BTreeMap<String, f64>) -> Result<SystemSpec> {
    let allowed: &[&str] = match name {
        "cat" => &[],
        "cat_x_rot" | "rotation" => &["alpha_rot"],
        "cat_x_rot_perturbed" => &["alpha_rot", "nu"],
        _ => return Err(Error::UnknownSystem(name.to_string())),
    };
    for k in params.keys() {
        if !allowed.contains(&k.as_str()) {
            return Err(Error::InvalidParameter(k.clone(), format!("not a parameter of `{name}`")));
        }
    }
    let alpha_rot = params.get("alpha_rot").copied().unwrap_or_else(|| default_alpha_rot(name));
    if !alpha_rot.is_finite() {
        return Err(Error::InvalidParameter("alpha_rot".into(), "must be finite".into()));
    }
    let mut parameters = BTreeMap::new();
    let lam = cat_lambda();
    let spec = match name {
        "cat" => SystemSpec {
            name: name.into(),
            kind: SystemKind::Cat,
            dimension: 2,
            parameters,
            holder_exponent: 1.0,
            holder_constant: 0.0,
            derivative_bound: lam,
            bundle_dims: (1, 0, 1),
            max_iter: DEFAULT_MAX_ITER,
        },
        "cat_x_rot" => {
            parameters.insert("alpha_rot".into(), alpha_rot);
            SystemSpec {
                name: name.into(),
                kind: SystemKind::CatXRot { alpha_rot },
                dimension: 3,
                parameters,
                holder_exponent: 1.0,
                holder_constant: 0.0,
                derivative_bound: lam,
                bundle_dims: (1, 1, 1),
                max_iter: DEFAULT_MAX_ITER,
            }
        }
        "rotation" => {
            parameters.insert("alpha_rot".into(), alpha_rot);
            SystemSpec {
                name: name.into(),
                kind: SystemKind::Rotation { alpha_rot },
                dimension: 1,
                parameters,
                holder_exponent: 1.0,
                holder_constant: 0.0,
                derivative_bound: 1.0,
                bundle_dims: (0, 1, 0),
                max_iter: DEFAULT_MAX_ITER,
            }
        }
        _ => {
            let nu = params.get("nu").copied().unwrap_or(0.05);
            if !nu.is_finite() || nu < 0.0 {
                return Err(Error::InvalidParameter("nu".into(), "must be a nonnegative real".into()));
            }
            parameters.insert("alpha_rot".into(), alpha_rot);
            parameters.insert("nu".into(), nu);
            let mut spec = SystemSpec {
                name: name.into(),
                kind: SystemKind::CatXRotPerturbed { alpha_rot, nu },
                dimension: 3,
                parameters,
                holder_exponent: 1.0,
                holder_constant: 0.0,
                derivative_bound: 0.0,
                bundle_dims: (1, 1, 1),
                max_iter: DEFAULT_MAX_ITER,
            };
            let (det_min, l_max, k_max) = sample_perturbed_constants(&spec);
            if det_min < 0.1 {
                return Err(Error::NotInvertible(det_min));
            }
            spec.derivative_bound = 2.0 * l_max;
            spec.holder_constant = 2.0 * k_max;
            spec
        }
    };
    Ok(spec)
}

/// Grid sample of min det, max operator norm and max Lipschitz ratio of `Df`, `Df^-1`.
fn sample_perturbed_constants(spec: &SystemSpec) -> (f64, f64, f64) {
    let g = 12;
    let h = 1e-3;
    let offsets: [[f64; 3]; 4] = [[h, 0.0, 0.0], [0.0, h, 0.0], [0.0, 0.0, h], [h, -h, h]];
    let mut det_min = f64::INFINITY;
    let mut l_max: f64 = 0.0;
    let mut k_max: f64 = 0.0;
    for i in 0..g {
        for j in 0..g {
            for k in 0..g {
                let p = [i as f64 / g as f64, j as f64 / g as f64, k as f64 / g as f64];
                let jf = spec.jacobian(&p);
                let det = jf.determinant();
                det_min = det_min.min(det);
                if det.abs() < 1e-12 {
                    continue;
                }
                let ji = spec.jacobian_inv(&p);
                l_max = l_max.max(spectral_norm(&jf)).max(spectral_norm(&ji));
                for o in &offsets {
                    let q = [p[0] + o[0], p[1] + o[1], p[2] + o[2]];
                    let sep = (o[0] * o[0] + o[1] * o[1] + o[2] * o[2]).sqrt();
                    let jq = spec.jacobian(&q);
                    k_max = k_max.max(spectral_norm(&(&jq - &jf)) / sep);
                    let jqi = spec.jacobian_inv(&q);
                    k_max = k_max.max(spectral_norm(&(&jqi - &ji)) / sep);
                }
            }
        }
    }
    (det_min, l_max, k_max)
}

impl SystemSpec {
    pub fn is_linear(&self) -> bool {
        !matches!(self.kind, SystemKind::CatXRotPerturbed { nu, .. } if nu != 0.0)
    }

    pub fn is_volume_preserving(&self) -> bool {
        self.is_linear()
    }

    /// One forward step on raw coordinates, in place.
    #[inline]
    pub fn step(&self, p: &mut [f64]) {
        match self.kind {
            SystemKind::Cat => {
                let (x, y) = (p[0], p[1]);
                p[0] = wrap01(2.0 * x + y);
                p[1] = wrap01(x + y);
            }
            SystemKind::CatXRot { alpha_rot } => {
                let (x, y) = (p[0], p[1]);
                p[0] = wrap01(2.0 * x + y);
                p[1] = wrap01(x + y);
                p[2] = wrap01(p[2] + alpha_rot);
            }
            SystemKind::CatXRotPerturbed { alpha_rot, nu } => {
                let (x, y, t) = (p[0], p[1], p[2]);
                p[0] = wrap01(2.0 * x + y + nu * (TWO_PI * t).sin());
                p[1] = wrap01(x + y);
                p[2] = wrap01(t + alpha_rot + nu * (TWO_PI * x).sin());
            }
            SystemKind::Rotation { alpha_rot } => {
                p[0] = wrap01(p[0] + alpha_rot);
            }
        }
    }

    /// Advances `p` one step and `c` to `f(p + c) - f(p)`, avoiding cancellation in `c`.
    #[inline]
    pub fn step_offset(&self, p: &mut [f64], c: &mut [f64]) {
        match self.kind {
            SystemKind::Cat | SystemKind::CatXRot { .. } => {
                let (a, b) = (c[0], c[1]);
                c[0] = 2.0 * a + b;
                c[1] = a + b;
            }
            SystemKind::CatXRotPerturbed { nu, .. } => {
                let (a, b, t) = (c[0], c[1], c[2]);
                // sin(2 pi (u + h)) - sin(2 pi u) = 2 cos(2 pi u + pi h) sin(pi h)
                let ds = |u: f64, h: f64| 2.0 * (TWO_PI * u + PI * h).cos() * (PI * h).sin();
                c[0] = 2.0 * a + b + nu * ds(p[2], t);
                c[1] = a + b;
                c[2] = t + nu * ds(p[0], a);
            }
            SystemKind::Rotation { .. } => {}
        }
        self.step(p);
    }

    /// One inverse step on raw coordinates, in place.
    #[inline]
    pub fn step_inv(&self, p: &mut [f64]) {
        match self.kind {
            SystemKind::Cat => {
                let (x, y) = (p[0], p[1]);
                p[0] = wrap01(x - y);
                p[1] = wrap01(2.0 * y - x);
            }
            SystemKind::CatXRot { alpha_rot } => {
                let (x, y) = (p[0], p[1]);
                p[0] = wrap01(x - y);
                p[1] = wrap01(2.0 * y - x);
                p[2] = wrap01(p[2] - alpha_rot);
            }
            SystemKind::CatXRotPerturbed { alpha_rot, nu } => {
                let (xp, yp, tp) = (p[0], p[1], p[2]);
                // x - y' = x + nu sin(2 pi theta) pins x once theta is known
                let c = xp - yp;
                let target = tp - alpha_rot;
                let mut t = target - nu * (TWO_PI * c).sin();
                for _ in 0..60 {
                    let s = (TWO_PI * t).sin();
                    let cs = (TWO_PI * t).cos();
                    let arg = TWO_PI * (c - nu * s);
                    let g = t + nu * arg.sin() - target;
                    let dg = 1.0 - (TWO_PI * nu) * (TWO_PI * nu) * arg.cos() * cs;
                    let step = g / dg;
                    t -= step;
                    if step.abs() < 1e-17 {
                        break;
                    }
                }
                let x = c - nu * (TWO_PI * t).sin();
                p[0] = wrap01(x);
                p[1] = wrap01(yp - x);
                p[2] = wrap01(t);
            }
            SystemKind::Rotation { alpha_rot } => {
                p[0] = wrap01(p[0] - alpha_rot);
            }
        }
    }

    /// `D_p f`.
    pub fn jacobian(&self, p: &[f64]) -> DMatrix<f64> {
        match self.kind {
            SystemKind::Cat => DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 1.0]),
            SystemKind::CatXRot { .. } => {
                DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0])
            }
            SystemKind::CatXRotPerturbed { nu, .. } => {
                let a = TWO_PI * nu * (TWO_PI * p[2]).cos();
                let b = TWO_PI * nu * (TWO_PI * p[0]).cos();
                DMatrix::from_row_slice(3, 3, &[2.0, 1.0, a, 1.0, 1.0, 0.0, b, 0.0, 1.0])
            }
            SystemKind::Rotation { .. } => DMatrix::identity(1, 1),
        }
    }

    /// `(D_p f)^-1`, which is `D_{f p} f^-1`.
    pub fn jacobian_inv(&self, p: &[f64]) -> DMatrix<f64> {
        match self.kind {
            SystemKind::Cat => DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 2.0]),
            SystemKind::CatXRot { .. } => {
                DMatrix::from_row_slice(3, 3, &[1.0, -1.0, 0.0, -1.0, 2.0, 0.0, 0.0, 0.0, 1.0])
            }
            SystemKind::CatXRotPerturbed { nu, .. } => {
                let a = TWO_PI * nu * (TWO_PI * p[2]).cos();
                let b = TWO_PI * nu * (TWO_PI * p[0]).cos();
                // adjugate of [[2,1,a],[1,1,0],[b,0,1]]
                let det = 1.0 - a * b;
                DMatrix::from_row_slice(
                    3,
                    3,
                    &[1.0, -1.0, -a, -1.0, 2.0 - a * b, a, -b, b, 1.0],
                ) / det
            }
            SystemKind::Rotation { .. } => DMatrix::identity(1, 1),
        }
    }

    pub fn check_iter(&self, n: i64) -> Result<()> {
        if n.unsigned_abs() > self.max_iter {
            return Err(Error::Precondition(format!("|n| = {} exceeds max iteration {}", n.abs(), self.max_iter)));
        }
        Ok(())
    }

    pub fn evaluate(&self, x: &TorusPoint, n: i64) -> Result<TorusPoint> {
        if x.dim() != self.dimension {
            return Err(Error::DimensionMismatch(x.dim(), self.dimension));
        }
        self.check_iter(n)?;
        let mut p = x.coords().to_vec();
        self.iterate_raw(&mut p, n);
        Ok(TorusPoint::new(p))
    }

    #[inline]
    pub fn iterate_raw(&self, p: &mut [f64], n: i64) {
        if n >= 0 {
            for _ in 0..n {
                self.step(p);
            }
        } else {
            for _ in 0..(-n) {
                self.step_inv(p);
            }
        }
    }

    /// `D_x f^n` as an ordered product of step Jacobians.
    pub fn cocycle(&self, x: &TorusPoint, n: i64) -> Result<DMatrix<f64>> {
        if x.dim() != self.dimension {
            return Err(Error::DimensionMismatch(x.dim(), self.dimension));
        }
        self.check_iter(n)?;
        let d = self.dimension;
        let mut m = DMatrix::identity(d, d);
        let mut p = x.coords().to_vec();
        if n >= 0 {
            for _ in 0..n {
                m = self.jacobian(&p) * m;
                self.step(&mut p);
            }
        } else {
            for _ in 0..(-n) {
                self.step_inv(&mut p);
                m = self.jacobian_inv(&p) * m;
            }
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::wrapped_delta;

    fn empty() -> BTreeMap<String, f64> {
        BTreeMap::new()
    }

    #[test]
    fn cat_step_example() {
        let s = make_system("cat", &empty()).unwrap();
        let y = s.evaluate(&TorusPoint::new(vec![0.5, 0.5]), 1).unwrap();
        assert_eq!(y.coords(), &[0.5, 0.0]);
        let x = TorusPoint::new(vec![0.3, 0.7]);
        assert_eq!(s.evaluate(&x, 0).unwrap(), x);
    }

    #[test]
    fn fiber_returns_after_four_quarter_turns() {
        let mut p = BTreeMap::new();
        p.insert("alpha_rot".to_string(), 0.25);
        let s = make_system("cat_x_rot", &p).unwrap();
        let y = s.evaluate(&TorusPoint::new(vec![0.2, 0.3, 0.1]), 4).unwrap();
        assert!((y.coords()[2] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn cat_cocycle_trace_recurrence() {
        let s = make_system("cat", &empty()).unwrap();
        let (mut t0, mut t1) = (2.0, 3.0);
        for _ in 2..=5 {
            let t2 = 3.0 * t1 - t0;
            t0 = t1;
            t1 = t2;
        }
        let m = s.cocycle(&TorusPoint::new(vec![0.1, 0.2]), 5).unwrap();
        assert_eq!(t1, 123.0);
        assert!((m.trace() - t1).abs() < 1e-9);
        assert_eq!(s.cocycle(&TorusPoint::new(vec![0.1, 0.2]), 0).unwrap(), DMatrix::identity(2, 2));
    }

    #[test]
    fn cat_constants() {
        let s = make_system("cat", &empty()).unwrap();
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 1.0]);
        assert!((spectral_norm(&a) - s.derivative_bound).abs() < 1e-12);
        assert!((s.derivative_bound - 2.618033988749895).abs() < 1e-12);
        assert_eq!(s.holder_exponent, 1.0);
        assert_eq!(s.holder_constant, 0.0);
    }

    #[test]
    fn rotation_is_isometry() {
        let mut p = BTreeMap::new();
        p.insert("alpha_rot".to_string(), 0.3);
        let s = make_system("rotation", &p).unwrap();
        assert_eq!(s.derivative_bound, 1.0);
    }

    #[test]
    fn strong_perturbation_rejected() {
        let mut p = BTreeMap::new();
        p.insert("nu".to_string(), 0.5);
        // 1 - (2 pi 0.5)^2 cos cos reaches about -8.9 on the grid
        assert!(matches!(make_system("cat_x_rot_perturbed", &p), Err(Error::NotInvertible(_))));
    }

    #[test]
    fn unknown_names_and_keys() {
        assert!(matches!(make_system("henon", &empty()), Err(Error::UnknownSystem(_))));
        let mut p = BTreeMap::new();
        p.insert("nu".to_string(), 0.1);
        assert!(matches!(make_system("cat", &p), Err(Error::InvalidParameter(..))));
    }

    #[test]
    fn perturbed_inverse_and_jacobian() {
        let s = make_system("cat_x_rot_perturbed", &empty()).unwrap();
        let x = TorusPoint::new(vec![0.13, 0.77, 0.41]);
        let y = s.evaluate(&x, 1).unwrap();
        let back = s.evaluate(&y, -1).unwrap();
        assert!(crate::geometry::torus_distance(&x, &back).unwrap() < 1e-13);
        // central differences against the analytic Jacobian
        let j = s.jacobian(x.coords());
        let h = 1e-6;
        for c in 0..3 {
            let mut a = x.coords().to_vec();
            let mut b = x.coords().to_vec();
            a[c] += h;
            b[c] -= h;
            s.step(&mut a);
            s.step(&mut b);
            for r in 0..3 {
                let fd = crate::geometry::wrapped_delta(b[r], a[r]) / (2.0 * h);
                assert!((fd - j[(r, c)]).abs() < 1e-6, "entry ({r},{c})");
            }
        }
        let ji = s.jacobian_inv(x.coords());
        assert!((ji * j - DMatrix::<f64>::identity(3, 3)).norm() < 1e-13);
    }

    #[test]
    fn perturbed_constants_plausible() {
        let s = make_system("cat_x_rot_perturbed", &empty()).unwrap();
        // K is at least the sampled 4 pi^2 nu slope and L at least the cat norm
        assert!(s.holder_constant >= 4.0 * PI * PI * 0.05);
        assert!(s.derivative_bound >= cat_lambda());
        assert!(!s.is_volume_preserving());
    }

    #[test]
    fn offset_step_matches_difference() {
        for name in REGISTRY {
            let s = make_system(name, &BTreeMap::new()).unwrap();
            let d = s.dimension;
            let mut p: Vec<f64> = [0.13, 0.71, 0.42][..d].to_vec();
            let mut c: Vec<f64> = [1e-4, -3e-5, 2e-4][..d].to_vec();
            let mut q: Vec<f64> = p.iter().zip(&c).map(|(a, b)| a + b).collect();
            for _ in 0..5 {
                s.step_offset(&mut p, &mut c);
                s.step(&mut q);
                for k in 0..d {
                    assert!((wrapped_delta(p[k], q[k]) - c[k]).abs() < 1e-12, "{name}");
                }
            }
        }
    }
}
