//! Flat tori, subspaces, cones and local charts.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reduce a real number into `[0, 1)`.
#[inline]
pub fn wrap01(x: f64) -> f64 {
    let r = x.rem_euclid(1.0);
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

/// Representative of `b - a` in `(-1/2, 1/2]` for one coordinate.
#[inline]
pub fn wrapped_delta(a: f64, b: f64) -> f64 {
    let mut d = b - a;
    if d > 0.5 {
        d -= 1.0;
    } else if d <= -0.5 {
        d += 1.0;
    }
    d
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TorusPoint {
    coords: Vec<f64>,
}

impl TorusPoint {
    pub fn new(coords: impl Into<Vec<f64>>) -> Self {
        let mut coords = coords.into();
        for c in coords.iter_mut() {
            *c = wrap01(*c);
        }
        TorusPoint { coords }
    }

    pub fn origin(d: usize) -> Self {
        TorusPoint { coords: vec![0.0; d] }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// Chart addition: `self + v mod 1`.
    pub fn translate(&self, v: &[f64]) -> Self {
        debug_assert_eq!(v.len(), self.dim());
        TorusPoint {
            coords: self
                .coords
                .iter()
                .zip(v)
                .map(|(a, b)| wrap01(a + b))
                .collect(),
        }
    }
}

/// Squared flat-torus distance on raw coordinate slices.
#[inline]
pub fn dist2_raw(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = wrapped_delta(*x, *y);
            d * d
        })
        .sum()
}

pub fn torus_distance(x: &TorusPoint, y: &TorusPoint) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::DimensionMismatch(x.dim(), y.dim()));
    }
    // the min over shifts in {-1,0,1}^d separates per coordinate
    Ok(dist2_raw(&x.coords, &y.coords).sqrt())
}

pub fn chart_difference(anchor: &TorusPoint, y: &TorusPoint) -> Result<DVector<f64>> {
    if anchor.dim() != y.dim() {
        return Err(Error::DimensionMismatch(anchor.dim(), y.dim()));
    }
    let v = DVector::from_iterator(
        anchor.dim(),
        anchor
            .coords
            .iter()
            .zip(&y.coords)
            .map(|(a, b)| wrapped_delta(*a, *b)),
    );
    let n = v.norm();
    if n >= 0.25 {
        return Err(Error::ChartTooFar(n));
    }
    Ok(v)
}

/// Orthonormal basis of a linear subspace of R^n.
#[derive(Debug, Clone, PartialEq)]
pub struct Subspace {
    basis: DMatrix<f64>,
}

impl Subspace {
    pub fn zero(ambient: usize) -> Self {
        Subspace { basis: DMatrix::zeros(ambient, 0) }
    }

    /// Orthonormalizes the given columns; they must be linearly independent.
    pub fn from_columns(m: &DMatrix<f64>) -> Result<Self> {
        if m.ncols() == 0 {
            return Ok(Self::zero(m.nrows()));
        }
        if m.ncols() > m.nrows() {
            return Err(Error::DegenerateSplitting(format!(
                "{} columns in R^{}",
                m.ncols(),
                m.nrows()
            )));
        }
        let qr = m.clone().qr();
        let r = qr.r();
        let scale = m.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
        for i in 0..r.ncols() {
            if r[(i, i)].abs() <= 1e-13 * scale.max(1e-300) {
                return Err(Error::DegenerateSplitting("dependent columns".into()));
            }
        }
        let q = qr.q();
        Ok(Subspace { basis: q.columns(0, m.ncols()).into_owned() })
    }

    pub fn from_vectors(vs: &[DVector<f64>]) -> Result<Self> {
        if vs.is_empty() {
            return Err(Error::ZeroRank);
        }
        Self::from_columns(&DMatrix::from_columns(vs))
    }

    pub fn span(v: &[f64]) -> Result<Self> {
        Self::from_columns(&DMatrix::from_column_slice(v.len(), 1, v))
    }

    pub fn ambient_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn projector(&self) -> DMatrix<f64> {
        &self.basis * self.basis.transpose()
    }

    /// Direct sum; errors if the two are not transverse.
    pub fn sum(&self, other: &Subspace) -> Result<Subspace> {
        let mut cols: Vec<DVector<f64>> = self.basis.column_iter().map(|c| c.into_owned()).collect();
        cols.extend(other.basis.column_iter().map(|c| c.into_owned()));
        if cols.is_empty() {
            return Ok(Subspace::zero(self.ambient_dim()));
        }
        Subspace::from_columns(&DMatrix::from_columns(&cols))
    }

    pub fn orthonormality_defect(&self) -> f64 {
        let g = self.basis.transpose() * &self.basis - DMatrix::identity(self.rank(), self.rank());
        g.abs().max()
    }
}

/// `max_{v in A, |v|=1} d(v, B)` as the top singular value of `(I - P_B) A`.
fn one_sided(a: &Subspace, b: &Subspace) -> f64 {
    let resid = a.basis() - b.basis() * (b.basis().transpose() * a.basis());
    spectral_norm(&resid)
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.singular_values().max()
}

pub fn smallest_singular(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.singular_values().min()
}

pub fn subspace_distance(a: &Subspace, b: &Subspace) -> Result<f64> {
    if a.ambient_dim() != b.ambient_dim() {
        return Err(Error::DimensionMismatch(a.ambient_dim(), b.ambient_dim()));
    }
    if a.rank() == 0 || b.rank() == 0 {
        return Err(Error::ZeroRank);
    }
    Ok(one_sided(a, b).max(one_sided(b, a)).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormTag {
    Ambient,
    Translated,
}

#[derive(Debug, Clone)]
pub struct Cone {
    pub base: Subspace,
    pub complement: Subspace,
    pub width: f64,
    pub norm_tag: NormTag,
    frame_inv: DMatrix<f64>,
}

impl Cone {
    pub fn new(base: Subspace, complement: Subspace, width: f64, norm_tag: NormTag) -> Result<Self> {
        if base.ambient_dim() != complement.ambient_dim() {
            return Err(Error::DimensionMismatch(base.ambient_dim(), complement.ambient_dim()));
        }
        let n = base.ambient_dim();
        if base.rank() + complement.rank() != n {
            return Err(Error::DegenerateSplitting("cone frame does not span".into()));
        }
        if !(width > 0.0) {
            return Err(Error::InvalidParameter("width".into(), "must be positive".into()));
        }
        let frame = concat_columns(&[base.basis(), complement.basis()]);
        let frame_inv = frame
            .try_inverse()
            .ok_or_else(|| Error::DegenerateSplitting("cone frame singular".into()))?;
        Ok(Cone { base, complement, width, norm_tag, frame_inv })
    }

    /// Oblique decomposition `v = v1 + v2` along base and complement.
    pub fn split(&self, v: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let c = &self.frame_inv * v;
        let r = self.base.rank();
        let v1 = self.base.basis() * c.rows(0, r);
        let v2 = self.complement.basis() * c.rows(r, c.len() - r);
        (v1, v2)
    }
}

pub fn concat_columns(parts: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let n = parts[0].nrows();
    let cols: usize = parts.iter().map(|p| p.ncols()).sum();
    let mut m = DMatrix::zeros(n, cols);
    let mut j = 0;
    for p in parts {
        m.columns_mut(j, p.ncols()).copy_from(*p);
        j += p.ncols();
    }
    m
}

/// Closed-cone membership; `norm` measures both components.
pub fn cone_contains(v: &DVector<f64>, cone: &Cone, norm: &dyn Fn(&DVector<f64>) -> f64) -> Result<bool> {
    if v.len() != cone.base.ambient_dim() {
        return Err(Error::DimensionMismatch(v.len(), cone.base.ambient_dim()));
    }
    if v.iter().all(|x| *x == 0.0) {
        return Err(Error::ZeroVector);
    }
    let (v1, v2) = cone.split(v);
    let n1 = norm(&v1);
    let n2 = norm(&v2);
    Ok(n2 <= cone.width * n1 * (1.0 + 1e-12) + 1e-15 * v.norm())
}

pub fn ambient_norm(v: &DVector<f64>) -> f64 {
    v.norm()
}

/// Invariant decomposition `E^s + E^c + E^u` with cached oblique coordinates.
#[derive(Debug, Clone)]
pub struct Splitting {
    pub es: Subspace,
    pub ec: Subspace,
    pub eu: Subspace,
    frame: DMatrix<f64>,
    frame_inv: DMatrix<f64>,
}

impl Splitting {
    pub fn new(es: Subspace, ec: Subspace, eu: Subspace) -> Result<Self> {
        let n = es.ambient_dim();
        if ec.ambient_dim() != n || eu.ambient_dim() != n {
            return Err(Error::DimensionMismatch(n, ec.ambient_dim().max(eu.ambient_dim())));
        }
        if es.rank() + ec.rank() + eu.rank() != n {
            return Err(Error::DegenerateSplitting(format!(
                "ranks {}+{}+{} != {}",
                es.rank(),
                ec.rank(),
                eu.rank(),
                n
            )));
        }
        let frame = concat_columns(&[es.basis(), ec.basis(), eu.basis()]);
        let smin = smallest_singular(&frame);
        if smin <= 1e-9 {
            return Err(Error::DegenerateSplitting(format!("smallest singular value {smin:e}")));
        }
        let frame_inv = frame.clone().try_inverse().ok_or_else(|| Error::DegenerateSplitting("singular frame".into()))?;
        Ok(Splitting { es, ec, eu, frame, frame_inv })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.es.rank(), self.ec.rank(), self.eu.rank())
    }

    pub fn ambient_dim(&self) -> usize {
        self.frame.nrows()
    }

    /// Concatenated basis `[E^s | E^c | E^u]`.
    pub fn frame(&self) -> &DMatrix<f64> {
        &self.frame
    }

    pub fn frame_inv(&self) -> &DMatrix<f64> {
        &self.frame_inv
    }

    /// Coefficients of `v` in the bundle bases, in the order s, c, u.
    pub fn coords(&self, v: &DVector<f64>) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let c = &self.frame_inv * v;
        let (ds, dc, du) = self.dims();
        (
            c.rows(0, ds).into_owned(),
            c.rows(ds, dc).into_owned(),
            c.rows(ds + dc, du).into_owned(),
        )
    }

    pub fn decompose(&self, v: &DVector<f64>) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let (a, b, c) = self.coords(v);
        (self.es.basis() * a, self.ec.basis() * b, self.eu.basis() * c)
    }

    /// Oblique projector onto a bundle (0 = s, 1 = c, 2 = u).
    pub fn projector(&self, bundle: usize) -> DMatrix<f64> {
        let (ds, dc, du) = self.dims();
        let (off, r) = match bundle {
            0 => (0, ds),
            1 => (ds, dc),
            _ => (ds + dc, du),
        };
        self.frame.columns(off, r) * self.frame_inv.rows(off, r)
    }

    pub fn bundle(&self, bundle: usize) -> &Subspace {
        match bundle {
            0 => &self.es,
            1 => &self.ec,
            _ => &self.eu,
        }
    }

    pub fn ecs(&self) -> Result<Subspace> {
        self.es.sum(&self.ec)
    }

    pub fn ecu(&self) -> Result<Subspace> {
        self.ec.sum(&self.eu)
    }

    /// Swaps `E^s` and `E^u`; only used to build deliberately wrong inputs.
    pub fn swapped(&self) -> Result<Splitting> {
        Splitting::new(self.eu.clone(), self.ec.clone(), self.es.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distance_examples() {
        let a = TorusPoint::new(vec![0.0, 0.0]);
        let b = TorusPoint::new(vec![0.5, 0.0]);
        assert_eq!(torus_distance(&a, &a).unwrap(), 0.0);
        assert!((torus_distance(&a, &b).unwrap() - 0.5).abs() < 1e-15);
        // brute force over the nine shifts
        let x = [0.1, 0.9];
        let y = [0.9, 0.1];
        let mut best = f64::INFINITY;
        for s0 in -1..=1 {
            for s1 in -1..=1 {
                let d0 = x[0] - y[0] - s0 as f64;
                let d1 = x[1] - y[1] - s1 as f64;
                best = best.min((d0 * d0 + d1 * d1).sqrt());
            }
        }
        let got = torus_distance(&TorusPoint::new(x.to_vec()), &TorusPoint::new(y.to_vec())).unwrap();
        assert!((got - best).abs() < 1e-15);
        assert!((got - 0.282842712474619).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let a = TorusPoint::new(vec![0.0, 0.0]);
        let b = TorusPoint::new(vec![0.0]);
        assert!(matches!(torus_distance(&a, &b), Err(Error::DimensionMismatch(2, 1))));
    }

    #[test]
    fn wrap_is_half_open() {
        let p = TorusPoint::new(vec![1.0, -1e-20, 2.5, -0.25]);
        for c in p.coords() {
            assert!((0.0..1.0).contains(c));
        }
        assert_eq!(p.coords()[3], 0.75);
    }

    #[test]
    fn chart_examples() {
        let a = TorusPoint::new(vec![0.95, 0.5]);
        let b = TorusPoint::new(vec![0.05, 0.5]);
        let v = chart_difference(&a, &b).unwrap();
        assert!((v[0] - 0.1).abs() < 1e-12 && v[1] == 0.0);
        let v = chart_difference(&TorusPoint::new(vec![0.2, 0.2]), &TorusPoint::new(vec![0.3, 0.1])).unwrap();
        assert!((v[0] - 0.1).abs() < 1e-12 && (v[1] + 0.1).abs() < 1e-12);
        assert_eq!(chart_difference(&a, &a).unwrap().norm(), 0.0);
        assert!(chart_difference(&TorusPoint::new(vec![0.0, 0.0]), &TorusPoint::new(vec![0.3, 0.0])).is_err());
    }

    #[test]
    fn subspace_distance_examples() {
        let e1 = Subspace::span(&[1.0, 0.0]).unwrap();
        let e2 = Subspace::span(&[0.0, 1.0]).unwrap();
        assert_eq!(subspace_distance(&e1, &e1).unwrap(), 0.0);
        assert!((subspace_distance(&e1, &e2).unwrap() - 1.0).abs() < 1e-15);
        let tilt = Subspace::span(&[1.0, 0.1]).unwrap();
        // projection residual of e1 against the tilted line
        let u = [1.0 / 1.01f64.sqrt(), 0.1 / 1.01f64.sqrt()];
        let r = [1.0 - u[0] * u[0], -u[0] * u[1]];
        let oracle = (r[0] * r[0] + r[1] * r[1]).sqrt();
        let got = subspace_distance(&e1, &tilt).unwrap();
        assert!((got - oracle).abs() < 1e-14);
        assert!((got - 0.0995037190209989).abs() < 1e-12);
        assert!(matches!(subspace_distance(&e1, &Subspace::zero(2)), Err(Error::ZeroRank)));
    }

    #[test]
    fn unequal_ranks_one_sided() {
        let line = Subspace::span(&[1.0, 0.0, 0.0]).unwrap();
        let plane = Subspace::from_columns(&DMatrix::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0])).unwrap();
        // the plane is not inside the line: e2 is at distance 1
        assert!((subspace_distance(&line, &plane).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cone_examples() {
        let b = Subspace::span(&[1.0, 0.0]).unwrap();
        let c = Subspace::span(&[0.0, 1.0]).unwrap();
        let xi = 0.3;
        let cone = Cone::new(b, c, xi, NormTag::Ambient).unwrap();
        let on_base = DVector::from_vec(vec![2.0, 0.0]);
        assert!(cone_contains(&on_base, &cone, &ambient_norm).unwrap());
        let edge = DVector::from_vec(vec![1.0, xi]);
        assert!(cone_contains(&edge, &cone, &ambient_norm).unwrap());
        let out = DVector::from_vec(vec![1.0, 2.0 * xi]);
        assert!(!cone_contains(&out, &cone, &ambient_norm).unwrap());
        assert_eq!(cone_contains(&DVector::zeros(2), &cone, &ambient_norm), Err(Error::ZeroVector));
    }

    #[test]
    fn splitting_rejects_dependent_frame() {
        let a = Subspace::span(&[1.0, 0.0]).unwrap();
        let b = Subspace::span(&[1.0, 1e-12]).unwrap();
        assert!(Splitting::new(a, Subspace::zero(2), b).is_err());
    }

    #[test]
    fn splitting_decomposes() {
        let s = Splitting::new(
            Subspace::span(&[1.0, 0.0]).unwrap(),
            Subspace::zero(2),
            Subspace::span(&[1.0, 1.0]).unwrap(),
        )
        .unwrap();
        let v = DVector::from_vec(vec![3.0, 2.0]);
        let (vs, vc, vu) = s.decompose(&v);
        assert!((vs + vc + vu - &v).norm() < 1e-14);
        let p = s.projector(0) + s.projector(2);
        assert!((p - DMatrix::<f64>::identity(2, 2)).norm() < 1e-14);
    }
}
