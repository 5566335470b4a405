//! Experiment configuration: flat TOML sections of `key = value` lines.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::oseledets::BlockParams;
use crate::systems::{make_system, SystemSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_rot: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlocksSection {
    pub lambda: f64,
    pub mu: f64,
    pub lambda_p: f64,
    pub mu_p: f64,
    pub eps: f64,
    pub k_max: u32,
    /// Classification window half-length N.
    pub horizon: usize,
    pub points: usize,
}

impl Default for BlocksSection {
    fn default() -> Self {
        let p = BlockParams::default();
        BlocksSection { lambda: p.lambda, mu: p.mu, lambda_p: p.lambda_p, mu_p: p.mu_p, eps: p.eps, k_max: 64, horizon: 50, points: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LyapSection {
    pub horizon: usize,
    pub points: usize,
}

impl Default for LyapSection {
    fn default() -> Self {
        LyapSection { horizon: 10_000, points: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormsSection {
    pub points: usize,
    pub stride: usize,
    pub vectors: usize,
    pub xi: f64,
    pub sigma: f64,
    /// Required cone pass rate for nonlinear systems.
    pub min_cone_rate: f64,
}

impl Default for NormsSection {
    fn default() -> Self {
        NormsSection { points: 1000, stride: 5, vectors: 4, xi: 0.1, sigma: 0.5, min_cone_rate: 0.95 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HolderSection {
    pub pairs: usize,
    pub stride: usize,
    pub log_sep_min: f64,
    pub log_sep_max: f64,
    pub min_pass_rate: f64,
}

impl Default for HolderSection {
    fn default() -> Self {
        HolderSection { pairs: 1000, stride: 3, log_sep_min: -6.0, log_sep_max: -2.0, min_pass_rate: 0.95 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShadowSection {
    pub eta: f64,
    pub xi: f64,
    pub sigma: f64,
    pub c_tilde: f64,
    pub tol_su: f64,
    pub tol_leaf: f64,
    pub max_iter: usize,
    pub damping: f64,
    pub trials: usize,
    pub segments: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub rho: f64,
    pub min_converged: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_override: Option<f64>,
}

impl Default for ShadowSection {
    fn default() -> Self {
        ShadowSection {
            eta: 0.1,
            xi: 0.1,
            sigma: 0.5,
            c_tilde: 1.0,
            tol_su: 1e-10,
            tol_leaf: 1e-8,
            max_iter: 200,
            damping: 0.5,
            trials: 100,
            segments: 40,
            len_min: 1,
            len_max: 20,
            rho: 0.5,
            min_converged: 0.99,
            delta_override: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CloseSection {
    pub period: usize,
    pub beta: f64,
    /// Seeds on a `grid^d` lattice (base coordinates only).
    pub grid: usize,
}

impl Default for CloseSection {
    fn default() -> Self {
        CloseSection { period: 5, beta: 0.1, grid: 1536 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpecSection {
    pub segments: usize,
    pub length: usize,
    pub reference_len: usize,
    pub horizon: usize,
    pub radius: f64,
}

impl Default for SpecSection {
    fn default() -> Self {
        SpecSection { segments: 3, length: 6, reference_len: 10_000_000, horizon: 64, radius: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EntropySection {
    pub gamma: f64,
    pub delta: f64,
    pub n_min: usize,
    pub n_max: usize,
    pub samples: usize,
    /// Side of the sampling box at the origin; 1 samples the whole torus.
    pub window: f64,
}

impl Default for EntropySection {
    fn default() -> Self {
        EntropySection { gamma: 0.05, delta: 0.1, n_min: 4, n_max: 16, samples: 100_000, window: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QppSection {
    pub n_min: usize,
    pub n_max: usize,
    pub epsilons: Vec<f64>,
    pub reference_len: usize,
    pub beta: f64,
    pub max_candidates: usize,
}

impl Default for QppSection {
    fn default() -> Self {
        QppSection { n_min: 4, n_max: 8, epsilons: vec![0.2, 0.1, 0.05, 0.025], reference_len: 10_000_000, beta: 0.05, max_candidates: 200_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KnSection {
    pub k: u32,
    /// Return window `(1+γ)n`.
    pub window: f64,
    pub l: f64,
    pub beta: f64,
    pub samples: usize,
    pub n_values: Vec<usize>,
    /// Partition diameter bound of the trend check.
    pub trend_beta: f64,
}

impl Default for KnSection {
    fn default() -> Self {
        KnSection { k: 1, window: 0.25, l: 10.0 / 3.0, beta: 0.05, samples: 100_000, n_values: vec![4, 6, 8, 10, 12, 14, 16], trend_beta: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
    pub system: SystemSection,
    #[serde(default)]
    pub blocks: BlocksSection,
    #[serde(default)]
    pub lyap: LyapSection,
    #[serde(default)]
    pub norms: NormsSection,
    #[serde(default)]
    pub holder: HolderSection,
    #[serde(default)]
    pub shadow: ShadowSection,
    #[serde(default)]
    pub close: CloseSection,
    #[serde(default)]
    pub spec: SpecSection,
    #[serde(default)]
    pub entropy: EntropySection,
    #[serde(default)]
    pub qpp: QppSection,
    #[serde(default)]
    pub kn: KnSection,
}

fn default_seed() -> u64 {
    20240611
}

fn bad(key: &str, msg: impl Into<String>) -> Error {
    Error::Config { key: key.into(), msg: msg.into() }
}

fn open01(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(bad(key, format!("{v} not in (0, 1)")))
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(bad(key, format!("{v} must be positive and finite")))
    }
}

fn at_least(key: &str, v: usize, min: usize) -> Result<()> {
    if v >= min {
        Ok(())
    } else {
        Err(bad(key, format!("{v} < {min}")))
    }
}

impl ExperimentConfig {
    pub fn minimal(system: &str) -> Self {
        ExperimentConfig {
            seed: default_seed(),
            out_dir: None,
            system: SystemSection { name: system.into(), alpha_rot: None, nu: None },
            blocks: Default::default(),
            lyap: Default::default(),
            norms: Default::default(),
            holder: Default::default(),
            shadow: Default::default(),
            close: Default::default(),
            spec: Default::default(),
            entropy: Default::default(),
            qpp: Default::default(),
            kn: Default::default(),
        }
    }

    pub fn block_params(&self) -> BlockParams {
        let b = &self.blocks;
        BlockParams { lambda: b.lambda, mu: b.mu, lambda_p: b.lambda_p, mu_p: b.mu_p, eps: b.eps }
    }

    pub fn system_spec(&self) -> Result<SystemSpec> {
        let mut p = BTreeMap::new();
        if let Some(a) = self.system.alpha_rot {
            p.insert("alpha_rot".to_string(), a);
        }
        if let Some(n) = self.system.nu {
            p.insert("nu".to_string(), n);
        }
        make_system(&self.system.name, &p).map_err(|e| match e {
            Error::InvalidParameter(k, m) => bad(&format!("system.{k}"), m),
            Error::UnknownSystem(s) => bad("system.name", format!("unknown system `{s}`")),
            e => bad("system", e.to_string()),
        })
    }

    /// Range checks; the first offending key is named.
    pub fn validate(&self) -> Result<()> {
        self.system_spec()?;
        self.block_params().validate().map_err(|e| match e {
            Error::InvalidParameter(k, m) => bad(&format!("blocks.{k}"), m),
            e => bad("blocks", e.to_string()),
        })?;
        at_least("blocks.k_max", self.blocks.k_max as usize, 1)?;
        at_least("blocks.horizon", self.blocks.horizon, 1)?;
        at_least("lyap.horizon", self.lyap.horizon, 100)?;
        at_least("lyap.points", self.lyap.points, 1)?;
        at_least("norms.points", self.norms.points, 1)?;
        at_least("norms.stride", self.norms.stride, 1)?;
        at_least("norms.vectors", self.norms.vectors, 1)?;
        positive("norms.xi", self.norms.xi)?;
        open01("norms.sigma", self.norms.sigma)?;
        if !(0.0..=1.0).contains(&self.norms.min_cone_rate) {
            return Err(bad("norms.min_cone_rate", "must lie in [0, 1]"));
        }
        at_least("holder.pairs", self.holder.pairs, 1)?;
        at_least("holder.stride", self.holder.stride, 1)?;
        if !(self.holder.log_sep_min < self.holder.log_sep_max && self.holder.log_sep_max < -1.0) {
            return Err(bad("holder.log_sep_max", "need log_sep_min < log_sep_max < -1"));
        }
        let s = &self.shadow;
        if !(s.eta > 0.0 && s.eta <= 1.0) {
            return Err(bad("shadow.eta", format!("{} not in (0, 1]", s.eta)));
        }
        positive("shadow.xi", s.xi)?;
        open01("shadow.sigma", s.sigma)?;
        positive("shadow.c_tilde", s.c_tilde)?;
        positive("shadow.tol_su", s.tol_su)?;
        positive("shadow.tol_leaf", s.tol_leaf)?;
        at_least("shadow.max_iter", s.max_iter, 1)?;
        open01("shadow.damping", s.damping)?;
        at_least("shadow.segments", s.segments, 1)?;
        at_least("shadow.len_min", s.len_min, 1)?;
        at_least("shadow.len_max", s.len_max, s.len_min)?;
        if !(0.0..=1.0).contains(&s.rho) {
            return Err(bad("shadow.rho", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&s.min_converged) {
            return Err(bad("shadow.min_converged", "must lie in [0, 1]"));
        }
        if let Some(d) = s.delta_override {
            positive("shadow.delta_override", d)?;
        }
        at_least("close.period", self.close.period, 1)?;
        open01("close.beta", self.close.beta)?;
        at_least("close.grid", self.close.grid, 1)?;
        at_least("spec.segments", self.spec.segments, 1)?;
        at_least("spec.length", self.spec.length, 1)?;
        at_least("spec.horizon", self.spec.horizon, 1)?;
        open01("spec.radius", self.spec.radius)?;
        let e = &self.entropy;
        if !(e.gamma > 0.0 && e.gamma < 0.5) {
            return Err(bad("entropy.gamma", format!("{} not in (0, 1/2)", e.gamma)));
        }
        if !(0.0..1.0).contains(&e.delta) {
            return Err(bad("entropy.delta", format!("{} not in [0, 1)", e.delta)));
        }
        at_least("entropy.n_min", e.n_min, 1)?;
        at_least("entropy.n_max", e.n_max, e.n_min)?;
        at_least("entropy.samples", e.samples, 10)?;
        if !(e.window > 0.0 && e.window <= 1.0) {
            return Err(bad("entropy.window", format!("{} not in (0, 1]", e.window)));
        }
        let q = &self.qpp;
        at_least("qpp.n_min", q.n_min, 1)?;
        at_least("qpp.n_max", q.n_max, q.n_min)?;
        if q.epsilons.is_empty() {
            return Err(bad("qpp.epsilons", "empty"));
        }
        for v in &q.epsilons {
            open01("qpp.epsilons", *v)?;
        }
        open01("qpp.beta", q.beta)?;
        at_least("qpp.max_candidates", q.max_candidates, 1)?;
        let k = &self.kn;
        at_least("kn.k", k.k as usize, 1)?;
        positive("kn.window", k.window)?;
        positive("kn.l", k.l)?;
        open01("kn.beta", k.beta)?;
        open01("kn.trend_beta", k.trend_beta)?;
        at_least("kn.samples", k.samples, 1)?;
        if k.n_values.is_empty() || k.n_values.contains(&0) {
            return Err(bad("kn.n_values", "need positive values"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let d = Sha256::digest(self.to_toml().as_bytes());
        d.iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let c: ExperimentConfig = toml::from_str(text).map_err(|e| {
        let msg = e.message().to_string();
        let key = if let Some(rest) = msg.strip_prefix("unknown field `") {
            rest.split('`').next().unwrap_or("?").to_string()
        } else if let Some(rest) = msg.strip_prefix("missing field `") {
            rest.split('`').next().unwrap_or("?").to_string()
        } else {
            "?".to_string()
        };
        bad(&key, msg)
    })?;
    c.validate()?;
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_fills_defaults() {
        let c = parse_config("[system]\nname = \"cat\"\n").unwrap();
        assert_eq!(c, ExperimentConfig::minimal("cat"));
        assert_eq!(c.shadow.eta, 0.1);
        assert_eq!(c.entropy.gamma, 0.05);
        assert_eq!(c.blocks.eps, 0.01);
    }

    #[test]
    fn eps_bound_is_named() {
        let e = parse_config("[system]\nname = \"cat\"\n[blocks]\neps = 0.5\n").unwrap_err();
        match e {
            Error::Config { key, msg } => {
                assert_eq!(key, "blocks.eps");
                assert!(msg.contains("/10"), "{msg}");
            }
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn unknown_and_missing_keys() {
        let e = parse_config("[system]\nname = \"cat\"\nwarp = 1.0\n").unwrap_err();
        assert!(matches!(e, Error::Config { ref key, .. } if key == "warp"), "{e:?}");
        let e = parse_config("seed = 3\n").unwrap_err();
        assert!(matches!(e, Error::Config { ref key, .. } if key == "system"), "{e:?}");
        let e = parse_config("[system]\nname = \"torus\"\n").unwrap_err();
        assert!(matches!(e, Error::Config { ref key, .. } if key == "system.name"), "{e:?}");
    }

    #[test]
    fn round_trip() {
        let mut c = ExperimentConfig::minimal("cat_x_rot_perturbed");
        c.system.nu = Some(0.05);
        c.shadow.delta_override = Some(1e-9);
        c.qpp.epsilons = vec![0.1, 0.1 / 3.0];
        let back = parse_config(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }
}
