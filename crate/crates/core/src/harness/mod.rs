//! Reproducible runs: configuration, seeded substreams, artifacts and manifests.

pub mod config;
pub mod experiments;

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
pub use config::{parse_config, ExperimentConfig};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "QSHADOW_OUT";

pub const SUBCOMMANDS: [&str; 11] =
    ["lyap", "blocks", "norms", "holder", "shadow", "close", "spec", "entropy", "qpp", "theorem-c", "all"];

/// Independent stream for `name`; the same `(seed, name)` always gives the same stream.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    let mut s = [0u8; 32];
    s.copy_from_slice(&d);
    ChaCha8Rng::from_seed(s)
}

/// Order-preserving map over `jobs` scoped threads.
pub fn par_map<T: Sync, R: Send>(jobs: usize, items: &[T], f: impl Fn(usize, &T) -> R + Sync) -> Vec<R> {
    if jobs <= 1 || items.len() <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| s.spawn(move || part.iter().enumerate().map(|(j, t)| f(c * chunk + j, t)).collect::<Vec<R>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    F(f64),
    I(i64),
    S(String),
    B(bool),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::F(v) => format!("{v:.16e}"),
            Cell::I(v) => v.to_string(),
            Cell::S(s) => s.clone(),
            Cell::B(b) => b.to_string(),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::F(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::I(v as i64)
    }
}

impl From<u32> for Cell {
    fn from(v: u32) -> Self {
        Cell::I(v as i64)
    }
}

impl From<i64> for Cell {
    fn from(v: i64) -> Self {
        Cell::I(v)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::B(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::S(v.to_string())
    }
}

#[derive(Debug, Clone)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Table { name: name.into(), header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn with_header(name: &str, header: Vec<String>) -> Self {
        Table { name: name.into(), header, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).map_err(|e| Error::Io(e.to_string()))?;
        for r in &self.rows {
            w.write_record(r.iter().map(Cell::render)).map_err(|e| Error::Io(e.to_string()))?;
        }
        w.into_inner().map_err(|e| Error::Io(e.to_string()))
    }
}

/// Coordinate column names `prefix0 .. prefix{d-1}`.
pub fn coord_header(prefix: &str, d: usize) -> Vec<String> {
    (0..d).map(|i| format!("{prefix}{i}")).collect()
}

pub fn coord_cells(v: &[f64]) -> Vec<Cell> {
    v.iter().map(|x| Cell::F(*x)).collect()
}

/// Result of one subcommand before it is written to disk.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub name: String,
    pub pass: bool,
    pub summary: Value,
    pub tables: Vec<Table>,
    pub json: Vec<(String, Value)>,
}

impl Outcome {
    pub fn new(name: &str) -> Self {
        Outcome { name: name.into(), pass: false, summary: json!({}), tables: Vec::new(), json: Vec::new() }
    }

    /// A computation that could not finish counts as a contract failure.
    pub fn failed(name: &str, err: &Error) -> Self {
        let mut o = Outcome::new(name);
        o.summary = json!({ "error": err.to_string() });
        o
    }
}

pub fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable")
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub subcommand: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub jobs: usize,
    pub pass: bool,
    pub artifacts: Vec<String>,
}

/// Writes an outcome's files under `dir` and returns the artifact names.
pub fn write_outcome(dir: &Path, o: &Outcome, cfg: &ExperimentConfig) -> Result<Vec<String>> {
    fs::create_dir_all(dir)?;
    let hash = cfg.hash();
    let mut names = Vec::new();
    for t in &o.tables {
        fs::write(dir.join(&t.name), t.to_csv()?)?;
        names.push(t.name.clone());
    }
    for (name, v) in &o.json {
        let mut v = v.clone();
        if let Value::Object(m) = &mut v {
            m.insert("config_hash".into(), json!(hash));
        }
        fs::write(dir.join(name), serde_json::to_string(&v).expect("json"))?;
        names.push(name.clone());
    }
    Ok(names)
}

fn write_manifest(dir: &Path, sub: &str, cfg: &ExperimentConfig, jobs: usize, pass: bool, artifacts: Vec<String>) -> Result<()> {
    let m = Manifest {
        subcommand: sub.into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION").into(),
        jobs,
        pass,
        artifacts,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&m).expect("json"))?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    Ok(())
}

/// Output directory: explicit flag, then config, then the environment root, then `./qshadow-out`.
pub fn resolve_out(flag: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = &cfg.out_dir {
        return PathBuf::from(p);
    }
    match std::env::var_os(OUT_ENV) {
        Some(root) => PathBuf::from(root).join(&cfg.system.name),
        None => PathBuf::from("qshadow-out").join(&cfg.system.name),
    }
}

/// Runs `sub` and writes artifacts plus manifest into `out`; the bool is the overall verdict.
pub fn run(sub: &str, cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<bool> {
    cfg.validate()?;
    if !SUBCOMMANDS.contains(&sub) {
        return Err(Error::Config { key: "subcommand".into(), msg: format!("unknown subcommand `{sub}`") });
    }
    let outcomes = experiments::run_named(sub, cfg, jobs)?;
    let mut artifacts = Vec::new();
    let mut pass = true;
    let mut summary = serde_json::Map::new();
    for o in &outcomes {
        let dir = if outcomes.len() == 1 { out.to_path_buf() } else { out.join(&o.name) };
        let names = write_outcome(&dir, o, cfg)?;
        if outcomes.len() > 1 {
            write_manifest(&dir, &o.name, cfg, jobs, o.pass, names.clone())?;
            artifacts.extend(names.iter().map(|n| format!("{}/{n}", o.name)));
        } else {
            artifacts.extend(names);
        }
        pass &= o.pass;
        summary.insert(o.name.clone(), json!({ "pass": o.pass, "summary": o.summary }));
    }
    fs::create_dir_all(out)?;
    let s = json!({ "subcommand": sub, "pass": pass, "config_hash": cfg.hash(), "seed": cfg.seed, "results": summary });
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&s).expect("json"))?;
    artifacts.push("summary.json".into());
    write_manifest(out, sub, cfg, jobs, pass, artifacts)?;
    Ok(pass)
}
