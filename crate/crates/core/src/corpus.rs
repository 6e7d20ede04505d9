//! JSONL corpus files (optionally gzip-compressed) and their manifest.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datagen::{CorpusConfig, CorpusStats, Generator, SystemRecord};
use crate::exprtree::{BinaryOp, OdeSystem, Symbol, UnaryOp};
use crate::integrate::Trajectory;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// On-disk form of a [`SystemRecord`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordLine {
    pub id: u64,
    pub dim: usize,
    pub generator: Generator,
    pub seed: u64,
    pub sigma: f64,
    /// One prefix string per equation; constants are decimal literals.
    pub expressions: Vec<String>,
    pub times: Vec<f64>,
    /// `[instance][time][component]`
    pub states: Vec<Vec<Vec<f64>>>,
}

fn symbol_text(s: &Symbol) -> String {
    match s {
        Symbol::Unary(op) => op.name().to_string(),
        Symbol::Binary(op) => op.name().to_string(),
        Symbol::Var(i) => format!("x{i}"),
        Symbol::Const(c) => format!("{c:?}"),
        Symbol::Sep => "SEP".to_string(),
    }
}

fn parse_symbol(tok: &str) -> Option<Symbol> {
    if let Some(op) = UnaryOp::ALL.iter().find(|o| o.name() == tok) {
        return Some(Symbol::Unary(*op));
    }
    match tok {
        "add" => return Some(Symbol::Binary(BinaryOp::Add)),
        "mul" => return Some(Symbol::Binary(BinaryOp::Mul)),
        "SEP" => return Some(Symbol::Sep),
        _ => {}
    }
    if let Some(i) = tok.strip_prefix('x').and_then(|r| r.parse::<usize>().ok()) {
        return Some(Symbol::Var(i));
    }
    tok.parse::<f64>().ok().filter(|v| v.is_finite()).map(Symbol::Const)
}

/// Prefix strings, one per equation.
pub fn system_to_strings(system: &OdeSystem) -> Vec<String> {
    let prefix = system.to_prefix();
    prefix
        .split(|s| matches!(s, Symbol::Sep))
        .map(|seg| seg.iter().map(symbol_text).collect::<Vec<_>>().join(" "))
        .collect()
}

pub fn system_from_strings(exprs: &[String]) -> Result<OdeSystem, String> {
    let mut symbols = Vec::new();
    for (i, e) in exprs.iter().enumerate() {
        if i > 0 {
            symbols.push(Symbol::Sep);
        }
        for tok in e.split_whitespace() {
            symbols.push(parse_symbol(tok).ok_or_else(|| format!("unknown token {tok:?}"))?);
        }
    }
    OdeSystem::parse_prefix(&symbols, exprs.len()).map_err(|e| e.to_string())
}

impl RecordLine {
    pub fn from_record(r: &SystemRecord) -> Self {
        Self {
            id: r.id,
            dim: r.dim(),
            generator: r.generator,
            seed: r.seed,
            sigma: r.sigma,
            expressions: system_to_strings(&r.system),
            times: r.grid().to_vec(),
            states: r.instances.iter().map(|t| t.rows().map(|row| row.to_vec()).collect()).collect(),
        }
    }

    pub fn into_record(self) -> Result<SystemRecord, String> {
        let system = system_from_strings(&self.expressions)?;
        if system.dim() != self.dim {
            return Err(format!("dim {} but {} equations", self.dim, system.dim()));
        }
        if self.states.is_empty() {
            return Err("record without instances".into());
        }
        let instances = self
            .states
            .into_iter()
            .map(|rows| {
                if rows.iter().any(|r| r.len() != self.dim) {
                    return Err("state row of wrong width".to_string());
                }
                Trajectory::new(self.times.clone(), rows.concat(), self.dim).map_err(|e| e.to_string())
            })
            .collect::<Result<_, _>>()?;
        Ok(SystemRecord { id: self.id, system, instances, sigma: self.sigma, generator: self.generator, seed: self.seed })
    }
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

/// Opens a file for line reading; gzip input is detected by its magic bytes.
pub fn open_reader(path: &Path) -> io::Result<Box<dyn BufRead>> {
    let mut f = File::open(path)?;
    let mut magic = [0u8; 2];
    let n = f.read(&mut magic)?;
    drop(f);
    let f = File::open(path)?;
    if n == 2 && magic == [0x1f, 0x8b] {
        Ok(Box::new(BufReader::new(MultiGzDecoder::new(f))))
    } else {
        Ok(Box::new(BufReader::new(f)))
    }
}

/// Creates a writer, gzip-compressing when the path ends in `.gz`.
pub fn create_writer(path: &Path) -> io::Result<Box<dyn Write>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let f = BufWriter::new(File::create(path)?);
    if is_gz(path) {
        Ok(Box::new(GzEncoder::new(f, Compression::default())))
    } else {
        Ok(Box::new(f))
    }
}

pub fn write_records(w: &mut dyn Write, records: &[SystemRecord]) -> Result<(), CorpusError> {
    for r in records {
        serde_json::to_writer(&mut *w, &RecordLine::from_record(r))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_corpus(path: &Path, records: &[SystemRecord]) -> Result<(), CorpusError> {
    let mut w = create_writer(path)?;
    write_records(&mut w, records)
}

pub fn read_records(r: impl BufRead) -> Result<Vec<SystemRecord>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fmt = |msg: String| CorpusError::Format { line: i + 1, msg };
        let rec: RecordLine = serde_json::from_str(&line).map_err(|e| fmt(e.to_string()))?;
        out.push(rec.into_record().map_err(fmt)?);
    }
    Ok(out)
}

pub fn load_corpus(path: &Path) -> Result<Vec<SystemRecord>, CorpusError> {
    read_records(open_reader(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub records: usize,
    pub seed: u64,
    pub generator: Generator,
    pub sigma: f64,
    pub rejected: usize,
    pub rejection_rate: f64,
    /// `[dim-1][instances-1]` counts.
    pub buckets: Vec<Vec<usize>>,
    pub config_sha256: String,
    pub config: CorpusConfig,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn config_hash(cfg: &CorpusConfig) -> String {
    sha256_hex(&serde_json::to_vec(cfg).expect("config serializes"))
}

/// Provenance record written next to checkpoints, predictions and results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactManifest {
    pub artifact: String,
    pub version: String,
    pub seed: Option<u64>,
    pub config_sha256: String,
    pub config: serde_json::Value,
    /// `(path, sha256)` of every input file.
    pub inputs: Vec<(String, String)>,
}

impl ArtifactManifest {
    pub fn new(artifact: &str, seed: Option<u64>, config: serde_json::Value, inputs: &[&Path]) -> io::Result<Self> {
        let inputs = inputs
            .iter()
            .map(|p| Ok((p.display().to_string(), sha256_hex(&std::fs::read(p)?))))
            .collect::<io::Result<Vec<_>>>()?;
        Ok(Self {
            artifact: artifact.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config_sha256: sha256_hex(&serde_json::to_vec(&config).expect("json value serializes")),
            config,
            inputs,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// `<path>.manifest.json`.
pub fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    s.into()
}

impl Manifest {
    pub fn new(cfg: &CorpusConfig, stats: &CorpusStats) -> Self {
        Self {
            records: stats.records,
            seed: cfg.seed,
            generator: cfg.generator,
            sigma: cfg.sigma,
            rejected: stats.rejected,
            rejection_rate: stats.rejection_rate(),
            buckets: stats.buckets.iter().map(|r| r.to_vec()).collect(),
            config_sha256: config_hash(cfg),
            config: cfg.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let mut w = create_writer(path)?;
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}
