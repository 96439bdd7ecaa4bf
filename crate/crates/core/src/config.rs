//! Engine configuration.
//!
//! Files are flat `key = value` TOML:
//!
//! ```toml
//! codec = "fmpp"
//! sketch_width = 1024
//! theta_min = 0.05
//! refine = "every:10"
//! ```
//!
//! Every key is optional; missing keys keep their defaults.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codec::{CodecId, DEFAULT_CHUNK_ELEMENTS};
use crate::error::{Error, Result};
use crate::fingerprint::SketchParams;
use crate::index::{HnswParams, IndexConfig, IndexMode, DEFAULT_GRAPH_THRESHOLD};
use crate::planner::PlannerParams;

/// When Phase II runs during ingest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RefineCadence {
    /// After every ingest batch.
    #[default]
    Batch,
    /// After every `n` ingested models.
    EveryModels(u32),
    Never,
}

impl fmt::Display for RefineCadence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RefineCadence::Batch => f.write_str("batch"),
            RefineCadence::EveryModels(n) => write!(f, "every:{n}"),
            RefineCadence::Never => f.write_str("never"),
        }
    }
}

impl FromStr for RefineCadence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(RefineCadence::Batch),
            "never" => Ok(RefineCadence::Never),
            _ => s
                .strip_prefix("every:")
                .and_then(|n| n.parse().ok())
                .filter(|&n| n > 0)
                .map(RefineCadence::EveryModels)
                .ok_or_else(|| Error::Config(format!("refine cadence {s:?}: use batch, never or every:N"))),
        }
    }
}

impl Serialize for RefineCadence {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RefineCadence {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    /// Not persisted; resolved by the caller.
    #[serde(skip)]
    pub store_path: Option<PathBuf>,
    /// Delta codec, or `standalone` to store every tensor without a base.
    pub codec: CodecId,
    pub sketch: SketchParams,
    pub planner: PlannerParams,
    pub refine: RefineCadence,
    /// 0 means all available cores.
    pub workers: usize,
    pub chunk_elements: u32,
    /// Byte-plane compress bases instead of storing them raw.
    pub compress_bases: bool,
    pub index_mode: IndexMode,
    pub index_threshold: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            store_path: None,
            codec: CodecId::Fmpp,
            sketch: SketchParams::default(),
            planner: PlannerParams::default(),
            refine: RefineCadence::default(),
            workers: 0,
            chunk_elements: DEFAULT_CHUNK_ELEMENTS,
            compress_bases: true,
            index_mode: IndexMode::Auto,
            index_threshold: DEFAULT_GRAPH_THRESHOLD,
        }
    }
}

/// The on-disk key set.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    store: Option<PathBuf>,
    codec: Option<String>,
    sketch_depth: Option<u8>,
    sketch_width: Option<u32>,
    sketch_seed: Option<u64>,
    theta_min: Option<f64>,
    delta: Option<f64>,
    split_min_members: Option<usize>,
    split_trigger_ratio: Option<f64>,
    candidates: Option<usize>,
    refine: Option<String>,
    workers: Option<usize>,
    chunk_elements: Option<u32>,
    compress_bases: Option<bool>,
    index: Option<IndexMode>,
    index_threshold: Option<usize>,
}

impl EngineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let f: ConfigFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut c = EngineConfig {
            store_path: f.store,
            ..Default::default()
        };
        if let Some(codec) = f.codec {
            c.codec = codec.parse()?;
        }
        c.sketch = SketchParams::new(
            f.sketch_depth.unwrap_or(c.sketch.depth),
            f.sketch_width.unwrap_or(c.sketch.width),
            f.sketch_seed.unwrap_or(c.sketch.seed),
        )?;
        let p = &mut c.planner;
        p.theta_min = f.theta_min.unwrap_or(p.theta_min);
        p.delta = f.delta.unwrap_or(p.delta);
        p.split_min_members = f.split_min_members.unwrap_or(p.split_min_members);
        p.split_trigger_ratio = f.split_trigger_ratio.unwrap_or(p.split_trigger_ratio);
        p.candidates = f.candidates.unwrap_or(p.candidates);
        if let Some(r) = f.refine {
            c.refine = r.parse()?;
        }
        c.workers = f.workers.unwrap_or(c.workers);
        c.chunk_elements = f.chunk_elements.unwrap_or(c.chunk_elements);
        c.compress_bases = f.compress_bases.unwrap_or(c.compress_bases);
        c.index_mode = f.index.unwrap_or(c.index_mode);
        c.index_threshold = f.index_threshold.unwrap_or(c.index_threshold);
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.sketch.validate()?;
        self.planner.validate()?;
        if self.codec == CodecId::Raw {
            return Err(Error::Config("codec must be tensorx, fmpp or standalone".into()));
        }
        if self.chunk_elements == 0 {
            return Err(Error::Config("chunk_elements must be positive".into()));
        }
        Ok(())
    }

    pub fn index_config(&self) -> IndexConfig {
        IndexConfig {
            mode: self.index_mode,
            graph_threshold: self.index_threshold,
            hnsw: HnswParams::default(),
            ..IndexConfig::default()
        }
    }

    pub fn effective_workers(&self) -> usize {
        if self.workers == 0 {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        } else {
            self.workers
        }
    }
}
