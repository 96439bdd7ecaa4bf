//! Candidate-base lookup over sketches, partitioned by [`CompatKey`].
//!
//! Each partition keeps the flattened sketch vectors of its bases. Lookups
//! either scan the partition or walk an [`Hnsw`] graph for a shortlist; in
//! both cases the shortlist is re-scored with [`hamming_estimate`] and the
//! final order comes from that estimate.

mod hnsw;

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use hnsw::{squared_l2, Hnsw, HnswParams};

use crate::error::Result;
use crate::fingerprint::{hamming_estimate, Sketch, TensorDigest};
use crate::planner::CompatKey;

/// Partitions at or above this size switch to the graph in `Auto` mode.
pub const DEFAULT_GRAPH_THRESHOLD: usize = 5000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexMode {
    Linear,
    Graph,
    /// Linear scan until a partition holds `graph_threshold` entries.
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndexConfig {
    pub mode: IndexMode,
    pub graph_threshold: usize,
    pub hnsw: HnswParams,
    /// Graph shortlist size is `k * oversample` before re-scoring.
    pub oversample: usize,
}

impl Default for IndexConfig {
    fn default() -> Self {
        IndexConfig {
            mode: IndexMode::Auto,
            graph_threshold: DEFAULT_GRAPH_THRESHOLD,
            hnsw: HnswParams::default(),
            oversample: 2,
        }
    }
}

/// A ranked candidate: estimated number of differing bits to the query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub digest: TensorDigest,
    pub hamming: f64,
}

#[derive(Clone)]
struct Partition {
    ids: Vec<TensorDigest>,
    sketches: Vec<Arc<Sketch>>,
    graph: Option<Hnsw>,
}

#[derive(Clone)]
pub struct SketchIndex {
    config: IndexConfig,
    partitions: HashMap<CompatKey, Partition>,
}

impl SketchIndex {
    pub fn new(config: IndexConfig) -> Self {
        SketchIndex {
            config,
            partitions: HashMap::new(),
        }
    }

    pub fn config(&self) -> &IndexConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.partitions.values().map(|p| p.ids.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn partition_len(&self, compat: &CompatKey) -> usize {
        self.partitions.get(compat).map_or(0, |p| p.ids.len())
    }

    fn wants_graph(&self, len: usize) -> bool {
        match self.config.mode {
            IndexMode::Linear => false,
            IndexMode::Graph => true,
            IndexMode::Auto => len >= self.config.graph_threshold,
        }
    }

    pub fn insert(&mut self, compat: &CompatKey, digest: TensorDigest, sketch: Arc<Sketch>) {
        let hnsw = self.config.hnsw;
        let part = self.partitions.entry(compat.clone()).or_insert_with(|| Partition {
            ids: Vec::new(),
            sketches: Vec::new(),
            graph: None,
        });
        part.ids.push(digest);
        part.sketches.push(sketch);
        let len = part.ids.len();
        let want = match self.config.mode {
            IndexMode::Linear => false,
            IndexMode::Graph => true,
            IndexMode::Auto => len >= self.config.graph_threshold,
        };
        match (&mut part.graph, want) {
            (Some(g), _) => {
                g.insert(part.sketches[len - 1].flat_vector().into());
            }
            (None, true) => {
                let mut g = Hnsw::new(hnsw);
                for s in &part.sketches {
                    g.insert(s.flat_vector().into());
                }
                part.graph = Some(g);
            }
            (None, false) => {}
        }
    }

    /// Up to `k` entries of `compat` ranked by estimated Hamming distance to
    /// `query` (ties by smaller digest). Uses the graph when one is built.
    pub fn query(&self, query: &Sketch, compat: &CompatKey, k: usize) -> Result<Vec<Neighbor>> {
        let Some(part) = self.partitions.get(compat) else {
            return Ok(Vec::new());
        };
        match &part.graph {
            Some(g) if self.wants_graph(part.ids.len()) => {
                let shortlist = g.search(&query.flat_vector(), k.saturating_mul(self.config.oversample).max(k));
                let picked: Vec<usize> = shortlist.into_iter().map(|(id, _)| id as usize).collect();
                rank(part, query, picked, k)
            }
            _ => self.query_linear_part(part, query, k),
        }
    }

    /// Exhaustive top-`k` under the estimator.
    pub fn query_linear(&self, query: &Sketch, compat: &CompatKey, k: usize) -> Result<Vec<Neighbor>> {
        match self.partitions.get(compat) {
            Some(part) => self.query_linear_part(part, query, k),
            None => Ok(Vec::new()),
        }
    }

    fn query_linear_part(&self, part: &Partition, query: &Sketch, k: usize) -> Result<Vec<Neighbor>> {
        rank(part, query, (0..part.ids.len()).collect(), k)
    }
}

fn rank(part: &Partition, query: &Sketch, picked: Vec<usize>, k: usize) -> Result<Vec<Neighbor>> {
    let mut out = picked
        .into_iter()
        .map(|i| {
            Ok(Neighbor {
                digest: part.ids[i],
                hamming: hamming_estimate(query, &part.sketches[i])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| a.hamming.total_cmp(&b.hamming).then(a.digest.cmp(&b.digest)));
    out.truncate(k);
    Ok(out)
}
