//! Persistent tensor store.
//!
//! Layout under the store root: `meta.db` (tables for config, unique tensors
//! and model manifests), `sketches/<digest>.thsk`, and
//! `blobs/aa/bb/<hex>.thdx`, where the blob name is the digest of the blob
//! file itself. A rewritten blob therefore lands at a new path, and the old
//! one is deleted only after the metadata commit that stops referencing it.
//! Files left behind by an interrupted write are swept on open.

mod backend;
mod meta;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use backend::{BlobBackend, FsBackend, MemoryBackend};
pub use meta::{ModelRow, TensorRow};

use crate::codec::{decode_any, encode_with, CodecId, DeltaBlob};
use crate::config::{EngineConfig, RefineCadence};
use crate::error::{Error, Result};
use crate::fingerprint::{sketch_bytes, Sketch, TensorDigest};
use crate::format::{
    parse_model_with_metadata, read_blob, write_blob, write_model_with_metadata, BlobFlags, DType, TensorView,
    BLOB_TENSOR_NAME,
};
use crate::index::Neighbor;
use crate::planner::{Cluster, CompatKey, Member, PlanAction, PlanDelta, PlannerState, Role, SplitOutcome};
use crate::predictor::{CoefficientRecord, PredictorCoefficients};
use meta::{Batch, Meta};

pub const META_FILE: &str = "meta.db";
const CONFIG_KEY: &str = "engine";

/// One tensor of one model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub model_id: String,
    pub tensor_name: String,
    pub tensor_id: TensorDigest,
    /// Key of the retained sketch (`sketches/<digest>.thsk`). Sketches are
    /// shared by every record with the same content.
    pub tensor_sketch: TensorDigest,
    pub dtype: DType,
    pub shape: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobRef {
    pub locator: String,
    pub codec: CodecId,
    pub byte_length: u64,
    pub base: Option<TensorDigest>,
}

fn blob_locator(file: &[u8]) -> String {
    let h = TensorDigest::of(file).to_string();
    format!("blobs/{}/{}/{h}.thdx", &h[..2], &h[2..4])
}

fn sketch_key(d: &TensorDigest) -> String {
    format!("sketches/{d}.thsk")
}

fn coeff_key(codec: CodecId) -> String {
    format!("coefficients.{codec}")
}

/// What happened to one tensor during ingest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorAction {
    Base,
    Delta,
    Dedup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorReport {
    pub name: String,
    pub digest: TensorDigest,
    pub action: TensorAction,
    pub codec: Option<CodecId>,
    pub base: Option<TensorDigest>,
    pub raw_bytes: u64,
    /// Newly written blob bytes (0 for duplicates).
    pub stored_bytes: u64,
    pub predicted_ratio: Option<f64>,
    pub measured_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub model_id: String,
    pub tensors: Vec<TensorReport>,
    pub raw_bytes: u64,
    pub stored_bytes: u64,
    pub plan: PlanDelta,
    pub refine: Option<RefineReport>,
}

impl IngestReport {
    pub fn dedup_count(&self) -> usize {
        self.tensors.iter().filter(|t| t.action == TensorAction::Dedup).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRefine {
    pub cluster: u64,
    pub before: f64,
    pub after: f64,
    pub promotions: usize,
    pub reassigned: usize,
    pub stored_before: u64,
    pub stored_after: u64,
    /// Set when execution failed and the cluster was left untouched.
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    /// Clusters that met the split trigger.
    pub eligible: usize,
    /// Clusters whose split produced a non-empty plan.
    pub clusters: Vec<ClusterRefine>,
}

impl RefineReport {
    pub fn changed(&self) -> bool {
        self.clusters.iter().any(|c| c.error.is_none())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub id: u64,
    pub members: usize,
    pub bases: usize,
    pub predicted_ratio: f64,
    pub raw_bytes: u64,
    pub stored_bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StoreStats {
    pub models: usize,
    pub tensors: usize,
    pub unique_tensors: usize,
    pub dedup_count: usize,
    /// Logical bytes over every record of every model.
    pub raw_bytes: u64,
    pub unique_raw_bytes: u64,
    /// Sum of blob sizes.
    pub stored_bytes: u64,
    /// `1 - stored / raw`.
    pub reduction_ratio: f64,
    /// Sketch files plus digests of unique tensors.
    pub metadata_bytes: u64,
    /// `metadata_bytes / unique_raw_bytes`.
    pub metadata_overhead: f64,
    pub clusters: Vec<ClusterStats>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub tensors_checked: usize,
    pub models_checked: usize,
    pub errors: Vec<String>,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.errors.is_empty()
    }
}

type BaseCache = HashMap<TensorDigest, Arc<Vec<u8>>>;

pub struct Store {
    root: Option<PathBuf>,
    meta: Meta,
    backend: Box<dyn BlobBackend>,
    config: EngineConfig,
    pool: Arc<rayon::ThreadPool>,
    planner: PlannerState,
    tensors: HashMap<TensorDigest, TensorRow>,
    models: BTreeMap<String, ModelRow>,
    models_since_refine: u32,
    blob_reads: AtomicU64,
}

impl Store {
    /// Creates a new store directory.
    pub fn create(root: impl AsRef<Path>, config: &EngineConfig) -> Result<Self> {
        let root = root.as_ref();
        config.validate()?;
        if root.join(META_FILE).exists() {
            return Err(Error::Conflict(format!("store already exists at {}", root.display())));
        }
        std::fs::create_dir_all(root)?;
        let meta = Meta::open(&root.join(META_FILE))?;
        Self::init(Some(root.to_path_buf()), meta, Box::new(FsBackend::new(root)), config)
    }

    /// Opens an existing store with its persisted configuration.
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        Self::open_inner(root.as_ref(), None)
    }

    /// Opens an existing store, taking runtime settings from `config`.
    /// Sketch parameters must match the persisted ones.
    pub fn open_with(root: impl AsRef<Path>, config: &EngineConfig) -> Result<Self> {
        Self::open_inner(root.as_ref(), Some(config))
    }

    fn open_inner(root: &Path, overrides: Option<&EngineConfig>) -> Result<Self> {
        let path = root.join(META_FILE);
        if !path.exists() {
            return Err(Error::NotFound(format!("no store at {}", root.display())));
        }
        let meta = Meta::open(&path)?;
        let backend: Box<dyn BlobBackend> = Box::new(FsBackend::new(root));
        Self::load(Some(root.to_path_buf()), meta, backend, overrides)
    }

    /// The configuration persisted in an existing store, without loading it.
    pub fn read_config(root: impl AsRef<Path>) -> Result<EngineConfig> {
        let root = root.as_ref();
        let path = root.join(META_FILE);
        if !path.exists() {
            return Err(Error::NotFound(format!("no store at {}", root.display())));
        }
        let text = Meta::open(&path)?
            .config(CONFIG_KEY)?
            .ok_or_else(|| Error::Meta("store has no engine config".into()))?;
        let mut c: EngineConfig = serde_json::from_str(&text)?;
        c.store_path = Some(root.to_path_buf());
        Ok(c)
    }

    /// A store held entirely in memory.
    pub fn in_memory(config: &EngineConfig) -> Result<Self> {
        config.validate()?;
        Self::init(None, Meta::in_memory()?, Box::new(MemoryBackend::new()), config)
    }

    /// A new store on a caller-supplied blob backend and database file.
    pub fn with_backend(
        meta_path: impl AsRef<Path>,
        backend: Box<dyn BlobBackend>,
        config: &EngineConfig,
    ) -> Result<Self> {
        config.validate()?;
        let meta = Meta::open(meta_path.as_ref())?;
        if meta.config(CONFIG_KEY)?.is_some() {
            return Self::load(None, meta, backend, Some(config));
        }
        Self::init(None, meta, backend, config)
    }

    fn init(root: Option<PathBuf>, meta: Meta, backend: Box<dyn BlobBackend>, config: &EngineConfig) -> Result<Self> {
        meta.commit(&Batch {
            config: vec![(CONFIG_KEY.into(), serde_json::to_string(config)?)],
            ..Default::default()
        })?;
        Self::load(root, meta, backend, Some(config))
    }

    fn load(
        root: Option<PathBuf>,
        meta: Meta,
        backend: Box<dyn BlobBackend>,
        overrides: Option<&EngineConfig>,
    ) -> Result<Self> {
        let stored: EngineConfig = serde_json::from_str(
            &meta
                .config(CONFIG_KEY)?
                .ok_or_else(|| Error::Meta("store has no engine config".into()))?,
        )?;
        let mut config = match overrides {
            Some(c) => {
                if c.sketch != stored.sketch {
                    return Err(Error::SketchMismatch(format!(
                        "config sketch params {:?} differ from the store's {:?}",
                        c.sketch, stored.sketch
                    )));
                }
                c.clone()
            }
            None => stored,
        };
        config.store_path = root.clone();
        config.validate()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.effective_workers())
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        let coeffs = Self::coefficients_from(&meta, config.codec)?;
        let (tensors, models) = meta.load()?;

        let mut sketches = HashMap::with_capacity(tensors.len());
        for d in tensors.keys() {
            let s = Sketch::from_bytes(&backend.get(&sketch_key(d))?)?;
            sketches.insert(*d, Arc::new(s));
        }
        let mut by_cluster: BTreeMap<u64, (CompatKey, BTreeMap<TensorDigest, Member>)> = BTreeMap::new();
        for (d, row) in &tensors {
            by_cluster
                .entry(row.cluster)
                .or_insert_with(|| (CompatKey::new(row.dtype, row.shape.clone()), BTreeMap::new()))
                .1
                .insert(*d, row.member);
        }
        let clusters = by_cluster
            .into_iter()
            .map(|(id, (compat, members))| Cluster::from_members(id, compat, members))
            .collect::<Result<Vec<_>>>()?;
        let names: Vec<(String, Vec<u64>)> = models
            .values()
            .flat_map(|m| m.records.iter().map(|r| (r.tensor_name.clone(), r.shape.clone())))
            .collect();
        let mut planner = PlannerState::new(config.planner, coeffs, config.sketch, config.index_config());
        planner.restore(clusters, sketches, names)?;

        let store = Store {
            root,
            meta,
            backend,
            config,
            pool: Arc::new(pool),
            planner,
            tensors,
            models,
            models_since_refine: 0,
            blob_reads: AtomicU64::new(0),
        };
        store.sweep()?;
        Ok(store)
    }

    fn coefficients_from(meta: &Meta, codec: CodecId) -> Result<PredictorCoefficients> {
        Ok(match meta.config(&coeff_key(codec))? {
            Some(text) => CoefficientRecord::from_text(&text)?.coeffs,
            None => PredictorCoefficients::default_for(codec),
        })
    }

    /// Deletes blob and sketch files no row references.
    fn sweep(&self) -> Result<usize> {
        let mut live: HashSet<String> = self.tensors.values().map(|r| r.blob.locator.clone()).collect();
        live.extend(self.tensors.keys().map(sketch_key));
        let mut removed = 0;
        for key in self
            .backend
            .list("blobs/")?
            .into_iter()
            .chain(self.backend.list("sketches/")?)
        {
            if !live.contains(&key) {
                self.backend.delete(&key)?;
                removed += 1;
            }
        }
        Ok(removed)
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn planner(&self) -> &PlannerState {
        &self.planner
    }

    pub fn coefficients(&self) -> PredictorCoefficients {
        self.planner.coeffs
    }

    /// Persists a fitted coefficient record; it takes effect for its codec.
    pub fn set_coefficients(&mut self, record: &CoefficientRecord) -> Result<()> {
        self.meta.commit(&Batch {
            config: vec![(coeff_key(record.codec), record.to_text())],
            ..Default::default()
        })?;
        if record.codec == self.config.codec {
            self.planner.coeffs = record.coeffs;
        }
        Ok(())
    }

    pub fn model_ids(&self) -> impl Iterator<Item = &str> {
        self.models.keys().map(String::as_str)
    }

    pub fn model(&self, id: &str) -> Option<&ModelRow> {
        self.models.get(id)
    }

    pub fn tensor(&self, digest: &TensorDigest) -> Option<&TensorRow> {
        self.tensors.get(digest)
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&TensorDigest, &TensorRow)> {
        self.tensors.iter()
    }

    pub fn backend(&self) -> &dyn BlobBackend {
        self.backend.as_ref()
    }

    /// Blob files read since the store was opened.
    pub fn blob_reads(&self) -> u64 {
        self.blob_reads.load(Ordering::Relaxed)
    }

    fn raw_container(raw: &[u8], dtype: DType, shape: &[u64]) -> Result<Vec<u8>> {
        let view = TensorView::new(BLOB_TENSOR_NAME, dtype, shape.to_vec(), raw)?;
        write_blob(&view, &BlobFlags::new(CodecId::Raw, None, dtype, shape.to_vec())?)
    }

    /// Encodes a tensor into a blob file, falling back to `RAW` when the
    /// encoding would not be smaller than the raw bytes.
    fn encode_tensor(
        &self,
        raw: &[u8],
        dtype: DType,
        shape: &[u64],
        base: Option<(TensorDigest, &[u8])>,
    ) -> Result<(Vec<u8>, CodecId, Option<TensorDigest>)> {
        let codec = match base {
            Some(_) => self.config.codec,
            None if self.config.compress_bases || self.config.codec == CodecId::Standalone => CodecId::Standalone,
            None => CodecId::Raw,
        };
        if codec != CodecId::Raw {
            let blob = encode_with(codec, raw, base.map(|b| b.1), dtype, self.config.chunk_elements)?;
            let payload = blob.to_bytes();
            let view = TensorView::new(BLOB_TENSOR_NAME, DType::U8, vec![payload.len() as u64], &payload)?;
            let base_digest = base.map(|b| b.0);
            let file = write_blob(&view, &BlobFlags::new(codec, base_digest, dtype, shape.to_vec())?)?;
            if (file.len() as u64) < raw.len() as u64 {
                return Ok((file, codec, base_digest));
            }
        }
        Ok((Self::raw_container(raw, dtype, shape)?, CodecId::Raw, None))
    }

    /// Writes an encoded blob and returns its reference.
    fn put_blob(&self, file: &[u8], codec: CodecId, base: Option<TensorDigest>) -> Result<BlobRef> {
        let locator = blob_locator(file);
        self.backend.put(&locator, file)?;
        Ok(BlobRef {
            locator,
            codec,
            byte_length: file.len() as u64,
            base,
        })
    }

    /// Decoded bytes of a stored tensor, checked against its digest. Bases
    /// are cached in `cache`.
    fn materialize(&self, digest: &TensorDigest, cache: &mut BaseCache) -> Result<Arc<Vec<u8>>> {
        if let Some(b) = cache.get(digest) {
            return Ok(b.clone());
        }
        let integrity = |m: String| Error::Integrity(format!("tensor {digest}: {m}"));
        let row = self
            .tensors
            .get(digest)
            .ok_or_else(|| integrity("no metadata row".into()))?;
        let file = self
            .backend
            .get(&row.blob.locator)
            .map_err(|e| integrity(e.to_string()))?;
        self.blob_reads.fetch_add(1, Ordering::Relaxed);
        if file.len() as u64 != row.blob.byte_length {
            return Err(integrity(format!(
                "blob is {} bytes, expected {}",
                file.len(),
                row.blob.byte_length
            )));
        }
        let (flags, payload) = read_blob(&file).map_err(|e| integrity(e.to_string()))?;
        if flags.codec != Some(row.blob.codec) || flags.base != row.blob.base {
            return Err(integrity("blob header disagrees with metadata".into()));
        }
        let bytes = match row.blob.codec {
            CodecId::Raw => payload.bytes.to_vec(),
            codec => {
                let blob = DeltaBlob::from_bytes(payload.bytes).map_err(|e| integrity(e.to_string()))?;
                let base = match (codec.is_delta(), row.blob.base) {
                    (true, Some(b)) => {
                        let base_row = self
                            .tensors
                            .get(&b)
                            .ok_or_else(|| integrity(format!("base {b} is missing")))?;
                        if base_row.blob.codec.is_delta() {
                            return Err(integrity(format!("base {b} is itself a delta")));
                        }
                        Some(self.materialize(&b, cache)?)
                    }
                    (false, None) => None,
                    _ => return Err(integrity("base reference does not match codec".into())),
                };
                decode_any(&blob, base.as_ref().map(|b| b.as_slice())).map_err(|e| integrity(e.to_string()))?
            }
        };
        if TensorDigest::of(&bytes) != *digest {
            return Err(integrity("decoded bytes do not match the digest".into()));
        }
        let bytes = Arc::new(bytes);
        if !row.blob.codec.is_delta() {
            cache.insert(*digest, bytes.clone());
        }
        Ok(bytes)
    }

    /// Decoded bytes of one stored tensor.
    pub fn tensor_bytes(&self, digest: &TensorDigest) -> Result<Vec<u8>> {
        let mut cache = BaseCache::new();
        let b = self.pool.install(|| self.materialize(digest, &mut cache))?;
        Ok(Arc::try_unwrap(b).unwrap_or_else(|a| (*a).clone()))
    }

    fn records_for(model_id: &str, views: &[TensorView<'_>], digests: &[TensorDigest]) -> Vec<TensorRecord> {
        views
            .iter()
            .zip(digests)
            .map(|(v, d)| TensorRecord {
                model_id: model_id.to_string(),
                tensor_name: v.name.clone(),
                tensor_id: *d,
                tensor_sketch: *d,
                dtype: v.dtype,
                shape: v.shape.clone(),
            })
            .collect()
    }

    /// Runs Phase I for every tensor on `planner`, sketching new content.
    /// Returns per-tensor plans (empty for duplicates) and new sketches.
    #[allow(clippy::type_complexity)]
    fn plan_records(
        &self,
        planner: &mut PlannerState,
        views: &[TensorView<'_>],
        records: &[TensorRecord],
    ) -> Result<(Vec<PlanDelta>, HashMap<TensorDigest, Arc<Sketch>>)> {
        let mut fresh: Vec<usize> = Vec::new();
        let mut seen = HashSet::new();
        for (i, r) in records.iter().enumerate() {
            if !planner.contains(&r.tensor_id) && seen.insert(r.tensor_id) {
                fresh.push(i);
            }
        }
        let params = self.config.sketch;
        let sketched: Vec<(TensorDigest, Arc<Sketch>)> = fresh
            .iter()
            .map(|&i| {
                Ok((
                    records[i].tensor_id,
                    Arc::new(sketch_bytes(views[i].bytes, views[i].dtype, &params)?),
                ))
            })
            .collect::<Result<_>>()?;
        let sketches: HashMap<_, _> = sketched.into_iter().collect();
        let mut plans = Vec::with_capacity(records.len());
        for r in records {
            let plan = match sketches.get(&r.tensor_id) {
                Some(s) if !planner.contains(&r.tensor_id) => {
                    if self.config.codec == CodecId::Standalone {
                        planner.assign_scored(r, s.clone(), &[])?
                    } else {
                        planner.assign(r, s.clone())?
                    }
                }
                _ => {
                    planner.note_name(&r.tensor_name, &r.shape);
                    PlanDelta::default()
                }
            };
            plans.push(plan);
        }
        Ok((plans, sketches))
    }

    /// The plan an ingest of `bytes` would execute, without writing.
    pub fn plan_model(&self, model_id: &str, bytes: &[u8]) -> Result<PlanDelta> {
        let (views, _) = parse_model_with_metadata(bytes)?;
        let digests = self
            .pool
            .install(|| views.par_iter().map(|v| TensorDigest::of(v.bytes)).collect::<Vec<_>>());
        let records = Self::records_for(model_id, &views, &digests);
        let mut planner = self.planner.clone();
        let (plans, _) = self
            .pool
            .install(|| self.plan_records(&mut planner, &views, &records))?;
        let mut out = PlanDelta::default();
        plans.into_iter().for_each(|p| out.extend(p));
        Ok(out)
    }

    /// Ingests one safetensors file. All-or-nothing: on error no rows are
    /// committed and no new files stay referenced.
    pub fn ingest_model(&mut self, model_id: &str, bytes: &[u8]) -> Result<IngestReport> {
        let pool = self.pool.clone();
        let mut report = pool.install(|| self.ingest_inner(model_id, bytes))?;
        if let RefineCadence::EveryModels(n) = self.config.refine {
            self.models_since_refine += 1;
            if self.models_since_refine >= n {
                self.models_since_refine = 0;
                report.refine = Some(self.refine()?);
            }
        }
        Ok(report)
    }

    /// Ends an ingest batch, refining when the cadence asks for it.
    pub fn end_batch(&mut self) -> Result<Option<RefineReport>> {
        match self.config.refine {
            RefineCadence::Batch => self.refine().map(Some),
            _ => Ok(None),
        }
    }

    fn ingest_inner(&mut self, model_id: &str, bytes: &[u8]) -> Result<IngestReport> {
        let (views, metadata) = parse_model_with_metadata(bytes)?;
        let digests: Vec<TensorDigest> = views.par_iter().map(|v| TensorDigest::of(v.bytes)).collect();
        let records = Self::records_for(model_id, &views, &digests);
        let metadata = (!metadata.is_empty()).then_some(metadata);

        if let Some(existing) = self.models.get(model_id) {
            if existing.records == records && existing.metadata == metadata {
                return Ok(self.duplicate_report(model_id, &records));
            }
            return Err(Error::Conflict(format!(
                "model {model_id:?} already exists with different content"
            )));
        }

        let mut staged = self.planner.clone();
        let (plans, sketches) = self.plan_records(&mut staged, &views, &records)?;

        let mut written: Vec<String> = Vec::new();
        let result = self.execute_ingest(model_id, &views, &records, &plans, &sketches, &staged, &mut written);
        match result {
            Ok((batch, tensor_reports)) => {
                let batch = Batch {
                    models: vec![(
                        model_id.to_string(),
                        ModelRow {
                            metadata,
                            records: records.clone(),
                        },
                    )],
                    ..batch
                };
                if let Err(e) = self.meta.commit(&batch) {
                    self.discard(&written);
                    return Err(e);
                }
                self.planner = staged;
                for (d, row) in batch.tensors {
                    self.tensors.insert(d, row);
                }
                for (id, row) in batch.models {
                    self.models.insert(id, row);
                }
                let mut plan = PlanDelta::default();
                plans.into_iter().for_each(|p| plan.extend(p));
                Ok(IngestReport {
                    model_id: model_id.to_string(),
                    raw_bytes: tensor_reports.iter().map(|t| t.raw_bytes).sum(),
                    stored_bytes: tensor_reports.iter().map(|t| t.stored_bytes).sum(),
                    tensors: tensor_reports,
                    plan,
                    refine: None,
                })
            }
            Err(e) => {
                self.discard(&written);
                Err(e)
            }
        }
    }

    fn discard(&self, keys: &[String]) {
        let live: HashSet<&str> = self.tensors.values().map(|r| r.blob.locator.as_str()).collect();
        for k in keys {
            if !live.contains(k.as_str()) {
                let _ = self.backend.delete(k);
            }
        }
    }

    fn duplicate_report(&self, model_id: &str, records: &[TensorRecord]) -> IngestReport {
        let tensors: Vec<TensorReport> = records
            .iter()
            .map(|r| {
                let row = &self.tensors[&r.tensor_id];
                TensorReport {
                    name: r.tensor_name.clone(),
                    digest: r.tensor_id,
                    action: TensorAction::Dedup,
                    codec: Some(row.blob.codec),
                    base: row.blob.base,
                    raw_bytes: row.raw_len,
                    stored_bytes: 0,
                    predicted_ratio: None,
                    measured_ratio: 1.0,
                }
            })
            .collect();
        IngestReport {
            model_id: model_id.to_string(),
            raw_bytes: tensors.iter().map(|t| t.raw_bytes).sum(),
            stored_bytes: 0,
            tensors,
            plan: PlanDelta::default(),
            refine: None,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn execute_ingest(
        &self,
        model_id: &str,
        views: &[TensorView<'_>],
        records: &[TensorRecord],
        plans: &[PlanDelta],
        sketches: &HashMap<TensorDigest, Arc<Sketch>>,
        staged: &PlannerState,
        written: &mut Vec<String>,
    ) -> Result<(Batch, Vec<TensorReport>)> {
        let _ = model_id;
        let local: HashMap<TensorDigest, usize> = records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.tensor_id, i))
            .rev()
            .collect();
        let mut cache = BaseCache::new();
        let mut batch = Batch::default();
        let mut reports = Vec::with_capacity(records.len());
        for (i, (r, plan)) in records.iter().zip(plans).enumerate() {
            let raw_len = views[i].bytes.len() as u64;
            let Some(action) = plan.actions.first() else {
                let (codec, base) = match self.tensors.get(&r.tensor_id) {
                    Some(row) => (Some(row.blob.codec), row.blob.base),
                    None => batch
                        .tensors
                        .iter()
                        .find(|(d, _)| *d == r.tensor_id)
                        .map_or((None, None), |(_, row)| (Some(row.blob.codec), row.blob.base)),
                };
                reports.push(TensorReport {
                    name: r.tensor_name.clone(),
                    digest: r.tensor_id,
                    action: TensorAction::Dedup,
                    codec,
                    base,
                    raw_bytes: raw_len,
                    stored_bytes: 0,
                    predicted_ratio: None,
                    measured_ratio: 1.0,
                });
                continue;
            };
            let (file, codec, base, predicted, kind) = match action {
                PlanAction::StoreBase { .. } => {
                    let (file, codec, base) = self.encode_tensor(views[i].bytes, r.dtype, &r.shape, None)?;
                    (file, codec, base, None, TensorAction::Base)
                }
                PlanAction::StoreDelta {
                    base, predicted_ratio, ..
                } => {
                    let base_bytes: Arc<Vec<u8>> = match local.get(base) {
                        Some(&j) if !self.tensors.contains_key(base) => Arc::new(views[j].bytes.to_vec()),
                        _ => self.materialize(base, &mut cache)?,
                    };
                    let (file, codec, b) =
                        self.encode_tensor(views[i].bytes, r.dtype, &r.shape, Some((*base, base_bytes.as_slice())))?;
                    (file, codec, b, Some(*predicted_ratio), TensorAction::Delta)
                }
                other => return Err(Error::Integrity(format!("unexpected ingest action {other:?}"))),
            };
            let blob = self.put_blob(&file, codec, base)?;
            written.push(blob.locator.clone());
            let key = sketch_key(&r.tensor_id);
            self.backend.put(&key, &sketches[&r.tensor_id].to_bytes())?;
            written.push(key);

            let cluster = staged
                .cluster_of(&r.tensor_id)
                .ok_or_else(|| Error::Integrity(format!("planner lost {}", r.tensor_id)))?;
            let member = cluster.members[&r.tensor_id];
            reports.push(TensorReport {
                name: r.tensor_name.clone(),
                digest: r.tensor_id,
                action: kind,
                codec: Some(codec),
                base,
                raw_bytes: raw_len,
                stored_bytes: blob.byte_length,
                predicted_ratio: predicted,
                measured_ratio: 1.0 - blob.byte_length as f64 / raw_len.max(1) as f64,
            });
            batch.tensors.push((
                r.tensor_id,
                TensorRow {
                    dtype: r.dtype,
                    shape: r.shape.clone(),
                    raw_len,
                    blob,
                    cluster: cluster.id,
                    member,
                },
            ));
        }
        Ok((batch, reports))
    }

    /// Reconstructs a model file. Tensor payloads are byte-identical to the
    /// ingested ones; the header lists tensors in name order.
    pub fn retrieve_model(&self, model_id: &str) -> Result<Vec<u8>> {
        let row = self
            .models
            .get(model_id)
            .ok_or_else(|| Error::NotFound(format!("model {model_id:?}")))?;
        let mut records: Vec<&TensorRecord> = row.records.iter().collect();
        records.sort_by(|a, b| a.tensor_name.cmp(&b.tensor_name));
        self.pool.install(|| {
            let mut cache = BaseCache::new();
            let mut decoded: HashMap<TensorDigest, Arc<Vec<u8>>> = HashMap::new();
            for r in &records {
                if let std::collections::hash_map::Entry::Vacant(e) = decoded.entry(r.tensor_id) {
                    e.insert(self.materialize(&r.tensor_id, &mut cache)?);
                }
            }
            let views = records
                .iter()
                .map(|r| {
                    TensorView::new(
                        r.tensor_name.clone(),
                        r.dtype,
                        r.shape.clone(),
                        decoded[&r.tensor_id].as_slice(),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            write_model_with_metadata(&views, row.metadata.as_ref())
        })
    }

    /// Up to `k` stored bases of `compat` ranked by estimated distance.
    pub fn query_candidates(&self, sketch: &Sketch, compat: &CompatKey, k: usize) -> Result<Vec<Neighbor>> {
        self.planner.index().query(sketch, compat, k)
    }

    /// Split plans for every eligible cluster, without executing them.
    pub fn plan_refine(&self) -> Vec<SplitOutcome> {
        self.pool.install(|| {
            self.planner
                .split_eligible()
                .into_iter()
                .filter_map(|id| self.planner.plan_split(id))
                .filter(|o| !o.plan.is_empty())
                .collect()
        })
    }

    /// One Phase II pass: splits eligible clusters and rewrites the blobs of
    /// promoted and reassigned members. A cluster whose rewrite fails keeps
    /// its previous state.
    pub fn refine(&mut self) -> Result<RefineReport> {
        let eligible = self.planner.split_eligible().len();
        let outcomes = self.plan_refine();
        let mut report = RefineReport {
            eligible,
            clusters: Vec::new(),
        };
        for outcome in outcomes {
            let pool = self.pool.clone();
            report.clusters.push(pool.install(|| self.apply_split(&outcome))?);
        }
        Ok(report)
    }

    /// Refines until a pass changes nothing or `max_passes` is reached.
    /// Returns the reports of every pass run.
    pub fn refine_to_fixed_point(&mut self, max_passes: usize) -> Result<Vec<RefineReport>> {
        let mut passes = Vec::new();
        for _ in 0..max_passes {
            let r = self.refine()?;
            let changed = r.changed();
            passes.push(r);
            if !changed {
                break;
            }
        }
        Ok(passes)
    }

    fn apply_split(&mut self, outcome: &SplitOutcome) -> Result<ClusterRefine> {
        let id = outcome.cluster.id;
        let touched: BTreeSet<TensorDigest> = outcome.plan.actions.iter().map(PlanAction::digest).collect();
        let stored = |tensors: &HashMap<TensorDigest, TensorRow>| -> u64 {
            outcome
                .cluster
                .members
                .keys()
                .filter_map(|d| tensors.get(d))
                .map(|r| r.blob.byte_length)
                .sum()
        };
        let stored_before = stored(&self.tensors);
        let mut result = ClusterRefine {
            cluster: id,
            before: outcome.before,
            after: outcome.after,
            promotions: outcome.promotions,
            reassigned: outcome
                .plan
                .actions
                .iter()
                .filter(|a| matches!(a, PlanAction::Reassign { .. }))
                .count(),
            stored_before,
            stored_after: stored_before,
            error: None,
        };

        let mut written = Vec::new();
        let rows = self.rewrite_members(outcome, &touched, &mut written);
        let rows = match rows {
            Ok(rows) => rows,
            Err(e) => {
                self.discard(&written);
                result.error = Some(e.to_string());
                return Ok(result);
            }
        };
        if let Err(e) = self.meta.commit(&Batch {
            tensors: rows.clone(),
            ..Default::default()
        }) {
            self.discard(&written);
            result.error = Some(e.to_string());
            return Ok(result);
        }
        let old: Vec<String> = rows
            .iter()
            .filter_map(|(d, _)| self.tensors.get(d).map(|r| r.blob.locator.clone()))
            .collect();
        for (d, row) in rows {
            self.tensors.insert(d, row);
        }
        self.planner.commit_split(outcome)?;
        let live: HashSet<&str> = self.tensors.values().map(|r| r.blob.locator.as_str()).collect();
        for key in old.iter().filter(|k| !live.contains(k.as_str())) {
            self.backend.delete(key)?;
        }
        result.stored_after = stored(&self.tensors);
        Ok(result)
    }

    fn rewrite_members(
        &self,
        outcome: &SplitOutcome,
        touched: &BTreeSet<TensorDigest>,
        written: &mut Vec<String>,
    ) -> Result<Vec<(TensorDigest, TensorRow)>> {
        let mut cache = BaseCache::new();
        let mut raw: HashMap<TensorDigest, Arc<Vec<u8>>> = HashMap::new();
        let mut rows = Vec::new();
        // Promotions first so reassigned members can use the new bases.
        let mut order: Vec<&TensorDigest> = touched.iter().collect();
        order.sort_by_key(|d| outcome.cluster.members[d].role != Role::Base);
        for d in order {
            let member = outcome.cluster.members[d];
            let old = self
                .tensors
                .get(d)
                .ok_or_else(|| Error::Integrity(format!("no row for {d}")))?;
            let bytes = match raw.get(d) {
                Some(b) => b.clone(),
                None => self.materialize(d, &mut cache)?,
            };
            let (file, codec, base) = match member.role {
                Role::Base => self.encode_tensor(&bytes, old.dtype, &old.shape, None)?,
                Role::Delta { base, .. } => {
                    let base_bytes = match raw.get(&base) {
                        Some(b) => b.clone(),
                        None => self.materialize(&base, &mut cache)?,
                    };
                    self.encode_tensor(&bytes, old.dtype, &old.shape, Some((base, base_bytes.as_slice())))?
                }
            };
            if member.role == Role::Base {
                raw.insert(*d, bytes);
            }
            let blob = self.put_blob(&file, codec, base)?;
            written.push(blob.locator.clone());
            rows.push((
                *d,
                TensorRow {
                    blob,
                    member,
                    ..old.clone()
                },
            ));
        }
        Ok(rows)
    }

    pub fn stats(&self) -> Result<StoreStats> {
        let mut s = StoreStats {
            models: self.models.len(),
            unique_tensors: self.tensors.len(),
            ..Default::default()
        };
        for m in self.models.values() {
            s.tensors += m.records.len();
            s.raw_bytes += m
                .records
                .iter()
                .map(|r| r.shape.iter().product::<u64>() * r.dtype.size() as u64)
                .sum::<u64>();
        }
        s.dedup_count = s.tensors - s.unique_tensors;
        s.unique_raw_bytes = self.tensors.values().map(|r| r.raw_len).sum();
        s.stored_bytes = self.tensors.values().map(|r| r.blob.byte_length).sum();
        if s.raw_bytes > 0 {
            s.reduction_ratio = 1.0 - s.stored_bytes as f64 / s.raw_bytes as f64;
        }
        let per_tensor = self
            .planner
            .sketches()
            .values()
            .next()
            .map_or(0, |sk| sk.serialized_len() as u64)
            + 16;
        s.metadata_bytes = per_tensor * s.unique_tensors as u64;
        if s.unique_raw_bytes > 0 {
            s.metadata_overhead = s.metadata_bytes as f64 / s.unique_raw_bytes as f64;
        }
        s.clusters = self
            .planner
            .clusters()
            .map(|c| ClusterStats {
                id: c.id,
                members: c.len(),
                bases: c.bases().len(),
                predicted_ratio: c.reduction_ratio(),
                raw_bytes: c.total_bytes(),
                stored_bytes: c
                    .members
                    .keys()
                    .filter_map(|d| self.tensors.get(d))
                    .map(|r| r.blob.byte_length)
                    .sum(),
            })
            .collect();
        Ok(s)
    }

    /// Decodes every tensor and checks digests, blob sizes and base links.
    pub fn verify(&self) -> VerifyReport {
        let mut report = VerifyReport {
            models_checked: self.models.len(),
            ..Default::default()
        };
        let mut digests: Vec<&TensorDigest> = self.tensors.keys().collect();
        digests.sort();
        self.pool.install(|| {
            let mut cache = BaseCache::new();
            for d in digests {
                let row = &self.tensors[d];
                report.tensors_checked += 1;
                match self.backend.size(&row.blob.locator) {
                    Ok(n) if n == row.blob.byte_length => {}
                    Ok(n) => report.errors.push(format!(
                        "{d}: blob is {n} bytes, metadata says {}",
                        row.blob.byte_length
                    )),
                    Err(e) => report.errors.push(format!("{d}: {e}")),
                }
                if let Role::Delta { base, .. } = row.member.role {
                    match self.tensors.get(&base) {
                        Some(b) if b.member.role == Role::Base => {}
                        _ => report
                            .errors
                            .push(format!("{d}: planner base {base} is not a stored base")),
                    }
                }
                if let Err(e) = self.materialize(d, &mut cache) {
                    report.errors.push(e.to_string());
                }
                if cache.len() > 64 {
                    cache.clear();
                }
            }
        });
        for (id, m) in &self.models {
            for r in &m.records {
                if !self.tensors.contains_key(&r.tensor_id) {
                    report
                        .errors
                        .push(format!("model {id}: tensor {} has no row", r.tensor_name));
                }
            }
        }
        report
    }
}
