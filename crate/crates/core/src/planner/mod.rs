//! Base/delta clustering.
//!
//! Arriving tensors are assigned greedily to the base with the best predicted
//! reduction ratio ([`PlannerState::assign`]). Clusters that grow large and
//! inefficient are revisited by [`split`], which promotes members to extra
//! bases while that raises the cluster ratio. [`exact_plan`] enumerates base
//! sets for small instances and serves as an oracle.

mod cluster;
mod exact;
mod split;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use cluster::{cluster_reduction_ratio, Cluster, Member, Role};
pub use exact::{exact_plan, exact_plan_sizes, ExactPlan, MAX_EXACT_TENSORS};
pub use split::{split, split_with, SplitOutcome};

use crate::error::{Error, Result};
use crate::fingerprint::{hamming_estimate, Sketch, SketchParams, TensorDigest};
use crate::format::DType;
use crate::index::{IndexConfig, SketchIndex};
use crate::predictor::{predict_ratio, PredictorCoefficients};
use crate::store::TensorRecord;

/// Two tensors are delta-comparable iff their keys are equal.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CompatKey {
    pub dtype: DType,
    pub shape: Vec<u64>,
}

impl CompatKey {
    pub fn new(dtype: DType, shape: Vec<u64>) -> Self {
        CompatKey { dtype, shape }
    }

    pub fn element_count(&self) -> u64 {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> u64 {
        self.element_count() * self.dtype.size() as u64
    }
}

impl From<&TensorRecord> for CompatKey {
    fn from(r: &TensorRecord) -> Self {
        CompatKey::new(r.dtype, r.shape.clone())
    }
}

/// One planner decision, serialized as a tagged JSON object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum PlanAction {
    StoreBase {
        digest: TensorDigest,
    },
    StoreDelta {
        digest: TensorDigest,
        base: TensorDigest,
        predicted_ratio: f64,
    },
    PromoteToBase {
        digest: TensorDigest,
    },
    Reassign {
        digest: TensorDigest,
        new_base: TensorDigest,
        predicted_ratio: f64,
    },
}

impl PlanAction {
    pub fn digest(&self) -> TensorDigest {
        match self {
            PlanAction::StoreBase { digest }
            | PlanAction::StoreDelta { digest, .. }
            | PlanAction::PromoteToBase { digest }
            | PlanAction::Reassign { digest, .. } => *digest,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanDelta {
    pub actions: Vec<PlanAction>,
}

impl PlanDelta {
    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn extend(&mut self, other: PlanDelta) {
        self.actions.extend(other.actions);
    }

    /// One JSON object per line.
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for a in &self.actions {
            out.push_str(&serde_json::to_string(a).expect("plan actions serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_ndjson(text: &str) -> Result<Self> {
        let actions = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(PlanDelta { actions })
    }

    /// Checks that every delta's base is materialized (already in
    /// `is_base`, or stored/promoted earlier in this plan) before use.
    pub fn check_order(&self, is_base: impl Fn(&TensorDigest) -> bool) -> Result<()> {
        let mut made = HashSet::new();
        for a in &self.actions {
            match a {
                PlanAction::StoreBase { digest } | PlanAction::PromoteToBase { digest } => {
                    made.insert(*digest);
                }
                PlanAction::StoreDelta { base, .. } | PlanAction::Reassign { new_base: base, .. } => {
                    if !made.contains(base) && !is_base(base) {
                        return Err(Error::Integrity(format!("plan uses base {base} before it exists")));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerParams {
    /// Minimum predicted ratio for storing a delta.
    pub theta_min: f64,
    /// Split candidates sit this far below the mean member ratio.
    pub delta: f64,
    /// Clusters need at least this many members to be split.
    pub split_min_members: usize,
    /// ... and a ratio below this.
    pub split_trigger_ratio: f64,
    /// Candidate bases fetched from the index per arriving tensor.
    pub candidates: usize,
}

impl Default for PlannerParams {
    fn default() -> Self {
        PlannerParams {
            theta_min: 0.05,
            delta: 0.1,
            split_min_members: 8,
            split_trigger_ratio: 0.6,
            candidates: 8,
        }
    }
}

impl PlannerParams {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.theta_min) || !unit(self.delta) || !unit(self.split_trigger_ratio) {
            return Err(Error::Config("planner ratios must lie in [0, 1]".into()));
        }
        if self.candidates == 0 {
            return Err(Error::Config("candidates must be at least 1".into()));
        }
        Ok(())
    }

    pub fn triggers_split(&self, cluster: &Cluster) -> bool {
        cluster.len() >= self.split_min_members && cluster.reduction_ratio() < self.split_trigger_ratio
    }
}

/// A scored candidate base for an arriving tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub base: TensorDigest,
    pub hamming: f64,
    pub ratio: f64,
}

/// Highest ratio, then smaller estimated Hamming, then smaller digest.
pub fn best_candidate(candidates: &[Candidate]) -> Option<Candidate> {
    candidates.iter().copied().min_by(|a, b| {
        b.ratio
            .total_cmp(&a.ratio)
            .then(a.hamming.total_cmp(&b.hamming))
            .then(a.base.cmp(&b.base))
    })
}

/// Predicted pairwise ratios `R(target, base)`.
pub trait PairScorer {
    fn ratio(&self, target: &TensorDigest, base: &TensorDigest) -> f64;
}

/// Scores pairs from retained sketches and a coefficient set.
pub struct SketchScorer<'a> {
    pub sketches: &'a HashMap<TensorDigest, Arc<Sketch>>,
    pub coeffs: PredictorCoefficients,
}

impl PairScorer for SketchScorer<'_> {
    fn ratio(&self, target: &TensorDigest, base: &TensorDigest) -> f64 {
        let (Some(t), Some(b)) = (self.sketches.get(target), self.sketches.get(base)) else {
            return 0.0;
        };
        match hamming_estimate(t, b) {
            Ok(h) => predict_ratio(h / (t.p as f64 * t.n as f64).max(1.0), &self.coeffs),
            Err(_) => 0.0,
        }
    }
}

/// Fixed ratio table; missing pairs score 0.
#[derive(Debug, Clone, Default)]
pub struct TableScorer(pub HashMap<(TensorDigest, TensorDigest), f64>);

impl PairScorer for TableScorer {
    fn ratio(&self, target: &TensorDigest, base: &TensorDigest) -> f64 {
        self.0.get(&(*target, *base)).copied().unwrap_or(0.0)
    }
}

/// Where a unique tensor lives in the clustering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    pub cluster: u64,
}

/// Planner state: clusters, retained sketches, seen names and the index of
/// bases. Single writer; clone for a staging copy.
#[derive(Clone)]
pub struct PlannerState {
    pub params: PlannerParams,
    pub coeffs: PredictorCoefficients,
    pub sketch_params: SketchParams,
    clusters: BTreeMap<u64, Cluster>,
    placement: HashMap<TensorDigest, Placement>,
    sketches: HashMap<TensorDigest, Arc<Sketch>>,
    names: HashSet<(String, Vec<u64>)>,
    index: SketchIndex,
    next_cluster: u64,
}

impl PlannerState {
    pub fn new(
        params: PlannerParams,
        coeffs: PredictorCoefficients,
        sketch_params: SketchParams,
        index: IndexConfig,
    ) -> Self {
        PlannerState {
            params,
            coeffs,
            sketch_params,
            clusters: BTreeMap::new(),
            placement: HashMap::new(),
            sketches: HashMap::new(),
            names: HashSet::new(),
            index: SketchIndex::new(index),
            next_cluster: 0,
        }
    }

    pub fn clusters(&self) -> impl Iterator<Item = &Cluster> {
        self.clusters.values()
    }

    pub fn cluster(&self, id: u64) -> Option<&Cluster> {
        self.clusters.get(&id)
    }

    pub fn cluster_of(&self, digest: &TensorDigest) -> Option<&Cluster> {
        self.placement.get(digest).and_then(|p| self.clusters.get(&p.cluster))
    }

    pub fn member(&self, digest: &TensorDigest) -> Option<&Member> {
        self.cluster_of(digest).and_then(|c| c.members.get(digest))
    }

    pub fn contains(&self, digest: &TensorDigest) -> bool {
        self.placement.contains_key(digest)
    }

    pub fn sketch(&self, digest: &TensorDigest) -> Option<&Arc<Sketch>> {
        self.sketches.get(digest)
    }

    pub fn sketches(&self) -> &HashMap<TensorDigest, Arc<Sketch>> {
        &self.sketches
    }

    pub fn index(&self) -> &SketchIndex {
        &self.index
    }

    pub fn unique_tensors(&self) -> usize {
        self.placement.len()
    }

    pub fn scorer(&self) -> SketchScorer<'_> {
        SketchScorer {
            sketches: &self.sketches,
            coeffs: self.coeffs,
        }
    }

    /// Remembers a (name, shape) pair without planning anything.
    pub fn note_name(&mut self, name: &str, shape: &[u64]) {
        self.names.insert((name.to_string(), shape.to_vec()));
    }

    fn check_sketch(&self, sketch: &Sketch) -> Result<()> {
        if sketch.params != self.sketch_params {
            return Err(Error::SketchMismatch(format!(
                "sketch params {:?} differ from store params {:?}",
                sketch.params, self.sketch_params
            )));
        }
        Ok(())
    }

    /// Candidate bases for `sketch` within `compat`, scored with the
    /// predictor.
    pub fn candidates(&self, sketch: &Sketch, compat: &CompatKey) -> Result<Vec<Candidate>> {
        let bits = (sketch.p as f64 * sketch.n as f64).max(1.0);
        Ok(self
            .index
            .query(sketch, compat, self.params.candidates)?
            .into_iter()
            .map(|n| Candidate {
                base: n.digest,
                hamming: n.hamming,
                ratio: predict_ratio(n.hamming / bits, &self.coeffs),
            })
            .collect())
    }

    /// Phase I: place one arriving tensor.
    pub fn assign(&mut self, record: &TensorRecord, sketch: Arc<Sketch>) -> Result<PlanDelta> {
        self.check_sketch(&sketch)?;
        if self.contains(&record.tensor_id) {
            self.note_name(&record.tensor_name, &record.shape);
            return Ok(PlanDelta::default());
        }
        let compat = CompatKey::from(record);
        let candidates = self.candidates(&sketch, &compat)?;
        self.assign_scored(record, sketch, &candidates)
    }

    /// Phase I with externally scored candidates.
    pub fn assign_scored(
        &mut self,
        record: &TensorRecord,
        sketch: Arc<Sketch>,
        candidates: &[Candidate],
    ) -> Result<PlanDelta> {
        self.check_sketch(&sketch)?;
        let digest = record.tensor_id;
        if self.contains(&digest) {
            self.note_name(&record.tensor_name, &record.shape);
            return Ok(PlanDelta::default());
        }
        let compat = CompatKey::from(record);
        let size = compat.byte_len();
        let seen = !self.names.insert((record.tensor_name.clone(), record.shape.clone()));
        self.sketches.insert(digest, sketch.clone());

        let chosen = if seen {
            best_candidate(candidates).filter(|c| c.ratio >= self.params.theta_min)
        } else {
            None
        };
        let action = match chosen {
            Some(c) => {
                let id = self
                    .placement
                    .get(&c.base)
                    .ok_or_else(|| Error::NotFound(format!("candidate base {}", c.base)))?
                    .cluster;
                let cluster = self.clusters.get_mut(&id).expect("placement points at a cluster");
                cluster.add_delta(digest, size, c.base, c.ratio)?;
                self.placement.insert(digest, Placement { cluster: id });
                PlanAction::StoreDelta {
                    digest,
                    base: c.base,
                    predicted_ratio: c.ratio,
                }
            }
            None => {
                let id = self.next_cluster;
                self.next_cluster += 1;
                self.clusters
                    .insert(id, Cluster::seeded(id, compat.clone(), digest, size));
                self.placement.insert(digest, Placement { cluster: id });
                self.index.insert(&compat, digest, sketch);
                PlanAction::StoreBase { digest }
            }
        };
        Ok(PlanDelta { actions: vec![action] })
    }

    /// Clusters meeting the split trigger, by id.
    pub fn split_eligible(&self) -> Vec<u64> {
        self.clusters
            .values()
            .filter(|c| self.params.triggers_split(c))
            .map(|c| c.id)
            .collect()
    }

    /// Phase II on one cluster without committing.
    pub fn plan_split(&self, id: u64) -> Option<SplitOutcome> {
        let cluster = self.clusters.get(&id)?;
        Some(split_with(cluster, &self.scorer(), self.params.delta))
    }

    /// Replaces a cluster with a split result and indexes promoted bases.
    pub fn commit_split(&mut self, outcome: &SplitOutcome) -> Result<()> {
        let id = outcome.cluster.id;
        if !self.clusters.contains_key(&id) {
            return Err(Error::NotFound(format!("cluster {id}")));
        }
        for a in &outcome.plan.actions {
            if let PlanAction::PromoteToBase { digest } = a {
                let sketch = self
                    .sketches
                    .get(digest)
                    .cloned()
                    .ok_or_else(|| Error::NotFound(format!("sketch for {digest}")))?;
                self.index.insert(&outcome.cluster.compat, *digest, sketch);
            }
        }
        self.clusters.insert(id, outcome.cluster.clone());
        Ok(())
    }

    /// Rebuilds state from persisted clusters and sketches. Bases are
    /// indexed in digest order within each cluster, clusters in id order.
    pub fn restore(
        &mut self,
        clusters: Vec<Cluster>,
        sketches: HashMap<TensorDigest, Arc<Sketch>>,
        names: impl IntoIterator<Item = (String, Vec<u64>)>,
    ) -> Result<()> {
        for s in sketches.values() {
            self.check_sketch(s)?;
        }
        self.sketches = sketches;
        self.names.extend(names);
        for c in clusters {
            c.check()?;
            for (d, m) in &c.members {
                self.placement.insert(*d, Placement { cluster: c.id });
                if m.role == Role::Base {
                    let s = self
                        .sketches
                        .get(d)
                        .cloned()
                        .ok_or_else(|| Error::NotFound(format!("sketch for {d}")))?;
                    self.index.insert(&c.compat, *d, s);
                }
            }
            self.next_cluster = self.next_cluster.max(c.id + 1);
            self.clusters.insert(c.id, c);
        }
        Ok(())
    }

    /// Predicted stored bytes over all clusters.
    pub fn predicted_cost(&self) -> f64 {
        self.clusters.values().map(Cluster::predicted_cost).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fingerprint::sketch_bytes;
    use crate::synth;

    fn d(i: u8) -> TensorDigest {
        TensorDigest([i; 16])
    }

    fn record(name: &str, digest: TensorDigest, n: u64) -> TensorRecord {
        TensorRecord {
            model_id: "m".into(),
            tensor_name: name.into(),
            tensor_id: digest,
            tensor_sketch: digest,
            dtype: DType::BF16,
            shape: vec![n],
        }
    }

    fn state() -> PlannerState {
        PlannerState::new(
            PlannerParams::default(),
            PredictorCoefficients::default_for(crate::codec::CodecId::Fmpp),
            SketchParams::default(),
            IndexConfig::default(),
        )
    }

    fn dummy_sketch() -> Arc<Sketch> {
        Arc::new(sketch_bytes(&[0u8; 16], DType::BF16, &SketchParams::default()).unwrap())
    }

    #[test]
    fn first_tensor_seeds_a_base() {
        let mut s = state();
        let plan = s.assign(&record("w", d(1), 8), dummy_sketch()).unwrap();
        assert_eq!(plan.actions, vec![PlanAction::StoreBase { digest: d(1) }]);
    }

    #[test]
    fn duplicate_digest_plans_nothing() {
        let mut s = state();
        s.assign(&record("w", d(1), 8), dummy_sketch()).unwrap();
        let plan = s.assign(&record("other", d(1), 8), dummy_sketch()).unwrap();
        assert!(plan.is_empty());
    }

    #[test]
    fn picks_best_of_three_bases() {
        let mut s = state();
        for i in 1..=3 {
            s.assign_scored(&record(&format!("w{i}"), d(i), 8), dummy_sketch(), &[])
                .unwrap();
        }
        let cands = [
            Candidate {
                base: d(1),
                hamming: 10.0,
                ratio: 0.31,
            },
            Candidate {
                base: d(2),
                hamming: 8.0,
                ratio: 0.45,
            },
            Candidate {
                base: d(3),
                hamming: 6.0,
                ratio: 0.75,
            },
        ];
        let plan = s.assign_scored(&record("w1", d(9), 8), dummy_sketch(), &cands).unwrap();
        assert_eq!(
            plan.actions,
            vec![PlanAction::StoreDelta {
                digest: d(9),
                base: d(3),
                predicted_ratio: 0.75
            }]
        );
        assert_eq!(s.cluster_of(&d(9)).unwrap().id, s.cluster_of(&d(3)).unwrap().id);
    }

    #[test]
    fn ties_break_on_hamming_then_digest() {
        let a = Candidate {
            base: d(5),
            hamming: 3.0,
            ratio: 0.5,
        };
        let b = Candidate {
            base: d(4),
            hamming: 3.0,
            ratio: 0.5,
        };
        let c = Candidate {
            base: d(1),
            hamming: 4.0,
            ratio: 0.5,
        };
        assert_eq!(best_candidate(&[a, b, c]).unwrap().base, d(4));
        assert!(best_candidate(&[]).is_none());
    }

    #[test]
    fn unseen_name_or_low_ratio_seeds() {
        let mut s = state();
        s.assign_scored(&record("w", d(1), 8), dummy_sketch(), &[]).unwrap();
        let good = [Candidate {
            base: d(1),
            hamming: 0.0,
            ratio: 0.9,
        }];
        let plan = s
            .assign_scored(&record("fresh", d(2), 8), dummy_sketch(), &good)
            .unwrap();
        assert!(matches!(plan.actions[0], PlanAction::StoreBase { .. }));
        let poor = [Candidate {
            base: d(1),
            hamming: 0.0,
            ratio: 0.04,
        }];
        let plan = s.assign_scored(&record("w", d(3), 8), dummy_sketch(), &poor).unwrap();
        assert!(matches!(plan.actions[0], PlanAction::StoreBase { .. }));
        assert_eq!(s.clusters().count(), 3);
    }

    #[test]
    fn sketch_param_mismatch_is_rejected() {
        let mut s = state();
        let other = SketchParams::new(2, 512, 1).unwrap();
        let sk = Arc::new(sketch_bytes(&[0u8; 16], DType::BF16, &other).unwrap());
        assert!(matches!(
            s.assign(&record("w", d(1), 8), sk),
            Err(Error::SketchMismatch(_))
        ));
    }

    #[test]
    fn near_variant_joins_its_family() {
        let mut s = state();
        let params = SketchParams::default();
        let n = 1 << 14;
        let base = synth::weights(DType::BF16, n, 0.02, 3);
        let variant = synth::flip_bits(&base, DType::BF16, 1e-3, 4);
        let sb = Arc::new(sketch_bytes(&base, DType::BF16, &params).unwrap());
        let sv = Arc::new(sketch_bytes(&variant, DType::BF16, &params).unwrap());
        let (db, dv) = (TensorDigest::of(&base), TensorDigest::of(&variant));
        s.assign(&record("w", db, n as u64), sb).unwrap();
        let plan = s.assign(&record("w", dv, n as u64), sv).unwrap();
        match &plan.actions[0] {
            PlanAction::StoreDelta {
                base, predicted_ratio, ..
            } => {
                assert_eq!(*base, db);
                assert!(*predicted_ratio > 0.8);
            }
            other => panic!("{other:?}"),
        }
        plan.check_order(|b| s.member(b).map(|m| m.role == Role::Base).unwrap_or(false))
            .unwrap();
    }

    #[test]
    fn ndjson_round_trip() {
        let plan = PlanDelta {
            actions: vec![
                PlanAction::StoreBase { digest: d(1) },
                PlanAction::StoreDelta {
                    digest: d(2),
                    base: d(1),
                    predicted_ratio: 0.5,
                },
                PlanAction::PromoteToBase { digest: d(2) },
                PlanAction::Reassign {
                    digest: d(3),
                    new_base: d(2),
                    predicted_ratio: 0.7,
                },
            ],
        };
        let text = plan.to_ndjson();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("{\"action\":\"store_base\",\"digest\":\"0101"));
        assert_eq!(PlanDelta::from_ndjson(&text).unwrap(), plan);
        plan.check_order(|_| false).unwrap();
        let bad = PlanDelta {
            actions: plan.actions[1..].to_vec(),
        };
        assert!(bad.check_order(|_| false).is_err());
    }
}
