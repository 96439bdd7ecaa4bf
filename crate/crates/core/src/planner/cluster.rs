use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::CompatKey;
use crate::error::{Error, Result};
use crate::fingerprint::TensorDigest;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "snake_case")]
pub enum Role {
    Base,
    Delta { base: TensorDigest, ratio: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub size: u64,
    #[serde(flatten)]
    pub role: Role,
}

impl Member {
    pub fn ratio(&self) -> f64 {
        match self.role {
            Role::Base => 0.0,
            Role::Delta { ratio, .. } => ratio,
        }
    }

    pub fn base(&self) -> Option<TensorDigest> {
        match self.role {
            Role::Base => None,
            Role::Delta { base, .. } => Some(base),
        }
    }
}

/// Members and bases of one cluster. Saved and total bytes are maintained
/// incrementally; [`Cluster::recompute_ratio`] recomputes from scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub id: u64,
    pub compat: CompatKey,
    pub members: BTreeMap<TensorDigest, Member>,
    saved: f64,
    total: u64,
}

impl Cluster {
    pub fn seeded(id: u64, compat: CompatKey, base: TensorDigest, size: u64) -> Self {
        let mut members = BTreeMap::new();
        members.insert(base, Member { size, role: Role::Base });
        Cluster {
            id,
            compat,
            members,
            saved: 0.0,
            total: size,
        }
    }

    /// Builds a cluster from stored members, checking consistency.
    pub fn from_members(id: u64, compat: CompatKey, members: BTreeMap<TensorDigest, Member>) -> Result<Self> {
        let mut c = Cluster {
            id,
            compat,
            members,
            saved: 0.0,
            total: 0,
        };
        c.saved = c.members.values().map(|m| m.ratio() * m.size as f64).sum();
        c.total = c.members.values().map(|m| m.size).sum();
        c.check()?;
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn bases(&self) -> BTreeSet<TensorDigest> {
        self.members
            .iter()
            .filter(|(_, m)| m.role == Role::Base)
            .map(|(d, _)| *d)
            .collect()
    }

    pub fn total_bytes(&self) -> u64 {
        self.total
    }

    pub(super) fn add_delta(&mut self, digest: TensorDigest, size: u64, base: TensorDigest, ratio: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::OutOfRange(ratio));
        }
        if self.members.get(&base).map(|m| m.role) != Some(Role::Base) {
            return Err(Error::NotFound(format!("base {base} in cluster {}", self.id)));
        }
        if self
            .members
            .insert(
                digest,
                Member {
                    size,
                    role: Role::Delta { base, ratio },
                },
            )
            .is_some()
        {
            return Err(Error::Integrity(format!("{digest} already in cluster {}", self.id)));
        }
        self.saved += ratio * size as f64;
        self.total += size;
        Ok(())
    }

    pub(super) fn promote(&mut self, digest: &TensorDigest) {
        let m = self.members.get_mut(digest).expect("promoted member exists");
        self.saved -= m.ratio() * m.size as f64;
        m.role = Role::Base;
    }

    pub(super) fn reassign(&mut self, digest: &TensorDigest, base: TensorDigest, ratio: f64) {
        let m = self.members.get_mut(digest).expect("reassigned member exists");
        self.saved += (ratio - m.ratio()) * m.size as f64;
        m.role = Role::Delta { base, ratio };
    }

    /// Share of member bytes saved by deltas. Bases save nothing.
    pub fn reduction_ratio(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        (self.saved / self.total as f64).clamp(0.0, 1.0)
    }

    pub fn recompute_ratio(&self) -> Result<f64> {
        cluster_reduction_ratio(self)
    }

    /// Predicted stored bytes: bases in full, deltas at `(1 - R) * s`.
    pub fn predicted_cost(&self) -> f64 {
        self.members.values().map(|m| (1.0 - m.ratio()) * m.size as f64).sum()
    }

    /// Bases exist, deltas reference bases only, ratios lie in `[0, 1]`.
    pub fn check(&self) -> Result<()> {
        if self.members.is_empty() {
            return Err(Error::Integrity(format!("cluster {} is empty", self.id)));
        }
        for (d, m) in &self.members {
            if let Role::Delta { base, ratio } = m.role {
                if !(0.0..=1.0).contains(&ratio) {
                    return Err(Error::OutOfRange(ratio));
                }
                match self.members.get(&base) {
                    Some(b) if b.role == Role::Base => {}
                    _ => {
                        return Err(Error::Integrity(format!(
                            "delta {d} in cluster {} references non-base {base}",
                            self.id
                        )))
                    }
                }
            }
        }
        Ok(())
    }
}

/// `sum over deltas of R * s` divided by `sum over members of s`.
pub fn cluster_reduction_ratio(cluster: &Cluster) -> Result<f64> {
    if cluster.members.is_empty() {
        return Err(Error::Integrity(format!("cluster {} is empty", cluster.id)));
    }
    let total: f64 = cluster.members.values().map(|m| m.size as f64).sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let saved: f64 = cluster.members.values().map(|m| m.ratio() * m.size as f64).sum();
    Ok(saved / total)
}
