use std::collections::HashMap;

use rayon::prelude::*;

use super::{Cluster, PairScorer, PlanAction, PlanDelta, Role};
use crate::fingerprint::TensorDigest;

/// Smallest ratio gain that counts as an improvement.
const MIN_GAIN: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SplitOutcome {
    /// The cluster after all committed promotions.
    pub cluster: Cluster,
    pub plan: PlanDelta,
    pub before: f64,
    pub after: f64,
    pub promotions: usize,
}

/// Phase II promotions for `cluster`, as a plan.
pub fn split(cluster: &Cluster, scorer: &(dyn PairScorer + Sync), delta: f64) -> PlanDelta {
    split_with(cluster, scorer, delta).plan
}

/// Greedy multi-center split. Each round considers members whose ratio is
/// more than `delta` below the mean delta-member ratio, evaluates promoting
/// each one (every member moves to whichever of its base or the candidate
/// scores higher), and commits the largest positive gain.
pub fn split_with(cluster: &Cluster, scorer: &(dyn PairScorer + Sync), delta: f64) -> SplitOutcome {
    let mut c = cluster.clone();
    let before = c.reduction_ratio();
    let order: Vec<TensorDigest> = c.members.keys().copied().collect();
    let sizes: Vec<f64> = c.members.values().map(|m| m.size as f64).collect();
    let total: f64 = sizes.iter().sum();
    // rows[c][t] = R(t, c) for every member t, computed once per candidate.
    let mut rows: HashMap<usize, Vec<f64>> = HashMap::new();
    let mut plan = PlanDelta::default();
    let mut promotions = 0;

    loop {
        let ratios: Vec<Option<f64>> = order
            .iter()
            .map(|t| match c.members[t].role {
                Role::Delta { ratio, .. } => Some(ratio),
                Role::Base => None,
            })
            .collect();
        let deltas: Vec<f64> = ratios.iter().flatten().copied().collect();
        if deltas.is_empty() || total == 0.0 {
            break;
        }
        let mean = deltas.iter().sum::<f64>() / deltas.len() as f64;
        let candidates: Vec<usize> = (0..order.len())
            .filter(|&i| matches!(ratios[i], Some(r) if r < mean - delta))
            .collect();
        if candidates.is_empty() {
            break;
        }
        let missing: Vec<usize> = candidates.iter().copied().filter(|i| !rows.contains_key(i)).collect();
        let fresh: Vec<(usize, Vec<f64>)> = missing
            .par_iter()
            .map(|&ci| {
                let row = order
                    .iter()
                    .enumerate()
                    .map(|(ti, t)| if ti == ci { 0.0 } else { scorer.ratio(t, &order[ci]) })
                    .collect();
                (ci, row)
            })
            .collect();
        rows.extend(fresh);

        let saved_now: f64 = ratios.iter().zip(&sizes).map(|(r, s)| r.unwrap_or(0.0) * s).sum();
        let current = saved_now / total;
        let mut best: Option<(f64, usize)> = None;
        for &ci in &candidates {
            let row = &rows[&ci];
            let mut saved = saved_now - ratios[ci].unwrap_or(0.0) * sizes[ci];
            for (ti, r) in ratios.iter().enumerate() {
                if let Some(r) = r {
                    if ti != ci && row[ti] > *r {
                        saved += (row[ti] - r) * sizes[ti];
                    }
                }
            }
            let gain = saved / total - current;
            if best.is_none_or(|(g, _)| gain > g) {
                best = Some((gain, ci));
            }
        }
        let Some((gain, ci)) = best else { break };
        if gain <= MIN_GAIN {
            break;
        }

        let promoted = order[ci];
        c.promote(&promoted);
        plan.actions.push(PlanAction::PromoteToBase { digest: promoted });
        let row = rows.remove(&ci).expect("row computed");
        for (ti, r) in ratios.iter().enumerate() {
            if let Some(r) = r {
                if ti != ci && row[ti] > *r {
                    c.reassign(&order[ti], promoted, row[ti]);
                    plan.actions.push(PlanAction::Reassign {
                        digest: order[ti],
                        new_base: promoted,
                        predicted_ratio: row[ti],
                    });
                }
            }
        }
        promotions += 1;
    }

    SplitOutcome {
        after: c.reduction_ratio(),
        cluster: c,
        plan,
        before,
        promotions,
    }
}
