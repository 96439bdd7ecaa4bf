use crate::error::{Error, Result};
use crate::store::TensorRecord;

/// Exhaustive search is limited to this many tensors.
pub const MAX_EXACT_TENSORS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct ExactPlan {
    /// Indices of the chosen bases, ascending.
    pub bases: Vec<usize>,
    /// For each tensor, the index of the base it is stored against (itself
    /// for bases).
    pub assignment: Vec<usize>,
    pub cost: f64,
}

/// Optimal base set for records sharing a compatibility key.
/// `ratios[t][b]` is the predicted ratio of storing `t` against `b`.
pub fn exact_plan(tensors: &[TensorRecord], ratios: &[Vec<f64>]) -> Result<ExactPlan> {
    let sizes: Vec<f64> = tensors
        .iter()
        .map(|t| t.shape.iter().product::<u64>() as f64 * t.dtype.size() as f64)
        .collect();
    exact_plan_sizes(&sizes, ratios)
}

/// Enumerates every nonempty base set `B` and minimizes
/// `sum_{b in B} s_b + sum_{t not in B} min_{b in B} (1 - R(t, b)) s_t`.
pub fn exact_plan_sizes(sizes: &[f64], ratios: &[Vec<f64>]) -> Result<ExactPlan> {
    let n = sizes.len();
    if n > MAX_EXACT_TENSORS {
        return Err(Error::TooLarge(n, MAX_EXACT_TENSORS));
    }
    if n == 0 {
        return Ok(ExactPlan {
            bases: Vec::new(),
            assignment: Vec::new(),
            cost: 0.0,
        });
    }
    if ratios.len() != n || ratios.iter().any(|r| r.len() != n) {
        return Err(Error::Config(format!("ratio matrix must be {n} x {n}")));
    }
    // cost[t][b] of storing t against b
    let cost: Vec<Vec<f64>> = (0..n)
        .map(|t| {
            (0..n)
                .map(|b| (1.0 - ratios[t][b].clamp(0.0, 1.0)) * sizes[t])
                .collect()
        })
        .collect();

    let mut best = (f64::INFINITY, 0u32);
    for mask in 1u32..(1 << n) {
        let mut total = 0.0;
        for (t, row) in cost.iter().enumerate() {
            if mask >> t & 1 == 1 {
                total += sizes[t];
                continue;
            }
            let mut m = f64::INFINITY;
            let mut bits = mask;
            while bits != 0 {
                let b = bits.trailing_zeros() as usize;
                m = m.min(row[b]);
                bits &= bits - 1;
            }
            total += m;
            if total >= best.0 {
                break;
            }
        }
        if total < best.0 {
            best = (total, mask);
        }
    }

    let mask = best.1;
    let bases: Vec<usize> = (0..n).filter(|&b| mask >> b & 1 == 1).collect();
    let assignment = (0..n)
        .map(|t| {
            if mask >> t & 1 == 1 {
                t
            } else {
                *bases
                    .iter()
                    .min_by(|&&a, &&b| cost[t][a].total_cmp(&cost[t][b]))
                    .expect("nonempty base set")
            }
        })
        .collect();
    Ok(ExactPlan {
        bases,
        assignment,
        cost: best.0,
    })
}
