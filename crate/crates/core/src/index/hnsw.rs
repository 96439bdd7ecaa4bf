//! Hierarchical navigable small-world graph over dense `f32` vectors with
//! squared Euclidean distance.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HnswParams {
    /// Max neighbors per node above layer 0.
    pub m: usize,
    /// Max neighbors per node on layer 0.
    pub m0: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        HnswParams {
            m: 8,
            m0: 16,
            ef_construction: 64,
            ef_search: 24,
            seed: 0x484e_5357,
        }
    }
}

pub fn squared_l2(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            let d = x[i] - y[i];
            lanes[i] += d * d;
        }
    }
    let tail: f32 = ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)).sum();
    lanes.iter().sum::<f32>() + tail
}

#[derive(Clone, Copy, PartialEq)]
struct Scored(f32, u32);

impl Eq for Scored {}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

#[derive(Clone)]
pub struct Hnsw {
    params: HnswParams,
    level_mult: f64,
    rng: ChaCha8Rng,
    vectors: Vec<Arc<[f32]>>,
    /// `links[node][level]` lists neighbor ids.
    links: Vec<Vec<Vec<u32>>>,
    entry: Option<u32>,
    top: usize,
}

impl Hnsw {
    pub fn new(params: HnswParams) -> Self {
        Hnsw {
            level_mult: 1.0 / (params.m.max(2) as f64).ln(),
            rng: ChaCha8Rng::seed_from_u64(params.seed),
            params,
            vectors: Vec::new(),
            links: Vec::new(),
            entry: None,
            top: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    fn dist(&self, q: &[f32], id: u32) -> f32 {
        squared_l2(q, &self.vectors[id as usize])
    }

    fn max_links(&self, level: usize) -> usize {
        if level == 0 {
            self.params.m0
        } else {
            self.params.m
        }
    }

    /// Inserts a vector and returns its id (ids are dense, in insertion order).
    pub fn insert(&mut self, v: Arc<[f32]>) -> u32 {
        let id = self.vectors.len() as u32;
        let u: f64 = self.rng.random::<f64>().max(f64::MIN_POSITIVE);
        let level = (-u.ln() * self.level_mult).floor() as usize;
        self.vectors.push(v);
        self.links.push(vec![Vec::new(); level + 1]);

        let Some(mut ep) = self.entry else {
            self.entry = Some(id);
            self.top = level;
            return id;
        };
        let q = self.vectors[id as usize].clone();
        let mut ep_dist = self.dist(&q, ep);
        for l in (level + 1..=self.top).rev() {
            (ep, ep_dist) = self.greedy(&q, ep, ep_dist, l);
        }
        let mut entries = vec![Scored(ep_dist, ep)];
        for l in (0..=level.min(self.top)).rev() {
            let found = self.search_layer(&q, &entries, self.params.ef_construction, l);
            let chosen = self.select(&found, self.max_links(l));
            for &Scored(_, n) in &chosen {
                self.links[id as usize][l].push(n);
                self.links[n as usize][l].push(id);
                if self.links[n as usize][l].len() > self.max_links(l) {
                    self.prune(n, l);
                }
            }
            entries = found;
        }
        if level > self.top {
            self.top = level;
            self.entry = Some(id);
        }
        id
    }

    fn prune(&mut self, node: u32, level: usize) {
        let base = self.vectors[node as usize].clone();
        let mut scored: Vec<Scored> = self.links[node as usize][level]
            .iter()
            .map(|&n| Scored(self.dist(&base, n), n))
            .collect();
        scored.sort();
        let kept = self.select(&scored, self.max_links(level));
        self.links[node as usize][level] = kept.into_iter().map(|s| s.1).collect();
    }

    /// Neighbor-selection heuristic: keep a candidate only if it is closer to
    /// the query than to every neighbor already kept, then top up with the
    /// nearest rejected ones. `sorted` must be ascending by distance.
    fn select(&self, sorted: &[Scored], m: usize) -> Vec<Scored> {
        let mut kept: Vec<Scored> = Vec::with_capacity(m);
        let mut rejected = Vec::new();
        for &c in sorted {
            if kept.len() >= m {
                break;
            }
            let cv = &self.vectors[c.1 as usize];
            if kept.iter().all(|k| squared_l2(cv, &self.vectors[k.1 as usize]) > c.0) {
                kept.push(c);
            } else {
                rejected.push(c);
            }
        }
        for c in rejected {
            if kept.len() >= m {
                break;
            }
            kept.push(c);
        }
        kept
    }

    fn greedy(&self, q: &[f32], mut ep: u32, mut ep_dist: f32, level: usize) -> (u32, f32) {
        loop {
            let mut improved = false;
            for &n in &self.links[ep as usize][level] {
                let d = self.dist(q, n);
                if d < ep_dist {
                    ep_dist = d;
                    ep = n;
                    improved = true;
                }
            }
            if !improved {
                return (ep, ep_dist);
            }
        }
    }

    /// Best-first search of one layer; returns up to `ef` results ascending.
    fn search_layer(&self, q: &[f32], entries: &[Scored], ef: usize, level: usize) -> Vec<Scored> {
        let mut visited = vec![0u64; self.vectors.len().div_ceil(64)];
        let mut mark = |id: u32| {
            let (w, b) = (id as usize / 64, id % 64);
            let seen = visited[w] >> b & 1 == 1;
            visited[w] |= 1 << b;
            !seen
        };
        let mut candidates: BinaryHeap<Reverse<Scored>> = BinaryHeap::new();
        let mut results: BinaryHeap<Scored> = BinaryHeap::new();
        for &e in entries {
            if mark(e.1) {
                candidates.push(Reverse(e));
                results.push(e);
            }
        }
        while results.len() > ef {
            results.pop();
        }
        while let Some(Reverse(c)) = candidates.pop() {
            if results.len() >= ef && c.0 > results.peek().unwrap().0 {
                break;
            }
            for &n in &self.links[c.1 as usize][level] {
                if !mark(n) {
                    continue;
                }
                let d = self.dist(q, n);
                if results.len() < ef || d < results.peek().unwrap().0 {
                    candidates.push(Reverse(Scored(d, n)));
                    results.push(Scored(d, n));
                    if results.len() > ef {
                        results.pop();
                    }
                }
            }
        }
        results.into_sorted_vec()
    }

    /// Approximate `k` nearest ids with squared distances, ascending.
    pub fn search(&self, q: &[f32], k: usize) -> Vec<(u32, f32)> {
        let Some(mut ep) = self.entry else {
            return Vec::new();
        };
        let mut ep_dist = self.dist(q, ep);
        for l in (1..=self.top).rev() {
            (ep, ep_dist) = self.greedy(q, ep, ep_dist, l);
        }
        let ef = self.params.ef_search.max(k);
        self.search_layer(q, &[Scored(ep_dist, ep)], ef, 0)
            .into_iter()
            .take(k)
            .map(|s| (s.1, s.0))
            .collect()
    }
}
