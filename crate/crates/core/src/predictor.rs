//! Reduction-ratio prediction from a normalized sketch distance.
//!
//! Features are `p_hat`, `tau = 8 * S(p_hat)` (binary entropy scaled to bits
//! per byte) and their product; a linear model over them plus an intercept is
//! fitted by least squares against codec-measured ratios and clipped to
//! `[0, 1]` at prediction time.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::codec::CodecId;
use crate::error::{Error, Result};
use crate::fingerprint::TensorDigest;

/// Binary entropy in bits, with `0 * log 0 = 0`.
pub fn binary_entropy(x: f64) -> f64 {
    let term = |v: f64| if v <= 0.0 { 0.0 } else { -v * v.ln() };
    (term(x) + term(1.0 - x)) / std::f64::consts::LN_2
}

/// `tau = 8 * S(p_hat)`.
pub fn entropy_feature(p_hat: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p_hat) {
        return Err(Error::OutOfRange(p_hat));
    }
    Ok(8.0 * binary_entropy(p_hat))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictorCoefficients {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub epsilon: f64,
}

impl PredictorCoefficients {
    /// Coefficients fitted on the built-in synthetic corpus
    /// (`synth::training_pairs`, 640 pairs of 65,536 BF16 elements, seed 7) for each delta codec.
    pub fn default_for(codec: CodecId) -> Self {
        match codec {
            CodecId::Fmpp => PredictorCoefficients {
                alpha: -2.9400834079539906,
                beta: -0.11552655966839379,
                gamma: 0.36995398749024555,
                epsilon: 0.9907049465028127,
            },
            _ => PredictorCoefficients {
                alpha: -1.7201770251893118,
                beta: -0.1132413839244976,
                gamma: 0.2117629081867681,
                epsilon: 0.9923851384932851,
            },
        }
    }

    fn raw(&self, p_hat: f64, tau: f64) -> f64 {
        self.alpha * p_hat + self.beta * tau + self.gamma * p_hat * tau + self.epsilon
    }
}

/// Predicted reduction ratio, clipped to `[0, 1]`. `p_hat` is clamped first.
pub fn predict_ratio(p_hat: f64, coeffs: &PredictorCoefficients) -> f64 {
    let p = if p_hat.is_nan() { 1.0 } else { p_hat.clamp(0.0, 1.0) };
    let tau = 8.0 * binary_entropy(p);
    let r = coeffs.raw(p, tau);
    if r.is_nan() {
        0.0
    } else {
        r.clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub p_hat: f64,
    pub measured_ratio: f64,
    pub bytes: u64,
}

/// Ordinary least squares on columns `[p_hat, tau, p_hat*tau, 1]`.
pub fn fit(pairs: &[TrainingPair]) -> Result<PredictorCoefficients> {
    if pairs.len() < 4 {
        return Err(Error::RankDeficient);
    }
    let mut rows = Vec::with_capacity(pairs.len());
    let mut y = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let tau = entropy_feature(pair.p_hat)?;
        rows.push([pair.p_hat, tau, pair.p_hat * tau, 1.0]);
        y.push(pair.measured_ratio);
    }
    let [alpha, beta, gamma, epsilon] = least_squares(&rows, &y)?;
    Ok(PredictorCoefficients {
        alpha,
        beta,
        gamma,
        epsilon,
    })
}

/// Householder QR least squares for a tall `m x 4` system.
fn least_squares(rows: &[[f64; 4]], y: &[f64]) -> Result<[f64; 4]> {
    const K: usize = 4;
    let m = rows.len();
    // Column-major copy so each Householder step works on contiguous columns.
    let mut a: Vec<Vec<f64>> = (0..K).map(|j| rows.iter().map(|r| r[j]).collect()).collect();
    let mut b = y.to_vec();
    let scale: Vec<f64> = a.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mut diag = [0.0; K];

    for j in 0..K {
        let norm = a[j][j..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if scale[j] == 0.0 || norm <= 1e-10 * scale[j] {
            return Err(Error::RankDeficient);
        }
        let alpha = if a[j][j] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = a[j][j..].to_vec();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        diag[j] = alpha;
        for col in a.iter_mut().skip(j + 1) {
            let dot: f64 = v.iter().zip(&col[j..]).map(|(p, q)| p * q).sum();
            let f = 2.0 * dot / vnorm2;
            col[j..].iter_mut().zip(&v).for_each(|(c, vi)| *c -= f * vi);
        }
        let dot: f64 = v.iter().zip(&b[j..]).map(|(p, q)| p * q).sum();
        let f = 2.0 * dot / vnorm2;
        b[j..].iter_mut().zip(&v).for_each(|(c, vi)| *c -= f * vi);
        a[j][j] = alpha;
    }
    debug_assert!(m >= K);

    let mut x = [0.0; K];
    for j in (0..K).rev() {
        let mut s = b[j];
        for (k, xk) in x.iter().enumerate().skip(j + 1) {
            s -= a[k][j] * xk;
        }
        x[j] = s / diag[j];
    }
    Ok(x)
}

/// Holdout accuracy summary. Errors are absolute, in ratio units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub count: usize,
    pub pearson: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Nearest-rank percentile of an already sorted slice.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = ((q / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

pub fn evaluate(coeffs: &PredictorCoefficients, pairs: &[TrainingPair]) -> AccuracyReport {
    let predicted: Vec<f64> = pairs.iter().map(|p| predict_ratio(p.p_hat, coeffs)).collect();
    let measured: Vec<f64> = pairs.iter().map(|p| p.measured_ratio).collect();
    let mut errors: Vec<f64> = predicted.iter().zip(&measured).map(|(p, m)| (p - m).abs()).collect();
    errors.sort_by(f64::total_cmp);
    AccuracyReport {
        count: pairs.len(),
        pearson: pearson(&predicted, &measured),
        p50: percentile(&errors, 50.0),
        p90: percentile(&errors, 90.0),
        p99: percentile(&errors, 99.0),
    }
}

/// Deterministic split: every `k`-th pair goes to the holdout set.
pub fn holdout_split(pairs: &[TrainingPair], k: usize) -> (Vec<TrainingPair>, Vec<TrainingPair>) {
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, p) in pairs.iter().enumerate() {
        if i % k == k - 1 {
            test.push(*p);
        } else {
            train.push(*p);
        }
    }
    (train, test)
}

/// Digest over the pairs, for provenance in the coefficient record.
pub fn corpus_digest(pairs: &[TrainingPair]) -> TensorDigest {
    let mut buf = Vec::with_capacity(pairs.len() * 24);
    for p in pairs {
        buf.extend_from_slice(&p.p_hat.to_le_bytes());
        buf.extend_from_slice(&p.measured_ratio.to_le_bytes());
        buf.extend_from_slice(&p.bytes.to_le_bytes());
    }
    TensorDigest::of(&buf)
}

/// Versioned text form of a fitted predictor, one `key=value` per line.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientRecord {
    pub codec: CodecId,
    pub coeffs: PredictorCoefficients,
    pub corpus: TensorDigest,
}

const RECORD_HEADER: &str = "predictor-coefficients v1";

impl CoefficientRecord {
    pub fn to_text(&self) -> String {
        let c = &self.coeffs;
        let mut s = String::new();
        writeln!(s, "{RECORD_HEADER}").unwrap();
        writeln!(s, "codec={}", self.codec).unwrap();
        // `{:?}` on f64 prints the shortest round-tripping form.
        writeln!(s, "alpha={:?}", c.alpha).unwrap();
        writeln!(s, "beta={:?}", c.beta).unwrap();
        writeln!(s, "gamma={:?}", c.gamma).unwrap();
        writeln!(s, "epsilon={:?}", c.epsilon).unwrap();
        writeln!(s, "corpus={}", self.corpus).unwrap();
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(RECORD_HEADER) {
            return Err(Error::Config("not a predictor coefficient record".into()));
        }
        let mut codec = None;
        let mut corpus = None;
        let mut vals = [None; 4];
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad record line {line:?}")))?;
            let num = || {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad number {v:?}")))
            };
            match k.trim() {
                "codec" => codec = Some(v.trim().parse()?),
                "corpus" => corpus = Some(v.trim().parse()?),
                "alpha" => vals[0] = Some(num()?),
                "beta" => vals[1] = Some(num()?),
                "gamma" => vals[2] = Some(num()?),
                "epsilon" => vals[3] = Some(num()?),
                other => return Err(Error::Config(format!("unknown record key {other:?}"))),
            }
        }
        let missing = |what: &str| Error::Config(format!("record lacks {what}"));
        let coeffs = PredictorCoefficients {
            alpha: vals[0].ok_or_else(|| missing("alpha"))?,
            beta: vals[1].ok_or_else(|| missing("beta"))?,
            gamma: vals[2].ok_or_else(|| missing("gamma"))?,
            epsilon: vals[3].ok_or_else(|| missing("epsilon"))?,
        };
        if ![coeffs.alpha, coeffs.beta, coeffs.gamma, coeffs.epsilon]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::Config("non-finite coefficient".into()));
        }
        Ok(CoefficientRecord {
            codec: codec.ok_or_else(|| missing("codec"))?,
            coeffs,
            corpus: corpus.unwrap_or_default(),
        })
    }
}
