use std::sync::Arc;
use std::time::Instant;

use clap::{Args, ValueEnum};
use serde::Serialize;

use tensorvault::codec::{decode_any, encode_with, with_workers, CodecId, DEFAULT_CHUNK_ELEMENTS};
use tensorvault::fingerprint::{sketch_bytes, SketchParams, TensorDigest};
use tensorvault::format::DType;
use tensorvault::index::{IndexConfig, IndexMode};
use tensorvault::planner::{PlannerParams, PlannerState};
use tensorvault::predictor::PredictorCoefficients;
use tensorvault::{synth, TensorRecord};

use crate::{Failure, Outcome};

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Codec,
    Sketch,
    Planner,
    All,
}

#[derive(Args)]
pub struct BenchArgs {
    suite: Suite,
    /// Corpus size for codec and sketch runs, e.g. 64M or 1G.
    #[arg(long, default_value = "64M", value_parser = parse_size)]
    bytes: u64,
    /// Worker counts to compare.
    #[arg(long, value_delimiter = ',', default_value = "1,8")]
    worker_counts: Vec<usize>,
    /// Stored bases for planner runs.
    #[arg(long, value_delimiter = ',', default_value = "100,200,400,800")]
    tensors: Vec<usize>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Serialize)]
struct Row {
    operation: String,
    bytes: u64,
    seconds: f64,
    mb_per_s: f64,
    workers: usize,
}

impl Row {
    fn new(operation: impl Into<String>, bytes: u64, seconds: f64, workers: usize) -> Self {
        Row {
            operation: operation.into(),
            bytes,
            seconds,
            mb_per_s: bytes as f64 / seconds.max(1e-12) / 1e6,
            workers,
        }
    }
}

fn parse_size(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let (digits, unit) = match s.char_indices().find(|(_, c)| !c.is_ascii_digit()) {
        Some((i, _)) => s.split_at(i),
        None => (s, ""),
    };
    let n: u64 = digits.parse().map_err(|_| format!("bad size {s:?}"))?;
    let mul = match unit.to_ascii_uppercase().as_str() {
        "" | "B" => 1,
        "K" | "KIB" => 1 << 10,
        "M" | "MIB" => 1 << 20,
        "G" | "GIB" => 1 << 30,
        _ => return Err(format!("bad size unit in {s:?}")),
    };
    n.checked_mul(mul)
        .filter(|&b| b >= 2)
        .ok_or_else(|| format!("size {s:?} out of range"))
}

pub fn run(args: &BenchArgs, human: bool) -> Outcome {
    if args.worker_counts.contains(&0) || args.tensors.contains(&0) {
        return Err(Failure::Usage(
            "worker counts and tensor counts must be positive".into(),
        ));
    }
    let mut rows = Vec::new();
    let mut notes = Vec::new();
    if matches!(args.suite, Suite::Codec | Suite::All) {
        codec(args, &mut rows, &mut notes)?;
    }
    if matches!(args.suite, Suite::Sketch | Suite::All) {
        sketch(args, &mut rows)?;
    }
    if matches!(args.suite, Suite::Planner | Suite::All) {
        planner(args, &mut rows)?;
    }
    if human {
        println!(
            "{:<28} {:>14} {:>12} {:>10} {:>7}",
            "operation", "bytes", "seconds", "MB/s", "workers"
        );
        for r in &rows {
            println!(
                "{:<28} {:>14} {:>12.6} {:>10.1} {:>7}",
                r.operation, r.bytes, r.seconds, r.mb_per_s, r.workers
            );
        }
        for n in &notes {
            println!("{n}");
        }
    } else {
        let mut w = csv::Writer::from_writer(std::io::stdout().lock());
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
        for n in &notes {
            eprintln!("{n}");
        }
    }
    Ok(())
}

fn pair(args: &BenchArgs) -> (Vec<u8>, Vec<u8>) {
    let elements = (args.bytes / 2) as usize;
    let base = synth::weights(DType::BF16, elements, 0.02, args.seed);
    let target = synth::finetune(&base, DType::BF16, 0.01, 2, args.seed + 1);
    (base, target)
}

fn codec(args: &BenchArgs, rows: &mut Vec<Row>, notes: &mut Vec<String>) -> Outcome {
    let (base, target) = pair(args);
    let bytes = target.len() as u64;
    for codec in [CodecId::Fmpp, CodecId::TensorX] {
        let mut reference: Option<(usize, Vec<u8>)> = None;
        let mut single = None;
        for &w in &args.worker_counts {
            let (enc, dec, blob) = with_workers(w, || -> tensorvault::Result<_> {
                let t0 = Instant::now();
                let blob = encode_with(codec, &target, Some(&base), DType::BF16, DEFAULT_CHUNK_ELEMENTS)?;
                let enc = t0.elapsed().as_secs_f64();
                let t1 = Instant::now();
                let back = decode_any(&blob, Some(&base))?;
                let dec = t1.elapsed().as_secs_f64();
                if back != target {
                    return Err(tensorvault::Error::Integrity(format!("{codec} round trip mismatch")));
                }
                Ok((enc, dec, blob.to_bytes()))
            })??;
            rows.push(Row::new(format!("encode_{codec}"), bytes, enc, w));
            rows.push(Row::new(format!("decode_{codec}"), bytes, dec, w));
            match &reference {
                Some((rw, b)) if *b != blob => {
                    return Err(Failure::Integrity(format!(
                        "{codec} output differs between {rw} and {w} workers"
                    )))
                }
                Some(_) => {}
                None => reference = Some((w, blob)),
            }
            if w == 1 {
                single = Some(enc);
            } else if let Some(s) = single {
                notes.push(format!("{codec} encode speedup at {w} workers: {:.2}x", s / enc));
            }
        }
    }
    Ok(())
}

fn sketch(args: &BenchArgs, rows: &mut Vec<Row>) -> Outcome {
    let (_, target) = pair(args);
    let params = SketchParams::default();
    for &w in &args.worker_counts {
        let seconds = with_workers(w, || -> tensorvault::Result<f64> {
            let t0 = Instant::now();
            sketch_bytes(&target, DType::BF16, &params)?;
            Ok(t0.elapsed().as_secs_f64())
        })??;
        rows.push(Row::new("sketch", target.len() as u64, seconds, w));
    }
    Ok(())
}

/// Mean per-tensor Phase I time once `n` bases are indexed.
fn planner(args: &BenchArgs, rows: &mut Vec<Row>) -> Outcome {
    const ELEMENTS: usize = 4096;
    const QUERIES: usize = 200;
    let params = SketchParams::default();
    let record = |name: String, t: &[u8]| {
        let d = TensorDigest::of(t);
        TensorRecord {
            model_id: "bench".into(),
            tensor_name: name,
            tensor_id: d,
            tensor_sketch: d,
            dtype: DType::BF16,
            shape: vec![ELEMENTS as u64],
        }
    };
    for &n in &args.tensors {
        let tree = synth::lineage(DType::BF16, ELEMENTS, n, 4, 0.01, args.seed);
        let mut state = PlannerState::new(
            PlannerParams::default(),
            PredictorCoefficients::default_for(CodecId::Fmpp),
            params,
            IndexConfig {
                mode: IndexMode::Graph,
                ..Default::default()
            },
        );
        for (i, t) in tree.iter().enumerate() {
            state.assign(
                &record(format!("layer{i}"), t),
                Arc::new(sketch_bytes(t, DType::BF16, &params)?),
            )?;
        }
        let arrivals = (0..QUERIES)
            .map(|q| {
                let b = q * 7919 % n;
                let t = synth::flip_bits(&tree[b], DType::BF16, 0.002, args.seed + q as u64);
                Ok((
                    record(format!("layer{b}"), &t),
                    Arc::new(sketch_bytes(&t, DType::BF16, &params)?),
                ))
            })
            .collect::<tensorvault::Result<Vec<_>>>()?;
        let t0 = Instant::now();
        for (r, s) in &arrivals {
            state.assign(r, s.clone())?;
        }
        let per = t0.elapsed().as_secs_f64() / QUERIES as f64;
        rows.push(Row::new(format!("planner_assign_n{n}"), (ELEMENTS * 2) as u64, per, 1));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::parse_size;

    #[test]
    fn sizes() {
        assert_eq!(parse_size("64M"), Ok(64 << 20));
        assert_eq!(parse_size("1G"), Ok(1 << 30));
        assert_eq!(parse_size("4096"), Ok(4096));
        assert!(parse_size("").is_err());
        assert!(parse_size("3X").is_err());
    }
}
