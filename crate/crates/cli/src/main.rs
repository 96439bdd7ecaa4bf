//! `tvault`: command-line front end for a tensorvault store.
//!
//! Reports go to stdout as JSON lines (CSV for `bench`) unless `--human` is
//! given. Exit codes: 0 ok, 1 other error, 2 usage, 3 not found, 4 integrity,
//! 5 ingest failure.

mod bench;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use tensorvault::codec::CodecId;
use tensorvault::fingerprint::TensorDigest;
use tensorvault::format::{parse_model, ModelFile};
use tensorvault::predictor::{corpus_digest, evaluate, fit, holdout_split, CoefficientRecord, TrainingPair};
use tensorvault::store::{IngestReport, RefineReport, StoreStats};
use tensorvault::{synth, EngineConfig, Error, Store};

const DEFAULT_STORE: &str = "tvault-store";

#[derive(Parser)]
#[command(name = "tvault", version, about = "Deduplicating delta store for model weight files")]
struct Cli {
    /// Store directory [default: tvault-store, or `store` from the config].
    #[arg(long, global = true, env = "TH_STORE")]
    store: Option<PathBuf>,
    /// Engine config file (`key = value` lines).
    #[arg(long, global = true, env = "TH_CONFIG")]
    config: Option<PathBuf>,
    /// Worker threads; 0 means all cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Human-readable output instead of JSON/CSV.
    #[arg(long, global = true)]
    human: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create an empty store.
    Init,
    /// Ingest model files in the order given.
    Ingest {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        /// Model id (one path only); defaults to the file stem.
        #[arg(long)]
        id: Option<String>,
        /// Print the plan as NDJSON actions and write nothing.
        #[arg(long)]
        dry_run: bool,
        /// Continue with the next model after a failure.
        #[arg(long)]
        keep_going: bool,
    },
    /// Reconstruct a model file.
    Get {
        id: String,
        /// Output path, or `-` for stdout.
        #[arg(long, short)]
        out: PathBuf,
        /// Re-digest every tensor of the output against the stored ids.
        #[arg(long)]
        verify: bool,
    },
    /// Dry-run planning for model files and/or a refinement pass.
    Plan {
        paths: Vec<PathBuf>,
        #[arg(long)]
        refine: bool,
    },
    /// Run split refinement over eligible clusters.
    Refine {
        /// Stop after this many passes, or earlier at a fixed point.
        #[arg(long, default_value_t = 1)]
        passes: usize,
    },
    /// Fit predictor coefficients from `p_hat,measured_ratio,bytes` rows.
    Fit {
        csv: Option<PathBuf>,
        /// Generate this many synthetic pairs instead of reading a CSV.
        #[arg(long)]
        synthesize: Option<usize>,
        /// Elements per synthetic tensor.
        #[arg(long, default_value_t = 65_536)]
        elements: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// tensorx or fmpp [default: the store's codec, else fmpp].
        #[arg(long)]
        codec: Option<CodecId>,
        /// Write the pairs used to this CSV.
        #[arg(long)]
        pairs_out: Option<PathBuf>,
        /// Persist the fitted record into the store.
        #[arg(long)]
        save: bool,
    },
    /// Decode every stored tensor and check digests and links.
    Verify,
    /// Storage totals and per-cluster ratios.
    Stats,
    /// Codec, sketch and planner micro-benchmarks (CSV).
    Bench(bench::BenchArgs),
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    NotFound(String),
    Integrity(String),
    Ingest(String),
    Other(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Other(_) => 1,
            Failure::Usage(_) => 2,
            Failure::NotFound(_) => 3,
            Failure::Integrity(_) => 4,
            Failure::Ingest(_) => 5,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m)
            | Failure::NotFound(m)
            | Failure::Integrity(m)
            | Failure::Ingest(m)
            | Failure::Other(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let m = e.to_string();
        match e {
            Error::NotFound(_) => Failure::NotFound(m),
            Error::Integrity(_) => Failure::Integrity(m),
            Error::Config(_) | Error::SketchMismatch(_) => Failure::Usage(m),
            _ => Failure::Other(m),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Other(e.to_string())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

struct Ctx {
    store: PathBuf,
    config: Option<EngineConfig>,
    workers: Option<usize>,
    human: bool,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Self, Failure> {
        let config = cli.config.as_ref().map(EngineConfig::load).transpose()?;
        let store = cli
            .store
            .clone()
            .or_else(|| config.as_ref().and_then(|c| c.store_path.clone()))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_STORE));
        Ok(Ctx {
            store,
            config,
            workers: cli.workers,
            human: cli.human,
        })
    }

    fn open(&self) -> Result<Store, Failure> {
        let config = match (&self.config, self.workers) {
            (None, None) => return Ok(Store::open(&self.store)?),
            (Some(c), _) => c.clone(),
            (None, Some(_)) => Store::read_config(&self.store)?,
        };
        Ok(Store::open_with(&self.store, &self.with_workers(config))?)
    }

    fn with_workers(&self, mut config: EngineConfig) -> EngineConfig {
        if let Some(w) = self.workers {
            config.workers = w;
        }
        config
    }

    fn emit<T: Serialize>(&self, value: &T) {
        println!("{}", serde_json::to_string(value).expect("serializable report"));
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = Ctx::new(&cli).and_then(|ctx| run(&ctx, cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("tvault: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn run(ctx: &Ctx, command: Command) -> Outcome {
    match command {
        Command::Init => init(ctx),
        Command::Ingest {
            paths,
            id,
            dry_run,
            keep_going,
        } => {
            if id.is_some() && paths.len() != 1 {
                return Err(Failure::Usage("--id takes exactly one path".into()));
            }
            if dry_run {
                plan(ctx, &paths, id.as_deref(), false)
            } else {
                ingest(ctx, &paths, id.as_deref(), keep_going)
            }
        }
        Command::Get { id, out, verify } => get(ctx, &id, &out, verify),
        Command::Plan { paths, refine } => {
            if paths.is_empty() && !refine {
                return Err(Failure::Usage("plan needs model paths and/or --refine".into()));
            }
            plan(ctx, &paths, None, refine)
        }
        Command::Refine { passes } => refine(ctx, passes),
        Command::Fit {
            csv,
            synthesize,
            elements,
            seed,
            codec,
            pairs_out,
            save,
        } => fit_cmd(ctx, csv, synthesize, elements, seed, codec, pairs_out, save),
        Command::Verify => verify(ctx),
        Command::Stats => stats(ctx),
        Command::Bench(args) => bench::run(&args, ctx.human),
    }
}

fn init(ctx: &Ctx) -> Outcome {
    let config = ctx.with_workers(ctx.config.clone().unwrap_or_default());
    let store = Store::create(&ctx.store, &config).map_err(|e| match e {
        Error::Conflict(m) => Failure::Usage(m),
        e => e.into(),
    })?;
    let c = store.config();
    if ctx.human {
        println!(
            "created {} (codec {}, sketch {}x{})",
            ctx.store.display(),
            c.codec,
            c.sketch.depth,
            c.sketch.width
        );
    } else {
        ctx.emit(&json!({ "store": ctx.store, "config": c }));
    }
    Ok(())
}

fn model_id(path: &Path, id: Option<&str>) -> String {
    id.map(str::to_owned).unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string())
    })
}

fn ratio(raw: u64, stored: u64) -> f64 {
    if raw == 0 {
        0.0
    } else {
        1.0 - stored as f64 / raw as f64
    }
}

fn ingest(ctx: &Ctx, paths: &[PathBuf], id: Option<&str>, keep_going: bool) -> Outcome {
    let mut store = ctx.open()?;
    let mut failed = Vec::new();
    for path in paths {
        let id = model_id(path, id);
        let result = ModelFile::open(path).and_then(|f| store.ingest_model(&id, f.bytes()));
        match result {
            Ok(report) => {
                let stats = store.stats()?;
                print_ingest(ctx, &report, &stats);
            }
            Err(e) => {
                eprintln!("tvault: {}: {e}", path.display());
                failed.push(id);
                if !keep_going {
                    break;
                }
            }
        }
    }
    if let Some(r) = store.end_batch()? {
        print_refine(ctx, &r);
    }
    let stats = store.stats()?;
    if ctx.human {
        println!(
            "total: {} models, {} -> {} bytes, reduction {:.4}",
            stats.models, stats.raw_bytes, stats.stored_bytes, stats.reduction_ratio
        );
    } else {
        ctx.emit(&json!({
            "event": "summary",
            "models": stats.models,
            "raw_bytes": stats.raw_bytes,
            "stored_bytes": stats.stored_bytes,
            "reduction_ratio": stats.reduction_ratio,
            "failed": failed,
        }));
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Ingest(format!(
            "{} model(s) failed: {}",
            failed.len(),
            failed.join(", ")
        )))
    }
}

fn print_ingest(ctx: &Ctx, r: &IngestReport, s: &StoreStats) {
    let own = ratio(r.raw_bytes, r.stored_bytes);
    if ctx.human {
        println!(
            "{}: {} tensors ({} dedup), {} -> {} bytes, ratio {:.4}; cumulative {:.4}",
            r.model_id,
            r.tensors.len(),
            r.dedup_count(),
            r.raw_bytes,
            r.stored_bytes,
            own,
            s.reduction_ratio
        );
    } else {
        ctx.emit(&json!({
            "event": "model",
            "model": r.model_id,
            "tensors": r.tensors.len(),
            "dedup": r.dedup_count(),
            "raw_bytes": r.raw_bytes,
            "stored_bytes": r.stored_bytes,
            "ratio": own,
            "cumulative_raw_bytes": s.raw_bytes,
            "cumulative_stored_bytes": s.stored_bytes,
            "cumulative_ratio": s.reduction_ratio,
        }));
    }
}

fn print_refine(ctx: &Ctx, r: &RefineReport) {
    if ctx.human {
        println!("refine: {} eligible, {} split", r.eligible, r.clusters.len());
        for c in &r.clusters {
            match &c.error {
                None => println!(
                    "  cluster {}: {:.4} -> {:.4}, {} promoted, {} reassigned, {} -> {} bytes",
                    c.cluster, c.before, c.after, c.promotions, c.reassigned, c.stored_before, c.stored_after
                ),
                Some(e) => println!("  cluster {}: failed: {e}", c.cluster),
            }
        }
    } else {
        ctx.emit(&json!({ "event": "refine", "report": r }));
    }
}

fn plan(ctx: &Ctx, paths: &[PathBuf], id: Option<&str>, refine: bool) -> Outcome {
    let store = ctx.open()?;
    let mut out = std::io::stdout().lock();
    for path in paths {
        let file = ModelFile::open(path).map_err(|e| Failure::Ingest(format!("{}: {e}", path.display())))?;
        let plan = store.plan_model(&model_id(path, id), file.bytes())?;
        out.write_all(plan.to_ndjson().as_bytes())?;
    }
    if refine {
        for outcome in store.plan_refine() {
            out.write_all(outcome.plan.to_ndjson().as_bytes())?;
        }
    }
    Ok(())
}

fn get(ctx: &Ctx, id: &str, out: &Path, verify: bool) -> Outcome {
    let store = ctx.open()?;
    let bytes = store.retrieve_model(id)?;
    if verify {
        let row = store
            .model(id)
            .ok_or_else(|| Failure::NotFound(format!("model {id:?}")))?;
        let views = parse_model(&bytes).map_err(|e| Failure::Integrity(e.to_string()))?;
        if views.len() != row.records.len() {
            return Err(Failure::Integrity(format!(
                "{id}: {} tensors reconstructed, {} recorded",
                views.len(),
                row.records.len()
            )));
        }
        for v in &views {
            let rec = row
                .records
                .iter()
                .find(|r| r.tensor_name == v.name)
                .ok_or_else(|| Failure::Integrity(format!("{id}: unexpected tensor {:?}", v.name)))?;
            if TensorDigest::of(v.bytes) != rec.tensor_id {
                return Err(Failure::Integrity(format!(
                    "{id}: tensor {:?} does not match its digest",
                    v.name
                )));
            }
        }
    }
    if out == Path::new("-") {
        std::io::stdout().lock().write_all(&bytes)?;
        return Ok(());
    }
    std::fs::write(out, &bytes)?;
    if ctx.human {
        println!(
            "{id}: wrote {} bytes to {}{}",
            bytes.len(),
            out.display(),
            if verify { ", verified" } else { "" }
        );
    } else {
        ctx.emit(&json!({ "model": id, "out": out, "bytes": bytes.len(), "verified": verify }));
    }
    Ok(())
}

fn refine(ctx: &Ctx, passes: usize) -> Outcome {
    if passes == 0 {
        return Err(Failure::Usage("--passes must be at least 1".into()));
    }
    let mut store = ctx.open()?;
    for r in store.refine_to_fixed_point(passes)? {
        print_refine(ctx, &r);
    }
    Ok(())
}

fn read_pairs(path: &Path) -> Result<Vec<TrainingPair>, Failure> {
    let mut reader = csv::Reader::from_path(path)?;
    Ok(reader.deserialize().collect::<Result<Vec<TrainingPair>, _>>()?)
}

#[allow(clippy::too_many_arguments)]
fn fit_cmd(
    ctx: &Ctx,
    csv: Option<PathBuf>,
    synthesize: Option<usize>,
    elements: usize,
    seed: u64,
    codec: Option<CodecId>,
    pairs_out: Option<PathBuf>,
    save: bool,
) -> Outcome {
    let mut store = if save { Some(ctx.open()?) } else { None };
    let codec = codec
        .or_else(|| store.as_ref().map(|s| s.config().codec))
        .unwrap_or(CodecId::Fmpp);
    if !codec.is_delta() {
        return Err(Failure::Usage(format!("cannot fit coefficients for codec {codec}")));
    }
    let sketch = store
        .as_ref()
        .map(|s| s.config().sketch)
        .or_else(|| ctx.config.as_ref().map(|c| c.sketch))
        .unwrap_or_default();
    let pairs = match (csv, synthesize) {
        (Some(path), None) => read_pairs(&path)?,
        (None, Some(n)) => synth::training_pairs(codec, n, elements, &sketch, seed)?,
        _ => return Err(Failure::Usage("fit needs either a CSV path or --synthesize N".into())),
    };
    if let Some(path) = pairs_out {
        let mut w = csv::Writer::from_path(path)?;
        for p in &pairs {
            w.serialize(p)?;
        }
        w.flush()?;
    }
    let (train, holdout) = holdout_split(&pairs, 5);
    let coeffs = fit(&train)?;
    let acc = evaluate(&coeffs, &holdout);
    let record = CoefficientRecord {
        codec,
        coeffs,
        corpus: corpus_digest(&pairs),
    };
    if let Some(s) = store.as_mut() {
        s.set_coefficients(&record)?;
    }
    if ctx.human {
        print!("{}", record.to_text());
        println!(
            "holdout n={} r={:.4} P50={:.2}pp P90={:.2}pp P99={:.2}pp",
            acc.count,
            acc.pearson,
            acc.p50 * 100.0,
            acc.p90 * 100.0,
            acc.p99 * 100.0
        );
    } else {
        ctx.emit(&json!({
            "codec": codec,
            "coefficients": coeffs,
            "corpus": record.corpus,
            "pairs": pairs.len(),
            "train": train.len(),
            "holdout": acc,
            "saved": save,
        }));
    }
    Ok(())
}

fn verify(ctx: &Ctx) -> Outcome {
    let store = ctx.open()?;
    let report = store.verify();
    if ctx.human {
        println!(
            "{} models, {} tensors checked, {} errors",
            report.models_checked,
            report.tensors_checked,
            report.errors.len()
        );
        for e in &report.errors {
            println!("  {e}");
        }
    } else {
        ctx.emit(&report);
    }
    if report.ok() {
        Ok(())
    } else {
        Err(Failure::Integrity(format!(
            "{} verification errors",
            report.errors.len()
        )))
    }
}

fn stats(ctx: &Ctx) -> Outcome {
    let store = ctx.open()?;
    let s = store.stats()?;
    if ctx.human {
        println!("models            {}", s.models);
        println!(
            "tensors           {} ({} unique, {} dedup)",
            s.tensors, s.unique_tensors, s.dedup_count
        );
        println!("raw bytes         {}", s.raw_bytes);
        println!("stored bytes      {}", s.stored_bytes);
        println!("reduction ratio   {:.4}", s.reduction_ratio);
        println!("metadata overhead {:.4}%", s.metadata_overhead * 100.0);
        println!("clusters          {}", s.clusters.len());
    } else {
        ctx.emit(&s);
    }
    Ok(())
}
