use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ss_core::clock::SystemClock;
use ss_core::cluster::{Cluster, Master};
use ss_core::config::ClusterConfig;
use ss_core::log::UpdateLog;
use ss_core::memindex::MergePolicy;
use ss_core::schema::{parse_schema, Document, FieldKind, IndexSchema, UpdatePath, Value};
use ss_core::segment::segment_prefix;
use ss_core::store::{FsStore, ObjectStore};
use ss_harness::contention::{bench_contention, ContentionParams};
use ss_harness::freshness::{bench_freshness, FreshnessParams};
use ss_harness::merge::{bench_merge_policy, parse_policy};
use ss_harness::report::BenchReport;
use ss_harness::waf::{bench_waf, standard_docs};

#[derive(Parser)]
#[command(name = "sscli", about = "Drive a local index and run benchmarks")]
struct Cli {
    /// Data directory holding the schema, metadata, store and log.
    #[arg(long, global = true, default_value = "ssdata")]
    data: PathBuf,
    /// Cluster config (TOML). Defaults to <data>/config.toml when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create an index from a schema file.
    CreateIndex {
        #[arg(long)]
        schema: PathBuf,
        /// Comma-separated shard boundary keys.
        #[arg(long, value_delimiter = ',')]
        boundaries: Vec<String>,
    },
    /// Publish JSON-lines documents and flush them into segments.
    Ingest {
        #[arg(long)]
        file: PathBuf,
    },
    /// Publish an in-place field update.
    Update {
        #[arg(long)]
        field: String,
        #[arg(long)]
        key: String,
        #[arg(long)]
        value: String,
    },
    /// Run a query against freshly loaded search nodes.
    Query {
        text: String,
        #[arg(long, default_value_t = 10)]
        limit: usize,
    },
    /// Print the shard table, log and store counters.
    Stats,
    /// Run a benchmark and write its JSON report.
    Bench(BenchArgs),
}

#[derive(Args)]
struct BenchArgs {
    #[command(subcommand)]
    which: Bench,
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Bench {
    MergePolicy {
        /// immediate, no-merge, logarithmic or all.
        #[arg(long, default_value = "all")]
        policy: String,
        #[arg(long, value_delimiter = ',', default_value = "256,1024,4096")]
        n: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        unit: u32,
    },
    Waf {
        #[arg(long, default_value_t = 20_000)]
        docs: u64,
        #[arg(long, default_value_t = 256)]
        sim_n: usize,
    },
    Contention {
        #[arg(long, default_value_t = 200.0)]
        qps: f64,
        #[arg(long, default_value_t = 2000.0)]
        ingest_rate: f64,
        #[arg(long, default_value_t = 3000)]
        duration_ms: u64,
    },
    Freshness {
        #[arg(long, default_value_t = 100)]
        updates: usize,
        /// Multiplier for refresh age, poll interval and the segment-path bound.
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
    },
}

fn load_config(cli: &Cli) -> Result<ClusterConfig> {
    let path = cli.config.clone().unwrap_or_else(|| cli.data.join("config.toml"));
    if !path.exists() {
        return Ok(ClusterConfig::default());
    }
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(ClusterConfig::from_toml(&text)?)
}

fn load_schema(data: &Path) -> Result<Arc<IndexSchema>> {
    let path = data.join("schema.json");
    let text = fs::read_to_string(&path).with_context(|| format!("no index at {} (run create-index)", data.display()))?;
    Ok(Arc::new(parse_schema(&text)?))
}

fn open_cluster(cli: &Cli) -> Result<Cluster> {
    let schema = load_schema(&cli.data)?;
    let config = load_config(cli)?;
    let store_root = config.store.root.clone().unwrap_or_else(|| cli.data.join("store"));
    let log_root = config.log.root.clone().unwrap_or_else(|| cli.data.join("log"));
    let store: Arc<dyn ObjectStore> = Arc::new(FsStore::open(store_root)?);
    let log = Arc::new(UpdateLog::open(schema, log_root)?);
    let master = Arc::new(Master::open(cli.data.join("meta.json"), &[])?);
    Ok(Cluster::new(config, master, store, log, Arc::new(SystemClock))?)
}

fn parse_value(kind: FieldKind, raw: &str) -> Result<Value> {
    Ok(match kind {
        FieldKind::Int64 => Value::Int(raw.parse().with_context(|| format!("`{raw}` is not an integer"))?),
        FieldKind::Float64 => Value::Float(raw.parse().with_context(|| format!("`{raw}` is not a number"))?),
        FieldKind::Keyword | FieldKind::Text => Value::Str(raw.to_string()),
    })
}

fn emit(report: &BenchReport, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => {
            report.write(p)?;
            eprintln!("wrote {}", p.display());
        }
        None => println!("{}", report.to_json()),
    }
    Ok(())
}

fn run_bench(args: &BenchArgs) -> Result<()> {
    let seed = args.seed;
    let report = match &args.which {
        Bench::MergePolicy { policy, n, unit } => {
            let names: Vec<&str> =
                if policy == "all" { vec!["immediate", "no-merge", "logarithmic"] } else { vec![policy.as_str()] };
            let mut runs = Vec::new();
            for name in names {
                let p: MergePolicy = parse_policy(name, *unit).with_context(|| format!("unknown policy `{name}`"))?;
                for &docs in n {
                    if docs < u64::from(*unit) {
                        bail!("n must be at least unit");
                    }
                    runs.push(bench_merge_policy(p, docs, *unit)?);
                }
            }
            BenchReport::new("merge-policy", seed, serde_json::json!({"policy": policy, "n": n, "unit": unit}), runs)
        }
        Bench::Waf { docs, sim_n } => {
            let config = ClusterConfig::default();
            bench_waf(&standard_docs(seed, *docs), &config, *sim_n)?.report(seed, &config)
        }
        Bench::Contention { qps, ingest_rate, duration_ms } => {
            if *qps <= 0.0 || *ingest_rate < 0.0 {
                bail!("rates must be positive");
            }
            let params = ContentionParams::new(*qps, *ingest_rate, *duration_ms, seed);
            bench_contention(&params)?.report(&params)
        }
        Bench::Freshness { updates, scale } => {
            let params = FreshnessParams::new(*updates, *scale, seed);
            bench_freshness(&params)?.report(&params)
        }
    };
    emit(&report, args.out.as_deref())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::CreateIndex { schema, boundaries } => {
            let text = fs::read_to_string(schema).with_context(|| format!("reading {}", schema.display()))?;
            let parsed = parse_schema(&text)?;
            fs::create_dir_all(&cli.data)?;
            if cli.data.join("schema.json").exists() {
                bail!("an index already exists in {}", cli.data.display());
            }
            fs::write(cli.data.join("schema.json"), parsed.to_json())?;
            let config_path = cli.data.join("config.toml");
            if !config_path.exists() {
                fs::write(&config_path, load_config(&cli)?.to_toml())?;
            }
            let b: Vec<&str> = boundaries.iter().map(String::as_str).collect();
            let master = Master::open(cli.data.join("meta.json"), &b)?;
            println!("created index `{}` with {} shard(s)", parsed.index_name, master.active_shards().len());
        }
        Command::Ingest { file } => {
            let cluster = open_cluster(&cli)?;
            let reader = BufReader::new(fs::File::open(file).with_context(|| format!("opening {}", file.display()))?);
            let mut n = 0u64;
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let doc: Document = serde_json::from_str(&line).with_context(|| format!("line {}", i + 1))?;
                cluster.schema().validate_document(&doc).with_context(|| format!("line {}", i + 1))?;
                cluster.publish_doc(doc)?;
                n += 1;
            }
            let round = cluster.flush_write();
            if let Some((shard, e)) = round.errors.into_iter().next() {
                bail!("shard {shard}: {e} (documents stay in the log and upload on the next run)");
            }
            println!("ingested {n} document(s) into {} segment(s)", round.uploaded.len());
        }
        Command::Update { field, key, value } => {
            let cluster = open_cluster(&cli)?;
            let spec = cluster.schema().field(field)?;
            if spec.path != UpdatePath::InPlace {
                bail!("`{field}` is a segment-path field; re-ingest the full document instead");
            }
            let v = parse_value(spec.kind, value)?;
            let offset = cluster.publish_update(key, field, v)?;
            println!("published at offset {offset}");
        }
        Command::Query { text, limit } => {
            if *limit == 0 {
                bail!("--limit must be at least 1");
            }
            let cluster = open_cluster(&cli)?;
            cluster.tick_search()?;
            for hit in cluster.query(text, *limit)? {
                println!("{}", serde_json::json!({"key": hit.key, "score": hit.score}));
            }
        }
        Command::Stats => {
            let cluster = open_cluster(&cli)?;
            let mut shards = Vec::new();
            for s in cluster.master().shards() {
                let segments = cluster.store().list(&segment_prefix(s.shard_id), "")?.len();
                shards.push(serde_json::json!({"shard": s, "segments": segments}));
            }
            let topics: Vec<_> = cluster
                .log()
                .topic_names()
                .into_iter()
                .map(|t| {
                    let next = cluster.log().next_offset(&t).unwrap_or(0);
                    serde_json::json!({"topic": t, "next_offset": next})
                })
                .collect();
            let stats = serde_json::json!({
                "index": cluster.schema().index_name,
                "shards": shards,
                "topics": topics,
                "groups": cluster
                    .log()
                    .groups()
                    .into_iter()
                    .map(|(g, t, committed)| serde_json::json!({"group": g, "topic": t, "committed": committed}))
                    .collect::<Vec<_>>(),
            });
            println!("{}", serde_json::to_string_pretty(&stats)?);
        }
        Command::Bench(args) => run_bench(args)?,
    }
    Ok(())
}
