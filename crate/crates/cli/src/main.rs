use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde_json::json;

use jointrank_core::harness::{
    self, bench, cost_model, evaluate, load_dataset, synth_dataset, AnalyticCost, Checkpoint, CostReport, EvalOptions,
    MeasuredCost, RankingInstance, Schedule, SynthSpec, TrainConfig,
};
use jointrank_core::metrics::MetricsReport;
use jointrank_core::union::{overlap_stats, OverlapStats};
use jointrank_core::{Error, LossKind, Vocabulary};

#[derive(Parser)]
#[command(name = "jointrank", version, about = "Joint listwise ranking over a shared token union")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a vocabulary from the queries and items of a dataset.
    BuildVocab {
        #[arg(long)]
        data: PathBuf,
        /// Output file, one term per line.
        #[arg(long)]
        out: PathBuf,
        /// Total size including the four reserved tokens.
        #[arg(long, default_value_t = 30522)]
        max_size: usize,
    },
    /// Write a synthetic dataset with planted relevance and overlap.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint plus the loss log.
    Train(TrainArgs),
    /// Score a dataset with a checkpoint and report ranking metrics.
    Eval(EvalArgs),
    /// Count joint vs pointwise matmul FLOPs and wall-clock on a dataset.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Union budget; defaults to the checkpoint's.
        #[arg(long)]
        max_union: Option<usize>,
    },
    /// Token-overlap statistics `m / N_u` of a dataset.
    Stats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Per-item token cap `L`.
        #[arg(long, default_value_t = 128)]
        cap: usize,
    },
    /// Analytic joint vs pointwise attention cost.
    Cost {
        #[arg(long)]
        l_q: f64,
        #[arg(long)]
        l_k: f64,
        #[arg(long)]
        n: f64,
        /// Compression factor `C`.
        #[arg(long)]
        c: f64,
        #[arg(long, default_value_t = 1.0)]
        layers: f64,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_queries: Option<usize>,
    #[arg(long)]
    n_items: Option<usize>,
    #[arg(long)]
    item_len: Option<usize>,
    #[arg(long)]
    query_len: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    /// 0 for disjoint items, 1 for identical items.
    #[arg(long)]
    overlap: Option<f64>,
    #[arg(long)]
    distinct_items: bool,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// JSON training config; flags given on the command line override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    loss: Option<LossKind>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    schedule: Option<Schedule>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    n_items: Option<usize>,
    #[arg(long)]
    max_union: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    reinjection: Option<bool>,
    #[arg(long)]
    sorted_tokens: Option<bool>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ff_dim: Option<usize>,
    #[arg(long)]
    max_positions: Option<usize>,
    /// Embedding rows; defaults to the vocabulary size.
    #[arg(long)]
    vocab_size: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,3,5,10")]
    ks: Vec<usize>,
    /// Union budget; defaults to the checkpoint's.
    #[arg(long)]
    max_union: Option<usize>,
    /// Defaults to the checkpoint's setting.
    #[arg(long)]
    reinjection: Option<bool>,
    /// Also score each pair on its own.
    #[arg(long)]
    pointwise: bool,
    /// Sort item tokens before pointwise scoring; defaults to the checkpoint's setting.
    #[arg(long)]
    sorted_tokens: Option<bool>,
    /// Fraction of positives kept above the accuracy threshold.
    #[arg(long, default_value_t = 0.8)]
    retain: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<Error>().map_or("cli", Error::kind);
            let record = json!({ "error": kind, "message": format!("{e:#}") });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::BuildVocab { data, out, max_size } => build_vocab(&data, &out, max_size),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Bench { checkpoint, data, out_dir, max_union } => run_bench(&checkpoint, &data, &out_dir, max_union),
        Command::Stats { data, vocab, out_dir, cap } => stats(&data, &vocab, &out_dir, cap),
        Command::Cost { l_q, l_k, n, c, layers, out_dir } => cost(l_q, l_k, n, c, layers, out_dir.as_deref()),
    }
}

fn build_vocab(data: &Path, out: &Path, max_size: usize) -> anyhow::Result<()> {
    if max_size < 5 {
        return Err(Error::Invalid(format!("max_size must be at least 5, got {max_size}")).into());
    }
    let raw = harness::dataset::read_raw(data).with_context(|| format!("loading {}", data.display()))?;
    let vocab = Vocabulary::build(&harness::dataset::corpus_texts(&raw), max_size);
    vocab.save(out)?;
    info!("wrote {} terms ({} with reserved) to {}", vocab.terms().len(), vocab.len(), out.display());
    Ok(())
}

fn synth(a: SynthArgs) -> anyhow::Result<()> {
    let d = SynthSpec::default();
    let spec = SynthSpec {
        n_queries: a.n_queries.unwrap_or(d.n_queries),
        n_items: a.n_items.unwrap_or(d.n_items),
        item_len: a.item_len.unwrap_or(d.item_len),
        query_len: a.query_len.unwrap_or(d.query_len),
        vocab_size: a.vocab_size.unwrap_or(d.vocab_size),
        overlap: a.overlap.unwrap_or(d.overlap),
        distinct_items: a.distinct_items,
        noise: a.noise.unwrap_or(d.noise),
        seed: a.seed.unwrap_or(d.seed),
    };
    let data = synth_dataset(&spec)?;
    harness::dataset::write_raw(&a.out, &data)?;
    info!("wrote {} queries to {} (planted m/N_u {:.4})", data.len(), a.out.display(), spec.planted_ratio());
    Ok(())
}

fn train_config(a: &TrainArgs, vocab: &Vocabulary) -> anyhow::Result<TrainConfig> {
    let mut c = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<TrainConfig>(&text).map_err(Error::from)?
        }
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($field:ident).+ <- $flag:ident) => {
            if let Some(v) = a.$flag {
                c.$($field).+ = v;
            }
        };
    }
    set!(loss <- loss);
    set!(learning_rate <- learning_rate);
    set!(schedule <- schedule);
    set!(steps <- steps);
    set!(batch_size <- batch_size);
    set!(n_items <- n_items);
    set!(max_union <- max_union);
    set!(seed <- seed);
    set!(reinjection <- reinjection);
    set!(sorted_tokens <- sorted_tokens);
    set!(weight_decay <- weight_decay);
    set!(encoder.layers <- layers);
    set!(encoder.d_model <- d_model);
    set!(encoder.heads <- heads);
    set!(encoder.ff_dim <- ff_dim);
    set!(encoder.max_positions <- max_positions);
    c.encoder.vocab_size = a.vocab_size.unwrap_or(vocab.len());
    if c.encoder.vocab_size < vocab.len() {
        return Err(Error::Invalid(format!(
            "vocab_size {} is smaller than the vocabulary ({})",
            c.encoder.vocab_size,
            vocab.len()
        ))
        .into());
    }
    c.validate()?;
    Ok(c)
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let vocab = read_vocab(&a.vocab)?;
    let config = train_config(&a, &vocab)?;
    let dataset = read_dataset(&a.data, &vocab)?;
    fs::create_dir_all(&a.out_dir)?;
    write_json(&a.out_dir.join("config.json"), &serde_json::to_value(&config)?)?;
    let outcome = harness::train(&config, &dataset)?;

    let mut csv = String::from("step,loss,lr,skipped\n");
    for s in &outcome.log {
        let loss = s.loss.map_or(String::new(), |l| l.to_string());
        csv.push_str(&format!("{},{},{},{}\n", s.step, loss, s.lr, s.skipped));
    }
    fs::write(a.out_dir.join("train_log.csv"), csv)?;
    write_json(
        &a.out_dir.join("train_log.json"),
        &json!({ "skipped_instances": outcome.skipped_instances, "steps": outcome.log }),
    )?;
    let ck = Checkpoint::new(config.clone(), &vocab, outcome.log.len(), outcome.model.params);
    ck.save(a.out_dir.join("checkpoint.json"))?;
    let last = outcome.log.iter().rev().find_map(|s| s.loss);
    info!(
        "trained {} steps, skipped {} degenerate query visits, final loss {}",
        outcome.log.len(),
        outcome.skipped_instances,
        last.map_or("n/a".to_string(), |l| format!("{l:.6}"))
    );
    Ok(())
}

fn read_dataset(path: &Path, vocab: &Vocabulary) -> anyhow::Result<Vec<RankingInstance>> {
    load_dataset(path, vocab).with_context(|| format!("loading {}", path.display()))
}

fn read_vocab(path: &Path) -> anyhow::Result<Vocabulary> {
    Vocabulary::load(path).with_context(|| format!("loading {}", path.display()))
}

fn load_checkpoint(path: &Path, data: &Path) -> anyhow::Result<(Checkpoint, Vec<RankingInstance>)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let dataset = read_dataset(data, &ck.vocabulary())?;
    Ok((ck, dataset))
}

fn metrics_csv(rows: &[(&str, &MetricsReport)]) -> String {
    let mut out = format!("mode,{}\n", rows[0].1.csv_header());
    for (mode, r) in rows {
        out.push_str(&format!("{mode},{}\n", r.csv_row()));
    }
    out
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let (ck, dataset) = load_checkpoint(&a.checkpoint, &a.data)?;
    let opts = EvalOptions {
        ks: a.ks,
        max_union: a.max_union.unwrap_or(ck.config.max_union),
        reinjection: a.reinjection.unwrap_or(ck.config.reinjection),
        pointwise: a.pointwise,
        sorted_tokens: a.sorted_tokens.unwrap_or(ck.config.sorted_tokens),
        retain: a.retain,
    };
    let report = evaluate(&ck.model()?, &dataset, &opts)?;
    fs::create_dir_all(&a.out_dir)?;

    let mut rows = vec![("joint", &report.joint)];
    if let Some(p) = &report.pointwise {
        rows.push(("pointwise", p));
    }
    fs::write(a.out_dir.join("metrics.csv"), metrics_csv(&rows))?;
    write_json(
        &a.out_dir.join("metrics.json"),
        &json!({
            "options": opts,
            "joint": report.joint,
            "pointwise": report.pointwise,
            "truncation": report.truncation,
        }),
    )?;
    let mut lines = String::new();
    for r in &report.records {
        lines.push_str(&serde_json::to_string(&json!({ "mode": "joint", "record": r }))?);
        lines.push('\n');
    }
    for r in report.pointwise_records.iter().flatten() {
        lines.push_str(&serde_json::to_string(&json!({ "mode": "pointwise", "record": r }))?);
        lines.push('\n');
    }
    fs::write(a.out_dir.join("records.jsonl"), lines)?;

    let t = report.truncation;
    if t.queries_truncated > 0 {
        warn!(
            "union budget {} exceeded on {} queries: {} tokens dropped, {} items left without union tokens",
            opts.max_union, t.queries_truncated, t.tokens_dropped, t.items_fully_truncated
        );
    }
    print!("{}", metrics_csv(&rows));
    Ok(())
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn run_bench(checkpoint: &Path, data: &Path, out_dir: &Path, max_union: Option<usize>) -> anyhow::Result<()> {
    let (ck, dataset) = load_checkpoint(checkpoint, data)?;
    if dataset.is_empty() {
        return Err(Error::Invalid("bench needs a nonempty dataset".into()).into());
    }
    let max_union = max_union.unwrap_or(ck.config.max_union);
    let measured: MeasuredCost = bench(&ck.model()?, &dataset, max_union, ck.config.reinjection)?;
    let analytic = cost_model(
        mean(dataset.iter().map(|d| d.query.len() as f64)),
        mean(dataset.iter().flat_map(|d| d.items.iter().map(|i| i.len() as f64))),
        mean(dataset.iter().map(|d| d.n_items() as f64)),
        measured.mean_compression.max(1.0),
        ck.config.encoder.layers as f64,
    )?;
    let report = CostReport { analytic, measured: Some(measured.clone()) };
    fs::create_dir_all(out_dir)?;
    write_json(&out_dir.join("bench.json"), &serde_json::to_value(&report)?)?;
    let csv = format!("{}\n{}\n", MeasuredCost::CSV_HEADER, measured.csv_row());
    fs::write(out_dir.join("bench.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn stats(data: &Path, vocab: &Path, out_dir: &Path, cap: usize) -> anyhow::Result<()> {
    let vocab = read_vocab(vocab)?;
    let dataset = read_dataset(data, &vocab)?;
    let queries: Vec<_> = dataset.iter().map(|d| d.items.clone()).collect();
    let s: OverlapStats = overlap_stats(&queries, cap)?;
    fs::create_dir_all(out_dir)?;
    let csv = format!("{}\n{}\n", OverlapStats::CSV_HEADER, s.csv_row());
    fs::write(out_dir.join("stats.csv"), &csv)?;
    write_json(
        &out_dir.join("stats.json"),
        &json!({
            "cap": s.cap,
            "mean_total_tokens": s.mean_total_tokens,
            "mean_union_size": s.mean_union_size,
            "ratio": s.ratio,
            "skipped_queries": s.skipped_queries,
        }),
    )?;
    print!("{csv}");
    Ok(())
}

fn cost(l_q: f64, l_k: f64, n: f64, c: f64, layers: f64, out_dir: Option<&Path>) -> anyhow::Result<()> {
    let a: AnalyticCost = cost_model(l_q, l_k, n, c, layers)?;
    let csv = format!("{}\n{}\n", AnalyticCost::CSV_HEADER, a.csv_row());
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("cost.csv"), &csv)?;
        write_json(&dir.join("cost.json"), &serde_json::to_value(CostReport { analytic: a, measured: None })?)?;
    }
    print!("{csv}");
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}
