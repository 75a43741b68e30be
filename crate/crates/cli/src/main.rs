//! `termseek`: spoken term detection over CTC grapheme posterior grids.
//!
//! Subcommands cover the whole pipeline: `synth` generates a desk-scale
//! corpus, `decode` turns posterior grids into grapheme confusion networks,
//! `stitch` reassembles sliding-window grids, `train` bootstraps queries
//! from transcripts and fits the model, `index` precomputes document
//! embeddings, `search` emits scored hits, and `eval` scores them with the
//! TWV family of metrics.
//!
//! Exit codes: 1 usage, 2 bad data, 3 internal error. Every command prints
//! its effective configuration and seed, and persists them alongside the
//! outputs.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use config::RunConfig;
use termseek::cn;
use termseek::eval;
use termseek::grid;
use termseek::nn;
use termseek::search;
use termseek::synth;
use termseek::train;

#[derive(Parser)]
#[command(name = "termseek", version, about = "Spoken term detection toolkit")]
struct Cli {
    /// JSON run configuration; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed funneled into every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for data-parallel document processing (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decode posterior grids into a confusion-network corpus (JSON lines).
    Decode(DecodeArgs),
    /// Stitch sliding-window grids back into one grid, or emit window spans.
    Stitch(StitchArgs),
    /// Generate a synthetic corpus: grids, transcripts, references, terms.
    Synth(SynthArgs),
    /// Bootstrap training queries from transcripts and train the model.
    Train(TrainArgs),
    /// Precompute document embeddings into a search index.
    Index(IndexArgs),
    /// Search indexed documents for terms and write scored hits.
    Search(SearchArgs),
    /// Score hits against references with TWV metrics.
    Eval(EvalArgs),
}

#[derive(Args)]
struct DecodeArgs {
    /// GPG1 posterior-grid files.
    #[arg(required = true)]
    grids: Vec<PathBuf>,
    /// Output confusion-network corpus (JSON lines).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StitchArgs {
    /// Window grids in span order (not needed with --emit-spans).
    grids: Vec<PathBuf>,
    /// JSON file with [[start, length], ...] window spans.
    #[arg(long)]
    spans: Option<PathBuf>,
    /// Output grid file, or spans file with --emit-spans.
    #[arg(long)]
    out: PathBuf,
    /// Emit window spans for a signal of --total-frames instead of stitching.
    #[arg(long, default_value_t = false)]
    emit_spans: bool,
    #[arg(long)]
    total_frames: Option<usize>,
    #[arg(long, default_value_t = cn::DEFAULT_WINDOW_FRAMES)]
    window: usize,
    #[arg(long, default_value_t = cn::DEFAULT_OVERLAP_FRAMES)]
    overlap: usize,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for grids/, transcripts, references and term lists.
    #[arg(long)]
    outdir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Confusion-network corpus (JSON lines) of the training documents.
    #[arg(long)]
    corpus: PathBuf,
    /// Word transcripts TSV used to bootstrap training queries.
    #[arg(long)]
    transcripts: PathBuf,
    /// Output directory for the model checkpoint.
    #[arg(long)]
    outdir: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    masking_n: Option<usize>,
    #[arg(long)]
    peak_lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct IndexArgs {
    /// Model checkpoint directory.
    #[arg(long)]
    model: PathBuf,
    /// Confusion-network corpus (JSON lines) to index.
    #[arg(long)]
    corpus: PathBuf,
    /// Output index directory.
    #[arg(long)]
    outdir: PathBuf,
}

#[derive(Args)]
struct SearchArgs {
    /// Index directory built by `index`.
    #[arg(long)]
    index: PathBuf,
    /// Model checkpoint directory.
    #[arg(long)]
    model: PathBuf,
    /// Term list, one term per line.
    #[arg(long)]
    terms: PathBuf,
    /// Output hits TSV.
    #[arg(long)]
    out: PathBuf,
    /// Detection threshold on per-segment probabilities.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Hits TSV from `search`.
    #[arg(long)]
    hits: PathBuf,
    /// References TSV.
    #[arg(long)]
    refs: PathBuf,
    /// Total speech duration in seconds.
    #[arg(long)]
    t_speech: Option<f64>,
    /// docs.tsv from `synth`; durations are summed when --t-speech is absent.
    #[arg(long)]
    docs: Option<PathBuf>,
    /// atwv (fixed threshold) or mtwv (threshold sweep).
    #[arg(long, default_value = "mtwv")]
    mode: String,
    /// Decision threshold for atwv mode.
    #[arg(long)]
    threshold: Option<f64>,
    /// Output report JSON.
    #[arg(long)]
    out: PathBuf,
}

/// Removes declared outputs unless the command finished cleanly.
struct OutputGuard {
    paths: Vec<PathBuf>,
    armed: bool,
}

impl OutputGuard {
    fn new() -> Self {
        OutputGuard { paths: Vec::new(), armed: true }
    }

    fn add(&mut self, path: &Path) {
        self.paths.push(path.to_path_buf());
    }

    fn disarm(&mut self) {
        self.armed = false;
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if !self.armed {
            return;
        }
        for p in &self.paths {
            if p.is_dir() {
                let _ = std::fs::remove_dir_all(p);
            } else if p.exists() {
                let _ = std::fs::remove_file(p);
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Keep clap's help/version on stdout with success, everything
            // else is a usage error.
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };

    let jobs = if cli.jobs == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    } else {
        cli.jobs
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
        eprintln!("error: cannot build thread pool: {e}");
        return ExitCode::from(3);
    }

    let mut config = match &cli.config {
        Some(path) => match RunConfig::load(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        },
        None => RunConfig::default(),
    };
    config.funnel_seed(cli.seed);

    match run(&cli, config) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(classify(&e))
        }
    }
}

/// 2 for data problems, 3 for internal failures.
fn classify(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<termseek::Error>() {
        Some(termseek::Error::NonFinite(_)) => 3,
        Some(_) => 2,
        None => {
            if e.downcast_ref::<std::io::Error>().is_some() {
                2
            } else {
                3
            }
        }
    }
}

fn announce(config: &RunConfig, what: &str) {
    eprintln!(
        "termseek {what}: seed {} | effective config: {}",
        config.seed,
        serde_json::to_string(config).expect("config serializes")
    );
}

fn run(cli: &Cli, config: RunConfig) -> anyhow::Result<()> {
    match &cli.command {
        Command::Decode(args) => cmd_decode(args, config),
        Command::Stitch(args) => cmd_stitch(args, config),
        Command::Synth(args) => cmd_synth(args, config),
        Command::Train(args) => cmd_train(args, config),
        Command::Index(args) => cmd_index(args, config),
        Command::Search(args) => cmd_search(args, config),
        Command::Eval(args) => cmd_eval(args, config),
    }
}

fn doc_id_of(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "doc".into())
}

fn cmd_decode(args: &DecodeArgs, config: RunConfig) -> anyhow::Result<()> {
    announce(&config, "decode");
    let mut guard = OutputGuard::new();
    guard.add(&args.out);

    let docs: Vec<(String, cn::GraphemeConfusionNetwork)> = args
        .grids
        .par_iter()
        .map(|path| -> anyhow::Result<_> {
            let mut g = grid::load_grid(path)
                .with_context(|| path.display().to_string())?;
            if g.vocab.separator_index().is_some() {
                g = grid::merge_separator_into_blank(&g)?;
            }
            let cnet = cn::build_confusion_network(&g)
                .with_context(|| path.display().to_string())?;
            Ok((doc_id_of(path), cnet))
        })
        .collect::<anyhow::Result<_>>()?;

    cn::write_gcn_corpus(&args.out, &docs)?;
    config.persist(&args.out)?;
    eprintln!("decoded {} grids -> {}", docs.len(), args.out.display());
    guard.disarm();
    Ok(())
}

fn cmd_stitch(args: &StitchArgs, config: RunConfig) -> anyhow::Result<()> {
    announce(&config, "stitch");
    let mut guard = OutputGuard::new();
    guard.add(&args.out);

    if args.emit_spans {
        let total = args
            .total_frames
            .ok_or_else(|| anyhow::anyhow!("--emit-spans requires --total-frames"))?;
        let spans = cn::window_spans(total, args.window, args.overlap)?;
        std::fs::write(&args.out, serde_json::to_string_pretty(&spans)?)?;
        eprintln!("{} spans -> {}", spans.len(), args.out.display());
        guard.disarm();
        return Ok(());
    }

    let spans_path =
        args.spans.as_ref().ok_or_else(|| anyhow::anyhow!("--spans is required"))?;
    let spans: Vec<(usize, usize)> = serde_json::from_str(&std::fs::read_to_string(spans_path)?)
        .map_err(|e| anyhow::anyhow!("invalid spans file: {e}"))?;
    let grids: Vec<grid::PosteriorGrid> = args
        .grids
        .iter()
        .map(|p| grid::load_grid(p).with_context(|| p.display().to_string()))
        .collect::<anyhow::Result<_>>()?;
    let stitched = cn::stitch(&grids, &spans)?;
    grid::save_grid(&stitched, &args.out)?;
    config.persist(&args.out)?;
    eprintln!(
        "stitched {} windows into {} frames -> {}",
        grids.len(),
        stitched.num_frames(),
        args.out.display()
    );
    guard.disarm();
    Ok(())
}

fn cmd_synth(args: &SynthArgs, config: RunConfig) -> anyhow::Result<()> {
    announce(&config, "synth");
    std::fs::create_dir_all(&args.outdir)?;
    let mut guard = OutputGuard::new();
    guard.add(&args.outdir);

    let corpus = synth::gen_corpus(&config.synth)?;
    let grids_dir = args.outdir.join("grids");
    std::fs::create_dir_all(&grids_dir)?;

    let rendered: Vec<(String, grid::PosteriorGrid)> = corpus
        .docs
        .par_iter()
        .map(|doc| (doc.doc_id.clone(), synth::render_grid(doc, &config.synth)))
        .collect();
    for (doc_id, g) in &rendered {
        grid::save_grid(g, &grids_dir.join(format!("{doc_id}.gpg1")))?;
    }

    train::write_transcripts(&args.outdir.join("transcripts.tsv"), &corpus.transcripts)?;
    eval::write_references(&args.outdir.join("references.tsv"), &corpus.references)?;
    std::fs::write(
        args.outdir.join("terms_iv.txt"),
        corpus.terms_in_lexicon.join("\n") + "\n",
    )?;
    std::fs::write(
        args.outdir.join("terms_oov.txt"),
        corpus.terms_held_out.join("\n") + "\n",
    )?;
    let mut docs_tsv = String::new();
    for doc in &corpus.docs {
        let dur = doc.total_frames as f64 * config.synth.frame_duration_s;
        docs_tsv.push_str(&format!("{}\t{}\t{}\n", doc.doc_id, doc.total_frames, dur));
    }
    std::fs::write(args.outdir.join("docs.tsv"), docs_tsv)?;
    config.persist_in_dir(&args.outdir)?;
    eprintln!(
        "synthesized {} docs, {} transcript tokens, {} references -> {}",
        corpus.docs.len(),
        corpus.transcripts.len(),
        corpus.references.len(),
        args.outdir.display()
    );
    guard.disarm();
    Ok(())
}

fn cmd_train(args: &TrainArgs, mut config: RunConfig) -> anyhow::Result<()> {
    if let Some(steps) = args.steps {
        config.train.steps = steps;
    }
    if let Some(n) = args.masking_n {
        config.train.masking_n = n;
    }
    if let Some(lr) = args.peak_lr {
        config.train.peak_lr = lr;
    }
    if let Some(b) = args.batch_size {
        config.train.batch_size = b;
    }
    announce(&config, "train");

    let corpus = cn::read_gcn_corpus(&args.corpus)?;
    let tokens = train::read_transcripts(&args.transcripts)?;
    let docs: Vec<train::TrainDoc> = corpus
        .into_iter()
        .map(|(doc_id, cnet)| train::TrainDoc {
            tokens: tokens.iter().filter(|t| t.doc_id == doc_id).cloned().collect(),
            doc_id,
            cnet,
        })
        .collect();

    std::fs::create_dir_all(&args.outdir)?;
    let mut guard = OutputGuard::new();
    guard.add(&args.outdir);

    let mut last = std::time::Instant::now();
    let outcome = train::train_with_progress(&docs, &config.train, |p| {
        if last.elapsed().as_secs() >= 10 || p.step == p.steps || p.step == 1 {
            eprintln!("step {}/{} loss {:.4} lr {:.3e}", p.step, p.steps, p.loss, p.lr);
            last = std::time::Instant::now();
        }
    })?;

    nn::save_checkpoint(&outcome.params, &args.outdir)?;
    std::fs::write(
        args.outdir.join("train-stats.json"),
        serde_json::to_string_pretty(&outcome.stats)?,
    )?;
    config.persist_in_dir(&args.outdir)?;
    eprintln!(
        "trained {} steps on {} queries ({} dropped); checkpoint -> {}",
        outcome.stats.steps_run,
        outcome.stats.queries,
        outcome.stats.dropped_queries,
        args.outdir.display()
    );
    guard.disarm();
    Ok(())
}

fn cmd_index(args: &IndexArgs, config: RunConfig) -> anyhow::Result<()> {
    announce(&config, "index");
    let params = nn::load_checkpoint(&args.model)?;
    let corpus = cn::read_gcn_corpus(&args.corpus)?;

    std::fs::create_dir_all(&args.outdir)?;
    let mut guard = OutputGuard::new();
    guard.add(&args.outdir);

    let entries: Vec<search::DocumentIndexEntry> = corpus
        .par_iter()
        .map(|(doc_id, cnet)| search::index_document(&params, doc_id, cnet))
        .collect::<termseek::Result<_>>()?;
    let index = search::Index { entries };
    search::save_index(&index, &args.outdir)?;
    config.persist_in_dir(&args.outdir)?;
    eprintln!("indexed {} documents -> {}", index.entries.len(), args.outdir.display());
    guard.disarm();
    Ok(())
}

fn read_terms(path: &Path) -> anyhow::Result<Vec<String>> {
    let mut terms: Vec<String> = std::fs::read_to_string(path)?
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect();
    terms.dedup();
    if terms.is_empty() {
        anyhow::bail!("term list {} is empty", path.display());
    }
    Ok(terms)
}

fn cmd_search(args: &SearchArgs, mut config: RunConfig) -> anyhow::Result<()> {
    if let Some(t) = args.threshold {
        config.search.detect_threshold = t;
    }
    announce(&config, "search");
    let params = nn::load_checkpoint(&args.model)?;
    let index = search::load_index(&args.index)?;
    let terms = read_terms(&args.terms)?;

    let mut guard = OutputGuard::new();
    guard.add(&args.out);

    let per_term: Vec<Vec<search::Hit>> = terms
        .par_iter()
        .map(|term| search::search(&index, &params, term, config.search.detect_threshold))
        .collect::<termseek::Result<_>>()?;
    let mut hits: Vec<search::Hit> = per_term.into_iter().flatten().collect();
    search::sort_hits(&mut hits);
    search::write_hits(&args.out, &hits)?;
    config.persist(&args.out)?;
    eprintln!(
        "searched {} terms over {} documents: {} hits -> {}",
        terms.len(),
        index.entries.len(),
        hits.len(),
        args.out.display()
    );
    guard.disarm();
    Ok(())
}

fn cmd_eval(args: &EvalArgs, config: RunConfig) -> anyhow::Result<()> {
    announce(&config, "eval");
    let hits = search::read_hits(&args.hits)?;
    let refs = eval::read_references(&args.refs)?;
    let t_speech = match (args.t_speech, &args.docs) {
        (Some(t), _) => t,
        (None, Some(docs)) => {
            let mut total = 0.0;
            for (i, line) in std::fs::read_to_string(docs)?.lines().enumerate() {
                let fields: Vec<&str> = line.split('\t').collect();
                if fields.len() != 3 {
                    anyhow::bail!("docs file line {}: expected 3 fields", i + 1);
                }
                total += fields[2]
                    .parse::<f64>()
                    .map_err(|_| anyhow::anyhow!("docs file line {}: bad duration", i + 1))?;
            }
            total
        }
        (None, None) => anyhow::bail!("either --t-speech or --docs is required"),
    };

    let mut guard = OutputGuard::new();
    guard.add(&args.out);

    let assignment = eval::match_hits(&hits, &refs, config.eval.tolerance_s);
    let report = match args.mode.as_str() {
        "mtwv" => eval::evaluate_mtwv(&assignment, config.eval.beta_fa, t_speech, config.eval.tolerance_s)?,
        "atwv" => {
            let theta = args
                .threshold
                .ok_or_else(|| anyhow::anyhow!("atwv mode requires --threshold"))?;
            eval::evaluate_atwv(&assignment, theta, config.eval.beta_fa, t_speech, config.eval.tolerance_s)?
        }
        other => anyhow::bail!("unknown mode {other:?}; use atwv or mtwv"),
    };
    std::fs::write(&args.out, serde_json::to_string_pretty(&report)?)?;
    config.persist(&args.out)?;
    match args.mode.as_str() {
        "mtwv" => eprintln!(
            "MTWV {:.4} at theta {:?} over {} terms -> {}",
            report.twv,
            report.theta,
            report.per_term.len(),
            args.out.display()
        ),
        _ => eprintln!(
            "ATWV {:.4} at theta {} over {} terms -> {}",
            report.twv,
            report.theta.unwrap_or(f64::NAN),
            report.per_term.len(),
            args.out.display()
        ),
    }
    guard.disarm();
    Ok(())
}
