use std::error::Error;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use dystruct::calibration::{calibrate, read_records, write_records, FitConfig, Weights};
use dystruct::corpus::{self, CorpusItem};
use dystruct::decoder::RunConfig;
use dystruct::denoiser::toy::{generate_corpus, CorpusShape};
use dystruct::denoiser::{external, Denoiser, DenoiserPool, ExternalDenoiserClient, ToyConfig, ToyOracle};
use dystruct::harness::{
    self, emit_csv, emit_svg_plots, load_csv, run_benchmark, summarize, BenchConfig, MethodKind, MonotonicConfig,
    PairedOutcomes,
};
use dystruct::par::Parallelism;
use dystruct::partition::{
    blocks_from_cuts, enumerate_posterior, local_alphas, log_posterior, map_cuts, ENUMERATION_LIMIT,
};
use dystruct::scheduler::ScheduleMode;
use dystruct::TokenId;

type CliResult<T = ()> = Result<T, Box<dyn Error>>;

#[derive(Parser)]
#[command(
    name = "dystruct",
    version,
    about = "Structured decoding for masked diffusion language models"
)]
struct Cli {
    /// TOML file with run settings; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, env = "DYSTRUCT_SEED")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decode one prompt; prints the output token ids.
    Decode(DecodeArgs),
    /// Fit instability and boundary weights from decode trajectories.
    Calibrate(CalibrateArgs),
    /// Run methods over a corpus and write a results table.
    Bench(BenchArgs),
    /// Print the MAP partition (and the full posterior when small) for given
    /// edge scores.
    Partition(PartitionArgs),
    /// Paired significance test between two result tables.
    Stats(StatsArgs),
    /// Generate a toy corpus.
    Corpus(CorpusArgs),
    /// Serve the toy oracle over stdin/stdout using the wire protocol.
    ServeToy(ServeToyArgs),
}

#[derive(Args, Default)]
struct RunFlags {
    #[arg(long)]
    l_min: Option<usize>,
    #[arg(long)]
    l_max: Option<usize>,
    #[arg(long)]
    alpha0: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    t_min: Option<usize>,
    #[arg(long)]
    t_max: Option<usize>,
    #[arg(long)]
    r_weld: Option<usize>,
    #[arg(long)]
    weld_steps: Option<usize>,
    #[arg(long)]
    n_max: Option<usize>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long, value_enum)]
    schedule: Option<Schedule>,
    #[arg(long)]
    no_weld: bool,
    #[arg(long)]
    no_schedule: bool,
    /// Weights JSON produced by `calibrate`.
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Schedule {
    Static,
    Greedy,
    LeftToRight,
}

#[derive(Args)]
struct ModelFlags {
    /// Use the toy oracle built from this corpus (needs ground truth).
    #[arg(long, conflicts_with_all = ["spawn", "connect"])]
    toy: Option<PathBuf>,
    /// Spawn an external model speaking the wire protocol on stdin/stdout.
    #[arg(long)]
    spawn: Option<String>,
    #[arg(long = "spawn-arg", allow_hyphen_values = true)]
    spawn_args: Vec<String>,
    /// Connect to an external model over TCP.
    #[arg(long, conflicts_with = "spawn")]
    connect: Option<String>,
    #[arg(long, default_value_t = 30)]
    timeout_secs: u64,
}

#[derive(Args)]
struct DecodeArgs {
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    run: RunFlags,
    /// Prompt token ids, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "prompt_id")]
    prompt: Vec<TokenId>,
    /// Take the prompt from the toy corpus by id.
    #[arg(long)]
    prompt_id: Option<String>,
    #[arg(long, value_enum, default_value_t = MethodKind::Dystruct)]
    method: MethodKind,
    /// Write the transcript JSON here.
    #[arg(long)]
    transcript: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Trajectory record files (JSON lines).
    #[arg(long)]
    records: Vec<PathBuf>,
    /// Decode this toy corpus to produce records instead.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Seeds for decoding the corpus.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Also save the collected records.
    #[arg(long)]
    records_out: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[command(flatten)]
    run: RunFlags,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// External model; the toy oracle over the corpus is used otherwise.
    #[arg(long)]
    spawn: Option<String>,
    #[arg(long = "spawn-arg", allow_hyphen_values = true)]
    spawn_args: Vec<String>,
    #[arg(long, value_enum, value_delimiter = ',')]
    methods: Vec<MethodKind>,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long)]
    out: PathBuf,
    /// Directory for SVG charts.
    #[arg(long)]
    plots: Option<PathBuf>,
    /// Directory for per-job transcripts.
    #[arg(long)]
    transcripts: Option<PathBuf>,
    #[command(flatten)]
    run: RunFlags,
}

#[derive(Args)]
struct PartitionArgs {
    /// JSON input; stdin when absent.
    #[arg(long)]
    input: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    a: PathBuf,
    b: PathBuf,
    /// Rows of this method from the first table (all rows when absent).
    #[arg(long)]
    method_a: Option<String>,
    #[arg(long)]
    method_b: Option<String>,
}

#[derive(Args)]
struct CorpusArgs {
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeToyArgs {
    #[arg(long)]
    corpus: PathBuf,
}

/// Settings file contents. Run settings sit at the top level; the other
/// tables are optional.
#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(default)]
struct FileConfig {
    #[serde(flatten)]
    run: RunConfig,
    toy: ToyConfig,
    monotonic: MonotonicConfig,
    fit: FitConfig,
    corpus: CorpusShape,
}

fn load_file_config(path: Option<&Path>) -> CliResult<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            Ok(toml::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))?)
        }
    }
}

impl RunFlags {
    fn apply(&self, base: &RunConfig, seed: Option<u64>) -> RunConfig {
        let mut c = base.clone();
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = self.$f { c.$f = v; })*};
        }
        set!(l_min, l_max, alpha0, gamma, t_min, t_max, r_weld, weld_steps, n_max, budget);
        if let Some(s) = self.schedule {
            c.schedule = match s {
                Schedule::Static => ScheduleMode::Static,
                Schedule::Greedy => ScheduleMode::Greedy,
                Schedule::LeftToRight => ScheduleMode::LeftToRight,
            };
        }
        if self.no_weld {
            c.welding = false;
        }
        if self.no_schedule {
            c.scheduling = false;
        }
        if let Some(w) = &self.weights {
            c.weights = Some(w.clone());
        }
        if let Some(s) = seed {
            c.seed = s;
        }
        c
    }
}

fn load_weights(run: &RunConfig) -> CliResult<Weights> {
    Ok(match &run.weights {
        Some(p) => Weights::load(p).map_err(|e| format!("{}: {e}", p.display()))?,
        None => Weights::default(),
    })
}

fn load_corpus(path: &Path) -> CliResult<Vec<CorpusItem>> {
    Ok(corpus::load(path).map_err(|e| format!("{}: {e}", path.display()))?)
}

fn spawn_pool(program: &str, args: &[String], n: usize, timeout: Duration) -> CliResult<DenoiserPool> {
    let mut members: Vec<Box<dyn Denoiser>> = Vec::with_capacity(n);
    for _ in 0..n.max(1) {
        members.push(Box::new(ExternalDenoiserClient::spawn(program, args, timeout)?));
    }
    Ok(DenoiserPool::new(members)?)
}

fn write_json_line(value: &impl Serialize) -> CliResult {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, value)?;
    out.write_all(b"\n")?;
    Ok(())
}

fn decode(args: DecodeArgs, file: FileConfig, seed: Option<u64>) -> CliResult {
    let run = args.run.apply(&file.run, seed);
    let weights = load_weights(&run)?;
    let timeout = Duration::from_secs(args.model.timeout_secs);
    let mut items = Vec::new();
    let model: Box<dyn Denoiser> = if let Some(path) = &args.model.toy {
        items = load_corpus(path)?;
        Box::new(ToyOracle::from_corpus(&items, file.toy.clone())?)
    } else if let Some(program) = &args.model.spawn {
        Box::new(ExternalDenoiserClient::spawn(program, &args.model.spawn_args, timeout)?)
    } else if let Some(addr) = &args.model.connect {
        Box::new(ExternalDenoiserClient::connect(addr.as_str(), timeout)?)
    } else {
        return Err("choose a model with --toy, --spawn or --connect".into());
    };
    let prompt = match &args.prompt_id {
        Some(id) => items
            .iter()
            .find(|i| &i.id == id)
            .map(|i| i.prompt.clone())
            .ok_or_else(|| format!("no prompt {id} in the corpus"))?,
        None if args.prompt.is_empty() => return Err("give --prompt or --prompt-id".into()),
        None => args.prompt.clone(),
    };
    let outcome = args
        .method
        .decode(model.as_ref(), &prompt, &run, &weights, &file.monotonic);
    let d = match outcome {
        Ok(d) => d,
        Err(e) => {
            if let (Some(path), Some(t)) = (&args.transcript, e.partial_transcript()) {
                std::fs::write(path, t.to_json() + "\n")?;
            }
            return Err(e.into());
        }
    };
    if let Some(path) = &args.transcript {
        std::fs::write(path, d.transcript.to_json() + "\n")?;
    }
    let text: Vec<String> = d.tokens.iter().map(u32::to_string).collect();
    println!("{}", text.join(" "));
    eprintln!(
        "stop={:?} tokens={} calls={} iterations={} blocks={}",
        d.stop,
        d.tokens.len(),
        d.calls(),
        d.iterations(),
        d.blocks()
    );
    Ok(())
}

fn calibrate_cmd(args: CalibrateArgs, file: FileConfig, seed: Option<u64>) -> CliResult {
    let run = args.run.apply(&file.run, seed);
    let par = Parallelism::from_threads(args.threads);
    let mut records = Vec::new();
    for path in &args.records {
        let f = std::fs::File::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
        records.extend(read_records(std::io::BufReader::new(f))?);
    }
    if let Some(path) = &args.corpus {
        let items = load_corpus(path)?;
        let oracle = ToyOracle::from_corpus(&items, file.toy.clone())?;
        let seeds = if args.seeds.is_empty() {
            vec![run.seed]
        } else {
            args.seeds.clone()
        };
        let weights = load_weights(&run)?;
        records.extend(harness::collect_records(&oracle, &items, &seeds, &run, &weights, par));
    }
    if records.is_empty() {
        return Err("no trajectory records; give --records or --corpus".into());
    }
    if let Some(path) = &args.records_out {
        write_records(&records, std::io::BufWriter::new(std::fs::File::create(path)?))?;
    }
    let mut fit = file.fit.clone();
    if let Some(l) = args.lambda {
        fit.lambda = l;
    }
    if let Some(m) = args.max_iter {
        fit.max_iter = m;
    }
    let c = calibrate(&records, &fit, par)?;
    c.weights.save(&args.out)?;
    eprintln!(
        "w: loss {:.6} -> {:.6} in {} iterations ({} positive / {} negative)",
        c.w_report.initial_loss, c.w_report.loss, c.w_report.iterations, c.w_report.positives, c.w_report.negatives
    );
    if let Some(r) = &c.w_b_report {
        eprintln!(
            "w_b: loss {:.6} -> {:.6} in {} iterations ({} positive / {} negative)",
            r.initial_loss, r.loss, r.iterations, r.positives, r.negatives
        );
    }
    Ok(())
}

fn bench(args: BenchArgs, file: FileConfig, seed: Option<u64>) -> CliResult {
    let run = args.run.apply(&file.run, seed);
    let items = load_corpus(&args.corpus)?;
    let model: Box<dyn Denoiser> = match &args.spawn {
        Some(program) => Box::new(spawn_pool(
            program,
            &args.spawn_args,
            Parallelism::from_threads(args.threads).workers(),
            external::DEFAULT_TIMEOUT,
        )?),
        None => Box::new(ToyOracle::from_corpus(&items, file.toy.clone())?),
    };
    let methods = if args.methods.is_empty() {
        MethodKind::ALL.to_vec()
    } else {
        args.methods.clone()
    };
    let seeds = if args.seeds.is_empty() {
        vec![run.seed]
    } else {
        args.seeds.clone()
    };
    let config = BenchConfig {
        weights: load_weights(&run)?,
        run,
        monotonic: file.monotonic.clone(),
        parallelism: Parallelism::from_threads(args.threads),
        keep_outputs: args.transcripts.is_some(),
    };
    let result = run_benchmark(model.as_ref(), &items, &methods, &seeds, &config)?;
    for f in &result.failures {
        eprintln!("failed: {} {} seed {}: {}", f.method, f.prompt_id, f.seed, f.error);
    }
    if result.rows.is_empty() {
        return Err("every job failed".into());
    }
    emit_csv(&result.rows, &args.out)?;
    let summaries = summarize(&result.rows);
    if let Some(dir) = &args.plots {
        emit_svg_plots(&summaries, dir)?;
    }
    if let Some(dir) = &args.transcripts {
        std::fs::create_dir_all(dir)?;
        for o in &result.outputs {
            let name = format!("{}_{}_{}.json", o.method, o.prompt_id, o.seed);
            std::fs::write(dir.join(name), o.transcript.to_json() + "\n")?;
        }
    }
    for s in &summaries {
        write_json_line(s)?;
    }
    Ok(())
}

#[derive(Deserialize)]
struct PartitionInput {
    q: Vec<f64>,
    alphas: Option<Vec<f64>>,
    alpha0: Option<f64>,
    hbar: Option<f64>,
    logits: Option<Vec<f64>>,
}

#[derive(Serialize)]
struct PosteriorEntry {
    cuts: Vec<u8>,
    p: f64,
}

#[derive(Serialize)]
struct PartitionOutput {
    cuts: Vec<u8>,
    blocks: Vec<[usize; 2]>,
    log_posterior: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    posterior: Option<Vec<PosteriorEntry>>,
}

fn partition_cmd(args: PartitionArgs) -> CliResult {
    let text = match &args.input {
        Some(p) => std::fs::read_to_string(p)?,
        None => std::io::read_to_string(std::io::stdin())?,
    };
    let input: PartitionInput = serde_json::from_str(&text)?;
    let alphas = match (&input.alphas, input.alpha0, input.hbar, &input.logits) {
        (Some(a), _, _, _) => a.clone(),
        (None, Some(a0), Some(h), Some(l)) => local_alphas(a0, h, l)?,
        _ => return Err("give alphas, or alpha0 with hbar and logits".into()),
    };
    let cuts = map_cuts(&input.q, &alphas)?;
    let posterior = if input.q.len() < ENUMERATION_LIMIT {
        Some(
            enumerate_posterior(&input.q, &alphas)?
                .into_iter()
                .map(|(c, p)| PosteriorEntry {
                    cuts: c.iter().map(|&b| u8::from(b)).collect(),
                    p,
                })
                .collect(),
        )
    } else {
        None
    };
    write_json_line(&PartitionOutput {
        log_posterior: log_posterior(&cuts, &input.q, &alphas)?,
        blocks: blocks_from_cuts(&cuts).spans(0),
        cuts: cuts.iter().map(|&b| u8::from(b)).collect(),
        posterior,
    })
}

fn stats(args: StatsArgs) -> CliResult {
    let pick = |path: &Path, method: &Option<String>| -> CliResult<Vec<harness::ResultRow>> {
        let rows = load_csv(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Ok(match method {
            Some(m) => rows.into_iter().filter(|r| &r.method == m).collect(),
            None => rows,
        })
    };
    let a = pick(&args.a, &args.method_a)?;
    let b = pick(&args.b, &args.method_b)?;
    write_json_line(&PairedOutcomes::from_rows(&a, &b)?.report())
}

fn corpus_cmd(args: CorpusArgs, file: FileConfig, seed: Option<u64>) -> CliResult {
    let items = generate_corpus(args.n, seed.unwrap_or(file.run.seed), &file.corpus);
    corpus::save(&items, &args.out)?;
    Ok(())
}

fn serve_toy(args: ServeToyArgs, file: FileConfig) -> CliResult {
    let items = load_corpus(&args.corpus)?;
    let oracle = ToyOracle::from_corpus(&items, file.toy)?;
    let stdin = std::io::stdin().lock();
    external::serve(&oracle, stdin, std::io::stdout().lock())?;
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let outcome = load_file_config(cli.config.as_deref()).and_then(|file| match cli.command {
        Command::Decode(a) => decode(a, file, cli.seed),
        Command::Calibrate(a) => calibrate_cmd(a, file, cli.seed),
        Command::Bench(a) => bench(a, file, cli.seed),
        Command::Partition(a) => partition_cmd(a),
        Command::Stats(a) => stats(a),
        Command::Corpus(a) => corpus_cmd(a, file, cli.seed),
        Command::ServeToy(a) => serve_toy(a, file),
    });
    if let Err(e) = outcome {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
