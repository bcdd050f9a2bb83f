//! Subcommands of the `lgdea` binary.

use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use lgdea_core::corpus::{
    generate_corpus, generate_heldout, load_corpus, save_corpus, GenerationConfig,
};
use lgdea_core::diagnostics::{dump_relations, gradcheck_suite};
use lgdea_core::eval::{evaluate, EvalContext};
use lgdea_core::trainer::{
    load_checkpoint, load_checkpoint_for, save_checkpoint, train, EvidenceTable, MetricsWriter,
    Mode, TrainConfig, TrainState,
};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "lgdea",
    version,
    about = "Evidence-space image/report alignment under sparse pairing"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus file.
    Gen(GenArgs),
    /// Train on a corpus, writing a checkpoint and a metrics stream.
    Train(TrainArgs),
    /// Evaluate a checkpoint on freshly drawn held-out pairs.
    Eval(EvalArgs),
    /// Check every loss gradient against finite differences.
    Gradcheck(GradcheckArgs),
    /// Print seed, graph and propagated relations of one training batch.
    DumpRelations(DumpArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CorpusPreset {
    Reference,
    #[value(name = "pairing-5pct")]
    Pairing5pct,
    #[value(name = "pairing-10pct")]
    Pairing10pct,
    Small,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModelPreset {
    Small,
    PaperShape,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Lgdea,
    #[value(alias = "global_baseline")]
    GlobalBaseline,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Lgdea => Mode::Lgdea,
            ModeArg::GlobalBaseline => Mode::GlobalBaseline,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_enum, default_value = "reference")]
    pub preset: CorpusPreset,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub pairing_ratio: Option<f64>,
    #[arg(long)]
    pub n_images: Option<usize>,
    /// Draw unpaired images from a shifted second domain.
    #[arg(long)]
    pub cross_domain: bool,
}

/// Where the training configuration comes from, plus flag overrides.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<ModelPreset>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_steps: Option<u64>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> lgdea_core::Result<TrainConfig> {
        let mut cfg = match (&self.config, self.preset) {
            (Some(path), _) => TrainConfig::load(path)?,
            (None, Some(ModelPreset::PaperShape)) => TrainConfig::paper_shape(),
            (None, _) => TrainConfig::small(),
        };
        if let Some(m) = self.mode {
            cfg.mode = m.into();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = self.max_steps {
            cfg.max_steps = Some(n);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Checkpoint written when training ends.
    #[arg(long)]
    pub out: PathBuf,
    /// Metrics stream; defaults to the checkpoint path plus `.metrics.jsonl`.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Continue from this checkpoint, appending to the metrics stream.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus whose world the held-out pairs are drawn from.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Held-out sampling seed; defaults to the corpus seed plus 1000.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 200)]
    pub n_heldout: usize,
    /// Appends the report as one JSON line; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Writes one JSON line per checked term.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Trained model to use; a fresh initialisation otherwise.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value_t = 0)]
    pub batch: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(lgdea_core::Error),
    GradcheckFailed(Vec<String>),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Core(e) if e.is_numeric() => EXIT_NUMERIC,
            Self::GradcheckFailed(_) => EXIT_NUMERIC,
            Self::Core(_) | Self::Usage(_) => EXIT_USAGE,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Usage(m) => write!(f, "usage error: {m}"),
            Self::Core(e) => write!(f, "{e}"),
            Self::GradcheckFailed(terms) => {
                write!(f, "gradient check failed for {}", terms.join(", "))
            }
        }
    }
}

impl From<lgdea_core::Error> for CliError {
    fn from(e: lgdea_core::Error) -> Self {
        Self::Core(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Gen(a) => gen(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::Gradcheck(a) => gradcheck_cmd(&a),
        Command::DumpRelations(a) => dump_cmd(&a),
    }
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", path.display())))
}

fn append(path: &Path) -> CliResult<BufWriter<File>> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Usage(format!("cannot open {}: {e}", path.display())))
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> CliError + '_ {
    move |e| CliError::Usage(format!("cannot write {}: {e}", path.display()))
}

/// Opens `path` for appending, or stdout when absent.
fn sink(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(append(p)?),
        None => Box::new(io::stdout().lock()),
    })
}

fn gen(a: &GenArgs) -> CliResult<()> {
    let mut cfg = match a.preset {
        CorpusPreset::Reference => GenerationConfig::reference(),
        CorpusPreset::Pairing5pct => GenerationConfig::pairing_5pct(),
        CorpusPreset::Pairing10pct => GenerationConfig::pairing_10pct(),
        CorpusPreset::Small => GenerationConfig::small(),
    };
    if let Some(r) = a.pairing_ratio {
        cfg.pairing_ratio = r;
    }
    if let Some(n) = a.n_images {
        cfg.n_images = n;
    }
    cfg.cross_domain |= a.cross_domain;
    let corpus = generate_corpus(&cfg, a.seed)?;
    save_corpus(&corpus, &a.out)?;
    eprintln!(
        "wrote {} paired, {} unpaired images, {} unpaired reports to {}",
        corpus.paired.len(),
        corpus.unpaired_images.len(),
        corpus.unpaired_reports.len(),
        a.out.display()
    );
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> CliResult<()> {
    let corpus = load_corpus(&a.corpus)?;
    let (cfg, mut state, resumed) = match &a.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let mut cfg = ck.config;
            if a.config.config.is_some() || a.config.preset.is_some() || a.config.mode.is_some() {
                return Err(CliError::Usage(
                    "--resume takes its configuration from the checkpoint".into(),
                ));
            }
            if let Some(n) = a.config.max_steps {
                cfg.max_steps = Some(n);
            }
            let ck = load_checkpoint_for(path, &cfg, &corpus.world)?;
            (cfg, ck.state, true)
        }
        None => {
            let cfg = a.config.resolve()?;
            let state = TrainState::new(&cfg, &corpus.world)?;
            (cfg, state, false)
        }
    };
    let extractor = cfg.extractor.build(&corpus.world)?;
    let evidence = EvidenceTable::extract(&corpus, extractor.as_ref())?;

    let metrics_path = a
        .metrics
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.metrics.jsonl", a.out.display())));
    let file = if resumed {
        append(&metrics_path)?
    } else {
        create(&metrics_path)?
    };
    let mut metrics = MetricsWriter::new(file);
    let mut write_err = None;
    let result = train(&corpus, &evidence, &cfg, &mut state, &mut |rec, _| {
        if let Err(e) = metrics.write(rec) {
            write_err = Some(e);
        }
        if rec.step % 100 == 0 {
            log::info!("step {} total {:.6}", rec.step, rec.losses.total);
        }
        Ok(())
    });
    metrics
        .into_inner()
        .flush()
        .map_err(io_err(&metrics_path))?;
    if let Some(e) = write_err {
        return Err(io_err(&metrics_path)(e));
    }
    result?;
    save_checkpoint(&state, &cfg, &a.out)?;
    eprintln!(
        "trained {} mode to step {}; checkpoint {}, metrics {}",
        cfg.mode,
        state.step,
        a.out.display(),
        metrics_path.display()
    );
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> CliResult<()> {
    let corpus = load_corpus(&a.corpus)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let ck = load_checkpoint_for(&a.checkpoint, &ck.config, &corpus.world)?;
    let gen = GenerationConfig::for_world(&corpus.world);
    let seed = a.seed.unwrap_or(corpus.seed.wrapping_add(1000));
    let heldout = generate_heldout(&corpus.world, &gen, a.n_heldout, seed)?;
    let extractor = ck.config.extractor.build(&corpus.world)?;
    let evidence =
        EvidenceTable::extract_reports(heldout.iter().map(|s| &s.report), extractor.as_ref())?;
    let ctx = EvalContext {
        seed,
        config_fingerprint: ck.config.fingerprint(),
    };
    let report = evaluate(
        &ck.state.model,
        ck.config.mode,
        &heldout,
        &evidence,
        &corpus.world,
        &ctx,
    )?;
    let mut out = sink(a.out.as_deref())?;
    writeln!(out, "{}", report.to_json_line())
        .and_then(|_| out.flush())
        .map_err(|e| CliError::Usage(format!("cannot write report: {e}")))?;
    eprintln!("{}", report.summary());
    Ok(())
}

fn gradcheck_cmd(a: &GradcheckArgs) -> CliResult<()> {
    let checks = gradcheck_suite(a.seed)?;
    let mut out = a.out.as_deref().map(create).transpose()?;
    let mut failed = Vec::new();
    for c in &checks {
        let verdict = if c.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<18} {:>5} coords  max rel err {:.3e}  {verdict}",
            c.term, c.coords_checked, c.max_rel_error
        );
        if let Some(w) = out.as_mut() {
            let line = serde_json::to_string(c).expect("check serialises");
            writeln!(w, "{line}")
                .map_err(|e| CliError::Usage(format!("cannot write report: {e}")))?;
        }
        if !c.passed() {
            failed.push(c.term.clone());
        }
    }
    if let Some(mut w) = out {
        w.flush()
            .map_err(|e| CliError::Usage(format!("cannot write report: {e}")))?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradcheckFailed(failed))
    }
}

fn dump_cmd(a: &DumpArgs) -> CliResult<()> {
    let corpus = load_corpus(&a.corpus)?;
    let (cfg, model) = match &a.checkpoint {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let ck = load_checkpoint_for(path, &ck.config, &corpus.world)?;
            (ck.config, ck.state.model)
        }
        None => {
            let cfg = a.config.resolve()?;
            let model = TrainState::new(&cfg, &corpus.world)?.model;
            (cfg, model)
        }
    };
    let extractor = cfg.extractor.build(&corpus.world)?;
    let evidence = EvidenceTable::extract(&corpus, extractor.as_ref())?;
    let dump = dump_relations(&model, &corpus, &evidence, &cfg, a.batch)?;
    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    };
    let line = serde_json::to_string(&dump).expect("dump serialises");
    writeln!(out, "{line}")
        .and_then(|_| out.flush())
        .map_err(|e| CliError::Usage(format!("cannot write relations: {e}")))
}
