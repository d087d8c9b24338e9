//! `proteinttt` command-line interface.
//!
//! Exit codes: 0 success, 1 engine error, 2 usage error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use proteinttt::config::RunConfig;
use proteinttt::heads::ConfidenceAdapter;
use proteinttt::scoring::{ProbabilitySupport, ScoringMode};

#[derive(Parser, Debug)]
#[command(name = "proteinttt", version, about = "Test-time masked-LM customization for protein encoders")]
pub struct Cli {
    /// TOML run configuration; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed applied to every seeded component.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for grid runs.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic families, targets, MSAs and oracle assays.
    GenCorpus(GenCorpusArgs),
    /// Masked-LM pre-training on a FASTA corpus.
    Pretrain(PretrainArgs),
    /// Customize a checkpoint on one target sequence or MSA.
    Ttt(TttArgs),
    /// Score assays with log-odds and report Spearman.
    Score(ScoreArgs),
    /// Pseudo-perplexity of every target.
    Perplexity(PerplexityArgs),
    /// Hyperparameter grid over learning rate, batch size and accumulation.
    Grid(GridArgs),
}

#[derive(Args, Debug)]
pub struct GenCorpusArgs {
    #[arg(long)]
    pub families: Option<usize>,
    #[arg(long)]
    pub length: Option<usize>,
    #[arg(long)]
    pub members: Option<usize>,
    #[arg(long)]
    pub substitution_rate: Option<f64>,
    #[arg(long)]
    pub targets: Option<usize>,
    #[arg(long)]
    pub held_out: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Training FASTA.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// `id,family,...` CSV; when given, a family classifier head is fit on
    /// the pre-trained embeddings and stored in the checkpoint.
    #[arg(long)]
    pub families: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub micro_batch: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct TttFlags {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub micro_batch: Option<usize>,
    #[arg(long)]
    pub accum: Option<usize>,
    /// Fixed masking ratio.
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[arg(long)]
    pub crop: Option<usize>,
    #[arg(long, value_enum)]
    pub confidence: Option<ConfidenceArg>,
}

#[derive(Args, Debug)]
pub struct TttArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// FASTA holding the target.
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Record id to use when the FASTA holds several records.
    #[arg(long)]
    pub target_id: Option<String>,
    /// A3M alignment; rows are sampled uniformly, target included.
    #[arg(long)]
    pub msa: Option<PathBuf>,
    /// Record target pseudo-perplexity at every step.
    #[arg(long)]
    pub emit_perplexity: bool,
    #[command(flatten)]
    pub flags: TttFlags,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// FASTA of reference sequences; assay file stems select the record.
    #[arg(long)]
    pub targets: Option<PathBuf>,
    /// Assay CSVs with `mutant` and `fitness` columns.
    #[arg(long = "assay", num_args = 1..)]
    pub assays: Vec<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Renormalize probabilities over the 20 residues.
    #[arg(long)]
    pub renormalize: bool,
}

#[derive(Args, Debug)]
pub struct PerplexityArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub targets: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GridArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub targets: Option<PathBuf>,
    /// Directory of `<target id>.csv` assays for the Spearman curve.
    #[arg(long)]
    pub assays: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub lrs: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub accums: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub micro_batches: Option<Vec<usize>>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[command(flatten)]
    pub flags: TttFlags,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Independent,
    Joint,
    Wildtype,
}

impl From<ModeArg> for ScoringMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Independent => Self::MaskedMarginalIndependent,
            ModeArg::Joint => Self::MaskedMarginalJoint,
            ModeArg::Wildtype => Self::WildtypeMarginal,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ConfidenceArg {
    NegPseudoPerplexity,
    HeadMaxProb,
}

impl From<ConfidenceArg> for ConfidenceAdapter {
    fn from(c: ConfidenceArg) -> Self {
        match c {
            ConfidenceArg::NegPseudoPerplexity => Self::NegPseudoPerplexity,
            ConfidenceArg::HeadMaxProb => Self::HeadMaxProb,
        }
    }
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Engine(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        Self::Engine(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

impl TttFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        let t = &mut cfg.ttt;
        if let Some(v) = self.steps {
            t.steps = v;
        }
        if let Some(v) = self.lr {
            t.learning_rate = v;
        }
        if let Some(v) = self.micro_batch {
            t.micro_batch_size = v;
        }
        if let Some(v) = self.accum {
            t.grad_accum_steps = v;
        }
        if let Some(p) = self.mask_ratio {
            t.masking.kind = proteinttt::masking::RatioKind::FixedRatio { p };
        }
        if let Some(c) = self.crop {
            t.masking.crop = Some(c);
        }
        if let Some(c) = self.confidence {
            t.confidence = Some(c.into());
        }
    }
}

/// Defaults, then the config file, then flags.
fn resolve_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)
            .map_err(|e| CliError::Usage(format!("--config {}: {e}", path.display())))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    if let Some(d) = &cli.output_dir {
        cfg.paths.output_dir = Some(d.clone());
    }
    match &cli.command {
        Command::GenCorpus(a) => {
            let s = &mut cfg.synth;
            if let Some(v) = a.families {
                s.num_families = v;
            }
            if let Some(v) = a.length {
                s.length = v;
            }
            if let Some(v) = a.members {
                s.members_per_family = v;
            }
            if let Some(v) = a.substitution_rate {
                s.substitution_rate = v;
            }
            if let Some(v) = a.targets {
                s.num_targets = v;
            }
            if let Some(v) = a.held_out {
                s.held_out_family = v;
            }
        }
        Command::Pretrain(a) => {
            if let Some(v) = &a.corpus {
                cfg.paths.corpus = Some(v.clone());
            }
            if let Some(v) = &a.families {
                cfg.paths.families = Some(v.clone());
            }
            if let Some(v) = a.epochs {
                cfg.pretrain.epochs = v;
            }
            if let Some(v) = a.lr {
                cfg.pretrain.learning_rate = v;
            }
            if let Some(v) = a.micro_batch {
                cfg.pretrain.micro_batch_size = v;
            }
        }
        Command::Ttt(a) => {
            if let Some(v) = &a.checkpoint {
                cfg.paths.checkpoint = Some(v.clone());
            }
            if let Some(v) = &a.target {
                cfg.paths.targets = Some(v.clone());
            }
            if let Some(v) = &a.msa {
                cfg.paths.msa = Some(v.clone());
            }
            if a.emit_perplexity {
                cfg.ttt.emit_perplexity = true;
            }
            a.flags.apply(&mut cfg);
        }
        Command::Score(a) => {
            if let Some(v) = &a.checkpoint {
                cfg.paths.checkpoint = Some(v.clone());
            }
            if let Some(v) = &a.targets {
                cfg.paths.targets = Some(v.clone());
            }
            if !a.assays.is_empty() {
                cfg.paths.assays = a.assays.clone();
            }
            if let Some(m) = a.mode {
                cfg.scoring.mode = m.into();
            }
            if a.renormalize {
                cfg.scoring.support = ProbabilitySupport::Residues;
            }
        }
        Command::Perplexity(a) => {
            if let Some(v) = &a.checkpoint {
                cfg.paths.checkpoint = Some(v.clone());
            }
            if let Some(v) = &a.targets {
                cfg.paths.targets = Some(v.clone());
            }
        }
        Command::Grid(a) => {
            if let Some(v) = &a.checkpoint {
                cfg.paths.checkpoint = Some(v.clone());
            }
            if let Some(v) = &a.targets {
                cfg.paths.targets = Some(v.clone());
            }
            if let Some(v) = &a.assays {
                cfg.paths.assays = vec![v.clone()];
            }
            if let Some(v) = &a.lrs {
                cfg.grid.learning_rates = v.clone();
            }
            if let Some(v) = &a.accums {
                cfg.grid.grad_accum_steps = v.clone();
            }
            if let Some(v) = &a.micro_batches {
                cfg.grid.micro_batch_sizes = v.clone();
            }
            if let Some(m) = a.mode {
                cfg.scoring.mode = m.into();
            }
            a.flags.apply(&mut cfg);
        }
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> CliResult<()> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::GenCorpus(_) => commands::gen_corpus(&cfg),
        Command::Pretrain(_) => commands::pretrain(&cfg),
        Command::Ttt(a) => commands::ttt(&cfg, a.target_id.as_deref()),
        Command::Score(_) => commands::score(&cfg),
        Command::Perplexity(_) => commands::perplexity(&cfg),
        Command::Grid(_) => commands::grid(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Engine(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
