//! The `cmdrec` subcommands.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use cmdrec_core::features::{Scheme, TimeNormStats, Vocabulary};
use cmdrec_core::logs::{load_sessions, LogSchema};
use cmdrec_core::metrics::MetricsReport;
use cmdrec_core::preprocess::{dataset_stats, run_pipeline, sessionize_and_split, TranslationLexicon, TriggerMap};
use cmdrec_core::synth::generate;
use cmdrec_model::{checkpoint, evaluate, inject_lora, train, Model, RunDir, TrainData};

use crate::artifacts::{DataDir, Prepared};
use crate::config::FileConfig;
use crate::http::{start, AppState, PollerOptions};
use crate::predictor::Predictor;
use crate::session::SessionStore;

#[derive(Debug, Parser)]
#[command(name = "cmdrec", version, about = "Next-command recommendation from design-software logs")]
pub struct Cli {
    /// TOML file with default settings for every subcommand.
    #[arg(long, global = true, env = "CMDREC_CONFIG")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic log corpus with its ground truth.
    Synth(SynthArgs),
    /// Clean raw logs into train/validation sequences and a vocabulary.
    Preprocess(PreprocessArgs),
    /// Train a backbone on a preprocessed dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split.
    Eval(EvalArgs),
    /// Tail log files and serve predictions over HTTP.
    Serve(ServeArgs),
    /// Dataset statistics of raw logs or of a preprocessed split.
    Stats(StatsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Clm,
    Mlm,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Scheme {
        match s {
            SchemeArg::Clm => Scheme::Clm,
            SchemeArg::Mlm => Scheme::Mlm,
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub sessions: Option<usize>,
    /// Switch on noise, undo/redo episodes and three languages.
    #[arg(long)]
    pub noisy: bool,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Log files, or directories whose `*.log` files are read.
    #[arg(long, required = true, num_args = 1..)]
    pub logs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// Reviewed trigger file; inferred from the corpus when absent.
    #[arg(long)]
    pub triggers: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub run: PathBuf,
    /// llama2, mixtral, mistral, bert or encoder-mlm.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub scheme: Option<SchemeArg>,
    /// Start from this checkpoint instead of a fresh model.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Inject LoRA adapters of this rank (frozen base) before training.
    #[arg(long)]
    pub lora_rank: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "validation")]
    pub split: String,
    #[arg(long, value_enum)]
    pub scheme: Option<SchemeArg>,
    #[arg(long, value_delimiter = ',', default_values_t = [5usize, 10])]
    pub k: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Log files to tail.
    #[arg(long, num_args = 1..)]
    pub watch: Vec<PathBuf>,
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long, env = "CMDREC_PORT")]
    pub port: Option<u16>,
    #[arg(long)]
    pub poll_ms: Option<u64>,
    #[arg(long, value_enum)]
    pub scheme: Option<SchemeArg>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long, num_args = 1.., conflicts_with = "data")]
    pub logs: Vec<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(a) => synth(&cfg, &a),
        Command::Preprocess(a) => preprocess(&cfg, &a),
        Command::Train(a) => train_cmd(&cfg, &a).map(|_| ()),
        Command::Eval(a) => {
            let report = eval(&a)?;
            print!("{report}");
            Ok(())
        }
        Command::Serve(a) => serve(&cfg, &a),
        Command::Stats(a) => stats(&a),
    }
}

/// Expands directories into their `*.log` files, sorted.
pub fn log_files(paths: &[PathBuf]) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "log"))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        bail!("no log files found");
    }
    Ok(out)
}

pub fn synth(cfg: &FileConfig, a: &SynthArgs) -> anyhow::Result<()> {
    let mut spec = if a.noisy { cmdrec_core::synth::GeneratorSpec::noisy(0) } else { cfg.synth.clone() };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(n) = a.sessions {
        spec.sessions = n;
    }
    let out = generate(&spec)?;
    let files = out.write_dir(&a.out, &spec)?;
    println!("wrote {} log files and ground truth to {}", files.len(), a.out.display());
    print!("{}", out.truth.stats);
    println!();
    Ok(())
}

pub fn preprocess(cfg: &FileConfig, a: &PreprocessArgs) -> anyhow::Result<()> {
    let files = log_files(&a.logs)?;
    let (sessions, parse) = load_sessions(&files, &LogSchema::default());
    let lexicon = match a.lexicon.as_ref().or(cfg.preprocess.lexicon.as_ref()) {
        Some(p) => TranslationLexicon::parse(&fs::read_to_string(p).with_context(|| p.display().to_string())?)?,
        None => TranslationLexicon::default(),
    };
    let reviewed = match a.triggers.as_ref().or(cfg.preprocess.triggers.as_ref()) {
        Some(p) => Some(TriggerMap::parse(&fs::read_to_string(p).with_context(|| p.display().to_string())?)?),
        None => None,
    };
    let pipeline = &cfg.preprocess.pipeline;
    let out = run_pipeline(&sessions, pipeline, &lexicon, reviewed.as_ref());
    let mut split_cfg = cfg.preprocess.split;
    if let Some(s) = a.seed {
        split_cfg.seed = s;
    }
    let split = sessionize_and_split(&out.sequences, &split_cfg);
    let vocab = Vocabulary::build(&split.train)?;
    let stats = TimeNormStats::from_train(&split.train, TimeNormStats::default().clamp);
    let report = format!(
        "{parse}\n{}\n\ntrain\n{}\n\nvalidation\n{}\n",
        out.report,
        dataset_stats(&split.train),
        dataset_stats(&split.validation)
    );
    DataDir::new(&a.out).write(&Prepared {
        split: &split,
        vocab: &vocab,
        stats,
        triggers: &out.trigger_map,
        lexicon: &lexicon,
        pipeline,
        report: report.clone(),
    })?;
    print!("{report}");
    println!(
        "{} train / {} validation sequences, {} commands -> {}",
        split.train.len(),
        split.validation.len(),
        vocab.num_commands(),
        a.out.display()
    );
    Ok(())
}

pub fn train_cmd(cfg: &FileConfig, a: &TrainArgs) -> anyhow::Result<Model> {
    let data = DataDir::new(&a.data);
    let section = &cfg.train;
    let mut opt = section.optim.clone();
    if let Some(x) = a.epochs {
        opt.epochs = x;
    }
    if let Some(x) = a.lr {
        opt.lr = x;
    }
    if let Some(x) = a.batch_size {
        opt.batch_size = x;
    }
    if let Some(x) = a.seed {
        opt.seed = x;
    }
    if let Some(s) = a.scheme {
        opt.scheme = Some(s.into());
    }
    let vocab = data.vocab()?;
    let hash = vocab.content_hash();
    let mut model = match &a.init {
        Some(p) => checkpoint::load(p, &hash)?,
        None => {
            let preset = match &a.preset {
                Some(name) => name.parse().map_err(|e| anyhow::anyhow!("{e}"))?,
                None => section.preset,
            };
            let mut c = preset.config(vocab.size());
            if let Some(p) = &section.text_embeddings {
                c.d_text = data.encoder(c.d_text, Some(p))?.d_text();
            }
            Model::new(c, section.model_seed)?
        }
    };
    let lora = match (a.lora_rank, &section.lora) {
        (Some(rank), spec) => Some(cmdrec_model::LoraSpec { rank, ..spec.clone().unwrap_or_default() }),
        (None, spec) => spec.clone(),
    };
    if let Some(spec) = lora {
        let adapters = inject_lora(&mut model, spec, section.model_seed)?;
        println!("{} LoRA adapters, {} trainable parameters", adapters.len(), model.params.trainable_count());
    }
    let encoder = data.encoder(model.config.d_text, section.text_embeddings.as_deref())?;
    let encode = |split: &str| -> anyhow::Result<Vec<_>> {
        Ok(data.sequences(split)?.iter().map(|s| encoder.encode(s).0).collect())
    };
    let (train_set, validation) = (encode("train")?, encode("validation")?);
    let mut run = RunDir::create(&a.run, &model, &opt)?;
    let d = TrainData { train: &train_set, validation: &validation, vocab_hash: &hash };
    train(&mut model, &d, &opt, Some(&mut run), |r| {
        println!(
            "epoch {:>3}  loss {:.4}  recall@5 {}  ndcg@5 {}  {:.1}s",
            r.epoch,
            r.train_loss,
            r.val_recall_5.map_or("-".into(), |x| format!("{x:.4}")),
            r.val_ndcg_5.map_or("-".into(), |x| format!("{x:.4}")),
            r.seconds
        )
    })?;
    println!("checkpoint: {}", run.checkpoint_path().display());
    Ok(model)
}

pub fn eval(a: &EvalArgs) -> anyhow::Result<MetricsReport> {
    let data = DataDir::new(&a.data);
    let vocab = data.vocab()?;
    let model = checkpoint::load(&a.checkpoint, &vocab.content_hash())?;
    let encoder = data.encoder(model.config.d_text, None)?;
    let seqs: Vec<_> = data.sequences(&a.split)?.iter().map(|s| encoder.encode(s).0).collect();
    let scheme = a.scheme.map_or_else(|| model.config.default_scheme(), Scheme::from);
    Ok(evaluate(&model, &seqs, scheme, &a.k)?)
}

/// Loads the checkpoint and artifacts a server needs.
pub fn load_state(data: &Path, ckpt: &Path, scheme: Option<Scheme>, text: Option<&Path>, opts: PollerOptions) -> anyhow::Result<AppState> {
    let data = DataDir::new(data);
    let vocab = data.vocab()?;
    let model = checkpoint::load(ckpt, &vocab.content_hash())?;
    let max_len = model.config.max_len;
    let encoder = data.encoder(model.config.d_text, text)?;
    let predictor = Predictor::new(model, encoder, scheme)?;
    let store = SessionStore::new(data.online_pipeline(max_len)?);
    Ok(AppState::new(Some(predictor), store, opts))
}

pub fn serve(cfg: &FileConfig, a: &ServeArgs) -> anyhow::Result<()> {
    let s = &cfg.serve;
    let opts = PollerOptions {
        interval: Duration::from_millis(a.poll_ms.unwrap_or(s.poll_ms).max(1)),
        idle_timeout: Duration::from_secs(s.idle_timeout_secs),
        ..PollerOptions::default()
    };
    let state = load_state(&a.data, &a.checkpoint, a.scheme.map(Scheme::from), s.text_embeddings.as_deref(), opts)?;
    let host = a.host.clone().unwrap_or_else(|| s.host.clone());
    let addr: SocketAddr = format!("{host}:{}", a.port.unwrap_or(s.port)).parse().context("listen address")?;
    let watch = if a.watch.is_empty() { s.watch.clone() } else { a.watch.clone() };
    if watch.is_empty() {
        log::warn!("no log files to watch; only prefix predictions will work");
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let running = start(addr, state, watch).await?;
        println!("serving on http://{}", running.addr);
        tokio::signal::ctrl_c().await?;
        running.abort();
        anyhow::Ok(())
    })
}

pub fn stats(a: &StatsArgs) -> anyhow::Result<()> {
    match &a.data {
        Some(d) => {
            let data = DataDir::new(d);
            for split in ["train", "validation"] {
                println!("{split}\n{}\n", dataset_stats(&data.sequences(split)?));
            }
        }
        None => {
            let files = log_files(&a.logs)?;
            let (sessions, parse) = load_sessions(&files, &LogSchema::default());
            println!("{parse}");
            let seqs: Vec<_> = sessions.iter().filter_map(cmdrec_core::preprocess::to_clean_sequence).collect();
            println!("raw items (before cleaning)\n{}", dataset_stats(&seqs));
        }
    }
    Ok(())
}
