//! `augnet` command line: thin subcommands over the library and the `store`
//! formats. Machine-readable output goes to stdout (or `--out`), progress to
//! stderr. Exit status: 0 success, 1 usage error, 2 data error.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::encoder::{train_with, TrainObserver};
use crate::error::{Error, Result};
use crate::evalkit::{
    hungarian_accuracy, kmeans, knn_by_id, mean_average_precision, pair_retrieval_eval, pca_project, probe_encoder,
    projection_tsv, EncoderEmbedder, ProbeKind, ProbeSpec, Report, Tap, KMEANS_RESTARTS,
};
use crate::imaging::augment_once;
use crate::losses::LossKind;
use crate::rng::RngStream;
use crate::store::{
    encode_png, load_checkpoint, load_embeddings, load_named_dataset, parse_config, parse_labels, save_checkpoint,
    save_embeddings, write_atomic, Checkpoint, RunConfig,
};

pub const DEFAULT_SHORT_SIDE: usize = 370;
const AUGMENT_STREAM: u64 = 0xC11A;

#[derive(Debug, Parser)]
#[command(
    name = "augnet",
    version,
    about = "Self-supervised embeddings from augmentation groups"
)]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Random seed (overrides the config file).
    #[arg(long)]
    seed: Option<u64>,

    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Output path; stdout when omitted for text outputs.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write augmented copies of every dataset image as PNG files.
    Augment {
        dataset: PathBuf,
        /// Copies per image.
        #[arg(long, default_value_t = 4)]
        m: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Train an encoder; writes the checkpoint to `--out` and the loss log
    /// (`step<TAB>loss`) to stdout or `--log`.
    Train {
        dataset: PathBuf,
        #[arg(long)]
        loss: Option<LossKind>,
        /// Sources per batch.
        #[arg(long)]
        n: Option<usize>,
        /// Augmentations per source.
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Embed a dataset into an embedding store at `--out`.
    Embed {
        checkpoint: PathBuf,
        dataset: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SHORT_SIDE)]
        short_side: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Nearest neighbors of a stored item: `rank<TAB>id<TAB>distance`.
    Retrieve {
        store: PathBuf,
        query: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Pair-retrieval accuracy of a checkpoint on a dataset (JSON report).
    EvalPairs {
        checkpoint: PathBuf,
        dataset: PathBuf,
        /// Comma-separated neighbor counts.
        #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
        k: Vec<usize>,
        #[arg(long, default_value_t = DEFAULT_SHORT_SIDE)]
        short_side: usize,
        #[command(flatten)]
        common: Common,
    },
    /// k-means over a store; Hungarian accuracy when `--labels` is given.
    Cluster {
        store: PathBuf,
        #[arg(long)]
        k: usize,
        /// One integer label per line, in store order.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value_t = KMEANS_RESTARTS)]
        restarts: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Probe frozen encoder features at a tap (JSON report).
    Probe {
        checkpoint: PathBuf,
        dataset: PathBuf,
        /// One integer label per line, in dataset order.
        #[arg(long)]
        labels: PathBuf,
        /// `block<N>` or `output`.
        #[arg(long, default_value = "output")]
        tap: Tap,
        #[arg(long, default_value = "linear")]
        kind: ProbeKindArg,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Mean average precision with a JSON relevance file
    /// (`{"query": ["relevant", ...]}`).
    Map {
        store: PathBuf,
        relevance: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Two-dimensional PCA projection: `id<TAB>x<TAB>y`.
    Project {
        store: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum ProbeKindArg {
    Linear,
    Nonlinear,
}

impl From<ProbeKindArg> for ProbeKind {
    fn from(k: ProbeKindArg) -> Self {
        match k {
            ProbeKindArg::Linear => ProbeKind::Linear,
            ProbeKindArg::Nonlinear => ProbeKind::Nonlinear,
        }
    }
}

struct Io<'a> {
    stdout: &'a mut (dyn Write + Send),
    stderr: &'a mut (dyn Write + Send),
}

impl Io<'_> {
    /// Writes `text` to `out` if given, else to stdout.
    fn emit(&mut self, out: Option<&Path>, text: &str) -> Result<()> {
        match out {
            Some(path) => write_atomic(path, text.as_bytes()),
            None => self
                .stdout
                .write_all(text.as_bytes())
                .map_err(|e| Error::io("<stdout>", e)),
        }
    }

    fn progress(&mut self, msg: std::fmt::Arguments) {
        let _ = writeln!(self.stderr, "{msg}");
    }
}

fn load_run_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_config(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.encoder.seed = seed;
    }
    Ok(cfg)
}

/// Usage errors exit with 1, everything else with 2.
enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

fn require_out(common: &Common, what: &str) -> Result<PathBuf, Failure> {
    common
        .out
        .clone()
        .ok_or_else(|| Failure::Usage(format!("--out is required to write the {what}")))
}

fn read_labels(path: &Path, expected: usize) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let labels = parse_labels(&text)?;
    if labels.len() != expected {
        return Err(Error::shape(format!("{} labels for {expected} items", labels.len())));
    }
    Ok(labels)
}

struct Progress<'a, 'b> {
    io: &'a mut Io<'b>,
    total: u64,
    log: String,
}

impl TrainObserver for Progress<'_, '_> {
    fn on_step(&mut self, step: u64, loss: f64) {
        self.log
            .push_str(&format!("{step}\t{}\n", crate::encoder::format_loss(loss)));
        if step.is_multiple_of(50) || step == self.total {
            self.io
                .progress(format_args!("step {step}/{} loss {loss:.6}", self.total));
        }
    }
}

fn run_command(cmd: Command, io: &mut Io) -> Result<(), Failure> {
    match cmd {
        Command::Augment { dataset, m, common } => {
            let cfg = load_run_config(&common)?;
            let out = require_out(&common, "augmented images")?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let data = load_named_dataset(&dataset)?;
            let stream = RngStream::new(cfg.seed, AUGMENT_STREAM);
            let mut listing = String::new();
            for (i, (id, img)) in data.ids.iter().zip(&data.images).enumerate() {
                let stem = Path::new(id)
                    .file_stem()
                    .map_or(id.clone(), |s| s.to_string_lossy().into_owned());
                for j in 0..m {
                    let aug = augment_once(img, &cfg.augment, &stream.derive(i as u64, j as u64))?;
                    let name = format!("{stem}_aug{j}.png");
                    encode_png(&aug, &out.join(&name))?;
                    listing.push_str(&format!("{id}\t{name}\n"));
                }
            }
            io.emit(None, &listing)?;
            Ok(())
        }
        Command::Train {
            dataset,
            loss,
            n,
            m,
            steps,
            log,
            common,
        } => {
            let mut cfg = load_run_config(&common)?;
            cfg.loss_kind = loss.unwrap_or(cfg.loss_kind);
            cfg.n_sources_per_batch = n.unwrap_or(cfg.n_sources_per_batch);
            cfg.augments_per_source = m.unwrap_or(cfg.augments_per_source);
            cfg.steps = steps.unwrap_or(cfg.steps);
            cfg.validate()?;
            let out = require_out(&common, "checkpoint")?;
            let data = load_named_dataset(&dataset)?;
            io.progress(format_args!(
                "training on {} images for {} steps",
                data.images.len(),
                cfg.steps
            ));
            let mut progress = Progress {
                io,
                total: cfg.steps,
                log: String::new(),
            };
            let state = train_with(&data.images, &cfg.train_config(), &cfg.encoder, &mut progress)?;
            let log_text = std::mem::take(&mut progress.log);
            save_checkpoint(
                &Checkpoint {
                    state,
                    loss_kind: cfg.loss_kind,
                    seed: cfg.seed,
                },
                &out,
            )?;
            io.emit(log.as_deref(), &log_text)?;
            Ok(())
        }
        Command::Embed {
            checkpoint,
            dataset,
            short_side,
            common,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let out = require_out(&common, "embedding store")?;
            let data = load_named_dataset(&dataset)?;
            let emb = ckpt.state.embed(&data.images, short_side)?;
            save_embeddings(&data.ids, &emb, &out)?;
            io.progress(format_args!("embedded {} images into {} dims", emb.rows(), emb.cols()));
            Ok(())
        }
        Command::Retrieve {
            store,
            query,
            k,
            common,
        } => {
            let index = load_embeddings(&store)?;
            let ranked = knn_by_id(&index, &query, k)?;
            let text: String = ranked
                .neighbors
                .iter()
                .zip(&ranked.distances)
                .enumerate()
                .map(|(r, (id, d))| format!("{}\t{id}\t{d}\n", r + 1))
                .collect();
            io.emit(common.out.as_deref(), &text)?;
            Ok(())
        }
        Command::EvalPairs {
            checkpoint,
            dataset,
            k,
            short_side,
            common,
        } => {
            let cfg = load_run_config(&common)?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let data = load_named_dataset(&dataset)?;
            let embedder = EncoderEmbedder {
                state: &ckpt.state,
                short_side,
            };
            let result = pair_retrieval_eval(&embedder, &data.images, &cfg.augment, &k, cfg.seed)?;
            let metrics: BTreeMap<String, f64> = result.accuracy.iter().map(|(k, v)| (format!("top{k}"), *v)).collect();
            let report = Report::new(
                "pair_retrieval",
                json!({
                    "n_sources": result.n_sources,
                    "pooled": result.pooled,
                    "k": k,
                    "short_side": short_side,
                    "augment": cfg.augment,
                }),
                metrics,
                cfg.seed,
            )?;
            io.emit(common.out.as_deref(), &report.to_json())?;
            Ok(())
        }
        Command::Cluster {
            store,
            k,
            labels,
            restarts,
            common,
        } => {
            let seed = common.seed.unwrap_or(0);
            let index = load_embeddings(&store)?;
            let result = kmeans(index.vectors(), k, seed, restarts)?;
            let mut metrics = json!({
                "inertia": result.inertia,
                "iterations": result.iterations,
                "assignment": index.ids().iter().zip(&result.labels).map(|(id, &l)| (id.clone(), l)).collect::<BTreeMap<_, _>>(),
            });
            if let Some(path) = labels {
                let truth = read_labels(&path, index.len())?;
                metrics["hungarian_accuracy"] = json!(hungarian_accuracy(&result.labels, &truth)?);
            }
            let report = Report::new(
                "kmeans",
                json!({ "k": k, "restarts": restarts, "items": index.len() }),
                metrics,
                seed,
            )?;
            io.emit(common.out.as_deref(), &report.to_json())?;
            Ok(())
        }
        Command::Probe {
            checkpoint,
            dataset,
            labels,
            tap,
            kind,
            epochs,
            common,
        } => {
            let seed = common.seed.unwrap_or(0);
            let ckpt = load_checkpoint(&checkpoint)?;
            let data = load_named_dataset(&dataset)?;
            let truth = read_labels(&labels, data.images.len())?;
            let spec = ProbeSpec {
                kind: kind.into(),
                n_classes: truth.iter().max().map_or(0, |&m| m + 1),
                epochs,
                seed,
                ..ProbeSpec::default()
            };
            let outcome = probe_encoder(&ckpt.state, &data.images, &truth, tap, &spec)?;
            let report = Report::new("probe", json!({ "tap": tap.to_string(), "probe": spec }), outcome, seed)?;
            io.emit(common.out.as_deref(), &report.to_json())?;
            Ok(())
        }
        Command::Map {
            store,
            relevance,
            common,
        } => {
            let index = load_embeddings(&store)?;
            let text = std::fs::read_to_string(&relevance).map_err(|e| Error::io(&relevance, e))?;
            let parsed: BTreeMap<String, Vec<String>> = serde_json::from_str(&text).map_err(|e| Error::Schema {
                path: relevance.display().to_string(),
                message: e.to_string(),
            })?;
            let queries: Vec<String> = parsed.keys().cloned().collect();
            let sets: HashMap<String, HashSet<String>> =
                parsed.into_iter().map(|(q, r)| (q, r.into_iter().collect())).collect();
            let map = mean_average_precision(&index, &queries, &sets)?;
            let report = Report::new("map", json!({ "queries": queries.len() }), json!({ "map": map }), 0)?;
            io.emit(common.out.as_deref(), &report.to_json())?;
            Ok(())
        }
        Command::Project { store, common } => {
            let index = load_embeddings(&store)?;
            let projection = pca_project(index.vectors())?;
            io.emit(common.out.as_deref(), &projection_tsv(index.ids(), &projection.coords)?)?;
            Ok(())
        }
    }
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I, stdout: &mut (dyn Write + Send), stderr: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{}", e.render());
                    0
                }
                _ => {
                    let _ = write!(stderr, "{}", e.render());
                    1
                }
            };
        }
    };
    let mut io = Io { stdout, stderr };
    let result = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| run_command(cli.command, &mut io)),
            Err(e) => Err(Failure::Usage(format!("cannot start {n} threads: {e}"))),
        },
        None => run_command(cli.command, &mut io),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(io.stderr, "error: {msg}");
            1
        }
        Err(Failure::Data(e)) => {
            let _ = writeln!(io.stderr, "error: {e}");
            2
        }
    }
}

pub fn main() -> i32 {
    let (mut out, mut err) = (std::io::stdout(), std::io::stderr());
    run(std::env::args_os(), &mut out, &mut err)
}
