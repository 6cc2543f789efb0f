//! Command-line driver. Every subcommand prints a JSON summary on success.

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use calltriage::autoenc::Arch;
use calltriage::embed::BackendSpec;
use calltriage::pipeline;
use calltriage::project2d::ProjectionMethod;
use calltriage::store::{Project, ProjectConfig};
use calltriage::synthlab::{NoiseKind, SynthSpec};
use calltriage::triage::ClusterLabel;
use calltriage::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USER: i32 = 1;
pub const EXIT_INTERNAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "calltriage",
    version,
    about = "Semi-supervised triage of bird-call detections"
)]
pub struct Cli {
    /// Project directory.
    #[arg(long, short = 'p', global = true, env = "CALLTRIAGE_PROJECT", default_value = ".")]
    pub project: PathBuf,

    /// Seed for stochastic steps; defaults to the project's configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BackendArg {
    Baseline,
    Autoencoder,
    External,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Pca,
    Umap,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum NoiseArg {
    White,
    Pink,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LabelArg {
    Call,
    Noise,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create an empty project directory.
    Init {
        /// Number of clusters to store in the configuration.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Generate a synthetic corpus with ground truth into the project.
    Synth {
        #[arg(long, default_value_t = 40)]
        n_reference: usize,
        #[arg(long, default_value_t = 30)]
        n_positive: usize,
        #[arg(long, default_value_t = 30)]
        n_negative: usize,
        #[arg(long, default_value_t = 10.0)]
        snr_db: f64,
        #[arg(long, value_enum, default_value = "pink")]
        noise: NoiseArg,
        #[arg(long)]
        length_s: Option<f64>,
    },
    /// Decode recordings and write the window manifest.
    Ingest,
    /// Compute spectrograms and detector scores for every window.
    Spectrogram,
    /// Embed the detector-kept windows.
    Embed {
        #[arg(long, value_enum, default_value = "baseline")]
        backend: BackendArg,
        /// AEMB1 file for the external backend, or a checkpoint for the autoencoder.
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// Train the autoencoder on the kept windows.
    TrainAe {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Divide every channel width by this factor.
        #[arg(long, default_value_t = 1)]
        width_divisor: usize,
    },
    /// k-means over the reference embeddings.
    Cluster {
        #[arg(long)]
        k: Option<usize>,
    },
    /// 2-D projection of all embeddings.
    Project2d {
        #[arg(long, value_enum, default_value = "pca")]
        method: MethodArg,
    },
    /// Label a cluster, or label every cluster from the synthetic annotations.
    Label {
        #[arg(long, required_unless_present = "truth_aware")]
        cluster: Option<usize>,
        #[arg(long, value_enum, required_unless_present = "truth_aware")]
        label: Option<LabelArg>,
        #[arg(long)]
        annotator: Option<String>,
        #[arg(long, conflicts_with_all = ["cluster", "label"])]
        truth_aware: bool,
    },
    /// Propagate cluster labels to field windows.
    Propagate {
        #[arg(long, conflicts_with = "auto")]
        radius: Option<f64>,
        /// Calibrate the radius from the reference embeddings (the default).
        #[arg(long)]
        auto: bool,
    },
    /// Recompute verdicts from the stored propagation and current labels.
    Verdict,
    /// Score verdicts against a ground-truth CSV.
    Evaluate {
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Print the project report.
    Report,
    /// Run the HTTP review service.
    Serve {
        #[arg(long, env = "PORT", default_value_t = 8080)]
        port: u16,
        /// Directory with the built web UI.
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
}

#[derive(Debug)]
pub enum CliError {
    User(String),
    Internal(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_) | Error::Json(_) | Error::Divergence(_) => CliError::Internal(e.to_string()),
            _ => CliError::User(e.to_string()),
        }
    }
}

fn print<T: Serialize>(value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    match writeln!(std::io::stdout(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::Internal(e.to_string())),
        _ => Ok(()),
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USER } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(CliError::User(m)) => {
            eprintln!("error: {m}");
            EXIT_USER
        }
        Err(CliError::Internal(m)) => {
            eprintln!("internal error: {m}");
            EXIT_INTERNAL
        }
    }
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    let root = cli.project;
    if let Command::Init { k } = cli.command {
        let mut config = ProjectConfig::default();
        if let Some(k) = k {
            config.cluster.k = k;
        }
        if let Some(seed) = cli.seed {
            config.seed = seed;
        }
        Project::init(&root, config)?;
        return print(&serde_json::json!({ "project": root }));
    }
    let mut project = Project::open(&root)?;
    let seed = cli.seed.unwrap_or(project.config.seed);
    match cli.command {
        Command::Init { .. } => unreachable!("handled above"),
        Command::Synth {
            n_reference,
            n_positive,
            n_negative,
            snr_db,
            noise,
            length_s,
        } => {
            let mut spec = SynthSpec {
                seed,
                sample_rate: project.config.sample_rate,
                n_reference,
                n_positive,
                n_negative,
                snr_db,
                noise: match noise {
                    NoiseArg::White => NoiseKind::White,
                    NoiseArg::Pink => NoiseKind::Pink,
                },
                ..SynthSpec::default()
            };
            if let Some(len) = length_s {
                spec.recording_len_s = len;
            }
            print(&pipeline::synth(&project, &spec)?)
        }
        Command::Ingest => print(&pipeline::ingest(&mut project)?),
        Command::Spectrogram => print(&pipeline::spectrogram(&mut project)?),
        Command::Embed { backend, file } => {
            let spec = match (backend, file) {
                (BackendArg::Baseline, _) => BackendSpec::BaselineFlatten,
                (BackendArg::Autoencoder, Some(checkpoint)) => BackendSpec::Autoencoder { checkpoint },
                (BackendArg::Autoencoder, None) => pipeline::default_autoencoder_backend(),
                (BackendArg::External, Some(path)) => BackendSpec::External { path },
                (BackendArg::External, None) => {
                    return Err(CliError::User("--backend external requires --file".into()));
                }
            };
            print(&pipeline::embed(&mut project, &spec)?)
        }
        Command::TrainAe {
            epochs,
            batch_size,
            learning_rate,
            width_divisor,
        } => {
            let mut cfg = project.config.train;
            cfg.seed = seed;
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            cfg.batch_size = batch_size.unwrap_or(cfg.batch_size);
            cfg.learning_rate = learning_rate.unwrap_or(cfg.learning_rate);
            let arch = match width_divisor {
                0 => return Err(CliError::User("--width-divisor must be at least 1".into())),
                1 => project.config.autoencoder,
                d => Arch::reduced(d),
            };
            print(&pipeline::train_ae(&project, arch, &cfg)?)
        }
        Command::Cluster { k } => {
            let k = k.unwrap_or(project.config.cluster.k);
            print(&pipeline::cluster(&mut project, k, seed)?)
        }
        Command::Project2d { method } => {
            let method = match method {
                MethodArg::Pca => ProjectionMethod::Pca,
                MethodArg::Umap => ProjectionMethod::Umap,
            };
            let rows = pipeline::project2d(&mut project, method, seed)?;
            print(&serde_json::json!({ "method": method.as_str(), "rows": rows }))
        }
        Command::Label {
            cluster,
            label,
            annotator,
            truth_aware,
        } => {
            let assignments: Vec<(usize, ClusterLabel)> = if truth_aware {
                pipeline::truth_aware_labels(&project)?.into_iter().collect()
            } else {
                let label = match label.expect("required by clap") {
                    LabelArg::Call => ClusterLabel::Call,
                    LabelArg::Noise => ClusterLabel::Noise,
                };
                vec![(cluster.expect("required by clap"), label)]
            };
            let annotator = annotator.or_else(|| truth_aware.then(|| "truth-script".to_string()));
            let mut labels = None;
            for (c, l) in assignments {
                labels = Some(pipeline::label(&mut project, c, l, annotator.clone())?.0);
            }
            print(&labels)
        }
        Command::Propagate { radius, auto: _ } => print(&pipeline::propagate(&mut project, radius)?),
        Command::Verdict => print(&pipeline::verdict(&mut project)?),
        Command::Evaluate { truth } => print(&pipeline::evaluate_project(&mut project, truth.as_deref())?),
        Command::Report => print(&pipeline::report(&project)),
        Command::Serve { port, static_dir } => {
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Internal(e.to_string()))?;
            rt.block_on(crate::api::serve(project, port, static_dir))
                .map_err(|e| CliError::Internal(e.to_string()))
        }
    }
}
