//! Command-line front end. Every output-producing subcommand writes a
//! [`RunManifest`] next to its output.

mod commands;
mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub use commands::{DatasetItem, DatasetManifest, RunConfig};
pub use manifest::{manifest_path_for, sha256_file, InputDigest, RunManifest};

use crate::discriminator::DiscriminatorError;
use crate::fusion::FusionError;
use crate::metrics::MetricsError;
use crate::nifti::NiftiError;
use crate::nn::NnError;
use crate::orchestrator::OrchestratorError;
use crate::preprocess::PreprocessError;
use crate::synth::SynthError;
use crate::volume::VolumeError;

/// Exit code for a tracer prediction of FDG.
pub const EXIT_FDG: u8 = 10;
/// Exit code for a tracer prediction of PSMA.
pub const EXIT_PSMA: u8 = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Io,
    Validation,
    Predictor,
}

impl ErrorKind {
    pub fn exit_code(self) -> u8 {
        match self {
            ErrorKind::Usage => 1,
            ErrorKind::Io => 2,
            ErrorKind::Validation => 3,
            ErrorKind::Predictor => 4,
        }
    }

    fn name(self) -> &'static str {
        match self {
            ErrorKind::Usage => "usage",
            ErrorKind::Io => "io",
            ErrorKind::Validation => "validation",
            ErrorKind::Predictor => "predictor",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Usage,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Io,
            message: message.into(),
        }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Validation,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

macro_rules! validation_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::validation(e.to_string())
            }
        }
    )*};
}

validation_from!(VolumeError, PreprocessError, SynthError, serde_json::Error);

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::io(e.to_string())
    }
}

impl From<NiftiError> for CliError {
    fn from(e: NiftiError) -> Self {
        match e {
            NiftiError::Io { .. } => CliError::io(e.to_string()),
            _ => CliError::validation(e.to_string()),
        }
    }
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::Io(_) => CliError::io(e.to_string()),
            _ => CliError::validation(e.to_string()),
        }
    }
}

impl From<DiscriminatorError> for CliError {
    fn from(e: DiscriminatorError) -> Self {
        match e {
            DiscriminatorError::Nn(inner) => inner.into(),
            _ => CliError::validation(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Nifti(inner) => inner.into(),
            _ => CliError::validation(e.to_string()),
        }
    }
}

impl From<FusionError> for CliError {
    fn from(e: FusionError) -> Self {
        match e {
            FusionError::Nifti(inner) => inner.into(),
            _ => CliError::validation(e.to_string()),
        }
    }
}

impl From<OrchestratorError> for CliError {
    fn from(e: OrchestratorError) -> Self {
        match e {
            OrchestratorError::PredictorFailure { .. } => Self {
                kind: ErrorKind::Predictor,
                message: e.to_string(),
            },
            OrchestratorError::Nifti(inner) => inner.into(),
            OrchestratorError::Nn(inner) => inner.into(),
            _ => CliError::validation(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "tracerseg", version, about = "Tracer-routed PET/CT lesion segmentation")]
pub struct Cli {
    /// Print errors to stderr as JSON
    #[arg(long, global = true)]
    pub json: bool,
    /// Worker threads for per-case parallel work (synth, evaluate) and concurrent predictor calls (run)
    #[arg(long, global = true, value_name = "N", default_value_t = 1)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print a volume's header and voxel statistics
    Inspect(InspectArgs),
    /// Resample a volume onto a new voxel spacing
    Resample(ResampleArgs),
    /// Write the four-channel segmentation input (raw and windowed CT/PET)
    Window(WindowArgs),
    /// Coronal MIP of a PET volume as the discriminator sees it
    Mip(MipArgs),
    /// Generate a synthetic phantom corpus
    Synth(SynthArgs),
    /// Train the tracer discriminator
    TrainDisc(TrainDiscArgs),
    /// K-fold cross-validation of the tracer discriminator
    CvDisc(CvDiscArgs),
    /// Classify the tracer of a PET volume (exit code 10 = FDG, 11 = PSMA)
    PredictTracer(PredictTracerArgs),
    /// Merge organ masks and a lesion mask into one grouped label map
    Fuse(FuseArgs),
    /// Score predicted masks against ground truth
    Evaluate(EvaluateArgs),
    /// Full routed inference on one case
    Run(RunArgs),
    /// Threshold backend speaking the external predictor file contract
    #[command(hide = true)]
    ThresholdBackend(ThresholdBackendArgs),
}

fn parse_triple(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    let one = |p: &str| p.trim().parse::<f64>().map_err(|_| format!("bad number {p:?} in {s:?}"));
    match parts.as_slice() {
        [v] => {
            let v = one(v)?;
            Ok([v, v, v])
        }
        [a, b, c] => Ok([one(a)?, one(b)?, one(c)?]),
        _ => Err(format!("expected one or three comma-separated numbers, got {s:?}")),
    }
}

fn parse_shape(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    let one = |p: &str| p.trim().parse::<usize>().map_err(|_| format!("bad size {p:?} in {s:?}"));
    match parts.as_slice() {
        [a, b, c] => Ok([one(a)?, one(b)?, one(c)?]),
        _ => Err(format!("expected three comma-separated sizes, got {s:?}")),
    }
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s
        .rsplit_once(',')
        .ok_or_else(|| format!("expected LO,HI, got {s:?}"))?;
    let one = |p: &str| p.trim().parse::<f64>().map_err(|_| format!("bad number {p:?} in {s:?}"));
    Ok((one(a)?, one(b)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum KindArg {
    Pet,
    Ct,
    Label,
    Probability,
}

impl From<KindArg> for crate::volume::VolumeKind {
    fn from(k: KindArg) -> Self {
        use crate::volume::VolumeKind;
        match k {
            KindArg::Pet => VolumeKind::PetSuv,
            KindArg::Ct => VolumeKind::CtHu,
            KindArg::Label => VolumeKind::Label,
            KindArg::Probability => VolumeKind::Probability,
        }
    }
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub path: PathBuf,
    /// Interpret voxels as this kind [default: float files PET, integer files label]
    #[arg(long, value_enum)]
    pub kind: Option<KindArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ResampleMode {
    Trilinear,
    Nearest,
}

#[derive(Debug, Args)]
pub struct ResampleArgs {
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Target spacing in mm, one value or x,y,z
    #[arg(long, value_parser = parse_triple, default_value = "3.3,3.3,3.3")]
    pub spacing: [f64; 3],
    /// Interpolation; nearest is for label maps
    #[arg(long, value_enum, default_value = "trilinear")]
    pub mode: ResampleMode,
    /// Interpret voxels as this kind [default: pet for trilinear, label for nearest]
    #[arg(long, value_enum)]
    pub kind: Option<KindArg>,
}

#[derive(Debug, Args)]
pub struct WindowArgs {
    #[arg(long, value_name = "PATH")]
    pub ct: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub pet: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    /// PET window in SUV
    #[arg(long, value_parser = parse_pair, default_value = "0,20", allow_hyphen_values = true)]
    pub pet_window: (f64, f64),
    /// CT window in HU
    #[arg(long, value_parser = parse_pair, default_value = "-300,400", allow_hyphen_values = true)]
    pub ct_window: (f64, f64),
}

#[derive(Debug, Args)]
pub struct MipArgs {
    #[arg(long, value_name = "PATH")]
    pub pet: PathBuf,
    /// Output NIfTI; the 224×224 image is stored as a 224×1×224 volume
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Isotropic resampling before projection, in mm
    #[arg(long, default_value_t = 3.0)]
    pub spacing: f64,
    /// SUV mapped to 1.0 after clamping
    #[arg(long, default_value_t = 20.0)]
    pub cap_suv: f64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of phantoms; even indices are FDG-like, odd PSMA-like
    #[arg(long, default_value_t = 20)]
    pub n: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    /// Grid size x,y,z
    #[arg(long, value_parser = parse_shape, default_value = "64,48,96")]
    pub shape: [usize; 3],
    /// Voxel spacing in mm, one value or x,y,z
    #[arg(long, value_parser = parse_triple, default_value = "4,4,4")]
    pub spacing: [f64; 3],
}

/// Training flags; each overrides the same field of `--config`.
#[derive(Debug, Args)]
pub struct TrainFlags {
    /// JSON training config; flags take precedence over it
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// AdamW learning rate [default: 1e-4]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Maximum epochs [default: 100]
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Non-improving epochs tolerated before stopping [default: 10]
    #[arg(long)]
    pub patience: Option<usize>,
    /// Mini-batch size [default: 16]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Validation share of each class [default: 0.2]
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Decoupled weight decay [default: 0.01]
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Initialization and shuffling seed [default: 42]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainDiscArgs {
    /// Dataset manifest as written by `synth`
    #[arg(long, value_name = "PATH")]
    pub manifest: PathBuf,
    /// Weights manifest to write; the blob goes next to it with extension .bin
    #[arg(long, value_name = "PATH")]
    pub out_model: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct CvDiscArgs {
    #[arg(long, value_name = "PATH")]
    pub manifest: PathBuf,
    /// Number of folds
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Optional JSON report of per-fold results
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct PredictTracerArgs {
    #[arg(long, value_name = "PATH")]
    pub model: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub pet: PathBuf,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    /// Organ manifest {case_id, lesion_path, organs: {name: path}}
    #[arg(long, value_name = "PATH")]
    pub manifest: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// JSON group table [default: 13 groups, 1 brain .. 12 pancreas, 13 lesion]
    #[arg(long, value_name = "PATH")]
    pub table: Option<PathBuf>,
    /// Skip masks that belong to no group instead of failing
    #[arg(long)]
    pub ignore_unknown: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Predicted masks, matched to ground truth by file name
    #[arg(long, value_name = "DIR")]
    pub pred_dir: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub gt_dir: PathBuf,
    #[arg(long, value_name = "PATH", default_value = "metrics.csv")]
    pub out: PathBuf,
    /// Label value counted as lesion
    #[arg(long, default_value_t = 1)]
    pub label: u32,
    /// Component connectivity: 6, 18 or 26
    #[arg(long, default_value = "26")]
    pub connectivity: crate::metrics::Connectivity,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long, value_name = "PATH")]
    pub ct: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub pet: PathBuf,
    /// Discriminator weights manifest
    #[arg(long, value_name = "PATH")]
    pub disc_model: PathBuf,
    /// JSON run config {fdg, psma, route}; flags take precedence over it
    /// [default: 6 suv_threshold folds per tracer, all 8 flips]
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output mask NIfTI
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Also write the mean probability map here
    #[arg(long, value_name = "PATH")]
    pub prob_out: Option<PathBuf>,
    /// Organ mask (nonzero = organ) handed to predictors as an exclusion region
    #[arg(long, value_name = "PATH")]
    pub organ_mask: Option<PathBuf>,
    /// Soft per-case time budget in seconds [default: 300]
    #[arg(long)]
    pub time_budget: Option<f64>,
    /// Probability at or above which a voxel is lesion [default: 0.5]
    #[arg(long)]
    pub decision_threshold: Option<f64>,
    /// Voxel count above which the reduced flip set is used [default: 40000000]
    #[arg(long)]
    pub tta_reduction_threshold: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ThresholdBackendArgs {
    pub request: PathBuf,
    /// SUV mapped to probability 1
    #[arg(long, default_value_t = 20.0)]
    pub saturation_suv: f64,
}

/// Parse `args` and run. Returns the process exit code.
pub fn run_from<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let json = args.iter().any(|a| a == "--json");
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            return report(&CliError::usage(e.to_string().trim_end()), json);
        }
    };
    match commands::dispatch(&cli) {
        Ok(code) => code,
        Err(e) => report(&e, cli.json),
    }
}

fn report(e: &CliError, json: bool) -> u8 {
    let code = e.kind.exit_code();
    if json {
        let v = serde_json::json!({
            "error": { "kind": e.kind.name(), "code": code, "message": e.message }
        });
        eprintln!("{v}");
    } else {
        eprintln!("error: {}", e.message);
    }
    code
}

pub fn main() -> ExitCode {
    ExitCode::from(run_from(std::env::args_os()))
}
