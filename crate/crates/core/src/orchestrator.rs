//! Routed inference: classify the tracer, run that tracer's fold ensemble
//! with flip test-time augmentation, threshold the mean probability.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::discriminator::{predict_tracer, Tracer};
use crate::nifti::{read_volume_as, write_volume, write_volume_with, Datatype, NiftiError, WriteOptions};
use crate::nn::{NnError, Sequential};
use crate::preprocess::{build_channels, tracer_mip, ChannelStack, MipSpec, PreprocessError, WindowSpec, CHANNEL_NAMES};
use crate::volume::{BinaryMask, Volume3D, VolumeError, VolumeKind};

pub const DEFAULT_FOLDS: usize = 6;
pub const DEFAULT_TTA_REDUCTION_THRESHOLD: usize = 40_000_000;
pub const DEFAULT_TIME_BUDGET_S: f64 = 300.0;
pub const DEFAULT_DECISION_THRESHOLD: f64 = 0.5;
/// SUV mapped to probability 1 by the threshold backend.
pub const DEFAULT_SATURATION_SUV: f64 = 20.0;

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("predictor {name} failed: {reason}")]
    PredictorFailure { name: String, reason: String },
    #[error("shape or spacing mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid ensemble config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Nifti(#[from] NiftiError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

impl OrchestratorError {
    fn failure(name: &str, reason: impl fmt::Display) -> Self {
        OrchestratorError::PredictorFailure {
            name: name.to_string(),
            reason: reason.to_string(),
        }
    }
}

/// One of the eight axis-flip combinations; bit 0 flips x, bit 1 y, bit 2 z.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Flip(u8);

impl Flip {
    pub const IDENTITY: Flip = Flip(0);
    pub const X: Flip = Flip(1);
    pub const Y: Flip = Flip(2);
    pub const Z: Flip = Flip(4);

    pub fn from_bits(bits: u8) -> Option<Flip> {
        (bits < 8).then_some(Flip(bits))
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn all() -> Vec<Flip> {
        (0..8).map(Flip).collect()
    }

    pub fn flips_axis(self, axis: usize) -> bool {
        self.0 & (1 << axis) != 0
    }

    /// Source index in the unflipped grid for each index of the flipped one.
    fn permutation(self, shape: [usize; 3]) -> Vec<usize> {
        let [nx, ny, nz] = shape;
        let mut out = Vec::with_capacity(nx * ny * nz);
        for z in 0..nz {
            let sz = if self.flips_axis(2) { nz - 1 - z } else { z };
            for y in 0..ny {
                let sy = if self.flips_axis(1) { ny - 1 - y } else { y };
                let row = nx * (sy + ny * sz);
                if self.flips_axis(0) {
                    out.extend((0..nx).rev().map(|x| row + x));
                } else {
                    out.extend(row..row + nx);
                }
            }
        }
        out
    }

    /// Flips are involutions, so this is also the inverse.
    pub fn apply(self, vol: &Volume3D) -> Volume3D {
        if self == Flip::IDENTITY {
            return vol.clone();
        }
        let src = vol.data();
        let data = self.permutation(vol.shape()).into_iter().map(|i| src[i]).collect();
        vol.with_data(data).expect("same length")
    }

    pub fn apply_mask(self, mask: &BinaryMask) -> BinaryMask {
        if self == Flip::IDENTITY {
            return mask.clone();
        }
        let src = mask.bits();
        let bits = self.permutation(mask.shape()).into_iter().map(|i| src[i]).collect();
        BinaryMask::new(mask.shape(), mask.spacing(), bits).expect("same grid")
    }

    pub fn apply_stack(self, stack: &ChannelStack) -> ChannelStack {
        let c = stack.channels();
        let flipped = ChannelStack::from_channels([
            self.apply(&c[0]),
            self.apply(&c[1]),
            self.apply(&c[2]),
            self.apply(&c[3]),
        ])
        .expect("flipping preserves the grid");
        match stack.exclusion() {
            Some(m) => flipped.with_exclusion(self.apply_mask(m)).expect("flipping preserves the grid"),
            None => flipped,
        }
    }
}

impl fmt::Display for Flip {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 == 0 {
            return f.write_str("identity");
        }
        for (axis, c) in ['x', 'y', 'z'].into_iter().enumerate() {
            if self.flips_axis(axis) {
                write!(f, "{c}")?;
            }
        }
        Ok(())
    }
}

impl FromStr for Flip {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        if s == "identity" || s == "none" {
            return Ok(Flip::IDENTITY);
        }
        let mut bits = 0u8;
        for c in s.chars() {
            let b = match c {
                'x' => 1,
                'y' => 2,
                'z' => 4,
                _ => return Err(format!("flip {s:?}: expected 'identity' or a combination of x, y, z")),
            };
            if bits & b != 0 {
                return Err(format!("flip {s:?} repeats axis {c}"));
            }
            bits |= b;
        }
        Ok(Flip(bits))
    }
}

impl Serialize for Flip {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Flip {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Sorted, deduplicated flip list.
pub fn canonical_flips(flips: &[Flip]) -> Vec<Flip> {
    flips.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
}

/// A segmentation backend: channel stack in, probability map on the same grid out.
pub trait Predictor: Send + Sync {
    fn name(&self) -> &str;

    /// Spacing the backend was trained at; forwarded to external backends.
    fn target_spacing(&self) -> [f64; 3] {
        [3.3, 3.3, 3.3]
    }

    fn predict(&self, stack: &ChannelStack) -> Result<Volume3D, OrchestratorError>;
}

/// Voxelwise `clip(pet) / saturation_suv`, zeroed inside the stack's
/// exclusion mask when `respect_exclusion` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuvThreshold {
    pub name: String,
    #[serde(default = "default_saturation")]
    pub saturation_suv: f64,
    #[serde(default = "yes")]
    pub respect_exclusion: bool,
}

fn default_saturation() -> f64 {
    DEFAULT_SATURATION_SUV
}

fn yes() -> bool {
    true
}

impl SuvThreshold {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            saturation_suv: DEFAULT_SATURATION_SUV,
            respect_exclusion: true,
        }
    }

    /// The backend as a pure function of PET and exclusion mask.
    pub fn probability(&self, pet_clipped: &Volume3D, exclusion: Option<&BinaryMask>) -> Result<Volume3D, OrchestratorError> {
        if !(self.saturation_suv > 0.0) {
            return Err(OrchestratorError::failure(&self.name, "saturation_suv must be positive"));
        }
        let mut data: Vec<f64> = pet_clipped
            .data()
            .iter()
            .map(|&v| (v / self.saturation_suv).clamp(0.0, 1.0))
            .collect();
        if let (true, Some(mask)) = (self.respect_exclusion, exclusion) {
            for (d, &m) in data.iter_mut().zip(mask.bits()) {
                if m {
                    *d = 0.0;
                }
            }
        }
        Ok(pet_clipped.derive(VolumeKind::Probability, data)?)
    }
}

impl Predictor for SuvThreshold {
    fn name(&self) -> &str {
        &self.name
    }

    fn predict(&self, stack: &ChannelStack) -> Result<Volume3D, OrchestratorError> {
        self.probability(stack.pet_clipped(), stack.exclusion())
    }
}

/// Request handed to an external backend as its single argument.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalRequest {
    pub case_id: String,
    /// ct, pet, ct_clipped, pet_clipped.
    pub channel_paths: Vec<PathBuf>,
    pub target_spacing: [f64; 3],
    pub output_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exclusion_path: Option<PathBuf>,
}

/// Backend run as a child process over NIfTI files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalPredictor {
    pub name: String,
    /// Program and leading arguments; the request path is appended.
    pub command: Vec<String>,
    #[serde(default = "default_target_spacing")]
    pub target_spacing: [f64; 3],
}

fn default_target_spacing() -> [f64; 3] {
    [3.3, 3.3, 3.3]
}

impl ExternalPredictor {
    fn run(&self, stack: &ChannelStack, dir: &Path) -> Result<Volume3D, OrchestratorError> {
        let fail = |e: &dyn fmt::Display| OrchestratorError::failure(&self.name, e);
        let mut channel_paths = Vec::with_capacity(4);
        for (vol, name) in stack.channels().iter().zip(CHANNEL_NAMES) {
            let p = dir.join(format!("{name}.nii.gz"));
            write_volume_with(
                vol,
                &p,
                WriteOptions {
                    datatype: Some(Datatype::Float32),
                    ..Default::default()
                },
            )
            .map_err(|e| fail(&e))?;
            channel_paths.push(p);
        }
        let exclusion_path = match stack.exclusion() {
            Some(m) => {
                let p = dir.join("exclusion.nii.gz");
                write_volume(&m.to_volume(), &p).map_err(|e| fail(&e))?;
                Some(p)
            }
            None => None,
        };
        let request = ExternalRequest {
            case_id: self.name.clone(),
            channel_paths,
            target_spacing: self.target_spacing,
            output_path: dir.join("probability.nii.gz"),
            exclusion_path,
        };
        let request_path = dir.join("request.json");
        std::fs::write(&request_path, serde_json::to_vec_pretty(&request).expect("serializable"))
            .map_err(|e| fail(&e))?;
        let (program, args) = self
            .command
            .split_first()
            .ok_or_else(|| fail(&"empty command"))?;
        let output = Command::new(program)
            .args(args)
            .arg(&request_path)
            .output()
            .map_err(|e| fail(&format!("spawn {program}: {e}")))?;
        if !output.status.success() {
            let stderr = String::from_utf8_lossy(&output.stderr);
            return Err(fail(&format!("{} ({})", output.status, stderr.trim())));
        }
        let prob = read_volume_as(&request.output_path, Some(VolumeKind::Probability)).map_err(|e| fail(&e))?;
        stack.pet().derive(VolumeKind::Probability, prob.into_data()).map_err(|e| fail(&e))
    }
}

impl Predictor for ExternalPredictor {
    fn name(&self) -> &str {
        &self.name
    }

    fn target_spacing(&self) -> [f64; 3] {
        self.target_spacing
    }

    fn predict(&self, stack: &ChannelStack) -> Result<Volume3D, OrchestratorError> {
        let dir = tempfile::Builder::new()
            .prefix("tracerseg-predictor-")
            .tempdir()
            .map_err(|e| OrchestratorError::failure(&self.name, e))?;
        self.run(stack, dir.path())
    }
}

/// Serializable description of one fold predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case")]
pub enum PredictorSpec {
    SuvThreshold(SuvThreshold),
    External(ExternalPredictor),
}

impl PredictorSpec {
    pub fn build(&self) -> Arc<dyn Predictor> {
        match self {
            PredictorSpec::SuvThreshold(p) => Arc::new(p.clone()),
            PredictorSpec::External(p) => Arc::new(p.clone()),
        }
    }
}

/// Ensemble settings other than the predictors themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TtaSettings {
    pub tta_flips: Vec<Flip>,
    /// Stacks with more voxels than this use `reduced_flips`.
    pub tta_reduction_threshold: usize,
    pub reduced_flips: Vec<Flip>,
    pub time_budget_s: f64,
    pub decision_threshold: f64,
    /// Concurrent predictor invocations.
    pub workers: usize,
}

impl Default for TtaSettings {
    fn default() -> Self {
        Self {
            tta_flips: Flip::all(),
            tta_reduction_threshold: DEFAULT_TTA_REDUCTION_THRESHOLD,
            reduced_flips: vec![Flip::IDENTITY, Flip::Z],
            time_budget_s: DEFAULT_TIME_BUDGET_S,
            decision_threshold: DEFAULT_DECISION_THRESHOLD,
            workers: 1,
        }
    }
}

impl TtaSettings {
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let bad = |m: String| Err(OrchestratorError::InvalidConfig(m));
        if !self.tta_flips.contains(&Flip::IDENTITY) {
            return bad("tta_flips must include identity".into());
        }
        if !self.reduced_flips.contains(&Flip::IDENTITY) {
            return bad("reduced_flips must include identity".into());
        }
        if let Some(f) = self.reduced_flips.iter().find(|f| !self.tta_flips.contains(f)) {
            return bad(format!("reduced flip {f} is not in tta_flips"));
        }
        if !(self.decision_threshold >= 0.0 && self.decision_threshold <= 1.0) {
            return bad(format!("decision_threshold {} outside [0, 1]", self.decision_threshold));
        }
        if !(self.time_budget_s > 0.0) {
            return bad("time_budget_s must be positive".into());
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        Ok(())
    }

    /// Flip set for a stack of `voxels` voxels: reduced iff strictly above the threshold.
    pub fn select_flips(&self, voxels: usize) -> (Vec<Flip>, bool) {
        if voxels > self.tta_reduction_threshold {
            (canonical_flips(&self.reduced_flips), true)
        } else {
            (canonical_flips(&self.tta_flips), false)
        }
    }
}

/// JSON form of an ensemble: predictor specs plus TTA settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub folds: Vec<PredictorSpec>,
    #[serde(flatten)]
    pub settings: TtaSettings,
}

impl EnsembleSpec {
    /// `folds` copies of the threshold backend named `{prefix}_fold{i}`.
    pub fn suv_threshold(prefix: &str, folds: usize) -> Self {
        Self {
            folds: (0..folds)
                .map(|i| PredictorSpec::SuvThreshold(SuvThreshold::new(format!("{prefix}_fold{i}"))))
                .collect(),
            settings: TtaSettings::default(),
        }
    }

    pub fn build(&self) -> Result<EnsembleConfig, OrchestratorError> {
        EnsembleConfig::new(self.folds.iter().map(PredictorSpec::build).collect(), self.settings.clone())
    }
}

/// Fold predictors plus settings, ready to run.
#[derive(Clone)]
pub struct EnsembleConfig {
    folds: Vec<Arc<dyn Predictor>>,
    pub settings: TtaSettings,
}

impl fmt::Debug for EnsembleConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EnsembleConfig")
            .field("folds", &self.fold_names())
            .field("settings", &self.settings)
            .finish()
    }
}

impl EnsembleConfig {
    /// Folds are kept sorted by name, which fixes the summation order.
    pub fn new(mut folds: Vec<Arc<dyn Predictor>>, settings: TtaSettings) -> Result<Self, OrchestratorError> {
        if folds.is_empty() {
            return Err(OrchestratorError::InvalidConfig("at least one fold predictor is required".into()));
        }
        settings.validate()?;
        folds.sort_by(|a, b| a.name().cmp(b.name()));
        if let Some(w) = folds.windows(2).find(|w| w[0].name() == w[1].name()) {
            return Err(OrchestratorError::InvalidConfig(format!(
                "predictor name {:?} used twice",
                w[0].name()
            )));
        }
        Ok(Self { folds, settings })
    }

    pub fn folds(&self) -> &[Arc<dyn Predictor>] {
        &self.folds
    }

    pub fn fold_names(&self) -> Vec<String> {
        self.folds.iter().map(|p| p.name().to_string()).collect()
    }
}

/// One predictor call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Invocation {
    pub predictor: String,
    pub flip: Flip,
}

/// Shared, append-only record of predictor calls.
#[derive(Debug, Clone, Default)]
pub struct InvocationLog(Arc<Mutex<Vec<Invocation>>>);

impl InvocationLog {
    fn record(&self, predictor: &str, flip: Flip) {
        self.0.lock().expect("log lock").push(Invocation {
            predictor: predictor.to_string(),
            flip,
        });
    }

    /// Calls in canonical (predictor, flip) order.
    pub fn sorted(&self) -> Vec<Invocation> {
        let mut v = self.0.lock().expect("log lock").clone();
        v.sort_by(|a, b| (&a.predictor, a.flip).cmp(&(&b.predictor, b.flip)));
        v
    }

    pub fn len(&self) -> usize {
        self.0.lock().expect("log lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn checked_predict(
    p: &dyn Predictor,
    stack: &ChannelStack,
    flip: Flip,
    log: &InvocationLog,
) -> Result<Volume3D, OrchestratorError> {
    log.record(p.name(), flip);
    let flipped = flip.apply_stack(stack);
    let out = p.predict(&flipped)?;
    if out.shape() != stack.shape() {
        return Err(OrchestratorError::failure(
            p.name(),
            format!("output shape {:?} differs from input {:?}", out.shape(), stack.shape()),
        ));
    }
    if let Some((i, v)) = out.data().iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
        return Err(OrchestratorError::failure(p.name(), format!("voxel {i} = {v} outside [0, 1]")));
    }
    Ok(flip.apply(&out))
}

/// Elementwise sum of `parts` by recursive halving in slice order.
fn pairwise_sum(parts: &[Volume3D]) -> Vec<f64> {
    if parts.len() == 1 {
        return parts[0].data().to_vec();
    }
    let (lo, hi) = parts.split_at(parts.len() / 2);
    let mut acc = pairwise_sum(lo);
    for (a, b) in acc.iter_mut().zip(pairwise_sum(hi)) {
        *a += b;
    }
    acc
}

/// Elementwise mean of `parts`, summed pairwise in slice order.
fn mean_of(parts: Vec<Volume3D>) -> Volume3D {
    let n = parts.len() as f64;
    let mut acc = pairwise_sum(&parts);
    if n != 1.0 {
        for a in &mut acc {
            *a /= n;
        }
    }
    parts[0].derive(VolumeKind::Probability, acc).expect("same grid")
}

/// Voxelwise mean over `flips` of `f⁻¹(p(f(stack)))`, summed pairwise in flip order.
pub fn tta_predict(
    p: &dyn Predictor,
    stack: &ChannelStack,
    flips: &[Flip],
    log: &InvocationLog,
) -> Result<Volume3D, OrchestratorError> {
    let flips = canonical_flips(flips);
    if !flips.contains(&Flip::IDENTITY) {
        return Err(OrchestratorError::InvalidConfig("flip set must include identity".into()));
    }
    let parts = flips
        .iter()
        .map(|&f| checked_predict(p, stack, f, log))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(mean_of(parts))
}

#[derive(Debug, Clone)]
pub struct EnsembleOutput {
    pub probability: Volume3D,
    pub flips: Vec<Flip>,
    /// The size rule picked the reduced set.
    pub reduced_by_size: bool,
    /// The projected run time picked the reduced set.
    pub reduced_by_deadline: bool,
    pub projected_s: f64,
    pub invocations: Vec<Invocation>,
}

fn run_jobs<T: Send>(
    workers: usize,
    jobs: Vec<Box<dyn FnOnce() -> T + Send + '_>>,
) -> Vec<T> {
    if workers <= 1 || jobs.len() <= 1 {
        return jobs.into_iter().map(|j| j()).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("thread pool");
    let slots: Vec<Mutex<Option<T>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    pool.scope(|s| {
        for (job, slot) in jobs.into_iter().zip(&slots) {
            s.spawn(move |_| *slot.lock().expect("slot") = Some(job()));
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().expect("slot").expect("job ran"))
        .collect()
}

/// Mean over folds of each fold's TTA mean. Folds and flips are combined in
/// canonical order after all calls finish, so the result is independent of
/// scheduling. The first (fold, identity) call is timed; when the projected
/// total exceeds the time budget the reduced flip set is used instead.
pub fn ensemble_predict(cfg: &EnsembleConfig, stack: &ChannelStack) -> Result<EnsembleOutput, OrchestratorError> {
    let s = &cfg.settings;
    let log = InvocationLog::default();
    let (mut flips, reduced_by_size) = s.select_flips(stack.voxel_count());

    let start = Instant::now();
    let first = checked_predict(cfg.folds[0].as_ref(), stack, Flip::IDENTITY, &log)?;
    let single = start.elapsed().as_secs_f64();
    let projected_s = single * (cfg.folds.len() * flips.len()) as f64;
    let mut reduced_by_deadline = false;
    if !reduced_by_size && projected_s > s.time_budget_s {
        flips = canonical_flips(&s.reduced_flips);
        reduced_by_deadline = true;
    }

    let mut tasks = Vec::new();
    for (fi, p) in cfg.folds.iter().enumerate() {
        for &f in &flips {
            if !(fi == 0 && f == Flip::IDENTITY) {
                tasks.push((fi, f, p.clone()));
            }
        }
    }
    let jobs: Vec<Box<dyn FnOnce() -> Result<Volume3D, OrchestratorError> + Send + '_>> = tasks
        .iter()
        .map(|(_, f, p)| {
            let (f, p, log) = (*f, p.clone(), log.clone());
            Box::new(move || checked_predict(p.as_ref(), stack, f, &log)) as Box<dyn FnOnce() -> _ + Send>
        })
        .collect();
    let results = run_jobs(s.workers, jobs);

    let mut per_fold: Vec<Vec<Option<Volume3D>>> = vec![vec![None; flips.len()]; cfg.folds.len()];
    per_fold[0][flips.iter().position(|&f| f == Flip::IDENTITY).expect("identity")] = Some(first);
    for ((fi, f, _), r) in tasks.iter().zip(results) {
        let slot = flips.iter().position(|g| g == f).expect("flip in set");
        per_fold[*fi][slot] = Some(r?);
    }
    let fold_means: Vec<Volume3D> = per_fold
        .into_iter()
        .map(|parts| mean_of(parts.into_iter().map(|p| p.expect("every slot filled")).collect()))
        .collect();
    Ok(EnsembleOutput {
        probability: mean_of(fold_means),
        flips,
        reduced_by_size,
        reduced_by_deadline,
        projected_s,
        invocations: log.sorted(),
    })
}

/// Voxels with probability `>= t`.
pub fn threshold_mask(prob: &Volume3D, t: f64) -> BinaryMask {
    BinaryMask::new(prob.shape(), prob.spacing(), prob.data().iter().map(|&v| v >= t).collect())
        .expect("volume grid is valid")
}

/// Inputs to [`route`] besides the volumes and models.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RouteOptions {
    pub window: WindowSpec,
    pub mip: MipSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct RoutedResult {
    pub tracer: Tracer,
    pub tracer_probability: f64,
    pub mask: BinaryMask,
    pub prob_map: Volume3D,
    pub tta_used: Vec<Flip>,
    pub reduced_by_size: bool,
    pub reduced_by_deadline: bool,
    pub invocations: Vec<Invocation>,
    pub timings: Vec<StageTiming>,
    pub wall_time_s: f64,
    /// Wall time went over the ensemble's budget. Reported, never enforced.
    pub budget_exceeded: bool,
}

/// Discriminate the tracer from the PET MIP, then segment with that
/// tracer's ensemble. `exclusion` is an optional organ mask on the input grid.
pub fn route(
    ct: &Volume3D,
    pet: &Volume3D,
    exclusion: Option<&BinaryMask>,
    disc: &Sequential,
    cfg_fdg: &EnsembleConfig,
    cfg_psma: &EnsembleConfig,
    opts: &RouteOptions,
) -> Result<RoutedResult, OrchestratorError> {
    if !ct.same_grid(pet) {
        return Err(OrchestratorError::ShapeMismatch(format!(
            "ct {:?} @ {:?} mm vs pet {:?} @ {:?} mm",
            ct.shape(),
            ct.spacing(),
            pet.shape(),
            pet.spacing()
        )));
    }
    let start = Instant::now();
    let mut timings = Vec::new();
    let mut lap = Instant::now();
    let mut stage = |name: &str, lap: &mut Instant| {
        timings.push(StageTiming {
            stage: name.to_string(),
            seconds: lap.elapsed().as_secs_f64(),
        });
        *lap = Instant::now();
    };

    let mip = tracer_mip(pet, &opts.mip)?;
    stage("mip", &mut lap);
    let pred = predict_tracer(disc, &mip)?;
    stage("discriminate", &mut lap);
    let cfg = match pred.tracer {
        Tracer::Fdg => cfg_fdg,
        Tracer::Psma => cfg_psma,
    };
    let mut stack = build_channels(ct, pet, &opts.window)?;
    if let Some(m) = exclusion {
        stack = stack.with_exclusion(m.clone())?;
    }
    stage("channels", &mut lap);
    let out = ensemble_predict(cfg, &stack)?;
    stage("ensemble", &mut lap);
    let mask = threshold_mask(&out.probability, cfg.settings.decision_threshold);
    stage("threshold", &mut lap);
    let wall_time_s = start.elapsed().as_secs_f64();
    Ok(RoutedResult {
        tracer: pred.tracer,
        tracer_probability: pred.probability,
        mask,
        prob_map: out.probability,
        tta_used: out.flips,
        reduced_by_size: out.reduced_by_size,
        reduced_by_deadline: out.reduced_by_deadline,
        invocations: out.invocations,
        timings,
        wall_time_s,
        budget_exceeded: wall_time_s > cfg.settings.time_budget_s,
    })
}
