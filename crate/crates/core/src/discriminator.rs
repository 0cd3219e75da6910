//! FDG vs PSMA classification from a coronal PET MIP.
//!
//! Six stride-2 3×3 convolutions take the 224×224 input down to 4×4, then
//! five fully connected layers reduce to one logit. ReLU everywhere, sigmoid
//! at the end.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::layers::sigmoid;
use crate::nn::{adamw_step, mean_bce_with_logits, AdamWConfig, LayerSpec, NnError, Sequential, Tensor};
use crate::preprocess::{MipImage, MIP_SIZE};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiscriminatorError {
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("need at least {k} samples for {k}-fold cross-validation, got {n}")]
    TooFewSamples { k: usize, n: usize },
    #[error("validation loss diverged at epoch {0}")]
    DivergedLoss(usize),
    #[error("case {0} appears in both training and validation splits")]
    OverlappingSplits(String),
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Tracer classes. Label values are fixed project-wide: FDG = 0, PSMA = 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Tracer {
    Fdg,
    Psma,
}

impl Tracer {
    pub fn label(self) -> u8 {
        match self {
            Tracer::Fdg => 0,
            Tracer::Psma => 1,
        }
    }

    pub fn from_label(label: u8) -> Option<Self> {
        match label {
            0 => Some(Tracer::Fdg),
            1 => Some(Tracer::Psma),
            _ => None,
        }
    }

    /// Ties go to PSMA.
    pub fn from_probability(p: f64) -> Self {
        if p >= 0.5 {
            Tracer::Psma
        } else {
            Tracer::Fdg
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Tracer::Fdg => "FDG",
            Tracer::Psma => "PSMA",
        }
    }
}

impl std::fmt::Display for Tracer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Layer widths of the discriminator. Counts are fixed at six convolutions
/// and five linear layers; widths and the conv geometry are free.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorArch {
    pub conv_channels: [usize; 6],
    pub hidden: [usize; 4],
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Default for DiscriminatorArch {
    fn default() -> Self {
        Self {
            conv_channels: [8, 16, 32, 64, 64, 64],
            hidden: [256, 64, 32, 16],
            kernel: 3,
            stride: 2,
            pad: 1,
        }
    }
}

impl DiscriminatorArch {
    pub const INPUT: [usize; 3] = [1, MIP_SIZE, MIP_SIZE];

    pub fn layers(&self) -> Result<Vec<LayerSpec>, DiscriminatorError> {
        let mut layers = Vec::new();
        let mut in_ch = 1;
        for &out_ch in &self.conv_channels {
            layers.push(LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel: self.kernel,
                stride: self.stride,
                pad: self.pad,
            });
            layers.push(LayerSpec::Relu);
            in_ch = out_ch;
        }
        layers.push(LayerSpec::Flatten);
        let flat = crate::nn::infer_shapes(&layers, &Self::INPUT)
            .map_err(|e| DiscriminatorError::Architecture(e.to_string()))?[0];
        let widths: Vec<usize> = std::iter::once(flat).chain(self.hidden).chain([1]).collect();
        for (i, pair) in widths.windows(2).enumerate() {
            layers.push(LayerSpec::Linear {
                input: pair[0],
                output: pair[1],
            });
            layers.push(if i + 2 < widths.len() {
                LayerSpec::Relu
            } else {
                LayerSpec::Sigmoid
            });
        }
        Ok(layers)
    }

    pub fn build(&self, seed: u64) -> Result<Sequential, DiscriminatorError> {
        Ok(Sequential::new(self.layers()?, Self::INPUT.to_vec(), seed)?)
    }

    pub fn zeros(&self) -> Result<Sequential, DiscriminatorError> {
        Ok(Sequential::zeros(self.layers()?, Self::INPUT.to_vec())?)
    }
}

/// Optimization and early-stopping settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub max_epochs: usize,
    /// Non-improving epochs tolerated before stopping.
    pub patience: usize,
    /// Minimum decrease in validation BCE that counts as improvement.
    pub min_delta: f64,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub arch: DiscriminatorArch,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            max_epochs: 100,
            patience: 10,
            min_delta: 1e-6,
            batch_size: 16,
            val_fraction: 0.2,
            weight_decay: 0.01,
            seed: 42,
            arch: DiscriminatorArch::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DiscriminatorError> {
        let bad = |m: &str| Err(DiscriminatorError::Config(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must lie in (0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be nonnegative");
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMip {
    pub image: MipImage,
    pub tracer: Tracer,
    pub case_id: String,
}

/// One row of the training history; epoch 0 is the untrained model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_bce: f64,
    pub val_bce: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Sequential,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_bce: f64,
}

/// History as CSV: `epoch,train_bce,val_bce,val_acc`.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_bce,val_bce,val_acc\n");
    for r in history {
        out.push_str(&format!("{},{:.6},{:.6},{:.6}\n", r.epoch, r.train_bce, r.val_bce, r.val_acc));
    }
    out
}

fn batch_tensor(items: &[&LabeledMip]) -> Tensor {
    let px = MIP_SIZE * MIP_SIZE;
    let mut data = Vec::with_capacity(items.len() * px);
    for item in items {
        data.extend_from_slice(item.image.pixels().data());
    }
    Tensor::new(vec![items.len(), 1, MIP_SIZE, MIP_SIZE], data).unwrap()
}

fn labels(items: &[&LabeledMip]) -> Vec<f64> {
    items.iter().map(|m| m.tracer.label() as f64).collect()
}

/// Mean BCE and accuracy of `model` over `data`.
pub fn evaluate(model: &Sequential, data: &[LabeledMip], batch_size: usize) -> Result<(f64, f64), NnError> {
    let refs: Vec<&LabeledMip> = data.iter().collect();
    let mut loss = 0.0;
    let mut correct = 0usize;
    for chunk in refs.chunks(batch_size.max(1)) {
        let logits = model.logits(&batch_tensor(chunk))?;
        let y = labels(chunk);
        loss += mean_bce_with_logits(&logits, &y).0 * chunk.len() as f64;
        correct += logits
            .iter()
            .zip(chunk)
            .filter(|(&z, m)| Tracer::from_probability(sigmoid(z)) == m.tracer)
            .count();
    }
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}

/// Train one model with AdamW on mean BCE, keeping the parameters of the
/// epoch with the lowest validation BCE. Training stops once `patience + 1`
/// consecutive epochs fail to improve on the best by more than `min_delta`.
pub fn train_fold(
    train: &[LabeledMip],
    val: &[LabeledMip],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, DiscriminatorError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(DiscriminatorError::EmptySplit("training"));
    }
    if val.is_empty() {
        return Err(DiscriminatorError::EmptySplit("validation"));
    }
    let train_ids: std::collections::HashSet<&str> = train.iter().map(|m| m.case_id.as_str()).collect();
    if let Some(dup) = val.iter().find(|m| train_ids.contains(m.case_id.as_str())) {
        return Err(DiscriminatorError::OverlappingSplits(dup.case_id.clone()));
    }

    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed);
    let mut model = cfg.arch.build(cfg.seed)?;
    let opt = cfg.optimizer();

    let (train_bce, _) = evaluate(&model, train, cfg.batch_size)?;
    let (val_bce, val_acc) = evaluate(&model, val, cfg.batch_size)?;
    if !val_bce.is_finite() {
        return Err(DiscriminatorError::DivergedLoss(0));
    }
    let mut history = vec![EpochRecord {
        epoch: 0,
        train_bce,
        val_bce,
        val_acc,
    }];
    let mut best = (val_bce, 0usize, model.clone());
    let mut stale = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let items: Vec<&LabeledMip> = chunk.iter().map(|&i| &train[i]).collect();
            let y = labels(&items);
            let (loss, _, grads) = model.loss_and_grads(&batch_tensor(&items), |z| mean_bce_with_logits(z, &y))?;
            adamw_step(model.params_mut(), &grads, &opt)?;
            loss_sum += loss * items.len() as f64;
        }
        let (val_bce, val_acc) = evaluate(&model, val, cfg.batch_size)?;
        if val_bce.is_nan() {
            return Err(DiscriminatorError::DivergedLoss(epoch));
        }
        history.push(EpochRecord {
            epoch,
            train_bce: loss_sum / train.len() as f64,
            val_bce,
            val_acc,
        });
        if val_bce < best.0 - cfg.min_delta {
            best = (val_bce, epoch, model.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale > cfg.patience {
                break;
            }
        }
    }
    let (best_val_bce, best_epoch, mut model) = best;
    model.params_mut().reset_moments();
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val_bce,
    })
}

/// Stratified fold index for every sample: shuffle each class once, lay the
/// classes end to end, deal round-robin.
pub fn fold_assignment(tracers: &[Tracer], k: usize, seed: u64) -> Result<Vec<usize>, DiscriminatorError> {
    if k < 2 || tracers.len() < k {
        return Err(DiscriminatorError::TooFewSamples { k, n: tracers.len() });
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut dealt = Vec::with_capacity(tracers.len());
    for class in [Tracer::Fdg, Tracer::Psma] {
        let mut idx: Vec<usize> = (0..tracers.len()).filter(|&i| tracers[i] == class).collect();
        idx.shuffle(&mut rng);
        dealt.extend(idx);
    }
    let mut folds = vec![0; tracers.len()];
    for (pos, &i) in dealt.iter().enumerate() {
        folds[i] = pos % k;
    }
    Ok(folds)
}

/// Stratified hold-out of roughly `fraction` of `indices` (at least one).
fn split_validation(
    data: &[LabeledMip],
    indices: &[usize],
    fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in [Tracer::Fdg, Tracer::Psma] {
        let mut idx: Vec<usize> = indices.iter().copied().filter(|&i| data[i].tracer == class).collect();
        idx.shuffle(&mut rng);
        let n_val = ((idx.len() as f64 * fraction).round() as usize).min(idx.len().saturating_sub(1));
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    if val.is_empty() && train.len() > 1 {
        val.push(train.pop().unwrap());
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Stratified train/validation split of all of `data`, then [`train_fold`].
pub fn train_holdout(data: &[LabeledMip], cfg: &TrainConfig) -> Result<TrainOutcome, DiscriminatorError> {
    let all: Vec<usize> = (0..data.len()).collect();
    let (train_idx, val_idx) = split_validation(data, &all, cfg.val_fraction, cfg.seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| data[i].clone()).collect::<Vec<_>>();
    train_fold(&pick(&train_idx), &pick(&val_idx), cfg)
}

/// Independent PRNG stream for fold `fold`.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed ^ (fold as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub held_out: Vec<usize>,
    pub accuracy: f64,
    pub outcome: TrainOutcome,
}

#[derive(Debug, Clone)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
    pub mean_accuracy: f64,
}

impl CvReport {
    pub fn fold_accuracies(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.accuracy).collect()
    }
}

/// k-fold cross-validation. Each fold trains on the other folds (minus a
/// stratified validation slice for early stopping) and is scored on its
/// held-out cases. Folds train in parallel with independent seeds.
pub fn cross_validate(data: &[LabeledMip], k: usize, cfg: &TrainConfig) -> Result<CvReport, DiscriminatorError> {
    let tracers: Vec<Tracer> = data.iter().map(|m| m.tracer).collect();
    let assignment = fold_assignment(&tracers, k, cfg.seed)?;
    let folds: Result<Vec<FoldResult>, DiscriminatorError> = (0..k)
        .into_par_iter()
        .map(|fold| {
            let held_out: Vec<usize> = (0..data.len()).filter(|&i| assignment[i] == fold).collect();
            let rest: Vec<usize> = (0..data.len()).filter(|&i| assignment[i] != fold).collect();
            let seed = fold_seed(cfg.seed, fold);
            let (train_idx, val_idx) = split_validation(data, &rest, cfg.val_fraction, seed);
            let pick = |idx: &[usize]| idx.iter().map(|&i| data[i].clone()).collect::<Vec<_>>();
            let fold_cfg = TrainConfig { seed, ..cfg.clone() };
            let outcome = train_fold(&pick(&train_idx), &pick(&val_idx), &fold_cfg)?;
            let (_, accuracy) = evaluate(&outcome.model, &pick(&held_out), cfg.batch_size)?;
            Ok(FoldResult {
                fold,
                held_out,
                accuracy,
                outcome,
            })
        })
        .collect();
    let folds = folds?;
    let mean_accuracy = folds.iter().map(|f| f.accuracy).sum::<f64>() / k as f64;
    Ok(CvReport { folds, mean_accuracy })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracerPrediction {
    pub probability: f64,
    pub tracer: Tracer,
    pub elapsed: Duration,
}

/// Probability of PSMA for one normalized MIP.
pub fn predict_tracer(model: &Sequential, mip: &MipImage) -> Result<TracerPrediction, NnError> {
    let start = Instant::now();
    let x = Tensor::new(vec![1, 1, MIP_SIZE, MIP_SIZE], mip.pixels().data().to_vec())?;
    let out = model.forward(&x)?;
    if out.len() != 1 {
        return Err(NnError::Shape(format!("discriminator produced {:?}", out.shape())));
    }
    let probability = out.data()[0];
    Ok(TracerPrediction {
        probability,
        tracer: Tracer::from_probability(probability),
        elapsed: start.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Image2D;

    #[test]
    fn reference_architecture() {
        let layers = DiscriminatorArch::default().layers().unwrap();
        let convs = layers.iter().filter(|l| matches!(l, LayerSpec::Conv2d { .. })).count();
        let linears = layers.iter().filter(|l| matches!(l, LayerSpec::Linear { .. })).count();
        assert_eq!((convs, linears), (6, 5));
        assert!(layers.contains(&LayerSpec::Linear {
            input: 1024,
            output: 256
        }));
        assert_eq!(layers.last(), Some(&LayerSpec::Sigmoid));
        let shape = crate::nn::infer_shapes(&layers[..12], &DiscriminatorArch::INPUT).unwrap();
        assert_eq!(shape, vec![64, 4, 4]);
        let model = DiscriminatorArch::default().build(1).unwrap();
        assert!((250_000..450_000).contains(&model.params().scalar_count()));
    }

    #[test]
    fn zero_model_ties_to_psma() {
        let model = DiscriminatorArch::default().zeros().unwrap();
        let mip = MipImage::new(Image2D::zeros(224, 224), [3.0, 3.0]).unwrap();
        let p = predict_tracer(&model, &mip).unwrap();
        assert_eq!(p.probability, 0.5);
        assert_eq!(p.tracer, Tracer::Psma);
    }

    #[test]
    fn folds_partition_and_stratify() {
        let tracers: Vec<Tracer> = (0..10).map(|i| Tracer::from_label((i % 2) as u8).unwrap()).collect();
        let folds = fold_assignment(&tracers, 5, 7).unwrap();
        for f in 0..5 {
            let members: Vec<usize> = (0..10).filter(|&i| folds[i] == f).collect();
            assert_eq!(members.len(), 2);
            assert_eq!(members.iter().filter(|&&i| tracers[i] == Tracer::Psma).count(), 1);
        }
        assert!(matches!(
            fold_assignment(&tracers[..3], 5, 7),
            Err(DiscriminatorError::TooFewSamples { k: 5, n: 3 })
        ));
    }

    #[test]
    fn unbalanced_folds_stay_within_one() {
        let tracers: Vec<Tracer> = (0..23).map(|i| if i < 7 { Tracer::Fdg } else { Tracer::Psma }).collect();
        let folds = fold_assignment(&tracers, 5, 1).unwrap();
        for f in 0..5 {
            let n = folds.iter().filter(|&&x| x == f).count();
            assert!((4..=5).contains(&n));
            let fdg = (0..23).filter(|&i| folds[i] == f && tracers[i] == Tracer::Fdg).count() as f64;
            assert!((fdg - 7.0 / 5.0).abs() <= 1.0);
        }
    }

    #[test]
    fn empty_splits() {
        let m = LabeledMip {
            image: MipImage::new(Image2D::zeros(224, 224), [3.0, 3.0]).unwrap(),
            tracer: Tracer::Fdg,
            case_id: "a".into(),
        };
        let cfg = TrainConfig::default();
        assert!(matches!(
            train_fold(&[], std::slice::from_ref(&m), &cfg),
            Err(DiscriminatorError::EmptySplit("training"))
        ));
        assert!(matches!(
            train_fold(std::slice::from_ref(&m), &[], &cfg),
            Err(DiscriminatorError::EmptySplit("validation"))
        ));
        assert!(matches!(
            train_fold(std::slice::from_ref(&m), std::slice::from_ref(&m), &cfg),
            Err(DiscriminatorError::OverlappingSplits(_))
        ));
    }

    #[test]
    fn history_csv_format() {
        let csv = history_csv(&[EpochRecord {
            epoch: 0,
            train_bce: 0.5,
            val_bce: 0.25,
            val_acc: 1.0,
        }]);
        assert_eq!(csv, "epoch,train_bce,val_bce,val_acc\n0,0.500000,0.250000,1.000000\n");
    }
}
