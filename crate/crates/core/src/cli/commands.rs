use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::manifest::{atomic_write, manifest_path_for, RunManifest};
use super::*;
use crate::discriminator::{
    cross_validate, history_csv, predict_tracer, train_holdout, LabeledMip, TrainConfig, Tracer,
};
use crate::fusion::{fuse_manifest, OrganGroupTable, OrganManifest};
use crate::metrics::{evaluate_case, metrics_csv, CaseMetrics, MeanMetrics};
use crate::nifti::{read_header, read_volume_as, write_volume, write_volume_with, Datatype, Endian, WriteOptions};
use crate::nn::{load_model, save_model};
use crate::orchestrator::{route, EnsembleSpec, ExternalRequest, RouteOptions, SuvThreshold, DEFAULT_FOLDS};
use crate::preprocess::{build_channels, resample_nearest, resample_trilinear, tracer_mip, MipSpec, WindowSpec, CHANNEL_NAMES};
use crate::synth::{make_phantom, PhantomSpec};
use crate::volume::{BinaryMask, Volume3D, VolumeKind};

pub(super) fn dispatch(cli: &Cli) -> CliResult<u8> {
    if cli.jobs == 0 {
        return Err(CliError::usage("--jobs must be at least 1"));
    }
    match &cli.command {
        Command::Inspect(a) => inspect(a),
        Command::Resample(a) => resample(a),
        Command::Window(a) => window(a),
        Command::Mip(a) => mip(a),
        Command::Synth(a) => synth(a, cli.jobs),
        Command::TrainDisc(a) => train_disc(a),
        Command::CvDisc(a) => cv_disc(a),
        Command::PredictTracer(a) => predict(a),
        Command::Fuse(a) => fuse(a),
        Command::Evaluate(a) => evaluate(a, cli.jobs),
        Command::Run(a) => run(a, cli.jobs),
        Command::ThresholdBackend(a) => threshold_backend(a),
    }
    .map(|code| code.unwrap_or(0))
}

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> CliResult<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::validation(e.to_string()))?;
    Ok(pool.install(f))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn inspect(a: &InspectArgs) -> CliResult<Option<u8>> {
    let h = read_header(&a.path)?;
    let vol = read_volume_as(&a.path, a.kind.map(Into::into))?;
    let (lo, hi) = vol.min_max();
    let mean = vol.data().iter().sum::<f64>() / vol.len() as f64;
    let nonzero = vol.data().iter().filter(|&&v| v != 0.0).count();
    let [nx, ny, nz] = vol.shape();
    let s = vol.spacing();
    let o = vol.origin();
    println!("path: {}", a.path.display());
    println!("datatype: {:?} ({})", h.datatype, h.datatype.code());
    println!("endian: {}", if h.endian == Endian::Little { "little" } else { "big" });
    println!("shape: {nx} x {ny} x {nz}");
    println!("spacing_mm: {} {} {}", s[0], s[1], s[2]);
    println!("origin_mm: {} {} {}", o[0], o[1], o[2]);
    println!("scl_slope: {} scl_inter: {}", h.scl_slope, h.scl_inter);
    println!("kind: {:?}", vol.kind());
    println!("min: {lo} max: {hi} mean: {mean:.6}");
    println!("nonzero_voxels: {nonzero} of {}", vol.len());
    Ok(None)
}

fn resample(a: &ResampleArgs) -> CliResult<Option<u8>> {
    let kind = a.kind.map(VolumeKind::from).unwrap_or(match a.mode {
        ResampleMode::Trilinear => VolumeKind::PetSuv,
        ResampleMode::Nearest => VolumeKind::Label,
    });
    let vol = read_volume_as(&a.input, Some(kind))?;
    let t = Instant::now();
    let out = match a.mode {
        ResampleMode::Trilinear => resample_trilinear(&vol, a.spacing)?,
        ResampleMode::Nearest => resample_nearest(&vol, a.spacing)?,
    };
    let elapsed = t.elapsed().as_secs_f64();
    ensure_parent(&a.out)?;
    write_volume(&out, &a.out)?;
    let mut m = RunManifest::new(
        "resample",
        json!({ "spacing": a.spacing, "mode": format!("{:?}", a.mode).to_lowercase(), "kind": kind }),
    );
    m.input(&a.input)?;
    m.result = json!({ "shape": out.shape(), "spacing": out.spacing() });
    m.timing("resample", elapsed);
    m.write(&manifest_path_for(&a.out), std::slice::from_ref(&a.out))?;
    Ok(None)
}

fn window(a: &WindowArgs) -> CliResult<Option<u8>> {
    let spec = WindowSpec {
        pet_lo: a.pet_window.0,
        pet_hi: a.pet_window.1,
        ct_lo: a.ct_window.0,
        ct_hi: a.ct_window.1,
    };
    let ct = read_volume_as(&a.ct, Some(VolumeKind::CtHu))?;
    let pet = read_volume_as(&a.pet, Some(VolumeKind::PetSuv))?;
    let stack = build_channels(&ct, &pet, &spec)?;
    create_dir(&a.out_dir)?;
    let mut outputs = Vec::new();
    for (vol, name) in stack.channels().iter().zip(CHANNEL_NAMES) {
        let p = a.out_dir.join(format!("{name}.nii.gz"));
        write_volume(vol, &p)?;
        outputs.push(p);
    }
    let mut m = RunManifest::new("window", serde_json::to_value(spec)?);
    m.input(&a.ct)?;
    m.input(&a.pet)?;
    m.write(&manifest_path_for(&a.out_dir), &outputs)?;
    Ok(None)
}

/// The MIP as a `224 × 1 × 224` volume so it can travel as NIfTI.
fn mip_volume(pet: &Volume3D, spec: &MipSpec) -> CliResult<Volume3D> {
    let img = tracer_mip(pet, spec)?;
    let p = img.pixels();
    Ok(Volume3D::new(
        [p.width(), 1, p.height()],
        [spec.spacing_mm, spec.spacing_mm, spec.spacing_mm],
        VolumeKind::PetSuv,
        p.data().to_vec(),
    )?)
}

fn mip(a: &MipArgs) -> CliResult<Option<u8>> {
    let spec = MipSpec {
        spacing_mm: a.spacing,
        cap_suv: a.cap_suv,
    };
    let pet = read_volume_as(&a.pet, Some(VolumeKind::PetSuv))?;
    let vol = mip_volume(&pet, &spec)?;
    ensure_parent(&a.out)?;
    write_volume_with(
        &vol,
        &a.out,
        WriteOptions {
            datatype: Some(Datatype::Float32),
            ..Default::default()
        },
    )?;
    let mut m = RunManifest::new("mip", serde_json::to_value(spec)?);
    m.input(&a.pet)?;
    m.write(&manifest_path_for(&a.out), std::slice::from_ref(&a.out))?;
    Ok(None)
}

/// Discriminator dataset: PET volumes with tracer labels. Paths are
/// relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub items: Vec<DatasetItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetItem {
    pub case_id: String,
    pub pet: PathBuf,
    pub tracer: Tracer,
}

impl DatasetManifest {
    /// Read every PET and run it through the discriminator preprocessing.
    pub fn load_mips(path: &Path, spec: &MipSpec) -> CliResult<Vec<LabeledMip>> {
        let manifest: DatasetManifest = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        manifest
            .items
            .par_iter()
            .map(|item| {
                let pet = read_volume_as(base.join(&item.pet), Some(VolumeKind::PetSuv))?;
                Ok(LabeledMip {
                    image: tracer_mip(&pet, spec)?,
                    tracer: item.tracer,
                    case_id: item.case_id.clone(),
                })
            })
            .collect()
    }
}

fn synth(a: &SynthArgs, jobs: usize) -> CliResult<Option<u8>> {
    if a.n < 2 {
        return Err(CliError::validation(format!("--n must be at least 2, got {}", a.n)));
    }
    create_dir(&a.out_dir)?;
    let written: CliResult<Vec<(DatasetItem, Vec<PathBuf>)>> = with_pool(jobs, || {
        (0..a.n)
            .into_par_iter()
            .map(|i| {
                let style = crate::synth::item_style(i);
                let spec = PhantomSpec::random(a.shape, a.spacing, style, crate::synth::item_seed(a.seed, i));
                let ph = make_phantom(&spec)?;
                let case_id = format!("case_{i:04}");
                let dir = a.out_dir.join(&case_id);
                create_dir(&dir.join("organs"))?;
                let mut files = Vec::new();
                let mut put = |vol: &Volume3D, rel: &str| -> CliResult<()> {
                    let p = dir.join(rel);
                    write_volume(vol, &p)?;
                    files.push(p);
                    Ok(())
                };
                put(&ph.ct, "ct.nii.gz")?;
                put(&ph.pet, "pet.nii.gz")?;
                put(&ph.lesion_gt.to_volume(), "lesion.nii.gz")?;
                let mut organs = std::collections::BTreeMap::new();
                for (name, mask) in &ph.organs {
                    let rel = format!("organs/{name}.nii.gz");
                    put(&mask.to_volume(), &rel)?;
                    organs.insert(name.clone(), PathBuf::from(rel));
                }
                let om = OrganManifest {
                    case_id: case_id.clone(),
                    lesion_path: "lesion.nii.gz".into(),
                    organs,
                };
                let om_path = dir.join("organs.json");
                atomic_write(&om_path, (serde_json::to_string_pretty(&om)? + "\n").as_bytes())?;
                files.push(om_path);
                let item = DatasetItem {
                    case_id: case_id.clone(),
                    pet: PathBuf::from(&case_id).join("pet.nii.gz"),
                    tracer: style.tracer(),
                };
                Ok((item, files))
            })
            .collect()
    })?;
    let written = written?;
    let dataset = DatasetManifest {
        items: written.iter().map(|(item, _)| item.clone()).collect(),
    };
    let dataset_path = a.out_dir.join("dataset.json");
    atomic_write(&dataset_path, (serde_json::to_string_pretty(&dataset)? + "\n").as_bytes())?;
    let mut outputs = vec![dataset_path];
    outputs.extend(written.into_iter().flat_map(|(_, f)| f));
    let mut m = RunManifest::new(
        "synth",
        json!({ "n": a.n, "seed": a.seed, "shape": a.shape, "spacing": a.spacing }),
    );
    m.seed = Some(a.seed);
    m.write(&manifest_path_for(&a.out_dir), &outputs)?;
    Ok(None)
}

fn resolve_train_config(f: &TrainFlags) -> CliResult<TrainConfig> {
    let mut cfg: TrainConfig = match &f.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = f.lr {
        cfg.lr = v;
    }
    if let Some(v) = f.max_epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = f.patience {
        cfg.patience = v;
    }
    if let Some(v) = f.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = f.val_fraction {
        cfg.val_fraction = v;
    }
    if let Some(v) = f.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = f.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_disc(a: &TrainDiscArgs) -> CliResult<Option<u8>> {
    let cfg = resolve_train_config(&a.train)?;
    let data = DatasetManifest::load_mips(&a.manifest, &MipSpec::default())?;
    let t = Instant::now();
    let outcome = train_holdout(&data, &cfg)?;
    let elapsed = t.elapsed().as_secs_f64();
    ensure_parent(&a.out_model)?;
    save_model(&outcome.model, &a.out_model)?;
    let history = a.out_model.with_extension("history.csv");
    atomic_write(&history, history_csv(&outcome.history).as_bytes())?;
    println!(
        "best_epoch: {} best_val_bce: {:.6} epochs_run: {}",
        outcome.best_epoch,
        outcome.best_val_bce,
        outcome.history.len() - 1
    );
    let mut m = RunManifest::new("train-disc", serde_json::to_value(&cfg)?);
    m.seed = Some(cfg.seed);
    m.input(&a.manifest)?;
    m.result = json!({ "best_epoch": outcome.best_epoch, "best_val_bce": outcome.best_val_bce });
    m.timing("train", elapsed);
    let blob = crate::nn::io::blob_path(&a.out_model);
    m.write(&manifest_path_for(&a.out_model), &[a.out_model.clone(), blob, history])?;
    Ok(None)
}

fn cv_disc(a: &CvDiscArgs) -> CliResult<Option<u8>> {
    let cfg = resolve_train_config(&a.train)?;
    let data = DatasetManifest::load_mips(&a.manifest, &MipSpec::default())?;
    let t = Instant::now();
    let report = cross_validate(&data, a.k, &cfg)?;
    let elapsed = t.elapsed().as_secs_f64();
    for f in &report.folds {
        println!(
            "fold {}: accuracy {:.6} (best epoch {}, {} held out)",
            f.fold,
            f.accuracy,
            f.outcome.best_epoch,
            f.held_out.len()
        );
    }
    println!("mean_accuracy: {:.6}", report.mean_accuracy);
    if let Some(out) = &a.out {
        let result = json!({
            "k": a.k,
            "fold_accuracies": report.fold_accuracies(),
            "best_epochs": report.folds.iter().map(|f| f.outcome.best_epoch).collect::<Vec<_>>(),
            "mean_accuracy": report.mean_accuracy,
        });
        ensure_parent(out)?;
        atomic_write(out, (serde_json::to_string_pretty(&result)? + "\n").as_bytes())?;
        let mut m = RunManifest::new("cv-disc", json!({ "k": a.k, "train": cfg }));
        m.seed = Some(cfg.seed);
        m.input(&a.manifest)?;
        m.result = result;
        m.timing("cross_validate", elapsed);
        m.write(&manifest_path_for(out), std::slice::from_ref(out))?;
    }
    Ok(None)
}

fn predict(a: &PredictTracerArgs) -> CliResult<Option<u8>> {
    let model = load_model(&a.model)?;
    let pet = read_volume_as(&a.pet, Some(VolumeKind::PetSuv))?;
    let mip = tracer_mip(&pet, &MipSpec::default())?;
    let p = predict_tracer(&model, &mip)?;
    println!("{} {:.6}", p.tracer.name(), p.probability);
    Ok(Some(match p.tracer {
        Tracer::Fdg => EXIT_FDG,
        Tracer::Psma => EXIT_PSMA,
    }))
}

fn fuse(a: &FuseArgs) -> CliResult<Option<u8>> {
    let mut table = match &a.table {
        Some(p) => read_json::<OrganGroupTable>(p)?,
        None => OrganGroupTable::default(),
    };
    table.ignore_unknown |= a.ignore_unknown;
    let manifest = OrganManifest::load(&a.manifest)?;
    let fused = fuse_manifest(&manifest, &table)?;
    ensure_parent(&a.out)?;
    write_volume(&fused, &a.out)?;
    let mut m = RunManifest::new("fuse", serde_json::to_value(&table)?);
    m.input(&a.manifest)?;
    m.input(&manifest.lesion_path)?;
    for p in manifest.organs.values() {
        m.input(p)?;
    }
    m.result = json!({ "case_id": manifest.case_id });
    m.write(&manifest_path_for(&a.out), std::slice::from_ref(&a.out))?;
    Ok(None)
}

/// `name.nii.gz` / `name.nii` → `name`.
fn nifti_stem(path: &Path) -> Option<String> {
    let name = path.file_name()?.to_str()?;
    name.strip_suffix(".nii.gz")
        .or_else(|| name.strip_suffix(".nii"))
        .map(str::to_string)
}

fn list_nifti(dir: &Path) -> CliResult<Vec<(String, PathBuf)>> {
    let rd = std::fs::read_dir(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry?.path();
        if let Some(stem) = p.is_file().then(|| nifti_stem(&p)).flatten() {
            out.push((stem, p));
        }
    }
    out.sort();
    Ok(out)
}

fn evaluate(a: &EvaluateArgs, jobs: usize) -> CliResult<Option<u8>> {
    let preds = list_nifti(&a.pred_dir)?;
    let gts = list_nifti(&a.gt_dir)?;
    if preds.is_empty() {
        return Err(CliError::validation(format!("no NIfTI files in {}", a.pred_dir.display())));
    }
    let gt_of = |id: &str| gts.iter().find(|(g, _)| g == id).map(|(_, p)| p.clone());
    let mut pairs = Vec::new();
    for (id, p) in &preds {
        let g = gt_of(id).ok_or_else(|| CliError::validation(format!("no ground truth for case {id}")))?;
        pairs.push((id.clone(), p.clone(), g));
    }
    let conn = a.connectivity;
    let rows: Result<Vec<CaseMetrics>, crate::metrics::MetricsError> = with_pool(jobs, || {
        pairs
            .par_iter()
            .map(|(id, p, g)| {
                let mut c = evaluate_case(id, p, g, a.label)?;
                if conn != crate::metrics::Connectivity::TwentySix {
                    let pred = BinaryMask::from_label(&read_volume_as(p, Some(VolumeKind::Label))?, a.label);
                    let gt = BinaryMask::from_label(&read_volume_as(g, Some(VolumeKind::Label))?, a.label);
                    c = crate::metrics::case_metrics(id, &pred, &gt, conn)?;
                }
                Ok(c)
            })
            .collect()
    })?;
    let rows = rows?;
    ensure_parent(&a.out)?;
    atomic_write(&a.out, metrics_csv(&rows).as_bytes())?;
    let mean = MeanMetrics::of(&rows);
    println!(
        "cases: {} dice_defined: {} mean_dice: {}",
        rows.len(),
        mean.dice_defined,
        mean.dice.map_or("nan".to_string(), |d| format!("{d:.6}"))
    );
    let mut m = RunManifest::new(
        "evaluate",
        json!({ "label": a.label, "connectivity": conn }),
    );
    for (_, p, g) in &pairs {
        m.input(p)?;
        m.input(g)?;
    }
    m.result = serde_json::to_value(&mean)?;
    m.write(&manifest_path_for(&a.out), std::slice::from_ref(&a.out))?;
    Ok(None)
}

/// Routed-inference config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub fdg: EnsembleSpec,
    pub psma: EnsembleSpec,
    pub route: RouteOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            fdg: EnsembleSpec::suv_threshold("fdg", DEFAULT_FOLDS),
            psma: EnsembleSpec::suv_threshold("psma", DEFAULT_FOLDS),
            route: RouteOptions::default(),
        }
    }
}

fn run(a: &RunArgs, jobs: usize) -> CliResult<Option<u8>> {
    let mut cfg: RunConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    for spec in [&mut cfg.fdg, &mut cfg.psma] {
        let s = &mut spec.settings;
        if let Some(v) = a.time_budget {
            s.time_budget_s = v;
        }
        if let Some(v) = a.decision_threshold {
            s.decision_threshold = v;
        }
        if let Some(v) = a.tta_reduction_threshold {
            s.tta_reduction_threshold = v;
        }
        if jobs > 1 {
            s.workers = jobs;
        }
    }
    let fdg = cfg.fdg.build()?;
    let psma = cfg.psma.build()?;
    let disc = load_model(&a.disc_model)?;
    let ct = read_volume_as(&a.ct, Some(VolumeKind::CtHu))?;
    let pet = read_volume_as(&a.pet, Some(VolumeKind::PetSuv))?;
    let organs = match &a.organ_mask {
        Some(p) => Some(BinaryMask::from_nonzero(&read_volume_as(p, Some(VolumeKind::Label))?)),
        None => None,
    };
    let r = route(&ct, &pet, organs.as_ref(), &disc, &fdg, &psma, &cfg.route)?;

    ensure_parent(&a.out)?;
    let mask_vol = Volume3D::with_origin(
        pet.shape(),
        pet.spacing(),
        pet.origin(),
        VolumeKind::Label,
        r.mask.to_volume().into_data(),
    )?;
    write_volume(&mask_vol, &a.out)?;
    let mut outputs = vec![a.out.clone()];
    if let Some(p) = &a.prob_out {
        ensure_parent(p)?;
        write_volume(&r.prob_map, p)?;
        outputs.push(p.clone());
    }
    println!(
        "tracer: {} probability: {:.6} lesion_voxels: {}",
        r.tracer.name(),
        r.tracer_probability,
        r.mask.count()
    );

    let mut m = RunManifest::new("run", serde_json::to_value(&cfg)?);
    m.input(&a.ct)?;
    m.input(&a.pet)?;
    m.input(&a.disc_model)?;
    m.input(&crate::nn::io::blob_path(&a.disc_model))?;
    if let Some(p) = &a.organ_mask {
        m.input(p)?;
    }
    m.result = json!({
        "tracer": r.tracer,
        "tracer_probability": r.tracer_probability,
        "lesion_voxels": r.mask.count(),
        "lesion_ml": r.mask.count() as f64 * r.mask.voxel_volume_mm3() / 1000.0,
        "tta_used": r.tta_used,
        "reduced_by_size": r.reduced_by_size,
        "reduced_by_deadline": r.reduced_by_deadline,
        "invocations": r.invocations,
    });
    for t in &r.timings {
        m.timing(&t.stage, t.seconds);
    }
    m.timing("wall_time_s", r.wall_time_s);
    m.timings.insert("budget_exceeded".into(), Value::from(r.budget_exceeded));
    if r.budget_exceeded {
        eprintln!("warning: run took {:.1} s, over the time budget", r.wall_time_s);
    }
    m.write(&manifest_path_for(&a.out), &outputs)?;
    Ok(None)
}

fn threshold_backend(a: &ThresholdBackendArgs) -> CliResult<Option<u8>> {
    let req: ExternalRequest = read_json(&a.request)?;
    let pet_path = req
        .channel_paths
        .get(3)
        .ok_or_else(|| CliError::validation("request needs four channel paths"))?;
    let pet = read_volume_as(pet_path, Some(VolumeKind::PetSuv))?;
    let exclusion = match &req.exclusion_path {
        Some(p) => Some(BinaryMask::from_nonzero(&read_volume_as(p, Some(VolumeKind::Label))?)),
        None => None,
    };
    let backend = SuvThreshold {
        saturation_suv: a.saturation_suv,
        ..SuvThreshold::new("threshold-backend")
    };
    let prob = backend.probability(&pet, exclusion.as_ref())?;
    write_volume_with(
        &prob,
        &req.output_path,
        WriteOptions {
            datatype: Some(Datatype::Float64),
            ..Default::default()
        },
    )?;
    Ok(None)
}
