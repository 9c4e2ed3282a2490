//! Individual pipeline stages, shared by the subcommands and `run`.

use std::fs;
use std::path::Path;

use longct_core::io::{read_labels, write_volume};
use longct_core::phantom::{generate_dataset, PhantomConfig};
use longct_core::preprocess::{preprocess_pair, PreprocessConfig};
use longct_core::progression::{analyze_pair, ProgressionReport};
use longct_core::registration::{register_pair, RegisteredPair, RegistrationConfig};
use longct_core::study::{Split, StudyManifest};
use longct_core::{LabelVolume, Volume3D, N_CLASSES};
use longct_seg::checkpoint;
use longct_seg::data::TrainingPair;
use longct_seg::evaluation::{evaluate, EvalResult, PairSegmenter};
use longct_seg::inference::{segment_pair, ProbabilityVolume};
use longct_seg::model::ModelConfig;
use longct_seg::trainer::{self, TrainConfig, TrainHistory};
use longct_seg::Network;

use crate::error::{CliError, CliResult};
use crate::layout::{load_processed, load_training_pairs, save_processed, save_registered, PairEntry, PairIndex, PAIR_INDEX};
use crate::store::write_json;

pub const CHECKPOINT_FILE: &str = "model.safetensors";

fn io_err(stage: &'static str) -> impl Fn(std::io::Error) -> CliError {
    move |e| CliError::stage(stage, e)
}

fn core_err(stage: &'static str) -> impl Fn(longct_core::Error) -> CliError {
    move |e| CliError::from_core(stage, e)
}

fn seg_err(stage: &'static str) -> impl Fn(longct_seg::Error) -> CliError {
    move |e| CliError::from_seg(stage, e)
}

pub fn phantom(cfg: &PhantomConfig, out: &Path) -> CliResult<StudyManifest> {
    let manifest = generate_dataset(cfg, out).map_err(core_err("phantom"))?;
    log::info!("phantom: {} studies written to {}", manifest.studies.len(), out.display());
    Ok(manifest)
}

/// Preprocesses every consecutive pair of every study in the manifest.
pub fn preprocess(manifest_file: &Path, cfg: &PreprocessConfig, out: &Path) -> CliResult<PairIndex> {
    const STAGE: &str = "preprocess";
    cfg.validate().map_err(core_err(STAGE))?;
    let manifest = StudyManifest::load(manifest_file).map_err(core_err(STAGE))?;
    let base = manifest_file.parent().unwrap_or(Path::new("."));
    let mut pairs = Vec::new();
    for entry in &manifest.studies {
        let study = entry.load(base).map_err(core_err(STAGE))?;
        for (k, (t0, t1)) in study.consecutive_pairs().map_err(core_err(STAGE))?.into_iter().enumerate() {
            let pp = preprocess_pair(t0, t1, cfg).map_err(core_err(STAGE))?;
            let e = PairEntry { patient_id: entry.patient_id.clone(), split: entry.split, pair_index: k, dir: Default::default() };
            let rel = Path::new(&e.name()).to_path_buf();
            save_processed(&out.join(&rel).join("reference"), &pp.reference).map_err(core_err(STAGE))?;
            save_processed(&out.join(&rel).join("followup"), &pp.followup).map_err(core_err(STAGE))?;
            pairs.push(PairEntry { dir: rel, ..e });
        }
    }
    let index = PairIndex { pairs };
    index.save(&out.join(PAIR_INDEX)).map_err(io_err(STAGE))?;
    log::info!("preprocess: {} pairs", index.pairs.len());
    Ok(index)
}

pub fn register_one(reference: &Path, followup: &Path, cfg: &RegistrationConfig, out: &Path) -> CliResult<RegisteredPair> {
    const STAGE: &str = "register";
    let r = load_processed(reference).map_err(core_err(STAGE))?;
    let f = load_processed(followup).map_err(core_err(STAGE))?;
    let pair = register_pair(&r, &f, cfg).map_err(core_err(STAGE))?;
    save_registered(out, &pair).map_err(core_err(STAGE))?;
    log::info!(
        "register {}: mask dice {:.4} -> {:.4}{}",
        out.display(),
        pair.report.dice_before,
        pair.report.dice_after,
        if pair.report.fell_back_to_identity { " (identity fallback)" } else { "" }
    );
    Ok(pair)
}

/// Registers every pair of a preprocessing index.
pub fn register(index_file: &Path, cfg: &RegistrationConfig, out: &Path) -> CliResult<PairIndex> {
    cfg.validate().map_err(core_err("register"))?;
    let index = PairIndex::load(index_file).map_err(io_err("register"))?;
    let base = index_file.parent().unwrap_or(Path::new("."));
    for e in &index.pairs {
        let dir = base.join(&e.dir);
        register_one(&dir.join("reference"), &dir.join("followup"), cfg, &out.join(&e.dir))?;
    }
    index.save(&out.join(PAIR_INDEX)).map_err(io_err("register"))?;
    Ok(index)
}

/// Trains on the train split of a registered index, validating on its val
/// split, and writes the best checkpoint with its history.
pub fn train(
    index_file: &Path,
    model_cfg: &ModelConfig,
    init_seed: u64,
    cfg: &TrainConfig,
    preprocess: &PreprocessConfig,
    out: &Path,
) -> CliResult<TrainHistory> {
    const STAGE: &str = "train";
    model_cfg.validate().map_err(seg_err(STAGE))?;
    cfg.validate().map_err(seg_err(STAGE))?;
    let (_, train_pairs) = load_training_pairs(index_file, Some(Split::Train)).map_err(core_err(STAGE))?;
    let (_, val_pairs) = load_training_pairs(index_file, Some(Split::Val)).map_err(core_err(STAGE))?;
    fs::create_dir_all(out).map_err(io_err(STAGE))?;
    let model = Network::new(model_cfg.clone(), init_seed).map_err(seg_err(STAGE))?;
    log::info!(
        "train {:?}: {} parameters, {} train / {} val pairs",
        model_cfg.variant,
        model.count_parameters(),
        train_pairs.len(),
        val_pairs.len()
    );
    let outcome = trainer::train(model, &train_pairs, &val_pairs, cfg, preprocess, Some(out)).map_err(seg_err(STAGE))?;
    let note = format!("best epoch {}", outcome.history.best_epoch);
    checkpoint::save(&outcome.model, &out.join(CHECKPOINT_FILE), &note).map_err(seg_err(STAGE))?;
    write_json(&out.join("history.json"), &outcome.history).map_err(io_err(STAGE))?;
    write_json(&out.join("steps.json"), &outcome.steps).map_err(io_err(STAGE))?;
    Ok(outcome.history)
}

pub fn load_model(path: &Path) -> CliResult<Network> {
    let (model, _) = checkpoint::load::<f32>(path).map_err(seg_err("checkpoint"))?;
    Ok(model)
}

fn write_probabilities(dir: &Path, name: &str, p: &ProbabilityVolume) -> longct_core::Result<()> {
    for k in 0..N_CLASSES {
        let v: Volume3D<f32> = p.map(|px| px[k]);
        write_volume(dir.join(format!("{name}_class{k}.nii")), &v)?;
    }
    Ok(())
}

/// Segments both timepoints of a pair and writes the label maps, plus the
/// fused per-class probabilities when requested.
pub fn infer_pair(
    model: &Network,
    pair: &RegisteredPair,
    preprocess: &PreprocessConfig,
    out: &Path,
    probabilities: bool,
) -> CliResult<(LabelVolume, LabelVolume)> {
    const STAGE: &str = "infer";
    let seg = segment_pair(model, pair, preprocess).map_err(seg_err(STAGE))?;
    fs::create_dir_all(out).map_err(io_err(STAGE))?;
    write_volume(out.join("labels_t0.nii"), &seg.labels_t0).map_err(core_err(STAGE))?;
    write_volume(out.join("labels_t1.nii"), &seg.labels_t1).map_err(core_err(STAGE))?;
    if probabilities {
        write_probabilities(out, "prob_t0", &seg.prob_t0).map_err(core_err(STAGE))?;
        write_probabilities(out, "prob_t1", &seg.prob_t1).map_err(core_err(STAGE))?;
    }
    Ok((seg.labels_t0, seg.labels_t1))
}

/// Segments every pair of `split` in a registered index. The output index
/// points at the label directories.
pub fn infer(
    model: &Network,
    index_file: &Path,
    split: Split,
    preprocess: &PreprocessConfig,
    out: &Path,
    probabilities: bool,
) -> CliResult<PairIndex> {
    let (entries, pairs) = load_training_pairs(index_file, Some(split)).map_err(core_err("infer"))?;
    for (e, p) in entries.iter().zip(&pairs) {
        infer_pair(model, &p.pair, preprocess, &out.join(&e.dir), probabilities)?;
        log::info!("infer {:?}: {}", model.config.variant, e.name());
    }
    let index = PairIndex { pairs: entries };
    index.save(&out.join(PAIR_INDEX)).map_err(io_err("infer"))?;
    Ok(index)
}

/// Progression map and volumes between two label maps on a common grid.
pub fn progress(seg0: &LabelVolume, seg1: &LabelVolume, pair_id: Option<String>, out: &Path) -> CliResult<ProgressionReport> {
    const STAGE: &str = "progress";
    let (map, report) = analyze_pair(seg0, seg1, pair_id).map_err(core_err(STAGE))?;
    fs::create_dir_all(out).map_err(io_err(STAGE))?;
    write_volume(out.join("progression.nii"), &map).map_err(core_err(STAGE))?;
    write_json(&out.join("report.json"), &report).map_err(io_err(STAGE))?;
    fs::write(out.join("report.txt"), report.to_table()).map_err(io_err(STAGE))?;
    Ok(report)
}

pub fn read_label_pair(dir: &Path) -> CliResult<(LabelVolume, LabelVolume)> {
    let read = |n: &str| read_labels(dir.join(n)).map_err(core_err("evaluate"));
    Ok((read("labels_t0.nii")?, read("labels_t1.nii")?))
}

/// Replays label maps written by an earlier inference stage.
pub struct CachedSegmenter {
    pub tag: String,
    pub labels: Vec<(LabelVolume, LabelVolume)>,
}

impl PairSegmenter for CachedSegmenter {
    fn tag(&self) -> String {
        self.tag.clone()
    }

    fn segment(&self, index: usize, _pair: &TrainingPair) -> longct_seg::Result<(LabelVolume, LabelVolume)> {
        self.labels
            .get(index)
            .cloned()
            .ok_or_else(|| longct_seg::Error::Shape(format!("no cached labels for pair {index}")))
    }
}

pub fn evaluate_with(segmenter: &dyn PairSegmenter, pairs: &[TrainingPair]) -> CliResult<EvalResult> {
    evaluate(segmenter, pairs).map_err(seg_err("evaluate"))
}

pub fn write_eval(out: &Path, name: &str, result: &EvalResult) -> CliResult<()> {
    fs::create_dir_all(out).map_err(io_err("evaluate"))?;
    write_json(&out.join(format!("{name}.json")), result).map_err(io_err("evaluate"))?;
    fs::write(out.join(format!("{name}.txt")), result.to_table()).map_err(io_err("evaluate"))
}
