//! End-to-end orchestration with fingerprint-based stage caching.
//!
//! Each stage writes into `<out>/<stage>/` and finishes by recording its
//! fingerprint and the hashes of everything it wrote. A later run skips the
//! stage when the fingerprint matches and the files still hash to the recorded
//! values; a stage that runs forces every stage depending on it to run too.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use longct_core::phantom::MANIFEST_NAME;
use longct_core::study::Split;
use longct_seg::evaluation::{compare, Comparison};
use longct_seg::model::Variant;
use serde::Serialize;

use crate::config::{Device, PipelineConfig};
use crate::error::{CliError, CliResult};
use crate::layout::{load_training_pairs, PAIR_INDEX};
use crate::stages::{self, CachedSegmenter, CHECKPOINT_FILE};
use crate::store::{fingerprint, fresh_record, hash_tree, write_json, ArtifactHashes, StageRecord, FAILED_MARKER};
use crate::version::version_info;

/// Stage names in execution order.
pub const STAGES: [&str; 8] =
    ["phantom", "preprocess", "register", "train_static", "train_longitudinal", "infer", "progress", "evaluate"];

pub const ARTIFACT_MANIFEST: &str = "artifacts.json";

const VARIANTS: [Variant; 2] = [Variant::Static, Variant::Longitudinal];

pub fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::Static => "static",
        Variant::Longitudinal => "longitudinal",
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StageStatus {
    pub stage: String,
    /// False when the cached outputs were reused.
    pub ran: bool,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub stages: Vec<StageStatus>,
    /// Stage → artifact hashes, as written to `artifacts.json`.
    pub artifacts: BTreeMap<String, ArtifactHashes>,
    pub comparison: Comparison,
}

struct Runner<'a> {
    root: &'a Path,
    records: BTreeMap<String, StageRecord>,
    ran: BTreeSet<String>,
    statuses: Vec<StageStatus>,
}

impl Runner<'_> {
    fn dir(&self, stage: &str) -> PathBuf {
        self.root.join(stage)
    }

    fn stage(&mut self, name: &str, config: &str, deps: &[&str], body: impl FnOnce(&Path) -> CliResult<()>) -> CliResult<()> {
        let dir = self.dir(name);
        let digests: Vec<String> = deps.iter().map(|d| self.records[*d].digest()).collect();
        let mut parts = vec![config];
        parts.extend(digests.iter().map(String::as_str));
        let fp = fingerprint(name, &parts);
        let forced = deps.iter().any(|d| self.ran.contains(*d));
        if !forced {
            if let Some(record) = fresh_record(&dir, &fp) {
                log::info!("{name}: up to date, skipped");
                self.records.insert(name.to_string(), record);
                self.statuses.push(StageStatus { stage: name.to_string(), ran: false });
                return Ok(());
            }
        }
        log::info!("{name}: running");
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| CliError::stage(name, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| CliError::stage(name, e))?;
        if let Err(e) = body(&dir) {
            if let Err(w) = fs::write(dir.join(FAILED_MARKER), format!("{e}\n")) {
                log::error!("{name}: cannot write failure marker: {w}");
            }
            return Err(e);
        }
        let record = StageRecord {
            stage: name.to_string(),
            fingerprint: fp,
            artifacts: hash_tree(&dir).map_err(|e| CliError::stage(name, e))?,
        };
        record.save(&dir).map_err(|e| CliError::stage(name, e))?;
        self.records.insert(name.to_string(), record);
        self.ran.insert(name.to_string());
        self.statuses.push(StageStatus { stage: name.to_string(), ran: true });
        Ok(())
    }
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("configuration serializes")
}

/// Runs every stage under `cfg.out`, reusing up-to-date stages, and writes
/// the artifact manifest.
pub fn run_pipeline(cfg: &PipelineConfig, device: Device) -> CliResult<RunSummary> {
    cfg.validate()?;
    let root = cfg.out.as_path();
    fs::create_dir_all(root).map_err(|e| CliError::stage("run", e))?;
    fs::write(root.join("config.toml"), cfg.to_toml()).map_err(|e| CliError::stage("run", e))?;
    write_json(&root.join("version.json"), &version_info(cfg.preset, device)).map_err(|e| CliError::stage("run", e))?;

    let mut r = Runner { root, records: BTreeMap::new(), ran: BTreeSet::new(), statuses: Vec::new() };
    let phantom_dir = r.dir("phantom");
    let pre_dir = r.dir("preprocess");
    let reg_dir = r.dir("register");
    let infer_dir = r.dir("infer");
    let reg_index = reg_dir.join(PAIR_INDEX);

    r.stage("phantom", &json(&cfg.phantom), &[], |d| stages::phantom(&cfg.phantom, d).map(drop))?;
    r.stage("preprocess", &json(&cfg.preprocess), &["phantom"], |d| {
        stages::preprocess(&phantom_dir.join(MANIFEST_NAME), &cfg.preprocess, d).map(drop)
    })?;
    r.stage("register", &json(&cfg.registration), &["preprocess"], |d| {
        stages::register(&pre_dir.join(PAIR_INDEX), &cfg.registration, d).map(drop)
    })?;
    for v in VARIANTS {
        let name = format!("train_{}", variant_name(v));
        let model = cfg.model_for(v);
        let config = json(&(&model, &cfg.train, &cfg.preprocess, cfg.init_seed()));
        r.stage(&name, &config, &["register"], |d| {
            stages::train(&reg_index, &model, cfg.init_seed(), &cfg.train, &cfg.preprocess, d).map(drop)
        })?;
    }
    let train_dirs = VARIANTS.map(|v| r.dir(&format!("train_{}", variant_name(v))));
    r.stage("infer", &json(&cfg.preprocess), &["register", "train_static", "train_longitudinal"], |d| {
        for (v, td) in VARIANTS.iter().zip(&train_dirs) {
            let model = stages::load_model(&td.join(CHECKPOINT_FILE))?;
            stages::infer(&model, &reg_index, Split::Test, &cfg.preprocess, &d.join(variant_name(*v)), false)?;
        }
        Ok(())
    })?;
    r.stage("progress", "", &["register", "infer"], |d| progress_stage(&reg_index, &infer_dir, d))?;
    let mut comparison = None;
    r.stage("evaluate", "", &["register", "infer"], |d| {
        comparison = Some(evaluate_stage(&reg_index, &infer_dir, d)?);
        Ok(())
    })?;
    let comparison = match comparison {
        Some(c) => c,
        None => crate::store::read_json(&r.dir("evaluate").join("comparison.json"))
            .map_err(|e| CliError::stage("evaluate", e))?,
    };

    let artifacts: BTreeMap<String, ArtifactHashes> =
        r.records.iter().map(|(k, rec)| (k.clone(), rec.artifacts.clone())).collect();
    write_json(&root.join(ARTIFACT_MANIFEST), &artifacts).map_err(|e| CliError::stage("run", e))?;
    Ok(RunSummary { stages: r.statuses, artifacts, comparison })
}

#[derive(Serialize)]
struct PairProgression {
    pair: String,
    truth: longct_core::progression::ProgressionReport,
    predicted: BTreeMap<String, longct_core::progression::ProgressionReport>,
}

fn progress_stage(reg_index: &Path, infer_dir: &Path, out: &Path) -> CliResult<()> {
    let (entries, pairs) = load_training_pairs(reg_index, Some(Split::Test)).map_err(|e| CliError::from_core("progress", e))?;
    let mut summary = Vec::new();
    for (e, p) in entries.iter().zip(&pairs) {
        let name = e.name();
        let (Some(y0), Some(y1)) = (&p.pair.y0_reg, &p.pair.y1) else {
            log::warn!("progress: {name} has no ground truth; skipped");
            continue;
        };
        let truth = stages::progress(y0, y1, Some(name.clone()), &out.join("truth").join(&e.dir))?;
        let mut predicted = BTreeMap::new();
        for v in VARIANTS {
            let tag = variant_name(v);
            let (s0, s1) = stages::read_label_pair(&infer_dir.join(tag).join(&e.dir))?;
            predicted.insert(tag.to_string(), stages::progress(&s0, &s1, Some(name.clone()), &out.join(tag).join(&e.dir))?);
        }
        summary.push(PairProgression { pair: name, truth, predicted });
    }
    write_json(&out.join("summary.json"), &summary).map_err(|e| CliError::stage("progress", e))
}

fn evaluate_stage(reg_index: &Path, infer_dir: &Path, out: &Path) -> CliResult<Comparison> {
    let (entries, pairs) = load_training_pairs(reg_index, Some(Split::Test)).map_err(|e| CliError::from_core("evaluate", e))?;
    let mut results = Vec::new();
    for v in VARIANTS {
        let tag = variant_name(v);
        let labels = entries
            .iter()
            .map(|e| stages::read_label_pair(&infer_dir.join(tag).join(&e.dir)))
            .collect::<CliResult<Vec<_>>>()?;
        let result = stages::evaluate_with(&CachedSegmenter { tag: tag.to_string(), labels }, &pairs)?;
        stages::write_eval(out, tag, &result)?;
        results.push(result);
    }
    let comparison = compare(&results[0], &results[1]);
    write_json(&out.join("comparison.json"), &comparison).map_err(|e| CliError::stage("evaluate", e))?;
    let report = format!(
        "{}\n{}\nmean CONS Dice: static {:.4}, longitudinal {:.4}; longitudinal not worse on {}/{} volumes\n",
        results[0].to_table(),
        results[1].to_table(),
        comparison.static_mean_cons,
        comparison.longitudinal_mean_cons,
        comparison.longitudinal_not_worse,
        comparison.paired.len()
    );
    fs::write(out.join("report.txt"), &report).map_err(|e| CliError::stage("evaluate", e))?;
    log::info!("evaluate:\n{report}");
    Ok(comparison)
}

