//! On-disk layout of preprocessed and registered pairs.
//!
//! A pair index (`pairs.json`) lists every pair of a stage with its split
//! and its directory relative to the index.

use std::fs;
use std::path::{Path, PathBuf};

use longct_core::io::{read_f32, read_labels, write_volume};
use longct_core::preprocess::{BoundingBox, ProcessedTimepoint};
use longct_core::registration::{BSplineTransform, RegisteredPair, RegistrationReport};
use longct_core::study::Split;
use longct_core::LabelVolume;
use longct_seg::data::TrainingPair;
use serde::{Deserialize, Serialize};

use crate::store::{read_json, write_json};

pub const PAIR_INDEX: &str = "pairs.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub patient_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    /// Position of the pair within its study.
    pub pair_index: usize,
    pub dir: PathBuf,
}

impl PairEntry {
    pub fn name(&self) -> String {
        format!("{}_pair{}", self.patient_id, self.pair_index)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairIndex {
    pub pairs: Vec<PairEntry>,
}

impl PairIndex {
    pub fn load(path: &Path) -> std::io::Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        write_json(path, self)
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &PairEntry> {
        self.pairs.iter().filter(move |p| p.split == Some(split))
    }
}

/// Accepts either an index file or a directory holding one.
pub fn index_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(PAIR_INDEX)
    } else {
        p.to_path_buf()
    }
}

#[derive(Serialize, Deserialize)]
struct TimepointInfo {
    bbox: BoundingBox,
    has_pathology: bool,
}

pub fn save_processed(dir: &Path, tp: &ProcessedTimepoint) -> longct_core::Result<()> {
    fs::create_dir_all(dir)?;
    write_volume(dir.join("ct.nii"), &tp.ct)?;
    write_volume(dir.join("lung.nii"), &tp.lung_mask)?;
    if let Some(p) = &tp.pathology {
        write_volume(dir.join("pathology.nii"), p)?;
    }
    write_json(&dir.join("timepoint.json"), &TimepointInfo { bbox: tp.bbox, has_pathology: tp.pathology.is_some() })?;
    Ok(())
}

pub fn load_processed(dir: &Path) -> longct_core::Result<ProcessedTimepoint> {
    let info: TimepointInfo = read_json(&dir.join("timepoint.json"))?;
    Ok(ProcessedTimepoint {
        ct: read_f32(dir.join("ct.nii"))?,
        lung_mask: read_labels(dir.join("lung.nii"))?,
        pathology: info.has_pathology.then(|| read_labels(dir.join("pathology.nii"))).transpose()?,
        bbox: info.bbox,
    })
}

fn write_optional(dir: &Path, name: &str, v: &Option<LabelVolume>) -> longct_core::Result<()> {
    match v {
        Some(v) => write_volume(dir.join(name), v),
        None => Ok(()),
    }
}

fn read_optional(dir: &Path, name: &str) -> longct_core::Result<Option<LabelVolume>> {
    let p = dir.join(name);
    p.exists().then(|| read_labels(&p)).transpose()
}

pub fn save_registered(dir: &Path, pair: &RegisteredPair) -> longct_core::Result<()> {
    fs::create_dir_all(dir)?;
    write_volume(dir.join("x0_reg.nii"), &pair.x0_reg)?;
    write_optional(dir, "y0_reg.nii", &pair.y0_reg)?;
    write_volume(dir.join("m0_reg.nii"), &pair.m0_reg)?;
    write_volume(dir.join("x1.nii"), &pair.x1)?;
    write_optional(dir, "y1.nii", &pair.y1)?;
    write_volume(dir.join("m1.nii"), &pair.m1)?;
    pair.transform.save(dir.join("transform.json"))?;
    write_json(&dir.join("registration.json"), &pair.report)?;
    Ok(())
}

pub fn load_registered(dir: &Path) -> longct_core::Result<RegisteredPair> {
    let report: RegistrationReport = read_json(&dir.join("registration.json"))?;
    Ok(RegisteredPair {
        x0_reg: read_f32(dir.join("x0_reg.nii"))?,
        y0_reg: read_optional(dir, "y0_reg.nii")?,
        m0_reg: read_labels(dir.join("m0_reg.nii"))?,
        x1: read_f32(dir.join("x1.nii"))?,
        y1: read_optional(dir, "y1.nii")?,
        m1: read_labels(dir.join("m1.nii"))?,
        transform: BSplineTransform::load(dir.join("transform.json"))?,
        report,
    })
}

/// Loads the registered pairs of an index, optionally restricted to a split.
pub fn load_training_pairs(index_file: &Path, split: Option<Split>) -> longct_core::Result<(Vec<PairEntry>, Vec<TrainingPair>)> {
    let index = PairIndex::load(index_file)?;
    let base = index_file.parent().unwrap_or(Path::new("."));
    let entries: Vec<PairEntry> = index.pairs.into_iter().filter(|p| split.is_none() || p.split == split).collect();
    let pairs = entries
        .iter()
        .map(|e| Ok(TrainingPair { patient_id: e.patient_id.clone(), pair: load_registered(&base.join(&e.dir))? }))
        .collect::<longct_core::Result<Vec<_>>>()?;
    Ok((entries, pairs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use longct_core::registration::BSplineTransform;
    use longct_core::{Geometry, Volume3D};

    fn pair() -> RegisteredPair {
        let g = Geometry::new([6, 5, 4], [1.5, 1.25, 2.0], [1.0, -2.0, 0.5]).unwrap();
        let ct = Volume3D::from_fn(g, |x, y, z| (x + 2 * y + 3 * z) as f32 / 20.0);
        let lab = Volume3D::from_fn(g, |x, y, z| ((x + y + z) % 5) as u8);
        let mask = Volume3D::from_fn(g, |x, _, _| u8::from(x > 1));
        RegisteredPair {
            x0_reg: ct.clone(),
            y0_reg: Some(lab.clone()),
            m0_reg: mask.clone(),
            x1: ct.map(|v| 1.0 - v),
            y1: None,
            m1: mask,
            transform: BSplineTransform::identity(g, [4, 4, 4]).unwrap(),
            report: RegistrationReport { levels: vec![], dice_before: 0.5, dice_after: 0.9, fell_back_to_identity: false },
        }
    }

    #[test]
    fn registered_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = pair();
        save_registered(dir.path(), &p).unwrap();
        let q = load_registered(dir.path()).unwrap();
        assert_eq!(q.x0_reg.data(), p.x0_reg.data());
        assert_eq!(q.x1.data(), p.x1.data());
        assert_eq!(q.y0_reg.unwrap().data(), p.y0_reg.unwrap().data());
        assert!(q.y1.is_none());
        assert_eq!(q.m1.data(), p.m1.data());
        assert_eq!(q.report, p.report);
        assert_eq!(q.transform.coefficients, p.transform.coefficients);
    }

    #[test]
    fn processed_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = pair();
        let tp = ProcessedTimepoint {
            ct: p.x1.clone(),
            lung_mask: p.m1.clone(),
            pathology: p.y0_reg.clone(),
            bbox: BoundingBox { lo: [1, 2, 3], hi: [4, 5, 6] },
        };
        save_processed(dir.path(), &tp).unwrap();
        let q = load_processed(dir.path()).unwrap();
        assert_eq!(q.ct.data(), tp.ct.data());
        assert_eq!(q.pathology.unwrap().data(), tp.pathology.unwrap().data());
        assert_eq!(q.bbox, tp.bbox);
    }
}
