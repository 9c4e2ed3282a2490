//! Longitudinal studies and their on-disk manifests.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::volume::{require_same_geometry, N_CLASSES};
use crate::{CtVolume, LabelVolume};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

/// One scan of a patient: CT in HU, binary lung mask, optional pathology map.
#[derive(Debug, Clone)]
pub struct Timepoint {
    pub timepoint_index: usize,
    /// Days since the first scan of the study.
    pub acquisition_day: u32,
    pub ct: CtVolume,
    pub lung_mask: LabelVolume,
    pub pathology: Option<LabelVolume>,
}

impl Timepoint {
    pub fn validate(&self) -> Result<()> {
        require_same_geometry(&self.ct, &self.lung_mask, "ct vs lung mask")?;
        self.lung_mask.validate_labels(1)?;
        if let Some(p) = &self.pathology {
            require_same_geometry(&self.ct, p, "ct vs pathology")?;
            p.validate_labels((N_CLASSES - 1) as u8)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Study {
    patient_id: String,
    timepoints: Vec<Timepoint>,
}

impl Study {
    /// Validates ordering (strictly increasing days, first day 0), per-timepoint
    /// geometry and the longitudinal requirement of at least two scans.
    pub fn new(patient_id: impl Into<String>, timepoints: Vec<Timepoint>) -> Result<Self> {
        let patient_id = patient_id.into();
        if timepoints.len() < 2 {
            return Err(Error::NotLongitudinal(patient_id));
        }
        if timepoints[0].acquisition_day != 0 {
            return Err(Error::InvalidStudy(format!(
                "{patient_id}: first acquisition day is {}, expected 0",
                timepoints[0].acquisition_day
            )));
        }
        for w in timepoints.windows(2) {
            if w[1].acquisition_day <= w[0].acquisition_day {
                return Err(Error::InvalidStudy(format!(
                    "{patient_id}: acquisition days not strictly increasing ({} then {})",
                    w[0].acquisition_day, w[1].acquisition_day
                )));
            }
        }
        for t in &timepoints {
            t.validate()?;
        }
        Ok(Self { patient_id, timepoints })
    }

    pub fn patient_id(&self) -> &str {
        &self.patient_id
    }

    pub fn timepoints(&self) -> &[Timepoint] {
        &self.timepoints
    }

    /// `(t_i, t_{i+1})` for every consecutive pair, in acquisition order.
    pub fn consecutive_pairs(&self) -> Result<Vec<(&Timepoint, &Timepoint)>> {
        consecutive_pairs(&self.patient_id, &self.timepoints)
    }
}

pub fn consecutive_pairs<'a, T>(patient_id: &str, items: &'a [T]) -> Result<Vec<(&'a T, &'a T)>> {
    if items.len() < 2 {
        return Err(Error::NotLongitudinal(patient_id.to_string()));
    }
    Ok(items.windows(2).map(|w| (&w[0], &w[1])).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimepointEntry {
    pub timepoint_index: usize,
    pub acquisition_day: u32,
    pub ct: PathBuf,
    pub lung_mask: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pathology: Option<PathBuf>,
    /// Ground-truth displacement field to the next timepoint (phantoms only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub displacement_to_next: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyEntry {
    pub patient_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    pub timepoints: Vec<TimepointEntry>,
}

/// Study list with file paths relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyManifest {
    pub format_version: u32,
    pub studies: Vec<StudyEntry>,
}

impl StudyManifest {
    pub fn new(studies: Vec<StudyEntry>) -> Self {
        Self { format_version: MANIFEST_FORMAT_VERSION, studies }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let manifest: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        if manifest.format_version != MANIFEST_FORMAT_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("unsupported manifest version {}", manifest.format_version),
            });
        }
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &StudyEntry> {
        self.studies.iter().filter(move |s| s.split == Some(split))
    }
}

impl StudyEntry {
    /// Reads every referenced volume relative to `base`.
    pub fn load(&self, base: &Path) -> Result<Study> {
        let timepoints = self
            .timepoints
            .iter()
            .map(|t| {
                Ok(Timepoint {
                    timepoint_index: t.timepoint_index,
                    acquisition_day: t.acquisition_day,
                    ct: io::read_f32(base.join(&t.ct))?,
                    lung_mask: io::read_labels(base.join(&t.lung_mask))?,
                    pathology: t.pathology.as_ref().map(|p| io::read_labels(base.join(p))).transpose()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Study::new(self.patient_id.clone(), timepoints)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Geometry, Volume3D};

    fn tp(index: usize, day: u32) -> Timepoint {
        let g = Geometry::with_shape([4, 4, 4]).unwrap();
        Timepoint {
            timepoint_index: index,
            acquisition_day: day,
            ct: Volume3D::filled(g, -1000.0),
            lung_mask: Volume3D::filled(g, 1),
            pathology: Some(Volume3D::filled(g, 1)),
        }
    }

    #[test]
    fn pairs_of_two_and_three() {
        let s = Study::new("p", vec![tp(0, 0), tp(1, 10)]).unwrap();
        let pairs = s.consecutive_pairs().unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!((pairs[0].0.timepoint_index, pairs[0].1.timepoint_index), (0, 1));

        let s = Study::new("p", vec![tp(0, 0), tp(1, 10), tp(2, 25)]).unwrap();
        let idx: Vec<_> = s
            .consecutive_pairs()
            .unwrap()
            .iter()
            .map(|(a, b)| (a.timepoint_index, b.timepoint_index))
            .collect();
        assert_eq!(idx, vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn single_timepoint_is_rejected() {
        assert!(matches!(Study::new("p", vec![tp(0, 0)]), Err(Error::NotLongitudinal(_))));
        assert!(matches!(consecutive_pairs::<u8>("p", &[1]), Err(Error::NotLongitudinal(_))));
    }

    #[test]
    fn ordering_invariants() {
        assert!(Study::new("p", vec![tp(0, 3), tp(1, 10)]).is_err());
        assert!(Study::new("p", vec![tp(0, 0), tp(1, 0)]).is_err());
        assert!(Study::new("p", vec![tp(0, 0), tp(1, 5), tp(2, 4)]).is_err());
    }

    #[test]
    fn pairs_reproduce_sequence() {
        for n in 2..7usize {
            let items: Vec<usize> = (0..n).collect();
            let pairs = consecutive_pairs("p", &items).unwrap();
            assert_eq!(pairs.len(), n - 1);
            let mut flat = vec![*pairs[0].0];
            for (a, b) in &pairs {
                assert_eq!(*flat.last().unwrap(), **a);
                flat.push(**b);
            }
            assert_eq!(flat, items);
        }
    }

    #[test]
    fn timepoint_geometry_is_checked() {
        let mut t = tp(0, 0);
        t.lung_mask = Volume3D::filled(Geometry::with_shape([4, 4, 5]).unwrap(), 1);
        assert!(t.validate().is_err());
        let mut t = tp(0, 0);
        t.lung_mask.set(0, 0, 0, 2);
        assert!(t.validate().is_err());
    }
}
