//! Consolidation progression maps and volume quantification.
//!
//! Progression is computed from hard labels of two aligned segmentations:
//! `+1` marks a voxel that became consolidation, `-1` one that recovered.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{require_same_geometry, PathologyClass};
use crate::{LabelVolume, ProgressionMap};

const MM3_PER_ML: f64 = 1000.0;

/// Binary map: 1 where the label is CONS, 0 elsewhere.
pub fn consolidation_map(labels: &LabelVolume) -> LabelVolume {
    labels.map(PathologyClass::consolidation_projection)
}

/// `con1 − con0` per voxel. Both inputs must be binary and share geometry.
pub fn progression_map(con0: &LabelVolume, con1: &LabelVolume) -> Result<ProgressionMap> {
    require_same_geometry(con0, con1, "progression_map")?;
    con0.validate_labels(1)?;
    con1.validate_labels(1)?;
    let data = con0.data().iter().zip(con1.data()).map(|(&a, &b)| b as i8 - a as i8).collect();
    Ok(ProgressionMap::new(*con1.geometry(), data)?)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProgressionReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_id: Option<String>,
    pub progressed_voxels: usize,
    pub recovered_voxels: usize,
    pub progressed_ml: f64,
    pub recovered_ml: f64,
    /// `progressed_ml − recovered_ml`.
    pub net_change_ml: f64,
    pub voxel_volume_mm3: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consolidation_ml_t0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consolidation_ml_t1: Option<f64>,
}

/// Counts `+1` / `-1` voxels and converts them to millilitres using the map's
/// voxel spacing.
pub fn quantify(map: &ProgressionMap) -> ProgressionReport {
    let voxel = map.geometry().voxel_volume();
    let progressed = map.data().iter().filter(|&&v| v > 0).count();
    let recovered = map.data().iter().filter(|&&v| v < 0).count();
    let progressed_ml = progressed as f64 * voxel / MM3_PER_ML;
    let recovered_ml = recovered as f64 * voxel / MM3_PER_ML;
    ProgressionReport {
        pair_id: None,
        progressed_voxels: progressed,
        recovered_voxels: recovered,
        progressed_ml,
        recovered_ml,
        net_change_ml: progressed_ml - recovered_ml,
        voxel_volume_mm3: voxel,
        consolidation_ml_t0: None,
        consolidation_ml_t1: None,
    }
}

/// Full report from two class-label segmentations in the same (follow-up) space.
pub fn analyze_pair(seg0: &LabelVolume, seg1: &LabelVolume, pair_id: Option<String>) -> Result<(ProgressionMap, ProgressionReport)> {
    if !seg0.geometry().matches(seg1.geometry()) {
        return Err(Error::GeometryMismatch("segmentations are not in a shared space".into()));
    }
    let con0 = consolidation_map(seg0);
    let con1 = consolidation_map(seg1);
    let map = progression_map(&con0, &con1)?;
    let voxel_ml = map.geometry().voxel_volume() / MM3_PER_ML;
    let mut report = quantify(&map);
    report.pair_id = pair_id;
    report.consolidation_ml_t0 = Some(con0.count(1) as f64 * voxel_ml);
    report.consolidation_ml_t1 = Some(con1.count(1) as f64 * voxel_ml);
    Ok((map, report))
}

impl ProgressionReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let id = self.pair_id.as_deref().unwrap_or("-");
        s.push_str(&format!("pair                 {id}\n"));
        if let (Some(a), Some(b)) = (self.consolidation_ml_t0, self.consolidation_ml_t1) {
            s.push_str(&format!("CONS t0 (mL)         {a:>10.3}\n"));
            s.push_str(&format!("CONS t1 (mL)         {b:>10.3}\n"));
        }
        s.push_str(&format!(
            "progression (mL)     {:>10.3}   ({} voxels)\n",
            self.progressed_ml, self.progressed_voxels
        ));
        s.push_str(&format!(
            "recovery (mL)        {:>10.3}   ({} voxels)\n",
            self.recovered_ml, self.recovered_voxels
        ));
        s.push_str(&format!("net change (mL)      {:>10.3}\n", self.net_change_ml));
        s
    }
}
