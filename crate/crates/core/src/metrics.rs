//! Overlap metrics between label maps.

use crate::error::Result;
use crate::volume::require_same_geometry;
use crate::LabelVolume;

/// Dice overlap `2|P∩G| / (|P| + |G|)` for the voxels labelled `class`;
/// 1.0 when the class is absent from both maps.
pub fn dice(pred: &LabelVolume, gt: &LabelVolume, class: u8) -> Result<f64> {
    require_same_geometry(pred, gt, "dice")?;
    Ok(dice_slices(pred.data(), gt.data(), class))
}

pub fn dice_slices(pred: &[u8], gt: &[u8], class: u8) -> f64 {
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        let (ia, ib) = (a == class, b == class);
        p += usize::from(ia);
        g += usize::from(ib);
        both += usize::from(ia && ib);
    }
    if p + g == 0 {
        1.0
    } else {
        2.0 * both as f64 / (p + g) as f64
    }
}
