//! Slice samples drawn from registered longitudinal pairs.

use longct_core::preprocess::{kept_indices, slice, PreprocessConfig, View};
use longct_core::registration::RegisteredPair;
use longct_core::CtVolume;
use serde::{Deserialize, Serialize};

use crate::gemm::NetScalar;
use crate::model::Variant;
use crate::tensor::Act;

/// A registered pair tagged with the patient it belongs to.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub patient_id: String,
    pub pair: RegisteredPair,
}

/// Timepoint whose pathology a sample predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Target {
    Reference,
    Followup,
}

/// One slice position of one pair; it yields two samples, one per target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SliceItem {
    pub pair: usize,
    pub view: View,
    pub index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sample {
    pub item: SliceItem,
    pub target: Target,
}

#[derive(Debug, Clone, Default)]
pub struct SampleSet {
    pub items: Vec<SliceItem>,
    /// Pairs left out, with the reason.
    pub skipped: Vec<(usize, String)>,
}

impl SampleSet {
    /// Two samples per item: follow-up target first, then the reference.
    pub fn samples(&self) -> Vec<Sample> {
        self.items
            .iter()
            .flat_map(|&item| [Sample { item, target: Target::Followup }, Sample { item, target: Target::Reference }])
            .collect()
    }
}

/// Slice indices kept in both timepoints of a pair.
pub fn common_kept_indices(pair: &RegisteredPair, view: View, cfg: &PreprocessConfig) -> Vec<usize> {
    let k1 = kept_indices(&pair.x1, view, cfg);
    kept_indices(&pair.x0_reg, view, cfg).into_iter().filter(|i| k1.binary_search(i).is_ok()).collect()
}

pub fn make_training_samples(pairs: &[TrainingPair], views: &[View], cfg: &PreprocessConfig) -> SampleSet {
    let mut set = SampleSet::default();
    for (p, tp) in pairs.iter().enumerate() {
        if tp.pair.y0_reg.is_none() || tp.pair.y1.is_none() {
            log::warn!("pair {p} ({}) has no pathology labels; skipped", tp.patient_id);
            set.skipped.push((p, "missing pathology labels".into()));
            continue;
        }
        let before = set.items.len();
        for &view in views {
            for index in common_kept_indices(&tp.pair, view, cfg) {
                set.items.push(SliceItem { pair: p, view, index });
            }
        }
        if set.items.len() == before {
            log::warn!("pair {p} ({}) has no overlapping kept slices; skipped", tp.patient_id);
            set.skipped.push((p, "no overlapping kept slices".into()));
        }
    }
    set
}

fn push_image<T: NetScalar>(dst: &mut Vec<T>, vol: &CtVolume, view: View, index: usize) {
    dst.extend(slice(vol, view, index).data.iter().map(|&v| T::of(v as f64)));
}

/// Inputs and labels for a batch of items.
///
/// Image `2j` predicts the follow-up of item `j` and image `2j + 1` the
/// reference. Longitudinal inputs put the other timepoint first and the
/// target second; static inputs hold the target alone.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub input: Act<T>,
    /// `(image, y, x)` labels aligned with the input images.
    pub labels: Vec<u8>,
    pub height: usize,
    pub width: usize,
}

pub fn build_batch<T: NetScalar>(pairs: &[TrainingPair], items: &[SliceItem], variant: Variant) -> Batch<T> {
    let first = slice(&pairs[items[0].pair].pair.x1, items[0].view, items[0].index);
    let (w, h) = (first.width, first.height);
    let c = variant.in_channels();
    let mut dense = Vec::with_capacity(items.len() * 2 * c * w * h);
    let mut labels = Vec::with_capacity(items.len() * 2 * w * h);
    for it in items {
        let p = &pairs[it.pair].pair;
        let (y0, y1) = (p.y0_reg.as_ref().expect("labelled pair"), p.y1.as_ref().expect("labelled pair"));
        for (target, other, gt) in [(&p.x1, &p.x0_reg, y1), (&p.x0_reg, &p.x1, y0)] {
            if variant == Variant::Longitudinal {
                push_image(&mut dense, other, it.view, it.index);
            }
            push_image(&mut dense, target, it.view, it.index);
            labels.extend_from_slice(&slice(gt, it.view, it.index).data);
        }
    }
    Batch { input: Act::from_nchw(items.len() * 2, c, h, w, &dense), labels, height: h, width: w }
}
