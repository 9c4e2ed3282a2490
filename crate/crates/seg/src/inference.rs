//! 2.5D inference: per-view slice prediction, three-view probability fusion
//! and argmax labelling.

use longct_core::preprocess::{kept_indices, slice, stack, Image2, PreprocessConfig, View};
use longct_core::registration::RegisteredPair;
use longct_core::{CtVolume, LabelVolume, Volume3D, N_CLASSES};

use crate::data::{common_kept_indices, Target};
use crate::error::{Error, Result};
use crate::gemm::NetScalar;
use crate::model::{FcDenseNet, Variant};
use crate::tensor::Act;

/// Per-voxel class probabilities.
pub type ProbabilityVolume = Volume3D<[f32; N_CLASSES]>;

/// Assigned to slices that were removed as empty.
pub const BACKGROUND_CERTAIN: [f32; N_CLASSES] = [1.0, 0.0, 0.0, 0.0, 0.0];

/// Slices pushed through the network at once.
const INFERENCE_BATCH: usize = 16;

/// Runs the model on 2D images of `channels` planes each and returns one
/// probability image per input. Sides are zero-padded symmetrically up to the
/// model's size multiple and the output is cropped back.
pub fn predict_images<T: NetScalar>(
    model: &FcDenseNet<T>,
    images: &[Vec<Image2<f32>>],
) -> Result<Vec<Image2<[f32; N_CLASSES]>>> {
    let Some(first) = images.first().and_then(|im| im.first()) else {
        return Ok(Vec::new());
    };
    let (w, h) = (first.width, first.height);
    let c = model.config.in_channels;
    let m = model.config.size_multiple();
    let (wp, hp) = (w.div_ceil(m) * m, h.div_ceil(m) * m);
    let (x0, y0) = ((wp - w) / 2, (hp - h) / 2);
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(INFERENCE_BATCH) {
        let mut dense = vec![T::zero(); chunk.len() * c * hp * wp];
        for (n, planes) in chunk.iter().enumerate() {
            if planes.len() != c {
                return Err(Error::Shape(format!("model expects {c} channels, got {}", planes.len())));
            }
            for (ch, im) in planes.iter().enumerate() {
                if (im.width, im.height) != (w, h) {
                    return Err(Error::Shape(format!("image {}x{} in a {w}x{h} batch", im.width, im.height)));
                }
                let base = (n * c + ch) * hp * wp;
                for row in 0..h {
                    for col in 0..w {
                        dense[base + (row + y0) * wp + col + x0] = T::of(im.get(col, row) as f64);
                    }
                }
            }
        }
        let probs = model.forward_eval(&Act::from_nchw(chunk.len(), c, hp, wp, &dense))?.to_nchw();
        for n in 0..chunk.len() {
            let mut data = Vec::with_capacity(w * h);
            for row in 0..h {
                for col in 0..w {
                    let mut p = [0.0f32; N_CLASSES];
                    for (k, v) in p.iter_mut().enumerate() {
                        let idx = ((n * N_CLASSES + k) * hp + row + y0) * wp + col + x0;
                        *v = probs[idx].to_f32().unwrap_or(f32::NAN);
                    }
                    data.push(p);
                }
            }
            out.push(Image2 { width: w, height: h, data });
        }
    }
    Ok(out)
}

fn target_volumes(pair: &RegisteredPair, target: Target) -> (&CtVolume, &CtVolume) {
    match target {
        Target::Followup => (&pair.x1, &pair.x0_reg),
        Target::Reference => (&pair.x0_reg, &pair.x1),
    }
}

/// Predicts one timepoint of a pair slice by slice along `view`.
///
/// A longitudinal model sees `[other, target]` and runs on slices kept in both
/// timepoints; a static model sees the target alone and runs on the target's
/// kept slices. All other slices are background-certain.
pub fn predict_view<T: NetScalar>(
    model: &FcDenseNet<T>,
    pair: &RegisteredPair,
    target: Target,
    view: View,
    cfg: &PreprocessConfig,
) -> Result<ProbabilityVolume> {
    if !pair.x0_reg.geometry().matches(pair.x1.geometry()) {
        return Err(Error::Shape("pair timepoints are not on a shared grid".into()));
    }
    let (tgt, other) = target_volumes(pair, target);
    let variant = model.config.variant;
    let kept = match variant {
        Variant::Longitudinal => common_kept_indices(pair, view, cfg),
        Variant::Static => kept_indices(tgt, view, cfg),
    };
    let inputs: Vec<Vec<Image2<f32>>> = kept
        .iter()
        .map(|&i| match variant {
            Variant::Longitudinal => vec![slice(other, view, i), slice(tgt, view, i)],
            Variant::Static => vec![slice(tgt, view, i)],
        })
        .collect();
    let predicted = predict_images(model, &inputs)?;
    let geometry = *tgt.geometry();
    let blank = slice(&Volume3D::filled(geometry, BACKGROUND_CERTAIN), view, 0);
    let mut images = vec![blank; geometry.shape[view.axis()]];
    for (&i, im) in kept.iter().zip(predicted) {
        images[i] = im;
    }
    Ok(stack(geometry, view, &images)?)
}

/// Voxelwise mean of the three view predictions. The terms are summed in a
/// fixed (sorted) order in f64, so the result does not depend on which view
/// is passed where.
pub fn fuse_views(axial: &ProbabilityVolume, coronal: &ProbabilityVolume, sagittal: &ProbabilityVolume) -> Result<ProbabilityVolume> {
    let g = *axial.geometry();
    if !g.matches(coronal.geometry()) || !g.matches(sagittal.geometry()) {
        return Err(Error::Shape("view predictions differ in geometry".into()));
    }
    let data = axial
        .data()
        .iter()
        .zip(coronal.data())
        .zip(sagittal.data())
        .map(|((a, c), s)| std::array::from_fn(|k| mean3(a[k], c[k], s[k])))
        .collect();
    Ok(Volume3D::new(g, data)?)
}

fn mean3(a: f32, b: f32, c: f32) -> f32 {
    let mut v = [a, b, c];
    v.sort_by(f32::total_cmp);
    ((f64::from(v[0]) + f64::from(v[1]) + f64::from(v[2])) / 3.0) as f32
}

/// Argmax class index; ties go to the lowest index.
pub fn argmax(p: &[f32; N_CLASSES]) -> u8 {
    let mut best = 0;
    for k in 1..N_CLASSES {
        if p[k] > p[best] {
            best = k;
        }
    }
    best as u8
}

pub fn labelize(prob: &ProbabilityVolume) -> LabelVolume {
    prob.map(|p| argmax(&p))
}

/// Fused probabilities and labels for both timepoints of a pair, all on the
/// follow-up grid.
#[derive(Debug, Clone)]
pub struct PairSegmentation {
    pub prob_t0: ProbabilityVolume,
    pub prob_t1: ProbabilityVolume,
    pub labels_t0: LabelVolume,
    pub labels_t1: LabelVolume,
}

pub fn predict_fused<T: NetScalar>(
    model: &FcDenseNet<T>,
    pair: &RegisteredPair,
    target: Target,
    cfg: &PreprocessConfig,
) -> Result<ProbabilityVolume> {
    let [a, c, s] = View::ALL.map(|v| predict_view(model, pair, target, v, cfg));
    fuse_views(&a?, &c?, &s?)
}

pub fn segment_pair<T: NetScalar>(model: &FcDenseNet<T>, pair: &RegisteredPair, cfg: &PreprocessConfig) -> Result<PairSegmentation> {
    let prob_t0 = predict_fused(model, pair, Target::Reference, cfg)?;
    let prob_t1 = predict_fused(model, pair, Target::Followup, cfg)?;
    Ok(PairSegmentation { labels_t0: labelize(&prob_t0), labels_t1: labelize(&prob_t1), prob_t0, prob_t1 })
}
