//! Per-class Dice and progression-volume error on labelled pairs, and the
//! paired static versus longitudinal comparison.

use longct_core::metrics::dice;
use longct_core::preprocess::PreprocessConfig;
use longct_core::progression::analyze_pair;
use longct_core::{LabelVolume, PathologyClass};
use serde::{Deserialize, Serialize};

use crate::data::{Target, TrainingPair};
use crate::error::Result;
use crate::gemm::NetScalar;
use crate::inference::segment_pair;
use crate::model::FcDenseNet;

/// Anything that labels both timepoints of a pair on the follow-up grid.
/// `index` is the pair's position in the evaluated list.
pub trait PairSegmenter {
    fn tag(&self) -> String;
    fn segment(&self, index: usize, pair: &TrainingPair) -> Result<(LabelVolume, LabelVolume)>;
}

pub struct ModelSegmenter<'a, T> {
    pub model: &'a FcDenseNet<T>,
    pub preprocess: &'a PreprocessConfig,
}

impl<T: NetScalar> PairSegmenter for ModelSegmenter<'_, T> {
    fn tag(&self) -> String {
        format!("{:?}", self.model.config.variant).to_lowercase()
    }

    fn segment(&self, _index: usize, pair: &TrainingPair) -> Result<(LabelVolume, LabelVolume)> {
        let s = segment_pair(self.model, &pair.pair, self.preprocess)?;
        Ok((s.labels_t0, s.labels_t1))
    }
}

/// Dice for HL, GGO, CONS and PLEFF, in that order.
pub type ClassDice = [f64; 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeDice {
    pub patient_id: String,
    pub pair_index: usize,
    pub target: Target,
    pub dice: ClassDice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressionError {
    pub patient_id: String,
    pub pair_index: usize,
    pub true_progressed_ml: f64,
    pub true_recovered_ml: f64,
    pub predicted_progressed_ml: f64,
    pub predicted_recovered_ml: f64,
    pub progressed_abs_error_ml: f64,
    pub recovered_abs_error_ml: f64,
    pub net_abs_error_ml: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub variant: String,
    pub volumes: Vec<VolumeDice>,
    pub mean: ClassDice,
    /// Population standard deviation over volumes.
    pub std: ClassDice,
    pub progression: Vec<ProgressionError>,
    pub mean_net_abs_error_ml: f64,
    /// Pairs left out, with the reason.
    pub skipped: Vec<String>,
}

pub const CLASS_NAMES: [&str; 4] = ["HL", "GGO", "CONS", "PLEFF"];

pub fn class_dice(pred: &LabelVolume, gt: &LabelVolume) -> Result<ClassDice> {
    let mut out = [0.0; 4];
    for (o, c) in out.iter_mut().zip(PathologyClass::FOREGROUND) {
        *o = dice(pred, gt, c.index())?;
    }
    Ok(out)
}

/// Mean and population standard deviation per class.
pub fn aggregate(volumes: &[VolumeDice]) -> (ClassDice, ClassDice) {
    let n = volumes.len() as f64;
    if volumes.is_empty() {
        return ([0.0; 4], [0.0; 4]);
    }
    let mean: ClassDice = std::array::from_fn(|k| volumes.iter().map(|v| v.dice[k]).sum::<f64>() / n);
    let std = std::array::from_fn(|k| (volumes.iter().map(|v| (v.dice[k] - mean[k]).powi(2)).sum::<f64>() / n).sqrt());
    (mean, std)
}

/// Segments every pair and scores it against the registered ground truth.
/// Pairs without labels are skipped with a warning.
pub fn evaluate(segmenter: &dyn PairSegmenter, pairs: &[TrainingPair]) -> Result<EvalResult> {
    let mut volumes = Vec::new();
    let mut progression = Vec::new();
    let mut skipped = Vec::new();
    for (i, tp) in pairs.iter().enumerate() {
        let (Some(y0), Some(y1)) = (&tp.pair.y0_reg, &tp.pair.y1) else {
            log::warn!("pair {i} of {} has no ground truth; skipped", tp.patient_id);
            skipped.push(format!("{}#{i}: missing ground truth", tp.patient_id));
            continue;
        };
        let (s0, s1) = segmenter.segment(i, tp)?;
        for (target, pred, gt) in [(Target::Reference, &s0, y0), (Target::Followup, &s1, y1)] {
            volumes.push(VolumeDice {
                patient_id: tp.patient_id.clone(),
                pair_index: i,
                target,
                dice: class_dice(pred, gt)?,
            });
        }
        let (_, truth) = analyze_pair(y0, y1, None)?;
        let (_, pred) = analyze_pair(&s0, &s1, None)?;
        progression.push(ProgressionError {
            patient_id: tp.patient_id.clone(),
            pair_index: i,
            true_progressed_ml: truth.progressed_ml,
            true_recovered_ml: truth.recovered_ml,
            predicted_progressed_ml: pred.progressed_ml,
            predicted_recovered_ml: pred.recovered_ml,
            progressed_abs_error_ml: (truth.progressed_ml - pred.progressed_ml).abs(),
            recovered_abs_error_ml: (truth.recovered_ml - pred.recovered_ml).abs(),
            net_abs_error_ml: (truth.net_change_ml - pred.net_change_ml).abs(),
        });
    }
    let (mean, std) = aggregate(&volumes);
    let mean_net_abs_error_ml = if progression.is_empty() {
        0.0
    } else {
        progression.iter().map(|p| p.net_abs_error_ml).sum::<f64>() / progression.len() as f64
    };
    Ok(EvalResult { variant: segmenter.tag(), volumes, mean, std, progression, mean_net_abs_error_ml, skipped })
}

pub fn evaluate_model<T: NetScalar>(
    model: &FcDenseNet<T>,
    pairs: &[TrainingPair],
    preprocess: &PreprocessConfig,
) -> Result<EvalResult> {
    evaluate(&ModelSegmenter { model, preprocess }, pairs)
}

/// CONS Dice of two models on the same volumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedDice {
    pub patient_id: String,
    pub pair_index: usize,
    pub target: Target,
    pub static_cons: f64,
    pub longitudinal_cons: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub paired: Vec<PairedDice>,
    pub static_mean_cons: f64,
    pub longitudinal_mean_cons: f64,
    /// Volumes where the longitudinal model scores at least as high.
    pub longitudinal_not_worse: usize,
}

pub fn compare(static_result: &EvalResult, longitudinal: &EvalResult) -> Comparison {
    const CONS: usize = 2;
    let paired: Vec<PairedDice> = static_result
        .volumes
        .iter()
        .filter_map(|s| {
            longitudinal
                .volumes
                .iter()
                .find(|l| l.patient_id == s.patient_id && l.pair_index == s.pair_index && l.target == s.target)
                .map(|l| PairedDice {
                    patient_id: s.patient_id.clone(),
                    pair_index: s.pair_index,
                    target: s.target,
                    static_cons: s.dice[CONS],
                    longitudinal_cons: l.dice[CONS],
                })
        })
        .collect();
    let n = paired.len().max(1) as f64;
    Comparison {
        static_mean_cons: paired.iter().map(|p| p.static_cons).sum::<f64>() / n,
        longitudinal_mean_cons: paired.iter().map(|p| p.longitudinal_cons).sum::<f64>() / n,
        longitudinal_not_worse: paired.iter().filter(|p| p.longitudinal_cons >= p.static_cons).count(),
        paired,
    }
}

impl EvalResult {
    pub fn to_table(&self) -> String {
        let mut s = format!("model: {}\n{:<14}", self.variant, "volume");
        for c in CLASS_NAMES {
            s.push_str(&format!("{c:>8}"));
        }
        s.push('\n');
        for v in &self.volumes {
            let t = match v.target {
                Target::Reference => "t0",
                Target::Followup => "t1",
            };
            s.push_str(&format!("{:<14}", format!("{} {t}", v.patient_id)));
            for d in v.dice {
                s.push_str(&format!("{d:>8.3}"));
            }
            s.push('\n');
        }
        s.push_str(&format!("{:<14}", "mean"));
        for d in self.mean {
            s.push_str(&format!("{d:>8.3}"));
        }
        s.push_str(&format!("\n{:<14}", "std"));
        for d in self.std {
            s.push_str(&format!("{d:>8.3}"));
        }
        s.push_str(&format!("\nmean |net progression error| (mL): {:.3}\n", self.mean_net_abs_error_ml));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use longct_core::registration::{BSplineTransform, RegisteredPair, RegistrationReport};
    use longct_core::{Geometry, Volume3D};

    struct Stub<F: Fn(&RegisteredPair) -> (LabelVolume, LabelVolume)>(F);

    impl<F: Fn(&RegisteredPair) -> (LabelVolume, LabelVolume)> PairSegmenter for Stub<F> {
        fn tag(&self) -> String {
            "stub".into()
        }
        fn segment(&self, _index: usize, pair: &TrainingPair) -> Result<(LabelVolume, LabelVolume)> {
            Ok((self.0)(&pair.pair))
        }
    }

    fn labelled_pair(seed: usize) -> TrainingPair {
        let g = Geometry::new([10, 8, 6], [2.0, 2.0, 2.5], [0.0; 3]).unwrap();
        let y0 = Volume3D::from_fn(g, |x, y, z| ((x * 7 + y * 3 + z + seed) % 5) as u8);
        let y1 = Volume3D::from_fn(g, |x, y, z| ((x + y * 5 + z * 2 + seed) % 5) as u8);
        TrainingPair {
            patient_id: format!("p{seed}"),
            pair: RegisteredPair {
                x0_reg: Volume3D::filled(g, 0.5),
                y0_reg: Some(y0),
                m0_reg: Volume3D::filled(g, 1),
                x1: Volume3D::filled(g, 0.5),
                y1: Some(y1),
                m1: Volume3D::filled(g, 1),
                transform: BSplineTransform::identity(g, [4, 4, 4]).unwrap(),
                report: RegistrationReport { levels: vec![], dice_before: 1.0, dice_after: 1.0, fell_back_to_identity: false },
            },
        }
    }

    #[test]
    fn perfect_stub_scores_one() {
        let pairs: Vec<_> = (0..3).map(labelled_pair).collect();
        let perfect = Stub(|p: &RegisteredPair| (p.y0_reg.clone().unwrap(), p.y1.clone().unwrap()));
        let r = evaluate(&perfect, &pairs).unwrap();
        assert_eq!(r.volumes.len(), 6);
        assert!(r.volumes.iter().all(|v| v.dice == [1.0; 4]));
        assert!(r.progression.iter().all(|p| p.net_abs_error_ml == 0.0 && p.progressed_abs_error_ml == 0.0));
        assert_eq!(r.std, [0.0; 4]);
    }

    #[test]
    fn background_stub_scores_zero_on_present_classes() {
        let pairs: Vec<_> = (0..2).map(labelled_pair).collect();
        let blank = Stub(|p: &RegisteredPair| {
            let z = p.x1.map(|_| 0u8);
            (z.clone(), z)
        });
        let r = evaluate(&blank, &pairs).unwrap();
        assert!(r.volumes.iter().all(|v| v.dice == [0.0; 4]));
    }

    #[test]
    fn aggregates_match_records_and_missing_truth_is_skipped() {
        let mut pairs: Vec<_> = (0..3).map(labelled_pair).collect();
        pairs[1].pair.y1 = None;
        let shifted = Stub(|p: &RegisteredPair| {
            let y = p.y0_reg.clone().unwrap();
            (y.map(|v| if v == 3 { 1 } else { v }), y)
        });
        let r = evaluate(&shifted, &pairs).unwrap();
        assert_eq!(r.skipped.len(), 1);
        assert_eq!(r.volumes.len(), 4);
        let (mean, std) = aggregate(&r.volumes);
        for k in 0..4 {
            let m: f64 = r.volumes.iter().map(|v| v.dice[k]).sum::<f64>() / 4.0;
            assert!((mean[k] - m).abs() < 1e-9 && (r.mean[k] - m).abs() < 1e-9);
            assert!((r.std[k] - std[k]).abs() < 1e-9);
            assert!(r.volumes.iter().all(|v| (0.0..=1.0).contains(&v.dice[k])));
        }
    }

    #[test]
    fn comparison_pairs_volumes() {
        let pairs: Vec<_> = (0..2).map(labelled_pair).collect();
        let perfect = Stub(|p: &RegisteredPair| (p.y0_reg.clone().unwrap(), p.y1.clone().unwrap()));
        let blank = Stub(|p: &RegisteredPair| {
            let z = p.x1.map(|_| 0u8);
            (z.clone(), z)
        });
        let c = compare(&evaluate(&blank, &pairs).unwrap(), &evaluate(&perfect, &pairs).unwrap());
        assert_eq!(c.paired.len(), 4);
        assert_eq!(c.longitudinal_mean_cons, 1.0);
        assert_eq!(c.static_mean_cons, 0.0);
        assert_eq!(c.longitudinal_not_worse, 4);
    }
}
