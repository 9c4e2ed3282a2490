//! Segmentation and progression losses with their gradients.
//!
//! Class maps are dense `(batch, class, y, x)` arrays. The consolidation maps
//! used by the progression term are the CONS probability channel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gemm::NetScalar;

pub const CONS_CHANNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown<T> {
    pub seg: T,
    pub prog: T,
    pub total: T,
}

impl<T: NetScalar> LossBreakdown<T> {
    pub fn new(seg: T, prog: T) -> Self {
        Self { seg, prog, total: seg + prog }
    }

    pub fn to_f64(self) -> LossBreakdown<f64> {
        let f = |v: T| v.to_f64().unwrap_or(f64::NAN);
        LossBreakdown { seg: f(self.seg), prog: f(self.prog), total: f(self.total) }
    }

    pub fn is_finite(&self) -> bool {
        self.seg.is_finite() && self.prog.is_finite() && self.total.is_finite()
    }
}

/// A borrowed stack of per-pixel class maps.
#[derive(Debug, Clone, Copy)]
pub struct ClassMaps<'a, T> {
    pub data: &'a [T],
    pub batch: usize,
    pub classes: usize,
    pub pixels: usize,
}

impl<'a, T: NetScalar> ClassMaps<'a, T> {
    pub fn new(data: &'a [T], batch: usize, classes: usize, pixels: usize) -> Result<Self> {
        if data.len() != batch * classes * pixels {
            return Err(Error::Shape(format!("{} values for {batch}x{classes}x{pixels} class maps", data.len())));
        }
        Ok(Self { data, batch, classes, pixels })
    }

    fn same_shape(&self, other: &Self) -> Result<()> {
        if (self.batch, self.classes, self.pixels) != (other.batch, other.classes, other.pixels) {
            return Err(Error::Shape(format!(
                "class maps {}x{}x{} vs {}x{}x{}",
                self.batch, self.classes, self.pixels, other.batch, other.classes, other.pixels
            )));
        }
        Ok(())
    }

    /// One channel of every image, concatenated.
    pub fn channel(&self, c: usize) -> Vec<T> {
        (0..self.batch)
            .flat_map(|n| self.data[(n * self.classes + c) * self.pixels..][..self.pixels].iter().copied())
            .collect()
    }
}

/// One-hot encoding of labels given as `(batch, y, x)`.
pub fn one_hot<T: NetScalar>(labels: &[u8], classes: usize, pixels: usize) -> Vec<T> {
    let batch = labels.len() / pixels;
    let mut out = vec![T::zero(); batch * classes * pixels];
    for n in 0..batch {
        for (k, &l) in labels[n * pixels..(n + 1) * pixels].iter().enumerate() {
            out[(n * classes + l as usize) * pixels + k] = T::one();
        }
    }
    out
}

fn check_len<T>(a: &[T], b: &[T]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} values", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Shape("empty maps".into()));
    }
    Ok(())
}

/// Mean squared error over all entries.
pub fn mse<T: NetScalar>(pred: &[T], target: &[T]) -> Result<T> {
    check_len(pred, target)?;
    let s: T = pred.iter().zip(target).map(|(&p, &t)| (p - t) * (p - t)).sum();
    Ok(s / T::of(pred.len() as f64))
}

/// `dL/dpred` for [`mse`].
pub fn mse_grad<T: NetScalar>(pred: &[T], target: &[T]) -> Result<Vec<T>> {
    check_len(pred, target)?;
    let k = T::of(2.0 / pred.len() as f64);
    Ok(pred.iter().zip(target).map(|(&p, &t)| k * (p - t)).collect())
}

pub fn seg_loss<T: NetScalar>(pred0: ClassMaps<T>, gt0: ClassMaps<T>, pred1: ClassMaps<T>, gt1: ClassMaps<T>) -> Result<T> {
    pred0.same_shape(&gt0)?;
    pred1.same_shape(&gt1)?;
    Ok(mse(pred0.data, gt0.data)? + mse(pred1.data, gt1.data)?)
}

/// MSE between the true and the predicted consolidation change.
pub fn prog_loss<T: NetScalar>(pred0_con: &[T], pred1_con: &[T], gt0_con: &[T], gt1_con: &[T]) -> Result<T> {
    check_len(pred0_con, pred1_con)?;
    check_len(pred0_con, gt0_con)?;
    check_len(pred0_con, gt1_con)?;
    let s: T = (0..pred0_con.len())
        .map(|i| {
            let d = (gt1_con[i] - gt0_con[i]) - (pred1_con[i] - pred0_con[i]);
            d * d
        })
        .sum();
    Ok(s / T::of(pred0_con.len() as f64))
}

/// Combined loss; the progression term is dropped when `with_prog` is false.
pub fn total_loss<T: NetScalar>(
    pred0: ClassMaps<T>,
    gt0: ClassMaps<T>,
    pred1: ClassMaps<T>,
    gt1: ClassMaps<T>,
    with_prog: bool,
) -> Result<LossBreakdown<T>> {
    let seg = seg_loss(pred0, gt0, pred1, gt1)?;
    let prog = if with_prog {
        pred0.same_shape(&pred1)?;
        prog_loss(
            &pred0.channel(CONS_CHANNEL),
            &pred1.channel(CONS_CHANNEL),
            &gt0.channel(CONS_CHANNEL),
            &gt1.channel(CONS_CHANNEL),
        )?
    } else {
        T::zero()
    };
    Ok(LossBreakdown::new(seg, prog))
}

/// [`total_loss`] together with its gradients with respect to both predictions.
pub fn total_loss_with_grad<T: NetScalar>(
    pred0: ClassMaps<T>,
    gt0: ClassMaps<T>,
    pred1: ClassMaps<T>,
    gt1: ClassMaps<T>,
    with_prog: bool,
) -> Result<(LossBreakdown<T>, Vec<T>, Vec<T>)> {
    let loss = total_loss(pred0, gt0, pred1, gt1, with_prog)?;
    let mut d0 = mse_grad(pred0.data, gt0.data)?;
    let mut d1 = mse_grad(pred1.data, gt1.data)?;
    if with_prog {
        let m = pred0.batch * pred0.pixels;
        let k = T::of(2.0 / m as f64);
        for n in 0..pred0.batch {
            let base = (n * pred0.classes + CONS_CHANNEL) * pred0.pixels;
            for i in base..base + pred0.pixels {
                let d = (gt1.data[i] - gt0.data[i]) - (pred1.data[i] - pred0.data[i]);
                d1[i] -= k * d;
                d0[i] += k * d;
            }
        }
    }
    Ok((loss, d0, d1))
}
