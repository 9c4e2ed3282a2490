//! Zero-bordered activation maps.
//!
//! An [`Act`] holds `c` channel rows; each row stores `n` images of
//! `(h + 2) × (w + 2)` values whose one-pixel border is kept at zero. With this
//! layout a 3×3 convolution is nine shifted matrix products over whole rows,
//! and channel concatenation is appending rows.

use crate::gemm::NetScalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Act<T> {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: NetScalar> Act<T> {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self { c, n, h, w, data: vec![T::zero(); c * n * (h + 2) * (w + 2)] }
    }

    /// Builds from dense `(n, c, h, w)` data.
    pub fn from_nchw(n: usize, c: usize, h: usize, w: usize, dense: &[T]) -> Self {
        assert_eq!(dense.len(), n * c * h * w, "dense input length");
        let mut a = Self::zeros(c, n, h, w);
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h {
                    let src = &dense[((ni * c + ci) * h + y) * w..][..w];
                    let dst = a.pos(ci, ni, y, 0);
                    a.data[dst..dst + w].copy_from_slice(src);
                }
            }
        }
        a
    }

    /// Dense `(n, c, h, w)` copy of the interior.
    pub fn to_nchw(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.n * self.c * self.h * self.w);
        for ni in 0..self.n {
            for ci in 0..self.c {
                for y in 0..self.h {
                    let p = self.pos(ci, ni, y, 0);
                    out.extend_from_slice(&self.data[p..p + self.w]);
                }
            }
        }
        out
    }

    #[inline]
    pub fn plane(&self) -> usize {
        (self.h + 2) * (self.w + 2)
    }

    /// Length of one channel row.
    #[inline]
    pub fn row_len(&self) -> usize {
        self.n * self.plane()
    }

    /// Flat index of interior pixel `(y, x)` of image `n`, channel `c`.
    #[inline]
    pub fn pos(&self, c: usize, n: usize, y: usize, x: usize) -> usize {
        c * self.row_len() + n * self.plane() + (y + 1) * (self.w + 2) + x + 1
    }

    pub fn row(&self, c: usize) -> &[T] {
        let r = self.row_len();
        &self.data[c * r..(c + 1) * r]
    }

    pub fn row_mut(&mut self, c: usize) -> &mut [T] {
        let r = self.row_len();
        &mut self.data[c * r..(c + 1) * r]
    }

    /// Copy of channels `range`.
    pub fn channels(&self, range: std::ops::Range<usize>) -> Self {
        let r = self.row_len();
        Self { c: range.len(), n: self.n, h: self.h, w: self.w, data: self.data[range.start * r..range.end * r].to_vec() }
    }

    /// Concatenation along channels.
    pub fn concat(parts: &[&Self]) -> Self {
        let first = parts[0];
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        for p in parts {
            assert!(p.n == first.n && p.h == first.h && p.w == first.w, "concat shape mismatch");
            data.extend_from_slice(&p.data);
        }
        Self { c: parts.iter().map(|p| p.c).sum(), n: first.n, h: first.h, w: first.w, data }
    }

    /// Appends channels in place.
    pub fn extend(&mut self, other: &Self) {
        assert!(other.n == self.n && other.h == self.h && other.w == self.w, "extend shape mismatch");
        self.data.extend_from_slice(&other.data);
        self.c += other.c;
    }

    pub fn zero_borders(&mut self) {
        let (h, w) = (self.h, self.w);
        let wp = w + 2;
        let plane = self.plane();
        for img in self.data.chunks_exact_mut(plane) {
            img[..wp].fill(T::zero());
            img[(h + 1) * wp..].fill(T::zero());
            for y in 1..=h {
                img[y * wp] = T::zero();
                img[y * wp + w + 1] = T::zero();
            }
        }
    }

    /// Calls `f(offset)` for the start of every interior image row in one channel row.
    #[inline]
    pub fn for_each_interior_run(&self, mut f: impl FnMut(usize)) {
        let plane = self.plane();
        for ni in 0..self.n {
            for y in 0..self.h {
                f(ni * plane + (y + 1) * (self.w + 2) + 1);
            }
        }
    }

    pub fn interior_count(&self) -> usize {
        self.n * self.h * self.w
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nchw_roundtrip_and_zero_border() {
        let dense: Vec<f32> = (0..2 * 3 * 4 * 5).map(|v| v as f32 + 1.0).collect();
        let a = Act::from_nchw(2, 3, 4, 5, &dense);
        assert_eq!(a.to_nchw(), dense);
        let interior: f32 = dense.iter().sum();
        assert_eq!(a.data.iter().sum::<f32>(), interior);
        let mut b = a.clone();
        b.data.iter_mut().for_each(|v| *v = 1.0);
        b.zero_borders();
        assert_eq!(b.data.iter().sum::<f32>() as usize, b.interior_count() * 3);
    }
}
