//! Binary masks and weak (foreground-only) annotations.

use crate::tensor::Tensor;

/// Row-major binary `height × width` mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), height * width, "mask size mismatch");
        Self {
            height,
            width,
            bits,
        }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![false; height * width])
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self::new(height, width, bits)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    /// Like [`Mask::get`], treating out-of-range coordinates as background.
    pub fn get_or_bg(&self, row: isize, col: isize) -> bool {
        row >= 0
            && col >= 0
            && (row as usize) < self.height
            && (col as usize) < self.width
            && self.get(row as usize, col as usize)
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn same_extent(&self, other: &Mask) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// True when every foreground pixel of `self` is foreground in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.same_extent(other) && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// `(row, col)` of each foreground pixel, row-major.
    pub fn foreground(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| (i / self.width, i % self.width))
    }

    /// Mean `(row, col)` of the foreground, or the image centre when empty.
    pub fn centroid(&self) -> (f64, f64) {
        let (mut sr, mut sc, mut n) = (0.0, 0.0, 0usize);
        for (r, c) in self.foreground() {
            sr += r as f64;
            sc += c as f64;
            n += 1;
        }
        if n == 0 {
            ((self.height as f64 - 1.0) / 2.0, (self.width as f64 - 1.0) / 2.0)
        } else {
            (sr / n as f64, sc / n as f64)
        }
    }

    /// `1 × H × W` tensor with 1.0 on foreground.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Tensor::image(self.height, self.width, data).expect("mask extents are positive")
    }
}

/// Weak annotation: the set of labeled foreground pixels `P`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeakMask(Mask);

impl WeakMask {
    pub fn new(labeled: Mask) -> Self {
        Self(labeled)
    }

    pub fn from_pixels(height: usize, width: usize, pixels: &[(usize, usize)]) -> Self {
        let mut m = Mask::empty(height, width);
        for &(r, c) in pixels {
            m.set(r, c, true);
        }
        Self(m)
    }

    pub fn labeled(&self) -> &Mask {
        &self.0
    }

    pub fn count(&self) -> usize {
        self.0.area()
    }

    /// Renders the annotation as a full mask with unlabeled pixels as background.
    pub fn to_mask(&self) -> Mask {
        self.0.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subset_and_area() {
        let a = Mask::from_fn(3, 3, |r, c| r == 1 && c == 1);
        let b = Mask::from_fn(3, 3, |r, _| r == 1);
        assert!(a.is_subset_of(&b));
        assert!(!b.is_subset_of(&a));
        assert_eq!(b.area(), 3);
        assert_eq!(b.centroid(), (1.0, 1.0));
        assert!(!a.get_or_bg(-1, 0));
    }

    #[test]
    fn weak_from_pixels() {
        let w = WeakMask::from_pixels(4, 4, &[(0, 0), (3, 2)]);
        assert_eq!(w.count(), 2);
        assert_eq!(w.labeled().foreground().collect::<Vec<_>>(), vec![(0, 0), (3, 2)]);
        assert_eq!(w.to_mask().to_tensor().data()[14], 1.0);
    }
}
