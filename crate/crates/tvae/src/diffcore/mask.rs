//! Boolean mask with right-aligned broadcasting against tensor shapes.

/// A boolean tensor used for attention masking and loss masking.
///
/// Carries no gradient. Broadcasts against a value tensor numpy-style on the
/// right-aligned axes: each mask dimension must equal the corresponding value
/// dimension or be 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoolMask {
    shape: Vec<usize>,
    data: Vec<bool>,
}

impl BoolMask {
    pub fn new(shape: Vec<usize>, data: Vec<bool>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "mask data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        BoolMask { shape, data }
    }

    pub fn full(shape: Vec<usize>, value: bool) -> Self {
        let numel = shape.iter().product();
        BoolMask { shape, data: vec![value; numel] }
    }

    /// Lower-triangular causal mask of shape `[len, len]`: position `q` may
    /// attend to keys `k <= q`.
    pub fn causal(len: usize) -> Self {
        let mut data = vec![false; len * len];
        for q in 0..len {
            for k in 0..=q {
                data[q * len + k] = true;
            }
        }
        BoolMask { shape: vec![len, len], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    /// Elementwise AND, broadcasting the two masks together.
    pub fn and(&self, other: &BoolMask) -> BoolMask {
        let rank = self.shape.len().max(other.shape.len());
        let mut shape = vec![0usize; rank];
        for i in 0..rank {
            let a = dim_from_right(&self.shape, rank - 1 - i);
            let b = dim_from_right(&other.shape, rank - 1 - i);
            assert!(
                a == b || a == 1 || b == 1,
                "mask shapes {:?} and {:?} do not broadcast",
                self.shape,
                other.shape
            );
            shape[i] = a.max(b);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![false; numel];
        let mut idx = vec![0usize; rank];
        for (flat, slot) in data.iter_mut().enumerate() {
            let mut rem = flat;
            for i in (0..rank).rev() {
                idx[i] = rem % shape[i];
                rem /= shape[i];
            }
            *slot = self.at_broadcast(&idx, rank) && other.at_broadcast(&idx, rank);
        }
        BoolMask { shape, data }
    }

    /// Insert a size-1 axis at `axis`.
    pub fn unsqueeze(&self, axis: usize) -> BoolMask {
        assert!(axis <= self.shape.len(), "unsqueeze axis {axis} out of range");
        let mut shape = self.shape.clone();
        shape.insert(axis, 1);
        BoolMask { shape, data: self.data.clone() }
    }

    /// Value at a broadcast index of total rank `rank` (right-aligned).
    pub(crate) fn at_broadcast(&self, idx: &[usize], rank: usize) -> bool {
        debug_assert_eq!(idx.len(), rank);
        let offset = rank - self.shape.len();
        let mut flat = 0usize;
        for (i, &dim) in self.shape.iter().enumerate() {
            let j = idx[offset + i];
            let j = if dim == 1 { 0 } else { j };
            flat = flat * dim + j;
        }
        self.data[flat]
    }

    /// Check this mask broadcasts against `target` (right-aligned).
    pub(crate) fn assert_broadcasts_to(&self, target: &[usize]) {
        assert!(
            self.shape.len() <= target.len(),
            "mask rank {} exceeds tensor rank {} ({:?} vs {:?})",
            self.shape.len(),
            target.len(),
            self.shape,
            target
        );
        let offset = target.len() - self.shape.len();
        for (i, &dim) in self.shape.iter().enumerate() {
            assert!(
                dim == 1 || dim == target[offset + i],
                "mask shape {:?} does not broadcast to {:?}",
                self.shape,
                target
            );
        }
    }
}

fn dim_from_right(shape: &[usize], k: usize) -> usize {
    if k < shape.len() {
        shape[shape.len() - 1 - k]
    } else {
        1
    }
}
