//! Dense cubic grids indexed `x + n * (y + n * z)`.

use std::ops::{Index, IndexMut};

#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrid<T> {
    n: usize,
    data: Vec<T>,
}

impl<T: Clone> DenseGrid<T> {
    pub fn filled(n: usize, value: T) -> Self {
        DenseGrid {
            n,
            data: vec![value; n * n * n],
        }
    }
}

impl<T> DenseGrid<T> {
    pub fn from_vec(n: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), n * n * n, "grid data does not match n^3");
        DenseGrid { n, data }
    }

    pub fn from_fn(n: usize, mut f: impl FnMut([usize; 3]) -> T) -> Self {
        let mut data = Vec::with_capacity(n * n * n);
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    data.push(f([x, y, z]));
                }
            }
        }
        DenseGrid { n, data }
    }

    /// Cells per axis.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn linear(&self, idx: [usize; 3]) -> usize {
        debug_assert!(idx.iter().all(|&i| i < self.n));
        idx[0] + self.n * (idx[1] + self.n * idx[2])
    }

    #[inline]
    pub fn unlinear(&self, i: usize) -> [usize; 3] {
        [i % self.n, (i / self.n) % self.n, i / (self.n * self.n)]
    }

    /// Value at a signed index, `None` outside the grid.
    #[inline]
    pub fn get(&self, idx: [i64; 3]) -> Option<&T> {
        let n = self.n as i64;
        if idx.iter().all(|&i| (0..n).contains(&i)) {
            Some(&self.data[self.linear([idx[0] as usize, idx[1] as usize, idx[2] as usize])])
        } else {
            None
        }
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> DenseGrid<U> {
        DenseGrid {
            n: self.n,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl<T> Index<[usize; 3]> for DenseGrid<T> {
    type Output = T;

    #[inline]
    fn index(&self, idx: [usize; 3]) -> &T {
        &self.data[self.linear(idx)]
    }
}

impl<T> IndexMut<[usize; 3]> for DenseGrid<T> {
    #[inline]
    fn index_mut(&mut self, idx: [usize; 3]) -> &mut T {
        let i = self.linear(idx);
        &mut self.data[i]
    }
}
