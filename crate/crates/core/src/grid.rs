use serde::{Deserialize, Serialize};

/// Row-major 2-D array; `(x, y)` addresses column `x`, row `y`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Grid { height, width, data: vec![value; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), height * width, "grid data length");
        Grid { height, width, data }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Grid { height, width, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        let w = self.width;
        self.data[y * w + x] = v;
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn map<U: Clone>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid { height: self.height, width: self.width, data: self.data.iter().map(f).collect() }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

pub type Mask = Grid<bool>;

impl Grid<bool> {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn coverage(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.data.len() as f64
        }
    }

    pub fn and(&self, other: &Mask) -> Mask {
        assert_eq!(self.shape(), other.shape());
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a && b).collect(),
        }
    }

    /// Resamples to `height × width` by block majority (ties count as set).
    pub fn resample_majority(&self, height: usize, width: usize) -> Mask {
        let mut votes = vec![(0u32, 0u32); height * width];
        for y in 0..self.height {
            let gy = y * height / self.height;
            for x in 0..self.width {
                let gx = x * width / self.width;
                let v = &mut votes[gy * width + gx];
                v.1 += 1;
                if *self.get(x, y) {
                    v.0 += 1;
                }
            }
        }
        let data = if self.height >= height && self.width >= width {
            votes.iter().map(|&(s, n)| n > 0 && 2 * s >= n).collect()
        } else {
            // upsampling: nearest source cell
            (0..height * width)
                .map(|i| {
                    let (x, y) = (i % width, i / width);
                    *self.get(x * self.width / width, y * self.height / height)
                })
                .collect()
        };
        Grid { height, width, data }
    }
}
