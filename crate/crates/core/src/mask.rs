use crate::error::{Error, Result};

/// Per-pixel class indices, row-major `height × width`. Index 0 is background.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct IndexMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl IndexMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::data(format!(
                "mask {height}x{width} needs {} indices, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(IndexMask {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        IndexMask {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        IndexMask {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: u8) {
        self.data[y * self.width + x] = value;
    }

    /// Fails with the first pixel whose index is `>= num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if let Some(i) = self.data.iter().position(|&v| v as usize >= num_classes) {
            return Err(Error::data(format!(
                "mask index {} at (row {}, col {}) is outside 0..{num_classes}",
                self.data[i],
                i / self.width,
                i % self.width
            )));
        }
        Ok(())
    }

    /// Pixel count per class index, for indices `< num_classes`.
    pub fn class_counts(&self, num_classes: usize) -> Vec<u64> {
        let mut counts = vec![0u64; num_classes];
        for &v in &self.data {
            if let Some(c) = counts.get_mut(v as usize) {
                *c += 1;
            }
        }
        counts
    }

    pub fn contains(&self, class: u8) -> bool {
        self.data.contains(&class)
    }

    pub fn is_all_background(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn map(&self, f: impl Fn(u8) -> u8) -> IndexMask {
        IndexMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}
