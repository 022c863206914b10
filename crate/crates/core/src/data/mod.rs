//! Samples, on-disk datasets, palettes, synthetic data, and checkpoints.

mod checkpoint;
mod io;
mod palette;
mod synthetic;

pub use checkpoint::{checkpoint_bytes, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use io::{image_to_tensor, load_dataset, load_image, save_dataset, save_image, tensor_to_image};
pub use palette::{ClassPalette, PaletteEntry};
pub use synthetic::{generate_synthetic, SyntheticConfig, LONG_TAIL_COUNTS};

use crate::error::{Error, Result};
use crate::mask::IndexMask;
use crate::tensor::Tensor;

/// One image (`1 × 3 × H × W`, values in `[0, 1]`) with its class mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub id: String,
    pub image: Tensor,
    pub mask: IndexMask,
}

impl SegSample {
    pub fn new(id: impl Into<String>, image: Tensor, mask: IndexMask) -> Result<Self> {
        let s = image.shape();
        if s.n != 1 || s.c != 3 || s.h != mask.height() || s.w != mask.width() {
            return Err(Error::data(format!(
                "image {s} does not pair with a {}x{} mask",
                mask.height(),
                mask.width()
            )));
        }
        Ok(SegSample {
            id: id.into(),
            image,
            mask,
        })
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }
}

/// Stacks samples into one `(N, 3, H, W)` batch plus their masks.
pub fn make_batch(samples: &[&SegSample]) -> Result<(Tensor, Vec<IndexMask>)> {
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let x = Tensor::stack_batch(&images)?;
    Ok((x, samples.iter().map(|s| s.mask.clone()).collect()))
}

/// Per-class counts of images containing the class and of pixels.
pub fn class_histogram(samples: &[SegSample], num_classes: usize) -> (Vec<usize>, Vec<u64>) {
    let mut images = vec![0usize; num_classes];
    let mut pixels = vec![0u64; num_classes];
    for s in samples {
        for (c, n) in s.mask.class_counts(num_classes).into_iter().enumerate() {
            pixels[c] += n;
            if n > 0 {
                images[c] += 1;
            }
        }
    }
    (images, pixels)
}
