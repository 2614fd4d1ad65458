//! Basic 2D grid types used throughout the pipeline.

use ndarray::Array2;

use crate::error::{Error, Result};

/// A 2D grid of real intensities or probabilities, row-major (H, W).
pub type Grid = Array2<f64>;

/// A 2D binary mask; values are exactly 0 or 1.
pub type Mask = Array2<u8>;

/// Checks two grids have identical shape.
pub fn check_same_shape<A, B>(what: &str, a: &Array2<A>, b: &Array2<B>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Checks a mask holds only 0/1 values.
pub fn check_binary(what: &str, mask: &Mask) -> Result<()> {
    if mask.iter().any(|&v| v > 1) {
        return Err(Error::Domain(format!("{what}: mask contains values > 1")));
    }
    Ok(())
}

/// Number of foreground pixels in a mask.
pub fn foreground_count(mask: &Mask) -> usize {
    mask.iter().filter(|&&v| v == 1).count()
}

/// Converts a mask to a float grid of 0.0/1.0 values.
pub fn mask_to_grid(mask: &Mask) -> Grid {
    mask.mapv(|v| v as f64)
}
