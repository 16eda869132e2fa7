//! Images, label masks, the synthetic phantom generator, resizing,
//! dataset splits and batching.

mod grid;
mod phantom;
mod resize;
pub mod split;

pub use grid::{Image, LabelMask, Sample};
pub use phantom::{generate_phantom, Intensities, Range, SynthConfig};
pub use resize::{resize_image, resize_mask};
pub use split::{batches, split, Batch, SplitSpec, Splits};
