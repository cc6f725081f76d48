//! Raster I/O and preprocessing: PGM (P5) files, label and image grids,
//! foreground z-scoring, and center cropping.

mod grid;
mod pgm;

pub use grid::{
    crop_to_roi_frame, zscore_foreground, CropInfo, ImageGrid, LabelGrid, Normalized, Region,
    ROI_FRAME,
};
pub use pgm::{read_pgm, write_atomic, write_pgm, Gray8};
