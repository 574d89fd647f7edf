//! Long-format clinical events to fixed hourly grids, normalization, gap
//! (delta) matrices, fold splits and a synthetic data generator.

mod batch;
mod delta;
mod folds;
mod grid;
mod io;
mod normalize;
mod prepare;
mod synth;

pub use batch::TimeSeriesBatch;
pub use delta::compute_delta;
pub use folds::{kfold_split, FoldSplit};
pub use grid::{bin_hourly, RawGrid};
pub use io::{read_events, read_labels, write_events, write_labels, EventRecord};
pub use normalize::{normalize_apply, normalize_fit, NormStats};
pub use prepare::{prepare_fold, PreparedFold, GRID_KIND};
pub use synth::{synth_generate, SynthConfig, SynthData, SynthInfo};

/// Hours retained per record.
pub const STEPS: usize = 48;
