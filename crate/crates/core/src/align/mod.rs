//! Variable catalog, temporal alignment, level selection, splits and samples.

pub mod catalog;
pub mod interp;
pub mod samples;

pub use catalog::{select_preset, Channel, Family, Levels, Preset, VariableCatalog, VariableSpec};
pub use interp::{align_dataset, interpolate_hourly, select_levels, AlignOptions, AlignOrder};
pub use samples::{build_samples, split_by_years, AlignedSample, SampleRef, SampleSet, Split, SplitConfig, Splits, YearRange};
