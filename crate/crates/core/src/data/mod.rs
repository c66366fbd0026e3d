//! Feature ingestion, synthetic subjects, the spatial view and episode sampling.

mod electrode;
mod episode;
mod features;
mod grid;
mod io;
mod synth;

pub use electrode::{Electrode, ElectrodeMap, GRID_SIZE};
pub use episode::{loso_splits, sample_episode, Episode, LosoSplit, QuerySize};
pub use features::FeatureSet;
pub use grid::{
    resize_bilinear, resize_grid, spatial_project, spatial_unproject, Spatializer, RESIZED,
};
pub use io::{load_dataset, load_features, save_dataset, Dataset, Manifest, SubjectEntry};
pub use synth::{mean_intersubject_distance, subject_mean, synth_generate, SynthParams};
