//! Pretraining, bi-level meta-training and target adaptation.

mod adam;
mod checkpoint;
mod config;
mod train;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{InnerConfig, MetaConfig, PretrainConfig};
pub use train::{
    adapt_views, inner_update, meta_train, outer_gradient, outer_update, pretrain, test_adapt,
    EpisodeBatch, InnerResult, MetaLog, MetaState, OuterGradient, PretrainLog,
};
