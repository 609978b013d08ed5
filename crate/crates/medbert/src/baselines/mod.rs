//! Baseline predictors (GRU, Bi-GRU, RETAIN), the skip-gram embedding
//! trainer, and input composition from the three embedding sources.

pub mod compose;
pub mod gru;
pub mod retain;
pub mod skipgram;

pub use compose::{visit_groups, Composer, InputMode, BASE_EMBED};
pub use gru::{add_gru_params, gru_cell, gru_forward, gru_states_reverse_time, GruDims};
pub use retain::{add_retain_params, retain_forward};
pub use skipgram::{skipgram_pair_loss, train_skipgram, SkipGramConfig, SkipGramParams};
