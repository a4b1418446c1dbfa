//! Downstream classification: `.ts` files, frozen features, linear probing,
//! fine-tuning and cross-dataset aggregation.
//!
//! Multichannel series are handled channel by channel: each channel is
//! resampled to 512 points and encoded on its own, and the per-channel CLS
//! vectors are concatenated in channel order.

mod adam;
pub mod embed;
pub mod features;
pub mod finetune;
pub mod probe;
pub mod report;
mod split;
pub mod synthetic;
pub mod ts;

pub use embed::{embed, encode_rows, resampled_rows, EMBED_LENGTH};
pub use features::{label_vocabulary, probe_tables, FeatureTable};
pub use finetune::{finetune, select_lr, FinetuneConfig, FinetuneResult, LrTrial};
pub use probe::{linear_probe, EpochSelection, LinearClassifier, ProbeConfig, ProbeResult};
pub use report::{
    aggregate, average_ranks, read_results_csv, write_results_csv, CellSummary, EvalReport,
    EvalRow, MethodSummary, PlotData, RegimeReport,
};
pub use split::stratified_split;
pub use synthetic::{frequency_task, FrequencyTaskConfig};
pub use ts::{parse_ts, parse_ts_file, serialize_ts, LabeledDataset, TsSample, TsSplit};
