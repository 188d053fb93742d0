//! Synthetic paired data, binary checkpoints and CSV reports.

mod checkpoint;
mod report;
mod synthetic;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ModelRecord, FORMAT_VERSION, MAGIC};
pub use report::{read_report, write_report, Report};
pub use synthetic::{gen_synthetic_pairs, heldout_seed, stack_batch, PairedSample, BACKGROUND, CLASS_COLORS};
