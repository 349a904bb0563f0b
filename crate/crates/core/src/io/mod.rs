//! On-disk formats: single tensors, weight checkpoints and run configs.

mod checkpoint;
mod config;
mod tensor_file;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use config::{diff_summary, ArchSection, ModelSpec, Paths, RunConfig};
pub use tensor_file::{decode_tensor, encode_tensor, load_tensor, load_tensor_as, save_tensor, MAGIC};
