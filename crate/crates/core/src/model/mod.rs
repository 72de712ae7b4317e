//! The desk-scale descriptor network and its training machinery: explicit
//! forward/backward passes, the Adam optimizer, learning-rate schedules and
//! the binary checkpoint format.

mod adam;
mod checkpoint;
mod net;
mod schedule;

pub use adam::AdamState;
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
pub use net::{forward_rows_embedded, Activation, DescriptorNet, ForwardCache, Gradients};
pub use schedule::LrSchedule;
