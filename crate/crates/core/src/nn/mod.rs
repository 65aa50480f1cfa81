//! Small fully-connected networks with the derivatives the trainer needs:
//! parameter gradients, input gradients, forward tangents and the parameter
//! gradient of a tangent (forward-over-reverse).

mod activation;
mod adam;
mod batch;
mod checkpoint;
mod mlp;

pub use activation::{Activation, ELU_ALPHA};
pub use adam::{adam_step, adam_step_in_place, AdamState};
pub use batch::BatchForward;
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_HEADER};
pub use mlp::{validate_specs, ForwardCache, LayerSpec, MlpParams, ParamGradient, TangentCache};
