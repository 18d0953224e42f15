//! Networks and their optimizers.

mod adam;
mod checkpoint;
mod fourier;
mod mlp;

pub use adam::{global_norm, polyak_update, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use fourier::{fourier_embed, FourierEmbed};
pub use mlp::{Activation, Layer, Mlp, MlpSpec, MlpVars};
