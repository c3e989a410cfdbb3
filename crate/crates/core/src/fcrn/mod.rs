//! Small fully convolutional residual networks with dilated convolutions
//! and hand-written reverse-mode gradients.

mod boxcode;
mod checkpoint;
mod config;
pub mod layers;
mod network;
mod params;

pub use boxcode::{decode_box, encode_box};
pub use checkpoint::{load_checkpoint, save_checkpoint, CONFIG_FILE};
pub use config::{
    compute_fov, fov_table, ConvSpec, FovRow, HeadKind, NetworkConfig, StageSchedule, StageSpec,
    Upsample, REPORTED_FOV,
};
pub use network::{Activations, Network};
pub use params::{Param, ParamStore};
