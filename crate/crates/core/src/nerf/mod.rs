//! Compact radiance field: encoding, coarse and fine MLPs, volume
//! rendering and training.

pub mod encoding;
pub mod field;
pub mod render;
pub mod train;

pub use encoding::{positional_encode, EncodingConfig};
pub use field::{FieldConfig, Net, RadianceField};
pub use render::{render_rays, render_view, Field, RenderOutput, SamplingConfig};
pub use train::{train_nerf, NerfLogPoint, NerfOutcome, NerfTrainConfig};
