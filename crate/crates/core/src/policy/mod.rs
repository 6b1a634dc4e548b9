//! Miniature vision-language policy: description and observation encoders,
//! a temporal transformer with a prepended [ACT] token, and a Gaussian
//! mixture action head.

mod config;
mod mixture;
mod model;
pub(crate) mod params;

pub use config::{HeadMode, ObsEncoder, PolicyConfig};
pub use mixture::{ActionDistribution, MixtureTensors};
pub use model::{Bound, EncodedEpisode, LoraBound, Policy};
pub use params::{param_shapes, Param, PolicyParams};
