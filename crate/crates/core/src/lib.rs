//! geofuse-core: dense per-pixel estimation of geospatial labels from an
//! overhead raster fused with sparsely located ground-level observations.
//!
//! The pieces, bottom to top:
//!
//! * [`tensor`] — dense row-major tensors and the differentiable primitives
//!   (conv, pooling, resize, batch norm, losses, ADAM) every model here is
//!   wired from, each with a hand-written vector-Jacobian product.
//! * [`kernel`] — Nadaraya-Watson kernel regression and kernel density
//!   estimation that turn sparse geotagged feature observations into dense,
//!   differentiable feature maps, under a uniform or per-pixel bandwidth.
//! * [`network`] — the backbone/fusion/hypercolumn architectures and their
//!   baseline ablations.
//! * [`synth`] — a deterministic synthetic-world generator producing tiles,
//!   labels, and oriented ground observations with a controllable split of
//!   information between the two modalities.
//! * [`train`] / [`eval`] — the mini-batch training loop, segmentation
//!   metrics, and the comparison experiments.
//! * [`io`] — bit-exact tensor files, dataset manifests, checkpoints, and
//!   PPM map rendering.

pub mod error;
pub mod eval;
pub mod io;
pub mod kernel;
pub mod network;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use kernel::{BandwidthField, GeoPoint, GroundFeatureMap, GroundObservation};
pub use network::{BackboneConfig, ModelParams, Variant};
pub use synth::{Scene, WorldSpec};
pub use tensor::{Parameter, Tensor};
pub use train::TrainConfig;
