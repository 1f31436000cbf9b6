//! Few-shot traffic anomaly detection.
//!
//! The crate covers the whole pipeline from packets to detections:
//!
//! - [`flow`]: packet ingestion (pcap, packet-csv) and bidirectional flow assembly.
//! - [`features`]: the 81 flow statistics and the canonical 33-feature projection.
//! - [`classifier`]: input scaling and a plain supervised backbone.
//! - [`selection`]: missing-proportion, entropy and cumulative-importance feature selection.
//! - [`autodiff`]: a small reverse-mode engine that can differentiate through its own
//!   gradients, plus the MLP backbone, LSTM cells, losses and optimizers.
//! - [`autoencoder`]: per-flow packet matrices and the LSTM autoencoder embeddings.
//! - [`meta`]: episodic Meta-SGD training and few-shot adaptation.
//! - [`eval`]: metrics and the evaluation protocols.
//! - [`synthetic`]: seeded synthetic traffic for tests and demos.
//! - [`model_io`]: the versioned JSON model files.

pub mod autodiff;
pub mod autoencoder;
pub mod classifier;
pub mod error;
pub mod eval;
pub mod features;
pub mod flow;
pub mod meta;
pub mod model_io;
pub mod rng;
pub mod selection;
pub mod synthetic;

pub use autodiff::{BackboneSpec, ParamSet, Tensor};
pub use autoencoder::{AutoencoderModel, AutoencoderSpec, CombinedFeatureVector, FlowMatrix, LatentVector};
pub use error::{Error, Result};
pub use eval::{Aggregate, FeatureSet, Metrics};
pub use features::{SelectedFeatureVector, StatFeatureVector};
pub use flow::{Flow, FlowKey, PacketRecord};
pub use meta::{EpisodeConfig, LabelSpace, MetaModel, MetaParams, Task};
