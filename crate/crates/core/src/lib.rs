//! Dense counterfactual contrastive pretraining for segmentation.

pub mod affine;
pub mod augment;
pub mod chromap;
pub mod contrastive;
pub mod dataset;
pub mod error;
pub mod image;
pub mod latent;
pub mod net;
pub mod phantom;
pub mod seg;
pub mod train;

pub use affine::{valid_intersection, AffineMap, ValidRegion};
pub use chromap::{ChroColor, Ellipse2D, Projector};
pub use contrastive::{LossConfig, Method, PixelBatch};
pub use dataset::{Dataset, DatasetConfig, Sample};
pub use error::{Error, Result};
pub use image::{ImageTensor, LabelMask};
pub use latent::ClusterAssignment;
pub use net::{ArchConfig, Checkpoint, EmbeddingField, ModelParams, Real};
pub use phantom::{PhantomSpec, ViewSet};
pub use seg::{SegHead, SegMetrics};
pub use train::TrainConfig;
