//! Loop-closure detection over a submap atlas.
//!
//! Frames carry RGB images and keypoint descriptors. A small residual
//! network fuses a global keypoint descriptor with an image embedding and is
//! trained to recognise submaps; retrieval then runs over an embedding index
//! of every atlas frame.

pub mod atlas;
pub mod error;
pub mod eval;
pub mod features;
pub mod net;
pub mod par;
pub mod query;
pub mod raster;
pub mod train;

pub use atlas::{create_atlas, load_atlas, save_atlas, AtlasConfig, Frame, ImageRef, MapAtlas, Pose, Submap};
pub use error::{Error, Result};
pub use features::{Keypoint, KeypointSet};
pub use net::{Network, NetworkConfig};
pub use par::Exec;
pub use query::{build_index, detect_loop, query_top_k, EmbeddingIndex, LoopDetection, LoopDetector, Ranked};
pub use raster::{ImageTensor, Raster};
pub use train::{Hyperparams, Trainer};
