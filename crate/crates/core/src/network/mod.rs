//! Network assembly, inference and frame preprocessing.

mod model;
mod preprocess;
mod spec;

pub use model::{build_model, ForwardCache, Gradients, Layer, Model};
pub use preprocess::{load_frame, load_rgb, preprocess_frame, ResizePolicy, MIN_FRAME_EXTENT};
pub use spec::{ArchitectureSpec, BlockSpec, ConstrainedLayerSpec, LayerShape, SPEC_VERSION};
