//! Small CNN engine: layers with hand-written backward passes, a DAG model
//! graph, AdamW training, the five reference architectures, and parameter
//! and MAC accounting.

mod arch;
mod complexity;
pub mod conv;
mod graph;
mod io;
mod layers;
mod train;

pub use arch::{build_architecture, ARCHITECTURES};
pub use complexity::{complexity, Complexity};
pub use conv::ConvSpec;
pub use graph::{bce, bce_logit, GraphBuilder, LayerSummary, ModelGraph, Node, NodeSpec, GRAPH_INPUT};
pub use io::{load_weights, manifest, manifest_path, model_base, save_weights, Manifest, WeightDtype};
pub use layers::{sigmoid, ActivationFn, Buffer, Layer, LayerSpec, Mode, Param, Shape3};
pub use train::{adamw_step, epochs_to_tensor, train, train_arrays, AdamState, AdamW, TrainConfig, TrainReport};
