//! Localized graph-network forecasting of node-level signals on directed
//! graphs.
//!
//! Every node sees only its own lookback window and the edges around it, and
//! every weight is shared across nodes and edges. A model trained on one
//! graph therefore runs unchanged on any other graph with the same edge
//! attribute width.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod graph;
pub mod locale;
pub mod metrics;
pub mod model;
pub mod params;
pub mod seed;
pub mod series;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod train;

pub use checkpoint::Checkpoint;
pub use dataset::{Dataset, Protocol};
pub use error::{Error, ErrorKind, Result};
pub use eval::{EvalReport, Evaluation, Forecaster, Persistence, Trained};
pub use graph::{DirectedGraph, Edge, EdgeSpeeds};
pub use model::{count_parameters, Aggregation, GraphBatch, Model, ModelConfig, ModelVariant};
pub use params::{ParamId, ParameterStore};
pub use series::{Normalizer, SignalSeries};
pub use synthetic::DiffusionSpec;
pub use tensor::Tensor2;
pub use train::{AdamConfig, TrainConfig, TrainLog};
