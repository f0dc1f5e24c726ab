//! Controller runtime for probabilistic inference over external stochastic
//! simulators: wire protocol, execution traces, inference engines, the
//! proposal network and its distributed training.

pub mod collective;
pub mod config;
pub mod distribution;
pub mod gateway;
pub mod inference;
pub mod models;
pub mod optim;
pub mod proposal;
pub mod rng;
pub mod sim;
pub mod store;
pub mod tensor;
pub mod trace;
pub mod train;
pub mod value;
pub mod wire;

pub use collective::{Collective, CollectiveError};
pub use distribution::{DistTag, Distribution, Proposal, TruncatedNormalMixture};
pub use gateway::{
    Endpoint, EndpointSpec, Execution, GatewayError, InProcessEndpoint, SamplingPolicy,
};
pub use inference::{InferenceError, MarkovChain, RmhConfig, WeightedTraceSet};
pub use optim::{Optimizer, OptimizerConfig, Schedule};
pub use proposal::{NetworkConfig, ProposalNetwork};
pub use sim::{Model, SimContext, SimError};
pub use store::{MinibatchPlan, TraceDataset};
pub use tensor::{Tape, Tensor};
pub use trace::{Address, EntryKind, Trace, TraceEntry};
pub use train::{TrainConfig, TrainError};
pub use value::{TensorValue, Value};
pub use wire::{WireMessage, PROTOCOL_VERSION};
