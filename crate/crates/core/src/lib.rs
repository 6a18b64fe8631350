//! Metric learning with an energy-confusion regularizer: a small MLP
//! embedding network, three classical embedding losses, the confusion
//! penalty, divergence checks, zero-shot evaluation and the experiment
//! drivers behind the `ecaml` command-line tool.

pub mod config;
pub mod confusion;
pub mod divergences;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod gradcheck;
pub mod losses;
pub mod net;
pub mod optim;
pub mod report;
pub mod sampling;
pub mod synth;
pub mod verify;

pub use config::RunConfigFile;
pub use confusion::{ClassGroup, EcConfig, PairMode};
pub use error::{EcamlError, Result};
pub use experiments::{train, RunHistory, TrainConfig};
pub use losses::{LossOutput, LossRegistry, LossSpec, MetricLoss};
pub use net::{MlpConfig, MlpParams};
pub use sampling::{BatchSpec, Dataset, Label, Split, SplitFilter};
pub use synth::SynthConfig;
