pub mod chain;
pub mod cost_model;
pub mod epoch;
pub mod harness;
pub mod log_buffer;
pub mod mapping;
pub mod record_cache;
pub mod smo;
pub mod step;
pub mod tree;
pub mod workload;

pub use chain::{Key, Value};
pub use mapping::PageId;
pub use smo::{MergeOutcome, MergePlan, SmoError, SplitOutcome};
pub use step::Pace;
pub use tree::{ConfigError, Tree, TreeConfig, TreeError};
