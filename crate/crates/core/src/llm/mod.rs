//! LLM-prompted speed prediction: prompt templates, chat backends, reply
//! parsing, the post-processing safety filter, the predictor itself and the
//! fine-tuning dataset exporter.

pub mod backend;
pub mod filter;
pub mod finetune;
pub mod parse;
pub mod predictor;
pub mod prompt;

pub use backend::{BackendConfig, BackendError, BackendKind, ChatBackend, ChatMessage, MockBackend, Role};
pub use filter::{safety_filter, SafetyLimits};
pub use finetune::export_finetune_dataset;
pub use parse::{parse_response, ParseMethod};
pub use predictor::{GenFollower, GenFollowerConfig, PredictionOutcome, ReplyCache};
pub use prompt::{build_system_message, build_user_message, TaskConfig};
