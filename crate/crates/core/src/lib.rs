//! Dialog workflow extraction and evaluation.
//!
//! The crate mines structured dialog workflows from historical customer-agent
//! conversations and scores them by simulating customer and agent bots against
//! every sub-flow of a ground-truth workflow. All model traffic goes through
//! [`gateway::Gateway`], which can record responses to a content-addressed
//! fixture directory and replay them offline, so every pipeline run is
//! deterministic.
//!
//! Pipeline overview:
//!
//! 1. [`elements`] extracts intent, slot values and resolution steps per conversation.
//! 2. [`retrieval`] picks the K conversations per intent (Proc-Sim, Conv-Sim, Proc-Div, Random).
//! 3. [`extraction`] generates a numbered workflow under one of six prompting strategies.
//! 4. [`subflow`] and [`e2e`] decompose the ground truth, simulate dialogs and aggregate accuracy.
//! 5. [`alt_eval`] and [`synth`] provide the alternative evaluators, compliance scoring and
//!    synthetic corpus generation.
//!
//! [`experiment`] wires the stages together from a TOML configuration.

pub mod alt_eval;
pub mod corpus;
pub mod e2e;
pub mod elements;
pub mod experiment;
pub mod extraction;
pub mod gateway;
pub mod prompts;
pub mod retrieval;
pub mod rng;
pub mod subflow;
pub mod synth;
pub mod text;

pub use corpus::{Conversation, Corpus, Speaker, Utterance};
pub use gateway::{ChatModel, EmbeddingModel, Gateway, GatewayError, GatewayMode};
