//! Influence-guided dynamic data sampling for training a dense retriever
//! over several training domains.
//!
//! A categorical sampling policy over domains is learned online: every few
//! steps, throwaway proxy copies of the model take a handful of steps on
//! each domain, the change in a dev-set metric becomes that domain's reward,
//! the policy logits move by REINFORCE, and the proxy endpoints are folded
//! back into the model with a weighted Reptile update.

pub mod baselines;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod influence;
pub mod meta;
pub mod numerics;
pub mod retriever;
pub mod sampler;
pub mod trajectory;

pub use error::{Error, Result};
