//! Desk-scale multi-agent RL laboratory: masked-agent latent reconstruction
//! with a contrastive objective, trained jointly with multi-agent PPO on
//! small cooperative environments.
//!
//! Layout mirrors the data flow: `tensor`/`graph` provide the differentiable
//! substrate, `nets` the parameterized blocks, `masking`/`recon`/`contrastive`
//! the auxiliary task, `ppo`/`envs`/`buffer` the RL loop, and `trainer` ties
//! them together behind `config`.

pub mod buffer;
pub mod config;
pub mod contrastive;
pub mod envs;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod masking;
pub mod nets;
pub mod optim;
pub mod params;
pub mod ppo;
pub mod probe;
pub mod recon;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{concat_last, grad_check, GradStore, Graph, Var};
pub use masking::{MaskStrategy, MaskVariant, MaskVector, TimestepSample};
pub use params::{Lease, ParamStore};
pub use tensor::Tensor;
