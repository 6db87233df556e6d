//! Tuning-free text-guided image editing by mixing DDIM-inversion latents and
//! attention maps into the generation process under decaying schedules.
//!
//! The editing loop lives in [`pipeline`]; [`schedule`], [`lams`] and
//! [`p2p`] hold the numerics it composes, and [`backend`] abstracts the
//! diffusion model (with a deterministic toy implementation for tests).

pub mod backend;
pub mod eval;
pub mod imageio;
pub mod inversion;
pub mod lams;
pub mod masking;
pub mod p2p;
pub mod pipeline;
pub mod schedule;
pub mod tensor;
pub mod trajectory;
