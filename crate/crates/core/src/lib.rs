//! Compositional variational autoencoder over multisets of labelled parts.
//!
//! A whole `x` is generated from part labels `l_1..l_K` through per-part
//! latents `w_i ~ p(w | l_i)`, their sum `w~`, a global latent `z ~ p(z | w~)`
//! and a decoder `p(x | z, w~)`. Parts can be added or removed at generation
//! time because `w~` is an order-invariant sum.

pub mod cli;
pub mod compose;
pub mod config;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod latentcorr;
pub mod nets;
pub mod noise;
pub mod synthgen;
pub mod tensorio;
pub mod trainer;

pub use error::{Error, Result};
