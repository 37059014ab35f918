//! Sparse component attribution for CLIP-style image embeddings.
//!
//! Class-token embeddings are decomposed by a top-k sparse autoencoder
//! ([`sae`]), pushed through the model's fixed prediction head ([`head`]),
//! and each component's contribution to an image-text cosine score is
//! attributed analytically ([`attribution`]). The remaining modules label
//! components ([`semantics`]), flag unexpected reliance ([`anomaly`]),
//! measure faithfulness and robustness ([`evalsuite`]) and train linear
//! probes with latent augmentation ([`probe`]).

pub mod anomaly;
pub mod attribution;
pub mod dump;
pub mod error;
pub mod evalsuite;
pub mod head;
pub mod linalg;
pub mod probe;
pub mod sae;
pub mod semantics;
pub mod store;

pub use error::{Error, Result};
