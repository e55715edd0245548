//! Toy gradient producers: the linear regression running example, its robust
//! weighting variant, and a small tanh MLP with JVP embeddings.

pub mod dual;
pub mod linear;
pub mod mlp;
pub mod robust;

pub use linear::{run_linear_example, LinearToy, LinearToyConfig, LossCurve, WeightVariant};
pub use mlp::{jvp_embed, jvp_embed_rows, per_sample_grads, ToyMlp, ToyModel};
pub use robust::{minimize_robust, robust_linear_objective, robust_linear_terms, RobustLinearTerms};
