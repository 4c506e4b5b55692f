//! Sparse mixtures of generalized linear experts.
//!
//! Fits ℓ1-regularized mixture-of-experts models with a softmax gating
//! network and Gaussian, Poisson or multinomial-logistic experts. The
//! algorithm is an EM whose M-step uses proximal-Newton updates. Also
//! provides modified-BIC model selection, clustering and sparsity metrics,
//! and a simulation generator.

pub mod em;
pub mod error;
pub mod experts;
pub mod gating;
pub mod io;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod prox;
pub mod selection;
pub mod simgen;

pub use em::{canonicalize_labels, fit_em, FitConfig, FitResult, InitStrategy};
pub use error::{MoeError, Result};
pub use gating::GatingVariant;
pub use model::{Dataset, ExpertParams, Family, GatingParams, LinearCoef, MoEParameters, PenaltyConfig, Response};
pub use selection::{select_model, GridSpec, Selection};
pub use simgen::{preset_design, SimDesign};
