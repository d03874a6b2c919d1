// SPDX-License-Identifier: MIT OR Apache-2.0

//! SALVE: sparse-autoencoder feature discovery, validation and weight-level
//! control for the final linear layer of a classifier.
//!
//! The pipeline works on exported penultimate activations and head weights
//! stored in `.salv` bundles:
//!
//! 1. [`sae::train_sae`] learns an overcomplete linear dictionary.
//! 2. [`features::class_conditional_means`] ranks latents per class.
//! 3. [`edits::apply_weight_edit`] scales head columns by a latent's decoder
//!    direction; [`eval::accuracy_sweep`] measures the effect.
//! 4. [`alphacrit`] predicts the suppression strength that flips a sample.

pub mod alphacrit;
pub mod bundle;
pub mod edits;
pub mod error;
pub mod eval;
pub mod features;
pub mod gradfam;
pub mod sae;
pub mod synth;
pub mod tensor;

pub use alphacrit::{
    alpha_crit, alpha_crit_analytical, alpha_crit_numerical, summarize_alpha_crit, AlphaCritSample,
    AlphaCritSummary, AlphaGrid, Estimate, Exclusion, Method,
};
pub use bundle::{read_bundle, validate_dataset, write_bundle, ActivationDataset, HeadWeights, Tensor, TensorBundle};
pub use edits::{apply_weight_edit, edited_logit, rome_update, Direction, EditPlan, RomeEdit};
pub use error::{Error, Result};
pub use eval::{accuracy_sweep, alpha_50, predict, seed_robustness_sweep, ConfusionMatrix, RobustnessResult, SweepCurve};
pub use features::{class_conditional_means, dominant_feature, ClassLatentProfile};
pub use gradfam::{gradfam_avgpool_analytic, gradfam_from_gradients, tv_loss, FeatureMapStack, Heatmap};
pub use sae::{train_sae, SaeParams, SaeTrainConfig, TrainTrace};
pub use synth::{generate_synthetic_dataset, train_linear_head, HeadTrainConfig, SynthConfig};
pub use tensor::{Matrix, RngState};
