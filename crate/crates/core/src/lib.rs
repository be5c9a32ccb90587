//! Case-aware adversarial training (CAT).
//!
//! A small CPU training engine built around one idea: instead of attacking
//! every training example each iteration, keep a running estimate of how
//! informative each example's adversarial version is and attack only a
//! class-balanced, weighted sample of them.
//!
//! The math is generic over [`Scalar`] (`f32` or `f64`); the aliases at the
//! crate root fix it to `f64`, which is what the tools and tests use.

pub mod attack;
pub mod data;
pub mod error;
pub mod nn;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use attack::{craft, project_linf, robust_accuracy, AttackConfig, StepVariant};
pub use data::{load_mnist_idx, make_blobs, split, SplitTag};
pub use error::{Error, Result};
pub use nn::{init_network, mlp_specs, small_cnn_specs, FeatureShape, LayerSpec, ParamId, ParamKind};
pub use sampler::{
    information_gain, plan_balanced_batch, sample_without_replacement, weights_to_probs, BalancedSampler,
    BatchPlan,
};
pub use scalar::Scalar;
pub use tensor::{elementwise, log_softmax, matmul, Elementwise};
pub use trainer::{
    mean_cosine_similarity, neighbor_cosine_similarity, train_cat, train_vanilla_at, MetricsRecord, Scheme,
    TrainConfig,
};

pub type Tensor = tensor::Tensor<f64>;
pub type Network = nn::Network<f64>;
pub type Gradients = nn::Gradients<f64>;
pub type LossReport = nn::LossReport<f64>;
pub type AttackResult = attack::AttackResult<f64>;
pub type WeightTable = sampler::WeightTable<f64>;
pub type Dataset = data::Dataset<f64>;
pub type Session<'a> = trainer::Session<'a, f64>;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Network32 = nn::Network<f32>;
pub type Dataset32 = data::Dataset<f32>;
pub type WeightTable32 = sampler::WeightTable<f32>;
