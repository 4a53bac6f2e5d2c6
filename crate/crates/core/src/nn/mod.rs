//! Differentiable numeric building blocks.

mod gradcheck;
mod layers;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_grad_check, GradCheckOptions, GradCheckReport};
pub use layers::{
    attend, feed_forward, feed_forward_on, multi_head_attention, AttentionParams, AttentionVars, AttentionWeights,
    FeedForwardParams, FeedForwardVars, FeedForwardWeights,
};
pub use optim::Adam;
pub use params::{ParamEntry, ParamId, ParamStore};
pub use tape::{Mask, Tape, Var};
pub use tensor::{cosine_similarity, dot, euclidean_distance, Tensor2};

