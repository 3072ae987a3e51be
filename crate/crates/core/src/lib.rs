//! Mixture-of-Head (MoH) attention, desk scale.
//!
//! Multi-head attention in both its concatenation and summation forms, a
//! Top-K two-stage head router with shared heads, the load-balance
//! objective, a dense-to-MoH retrofit path (parameter-free router plus
//! straight-through quantizer), a head-masked sparse inference kernel with
//! an exact FLOP counter, and a synthetic-task training harness that
//! verifies everything by equivalence oracles and gradient checks.

pub mod analysis;
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod moh;
pub mod retrofit;
pub mod sparse;
pub mod task;
pub mod tensor;
pub mod train;

pub use attention::{multi_head_concat, multi_head_sum, scaled_dot_product_attention, MHAWeights};
pub use error::{MohError, Result};
pub use moh::{
    load_balance_loss, moh_forward, route_two_stage, total_loss, LoadBalanceStats, MoHConfig,
    RouterMode, RouterState, RoutingDecision,
};
pub use retrofit::{convert_dense_to_moh, parameter_free_route, RetrofitPlan};
pub use sparse::{benchmark_inference, build_head_mask, sparse_attention_forward, BenchReport, HeadMask};
pub use tensor::{finite_diff_check, Tape, Tensor};

#[cfg(test)]
pub(crate) fn test_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
