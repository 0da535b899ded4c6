//! Diagnostics over noises, latents, images, and trajectories.

pub mod assignment;
pub mod bitrate;
pub mod correlation;
pub mod distribution;
pub mod error_profile;
pub mod geometry;
pub mod mask;
pub mod stats;

pub use assignment::{nearest_targets, nn_assignment_accuracy};
pub use bitrate::{masked_bitrate, masked_bitrate_with, QuantRange, DEFAULT_QUANT_RANGE};
pub use correlation::{patch_corr_top20, patch_corr_top20_batch, patch_corr_topk, pearson};
pub use distribution::{kl_to_std_normal, kl_to_std_normal_with, KlHistogram};
pub use error_profile::{inversion_error_profile, mean_profile, ErrorProfile};
pub use geometry::{
    most_probable_triangle, path_distance_map, slerp, triangle_angles, DistanceMap, TriangleAngles,
};
pub use mask::{plain_mask, Mask, DEFAULT_PLAIN_TAU};
pub use stats::{masked_stats, mean, paired_sign_test, population_std, MaskedStats, SignTest};
