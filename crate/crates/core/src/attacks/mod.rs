//! Adversarial patches: the blend `x* = (1 - m) ⊙ x + m ⊙ P`, EOT transforms,
//! and the fixed-location (LaVAN-style) and random-location universal
//! (GoogleAp-style) trainers.

mod eot;
mod patch;
mod train;

pub use eot::{apply_transform, apply_transform_backward, sample_transform, EotParams, Transform};
pub use patch::{
    apply_patch, make_mask, patch_corner, MaskMatrix, PatchPixels, PatchSidecar, PatchSpec, Placement, TrainedPatch,
};
pub use train::{
    attack_success_rate, paste_at, patch_images, train_patch, train_patch_googleap, train_patch_lavan, AttackOutcome,
    PatchOptimizer, PatchTrainConfig,
};
