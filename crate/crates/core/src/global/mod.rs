//! Global branch: the image-to-feature autoencoder, self/cross attention over
//! patch features and the losses that tie the branch to the target features
//! and to the local branch.

mod attention;
mod autoencoder;

pub use attention::{cross_attention, self_attention, Attention, AttentionMap, AttentionWeights};
pub use autoencoder::{GlobalAeConfig, GlobalAutoencoder};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::distance::{patch_loss, LossConfig};
use crate::error::Result;

/// Which global objective drives the autoencoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalLoss {
    /// Cross-attention vs self-attention consistency.
    #[default]
    Attention,
    /// Plain distance between autoencoder output and target features.
    Direct,
}

/// Consistency between the cross-attention map `A_hat` and the self-attention
/// map `A`.
pub fn loss_pg(a_hat: &Tensor, a: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    patch_loss(a_hat, a, cfg.lambda_g, cfg.epsilon_norm)
}

/// Ablation: compare autoencoder patches with the target patches directly.
pub fn loss_pg_direct(z_hat: &Tensor, z: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    patch_loss(z_hat, z, cfg.lambda_g, cfg.epsilon_norm)
}

/// Coupling between the FRN's second head and the autoencoder output.
pub fn loss_lg(z_tilde_double_prime: &Tensor, z_hat: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    patch_loss(z_tilde_double_prime, z_hat, cfg.lambda_g, cfg.epsilon_norm)
}

/// `L_pg` for target patches `Z` and autoencoder patches `Z_hat`; `Z` is
/// treated as a constant.
pub fn attention_consistency(z: &Tensor, z_hat: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    let z = z.detach();
    let target = self_attention(&z)?;
    let cross = cross_attention(&z, z_hat)?;
    loss_pg(&cross.map.0, &target.map.0.detach(), cfg)
}
