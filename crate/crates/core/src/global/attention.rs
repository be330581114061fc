use candle_core::{DType, Tensor};

use crate::error::{shape_err, Result};
use crate::nn::stable_softmax;

/// Column-stochastic `k* x k*` weights; `W[p, q]` is how much patch `p`
/// contributes to output column `q`.
#[derive(Debug, Clone)]
pub struct AttentionWeights(pub Tensor);

/// `c* x k*` attention map `A = Z W`.
#[derive(Debug, Clone)]
pub struct AttentionMap(pub Tensor);

impl AttentionWeights {
    /// Sums over `p` for each column `q`, as `(.., k)`.
    pub fn column_sums(&self) -> Result<Vec<f64>> {
        let r = self.0.rank();
        Ok(self
            .0
            .sum(r - 2)?
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?)
    }
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub weights: AttentionWeights,
    pub map: AttentionMap,
}

fn attend(keys: &Tensor, queries: &Tensor) -> Result<Attention> {
    if keys.dims() != queries.dims() || keys.rank() < 2 {
        return Err(shape_err!(
            "attention operands must share a (.., c, k) shape: {:?} vs {:?}",
            keys.dims(),
            queries.dims()
        ));
    }
    let r = keys.rank();
    let c = keys.dim(r - 2)?;
    // logits[p, q] = z_p . q_q / sqrt(c)
    let logits = (keys
        .transpose(r - 2, r - 1)?
        .contiguous()?
        .matmul(&queries.contiguous()?)?
        / (c as f64).sqrt())?;
    let w = stable_softmax(&logits, r - 2)?;
    let a = keys.contiguous()?.matmul(&w)?;
    Ok(Attention {
        weights: AttentionWeights(w),
        map: AttentionMap(a),
    })
}

/// Self-attention over the patch columns of `Z`.
pub fn self_attention(z: &Tensor) -> Result<Attention> {
    attend(z, z)
}

/// Cross-attention with queries from `Z_hat` and keys/values from `Z`.
pub fn cross_attention(z: &Tensor, z_hat: &Tensor) -> Result<Attention> {
    attend(z, z_hat)
}
