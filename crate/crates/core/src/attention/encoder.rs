//! Post-norm transformer encoder layer.

use super::layers::{multi_head, LayerNorm, Linear, Mlp, QkvProjection};
use crate::error::Result;
use crate::params::{Binder, Init, ParamStore};
use crate::tensor::{Tensor, Var};

/// `x₁ = LN(x + MHA(x))`, `y = LN(x₁ + FF(x₁))` with a `2·d` gelu hidden layer.
/// No positional encoding: the layer is permutation-equivariant over tokens.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub heads: usize,
    pub qkv: QkvProjection,
    pub out: Linear,
    pub ln_attn: LayerNorm,
    pub ff: Mlp,
    pub ln_ff: LayerNorm,
}

impl EncoderLayer {
    pub fn new(name: &str, d_model: usize, heads: usize, eps: f64) -> Self {
        Self {
            heads,
            qkv: QkvProjection::new(&format!("{name}.attn"), d_model),
            out: Linear::new(format!("{name}.attn.out"), d_model, d_model),
            ln_attn: LayerNorm::new(format!("{name}.ln_attn"), d_model, eps),
            ff: Mlp::new(&format!("{name}.ff"), d_model, 2 * d_model, d_model),
            ln_ff: LayerNorm::new(format!("{name}.ln_ff"), d_model, eps),
        }
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Init) -> Result<()> {
        self.qkv.init(store, init)?;
        self.out.init(store, init)?;
        self.ln_attn.init(store)?;
        self.ff.init(store, init)?;
        self.ln_ff.init(store)
    }

    /// Returns the new tokens and the head-averaged self-attention matrix.
    pub fn forward<'g>(&self, b: &Binder<'g, '_>, x: Var<'g>) -> Result<(Var<'g>, Tensor)> {
        let q = self.qkv.q.forward(b, x)?;
        let k = self.qkv.k.forward(b, x)?;
        let v = self.qkv.v.forward(b, x)?;
        let (heads, weights) = multi_head(q, k, v, self.heads)?;
        let attn = self.out.forward(b, heads)?;
        let x1 = self.ln_attn.forward(b, x.add(attn)?)?;
        let ff = self.ff.forward(b, x1)?;
        Ok((self.ln_ff.forward(b, x1.add(ff)?)?, weights))
    }
}
