//! Self-attention encoder layers, cross-modal attention with the modality
//! switch, and the stacked fusion blocks.

mod block;
mod cross;
mod encoder;
mod layers;

pub use block::{
    AttentionKind, AttentionRecord, BlockOutput, FusionStage, StackShape, XFormerBlock,
    XFormerStack,
};
pub use cross::{CrossModalAttention, CrossModalOutput, PooledFusion};
pub use encoder::EncoderLayer;
pub use layers::{multi_head, LayerNorm, Linear, Mlp, QkvProjection};

use std::io::Write;

use crate::error::{contract, Result};
use crate::tensor::Tensor;
use crate::tokens::TokenRole;

/// Writes an attention matrix as CSV: a header of key-token labels, then one
/// row per query token led by its label. Labels are `role:index`.
pub fn write_attention_csv(
    out: &mut impl Write,
    weights: &Tensor,
    query_roles: &[TokenRole],
    key_roles: &[TokenRole],
) -> Result<()> {
    if weights.shape() != [query_roles.len(), key_roles.len()] {
        return Err(contract(format!(
            "attention {:?} does not match {} queries × {} keys",
            weights.shape(),
            query_roles.len(),
            key_roles.len()
        )));
    }
    let label = |roles: &[TokenRole], i: usize| format!("{}:{i}", roles[i]);
    let header: Vec<String> = (0..key_roles.len()).map(|j| label(key_roles, j)).collect();
    writeln!(out, "query,{}", header.join(","))?;
    for i in 0..query_roles.len() {
        let cells: Vec<String> = weights.row(i).iter().map(|w| format!("{w:e}")).collect();
        writeln!(out, "{},{}", label(query_roles, i), cells.join(","))?;
    }
    Ok(())
}
