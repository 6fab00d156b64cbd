//! Token sequences: a feature matrix plus a role label per row.

use std::fmt;

use crate::error::{contract, Result};
use crate::tensor::Var;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenRole {
    Vertex,
    Joint,
    Keypoint,
    Grid,
    Global,
}

impl fmt::Display for TokenRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Vertex => "vertex",
            Self::Joint => "joint",
            Self::Keypoint => "keypoint",
            Self::Grid => "grid",
            Self::Global => "global",
        })
    }
}

/// `T × D` features with one role per token.
#[derive(Debug, Clone)]
pub struct TokenSequence<'g> {
    pub features: Var<'g>,
    pub roles: Vec<TokenRole>,
}

impl<'g> TokenSequence<'g> {
    pub fn new(features: Var<'g>, roles: Vec<TokenRole>) -> Result<Self> {
        let shape = features.shape();
        if shape.len() != 2 || shape[0] != roles.len() {
            return Err(contract(format!(
                "token features {shape:?} do not match {} role labels",
                roles.len()
            )));
        }
        Ok(Self { features, roles })
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    /// Same roles, new features (e.g. after an encoder layer).
    pub fn with_features(&self, features: Var<'g>) -> Result<Self> {
        Self::new(features, self.roles.clone())
    }

    /// Index range of the contiguous run of `role`, if any.
    pub fn role_range(&self, role: TokenRole) -> Option<std::ops::Range<usize>> {
        let start = self.roles.iter().position(|r| *r == role)?;
        let len = self.roles[start..]
            .iter()
            .take_while(|r| **r == role)
            .count();
        Some(start..start + len)
    }

    /// Features of the contiguous `role` tokens.
    pub fn role_features(&self, role: TokenRole) -> Result<Var<'g>> {
        let r = self
            .role_range(role)
            .ok_or_else(|| contract(format!("token sequence has no {role} tokens")))?;
        Ok(self.features.rows(r.start, r.end)?)
    }
}
