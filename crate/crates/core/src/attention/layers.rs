//! Parameterized building blocks shared by the encoder and fusion modules.

use crate::error::{Error, Result};
use crate::params::{Binder, Init, ParamStore};
use crate::tensor::{Tensor, Var};

/// `y = x·W + b` with `W: d_in × d_out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, d_in: usize, d_out: usize) -> Self {
        Self {
            name: name.into(),
            d_in,
            d_out,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Init) -> Result<()> {
        store.insert(
            self.weight_name(),
            init.xavier(&[self.d_in, self.d_out], self.d_in, self.d_out)?,
        );
        store.insert(self.bias_name(), Tensor::zeros(&[self.d_out])?);
        Ok(())
    }

    /// Zero weights and bias (residual heads start at the identity).
    pub fn init_zero(&self, store: &mut ParamStore) -> Result<()> {
        store.insert(self.weight_name(), Tensor::zeros(&[self.d_in, self.d_out])?);
        store.insert(self.bias_name(), Tensor::zeros(&[self.d_out])?);
        Ok(())
    }

    pub fn forward<'g>(&self, b: &Binder<'g, '_>, x: Var<'g>) -> Result<Var<'g>> {
        let w = b.param(&self.weight_name())?;
        let bias = b.param(&self.bias_name())?;
        Ok(x.affine(w, bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize, eps: f64) -> Self {
        Self {
            name: name.into(),
            dim,
            eps,
        }
    }

    pub fn init(&self, store: &mut ParamStore) -> Result<()> {
        store.insert(format!("{}.gamma", self.name), Tensor::ones(&[self.dim])?);
        store.insert(format!("{}.beta", self.name), Tensor::zeros(&[self.dim])?);
        Ok(())
    }

    pub fn forward<'g>(&self, b: &Binder<'g, '_>, x: Var<'g>) -> Result<Var<'g>> {
        let gamma = b.param(&format!("{}.gamma", self.name))?;
        let beta = b.param(&format!("{}.beta", self.name))?;
        Ok(x.layer_norm(gamma, beta, self.eps)?)
    }
}

/// affine → gelu → affine.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(name: &str, d_in: usize, hidden: usize, d_out: usize) -> Self {
        Self {
            fc1: Linear::new(format!("{name}.fc1"), d_in, hidden),
            fc2: Linear::new(format!("{name}.fc2"), hidden, d_out),
        }
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Init) -> Result<()> {
        self.fc1.init(store, init)?;
        self.fc2.init(store, init)
    }

    pub fn forward<'g>(&self, b: &Binder<'g, '_>, x: Var<'g>) -> Result<Var<'g>> {
        let h = self.fc1.forward(b, x)?.gelu()?;
        self.fc2.forward(b, h)
    }
}

/// Per-head scaled dot-product attention over already-projected inputs.
///
/// `q: Tq × d`, `k, v: Tk × d`; head `h` uses columns `h·d_head..(h+1)·d_head`
/// and scores are divided by `√d_head`. Returns the concatenated head outputs
/// (`Tq × d`) and the head-averaged attention matrix (`Tq × Tk`).
pub fn multi_head<'g>(
    q: Var<'g>,
    k: Var<'g>,
    v: Var<'g>,
    heads: usize,
) -> Result<(Var<'g>, Tensor)> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 2
        || ks.len() != 2
        || qs[1] != ks[1]
        || ks != vs
        || heads == 0
        || qs[1] % heads != 0
    {
        return Err(Error::Contract(format!(
            "attention operands q {qs:?}, k {ks:?}, v {vs:?} with {heads} heads"
        )));
    }
    let d_head = qs[1] / heads;
    let scale = 1.0 / (d_head as f64).sqrt();
    let (tq, tk) = (qs[0], ks[0]);
    let mut outs = Vec::with_capacity(heads);
    let mut avg = vec![0.0; tq * tk];
    for h in 0..heads {
        let (lo, hi) = (h * d_head, (h + 1) * d_head);
        let qh = q.slice(1, lo, hi)?;
        let kh = k.slice(1, lo, hi)?;
        let vh = v.slice(1, lo, hi)?;
        let weights = qh.matmul(kh.t()?)?.scale(scale)?.softmax(1)?;
        weights.with_value(|w| avg.iter_mut().zip(w.data()).for_each(|(a, x)| *a += x));
        outs.push(weights.matmul(vh)?);
    }
    avg.iter_mut().for_each(|a| *a /= heads as f64);
    let out = if heads == 1 {
        outs[0]
    } else {
        Var::concat(&outs, 1)?
    };
    Ok((out, Tensor::new(&[tq, tk], avg)?))
}

/// Q/K/V projections of one modality.
#[derive(Debug, Clone)]
pub struct QkvProjection {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

impl QkvProjection {
    pub fn new(name: &str, d_model: usize) -> Self {
        Self {
            q: Linear::new(format!("{name}.q"), d_model, d_model),
            k: Linear::new(format!("{name}.k"), d_model, d_model),
            v: Linear::new(format!("{name}.v"), d_model, d_model),
        }
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Init) -> Result<()> {
        self.q.init(store, init)?;
        self.k.init(store, init)?;
        self.v.init(store, init)
    }

    /// Names of every tensor in the three projections.
    pub fn param_names(&self) -> Vec<String> {
        [&self.q, &self.k, &self.v]
            .iter()
            .flat_map(|l| [l.weight_name(), l.bias_name()])
            .collect()
    }
}
