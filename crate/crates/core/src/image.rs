//! Image branch front end: a small strided CNN, the heatmap/offset decoder,
//! and image-branch token assembly.

use crate::attention::Linear;
use crate::error::{contract, Result};
use crate::keypoint::OFFSET_LIMIT;
use crate::mesh::TemplateMesh;
use crate::params::{Binder, Init, ParamStore};
use crate::tensor::{Tensor, Var};
use crate::tokens::{TokenRole, TokenSequence};

/// Stage outputs at strides 4, 8, 16, 32 and the pooled stride-32 vector.
#[derive(Debug, Clone, Copy)]
pub struct BackboneFeatures<'g> {
    pub s4: Var<'g>,
    pub s8: Var<'g>,
    pub s16: Var<'g>,
    pub s32: Var<'g>,
    /// Spatial mean of `s32`, shape `[C]`.
    pub global: Var<'g>,
}

/// A convolution's parameter names and geometry.
#[derive(Debug, Clone)]
pub struct Conv {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub transposed: bool,
}

impl Conv {
    fn new(name: String, c_in: usize, c_out: usize, kernel: usize, transposed: bool) -> Self {
        Self {
            name,
            c_in,
            c_out,
            kernel,
            transposed,
        }
    }

    fn weight_shape(&self) -> [usize; 4] {
        if self.transposed {
            [self.c_in, self.c_out, self.kernel, self.kernel]
        } else {
            [self.c_out, self.c_in, self.kernel, self.kernel]
        }
    }

    fn init(&self, store: &mut ParamStore, init: &mut Init) -> Result<()> {
        let fan_in = self.c_in * self.kernel * self.kernel;
        store.insert(
            format!("{}.weight", self.name),
            init.he(&self.weight_shape(), fan_in)?,
        );
        store.insert(format!("{}.bias", self.name), Tensor::zeros(&[self.c_out])?);
        Ok(())
    }

    fn forward<'g>(
        &self,
        b: &Binder<'g, '_>,
        x: Var<'g>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'g>> {
        let w = b.param(&format!("{}.weight", self.name))?;
        let bias = b.param(&format!("{}.bias", self.name))?;
        Ok(if self.transposed {
            x.conv_transpose2d(w, Some(bias), stride, padding)?
        } else {
            x.conv2d(w, Some(bias), stride, padding)?
        })
    }
}

/// Five stride-2 3×3 convolutions with ReLU.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub stages: Vec<Conv>,
}

impl Backbone {
    pub fn new(name: &str, channels: &[usize]) -> Self {
        let mut c_in = 3;
        let stages = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv::new(format!("{name}.{i}"), c_in, c, 3, false);
                c_in = c;
                conv
            })
            .collect();
        Self { stages }
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Init) -> Result<()> {
        self.stages.iter().try_for_each(|s| s.init(store, init))
    }

    /// `image`: `3 × H × W` with H and W multiples of 32.
    pub fn forward<'g>(&self, b: &Binder<'g, '_>, image: Var<'g>) -> Result<BackboneFeatures<'g>> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 || s[1] % 32 != 0 || s[2] % 32 != 0 {
            return Err(contract(format!(
                "backbone input must be 3×H×W with H, W multiples of 32, got {s:?}"
            )));
        }
        let mut x = image;
        let mut outs = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            x = stage.forward(b, x, 2, 1)?.relu()?;
            outs.push(x);
        }
        let s32 = outs[4];
        let c = s32.shape()[0];
        let hw = s32.shape()[1] * s32.shape()[2];
        let global = s32.reshape(&[c, hw])?.mean_axis(1)?;
        Ok(BackboneFeatures {
            s4: outs[1],
            s8: outs[2],
            s16: outs[3],
            s32,
            global,
        })
    }
}

/// Predicted maps as graph values: `heat: K×h×w`, `offsets: K×2×h×w`.
#[derive(Debug, Clone, Copy)]
pub struct HeatmapVars<'g> {
    pub heat: Var<'g>,
    pub offsets: Var<'g>,
}

impl HeatmapVars<'_> {
    pub fn to_set(&self) -> Result<crate::keypoint::HeatmapSet> {
        crate::keypoint::HeatmapSet::new(self.heat.tensor(), self.offsets.tensor())
    }
}

/// Three ×2 transposed convolutions from stride 32 to stride 4. The stride-16
/// and stride-8 backbone maps join by addition after 1×1 projection, once the
/// upsampled map reaches their resolution.
#[derive(Debug, Clone)]
pub struct KeypointDecoder {
    pub ups: Vec<Conv>,
    pub skip16: Conv,
    pub skip8: Conv,
    pub head: Conv,
    pub keypoints: usize,
}

impl KeypointDecoder {
    pub fn new(
        name: &str,
        backbone_channels: &[usize],
        decoder_channels: &[usize],
        keypoints: usize,
    ) -> Self {
        let mut c_in = backbone_channels[4];
        let ups = decoder_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv::new(format!("{name}.up.{i}"), c_in, c, 4, true);
                c_in = c;
                conv
            })
            .collect();
        Self {
            ups,
            skip16: Conv::new(
                format!("{name}.skip16"),
                backbone_channels[3],
                decoder_channels[0],
                1,
                false,
            ),
            skip8: Conv::new(
                format!("{name}.skip8"),
                backbone_channels[2],
                decoder_channels[1],
                1,
                false,
            ),
            head: Conv::new(
                format!("{name}.head"),
                decoder_channels[2],
                3 * keypoints,
                1,
                false,
            ),
            keypoints,
        }
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Init) -> Result<()> {
        for c in self
            .ups
            .iter()
            .chain([&self.skip16, &self.skip8, &self.head])
        {
            c.init(store, init)?;
        }
        // Start heatmaps near zero rather than at sigmoid(0).
        let bias = store.get_mut(&format!("{}.bias", self.head.name))?;
        bias.data_mut()[..self.keypoints]
            .iter_mut()
            .for_each(|v| *v = -3.0);
        Ok(())
    }

    pub fn forward<'g>(
        &self,
        b: &Binder<'g, '_>,
        feats: &BackboneFeatures<'g>,
    ) -> Result<HeatmapVars<'g>> {
        let mut x = self.ups[0].forward(b, feats.s32, 2, 1)?.relu()?;
        x = x.add(self.skip16.forward(b, feats.s16, 1, 0)?)?;
        x = self.ups[1].forward(b, x, 2, 1)?.relu()?;
        x = x.add(self.skip8.forward(b, feats.s8, 1, 0)?)?;
        x = self.ups[2].forward(b, x, 2, 1)?.relu()?;
        let out = self.head.forward(b, x, 1, 0)?;
        let (h, w) = (out.shape()[1], out.shape()[2]);
        let k = self.keypoints;
        let heat = out.slice(0, 0, k)?.sigmoid()?;
        let offsets = out
            .slice(0, k, 3 * k)?
            .tanh()?
            .scale(OFFSET_LIMIT)?
            .reshape(&[k, 2, h, w])?;
        Ok(HeatmapVars { heat, offsets })
    }
}

/// Builds `F_img`: template tokens `(xyz ⊕ global feature)` then one token per
/// stride-16 cell `(cell feature ⊕ normalized cell center)`, projected to
/// `d_model`.
#[derive(Debug, Clone)]
pub struct ImageTokenizer {
    pub template_proj: Linear,
    pub grid_proj: Linear,
}

impl ImageTokenizer {
    pub fn new(name: &str, global_dim: usize, grid_dim: usize, d_model: usize) -> Self {
        Self {
            template_proj: Linear::new(format!("{name}.template"), 3 + global_dim, d_model),
            grid_proj: Linear::new(format!("{name}.grid"), grid_dim + 2, d_model),
        }
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Init) -> Result<()> {
        self.template_proj.init(store, init)?;
        self.grid_proj.init(store, init)
    }

    pub fn forward<'g>(
        &self,
        b: &Binder<'g, '_>,
        feats: &BackboneFeatures<'g>,
        template: &TemplateMesh,
    ) -> Result<TokenSequence<'g>> {
        let gs = feats.s16.shape();
        let (c, gh, gw) = (gs[0], gs[1], gs[2]);
        let g_dim = feats.global.shape()[0];
        if c + 2 != self.grid_proj.d_in || g_dim + 3 != self.template_proj.d_in {
            return Err(contract("backbone widths do not match the image tokenizer"));
        }
        let n_template = template.coarse_count() + template.joint_count();
        let xyz = b.constant(Tensor::new(
            &[n_template, 3],
            [template.coarse.data(), template.joints.data()].concat(),
        )?)?;
        let global = feats
            .global
            .reshape(&[1, g_dim])?
            .broadcast_to(&[n_template, g_dim])?;
        let template_tokens = self
            .template_proj
            .forward(b, Var::concat(&[xyz, global], 1)?)?;

        let cells = feats.s16.reshape(&[c, gh * gw])?.t()?;
        let centers = b.constant(Tensor::from_fn(&[gh * gw, 2], |i| {
            let cell = i / 2;
            if i % 2 == 0 {
                2.0 * ((cell % gw) as f64 + 0.5) / gw as f64 - 1.0
            } else {
                2.0 * ((cell / gw) as f64 + 0.5) / gh as f64 - 1.0
            }
        })?)?;
        let grid_tokens = self
            .grid_proj
            .forward(b, Var::concat(&[cells, centers], 1)?)?;
        let mut roles = vec![TokenRole::Vertex; template.coarse_count()];
        roles.extend(vec![TokenRole::Joint; template.joint_count()]);
        roles.extend(vec![TokenRole::Grid; gh * gw]);
        TokenSequence::new(Var::concat(&[template_tokens, grid_tokens], 0)?, roles)
    }
}
