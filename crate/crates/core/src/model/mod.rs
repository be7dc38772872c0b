//! A small seed-deterministic U-Net noise predictor expressed as a flat layer
//! graph, so the patch runtime can execute it one layer at a time.

mod graph;

pub use graph::{LayerDescriptor, LayerKind};

/// The layer whose *input* a context layer gathers and caches. A conv fed
/// by a nearest-neighbour upsample gathers the low-resolution map instead:
/// upsampling commutes with scattering rows, so the result is identical at
/// a quarter of the bytes.
pub fn context_source(graph: &[LayerDescriptor], id: usize) -> usize {
    let d = &graph[id];
    if d.kind == LayerKind::Conv && id > 0 && graph[id - 1].kind == LayerKind::Upsample {
        id - 1
    } else {
        id
    }
}

use crate::error::{config_err, shape_err, Result};
use crate::rng::SplitMix64;
use crate::tensor::{
    self, add, add_channel_bias, attention, conv2d, conv2d_region, group_norm_apply, group_stats,
    silu, upsample_nearest2x, GnStats, Region, Tensor, Tokens,
};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Latent channels of the image being denoised.
    pub in_channels: usize,
    pub base_channels: usize,
    /// Resolution levels; level `l` runs at 1/2^l of the input size.
    pub levels: usize,
    pub groups: usize,
    pub cond_dim: usize,
    /// Level hosting self- and cross-attention; `None` means the deepest.
    pub attn_at_level: Option<usize>,
    pub gn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            base_channels: 16,
            levels: 3,
            groups: 4,
            cond_dim: 8,
            attn_at_level: None,
            gn_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 || self.cond_dim == 0 {
            return Err(config_err!("channel counts and cond_dim must be positive"));
        }
        if self.levels == 0 {
            return Err(config_err!("at least one resolution level is required"));
        }
        if self.groups == 0 || self.base_channels % self.groups != 0 {
            return Err(config_err!(
                "base_channels {} not divisible by groups {}",
                self.base_channels,
                self.groups
            ));
        }
        if let Some(l) = self.attn_at_level {
            if l >= self.levels {
                return Err(config_err!("attention level {l} out of range for {} levels", self.levels));
            }
        }
        if !(self.gn_eps > 0.0) {
            return Err(config_err!("gn_eps must be positive"));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn time_dim(&self) -> usize {
        2 * self.base_channels
    }

    pub fn attention_level(&self) -> usize {
        self.attn_at_level.unwrap_or(self.levels - 1)
    }

    /// Spatial divisor every image side must be a multiple of.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn check_image(&self, h: usize, w: usize) -> Result<()> {
        let m = self.spatial_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(config_err!(
                "image {h}x{w} is not divisible by {m} (2^(levels-1) with levels={})",
                self.levels
            ));
        }
        Ok(())
    }
}

/// The condition vector standing in for a text embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Condition(pub Vec<f32>);

impl Condition {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    /// Uniform in [-1, 1) from a seed.
    pub fn from_seed(dim: usize, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        Self((0..dim).map(|_| rng.next_symmetric(1.0) as f32).collect())
    }
}

/// Sinusoidal embedding: `sin(t / 10000^(2i/dim))` for the first half,
/// the matching cosines for the second.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = vec![0f32; dim];
    for i in 0..half {
        let freq = 10000f64.powf(-(2.0 * i as f64) / dim as f64);
        let arg = t as f64 * freq;
        out[i] = arg.sin() as f32;
        out[half + i] = arg.cos() as f32;
    }
    out
}

#[derive(Clone, Debug)]
pub struct CondTokens {
    pub keys: Tokens,
    pub values: Tokens,
}

/// Per-step inputs shared by every device: the time-embedding projection of
/// each `AddTimeEmb` layer and the condition keys/values of each `CrossAttn`.
/// These are replicated, not spatial, so they are computed once per step.
#[derive(Clone, Debug)]
pub struct StepContext {
    pub t: usize,
    time: Vec<Option<Vec<f32>>>,
    cond: Vec<Option<CondTokens>>,
}

impl StepContext {
    pub fn time_bias(&self, layer: usize) -> Result<&[f32]> {
        self.time
            .get(layer)
            .and_then(|v| v.as_deref())
            .ok_or_else(|| shape_err!("no time embedding for layer {layer}"))
    }

    pub fn cond_tokens(&self, layer: usize) -> Result<&CondTokens> {
        self.cond
            .get(layer)
            .and_then(|v| v.as_ref())
            .ok_or_else(|| shape_err!("no condition tokens for layer {layer}"))
    }
}

/// Immutable model weights plus the layer graph.
#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    layers: Vec<LayerDescriptor>,
}

impl Model {
    pub fn build(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut layers = graph::build_layers(&cfg);
        graph::init_params(&cfg, &mut layers, seed);
        Ok(Self { cfg, layers })
    }

    /// Assemble a model from explicit layers (weight loading, test fixtures).
    pub fn from_layers(cfg: ModelConfig, layers: Vec<LayerDescriptor>) -> Result<Self> {
        cfg.validate()?;
        let reference = graph::build_layers(&cfg);
        if reference.len() != layers.len() {
            return Err(shape_err!(
                "{} layers supplied, configuration defines {}",
                layers.len(),
                reference.len()
            ));
        }
        let mut probe = reference.clone();
        graph::init_params(&cfg, &mut probe, 0);
        for (want, got) in probe.iter().zip(&layers) {
            if want.kind != got.kind || want.params.len() != got.params.len() {
                return Err(shape_err!("layer {} does not match the configured graph", got.id));
            }
            for (a, b) in want.params.iter().zip(&got.params) {
                if a.dims() != b.dims() {
                    return Err(shape_err!(
                        "layer {} param dims {:?}, expected {:?}",
                        got.id,
                        b.dims(),
                        a.dims()
                    ));
                }
            }
        }
        Ok(Self { cfg, layers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layer_graph(&self) -> &[LayerDescriptor] {
        &self.layers
    }

    pub fn layer(&self, id: usize) -> &LayerDescriptor {
        &self.layers[id]
    }

    pub fn step_context(&self, t: usize, cond: &Condition) -> Result<StepContext> {
        if cond.0.len() != self.cfg.cond_dim {
            return Err(shape_err!(
                "condition of length {} for cond_dim {}",
                cond.0.len(),
                self.cfg.cond_dim
            ));
        }
        let temb = timestep_embedding(t, self.cfg.time_dim());
        let temb_tokens = Tokens::new(1, temb.len(), temb)?;
        let mut time = vec![None; self.layers.len()];
        let mut conds = vec![None; self.layers.len()];
        for d in &self.layers {
            match d.kind {
                LayerKind::AddTimeEmb => {
                    let proj = tensor::linear(&temb_tokens, d.weight(), d.bias())?;
                    time[d.id] = Some(proj.data().to_vec());
                }
                LayerKind::CrossAttn => {
                    let embed = |scale: &Tensor, shift: &Tensor| -> Result<Tokens> {
                        let dim = d.out_channels;
                        let mut data = Vec::with_capacity(self.cfg.cond_dim * dim);
                        for (j, &cj) in cond.0.iter().enumerate() {
                            for f in 0..dim {
                                let i = j * dim + f;
                                data.push(cj * scale.data()[i] + shift.data()[i]);
                            }
                        }
                        Tokens::new(self.cfg.cond_dim, dim, data)
                    };
                    conds[d.id] = Some(CondTokens {
                        keys: embed(&d.params[0], &d.params[1])?,
                        values: embed(&d.params[2], &d.params[3])?,
                    });
                }
                _ => {}
            }
        }
        Ok(StepContext { t, time, cond: conds })
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.c() != self.cfg.in_channels {
            return Err(shape_err!(
                "model input has {} channels, expected {}",
                x.c(),
                self.cfg.in_channels
            ));
        }
        self.cfg.check_image(x.h(), x.w())
    }

    /// `eps = model(x, t, c)` on the whole image.
    pub fn forward_full(&self, x: &Tensor, t: usize, cond: &Condition) -> Result<Tensor> {
        let ctx = self.step_context(t, cond)?;
        self.forward_with_context(x, &ctx)
    }

    pub fn forward_with_context(&self, x: &Tensor, ctx: &StepContext) -> Result<Tensor> {
        let mut outs = self.forward_traced(x, ctx)?;
        Ok(outs.pop().expect("non-empty graph"))
    }

    /// All layer outputs, in layer order.
    pub fn forward_traced(&self, x: &Tensor, ctx: &StepContext) -> Result<Vec<Tensor>> {
        self.check_input(x)?;
        let mut outs: Vec<Tensor> = Vec::with_capacity(self.layers.len());
        for d in &self.layers {
            let input = if d.id == 0 { x } else { &outs[d.id - 1] };
            let skip = d.skip_source.map(|s| &outs[s]);
            let y = self.apply_full(d, input, skip, ctx)?;
            outs.push(y);
        }
        Ok(outs)
    }

    /// One layer on full-size activations.
    pub fn apply_full(
        &self,
        d: &LayerDescriptor,
        input: &Tensor,
        skip: Option<&Tensor>,
        ctx: &StepContext,
    ) -> Result<Tensor> {
        match d.kind {
            LayerKind::Conv | LayerKind::DownConv => conv2d(input, d.weight(), d.bias(), d.stride, d.pad),
            LayerKind::GroupNorm => {
                let stats = group_stats(input, d.groups, None)?;
                self.apply_group_norm(d, input, &stats)
            }
            LayerKind::SelfAttn => self.self_attention(d, input, &Region::full(input.h(), input.w())),
            _ => self.apply_local(d, input, skip, ctx),
        }
    }

    /// Layers whose output rows depend only on the same input rows. Valid on
    /// a band as well as on a full map.
    pub fn apply_local(
        &self,
        d: &LayerDescriptor,
        input: &Tensor,
        skip: Option<&Tensor>,
        ctx: &StepContext,
    ) -> Result<Tensor> {
        if input.c() != d.in_channels {
            return Err(shape_err!(
                "layer {} ({}) got {} channels, expects {}",
                d.id,
                d.kind.name(),
                input.c(),
                d.in_channels
            ));
        }
        match d.kind {
            LayerKind::SiLU => Ok(silu(input)),
            LayerKind::Upsample => Ok(upsample_nearest2x(input)),
            LayerKind::AddTimeEmb => add_channel_bias(input, ctx.time_bias(d.id)?),
            LayerKind::AddSkip => {
                let skip = skip.ok_or_else(|| shape_err!("layer {} missing skip input", d.id))?;
                add(input, skip)
            }
            LayerKind::Linear => per_sample(input, |tok| tensor::linear(tok, d.weight(), d.bias())),
            LayerKind::CrossAttn => {
                let cond = ctx.cond_tokens(d.id)?;
                let scale = 1.0 / (d.out_channels as f64).sqrt();
                per_sample(input, |tok| attention(tok, &cond.keys, &cond.values, scale))
            }
            other => Err(shape_err!("layer {} ({}) is not band-local", d.id, other.name())),
        }
    }

    /// Rows of a conv layer's output for an input band, halos read from `input_full`.
    pub fn conv_band(&self, d: &LayerDescriptor, input_full: &Tensor, region: &Region) -> Result<Tensor> {
        conv2d_region(input_full, region, d.weight(), d.bias(), d.stride, d.pad)
    }

    /// Self-attention with queries from `region` of the stacked qkv map and
    /// keys/values from all of it.
    pub fn self_attention(&self, d: &LayerDescriptor, qkv_full: &Tensor, region: &Region) -> Result<Tensor> {
        region.check_parent(qkv_full)?;
        let c = d.out_channels;
        if qkv_full.c() != 3 * c {
            return Err(shape_err!(
                "self-attention layer {} expects {} stacked channels, got {}",
                d.id,
                3 * c,
                qkv_full.c()
            ));
        }
        let w = qkv_full.w();
        let scale = 1.0 / (c as f64).sqrt();
        let query_rows = region.row_start * w..region.row_end * w;
        let mut outs = Vec::with_capacity(qkv_full.n());
        for n in 0..qkv_full.n() {
            let q = Tokens::from_tensor_channels(qkv_full, n, 0..c).select_rows(query_rows.clone());
            let k = Tokens::from_tensor_channels(qkv_full, n, c..2 * c);
            let v = Tokens::from_tensor_channels(qkv_full, n, 2 * c..3 * c);
            outs.push(attention(&q, &k, &v, scale)?);
        }
        Tokens::into_tensor(&outs, region.rows(), w)
    }

    pub fn apply_group_norm(&self, d: &LayerDescriptor, input: &Tensor, stats: &GnStats) -> Result<Tensor> {
        group_norm_apply(
            input,
            None,
            stats,
            d.params[0].data(),
            d.params[1].data(),
            self.cfg.gn_eps,
        )
    }

    /// Shape of every layer's output for a given input size.
    pub fn output_shapes(&self, n: usize, h: usize, w: usize) -> Vec<[usize; 4]> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let (mut ch, mut cw) = (h, w);
        for d in &self.layers {
            let (oh, ow) = d.output_hw(ch, cw);
            shapes.push([n, d.out_channels, oh, ow]);
            (ch, cw) = (oh, ow);
        }
        shapes
    }

    /// Shape of every layer's input for a given image size.
    pub fn input_shapes(&self, n: usize, h: usize, w: usize) -> Vec<[usize; 4]> {
        let outs = self.output_shapes(n, h, w);
        let mut shapes = Vec::with_capacity(outs.len());
        shapes.push([n, self.cfg.in_channels, h, w]);
        shapes.extend_from_slice(&outs[..outs.len() - 1]);
        shapes
    }
}

fn per_sample(input: &Tensor, f: impl Fn(&Tokens) -> Result<Tokens>) -> Result<Tensor> {
    let mut outs = Vec::with_capacity(input.n());
    for n in 0..input.n() {
        outs.push(f(&Tokens::from_tensor(input, n))?);
    }
    Tokens::into_tensor(&outs, input.h(), input.w())
}
