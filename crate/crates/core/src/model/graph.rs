use super::ModelConfig;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    /// 3x3, stride 1, zero padding 1.
    Conv,
    GroupNorm,
    SiLU,
    /// 3x3, stride 2, zero padding 1.
    DownConv,
    Upsample,
    /// Input carries stacked `[q | k | v]` channels; output has a third of them.
    SelfAttn,
    /// Queries from the input, keys and values from the condition embedding.
    CrossAttn,
    /// Per-pixel affine map over channels.
    Linear,
    AddSkip,
    AddTimeEmb,
}

impl LayerKind {
    /// Layers whose fresh output depends on activations outside the device's
    /// own band. These hold a stale input cache and take part in AllGather.
    pub fn needs_spatial_context(self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::DownConv | LayerKind::SelfAttn)
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::GroupNorm => "group_norm",
            LayerKind::SiLU => "silu",
            LayerKind::DownConv => "down_conv",
            LayerKind::Upsample => "upsample",
            LayerKind::SelfAttn => "self_attn",
            LayerKind::CrossAttn => "cross_attn",
            LayerKind::Linear => "linear",
            LayerKind::AddSkip => "add_skip",
            LayerKind::AddTimeEmb => "add_time_emb",
        }
    }
}

/// One node of the layer graph. Layer `id` consumes the output of layer
/// `id - 1` (the model input for layer 0), plus `skip_source` for `AddSkip`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerDescriptor {
    pub id: usize,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Resolution level of the input map; level `l` is the image size / 2^l.
    pub level: usize,
    pub out_level: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub skip_source: Option<usize>,
    pub params: Vec<Tensor>,
}

impl LayerDescriptor {
    pub fn new(id: usize, kind: LayerKind, in_channels: usize, out_channels: usize, level: usize) -> Self {
        let (kernel, stride, pad, out_level) = match kind {
            LayerKind::Conv => (3, 1, 1, level),
            LayerKind::DownConv => (3, 2, 1, level + 1),
            LayerKind::Upsample => (1, 1, 0, level.saturating_sub(1)),
            _ => (1, 1, 0, level),
        };
        Self {
            id,
            kind,
            in_channels,
            out_channels,
            level,
            out_level,
            kernel,
            stride,
            pad,
            groups: 0,
            skip_source: None,
            params: Vec::new(),
        }
    }

    pub fn weight(&self) -> &Tensor {
        &self.params[0]
    }

    pub fn bias(&self) -> &[f32] {
        self.params[1].data()
    }

    /// Input fan-in used to scale the uniform initialization of each param.
    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Conv | LayerKind::DownConv => self.in_channels * self.kernel * self.kernel,
            LayerKind::Linear => self.in_channels,
            _ => 1,
        }
    }

    /// Output spatial size for an input of `h x w`.
    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        match self.kind {
            LayerKind::DownConv => ((h + 2 * self.pad - self.kernel) / 2 + 1, (w + 2 * self.pad - self.kernel) / 2 + 1),
            LayerKind::Upsample => (h * 2, w * 2),
            _ => (h, w),
        }
    }
}

fn uniform(dims: [usize; 4], scale: f64, rng: &mut SplitMix64) -> Tensor {
    Tensor::from_fn(dims, |_| rng.next_symmetric(scale) as f32)
}

struct GraphBuilder<'a> {
    cfg: &'a ModelConfig,
    layers: Vec<LayerDescriptor>,
}

impl GraphBuilder<'_> {
    fn push(&mut self, kind: LayerKind, in_c: usize, out_c: usize, level: usize) -> usize {
        let id = self.layers.len();
        let mut d = LayerDescriptor::new(id, kind, in_c, out_c, level);
        if kind == LayerKind::GroupNorm {
            d.groups = self.cfg.groups;
        }
        self.layers.push(d);
        id
    }

    fn add_skip(&mut self, c: usize, level: usize, source: usize) -> usize {
        let id = self.push(LayerKind::AddSkip, c, c, level);
        self.layers[id].skip_source = Some(source);
        id
    }

    /// `[conv -> GN -> SiLU -> +temb] x 2` with a residual from `input`.
    fn res_block(&mut self, c: usize, level: usize, input: usize) -> usize {
        for _ in 0..2 {
            self.push(LayerKind::Conv, c, c, level);
            self.push(LayerKind::GroupNorm, c, c, level);
            self.push(LayerKind::SiLU, c, c, level);
            self.push(LayerKind::AddTimeEmb, c, c, level);
        }
        self.add_skip(c, level, input)
    }

    fn attention_block(&mut self, c: usize, level: usize, input: usize) -> usize {
        self.push(LayerKind::Linear, c, 3 * c, level);
        self.push(LayerKind::SelfAttn, 3 * c, c, level);
        self.push(LayerKind::Linear, c, c, level);
        let mid = self.add_skip(c, level, input);
        self.push(LayerKind::Linear, c, c, level);
        self.push(LayerKind::CrossAttn, c, c, level);
        self.push(LayerKind::Linear, c, c, level);
        self.add_skip(c, level, mid)
    }
}

pub(super) fn build_layers(cfg: &ModelConfig) -> Vec<LayerDescriptor> {
    let mut b = GraphBuilder { cfg, layers: Vec::new() };
    let levels = cfg.levels;
    let attn_level = cfg.attention_level();
    let mut cur = b.push(LayerKind::Conv, cfg.in_channels, cfg.channels(0), 0);
    let mut skips = Vec::with_capacity(levels);
    for level in 0..levels {
        let c = cfg.channels(level);
        cur = b.res_block(c, level, cur);
        if level == attn_level {
            cur = b.attention_block(c, level, cur);
        }
        skips.push(cur);
        if level + 1 < levels {
            cur = b.push(LayerKind::DownConv, c, cfg.channels(level + 1), level);
        }
    }
    for level in (0..levels.saturating_sub(1)).rev() {
        let (c_hi, c) = (cfg.channels(level + 1), cfg.channels(level));
        b.push(LayerKind::Upsample, c_hi, c_hi, level + 1);
        b.push(LayerKind::Conv, c_hi, c, level);
        cur = b.add_skip(c, level, skips[level]);
        cur = b.res_block(c, level, cur);
    }
    let _ = cur;
    let c0 = cfg.channels(0);
    b.push(LayerKind::GroupNorm, c0, c0, 0);
    b.push(LayerKind::SiLU, c0, c0, 0);
    b.push(LayerKind::Conv, c0, cfg.in_channels, 0);
    b.layers
}

/// Fill every layer's params from independent splitmix64 streams keyed by
/// (seed, layer id, param index), uniform in [-s, s] with s = 1/sqrt(fan_in).
pub(super) fn init_params(cfg: &ModelConfig, layers: &mut [LayerDescriptor], seed: u64) {
    let tdim = cfg.time_dim();
    for d in layers.iter_mut() {
        let id = d.id;
        let stream = |p: usize| SplitMix64::for_param(seed, id, p);
        let s = 1.0 / (d.fan_in() as f64).sqrt();
        d.params = match d.kind {
            LayerKind::Conv | LayerKind::DownConv => vec![
                uniform([d.out_channels, d.in_channels, d.kernel, d.kernel], s, &mut stream(0)),
                uniform([d.out_channels, 1, 1, 1], s, &mut stream(1)),
            ],
            LayerKind::Linear => vec![
                uniform([d.out_channels, d.in_channels, 1, 1], s, &mut stream(0)),
                uniform([d.out_channels, 1, 1, 1], s, &mut stream(1)),
            ],
            LayerKind::GroupNorm => vec![
                Tensor::full([d.out_channels, 1, 1, 1], 1.0),
                Tensor::zeros([d.out_channels, 1, 1, 1]),
            ],
            LayerKind::AddTimeEmb => {
                let s = 1.0 / (tdim as f64).sqrt();
                vec![
                    uniform([d.out_channels, tdim, 1, 1], s, &mut stream(0)),
                    uniform([d.out_channels, 1, 1, 1], s, &mut stream(1)),
                ]
            }
            LayerKind::CrossAttn => {
                // Per-token affine embedding of the condition scalars:
                // key_j = c_j * key_scale_j + key_shift_j, same for values.
                let dims = [cfg.cond_dim, d.out_channels, 1, 1];
                (0..4).map(|p| uniform(dims, 1.0, &mut stream(p))).collect()
            }
            LayerKind::SiLU
            | LayerKind::Upsample
            | LayerKind::SelfAttn
            | LayerKind::AddSkip => Vec::new(),
        };
    }
}
