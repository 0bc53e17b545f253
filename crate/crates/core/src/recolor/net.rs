//! Network halves of the recolor model: a small UNeXt-style pixel-mapping
//! encoder producing K logits per pixel, and the palette acquisition
//! module producing K RGB colours per image.

use super::RecolorConfig;
use crate::nn::{BatchNorm, Conv2d, Graph, Init, LayerNorm, Linear, ParamId, ParamStore, Tensor, Var};

const SHIFT_GROUPS: usize = 5;

#[derive(Clone, Debug)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBn {
    fn new(store: &mut ParamStore, init: &mut Init, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            conv: Conv2d::same(store, init, &format!("{name}.conv"), cin, cout, 3),
            bn: BatchNorm::new(store, &format!("{name}.bn"), cout),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let y = self.conv.forward(g, store, x);
        self.bn.forward(g, store, y)
    }
}

/// Shifted tokenized MLP: shift along width, token-wise linear, depthwise
/// conv + GELU, shift along height, token-wise linear, residual, LayerNorm.
#[derive(Clone, Debug)]
struct TokMlp {
    fc1: Linear,
    dw_weight: ParamId,
    dw_bias: ParamId,
    fc2: Linear,
    norm: LayerNorm,
}

impl TokMlp {
    fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize) -> Self {
        Self {
            fc1: Linear::new(store, init, &format!("{name}.fc1"), dim, dim, true),
            dw_weight: store.param(&format!("{name}.dw.weight"), init.kaiming(&[dim, 1, 3, 3], 9, 1.0)),
            dw_bias: store.param(&format!("{name}.dw.bias"), Tensor::zeros(&[dim])),
            fc2: Linear::new(store, init, &format!("{name}.fc2"), dim, dim, true),
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
        }
    }

    /// `x: [N,C,H,W]` → same shape.
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = g.shift(x, 3, SHIFT_GROUPS);
        let h = g.permute(h, &[0, 2, 3, 1]);
        let h = self.fc1.forward(g, store, h);
        let h = g.permute(h, &[0, 3, 1, 2]);
        let (w, b) = (g.param(store, self.dw_weight), g.param(store, self.dw_bias));
        let h = g.dwconv2d(h, w, b, 1);
        let h = g.gelu(h);
        let h = g.shift(h, 2, SHIFT_GROUPS);
        let h = g.permute(h, &[0, 2, 3, 1]);
        let h = self.fc2.forward(g, store, h);
        let tokens = g.permute(x, &[0, 2, 3, 1]);
        let h = g.add(h, tokens);
        let h = self.norm.forward(g, store, h);
        g.permute(h, &[0, 3, 1, 2])
    }
}

/// U-shaped pixel-mapping encoder. Each encoder stage halves the
/// resolution; the decoder mirrors it with additive skips and returns to
/// full resolution before a 1×1 projection to K channels.
#[derive(Clone, Debug)]
pub struct PixelEncoder {
    down: Vec<ConvBn>,
    bottleneck: TokMlp,
    up: Vec<ConvBn>,
    head: Conv2d,
}

impl PixelEncoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &RecolorConfig) -> Self {
        let w = &cfg.encoder_channels;
        let mut down = Vec::new();
        let mut cin = 3;
        for (i, &c) in w.iter().enumerate() {
            down.push(ConvBn::new(store, init, &format!("{name}.down{i}"), cin, c));
            cin = c;
        }
        let bottleneck = TokMlp::new(store, init, &format!("{name}.tok"), cin);
        let mut up = Vec::new();
        for i in (0..w.len()).rev() {
            let cout = if i == 0 { w[0] } else { w[i - 1] };
            up.push(ConvBn::new(store, init, &format!("{name}.up{i}"), w[i], cout));
        }
        let head = Conv2d::new(store, init, &format!("{name}.head"), w[0], cfg.num_colors, 1, 1, 0, true);
        Self { down, bottleneck, up, head }
    }

    /// `x: [N,3,H,W]` → logits `[N,K,H,W]`. H and W must be divisible by
    /// `2^stages`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let mut skips = Vec::with_capacity(self.down.len());
        let mut h = x;
        for stage in &self.down {
            let y = stage.forward(g, store, h);
            let y = g.maxpool(y, 2, 2, 0);
            h = g.relu(y);
            skips.push(h);
        }
        h = self.bottleneck.forward(g, store, h);
        // skips[last] is the bottleneck input itself; decoder stage j adds
        // the encoder output of matching resolution
        let n = self.up.len();
        for (j, stage) in self.up.iter().enumerate() {
            let y = stage.forward(g, store, h);
            let y = g.upsample2(y);
            h = g.relu(y);
            if j + 1 < n {
                h = g.add(h, skips[n - 2 - j]);
            }
        }
        self.head.forward(g, store, h)
    }
}

/// Palette acquisition: a stride-4 conv stem, K learnable queries that
/// attend over the stem tokens, and a sigmoid head per query.
#[derive(Clone, Debug)]
pub struct PaletteModule {
    stem1: Conv2d,
    stem2: Conv2d,
    key: Linear,
    value: Linear,
    queries: ParamId,
    head: Linear,
    dim: usize,
    k: usize,
}

impl PaletteModule {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &RecolorConfig) -> Self {
        let c1 = cfg.encoder_channels[0];
        let dim = *cfg.encoder_channels.get(1).unwrap_or(&c1);
        let k = cfg.num_colors;
        Self {
            stem1: Conv2d::new(store, init, &format!("{name}.stem1"), 3, c1, 3, 2, 1, true),
            stem2: Conv2d::new(store, init, &format!("{name}.stem2"), c1, dim, 3, 2, 1, true),
            key: Linear::new(store, init, &format!("{name}.key"), dim, dim, false),
            value: Linear::new(store, init, &format!("{name}.value"), dim, dim, false),
            queries: store.param(&format!("{name}.queries"), init.uniform(&[1, k, dim], 1.0)),
            head: Linear::new(store, init, &format!("{name}.head"), dim, 3, true),
            dim,
            k,
        }
    }

    /// `x: [N,3,H,W]` → palette `[N,K,3]` in `(0, 1)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.stem1.forward(g, store, x);
        let h = g.relu(h);
        let h = self.stem2.forward(g, store, h);
        let h = g.relu(h);
        let (n, c, hh, ww) = {
            let s = g.shape(h);
            (s[0], s[1], s[2], s[3])
        };
        let tokens = g.reshape(h, &[n, c, hh * ww]);
        let tokens = g.permute(tokens, &[0, 2, 1]);
        let keys = self.key.forward(g, store, tokens);
        let values = self.value.forward(g, store, tokens);
        let q = g.param(store, self.queries);
        let scores = g.matmul(q, keys, false, true);
        let scores = g.scale(scores, 1.0 / (self.dim as f32).sqrt());
        let attn = g.softmax_last(scores);
        let pooled = g.matmul(attn, values, false, false);
        debug_assert_eq!(g.shape(pooled), &[n, self.k, self.dim]);
        let pooled = g.add(pooled, q);
        let rgb = self.head.forward(g, store, pooled);
        g.sigmoid(rgb)
    }
}
