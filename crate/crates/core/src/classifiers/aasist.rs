//! Graph-attention back-end adapted to the 3×256×256 image input.
//!
//! The image is read as 256 time frames of 768 features (frame `t` holds
//! `x[c, q, t]` at feature `c·256 + q`) and a linear layer brings each
//! frame to 128 dimensions in place of a raw-waveform front-end. The rest
//! follows the usual layout at reduced width: residual conv encoder,
//! spectral and temporal graphs with attention and top-k pooling, one
//! heterogeneous stage with a master node, and a max/mean readout.

use crate::features::IMAGE_SIZE;
use crate::nn::{BatchNorm, Conv2d, Graph, Init, Linear, ParamId, ParamStore, Tensor, Var};

pub const FRAME_FEATURES: usize = 3 * IMAGE_SIZE;
pub const FRONT_DIM: usize = 128;
const ATT_TEMPERATURE: f32 = 2.0;
const POOL_RATIO: f32 = 0.5;

/// `[N,3,Q,T]` → `[N,T,3·Q]`, the frame-major view fed to the front-end.
pub fn frames_view(g: &mut Graph, x: Var) -> Var {
    let s = g.shape(x).to_vec();
    let h = g.permute(x, &[0, 3, 1, 2]);
    g.reshape(h, &[s[0], s[3], s[1] * s[2]])
}

#[derive(Clone, Debug)]
struct ResBlock {
    bn1: Option<BatchNorm>,
    conv1: Conv2d,
    bn2: BatchNorm,
    conv2: Conv2d,
    down: Option<Conv2d>,
    pool: bool,
}

impl ResBlock {
    fn new(store: &mut ParamStore, init: &mut Init, name: &str, cin: usize, cout: usize, first: bool, pool: bool) -> Self {
        Self {
            bn1: (!first).then(|| BatchNorm::new(store, &format!("{name}.bn1"), cin)),
            conv1: Conv2d::same(store, init, &format!("{name}.conv1"), cin, cout, 3),
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), cout),
            conv2: Conv2d::same(store, init, &format!("{name}.conv2"), cout, cout, 3),
            down: (cin != cout).then(|| Conv2d::new(store, init, &format!("{name}.down"), cin, cout, 1, 1, 0, true)),
            pool,
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        if let Some(bn) = &self.bn1 {
            h = bn.forward(g, store, h);
            h = g.selu(h);
        }
        h = self.conv1.forward(g, store, h);
        h = self.bn2.forward(g, store, h);
        h = g.selu(h);
        h = self.conv2.forward(g, store, h);
        let skip = match &self.down {
            Some(d) => d.forward(g, store, x),
            None => x,
        };
        h = g.add(h, skip);
        if self.pool {
            h = g.maxpool(h, 2, 2, 0);
        }
        h
    }
}

/// Graph attention over fully connected nodes `[B,n,d_in]` → `[B,n,d_out]`.
#[derive(Clone, Debug)]
struct GraphAttention {
    att_proj: Linear,
    att_weight: Linear,
    with_att: Linear,
    without_att: Linear,
    bn: BatchNorm,
}

impl GraphAttention {
    fn new(store: &mut ParamStore, init: &mut Init, name: &str, din: usize, dout: usize) -> Self {
        Self {
            att_proj: Linear::new(store, init, &format!("{name}.att_proj"), din, dout, true),
            att_weight: Linear::new(store, init, &format!("{name}.att_weight"), dout, 1, false),
            with_att: Linear::new(store, init, &format!("{name}.with_att"), din, dout, true),
            without_att: Linear::new(store, init, &format!("{name}.without_att"), din, dout, true),
            bn: BatchNorm::new(store, &format!("{name}.bn"), dout),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let (b, n) = (g.shape(x)[0], g.shape(x)[1]);
        let pairs = g.pairwise_mul(x);
        let a = self.att_proj.forward(g, store, pairs);
        let a = g.tanh(a);
        let a = self.att_weight.forward(g, store, a);
        let a = g.reshape(a, &[b, n, n]);
        let a = g.scale(a, 1.0 / ATT_TEMPERATURE);
        let a = g.softmax_last(a);
        let aggr = g.matmul(a, x, false, false);
        let h1 = self.with_att.forward(g, store, aggr);
        let h2 = self.without_att.forward(g, store, x);
        let h = g.add(h1, h2);
        let h = g.permute(h, &[0, 2, 1]);
        let h = self.bn.forward(g, store, h);
        let h = g.permute(h, &[0, 2, 1]);
        g.selu(h)
    }
}

/// Gated top-k node selection.
#[derive(Clone, Debug)]
struct GraphPool {
    proj: Linear,
}

impl GraphPool {
    fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize) -> Self {
        Self {
            proj: Linear::new(store, init, &format!("{name}.proj"), dim, 1, true),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let (b, n) = (g.shape(x)[0], g.shape(x)[1]);
        let k = ((n as f32 * POOL_RATIO) as usize).max(1);
        let s = self.proj.forward(g, store, x);
        let s = g.sigmoid(s);
        let gated = g.mul(x, s);
        let scores = g.value(s).data().to_vec();
        let mut idx = Vec::with_capacity(b * k);
        for bi in 0..b {
            let row = &scores[bi * n..(bi + 1) * n];
            let mut order: Vec<usize> = (0..n).collect();
            // stable sort keeps the lower index first on ties
            order.sort_by(|&i, &j| row[j].total_cmp(&row[i]));
            idx.extend_from_slice(&order[..k]);
        }
        g.gather_rows(gated, idx, k)
    }
}

#[derive(Clone, Debug)]
pub struct Aasist {
    front: Linear,
    front_bn: BatchNorm,
    encoder: Vec<ResBlock>,
    pos_s: ParamId,
    gat_s: GraphAttention,
    gat_t: GraphAttention,
    pool_s: GraphPool,
    pool_t: GraphPool,
    master: ParamId,
    hs_gal: GraphAttention,
    pool_hs_s: GraphPool,
    pool_hs_t: GraphPool,
    out: Linear,
}

impl Aasist {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, w: usize) -> Self {
        let c = 2 * w;
        let d = 2 * w;
        // front end pools once, then two encoder blocks pool again
        let spectral_nodes = FRONT_DIM / 8;
        let encoder = vec![
            ResBlock::new(store, init, &format!("{name}.enc0"), 1, w, true, true),
            ResBlock::new(store, init, &format!("{name}.enc1"), w, c, false, true),
            ResBlock::new(store, init, &format!("{name}.enc2"), c, c, false, false),
        ];
        Self {
            front: Linear::new(store, init, &format!("{name}.front"), FRAME_FEATURES, FRONT_DIM, true),
            front_bn: BatchNorm::new(store, &format!("{name}.front_bn"), 1),
            encoder,
            pos_s: store.param(&format!("{name}.pos_s"), Tensor::zeros(&[1, spectral_nodes, c])),
            gat_s: GraphAttention::new(store, init, &format!("{name}.gat_s"), c, d),
            gat_t: GraphAttention::new(store, init, &format!("{name}.gat_t"), c, d),
            pool_s: GraphPool::new(store, init, &format!("{name}.pool_s"), d),
            pool_t: GraphPool::new(store, init, &format!("{name}.pool_t"), d),
            master: store.param(&format!("{name}.master"), init.uniform(&[1, 1, d], 1.0)),
            hs_gal: GraphAttention::new(store, init, &format!("{name}.hs_gal"), d, d),
            pool_hs_s: GraphPool::new(store, init, &format!("{name}.pool_hs_s"), d),
            pool_hs_t: GraphPool::new(store, init, &format!("{name}.pool_hs_t"), d),
            out: Linear::new(store, init, &format!("{name}.out"), 5 * d, 2, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let n = g.shape(x)[0];
        let frames = frames_view(g, x);
        let h = self.front.forward(g, store, frames);
        // [N,T,128] → [N,1,128,T]
        let t_len = g.shape(h)[1];
        let h = g.permute(h, &[0, 2, 1]);
        let h = g.reshape(h, &[n, 1, FRONT_DIM, t_len]);
        let h = g.abs(h);
        let h = g.maxpool(h, 2, 2, 0);
        let h = self.front_bn.forward(g, store, h);
        let mut h = g.selu(h);
        for block in &self.encoder {
            h = block.forward(g, store, h);
        }
        let h = g.abs(h);

        // spectral nodes: max over time; temporal nodes: max over frequency
        let s = g.max_axis(h, 3);
        let s = g.permute(s, &[0, 2, 1]);
        let pos = g.param(store, self.pos_s);
        let s = g.add(s, pos);
        let t = g.max_axis(h, 2);
        let t = g.permute(t, &[0, 2, 1]);

        let s = self.gat_s.forward(g, store, s);
        let s = self.pool_s.forward(g, store, s);
        let t = self.gat_t.forward(g, store, t);
        let t = self.pool_t.forward(g, store, t);

        let (ns, nt) = (g.shape(s)[1], g.shape(t)[1]);
        let d = g.shape(s)[2];
        let zeros = g.input(Tensor::zeros(&[n, 1, d]));
        let master = g.param(store, self.master);
        let master = g.add(zeros, master);
        let nodes = g.concat(&[s, t, master], 1);
        let nodes = self.hs_gal.forward(g, store, nodes);
        let s = g.slice(nodes, 1, 0, ns);
        let t = g.slice(nodes, 1, ns, nt);
        let master = g.slice(nodes, 1, ns + nt, 1);
        let s = self.pool_hs_s.forward(g, store, s);
        let t = self.pool_hs_t.forward(g, store, t);

        let t_abs = g.abs(t);
        let t_max = g.max_axis(t_abs, 1);
        let t_avg = g.mean_axis(t, 1);
        let s_abs = g.abs(s);
        let s_max = g.max_axis(s_abs, 1);
        let s_avg = g.mean_axis(s, 1);
        let master = g.reshape(master, &[n, d]);
        let feat = g.concat(&[t_max, t_avg, s_max, s_avg, master], 1);
        self.out.forward(g, store, feat)
    }
}
