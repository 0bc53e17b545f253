use crate::nn::{BatchNorm, Conv2d, Graph, Init, Linear, ParamStore, Var};

/// Conv followed by Max-Feature-Map; the conv emits twice the kept width.
#[derive(Clone, Debug)]
struct MfmConv {
    conv: Conv2d,
}

impl MfmConv {
    fn new(store: &mut ParamStore, init: &mut Init, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        Self {
            conv: Conv2d::new(store, init, name, cin, 2 * cout, k, 1, k / 2, true),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let y = self.conv.forward(g, store, x);
        g.mfm(y)
    }
}

/// Light CNN: nine conv/MFM layers (a 5×5 stem, then four 1×1 + 3×3
/// pairs) with max pooling, batch norm between stages, global average
/// pooling and an MFM fully connected head.
#[derive(Clone, Debug)]
pub struct Lcnn {
    convs: Vec<MfmConv>,
    norms: Vec<BatchNorm>,
    fc1: Linear,
    fc2: Linear,
}

impl Lcnn {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, w: usize) -> Self {
        // (cin, cout, kernel) per layer
        let plan = [
            (3, 2 * w, 5),
            (2 * w, 2 * w, 1),
            (2 * w, 3 * w, 3),
            (3 * w, 3 * w, 1),
            (3 * w, 4 * w, 3),
            (4 * w, 4 * w, 1),
            (4 * w, 2 * w, 3),
            (2 * w, 2 * w, 1),
            (2 * w, 2 * w, 3),
        ];
        let convs = plan
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, k))| MfmConv::new(store, init, &format!("{name}.conv{i}"), cin, cout, k))
            .collect();
        let norms = [2 * w, 3 * w, 4 * w, 2 * w]
            .iter()
            .enumerate()
            .map(|(i, &c)| BatchNorm::new(store, &format!("{name}.bn{i}"), c))
            .collect();
        Self {
            convs,
            norms,
            fc1: Linear::new(store, init, &format!("{name}.fc1"), 2 * w, 4 * w, true),
            fc2: Linear::new(store, init, &format!("{name}.fc2"), 2 * w, 2, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let mut h = self.convs[0].forward(g, store, x);
        h = g.maxpool(h, 2, 2, 0);
        // four (1×1, 3×3) pairs, each followed by pooling and batch norm
        for stage in 0..4 {
            h = self.norms[stage].forward(g, store, h);
            h = self.convs[1 + 2 * stage].forward(g, store, h);
            h = self.convs[2 + 2 * stage].forward(g, store, h);
            h = g.maxpool(h, 2, 2, 0);
        }
        let h = g.mean_axis(h, 3);
        let h = g.mean_axis(h, 2);
        let h = self.fc1.forward(g, store, h);
        let h = g.mfm(h);
        self.fc2.forward(g, store, h)
    }
}
