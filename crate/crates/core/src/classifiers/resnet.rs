use crate::nn::{BatchNorm, Conv2d, Graph, Init, Linear, ParamStore, Var};

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    down: Option<(Conv2d, BatchNorm)>,
}

impl BasicBlock {
    fn new(store: &mut ParamStore, init: &mut Init, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let down = (stride != 1 || cin != cout).then(|| {
            (
                Conv2d::new(store, init, &format!("{name}.down.conv"), cin, cout, 1, stride, 0, false),
                BatchNorm::new(store, &format!("{name}.down.bn"), cout),
            )
        });
        Self {
            conv1: Conv2d::new(store, init, &format!("{name}.conv1"), cin, cout, 3, stride, 1, false),
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), cout),
            conv2: Conv2d::new(store, init, &format!("{name}.conv2"), cout, cout, 3, 1, 1, false),
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), cout),
            down,
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.conv1.forward(g, store, x);
        let h = self.bn1.forward(g, store, h);
        let h = g.relu(h);
        let h = self.conv2.forward(g, store, h);
        let h = self.bn2.forward(g, store, h);
        let skip = match &self.down {
            Some((conv, bn)) => {
                let s = conv.forward(g, store, x);
                bn.forward(g, store, s)
            }
            None => x,
        };
        let h = g.add(h, skip);
        g.relu(h)
    }
}

/// ResNet-18: 7×7 stride-2 stem, max pool, four stages of two basic blocks
/// with widths (w, 2w, 4w, 8w), global average pooling, linear head.
#[derive(Clone, Debug)]
pub struct ResNet18 {
    stem: Conv2d,
    stem_bn: BatchNorm,
    blocks: Vec<BasicBlock>,
    fc: Linear,
}

impl ResNet18 {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, w: usize) -> Self {
        let stem = Conv2d::new(store, init, &format!("{name}.stem"), 3, w, 7, 2, 3, false);
        let stem_bn = BatchNorm::new(store, &format!("{name}.stem_bn"), w);
        let mut blocks = Vec::new();
        let mut cin = w;
        for (stage, mult) in [1, 2, 4, 8].into_iter().enumerate() {
            let cout = w * mult;
            for b in 0..2 {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(store, init, &format!("{name}.layer{stage}.{b}"), cin, cout, stride));
                cin = cout;
            }
        }
        Self {
            stem,
            stem_bn,
            blocks,
            fc: Linear::new(store, init, &format!("{name}.fc"), cin, 2, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.stem.forward(g, store, x);
        let h = self.stem_bn.forward(g, store, h);
        let h = g.relu(h);
        let mut h = g.maxpool(h, 3, 2, 1);
        for b in &self.blocks {
            h = b.forward(g, store, h);
        }
        let h = g.mean_axis(h, 3);
        let h = g.mean_axis(h, 2);
        self.fc.forward(g, store, h)
    }
}
