use candle_core::Tensor;

use crate::data::ImageShape;
use crate::error::Result;
use crate::nn::{global_avg_pool as gap, BatchNorm2d, Conv2d, Linear, Mode, ParamStore};

struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        let shortcut = if stride != 1 || cin != cout {
            Some((
                Conv2d::new(store, &format!("{name}.sc"), cin, cout, 1, stride, 0, false, false)?,
                BatchNorm2d::new(store, &format!("{name}.sc_bn"), cout, true)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, stride, 1, false, false)?,
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), cout, true)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, 1, false, false)?,
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), cout, true)?,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.bn1.forward(&self.conv1.forward(x, mode)?, mode)?.relu()?;
        let h = self.bn2.forward(&self.conv2.forward(&h, mode)?, mode)?;
        let s = match &self.shortcut {
            Some((conv, bn)) => bn.forward(&conv.forward(x, mode)?, mode)?,
            None => x.clone(),
        };
        Ok((h + s)?.relu()?)
    }
}

/// Residual network: stem, then blocks at widths `w`, `2w` (stride 2) and
/// `4w` (stride 2), global average pooling and a linear head.
pub(super) struct ResNet {
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    blocks: Vec<BasicBlock>,
    head: Linear,
    feature_dim: usize,
}

impl ResNet {
    pub(super) fn new(store: &mut ParamStore, input: ImageShape, width: usize, classes: usize) -> Result<Self> {
        let w = width;
        let blocks = vec![
            BasicBlock::new(store, "layer1", w, 2 * w, 2)?,
            BasicBlock::new(store, "layer2", 2 * w, 4 * w, 2)?,
        ];
        Ok(Self {
            stem: Conv2d::new(store, "stem", input.channels, w, 3, 1, 1, false, false)?,
            stem_bn: BatchNorm2d::new(store, "stem_bn", w, true)?,
            blocks,
            head: Linear::new(store, "fc", 4 * w, classes, true, false)?,
            feature_dim: 4 * w,
        })
    }

    pub(super) fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub(super) fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        let mut h = self.stem_bn.forward(&self.stem.forward(x, mode)?, mode)?.relu()?;
        for b in &self.blocks {
            h = b.forward(&h, mode)?;
        }
        let f = gap(&h)?;
        let logits = self.head.forward(&f, mode)?;
        Ok((f, logits))
    }
}

/// VGG-style network: conv-BN-ReLU stacks with max pooling, then a hidden
/// fully connected layer whose activations are the penultimate features.
pub(super) struct Vgg {
    convs: Vec<(Conv2d, BatchNorm2d, bool)>,
    fc: Linear,
    head: Linear,
    feature_dim: usize,
}

impl Vgg {
    pub(super) fn new(store: &mut ParamStore, input: ImageShape, width: usize, classes: usize) -> Result<Self> {
        let w = width;
        // (out channels, pool after)
        let plan = [(w, false), (w, true), (2 * w, false), (2 * w, true), (4 * w, true)];
        let mut convs = Vec::new();
        let mut cin = input.channels;
        let mut side = (input.height, input.width);
        for (i, &(cout, pool)) in plan.iter().enumerate() {
            convs.push((
                Conv2d::new(store, &format!("conv{i}"), cin, cout, 3, 1, 1, false, false)?,
                BatchNorm2d::new(store, &format!("bn{i}"), cout, true)?,
                pool,
            ));
            cin = cout;
            if pool {
                side = (side.0 / 2, side.1 / 2);
            }
        }
        let flat = cin * side.0.max(1) * side.1.max(1);
        let feature_dim = 8 * w;
        Ok(Self {
            convs,
            fc: Linear::new(store, "fc1", flat, feature_dim, true, false)?,
            head: Linear::new(store, "fc2", feature_dim, classes, true, false)?,
            feature_dim,
        })
    }

    pub(super) fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub(super) fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        let mut h = x.clone();
        for (conv, bn, pool) in &self.convs {
            h = bn.forward(&conv.forward(&h, mode)?, mode)?.relu()?;
            if *pool && h.dim(2)? >= 2 {
                h = h.max_pool2d(2)?;
            }
        }
        let f = self.fc.forward(&h.flatten_from(1)?, mode)?.relu()?;
        let logits = self.head.forward(&f, mode)?;
        Ok((f, logits))
    }
}

/// One-hidden-layer perceptron, used for toy problems.
pub(super) struct Mlp {
    fc: Linear,
    head: Linear,
    feature_dim: usize,
}

impl Mlp {
    pub(super) fn new(store: &mut ParamStore, input: ImageShape, width: usize, classes: usize) -> Result<Self> {
        Ok(Self {
            fc: Linear::new(store, "fc1", input.numel(), width, true, false)?,
            head: Linear::new(store, "fc2", width, classes, true, false)?,
            feature_dim: width,
        })
    }

    pub(super) fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub(super) fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        let f = self.fc.forward(&x.flatten_from(1)?, mode)?.relu()?;
        let logits = self.head.forward(&f, mode)?;
        Ok((f, logits))
    }
}
