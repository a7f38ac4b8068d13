use rand::Rng;

use super::{Architecture, LayerKind, LayerSpec, ModelGraph, Pooling};
use crate::error::{Error, Result};
use crate::tensor::Real;

pub const MODEL_NAMES: &[&str] = &["cnn-small", "resnet-tiny"];

/// Builds a named network with freshly initialized parameters.
pub fn build_model<T: Real>(
    name: &str,
    num_classes: usize,
    input_shape: [usize; 3],
    rng: &mut impl Rng,
) -> Result<ModelGraph<T>> {
    let arch = match name {
        "cnn-small" => cnn_small(num_classes, input_shape, [16, 32, 32, 64])?,
        "resnet-tiny" => resnet_tiny(num_classes, input_shape, [16, 32, 64])?,
        _ => return Err(Error::UnknownModel(name.to_string())),
    };
    ModelGraph::initialize(arch, rng)
}

/// Appends layers while tracking the current `[C, H, W]`.
struct Builder {
    input: [usize; 3],
    layers: Vec<LayerSpec>,
}

impl Builder {
    fn new(input: [usize; 3]) -> Self {
        Builder {
            input,
            layers: Vec::new(),
        }
    }

    fn shape_of(&self, from: Option<usize>) -> [usize; 3] {
        from.map_or(self.input, |i| self.layers[i].out_shape)
    }

    fn push(&mut self, mut spec: LayerSpec) -> usize {
        spec.id = self.layers.len();
        self.layers.push(spec);
        self.layers.len() - 1
    }

    fn base(kind: LayerKind, from: Option<usize>, cin: usize, out_shape: [usize; 3]) -> LayerSpec {
        LayerSpec {
            id: 0,
            kind,
            inputs: from.into_iter().collect(),
            in_channels: cin,
            out_channels: out_shape[0],
            kernel: (0, 0),
            stride: 1,
            padding: 0,
            pooling: None,
            window: 0,
            prunable: false,
            out_shape,
            flops: 0,
        }
    }

    fn conv(&mut self, from: Option<usize>, cout: usize, k: usize, pad: usize, prunable: bool) -> Result<usize> {
        let [cin, h, w] = self.shape_of(from);
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::InvalidArgument(format!("{k}x{k} kernel does not fit {h}x{w}")));
        }
        let (ho, wo) = (h + 2 * pad - k + 1, w + 2 * pad - k + 1);
        let mut spec = Self::base(LayerKind::Conv, from, cin, [cout, ho, wo]);
        spec.kernel = (k, k);
        spec.padding = pad;
        spec.prunable = prunable;
        spec.flops = spec.conv_flops(cin, cout);
        Ok(self.push(spec))
    }

    fn elementwise(&mut self, kind: LayerKind, from: usize) -> usize {
        let s = self.shape_of(Some(from));
        self.push(Self::base(kind, Some(from), s[0], s))
    }

    fn conv_bn_relu(
        &mut self,
        from: Option<usize>,
        cout: usize,
        k: usize,
        pad: usize,
        prunable: bool,
    ) -> Result<usize> {
        let c = self.conv(from, cout, k, pad, prunable)?;
        let b = self.elementwise(LayerKind::Bn, c);
        Ok(self.elementwise(LayerKind::Relu, b))
    }

    fn pool(&mut self, from: usize, pooling: Pooling, window: usize) -> Result<usize> {
        let [c, h, w] = self.shape_of(Some(from));
        if window == 0 || h % window != 0 || w % window != 0 {
            return Err(Error::InvalidArgument(format!(
                "pool window {window} does not divide {h}x{w}"
            )));
        }
        let mut spec = Self::base(LayerKind::Pool, Some(from), c, [c, h / window, w / window]);
        spec.pooling = Some(pooling);
        spec.window = window;
        Ok(self.push(spec))
    }

    /// Global average pool; requires a square feature map.
    fn global_pool(&mut self, from: usize) -> Result<usize> {
        let [_, h, w] = self.shape_of(Some(from));
        if h != w {
            return Err(Error::InvalidArgument(format!(
                "global pool needs a square map, got {h}x{w}"
            )));
        }
        self.pool(from, Pooling::Avg, h)
    }

    fn linear(&mut self, from: usize, classes: usize) -> usize {
        let [c, h, w] = self.shape_of(Some(from));
        let d = c * h * w;
        let mut spec = Self::base(LayerKind::Linear, Some(from), d, [classes, 1, 1]);
        spec.flops = 2 * (d * classes) as u64;
        self.push(spec)
    }

    fn add(&mut self, a: usize, b: usize) -> usize {
        let s = self.shape_of(Some(a));
        let mut spec = Self::base(LayerKind::Add, Some(a), s[0], s);
        spec.inputs.push(b);
        self.push(spec)
    }
}

fn check_input(num_classes: usize, input: [usize; 3]) -> Result<()> {
    if num_classes == 0 || input.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "need classes > 0 and a non-empty input, got {num_classes} and {input:?}"
        )));
    }
    Ok(())
}

/// Four prunable conv-bn-relu blocks (max pool after the first two), a
/// global average pool and a linear head. Spatial size must be divisible by 4.
pub fn cnn_small(num_classes: usize, input: [usize; 3], widths: [usize; 4]) -> Result<Architecture> {
    check_input(num_classes, input)?;
    let mut b = Builder::new(input);
    let x = b.conv_bn_relu(None, widths[0], 3, 1, true)?;
    let x = b.pool(x, Pooling::Max, 2)?;
    let x = b.conv_bn_relu(Some(x), widths[1], 3, 1, true)?;
    let x = b.pool(x, Pooling::Max, 2)?;
    let x = b.conv_bn_relu(Some(x), widths[2], 3, 1, true)?;
    let x = b.conv_bn_relu(Some(x), widths[3], 3, 1, true)?;
    let x = b.global_pool(x)?;
    b.linear(x, num_classes);
    Ok(Architecture {
        name: "cnn-small".into(),
        input_shape: input,
        num_classes,
        layers: b.layers,
    })
}

/// Stem plus three single-block residual stages. Stages two and three open
/// with a 2x2 max pool and widen the shortcut with a 1x1 conv + bn. Only the
/// first conv of each block is prunable.
pub fn resnet_tiny(num_classes: usize, input: [usize; 3], widths: [usize; 3]) -> Result<Architecture> {
    check_input(num_classes, input)?;
    let mut b = Builder::new(input);
    let mut x = b.conv_bn_relu(None, widths[0], 3, 1, false)?;
    for (stage, &width) in widths.iter().enumerate() {
        if stage > 0 {
            x = b.pool(x, Pooling::Max, 2)?;
        }
        let h = b.conv_bn_relu(Some(x), width, 3, 1, true)?;
        let h = b.conv(Some(h), width, 3, 1, false)?;
        let h = b.elementwise(LayerKind::Bn, h);
        let shortcut = if b.shape_of(Some(x))[0] == width {
            x
        } else {
            let s = b.conv(Some(x), width, 1, 0, false)?;
            b.elementwise(LayerKind::Bn, s)
        };
        let sum = b.add(h, shortcut);
        x = b.elementwise(LayerKind::Relu, sum);
    }
    let x = b.global_pool(x)?;
    b.linear(x, num_classes);
    Ok(Architecture {
        name: "resnet-tiny".into(),
        input_shape: input,
        num_classes,
        layers: b.layers,
    })
}
