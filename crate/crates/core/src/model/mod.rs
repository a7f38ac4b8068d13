//! Network descriptions, parameters, and FLOPs accounting.
//!
//! A [`ModelGraph`] is an ordered list of [`LayerSpec`]s whose `inputs`
//! reference earlier layers, so the list order is a valid execution order.
//! Prunable convolutions are always followed by a batch norm and a ReLU; the
//! channel mask is applied to the ReLU output.

mod builders;

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use builders::{build_model, cnn_small, resnet_tiny, MODEL_NAMES};

use crate::error::{Error, Result};
use crate::tensor::{BatchNormMode, BatchStats, Graph, PoolKind, Real, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Bn,
    Relu,
    Pool,
    Linear,
    Add,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Max,
    Avg,
}

impl From<Pooling> for PoolKind {
    fn from(p: Pooling) -> Self {
        match p {
            Pooling::Max => PoolKind::Max,
            Pooling::Avg => PoolKind::Avg,
        }
    }
}

/// One node of the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: usize,
    pub kind: LayerKind,
    /// Predecessor layer ids; empty means the network input.
    pub inputs: Vec<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub pooling: Option<Pooling>,
    /// Pool window; 0 for non-pool layers.
    pub window: usize,
    pub prunable: bool,
    /// Output shape `[C, H, W]` (`[K, 1, 1]` for linear layers).
    pub out_shape: [usize; 3],
    /// Forward FLOPs, one multiply-accumulate counted as 2.
    pub flops: u64,
}

impl LayerSpec {
    pub(crate) fn conv_flops(&self, cin: usize, cout: usize) -> u64 {
        2 * (self.kernel.0 * self.kernel.1 * cin * cout * self.out_shape[1] * self.out_shape[2]) as u64
    }
}

/// Location of a prunable convolution and the layers that belong to it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PrunableLayer {
    pub conv: usize,
    pub bn: usize,
    /// ReLU whose output is scaled by the channel mask.
    pub mask_site: usize,
    pub channels: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamRole::Weight => "weight",
            ParamRole::Bias => "bias",
            ParamRole::Gamma => "gamma",
            ParamRole::Beta => "beta",
            ParamRole::RunningMean => "running_mean",
            ParamRole::RunningVar => "running_var",
        }
    }

    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams<T: Real = f32> {
    None,
    Conv {
        weight: Tensor<T>,
    },
    Bn {
        gamma: Tensor<T>,
        beta: Tensor<T>,
        running_mean: Tensor<T>,
        running_var: Tensor<T>,
    },
    Linear {
        weight: Tensor<T>,
        bias: Tensor<T>,
    },
}

impl<T: Real> LayerParams<T> {
    pub fn tensors(&self) -> Vec<(ParamRole, &Tensor<T>)> {
        match self {
            LayerParams::None => vec![],
            LayerParams::Conv { weight } => vec![(ParamRole::Weight, weight)],
            LayerParams::Bn {
                gamma,
                beta,
                running_mean,
                running_var,
            } => vec![
                (ParamRole::Gamma, gamma),
                (ParamRole::Beta, beta),
                (ParamRole::RunningMean, running_mean),
                (ParamRole::RunningVar, running_var),
            ],
            LayerParams::Linear { weight, bias } => {
                vec![(ParamRole::Weight, weight), (ParamRole::Bias, bias)]
            }
        }
    }

    pub fn tensor_mut(&mut self, role: ParamRole) -> Option<&mut Tensor<T>> {
        match (self, role) {
            (LayerParams::Conv { weight }, ParamRole::Weight) => Some(weight),
            (LayerParams::Linear { weight, .. }, ParamRole::Weight) => Some(weight),
            (LayerParams::Linear { bias, .. }, ParamRole::Bias) => Some(bias),
            (LayerParams::Bn { gamma, .. }, ParamRole::Gamma) => Some(gamma),
            (LayerParams::Bn { beta, .. }, ParamRole::Beta) => Some(beta),
            (LayerParams::Bn { running_mean, .. }, ParamRole::RunningMean) => Some(running_mean),
            (LayerParams::Bn { running_var, .. }, ParamRole::RunningVar) => Some(running_var),
            _ => None,
        }
    }

    fn cast<U: Real>(&self) -> LayerParams<U> {
        match self {
            LayerParams::None => LayerParams::None,
            LayerParams::Conv { weight } => LayerParams::Conv { weight: weight.cast() },
            LayerParams::Bn {
                gamma,
                beta,
                running_mean,
                running_var,
            } => LayerParams::Bn {
                gamma: gamma.cast(),
                beta: beta.cast(),
                running_mean: running_mean.cast(),
                running_var: running_var.cast(),
            },
            LayerParams::Linear { weight, bias } => LayerParams::Linear {
                weight: weight.cast(),
                bias: bias.cast(),
            },
        }
    }
}

/// Serializable description of a network's topology.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub name: String,
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
}

/// A network: topology plus parameters.
#[derive(Clone, Debug)]
pub struct ModelGraph<T: Real = f32> {
    arch: Architecture,
    params: Vec<LayerParams<T>>,
    prunable: Vec<PrunableLayer>,
}

/// Graph leaves for the trainable tensors of one layer.
#[derive(Clone, Copy, Debug, Default)]
pub struct LayerVars {
    pub weight: Option<Var>,
    pub bias: Option<Var>,
    pub gamma: Option<Var>,
    pub beta: Option<Var>,
}

impl LayerVars {
    pub fn get(&self, role: ParamRole) -> Option<Var> {
        match role {
            ParamRole::Weight => self.weight,
            ParamRole::Bias => self.bias,
            ParamRole::Gamma => self.gamma,
            ParamRole::Beta => self.beta,
            _ => None,
        }
    }
}

/// Parameters of a [`ModelGraph`] recorded on a [`Graph`].
#[derive(Clone, Debug)]
pub struct Bound {
    pub layers: Vec<LayerVars>,
}

/// Result of a forward pass.
pub struct ForwardPass<T> {
    pub logits: Var,
    /// Train-mode batch statistics of each batch-norm layer.
    pub bn_stats: Vec<(usize, BatchStats<T>)>,
    /// Output of every layer, masks applied.
    pub outputs: Vec<Var>,
}

impl<T: Real> ModelGraph<T> {
    /// Validates `arch` against `params` and derives the prunable layers.
    pub fn from_parts(arch: Architecture, params: Vec<LayerParams<T>>) -> Result<Self> {
        if arch.layers.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} layers but {} parameter sets",
                arch.layers.len(),
                params.len()
            )));
        }
        validate(&arch)?;
        for (spec, p) in arch.layers.iter().zip(&params) {
            check_params(spec, p)?;
        }
        let prunable = find_prunable(&arch)?;
        Ok(ModelGraph { arch, params, prunable })
    }

    /// Fresh parameters for `arch`: He-normal convolutions, uniform linear
    /// layers, identity batch norms.
    pub fn initialize(arch: Architecture, rng: &mut impl Rng) -> Result<Self> {
        let params = arch
            .layers
            .iter()
            .map(|l| init_params(l, rng))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(arch, params)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn name(&self) -> &str {
        &self.arch.name
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.arch.layers
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.arch.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn params(&self) -> &[LayerParams<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [LayerParams<T>] {
        &mut self.params
    }

    pub fn prunable(&self) -> &[PrunableLayer] {
        &self.prunable
    }

    /// Channel counts `C_i` of the prunable layers.
    pub fn prunable_channels(&self) -> Vec<usize> {
        self.prunable.iter().map(|p| p.channels).collect()
    }

    pub fn conv_weight(&self, layer: usize) -> Option<&Tensor<T>> {
        match &self.params[layer] {
            LayerParams::Conv { weight } => Some(weight),
            _ => None,
        }
    }

    /// Number of trainable scalars.
    pub fn num_parameters(&self) -> usize {
        self.params
            .iter()
            .flat_map(|p| p.tensors())
            .filter(|(role, _)| role.is_trainable())
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ModelGraph<U> {
        ModelGraph {
            arch: self.arch.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
            prunable: self.prunable.clone(),
        }
    }

    /// Records every trainable tensor as a leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph<T>, requires_grad: bool) -> Bound {
        let layers = self
            .params
            .iter()
            .map(|p| {
                let mut vars = LayerVars::default();
                for (role, t) in p.tensors() {
                    if !role.is_trainable() {
                        continue;
                    }
                    let v = graph.leaf(t.clone(), requires_grad);
                    match role {
                        ParamRole::Weight => vars.weight = Some(v),
                        ParamRole::Bias => vars.bias = Some(v),
                        ParamRole::Gamma => vars.gamma = Some(v),
                        ParamRole::Beta => vars.beta = Some(v),
                        _ => {}
                    }
                }
                vars
            })
            .collect();
        Bound { layers }
    }

    /// Executes the network on `input` (`[N, C, H, W]`).
    ///
    /// `masks`, when given, holds one `[C_i]` channel multiplier per
    /// prunable layer, applied after that layer's batch norm and ReLU.
    pub fn forward(
        &self,
        graph: &mut Graph<T>,
        bound: &Bound,
        input: Var,
        masks: Option<&[Var]>,
        mode: BatchNormMode,
    ) -> Result<ForwardPass<T>> {
        let xs = graph.shape(input);
        if xs.len() != 4 || xs[1..] != self.arch.input_shape {
            return Err(Error::shape("forward input", xs, &self.arch.input_shape));
        }
        if let Some(m) = masks {
            if m.len() != self.prunable.len() {
                return Err(Error::MaskMismatch(format!(
                    "{} masks for {} prunable layers",
                    m.len(),
                    self.prunable.len()
                )));
            }
            for (p, &v) in self.prunable.iter().zip(m) {
                if graph.value(v).len() != p.channels {
                    return Err(Error::MaskMismatch(format!(
                        "layer {} has {} channels, mask has {}",
                        p.conv,
                        p.channels,
                        graph.value(v).len()
                    )));
                }
            }
        }

        let mut outs: Vec<Var> = Vec::with_capacity(self.arch.layers.len());
        let mut bn_stats = Vec::new();
        for (spec, (params, vars)) in self.arch.layers.iter().zip(self.params.iter().zip(&bound.layers)) {
            let x = spec.inputs.first().map_or(input, |&i| outs[i]);
            let mut y = match spec.kind {
                LayerKind::Conv => graph.conv2d(x, need(vars.weight)?, spec.stride, spec.padding)?,
                LayerKind::Bn => {
                    let LayerParams::Bn {
                        running_mean,
                        running_var,
                        ..
                    } = params
                    else {
                        return Err(Error::InvalidArgument(format!("layer {} lacks bn params", spec.id)));
                    };
                    let (y, stats) = graph.batch_norm2d(
                        x,
                        need(vars.gamma)?,
                        need(vars.beta)?,
                        (running_mean.data(), running_var.data()),
                        mode,
                        T::of(BN_EPS),
                    )?;
                    if let Some(s) = stats {
                        bn_stats.push((spec.id, s));
                    }
                    y
                }
                LayerKind::Relu => graph.relu(x)?,
                LayerKind::Pool => {
                    let kind = spec.pooling.unwrap_or(Pooling::Max).into();
                    graph.pool2d(x, kind, spec.window)?
                }
                LayerKind::Linear => {
                    let flat = graph.flatten(x)?;
                    graph.linear(flat, need(vars.weight)?, need(vars.bias)?)?
                }
                LayerKind::Add => graph.add(x, outs[spec.inputs[1]])?,
            };
            if let Some(m) = masks {
                if let Some(j) = self.prunable.iter().position(|p| p.mask_site == spec.id) {
                    y = graph.channel_scale(y, m[j])?;
                }
            }
            outs.push(y);
        }
        Ok(ForwardPass {
            logits: *outs.last().ok_or(Error::EmptyDataset)?,
            bn_stats,
            outputs: outs,
        })
    }

    /// Eval-mode logits without recording gradients.
    pub fn predict(&self, input: &Tensor<T>, masks: Option<&[Vec<T>]>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.constant(input.clone());
        let mask_vars = masks.map(|ms| {
            ms.iter()
                .map(|m| g.constant(Tensor::from_fn([m.len()], |i| m[i])))
                .collect::<Vec<_>>()
        });
        let pass = self.forward(&mut g, &bound, x, mask_vars.as_deref(), BatchNormMode::Eval)?;
        Ok(g.value(pass.logits).clone())
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[(usize, BatchStats<T>)], momentum: f64) {
        let m = T::of(momentum);
        for (layer, s) in stats {
            if let LayerParams::Bn {
                running_mean,
                running_var,
                ..
            } = &mut self.params[*layer]
            {
                let unbias = if s.count > 1 {
                    T::of(s.count as f64 / (s.count - 1) as f64)
                } else {
                    T::one()
                };
                for (r, &v) in running_mean.data_mut().iter_mut().zip(&s.mean) {
                    *r = (T::one() - m) * *r + m * v;
                }
                for (r, &v) in running_var.data_mut().iter_mut().zip(&s.var) {
                    *r = (T::one() - m) * *r + m * v * unbias;
                }
            }
        }
    }

    /// Forward FLOPs `P_i` of every layer.
    pub fn layer_flops(&self) -> Vec<u64> {
        self.arch.layers.iter().map(|l| l.flops).collect()
    }

    pub fn total_flops(&self) -> u64 {
        self.arch.layers.iter().map(|l| l.flops).sum()
    }

    /// FLOPs `P_i` of the prunable layers, in prunable order.
    pub fn prunable_flops(&self) -> Vec<u64> {
        self.prunable.iter().map(|p| self.arch.layers[p.conv].flops).collect()
    }

    /// Surviving output channels of every layer when each prunable layer
    /// keeps only `kept[j]` (original channel ids, ascending).
    pub fn propagate_channels(&self, kept: &[Vec<usize>]) -> Result<Vec<Vec<usize>>> {
        if kept.len() != self.prunable.len() {
            return Err(Error::MaskMismatch(format!(
                "{} kept sets for {} prunable layers",
                kept.len(),
                self.prunable.len()
            )));
        }
        let mut out: Vec<Vec<usize>> = Vec::with_capacity(self.arch.layers.len());
        for spec in &self.arch.layers {
            let from_input = |i: usize| out[spec.inputs[i]].clone();
            let channels = match spec.kind {
                LayerKind::Conv => match self.prunable.iter().position(|p| p.conv == spec.id) {
                    Some(j) => {
                        let set = &kept[j];
                        if set.is_empty()
                            || set.len() > spec.out_channels
                            || set.iter().any(|&c| c >= spec.out_channels)
                            || set.windows(2).any(|w| w[0] >= w[1])
                        {
                            return Err(Error::InvalidArgument(format!(
                                "kept channels {set:?} invalid for layer {} with {} channels",
                                spec.id, spec.out_channels
                            )));
                        }
                        set.clone()
                    }
                    None => (0..spec.out_channels).collect(),
                },
                LayerKind::Bn | LayerKind::Relu | LayerKind::Pool => {
                    if spec.inputs.is_empty() {
                        (0..spec.out_channels).collect()
                    } else {
                        from_input(0)
                    }
                }
                LayerKind::Linear => (0..spec.out_channels).collect(),
                LayerKind::Add => {
                    let (a, b) = (from_input(0), from_input(1));
                    if a != b {
                        return Err(Error::ResidualAlignment(spec.id));
                    }
                    a
                }
            };
            out.push(channels);
        }
        Ok(out)
    }

    /// Total FLOPs when prunable layer `j` keeps `kept[j]` channels; each
    /// convolution sees its predecessor's reduced width as input.
    pub fn exact_model_flops(&self, kept: &[usize]) -> Result<u64> {
        if kept.len() != self.prunable.len() {
            return Err(Error::MaskMismatch(format!(
                "{} kept counts for {} prunable layers",
                kept.len(),
                self.prunable.len()
            )));
        }
        for (p, &k) in self.prunable.iter().zip(kept) {
            if k == 0 || k > p.channels {
                return Err(Error::InvalidArgument(format!(
                    "kept count {k} outside [1, {}] for layer {}",
                    p.channels, p.conv
                )));
            }
        }
        let sets: Vec<Vec<usize>> = kept.iter().map(|&k| (0..k).collect()).collect();
        let channels = self.propagate_channels(&sets)?;
        let mut total = 0u64;
        for spec in &self.arch.layers {
            let cin = match spec.inputs.first() {
                Some(&i) => channels[i].len(),
                None => self.arch.input_shape[0],
            };
            total += match spec.kind {
                LayerKind::Conv => spec.conv_flops(cin, channels[spec.id].len()),
                LayerKind::Linear => {
                    let prev = &self.arch.layers[spec.inputs[0]].out_shape;
                    2 * (cin * prev[1] * prev[2] * spec.out_channels) as u64
                }
                _ => 0,
            };
        }
        Ok(total)
    }

    /// Plain-text summary table, one row per layer.
    pub fn describe(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "model {}  input {:?}  classes {}  params {}  flops {}",
            self.arch.name,
            self.arch.input_shape,
            self.arch.num_classes,
            self.num_parameters(),
            self.total_flops()
        );
        let _ = writeln!(
            s,
            "{:>3}  {:<6} {:<8} {:>5} {:>5} {:>6} {:>14} {:>12}  prunable",
            "id", "kind", "inputs", "in", "out", "kernel", "output", "flops"
        );
        for l in &self.arch.layers {
            let inputs = if l.inputs.is_empty() {
                "input".to_string()
            } else {
                l.inputs.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
            };
            let kernel = match l.kind {
                LayerKind::Conv => format!("{}x{}", l.kernel.0, l.kernel.1),
                LayerKind::Pool => format!(
                    "{}{}",
                    if l.pooling == Some(Pooling::Avg) { "a" } else { "m" },
                    l.window
                ),
                _ => "-".into(),
            };
            let _ = writeln!(
                s,
                "{:>3}  {:<6} {:<8} {:>5} {:>5} {:>6} {:>14} {:>12}  {}",
                l.id,
                format!("{:?}", l.kind).to_lowercase(),
                inputs,
                l.in_channels,
                l.out_channels,
                kernel,
                format!("{:?}", l.out_shape),
                l.flops,
                if l.prunable { "yes" } else { "" }
            );
        }
        s
    }
}

fn need(v: Option<Var>) -> Result<Var> {
    v.ok_or_else(|| Error::InvalidArgument("layer parameter not bound".into()))
}

fn validate(arch: &Architecture) -> Result<()> {
    if arch.layers.is_empty() {
        return Err(Error::InvalidArgument("model has no layers".into()));
    }
    let mut consumers = vec![0usize; arch.layers.len()];
    for (pos, l) in arch.layers.iter().enumerate() {
        if l.id != pos {
            return Err(Error::InvalidArgument(format!(
                "layer at position {pos} has id {}",
                l.id
            )));
        }
        let arity = if l.kind == LayerKind::Add { 2 } else { 1 };
        if l.inputs.len() > arity || (l.kind == LayerKind::Add && l.inputs.len() != 2) {
            return Err(Error::InvalidArgument(format!(
                "layer {pos} has {} inputs",
                l.inputs.len()
            )));
        }
        for &i in &l.inputs {
            if i >= pos {
                return Err(Error::InvalidArgument(format!("layer {pos} reads later layer {i}")));
            }
            consumers[i] += 1;
            let src = arch.layers[i].out_shape[0];
            if l.kind != LayerKind::Linear && src != l.in_channels {
                return Err(Error::InvalidArgument(format!(
                    "layer {pos} expects {} channels, layer {i} produces {src}",
                    l.in_channels
                )));
            }
        }
        if l.inputs.is_empty() && l.in_channels != arch.input_shape[0] {
            return Err(Error::InvalidArgument(format!(
                "layer {pos} does not match the input channels"
            )));
        }
        if l.kind == LayerKind::Add {
            let (a, b) = (&arch.layers[l.inputs[0]].out_shape, &arch.layers[l.inputs[1]].out_shape);
            if a != b {
                return Err(Error::InvalidArgument(format!("add {pos} joins {a:?} and {b:?}")));
            }
        }
    }
    let last = arch.layers.len() - 1;
    if consumers[..last].contains(&0) || consumers[last] != 0 {
        return Err(Error::InvalidArgument("graph must have exactly one output".into()));
    }
    Ok(())
}

fn find_prunable(arch: &Architecture) -> Result<Vec<PrunableLayer>> {
    let consumers = |id: usize| -> Vec<&LayerSpec> { arch.layers.iter().filter(|l| l.inputs.contains(&id)).collect() };
    let mut out = Vec::new();
    for l in arch.layers.iter().filter(|l| l.prunable) {
        let bad = || Error::InvalidArgument(format!("prunable layer {} must feed exactly bn -> relu", l.id));
        if l.kind != LayerKind::Conv {
            return Err(bad());
        }
        let bn = match consumers(l.id).as_slice() {
            [b] if b.kind == LayerKind::Bn => b.id,
            _ => return Err(bad()),
        };
        let relu = match consumers(bn).as_slice() {
            [r] if r.kind == LayerKind::Relu => r.id,
            _ => return Err(bad()),
        };
        out.push(PrunableLayer {
            conv: l.id,
            bn,
            mask_site: relu,
            channels: l.out_channels,
        });
    }
    Ok(out)
}

fn check_params<T: Real>(spec: &LayerSpec, p: &LayerParams<T>) -> Result<()> {
    let expect: Vec<(ParamRole, Vec<usize>)> = match spec.kind {
        LayerKind::Conv => vec![(
            ParamRole::Weight,
            vec![spec.out_channels, spec.in_channels, spec.kernel.0, spec.kernel.1],
        )],
        LayerKind::Bn => [
            ParamRole::Gamma,
            ParamRole::Beta,
            ParamRole::RunningMean,
            ParamRole::RunningVar,
        ]
        .into_iter()
        .map(|r| (r, vec![spec.out_channels]))
        .collect(),
        LayerKind::Linear => vec![
            (ParamRole::Weight, vec![spec.in_channels, spec.out_channels]),
            (ParamRole::Bias, vec![spec.out_channels]),
        ],
        _ => vec![],
    };
    let got = p.tensors();
    let ok = got.len() == expect.len()
        && got
            .iter()
            .zip(&expect)
            .all(|((r, t), (er, es))| r == er && t.shape() == es.as_slice());
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "parameters of layer {} do not match its {:?} spec",
            spec.id, spec.kind
        )))
    }
}

fn init_params<T: Real>(spec: &LayerSpec, rng: &mut impl Rng) -> Result<LayerParams<T>> {
    Ok(match spec.kind {
        LayerKind::Conv => {
            let fan_in = spec.in_channels * spec.kernel.0 * spec.kernel.1;
            let normal =
                Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            LayerParams::Conv {
                weight: Tensor::from_fn(
                    [spec.out_channels, spec.in_channels, spec.kernel.0, spec.kernel.1],
                    |_| T::of(normal.sample(rng)),
                ),
            }
        }
        LayerKind::Bn => LayerParams::Bn {
            gamma: Tensor::ones([spec.out_channels]),
            beta: Tensor::zeros([spec.out_channels]),
            running_mean: Tensor::zeros([spec.out_channels]),
            running_var: Tensor::ones([spec.out_channels]),
        },
        LayerKind::Linear => {
            let bound = 1.0 / (spec.in_channels as f64).sqrt();
            LayerParams::Linear {
                weight: Tensor::from_fn([spec.in_channels, spec.out_channels], |_| {
                    T::of(rng.random_range(-bound..bound))
                }),
                bias: Tensor::from_fn([spec.out_channels], |_| T::of(rng.random_range(-bound..bound))),
            }
        }
        _ => LayerParams::None,
    })
}

#[cfg(test)]
mod tests;
