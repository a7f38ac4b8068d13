//! Cross-entropy plus FLOPs cost, and gradients of both.
//!
//! `Cost(R) = (sum P_i R_i / sum P_i)^beta`; the total loss of a batch is
//! `CE + alpha * Cost(R)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{build_masks, ratio_grad, LayerRanking};
use crate::model::{ModelGraph, ParamRole};
use crate::tensor::{BatchNormMode, BatchStats, Graph, Real, Tensor};

pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_BETA: f64 = 0.3;

fn check_cost_args(r: &[f64], p: &[u64], beta: f64) -> Result<f64> {
    if r.len() != p.len() {
        return Err(Error::MaskMismatch(format!(
            "{} ratios for {} FLOPs entries",
            r.len(),
            p.len()
        )));
    }
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!("beta must be > 0, got {beta}")));
    }
    if let Some(&bad) = r.iter().find(|&&v| !(v > 0.0 && v <= 1.0)) {
        return Err(Error::RatioOutOfRange(bad));
    }
    let total: f64 = p.iter().map(|&v| v as f64).sum();
    if total == 0.0 {
        return Err(Error::ZeroFlops);
    }
    Ok(total)
}

/// FLOPs-weighted mean ratio, `sum P_i R_i / sum P_i`.
pub fn flops_fraction(r: &[f64], p: &[u64]) -> Result<f64> {
    let total = check_cost_args(r, p, 1.0)?;
    Ok(r.iter().zip(p).map(|(&ri, &pi)| ri * pi as f64).sum::<f64>() / total)
}

pub fn cost_r(r: &[f64], p: &[u64], beta: f64) -> Result<f64> {
    check_cost_args(r, p, beta)?;
    Ok(flops_fraction(r, p)?.powf(beta))
}

/// `dCost/dR_i = beta * base^(beta - 1) * P_i / sum P`.
pub fn cost_r_grad(r: &[f64], p: &[u64], beta: f64) -> Result<Vec<f64>> {
    let total = check_cost_args(r, p, beta)?;
    let base = flops_fraction(r, p)?;
    if base == 0.0 && beta < 1.0 {
        return Err(Error::SingularCost);
    }
    let scale = beta * base.powf(beta - 1.0);
    Ok(p.iter().map(|&pi| scale * pi as f64 / total).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub cost: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LossBreakdown {
    pub fn new(ce: f64, cost: f64, alpha: f64, beta: f64) -> Self {
        LossBreakdown {
            ce,
            cost,
            total: ce + alpha * cost,
            alpha,
            beta,
        }
    }
}

/// Ratios and rankings that define the masks of a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Masking<'a> {
    pub ratios: &'a [f64],
    pub rankings: &'a [LayerRanking],
    /// `P_i` of the prunable layers.
    pub flops: &'a [u64],
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GradRequest {
    pub weights: bool,
    pub ratios: bool,
}

impl GradRequest {
    pub const NONE: GradRequest = GradRequest {
        weights: false,
        ratios: false,
    };
    pub const WEIGHTS: GradRequest = GradRequest {
        weights: true,
        ratios: false,
    };
    pub const RATIOS: GradRequest = GradRequest {
        weights: false,
        ratios: true,
    };
}

/// Gradients of the trainable tensors of one layer.
pub type LayerGrads<T> = Vec<(ParamRole, Tensor<T>)>;

pub struct BatchEval<T> {
    pub loss: LossBreakdown,
    pub correct: usize,
    pub logits: Tensor<T>,
    /// Aligned with the model's layers.
    pub weight_grads: Option<Vec<LayerGrads<T>>>,
    /// `dTotal/dR_i`: mask path plus `alpha * dCost/dR_i`.
    pub ratio_grads: Option<Vec<f64>>,
    /// Prunable layers whose `R*C` sat on an integer.
    pub kinks: Vec<bool>,
    pub bn_stats: Vec<(usize, BatchStats<T>)>,
}

/// Number of rows of `logits` (`[N, K]`) whose arg-max equals the label.
pub fn count_correct<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            best == y
        })
        .count()
}

/// Forward pass of one batch and the requested gradients of
/// `CE + alpha * Cost(R)`.
///
/// Without `masking` the network runs unmasked and `Cost` is 1.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Real>(
    model: &ModelGraph<T>,
    masking: Option<Masking<'_>>,
    alpha: f64,
    beta: f64,
    images: &Tensor<T>,
    labels: &[usize],
    want: GradRequest,
    mode: BatchNormMode,
) -> Result<BatchEval<T>> {
    if want.ratios && masking.is_none() {
        return Err(Error::InvalidArgument("ratio gradients need a masking".into()));
    }
    let mut g = Graph::new();
    let bound = model.bind(&mut g, want.weights);
    let x = g.constant(images.clone());

    let (cost, mask_vars) = match masking {
        Some(m) => {
            let masks = build_masks(m.ratios, m.rankings)?;
            let vars: Vec<_> = masks
                .iter()
                .map(|mask| {
                    let t = Tensor::from_fn([mask.channels()], |i| T::of(mask.mask_by_channel[i]));
                    g.leaf(t, want.ratios)
                })
                .collect();
            (cost_r(m.ratios, m.flops, beta)?, Some(vars))
        }
        None => (1.0, None),
    };

    let pass = model.forward(&mut g, &bound, x, mask_vars.as_deref(), mode)?;
    let ce = g.softmax_cross_entropy(pass.logits, labels)?;
    let ce_value = g.value(ce).item().to_f64().unwrap_or(f64::NAN);
    if !ce_value.is_finite() {
        return Err(Error::NonFinite(format!("cross-entropy {ce_value}")));
    }
    let logits = g.value(pass.logits).clone();
    let correct = count_correct(&logits, labels);
    let loss = LossBreakdown::new(ce_value, cost, alpha, beta);

    let mut eval = BatchEval {
        loss,
        correct,
        logits,
        weight_grads: None,
        ratio_grads: None,
        kinks: vec![false; model.prunable().len()],
        bn_stats: pass.bn_stats,
    };
    if !want.weights && !want.ratios {
        return Ok(eval);
    }

    // the cost term is constant in W, so backward runs on the CE alone
    let grads = g.backward(ce)?;
    if want.weights {
        let per_layer = bound
            .layers
            .iter()
            .map(|vars| {
                [ParamRole::Weight, ParamRole::Bias, ParamRole::Gamma, ParamRole::Beta]
                    .into_iter()
                    .filter_map(|role| {
                        let v = vars.get(role)?;
                        Some((role, grads.get(v)?.clone()))
                    })
                    .collect()
            })
            .collect();
        eval.weight_grads = Some(per_layer);
    }
    if let (true, Some(m), Some(vars)) = (want.ratios, masking, mask_vars) {
        let cost_grad = cost_r_grad(m.ratios, m.flops, beta)?;
        let mut out = Vec::with_capacity(vars.len());
        for (j, v) in vars.iter().enumerate() {
            let dm: Vec<f64> = grads
                .get(*v)
                .map(|t| t.data().iter().map(|d| d.to_f64().unwrap_or(f64::NAN)).collect())
                .unwrap_or_else(|| vec![0.0; m.rankings[j].channels()]);
            let (mask_path, kink) = ratio_grad(m.ratios[j], &m.rankings[j], &dm)?;
            eval.kinks[j] = kink;
            let total = mask_path + alpha * cost_grad[j];
            if !total.is_finite() {
                return Err(Error::NonFinite(format!("ratio gradient of layer {j}")));
            }
            out.push(total);
        }
        eval.ratio_grads = Some(out);
    }
    Ok(eval)
}
