//! Plain supervised training: SGD, accuracy, and an epoch loop shared by
//! pretraining and fine-tuning.

use serde::{Deserialize, Serialize};

use crate::data::{batches, Augment, Dataset};
use crate::error::{Error, Result};
use crate::model::{ModelGraph, BN_MOMENTUM};
use crate::objective::{count_correct, total_loss, GradRequest, LayerGrads};
use crate::rng::substream;
use crate::search::cosine_lr;
use crate::tensor::{BatchNormMode, Real};

/// SGD with optional momentum and L2 weight decay.
///
/// With both at zero a step is exactly `w - lr * g`, so a zero gradient
/// leaves a weight bit-identical.
#[derive(Clone, Debug)]
pub struct Sgd<T: Real = f32> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<Vec<T>>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn plain() -> Self {
        Self::new(0.0, 0.0)
    }

    pub fn step(&mut self, model: &mut ModelGraph<T>, grads: &[LayerGrads<T>], lr: f64) -> Result<()> {
        if grads.len() != model.params().len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradient sets for {} layers",
                grads.len(),
                model.params().len()
            )));
        }
        let heavy = self.momentum != 0.0;
        if heavy && self.velocity.is_empty() {
            self.velocity = grads
                .iter()
                .map(|g| g.iter().map(|(_, t)| vec![T::zero(); t.len()]).collect())
                .collect();
        }
        let (lr, mu, wd) = (T::of(lr), T::of(self.momentum), T::of(self.weight_decay));
        for (layer, (params, layer_grads)) in model.params_mut().iter_mut().zip(grads).enumerate() {
            for (slot, (role, g)) in layer_grads.iter().enumerate() {
                let w = params
                    .tensor_mut(*role)
                    .ok_or_else(|| Error::InvalidArgument(format!("layer {layer} has no {}", role.as_str())))?;
                if w.shape() != g.shape() {
                    return Err(Error::shape("sgd", w.shape(), g.shape()));
                }
                let decay = self.weight_decay != 0.0 && *role == crate::model::ParamRole::Weight;
                if heavy {
                    let v = &mut self.velocity[layer][slot];
                    for ((wi, &gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                        let gi = if decay { gi + wd * *wi } else { gi };
                        *vi = mu * *vi + gi;
                        *wi = *wi - lr * *vi;
                    }
                } else {
                    for (wi, &gi) in w.data_mut().iter_mut().zip(g.data()) {
                        let gi = if decay { gi + wd * *wi } else { gi };
                        *wi = *wi - lr * gi;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Eval-mode top-1 accuracy of `model` on `data`, with optional per-layer
/// channel masks.
pub fn accuracy<T: Real>(
    model: &ModelGraph<T>,
    data: &Dataset<T>,
    masks: Option<&[Vec<T>]>,
    batch_size: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk)?;
        correct += count_correct(&model.predict(&x, masks)?, &y);
    }
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Set from the run's seed, never from a config file.
    #[serde(skip)]
    pub seed: u64,
    #[serde(default)]
    pub augment: Augment,
}

impl Default for TrainConfig {
    /// Baseline training: 5 epochs, cosine 0.1 to 0.001, momentum 0.9.
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 64,
            lr_max: 0.1,
            lr_min: 0.001,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            augment: Augment::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_acc: f64,
    /// Accuracy on the held-out split, when one was given.
    pub val_acc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<EpochLog>,
    /// Held-out accuracy of the returned weights.
    pub best_val: Option<f64>,
    /// Epoch that produced the returned weights; 0 means the input weights.
    pub best_epoch: usize,
}

/// Cross-entropy SGD on `train` under a single cosine period.
///
/// With `val`, the weights with the best held-out accuracy are kept,
/// starting from the input weights, so the result is never worse on `val`
/// than what was passed in.
///
/// A non-finite loss aborts with [`Error::Diverged`]; `model` is then
/// left holding the best weights so far (or, without `val`, those from
/// the end of the last finished epoch).
pub fn fit<T: Real>(
    model: &mut ModelGraph<T>,
    train: &Dataset<T>,
    val: Option<&Dataset<T>>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let per_epoch = train.len().div_ceil(cfg.batch_size.max(1));
    let total = (per_epoch * cfg.epochs).max(1);
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut aug_rng = substream(cfg.seed, "augment");

    let mut best_val = match val {
        Some(v) => Some(accuracy(model, v, None, 256)?),
        None => None,
    };
    let mut best_model = val.map(|_| model.clone());
    let mut best_epoch = 0;
    // Without a held-out split the fallback is simply the last finished epoch.
    let mut last_epoch = val.is_none().then(|| model.clone());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0, 0);
        let mut lr = cfg.lr_max;
        for batch in batches(train.len(), cfg.batch_size, cfg.seed, epoch)? {
            lr = cosine_lr(step, total, cfg.lr_max, cfg.lr_min)?;
            let (mut x, y) = train.batch(&batch)?;
            cfg.augment.apply(&mut x, &mut aug_rng);
            let eval = match total_loss(
                model,
                None,
                0.0,
                1.0,
                &x,
                &y,
                GradRequest::WEIGHTS,
                BatchNormMode::Train,
            ) {
                Err(Error::NonFinite(what)) => {
                    let restored_epoch = match (best_model.take(), last_epoch.take()) {
                        (Some(m), _) => {
                            *model = m;
                            best_epoch
                        }
                        (None, Some(m)) => {
                            *model = m;
                            epoch
                        }
                        (None, None) => unreachable!("one fallback is always kept"),
                    };
                    return Err(Error::Diverged {
                        epoch: epoch + 1,
                        step,
                        what,
                        restored_epoch,
                    });
                }
                r => r?,
            };
            let grads = eval.weight_grads.as_deref().unwrap_or_default();
            sgd.step(model, grads, lr)?;
            model.update_running_stats(&eval.bn_stats, BN_MOMENTUM);
            loss_sum += eval.loss.ce * y.len() as f64;
            correct += eval.correct;
            seen += y.len();
            step += 1;
        }
        let val_acc = match val {
            Some(v) => Some(accuracy(model, v, None, 256)?),
            None => None,
        };
        if let (Some(acc), Some(best)) = (val_acc, best_val) {
            if acc > best {
                best_val = Some(acc);
                best_model = Some(model.clone());
                best_epoch = epoch + 1;
            }
        }
        let log = EpochLog {
            epoch: epoch + 1,
            lr,
            loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            val_acc,
        };
        if val.is_none() {
            last_epoch = Some(model.clone());
        }
        on_epoch(&log);
        history.push(log);
    }
    match best_model {
        Some(m) => *model = m,
        None => best_epoch = cfg.epochs,
    }
    Ok(TrainReport {
        history,
        best_val,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng as _, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::Split;
    use crate::model::{cnn_small, Architecture, LayerKind, LayerParams, LayerSpec};
    use crate::tensor::Tensor;

    /// A single linear layer on a 1x1x3 input.
    fn linear_model() -> ModelGraph<f64> {
        let spec = LayerSpec {
            id: 0,
            kind: LayerKind::Linear,
            inputs: vec![],
            in_channels: 3,
            out_channels: 2,
            kernel: (0, 0),
            stride: 1,
            padding: 0,
            pooling: None,
            window: 0,
            prunable: false,
            out_shape: [2, 1, 1],
            flops: 12,
        };
        let arch = Architecture {
            name: "linear".into(),
            input_shape: [3, 1, 1],
            num_classes: 2,
            layers: vec![spec],
        };
        let params = vec![LayerParams::Linear {
            weight: Tensor::new([3, 2], vec![0.1, -0.2, 0.3, 0.0, -0.1, 0.2]).unwrap(),
            bias: Tensor::new([2], vec![0.05, -0.05]).unwrap(),
        }];
        ModelGraph::from_parts(arch, params).unwrap()
    }

    #[test]
    fn sgd_step_matches_hand_update() {
        let mut m = linear_model();
        let before = m.params()[0].clone();
        let grads = vec![vec![
            (
                crate::model::ParamRole::Weight,
                Tensor::new([3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
            ),
            (
                crate::model::ParamRole::Bias,
                Tensor::new([2], vec![-1.0, 1.0]).unwrap(),
            ),
        ]];
        Sgd::plain().step(&mut m, &grads, 0.5).unwrap();
        let LayerParams::Linear { weight, bias } = &m.params()[0] else {
            unreachable!()
        };
        let LayerParams::Linear { weight: w0, bias: b0 } = &before else {
            unreachable!()
        };
        for i in 0..6 {
            assert_eq!(weight.data()[i], w0.data()[i] - 0.5 * grads[0][0].1.data()[i]);
        }
        assert_eq!(bias.data(), &[b0.data()[0] + 0.5, b0.data()[1] - 0.5]);

        // zero learning rate leaves everything untouched
        let snapshot = m.params()[0].clone();
        Sgd::plain().step(&mut m, &grads, 0.0).unwrap();
        assert_eq!(m.params()[0], snapshot);
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut m = linear_model();
        let g = vec![vec![
            (crate::model::ParamRole::Weight, Tensor::full([3, 2], 1.0)),
            (crate::model::ParamRole::Bias, Tensor::full([2], 0.0)),
        ]];
        let w0 = m.params()[0].tensors()[0].1.data()[0];
        let mut opt = Sgd::new(0.9, 0.0);
        opt.step(&mut m, &g, 0.1).unwrap();
        opt.step(&mut m, &g, 0.1).unwrap();
        let w = m.params()[0].tensors()[0].1.data()[0];
        assert!((w - (w0 - 0.1 - 0.1 * 1.9)).abs() < 1e-12);
    }

    fn toy_data(n: usize, seed: u64) -> Dataset<f32> {
        // class = which half of the image is brighter
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let images = Tensor::from_fn([n, 1, 8, 8], |i| {
            let (img, px) = (i / 64, i % 64);
            let top = px < 32;
            let bright = (labels[img] == 0) == top;
            (if bright { 1.0 } else { -1.0 }) + rng.random_range(-0.5..0.5)
        });
        Dataset::new(images, labels, 2, Split::Train).unwrap()
    }

    #[test]
    fn fit_learns_a_separable_toy_task() {
        let arch = cnn_small(2, [1, 8, 8], [4, 4, 4, 4]).unwrap();
        let mut m: ModelGraph = ModelGraph::initialize(arch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let train = toy_data(128, 2);
        let val = toy_data(64, 3);
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 16,
            lr_max: 0.1,
            lr_min: 0.001,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 5,
            augment: Augment::default(),
        };
        let mut seen = 0;
        let report = fit(&mut m, &train, Some(&val), &cfg, |_| seen += 1).unwrap();
        assert_eq!(seen, 4);
        assert!(report.best_val.unwrap() > 0.9, "{:?}", report.history);
        // the returned weights are the best ones
        assert_eq!(accuracy(&m, &val, None, 32).unwrap(), report.best_val.unwrap());
        let first = report.history.first().unwrap().loss;
        assert!(report.history.last().unwrap().loss < first);
    }

    #[test]
    fn zero_epochs_returns_input_weights() {
        let arch = cnn_small(2, [1, 8, 8], [4, 4, 4, 4]).unwrap();
        let mut m: ModelGraph = ModelGraph::initialize(arch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let before = m.params().to_vec();
        let cfg = TrainConfig {
            epochs: 0,
            batch_size: 16,
            lr_max: 0.1,
            lr_min: 0.001,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 5,
            augment: Augment::default(),
        };
        let val = toy_data(32, 3);
        let r = fit(&mut m, &toy_data(32, 2), Some(&val), &cfg, |_| {}).unwrap();
        assert_eq!(m.params(), before.as_slice());
        assert_eq!(r.best_epoch, 0);
        assert!(r.history.is_empty());
    }

    #[test]
    fn divergence_restores_last_good_weights() {
        let arch = cnn_small(2, [1, 8, 8], [4, 4, 4, 4]).unwrap();
        let m0: ModelGraph = ModelGraph::initialize(arch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 16,
            lr_max: 1e300,
            lr_min: 1e300,
            momentum: 0.0,
            weight_decay: 0.0,
            seed: 5,
            augment: Augment::default(),
        };
        let (train, val) = (toy_data(64, 2), toy_data(32, 3));
        for v in [None, Some(&val)] {
            let mut m = m0.clone();
            match fit(&mut m, &train, v, &cfg, |_| {}) {
                Err(Error::Diverged {
                    epoch, restored_epoch, ..
                }) => {
                    assert_eq!((epoch, restored_epoch), (1, 0));
                }
                other => panic!("expected divergence, got {other:?}"),
            }
            assert_eq!(m.params(), m0.params());
        }
    }
}
