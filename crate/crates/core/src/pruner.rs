//! Turning searched ratios into a smaller network.
//!
//! A [`PruningPlan`] fixes how many channels each prunable convolution keeps
//! and which ones; [`export_pruned`] slices the weights accordingly, and the
//! checkpoint functions store a model as a JSON manifest plus raw
//! little-endian `f32` tensors.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Augment;
use crate::error::{Error, Result};
use crate::masking::LayerRanking;
use crate::model::{Architecture, LayerKind, LayerParams, LayerSpec, ModelGraph, ParamRole};
use crate::tensor::{Real, Tensor};
use crate::train::TrainConfig;

/// Channels a layer with `channels` outputs keeps at ratio `r`:
/// `round(r * C)` with halves rounded up, never below one.
pub fn kept_count(r: f64, channels: usize) -> usize {
    ((r * channels as f64 + 0.5).floor() as usize).clamp(1, channels.max(1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    /// Layer id of the convolution.
    pub conv: usize,
    pub channels: usize,
    /// Searched ratio the counts were rounded from.
    pub ratio: f64,
    pub kept_count: usize,
    /// Ascending channel ids, the `kept_count` best-ranked channels.
    pub kept_channels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub model: String,
    pub layers: Vec<LayerPlan>,
    pub flops_before: u64,
    pub flops_after: u64,
}

impl PruningPlan {
    pub fn fpr(&self) -> f64 {
        1.0 - self.flops_after as f64 / self.flops_before as f64
    }

    pub fn kept_sets(&self) -> Vec<Vec<usize>> {
        self.layers.iter().map(|l| l.kept_channels.clone()).collect()
    }

    /// Hard 0/1 masks, in channel order, equivalent to the plan.
    pub fn hard_masks<T: Real>(&self) -> Vec<Vec<T>> {
        self.layers
            .iter()
            .map(|l| {
                let mut m = vec![T::zero(); l.channels];
                for &c in &l.kept_channels {
                    m[c] = T::one();
                }
                m
            })
            .collect()
    }
}

/// Rounds the ratios and picks the best-ranked channels of each layer.
pub fn finalize_plan<T: Real>(model: &ModelGraph<T>, ratios: &[f64], rankings: &[LayerRanking]) -> Result<PruningPlan> {
    let prunable = model.prunable();
    if ratios.len() != prunable.len() || rankings.len() != prunable.len() {
        return Err(Error::MaskMismatch(format!(
            "{} ratios and {} rankings for {} prunable layers",
            ratios.len(),
            rankings.len(),
            prunable.len()
        )));
    }
    let mut layers = Vec::with_capacity(prunable.len());
    for ((p, &r), ranking) in prunable.iter().zip(ratios).zip(rankings) {
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::RatioOutOfRange(r));
        }
        if ranking.channels() != p.channels {
            return Err(Error::MaskMismatch(format!(
                "ranking of {} channels for layer {} with {}",
                ranking.channels(),
                p.conv,
                p.channels
            )));
        }
        let k = kept_count(r, p.channels);
        let mut kept = ranking.order[..k].to_vec();
        kept.sort_unstable();
        layers.push(LayerPlan {
            conv: p.conv,
            channels: p.channels,
            ratio: r,
            kept_count: k,
            kept_channels: kept,
        });
    }
    let counts: Vec<usize> = layers.iter().map(|l| l.kept_count).collect();
    Ok(PruningPlan {
        model: model.name().to_string(),
        flops_before: model.total_flops(),
        flops_after: model.exact_model_flops(&counts)?,
        layers,
    })
}

fn gather<T: Real>(t: &Tensor<T>, dim: usize, keep: &[usize]) -> Result<Tensor<T>> {
    let shape = t.shape();
    let outer: usize = shape[..dim].iter().product();
    let inner: usize = shape[dim + 1..].iter().product();
    let n = shape[dim];
    let mut data = Vec::with_capacity(outer * keep.len() * inner);
    for o in 0..outer {
        for &k in keep {
            let start = (o * n + k) * inner;
            data.extend_from_slice(&t.data()[start..start + inner]);
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[dim] = keep.len();
    Tensor::new(new_shape, data)
}

/// Physically removes the channels the plan drops.
///
/// Convolutions lose output filters (and the matching input slices of
/// whatever consumes them), batch norms lose entries, and the classifier
/// loses the rows of the flattened features that belonged to dropped
/// channels.
pub fn export_pruned<T: Real>(model: &ModelGraph<T>, plan: &PruningPlan) -> Result<ModelGraph<T>> {
    if plan.layers.len() != model.prunable().len()
        || plan.layers.iter().zip(model.prunable()).any(|(l, p)| l.conv != p.conv)
    {
        return Err(Error::MaskMismatch("plan does not belong to this model".into()));
    }
    let channels = model.propagate_channels(&plan.kept_sets())?;
    let arch = model.architecture();
    let mut layers = Vec::with_capacity(arch.layers.len());
    let mut params = Vec::with_capacity(arch.layers.len());
    for (spec, p) in arch.layers.iter().zip(model.params()) {
        let input: Vec<usize> = match spec.inputs.first() {
            Some(&i) => channels[i].clone(),
            None => (0..arch.input_shape[0]).collect(),
        };
        let out = &channels[spec.id];
        let mut s: LayerSpec = spec.clone();
        s.out_shape[0] = out.len();
        let np = match (spec.kind, p) {
            (LayerKind::Conv, LayerParams::Conv { weight }) => {
                s.in_channels = input.len();
                s.out_channels = out.len();
                s.flops = s.conv_flops(input.len(), out.len());
                LayerParams::Conv {
                    weight: gather(&gather(weight, 0, out)?, 1, &input)?,
                }
            }
            (
                LayerKind::Bn,
                LayerParams::Bn {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                },
            ) => {
                s.in_channels = out.len();
                s.out_channels = out.len();
                LayerParams::Bn {
                    gamma: gather(gamma, 0, out)?,
                    beta: gather(beta, 0, out)?,
                    running_mean: gather(running_mean, 0, out)?,
                    running_var: gather(running_var, 0, out)?,
                }
            }
            (LayerKind::Linear, LayerParams::Linear { weight, bias }) => {
                let src = &arch.layers[spec.inputs[0]].out_shape;
                let plane = src[1] * src[2];
                let rows: Vec<usize> = input.iter().flat_map(|&c| c * plane..(c + 1) * plane).collect();
                s.in_channels = rows.len();
                s.flops = 2 * (rows.len() * spec.out_channels) as u64;
                LayerParams::Linear {
                    weight: gather(weight, 0, &rows)?,
                    bias: bias.clone(),
                }
            }
            (LayerKind::Relu | LayerKind::Pool | LayerKind::Add, LayerParams::None) => {
                s.in_channels = input.len();
                s.out_channels = out.len();
                LayerParams::None
            }
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "layer {} has parameters that do not match its kind",
                    spec.id
                )))
            }
        };
        layers.push(s);
        params.push(np);
    }
    let pruned_arch = Architecture {
        name: arch.name.clone(),
        input_shape: arch.input_shape,
        num_classes: arch.num_classes,
        layers,
    };
    ModelGraph::from_parts(pruned_arch, params)
}

/// Fine-tuning schedule used after export: 10 epochs, cosine 0.01 to 1e-4.
pub fn fine_tune_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 10,
        batch_size: 64,
        lr_max: 0.01,
        lr_min: 1e-4,
        momentum: 0.9,
        weight_decay: 5e-4,
        seed,
        augment: Augment::default(),
    }
}

const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub layer: usize,
    pub role: ParamRole,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub architecture: Architecture,
    pub tensors: Vec<TensorEntry>,
}

/// Writes `dir/manifest.json` and one `layer{id}_{role}.bin` per tensor.
/// Values are stored as `f32`.
pub fn save_checkpoint<T: Real>(model: &ModelGraph<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut tensors = Vec::new();
    for (id, p) in model.params().iter().enumerate() {
        for (role, t) in p.tensors() {
            let file = format!("layer{id}_{}.bin", role.as_str());
            let bytes: Vec<u8> = t
                .data()
                .iter()
                .flat_map(|v| (v.to_f64().unwrap_or(f64::NAN) as f32).to_le_bytes())
                .collect();
            let path = dir.join(&file);
            fs::write(&path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
            tensors.push(TensorEntry {
                layer: id,
                role,
                file,
                shape: t.shape().to_vec(),
            });
        }
    }
    let manifest = CheckpointManifest {
        format: "f32-le".into(),
        architecture: model.architecture().clone(),
        tensors,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_checkpoint<T: Real>(dir: &Path) -> Result<ModelGraph<T>> {
    let path = dir.join(MANIFEST);
    let text = fs::read(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&text).map_err(|e| Error::Format {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    if manifest.format != "f32-le" {
        return Err(Error::Format {
            path,
            msg: format!("unsupported format `{}`", manifest.format),
        });
    }
    let arch = manifest.architecture;
    let mut params = ModelGraph::<T>::initialize(arch.clone(), &mut crate::rng::substream(0, crate::rng::INIT))?
        .params()
        .to_vec();
    let mut seen = 0usize;
    for entry in &manifest.tensors {
        let file: PathBuf = dir.join(&entry.file);
        let bytes = fs::read(&file).map_err(|e| Error::io(format!("reading {}", file.display()), e))?;
        let n: usize = entry.shape.iter().product();
        if bytes.len() != 4 * n {
            return Err(Error::Format {
                path: file,
                msg: format!(
                    "expected {} bytes for shape {:?}, found {}",
                    4 * n,
                    entry.shape,
                    bytes.len()
                ),
            });
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| T::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        let slot = params
            .get_mut(entry.layer)
            .and_then(|p| p.tensor_mut(entry.role))
            .ok_or_else(|| Error::Format {
                path: file.clone(),
                msg: format!("layer {} has no {} tensor", entry.layer, entry.role.as_str()),
            })?;
        if slot.shape() != entry.shape.as_slice() {
            return Err(Error::Format {
                path: file,
                msg: format!(
                    "shape {:?} does not match the architecture's {:?}",
                    entry.shape,
                    slot.shape()
                ),
            });
        }
        *slot = Tensor::new(entry.shape.clone(), data)?;
        seen += 1;
    }
    let expected: usize = params.iter().map(|p| p.tensors().len()).sum();
    if seen != expected {
        return Err(Error::Format {
            path,
            msg: format!("manifest lists {seen} tensors, architecture needs {expected}"),
        });
    }
    ModelGraph::from_parts(arch, params)
}
