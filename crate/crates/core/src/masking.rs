//! Channel importance ranking and the dynamic channel mask.
//!
//! For a layer with `C` channels and remaining ratio `R`, the channel of
//! rank `I` (1 = most important) is scaled by
//! `1 - relu(1 - relu(1 + R*C - I))`: ranks up to `floor(R*C)` pass
//! unchanged, the next rank passes the fractional part of `R*C`, the rest
//! are zeroed.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::tensor::{Real, Tensor};

/// Channel ranking of one prunable layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRanking {
    /// Sum of absolute conv weights per output channel.
    pub scores: Vec<f64>,
    /// `ranks[channel]`, 1-based.
    pub ranks: Vec<usize>,
    /// `order[rank - 1]` is the channel holding that rank.
    pub order: Vec<usize>,
}

impl LayerRanking {
    pub fn channels(&self) -> usize {
        self.ranks.len()
    }
}

/// Ranks output channels of `weight` (`[Cout, Cin, Kh, Kw]`) by descending
/// absolute-weight sum; ties go to the lower channel id.
pub fn rank_channels<T: Real>(weight: &Tensor<T>) -> Result<LayerRanking> {
    let cout = *weight
        .shape()
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty weight shape".into()))?;
    let per = weight.len() / cout;
    let scores: Vec<f64> = weight
        .data()
        .chunks(per)
        .map(|ch| ch.iter().map(|v| v.abs().to_f64().unwrap_or(f64::NAN)).sum())
        .collect();
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("conv weights while ranking".into()));
    }
    let mut order: Vec<usize> = (0..cout).collect();
    // stable sort keeps lower ids first among equal scores
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut ranks = vec![0; cout];
    for (pos, &ch) in order.iter().enumerate() {
        ranks[ch] = pos + 1;
    }
    Ok(LayerRanking { scores, ranks, order })
}

/// Rankings for every prunable layer of `model`.
pub fn rank_model<T: Real>(model: &ModelGraph<T>) -> Result<Vec<LayerRanking>> {
    model
        .prunable()
        .iter()
        .map(|p| {
            let w = model
                .conv_weight(p.conv)
                .ok_or_else(|| Error::InvalidArgument(format!("layer {} is not a conv", p.conv)))?;
            rank_channels(w)
        })
        .collect()
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Closed-form mask value of `rank` for ratio `r` over `c` channels.
pub fn mask_value(r: f64, c: usize, rank: usize) -> f64 {
    1.0 - relu(1.0 - relu(1.0 + r * c as f64 - rank as f64))
}

/// The same mask written as three cases on `floor(r*c)` and `ceil(r*c)`.
///
/// The boundary case is the half-open `(floor, ceil]`: an open interval
/// holds no integer rank, and rank `ceil` must carry the fractional part.
pub fn piecewise_mask(r: f64, c: usize, rank: usize) -> f64 {
    let rc = r * c as f64;
    let k = rank as f64;
    if k <= rc.floor() {
        1.0
    } else if k <= rc.ceil() {
        rc - rc.floor()
    } else {
        0.0
    }
}

/// Mask of one prunable layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelMask {
    pub ratio: f64,
    pub mask_by_rank: Vec<f64>,
    /// `mask_by_rank` re-indexed to original channel ids.
    pub mask_by_channel: Vec<f64>,
    /// Fractional part of `ratio * C`.
    pub boundary_value: f64,
}

impl ChannelMask {
    pub fn channels(&self) -> usize {
        self.mask_by_rank.len()
    }

    /// Channels with a nonzero mask value, ascending.
    pub fn active_channels(&self) -> BTreeSet<usize> {
        self.mask_by_channel
            .iter()
            .enumerate()
            .filter(|(_, &m)| m > 0.0)
            .map(|(c, _)| c)
            .collect()
    }

    pub fn mass(&self) -> f64 {
        self.mask_by_rank.iter().sum()
    }

    pub fn by_channel_as<T: Real>(&self) -> Vec<T> {
        self.mask_by_channel.iter().map(|&m| T::of(m)).collect()
    }
}

fn check_ratio(r: f64) -> Result<()> {
    if r > 0.0 && r <= 1.0 {
        Ok(())
    } else {
        Err(Error::RatioOutOfRange(r))
    }
}

pub fn build_mask(r: f64, ranking: &LayerRanking) -> Result<ChannelMask> {
    check_ratio(r)?;
    let c = ranking.channels();
    let mask_by_rank: Vec<f64> = (1..=c).map(|k| mask_value(r, c, k)).collect();
    let mask_by_channel = ranking.ranks.iter().map(|&k| mask_by_rank[k - 1]).collect();
    let rc = r * c as f64;
    Ok(ChannelMask {
        ratio: r,
        mask_by_rank,
        mask_by_channel,
        boundary_value: rc - rc.floor(),
    })
}

pub fn build_masks(ratios: &[f64], rankings: &[LayerRanking]) -> Result<Vec<ChannelMask>> {
    if ratios.len() != rankings.len() {
        return Err(Error::MaskMismatch(format!(
            "{} ratios for {} layers",
            ratios.len(),
            rankings.len()
        )));
    }
    ratios.iter().zip(rankings).map(|(&r, rk)| build_mask(r, rk)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskGrad {
    /// d mask_by_rank / dR.
    pub by_rank: Vec<f64>,
    /// `R*C` sat exactly on an integer; the right-hand derivative was used.
    pub kink: bool,
}

/// Derivative of each rank's mask value with respect to `r`.
///
/// Only the boundary rank `floor(r*c) + 1` has a nonzero slope, equal to
/// `c`. When `r*c` is an integer the right-hand slope is used; at `r = 1`
/// that rank does not exist and the gradient is zero.
pub fn mask_grad_wrt_r(r: f64, c: usize) -> Result<MaskGrad> {
    check_ratio(r)?;
    let rc = r * c as f64;
    let mut by_rank = vec![0.0; c];
    let boundary = rc.floor() as usize + 1;
    if boundary <= c {
        by_rank[boundary - 1] = c as f64;
    }
    Ok(MaskGrad {
        by_rank,
        kink: rc == rc.floor(),
    })
}

/// Chains a loss gradient with respect to the per-channel mask into a
/// gradient with respect to `r`. Returns `(dL/dR, kink)`.
pub fn ratio_grad(r: f64, ranking: &LayerRanking, d_mask_by_channel: &[f64]) -> Result<(f64, bool)> {
    if d_mask_by_channel.len() != ranking.channels() {
        return Err(Error::MaskMismatch(format!(
            "mask gradient has {} entries for {} channels",
            d_mask_by_channel.len(),
            ranking.channels()
        )));
    }
    let g = mask_grad_wrt_r(r, ranking.channels())?;
    let total = g
        .by_rank
        .iter()
        .zip(&ranking.order)
        .map(|(&dm, &ch)| dm * d_mask_by_channel[ch])
        .sum();
    Ok((total, g.kink))
}

/// Scales channel `c` of `features` (`[N, C, ...]`) by `mask[c]`.
pub fn apply_mask<T: Real>(features: &Tensor<T>, mask: &[T]) -> Result<Tensor<T>> {
    let shape = features.shape();
    if shape.len() < 2 || shape[1] != mask.len() {
        return Err(Error::MaskMismatch(format!(
            "mask of {} entries for features {:?}",
            mask.len(),
            shape
        )));
    }
    let inner: usize = shape[2..].iter().product();
    let mut out = features.clone();
    for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
        let m = mask[i % mask.len()];
        chunk.iter_mut().for_each(|v| *v = *v * m);
    }
    Ok(out)
}

/// One diagnostics row per layer per ranking refresh.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefreshRecord {
    pub iteration: usize,
    pub layer: usize,
    pub ratio: f64,
    pub floor: usize,
    pub boundary_value: f64,
    pub kink_count: usize,
    pub entering: Vec<usize>,
    pub leaving: Vec<usize>,
}

impl RefreshRecord {
    pub const CSV_HEADER: &'static str = "iteration,layer,ratio,floor,x,kink_count,entering,leaving";

    pub fn csv_row(&self) -> String {
        let ids = |v: &[usize]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" ");
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iteration,
            self.layer,
            self.ratio,
            self.floor,
            self.boundary_value,
            self.kink_count,
            ids(&self.entering),
            ids(&self.leaving)
        )
    }
}

/// Re-ranks every prunable layer from the current weights when
/// `iteration % interval == 0`. Masked channels keep their weights and are
/// ranked like any other, so they can win their place back.
///
/// Returns `None` when no refresh was due.
pub fn refresh_ranking<T: Real>(
    model: &ModelGraph<T>,
    rankings: &mut [LayerRanking],
    ratios: &[f64],
    kink_counts: &[usize],
    iteration: usize,
    interval: usize,
) -> Result<Option<Vec<RefreshRecord>>> {
    if interval == 0 {
        return Err(Error::InvalidArgument("ranking interval must be >= 1".into()));
    }
    if !iteration.is_multiple_of(interval) {
        return Ok(None);
    }
    let fresh = rank_model(model)?;
    if fresh.len() != rankings.len() || ratios.len() != rankings.len() {
        return Err(Error::MaskMismatch("rankings do not match the model".into()));
    }
    let mut records = Vec::with_capacity(fresh.len());
    for (layer, (old, new)) in rankings.iter_mut().zip(fresh).enumerate() {
        let r = ratios[layer];
        let before = build_mask(r, old)?.active_channels();
        let after = build_mask(r, &new)?.active_channels();
        let rc = r * new.channels() as f64;
        records.push(RefreshRecord {
            iteration,
            layer,
            ratio: r,
            floor: rc.floor() as usize,
            boundary_value: rc - rc.floor(),
            kink_count: kink_counts.get(layer).copied().unwrap_or(0),
            entering: after.difference(&before).copied().collect(),
            leaving: before.difference(&after).copied().collect(),
        });
        *old = new;
    }
    Ok(Some(records))
}
