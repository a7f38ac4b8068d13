//! Alternating optimization of weights (training batches) and remaining
//! ratios (validation batches).

use serde::{Deserialize, Serialize};

use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::masking::{build_masks, rank_model, refresh_ranking, ChannelMask, LayerRanking, RefreshRecord};
use crate::model::{ModelGraph, BN_MOMENTUM};
use crate::objective::{cost_r, flops_fraction, total_loss, GradRequest, LossBreakdown, Masking};
use crate::pruner::kept_count;
use crate::tensor::{BatchNormMode, Real, Tensor};
use crate::train::Sgd;

/// Cosine annealing with warm restarts every `period` steps.
pub fn cosine_lr(step: usize, period: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if period == 0 {
        return Err(Error::InvalidArgument("cosine period must be >= 1".into()));
    }
    let phase = (step % period) as f64 / period as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * phase).cos()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub alpha: f64,
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_w_max: f64,
    pub lr_w_min: f64,
    pub lr_r_max: f64,
    pub lr_r_min: f64,
    /// Restart period in epochs; `None` means `max(1, epochs / 5)`.
    pub cosine_period: Option<usize>,
    pub ranking_interval: usize,
    /// Set from the run's seed, never from a config file.
    #[serde(skip)]
    pub seed: u64,
    pub inner_steps_per_outer: usize,
    /// Keep `alpha * Cost(R)` in the reported training-batch loss.
    pub cost_in_inner: bool,
    /// Iterations between metrics rows.
    pub log_interval: usize,
    /// Stop once no ratio moved more than this over a whole epoch.
    pub convergence_tol: f64,
    pub max_iterations: Option<usize>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            alpha: crate::objective::DEFAULT_ALPHA,
            beta: crate::objective::DEFAULT_BETA,
            epochs: 5,
            batch_size: 64,
            lr_w_max: 0.1,
            lr_w_min: 0.001,
            lr_r_max: 0.01,
            lr_r_min: 0.0001,
            cosine_period: None,
            ranking_interval: 800,
            seed: 0,
            inner_steps_per_outer: 1,
            cost_in_inner: true,
            log_interval: 100,
            convergence_tol: 1e-4,
            max_iterations: None,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.alpha >= 0.0) || !(self.beta > 0.0) {
            return bad(format!(
                "need alpha >= 0 and beta > 0, got {} and {}",
                self.alpha, self.beta
            ));
        }
        for (name, lo, hi) in [
            ("lr_w", self.lr_w_min, self.lr_w_max),
            ("lr_r", self.lr_r_min, self.lr_r_max),
        ] {
            if !(lo >= 0.0 && lo <= hi) {
                return bad(format!("{name} needs 0 <= min <= max, got {lo} / {hi}"));
            }
        }
        if self.batch_size == 0
            || self.ranking_interval == 0
            || self.inner_steps_per_outer == 0
            || self.log_interval == 0
        {
            return bad("batch_size, ranking_interval, inner_steps_per_outer and log_interval must be >= 1".into());
        }
        if self.cosine_period == Some(0) {
            return bad("cosine_period must be >= 1".into());
        }
        Ok(())
    }

    pub fn period_epochs(&self) -> usize {
        self.cosine_period.unwrap_or((self.epochs / 5).max(1))
    }
}

/// One row of the search metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub epoch: usize,
    pub lr_w: f64,
    pub lr_r: f64,
    /// Mean validation-batch cross-entropy since the previous row.
    pub ce: f64,
    pub cost: f64,
    pub total: f64,
    /// Validation-batch accuracy since the previous row.
    pub val_acc: f64,
    /// `1 - sum P_i R_i / sum P_i`.
    pub surrogate_fpr: f64,
    /// FPR of the rounded channel counts.
    pub exact_fpr: f64,
    pub ratios: Vec<f64>,
}

impl MetricsRow {
    pub fn csv_header(layers: usize) -> String {
        let mut h = String::from("iteration,epoch,lr_w,lr_r,ce,cost,total,val_acc,surrogate_fpr,exact_fpr");
        for i in 0..layers {
            h.push_str(&format!(",r_{i}"));
        }
        h
    }

    pub fn csv_row(&self) -> String {
        let mut s = format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.epoch,
            self.lr_w,
            self.lr_r,
            self.ce,
            self.cost,
            self.total,
            self.val_acc,
            self.surrogate_fpr,
            self.exact_fpr
        );
        for r in &self.ratios {
            s.push_str(&format!(",{r}"));
        }
        s
    }
}

/// FPR of `model` when prunable layer `j` keeps `round(ratios[j] * C_j)`
/// channels (at least one).
pub fn exact_fpr<T: Real>(model: &ModelGraph<T>, ratios: &[f64]) -> Result<f64> {
    let kept: Vec<usize> = ratios
        .iter()
        .zip(model.prunable_channels())
        .map(|(&r, c)| kept_count(r, c))
        .collect();
    let full = model.total_flops() as f64;
    Ok(1.0 - model.exact_model_flops(&kept)? as f64 / full)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchState {
    /// Completed outer steps.
    pub iteration: usize,
    /// Completed training epochs.
    pub epoch: usize,
    pub ratios: Vec<f64>,
    pub rankings: Vec<LayerRanking>,
    pub masks: Vec<ChannelMask>,
    pub kink_counts: Vec<usize>,
    pub lr_w: f64,
    pub lr_r: f64,
}

#[derive(Clone, Copy, Debug, Default)]
struct Window {
    ce: f64,
    correct: usize,
    seen: usize,
    steps: usize,
}

/// Driver of the alternating search over one model.
pub struct Search<'a, T: Real = f32> {
    cfg: SearchConfig,
    model: ModelGraph<T>,
    state: SearchState,
    flops: Vec<u64>,
    sgd: Sgd<T>,
    train: &'a Dataset<T>,
    val: &'a Dataset<T>,
    train_order: Vec<Vec<usize>>,
    train_cursor: usize,
    val_order: Vec<Vec<usize>>,
    val_cursor: usize,
    val_epoch: usize,
    window: Window,
    epoch_start_ratios: Vec<f64>,
    metrics: Vec<MetricsRow>,
    diagnostics: Vec<RefreshRecord>,
}

/// What one call to [`Search::step`] did.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Continue,
    /// An epoch finished; `converged` when no ratio moved more than the
    /// tolerance during it.
    EpochEnd {
        converged: bool,
    },
}

pub struct SearchOutcome<T: Real = f32> {
    pub model: ModelGraph<T>,
    pub state: SearchState,
    pub metrics: Vec<MetricsRow>,
    pub diagnostics: Vec<RefreshRecord>,
    pub converged: bool,
}

impl<T: Real> SearchOutcome<T> {
    /// Channels with a nonzero mask, per prunable layer.
    pub fn active_channels(&self) -> Vec<Vec<usize>> {
        self.state
            .masks
            .iter()
            .map(|m| m.active_channels().into_iter().collect())
            .collect()
    }
}

impl<'a, T: Real> Search<'a, T> {
    /// Starts from all-ones ratios and rankings of the current weights.
    pub fn new(cfg: SearchConfig, model: ModelGraph<T>, train: &'a Dataset<T>, val: &'a Dataset<T>) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() || val.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if model.prunable().is_empty() {
            return Err(Error::InvalidArgument("model has no prunable layers".into()));
        }
        let ratios = vec![1.0; model.prunable().len()];
        let rankings = rank_model(&model)?;
        let masks = build_masks(&ratios, &rankings)?;
        let flops = model.prunable_flops();
        let train_order = batches(train.len(), cfg.batch_size, cfg.seed, 0)?;
        let val_order = batches(val.len(), cfg.batch_size, val_seed(cfg.seed), 0)?;
        let state = SearchState {
            iteration: 0,
            epoch: 0,
            kink_counts: vec![0; ratios.len()],
            ratios: ratios.clone(),
            rankings,
            masks,
            lr_w: cfg.lr_w_max,
            lr_r: cfg.lr_r_max,
        };
        Ok(Search {
            cfg,
            model,
            state,
            flops,
            sgd: Sgd::plain(),
            train,
            val,
            train_order,
            train_cursor: 0,
            val_order,
            val_cursor: 0,
            val_epoch: 0,
            window: Window::default(),
            epoch_start_ratios: ratios,
            metrics: Vec::new(),
            diagnostics: Vec::new(),
        })
    }

    pub fn config(&self) -> &SearchConfig {
        &self.cfg
    }

    pub fn state(&self) -> &SearchState {
        &self.state
    }

    pub fn model(&self) -> &ModelGraph<T> {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut ModelGraph<T> {
        &mut self.model
    }

    pub fn metrics(&self) -> &[MetricsRow] {
        &self.metrics
    }

    pub fn diagnostics(&self) -> &[RefreshRecord] {
        &self.diagnostics
    }

    /// Overrides the ratios (clamped) and rebuilds the masks.
    pub fn set_ratios(&mut self, ratios: &[f64]) -> Result<()> {
        if ratios.len() != self.state.ratios.len() {
            return Err(Error::MaskMismatch(format!(
                "{} ratios for {} layers",
                ratios.len(),
                self.state.ratios.len()
            )));
        }
        self.state.ratios = ratios
            .iter()
            .zip(self.model.prunable_channels())
            .map(|(&r, c)| clamp_ratio(r, c))
            .collect();
        self.state.masks = build_masks(&self.state.ratios, &self.state.rankings)?;
        Ok(())
    }

    /// Iterations (outer steps) in one pass over the training set.
    pub fn iterations_per_epoch(&self) -> usize {
        self.train_order.len().div_ceil(self.cfg.inner_steps_per_outer)
    }

    fn masking(&self) -> Masking<'_> {
        Masking {
            ratios: &self.state.ratios,
            rankings: &self.state.rankings,
            flops: &self.flops,
        }
    }

    fn non_finite(&self, what: &str) -> Error {
        Error::NonFinite(format!(
            "{what} at iteration {} (epoch {}); ratios {:?}",
            self.state.iteration, self.state.epoch, self.state.ratios
        ))
    }

    /// `W <- W - lr * dL/dW` on a training batch, masks held fixed.
    pub fn inner_step(&mut self, images: &Tensor<T>, labels: &[usize], lr: f64) -> Result<LossBreakdown> {
        let alpha = if self.cfg.cost_in_inner { self.cfg.alpha } else { 0.0 };
        let eval = total_loss(
            &self.model,
            Some(self.masking()),
            alpha,
            self.cfg.beta,
            images,
            labels,
            GradRequest::WEIGHTS,
            BatchNormMode::Train,
        )
        .map_err(|e| match e {
            Error::NonFinite(w) => self.non_finite(&format!("training loss ({w})")),
            other => other,
        })?;
        let grads = eval.weight_grads.as_deref().unwrap_or_default();
        self.sgd.step(&mut self.model, grads, lr)?;
        self.model.update_running_stats(&eval.bn_stats, BN_MOMENTUM);
        Ok(eval.loss)
    }

    /// `R <- clamp(R - lr * dL/dR, [1/C, 1])` on a validation batch, weights
    /// held fixed; masks are rebuilt against the current ranking.
    pub fn outer_step(&mut self, images: &Tensor<T>, labels: &[usize], lr: f64) -> Result<(LossBreakdown, usize)> {
        let eval = total_loss(
            &self.model,
            Some(self.masking()),
            self.cfg.alpha,
            self.cfg.beta,
            images,
            labels,
            GradRequest::RATIOS,
            BatchNormMode::Train,
        )
        .map_err(|e| match e {
            Error::NonFinite(w) => self.non_finite(&format!("validation loss ({w})")),
            other => other,
        })?;
        let grads = eval
            .ratio_grads
            .ok_or_else(|| self.non_finite("missing ratio gradient"))?;
        let channels = self.model.prunable_channels();
        for (j, ((r, g), c)) in self.state.ratios.iter_mut().zip(&grads).zip(channels).enumerate() {
            *r = clamp_ratio(*r - lr * g, c);
            if eval.kinks[j] {
                self.state.kink_counts[j] += 1;
            }
        }
        self.state.masks = build_masks(&self.state.ratios, &self.state.rankings)?;
        Ok((eval.loss, eval.correct))
    }

    fn next_train_batch(&mut self) -> Option<Vec<usize>> {
        let b = self.train_order.get(self.train_cursor)?.clone();
        self.train_cursor += 1;
        Some(b)
    }

    fn next_val_batch(&mut self) -> Result<Vec<usize>> {
        if self.val_cursor == self.val_order.len() {
            self.val_epoch += 1;
            self.val_order = batches(
                self.val.len(),
                self.cfg.batch_size,
                val_seed(self.cfg.seed),
                self.val_epoch,
            )?;
            self.val_cursor = 0;
        }
        self.val_cursor += 1;
        Ok(self.val_order[self.val_cursor - 1].clone())
    }

    /// One loop body: inner step(s), outer step, periodic re-ranking.
    pub fn step(&mut self) -> Result<StepOutcome> {
        let period = self.cfg.period_epochs() * self.iterations_per_epoch();
        let t = self.state.iteration;
        self.state.lr_w = cosine_lr(t, period, self.cfg.lr_w_max, self.cfg.lr_w_min)?;
        self.state.lr_r = cosine_lr(t, period, self.cfg.lr_r_max, self.cfg.lr_r_min)?;

        for _ in 0..self.cfg.inner_steps_per_outer {
            let Some(idx) = self.next_train_batch() else { break };
            let (x, y) = self.train.batch(&idx)?;
            self.inner_step(&x, &y, self.state.lr_w)?;
        }
        let idx = self.next_val_batch()?;
        let (x, y) = self.val.batch(&idx)?;
        let (loss, correct) = self.outer_step(&x, &y, self.state.lr_r)?;
        self.state.iteration += 1;
        self.window.ce += loss.ce;
        self.window.correct += correct;
        self.window.seen += y.len();
        self.window.steps += 1;

        if let Some(records) = refresh_ranking(
            &self.model,
            &mut self.state.rankings,
            &self.state.ratios,
            &self.state.kink_counts,
            self.state.iteration,
            self.cfg.ranking_interval,
        )? {
            self.state.masks = build_masks(&self.state.ratios, &self.state.rankings)?;
            self.diagnostics.extend(records);
        }

        let epoch_done = self.train_cursor == self.train_order.len();
        if epoch_done {
            self.state.epoch += 1;
        }
        if self.state.iteration.is_multiple_of(self.cfg.log_interval) || epoch_done {
            self.log_row()?;
        }
        if !epoch_done {
            return Ok(StepOutcome::Continue);
        }
        let moved = self
            .state
            .ratios
            .iter()
            .zip(&self.epoch_start_ratios)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        self.epoch_start_ratios = self.state.ratios.clone();
        self.train_order = batches(self.train.len(), self.cfg.batch_size, self.cfg.seed, self.state.epoch)?;
        self.train_cursor = 0;
        Ok(StepOutcome::EpochEnd {
            converged: moved < self.cfg.convergence_tol,
        })
    }

    fn log_row(&mut self) -> Result<()> {
        if self.window.steps == 0 {
            return Ok(());
        }
        let w = std::mem::take(&mut self.window);
        let cost = cost_r(&self.state.ratios, &self.flops, self.cfg.beta)?;
        let ce = w.ce / w.steps as f64;
        self.metrics.push(MetricsRow {
            iteration: self.state.iteration,
            epoch: self.state.epoch,
            lr_w: self.state.lr_w,
            lr_r: self.state.lr_r,
            ce,
            cost,
            total: ce + self.cfg.alpha * cost,
            val_acc: w.correct as f64 / w.seen as f64,
            surrogate_fpr: 1.0 - flops_fraction(&self.state.ratios, &self.flops)?,
            exact_fpr: exact_fpr(&self.model, &self.state.ratios)?,
            ratios: self.state.ratios.clone(),
        });
        Ok(())
    }

    /// Runs until `epochs` are done, `max_iterations` is reached, or the
    /// ratios converge. `on_row` sees every metrics row as it is produced.
    pub fn run(mut self, mut on_row: impl FnMut(&MetricsRow)) -> Result<SearchOutcome<T>> {
        let mut converged = false;
        let mut reported = 0;
        while self.state.epoch < self.cfg.epochs {
            if self.cfg.max_iterations.is_some_and(|m| self.state.iteration >= m) {
                break;
            }
            let outcome = self.step()?;
            for row in &self.metrics[reported..] {
                on_row(row);
            }
            reported = self.metrics.len();
            if outcome == (StepOutcome::EpochEnd { converged: true }) {
                converged = true;
                break;
            }
        }
        if self.window.steps > 0 {
            self.log_row()?;
            for row in &self.metrics[reported..] {
                on_row(row);
            }
        }
        Ok(SearchOutcome {
            model: self.model,
            state: self.state,
            metrics: self.metrics,
            diagnostics: self.diagnostics,
            converged,
        })
    }
}

fn val_seed(seed: u64) -> u64 {
    seed.rotate_left(32) ^ 0x5eed
}

fn clamp_ratio(r: f64, channels: usize) -> f64 {
    r.clamp(1.0 / channels as f64, 1.0)
}

/// Convenience wrapper: build a [`Search`] and run it to completion.
pub fn run_search<T: Real>(
    cfg: SearchConfig,
    model: ModelGraph<T>,
    train: &Dataset<T>,
    val: &Dataset<T>,
    on_row: impl FnMut(&MetricsRow),
) -> Result<SearchOutcome<T>> {
    Search::new(cfg, model, train, val)?.run(on_row)
}
