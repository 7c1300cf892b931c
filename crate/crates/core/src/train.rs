//! SGD training loop: batch sampling, augmentation, forward/backward, momentum
//! update with a stepped learning rate, loss logging and resumable state.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::assign;
use crate::checkpoint;
use crate::data::{augment, mix_seed, AugmentConfig, SyntheticScene};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalResult, InferenceConfig};
use crate::loss::{multitask_loss_on_graph, LossConfig, LossReport};
use crate::model::{forward, init_params, preprocess, Detector, ModelConfig};
use crate::par::Execution;
use crate::params::{ParamKind, ParamSet};
use crate::tensor::{Graph, Tensor};

const MOMENTUM_PREFIX: &str = "momentum.";
const ITERATION_TENSOR: &str = "train.iteration";

/// Window of the trailing mean used to judge trainability.
pub const SMOOTHING_WINDOW: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_initial: f64,
    /// Iteration fractions of `max_iters` at which the rate is multiplied by
    /// `lr_drop_factor`.
    pub lr_drops: Vec<f64>,
    pub lr_drop_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_iters: usize,
    pub seed: u64,
    /// Write a checkpoint every this many iterations (0 disables periodic
    /// checkpoints; the final state is always written by the CLI).
    pub checkpoint_every: usize,
    /// Decay biases and normalization scales too.
    pub strict_weight_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_initial: 1e-3,
            lr_drops: vec![2.0 / 3.0, 5.0 / 6.0],
            lr_drop_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 8,
            max_iters: 2000,
            seed: 0,
            checkpoint_every: 500,
            strict_weight_decay: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) {
            return Err(Error::Config("train.lr_initial must be positive".into()));
        }
        if self.lr_drops.iter().any(|&f| !(f > 0.0 && f < 1.0))
            || self.lr_drops.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config(
                "train.lr_drops must be strictly ascending fractions in (0, 1)".into(),
            ));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor <= 1.0) {
            return Err(Error::Config("train.lr_drop_factor must lie in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("train.momentum must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("train.weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 || self.max_iters == 0 {
            return Err(Error::Config("train.batch_size and train.max_iters must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate in effect at 0-based iteration `iter`.
    pub fn lr_at(&self, iter: usize) -> f64 {
        let drops = self
            .lr_drops
            .iter()
            .filter(|&&f| iter >= (f * self.max_iters as f64).floor() as usize)
            .count();
        self.lr_initial * self.lr_drop_factor.powi(drops as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub iter: usize,
    pub loss: f64,
    pub cls: f64,
    pub reg: f64,
    pub lr: f64,
}

pub fn loss_csv_header() -> &'static str {
    "iter,loss,cls,reg,lr"
}

impl LossRow {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{},{}", self.iter, self.loss, self.cls, self.reg, self.lr)
    }
}

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut s = format!("{}\n", loss_csv_header());
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}

/// Trailing mean of the loss over the `window` rows ending at iteration `iter`.
pub fn smoothed_loss(rows: &[LossRow], iter: usize, window: usize) -> Option<f64> {
    let end = rows.iter().position(|r| r.iter == iter)?;
    let start = (end + 1).saturating_sub(window);
    let slice = &rows[start..=end];
    Some(slice.iter().map(|r| r.loss).sum::<f64>() / slice.len() as f64)
}

/// Everything needed to continue a run. Batch sampling is a pure function of
/// `(seed, iteration)`, so no generator state has to be carried.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub iteration: usize,
    pub params: ParamSet,
    pub velocity: ParamSet,
    pub history: Vec<LossRow>,
}

impl TrainState {
    pub fn fresh(model: &ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(model, seed)?;
        let velocity = params.zeros_like();
        Ok(Self {
            iteration: 0,
            params,
            velocity,
            history: Vec::new(),
        })
    }

    /// Parameters, momentum buffers and the iteration counter as one archive.
    pub fn to_tensors(&self) -> ParamSet {
        let mut out = self.params.clone();
        for (name, t) in self.velocity.iter() {
            out.insert(format!("{MOMENTUM_PREFIX}{name}"), t.clone());
        }
        out.insert(ITERATION_TENSOR, Tensor::scalar(self.iteration as f32));
        out
    }

    /// Rebuilds a state from an archive written by [`TrainState::to_tensors`].
    /// A plain parameter archive resumes with zero momentum at iteration 0.
    pub fn from_tensors(model: &ModelConfig, tensors: &ParamSet) -> Result<Self> {
        let params = Detector::from_params(model.clone(), tensors)?.params().clone();
        let mut velocity = params.zeros_like();
        for (name, v) in params.names().iter().zip(velocity.tensors_mut()) {
            if let Some(m) = tensors.get(&format!("{MOMENTUM_PREFIX}{name}")) {
                if m.dims() != v.dims() {
                    return Err(Error::Format(format!("momentum for {name} has the wrong shape")));
                }
                *v = m.clone();
            }
        }
        let iteration = match tensors.get(ITERATION_TENSOR) {
            Some(t) if t.len() == 1 && t.data()[0] >= 0.0 && t.data()[0].fract() == 0.0 => t.data()[0] as usize,
            Some(_) => return Err(Error::Format(format!("{ITERATION_TENSOR} is not a counter"))),
            None => 0,
        };
        Ok(Self {
            iteration,
            params,
            velocity,
            history: Vec::new(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_tensors())
    }

    pub fn load(path: &Path, model: &ModelConfig) -> Result<Self> {
        Self::from_tensors(model, &checkpoint::load(path)?)
    }
}

/// `v <- m v - lr (g + wd theta)`, `theta <- theta + v`. Biases and scales are
/// exempt from decay unless `strict` is set.
pub fn sgd_step(
    params: &mut ParamSet,
    velocity: &mut ParamSet,
    grads: &[Tensor<f32>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    strict: bool,
) -> Result<()> {
    if grads.len() != params.len() || velocity.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} gradients / {} buffers for {} parameters",
            grads.len(),
            velocity.len(),
            params.len()
        )));
    }
    let kinds: Vec<ParamKind> = (0..params.len()).map(|i| params.kind(i)).collect();
    let (lr, m) = (lr as f32, momentum as f32);
    for (i, ((theta, v), g)) in params
        .tensors_mut()
        .iter_mut()
        .zip(velocity.tensors_mut())
        .zip(grads)
        .enumerate()
    {
        if g.dims() != theta.dims() {
            return Err(Error::Shape(format!("gradient {i} has dims {:?}", g.dims())));
        }
        let wd = if strict || kinds[i] == ParamKind::Weight {
            weight_decay as f32
        } else {
            0.0
        };
        for ((t, v), &g) in theta.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *v = m * *v - lr * (g + wd * *t);
            *t += *v;
        }
    }
    Ok(())
}

/// Per-image loss and parameter gradients for one augmented sample.
pub fn sample_gradients(
    model: &ModelConfig,
    loss_cfg: &LossConfig,
    params: &ParamSet,
    anchors: &crate::anchors::AnchorSet,
    scene: &SyntheticScene,
) -> Result<(LossReport, Vec<Tensor<f32>>)> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let x = g.constant(preprocess(&scene.image));
    let heads = forward(model, &mut g, &bound, x)?;
    let assignment = assign(anchors, &scene.gt_boxes, &model.assignment);
    let (loss, report) = multitask_loss_on_graph(&mut g, &heads, &assignment, loss_cfg)?;
    let mut grads = g.backward(loss)?;
    let out = bound
        .vars()
        .iter()
        .zip(params.tensors())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.dims())))
        .collect();
    Ok((report, out))
}

pub struct Trainer {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    pub exec: Execution,
}

impl Trainer {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        self.train.validate()?;
        if self.augment.output_size != self.model.backbone.input_size {
            return Err(Error::Config(format!(
                "augment.output_size {} differs from backbone.input_size {}",
                self.augment.output_size, self.model.backbone.input_size
            )));
        }
        Ok(())
    }

    /// Dataset indices and per-sample augmentation seeds for iteration `iter`.
    pub fn batch_plan(&self, iter: usize, dataset_len: usize) -> Vec<(usize, u64)> {
        let batch_seed = mix_seed(self.train.seed, iter as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(batch_seed);
        (0..self.train.batch_size)
            .map(|k| (rng.random_range(0..dataset_len), mix_seed(batch_seed, k as u64)))
            .collect()
    }

    /// One SGD iteration on `state`.
    pub fn step(&self, state: &mut TrainState, data: &[SyntheticScene]) -> Result<LossRow> {
        let iter = state.iteration;
        let plan = self.batch_plan(iter, data.len());
        let anchors = self.model.anchors();
        let results: Vec<Result<(LossReport, Vec<Tensor<f32>>)>> = self.exec.map(&plan, |&(idx, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sample = augment(&data[idx], &self.augment, &mut rng);
            sample_gradients(&self.model, &self.loss, &state.params, &anchors, &sample)
        });
        let seeds: Vec<u64> = plan.iter().map(|p| p.1).collect();
        let scale = 1.0 / plan.len() as f32;
        let mut sum: Vec<Tensor<f32>> = state.params.tensors().iter().map(|t| Tensor::zeros(t.dims())).collect();
        let (mut loss, mut cls, mut reg) = (0.0, 0.0, 0.0);
        for r in results {
            let (report, grads) = r?;
            loss += report.total;
            cls += report.cls_term;
            reg += report.reg_term;
            for (acc, g) in sum.iter_mut().zip(&grads) {
                for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += v * scale;
                }
            }
        }
        let n = plan.len() as f64;
        let (loss, cls, reg) = (loss / n, cls / n, reg / n);
        if !loss.is_finite() || sum.iter().any(|g| !g.all_finite()) {
            return Err(Error::NonFinite { iteration: iter, seeds });
        }
        let lr = self.train.lr_at(iter);
        sgd_step(
            &mut state.params,
            &mut state.velocity,
            &sum,
            lr,
            self.train.momentum,
            self.train.weight_decay,
            self.train.strict_weight_decay,
        )?;
        let row = LossRow { iter, loss, cls, reg, lr };
        state.history.push(row);
        state.iteration += 1;
        Ok(row)
    }

    /// Runs iterations until `until` (capped at `max_iters`), calling `hook`
    /// after each one.
    pub fn run(
        &self,
        state: &mut TrainState,
        data: &[SyntheticScene],
        until: usize,
        mut hook: impl FnMut(&TrainState, &LossRow) -> Result<()>,
    ) -> Result<()> {
        self.validate()?;
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let end = until.min(self.train.max_iters);
        while state.iteration < end {
            let row = self.step(state, data)?;
            hook(state, &row)?;
        }
        Ok(())
    }

    /// Fresh run over the full schedule.
    pub fn train(&self, data: &[SyntheticScene]) -> Result<TrainState> {
        let mut state = TrainState::fresh(&self.model, self.train.seed)?;
        self.run(&mut state, data, self.train.max_iters, |_, _| Ok(()))?;
        Ok(state)
    }
}

/// Loads a checkpoint and scores it on `val`.
pub fn evaluate_checkpoint(
    path: &Path,
    model: &ModelConfig,
    val: &[SyntheticScene],
    cfg: &InferenceConfig,
    exec: Execution,
) -> Result<EvalResult> {
    let tensors = checkpoint::load(path)?;
    let detector = Detector::from_params(model.clone(), &tensors)?;
    evaluate(&detector, val, cfg, exec)
}
