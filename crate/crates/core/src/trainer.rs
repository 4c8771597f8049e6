//! Feed-forward classifier with hand-derived backpropagation and SGD.
//!
//! Layers are dense with ReLU between them and identity at the output.
//! The per-sample logit gradient comes from [`LossSpec::evaluate`], so every
//! loss (including the detached-weight GRA family) trains through the same
//! backward pass. A mini-batch gradient is the mean of per-sample gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossSpec;
use crate::metrics::{ece, PredictionSet};
use crate::numkit::{one_hot, softmax, LabeledBatch, Matrix, RngStream};

/// One dense layer: `out = W · in + b` with `W` shaped `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    fn zeros_like(other: &DenseLayer) -> DenseLayer {
        DenseLayer {
            weights: Matrix::zeros(other.weights.rows(), other.weights.cols()),
            bias: vec![0.0; other.bias.len()],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }
}

/// Parameter-shaped buffers: gradients and momentum velocity.
pub type Gradients = Vec<DenseLayer>;

#[derive(Debug, Clone, PartialEq)]
pub struct Velocity {
    pub layers: Vec<DenseLayer>,
}

impl Velocity {
    pub fn zeros_for(model: &MlpModel) -> Velocity {
        Velocity { layers: model.layers.iter().map(DenseLayer::zeros_like).collect() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layers: Vec<DenseLayer>,
    /// Bumped on every parameter update; caches remember which version they saw.
    version: u64,
}

/// Activations kept by [`MlpModel::forward_batch`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    /// Input to each layer (row per sample). `inputs[0]` is the batch itself.
    inputs: Vec<Matrix>,
    logits: Matrix,
}

impl ForwardCache {
    pub fn logits(&self) -> &Matrix {
        &self.logits
    }

    /// Input of the final linear layer.
    pub fn last_hidden(&self) -> &Matrix {
        self.inputs.last().expect("at least one layer")
    }
}

impl MlpModel {
    /// He-initialised weights, zero biases.
    pub fn new(input_dim: usize, hidden: &[usize], num_classes: usize, rng: &mut RngStream) -> Result<Self> {
        if input_dim == 0 || num_classes == 0 || hidden.contains(&0) {
            return Err(Error::domain("MlpModel::new", "layer widths must be positive"));
        }
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(num_classes);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let scale = (2.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out).map(|_| scale * rng.normal()).collect();
                Ok(DenseLayer { weights: Matrix::from_vec(fan_out, fan_in, data)?, bias: vec![0.0; fan_out] })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MlpModel { layers, version: 0 })
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::domain("MlpModel::from_layers", "need at least one layer"));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.output_dim() {
                return Err(Error::domain("MlpModel::from_layers", format!("layer {i}: bias length mismatch")));
            }
            if i > 0 && layers[i - 1].output_dim() != layer.input_dim() {
                return Err(Error::domain(
                    "MlpModel::from_layers",
                    format!("layer {i} expects {} inputs but layer {} emits {}", layer.input_dim(), i - 1, layers[i - 1].output_dim()),
                ));
            }
        }
        Ok(MlpModel { layers, version: 0 })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().expect("at least one layer").output_dim()
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(DenseLayer::output_dim).collect()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.data().len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weights.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    /// All parameters, layer by layer, weights then bias.
    pub fn flat_parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for l in &self.layers {
            out.extend_from_slice(l.weights.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Mutable access to the layers; bumps the version so older caches go stale.
    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        self.version += 1;
        &mut self.layers
    }

    pub fn forward_batch(&self, x: &Matrix) -> Result<ForwardCache> {
        if x.cols() != self.input_dim() {
            return Err(Error::domain(
                "forward",
                format!("input has {} features, model expects {}", x.cols(), self.input_dim()),
            ));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut current = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = dense_forward(layer, &current);
            if i < last {
                out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            }
            inputs.push(std::mem::replace(&mut current, out));
        }
        Ok(ForwardCache { version: self.version, inputs, logits: current })
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardCache> {
        self.forward_batch(&Matrix::from_vec(1, x.len(), x.to_vec())?)
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.logits.row(0).to_vec())
    }

    pub fn logits_batch(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_batch(x)?.logits)
    }

    /// Parameter gradients summed over the rows of `grad_logits`.
    pub fn backward_batch(&self, cache: &ForwardCache, grad_logits: &Matrix) -> Result<Gradients> {
        if cache.version != self.version {
            return Err(Error::StaleCache { cache: cache.version, model: self.version });
        }
        if grad_logits.rows() != cache.logits.rows() || grad_logits.cols() != cache.logits.cols() {
            return Err(Error::domain("backward", "grad_logits shape does not match the cached logits"));
        }
        let mut grads: Vec<DenseLayer> = Vec::with_capacity(self.layers.len());
        let mut delta = grad_logits.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.inputs[i];
            let mut gw = Matrix::zeros(layer.output_dim(), layer.input_dim());
            let mut gb = vec![0.0; layer.output_dim()];
            for r in 0..delta.rows() {
                let d = delta.row(r);
                let a = input.row(r);
                for (o, &dv) in d.iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    gb[o] += dv;
                    for (w, &av) in gw.row_mut(o).iter_mut().zip(a) {
                        *w += dv * av;
                    }
                }
            }
            if i > 0 {
                let mut prev = Matrix::zeros(delta.rows(), layer.input_dim());
                for r in 0..delta.rows() {
                    let out = prev.row_mut(r);
                    for (o, &dv) in delta.row(r).iter().enumerate() {
                        if dv == 0.0 {
                            continue;
                        }
                        for (p, &w) in out.iter_mut().zip(layer.weights.row(o)) {
                            *p += dv * w;
                        }
                    }
                    // ReLU mask: the layer input is post-activation, zero iff pre-activation ≤ 0
                    for (p, &a) in out.iter_mut().zip(input.row(r)) {
                        if a <= 0.0 {
                            *p = 0.0;
                        }
                    }
                }
                delta = prev;
            }
            grads.push(DenseLayer { weights: gw, bias: gb });
        }
        grads.reverse();
        Ok(grads)
    }

    pub fn backward(&self, cache: &ForwardCache, grad_logits: &[f64]) -> Result<Gradients> {
        self.backward_batch(cache, &Matrix::from_vec(1, grad_logits.len(), grad_logits.to_vec())?)
    }
}

fn dense_forward(layer: &DenseLayer, x: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), layer.output_dim());
    for r in 0..x.rows() {
        let xr = x.row(r);
        let row = out.row_mut(r);
        for (o, v) in row.iter_mut().enumerate() {
            let w = layer.weights.row(o);
            *v = layer.bias[o] + w.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    out
}

/// Momentum SGD with L2 weight decay folded into the gradient.
///
/// `v ← μ v + (g + λ θ)`, `θ ← θ − η v`. Decay touches weights only, not biases.
pub fn sgd_step(
    model: &mut MlpModel,
    grads: &Gradients,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    velocity: &mut Velocity,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::domain("sgd_step", format!("learning rate must be > 0, got {lr}")));
    }
    if grads.len() != model.layers.len() || velocity.layers.len() != model.layers.len() {
        return Err(Error::domain("sgd_step", "gradient / velocity shape does not match the model"));
    }
    for ((layer, g), v) in model.layers_mut().iter_mut().zip(grads).zip(velocity.layers.iter_mut()) {
        let w = layer.weights.data_mut();
        for ((theta, &gv), vel) in w.iter_mut().zip(g.weights.data()).zip(v.weights.data_mut()) {
            *vel = momentum * *vel + (gv + weight_decay * *theta);
            *theta -= lr * *vel;
        }
        for ((theta, &gv), vel) in layer.bias.iter_mut().zip(&g.bias).zip(v.bias.iter_mut()) {
            *vel = momentum * *vel + gv;
            *theta -= lr * *vel;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrStep {
    /// The rate applies to epochs `< until_epoch`.
    pub until_epoch: usize,
    pub lr: f64,
}

/// Piecewise-constant learning rate by epoch; the last rate persists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<LrStep>", into = "Vec<LrStep>")]
pub struct LrSchedule(Vec<LrStep>);

impl LrSchedule {
    pub fn new(steps: Vec<LrStep>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::domain("lr_schedule", "empty schedule"));
        }
        if steps.windows(2).any(|w| w[1].until_epoch <= w[0].until_epoch) {
            return Err(Error::domain("lr_schedule", "breakpoints must be strictly increasing"));
        }
        if let Some(s) = steps.iter().find(|s| !(s.lr > 0.0) || !s.lr.is_finite()) {
            return Err(Error::domain("lr_schedule", format!("learning rate must be > 0, got {}", s.lr)));
        }
        Ok(LrSchedule(steps))
    }

    pub fn constant(lr: f64) -> Result<Self> {
        LrSchedule::new(vec![LrStep { until_epoch: usize::MAX, lr }])
    }

    /// 0.1 for 150 epochs, 0.01 for the next 100, then 0.001.
    pub fn cifar_350() -> Self {
        LrSchedule(vec![
            LrStep { until_epoch: 150, lr: 0.1 },
            LrStep { until_epoch: 250, lr: 0.01 },
            LrStep { until_epoch: 350, lr: 0.001 },
        ])
    }

    pub fn steps(&self) -> &[LrStep] {
        &self.0
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.0.iter().find(|s| epoch < s.until_epoch).unwrap_or_else(|| self.0.last().expect("non-empty")).lr
    }
}

impl TryFrom<Vec<LrStep>> for LrSchedule {
    type Error = Error;

    fn try_from(steps: Vec<LrStep>) -> Result<Self> {
        LrSchedule::new(steps)
    }
}

impl From<LrSchedule> for Vec<LrStep> {
    fn from(s: LrSchedule) -> Self {
        s.0
    }
}

/// Standalone lookup on a schedule that may be empty.
pub fn lr_at_epoch(schedule: &[LrStep], epoch: usize) -> Result<f64> {
    Ok(LrSchedule::new(schedule.to_vec())?.lr_at_epoch(epoch))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub num_bins: usize,
    pub hidden: Vec<usize>,
    /// Epochs (0-based, logged after the epoch finishes) at which per-sample
    /// last-layer gradient norms are recorded over the training set.
    #[serde(default)]
    pub log_grad_norms_at: Vec<usize>,
}

impl TrainConfig {
    /// 2 → 64 → 64 → K toy setup: SGD momentum 0.9, lr 0.01, batch 128.
    pub fn toy(loss: LossSpec, epochs: usize, seed: u64) -> Self {
        TrainConfig {
            loss,
            epochs,
            batch_size: 128,
            lr_schedule: LrSchedule(vec![LrStep { until_epoch: usize::MAX, lr: 0.01 }]),
            momentum: 0.9,
            weight_decay: 5e-4,
            seed,
            num_bins: crate::metrics::DEFAULT_NUM_BINS,
            hidden: vec![64, 64],
            log_grad_norms_at: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::domain("TrainConfig", "batch_size must be at least 1"));
        }
        if self.num_bins == 0 {
            return Err(Error::domain("TrainConfig", "num_bins must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::domain("TrainConfig", format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::domain("TrainConfig", "weight_decay must be ≥ 0"));
        }
        LossSpec::new(self.loss.kind, self.loss.gamma, self.loss.beta)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_ece: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradNormRecord {
    pub sample_id: usize,
    pub last_layer_grad_norm: f64,
    pub brier_score: f64,
    /// Uncertainty weight the loss applied to this sample.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradNormLog {
    pub epoch: usize,
    pub records: Vec<GradNormRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub grad_norms: Vec<GradNormLog>,
    /// Samples whose true-class probability hit the log floor.
    pub clamped_log_probs: u64,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: MlpModel,
    pub velocity: Velocity,
    pub rng: RngStream,
    pub epochs_done: usize,
}

pub struct Trainer<'a> {
    config: &'a TrainConfig,
    train_data: &'a LabeledBatch,
    eval_data: &'a LabeledBatch,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &'a TrainConfig, train_data: &'a LabeledBatch, eval_data: &'a LabeledBatch) -> Result<Self> {
        config.validate()?;
        if train_data.is_empty() || eval_data.is_empty() {
            return Err(Error::domain("train", "training and evaluation data must be non-empty"));
        }
        if train_data.input_dim() != eval_data.input_dim() || train_data.num_classes() != eval_data.num_classes() {
            return Err(Error::domain("train", "training and evaluation data disagree on shape"));
        }
        Ok(Trainer { config, train_data, eval_data })
    }

    pub fn init(&self) -> Result<TrainState> {
        let mut rng = RngStream::new(self.config.seed);
        let model = MlpModel::new(
            self.train_data.input_dim(),
            &self.config.hidden,
            self.train_data.num_classes(),
            &mut rng,
        )?;
        let velocity = Velocity::zeros_for(&model);
        Ok(TrainState { model, velocity, rng, epochs_done: 0 })
    }

    /// Runs up to `epochs` more epochs, never past `config.epochs`.
    pub fn run(&self, state: &mut TrainState, history: &mut TrainHistory, epochs: usize) -> Result<()> {
        let stop = (state.epochs_done + epochs).min(self.config.epochs);
        while state.epochs_done < stop {
            let record = self.run_epoch(state, history)?;
            history.epochs.push(record);
            if self.config.log_grad_norms_at.contains(&record.epoch) {
                history.grad_norms.push(GradNormLog {
                    epoch: record.epoch,
                    records: grad_norm_records(&state.model, self.train_data, &self.config.loss)?,
                });
            }
        }
        Ok(())
    }

    fn run_epoch(&self, state: &mut TrainState, history: &mut TrainHistory) -> Result<EpochRecord> {
        let epoch = state.epochs_done;
        let lr = self.config.lr_schedule.lr_at_epoch(epoch);
        let k = self.train_data.num_classes();
        let mut order: Vec<usize> = (0..self.train_data.len()).collect();
        state.rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        for (batch_idx, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let x = self.train_data.features().select_rows(chunk);
            let cache = state.model.forward_batch(&x)?;
            if !cache.logits().is_finite() {
                return Err(Error::NonFinite { epoch, batch: batch_idx });
            }
            let scale = 1.0 / chunk.len() as f64;
            let mut grad_logits = Matrix::zeros(chunk.len(), k);
            for (r, &i) in chunk.iter().enumerate() {
                let probs = softmax(cache.logits().row(r), 1.0)?;
                let label = one_hot(self.train_data.labels()[i], k)?;
                let eval = self.config.loss.evaluate(&probs, &label);
                loss_sum += eval.value;
                history.clamped_log_probs += u64::from(eval.clamped);
                for (g, v) in grad_logits.row_mut(r).iter_mut().zip(&eval.grad_logits) {
                    *g = v * scale;
                }
            }
            let grads = state.model.backward_batch(&cache, &grad_logits)?;
            sgd_step(
                &mut state.model,
                &grads,
                lr,
                self.config.momentum,
                self.config.weight_decay,
                &mut state.velocity,
            )?;
            if !state.model.is_finite() {
                return Err(Error::NonFinite { epoch, batch: batch_idx });
            }
        }
        state.epochs_done += 1;

        let preds = predict(&state.model, self.eval_data)?;
        let (test_ece, _) = ece(&preds, self.config.num_bins)?;
        Ok(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / self.train_data.len() as f64,
            test_ece,
            test_accuracy: preds.accuracy(),
        })
    }
}

/// Trains from scratch for `config.epochs` epochs.
pub fn train(config: &TrainConfig, train_data: &LabeledBatch, eval_data: &LabeledBatch) -> Result<(MlpModel, TrainHistory)> {
    let trainer = Trainer::new(config, train_data, eval_data)?;
    let mut state = trainer.init()?;
    let mut history = TrainHistory::default();
    trainer.run(&mut state, &mut history, config.epochs)?;
    Ok((state.model, history))
}

/// Softmax predictions (T = 1) on a batch.
pub fn predict(model: &MlpModel, data: &LabeledBatch) -> Result<PredictionSet> {
    let logits = model.logits_batch(data.features())?;
    let probs = (0..logits.rows()).map(|r| softmax(logits.row(r), 1.0)).collect::<Result<Vec<_>>>()?;
    PredictionSet::new(probs, data.labels().to_vec())
}

/// Frobenius norm of the final layer's weight gradient for one sample.
pub fn per_sample_last_layer_grad_norm(model: &MlpModel, x: &[f64], label: usize, loss: &LossSpec) -> Result<f64> {
    let cache = model.forward(x)?;
    let probs = softmax(cache.logits().row(0), 1.0)?;
    let eval = loss.evaluate(&probs, &one_hot(label, model.num_classes())?);
    let grads = model.backward(&cache, &eval.grad_logits)?;
    Ok(grads.last().expect("at least one layer").weights.frobenius_norm())
}

/// Per-sample last-layer gradient norm, Brier Score and weight over `data`.
pub fn grad_norm_records(model: &MlpModel, data: &LabeledBatch, loss: &LossSpec) -> Result<Vec<GradNormRecord>> {
    let cache = model.forward_batch(data.features())?;
    let k = model.num_classes();
    let hidden = cache.last_hidden();
    (0..data.len())
        .map(|i| {
            let probs = softmax(cache.logits().row(i), 1.0)?;
            let label = one_hot(data.labels()[i], k)?;
            let eval = loss.evaluate(&probs, &label);
            // the last-layer weight gradient is the outer product grad_logits ⊗ h
            let g: f64 = eval.grad_logits.iter().map(|v| v * v).sum::<f64>().sqrt();
            let h: f64 = hidden.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            Ok(GradNormRecord {
                sample_id: i,
                last_layer_grad_norm: g * h,
                brier_score: crate::metrics::brier_score(&probs, &label),
                weight: eval.weight,
            })
        })
        .collect()
}
