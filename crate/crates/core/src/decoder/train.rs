//! Teacher-forced training with AdamW and a two-phase learning rate.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::forward::{backward_sample, forward_sample, linear_backward, project_features, sequence_loss, Mode};
use super::model::DecoderModel;
use super::ops::Matrix;
use super::{DecoderError, BOS_ID, EOS_ID, PAD_ID};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub warmup_epochs: usize,
    pub warmup_lr: f64,
    pub base_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            warmup_epochs: 10,
            warmup_lr: 5e-5,
            base_lr: 5e-6,
            batch_size: 64,
            epochs: 350,
            seed: 0,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DecoderError> {
        let bad = |m: &str| Err(DecoderError::Config(m.to_string()));
        if !(self.warmup_lr > 0.0 && self.base_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.warmup_epochs > self.epochs {
            return bad("warmup_epochs exceeds epochs");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive");
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) || self.eps <= 0.0 || self.weight_decay < 0.0 {
            return bad("invalid optimizer hyperparameters");
        }
        Ok(())
    }
}

/// Constant `warmup_lr` for the warmup epochs, then a straight line to
/// `base_lr` at the final epoch.
pub fn lr_schedule(epoch: usize, tc: &TrainConfig) -> f64 {
    if epoch < tc.warmup_epochs {
        return tc.warmup_lr;
    }
    let span = tc.epochs.saturating_sub(1).saturating_sub(tc.warmup_epochs);
    if span == 0 {
        return tc.base_lr;
    }
    let t = ((epoch - tc.warmup_epochs) as f64 / span as f64).min(1.0);
    tc.warmup_lr + t * (tc.base_lr - tc.warmup_lr)
}

/// AdamW with decoupled weight decay applied to every parameter.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: DecoderModel,
    v: DecoderModel,
}

impl AdamW {
    pub fn new(model: &DecoderModel, tc: &TrainConfig) -> Self {
        Self {
            beta1: tc.betas.0,
            beta2: tc.betas.1,
            eps: tc.eps,
            weight_decay: tc.weight_decay,
            step: 0,
            m: model.zeros_like(),
            v: model.zeros_like(),
        }
    }

    pub fn update(&mut self, model: &mut DecoderModel, grads: &DecoderModel, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let decay = 1.0 - lr * self.weight_decay;
        let params = model.tensors_mut();
        let (ms, vs) = (self.m.tensors_mut(), self.v.tensors_mut());
        for (((p, g), m), v) in params.into_iter().zip(grads.tensors()).zip(ms).zip(vs) {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] *= decay;
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// One (features, report tokens) pair. Tokens exclude BOS/EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub features: Matrix,
    pub tokens: Vec<u32>,
}

/// Padded teacher-forcing batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `BOS + tokens`, PAD-suffixed.
    pub inputs: Vec<Vec<u32>>,
    /// `tokens + EOS`, PAD-suffixed.
    pub targets: Vec<Vec<u32>>,
    /// Raw features, zero-padded to a common row count.
    pub features: Vec<Matrix>,
    pub mem_pad: Vec<Vec<bool>>,
}

impl Batch {
    /// Reports longer than `max_len - 1` tokens are truncated so that the
    /// shifted sequences fit.
    pub fn collate(examples: &[&TrainExample], max_len: usize) -> Result<Self, DecoderError> {
        if examples.is_empty() {
            return Err(DecoderError::Shape("empty batch".into()));
        }
        let keep = max_len.saturating_sub(1);
        let len = examples.iter().map(|e| e.tokens.len().min(keep) + 1).max().unwrap_or(1);
        let rows = examples.iter().map(|e| e.features.rows).max().unwrap_or(0);
        let cols = examples[0].features.cols;
        let mut batch = Batch { inputs: vec![], targets: vec![], features: vec![], mem_pad: vec![] };
        for e in examples {
            if e.features.rows == 0 {
                return Err(DecoderError::EmptyMemory);
            }
            if e.features.cols != cols {
                return Err(DecoderError::Shape("feature dims differ within batch".into()));
            }
            let t = &e.tokens[..e.tokens.len().min(keep)];
            let mut input = Vec::with_capacity(len);
            input.push(BOS_ID);
            input.extend_from_slice(t);
            let mut target = t.to_vec();
            target.push(EOS_ID);
            input.resize(len, PAD_ID);
            target.resize(len, PAD_ID);
            let mut f = Matrix::zeros(rows, cols);
            f.data[..e.features.data.len()].copy_from_slice(&e.features.data);
            batch.inputs.push(input);
            batch.targets.push(target);
            batch.features.push(f);
            batch.mem_pad.push((0..rows).map(|r| r >= e.features.rows).collect());
        }
        Ok(batch)
    }
}

/// Mean token loss over the batch, the number of scored tokens, and the
/// gradient of the mean loss with respect to every parameter.
pub fn loss_and_gradients(
    model: &DecoderModel,
    batch: &Batch,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, usize, DecoderModel), DecoderError> {
    let count = batch.targets.iter().flatten().filter(|&&t| t != PAD_ID).count();
    if count == 0 {
        return Err(DecoderError::AllPadTargets);
    }
    let scale = 1.0 / count as f64;
    let mut grads = model.zeros_like();
    let mut total = 0.0;
    for ((input, target), (features, pad)) in
        batch.inputs.iter().zip(&batch.targets).zip(batch.features.iter().zip(&batch.mem_pad))
    {
        let memory = project_features(features, &model.proj)?;
        let ctx = match mode {
            Mode::Train => Some((model.config.dropout, &mut *rng)),
            Mode::Eval => None,
        };
        let (logits, cache) = forward_sample(model, input, &memory, pad, ctx)?;
        let (sum, _, mut dlogits) = sequence_loss(&logits, target, PAD_ID);
        total += sum;
        dlogits.data.iter_mut().for_each(|g| *g *= scale);
        let dmem = backward_sample(model, &cache, &dlogits, &mut grads);
        linear_backward(features, &model.proj, &dmem, &mut grads.proj);
    }
    let loss = total * scale;
    if !loss.is_finite() {
        return Err(DecoderError::NonFiniteLoss(loss));
    }
    Ok((loss, count, grads))
}

/// One teacher-forced AdamW step at learning rate `lr`. Returns the batch
/// loss measured before the update.
pub fn train_step(
    model: &mut DecoderModel,
    batch: &Batch,
    opt: &mut AdamW,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64, DecoderError> {
    let (loss, _, grads) = loss_and_gradients(model, batch, Mode::Train, rng)?;
    opt.update(model, &grads, lr);
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Token-weighted mean of the batch losses seen during the epoch.
    pub loss: f64,
}

/// Full training loop. The example order is reshuffled every epoch from a
/// generator seeded with `tc.seed`; dropout draws from the same generator.
pub fn train(
    model: &mut DecoderModel,
    examples: &[TrainExample],
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>, DecoderError> {
    tc.validate()?;
    if examples.is_empty() {
        return Err(DecoderError::Shape("no training examples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut opt = AdamW::new(model, tc);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut logs = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        let lr = lr_schedule(epoch, tc);
        order.shuffle(&mut rng);
        let (mut sum, mut tokens) = (0.0, 0usize);
        for chunk in order.chunks(tc.batch_size) {
            let refs: Vec<&TrainExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let batch = Batch::collate(&refs, model.config.max_len)?;
            let (loss, count, grads) = loss_and_gradients(model, &batch, Mode::Train, &mut rng)?;
            opt.update(model, &grads, lr);
            sum += loss * count as f64;
            tokens += count;
        }
        let log = EpochLog { epoch, lr, loss: sum / tokens as f64 };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// Eval-mode mean token loss over `examples`.
pub fn evaluate_loss(model: &DecoderModel, examples: &[TrainExample]) -> Result<f64, DecoderError> {
    let refs: Vec<&TrainExample> = examples.iter().collect();
    let batch = Batch::collate(&refs, model.config.max_len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    loss_and_gradients(model, &batch, Mode::Eval, &mut rng).map(|(l, _, _)| l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::DecoderConfig;

    fn tiny() -> DecoderConfig {
        DecoderConfig { layers: 1, heads: 2, d_model: 8, d_ff: 16, dropout: 0.0, max_len: 6, vocab: 12, feat_dim: 5 }
    }

    #[test]
    fn schedule_matches_table_values() {
        let tc = TrainConfig::default();
        assert_eq!(lr_schedule(0, &tc), 5e-5);
        assert_eq!(lr_schedule(9, &tc), 5e-5);
        assert!((lr_schedule(349, &tc) - 5e-6).abs() < 1e-18);
        // Decay runs over epochs 10..=349; 339 steps, midpoint at 179.5.
        let mid = (lr_schedule(179, &tc) + lr_schedule(180, &tc)) / 2.0;
        assert!((mid - 2.75e-5).abs() < 1e-15);
    }

    #[test]
    fn schedule_without_decay_phase() {
        let tc = TrainConfig { warmup_epochs: 3, epochs: 4, ..TrainConfig::default() };
        assert_eq!(lr_schedule(2, &tc), tc.warmup_lr);
        assert_eq!(lr_schedule(3, &tc), tc.base_lr);
    }

    #[test]
    fn weight_decay_only_step_shrinks_exactly() {
        let model = DecoderModel::xavier_init(&tiny(), 3).unwrap();
        let tc = TrainConfig::default();
        let mut opt = AdamW::new(&model, &tc);
        let mut after = model.clone();
        opt.update(&mut after, &model.zeros_like(), 0.1);
        for (a, b) in after.tensors().iter().zip(model.tensors()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(*x, y * (1.0 - 0.1 * 0.01));
            }
        }
    }

    #[test]
    fn collate_shifts_and_pads() {
        let ex = |n: usize, t: Vec<u32>| TrainExample { features: Matrix::from_fn(n, 5, |i, j| (i + j) as f64), tokens: t };
        let a = ex(2, vec![4, 5]);
        let b = ex(3, vec![6, 7, 8, 9, 10, 11]);
        let batch = Batch::collate(&[&a, &b], 6).unwrap();
        assert_eq!(batch.inputs, vec![vec![1, 4, 5, 0, 0, 0], vec![1, 6, 7, 8, 9, 10]]);
        assert_eq!(batch.targets, vec![vec![4, 5, 2, 0, 0, 0], vec![6, 7, 8, 9, 10, 2]]);
        assert_eq!(batch.mem_pad[0], vec![false, false, true]);
        assert_eq!(batch.features[0].row(2), &[0.0; 5]);
    }

    #[test]
    fn step_is_a_descent_direction() {
        let cfg = tiny();
        let model = DecoderModel::xavier_init(&cfg, 11).unwrap();
        let ex = TrainExample { features: Matrix::from_fn(3, 5, |i, j| ((i * 7 + j * 3) % 5) as f64 / 5.0), tokens: vec![4, 7, 9] };
        let batch = Batch::collate(&[&ex], cfg.max_len).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (loss, _, grads) = loss_and_gradients(&model, &batch, Mode::Eval, &mut rng).unwrap();
        let mut stepped = model.clone();
        let tc = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        AdamW::new(&model, &tc).update(&mut stepped, &grads, 1e-4);
        let (after, _, _) = loss_and_gradients(&stepped, &batch, Mode::Eval, &mut rng).unwrap();
        assert!(after < loss);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = DecoderConfig { dropout: 0.1, ..tiny() };
        let ex: Vec<TrainExample> = (0..3)
            .map(|k| TrainExample { features: Matrix::from_fn(2, 5, |i, j| (k + i * j) as f64 * 0.1), tokens: vec![4 + k as u32, 5] })
            .collect();
        let tc = TrainConfig { epochs: 3, warmup_epochs: 1, batch_size: 2, warmup_lr: 1e-3, base_lr: 1e-4, ..TrainConfig::default() };
        let run = || {
            let mut m = DecoderModel::xavier_init(&cfg, 5).unwrap();
            let logs = train(&mut m, &ex, &tc, |_| {}).unwrap();
            (m, logs)
        };
        assert_eq!(run(), run());
    }
}
