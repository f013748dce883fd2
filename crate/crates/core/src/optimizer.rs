//! Adam updates, gradient clipping, and the alternating
//! generative/inference training loop with early stopping on a dev metric.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::rng::StreamRng;
use crate::tensor::Real;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig<T> {
    pub alpha: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Real> Default for AdamConfig<T> {
    fn default() -> Self {
        AdamConfig {
            alpha: T::lit(1e-3),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
        }
    }
}

/// Per-parameter first/second moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    cfg: AdamConfig<T>,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new<U: Real>(params: &ParamSet<U>, cfg: AdamConfig<T>) -> Self {
        let m = params.iter().map(|(_, _, t)| vec![T::zero(); t.numel()]).collect();
        let v = params.iter().map(|(_, _, t)| vec![T::zero(); t.numel()]).collect();
        AdamState { cfg, m, v, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update. Parameters without a gradient entry,
    /// or masked out by `mask`, are skipped entirely: their values *and*
    /// moments stay untouched, which is what keeps frozen-phase parameters
    /// bit-identical.
    pub fn step(
        &mut self,
        params: &mut ParamSet<T>,
        grads: &[Option<Vec<T>>],
        mask: Option<&[bool]>,
    ) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = T::one() - self.cfg.beta1.powi(t);
        let bc2 = T::one() - self.cfg.beta2.powi(t);
        for i in 0..params.len() {
            if let Some(mask) = mask {
                if !mask[i] {
                    continue;
                }
            }
            let Some(grad) = grads.get(i).and_then(|g| g.as_ref()) else {
                continue;
            };
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteParamGrad(
                    params.name(ParamId(i)).to_string(),
                ));
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let data = params.get_mut(ParamId(i)).data_mut();
            for j in 0..grad.len() {
                let g = grad[j];
                m[j] = self.cfg.beta1 * m[j] + (T::one() - self.cfg.beta1) * g;
                v[j] = self.cfg.beta2 * v[j] + (T::one() - self.cfg.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= self.cfg.alpha * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}

/// Scale all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<T: Real>(grads: &mut [Option<Vec<T>>], max_norm: T) -> T {
    let mut sq = T::zero();
    for g in grads.iter().flatten() {
        for v in g {
            sq += *v * *v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for v in g {
                *v *= scale;
            }
        }
    }
    norm
}

/// Which parameter group an epoch updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Update inference-network parameters (generative frozen).
    Inference,
    /// Update generative parameters (inference network frozen).
    Generative,
    /// Update everything.
    Joint,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Inference => "inference",
            Phase::Generative => "generative",
            Phase::Joint => "joint",
        })
    }
}

/// Phase pattern (cycled per epoch), budget, early stopping and seed.
#[derive(Debug, Clone)]
pub struct TrainSchedule {
    pub pattern: Vec<Phase>,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl TrainSchedule {
    /// Alternate one inference epoch with one generative epoch.
    pub fn alternating(max_epochs: usize, patience: usize, seed: u64) -> Self {
        TrainSchedule {
            pattern: vec![Phase::Inference, Phase::Generative],
            max_epochs,
            patience,
            seed,
        }
    }

    pub fn joint(max_epochs: usize, patience: usize, seed: u64) -> Self {
        TrainSchedule { pattern: vec![Phase::Joint], max_epochs, patience, seed }
    }

    fn validate(&self) -> Result<()> {
        if self.pattern.is_empty() || self.max_epochs == 0 {
            return Err(Error::Config("schedule needs a pattern and at least one epoch".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("early-stop patience must be at least 1".into()));
        }
        Ok(())
    }
}

/// A dev-set score with its orientation.
#[derive(Debug, Clone, Copy)]
pub struct DevMetric {
    pub value: f64,
    pub lower_is_better: bool,
}

impl DevMetric {
    fn oriented(&self) -> f64 {
        if self.lower_is_better {
            self.value
        } else {
            -self.value
        }
    }
}

/// One line of the training history TSV.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub train_objective: f64,
    pub dev_value: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev: f64,
}

/// A model that [`run_training`] can drive. Training is always `f32`.
pub trait Trainable {
    type Item;

    fn param_set(&self) -> &ParamSet<f32>;
    fn param_set_mut(&mut self) -> &mut ParamSet<f32>;

    /// Mean per-item loss (negative bound) over the batch, on the tape.
    fn build_batch_loss<'p>(
        &'p self,
        tape: &mut Tape<'p, f32>,
        batch: &[&Self::Item],
        rng: &mut StreamRng,
    ) -> Result<Var>;

    /// Which parameters the given phase may update.
    fn phase_mask(&self, phase: Phase) -> Vec<bool>;

    /// Dev-set metric; direction carried by the result.
    fn dev_metric(&self, dev: &[Self::Item], rng: &StreamRng) -> Result<DevMetric>;

    fn metric_name(&self) -> &'static str;

    fn adam_config(&self) -> AdamConfig<f32> {
        AdamConfig::default()
    }

    /// Global-norm gradient clip, if the model wants one.
    fn grad_clip(&self) -> Option<f32> {
        None
    }
}

/// Run the phase schedule with early stopping; on return the model holds
/// the weights of its best dev epoch.
pub fn run_training<M: Trainable>(
    model: &mut M,
    train: &[M::Item],
    dev: &[M::Item],
    schedule: &TrainSchedule,
    batch_size: usize,
) -> Result<TrainOutcome> {
    schedule.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }

    let base = StreamRng::new(schedule.seed);
    // Fixed stream for dev evaluation so epochs are comparable and the
    // best-dev value is reproducible after restore.
    let dev_rng = base.substream(u64::MAX);

    let mut state = AdamState::new(model.param_set(), model.adam_config());
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamSet<f32>)> = None;
    let mut epochs_since_improvement = 0usize;

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..schedule.max_epochs {
        let phase = schedule.pattern[epoch % schedule.pattern.len()];
        let mask = model.phase_mask(phase);
        let mut shuffle_rng = base.substream(2 * epoch as u64);
        let mut noise_rng = base.substream(2 * epoch as u64 + 1);
        shuffle_rng.shuffle(&mut order);

        let mut loss_sum = 0.0f64;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<&M::Item> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss_value, mut grads) = {
                let mut tape = Tape::over(model.param_set());
                let loss = model.build_batch_loss(&mut tape, &batch, &mut noise_rng)?;
                tape.backward(loss)?;
                (tape.value_scalar(loss) as f64, tape.param_grads())
            };
            loss_sum += loss_value * batch.len() as f64;
            if let Some(max_norm) = model.grad_clip() {
                clip_global_norm(&mut grads, max_norm);
            }
            state.step(model.param_set_mut(), &grads, Some(&mask))?;
        }
        let train_objective = loss_sum / train.len() as f64;

        let metric = model.dev_metric(dev, &dev_rng)?;
        if !metric.value.is_finite() {
            return Err(Error::Numeric(format!(
                "dev metric {} is not finite at epoch {epoch}",
                model.metric_name()
            )));
        }
        history.push(EpochRecord {
            epoch,
            phase,
            train_objective,
            dev_value: metric.value,
        });

        let improved = match &best {
            None => true,
            Some((best_oriented, _, _)) => metric.oriented() < *best_oriented,
        };
        if improved {
            best = Some((metric.oriented(), epoch, model.param_set().clone()));
            epochs_since_improvement = 0;
        } else {
            epochs_since_improvement += 1;
            if epochs_since_improvement >= schedule.patience {
                break;
            }
        }
    }

    let (_, best_epoch, best_params) = best.expect("at least one epoch ran");
    *model.param_set_mut() = best_params;
    let best_dev = history[best_epoch].dev_value;
    Ok(TrainOutcome { history, best_epoch, best_dev })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_gradient_leaves_fresh_parameters_unchanged() {
        let mut params: ParamSet<f64> = ParamSet::new();
        params.insert("w", Tensor::vector(vec![1.0, -2.0]).unwrap());
        let mut state = AdamState::new(&params, AdamConfig::default());
        state.step(&mut params, &[Some(vec![0.0, 0.0])], None).unwrap();
        assert_eq!(params.by_name("w").unwrap().data(), &[1.0, -2.0]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_magnitude_is_alpha() {
        // Bias correction cancels at t=1: |update| = a*g/(sqrt(g*g)+eps) ~ a.
        let mut params: ParamSet<f64> = ParamSet::new();
        params.insert("w", Tensor::scalar(0.7));
        let cfg = AdamConfig { alpha: 0.1, ..AdamConfig::default() };
        let mut state = AdamState::new(&params, cfg);
        state.step(&mut params, &[Some(vec![0.3])], None).unwrap();
        let moved = 0.7 - params.by_name("w").unwrap().data()[0];
        assert!((moved - 0.1).abs() < 1e-6, "step {moved}");
    }

    #[test]
    fn matches_reference_adam_on_quadratic() {
        // Scripted reference recurrence on f(x) = x^2 from x0 = 1, a = 0.1.
        // Momentum makes |x| oscillate through zero, so only the early
        // steps shrink strictly; after 100 steps the iterate sits well
        // inside |x| < 0.1.
        let (alpha, b1, b2, eps) = (0.1f64, 0.9, 0.999, 1e-8);
        let mut reference = Vec::new();
        let (mut x, mut m, mut v) = (1.0f64, 0.0, 0.0);
        for t in 1..=100 {
            let g = 2.0 * x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= alpha * mh / (vh.sqrt() + eps);
            reference.push(x);
        }
        assert!(reference[99].abs() < 0.1);
        for w in reference[..11].windows(2) {
            assert!(w[1].abs() < w[0].abs(), "early steps shrink strictly");
        }

        let mut params: ParamSet<f64> = ParamSet::new();
        params.insert("x", Tensor::scalar(1.0));
        let cfg = AdamConfig { alpha, beta1: b1, beta2: b2, eps };
        let mut state = AdamState::new(&params, cfg);
        for t in 0..100 {
            let xv = params.by_name("x").unwrap().data()[0];
            state.step(&mut params, &[Some(vec![2.0 * xv])], None).unwrap();
            let got = params.by_name("x").unwrap().data()[0];
            assert!(
                (got - reference[t]).abs() < 1e-12,
                "step {t}: {got} vs reference {}",
                reference[t]
            );
        }
    }

    #[test]
    fn masked_parameters_stay_bit_identical() {
        let mut params: ParamSet<f64> = ParamSet::new();
        params.insert("theta", Tensor::vector(vec![0.5, -0.5]).unwrap());
        params.insert("phi", Tensor::vector(vec![1.5]).unwrap());
        let before = params.by_name("theta").unwrap().data().to_vec();
        let mut state = AdamState::new(&params, AdamConfig::default());
        let grads = vec![Some(vec![1.0, 1.0]), Some(vec![1.0])];
        state.step(&mut params, &grads, Some(&[false, true])).unwrap();
        state.step(&mut params, &grads, Some(&[false, true])).unwrap();
        let after = params.by_name("theta").unwrap().data();
        assert!(before
            .iter()
            .zip(after)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_ne!(params.by_name("phi").unwrap().data()[0], 1.5);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut params: ParamSet<f64> = ParamSet::new();
        params.insert("w.bad", Tensor::scalar(0.0));
        let mut state = AdamState::new(&params, AdamConfig::default());
        let err = state
            .step(&mut params, &[Some(vec![f64::NAN])], None)
            .unwrap_err();
        assert!(err.to_string().contains("w.bad"), "{err}");
    }

    #[test]
    fn clip_rescales_joint_norm() {
        let mut grads = vec![Some(vec![3.0f64, 0.0]), Some(vec![0.0, 4.0])];
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let total: f64 = grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum();
        assert!((total.sqrt() - 1.0).abs() < 1e-12);
    }
}
