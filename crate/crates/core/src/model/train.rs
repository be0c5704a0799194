//! Training: example preparation, per-example gradients, the batched
//! update step and the logged loop.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::embed::{assemble, assemble_backward, VisualSource};
use super::loss::{loss_and_grad, LossValue};
use super::optim::{clip_global_norm, AdamW, OptState};
use super::params::Params;
use super::transformer::{backward, forward_train};
use crate::codec::{encode, RvqCodebooks};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::real::Real;
use crate::rng::{derive_seed, stream_rng};
use crate::sequencer::{apply_delay, build_alignment, AlignmentMap, DelayedGrid};
use crate::world::ClipSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Probability that a sample sees only the unconditional vector.
    pub cfg_dropout: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    /// Global gradient norm cap; 0 disables clipping.
    pub grad_clip: f64,
    /// Write a log row every this many steps.
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.01,
            cfg_dropout: 0.1,
            batch_size: 8,
            steps: 2000,
            seed: 0,
            grad_clip: 1.0,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.cfg_dropout) {
            return Err(Error::invalid("cfg_dropout must lie in [0, 1)"));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::invalid("lr and batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("betas must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }
}

/// One clip after tokenization: the delayed grid, raw video rows and their
/// alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub id: String,
    pub delayed: DelayedGrid,
    pub video: Matrix<f32>,
    pub alignment: AlignmentMap,
}

impl TrainExample {
    pub fn new(id: impl Into<String>, delayed: DelayedGrid, video: Matrix<f32>) -> Result<Self> {
        let alignment = build_alignment(video.rows, delayed.t_a(), delayed.n_q)?;
        Ok(TrainExample {
            id: id.into(),
            delayed,
            video,
            alignment,
        })
    }

    pub fn from_clip(clip: &ClipSample, books: &RvqCodebooks) -> Result<Self> {
        let grid = encode(&clip.audio, books)?;
        let v = &clip.video;
        let video = Matrix::from_vec(v.features.clone(), v.t_v, v.d_raw);
        TrainExample::new(clip.id.clone(), apply_delay(&grid), video)
    }

    /// Cells that contribute to the loss.
    pub fn target_count(&self) -> usize {
        self.delayed.t_a() * self.delayed.n_q
    }
}

/// Loss of one example, optionally accumulating `scale * gradient` of the
/// summed cell losses.
pub fn example_objective<T: Real>(
    params: &Params<T>,
    ex: &TrainExample,
    source: VisualSource,
    grads: Option<(&mut [T], T)>,
) -> Result<LossValue> {
    let video: Matrix<T> = ex.video.convert();
    let input = assemble(params, &ex.delayed, &video, &ex.alignment, source)?;
    let (logits, cache) = forward_train(params, &input.rows, input.audio_offset)?;
    match grads {
        None => loss_and_grad(&logits, &ex.delayed, None),
        Some((g, scale)) => {
            let mut dlogits = vec![T::zero(); logits.data.len()];
            let lv = loss_and_grad(&logits, &ex.delayed, Some((&mut dlogits, scale)))?;
            let d_rows = backward(params, &cache, &dlogits, g);
            assemble_backward(params, &input, &ex.delayed, &ex.alignment, &d_rows, g);
            Ok(lv)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Index of the completed update, starting at 1.
    pub step: u64,
    pub loss: f64,
    /// Norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
    pub dropped: usize,
}

/// Per-step randomness depends only on the seed and the step index, so a
/// resumed run repeats exactly what an uninterrupted one would do.
fn step_rng(seed: u64, step: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    stream_rng(derive_seed(seed, step), stream)
}

/// Batch indices for a step: a seeded sample without replacement.
pub fn batch_indices(seed: u64, step: u64, n: usize, batch_size: usize) -> Vec<usize> {
    let mut rng = step_rng(seed, step, 1);
    rand::seq::index::sample(&mut rng, n, batch_size.min(n)).into_vec()
}

/// Seeded per-sample condition dropout decisions for a step.
pub fn dropout_mask(seed: u64, step: u64, n: usize, p: f64) -> Vec<bool> {
    let mut rng = step_rng(seed, step, 2);
    (0..n).map(|_| rng.random::<f64>() < p).collect()
}

/// Accumulated gradient of the mean cell loss over `batch`.
pub fn batch_gradient(
    params: &Params<f32>,
    batch: &[&TrainExample],
    dropped: &[bool],
) -> Result<(Vec<f32>, f64)> {
    let total: usize = batch.iter().map(|e| e.target_count()).sum();
    let mut grads = params.zeros_like();
    if total == 0 {
        return Ok((grads, 0.0));
    }
    let scale = 1.0 / total as f32;
    let mut sum = 0.0;
    for (ex, &drop) in batch.iter().zip(dropped) {
        let source = if drop {
            VisualSource::Unconditional
        } else {
            VisualSource::Video
        };
        sum += example_objective(params, ex, source, Some((&mut grads, scale)))?.sum;
    }
    Ok((grads, sum / total as f64))
}

/// One optimizer update over an explicit batch. Parameters are left
/// untouched when the loss or gradient is not finite.
pub fn train_step(
    params: &mut Params<f32>,
    state: &mut OptState,
    batch: &[&TrainExample],
    cfg: &TrainConfig,
) -> Result<StepStats> {
    let step = state.step;
    let dropped = dropout_mask(cfg.seed, step, batch.len(), cfg.cfg_dropout);
    let (mut grads, loss) = batch_gradient(params, batch, &dropped)?;
    if !loss.is_finite() {
        return Err(Error::NumericOverflow(format!("loss is {loss} at step {}", step + 1)));
    }
    let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip);
    if !grad_norm.is_finite() {
        return Err(Error::NumericOverflow(format!("gradient norm is {grad_norm} at step {}", step + 1)));
    }
    cfg.optimizer().update(&params.layout, &mut params.data, &grads, state);
    if !params.is_finite() {
        return Err(Error::NumericOverflow(format!("parameters diverged at step {}", step + 1)));
    }
    Ok(StepStats {
        step: state.step,
        loss,
        grad_norm,
        lr: cfg.lr,
        dropped: dropped.iter().filter(|&&d| d).count(),
    })
}

pub const LOG_HEADER: &str = "step,loss,grad_norm,lr,seconds";

/// Owns the parameters and optimizer state of a run.
pub struct Trainer {
    pub params: Params<f32>,
    pub state: OptState,
    pub cfg: TrainConfig,
}

impl Trainer {
    pub fn new(params: Params<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let state = OptState::new(params.data.len());
        Ok(Trainer { params, state, cfg })
    }

    pub fn resume(params: Params<f32>, state: OptState, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if state.m.len() != params.data.len() || state.v.len() != params.data.len() {
            return Err(Error::invalid("optimizer state does not match the parameters"));
        }
        Ok(Trainer { params, state, cfg })
    }

    /// Draws the batch for the next step and applies it.
    pub fn step(&mut self, examples: &[TrainExample]) -> Result<StepStats> {
        if examples.is_empty() {
            return Err(Error::NoSamples("training set is empty".into()));
        }
        let idx = batch_indices(self.cfg.seed, self.state.step, examples.len(), self.cfg.batch_size);
        let batch: Vec<&TrainExample> = idx.iter().map(|&i| &examples[i]).collect();
        train_step(&mut self.params, &mut self.state, &batch, &self.cfg)
    }

    /// Trains until `cfg.steps` updates have been applied. Log rows go to
    /// `log` (the caller writes the header). On a numeric failure the state
    /// from before the failing step is written to `dump` before returning.
    pub fn run(
        &mut self,
        examples: &[TrainExample],
        mut log: Option<&mut dyn Write>,
        dump: Option<&Path>,
    ) -> Result<Vec<StepStats>> {
        let start = Instant::now();
        let mut history = Vec::new();
        while self.state.step < self.cfg.steps {
            let before = (self.params.data.clone(), self.state.clone());
            let stats = match self.step(examples) {
                Ok(s) => s,
                Err(e @ Error::NumericOverflow(_)) => {
                    self.params.data = before.0;
                    self.state = before.1;
                    if let Some(path) = dump {
                        super::checkpoint::write_checkpoint(path, &self.params, Some(&self.state))?;
                        log::error!("training aborted; state dumped to {}", path.display());
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let every = self.cfg.log_every.max(1);
            if stats.step % every == 0 || stats.step == self.cfg.steps {
                log::info!("step {} loss {:.4} grad_norm {:.3}", stats.step, stats.loss, stats.grad_norm);
                if let Some(w) = log.as_mut() {
                    writeln!(
                        w,
                        "{},{:.6},{:.6},{},{:.3}",
                        stats.step,
                        stats.loss,
                        stats.grad_norm,
                        stats.lr,
                        start.elapsed().as_secs_f64()
                    )
                    .map_err(|e| Error::io("writing training log", e))?;
                }
            }
            history.push(stats);
        }
        Ok(history)
    }
}

/// Mean loss over `examples` with real visual rows.
pub fn evaluate_loss(params: &Params<f32>, examples: &[TrainExample], source: VisualSource) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0;
    for ex in examples {
        let lv = example_objective(params, ex, source, None)?;
        sum += lv.sum;
        count += lv.count;
    }
    Ok(if count > 0 { sum / count as f64 } else { 0.0 })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::codec::TokenGrid;
    use crate::model::params::{Conditioning, Family, ModelConfig};

    pub(crate) fn tiny_cfg(conditioning: Conditioning) -> ModelConfig {
        ModelConfig {
            k: 8,
            n_q: 2,
            d_a: 8,
            d_v: 8,
            d_raw: 4,
            d_vis_hidden: 6,
            n_layer: 2,
            n_head: 2,
            conditioning,
            ..ModelConfig::default()
        }
    }

    pub(crate) fn toy_example(seed: u64, t_a: usize, t_v: usize, cfg: &ModelConfig) -> TrainExample {
        let mut rng = stream_rng(seed, 0);
        let tokens = (0..t_a * cfg.n_q).map(|_| rng.random_range(0..cfg.k as u16)).collect();
        let grid = TokenGrid::new(tokens, t_a, cfg.n_q, cfg.k).unwrap();
        let video = (0..t_v * cfg.d_raw).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        TrainExample::new(format!("toy{seed}"), apply_delay(&grid), Matrix::from_vec(video, t_v, cfg.d_raw)).unwrap()
    }

    #[test]
    fn identical_steps_are_identical() {
        let mcfg = tiny_cfg(Conditioning::Fusion);
        let exs: Vec<_> = (0..4).map(|s| toy_example(s, 6, 3, &mcfg)).collect();
        let cfg = TrainConfig {
            batch_size: 2,
            steps: 3,
            ..TrainConfig::default()
        };
        let run = || {
            let mut t = Trainer::new(Params::init(&mcfg, 1).unwrap(), cfg.clone()).unwrap();
            t.run(&exs, None, None).unwrap();
            t.params
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn full_dropout_leaves_visual_projection_untouched() {
        let mcfg = tiny_cfg(Conditioning::Fusion);
        let p = Params::init(&mcfg, 3).unwrap();
        let exs: Vec<_> = (0..3).map(|s| toy_example(s, 5, 4, &mcfg)).collect();
        let batch: Vec<&TrainExample> = exs.iter().collect();
        let (g, _) = batch_gradient(&p, &batch, &[true; 3]).unwrap();
        let (g_real, _) = batch_gradient(&p, &batch, &[false; 3]).unwrap();
        let mut nonzero_with_video = false;
        for t in p.layout.tensors.iter().filter(|t| t.family == Family::VisualProjection) {
            assert!(g[t.span.range()].iter().all(|&v| v == 0.0), "{}", t.name);
            nonzero_with_video |= g_real[t.span.range()].iter().any(|&v| v != 0.0);
        }
        assert!(nonzero_with_video);
        // The dropout mask replaces all visual rows, so VPAD is unused too.
        assert!(g[p.layout.v_pad.range()].iter().all(|&v| v == 0.0));
        assert!(g[p.layout.u_cond.range()].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn dropout_rate_matches_probability() {
        let mask = dropout_mask(9, 0, 20000, 0.1);
        let rate = mask.iter().filter(|&&d| d).count() as f64 / 20000.0;
        assert!((rate - 0.1).abs() < 0.01);
        assert_eq!(mask, dropout_mask(9, 0, 20000, 0.1));
        assert_ne!(mask, dropout_mask(9, 1, 20000, 0.1));
    }

    #[test]
    fn loss_drops_when_overfitting_a_few_clips() {
        for conditioning in [Conditioning::Fusion, Conditioning::Prepend] {
            let mcfg = tiny_cfg(conditioning);
            let exs: Vec<_> = (0..2).map(|s| toy_example(s, 8, 4, &mcfg)).collect();
            let cfg = TrainConfig {
                lr: 1e-2,
                batch_size: 2,
                steps: 150,
                cfg_dropout: 0.0,
                weight_decay: 0.0,
                ..TrainConfig::default()
            };
            let mut t = Trainer::new(Params::init(&mcfg, 2).unwrap(), cfg).unwrap();
            let h = t.run(&exs, None, None).unwrap();
            assert!(h.last().unwrap().loss < 0.5 * h[0].loss, "{conditioning:?}: {} -> {}", h[0].loss, h.last().unwrap().loss);
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let mcfg = tiny_cfg(Conditioning::Fusion);
        let exs: Vec<_> = (0..5).map(|s| toy_example(s, 6, 3, &mcfg)).collect();
        let cfg = TrainConfig {
            batch_size: 2,
            steps: 6,
            cfg_dropout: 0.5,
            ..TrainConfig::default()
        };
        let mut full = Trainer::new(Params::init(&mcfg, 4).unwrap(), cfg.clone()).unwrap();
        full.run(&exs, None, None).unwrap();

        let mut first = Trainer::new(
            Params::init(&mcfg, 4).unwrap(),
            TrainConfig {
                steps: 3,
                ..cfg.clone()
            },
        )
        .unwrap();
        first.run(&exs, None, None).unwrap();
        let mut second = Trainer::resume(first.params, first.state, cfg).unwrap();
        second.run(&exs, None, None).unwrap();
        assert_eq!(second.params.data, full.params.data);
    }

    #[test]
    fn log_rows_follow_the_header() {
        let mcfg = tiny_cfg(Conditioning::Fusion);
        let exs = vec![toy_example(0, 4, 2, &mcfg)];
        let cfg = TrainConfig {
            steps: 4,
            log_every: 2,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(Params::init(&mcfg, 0).unwrap(), cfg).unwrap();
        let mut buf = Vec::new();
        t.run(&exs, Some(&mut buf), None).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let rows: Vec<&str> = text.lines().collect();
        assert_eq!(rows.len(), 2);
        for r in rows {
            assert_eq!(r.split(',').count(), LOG_HEADER.split(',').count());
        }
    }

    #[test]
    fn rejects_invalid_dropout() {
        let cfg = TrainConfig {
            cfg_dropout: 1.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
