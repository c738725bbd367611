//! Deterministic desk-scale training: SGD with momentum over the tiny network,
//! with optional online hard example mining and per-iteration loss history.

mod gradcheck;
mod synth;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::boxes::{GridSpec, GroundTruth};
use crate::loss::{detection_loss_with_grad, HeadLayout, LossBreakdown, LossError, LossWeights, LsrConfig};
use crate::mining::{ohem_select, MiningConfig, MiningError};
use crate::network::{Gradients, Network, NetworkError};
use crate::tensor::{Real, Tensor};

pub use gradcheck::{
    grad_check_composite, grad_check_linear, probe_spec, relative_error, BackwardMode, GradCheckReport,
    COMPOSITE_TOLERANCE, FD_STEP, LINEAR_TOLERANCE, SAMPLE_FRACTION,
};
pub use synth::{synth_dataset, SYNTH_NOISE, SYNTH_SIZE};

/// Gradient-norm cap of the desk-scale recipe.
pub const TOY_MAX_GRAD_NORM: f64 = 10.0;
/// Loss level treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;
pub const HISTORY_HEADER: &str = "iter,total,coord,obj,noobj,class";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("training diverged at iteration {iteration}: loss {loss}")]
    Diverged { iteration: usize, loss: f64 },
    #[error("gradient layout does not match the network: {0}")]
    GradientMismatch(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Mining(#[from] MiningError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One training image and its objects.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub gts: Vec<GroundTruth>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub ohem_enabled: bool,
    pub mining: MiningConfig,
    pub lsr: LsrConfig,
    pub weights: LossWeights,
    /// Set batch-norm statistics from the training images before the first step.
    pub calibrate_batch_norm: bool,
    /// Rescale the batch gradient to at most this L2 norm before each step.
    pub max_grad_norm: Option<f64>,
}

impl TrainConfig {
    /// The desk-scale recipe: 300 iterations of batch 8, lr 1e-3, momentum 0.9, mining on.
    pub fn toy(seed: u64) -> Self {
        Self {
            seed,
            iterations: 300,
            batch_size: 8,
            learning_rate: 1e-3,
            momentum: 0.9,
            ohem_enabled: true,
            mining: MiningConfig::default(),
            lsr: LsrConfig::new(crate::loss::DEFAULT_EPSILON, crate::network::DEFAULT_NUM_CLASSES)
                .expect("default label smoothing is valid"),
            weights: LossWeights::default(),
            calibrate_batch_norm: true,
            max_grad_norm: Some(TOY_MAX_GRAD_NORM),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be finite and non-negative", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("gradient norm cap {c} must be positive"));
            }
        }
        MiningConfig::new(self.mining.hard_ratio)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub total: f64,
    pub coord: f64,
    pub obj: f64,
    pub noobj: f64,
    pub class: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossHistory {
    pub records: Vec<IterationRecord>,
}

impl LossHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn totals(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.total).collect()
    }

    /// Mean total loss over the first `window` iterations.
    pub fn head_mean(&self, window: usize) -> f64 {
        mean(self.records.iter().take(window).map(|r| r.total))
    }

    /// Mean total loss over the last `window` iterations.
    pub fn tail_mean(&self, window: usize) -> f64 {
        mean(self.records.iter().rev().take(window).map(|r| r.total))
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{HISTORY_HEADER}\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.iteration, r.total, r.coord, r.obj, r.noobj, r.class
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(self.to_csv().as_bytes())?;
        f.flush()
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// `v <- momentum * v - lr * g`, then `theta <- theta + v`.
pub fn sgd_step<T: Real>(
    net: &mut Network<T>,
    grads: &Gradients<T>,
    lr: f64,
    momentum: f64,
    velocity: &mut Gradients<T>,
) -> Result<(), TrainError> {
    let g = grads.slices();
    let mut params = net.trainable_mut();
    if g.len() != params.len() || g.iter().zip(params.iter()).any(|(a, b)| a.len() != b.len()) {
        return Err(TrainError::GradientMismatch("gradient arrays differ from parameter arrays".into()));
    }
    let v_len_ok = {
        let v = velocity.slices();
        v.len() == g.len() && v.iter().zip(&g).all(|(a, b)| a.len() == b.len())
    };
    if !v_len_ok {
        return Err(TrainError::GradientMismatch("velocity arrays differ from parameter arrays".into()));
    }
    velocity.add_scaled_in_place(momentum, grads, -lr);
    for (p, v) in params.iter_mut().zip(velocity.slices()) {
        for (a, b) in p.iter_mut().zip(v) {
            *a = T::from_f64(a.to_f64() + b.to_f64());
        }
    }
    Ok(())
}

/// Everything one optimization step measured, for instrumentation.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub iteration: usize,
    /// Dataset indices in the batch, in batch order.
    pub batch: Vec<usize>,
    /// Weighted total loss of each batch image.
    pub image_losses: Vec<f64>,
    /// Batch positions whose gradients were propagated.
    pub selected: Vec<usize>,
    /// L2 norm of each batch image's contribution to the parameter gradient.
    pub image_grad_norms: Vec<f64>,
    /// Batch mean of every loss term.
    pub loss: LossBreakdown,
}

/// The network's detection head as the loss sees it.
pub fn head_layout<T: Real>(net: &Network<T>) -> HeadLayout<'_> {
    HeadLayout {
        anchors: &net.spec().anchors,
        grid: GridSpec::new(net.grid_size()),
        num_classes: net.spec().num_classes,
    }
}

struct ImagePass {
    loss: LossBreakdown,
    grads: Option<Gradients<f32>>,
}

/// Runs `cfg.iterations` steps and returns the trained network with its
/// loss history.
pub fn train(net: Network<f32>, cfg: &TrainConfig, dataset: &[Sample]) -> Result<(Network<f32>, LossHistory), TrainError> {
    train_observed(net, cfg, dataset, |_| {})
}

/// [`train`], calling `observe` after every step.
pub fn train_observed(
    mut net: Network<f32>,
    cfg: &TrainConfig,
    dataset: &[Sample],
    mut observe: impl FnMut(&StepReport),
) -> Result<(Network<f32>, LossHistory), TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if cfg.lsr.num_classes() != net.spec().num_classes {
        return Err(TrainError::InvalidConfig(format!(
            "label smoothing over {} classes, network has {}",
            cfg.lsr.num_classes(),
            net.spec().num_classes
        )));
    }
    if cfg.calibrate_batch_norm {
        let images: Vec<Tensor<f32>> = dataset.iter().map(|s| s.image.clone()).collect();
        net.calibrate_batch_norm(&images)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut velocity = Gradients::zeros_like(&net);
    let mut history = LossHistory::default();
    let scale = 1.0 / cfg.batch_size as f64;

    for iteration in 0..cfg.iterations {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..dataset.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        let head = head_layout(&net);
        let forward: Vec<(LossBreakdown, Tensor<f32>, crate::network::Trace<f32>)> = batch
            .par_iter()
            .map(|&i| -> Result<_, TrainError> {
                let s = &dataset[i];
                let trace = net.forward_trace(&s.image)?;
                let (loss, grad, _) = detection_loss_with_grad(trace.output(), &s.gts, &head, &cfg.weights, &cfg.lsr)?;
                Ok((loss, grad, trace))
            })
            .collect::<Result<_, _>>()?;
        let image_losses: Vec<f64> = forward.iter().map(|f| f.0.total).collect();
        let selected = if cfg.ohem_enabled {
            ohem_select(&image_losses, &cfg.mining)?
        } else {
            (0..batch.len()).collect()
        };
        let mut keep = vec![false; batch.len()];
        for &s in &selected {
            keep[s] = true;
        }

        let passes: Vec<ImagePass> = forward
            .into_par_iter()
            .zip(keep.par_iter())
            .map(|((loss, grad, trace), &k)| -> Result<ImagePass, TrainError> {
                let grads = if k { Some(net.backward(&trace, &grad)?.0) } else { None };
                Ok(ImagePass { loss, grads })
            })
            .collect::<Result<_, _>>()?;

        let mut total_grads = Gradients::zeros_like(&net);
        let mut batch_loss = LossBreakdown::default();
        let mut image_grad_norms = Vec::with_capacity(passes.len());
        for p in &passes {
            batch_loss.accumulate(&p.loss);
            match &p.grads {
                Some(g) => {
                    image_grad_norms.push(g.l2_norm() * scale);
                    total_grads.add_scaled(g, scale);
                }
                None => image_grad_norms.push(0.0),
            }
        }
        let batch_loss = batch_loss.scaled(scale);
        if !batch_loss.total.is_finite() || batch_loss.total > DIVERGENCE_LIMIT {
            return Err(TrainError::Diverged {
                iteration,
                loss: batch_loss.total,
            });
        }
        history.records.push(IterationRecord {
            iteration,
            total: batch_loss.total,
            coord: batch_loss.coord_loss,
            obj: batch_loss.obj_loss,
            noobj: batch_loss.noobj_loss,
            class: batch_loss.class_loss,
        });
        observe(&StepReport {
            iteration,
            batch,
            image_losses,
            selected,
            image_grad_norms,
            loss: batch_loss,
        });
        if let Some(cap) = cfg.max_grad_norm {
            let norm = total_grads.l2_norm();
            if norm > cap {
                total_grads.map_in_place(|v| f32::from_f64(v.to_f64() * cap / norm));
            }
        }
        sgd_step(&mut net, &total_grads, cfg.learning_rate, cfg.momentum, &mut velocity)?;
        if !net.all_finite() {
            return Err(TrainError::Diverged {
                iteration,
                loss: f64::NAN,
            });
        }
        log::debug!("iter {iteration} loss {:.5}", batch_loss.total);
    }
    Ok((net, history))
}
