//! Training loop, cross-validation driver, evaluation metrics and
//! prediction. Everything here is deterministic: (dataset, TrainConfig)
//! fully determines every logged loss and parameter byte.

use std::path::Path;
use std::time::Instant;

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::data::{batches, kfold, split, stack_batch, Dataset, SplitConfig};
use crate::error::{Result, SaltError};
use crate::loss::{loss_and_grad, sigmoid_cross_entropy_scalar, Reduction};
use crate::model::{build_model, Mode, Model, OUTPUT_HW};
use crate::optim::{adadelta_step, AdadeltaParams, OptimizerState};
use crate::ops::sigmoid_scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub lr_scale: f64,
    pub rho: f64,
    pub eps: f64,
    pub seed: u64,
    pub train_fraction: f64,
    pub faithful_table1: bool,
    pub reduction: Reduction,
    /// Epochs between loss-log rows.
    pub log_every: u64,
    /// Epochs between checkpoint saves; 0 saves only the final state.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 0,
            batch_size: 100,
            lr_scale: 0.01,
            rho: 0.95,
            eps: 1e-6,
            seed: 0,
            train_fraction: 0.8,
            faithful_table1: false,
            reduction: Reduction::MeanAll,
            log_every: 1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn hyper(&self) -> AdadeltaParams {
        AdadeltaParams {
            rho: self.rho,
            eps: self.eps,
            lr_scale: self.lr_scale,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossLogRow {
    pub epoch: u64,
    pub train_loss: f64,
    pub test_loss: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub mean_loss: f64,
    pub pixel_accuracy: f64,
    pub iou: f64,
}

/// One optimization pass over the whole training split. Returns the loss
/// numerator and its divisor units (elements or samples, per the reduction).
pub fn train_one_epoch(
    model: &mut Model,
    opt: &mut OptimizerState,
    train_set: &Dataset,
    cfg: &TrainConfig,
    epoch: u64,
) -> Result<(f64, f64)> {
    let hyper = cfg.hyper();
    let mut loss_sum = 0.0;
    let mut units = 0.0;
    for (batch_idx, (input, target)) in batches(train_set, cfg.batch_size, cfg.seed, epoch)
        .into_iter()
        .enumerate()
    {
        let logits = model.forward(&input, Mode::Train)?;
        let (loss, grad_logits) = loss_and_grad(&logits, &target, cfg.reduction)?;
        if !loss.mean_loss.is_finite() {
            return Err(SaltError::Numeric(format!(
                "non-finite loss at epoch {epoch}, batch {batch_idx}"
            )));
        }
        let batch_units = match cfg.reduction {
            Reduction::MeanAll => logits.len() as f64,
            Reduction::MeanBatch => logits.dims()[0] as f64,
        };
        loss_sum += loss.mean_loss * batch_units;
        units += batch_units;
        let grads = model.backward(&grad_logits)?;
        for (i, (gw, gb)) in grads.iter().enumerate() {
            let kernel = &mut model.params[i];
            adadelta_step(&mut kernel.weights, gw, &mut opt.slots[2 * i], &hyper)?;
            adadelta_step(&mut kernel.bias, gb, &mut opt.slots[2 * i + 1], &hyper)?;
        }
    }
    Ok((loss_sum, units))
}

/// Train on `dataset` split per the config, logging (epoch, train loss,
/// test loss) rows every `log_every` epochs. Resuming from a checkpoint
/// continues the exact trajectory of an uninterrupted run.
pub fn train(
    dataset: &Dataset,
    cfg: &TrainConfig,
    resume: Option<&Checkpoint>,
    checkpoint_path: Option<&Path>,
) -> Result<(Checkpoint, Vec<LossLogRow>)> {
    if dataset.is_empty() {
        return Err(SaltError::Validation("empty dataset".into()));
    }
    let (train_set, test_set) = split(
        dataset,
        &SplitConfig {
            train_fraction: cfg.train_fraction,
            shuffle_seed: cfg.seed,
        },
    )?;

    let (mut model, mut opt, start_epoch) = match resume {
        Some(ckpt) => {
            let (model, opt) = ckpt.restore()?;
            (model, opt, ckpt.epochs_completed)
        }
        None => {
            let model = build_model(cfg.seed, cfg.faithful_table1);
            let opt = OptimizerState::new(cfg.hyper(), &model.param_tensors());
            (model, opt, 0)
        }
    };

    let clock = Instant::now();
    let mut log = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        let (loss_sum, units) = train_one_epoch(&mut model, &mut opt, &train_set, cfg, epoch)?;
        let completed = epoch + 1;
        if cfg.log_every > 0 && (completed % cfg.log_every == 0 || completed == cfg.epochs) {
            let test_loss = evaluate_model(&mut model, &test_set, cfg.reduction)?.mean_loss;
            log.push(LossLogRow {
                epoch: completed,
                train_loss: loss_sum / units,
                test_loss,
                wall_seconds: clock.elapsed().as_secs_f64(),
            });
        }
        if cfg.checkpoint_every > 0 && completed % cfg.checkpoint_every == 0 {
            if let Some(path) = checkpoint_path {
                save_checkpoint(path, &Checkpoint::capture(&model, &opt, cfg, completed))?;
            }
        }
    }

    let final_ckpt = Checkpoint::capture(&model, &opt, cfg, cfg.epochs);
    if let Some(path) = checkpoint_path {
        save_checkpoint(path, &final_ckpt)?;
    }
    Ok((final_ckpt, log))
}

pub fn write_loss_log(path: &Path, rows: &[LossLogRow]) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "epoch,train_loss,test_loss,wall_seconds")?;
    for r in rows {
        writeln!(
            f,
            "{},{:.17e},{:.17e},{:.3}",
            r.epoch, r.train_loss, r.test_loss, r.wall_seconds
        )?;
    }
    Ok(())
}

/// Mean loss plus thresholded pixel accuracy and IoU over a dataset,
/// evaluated in id order so results are bit-stable.
pub fn evaluate_model(
    model: &mut Model,
    dataset: &Dataset,
    reduction: Reduction,
) -> Result<Metrics> {
    if dataset.is_empty() {
        return Err(SaltError::Validation("empty dataset".into()));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.sort_by(|&a, &b| dataset.samples[a].id.cmp(&dataset.samples[b].id));

    let pixels = OUTPUT_HW * OUTPUT_HW;
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut intersection = 0usize;
    let mut union = 0usize;
    for chunk in order.chunks(8) {
        let picked: Vec<_> = chunk.iter().map(|&i| &*dataset.samples[i]).collect();
        let (input, target) = stack_batch(&picked);
        let logits = model.forward(&input, Mode::Infer)?;
        for (s, _) in picked.iter().enumerate() {
            let lp = logits.plane(s, 0);
            let tp = target.plane(s, 0);
            let mut sample_sum = 0.0;
            for (&x, &z) in lp.iter().zip(tp) {
                sample_sum += sigmoid_cross_entropy_scalar(x, z);
                let pred = sigmoid_scalar(x) >= 0.5;
                let truth = z == 1.0;
                correct += usize::from(pred == truth);
                intersection += usize::from(pred && truth);
                union += usize::from(pred || truth);
            }
            loss_sum += sample_sum;
        }
    }
    let n = dataset.len();
    let mean_loss = match reduction {
        Reduction::MeanAll => loss_sum / (n * pixels) as f64,
        Reduction::MeanBatch => loss_sum / n as f64,
    };
    Ok(Metrics {
        mean_loss,
        pixel_accuracy: correct as f64 / (n * pixels) as f64,
        iou: if union == 0 {
            1.0
        } else {
            intersection as f64 / union as f64
        },
    })
}

pub fn evaluate(ckpt: &Checkpoint, dataset: &Dataset) -> Result<Metrics> {
    let (mut model, _) = ckpt.restore()?;
    evaluate_model(&mut model, dataset, ckpt.config.reduction)
}

/// Per-fold training and validation. Each fold starts from `warm` when
/// given, otherwise from a fresh seed-built model. Returns the fold losses
/// and their arithmetic mean.
pub fn cross_validate(
    dataset: &Dataset,
    k: usize,
    warm: Option<&Checkpoint>,
    epochs_per_fold: u64,
    cfg: &TrainConfig,
) -> Result<(Vec<f64>, f64)> {
    let folds = kfold(dataset, k, cfg.seed)?;
    let mut losses = Vec::with_capacity(k);
    for (fold_train, fold_val) in &folds {
        let (mut model, mut opt) = match warm {
            Some(ckpt) => ckpt.restore()?,
            None => {
                let model = build_model(cfg.seed, cfg.faithful_table1);
                let opt = OptimizerState::new(cfg.hyper(), &model.param_tensors());
                (model, opt)
            }
        };
        for epoch in 0..epochs_per_fold {
            train_one_epoch(&mut model, &mut opt, fold_train, cfg, epoch)?;
        }
        losses.push(evaluate_model(&mut model, fold_val, cfg.reduction)?.mean_loss);
    }
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    Ok((losses, mean))
}

/// Sigmoid probabilities for one (1, 101, 101) image.
pub fn predict_probs(model: &mut Model, image: &Tensor) -> Result<Tensor> {
    if image.dims() != [1, crate::data::NATIVE_HW, crate::data::NATIVE_HW] {
        return Err(SaltError::Shape(format!(
            "expected a (1, 101, 101) image, got {:?}",
            image.dims()
        )));
    }
    let input = crate::data::prepare_image(image);
    let logits = model.forward(&input, Mode::Infer)?;
    Ok(logits.map(sigmoid_scalar))
}

/// Probability < 0.5 maps to 0, otherwise (>= 0.5) to 1.
pub fn threshold_probs(probs: &Tensor) -> Tensor {
    probs.map(|p| if p < 0.5 { 0.0 } else { 1.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            seed: 11,
            train_fraction: 0.5,
            log_every: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_equals_fresh_model() {
        let ds = synth_generate(4, 1);
        let cfg = TrainConfig {
            epochs: 0,
            ..quick_cfg()
        };
        let (ckpt, log) = train(&ds, &cfg, None, None).unwrap();
        assert!(log.is_empty());
        let fresh = build_model(cfg.seed, cfg.faithful_table1);
        let (restored, _) = ckpt.restore().unwrap();
        for (a, b) in fresh.params.iter().zip(&restored.params) {
            assert_eq!(a.weights, b.weights);
            assert_eq!(a.bias, b.bias);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let ds = synth_generate(4, 2);
        let cfg = quick_cfg();
        let (a, log_a) = train(&ds, &cfg, None, None).unwrap();
        let (b, log_b) = train(&ds, &cfg, None, None).unwrap();
        assert_eq!(crate::checkpoint::encode(&a), crate::checkpoint::encode(&b));
        assert_eq!(log_a.len(), log_b.len());
        for (x, y) in log_a.iter().zip(&log_b) {
            assert_eq!(x.epoch, y.epoch);
            assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
            assert_eq!(x.test_loss.to_bits(), y.test_loss.to_bits());
        }
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let ds = synth_generate(4, 3);
        let full_cfg = TrainConfig {
            epochs: 4,
            ..quick_cfg()
        };
        let (full, _) = train(&ds, &full_cfg, None, None).unwrap();

        let half_cfg = TrainConfig {
            epochs: 2,
            ..full_cfg.clone()
        };
        let (half, _) = train(&ds, &half_cfg, None, None).unwrap();
        let mut resumed_from = half.clone();
        resumed_from.config = full_cfg.clone();
        let (resumed, _) = train(&ds, &full_cfg, Some(&resumed_from), None).unwrap();
        assert_eq!(
            crate::checkpoint::encode(&full),
            crate::checkpoint::encode(&resumed)
        );
    }

    #[test]
    fn logged_test_loss_matches_reevaluation() {
        let ds = synth_generate(4, 4);
        let cfg = quick_cfg();
        let (ckpt, log) = train(&ds, &cfg, None, None).unwrap();
        let (_, test_set) = split(
            &ds,
            &SplitConfig {
                train_fraction: cfg.train_fraction,
                shuffle_seed: cfg.seed,
            },
        )
        .unwrap();
        let metrics = evaluate(&ckpt, &test_set).unwrap();
        let last = log.last().unwrap();
        assert!((metrics.mean_loss - last.test_loss).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictor_metrics() {
        // Feed targets back as saturated logits through the metric math.
        let ds = synth_generate(2, 5);
        let mut correct = 0;
        let mut inter = 0;
        let mut union = 0;
        let mut loss = 0.0;
        for s in &ds.samples {
            for &z in s.mask.data() {
                let x = if z == 1.0 { 1e4 } else { -1e4 };
                loss += sigmoid_cross_entropy_scalar(x, z);
                let pred = sigmoid_scalar(x) >= 0.5;
                let truth = z == 1.0;
                correct += usize::from(pred == truth);
                inter += usize::from(pred && truth);
                union += usize::from(pred || truth);
            }
        }
        let total = 2 * 101 * 101;
        assert_eq!(correct, total);
        assert_eq!(inter, union);
        assert!(loss / (total as f64) < 1e-12);
    }

    #[test]
    fn constant_zero_logits_metrics() {
        // Zero logits threshold to 1 everywhere: accuracy equals the salt
        // fraction and the loss is ln 2.
        let ds = synth_generate(6, 8);
        let salt: usize = ds
            .samples
            .iter()
            .map(|s| s.mask.data().iter().filter(|&&v| v == 1.0).count())
            .sum();
        let total = 6 * 101 * 101;
        let p = salt as f64 / total as f64;
        let mut correct = 0;
        let mut loss = 0.0;
        for s in &ds.samples {
            for &z in s.mask.data() {
                loss += sigmoid_cross_entropy_scalar(0.0, z);
                correct += usize::from((sigmoid_scalar(0.0) >= 0.5) == (z == 1.0));
            }
        }
        assert!((loss / total as f64 - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((correct as f64 / total as f64 - p).abs() < 1e-12);
    }

    #[test]
    fn iou_hand_oracle() {
        // 3-pixel masks: pred {a,b}, truth {b,c} -> IoU 1/3.
        let pred = [true, true, false];
        let truth = [false, true, true];
        let inter = pred.iter().zip(&truth).filter(|(p, t)| **p && **t).count();
        let union = pred.iter().zip(&truth).filter(|(p, t)| **p || **t).count();
        assert_eq!(inter, 1);
        assert_eq!(union, 3);
    }

    #[test]
    fn cv_mean_is_arithmetic_mean() {
        let ds = synth_generate(8, 9);
        let cfg = TrainConfig {
            epochs: 0,
            batch_size: 4,
            seed: 13,
            ..TrainConfig::default()
        };
        let (losses, mean) = cross_validate(&ds, 2, None, 1, &cfg).unwrap();
        assert_eq!(losses.len(), 2);
        assert_eq!(mean, (losses[0] + losses[1]) / 2.0);
        let (losses2, _) = cross_validate(&ds, 2, None, 1, &cfg).unwrap();
        assert_eq!(losses, losses2);
    }

    #[test]
    fn threshold_boundary() {
        let probs = Tensor::new(vec![3], vec![0.499, 0.5, 0.501]).unwrap();
        assert_eq!(threshold_probs(&probs).data(), &[0.0, 1.0, 1.0]);
    }
}
