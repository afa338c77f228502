//! Loss, AdamW, cosine schedule, mIoU metrics, and the deterministic
//! training loop with checkpointing and a JSONL metrics log.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Snapshot};
use crate::config::ConfigFile;
use crate::dataset::{batch_tensors, load_manifest, load_split, Sample};
use crate::error::{Error, Result};
use crate::graph::{Graph, Tensor};
use crate::model::{forward, init_model, ModelDims};
use crate::nn::{Bound, ParamStore};
use crate::rng::SeededRng;

// ---------------------------------------------------------------------------
// optimizer

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment buffers mirroring parameter shapes, plus step count.
pub struct OptimizerState {
    pub m: BTreeMap<String, Tensor<f32>>,
    pub v: BTreeMap<String, Tensor<f32>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore<f32>) -> OptimizerState {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (path, p) in params.iter() {
            m.insert(path.clone(), Tensor::zeros(&p.tensor.shape));
            v.insert(path.clone(), Tensor::zeros(&p.tensor.shape));
        }
        OptimizerState { m, v, step: 0 }
    }
}

/// One decoupled-weight-decay Adam step. Decay is applied to the parameter
/// before the adaptive update; non-trainable parameters are untouched.
pub fn adamw_step(
    params: &mut ParamStore<f32>,
    grads: &BTreeMap<String, Tensor<f32>>,
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (path, p) in params.iter_mut() {
        if !p.trainable {
            continue;
        }
        let g = match grads.get(path) {
            Some(g) => g,
            None => continue,
        };
        let m = state
            .m
            .get_mut(path)
            .ok_or_else(|| Error::State(format!("optimizer has no moment for {path}")))?;
        let v = state
            .v
            .get_mut(path)
            .ok_or_else(|| Error::State(format!("optimizer has no moment for {path}")))?;
        if g.shape != p.tensor.shape || m.shape != p.tensor.shape {
            return Err(Error::State(format!(
                "shape drift for {path}: param {:?}, grad {:?}, moment {:?}",
                p.tensor.shape, g.shape, m.shape
            )));
        }
        for i in 0..p.tensor.data.len() {
            let gi = g.data[i] as f64;
            let mut pi = p.tensor.data[i] as f64;
            pi -= lr * weight_decay * pi;
            let mi = ADAM_BETA1 * m.data[i] as f64 + (1.0 - ADAM_BETA1) * gi;
            let vi = ADAM_BETA2 * v.data[i] as f64 + (1.0 - ADAM_BETA2) * gi * gi;
            m.data[i] = mi as f32;
            v.data[i] = vi as f32;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            pi -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            p.tensor.data[i] = pi as f32;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// schedule

/// Linear warmup from 0 to base, then cosine decay from base to min.
pub fn lr_schedule(
    step: u64,
    total_steps: u64,
    warmup_steps: u64,
    base_lr: f64,
    min_lr: f64,
) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return base_lr;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

// ---------------------------------------------------------------------------
// metrics

#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub miou: f64,
    /// None for classes absent from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub pixel_acc: f64,
    /// Row = ground truth class, column = predicted class.
    #[serde(skip)]
    pub confusion: Vec<u64>,
}

pub fn confusion_matrix(pred: &[u8], gt: &[u8], num_classes: usize) -> Result<Vec<u64>> {
    if pred.len() != gt.len() {
        return Err(Error::Data(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut cm = vec![0u64; num_classes * num_classes];
    for (i, (&p, &g)) in pred.iter().zip(gt.iter()).enumerate() {
        if (p as usize) >= num_classes || (g as usize) >= num_classes {
            return Err(Error::Data(format!(
                "class index out of range at pixel {i}: pred {p}, gt {g}"
            )));
        }
        cm[g as usize * num_classes + p as usize] += 1;
    }
    Ok(cm)
}

/// Metrics from a confusion matrix; zero-union classes are excluded from the
/// mean rather than scored.
pub fn report_from_confusion(cm: &[u64], num_classes: usize) -> MetricReport {
    let mut per_class = Vec::with_capacity(num_classes);
    let mut sum = 0.0;
    let mut counted = 0usize;
    let mut correct = 0u64;
    let mut total = 0u64;
    for c in 0..num_classes {
        let inter = cm[c * num_classes + c];
        let gt_count: u64 = (0..num_classes).map(|j| cm[c * num_classes + j]).sum();
        let pred_count: u64 = (0..num_classes).map(|j| cm[j * num_classes + c]).sum();
        let union = gt_count + pred_count - inter;
        correct += inter;
        total += gt_count;
        if union == 0 {
            per_class.push(None);
        } else {
            let iou = inter as f64 / union as f64;
            per_class.push(Some(iou));
            sum += iou;
            counted += 1;
        }
    }
    MetricReport {
        miou: if counted == 0 { 0.0 } else { sum / counted as f64 },
        per_class_iou: per_class,
        pixel_acc: if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        },
        confusion: cm.to_vec(),
    }
}

pub fn miou(pred: &[u8], gt: &[u8], num_classes: usize) -> Result<MetricReport> {
    let cm = confusion_matrix(pred, gt, num_classes)?;
    Ok(report_from_confusion(&cm, num_classes))
}

/// Per-pixel argmax over the class axis of [B,K,H,W] logits; ties go to the
/// lowest class index.
pub fn argmax_classes(logits: &Tensor<f32>) -> Vec<u8> {
    let (b, k, h, w) = (
        logits.shape[0],
        logits.shape[1],
        logits.shape[2],
        logits.shape[3],
    );
    let hw = h * w;
    let mut out = Vec::with_capacity(b * hw);
    for bi in 0..b {
        for pix in 0..hw {
            let mut best = 0usize;
            let mut best_v = f32::NEG_INFINITY;
            for c in 0..k {
                let v = logits.data[(bi * k + c) * hw + pix];
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

/// Evaluate a parameter set over samples in ascending index order, merging
/// per-batch confusion matrices; bit-identical to a one-batch-at-a-time run.
pub fn evaluate(
    params: &ParamStore<f32>,
    dims: &ModelDims,
    samples: &[Sample],
    batch: usize,
) -> Result<MetricReport> {
    let k = dims.num_classes;
    let mut cm = vec![0u64; k * k];
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (images, targets) = batch_tensors::<f32>(&refs)?;
        let mut g: Graph<f32> = Graph::new();
        let bound = Bound::bind(&mut g, params);
        let img = g.constant(images);
        let out = forward(&mut g, &bound, img, dims)?;
        let pred = argmax_classes(g.value(out.logits));
        let gt: Vec<u8> = targets.iter().map(|&t| t as u8).collect();
        let part = confusion_matrix(&pred, &gt, k)?;
        for (acc, x) in cm.iter_mut().zip(part) {
            *acc += x;
        }
    }
    Ok(report_from_confusion(&cm, k))
}

// ---------------------------------------------------------------------------
// training loop

#[derive(Serialize)]
struct MetricsLine<'a> {
    step: u64,
    lr: f64,
    loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    miou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    per_class_iou: Option<&'a Vec<Option<f64>>>,
}

pub struct TrainOutcome {
    pub final_step: u64,
    pub best_miou: f64,
    pub last_loss: f64,
}

/// Deterministic epoch ordering: a fresh substream per epoch index.
fn epoch_order(seed: u64, epoch: u64, count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..count).collect();
    let mut rng = SeededRng::substream(seed.wrapping_add(0x9E3779B97F4A7C15), epoch);
    rng.shuffle(&mut order);
    order
}

/// Run (or resume) training. Writes `last.ckpt`, `best.ckpt`, and
/// `metrics.jsonl` under `out_dir`. The whole run is a deterministic function
/// of (config, dataset bytes, seed).
pub fn train_loop(
    cfg: &ConfigFile,
    data_dir: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    train_loop_until(cfg, data_dir, out_dir, resume, None)
}

/// `train_loop` with an optional early stop, modelling an interrupted run.
/// Stopping at an eval boundary leaves `last.ckpt` ready to resume from.
pub fn train_loop_until(
    cfg: &ConfigFile,
    data_dir: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
    stop_after: Option<u64>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dims = ModelDims::from_config(cfg)?;
    let manifest = load_manifest(data_dir)?;
    if manifest.size != cfg.model.input_size {
        return Err(Error::Data(format!(
            "dataset size {} does not match configured input size {}",
            manifest.size, cfg.model.input_size
        )));
    }
    if manifest.classes != cfg.model.num_classes {
        return Err(Error::Data(format!(
            "dataset has {} classes, config expects {}",
            manifest.classes, cfg.model.num_classes
        )));
    }
    let train_set = load_split(data_dir, &manifest.splits.train)?;
    if train_set.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let eval_set = if manifest.splits.test.is_empty() {
        train_set.clone()
    } else {
        load_split(data_dir, &manifest.splits.test)?
    };

    let seed = cfg.train.seed;
    let (mut params, mut opt, start_step, mut best) = match resume {
        Some(path) => {
            let snap = load_checkpoint(path)?;
            if snap.config != *cfg {
                return Err(Error::Config(
                    "resume checkpoint was trained with a different config".into(),
                ));
            }
            let opt = OptimizerState {
                m: snap.opt_m,
                v: snap.opt_v,
                step: snap.step,
            };
            (snap.params, opt, snap.step, snap.best as f64)
        }
        None => {
            let params: ParamStore<f32> = init_model(&dims, seed);
            let opt = OptimizerState::new(&params);
            (params, opt, 0, f64::NEG_INFINITY)
        }
    };

    std::fs::create_dir_all(out_dir).map_err(|e| Error::Io {
        path: out_dir.display().to_string(),
        source: e,
    })?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::Io {
            path: metrics_path.display().to_string(),
            source: e,
        })?;

    let total_steps = cfg.train.steps as u64;
    let warmup_steps = (cfg.train.steps as f64 * cfg.train.warmup_frac).round() as u64;
    let base_lr = cfg.train.lr;
    let min_lr = base_lr * cfg.train.min_lr_frac;
    let batch = cfg.train.batch.min(train_set.len());
    let steps_per_epoch = (train_set.len() / batch).max(1) as u64;

    let end_step = stop_after.map_or(total_steps, |s| s.min(total_steps));
    let mut last_loss = f64::NAN;
    for step in start_step..end_step {
        let epoch = step / steps_per_epoch;
        let slot = (step % steps_per_epoch) as usize;
        let order = epoch_order(seed, epoch, train_set.len());
        let refs: Vec<&Sample> = order[slot * batch..(slot + 1) * batch]
            .iter()
            .map(|&i| &train_set[i])
            .collect();
        let (images, targets) = batch_tensors::<f32>(&refs)?;

        let mut g: Graph<f32> = Graph::new();
        let bound = Bound::bind(&mut g, &params);
        let img = g.constant(images);
        let out = forward(&mut g, &bound, img, &dims)?;
        let loss = g.cross_entropy(out.logits, &targets, None)?;
        let loss_value = loss_scalar(&g, loss)?;
        if !loss_value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {step}"
            )));
        }
        g.backward(loss)?;
        let grads = bound.grads(&g);
        let lr = lr_schedule(step, total_steps, warmup_steps, base_lr, min_lr);
        adamw_step(&mut params, &grads, &mut opt, lr, cfg.train.weight_decay)?;
        last_loss = loss_value;

        let next = step + 1;
        let eval_now = (cfg.train.eval_every > 0 && next % cfg.train.eval_every as u64 == 0)
            || next == total_steps;
        let mut line = MetricsLine {
            step: next,
            lr,
            loss: loss_value,
            miou: None,
            per_class_iou: None,
        };
        let report = if eval_now {
            Some(evaluate(&params, &dims, &eval_set, batch)?)
        } else {
            None
        };
        if let Some(r) = &report {
            line.miou = Some(r.miou);
            line.per_class_iou = Some(&r.per_class_iou);
        }
        let text = serde_json::to_string(&line).expect("metrics line serializes");
        writeln!(metrics, "{text}").map_err(|e| Error::Io {
            path: metrics_path.display().to_string(),
            source: e,
        })?;

        if eval_now {
            let snap = Snapshot {
                params: params.clone(),
                opt_m: opt.m.clone(),
                opt_v: opt.v.clone(),
                step: next,
                best: best.max(report.as_ref().unwrap().miou) as f32,
                config: cfg.clone(),
            };
            if let Some(r) = &report {
                if r.miou > best {
                    // round through f32 so a resumed run (which reads `best`
                    // back from the checkpoint) compares against the same value
                    best = r.miou as f32 as f64;
                    save_checkpoint(&out_dir.join("best.ckpt"), &snap)?;
                }
            }
            save_checkpoint(&out_dir.join("last.ckpt"), &snap)?;
        }
    }
    Ok(TrainOutcome {
        final_step: end_step,
        best_miou: best,
        last_loss,
    })
}

fn loss_scalar(g: &Graph<f32>, loss: crate::graph::Var) -> Result<f64> {
    Ok(g.value(loss).data[0] as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(value: f32) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::new(vec![1], vec![value]).unwrap());
        s
    }

    #[test]
    fn adamw_hand_stepped_scalar() {
        let mut params = scalar_store(1.0);
        let mut state = OptimizerState::new(&params);
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Tensor::new(vec![1], vec![1.0]).unwrap());
        adamw_step(&mut params, &grads, &mut state, 0.1, 0.0).unwrap();
        let p = params.get("p").unwrap().tensor.data[0] as f64;
        // m_hat = v_hat = 1, so p = 1 - 0.1 / (1 + eps)
        assert!((p - 0.9).abs() < 1e-6, "{p}");
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut params = scalar_store(2.0);
        let mut state = OptimizerState::new(&params);
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Tensor::new(vec![1], vec![0.0]).unwrap());
        for _ in 0..3 {
            adamw_step(&mut params, &grads, &mut state, 0.1, 0.5).unwrap();
        }
        let p = params.get("p").unwrap().tensor.data[0] as f64;
        // zero grads and zero moments: pure decay (1 - lr*wd)^3
        assert!((p - 2.0 * 0.95f64.powi(3)).abs() < 1e-6, "{p}");
    }

    #[test]
    fn zero_wd_zero_grads_is_identity() {
        let mut params = scalar_store(1.5);
        let mut state = OptimizerState::new(&params);
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Tensor::new(vec![1], vec![0.0]).unwrap());
        for _ in 0..10 {
            adamw_step(&mut params, &grads, &mut state, 0.1, 0.0).unwrap();
        }
        assert_eq!(params.get("p").unwrap().tensor.data[0], 1.5);
    }

    #[test]
    fn frozen_param_untouched() {
        let mut params = scalar_store(1.0);
        params.set_trainable_prefix("p", false);
        let mut state = OptimizerState::new(&params);
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Tensor::new(vec![1], vec![5.0]).unwrap());
        for _ in 0..100 {
            adamw_step(&mut params, &grads, &mut state, 0.1, 0.5).unwrap();
        }
        assert_eq!(params.get("p").unwrap().tensor.data[0], 1.0);
    }

    #[test]
    fn shape_drift_rejected() {
        let mut params = scalar_store(1.0);
        let mut state = OptimizerState::new(&params);
        let mut grads = BTreeMap::new();
        grads.insert(
            "p".to_string(),
            Tensor::new(vec![2], vec![1.0, 1.0]).unwrap(),
        );
        assert!(matches!(
            adamw_step(&mut params, &grads, &mut state, 0.1, 0.0),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn schedule_boundaries() {
        let base = 1.0;
        let min = 0.01;
        assert_eq!(lr_schedule(10, 100, 10, base, min), base);
        let end = lr_schedule(100, 100, 10, base, min);
        assert!((end - min).abs() < 1e-12);
        let mid = lr_schedule(55, 100, 10, base, min);
        assert!((mid - (base + min) / 2.0).abs() < 1e-12);
        assert_eq!(lr_schedule(0, 100, 10, base, min), 0.0);
        assert_eq!(lr_schedule(5, 100, 10, base, min), 0.5);
    }

    #[test]
    fn miou_hand_case() {
        // pred [[0,1],[1,1]] vs gt [[0,1],[0,1]]
        let pred = [0u8, 1, 1, 1];
        let gt = [0u8, 1, 0, 1];
        let r = miou(&pred, &gt, 2).unwrap();
        assert!((r.per_class_iou[0].unwrap() - 0.5).abs() < 1e-9);
        assert!((r.per_class_iou[1].unwrap() - 2.0 / 3.0).abs() < 1e-9);
        assert!((r.miou - 7.0 / 12.0).abs() < 1e-9);
        assert!((r.pixel_acc - 0.75).abs() < 1e-9);
    }

    #[test]
    fn miou_identity_and_disjoint() {
        let a = [0u8, 1, 2, 1];
        let r = miou(&a, &a, 3).unwrap();
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.pixel_acc, 1.0);
        let pred = [1u8, 1, 0, 0];
        let gt = [0u8, 0, 1, 1];
        let r = miou(&pred, &gt, 2).unwrap();
        assert_eq!(r.miou, 0.0);
    }

    #[test]
    fn miou_excludes_zero_union_classes() {
        let pred = [0u8, 1];
        let gt = [0u8, 1];
        let r = miou(&pred, &gt, 4).unwrap();
        assert_eq!(r.per_class_iou[2], None);
        assert_eq!(r.per_class_iou[3], None);
        assert_eq!(r.miou, 1.0);
    }

    #[test]
    fn miou_relabeling_symmetry() {
        let pred = [0u8, 1, 2, 2, 1, 0];
        let gt = [0u8, 2, 2, 1, 1, 1];
        let r = miou(&pred, &gt, 3).unwrap();
        // swap labels 1 and 2 consistently
        let swap = |v: u8| match v {
            1 => 2,
            2 => 1,
            x => x,
        };
        let pred2: Vec<u8> = pred.iter().map(|&v| swap(v)).collect();
        let gt2: Vec<u8> = gt.iter().map(|&v| swap(v)).collect();
        let r2 = miou(&pred2, &gt2, 3).unwrap();
        assert_eq!(r.miou, r2.miou);
        assert_eq!(r.per_class_iou[1], r2.per_class_iou[2]);
        assert_eq!(r.per_class_iou[2], r2.per_class_iou[1]);
    }

    #[test]
    fn confusion_row_sums_are_gt_counts() {
        let pred = [0u8, 1, 1, 0, 1];
        let gt = [0u8, 0, 1, 1, 1];
        let cm = confusion_matrix(&pred, &gt, 2).unwrap();
        assert_eq!(cm[0] + cm[1], 2);
        assert_eq!(cm[2] + cm[3], 3);
    }

    #[test]
    fn argmax_first_max_tie_break() {
        let logits = Tensor::new(vec![1, 3, 1, 1], vec![0.5, 0.5, 0.1]).unwrap();
        assert_eq!(argmax_classes(&logits), vec![0]);
    }

    #[test]
    fn epoch_order_is_a_permutation_and_varies() {
        let a = epoch_order(1, 0, 8);
        let b = epoch_order(1, 1, 8);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..8).collect::<Vec<_>>());
        assert_ne!(a, b);
        assert_eq!(a, epoch_order(1, 0, 8));
    }
}
