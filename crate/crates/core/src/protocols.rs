//! Pre-training regimes (i.i.d., ASB, Meta-ASB) and transfer regimes
//! (sequential, i.i.d.).
//!
//! Every trial draws from independent seeded streams (initialization, data
//! order, zapping, transfer head) so changing one knob does not shift the
//! random numbers another one sees.

use std::slice;

use rand::seq::SliceRandom;
use zaplab_autograd::{argmax_rows, grad, no_grad, Tensor};

use crate::config::{ExperimentConfig, PretrainMethod, TransferMode};
use crate::data::{labeled, sample_episode, ClassDataset, Labeled, SplitPlan};
use crate::error::{Error, Result};
use crate::metrics::{MetricsLog, MetricsRecord, Phase};
use crate::model::Model;
use crate::optim::{sgd_step_functional, sgd_step_inplace, AdamState};
use crate::rng::{derive_seed, seeded};
use crate::zapping::{reset_head_moments, zap_class, zap_iid, ZapMode};

const TAG_INIT: u64 = 1;
const TAG_DATA: u64 = 2;
const TAG_ZAP: u64 = 3;
const TAG_HEAD: u64 = 4;
const TAG_ORDER: u64 = 5;

/// Examples per forward pass during evaluation.
const EVAL_CHUNK: usize = 256;

/// Label such as `asb+zap` or `iid` identifying a pre-training variant.
pub fn method_label(cfg: &ExperimentConfig) -> String {
    let base = match cfg.pretrain.method {
        PretrainMethod::Iid => "iid",
        PretrainMethod::Asb => "asb",
        PretrainMethod::MetaAsb => "meta_asb",
    };
    if cfg.pretrain.zap.is_on() {
        format!("{base}+zap")
    } else {
        base.to_string()
    }
}

/// The convnet described by `cfg`, sized for the pretrain split and
/// initialized from the pretrain seed.
pub fn build_model(cfg: &ExperimentConfig, ds: &ClassDataset, split: &SplitPlan) -> Result<Model> {
    let spec = cfg.architecture(ds.image_shape(), split.pretrain.len());
    Model::build_convnet(&spec, &mut seeded(derive_seed(cfg.pretrain.seed, &[TAG_INIT])))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

fn mean_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    Ok(logits.softmax_cross_entropy(labels)?.item())
}

fn tally(logits: &Tensor, labels: &[usize], correct: &mut usize, loss_sum: &mut f64) -> Result<()> {
    *correct += argmax_rows(logits).iter().zip(labels).filter(|(p, y)| p == y).count();
    *loss_sum += mean_loss(logits, labels)? * labels.len() as f64;
    Ok(())
}

/// Accuracy and mean loss of `model` on `items`. Never records a graph or
/// touches parameters. `None` for an empty set.
pub fn evaluate(model: &Model, ds: &ClassDataset, items: &[Labeled]) -> Result<Option<Evaluation>> {
    if items.is_empty() {
        return Ok(None);
    }
    no_grad(|| {
        let (mut correct, mut loss_sum) = (0, 0.0);
        for chunk in items.chunks(EVAL_CHUNK) {
            let (x, y) = ds.labeled_batch(chunk);
            tally(&model.forward(&x)?, &y, &mut correct, &mut loss_sum)?;
        }
        let n = items.len() as f64;
        Ok(Some(Evaluation {
            accuracy: correct as f64 / n,
            loss: loss_sum / n,
        }))
    })
}

fn loss_on(model: &Model, params: &[Tensor], ds: &ClassDataset, items: &[Labeled]) -> Result<Tensor> {
    let (x, y) = ds.labeled_batch(items);
    Ok(model.forward_with(params, &x)?.softmax_cross_entropy(&y)?)
}

/// One Adam step on the mean loss over `items`; returns that loss.
fn adam_batch_step(
    model: &mut Model,
    adam: &mut AdamState,
    ds: &ClassDataset,
    items: &[Labeled],
    lr: f64,
) -> Result<f64> {
    let loss = loss_on(model, model.params(), ds, items)?;
    let g = grad(&loss, model.params(), false)?;
    let mut params = model.params().to_vec();
    adam.step(&mut params, g.as_slice(), lr)?;
    model.set_params(params)?;
    Ok(loss.item())
}

pub struct PretrainOutcome {
    pub model: Model,
    pub metrics: MetricsLog,
    /// Training loss of every batch (i.i.d.) or outer update (ASB).
    pub train_losses: Vec<f64>,
    /// Validation accuracy of the model as it stands at the end of training.
    pub final_val_acc: Option<f64>,
}

struct PretrainEval<'a> {
    ds: &'a ClassDataset,
    val: Vec<Labeled>,
    classes: usize,
}

impl PretrainEval<'_> {
    fn run(&self, model: &Model, log: &mut MetricsLog, step: u64) -> Result<()> {
        let e = evaluate(model, self.ds, &self.val)?;
        log.eval(MetricsRecord {
            step,
            phase: Phase::Pretrain,
            classes_seen: self.classes,
            train_acc: None,
            test_acc: e.map(|e| e.accuracy),
            loss: e.map(|e| e.loss),
            wall_clock: None,
        });
        Ok(())
    }
}

/// Runs the pre-training method named in `cfg` on `model`, whose head must
/// have one output per pretrain class.
pub fn pretrain(cfg: &ExperimentConfig, ds: &ClassDataset, split: &SplitPlan, model: Model) -> Result<PretrainOutcome> {
    if model.num_classes() != split.pretrain.len() {
        return Err(Error::InvalidArgument(format!(
            "model has {} outputs but the pretrain split has {} classes",
            model.num_classes(),
            split.pretrain.len()
        )));
    }
    match cfg.pretrain.method {
        PretrainMethod::Iid => pretrain_iid(cfg, ds, split, model),
        PretrainMethod::Asb | PretrainMethod::MetaAsb => pretrain_asb(cfg, ds, split, model),
    }
}

/// Adam over shuffled mini-batches, with cadence zapping at epoch starts.
pub fn pretrain_iid(
    cfg: &ExperimentConfig,
    ds: &ClassDataset,
    split: &SplitPlan,
    mut model: Model,
) -> Result<PretrainOutcome> {
    let p = &cfg.pretrain;
    if p.method != PretrainMethod::Iid {
        return Err(Error::InvalidArgument("pretrain_iid needs method = iid".into()));
    }
    let mut data_rng = seeded(derive_seed(p.seed, &[TAG_DATA]));
    let mut zap_rng = seeded(derive_seed(p.seed, &[TAG_ZAP]));
    let train = split.pretrain_train(ds);
    let ev = PretrainEval {
        ds,
        val: split.pretrain_validation(ds),
        classes: split.pretrain.len(),
    };
    let mut adam = AdamState::new(model.params());
    let mut log = MetricsLog::new(cfg.record_wall_clock);
    let mut losses = Vec::new();
    let mut clock = 0u64;
    ev.run(&model, &mut log, clock)?;
    for epoch in 0..p.epochs {
        if p.zap.mode == ZapMode::IidCadence {
            let zapped = zap_iid(&mut model, &p.zap, epoch, &mut zap_rng)?;
            if !zapped.is_empty() {
                clock += 1;
                if p.reset_adam_on_zap {
                    reset_head_moments(&model, &mut adam, &zapped);
                }
                log.zap(clock, p.zap.mode, zapped);
                if p.eval_after_zap {
                    ev.run(&model, &mut log, clock)?;
                }
            }
        }
        let mut order = train.clone();
        order.shuffle(&mut data_rng);
        for (b, batch) in order.chunks(p.batch_size).enumerate() {
            losses.push(adam_batch_step(&mut model, &mut adam, ds, batch, p.outer_lr)?);
            clock += 1;
            if p.eval_every > 0 && (b + 1) % p.eval_every == 0 {
                ev.run(&model, &mut log, clock)?;
            }
        }
        ev.run(&model, &mut log, clock)?;
    }
    let final_val_acc = log.last_record().and_then(|r| r.test_acc);
    Ok(PretrainOutcome {
        model,
        metrics: log,
        train_losses: losses,
        final_val_acc,
    })
}

/// Alternating sequential and batch learning, with or without meta-gradients.
///
/// Each outer step samples a class, optionally zaps it, takes `K` single-image
/// SGD steps on it and then one Adam step on `X_inner ∪ X_rand`. Without
/// meta-gradients the Adam step applies `∇θ_K` at `θ_K`; with them it applies
/// `∇θ_0` (differentiated through the inner loop) at `θ_0`. `K = 0` skips the
/// inner loop and the outer batch is `X_rand` alone.
pub fn pretrain_asb(
    cfg: &ExperimentConfig,
    ds: &ClassDataset,
    split: &SplitPlan,
    mut model: Model,
) -> Result<PretrainOutcome> {
    let p = &cfg.pretrain;
    let meta = match p.method {
        PretrainMethod::Asb => false,
        PretrainMethod::MetaAsb => true,
        PretrainMethod::Iid => return Err(Error::InvalidArgument("pretrain_asb needs an ASB method".into())),
    };
    if p.zap.mode == ZapMode::IidCadence {
        return Err(Error::InvalidArgument("ASB zaps per episode class, not on a cadence".into()));
    }
    let mut data_rng = seeded(derive_seed(p.seed, &[TAG_DATA]));
    let mut zap_rng = seeded(derive_seed(p.seed, &[TAG_ZAP]));
    let ev = PretrainEval {
        ds,
        val: split.pretrain_validation(ds),
        classes: split.pretrain.len(),
    };
    let mut adam = AdamState::new(model.params());
    let mut log = MetricsLog::new(cfg.record_wall_clock);
    let mut losses = Vec::with_capacity(p.outer_steps);
    let mut clock = 0u64;
    ev.run(&model, &mut log, clock)?;
    for s in 0..p.outer_steps {
        let episode = sample_episode(ds, split, p.inner_steps.max(1), p.remember, &mut data_rng)?;
        let inner = &episode.inner[..p.inner_steps];
        let outer: Vec<Labeled> = inner.iter().chain(&episode.rand).copied().collect();
        if p.zap.mode == ZapMode::PerEpisodeClass {
            zap_class(&mut model, episode.label, &mut zap_rng)?;
            clock += 1;
            if p.reset_adam_on_zap {
                reset_head_moments(&model, &mut adam, &[episode.label]);
            }
            log.zap(clock, p.zap.mode, vec![episode.label]);
            if p.eval_after_zap {
                ev.run(&model, &mut log, clock)?;
            }
        }
        let params = if meta {
            let theta0 = model.params().to_vec();
            let mut theta = theta0.clone();
            for item in inner {
                let loss = loss_on(&model, &theta, ds, slice::from_ref(item))?;
                let g = grad(&loss, &theta, true)?;
                theta = sgd_step_functional(&theta, &g, p.inner_lr)?;
                clock += 1;
            }
            let loss = loss_on(&model, &theta, ds, &outer)?;
            let g = grad(&loss, &theta0, false)?;
            losses.push(loss.item());
            let mut params = theta0;
            adam.step(&mut params, g.as_slice(), p.outer_lr)?;
            params
        } else {
            let mut theta = model.params().to_vec();
            for item in inner {
                let loss = loss_on(&model, &theta, ds, slice::from_ref(item))?;
                let g = grad(&loss, &theta, false)?;
                sgd_step_inplace(&mut theta, g.as_slice(), p.inner_lr)?;
                clock += 1;
            }
            let loss = loss_on(&model, &theta, ds, &outer)?;
            let g = grad(&loss, &theta, false)?;
            losses.push(loss.item());
            adam.step(&mut theta, g.as_slice(), p.outer_lr)?;
            theta
        };
        clock += 1;
        model.set_params(params)?;
        if p.eval_every > 0 && (s + 1) % p.eval_every == 0 {
            ev.run(&model, &mut log, clock)?;
        }
    }
    ev.run(&model, &mut log, clock)?;
    let final_val_acc = log.last_record().and_then(|r| r.test_acc);
    Ok(PretrainOutcome {
        model,
        metrics: log,
        train_losses: losses,
        final_val_acc,
    })
}

pub struct TransferOutcome {
    pub model: Model,
    pub metrics: MetricsLog,
    pub final_train_acc: f64,
    pub final_test_acc: f64,
}

/// Transfer classes in presentation order plus their train and test items,
/// grouped by class in that order. Labels are presentation positions.
struct TransferSets {
    train: Vec<Labeled>,
    test: Vec<Labeled>,
    /// Cumulative item counts after each class.
    train_ends: Vec<usize>,
    test_ends: Vec<usize>,
}

fn transfer_sets(cfg: &ExperimentConfig, ds: &ClassDataset, split: &SplitPlan) -> Result<TransferSets> {
    let t = &cfg.transfer;
    let mut classes = split.transfer.clone();
    classes.shuffle(&mut seeded(derive_seed(t.seed, &[TAG_ORDER])));
    let train_cap = t.train_per_class.unwrap_or(usize::MAX);
    let test_cap = t.test_per_class.unwrap_or(usize::MAX);
    let train = labeled(&classes, |c| ds.train_range(c), train_cap);
    let test = labeled(&classes, |c| ds.validation_range(c), test_cap);
    let ends = |items: &[Labeled]| {
        (0..classes.len())
            .map(|l| items.iter().filter(|i| i.label <= l).count())
            .collect::<Vec<_>>()
    };
    Ok(TransferSets {
        train_ends: ends(&train),
        test_ends: ends(&test),
        train,
        test,
    })
}

/// Replaces the head of a copy of `pretrained` and runs the transfer mode in
/// `cfg` on the transfer split.
pub fn transfer(
    pretrained: &Model,
    cfg: &ExperimentConfig,
    ds: &ClassDataset,
    split: &SplitPlan,
) -> Result<TransferOutcome> {
    if let Some(c) = split.transfer.iter().find(|c| split.pretrain.contains(c)) {
        return Err(Error::Split(format!("transfer class {c} was also used for pre-training")));
    }
    if split.transfer.is_empty() {
        return Err(Error::Split("transfer split is empty".into()));
    }
    let t = &cfg.transfer;
    let mut model = pretrained.clone();
    model.replace_head(split.transfer.len(), &mut seeded(derive_seed(t.seed, &[TAG_HEAD])))?;
    let sets = transfer_sets(cfg, ds, split)?;
    let metrics = match t.mode {
        TransferMode::Sequential if t.freeze => sequential_frozen(cfg, ds, &sets, &mut model)?,
        TransferMode::Sequential => sequential_unfrozen(cfg, ds, &sets, &mut model)?,
        TransferMode::Iid => transfer_iid(cfg, ds, &sets, &mut model)?,
    };
    let last = metrics
        .last_record()
        .ok_or_else(|| Error::InvalidArgument("transfer produced no evaluation".into()))?;
    Ok(TransferOutcome {
        final_train_acc: last.train_acc.unwrap_or(f64::NAN),
        final_test_acc: last.test_acc.unwrap_or(f64::NAN),
        metrics,
        model,
    })
}

fn transfer_record(step: u64, classes_seen: usize, train: Option<Evaluation>, test: Option<Evaluation>) -> MetricsRecord {
    MetricsRecord {
        step,
        phase: Phase::Transfer,
        classes_seen,
        train_acc: train.map(|e| e.accuracy),
        test_acc: test.map(|e| e.accuracy),
        loss: test.map(|e| e.loss),
        wall_clock: None,
    }
}

fn eval_due(n_seen: usize, total: usize, every: usize) -> bool {
    n_seen == total || (every > 0 && n_seen.is_multiple_of(every))
}

/// Class-by-class presentation of each class's images in a shuffled order.
fn presentation(cfg: &ExperimentConfig, sets: &TransferSets) -> Vec<Vec<usize>> {
    let mut rng = seeded(derive_seed(cfg.transfer.seed, &[TAG_DATA]));
    let mut start = 0;
    sets.train_ends
        .iter()
        .map(|&end| {
            let mut idx: Vec<usize> = (start..end).collect();
            idx.shuffle(&mut rng);
            start = end;
            idx
        })
        .collect()
}

/// Row-major `[n, d]` features of `items`, computed without a graph.
fn feature_rows(model: &Model, ds: &ClassDataset, items: &[Labeled]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for chunk in items.chunks(EVAL_CHUNK) {
        let (x, _) = ds.labeled_batch(chunk);
        out.extend_from_slice(model.features(&x)?.data());
    }
    Ok(out)
}

fn eval_head(head: &[Tensor], feats: &[f64], dim: usize, items: &[Labeled]) -> Result<Option<Evaluation>> {
    if items.is_empty() {
        return Ok(None);
    }
    no_grad(|| {
        let x = Tensor::new(&[items.len(), dim], feats[..items.len() * dim].to_vec())?;
        let labels: Vec<usize> = items.iter().map(|i| i.label).collect();
        let (mut correct, mut loss_sum) = (0, 0.0);
        tally(&x.linear(&head[0], &head[1])?, &labels, &mut correct, &mut loss_sum)?;
        Ok(Some(Evaluation {
            accuracy: correct as f64 / items.len() as f64,
            loss: loss_sum / items.len() as f64,
        }))
    })
}

/// Linear probing: features are computed once and only the head learns.
fn sequential_frozen(
    cfg: &ExperimentConfig,
    ds: &ClassDataset,
    sets: &TransferSets,
    model: &mut Model,
) -> Result<MetricsLog> {
    let t = &cfg.transfer;
    let dim = model.architecture().feature_dim();
    let train_feats = feature_rows(model, ds, &sets.train)?;
    let test_feats = feature_rows(model, ds, &sets.test)?;
    let (wi, bi) = (model.fc_weight_index(), model.fc_bias_index());
    let mut head = vec![model.params()[wi].clone(), model.params()[bi].clone()];
    let mut log = MetricsLog::new(cfg.record_wall_clock);
    let n_classes = sets.train_ends.len();
    let mut clock = 0u64;
    for (n, idx) in presentation(cfg, sets).into_iter().enumerate() {
        for i in idx {
            let x = Tensor::new(&[1, dim], train_feats[i * dim..(i + 1) * dim].to_vec())?;
            let loss = x.linear(&head[0], &head[1])?.softmax_cross_entropy(&[sets.train[i].label])?;
            let g = grad(&loss, &head, false)?;
            sgd_step_inplace(&mut head, g.as_slice(), t.lr)?;
            clock += 1;
        }
        if eval_due(n + 1, n_classes, t.eval_every_classes) {
            let (tr, te) = (sets.train_ends[n], sets.test_ends[n]);
            let train = eval_head(&head, &train_feats, dim, &sets.train[..tr])?;
            let test = eval_head(&head, &test_feats, dim, &sets.test[..te])?;
            log.eval(transfer_record(clock, n + 1, train, test));
        }
    }
    let mut params = model.params().to_vec();
    params[wi] = head[0].clone();
    params[bi] = head[1].clone();
    model.set_params(params)?;
    Ok(log)
}

/// Every parameter takes one SGD step per image.
fn sequential_unfrozen(
    cfg: &ExperimentConfig,
    ds: &ClassDataset,
    sets: &TransferSets,
    model: &mut Model,
) -> Result<MetricsLog> {
    let t = &cfg.transfer;
    let mut log = MetricsLog::new(cfg.record_wall_clock);
    let n_classes = sets.train_ends.len();
    let mut clock = 0u64;
    for (n, idx) in presentation(cfg, sets).into_iter().enumerate() {
        for i in idx {
            let loss = loss_on(model, model.params(), ds, slice::from_ref(&sets.train[i]))?;
            let g = grad(&loss, model.params(), false)?;
            let mut params = model.params().to_vec();
            sgd_step_inplace(&mut params, g.as_slice(), t.lr)?;
            model.set_params(params)?;
            clock += 1;
        }
        if eval_due(n + 1, n_classes, t.eval_every_classes) {
            let train = evaluate(model, ds, &sets.train[..sets.train_ends[n]])?;
            let test = evaluate(model, ds, &sets.test[..sets.test_ends[n]])?;
            log.eval(transfer_record(clock, n + 1, train, test));
        }
    }
    Ok(log)
}

/// Fine-tuning of all weights with Adam over shuffled batches.
fn transfer_iid(cfg: &ExperimentConfig, ds: &ClassDataset, sets: &TransferSets, model: &mut Model) -> Result<MetricsLog> {
    let t = &cfg.transfer;
    let mut rng = seeded(derive_seed(t.seed, &[TAG_DATA]));
    let mut adam = AdamState::new(model.params());
    let mut log = MetricsLog::new(cfg.record_wall_clock);
    let n_classes = sets.train_ends.len();
    let mut clock = 0u64;
    let eval = |model: &Model, log: &mut MetricsLog, clock: u64| -> Result<()> {
        let train = evaluate(model, ds, &sets.train)?;
        let test = evaluate(model, ds, &sets.test)?;
        log.eval(transfer_record(clock, n_classes, train, test));
        Ok(())
    };
    eval(model, &mut log, clock)?;
    for _ in 0..t.epochs {
        let mut order = sets.train.clone();
        order.shuffle(&mut rng);
        for (b, batch) in order.chunks(t.batch_size).enumerate() {
            adam_batch_step(model, &mut adam, ds, batch, t.lr)?;
            clock += 1;
            if t.eval_every_batches > 0 && (b + 1) % t.eval_every_batches == 0 {
                eval(model, &mut log, clock)?;
            }
        }
        eval(model, &mut log, clock)?;
    }
    Ok(log)
}
