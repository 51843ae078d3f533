//! Adam optimization, stage-I source training, stage-II adaptation with a
//! frozen classifier, and accuracy / loss-distribution evaluation.
//!
//! Both stages share one minibatch loop; they differ only in which
//! parameters carry `requires_grad`. Training is single-threaded and fully
//! determined by the config seed. Evaluation fans windows out across a
//! rayon pool capped by `DRIFTBENCH_THREADS` and collects per-window losses
//! back in input order.

use crate::dataio::Dataset;
use crate::divergence::{HistogramCfg, LossDistribution};
use crate::error::{Error, Result};
use crate::model::{forward_batch, AdapterParams, ClassifierParams, Stage};
use crate::rng::{derived_rng, tags};
use crate::tensor::{cross_entropy, Mode, Tensor};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::LazyLock;
use std::time::Instant;

// ── Configuration ───────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub dropout_p: f64,
    pub seed: u64,
    pub early_stop_patience: usize,
    /// Fraction of labelled target windows used in stage II.
    pub target_label_fraction: f64,
    /// Global gradient-norm clip guarding exploding LSTM gradients.
    pub clip_norm: f64,
    /// Held-out share of source windows used as stage-I validation.
    pub val_fraction: f64,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        TrainConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 64,
            max_epochs: 200,
            dropout_p: 0.5,
            seed,
            early_stop_patience: 10,
            target_label_fraction: 0.2,
            clip_norm: 5.0,
            val_fraction: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout probability must be in [0, 1), got {}",
                self.dropout_p
            )));
        }
        if !(self.target_label_fraction > 0.0 && self.target_label_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "target label fraction must be in (0, 1], got {}",
                self.target_label_fraction
            )));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch size and epoch budget must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("validation fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

// ── Adam ────────────────────────────────────────────────────────────

/// First/second moment buffers mirroring one list of trainable tensors.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update over `params`, reading each tensor's
/// populated gradient. Order and arity must match the state.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [&mut Tensor],
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::Contract("Adam state does not match parameter list".into()));
    }
    state.t += 1;
    let t = state.t as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);
    for (idx, param) in params.iter_mut().enumerate() {
        let grad = param
            .grad()
            .ok_or_else(|| Error::Contract("trainable parameter has no gradient".into()))?
            .to_vec();
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("non-finite gradient in Adam step".into()));
        }
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        let data = param.data_mut();
        for j in 0..grad.len() {
            let g = grad[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[j] / bias1;
            let v_hat = v[j] / bias2;
            data[j] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

/// Scale all gradients so their global L2 norm does not exceed `max_norm`;
/// returns the pre-clip norm.
pub fn clip_global_norm(params: &mut [&mut Tensor], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for p in params.iter() {
        if let Some(g) = p.grad() {
            sq += g.iter().map(|v| v * v).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for p in params.iter_mut() {
            if let Some(g) = p.grad() {
                let scaled: Vec<f64> = g.iter().map(|v| v * scale).collect();
                p.set_grad(scaled)?;
            }
        }
    }
    Ok(norm)
}

// ── Reports ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_accuracy: f64,
    pub eval_loss: f64,
}

/// Per-epoch statistics plus run totals. The JSON-lines emission contains
/// only the seed-determined epoch rows; wall time stays out of report
/// files so repeated runs are byte-identical.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub epochs_run: usize,
    pub wall_time_secs: f64,
    pub best_eval_loss: f64,
    pub final_eval_accuracy: f64,
}

impl TrainReport {
    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("epoch stats serialize"));
            out.push('\n');
        }
        out
    }
}

// ── Evaluation ──────────────────────────────────────────────────────

static EVAL_POOL: LazyLock<rayon::ThreadPool> = LazyLock::new(|| {
    let threads = std::env::var("DRIFTBENCH_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("evaluation thread pool")
});

const EVAL_CHUNK: usize = 64;

/// Lowest index wins ties.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn eval_indices(
    classifier: &ClassifierParams,
    adapter: Option<&AdapterParams>,
    data: &Dataset,
    indices: &[usize],
) -> Result<Vec<(usize, f64)>> {
    let chunks: Vec<&[usize]> = indices.chunks(EVAL_CHUNK).collect();
    let results: Vec<Result<Vec<(usize, f64)>>> = EVAL_POOL.install(|| {
        chunks
            .par_iter()
            .map(|chunk| {
                let windows: Vec<&Tensor> =
                    chunk.iter().map(|&i| &data.windows[i].data).collect();
                // eval mode: dropout is identity and the rng is never drawn
                let mut rng = derived_rng(0, &[]);
                let fwd =
                    forward_batch(classifier, adapter, &windows, Mode::Eval, 0.0, &mut rng)?;
                let logits = fwd.tape.value(fwd.logits);
                let g = classifier.n_classes;
                chunk
                    .iter()
                    .enumerate()
                    .map(|(row, &i)| {
                        let r = &logits[row * g..(row + 1) * g];
                        let loss = cross_entropy(r, data.windows[i].label)?;
                        Ok((argmax(r), loss))
                    })
                    .collect()
            })
            .collect()
    });
    let mut out = Vec::with_capacity(indices.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    /// Percent correct, Correct/Total × 100.
    pub accuracy: f64,
    pub losses: LossDistribution,
}

/// Eval-mode accuracy and per-window loss distribution with an explicit
/// histogram range.
pub fn evaluate_with_histogram(
    classifier: &ClassifierParams,
    adapter: Option<&AdapterParams>,
    data: &Dataset,
    hist: &HistogramCfg,
) -> Result<EvalOutcome> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let results = eval_indices(classifier, adapter, data, &indices)?;
    let correct = results
        .iter()
        .zip(&data.windows)
        .filter(|((pred, _), w)| *pred == w.label)
        .count();
    let losses: Vec<f64> = results.iter().map(|(_, l)| *l).collect();
    Ok(EvalOutcome {
        accuracy: correct as f64 / data.len() as f64 * 100.0,
        losses: LossDistribution::from_losses(losses, hist)?,
    })
}

/// Eval-mode accuracy and loss distribution with the default histogram.
pub fn evaluate(
    classifier: &ClassifierParams,
    adapter: Option<&AdapterParams>,
    data: &Dataset,
) -> Result<EvalOutcome> {
    evaluate_with_histogram(classifier, adapter, data, &HistogramCfg::default())
}

// ── Shared minibatch loop ───────────────────────────────────────────

/// Indices per class, stratified sample of `fraction`, at least one window
/// per present class.
fn stratified_sample(
    data: &Dataset,
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); data.n_classes];
    for (i, w) in data.windows.iter().enumerate() {
        per_class[w.label].push(i);
    }
    let mut picked = Vec::new();
    for group in per_class.iter_mut() {
        if group.is_empty() {
            continue;
        }
        group.shuffle(rng);
        let take = ((group.len() as f64 * fraction).round() as usize)
            .clamp(1, group.len());
        picked.extend(group.iter().take(take));
    }
    picked.sort_unstable();
    picked
}

/// Stratified train/validation split of all indices; validation gets
/// `val_fraction` per class (capped so training stays non-empty).
fn stratified_split(
    data: &Dataset,
    val_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<usize>) {
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); data.n_classes];
    for (i, w) in data.windows.iter().enumerate() {
        per_class[w.label].push(i);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for group in per_class.iter_mut() {
        if group.is_empty() {
            continue;
        }
        group.shuffle(rng);
        let take = ((group.len() as f64 * val_fraction).round() as usize).min(group.len() - 1);
        val.extend(group.iter().take(take));
        train.extend(group.iter().skip(take));
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Abort when the epoch loss jumps by more than 10x; losses already near
/// zero are allowed to jitter.
fn epoch_divergence_check(prev: Option<f64>, current: f64, epoch: usize) -> Result<()> {
    if let Some(prev) = prev {
        if prev >= 1e-3 && current > 10.0 * prev {
            return Err(Error::Numeric(format!(
                "training diverged at epoch {}: loss {:.6} is more than 10x the previous epoch ({:.6})",
                epoch, current, prev
            )));
        }
    }
    Ok(())
}

struct EpochLoopArgs<'a> {
    data: &'a Dataset,
    train_idx: Vec<usize>,
    eval_idx: Vec<usize>,
    cfg: &'a TrainConfig,
}

/// Minibatch Adam over whatever parameters currently carry requires_grad.
/// Early-stops on the eval loss with the configured patience and restores
/// the best parameters seen.
fn run_training(
    classifier: &mut ClassifierParams,
    mut adapter: Option<&mut AdapterParams>,
    args: EpochLoopArgs<'_>,
) -> Result<TrainReport> {
    let EpochLoopArgs {
        data,
        train_idx,
        eval_idx,
        cfg,
    } = args;
    let started = Instant::now();

    let trainable_count = {
        let mut count = 0;
        for t in classifier.param_tensors() {
            if t.requires_grad() {
                count += 1;
            }
        }
        if let Some(ad) = adapter.as_deref() {
            for t in ad.param_tensors() {
                if t.requires_grad() {
                    count += 1;
                }
            }
        }
        count
    };
    if trainable_count == 0 {
        return Err(Error::Contract("no trainable parameters".into()));
    }

    let mut adam = {
        let mut refs: Vec<&Tensor> = classifier
            .param_tensors()
            .into_iter()
            .filter(|t| t.requires_grad())
            .collect();
        if let Some(ad) = adapter.as_deref() {
            refs.extend(ad.param_tensors().into_iter().filter(|t| t.requires_grad()));
        }
        AdamState::new(&refs)
    };

    let mut shuffle_rng = derived_rng(cfg.seed, &[tags::SHUFFLE]);
    let mut dropout_rng = derived_rng(cfg.seed, &[tags::DROPOUT]);

    let mut epochs = Vec::new();
    let mut best_loss = f64::INFINITY;
    let mut best_accuracy = 0.0;
    let mut best_clf = classifier.snapshot();
    let mut best_ad = adapter.as_deref().map(|a| a.snapshot());
    let mut stall = 0usize;
    let mut prev_train_loss: Option<f64> = None;

    let mut order = train_idx.clone();
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let windows: Vec<&Tensor> = batch.iter().map(|&i| &data.windows[i].data).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| data.windows[i].label).collect();
            let mut fwd = forward_batch(
                &*classifier,
                adapter.as_deref(),
                &windows,
                Mode::Train,
                cfg.dropout_p,
                &mut dropout_rng,
            )?;
            let loss = fwd.loss(&labels)?;
            let loss_val = fwd.tape.value(loss)[0];
            loss_sum += loss_val * batch.len() as f64;
            fwd.backward_into(loss, classifier, adapter.as_deref_mut())?;

            let mut trainables: Vec<&mut Tensor> = classifier
                .param_tensors_mut()
                .into_iter()
                .filter(|t| t.requires_grad())
                .collect();
            if let Some(ad) = adapter.as_deref_mut() {
                trainables.extend(
                    ad.param_tensors_mut()
                        .into_iter()
                        .filter(|t| t.requires_grad()),
                );
            }
            clip_global_norm(&mut trainables, cfg.clip_norm)?;
            adam_step(&mut adam, &mut trainables, cfg)?;
        }
        let train_loss = loss_sum / train_idx.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "training diverged at epoch {}: loss is not finite",
                epoch
            )));
        }
        epoch_divergence_check(prev_train_loss, train_loss, epoch)?;
        prev_train_loss = Some(train_loss);

        let results = eval_indices(&*classifier, adapter.as_deref(), data, &eval_idx)?;
        let correct = eval_idx
            .iter()
            .zip(&results)
            .filter(|(&i, (pred, _))| *pred == data.windows[i].label)
            .count();
        let eval_accuracy = correct as f64 / eval_idx.len() as f64 * 100.0;
        let eval_loss =
            results.iter().map(|(_, l)| *l).sum::<f64>() / eval_idx.len() as f64;

        epochs.push(EpochStats {
            epoch,
            train_loss,
            eval_accuracy,
            eval_loss,
        });

        if eval_loss < best_loss {
            best_loss = eval_loss;
            best_accuracy = eval_accuracy;
            best_clf = classifier.snapshot();
            best_ad = adapter.as_deref().map(|a| a.snapshot());
            stall = 0;
        } else {
            stall += 1;
            if stall >= cfg.early_stop_patience {
                break;
            }
        }
    }

    classifier.restore(&best_clf)?;
    if let (Some(ad), Some(snap)) = (adapter.as_deref_mut(), best_ad.as_ref()) {
        for (t, s) in ad.param_tensors_mut().iter_mut().zip(snap) {
            t.data_mut().copy_from_slice(s);
        }
    }

    Ok(TrainReport {
        epochs_run: epochs.len(),
        wall_time_secs: started.elapsed().as_secs_f64(),
        best_eval_loss: best_loss,
        final_eval_accuracy: best_accuracy,
        epochs,
    })
}

// ── Stage I / Stage II entry points ─────────────────────────────────

/// Stage I: train the classifier from scratch on labelled source windows.
/// A stratified `val_fraction` split provides the early-stopping signal.
/// No adapter participates; an identity adapter would be bitwise
/// transparent on the rectified inputs anyway.
pub fn train_source(
    classifier: &mut ClassifierParams,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    if data.n_channels != classifier.input_size {
        return Err(Error::Shape(format!(
            "dataset has {} channels, classifier expects {}",
            data.n_channels, classifier.input_size
        )));
    }
    if data.n_classes > classifier.n_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, classifier outputs {}",
            data.n_classes, classifier.n_classes
        )));
    }
    classifier.set_requires_grad(true);

    let mut split_rng = derived_rng(cfg.seed, &[tags::VAL_SPLIT]);
    let (train_idx, val_idx) = stratified_split(data, cfg.val_fraction, &mut split_rng);
    let eval_idx = if val_idx.is_empty() { train_idx.clone() } else { val_idx };

    let report = run_training(
        classifier,
        None,
        EpochLoopArgs {
            data,
            train_idx,
            eval_idx,
            cfg,
        },
    )?;
    classifier.stage = Stage::SourceTrained;
    Ok(report)
}

/// Stage II: freeze the classifier and train only the adapter on a
/// stratified `target_label_fraction` subset of labelled target windows.
/// The classifier must be source-trained; its bytes do not change.
pub fn adapt_target(
    classifier: &mut ClassifierParams,
    adapter: &mut AdapterParams,
    target: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if classifier.stage != Stage::SourceTrained {
        return Err(Error::Contract(
            "stage II requires a source-trained classifier".into(),
        ));
    }
    if !(cfg.target_label_fraction > 0.0) {
        return Err(Error::Data(
            "stage II requires a non-empty labelled target subset (fraction must be > 0)".into(),
        ));
    }
    cfg.validate()?;
    if target.is_empty() {
        return Err(Error::Data("cannot adapt on an empty target dataset".into()));
    }
    if adapter.input_size() != classifier.input_size {
        return Err(Error::Shape(format!(
            "adapter size {} does not match classifier input {}",
            adapter.input_size(),
            classifier.input_size
        )));
    }

    classifier.set_requires_grad(false);
    adapter.set_requires_grad(true);

    let mut subset_rng = derived_rng(cfg.seed, &[tags::TARGET_SUBSET]);
    let subset = stratified_sample(target, cfg.target_label_fraction, &mut subset_rng);
    if subset.is_empty() {
        return Err(Error::Data("target subset is empty".into()));
    }

    run_training(
        classifier,
        Some(adapter),
        EpochLoopArgs {
            data: target,
            train_idx: subset.clone(),
            eval_idx: subset,
            cfg,
        },
    )
}
