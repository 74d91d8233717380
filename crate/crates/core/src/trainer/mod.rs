//! Training loops for the weighted cross-domain recipe and the two
//! baselines, plus evaluation.

mod checkpoint;
mod optim;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use optim::{cosine_lr, AdamaxConfig, OptimizerState};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Mode, Tensor};
use crate::backbone::{BackboneConfig, Model};
use crate::data::{augment, EpochSet};
use crate::error::{Error, Result};
use crate::schedule::{cross_entropy, total_loss, weights_for_epoch, Ablation, EpochWeights, TrainPlan};
use crate::stats::auc;
use crate::Domain;

/// A training recipe as named in experiment configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    AsMmd(Ablation),
    TargetOnly,
    Pooled,
}

impl Method {
    pub const NAMES: [&'static str; 7] = [
        "asmmd",
        "target_only",
        "pooled",
        "equal_weights",
        "fixed_weights",
        "no_mmd",
        "no_splitbn",
    ];

    /// Parses a method name; ablations may be combined with `+`.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "asmmd" => return Ok(Method::AsMmd(Ablation::FULL)),
            "target_only" => return Ok(Method::TargetOnly),
            "pooled" => return Ok(Method::Pooled),
            _ => {}
        }
        let mut ab = Ablation::FULL;
        for part in s.split('+') {
            match part {
                "equal_weights" => ab.equal_weights = true,
                "fixed_weights" => ab.fixed_weights = true,
                "no_mmd" => ab.no_mmd = true,
                "no_splitbn" => ab.no_splitbn = true,
                _ => return Err(Error::Config(format!("unknown method '{s}'"))),
            }
        }
        if ab.equal_weights && ab.fixed_weights {
            return Err(Error::Config("equal_weights and fixed_weights are exclusive".into()));
        }
        Ok(Method::AsMmd(ab))
    }

    pub fn name(&self) -> String {
        match self {
            Method::TargetOnly => "target_only".into(),
            Method::Pooled => "pooled".into(),
            Method::AsMmd(ab) => {
                let parts: Vec<&str> = [
                    (ab.equal_weights, "equal_weights"),
                    (ab.fixed_weights, "fixed_weights"),
                    (ab.no_mmd, "no_mmd"),
                    (ab.no_splitbn, "no_splitbn"),
                ]
                .iter()
                .filter(|(on, _)| *on)
                .map(|(_, n)| *n)
                .collect();
                if parts.is_empty() {
                    "asmmd".into()
                } else {
                    parts.join("+")
                }
            }
        }
    }

    /// Whether the method keeps one BN buffer set for both domains.
    pub fn shared_bn(&self) -> bool {
        match self {
            Method::AsMmd(ab) => ab.no_splitbn,
            Method::TargetOnly | Method::Pooled => true,
        }
    }

    /// `base` with the BN mode this method needs.
    pub fn backbone_config(&self, base: &BackboneConfig) -> BackboneConfig {
        BackboneConfig {
            shared_bn: self.shared_bn(),
            ..base.clone()
        }
    }
}

/// How each epoch's trials are grouped into optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchSchedule {
    /// `⌈N_S/B⌉` steps, each one source batch (full shuffled traversal)
    /// paired with one target batch (cycled, reshuffled when exhausted).
    Paired,
    /// The shuffled union of source and target, one mixed batch per step.
    Union,
    /// Target trials only.
    TargetOnly,
}

/// How the batches of one step are combined into a loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// `w_S·CE_S + w_T·CE_T + λ·MMD²` on a (source, target) batch pair.
    Weighted,
    /// Plain sum of per-batch cross-entropies.
    Unweighted,
}

pub struct TrainData<'a> {
    pub source: &'a EpochSet,
    pub target: &'a EpochSet,
    pub target_val: &'a EpochSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// Per-domain terms; NaN under the unweighted objective, which does not split them.
    pub ce_source: f64,
    pub ce_target: f64,
    pub alignment: f64,
    /// Coefficients actually applied: 1 and 0 under the unweighted objective.
    pub w_target: f64,
    pub lambda_mmd: f64,
    pub lr: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub history: Vec<EpochRecord>,
    /// Total loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `None` when the labels hold a single class.
    pub auc: Option<f64>,
    /// Per-trial probability of class 1.
    pub scores: Vec<f64>,
    pub predictions: Vec<usize>,
}

impl Evaluation {
    pub fn auc(&self) -> Result<f64> {
        self.auc.ok_or(Error::SingleClass)
    }
}

const EVAL_CHUNK: usize = 128;

/// Eval-mode metrics on `set` using `domain`'s BN buffers.
pub fn evaluate(model: &mut Model, set: &EpochSet, domain: Domain) -> Result<Evaluation> {
    if set.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut scores = Vec::with_capacity(set.n_trials());
    let mut predictions = Vec::with_capacity(set.n_trials());
    let all: Vec<usize> = (0..set.n_trials()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let logits = model.predict(&set.batch(chunk), domain)?;
        let c = logits.shape()[1];
        for row in logits.data().chunks_exact(c) {
            // first maximum wins, so ties go to class 0
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            predictions.push(best);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            scores.push((row[1] - max).exp() / denom);
        }
    }
    let labels = set.labels();
    let correct = predictions.iter().zip(labels).filter(|(p, l)| **p == **l as usize).count();
    let auc = match auc(&scores, labels) {
        Ok(a) => Some(a),
        Err(Error::SingleClass) => None,
        Err(e) => return Err(e),
    };
    Ok(Evaluation {
        accuracy: correct as f64 / set.n_trials() as f64,
        auc,
        scores,
        predictions,
    })
}

/// The full recipe or one of its ablations. `plan.n_source` / `plan.n_target`
/// are replaced by the sizes of the two training sets.
pub fn train_asmmd(plan: &TrainPlan, data: &TrainData<'_>, model: &mut Model, seed: u64) -> Result<RunRecord> {
    if model.config().shared_bn != plan.ablation.no_splitbn {
        return Err(Error::Config(format!(
            "model shared_bn = {} does not match no_splitbn = {}",
            model.config().shared_bn,
            plan.ablation.no_splitbn
        )));
    }
    train_with(plan, data, model, BatchSchedule::Paired, Objective::Weighted, seed)
}

/// Target-only or pooled baseline: single BN buffer set, no weighting, no alignment.
pub fn train_baseline(
    kind: Method,
    plan: &TrainPlan,
    data: &TrainData<'_>,
    model: &mut Model,
    seed: u64,
) -> Result<RunRecord> {
    let schedule = match kind {
        Method::TargetOnly => BatchSchedule::TargetOnly,
        Method::Pooled => BatchSchedule::Union,
        Method::AsMmd(_) => return Err(Error::Config("train_baseline takes target_only or pooled".into())),
    };
    if !model.config().shared_bn {
        return Err(Error::Config("baselines need a model built with shared_bn".into()));
    }
    train_with(plan, data, model, schedule, Objective::Unweighted, seed)
}

/// Runs `method` on a model it builds from `base` and `model_seed`, returning
/// the trained model alongside the record.
pub fn train_method(
    method: Method,
    plan: &TrainPlan,
    base: &BackboneConfig,
    data: &TrainData<'_>,
    model_seed: u64,
    train_seed: u64,
) -> Result<(Model, RunRecord)> {
    let mut model = Model::build(method.backbone_config(base), model_seed)?;
    let record = match method {
        Method::AsMmd(ab) => {
            let plan = TrainPlan {
                ablation: ab,
                ..plan.clone()
            };
            train_asmmd(&plan, data, &mut model, train_seed)?
        }
        _ => train_baseline(method, plan, data, &mut model, train_seed)?,
    };
    Ok((model, record))
}

const STREAM_BATCHES: u64 = 0;
const STREAM_AUGMENT: u64 = 1;
const STREAM_DROPOUT: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Trials forwarded together; `domain` picks the BN buffers.
#[derive(Debug, Clone)]
struct Group {
    domain: Domain,
    items: Vec<(Domain, usize)>,
}

struct Batcher {
    schedule: BatchSchedule,
    n_source: usize,
    n_target: usize,
    batch_size: usize,
    target_perm: Vec<usize>,
    target_cursor: usize,
}

impl Batcher {
    fn new(schedule: BatchSchedule, n_source: usize, n_target: usize, batch_size: usize) -> Self {
        Self {
            schedule,
            n_source,
            n_target,
            batch_size,
            target_perm: Vec::new(),
            target_cursor: usize::MAX,
        }
    }

    fn chunks(items: Vec<(Domain, usize)>, size: usize) -> Vec<Vec<(Domain, usize)>> {
        let mut out: Vec<Vec<_>> = items.chunks(size).map(|c| c.to_vec()).collect();
        // a single-trial batch cannot be batch-normalized; fold it into its neighbour
        if out.len() > 1 && out.last().is_some_and(|c| c.len() == 1) {
            let last = out.pop().expect("non-empty");
            out.last_mut().expect("non-empty").extend(last);
        }
        out
    }

    fn next_target_batch(&mut self, rng: &mut ChaCha8Rng) -> Vec<(Domain, usize)> {
        let take = self.batch_size.min(self.n_target);
        if self.target_cursor.saturating_add(take) > self.n_target {
            self.target_perm = (0..self.n_target).collect();
            self.target_perm.shuffle(rng);
            self.target_cursor = 0;
        }
        let out = self.target_perm[self.target_cursor..self.target_cursor + take]
            .iter()
            .map(|&i| (Domain::Target, i))
            .collect();
        self.target_cursor += take;
        out
    }

    fn epoch(&mut self, rng: &mut ChaCha8Rng) -> Vec<Vec<Group>> {
        match self.schedule {
            BatchSchedule::Paired => {
                let mut src: Vec<(Domain, usize)> = (0..self.n_source).map(|i| (Domain::Source, i)).collect();
                src.shuffle(rng);
                Self::chunks(src, self.batch_size)
                    .into_iter()
                    .map(|s| {
                        let t = self.next_target_batch(rng);
                        vec![
                            Group {
                                domain: Domain::Source,
                                items: s,
                            },
                            Group {
                                domain: Domain::Target,
                                items: t,
                            },
                        ]
                    })
                    .collect()
            }
            BatchSchedule::Union | BatchSchedule::TargetOnly => {
                let n_src = if self.schedule == BatchSchedule::Union { self.n_source } else { 0 };
                let mut all: Vec<(Domain, usize)> = (0..n_src)
                    .map(|i| (Domain::Source, i))
                    .chain((0..self.n_target).map(|i| (Domain::Target, i)))
                    .collect();
                all.shuffle(rng);
                Self::chunks(all, self.batch_size)
                    .into_iter()
                    .map(|items| {
                        vec![Group {
                            domain: Domain::Target,
                            items,
                        }]
                    })
                    .collect()
            }
        }
    }
}

struct StepOut {
    loss: f64,
    ce_source: f64,
    ce_target: f64,
    alignment: f64,
    grads: Vec<Tensor>,
}

fn group_tensor(data: &TrainData<'_>, g: &Group) -> (Tensor, Vec<usize>) {
    let (c, t) = (data.target.n_channels(), data.target.n_samples());
    let mut x = Vec::with_capacity(g.items.len() * c * t);
    let mut y = Vec::with_capacity(g.items.len());
    for &(d, i) in &g.items {
        let set = match d {
            Domain::Source => data.source,
            Domain::Target => data.target,
        };
        x.extend_from_slice(set.trial(i));
        y.push(set.labels()[i] as usize);
    }
    (Tensor::new(vec![g.items.len(), c, t], x).expect("group shape"), y)
}

fn run_step(
    model: &mut Model,
    plan: &TrainPlan,
    inputs: &[(Domain, Tensor, Vec<usize>)],
    objective: Objective,
    weights: &EpochWeights,
    rng: &mut ChaCha8Rng,
) -> Result<StepOut> {
    let mut g = Graph::new();
    let params = model.bind(&mut g);
    let mut logits = Vec::with_capacity(inputs.len());
    for (domain, x, _) in inputs {
        model.use_domain(*domain);
        let xv = g.constant(x.clone());
        logits.push(model.forward(&mut g, &params, xv, Mode::Train, rng)?);
    }
    let (loss, ce_source, ce_target, alignment) = match objective {
        Objective::Weighted => {
            let [(_, _, ys), (_, _, yt)] = inputs else {
                return Err(Error::invalid("train step", "weighted objective needs a source and a target batch"));
            };
            let terms = total_loss(
                &mut g,
                logits[0],
                ys,
                logits[1],
                yt,
                weights,
                plan.label_smoothing,
                plan.clamp_mmd_at_zero,
                None,
            )?;
            (
                terms.total,
                g.value(terms.ce_source).item(),
                g.value(terms.ce_target).item(),
                g.value(terms.alignment).item(),
            )
        }
        Objective::Unweighted => {
            let mut total = None;
            for (z, (_, _, y)) in logits.iter().zip(inputs) {
                let ce = cross_entropy(&mut g, *z, y, plan.label_smoothing)?;
                total = Some(match total {
                    None => ce,
                    Some(acc) => g.add(acc, ce)?,
                });
            }
            let total = total.ok_or(Error::Empty("step batches"))?;
            (total, f64::NAN, f64::NAN, 0.0)
        }
    };
    let value = g.value(loss).item();
    if !value.is_finite() {
        g.check_finite()?;
        return Err(Error::Training(format!("non-finite loss {value}")));
    }
    g.backward(loss)?;
    let grads = params.vars().iter().map(|&v| g.grad(v)).collect();
    Ok(StepOut {
        loss: value,
        ce_source,
        ce_target,
        alignment,
        grads,
    })
}

/// The shared loop behind every recipe: per epoch, schedule weights, batch
/// the data, step the optimizer, evaluate target validation accuracy, and
/// early-stop on it. The best epoch's parameters are restored at the end.
pub fn train_with(
    plan: &TrainPlan,
    data: &TrainData<'_>,
    model: &mut Model,
    schedule: BatchSchedule,
    objective: Objective,
    seed: u64,
) -> Result<RunRecord> {
    if data.target.is_empty() {
        return Err(Error::Empty("target training split"));
    }
    if data.target_val.is_empty() {
        return Err(Error::Empty("target validation split"));
    }
    if schedule == BatchSchedule::Paired && data.source.is_empty() {
        return Err(Error::Empty("source training split"));
    }
    if objective == Objective::Weighted && schedule != BatchSchedule::Paired {
        return Err(Error::Config("the weighted objective needs paired batches".into()));
    }
    let mut plan = plan.clone();
    plan.n_source = data.source.n_trials().max(1);
    plan.n_target = data.target.n_trials();
    plan.validate()?;

    let mut rng_batches = stream(seed, STREAM_BATCHES);
    let mut rng_augment = stream(seed, STREAM_AUGMENT);
    let mut rng_dropout = stream(seed, STREAM_DROPOUT);
    let mut batcher = Batcher::new(schedule, data.source.n_trials(), data.target.n_trials(), plan.batch_size);
    let mut opt = OptimizerState::new(plan.optimizer);
    let names: Vec<String> = model.named_parameters().into_iter().map(|(n, _)| n).collect();

    let mut record = RunRecord {
        history: Vec::new(),
        step_losses: Vec::new(),
        best_epoch: 0,
        best_val_accuracy: f64::NEG_INFINITY,
    };
    let mut best_model = model.clone();

    for epoch in 1..=plan.max_epochs {
        let weights = weights_for_epoch(&plan, epoch)?;
        let lr = cosine_lr(epoch, plan.max_epochs, plan.optimizer.lr, plan.lr_min);
        let steps = batcher.epoch(&mut rng_batches);
        let mut sums = [0.0f64; 4];
        let mut pending: Option<(Vec<Tensor>, usize)> = None;

        for (s, groups) in steps.iter().enumerate() {
            let mut inputs = Vec::with_capacity(groups.len());
            for grp in groups {
                let (x, y) = group_tensor(data, grp);
                let x = augment(&x, &plan.augment, &mut rng_augment)?;
                inputs.push((grp.domain, x, y));
            }
            let out = run_step(model, &plan, &inputs, objective, &weights, &mut rng_dropout)
                .map_err(|e| Error::Training(format!("epoch {epoch}, step {}: {e}", s + 1)))?;
            record.step_losses.push(out.loss);
            for (acc, v) in sums.iter_mut().zip([out.loss, out.ce_source, out.ce_target, out.alignment]) {
                *acc += v;
            }
            pending = Some(match pending {
                None => (out.grads, 1),
                Some((mut acc, n)) => {
                    for (a, g) in acc.iter_mut().zip(&out.grads) {
                        a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                    }
                    (acc, n + 1)
                }
            });
            let flush = pending.as_ref().is_some_and(|(_, n)| *n == plan.grad_accum) || s + 1 == steps.len();
            if flush {
                let (mut grads, n) = pending.take().expect("pending gradients");
                if n > 1 {
                    for g in &mut grads {
                        g.data_mut().iter_mut().for_each(|x| *x /= n as f64);
                    }
                }
                let mut params = model.parameters_mut();
                opt.step(&mut params, &grads, &names, lr)
                    .map_err(|e| Error::Training(format!("epoch {epoch}: {e}")))?;
            }
        }

        let val = evaluate(model, data.target_val, Domain::Target)?.accuracy;
        let n = steps.len().max(1) as f64;
        let (w_target, lambda_mmd) = match objective {
            Objective::Weighted => (weights.w_target, weights.lambda_mmd),
            Objective::Unweighted => (1.0, 0.0),
        };
        record.history.push(EpochRecord {
            epoch,
            loss: sums[0] / n,
            ce_source: sums[1] / n,
            ce_target: sums[2] / n,
            alignment: sums[3] / n,
            w_target,
            lambda_mmd,
            lr,
            val_accuracy: val,
        });
        log::debug!("epoch {epoch}: loss {:.5} val_acc {:.4} lr {:.5}", sums[0] / n, val, lr);
        if val > record.best_val_accuracy {
            record.best_val_accuracy = val;
            record.best_epoch = epoch;
            best_model = model.clone();
        } else if epoch - record.best_epoch >= plan.patience {
            log::info!("early stop at epoch {epoch}, best epoch {}", record.best_epoch);
            break;
        }
    }
    *model = best_model;
    Ok(record)
}
