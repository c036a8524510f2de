//! Offline multi-task training, staged c-to-d training, and the three
//! test-time-training strategies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arcdata::{grid_equal, Grid, Task};
use crate::augment::{apply, sample_aug_with, AugParams, Canvas, BORDER};
use crate::error::{Error, Result};
use crate::infer::decode_with_dims;
use crate::mask::Variant;
use crate::model::{Model, ModelConfig, TaskToken};
use crate::params::ParamStore;
use crate::tensor::{NodeId, Tape};

/// Auxiliary TTT3 loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ttt3Config {
    pub correctness_weight: f64,
    pub wrong_pixel_weight: f64,
    pub correct_pixel_weight: f64,
    pub exact_match_ce_scale: f64,
}

impl Default for Ttt3Config {
    fn default() -> Self {
        Ttt3Config {
            correctness_weight: 0.1,
            wrong_pixel_weight: 1.0,
            correct_pixel_weight: 0.1,
            exact_match_ce_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub mid_loss_weight: f64,
    pub use_mid_loss: bool,
    pub ttt3: Option<Ttt3Config>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { mid_loss_weight: 0.5, use_mid_loss: false, ttt3: None }
    }
}

impl LossConfig {
    pub fn validate(&self, recur_steps: usize) -> Result<()> {
        if self.use_mid_loss && recur_steps <= 2 {
            return Err(Error::ConfigViolation(format!(
                "mid-loss requested with r = {recur_steps}; it requires r > 2"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TttKind {
    Ttt1,
    Ttt2,
    Ttt3,
}

/// A test-time-training strategy: optimization budget, step-size scale,
/// early-stop rule, and optional auxiliary objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TttStrategy {
    pub kind: TttKind,
    pub epochs: usize,
    pub lr_scale: f64,
    /// Consecutive 100%-accuracy epochs that stop adaptation; 0 disables.
    pub early_stop_streak: usize,
    pub aux: Option<Ttt3Config>,
}

impl TttStrategy {
    /// Baseline: 100 epochs, full step size, no early stop.
    pub fn ttt1() -> Self {
        TttStrategy { kind: TttKind::Ttt1, epochs: 100, lr_scale: 1.0, early_stop_streak: 0, aux: None }
    }

    /// Same compute, smaller steps: 3x epochs at 1/3 the step size, stopping
    /// after a 3-epoch streak at 100% training accuracy.
    pub fn ttt2() -> Self {
        TttStrategy {
            kind: TttKind::Ttt2,
            epochs: 300,
            lr_scale: 1.0 / 3.0,
            early_stop_streak: 3,
            aux: None,
        }
    }

    /// TTT2 plus correctness supervision and pixel-level error emphasis.
    pub fn ttt3() -> Self {
        TttStrategy { aux: Some(Ttt3Config::default()), kind: TttKind::Ttt3, ..Self::ttt2() }
    }
}

/// Full training configuration around a model config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub eval_every: u64,
    /// Stop as soon as a training-accuracy eval hits 100%.
    pub stop_at_full_acc: bool,
    pub loss: LossConfig,
    /// Placement alignment in cells; 2 keeps grid cells on patch boundaries.
    pub align: usize,
    pub ttt_base_lr: f64,
}

impl TrainConfig {
    pub fn desk(model: ModelConfig) -> Self {
        TrainConfig {
            model,
            lr: 3e-3,
            betas: (0.9, 0.999),
            weight_decay: 0.0,
            batch_size: 8,
            steps: 500,
            eval_every: 25,
            stop_at_full_acc: false,
            loss: LossConfig::default(),
            align: 2,
            ttt_base_lr: 1e-3,
        }
    }
}

/// One supervised sample: augmented query/demo canvases plus the per-cell
/// target classes and loss weights (border cells weighted 0).
pub struct Sample {
    pub query: Canvas,
    pub demos: Vec<(Canvas, Canvas)>,
    pub targets: Vec<usize>,
    pub weights: Vec<f64>,
    pub target_grid: Grid,
    pub aug: AugParams,
}

/// Target classes and weights for an output canvas: colors keep their index,
/// background is class 10, border cells carry weight 0.
pub fn target_classes(canvas: &Canvas) -> (Vec<usize>, Vec<f64>) {
    let mut targets = Vec::with_capacity(canvas.cells().len());
    let mut weights = Vec::with_capacity(canvas.cells().len());
    for &s in canvas.cells() {
        if s == BORDER {
            targets.push(10);
            weights.push(0.0);
        } else {
            targets.push(s.min(10) as usize);
            weights.push(1.0);
        }
    }
    (targets, weights)
}

/// Build the canvases for one training step: the same augmentation is
/// applied to the query pair and every context demo.
pub fn make_sample(
    context: &[(Grid, Grid)],
    target: &(Grid, Grid),
    aug: AugParams,
) -> Result<Sample> {
    let query = apply(&target.0, &aug)?;
    let target_canvas = apply(&target.1, &aug)?;
    let (targets, weights) = target_classes(&target_canvas);
    let demos = context
        .iter()
        .map(|(x, y)| Ok((apply(x, &aug)?, apply(y, &aug)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Sample { query, demos, targets, weights, target_grid: target.1.clone(), aug })
}

/// All grid dims touched by a step (query pair plus context pairs); the
/// sampled augmentation must fit every one of them.
fn step_dims(context: &[(Grid, Grid)], target: &(Grid, Grid)) -> Vec<(usize, usize)> {
    let mut dims = vec![
        (target.0.height(), target.0.width()),
        (target.1.height(), target.1.width()),
    ];
    for (x, y) in context {
        dims.push((x.height(), x.width()));
        dims.push((y.height(), y.width()));
    }
    dims
}

/// Leave-one-out context: all demos except `leave_out`. Falls back to the
/// full demo set when that would leave no context (m = 1 tasks).
pub fn loo_context(demos: &[(Grid, Grid)], leave_out: usize) -> Vec<(Grid, Grid)> {
    let ctx: Vec<(Grid, Grid)> = demos
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != leave_out)
        .map(|(_, d)| d.clone())
        .collect();
    if ctx.is_empty() {
        demos.to_vec()
    } else {
        ctx
    }
}

/// Loss components, with the graph node of the total.
pub struct LossTerms {
    pub total: NodeId,
    pub base_ce: f64,
    pub mid_ce: f64,
    pub correctness: f64,
}

/// Assemble the training objective on the tape.
///
/// Base term: weighted-mean cross-entropy over unmasked cells. With the TTT3
/// auxiliary config, the base splits into wrong-pixel and correct-pixel
/// means, and a correctness BCE term is added; an exactly-correct prediction
/// scales the plain CE down and disables mid-loss for the sample.
#[allow(clippy::too_many_arguments)]
pub fn compute_loss(
    tape: &mut Tape,
    cell_logits: NodeId,
    targets: &[usize],
    weights: &[f64],
    mid_logits: Option<NodeId>,
    correct_score: Option<NodeId>,
    exact_match: bool,
    cfg: &LossConfig,
    recur_steps: usize,
) -> Result<LossTerms> {
    cfg.validate(recur_steps)?;
    let mut terms: Vec<(NodeId, f64)> = Vec::new();
    let mut mid_enabled = cfg.use_mid_loss;
    let base_ce;
    let mut correctness = 0.0;
    match cfg.ttt3 {
        Some(aux) => {
            if exact_match {
                let ce = tape.cross_entropy(cell_logits, targets, weights)?;
                base_ce = tape.scalar(ce) * aux.exact_match_ce_scale;
                terms.push((ce, aux.exact_match_ce_scale));
                mid_enabled = false;
            } else {
                let pred = argmax_classes(tape, cell_logits);
                let mut wrong_w = vec![0.0; weights.len()];
                let mut right_w = vec![0.0; weights.len()];
                for i in 0..weights.len() {
                    if weights[i] > 0.0 {
                        if pred[i] == targets[i] {
                            right_w[i] = weights[i];
                        } else {
                            wrong_w[i] = weights[i];
                        }
                    }
                }
                let ce_wrong = tape.cross_entropy(cell_logits, targets, &wrong_w)?;
                let ce_right = tape.cross_entropy(cell_logits, targets, &right_w)?;
                base_ce = aux.wrong_pixel_weight * tape.scalar(ce_wrong)
                    + aux.correct_pixel_weight * tape.scalar(ce_right);
                terms.push((ce_wrong, aux.wrong_pixel_weight));
                terms.push((ce_right, aux.correct_pixel_weight));
            }
            let score = correct_score.ok_or_else(|| {
                Error::ConfigViolation("TTT3 aux requires the correctness score".into())
            })?;
            let bce = tape.bce_with_logit(score, if exact_match { 1.0 } else { 0.0 });
            correctness = tape.scalar(bce) * aux.correctness_weight;
            terms.push((bce, aux.correctness_weight));
        }
        None => {
            let ce = tape.cross_entropy(cell_logits, targets, weights)?;
            base_ce = tape.scalar(ce);
            terms.push((ce, 1.0));
        }
    }
    let mut mid_ce = 0.0;
    if mid_enabled {
        if let Some(mid) = mid_logits {
            let ce = tape.cross_entropy(mid, targets, weights)?;
            mid_ce = tape.scalar(ce) * cfg.mid_loss_weight;
            terms.push((ce, cfg.mid_loss_weight));
        }
    }
    let total = tape.weighted_sum(&terms);
    Ok(LossTerms { total, base_ce, mid_ce, correctness })
}

fn argmax_classes(tape: &Tape, cell_logits: NodeId) -> Vec<usize> {
    let v = tape.value(cell_logits);
    (0..v.nrows())
        .map(|i| {
            let row = v.row(i);
            let mut best = 0;
            for k in 1..row.len() {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: f64,
    pub base_ce: f64,
    pub mid_ce: f64,
    pub train_acc: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainMetrics {
    pub rows: Vec<MetricsRow>,
    pub final_train_acc: f64,
    /// First optimizer step at which a training-accuracy eval hit 100%.
    pub full_acc_step: Option<u64>,
}

impl TrainMetrics {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,base_ce,mid_ce,train_acc\n");
        for r in &self.rows {
            let acc = r.train_acc.map(|a| format!("{a:.4}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{}\n",
                r.step, r.loss, r.base_ce, r.mid_ce, acc
            ));
        }
        out
    }
}

/// Exact-match rate over all (task, demo) pairs under the identity view with
/// leave-one-out controllers.
pub fn train_accuracy(
    model: &Model,
    store: &ParamStore,
    tasks: &[Task],
    align: usize,
) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (ti, task) in tasks.iter().enumerate() {
        for j in 0..task.demos.len() {
            let ctx = loo_context(&task.demos, j);
            let aug = AugParams::identity(model.cfg.canvas, align);
            let sample = make_sample(&ctx, &task.demos[j], aug)?;
            let mut tape = Tape::new();
            let out = model.forward(
                &mut tape,
                store,
                &sample.query,
                &sample.demos,
                TaskToken::Index(ti),
            )?;
            let dims = (sample.target_grid.height(), sample.target_grid.width());
            let pred = decode_with_dims(tape.value(out.cell_logits), &sample.aug, dims);
            if pred.map(|g| grid_equal(&g, &sample.target_grid)).unwrap_or(false) {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}

/// Offline multi-task training. Task `i` uses task embedding `i`. Per step:
/// sample a task, a target demo, and a joint augmentation; build the
/// controller from the remaining demos; accumulate over `batch_size` samples
/// and take one optimizer step. Inference sets are never read.
pub fn train_offline(
    model: &Model,
    store: &mut ParamStore,
    tasks: &[Task],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainMetrics> {
    cfg.loss.validate(model.cfg.recur_steps)?;
    for (i, t) in tasks.iter().enumerate() {
        if i >= model.cfg.n_task_embeddings {
            return Err(Error::TaskIndexOutOfRange(i, model.cfg.n_task_embeddings));
        }
        let _ = t;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut metrics = TrainMetrics::default();
    for step in 1..=cfg.steps {
        store.zero_grads();
        let mut loss_sum = 0.0;
        let mut base_sum = 0.0;
        let mut mid_sum = 0.0;
        for _ in 0..cfg.batch_size {
            let ti = rng.gen_range(0..tasks.len());
            let task = &tasks[ti];
            let j = rng.gen_range(0..task.demos.len());
            let ctx = loo_context(&task.demos, j);
            let dims = step_dims(&ctx, &task.demos[j]);
            let aug = sample_aug_with(&mut rng, &dims, model.cfg.canvas, cfg.align, seed ^ step)?;
            let sample = make_sample(&ctx, &task.demos[j], aug)?;
            let mut tape = Tape::new();
            let out = model.forward(
                &mut tape,
                store,
                &sample.query,
                &sample.demos,
                TaskToken::Index(ti),
            )?;
            let terms = compute_loss(
                &mut tape,
                out.cell_logits,
                &sample.targets,
                &sample.weights,
                out.mid_cell_logits,
                Some(out.correct_score),
                false,
                &cfg.loss,
                model.cfg.recur_steps,
            )?;
            let scaled = tape.scale(terms.total, 1.0 / cfg.batch_size as f64);
            let value = tape.scalar(scaled);
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss(step));
            }
            loss_sum += value;
            base_sum += terms.base_ce / cfg.batch_size as f64;
            mid_sum += terms.mid_ce / cfg.batch_size as f64;
            tape.backward(scaled, store);
        }
        // cosine decay with a 10% floor
        let progress = (step - 1) as f64 / cfg.steps.max(1) as f64;
        let lr = cfg.lr * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * progress).cos()));
        store.adam_step(lr, cfg.betas, cfg.weight_decay)?;

        let eval_now = cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == cfg.steps);
        let acc = if eval_now {
            let a = train_accuracy(model, store, tasks, cfg.align)?;
            metrics.final_train_acc = a;
            if a == 1.0 && metrics.full_acc_step.is_none() {
                metrics.full_acc_step = Some(step);
            }
            Some(a)
        } else {
            None
        };
        metrics.rows.push(MetricsRow {
            step,
            loss: loss_sum,
            base_ce: base_sum,
            mid_ce: mid_sum,
            train_acc: acc,
        });
        if cfg.stop_at_full_acc && metrics.full_acc_step.is_some() {
            break;
        }
    }
    Ok(metrics)
}

/// Continue a variant-c checkpoint under variant-d masks: all parameters
/// carry over, only the structured mask changes.
pub fn staged_c_to_d(
    model_c: &Model,
    store: &mut ParamStore,
    tasks: &[Task],
    cfg: &TrainConfig,
    extra_steps: u64,
    seed: u64,
) -> Result<(Model, TrainMetrics)> {
    if model_c.cfg.variant != Variant::C {
        return Err(Error::VariantMismatch(format!(
            "staged training starts from variant c, got {}",
            model_c.cfg.variant.letter()
        )));
    }
    let mut cfg_d = cfg.clone();
    cfg_d.model.variant = Variant::D;
    cfg_d.steps = extra_steps;
    let model_d = Model::new(cfg_d.model)?;
    let metrics = if extra_steps > 0 {
        train_offline(&model_d, store, tasks, &cfg_d, seed)?
    } else {
        TrainMetrics::default()
    };
    Ok((model_d, metrics))
}

#[derive(Debug, Clone, Default)]
pub struct TttLog {
    pub epochs_run: usize,
    pub accs: Vec<f64>,
    pub stopped_early: bool,
}

/// Adapt a pretrained checkpoint to one unseen task: fresh task token
/// (mean-of-table init), fresh optimizer state, per-epoch augmented demo
/// supervision end-to-end, early stop on an accuracy streak.
pub fn ttt_adapt(
    model: &Model,
    store: &ParamStore,
    task: &Task,
    strategy: &TttStrategy,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ParamStore, TttLog)> {
    let mut adapted = store.clone();
    model.init_ttt_token(&mut adapted);
    adapted.reset_optimizer();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lr = cfg.ttt_base_lr * strategy.lr_scale;
    let loss_cfg = LossConfig { ttt3: strategy.aux, ..cfg.loss };
    let mut log = TttLog::default();
    let mut streak = 0usize;
    for _epoch in 1..=strategy.epochs {
        let mut correct = 0usize;
        for j in 0..task.demos.len() {
            let ctx = loo_context(&task.demos, j);
            let dims = step_dims(&ctx, &task.demos[j]);
            let aug = sample_aug_with(&mut rng, &dims, model.cfg.canvas, cfg.align, seed)?;
            let sample = make_sample(&ctx, &task.demos[j], aug)?;
            let mut tape = Tape::new();
            let out = model.forward(
                &mut tape,
                &adapted,
                &sample.query,
                &sample.demos,
                TaskToken::Adapted,
            )?;
            let dims = (sample.target_grid.height(), sample.target_grid.width());
            let pred = decode_with_dims(tape.value(out.cell_logits), &sample.aug, dims);
            let exact = pred.map(|g| grid_equal(&g, &sample.target_grid)).unwrap_or(false);
            if exact {
                correct += 1;
            }
            adapted.zero_grads();
            let terms = compute_loss(
                &mut tape,
                out.cell_logits,
                &sample.targets,
                &sample.weights,
                out.mid_cell_logits,
                Some(out.correct_score),
                exact,
                &loss_cfg,
                model.cfg.recur_steps,
            )?;
            tape.backward(terms.total, &mut adapted);
            adapted.adam_step(lr, cfg.betas, cfg.weight_decay)?;
        }
        let acc = correct as f64 / task.demos.len() as f64;
        log.accs.push(acc);
        log.epochs_run += 1;
        if strategy.early_stop_streak > 0 {
            if acc == 1.0 {
                streak += 1;
                if streak >= strategy.early_stop_streak {
                    log.stopped_early = true;
                    break;
                }
            } else {
                streak = 0;
            }
        }
    }
    Ok((adapted, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arcdata::{synth_task, SynthFamily};

    fn tiny_model() -> (Model, ParamStore) {
        let mut cfg = ModelConfig::desk(Variant::D);
        cfg.embed_dim = 16;
        cfg.heads = 2;
        cfg.depth = 1;
        cfg.canvas = 12;
        let model = Model::new(cfg).unwrap();
        let store = model.init_params(0);
        (model, store)
    }

    #[test]
    fn uniform_logits_loss_is_ln_11() {
        let mut tape = Tape::new();
        let logits = tape.zeros(9, 11);
        let targets = vec![0usize; 9];
        let weights = vec![1.0; 9];
        let cfg = LossConfig::default();
        let terms =
            compute_loss(&mut tape, logits, &targets, &weights, None, None, false, &cfg, 1)
                .unwrap();
        assert!((tape.scalar(terms.total) - (11.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn ttt3_pixel_split_arithmetic() {
        // wrong cells CE {2, 4}, correct cells CE {0.1, 0.3}:
        // total = 1.0 * mean(2, 4) + 0.1 * mean(0.1, 0.3) = 3.02.
        // Per cell: target-class logit a = -ln(e^c - 1), rival logit 0, rest
        // sunk to -1e9, so CE = ln(1 + e^-a) = c and the argmax flips with a.
        let mut tape = Tape::new();
        let mut rows = ndarray::Array2::from_elem((4, 11), -1e9);
        for (i, c) in [(0usize, 2.0f64), (1, 4.0), (2, 0.1), (3, 0.3)] {
            rows[[i, 0]] = -((c.exp() - 1.0).ln());
            rows[[i, 1]] = 0.0;
        }
        let logits = tape.constant(rows);
        let targets = vec![0usize; 4];
        let weights = vec![1.0; 4];
        let cfg = LossConfig {
            ttt3: Some(Ttt3Config {
                correctness_weight: 0.0,
                wrong_pixel_weight: 1.0,
                correct_pixel_weight: 0.1,
                exact_match_ce_scale: 0.1,
            }),
            ..LossConfig::default()
        };
        let score = tape.zeros(1, 1);
        let terms = compute_loss(
            &mut tape, logits, &targets, &weights, None, Some(score), false, &cfg, 1,
        )
        .unwrap();
        assert!((tape.scalar(terms.total) - 3.02).abs() < 1e-9, "{}", tape.scalar(terms.total));
    }

    #[test]
    fn ttt3_exact_match_downweights_and_disables_mid() {
        let mut tape = Tape::new();
        let logits = tape.zeros(4, 11);
        let mid = tape.zeros(4, 11);
        let score = tape.zeros(1, 1);
        let targets = vec![0usize; 4];
        let weights = vec![1.0; 4];
        let cfg = LossConfig {
            use_mid_loss: true,
            mid_loss_weight: 1.0,
            ttt3: Some(Ttt3Config::default()),
        };
        let terms = compute_loss(
            &mut tape, logits, &targets, &weights, Some(mid), Some(score), true, &cfg, 4,
        )
        .unwrap();
        let ln11 = (11.0f64).ln();
        let bce = (2.0f64).ln(); // sigmoid(0) against label 1
        assert_eq!(terms.mid_ce, 0.0);
        assert!((tape.scalar(terms.total) - (0.1 * ln11 + 0.1 * bce)).abs() < 1e-12);
    }

    #[test]
    fn mid_loss_rejected_for_shallow_recurrence() {
        let cfg = LossConfig { use_mid_loss: true, ..LossConfig::default() };
        assert!(cfg.validate(1).is_err());
        assert!(cfg.validate(2).is_err());
        assert!(cfg.validate(4).is_ok());
    }

    #[test]
    fn ttt_strategy_invariants() {
        let t1 = TttStrategy::ttt1();
        assert_eq!((t1.epochs, t1.early_stop_streak), (100, 0));
        assert!(t1.aux.is_none());
        let t2 = TttStrategy::ttt2();
        assert_eq!((t2.epochs, t2.early_stop_streak), (300, 3));
        assert!((t2.lr_scale - 1.0 / 3.0).abs() < 1e-15);
        let t3 = TttStrategy::ttt3();
        assert!(t3.aux.is_some());
        assert_eq!(t3.epochs, 300);
    }

    #[test]
    fn zero_steps_leaves_checkpoint_at_init() {
        let (model, mut store) = tiny_model();
        let before = store.clone();
        let tasks = vec![synth_task(SynthFamily::MirrorH, 1, 3, 1)];
        let mut cfg = TrainConfig::desk(model.cfg);
        cfg.steps = 0;
        train_offline(&model, &mut store, &tasks, &cfg, 0).unwrap();
        for name in before.names() {
            assert_eq!(store.value(name), before.value(name));
        }
    }

    #[test]
    fn training_is_deterministic_and_never_reads_infer_outputs() {
        let (model, store) = tiny_model();
        let tasks = vec![
            synth_task(SynthFamily::Recolor { from: 2, to: 5 }, 1, 3, 1),
            synth_task(SynthFamily::MirrorH, 2, 3, 1),
        ];
        let mut cfg = TrainConfig::desk(model.cfg);
        cfg.steps = 3;
        cfg.batch_size = 2;
        cfg.eval_every = 3;
        let mut s1 = store.clone();
        let m1 = train_offline(&model, &mut s1, &tasks, &cfg, 9).unwrap();
        let mut s2 = store.clone();
        let m2 = train_offline(&model, &mut s2, &tasks, &cfg, 9).unwrap();
        for name in s1.names() {
            assert_eq!(s1.value(name), s2.value(name));
        }
        assert_eq!(m1.rows.len(), m2.rows.len());
        for (a, b) in m1.rows.iter().zip(m2.rows.iter()) {
            assert_eq!(a.loss, b.loss);
        }
        for task in &tasks {
            for p in &task.infer {
                assert_eq!(p.output.as_ref().unwrap().read_count(), 0);
            }
        }
    }

    #[test]
    fn loo_context_excludes_target() {
        let t = synth_task(SynthFamily::MirrorV, 5, 3, 1);
        for j in 0..3 {
            let ctx = loo_context(&t.demos, j);
            assert_eq!(ctx.len(), 2);
            assert!(!ctx.iter().any(|d| d == &t.demos[j]));
        }
        let single = synth_task(SynthFamily::MirrorV, 6, 1, 1);
        assert_eq!(loo_context(&single.demos, 0).len(), 1);
    }

    #[test]
    fn staged_requires_variant_c() {
        let (model, mut store) = tiny_model(); // variant d
        let tasks = vec![synth_task(SynthFamily::MirrorH, 1, 2, 1)];
        let cfg = TrainConfig::desk(model.cfg);
        let err = staged_c_to_d(&model, &mut store, &tasks, &cfg, 0, 0).unwrap_err();
        assert!(matches!(err, Error::VariantMismatch(_)));
    }

    #[test]
    fn staged_zero_extra_steps_swaps_mask_only() {
        let mut cfg = ModelConfig::desk(Variant::C);
        cfg.embed_dim = 16;
        cfg.heads = 2;
        cfg.depth = 1;
        cfg.canvas = 12;
        let model_c = Model::new(cfg).unwrap();
        let mut store = model_c.init_params(3);
        let before = store.clone();
        let tasks = vec![synth_task(SynthFamily::MirrorH, 1, 2, 1)];
        let tcfg = TrainConfig::desk(cfg);
        let (model_d, _) = staged_c_to_d(&model_c, &mut store, &tasks, &tcfg, 0, 0).unwrap();
        assert_eq!(model_d.cfg.variant, Variant::D);
        for name in before.names() {
            assert_eq!(store.value(name), before.value(name));
        }
        // forward under d-masks differs from c-masks on a generic input
        let aug = AugParams::identity(cfg.canvas, 2);
        let sample = make_sample(&loo_context(&tasks[0].demos, 0), &tasks[0].demos[0], aug).unwrap();
        let mut tc = Tape::new();
        let oc = model_c
            .forward(&mut tc, &store, &sample.query, &sample.demos, TaskToken::Index(0))
            .unwrap();
        let mut td = Tape::new();
        let od = model_d
            .forward(&mut td, &store, &sample.query, &sample.demos, TaskToken::Index(0))
            .unwrap();
        assert_ne!(tc.value(oc.cell_logits), td.value(od.cell_logits));
    }
}
