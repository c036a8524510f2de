//! Augmentation-averaged inference, two-guess scoring, evaluation over task
//! sets, and attention-map export.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;

use crate::arcdata::{grid_equal, Grid, Task};
use crate::augment::{apply, enumerate_views, AugParams, OUTPUT_CLASSES};
use crate::augment::{decode_logits, invert_logits};
use crate::error::{Error, Result};
use crate::mask::AttentionMask;
use crate::model::{Model, PassKind, TaskToken};
use crate::params::ParamStore;
use crate::tensor::Tape;
use crate::train::{loo_context, ttt_adapt, TrainConfig, TttStrategy};

/// Decode one view's canvas logits to a grid of known output dims (used
/// where the target grid is available, i.e. on training demos).
pub fn decode_with_dims(
    logits: &Array2<f64>,
    p: &AugParams,
    dims: (usize, usize),
) -> Option<Grid> {
    let flat: Vec<f64> = logits.iter().copied().collect();
    let pooled = invert_logits(&flat, OUTPUT_CLASSES, p, dims).ok()?;
    decode_logits(&pooled, OUTPUT_CLASSES, dims).ok()
}

/// Decode one view's canvas logits back to a grid with unknown output dims.
///
/// The per-cell argmax class field gives a non-background bounding box
/// anchored at the translation offset. Because border-ring cells carry no
/// loss, their predictions are noise; when a ring cell shares a patch with
/// grid content it often reads as a color and inflates the box by one cell.
/// Each bounding-box edge is therefore tried both as-is and shrunk by one,
/// and candidates are scored by canvas log-likelihood with their own ring
/// excluded (block cells score log P(non-background), cells outside the
/// ring score log P(background)). `None` when no candidate is consistent.
pub fn decode_prediction(logits: &Array2<f64>, p: &AugParams) -> Option<Grid> {
    let n = p.canvas;
    if logits.nrows() != n * n || logits.ncols() != OUTPUT_CLASSES {
        return None;
    }
    let classes: Vec<u8> = (0..n * n)
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0usize;
            for k in 1..OUTPUT_CLASSES {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    let (ty, tx) = (p.translate_y, p.translate_x);
    let (mut r1, mut c1) = (0usize, 0usize);
    let mut any = false;
    for r in ty..n {
        for c in tx..n {
            if classes[r * n + c] < 10 {
                any = true;
                r1 = r1.max(r);
                c1 = c1.max(c);
            }
        }
    }
    if !any {
        return None;
    }
    // per-cell background probability
    let bg_logp: Vec<(f64, f64)> = (0..n * n)
        .map(|i| {
            let row = logits.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&l| (l - max).exp()).sum();
            let p_bg = ((row[10] - max).exp() / z).clamp(1e-12, 1.0 - 1e-12);
            (p_bg.ln(), (1.0 - p_bg).ln())
        })
        .collect();
    let mut scored: Vec<((usize, usize), f64)> = Vec::new();
    for shrink_h in 0..=1usize {
        for shrink_w in 0..=1usize {
            let (bh, bw) = (r1 - ty + 1, c1 - tx + 1);
            if bh <= shrink_h || bw <= shrink_w {
                continue;
            }
            let (sh, sw) = (bh - shrink_h, bw - shrink_w);
            if sh % p.scale != 0 || sw % p.scale != 0 {
                continue;
            }
            // every grid cell is a color, so the block's first row and
            // column must show some non-background prediction at the anchor
            let row_hit = (tx..tx + sw).any(|c| classes[ty * n + c] < 10);
            let col_hit = (ty..ty + sh).any(|r| classes[r * n + tx] < 10);
            if !row_hit || !col_hit {
                continue;
            }
            let (rh, rw) = (sh / p.scale, sw / p.scale);
            let dims = if p.rotation % 2 == 1 { (rw, rh) } else { (rh, rw) };
            if dims.0 == 0 || dims.0 > 30 || dims.1 == 0 || dims.1 > 30 {
                continue;
            }
            let mut score = 0.0;
            for r in 0..n {
                for c in 0..n {
                    let in_block = r >= ty && r < ty + sh && c >= tx && c < tx + sw;
                    let in_ring = !in_block
                        && r + 1 >= ty
                        && r <= ty + sh
                        && c + 1 >= tx
                        && c <= tx + sw;
                    if in_ring {
                        continue;
                    }
                    let (bg, nbg) = bg_logp[r * n + c];
                    score += if in_block { nbg } else { bg };
                }
            }
            scored.push((dims, score));
        }
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    let (dims, best) = *scored.first()?;
    // ambiguous candidates mean the ring noise swamped the evidence; treat
    // the view as undecodable rather than risk a systematically wrong vote
    if let Some(&(_, second)) = scored.get(1) {
        if best - second < 1.0 {
            return None;
        }
    }
    decode_with_dims(logits, p, dims)
}

/// Vote accumulator over decoded grids. Iteration order is the grids'
/// canonical ordering, which makes tie-breaking deterministic.
#[derive(Debug, Clone, Default)]
pub struct VoteTable {
    counts: BTreeMap<Grid, usize>,
}

impl VoteTable {
    pub fn add(&mut self, g: Grid) {
        *self.counts.entry(g).or_insert(0) += 1;
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    /// Candidates by descending count; equal counts break toward the
    /// canonically smaller grid.
    pub fn ranked(&self) -> Vec<(&Grid, usize)> {
        let mut v: Vec<(&Grid, usize)> = self.counts.iter().map(|(g, &c)| (g, c)).collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        v
    }

    /// The two guesses submitted for scoring.
    pub fn top_two(&self) -> Result<Vec<Grid>> {
        if self.is_empty() {
            return Err(Error::EmptyVotes);
        }
        Ok(self.ranked().into_iter().take(2).map(|(g, _)| g.clone()).collect())
    }
}

/// Run `n_views` jointly augmented forward passes and collect decoded votes.
/// Views that decode to no consistent grid are skipped.
pub fn predict_votes(
    model: &Model,
    store: &ParamStore,
    context: &[(Grid, Grid)],
    query: &Grid,
    token: TaskToken,
    n_views: usize,
    view_seed: u64,
    align: usize,
) -> Result<VoteTable> {
    let mut dims = vec![(query.height(), query.width())];
    for (x, y) in context {
        dims.push((x.height(), x.width()));
        dims.push((y.height(), y.width()));
    }
    let views = enumerate_views(n_views, view_seed, &dims, model.cfg.canvas, align)?;
    let mut votes = VoteTable::default();
    for view in &views {
        let qc = apply(query, view)?;
        let demos = context
            .iter()
            .map(|(x, y)| Ok((apply(x, view)?, apply(y, view)?)))
            .collect::<Result<Vec<_>>>()?;
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, store, &qc, &demos, token)?;
        if let Some(g) = decode_prediction(tape.value(out.cell_logits), view) {
            votes.add(g);
        }
    }
    Ok(votes)
}

/// Two-guess exact-match scoring: the prediction counts if either of the two
/// top-voted candidates equals the ground truth.
pub fn pass_at_2(votes: &VoteTable, truth: &Grid) -> Result<bool> {
    Ok(votes.top_two()?.iter().any(|g| grid_equal(g, truth)))
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub n_views: usize,
    pub view_seed: u64,
    pub align: usize,
    /// Adapt a per-task clone of the checkpoint before predicting.
    pub ttt: Option<TttStrategy>,
}

impl EvalOptions {
    pub fn desk() -> Self {
        EvalOptions { n_views: 30, view_seed: 0, align: 2, ttt: None }
    }
}

#[derive(Debug, Clone)]
pub struct TaskResult {
    pub task_id: String,
    pub n_infer: usize,
    pub n_solved: usize,
    pub n_votes: usize,
    pub ttt_epochs: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub tasks: Vec<TaskResult>,
    pub solved: usize,
    pub total: usize,
}

impl EvalReport {
    pub fn pass_at_2(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.solved as f64 / self.total as f64
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("task_id,n_infer,n_solved,n_votes,ttt_epochs\n");
        for t in &self.tasks {
            let e = t.ttt_epochs.map(|e| e.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                t.task_id, t.n_infer, t.n_solved, t.n_votes, e
            ));
        }
        out
    }
}

/// Score one task. `token` selects between a trained task embedding and the
/// adapted token; with a TTT strategy the checkpoint is cloned and adapted
/// first (forcing the adapted token).
pub fn evaluate_task(
    model: &Model,
    store: &ParamStore,
    task: &Task,
    task_index: Option<usize>,
    opts: &EvalOptions,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TaskResult> {
    let mut adapted_store;
    let mut ttt_epochs = None;
    let (store_ref, token) = match (&opts.ttt, task_index) {
        (Some(strategy), _) => {
            let (s, log) = ttt_adapt(model, store, task, strategy, cfg, seed)?;
            adapted_store = s;
            ttt_epochs = Some(log.epochs_run);
            (&adapted_store, TaskToken::Adapted)
        }
        (None, Some(ti)) => (store, TaskToken::Index(ti)),
        (None, None) => {
            adapted_store = store.clone();
            model.init_ttt_token(&mut adapted_store);
            (&adapted_store, TaskToken::Adapted)
        }
    };
    let mut n_solved = 0;
    let mut n_votes = 0;
    for (qi, pair) in task.infer.iter().enumerate() {
        let votes = predict_votes(
            model,
            store_ref,
            &task.demos,
            &pair.input,
            token,
            opts.n_views,
            opts.view_seed ^ (qi as u64).wrapping_mul(0x9e37_79b9),
            opts.align,
        )?;
        n_votes += votes.total();
        let truth = pair
            .output
            .as_ref()
            .ok_or_else(|| Error::MissingGroundTruth(task.task_id.clone()))?;
        if !votes.is_empty() && pass_at_2(&votes, truth.reveal())? {
            n_solved += 1;
        }
    }
    Ok(TaskResult {
        task_id: task.task_id.clone(),
        n_infer: task.infer.len(),
        n_solved,
        n_votes,
        ttt_epochs,
    })
}

/// Score a task set in parallel. `trained` maps task `i` to embedding `i`
/// (in-distribution eval); otherwise each task gets the adapted token, with
/// optional test-time training.
pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    tasks: &[Task],
    trained: bool,
    opts: &EvalOptions,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<EvalReport> {
    let results: Result<Vec<TaskResult>> = tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            let idx = if trained { Some(i) } else { None };
            evaluate_task(model, store, task, idx, opts, cfg, seed ^ (i as u64) << 8)
        })
        .collect();
    let tasks_out = results?;
    let solved = tasks_out.iter().map(|t| t.n_solved).sum();
    let total = tasks_out.iter().map(|t| t.n_infer).sum();
    Ok(EvalReport { tasks: tasks_out, solved, total })
}

/// Audit of recorded attention: support must stay inside the mask, and every
/// row of a dense pass must sum to 1.
#[derive(Debug, Clone, Copy, Default)]
pub struct AttnAudit {
    pub support_violations: usize,
    pub max_dense_row_sum_err: f64,
    pub records: usize,
}

pub fn audit_attention(tape: &Tape, records: &[crate::model::AttnRecord]) -> AttnAudit {
    let mut audit = AttnAudit::default();
    for rec in records {
        let weights = tape.attention_weights(rec.node).expect("attention record");
        let mask: &AttentionMask = tape.attention_mask(rec.node).expect("attention record");
        audit.records += 1;
        for head in weights {
            for r in 0..head.nrows() {
                let mut sum = 0.0;
                for c in 0..head.ncols() {
                    let w = head[[r, c]];
                    if w != 0.0 && !mask.allows(r, c) {
                        audit.support_violations += 1;
                    }
                    sum += w;
                }
                if mask.is_dense_row(r) {
                    audit.max_dense_row_sum_err =
                        audit.max_dense_row_sum_err.max((sum - 1.0).abs());
                }
            }
        }
    }
    audit
}

#[derive(Debug, Clone)]
pub struct AttnExport {
    pub files: Vec<PathBuf>,
    pub audit: AttnAudit,
}

/// Render attention maps for a task's first query under a forced scale-2
/// identity view. One grayscale PNG per (layer, step, pass): the attention
/// of the canvas-center workspace token over the workspace lattice, with the
/// controller tokens as a column strip on the left.
pub fn export_attention(
    model: &Model,
    store: &ParamStore,
    task: &Task,
    out_dir: &Path,
) -> Result<AttnExport> {
    let canvas = model.cfg.canvas;
    let view = AugParams {
        rotation: 0,
        translate_x: 2,
        translate_y: 2,
        scale: 2,
        canvas,
        seed_tag: 0,
    };
    let query = &task.infer.first().map(|p| p.input.clone()).unwrap_or(task.demos[0].0.clone());
    let mut dims = vec![(query.height(), query.width())];
    for (x, y) in &task.demos {
        dims.push((x.height(), x.width()));
        dims.push((y.height(), y.width()));
    }
    for &(h, w) in &dims {
        if !view.fits(h, w) {
            return Err(Error::GridTooLargeForScale2 { h, w, canvas });
        }
    }
    let ctx = loo_context(&task.demos, usize::MAX);
    let qc = apply(query, &view)?;
    let demos = ctx
        .iter()
        .map(|(x, y)| Ok((apply(x, &view)?, apply(y, &view)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut adapted = store.clone();
    model.init_ttt_token(&mut adapted);
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &adapted, &qc, &demos, TaskToken::Adapted)?;
    let audit = audit_attention(&tape, &out.attn);

    std::fs::create_dir_all(out_dir).map_err(Error::Io)?;
    let side = model.cfg.grid_side();
    let p_ctrl = out.p_ctrl;
    // the workspace token covering the canvas center
    let probe = p_ctrl + (side / 2) * side + side / 2;
    const UPSCALE: u32 = 8;
    let mut files = Vec::new();
    for rec in &out.attn {
        let weights = tape.attention_weights(rec.node).expect("attention record");
        // head-averaged probe row
        let s = weights[0].nrows();
        let mut row = vec![0.0f64; s];
        for head in weights {
            for c in 0..s {
                row[c] += head[[probe, c]] / weights.len() as f64;
            }
        }
        let peak = row.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
        let width = (1 + side) as u32 * UPSCALE;
        let height = side as u32 * UPSCALE;
        let mut img = image::GrayImage::new(width, height);
        for py in 0..height {
            for px in 0..width {
                let gx = (px / UPSCALE) as usize;
                let gy = (py / UPSCALE) as usize;
                let w = if gx == 0 {
                    // controller strip, tokens spread down the column
                    let idx = gy * p_ctrl / side;
                    row[idx.min(p_ctrl - 1)]
                } else {
                    row[p_ctrl + gy * side + (gx - 1)]
                };
                let v = (w / peak * 255.0).round().clamp(0.0, 255.0) as u8;
                img.put_pixel(px, py, image::Luma([v]));
            }
        }
        let pass = match rec.pass {
            PassKind::Dense => "dense",
            PassKind::Structured => "struct",
        };
        let name = format!("{}_layer{}_step{}_{}.png", task.task_id, rec.layer, rec.step, pass);
        let path = out_dir.join(name);
        img.save(&path)
            .map_err(|e| Error::Checkpoint(format!("attention map write failed: {e}")))?;
        files.push(path);
    }
    let manifest = out_dir.join(format!("{}_manifest.txt", task.task_id));
    let listing: String = files
        .iter()
        .map(|p| format!("{}\n", p.file_name().unwrap().to_string_lossy()))
        .collect();
    std::fs::write(&manifest, listing).map_err(Error::Io)?;
    files.push(manifest);
    Ok(AttnExport { files, audit })
}
