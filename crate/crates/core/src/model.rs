//! The role-separated transformer: patch/positional embedding, controller
//! construction (task token + per-demo context tokens), the four block
//! variants with their structured masks, the output head, and the
//! correctness head.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::augment::{Canvas, INPUT_SYMBOLS, OUTPUT_CLASSES};
use crate::error::{Error, Result};
use crate::mask::{build_mask, AttentionMask, Variant};
use crate::params::ParamStore;
use crate::recurrence::{recur_forward, RecurOutput};
use crate::tensor::{NodeId, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub canvas: usize,
    pub patch: usize,
    pub heads: usize,
    pub variant: Variant,
    pub recur_steps: usize,
    pub ema_alpha: f64,
    pub max_demos: usize,
    pub n_task_embeddings: usize,
}

impl ModelConfig {
    /// Desk-scale default used throughout tests and experiments.
    pub fn desk(variant: Variant) -> Self {
        ModelConfig {
            embed_dim: 64,
            depth: 2,
            canvas: 16,
            patch: 2,
            heads: 2,
            variant,
            recur_steps: 1,
            ema_alpha: 0.9,
            max_demos: 4,
            n_task_embeddings: 64,
        }
    }

    /// The full-scale configuration, kept for shape parity checks only.
    pub fn paper(variant: Variant) -> Self {
        ModelConfig {
            embed_dim: 512,
            depth: 10,
            canvas: 64,
            patch: 2,
            heads: 8,
            variant,
            recur_steps: 1,
            ema_alpha: 0.9,
            max_demos: 4,
            n_task_embeddings: 400,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.canvas % self.patch != 0 {
            return Err(Error::ConfigViolation(format!(
                "canvas {} not divisible by patch {}",
                self.canvas, self.patch
            )));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::ConfigViolation(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.recur_steps < 1 {
            return Err(Error::ConfigViolation("recur_steps must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.ema_alpha) {
            return Err(Error::ConfigViolation("ema_alpha must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Workspace lattice side G = canvas / patch.
    pub fn grid_side(&self) -> usize {
        self.canvas / self.patch
    }

    /// Workspace token count L = G^2.
    pub fn n_workspace(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Recurrent mid-tap step index (1-based), the single deep-supervision
    /// tap: after step ceil(K/2).
    pub fn mid_tap_step(&self) -> usize {
        self.recur_steps.div_ceil(2)
    }
}

/// Which task token the controller starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskToken {
    /// Row of the learned task-embedding table (offline training).
    Index(usize),
    /// The adapted per-task token created at TTT time.
    Adapted,
}

pub const TTT_TOKEN: &str = "ctrl.task_ttt";

/// Attention record exported for visualization: pass kind, layer, recurrent
/// step, node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PassKind {
    Dense,
    Structured,
}

#[derive(Debug, Clone, Copy)]
pub struct AttnRecord {
    pub layer: usize,
    pub step: usize,
    pub pass: PassKind,
    pub node: NodeId,
}

pub struct ForwardOut {
    /// (canvas^2) x 11 per-cell logits.
    pub cell_logits: NodeId,
    /// Mid-tap logits, present when the recurrence taps a middle step.
    pub mid_cell_logits: Option<NodeId>,
    /// 1 x 1 pre-sigmoid correctness score.
    pub correct_score: NodeId,
    /// 1 x 1 correctness probability.
    pub correct_prob: NodeId,
    /// Final-state workspace tokens, L x D.
    pub workspace: NodeId,
    pub attn: Vec<AttnRecord>,
    /// Controller token count for this forward.
    pub p_ctrl: usize,
}

#[derive(Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    masks: Mutex<HashMap<usize, (Arc<AttentionMask>, Arc<AttentionMask>)>>,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, masks: Mutex::new(HashMap::new()) })
    }

    /// Initialize all parameters for this configuration.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let cfg = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let d = cfg.embed_dim;
        let g = cfg.grid_side();
        let std = 0.02;
        let patch_in = cfg.patch * cfg.patch * INPUT_SYMBOLS;
        s.insert_randn("embed.patch.w", patch_in, d, std, &mut rng);
        s.insert("embed.patch.b", Array2::zeros((1, d)));
        s.insert_randn("embed.pos_row", g, d, std, &mut rng);
        s.insert_randn("embed.pos_col", g, d, std, &mut rng);
        s.insert_randn("ctrl.role", cfg.max_demos + 1, d, std, &mut rng);
        s.insert_randn("ctrl.task_table", cfg.n_task_embeddings, d, std, &mut rng);
        s.insert_randn("ctx.mlp.w1", d, 2 * d, std, &mut rng);
        s.insert("ctx.mlp.b1", Array2::zeros((1, 2 * d)));
        s.insert_randn("ctx.mlp.w2", 2 * d, d, std, &mut rng);
        s.insert("ctx.mlp.b2", Array2::zeros((1, d)));
        for i in 0..cfg.depth {
            if cfg.variant.has_dense_pass() {
                insert_attn(&mut s, &format!("layer{i}.dense"), d, std, &mut rng);
                insert_norm(&mut s, &format!("layer{i}.norm_dense"), d);
            }
            insert_attn(&mut s, &format!("layer{i}.struct"), d, std, &mut rng);
            insert_norm(&mut s, &format!("layer{i}.norm_struct"), d);
            insert_norm(&mut s, &format!("layer{i}.norm_mlp"), d);
            s.insert_randn(&format!("layer{i}.mlp.w1"), d, 4 * d, std, &mut rng);
            s.insert(&format!("layer{i}.mlp.b1"), Array2::zeros((1, 4 * d)));
            s.insert_randn(&format!("layer{i}.mlp.w2"), 4 * d, d, std, &mut rng);
            s.insert(&format!("layer{i}.mlp.b2"), Array2::zeros((1, d)));
        }
        s.insert_randn("gate.w", 2 * d, d, std, &mut rng);
        s.insert("gate.b", Array2::zeros((1, d)));
        s.insert_randn("head.out.w", d, cfg.patch * cfg.patch * OUTPUT_CLASSES, std, &mut rng);
        s.insert("head.out.b", Array2::zeros((1, cfg.patch * cfg.patch * OUTPUT_CLASSES)));
        s.insert_randn("head.correct.w", d, 1, std, &mut rng);
        s.insert("head.correct.b", Array2::zeros((1, 1)));
        s
    }

    /// Create the adapted task token, initialized to the mean of the trained
    /// task-embedding table.
    pub fn init_ttt_token(&self, store: &mut ParamStore) {
        let mean = store.mean_of_rows("ctrl.task_table");
        store.insert(TTT_TOKEN, mean);
    }

    fn masks_for(&self, p: usize) -> (Arc<AttentionMask>, Arc<AttentionMask>) {
        self.masks
            .lock()
            .unwrap()
            .entry(p)
            .or_insert_with(|| {
                let g = self.cfg.grid_side();
                let s = p + g * g;
                (
                    Arc::new(AttentionMask::dense(s)),
                    Arc::new(build_mask(self.cfg.variant, p, g)),
                )
            })
            .clone()
    }

    /// Patch-embed a canvas into L x D workspace tokens (patch one-hot ->
    /// linear -> + factored 2D positional embedding).
    pub fn embed_workspace(&self, tape: &mut Tape, store: &ParamStore, canvas: &Canvas) -> Result<NodeId> {
        let cfg = &self.cfg;
        if canvas.size() != cfg.canvas {
            return Err(Error::ShapeMismatch(format!(
                "canvas {} vs configured {}",
                canvas.size(),
                cfg.canvas
            )));
        }
        let g = cfg.grid_side();
        let p = cfg.patch;
        let l = g * g;
        let patch_in = p * p * INPUT_SYMBOLS;
        let mut onehot = Array2::zeros((l, patch_in));
        for pr in 0..g {
            for pc in 0..g {
                for dr in 0..p {
                    for dc in 0..p {
                        let sym = canvas.get(pr * p + dr, pc * p + dc) as usize;
                        onehot[[pr * g + pc, (dr * p + dc) * INPUT_SYMBOLS + sym]] = 1.0;
                    }
                }
            }
        }
        let onehot = tape.constant(onehot);
        let w = tape.param(store, "embed.patch.w");
        let b = tape.param(store, "embed.patch.b");
        let emb = tape.matmul(onehot, w);
        let emb = tape.add_row(emb, b);
        let rows: Vec<usize> = (0..l).map(|t| t / g).collect();
        let cols: Vec<usize> = (0..l).map(|t| t % g).collect();
        let pr = tape.param(store, "embed.pos_row");
        let pc = tape.param(store, "embed.pos_col");
        let pos_r = tape.gather_rows(pr, &rows);
        let pos_c = tape.gather_rows(pc, &cols);
        let with_r = tape.add(emb, pos_r);
        Ok(tape.add(with_r, pos_c))
    }

    /// One context token: mean over tokens of E(y~) - E(x~), then a small MLP.
    pub fn context_token(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        demo: (&Canvas, &Canvas),
    ) -> Result<NodeId> {
        let (x, y) = demo;
        if x.size() != y.size() {
            return Err(Error::DimensionMismatch("demo canvas sizes differ".into()));
        }
        let ex = self.embed_workspace(tape, store, x)?;
        let ey = self.embed_workspace(tape, store, y)?;
        let delta = tape.sub(ey, ex);
        let pooled = tape.mean_rows(delta);
        let w1 = tape.param(store, "ctx.mlp.w1");
        let b1 = tape.param(store, "ctx.mlp.b1");
        let w2 = tape.param(store, "ctx.mlp.w2");
        let b2 = tape.param(store, "ctx.mlp.b2");
        let h = tape.matmul(pooled, w1);
        let h = tape.add_row(h, b1);
        let h = tape.gelu(h);
        let h = tape.matmul(h, w2);
        Ok(tape.add_row(h, b2))
    }

    /// Controller tokens g = [task token; context tokens], with a learned
    /// role embedding per slot.
    pub fn build_controller(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        task: TaskToken,
        demos: &[(Canvas, Canvas)],
    ) -> Result<NodeId> {
        if demos.is_empty() {
            return Err(Error::ConfigViolation("at least one demo required".into()));
        }
        if demos.len() > self.cfg.max_demos {
            return Err(Error::ConfigViolation(format!(
                "{} demos exceed max_demos {}",
                demos.len(),
                self.cfg.max_demos
            )));
        }
        let tau = match task {
            TaskToken::Index(i) => {
                if i >= self.cfg.n_task_embeddings {
                    return Err(Error::TaskIndexOutOfRange(i, self.cfg.n_task_embeddings));
                }
                let table = tape.param(store, "ctrl.task_table");
                tape.gather_rows(table, &[i])
            }
            TaskToken::Adapted => tape.param(store, TTT_TOKEN),
        };
        let role = tape.param(store, "ctrl.role");
        let mut rows = Vec::with_capacity(demos.len() + 1);
        let role0 = tape.gather_rows(role, &[0]);
        rows.push(tape.add(tau, role0));
        for (i, (x, y)) in demos.iter().enumerate() {
            let c = self.context_token(tape, store, (x, y))?;
            let role_i = tape.gather_rows(role, &[i + 1]);
            rows.push(tape.add(c, role_i));
        }
        Ok(tape.concat_rows(&rows))
    }

    fn attn_sublayer(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        prefix: &str,
        norm_prefix: &str,
        mask: Arc<AttentionMask>,
    ) -> Result<(NodeId, NodeId)> {
        let g = tape.param(store, &format!("{norm_prefix}.g"));
        let b = tape.param(store, &format!("{norm_prefix}.b"));
        let n = tape.layer_norm(x, g, b);
        let proj = |tape: &mut Tape, w: &str, bias: &str| {
            let w = tape.param(store, &format!("{prefix}.{w}"));
            let bias = tape.param(store, &format!("{prefix}.{bias}"));
            let p = tape.matmul(n, w);
            tape.add_row(p, bias)
        };
        let q = proj(tape, "wq", "bq");
        let k = proj(tape, "wk", "bk");
        let v = proj(tape, "wv", "bv");
        let att = tape.masked_attention(q, k, v, self.cfg.heads, mask)?;
        let wo = tape.param(store, &format!("{prefix}.wo"));
        let bo = tape.param(store, &format!("{prefix}.bo"));
        let o = tape.matmul(att, wo);
        let o = tape.add_row(o, bo);
        Ok((tape.add(x, o), att))
    }

    /// One role-separated block: optional dense pass, structured pass, MLP,
    /// each pre-normalized and residual.
    pub fn block_forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        mut x: NodeId,
        layer: usize,
        step: usize,
        p_ctrl: usize,
        records: &mut Vec<AttnRecord>,
    ) -> Result<NodeId> {
        let (dense_mask, struct_mask) = self.masks_for(p_ctrl);
        if self.cfg.variant.has_dense_pass() {
            let (next, att) = self.attn_sublayer(
                tape,
                store,
                x,
                &format!("layer{layer}.dense"),
                &format!("layer{layer}.norm_dense"),
                dense_mask,
            )?;
            records.push(AttnRecord { layer, step, pass: PassKind::Dense, node: att });
            x = next;
        }
        let (next, att) = self.attn_sublayer(
            tape,
            store,
            x,
            &format!("layer{layer}.struct"),
            &format!("layer{layer}.norm_struct"),
            struct_mask,
        )?;
        records.push(AttnRecord { layer, step, pass: PassKind::Structured, node: att });
        x = next;
        let g = tape.param(store, &format!("layer{layer}.norm_mlp.g"));
        let b = tape.param(store, &format!("layer{layer}.norm_mlp.b"));
        let n = tape.layer_norm(x, g, b);
        let w1 = tape.param(store, &format!("layer{layer}.mlp.w1"));
        let b1 = tape.param(store, &format!("layer{layer}.mlp.b1"));
        let w2 = tape.param(store, &format!("layer{layer}.mlp.w2"));
        let b2 = tape.param(store, &format!("layer{layer}.mlp.b2"));
        let h = tape.matmul(n, w1);
        let h = tape.add_row(h, b1);
        let h = tape.gelu(h);
        let h = tape.matmul(h, w2);
        let h = tape.add_row(h, b2);
        Ok(tape.add(x, h))
    }

    /// Per-token output head: L x D workspace -> canvas^2 x 11 cell logits.
    pub fn output_head(&self, tape: &mut Tape, store: &ParamStore, workspace: NodeId) -> NodeId {
        let w = tape.param(store, "head.out.w");
        let b = tape.param(store, "head.out.b");
        let logits = tape.matmul(workspace, w);
        let logits = tape.add_row(logits, b);
        tape.patch_to_cells(logits, self.cfg.grid_side(), self.cfg.patch, OUTPUT_CLASSES)
    }

    /// Correctness head: sigmoid(linear(mean over workspace tokens)).
    /// Returns (pre-sigmoid score, probability), both 1 x 1.
    pub fn correctness_head(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        workspace: NodeId,
    ) -> (NodeId, NodeId) {
        let m = tape.mean_rows(workspace);
        let w = tape.param(store, "head.correct.w");
        let b = tape.param(store, "head.correct.b");
        let s = tape.matmul(m, w);
        let score = tape.add_row(s, b);
        (score, tape.sigmoid(score))
    }

    /// Full forward: controller + workspace concatenation, gated EMA
    /// recurrence over the block stack, heads.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        query: &Canvas,
        demos: &[(Canvas, Canvas)],
        task: TaskToken,
    ) -> Result<ForwardOut> {
        let p_ctrl = demos.len() + 1;
        let g = self.build_controller(tape, store, task, demos)?;
        let w = self.embed_workspace(tape, store, query)?;
        let h0 = tape.concat_rows(&[g, w]);
        let mut records = Vec::new();
        let depth = self.cfg.depth;
        let RecurOutput { final_h, mid } = {
            let records = &mut records;
            let mut step = 0usize;
            recur_forward(
                tape,
                h0,
                self.cfg.recur_steps,
                self.cfg.ema_alpha,
                |tape, x| {
                    step += 1;
                    let mut h = x;
                    for layer in 0..depth {
                        h = self.block_forward(tape, store, h, layer, step, p_ctrl, records)?;
                    }
                    Ok(h)
                },
                |tape, h, s| {
                    let cat = tape.concat_cols(h, s);
                    let gw = tape.param(store, "gate.w");
                    let gb = tape.param(store, "gate.b");
                    let lin = tape.matmul(cat, gw);
                    let lin = tape.add_row(lin, gb);
                    Ok(tape.sigmoid(lin))
                },
                if self.cfg.recur_steps > 2 { Some(self.cfg.mid_tap_step()) } else { None },
            )?
        };
        let l = self.cfg.n_workspace();
        let workspace = tape.slice_rows(final_h, p_ctrl, l);
        let cell_logits = self.output_head(tape, store, workspace);
        let mid_cell_logits = match mid {
            Some(mid_h) => {
                let mid_w = tape.slice_rows(mid_h, p_ctrl, l);
                Some(self.output_head(tape, store, mid_w))
            }
            None => None,
        };
        let (correct_score, correct_prob) = self.correctness_head(tape, store, workspace);
        Ok(ForwardOut {
            cell_logits,
            mid_cell_logits,
            correct_score,
            correct_prob,
            workspace,
            attn: records,
            p_ctrl,
        })
    }
}

fn insert_attn(s: &mut ParamStore, prefix: &str, d: usize, std: f64, rng: &mut ChaCha8Rng) {
    for w in ["wq", "wk", "wv", "wo"] {
        s.insert_randn(&format!("{prefix}.{w}"), d, d, std, rng);
    }
    for b in ["bq", "bk", "bv", "bo"] {
        s.insert(&format!("{prefix}.{b}"), Array2::zeros((1, d)));
    }
}

fn insert_norm(s: &mut ParamStore, prefix: &str, d: usize) {
    s.insert(&format!("{prefix}.g"), Array2::ones((1, d)));
    s.insert(&format!("{prefix}.b"), Array2::zeros((1, d)));
}
