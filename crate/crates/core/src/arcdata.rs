//! ARC grid/task data model, corpus ingestion, and a deterministic
//! synthetic task generator.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use crate::error::{Error, Result};

/// Number of colors in the ARC palette.
pub const NUM_COLORS: u8 = 10;
/// Maximum grid side length.
pub const MAX_SIDE: usize = 30;

/// A categorical 2D grid, the ARC puzzle atom. Cells are row-major.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Grid {
    height: usize,
    width: usize,
    cells: Vec<u8>,
}

impl Grid {
    pub fn new(height: usize, width: usize, cells: Vec<u8>) -> Result<Self> {
        if height == 0 || height > MAX_SIDE {
            return Err(Error::GridTooLarge(height));
        }
        if width == 0 || width > MAX_SIDE {
            return Err(Error::GridTooLarge(width));
        }
        if cells.len() != height * width {
            return Err(Error::RaggedRows {
                row: 0,
                got: cells.len(),
                expected: height * width,
            });
        }
        if let Some(&c) = cells.iter().find(|&&c| c >= NUM_COLORS) {
            return Err(Error::ColorOutOfRange(c as i64));
        }
        Ok(Self { height, width, cells })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    /// Mutable cell access for perturbation-style tests; values must stay
    /// below `NUM_COLORS`.
    pub fn cells_mut(&mut self) -> &mut [u8] {
        &mut self.cells
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.cells[r * self.width + c]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u8]> {
        self.cells.chunks(self.width)
    }

    /// Rotate by `k` quarter turns clockwise.
    pub fn rotate_cw(&self, k: u8) -> Grid {
        let mut g = self.clone();
        for _ in 0..(k % 4) {
            let (h, w) = (g.height, g.width);
            let mut cells = vec![0u8; h * w];
            for r in 0..h {
                for c in 0..w {
                    // (r, c) -> (c, h - 1 - r) in a w x h grid
                    cells[c * h + (h - 1 - r)] = g.cells[r * w + c];
                }
            }
            g = Grid { height: w, width: h, cells };
        }
        g
    }
}

/// Exact-match evaluation predicate.
pub fn grid_equal(a: &Grid, b: &Grid) -> bool {
    a == b
}

/// A held-out ground-truth grid with an access audit counter. Training code
/// must never call [`HeldOut::reveal`]; tests assert the counter stays zero.
#[derive(Debug, Clone)]
pub struct HeldOut {
    grid: Grid,
    reads: Arc<AtomicUsize>,
}

impl HeldOut {
    pub fn new(grid: Grid) -> Self {
        Self { grid, reads: Arc::new(AtomicUsize::new(0)) }
    }

    /// Scorer-only access; every call is counted.
    pub fn reveal(&self) -> &Grid {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.grid
    }

    pub fn read_count(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }
}

/// One inference query: input grid plus optionally known answer.
#[derive(Debug, Clone)]
pub struct InferPair {
    pub input: Grid,
    pub output: Option<HeldOut>,
}

/// An ARC task: demonstration pairs plus inference queries.
#[derive(Debug, Clone)]
pub struct Task {
    pub task_id: String,
    pub demos: Vec<(Grid, Grid)>,
    pub infer: Vec<InferPair>,
}

impl Task {
    pub fn new(task_id: String, demos: Vec<(Grid, Grid)>, infer: Vec<InferPair>) -> Result<Self> {
        if demos.is_empty() {
            return Err(Error::MalformedJson(format!("task {task_id}: empty train set")));
        }
        if infer.is_empty() {
            return Err(Error::MalformedJson(format!("task {task_id}: empty test set")));
        }
        Ok(Self { task_id, demos, infer })
    }
}

fn grid_from_value(v: &Value) -> Result<Grid> {
    let rows = v
        .as_array()
        .ok_or_else(|| Error::MalformedJson("grid is not an array".into()))?;
    if rows.is_empty() {
        return Err(Error::GridTooLarge(0));
    }
    let height = rows.len();
    let mut width = 0usize;
    let mut cells = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        let row = row
            .as_array()
            .ok_or_else(|| Error::MalformedJson(format!("row {i} is not an array")))?;
        if i == 0 {
            width = row.len();
        } else if row.len() != width {
            return Err(Error::RaggedRows { row: i, got: row.len(), expected: width });
        }
        for cell in row {
            let n = cell
                .as_i64()
                .ok_or_else(|| Error::MalformedJson(format!("non-integer cell in row {i}")))?;
            if !(0..NUM_COLORS as i64).contains(&n) {
                return Err(Error::ColorOutOfRange(n));
            }
            cells.push(n as u8);
        }
    }
    if height > MAX_SIDE {
        return Err(Error::GridTooLarge(height));
    }
    if width == 0 || width > MAX_SIDE {
        return Err(Error::GridTooLarge(width));
    }
    Grid::new(height, width, cells)
}

/// Parse the de-facto ARC interchange format: an object with "train" and
/// "test" arrays of {"input", "output"} 2D integer arrays.
pub fn parse_task(json_text: &str, task_id: &str) -> Result<Task> {
    let root: Value =
        serde_json::from_str(json_text).map_err(|e| Error::MalformedJson(e.to_string()))?;
    let train = root
        .get("train")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::MalformedJson("missing \"train\" array".into()))?;
    let test = root
        .get("test")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::MalformedJson("missing \"test\" array".into()))?;
    let mut demos = Vec::with_capacity(train.len());
    for pair in train {
        let input = grid_from_value(
            pair.get("input")
                .ok_or_else(|| Error::MalformedJson("train pair missing input".into()))?,
        )?;
        let output = grid_from_value(
            pair.get("output")
                .ok_or_else(|| Error::MalformedJson("train pair missing output".into()))?,
        )?;
        demos.push((input, output));
    }
    let mut infer = Vec::with_capacity(test.len());
    for pair in test {
        let input = grid_from_value(
            pair.get("input")
                .ok_or_else(|| Error::MalformedJson("test pair missing input".into()))?,
        )?;
        let output = match pair.get("output") {
            Some(v) => Some(HeldOut::new(grid_from_value(v)?)),
            None => None,
        };
        infer.push(InferPair { input, output });
    }
    Task::new(task_id.to_string(), demos, infer)
}

fn grid_to_value(g: &Grid) -> Value {
    Value::Array(
        g.rows()
            .map(|row| Value::Array(row.iter().map(|&c| Value::from(c as i64)).collect()))
            .collect(),
    )
}

/// Serialize back to the ARC interchange format. Reveals held-out outputs,
/// so this is an export/scorer path, never a training one.
pub fn serialize_task(task: &Task) -> String {
    let train: Vec<Value> = task
        .demos
        .iter()
        .map(|(x, y)| {
            serde_json::json!({ "input": grid_to_value(x), "output": grid_to_value(y) })
        })
        .collect();
    let test: Vec<Value> = task
        .infer
        .iter()
        .map(|p| match &p.output {
            Some(h) => {
                serde_json::json!({ "input": grid_to_value(&p.input), "output": grid_to_value(h.reveal()) })
            }
            None => serde_json::json!({ "input": grid_to_value(&p.input) }),
        })
        .collect();
    serde_json::json!({ "train": train, "test": test }).to_string()
}

/// One deterministic grid-to-grid transformation family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthFamily {
    Recolor { from: u8, to: u8 },
    MirrorH,
    MirrorV,
    Rotate90,
    Translate { dx: usize, dy: usize },
    Upscale2,
    /// Empty cells bordering content take the max neighboring color.
    Dilate,
}

impl SynthFamily {
    /// The family's total deterministic grid function.
    pub fn apply(&self, g: &Grid) -> Grid {
        let (h, w) = (g.height(), g.width());
        match *self {
            SynthFamily::Recolor { from, to } => {
                let cells = g.cells().iter().map(|&c| if c == from { to } else { c }).collect();
                Grid { height: h, width: w, cells }
            }
            SynthFamily::MirrorH => {
                // output row r = input row h-1-r
                let mut cells = Vec::with_capacity(h * w);
                for r in (0..h).rev() {
                    cells.extend_from_slice(&g.cells()[r * w..(r + 1) * w]);
                }
                Grid { height: h, width: w, cells }
            }
            SynthFamily::MirrorV => {
                let mut cells = Vec::with_capacity(h * w);
                for r in 0..h {
                    cells.extend(g.cells()[r * w..(r + 1) * w].iter().rev());
                }
                Grid { height: h, width: w, cells }
            }
            SynthFamily::Rotate90 => g.rotate_cw(1),
            SynthFamily::Translate { dx, dy } => {
                // cyclic shift, keeps dimensions
                let mut cells = vec![0u8; h * w];
                for r in 0..h {
                    for c in 0..w {
                        cells[((r + dy) % h) * w + (c + dx) % w] = g.get(r, c);
                    }
                }
                Grid { height: h, width: w, cells }
            }
            SynthFamily::Upscale2 => {
                let mut cells = vec![0u8; 4 * h * w];
                for r in 0..h {
                    for c in 0..w {
                        let v = g.get(r, c);
                        for (rr, cc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            cells[(2 * r + rr) * 2 * w + 2 * c + cc] = v;
                        }
                    }
                }
                Grid { height: 2 * h, width: 2 * w, cells }
            }
            SynthFamily::Dilate => {
                let mut cells = g.cells().to_vec();
                for r in 0..h {
                    for c in 0..w {
                        if g.get(r, c) != 0 {
                            continue;
                        }
                        let mut best = 0u8;
                        if r > 0 { best = best.max(g.get(r - 1, c)); }
                        if r + 1 < h { best = best.max(g.get(r + 1, c)); }
                        if c > 0 { best = best.max(g.get(r, c - 1)); }
                        if c + 1 < w { best = best.max(g.get(r, c + 1)); }
                        cells[r * w + c] = best;
                    }
                }
                Grid { height: h, width: w, cells }
            }
        }
    }

    pub fn name(&self) -> String {
        match *self {
            SynthFamily::Recolor { from, to } => format!("recolor{from}to{to}"),
            SynthFamily::MirrorH => "mirrorh".into(),
            SynthFamily::MirrorV => "mirrorv".into(),
            SynthFamily::Rotate90 => "rotate90".into(),
            SynthFamily::Translate { dx, dy } => format!("translate{dx}x{dy}"),
            SynthFamily::Upscale2 => "upscale2".into(),
            SynthFamily::Dilate => "dilate".into(),
        }
    }
}

fn sample_grid(rng: &mut ChaCha8Rng, family: &SynthFamily) -> Grid {
    let max_side = if matches!(family, SynthFamily::Upscale2) { 5 } else { 6 };
    let h = rng.gen_range(3..=max_side);
    let w = rng.gen_range(3..=max_side);
    let cells: Vec<u8> = if matches!(family, SynthFamily::Dilate) {
        // sparse content so the dilation is visible
        (0..h * w)
            .map(|_| if rng.gen_bool(0.2) { rng.gen_range(1..NUM_COLORS) } else { 0 })
            .collect()
    } else {
        (0..h * w).map(|_| rng.gen_range(0..NUM_COLORS)).collect()
    };
    let mut g = Grid { height: h, width: w, cells };
    if let SynthFamily::Recolor { from, .. } = family {
        // guarantee the recolored color is present
        let idx = rng.gen_range(0..h * w);
        g.cells[idx] = *from;
    }
    g
}

/// Generate a deterministic synthetic task: `m` demo pairs and `n` inference
/// pairs, all satisfying `output = family(input)`.
pub fn synth_task(family: SynthFamily, seed: u64, m: usize, n: usize) -> Task {
    assert!(m >= 1 && n >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e_ed_00);
    let demos: Vec<(Grid, Grid)> = (0..m)
        .map(|_| {
            let x = sample_grid(&mut rng, &family);
            let y = family.apply(&x);
            (x, y)
        })
        .collect();
    let infer: Vec<InferPair> = (0..n)
        .map(|_| {
            let x = sample_grid(&mut rng, &family);
            let y = family.apply(&x);
            InferPair { input: x, output: Some(HeldOut::new(y)) }
        })
        .collect();
    Task { task_id: format!("synth-{}-{seed}", family.name()), demos, infer }
}

/// Named synthetic family, with family parameters drawn from `seed` where
/// the family has any. Recognized: recolor, mirror_h, mirror_v, rotate90,
/// translate, upscale2.
pub fn family_from_name(name: &str, seed: u64) -> Result<SynthFamily> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfa_11_17);
    Ok(match name {
        "recolor" => {
            let from = rng.gen_range(0..NUM_COLORS);
            let mut to = rng.gen_range(0..NUM_COLORS);
            if to == from {
                to = (to + 1) % NUM_COLORS;
            }
            SynthFamily::Recolor { from, to }
        }
        "mirror_h" => SynthFamily::MirrorH,
        "mirror_v" => SynthFamily::MirrorV,
        "rotate90" => SynthFamily::Rotate90,
        "translate" => SynthFamily::Translate {
            dx: rng.gen_range(0..3),
            dy: rng.gen_range(0..3),
        },
        "upscale2" => SynthFamily::Upscale2,
        "dilate" => SynthFamily::Dilate,
        other => {
            return Err(Error::MalformedJson(format!(
                "unknown synthetic family '{other}'"
            )))
        }
    })
}

/// A deterministic suite of `n` tasks cycling through the synthetic
/// families, each with `m` demos and `q` inference pairs.
pub fn synth_suite(n: usize, seed: u64, m: usize, q: usize) -> Vec<Task> {
    const NAMES: [&str; 7] = [
        "recolor", "mirror_h", "mirror_v", "rotate90", "translate", "upscale2", "dilate",
    ];
    (0..n)
        .map(|i| {
            let fam_seed = seed.wrapping_add(i as u64).wrapping_mul(0x100_0193);
            let family = family_from_name(NAMES[i % NAMES.len()], fam_seed).unwrap();
            synth_task(family, fam_seed, m, q)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_minimal_task() {
        let t = parse_task(
            r#"{"train":[{"input":[[0]],"output":[[1]]}],"test":[{"input":[[0]]}]}"#,
            "t0",
        )
        .unwrap();
        assert_eq!(t.demos.len(), 1);
        assert_eq!(t.infer.len(), 1);
        assert_eq!(t.demos[0].1.get(0, 0), 1);
        assert!(t.infer[0].output.is_none());
    }

    #[test]
    fn parse_rejects_color_out_of_range() {
        let err = parse_task(
            r#"{"train":[{"input":[[0,10]],"output":[[0,0]]}],"test":[{"input":[[0]]}]}"#,
            "t",
        )
        .unwrap_err();
        assert!(matches!(err, Error::ColorOutOfRange(10)));
    }

    #[test]
    fn parse_rejects_oversize_grid() {
        let rows: Vec<String> = (0..31).map(|_| "[0]".to_string()).collect();
        let json = format!(
            r#"{{"train":[{{"input":[{0}],"output":[[0]]}}],"test":[{{"input":[[0]]}}]}}"#,
            rows.join(",")
        );
        let err = parse_task(&json, "t").unwrap_err();
        assert!(matches!(err, Error::GridTooLarge(31)));
    }

    #[test]
    fn parse_rejects_ragged_rows() {
        let err = parse_task(
            r#"{"train":[{"input":[[0,1],[0]],"output":[[0]]}],"test":[{"input":[[0]]}]}"#,
            "t",
        )
        .unwrap_err();
        assert!(matches!(err, Error::RaggedRows { row: 1, .. }));
    }

    #[test]
    fn serialize_round_trip() {
        let t = synth_task(SynthFamily::MirrorH, 3, 3, 2);
        let json = serialize_task(&t);
        let t2 = parse_task(&json, &t.task_id).unwrap();
        assert_eq!(t.demos, t2.demos);
        for (a, b) in t.infer.iter().zip(t2.infer.iter()) {
            assert_eq!(a.input, b.input);
            assert_eq!(
                a.output.as_ref().map(|h| h.reveal().clone()),
                b.output.as_ref().map(|h| h.reveal().clone())
            );
        }
    }

    #[test]
    fn synth_is_deterministic_and_consistent() {
        for fam in [
            SynthFamily::Recolor { from: 2, to: 5 },
            SynthFamily::MirrorH,
            SynthFamily::MirrorV,
            SynthFamily::Rotate90,
            SynthFamily::Translate { dx: 1, dy: 2 },
            SynthFamily::Upscale2,
        ] {
            let a = synth_task(fam, 7, 3, 1);
            let b = synth_task(fam, 7, 3, 1);
            assert_eq!(serialize_task(&a), serialize_task(&b));
            for (x, y) in &a.demos {
                assert_eq!(&fam.apply(x), y);
            }
        }
    }

    #[test]
    fn recolor_family_replaces_color() {
        let t = synth_task(SynthFamily::Recolor { from: 2, to: 5 }, 7, 3, 1);
        for (x, y) in &t.demos {
            for (&cx, &cy) in x.cells().iter().zip(y.cells()) {
                assert_eq!(cy, if cx == 2 { 5 } else { cx });
            }
            assert!(x.cells().contains(&2));
        }
    }

    #[test]
    fn mirror_h_reverses_rows() {
        let t = synth_task(SynthFamily::MirrorH, 11, 2, 1);
        for (x, y) in &t.demos {
            let h = x.height();
            for r in 0..h {
                for c in 0..x.width() {
                    assert_eq!(y.get(r, c), x.get(h - 1 - r, c));
                }
            }
        }
    }

    #[test]
    fn grid_equal_basics() {
        let g = Grid::new(1, 1, vec![0]).unwrap();
        assert!(grid_equal(&g, &g));
        let g1 = Grid::new(1, 1, vec![1]).unwrap();
        assert!(!grid_equal(&g, &g1));
        let a = Grid::new(2, 3, vec![0, 1, 2, 3, 4, 5]).unwrap();
        let b = Grid::new(3, 2, vec![0, 1, 2, 3, 4, 5]).unwrap();
        assert!(!grid_equal(&a, &b));
    }

    #[test]
    fn rotate_cw_quarter_turn() {
        // [a b] -> [a]
        //          [b]  then check 4 turns = identity
        let g = Grid::new(1, 2, vec![1, 2]).unwrap();
        let r = g.rotate_cw(1);
        assert_eq!((r.height(), r.width()), (2, 1));
        assert_eq!(r.cells(), &[1, 2]);
        assert_eq!(g.rotate_cw(4), g);
    }

    #[test]
    fn held_out_audit_counter() {
        let h = HeldOut::new(Grid::new(1, 1, vec![0]).unwrap());
        assert_eq!(h.read_count(), 0);
        let _ = h.reveal();
        assert_eq!(h.read_count(), 1);
    }
}
