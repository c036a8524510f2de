//! Canvas embedding with a border ring, the invertible task-preserving
//! augmentation family (rotation / translation / scale), and inference-view
//! enumeration.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arcdata::Grid;
use crate::error::{Error, Result};

/// Canvas symbol for unoccupied cells.
pub const BACKGROUND: u8 = 10;
/// Canvas symbol for the 1-cell ring around the placed grid.
pub const BORDER: u8 = 11;
/// Input symbol vocabulary: 10 colors + background + border.
pub const INPUT_SYMBOLS: usize = 12;
/// Output class set: 10 colors + background (border cells carry no loss).
pub const OUTPUT_CLASSES: usize = 11;

/// One invertible augmentation: rotate by quarter turns, replicate each cell
/// into a `scale`x`scale` block, translate to `(ty, tx)` on the canvas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugParams {
    /// Quarter turns clockwise, 0..=3.
    pub rotation: u8,
    /// Column of the placed grid's top-left cell.
    pub translate_x: usize,
    /// Row of the placed grid's top-left cell.
    pub translate_y: usize,
    pub scale: usize,
    pub canvas: usize,
    pub seed_tag: u64,
}

impl AugParams {
    /// The canonical untransformed view: no rotation, scale 1, placement at
    /// the smallest `align`-multiple offset.
    pub fn identity(canvas: usize, align: usize) -> Self {
        let t = align.max(1);
        AugParams {
            rotation: 0,
            translate_x: t,
            translate_y: t,
            scale: 1,
            canvas,
            seed_tag: 0,
        }
    }

    /// Dimensions of the grid after rotation, before scaling.
    fn rotated_dims(&self, h: usize, w: usize) -> (usize, usize) {
        if self.rotation % 2 == 1 {
            (w, h)
        } else {
            (h, w)
        }
    }

    /// True iff a grid of the given dims placed under these params keeps the
    /// bordered block inside rows/cols `0..canvas-1`.
    pub fn fits(&self, h: usize, w: usize) -> bool {
        let (rh, rw) = self.rotated_dims(h, w);
        let (sh, sw) = (rh * self.scale, rw * self.scale);
        self.translate_y >= 1
            && self.translate_x >= 1
            && self.translate_y + sh + 1 <= self.canvas.saturating_sub(1)
            && self.translate_x + sw + 1 <= self.canvas.saturating_sub(1)
    }
}

/// A fixed-size square symbol field holding an embedded grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Canvas {
    size: usize,
    cells: Vec<u8>,
}

impl Canvas {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn cells_mut(&mut self) -> &mut [u8] {
        &mut self.cells
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.cells[r * self.size + c]
    }

    /// Debug dump as a plain-text portable pixmap.
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        // the 10 ARC colors plus gray background and white border
        const PALETTE: [(u8, u8, u8); 12] = [
            (0, 0, 0),
            (0, 116, 217),
            (255, 65, 54),
            (46, 204, 64),
            (255, 220, 0),
            (170, 170, 170),
            (240, 18, 190),
            (255, 133, 27),
            (127, 219, 255),
            (135, 12, 37),
            (60, 60, 60),
            (255, 255, 255),
        ];
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "P3\n{} {}\n255", self.size, self.size)?;
        for &s in &self.cells {
            let (r, g, b) = PALETTE[s as usize];
            writeln!(f, "{r} {g} {b}")?;
        }
        Ok(())
    }
}

fn feasible_translations(
    canvas: usize,
    align: usize,
    scaled_h: usize,
    scaled_w: usize,
) -> (Vec<usize>, Vec<usize>) {
    let align = align.max(1);
    let pick = |scaled: usize| -> Vec<usize> {
        if canvas < scaled + 3 {
            return Vec::new();
        }
        (1..=canvas - 2 - scaled).filter(|t| t % align == 0 || align == 1).collect()
    };
    (pick(scaled_h), pick(scaled_w))
}

/// All (rotation, scale) combinations valid for every grid in `dims`, with
/// their shared translation ranges.
fn feasible_set(
    dims: &[(usize, usize)],
    canvas: usize,
    align: usize,
) -> Vec<(u8, usize, Vec<usize>, Vec<usize>)> {
    let mut out = Vec::new();
    for rotation in 0..4u8 {
        for scale in 1..=3usize {
            let mut max_h = 0;
            let mut max_w = 0;
            for &(h, w) in dims {
                let (rh, rw) = if rotation % 2 == 1 { (w, h) } else { (h, w) };
                max_h = max_h.max(rh * scale);
                max_w = max_w.max(rw * scale);
            }
            let (tys, txs) = feasible_translations(canvas, align, max_h, max_w);
            if !tys.is_empty() && !txs.is_empty() {
                out.push((rotation, scale, tys, txs));
            }
        }
    }
    out
}

/// Sample augmentation params uniformly over the feasible set for one grid.
pub fn sample_aug(rng_seed: u64, grid: &Grid, canvas_size: usize) -> Result<AugParams> {
    sample_aug_joint(rng_seed, &[(grid.height(), grid.width())], canvas_size, 1)
}

/// Sample params valid simultaneously for every grid in `dims` (the query and
/// all demo grids share one view). `align` snaps placements to patch
/// boundaries; 1 disables snapping.
pub fn sample_aug_joint(
    rng_seed: u64,
    dims: &[(usize, usize)],
    canvas_size: usize,
    align: usize,
) -> Result<AugParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    sample_aug_with(&mut rng, dims, canvas_size, align, rng_seed)
}

pub fn sample_aug_with(
    rng: &mut ChaCha8Rng,
    dims: &[(usize, usize)],
    canvas_size: usize,
    align: usize,
    seed_tag: u64,
) -> Result<AugParams> {
    let set = feasible_set(dims, canvas_size, align);
    if set.is_empty() {
        let &(h, w) = dims.iter().max_by_key(|(h, w)| h.max(w)).unwrap();
        return Err(Error::CanvasTooSmall { canvas: canvas_size, h, w });
    }
    // uniform over all (rotation, scale, ty, tx) tuples
    let total: usize = set.iter().map(|(_, _, tys, txs)| tys.len() * txs.len()).sum();
    let mut idx = rng.gen_range(0..total);
    for (rotation, scale, tys, txs) in &set {
        let n = tys.len() * txs.len();
        if idx < n {
            return Ok(AugParams {
                rotation: *rotation,
                translate_y: tys[idx / txs.len()],
                translate_x: txs[idx % txs.len()],
                scale: *scale,
                canvas: canvas_size,
                seed_tag,
            });
        }
        idx -= n;
    }
    unreachable!()
}

/// Embed a grid onto the canvas under `p`: rotate, scale-replicate, translate,
/// ring with BORDER, fill the rest with BACKGROUND.
pub fn apply(grid: &Grid, p: &AugParams) -> Result<Canvas> {
    if !p.fits(grid.height(), grid.width()) {
        return Err(Error::InvalidParams(format!(
            "{}x{} grid does not fit under {p:?}",
            grid.height(),
            grid.width()
        )));
    }
    let rotated = grid.rotate_cw(p.rotation);
    let (rh, rw) = (rotated.height(), rotated.width());
    let (sh, sw) = (rh * p.scale, rw * p.scale);
    let n = p.canvas;
    let mut cells = vec![BACKGROUND; n * n];
    for r in p.translate_y - 1..=p.translate_y + sh {
        for c in p.translate_x - 1..=p.translate_x + sw {
            cells[r * n + c] = BORDER;
        }
    }
    for r in 0..sh {
        for c in 0..sw {
            cells[(p.translate_y + r) * n + p.translate_x + c] =
                rotated.get(r / p.scale, c / p.scale);
        }
    }
    Ok(Canvas { size: n, cells })
}

fn check_invert_pre(p: &AugParams, out_dims: (usize, usize)) -> Result<(usize, usize)> {
    let (h, w) = out_dims;
    if !p.fits(h, w) {
        return Err(Error::DimensionMismatch(format!(
            "output dims {h}x{w} inconsistent with {p:?}"
        )));
    }
    Ok(if p.rotation % 2 == 1 { (w, h) } else { (h, w) })
}

/// Invert an augmentation on a hard symbol map: crop, pool each scale block by
/// majority (ties to the lowest color index), un-rotate.
pub fn invert_hard(canvas_pred: &[u8], p: &AugParams, out_dims: (usize, usize)) -> Result<Grid> {
    let (rh, rw) = check_invert_pre(p, out_dims)?;
    if canvas_pred.len() != p.canvas * p.canvas {
        return Err(Error::DimensionMismatch("canvas prediction size".into()));
    }
    let mut cells = Vec::with_capacity(rh * rw);
    for r in 0..rh {
        for c in 0..rw {
            let mut counts = [0usize; INPUT_SYMBOLS];
            for dr in 0..p.scale {
                for dc in 0..p.scale {
                    let rr = p.translate_y + r * p.scale + dr;
                    let cc = p.translate_x + c * p.scale + dc;
                    counts[canvas_pred[rr * p.canvas + cc] as usize] += 1;
                }
            }
            // majority over color symbols only; lowest index wins ties
            let winner = (0..10).max_by_key(|&s| (counts[s], 10 - s)).unwrap();
            if counts[winner] == 0 {
                return Err(Error::DimensionMismatch(format!(
                    "no color symbol in the scale block at ({r},{c})"
                )));
            }
            cells.push(winner as u8);
        }
    }
    let rotated = Grid::new(rh, rw, cells)?;
    Ok(rotated.rotate_cw((4 - p.rotation % 4) % 4))
}

/// Invert an augmentation on a per-cell logit map (`canvas^2 x classes`,
/// row-major by cell): crop, sum logits over each scale block, un-rotate.
/// Returns `H*W x classes` logits, row-major by cell.
pub fn invert_logits(
    canvas_logits: &[f64],
    classes: usize,
    p: &AugParams,
    out_dims: (usize, usize),
) -> Result<Vec<f64>> {
    let (rh, rw) = check_invert_pre(p, out_dims)?;
    if canvas_logits.len() != p.canvas * p.canvas * classes {
        return Err(Error::DimensionMismatch("canvas logit map size".into()));
    }
    let mut pooled = vec![0.0; rh * rw * classes];
    for r in 0..rh {
        for c in 0..rw {
            for dr in 0..p.scale {
                for dc in 0..p.scale {
                    let rr = p.translate_y + r * p.scale + dr;
                    let cc = p.translate_x + c * p.scale + dc;
                    let src = (rr * p.canvas + cc) * classes;
                    for k in 0..classes {
                        pooled[(r * rw + c) * classes + k] += canvas_logits[src + k];
                    }
                }
            }
        }
    }
    // un-rotate the pooled cell lattice
    let (h, w) = out_dims;
    let mut out = vec![0.0; h * w * classes];
    for r in 0..rh {
        for c in 0..rw {
            let (orow, ocol) = match p.rotation % 4 {
                0 => (r, c),
                1 => (rw - 1 - c, r),
                2 => (rh - 1 - r, rw - 1 - c),
                _ => (c, rh - 1 - r),
            };
            out[(orow * w + ocol) * classes..(orow * w + ocol + 1) * classes]
                .copy_from_slice(&pooled[(r * rw + c) * classes..(r * rw + c + 1) * classes]);
        }
    }
    Ok(out)
}

/// Decode an inverted `H*W x classes` logit map to a grid by per-cell argmax
/// over the 10 colors.
pub fn decode_logits(cell_logits: &[f64], classes: usize, out_dims: (usize, usize)) -> Result<Grid> {
    let (h, w) = out_dims;
    let mut cells = Vec::with_capacity(h * w);
    for i in 0..h * w {
        let row = &cell_logits[i * classes..(i + 1) * classes];
        let mut best = 0usize;
        for k in 1..10 {
            if row[k] > row[best] {
                best = k;
            }
        }
        cells.push(best as u8);
    }
    Grid::new(h, w, cells)
}

/// Infer the dims of the grid placed under `p` from a hard class map, or
/// `None` when the non-background support is not a clean placement.
pub fn infer_placed_dims(classes: &[u8], p: &AugParams) -> Option<(usize, usize)> {
    let n = p.canvas;
    let (mut r0, mut r1, mut c0, mut c1) = (n, 0usize, n, 0usize);
    let mut any = false;
    for r in 0..n {
        for c in 0..n {
            if classes[r * n + c] < 10 {
                any = true;
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(c);
                c1 = c1.max(c);
            }
        }
    }
    if !any || r0 != p.translate_y || c0 != p.translate_x {
        return None;
    }
    let (bh, bw) = (r1 - r0 + 1, c1 - c0 + 1);
    if bh % p.scale != 0 || bw % p.scale != 0 {
        return None;
    }
    let (rh, rw) = (bh / p.scale, bw / p.scale);
    // undo the rotation's dimension swap
    let dims = if p.rotation % 2 == 1 { (rw, rh) } else { (rh, rw) };
    if dims.0 == 0 || dims.0 > 30 || dims.1 == 0 || dims.1 > 30 {
        return None;
    }
    Some(dims)
}

/// Deterministic sequence of `n_views` params valid for every grid in `dims`;
/// element 0 is always the identity view.
pub fn enumerate_views(
    n_views: usize,
    rng_seed: u64,
    dims: &[(usize, usize)],
    canvas_size: usize,
    align: usize,
) -> Result<Vec<AugParams>> {
    assert!(n_views >= 1);
    let identity = AugParams::identity(canvas_size, align);
    for &(h, w) in dims {
        if !identity.fits(h, w) {
            return Err(Error::CanvasTooSmall { canvas: canvas_size, h, w });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut views = vec![identity];
    for i in 1..n_views {
        views.push(sample_aug_with(&mut rng, dims, canvas_size, align, rng_seed ^ i as u64)?);
    }
    Ok(views)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arcdata::{synth_task, SynthFamily};
    use proptest::prelude::*;
    use rand::Rng;

    fn small_grid(seed: u64, max: usize) -> Grid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = rng.gen_range(1..=max);
        let w = rng.gen_range(1..=max);
        let cells = (0..h * w).map(|_| rng.gen_range(0..10u8)).collect();
        Grid::new(h, w, cells).unwrap()
    }

    #[test]
    fn sample_is_deterministic() {
        let g = small_grid(1, 8);
        let a = sample_aug(42, &g, 64).unwrap();
        let b = sample_aug(42, &g, 64).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn thirty_by_thirty_excludes_scale_3() {
        let g = Grid::new(30, 30, vec![1; 900]).unwrap();
        for seed in 0..200 {
            let p = sample_aug(seed, &g, 64).unwrap();
            assert!(p.scale == 1 || p.scale == 2, "infeasible scale {}", p.scale);
            assert!(p.fits(30, 30));
        }
        // brute-force the feasibility claim itself
        for scale in 1..=3usize {
            let feasible = !feasible_translations(64, 1, 30 * scale, 30 * scale).0.is_empty();
            assert_eq!(feasible, scale <= 2);
        }
    }

    #[test]
    fn one_by_one_offset_set_is_61_by_61() {
        let (tys, txs) = feasible_translations(64, 1, 1, 1);
        assert_eq!(tys.len(), 61);
        assert_eq!(txs.len(), 61);
        assert_eq!((tys[0], *tys.last().unwrap()), (1, 61));
    }

    #[test]
    fn apply_identity_places_grid_verbatim() {
        let g = small_grid(5, 6);
        let p = AugParams::identity(16, 1);
        let canvas = apply(&g, &p).unwrap();
        for r in 0..g.height() {
            for c in 0..g.width() {
                assert_eq!(canvas.get(r + 1, c + 1), g.get(r, c));
            }
        }
        // border ring is exactly one cell thick around the placement
        assert_eq!(canvas.get(0, 0), BORDER);
        assert_eq!(canvas.get(g.height() + 1, g.width() + 1), BORDER);
        assert_eq!(canvas.get(g.height() + 2, 0), BACKGROUND);
    }

    #[test]
    fn scale_two_replicates_cells() {
        let g = Grid::new(1, 1, vec![7]).unwrap();
        let p = AugParams { rotation: 0, translate_x: 2, translate_y: 2, scale: 2, canvas: 8, seed_tag: 0 };
        let canvas = apply(&g, &p).unwrap();
        for (r, c) in [(2, 2), (2, 3), (3, 2), (3, 3)] {
            assert_eq!(canvas.get(r, c), 7);
        }
    }

    #[test]
    fn rotation_places_row_as_column() {
        let g = Grid::new(1, 2, vec![1, 2]).unwrap();
        let p = AugParams { rotation: 1, translate_x: 1, translate_y: 1, scale: 1, canvas: 8, seed_tag: 0 };
        let canvas = apply(&g, &p).unwrap();
        assert_eq!(canvas.get(1, 1), 1);
        assert_eq!(canvas.get(2, 1), 2);
    }

    #[test]
    fn majority_pooling_and_tie_break() {
        // one output cell at scale 2; blocks {5,5,5,3} -> 5 and {5,5,3,3} -> 3
        let p = AugParams { rotation: 0, translate_x: 1, translate_y: 1, scale: 2, canvas: 6, seed_tag: 0 };
        let mut canvas = vec![BACKGROUND; 36];
        for (i, v) in [(1 * 6 + 1, 5), (1 * 6 + 2, 5), (2 * 6 + 1, 5), (2 * 6 + 2, 3)] {
            canvas[i] = v;
        }
        assert_eq!(invert_hard(&canvas, &p, (1, 1)).unwrap().cells(), &[5]);
        canvas[2 * 6 + 1] = 3;
        assert_eq!(invert_hard(&canvas, &p, (1, 1)).unwrap().cells(), &[3]);
    }

    #[test]
    fn round_trip_1000_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for i in 0..1000 {
            let g = small_grid(i, 10);
            let p = sample_aug_with(&mut rng, &[(g.height(), g.width())], 26, 1, i).unwrap();
            let canvas = apply(&g, &p).unwrap();
            let back = invert_hard(canvas.cells(), &p, (g.height(), g.width())).unwrap();
            assert_eq!(back, g, "round trip failed for {p:?}");
        }
    }

    #[test]
    fn logit_round_trip_matches_hard_decode() {
        let g = small_grid(3, 5);
        let p = sample_aug(17, &g, 20).unwrap();
        let canvas = apply(&g, &p).unwrap();
        // one-hot logits from the symbol map (border folded into background)
        let mut logits = vec![0.0; 20 * 20 * OUTPUT_CLASSES];
        for (i, &s) in canvas.cells().iter().enumerate() {
            let k = if s >= 10 { 10 } else { s as usize };
            logits[i * OUTPUT_CLASSES + k] = 1.0;
        }
        let cell = invert_logits(&logits, OUTPUT_CLASSES, &p, (g.height(), g.width())).unwrap();
        let decoded = decode_logits(&cell, OUTPUT_CLASSES, (g.height(), g.width())).unwrap();
        assert_eq!(decoded, g);
    }

    #[test]
    fn placed_dims_inference() {
        let g = small_grid(8, 6);
        for seed in 0..50 {
            let p = sample_aug(seed, &g, 20).unwrap();
            let canvas = apply(&g, &p).unwrap();
            let classes: Vec<u8> = canvas
                .cells()
                .iter()
                .map(|&s| if s >= 10 { 10 } else { s })
                .collect();
            assert_eq!(infer_placed_dims(&classes, &p), Some((g.height(), g.width())));
        }
    }

    #[test]
    fn enumerate_views_identity_first() {
        let g = small_grid(2, 4);
        let dims = [(g.height(), g.width())];
        let one = enumerate_views(1, 5, &dims, 16, 2).unwrap();
        assert_eq!(one, vec![AugParams::identity(16, 2)]);
        let many = enumerate_views(510, 5, &dims, 16, 2).unwrap();
        assert_eq!(many.len(), 510);
        assert_eq!(many[0], AugParams::identity(16, 2));
        assert_eq!(many, enumerate_views(510, 5, &dims, 16, 2).unwrap());
        for p in &many {
            assert!(p.fits(g.height(), g.width()));
        }
    }

    #[test]
    fn joint_sampling_fits_all_grids() {
        let t = synth_task(SynthFamily::Upscale2, 4, 3, 1);
        let mut dims: Vec<(usize, usize)> = Vec::new();
        for (x, y) in &t.demos {
            dims.push((x.height(), x.width()));
            dims.push((y.height(), y.width()));
        }
        for seed in 0..50 {
            let p = sample_aug_joint(seed, &dims, 16, 2).unwrap();
            for &(h, w) in &dims {
                assert!(p.fits(h, w));
            }
            assert_eq!(p.translate_x % 2, 0);
            assert_eq!(p.translate_y % 2, 0);
        }
    }

    proptest! {
        #[test]
        fn prop_round_trip(seed in 0u64..5000) {
            let g = small_grid(seed, 9);
            let p = sample_aug(seed, &g, 24).unwrap();
            let canvas = apply(&g, &p).unwrap();
            let back = invert_hard(canvas.cells(), &p, (g.height(), g.width())).unwrap();
            prop_assert_eq!(back, g);
        }

        #[test]
        fn prop_canvas_structure(seed in 0u64..2000) {
            let g = small_grid(seed, 9);
            let p = sample_aug(seed.wrapping_mul(31), &g, 24).unwrap();
            let canvas = apply(&g, &p).unwrap();
            let (rh, rw) = if p.rotation % 2 == 1 {
                (g.width() * p.scale, g.height() * p.scale)
            } else {
                (g.height() * p.scale, g.width() * p.scale)
            };
            for r in 0..24 {
                for c in 0..24 {
                    let in_grid = r >= p.translate_y
                        && r < p.translate_y + rh
                        && c >= p.translate_x
                        && c < p.translate_x + rw;
                    let in_ring = !in_grid
                        && r + 1 >= p.translate_y
                        && r <= p.translate_y + rh
                        && c + 1 >= p.translate_x
                        && c <= p.translate_x + rw;
                    let s = canvas.get(r, c);
                    if in_grid {
                        prop_assert!(s < 10);
                    } else if in_ring {
                        prop_assert_eq!(s, BORDER);
                    } else {
                        prop_assert_eq!(s, BACKGROUND);
                    }
                }
            }
        }
    }
}
