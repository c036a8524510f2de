//! Structured attention masks realizing the four block variants.
//!
//! Controller rows always attend everywhere. Workspace rows attend to the
//! controller only (variants a/c) or to the controller plus self and the
//! existing 3x3 lattice neighbors (variants b/d), so a workspace row never
//! exceeds P+9 targets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Block architecture variant. `A`/`B` have no dense pass; `B`/`D` add the
/// local 3x3 neighborhood to the structured pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    A,
    B,
    C,
    D,
}

impl Variant {
    pub fn has_dense_pass(&self) -> bool {
        matches!(self, Variant::C | Variant::D)
    }

    pub fn has_neighborhood(&self) -> bool {
        matches!(self, Variant::B | Variant::D)
    }

    pub fn parse(s: &str) -> Option<Variant> {
        match s {
            "a" => Some(Variant::A),
            "b" => Some(Variant::B),
            "c" => Some(Variant::C),
            "d" => Some(Variant::D),
            _ => None,
        }
    }

    pub fn letter(&self) -> &'static str {
        match self {
            Variant::A => "a",
            Variant::B => "b",
            Variant::C => "c",
            Variant::D => "d",
        }
    }
}

/// An S x S boolean allow-matrix, stored as per-row sorted target lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    s: usize,
    /// Controller token count, recorded for audit.
    pub p_ctrl: usize,
    /// Workspace lattice side, recorded for audit.
    pub grid_side: usize,
    pub variant: Option<Variant>,
    allowed: Vec<Vec<usize>>,
}

impl AttentionMask {
    pub fn from_rows(allowed: Vec<Vec<usize>>, p_ctrl: usize, grid_side: usize, variant: Option<Variant>) -> Result<Self> {
        let s = allowed.len();
        if let Some(i) = allowed.iter().position(|row| row.is_empty()) {
            return Err(Error::EmptyRow(i));
        }
        Ok(Self { s, p_ctrl, grid_side, variant, allowed })
    }

    /// All-true mask for the dense pass.
    pub fn dense(s: usize) -> Self {
        let all: Vec<usize> = (0..s).collect();
        Self {
            s,
            p_ctrl: 0,
            grid_side: 0,
            variant: None,
            allowed: vec![all; s],
        }
    }

    pub fn len(&self) -> usize {
        self.s
    }

    pub fn is_empty(&self) -> bool {
        self.s == 0
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.allowed[i]
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i].binary_search(&j).is_ok()
    }

    pub fn is_dense_row(&self, i: usize) -> bool {
        self.allowed[i].len() == self.s
    }
}

/// Build the structured-pass mask for `variant` with `p` controller tokens on
/// a `g` x `g` workspace lattice. Neighborhoods are truncated at lattice
/// edges, no wraparound.
pub fn build_mask(variant: Variant, p: usize, g: usize) -> AttentionMask {
    assert!(p >= 1 && g >= 1);
    let s = p + g * g;
    let mut allowed = Vec::with_capacity(s);
    for _ in 0..p {
        allowed.push((0..s).collect());
    }
    for r in 0..g as isize {
        for c in 0..g as isize {
            let mut row: Vec<usize> = (0..p).collect();
            if variant.has_neighborhood() {
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        let (nr, nc) = (r + dr, c + dc);
                        if nr >= 0 && nr < g as isize && nc >= 0 && nc < g as isize {
                            row.push(p + (nr as usize) * g + nc as usize);
                        }
                    }
                }
            }
            allowed.push(row);
        }
    }
    AttentionMask { s, p_ctrl: p, grid_side: g, variant: Some(variant), allowed }
}
