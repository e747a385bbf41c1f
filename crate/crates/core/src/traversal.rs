//! Grid scan orders and per-block direction schedules.
//!
//! A permutation `perm` lists, for each position of the traversed sequence,
//! the canonical (row-major) token index found there: applying it to `x`
//! gives `y[t] = x[perm[t]]`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Result, VilError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    RowForward,
    RowBackward,
    ColForward,
    ColBackward,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::RowForward,
        Direction::RowBackward,
        Direction::ColForward,
        Direction::ColBackward,
    ];

    pub fn short(self) -> &'static str {
        match self {
            Direction::RowForward => "RF",
            Direction::RowBackward => "RB",
            Direction::ColForward => "CF",
            Direction::ColBackward => "CB",
        }
    }

    pub fn is_column(self) -> bool {
        matches!(self, Direction::ColForward | Direction::ColBackward)
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

/// A scan order over an `h × w` token grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraversalPath {
    pub kind: Direction,
    pub h: usize,
    pub w: usize,
}

impl TraversalPath {
    pub fn new(kind: Direction, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(VilError::config(format!("empty {h}×{w} token grid")));
        }
        Ok(Self { kind, h, w })
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid shape of the traversed sequence when laid back out row-major:
    /// column scans see the transposed grid.
    pub fn sequence_grid(&self) -> (usize, usize) {
        if self.kind.is_column() {
            (self.w, self.h)
        } else {
            (self.h, self.w)
        }
    }

    pub fn permutation(&self) -> Vec<usize> {
        let (h, w) = (self.h, self.w);
        let col_major = || (0..w).flat_map(move |c| (0..h).map(move |r| r * w + c));
        match self.kind {
            Direction::RowForward => (0..h * w).collect(),
            Direction::RowBackward => (0..h * w).rev().collect(),
            Direction::ColForward => col_major().collect(),
            Direction::ColBackward => {
                let mut p: Vec<usize> = col_major().collect();
                p.reverse();
                p
            }
        }
    }
}

pub fn grid_permutation(path: &TraversalPath) -> Result<Vec<usize>> {
    if path.is_empty() {
        return Err(VilError::config("empty token grid"));
    }
    Ok(path.permutation())
}

/// `inverse(p)[p[t]] = t`.
pub fn inverse(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (t, &s) in perm.iter().enumerate() {
        inv[s] = t;
    }
    inv
}

pub fn is_bijection(perm: &[usize]) -> bool {
    let mut seen = vec![false; perm.len()];
    perm.iter().all(|&s| s < seen.len() && !std::mem::replace(&mut seen[s], true))
}

/// Reorders the rows of `x` (row width `d`): `y[t] = x[perm[t]]`.
pub fn apply_rows<T: Copy>(x: &[T], d: usize, perm: &[usize]) -> Result<Vec<T>> {
    if d == 0 || x.len() != perm.len() * d {
        return Err(VilError::dim(format!(
            "permutation of length {} applied to {} values of width {d}",
            perm.len(),
            x.len()
        )));
    }
    Ok(perm.iter().flat_map(|&s| x[s * d..(s + 1) * d].iter().copied()).collect())
}

pub fn flip_sequence<T: Copy>(x: &[T], d: usize) -> Result<Vec<T>> {
    let len = if d == 0 { 0 } else { x.len() / d };
    let rev: Vec<usize> = (0..len).rev().collect();
    apply_rows(x, d, &rev)
}

/// Extends a patch permutation to a sequence with an extra token at
/// `fixed`, which stays in place.
pub fn with_fixed_token(perm: &[usize], fixed: Option<usize>) -> Vec<usize> {
    let Some(cls) = fixed else {
        return perm.to_vec();
    };
    let slot = |j: usize| if j < cls { j } else { j + 1 };
    let mut out = vec![cls; perm.len() + 1];
    for (t, &s) in perm.iter().enumerate() {
        out[slot(t)] = slot(s);
    }
    out
}

/// Deserializes from a preset name (`"alt-bi"`) or a full table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "DesignRepr")]
pub struct BlockDesign {
    pub directions: Vec<Direction>,
    /// One direction per block, cycling through `directions`.
    pub alternating: bool,
    /// With several directions per block, all of them use one parameter set.
    #[serde(default)]
    pub shared_params: bool,
}

impl BlockDesign {
    pub fn uni() -> Self {
        Self {
            directions: vec![Direction::RowForward],
            alternating: false,
            shared_params: false,
        }
    }

    pub fn alternating_bi() -> Self {
        Self {
            directions: vec![Direction::RowForward, Direction::RowBackward],
            alternating: true,
            shared_params: false,
        }
    }

    pub fn bi(shared_params: bool) -> Self {
        Self {
            directions: vec![Direction::RowForward, Direction::RowBackward],
            alternating: false,
            shared_params,
        }
    }

    pub fn quad(shared_params: bool) -> Self {
        Self {
            directions: Direction::ALL.to_vec(),
            alternating: false,
            shared_params,
        }
    }

    pub fn alternating_quad() -> Self {
        Self {
            directions: Direction::ALL.to_vec(),
            alternating: true,
            shared_params: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.directions.is_empty() {
            return Err(VilError::config("block design lists no directions"));
        }
        for (i, d) in self.directions.iter().enumerate() {
            if self.directions[..i].contains(d) {
                return Err(VilError::config(format!("direction {d} listed twice")));
            }
        }
        Ok(())
    }

    /// Number of distinct parameter sets per block.
    pub fn param_sets(&self) -> usize {
        if self.alternating || self.shared_params {
            1
        } else {
            self.directions.len()
        }
    }

    /// Preset name when the design equals one of the presets, otherwise
    /// the directions joined by `+`.
    pub fn label(&self) -> String {
        if let Some(name) = PRESETS.iter().find(|n| n.parse::<Self>().is_ok_and(|d| d == *self)) {
            return (*name).to_string();
        }
        let dirs: Vec<_> = self.directions.iter().map(|d| d.short()).collect();
        let mut s = format!("{}{}", if self.alternating { "alt-" } else { "" }, dirs.join("+"));
        if self.shared_params && self.param_sets() == 1 && self.directions.len() > 1 && !self.alternating {
            s.push_str("-shared");
        }
        s
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum DesignRepr {
    Preset(String),
    Full {
        directions: Vec<Direction>,
        alternating: bool,
        #[serde(default)]
        shared_params: bool,
    },
}

impl TryFrom<DesignRepr> for BlockDesign {
    type Error = VilError;

    fn try_from(r: DesignRepr) -> Result<Self> {
        let d = match r {
            DesignRepr::Preset(name) => name.parse()?,
            DesignRepr::Full {
                directions,
                alternating,
                shared_params,
            } => BlockDesign {
                directions,
                alternating,
                shared_params,
            },
        };
        d.validate()?;
        Ok(d)
    }
}

const PRESETS: [&str; 7] = ["uni", "alt-bi", "bi", "bi-shared", "quad", "quad-shared", "alt-quad"];

impl FromStr for BlockDesign {
    type Err = VilError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "uni" => Self::uni(),
            "alt-bi" => Self::alternating_bi(),
            "bi" => Self::bi(false),
            "bi-shared" => Self::bi(true),
            "quad" => Self::quad(false),
            "quad-shared" => Self::quad(true),
            "alt-quad" => Self::alternating_quad(),
            other => {
                return Err(VilError::config(format!(
                    "unknown block design {other:?} (uni, alt-bi, bi, bi-shared, quad, quad-shared, alt-quad)"
                )))
            }
        })
    }
}

/// Directions for each of `depth` blocks.
pub fn assign_directions(design: &BlockDesign, depth: usize) -> Result<Vec<Vec<Direction>>> {
    design.validate()?;
    if depth == 0 {
        return Err(VilError::config("depth must be at least 1"));
    }
    Ok((0..depth)
        .map(|b| {
            if design.alternating {
                vec![design.directions[b % design.directions.len()]]
            } else {
                design.directions.clone()
            }
        })
        .collect())
}
