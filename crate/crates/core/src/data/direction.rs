use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Heading category of a pixel, binned to 90 degrees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    NorthEast,
    NorthWest,
    SouthEast,
    SouthWest,
    /// No dominant heading; encodes to the zero vector.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipAxis {
    /// Mirror left-right; swaps east and west.
    Horizontal,
    /// Mirror top-bottom; swaps north and south.
    Vertical,
}

impl Direction {
    pub const ALL: [Direction; 5] = [
        Direction::NorthEast,
        Direction::NorthWest,
        Direction::SouthEast,
        Direction::SouthWest,
        Direction::None,
    ];

    /// Position in the one-hot vector `(NE, NW, SE, SW)`.
    pub fn one_hot_position(self) -> Option<usize> {
        match self {
            Direction::NorthEast => Some(0),
            Direction::NorthWest => Some(1),
            Direction::SouthEast => Some(2),
            Direction::SouthWest => Some(3),
            Direction::None => None,
        }
    }

    pub fn flipped(self, axis: FlipAxis) -> Direction {
        use Direction::*;
        match (axis, self) {
            (_, None) => None,
            (FlipAxis::Vertical, NorthEast) => SouthEast,
            (FlipAxis::Vertical, SouthEast) => NorthEast,
            (FlipAxis::Vertical, NorthWest) => SouthWest,
            (FlipAxis::Vertical, SouthWest) => NorthWest,
            (FlipAxis::Horizontal, NorthEast) => NorthWest,
            (FlipAxis::Horizontal, NorthWest) => NorthEast,
            (FlipAxis::Horizontal, SouthEast) => SouthWest,
            (FlipAxis::Horizontal, SouthWest) => SouthEast,
        }
    }
}

/// Permutation of one-hot positions induced by a flip.
pub fn one_hot_permutation(axis: FlipAxis) -> [usize; 4] {
    let mut perm = [0; 4];
    for dir in &Direction::ALL[..4] {
        let from = dir.one_hot_position().expect("not None");
        perm[from] = dir.flipped(axis).one_hot_position().expect("not None");
    }
    perm
}

/// Bijection between the five raw direction bytes and categories.
///
/// The default follows the listed order: 0 → NE, 1 → NW, 85 → SE,
/// 170 → SW, 255 → none. It is configuration because other datasets order
/// the codes differently.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(u8, Direction)>", into = "Vec<(u8, Direction)>")]
pub struct DirectionTable {
    entries: [(u8, Direction); 5],
    lookup: [Option<Direction>; 256],
}

impl Default for DirectionTable {
    fn default() -> Self {
        DirectionTable::new([
            (0, Direction::NorthEast),
            (1, Direction::NorthWest),
            (85, Direction::SouthEast),
            (170, Direction::SouthWest),
            (255, Direction::None),
        ])
        .expect("default table is a bijection")
    }
}

impl TryFrom<Vec<(u8, Direction)>> for DirectionTable {
    type Error = Error;

    fn try_from(entries: Vec<(u8, Direction)>) -> Result<Self> {
        let entries: [(u8, Direction); 5] = entries.try_into().map_err(|v: Vec<_>| {
            Error::DirectionTable(format!("need 5 entries, got {}", v.len()))
        })?;
        DirectionTable::new(entries)
    }
}

impl From<DirectionTable> for Vec<(u8, Direction)> {
    fn from(table: DirectionTable) -> Self {
        table.entries.to_vec()
    }
}

impl DirectionTable {
    pub fn new(entries: [(u8, Direction); 5]) -> Result<Self> {
        let mut lookup = [None; 256];
        for &(code, dir) in &entries {
            if lookup[code as usize].is_some() {
                return Err(Error::DirectionTable(format!("code {code} listed twice")));
            }
            lookup[code as usize] = Some(dir);
        }
        for dir in Direction::ALL {
            if !entries.iter().any(|&(_, d)| d == dir) {
                return Err(Error::DirectionTable(format!(
                    "category {dir:?} has no code"
                )));
            }
        }
        Ok(DirectionTable { entries, lookup })
    }

    pub fn entries(&self) -> &[(u8, Direction); 5] {
        &self.entries
    }

    pub fn category(&self, code: u8) -> Option<Direction> {
        self.lookup[code as usize]
    }

    pub fn code(&self, dir: Direction) -> u8 {
        self.entries
            .iter()
            .find(|&&(_, d)| d == dir)
            .map(|&(c, _)| c)
            .expect("bijection covers every category")
    }

    pub fn is_legal(&self, code: u8) -> bool {
        self.lookup[code as usize].is_some()
    }

    /// Code after flipping; illegal codes pass through unchanged.
    pub fn remap(&self, code: u8, axis: FlipAxis) -> u8 {
        match self.category(code) {
            Some(dir) => self.code(dir.flipped(axis)),
            None => code,
        }
    }

    /// `256`-entry remap table for a flip axis.
    pub fn remap_table(&self, axis: FlipAxis) -> [u8; 256] {
        let mut table = [0u8; 256];
        for (code, slot) in table.iter_mut().enumerate() {
            *slot = self.remap(code as u8, axis);
        }
        table
    }
}

/// Where a direction byte came from, for error messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PixelLocation {
    pub frame: usize,
    pub row: usize,
    pub col: usize,
}

/// Split a direction byte into four `{0, 1}` indicators `(NE, NW, SE, SW)`.
pub fn direction_to_onehot(code: u8, table: &DirectionTable, at: PixelLocation) -> Result<[u8; 4]> {
    let dir = table.category(code).ok_or(Error::IllegalDirectionCode {
        code,
        frame: at.frame,
        row: at.row,
        col: at.col,
    })?;
    let mut out = [0; 4];
    if let Some(pos) = dir.one_hot_position() {
        out[pos] = 1;
    }
    Ok(out)
}
