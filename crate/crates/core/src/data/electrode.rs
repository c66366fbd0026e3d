use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FaceError, Result};

const STANDARD_62: &str = include_str!("../../config/electrodes_62.json");

/// Grid extents of the scalp map used for the spatial view.
pub const GRID_SIZE: usize = 9;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Electrode {
    pub name: String,
    pub row: usize,
    pub col: usize,
}

/// Placement of each channel on an `rows × cols` grid, in channel order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElectrodeMap {
    pub rows: usize,
    pub cols: usize,
    pub channels: Vec<Electrode>,
}

impl ElectrodeMap {
    pub fn new(rows: usize, cols: usize, channels: Vec<Electrode>) -> Result<Self> {
        let map = Self {
            rows,
            cols,
            channels,
        };
        map.validate()?;
        Ok(map)
    }

    fn validate(&self) -> Result<()> {
        let mut cells = HashSet::new();
        let mut names = HashSet::new();
        for e in &self.channels {
            if e.row >= self.rows || e.col >= self.cols {
                return Err(FaceError::ElectrodeMap(format!(
                    "{} at ({}, {}) is outside the {}×{} grid",
                    e.name, e.row, e.col, self.rows, self.cols
                )));
            }
            if !cells.insert((e.row, e.col)) {
                return Err(FaceError::ElectrodeMap(format!(
                    "cell ({}, {}) assigned twice",
                    e.row, e.col
                )));
            }
            if !names.insert(e.name.as_str()) {
                return Err(FaceError::ElectrodeMap(format!("duplicate channel {}", e.name)));
            }
        }
        Ok(())
    }

    /// The 62-channel cap layout on a 9×9 grid.
    pub fn standard_62() -> Self {
        serde_json::from_str(STANDARD_62).expect("bundled electrode map is valid")
    }

    /// Default map for `channels` channels: the standard cap for 62,
    /// otherwise channels `CH0..` spread evenly over the 9×9 grid.
    pub fn default_for(channels: usize) -> Result<Self> {
        if channels == 62 {
            return Ok(Self::standard_62());
        }
        let cells = GRID_SIZE * GRID_SIZE;
        if channels == 0 || channels > cells {
            return Err(FaceError::ElectrodeMap(format!(
                "no default layout for {channels} channels"
            )));
        }
        let entries = (0..channels)
            .map(|i| {
                let cell = i * cells / channels;
                Electrode {
                    name: format!("CH{i}"),
                    row: cell / GRID_SIZE,
                    col: cell % GRID_SIZE,
                }
            })
            .collect();
        Self::new(GRID_SIZE, GRID_SIZE, entries)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FaceError::io(path, e))?;
        let map: Self = serde_json::from_str(&text).map_err(|e| FaceError::json(path, e))?;
        map.validate()?;
        Ok(map)
    }

    /// Restricts and reorders the map to the given channel order.
    pub fn for_channels(&self, names: &[String]) -> Result<Self> {
        let entries = names
            .iter()
            .map(|n| {
                self.channels
                    .iter()
                    .find(|e| e.name.eq_ignore_ascii_case(n))
                    .cloned()
                    .ok_or_else(|| FaceError::Load(format!("unknown channel name `{n}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.rows, self.cols, entries)
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.channels.iter().map(|e| e.name.clone()).collect()
    }
}
