//! Portable graymap and pixmap renders of top-view grids.
//!
//! Images show the grid from above with +x up and +y to the left, so
//! image row 0 is the last grid row and image column 0 the last grid
//! column.

use std::collections::HashMap;

use crate::config::FlatConfig;
use crate::dataio::ClassMap;
use crate::labels::SemanticGrid;
use crate::occupancy::{ObservabilityMap, VoxelState};
use crate::{Error, Result};

pub const WHITE: [u8; 3] = [255, 255, 255];

fn flip_index(i: usize, rows: usize, cols: usize) -> usize {
    let (r, c) = (i / cols, i % cols);
    (rows - 1 - r) * cols + (cols - 1 - c)
}

/// Grid-ordered values rearranged into image order.
fn to_image<T: Copy>(vals: &[T], rows: usize, cols: usize) -> Vec<T> {
    (0..rows * cols).map(|i| vals[flip_index(i, rows, cols)]).collect()
}

pub fn pgm8(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// 16-bit samples, most significant byte first.
pub fn pgm16(rows: usize, cols: usize, pixels: &[u16]) -> Vec<u8> {
    let mut out = format!("P5\n{cols} {rows}\n65535\n").into_bytes();
    for p in pixels {
        out.extend_from_slice(&p.to_be_bytes());
    }
    out
}

pub fn ppm(rows: usize, cols: usize, pixels: &[[u8; 3]]) -> Vec<u8> {
    let mut out = format!("P6\n{cols} {rows}\n255\n").into_bytes();
    for p in pixels {
        out.extend_from_slice(p);
    }
    out
}

/// Class colors by name with an index-derived fallback.
#[derive(Debug, Clone)]
pub struct Palette {
    colors: HashMap<String, [u8; 3]>,
}

impl Palette {
    pub fn builtin() -> Self {
        Self::parse(include_str!("../data/palette.txt")).expect("builtin palette")
    }

    /// `name = r g b` lines.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg = FlatConfig::parse(text)?;
        let mut colors = HashMap::new();
        for (k, v) in cfg.iter() {
            let c: Vec<u8> = crate::config::split_list(v)
                .map(|s| s.parse::<u8>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Config(format!("palette entry `{k}` is not three bytes")))?;
            let [r, g, b] = c[..] else {
                return Err(Error::Config(format!("palette entry `{k}` is not three bytes")));
            };
            colors.insert(k.to_string(), [r, g, b]);
        }
        Ok(Self { colors })
    }

    pub fn color(&self, name: &str, index: u16) -> [u8; 3] {
        if let Some(c) = self.colors.get(name) {
            return *c;
        }
        let h = (index as u32).wrapping_mul(2_654_435_761);
        [(h >> 8) as u8, (h >> 16) as u8, (h >> 24) as u8]
    }
}

/// Observation counts scaled to 8 bits by the grid maximum.
pub fn observability_pgm(map: &ObservabilityMap) -> Vec<u8> {
    let m = map.max().max(1) as f64;
    let px: Vec<u8> = map
        .counts
        .iter()
        .map(|&c| (255.0 * c as f64 / m).round() as u8)
        .collect();
    pgm8(map.rows, map.cols, &to_image(&px, map.rows, map.cols))
}

/// Raw observation counts, saturating at 65535.
pub fn observability_pgm16(map: &ObservabilityMap) -> Vec<u8> {
    let px: Vec<u16> = map.counts.iter().map(|&c| c.min(u16::MAX as u32) as u16).collect();
    pgm16(map.rows, map.cols, &to_image(&px, map.rows, map.cols))
}

/// Column summary of the voxel states: unknown grey, free white,
/// occupied black.
pub fn visibility_pgm(states: &[VoxelState], rows: usize, cols: usize) -> Vec<u8> {
    let px: Vec<u8> = states
        .iter()
        .map(|s| match s {
            VoxelState::Unknown => 128,
            VoxelState::Free => 255,
            VoxelState::Occupied => 0,
        })
        .collect();
    pgm8(rows, cols, &to_image(&px, rows, cols))
}

/// Class map render; cells outside `observed` are white.
pub fn labels_ppm(grid: &SemanticGrid, map: &ClassMap, palette: &Palette, observed: Option<&[bool]>) -> Vec<u8> {
    let px: Vec<[u8; 3]> = grid
        .labels
        .iter()
        .enumerate()
        .map(|(i, &l)| match observed {
            Some(o) if !o[i] => WHITE,
            _ => palette.color(map.name(l), l),
        })
        .collect();
    ppm(grid.rows, grid.cols, &to_image(&px, grid.rows, grid.cols))
}

/// `class = r g b` per class, for the render legend.
pub fn legend(map: &ClassMap, palette: &Palette) -> String {
    let mut s = String::new();
    for (i, name) in map.names().iter().enumerate() {
        let [r, g, b] = palette.color(name, i as u16);
        s.push_str(&format!("{name} = {r} {g} {b}\n"));
    }
    s.push_str("unobserved = 255 255 255\n");
    s
}
