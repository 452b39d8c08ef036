//! Dependency-strength heatmaps.
//!
//! Row `i` is the target segment, column `j` the context segment; only the
//! strict lower triangle `j < i` carries values. Cells without a value (upper
//! triangle, diagonal, unsampled pairs) are drawn in [`MASK_RGB`], a color no
//! scale produces. Images are binary PPM (`P6`).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lds::PairScore;

/// Reserved color for cells without a value.
pub const MASK_RGB: [u8; 3] = [48, 0, 48];

const NEG_RGB: [f64; 3] = [59.0, 76.0, 192.0];
const MID_RGB: [f64; 3] = [255.0, 255.0, 255.0];
const POS_RGB: [f64; 3] = [180.0, 4.0, 38.0];

#[derive(Debug, Error)]
pub enum VizError {
    #[error("no pair scores to render")]
    Empty,
    #[error("pair ({i}, {j}) is outside a {n}x{n} lower triangle")]
    OutOfRange { i: usize, j: usize, n: usize },
    #[error("csv line {line}: {msg}")]
    Csv { line: usize, msg: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorScale {
    /// Grayscale, min-max normalized per document.
    Linear,
    /// Blue below zero, white at zero, red above; symmetric in |value|.
    Diverging,
}

impl std::str::FromStr for ColorScale {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(Self::Linear),
            "diverging" | "signed-diverging" => Ok(Self::Diverging),
            _ => Err(format!("unknown scale {s:?} (linear, diverging)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeatValue {
    Dst,
    Lds,
}

impl std::str::FromStr for HeatValue {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dst" => Ok(Self::Dst),
            "lds" => Ok(Self::Lds),
            _ => Err(format!("unknown value {s:?} (dst, lds)")),
        }
    }
}

impl HeatValue {
    fn column(self) -> &'static str {
        match self {
            HeatValue::Dst => "dst",
            HeatValue::Lds => "lds",
        }
    }

    fn of(self, p: &PairScore) -> f64 {
        match self {
            HeatValue::Dst => p.dst,
            HeatValue::Lds => p.lds_pair,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSpec {
    pub doc_id: String,
    pub n_segments: usize,
    pub scale: ColorScale,
    pub value: HeatValue,
    /// Pixels per cell side.
    pub cell_size: usize,
}

impl HeatmapSpec {
    pub fn new(doc_id: impl Into<String>, n_segments: usize) -> Self {
        Self {
            doc_id: doc_id.into(),
            n_segments,
            scale: ColorScale::Linear,
            value: HeatValue::Dst,
            cell_size: 1,
        }
    }
}

/// N×N matrix, row-major, `None` where masked.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub n: usize,
    pub value: HeatValue,
    cells: Vec<Option<f64>>,
}

impl Heatmap {
    pub fn from_pairs(pairs: &[PairScore], n: usize, value: HeatValue) -> Result<Self, VizError> {
        if pairs.is_empty() {
            return Err(VizError::Empty);
        }
        let mut cells = vec![None; n * n];
        for p in pairs {
            if !(1 <= p.j && p.j < p.i && p.i <= n) {
                return Err(VizError::OutOfRange { i: p.i, j: p.j, n });
            }
            cells[(p.i - 1) * n + (p.j - 1)] = Some(value.of(p));
        }
        Ok(Self { n, value, cells })
    }

    /// Value at 1-based `(i, j)`.
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.cells[(i - 1) * self.n + (j - 1)]
    }

    fn range(&self) -> (f64, f64) {
        self.cells
            .iter()
            .flatten()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Normalized intensity in `[0, 1]` under the linear scale.
    pub fn intensity(&self, i: usize, j: usize) -> Option<f64> {
        let v = self.get(i, j)?;
        let (lo, hi) = self.range();
        Some(if hi > lo {
            (v - lo) / (hi - lo)
        } else if v > 0.0 {
            1.0
        } else {
            0.0
        })
    }

    fn color(&self, i: usize, j: usize, scale: ColorScale) -> [u8; 3] {
        let Some(v) = self.get(i, j) else {
            return MASK_RGB;
        };
        match scale {
            ColorScale::Linear => {
                let g = (self.intensity(i, j).unwrap_or(0.0) * 255.0).round() as u8;
                [g, g, g]
            }
            ColorScale::Diverging => {
                let (lo, hi) = self.range();
                let span = lo.abs().max(hi.abs());
                let t = if span > 0.0 { v / span } else { 0.0 };
                let end = if t < 0.0 { NEG_RGB } else { POS_RGB };
                let a = t.abs().min(1.0);
                let mut out = [0u8; 3];
                for c in 0..3 {
                    out[c] = (MID_RGB[c] + (end[c] - MID_RGB[c]) * a).round() as u8;
                }
                out
            }
        }
    }

    /// Binary PPM with `cell_size`-pixel square cells.
    pub fn to_ppm(&self, scale: ColorScale, cell_size: usize) -> Vec<u8> {
        let cell = cell_size.max(1);
        let side = self.n * cell;
        let mut out = format!("P6\n{side} {side}\n255\n").into_bytes();
        out.reserve(side * side * 3);
        for y in 0..side {
            let i = y / cell + 1;
            for x in 0..side {
                let j = x / cell + 1;
                out.extend_from_slice(&self.color(i, j, scale));
            }
        }
        out
    }

    /// `i,j,<value>` rows for every defined cell, ordered by `(i, j)`.
    pub fn to_csv(&self) -> String {
        let mut out = format!("i,j,{}\n", self.value.column());
        for i in 1..=self.n {
            for j in 1..i {
                if let Some(v) = self.get(i, j) {
                    // `{}` on f64 prints the shortest string that parses back exactly.
                    writeln!(out, "{i},{j},{v}").unwrap();
                }
            }
        }
        out
    }
}

pub fn parse_csv(text: &str) -> Result<Vec<(usize, usize, f64)>, VizError> {
    let mut rows = Vec::new();
    for (line, raw) in text.lines().enumerate().skip(1) {
        if raw.trim().is_empty() {
            continue;
        }
        let err = |msg: &str| VizError::Csv {
            line: line + 1,
            msg: msg.to_string(),
        };
        let mut parts = raw.split(',');
        let i = parts.next().and_then(|s| s.parse().ok()).ok_or_else(|| err("bad i"))?;
        let j = parts.next().and_then(|s| s.parse().ok()).ok_or_else(|| err("bad j"))?;
        let v = parts.next().and_then(|s| s.parse().ok()).ok_or_else(|| err("bad value"))?;
        rows.push((i, j, v));
    }
    Ok(rows)
}

pub struct RenderedHeatmap {
    pub heatmap: Heatmap,
    pub ppm: Vec<u8>,
    pub csv: String,
}

pub fn render_heatmap(pairs: &[PairScore], spec: &HeatmapSpec) -> Result<RenderedHeatmap, VizError> {
    let heatmap = Heatmap::from_pairs(pairs, spec.n_segments, spec.value)?;
    Ok(RenderedHeatmap {
        ppm: heatmap.to_ppm(spec.scale, spec.cell_size),
        csv: heatmap.to_csv(),
        heatmap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(i: usize, j: usize, dst: f64) -> PairScore {
        PairScore {
            i,
            j,
            delta_ppl: 0.0,
            dst,
            ddi: 0.0,
            dsp: 1.0,
            indicator: dst > 0.05,
            lds_pair: dst * 2.0,
        }
    }

    fn three() -> Vec<PairScore> {
        vec![pair(2, 1, 0.5), pair(3, 1, 0.0), pair(3, 2, -0.2)]
    }

    #[test]
    fn csv_passes_values_through() {
        let r = render_heatmap(&three(), &HeatmapSpec::new("d", 3)).unwrap();
        assert_eq!(r.csv, "i,j,dst\n2,1,0.5\n3,1,0\n3,2,-0.2\n");
    }

    #[test]
    fn image_has_masked_upper_triangle() {
        let mut spec = HeatmapSpec::new("d", 3);
        spec.cell_size = 2;
        let r = render_heatmap(&three(), &spec).unwrap();
        let header = b"P6\n6 6\n255\n";
        assert!(r.ppm.starts_with(header));
        let px = &r.ppm[header.len()..];
        assert_eq!(px.len(), 6 * 6 * 3);
        let at = |x: usize, y: usize| [px[(y * 6 + x) * 3], px[(y * 6 + x) * 3 + 1], px[(y * 6 + x) * 3 + 2]];
        assert_eq!(at(0, 0), MASK_RGB); // diagonal
        assert_eq!(at(5, 0), MASK_RGB); // upper
        assert_eq!(at(0, 2), [255, 255, 255]); // (2,1) = max
        assert_eq!(at(3, 4), [0, 0, 0]); // (3,2) = min
    }

    #[test]
    fn diverging_zero_is_midpoint() {
        let mut spec = HeatmapSpec::new("d", 3);
        spec.scale = ColorScale::Diverging;
        let r = render_heatmap(&three(), &spec).unwrap();
        assert_eq!(r.heatmap.color(3, 1, ColorScale::Diverging), [255, 255, 255]);
        assert_eq!(r.heatmap.color(2, 1, ColorScale::Diverging), [180, 4, 38]);
    }

    #[test]
    fn lds_values_can_be_plotted() {
        let mut spec = HeatmapSpec::new("d", 3);
        spec.value = HeatValue::Lds;
        let r = render_heatmap(&three(), &spec).unwrap();
        assert!(r.csv.starts_with("i,j,lds\n2,1,1\n"));
    }

    #[test]
    fn empty_and_out_of_range_inputs_fail() {
        assert!(matches!(render_heatmap(&[], &HeatmapSpec::new("d", 3)), Err(VizError::Empty)));
        assert!(matches!(
            render_heatmap(&[pair(4, 1, 0.1)], &HeatmapSpec::new("d", 3)),
            Err(VizError::OutOfRange { .. })
        ));
    }

    #[test]
    fn sparse_pairs_leave_masked_cells() {
        let h = Heatmap::from_pairs(&[pair(3, 1, 0.2)], 3, HeatValue::Dst).unwrap();
        assert_eq!(h.get(2, 1), None);
        assert_eq!(h.color(2, 1, ColorScale::Linear), MASK_RGB);
        assert_eq!(h.to_csv(), "i,j,dst\n3,1,0.2\n");
    }
}
