//! Cluster-assignment maps: hard labels from the last stage, drawn as a
//! colour-coded pixmap.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::ppm;
use crate::tensor::{Real, Tensor};

/// Per-token cluster id over the final-stage token grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub rows: usize,
    pub cols: usize,
    /// Number of centers the labels index into.
    pub k: usize,
    /// Row-major cluster id per token.
    pub labels: Vec<usize>,
}

impl LabelMap {
    pub fn distinct(&self) -> usize {
        let mut seen = vec![false; self.k];
        for &l in &self.labels {
            seen[l] = true;
        }
        seen.iter().filter(|&&s| s).count()
    }
}

/// Argmax over the K axis of a `K×HW` assignment; ties go to the lower id.
pub fn argmax_labels<F: Real>(assignment: &Tensor<F>, rows: usize, cols: usize) -> Result<LabelMap> {
    let (k, hw) = assignment.dims2();
    if hw != rows * cols {
        return Err(Error::shape("argmax_labels", &[k, hw], &[rows, cols]));
    }
    let labels = (0..hw)
        .map(|j| {
            (0..k).fold(0, |best, i| {
                if assignment.at2(i, j) > assignment.at2(best, j) {
                    i
                } else {
                    best
                }
            })
        })
        .collect();
    Ok(LabelMap { rows, cols, k, labels })
}

pub fn final_stage_labels<F: Real>(model: &Model<F>, image: &Tensor<F>) -> Result<LabelMap> {
    let (g, out) = model.forward(image)?;
    let last = out.stages.last().expect("validated config has stages");
    let (rows, cols) = last.grid;
    argmax_labels(g.value(last.state.assignment), rows, cols)
}

const PALETTE: [[u8; 3]; 12] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [170, 110, 40],
];

/// Colour for a cluster id: a fixed palette, then golden-angle hues.
pub fn color(id: usize) -> [u8; 3] {
    if let Some(&c) = PALETTE.get(id) {
        return c;
    }
    let h = (id as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    let v = if (id / PALETTE.len()) % 2 == 0 { 0.85 } else { 0.6 };
    [r, g, b].map(|c| (c * v * 255.0).round() as u8)
}

/// Nearest-neighbour upscale: each token becomes a `cell×cell` block.
/// Returns `(width, height, rgb)`.
pub fn render(map: &LabelMap, cell: usize) -> (usize, usize, Vec<u8>) {
    let cell = cell.max(1);
    let (w, h) = (map.cols * cell, map.rows * cell);
    let mut rgb = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            rgb.extend_from_slice(&color(map.labels[(y / cell) * map.cols + x / cell]));
        }
    }
    (w, h, rgb)
}

/// Writes the map as a P6 image, upscaled so each token covers `cell` pixels.
pub fn write_label_map(path: impl AsRef<Path>, map: &LabelMap, cell: usize) -> Result<()> {
    let (w, h, rgb) = render(map, cell);
    ppm::write_image(path, w, h, 3, &rgb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_with_ties() {
        let a = Tensor::<f64>::from_rows(&[vec![0.5, 0.2, 0.1, 0.4], vec![0.5, 0.8, 0.9, 0.6]]).unwrap();
        let m = argmax_labels(&a, 2, 2).unwrap();
        assert_eq!(m.labels, vec![0, 1, 1, 1]);
        assert_eq!(m.distinct(), 2);
        assert!(argmax_labels(&a, 3, 1).is_err());
    }

    #[test]
    fn render_upscales_blocks() {
        let m = LabelMap {
            rows: 1,
            cols: 2,
            k: 2,
            labels: vec![0, 1],
        };
        let (w, h, rgb) = render(&m, 3);
        assert_eq!((w, h), (6, 3));
        assert_eq!(&rgb[0..3], &color(0));
        assert_eq!(&rgb[9..12], &color(1));
        assert_eq!(&rgb[(w + 2) * 3..(w + 3) * 3], &color(0));
    }

    #[test]
    fn colors_are_distinct_for_small_ids() {
        let colors: Vec<[u8; 3]> = (0..100).map(color).collect();
        for i in 0..colors.len() {
            for j in 0..i {
                assert_ne!(colors[i], colors[j], "{i} vs {j}");
            }
        }
    }
}
