//! File export helpers: CSV tables, 8-bit PGM grayscale maps, and indexed
//! PPM part maps. Everything is written deterministically so repeated runs
//! are byte-identical.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::tensor::Tensor;

pub fn write_csv(
    path: &Path,
    header: &str,
    rows: impl IntoIterator<Item = String>,
) -> std::io::Result<()> {
    let mut out = String::from(header);
    out.push('\n');
    for row in rows {
        out.push_str(&row);
        out.push('\n');
    }
    fs::write(path, out)
}

/// Writes a 2-D tensor as binary PGM (P5), scaling values linearly so the
/// minimum maps to 0 and the maximum to 255.
pub fn write_pgm(path: &Path, map: &Tensor) -> std::io::Result<()> {
    assert_eq!(map.rank(), 2, "PGM export needs a 2-D map");
    let (rows, cols) = (map.shape()[0], map.shape()[1]);
    let lo = map.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut bytes = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    for &v in map.data() {
        bytes.push((((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    fs::File::create(path)?.write_all(&bytes)
}

/// Fixed palette for indexed part maps; wraps around past 12 entries.
const PALETTE: [[u8; 3]; 12] = [
    [40, 40, 40],    // 0: background, dark gray
    [230, 25, 75],   // red
    [60, 180, 75],   // green
    [0, 130, 200],   // blue
    [255, 225, 25],  // yellow
    [145, 30, 180],  // purple
    [70, 240, 240],  // cyan
    [245, 130, 48],  // orange
    [240, 50, 230],  // magenta
    [210, 245, 60],  // lime
    [250, 190, 212], // pink
    [0, 128, 128],   // teal
];

/// Writes per-cell labels as a binary PPM (P6), one palette color per label.
pub fn write_ppm_indexed(path: &Path, labels: &[usize], h: usize, w: usize) -> std::io::Result<()> {
    assert_eq!(labels.len(), h * w);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for &l in labels {
        bytes.extend_from_slice(&PALETTE[l % PALETTE.len()]);
    }
    fs::File::create(path)?.write_all(&bytes)
}

/// Attention-map export: row-normalized CSV plus a PGM rendering.
pub fn write_attention_map(
    csv_path: &Path,
    pgm_path: &Path,
    map: &Tensor,
) -> std::io::Result<()> {
    assert_eq!(map.rank(), 2);
    let (n, m) = (map.shape()[0], map.shape()[1]);
    let mut normalized = map.clone();
    for row in normalized.data_mut().chunks_exact_mut(m) {
        let s: f64 = row.iter().sum();
        if s != 0.0 {
            for v in row.iter_mut() {
                *v /= s;
            }
        }
    }
    let rows = (0..n).map(|i| {
        (0..m)
            .map(|j| format!("{}", normalized.at2(i, j)))
            .collect::<Vec<_>>()
            .join(",")
    });
    let header: String = (0..m)
        .map(|j| format!("style{j}"))
        .collect::<Vec<_>>()
        .join(",");
    write_csv(csv_path, &header, rows)?;
    write_pgm(pgm_path, &normalized)
}
