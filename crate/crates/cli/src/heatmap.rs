//! Raster heatmaps of attention summaries.

use std::io::BufWriter;
use std::path::Path;

use nbsep::{Error, Result};

/// Cells are drawn as `CELL x CELL` pixel blocks.
const CELL: usize = 4;

/// Piecewise-linear dark-blue, teal, yellow colormap on `[0, 1]`.
fn color(v: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 4] = [[0.07, 0.04, 0.33], [0.13, 0.45, 0.56], [0.35, 0.78, 0.40], [0.99, 0.91, 0.15]];
    let x = v.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (x.floor() as usize).min(STOPS.len() - 2);
    let t = x - i as f64;
    let mut out = [0u8; 3];
    for (c, o) in out.iter_mut().enumerate() {
        *o = ((STOPS[i][c] * (1.0 - t) + STOPS[i + 1][c] * t) * 255.0).round() as u8;
    }
    out
}

/// Writes a `rows x cols` row-major matrix as a PNG with row 0 at the
/// bottom. Values are clipped at `max` and scaled by it.
pub fn write_png(path: &Path, data: &[f64], rows: usize, cols: usize, max: f64) -> Result<()> {
    if data.len() != rows * cols || rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument(format!("{} values for a {rows}x{cols} heatmap", data.len())));
    }
    let (w, h) = (cols * CELL, rows * CELL);
    let mut pixels = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        let r = rows - 1 - y / CELL;
        for x in 0..w {
            let v = data[r * cols + x / CELL];
            pixels.extend_from_slice(&color(if max > 0.0 { v.min(max) / max } else { 0.0 }));
        }
    }
    let file = std::fs::File::create(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let io = |e: png::EncodingError| Error::Data(format!("{}: {e}", path.display()));
    enc.write_header().map_err(io)?.write_image_data(&pixels).map_err(io)
}

/// Tab-separated matrix, full precision.
pub fn write_tsv(path: &Path, data: &[f64], cols: usize) -> Result<()> {
    let mut s = String::new();
    for row in data.chunks(cols) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        s.push_str(&line.join("\t"));
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_endpoints() {
        assert_eq!(color(0.0), [18, 10, 84]);
        assert_eq!(color(1.0), [252, 232, 38]);
        assert_eq!(color(7.0), color(1.0));
    }

    #[test]
    fn image_has_cell_scaled_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        write_png(&path, &[0.0, 0.5, 1.0, 0.2, 0.1, 0.0], 2, 3, 1.0).unwrap();
        let decoder = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(&path).unwrap()));
        let info = decoder.read_info().unwrap().info().clone();
        assert_eq!((info.width, info.height), (3 * CELL as u32, 2 * CELL as u32));
        assert!(write_png(&path, &[0.0; 5], 2, 3, 1.0).is_err());
    }
}
