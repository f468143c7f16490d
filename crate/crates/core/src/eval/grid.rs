//! Tiled comparison panels.

use std::path::Path;

use crate::data::{save_image, upsample_nearest, Image};
use crate::{Error, Result};

/// Side-by-side concatenation; lower-resolution tiles are upsampled by the
/// integer factor that matches the tallest tile.
pub fn hconcat(tiles: &[&Image]) -> Result<Image> {
    let h = tiles
        .iter()
        .map(|t| t.height())
        .max()
        .ok_or_else(|| Error::InvalidInput("nothing to concatenate".into()))?;
    let scaled: Vec<Image> = tiles
        .iter()
        .map(|t| {
            if h % t.height() != 0 {
                return Err(Error::ShapeMismatch(format!(
                    "tile height {} does not divide {h}",
                    t.height()
                )));
            }
            upsample_nearest(t, h / t.height())
        })
        .collect::<Result<_>>()?;
    let w: usize = scaled.iter().map(|t| t.width()).sum();
    let mut out = Image::filled(h, w, [-1.0; 3])?;
    let mut x0 = 0;
    for t in &scaled {
        for c in 0..3 {
            for y in 0..h {
                for x in 0..t.width() {
                    out.set(c, y, x0 + x, t.get(c, y, x));
                }
            }
        }
        x0 += t.width();
    }
    Ok(out)
}

/// Writes the tiles row-major into a `ceil(N / cols) x cols` grid (empty
/// cells black) and returns the grid's `(rows, cols)`.
pub fn render_grid(tiles: &[Image], cols: usize, path: &Path) -> Result<(usize, usize)> {
    let first = tiles
        .first()
        .ok_or_else(|| Error::InvalidInput("render_grid needs at least one tile".into()))?;
    if cols == 0 {
        return Err(Error::InvalidInput("grid needs at least one column".into()));
    }
    let (th, tw) = first.dims();
    if tiles.iter().any(|t| t.dims() != (th, tw)) {
        return Err(Error::ShapeMismatch("grid tiles must share one size".into()));
    }
    let cols = cols.min(tiles.len());
    let rows = tiles.len().div_ceil(cols);
    let mut out = Image::filled(rows * th, cols * tw, [-1.0; 3])?;
    for (i, t) in tiles.iter().enumerate() {
        let (r, c0) = (i / cols, i % cols);
        for c in 0..3 {
            for y in 0..th {
                for x in 0..tw {
                    out.set(c, r * th + y, c0 * tw + x, t.get(c, y, x));
                }
            }
        }
    }
    save_image(&out, path)?;
    Ok((rows, cols))
}
