use ndarray::{s, Array3};

/// One tile cut from a larger image; `x`, `y` locate its top-left corner.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub x: usize,
    pub y: usize,
    pub pixels: Array3<f32>,
}

/// Splits `[0, len)` into consecutive spans of `max_side`. A trailing
/// remainder shorter than half of `max_side` is merged into the previous
/// span; a longer one becomes its own, shorter span.
pub fn tile_spans(len: usize, max_side: usize) -> Vec<(usize, usize)> {
    assert!(max_side > 0, "tile side must be positive");
    if len <= max_side {
        return vec![(0, len)];
    }
    let full = len / max_side;
    let rem = len % max_side;
    let mut spans: Vec<(usize, usize)> = (0..full).map(|i| (i * max_side, max_side)).collect();
    if rem > 0 {
        if 2 * rem < max_side {
            spans.last_mut().expect("at least one full span").1 += rem;
        } else {
            spans.push((full * max_side, rem));
        }
    }
    spans
}

/// Cuts `image` into a non-overlapping grid covering every pixel once.
pub fn tile_for_pretraining(image: &Array3<f32>, max_side: usize) -> Vec<Tile> {
    let (h, w, _) = image.dim();
    let rows = tile_spans(h, max_side);
    let cols = tile_spans(w, max_side);
    let mut tiles = Vec::with_capacity(rows.len() * cols.len());
    for &(y, th) in &rows {
        for &(x, tw) in &cols {
            tiles.push(Tile {
                x,
                y,
                pixels: image.slice(s![y..y + th, x..x + tw, ..]).to_owned(),
            });
        }
    }
    tiles
}
