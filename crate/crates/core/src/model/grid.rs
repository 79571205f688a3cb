//! Index maps between pixel space and the per-block token grids.

/// For each pixel of an `image x image` map, the row of the `grid x grid`
/// token matrix that covers it (nearest neighbor).
pub fn upsample_index(image: usize, grid: usize) -> Vec<usize> {
    let cell = image / grid;
    let mut idx = Vec::with_capacity(image * image);
    for y in 0..image {
        for x in 0..image {
            idx.push((y / cell) * grid + x / cell);
        }
    }
    idx
}

/// Rows of a `grid x grid` token matrix taken at offset `(dy, dx)` inside
/// each 2x2 cell, in row-major order of the `grid/2` output grid.
pub fn merge_index(grid: usize, dy: usize, dx: usize) -> Vec<usize> {
    let half = grid / 2;
    let mut idx = Vec::with_capacity(half * half);
    for y in 0..half {
        for x in 0..half {
            idx.push((2 * y + dy) * grid + 2 * x + dx);
        }
    }
    idx
}

/// Dense `(grid/r)^2 x grid^2` averaging matrix pooling `r x r` neighborhoods.
pub fn pool_matrix(grid: usize, r: usize) -> Vec<f64> {
    let out = grid / r;
    let n_in = grid * grid;
    let w = 1.0 / (r * r) as f64;
    let mut m = vec![0.0; out * out * n_in];
    for oy in 0..out {
        for ox in 0..out {
            let row = oy * out + ox;
            for dy in 0..r {
                for dx in 0..r {
                    let col = (oy * r + dy) * grid + ox * r + dx;
                    m[row * n_in + col] = w;
                }
            }
        }
    }
    m
}

/// Flattens non-overlapping `patch x patch` tiles of an `(image, image, ch)`
/// row-major image into rows of length `patch * patch * ch`.
pub fn patchify<T: Copy>(pixels: &[T], image: usize, channels: usize, patch: usize) -> Vec<T> {
    let grid = image / patch;
    let mut out = Vec::with_capacity(pixels.len());
    for gy in 0..grid {
        for gx in 0..grid {
            for py in 0..patch {
                for px in 0..patch {
                    let base = ((gy * patch + py) * image + gx * patch + px) * channels;
                    out.extend_from_slice(&pixels[base..base + channels]);
                }
            }
        }
    }
    out
}
