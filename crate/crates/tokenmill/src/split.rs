//! Splitting a resized image into 448×448 windows plus a global view, and
//! turning windows into patch-token matrices.
//!
//! Window tensors hold the raw 8-bit sample values as f64, so tiling the
//! windows back together reproduces the source image bit-exactly;
//! normalization is a separate explicit step applied before patchify.

use crate::error::{Error, Result};
use crate::image::{resize_image, RawImage, CHANNELS};
use crate::tensor::Tensor;

/// Edge length of one window in pixels.
pub const WINDOW_SIDE: usize = 448;
/// Edge length of one patch in pixels.
pub const PATCH_SIDE: usize = 14;
/// Patches per window axis (448 / 14).
pub const PATCH_GRID: usize = WINDOW_SIDE / PATCH_SIDE;
/// Patch tokens per window.
pub const TOKENS_PER_WINDOW: usize = PATCH_GRID * PATCH_GRID;
/// Flattened patch width: 14 × 14 × 3 samples.
pub const PATCH_DIM: usize = PATCH_SIDE * PATCH_SIDE * CHANNELS;

/// Default per-channel normalization constants (CLIP image preprocessing).
pub const DEFAULT_MEAN: [f64; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
pub const DEFAULT_STD: [f64; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];

/// Non-overlapping 448×448 tiles of a resized image plus a 448×448 global
/// view of the whole image.
#[derive(Debug, Clone)]
pub struct WindowGrid {
    rows: usize,
    cols: usize,
    windows: Vec<Tensor>,
    global_view: Tensor,
    source_resolution: (usize, usize),
}

impl WindowGrid {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Windows in row-major grid order.
    pub fn windows(&self) -> &[Tensor] {
        &self.windows
    }

    pub fn window(&self, index: usize) -> &Tensor {
        &self.windows[index]
    }

    pub fn global_view(&self) -> &Tensor {
        &self.global_view
    }

    /// `(H, W)` of the resized source image.
    pub fn source_resolution(&self) -> (usize, usize) {
        self.source_resolution
    }

    pub fn window_count(&self) -> usize {
        self.windows.len()
    }
}

/// Patch-token matrix for one window: 1024 tokens in row-major order over
/// the 32×32 patch grid.
#[derive(Debug, Clone)]
pub struct PatchTokens {
    pub window_id: usize,
    pub tokens: Tensor,
    pub grid: (usize, usize),
}

fn window_tensor(img: &RawImage, row0: usize, col0: usize) -> Tensor {
    let mut data = Vec::with_capacity(WINDOW_SIDE * WINDOW_SIDE * CHANNELS);
    for y in 0..WINDOW_SIDE {
        for x in 0..WINDOW_SIDE {
            for c in 0..CHANNELS {
                data.push(img.at(row0 + y, col0 + x, c) as f64);
            }
        }
    }
    Tensor::new(vec![WINDOW_SIDE, WINDOW_SIDE, CHANNELS], data)
        .expect("window tensor dims are fixed")
}

/// Tiles a resized image into 448×448 windows (row-major) and builds the
/// 448×448 global view by bilinear downscale of the whole image.
///
/// Both image dimensions must already be multiples of 448.
pub fn split_windows(img: &RawImage) -> Result<WindowGrid> {
    if img.height() % WINDOW_SIDE != 0 || img.width() % WINDOW_SIDE != 0 {
        return Err(Error::Config {
            key: "resolution".into(),
            reason: format!(
                "image {}x{} is not aligned to {WINDOW_SIDE}-pixel windows",
                img.height(),
                img.width()
            ),
        });
    }
    let rows = img.height() / WINDOW_SIDE;
    let cols = img.width() / WINDOW_SIDE;
    let mut windows = Vec::with_capacity(rows * cols);
    for wr in 0..rows {
        for wc in 0..cols {
            windows.push(window_tensor(img, wr * WINDOW_SIDE, wc * WINDOW_SIDE));
        }
    }
    let global = resize_image(img, (WINDOW_SIDE, WINDOW_SIDE))?;
    let global_view = window_tensor(&global, 0, 0);
    Ok(WindowGrid {
        rows,
        cols,
        windows,
        global_view,
        source_resolution: (img.height(), img.width()),
    })
}

/// Inverse of [`split_windows`] for the tiled part: reassembles the source
/// image from the window tensors. Bit-exact because windows store raw
/// sample values.
pub fn reassemble(grid: &WindowGrid) -> Result<RawImage> {
    let (h, w) = grid.source_resolution;
    let mut data = vec![0u8; h * w * CHANNELS];
    for (i, win) in grid.windows.iter().enumerate() {
        let wr = i / grid.cols;
        let wc = i % grid.cols;
        for y in 0..WINDOW_SIDE {
            for x in 0..WINDOW_SIDE {
                for c in 0..CHANNELS {
                    let v = win.at(&[y, x, c]);
                    data[((wr * WINDOW_SIDE + y) * w + wc * WINDOW_SIDE + x) * CHANNELS + c] =
                        v as u8;
                }
            }
        }
    }
    RawImage::new(h, w, data)
}

/// Maps raw samples to standardized values: `v/255`, then per-channel
/// `(v − mean_c)/std_c`. Input and output are 448×448×3 window tensors.
pub fn normalize_window(window: &Tensor, mean: [f64; 3], std: [f64; 3]) -> Result<Tensor> {
    if window.shape() != [WINDOW_SIDE, WINDOW_SIDE, CHANNELS] {
        return Err(Error::InvalidShape {
            shape: window.shape().to_vec(),
            reason: format!("expected a {WINDOW_SIDE}x{WINDOW_SIDE}x{CHANNELS} window"),
        });
    }
    if std.iter().any(|&s| s <= 0.0) {
        return Err(Error::Config {
            key: "normalize.std".into(),
            reason: "standard deviations must be positive".into(),
        });
    }
    let mut out = window.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let c = i % CHANNELS;
        *v = (*v / 255.0 - mean[c]) / std[c];
    }
    Ok(out)
}

/// Projects the 1024 flattened 14×14 patches of a window through
/// `patch_proj` (588×D), producing the window's token matrix.
///
/// Token `i` covers patch grid cell `(i / 32, i % 32)`; the patch is
/// flattened row-major as `(y, x, channel)`.
pub fn patchify(window_id: usize, window: &Tensor, patch_proj: &Tensor) -> Result<PatchTokens> {
    if window.shape() != [WINDOW_SIDE, WINDOW_SIDE, CHANNELS] {
        return Err(Error::InvalidShape {
            shape: window.shape().to_vec(),
            reason: format!("expected a {WINDOW_SIDE}x{WINDOW_SIDE}x{CHANNELS} window"),
        });
    }
    if patch_proj.rank() != 2 || patch_proj.shape()[0] != PATCH_DIM {
        return Err(Error::InvalidShape {
            shape: patch_proj.shape().to_vec(),
            reason: format!("patch projection must be {PATCH_DIM}xD"),
        });
    }
    let mut flat = Vec::with_capacity(TOKENS_PER_WINDOW * PATCH_DIM);
    for pr in 0..PATCH_GRID {
        for pc in 0..PATCH_GRID {
            for y in 0..PATCH_SIDE {
                for x in 0..PATCH_SIDE {
                    for c in 0..CHANNELS {
                        flat.push(window.at(&[pr * PATCH_SIDE + y, pc * PATCH_SIDE + x, c]));
                    }
                }
            }
        }
    }
    let patches = Tensor::new(vec![TOKENS_PER_WINDOW, PATCH_DIM], flat)?;
    let tokens = crate::tensor::matmul(&patches, patch_proj)?;
    Ok(PatchTokens {
        window_id,
        tokens,
        grid: (PATCH_GRID, PATCH_GRID),
    })
}
