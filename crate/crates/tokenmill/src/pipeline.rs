//! End-to-end forward pass: window split, patch embedding, windowed
//! encoding over the assembled patch grid, per-window resampling to 256
//! tokens each, similarity-based filtering, and the final token resampler.

use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::image::{resize_image, RawImage};
use crate::resampler::{
    assemble_token_set, image_resample, token_filter, token_resample, ImportanceRanking,
    TokenSet, RESAMPLED_TOKENS,
};
use crate::split::{normalize_window, patchify, split_windows, PATCH_GRID, TOKENS_PER_WINDOW};
use crate::tensor::Tensor;
use crate::weights::PipelineWeights;

/// Shape summary of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardReport {
    /// Tiled window count (excludes the global view).
    pub windows: usize,
    pub window_rows: usize,
    pub window_cols: usize,
    /// Assembled token count entering the filter.
    pub l_before: usize,
    /// Token count after filtering and resampling.
    pub r_after: usize,
}

/// Forward-pass result: the compressed tokens plus enough intermediate
/// state to inspect what the filter kept.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub report: ForwardReport,
    /// Assembled per-window + global tokens before filtering.
    pub token_set: TokenSet,
    /// Importance ranking over `token_set`.
    pub ranking: ImportanceRanking,
    /// Final `[r, d]` tokens.
    pub tokens: Tensor,
}

/// Stacks per-window `[1024, d]` token matrices into the full
/// `[rows·32, cols·32, d]` patch grid, windows in row-major order.
pub fn assemble_patch_grid(window_tokens: &[Tensor], rows: usize, cols: usize) -> Result<Tensor> {
    if window_tokens.len() != rows * cols {
        return Err(Error::InvalidParameter(format!(
            "{} windows cannot tile a {rows}x{cols} grid",
            window_tokens.len()
        )));
    }
    let d = window_tokens[0].shape()[1];
    for (w, t) in window_tokens.iter().enumerate() {
        if t.shape() != [TOKENS_PER_WINDOW, d] {
            return Err(Error::InvalidShape {
                shape: t.shape().to_vec(),
                reason: format!("window {w} tokens must be [{TOKENS_PER_WINDOW}, {d}]"),
            });
        }
    }
    let (hp, wp) = (rows * PATCH_GRID, cols * PATCH_GRID);
    let mut grid = Tensor::zeros(vec![hp, wp, d]);
    for (w, tokens) in window_tokens.iter().enumerate() {
        let (wr, wc) = (w / cols, w % cols);
        for py in 0..PATCH_GRID {
            let src = py * PATCH_GRID * d;
            let dst = ((wr * PATCH_GRID + py) * wp + wc * PATCH_GRID) * d;
            grid.data_mut()[dst..dst + PATCH_GRID * d]
                .copy_from_slice(&tokens.data()[src..src + PATCH_GRID * d]);
        }
    }
    Ok(grid)
}

/// Extracts window `(wr, wc)` from an encoded grid as `[1024, d]`, the
/// inverse of [`assemble_patch_grid`] for one tile.
pub fn window_from_grid(grid: &Tensor, wr: usize, wc: usize) -> Result<Tensor> {
    if grid.rank() != 3 {
        return Err(Error::InvalidShape {
            shape: grid.shape().to_vec(),
            reason: "expected an [Hp, Wp, d] grid".into(),
        });
    }
    let (hp, wp, d) = (grid.shape()[0], grid.shape()[1], grid.shape()[2]);
    if (wr + 1) * PATCH_GRID > hp || (wc + 1) * PATCH_GRID > wp {
        return Err(Error::InvalidParameter(format!(
            "window ({wr}, {wc}) outside a {}x{} window grid",
            hp / PATCH_GRID,
            wp / PATCH_GRID
        )));
    }
    let mut data = Vec::with_capacity(TOKENS_PER_WINDOW * d);
    for py in 0..PATCH_GRID {
        let src = ((wr * PATCH_GRID + py) * wp + wc * PATCH_GRID) * d;
        data.extend_from_slice(&grid.data()[src..src + PATCH_GRID * d]);
    }
    Tensor::new(vec![TOKENS_PER_WINDOW, d], data)
}

fn embed_window(
    window_id: usize,
    window: &Tensor,
    cfg: &PipelineConfig,
    weights: &PipelineWeights,
) -> Result<Tensor> {
    let norm = normalize_window(window, cfg.mean, cfg.std)?;
    Ok(patchify(window_id, &norm, &weights.patch_proj)?.tokens)
}

/// Runs the full pipeline on an image of any size.
///
/// The image is resized to the configured resolution, tiled into 448-pixel
/// windows plus a resized global view, embedded patch-wise, encoded (tiled
/// windows jointly on the assembled grid, the global view on its own), each
/// view resampled to 256 tokens, and the assembled set filtered down to the
/// `r` most distinctive tokens that then query the token resampler.
pub fn forward(img: &RawImage, cfg: &PipelineConfig, weights: &PipelineWeights) -> Result<ForwardOutput> {
    cfg.validate()?;
    let resized = resize_image(img, cfg.resolution)?;
    let grid = split_windows(&resized)?;
    let (rows, cols) = (grid.rows(), grid.cols());

    let embedded: Vec<Tensor> = grid
        .windows()
        .par_iter()
        .enumerate()
        .map(|(w, window)| embed_window(w, window, cfg, weights))
        .collect::<Result<Vec<_>>>()?;
    let global_embedded = embed_window(rows * cols, grid.global_view(), cfg, weights)?;

    let enc_cfg = cfg.encoder_config();
    let full_grid = assemble_patch_grid(&embedded, rows, cols)?;
    let encoded = crate::swa::encode(&full_grid, &enc_cfg, &weights.encoder)?;
    let global_grid = assemble_patch_grid(&[global_embedded], 1, 1)?;
    let global_encoded = crate::swa::encode(&global_grid, &enc_cfg, &weights.encoder)?;

    let mut per_window = Vec::with_capacity(rows * cols);
    for wr in 0..rows {
        for wc in 0..cols {
            per_window.push(window_from_grid(&encoded, wr, wc)?);
        }
    }
    let resampled: Vec<Tensor> = per_window
        .par_iter()
        .map(|tokens| image_resample(tokens, &weights.image_resampler))
        .collect::<Result<Vec<_>>>()?;
    let global_tokens = window_from_grid(&global_encoded, 0, 0)?;
    let global_resampled = image_resample(&global_tokens, &weights.image_resampler)?;

    let token_set = assemble_token_set(&resampled, &global_resampled)?;
    let r = cfg.effective_r();
    let ranking = token_filter(&token_set.tokens, r)?;
    let tokens = token_resample(&token_set, r, &weights.token_resampler)?;

    let report = ForwardReport {
        windows: rows * cols,
        window_rows: rows,
        window_cols: cols,
        l_before: token_set.len(),
        r_after: tokens.shape()[0],
    };
    debug_assert_eq!(report.l_before, (rows * cols + 1) * RESAMPLED_TOKENS);
    Ok(ForwardOutput {
        report,
        token_set,
        ranking,
        tokens,
    })
}
