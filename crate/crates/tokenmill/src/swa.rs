//! Windowed transformer encoder with interleaved shifted-window blocks.
//!
//! Tokens live on an `Hp×Wp×D` patch grid. Attention runs independently
//! inside `window_patches`-sided tiles; every `swa_interval`-th block first
//! rolls the grid toward the top-left by `shift_size` patches and masks
//! attention so that tokens only attend within their pre-shift contiguous
//! region, then rolls back. Shifted blocks carry a bottleneck adapter whose
//! output projection starts at zero, so a freshly initialized adapter leaves
//! the block output untouched.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{layer_norm, matmul, softmax, Tensor, LAYER_NORM_EPS, MASK_SENTINEL};

/// Static shape of the encoder stack.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub depth: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Every k-th block (1-based) uses shifted windows.
    pub swa_interval: usize,
    /// Shift in patch units; defaults to half a window.
    pub shift_size: usize,
    /// Attention window side in patch units.
    pub window_patches: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 {
            return Err(Error::Config {
                key: "d_model".into(),
                reason: "d_model and n_heads must be positive".into(),
            });
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config {
                key: "n_heads".into(),
                reason: format!(
                    "d_model {} not divisible by n_heads {}",
                    self.d_model, self.n_heads
                ),
            });
        }
        if self.swa_interval == 0 {
            return Err(Error::Config {
                key: "swa_interval".into(),
                reason: "swa_interval must be positive".into(),
            });
        }
        if self.window_patches == 0 || self.shift_size >= self.window_patches {
            return Err(Error::Config {
                key: "shift_size".into(),
                reason: format!(
                    "need 0 <= shift_size ({}) < window_patches ({})",
                    self.shift_size, self.window_patches
                ),
            });
        }
        Ok(())
    }

    /// Whether block `i` (0-based) is a shifted-window block: true for every
    /// `swa_interval`-th block counting from 1, so an interval larger than
    /// the depth means no block shifts.
    pub fn is_shifted_block(&self, i: usize) -> bool {
        (i + 1) % self.swa_interval == 0
    }

    /// Shift applied by block `i`.
    pub fn shift_for_block(&self, i: usize) -> usize {
        if self.is_shifted_block(i) {
            self.shift_size
        } else {
            0
        }
    }

    /// Adapter bottleneck width: `d_model / 4`, minimum 1.
    pub fn d_adapter(&self) -> usize {
        (self.d_model / 4).max(1)
    }
}

/// Bottleneck adapter: `x + (x · A) · B`, with `B` zeroed at initialization
/// so a new adapter is exactly transparent.
#[derive(Debug, Clone)]
pub struct AdapterWeights {
    pub a: Tensor,
    pub b: Tensor,
}

impl AdapterWeights {
    pub fn new(a: Tensor, b: Tensor) -> Result<Self> {
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]
            || a.shape()[0] != b.shape()[1]
        {
            return Err(Error::ShapeMismatch {
                op: "adapter a/b",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        Ok(Self { a, b })
    }

    /// Fresh adapter from a down-projection: `B` is all zeros.
    pub fn init(a: Tensor) -> Result<Self> {
        if a.rank() != 2 {
            return Err(Error::InvalidShape {
                shape: a.shape().to_vec(),
                reason: "adapter A must be rank 2".into(),
            });
        }
        let b = Tensor::zeros(vec![a.shape()[1], a.shape()[0]]);
        Self::new(a, b)
    }

    /// Adapter branch output for `x` of shape `[N, d_model]`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        matmul(&matmul(x, &self.a)?, &self.b)
    }
}

/// Multi-head projection weights, each `d_model × d_model`, no biases.
#[derive(Debug, Clone)]
pub struct AttnProjections {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub n_heads: usize,
}

impl AttnProjections {
    pub fn validate(&self, d_model: usize) -> Result<()> {
        for (name, t) in [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
        ] {
            if t.shape() != [d_model, d_model] {
                return Err(Error::Archive(format!(
                    "attention projection {name} has shape {:?}, expected [{d_model}, {d_model}]",
                    t.shape()
                )));
            }
        }
        if self.n_heads == 0 || d_model % self.n_heads != 0 {
            return Err(Error::Config {
                key: "n_heads".into(),
                reason: format!("d_model {d_model} not divisible by {} heads", self.n_heads),
            });
        }
        Ok(())
    }
}

/// One transformer block: pre-norm attention, pre-norm MLP, and an optional
/// adapter on shifted blocks.
#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub norm1_gamma: Tensor,
    pub norm1_beta: Tensor,
    pub attn: AttnProjections,
    pub norm2_gamma: Tensor,
    pub norm2_beta: Tensor,
    /// `d_model × 4·d_model`.
    pub mlp_w1: Tensor,
    /// `4·d_model × d_model`.
    pub mlp_w2: Tensor,
    pub adapter: Option<AdapterWeights>,
}

/// Full encoder stack.
#[derive(Debug, Clone)]
pub struct EncoderWeights {
    pub blocks: Vec<BlockWeights>,
}

/// Per-attention-window additive masks for a shifted grid layout.
///
/// `masks` has shape `[n_windows, T, T]` with `T = window_patches²`;
/// an entry is `0` where two patches share a pre-shift region and
/// [`MASK_SENTINEL`] otherwise. Every diagonal entry is `0`.
#[derive(Debug, Clone)]
pub struct ShiftMask {
    n_windows: usize,
    t: usize,
    masks: Tensor,
}

impl ShiftMask {
    pub fn n_windows(&self) -> usize {
        self.n_windows
    }

    /// Patches per attention window.
    pub fn window_len(&self) -> usize {
        self.t
    }

    /// The `T×T` mask of window `w`.
    pub fn window_mask(&self, w: usize) -> Tensor {
        let t2 = self.t * self.t;
        Tensor::new(
            vec![self.t, self.t],
            self.masks.data()[w * t2..(w + 1) * t2].to_vec(),
        )
        .expect("mask slice dims are fixed")
    }

    pub fn masks(&self) -> &Tensor {
        &self.masks
    }
}

fn check_grid(grid: &Tensor) -> Result<(usize, usize, usize)> {
    if grid.rank() != 3 {
        return Err(Error::InvalidShape {
            shape: grid.shape().to_vec(),
            reason: "expected an Hp x Wp x D token grid".into(),
        });
    }
    Ok((grid.shape()[0], grid.shape()[1], grid.shape()[2]))
}

/// Rolls the grid `shift` patches toward the top-left:
/// `out[i][j] = in[(i+shift) mod Hp][(j+shift) mod Wp]`.
pub fn cyclic_shift(grid: &Tensor, shift: usize) -> Result<Tensor> {
    let (hp, wp, d) = check_grid(grid)?;
    if shift >= hp.min(wp) {
        return Err(Error::InvalidParameter(format!(
            "shift {shift} out of range for {hp}x{wp} grid"
        )));
    }
    if shift == 0 {
        return Ok(grid.clone());
    }
    let mut out = vec![0.0; grid.numel()];
    for i in 0..hp {
        let si = (i + shift) % hp;
        for j in 0..wp {
            let sj = (j + shift) % wp;
            let src = (si * wp + sj) * d;
            let dst = (i * wp + j) * d;
            out[dst..dst + d].copy_from_slice(&grid.data()[src..src + d]);
        }
    }
    Tensor::new(grid.shape().to_vec(), out)
}

/// Inverse of [`cyclic_shift`]: rolls back toward the bottom-right, so
/// `inverse_cyclic_shift(cyclic_shift(x, s), s) == x` bit-exactly.
pub fn inverse_cyclic_shift(grid: &Tensor, shift: usize) -> Result<Tensor> {
    let (hp, wp, d) = check_grid(grid)?;
    if shift >= hp.min(wp) {
        return Err(Error::InvalidParameter(format!(
            "shift {shift} out of range for {hp}x{wp} grid"
        )));
    }
    if shift == 0 {
        return Ok(grid.clone());
    }
    let mut out = vec![0.0; grid.numel()];
    for i in 0..hp {
        let si = (i + hp - shift) % hp;
        for j in 0..wp {
            let sj = (j + wp - shift) % wp;
            let src = (si * wp + sj) * d;
            let dst = (i * wp + j) * d;
            out[dst..dst + d].copy_from_slice(&grid.data()[src..src + d]);
        }
    }
    Tensor::new(grid.shape().to_vec(), out)
}

/// Band index of a coordinate on the shifted canvas: `[0, n−ws)`,
/// `[n−ws, n−shift)`, `[n−shift, n)`.
fn band(coord: usize, n: usize, ws: usize, shift: usize) -> usize {
    if coord < n - ws {
        0
    } else if coord < n - shift {
        1
    } else {
        2
    }
}

/// Builds per-window attention masks for a grid that has been cyclically
/// shifted by `shift` patches.
///
/// On the shifted canvas each axis splits into three bands whose contents
/// originate from distinct pre-shift regions; a patch's region label is the
/// pair of band indices. Attention is allowed exactly between same-label
/// patches. With `shift == 0` every window is single-region and the mask is
/// all zeros.
pub fn build_shift_mask(hp: usize, wp: usize, window_patches: usize, shift: usize) -> Result<ShiftMask> {
    let ws = window_patches;
    if ws == 0 || hp % ws != 0 || wp % ws != 0 {
        return Err(Error::Config {
            key: "window_patches".into(),
            reason: format!("grid {hp}x{wp} not tiled by {ws}-patch windows"),
        });
    }
    if shift >= ws {
        return Err(Error::InvalidParameter(format!(
            "shift {shift} must be smaller than the window side {ws}"
        )));
    }
    let (wrows, wcols) = (hp / ws, wp / ws);
    let n_windows = wrows * wcols;
    let t = ws * ws;
    let mut labels = vec![0u8; t];
    let mut masks = vec![0.0; n_windows * t * t];
    for wr in 0..wrows {
        for wc in 0..wcols {
            let w = wr * wcols + wc;
            for py in 0..ws {
                for px in 0..ws {
                    let gy = wr * ws + py;
                    let gx = wc * ws + px;
                    labels[py * ws + px] =
                        (band(gy, hp, ws, shift) * 3 + band(gx, wp, ws, shift)) as u8;
                }
            }
            let base = w * t * t;
            for i in 0..t {
                for j in 0..t {
                    if labels[i] != labels[j] {
                        masks[base + i * t + j] = MASK_SENTINEL;
                    }
                }
            }
        }
    }
    Ok(ShiftMask {
        n_windows,
        t,
        masks: Tensor::new(vec![n_windows, t, t], masks)?,
    })
}

/// Copies window `w` (row-major tiling) out of the grid as a `[T, D]` matrix.
fn extract_window(grid: &Tensor, ws: usize, wcols: usize, w: usize) -> Tensor {
    let (_, wp, d) = (grid.shape()[0], grid.shape()[1], grid.shape()[2]);
    let (wr, wc) = (w / wcols, w % wcols);
    let mut data = Vec::with_capacity(ws * ws * d);
    for py in 0..ws {
        let row = (wr * ws + py) * wp + wc * ws;
        data.extend_from_slice(&grid.data()[row * d..(row + ws) * d]);
    }
    Tensor::new(vec![ws * ws, d], data).expect("window dims are fixed")
}

/// Writes a `[T, D]` window matrix back into the grid.
fn scatter_window(grid: &mut Tensor, ws: usize, wcols: usize, w: usize, win: &Tensor) {
    let (wp, d) = (grid.shape()[1], grid.shape()[2]);
    let (wr, wc) = (w / wcols, w % wcols);
    for py in 0..ws {
        let row = (wr * ws + py) * wp + wc * ws;
        let dst = row * d;
        let src = py * ws * d;
        grid.data_mut()[dst..dst + ws * d].copy_from_slice(&win.data()[src..src + ws * d]);
    }
}

fn columns(t: &Tensor, from: usize, to: usize) -> Tensor {
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    let mut data = Vec::with_capacity(rows * (to - from));
    for r in 0..rows {
        data.extend_from_slice(&t.data()[r * cols + from..r * cols + to]);
    }
    Tensor::new(vec![rows, to - from], data).expect("column slice dims are fixed")
}

/// Multi-head self-attention run independently inside each
/// `window_patches`-sided tile of the grid.
///
/// A [`ShiftMask`] must describe the same tiling (same window count and
/// size); `None` means unrestricted attention within each window.
pub fn window_attention(
    grid: &Tensor,
    proj: &AttnProjections,
    mask: Option<&ShiftMask>,
    window_patches: usize,
) -> Result<Tensor> {
    let (hp, wp, d) = check_grid(grid)?;
    let ws = window_patches;
    if ws == 0 || hp % ws != 0 || wp % ws != 0 {
        return Err(Error::Config {
            key: "window_patches".into(),
            reason: format!("grid {hp}x{wp} not tiled by {ws}-patch windows"),
        });
    }
    proj.validate(d)?;
    let (wrows, wcols) = (hp / ws, wp / ws);
    let n_windows = wrows * wcols;
    let t = ws * ws;
    if let Some(m) = mask {
        if m.n_windows != n_windows || m.t != t {
            return Err(Error::ShapeMismatch {
                op: "window_attention mask",
                lhs: vec![n_windows, t, t],
                rhs: m.masks.shape().to_vec(),
            });
        }
    }
    let dh = d / proj.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    // Windows are independent, so they can run on the rayon pool; each
    // window's op sequence is fixed, keeping results bit-identical for any
    // thread count. The scatter stays sequential and ordered.
    let projected: Vec<Tensor> = (0..n_windows)
        .into_par_iter()
        .map(|w| -> Result<Tensor> {
            let x = extract_window(grid, ws, wcols, w);
            let q = matmul(&x, &proj.wq)?;
            let k = matmul(&x, &proj.wk)?;
            let v = matmul(&x, &proj.wv)?;
            let wmask = mask.map(|m| m.window_mask(w));
            let mut merged = Tensor::zeros(vec![t, d]);
            for h in 0..proj.n_heads {
                let (from, to) = (h * dh, (h + 1) * dh);
                let qh = columns(&q, from, to);
                let kh = columns(&k, from, to);
                let vh = columns(&v, from, to);
                let logits = matmul(&qh, &kh.transpose()?)?.scale(scale);
                let weights = softmax(&logits, wmask.as_ref())?;
                let oh = matmul(&weights, &vh)?;
                for r in 0..t {
                    merged.data_mut()[r * d + from..r * d + to].copy_from_slice(oh.row(r));
                }
            }
            matmul(&merged, &proj.wo)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Tensor::zeros(grid.shape().to_vec());
    for (w, win) in projected.iter().enumerate() {
        scatter_window(&mut out, ws, wcols, w, win);
    }
    Ok(out)
}

/// GELU with the tanh approximation, applied element-wise.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn mlp(x: &Tensor, w1: &Tensor, w2: &Tensor) -> Result<Tensor> {
    let mut hidden = matmul(x, w1)?;
    for v in hidden.data_mut() {
        *v = gelu(*v);
    }
    matmul(&hidden, w2)
}

/// One pre-norm transformer block over the token grid.
///
/// With `shift > 0` the attention sub-layer runs on the cyclically shifted
/// grid under the matching [`ShiftMask`] and is shifted back before the
/// residual add; the MLP follows, and an adapter branch (if present) adds
/// `(x · A) · B` on top. A zero `B` therefore leaves the output bit-equal to
/// the adapter-free block.
pub fn swa_block(
    grid: &Tensor,
    cfg: &EncoderConfig,
    w: &BlockWeights,
    shift: usize,
) -> Result<Tensor> {
    let (hp, wp, d) = check_grid(grid)?;
    if d != cfg.d_model {
        return Err(Error::InvalidShape {
            shape: grid.shape().to_vec(),
            reason: format!("token width {d} does not match d_model {}", cfg.d_model),
        });
    }
    let flat = |t: Tensor| t.reshape(vec![hp * wp, d]);
    let unflat = |t: Tensor| t.reshape(vec![hp, wp, d]);

    let normed = layer_norm(
        &flat(grid.clone())?,
        &w.norm1_gamma,
        &w.norm1_beta,
        LAYER_NORM_EPS,
    )?;
    let shifted = cyclic_shift(&unflat(normed)?, shift)?;
    let mask = if shift > 0 {
        Some(build_shift_mask(hp, wp, cfg.window_patches, shift)?)
    } else {
        None
    };
    let attended = window_attention(&shifted, &w.attn, mask.as_ref(), cfg.window_patches)?;
    let unshifted = inverse_cyclic_shift(&attended, shift)?;
    let x1 = grid.add(&unshifted)?;

    let normed2 = layer_norm(&flat(x1.clone())?, &w.norm2_gamma, &w.norm2_beta, LAYER_NORM_EPS)?;
    let x2 = x1.add(&unflat(mlp(&normed2, &w.mlp_w1, &w.mlp_w2)?)?)?;

    match &w.adapter {
        Some(adapter) => {
            let branch = adapter.apply(&flat(x2.clone())?)?;
            x2.add(&unflat(branch)?)
        }
        None => Ok(x2),
    }
}

/// Runs the full stack: block `i` uses `shift_size` when `i` is an
/// `swa_interval`-th block (1-based) and shift `0` otherwise. Depth 0 is the
/// identity.
pub fn encode(grid: &Tensor, cfg: &EncoderConfig, weights: &EncoderWeights) -> Result<Tensor> {
    cfg.validate()?;
    if weights.blocks.len() != cfg.depth {
        return Err(Error::Config {
            key: "depth".into(),
            reason: format!(
                "config depth {} but {} block weight sets",
                cfg.depth,
                weights.blocks.len()
            ),
        });
    }
    let mut x = grid.clone();
    for (i, block) in weights.blocks.iter().enumerate() {
        x = swa_block(&x, cfg, block, cfg.shift_for_block(i))?;
    }
    Ok(x)
}
