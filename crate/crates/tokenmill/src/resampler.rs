//! The two compression stages: a per-window image resampler that maps 1024
//! encoded patch tokens to 256 via learnable queries, and a token resampler
//! that keeps the `r` least redundant tokens of the assembled sequence and
//! re-aggregates the rest through cross-attention.

use crate::error::{Error, Result};
use crate::tensor::{matmul, softmax, Tensor};

/// Queries per window produced by the image resampler.
pub const RESAMPLED_TOKENS: usize = 256;
/// Query grid side: 256 queries arranged 16×16.
pub const QUERY_GRID: usize = 16;
/// Key grid side: 1024 window tokens arranged 32×32.
pub const KEY_GRID: usize = 32;

/// Factorized 2-D sinusoidal positional encoding for a `rows×cols` grid,
/// flattened row-major to `(rows·cols)×D`.
///
/// The first `D/2` channels encode the row index and the last `D/2` the
/// column index. Within each half, channel `2k` is
/// `sin(p / 10000^(2k/d))` and channel `2k+1` the matching cosine, with
/// `d = D/2`. Position `(0,0)` therefore has all sines 0 and all cosines 1.
pub fn pos_enc_2d(rows: usize, cols: usize, d: usize) -> Result<Tensor> {
    if d == 0 || d % 4 != 0 {
        return Err(Error::Config {
            key: "d_model".into(),
            reason: format!("positional encoding needs D divisible by 4, got {d}"),
        });
    }
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidParameter(
            "positional encoding grid must be non-empty".into(),
        ));
    }
    let half = d / 2;
    // Per-axis encoding of one scalar position into `half` channels.
    let encode_axis = |p: f64, out: &mut [f64]| {
        for k in 0..half / 2 {
            let freq = 10_000_f64.powf(2.0 * k as f64 / half as f64);
            out[2 * k] = (p / freq).sin();
            out[2 * k + 1] = (p / freq).cos();
        }
    };
    let mut data = vec![0.0; rows * cols * d];
    for r in 0..rows {
        for c in 0..cols {
            let base = (r * cols + c) * d;
            encode_axis(r as f64, &mut data[base..base + half]);
            encode_axis(c as f64, &mut data[base + half..base + d]);
        }
    }
    Tensor::new(vec![rows * cols, d], data)
}

/// Weights of the per-window image resampler: 256 learnable queries plus
/// full-width projections. Positional encodings are deterministic and
/// derived from the fixed 16×16 query / 32×32 key grids.
#[derive(Debug, Clone)]
pub struct ImageResamplerWeights {
    pub queries: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

impl ImageResamplerWeights {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.queries.shape() != [RESAMPLED_TOKENS, d] {
            return Err(Error::Archive(format!(
                "resampler queries have shape {:?}, expected [{RESAMPLED_TOKENS}, {d}]",
                self.queries.shape()
            )));
        }
        for (name, t) in [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv)] {
            if t.shape() != [d, d] {
                return Err(Error::Archive(format!(
                    "resampler projection {name} has shape {:?}, expected [{d}, {d}]",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Compresses one window's 1024 encoded tokens to exactly 256.
///
/// Cross-attention with `Q = (queries + query_pos)·wq`,
/// `K = (tokens + key_pos)·wk`, and `V = tokens·wv`: positions inform the
/// matching, values stay position-free.
pub fn image_resample(window_tokens: &Tensor, w: &ImageResamplerWeights) -> Result<Tensor> {
    if window_tokens.rank() != 2 || window_tokens.shape()[0] != KEY_GRID * KEY_GRID {
        return Err(Error::InvalidShape {
            shape: window_tokens.shape().to_vec(),
            reason: format!("expected [{0}, D] window tokens", KEY_GRID * KEY_GRID),
        });
    }
    let d = window_tokens.shape()[1];
    w.validate(d)?;
    let qpos = pos_enc_2d(QUERY_GRID, QUERY_GRID, d)?;
    let kpos = pos_enc_2d(KEY_GRID, KEY_GRID, d)?;
    let q = matmul(&w.queries.add(&qpos)?, &w.wq)?;
    let k = matmul(&window_tokens.add(&kpos)?, &w.wk)?;
    let v = matmul(window_tokens, &w.wv)?;
    let logits = matmul(&q, &k.transpose()?)?.scale(1.0 / (d as f64).sqrt());
    matmul(&softmax(&logits, None)?, &v)
}

/// Provenance of one token in an assembled [`TokenSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenOrigin {
    /// Produced by the image resampler for sub-image `window_id`.
    Window { window_id: usize, index: usize },
    /// Produced for the downscaled global view.
    Global { index: usize },
}

/// The concatenated resampler outputs for all windows plus the global view.
#[derive(Debug, Clone)]
pub struct TokenSet {
    pub tokens: Tensor,
    pub origin: Vec<TokenOrigin>,
}

impl TokenSet {
    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// Concatenates per-window features (row-major window order) and the global
/// view, recording each token's origin. The global block comes last.
pub fn assemble_token_set(window_features: &[Tensor], global_features: &Tensor) -> Result<TokenSet> {
    let first = window_features.first().ok_or_else(|| {
        Error::InvalidParameter("assemble_token_set needs at least one window".into())
    })?;
    if first.rank() != 2 {
        return Err(Error::InvalidShape {
            shape: first.shape().to_vec(),
            reason: "window features must be [N, D]".into(),
        });
    }
    let d = first.shape()[1];
    let mut data = Vec::new();
    let mut origin = Vec::new();
    for (w, feats) in window_features.iter().enumerate() {
        if feats.rank() != 2 || feats.shape()[1] != d {
            return Err(Error::ShapeMismatch {
                op: "assemble_token_set",
                lhs: first.shape().to_vec(),
                rhs: feats.shape().to_vec(),
            });
        }
        data.extend_from_slice(feats.data());
        origin.extend((0..feats.shape()[0]).map(|index| TokenOrigin::Window {
            window_id: w,
            index,
        }));
    }
    if global_features.rank() != 2 || global_features.shape()[1] != d {
        return Err(Error::ShapeMismatch {
            op: "assemble_token_set",
            lhs: first.shape().to_vec(),
            rhs: global_features.shape().to_vec(),
        });
    }
    data.extend_from_slice(global_features.data());
    origin.extend((0..global_features.shape()[0]).map(|index| TokenOrigin::Global { index }));
    let l = origin.len();
    Ok(TokenSet {
        tokens: Tensor::new(vec![l, d], data)?,
        origin,
    })
}

/// Importance scores and the selected token indices of one filter pass.
#[derive(Debug, Clone)]
pub struct ImportanceRanking {
    /// `1 − max_{j≠i} cos(t_i, t_j)`, each in `[0, 2]`.
    pub importances: Vec<f64>,
    /// Exactly `r` unique indices, ascending.
    pub selected: Vec<usize>,
}

/// Scores every token by how far it sits from its nearest neighbor and
/// keeps the `r` most distinctive ones.
///
/// `importance_i = 1 − max_{j≠i} cos(t_i, t_j)`; the top `r` win, ties
/// break toward the lower original index, and the result is re-sorted into
/// ascending index order.
pub fn token_filter(tokens: &Tensor, r: usize) -> Result<ImportanceRanking> {
    if tokens.rank() != 2 {
        return Err(Error::InvalidShape {
            shape: tokens.shape().to_vec(),
            reason: "token_filter expects [L, D]".into(),
        });
    }
    let l = tokens.shape()[0];
    if l < 2 {
        return Err(Error::InvalidParameter(format!(
            "token_filter needs at least two tokens, got {l}"
        )));
    }
    if r == 0 || r > l {
        return Err(Error::InvalidParameter(format!(
            "token_filter r must satisfy 1 <= r <= {l}, got {r}"
        )));
    }
    let mut norms = Vec::with_capacity(l);
    for i in 0..l {
        let n = tokens.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::ZeroNormToken { index: i });
        }
        norms.push(n);
    }
    let mut max_sim = vec![f64::NEG_INFINITY; l];
    for i in 0..l {
        let ri = tokens.row(i);
        for j in i + 1..l {
            let dot: f64 = ri.iter().zip(tokens.row(j)).map(|(a, b)| a * b).sum();
            let cos = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            if cos > max_sim[i] {
                max_sim[i] = cos;
            }
            if cos > max_sim[j] {
                max_sim[j] = cos;
            }
        }
    }
    let importances: Vec<f64> = max_sim.iter().map(|&m| 1.0 - m).collect();
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| {
        importances[b]
            .partial_cmp(&importances[a])
            .expect("importances are finite")
            .then(a.cmp(&b))
    });
    let mut selected: Vec<usize> = order[..r].to_vec();
    selected.sort_unstable();
    Ok(ImportanceRanking {
        importances,
        selected,
    })
}

/// Single-head full-width projections of the token resampler.
#[derive(Debug, Clone)]
pub struct TokenResamplerWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

impl TokenResamplerWeights {
    pub fn validate(&self, d: usize) -> Result<()> {
        for (name, t) in [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv)] {
            if t.shape() != [d, d] {
                return Err(Error::Archive(format!(
                    "token resampler projection {name} has shape {:?}, expected [{d}, {d}]",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Compresses an assembled token set to its `r` most distinctive tokens,
/// re-aggregated over the full sequence.
///
/// The selected tokens (in original order) form the queries; keys and
/// values are all `L` tokens. Output is `r×D`.
pub fn token_resample(set: &TokenSet, r: usize, w: &TokenResamplerWeights) -> Result<Tensor> {
    let ranking = token_filter(&set.tokens, r)?;
    let d = set.width();
    w.validate(d)?;
    let mut q_rows = Vec::with_capacity(r * d);
    for &i in &ranking.selected {
        q_rows.extend_from_slice(set.tokens.row(i));
    }
    let q = matmul(&Tensor::new(vec![r, d], q_rows)?, &w.wq)?;
    let k = matmul(&set.tokens, &w.wk)?;
    let v = matmul(&set.tokens, &w.wv)?;
    let logits = matmul(&q, &k.transpose()?)?.scale(1.0 / (d as f64).sqrt());
    matmul(&softmax(&logits, None)?, &v)
}
