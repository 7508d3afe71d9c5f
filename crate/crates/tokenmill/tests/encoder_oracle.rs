//! Recomputes the windowed encoder with an independent plain-`Vec`
//! implementation and checks both paths agree on the same weights.
//!
//! The oracle below shares nothing with the library's tensor kernels: its
//! own layer norm, softmax, matrix products, shift bookkeeping, and region
//! masks, all written as straight nested loops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tokenmill::archive::Archive;
use tokenmill::config::PipelineConfig;
use tokenmill::swa::{encode, EncoderConfig};
use tokenmill::tensor::Tensor;
use tokenmill::weights::PipelineWeights;

type Mat = Vec<Vec<f64>>;

fn to_mat(t: &Tensor) -> Mat {
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    (0..rows)
        .map(|r| t.data()[r * cols..(r + 1) * cols].to_vec())
        .collect()
}

fn matmul_mat(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for p in 0..k {
            let av = a[i][p];
            for j in 0..m {
                out[i][j] += av * b[p][j];
            }
        }
    }
    out
}

fn layer_norm_row(row: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let denom = (var + eps).sqrt();
    row.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(v, (g, b))| g * (v - mean) / denom + b)
        .collect()
}

fn softmax_masked(logits: &[f64], allowed: &[bool]) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(allowed)
        .filter(|(_, &a)| a)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .zip(allowed)
        .map(|(&l, &a)| if a { (l - max).exp() } else { 0.0 })
        .collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn gelu_ref(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

/// Canvas band of a coordinate: interior, last full stripe before the
/// shift margin, or the wrapped margin itself.
fn band(coord: usize, n: usize, ws: usize, shift: usize) -> usize {
    if coord < n - ws {
        0
    } else if coord < n - shift {
        1
    } else {
        2
    }
}

struct OracleWeights {
    norm1_gamma: Vec<f64>,
    norm1_beta: Vec<f64>,
    wq: Mat,
    wk: Mat,
    wv: Mat,
    wo: Mat,
    norm2_gamma: Vec<f64>,
    norm2_beta: Vec<f64>,
    w1: Mat,
    w2: Mat,
    adapter: Option<(Mat, Mat)>,
}

/// One full encoder block on an `hp x wp` grid of `d`-wide tokens stored
/// row-major as a matrix.
#[allow(clippy::too_many_arguments)]
fn oracle_block(
    x0: &Mat,
    hp: usize,
    wp: usize,
    d: usize,
    n_heads: usize,
    ws: usize,
    shift: usize,
    w: &OracleWeights,
) -> Mat {
    let eps = 1e-5;
    // Pre-norm, then cyclic shift toward the top-left.
    let normed: Mat = x0
        .iter()
        .map(|row| layer_norm_row(row, &w.norm1_gamma, &w.norm1_beta, eps))
        .collect();
    let mut shifted = vec![vec![0.0; d]; hp * wp];
    for i in 0..hp {
        for j in 0..wp {
            shifted[i * wp + j] = normed[((i + shift) % hp) * wp + (j + shift) % wp].clone();
        }
    }
    // Windowed multi-head attention with the region mask.
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut attended = vec![vec![0.0; d]; hp * wp];
    for wr in 0..hp / ws {
        for wc in 0..wp / ws {
            let mut idx = Vec::with_capacity(ws * ws);
            for py in 0..ws {
                for px in 0..ws {
                    idx.push((wr * ws + py) * wp + wc * ws + px);
                }
            }
            let window: Mat = idx.iter().map(|&i| shifted[i].clone()).collect();
            let q = matmul_mat(&window, &w.wq);
            let k = matmul_mat(&window, &w.wk);
            let v = matmul_mat(&window, &w.wv);
            // Two positions may attend iff they share a canvas region.
            let labels: Vec<usize> = idx
                .iter()
                .map(|&i| {
                    let (gy, gx) = (i / wp, i % wp);
                    if shift == 0 {
                        0
                    } else {
                        band(gy, hp, ws, shift) * 3 + band(gx, wp, ws, shift)
                    }
                })
                .collect();
            let t = idx.len();
            let mut merged = vec![vec![0.0; d]; t];
            for h in 0..n_heads {
                let cols = h * dh..(h + 1) * dh;
                for qi in 0..t {
                    let mut logits = vec![0.0; t];
                    for ki in 0..t {
                        let dot: f64 = cols
                            .clone()
                            .map(|c| q[qi][c] * k[ki][c])
                            .sum();
                        logits[ki] = dot * scale;
                    }
                    let allowed: Vec<bool> = (0..t).map(|ki| labels[qi] == labels[ki]).collect();
                    let weights = softmax_masked(&logits, &allowed);
                    for (ki, &wgt) in weights.iter().enumerate() {
                        for c in cols.clone() {
                            merged[qi][c] += wgt * v[ki][c];
                        }
                    }
                }
            }
            let projected = matmul_mat(&merged, &w.wo);
            for (slot, row) in idx.iter().zip(projected) {
                attended[*slot] = row;
            }
        }
    }
    // Shift back and add the residual.
    let mut x1 = vec![vec![0.0; d]; hp * wp];
    for i in 0..hp {
        for j in 0..wp {
            let src = &attended[((i + hp - shift) % hp) * wp + (j + wp - shift) % wp];
            for c in 0..d {
                x1[i * wp + j][c] = x0[i * wp + j][c] + src[c];
            }
        }
    }
    // MLP with its own pre-norm.
    let normed2: Mat = x1
        .iter()
        .map(|row| layer_norm_row(row, &w.norm2_gamma, &w.norm2_beta, eps))
        .collect();
    let mut hidden = matmul_mat(&normed2, &w.w1);
    for row in &mut hidden {
        for v in row.iter_mut() {
            *v = gelu_ref(*v);
        }
    }
    let mlp_out = matmul_mat(&hidden, &w.w2);
    let mut x2 = x1.clone();
    for (row, add) in x2.iter_mut().zip(&mlp_out) {
        for (a, b) in row.iter_mut().zip(add) {
            *a += b;
        }
    }
    // Adapter branch on shifted blocks.
    if let Some((a, b)) = &w.adapter {
        let branch = matmul_mat(&matmul_mat(&x2, a), b);
        for (row, add) in x2.iter_mut().zip(&branch) {
            for (v, extra) in row.iter_mut().zip(add) {
                *v += extra;
            }
        }
    }
    x2
}

fn vec_of(t: &Tensor) -> Vec<f64> {
    t.data().to_vec()
}

fn oracle_encode(archive: &Archive, cfg: &EncoderConfig, grid: &Mat, hp: usize, wp: usize) -> Mat {
    let mut x = grid.clone();
    for i in 0..cfg.depth {
        let p = |s: &str| format!("block{i}.{s}");
        let get = |name: String| to_mat(archive.get(&name).unwrap());
        let shift = if cfg.is_shifted_block(i) { cfg.shift_size } else { 0 };
        let weights = OracleWeights {
            norm1_gamma: vec_of(archive.get(&p("attn.norm_gamma")).unwrap()),
            norm1_beta: vec_of(archive.get(&p("attn.norm_beta")).unwrap()),
            wq: get(p("attn.wq")),
            wk: get(p("attn.wk")),
            wv: get(p("attn.wv")),
            wo: get(p("attn.wo")),
            norm2_gamma: vec_of(archive.get(&p("mlp.norm_gamma")).unwrap()),
            norm2_beta: vec_of(archive.get(&p("mlp.norm_beta")).unwrap()),
            w1: get(p("mlp.w1")),
            w2: get(p("mlp.w2")),
            adapter: cfg
                .is_shifted_block(i)
                .then(|| (get(p("adapter.a")), get(p("adapter.b")))),
        };
        x = oracle_block(&x, hp, wp, cfg.d_model, cfg.n_heads, cfg.window_patches, shift, &weights);
    }
    x
}

/// Random weights with nonzero adapters so the adapter path is exercised.
fn weights_with_live_adapters(cfg: &PipelineConfig, seed: u64) -> (PipelineWeights, Archive) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut weights = PipelineWeights::random(cfg, seed).unwrap();
    for block in &mut weights.encoder.blocks {
        if let Some(adapter) = &mut block.adapter {
            let data: Vec<f64> = (0..adapter.b.numel()).map(|_| rng.gen_range(-0.1..0.1)).collect();
            adapter.b = Tensor::new(adapter.b.shape().to_vec(), data).unwrap();
        }
    }
    let archive = weights.to_archive(cfg).unwrap();
    (weights, archive)
}

#[test]
fn encoder_matches_plain_vec_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    // Small grid, multiple windows, shifted blocks with live adapters.
    let mut cfg = PipelineConfig::default();
    cfg.d_model = 8;
    cfg.depth = 4;
    cfg.n_heads = 2;
    cfg.swa_interval = 2;
    cfg.shift_size = 1;
    cfg.window_patches = 2;
    let enc_cfg = cfg.encoder_config();
    enc_cfg.validate().unwrap();

    let (weights, archive) = weights_with_live_adapters(&cfg, 17);
    let (hp, wp) = (4, 6);
    let grid_data: Vec<f64> = (0..hp * wp * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let grid = Tensor::new(vec![hp, wp, 8], grid_data).unwrap();

    let fast = encode(&grid, &enc_cfg, &weights.encoder).unwrap();

    let grid_mat: Mat = (0..hp * wp)
        .map(|i| grid.data()[i * 8..(i + 1) * 8].to_vec())
        .collect();
    let slow = oracle_encode(&archive, &enc_cfg, &grid_mat, hp, wp);

    let mut worst: f64 = 0.0;
    for i in 0..hp * wp {
        for c in 0..8 {
            let diff = (fast.data()[i * 8 + c] - slow[i][c]).abs();
            worst = worst.max(diff);
        }
    }
    assert!(worst < 1e-9, "max deviation {worst}");
}

#[test]
fn encoder_oracle_agrees_on_unshifted_stack() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut cfg = PipelineConfig::default();
    cfg.d_model = 4;
    cfg.depth = 2;
    cfg.n_heads = 1;
    cfg.swa_interval = 100; // never shifts
    cfg.shift_size = 1;
    cfg.window_patches = 2;
    let enc_cfg = cfg.encoder_config();

    let (weights, archive) = weights_with_live_adapters(&cfg, 3);
    let (hp, wp) = (2, 4);
    let grid_data: Vec<f64> = (0..hp * wp * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let grid = Tensor::new(vec![hp, wp, 4], grid_data).unwrap();

    let fast = encode(&grid, &enc_cfg, &weights.encoder).unwrap();
    let grid_mat: Mat = (0..hp * wp)
        .map(|i| grid.data()[i * 4..(i + 1) * 4].to_vec())
        .collect();
    let slow = oracle_encode(&archive, &enc_cfg, &grid_mat, hp, wp);

    for i in 0..hp * wp {
        for c in 0..4 {
            assert!((fast.data()[i * 4 + c] - slow[i][c]).abs() < 1e-9);
        }
    }
}
