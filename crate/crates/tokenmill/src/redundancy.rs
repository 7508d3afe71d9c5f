//! Token-redundancy analysis: pairwise similarity snapshots and threshold
//! sweeps over a token sequence.
//!
//! A token counts as redundant at threshold `t` when its maximum cosine
//! similarity to any other token is at least `t` (inclusive comparison).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{cosine_similarity, Tensor};

/// Result of a threshold sweep over one token set.
#[derive(Debug, Clone)]
pub struct RedundancyReport {
    pub resolution_label: String,
    /// Token count the sweep ran over.
    pub l: usize,
    pub thresholds: Vec<f64>,
    /// `redundant_counts[k]` = number of tokens whose max similarity is at
    /// least `thresholds[k]`; non-increasing in `k`.
    pub redundant_counts: Vec<usize>,
    /// Per-token maximum cosine similarity to any other token.
    pub max_similarities: Vec<f64>,
}

/// Default threshold grid: 0.50 to 0.95 in steps of 0.05.
pub fn default_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.50 + 0.05 * i as f64).collect()
}

/// Pairwise cosine similarities of `sample` tokens (all of them when
/// `None`), drawn without replacement with the seeded generator and kept in
/// original order. The diagonal is exactly 1.
pub fn similarity_matrix(tokens: &Tensor, sample: Option<usize>, seed: u64) -> Result<Tensor> {
    if tokens.rank() != 2 {
        return Err(Error::InvalidShape {
            shape: tokens.shape().to_vec(),
            reason: "similarity_matrix expects [L, D]".into(),
        });
    }
    let l = tokens.shape()[0];
    let s = sample.unwrap_or(l);
    if s == 0 || s > l {
        return Err(Error::InvalidParameter(format!(
            "sample size must satisfy 1 <= S <= {l}, got {s}"
        )));
    }
    let mut indices: Vec<usize> = if s == l {
        (0..l).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::index::sample(&mut rng, l, s).into_vec()
    };
    indices.sort_unstable();
    let mut out = vec![0.0; s * s];
    for (a, &i) in indices.iter().enumerate() {
        out[a * s + a] = 1.0;
        for (b, &j) in indices.iter().enumerate().skip(a + 1) {
            let c = cosine_similarity(tokens.row(i), tokens.row(j)).map_err(|e| match e {
                Error::ZeroNormToken { index } => Error::ZeroNormToken {
                    index: if index == 0 { i } else { j },
                },
                other => other,
            })?;
            out[a * s + b] = c;
            out[b * s + a] = c;
        }
    }
    Tensor::new(vec![s, s], out)
}

/// Computes per-token max similarity and redundant-token counts for an
/// ascending threshold grid in `(0, 1]`.
pub fn redundancy_sweep(
    tokens: &Tensor,
    thresholds: &[f64],
    resolution_label: &str,
) -> Result<RedundancyReport> {
    if tokens.rank() != 2 || tokens.shape()[0] < 2 {
        return Err(Error::InvalidParameter(
            "redundancy sweep needs at least two tokens".into(),
        ));
    }
    for pair in thresholds.windows(2) {
        if pair[0] > pair[1] {
            return Err(Error::InvalidParameter(format!(
                "thresholds must be ascending, got {} before {}",
                pair[0], pair[1]
            )));
        }
    }
    if let Some(bad) = thresholds.iter().find(|&&t| !(t > 0.0 && t <= 1.0)) {
        return Err(Error::InvalidParameter(format!(
            "thresholds must lie in (0, 1], got {bad}"
        )));
    }
    let l = tokens.shape()[0];
    let mut norms = Vec::with_capacity(l);
    for i in 0..l {
        let n = tokens.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::ZeroNormToken { index: i });
        }
        norms.push(n);
    }
    let mut max_similarities = vec![f64::NEG_INFINITY; l];
    for i in 0..l {
        let ri = tokens.row(i);
        for j in i + 1..l {
            let dot: f64 = ri.iter().zip(tokens.row(j)).map(|(a, b)| a * b).sum();
            let c = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            if c > max_similarities[i] {
                max_similarities[i] = c;
            }
            if c > max_similarities[j] {
                max_similarities[j] = c;
            }
        }
    }
    let redundant_counts = thresholds
        .iter()
        .map(|&t| max_similarities.iter().filter(|&&m| m >= t).count())
        .collect();
    Ok(RedundancyReport {
        resolution_label: resolution_label.to_string(),
        l,
        thresholds: thresholds.to_vec(),
        redundant_counts,
        max_similarities,
    })
}

/// Serializes a report as `threshold,count,fraction` rows, re-checking the
/// monotonicity invariant before anything is written.
pub fn write_report(report: &RedundancyReport, mut w: impl Write) -> Result<()> {
    for pair in report.redundant_counts.windows(2) {
        if pair[0] < pair[1] {
            return Err(Error::Internal(format!(
                "redundant counts increased with threshold: {} then {}",
                pair[0], pair[1]
            )));
        }
    }
    if report.thresholds.len() != report.redundant_counts.len() {
        return Err(Error::Internal(
            "threshold and count arrays differ in length".into(),
        ));
    }
    writeln!(w, "threshold,count,fraction")?;
    for (&t, &count) in report.thresholds.iter().zip(&report.redundant_counts) {
        let fraction = count as f64 / report.l as f64;
        writeln!(w, "{t:.4},{count},{fraction:.4}")?;
    }
    Ok(())
}

/// [`write_report`] to a file path.
pub fn emit_report(report: &RedundancyReport, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_report(report, &mut w)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tokens(rng: &mut ChaCha8Rng, l: usize, d: usize) -> Tensor {
        Tensor::new(
            vec![l, d],
            (0..l * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_sample_matrix() {
        let tokens = Tensor::from_rows(&[vec![3.0, 4.0], vec![1.0, 0.0]]);
        let m = similarity_matrix(&tokens, Some(1), 0).unwrap();
        assert_eq!(m.shape(), &[1, 1]);
        assert_eq!(m.data()[0], 1.0);
    }

    #[test]
    fn orthonormal_tokens_give_identity() {
        let m = similarity_matrix(&Tensor::eye(4), None, 0).unwrap();
        assert_eq!(m, Tensor::eye(4));
    }

    #[test]
    fn three_token_hand_matrix() {
        let tokens = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let m = similarity_matrix(&tokens, None, 0).unwrap();
        assert!((m.at(&[0, 1]) - 0.0).abs() < 1e-4);
        assert!((m.at(&[0, 2]) - 0.7071).abs() < 1e-4);
        assert!((m.at(&[1, 2]) - 0.7071).abs() < 1e-4);
        for i in 0..3 {
            assert_eq!(m.at(&[i, i]), 1.0);
        }
    }

    #[test]
    fn sampling_is_seeded_and_order_preserving() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tokens = random_tokens(&mut rng, 30, 5);
        let a = similarity_matrix(&tokens, Some(10), 99).unwrap();
        let b = similarity_matrix(&tokens, Some(10), 99).unwrap();
        assert_eq!(a, b, "same seed must reproduce bit-for-bit");
        let c = similarity_matrix(&tokens, Some(10), 100).unwrap();
        assert_ne!(a, c, "different seeds should (here) pick different rows");
        // Symmetry and unit diagonal hold regardless.
        for i in 0..10 {
            assert_eq!(a.at(&[i, i]), 1.0);
            for j in 0..10 {
                assert_eq!(a.at(&[i, j]), a.at(&[j, i]));
            }
        }
    }

    #[test]
    fn zero_norm_token_named_by_original_index() {
        let tokens = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0], vec![0.0, 1.0]]);
        let err = similarity_matrix(&tokens, None, 0).unwrap_err();
        assert!(matches!(err, Error::ZeroNormToken { index: 1 }));
    }

    #[test]
    fn identical_tokens_all_redundant_below_one() {
        let tokens = Tensor::new(vec![5, 3], vec![0.2; 15]).unwrap();
        let report = redundancy_sweep(&tokens, &[0.5, 0.8, 0.99], "test").unwrap();
        assert_eq!(report.redundant_counts, vec![5, 5, 5]);
    }

    #[test]
    fn orthogonal_tokens_not_redundant() {
        let report = redundancy_sweep(&Tensor::eye(4), &[0.8], "test").unwrap();
        assert_eq!(report.redundant_counts, vec![0]);
    }

    #[test]
    fn hand_case_two_of_three() {
        let tokens = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
        let report = redundancy_sweep(&tokens, &[0.8], "test").unwrap();
        assert_eq!(report.redundant_counts, vec![2]);
        assert_eq!(report.max_similarities[0], 1.0);
        assert_eq!(report.max_similarities[1], 1.0);
        assert!(report.max_similarities[2] < 0.8);
    }

    #[test]
    fn counts_non_increasing_and_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let thresholds = default_thresholds();
        for _ in 0..30 {
            let l = rng.gen_range(2..40);
            let d = rng.gen_range(1..8);
            let tokens = random_tokens(&mut rng, l, d);
            let report = redundancy_sweep(&tokens, &thresholds, "fuzz").unwrap();
            for pair in report.redundant_counts.windows(2) {
                assert!(pair[0] >= pair[1]);
            }
            // Independent double-loop recount.
            for (k, &t) in thresholds.iter().enumerate() {
                let mut count = 0;
                for i in 0..l {
                    let mut max_sim = f64::NEG_INFINITY;
                    for j in 0..l {
                        if i != j {
                            max_sim = max_sim
                                .max(cosine_similarity(tokens.row(i), tokens.row(j)).unwrap());
                        }
                    }
                    if max_sim >= t {
                        count += 1;
                    }
                }
                assert_eq!(report.redundant_counts[k], count);
            }
        }
    }

    #[test]
    fn appending_duplicate_raises_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let thresholds = [0.5, 0.8, 0.95];
        for _ in 0..20 {
            let l = rng.gen_range(2..15);
            let d = rng.gen_range(2..6);
            let tokens = random_tokens(&mut rng, l, d);
            let base = redundancy_sweep(&tokens, &thresholds, "base").unwrap();
            let dup_of = rng.gen_range(0..l);
            let mut data = tokens.data().to_vec();
            data.extend_from_slice(tokens.row(dup_of));
            let extended = Tensor::new(vec![l + 1, d], data).unwrap();
            let after = redundancy_sweep(&extended, &thresholds, "dup").unwrap();
            // Both twins are maximally similar to each other now (within an
            // ulp of 1; exact-duplicate dot products round below 1.0).
            assert!(after.max_similarities[dup_of] > 1.0 - 1e-12);
            assert!(after.max_similarities[l] > 1.0 - 1e-12);
            for (k, &t) in thresholds.iter().enumerate() {
                let was_counted = base.max_similarities[dup_of] >= t;
                let expected_gain = if was_counted { 1 } else { 2 };
                assert!(
                    after.redundant_counts[k] >= base.redundant_counts[k] + expected_gain,
                    "threshold {t}: {} -> {}",
                    base.redundant_counts[k],
                    after.redundant_counts[k]
                );
            }
        }
    }

    #[test]
    fn sweep_rejects_bad_thresholds() {
        let tokens = Tensor::eye(3);
        assert!(redundancy_sweep(&tokens, &[0.8, 0.5], "x").is_err());
        assert!(redundancy_sweep(&tokens, &[0.0], "x").is_err());
        assert!(redundancy_sweep(&tokens, &[1.1], "x").is_err());
    }

    #[test]
    fn sweep_rejects_single_token() {
        let tokens = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let err = redundancy_sweep(&tokens, &[0.8], "x").unwrap_err();
        assert!(err.to_string().contains("at least two tokens"));
    }

    #[test]
    fn report_formatting() {
        let tokens = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
        let report = redundancy_sweep(&tokens, &[0.8], "896").unwrap();
        let mut buf = Vec::new();
        write_report(&report, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "threshold,count,fraction\n0.8000,2,0.6667\n");
    }

    #[test]
    fn empty_threshold_report_is_header_only() {
        let tokens = Tensor::eye(2);
        let report = redundancy_sweep(&tokens, &[], "x").unwrap();
        let mut buf = Vec::new();
        write_report(&report, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "threshold,count,fraction\n");
    }

    #[test]
    fn write_rechecks_monotonicity() {
        let report = RedundancyReport {
            resolution_label: "broken".into(),
            l: 4,
            thresholds: vec![0.5, 0.8],
            redundant_counts: vec![1, 3],
            max_similarities: vec![0.0; 4],
        };
        let err = write_report(&report, Vec::new()).unwrap_err();
        assert!(matches!(err, Error::Internal(_)));
    }

    #[test]
    fn emit_report_writes_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        let tokens = Tensor::eye(3);
        let report = redundancy_sweep(&tokens, &[0.5], "eye").unwrap();
        emit_report(&report, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("threshold,count,fraction\n"));
        assert!(text.contains("0.5000,0,0.0000"));
    }
}
