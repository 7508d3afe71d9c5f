//! Pipeline configuration: a flat `key=value` file format plus programmatic
//! overrides, with defaults matching the reference setup (896x896 input,
//! 64-wide toy encoder).
//!
//! Precedence is override > file > default: parse a file first, then apply
//! any individual `set` calls on top.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::split::{DEFAULT_MEAN, DEFAULT_STD, PATCH_GRID, WINDOW_SIDE};
use crate::swa::EncoderConfig;
use crate::resampler::RESAMPLED_TOKENS;

/// Everything the forward pass needs besides the image and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Target resolution (height, width); inputs are resized to this.
    pub resolution: (usize, usize),
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub d_model: usize,
    pub depth: usize,
    pub n_heads: usize,
    pub swa_interval: usize,
    pub shift_size: usize,
    pub window_patches: usize,
    /// Token budget after filtering; derived from resolution when unset.
    pub resampler_r: Option<usize>,
    pub seed: u64,
    /// Weight archive path; random initialization when unset.
    pub weights: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            resolution: (896, 896),
            mean: DEFAULT_MEAN,
            std: DEFAULT_STD,
            d_model: 64,
            depth: 2,
            n_heads: 4,
            swa_interval: 4,
            shift_size: PATCH_GRID / 2,
            window_patches: PATCH_GRID,
            resampler_r: None,
            seed: 0,
            weights: None,
        }
    }
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value.trim().parse().map_err(|_| Error::Config {
        key: key.into(),
        reason: format!("expected a non-negative integer, got {value:?}"),
    })
}

fn parse_triple(key: &str, value: &str) -> Result<[f64; 3]> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::Config {
            key: key.into(),
            reason: format!("expected three comma-separated numbers, got {value:?}"),
        });
    }
    let mut out = [0.0; 3];
    for (slot, part) in out.iter_mut().zip(&parts) {
        *slot = part.parse().map_err(|_| Error::Config {
            key: key.into(),
            reason: format!("expected a number, got {part:?}"),
        })?;
    }
    Ok(out)
}

impl PipelineConfig {
    /// Applies one `key=value` assignment. Unknown keys are rejected so
    /// typos fail loudly instead of silently keeping a default.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "resolution.h" => self.resolution.0 = parse_usize(key, value)?,
            "resolution.w" => self.resolution.1 = parse_usize(key, value)?,
            "normalize.mean" => self.mean = parse_triple(key, value)?,
            "normalize.std" => self.std = parse_triple(key, value)?,
            "d_model" => self.d_model = parse_usize(key, value)?,
            "depth" => self.depth = parse_usize(key, value)?,
            "n_heads" => self.n_heads = parse_usize(key, value)?,
            "swa_interval" => self.swa_interval = parse_usize(key, value)?,
            "shift_size" => self.shift_size = parse_usize(key, value)?,
            "window_patches" => self.window_patches = parse_usize(key, value)?,
            "token_resampler.r" => self.resampler_r = Some(parse_usize(key, value)?),
            "seed" => {
                self.seed = value.trim().parse().map_err(|_| Error::Config {
                    key: key.into(),
                    reason: format!("expected an unsigned integer, got {value:?}"),
                })?
            }
            "weights" => self.weights = Some(PathBuf::from(value.trim())),
            _ => {
                return Err(Error::Config {
                    key: key.into(),
                    reason: "unknown configuration key".into(),
                })
            }
        }
        Ok(())
    }

    /// Parses a flat config file: one `key=value` per line, `#` comments
    /// and blank lines ignored. Later assignments win.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config {
                    key: format!("line {}", line_no + 1),
                    reason: format!("expected key=value, got {line:?}"),
                });
            };
            cfg.set(key.trim(), value)?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Window tiling implied by the resolution.
    pub fn window_grid(&self) -> (usize, usize) {
        (self.resolution.0 / WINDOW_SIDE, self.resolution.1 / WINDOW_SIDE)
    }

    /// Assembled token count before filtering: one resampled set per
    /// window plus one for the global view.
    pub fn l_before(&self) -> usize {
        let (rows, cols) = self.window_grid();
        (rows * cols + 1) * RESAMPLED_TOKENS
    }

    /// Effective token budget: the configured value, or 1024 for inputs
    /// with a 1344-pixel side and 512 otherwise.
    pub fn effective_r(&self) -> usize {
        self.resampler_r.unwrap_or_else(|| {
            if self.resolution.0.max(self.resolution.1) >= 1344 {
                1024
            } else {
                512
            }
        })
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            depth: self.depth,
            d_model: self.d_model,
            n_heads: self.n_heads,
            swa_interval: self.swa_interval,
            shift_size: self.shift_size,
            window_patches: self.window_patches,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (key, dim) in [("resolution.h", self.resolution.0), ("resolution.w", self.resolution.1)] {
            if dim == 0 || dim % WINDOW_SIDE != 0 {
                return Err(Error::Config {
                    key: key.into(),
                    reason: format!("{dim} is not a positive multiple of {WINDOW_SIDE}"),
                });
            }
        }
        if self.std.iter().any(|&v| v <= 0.0) {
            return Err(Error::Config {
                key: "normalize.std".into(),
                reason: "standard deviations must be positive".into(),
            });
        }
        if self.d_model % 4 != 0 {
            return Err(Error::Config {
                key: "d_model".into(),
                reason: format!("{} is not divisible by 4 (2D position encoding)", self.d_model),
            });
        }
        // Patch grids are PATCH_GRID per image window; the attention window
        // side must tile them.
        if self.window_patches == 0 || PATCH_GRID % self.window_patches != 0 {
            return Err(Error::Config {
                key: "window_patches".into(),
                reason: format!("{} does not tile the {PATCH_GRID}-patch window grid", self.window_patches),
            });
        }
        self.encoder_config().validate()?;
        let r = self.effective_r();
        if r == 0 {
            return Err(Error::Config {
                key: "token_resampler.r".into(),
                reason: "token budget must be positive".into(),
            });
        }
        if r > self.l_before() {
            return Err(Error::Config {
                key: "token_resampler.r".into(),
                reason: format!("budget {r} exceeds the {} assembled tokens", self.l_before()),
            });
        }
        Ok(())
    }
}

/// Canonical serialization of the effective configuration, suitable for
/// writing back to a config file.
impl std::fmt::Display for PipelineConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "resolution.h={}", self.resolution.0)?;
        writeln!(f, "resolution.w={}", self.resolution.1)?;
        writeln!(f, "normalize.mean={},{},{}", self.mean[0], self.mean[1], self.mean[2])?;
        writeln!(f, "normalize.std={},{},{}", self.std[0], self.std[1], self.std[2])?;
        writeln!(f, "d_model={}", self.d_model)?;
        writeln!(f, "depth={}", self.depth)?;
        writeln!(f, "n_heads={}", self.n_heads)?;
        writeln!(f, "swa_interval={}", self.swa_interval)?;
        writeln!(f, "shift_size={}", self.shift_size)?;
        writeln!(f, "window_patches={}", self.window_patches)?;
        if let Some(r) = self.resampler_r {
            writeln!(f, "token_resampler.r={r}")?;
        }
        writeln!(f, "seed={}", self.seed)?;
        if let Some(w) = &self.weights {
            writeln!(f, "weights={}", w.display())?;
        }
        Ok(())
    }
}
