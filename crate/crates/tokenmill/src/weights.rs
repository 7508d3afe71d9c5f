//! Typed weight bundle for the full pipeline, stored in the named-tensor
//! archive under a fixed naming scheme:
//!
//! - `patch_embed.proj` — patch projection `[588, d]`
//! - `block{i}.attn.{norm_gamma,norm_beta,wq,wk,wv,wo}`
//! - `block{i}.mlp.{norm_gamma,norm_beta,w1,w2}`
//! - `block{i}.adapter.{a,b}` — shifted blocks only
//! - `resampler.image.{queries,wq,wk,wv}`
//! - `resampler.token.{wq,wk,wv}`
//!
//! Random initialization is fully seeded and generates tensors in the
//! canonical order above, so one seed always produces one archive.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::archive::Archive;
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::resampler::{ImageResamplerWeights, TokenResamplerWeights, RESAMPLED_TOKENS};
use crate::split::PATCH_DIM;
use crate::swa::{AdapterWeights, AttnProjections, BlockWeights, EncoderWeights};
use crate::tensor::Tensor;

/// Standard deviation of random initialization for projection weights.
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct PipelineWeights {
    pub patch_proj: Tensor,
    pub encoder: EncoderWeights,
    pub image_resampler: ImageResamplerWeights,
    pub token_resampler: TokenResamplerWeights,
}

/// How one named tensor is initialized when drawing random weights.
enum Init {
    /// Normal(0, 0.02) draws.
    Random,
    /// All ones (layer-norm gains).
    Ones,
    /// All zeros (layer-norm offsets and adapter output projections).
    Zeros,
}

/// Canonical tensor list for a configuration: name, shape, and init rule,
/// in serialization order.
fn tensor_plan(cfg: &PipelineConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_model;
    let enc = cfg.encoder_config();
    let mut plan = vec![("patch_embed.proj".to_string(), vec![PATCH_DIM, d], Init::Random)];
    for i in 0..cfg.depth {
        let p = |suffix: &str| format!("block{i}.{suffix}");
        plan.push((p("attn.norm_gamma"), vec![d], Init::Ones));
        plan.push((p("attn.norm_beta"), vec![d], Init::Zeros));
        for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
            plan.push((p(w), vec![d, d], Init::Random));
        }
        plan.push((p("mlp.norm_gamma"), vec![d], Init::Ones));
        plan.push((p("mlp.norm_beta"), vec![d], Init::Zeros));
        plan.push((p("mlp.w1"), vec![d, 4 * d], Init::Random));
        plan.push((p("mlp.w2"), vec![4 * d, d], Init::Random));
        if enc.is_shifted_block(i) {
            plan.push((p("adapter.a"), vec![d, enc.d_adapter()], Init::Random));
            plan.push((p("adapter.b"), vec![enc.d_adapter(), d], Init::Zeros));
        }
    }
    plan.push(("resampler.image.queries".into(), vec![RESAMPLED_TOKENS, d], Init::Random));
    for w in ["wq", "wk", "wv"] {
        plan.push((format!("resampler.image.{w}"), vec![d, d], Init::Random));
    }
    for w in ["wq", "wk", "wv"] {
        plan.push((format!("resampler.token.{w}"), vec![d, d], Init::Random));
    }
    plan
}

impl PipelineWeights {
    /// Draws a fresh weight set; the same seed and configuration always
    /// produce the same tensors.
    pub fn random(cfg: &PipelineConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).map_err(|e| Error::Internal(e.to_string()))?;
        let mut archive = Archive::new();
        for (name, shape, init) in tensor_plan(cfg) {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Random => (0..n).map(|_| normal.sample(&mut rng)).collect(),
                Init::Ones => vec![1.0; n],
                Init::Zeros => vec![0.0; n],
            };
            archive.insert(&name, Tensor::new(shape, data)?)?;
        }
        Self::from_archive(&archive, cfg)
    }

    /// Assembles typed weights from a named-tensor archive, checking every
    /// shape against the configuration.
    pub fn from_archive(archive: &Archive, cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let enc = cfg.encoder_config();
        let grab = |name: &str, shape: &[usize]| archive.get_with_shape(name, shape).cloned();
        let d = cfg.d_model;
        let patch_proj = grab("patch_embed.proj", &[PATCH_DIM, d])?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let p = |suffix: &str| format!("block{i}.{suffix}");
            let adapter = if enc.is_shifted_block(i) {
                Some(AdapterWeights::new(
                    grab(&p("adapter.a"), &[d, enc.d_adapter()])?,
                    grab(&p("adapter.b"), &[enc.d_adapter(), d])?,
                )?)
            } else {
                None
            };
            blocks.push(BlockWeights {
                norm1_gamma: grab(&p("attn.norm_gamma"), &[d])?,
                norm1_beta: grab(&p("attn.norm_beta"), &[d])?,
                attn: AttnProjections {
                    wq: grab(&p("attn.wq"), &[d, d])?,
                    wk: grab(&p("attn.wk"), &[d, d])?,
                    wv: grab(&p("attn.wv"), &[d, d])?,
                    wo: grab(&p("attn.wo"), &[d, d])?,
                    n_heads: cfg.n_heads,
                },
                norm2_gamma: grab(&p("mlp.norm_gamma"), &[d])?,
                norm2_beta: grab(&p("mlp.norm_beta"), &[d])?,
                mlp_w1: grab(&p("mlp.w1"), &[d, 4 * d])?,
                mlp_w2: grab(&p("mlp.w2"), &[4 * d, d])?,
                adapter,
            });
        }
        let image_resampler = ImageResamplerWeights {
            queries: grab("resampler.image.queries", &[RESAMPLED_TOKENS, d])?,
            wq: grab("resampler.image.wq", &[d, d])?,
            wk: grab("resampler.image.wk", &[d, d])?,
            wv: grab("resampler.image.wv", &[d, d])?,
        };
        let token_resampler = TokenResamplerWeights {
            wq: grab("resampler.token.wq", &[d, d])?,
            wk: grab("resampler.token.wk", &[d, d])?,
            wv: grab("resampler.token.wv", &[d, d])?,
        };
        Ok(Self {
            patch_proj,
            encoder: EncoderWeights { blocks },
            image_resampler,
            token_resampler,
        })
    }

    /// Serializes back to an archive in canonical order, so equal weights
    /// produce byte-identical files.
    pub fn to_archive(&self, cfg: &PipelineConfig) -> Result<Archive> {
        let enc = cfg.encoder_config();
        let mut archive = Archive::new();
        archive.insert("patch_embed.proj", self.patch_proj.clone())?;
        if self.encoder.blocks.len() != cfg.depth {
            return Err(Error::Config {
                key: "depth".into(),
                reason: format!(
                    "config depth {} but {} blocks",
                    cfg.depth,
                    self.encoder.blocks.len()
                ),
            });
        }
        for (i, block) in self.encoder.blocks.iter().enumerate() {
            let p = |suffix: &str| format!("block{i}.{suffix}");
            archive.insert(&p("attn.norm_gamma"), block.norm1_gamma.clone())?;
            archive.insert(&p("attn.norm_beta"), block.norm1_beta.clone())?;
            archive.insert(&p("attn.wq"), block.attn.wq.clone())?;
            archive.insert(&p("attn.wk"), block.attn.wk.clone())?;
            archive.insert(&p("attn.wv"), block.attn.wv.clone())?;
            archive.insert(&p("attn.wo"), block.attn.wo.clone())?;
            archive.insert(&p("mlp.norm_gamma"), block.norm2_gamma.clone())?;
            archive.insert(&p("mlp.norm_beta"), block.norm2_beta.clone())?;
            archive.insert(&p("mlp.w1"), block.mlp_w1.clone())?;
            archive.insert(&p("mlp.w2"), block.mlp_w2.clone())?;
            match (&block.adapter, enc.is_shifted_block(i)) {
                (Some(adapter), true) => {
                    archive.insert(&p("adapter.a"), adapter.a.clone())?;
                    archive.insert(&p("adapter.b"), adapter.b.clone())?;
                }
                (None, false) => {}
                (Some(_), false) | (None, true) => {
                    return Err(Error::Config {
                        key: "swa_interval".into(),
                        reason: format!("block {i} adapter presence disagrees with the shift schedule"),
                    });
                }
            }
        }
        archive.insert("resampler.image.queries", self.image_resampler.queries.clone())?;
        archive.insert("resampler.image.wq", self.image_resampler.wq.clone())?;
        archive.insert("resampler.image.wk", self.image_resampler.wk.clone())?;
        archive.insert("resampler.image.wv", self.image_resampler.wv.clone())?;
        archive.insert("resampler.token.wq", self.token_resampler.wq.clone())?;
        archive.insert("resampler.token.wk", self.token_resampler.wk.clone())?;
        archive.insert("resampler.token.wv", self.token_resampler.wv.clone())?;
        Ok(archive)
    }

    pub fn load(path: &Path, cfg: &PipelineConfig) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?, cfg)
    }

    pub fn save(&self, path: &Path, cfg: &PipelineConfig) -> Result<()> {
        self.to_archive(cfg)?.save(path)
    }
}
