//! `tokenmill`: command-line driver for the window-split vision front-end.
//!
//! Subcommands cover the full forward pass, redundancy reports, token
//! filtering, OCR metric evaluation, prompt templates, grounded-markup
//! round-trips, and directional-derivative probes of the numeric kernels.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use tokenmill::archive::Archive;
use tokenmill::config::PipelineConfig;
use tokenmill::grounding::{build_prompt, parse_grounded, serialize_grounded, NormalizedBox, PromptTask};
use tokenmill::image::RawImage;
use tokenmill::metrics::{
    anls, contains_accuracy, entity_f1, relaxed_accuracy, EvalRecord, GtWord, SpottingInstance,
};
use tokenmill::pipeline::{forward, ForwardOutput};
use tokenmill::redundancy::{default_thresholds, redundancy_sweep, write_report};
use tokenmill::resampler::token_filter;
use tokenmill::tensor::{directional_derivative_check, softmax, Tensor};
use tokenmill::weights::PipelineWeights;

#[derive(Parser)]
#[command(name = "tokenmill", version, about = "Window-split vision front-end")]
struct Cli {
    /// Flat key=value config file; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key (repeatable), e.g. --set resolution.h=1344.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,

    /// Seed override; falls back to the TM_SEED env var, then the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for per-window work; results are identical for any
    /// thread count.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct WeightsArgs {
    /// Weight archive path (overrides the config `weights` key).
    #[arg(long)]
    weights: Option<PathBuf>,

    /// Draw seeded random weights instead of loading an archive.
    #[arg(long)]
    random_init: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the forward pass on an image and report token counts.
    Forward {
        /// Input image (PPM or PNG); resized to the configured resolution.
        #[arg(long)]
        image: PathBuf,
        #[command(flatten)]
        weights: WeightsArgs,
        /// Write tokens (and pre-filter state) to a tensor archive.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Sweep redundancy thresholds over a token dump or a fresh forward pass.
    Redundancy {
        /// Tensor archive holding a `token_set` (or `tokens`) tensor.
        #[arg(long, conflicts_with = "image")]
        dump: Option<PathBuf>,
        /// Compute tokens by running the forward pass on this image.
        #[arg(long)]
        image: Option<PathBuf>,
        #[command(flatten)]
        weights: WeightsArgs,
        /// Comma-separated ascending thresholds in (0, 1]; default 0.50..0.95.
        #[arg(long)]
        thresholds: Option<String>,
        /// Label recorded in the report; defaults to the token source.
        #[arg(long)]
        label: Option<String>,
        /// CSV output path; omitted means the full CSV goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank tokens by distinctiveness and keep the top r.
    Filter {
        /// Tensor archive holding a `token_set` (or `tokens`) tensor.
        #[arg(long)]
        dump: PathBuf,
        /// Number of tokens to keep.
        #[arg(long)]
        r: usize,
        /// Write the kept rows to a tensor archive.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predictions against ground truths with a named metric.
    Eval {
        /// Metric: contains, anls, relaxed, f1, trans, or pos.
        #[arg(long)]
        metric: String,
        /// JSONL of {"id", "prediction"}.
        #[arg(long)]
        predictions: PathBuf,
        /// JSONL of {"id", "ground_truths", "boxes"?, "numeric"?}.
        #[arg(long)]
        gt: PathBuf,
        /// Print each imperfect record.
        #[arg(long)]
        verbose: bool,
    },
    /// Print the instruction template for a task.
    Prompt {
        /// Task name: read-all, text-spotting, original-task,
        /// position-of-text, text-recognition, or vqa-grounding.
        task: String,
        /// Question text for tasks that embed one.
        question: Option<String>,
    },
    /// Parse a file of grounded markup lines and re-serialize them,
    /// verifying the round trip is exact.
    Markup {
        /// File with one grounded string per line.
        file: PathBuf,
    },
    /// Compare analytic directional derivatives of the numeric kernels
    /// against central differences.
    Gradcheck {
        /// Central-difference step size.
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        /// Maximum accepted relative error.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

fn main() -> Result<()> {
    // Rust ignores SIGPIPE, turning `tokenmill ... | head` into a panic;
    // restore the default so a closed pipe ends the process quietly.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
        .context("initializing the thread pool")?;
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Forward { image, weights, dump } => cmd_forward(&cfg, image, weights, dump.as_deref()),
        Command::Redundancy { dump, image, weights, thresholds, label, out } => cmd_redundancy(
            &cfg,
            dump.as_deref(),
            image.as_deref(),
            weights,
            thresholds.as_deref(),
            label.as_deref(),
            out.as_deref(),
        ),
        Command::Filter { dump, r, out } => cmd_filter(dump, *r, out.as_deref()),
        Command::Eval { metric, predictions, gt, verbose } => cmd_eval(metric, predictions, gt, *verbose),
        Command::Prompt { task, question } => cmd_prompt(task, question.as_deref()),
        Command::Markup { file } => cmd_markup(file),
        Command::Gradcheck { step, tol } => cmd_gradcheck(cfg.seed, *step, *tol),
    }
}

/// Config precedence: flag > file > default. `--seed` beats `TM_SEED`,
/// which beats the config file.
fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::from_file(path)
            .with_context(|| format!("reading config {}", path.display()))?,
        None => PipelineConfig::default(),
    };
    for assignment in &cli.sets {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got {assignment:?}"))?;
        cfg.set(key.trim(), value)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    } else if let Ok(env_seed) = std::env::var("TM_SEED") {
        cfg.seed = env_seed
            .trim()
            .parse()
            .with_context(|| format!("TM_SEED must be an unsigned integer, got {env_seed:?}"))?;
    }
    Ok(cfg)
}

fn resolve_weights(cfg: &PipelineConfig, args: &WeightsArgs) -> Result<PipelineWeights> {
    if args.random_init && args.weights.is_some() {
        bail!("--random-init and --weights are mutually exclusive");
    }
    if args.random_init {
        return Ok(PipelineWeights::random(cfg, cfg.seed)?);
    }
    let path = args
        .weights
        .clone()
        .or_else(|| cfg.weights.clone())
        .ok_or_else(|| anyhow!("no weights: pass --weights FILE or --random-init"))?;
    PipelineWeights::load(&path, cfg).with_context(|| format!("loading weights {}", path.display()))
}

fn run_forward(cfg: &PipelineConfig, image: &Path, weights: &WeightsArgs) -> Result<(ForwardOutput, u128)> {
    let img = RawImage::load(image).with_context(|| format!("reading image {}", image.display()))?;
    let w = resolve_weights(cfg, weights)?;
    let start = Instant::now();
    let out = forward(&img, cfg, &w)?;
    Ok((out, start.elapsed().as_millis()))
}

fn cmd_forward(cfg: &PipelineConfig, image: &Path, weights: &WeightsArgs, dump: Option<&Path>) -> Result<()> {
    let (out, wall_ms) = run_forward(cfg, image, weights)?;
    println!("windows={}", out.report.windows);
    println!("L_before={}", out.report.l_before);
    println!("r_after={}", out.report.r_after);
    println!("wall_ms={wall_ms}");
    if let Some(path) = dump {
        let mut archive = Archive::new();
        archive.insert("tokens", out.tokens.clone())?;
        archive.insert("token_set", out.token_set.tokens.clone())?;
        let l = out.ranking.importances.len();
        archive.insert("importances", Tensor::new(vec![l], out.ranking.importances.clone())?)?;
        let selected: Vec<f64> = out.ranking.selected.iter().map(|&i| i as f64).collect();
        archive.insert("selected", Tensor::new(vec![selected.len()], selected)?)?;
        archive.save(path)?;
    }
    Ok(())
}

/// Reads the pre-filter token set from a dump, falling back to the final
/// tokens for archives produced elsewhere.
fn tokens_from_dump(path: &Path) -> Result<Tensor> {
    let archive = Archive::load(path).with_context(|| format!("reading dump {}", path.display()))?;
    let tensor = if archive.contains("token_set") {
        archive.get("token_set")?
    } else {
        archive.get("tokens")?
    };
    Ok(tensor.clone())
}

fn parse_thresholds(spec: &str) -> Result<Vec<f64>> {
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| anyhow!("threshold {s:?} is not a number"))
        })
        .collect()
}

fn cmd_redundancy(
    cfg: &PipelineConfig,
    dump: Option<&Path>,
    image: Option<&Path>,
    weights: &WeightsArgs,
    thresholds: Option<&str>,
    label: Option<&str>,
    out: Option<&Path>,
) -> Result<()> {
    let (tokens, source) = match (dump, image) {
        (Some(path), None) => (tokens_from_dump(path)?, path.display().to_string()),
        (None, Some(path)) => {
            let (fwd, _) = run_forward(cfg, path, weights)?;
            let label = format!("{}x{}", cfg.resolution.0, cfg.resolution.1);
            (fwd.token_set.tokens, label)
        }
        _ => bail!("pass exactly one of --dump or --image"),
    };
    let thresholds = match thresholds {
        Some(spec) => parse_thresholds(spec)?,
        None => default_thresholds(),
    };
    let report = redundancy_sweep(&tokens, &thresholds, label.unwrap_or(&source))?;
    let mut csv = Vec::new();
    write_report(&report, &mut csv)?;
    let csv = String::from_utf8(csv).expect("report is ASCII");
    match out {
        Some(path) => {
            std::fs::write(path, &csv)?;
            // Surface the canonical operating point when it is in the grid.
            if let Some(row) = csv.lines().find(|line| line.starts_with("0.8000,")) {
                println!("{row}");
            }
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_filter(dump: &Path, r: usize, out: Option<&Path>) -> Result<()> {
    let tokens = tokens_from_dump(dump)?;
    let ranking = token_filter(&tokens, r)?;
    println!("L={}", tokens.shape()[0]);
    println!("r={r}");
    let indices: Vec<String> = ranking.selected.iter().map(|i| i.to_string()).collect();
    println!("selected={}", indices.join(","));
    if let Some(path) = out {
        let d = tokens.shape()[1];
        let mut rows = Vec::with_capacity(r * d);
        for &i in &ranking.selected {
            rows.extend_from_slice(tokens.row(i));
        }
        let mut archive = Archive::new();
        archive.insert("tokens", Tensor::new(vec![r, d], rows)?)?;
        let selected: Vec<f64> = ranking.selected.iter().map(|&i| i as f64).collect();
        archive.insert("selected", Tensor::new(vec![r], selected)?)?;
        archive.insert(
            "importances",
            Tensor::new(vec![ranking.importances.len()], ranking.importances.clone())?,
        )?;
        archive.save(path)?;
    }
    Ok(())
}

#[derive(serde::Deserialize)]
struct PredictionRecord {
    id: String,
    prediction: String,
}

#[derive(serde::Deserialize)]
struct GtRecord {
    id: String,
    ground_truths: Vec<String>,
    #[serde(default)]
    boxes: Option<Vec<[u32; 4]>>,
    #[serde(default)]
    numeric: Option<bool>,
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line).with_context(|| format!("{}:{}", path.display(), i + 1))
        })
        .collect()
}

/// Pairs prediction and ground-truth records by id, erroring on ids that
/// appear on only one side.
fn join_records(preds: Vec<PredictionRecord>, gts: Vec<GtRecord>) -> Result<Vec<(PredictionRecord, GtRecord)>> {
    let mut gt_map: std::collections::BTreeMap<String, GtRecord> =
        gts.into_iter().map(|g| (g.id.clone(), g)).collect();
    let mut joined = Vec::with_capacity(preds.len());
    let mut missing_gt = Vec::new();
    for p in preds {
        match gt_map.remove(&p.id) {
            Some(g) => joined.push((p, g)),
            None => missing_gt.push(p.id),
        }
    }
    let orphan_gt: Vec<String> = gt_map.into_keys().collect();
    if !missing_gt.is_empty() || !orphan_gt.is_empty() {
        bail!(
            "record ids do not align; predictions without ground truth: [{}]; ground truths without prediction: [{}]",
            missing_gt.join(", "),
            orphan_gt.join(", ")
        );
    }
    Ok(joined)
}

/// Parses `key=value; key=value` entity lists for the f1 metric.
fn parse_entities(s: &str) -> Vec<(String, String)> {
    s.split(';')
        .filter_map(|pair| {
            let (k, v) = pair.split_once('=')?;
            Some((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

fn gt_words(record: &GtRecord) -> Result<Vec<GtWord>> {
    let boxes = record
        .boxes
        .as_ref()
        .ok_or_else(|| anyhow!("record {} has no boxes; spotting metrics need them", record.id))?;
    if boxes.len() != record.ground_truths.len() {
        bail!(
            "record {}: {} ground truths but {} boxes",
            record.id,
            record.ground_truths.len(),
            boxes.len()
        );
    }
    record
        .ground_truths
        .iter()
        .zip(boxes)
        .map(|(word, b)| {
            Ok(GtWord {
                word: word.clone(),
                bbox: NormalizedBox::new(b[0], b[1], b[2], b[3])?,
            })
        })
        .collect()
}

const METRIC_NAMES: &str = "contains, anls, relaxed, f1, trans, pos";

fn cmd_eval(metric: &str, predictions: &Path, gt: &Path, verbose: bool) -> Result<()> {
    let joined = join_records(read_jsonl(predictions)?, read_jsonl(gt)?)?;
    if joined.is_empty() {
        bail!("no records to evaluate");
    }
    let mut failures: Vec<(String, f64)> = Vec::new();
    match metric {
        "contains" | "anls" | "relaxed" => {
            let records: Vec<EvalRecord> = joined
                .iter()
                .map(|(p, g)| {
                    let mut r = EvalRecord::new(p.prediction.clone(), g.ground_truths.clone())?;
                    if g.numeric.unwrap_or(false) {
                        r = r.numeric();
                    }
                    Ok(r)
                })
                .collect::<Result<_>>()?;
            let scorer: fn(&[EvalRecord]) -> f64 = match metric {
                "contains" => contains_accuracy,
                "anls" => anls,
                _ => relaxed_accuracy,
            };
            for ((p, _), record) in joined.iter().zip(&records) {
                let score = scorer(std::slice::from_ref(record));
                if score < 1.0 {
                    failures.push((p.id.clone(), score));
                }
            }
            println!("{metric}={:.4}", scorer(&records));
        }
        "f1" => {
            let (mut sp, mut sr, mut sf) = (0.0, 0.0, 0.0);
            for (p, g) in &joined {
                let gt_entities = parse_entities(g.ground_truths.first().map(String::as_str).unwrap_or(""));
                let (prec, rec, f1) = entity_f1(&parse_entities(&p.prediction), &gt_entities);
                sp += prec;
                sr += rec;
                sf += f1;
                if f1 < 1.0 {
                    failures.push((p.id.clone(), f1));
                }
            }
            let n = joined.len() as f64;
            println!("precision={:.4}", sp / n);
            println!("recall={:.4}", sr / n);
            println!("f1={:.4}", sf / n);
        }
        "trans" | "pos" => {
            let mut total = 0.0;
            for (p, g) in &joined {
                let instance = SpottingInstance {
                    predicted_text: p.prediction.clone(),
                    gt_words: gt_words(g)?,
                };
                let scored = if metric == "trans" { instance.trans() } else { instance.pos() };
                // Unparseable markup from a model is a wrong answer, not
                // a harness failure; other errors are the harness's.
                let score = match scored {
                    Ok(s) => s,
                    Err(tokenmill::Error::Markup { .. }) => 0.0,
                    Err(e) => return Err(e.into()),
                };
                total += score;
                if score < 1.0 {
                    failures.push((p.id.clone(), score));
                }
            }
            println!("{metric}={:.4}", total / joined.len() as f64);
        }
        other => bail!("unknown metric {other:?}; valid names: {METRIC_NAMES}"),
    }
    if verbose {
        for (id, score) in &failures {
            println!("FAIL {id} score={score:.4}");
        }
    }
    Ok(())
}

fn cmd_prompt(task: &str, question: Option<&str>) -> Result<()> {
    let task = PromptTask::from_name(task)?;
    println!("{}", build_prompt(task, question)?);
    Ok(())
}

fn cmd_markup(file: &Path) -> Result<()> {
    let text = std::fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
    let mut spans = 0usize;
    let mut diffs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = parse_grounded(line).with_context(|| format!("{}:{}", file.display(), i + 1))?;
        spans += parsed.len();
        let rebuilt: String = parsed
            .iter()
            .map(|s| serialize_grounded(s))
            .collect::<tokenmill::Result<Vec<_>>>()?
            .concat();
        if rebuilt != line {
            diffs.push(i + 1);
        }
    }
    if diffs.is_empty() {
        println!("OK, {spans} spans, 0 diffs");
        Ok(())
    } else {
        bail!("round trip differs on {} line(s): {:?}", diffs.len(), diffs)
    }
}

/// Derivative of the tanh-approximated GELU.
fn gelu_prime(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044_715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044_715 * x * x)
}

fn cmd_gradcheck(seed: u64, step: f64, tol: f64) -> Result<()> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let dim = 8;
    let x = Tensor::new(vec![1, dim], (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let dir = Tensor::new(vec![1, dim], (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())?;

    type Probe = (
        &'static str,
        Box<dyn Fn(&Tensor) -> tokenmill::Result<f64>>,
        Box<dyn Fn(&Tensor, &Tensor) -> tokenmill::Result<f64>>,
    );
    let probes: Vec<Probe> = vec![
        (
            "sum",
            Box::new(|t: &Tensor| Ok(t.data().iter().sum())),
            Box::new(|_: &Tensor, d: &Tensor| Ok(d.data().iter().sum())),
        ),
        (
            "squared_norm",
            Box::new(|t: &Tensor| Ok(t.data().iter().map(|v| v * v).sum())),
            Box::new(|t: &Tensor, d: &Tensor| {
                Ok(t.data().iter().zip(d.data()).map(|(a, b)| 2.0 * a * b).sum())
            }),
        ),
        (
            "softmax_component",
            Box::new(|t: &Tensor| Ok(softmax(t, None)?.data()[0])),
            Box::new(|t: &Tensor, d: &Tensor| {
                let s = softmax(t, None)?;
                let s = s.data();
                let grad_dot = (0..s.len())
                    .map(|j| {
                        let delta = if j == 0 { 1.0 } else { 0.0 };
                        s[0] * (delta - s[j]) * d.data()[j]
                    })
                    .sum();
                Ok(grad_dot)
            }),
        ),
        (
            "log_sum_exp",
            Box::new(|t: &Tensor| {
                let max = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
                Ok(max + t.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln())
            }),
            Box::new(|t: &Tensor, d: &Tensor| {
                let s = softmax(t, None)?;
                Ok(s.data().iter().zip(d.data()).map(|(a, b)| a * b).sum())
            }),
        ),
        (
            "gelu_sum",
            Box::new(|t: &Tensor| Ok(t.data().iter().map(|&v| tokenmill::swa::gelu(v)).sum())),
            Box::new(|t: &Tensor, d: &Tensor| {
                Ok(t.data().iter().zip(d.data()).map(|(&a, &b)| gelu_prime(a) * b).sum())
            }),
        ),
    ];

    let mut all_ok = true;
    for (name, f, g) in probes {
        let (analytic, numeric) = directional_derivative_check(f, g, &x, &dir, step)?;
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0);
        let ok = rel <= tol;
        all_ok &= ok;
        println!(
            "probe={name} analytic={analytic:+.10e} numeric={numeric:+.10e} rel_err={rel:.3e} {}",
            if ok { "PASS" } else { "FAIL" }
        );
    }
    if !all_ok {
        bail!("derivative probes exceeded the {tol} tolerance");
    }
    Ok(())
}
