//! The `ifal` command line: corpus generation, base pretraining, adapter
//! training, sampling, and evaluation.
//!
//! Every command resolves relative paths against `--workdir`, never mutates
//! its inputs, and writes exactly one run manifest (under `workdir/runs/`)
//! whose config snapshot reproduces the run's artifacts bit for bit on one
//! platform. Exit codes: 0 success, 2 configuration/usage errors, 3 numeric
//! failures (a training run that goes non-finite still leaves its partial
//! loss log behind as the diagnostic dump).

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::adapter::{Adapter, TokenOptions};
use crate::checkpoint::{self, file_sha256};
use crate::config::{env_seed_override, AppConfig, ModelConfig};
use crate::data::{self, sample_seed, IMG_SIZE};
use crate::diffusion::{self, LatentCodec, LossRecord, NoiseSchedule, ToyDenoiser, TrainExample};
use crate::eval::{evaluate, EvalSample, TemplateVerifier};
use crate::layout::LayoutSpec;
use crate::manifest::RunManifest;
use crate::nn::ParamStore;
use crate::text::TextEncoder;
use crate::{Error, Result};

/// Layout instances a single CLI run will accept; matches the scene
/// contract of the synthetic corpus.
const MAX_INSTANCES: usize = 4;

#[derive(Debug, Parser)]
#[command(
    name = "ifal",
    about = "Instance-feature conditioned toy diffusion: data, training, sampling, evaluation"
)]
pub struct Cli {
    /// Directory all relative paths resolve against.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,
    /// Config JSON; defaults to `<workdir>/config.json` when present.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus: PNGs, layout JSONs, and a manifest.
    GenData(GenDataArgs),
    /// Pretrain the base denoiser on the corpus captions.
    Pretrain(PretrainArgs),
    /// Train the adapter on instance layouts over a frozen base checkpoint.
    TrainAdapter(TrainAdapterArgs),
    /// Sample one image for a layout file.
    Sample(SampleArgs),
    /// Generate for corpus layouts and score layout faithfulness.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output corpus directory.
    #[arg(long, default_value = "corpus")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Corpus directory produced by `gen-data`.
    #[arg(long, default_value = "corpus")]
    pub corpus: PathBuf,
    /// Output checkpoint path.
    #[arg(long, default_value = "base.ckpt")]
    pub out: PathBuf,
    /// Override the configured step count (0 saves the initialization).
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainAdapterArgs {
    /// Corpus directory produced by `gen-data`.
    #[arg(long, default_value = "corpus")]
    pub corpus: PathBuf,
    /// Frozen base checkpoint to train on top of.
    #[arg(long, default_value = "base.ckpt")]
    pub base: PathBuf,
    /// Output checkpoint path (adapter parameters only).
    #[arg(long, default_value = "adapter.ckpt")]
    pub out: PathBuf,
    /// Override the configured step count (0 saves the initialization).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Ablation: build instance tokens without the appearance rows.
    #[arg(long)]
    pub no_appearance_tokens: bool,
    /// Ablation: build instance tokens without the grounding row.
    #[arg(long)]
    pub no_eot: bool,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Base checkpoint.
    #[arg(long, default_value = "base.ckpt")]
    pub base: PathBuf,
    /// Adapter checkpoint; omitted samples the base model alone.
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    /// Layout JSON (caption + instances; instances may be empty).
    #[arg(long)]
    pub layout: PathBuf,
    /// Override the configured guidance scale.
    #[arg(long)]
    pub cfg_scale: Option<f64>,
    /// Override the configured sampling seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the configured sampler step count.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Output image path.
    #[arg(long, default_value = "sample.png")]
    pub out: PathBuf,
    /// Also write the final latent as `<out>.latent.json`.
    #[arg(long)]
    pub dump_latents: bool,
    /// Also write the fused instance semantic maps as `<out>.ism.json`.
    #[arg(long)]
    pub dump_ism: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Base checkpoint (unused with `--gt`).
    #[arg(long, default_value = "base.ckpt")]
    pub base: PathBuf,
    /// Adapter checkpoint; omitted evaluates the base model alone.
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    /// Corpus directory supplying layouts and reference renders.
    #[arg(long, default_value = "corpus")]
    pub corpus: PathBuf,
    /// Output report path.
    #[arg(long, default_value = "report.json")]
    pub out: PathBuf,
    /// Directory for the generated images.
    #[arg(long, default_value = "eval_gen")]
    pub gen_dir: PathBuf,
    /// Override the configured number of evaluated layouts.
    #[arg(long)]
    pub n: Option<usize>,
    /// Score the corpus's own renders instead of sampling: a closed-loop
    /// self-check of detector, verifier, and metrics.
    #[arg(long)]
    pub gt: bool,
}

/// Sidecar `<ckpt>.meta.json`: the config a checkpoint was built under, so
/// later commands rebuild matching shapes and apply the same token ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// `"base"` or `"adapter"`.
    pub phase: String,
    /// Token ablation the adapter was trained with (`None` for base).
    pub token_options: Option<TokenOptions>,
    /// Digest of the base checkpoint an adapter was trained against.
    pub base_checkpoint_sha: Option<String>,
}

/// Parse arguments and run; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests land here too; only real parse
            // failures are errors
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    fs::create_dir_all(&cli.workdir)?;
    let mut cfg = AppConfig::load(cli.config.as_deref(), &cli.workdir)?;
    let seed_override = env_seed_override()?;
    if let Some(seed) = seed_override {
        cfg.override_seeds(seed);
    }
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(&cli.workdir, cfg, seed_override, a),
        Command::Pretrain(a) => cmd_pretrain(&cli.workdir, cfg, seed_override, a),
        Command::TrainAdapter(a) => cmd_train_adapter(&cli.workdir, cfg, seed_override, a),
        Command::Sample(a) => cmd_sample(&cli.workdir, cfg, seed_override, a),
        Command::Eval(a) => cmd_eval(&cli.workdir, cfg, seed_override, a),
    }
}

fn resolve(workdir: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        workdir.join(path)
    }
}

fn meta_path(ckpt: &Path) -> PathBuf {
    let mut os = ckpt.as_os_str().to_owned();
    os.push(".meta.json");
    PathBuf::from(os)
}

fn write_meta(ckpt: &Path, meta: &CheckpointMeta) -> Result<PathBuf> {
    let path = meta_path(ckpt);
    fs::write(&path, serde_json::to_string_pretty(meta)?)?;
    Ok(path)
}

fn read_meta(ckpt: &Path) -> Result<CheckpointMeta> {
    let path = meta_path(ckpt);
    let text = fs::read_to_string(&path).map_err(|e| {
        Error::Checkpoint(format!("cannot read sidecar {}: {e}", path.display()))
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// `base.ckpt` -> `base_loss.jsonl`, next to the checkpoint.
fn loss_log_path(ckpt: &Path) -> PathBuf {
    let stem = ckpt
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "train".into());
    ckpt.with_file_name(format!("{stem}_loss.jsonl"))
}

fn write_loss_log(path: &Path, log: &[LossRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = String::new();
    for rec in log {
        text.push_str(&serde_json::to_string(rec)?);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// Read a corpus and encode every image into a clean training latent.
fn load_dataset(corpus: &Path, codec: &LatentCodec) -> Result<Vec<TrainExample>> {
    let samples = data::read_corpus(corpus)?;
    if samples.is_empty() {
        return Err(Error::Usage(format!(
            "corpus {} is empty",
            corpus.display()
        )));
    }
    samples
        .iter()
        .map(|s| {
            let x0 = codec.encode_pixels(&data::image_to_pixels(&s.image))?;
            Ok(TrainExample {
                x0,
                layout: s.layout.clone(),
            })
        })
        .collect()
}

/// A frozen model ready for sampling or evaluation.
struct LoadedModel {
    store: ParamStore,
    model: ModelConfig,
    adapter: Option<(Adapter, TokenOptions)>,
}

/// Load base (+ optional adapter) checkpoints, verify they belong together,
/// and freeze every parameter: inference never updates anything, and frozen
/// leaves keep the zero-lambda shortcut and the tape constant-free.
fn load_model(base: &Path, adapter: Option<&Path>) -> Result<LoadedModel> {
    let mut store = checkpoint::load(base)?;
    let (model, adapter) = match adapter {
        Some(ad_path) => {
            let meta = read_meta(ad_path)?;
            if meta.phase != "adapter" {
                return Err(Error::Checkpoint(format!(
                    "{} is a {:?} checkpoint, expected an adapter",
                    ad_path.display(),
                    meta.phase
                )));
            }
            let base_sha = file_sha256(base)?;
            if meta.base_checkpoint_sha.as_deref() != Some(base_sha.as_str()) {
                return Err(Error::Checkpoint(format!(
                    "adapter {} was trained against a different base checkpoint",
                    ad_path.display()
                )));
            }
            store.merge(checkpoint::load(ad_path)?)?;
            let ad = Adapter::attach(&store, &meta.model.adapter)?;
            let opts = meta.token_options.unwrap_or_default();
            (meta.model, Some((ad, opts)))
        }
        None => {
            let meta = read_meta(base)?;
            if meta.phase != "base" {
                return Err(Error::Checkpoint(format!(
                    "{} is a {:?} checkpoint, expected a base",
                    base.display(),
                    meta.phase
                )));
            }
            (meta.model, None)
        }
    };
    ToyDenoiser::attach(&store, &model.denoiser)?;
    store.freeze_prefix("");
    Ok(LoadedModel {
        store,
        model,
        adapter,
    })
}

/// Sample one image for one layout with an already-loaded model.
fn generate_image(
    lm: &LoadedModel,
    den: &ToyDenoiser,
    codec: &LatentCodec,
    encoder: &TextEncoder,
    sched: &NoiseSchedule,
    layout: &LayoutSpec,
    scfg: &crate::diffusion::SampleConfig,
) -> Result<(RgbImage, crate::tensor::Tensor)> {
    let enc_cond = encoder.encode(&layout.caption)?;
    let enc_null = encoder.encode_null()?;
    let ctx = match &lm.adapter {
        Some((ad, opts)) => Some(ad.prepare(
            &lm.store,
            encoder,
            layout,
            lm.model.denoiser.latent_h,
            lm.model.denoiser.latent_w,
            opts,
        )?),
        None => None,
    };
    let pair = lm.adapter.as_ref().map(|(ad, _)| ad).zip(ctx.as_ref());
    let z = diffusion::sample(&lm.store, den, sched, &enc_cond, &enc_null, pair, scfg)?;
    let px = codec.decode_pixels(&z)?;
    let img = data::pixels_to_image(&px, IMG_SIZE, IMG_SIZE)?;
    Ok((img, z))
}

fn cmd_gen_data(
    workdir: &Path,
    cfg: AppConfig,
    seed_override: Option<u64>,
    a: &GenDataArgs,
) -> Result<()> {
    let out = resolve(workdir, &a.out);
    let lines = data::write_corpus(&out, &cfg.gen)?;
    let mut manifest = RunManifest::new("gen-data", cfg, seed_override);
    manifest.add_output(&out)?;
    let mpath = manifest.write(&workdir.join("runs"))?;
    println!(
        "gen-data: {} samples -> {} (manifest {})",
        lines.len(),
        out.display(),
        mpath.display()
    );
    Ok(())
}

fn cmd_pretrain(
    workdir: &Path,
    mut cfg: AppConfig,
    seed_override: Option<u64>,
    a: &PretrainArgs,
) -> Result<()> {
    if let Some(steps) = a.steps {
        cfg.train_base.steps = steps;
    }
    let corpus_dir = resolve(workdir, &a.corpus);
    let out = resolve(workdir, &a.out);
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir)?;
    }

    let model = cfg.model.clone();
    let codec = model.codec()?;
    let encoder = model.encoder();
    let sched = model.schedule()?;
    let mut store = ParamStore::new();
    let den = ToyDenoiser::init(&mut store, &model.denoiser, model.init_seed)?;
    let dataset = load_dataset(&corpus_dir, &codec)?;

    let mut manifest = RunManifest::new("pretrain", cfg.clone(), seed_override);
    manifest.add_input(&corpus_dir)?;

    let mut log = Vec::new();
    let res = diffusion::pretrain_base(
        &mut store,
        &den,
        &sched,
        &encoder,
        &dataset,
        &cfg.train_base,
        &mut log,
    );
    let log_path = loss_log_path(&out);
    write_loss_log(&log_path, &log)?;
    if let Err(e) = res {
        eprintln!(
            "pretrain aborted after {} logged steps; partial loss log: {}",
            log.len(),
            log_path.display()
        );
        return Err(e);
    }

    checkpoint::save(&store, &out, None)?;
    let meta = write_meta(
        &out,
        &CheckpointMeta {
            model,
            phase: "base".into(),
            token_options: None,
            base_checkpoint_sha: None,
        },
    )?;
    manifest.add_output(&out)?;
    manifest.add_output(&meta)?;
    manifest.add_output(&log_path)?;
    let mpath = manifest.write(&workdir.join("runs"))?;
    println!(
        "pretrain: {} steps over {} examples -> {} (manifest {})",
        cfg.train_base.steps,
        dataset.len(),
        out.display(),
        mpath.display()
    );
    Ok(())
}

fn cmd_train_adapter(
    workdir: &Path,
    mut cfg: AppConfig,
    seed_override: Option<u64>,
    a: &TrainAdapterArgs,
) -> Result<()> {
    if let Some(steps) = a.steps {
        cfg.train_adapter.steps = steps;
    }
    let corpus_dir = resolve(workdir, &a.corpus);
    let base_path = resolve(workdir, &a.base);
    let out = resolve(workdir, &a.out);
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir)?;
    }

    let base_meta = read_meta(&base_path)?;
    if base_meta.phase != "base" {
        return Err(Error::Checkpoint(format!(
            "{} is a {:?} checkpoint, expected a base",
            base_path.display(),
            base_meta.phase
        )));
    }
    // The denoiser (and shared seeds) are pinned by the base checkpoint;
    // the adapter shape comes from this run's config.
    let mut model = base_meta.model;
    model.adapter = cfg.model.adapter.clone();
    model.validate()?;
    cfg.model = model.clone();

    let codec = model.codec()?;
    let encoder = model.encoder();
    let sched = model.schedule()?;
    let mut store = checkpoint::load(&base_path)?;
    let den = ToyDenoiser::attach(&store, &model.denoiser)?;
    let adapter = Adapter::init(&mut store, &model.adapter, model.init_seed)?;
    let opts = TokenOptions {
        use_appearance: !a.no_appearance_tokens,
        use_grounding: !a.no_eot,
        bypass_resampler: false,
    };
    let dataset = load_dataset(&corpus_dir, &codec)?;

    let mut manifest = RunManifest::new("train-adapter", cfg.clone(), seed_override);
    manifest.add_input(&corpus_dir)?;
    manifest.add_input(&base_path)?;

    let mut log = Vec::new();
    let res = diffusion::train_adapter(
        &mut store,
        &den,
        &adapter,
        &sched,
        &encoder,
        &dataset,
        &cfg.train_adapter,
        &opts,
        &mut log,
    );
    let log_path = loss_log_path(&out);
    write_loss_log(&log_path, &log)?;
    if let Err(e) = res {
        eprintln!(
            "train-adapter aborted after {} logged steps; partial loss log: {}",
            log.len(),
            log_path.display()
        );
        return Err(e);
    }

    checkpoint::save(&store, &out, Some("adapter/"))?;
    let meta = write_meta(
        &out,
        &CheckpointMeta {
            model,
            phase: "adapter".into(),
            token_options: Some(opts),
            base_checkpoint_sha: Some(file_sha256(&base_path)?),
        },
    )?;
    manifest.add_output(&out)?;
    manifest.add_output(&meta)?;
    manifest.add_output(&log_path)?;
    let mpath = manifest.write(&workdir.join("runs"))?;
    let lambda = log.last().map(|r| r.lambda_value).unwrap_or(0.0);
    println!(
        "train-adapter: {} steps over {} examples -> {} (mean lambda {lambda:.4}, manifest {})",
        cfg.train_adapter.steps,
        dataset.len(),
        out.display(),
        mpath.display()
    );
    Ok(())
}

fn cmd_sample(
    workdir: &Path,
    mut cfg: AppConfig,
    seed_override: Option<u64>,
    a: &SampleArgs,
) -> Result<()> {
    if let Some(v) = a.cfg_scale {
        cfg.sample.cfg_scale = v;
    }
    if let Some(v) = a.seed {
        cfg.sample.seed = v;
    }
    if let Some(v) = a.steps {
        cfg.sample.steps = v;
    }
    cfg.sample.validate()?;
    let base_path = resolve(workdir, &a.base);
    let adapter_path = a.adapter.as_ref().map(|p| resolve(workdir, p));
    let layout_path = resolve(workdir, &a.layout);
    let out = resolve(workdir, &a.out);
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir)?;
    }

    let layout = LayoutSpec::from_json(&fs::read_to_string(&layout_path)?)?;
    layout.validate(MAX_INSTANCES)?;

    let lm = load_model(&base_path, adapter_path.as_deref())?;
    cfg.model = lm.model.clone();
    let codec = lm.model.codec()?;
    let encoder = lm.model.encoder();
    let sched = lm.model.schedule()?;
    let den = ToyDenoiser::attach(&lm.store, &lm.model.denoiser)?;

    let mut manifest = RunManifest::new("sample", cfg.clone(), seed_override);
    manifest.add_input(&base_path)?;
    if let Some(p) = &adapter_path {
        manifest.add_input(p)?;
    }
    manifest.add_input(&layout_path)?;

    let (img, z) = generate_image(&lm, &den, &codec, &encoder, &sched, &layout, &cfg.sample)?;
    img.save(&out)?;
    manifest.add_output(&out)?;

    if a.dump_latents {
        #[derive(Serialize)]
        struct LatentDump<'a> {
            shape: &'a [usize],
            data: &'a [f64],
        }
        let path = out.with_extension("latent.json");
        fs::write(
            &path,
            serde_json::to_string(&LatentDump {
                shape: z.shape(),
                data: z.data(),
            })?,
        )?;
        manifest.add_output(&path)?;
    }

    if a.dump_ism {
        // One extra traced pass over the final latent captures the fused
        // semantic map and its parts at every injection site.
        let path = out.with_extension("ism.json");
        let dump = trace_ism(&lm, &den, &encoder, &layout, &z)?;
        fs::write(&path, serde_json::to_string(&dump)?)?;
        manifest.add_output(&path)?;
    }

    let mpath = manifest.write(&workdir.join("runs"))?;
    println!(
        "sample: seed {} cfg-scale {} -> {} (manifest {})",
        cfg.sample.seed,
        cfg.sample.cfg_scale,
        out.display(),
        mpath.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct IsmSiteDump {
    site: usize,
    grid: [usize; 2],
    d_model: usize,
    /// Fused map `D`, row-major `[h*w, d_model]`.
    fused: Vec<f64>,
    /// Per-instance fusion weights over cells (zero where not covering).
    weights: Vec<Vec<f64>>,
    /// Per-instance area gates.
    gates: Vec<f64>,
    /// Per-instance semantic maps `s_i`, each row-major `[h*w, d_model]`.
    instance_maps: Vec<Vec<f64>>,
}

fn trace_ism(
    lm: &LoadedModel,
    den: &ToyDenoiser,
    encoder: &TextEncoder,
    layout: &LayoutSpec,
    z: &crate::tensor::Tensor,
) -> Result<Vec<IsmSiteDump>> {
    let enc_cond = encoder.encode(&layout.caption)?;
    let ctx = match &lm.adapter {
        Some((ad, opts)) => Some(ad.prepare(
            &lm.store,
            encoder,
            layout,
            lm.model.denoiser.latent_h,
            lm.model.denoiser.latent_w,
            opts,
        )?),
        None => None,
    };
    let pair = lm.adapter.as_ref().map(|(ad, _)| ad).zip(ctx.as_ref());
    let (_, trace) = den.forward_traced(&lm.store, z, 1, &enc_cond, pair)?;
    let grid = [lm.model.denoiser.latent_h, lm.model.denoiser.latent_w];
    Ok(trace
        .into_iter()
        .map(|(site, fusion)| IsmSiteDump {
            site,
            grid,
            d_model: lm.model.adapter.d_model,
            fused: fusion.map.data().to_vec(),
            weights: fusion.weights,
            gates: fusion.gates,
            instance_maps: fusion
                .instance_maps
                .iter()
                .map(|m| m.data().to_vec())
                .collect(),
        })
        .collect())
}

fn cmd_eval(
    workdir: &Path,
    mut cfg: AppConfig,
    seed_override: Option<u64>,
    a: &EvalArgs,
) -> Result<()> {
    if let Some(n) = a.n {
        cfg.eval.n_eval = n;
    }
    cfg.eval.validate()?;
    let corpus_dir = resolve(workdir, &a.corpus);
    let out = resolve(workdir, &a.out);
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir)?;
    }

    let corpus = data::read_corpus(&corpus_dir)?;
    let n = cfg.eval.n_eval;
    if corpus.len() < n {
        return Err(Error::Usage(format!(
            "eval wants {n} samples, corpus {} has {}",
            corpus_dir.display(),
            corpus.len()
        )));
    }
    let corpus = &corpus[..n];
    let reference: Vec<RgbImage> = corpus.iter().map(|s| s.image.clone()).collect();

    let mut eval_samples = Vec::with_capacity(n);
    let mut manifest;
    let mut gen_dir_used = None;
    if a.gt {
        manifest = RunManifest::new("eval", cfg.clone(), seed_override);
        manifest.add_input(&corpus_dir)?;
        for s in corpus {
            eval_samples.push(EvalSample {
                image: s.image.clone(),
                layout: s.layout.clone(),
            });
        }
    } else {
        let base_path = resolve(workdir, &a.base);
        let adapter_path = a.adapter.as_ref().map(|p| resolve(workdir, p));
        let lm = load_model(&base_path, adapter_path.as_deref())?;
        cfg.model = lm.model.clone();
        let codec = lm.model.codec()?;
        let encoder = lm.model.encoder();
        let sched = lm.model.schedule()?;
        let den = ToyDenoiser::attach(&lm.store, &lm.model.denoiser)?;

        manifest = RunManifest::new("eval", cfg.clone(), seed_override);
        manifest.add_input(&corpus_dir)?;
        manifest.add_input(&base_path)?;
        if let Some(p) = &adapter_path {
            manifest.add_input(p)?;
        }

        let gen_dir = resolve(workdir, &a.gen_dir);
        fs::create_dir_all(&gen_dir)?;
        for (i, s) in corpus.iter().enumerate() {
            let mut scfg = cfg.sample.clone();
            scfg.seed = sample_seed(cfg.eval.seed, i);
            // A failed sample is logged and scored as-is (a blank image
            // matches nothing); the run continues.
            let image = match generate_image(
                &lm, &den, &codec, &encoder, &sched, &s.layout, &scfg,
            ) {
                Ok((img, _)) => img,
                Err(e) => {
                    eprintln!("eval: sample {i} failed: {e}");
                    RgbImage::new(IMG_SIZE as u32, IMG_SIZE as u32)
                }
            };
            image.save(gen_dir.join(format!("gen_{i:04}.png")))?;
            eval_samples.push(EvalSample {
                image,
                layout: s.layout.clone(),
            });
        }
        gen_dir_used = Some(gen_dir);
    }

    let report = evaluate(
        &eval_samples,
        &reference,
        &TemplateVerifier,
        cfg.eval.feature_seed,
    )?;
    fs::write(&out, serde_json::to_string_pretty(&report)?)?;
    manifest.add_output(&out)?;
    if let Some(dir) = &gen_dir_used {
        manifest.add_output(dir)?;
    }
    let mpath = manifest.write(&workdir.join("runs"))?;
    println!(
        "eval: ifs_rate {:.4} ap50 {:.4} frechet {:.4} over {} samples -> {} (manifest {})",
        report.ifs_rate,
        report.ap50,
        report.frechet,
        report.n,
        out.display(),
        mpath.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::AdapterConfig;
    use crate::data::GenConfig;
    use crate::diffusion::{DenoiserConfig, SampleConfig, TrainConfig};
    use crate::eval::MetricsReport;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(args).unwrap()
    }

    #[test]
    fn flags_parse_into_the_right_places() {
        let cli = parse(&[
            "ifal",
            "sample",
            "--workdir",
            "w",
            "--layout",
            "l.json",
            "--cfg-scale",
            "0",
            "--seed",
            "9",
            "--steps",
            "3",
            "--dump-latents",
            "--dump-ism",
        ]);
        assert_eq!(cli.workdir, PathBuf::from("w"));
        match cli.command {
            Command::Sample(a) => {
                assert_eq!(a.layout, PathBuf::from("l.json"));
                assert_eq!(a.cfg_scale, Some(0.0));
                assert_eq!(a.seed, Some(9));
                assert_eq!(a.steps, Some(3));
                assert!(a.dump_latents && a.dump_ism);
                assert_eq!(a.out, PathBuf::from("sample.png"));
            }
            other => panic!("parsed {other:?}"),
        }

        let cli = parse(&[
            "ifal",
            "train-adapter",
            "--no-appearance-tokens",
            "--no-eot",
            "--steps",
            "0",
        ]);
        match cli.command {
            Command::TrainAdapter(a) => {
                assert!(a.no_appearance_tokens && a.no_eot);
                assert_eq!(a.steps, Some(0));
            }
            other => panic!("parsed {other:?}"),
        }

        assert!(Cli::try_parse_from(["ifal", "sample", "--layout", "l", "--bogus"]).is_err());
        // sample requires a layout
        assert!(Cli::try_parse_from(["ifal", "sample"]).is_err());
    }

    #[test]
    fn meta_sidecar_roundtrips_and_paths_derive() {
        let tmp = tempfile::tempdir().unwrap();
        let ckpt = tmp.path().join("base.ckpt");
        assert_eq!(meta_path(&ckpt), tmp.path().join("base.ckpt.meta.json"));
        assert_eq!(loss_log_path(&ckpt), tmp.path().join("base_loss.jsonl"));

        let meta = CheckpointMeta {
            model: ModelConfig::default(),
            phase: "adapter".into(),
            token_options: Some(TokenOptions {
                use_appearance: false,
                use_grounding: true,
                bypass_resampler: false,
            }),
            base_checkpoint_sha: Some("ab".repeat(32)),
        };
        write_meta(&ckpt, &meta).unwrap();
        assert_eq!(read_meta(&ckpt).unwrap(), meta);

        // missing sidecar is a checkpoint error
        assert!(matches!(
            read_meta(&tmp.path().join("nope.ckpt")),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn resolve_honors_absolute_paths() {
        let w = Path::new("/work");
        assert_eq!(resolve(w, Path::new("x/y")), PathBuf::from("/work/x/y"));
        assert_eq!(resolve(w, Path::new("/abs/y")), PathBuf::from("/abs/y"));
    }

    /// A pocket-size config that keeps the full pipeline test under a few
    /// seconds: smallest latent the canvas contract allows, thin network,
    /// short chain.
    fn tiny_config() -> AppConfig {
        AppConfig {
            model: ModelConfig {
                denoiser: DenoiserConfig {
                    latent_channels: 2,
                    latent_h: 16,
                    latent_w: 16,
                    channels: 8,
                    blocks: 2,
                    time_dim: 8,
                },
                adapter: AdapterConfig {
                    d_adapter: 8,
                    appearance_tokens: 2,
                    resampler_blocks: 1,
                    fourier_bands: 2,
                    depths: 2,
                    d_model: 8,
                    sites: vec![1],
                },
                init_seed: 42,
                text_seed: 11,
                codec_seed: 1234,
                t_steps: 30,
            },
            gen: GenConfig {
                n_samples: 4,
                min_instances: 1,
                max_instances: 2,
                max_iou: 0.0,
                seed: 3,
            },
            train_base: TrainConfig {
                steps: 2,
                batch_size: 2,
                seed: 100,
                ..TrainConfig::default()
            },
            train_adapter: TrainConfig {
                steps: 1,
                batch_size: 2,
                seed: 200,
                ..TrainConfig::default()
            },
            sample: SampleConfig {
                steps: 3,
                cfg_scale: 7.5,
                seed: 0,
            },
            eval: crate::config::EvalConfig {
                n_eval: 2,
                feature_seed: 5,
                seed: 7,
            },
        }
    }

    fn dispatch_args(args: &[&str]) -> Result<()> {
        dispatch(&parse(args))
    }

    #[test]
    fn pipeline_runs_end_to_end_in_a_workdir() {
        let tmp = tempfile::tempdir().unwrap();
        let w = tmp.path().to_str().unwrap().to_string();
        fs::write(
            tmp.path().join("config.json"),
            tiny_config().to_json().unwrap(),
        )
        .unwrap();

        dispatch_args(&["ifal", "gen-data", "--workdir", &w]).unwrap();
        assert!(tmp.path().join("corpus/manifest.jsonl").is_file());
        assert!(tmp.path().join("runs/gen-data.json").is_file());

        dispatch_args(&["ifal", "pretrain", "--workdir", &w]).unwrap();
        assert!(tmp.path().join("base.ckpt").is_file());
        assert!(tmp.path().join("base.ckpt.meta.json").is_file());
        let log = fs::read_to_string(tmp.path().join("base_loss.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 2);

        // a freshly initialized adapter keeps lambda at zero, so sampling
        // through it must match the bare base bit for bit
        dispatch_args(&["ifal", "train-adapter", "--workdir", &w, "--steps", "0"]).unwrap();
        let layout = LayoutSpec {
            caption: "1 shape on a gray background".into(),
            instances: vec![crate::layout::Instance {
                bbox: crate::layout::BBox::new(0.2, 0.2, 0.4, 0.4).unwrap(),
                desc: "a red square".into(),
            }],
        };
        fs::write(tmp.path().join("layout.json"), layout.to_json().unwrap()).unwrap();
        dispatch_args(&[
            "ifal", "sample", "--workdir", &w, "--layout", "layout.json", "--adapter",
            "adapter.ckpt", "--out", "with_adapter.png", "--dump-latents", "--dump-ism",
        ])
        .unwrap();
        dispatch_args(&[
            "ifal", "sample", "--workdir", &w, "--layout", "layout.json", "--out", "base.png",
        ])
        .unwrap();
        let a = fs::read(tmp.path().join("with_adapter.png")).unwrap();
        let b = fs::read(tmp.path().join("base.png")).unwrap();
        assert_eq!(a, b);
        assert!(tmp.path().join("with_adapter.latent.json").is_file());
        assert!(tmp.path().join("with_adapter.ism.json").is_file());

        // rerunning with the same seed reproduces the image exactly
        dispatch_args(&[
            "ifal", "sample", "--workdir", &w, "--layout", "layout.json", "--out", "again.png",
        ])
        .unwrap();
        assert_eq!(b, fs::read(tmp.path().join("again.png")).unwrap());

        // closed-loop eval over ground-truth renders is perfect
        dispatch_args(&["ifal", "eval", "--workdir", &w, "--gt"]).unwrap();
        let report: MetricsReport =
            serde_json::from_str(&fs::read_to_string(tmp.path().join("report.json")).unwrap())
                .unwrap();
        assert_eq!(report.ifs_rate, 1.0);
        assert_eq!(report.ap50, 1.0);
        assert!(report.frechet < 1e-6);
        assert_eq!(report.n, 2);

        // manifests recorded inputs and outputs for every run
        let manifest = RunManifest::read(&tmp.path().join("runs/sample.json")).unwrap();
        assert_eq!(manifest.command, "sample");
        assert!(!manifest.inputs.is_empty() && !manifest.outputs.is_empty());
    }

    #[test]
    fn wrong_phase_checkpoints_are_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let w = tmp.path().to_str().unwrap().to_string();
        fs::write(
            tmp.path().join("config.json"),
            tiny_config().to_json().unwrap(),
        )
        .unwrap();
        dispatch_args(&["ifal", "gen-data", "--workdir", &w]).unwrap();
        dispatch_args(&["ifal", "pretrain", "--workdir", &w, "--steps", "0"]).unwrap();

        // base checkpoint passed as an adapter
        fs::write(
            tmp.path().join("layout.json"),
            LayoutSpec {
                caption: "1 shape on a gray background".into(),
                instances: vec![],
            }
            .to_json()
            .unwrap(),
        )
        .unwrap();
        let err = dispatch_args(&[
            "ifal", "sample", "--workdir", &w, "--layout", "layout.json", "--adapter", "base.ckpt",
        ])
        .unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));

        // adapter trained against a *different* base is refused
        dispatch_args(&["ifal", "train-adapter", "--workdir", &w, "--steps", "0"]).unwrap();
        dispatch_args(&[
            "ifal", "pretrain", "--workdir", &w, "--steps", "1", "--out", "base2.ckpt",
        ])
        .unwrap();
        let err = dispatch_args(&[
            "ifal", "sample", "--workdir", &w, "--base", "base2.ckpt", "--layout", "layout.json",
            "--adapter", "adapter.ckpt",
        ])
        .unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));
    }
}
