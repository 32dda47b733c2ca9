//! Toy denoising diffusion stack: linear noise schedule, a small
//! convolutional epsilon-predictor with caption cross-attention and adapter
//! injection sites, condition-dropout training for both phases, ancestral
//! sampling with classifier-free guidance, and the fixed linear latent codec
//! standing in for a VAE.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adapter::{Adapter, AdapterContext, TokenOptions};
use crate::layout::LayoutSpec;
use crate::nn::{masked_attention, sinusoid, AdamW, ParamStore};
use crate::tensor::{backward, Tensor};
use crate::text::{EncodedText, TextEncoder, D_TEXT};
use crate::{Error, Result};

/// Scales latents so the training distribution is roughly unit-variance:
/// measured once over the first 64 default-config corpus renders (raw patch
/// projections had std 0.9025) and pinned. A test asserts the pin stays
/// honest if the corpus generator drifts.
pub const LATENT_SCALE: f64 = 1.108;

/// Linear beta schedule with everything derived from it.
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// `t_count` steps, betas linear from 1e-4 to 0.02.
    pub fn new(t_count: usize) -> Result<NoiseSchedule> {
        if t_count < 2 {
            return Err(Error::Validation(format!(
                "noise schedule needs at least 2 steps, got {t_count}"
            )));
        }
        let (lo, hi) = (1e-4, 0.02);
        let mut betas = Vec::with_capacity(t_count);
        let mut alpha_bars = Vec::with_capacity(t_count);
        let mut prod = 1.0;
        for i in 0..t_count {
            let beta = lo + (hi - lo) * i as f64 / (t_count - 1) as f64;
            prod *= 1.0 - beta;
            betas.push(beta);
            alpha_bars.push(prod);
        }
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    pub fn t_count(&self) -> usize {
        self.betas.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.betas.len() {
            return Err(Error::Validation(format!(
                "timestep {t} outside 1..={}",
                self.betas.len()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.betas[t - 1])
    }

    /// Cumulative product of alphas up to and including step `t`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    /// Forward-noise `x0` to step `t`: `sqrt(abar_t) x0 + sqrt(1-abar_t) eps`.
    pub fn q_sample(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        if x0.shape() != eps.shape() {
            return Err(Error::Shape(format!(
                "q_sample: x0 {:?} vs eps {:?}",
                x0.shape(),
                eps.shape()
            )));
        }
        let ab = self.alpha_bar(t)?;
        x0.scale(ab.sqrt()).add(&eps.scale((1.0 - ab).sqrt()))
    }
}

/// One ancestral reverse step on raw data, expressed purely in schedule
/// constants: posterior mean plus (optionally) posterior-variance noise.
/// `abar_prev` is the cumulative alpha at the previous kept timestep (1.0 at
/// the chain's start), which makes the same formula serve strided sampling.
pub(crate) fn reverse_step(
    z: &[f64],
    ehat: &[f64],
    abar_t: f64,
    abar_prev: f64,
    noise: Option<&[f64]>,
) -> Vec<f64> {
    let alpha_eff = abar_t / abar_prev;
    let beta_eff = 1.0 - alpha_eff;
    let eps_coef = beta_eff / (1.0 - abar_t).sqrt();
    let inv_sqrt_alpha = 1.0 / alpha_eff.sqrt();
    let sigma = ((1.0 - abar_prev) / (1.0 - abar_t) * beta_eff).sqrt();
    z.iter()
        .enumerate()
        .map(|(i, &zv)| {
            let mean = inv_sqrt_alpha * (zv - eps_coef * ehat[i]);
            match noise {
                Some(n) => mean + sigma * n[i],
                None => mean,
            }
        })
        .collect()
}

/// Standard-normal tensor drawn from the given stream.
pub fn gaussian_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::constant(shape, data).expect("gaussian tensor shape")
}

/// Structural hyperparameters of the epsilon-predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub latent_h: usize,
    pub latent_w: usize,
    /// Hidden channel width at every block.
    pub channels: usize,
    /// Residual blocks; each carries one cross-attention site.
    pub blocks: usize,
    /// Width of the sinusoidal timestep code.
    pub time_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> DenoiserConfig {
        DenoiserConfig {
            latent_channels: 4,
            latent_h: 16,
            latent_w: 16,
            channels: 32,
            blocks: 4,
            time_dim: 64,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0
            || self.latent_h == 0
            || self.latent_w == 0
            || self.channels == 0
            || self.blocks == 0
            || self.time_dim < 2
        {
            return Err(Error::Validation(format!(
                "degenerate denoiser config: {self:?}"
            )));
        }
        Ok(())
    }
}

/// The epsilon-prediction network. A conv stem lifts the latent to `channels`
/// width; each block applies a residual conv + timestep shift + GELU and a
/// residual cross-attention over the caption tokens (the adapter hooks in
/// right after the attention, before the output projection); a conv head maps
/// back to latent channels. Parameters live under the `base/` prefix.
pub struct ToyDenoiser {
    cfg: DenoiserConfig,
}

impl ToyDenoiser {
    pub fn init(store: &mut ParamStore, cfg: &DenoiserConfig, seed: u64) -> Result<ToyDenoiser> {
        cfg.validate()?;
        let c = cfg.latent_channels;
        let f = cfg.channels;
        let conv_std = |cin: usize| 1.0 / ((cin * 9) as f64).sqrt();
        store.add_gaussian("base/stem/k", &[f, c, 3, 3], conv_std(c), seed)?;
        store.add_zeros("base/stem/b", &[f])?;
        for j in 0..cfg.blocks {
            store.add_gaussian(&format!("base/block{j}/conv/k"), &[f, f, 3, 3], conv_std(f), seed)?;
            store.add_zeros(&format!("base/block{j}/conv/b"), &[f])?;
            store.add_gaussian(
                &format!("base/block{j}/time/w"),
                &[cfg.time_dim, f],
                1.0 / (cfg.time_dim as f64).sqrt(),
                seed,
            )?;
            store.add_zeros(&format!("base/block{j}/time/b"), &[f])?;
            let std_f = 1.0 / (f as f64).sqrt();
            let std_text = 1.0 / (D_TEXT as f64).sqrt();
            store.add_gaussian(&format!("base/block{j}/attn/wq"), &[f, f], std_f, seed)?;
            store.add_gaussian(&format!("base/block{j}/attn/wk"), &[D_TEXT, f], std_text, seed)?;
            store.add_gaussian(&format!("base/block{j}/attn/wv"), &[D_TEXT, f], std_text, seed)?;
            store.add_gaussian(&format!("base/block{j}/attn/wo"), &[f, f], std_f, seed)?;
        }
        store.add_gaussian("base/head/k", &[c, f, 3, 3], conv_std(f), seed)?;
        store.add_zeros("base/head/b", &[c])?;
        Ok(ToyDenoiser { cfg: cfg.clone() })
    }

    pub fn attach(store: &ParamStore, cfg: &DenoiserConfig) -> Result<ToyDenoiser> {
        cfg.validate()?;
        for name in ["base/stem/k", "base/head/k"] {
            if !store.contains(name) {
                return Err(Error::Checkpoint(format!("base param {name} missing")));
            }
        }
        for j in 0..cfg.blocks {
            for part in ["conv/k", "time/w", "attn/wq", "attn/wk", "attn/wv", "attn/wo"] {
                let name = format!("base/block{j}/{part}");
                if !store.contains(&name) {
                    return Err(Error::Checkpoint(format!("base param {name} missing")));
                }
            }
        }
        let got = store.shape("base/stem/k")?;
        let want = [cfg.channels, cfg.latent_channels, 3, 3];
        if got != want {
            return Err(Error::Checkpoint(format!(
                "base/stem/k shape {got:?}, config wants {want:?}"
            )));
        }
        Ok(ToyDenoiser { cfg: cfg.clone() })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    /// Predict the noise in `z_t`. `adapter` carries the injection pass for
    /// instance-conditioned runs; `None` is the plain base model.
    pub fn forward(
        &self,
        store: &ParamStore,
        z_t: &Tensor,
        t: usize,
        enc: &EncodedText,
        adapter: Option<(&Adapter, &AdapterContext)>,
    ) -> Result<Tensor> {
        self.forward_impl(store, z_t, t, enc, adapter, None)
    }

    /// Like [`ToyDenoiser::forward`], additionally collecting the fusion
    /// diagnostics (semantic maps, weights, gates) produced at each
    /// injection site.
    pub fn forward_traced(
        &self,
        store: &ParamStore,
        z_t: &Tensor,
        t: usize,
        enc: &EncodedText,
        adapter: Option<(&Adapter, &AdapterContext)>,
    ) -> Result<(Tensor, Vec<(usize, crate::adapter::Fusion)>)> {
        let mut trace = Vec::new();
        let out = self.forward_impl(store, z_t, t, enc, adapter, Some(&mut trace))?;
        Ok((out, trace))
    }

    fn forward_impl(
        &self,
        store: &ParamStore,
        z_t: &Tensor,
        t: usize,
        enc: &EncodedText,
        adapter: Option<(&Adapter, &AdapterContext)>,
        mut trace: Option<&mut Vec<(usize, crate::adapter::Fusion)>>,
    ) -> Result<Tensor> {
        let cfg = &self.cfg;
        let want = [cfg.latent_channels, cfg.latent_h, cfg.latent_w];
        if z_t.shape() != want {
            return Err(Error::Shape(format!(
                "denoiser: latent {:?}, expected {want:?}",
                z_t.shape()
            )));
        }
        if t == 0 {
            return Err(Error::Validation("denoiser: timestep 0".into()));
        }
        let f = cfg.channels;
        let hw = cfg.latent_h * cfg.latent_w;
        let t_code = Tensor::constant(&[1, cfg.time_dim], sinusoid(t as f64, cfg.time_dim))?;

        let mut x = z_t.conv3x3(&store.leaf("base/stem/k")?, &store.leaf("base/stem/b")?)?;
        for j in 0..cfg.blocks {
            let p = |part: &str| format!("base/block{j}/{part}");
            let h = x.conv3x3(&store.leaf(&p("conv/k"))?, &store.leaf(&p("conv/b"))?)?;
            let temb = t_code.linear(&store.leaf(&p("time/w"))?, Some(&store.leaf(&p("time/b"))?))?;
            let flat = h
                .reshape(&[f, hw])?
                .transpose()?
                .add_row_broadcast(&temb)?
                .gelu();
            let q = flat.matmul(&store.leaf(&p("attn/wq"))?)?;
            let k = enc.sequence.matmul(&store.leaf(&p("attn/wk"))?)?;
            let v = enc.sequence.matmul(&store.leaf(&p("attn/wv"))?)?;
            let mut attn = masked_attention(&q, &k, &v, None)?;
            if let Some((ad, ctx)) = adapter {
                if ad.config().sites.contains(&j) {
                    let (out, fusion) = ad.apply_detailed(store, j, &flat, &attn, ctx)?;
                    attn = out;
                    if let Some(sink) = trace.as_deref_mut() {
                        if let Some(fusion) = fusion {
                            sink.push((j, fusion));
                        }
                    }
                }
            }
            let flat = flat.add(&attn.matmul(&store.leaf(&p("attn/wo"))?)?)?;
            let back = flat.transpose()?.reshape(&[f, cfg.latent_h, cfg.latent_w])?;
            x = x.add(&back)?;
        }
        x.conv3x3(&store.leaf("base/head/k")?, &store.leaf("base/head/b")?)
    }
}

/// Fixed, seeded linear image/latent codec standing in for the VAE: each
/// `patch x patch` RGB block maps through an orthonormal projection to one
/// latent pixel across `channels` channels, and back by the transpose.
pub struct LatentCodec {
    img_h: usize,
    img_w: usize,
    patch: usize,
    channels: usize,
    /// `[channels, patch*patch*3]`, rows orthonormal.
    rows: Vec<f64>,
}

impl LatentCodec {
    pub fn new(seed: u64, img_h: usize, img_w: usize, patch: usize, channels: usize) -> Result<LatentCodec> {
        let dim = patch * patch * 3;
        if patch == 0 || img_h % patch != 0 || img_w % patch != 0 {
            return Err(Error::Validation(format!(
                "codec: image {img_h}x{img_w} not divisible into {patch}-pixel patches"
            )));
        }
        if channels == 0 || channels > dim {
            return Err(Error::Validation(format!(
                "codec: {channels} channels from {dim}-dim patches"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1f2e3d4c5b6a7988);
        let mut rows = vec![0.0; channels * dim];
        for c in 0..channels {
            // draw, then Gram-Schmidt against the accepted rows
            loop {
                for j in 0..dim {
                    rows[c * dim + j] = StandardNormal.sample(&mut rng);
                }
                for prev in 0..c {
                    let dot: f64 = (0..dim)
                        .map(|j| rows[c * dim + j] * rows[prev * dim + j])
                        .sum();
                    for j in 0..dim {
                        rows[c * dim + j] -= dot * rows[prev * dim + j];
                    }
                }
                let norm: f64 = (0..dim).map(|j| rows[c * dim + j].powi(2)).sum::<f64>().sqrt();
                if norm > 1e-6 {
                    for j in 0..dim {
                        rows[c * dim + j] /= norm;
                    }
                    break;
                }
            }
        }
        Ok(LatentCodec {
            img_h,
            img_w,
            patch,
            channels,
            rows,
        })
    }

    pub fn latent_h(&self) -> usize {
        self.img_h / self.patch
    }

    pub fn latent_w(&self) -> usize {
        self.img_w / self.patch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    /// Pixels (row-major `[h][w][rgb]`, values in [0,1]) to a latent tensor
    /// `[channels, h/patch, w/patch]`.
    pub fn encode_pixels(&self, px: &[f64]) -> Result<Tensor> {
        let want = self.img_h * self.img_w * 3;
        if px.len() != want {
            return Err(Error::Shape(format!(
                "codec encode: {} pixel values, expected {want}",
                px.len()
            )));
        }
        let (lh, lw) = (self.latent_h(), self.latent_w());
        let dim = self.patch_dim();
        let mut z = vec![0.0; self.channels * lh * lw];
        let mut patch_buf = vec![0.0; dim];
        for pi in 0..lh {
            for pj in 0..lw {
                let mut at = 0;
                for dy in 0..self.patch {
                    for dx in 0..self.patch {
                        let y = pi * self.patch + dy;
                        let x = pj * self.patch + dx;
                        for ch in 0..3 {
                            patch_buf[at] = 2.0 * px[(y * self.img_w + x) * 3 + ch] - 1.0;
                            at += 1;
                        }
                    }
                }
                for c in 0..self.channels {
                    let row = &self.rows[c * dim..(c + 1) * dim];
                    let dot: f64 = row.iter().zip(&patch_buf).map(|(r, p)| r * p).sum();
                    z[(c * lh + pi) * lw + pj] = LATENT_SCALE * dot;
                }
            }
        }
        Tensor::constant(&[self.channels, lh, lw], z)
    }

    /// Latent tensor back to pixels in [0,1] (clamped).
    pub fn decode_pixels(&self, z: &Tensor) -> Result<Vec<f64>> {
        let (lh, lw) = (self.latent_h(), self.latent_w());
        if z.shape() != [self.channels, lh, lw] {
            return Err(Error::Shape(format!(
                "codec decode: latent {:?}, expected [{}, {lh}, {lw}]",
                z.shape(),
                self.channels
            )));
        }
        let dim = self.patch_dim();
        let zd = z.data();
        let mut px = vec![0.0; self.img_h * self.img_w * 3];
        for pi in 0..lh {
            for pj in 0..lw {
                let mut patch_buf = vec![0.0; dim];
                for c in 0..self.channels {
                    let coef = zd[(c * lh + pi) * lw + pj] / LATENT_SCALE;
                    let row = &self.rows[c * dim..(c + 1) * dim];
                    for (b, r) in patch_buf.iter_mut().zip(row) {
                        *b += coef * r;
                    }
                }
                let mut at = 0;
                for dy in 0..self.patch {
                    for dx in 0..self.patch {
                        let y = pi * self.patch + dy;
                        let x = pj * self.patch + dx;
                        for ch in 0..3 {
                            px[(y * self.img_w + x) * 3 + ch] =
                                ((patch_buf[at] + 1.0) / 2.0).clamp(0.0, 1.0);
                            at += 1;
                        }
                    }
                }
            }
        }
        Ok(px)
    }
}

/// Training hyperparameters for either phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Chance of dropping the instance set for a sample.
    pub p_drop_local: f64,
    /// Chance of dropping the global caption for a sample.
    pub p_drop_global: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            lr: 1e-4,
            batch_size: 16,
            steps: 500,
            p_drop_local: 0.15,
            p_drop_global: 0.30,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Validation(format!("lr {} out of range", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size 0".into()));
        }
        for (p, name) in [
            (self.p_drop_local, "p_drop_local"),
            (self.p_drop_global, "p_drop_global"),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Validation(format!("{name} {p} outside [0, 1]")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Validation(format!(
                "weight_decay {} out of range",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Sampling hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> SampleConfig {
        SampleConfig {
            steps: 40,
            cfg_scale: 7.5,
            seed: 0,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Validation("sample steps must be >= 1".into()));
        }
        if !self.cfg_scale.is_finite() {
            return Err(Error::Validation("cfg_scale must be finite".into()));
        }
        Ok(())
    }
}

/// One training example: a clean latent plus the layout it was rendered from.
pub struct TrainExample {
    pub x0: Tensor,
    pub layout: LayoutSpec,
}

/// One loss-log line, serialized as JSON-lines by the callers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub lambda_value: f64,
}

/// Per-sample condition dropout: independently decide whether to keep the
/// caption and whether to keep the instance set. Draw order is fixed
/// (caption first), so seeded runs reproduce.
pub fn cfg_dropout(
    rng: &mut ChaCha8Rng,
    layout: &LayoutSpec,
    cfg: &TrainConfig,
) -> (Option<String>, Vec<crate::layout::Instance>) {
    let drop_global = rng.gen::<f64>() < cfg.p_drop_global;
    let drop_local = rng.gen::<f64>() < cfg.p_drop_local;
    let caption = if drop_global {
        None
    } else {
        Some(layout.caption.clone())
    };
    let instances = if drop_local {
        Vec::new()
    } else {
        layout.instances.clone()
    };
    (caption, instances)
}

/// Mean over pairs of the per-pair mean squared difference.
pub fn batch_mse(pairs: &[(Tensor, Tensor)]) -> Result<Tensor> {
    if pairs.is_empty() {
        return Err(Error::Usage("batch_mse: empty batch".into()));
    }
    let mut total: Option<Tensor> = None;
    for (pred, target) in pairs {
        let diff = pred.sub(target)?;
        let m = diff.mul(&diff)?.mean_all();
        total = Some(match total {
            Some(t) => t.add(&m)?,
            None => m,
        });
    }
    Ok(total.unwrap().scale(1.0 / pairs.len() as f64))
}

struct LossItem<'a> {
    x0: &'a Tensor,
    enc: &'a EncodedText,
    adapter: Option<(&'a Adapter, &'a AdapterContext)>,
}

fn denoising_loss(
    store: &ParamStore,
    den: &ToyDenoiser,
    sched: &NoiseSchedule,
    items: &[LossItem<'_>],
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    if items.is_empty() {
        return Err(Error::Usage("denoising loss: empty batch".into()));
    }
    let mut pairs = Vec::with_capacity(items.len());
    for item in items {
        let t = rng.gen_range(1..=sched.t_count());
        let eps = gaussian_tensor(item.x0.shape(), rng);
        let z_t = sched.q_sample(item.x0, t, &eps)?;
        let pred = den.forward(store, &z_t, t, item.enc, item.adapter)?;
        pairs.push((pred, eps));
    }
    batch_mse(&pairs)
}

/// Adapter-free denoising loss (base pretraining objective).
pub fn loss_ldm(
    store: &ParamStore,
    den: &ToyDenoiser,
    sched: &NoiseSchedule,
    batch: &[(&Tensor, &EncodedText)],
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let items: Vec<LossItem<'_>> = batch
        .iter()
        .map(|&(x0, enc)| LossItem {
            x0,
            enc,
            adapter: None,
        })
        .collect();
    denoising_loss(store, den, sched, &items, rng)
}

/// Instance-conditioned denoising loss: same objective with the adapter's
/// injection active.
pub fn loss_ifa(
    store: &ParamStore,
    den: &ToyDenoiser,
    sched: &NoiseSchedule,
    batch: &[(&Tensor, &EncodedText, &Adapter, &AdapterContext)],
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let items: Vec<LossItem<'_>> = batch
        .iter()
        .map(|&(x0, enc, ad, ctx)| LossItem {
            x0,
            enc,
            adapter: Some((ad, ctx)),
        })
        .collect();
    denoising_loss(store, den, sched, &items, rng)
}

fn mean_lambda(store: &ParamStore, adapter: Option<&Adapter>) -> f64 {
    let Some(ad) = adapter else { return 0.0 };
    let sites = &ad.config().sites;
    if sites.is_empty() {
        return 0.0;
    }
    let sum: f64 = sites
        .iter()
        .filter_map(|s| {
            store
                .data(&format!("adapter/site{s}/lambda"))
                .ok()
                .map(|d| d[0])
        })
        .sum();
    sum / sites.len() as f64
}

/// Phase 1: train the base model on captions alone (with caption dropout so
/// classifier-free guidance has an unconditional branch).
pub fn pretrain_base(
    store: &mut ParamStore,
    den: &ToyDenoiser,
    sched: &NoiseSchedule,
    encoder: &TextEncoder,
    dataset: &[TrainExample],
    cfg: &TrainConfig,
    log: &mut Vec<LossRecord>,
) -> Result<()> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Usage("pretrain: empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let captions: Vec<EncodedText> = dataset
        .iter()
        .map(|ex| encoder.encode(&ex.layout.caption))
        .collect::<Result<_>>()?;
    let null = encoder.encode_null()?;
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    for step in 1..=cfg.steps {
        store.invalidate_leaves();
        let mut batch: Vec<(&Tensor, &EncodedText)> = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let idx = rng.gen_range(0..dataset.len());
            let (caption, _) = cfg_dropout(&mut rng, &dataset[idx].layout, cfg);
            let enc = if caption.is_some() { &captions[idx] } else { &null };
            batch.push((&dataset[idx].x0, enc));
        }
        let loss = loss_ldm(store, den, sched, &batch, &mut rng)?;
        let loss_val = loss.item()?;
        let grads = backward(&loss)?;
        store.absorb(&grads);
        opt.step(store)?;
        log.push(LossRecord {
            step,
            loss: loss_val,
            lambda_value: 0.0,
        });
    }
    Ok(())
}

/// Phase 2: freeze everything under `base/` and train only the adapter on the
/// instance-conditioned objective.
#[allow(clippy::too_many_arguments)]
pub fn train_adapter(
    store: &mut ParamStore,
    den: &ToyDenoiser,
    adapter: &Adapter,
    sched: &NoiseSchedule,
    encoder: &TextEncoder,
    dataset: &[TrainExample],
    cfg: &TrainConfig,
    opts: &TokenOptions,
    log: &mut Vec<LossRecord>,
) -> Result<()> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Usage("train_adapter: empty dataset".into()));
    }
    store.freeze_prefix("base/");
    let (h, w) = (den.config().latent_h, den.config().latent_w);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let captions: Vec<EncodedText> = dataset
        .iter()
        .map(|ex| encoder.encode(&ex.layout.caption))
        .collect::<Result<_>>()?;
    let null = encoder.encode_null()?;
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    for step in 1..=cfg.steps {
        store.invalidate_leaves();
        // contexts must be rebuilt each step: tokens depend on live params
        let mut chosen: Vec<(usize, bool, Vec<crate::layout::Instance>)> =
            Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let idx = rng.gen_range(0..dataset.len());
            let (caption, instances) = cfg_dropout(&mut rng, &dataset[idx].layout, cfg);
            chosen.push((idx, caption.is_some(), instances));
        }
        let mut ctxs: Vec<AdapterContext> = Vec::with_capacity(cfg.batch_size);
        for (idx, _, instances) in &chosen {
            if instances.is_empty() {
                ctxs.push(AdapterContext::empty(h, w));
            } else {
                let sub = LayoutSpec {
                    caption: dataset[*idx].layout.caption.clone(),
                    instances: instances.clone(),
                };
                ctxs.push(adapter.prepare(store, encoder, &sub, h, w, opts)?);
            }
        }
        let batch: Vec<(&Tensor, &EncodedText, &Adapter, &AdapterContext)> = chosen
            .iter()
            .zip(&ctxs)
            .map(|((idx, keep_caption, _), ctx)| {
                let enc = if *keep_caption { &captions[*idx] } else { &null };
                (&dataset[*idx].x0, enc, adapter, ctx)
            })
            .collect();
        let loss = loss_ifa(store, den, sched, &batch, &mut rng)?;
        let loss_val = loss.item()?;
        let grads = backward(&loss)?;
        store.absorb(&grads);
        opt.step(store)?;
        log.push(LossRecord {
            step,
            loss: loss_val,
            lambda_value: mean_lambda(store, Some(adapter)),
        });
    }
    Ok(())
}

/// Evenly strided subsequence of `1..=t_total` ending exactly at `t_total`.
fn strided_timesteps(t_total: usize, steps: usize) -> Vec<usize> {
    let s = steps.min(t_total);
    let mut taus = Vec::with_capacity(s);
    for i in 0..s {
        let t = ((i + 1) * t_total + s / 2) / s;
        let t = t.clamp(1, t_total);
        if taus.last() != Some(&t) {
            taus.push(t);
        }
    }
    if taus.last() != Some(&t_total) {
        taus.push(t_total);
    }
    taus
}

/// Ancestral reverse diffusion with classifier-free guidance.
///
/// Per step `ehat = e_uncond + scale * (e_cond - e_uncond)`; scale 0 runs only
/// the unconditional branch and scale 1 only the conditional one, so those
/// endpoints are exact. Deterministic given the seed.
pub fn sample(
    store: &ParamStore,
    den: &ToyDenoiser,
    sched: &NoiseSchedule,
    enc_cond: &EncodedText,
    enc_null: &EncodedText,
    adapter: Option<(&Adapter, &AdapterContext)>,
    cfg: &SampleConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let dc = den.config();
    let shape = [dc.latent_channels, dc.latent_h, dc.latent_w];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut z = gaussian_tensor(&shape, &mut rng);
    let taus = strided_timesteps(sched.t_count(), cfg.steps);
    for i in (0..taus.len()).rev() {
        let t = taus[i];
        let abar_t = sched.alpha_bar(t)?;
        let abar_prev = if i == 0 { 1.0 } else { sched.alpha_bar(taus[i - 1])? };
        let ehat: Vec<f64> = if cfg.cfg_scale == 0.0 {
            den.forward(store, &z, t, enc_null, None)?.data().to_vec()
        } else if cfg.cfg_scale == 1.0 {
            den.forward(store, &z, t, enc_cond, adapter)?.data().to_vec()
        } else {
            let e_u = den.forward(store, &z, t, enc_null, None)?;
            let e_c = den.forward(store, &z, t, enc_cond, adapter)?;
            e_u.data()
                .iter()
                .zip(e_c.data())
                .map(|(u, c)| u + cfg.cfg_scale * (c - u))
                .collect()
        };
        if ehat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite noise prediction at timestep {t}"
            )));
        }
        let noise_buf;
        let noise = if i > 0 {
            noise_buf = gaussian_tensor(&shape, &mut rng).data().to_vec();
            Some(noise_buf.as_slice())
        } else {
            None
        };
        let stepped = reverse_step(z.data(), &ehat, abar_t, abar_prev, noise);
        z = Tensor::constant(&shape, stepped)?;
    }
    Ok(z)
}


#[cfg(test)]
mod scale_pin {
    use super::*;
    use crate::data::{image_to_pixels, render_sample, GenConfig, IMG_SIZE};

    /// Recompute the statistic `LATENT_SCALE` was pinned from: encoded
    /// latents of the default corpus must come out near unit std. Catches a
    /// stale pin if the renderer or codec ever changes.
    #[test]
    fn pinned_latent_scale_normalizes_the_corpus() {
        let codec = LatentCodec::new(1234, IMG_SIZE, IMG_SIZE, 4, 4).unwrap();
        let cfg = GenConfig::default();
        let (mut sum, mut sumsq, mut n) = (0.0, 0.0, 0usize);
        for seed in 0..64u64 {
            let s = render_sample(seed, &cfg).unwrap();
            let z = codec.encode_pixels(&image_to_pixels(&s.image)).unwrap();
            for &v in z.data() {
                sum += v;
                sumsq += v * v;
                n += 1;
            }
        }
        let mean = sum / n as f64;
        let std = (sumsq / n as f64 - mean * mean).sqrt();
        assert!(
            (std - 1.0).abs() < 0.05,
            "corpus latent std {std:.4}; re-measure and re-pin LATENT_SCALE"
        );
    }
}
