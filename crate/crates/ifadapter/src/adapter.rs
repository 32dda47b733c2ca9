//! Instance-feature adapter: appearance tokens from a Perceiver-style
//! resampler, a grounding token fusing the text summary with a Fourier
//! location code, per-instance semantic maps from duplicate cross-attention,
//! gated semantic fusion into one map per site, and a tanh-gated additive
//! injection that is an exact identity at initialization.

use serde::{Deserialize, Serialize};

use crate::layout::{background_mask, rasterize, BBox, LayoutSpec, RegionMask};
use crate::nn::{fourier_embed, masked_attention, Mlp, ParamStore};
use crate::tensor::Tensor;
use crate::text::{EncodedText, TextEncoder};
use crate::{Error, Result};

/// Structural hyperparameters. Every trained checkpoint carries these in its
/// run config; [`Adapter::attach`] re-binds to matching parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    /// Width of appearance/grounding token rows.
    pub d_adapter: usize,
    /// Appearance tokens per tapped depth (`L`).
    pub appearance_tokens: usize,
    /// Transformer blocks in the resampler (`N`).
    pub resampler_blocks: usize,
    /// Fourier bands per box coordinate.
    pub fourier_bands: usize,
    /// Tapped text-encoder depths (`k`); must match the encoder.
    pub depths: usize,
    /// Channel width of the denoiser at injection sites.
    pub d_model: usize,
    /// Denoiser attention sites that receive the injection.
    pub sites: Vec<usize>,
}

impl Default for AdapterConfig {
    fn default() -> AdapterConfig {
        AdapterConfig {
            d_adapter: 64,
            appearance_tokens: 4,
            resampler_blocks: 2,
            fourier_bands: 8,
            depths: 2,
            d_model: 32,
            sites: vec![2, 3],
        }
    }
}

impl AdapterConfig {
    /// Token rows per instance: one grounding row plus `k*L` appearance rows.
    pub fn token_rows(&self) -> usize {
        self.depths * self.appearance_tokens + 1
    }
}

/// Ablation and diagnostic switches for token construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenOptions {
    /// Keep the appearance rows (rows 1..kL).
    pub use_appearance: bool,
    /// Keep the grounding row (row 0).
    pub use_grounding: bool,
    /// Diagnostic: skip the resampler blocks so appearance rows are exactly
    /// `queries + location`, isolating the additive location term.
    pub bypass_resampler: bool,
}

impl Default for TokenOptions {
    fn default() -> TokenOptions {
        TokenOptions {
            use_appearance: true,
            use_grounding: true,
            bypass_resampler: false,
        }
    }
}

/// Per-instance conditioning prepared once per layout and reused across
/// timesteps and sites.
pub struct InstanceCondition {
    /// Token matrix `[rows, d_adapter]`.
    pub tokens: Tensor,
    /// Rasterized region on the latent grid.
    pub region: RegionMask,
    /// Additive mask over cells: 0 inside, -1e9 outside.
    pub add_mask: Vec<f64>,
}

/// Everything the adapter needs at a site, derived from one layout.
pub struct AdapterContext {
    pub instances: Vec<InstanceCondition>,
    /// 1.0 where no instance covers, 0.0 elsewhere.
    pub background: Vec<f64>,
    pub grid: (usize, usize),
}

impl AdapterContext {
    /// A context with no instances: the adapter becomes a no-op.
    pub fn empty(h: usize, w: usize) -> AdapterContext {
        AdapterContext {
            instances: Vec::new(),
            background: vec![1.0; h * w],
            grid: (h, w),
        }
    }
}

/// The fused instance semantic map plus fusion diagnostics.
pub struct Fusion {
    /// `D`: `[h*w, d_model]`, zero on uncovered cells.
    pub map: Tensor,
    /// Per-instance, per-cell softmax weights (zero where not covering).
    pub weights: Vec<Vec<f64>>,
    /// Per-instance area gates `sigmoid(|union| / |a_i|)`.
    pub gates: Vec<f64>,
    /// The per-instance semantic maps `s_i` that were fused, `[h*w, d_model]`.
    pub instance_maps: Vec<Tensor>,
}

/// Handle over adapter parameters living in a [`ParamStore`] under the
/// `adapter/` prefix. The handle itself is stateless.
pub struct Adapter {
    cfg: AdapterConfig,
    loc_mlp: Mlp,
    ground_mlp: Mlp,
    fuse_mlp: Mlp,
    block_mlps: Vec<Mlp>,
}

/// Text width the adapter expects on its inputs (EoT, word tokens).
const D_TEXT_IN: usize = crate::text::D_TEXT;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Adapter {
    /// Register freshly initialized parameters and return the handle.
    pub fn init(store: &mut ParamStore, cfg: &AdapterConfig, seed: u64) -> Result<Adapter> {
        let d = cfg.d_adapter;
        let std_d = 1.0 / (d as f64).sqrt();
        let std_text = 1.0 / (D_TEXT_IN as f64).sqrt();
        store.add_gaussian("adapter/queries", &[cfg.appearance_tokens, d], std_d, seed)?;
        let loc_in = 4 * 2 * cfg.fourier_bands;
        let loc_mlp = Mlp::init(store, "adapter/loc", &[loc_in, d, d], seed)?;
        let ground_mlp = Mlp::init(store, "adapter/ground", &[D_TEXT_IN + d, d, d], seed)?;
        for l in 0..cfg.depths {
            store.add_gaussian(&format!("adapter/depth{l}/kin"), &[D_TEXT_IN, d], std_text, seed)?;
            store.add_gaussian(&format!("adapter/depth{l}/vin"), &[D_TEXT_IN, d], std_text, seed)?;
        }
        let mut block_mlps = Vec::with_capacity(cfg.resampler_blocks);
        for b in 0..cfg.resampler_blocks {
            for part in ["wq", "wk", "wv", "wo"] {
                store.add_gaussian(&format!("adapter/resampler/b{b}/{part}"), &[d, d], std_d, seed)?;
            }
            block_mlps.push(Mlp::init(
                store,
                &format!("adapter/resampler/b{b}/mlp"),
                &[d, 2 * d, d],
                seed,
            )?);
        }
        let f = cfg.d_model;
        let std_f = 1.0 / (f as f64).sqrt();
        for &site in &cfg.sites {
            store.add_gaussian(&format!("adapter/site{site}/wq"), &[f, f], std_f, seed)?;
            store.add_gaussian(&format!("adapter/site{site}/wk"), &[d, f], std_d, seed)?;
            store.add_gaussian(&format!("adapter/site{site}/wv"), &[d, f], std_d, seed)?;
            // the gate starts closed so the adapter is an exact identity
            store.add_zeros(&format!("adapter/site{site}/lambda"), &[1])?;
        }
        let fuse_mlp = Mlp::init(store, "adapter/fuse", &[f, (f / 4).max(1), 1], seed)?;
        Ok(Adapter {
            cfg: cfg.clone(),
            loc_mlp,
            ground_mlp,
            fuse_mlp,
            block_mlps,
        })
    }

    /// Bind to adapter parameters already present (after a checkpoint load).
    pub fn attach(store: &ParamStore, cfg: &AdapterConfig) -> Result<Adapter> {
        let d = cfg.d_adapter;
        let expect = |name: &str, shape: &[usize]| -> Result<()> {
            let got = store
                .shape(name)
                .map_err(|_| Error::Checkpoint(format!("adapter param {name} missing")))?;
            if got != shape {
                return Err(Error::Checkpoint(format!(
                    "adapter param {name}: shape {got:?}, expected {shape:?}"
                )));
            }
            Ok(())
        };
        expect("adapter/queries", &[cfg.appearance_tokens, d])?;
        for l in 0..cfg.depths {
            expect(&format!("adapter/depth{l}/kin"), &[D_TEXT_IN, d])?;
            expect(&format!("adapter/depth{l}/vin"), &[D_TEXT_IN, d])?;
        }
        let mut block_mlps = Vec::with_capacity(cfg.resampler_blocks);
        for b in 0..cfg.resampler_blocks {
            for part in ["wq", "wk", "wv", "wo"] {
                expect(&format!("adapter/resampler/b{b}/{part}"), &[d, d])?;
            }
            block_mlps.push(Mlp::attach(store, &format!("adapter/resampler/b{b}/mlp"))?);
        }
        let f = cfg.d_model;
        for &site in &cfg.sites {
            expect(&format!("adapter/site{site}/wq"), &[f, f])?;
            expect(&format!("adapter/site{site}/wk"), &[d, f])?;
            expect(&format!("adapter/site{site}/wv"), &[d, f])?;
            expect(&format!("adapter/site{site}/lambda"), &[1])?;
        }
        Ok(Adapter {
            cfg: cfg.clone(),
            loc_mlp: Mlp::attach(store, "adapter/loc")?,
            ground_mlp: Mlp::attach(store, "adapter/ground")?,
            fuse_mlp: Mlp::attach(store, "adapter/fuse")?,
            block_mlps,
        })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.cfg
    }

    fn site_name(&self, site: usize, part: &str) -> Result<String> {
        if !self.cfg.sites.contains(&site) {
            return Err(Error::Usage(format!(
                "site {site} is not an injection site (sites: {:?})",
                self.cfg.sites
            )));
        }
        Ok(format!("adapter/site{site}/{part}"))
    }

    /// Project a box into the token space: Fourier-embed x, y, w, h and run
    /// the concatenation through a small MLP. Output `[1, d_adapter]`.
    pub fn location_embedding(&self, store: &ParamStore, bbox: &BBox) -> Result<Tensor> {
        let b = self.cfg.fourier_bands;
        let mut feats = Vec::with_capacity(4 * 2 * b);
        for v in [bbox.x, bbox.y, bbox.w, bbox.h] {
            feats.extend(fourier_embed(v, b));
        }
        let x = Tensor::constant(&[1, feats.len()], feats)?;
        self.loc_mlp.forward(store, &x)
    }

    /// Build the per-instance token matrix `H_i`.
    ///
    /// Row 0 is the grounding token `MLP_g([EoT; loc])`; the following `k*L`
    /// rows are appearance tokens, `L` per tapped depth, each the resampler
    /// output plus the location embedding. Row count is fixed by the config
    /// regardless of description length. Ablation switches drop either part;
    /// dropping both is an error.
    pub fn appearance_tokens(
        &self,
        store: &ParamStore,
        enc: &EncodedText,
        bbox: &BBox,
        opts: &TokenOptions,
    ) -> Result<Tensor> {
        if !opts.use_appearance && !opts.use_grounding {
            return Err(Error::Usage(
                "appearance_tokens: both token groups ablated away".into(),
            ));
        }
        if enc.word_tokens.len() != self.cfg.depths {
            return Err(Error::Shape(format!(
                "appearance_tokens: encoder taps {} depths, adapter expects {}",
                enc.word_tokens.len(),
                self.cfg.depths
            )));
        }
        let loc = self.location_embedding(store, bbox)?;
        let mut rows: Vec<Tensor> = Vec::new();
        if opts.use_grounding {
            let eot_flat = enc.eot.reshape(&[enc.eot.numel()])?;
            let loc_flat = loc.reshape(&[loc.numel()])?;
            let joined = Tensor::concat_vec(&[eot_flat, loc_flat])?;
            let g_in = joined.reshape(&[1, D_TEXT_IN + self.cfg.d_adapter])?;
            rows.push(self.ground_mlp.forward(store, &g_in)?);
        }
        if opts.use_appearance {
            let queries = store.leaf("adapter/queries")?;
            for l in 0..self.cfg.depths {
                let h = if opts.bypass_resampler {
                    queries.clone()
                } else {
                    self.resample(store, l, &enc.word_tokens[l], &queries)?
                };
                rows.push(h.add_row_broadcast(&loc)?);
            }
        }
        Tensor::concat_rows(&rows)
    }

    /// `N` transformer blocks: cross-attention from the running queries to
    /// the depth-projected word tokens, then an MLP, both residual.
    fn resample(
        &self,
        store: &ParamStore,
        depth: usize,
        word_tokens: &Tensor,
        queries: &Tensor,
    ) -> Result<Tensor> {
        let keys = word_tokens.matmul(&store.leaf(&format!("adapter/depth{depth}/kin"))?)?;
        let vals = word_tokens.matmul(&store.leaf(&format!("adapter/depth{depth}/vin"))?)?;
        let mut x = queries.clone();
        for (b, mlp) in self.block_mlps.iter().enumerate() {
            let q = x.matmul(&store.leaf(&format!("adapter/resampler/b{b}/wq"))?)?;
            let k = keys.matmul(&store.leaf(&format!("adapter/resampler/b{b}/wk"))?)?;
            let v = vals.matmul(&store.leaf(&format!("adapter/resampler/b{b}/wv"))?)?;
            let attn = masked_attention(&q, &k, &v, None)?
                .matmul(&store.leaf(&format!("adapter/resampler/b{b}/wo"))?)?;
            x = x.add(&attn)?;
            x = x.add(&mlp.forward(store, &x)?)?;
        }
        Ok(x)
    }

    /// Duplicate cross-attention at one site: queries from the latent cells
    /// (adapter-owned projection), keys/values from the instance tokens, the
    /// instance's region as an additive mask. Cells outside the region give
    /// zero rows. Output `[h*w, d_model]`.
    pub fn instance_semantic_map(
        &self,
        store: &ParamStore,
        site: usize,
        latent: &Tensor,
        tokens: &Tensor,
        add_mask: &[f64],
    ) -> Result<Tensor> {
        let hw = latent.shape().first().copied().unwrap_or(0);
        if latent.shape() != [hw, self.cfg.d_model] {
            return Err(Error::Shape(format!(
                "instance_semantic_map: latent {:?}, expected [{hw}, {}]",
                latent.shape(),
                self.cfg.d_model
            )));
        }
        if add_mask.len() != hw {
            return Err(Error::Shape(format!(
                "instance_semantic_map: {} mask cells for {hw} latent rows",
                add_mask.len()
            )));
        }
        let rows = tokens.shape().first().copied().unwrap_or(0);
        let q = latent.matmul(&store.leaf(&self.site_name(site, "wq")?)?)?;
        let k = tokens.matmul(&store.leaf(&self.site_name(site, "wk")?)?)?;
        let v = tokens.matmul(&store.leaf(&self.site_name(site, "wv")?)?)?;
        let mut mask_data = Vec::with_capacity(hw * rows);
        for &m in add_mask {
            mask_data.extend(std::iter::repeat(m).take(rows));
        }
        let mask = Tensor::constant(&[hw, rows], mask_data)?;
        masked_attention(&q, &k, &v, Some(&mask))
    }

    /// Gated semantic fusion of per-instance maps into one map `D`.
    ///
    /// At each cell, a softmax over the covering instances' `f(s_i)` scores
    /// sets relative weights; each term is further scaled by the instance's
    /// area gate `sigmoid(|union| / |a_i|)` (smaller instances gate higher),
    /// and the gated sum is deliberately not re-normalized. Uncovered cells
    /// are zero.
    pub fn fuse(
        &self,
        store: &ParamStore,
        maps: &[Tensor],
        regions: &[RegionMask],
    ) -> Result<Fusion> {
        if maps.is_empty() {
            return Err(Error::Usage("fuse: no instance maps".into()));
        }
        if maps.len() != regions.len() {
            return Err(Error::Shape(format!(
                "fuse: {} maps vs {} regions",
                maps.len(),
                regions.len()
            )));
        }
        let (h, w) = regions[0].grid();
        let hw = h * w;
        for (m, r) in maps.iter().zip(regions) {
            if m.shape() != [hw, self.cfg.d_model] {
                return Err(Error::Shape(format!(
                    "fuse: map shape {:?}, expected [{hw}, {}]",
                    m.shape(),
                    self.cfg.d_model
                )));
            }
            if r.grid() != (h, w) {
                return Err(Error::Shape("fuse: region grid mismatch".into()));
            }
        }
        let union = RegionMask::union(regions)?.area();
        let gates: Vec<f64> = regions
            .iter()
            .map(|r| {
                let a = r.area();
                if a == 0 {
                    return Err(Error::Validation("fuse: zero-area instance".into()));
                }
                Ok(sigmoid(union as f64 / a as f64))
            })
            .collect::<Result<_>>()?;
        let coverage: Vec<Vec<bool>> = regions.iter().map(|r| r.cells().to_vec()).collect();
        let logits: Vec<Tensor> = maps
            .iter()
            .map(|m| self.fuse_mlp.forward(store, m))
            .collect::<Result<_>>()?;
        let (map, weights) = gated_fusion(&logits, maps, &coverage, &gates)?;
        Ok(Fusion {
            map,
            weights,
            gates,
            instance_maps: maps.to_vec(),
        })
    }

    /// `base_attn + tanh(lambda_site) * (1 - M_bg) ⊙ D`: a foreground-only
    /// residual on the base model's attention output. With the gate parameter
    /// at 0 this is an identity; when the gate is frozen at exactly 0 the
    /// input tensor is returned untouched (bitwise inference guarantee).
    pub fn inject(
        &self,
        store: &ParamStore,
        site: usize,
        base_attn: &Tensor,
        fused: &Tensor,
        background: &[f64],
    ) -> Result<Tensor> {
        if base_attn.shape() != fused.shape() {
            return Err(Error::Shape(format!(
                "inject: base {:?} vs fused {:?}",
                base_attn.shape(),
                fused.shape()
            )));
        }
        let hw = base_attn.shape()[0];
        if background.len() != hw {
            return Err(Error::Shape(format!(
                "inject: {} background cells for {hw} rows",
                background.len()
            )));
        }
        let lam = store.leaf(&self.site_name(site, "lambda")?)?.tanh();
        if !lam.requires_grad() && lam.item()? == 0.0 {
            return Ok(base_attn.clone());
        }
        let fg: Vec<f64> = background.iter().map(|&b| 1.0 - b).collect();
        let term = fused.scale_rows(&fg)?.mul_scalar(&lam)?;
        base_attn.add(&term)
    }

    /// Encode the layout once: tokens, regions, masks, background.
    pub fn prepare(
        &self,
        store: &ParamStore,
        encoder: &TextEncoder,
        layout: &LayoutSpec,
        h: usize,
        w: usize,
        opts: &TokenOptions,
    ) -> Result<AdapterContext> {
        let mut instances = Vec::with_capacity(layout.instances.len());
        let mut regions = Vec::with_capacity(layout.instances.len());
        for inst in &layout.instances {
            let enc = encoder.encode(&inst.desc)?;
            let tokens = self.appearance_tokens(store, &enc, &inst.bbox, opts)?;
            let region = rasterize(&inst.bbox, h, w)?;
            let add_mask = region.additive_mask();
            regions.push(region.clone());
            instances.push(InstanceCondition {
                tokens,
                region,
                add_mask,
            });
        }
        let background = background_mask(&regions, h, w)?;
        Ok(AdapterContext {
            instances,
            background,
            grid: (h, w),
        })
    }

    /// Full per-site pass: semantic maps for every instance, fusion, then
    /// injection into the base attention output. An empty context returns
    /// `base_attn` untouched.
    pub fn apply(
        &self,
        store: &ParamStore,
        site: usize,
        latent: &Tensor,
        base_attn: &Tensor,
        ctx: &AdapterContext,
    ) -> Result<Tensor> {
        Ok(self.apply_detailed(store, site, latent, base_attn, ctx)?.0)
    }

    /// Like [`Adapter::apply`], also returning the fusion diagnostics when
    /// instances were present.
    pub fn apply_detailed(
        &self,
        store: &ParamStore,
        site: usize,
        latent: &Tensor,
        base_attn: &Tensor,
        ctx: &AdapterContext,
    ) -> Result<(Tensor, Option<Fusion>)> {
        if ctx.instances.is_empty() {
            return Ok((base_attn.clone(), None));
        }
        let maps: Vec<Tensor> = ctx
            .instances
            .iter()
            .map(|inst| {
                self.instance_semantic_map(store, site, latent, &inst.tokens, &inst.add_mask)
            })
            .collect::<Result<_>>()?;
        let regions: Vec<RegionMask> = ctx.instances.iter().map(|i| i.region.clone()).collect();
        let fusion = self.fuse(store, &maps, &regions)?;
        let out = self.inject(store, site, base_attn, &fusion.map, &ctx.background)?;
        Ok((out, Some(fusion)))
    }
}

/// Per-cell softmax weights over covering instances, computed on plain data.
/// `logits[i]` is instance i's per-cell score; weights are zero where the
/// instance does not cover.
fn softmax_weights(logits: &[Vec<f64>], coverage: &[Vec<bool>]) -> Vec<Vec<f64>> {
    let n = logits.len();
    let hw = logits.first().map(|l| l.len()).unwrap_or(0);
    let mut weights = vec![vec![0.0; hw]; n];
    for cell in 0..hw {
        let covering: Vec<usize> = (0..n).filter(|&i| coverage[i][cell]).collect();
        if covering.is_empty() {
            continue;
        }
        let mx = covering
            .iter()
            .map(|&i| logits[i][cell])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &i in &covering {
            let e = (logits[i][cell] - mx).exp();
            weights[i][cell] = e;
            sum += e;
        }
        for &i in &covering {
            weights[i][cell] /= sum;
        }
    }
    weights
}

/// The fusion itself as one differentiable node: gradients flow into both the
/// per-instance maps and (through the softmax) the fusion-net logits.
fn gated_fusion(
    logits: &[Tensor],
    maps: &[Tensor],
    coverage: &[Vec<bool>],
    gates: &[f64],
) -> Result<(Tensor, Vec<Vec<f64>>)> {
    let n = maps.len();
    let hw = maps[0].shape()[0];
    let fdim = maps[0].shape()[1];
    for l in logits {
        if l.shape() != [hw, 1] {
            return Err(Error::Shape(format!(
                "gated_fusion: logits shape {:?}, expected [{hw}, 1]",
                l.shape()
            )));
        }
    }
    let logit_data: Vec<Vec<f64>> = logits.iter().map(|l| l.data().to_vec()).collect();
    let weights = softmax_weights(&logit_data, coverage);

    let mut out = vec![0.0; hw * fdim];
    for i in 0..n {
        let m = maps[i].data();
        let g = gates[i];
        for cell in 0..hw {
            let wg = weights[i][cell] * g;
            if wg != 0.0 {
                for f in 0..fdim {
                    out[cell * fdim + f] += wg * m[cell * fdim + f];
                }
            }
        }
    }

    let parents: Vec<Tensor> = logits.iter().chain(maps.iter()).cloned().collect();
    let map_data: Vec<Vec<f64>> = maps.iter().map(|m| m.data().to_vec()).collect();
    let cov: Vec<Vec<bool>> = coverage.to_vec();
    let gates_c = gates.to_vec();
    let weights_c = weights.clone();
    let vjp = move |up: &[f64]| -> Vec<Option<Vec<f64>>> {
        let mut dlogits = vec![vec![0.0; hw]; n];
        let mut dmaps = vec![vec![0.0; hw * fdim]; n];
        for cell in 0..hw {
            let covering: Vec<usize> = (0..n).filter(|&i| cov[i][cell]).collect();
            if covering.is_empty() {
                continue;
            }
            let urow = &up[cell * fdim..(cell + 1) * fdim];
            // direct map term and the per-weight sensitivity g_i * <up, s_i>
            let mut dw = vec![0.0; covering.len()];
            for (ci, &i) in covering.iter().enumerate() {
                let wgt = weights_c[i][cell] * gates_c[i];
                let srow = &map_data[i][cell * fdim..(cell + 1) * fdim];
                let drow = &mut dmaps[i][cell * fdim..(cell + 1) * fdim];
                let mut dot = 0.0;
                for f in 0..fdim {
                    drow[f] = wgt * urow[f];
                    dot += urow[f] * srow[f];
                }
                dw[ci] = gates_c[i] * dot;
            }
            // softmax backward over the covering set
            let wdot: f64 = covering
                .iter()
                .enumerate()
                .map(|(ci, &i)| weights_c[i][cell] * dw[ci])
                .sum();
            for (ci, &i) in covering.iter().enumerate() {
                dlogits[i][cell] = weights_c[i][cell] * (dw[ci] - wdot);
            }
        }
        dlogits
            .into_iter()
            .map(Some)
            .chain(dmaps.into_iter().map(Some))
            .collect()
    };
    let out_t = Tensor::from_op(vec![hw, fdim], out, parents, Box::new(vjp));
    Ok((out_t, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::Instance;
    use crate::tensor::{backward, max_grad_mismatch, numeric_gradient, NEG_INF};
    use crate::text::D_TEXT;

    const SEED: u64 = 77;

    fn toy_cfg() -> AdapterConfig {
        AdapterConfig {
            d_adapter: 2,
            appearance_tokens: 1,
            resampler_blocks: 1,
            fourier_bands: 1,
            depths: 1,
            d_model: 2,
            sites: vec![0],
        }
    }

    fn default_setup() -> (ParamStore, Adapter) {
        let mut store = ParamStore::new();
        let adapter = Adapter::init(&mut store, &AdapterConfig::default(), SEED).unwrap();
        (store, adapter)
    }

    // ---- test-local plain-f64 forward helpers (independent of the tape) ----

    fn gelu_scalar(x: f64) -> f64 {
        const C: f64 = 0.7978845608028654; // sqrt(2/pi)
        const A: f64 = 0.044715;
        0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
    }

    fn matvec_rows(x: &[f64], rows: usize, w: &[f64], d_in: usize, d_out: usize) -> Vec<f64> {
        let mut out = vec![0.0; rows * d_out];
        for r in 0..rows {
            for j in 0..d_out {
                let mut acc = 0.0;
                for i in 0..d_in {
                    acc += x[r * d_in + i] * w[i * d_out + j];
                }
                out[r * d_out + j] = acc;
            }
        }
        out
    }

    fn mlp_forward_plain(store: &ParamStore, prefix: &str, x: &[f64], rows: usize) -> Vec<f64> {
        let mut h = x.to_vec();
        let mut i = 0;
        loop {
            let wname = format!("{prefix}/w{i}");
            if !store.contains(&wname) {
                break;
            }
            let w = store.data(&wname).unwrap();
            let b = store.data(&format!("{prefix}/b{i}")).unwrap();
            let d_in = store.shape(&wname).unwrap()[0];
            let d_out = store.shape(&wname).unwrap()[1];
            let mut y = matvec_rows(&h, rows, w, d_in, d_out);
            for r in 0..rows {
                for j in 0..d_out {
                    y[r * d_out + j] += b[j];
                }
            }
            let next = format!("{prefix}/w{}", i + 1);
            if store.contains(&next) {
                for v in y.iter_mut() {
                    *v = gelu_scalar(*v);
                }
            }
            h = y;
            i += 1;
        }
        h
    }

    fn attention_plain(
        q: &[f64],
        nq: usize,
        k: &[f64],
        nk: usize,
        v: &[f64],
        d: usize,
        dv: usize,
    ) -> Vec<f64> {
        let scale = 1.0 / (d as f64).sqrt();
        let mut out = vec![0.0; nq * dv];
        for i in 0..nq {
            let mut logits = vec![0.0; nk];
            for j in 0..nk {
                let mut acc = 0.0;
                for t in 0..d {
                    acc += q[i * d + t] * k[j * d + t];
                }
                logits[j] = acc * scale;
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut probs: Vec<f64> = logits.iter().map(|&l| (l - mx).exp()).collect();
            let sum: f64 = probs.iter().sum();
            for p in probs.iter_mut() {
                *p /= sum;
            }
            for t in 0..dv {
                let mut acc = 0.0;
                for j in 0..nk {
                    acc += probs[j] * v[j * dv + t];
                }
                out[i * dv + t] = acc;
            }
        }
        out
    }

    fn location_plain(store: &ParamStore, cfg: &AdapterConfig, bbox: &BBox) -> Vec<f64> {
        let mut feats = Vec::new();
        for v in [bbox.x, bbox.y, bbox.w, bbox.h] {
            feats.extend(fourier_embed(v, cfg.fourier_bands));
        }
        mlp_forward_plain(store, "adapter/loc", &feats, 1)
    }

    // ------------------------------ tests ------------------------------

    #[test]
    fn location_embedding_is_deterministic_and_shaped() {
        let (store, adapter) = default_setup();
        let b = BBox::new(0.1, 0.2, 0.3, 0.4).unwrap();
        let a1 = adapter.location_embedding(&store, &b).unwrap();
        let a2 = adapter.location_embedding(&store, &b).unwrap();
        assert_eq!(a1.shape(), &[1, 64]);
        assert_eq!(a1.data(), a2.data());
    }

    #[test]
    fn location_embedding_zero_final_layer_gives_zero() {
        let (mut store, adapter) = default_setup();
        let n = store.data("adapter/loc/w1").unwrap().len();
        store.set_data("adapter/loc/w1", vec![0.0; n]).unwrap();
        let b = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let out = adapter.location_embedding(&store, &b).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn location_embedding_matches_plain_oracle() {
        let (store, adapter) = default_setup();
        let b = BBox::new(0.25, 0.25, 0.5, 0.5).unwrap();
        let got = adapter.location_embedding(&store, &b).unwrap();
        let want = location_plain(&store, adapter.config(), &b);
        let worst = got
            .data()
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(worst < 1e-12, "worst deviation {worst}");
    }

    #[test]
    fn token_rows_are_fixed_length() {
        let (store, adapter) = default_setup();
        let enc = TextEncoder::new(SEED);
        let b = BBox::new(0.0, 0.0, 0.5, 0.5).unwrap();
        let opts = TokenOptions::default();
        let short = enc.encode("a dot").unwrap();
        let long = enc
            .encode("a very large bright red and yellow striped square sitting near the top left corner")
            .unwrap();
        let h_short = adapter.appearance_tokens(&store, &short, &b, &opts).unwrap();
        let h_long = adapter.appearance_tokens(&store, &long, &b, &opts).unwrap();
        let rows = adapter.config().token_rows();
        assert_eq!(rows, 9); // 2 depths * 4 tokens + grounding
        assert_eq!(h_short.shape(), &[rows, 64]);
        assert_eq!(h_long.shape(), &[rows, 64]);
    }

    #[test]
    fn ablation_switches_drop_rows() {
        let (store, adapter) = default_setup();
        let enc = TextEncoder::new(SEED).encode("a red square").unwrap();
        let b = BBox::new(0.0, 0.0, 0.5, 0.5).unwrap();
        let no_app = TokenOptions {
            use_appearance: false,
            ..TokenOptions::default()
        };
        let no_eot = TokenOptions {
            use_grounding: false,
            ..TokenOptions::default()
        };
        let both_off = TokenOptions {
            use_appearance: false,
            use_grounding: false,
            bypass_resampler: false,
        };
        assert_eq!(
            adapter.appearance_tokens(&store, &enc, &b, &no_app).unwrap().shape(),
            &[1, 64]
        );
        assert_eq!(
            adapter.appearance_tokens(&store, &enc, &b, &no_eot).unwrap().shape(),
            &[8, 64]
        );
        assert!(adapter.appearance_tokens(&store, &enc, &b, &both_off).is_err());
    }

    #[test]
    fn depth_mismatch_is_rejected() {
        let (store, adapter) = default_setup();
        let enc = TextEncoder::new(SEED).encode("a red square").unwrap();
        let crippled = EncodedText {
            word_tokens: enc.word_tokens[..1].to_vec(),
            eot: enc.eot.clone(),
            sequence: enc.sequence.clone(),
            token_count: enc.token_count,
        };
        let b = BBox::new(0.0, 0.0, 0.5, 0.5).unwrap();
        let err = adapter
            .appearance_tokens(&store, &crippled, &b, &TokenOptions::default())
            .unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn bypassed_resampler_rows_differ_only_by_location() {
        let (store, adapter) = default_setup();
        let enc = TextEncoder::new(SEED).encode("a red square").unwrap();
        let b1 = BBox::new(0.0, 0.0, 0.25, 0.25).unwrap();
        let b2 = BBox::new(0.5, 0.5, 0.5, 0.25).unwrap();
        let opts = TokenOptions {
            use_grounding: false,
            bypass_resampler: true,
            ..TokenOptions::default()
        };
        let h1 = adapter.appearance_tokens(&store, &enc, &b1, &opts).unwrap();
        let h2 = adapter.appearance_tokens(&store, &enc, &b2, &opts).unwrap();
        let loc1 = adapter.location_embedding(&store, &b1).unwrap();
        let loc2 = adapter.location_embedding(&store, &b2).unwrap();
        let d = 64;
        for r in 0..h1.shape()[0] {
            for j in 0..d {
                let row_diff = h1.data()[r * d + j] - h2.data()[r * d + j];
                let loc_diff = loc1.data()[j] - loc2.data()[j];
                assert!(
                    (row_diff - loc_diff).abs() < 1e-12,
                    "row {r} col {j}: {row_diff} vs {loc_diff}"
                );
            }
        }
    }

    #[test]
    fn resampler_matches_plain_reimplementation() {
        let (store, adapter) = default_setup();
        let cfg = adapter.config().clone();
        let enc = TextEncoder::new(SEED).encode("a red circle").unwrap();
        let b = BBox::new(0.0, 0.0, 0.5, 0.5).unwrap();
        let got = adapter
            .appearance_tokens(&store, &enc, &b, &TokenOptions::default())
            .unwrap();

        // independent forward pass on plain slices
        let d = cfg.d_adapter;
        let loc = location_plain(&store, &cfg, &b);
        let mut want: Vec<f64> = Vec::new();
        // grounding row: MLP_g([eot; loc])
        let mut g_in = enc.eot.data().to_vec();
        g_in.extend(&loc);
        want.extend(mlp_forward_plain(&store, "adapter/ground", &g_in, 1));
        // appearance rows per depth
        for l in 0..cfg.depths {
            let words = enc.word_tokens[l].data();
            let t = enc.word_tokens[l].shape()[0];
            let kin = store.data(&format!("adapter/depth{l}/kin")).unwrap();
            let vin = store.data(&format!("adapter/depth{l}/vin")).unwrap();
            let keys = matvec_rows(words, t, kin, D_TEXT, d);
            let vals = matvec_rows(words, t, vin, D_TEXT, d);
            let mut x = store.data("adapter/queries").unwrap().to_vec();
            let nq = cfg.appearance_tokens;
            for blk in 0..cfg.resampler_blocks {
                let wq = store.data(&format!("adapter/resampler/b{blk}/wq")).unwrap();
                let wk = store.data(&format!("adapter/resampler/b{blk}/wk")).unwrap();
                let wv = store.data(&format!("adapter/resampler/b{blk}/wv")).unwrap();
                let wo = store.data(&format!("adapter/resampler/b{blk}/wo")).unwrap();
                let q = matvec_rows(&x, nq, wq, d, d);
                let kk = matvec_rows(&keys, t, wk, d, d);
                let vv = matvec_rows(&vals, t, wv, d, d);
                let attn = attention_plain(&q, nq, &kk, t, &vv, d, d);
                let attn_o = matvec_rows(&attn, nq, wo, d, d);
                for i in 0..x.len() {
                    x[i] += attn_o[i];
                }
                let mlp = mlp_forward_plain(
                    &store,
                    &format!("adapter/resampler/b{blk}/mlp"),
                    &x,
                    nq,
                );
                for i in 0..x.len() {
                    x[i] += mlp[i];
                }
            }
            for r in 0..nq {
                for j in 0..d {
                    want.push(x[r * d + j] + loc[j]);
                }
            }
        }
        assert_eq!(got.numel(), want.len());
        let worst = got
            .data()
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(worst < 1e-9, "worst deviation {worst}");
    }

    #[test]
    fn semantic_map_matches_two_cell_oracle() {
        // identity projections turn the op into a bare masked attention whose
        // value was fixed by an independent script:
        //   probs [0.6697615493266569, 0.3302384506733431]
        //   out   [1.3395230986533138, 0.9907153520200294]
        let mut store = ParamStore::new();
        let adapter = Adapter::init(&mut store, &toy_cfg(), SEED).unwrap();
        store
            .set_data("adapter/site0/wq", vec![1.0, 0.0, 0.0, 1.0])
            .unwrap();
        store
            .set_data("adapter/site0/wk", vec![1.0, 0.0, 0.0, 1.0])
            .unwrap();
        store
            .set_data("adapter/site0/wv", vec![2.0, 0.0, 0.0, 3.0])
            .unwrap();
        let latent = Tensor::constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let tokens = Tensor::constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let add_mask = [0.0, NEG_INF];
        let s = adapter
            .instance_semantic_map(&store, 0, &latent, &tokens, &add_mask)
            .unwrap();
        assert!((s.data()[0] - 1.3395230986533138).abs() < 1e-12);
        assert!((s.data()[1] - 0.9907153520200294).abs() < 1e-12);
        // fully masked cell: exactly zero by convention
        assert_eq!(s.data()[2], 0.0);
        assert_eq!(s.data()[3], 0.0);
    }

    #[test]
    fn semantic_map_single_token_copies_value_projection() {
        let mut store = ParamStore::new();
        let adapter = Adapter::init(&mut store, &toy_cfg(), SEED).unwrap();
        store
            .set_data("adapter/site0/wv", vec![1.0, 0.0, 0.0, 1.0])
            .unwrap();
        let latent = Tensor::constant(&[3, 2], vec![0.3, -1.0, 2.0, 0.5, 0.0, 0.0]).unwrap();
        let tokens = Tensor::constant(&[1, 2], vec![3.0, 4.0]).unwrap();
        let add_mask = [0.0, 0.0, 0.0];
        let s = adapter
            .instance_semantic_map(&store, 0, &latent, &tokens, &add_mask)
            .unwrap();
        for row in 0..3 {
            assert_eq!(s.data()[row * 2], 3.0);
            assert_eq!(s.data()[row * 2 + 1], 4.0);
        }
    }

    #[test]
    fn fuse_single_instance_applies_area_gate_only() {
        let mut store = ParamStore::new();
        let adapter = Adapter::init(&mut store, &toy_cfg(), SEED).unwrap();
        let region = rasterize(&BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(), 2, 2).unwrap();
        let map = Tensor::constant(&[4, 2], (0..8).map(|i| i as f64 * 0.5).collect()).unwrap();
        let fusion = adapter.fuse(&store, &[map.clone()], &[region]).unwrap();
        // softmax over one element is exactly 1; gate = sigmoid(4/4)
        let g = sigmoid(1.0);
        assert!((fusion.gates[0] - 0.7310585786300049).abs() < 1e-12);
        for (i, &v) in fusion.map.data().iter().enumerate() {
            assert!((v - g * map.data()[i]).abs() < 1e-12);
        }
        for cell in 0..4 {
            assert_eq!(fusion.weights[0][cell], 1.0);
        }
    }

    #[test]
    fn fuse_identical_maps_split_weight_evenly() {
        let mut store = ParamStore::new();
        let adapter = Adapter::init(&mut store, &toy_cfg(), SEED).unwrap();
        let full = rasterize(&BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(), 2, 2).unwrap();
        let map = Tensor::constant(&[4, 2], vec![0.5; 8]).unwrap();
        let fusion = adapter
            .fuse(&store, &[map.clone(), map.clone()], &[full.clone(), full])
            .unwrap();
        for cell in 0..4 {
            assert!((fusion.weights[0][cell] - 0.5).abs() < 1e-15);
            assert!((fusion.weights[1][cell] - 0.5).abs() < 1e-15);
        }
        // both gates are sigmoid(1); D = (0.5 g + 0.5 g) * s = g * s
        let g = sigmoid(1.0);
        for &v in fusion.map.data() {
            assert!((v - g * 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_nested_areas_gate_fixture() {
        let mut store = ParamStore::new();
        let adapter = Adapter::init(&mut store, &toy_cfg(), SEED).unwrap();
        let outer = rasterize(&BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(), 8, 8).unwrap();
        let inner = rasterize(&BBox::new(0.0, 0.0, 0.5, 0.5).unwrap(), 8, 8).unwrap();
        assert_eq!(outer.area(), 64);
        assert_eq!(inner.area(), 16);
        let m1 = Tensor::constant(&[64, 2], vec![0.1; 128]).unwrap();
        let m2 = Tensor::constant(&[64, 2], vec![0.2; 128]).unwrap();
        let fusion = adapter.fuse(&store, &[m1, m2], &[outer, inner]).unwrap();
        // union is 64 cells: gates sigmoid(64/64) and sigmoid(64/16)
        assert!((fusion.gates[0] - 0.7310585786300049).abs() < 1e-12);
        assert!((fusion.gates[1] - 0.9820137900379085).abs() < 1e-12);
        assert!(fusion.gates[1] > fusion.gates[0]);
    }

    #[test]
    fn fuse_weights_sum_to_one_on_covered_cells() {
        let mut store = ParamStore::new();
        let adapter = Adapter::init(&mut store, &toy_cfg(), 123).unwrap();
        let r1 = rasterize(&BBox::new(0.0, 0.0, 0.6, 0.6).unwrap(), 4, 4).unwrap();
        let r2 = rasterize(&BBox::new(0.3, 0.3, 0.7, 0.7).unwrap(), 4, 4).unwrap();
        let m1 = Tensor::constant(&[16, 2], (0..32).map(|i| (i as f64).sin()).collect()).unwrap();
        let m2 = Tensor::constant(&[16, 2], (0..32).map(|i| (i as f64).cos()).collect()).unwrap();
        let fusion = adapter
            .fuse(&store, &[m1, m2], &[r1.clone(), r2.clone()])
            .unwrap();
        for cell in 0..16 {
            let covered = r1.cells()[cell] || r2.cells()[cell];
            let sum = fusion.weights[0][cell] + fusion.weights[1][cell];
            if covered {
                assert!((sum - 1.0).abs() < 1e-12, "cell {cell}: sum {sum}");
            } else {
                assert_eq!(sum, 0.0);
                // and the fused map is zero there
                assert_eq!(fusion.map.data()[cell * 2], 0.0);
                assert_eq!(fusion.map.data()[cell * 2 + 1], 0.0);
            }
        }
    }

    #[test]
    fn gated_fusion_gradients_match_finite_differences() {
        let coverage = vec![
            vec![true, true, false],
            vec![true, false, false],
        ];
        let gates = vec![0.7, 0.9];
        let l0 = vec![0.3, -0.2, 0.8];
        let l1 = vec![-0.5, 0.1, 0.4];
        let m0 = vec![0.2, -0.3, 0.7, 1.1, -0.4, 0.6];
        let m1 = vec![-0.8, 0.5, 0.9, -0.1, 0.2, 0.3];
        let probe: Vec<f64> = (0..6).map(|i| ((i * 7 + 3) as f64 * 0.37).sin()).collect();

        let run = |l0d: &[f64], l1d: &[f64], m0d: &[f64], m1d: &[f64]| -> (Tensor, Vec<Tensor>) {
            let lt0 = Tensor::leaf(&[3, 1], l0d.to_vec()).unwrap();
            let lt1 = Tensor::leaf(&[3, 1], l1d.to_vec()).unwrap();
            let mt0 = Tensor::leaf(&[3, 2], m0d.to_vec()).unwrap();
            let mt1 = Tensor::leaf(&[3, 2], m1d.to_vec()).unwrap();
            let (d, _) = gated_fusion(
                &[lt0.clone(), lt1.clone()],
                &[mt0.clone(), mt1.clone()],
                &coverage,
                &gates,
            )
            .unwrap();
            let pr = Tensor::constant(&[3, 2], probe.clone()).unwrap();
            (d.mul(&pr).unwrap().sum_all(), vec![lt0, lt1, mt0, mt1])
        };

        let (loss, leaves) = run(&l0, &l1, &m0, &m1);
        let grads = backward(&loss).unwrap();

        let inputs: Vec<Vec<f64>> = vec![l0.clone(), l1.clone(), m0.clone(), m1.clone()];
        for (idx, input) in inputs.iter().enumerate() {
            let numeric = numeric_gradient(
                |x: &[f64]| {
                    let mut parts = inputs.clone();
                    parts[idx] = x.to_vec();
                    let (loss, _) = run(&parts[0], &parts[1], &parts[2], &parts[3]);
                    loss.item()
                },
                input,
                1e-5,
            )
            .unwrap();
            let analytic = grads.get(&leaves[idx]).unwrap();
            let mismatch = max_grad_mismatch(analytic, &numeric);
            assert!(mismatch < 1e-4, "input {idx}: mismatch {mismatch}");
        }
    }

    #[test]
    fn inject_identity_cases() {
        let mut store = ParamStore::new();
        let adapter = Adapter::init(&mut store, &toy_cfg(), SEED).unwrap();
        let base = Tensor::constant(&[4, 2], (0..8).map(|i| i as f64 - 3.5).collect()).unwrap();
        let fused = Tensor::constant(&[4, 2], vec![2.0; 8]).unwrap();

        // lambda = 0, unfrozen: values identical, graph still alive
        let bg = vec![0.0; 4];
        let out = adapter.inject(&store, 0, &base, &fused, &bg).unwrap();
        assert_eq!(out.data(), base.data());
        assert!(out.requires_grad());

        // lambda frozen at 0: bitwise the same tensor back
        store.freeze_prefix("adapter/");
        let out = adapter.inject(&store, 0, &base, &fused, &bg).unwrap();
        assert_eq!(out.id(), base.id());

        // all-background canvas: identity for any lambda
        let mut store2 = ParamStore::new();
        let adapter2 = Adapter::init(&mut store2, &toy_cfg(), SEED).unwrap();
        store2.set_data("adapter/site0/lambda", vec![1.5]).unwrap();
        let all_bg = vec![1.0; 4];
        let out = adapter2.inject(&store2, 0, &base, &fused, &all_bg).unwrap();
        assert_eq!(out.data(), base.data());
    }

    #[test]
    fn inject_adds_tanh_gated_foreground_residual() {
        let mut store = ParamStore::new();
        let adapter = Adapter::init(&mut store, &toy_cfg(), SEED).unwrap();
        store.set_data("adapter/site0/lambda", vec![1.0]).unwrap();
        let base = Tensor::constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let fused = Tensor::constant(&[2, 2], vec![0.5, -0.5, 1.0, -1.0]).unwrap();
        let bg = vec![0.0, 0.0]; // everything foreground
        let out = adapter.inject(&store, 0, &base, &fused, &bg).unwrap();
        let t = 0.7615941559557649; // tanh(1)
        for i in 0..4 {
            let want = base.data()[i] + t * fused.data()[i];
            assert!((out.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn prepare_and_apply_are_identity_at_init() {
        let (store, adapter) = default_setup();
        let enc = TextEncoder::new(SEED);
        let layout = LayoutSpec {
            caption: "2 shapes on a gray background".into(),
            instances: vec![
                Instance {
                    bbox: BBox::new(0.05, 0.05, 0.4, 0.4).unwrap(),
                    desc: "a red square".into(),
                },
                Instance {
                    bbox: BBox::new(0.55, 0.55, 0.4, 0.4).unwrap(),
                    desc: "a blue circle".into(),
                },
            ],
        };
        let ctx = adapter
            .prepare(&store, &enc, &layout, 16, 16, &TokenOptions::default())
            .unwrap();
        assert_eq!(ctx.instances.len(), 2);
        let latent = Tensor::constant(&[256, 32], (0..256 * 32).map(|i| (i as f64 * 0.01).sin()).collect()).unwrap();
        let base = Tensor::constant(&[256, 32], (0..256 * 32).map(|i| (i as f64 * 0.02).cos()).collect()).unwrap();
        let (out, fusion) = adapter
            .apply_detailed(&store, 2, &latent, &base, &ctx)
            .unwrap();
        // lambda initialized to 0: exact identity on the attention output
        assert_eq!(out.data(), base.data());
        let fusion = fusion.unwrap();
        assert_eq!(fusion.map.shape(), &[256, 32]);

        // empty layout short-circuits to the very same tensor
        let empty = AdapterContext::empty(16, 16);
        let (out, none) = adapter
            .apply_detailed(&store, 2, &latent, &base, &empty)
            .unwrap();
        assert_eq!(out.id(), base.id());
        assert!(none.is_none());
    }

    #[test]
    fn cells_owned_by_one_instance_ignore_the_other_description() {
        let (store, adapter) = default_setup();
        let enc = TextEncoder::new(SEED);
        let make_layout = |second_desc: &str| LayoutSpec {
            caption: "2 shapes on a black background".into(),
            instances: vec![
                Instance {
                    bbox: BBox::new(0.0, 0.0, 0.45, 0.45).unwrap(),
                    desc: "a red square".into(),
                },
                Instance {
                    bbox: BBox::new(0.5, 0.5, 0.45, 0.45).unwrap(),
                    desc: second_desc.into(),
                },
            ],
        };
        let latent = Tensor::constant(
            &[256, 32],
            (0..256 * 32).map(|i| (i as f64 * 0.013).sin()).collect(),
        )
        .unwrap();
        let base = Tensor::zeros(&[256, 32]);
        let run = |desc: &str| -> (Vec<f64>, RegionMask, RegionMask) {
            let layout = make_layout(desc);
            let ctx = adapter
                .prepare(&store, &enc, &layout, 16, 16, &TokenOptions::default())
                .unwrap();
            let (_, fusion) = adapter
                .apply_detailed(&store, 2, &latent, &base, &ctx)
                .unwrap();
            (
                fusion.unwrap().map.data().to_vec(),
                ctx.instances[0].region.clone(),
                ctx.instances[1].region.clone(),
            )
        };
        let (d1, r1, r2) = run("a blue circle");
        let (d2, _, _) = run("a green striped square");
        let mut checked = 0;
        for cell in 0..256 {
            if r1.cells()[cell] && !r2.cells()[cell] {
                for f in 0..32 {
                    assert_eq!(
                        d1[cell * 32 + f].to_bits(),
                        d2[cell * 32 + f].to_bits(),
                        "cell {cell} leaked the other instance's description"
                    );
                }
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn fusion_is_permutation_equivariant() {
        let (store, adapter) = default_setup();
        let enc = TextEncoder::new(SEED);
        let i1 = Instance {
            bbox: BBox::new(0.1, 0.1, 0.5, 0.5).unwrap(),
            desc: "a red square".into(),
        };
        let i2 = Instance {
            bbox: BBox::new(0.4, 0.4, 0.5, 0.5).unwrap(),
            desc: "a cyan circle".into(),
        };
        let latent = Tensor::constant(
            &[256, 32],
            (0..256 * 32).map(|i| (i as f64 * 0.017).cos()).collect(),
        )
        .unwrap();
        let base = Tensor::zeros(&[256, 32]);
        let fused = |insts: Vec<Instance>| -> Vec<f64> {
            let layout = LayoutSpec {
                caption: "2 shapes on a white background".into(),
                instances: insts,
            };
            let ctx = adapter
                .prepare(&store, &enc, &layout, 16, 16, &TokenOptions::default())
                .unwrap();
            let (_, fusion) = adapter
                .apply_detailed(&store, 2, &latent, &base, &ctx)
                .unwrap();
            fusion.unwrap().map.data().to_vec()
        };
        let ab = fused(vec![i1.clone(), i2.clone()]);
        let ba = fused(vec![i2, i1]);
        let worst = ab
            .iter()
            .zip(&ba)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(worst < 1e-9, "permutation changed D by {worst}");
    }

    #[test]
    fn lambda_receives_gradient_through_apply() {
        let (store, adapter) = default_setup();
        let enc = TextEncoder::new(SEED);
        let layout = LayoutSpec {
            caption: "1 shape on a black background".into(),
            instances: vec![Instance {
                bbox: BBox::new(0.2, 0.2, 0.5, 0.5).unwrap(),
                desc: "a yellow square".into(),
            }],
        };
        let ctx = adapter
            .prepare(&store, &enc, &layout, 16, 16, &TokenOptions::default())
            .unwrap();
        let latent = Tensor::constant(
            &[256, 32],
            (0..256 * 32).map(|i| (i as f64 * 0.011).sin()).collect(),
        )
        .unwrap();
        let base = Tensor::zeros(&[256, 32]);
        let out = adapter.apply(&store, 2, &latent, &base, &ctx).unwrap();
        // pull the output toward 1 so the residual term matters
        let target = Tensor::constant(&[256, 32], vec![1.0; 256 * 32]).unwrap();
        let diff = out.sub(&target).unwrap();
        let loss = diff.mul(&diff).unwrap().mean_all();
        let grads = backward(&loss).unwrap();
        let lam_leaf = store.leaf("adapter/site2/lambda").unwrap();
        let g = grads.get(&lam_leaf).expect("lambda gradient missing");
        assert!(g[0] != 0.0, "gate gradient is zero; it could never open");
    }
}
