//! Frozen toy text encoder: hash-bucket vocabulary, sinusoidal positions, and
//! two self-attention mixing layers. All weights are generated from a seed at
//! construction time and never trained, so encodings are pure functions of
//! `(seed, text)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::nn::{fnv1a, masked_attention, param_seed};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Number of hash buckets in the vocabulary.
pub const VOCAB_SIZE: usize = 4096;
/// Word tokens kept per text; longer texts are truncated.
pub const MAX_TOKENS: usize = 16;
/// Width of every token embedding.
pub const D_TEXT: usize = 64;
/// How many mixing layers the encoder has; each is tapped as one depth.
pub const ENCODER_DEPTHS: usize = 2;

/// Lowercase, strip non-alphanumeric characters, hash each surviving word
/// into a vocabulary bucket, and truncate to [`MAX_TOKENS`]. A text with no
/// words at all is rejected; the unconditional path goes through
/// [`TextEncoder::encode_null`] instead.
pub fn tokenize(text: &str) -> Result<Vec<u32>> {
    let ids: Vec<u32> = text
        .split_whitespace()
        .filter_map(|word| {
            let clean: String = word
                .chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(|c| c.to_lowercase())
                .collect();
            if clean.is_empty() {
                None
            } else {
                Some((fnv1a(clean.as_bytes()) % VOCAB_SIZE as u64) as u32)
            }
        })
        .take(MAX_TOKENS)
        .collect();
    if ids.is_empty() {
        return Err(Error::Validation(format!("text has no words: {text:?}")));
    }
    Ok(ids)
}

/// Output of [`TextEncoder::encode`]. All tensors are constants: gradients
/// never flow into the frozen encoder.
pub struct EncodedText {
    /// Word-token rows `[t, D_TEXT]` at each tapped depth, shallowest first.
    /// The terminal row is excluded; these feed appearance-token queries.
    pub word_tokens: Vec<Tensor>,
    /// Final-depth terminal row `[1, D_TEXT]`; the text-level summary.
    pub eot: Tensor,
    /// Full final-depth sequence `[t + 1, D_TEXT]` (words plus terminal),
    /// used as keys/values for caption cross-attention.
    pub sequence: Tensor,
    /// Number of word tokens (terminal excluded).
    pub token_count: usize,
}

struct MixLayer {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    mlp_w1: Tensor,
    mlp_b1: Tensor,
    mlp_w2: Tensor,
    mlp_b2: Tensor,
}

/// The frozen encoder itself. Construction materializes every weight from
/// the seed; encoding runs the layers on constant tensors.
pub struct TextEncoder {
    embed: Vec<f64>,    // [VOCAB_SIZE, D_TEXT] row-major
    terminal: Vec<f64>, // [D_TEXT]
    layers: Vec<MixLayer>,
}

fn seeded_matrix(seed: u64, name: &str, rows: usize, cols: usize, std: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(param_seed(seed, name));
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * std
        })
        .collect();
    Tensor::constant(&[rows, cols], data).expect("seeded matrix shape")
}

fn position_code(pos: usize) -> Vec<f64> {
    crate::nn::sinusoid(pos as f64, D_TEXT)
}

impl TextEncoder {
    pub fn new(seed: u64) -> TextEncoder {
        let std = 1.0 / (D_TEXT as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(param_seed(seed, "text/embed"));
        let embed: Vec<f64> = (0..VOCAB_SIZE * D_TEXT)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * std
            })
            .collect();
        let mut term_rng = ChaCha8Rng::seed_from_u64(param_seed(seed, "text/terminal"));
        let terminal: Vec<f64> = (0..D_TEXT)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut term_rng);
                z * std
            })
            .collect();
        let layers = (0..ENCODER_DEPTHS)
            .map(|l| {
                let m = |part: &str, rows: usize, cols: usize| {
                    seeded_matrix(seed, &format!("text/layer{l}/{part}"), rows, cols, std)
                };
                MixLayer {
                    wq: m("wq", D_TEXT, D_TEXT),
                    wk: m("wk", D_TEXT, D_TEXT),
                    wv: m("wv", D_TEXT, D_TEXT),
                    wo: m("wo", D_TEXT, D_TEXT),
                    mlp_w1: m("mlp_w1", D_TEXT, 2 * D_TEXT),
                    mlp_b1: Tensor::constant(&[1, 2 * D_TEXT], vec![0.0; 2 * D_TEXT])
                        .expect("bias shape"),
                    mlp_w2: m("mlp_w2", 2 * D_TEXT, D_TEXT),
                    mlp_b2: Tensor::constant(&[1, D_TEXT], vec![0.0; D_TEXT])
                        .expect("bias shape"),
                }
            })
            .collect();
        TextEncoder {
            embed,
            terminal,
            layers,
        }
    }

    /// Encode a text into per-depth word tokens plus the terminal summary.
    pub fn encode(&self, text: &str) -> Result<EncodedText> {
        self.run(&tokenize(text)?)
    }

    /// The unconditional ("null") encoding used for condition dropout and
    /// classifier-free guidance: the wordless sequence, i.e. the terminal
    /// token alone run through the mixing layers. Word taps fall back to a
    /// single zero row so downstream shapes stay usable.
    pub fn encode_null(&self) -> Result<EncodedText> {
        self.run(&[])
    }

    fn run(&self, ids: &[u32]) -> Result<EncodedText> {
        let t = ids.len();
        let rows = t + 1;
        let mut data = Vec::with_capacity(rows * D_TEXT);
        for (pos, &id) in ids.iter().enumerate() {
            let base = id as usize * D_TEXT;
            let pe = position_code(pos);
            for j in 0..D_TEXT {
                data.push(self.embed[base + j] + pe[j]);
            }
        }
        let pe = position_code(t);
        for j in 0..D_TEXT {
            data.push(self.terminal[j] + pe[j]);
        }
        let mut x = Tensor::constant(&[rows, D_TEXT], data)?;

        let mut word_tokens = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let q = x.matmul(&layer.wq)?;
            let k = x.matmul(&layer.wk)?;
            let v = x.matmul(&layer.wv)?;
            let attn = masked_attention(&q, &k, &v, None)?.matmul(&layer.wo)?;
            let x_mid = x.add(&attn)?;
            let h = x_mid
                .matmul(&layer.mlp_w1)?
                .add_row_broadcast(&layer.mlp_b1)?
                .gelu()
                .matmul(&layer.mlp_w2)?
                .add_row_broadcast(&layer.mlp_b2)?;
            x = x_mid.add(&h)?;
            // tap word rows at this depth; a wordless text taps a zero row
            let tap = if t == 0 {
                Tensor::constant(&[1, D_TEXT], vec![0.0; D_TEXT])?
            } else {
                Tensor::constant(&[t, D_TEXT], x.data()[..t * D_TEXT].to_vec())?
            };
            word_tokens.push(tap);
        }

        let eot = Tensor::constant(&[1, D_TEXT], x.data()[t * D_TEXT..].to_vec())?;
        Ok(EncodedText {
            word_tokens,
            eot,
            sequence: x,
            token_count: t,
        })
    }
}
