//! Llama-style decoder-only transformer with deterministic seeded weights.
//!
//! The block structure is the usual pre-norm residual pair — attention then
//! SwiGLU MLP — with grouped-query attention, rotary position embeddings,
//! and a final RMS norm before the LM head. Attention over cached keys uses
//! an online (streaming) softmax, visiting keys in ascending position, so
//! its transient footprint stays proportional to the query rows rather than
//! the square of the sequence.
//!
//! Weights are fully determined by `(config, seed)`: every matrix is filled
//! from its own ChaCha8 stream keyed by `(seed, layer, role)` via a
//! splitmix64 derivation, with entries uniform in `[-1/sqrt(d), +1/sqrt(d)]`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::context::{RunCtx, Stage};
use crate::memtrack::{BudgetExceeded, MemoryPool, Tier, TransferLedger};
use crate::tensor::{
    block_matmul_acc, fast_exp, matmul, matmul_acc, rmsnorm, rmsnorm_row, rope_apply, sum_tree,
    swish, Tensor, ELEMENT_WIDTH, ROW_BLOCK,
};

// ── Configuration ───────────────────────────────────────────────────

/// Model shape and determinism parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Transformer block count.
    pub layers: usize,
    /// Hidden (residual stream) dimension.
    pub hidden_dim: usize,
    /// MLP intermediate dimension.
    pub intermediate_dim: usize,
    /// Vocabulary size.
    pub vocab_size: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub rope_theta: f32,
    pub norm_eps: f32,
    pub seed: u64,
    /// Bytes per element; the engine computes in f32 and requires 4.
    pub element_width: usize,
}

impl ModelConfig {
    /// A config with the conventional 4x MLP expansion.
    pub fn new(layers: usize, hidden_dim: usize, n_heads: usize, vocab_size: usize) -> Self {
        Self {
            layers,
            hidden_dim,
            intermediate_dim: 4 * hidden_dim,
            vocab_size,
            n_heads,
            n_kv_heads: n_heads,
            head_dim: hidden_dim / n_heads,
            rope_theta: 10_000.0,
            norm_eps: 1e-5,
            seed: 42,
            element_width: ELEMENT_WIDTH,
        }
    }

    /// The default desk-scale model: small enough to run long contexts on a
    /// CPU, shaped so the sequence-by-intermediate MLP transient dominates
    /// the per-token budget during prefill while the KV cache dominates
    /// decode.
    pub fn desk_scale() -> Self {
        Self {
            layers: 4,
            hidden_dim: 256,
            intermediate_dim: 2048,
            vocab_size: 1024,
            n_heads: 8,
            n_kv_heads: 8,
            head_dim: 32,
            rope_theta: 10_000.0,
            norm_eps: 1e-5,
            seed: 42,
            element_width: ELEMENT_WIDTH,
        }
    }

    /// Key/value width: `n_kv_heads * head_dim`.
    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.layers == 0
            || self.hidden_dim == 0
            || self.intermediate_dim == 0
            || self.n_heads == 0
            || self.n_kv_heads == 0
            || self.head_dim == 0
        {
            return Err("all dimensions must be at least 1".into());
        }
        if self.vocab_size < 2 {
            return Err("vocab_size must exceed 1".into());
        }
        if self.hidden_dim != self.n_heads * self.head_dim {
            return Err(format!(
                "hidden_dim {} != n_heads {} * head_dim {}",
                self.hidden_dim, self.n_heads, self.head_dim
            ));
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return Err("n_heads must be divisible by n_kv_heads".into());
        }
        if self.head_dim % 2 != 0 {
            return Err("head_dim must be even for rotary embeddings".into());
        }
        if self.norm_eps <= 0.0 {
            return Err("norm_eps must be positive".into());
        }
        if self.element_width != ELEMENT_WIDTH {
            return Err(format!(
                "engine computes in f32; element_width must be {ELEMENT_WIDTH}"
            ));
        }
        Ok(())
    }
}

// ── Weights ─────────────────────────────────────────────────────────

pub struct LayerWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
    pub attn_norm: Tensor,
    pub mlp_norm: Tensor,
}

pub struct Weights {
    pub embed: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    pub lm_head: Tensor,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a 32-byte ChaCha8 key from `(seed, layer, role)` via splitmix64.
pub(crate) fn stream_key(seed: u64, layer: u64, role: u64) -> [u8; 32] {
    let mut state = seed
        ^ layer.wrapping_mul(0xA076_1D64_78BD_642F)
        ^ role.wrapping_mul(0xE703_7ED1_A0B4_28DB);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    key
}

/// Global matrices use this pseudo-layer index.
pub(crate) const GLOBAL: u64 = u64::MAX;

pub(crate) mod role {
    pub const EMBED: u64 = 0;
    pub const FINAL_NORM: u64 = 1;
    pub const LM_HEAD: u64 = 2;
    pub const WQ: u64 = 3;
    pub const WK: u64 = 4;
    pub const WV: u64 = 5;
    pub const WO: u64 = 6;
    pub const W_GATE: u64 = 7;
    pub const W_UP: u64 = 8;
    pub const W_DOWN: u64 = 9;
    pub const ATTN_NORM: u64 = 10;
    pub const MLP_NORM: u64 = 11;
    /// Synthetic prompt token stream (not a weight matrix).
    pub const TOKENS: u64 = 12;
}

fn init_matrix(
    pool: &MemoryPool,
    rows: usize,
    cols: usize,
    bound: f32,
    seed: u64,
    layer: u64,
    role: u64,
) -> Result<Tensor, BudgetExceeded> {
    let mut rng = ChaCha8Rng::from_seed(stream_key(seed, layer, role));
    let data: Vec<f32> = (0..rows * cols)
        .map(|_| (rng.gen::<f32>() * 2.0 - 1.0) * bound)
        .collect();
    Tensor::from_vec(pool, rows, cols, data)
}

impl Weights {
    /// Initialize all matrices deterministically from the config seed;
    /// entries are uniform in `[-1/sqrt(d), +1/sqrt(d)]`.
    pub fn init(cfg: &ModelConfig, pool: &MemoryPool) -> Result<Self, BudgetExceeded> {
        let (d, i, v, kv) = (
            cfg.hidden_dim,
            cfg.intermediate_dim,
            cfg.vocab_size,
            cfg.kv_dim(),
        );
        let bound = 1.0 / (d as f32).sqrt();
        let s = cfg.seed;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers as u64 {
            layers.push(LayerWeights {
                wq: init_matrix(pool, d, d, bound, s, l, role::WQ)?,
                wk: init_matrix(pool, d, kv, bound, s, l, role::WK)?,
                wv: init_matrix(pool, d, kv, bound, s, l, role::WV)?,
                wo: init_matrix(pool, d, d, bound, s, l, role::WO)?,
                w_gate: init_matrix(pool, d, i, bound, s, l, role::W_GATE)?,
                w_up: init_matrix(pool, d, i, bound, s, l, role::W_UP)?,
                w_down: init_matrix(pool, i, d, bound, s, l, role::W_DOWN)?,
                attn_norm: init_matrix(pool, 1, d, bound, s, l, role::ATTN_NORM)?,
                mlp_norm: init_matrix(pool, 1, d, bound, s, l, role::MLP_NORM)?,
            });
        }
        Ok(Self {
            embed: init_matrix(pool, v, d, bound, s, GLOBAL, role::EMBED)?,
            layers,
            final_norm: init_matrix(pool, 1, d, bound, s, GLOBAL, role::FINAL_NORM)?,
            lm_head: init_matrix(pool, d, v, bound, s, GLOBAL, role::LM_HEAD)?,
        })
    }

    /// Total weight bytes as charged to the pool.
    pub fn total_bytes(&self) -> u64 {
        let per_layer = |lw: &LayerWeights| {
            lw.wq.bytes()
                + lw.wk.bytes()
                + lw.wv.bytes()
                + lw.wo.bytes()
                + lw.w_gate.bytes()
                + lw.w_up.bytes()
                + lw.w_down.bytes()
                + lw.attn_norm.bytes()
                + lw.mlp_norm.bytes()
        };
        self.embed.bytes()
            + self.final_norm.bytes()
            + self.lm_head.bytes()
            + self.layers.iter().map(per_layer).sum::<u64>()
    }

    /// Bitwise equality of every matrix (determinism checks).
    pub fn bits_eq(&self, other: &Weights) -> bool {
        self.embed.bits_eq(&other.embed)
            && self.final_norm.bits_eq(&other.final_norm)
            && self.lm_head.bits_eq(&other.lm_head)
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.wq.bits_eq(&b.wq) && a.w_gate.bits_eq(&b.w_gate))
    }
}

// ── KV cache ────────────────────────────────────────────────────────

pub struct LayerKv {
    pub k: Tensor,
    pub v: Tensor,
}

/// Per-layer K/V tensors of shape `[cached_len x kv_dim]`, each resident on
/// its own tier. Appending grows the pool charge by exactly the new rows.
pub struct KvCache {
    layers: Vec<LayerKv>,
    kv_dim: usize,
}

impl KvCache {
    pub fn empty(cfg: &ModelConfig, pool: &MemoryPool) -> Result<Self, BudgetExceeded> {
        let kv_dim = cfg.kv_dim();
        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            layers.push(LayerKv {
                k: Tensor::zeros(pool, 0, kv_dim)?,
                v: Tensor::zeros(pool, 0, kv_dim)?,
            });
        }
        Ok(Self { layers, kv_dim })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn kv_dim(&self) -> usize {
        self.kv_dim
    }

    pub fn layer(&self, l: usize) -> &LayerKv {
        &self.layers[l]
    }

    pub fn len_of(&self, l: usize) -> usize {
        self.layers[l].k.rows()
    }

    /// Shared token count; panics if the layers disagree (i.e. mid-prefill).
    pub fn cached_len(&self) -> usize {
        let len = self.len_of(0);
        assert!(
            self.layers.iter().all(|lk| lk.k.rows() == len),
            "cache layers disagree on length"
        );
        len
    }

    pub fn total_bytes(&self) -> u64 {
        self.layers
            .iter()
            .map(|lk| lk.k.bytes() + lk.v.bytes())
            .sum()
    }

    pub fn device_resident_bytes(&self) -> u64 {
        self.layers
            .iter()
            .map(|lk| {
                let k = if lk.k.tier() == Tier::Device { lk.k.bytes() } else { 0 };
                let v = if lk.v.tier() == Tier::Device { lk.v.bytes() } else { 0 };
                k + v
            })
            .sum()
    }

    pub fn layer_tier(&self, l: usize) -> Tier {
        self.layers[l].k.tier()
    }

    fn append_zero_rows(&mut self, l: usize, n: usize) -> Result<(), BudgetExceeded> {
        let lk = &mut self.layers[l];
        lk.k.append_zero_rows(n)?;
        lk.v.append_zero_rows(n)?;
        Ok(())
    }

    /// Move one layer's K and V to `destination`.
    pub fn transfer_layer(
        &mut self,
        l: usize,
        destination: &MemoryPool,
        ledger: &TransferLedger,
    ) -> Result<(), BudgetExceeded> {
        let lk = &mut self.layers[l];
        lk.k.transfer_to(destination, ledger)?;
        lk.v.transfer_to(destination, ledger)?;
        Ok(())
    }

    /// Bitwise content equality (shape and every element of K and V).
    pub fn bits_eq(&self, other: &KvCache) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.k.bits_eq(&b.k) && a.v.bits_eq(&b.v))
    }
}

// ── Model ───────────────────────────────────────────────────────────

pub struct Model {
    pub cfg: ModelConfig,
    pub weights: Weights,
}

/// Tasks below this output size run serially; rayon overhead dominates
/// otherwise.
const PAR_ROWS_THRESHOLD: usize = 8;

impl Model {
    /// Validate the config and initialize weights on `pool`.
    pub fn new(cfg: ModelConfig, pool: &MemoryPool) -> Result<Self, BudgetExceeded> {
        if let Err(msg) = cfg.validate() {
            panic!("invalid model config: {msg}");
        }
        let weights = Weights::init(&cfg, pool)?;
        Ok(Self { cfg, weights })
    }

    /// Look up embedding rows for `tokens`.
    pub fn embed(&self, tokens: &[u32], ctx: &mut RunCtx) -> Result<Tensor, BudgetExceeded> {
        assert!(!tokens.is_empty(), "embed of an empty token list");
        let d = self.cfg.hidden_dim;
        let mut out = Tensor::zeros(&ctx.device, tokens.len(), d)?;
        for (i, &t) in tokens.iter().enumerate() {
            assert!(
                (t as usize) < self.cfg.vocab_size,
                "token id {t} out of range"
            );
            out.row_mut(i).copy_from_slice(self.weights.embed.row(t as usize));
        }
        Ok(out)
    }

    /// Project q/k/v from `x` (no internal norm), rotate, append K/V to the
    /// cache, and run streaming causal attention. Returns the attention
    /// output *before* the output projection.
    fn attn_inner(
        &self,
        x: &Tensor,
        cache: &mut KvCache,
        layer: usize,
        start_position: usize,
        ctx: &mut RunCtx,
    ) -> Result<Tensor, BudgetExceeded> {
        let cfg = &self.cfg;
        let (d, kv_dim) = (cfg.hidden_dim, cfg.kv_dim());
        let n = x.rows();
        assert!(n >= 1, "attention over zero rows");
        assert_eq!(x.cols(), d, "attention input width mismatch");
        assert_eq!(
            cache.len_of(layer),
            start_position,
            "cache position overlap or gap: layer {} holds {} tokens, start_position {}",
            layer,
            cache.len_of(layer),
            start_position
        );
        let lw = &self.weights.layers[layer];

        let mut q = matmul(x, &lw.wq)?;
        ctx.add_projection_flops(n, d, d);

        // Project K and V straight into the cache rows: the cache charge is
        // the only accounting for them, matching how the analytical model
        // sees KV growth.
        cache.append_zero_rows(layer, n)?;
        {
            let lk = &mut cache.layers[layer];
            let new_k = lk.k.rows_slice_mut(start_position, n);
            project_rows(x, &lw.wk, new_k, kv_dim);
            let new_v = lk.v.rows_slice_mut(start_position, n);
            project_rows(x, &lw.wv, new_v, kv_dim);
        }
        ctx.add_projection_flops(n, d, kv_dim);
        ctx.add_projection_flops(n, d, kv_dim);

        rope_apply(
            &mut q,
            cfg.n_heads,
            cfg.head_dim,
            start_position,
            cfg.rope_theta,
        );
        {
            let lk = &mut cache.layers[layer];
            crate::tensor::rope_rows(
                lk.k.rows_slice_mut(start_position, n),
                cfg.n_kv_heads,
                cfg.head_dim,
                start_position,
                cfg.rope_theta,
            );
        }

        ctx.kv_device_bytes = cache.device_resident_bytes();
        if ctx.stage != Stage::Decode {
            ctx.snap("prefill");
        }

        let mut attn = Tensor::zeros(&ctx.device, n, d)?;
        attention_core(cfg, &q, cache.layer(layer), start_position, &mut attn);
        ctx.add_attention_core_flops(n, start_position, d);
        Ok(attn)
    }

    /// Causal grouped-query attention over the cache: projects q/k/v from
    /// `x`, appends this call's K/V, and returns the output projection of
    /// the streamed softmax. `x` is expected to be normalized by the caller.
    pub fn attention_layer(
        &self,
        x: &Tensor,
        cache: &mut KvCache,
        layer: usize,
        start_position: usize,
        ctx: &mut RunCtx,
    ) -> Result<Tensor, BudgetExceeded> {
        let attn = self.attn_inner(x, cache, layer, start_position, ctx)?;
        let out = matmul(&attn, &self.weights.layers[layer].wo)?;
        ctx.add_projection_flops(x.rows(), self.cfg.hidden_dim, self.cfg.hidden_dim);
        Ok(out)
    }

    /// Block-path attention: `x += Wo * attention(norm(x))`, keeping only
    /// one extra sequence-sized tensor pair live at a time.
    pub(crate) fn attn_block_into(
        &self,
        x: &mut Tensor,
        cache: &mut KvCache,
        layer: usize,
        start_position: usize,
        ctx: &mut RunCtx,
    ) -> Result<(), BudgetExceeded> {
        let lw = &self.weights.layers[layer];
        let xn = rmsnorm(x, &lw.attn_norm, self.cfg.norm_eps)?;
        let attn = self.attn_inner(&xn, cache, layer, start_position, ctx)?;
        drop(xn);
        matmul_acc(&attn, &lw.wo, x);
        ctx.add_projection_flops(attn.rows(), self.cfg.hidden_dim, self.cfg.hidden_dim);
        Ok(())
    }

    /// SwiGLU MLP: `(swish(x*W_gate) ⊙ (x*W_up)) * W_down`.
    ///
    /// The gated hidden (`rows x intermediate_dim`) is the one
    /// sequence-sized transient; the gate and up projections live per row in
    /// scratch, so the measured transient matches the analytical peak.
    pub fn swiglu_mlp(
        &self,
        x: &Tensor,
        layer: usize,
        ctx: &mut RunCtx,
    ) -> Result<Tensor, BudgetExceeded> {
        let lw = &self.weights.layers[layer];
        let mut h = Tensor::zeros(&ctx.device, x.rows(), self.cfg.intermediate_dim)?;
        gated_up(x, 0, x.rows(), None, &lw.w_gate, &lw.w_up, &mut h);
        ctx.add_mlp_flops(x.rows(), self.cfg.hidden_dim, self.cfg.intermediate_dim);
        matmul(&h, &lw.w_down)
    }

    /// Block-path MLP over a row range: `x[rows] += mlp(norm(x[rows]))`,
    /// with the transient scope measured and snapshotted at its peak.
    pub(crate) fn mlp_block_into(
        &self,
        x: &mut Tensor,
        row_start: usize,
        n_rows: usize,
        layer: usize,
        ctx: &mut RunCtx,
    ) -> Result<(), BudgetExceeded> {
        let cfg = &self.cfg;
        let lw = &self.weights.layers[layer];
        let scope = ctx.device.begin_scope();
        let mut h = Tensor::zeros(&ctx.device, n_rows, cfg.intermediate_dim)?;
        gated_up(
            x,
            row_start,
            n_rows,
            Some((&lw.mlp_norm, cfg.norm_eps)),
            &lw.w_gate,
            &lw.w_up,
            &mut h,
        );
        ctx.add_mlp_flops(n_rows, cfg.hidden_dim, cfg.intermediate_dim);
        if ctx.stage != Stage::Decode {
            ctx.snap("prefill");
        }
        // Down-projection accumulated straight into the residual rows.
        let d = cfg.hidden_dim;
        let i_dim = cfg.intermediate_dim;
        let out = x.rows_slice_mut(row_start, n_rows);
        let wd = lw.w_down.data();
        if n_rows >= PAR_ROWS_THRESHOLD {
            out.par_chunks_mut(ROW_BLOCK * d)
                .zip(h.data().par_chunks(ROW_BLOCK * i_dim))
                .for_each(|(xb, hb)| block_matmul_acc(hb, i_dim, wd, xb));
        } else {
            block_matmul_acc(h.data(), i_dim, wd, out);
        }
        drop(h);
        let delta = ctx.device.end_scope(scope);
        ctx.note_mlp_transient(delta);
        Ok(())
    }

    /// Final RMS norm before the LM head.
    pub fn final_rmsnorm(&self, x: &Tensor) -> Result<Tensor, BudgetExceeded> {
        rmsnorm(x, &self.weights.final_norm, self.cfg.norm_eps)
    }

    /// `logits = x * W_head`; with one row the transient footprint is
    /// exactly the vocabulary row.
    pub fn lm_head_logits(&self, x: &Tensor, ctx: &mut RunCtx) -> Result<Tensor, BudgetExceeded> {
        let logits = matmul(x, &self.weights.lm_head)?;
        ctx.add_head_flops(x.rows(), self.cfg.hidden_dim, self.cfg.vocab_size);
        Ok(logits)
    }
}

/// `out_rows[i] = x.row(i) * w` for freshly zeroed destination rows.
fn project_rows(x: &Tensor, w: &Tensor, out_rows: &mut [f32], out_cols: usize) {
    let wdata = w.data();
    let cols = x.cols();
    if x.rows() >= PAR_ROWS_THRESHOLD {
        out_rows
            .par_chunks_mut(ROW_BLOCK * out_cols)
            .zip(x.data().par_chunks(ROW_BLOCK * cols))
            .for_each(|(dst, src)| block_matmul_acc(src, cols, wdata, dst));
    } else {
        block_matmul_acc(x.data(), cols, wdata, out_rows);
    }
}

/// Fill `h` with `swish(norm?(x_row) * w_gate) ⊙ (norm?(x_row) * w_up)` for
/// the rows `[row_start, row_start + n)` of `x`.
///
/// Works block-of-rows at a time: the gate projection accumulates directly
/// into `h`, the up projection into a block-sized scratch, then the swish
/// gating combines them in place. The scratch is bounded by the row block
/// (it models on-chip working memory and is not pool-charged); `h` is the
/// only sequence-sized intermediate.
fn gated_up(
    x: &Tensor,
    row_start: usize,
    n: usize,
    norm: Option<(&Tensor, f32)>,
    w_gate: &Tensor,
    w_up: &Tensor,
    h: &mut Tensor,
) {
    let d = x.cols();
    let i_dim = h.cols();
    debug_assert_eq!(h.rows(), n);
    let (wg, wu) = (w_gate.data(), w_up.data());
    let xdata = &x.data()[row_start * d..(row_start + n) * d];

    // nbuf: the (normalized) input rows for this block; up: the up
    // projection of the block.
    let compute = |nbuf: &mut Vec<f32>, up: &mut Vec<f32>, x_block: &[f32], h_block: &mut [f32]| {
        let rows = x_block.len() / d;
        let normed: &[f32] = match norm {
            Some((gain, eps)) => {
                for (src, dst) in x_block.chunks_exact(d).zip(nbuf.chunks_exact_mut(d)) {
                    rmsnorm_row(src, gain.data(), eps, dst);
                }
                &nbuf[..rows * d]
            }
            None => x_block,
        };
        block_matmul_acc(normed, d, wg, h_block);
        let up = &mut up[..rows * i_dim];
        up.iter_mut().for_each(|u| *u = 0.0);
        block_matmul_acc(normed, d, wu, up);
        for (g, &u) in h_block.iter_mut().zip(up.iter()) {
            *g = swish(*g) * u;
        }
    };

    if n >= PAR_ROWS_THRESHOLD {
        h.data_mut()
            .par_chunks_mut(ROW_BLOCK * i_dim)
            .zip(xdata.par_chunks(ROW_BLOCK * d))
            .for_each_init(
                || {
                    (
                        vec![0.0f32; ROW_BLOCK * d],
                        vec![0.0f32; ROW_BLOCK * i_dim],
                    )
                },
                |(nbuf, up), (h_block, x_block)| compute(nbuf, up, x_block, h_block),
            );
    } else {
        let mut nbuf = vec![0.0f32; n * d];
        let mut up = vec![0.0f32; n * i_dim];
        compute(&mut nbuf, &mut up, xdata, h.data_mut());
    }
}

/// Key positions processed per streaming tile. Tiles are anchored at
/// absolute cache position 0, so every strategy sees identical tile
/// boundaries for a given query — a prerequisite for bitwise equivalence.
const POS_TILE: usize = 128;

/// One tile step of the streaming softmax for a single `(row, head)` state:
/// rescale the running accumulator by the max shift, then fold the tile's
/// exponentiated scores and value rows in ascending position order.
///
/// `scores` holds the scaled scores for the visible tile positions and is
/// overwritten with the exponential weights. The arithmetic here is the
/// single source of truth for attention — both the wide (blocked) and
/// narrow (decode) layouts call it, so their outputs are bitwise equal.
#[inline]
fn tile_softmax_update(
    scores: &mut [f32],
    vdata: &[f32],
    kv_dim: usize,
    kvh_off: usize,
    tile0: usize,
    hd: usize,
    m: &mut f32,
    l: &mut f32,
    acc: &mut [f32],
) {
    if scores.is_empty() {
        return;
    }
    let mut m_new = *m;
    for &s in scores.iter() {
        if s > m_new {
            m_new = s;
        }
    }
    let c = fast_exp(*m - m_new);
    // Exponentials are independent per position; this loop vectorizes.
    for s in scores.iter_mut() {
        *s = fast_exp(*s - m_new);
    }
    *l = *l * c + sum_tree(scores);
    for a in acc.iter_mut() {
        *a *= c;
    }
    for (p, &w) in scores.iter().enumerate() {
        let vslice = &vdata[(tile0 + p) * kv_dim + kvh_off..][..hd];
        for (a, &ve) in acc.iter_mut().zip(vslice) {
            *a += w * ve;
        }
    }
    *m = m_new;
}

/// Streaming causal softmax attention over the cache, visiting keys in
/// ascending position with fixed-size tiles (the CPU analogue of a
/// flash-style kernel: transient state per query is one accumulator row
/// plus a constant-size tile, never a full score matrix).
///
/// Scores accumulate in ascending element order per position — the same
/// per-element contract as the matmuls — so a query row's output depends
/// only on `(q row, cache contents)`, bitwise, regardless of how rows were
/// grouped into calls or which execution layout below computed it.
fn attention_core(
    cfg: &ModelConfig,
    q: &Tensor,
    kv: &LayerKv,
    start_position: usize,
    out: &mut Tensor,
) {
    let (n_heads, hd) = (cfg.n_heads, cfg.head_dim);
    let kv_dim = cfg.kv_dim();
    let group = n_heads / cfg.n_kv_heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let kdata = kv.k.data();
    let vdata = kv.v.data();
    let qdata = q.data();
    let d = cfg.hidden_dim;

    if q.rows() >= PAR_ROWS_THRESHOLD {
        // Wide layout: blocks of query rows; scores for a whole tile are
        // computed against a transposed key tile (vectorized across
        // positions) before the streaming update consumes them.
        let make_scratch = || Scratch {
            m: vec![f32::NEG_INFINITY; ROW_BLOCK * n_heads],
            l: vec![0.0f32; ROW_BLOCK * n_heads],
            k_t: vec![0.0f32; hd * POS_TILE],
            scores: vec![0.0f32; ROW_BLOCK * n_heads * POS_TILE],
        };
        struct Scratch {
            m: Vec<f32>,
            l: Vec<f32>,
            k_t: Vec<f32>,
            scores: Vec<f32>,
        }

        out.data_mut()
            .par_chunks_mut(ROW_BLOCK * d)
            .enumerate()
            .for_each_init(make_scratch, |sc, (bi, out_block)| {
                let row0 = bi * ROW_BLOCK;
                let rows_here = out_block.len() / d;
                let n_states = rows_here * n_heads;
                sc.m[..n_states].fill(f32::NEG_INFINITY);
                sc.l[..n_states].fill(0.0);
                let last_visible = start_position + row0 + rows_here; // exclusive
                let mut tile0 = 0;
                while tile0 < last_visible {
                    let tile_len = POS_TILE.min(last_visible - tile0);
                    for kvh in 0..cfg.n_kv_heads {
                        // Transpose this head's keys so the score loop
                        // vectorizes across tile positions.
                        for k in 0..hd {
                            let col = &mut sc.k_t[k * tile_len..(k + 1) * tile_len];
                            for (p, c) in col.iter_mut().enumerate() {
                                *c = kdata[(tile0 + p) * kv_dim + kvh * hd + k];
                            }
                        }
                        for r in 0..rows_here {
                            // Positions of this tile the row may attend.
                            let vis = (start_position + row0 + r + 1)
                                .min(tile0 + tile_len)
                                .saturating_sub(tile0);
                            if vis == 0 {
                                continue;
                            }
                            for head in kvh * group..(kvh + 1) * group {
                                let st = r * n_heads + head;
                                let srow = &mut sc.scores[st * POS_TILE..][..vis];
                                srow.fill(0.0);
                                let qh = &qdata[(row0 + r) * d + head * hd..][..hd];
                                for (k, &qk) in qh.iter().enumerate() {
                                    let col = &sc.k_t[k * tile_len..k * tile_len + vis];
                                    for (sv, &kval) in srow.iter_mut().zip(col) {
                                        *sv += qk * kval;
                                    }
                                }
                                for sv in srow.iter_mut() {
                                    *sv *= scale;
                                }
                            }
                        }
                    }
                    for r in 0..rows_here {
                        let vis = (start_position + row0 + r + 1)
                            .min(tile0 + tile_len)
                            .saturating_sub(tile0);
                        if vis == 0 {
                            continue;
                        }
                        let acc_row = &mut out_block[r * d..(r + 1) * d];
                        for (head, acc) in acc_row.chunks_exact_mut(hd).enumerate() {
                            let st = r * n_heads + head;
                            tile_softmax_update(
                                &mut sc.scores[st * POS_TILE..][..vis],
                                vdata,
                                kv_dim,
                                (head / group) * hd,
                                tile0,
                                hd,
                                &mut sc.m[st],
                                &mut sc.l[st],
                                acc,
                            );
                        }
                    }
                    tile0 += tile_len;
                }
                for r in 0..rows_here {
                    for head in 0..n_heads {
                        let lv = sc.l[r * n_heads + head];
                        for o in &mut out_block[r * d + head * hd..][..hd] {
                            *o /= lv;
                        }
                    }
                }
            });
    } else {
        // Narrow layout (decoding): one task per (row, head) pair, same
        // tile walk and the same update arithmetic.
        out.data_mut()
            .par_chunks_mut(hd)
            .enumerate()
            .for_each_init(
                || vec![0.0f32; POS_TILE],
                |srow, (idx, out_slice)| {
                    let row = idx / n_heads;
                    let head = idx % n_heads;
                    let kvh = head / group;
                    let qh = &qdata[row * d + head * hd..][..hd];
                    let mut m = f32::NEG_INFINITY;
                    let mut l = 0.0f32;
                    out_slice.iter_mut().for_each(|o| *o = 0.0);
                    let visible = start_position + row + 1;
                    let mut tile0 = 0;
                    while tile0 < visible {
                        let vis = POS_TILE.min(visible - tile0);
                        let srow = &mut srow[..vis];
                        for (p, sv) in srow.iter_mut().enumerate() {
                            let kslice = &kdata[(tile0 + p) * kv_dim + kvh * hd..][..hd];
                            let mut s = 0.0f32;
                            for (&a, &b) in qh.iter().zip(kslice) {
                                s += a * b;
                            }
                            *sv = s;
                        }
                        for sv in srow.iter_mut() {
                            *sv *= scale;
                        }
                        tile_softmax_update(
                            srow,
                            vdata,
                            kv_dim,
                            kvh * hd,
                            tile0,
                            hd,
                            &mut m,
                            &mut l,
                            out_slice,
                        );
                        tile0 += vis;
                    }
                    for o in out_slice.iter_mut() {
                        *o /= l;
                    }
                },
            );
    }
}
