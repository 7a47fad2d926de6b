//! Dense row-major tensors with deterministic kernels.
//!
//! Determinism is a contract here, not an optimization detail: every
//! reduction runs in a fixed, input-independent order, so computing any
//! row-partition of an input and concatenating the results is bitwise
//! identical to the unpartitioned call. That property is what lets the
//! prefill strategies be checked for exact logit equality.
//!
//! Two reduction shapes are used:
//!
//! - `matmul` accumulates strictly in ascending `k` per output element
//!   (the `ikj` loop order, which vectorizes across columns without
//!   reordering any additions);
//! - short dot products (`dot_tree`, used for attention scores and norm
//!   sums) accumulate into eight fixed lanes combined by a fixed tree.
//!
//! Both are deterministic for a given shape; neither depends on thread
//! count, because parallelism is only ever across independent output rows.
//!
//! Every tensor's bytes (`rows * cols * 4`) are charged to a memory pool
//! for its whole lifetime. Per-row working buffers of at most a few
//! thousand elements model on-chip scratch and are not pool-charged.

use rayon::prelude::*;

use crate::memtrack::{AllocHandle, BudgetExceeded, MemoryPool, Tier};

/// Bytes per element; the engine computes in 32-bit floats.
pub const ELEMENT_WIDTH: usize = 4;

/// Minimum number of output elements before a kernel bothers with rayon.
const PAR_THRESHOLD: usize = 16 * 1024;

// ── Scalar helpers ──────────────────────────────────────────────────

/// Fast exponential used for all softmax and swish evaluations.
///
/// Range-reduced degree-6 polynomial with a power-of-two bit shift;
/// accurate to a few ulp over the clamped domain and, critically, a fixed
/// sequence of f32 operations — the engine's softmax is *defined* by this
/// function.
#[inline]
pub fn fast_exp(x: f32) -> f32 {
    const LOG2E: f32 = 1.442_695_f32;
    const LN2_HI: f32 = 0.693_359_375_f32;
    const LN2_LO: f32 = -2.121_944_4e-4_f32;
    let x = x.clamp(-87.0, 88.0);
    let k = (x * LOG2E).round();
    let r = (x - k * LN2_HI) - k * LN2_LO;
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (0.166_666_67
                    + r * (0.041_666_67 + r * (0.008_333_334 + r * 0.001_388_889)))));
    f32::from_bits((p.to_bits() as i32 + ((k as i32) << 23)) as u32)
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + fast_exp(-x))
}

/// `swish(z) = z * sigmoid(z)`.
#[inline]
pub fn swish(x: f32) -> f32 {
    x * sigmoid(x)
}

/// Sum with eight fixed accumulation lanes and a fixed combine tree; the
/// tail (length % 8) is folded in ascending order afterwards.
#[inline]
pub fn sum_tree(xs: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 8];
    let main = xs.len() - xs.len() % 8;
    for chunk in xs[..main].chunks_exact(8) {
        for l in 0..8 {
            lanes[l] += chunk[l];
        }
    }
    let tree = ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
    xs[main..].iter().fold(tree, |acc, &x| acc + x)
}

/// Dot product with eight fixed accumulation lanes and a fixed combine
/// tree; the tail (length % 8) is folded in ascending order afterwards.
#[inline]
pub fn dot_tree(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f32; 8];
    let main = a.len() - a.len() % 8;
    for (ca, cb) in a[..main].chunks_exact(8).zip(b[..main].chunks_exact(8)) {
        for l in 0..8 {
            lanes[l] += ca[l] * cb[l];
        }
    }
    let tree = ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
    a[main..]
        .iter()
        .zip(&b[main..])
        .fold(tree, |acc, (&x, &y)| acc + x * y)
}

/// `out[j] += Σ_k row[k] * w[k*n + j]`, `k` strictly ascending per output.
#[inline]
pub fn row_matmul_acc(row: &[f32], w: &[f32], out: &mut [f32]) {
    let n = out.len();
    debug_assert_eq!(row.len() * n, w.len());
    for (k, &a) in row.iter().enumerate() {
        let wrow = &w[k * n..(k + 1) * n];
        for (o, &b) in out.iter_mut().zip(wrow) {
            *o += a * b;
        }
    }
}

/// Row count per task for blocked matmuls: small enough that the output
/// block stays cache-resident, large enough to amortize streaming `w`.
pub(crate) const ROW_BLOCK: usize = 64;

/// Blocked form of [`row_matmul_acc`] over a row block: each weight row is
/// streamed once and applied to every row of the block. Per output element
/// the accumulation order is identical to the row-at-a-time form (strictly
/// ascending `k`), so results are bitwise equal; only the memory traffic
/// changes.
pub(crate) fn block_matmul_acc(x_block: &[f32], k_dim: usize, w: &[f32], out_block: &mut [f32]) {
    let rows = x_block.len() / k_dim;
    debug_assert_eq!(x_block.len(), rows * k_dim);
    let n = out_block.len() / rows.max(1);
    debug_assert_eq!(w.len(), k_dim * n);
    for k in 0..k_dim {
        let wrow = &w[k * n..(k + 1) * n];
        for (xr, or) in x_block
            .chunks_exact(k_dim)
            .zip(out_block.chunks_exact_mut(n))
        {
            let a = xr[k];
            for (o, &b) in or.iter_mut().zip(wrow) {
                *o += a * b;
            }
        }
    }
}

/// Normalize `src` into `dst`: `dst[j] = (src[j] / sqrt(mean(src²) + eps)) * gain[j]`.
#[inline]
pub fn rmsnorm_row(src: &[f32], gain: &[f32], eps: f32, dst: &mut [f32]) {
    let mean_sq = dot_tree(src, src) / src.len() as f32;
    let denom = (mean_sq + eps).sqrt();
    for ((d, &x), &g) in dst.iter_mut().zip(src).zip(gain) {
        *d = (x / denom) * g;
    }
}

// ── Tensor ──────────────────────────────────────────────────────────

struct Charge {
    pool: MemoryPool,
    handle: Option<AllocHandle>,
}

impl Charge {
    fn new(pool: &MemoryPool, bytes: u64) -> Result<Self, BudgetExceeded> {
        let handle = if bytes == 0 {
            None
        } else {
            Some(pool.alloc(bytes)?)
        };
        Ok(Self {
            pool: pool.clone(),
            handle,
        })
    }
}

impl Drop for Charge {
    fn drop(&mut self) {
        if let Some(h) = self.handle.take() {
            self.pool.free(h);
        }
    }
}

/// A dense `rows x cols` matrix of f32, row-major, charged to one pool.
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
    charge: Charge,
}

impl Tensor {
    /// Allocate a zero-filled tensor, charging `rows * cols * 4` bytes.
    pub fn zeros(pool: &MemoryPool, rows: usize, cols: usize) -> Result<Self, BudgetExceeded> {
        let charge = Charge::new(pool, (rows * cols * ELEMENT_WIDTH) as u64)?;
        Ok(Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
            charge,
        })
    }

    /// Build a tensor from existing values.
    pub fn from_vec(
        pool: &MemoryPool,
        rows: usize,
        cols: usize,
        data: Vec<f32>,
    ) -> Result<Self, BudgetExceeded> {
        assert_eq!(data.len(), rows * cols, "data length does not match shape");
        let charge = Charge::new(pool, (rows * cols * ELEMENT_WIDTH) as u64)?;
        Ok(Self {
            rows,
            cols,
            data,
            charge,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Bytes charged to the pool for this tensor.
    pub fn bytes(&self) -> u64 {
        (self.rows * self.cols * ELEMENT_WIDTH) as u64
    }

    pub fn tier(&self) -> Tier {
        self.charge.pool.tier()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Append `rows` full rows, adjusting the pool charge by the delta
    /// (grow-in-place accounting; no transient double charge).
    pub fn append_rows(&mut self, rows: &[f32]) -> Result<(), BudgetExceeded> {
        assert_eq!(rows.len() % self.cols, 0, "ragged row append");
        self.grow_charge(self.data.len() + rows.len())?;
        self.data.extend_from_slice(rows);
        self.rows += rows.len() / self.cols;
        Ok(())
    }

    /// Append `n` zero rows with the same grow-in-place accounting.
    pub fn append_zero_rows(&mut self, n: usize) -> Result<(), BudgetExceeded> {
        self.grow_charge(self.data.len() + n * self.cols)?;
        self.data.resize(self.data.len() + n * self.cols, 0.0);
        self.rows += n;
        Ok(())
    }

    fn grow_charge(&mut self, new_elements: usize) -> Result<(), BudgetExceeded> {
        let new_bytes = (new_elements * ELEMENT_WIDTH) as u64;
        match self.charge.handle {
            Some(h) => self.charge.handle = Some(self.charge.pool.grow(h, new_bytes)?),
            None => self.charge.handle = Some(self.charge.pool.alloc(new_bytes)?),
        }
        Ok(())
    }

    /// Mutable view of rows `[start, start + n)` as one flat slice.
    pub fn rows_slice_mut(&mut self, start: usize, n: usize) -> &mut [f32] {
        &mut self.data[start * self.cols..(start + n) * self.cols]
    }

    /// Move the charge to another pool, recording traffic in `ledger`.
    /// The element data is untouched, so content is preserved bit-exactly.
    pub fn transfer_to(
        &mut self,
        destination: &MemoryPool,
        ledger: &crate::memtrack::TransferLedger,
    ) -> Result<(), BudgetExceeded> {
        if let Some(h) = self.charge.handle {
            let new_handle = self.charge.pool.transfer(h, destination, ledger)?;
            self.charge.handle = Some(new_handle);
        }
        self.charge.pool = destination.clone();
        Ok(())
    }

    /// Bitwise equality of shape and every element.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    fn assert_device(&self, what: &str) {
        assert_eq!(
            self.tier(),
            Tier::Device,
            "{what} requires a device-resident tensor"
        );
    }
}

// ── Kernels ─────────────────────────────────────────────────────────

/// `a (m x k) * b (k x n) -> (m x n)`, accumulating over `k` in ascending
/// order for every output element.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, BudgetExceeded> {
    assert_eq!(a.cols, b.rows, "matmul inner dimensions disagree");
    a.assert_device("matmul");
    b.assert_device("matmul");
    let mut out = Tensor::zeros(&a.charge.pool, a.rows, b.cols)?;
    matmul_acc(a, b, &mut out);
    Ok(out)
}

/// `acc += a * b` with the same accumulation order as [`matmul`]. Since the
/// additions into `acc` happen per output element after the row product is
/// folded in ascending `k`, `acc` starting at zero reproduces [`matmul`].
pub fn matmul_acc(a: &Tensor, b: &Tensor, acc: &mut Tensor) {
    assert_eq!(a.cols, b.rows, "matmul inner dimensions disagree");
    assert_eq!(acc.rows, a.rows, "accumulator rows disagree");
    assert_eq!(acc.cols, b.cols, "accumulator cols disagree");
    let (k, n) = (a.cols, b.cols);
    let bdata = &b.data;
    let work = a.rows * k * n;
    if work >= PAR_THRESHOLD && a.rows > 1 {
        acc.data
            .par_chunks_mut(ROW_BLOCK * n)
            .zip(a.data.par_chunks(ROW_BLOCK * k))
            .for_each(|(out_block, a_block)| block_matmul_acc(a_block, k, bdata, out_block));
    } else {
        block_matmul_acc(&a.data, k, bdata, &mut acc.data);
    }
}

/// Row-wise RMS normalization with learned gain.
pub fn rmsnorm(x: &Tensor, gain: &Tensor, eps: f32) -> Result<Tensor, BudgetExceeded> {
    assert_eq!(gain.cols, x.cols, "gain width disagrees");
    assert_eq!(gain.rows, 1, "gain must be a single row");
    assert!(eps >= 0.0);
    x.assert_device("rmsnorm");
    let mut out = Tensor::zeros(&x.charge.pool, x.rows, x.cols)?;
    let cols = x.cols;
    let g = &gain.data;
    if x.rows * cols >= PAR_THRESHOLD {
        out.data
            .par_chunks_mut(cols)
            .zip(x.data.par_chunks(cols))
            .for_each(|(dst, src)| rmsnorm_row(src, g, eps, dst));
    } else {
        for (dst, src) in out.data.chunks_mut(cols).zip(x.data.chunks(cols)) {
            rmsnorm_row(src, g, eps, dst);
        }
    }
    Ok(out)
}

/// Rotate query/key pairs in place. Row `i` uses absolute position
/// `start_position + i`; pair `j` of every head spans elements
/// `(2j, 2j+1)` and rotates by `position * theta^(-2j / head_dim)`.
pub fn rope_apply(
    x: &mut Tensor,
    n_heads: usize,
    head_dim: usize,
    start_position: usize,
    theta: f32,
) {
    assert_eq!(x.cols, n_heads * head_dim, "shape is not heads x head_dim");
    let (rows, cols) = (x.rows, x.cols);
    rope_rows(
        &mut x.data[..rows * cols],
        n_heads,
        head_dim,
        start_position,
        theta,
    );
}

/// [`rope_apply`] over a flat slice of rows (used to rotate freshly
/// appended cache rows in place). The slice length must be a multiple of
/// `n_heads * head_dim`; the first row sits at `start_position`.
pub fn rope_rows(
    data: &mut [f32],
    n_heads: usize,
    head_dim: usize,
    start_position: usize,
    theta: f32,
) {
    assert_eq!(head_dim % 2, 0, "rope requires an even head_dim");
    let cols = n_heads * head_dim;
    assert_eq!(data.len() % cols, 0, "ragged rope slice");
    let half = head_dim / 2;
    let freqs: Vec<f32> = (0..half)
        .map(|j| theta.powf(-((2 * j) as f32) / head_dim as f32))
        .collect();
    let apply_row = |(i, row): (usize, &mut [f32])| {
        let pos = (start_position + i) as f32;
        for h in 0..n_heads {
            let base = h * head_dim;
            for (j, &f) in freqs.iter().enumerate() {
                let angle = pos * f;
                let (sin, cos) = angle.sin_cos();
                let a = row[base + 2 * j];
                let b = row[base + 2 * j + 1];
                row[base + 2 * j] = a * cos - b * sin;
                row[base + 2 * j + 1] = a * sin + b * cos;
            }
        }
    };
    if data.len() >= PAR_THRESHOLD {
        data.par_chunks_mut(cols).enumerate().for_each(apply_row);
    } else {
        data.chunks_mut(cols).enumerate().for_each(apply_row);
    }
}

/// Copy of the final row, charged as a fresh `1 x d` tensor.
pub fn slice_last_token(x: &Tensor) -> Result<Tensor, BudgetExceeded> {
    assert!(x.rows >= 1, "slice_last_token on an empty tensor");
    Tensor::from_vec(&x.charge.pool, 1, x.cols, x.row(x.rows - 1).to_vec())
}

/// Concatenate row blocks in order. With parts produced from a row split
/// this reproduces the unpartitioned tensor exactly.
pub fn concat_seq(parts: &[&Tensor]) -> Result<Tensor, BudgetExceeded> {
    assert!(!parts.is_empty(), "concat of zero parts");
    let cols = parts[0].cols;
    assert!(
        parts.iter().all(|p| p.cols == cols),
        "concat parts disagree on width"
    );
    let rows: usize = parts.iter().map(|p| p.rows).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for p in parts {
        data.extend_from_slice(&p.data);
    }
    Tensor::from_vec(&parts[0].charge.pool, rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dev() -> MemoryPool {
        MemoryPool::unbounded(Tier::Device)
    }

    fn t(pool: &MemoryPool, rows: usize, cols: usize, v: &[f32]) -> Tensor {
        Tensor::from_vec(pool, rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let p = dev();
        let a = t(&p, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let i2 = t(&p, 2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let c = matmul(&a, &i2).unwrap();
        assert!(c.bits_eq(&a));
    }

    #[test]
    fn matmul_hand_values() {
        let p = dev();
        let a = t(&p, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&p, 2, 2, &[5.0, 6.0, 7.0, 8.0]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    #[should_panic(expected = "inner dimensions")]
    fn matmul_shape_mismatch_panics() {
        let p = dev();
        let a = t(&p, 2, 3, &[0.0; 6]);
        let b = t(&p, 2, 2, &[0.0; 4]);
        let _ = matmul(&a, &b);
    }

    #[test]
    fn matmul_row_split_is_bitwise_identical() {
        let p = dev();
        let (s, k, n) = (23, 17, 13);
        let mut vals = Vec::new();
        for i in 0..s * k {
            vals.push(((i * 2654435761) % 1000) as f32 * 0.001 - 0.5);
        }
        let a = t(&p, s, k, &vals);
        let mut bvals = Vec::new();
        for i in 0..k * n {
            bvals.push(((i * 40503) % 997) as f32 * 0.002 - 1.0);
        }
        let b = t(&p, k, n, &bvals);

        let whole = matmul(&a, &b).unwrap();
        for split in [1usize, 7, 11, 22] {
            let top = t(&p, split, k, &a.data()[..split * k]);
            let bot = t(&p, s - split, k, &a.data()[split * k..]);
            let c1 = matmul(&top, &b).unwrap();
            let c2 = matmul(&bot, &b).unwrap();
            let joined = concat_seq(&[&c1, &c2]).unwrap();
            assert!(joined.bits_eq(&whole), "split at {split} diverged");
        }
    }

    #[test]
    fn rmsnorm_constant_row() {
        let p = dev();
        let x = t(&p, 1, 4, &[2.0, 2.0, 2.0, 2.0]);
        let gain = t(&p, 1, 4, &[1.0; 4]);
        let y = rmsnorm(&x, &gain, 0.0).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn rmsnorm_hand_values() {
        let p = dev();
        let x = t(&p, 1, 2, &[3.0, 4.0]);
        let gain = t(&p, 1, 2, &[1.0, 1.0]);
        let y = rmsnorm(&x, &gain, 0.0).unwrap();
        // rms = sqrt(12.5)
        assert!((y.data()[0] - 0.848_528_14).abs() < 1e-6);
        assert!((y.data()[1] - 1.131_370_85).abs() < 1e-6);
    }

    #[test]
    fn rmsnorm_zeros_with_eps() {
        let p = dev();
        let x = t(&p, 2, 3, &[0.0; 6]);
        let gain = t(&p, 1, 3, &[1.0; 3]);
        let y = rmsnorm(&x, &gain, 1e-6).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let p = dev();
        let vals = [0.3f32, -1.2, 0.7, 2.0];
        let mut x = t(&p, 1, 4, &vals);
        rope_apply(&mut x, 2, 2, 0, 10_000.0);
        // angle 0 for every pair: cos=1, sin=0
        assert_eq!(x.data(), &vals);
    }

    #[test]
    fn rope_one_radian() {
        let p = dev();
        let mut x = t(&p, 2, 2, &[0.0, 0.0, 1.0, 0.0]);
        // head_dim=2 -> single pair with frequency theta^0 = 1; row 1 is
        // position 1, so it rotates by exactly 1 radian.
        rope_apply(&mut x, 1, 2, 0, 10_000.0);
        assert!((x.row(1)[0] - 0.540_302_31).abs() < 1e-6);
        assert!((x.row(1)[1] - 0.841_470_98).abs() < 1e-6);
    }

    #[test]
    fn rope_chunk_offset_matches_full() {
        let p = dev();
        let vals: Vec<f32> = (0..6 * 8).map(|i| (i as f32 * 0.37).sin()).collect();
        let mut full = t(&p, 6, 8, &vals);
        rope_apply(&mut full, 2, 4, 0, 10_000.0);

        let mut head = t(&p, 2, 8, &vals[..2 * 8]);
        let mut tail = t(&p, 4, 8, &vals[2 * 8..]);
        rope_apply(&mut head, 2, 4, 0, 10_000.0);
        rope_apply(&mut tail, 2, 4, 2, 10_000.0);
        let joined = concat_seq(&[&head, &tail]).unwrap();
        assert!(joined.bits_eq(&full));
    }

    #[test]
    #[should_panic(expected = "even head_dim")]
    fn rope_odd_head_dim_panics() {
        let p = dev();
        let mut x = t(&p, 1, 3, &[0.0; 3]);
        rope_apply(&mut x, 1, 3, 0, 10_000.0);
    }

    #[test]
    fn slice_last_token_cases() {
        let p = dev();
        let single = t(&p, 1, 3, &[1.0, 2.0, 3.0]);
        assert!(slice_last_token(&single).unwrap().bits_eq(&single));

        let x = t(&p, 3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let last = slice_last_token(&x).unwrap();
        assert_eq!(last.data(), &[5.0, 6.0]);
    }

    #[test]
    fn slice_last_token_charges_one_row() {
        let p = dev();
        let x = t(&p, 3, 7, &[0.5; 21]);
        let before = p.current();
        let last = slice_last_token(&x).unwrap();
        assert_eq!(p.current() - before, (7 * ELEMENT_WIDTH) as u64);
        drop(last);
        assert_eq!(p.current(), before);
    }

    #[test]
    fn concat_preserves_order() {
        let p = dev();
        let a = t(&p, 3, 1, &[1.0, 2.0, 3.0]);
        let b = t(&p, 3, 1, &[4.0, 5.0, 6.0]);
        let c = t(&p, 2, 1, &[7.0, 8.0]);
        let joined = concat_seq(&[&a, &b, &c]).unwrap();
        assert_eq!(joined.rows(), 8);
        assert_eq!(joined.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);

        let alone = concat_seq(&[&a]).unwrap();
        assert!(alone.bits_eq(&a));
    }

    #[test]
    fn tensor_charge_tracks_lifetime() {
        let p = dev();
        assert_eq!(p.current(), 0);
        let x = Tensor::zeros(&p, 10, 10).unwrap();
        assert_eq!(p.current(), 400);
        assert_eq!(x.bytes(), 400);
        drop(x);
        assert_eq!(p.current(), 0);
        assert_eq!(p.peak(), 400);
    }

    #[test]
    fn append_rows_charges_delta_only() {
        let p = MemoryPool::with_capacity(Tier::Device, 1000);
        let mut x = Tensor::zeros(&p, 0, 10).unwrap();
        assert_eq!(p.current(), 0);
        x.append_rows(&[1.0; 20]).unwrap();
        assert_eq!(x.rows(), 2);
        assert_eq!(p.current(), 80);
        assert_eq!(p.peak(), 80);
        // 22 rows would be 880 bytes; growing there must never spike above
        // the final size.
        x.append_rows(&[2.0; 200]).unwrap();
        assert_eq!(p.current(), 880);
        assert_eq!(p.peak(), 880);
    }

    #[test]
    fn fast_exp_tracks_reference() {
        for i in -800..=800 {
            let x = i as f32 * 0.1;
            let got = fast_exp(x);
            let want = x.exp();
            let rel = if want == 0.0 {
                got.abs()
            } else {
                ((got - want) / want).abs()
            };
            assert!(rel < 3e-6, "x={x}: {got} vs {want}");
        }
    }

    #[test]
    fn matmul_acc_from_zero_matches_matmul() {
        let p = dev();
        let a = t(&p, 4, 3, &(0..12).map(|i| i as f32 * 0.25).collect::<Vec<_>>());
        let b = t(&p, 3, 5, &(0..15).map(|i| (i as f32).cos()).collect::<Vec<_>>());
        let c = matmul(&a, &b).unwrap();
        let mut acc = Tensor::zeros(&p, 4, 5).unwrap();
        matmul_acc(&a, &b, &mut acc);
        assert!(acc.bits_eq(&c));
    }

    mod proptests {
        use super::*;
        use proptest::prelude::*;

        fn small_vals(len: usize) -> impl Strategy<Value = Vec<f32>> {
            proptest::collection::vec(-2.0f32..2.0, len)
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            // Row independence: op(split) concatenated == op(whole), bitwise,
            // for every partition point.
            #[test]
            fn rmsnorm_commutes_with_row_partition(
                vals in small_vals(9 * 6),
                gain in small_vals(6),
                split in 1usize..9,
            ) {
                let p = dev();
                let x = t(&p, 9, 6, &vals);
                let g = t(&p, 1, 6, &gain);
                let whole = rmsnorm(&x, &g, 1e-5).unwrap();
                let top = t(&p, split, 6, &vals[..split * 6]);
                let bot = t(&p, 9 - split, 6, &vals[split * 6..]);
                let y1 = rmsnorm(&top, &g, 1e-5).unwrap();
                let y2 = rmsnorm(&bot, &g, 1e-5).unwrap();
                let joined = concat_seq(&[&y1, &y2]).unwrap();
                prop_assert!(joined.bits_eq(&whole));
            }

            #[test]
            fn concat_of_split_roundtrips(vals in small_vals(8 * 3), a in 1usize..7) {
                let p = dev();
                let whole = t(&p, 8, 3, &vals);
                let first = t(&p, a, 3, &vals[..a * 3]);
                let second = t(&p, 8 - a, 3, &vals[a * 3..]);
                let joined = concat_seq(&[&first, &second]).unwrap();
                prop_assert!(joined.bits_eq(&whole));
            }
        }
    }
}
