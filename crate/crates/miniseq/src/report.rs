//! Run reports: the measured and predicted numbers for one experiment,
//! with schema-stable JSON and CSV emission.

use serde::{Deserialize, Serialize};

use crate::analytics::MemoryBreakdown;
use crate::config::RunConfig;
use crate::context::FlopBreakdown;
use crate::memtrack::MemSnapshot;
use crate::tensor::Tensor;

/// FNV-1a 64-bit over a byte stream; stable across platforms and builds.
pub fn fnv1a64(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Order-stable digest of a logits tensor: FNV-1a over the little-endian
/// bit patterns in row-major order.
pub fn logits_checksum(t: &Tensor) -> u64 {
    fnv1a64(t.data().iter().flat_map(|v| v.to_bits().to_le_bytes()))
}

/// Ledger totals in report form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LedgerTotals {
    pub bytes_device_to_host: u64,
    pub bytes_host_to_device: u64,
    pub transfer_count: u64,
    pub simulated_transfer_seconds: f64,
}

/// Everything one run produced. Decode-stage fields are absent (not null)
/// when the run failed before reaching them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub strategy_label: String,
    pub seq_len: usize,
    pub decode_tokens: usize,
    /// Stage that hit the budget, when the run failed: `init`, `prefill`,
    /// `reload`, or `decode`.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub failed_stage: Option<String>,

    pub weights_bytes: u64,
    pub staging_bytes: u64,
    pub device_peak_bytes: u64,
    pub host_peak_bytes: u64,
    pub mlp_transient_peak_bytes: u64,
    pub ledger: LedgerTotals,

    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub prefill_wall_seconds: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub decode_wall_seconds: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub decode_tokens_per_second: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub logits_checksum: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub generated_tokens: Option<Vec<u32>>,

    pub flops: FlopBreakdown,
    pub analytic: MemoryBreakdown,
    pub snapshots: Vec<MemSnapshot>,
}

/// Column set for the one-row CSV form; fixed for every strategy.
pub const CSV_HEADER: &str = "strategy,seq_len,decode_tokens,failed_stage,weights_bytes,\
device_peak_bytes,host_peak_bytes,mlp_transient_peak_bytes,bytes_device_to_host,\
bytes_host_to_device,simulated_transfer_seconds,prefill_wall_seconds,decode_wall_seconds,\
decode_tokens_per_second,logits_checksum,total_flops,analytic_total_bytes";

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    fn fmt_opt<T: std::fmt::Display>(v: &Option<T>) -> String {
        v.as_ref().map(|x| x.to_string()).unwrap_or_default()
    }

    /// One CSV row matching [`CSV_HEADER`].
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.strategy_label,
            self.seq_len,
            self.decode_tokens,
            self.failed_stage.clone().unwrap_or_default(),
            self.weights_bytes,
            self.device_peak_bytes,
            self.host_peak_bytes,
            self.mlp_transient_peak_bytes,
            self.ledger.bytes_device_to_host,
            self.ledger.bytes_host_to_device,
            self.ledger.simulated_transfer_seconds,
            Self::fmt_opt(&self.prefill_wall_seconds),
            Self::fmt_opt(&self.decode_wall_seconds),
            Self::fmt_opt(&self.decode_tokens_per_second),
            self.logits_checksum.clone().unwrap_or_default(),
            self.flops.total(),
            self.analytic.total_bytes,
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{CSV_HEADER}\n{}\n", self.to_csv_row())
    }
}
