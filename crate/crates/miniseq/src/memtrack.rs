//! Two-tier (device/host) memory accounting.
//!
//! Every tensor the engine touches is charged, byte-exactly, to a
//! [`MemoryPool`]. The device pool enforces a hard budget: an allocation that
//! would exceed it fails atomically with [`BudgetExceeded`], which is the
//! engine's out-of-memory signal and the thing the max-context search probes
//! for. The host pool is the offload target and is unbounded unless
//! configured otherwise.
//!
//! Inter-tier traffic goes through [`TransferLedger`], which counts bytes per
//! direction and converts them into simulated transfer time at a configured
//! bandwidth. Simulated time is reported separately from wall time so it can
//! never contaminate equivalence checks.
//!
//! Accounting is per tensor, not per page: there is no fragmentation model,
//! because the memory model this engine validates is byte-linear.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

/// Which side of the PCIe link a pool models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tier {
    /// The budget-enforced accelerator memory.
    Device,
    /// The offload target; unbounded by default.
    Host,
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tier::Device => write!(f, "device"),
            Tier::Host => write!(f, "host"),
        }
    }
}

/// An allocation request (or transfer destination) would overflow a pool's
/// capacity. The failing pool is left unchanged.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BudgetExceeded {
    pub tier: Tier,
    pub requested: u64,
    pub current: u64,
    pub capacity: u64,
}

impl fmt::Display for BudgetExceeded {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} budget exceeded: requested {} bytes with {}/{} in use",
            self.tier, self.requested, self.current, self.capacity
        )
    }
}

impl std::error::Error for BudgetExceeded {}

/// Handle to a live allocation. Plain data; freeing twice is a contract
/// violation and aborts the run via panic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AllocHandle {
    id: u64,
    bytes: u64,
}

impl AllocHandle {
    pub fn bytes(&self) -> u64 {
        self.bytes
    }
}

// ── Pool ────────────────────────────────────────────────────────────

struct ScopeFrame {
    start_current: u64,
    max_current: u64,
}

struct PoolInner {
    tier: Tier,
    capacity: u64,
    current: u64,
    peak: u64,
    next_id: u64,
    live: HashMap<u64, u64>,
    scopes: Vec<ScopeFrame>,
}

impl PoolInner {
    fn charge(&mut self, bytes: u64) -> Result<(), BudgetExceeded> {
        let next = self.current + bytes;
        if next > self.capacity {
            return Err(BudgetExceeded {
                tier: self.tier,
                requested: bytes,
                current: self.current,
                capacity: self.capacity,
            });
        }
        self.current = next;
        if next > self.peak {
            self.peak = next;
        }
        for frame in &mut self.scopes {
            if next > frame.max_current {
                frame.max_current = next;
            }
        }
        Ok(())
    }

    fn release(&mut self, bytes: u64) {
        debug_assert!(self.current >= bytes, "pool accounting underflow");
        self.current -= bytes;
    }
}

/// A byte-accurate memory pool for one tier.
///
/// `current` is always the sum of live allocation sizes; `peak` is the
/// high-water mark of `current` and never decreases. Cloning shares the
/// underlying pool. All mutations of one pool are expected to come from one
/// logical execution stream; the internal lock only keeps row-parallel
/// kernels safe, it is not a concurrency design.
#[derive(Clone)]
pub struct MemoryPool {
    inner: Arc<Mutex<PoolInner>>,
}

/// Token returned by [`MemoryPool::begin_scope`]; scopes must be ended in
/// LIFO order.
#[derive(Debug)]
#[must_use]
pub struct ScopeToken {
    depth: usize,
}

impl MemoryPool {
    /// A pool with a hard capacity in bytes.
    pub fn with_capacity(tier: Tier, capacity: u64) -> Self {
        Self {
            inner: Arc::new(Mutex::new(PoolInner {
                tier,
                capacity,
                current: 0,
                peak: 0,
                next_id: 1,
                live: HashMap::new(),
                scopes: Vec::new(),
            })),
        }
    }

    /// A pool without a budget (capacity `u64::MAX`).
    pub fn unbounded(tier: Tier) -> Self {
        Self::with_capacity(tier, u64::MAX)
    }

    /// Charge `bytes` to the pool. Fails atomically when the budget would be
    /// exceeded, leaving `current` unchanged.
    pub fn alloc(&self, bytes: u64) -> Result<AllocHandle, BudgetExceeded> {
        assert!(bytes > 0, "zero-byte allocation");
        let mut inner = self.inner.lock().unwrap();
        inner.charge(bytes)?;
        let id = inner.next_id;
        inner.next_id += 1;
        inner.live.insert(id, bytes);
        Ok(AllocHandle { id, bytes })
    }

    /// Release a live allocation. Freeing an unknown or already-freed handle
    /// is a programming error and panics.
    pub fn free(&self, handle: AllocHandle) {
        let mut inner = self.inner.lock().unwrap();
        let bytes = inner
            .live
            .remove(&handle.id)
            .unwrap_or_else(|| panic!("double free or unknown handle {}", handle.id));
        debug_assert_eq!(bytes, handle.bytes);
        inner.release(bytes);
    }

    /// Resize a live allocation in place, adjusting the charge by the size
    /// delta. Models an allocator that extends a region (the KV cache grows
    /// this way, one appended token at a time, without double-charging).
    pub fn grow(&self, handle: AllocHandle, new_bytes: u64) -> Result<AllocHandle, BudgetExceeded> {
        assert!(new_bytes > 0, "zero-byte grow");
        let mut inner = self.inner.lock().unwrap();
        let old = *inner
            .live
            .get(&handle.id)
            .unwrap_or_else(|| panic!("grow of unknown handle {}", handle.id));
        if new_bytes > old {
            inner.charge(new_bytes - old)?;
        } else {
            inner.release(old - new_bytes);
        }
        inner.live.insert(handle.id, new_bytes);
        Ok(AllocHandle {
            id: handle.id,
            bytes: new_bytes,
        })
    }

    /// Move a live allocation to `destination`, recording the traffic in
    /// `ledger`. The move is atomic: on failure the source allocation is
    /// left intact. Returns the handle in the destination pool.
    pub fn transfer(
        &self,
        handle: AllocHandle,
        destination: &MemoryPool,
        ledger: &TransferLedger,
    ) -> Result<AllocHandle, BudgetExceeded> {
        let (src_tier, dst_tier) = (self.tier(), destination.tier());
        assert_ne!(src_tier, dst_tier, "transfer within one tier");
        {
            let inner = self.inner.lock().unwrap();
            assert!(
                inner.live.contains_key(&handle.id),
                "transfer of unknown handle {}",
                handle.id
            );
        }
        let new_handle = destination.alloc(handle.bytes)?;
        self.free(handle);
        ledger.record(src_tier, handle.bytes);
        Ok(new_handle)
    }

    pub fn tier(&self) -> Tier {
        self.inner.lock().unwrap().tier
    }

    pub fn current(&self) -> u64 {
        self.inner.lock().unwrap().current
    }

    pub fn peak(&self) -> u64 {
        self.inner.lock().unwrap().peak
    }

    pub fn capacity(&self) -> u64 {
        self.inner.lock().unwrap().capacity
    }

    /// Reset the peak to the current level.
    pub fn reset_peak(&self) {
        let mut inner = self.inner.lock().unwrap();
        inner.peak = inner.current;
    }

    /// Start measuring the transient high-water mark above the current
    /// level. Scopes nest; end them in reverse order.
    pub fn begin_scope(&self) -> ScopeToken {
        let mut inner = self.inner.lock().unwrap();
        let current = inner.current;
        inner.scopes.push(ScopeFrame {
            start_current: current,
            max_current: current,
        });
        ScopeToken {
            depth: inner.scopes.len(),
        }
    }

    /// Finish a scope and return the peak number of bytes the pool held
    /// above the level at `begin_scope`.
    pub fn end_scope(&self, token: ScopeToken) -> u64 {
        let mut inner = self.inner.lock().unwrap();
        assert_eq!(inner.scopes.len(), token.depth, "scope ended out of order");
        let frame = inner.scopes.pop().expect("scope stack empty");
        frame.max_current - frame.start_current
    }
}

// ── Transfer ledger ─────────────────────────────────────────────────

struct LedgerInner {
    bytes_device_to_host: u64,
    bytes_host_to_device: u64,
    transfer_count: u64,
    bandwidth_bytes_per_sec: u64,
}

/// Monotone counters for inter-tier traffic plus simulated transfer time at
/// a fixed bandwidth (PCIe-class 25 GB/s by default).
#[derive(Clone)]
pub struct TransferLedger {
    inner: Arc<Mutex<LedgerInner>>,
}

/// Default simulated link bandwidth in bytes per second.
pub const DEFAULT_BANDWIDTH: u64 = 25_000_000_000;

impl TransferLedger {
    pub fn new(bandwidth_bytes_per_sec: u64) -> Self {
        assert!(bandwidth_bytes_per_sec > 0, "bandwidth must be positive");
        Self {
            inner: Arc::new(Mutex::new(LedgerInner {
                bytes_device_to_host: 0,
                bytes_host_to_device: 0,
                transfer_count: 0,
                bandwidth_bytes_per_sec,
            })),
        }
    }

    fn record(&self, from: Tier, bytes: u64) {
        let mut inner = self.inner.lock().unwrap();
        match from {
            Tier::Device => inner.bytes_device_to_host += bytes,
            Tier::Host => inner.bytes_host_to_device += bytes,
        }
        inner.transfer_count += 1;
    }

    pub fn bytes_device_to_host(&self) -> u64 {
        self.inner.lock().unwrap().bytes_device_to_host
    }

    pub fn bytes_host_to_device(&self) -> u64 {
        self.inner.lock().unwrap().bytes_host_to_device
    }

    pub fn transfer_count(&self) -> u64 {
        self.inner.lock().unwrap().transfer_count
    }

    /// Total moved bytes divided by the configured bandwidth.
    pub fn simulated_transfer_seconds(&self) -> f64 {
        let inner = self.inner.lock().unwrap();
        (inner.bytes_device_to_host + inner.bytes_host_to_device) as f64
            / inner.bandwidth_bytes_per_sec as f64
    }
}

impl Default for TransferLedger {
    fn default() -> Self {
        Self::new(DEFAULT_BANDWIDTH)
    }
}

// ── Snapshots ───────────────────────────────────────────────────────

/// A labelled point-in-time reading of both pools. Snapshots within one run
/// are ordered by capture time. `kv_device_bytes` additionally records how
/// much of the device charge is KV cache at the capture point; the CSV
/// stream keeps the four classic columns.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MemSnapshot {
    pub label: String,
    pub device_current: u64,
    pub device_peak: u64,
    pub host_current: u64,
    pub kv_device_bytes: u64,
}

/// Capture a snapshot of the two pools.
pub fn capture(
    label: impl Into<String>,
    device: &MemoryPool,
    host: &MemoryPool,
    kv_device_bytes: u64,
) -> MemSnapshot {
    MemSnapshot {
        label: label.into(),
        device_current: device.current(),
        device_peak: device.peak(),
        host_current: host.current(),
        kv_device_bytes,
    }
}

/// Serialize a snapshot stream to CSV with the stable column set
/// `label,device_current,device_peak,host_current` (bytes, base-10).
pub fn snapshots_to_csv(snapshots: &[MemSnapshot]) -> String {
    let mut out = String::from("label,device_current,device_peak,host_current\n");
    for s in snapshots {
        out.push_str(&format!(
            "{},{},{},{}\n",
            s.label, s.device_current, s.device_peak, s.host_current
        ));
    }
    out
}
