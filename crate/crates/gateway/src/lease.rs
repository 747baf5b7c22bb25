//! Device leases: acquire, heartbeat, release and expiry.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Heartbeats a lease may miss before it expires.
pub const MAX_MISSED: u64 = 3;
pub const DEFAULT_INTERVAL_MS: u64 = 5_000;

/// Millisecond time source.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

pub struct SystemClock {
    start: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        Self { start: Instant::now() }
    }
}

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        self.start.elapsed().as_millis() as u64
    }
}

/// Manually advanced clock for tests.
#[derive(Default)]
pub struct FakeClock(AtomicU64);

impl FakeClock {
    pub fn advance(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for FakeClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lease {
    pub lease_id: u64,
    pub device_id: String,
    pub holder_id: String,
    pub granted_at_ms: u64,
    pub heartbeat_interval_ms: u64,
    pub last_heartbeat_ms: u64,
}

impl Lease {
    pub fn missed_heartbeats(&self, now_ms: u64) -> u64 {
        now_ms.saturating_sub(self.last_heartbeat_ms) / self.heartbeat_interval_ms
    }

    pub fn is_expired(&self, now_ms: u64) -> bool {
        self.missed_heartbeats(now_ms) >= MAX_MISSED
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LeaseError {
    #[error("no matching device is free")]
    NoDeviceAvailable,
    #[error("lease {0} is unknown or expired")]
    Expired(u64),
}

/// Which devices an acquirer accepts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DeviceFilter {
    pub app: Option<String>,
}

#[derive(Debug, Default)]
struct Inner {
    /// Device id to hosted app.
    devices: BTreeMap<String, String>,
    by_device: HashMap<String, u64>,
    leases: HashMap<u64, Lease>,
    next_id: u64,
}

impl Inner {
    fn drop_lease(&mut self, id: u64) -> Option<Lease> {
        let lease = self.leases.remove(&id)?;
        self.by_device.remove(&lease.device_id);
        Some(lease)
    }

    fn expire(&mut self, now: u64) -> Vec<Lease> {
        let mut dead: Vec<u64> = self.leases.values().filter(|l| l.is_expired(now)).map(|l| l.lease_id).collect();
        dead.sort_unstable();
        dead.into_iter().filter_map(|id| self.drop_lease(id)).collect()
    }
}

/// The single lease authority of a fleet. Every mutation takes one lock, so
/// at most one active lease ever names a device.
pub struct LeaseTable {
    clock: Arc<dyn Clock>,
    interval_ms: u64,
    inner: Mutex<Inner>,
}

impl LeaseTable {
    pub fn new(devices: impl IntoIterator<Item = (String, String)>, interval_ms: u64, clock: Arc<dyn Clock>) -> Self {
        assert!(interval_ms > 0, "heartbeat interval must be positive");
        let inner = Inner { devices: devices.into_iter().collect(), next_id: 1, ..Inner::default() };
        Self { clock, interval_ms, inner: Mutex::new(inner) }
    }

    pub fn interval_ms(&self) -> u64 {
        self.interval_ms
    }

    pub fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Grant the first free device (by id) that passes the filter.
    pub fn acquire(&self, holder: &str, filter: &DeviceFilter) -> Result<Lease, LeaseError> {
        let now = self.clock.now_ms();
        let mut inner = self.lock();
        inner.expire(now);
        let device = inner
            .devices
            .iter()
            .find(|(d, app)| !inner.by_device.contains_key(*d) && filter.app.as_ref().is_none_or(|a| a == *app))
            .map(|(d, _)| d.clone())
            .ok_or(LeaseError::NoDeviceAvailable)?;
        let lease = Lease {
            lease_id: inner.next_id,
            device_id: device.clone(),
            holder_id: holder.to_string(),
            granted_at_ms: now,
            heartbeat_interval_ms: self.interval_ms,
            last_heartbeat_ms: now,
        };
        inner.next_id += 1;
        inner.by_device.insert(device, lease.lease_id);
        inner.leases.insert(lease.lease_id, lease.clone());
        Ok(lease)
    }

    /// Run `f` on an active lease under the table lock; expired leases are dropped.
    fn with_active<T>(&self, id: u64, f: impl FnOnce(&mut Inner, u64) -> T) -> Result<T, LeaseError> {
        let now = self.clock.now_ms();
        let mut inner = self.lock();
        match inner.leases.get(&id) {
            Some(l) if !l.is_expired(now) => Ok(f(&mut inner, now)),
            Some(_) => {
                inner.drop_lease(id);
                Err(LeaseError::Expired(id))
            }
            None => Err(LeaseError::Expired(id)),
        }
    }

    /// The lease if it is still active.
    pub fn check(&self, id: u64) -> Result<Lease, LeaseError> {
        self.with_active(id, |inner, _| inner.leases[&id].clone())
    }

    pub fn heartbeat(&self, id: u64) -> Result<(), LeaseError> {
        self.with_active(id, |inner, now| {
            inner.leases.get_mut(&id).expect("active").last_heartbeat_ms = now;
        })
    }

    pub fn release(&self, id: u64) -> Result<Lease, LeaseError> {
        self.with_active(id, |inner, _| inner.drop_lease(id).expect("active"))
    }

    /// Free every lease that has missed too many heartbeats.
    pub fn sweep(&self) -> Vec<Lease> {
        let now = self.clock.now_ms();
        self.lock().expire(now)
    }

    pub fn release_all(&self) -> usize {
        let mut inner = self.lock();
        let n = inner.leases.len();
        inner.leases.clear();
        inner.by_device.clear();
        n
    }

    pub fn active(&self) -> Vec<Lease> {
        let mut out: Vec<Lease> = self.lock().leases.values().cloned().collect();
        out.sort_by_key(|l| l.lease_id);
        out
    }

    pub fn device_count(&self) -> usize {
        self.lock().devices.len()
    }
}
