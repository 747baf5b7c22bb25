//! Blocking client and an [`EnvProvider`] that runs episodes through a fleet.

use std::net::TcpStream;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use guirl_core::action::Action;
use guirl_core::env::{EnvError, EnvProvider, EnvSession, Observation};
use guirl_core::tasks::Task;
use serde::Serialize;
use thiserror::Error;

use crate::fleet::FleetTopology;
use crate::frame::{read_frame, write_frame, Frame, Kind};
use crate::proto::{AcquireReq, Acquired, ErrorBody, ErrorCode, LeaseReq, ResultBody, StepReq};
use crate::route::route;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Io(String),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("{code:?}: {message}")]
    Remote { code: ErrorCode, message: String },
}

impl From<ClientError> for EnvError {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::Remote { code: ErrorCode::LeaseExpired, .. } => EnvError::LeaseExpired,
            ClientError::Io(m) | ClientError::Protocol(m) => EnvError::Transport(m),
            other => EnvError::Remote(other.to_string()),
        }
    }
}

/// One connection to a gateway node.
pub struct Conn {
    stream: TcpStream,
    next_id: u64,
}

impl Conn {
    pub fn connect(addr: &str) -> Result<Conn, ClientError> {
        let stream = TcpStream::connect(addr).map_err(|e| ClientError::Io(format!("{addr}: {e}")))?;
        let _ = stream.set_nodelay(true);
        Ok(Conn { stream, next_id: 1 })
    }

    /// Send a raw frame and return the reply, checking the correlation id.
    pub fn exchange(&mut self, frame: &Frame) -> Result<Frame, ClientError> {
        write_frame(&mut self.stream, frame).map_err(|e| ClientError::Io(e.to_string()))?;
        let reply = read_frame(&mut self.stream)
            .map_err(|e| ClientError::Io(e.to_string()))?
            .ok_or_else(|| ClientError::Io("connection closed".into()))?;
        if reply.correlation_id != frame.correlation_id {
            return Err(ClientError::Protocol(format!(
                "reply to {} answered {}",
                frame.correlation_id, reply.correlation_id
            )));
        }
        Ok(reply)
    }

    /// Send a request and expect a reply of `want`; ERROR replies become [`ClientError::Remote`].
    pub fn call(&mut self, kind: Kind, body: &impl Serialize, want: Kind) -> Result<Frame, ClientError> {
        let id = self.next_id;
        self.next_id += 1;
        let reply = self.exchange(&Frame::json(kind, id, body))?;
        match reply.kind {
            k if k == want => Ok(reply),
            Kind::Error => {
                let e: ErrorBody = reply.parse_body().map_err(|e| ClientError::Protocol(e.to_string()))?;
                Err(ClientError::Remote { code: e.code, message: e.message })
            }
            other => Err(ClientError::Protocol(format!("expected {want:?}, got {other:?}"))),
        }
    }

    pub fn acquire(&mut self, holder: &str, app: Option<&str>) -> Result<Acquired, ClientError> {
        let req = AcquireReq { holder: holder.into(), app: app.map(str::to_string) };
        self.call(Kind::Acquire, &req, Kind::Acquired)?
            .parse_body()
            .map_err(|e| ClientError::Protocol(e.to_string()))
    }

    pub fn heartbeat(&mut self, lease_id: u64) -> Result<(), ClientError> {
        self.call(Kind::Heartbeat, &LeaseReq { lease_id }, Kind::Result).map(|_| ())
    }

    pub fn release(&mut self, lease_id: u64) -> Result<(), ClientError> {
        self.call(Kind::Release, &LeaseReq { lease_id }, Kind::Result).map(|_| ())
    }

    pub fn step(&mut self, req: &StepReq) -> Result<Observation, ClientError> {
        self.call(Kind::Step, req, Kind::Observation)?
            .parse_body()
            .map_err(|e| ClientError::Protocol(e.to_string()))
    }

    pub fn verify(&mut self, lease_id: u64) -> Result<bool, ClientError> {
        let r: ResultBody = self
            .call(Kind::Verify, &LeaseReq { lease_id }, Kind::Result)?
            .parse_body()
            .map_err(|e| ClientError::Protocol(e.to_string()))?;
        r.success.ok_or_else(|| ClientError::Protocol("VERIFY reply without a verdict".into()))
    }
}

/// Runs episodes on fleet devices. Lease traffic goes to the node chosen by
/// hashing the holder id, device traffic to the node owning the device.
pub struct GatewayProvider {
    topology: Arc<FleetTopology>,
    nodes: Vec<String>,
    holder_prefix: String,
    counter: AtomicU64,
    pub acquire_timeout: Duration,
}

impl GatewayProvider {
    pub fn new(topology: FleetTopology, holder_prefix: impl Into<String>) -> Self {
        Self {
            nodes: topology.node_ids(),
            topology: Arc::new(topology),
            holder_prefix: holder_prefix.into(),
            counter: AtomicU64::new(0),
            acquire_timeout: Duration::from_secs(30),
        }
    }

    pub fn topology(&self) -> &FleetTopology {
        &self.topology
    }

    fn connect(&self, node: &str) -> Result<Conn, ClientError> {
        let addr = self
            .topology
            .node_addr(node)
            .ok_or_else(|| ClientError::Protocol(format!("unknown node `{node}`")))?;
        Conn::connect(addr)
    }

    /// Acquire a device for `app`, retrying while the fleet is busy.
    /// Returns the control connection, its node id, and the grant.
    pub fn lease(&self, app: &str) -> Result<(Conn, String, Acquired), ClientError> {
        let holder = format!("{}-{}", self.holder_prefix, self.counter.fetch_add(1, Ordering::Relaxed));
        let node = route(&holder, &self.nodes).ok_or_else(|| ClientError::Protocol("fleet has no nodes".into()))?;
        let mut ctrl = self.connect(node)?;
        let deadline = Instant::now() + self.acquire_timeout;
        let mut backoff = Duration::from_millis(1);
        loop {
            match ctrl.acquire(&holder, Some(app)) {
                Ok(a) => return Ok((ctrl, node.to_string(), a)),
                Err(ClientError::Remote { code: ErrorCode::NoDeviceAvailable, .. }) if Instant::now() < deadline => {
                    std::thread::sleep(backoff);
                    backoff = (backoff * 2).min(Duration::from_millis(20));
                }
                Err(e) => return Err(e),
            }
        }
    }
}

pub struct GatewaySession {
    ctrl: Conn,
    /// Connection to the device's node when it differs from the control node.
    device: Option<Conn>,
    lease: Acquired,
    obs: Observation,
    last_beat: Instant,
}

impl GatewaySession {
    fn device_conn(&mut self) -> &mut Conn {
        self.device.as_mut().unwrap_or(&mut self.ctrl)
    }

    fn keep_alive(&mut self) -> Result<(), ClientError> {
        if self.last_beat.elapsed() >= Duration::from_millis(self.lease.heartbeat_interval_ms / 2) {
            self.ctrl.heartbeat(self.lease.lease_id)?;
            self.last_beat = Instant::now();
        }
        Ok(())
    }

    pub fn lease(&self) -> &Acquired {
        &self.lease
    }
}

impl EnvSession for GatewaySession {
    fn observe(&self) -> Observation {
        self.obs.clone()
    }

    fn step(&mut self, action: Option<&Action>) -> Result<Observation, EnvError> {
        self.keep_alive()?;
        let req = StepReq { lease_id: self.lease.lease_id, reset: None, action: action.cloned() };
        self.obs = self.device_conn().step(&req)?;
        Ok(self.obs.clone())
    }

    fn verify(&mut self) -> Result<bool, EnvError> {
        self.keep_alive()?;
        let id = self.lease.lease_id;
        Ok(self.device_conn().verify(id)?)
    }
}

impl Drop for GatewaySession {
    fn drop(&mut self) {
        let _ = self.ctrl.release(self.lease.lease_id);
    }
}

impl EnvProvider for GatewayProvider {
    fn open(&self, task: &Task) -> Result<Box<dyn EnvSession>, EnvError> {
        let (mut ctrl, ctrl_node, lease) = self.lease(&task.app_id)?;
        let mut device = if lease.node == ctrl_node {
            None
        } else {
            match self.connect(&lease.node) {
                Ok(c) => Some(c),
                Err(e) => {
                    let _ = ctrl.release(lease.lease_id);
                    return Err(e.into());
                }
            }
        };
        let req = StepReq { lease_id: lease.lease_id, reset: Some(task.clone()), action: None };
        let obs = match device.as_mut().unwrap_or(&mut ctrl).step(&req) {
            Ok(o) => o,
            Err(e) => {
                let _ = ctrl.release(lease.lease_id);
                return Err(e.into());
            }
        };
        Ok(Box::new(GatewaySession { ctrl, device, lease, obs, last_beat: Instant::now() }))
    }
}
