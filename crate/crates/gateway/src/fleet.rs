//! Fleet description and the in-process fleet server.

use std::collections::{BTreeSet, HashMap};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use guirl_core::env::Scenario;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::runtime::Runtime;

use crate::backend::{serve_device, DeviceAdapter, SimAdapter};
use crate::lease::{Clock, LeaseTable, SystemClock, DEFAULT_INTERVAL_MS};
use crate::node::{serve_node, NodeCtx};
use crate::route::route;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("fleet spec: {0}")]
    Spec(String),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("runtime: {0}")]
    Runtime(std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub id: String,
    /// App the simulated device hosts.
    pub app: String,
}

/// What to serve: node ids, devices, and where to listen.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetSpec {
    pub nodes: Vec<String>,
    pub devices: Vec<DeviceSpec>,
    #[serde(default = "default_interval")]
    pub heartbeat_interval_ms: u64,
    #[serde(default = "default_host")]
    pub host: String,
    /// Node `i` listens on `base_port + i`; 0 picks free ports.
    #[serde(default)]
    pub base_port: u16,
}

fn default_interval() -> u64 {
    DEFAULT_INTERVAL_MS
}

fn default_host() -> String {
    "127.0.0.1".into()
}

impl FleetSpec {
    /// `nodes` gateway nodes and `per_app` devices for each app.
    pub fn uniform(nodes: usize, per_app: usize, apps: &[&str]) -> Self {
        Self {
            nodes: (0..nodes).map(|i| format!("gw-{i}")).collect(),
            devices: apps
                .iter()
                .flat_map(|a| (0..per_app).map(move |i| DeviceSpec { id: format!("{a}-{i:03}"), app: a.to_string() }))
                .collect(),
            heartbeat_interval_ms: DEFAULT_INTERVAL_MS,
            host: default_host(),
            base_port: 0,
        }
    }

    pub fn validate(&self, scenario: &Scenario) -> Result<(), GatewayError> {
        let bad = |m: String| Err(GatewayError::Spec(m));
        if self.nodes.is_empty() {
            return bad("at least one gateway node is required".into());
        }
        if self.heartbeat_interval_ms == 0 {
            return bad("heartbeat interval must be positive".into());
        }
        let mut seen = BTreeSet::new();
        for n in &self.nodes {
            if !seen.insert(n) {
                return bad(format!("duplicate node `{n}`"));
            }
        }
        let mut seen = BTreeSet::new();
        for d in &self.devices {
            if !seen.insert(&d.id) {
                return bad(format!("duplicate device `{}`", d.id));
            }
            if scenario.app(&d.app).is_err() {
                return bad(format!("device `{}` hosts unknown app `{}`", d.id, d.app));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeAddr {
    pub id: String,
    pub addr: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceAddr {
    pub id: String,
    pub app: String,
    pub backend: String,
    /// The node `route` assigns the device to.
    pub node: String,
}

/// Resolved addresses of a running fleet; this is what clients need.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FleetTopology {
    pub nodes: Vec<NodeAddr>,
    pub devices: Vec<DeviceAddr>,
    pub heartbeat_interval_ms: u64,
}

impl FleetTopology {
    pub fn node_ids(&self) -> Vec<String> {
        self.nodes.iter().map(|n| n.id.clone()).collect()
    }

    pub fn node_addr(&self, id: &str) -> Option<&str> {
        self.nodes.iter().find(|n| n.id == id).map(|n| n.addr.as_str())
    }
}

/// A running fleet: gateway nodes, device backends and the lease sweeper.
/// Dropping it shuts everything down.
pub struct Fleet {
    runtime: Option<Runtime>,
    topology: FleetTopology,
    table: Arc<LeaseTable>,
    shutting_down: Arc<AtomicBool>,
}

async fn bind(addr: String) -> Result<TcpListener, GatewayError> {
    TcpListener::bind(&addr).await.map_err(|source| GatewayError::Bind { addr, source })
}

pub fn serve_fleet(spec: &FleetSpec, scenario: Arc<Scenario>) -> Result<Fleet, GatewayError> {
    serve_fleet_with_clock(spec, scenario, Arc::new(SystemClock::default()))
}

pub fn serve_fleet_with_clock(spec: &FleetSpec, scenario: Arc<Scenario>, clock: Arc<dyn Clock>) -> Result<Fleet, GatewayError> {
    spec.validate(&scenario)?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .map_err(GatewayError::Runtime)?;
    let table = Arc::new(LeaseTable::new(
        spec.devices.iter().map(|d| (d.id.clone(), d.app.clone())),
        spec.heartbeat_interval_ms,
        clock,
    ));
    let shutting_down = Arc::new(AtomicBool::new(false));
    let topology = runtime.block_on(async {
        let mut devices = Vec::new();
        let mut by_node: HashMap<String, Vec<(String, SocketAddr)>> = HashMap::new();
        for d in &spec.devices {
            let listener = bind(format!("{}:0", spec.host)).await?;
            let addr = listener.local_addr().map_err(|source| GatewayError::Bind { addr: spec.host.clone(), source })?;
            let adapter: Arc<Mutex<dyn DeviceAdapter>> = Arc::new(Mutex::new(SimAdapter::new(d.app.clone(), scenario.clone())));
            tokio::spawn(serve_device(listener, adapter));
            let node = route(&d.id, &spec.nodes).expect("validated nonempty").to_string();
            by_node.entry(node.clone()).or_default().push((d.id.clone(), addr));
            devices.push(DeviceAddr { id: d.id.clone(), app: d.app.clone(), backend: addr.to_string(), node });
        }
        let mut nodes = Vec::new();
        for (i, id) in spec.nodes.iter().enumerate() {
            let port = if spec.base_port == 0 { 0 } else { spec.base_port + i as u16 };
            let listener = bind(format!("{}:{port}", spec.host)).await?;
            let addr = listener.local_addr().map_err(|source| GatewayError::Bind { addr: spec.host.clone(), source })?;
            let ctx = NodeCtx::new(
                id.clone(),
                spec.nodes.clone(),
                table.clone(),
                by_node.remove(id).unwrap_or_default(),
                shutting_down.clone(),
            );
            tokio::spawn(serve_node(listener, Arc::new(ctx)));
            nodes.push(NodeAddr { id: id.clone(), addr: addr.to_string() });
        }
        let sweeper = table.clone();
        let every = Duration::from_millis(spec.heartbeat_interval_ms);
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(every);
            loop {
                tick.tick().await;
                sweeper.sweep();
            }
        });
        Ok::<_, GatewayError>(FleetTopology { nodes, devices, heartbeat_interval_ms: spec.heartbeat_interval_ms })
    })?;
    Ok(Fleet { runtime: Some(runtime), topology, table, shutting_down })
}

impl Fleet {
    pub fn topology(&self) -> &FleetTopology {
        &self.topology
    }

    pub fn table(&self) -> &Arc<LeaseTable> {
        &self.table
    }

    /// Refuse further requests and free every lease; returns how many were held.
    pub fn shutdown(&self) -> usize {
        self.shutting_down.store(true, Ordering::SeqCst);
        self.table.release_all()
    }
}

impl Drop for Fleet {
    fn drop(&mut self) {
        self.shutdown();
        if let Some(rt) = self.runtime.take() {
            rt.shutdown_background();
        }
    }
}
