//! Device gateway: rendezvous routing of devices to gateway nodes, a lease
//! table with heartbeat expiry, a length-prefixed frame protocol, simulated
//! device backends hosting synthetic-world episodes, and a blocking client
//! that plugs into the trainer as an environment provider.

pub mod backend;
pub mod client;
pub mod fleet;
pub mod frame;
pub mod lease;
pub mod node;
pub mod proto;
pub mod route;

pub use client::{ClientError, Conn, GatewayProvider, GatewaySession};
pub use fleet::{serve_fleet, serve_fleet_with_clock, DeviceSpec, Fleet, FleetSpec, FleetTopology, GatewayError};
pub use frame::{Frame, FrameError, Kind};
pub use lease::{Clock, DeviceFilter, FakeClock, Lease, LeaseError, LeaseTable, SystemClock};
pub use route::route;
