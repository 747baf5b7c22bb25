//! Gateway nodes: lease control and relay of device traffic.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use tokio::net::{TcpListener, TcpStream};
use tokio::sync::Mutex;

use crate::backend::error_frame;
use crate::frame::{read_raw, write_raw, Frame, FrameError, Header, Kind};
use crate::lease::{DeviceFilter, LeaseError, LeaseTable};
use crate::proto::{AcquireReq, Acquired, ErrorCode, LeaseReq, ResultBody};
use crate::route::route;

/// Everything one node needs to serve clients.
pub struct NodeCtx {
    pub id: String,
    /// All node ids of the fleet, in topology order.
    pub nodes: Vec<String>,
    pub table: Arc<LeaseTable>,
    /// Backend connections for the devices routed to this node, opened lazily
    /// and reused by every client.
    backends: HashMap<String, (SocketAddr, Mutex<Option<TcpStream>>)>,
    pub shutting_down: Arc<AtomicBool>,
}

impl NodeCtx {
    pub fn new(
        id: String,
        nodes: Vec<String>,
        table: Arc<LeaseTable>,
        backends: impl IntoIterator<Item = (String, SocketAddr)>,
        shutting_down: Arc<AtomicBool>,
    ) -> Self {
        let backends = backends.into_iter().map(|(d, a)| (d, (a, Mutex::new(None)))).collect();
        Self { id, nodes, table, backends, shutting_down }
    }

    fn lease_error(corr: u64, e: LeaseError) -> Frame {
        let code = match e {
            LeaseError::NoDeviceAvailable => ErrorCode::NoDeviceAvailable,
            LeaseError::Expired(_) => ErrorCode::LeaseExpired,
        };
        error_frame(corr, code, e.to_string())
    }

    fn control(&self, frame: &Frame) -> Frame {
        let corr = frame.correlation_id;
        let malformed = |e: FrameError| error_frame(corr, ErrorCode::Malformed, e.to_string());
        match frame.kind {
            Kind::Acquire => {
                let req: AcquireReq = match frame.parse_body() {
                    Ok(r) => r,
                    Err(e) => return malformed(e),
                };
                match self.table.acquire(&req.holder, &DeviceFilter { app: req.app }) {
                    Ok(l) => {
                        let node = route(&l.device_id, &self.nodes).expect("fleet has nodes").to_string();
                        let body = Acquired {
                            lease_id: l.lease_id,
                            device_id: l.device_id,
                            heartbeat_interval_ms: l.heartbeat_interval_ms,
                            node,
                        };
                        Frame::json(Kind::Acquired, corr, &body)
                    }
                    Err(e) => Self::lease_error(corr, e),
                }
            }
            Kind::Heartbeat | Kind::Release => {
                let req: LeaseReq = match frame.parse_body() {
                    Ok(r) => r,
                    Err(e) => return malformed(e),
                };
                let r = if frame.kind == Kind::Heartbeat {
                    self.table.heartbeat(req.lease_id)
                } else {
                    self.table.release(req.lease_id).map(|_| ())
                };
                match r {
                    Ok(()) => Frame::json(Kind::Result, corr, &ResultBody { success: None }),
                    Err(e) => Self::lease_error(corr, e),
                }
            }
            other => error_frame(corr, ErrorCode::UnexpectedKind, format!("{other:?} is not a request")),
        }
    }

    /// Check the lease and routing, then pass the encoded request to the
    /// device unchanged and return its encoded reply unchanged.
    async fn forward(&self, header: Header, bytes: &[u8]) -> Vec<u8> {
        let corr = header.correlation_id;
        let req: LeaseReq = match serde_json::from_slice(&bytes[crate::frame::HEADER_LEN..]) {
            Ok(r) => r,
            Err(e) => return error_frame(corr, ErrorCode::Malformed, e.to_string()).encode(),
        };
        let lease = match self.table.check(req.lease_id) {
            Ok(l) => l,
            Err(e) => return Self::lease_error(corr, e).encode(),
        };
        let Some((addr, conn)) = self.backends.get(&lease.device_id) else {
            return error_frame(corr, ErrorCode::WrongNode, format!("device {} is served by another node", lease.device_id))
                .encode();
        };
        let mut guard = conn.lock().await;
        for attempt in 0..2 {
            if guard.is_none() {
                match TcpStream::connect(addr).await {
                    Ok(s) => {
                        let _ = s.set_nodelay(true);
                        *guard = Some(s);
                    }
                    Err(e) => return error_frame(corr, ErrorCode::BackendUnreachable, e.to_string()).encode(),
                }
            }
            let sock = guard.as_mut().expect("connected");
            if write_raw(sock, bytes).await.is_err() {
                // a stale pooled connection gets one reconnect; nothing reached the device
                *guard = None;
                if attempt == 0 {
                    continue;
                }
                break;
            }
            match read_raw(sock).await {
                Ok(Some((h, out))) if h.correlation_id == corr => return out,
                Ok(Some(_)) => {
                    *guard = None;
                    return error_frame(corr, ErrorCode::BackendUnreachable, "backend answered out of order").encode();
                }
                _ => break,
            }
        }
        *guard = None;
        error_frame(corr, ErrorCode::BackendUnreachable, format!("device {} did not answer", lease.device_id)).encode()
    }

    async fn answer(&self, header: Header, bytes: Vec<u8>) -> Vec<u8> {
        let corr = header.correlation_id;
        if self.shutting_down.load(Ordering::SeqCst) {
            return error_frame(corr, ErrorCode::ShuttingDown, "gateway is shutting down").encode();
        }
        match header.kind() {
            Err(_) => error_frame(corr, ErrorCode::UnknownKind, format!("unknown kind {}", header.code)).encode(),
            Ok(Kind::Step | Kind::Verify) => self.forward(header, &bytes).await,
            Ok(_) => match Frame::decode(&bytes) {
                Ok((f, _)) => self.control(&f).encode(),
                Err(e) => error_frame(corr, ErrorCode::Malformed, e.to_string()).encode(),
            },
        }
    }
}

async fn client_loop(mut sock: TcpStream, ctx: Arc<NodeCtx>) {
    loop {
        let reply = match read_raw(&mut sock).await {
            Ok(None) | Err(FrameError::Io(_)) => return,
            Ok(Some((h, bytes))) => ctx.answer(h, bytes).await,
            Err(e) => {
                let _ = write_raw(&mut sock, &error_frame(0, ErrorCode::Malformed, e.to_string()).encode()).await;
                return;
            }
        };
        if write_raw(&mut sock, &reply).await.is_err() {
            return;
        }
    }
}

pub async fn serve_node(listener: TcpListener, ctx: Arc<NodeCtx>) {
    loop {
        let Ok((sock, _)) = listener.accept().await else { continue };
        let _ = sock.set_nodelay(true);
        tokio::spawn(client_loop(sock, ctx.clone()));
    }
}
