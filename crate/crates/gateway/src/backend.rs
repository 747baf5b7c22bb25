//! Simulated device backends.

use std::sync::{Arc, Mutex};

use guirl_core::env::{EnvInstance, JudgeRegistry, Scenario};
use tokio::net::TcpListener;

use crate::frame::{read_raw, write_raw, Frame, FrameError, Kind};
use crate::proto::{ErrorBody, ErrorCode, LeaseReq, ResultBody, StepReq};

/// Device-side protocol adapter: turns a request frame into a response with
/// the same correlation id. Real device drivers would sit behind this.
pub trait DeviceAdapter: Send {
    fn handle(&mut self, request: &Frame) -> Frame;
}

pub fn error_frame(correlation_id: u64, code: ErrorCode, message: impl Into<String>) -> Frame {
    Frame::json(Kind::Error, correlation_id, &ErrorBody { code, message: message.into() })
}

/// A device that hosts one synthetic app and runs one episode at a time.
pub struct SimAdapter {
    app: String,
    scenario: Arc<Scenario>,
    judges: Arc<JudgeRegistry>,
    env: Option<EnvInstance>,
    /// Lease that started the current episode; other leases are refused.
    owner: Option<u64>,
}

impl SimAdapter {
    pub fn new(app: impl Into<String>, scenario: Arc<Scenario>) -> Self {
        let judges = Arc::new(JudgeRegistry::for_scenario(&scenario));
        Self { app: app.into(), scenario, judges, env: None, owner: None }
    }

    fn episode(&mut self, lease: u64) -> Result<&mut EnvInstance, (ErrorCode, String)> {
        if self.owner != Some(lease) {
            return Err((ErrorCode::WrongLease, format!("lease {lease} has no episode on this device")));
        }
        self.env.as_mut().ok_or((ErrorCode::Env, "no episode".into()))
    }

    fn step(&mut self, req: StepReq) -> Result<Frame, (ErrorCode, String)> {
        if let Some(task) = req.reset {
            if task.app_id != self.app {
                return Err((ErrorCode::Env, format!("device hosts `{}`, task needs `{}`", self.app, task.app_id)));
            }
            let env = EnvInstance::reset(&self.scenario, &task).map_err(|e| (ErrorCode::Env, e.to_string()))?;
            let obs = env.observe();
            self.env = Some(env);
            self.owner = Some(req.lease_id);
            return Ok(Frame::json(Kind::Observation, 0, &obs));
        }
        let env = self.episode(req.lease_id)?;
        let out = env.step(req.action.as_ref()).map_err(|e| (ErrorCode::Env, e.to_string()))?;
        Ok(Frame::json(Kind::Observation, 0, &out.observation))
    }

    fn verify(&mut self, req: LeaseReq) -> Result<Frame, (ErrorCode, String)> {
        let judges = self.judges.clone();
        let env = self.episode(req.lease_id)?;
        let success = env.verify(&judges).map_err(|e| (ErrorCode::Env, e.to_string()))?;
        Ok(Frame::json(Kind::Result, 0, &ResultBody { success: Some(success) }))
    }
}

impl DeviceAdapter for SimAdapter {
    fn handle(&mut self, request: &Frame) -> Frame {
        let malformed = |e: FrameError| (ErrorCode::Malformed, e.to_string());
        let result = match request.kind {
            Kind::Step => request.parse_body().map_err(malformed).and_then(|r| self.step(r)),
            Kind::Verify => request.parse_body().map_err(malformed).and_then(|r| self.verify(r)),
            other => Err((ErrorCode::UnexpectedKind, format!("device cannot handle {other:?}"))),
        };
        match result {
            Ok(mut f) => {
                f.correlation_id = request.correlation_id;
                f
            }
            Err((code, msg)) => error_frame(request.correlation_id, code, msg),
        }
    }
}

/// Serve one device on `listener`. Requests from all connections are handled
/// one at a time.
pub async fn serve_device(listener: TcpListener, adapter: Arc<Mutex<dyn DeviceAdapter>>) {
    loop {
        let Ok((mut sock, _)) = listener.accept().await else { continue };
        let _ = sock.set_nodelay(true);
        let adapter = adapter.clone();
        tokio::spawn(async move {
            loop {
                let reply = match read_raw(&mut sock).await {
                    Ok(None) | Err(FrameError::Io(_)) => return,
                    Ok(Some((_, bytes))) => match Frame::decode(&bytes) {
                        Ok((f, _)) => adapter.lock().unwrap_or_else(|p| p.into_inner()).handle(&f),
                        Err(FrameError::UnknownKind { code, correlation_id }) => {
                            error_frame(correlation_id, ErrorCode::UnknownKind, format!("unknown kind {code}"))
                        }
                        Err(e) => error_frame(0, ErrorCode::Malformed, e.to_string()),
                    },
                    Err(e) => {
                        // the stream cannot be resynchronized after a bad header
                        let _ = write_raw(&mut sock, &error_frame(0, ErrorCode::Malformed, e.to_string()).encode()).await;
                        return;
                    }
                };
                if write_raw(&mut sock, &reply.encode()).await.is_err() {
                    return;
                }
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proto::ErrorBody;
    use guirl_core::env::Observation;

    #[test]
    fn adapter_runs_an_episode() {
        let s = Arc::new(Scenario::builtin());
        let task = s.task("set-wifi").unwrap().clone();
        let mut dev = SimAdapter::new("settings", s.clone());
        let reset = Frame::json(Kind::Step, 4, &StepReq { lease_id: 1, reset: Some(task.clone()), action: None });
        let r = dev.handle(&reset);
        assert_eq!((r.kind, r.correlation_id), (Kind::Observation, 4));
        let obs: Observation = r.parse_body().unwrap();
        assert_eq!(obs.task_id, "set-wifi");

        let other = dev.handle(&Frame::json(Kind::Step, 5, &StepReq { lease_id: 2, reset: None, action: None }));
        assert_eq!(other.parse_body::<ErrorBody>().unwrap().code, ErrorCode::WrongLease);

        for (i, a) in task.oracle.iter().enumerate() {
            let f = dev.handle(&Frame::json(Kind::Step, 10 + i as u64, &StepReq { lease_id: 1, reset: None, action: Some(a.clone()) }));
            assert_eq!(f.kind, Kind::Observation, "{}", String::from_utf8_lossy(&f.body));
        }
        let v = dev.handle(&Frame::json(Kind::Verify, 99, &LeaseReq { lease_id: 1 }));
        assert_eq!(v.correlation_id, 99);
        assert_eq!(v.parse_body::<ResultBody>().unwrap().success, Some(true));

        let wrong_app = s.tasks.iter().find(|t| t.app_id != "settings").unwrap().clone();
        let e = dev.handle(&Frame::json(Kind::Step, 1, &StepReq { lease_id: 3, reset: Some(wrong_app), action: None }));
        assert_eq!(e.kind, Kind::Error);
        let bad = dev.handle(&Frame::new(Kind::Step, 8, b"{not json".to_vec()));
        assert_eq!(bad.parse_body::<ErrorBody>().unwrap().code, ErrorCode::Malformed);
    }
}
