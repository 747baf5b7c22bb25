#![allow(dead_code)]

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_guirl")
}

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn write_config(dir: &Path, name: &str, json: &serde_json::Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(json).unwrap()).unwrap();
    p
}

/// Run `guirl --config <cfg> <args>` and capture everything.
pub fn guirl(cfg: Option<&Path>, args: &[&str]) -> Output {
    let mut c = Command::new(bin());
    if let Some(cfg) = cfg {
        c.arg("--config").arg(cfg);
    }
    c.args(args).output().expect("guirl runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

/// A `serve-fleet` child process with a never-advancing clock.
pub struct FleetProc {
    child: Child,
    pub topology: PathBuf,
}

impl FleetProc {
    pub fn start(cfg: &Path, dir: &Path) -> FleetProc {
        let topology = dir.join("topology.json");
        let _ = std::fs::remove_file(&topology);
        let child = Command::new(bin())
            .arg("--config")
            .arg(cfg)
            .args(["serve-fleet", "--fake-clock", "--topology-out"])
            .arg(&topology)
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .expect("serve-fleet starts");
        let deadline = Instant::now() + Duration::from_secs(30);
        while !topology.exists() {
            assert!(Instant::now() < deadline, "fleet did not publish its topology");
            std::thread::sleep(Duration::from_millis(20));
        }
        FleetProc { child, topology }
    }

    /// Interrupt with SIGINT and return (exit code, stdout).
    pub fn interrupt(mut self) -> (i32, String) {
        let st = Command::new("kill").args(["-INT", &self.child.id().to_string()]).status().unwrap();
        assert!(st.success());
        let status = self.child.wait().unwrap();
        let mut out = String::new();
        self.child.stdout.take().unwrap().read_to_string(&mut out).unwrap();
        (status.code().unwrap_or(-1), out)
    }
}

impl Drop for FleetProc {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}
