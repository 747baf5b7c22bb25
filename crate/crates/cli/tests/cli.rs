mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use guirl_core::params::ParameterMap;
use serde_json::{json, Value};

use common::*;

fn easy_config(extra: Value) -> Value {
    let mut v = json!({
        "grpo": { "max_iterations": 5, "batch_size": 4, "eval_every": 5, "validation_size": 3,
                  "proportions": [1.0, 0.0, 0.0] },
        "train": { "tasks": { "split": "train", "buckets": ["Easy"] },
                   "eval_tasks": { "split": "heldout", "buckets": ["Easy"] },
                   "validation_tasks": { "split": "heldout", "buckets": ["Easy"] } },
        "eval": { "tasks": { "split": "heldout", "buckets": ["Easy"] } }
    });
    for (k, x) in extra.as_object().unwrap() {
        v[k] = x.clone();
    }
    v
}

fn json_out(o: &std::process::Output) -> Value {
    serde_json::from_str(stdout(o).trim()).unwrap_or_else(|e| panic!("{e}: {}", stdout(o)))
}

fn save(dir: &Path, name: &str, w: &[f64]) -> String {
    let p = dir.join(name);
    ParameterMap::new().with("policy.weights", vec![w.len()], w.to_vec()).unwrap().save(&p).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn train_offline_writes_checkpoint_metrics_and_curve() {
    let dir = tempfile::tempdir().unwrap();
    let c = write_config(dir.path(), "c.json", &easy_config(json!({ "output_dir": "out" })));
    let o = guirl(Some(&c), &["train-offline"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("out");
    assert!(ParameterMap::load(out.join("checkpoint.grpk")).is_ok());
    let metrics = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 5);
    let curve = std::fs::read_to_string(out.join("curve.csv")).unwrap();
    assert!(curve.starts_with("phase,iteration,step_sr,trace_sr"));
    let summary = json_out(&o);
    assert!(summary["step_sr"].is_f64() && summary["trace_sr"].is_f64());
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = write_config(dir.path(), "a.json", &json!({ "dataset": "nope.jsonl" }));
    assert_eq!(code(&guirl(Some(&missing), &["train-offline"])), 2);
    let bad_seed = write_config(dir.path(), "b.json", &json!({ "seed": "seven" }));
    assert_eq!(code(&guirl(Some(&bad_seed), &["train-offline"])), 2);
    let unknown = write_config(dir.path(), "c.json", &json!({ "grpo": { "gee": 1 } }));
    assert_eq!(code(&guirl(Some(&unknown), &["gradcheck"])), 2);
    assert_eq!(code(&guirl(None, &["no-such-command"])), 2);
}

#[test]
fn local_smoke_run_is_quick_and_matches_gateway() {
    let dir = tempfile::tempdir().unwrap();
    let fleet = json!({ "nodes": ["gw-0", "gw-1"], "devices": [
        { "id": "s", "app": "settings" }, { "id": "m", "app": "mail" }, { "id": "p", "app": "shop" } ] });
    let local = write_config(dir.path(), "l.json", &easy_config(json!({ "output_dir": "l" })));
    let remote = write_config(
        dir.path(),
        "r.json",
        &easy_config(json!({ "output_dir": "r", "gateway": { "fleet": fleet, "topology": "topology.json" } })),
    );
    let t0 = Instant::now();
    let a = guirl(Some(&local), &["train-online", "--local"]);
    assert!(t0.elapsed() < Duration::from_secs(30));
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));

    let proc = FleetProc::start(&remote, dir.path());
    let b = guirl(Some(&remote), &["train-online", "--gateway"]);
    let (fc, fout) = proc.interrupt();
    assert_eq!(code(&b), 0, "{}", String::from_utf8_lossy(&b.stderr));
    assert_eq!(fc, 0);
    assert!(fout.contains("\"active\":0"), "{fout}");
    let ma = std::fs::read(dir.path().join("l/metrics.jsonl")).unwrap();
    let mb = std::fs::read(dir.path().join("r/metrics.jsonl")).unwrap();
    assert_eq!(ma, mb);
}

#[test]
fn gateway_unreachable_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let c = write_config(
        dir.path(),
        "c.json",
        &easy_config(json!({ "gateway": { "endpoints": [{ "id": "gw-0", "addr": format!("127.0.0.1:{port}") }] } })),
    );
    assert_eq!(code(&guirl(Some(&c), &["train-online", "--gateway"])), 3);
}

#[test]
fn merge_identities_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let a: Vec<f64> = (0..26).map(|i| f64::from(i) * 0.37 - 3.1).collect();
    let b: Vec<f64> = (0..26).map(|i| (f64::from(i) * 1.7).sin()).collect();
    let (pa, pb) = (save(d, "a.grpk", &a), save(d, "b.grpk", &b));
    let out = d.join("m.grpk");
    let out_s = out.to_str().unwrap();

    let lin = write_config(d, "lin.json", &json!({ "merge": { "mode": "linear", "weights": [0.0, 1.0] } }));
    let o = guirl(Some(&lin), &["merge", &pa, &pb, "--out", out_s]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&pb).unwrap());

    let ties = write_config(d, "ties.json", &json!({ "merge": { "mode": "ties", "density": 1.0 } }));
    let o = guirl(Some(&ties), &["merge", &pa, &pa, "--out", out_s]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let merged = ParameterMap::load(&out).unwrap();
    let got: Vec<u64> = merged.get("policy.weights").unwrap().data.iter().map(|v| v.to_bits()).collect();
    let want: Vec<u64> = a.iter().map(|v| v.to_bits()).collect();
    assert_eq!(got, want);

    let short = save(d, "short.grpk", &[1.0; 5]);
    assert_eq!(code(&guirl(Some(&lin), &["merge", &pa, &short, "--out", out_s])), 4);
    assert_eq!(code(&guirl(Some(&lin), &["merge", &pa, "--out", out_s])), 2);
}

#[test]
fn eval_oracle_and_uniform_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let c = write_config(dir.path(), "c.json", &easy_config(json!({})));
    let o = guirl(Some(&c), &["eval", "--checkpoint", fixture("oracle.grpk").to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let r = json_out(&o);
    assert_eq!(r["trace_sr"], 1.0);
    assert_eq!(r["step_sr"], 1.0);

    let meta: Value = serde_json::from_str(&std::fs::read_to_string(fixture("random_baseline.json")).unwrap()).unwrap();
    let samples = meta["samples_per_task"].to_string();
    let o = guirl(Some(&c), &["eval", "--checkpoint", fixture("uniform.grpk").to_str().unwrap(), "--samples", &samples]);
    assert_eq!(code(&o), 0);
    let r = json_out(&o);
    assert_eq!(r["tasks"], meta["task_count"]);
    assert_eq!(r["trace_sr"], meta["trace_sr"]);
    assert!(r["trace_sr"].as_f64().unwrap() < 0.2);

    let empty = write_config(dir.path(), "e.json", &json!({ "eval": { "tasks": { "ids": [] } } }));
    assert_eq!(code(&guirl(Some(&empty), &["eval", "--checkpoint", fixture("oracle.grpk").to_str().unwrap()])), 2);
}

#[test]
fn gradcheck_passes() {
    let o = guirl(None, &["gradcheck", "--batches", "5"]);
    assert_eq!(code(&o), 0);
    assert_eq!(json_out(&o)["pass"], true);
}

#[test]
fn refine_upgrades_rollouts() {
    use guirl_core::env::{LocalEnvProvider, Scenario};
    use guirl_core::refine::{route_band, Band, MockTraceJudge, ReplayWorld, TraceJudge};
    use guirl_core::rollout::{rollout, Decode};
    use std::sync::Arc;

    let dir = tempfile::tempdir().unwrap();
    let s = Arc::new(Scenario::builtin());
    let provider = LocalEnvProvider::new(s.clone());
    let traces: Vec<_> = s.tasks.iter().take(10)
        .map(|t| rollout(&provider, t, &[0.0; 26], Decode::Sample(3)).unwrap().trajectory)
        .collect();
    guirl_core::trajectory::write_jsonl(dir.path().join("d.jsonl"), &traces).unwrap();
    let c = write_config(dir.path(), "c.json", &json!({ "dataset": "d.jsonl", "output_dir": "out" }));
    let o = guirl(Some(&c), &["refine", "--review", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let reports: Vec<Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!reports.is_empty());
    let first_gold = reports[0]["gold"].as_u64().unwrap();
    let last_gold = reports.last().unwrap()["gold"].as_u64().unwrap();
    assert!(last_gold >= first_gold);
    let refined = guirl_core::trajectory::read_jsonl(dir.path().join("out/refined.jsonl")).unwrap();
    assert!(refined.len() <= 10);
    let judge = MockTraceJudge { world: ReplayWorld::new(s.clone()) };
    let gold_now = refined.iter().filter(|t| route_band(judge.score(t).unwrap()) == Band::Gold).count();
    assert!(gold_now as u64 >= last_gold, "{gold_now} gold traces after refinement, report says {last_gold}");
    let review = std::fs::read_to_string(dir.path().join("out/review.jsonl")).unwrap();
    assert_eq!(review.lines().count(), 3);
}

#[test]
fn serve_fleet_releases_on_sigint() {
    let dir = tempfile::tempdir().unwrap();
    let c = write_config(dir.path(), "c.json", &json!({}));
    let proc = FleetProc::start(&c, dir.path());
    let topo: Value = serde_json::from_str(&std::fs::read_to_string(&proc.topology).unwrap()).unwrap();
    let addr = topo["nodes"][0]["addr"].as_str().unwrap().to_string();
    let mut conn = guirl_gateway::Conn::connect(&addr).unwrap();
    conn.acquire("holder", None).unwrap();
    let (c, out) = proc.interrupt();
    assert_eq!(c, 0);
    let last: Value = serde_json::from_str(out.lines().last().unwrap()).unwrap();
    assert_eq!(last["shutdown"], true);
    assert_eq!(last["active"], 0);
}

#[test]
fn env_replay_reports_oracle_success() {
    let o = guirl(None, &["env-replay", "--task", "set-wifi"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let last: Value = serde_json::from_str(stdout(&o).lines().last().unwrap()).unwrap();
    assert_eq!(last["success"], true);

    let dir = tempfile::tempdir().unwrap();
    let acts = dir.path().join("a.txt");
    std::fs::write(&acts, "Wait()\nFinished(content='')\n").unwrap();
    let o = guirl(None, &["env-replay", "--task", "set-wifi", "--actions", acts.to_str().unwrap()]);
    let last: Value = serde_json::from_str(stdout(&o).lines().last().unwrap()).unwrap();
    assert_eq!(last["success"], false);
    assert_eq!(code(&guirl(None, &["env-replay", "--task", "no-such-task"])), 2);
}
