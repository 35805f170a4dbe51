use std::time::Duration;

use lattice_core::simulator::{self, reference_plan, SimConfig};
use lattice_core::twin::joints::{motions, sample, Primitive};
use lattice_core::twin::{bind, serve, Message, MsgType, SceneFile, ServeOptions, Session, SimState};
use serde_json::json;
use tokio::io::{AsyncReadExt, AsyncWriteExt};

#[test]
fn placement_plays_drop_retract_step_stomp() {
    let (plan, plan_cfg) = reference_plan();
    let cfg = SimConfig::default();
    let out = simulator::run(&plan, &cfg, &plan_cfg, 0).unwrap();
    let all = motions(&out.trace, &cfg);
    for i in 0..plan.placements.len() {
        let seq: Vec<_> = all.iter().filter(|m| m.placement == Some(i)).collect();
        let prims: Vec<Primitive> = seq.iter().map(|m| m.primitive).collect();
        assert_eq!(prims, [Primitive::Drop, Primitive::Retract, Primitive::Step, Primitive::Stomp], "block {i}");
        assert_eq!(seq[1].start, seq[0].end);
        for w in seq.windows(2) {
            assert!(w[1].start >= w[0].end - 1e-9, "block {i}: {:?} overlaps {:?}", w[0], w[1]);
            assert_eq!(w[0].robot, w[1].robot);
        }
        let mid = sample(seq[0], (seq[0].start + seq[0].end) / 2.0).unwrap();
        assert!(mid.synthetic && mid.progress > 0.0 && mid.progress < 1.0);
        assert!(sample(seq[0], seq[0].end).is_none());
    }
}

#[test]
fn offline_replay_matches_live_final_scene() {
    let mut s = Session::new(SceneFile::cube_fixture()).unwrap();
    let start = s.snapshot().scene;
    let o = s.handle_text(&json!({"type":"control","seq":1,"body":{"action":"start"}}).to_string());
    assert_eq!(o.reply.kind, MsgType::Ack);
    while s.state() != SimState::Finished {
        s.advance(10.0);
    }
    let mut fold = start;
    for e in s.trace() {
        fold.apply(e);
    }
    let live = s.snapshot().scene;
    assert_eq!(fold, live);
    assert_eq!(live.placed_count(), live.blocks.len());
}

#[test]
fn scene_file_round_trips_and_rejects_unknown_fields() {
    let f = SceneFile::cube_fixture();
    let text = serde_json::to_string(&f).unwrap();
    assert_eq!(serde_json::from_str::<SceneFile>(&text).unwrap(), f);
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["colour"] = json!("red");
    assert!(serde_json::from_value::<SceneFile>(v).is_err());
}

#[test]
fn unknown_message_type_is_rejected() {
    let mut s = Session::new(SceneFile::cube_fixture()).unwrap();
    let o = s.handle_text(r#"{"type":"snapshot","body":{}}"#);
    assert_eq!(o.reply.kind, MsgType::Error);
    let o = s.handle_text(r#"{"type":"edit","seq":5,"body":{"op":"teleport","params":{}}}"#);
    assert_eq!(o.reply.kind, MsgType::Error);
    assert_eq!(serde_json::to_value(o.reply.code()).unwrap(), json!("bad_message"));
    let hello: Message = serde_json::from_str(&Message::hello().to_text()).unwrap();
    assert_eq!(hello.body["protocol_version"], 1);
}

async fn http_get(addr: std::net::SocketAddr, path: &str) -> String {
    let mut tcp = tokio::net::TcpStream::connect(addr).await.unwrap();
    tcp.write_all(format!("GET {path} HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n").as_bytes()).await.unwrap();
    let mut buf = String::new();
    tcp.read_to_string(&mut buf).await.unwrap();
    buf
}

#[tokio::test]
async fn http_routes_and_shutdown_return_the_session() {
    let listener = bind(0).await.unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let session = Session::new(SceneFile::cube_fixture()).unwrap();
    let opts = ServeOptions { tick: Duration::from_millis(20), ..Default::default() };
    let server = tokio::spawn(serve(session, listener, opts, async move {
        let _ = rx.await;
    }));
    let health = http_get(addr, "/healthz").await;
    assert!(health.starts_with("HTTP/1.1 200") && health.ends_with("ok"), "{health}");
    let scene = http_get(addr, "/scene").await;
    let body = &scene[scene.find("\r\n\r\n").unwrap() + 4..];
    let v: serde_json::Value = serde_json::from_str(body).unwrap();
    assert_eq!(v["scene"]["blocks"].as_array().unwrap().len(), 4);
    assert_eq!(v["session"]["state"], "paused");
    tx.send(()).unwrap();
    let back = tokio::time::timeout(Duration::from_secs(5), server).await.unwrap().unwrap().unwrap();
    assert_eq!(back.state(), SimState::Paused);
}

#[tokio::test]
async fn port_in_use_is_reported() {
    let held = bind(0).await.unwrap();
    let port = held.local_addr().unwrap().port();
    assert!(matches!(bind(port).await, Err(lattice_core::twin::ServeError::PortInUse(p)) if p == port));
}
