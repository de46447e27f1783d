use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use futures::StreamExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use dtnsim::api::{router, ApiHandle, EngineService, ServiceOptions};
use dtnsim::sim::{Engine, ScenarioSpec};

const ALWAYS_UP: &str = r#"
name = "api"
duration_s = 3600.0
mtu = 2048
header_reserve = 1024
[schedule]
kind = "ALWAYS_UP"
"#;

fn paused(spec: &ScenarioSpec) -> EngineService {
    let engine = Engine::from_spec(spec).unwrap();
    EngineService::spawn(
        engine,
        None,
        ServiceOptions {
            speed: 0.0,
            ..ServiceOptions::default()
        },
    )
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    // extractor rejections answer in plain text
    let v = serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()));
    (status, v)
}

async fn run_all(h: &ApiHandle) {
    h.with_engine(|e| e.run_to_completion().unwrap()).await.unwrap();
}

#[tokio::test]
async fn e1_history_and_state() {
    let svc = paused(&ScenarioSpec::profile("E1").unwrap());
    let h = svc.handle();
    let app = router(h.clone());
    run_all(&h).await;

    let (st, v) = call(&app, "GET", "/bundles?status=DELIVERED", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v.as_array().unwrap().len(), 20);
    let (st, v) = call(&app, "GET", "/bundles?status=delivered", None).await;
    assert_eq!((st, v.as_array().unwrap().len()), (StatusCode::OK, 20));
    let (st, v) = call(&app, "GET", "/bundles?status=LOST", None).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"], "validation");

    let (st, v) = call(&app, "GET", "/iss/state", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["inbox"].as_array().unwrap().len(), 20);
    assert!(v["position"]["lat"].is_number() || v["position"].is_null());
    assert_eq!(v["queue_depth"], 0);

    let (st, v) = call(&app, "GET", "/stations", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v.as_array().unwrap().len(), 9);

    let (st, v) = call(&app, "GET", "/passes?station=toronto&hours=12", None).await;
    assert_eq!(st, StatusCode::OK);
    let aos: Vec<&str> = v.as_array().unwrap().iter().map(|w| w["aos"].as_str().unwrap()).collect();
    assert!(!aos.is_empty());
    assert!(aos.windows(2).all(|w| w[0] < w[1]));
    let (st, _) = call(&app, "GET", "/passes?station=atlantis", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (st, _) = call(&app, "GET", "/passes?station=toronto&hours=-1", None).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);

    let engine = svc.shutdown().unwrap();
    assert_eq!(engine.metrics().delivered, 20);
}

#[tokio::test]
async fn submit_deliver_decrypt() {
    let svc = paused(&ScenarioSpec::from_toml(ALWAYS_UP).unwrap());
    let h = svc.handle();
    let app = router(h.clone());

    let (st, v) = call(
        &app,
        "POST",
        "/bundles",
        Some(json!({"message": "status report 7", "source": "london", "priority": "EXPEDITED"})),
    )
    .await;
    assert_eq!(st, StatusCode::CREATED);
    assert_eq!(v["destination"], "ISS");
    assert_eq!(v["flood"], false);
    let id = v["bundle_id"].as_str().unwrap().to_string();

    let (st, v) = call(&app, "GET", "/bundles?status=QUEUED", None).await;
    assert_eq!(st, StatusCode::OK);
    assert!(v.as_array().unwrap().iter().any(|b| b["bundle_id"] == id.as_str()));

    let (st, _) = call(&app, "POST", "/iss/decrypt", Some(json!({"bundle_id": id}))).await;
    assert_eq!(st, StatusCode::NOT_FOUND);

    run_all(&h).await;
    let (st, v) = call(&app, "POST", "/iss/decrypt", Some(json!({"bundle_id": id}))).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["plaintext"], "status report 7");

    let (st, v) = call(&app, "POST", "/iss/relay", Some(json!({"message": "ack", "destination": "tokyo"}))).await;
    assert_eq!(st, StatusCode::CREATED);
    assert_eq!(v["source"], "ISS");
    let (st, _) = call(&app, "POST", "/iss/relay", Some(json!({"message": "x", "destination": "*"}))).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);

    for bad in [
        json!({"message": "", "source": "london"}),
        json!({"message": "x", "source": "atlantis"}),
        json!({"message": "x", "source": "london", "ttl_s": 0}),
    ] {
        let (st, v) = call(&app, "POST", "/bundles", Some(bad)).await;
        assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY, "{v}");
        assert!(v["message"].is_string());
    }
    let (st, _) = call(&app, "POST", "/bundles", Some(json!({"source": "london"}))).await;
    assert!(st.is_client_error());
    svc.shutdown().unwrap();
}

#[tokio::test]
async fn decrypt_during_reassembly_conflicts() {
    let svc = paused(&ScenarioSpec::from_toml(ALWAYS_UP).unwrap());
    let h = svc.handle();
    let app = router(h.clone());
    let message = "x".repeat(16 * 1024);
    let (st, v) = call(&app, "POST", "/bundles", Some(json!({"message": message, "source": "toronto"}))).await;
    assert_eq!(st, StatusCode::CREATED);
    let id = v["bundle_id"].as_str().unwrap().to_string();

    let partial = h
        .with_engine(|e| {
            for _ in 0..100_000 {
                if !e.reassembly_progress("ISS").is_empty() {
                    return true;
                }
                e.step().unwrap();
            }
            false
        })
        .await
        .unwrap();
    assert!(partial);
    let (st, v) = call(&app, "GET", "/iss/state", None).await;
    assert_eq!(st, StatusCode::OK);
    let r = &v["reassembly"][0];
    assert_eq!(r["parent_id"], id.as_str());
    assert!(r["received"].as_u64().unwrap() < r["total"].as_u64().unwrap());

    let (st, v) = call(&app, "POST", "/iss/decrypt", Some(json!({"bundle_id": id}))).await;
    assert_eq!(st, StatusCode::CONFLICT);
    assert_eq!(v["error"], "conflict");

    run_all(&h).await;
    let (st, v) = call(&app, "POST", "/iss/decrypt", Some(json!({"bundle_id": id}))).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["plaintext"].as_str().unwrap().len(), 16 * 1024);
    svc.shutdown().unwrap();
}

async fn next_text<S>(ws: &mut S) -> String
where
    S: futures::Stream<Item = Result<tokio_tungstenite::tungstenite::Message, tokio_tungstenite::tungstenite::Error>>
        + Unpin,
{
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(2), ws.next())
            .await
            .expect("telemetry within 2 s")
            .expect("stream open")
            .unwrap();
        if let tokio_tungstenite::tungstenite::Message::Text(t) = msg {
            return t.to_string();
        }
    }
}

#[tokio::test]
async fn telemetry_fans_out_identical_frames() {
    let engine = Engine::from_spec(&ScenarioSpec::profile("E1").unwrap()).unwrap();
    let svc = EngineService::spawn(
        engine,
        None,
        ServiceOptions {
            speed: 60.0,
            telemetry_period: Duration::from_millis(200),
        },
    );
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let app = router(svc.handle());
    let server = tokio::spawn(async move { axum::serve(listener, app).await });
    let url = format!("ws://{addr}/telemetry");

    let (mut a, _) = tokio_tungstenite::connect_async(&url).await.unwrap();
    let first: Value = serde_json::from_str(&next_text(&mut a).await).unwrap();
    assert!(first["timestamp"].is_string());
    assert!(first["stations"].is_array());

    let (mut b, _) = tokio_tungstenite::connect_async(&url).await.unwrap();
    let b_first = next_text(&mut b).await;
    let b_second = next_text(&mut b).await;
    let mut seen = Vec::new();
    for _ in 0..6 {
        seen.push(next_text(&mut a).await);
        if seen.last() == Some(&b_second) {
            break;
        }
    }
    assert!(seen.contains(&b_second), "client b frame never reached client a");
    let stamp = |t: &str| serde_json::from_str::<Value>(t).unwrap()["timestamp"].as_str().unwrap().to_string();
    assert!(stamp(&b_first) <= stamp(&b_second));

    server.abort();
    tokio::task::spawn_blocking(move || svc.shutdown()).await.unwrap().unwrap();
}
