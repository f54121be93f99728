use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use futures_util::StreamExt;
use serde_json::{json, Value};
use spw_control::{api, SimHandle, BRING_UP_TICKS};
use spw_core::testbed::TestbedConfig;
use tokio_tungstenite::tungstenite::Message;
use tower::ServiceExt;

fn sim() -> SimHandle {
    SimHandle::spawn_with(TestbedConfig::default(), None, |svc| svc.bring_up(BRING_UP_TICKS)).unwrap()
}

async fn call(sim: &SimHandle, method: Method, uri: &str, body: Option<&str>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = api::router(sim.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), 1 << 20).await.unwrap();
    let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, v)
}

async fn get(sim: &SimHandle, uri: &str) -> (StatusCode, Value) {
    call(sim, Method::GET, uri, None).await
}

async fn post(sim: &SimHandle, uri: &str, body: &str) -> (StatusCode, Value) {
    call(sim, Method::POST, uri, Some(body)).await
}

#[tokio::test]
async fn ports_after_bring_up() {
    let s = sim();
    assert_eq!(get(&s, "/api/ports").await, (StatusCode::OK, json!({ "mask": 5 })));
    let (st, _) = post(&s, "/api/links/1/reset", "").await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(get(&s, "/api/ports").await.1, json!({ "mask": 4 }));
    post(&s, "/api/tick", r#"{"n":5}"#).await;
    assert_eq!(get(&s, "/api/ports").await.1, json!({ "mask": 5 }));
}

#[tokio::test]
async fn register_round_trip() {
    let s = sim();
    assert_eq!(
        get(&s, "/api/registers?offset=256&len=4").await,
        (StatusCode::OK, json!({ "offset": 256, "len": 4, "data": 0, "datasize": 4 }))
    );
    let (st, v) = post(&s, "/api/registers", r#"{"offset":256,"len":4,"data":2222}"#).await;
    assert_eq!(st, StatusCode::OK, "{v}");
    assert_eq!(
        get(&s, "/api/registers?offset=256&len=4").await.1,
        json!({ "offset": 256, "len": 4, "data": 2222, "datasize": 4 })
    );
}

#[tokio::test]
async fn device_info() {
    let s = sim();
    let (st, v) = get(&s, "/api/device").await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["bar0_phys"], json!(0xD210_0000u64));
    assert_eq!(v["guid"], json!("6b4c0d4a-3c9e-4e8b-9e33-2b0f7e1c5a10"));
    assert_eq!(v["lifecycle"], json!("Started"));
    assert_eq!(v["tick"], json!(5));
}

#[tokio::test]
async fn error_statuses() {
    let s = sim();
    let cases: &[(Method, &str, Option<&str>, StatusCode)] = &[
        (Method::GET, "/api/nope", None, StatusCode::NOT_FOUND),
        (Method::POST, "/api/links/9/enable", Some(""), StatusCode::NOT_FOUND),
        (Method::POST, "/api/links/0/reset", Some(""), StatusCode::NOT_FOUND),
        (Method::POST, "/api/links/x/reset", Some(""), StatusCode::BAD_REQUEST),
        (Method::GET, "/api/registers?offset=257&len=4", None, StatusCode::BAD_REQUEST),
        (Method::GET, "/api/registers?offset=256&len=3", None, StatusCode::BAD_REQUEST),
        (Method::GET, "/api/registers?offset=256", None, StatusCode::BAD_REQUEST),
        (Method::POST, "/api/registers", Some("{"), StatusCode::BAD_REQUEST),
        (Method::POST, "/api/registers", Some(r#"{"offset":256,"len":3,"data":1}"#), StatusCode::BAD_REQUEST),
        (Method::POST, "/api/registers", Some(r#"{"offset":256,"len":1,"data":256}"#), StatusCode::BAD_REQUEST),
        (Method::POST, "/api/registers", Some(r#"{"offset":256,"len":4,"data":-1}"#), StatusCode::BAD_REQUEST),
        (Method::POST, "/api/tick", Some(r#"{"n":2000000}"#), StatusCode::BAD_REQUEST),
        (Method::POST, "/api/tick", Some(r#"{"m":1}"#), StatusCode::BAD_REQUEST),
        (Method::POST, "/api/inject", Some(r#"{"x":1}"#), StatusCode::BAD_REQUEST),
        (Method::POST, "/api/acquire", Some(r#"{"max_bytes":"lots"}"#), StatusCode::BAD_REQUEST),
        (Method::POST, "/api/device/plug", Some(""), StatusCode::CONFLICT),
    ];
    for (method, uri, body, want) in cases {
        let (st, v) = call(&s, method.clone(), uri, *body).await;
        assert_eq!(st, *want, "{method} {uri} {body:?}: {v}");
        assert!(v["error"].is_string(), "{uri}: {v}");
    }
    // still serving normally
    assert_eq!(get(&s, "/api/ports").await.1, json!({ "mask": 5 }));
}

#[tokio::test]
async fn unplugged_device_conflicts() {
    let s = sim();
    let (st, v) = post(&s, "/api/device/unplug", "").await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v, json!({ "lifecycle": "Removed", "trace": ["evt_release_hardware"] }));
    assert_eq!(get(&s, "/api/ports").await.0, StatusCode::CONFLICT);
    assert_eq!(get(&s, "/api/device").await.1["bar0_phys"], Value::Null);
    let (_, v) = post(&s, "/api/device/plug", "").await;
    assert_eq!(v, json!({ "lifecycle": "Started", "trace": ["evt_device_add", "evt_prepare_hardware"] }));
    assert_eq!(get(&s, "/api/ports").await.0, StatusCode::OK);
}

#[tokio::test]
async fn acquire_and_inject() {
    let s = sim();
    post(&s, "/api/inject", r#"{"x":-1000,"y":2,"z":3}"#).await;
    let (_, v) = post(&s, "/api/tick", r#"{"n":20}"#).await;
    assert_eq!(v, json!({ "tick": 25, "delivered": 2 }));
    let (st, v) = post(&s, "/api/acquire", "").await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["bytes"], json!(32));
    assert_eq!(v["samples"], json!([{ "x": -1000, "y": 2, "z": 3 }, { "x": -1000, "y": 2, "z": 3 }]));
    assert_eq!(&v["frames"].as_str().unwrap()[..32], "0c00000018fcffff0200000003000000");

    call(&s, Method::DELETE, "/api/inject", None).await;
    post(&s, "/api/tick", r#"{"n":10}"#).await;
    let (_, v) = post(&s, "/api/acquire", r#"{"max_bytes":16}"#).await;
    assert_eq!(v["samples"], json!([{ "x": 0, "y": 0, "z": 0 }]));
}

#[tokio::test]
async fn trace_and_audit() {
    let s = sim();
    get(&s, "/api/registers?offset=0&len=4").await;
    let (_, t) = get(&s, "/api/trace").await;
    let t = t.as_array().unwrap();
    // two link enables from bring-up, then the read
    assert_eq!(t.len(), 3);
    assert_eq!(
        t[2],
        json!({
            "ctl_code": 0x8000_2004u32,
            "input": "0000000004000000",
            "output_len": 4,
            "status": "Success",
            "output": "43575053",
        })
    );
    let (_, a) = get(&s, "/api/audit").await;
    assert_eq!(a["consistent"], json!(true));
    assert_eq!(a["counters"]["requests_dispatched"], json!(3));
}

#[tokio::test(flavor = "multi_thread")]
async fn stream_delivers_injected_samples() {
    let s = sim();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(api::serve(listener, s.clone()));
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/api/stream")).await.unwrap();

    post(&s, "/api/inject", r#"{"x":-1000,"y":0,"z":0}"#).await;
    post(&s, "/api/tick", r#"{"n":30}"#).await;
    let mut got = Vec::new();
    while got.len() < 3 {
        let msg = tokio::time::timeout(Duration::from_secs(5), ws.next()).await.unwrap().unwrap().unwrap();
        if let Message::Text(t) = msg {
            got.push(serde_json::from_str::<Value>(&t).unwrap());
        }
    }
    assert_eq!(
        got,
        [
            json!({ "tick": 10, "x": -1000, "y": 0, "z": 0 }),
            json!({ "tick": 20, "x": -1000, "y": 0, "z": 0 }),
            json!({ "tick": 30, "x": -1000, "y": 0, "z": 0 }),
        ]
    );
}

#[tokio::test(flavor = "multi_thread")]
async fn auto_tick_advances_time() {
    let s = SimHandle::spawn(TestbedConfig::default(), Some(1000)).unwrap();
    tokio::time::sleep(Duration::from_millis(200)).await;
    let (_, v) = get(&s, "/api/device").await;
    assert!(v["tick"].as_u64().unwrap() > 10, "{v}");
}
