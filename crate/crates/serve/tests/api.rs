use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use base64::Engine;
use clickprobe::clicks::{iou, next_click_eval, BinaryMask, Click, ClickState};
use clickprobe::config::ServeConfig;
use clickprobe::data::{generate_synthetic, load_dataset, write_binary_mask, write_manifest, write_rgb, InstanceEntry, SynthConfig};
use clickprobe::model::{HeadKind, ModelConfig, ProbeModel};
use clickprobe::tensor::Tensor;
use clickprobe_serve::{rle, router, AppState};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn png_b64(h: u32, w: u32) -> String {
    let img = image::RgbImage::from_fn(w, h, |x, y| image::Rgb([(x * 7 % 256) as u8, (y * 11 % 256) as u8, 90]));
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png).unwrap();
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn app_with(cfg: ServeConfig, dataset: Option<&Path>) -> Router {
    router(Arc::new(AppState::new(cfg, dataset.map(Path::to_path_buf))))
}

fn app() -> Router {
    app_with(ServeConfig::default(), None)
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call_json(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn create(app: &Router, body: Value) -> String {
    let (s, v) = call_json(app, Method::POST, "/v1/sessions", Some(body)).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

async fn click(app: &Router, id: &str, row: i64, col: i64, positive: bool) -> (StatusCode, Value) {
    call_json(app, Method::POST, &format!("/v1/sessions/{id}/clicks"), Some(json!({"row": row, "col": col, "positive": positive})))
        .await
}

fn decoded(v: &Value) -> BinaryMask {
    let runs: Vec<u32> = serde_json::from_value(v["mask_rle"].clone()).unwrap();
    let (h, w) = (v["height"].as_u64().unwrap() as usize, v["width"].as_u64().unwrap() as usize);
    rle::decode(&runs, h, w).unwrap()
}

fn synth_dataset(dir: &Path) {
    generate_synthetic(dir, &SynthConfig { n_images: 2, resolution: 56, seed: 3, first_index: 0 }).unwrap();
}

#[tokio::test]
async fn create_session_from_png() {
    let app = app();
    let (s, v) = call_json(&app, Method::POST, "/v1/sessions", Some(json!({"image": png_b64(30, 44)}))).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!((v["height"].as_u64(), v["width"].as_u64()), (Some(30), Some(44)));
    assert_eq!(v["has_gt"], json!(false));
    let data_url = format!("data:image/png;base64,{}", png_b64(20, 20));
    create(&app, json!({"image": data_url, "model": "toy", "upsampler": "jbu", "injection": "early"})).await;
}

#[tokio::test]
async fn create_session_rejections() {
    let app = app();
    let post = |body: Value| {
        let app = app.clone();
        async move { call_json(&app, Method::POST, "/v1/sessions", Some(body)).await }
    };
    assert_eq!(post(json!({"image": "%%%"})).await.0, StatusCode::BAD_REQUEST);
    let not_png = base64::engine::general_purpose::STANDARD.encode(b"plain text, not an image");
    let (s, v) = post(json!({"image": not_png})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(v["error"].is_string());
    assert_eq!(post(json!({})).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(post(json!({"image": png_b64(8, 8), "instance": "x"})).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(post(json!({"image": png_b64(8, 8), "upsampler": "bicubic"})).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(post(json!({"image": png_b64(8, 8), "injection": "sideways"})).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(post(json!({"image": png_b64(8, 8), "upsampler": "ingested:loftup"})).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(post(json!({"image": png_b64(8, 8), "model": "nope"})).await.0, StatusCode::NOT_FOUND);
    assert_eq!(post(json!({"image": png_b64(8, 8), "model": "../etc"})).await.0, StatusCode::NOT_FOUND);
    assert_eq!(post(json!({"instance": "0000"})).await.0, StatusCode::NOT_FOUND);
    assert_eq!(post(json!({"image": png_b64(1025, 8)})).await.0, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(post(json!({"image": png_b64(8, 1025)})).await.0, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(post(json!({"image": png_b64(1024, 4)})).await.0, StatusCode::CREATED);
}

#[tokio::test]
async fn first_click_decodes_to_a_nonempty_mask() {
    let app = app();
    let id = create(&app, json!({"image": png_b64(42, 56)})).await;
    let (s, v) = click(&app, &id, 20, 25, true).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["click_count"], json!(1));
    assert!(v.get("iou").is_none());
    let m = decoded(&v);
    assert!(m.area() > 0 && m.get(20, 25));
}

#[tokio::test]
async fn out_of_bounds_and_unknown_sessions() {
    let app = app();
    let id = create(&app, json!({"image": png_b64(20, 30)})).await;
    for (r, c) in [(20, 0), (0, 30), (-1, 3), (5, -2), (1000, 1000)] {
        assert_eq!(click(&app, &id, r, c, true).await.0, StatusCode::UNPROCESSABLE_ENTITY, "({r}, {c})");
    }
    assert_eq!(click(&app, &id, 19, 29, false).await.0, StatusCode::OK);
    assert_eq!(click(&app, "missing", 1, 1, true).await.0, StatusCode::NOT_FOUND);
    for path in ["/v1/sessions/missing/undo", "/v1/sessions/missing/reset"] {
        assert_eq!(call(&app, Method::POST, path, None).await.0, StatusCode::NOT_FOUND);
    }
    assert_eq!(call(&app, Method::GET, "/v1/suggest/missing", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, Method::GET, "/v1/sessions/missing/features", None).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn undo_and_reset() {
    let app = app();
    let id = create(&app, json!({"image": png_b64(28, 28)})).await;
    let (_, blank) = call_json(&app, Method::GET, &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(blank["click_count"], json!(0));
    let undo = format!("/v1/sessions/{id}/undo");
    assert_eq!(call(&app, Method::POST, &undo, None).await.0, StatusCode::CONFLICT);

    click(&app, &id, 10, 10, true).await;
    let (s, v) = call_json(&app, Method::POST, &undo, None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v, blank);

    click(&app, &id, 10, 10, true).await;
    click(&app, &id, 3, 20, false).await;
    let reset = format!("/v1/sessions/{id}/reset");
    let (_, r1) = call_json(&app, Method::POST, &reset, None).await;
    let (_, r2) = call_json(&app, Method::POST, &reset, None).await;
    assert_eq!(r1, blank);
    assert_eq!(r2, blank);
    assert_eq!(call(&app, Method::POST, &undo, None).await.0, StatusCode::CONFLICT);
}

#[tokio::test]
async fn replaying_the_click_log_reproduces_the_mask() {
    let app = app();
    let image = png_b64(40, 52);
    let id = create(&app, json!({"image": image, "upsampler": "jbu"})).await;
    for (r, c, p) in [(10, 12, true), (30, 40, true), (20, 20, false)] {
        click(&app, &id, r, c, p).await;
    }
    let (_, after_undo) = call_json(&app, Method::POST, &format!("/v1/sessions/{id}/undo"), None).await;

    let replay = create(&app, json!({"image": image, "upsampler": "jbu"})).await;
    let mut last = Value::Null;
    for c in after_undo["clicks"].as_array().unwrap() {
        last = click(&app, &replay, c["row"].as_i64().unwrap(), c["col"].as_i64().unwrap(), c["positive"].as_bool().unwrap())
            .await
            .1;
    }
    assert_eq!(last["mask_rle"], after_undo["mask_rle"]);

    call(&app, Method::POST, &format!("/v1/sessions/{id}/reset"), None).await;
    for c in after_undo["clicks"].as_array().unwrap() {
        last = click(&app, &id, c["row"].as_i64().unwrap(), c["col"].as_i64().unwrap(), c["positive"].as_bool().unwrap()).await.1;
    }
    assert_eq!(last, after_undo);
}

#[tokio::test]
async fn dataset_sessions_report_iou_of_the_decoded_mask() {
    let dir = tempfile::tempdir().unwrap();
    synth_dataset(dir.path());
    let inst = load_dataset(dir.path()).unwrap().remove(0);
    let app = app_with(ServeConfig::default(), Some(dir.path()));
    let (s, v) = call_json(&app, Method::POST, "/v1/sessions", Some(json!({"instance": inst.id}))).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(v["has_gt"], json!(true));
    let id = v["session_id"].as_str().unwrap().to_string();

    let (_, sug) = call_json(&app, Method::GET, &format!("/v1/suggest/{id}"), None).await;
    let (_, v0) = call_json(&app, Method::GET, &format!("/v1/sessions/{id}"), None).await;
    let expected = next_click_eval(&decoded(&v0), &inst.gt, &ClickState::new(56, 56)).unwrap();
    assert_eq!((sug["row"].as_u64(), sug["col"].as_u64()), (Some(expected.row as u64), Some(expected.col as u64)));
    assert_eq!(sug["positive"].as_bool(), Some(expected.positive));

    let (s, v) = click(&app, &id, expected.row as i64, expected.col as i64, expected.positive).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["iou"].as_f64().unwrap(), iou(&decoded(&v), &inst.gt).unwrap());

    let (_, sug) = call_json(&app, Method::GET, &format!("/v1/suggest/{id}"), None).await;
    let mut state = ClickState::new(56, 56);
    state.push(Click::new(expected.row, expected.col, expected.positive)).unwrap();
    let next = next_click_eval(&decoded(&v), &inst.gt, &state).unwrap();
    assert_eq!((sug["row"].as_u64(), sug["col"].as_u64()), (Some(next.row as u64), Some(next.col as u64)));
}

#[tokio::test]
async fn suggest_conflicts() {
    let app = app();
    let id = create(&app, json!({"image": png_b64(16, 16)})).await;
    let (s, v) = call_json(&app, Method::GET, &format!("/v1/suggest/{id}"), None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert!(v["error"].as_str().unwrap().contains("ground truth"));

    // A checkpoint that predicts foreground everywhere, on an instance whose
    // ground truth is the whole image.
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ModelConfig::default();
    cfg.head.kind = HeadKind::Linear;
    let mut model = ProbeModel::<f32>::new(cfg).unwrap();
    let mut params = model.export_params();
    let w = params["head.out.w"].shape().to_vec();
    params.insert("head.out.w".into(), Tensor::from_fn(w, |_| 0.0));
    params.insert("head.out.b".into(), Tensor::from_fn(vec![1], |_| 10.0));
    model.load_params(&params).unwrap();
    model.save(&dir.path().join("everything.ckpt")).unwrap();
    write_rgb(&dir.path().join("full.png"), &Tensor::from_fn(vec![3, 14, 14], |i| (i % 5) as f32 / 4.0)).unwrap();
    write_binary_mask(&dir.path().join("full_mask.png"), &BinaryMask::from_fn(14, 14, |_, _| true)).unwrap();
    write_manifest(
        dir.path(),
        &[InstanceEntry { id: "full".into(), image_path: "full.png".into(), mask_path: "full_mask.png".into(), object_value: 255 }],
    )
    .unwrap();
    let cfg = ServeConfig { checkpoint_dir: Some(dir.path().to_path_buf()), ..ServeConfig::default() };
    let app = app_with(cfg, Some(dir.path()));
    let id = create(&app, json!({"instance": "full", "model": "everything"})).await;
    let (_, v) = call_json(&app, Method::GET, &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(v["iou"].as_f64(), Some(1.0));
    let (s, v) = call_json(&app, Method::GET, &format!("/v1/suggest/{id}"), None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert!(v["error"].as_str().unwrap().contains("no error region"));
    create(&app, json!({"instance": "full", "model": "everything.ckpt", "upsampler": "bilinear"})).await;
}

#[tokio::test]
async fn feature_renderings() {
    let app = app();
    let id = create(&app, json!({"image": png_b64(30, 45)})).await;
    for kind in ["lowres", "bilinear", "nearest", "jbu"] {
        let uri = format!("/v1/sessions/{id}/features?upsampler={kind}");
        let (s, a) = call(&app, Method::GET, &uri, None).await;
        assert_eq!(s, StatusCode::OK, "{kind}");
        let img = image::load_from_memory(&a).unwrap();
        assert_eq!((img.height(), img.width()), (30, 45), "{kind}");
        assert_eq!(call(&app, Method::GET, &uri, None).await.1, a, "{kind}");
    }
    assert_eq!(call(&app, Method::GET, &format!("/v1/sessions/{id}/features"), None).await.0, StatusCode::OK);
    for bad in ["bicubic", "ingested:loftup"] {
        let uri = format!("/v1/sessions/{id}/features?upsampler={bad}");
        assert_eq!(call(&app, Method::GET, &uri, None).await.0, StatusCode::BAD_REQUEST, "{bad}");
    }
}

#[tokio::test]
async fn idle_sessions_expire() {
    let state = Arc::new(AppState::with_ttl(ServeConfig::default(), None, Duration::from_millis(200)));
    let app = router(Arc::clone(&state));
    let id = create(&app, json!({"image": png_b64(8, 8)})).await;
    assert_eq!(call(&app, Method::GET, &format!("/v1/sessions/{id}"), None).await.0, StatusCode::OK);
    tokio::time::sleep(Duration::from_millis(300)).await;
    assert_eq!(call(&app, Method::GET, &format!("/v1/sessions/{id}"), None).await.0, StatusCode::NOT_FOUND);

    create(&app, json!({"image": png_b64(8, 8)})).await;
    assert_eq!(state.sweep(Instant::now()), 0);
    assert_eq!(state.sweep(Instant::now() + Duration::from_secs(1)), 1);
    assert_eq!(state.session_count(), 0);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_requests_are_serialized_per_session() {
    let app = app();
    let image = png_b64(28, 42);
    let a = create(&app, json!({"image": image})).await;
    let b = create(&app, json!({"image": image})).await;
    let clicks: Vec<(i64, i64, bool)> = (0..6).map(|i| (2 + 4 * i, 3 + 6 * i, i % 3 != 2)).collect();

    let mut tasks = Vec::new();
    for &(r, c, p) in &clicks {
        let (app, a) = (app.clone(), a.clone());
        tasks.push(tokio::spawn(async move { click(&app, &a, r, c, p).await.0 }));
    }
    for (k, &(r, c, p)) in clicks.iter().enumerate() {
        if k % 2 == 0 {
            click(&app, &b, r, c, p).await;
        }
    }
    for t in tasks {
        assert_eq!(t.await.unwrap(), StatusCode::OK);
    }
    let (_, va) = call_json(&app, Method::GET, &format!("/v1/sessions/{a}"), None).await;
    assert_eq!(va["click_count"], json!(6));

    // Whatever order the server applied, a sequential replay of that order
    // reproduces the result, and the other session is unaffected.
    let replay = create(&app, json!({"image": image})).await;
    let mut last = Value::Null;
    for c in va["clicks"].as_array().unwrap() {
        last = click(&app, &replay, c["row"].as_i64().unwrap(), c["col"].as_i64().unwrap(), c["positive"].as_bool().unwrap()).await.1;
    }
    assert_eq!(last["mask_rle"], va["mask_rle"]);

    let solo = create(&app, json!({"image": image})).await;
    for (k, &(r, c, p)) in clicks.iter().enumerate() {
        if k % 2 == 0 {
            last = click(&app, &solo, r, c, p).await.1;
        }
    }
    let (_, vb) = call_json(&app, Method::GET, &format!("/v1/sessions/{b}"), None).await;
    assert_eq!(vb, last);
}

#[tokio::test]
async fn cors_preflight_is_answered() {
    let app = app();
    let req = Request::builder()
        .method(Method::OPTIONS)
        .uri("/v1/sessions")
        .header(header::ORIGIN, "http://localhost:5173")
        .header(header::ACCESS_CONTROL_REQUEST_METHOD, "POST")
        .body(Body::empty())
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    assert!(resp.status().is_success());
    assert_eq!(resp.headers()[header::ACCESS_CONTROL_ALLOW_ORIGIN], "*");

    let app = app_with(ServeConfig { cors_origin: "http://ui.local".into(), ..ServeConfig::default() }, None);
    let req = Request::builder().uri("/v1/health").header(header::ORIGIN, "http://ui.local").body(Body::empty()).unwrap();
    let resp = app.oneshot(req).await.unwrap();
    assert_eq!(resp.headers()[header::ACCESS_CONTROL_ALLOW_ORIGIN], "http://ui.local");
}
