//! The HTTP API, exercised in-process.

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use lang2color::colorspace::RgbImage;
use lang2color::imageio::{decode_rgb, encode_grey_png, encode_png, GreyImage};
use lang2color::model::{ColorizationModel, EncoderConfig};
use lang2color::network::{FusionMode, NetworkConfig};
use lang2color::quantizer::QuantizerSpec;
use lang2color::text::lexicon::ColorLexicon;
use lang2color::text::vocab::build_vocab;
use lang2color_cli::server::{router, AppState};

fn app() -> Router {
    let net = NetworkConfig {
        input_size: 16,
        block_channels: vec![4, 6, 6, 8, 8, 8, 8, 8],
        language_dim: 8,
        ..NetworkConfig::narrow(FusionMode::Film)
    };
    let vocab = build_vocab(&["a red circle on a grey background", "a blue square"], 1).unwrap();
    let model = ColorizationModel::new(&net, EncoderConfig::for_language_dim(8), vocab, QuantizerSpec::default(), 3).unwrap();
    router(AppState::new(model, "test-film".into(), ColorLexicon::default(), None))
}

async fn send(app: &Router, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(Body::from).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn send_json(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    let (status, bytes) = send(app, "POST", uri, Some(body.to_string())).await;
    (status, serde_json::from_slice(&bytes).unwrap())
}

fn png_b64(img: &RgbImage) -> String {
    BASE64.encode(encode_png(img))
}

fn grey(n: usize, v: u8) -> String {
    png_b64(&RgbImage::filled(n, n, [v, v, v]))
}

#[tokio::test]
async fn health_and_lexicon() {
    let app = app();
    let (status, body) = send(&app, "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v, json!({"status": "ok", "model_id": "test-film", "fusion_mode": "FILM"}));

    let (status, body) = send(&app, "GET", "/lexicon", None).await;
    assert_eq!(status, StatusCode::OK);
    let v: Value = serde_json::from_slice(&body).unwrap();
    let words: Vec<&str> = v["words"].as_array().unwrap().iter().map(|w| w["word"].as_str().unwrap()).collect();
    assert_eq!(words.len(), 10);
    assert!(words.contains(&"red") && words.contains(&"blue"));
}

#[tokio::test]
async fn colorize_degenerate_and_empty_inputs() {
    let app = app();
    let (status, v) = send_json(&app, "/colorize", json!({"image": grey(1, 128), "caption": "a red circle"})).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let img = decode_rgb(&BASE64.decode(v["image"].as_str().unwrap()).unwrap()).unwrap();
    assert_eq!((img.height, img.width), (1, 1));
    assert!(v["timing_ms"].as_f64().unwrap() >= 0.0);
    assert!(v.get("heatmaps").is_none());

    let (status, _) = send_json(&app, "/colorize", json!({"image": grey(20, 90), "caption": ""})).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn identical_requests_give_identical_images() {
    let app = app();
    let mut img = RgbImage::filled(24, 30, [120, 120, 120]);
    for x in 0..30 {
        img.set(5, x, [200, 40, 40]);
    }
    let body = json!({"image": png_b64(&img), "caption": "a blue square", "return_heatmaps": true});
    let (s1, a) = send_json(&app, "/colorize", body.clone()).await;
    let (s2, b) = send_json(&app, "/colorize", body).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_eq!(a["image"], b["image"]);
    assert_eq!(a["heatmaps"], b["heatmaps"]);
    let maps = a["heatmaps"].as_object().unwrap();
    assert_eq!(maps.keys().collect::<Vec<_>>(), ["6", "7", "8"]);
}

#[tokio::test]
async fn heatmap_blocks_can_be_chosen() {
    let app = app();
    let body = json!({"image": grey(16, 100), "caption": "a red circle", "return_heatmaps": true, "blocks": [1, 8]});
    let (status, v) = send_json(&app, "/colorize", body).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["heatmaps"].as_object().unwrap().keys().collect::<Vec<_>>(), ["1", "8"]);
}

#[tokio::test]
async fn field_level_rejections() {
    let app = app();
    let (status, body) = send(&app, "POST", "/colorize", Some("{not json".into())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(String::from_utf8_lossy(&body).contains("malformed JSON"));

    let cases = [
        (json!({"caption": "x"}), "image"),
        (json!({"image": grey(2, 0), "caption": 7}), "caption"),
        (json!({"image": grey(2, 0)}), "caption"),
        (json!({"image": "***", "caption": ""}), "image"),
        (json!({"image": BASE64.encode(b"not an image"), "caption": ""}), "image"),
        (json!({"image": grey(2, 0), "caption": "x".repeat(513)}), "caption"),
        (json!({"image": grey(2, 0), "caption": "", "blocks": [9]}), "blocks"),
        (json!({"image": grey(2, 0), "caption": "", "return_heatmaps": "yes"}), "return_heatmaps"),
    ];
    for (body, field) in cases {
        let (status, v) = send_json(&app, "/colorize", body).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{v}");
        assert_eq!(v["field"], field, "{v}");
    }
    let (status, v) = send_json(&app, "/colorize", json!({"image": grey(2, 0), "caption": "", "colour": 1})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().unwrap().contains("colour"));
}

#[tokio::test]
async fn oversized_images_are_413() {
    let app = app();
    // small on the wire, but 2400×2400 RGB is more than 16 MiB once decoded
    let big = GreyImage { height: 2400, width: 2400, pixels: vec![0; 2400 * 2400] };
    let body = json!({"image": BASE64.encode(encode_grey_png(&big)), "caption": ""});
    let (status, v) = send_json(&app, "/colorize", body).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE, "{v}");
    assert_eq!(v["field"], "image");

    let body = json!({"image": "A".repeat(23 * 1024 * 1024), "caption": ""});
    let (status, v) = send_json(&app, "/colorize", body).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE, "{v}");
}

#[tokio::test]
async fn manipulate_variants_and_region_record() {
    let app = app();
    let mut mask = GreyImage { height: 16, width: 16, pixels: vec![0; 256] };
    for y in 4..12 {
        for x in 4..12 {
            mask.pixels[y * 16 + x] = 255;
        }
    }
    let body = json!({
        "image": grey(16, 140),
        "base_caption": "a red circle",
        "words": ["red", "blue", "red"],
        "mask": BASE64.encode(encode_grey_png(&mask)),
    });
    let (status, v) = send_json(&app, "/manipulate", body).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let variants = v["variants"].as_array().unwrap();
    assert_eq!(variants.len(), 2);
    assert_eq!(variants[1]["caption"], "a blue circle");
    let sheet = decode_rgb(&BASE64.decode(v["contact_sheet"].as_str().unwrap()).unwrap()).unwrap();
    assert_eq!(sheet.width, 16 * 2 + 4);
    assert!(v["record"]["success"].is_boolean());
    assert_eq!(v["record"]["variants"].as_array().unwrap().len(), 2);

    let (status, v) = send_json(&app, "/manipulate", json!({"image": grey(4, 1), "base_caption": "a red car", "words": ["red", "blue"]})).await;
    assert_eq!(status, StatusCode::OK);
    assert!(v.get("record").is_none());
}

#[tokio::test]
async fn manipulate_rejections() {
    let app = app();
    let (status, v) = send_json(&app, "/manipulate", json!({"image": grey(4, 1), "base_caption": "a car", "words": ["red", "blue"]})).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["field"], "base_caption");
    for words in [json!(["red"]), json!(["red", "mauve"]), json!("red,blue"), json!(["red", "red"])] {
        let (status, v) = send_json(&app, "/manipulate", json!({"image": grey(4, 1), "base_caption": "a red car", "words": words})).await;
        assert_eq!(status, StatusCode::BAD_REQUEST);
        assert_eq!(v["field"], "words");
    }
    let empty = BASE64.encode(encode_grey_png(&GreyImage { height: 16, width: 16, pixels: vec![0; 256] }));
    let body = json!({"image": grey(4, 1), "base_caption": "a red car", "words": ["red", "blue"], "mask": empty});
    let (status, v) = send_json(&app, "/manipulate", body).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["field"], "mask");
}

#[tokio::test]
async fn concurrent_requests_share_the_model() {
    let app = Arc::new(app());
    let body = json!({"image": grey(16, 70), "caption": "a red circle"}).to_string();
    let handles: Vec<_> = (0..6)
        .map(|_| {
            let (app, body) = (app.clone(), body.clone());
            tokio::spawn(async move { send(&app, "POST", "/colorize", Some(body)).await })
        })
        .collect();
    let mut images = Vec::new();
    for h in handles {
        let (status, bytes) = h.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        let v: Value = serde_json::from_slice(&bytes).unwrap();
        images.push(v["image"].as_str().unwrap().to_string());
    }
    assert!(images.windows(2).all(|w| w[0] == w[1]));
}

#[tokio::test]
async fn preflight_gets_cors_headers() {
    let app = app();
    let req = Request::builder().method("OPTIONS").uri("/colorize").body(Body::empty()).unwrap();
    let resp = app.oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::NO_CONTENT);
    assert_eq!(resp.headers()["access-control-allow-origin"], "*");
}
