//! HTTP API over one immutable model.
//!
//! Bodies are parsed by hand so that every rejection names the offending
//! field. Inference runs on the blocking pool.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Request, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::Serialize;
use serde_json::{json, Map, Value};

use lang2color::colorspace::RgbImage;
use lang2color::data::object_mask;
use lang2color::evaluation::{activation_heatmap, manipulation_eval, ManipulationRecord, DEFAULT_HEATMAP_BLOCKS};
use lang2color::imageio::{contact_sheet, decode_grey, decode_rgb, encode_grey_png, encode_png, image_dimensions, GreyImage};
use lang2color::model::ColorizationModel;
use lang2color::text::lexicon::{swap_color_word, ColorLexicon};

/// Largest accepted image, in decoded bytes (compressed or as raw RGB).
pub const MAX_IMAGE_BYTES: usize = 16 * 1024 * 1024;
pub const MAX_CAPTION_CHARS: usize = 512;
/// Leaves room for base64 overhead on a maximal image plus a mask.
const MAX_BODY_BYTES: usize = 48 * 1024 * 1024;

pub struct AppState {
    pub model: ColorizationModel<f32>,
    pub model_id: String,
    pub lexicon: ColorLexicon,
    request_log: Option<Mutex<File>>,
}

impl AppState {
    pub fn new(model: ColorizationModel<f32>, model_id: String, lexicon: ColorLexicon, request_log: Option<File>) -> Arc<Self> {
        Arc::new(AppState { model, model_id, lexicon, request_log: request_log.map(Mutex::new) })
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/lexicon", get(lexicon))
        .route("/colorize", post(colorize))
        .route("/manipulate", post(manipulate))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .layer(middleware::from_fn_with_state(state.clone(), log_and_cors))
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    field: Option<&'static str>,
    id: Option<String>,
}

impl ApiError {
    fn bad(field: &'static str, message: impl Into<String>) -> Self {
        ApiError { status: StatusCode::BAD_REQUEST, message: message.into(), field: Some(field), id: None }
    }

    fn too_large(field: &'static str, message: impl Into<String>) -> Self {
        ApiError { status: StatusCode::PAYLOAD_TOO_LARGE, message: message.into(), field: Some(field), id: None }
    }

    /// Logs the details under a fresh id and returns only the id.
    fn internal(details: impl std::fmt::Display) -> Self {
        let id = uuid::Uuid::new_v4().to_string();
        log::error!("request {id}: {details}");
        ApiError { status: StatusCode::INTERNAL_SERVER_ERROR, message: "internal error".into(), field: None, id: Some(id) }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message });
        if let Some(f) = self.field {
            body["field"] = json!(f);
        }
        if let Some(id) = self.id {
            body["id"] = json!(id);
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn log_and_cors(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    let started = Instant::now();
    let (method, path) = (req.method().clone(), req.uri().path().to_string());
    let mut response = if method == Method::OPTIONS {
        StatusCode::NO_CONTENT.into_response()
    } else {
        next.run(req).await
    };
    let headers = response.headers_mut();
    headers.insert(header::ACCESS_CONTROL_ALLOW_ORIGIN, HeaderValue::from_static("*"));
    headers.insert(header::ACCESS_CONTROL_ALLOW_METHODS, HeaderValue::from_static("GET, POST, OPTIONS"));
    headers.insert(header::ACCESS_CONTROL_ALLOW_HEADERS, HeaderValue::from_static("content-type"));
    if let Some(file) = &state.request_log {
        let line = json!({
            "method": method.as_str(),
            "path": path,
            "status": response.status().as_u16(),
            "ms": started.elapsed().as_secs_f64() * 1e3,
        });
        if let Ok(mut f) = file.lock() {
            let _ = writeln!(f, "{line}");
        }
    }
    response
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({
        "status": "ok",
        "model_id": state.model_id,
        "fusion_mode": state.model.config().fusion_mode,
    }))
}

async fn lexicon(State(state): State<Arc<AppState>>) -> Json<Value> {
    let words: Vec<Value> = state.lexicon.entries().iter().map(|e| json!({ "word": e.word, "ab": e.ab })).collect();
    Json(json!({ "words": words }))
}

/// A JSON object body with only `allowed` keys.
fn parse_object(body: &[u8], allowed: &[&'static str]) -> ApiResult<Map<String, Value>> {
    let value: Value = serde_json::from_slice(body).map_err(|e| ApiError {
        status: StatusCode::BAD_REQUEST,
        message: format!("malformed JSON: {e}"),
        field: None,
        id: None,
    })?;
    let Value::Object(map) = value else {
        return Err(ApiError { status: StatusCode::BAD_REQUEST, message: "body must be a JSON object".into(), field: None, id: None });
    };
    if let Some(k) = map.keys().find(|k| !allowed.contains(&k.as_str())) {
        let message = format!("unknown field {k:?}; expected one of {}", allowed.join(", "));
        return Err(ApiError { status: StatusCode::BAD_REQUEST, message, field: None, id: None });
    }
    Ok(map)
}

fn string_field(map: &Map<String, Value>, field: &'static str, required: bool) -> ApiResult<Option<String>> {
    match map.get(field) {
        None | Some(Value::Null) if !required => Ok(None),
        None | Some(Value::Null) => Err(ApiError::bad(field, "required string is missing")),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(ApiError::bad(field, "must be a string")),
    }
}

fn caption_field(map: &Map<String, Value>, field: &'static str) -> ApiResult<String> {
    let caption = string_field(map, field, true)?.unwrap_or_default();
    if caption.chars().count() > MAX_CAPTION_CHARS {
        return Err(ApiError::bad(field, format!("longer than {MAX_CAPTION_CHARS} characters")));
    }
    Ok(caption)
}

fn decode_base64(field: &'static str, text: &str) -> ApiResult<Vec<u8>> {
    // tolerate data URLs from browsers
    let payload = text.split_once(";base64,").map_or(text, |(_, p)| p);
    if payload.len() / 4 * 3 > MAX_IMAGE_BYTES + 3 {
        return Err(ApiError::too_large(field, format!("larger than {MAX_IMAGE_BYTES} bytes")));
    }
    let bytes = BASE64.decode(payload.trim()).map_err(|e| ApiError::bad(field, format!("not valid base64: {e}")))?;
    if bytes.len() > MAX_IMAGE_BYTES {
        return Err(ApiError::too_large(field, format!("larger than {MAX_IMAGE_BYTES} bytes")));
    }
    Ok(bytes)
}

fn check_pixels(field: &'static str, bytes: &[u8], channels: usize) -> ApiResult<()> {
    let (h, w) = image_dimensions(bytes).map_err(|e| ApiError::bad(field, format!("not a decodable image: {e}")))?;
    if h.saturating_mul(w).saturating_mul(channels) > MAX_IMAGE_BYTES {
        return Err(ApiError::too_large(field, format!("{w}×{h} decodes to more than {MAX_IMAGE_BYTES} bytes")));
    }
    Ok(())
}

fn image_field(map: &Map<String, Value>, field: &'static str) -> ApiResult<RgbImage> {
    let text = string_field(map, field, true)?.unwrap_or_default();
    let bytes = decode_base64(field, &text)?;
    check_pixels(field, &bytes, 3)?;
    decode_rgb(&bytes).map_err(|e| ApiError::bad(field, format!("not a decodable image: {e}")))
}

fn mask_field(map: &Map<String, Value>, field: &'static str) -> ApiResult<Option<GreyImage>> {
    let Some(text) = string_field(map, field, false)? else { return Ok(None) };
    let bytes = decode_base64(field, &text)?;
    check_pixels(field, &bytes, 1)?;
    decode_grey(&bytes).map(Some).map_err(|e| ApiError::bad(field, format!("not a decodable image: {e}")))
}

fn bool_field(map: &Map<String, Value>, field: &'static str) -> ApiResult<bool> {
    match map.get(field) {
        None | Some(Value::Null) => Ok(false),
        Some(Value::Bool(b)) => Ok(*b),
        Some(_) => Err(ApiError::bad(field, "must be a boolean")),
    }
}

fn blocks_field(map: &Map<String, Value>, num_blocks: usize) -> ApiResult<Vec<usize>> {
    let Some(value) = map.get("blocks").filter(|v| !v.is_null()) else {
        return Ok(DEFAULT_HEATMAP_BLOCKS.into_iter().filter(|&b| b <= num_blocks).collect());
    };
    let items = value.as_array().ok_or_else(|| ApiError::bad("blocks", "must be a list of block numbers"))?;
    items
        .iter()
        .map(|v| match v.as_u64() {
            Some(b) if (1..=num_blocks as u64).contains(&b) => Ok(b as usize),
            _ => Err(ApiError::bad("blocks", format!("entries must be block numbers in 1..={num_blocks}"))),
        })
        .collect()
}

fn words_field(map: &Map<String, Value>, lexicon: &ColorLexicon) -> ApiResult<Vec<String>> {
    let items = match map.get("words") {
        Some(Value::Array(a)) => a,
        None | Some(Value::Null) => return Err(ApiError::bad("words", "required list is missing")),
        Some(_) => return Err(ApiError::bad("words", "must be a list of color words")),
    };
    let mut words: Vec<String> = Vec::new();
    for item in items {
        let w = item.as_str().ok_or_else(|| ApiError::bad("words", "entries must be strings"))?.trim().to_lowercase();
        if !lexicon.contains(&w) {
            return Err(ApiError::bad("words", format!("{w:?} is not a lexicon color word")));
        }
        if !words.contains(&w) {
            words.push(w);
        }
    }
    if words.len() < 2 {
        return Err(ApiError::bad("words", "needs at least two distinct color words"));
    }
    Ok(words)
}

fn png_base64(img: &RgbImage) -> String {
    BASE64.encode(encode_png(img))
}

#[derive(Serialize)]
pub struct ColorizeResponse {
    pub image: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heatmaps: Option<BTreeMap<usize, String>>,
    pub timing_ms: f64,
}

async fn colorize(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<ColorizeResponse>> {
    let started = Instant::now();
    let map = parse_object(&body, &["image", "caption", "return_heatmaps", "blocks"])?;
    let caption = caption_field(&map, "caption")?;
    let image = image_field(&map, "image")?;
    let want_heatmaps = bool_field(&map, "return_heatmaps")?;
    let blocks = blocks_field(&map, state.model.config().num_blocks())?;
    let worker = state.clone();
    let (png, heatmaps) = tokio::task::spawn_blocking(move || {
        let result = worker.model.colorize(&image, &caption)?;
        let heatmaps = want_heatmaps.then(|| {
            blocks
                .iter()
                .map(|&b| (b, BASE64.encode(encode_grey_png(&activation_heatmap(&result.prediction.features[b - 1])))))
                .collect::<BTreeMap<_, _>>()
        });
        Ok::<_, lang2color::Error>((png_base64(&result.image), heatmaps))
    })
    .await
    .map_err(ApiError::internal)?
    .map_err(ApiError::internal)?;
    Ok(Json(ColorizeResponse { image: png, heatmaps, timing_ms: started.elapsed().as_secs_f64() * 1e3 }))
}

#[derive(Serialize)]
pub struct ManipulatedImage {
    pub word: String,
    pub caption: String,
    pub image: String,
}

#[derive(Serialize)]
pub struct ManipulateResponse {
    pub variants: Vec<ManipulatedImage>,
    pub contact_sheet: String,
    /// Region statistics, present when a mask was sent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub record: Option<ManipulationRecord>,
    pub timing_ms: f64,
}

async fn manipulate(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<ManipulateResponse>> {
    let started = Instant::now();
    let map = parse_object(&body, &["image", "base_caption", "words", "mask"])?;
    let base_caption = caption_field(&map, "base_caption")?;
    let words = words_field(&map, &state.lexicon)?;
    if state.lexicon.find_in(&base_caption).is_none() {
        return Err(ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            message: "base caption has no color word to swap".into(),
            field: Some("base_caption"),
            id: None,
        });
    }
    let image = image_field(&map, "image")?;
    let mask = match mask_field(&map, "mask")? {
        Some(grey) => {
            let m = object_mask(&grey, state.model.config()).map_err(ApiError::internal)?;
            if !m.contains(&true) {
                return Err(ApiError::bad("mask", "covers no whole output pixel"));
            }
            Some(m)
        }
        None => None,
    };
    let worker = state.clone();
    let (variants, sheet, record) = tokio::task::spawn_blocking(move || {
        let (model, lexicon) = (&worker.model, &worker.lexicon);
        let mut variants = Vec::with_capacity(words.len());
        let mut panels = Vec::with_capacity(words.len());
        for w in &words {
            let caption = swap_color_word(&base_caption, w, lexicon)?.text;
            let result = model.colorize(&image, &caption)?;
            variants.push(ManipulatedImage { word: w.clone(), caption, image: png_base64(&result.image) });
            panels.push(result.image);
        }
        let record = match mask {
            Some(m) => {
                let size = model.config().output_size();
                let lightness = model.input_lightness(&image);
                Some(manipulation_eval(model, "request", &lightness, &m, (size, size), &base_caption, &words, lexicon)?)
            }
            None => None,
        };
        Ok::<_, lang2color::Error>((variants, png_base64(&contact_sheet(&panels, 4)), record))
    })
    .await
    .map_err(ApiError::internal)?
    .map_err(ApiError::internal)?;
    Ok(Json(ManipulateResponse {
        variants,
        contact_sheet: sheet,
        record,
        timing_ms: started.elapsed().as_secs_f64() * 1e3,
    }))
}
