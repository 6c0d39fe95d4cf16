//! HTTP/JSON routes over a [`Store`].

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use guidedseg_core::image::RgbImage;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

use crate::session::{Click, LocalityMode, ServiceError, Store};

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::UnknownSession(_) | ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::BadRequest { .. } => StatusCode::BAD_REQUEST,
            ServiceError::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::Core(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let mut body = json!({ "error": self.to_string() });
        if let ServiceError::BadRequest { point: Some(i), .. } = &self {
            body["point"] = json!(i);
        }
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ServiceError>;

fn decode_image(b64: &str) -> ApiResult<RgbImage> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(b64.trim())
        .map_err(|e| ServiceError::bad(format!("image is not valid base64: {e}")))?;
    RgbImage::from_png(&bytes).map_err(|e| ServiceError::bad(format!("image is not a decodable PNG: {e}")))
}

/// Runs CPU-bound session work off the async workers.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Core(guidedseg_core::error::Error::Contract(format!("worker failed: {e}"))))?
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateRequest {
    image_png_base64: Option<String>,
    frames: Option<Vec<String>>,
    model: String,
    #[serde(default)]
    locality: LocalityMode,
}

async fn create(State(store): State<Arc<Store>>, Json(req): Json<CreateRequest>) -> ApiResult<impl IntoResponse> {
    let encoded = match (req.image_png_base64, req.frames) {
        (Some(one), None) => vec![one],
        (None, Some(many)) if !many.is_empty() => many,
        _ => return Err(ServiceError::bad("give exactly one of image_png_base64 or a non-empty frames list")),
    };
    let created = blocking(move || {
        let images = encoded.iter().map(|b| decode_image(b)).collect::<ApiResult<Vec<_>>>()?;
        store.create(&req.model, &images, req.locality)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(created)))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameRequest {
    image_png_base64: String,
}

async fn append_frame(
    State(store): State<Arc<Store>>,
    Path(id): Path<String>,
    Json(req): Json<FrameRequest>,
) -> ApiResult<impl IntoResponse> {
    let frame = blocking(move || store.append_frame(&id, &decode_image(&req.image_png_base64)?)).await?;
    Ok((StatusCode::CREATED, Json(json!({ "frame": frame }))))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotateRequest {
    frame: usize,
    points: Vec<Click>,
}

async fn annotate(
    State(store): State<Arc<Store>>,
    Path(id): Path<String>,
    Json(req): Json<AnnotateRequest>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(move || store.annotate(&id, req.frame, &req.points)).await?))
}

#[derive(Debug, Deserialize)]
struct ClearQuery {
    frame: Option<usize>,
}

async fn clear(State(store): State<Arc<Store>>, Path(id): Path<String>, Query(q): Query<ClearQuery>) -> ApiResult<impl IntoResponse> {
    blocking(move || store.clear(&id, q.frame)).await?;
    Ok(Json(json!({ "cleared": q.frame.map_or(json!("all"), |f| json!(f)) })))
}

#[derive(Clone, Copy, Debug, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
enum MaskFormat {
    #[default]
    Rle,
    Png,
}

#[derive(Debug, Deserialize)]
struct MaskQuery {
    frame: usize,
    #[serde(default)]
    format: MaskFormat,
}

#[derive(Debug, Serialize)]
struct MaskBody<'a> {
    mask_rle: &'a [u32],
    width: usize,
    height: usize,
    degenerate: bool,
}

async fn mask(State(store): State<Arc<Store>>, Path(id): Path<String>, Query(q): Query<MaskQuery>) -> ApiResult<Response> {
    let m = blocking(move || store.mask(&id, q.frame)).await?;
    Ok(match q.format {
        MaskFormat::Rle => Json(MaskBody {
            mask_rle: &m.rle,
            width: m.mask.width(),
            height: m.mask.height(),
            degenerate: m.degenerate,
        })
        .into_response(),
        MaskFormat::Png => ([(header::CONTENT_TYPE, "image/png")], m.png()?.to_vec()).into_response(),
    })
}

async fn summary(State(store): State<Arc<Store>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(store.summary(&id)?))
}

/// The versioned API; with `static_dir`, other paths serve files from it.
pub fn router(store: Arc<Store>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/v1/sessions", post(create))
        .route("/v1/sessions/{id}", get(summary))
        .route("/v1/sessions/{id}/frames", post(append_frame))
        .route("/v1/sessions/{id}/annotations", post(annotate).delete(clear))
        .route("/v1/sessions/{id}/mask", get(mask))
        .layer(DefaultBodyLimit::max(64 << 20))
        .with_state(store);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}
