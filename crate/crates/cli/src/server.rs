//! HTTP API over a loaded engine.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use motif_search::{Engine, Error, Rect};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Deserialize)]
pub struct QueryRequest {
    pub image_id: u32,
    pub rect: [f64; 4],
    #[serde(default = "default_k")]
    pub k: usize,
}

fn default_k() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub image_id: u32,
    pub rect: [f64; 4],
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub results: Vec<QueryResult>,
    pub timing_ms: f64,
    pub candidates_considered: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub index_entries: usize,
    pub images: usize,
    pub descriptor_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSummary {
    pub id: u32,
    pub path: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageList {
    pub count: usize,
    pub descriptor_dim: usize,
    pub style_template_ids: Vec<u32>,
    pub images: Vec<ImageSummary>,
}

pub struct ApiError(StatusCode, String, String);

impl ApiError {
    fn bad_request(msg: impl Into<String>) -> Self {
        ApiError(StatusCode::BAD_REQUEST, "bad-request".into(), msg.into())
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::UnknownImage(_) => StatusCode::NOT_FOUND,
            Error::InvalidArgument(_)
            | Error::QueryTooSmall(_)
            | Error::RegionOutside(_)
            | Error::DimensionMismatch { .. } => StatusCode::BAD_REQUEST,
            Error::EmptyIndex => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.kind().into(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.0,
            Json(serde_json::json!({ "error": self.1, "message": self.2 })),
        )
            .into_response()
    }
}

/// Answers one query against the engine.
pub fn answer(engine: &Engine, req: &QueryRequest) -> Result<QueryResponse, Error> {
    let [x, y, w, h] = req.rect;
    let rect = Rect::new(x, y, w, h)?;
    if req.k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    let out = engine.retrieve(req.image_id, &rect, req.k)?;
    let results = out
        .full
        .iter()
        .map(|r| QueryResult {
            image_id: r.image_id,
            rect: [r.rect.x(), r.rect.y(), r.rect.w(), r.rect.h()],
            score: r.score,
        })
        .collect();
    Ok(QueryResponse {
        results,
        timing_ms: out.timing.total_ms,
        candidates_considered: out.candidates_considered,
    })
}

async fn health(State(engine): State<Arc<Engine>>) -> Json<Health> {
    Json(Health {
        index_entries: engine.index.len(),
        images: engine.manifest.n(),
        descriptor_dim: engine.manifest.descriptor_dim,
    })
}

async fn images(State(engine): State<Arc<Engine>>) -> Json<ImageList> {
    let m = &engine.manifest;
    Json(ImageList {
        count: m.n(),
        descriptor_dim: m.descriptor_dim,
        style_template_ids: m.style_template_ids.clone(),
        images: m
            .images
            .iter()
            .map(|r| ImageSummary {
                id: r.id,
                path: r.path.clone(),
                width: r.width,
                height: r.height,
            })
            .collect(),
    })
}

async fn image(
    State(engine): State<Arc<Engine>>,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    let id: u32 = id
        .parse()
        .map_err(|_| ApiError::bad_request(format!("invalid image id {id:?}")))?;
    let rec = engine.record(id)?.clone();
    let png = tokio::task::spawn_blocking(move || -> Result<Vec<u8>, Error> {
        let img = engine.provider.images.load(&rec)?;
        let mut bytes = Vec::new();
        img.write_to(
            &mut std::io::Cursor::new(&mut bytes),
            image::ImageFormat::Png,
        )?;
        Ok(bytes)
    })
    .await
    .map_err(|e| {
        ApiError(
            StatusCode::INTERNAL_SERVER_ERROR,
            "internal".into(),
            e.to_string(),
        )
    })??;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn query(
    State(engine): State<Arc<Engine>>,
    body: Bytes,
) -> Result<Json<QueryResponse>, ApiError> {
    let req: QueryRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::bad_request(format!("malformed request: {e}")))?;
    tokio::task::spawn_blocking(move || answer(&engine, &req))
        .await
        .map_err(|e| {
            ApiError(
                StatusCode::INTERNAL_SERVER_ERROR,
                "internal".into(),
                e.to_string(),
            )
        })?
        .map(Json)
        .map_err(ApiError::from)
}

pub fn router(engine: Arc<Engine>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/images", get(images))
        .route("/api/images/{id}", get(image))
        .route("/api/query", post(query))
        .with_state(engine)
}
