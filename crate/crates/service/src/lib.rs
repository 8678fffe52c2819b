//! HTTP front end for click-driven annotation sessions.
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/images` | image list |
//! | GET | `/images/{id}` | image metadata and label table |
//! | GET | `/images/{id}/raw` | image file |
//! | POST | `/sessions` | `{image_id}` → 201 `{session_id}` |
//! | GET | `/sessions/{id}` | full session, for redrawing the UI |
//! | POST | `/sessions/{id}/clicks` | `{x, y, class_id}` → `{sequence}` |
//! | DELETE | `/sessions/{id}/clicks/last` | undo |
//! | POST | `/sessions/{id}/refine` | optional engine overrides → result |
//! | GET | `/sessions/{id}/result` | last result, 409 before refine |
//! | GET | `/annotations/{image_id}` | canonical export |
//!
//! Errors are `{code, message, field?}`.

pub mod config;
pub mod error;
pub mod journal;
pub mod state;

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

pub use config::ServiceConfig;
pub use error::ApiError;
pub use state::{AppState, RefineOverrides, RefineResult};

type Shared = State<Arc<AppState>>;

pub fn router(state: Arc<AppState>) -> Router {
    let static_dir = state.config().static_dir.clone();
    let api = Router::new()
        .route("/images", get(list_images))
        .route("/images/{id}", get(get_image))
        .route("/images/{id}/raw", get(get_image_raw))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/clicks", post(add_click))
        .route("/sessions/{id}/clicks/last", delete(undo_click))
        .route("/sessions/{id}/refine", post(refine))
        .route("/sessions/{id}/result", get(get_result))
        .route("/annotations/{image_id}", get(get_annotations))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.fallback(|| async { ApiError::not_found("route", "") }),
    }
}

fn parse_body<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

async fn list_images(State(app): Shared) -> Json<serde_json::Value> {
    Json(json!(app.images().map(|gt| &gt.image).collect::<Vec<_>>()))
}

async fn get_image(State(app): Shared, Path(id): Path<String>) -> Result<Json<serde_json::Value>, ApiError> {
    let gt = app.image(&id)?;
    Ok(Json(json!({ "image": gt.image, "label_table": gt.label_table })))
}

fn content_type(path: &std::path::Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        Some("bmp") => "image/bmp",
        Some("svg") => "image/svg+xml",
        _ => "application/octet-stream",
    }
}

async fn get_image_raw(State(app): Shared, Path(id): Path<String>) -> Result<Response, ApiError> {
    let path = app.image_path(&id)?;
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|_| ApiError::not_found("image file for", &id))?;
    Ok(([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response())
}

#[derive(Deserialize)]
struct CreateSession {
    image_id: String,
}

#[derive(Serialize)]
struct Created {
    session_id: String,
}

async fn create_session(State(app): Shared, body: Bytes) -> Result<(StatusCode, Json<Created>), ApiError> {
    let req: CreateSession = parse_body(&body)?;
    let session_id = app.create_session(&req.image_id)?;
    Ok((StatusCode::CREATED, Json(Created { session_id })))
}

async fn get_session(State(app): Shared, Path(id): Path<String>) -> Result<Json<serde_json::Value>, ApiError> {
    Ok(Json(app.session_json(&id)?))
}

#[derive(Deserialize)]
struct NewClick {
    x: f64,
    y: f64,
    class_id: u32,
}

#[derive(Serialize)]
struct Sequence {
    sequence: u64,
}

async fn add_click(State(app): Shared, Path(id): Path<String>, body: Bytes) -> Result<Json<Sequence>, ApiError> {
    let click: NewClick = parse_body(&body)?;
    let sequence = app.add_click(&id, click.x, click.y, click.class_id)?;
    Ok(Json(Sequence { sequence }))
}

#[derive(Serialize)]
struct Removed {
    removed: u64,
}

async fn undo_click(State(app): Shared, Path(id): Path<String>) -> Result<Json<Removed>, ApiError> {
    Ok(Json(Removed { removed: app.undo(&id)? }))
}

async fn refine(State(app): Shared, Path(id): Path<String>, body: Bytes) -> Result<Json<RefineResult>, ApiError> {
    let overrides = if body.iter().all(u8::is_ascii_whitespace) {
        RefineOverrides::default()
    } else {
        parse_body(&body)?
    };
    Ok(Json(app.refine(&id, &overrides)?))
}

async fn get_result(State(app): Shared, Path(id): Path<String>) -> Result<Json<RefineResult>, ApiError> {
    Ok(Json(app.result(&id)?))
}

async fn get_annotations(State(app): Shared, Path(image_id): Path<String>) -> Result<Response, ApiError> {
    let text = app.exported(&image_id)?;
    Ok(([(header::CONTENT_TYPE, "application/json")], text).into_response())
}
