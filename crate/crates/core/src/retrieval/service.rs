//! Read-only HTTP query service over an index.
//!
//! | method | path | body / result |
//! |---|---|---|
//! | GET | `/healthz` | `{"status":"ok"}` |
//! | GET | `/index/info` | [`IndexInfo`] |
//! | POST | `/query/text` | `{text, k}` → ranked results |
//! | POST | `/query/volume` | `{study_id \| embedding, k}` → ranked results |
//! | GET | `/volumes/{id}/meta` | shape, spacing, unit, labels |
//! | GET | `/volumes/{id}/slice/{axis}/{index}` | 8-bit grayscale PNG |
//!
//! Errors are 4xx/5xx with a JSON body `{"error": "..."}`.

use std::collections::HashMap;
use std::io::Cursor;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use image::{GrayImage, ImageFormat};
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;

use super::{query_by_text, query_by_volume, EmbeddingIndex, IndexInfo, QueryKind, RetrievalResult, VolumeQuery};
use crate::clip::TextEmbedder;
use crate::encoders::Embedding;
use crate::error::{Error, Result};
use crate::volpre::io::read_volume;
use crate::volpre::{normalize_value, Unit, VolumeGrid, HU_MAX, HU_MIN};

pub const DEFAULT_K: usize = 10;

enum VolumeSource {
    Path(PathBuf),
    Memory(Arc<VolumeGrid>),
}

/// Volumes available to the slice viewer, loaded lazily and cached after first use.
#[derive(Default)]
pub struct VolumeStore {
    sources: HashMap<String, VolumeSource>,
    cache: RwLock<HashMap<String, Arc<VolumeGrid>>>,
}

impl VolumeStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_path(&mut self, study_id: impl Into<String>, path: impl Into<PathBuf>) {
        self.sources.insert(study_id.into(), VolumeSource::Path(path.into()));
    }

    pub fn add_volume(&mut self, study_id: impl Into<String>, volume: VolumeGrid) {
        self.sources
            .insert(study_id.into(), VolumeSource::Memory(Arc::new(volume)));
    }

    pub fn contains(&self, study_id: &str) -> bool {
        self.sources.contains_key(study_id)
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    /// The stored volume in its own unit, or `None` for an unknown id.
    pub fn get(&self, study_id: &str) -> Result<Option<Arc<VolumeGrid>>> {
        let src = match self.sources.get(study_id) {
            Some(s) => s,
            None => return Ok(None),
        };
        match src {
            VolumeSource::Memory(v) => Ok(Some(v.clone())),
            VolumeSource::Path(p) => {
                if let Some(v) = self.cache.read().unwrap().get(study_id) {
                    return Ok(Some(v.clone()));
                }
                let v = Arc::new(read_volume(p)?);
                self.cache
                    .write()
                    .unwrap()
                    .insert(study_id.to_string(), v.clone());
                Ok(Some(v))
            }
        }
    }
}

/// Normalized display value of one voxel in any unit.
fn display_value(v: f32, volume: &VolumeGrid) -> f32 {
    match volume.unit {
        Unit::Normalized => v,
        Unit::Hounsfield => normalize_value(v.clamp(HU_MIN, HU_MAX)),
        Unit::Raw => {
            let hu = (volume.rescale_slope * v as f64 + volume.rescale_intercept) as f32;
            normalize_value(hu.clamp(HU_MIN, HU_MAX))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Fixed z; image spans x (columns) and y (rows).
    Axial,
    /// Fixed y; image spans x and z.
    Coronal,
    /// Fixed x; image spans y and z.
    Sagittal,
}

impl std::str::FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "axial" | "z" => Ok(Axis::Axial),
            "coronal" | "y" => Ok(Axis::Coronal),
            "sagittal" | "x" => Ok(Axis::Sagittal),
            _ => Err(Error::InvalidArgument(format!(
                "unknown axis `{s}` (axial|coronal|sagittal)"
            ))),
        }
    }
}

/// Map normalized `[-1, 1]` to `0..=255`.
pub fn to_u8(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round()) as u8
}

/// One slice as a grayscale image, or `None` when the index is out of range.
pub fn slice_image(volume: &VolumeGrid, axis: Axis, index: usize) -> Option<GrayImage> {
    let [nx, ny, nz] = volume.shape();
    let d = &volume.data;
    let px = |v: f32| image::Luma([to_u8(display_value(v, volume))]);
    match axis {
        Axis::Axial if index < nz => Some(GrayImage::from_fn(nx as u32, ny as u32, |x, y| {
            px(d[[x as usize, y as usize, index]])
        })),
        Axis::Coronal if index < ny => Some(GrayImage::from_fn(nx as u32, nz as u32, |x, z| {
            px(d[[x as usize, index, z as usize]])
        })),
        Axis::Sagittal if index < nx => Some(GrayImage::from_fn(ny as u32, nz as u32, |y, z| {
            px(d[[index, y as usize, z as usize]])
        })),
        _ => None,
    }
}

pub fn encode_png(img: &GrayImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

struct Inner {
    index: EmbeddingIndex,
    encoder: Arc<dyn TextEmbedder>,
    volumes: VolumeStore,
}

/// Shared, read-only service state.
#[derive(Clone)]
pub struct ServiceState(Arc<Inner>);

impl ServiceState {
    pub fn new(index: EmbeddingIndex, encoder: Arc<dyn TextEmbedder>, volumes: VolumeStore) -> Self {
        Self(Arc::new(Inner {
            index,
            encoder,
            volumes,
        }))
    }

    pub fn index(&self) -> &EmbeddingIndex {
        &self.0.index
    }
}

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl ApiError {
    fn bad(msg: impl Into<String>) -> Self {
        ApiError(StatusCode::BAD_REQUEST, msg.into())
    }

    fn not_found(msg: impl Into<String>) -> Self {
        ApiError(StatusCode::NOT_FOUND, msg.into())
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match &e {
            Error::Retrieval(m) if m.starts_with("unknown study_id") => ApiError::not_found(e.to_string()),
            Error::Retrieval(_) | Error::InvalidArgument(_) | Error::Text(_) => ApiError::bad(e.to_string()),
            _ => ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError(r.status(), r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

#[derive(Debug, Deserialize)]
pub struct TextQuery {
    pub text: String,
    pub k: Option<usize>,
}

#[derive(Debug, Deserialize)]
pub struct VolumeQueryBody {
    pub study_id: Option<String>,
    pub embedding: Option<Vec<f32>>,
    pub k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultItem {
    pub rank: usize,
    pub study_id: String,
    pub score: f64,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub query_kind: QueryKind,
    pub k: usize,
    pub results: Vec<ResultItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub study_id: String,
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub unit: Unit,
    pub in_index: bool,
    pub labels: Vec<String>,
}

fn respond(state: &ServiceState, k: usize, r: RetrievalResult) -> QueryResponse {
    let results = r
        .ranked
        .into_iter()
        .enumerate()
        .map(|(i, x)| {
            let labels = state
                .index()
                .get(&x.study_id)
                .map(|e| state.index().label_names(e))
                .unwrap_or_default();
            ResultItem {
                rank: i + 1,
                study_id: x.study_id,
                score: x.score,
                labels,
            }
        })
        .collect();
    QueryResponse {
        query_kind: r.query_kind,
        k,
        results,
    }
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn index_info(State(s): State<ServiceState>) -> Json<IndexInfo> {
    Json(s.index().info())
}

async fn query_text(
    State(s): State<ServiceState>,
    body: std::result::Result<Json<TextQuery>, JsonRejection>,
) -> ApiResult<Json<QueryResponse>> {
    let Json(q) = body?;
    let k = q.k.unwrap_or(DEFAULT_K);
    let st = s.clone();
    let r = tokio::task::spawn_blocking(move || query_by_text(&st.0.index, &q.text, k, st.0.encoder.as_ref()))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(respond(&s, k, r)))
}

async fn query_volume(
    State(s): State<ServiceState>,
    body: std::result::Result<Json<VolumeQueryBody>, JsonRejection>,
) -> ApiResult<Json<QueryResponse>> {
    let Json(q) = body?;
    let k = q.k.unwrap_or(DEFAULT_K);
    let r = match (&q.study_id, q.embedding) {
        (Some(id), None) => query_by_volume(s.index(), VolumeQuery::StudyId(id), k)?,
        (None, Some(e)) => query_by_volume(s.index(), VolumeQuery::Embedding(&Embedding::new(e)), k)?,
        _ => return Err(ApiError::bad("give exactly one of `study_id` or `embedding`")),
    };
    Ok(Json(respond(&s, k, r)))
}

fn load_volume(s: &ServiceState, id: &str) -> ApiResult<Arc<VolumeGrid>> {
    s.0.volumes
        .get(id)?
        .ok_or_else(|| ApiError::not_found(format!("unknown volume `{id}`")))
}

async fn volume_meta(State(s): State<ServiceState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<VolumeMeta>> {
    let v = load_volume(&s, &id)?;
    let entry = s.index().get(&id);
    Ok(Json(VolumeMeta {
        shape: v.shape(),
        spacing_mm: v.spacing_mm,
        unit: v.unit,
        in_index: entry.is_some(),
        labels: entry.map(|e| s.index().label_names(e)).unwrap_or_default(),
        study_id: id,
    }))
}

async fn volume_slice(
    State(s): State<ServiceState>,
    UrlPath((id, axis, index)): UrlPath<(String, String, String)>,
) -> ApiResult<Response> {
    let axis: Axis = axis.parse().map_err(|e: Error| ApiError::bad(e.to_string()))?;
    let index: usize = index
        .parse()
        .map_err(|_| ApiError::bad(format!("slice index `{index}` is not a non-negative integer")))?;
    let v = load_volume(&s, &id)?;
    let img = slice_image(&v, axis, index)
        .ok_or_else(|| ApiError::not_found(format!("slice {index} out of range for {axis:?}")))?;
    let png = encode_png(&img)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

pub fn router(state: ServiceState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/index/info", get(index_info))
        .route("/query/text", post(query_text))
        .route("/query/volume", post(query_volume))
        .route("/volumes/{id}/meta", get(volume_meta))
        .route("/volumes/{id}/slice/{axis}/{index}", get(volume_slice))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Bind and serve in the background of the current runtime. Returns the bound address.
pub async fn spawn(state: ServiceState, addr: SocketAddr) -> Result<(SocketAddr, tokio::task::JoinHandle<()>)> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::Server(format!("cannot bind {addr}: {e}")))?;
    let local = listener
        .local_addr()
        .map_err(|e| Error::Server(e.to_string()))?;
    let handle = tokio::spawn(async move {
        let _ = axum::serve(listener, router(state)).await;
    });
    Ok((local, handle))
}

/// Serve until Ctrl-C, on a fresh multi-threaded runtime.
pub fn serve_blocking(state: ServiceState, addr: SocketAddr, on_ready: impl FnOnce(SocketAddr)) -> Result<()> {
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Server(e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| Error::Server(format!("cannot bind {addr}: {e}")))?;
        on_ready(listener.local_addr().map_err(|e| Error::Server(e.to_string()))?);
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| Error::Server(e.to_string()))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn window_mapping() {
        assert_eq!(to_u8(-1.0), 0);
        assert_eq!(to_u8(1.0), 255);
        assert_eq!(to_u8(0.0), 128);
        assert_eq!(to_u8(7.0), 255);
    }

    #[test]
    fn slice_orientation_and_range() {
        let data = Array3::from_shape_fn((4, 3, 2), |(x, y, z)| {
            if (x, y, z) == (3, 1, 1) {
                1.0
            } else {
                -1.0
            }
        });
        let v = VolumeGrid::new(data, [1.0; 3], Unit::Normalized).unwrap();
        let img = slice_image(&v, Axis::Axial, 1).unwrap();
        assert_eq!(img.dimensions(), (4, 3));
        assert_eq!(img.get_pixel(3, 1).0[0], 255);
        assert_eq!(img.get_pixel(0, 0).0[0], 0);
        assert_eq!(slice_image(&v, Axis::Sagittal, 3).unwrap().dimensions(), (3, 2));
        assert!(slice_image(&v, Axis::Axial, 2).is_none());
        let png = encode_png(&img).unwrap();
        assert_eq!(&png[1..4], b"PNG");
    }
}
