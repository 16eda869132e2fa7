//! HTTP inference service over a directory of checkpoints.
//!
//! Models are loaded once at startup and shared read-only across requests.

use std::fs;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;

use vseg_core::data::{resize_image, resize_mask, Image};
use vseg_core::model::{feature_maps, predict_logits};
use vseg_core::{loss, ModelSpec, ParamSet, Tensor};

use crate::checkpoint::load_checkpoint;
use crate::error::{Error, Result};
use crate::pgm::{self, Graymap};

pub const CHECKPOINT_EXT: &str = "vseg";
const BODY_LIMIT: usize = 64 << 20;

#[derive(Debug, Clone)]
pub struct Model {
    pub name: String,
    pub spec: ModelSpec,
    pub params: ParamSet<f32>,
}

/// Loaded models, sorted by name.
#[derive(Debug, Clone, Default)]
pub struct ModelStore {
    models: Vec<Model>,
}

impl ModelStore {
    pub fn new(mut models: Vec<Model>) -> Result<Self> {
        models.sort_by(|a, b| a.name.cmp(&b.name));
        if let Some(w) = models.windows(2).find(|w| w[0].name == w[1].name) {
            return Err(Error::Data(format!("duplicate model name `{}`", w[0].name)));
        }
        Ok(ModelStore { models })
    }

    /// Every `*.vseg` file in `dir`, named by file stem.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut models = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if !path.is_file() || path.extension().is_none_or(|x| x != CHECKPOINT_EXT) {
                continue;
            }
            let Some(name) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let (spec, params) = load_checkpoint(&path)?;
            models.push(Model {
                name: name.to_string(),
                spec,
                params,
            });
        }
        ModelStore::new(models)
    }

    pub fn names(&self) -> Vec<String> {
        self.models.iter().map(|m| m.name.clone()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Model> {
        self.models.iter().find(|m| m.name == name)
    }

    pub fn models(&self) -> &[Model] {
        &self.models
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub name: String,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub name: String,
    pub variant: String,
    pub input_size: usize,
    pub layers: Vec<LayerInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub width: usize,
    pub height: usize,
    pub original_width: usize,
    pub original_height: usize,
    /// Base64 of one label byte per pixel, row-major.
    pub labels: String,
    /// Soft Dice per foreground class, present when a mask was supplied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_class_dsc: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub available_models: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid_layers: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    fn bad_request(msg: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            body: ErrorBody {
                error: msg.into(),
                available_models: None,
                valid_layers: None,
            },
        }
    }

    fn internal(msg: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            ..ApiError::bad_request(msg)
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

pub fn model_info(m: &Model) -> ModelInfo {
    ModelInfo {
        name: m.name.clone(),
        variant: m.spec.variant.name().to_string(),
        input_size: m.spec.input_size,
        layers: m
            .spec
            .layers()
            .into_iter()
            .map(|l| LayerInfo {
                name: l.name,
                channels: l.out_channels,
            })
            .collect(),
    }
}

fn lookup<'a>(store: &'a ModelStore, name: Option<&str>) -> ApiResult<&'a Model> {
    let name = name.ok_or_else(|| ApiError::bad_request("missing query parameter `model`"))?;
    store.get(name).ok_or_else(|| ApiError {
        status: StatusCode::NOT_FOUND,
        body: ErrorBody {
            error: format!("unknown model `{name}`"),
            available_models: Some(store.names()),
            valid_layers: None,
        },
    })
}

/// The request image and an optional mask, both at the model's input size.
struct Decoded {
    image: Image,
    mask: Option<vseg_core::data::LabelMask>,
    original: (usize, usize),
}

fn decode_body(spec: &ModelSpec, body: &[u8], allow_mask: bool) -> ApiResult<Decoded> {
    let maps = pgm::decode_all(body).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let limit = if allow_mask { 2 } else { 1 };
    if maps.len() > limit {
        return Err(ApiError::bad_request(format!(
            "expected at most {limit} graymap(s) in the body, found {}",
            maps.len()
        )));
    }
    let first = &maps[0];
    let image = resize_image(&first.to_image(), spec.input_size).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let mask = match maps.get(1) {
        None => None,
        Some(g) => {
            let m = g
                .to_mask()
                .map_err(|e| ApiError::bad_request(format!("ground-truth mask: {e}")))?;
            if m.labels().iter().any(|&l| usize::from(l) >= spec.num_classes) {
                return Err(ApiError::bad_request(format!(
                    "ground-truth mask has labels outside 0..{}",
                    spec.num_classes
                )));
            }
            Some(resize_mask(&m, spec.input_size).map_err(|e| ApiError::bad_request(e.to_string()))?)
        }
    };
    Ok(Decoded {
        image,
        mask,
        original: (first.width, first.height),
    })
}

/// Segment one P5 image; a second P5 in the body is taken as its label mask.
pub fn predict_request(model: &Model, body: &[u8]) -> ApiResult<PredictResponse> {
    let d = decode_body(&model.spec, body, true)?;
    let x: Tensor<f32> = d.image.to_tensor();
    let logits = predict_logits(&model.spec, &model.params, &x).map_err(|e| ApiError::internal(e.to_string()))?;
    let labels = loss::argmax_labels(&logits, 0).map_err(|e| ApiError::internal(e.to_string()))?;
    let per_class_dsc = match &d.mask {
        None => None,
        Some(m) => {
            let probs = loss::probabilities(&logits);
            let target = loss::one_hot::<f32>(m, model.spec.num_classes).map_err(|e| ApiError::internal(e.to_string()))?;
            let r = loss::dice_report(&probs, &target).map_err(|e| ApiError::internal(e.to_string()))?;
            Some(r.per_class)
        }
    };
    Ok(PredictResponse {
        width: labels.width(),
        height: labels.height(),
        original_width: d.original.0,
        original_height: d.original.1,
        labels: B64.encode(labels.labels()),
        per_class_dsc,
    })
}

/// Base64 P5 graymaps, one per channel of `layer`.
pub fn feature_maps_request(model: &Model, layer: &str, body: &[u8]) -> ApiResult<Vec<String>> {
    let spec = &model.spec;
    if spec.layer_channels(layer).is_none() {
        return Err(ApiError {
            status: StatusCode::BAD_REQUEST,
            body: ErrorBody {
                error: format!("unknown layer `{layer}`"),
                available_models: None,
                valid_layers: Some(spec.layer_names()),
            },
        });
    }
    let d = decode_body(spec, body, false)?;
    let maps = feature_maps(spec, &model.params, &d.image.to_tensor::<f32>(), layer)
        .map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(maps
        .iter()
        .map(|t| {
            let s = t.shape();
            let g = Graymap {
                width: s.w,
                height: s.h,
                bytes: t.data().iter().map(|&v| pgm::quantize(v)).collect(),
            };
            B64.encode(g.encode())
        })
        .collect())
}

#[derive(Debug, Default, Deserialize)]
struct ModelQuery {
    model: Option<String>,
    layer: Option<String>,
}

async fn healthz() -> &'static str {
    "ok"
}

async fn list_models(State(store): State<Arc<ModelStore>>) -> Json<Vec<ModelInfo>> {
    Json(store.models().iter().map(model_info).collect())
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("inference task failed: {e}")))?
}

async fn predict(
    State(store): State<Arc<ModelStore>>,
    Query(q): Query<ModelQuery>,
    body: Bytes,
) -> ApiResult<Json<PredictResponse>> {
    lookup(&store, q.model.as_deref())?;
    let name = q.model.unwrap_or_default();
    let resp = blocking(move || predict_request(store.get(&name).expect("looked up"), &body)).await?;
    Ok(Json(resp))
}

async fn feature_maps_handler(
    State(store): State<Arc<ModelStore>>,
    Query(q): Query<ModelQuery>,
    body: Bytes,
) -> ApiResult<Json<Vec<String>>> {
    lookup(&store, q.model.as_deref())?;
    let layer = q
        .layer
        .ok_or_else(|| ApiError::bad_request("missing query parameter `layer`"))?;
    let name = q.model.unwrap_or_default();
    let maps = blocking(move || feature_maps_request(store.get(&name).expect("looked up"), &layer, &body)).await?;
    Ok(Json(maps))
}

async fn not_found() -> Response {
    (
        StatusCode::NOT_FOUND,
        [(header::CONTENT_TYPE, "application/json")],
        r#"{"error":"no such endpoint"}"#,
    )
        .into_response()
}

pub fn router(store: Arc<ModelStore>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/models", get(list_models))
        .route("/predict", post(predict))
        .route("/feature-maps", post(feature_maps_handler))
        .fallback(not_found)
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .layer(CorsLayer::permissive())
        .with_state(store)
}

/// Load `models` and serve until the process is stopped.
pub async fn serve(bind: SocketAddr, models: &Path) -> Result<()> {
    let store = Arc::new(ModelStore::load_dir(models)?);
    let listener = tokio::net::TcpListener::bind(bind)
        .await
        .map_err(|e| Error::Usage(format!("cannot bind {bind}: {e}")))?;
    eprintln!(
        "serving {} model(s) from {} on http://{}",
        store.models().len(),
        models.display(),
        listener.local_addr().map_err(|e| Error::io(models, e))?
    );
    axum::serve(listener, router(store))
        .await
        .map_err(|e| Error::io(models, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use vseg_core::model::{build, Variant};

    fn tiny(name: &str) -> Model {
        let spec = ModelSpec {
            variant: Variant::AttentionUnet,
            depth: 2,
            base_width: 2,
            input_size: 16,
            ..ModelSpec::default()
        };
        let params = build(&spec, &mut rand_chacha::ChaCha8Rng::seed_from_u64(3)).unwrap();
        Model {
            name: name.into(),
            spec,
            params,
        }
    }

    fn p5(w: usize, h: usize, f: impl Fn(usize) -> u8) -> Vec<u8> {
        Graymap {
            width: w,
            height: h,
            bytes: (0..w * h).map(f).collect(),
        }
        .encode()
    }

    #[test]
    fn store_sorts_and_rejects_duplicates() {
        let s = ModelStore::new(vec![tiny("b"), tiny("a")]).unwrap();
        assert_eq!(s.names(), vec!["a", "b"]);
        assert!(ModelStore::new(vec![tiny("a"), tiny("a")]).is_err());
    }

    #[test]
    fn predict_resizes_and_echoes_extents() {
        let m = tiny("m");
        let r = predict_request(&m, &p5(40, 24, |i| (i % 251) as u8)).unwrap();
        assert_eq!((r.width, r.height, r.original_width, r.original_height), (16, 16, 40, 24));
        let labels = B64.decode(&r.labels).unwrap();
        assert_eq!(labels.len(), 256);
        assert!(labels.iter().all(|&l| l < 4));
        assert!(r.per_class_dsc.is_none());
    }

    #[test]
    fn mask_after_image_yields_dice() {
        let m = tiny("m");
        let mut body = p5(16, 16, |i| i as u8);
        body.extend(p5(32, 32, |i| (i % 4) as u8));
        let r = predict_request(&m, &body).unwrap();
        let d = r.per_class_dsc.unwrap();
        assert_eq!(d.len(), 3);
        assert!(d.iter().all(|v| (0.0..=1.0).contains(v)));

        let mut bad = p5(16, 16, |_| 0);
        bad.extend(p5(16, 16, |_| 9));
        assert_eq!(predict_request(&m, &bad).unwrap_err().status, StatusCode::BAD_REQUEST);
    }

    #[test]
    fn feature_map_count_matches_layer_width() {
        let m = tiny("m");
        let img = p5(16, 16, |i| (i * 7 % 256) as u8);
        for layer in ["enc0.conv1", "gate0.psi", "head.conv"] {
            let maps = feature_maps_request(&m, layer, &img).unwrap();
            assert_eq!(maps.len(), m.spec.layer_channels(layer).unwrap(), "{layer}");
            let g = pgm::decode(&B64.decode(&maps[0]).unwrap()).unwrap().0;
            assert!(g.width > 0 && g.width == g.height);
        }
        let e = feature_maps_request(&m, "nope", &img).unwrap_err();
        assert_eq!(e.status, StatusCode::BAD_REQUEST);
        assert_eq!(e.body.valid_layers.unwrap(), m.spec.layer_names());
    }

    #[test]
    fn malformed_body_reports_parser_offset() {
        let e = predict_request(&tiny("m"), b"P5\n4 4\n255\n\x00").unwrap_err();
        assert_eq!(e.status, StatusCode::BAD_REQUEST);
        assert!(e.body.error.contains("byte 12"), "{}", e.body.error);
    }
}
