//! JSON inference API over a loaded model. The model is shared read-only;
//! every random request carries its own seed, so identical requests give
//! identical response bodies.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use partlatent::applications::{add_part, cascaded_complete, interpolate_part, replace_part};
use partlatent::diffusion::{decode_row, sample, ShapeLatent, ShapeModel};
use partlatent::geometry::{Point3, PointCloud};
use partlatent::Error;
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;

/// Largest `count` accepted by `/api/sample`.
pub const MAX_SAMPLES: usize = 64;
/// Largest `k` accepted by `/api/complete`.
pub const MAX_COMPLETIONS: usize = 16;
/// Largest observed cloud accepted by `/api/complete`.
pub const MAX_POINTS: usize = 100_000;

#[derive(Debug, Clone, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

impl ApiError {
    fn malformed(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            code: "malformed_request",
            message: message.into(),
            field: None,
        }
    }

    fn invalid(field: &str, message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            code: "invalid_value",
            message: message.into(),
            field: Some(field.to_string()),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            code: "internal",
            message: message.into(),
            field: None,
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            Self {
                status: StatusCode::INTERNAL_SERVER_ERROR,
                code: "numerical_failure",
                message: e.to_string(),
                field: None,
            }
        } else if matches!(e, Error::Io(_)) {
            Self::internal(e.to_string())
        } else {
            Self {
                status: StatusCode::UNPROCESSABLE_ENTITY,
                code: "domain_violation",
                message: e.to_string(),
                field: None,
            }
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::malformed(r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;
type Body<T> = Result<Json<T>, JsonRejection>;

/// A category given by id or by name.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum CategoryRef {
    Id(usize),
    Name(String),
}

fn resolve(model: &ShapeModel, category: &CategoryRef, field: &str) -> Result<usize, ApiError> {
    match category {
        CategoryRef::Id(i) if *i < model.m() => Ok(*i),
        CategoryRef::Name(n) => model
            .category_names
            .iter()
            .position(|c| c == n)
            .or_else(|| n.parse::<usize>().ok().filter(|i| *i < model.m()))
            .ok_or_else(|| ApiError::invalid(field, format!("unknown category '{n}'"))),
        CategoryRef::Id(i) => Err(ApiError::invalid(
            field,
            format!("category {i} outside 0..{}", model.m()),
        )),
    }
}

fn check_latent(model: &ShapeModel, z: &[f64], category: usize, field: &str) -> Result<(), ApiError> {
    let q = model.layout.geometry_dims[category];
    if z.len() != q {
        return Err(ApiError::invalid(
            field,
            format!(
                "{field} must hold {q} values for category '{}', got {}",
                model.category_names[category],
                z.len()
            ),
        ));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(ApiError::invalid(field, format!("{field} contains non-finite values")));
    }
    Ok(())
}

fn check_shape(model: &ShapeModel, shape: &ShapeLatent, field: &str) -> Result<(), ApiError> {
    shape
        .validate(&model.layout)
        .map_err(|e| ApiError::invalid(field, format!("{field}: {e}")))
}

fn finite(points: Vec<f64>) -> Result<Vec<f64>, ApiError> {
    if points.iter().all(|v| v.is_finite()) {
        Ok(points)
    } else {
        Err(ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            code: "numerical_failure",
            message: "decoded points are not finite".into(),
            field: None,
        })
    }
}

#[derive(Debug, Serialize)]
pub struct CategoryInfo {
    pub id: usize,
    pub name: String,
    pub q: usize,
    pub eigenvalues: Vec<f64>,
    pub explained_variance: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct ModelInfo {
    pub m: usize,
    pub q: Vec<usize>,
    pub geometry_width: usize,
    pub label_dim: usize,
    pub steps: usize,
    pub points_per_part: usize,
    pub categories: Vec<CategoryInfo>,
}

#[derive(Debug, Serialize)]
pub struct PointsResponse {
    pub category: usize,
    pub name: String,
    /// Flat `x, y, z` triples in template order.
    pub points: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeRequest {
    pub category: CategoryRef,
    pub z: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct PartView {
    pub row: usize,
    pub category: usize,
    pub name: String,
    /// Geometry latent of the part, `q` values for its category.
    pub latent: Vec<f64>,
    pub points: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct ShapeView {
    pub latent: ShapeLatent,
    pub parts: Vec<PartView>,
}

fn view(model: &ShapeModel, latent: ShapeLatent) -> Result<ShapeView, ApiError> {
    let classes = latent.classes(&model.layout, &model.codebook)?;
    let mut parts = Vec::new();
    for (row, &c) in classes.iter().enumerate() {
        if !latent.mask[row] {
            continue;
        }
        if c >= model.m() {
            return Err(ApiError::invalid(
                "shape",
                format!("row {row} is marked real but labelled as padding"),
            ));
        }
        let q = model.layout.geometry_dims[c];
        let z = latent.geometry(&model.layout, row)[..q].to_vec();
        let cloud = decode_row(&model.layout, &model.ssms, c, &z)?;
        parts.push(PartView {
            row,
            category: c,
            name: model.category_names[c].clone(),
            latent: z,
            points: finite(cloud.to_flat())?,
        });
    }
    Ok(ShapeView { latent, parts })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRequest {
    pub seed: u64,
    pub count: usize,
}

#[derive(Debug, Serialize)]
pub struct ShapesResponse {
    pub shapes: Vec<ShapeView>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompleteRequest {
    /// Flat `x, y, z` triples of a partial part observation.
    pub points: Vec<f64>,
    pub seed: u64,
    pub k: usize,
}

#[derive(Debug, Serialize)]
pub struct CompleteResponse {
    pub category: usize,
    pub name: String,
    pub ambiguous: bool,
    /// Mean distance of the observation to each category's mean shape.
    pub distances: Vec<f64>,
    pub latent: Vec<f64>,
    /// Row holding the fitted part in every returned shape.
    pub row: usize,
    pub fit_residual: f64,
    pub warnings: Vec<String>,
    pub shapes: Vec<ShapeView>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct InterpolateRequest {
    pub shape_a: ShapeLatent,
    pub shape_b: ShapeLatent,
    pub row: usize,
    pub alpha: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditRequest {
    pub shape: ShapeLatent,
    pub category: CategoryRef,
    pub z: Vec<f64>,
}

/// Builds the router over a loaded model.
pub fn router(model: Arc<ShapeModel>) -> Router {
    Router::new()
        .route("/api/model", get(model_info))
        .route("/api/ssm/{category}/mean", get(ssm_mean))
        .route("/api/decode", post(decode))
        .route("/api/sample", post(sample_shapes))
        .route("/api/complete", post(complete_shapes))
        .route("/api/interpolate", post(interpolate))
        .route("/api/edit/add", post(edit_add))
        .route("/api/edit/replace", post(edit_replace))
        .fallback(|| async {
            ApiError {
                status: StatusCode::NOT_FOUND,
                code: "not_found",
                message: "no such endpoint".into(),
                field: None,
            }
        })
        .layer(CorsLayer::permissive())
        .with_state(model)
}

/// Serves until ctrl-c.
pub async fn serve(model: Arc<ShapeModel>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(model))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

async fn model_info(State(model): State<Arc<ShapeModel>>) -> Json<ModelInfo> {
    let categories = model
        .ssms
        .iter()
        .enumerate()
        .map(|(id, ssm)| CategoryInfo {
            id,
            name: model.category_names[id].clone(),
            q: ssm.q(),
            eigenvalues: ssm.eigenvalues().to_vec(),
            explained_variance: ssm.explained_variance(),
        })
        .collect();
    Json(ModelInfo {
        m: model.m(),
        q: model.layout.geometry_dims.clone(),
        geometry_width: model.layout.geometry_width(),
        label_dim: model.codebook.dim(),
        steps: model.schedule.steps(),
        points_per_part: model.points_per_part(),
        categories,
    })
}

async fn ssm_mean(State(model): State<Arc<ShapeModel>>, Path(category): Path<String>) -> ApiResult<PointsResponse> {
    let c = resolve(&model, &CategoryRef::Name(category), "category")?;
    Ok(Json(PointsResponse {
        category: c,
        name: model.category_names[c].clone(),
        points: model.ssms[c].mean().to_vec(),
    }))
}

async fn decode(State(model): State<Arc<ShapeModel>>, body: Body<DecodeRequest>) -> ApiResult<PointsResponse> {
    let Json(req) = body?;
    let c = resolve(&model, &req.category, "category")?;
    check_latent(&model, &req.z, c, "z")?;
    let cloud = model.ssms[c].decode(&req.z)?;
    Ok(Json(PointsResponse {
        category: c,
        name: model.category_names[c].clone(),
        points: finite(cloud.to_flat())?,
    }))
}

async fn sample_shapes(State(model): State<Arc<ShapeModel>>, body: Body<SampleRequest>) -> ApiResult<ShapesResponse> {
    let Json(req) = body?;
    if req.count == 0 || req.count > MAX_SAMPLES {
        return Err(ApiError::invalid(
            "count",
            format!("count must be in 1..={MAX_SAMPLES}"),
        ));
    }
    blocking(move || {
        let latents = sample(&model, req.count, req.seed)?;
        let shapes = latents.into_iter().map(|l| view(&model, l)).collect::<Result<_, _>>()?;
        Ok(Json(ShapesResponse { shapes }))
    })
    .await
}

async fn complete_shapes(
    State(model): State<Arc<ShapeModel>>,
    body: Body<CompleteRequest>,
) -> ApiResult<CompleteResponse> {
    let Json(req) = body?;
    if req.k == 0 || req.k > MAX_COMPLETIONS {
        return Err(ApiError::invalid("k", format!("k must be in 1..={MAX_COMPLETIONS}")));
    }
    if req.points.is_empty() || req.points.len() % 3 != 0 || req.points.len() > 3 * MAX_POINTS {
        return Err(ApiError::invalid(
            "points",
            format!("points must hold 1..={MAX_POINTS} flat x, y, z triples"),
        ));
    }
    if req.points.iter().any(|v| !v.is_finite()) {
        return Err(ApiError::invalid("points", "points contain non-finite values"));
    }
    blocking(move || {
        let cloud = PointCloud::new(req.points.chunks(3).map(|c| Point3::new(c[0], c[1], c[2])).collect())?;
        let done = cascaded_complete(&model, &cloud, req.k, req.seed)?;
        let c = done.matched.category as usize;
        let shapes = done
            .latents
            .into_iter()
            .map(|l| view(&model, l))
            .collect::<Result<_, _>>()?;
        Ok(Json(CompleteResponse {
            category: c,
            name: model.category_names[c].clone(),
            ambiguous: done.matched.ambiguous,
            distances: done.matched.distances,
            latent: done.latent,
            row: done.row,
            fit_residual: done.residual,
            warnings: done.warnings,
            shapes,
        }))
    })
    .await
}

async fn interpolate(State(model): State<Arc<ShapeModel>>, body: Body<InterpolateRequest>) -> ApiResult<ShapeView> {
    let Json(req) = body?;
    check_shape(&model, &req.shape_a, "shapeA")?;
    check_shape(&model, &req.shape_b, "shapeB")?;
    if !(0.0..=1.0).contains(&req.alpha) {
        return Err(ApiError::invalid(
            "alpha",
            format!("alpha {} outside [0, 1]", req.alpha),
        ));
    }
    if req.row >= model.m() || !req.shape_a.mask[req.row] {
        return Err(ApiError::invalid(
            "row",
            format!("row {} is not a real part of shapeA", req.row),
        ));
    }
    let out = interpolate_part(
        &model.layout,
        &model.codebook,
        &req.shape_a,
        &req.shape_b,
        req.row,
        req.alpha,
    )?;
    Ok(Json(view(&model, out)?))
}

async fn edit_add(State(model): State<Arc<ShapeModel>>, body: Body<EditRequest>) -> ApiResult<ShapeView> {
    edit(&model, body, add_part)
}

async fn edit_replace(State(model): State<Arc<ShapeModel>>, body: Body<EditRequest>) -> ApiResult<ShapeView> {
    edit(&model, body, replace_part)
}

type EditOp = fn(
    &partlatent::diffusion::LatentLayout,
    &partlatent::semantics::LabelCodebook,
    &ShapeLatent,
    usize,
    &[f64],
) -> partlatent::Result<ShapeLatent>;

fn edit(model: &ShapeModel, body: Body<EditRequest>, op: EditOp) -> ApiResult<ShapeView> {
    let Json(req) = body?;
    check_shape(model, &req.shape, "shape")?;
    let c = resolve(model, &req.category, "category")?;
    check_latent(model, &req.z, c, "z")?;
    let out = op(&model.layout, &model.codebook, &req.shape, c, &req.z)?;
    Ok(Json(view(model, out)?))
}
