use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use partlatent::diffusion::{ModelOptions, ShapeModel};
use partlatent::ssm::fit_ssm;
use partlatent::synthetic::{generate_dataset, FamilyConfig};
use partlatent_service::router;
use serde_json::{json, Value};
use tower::ServiceExt;

fn model() -> Arc<ShapeModel> {
    static MODEL: OnceLock<Arc<ShapeModel>> = OnceLock::new();
    MODEL
        .get_or_init(|| {
            let family = FamilyConfig {
                points_per_part: 48,
                ..FamilyConfig::default()
            };
            let data = generate_dataset(&family, 80, 3).unwrap().dataset;
            let ssms = data
                .categories
                .iter()
                .map(|c| fit_ssm(&data.parts_of(c.id), 16).unwrap().ssm)
                .collect();
            let names = data.categories.iter().map(|c| c.name.clone()).collect();
            let options = ModelOptions {
                model_dim: 16,
                blocks: 1,
                heads: 2,
                time_dim: 8,
                ff_mult: 2,
                diffusion_steps: 8,
                ..ModelOptions::default()
            };
            Arc::new(ShapeModel::new(names, ssms, options, 5).unwrap())
        })
        .clone()
}

async fn call(method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json");
    let req = match body {
        Some(v) => req.body(Body::from(v.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = router(model()).oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call_json(method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, bytes) = call(method, uri, body).await;
    (s, serde_json::from_slice(&bytes).unwrap())
}

#[tokio::test]
async fn model_info_lists_categories() {
    let (s, v) = call_json("GET", "/api/model", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["m"], 4);
    assert_eq!(v["steps"], 8);
    assert_eq!(v["points_per_part"], 48);
    let cats = v["categories"].as_array().unwrap();
    assert_eq!(cats.len(), 4);
    assert_eq!(cats[0]["name"], "seat");
    let q = cats[2]["q"].as_u64().unwrap() as usize;
    assert_eq!(cats[2]["eigenvalues"].as_array().unwrap().len(), q);
    assert_eq!(v["q"][2], q);
}

#[tokio::test]
async fn decode_at_origin_is_mean_payload() {
    let q = model().layout.geometry_dims[1];
    let (s, mean) = call_json("GET", "/api/ssm/back/mean", None).await;
    assert_eq!(s, StatusCode::OK);
    let (s, by_id) = call_json("GET", "/api/ssm/1/mean", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(mean, by_id);
    let (s, decoded) = call_json("POST", "/api/decode", Some(json!({"category": 1, "z": vec![0.0; q]}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(decoded["points"], mean["points"]);
    assert_eq!(decoded["points"].as_array().unwrap().len(), 48 * 3);
}

#[tokio::test]
async fn decode_validation_errors() {
    let q = model().layout.geometry_dims[0];
    let (s, v) = call_json(
        "POST",
        "/api/decode",
        Some(json!({"category": "seat", "z": vec![0.0; q - 1]})),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["field"], "z");
    assert!(v["message"].as_str().unwrap().contains(&q.to_string()));
    assert!(v["code"].is_string());

    let (s, v) = call_json("POST", "/api/decode", Some(json!({"category": 9, "z": [0.0]}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["field"], "category");

    let (s, v) = call_json("POST", "/api/decode", Some(json!({"z": [0.0]}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["code"], "malformed_request");

    let req = Request::builder()
        .method("POST")
        .uri("/api/decode")
        .header("content-type", "application/json")
        .body(Body::from("{not json"))
        .unwrap();
    assert_eq!(
        router(model()).oneshot(req).await.unwrap().status(),
        StatusCode::BAD_REQUEST
    );

    let (s, _) = call_json("GET", "/api/ssm/wings/mean", None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, v) = call_json("GET", "/api/nothing", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["code"], "not_found");
}

#[tokio::test]
async fn sample_is_deterministic_and_round_trips_through_decode() {
    let body = json!({"seed": 11, "count": 3});
    let (s, first) = call("POST", "/api/sample", Some(body.clone())).await;
    assert_eq!(s, StatusCode::OK);
    let (_, second) = call("POST", "/api/sample", Some(body.clone())).await;
    assert_eq!(first, second);
    let (_, other) = call("POST", "/api/sample", Some(json!({"seed": 12, "count": 3}))).await;
    assert_ne!(first, other);

    let v: Value = serde_json::from_slice(&first).unwrap();
    let shapes = v["shapes"].as_array().unwrap();
    assert_eq!(shapes.len(), 3);
    let mut parts_seen = 0;
    for shape in shapes {
        for part in shape["parts"].as_array().unwrap() {
            let (s, d) = call_json(
                "POST",
                "/api/decode",
                Some(json!({"category": part["category"], "z": part["latent"]})),
            )
            .await;
            assert_eq!(s, StatusCode::OK);
            assert_eq!(d["points"], part["points"]);
            parts_seen += 1;
        }
    }
    assert!(parts_seen > 0);

    let (s, v) = call_json("POST", "/api/sample", Some(json!({"seed": 1, "count": 0}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["field"], "count");
}

#[tokio::test]
async fn concurrent_identical_requests_agree() {
    let body = json!({"seed": 4, "count": 2});
    let handles: Vec<_> = (0..4)
        .map(|_| {
            let b = body.clone();
            tokio::spawn(async move { call("POST", "/api/sample", Some(b)).await.1 })
        })
        .collect();
    let mut outs = Vec::new();
    for h in handles {
        outs.push(h.await.unwrap());
    }
    assert!(outs.windows(2).all(|w| w[0] == w[1]));
}

#[tokio::test]
async fn complete_from_mean_part() {
    let (_, mean) = call_json("GET", "/api/ssm/leg_group/mean", None).await;
    let points = mean["points"].clone();
    let (s, v) = call_json(
        "POST",
        "/api/complete",
        Some(json!({"points": points, "seed": 2, "k": 3})),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["category"], 2);
    assert_eq!(v["name"], "leg_group");
    assert!(v["fit_residual"].as_f64().unwrap() < 1e-9);
    let shapes = v["shapes"].as_array().unwrap();
    assert_eq!(shapes.len(), 3);
    for shape in shapes {
        // The model is untrained, so only the fixed row is checked.
        let fixed = shape["parts"]
            .as_array()
            .unwrap()
            .iter()
            .find(|p| p["row"] == v["row"])
            .unwrap();
        assert_eq!(fixed["category"], 2);
        assert_eq!(fixed["latent"], v["latent"]);
    }
    let (s, _) = call_json(
        "POST",
        "/api/complete",
        Some(json!({"points": [0.0, 1.0], "seed": 2, "k": 3})),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = call_json(
        "POST",
        "/api/complete",
        Some(json!({"points": points, "seed": 2, "k": 0})),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

fn shape_with(parts: &[(usize, f64)]) -> Value {
    let m = model();
    let mut latent = partlatent::diffusion::ShapeLatent::empty(&m.layout, &m.codebook);
    for &(c, v) in parts {
        let z = vec![v; m.layout.geometry_dims[c]];
        latent = partlatent::applications::add_part(&m.layout, &m.codebook, &latent, c, &z).unwrap();
    }
    serde_json::to_value(latent).unwrap()
}

#[tokio::test]
async fn interpolate_endpoints() {
    let a = shape_with(&[(0, 0.5), (2, -1.0)]);
    let b = shape_with(&[(0, -0.5), (1, 1.0)]);
    let (s, v) = call_json(
        "POST",
        "/api/interpolate",
        Some(json!({"shapeA": a, "shapeB": b, "row": 0, "alpha": 0.0})),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["latent"], a);
    let (_, v) = call_json(
        "POST",
        "/api/interpolate",
        Some(json!({"shapeA": a, "shapeB": b, "row": 0, "alpha": 1.0})),
    )
    .await;
    assert_eq!(v["latent"]["rows"][0], b["rows"][0]);
    assert_eq!(v["latent"]["rows"][2], a["rows"][2]);
    assert_eq!(v["parts"].as_array().unwrap().len(), 2);
    let (s, v) = call_json(
        "POST",
        "/api/interpolate",
        Some(json!({"shapeA": a, "shapeB": b, "row": 2, "alpha": 0.5})),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{v}");
    let (s, v) = call_json(
        "POST",
        "/api/interpolate",
        Some(json!({"shapeA": a, "shapeB": b, "row": 0, "alpha": 2.0})),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["field"], "alpha");
}

#[tokio::test]
async fn edit_add_and_replace() {
    let q3 = model().layout.geometry_dims[3];
    let shape = shape_with(&[(0, 0.0), (2, 0.0)]);
    let (s, v) = call_json(
        "POST",
        "/api/edit/add",
        Some(json!({"shape": shape, "category": "armrest_group", "z": vec![0.25; q3]})),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["parts"].as_array().unwrap().len(), 3);
    let added = v["latent"].clone();
    let (s, _) = call_json(
        "POST",
        "/api/edit/add",
        Some(json!({"shape": added, "category": 3, "z": vec![0.0; q3]})),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, v) = call_json(
        "POST",
        "/api/edit/replace",
        Some(json!({"shape": added, "category": 3, "z": vec![-1.0; q3]})),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    let arm = v["parts"]
        .as_array()
        .unwrap()
        .iter()
        .find(|p| p["category"] == 3)
        .unwrap()
        .clone();
    assert_eq!(arm["latent"], json!(vec![-1.0; q3]));
    let (s, _) = call_json(
        "POST",
        "/api/edit/replace",
        Some(json!({"shape": shape, "category": 3, "z": vec![0.0; q3]})),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, v) = call_json(
        "POST",
        "/api/edit/add",
        Some(json!({"shape": {"rows": [], "mask": []}, "category": 3, "z": vec![0.0; q3]})),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["field"], "shape");
}

#[tokio::test]
async fn cors_is_permissive() {
    let req = Request::builder()
        .method("GET")
        .uri("/api/model")
        .header("origin", "http://localhost:5173")
        .body(Body::empty())
        .unwrap();
    let resp = router(model()).oneshot(req).await.unwrap();
    assert_eq!(resp.headers()["access-control-allow-origin"], "*");
}
