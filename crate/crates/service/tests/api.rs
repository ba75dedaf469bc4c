use std::path::Path;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use labelsynth::backbone::{BackboneSpec, ToyBackboneConfig};
use labelsynth::interpreter::TrainConfig;
use labelsynth::raster::LabelMask;
use labelsynth_service::project::round_path;
use labelsynth_service::{router, AppState, Project, ProjectConfig, ProjectError};

fn tiny_config(steps: usize) -> ProjectConfig {
    ProjectConfig {
        backbone: BackboneSpec::Toy(ToyBackboneConfig::with_shape(16, 2, 8)),
        train: TrainConfig {
            members: 3,
            hidden: [16, 16],
            steps,
            batch_pixels: 256,
            learning_rate: 3e-3,
            ..TrainConfig::default()
        },
        pool_size: 120,
        holdout: 2,
        ..ProjectConfig::default()
    }
}

fn app(project: Project) -> Router {
    router(AppState::new(project))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(v) => req
            .header("content-type", "application/json")
            .body(Body::from(v.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn call_json(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = call(app, method, uri, body).await;
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn error_code(v: &Value) -> &str {
    v["error"]["code"].as_str().unwrap_or("")
}

async fn candidates(app: &Router, round: u32) -> Vec<u64> {
    let (status, v) = call_json(app, "GET", &format!("/api/v1/rounds/{round}"), None).await;
    assert_eq!(status, StatusCode::OK);
    v["candidates"].as_array().unwrap().iter().map(|c| c["id"].as_u64().unwrap()).collect()
}

fn square(id: u64, label: &str, lo: f64, hi: f64) -> Value {
    json!({
        "sample_id": id,
        "annotator": "tester",
        "polygons": [{ "label": label, "vertices": [[lo, lo], [hi, lo], [hi, hi], [lo, hi]] }]
    })
}

async fn wait_for_job(app: &Router) -> Value {
    let start = Instant::now();
    loop {
        let (_, v) = call_json(app, "GET", "/api/v1/retrain", None).await;
        if v["job"]["state"] != "running" {
            return v["job"].clone();
        }
        assert!(start.elapsed() < Duration::from_secs(300), "retrain did not finish");
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
}

#[tokio::test]
async fn square_annotation_rasterizes_to_sixteen_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(Project::init(dir.path(), tiny_config(30)).unwrap());
    let id = candidates(&app, 1).await[0];
    let base = format!("/api/v1/rounds/1/candidates/{id}");
    assert_eq!(call(&app, "POST", &format!("{base}/accept"), None).await.0, StatusCode::OK);
    let (status, record) = call_json(&app, "POST", &format!("{base}/annotation"), Some(square(id, "body", 2.0, 6.0))).await;
    assert_eq!(status, StatusCode::CREATED, "{record}");
    let (status, png) = call(&app, "GET", &format!("{base}/mask"), None).await;
    assert_eq!(status, StatusCode::OK);
    let mask = LabelMask::from_png(&png).unwrap();
    assert_eq!(mask.data.iter().filter(|&&l| l == 1).count(), 16);
    assert_eq!(mask.data.iter().filter(|&&l| l != 0).count(), 16);
    for y in 2..6 {
        for x in 2..6 {
            assert_eq!(mask.get(x, y), 1);
        }
    }
    assert_eq!(record["mask_hash"].as_str().unwrap(), labelsynth::annotation::mask_hash(&mask));
    let (_, round) = call_json(&app, "GET", "/api/v1/rounds/1", None).await;
    let c = round["candidates"].as_array().unwrap().iter().find(|c| c["id"] == id).unwrap().clone();
    assert_eq!(c["status"], "annotated");
}

#[tokio::test]
async fn seventh_accept_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(Project::init(dir.path(), tiny_config(30)).unwrap());
    let ids = candidates(&app, 1).await;
    assert_eq!(ids.len(), 12);
    for (i, id) in ids[..6].iter().enumerate() {
        let (status, v) = call_json(&app, "POST", &format!("/api/v1/rounds/1/candidates/{id}/accept"), None).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(v["accepted"], i + 1);
    }
    let (status, v) = call_json(&app, "POST", &format!("/api/v1/rounds/1/candidates/{}/accept", ids[6]), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(error_code(&v), "accept_limit");
    // Skipping an accepted candidate frees a slot.
    assert_eq!(call(&app, "POST", &format!("/api/v1/rounds/1/candidates/{}/skip", ids[0]), None).await.0, StatusCode::OK);
    assert_eq!(call(&app, "POST", &format!("/api/v1/rounds/1/candidates/{}/accept", ids[6]), None).await.0, StatusCode::OK);
}

#[tokio::test]
async fn retrain_without_annotations_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(Project::init(dir.path(), tiny_config(30)).unwrap());
    let (status, v) = call_json(&app, "POST", "/api/v1/retrain", None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(error_code(&v), "no_annotations");
    assert!(v["error"]["message"].as_str().unwrap().contains("annotate"));
    let (_, v) = call_json(&app, "GET", "/api/v1/retrain", None).await;
    assert!(v["job"].is_null());
}

#[tokio::test]
async fn round_state_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let before = {
        let app = app(Project::init(dir.path(), tiny_config(30)).unwrap());
        let ids = candidates(&app, 1).await;
        call(&app, "POST", &format!("/api/v1/rounds/1/candidates/{}/accept", ids[0]), None).await;
        call(&app, "POST", &format!("/api/v1/rounds/1/candidates/{}/skip", ids[1]), None).await;
        call(&app, "POST", &format!("/api/v1/rounds/1/candidates/{}/accept", ids[2]), None).await;
        let record = square(ids[2], "part_1", 1.0, 9.0);
        call(&app, "POST", &format!("/api/v1/rounds/1/candidates/{}/annotation", ids[2]), Some(record)).await;
        let bytes = std::fs::read(round_path(dir.path(), 1)).unwrap();
        let (_, listing) = call(&app, "GET", "/api/v1/rounds", None).await;
        let (_, round) = call(&app, "GET", "/api/v1/rounds/1", None).await;
        (bytes, listing, round)
    };
    let app = app(Project::open(dir.path()).unwrap());
    assert_eq!(std::fs::read(round_path(dir.path(), 1)).unwrap(), before.0);
    assert_eq!(call(&app, "GET", "/api/v1/rounds", None).await.1, before.1);
    assert_eq!(call(&app, "GET", "/api/v1/rounds/1", None).await.1, before.2);
    // The reloaded state keeps enforcing forward-only transitions.
    let ids = candidates(&app, 1).await;
    let (status, v) = call_json(&app, "POST", &format!("/api/v1/rounds/1/candidates/{}/accept", ids[1]), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(error_code(&v), "invalid_transition");
}

#[test]
fn served_directory_is_locked() {
    let dir = tempfile::tempdir().unwrap();
    let project = Project::init(dir.path(), tiny_config(30)).unwrap();
    assert!(matches!(Project::open(dir.path()), Err(ProjectError::Lock(_))));
    drop(project);
    Project::open(dir.path()).unwrap();
}

#[tokio::test]
async fn invalid_requests_carry_machine_readable_reasons() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(Project::init(dir.path(), tiny_config(30)).unwrap());
    let ids = candidates(&app, 1).await;
    let base = format!("/api/v1/rounds/1/candidates/{}", ids[0]);
    let cases: Vec<(&str, String, Option<Value>, StatusCode, &str)> = vec![
        ("GET", "/api/v1/rounds/9".into(), None, StatusCode::NOT_FOUND, "unknown_round"),
        ("POST", "/api/v1/rounds/1/candidates/7/accept".into(), None, StatusCode::NOT_FOUND, "unknown_candidate"),
        ("POST", format!("{base}/annotation"), Some(square(ids[0], "body", 2.0, 6.0)), StatusCode::CONFLICT, "invalid_transition"),
        ("POST", format!("{base}/annotation"), Some(json!({"sample_id": "x"})), StatusCode::BAD_REQUEST, "bad_request"),
        ("GET", format!("{base}/overlay"), None, StatusCode::NOT_FOUND, "no_ensemble"),
        ("GET", format!("{base}/mask"), None, StatusCode::NOT_FOUND, "no_annotation"),
        ("PUT", "/api/v1/project/selection".into(), Some(json!({"k_percent": 95.0, "band_percent": 10.0, "n_centers": 12})), StatusCode::UNPROCESSABLE_ENTITY, "selection_failed"),
    ];
    for (method, uri, body, status, code) in cases {
        let (got, v) = call_json(&app, method, &uri, body).await;
        assert_eq!((got, error_code(&v)), (status, code), "{method} {uri}: {v}");
    }
    call(&app, "POST", &format!("{base}/accept"), None).await;
    let two_vertices = json!({"sample_id": ids[0], "polygons": [{"label": "body", "vertices": [[1.0, 1.0], [5.0, 5.0]]}]});
    let unknown_label = json!({"sample_id": ids[0], "polygons": [{"label": "wheel", "vertices": [[1.0, 1.0], [5.0, 1.0], [5.0, 5.0]]}]});
    let out_of_bounds = square(ids[0], "body", 2.0, 17.0);
    for body in [two_vertices, unknown_label, out_of_bounds] {
        let (got, v) = call_json(&app, "POST", &format!("{base}/annotation"), Some(body)).await;
        assert_eq!((got, error_code(&v)), (StatusCode::UNPROCESSABLE_ENTITY, "invalid_annotation"));
    }
    let (got, v) = call_json(&app, "POST", &format!("{base}/annotation"), Some(square(ids[1], "body", 2.0, 6.0))).await;
    assert_eq!((got, error_code(&v)), (StatusCode::UNPROCESSABLE_ENTITY, "sample_mismatch"));
    // Nothing was stored by the rejected submissions.
    assert_eq!(call(&app, "GET", &format!("{base}/mask"), None).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn retrain_runs_one_job_and_opens_the_next_round() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(Project::init(dir.path(), tiny_config(3000)).unwrap());
    let first = candidates(&app, 1).await;
    for &id in &first[..2] {
        call(&app, "POST", &format!("/api/v1/rounds/1/candidates/{id}/accept"), None).await;
        let (status, _) =
            call_json(&app, "POST", &format!("/api/v1/rounds/1/candidates/{id}/annotation"), Some(square(id, "body", 3.0, 12.0))).await;
        assert_eq!(status, StatusCode::CREATED);
    }
    let (status, job) = call_json(&app, "POST", "/api/v1/retrain", None).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{job}");
    assert_eq!(job["samples"], 2);
    let (status, v) = call_json(&app, "POST", "/api/v1/retrain", None).await;
    assert_eq!((status, error_code(&v)), (StatusCode::CONFLICT, "retrain_in_flight"));
    let job = wait_for_job(&app).await;
    assert_eq!(job["state"], "succeeded", "{job}");
    assert_eq!(job["round"], 2);

    let (_, listing) = call_json(&app, "GET", "/api/v1/rounds", None).await;
    let rounds = listing["rounds"].as_array().unwrap();
    assert_eq!(rounds.len(), 2);
    assert_eq!(rounds[1]["current"], true);
    assert_eq!(rounds[1]["lineage"]["parent_round"], 1);
    assert!(rounds[1]["lineage"]["ensemble_hash"].is_string());
    let second = candidates(&app, 2).await;
    assert_eq!(second.len(), 12);
    assert!(second.iter().all(|id| !first.contains(id)));

    let (_, metrics) = call_json(&app, "GET", "/api/v1/metrics", None).await;
    let entries = metrics["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 1);
    assert_eq!(entries[0]["trained_on"], 2);
    assert_eq!(entries[0]["ensemble_hash"], rounds[1]["lineage"]["ensemble_hash"]);

    let base = format!("/api/v1/rounds/2/candidates/{}", second[0]);
    let (status, png) = call(&app, "GET", &format!("{base}/overlay"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(&png[1..4], b"PNG");
    let (status, report) = call_json(&app, "GET", &format!("{base}/report"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(report["raster"].as_array().unwrap().len(), 256);
    assert_eq!(call(&app, "GET", &format!("{base}/uncertainty"), None).await.0, StatusCode::OK);
    assert_eq!(call(&app, "GET", &format!("{base}/image"), None).await.0, StatusCode::OK);

    // Round 1 is closed; round 2 has nothing annotated yet.
    let (status, v) = call_json(&app, "POST", &format!("/api/v1/rounds/1/candidates/{}/accept", first[5]), None).await;
    assert_eq!((status, error_code(&v)), (StatusCode::CONFLICT, "round_closed"));
    let (status, v) = call_json(&app, "POST", "/api/v1/retrain", None).await;
    assert_eq!((status, error_code(&v)), (StatusCode::UNPROCESSABLE_ENTITY, "round_not_grown"));
}

#[tokio::test]
async fn selection_changes_apply_to_the_next_round_only() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(Project::init(dir.path(), tiny_config(20)).unwrap());
    let params = json!({"k_percent": 5.0, "band_percent": 20.0, "n_centers": 8});
    let (status, _) = call_json(&app, "PUT", "/api/v1/project/selection", Some(params)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(candidates(&app, 1).await.len(), 12);
    let id = candidates(&app, 1).await[0];
    call(&app, "POST", &format!("/api/v1/rounds/1/candidates/{id}/accept"), None).await;
    call(&app, "POST", &format!("/api/v1/rounds/1/candidates/{id}/annotation"), Some(square(id, "body", 3.0, 12.0))).await;
    call(&app, "POST", "/api/v1/retrain", None).await;
    assert_eq!(wait_for_job(&app).await["state"], "succeeded");
    let (_, round) = call_json(&app, "GET", "/api/v1/rounds/2", None).await;
    assert_eq!(round["candidates"].as_array().unwrap().len(), 8);
    assert_eq!(round["selection"]["band"].as_array().unwrap().len(), 24);
    assert_eq!(round["selection"]["discarded"].as_array().unwrap().len(), 6);
}

/// Full-size toy: accept 6, annotate 6, retrain, and the next round appears
/// within two minutes.
#[tokio::test]
async fn active_learning_round_trip_on_default_toy() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(Project::init(dir.path(), ProjectConfig::default()).unwrap());
    let ids = candidates(&app, 1).await;
    let start = Instant::now();
    for &id in &ids[..6] {
        call(&app, "POST", &format!("/api/v1/rounds/1/candidates/{id}/accept"), None).await;
        let (status, _) =
            call_json(&app, "POST", &format!("/api/v1/rounds/1/candidates/{id}/annotation"), Some(square(id, "body", 16.0, 48.0))).await;
        assert_eq!(status, StatusCode::CREATED);
    }
    let (status, v) = call_json(&app, "POST", &format!("/api/v1/rounds/1/candidates/{}/accept", ids[6]), None).await;
    assert_eq!((status, error_code(&v)), (StatusCode::CONFLICT, "accept_limit"));
    assert_eq!(call(&app, "POST", "/api/v1/retrain", None).await.0, StatusCode::ACCEPTED);
    assert_eq!(wait_for_job(&app).await["state"], "succeeded");
    let next = candidates(&app, 2).await;
    assert_eq!(next.len(), 12);
    assert!(start.elapsed() < Duration::from_secs(120), "{:?}", start.elapsed());
}

#[test]
fn schema_document_lists_every_route() {
    let doc: Value =
        serde_json::from_str(&std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("api/v1.json")).unwrap())
            .unwrap();
    let mut documented: Vec<(String, String)> = doc["paths"]
        .as_object()
        .unwrap()
        .iter()
        .flat_map(|(path, ops)| {
            ops.as_object()
                .unwrap()
                .keys()
                .map(move |m| (m.to_uppercase(), path.clone()))
        })
        .collect();
    documented.sort();
    let mut routes: Vec<(String, String)> =
        labelsynth_service::api::ROUTES.iter().map(|(m, p)| (m.to_string(), p.to_string())).collect();
    routes.sort();
    assert_eq!(documented, routes);
}
