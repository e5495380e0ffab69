use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use bope_core::config::{Budgets, LoopConfig};
use bope_core::session::{events_from_jsonl, Session};
use bope_service::status::{check, Status, Verb};
use bope_service::store::Store;
use bope_service::{router, AppState};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use std::sync::Arc;
use std::time::Instant;
use tower::ServiceExt;

fn quick_budgets() -> Value {
    let mut b = Budgets::desk();
    b.report_best_guess = false;
    b.record_timing = false;
    b.y0_samples = 10_000;
    serde_json::to_value(b).unwrap()
}

fn app(dir: &std::path::Path) -> Router {
    let state = AppState::recover(Store::open(dir).unwrap(), Budgets::desk()).unwrap();
    router(Arc::new(state))
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value, String) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or(Body::empty(), |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let text = String::from_utf8(bytes.to_vec()).unwrap();
    let value = serde_json::from_str(&text).unwrap_or(Value::Null);
    (status, value, text)
}

fn benchmark_config(strategy: &str) -> Value {
    json!({
        "benchmark": "vehicle-safety/kumaraswamy",
        "pe_strategy": strategy,
        "experiment_strategy": "qneiuu",
        "seed": 11,
        "budgets": quick_budgets(),
    })
}

fn live_config() -> Value {
    json!({
        "benchmark": null,
        "space": {
            "bounds": {"lower": [0.0, 0.0], "upper": [1.0, 1.0]},
            "k": 2,
            "input_names": ["width", "height"],
            "outcome_names": ["cost", "quality"],
        },
        "pe_strategy": "random-y0",
        "experiment_strategy": "sobol-only",
        "initial_batch": 6,
        "batch_size": 3,
        "n_batches": 2,
        "seed": 5,
        "budgets": quick_budgets(),
    })
}

fn toy_outcome(x: &Value) -> Value {
    let a = x[0].as_f64().unwrap();
    let b = x[1].as_f64().unwrap();
    json!([a + 0.5 * b, (3.0 * a).sin() - b])
}

async fn create(app: &Router, config: Value) -> (StatusCode, Value) {
    let (s, v, _) = call(app, Method::POST, "/sessions", Some(json!({"schema_version": 1, "config": config}))).await;
    (s, v)
}

async fn answer(app: &Router, id: &str, n: usize) {
    for _ in 0..n {
        let (s, q, _) = call(app, Method::POST, &format!("/sessions/{id}/queries"), Some(json!({"schema_version": 1}))).await;
        assert_eq!(s, StatusCode::OK, "{q}");
        let qid = q["query"]["query_id"].as_u64().unwrap();
        let body = json!({"schema_version": 1, "query_id": qid, "choice": 1});
        let (s, r, _) = call(app, Method::POST, &format!("/sessions/{id}/responses"), Some(body)).await;
        assert_eq!(s, StatusCode::OK, "{r}");
    }
}

#[tokio::test]
async fn benchmark_session_flow() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (s, v) = create(&app, benchmark_config("eubo-ftilde")).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    assert_eq!(v["status"], "ready-for-batch");
    assert_eq!(v["summary"]["evaluations"], 16);
    assert_eq!(v["schema_version"], 1);
    let id = v["id"].as_str().unwrap().to_string();

    // the first query is a random pair of initial-batch outcomes
    let (s, q, _) = call(&app, Method::POST, &format!("/sessions/{id}/queries"), Some(json!({"schema_version": 1}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(q["status"], "awaiting-response");
    assert_eq!(q["query"]["random"], true);
    assert_eq!(q["query"]["outcome_names"], json!(["y1", "y2", "y3"]));
    let (_, view, _) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    let ranked: Vec<Value> = view["summary"]["ranking"].as_array().unwrap().iter().map(|r| r["y"].clone()).collect();
    assert!(ranked.contains(&q["query"]["y1"]) && ranked.contains(&q["query"]["y2"]));

    // state machine conflicts and validation
    let (s, _, _) = call(&app, Method::POST, &format!("/sessions/{id}/queries"), Some(json!({"schema_version": 1}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _, _) = call(&app, Method::POST, &format!("/sessions/{id}/batches"), Some(json!({"schema_version": 1}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let qid = q["query"]["query_id"].as_u64().unwrap();
    let wrong = json!({"schema_version": 1, "query_id": qid + 7, "choice": 1});
    let (s, _, _) = call(&app, Method::POST, &format!("/sessions/{id}/responses"), Some(wrong)).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let bad = json!({"schema_version": 1, "query_id": qid, "choice": 3});
    let (s, e, _) = call(&app, Method::POST, &format!("/sessions/{id}/responses"), Some(bad)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(e["error"]["kind"], "validation");
    let ok = json!({"schema_version": 1, "query_id": qid, "choice": 1});
    let (s, r, _) = call(&app, Method::POST, &format!("/sessions/{id}/responses"), Some(ok)).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(r["status"], "ready-for-batch");
    assert_eq!(r["summary"]["comparisons"], 1);
    let again = json!({"schema_version": 1, "query_id": qid, "choice": 1});
    let (s, _, _) = call(&app, Method::POST, &format!("/sessions/{id}/responses"), Some(again)).await;
    assert_eq!(s, StatusCode::CONFLICT);

    answer(&app, &id, 9).await;

    // benchmark batches are evaluated automatically
    let (s, _, _) = call(&app, Method::POST, &format!("/sessions/{id}/batches"), Some(json!({"schema_version": 1, "q": 0}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, b, _) = call(&app, Method::POST, &format!("/sessions/{id}/batches"), Some(json!({"schema_version": 1, "q": 8}))).await;
    assert_eq!(s, StatusCode::OK, "{b}");
    assert_eq!(b["batch"]["designs"].as_array().unwrap().len(), 8);
    assert_eq!(b["outcomes"].as_array().unwrap().len(), 8);
    assert_eq!(b["summary"]["evaluations"], 24);
    assert_eq!(b["status"], "ready-for-batch");
    let body = json!({"schema_version": 1, "outcomes": [[0.0, 0.0, 0.0]]});
    let (s, _, _) = call(&app, Method::PUT, &format!("/sessions/{id}/batches"), Some(body)).await;
    assert_eq!(s, StatusCode::CONFLICT);

    // exports
    let (s, _, jsonl) = call(&app, Method::GET, &format!("/sessions/{id}/export?format=jsonl"), None).await;
    assert_eq!(s, StatusCode::OK);
    let (_, view, _) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(jsonl.lines().count() as u64, view["event_count"].as_u64().unwrap());
    let on_disk = std::fs::read_to_string(dir.path().join(&id).join("events.jsonl")).unwrap();
    assert_eq!(on_disk, jsonl);
    let (s, _, csv) = call(&app, Method::GET, &format!("/sessions/{id}/export?format=csv"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(csv.starts_with("problem,utility,strategy,schedule,replication,checkpoint_type"));
    assert_eq!(csv.lines().filter(|l| l.contains(",comparison,")).count(), 2);
    let (s, _, _) = call(&app, Method::GET, &format!("/sessions/{id}/export?format=xml"), None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    // export, reimport, replay
    let events: Value = serde_json::to_value(events_from_jsonl(&jsonl).unwrap()).unwrap();
    let body = json!({"schema_version": 1, "config": view["config"], "events": events});
    let (s, imported, _) = call(&app, Method::POST, "/sessions", Some(body)).await;
    assert_eq!(s, StatusCode::CREATED, "{imported}");
    assert_eq!(imported["summary"], view["summary"]);
    let new_id = imported["id"].as_str().unwrap();
    let (_, _, jsonl2) = call(&app, Method::GET, &format!("/sessions/{new_id}/export?format=jsonl"), None).await;
    assert_eq!(jsonl, jsonl2);
}

#[tokio::test]
async fn eubo_zeta_query_matches_in_process_selection() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (_, v) = create(&app, benchmark_config("eubo-zeta")).await;
    let id = v["id"].as_str().unwrap().to_string();
    answer(&app, &id, 6).await;
    let (_, _, before) = call(&app, Method::GET, &format!("/sessions/{id}/export?format=jsonl"), None).await;
    let (s, q, _) = call(&app, Method::POST, &format!("/sessions/{id}/queries"), Some(json!({"schema_version": 1}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(q["query"]["random"], false);
    let config: LoopConfig = serde_json::from_value(v["config"].clone()).unwrap();
    let mut local = Session::replay(config, 0, events_from_jsonl(&before).unwrap()).unwrap();
    let p = local.next_query().unwrap();
    assert_eq!(serde_json::to_value(&p.query.y1).unwrap(), q["query"]["y1"]);
    assert_eq!(serde_json::to_value(&p.query.y2).unwrap(), q["query"]["y2"]);
}

#[tokio::test]
async fn live_sessions_upload_outcomes() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (s, v) = create(&app, live_config()).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    assert_eq!(v["status"], "running-acquisition");
    let id = v["id"].as_str().unwrap().to_string();
    let batch = v["pending_batch"].clone();
    assert_eq!(batch["initial"], true);
    assert_eq!(batch["input_names"], json!(["width", "height"]));
    let (s, _, csv) = call(&app, Method::GET, &format!("/sessions/{id}/export?format=csv"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(csv.lines().count(), 1);

    let (s, _, _) = call(&app, Method::POST, &format!("/sessions/{id}/queries"), Some(json!({"schema_version": 1}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let short = json!({"schema_version": 1, "outcomes": [[1.0, 2.0]]});
    let (s, _, _) = call(&app, Method::PUT, &format!("/sessions/{id}/batches"), Some(short)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let outcomes: Vec<Value> = batch["designs"].as_array().unwrap().iter().map(toy_outcome).collect();
    let wide: Vec<Value> = outcomes.iter().map(|_| json!([1.0, 2.0, 3.0])).collect();
    let (s, _, _) = call(&app, Method::PUT, &format!("/sessions/{id}/batches"), Some(json!({"schema_version": 1, "outcomes": wide}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let body = json!({"schema_version": 1, "batch_id": batch["batch_id"], "outcomes": outcomes});
    let (s, r, _) = call(&app, Method::PUT, &format!("/sessions/{id}/batches"), Some(body)).await;
    assert_eq!(s, StatusCode::OK, "{r}");
    assert_eq!(r["status"], "ready-for-batch");
    assert_eq!(r["summary"]["evaluations"], 6);

    answer(&app, &id, 2).await;
    let (_, q, _) = call(&app, Method::POST, &format!("/sessions/{id}/queries"), Some(json!({"schema_version": 1}))).await;
    assert_eq!(q["query"]["outcome_names"], json!(["cost", "quality"]));
    let ranges = q["query"]["outcome_ranges"].as_array().unwrap();
    assert!(ranges.iter().all(|r| r[0].as_f64().unwrap() <= r[1].as_f64().unwrap()));
    let qid = q["query"]["query_id"].clone();
    call(&app, Method::POST, &format!("/sessions/{id}/responses"), Some(json!({"schema_version": 1, "query_id": qid, "choice": 2}))).await;

    let (s, b, _) = call(&app, Method::POST, &format!("/sessions/{id}/batches"), Some(json!({"schema_version": 1, "q": 16}))).await;
    assert_eq!(s, StatusCode::OK, "{b}");
    assert_eq!(b["status"], "running-acquisition");
    assert!(b.get("outcomes").is_none());
    let outcomes: Vec<Value> = b["batch"]["designs"].as_array().unwrap().iter().map(toy_outcome).collect();
    let (s, r, _) = call(&app, Method::PUT, &format!("/sessions/{id}/batches"), Some(json!({"schema_version": 1, "outcomes": outcomes}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(r["summary"]["evaluations"], 22);
    assert_eq!(r["summary"]["comparisons"], 3);
}

#[tokio::test]
async fn live_session_with_existing_data_is_ready() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let designs: Vec<Value> = (0..32).map(|i| json!([(i as f64 + 0.5) / 32.0, ((i * 7) % 32) as f64 / 32.0])).collect();
    let outcomes: Vec<Value> = designs.iter().map(toy_outcome).collect();
    let body = json!({"schema_version": 1, "config": live_config(), "initial_data": {"designs": designs, "outcomes": outcomes}});
    let (s, v, _) = call(&app, Method::POST, "/sessions", Some(body)).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    assert_eq!(v["status"], "ready-for-batch");
    assert_eq!(v["summary"]["evaluations"], 32);
}

#[tokio::test]
async fn invalid_requests_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let mut zero_d = live_config();
    zero_d["space"]["bounds"] = json!({"lower": [], "upper": []});
    zero_d["space"]["input_names"] = json!([]);
    let (s, e) = create(&app, zero_d).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(e["error"]["kind"], "validation");
    let (s, e) = create(&app, json!({"benchmark": "vehicle-safety/kumaraswamy", "pe_strategy": "nope"})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(e["error"]["message"].as_str().unwrap().contains("eubo-ftilde"));
    let (s, _, _) = call(&app, Method::POST, "/sessions", Some(json!({"schema_version": 2, "config": live_config()}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _, _) = call(&app, Method::POST, "/sessions", Some(json!({"config": live_config()}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _, _) = call(&app, Method::POST, "/sessions/missing/queries", Some(json!({"schema_version": 1}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn restart_rebuilds_identical_state() {
    let dir = tempfile::tempdir().unwrap();
    let id;
    let before;
    {
        let app = app(dir.path());
        let (_, v) = create(&app, benchmark_config("eubo-y0")).await;
        id = v["id"].as_str().unwrap().to_string();
        answer(&app, &id, 7).await;
        call(&app, Method::POST, &format!("/sessions/{id}/batches"), Some(json!({"schema_version": 1, "q": 2}))).await;
        call(&app, Method::POST, &format!("/sessions/{id}/queries"), Some(json!({"schema_version": 1}))).await;
        before = call(&app, Method::GET, &format!("/sessions/{id}"), None).await.1;
    }
    // a torn write after the last durable event is discarded on restart
    let log = dir.path().join(&id).join("events.jsonl");
    let mut text = std::fs::read_to_string(&log).unwrap();
    text.push_str("{\"seq\":99,\"timesta");
    std::fs::write(&log, text).unwrap();

    let app = app(dir.path());
    let (s, after, _) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(before, after);
    assert_eq!(after["status"], "awaiting-response");
    let qid = after["pending_query"]["query_id"].clone();
    let (s, _, _) = call(&app, Method::POST, &format!("/sessions/{id}/responses"), Some(json!({"schema_version": 1, "query_id": qid, "choice": 2}))).await;
    assert_eq!(s, StatusCode::OK);
}

#[tokio::test]
async fn next_query_latency_at_desk_scale() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let mut cfg = benchmark_config("eubo-ftilde");
    cfg["budgets"] = serde_json::to_value(Budgets::desk()).unwrap();
    let (_, v) = create(&app, cfg).await;
    let id = v["id"].as_str().unwrap().to_string();
    answer(&app, &id, 10).await;
    let mut worst = 0.0f64;
    for choice in [1, 2, 1] {
        let t = Instant::now();
        let (s, q, _) = call(&app, Method::POST, &format!("/sessions/{id}/queries"), Some(json!({"schema_version": 1}))).await;
        worst = worst.max(t.elapsed().as_secs_f64());
        assert_eq!(s, StatusCode::OK);
        let body = json!({"schema_version": 1, "query_id": q["query"]["query_id"], "choice": choice});
        call(&app, Method::POST, &format!("/sessions/{id}/responses"), Some(body)).await;
    }
    assert!(worst < 3.0, "next-query latency {worst:.2}s");
}

#[tokio::test]
async fn concurrent_sessions_are_isolated() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let mut ids = Vec::new();
    for _ in 0..3 {
        ids.push(create(&app, benchmark_config("random-ftilde")).await.1["id"].as_str().unwrap().to_string());
    }
    let tasks: Vec<_> = ids
        .iter()
        .map(|id| {
            let app = app.clone();
            let id = id.clone();
            tokio::spawn(async move { answer(&app, &id, 4).await })
        })
        .collect();
    for t in tasks {
        t.await.unwrap();
    }
    for id in &ids {
        let (_, v, _) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
        assert_eq!(v["summary"]["comparisons"], 4);
    }
}

/// Every sequence of up to four verbs on a live session: the HTTP outcome
/// (success or conflict) agrees with the status automaton, and statuses
/// reported by the service are consistent with the session state.
#[tokio::test]
async fn service_follows_status_automaton() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let designs: Vec<Value> = (0..6).map(|i| json!([(i as f64 + 0.5) / 6.0, ((i * 5) % 6) as f64 / 6.0])).collect();
    let outcomes: Vec<Value> = designs.iter().map(toy_outcome).collect();
    let verbs = [Verb::NextQuery, Verb::Respond, Verb::ProposeBatch, Verb::CompleteBatch];
    let mut traces: Vec<Vec<Verb>> = vec![vec![]];
    for _ in 0..4 {
        traces = traces
            .into_iter()
            .flat_map(|t| verbs.iter().map(move |v| [t.clone(), vec![*v]].concat()))
            .collect();
    }
    for trace in traces {
        let body = json!({"schema_version": 1, "config": live_config(), "initial_data": {"designs": designs, "outcomes": outcomes}});
        let (_, v, _) = call(&app, Method::POST, "/sessions", Some(body)).await;
        let id = v["id"].as_str().unwrap().to_string();
        let mut status: Status = serde_json::from_value(v["status"].clone()).unwrap();
        for verb in &trace {
            let expected_ok = check(Some(status), *verb).is_ok();
            let (code, r, _) = match verb {
                Verb::NextQuery => call(&app, Method::POST, &format!("/sessions/{id}/queries"), Some(json!({"schema_version": 1}))).await,
                Verb::Respond => call(&app, Method::POST, &format!("/sessions/{id}/responses"), Some(json!({"schema_version": 1, "choice": 1}))).await,
                Verb::ProposeBatch => call(&app, Method::POST, &format!("/sessions/{id}/batches"), Some(json!({"schema_version": 1}))).await,
                Verb::CompleteBatch => {
                    let (_, view, _) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
                    let n = view["pending_batch"]["designs"].as_array().map_or(1, |d| d.len());
                    let rows: Vec<Value> = (0..n).map(|i| json!([i as f64, 1.0 - i as f64])).collect();
                    call(&app, Method::PUT, &format!("/sessions/{id}/batches"), Some(json!({"schema_version": 1, "outcomes": rows}))).await
                }
                Verb::Create => unreachable!(),
            };
            assert_eq!(code.is_success(), expected_ok, "{trace:?} at {verb:?} from {status:?}: {r}");
            if !expected_ok {
                assert_eq!(code, StatusCode::CONFLICT);
            }
            let (_, view, _) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
            status = serde_json::from_value(view["status"].clone()).unwrap();
            assert_eq!(view["pending_query"].is_null(), status != Status::AwaitingResponse);
            assert_eq!(view["pending_batch"].is_null(), status != Status::RunningAcquisition);
        }
    }
}
