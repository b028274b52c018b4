mod common;

use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use parking_lot::Mutex;
use serde_json::Value;
use tower::ServiceExt;

use common::chain_trajectory;
use safety_credit::continual::{FeedbackBuffer, LabelSource, SharedBuffer};
use safety_credit::envs::{EnvConfig, LabelOracle};
use safety_credit::experiment::service::{router, ServiceState};
use safety_credit::experiment::{run_seed, LabelingMode, RunConfig, RunHooks, RunStatus};
use safety_credit::safety::{HeadMode, SsvConfig, SsvModel};
use safety_credit::trainer::CostMode;

fn chain_model(env: &EnvConfig) -> SsvModel {
    let dims = env.build().unwrap();
    let mut cfg = SsvConfig::new(dims.obs_dim(), dims.action_dim());
    cfg.hidden = 6;
    cfg.encoder = 4;
    cfg.decoder_hidden = 4;
    cfg.head = HeadMode::Distributional;
    SsvModel::new(cfg).unwrap()
}

/// A buffer with three queued chain episodes, two of them selected.
fn state() -> (ServiceState, Vec<u64>, Vec<u64>) {
    let env = EnvConfig::chain(40);
    let model = chain_model(&env);
    let mut buf = FeedbackBuffer::new(Vec::new());
    buf.begin_window();
    let mut zigzag = vec![1, 1, 0, -1, 1, 1, 1, 0, 0, 1];
    zigzag.resize(40, 0);
    let plans = [vec![1; 40], vec![0; 40], zigzag];
    let mut ids = Vec::new();
    for (i, moves) in plans.iter().enumerate() {
        let t = chain_trajectory(&env.chain, 40, moves, i as u64);
        ids.push(buf.enqueue(t, Some(&model)).unwrap());
    }
    let selected = buf.select_for_labeling(2);
    let geometry = env.build().unwrap().geometry();
    let st = ServiceState {
        buffer: buf.shared(),
        status: Arc::new(Mutex::new(RunStatus::default())),
        geometry,
    };
    (st, ids, selected)
}

async fn call(st: &ServiceState, req: Request<Body>) -> (StatusCode, Value) {
    let resp = router(st.clone()).oneshot(req).await.unwrap();
    let code = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (code, v)
}

fn get(path: &str) -> Request<Body> {
    Request::get(path).body(Body::empty()).unwrap()
}

fn post_label(body: &str) -> Request<Body> {
    Request::post("/label")
        .header("content-type", "application/json")
        .body(Body::from(body.to_owned()))
        .unwrap()
}

fn keys(v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                out.push(k.clone());
                keys(x, out);
            }
        }
        Value::Array(a) => a.iter().for_each(|x| keys(x, out)),
        _ => {}
    }
}

#[tokio::test]
async fn queue_lists_selected_by_cv_without_costs() {
    let (st, _, selected) = state();
    let (code, v) = call(&st, get("/queue")).await;
    assert_eq!(code, StatusCode::OK);
    let items = v["items"].as_array().unwrap();
    assert_eq!(items.len(), selected.len());
    let cvs: Vec<f64> = items.iter().map(|i| i["cv"].as_f64().unwrap()).collect();
    assert!(cvs.windows(2).all(|w| w[0] >= w[1]));
    assert_eq!(items[0]["states"].as_array().unwrap().len(), 40);
    let mut all = Vec::new();
    keys(&v, &mut all);
    assert!(all.iter().all(|k| !k.contains("cost") && !k.contains("budget") && k != "label"));
}

#[tokio::test]
async fn trajectory_detail_and_errors() {
    let (st, _, selected) = state();
    let (code, v) = call(&st, get(&format!("/trajectory/{}", selected[0]))).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(v["steps"].as_array().unwrap().len(), 40);
    assert!(v["steps"][0]["action"].is_array());
    let mut all = Vec::new();
    keys(&v, &mut all);
    assert!(all.iter().all(|k| !k.contains("cost") && !k.contains("reward")));
    assert_eq!(call(&st, get("/trajectory/abc")).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&st, get("/trajectory/999")).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn label_submission_codes() {
    let (st, _, selected) = state();
    let id = selected[0];
    assert_eq!(call(&st, post_label(&format!("{{\"segment_id\": {id}, \"label\": 2}}"))).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&st, post_label("{\"segment_id\": \"x\"}")).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&st, post_label("not json")).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&st, post_label("{\"segment_id\": 999, \"label\": 1}")).await.0, StatusCode::NOT_FOUND);

    let (code, v) = call(&st, post_label(&format!("{{\"segment_id\": {id}, \"label\": 1}}"))).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(v["accepted"], Value::Bool(true));
    assert_eq!(call(&st, post_label(&format!("{{\"segment_id\": {id}, \"label\": 0}}"))).await.0, StatusCode::CONFLICT);

    let (_, s) = call(&st, get("/status")).await;
    assert_eq!(s["labeled"], 0);
    assert_eq!(s["pending_submissions"], 1);
    st.buffer.lock().labeling_tick(LabelSource::Human).unwrap();
    let (_, s) = call(&st, get("/status")).await;
    assert_eq!(s["labeled"], 1);
    assert_eq!(s["pending_submissions"], 0);
    assert_eq!(call(&st, post_label(&format!("{{\"segment_id\": {id}, \"label\": 1}}"))).await.0, StatusCode::CONFLICT);
}

#[tokio::test]
async fn unselected_segment_is_not_labelable() {
    let (st, ids, selected) = state();
    let other = *ids.iter().find(|i| !selected.contains(i)).unwrap();
    let req = post_label(&format!("{{\"segment_id\": {other}, \"label\": 1}}"));
    assert_eq!(call(&st, req).await.0, StatusCode::NOT_FOUND);
    st.buffer.lock().labeling_tick(LabelSource::Oracle(LabelOracle::new(25.0))).unwrap();
    let (_, s) = call(&st, get("/status")).await;
    assert_eq!(s["labeled"], 2);
}

fn human_config(dir: &std::path::Path) -> RunConfig {
    let mut cfg = RunConfig::new(CostMode::Ssv, vec![4], dir);
    cfg.env = EnvConfig::chain(20);
    cfg.labeling = Some(LabelingMode::Human);
    cfg.total_steps = 60_000;
    cfg.ppo.rollout_steps = 200;
    cfg.ppo.epochs = 1;
    cfg.ppo.hidden = 8;
    cfg.ssv.hidden = 6;
    cfg.ssv.encoder = 4;
    cfg.ssv.decoder_hidden = 4;
    cfg.ssv.head = HeadMode::Distributional;
    cfg.pretrain.offline.episodes = 20;
    cfg.pretrain.offline.segments = 60;
    cfg.pretrain.train.epochs = 2;
    cfg.continual.window_episodes = 10;
    cfg.continual.select_fraction = 0.5;
    cfg.continual.retrain.train.epochs = 1;
    cfg.eval.episodes = 5;
    cfg.eval.every = 0;
    cfg.checkpoint_every = 0;
    cfg
}

async fn wait_for(st: &ServiceState, deadline: Instant, mut done: impl FnMut(&Value) -> bool, path: &str) -> Value {
    loop {
        let (_, v) = call(st, get(path)).await;
        if done(&v) {
            return v;
        }
        assert!(Instant::now() < deadline, "timed out waiting on {path}: {v}");
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn human_round_trip_during_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = human_config(dir.path());
    let buffer: SharedBuffer = FeedbackBuffer::new(Vec::new()).shared();
    let status = Arc::new(Mutex::new(RunStatus::default()));
    let st = ServiceState {
        buffer: buffer.clone(),
        status: status.clone(),
        geometry: cfg.env.build().unwrap().geometry(),
    };
    let hooks = RunHooks {
        pretrained: None,
        buffer: Some(buffer),
        status: Some(status),
    };
    let run = std::thread::spawn(move || run_seed(&cfg, 4, hooks));
    let deadline = Instant::now() + Duration::from_secs(120);

    let q = wait_for(&st, deadline, |v| v["items"].as_array().is_some_and(|a| !a.is_empty()), "/queue").await;
    let id = q["items"][0]["segment_id"].as_u64().unwrap();
    let (_, before) = call(&st, get("/status")).await;
    let labeled = before["labeled"].as_u64().unwrap();
    let iteration = before["iteration"].as_u64().unwrap();

    let (code, _) = call(&st, post_label(&format!("{{\"segment_id\": {id}, \"label\": 1}}"))).await;
    assert_eq!(code, StatusCode::OK);
    let (code, _) = call(&st, post_label(&format!("{{\"segment_id\": {id}, \"label\": 1}}"))).await;
    assert_eq!(code, StatusCode::CONFLICT);

    let after = wait_for(&st, deadline, |v| v["labeled"].as_u64().unwrap() > labeled, "/status").await;
    assert!(after["iteration"].as_u64().unwrap() <= iteration + 2, "{before} -> {after}");
    assert_eq!(after["labeled"].as_u64().unwrap(), labeled + 1);

    let res = run.join().unwrap().unwrap();
    assert!(res.labeled >= 1);
}
