//! HTTP endpoints for human labeling. Payloads are built from observations,
//! actions and model outputs only.

use std::net::SocketAddr;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use super::{ExperimentError, SharedStatus};
use crate::continual::{QueueEntry, QueueStatus, SharedBuffer, SubmitError};
use crate::envs::{EnvGeometry, Trajectory};

#[derive(Clone)]
pub struct ServiceState {
    pub buffer: SharedBuffer,
    pub status: SharedStatus,
    pub geometry: EnvGeometry,
}

/// Compact per-step view shown in the queue listing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub t: usize,
    pub obs: Vec<f64>,
    pub log_score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueItem {
    pub segment_id: u64,
    pub len: usize,
    /// 2-D positions for point-mass environments.
    pub path: Vec<[f64; 2]>,
    /// State indices for the chain.
    pub states: Vec<usize>,
    pub steps: Vec<StepSummary>,
    pub p_safe: Option<f64>,
    pub cv: Option<f64>,
    pub status: QueueStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueResponse {
    pub geometry: EnvGeometry,
    pub items: Vec<QueueItem>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetailStep {
    pub t: usize,
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub log_score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDetail {
    pub item: QueueItem,
    pub steps: Vec<DetailStep>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRequest {
    pub segment_id: u64,
    pub label: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelResponse {
    pub segment_id: u64,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatusResponse {
    pub iteration: usize,
    pub steps: usize,
    pub lambda: f64,
    pub accuracy: Option<f64>,
    pub labeled: u64,
    pub pending_submissions: usize,
    pub queued: usize,
    pub finished: bool,
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
}

fn error(code: StatusCode, msg: impl Into<String>) -> Response {
    (code, Json(ErrorBody { error: msg.into() })).into_response()
}

fn path_and_states(geometry: &EnvGeometry, traj: &Trajectory) -> (Vec<[f64; 2]>, Vec<usize>) {
    match geometry {
        EnvGeometry::HazardPoint { .. } => (traj.steps.iter().map(|s| [s.obs[0], s.obs[1]]).collect(), Vec::new()),
        EnvGeometry::Chain { states } => (
            Vec::new(),
            traj.steps
                .iter()
                .map(|s| s.obs[..*states].iter().position(|&v| v == 1.0).unwrap_or(0))
                .collect(),
        ),
    }
}

fn item(geometry: &EnvGeometry, e: &QueueEntry) -> QueueItem {
    let (path, states) = path_and_states(geometry, &e.traj);
    QueueItem {
        segment_id: e.id,
        len: e.traj.len(),
        path,
        states,
        steps: e
            .traj
            .steps
            .iter()
            .enumerate()
            .map(|(t, s)| StepSummary {
                t,
                obs: s.obs.clone(),
                log_score: e.log_scores.get(t).copied(),
            })
            .collect(),
        p_safe: e.p_safe,
        cv: e.cv.map(|c| c.cv),
        status: e.status,
    }
}

async fn queue(State(s): State<ServiceState>) -> Json<QueueResponse> {
    let buf = s.buffer.lock();
    let mut entries = buf.entries_with(QueueStatus::Selected);
    entries.sort_by(|a, b| {
        let (ca, cb) = (a.cv.map_or(0.0, |c| c.cv), b.cv.map_or(0.0, |c| c.cv));
        cb.total_cmp(&ca).then(a.id.cmp(&b.id))
    });
    Json(QueueResponse {
        geometry: s.geometry.clone(),
        items: entries.into_iter().map(|e| item(&s.geometry, e)).collect(),
    })
}

async fn trajectory(State(s): State<ServiceState>, Path(id): Path<String>) -> Response {
    let Ok(id) = id.parse::<u64>() else {
        return error(StatusCode::BAD_REQUEST, "segment id must be an unsigned integer");
    };
    let buf = s.buffer.lock();
    let Some(e) = buf.entry(id) else {
        return error(StatusCode::NOT_FOUND, format!("unknown segment {id}"));
    };
    let steps = e
        .traj
        .steps
        .iter()
        .enumerate()
        .map(|(t, st)| DetailStep {
            t,
            obs: st.obs.clone(),
            action: st.action.clone(),
            log_score: e.log_scores.get(t).copied(),
        })
        .collect();
    Json(TrajectoryDetail {
        item: item(&s.geometry, e),
        steps,
    })
    .into_response()
}

async fn label(State(s): State<ServiceState>, body: Result<Json<LabelRequest>, JsonRejection>) -> Response {
    let Ok(Json(req)) = body else {
        return error(StatusCode::BAD_REQUEST, "body must be {\"segment_id\": u64, \"label\": 0 | 1}");
    };
    let label = match req.label {
        0 => 0u8,
        1 => 1u8,
        _ => return error(StatusCode::BAD_REQUEST, "label must be 0 or 1"),
    };
    match s.buffer.lock().submit(req.segment_id, label) {
        Ok(()) => Json(LabelResponse {
            segment_id: req.segment_id,
            accepted: true,
        })
        .into_response(),
        Err(SubmitError::InvalidLabel) => error(StatusCode::BAD_REQUEST, "label must be 0 or 1"),
        Err(SubmitError::Unknown) => error(StatusCode::NOT_FOUND, format!("segment {} is not awaiting a label", req.segment_id)),
        Err(SubmitError::Duplicate) => error(StatusCode::CONFLICT, format!("segment {} already labeled", req.segment_id)),
    }
}

async fn status(State(s): State<ServiceState>) -> Json<StatusResponse> {
    let st = s.status.lock().clone();
    let buf = s.buffer.lock();
    Json(StatusResponse {
        iteration: st.iteration,
        steps: st.steps,
        lambda: st.lambda,
        accuracy: st.accuracy,
        labeled: buf.labeled_total(),
        pending_submissions: buf.inbox_len(),
        queued: buf.entries_with(QueueStatus::Selected).len(),
        finished: st.finished,
    })
}

pub fn router(state: ServiceState) -> Router {
    Router::new()
        .route("/queue", get(queue))
        .route("/trajectory/{id}", get(trajectory))
        .route("/label", post(label))
        .route("/status", get(status))
        .with_state(state)
}

/// Serves the label API until the future is dropped or fails.
pub async fn serve(state: ServiceState, addr: SocketAddr) -> Result<(), ExperimentError> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| ExperimentError::Io(format!("bind {addr}: {e}")))?;
    log::info!("label service listening on {addr}");
    axum::serve(listener, router(state))
        .await
        .map_err(|e| ExperimentError::Io(format!("serve: {e}")))
}
