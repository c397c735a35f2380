use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};
use tower_http::services::ServeDir;
use virreq_core::dataset::render_png;
use virreq_core::RecognitionTree;

use crate::error::ApiError;
use crate::session::{Action, Cached, SessionCore};
use crate::state::AppState;

const IDEMPOTENCY_KEY: &str = "idempotency-key";

pub fn router(state: AppState) -> Router {
    let cfg = &state.inner.cfg;
    let origin = match &cfg.cors_origin {
        Some(o) => match HeaderValue::from_str(o) {
            Ok(v) => AllowOrigin::exact(v),
            Err(_) => AllowOrigin::from(Any),
        },
        None => AllowOrigin::from(Any),
    };
    let cors = CorsLayer::new()
        .allow_origin(origin)
        .allow_methods([Method::GET, Method::POST, Method::OPTIONS])
        .allow_headers([header::CONTENT_TYPE, header::IF_NONE_MATCH, header::HeaderName::from_static(IDEMPOTENCY_KEY)])
        .expose_headers([header::ETAG]);
    let ui = cfg.ui_dir.clone().filter(|d| d.is_dir());
    let api = Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/tree", get(get_tree))
        .route("/sessions/{id}/requests", post(post_request))
        .route("/sessions/{id}/undo", post(post_undo))
        .route("/sessions/{id}/export", post(post_export))
        .route("/images/{id}", get(get_image))
        .route("/kb", get(list_kbs))
        .route("/kb/{version}", get(get_kb));
    let api = match ui {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.fallback(|| async { ApiError::not_found("route_not_found", "no such route") }),
    };
    api.layer(cors).with_state(state)
}

fn quoted(etag: &str) -> String {
    format!("\"{etag}\"")
}

fn respond(status: StatusCode, body: Vec<u8>, etag: Option<&str>) -> Response {
    let mut r = Response::builder().status(status).header(header::CONTENT_TYPE, "application/json");
    if let Some(e) = etag {
        r = r.header(header::ETAG, quoted(e));
    }
    r.body(Body::from(body)).expect("valid response")
}

fn json_body<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("response serializes")
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::unprocessable("invalid_body", e.to_string()))
}

fn idempotency_key(headers: &HeaderMap) -> Result<Option<String>, ApiError> {
    match headers.get(IDEMPOTENCY_KEY) {
        None => Ok(None),
        Some(v) => {
            let k = v.to_str().map_err(|_| ApiError::bad_request("bad_idempotency_key", "key must be ASCII"))?;
            if k.is_empty() || k.len() > 255 {
                return Err(ApiError::bad_request("bad_idempotency_key", "key must have 1 to 255 characters"));
            }
            Ok(Some(k.to_string()))
        }
    }
}

fn fingerprint(route: &str, body: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(route.as_bytes());
    h.update([0]);
    h.update(body);
    hex::encode(h.finalize())
}

/// Replays the stored response for `key`, or reports the key as reused
/// for a different request.
fn replay(
    cache: &std::collections::HashMap<String, Cached>,
    key: Option<&str>,
    fp: &str,
) -> Option<Result<Response, ApiError>> {
    let c = cache.get(key?)?;
    if c.fingerprint != fp {
        return Some(Err(ApiError::unprocessable(
            "idempotency_key_reused",
            "the key was used for a different request",
        )));
    }
    Some(Ok(respond(c.status, c.body.clone(), c.etag.as_deref())))
}

/// Turns a mutation result into a response, remembering it under `key`.
/// Server errors are not remembered so a retry can succeed.
fn settle(
    cache: &mut std::collections::HashMap<String, Cached>,
    key: Option<String>,
    fp: String,
    result: Result<(StatusCode, Vec<u8>, Option<String>), ApiError>,
) -> Response {
    let (status, body, etag) = match result {
        Ok(x) => x,
        Err(e) => (e.status, json_body(&e), None),
    };
    if let Some(k) = key {
        if !status.is_server_error() {
            cache.insert(k, Cached { fingerprint: fp, status, body: body.clone(), etag: etag.clone() });
        }
    }
    respond(status, body, etag.as_deref())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateBody {
    image_id: String,
    #[serde(default)]
    backend: Option<String>,
    #[serde(default)]
    kb_version: Option<String>,
}

fn create(state: &AppState, body: &[u8]) -> Result<(StatusCode, Vec<u8>, Option<String>), ApiError> {
    let b: CreateBody = parse(body)?;
    let info = state.image_info(&b.image_id)?;
    let version = match (&b.kb_version, &info.gt) {
        (Some(v), _) => v.clone(),
        (None, Some(gt)) => gt.kb_version().to_string(),
        (None, None) => {
            let ids = state.kbs().ids();
            match ids.as_slice() {
                [only] => only.clone(),
                _ => {
                    return Err(ApiError::bad_request(
                        "kb_version_required",
                        "name a kb_version; the data directory holds several or none",
                    ))
                }
            }
        }
    };
    let kb = state.kb(&version)?;
    let backend_name = b.backend.unwrap_or_else(|| "oracle".into());
    let backend = state.backend(&backend_name, &info, &kb)?;
    let tree = RecognitionTree::new(b.image_id.clone(), info.width, info.height, &kb)
        .map_err(|e| ApiError::internal(e.to_string()))?;
    let id = state.next_session_id();
    let core = SessionCore::new(id.clone(), backend_name.clone(), kb.clone(), backend, tree);
    state.save_snapshot(&core);
    let etag = core.tree().hash();
    state.insert(core, b.image_id.clone());
    let out = json!({
        "session_id": id,
        "image_id": b.image_id,
        "width": info.width,
        "height": info.height,
        "backend": backend_name,
        "kb_version": version,
        "etag": etag,
    });
    Ok((StatusCode::CREATED, json_body(&out), Some(etag)))
}

async fn create_session(State(state): State<AppState>, headers: HeaderMap, body: Bytes) -> Result<Response, ApiError> {
    let key = idempotency_key(&headers)?;
    let fp = fingerprint("create", &body);
    let st = state.clone();
    tokio::task::spawn_blocking(move || {
        // one creator at a time, so a repeated key cannot race its first use
        let mut cache = st.inner.create_keys.lock().expect("idempotency lock");
        if let Some(r) = replay(&cache, key.as_deref(), &fp) {
            return r;
        }
        let result = create(&st, &body);
        Ok(settle(&mut cache, key, fp, result))
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?
}

async fn list_sessions(State(state): State<AppState>) -> Response {
    let list: Vec<Value> = state
        .session_ids()
        .into_iter()
        .filter_map(|id| state.session(&id).ok().map(|h| json!({ "session_id": id, "image_id": h.image_id })))
        .collect();
    respond(StatusCode::OK, json_body(&json!({ "sessions": list })), None)
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let h = state.session(&id)?;
    let p = h.read();
    let (backend, kb_version) = {
        let core = h.writer.lock().await;
        (core.backend_name.clone(), core.kb.version_id().to_string())
    };
    let out = json!({
        "session_id": id,
        "image_id": h.image_id,
        "backend": backend,
        "kb_version": kb_version,
        "etag": p.etag,
        "steps": p.steps,
    });
    Ok(respond(StatusCode::OK, json_body(&out), Some(&p.etag)))
}

fn etag_matches(headers: &HeaderMap, etag: &str) -> bool {
    let Some(v) = headers.get(header::IF_NONE_MATCH).and_then(|v| v.to_str().ok()) else { return false };
    v.split(',').map(str::trim).any(|t| t == "*" || t.trim_start_matches("W/").trim_matches('"') == etag)
}

async fn get_tree(
    State(state): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    let p = state.session(&id)?.read();
    if etag_matches(&headers, &p.etag) {
        let mut r = StatusCode::NOT_MODIFIED.into_response();
        r.headers_mut().insert(header::ETAG, HeaderValue::from_str(&quoted(&p.etag)).expect("hex etag"));
        return Ok(r);
    }
    Ok(respond(StatusCode::OK, p.tree.as_ref().clone(), Some(&p.etag)))
}

/// Runs `op` under the session's writer lock on a blocking thread, with
/// idempotency handling and publication of the new state.
async fn mutate(
    state: AppState,
    id: String,
    headers: HeaderMap,
    route: &'static str,
    body: Bytes,
    op: impl FnOnce(&AppState, &mut SessionCore, &[u8]) -> Result<(StatusCode, Value), ApiError> + Send + 'static,
) -> Result<Response, ApiError> {
    let h = state.session(&id)?;
    let key = idempotency_key(&headers)?;
    let fp = fingerprint(route, &body);
    let mut core = h.writer.clone().lock_owned().await;
    let h2 = Arc::clone(&h);
    tokio::task::spawn_blocking(move || {
        if let Some(r) = replay(&core.idempotency, key.as_deref(), &fp) {
            return r;
        }
        let before = core.tree().hash();
        let result = op(&state, &mut core, &body).map(|(status, v)| {
            let etag = core.tree().hash();
            if etag != before {
                state.save_snapshot(&core);
                h2.set(core.publish());
            }
            (status, json_body(&v), Some(etag))
        });
        let mut cache = std::mem::take(&mut core.idempotency);
        let r = settle(&mut cache, key, fp, result);
        core.idempotency = cache;
        Ok(r)
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?
}

async fn post_request(
    State(state): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response, ApiError> {
    mutate(state, id, headers, "requests", body, |_, core, body| {
        let action: Action = parse(body)?;
        let out = core.act(&action)?;
        Ok((StatusCode::OK, serde_json::to_value(out).expect("outcome serializes")))
    })
    .await
}

async fn post_undo(
    State(state): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response, ApiError> {
    mutate(state, id, headers, "undo", body, |_, core, _| {
        core.undo()?;
        let tree: Value = serde_json::from_slice(&core.tree().to_bytes()).expect("tree json");
        Ok((StatusCode::OK, json!({ "etag": core.tree().hash(), "steps": core.steps(), "tree": tree })))
    })
    .await
}

async fn post_export(
    State(state): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response, ApiError> {
    mutate(state, id, headers, "export", body, |state, core, _| {
        let dir = state.inner.layout.exports_dir().join(&core.id);
        let tree_path = dir.join(format!("{}{}", core.tree().image_id, virreq_core::dataset::TREE_SUFFIX));
        let log_path = dir.join("requests.jsonl");
        let log = core.log_stream();
        std::fs::create_dir_all(&dir)
            .and_then(|_| std::fs::write(&tree_path, core.tree().to_json_pretty()))
            .and_then(|_| std::fs::write(&log_path, &log))
            .map_err(|e| ApiError::internal(format!("export failed: {e}")))?;
        let tree: Value = serde_json::from_slice(&core.tree().to_bytes()).expect("tree json");
        Ok((
            StatusCode::OK,
            json!({
                "etag": core.tree().hash(),
                "tree_path": tree_path,
                "log_path": log_path,
                "tree": tree,
                "log": log,
            }),
        ))
    })
    .await
}

async fn get_image(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let layout = &state.inner.layout;
    let png = layout
        .image_path(&id)
        .ok_or_else(|| ApiError::not_found("image_not_found", format!("unknown image {id:?}")))?;
    let bytes = match tokio::fs::read(&png).await {
        Ok(b) => b,
        Err(_) => {
            // synthetic corpora may ship without pictures; draw the truth
            let info = state.image_info(&id)?;
            let gt = info.gt.ok_or_else(|| ApiError::not_found("image_not_found", format!("no picture for {id:?}")))?;
            render_png(&gt).map_err(|e| ApiError::internal(e.to_string()))?
        }
    };
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn list_kbs(State(state): State<AppState>) -> Response {
    respond(StatusCode::OK, json_body(&json!({ "versions": state.kbs().ids() })), None)
}

async fn get_kb(State(state): State<AppState>, Path(version): Path<String>) -> Result<Response, ApiError> {
    let kb = state.kb(&version)?;
    Ok(respond(StatusCode::OK, kb.to_json().into_bytes(), Some(kb.version_id())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn if_none_match_forms() {
        let h = |v: &str| {
            let mut m = HeaderMap::new();
            m.insert(header::IF_NONE_MATCH, HeaderValue::from_str(v).unwrap());
            m
        };
        assert!(etag_matches(&h("\"abc\""), "abc"));
        assert!(etag_matches(&h("W/\"abc\""), "abc"));
        assert!(etag_matches(&h("\"x\", \"abc\""), "abc"));
        assert!(etag_matches(&h("*"), "abc"));
        assert!(!etag_matches(&h("\"abd\""), "abc"));
        assert!(!etag_matches(&HeaderMap::new(), "abc"));
    }

    #[test]
    fn fingerprints_separate_routes() {
        assert_ne!(fingerprint("undo", b""), fingerprint("export", b""));
        assert_eq!(fingerprint("undo", b"{}"), fingerprint("undo", b"{}"));
    }
}
