use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use virreq_core::dataset::{load_tree, DataLayout};
use virreq_core::kb::{KbRegistry, KbResolver, KbVersion};
use virreq_core::predict::{BundleStore, EmbeddingTable, FilesBackend, LinearBackend, OracleBackend, Predictor};
use virreq_core::RecognitionTree;

use crate::error::ApiError;
use crate::session::{Cached, Published, SessionCore, Snapshot};

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub data: PathBuf,
    /// Allowed browser origin; any origin when unset.
    pub cors_origin: Option<String>,
    /// Static UI assets served at `/` when present.
    pub ui_dir: Option<PathBuf>,
    /// Write each session to `data/sessions/` after every mutation.
    pub snapshots: bool,
}

impl ServerConfig {
    pub fn new(data: impl Into<PathBuf>) -> Self {
        Self { data: data.into(), cors_origin: None, ui_dir: None, snapshots: true }
    }
}

pub(crate) struct SessionHandle {
    pub image_id: String,
    pub writer: Arc<tokio::sync::Mutex<SessionCore>>,
    pub published: RwLock<Arc<Published>>,
}

impl SessionHandle {
    pub fn read(&self) -> Arc<Published> {
        self.published.read().expect("published lock").clone()
    }

    pub fn set(&self, p: Published) {
        *self.published.write().expect("published lock") = Arc::new(p);
    }
}

pub(crate) struct Inner {
    pub cfg: ServerConfig,
    pub layout: DataLayout,
    pub kbs: KbRegistry,
    pub sessions: RwLock<HashMap<String, Arc<SessionHandle>>>,
    next_id: AtomicU64,
    /// Idempotency cache for session creation.
    pub create_keys: Mutex<HashMap<String, Cached>>,
}

#[derive(Clone)]
pub struct AppState {
    pub(crate) inner: Arc<Inner>,
}

/// Image size and, when present, the ground truth.
pub(crate) struct ImageInfo {
    pub width: u32,
    pub height: u32,
    pub gt: Option<RecognitionTree>,
}

impl AppState {
    /// Loads KB versions from `data/kb/` and restores saved sessions.
    pub fn open(cfg: ServerConfig) -> std::io::Result<Self> {
        let layout = DataLayout::new(&cfg.data);
        let kbs = if layout.kb_dir().is_dir() { KbRegistry::load_dir(&layout.kb_dir())? } else { KbRegistry::new() };
        let state = Self {
            inner: Arc::new(Inner {
                cfg,
                layout,
                kbs,
                sessions: RwLock::new(HashMap::new()),
                next_id: AtomicU64::new(1),
                create_keys: Mutex::new(HashMap::new()),
            }),
        };
        state.restore_snapshots()?;
        Ok(state)
    }

    pub fn kbs(&self) -> &KbRegistry {
        &self.inner.kbs
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.inner.sessions.read().expect("sessions lock").keys().cloned().collect();
        ids.sort();
        ids
    }

    fn restore_snapshots(&self) -> std::io::Result<()> {
        let dir = self.inner.layout.sessions_dir();
        if !self.inner.cfg.snapshots || !dir.is_dir() {
            return Ok(());
        }
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        paths.sort();
        for p in paths.into_iter().filter(|p| p.extension().is_some_and(|x| x == "json")) {
            let restored = std::fs::read(&p)
                .map_err(|e| e.to_string())
                .and_then(|b| serde_json::from_slice::<Snapshot>(&b).map_err(|e| e.to_string()))
                .and_then(|snap| self.restore_one(&snap).map_err(|e| e.to_string()));
            if let Err(e) = restored {
                log::warn!("skipping snapshot {}: {e}", p.display());
            }
        }
        Ok(())
    }

    fn restore_one(&self, snap: &Snapshot) -> Result<(), ApiError> {
        let kb = self.kb(&snap.kb_version)?;
        let info = self.image_info(&snap.image_id)?;
        let backend = self.backend(&snap.backend, &info, &kb)?;
        let core = SessionCore::restore(snap, kb, backend)?;
        if let Some(n) = snap.session_id.strip_prefix('s').and_then(|n| n.parse::<u64>().ok()) {
            self.inner.next_id.fetch_max(n + 1, Ordering::SeqCst);
        }
        self.insert(core, snap.image_id.clone());
        Ok(())
    }

    pub(crate) fn kb(&self, version: &str) -> Result<Arc<KbVersion>, ApiError> {
        self.inner
            .kbs
            .resolve(version)
            .ok_or_else(|| ApiError::not_found("kb_not_found", format!("unknown knowledge-base version {version}")))
    }

    pub(crate) fn image_info(&self, image_id: &str) -> Result<ImageInfo, ApiError> {
        let layout = &self.inner.layout;
        let (Some(gt_path), Some(png)) = (layout.gt_path(image_id), layout.image_path(image_id)) else {
            return Err(ApiError::not_found("image_not_found", format!("unknown image {image_id:?}")));
        };
        if gt_path.is_file() {
            let gt = load_tree(&gt_path, None).map_err(|e| ApiError::internal(e.to_string()))?;
            return Ok(ImageInfo { width: gt.width(), height: gt.height(), gt: Some(gt) });
        }
        if png.is_file() {
            let (width, height) = image::image_dimensions(&png).map_err(|e| ApiError::internal(e.to_string()))?;
            return Ok(ImageInfo { width, height, gt: None });
        }
        Err(ApiError::not_found("image_not_found", format!("unknown image {image_id:?}")))
    }

    pub(crate) fn backend(&self, name: &str, info: &ImageInfo, kb: &KbVersion) -> Result<Arc<dyn Predictor>, ApiError> {
        let layout = &self.inner.layout;
        let unavailable = |m: String| ApiError::bad_request("backend_unavailable", m);
        let embeddings = || -> Result<Option<EmbeddingTable>, ApiError> {
            let p = layout.embeddings();
            if !p.is_file() {
                return Ok(None);
            }
            EmbeddingTable::load(&p).map(Some).map_err(|e| ApiError::internal(e.to_string()))
        };
        Ok(match name {
            "oracle" => {
                let mut gt = info
                    .gt
                    .clone()
                    .ok_or_else(|| unavailable("the oracle needs ground truth for this image".into()))?;
                // concept ids survive KB growth, so an older annotation can
                // answer for a newer version
                gt.set_kb_version(kb.version_id());
                Arc::new(OracleBackend::new([gt]))
            }
            "files" => Arc::new(FilesBackend::new(BundleStore::open(layout.bundles_dir()), embeddings()?)),
            "linear" => {
                let e = embeddings()?.ok_or_else(|| unavailable("the linear backend needs embeddings.json".into()))?;
                Arc::new(LinearBackend::new(BundleStore::open(layout.bundles_dir()), e))
            }
            other => {
                return Err(ApiError::bad_request("bad_backend", format!("unknown backend {other:?}"))
                    .with_detail(serde_json::json!({ "allowed": ["oracle", "files", "linear"] })))
            }
        })
    }

    pub(crate) fn next_session_id(&self) -> String {
        format!("s{:06}", self.inner.next_id.fetch_add(1, Ordering::SeqCst))
    }

    pub(crate) fn insert(&self, core: SessionCore, image_id: String) -> Arc<SessionHandle> {
        let id = core.id.clone();
        let published = RwLock::new(Arc::new(core.publish()));
        let h = Arc::new(SessionHandle { image_id, writer: Arc::new(tokio::sync::Mutex::new(core)), published });
        self.inner.sessions.write().expect("sessions lock").insert(id, h.clone());
        h
    }

    pub(crate) fn session(&self, id: &str) -> Result<Arc<SessionHandle>, ApiError> {
        self.inner
            .sessions
            .read()
            .expect("sessions lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("session_not_found", format!("unknown session {id:?}")))
    }

    /// Persists `core` when snapshots are on. Failures are logged, not
    /// fatal: the in-memory session stays authoritative.
    pub(crate) fn save_snapshot(&self, core: &SessionCore) {
        if !self.inner.cfg.snapshots {
            return;
        }
        let dir = self.inner.layout.sessions_dir();
        let path = dir.join(format!("{}.json", core.id));
        let tmp = dir.join(format!(".{}.json.tmp", core.id));
        let res = std::fs::create_dir_all(&dir)
            .and_then(|_| std::fs::write(&tmp, serde_json::to_vec(&core.snapshot()).expect("snapshot serializes")))
            .and_then(|_| std::fs::rename(&tmp, &path));
        if let Err(e) = res {
            log::warn!("snapshot of {} failed: {e}", core.id);
        }
    }
}
