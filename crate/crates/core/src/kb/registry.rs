use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, RwLock};

use super::{KbError, KbVersion};

/// Anything that can turn a version id into a snapshot.
pub trait KbResolver: Send + Sync {
    fn resolve(&self, version_id: &str) -> Option<Arc<KbVersion>>;
}

/// In-memory map of version id to snapshot. Many readers, one writer at a
/// time; inserted versions are never replaced.
#[derive(Debug, Default)]
pub struct KbRegistry {
    versions: RwLock<HashMap<String, Arc<KbVersion>>>,
}

impl KbRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&self, v: KbVersion) -> Arc<KbVersion> {
        let mut map = self.versions.write().expect("registry lock");
        map.entry(v.version_id().to_string()).or_insert_with(|| Arc::new(v)).clone()
    }

    pub fn get(&self, version_id: &str) -> Result<Arc<KbVersion>, KbError> {
        self.resolve(version_id).ok_or_else(|| KbError::UnknownVersion(version_id.into()))
    }

    pub fn ids(&self) -> Vec<String> {
        let mut ids: Vec<_> = self.versions.read().expect("registry lock").keys().cloned().collect();
        ids.sort();
        ids
    }

    /// Loads every `*.json` file in `dir`.
    pub fn load_dir(dir: &Path) -> std::io::Result<Self> {
        let reg = Self::new();
        let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<Result<_, _>>()?;
        entries.sort_by_key(|e| e.path());
        for e in entries {
            let path = e.path();
            if path.extension().is_some_and(|x| x == "json") {
                let text = std::fs::read_to_string(&path)?;
                let v = KbVersion::from_json(&text).map_err(|err| {
                    std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{}: {err}", path.display()))
                })?;
                reg.insert(v);
            }
        }
        Ok(reg)
    }
}

impl KbResolver for KbRegistry {
    fn resolve(&self, version_id: &str) -> Option<Arc<KbVersion>> {
        self.versions.read().expect("registry lock").get(version_id).cloned()
    }
}

impl KbResolver for KbVersion {
    fn resolve(&self, version_id: &str) -> Option<Arc<KbVersion>> {
        (self.version_id() == version_id).then(|| Arc::new(self.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::fixtures::cpp_kb;

    #[test]
    fn insert_and_load() {
        let reg = KbRegistry::new();
        let kb = cpp_kb();
        let id = kb.version_id().to_string();
        reg.insert(kb.clone());
        assert_eq!(*reg.get(&id).unwrap(), kb);
        assert!(matches!(reg.get("nope"), Err(KbError::UnknownVersion(_))));

        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(format!("{id}.json")), kb.to_json()).unwrap();
        let loaded = KbRegistry::load_dir(dir.path()).unwrap();
        assert_eq!(loaded.ids(), vec![id]);
    }
}
