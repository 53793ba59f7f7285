//! Directory-backed object store with a fixed per-operation delay, standing in
//! for a remote blob store.

use std::io;
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

pub struct ObjectStore {
    root: PathBuf,
    latency: Duration,
    ops: AtomicU64,
}

impl ObjectStore {
    pub fn open(root: impl Into<PathBuf>, latency: Duration) -> io::Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(ObjectStore {
            root,
            latency,
            ops: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Store operations performed so far.
    pub fn ops(&self) -> u64 {
        self.ops.load(Ordering::Relaxed)
    }

    fn resolve(&self, locator: &str) -> io::Result<PathBuf> {
        let rel = Path::new(locator);
        let clean = !locator.is_empty()
            && rel
                .components()
                .all(|c| matches!(c, Component::Normal(_)));
        if !clean {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                format!("bad locator {locator:?}"),
            ));
        }
        Ok(self.root.join(rel))
    }

    fn delay(&self) {
        self.ops.fetch_add(1, Ordering::Relaxed);
        if !self.latency.is_zero() {
            std::thread::sleep(self.latency);
        }
    }

    pub fn get(&self, locator: &str) -> io::Result<Vec<u8>> {
        let path = self.resolve(locator)?;
        self.delay();
        std::fs::read(path)
    }

    pub fn put(&self, locator: &str, data: &[u8]) -> io::Result<()> {
        let path = self.resolve(locator)?;
        self.delay();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, data)
    }
}
