//! Exclusive ownership of a working directory via a lock file.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const LOCK_FILE: &str = ".labelsynth.lock";

#[derive(Debug, thiserror::Error)]
pub enum LockError {
    #[error("{} is locked by another process ({holder})", path.display())]
    Held { path: PathBuf, holder: String },
    #[error("cannot create lock {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Held while alive; the lock file is removed on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    /// `owner` is written into the file for diagnostics.
    pub fn acquire(dir: &Path, owner: &str) -> Result<Self, LockError> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{owner} pid={}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(LockError::Held {
                holder: std::fs::read_to_string(&path).unwrap_or_default().trim().to_string(),
                path,
            }),
            Err(source) => Err(LockError::Io { path, source }),
        }
    }

    pub fn is_locked(dir: &Path) -> bool {
        dir.join(LOCK_FILE).exists()
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_holder_is_refused_until_release() {
        let dir = tempfile::tempdir().unwrap();
        let lock = DirLock::acquire(dir.path(), "first").unwrap();
        assert!(DirLock::is_locked(dir.path()));
        match DirLock::acquire(dir.path(), "second") {
            Err(LockError::Held { holder, .. }) => assert!(holder.starts_with("first")),
            other => panic!("{other:?}"),
        }
        drop(lock);
        assert!(!DirLock::is_locked(dir.path()));
        DirLock::acquire(dir.path(), "second").unwrap();
    }
}
