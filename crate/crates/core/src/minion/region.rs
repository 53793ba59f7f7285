//! File-backed shared memory regions.
//!
//! A region is a file in a shared-memory filesystem (normally `/dev/shm`)
//! mapped into the minion's address space. Co-located processes map the same
//! file to touch the bytes directly. The file name is the only handle a
//! process needs, so renaming it on every grant and revoke takes the region
//! out of reach of anyone holding a stale name.

use std::fs::{self, File, OpenOptions, Permissions};
use std::io;
use std::os::unix::fs::{OpenOptionsExt, PermissionsExt};
use std::path::{Path, PathBuf};
use std::ptr;

use memmap2::{MmapOptions, MmapRaw};

pub struct ShmRegion {
    path: PathBuf,
    map: MmapRaw,
    len: usize,
    _file: File,
}

impl ShmRegion {
    /// Create a zero-filled region of `len` bytes at `path`.
    pub fn create(path: PathBuf, len: usize) -> io::Result<Self> {
        if len == 0 {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, "empty region"));
        }
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create_new(true)
            .mode(0o600)
            .open(&path)?;
        file.set_len(len as u64)?;
        let map = match MmapOptions::new().len(len).map_raw(&file) {
            Ok(m) => m,
            Err(e) => {
                let _ = fs::remove_file(&path);
                return Err(e);
            }
        };
        Ok(ShmRegion {
            path,
            map,
            len,
            _file: file,
        })
    }

    /// Map an existing region by path, as a grant holder does.
    pub fn open(path: &Path, len: usize) -> io::Result<MmapRaw> {
        let file = OpenOptions::new().read(true).write(true).open(path)?;
        let actual = file.metadata()?.len();
        if actual != len as u64 {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("segment is {actual} bytes, expected {len}"),
            ));
        }
        MmapOptions::new().len(len).map_raw(&file)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn rename(&mut self, to: PathBuf) -> io::Result<()> {
        fs::rename(&self.path, &to)?;
        self.path = to;
        Ok(())
    }

    pub fn set_mode(&self, mode: u32) -> io::Result<()> {
        fs::set_permissions(&self.path, Permissions::from_mode(mode))
    }

    /// Copy bytes out of the region. Bounds are the caller's responsibility.
    pub fn read_at(&self, offset: usize, out: &mut [u8]) {
        assert!(offset + out.len() <= self.len);
        // SAFETY: in bounds; the mapping lives as long as `self`. Other
        // processes may write concurrently, so go through raw pointers rather
        // than forming a shared slice.
        unsafe {
            ptr::copy_nonoverlapping(self.map.as_ptr().add(offset), out.as_mut_ptr(), out.len());
        }
    }

    pub fn write_at(&self, offset: usize, data: &[u8]) {
        assert!(offset + data.len() <= self.len);
        // SAFETY: as for `read_at`.
        unsafe {
            ptr::copy_nonoverlapping(data.as_ptr(), self.map.as_mut_ptr().add(offset), data.len());
        }
    }

    /// View of the whole region.
    ///
    /// # Safety
    /// No process may write the region while the slice is alive. Minions only
    /// call this on revoked segments, which no client can reach.
    pub unsafe fn as_slice(&self) -> &[u8] {
        std::slice::from_raw_parts(self.map.as_ptr(), self.len)
    }

    /// # Safety
    /// Same contract as [`ShmRegion::as_slice`], plus exclusivity within this process.
    #[allow(clippy::mut_from_ref)]
    pub unsafe fn as_mut_slice(&self) -> &mut [u8] {
        std::slice::from_raw_parts_mut(self.map.as_mut_ptr(), self.len)
    }
}

impl Drop for ShmRegion {
    fn drop(&mut self) {
        if let Err(e) = fs::remove_file(&self.path) {
            log::warn!("cannot unlink {}: {e}", self.path.display());
        }
    }
}
