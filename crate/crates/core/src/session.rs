//! Session sidecar files, so a step-at-a-time caller can carry EMA state
//! across process invocations.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        b"QSLK1"
//! flags        u8        bit 0: geometry bound, bit 1: EMA state present
//! batch        u32
//! height       u32
//! width        u32
//! tile         u32
//! stride       u32
//! step_index   u64
//! fingerprint  u64
//! lo_len       u64       then lo_len bytes: NPY, <f4, shape (batch, tiles_y, tiles_x)
//! hi_len       u64       then hi_len bytes: NPY, same shape
//! ```
//!
//! The two NPY payloads are present only when bit 1 is set.

use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::aqclip::{SessionGeometry, StepSession};
use crate::error::{Error, Result};
use crate::npy;
use crate::tensor::Dtype;

pub const MAGIC: &[u8; 5] = b"QSLK1";
const HAS_GEOMETRY: u8 = 1;
const HAS_STATE: u8 = 2;

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| Error::invalid(format!("{v} does not fit the session header")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::Format("session file is truncated".into()));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

impl StepSession {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = MAGIC.to_vec();
        let mut flags = 0;
        if self.geometry.is_some() {
            flags |= HAS_GEOMETRY;
        }
        if !self.ema_lo.is_empty() {
            flags |= HAS_STATE;
        }
        buf.push(flags);
        let g = self.geometry.unwrap_or(SessionGeometry {
            batch: 0,
            height: 0,
            width: 0,
            tile: 0,
            stride: 0,
        });
        for v in [g.batch, g.height, g.width, g.tile, g.stride] {
            put_u32(&mut buf, v)?;
        }
        buf.extend_from_slice(&self.step_index.to_le_bytes());
        buf.extend_from_slice(&self.fingerprint.unwrap_or(0).to_le_bytes());
        if flags & HAS_STATE != 0 {
            let grid = g.grid()?;
            let (ty, tx) = grid.dims();
            for values in [&self.ema_lo, &self.ema_hi] {
                let mut payload = Vec::new();
                npy::encode(&mut payload, &[g.batch, ty, tx], values, Dtype::F32)?;
                buf.extend_from_slice(&(payload.len() as u64).to_le_bytes());
                buf.extend_from_slice(&payload);
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<StepSession> {
        let mut cur = Cursor { bytes };
        if cur.take(MAGIC.len())? != MAGIC {
            return Err(Error::Format("not a session file (bad magic)".into()));
        }
        let flags = cur.u8()?;
        if flags & !(HAS_GEOMETRY | HAS_STATE) != 0
            || (flags & HAS_STATE != 0 && flags & HAS_GEOMETRY == 0)
        {
            return Err(Error::Format(format!("invalid session flags {flags:#04x}")));
        }
        let geometry = SessionGeometry {
            batch: cur.u32()?,
            height: cur.u32()?,
            width: cur.u32()?,
            tile: cur.u32()?,
            stride: cur.u32()?,
        };
        let step_index = cur.u64()?;
        let fingerprint = cur.u64()?;
        let mut session = StepSession {
            step_index,
            ..StepSession::default()
        };
        if flags & HAS_GEOMETRY != 0 {
            if geometry.batch == 0 {
                return Err(Error::Format("session batch must be >= 1".into()));
            }
            let grid = geometry.grid()?;
            session.geometry = Some(geometry);
            session.fingerprint = Some(fingerprint);
            if flags & HAS_STATE != 0 {
                let (ty, tx) = grid.dims();
                let expected = vec![geometry.batch, ty, tx];
                let mut grids = Vec::with_capacity(2);
                for name in ["lo", "hi"] {
                    let len = cur.u64()? as usize;
                    let array = npy::decode(cur.take(len)?)?;
                    if array.shape != expected || array.dtype != Dtype::F32 {
                        return Err(Error::Format(format!(
                            "{name} grid has shape {:?}, expected {expected:?}",
                            array.shape
                        )));
                    }
                    grids.push(array.data);
                }
                session.ema_hi = grids.pop().expect("two grids");
                session.ema_lo = grids.pop().expect("two grids");
                if session
                    .ema_lo
                    .iter()
                    .zip(&session.ema_hi)
                    .any(|(l, h)| l > h)
                {
                    return Err(Error::Format("session corridor has lo > hi".into()));
                }
            }
        }
        if !cur.bytes.is_empty() {
            return Err(Error::Format("trailing bytes after session payload".into()));
        }
        Ok(session)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<StepSession> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads the session at `path`, or a fresh one if the file does not exist.
    pub fn load_or_new(path: impl AsRef<Path>) -> Result<StepSession> {
        let path = path.as_ref();
        if path.exists() {
            Self::load(path)
        } else {
            Ok(StepSession::new())
        }
    }

    /// Writes to a temporary file in the same directory, then renames it over
    /// `path`. Readers see either the old file or the new one.
    pub fn save_atomic(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
        tmp.write_all(&bytes)
            .and_then(|_| tmp.as_file().sync_all())
            .map_err(|e| Error::io(tmp.path(), e))?;
        tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
        Ok(())
    }
}

/// Exclusive advisory lock guarding a session file, held until dropped.
///
/// The lock lives on a sibling `<session>.lock` file because the session
/// itself is replaced by rename on every save.
#[derive(Debug)]
pub struct SessionLock {
    _file: File,
    path: PathBuf,
}

impl SessionLock {
    pub fn acquire(session_path: impl AsRef<Path>) -> Result<SessionLock> {
        let mut name = session_path.as_ref().as_os_str().to_owned();
        name.push(".lock");
        let path = PathBuf::from(name);
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        match file.try_lock() {
            Ok(()) => Ok(SessionLock { _file: file, path }),
            Err(std::fs::TryLockError::WouldBlock) => Err(Error::Session(format!(
                "{} is locked by another process",
                session_path.as_ref().display()
            ))),
            Err(std::fs::TryLockError::Error(e)) => Err(Error::io(&path, e)),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
