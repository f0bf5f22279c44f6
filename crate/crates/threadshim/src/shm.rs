//! System V shared-memory emulation in user space.
//!
//! Threads of one process share segments through a [`ShmRegistry`] instead of
//! kernel memory; the upper layers keep calling get/attach/detach/control as
//! before. The registry keeps the SysV reference-count rule: a segment marked
//! for removal is released exactly when its attach count drops to zero, and
//! the release frees the backing bytes itself rather than leaving that to a
//! kernel.
//!
//! Byte access through attachments is deliberately unserialized; callers
//! guard shared data with [`crate::sem`] or [`crate::shortlock`].

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicU8, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use thiserror::Error;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum ShmError {
    #[error("no segment under that key or id")]
    NotFound,
    #[error("segment exists and exclusive creation was requested")]
    AlreadyExists,
    #[error("existing segment is smaller than the requested size")]
    SizeMismatch,
    #[error("segment size must be positive")]
    InvalidSize,
    #[error("segment has been removed")]
    Removed,
    #[error("attachment was already detached")]
    DoubleDetach,
    #[error("access beyond segment bounds")]
    OutOfBounds,
}

/// IPC key naming a segment, as passed to the `shmget` analogue.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct ShmKey(pub u64);

/// Registry-unique segment id. Ids grow monotonically and are never recycled
/// within a registry lifetime, so stale ids stay detectably stale.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub struct SegmentId(u64);

impl SegmentId {
    pub fn raw(self) -> u64 {
        self.0
    }
}

/// Snapshot returned by [`ShmRegistry::stat`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShmStat {
    pub key: ShmKey,
    pub size: usize,
    pub attach_count: usize,
    pub removal_pending: bool,
}

/// Byte region backing one segment. All attachments alias the same bytes;
/// per-byte atomics keep unsynchronized access well-defined while leaving
/// logical synchronization to the caller.
#[derive(Debug)]
struct Storage {
    bytes: Box<[AtomicU8]>,
    live: Arc<AtomicUsize>,
}

impl Storage {
    fn new(size: usize, live: Arc<AtomicUsize>) -> Arc<Self> {
        live.fetch_add(1, Ordering::SeqCst);
        let bytes = (0..size).map(|_| AtomicU8::new(0)).collect();
        Arc::new(Storage { bytes, live })
    }
}

impl Drop for Storage {
    fn drop(&mut self) {
        self.live.fetch_sub(1, Ordering::SeqCst);
    }
}

/// Read/write handle to a segment's bytes, the `shmat` analogue.
/// Detach through [`ShmRegistry::detach`]; a detached handle keeps its id but
/// loses byte access.
#[derive(Debug)]
pub struct ShmAttachment {
    attach_id: u64,
    segment: SegmentId,
    size: usize,
    storage: Option<Arc<Storage>>,
}

impl ShmAttachment {
    pub fn segment_id(&self) -> SegmentId {
        self.segment
    }

    pub fn attach_id(&self) -> u64 {
        self.attach_id
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn is_detached(&self) -> bool {
        self.storage.is_none()
    }

    fn bytes(&self) -> Result<&[AtomicU8], ShmError> {
        self.storage
            .as_ref()
            .map(|s| &s.bytes[..])
            .ok_or(ShmError::DoubleDetach)
    }

    pub fn read(&self, offset: usize, buf: &mut [u8]) -> Result<(), ShmError> {
        let bytes = self.bytes()?;
        let end = offset.checked_add(buf.len()).ok_or(ShmError::OutOfBounds)?;
        if end > bytes.len() {
            return Err(ShmError::OutOfBounds);
        }
        for (i, out) in buf.iter_mut().enumerate() {
            *out = bytes[offset + i].load(Ordering::Relaxed);
        }
        Ok(())
    }

    pub fn write(&self, offset: usize, data: &[u8]) -> Result<(), ShmError> {
        let bytes = self.bytes()?;
        let end = offset.checked_add(data.len()).ok_or(ShmError::OutOfBounds)?;
        if end > bytes.len() {
            return Err(ShmError::OutOfBounds);
        }
        for (i, b) in data.iter().enumerate() {
            bytes[offset + i].store(*b, Ordering::Relaxed);
        }
        Ok(())
    }

    pub fn read_u64(&self, offset: usize) -> Result<u64, ShmError> {
        let mut buf = [0u8; 8];
        self.read(offset, &mut buf)?;
        Ok(u64::from_le_bytes(buf))
    }

    pub fn write_u64(&self, offset: usize, value: u64) -> Result<(), ShmError> {
        self.write(offset, &value.to_le_bytes())
    }
}

/// Entry recorded at the moment a segment's storage is released, used to
/// check that releases happen exactly at `removal_pending && attach_count == 0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReleaseRecord {
    pub segment: SegmentId,
    pub removal_pending: bool,
    pub attach_count: usize,
}

struct Segment {
    key: ShmKey,
    size: usize,
    attach_count: usize,
    removal_pending: bool,
    storage: Arc<Storage>,
}

#[derive(Default)]
struct Inner {
    next_segment: u64,
    next_attach: u64,
    by_key: HashMap<u64, SegmentId>,
    segments: HashMap<u64, Segment>,
    release_log: Vec<ReleaseRecord>,
}

/// In-process registry emulating the kernel's shared-memory table.
///
/// Structural operations are serialized internally; any thread may call any
/// operation concurrently.
pub struct ShmRegistry {
    inner: Mutex<Inner>,
    live_storages: Arc<AtomicUsize>,
}

impl Default for ShmRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl ShmRegistry {
    pub fn new() -> Self {
        ShmRegistry {
            inner: Mutex::new(Inner::default()),
            live_storages: Arc::new(AtomicUsize::new(0)),
        }
    }

    /// `shmget` analogue. Looks a segment up by key, optionally creating it.
    ///
    /// Mirrors the kernel contract: a request larger than an existing segment
    /// fails with [`ShmError::SizeMismatch`] whether or not `create` is set,
    /// and `create && exclusive` on an existing key fails with
    /// [`ShmError::AlreadyExists`]. Fresh segments are zero-filled.
    pub fn get(
        &self,
        key: ShmKey,
        size: usize,
        create: bool,
        exclusive: bool,
    ) -> Result<SegmentId, ShmError> {
        let mut inner = self.inner.lock().unwrap();
        if let Some(&id) = inner.by_key.get(&key.0) {
            if create && exclusive {
                return Err(ShmError::AlreadyExists);
            }
            let seg = &inner.segments[&id.0];
            if size > seg.size {
                return Err(ShmError::SizeMismatch);
            }
            return Ok(id);
        }
        if !create {
            return Err(ShmError::NotFound);
        }
        if size == 0 {
            return Err(ShmError::InvalidSize);
        }
        let id = SegmentId(inner.next_segment);
        inner.next_segment += 1;
        let storage = Storage::new(size, Arc::clone(&self.live_storages));
        inner.segments.insert(
            id.0,
            Segment {
                key,
                size,
                attach_count: 0,
                removal_pending: false,
                storage,
            },
        );
        inner.by_key.insert(key.0, id);
        Ok(id)
    }

    /// `shmat` analogue: bumps the attach count and returns an aliasing
    /// handle. Attaching to a removal-pending segment is rejected.
    pub fn attach(&self, id: SegmentId) -> Result<ShmAttachment, ShmError> {
        let mut inner = self.inner.lock().unwrap();
        if !inner.segments.contains_key(&id.0) {
            // Every id below the allocation cursor existed once.
            return if id.0 < inner.next_segment {
                Err(ShmError::Removed)
            } else {
                Err(ShmError::NotFound)
            };
        }
        let attach_id = inner.next_attach;
        inner.next_attach += 1;
        let seg = inner.segments.get_mut(&id.0).unwrap();
        if seg.removal_pending {
            return Err(ShmError::Removed);
        }
        seg.attach_count += 1;
        Ok(ShmAttachment {
            attach_id,
            segment: id,
            size: seg.size,
            storage: Some(Arc::clone(&seg.storage)),
        })
    }

    /// `shmdt` analogue. Drops the handle's byte access, decrements the
    /// attach count and performs the deferred release when a removal-pending
    /// segment loses its last attachment.
    pub fn detach(&self, attachment: &mut ShmAttachment) -> Result<(), ShmError> {
        let storage = attachment.storage.take().ok_or(ShmError::DoubleDetach)?;
        drop(storage);
        let mut inner = self.inner.lock().unwrap();
        let seg = inner
            .segments
            .get_mut(&attachment.segment.0)
            .expect("segment outlives its attachments");
        seg.attach_count -= 1;
        if seg.removal_pending && seg.attach_count == 0 {
            Self::release_segment(&mut inner, attachment.segment);
        }
        Ok(())
    }

    /// `shmctl(IPC_STAT)` analogue.
    pub fn stat(&self, id: SegmentId) -> Result<ShmStat, ShmError> {
        let inner = self.inner.lock().unwrap();
        let seg = inner.segments.get(&id.0).ok_or(ShmError::NotFound)?;
        Ok(ShmStat {
            key: seg.key,
            size: seg.size,
            attach_count: seg.attach_count,
            removal_pending: seg.removal_pending,
        })
    }

    /// `shmctl(IPC_RMID)` analogue: unbinds the key immediately, marks the
    /// segment for removal and releases it at once if nothing is attached.
    pub fn remove(&self, id: SegmentId) -> Result<(), ShmError> {
        let mut inner = self.inner.lock().unwrap();
        let seg = inner.segments.get_mut(&id.0).ok_or(ShmError::NotFound)?;
        seg.removal_pending = true;
        let key = seg.key;
        let empty = seg.attach_count == 0;
        if inner.by_key.get(&key.0) == Some(&id) {
            inner.by_key.remove(&key.0);
        }
        if empty {
            Self::release_segment(&mut inner, id);
        }
        Ok(())
    }

    fn release_segment(inner: &mut Inner, id: SegmentId) {
        let seg = inner.segments.remove(&id.0).expect("segment present");
        inner.release_log.push(ReleaseRecord {
            segment: id,
            removal_pending: seg.removal_pending,
            attach_count: seg.attach_count,
        });
        drop(seg);
    }

    /// Number of storage blocks still alive, i.e. the registry leak counter.
    pub fn leak_count(&self) -> usize {
        self.live_storages.load(Ordering::SeqCst)
    }

    /// Copy of the release log, one record per released segment.
    pub fn release_log(&self) -> Vec<ReleaseRecord> {
        self.inner.lock().unwrap().release_log.clone()
    }

    pub fn segment_count(&self) -> usize {
        self.inner.lock().unwrap().segments.len()
    }

    /// Debug dump: one line per live segment,
    /// `id key size attach_count removal_pending`.
    pub fn dump(&self) -> String {
        let inner = self.inner.lock().unwrap();
        let mut ids: Vec<&u64> = inner.segments.keys().collect();
        ids.sort();
        let mut out = String::new();
        for id in ids {
            let seg = &inner.segments[id];
            writeln!(
                out,
                "{} {} {} {} {}",
                id, seg.key.0, seg.size, seg.attach_count, seg.removal_pending
            )
            .unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const KEY: ShmKey = ShmKey(100);

    #[test]
    fn create_then_lookup_returns_same_id() {
        let reg = ShmRegistry::new();
        let id = reg.get(KEY, 4096, true, false).unwrap();
        assert_eq!(reg.stat(id).unwrap().attach_count, 0);
        let again = reg.get(KEY, 4096, false, false).unwrap();
        assert_eq!(id, again);
    }

    #[test]
    fn lookup_larger_than_segment_is_size_mismatch() {
        let reg = ShmRegistry::new();
        reg.get(KEY, 4096, true, false).unwrap();
        assert_eq!(
            reg.get(KEY, 8192, false, false),
            Err(ShmError::SizeMismatch)
        );
        // Also on the create path, as the kernel does it.
        assert_eq!(reg.get(KEY, 8192, true, false), Err(ShmError::SizeMismatch));
        // Smaller requests succeed.
        assert!(reg.get(KEY, 1024, false, false).is_ok());
    }

    #[test]
    fn exclusive_create_on_existing_key_fails() {
        let reg = ShmRegistry::new();
        reg.get(KEY, 4096, true, false).unwrap();
        assert_eq!(reg.get(KEY, 4096, true, true), Err(ShmError::AlreadyExists));
    }

    #[test]
    fn missing_key_without_create_is_not_found() {
        let reg = ShmRegistry::new();
        assert_eq!(reg.get(KEY, 4096, false, false), Err(ShmError::NotFound));
    }

    #[test]
    fn zero_size_create_is_invalid() {
        let reg = ShmRegistry::new();
        assert_eq!(reg.get(KEY, 0, true, false), Err(ShmError::InvalidSize));
    }

    #[test]
    fn attachments_alias_the_same_bytes() {
        let reg = ShmRegistry::new();
        let id = reg.get(KEY, 64, true, false).unwrap();
        let mut a = reg.attach(id).unwrap();
        let mut b = reg.attach(id).unwrap();
        assert_eq!(reg.stat(id).unwrap().attach_count, 2);
        a.write(10, b"hello").unwrap();
        let mut buf = [0u8; 5];
        b.read(10, &mut buf).unwrap();
        assert_eq!(&buf, b"hello");
        reg.detach(&mut a).unwrap();
        assert_eq!(reg.stat(id).unwrap().attach_count, 1);
        reg.detach(&mut b).unwrap();
    }

    #[test]
    fn fresh_segment_is_zero_filled() {
        let reg = ShmRegistry::new();
        let id = reg.get(KEY, 32, true, false).unwrap();
        let att = reg.attach(id).unwrap();
        let mut buf = [0xffu8; 32];
        att.read(0, &mut buf).unwrap();
        assert!(buf.iter().all(|&b| b == 0));
    }

    #[test]
    fn attach_unknown_id_is_not_found() {
        let reg = ShmRegistry::new();
        assert_eq!(reg.attach(SegmentId(42)).unwrap_err(), ShmError::NotFound);
    }

    #[test]
    fn attach_after_remove_is_rejected() {
        let reg = ShmRegistry::new();
        let id = reg.get(KEY, 64, true, false).unwrap();
        let mut att = reg.attach(id).unwrap();
        reg.remove(id).unwrap();
        // Attachment outstanding, segment pending: further attaches refused.
        assert_eq!(reg.attach(id).unwrap_err(), ShmError::Removed);
        reg.detach(&mut att).unwrap();
        // Fully released: the id now reads as retired.
        assert_eq!(reg.attach(id).unwrap_err(), ShmError::Removed);
    }

    #[test]
    fn deferred_release_on_last_detach() {
        let reg = ShmRegistry::new();
        let id = reg.get(KEY, 64, true, false).unwrap();
        let mut att = reg.attach(id).unwrap();
        reg.remove(id).unwrap();
        assert_eq!(reg.leak_count(), 1);
        // Key is free again immediately after remove.
        assert_eq!(reg.get(KEY, 64, false, false), Err(ShmError::NotFound));
        reg.detach(&mut att).unwrap();
        assert_eq!(reg.leak_count(), 0);
        assert_eq!(reg.segment_count(), 0);
        let log = reg.release_log();
        assert_eq!(log.len(), 1);
        assert!(log[0].removal_pending);
        assert_eq!(log[0].attach_count, 0);
    }

    #[test]
    fn detach_with_remaining_attachment_keeps_segment() {
        let reg = ShmRegistry::new();
        let id = reg.get(KEY, 64, true, false).unwrap();
        let mut a = reg.attach(id).unwrap();
        let b = reg.attach(id).unwrap();
        reg.detach(&mut a).unwrap();
        assert_eq!(reg.stat(id).unwrap().attach_count, 1);
        assert_eq!(reg.leak_count(), 1);
        drop(b);
    }

    #[test]
    fn double_detach_is_an_error() {
        let reg = ShmRegistry::new();
        let id = reg.get(KEY, 64, true, false).unwrap();
        let mut att = reg.attach(id).unwrap();
        reg.detach(&mut att).unwrap();
        assert_eq!(reg.detach(&mut att).unwrap_err(), ShmError::DoubleDetach);
    }

    #[test]
    fn remove_with_zero_attachments_releases_immediately() {
        let reg = ShmRegistry::new();
        let id = reg.get(KEY, 64, true, false).unwrap();
        reg.remove(id).unwrap();
        assert_eq!(reg.leak_count(), 0);
        assert_eq!(reg.stat(id), Err(ShmError::NotFound));
    }

    #[test]
    fn stat_reflects_creation_parameters() {
        let reg = ShmRegistry::new();
        let id = reg.get(KEY, 4096, true, false).unwrap();
        let st = reg.stat(id).unwrap();
        assert_eq!(st.size, 4096);
        assert_eq!(st.attach_count, 0);
        assert!(!st.removal_pending);
        assert_eq!(st.key, KEY);
    }

    #[test]
    fn out_of_bounds_access_is_detected() {
        let reg = ShmRegistry::new();
        let id = reg.get(KEY, 16, true, false).unwrap();
        let att = reg.attach(id).unwrap();
        assert_eq!(att.write(12, &[0u8; 8]).unwrap_err(), ShmError::OutOfBounds);
        let mut buf = [0u8; 4];
        assert_eq!(att.read(16, &mut buf).unwrap_err(), ShmError::OutOfBounds);
        att.write(8, &[1u8; 8]).unwrap();
    }

    #[test]
    fn dump_lists_live_segments() {
        let reg = ShmRegistry::new();
        let a = reg.get(ShmKey(1), 32, true, false).unwrap();
        let _att = reg.attach(a).unwrap();
        reg.get(ShmKey(2), 64, true, false).unwrap();
        let dump = reg.dump();
        let lines: Vec<&str> = dump.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], "0 1 32 1 false");
        assert_eq!(lines[1], "1 2 64 0 false");
    }

    proptest! {
        // Aliasing: any byte written through one handle reads back through
        // the other.
        #[test]
        fn aliasing_across_handles(writes in proptest::collection::vec((0usize..256, any::<u8>()), 1..64)) {
            let reg = ShmRegistry::new();
            let id = reg.get(KEY, 256, true, false).unwrap();
            let a = reg.attach(id).unwrap();
            let b = reg.attach(id).unwrap();
            let mut shadow = [0u8; 256];
            for (off, byte) in writes {
                a.write(off, &[byte]).unwrap();
                shadow[off] = byte;
            }
            let mut buf = [0u8; 256];
            b.read(0, &mut buf).unwrap();
            prop_assert_eq!(buf.as_slice(), shadow.as_slice());
        }

        // Leak freedom: any well-formed sequence that removes every segment
        // and detaches every handle ends with an empty registry.
        #[test]
        fn leak_counter_returns_to_zero(seed: u64) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let reg = ShmRegistry::new();
            let mut atts = Vec::new();
            let mut ids = Vec::new();
            for _ in 0..rng.random_range(1..20) {
                let key = ShmKey(rng.random_range(0..5));
                if let Ok(id) = reg.get(key, 64, true, false) {
                    ids.push(id);
                    for _ in 0..rng.random_range(0..3) {
                        if let Ok(a) = reg.attach(id) {
                            atts.push(a);
                        }
                    }
                }
            }
            for id in ids {
                let _ = reg.remove(id);
            }
            for mut a in atts {
                let _ = reg.detach(&mut a);
            }
            prop_assert_eq!(reg.leak_count(), 0);
            prop_assert_eq!(reg.segment_count(), 0);
            for rec in reg.release_log() {
                prop_assert!(rec.removal_pending);
                prop_assert_eq!(rec.attach_count, 0);
            }
        }
    }
}
