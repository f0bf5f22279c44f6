//! OS-facing adaptations: pipe policy and resource limits.
//!
//! Pipes keep working across the conversion because they are plain file
//! descriptors, but two rules change for threads sharing one process: both
//! ends stay open while any thread uses the pair (a stray `close` is refused
//! rather than silently honored), and every pipe runs nonblocking so a full
//! or empty pipe can never stall the whole process, which is now every
//! thread's process.
//!
//! `break_resource_limit` raises per-process limits (notably the open-file
//! cap, 1024 by default) early in `main`. Raising the hard limit needs
//! privilege, which the install grants via a setuid bit; the function drops
//! the effective uid back to the ordinary user on every path, success or
//! failure. The OS is reached through the [`OsAdapter`] trait so the
//! contract, including the privilege drop, is testable unprivileged; the
//! real adapter is opt-in.

use std::collections::HashMap;
use std::fmt;
use std::io;
use std::os::unix::io::RawFd;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipeError {
    #[error("pipe operation would block")]
    WouldBlock,
    #[error("closing a shared pipe end is suppressed")]
    SuppressedClose,
    #[error("os error: {0}")]
    Os(#[from] io::Error),
}

/// Which end of a pipe pair.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PipeEnd {
    Read,
    Write,
}

/// A pipe with both ends owned by the pair, nonblocking by construction.
///
/// One thread may read while another writes; the raw descriptors are
/// thread-safe for that split. Dropping the pair closes both ends: that is
/// the single sanctioned close.
#[derive(Debug)]
pub struct PipePair {
    read_fd: RawFd,
    write_fd: RawFd,
    nonblocking: bool,
    close_suppressed: bool,
}

impl PipePair {
    /// Opens an unnamed pipe with `O_NONBLOCK` already set on both ends.
    pub fn open_unnamed() -> Result<PipePair, PipeError> {
        let mut fds = [0 as RawFd; 2];
        let rc = unsafe { libc::pipe2(fds.as_mut_ptr(), libc::O_NONBLOCK | libc::O_CLOEXEC) };
        if rc != 0 {
            return Err(PipeError::Os(io::Error::last_os_error()));
        }
        Ok(PipePair {
            read_fd: fds[0],
            write_fd: fds[1],
            nonblocking: true,
            close_suppressed: true,
        })
    }

    /// Creates (if needed) and opens a named pipe, nonblocking at open time.
    /// There is no blocking variant: the API forces the flag.
    pub fn open_named(path: &Path) -> Result<PipePair, PipeError> {
        use std::os::unix::ffi::OsStrExt;
        let c_path = std::ffi::CString::new(path.as_os_str().as_bytes())
            .map_err(|_| PipeError::Os(io::Error::from(io::ErrorKind::InvalidInput)))?;
        let rc = unsafe { libc::mkfifo(c_path.as_ptr(), 0o600) };
        if rc != 0 {
            let err = io::Error::last_os_error();
            if err.raw_os_error() != Some(libc::EEXIST) {
                return Err(PipeError::Os(err));
            }
        }
        // The read end must exist before a nonblocking write open succeeds.
        let read_fd = unsafe {
            libc::open(
                c_path.as_ptr(),
                libc::O_RDONLY | libc::O_NONBLOCK | libc::O_CLOEXEC,
            )
        };
        if read_fd < 0 {
            return Err(PipeError::Os(io::Error::last_os_error()));
        }
        let write_fd = unsafe {
            libc::open(
                c_path.as_ptr(),
                libc::O_WRONLY | libc::O_NONBLOCK | libc::O_CLOEXEC,
            )
        };
        if write_fd < 0 {
            let err = io::Error::last_os_error();
            unsafe { libc::close(read_fd) };
            return Err(PipeError::Os(err));
        }
        Ok(PipePair {
            read_fd,
            write_fd,
            nonblocking: true,
            close_suppressed: true,
        })
    }

    pub fn is_nonblocking(&self) -> bool {
        self.nonblocking
    }

    /// Writes without ever blocking: a full pipe reports
    /// [`PipeError::WouldBlock`] instead of stalling the process.
    pub fn write(&self, data: &[u8]) -> Result<usize, PipeError> {
        let n = unsafe {
            libc::write(
                self.write_fd,
                data.as_ptr() as *const libc::c_void,
                data.len(),
            )
        };
        if n < 0 {
            let err = io::Error::last_os_error();
            if err.kind() == io::ErrorKind::WouldBlock {
                return Err(PipeError::WouldBlock);
            }
            return Err(PipeError::Os(err));
        }
        Ok(n as usize)
    }

    /// Reads without ever blocking: an empty pipe reports
    /// [`PipeError::WouldBlock`].
    pub fn read(&self, buf: &mut [u8]) -> Result<usize, PipeError> {
        let n = unsafe {
            libc::read(self.read_fd, buf.as_mut_ptr() as *mut libc::c_void, buf.len())
        };
        if n < 0 {
            let err = io::Error::last_os_error();
            if err.kind() == io::ErrorKind::WouldBlock {
                return Err(PipeError::WouldBlock);
            }
            return Err(PipeError::Os(err));
        }
        Ok(n as usize)
    }

    /// The close the old per-process code used to make. While the pair is
    /// shared between threads it is refused: the descriptors must survive
    /// for the other threads.
    pub fn close_end(&self, _end: PipeEnd) -> Result<(), PipeError> {
        if self.close_suppressed {
            return Err(PipeError::SuppressedClose);
        }
        Ok(())
    }
}

impl Drop for PipePair {
    fn drop(&mut self) {
        unsafe {
            libc::close(self.read_fd);
            libc::close(self.write_fd);
        }
    }
}

/// Resources the limit raiser knows about.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum ResourceKind {
    OpenFiles,
    AddressSpace,
}

impl fmt::Display for ResourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ResourceKind::OpenFiles => "open-files",
            ResourceKind::AddressSpace => "address-space",
        };
        f.write_str(s)
    }
}

/// Default open-file target; a configuration default, not a claim.
pub const DEFAULT_OPEN_FILES_TARGET: u64 = 8192;

/// One requested raise.
#[derive(Clone, Copy, Debug)]
pub struct LimitTarget {
    pub resource: ResourceKind,
    pub soft: u64,
    pub hard: u64,
}

/// Outcome of one raise: old and new soft/hard limits, plus whether the
/// function ended back at the ordinary uid (it always does on success).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RlimitReport {
    pub resource: ResourceKind,
    pub old_soft: u64,
    pub old_hard: u64,
    pub new_soft: u64,
    pub new_hard: u64,
    pub privilege_dropped: bool,
}

impl fmt::Display for RlimitReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: soft {} -> {}, hard {} -> {}, privilege_dropped={}",
            self.resource,
            self.old_soft,
            self.new_soft,
            self.old_hard,
            self.new_hard,
            self.privilege_dropped
        )
    }
}

#[derive(Debug, Error)]
pub enum RlimitError {
    #[error("raising the hard limit requires privilege")]
    PrivilegeDenied,
    #[error("soft limit raised but hard limit refused: {0}")]
    PartialRaise(RlimitReport),
    #[error("os error: {0}")]
    Os(String),
}

/// Minimal slice of the OS the limit raiser needs, mockable for tests.
pub trait OsAdapter {
    fn get_rlimit(&self, resource: ResourceKind) -> Result<(u64, u64), RlimitError>;
    /// Must refuse a hard raise unless the effective uid is root.
    fn set_rlimit(&mut self, resource: ResourceKind, soft: u64, hard: u64)
        -> Result<(), RlimitError>;
    fn effective_uid(&self) -> u32;
    fn set_effective_uid(&mut self, uid: u32) -> Result<(), RlimitError>;
    /// The non-privileged user to end up as.
    fn ordinary_uid(&self) -> u32;
}

/// In-memory adapter with a recorded euid transition history.
pub struct MockAdapter {
    limits: HashMap<ResourceKind, (u64, u64)>,
    euid: u32,
    ordinary: u32,
    euid_history: Vec<u32>,
}

impl MockAdapter {
    /// A process started from a setuid-root binary: euid 0, ordinary user
    /// recorded for the drop.
    pub fn privileged(ordinary: u32) -> Self {
        MockAdapter {
            limits: HashMap::from([(ResourceKind::OpenFiles, (1024, 1024))]),
            euid: 0,
            ordinary,
            euid_history: vec![0],
        }
    }

    /// A plain process: euid equals the ordinary user.
    pub fn unprivileged(uid: u32) -> Self {
        MockAdapter {
            limits: HashMap::from([(ResourceKind::OpenFiles, (1024, 1024))]),
            euid: uid,
            ordinary: uid,
            euid_history: vec![uid],
        }
    }

    pub fn with_limit(mut self, resource: ResourceKind, soft: u64, hard: u64) -> Self {
        self.limits.insert(resource, (soft, hard));
        self
    }

    /// Every euid the process has had, in order.
    pub fn euid_history(&self) -> &[u32] {
        &self.euid_history
    }

    pub fn limit(&self, resource: ResourceKind) -> Option<(u64, u64)> {
        self.limits.get(&resource).copied()
    }
}

impl OsAdapter for MockAdapter {
    fn get_rlimit(&self, resource: ResourceKind) -> Result<(u64, u64), RlimitError> {
        self.limits
            .get(&resource)
            .copied()
            .ok_or_else(|| RlimitError::Os("unknown resource".into()))
    }

    fn set_rlimit(
        &mut self,
        resource: ResourceKind,
        soft: u64,
        hard: u64,
    ) -> Result<(), RlimitError> {
        let (_, old_hard) = self.get_rlimit(resource)?;
        if soft > hard {
            return Err(RlimitError::Os("soft above hard".into()));
        }
        if hard > old_hard && self.euid != 0 {
            return Err(RlimitError::PrivilegeDenied);
        }
        self.limits.insert(resource, (soft, hard));
        Ok(())
    }

    fn effective_uid(&self) -> u32 {
        self.euid
    }

    fn set_effective_uid(&mut self, uid: u32) -> Result<(), RlimitError> {
        self.euid = uid;
        self.euid_history.push(uid);
        Ok(())
    }

    fn ordinary_uid(&self) -> u32 {
        self.ordinary
    }
}

/// Adapter backed by the real kernel. Only useful behind an opt-in flag;
/// hard raises fail without privilege exactly as the mock models.
pub struct RealOsAdapter {
    ordinary: u32,
}

impl Default for RealOsAdapter {
    fn default() -> Self {
        Self::new()
    }
}

impl RealOsAdapter {
    pub fn new() -> Self {
        RealOsAdapter {
            ordinary: unsafe { libc::getuid() },
        }
    }

    fn raw(resource: ResourceKind) -> libc::c_int {
        match resource {
            ResourceKind::OpenFiles => libc::RLIMIT_NOFILE as libc::c_int,
            ResourceKind::AddressSpace => libc::RLIMIT_AS as libc::c_int,
        }
    }
}

impl OsAdapter for RealOsAdapter {
    fn get_rlimit(&self, resource: ResourceKind) -> Result<(u64, u64), RlimitError> {
        let mut lim = libc::rlimit {
            rlim_cur: 0,
            rlim_max: 0,
        };
        let rc = unsafe { libc::getrlimit(Self::raw(resource) as _, &mut lim) };
        if rc != 0 {
            return Err(RlimitError::Os(io::Error::last_os_error().to_string()));
        }
        Ok((lim.rlim_cur, lim.rlim_max))
    }

    fn set_rlimit(
        &mut self,
        resource: ResourceKind,
        soft: u64,
        hard: u64,
    ) -> Result<(), RlimitError> {
        let (_, old_hard) = self.get_rlimit(resource)?;
        let lim = libc::rlimit {
            rlim_cur: soft,
            rlim_max: hard,
        };
        let rc = unsafe { libc::setrlimit(Self::raw(resource) as _, &lim) };
        if rc != 0 {
            let err = io::Error::last_os_error();
            if hard > old_hard && err.raw_os_error() == Some(libc::EPERM) {
                return Err(RlimitError::PrivilegeDenied);
            }
            return Err(RlimitError::Os(err.to_string()));
        }
        Ok(())
    }

    fn effective_uid(&self) -> u32 {
        unsafe { libc::geteuid() }
    }

    fn set_effective_uid(&mut self, uid: u32) -> Result<(), RlimitError> {
        let rc = unsafe { libc::seteuid(uid) };
        if rc != 0 {
            return Err(RlimitError::Os(io::Error::last_os_error().to_string()));
        }
        Ok(())
    }

    fn ordinary_uid(&self) -> u32 {
        self.ordinary
    }
}

/// Raises soft and hard limits toward `targets` and drops the effective uid
/// back to the ordinary user before returning, on every path.
///
/// Targets at or below the current limits are a no-op (old == new in the
/// report). A hard raise without privilege yields
/// [`RlimitError::PrivilegeDenied`] when nothing could be done, or
/// [`RlimitError::PartialRaise`] when the soft limit still moved up within
/// the old hard cap.
pub fn break_resource_limit(
    adapter: &mut dyn OsAdapter,
    targets: &[LimitTarget],
) -> Result<Vec<RlimitReport>, RlimitError> {
    let ordinary = adapter.ordinary_uid();
    let result = raise_all(adapter, targets);
    // The one invariant that must hold on *every* path: privilege is gone.
    if adapter.effective_uid() != ordinary {
        let _ = adapter.set_effective_uid(ordinary);
    }
    let dropped = adapter.effective_uid() == ordinary;
    match result {
        Ok(mut reports) => {
            for r in &mut reports {
                r.privilege_dropped = dropped;
            }
            Ok(reports)
        }
        Err(RlimitError::PartialRaise(mut report)) => {
            report.privilege_dropped = dropped;
            Err(RlimitError::PartialRaise(report))
        }
        Err(e) => Err(e),
    }
}

fn raise_all(
    adapter: &mut dyn OsAdapter,
    targets: &[LimitTarget],
) -> Result<Vec<RlimitReport>, RlimitError> {
    let mut reports = Vec::new();
    for t in targets {
        let (old_soft, old_hard) = adapter.get_rlimit(t.resource)?;
        if t.soft <= old_soft && t.hard <= old_hard {
            reports.push(RlimitReport {
                resource: t.resource,
                old_soft,
                old_hard,
                new_soft: old_soft,
                new_hard: old_hard,
                privilege_dropped: false,
            });
            continue;
        }
        let want_soft = t.soft.max(old_soft);
        let want_hard = t.hard.max(old_hard);
        if want_hard > old_hard && adapter.effective_uid() != 0 {
            // No privilege for the hard raise. Salvage the soft raise if it
            // fits under the existing hard cap.
            if want_soft > old_soft && want_soft.min(old_hard) > old_soft {
                let new_soft = want_soft.min(old_hard);
                adapter.set_rlimit(t.resource, new_soft, old_hard)?;
                return Err(RlimitError::PartialRaise(RlimitReport {
                    resource: t.resource,
                    old_soft,
                    old_hard,
                    new_soft,
                    new_hard: old_hard,
                    privilege_dropped: false,
                }));
            }
            return Err(RlimitError::PrivilegeDenied);
        }
        adapter.set_rlimit(t.resource, want_soft, want_hard)?;
        reports.push(RlimitReport {
            resource: t.resource,
            old_soft,
            old_hard,
            new_soft: want_soft,
            new_hard: want_hard,
            privilege_dropped: false,
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicBool, Ordering};
    use std::sync::Arc;

    #[test]
    fn unnamed_pipe_round_trips() {
        let pipe = PipePair::open_unnamed().unwrap();
        assert!(pipe.is_nonblocking());
        assert_eq!(pipe.write(b"x").unwrap(), 1);
        let mut buf = [0u8; 8];
        assert_eq!(pipe.read(&mut buf).unwrap(), 1);
        assert_eq!(buf[0], b'x');
    }

    #[test]
    fn full_pipe_reports_would_block_instead_of_hanging() {
        let pipe = PipePair::open_unnamed().unwrap();
        let chunk = [0u8; 4096];
        loop {
            match pipe.write(&chunk) {
                Ok(_) => continue,
                Err(PipeError::WouldBlock) => break,
                Err(e) => panic!("unexpected error: {e}"),
            }
        }
    }

    #[test]
    fn empty_pipe_read_would_block() {
        let pipe = PipePair::open_unnamed().unwrap();
        let mut buf = [0u8; 8];
        assert!(matches!(pipe.read(&mut buf), Err(PipeError::WouldBlock)));
    }

    #[test]
    fn close_is_suppressed_while_shared() {
        let pipe = PipePair::open_unnamed().unwrap();
        assert!(matches!(
            pipe.close_end(PipeEnd::Read),
            Err(PipeError::SuppressedClose)
        ));
        assert!(matches!(
            pipe.close_end(PipeEnd::Write),
            Err(PipeError::SuppressedClose)
        ));
    }

    #[test]
    fn named_pipe_round_trips() {
        let dir = std::env::temp_dir().join(format!("shim-fifo-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("test.fifo");
        let pipe = PipePair::open_named(&path).unwrap();
        pipe.write(b"named").unwrap();
        let mut buf = [0u8; 16];
        assert_eq!(pipe.read(&mut buf).unwrap(), 5);
        assert_eq!(&buf[..5], b"named");
        drop(pipe);
        let _ = std::fs::remove_file(&path);
        let _ = std::fs::remove_dir(&dir);
    }

    #[test]
    fn named_pipe_in_missing_directory_is_os_error() {
        let path = Path::new("/nonexistent-dir-for-shim/test.fifo");
        assert!(matches!(
            PipePair::open_named(path),
            Err(PipeError::Os(_))
        ));
    }

    #[test]
    fn pipe_works_across_threads() {
        let pipe = Arc::new(PipePair::open_unnamed().unwrap());
        let done = Arc::new(AtomicBool::new(false));
        let p = Arc::clone(&pipe);
        let d = Arc::clone(&done);
        let reader = std::thread::spawn(move || {
            let mut got = 0usize;
            let mut buf = [0u8; 64];
            while got < 100 {
                match p.read(&mut buf) {
                    Ok(n) => got += n,
                    Err(PipeError::WouldBlock) => std::thread::yield_now(),
                    Err(e) => panic!("{e}"),
                }
            }
            d.store(true, Ordering::SeqCst);
            got
        });
        let mut sent = 0usize;
        while sent < 100 {
            match pipe.write(&[7u8; 10]) {
                Ok(n) => sent += n,
                Err(PipeError::WouldBlock) => std::thread::yield_now(),
                Err(e) => panic!("{e}"),
            }
        }
        assert_eq!(reader.join().unwrap(), 100);
        assert!(done.load(Ordering::SeqCst));
    }

    #[test]
    fn privileged_raise_reaches_targets_and_drops_privilege() {
        let mut adapter = MockAdapter::privileged(1000);
        let reports = break_resource_limit(
            &mut adapter,
            &[LimitTarget {
                resource: ResourceKind::OpenFiles,
                soft: 8192,
                hard: 8192,
            }],
        )
        .unwrap();
        assert_eq!(reports.len(), 1);
        let r = reports[0];
        assert_eq!((r.old_soft, r.old_hard), (1024, 1024));
        assert_eq!((r.new_soft, r.new_hard), (8192, 8192));
        assert!(r.privilege_dropped);
        assert_eq!(adapter.effective_uid(), 1000);
        assert_eq!(adapter.euid_history(), &[0, 1000]);
    }

    #[test]
    fn unprivileged_hard_raise_is_denied_with_euid_untouched() {
        let mut adapter = MockAdapter::unprivileged(1000);
        let err = break_resource_limit(
            &mut adapter,
            &[LimitTarget {
                resource: ResourceKind::OpenFiles,
                soft: 8192,
                hard: 8192,
            }],
        )
        .unwrap_err();
        assert!(matches!(err, RlimitError::PrivilegeDenied));
        assert_eq!(adapter.euid_history(), &[1000]);
        assert_eq!(adapter.limit(ResourceKind::OpenFiles), Some((1024, 1024)));
    }

    #[test]
    fn partial_raise_moves_soft_within_old_hard() {
        let mut adapter =
            MockAdapter::unprivileged(1000).with_limit(ResourceKind::OpenFiles, 1024, 4096);
        let err = break_resource_limit(
            &mut adapter,
            &[LimitTarget {
                resource: ResourceKind::OpenFiles,
                soft: 8192,
                hard: 8192,
            }],
        )
        .unwrap_err();
        match err {
            RlimitError::PartialRaise(report) => {
                assert_eq!(report.new_soft, 4096);
                assert_eq!(report.new_hard, 4096);
                assert!(report.privilege_dropped);
            }
            other => panic!("expected partial raise, got {other}"),
        }
        assert_eq!(adapter.limit(ResourceKind::OpenFiles), Some((4096, 4096)));
    }

    #[test]
    fn targets_below_current_are_a_noop() {
        let mut adapter =
            MockAdapter::privileged(1000).with_limit(ResourceKind::OpenFiles, 9000, 9000);
        let reports = break_resource_limit(
            &mut adapter,
            &[LimitTarget {
                resource: ResourceKind::OpenFiles,
                soft: 8192,
                hard: 8192,
            }],
        )
        .unwrap();
        let r = reports[0];
        assert_eq!((r.old_soft, r.old_hard), (r.new_soft, r.new_hard));
        // Privilege still dropped on the way out.
        assert_eq!(adapter.effective_uid(), 1000);
    }

    #[test]
    fn real_adapter_reads_limits() {
        let adapter = RealOsAdapter::new();
        let (soft, hard) = adapter.get_rlimit(ResourceKind::OpenFiles).unwrap();
        assert!(soft > 0);
        assert!(hard >= soft);
    }
}
