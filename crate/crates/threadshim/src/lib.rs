//! User-space building blocks for turning a multi-process daemon into a
//! multi-threaded one.
//!
//! A forked-process architecture leans on kernel facilities that threads of a
//! single process must replace: System V shared memory and semaphores become
//! in-process registries ([`shm`], [`sem`]), process-wide signal handlers gain
//! a per-thread dispatch layer ([`sig`]), globals move into per-thread context
//! blocks ([`globals`]), and process control maps onto thread lifecycle plus a
//! reclaim list for memory owned by dead threads ([`lifecycle`]). Pipes and
//! resource limits keep working through thin OS adaptations ([`os_compat`]).
//!
//! The [`shortlock`] module implements the short lock protecting shared
//! structures, in both its historical wake-flag form and the repaired form,
//! and [`explore`] drives the lock and semaphore state machines through every
//! interleaving of small thread programs to prove the defect and its fix.

use std::cell::Cell;
use std::fmt;

pub mod explore;
pub mod globals;
pub mod lifecycle;
pub mod os_compat;
pub mod sem;
pub mod shm;
pub mod shortlock;
pub mod sig;

/// Small integer identity for one thread of the converted daemon.
///
/// Registries hand these out (see [`lifecycle::Runtime::spawn`]); tests and
/// the explorer assign them directly. The id is process-local and never an OS
/// thread id.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct Tid(pub u32);

impl fmt::Display for Tid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

thread_local! {
    static CURRENT_TID: Cell<Option<Tid>> = const { Cell::new(None) };
}

/// Binds `tid` as the calling thread's identity for owner-checked APIs
/// (signal tables, global contexts). Rebinding is allowed.
pub fn bind_current_tid(tid: Tid) {
    CURRENT_TID.with(|c| c.set(Some(tid)));
}

/// The identity bound to the calling thread, if any.
pub fn current_tid() -> Option<Tid> {
    CURRENT_TID.with(|c| c.get())
}
