//! Per-thread global variables.
//!
//! Under processes every global was private to its process; threads share
//! them, so every former global (and file-scoped static) moves into one big
//! registered layout, and each thread owns a heap-allocated block with one
//! cell per slot. A read or write resolves in three steps: the thread-private
//! pointer is fetched, the pointer locates the block in the heap, and the
//! slot index picks the cell. Slot handles replace the C-macro sugar; the
//! addressing is the same.
//!
//! This module is for state that must stay thread-private. Genuinely shared
//! state belongs in [`crate::shm`]: a shared request counter lives in a
//! shared segment guarded by a lock, while a per-thread `shutdown_requested`
//! flag lives here.
//!
//! File-scoped statics are qualified as `"<filename>::<name>"` so two files'
//! statics of the same name get distinct slots; see [`qualify`].

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::RwLock;

use thiserror::Error;

use crate::{current_tid, Tid};

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum GlobalsError {
    #[error("layout is sealed; no further definitions")]
    Sealed,
    #[error("a global with that qualified name already exists")]
    DuplicateName,
    #[error("layout is already sealed")]
    AlreadySealed,
    #[error("layout must be sealed before contexts attach")]
    NotSealed,
    #[error("thread already has a context for this layout")]
    AlreadyAttached,
    #[error("calling thread has no context for this layout")]
    NoContext,
    #[error("value type does not match the slot's type")]
    TypeMismatch,
    #[error("contexts attach to the calling thread only")]
    WrongThread,
}

/// Value stored in a global slot.
#[derive(Clone, Debug, PartialEq)]
pub enum GValue {
    Int(i64),
    Bool(bool),
    Float(f64),
    Text(String),
}

impl GValue {
    pub fn type_tag(&self) -> GType {
        match self {
            GValue::Int(_) => GType::Int,
            GValue::Bool(_) => GType::Bool,
            GValue::Float(_) => GType::Float,
            GValue::Text(_) => GType::Text,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            GValue::Int(v) => Some(*v),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GType {
    Int,
    Bool,
    Float,
    Text,
}

/// Builds the qualified name of a file-scoped static:
/// `qualify("postmaster.c", "Shutdown")` is `"postmaster.c::Shutdown"`.
pub fn qualify(file: &str, name: &str) -> String {
    format!("{file}::{name}")
}

/// Process-unique layout identity, so slot handles can't cross layouts.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct LayoutId(u64);

static NEXT_LAYOUT: AtomicU64 = AtomicU64::new(0);

/// Handle to one slot of a sealed layout: the macro-equivalent accessor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlobalSlot {
    layout: LayoutId,
    index: usize,
    tag: GType,
}

impl GlobalSlot {
    pub fn index(&self) -> usize {
        self.index
    }

    pub fn type_tag(&self) -> GType {
        self.tag
    }
}

struct SlotDef {
    name: String,
    default: GValue,
}

struct LayoutInner {
    slots: Vec<SlotDef>,
    by_name: HashMap<String, usize>,
    sealed: bool,
}

/// The registered layout of all former globals: an ordered list of
/// (qualified name, default), sealed before any thread starts.
pub struct GlobalLayout {
    id: LayoutId,
    inner: RwLock<LayoutInner>,
}

impl Default for GlobalLayout {
    fn default() -> Self {
        Self::new()
    }
}

impl GlobalLayout {
    pub fn new() -> Self {
        GlobalLayout {
            id: LayoutId(NEXT_LAYOUT.fetch_add(1, Ordering::SeqCst)),
            inner: RwLock::new(LayoutInner {
                slots: Vec::new(),
                by_name: HashMap::new(),
                sealed: false,
            }),
        }
    }

    pub fn id(&self) -> LayoutId {
        self.id
    }

    /// Appends one global to the layout. Slot indices are dense and depend
    /// only on definition order.
    pub fn define(&self, qualified_name: &str, default: GValue) -> Result<GlobalSlot, GlobalsError> {
        let mut inner = self.inner.write().unwrap();
        if inner.sealed {
            return Err(GlobalsError::Sealed);
        }
        if inner.by_name.contains_key(qualified_name) {
            return Err(GlobalsError::DuplicateName);
        }
        let index = inner.slots.len();
        let tag = default.type_tag();
        inner.by_name.insert(qualified_name.to_string(), index);
        inner.slots.push(SlotDef {
            name: qualified_name.to_string(),
            default,
        });
        Ok(GlobalSlot {
            layout: self.id,
            index,
            tag,
        })
    }

    /// Freezes the layout; contexts may attach afterwards.
    pub fn seal(&self) -> Result<(), GlobalsError> {
        let mut inner = self.inner.write().unwrap();
        if inner.sealed {
            return Err(GlobalsError::AlreadySealed);
        }
        inner.sealed = true;
        Ok(())
    }

    pub fn is_sealed(&self) -> bool {
        self.inner.read().unwrap().sealed
    }

    pub fn slot_count(&self) -> usize {
        self.inner.read().unwrap().slots.len()
    }

    /// Looks a slot handle up by qualified name on a sealed layout.
    pub fn slot(&self, qualified_name: &str) -> Option<GlobalSlot> {
        let inner = self.inner.read().unwrap();
        if !inner.sealed {
            return None;
        }
        let &index = inner.by_name.get(qualified_name)?;
        Some(GlobalSlot {
            layout: self.id,
            index,
            tag: inner.slots[index].default.type_tag(),
        })
    }

    fn defaults(&self) -> Vec<GValue> {
        let inner = self.inner.read().unwrap();
        inner.slots.iter().map(|s| s.default.clone()).collect()
    }

    /// Layout dump for migration notes: one line per slot,
    /// `index qualified_name default`.
    pub fn dump(&self) -> String {
        let inner = self.inner.read().unwrap();
        let mut out = String::new();
        for (i, slot) in inner.slots.iter().enumerate() {
            writeln!(out, "{} {} {:?}", i, slot.name, slot.default).unwrap();
        }
        out
    }
}

/// One thread's heap block: a cell per slot, reached via the thread-private
/// pointer. Returned to the reclaim list on thread exit.
#[derive(Debug)]
pub struct ContextBlock {
    pub layout: LayoutId,
    pub owner: Tid,
    cells: Vec<GValue>,
}

impl ContextBlock {
    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }
}

thread_local! {
    // Step 1 of the addressing: the thread-private pointer to this thread's
    // blocks, one per layout.
    static CONTEXTS: RefCell<HashMap<LayoutId, ContextBlock>> = RefCell::new(HashMap::new());
}

/// Creates the calling thread's context for a sealed layout: a fresh block
/// with every cell at its default, reachable only from this thread.
pub fn context_attach(layout: &GlobalLayout, tid: Tid) -> Result<(), GlobalsError> {
    if current_tid() != Some(tid) {
        return Err(GlobalsError::WrongThread);
    }
    if !layout.is_sealed() {
        return Err(GlobalsError::NotSealed);
    }
    CONTEXTS.with(|c| {
        let mut map = c.borrow_mut();
        if map.contains_key(&layout.id) {
            return Err(GlobalsError::AlreadyAttached);
        }
        map.insert(
            layout.id,
            ContextBlock {
                layout: layout.id,
                owner: tid,
                cells: layout.defaults(),
            },
        );
        Ok(())
    })
}

pub fn has_context(layout: &GlobalLayout) -> bool {
    CONTEXTS.with(|c| c.borrow().contains_key(&layout.id))
}

/// Reads a slot of the calling thread's block: thread-private pointer ->
/// block -> cell.
pub fn get(slot: GlobalSlot) -> Result<GValue, GlobalsError> {
    CONTEXTS.with(|c| {
        let map = c.borrow();
        let block = map.get(&slot.layout).ok_or(GlobalsError::NoContext)?;
        Ok(block.cells[slot.index].clone())
    })
}

/// Writes a slot of the calling thread's block only; other threads' cells
/// are untouched by construction.
pub fn set(slot: GlobalSlot, value: GValue) -> Result<(), GlobalsError> {
    if value.type_tag() != slot.tag {
        return Err(GlobalsError::TypeMismatch);
    }
    CONTEXTS.with(|c| {
        let mut map = c.borrow_mut();
        let block = map.get_mut(&slot.layout).ok_or(GlobalsError::NoContext)?;
        block.cells[slot.index] = value;
        Ok(())
    })
}

/// Convenience accessors for integer slots.
pub fn get_int(slot: GlobalSlot) -> Result<i64, GlobalsError> {
    get(slot)?.as_int().ok_or(GlobalsError::TypeMismatch)
}

pub fn set_int(slot: GlobalSlot, value: i64) -> Result<(), GlobalsError> {
    set(slot, GValue::Int(value))
}

/// Detaches every context of the calling thread, handing the blocks back for
/// reclaim. Called on the thread-exit path.
pub fn take_current_contexts() -> Vec<ContextBlock> {
    CONTEXTS.with(|c| c.borrow_mut().drain().map(|(_, b)| b).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bind_current_tid;

    #[test]
    fn define_assigns_dense_indices_in_order() {
        let layout = GlobalLayout::new();
        let a = layout
            .define(&qualify("postmaster.c", "Shutdown"), GValue::Int(0))
            .unwrap();
        let b = layout.define("Debugfile", GValue::Int(-1)).unwrap();
        assert_eq!(a.index(), 0);
        assert_eq!(b.index(), 1);
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let layout = GlobalLayout::new();
        layout.define("x", GValue::Int(0)).unwrap();
        assert_eq!(
            layout.define("x", GValue::Int(1)).unwrap_err(),
            GlobalsError::DuplicateName
        );
    }

    #[test]
    fn same_static_name_in_two_files_gets_two_slots() {
        let layout = GlobalLayout::new();
        let a = layout.define(&qualify("a.c", "x"), GValue::Int(0)).unwrap();
        let b = layout.define(&qualify("b.c", "x"), GValue::Int(0)).unwrap();
        assert_ne!(a.index(), b.index());
    }

    #[test]
    fn seal_gates_definition_and_attachment() {
        let layout = GlobalLayout::new();
        layout.define("x", GValue::Int(0)).unwrap();
        layout.seal().unwrap();
        assert_eq!(layout.seal().unwrap_err(), GlobalsError::AlreadySealed);
        assert_eq!(
            layout.define("y", GValue::Int(0)).unwrap_err(),
            GlobalsError::Sealed
        );
    }

    #[test]
    fn attach_requires_sealed_layout() {
        let layout = GlobalLayout::new();
        bind_current_tid(Tid(0));
        assert_eq!(
            context_attach(&layout, Tid(0)).unwrap_err(),
            GlobalsError::NotSealed
        );
    }

    #[test]
    fn attach_twice_fails() {
        let layout = GlobalLayout::new();
        layout.seal().unwrap();
        bind_current_tid(Tid(0));
        context_attach(&layout, Tid(0)).unwrap();
        assert_eq!(
            context_attach(&layout, Tid(0)).unwrap_err(),
            GlobalsError::AlreadyAttached
        );
        take_current_contexts();
    }

    #[test]
    fn cells_start_at_defaults_and_round_trip() {
        let layout = GlobalLayout::new();
        let x = layout.define("x", GValue::Int(7)).unwrap();
        let s = layout.define("s", GValue::Text("boot".into())).unwrap();
        layout.seal().unwrap();
        bind_current_tid(Tid(0));
        context_attach(&layout, Tid(0)).unwrap();
        assert_eq!(get(x).unwrap(), GValue::Int(7));
        assert_eq!(get(s).unwrap(), GValue::Text("boot".into()));
        set(x, GValue::Int(99)).unwrap();
        assert_eq!(get_int(x).unwrap(), 99);
        take_current_contexts();
    }

    #[test]
    fn get_before_attach_is_no_context() {
        let layout = GlobalLayout::new();
        let x = layout.define("x", GValue::Int(0)).unwrap();
        layout.seal().unwrap();
        assert_eq!(get(x).unwrap_err(), GlobalsError::NoContext);
    }

    #[test]
    fn type_mismatch_is_rejected() {
        let layout = GlobalLayout::new();
        let x = layout.define("x", GValue::Int(0)).unwrap();
        layout.seal().unwrap();
        bind_current_tid(Tid(0));
        context_attach(&layout, Tid(0)).unwrap();
        assert_eq!(
            set(x, GValue::Bool(true)).unwrap_err(),
            GlobalsError::TypeMismatch
        );
        take_current_contexts();
    }

    #[test]
    fn threads_see_their_own_cells_only() {
        let layout = std::sync::Arc::new(GlobalLayout::new());
        let x = layout.define("x", GValue::Int(0)).unwrap();
        layout.seal().unwrap();

        bind_current_tid(Tid(0));
        context_attach(&layout, Tid(0)).unwrap();
        set_int(x, 7).unwrap();

        let l = std::sync::Arc::clone(&layout);
        let other = std::thread::spawn(move || {
            bind_current_tid(Tid(1));
            context_attach(&l, Tid(1)).unwrap();
            let seen = get_int(x).unwrap();
            set_int(x, 500).unwrap();
            (seen, get_int(x).unwrap())
        })
        .join()
        .unwrap();

        // The other thread saw its default, not our 7; our 7 survived its 500.
        assert_eq!(other, (0, 500));
        assert_eq!(get_int(x).unwrap(), 7);
        take_current_contexts();
    }

    #[test]
    fn every_slot_resolves_from_an_attached_context() {
        let layout = GlobalLayout::new();
        let mut slots = Vec::new();
        for i in 0..32 {
            slots.push(layout.define(&format!("g{i}"), GValue::Int(i)).unwrap());
        }
        layout.seal().unwrap();
        bind_current_tid(Tid(0));
        context_attach(&layout, Tid(0)).unwrap();
        for (i, s) in slots.iter().enumerate() {
            assert_eq!(get_int(*s).unwrap(), i as i64);
        }
        take_current_contexts();
    }

    #[test]
    fn dump_lists_slots() {
        let layout = GlobalLayout::new();
        layout.define("x", GValue::Int(3)).unwrap();
        layout.define(&qualify("a.c", "flag"), GValue::Bool(false)).unwrap();
        let dump = layout.dump();
        assert!(dump.starts_with("0 x Int(3)\n"));
        assert!(dump.contains("1 a.c::flag Bool(false)"));
    }

    #[test]
    fn take_contexts_returns_blocks_for_reclaim() {
        let layout = GlobalLayout::new();
        layout.define("x", GValue::Int(0)).unwrap();
        layout.seal().unwrap();
        bind_current_tid(Tid(9));
        context_attach(&layout, Tid(9)).unwrap();
        let blocks = take_current_contexts();
        assert_eq!(blocks.len(), 1);
        assert_eq!(blocks[0].owner, Tid(9));
        assert_eq!(blocks[0].cell_count(), 1);
        assert!(!has_context(&layout));
    }
}
