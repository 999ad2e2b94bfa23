//! Thread-local tape of backward closures.
//!
//! Forward ops push one closure per recorded operation; `backward` drains the
//! tape and runs the closures in reverse, which visits consumers before
//! producers because consumers are always recorded later.

use std::cell::{Cell, RefCell};

type BackwardFn = Box<dyn FnOnce()>;

/// Ordered record of executed operations awaiting a backward pass.
///
/// Each precision keeps one tape per thread; entries are type-erased
/// closures that only touch raw gradient buffers, never the tape itself.
#[derive(Default)]
pub struct Tape {
    entries: Vec<BackwardFn>,
}

impl Tape {
    pub fn push(&mut self, f: BackwardFn) {
        self.entries.push(f);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Removes and returns all entries, leaving the tape empty.
    pub fn take_entries(&mut self) -> Vec<BackwardFn> {
        std::mem::take(&mut self.entries)
    }

    /// Drops all entries without running them. Releases the tensors the
    /// closures keep alive after a forward pass that will not be
    /// differentiated.
    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

thread_local! {
    static TAPE_F32: RefCell<Tape> = RefCell::new(Tape::default());
    static TAPE_F64: RefCell<Tape> = RefCell::new(Tape::default());
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

pub(crate) fn with_tape_f32<R>(f: impl FnOnce(&mut Tape) -> R) -> R {
    TAPE_F32.with(|t| f(&mut t.borrow_mut()))
}

pub(crate) fn with_tape_f64<R>(f: impl FnOnce(&mut Tape) -> R) -> R {
    TAPE_F64.with(|t| f(&mut t.borrow_mut()))
}

/// True when forward ops should record backward closures.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Runs `f` with tape recording disabled on this thread.
///
/// Inference and evaluation wrap their forwards in this so activations are
/// not retained. Restores the previous state even on panic.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}
