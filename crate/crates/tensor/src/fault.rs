//! Deliberate backward-rule corruption, used to prove that the gradient
//! suite detects broken derivatives. Scoped to the calling thread.

use std::cell::Cell;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Negates the derivative of `sigmoid`.
    SigmoidBackwardSign,
}

thread_local! {
    static ACTIVE: Cell<Option<Fault>> = const { Cell::new(None) };
}

pub(crate) fn active(fault: Fault) -> bool {
    ACTIVE.with(|a| a.get() == Some(fault))
}

/// Runs `f` with `fault` injected on this thread.
pub fn with_fault<R>(fault: Fault, f: impl FnOnce() -> R) -> R {
    struct Reset(Option<Fault>);
    impl Drop for Reset {
        fn drop(&mut self) {
            ACTIVE.with(|a| a.set(self.0));
        }
    }
    let _reset = Reset(ACTIVE.with(|a| a.replace(Some(fault))));
    f()
}
