//! Byte accounting for tensors produced during a forward pass.

use std::cell::RefCell;

use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum CensusKind {
    /// An op output.
    Output,
    /// A buffer an op keeps for its backward (e.g. normalized input).
    Saved,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CensusEntry {
    pub op: &'static str,
    pub kind: CensusKind,
    pub numel: usize,
    pub element_bytes: usize,
    /// Whether a gradient map of the same size will be allocated in backward.
    pub has_grad: bool,
}

impl CensusEntry {
    pub fn activation_bytes(&self) -> u64 {
        (self.numel * self.element_bytes) as u64
    }

    pub fn gradient_bytes(&self) -> u64 {
        if self.has_grad {
            self.activation_bytes()
        } else {
            0
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Census {
    pub entries: Vec<CensusEntry>,
}

impl Census {
    pub fn activation_bytes(&self) -> u64 {
        self.entries.iter().map(CensusEntry::activation_bytes).sum()
    }

    pub fn gradient_bytes(&self) -> u64 {
        self.entries.iter().map(CensusEntry::gradient_bytes).sum()
    }

    pub fn total_bytes(&self) -> u64 {
        self.activation_bytes() + self.gradient_bytes()
    }
}

thread_local! {
    static ACTIVE: RefCell<Option<Vec<CensusEntry>>> = const { RefCell::new(None) };
}

/// Runs `f` and returns every tensor it produced through tensor ops,
/// with the bytes it holds and whether it gets a gradient map.
pub fn census<R>(f: impl FnOnce() -> R) -> (R, Census) {
    let previous = ACTIVE.with(|a| a.borrow_mut().replace(Vec::new()));
    let out = f();
    let entries = ACTIVE.with(|a| {
        let mut slot = a.borrow_mut();
        let mine = slot.take().unwrap_or_default();
        *slot = previous;
        mine
    });
    (out, Census { entries })
}

fn push(entry: CensusEntry) {
    ACTIVE.with(|a| {
        if let Some(list) = a.borrow_mut().as_mut() {
            list.push(entry);
        }
    });
}

pub(super) fn record_output(op: &'static str, numel: usize, element_bytes: usize, has_grad: bool) {
    push(CensusEntry {
        op,
        kind: CensusKind::Output,
        numel,
        element_bytes,
        has_grad,
    });
}

pub(crate) fn record_saved(op: &'static str, numel: usize, element_bytes: usize, has_grad: bool) {
    push(CensusEntry {
        op,
        kind: CensusKind::Saved,
        numel,
        element_bytes,
        has_grad,
    });
}
