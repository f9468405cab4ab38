//! Per-node activity counters.
//!
//! A node enters its counter scope on the thread doing the work; the query
//! executor and the segment writer record into whichever scope is current.
//! Work done outside any scope is not attributed.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::Serialize;

#[derive(Debug, Default)]
pub struct NodeCounters {
    pub query_executions: AtomicU64,
    pub segment_writer_calls: AtomicU64,
    pub incorporations: AtomicU64,
    pub inplace_writes: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CounterValues {
    pub query_executions: u64,
    pub segment_writer_calls: u64,
    pub incorporations: u64,
    pub inplace_writes: u64,
}

impl NodeCounters {
    pub fn values(&self) -> CounterValues {
        CounterValues {
            query_executions: self.query_executions.load(Ordering::Relaxed),
            segment_writer_calls: self.segment_writer_calls.load(Ordering::Relaxed),
            incorporations: self.incorporations.load(Ordering::Relaxed),
            inplace_writes: self.inplace_writes.load(Ordering::Relaxed),
        }
    }
}

thread_local! {
    static CURRENT: RefCell<Option<Arc<NodeCounters>>> = const { RefCell::new(None) };
}

/// Restores the previous scope on drop.
pub struct ScopeGuard {
    previous: Option<Arc<NodeCounters>>,
}

impl Drop for ScopeGuard {
    fn drop(&mut self) {
        let prev = self.previous.take();
        CURRENT.with(|c| *c.borrow_mut() = prev);
    }
}

/// Attributes work on this thread to `counters` until the guard drops.
pub fn enter(counters: &Arc<NodeCounters>) -> ScopeGuard {
    let previous = CURRENT.with(|c| c.borrow_mut().replace(counters.clone()));
    ScopeGuard { previous }
}

pub(crate) fn record(f: impl FnOnce(&NodeCounters) -> &AtomicU64) {
    CURRENT.with(|c| {
        if let Some(n) = c.borrow().as_ref() {
            f(n).fetch_add(1, Ordering::Relaxed);
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scopes_nest_and_restore() {
        let a = Arc::new(NodeCounters::default());
        let b = Arc::new(NodeCounters::default());
        record(|c| &c.query_executions);
        {
            let _ga = enter(&a);
            record(|c| &c.query_executions);
            {
                let _gb = enter(&b);
                record(|c| &c.segment_writer_calls);
            }
            record(|c| &c.query_executions);
        }
        record(|c| &c.query_executions);
        assert_eq!(a.values().query_executions, 2);
        assert_eq!(a.values().segment_writer_calls, 0);
        assert_eq!(b.values().segment_writer_calls, 1);
    }
}
