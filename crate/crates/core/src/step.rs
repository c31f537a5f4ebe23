//! Step points for driving operations one atomic step at a time.
//!
//! Every tree operation is an `async fn` that awaits [`Pace::step`] right
//! before each shared-memory read of a mapping-table slot and before each
//! compare-and-swap. With [`Pace::Free`] the step point completes immediately
//! and the operation runs straight through; with [`Pace::Stepped`] it
//! suspends once, handing control back to whoever polls the future. The
//! compiler-generated future is the operation's step machine.

use std::cell::Cell;
use std::future::Future;
use std::pin::Pin;
use std::task::{Context, Poll, Waker};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pace {
    #[default]
    Free,
    Stepped,
}

impl Pace {
    #[inline]
    pub fn step(self) -> StepPoint {
        StepPoint {
            pending: self == Pace::Stepped,
        }
    }
}

#[must_use = "step points do nothing unless awaited"]
pub struct StepPoint {
    pending: bool,
}

impl Future for StepPoint {
    type Output = ();

    #[inline]
    fn poll(mut self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<()> {
        if self.pending {
            self.pending = false;
            Poll::Pending
        } else {
            Poll::Ready(())
        }
    }
}

thread_local! {
    static WROTE: Cell<bool> = const { Cell::new(false) };
}

/// Record that the current step changed shared state.
#[inline]
pub(crate) fn note_write() {
    WROTE.with(|w| w.set(true));
}

/// Whether shared state changed since the last call.
pub fn take_write() -> bool {
    WROTE.with(|w| w.replace(false))
}

/// Run a future built with [`Pace::Free`] to completion on the current thread.
pub fn run_free<F: Future>(fut: F) -> F::Output {
    let mut fut = std::pin::pin!(fut);
    let mut cx = Context::from_waker(Waker::noop());
    loop {
        if let Poll::Ready(v) = fut.as_mut().poll(&mut cx) {
            return v;
        }
    }
}

/// Poll once. Used by the interleaving harness to execute a single step.
pub fn poll_once<F: Future + ?Sized>(fut: Pin<&mut F>) -> Poll<F::Output> {
    let mut cx = Context::from_waker(Waker::noop());
    fut.poll(&mut cx)
}

#[cfg(test)]
mod tests {
    use super::*;

    async fn three_steps(pace: Pace) -> u32 {
        let mut n = 0;
        for _ in 0..3 {
            pace.step().await;
            n += 1;
        }
        n
    }

    #[test]
    fn free_pace_never_suspends() {
        assert_eq!(run_free(three_steps(Pace::Free)), 3);
    }

    #[test]
    fn stepped_pace_suspends_at_each_point() {
        let mut fut = Box::pin(three_steps(Pace::Stepped));
        let mut polls = 0;
        loop {
            polls += 1;
            if let Poll::Ready(v) = poll_once(fut.as_mut()) {
                assert_eq!(v, 3);
                break;
            }
        }
        assert_eq!(polls, 4);
    }
}
