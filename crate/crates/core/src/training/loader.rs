//! Background batch preparation.
//!
//! Worker `w` of `W` builds the batches for steps `start + w`, `start + w + W`,
//! ... and pushes them into its own bounded channel; the consumer reads the
//! channels round-robin. Every batch is a pure function of its step index, so
//! the sequence the trainer sees is identical for any worker count.

use std::ops::Range;
use std::sync::mpsc::{sync_channel, Receiver};
use std::thread::Scope;

use crate::error::{Error, Result};

pub type MakeBatch<'a, T> = dyn Fn(usize) -> Result<T> + Sync + 'a;

pub struct Loader<'a, T> {
    make: &'a MakeBatch<'a, T>,
    receivers: Vec<Receiver<Result<T>>>,
    start: usize,
    next: usize,
    end: usize,
}

impl<'a, T: Send + 'a> Loader<'a, T> {
    /// With `workers == 0` batches are built on the calling thread.
    pub fn new<'env>(
        scope: &'a Scope<'a, 'env>,
        steps: Range<usize>,
        workers: usize,
        capacity: usize,
        make: &'a MakeBatch<'a, T>,
    ) -> Self {
        let receivers = (0..workers)
            .map(|w| {
                let (tx, rx) = sync_channel(capacity.max(1));
                let steps = steps.clone();
                scope.spawn(move || {
                    for t in steps.skip(w).step_by(workers) {
                        // a closed channel means the trainer stopped early
                        if tx.send(make(t)).is_err() {
                            break;
                        }
                    }
                });
                rx
            })
            .collect();
        Self {
            make,
            receivers,
            start: steps.start,
            next: steps.start,
            end: steps.end,
        }
    }
}

impl<T> Iterator for Loader<'_, T> {
    type Item = Result<(usize, T)>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.end {
            return None;
        }
        let t = self.next;
        self.next += 1;
        let item = if self.receivers.is_empty() {
            (self.make)(t)
        } else {
            let w = (t - self.start) % self.receivers.len();
            self.receivers[w]
                .recv()
                .unwrap_or_else(|_| Err(Error::Dataset(format!("loader worker {w} exited before step {t}"))))
        };
        Some(item.map(|b| (t, b)))
    }
}
