//! Epoch ordering and batch assembly, optionally on background threads.

use std::sync::mpsc::{sync_channel, Receiver};
use std::thread;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Shuffled order and flip decisions for one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochPlan {
    pub order: Vec<usize>,
    pub flips: Vec<bool>,
}

/// Deterministic plan for `epoch`; `flip` enables horizontal flips at p = 0.5.
pub fn epoch_plan(seed: u64, epoch: usize, n: usize, flip: bool) -> EpochPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let flips = (0..n).map(|_| flip && rng.random_bool(0.5)).collect();
    EpochPlan { order, flips }
}

impl EpochPlan {
    /// `(indices, flips)` of each batch; the last batch may be short.
    pub fn batches(&self, batch_size: usize) -> Vec<(Vec<usize>, Vec<bool>)> {
        self.order
            .chunks(batch_size)
            .zip(self.flips.chunks(batch_size))
            .map(|(o, f)| (o.to_vec(), f.to_vec()))
            .collect()
    }
}

/// Prefetch worker count from `KD_THREADS` (default 1, 0 = build inline).
pub fn prefetch_threads() -> usize {
    std::env::var("KD_THREADS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(1)
}

/// Runs `consume` on `build(job)` for every job in order. With `threads > 0`
/// the batches are built ahead on that many workers through bounded queues;
/// the consumer still sees them in job order.
pub fn for_each_prefetched<J, B, E>(
    jobs: Vec<J>,
    threads: usize,
    build: impl Fn(J) -> B + Sync,
    mut consume: impl FnMut(usize, B) -> Result<(), E>,
) -> Result<(), E>
where
    J: Send,
    B: Send,
{
    if threads == 0 {
        for (i, j) in jobs.into_iter().enumerate() {
            consume(i, build(j))?;
        }
        return Ok(());
    }
    let n = jobs.len();
    let mut lanes: Vec<Vec<J>> = (0..threads).map(|_| Vec::new()).collect();
    for (i, j) in jobs.into_iter().enumerate() {
        lanes[i % threads].push(j);
    }
    thread::scope(|scope| {
        let build = &build;
        let receivers: Vec<Receiver<B>> = lanes
            .into_iter()
            .map(|lane| {
                let (tx, rx) = sync_channel(2);
                scope.spawn(move || {
                    for j in lane {
                        if tx.send(build(j)).is_err() {
                            break;
                        }
                    }
                });
                rx
            })
            .collect();
        for i in 0..n {
            let b = receivers[i % threads]
                .recv()
                .expect("prefetch worker stopped early");
            consume(i, b)?;
        }
        Ok(())
    })
}
