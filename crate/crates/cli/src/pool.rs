use std::num::NonZeroUsize;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use crate::{config, CliError};

pub const THREADS_VAR: &str = "ATTN_TUTOR_THREADS";

/// Worker count: `ATTN_TUTOR_THREADS` when set, else the available cores.
pub fn threads() -> Result<usize, CliError> {
    match std::env::var(THREADS_VAR) {
        Ok(v) => v
            .trim()
            .parse::<NonZeroUsize>()
            .map(NonZeroUsize::get)
            .map_err(|_| config(format!("{THREADS_VAR} must be a positive integer, got {v:?}"))),
        Err(std::env::VarError::NotPresent) => {
            Ok(thread::available_parallelism().map_or(1, NonZeroUsize::get))
        }
        Err(e) => Err(config(format!("{THREADS_VAR}: {e}"))),
    }
}

/// Applies `f` to every item on at most `threads` workers. Results keep the
/// order of `items`; the first error in that order is returned.
pub fn map<T, R, E, F>(items: &[T], threads: usize, f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(&T) -> Result<R, E> + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R, E>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    thread::scope(|s| {
        for _ in 0..threads.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let r = f(item);
                slots.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every item ran"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn results_keep_item_order() {
        let items: Vec<u64> = (0..50).collect();
        let out: Result<Vec<u64>, ()> = map(&items, 4, |&x| Ok(x * x));
        assert_eq!(out.unwrap(), items.iter().map(|x| x * x).collect::<Vec<_>>());
    }

    #[test]
    fn first_error_in_item_order_wins() {
        let items = [1, 2, 3, 4];
        let out: Result<Vec<i32>, i32> = map(&items, 3, |&x| if x >= 2 { Err(x) } else { Ok(x) });
        assert_eq!(out, Err(2));
    }
}
