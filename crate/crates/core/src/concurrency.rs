//! Order-preserving work distribution with a hard cap on in-flight calls.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

/// Runs `f` over `items` on at most `limit` scoped threads.
///
/// Workers claim indices from a shared counter, so no more than `limit`
/// calls of `f` are ever running. Once `stop` is set no further items are
/// claimed; items already running complete. Returns `None` for unclaimed items.
pub fn bounded_map<T, R, F>(items: &[T], limit: usize, stop: &AtomicBool, f: F) -> Vec<Option<R>>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let limit = limit.max(1).min(items.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    thread::scope(|scope| {
        for _ in 0..limit {
            scope.spawn(|| loop {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let out = f(i, &items[i]);
                slots.lock().expect("result slots poisoned")[i] = Some(out);
            });
        }
    });
    slots.into_inner().expect("result slots poisoned")
}

/// [`bounded_map`] without cancellation.
pub fn bounded_map_all<T, R, F>(items: &[T], limit: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let never = AtomicBool::new(false);
    bounded_map(items, limit, &never, f)
        .into_iter()
        .map(|r| r.expect("every item is processed when not stopped"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Duration;

    #[test]
    fn preserves_order_and_caps_parallelism() {
        let in_flight = AtomicUsize::new(0);
        let peak = AtomicUsize::new(0);
        let items: Vec<u64> = (0..20).collect();
        let out = bounded_map_all(&items, 3, |_, &x| {
            let now = in_flight.fetch_add(1, Ordering::SeqCst) + 1;
            peak.fetch_max(now, Ordering::SeqCst);
            thread::sleep(Duration::from_millis((20 - x) % 7));
            in_flight.fetch_sub(1, Ordering::SeqCst);
            x * 2
        });
        assert_eq!(out, items.iter().map(|x| x * 2).collect::<Vec<_>>());
        assert!(peak.load(Ordering::SeqCst) <= 3);
    }

    #[test]
    fn stop_flag_halts_claiming() {
        let stop = AtomicBool::new(false);
        let items: Vec<usize> = (0..50).collect();
        let out = bounded_map(&items, 1, &stop, |i, _| {
            if i == 9 {
                stop.store(true, Ordering::SeqCst);
            }
            i
        });
        assert_eq!(out.iter().filter(|r| r.is_some()).count(), 10);
    }

    #[test]
    fn empty_input() {
        let items: Vec<u8> = Vec::new();
        assert!(bounded_map_all(&items, 4, |_, x| *x).is_empty());
    }
}
