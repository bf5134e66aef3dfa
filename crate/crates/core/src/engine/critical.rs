use std::collections::HashMap;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use super::BranchId;

const POLL: Duration = Duration::from_millis(2);

#[derive(Debug, Default)]
struct SectionLock {
    owner: Mutex<Option<BranchId>>,
    cv: Condvar,
}

/// Named, instance-wide, non-reentrant mutexes.
#[derive(Debug, Default)]
pub(crate) struct SectionRegistry {
    sections: Mutex<HashMap<String, Arc<SectionLock>>>,
}

pub(crate) struct SectionGuard {
    lock: Arc<SectionLock>,
}

impl Drop for SectionGuard {
    fn drop(&mut self) {
        *self.lock.owner.lock().expect("section poisoned") = None;
        self.lock.cv.notify_all();
    }
}

impl SectionRegistry {
    /// Blocks until `name` is free or `give_up` returns true, polling the
    /// latter so a waiting branch still notices cancellation.
    pub fn acquire(&self, name: &str, branch: &BranchId, give_up: impl Fn() -> bool) -> Option<SectionGuard> {
        let lock = self.sections.lock().expect("registry poisoned").entry(name.to_owned()).or_default().clone();
        let mut owner = lock.owner.lock().expect("section poisoned");
        loop {
            if owner.is_none() {
                *owner = Some(branch.clone());
                drop(owner);
                return Some(SectionGuard { lock });
            }
            if give_up() {
                return None;
            }
            owner = lock.cv.wait_timeout(owner, POLL).expect("section poisoned").0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

    #[test]
    fn excludes_and_releases() {
        let reg = Arc::new(SectionRegistry::default());
        let inside = Arc::new(AtomicUsize::new(0));
        let handles: Vec<_> = (0..4)
            .map(|i| {
                let reg = reg.clone();
                let inside = inside.clone();
                std::thread::spawn(move || {
                    for _ in 0..200 {
                        let g = reg.acquire("s", &BranchId::root().child(i), || false).unwrap();
                        assert_eq!(inside.fetch_add(1, Ordering::SeqCst), 0);
                        std::thread::yield_now();
                        inside.fetch_sub(1, Ordering::SeqCst);
                        drop(g);
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
    }

    #[test]
    fn waiter_can_give_up() {
        let reg = SectionRegistry::default();
        let _held = reg.acquire("s", &BranchId::root(), || false).unwrap();
        let stop = AtomicBool::new(false);
        std::thread::scope(|s| {
            let t = s.spawn(|| reg.acquire("s", &BranchId::new("0.1"), || stop.load(Ordering::SeqCst)).is_none());
            std::thread::sleep(Duration::from_millis(10));
            stop.store(true, Ordering::SeqCst);
            assert!(t.join().unwrap());
        });
        assert!(reg.acquire("other", &BranchId::new("0.1"), || true).is_some());
    }
}
