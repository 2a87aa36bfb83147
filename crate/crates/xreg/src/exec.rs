use xreg_core::projector::RowExecutor;

/// Splits rows into `workers` contiguous bands, one scoped thread each.
/// Every row is still computed by the same closure, so the image does not
/// depend on the worker count.
#[derive(Debug, Clone, Copy)]
pub struct Threaded {
    pub workers: usize,
}

impl Threaded {
    pub fn new(workers: usize) -> Self {
        Threaded { workers: workers.max(1) }
    }

    /// One worker per available core.
    pub fn available() -> Self {
        Threaded::new(std::thread::available_parallelism().map_or(1, |n| n.get()))
    }
}

impl RowExecutor for Threaded {
    fn for_each_row(&self, out: &mut [f64], width: usize, f: &(dyn Fn(usize, &mut [f64]) + Sync)) {
        let rows = out.len() / width.max(1);
        if self.workers <= 1 || rows <= 1 {
            for (v, row) in out.chunks_mut(width).enumerate() {
                f(v, row);
            }
            return;
        }
        let band = rows.div_ceil(self.workers);
        std::thread::scope(|s| {
            for (b, chunk) in out.chunks_mut(band * width).enumerate() {
                s.spawn(move || {
                    for (i, row) in chunk.chunks_mut(width).enumerate() {
                        f(b * band + i, row);
                    }
                });
            }
        });
    }
}

/// Maps `f` over `0..n` on up to `workers` threads; results keep index order.
pub fn par_map<T: Send>(n: usize, workers: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let workers = workers.max(1).min(n.max(1));
    if workers == 1 {
        return (0..n).map(f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let v = f(i);
                results.lock().unwrap()[i] = Some(v);
            });
        }
    });
    slots.into_iter().map(|v| v.expect("every index is visited")).collect()
}
