use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

/// Counters the pipeline stages publish for the sampler.
#[derive(Debug, Default)]
pub struct Gauges {
    pub online_maps: AtomicUsize,
    pub db_entries: AtomicUsize,
    pub keyframes: AtomicUsize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResourceSample {
    pub t: f64,
    /// Resident set size, kB; `None` where `/proc` is unavailable.
    pub rss_kb: Option<u64>,
    pub peak_rss_kb: Option<u64>,
    pub online_maps: usize,
    pub db_entries: usize,
    pub keyframes: usize,
}

/// `VmRSS` and `VmHWM` of this process, in kB.
pub fn memory_kb() -> (Option<u64>, Option<u64>) {
    let Ok(status) = std::fs::read_to_string("/proc/self/status") else {
        return (None, None);
    };
    let field = |name: &str| {
        status
            .lines()
            .find(|l| l.starts_with(name))
            .and_then(|l| l.split_whitespace().nth(1))
            .and_then(|v| v.parse().ok())
    };
    (field("VmRSS:"), field("VmHWM:"))
}

/// Background thread sampling memory and the gauges at a fixed interval.
pub struct ResourceSampler {
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<Vec<ResourceSample>>>,
}

impl ResourceSampler {
    pub fn start(gauges: Arc<Gauges>, interval: Duration) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let handle = std::thread::spawn(move || {
            let t0 = Instant::now();
            let mut out = Vec::new();
            let sample = |t0: &Instant| {
                let (rss, hwm) = memory_kb();
                ResourceSample {
                    t: t0.elapsed().as_secs_f64(),
                    rss_kb: rss,
                    peak_rss_kb: hwm,
                    online_maps: gauges.online_maps.load(Ordering::Relaxed),
                    db_entries: gauges.db_entries.load(Ordering::Relaxed),
                    keyframes: gauges.keyframes.load(Ordering::Relaxed),
                }
            };
            let mut next = Duration::ZERO;
            while !flag.load(Ordering::Relaxed) {
                if t0.elapsed() >= next {
                    out.push(sample(&t0));
                    next += interval;
                }
                std::thread::sleep(Duration::from_millis(20).min(interval));
            }
            out.push(sample(&t0));
            out
        });
        Self {
            stop,
            handle: Some(handle),
        }
    }

    pub fn finish(mut self) -> Vec<ResourceSample> {
        self.stop.store(true, Ordering::Relaxed);
        self.handle.take().map(|h| h.join().unwrap_or_default()).unwrap_or_default()
    }
}

impl Drop for ResourceSampler {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
