use std::sync::mpsc::{sync_channel, Receiver};
use std::thread::JoinHandle;
use std::time::Instant;

use super::{sample_series, series_rng, SynthConfig, SynthSample};
use crate::error::Result;

/// Background producer feeding a bounded queue. Series `i` always comes
/// from `series_rng(seed, i)`, so the stream replays exactly; `start` is
/// the first index produced.
pub struct SynthStream {
    rx: Option<Receiver<Result<SynthSample>>>,
    handle: Option<JoinHandle<()>>,
}

impl SynthStream {
    pub fn spawn(cfg: SynthConfig, len: usize, seed: u64, start: u64, capacity: usize) -> Result<Self> {
        cfg.validate()?;
        let (tx, rx) = sync_channel(capacity.max(1));
        let handle = std::thread::Builder::new()
            .name("synth".into())
            .spawn(move || {
                for i in start.. {
                    let s = sample_series(&cfg, len, &mut series_rng(seed, i));
                    let stop = s.is_err();
                    if tx.send(s).is_err() || stop {
                        break;
                    }
                }
            })?;
        Ok(Self {
            rx: Some(rx),
            handle: Some(handle),
        })
    }
}

impl Iterator for SynthStream {
    type Item = Result<SynthSample>;

    fn next(&mut self) -> Option<Self::Item> {
        self.rx.as_ref()?.recv().ok()
    }
}

impl Drop for SynthStream {
    fn drop(&mut self) {
        // Closing the receiver makes the producer's next send fail.
        self.rx.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Mean wall-clock milliseconds per series over `n` draws on this thread.
pub fn measure_throughput(cfg: &SynthConfig, len: usize, n: usize, seed: u64) -> Result<f64> {
    let start = Instant::now();
    for i in 0..n as u64 {
        std::hint::black_box(sample_series(cfg, len, &mut series_rng(seed, i))?);
    }
    Ok(start.elapsed().as_secs_f64() * 1e3 / n.max(1) as f64)
}
