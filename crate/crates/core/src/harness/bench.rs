//! Memory and latency versus context length.

use std::alloc::{GlobalAlloc, Layout, System};
use std::fmt::Write as _;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::init::seeded;
use crate::lm::{decode_step, prefill, select_next, LmWeights, ModelState, Selection, BYTE_TOKENS};
use crate::numerics::Tensor;
use rand::RngExt;

/// Global allocator wrapper tracking live and peak heap bytes. A binary opts
/// in with `#[global_allocator] static A: CountingAlloc = CountingAlloc;`.
pub struct CountingAlloc;

static LIVE: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static INSTALLED: AtomicBool = AtomicBool::new(false);

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            INSTALLED.store(true, Ordering::Relaxed);
            let now = LIVE.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        LIVE.fetch_sub(layout.size(), Ordering::Relaxed);
    }
}

impl CountingAlloc {
    /// False unless this allocator is the process-wide one.
    pub fn installed() -> bool {
        INSTALLED.load(Ordering::Relaxed)
    }

    pub fn live() -> usize {
        LIVE.load(Ordering::Relaxed)
    }

    pub fn peak() -> usize {
        PEAK.load(Ordering::Relaxed)
    }

    /// Restarts peak tracking from the current live size.
    pub fn reset_peak() {
        PEAK.store(LIVE.load(Ordering::Relaxed), Ordering::Relaxed);
    }
}

pub const CSV_HEADER: &str = "context,state_bytes,peak_bytes,tok_us,dup_us";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub context: usize,
    pub state_bytes: usize,
    /// Peak heap bytes during prefill and decode above what was live before,
    /// so the prompt buffer itself is excluded; 0 without [`CountingAlloc`].
    pub peak_bytes: usize,
    pub tok_us: f64,
    pub dup_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    /// Prefill chunk; bounds activation memory independently of context.
    pub chunk: usize,
    pub decode_tokens: usize,
    /// Repetitions of the decode measurement; the median is reported.
    pub rounds: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            chunk: 256,
            decode_tokens: 64,
            rounds: 5,
            seed: 0,
        }
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

pub fn default_context_lengths() -> Vec<usize> {
    (6..=14).map(|p| 1usize << p).collect()
}

/// Per context length: prefill random byte tokens in chunks, then time greedy
/// decode steps and state duplication.
pub fn bench_memory_latency(w: &LmWeights, contexts: &[usize], cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if contexts.is_empty() || contexts.windows(2).any(|p| p[0] >= p[1]) || contexts[0] == 0 {
        return Err(invalid("context lengths must be positive and strictly increasing"));
    }
    if cfg.chunk == 0 || cfg.decode_tokens == 0 || cfg.rounds == 0 {
        return Err(invalid("chunk, decode_tokens and rounds must be positive"));
    }
    let mut rng = seeded(cfg.seed);
    let mut rows = Vec::with_capacity(contexts.len());
    for &ctx in contexts {
        let ids: Vec<usize> = (0..ctx).map(|_| rng.random_range(0..BYTE_TOKENS)).collect();
        CountingAlloc::reset_peak();
        let baseline = CountingAlloc::live();
        let mut state = ModelState::zeros(&w.cfg, w.dtype());
        let mut logits = Tensor::zeros(&[w.cfg.vocab], w.dtype());
        for chunk in ids.chunks(cfg.chunk) {
            (state, logits) = prefill(&state, &w.embed(chunk)?, w)?;
        }
        let mut per_round = Vec::with_capacity(cfg.rounds);
        let mut dups = Vec::with_capacity(cfg.rounds);
        for _ in 0..cfg.rounds {
            let (mut s, mut l) = (state.clone(), logits.clone());
            let t0 = Instant::now();
            for _ in 0..cfg.decode_tokens {
                let next = select_next(&l, &Selection::Greedy)?;
                (s, l) = decode_step(&s, next, w)?;
            }
            per_round.push(t0.elapsed().as_secs_f64() * 1e6 / cfg.decode_tokens as f64);
            let t1 = Instant::now();
            let copies: Vec<ModelState> = (0..cfg.decode_tokens).map(|_| state.clone()).collect();
            dups.push(t1.elapsed().as_secs_f64() * 1e6 / copies.len() as f64);
        }
        let peak = if CountingAlloc::installed() { CountingAlloc::peak().saturating_sub(baseline) } else { 0 };
        rows.push(BenchRow {
            context: ctx,
            state_bytes: state.state_bytes(),
            peak_bytes: peak,
            tok_us: median(per_round),
            dup_us: median(dups),
        });
    }
    Ok(rows)
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        writeln!(s, "{},{},{},{:.3},{:.3}", r.context, r.state_bytes, r.peak_bytes, r.tok_us, r.dup_us).expect("string write");
    }
    s
}

/// State bytes identical in every row.
pub fn state_bytes_constant(rows: &[BenchRow]) -> bool {
    rows.windows(2).all(|p| p[0].state_bytes == p[1].state_bytes)
}
