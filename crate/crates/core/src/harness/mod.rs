//! Synthetic data, toy training, benchmarks, bundled scenarios and the
//! invariant suite.

pub mod bench;
pub mod scenarios;
pub mod synthetic;
pub mod toy;
pub mod verify;

pub use bench::{bench_memory_latency, default_context_lengths, to_csv, BenchConfig, BenchRow, CountingAlloc, CSV_HEADER};
pub use scenarios::{scenario_library, BundledScenario};
pub use synthetic::{gen_synthetic_dataset, EncodedSample, Sample, SyntheticTaskSpec};
pub use toy::{evaluate, predict_state, train_toy_state_discrimination, Confusion, Metrics, ToyConfig, ToyReport};
pub use verify::{run_all, run_check, tiny_speech_bundle_config, CheckOutcome, CRITERIA};
