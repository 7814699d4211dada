use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use duplexssm::checkpoint::{BundleConfig, ModelBundle};
use duplexssm::duplex::{run_scenario, LmEngine, Scenario, ScriptedLm, SessionConfig};
use duplexssm::harness::{
    bench_memory_latency, gen_synthetic_dataset, run_check, scenario_library, synthetic, tiny_speech_bundle_config,
    to_csv, train_toy_state_discrimination, BenchConfig, CountingAlloc, SyntheticTaskSpec, ToyConfig, CRITERIA,
};
use duplexssm::lm::LmConfig;
use duplexssm::numerics::DType;

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

#[derive(Parser)]
#[command(name = "engine", version, about = "Full-duplex streaming engine for selective state-space models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Replay a scenario through a duplex session and write its trace.
    Run {
        /// Model checkpoint; omit together with --stub to use the scripted model.
        #[arg(long, required_unless_present = "stub")]
        ckpt: Option<PathBuf>,
        #[arg(long, conflicts_with = "ckpt")]
        stub: bool,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        /// Session settings as JSON; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        tick_ms: Option<u64>,
        #[arg(long)]
        slice_ms: Option<u64>,
        #[arg(long)]
        seed: u64,
    },
    /// Run the invariant suite; exits nonzero if any check fails.
    Verify {
        /// Comma-separated criterion ids; all by default.
        #[arg(long, value_delimiter = ',')]
        only: Vec<u8>,
        #[arg(long, value_delimiter = ',')]
        skip: Vec<u8>,
    },
    /// Measure state size, peak heap and latency against context length.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "64,128,256,512,1024,2048,4096,8192,16384")]
        context_lengths: Vec<usize>,
        #[arg(long)]
        csv: PathBuf,
        /// Benchmark these weights instead of a freshly initialized preset.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Preset::Small)]
        preset: Preset,
        #[arg(long, default_value_t = 64)]
        decode_tokens: usize,
        #[arg(long)]
        seed: u64,
    },
    /// Train the toy state-discrimination model and report held-out metrics.
    TrainToy {
        /// Training settings as JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        /// Write the trained weights as a checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the full report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write the bundled scenarios, and their stub traces, to a directory.
    GenScenario {
        #[arg(long)]
        out_dir: PathBuf,
        /// Only this scenario.
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        with_traces: bool,
    },
    /// Write a synthetic state-discrimination dataset as JSONL.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Task settings as JSON; the seed flag overrides its seed.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
    },
    /// Write a randomly initialized checkpoint.
    InitCkpt {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Preset::Small)]
        preset: Preset,
        #[arg(long, value_enum, default_value_t = Precision::F32)]
        dtype: Precision,
        #[arg(long)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Token-only LM, 2 layers, d_model 16.
    Tiny,
    /// Token-only LM, 2 layers, d_model 64.
    Small,
    /// Tiny encoder, adapter and LM.
    TinySpeech,
}

impl Preset {
    fn bundle(self) -> BundleConfig {
        let token_only = |lm| BundleConfig {
            lm,
            encoder: None,
            adapter_k: 1,
            adapter_hidden: None,
        };
        match self {
            Preset::Tiny => token_only(LmConfig::tiny()),
            Preset::Small => token_only(LmConfig::small()),
            Preset::TinySpeech => tiny_speech_bundle_config(),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn run() -> Result<bool> {
    match Cli::parse().cmd {
        Cmd::Run {
            ckpt,
            stub,
            scenario,
            trace,
            config,
            tick_ms,
            slice_ms,
            seed,
        } => {
            let mut cfg: SessionConfig = match config {
                Some(p) => read_json(&p)?,
                None => SessionConfig::default(),
            };
            cfg.seed = seed;
            cfg.tick_ms = tick_ms.unwrap_or(cfg.tick_ms);
            cfg.slice_ms = slice_ms.unwrap_or(cfg.slice_ms);
            let sc = Scenario::load(&scenario).with_context(|| format!("loading {}", scenario.display()))?;
            let t = match (ckpt, stub) {
                (_, true) => run_scenario(&ScriptedLm::default(), &cfg, &sc)?,
                (Some(p), false) => {
                    let bundle = ModelBundle::load(&p).with_context(|| format!("loading {}", p.display()))?;
                    run_scenario(&LmEngine::new(bundle)?, &cfg, &sc)?
                }
                (None, false) => bail!("either --ckpt or --stub is required"),
            };
            t.save(&trace)?;
            eprintln!("{} events written to {}", t.events.len(), trace.display());
            Ok(true)
        }
        Cmd::Verify { only, skip } => {
            let mut all_ok = true;
            for &(id, _, _) in CRITERIA.iter() {
                if (!only.is_empty() && !only.contains(&id)) || skip.contains(&id) {
                    continue;
                }
                let o = run_check(id).expect("listed criterion");
                println!("{o}");
                all_ok &= o.passed;
            }
            Ok(all_ok)
        }
        Cmd::Bench {
            context_lengths,
            csv,
            ckpt,
            preset,
            decode_tokens,
            seed,
        } => {
            let bundle = match ckpt {
                Some(p) => ModelBundle::load(&p)?,
                None => ModelBundle::init(&preset.bundle(), DType::F32, seed)?,
            };
            let cfg = BenchConfig {
                decode_tokens,
                seed,
                ..Default::default()
            };
            let rows = bench_memory_latency(&bundle.lm, &context_lengths, &cfg)?;
            let text = to_csv(&rows);
            fs::write(&csv, &text)?;
            print!("{text}");
            Ok(true)
        }
        Cmd::TrainToy {
            config,
            seed,
            out,
            report,
        } => {
            let mut cfg: ToyConfig = match config {
                Some(p) => read_json(&p)?,
                None => ToyConfig::default(),
            };
            cfg.seed = seed;
            let (w, r) = train_toy_state_discrimination(&cfg)?;
            println!(
                "held-out precision {:.4} recall {:.4} f1 {:.4} (untrained f1 {:.4}); {} steps in {:.1} s",
                r.metrics.precision,
                r.metrics.recall,
                r.metrics.f1,
                r.untrained.f1,
                r.losses.len(),
                r.seconds
            );
            if let Some(p) = report {
                fs::write(&p, serde_json::to_string_pretty(&r)?)?;
            }
            if let Some(p) = out {
                let bundle = ModelBundle {
                    cfg: BundleConfig {
                        lm: cfg.lm,
                        encoder: None,
                        adapter_k: 1,
                        adapter_hidden: None,
                    },
                    encoder: None,
                    adapter: None,
                    lm: w,
                };
                bundle.save(&p)?;
            }
            Ok(true)
        }
        Cmd::GenScenario {
            out_dir,
            name,
            with_traces,
        } => {
            fs::create_dir_all(&out_dir)?;
            let lib: Vec<_> = scenario_library()
                .into_iter()
                .filter(|s| name.as_deref().is_none_or(|n| n == s.name))
                .collect();
            if lib.is_empty() {
                bail!("no bundled scenario named {}", name.unwrap_or_default());
            }
            for s in lib {
                s.scenario.save(&out_dir.join(format!("{}.scenario.jsonl", s.name)))?;
                fs::write(out_dir.join(format!("{}.skeleton.txt", s.name)), s.expected.join("\n") + "\n")?;
                if with_traces {
                    s.run_stub()?.save(&out_dir.join(format!("{}.trace.jsonl", s.name)))?;
                }
                println!("{}: {}", s.name, s.description);
            }
            Ok(true)
        }
        Cmd::GenData { n, out, spec, seed } => {
            let mut spec: SyntheticTaskSpec = match spec {
                Some(p) => read_json(&p)?,
                None => SyntheticTaskSpec::default(),
            };
            spec.seed = seed;
            let data = gen_synthetic_dataset(&spec, n)?;
            fs::write(&out, synthetic::to_jsonl(&data))?;
            Ok(true)
        }
        Cmd::InitCkpt {
            out,
            preset,
            dtype,
            seed,
        } => {
            let dtype = match dtype {
                Precision::F32 => DType::F32,
                Precision::F64 => DType::F64,
            };
            ModelBundle::init(&preset.bundle(), dtype, seed)?.save(&out)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
