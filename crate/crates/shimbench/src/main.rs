//! shimbench: benchmarks, demos and interleaving exploration for the
//! process-to-thread migration shim.
//!
//! Exit codes: 0 on pass/success, 2 when a run exhibits a violation (an
//! exploration witness or a starved demo worker), 1 on errors.

mod bench;
mod demo;
mod explore_cmd;
mod limits;

use clap::{Parser, Subcommand};

use bench::{bench_create, bench_pv, BenchError, CreateKind, PvKind};
use demo::{run_demo, DemoConfig, DemoLockMode};

#[derive(Parser)]
#[command(
    name = "shimbench",
    about = "Bench, demo and exploration harness for the thread-migration shim"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Microbenchmarks: creation cost and PV cost.
    Bench {
        #[command(subcommand)]
        which: BenchCmd,
    },
    /// Mini daemon: workers increment a shared counter under semaphore and
    /// short-lock protection.
    Demo {
        #[arg(long, default_value_t = 4)]
        workers: usize,
        #[arg(long, value_parser = parse_lock_mode, default_value = "fixed")]
        lock_mode: DemoLockMode,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        increments: u64,
    },
    /// Exhaustive bounded interleaving exploration.
    Explore {
        #[arg(long)]
        target: explore_cmd::Target,
        #[arg(long, default_value_t = 3)]
        threads: usize,
        #[arg(long, default_value_t = 12)]
        steps: usize,
        /// Self-wake alarm in scheduler steps (fixed lock only).
        #[arg(long, default_value_t = 3)]
        self_wake_timeout: u32,
    },
    /// Raise resource limits through the OS adapter.
    Limits {
        #[arg(long, default_value_t = threadshim::os_compat::DEFAULT_OPEN_FILES_TARGET)]
        files: u64,
        /// Model a plain (non-setuid) process in the mock adapter.
        #[arg(long)]
        unprivileged: bool,
        /// Use the real kernel instead of the mock adapter.
        #[arg(long)]
        real_os: bool,
    },
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Thread vs process creation cost.
    Create {
        #[arg(long, default_value_t = 200)]
        iters: usize,
        /// Run only one side: thread or process.
        #[arg(long)]
        kind: Option<String>,
    },
    /// Emulated vs kernel semaphore P+V cost.
    Pv {
        #[arg(long, default_value_t = 20000)]
        iters: usize,
        /// Run only one side: emulated or os-process.
        #[arg(long)]
        kind: Option<String>,
    },
}

fn parse_lock_mode(s: &str) -> Result<DemoLockMode, String> {
    match s {
        "legacy" => Ok(DemoLockMode::Legacy),
        "fixed" => Ok(DemoLockMode::Fixed),
        other => Err(format!("unknown lock mode {other:?} (legacy|fixed)")),
    }
}

fn main() {
    let cli = Cli::parse();
    let code = match cli.cmd {
        Cmd::Bench { which } => run_bench(which),
        Cmd::Demo {
            workers,
            lock_mode,
            seed,
            increments,
        } => match run_demo(&DemoConfig {
            workers,
            lock_mode,
            seed,
            increments,
        }) {
            Ok(out) => {
                print!("{}", out.kv_text());
                print!("{}", out.dumps);
                if out.violation {
                    2
                } else {
                    0
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                1
            }
        },
        Cmd::Explore {
            target,
            threads,
            steps,
            self_wake_timeout,
        } => match explore_cmd::run(&explore_cmd::ExploreArgs {
            target,
            threads,
            steps,
            self_wake_timeout,
        }) {
            Ok((out, code)) => {
                print!("{out}");
                code
            }
            Err(e) => {
                eprintln!("error: {e}");
                1
            }
        },
        Cmd::Limits {
            files,
            unprivileged,
            real_os,
        } => {
            let (out, code) = limits::run(&limits::LimitsArgs {
                files,
                unprivileged,
                real_os,
            });
            print!("{out}");
            code
        }
    };
    std::process::exit(code);
}

fn run_bench(which: BenchCmd) -> i32 {
    match which {
        BenchCmd::Create { iters, kind } => {
            let run_thread = kind.as_deref().is_none_or(|k| k == "thread");
            let run_process = kind.as_deref().is_none_or(|k| k == "process");
            let thread = run_thread.then(|| bench_create(CreateKind::Thread, iters));
            let process = run_process.then(|| bench_create(CreateKind::Process, iters));
            println!(
                "reference_thread_us={} reference_process_us={} reference_ratio=30x",
                bench::REFERENCE_THREAD_CREATE_US,
                bench::REFERENCE_PROCESS_CREATE_US
            );
            report_pair("create", thread, process, "thread", "process")
        }
        BenchCmd::Pv { iters, kind } => {
            let run_emulated = kind.as_deref().is_none_or(|k| k == "emulated");
            let run_os = kind.as_deref().is_none_or(|k| k == "os-process");
            let emulated = run_emulated.then(|| bench_pv(PvKind::EmulatedSem, iters));
            let os = run_os.then(|| bench_pv(PvKind::OsProcessSem, iters));
            println!(
                "reference_thread_pv_us={} reference_process_pv_us={} reference_ratio=3x",
                bench::REFERENCE_THREAD_PV_US,
                bench::REFERENCE_PROCESS_PV_US
            );
            report_pair("pv", emulated, os, "emulated", "os-process")
        }
    }
}

/// Prints whatever ran; when both sides ran, asserts the cheap side really
/// is cheaper. Only the ordering is a claim, never the numbers.
fn report_pair(
    family: &str,
    cheap: Option<Result<bench::BenchResult, BenchError>>,
    expensive: Option<Result<bench::BenchResult, BenchError>>,
    cheap_name: &str,
    expensive_name: &str,
) -> i32 {
    let mut code = 0;
    let cheap = match cheap {
        Some(Ok(r)) => {
            println!("{}", r.kv());
            Some(r)
        }
        Some(Err(e)) => {
            eprintln!("error: {family} {cheap_name}: {e}");
            return 1;
        }
        None => None,
    };
    let expensive = match expensive {
        Some(Ok(r)) => {
            println!("{}", r.kv());
            Some(r)
        }
        Some(Err(BenchError::Unsupported(why))) => {
            println!("{family}_{expensive_name}=unsupported reason=\"{why}\"");
            None
        }
        Some(Err(e)) => {
            eprintln!("error: {family} {expensive_name}: {e}");
            return 1;
        }
        None => None,
    };
    if let (Some(c), Some(e)) = (cheap, expensive) {
        let ok = c.mean_us < e.mean_us;
        println!(
            "direction_ok={} ratio={:.2}",
            ok,
            e.mean_us / c.mean_us.max(f64::MIN_POSITIVE)
        );
        if !ok {
            code = 2;
        }
    }
    code
}
