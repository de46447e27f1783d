use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dtnsim::api::{self, ApiConfig};
use dtnsim::bsp;
use dtnsim::emu::{run_emulation, EmuReport, EmuSpec};
use dtnsim::sim::{Engine, MetricsRecord, ScenarioSpec};
use dtnsim::store::Store;

#[derive(Parser)]
#[command(name = "dtnsim", version, about = "Delay-tolerant networking simulator for ISS to ground links")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a simulation experiment: E1, E2, E4, E5 or a scenario TOML file.
    RunExperiment {
        profile: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        /// Also persist bundles, transmissions and acks to this SQLite file.
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Run an emulation experiment over loopback TCP: E3, E7, E8 or a TOML file.
    RunEmulation {
        profile: String,
        /// Single loss level instead of the profile's sweep.
        #[arg(long)]
        loss: Option<f64>,
        /// Wall-clock budget per level, seconds.
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// First port; 0 picks free ports.
        #[arg(long)]
        base_port: Option<u16>,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Serve the REST and telemetry API. Flags override DTNSIM_* variables.
    Serve {
        #[arg(long)]
        listen: Option<std::net::SocketAddr>,
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        tle: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        speed: Option<f64>,
        #[arg(long)]
        scenario: Option<String>,
    },
    /// Dump every table of a store as CSV.
    Export {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value = "export")]
        out: PathBuf,
    },
}

type CliResult = Result<(), Box<dyn std::error::Error>>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::RunExperiment {
            profile,
            seed,
            out,
            store,
        } => run_experiment(&profile, seed, &out, store.as_deref()),
        Cmd::RunEmulation {
            profile,
            loss,
            duration,
            seed,
            base_port,
            out,
        } => run_emu(&profile, loss, duration, seed, base_port, &out),
        Cmd::Serve {
            listen,
            store,
            tle,
            seed,
            speed,
            scenario,
        } => serve(listen, store, tle, seed, speed, scenario),
        Cmd::Export { store, out } => export(&store, &out),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn write_metrics(out: &Path, m: &MetricsRecord) -> CliResult {
    fs::create_dir_all(out)?;
    fs::write(out.join(format!("{}.summary.json", m.scenario)), m.summary_json())?;
    fs::write(out.join(format!("{}.traces.csv", m.scenario)), m.traces_csv())?;
    Ok(())
}

fn print_metrics(label: &str, m: &MetricsRecord) {
    let lat = m
        .latency
        .as_ref()
        .map(|l| format!("mean {:.1}s median {:.1}s p95 {:.1}s max {:.1}s", l.mean_s, l.median_s, l.p95_s, l.max_s))
        .unwrap_or_else(|| "no deliveries".into());
    println!(
        "{:<24} delivered {}/{} ({:.0}%)  {lat}  hops {}  retx {}  naks {}  fragments {}",
        if label.is_empty() { &m.scenario } else { label },
        m.delivered,
        m.bundles,
        m.delivery_ratio * 100.0,
        m.mean_hops.map_or("-".into(), |h| format!("{h:.2}")),
        m.retransmissions,
        m.naks,
        m.fragments,
    );
}

fn run_experiment(profile: &str, seed: Option<u64>, out: &Path, store: Option<&Path>) -> CliResult {
    if profile.eq_ignore_ascii_case("E2") {
        return security_profile(seed.unwrap_or(2), out);
    }
    let mut spec = if profile.ends_with(".toml") {
        ScenarioSpec::load(profile)?
    } else {
        ScenarioSpec::profile(profile)?
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let store = store.map(Store::open).transpose()?;
    for (label, level) in spec.levels() {
        level.validate()?;
        let mut engine = Engine::from_spec(&level)?;
        if store.is_some() {
            engine.enable_journal();
        }
        engine.run_to_completion()?;
        if let Some(s) = &store {
            s.persist_journal(&engine.drain_journal())?;
        }
        let m = engine.metrics();
        print_metrics(&label, &m);
        write_metrics(out, &m)?;
        fs::write(out.join(format!("{}.trace.log", m.scenario)), engine.trace_text())?;
    }
    Ok(())
}

fn security_profile(seed: u64, out: &Path) -> CliResult {
    let key = bsp::derive_key(&dtnsim::sim::KeySpec::default().key_config())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = bsp::overhead_profile(&key, &bsp::PROFILE_SIZES, 100, &mut rng)?;
    println!("{:>10} {:>10} {:>9} {:>11} {:>9} {:>9}", "plain B", "enc B", "overhead", "encrypt ms", "sign ms", "total ms");
    for r in &rows {
        println!(
            "{:>10} {:>10} {:>8.1}% {:>11.4} {:>9.4} {:>9.4}",
            r.plaintext_bytes, r.encrypted_bytes, r.overhead_pct, r.encrypt_ms, r.sign_ms, r.total_ms
        );
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("E2.summary.json"), serde_json::to_string_pretty(&rows)?)?;
    Ok(())
}

fn print_emu(r: &EmuReport) {
    print_metrics(&r.name, &r.metrics);
    println!(
        "{:<24} sends ok {}/{}  observed loss {:.1}%  mean rtt {}  wall {:.1}s{}",
        "",
        r.sends_ok,
        r.sends_total,
        r.observed_loss * 100.0,
        r.mean_rtt_ms.map_or("-".into(), |x| format!("{x:.0} ms")),
        r.wall_time_s,
        if r.completed { "" } else { "  (budget exhausted)" },
    );
    if !r.raw.is_empty() {
        println!("{:<24} raw transfers ok {}/{}", "", r.raw_delivered(), r.raw.len());
    }
}

fn run_emu(
    profile: &str,
    loss: Option<f64>,
    duration: Option<f64>,
    seed: Option<u64>,
    base_port: Option<u16>,
    out: &Path,
) -> CliResult {
    let mut spec = if profile.ends_with(".toml") {
        EmuSpec::load(profile)?
    } else {
        EmuSpec::profile(profile)?
    };
    if let Some(l) = loss {
        spec.loss = l;
        spec.sweep.losses.clear();
    }
    if let Some(d) = duration {
        spec.duration_s = d;
    }
    if let Some(s) = seed {
        spec.seed = s;
    }
    if let Some(p) = base_port {
        spec.base_port = p;
    }
    fs::create_dir_all(out)?;
    for (_, level) in spec.levels() {
        let r = run_emulation(&level)?;
        print_emu(&r);
        write_metrics(out, &r.metrics)?;
        fs::write(out.join(format!("{}.emulation.json", r.name)), serde_json::to_string_pretty(&r)?)?;
    }
    Ok(())
}

fn serve(
    listen: Option<std::net::SocketAddr>,
    store: Option<PathBuf>,
    tle: Option<PathBuf>,
    seed: Option<u64>,
    speed: Option<f64>,
    scenario: Option<String>,
) -> CliResult {
    let mut cfg = ApiConfig::from_env()?;
    cfg.listen = listen.unwrap_or(cfg.listen);
    cfg.store = store.or(cfg.store);
    cfg.tle = tle.or(cfg.tle);
    cfg.seed = seed.unwrap_or(cfg.seed);
    cfg.speed = speed.unwrap_or(cfg.speed);
    cfg.scenario = scenario.or(cfg.scenario);
    let rt = tokio::runtime::Runtime::new()?;
    println!("listening on {}", cfg.listen);
    rt.block_on(api::serve(cfg, async {
        let _ = tokio::signal::ctrl_c().await;
    }))?;
    Ok(())
}

fn export(store: &Path, out: &Path) -> CliResult {
    if !store.exists() {
        return Err(format!("{} does not exist", store.display()).into());
    }
    let s = Store::open(store)?;
    for p in s.export_csv(out)? {
        println!("{}", p.display());
    }
    Ok(())
}
