//! `driftwatch`: run fleet simulations, serve the monitor API, or write a
//! weather schedule.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use chrono::NaiveDate;
use clap::{Parser, Subcommand};
use driftwatch_core::model::{train_clean, SyntheticTask, TaskConfig};
use driftwatch_core::weather::{ScheduleParams, WeatherSchedule};
use driftwatch_service::{api, MonitorService, ScheduleWeather, ServiceConfig};
use driftwatch_sim::{default_locations, SimConfig, Strategy, WeatherSource};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "driftwatch", version, about = "Drift monitoring for on-device classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replay a simulated fleet under one or all adaptation strategies.
    Simulate {
        /// Simulation config (TOML). Defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// no-adapt, adapt-all, by-cause or all.
        #[arg(long, default_value = "all")]
        strategy: String,
        /// Override the stream seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the JSON report(s) here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the monitoring API.
    Serve {
        /// Serve config (TOML). Defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the listen address.
        #[arg(long)]
        listen: Option<String>,
    },
    /// Generate a weather schedule CSV.
    Schedule {
        #[arg(long, default_value = "2020-01-01")]
        start: NaiveDate,
        #[arg(long, default_value_t = 111)]
        days: usize,
        #[arg(long, default_value_t = 7)]
        locations: usize,
        #[arg(long, default_value_t = driftwatch_sim::config::BUNDLED_SCHEDULE_SEED)]
        seed: u64,
        /// Output path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// What `serve` needs besides the service itself: the base model and the
/// weather source used to enrich entries.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct ServeConfig {
    service: ServiceConfig,
    task: TaskConfig,
    model_seed: u64,
    weather: WeatherSource,
    locations: Vec<String>,
    start: NaiveDate,
    days: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        let sim = SimConfig::default();
        Self {
            service: ServiceConfig::default(),
            task: sim.task,
            model_seed: sim.model_seed,
            weather: sim.weather,
            locations: sim.locations,
            start: sim.start,
            days: sim.days,
        }
    }
}

fn read_toml<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn simulate(config: Option<&Path>, strategy: &str, seed: Option<u64>, out: Option<&Path>) -> Result<()> {
    let mut cfg: SimConfig = read_toml(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let strategies: Vec<Strategy> = match strategy {
        "all" => Strategy::ALL.to_vec(),
        s => vec![s.parse()?],
    };
    let prepared = driftwatch_sim::Prepared::new(&cfg)?;
    let mut reports = Vec::new();
    for s in strategies {
        let report = driftwatch_sim::run_prepared(&prepared, s)?;
        print!("{}", report.table());
        println!("hash {}\n", report.hash);
        reports.push(report);
    }
    if let Some(path) = out {
        let json = if reports.len() == 1 {
            serde_json::to_string_pretty(&reports[0])?
        } else {
            serde_json::to_string_pretty(&reports)?
        };
        std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

async fn serve(config: Option<&Path>, listen: Option<String>) -> Result<()> {
    let mut cfg: ServeConfig = read_toml(config)?;
    if let Some(l) = listen {
        cfg.service.listen = l;
    }
    cfg.service.validate()?;
    let world = SimConfig {
        task: cfg.task.clone(),
        model_seed: cfg.model_seed,
        weather: cfg.weather.clone(),
        locations: cfg.locations.clone(),
        start: cfg.start,
        days: cfg.days,
        ..SimConfig::default()
    };
    let schedule = world.schedule()?;
    let task = SyntheticTask::generate(&cfg.task, cfg.model_seed)?;
    let model = train_clean(&task, cfg.model_seed)?;
    let svc = MonitorService::new(cfg.service.clone(), model, Arc::new(ScheduleWeather::new(schedule)))?;
    let listener = tokio::net::TcpListener::bind(&cfg.service.listen)
        .await
        .with_context(|| format!("binding {}", cfg.service.listen))?;
    eprintln!("listening on {}", listener.local_addr()?);
    api::serve(Arc::new(svc), listener).await?;
    Ok(())
}

fn schedule(start: NaiveDate, days: usize, locations: usize, seed: u64, out: Option<&Path>) -> Result<()> {
    if locations == 0 {
        bail!("need at least one location");
    }
    let sched = WeatherSchedule::generate(&default_locations(locations), start, days, &ScheduleParams::default(), seed)?;
    let mut buf = Vec::new();
    sched.write_csv(&mut buf)?;
    match out {
        Some(p) => std::fs::write(p, buf).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{}", String::from_utf8(buf)?),
    }
    eprintln!("drifted share of days: {:.3}", sched.drift_fraction());
    Ok(())
}

#[tokio::main]
async fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate { config, strategy, seed, out } => {
            tokio::task::spawn_blocking(move || simulate(config.as_deref(), &strategy, seed, out.as_deref())).await?
        }
        Command::Serve { config, listen } => serve(config.as_deref(), listen).await,
        Command::Schedule { start, days, locations, seed, out } => schedule(start, days, locations, seed, out.as_deref()),
    }
}
