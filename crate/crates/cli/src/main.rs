use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use coopbench_client::Client;
use coopbench_core::api::*;
use coopbench_core::bench::{load_suite_config, BuiltinSuite, SuiteConfig};
use coopbench_core::gen::{DifficultyBand, ScenarioSchema};
use coopbench_core::scenario::{ActorClass, Category};
use coopbench_server::ServerConfig;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "coopbench", version, about = "Closed-loop cooperative driving benchmark")]
struct Cli {
    /// Suite config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed list with one seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Service URL; an in-process server is started when absent.
    #[arg(long, global = true, env = "COOPBENCH_SERVER")]
    server: Option<String>,
    /// Session token for the service.
    #[arg(long, global = true, env = "COOPBENCH_TOKEN")]
    token: Option<String>,
    /// Print JSON instead of tables.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a suite; completed episodes are skipped.
    Run {
        /// Stop after this many new episodes.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Clean-vs-perturbed sweep over the config's grid.
    Sweep {
        #[arg(long, value_delimiter = ',')]
        latency: Option<Vec<u64>>,
        /// Position noise sigmas in m; rotation sigma follows in degrees at the same value.
        #[arg(long, value_delimiter = ',')]
        noise: Option<Vec<f64>>,
    },
    #[command(subcommand)]
    Gen(GenCmd),
    /// Convert a driving log into a scenario.
    Convert {
        log: PathBuf,
        /// Directory with extra `*.lanes` maps.
        #[arg(long)]
        maps: Option<PathBuf>,
        /// Actor classes driven reactively instead of replayed.
        #[arg(long, value_delimiter = ',', value_parser = named::<ActorClass>)]
        reactive: Vec<ActorClass>,
    },
    /// Route length, heading change and actor counts.
    Stats {
        roots: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', value_parser = named::<BuiltinSuite>)]
        builtin: Vec<BuiltinSuite>,
    },
    /// Rebuild the summary from stored episode records.
    Report {
        /// Suite output directory; defaults to --out or the config's.
        results: Option<PathBuf>,
    },
    /// Serve the HTTP API and live bridge.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8620")]
        listen: SocketAddr,
        #[arg(long)]
        demo_dir: Option<PathBuf>,
    },
    /// Re-execute a demonstration and check it against the recording.
    Replay {
        demo: PathBuf,
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Human demonstrations against stored policy results.
    CompareHuman {
        #[arg(required = true)]
        demos: Vec<PathBuf>,
        #[arg(long)]
        results: Option<PathBuf>,
    },
}

#[derive(Args)]
struct BandArgs {
    #[arg(long, default_value_t = 0.5)]
    ttc_low: f64,
    #[arg(long, default_value_t = 4.0)]
    ttc_high: f64,
}

impl BandArgs {
    fn band(&self) -> Result<DifficultyBand> {
        DifficultyBand::new(self.ttc_low, self.ttc_high).map_err(anyhow::Error::msg)
    }
}

#[derive(Subcommand)]
enum GenCmd {
    /// Propose schemas; writes `schemas.json` under --out.
    Propose {
        #[arg(long, value_parser = named::<Category>)]
        category: Category,
        #[arg(long, default_value_t = 10)]
        count: usize,
        /// External proposer URL; token from COOPBENCH_PROPOSER_TOKEN.
        #[arg(long)]
        endpoint: Option<String>,
        /// Few-shot example files sent to an external proposer.
        #[arg(long)]
        example: Vec<PathBuf>,
    },
    /// Build scenario directories from a schemas file.
    Instantiate { schemas: PathBuf },
    /// Deduplicate and difficulty-screen a scenario pool.
    Screen {
        pool: PathBuf,
        #[command(flatten)]
        band: BandArgs,
    },
    /// Write accepted scenarios and `index.json`.
    Export {
        pool: PathBuf,
        #[command(flatten)]
        band: BandArgs,
        /// `<id> accept|reject` annotations overriding the screen.
        #[arg(long)]
        review: Option<PathBuf>,
    },
}

/// Parses an enum from its serialized name.
fn named<T: serde::de::DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown value {s:?}"))
}

fn abs(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).with_context(|| format!("resolving {}", p.display()))
}

impl Cli {
    fn suite(&self) -> Result<SuiteConfig> {
        let path = self.config.as_deref().context("--config is required for this command")?;
        let mut cfg = load_suite_config(&abs(path)?)?;
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        cfg.out = abs(&cfg.out)?;
        Ok(cfg)
    }

    fn out(&self, default: &str) -> Result<PathBuf> {
        abs(self.out.as_deref().unwrap_or(Path::new(default)))
    }

    fn results_dir(&self, explicit: Option<&Path>) -> Result<PathBuf> {
        match (explicit, &self.out, &self.config) {
            (Some(p), _, _) => abs(p),
            (None, Some(o), _) => abs(o),
            (None, None, Some(_)) => Ok(self.suite()?.out),
            (None, None, None) => abs(Path::new("results")),
        }
    }
}

fn print<T: serde::Serialize>(json: bool, value: &T, text: impl FnOnce() -> String) {
    if json {
        println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
    } else {
        print!("{}", text());
    }
}

async fn dispatch(cli: &Cli, client: &Client) -> Result<()> {
    match &cli.cmd {
        Cmd::Run { stop_after } => {
            let req = RunRequest {
                config: cli.suite()?,
                stop_after: *stop_after,
                workers: cli.workers,
            };
            let o = client.run(&req).await?;
            print(cli.json, &o, || {
                let mut s = format!("episodes: {} total, {} executed, {} reused\n", o.total, o.executed, o.skipped);
                match &o.report {
                    Some(r) => s.push_str(&r.render()),
                    None => s.push_str("suite incomplete; rerun to resume\n"),
                }
                s
            });
        }
        Cmd::Sweep { latency, noise } => {
            let config = cli.suite()?;
            let mut grid = config.sweep.clone().unwrap_or_default();
            if let Some(l) = latency {
                grid.latency_ticks = l.clone();
            }
            if let Some(n) = noise {
                grid.noise = n.iter().map(|s| [*s, *s]).collect();
            }
            let r = client
                .sweep(&SweepRequest {
                    config,
                    grid: Some(grid),
                    workers: cli.workers,
                })
                .await?;
            print(cli.json, &r, || r.render());
        }
        Cmd::Gen(g) => gen(cli, client, g).await?,
        Cmd::Convert { log, maps, reactive } => {
            let req = ConvertRequest {
                log: abs(log)?,
                maps: maps.as_deref().map(abs).transpose()?,
                reactive: reactive.iter().copied().collect(),
                out: cli.out("scenarios")?,
            };
            let r = client.convert(&req).await?;
            print(cli.json, &r, || {
                format!(
                    "{}: rms {:.3} m, transform ({:.3}, {:.3}, {:.3} deg), {} flagged point(s)\n",
                    r.scenario_id,
                    r.rms_residual,
                    r.transform.dx,
                    r.transform.dy,
                    r.transform.theta.to_degrees(),
                    r.flagged.len()
                )
            });
        }
        Cmd::Stats { roots, builtin } => {
            let req = StatsRequest {
                roots: roots.iter().map(|r| abs(r)).collect::<Result<_>>()?,
                builtin: builtin.clone(),
            };
            let r = client.stats(&req).await?;
            print(cli.json, &r, || {
                let mut s = format!(
                    "{:<44} {:>6} {:>6} {:>10} {:>10} {:>8}\n",
                    "group", "n", "CAVs", "RL_m", "HC_deg", "actors"
                );
                for g in &r.groups {
                    s.push_str(&format!(
                        "{:<44} {:>6} {:>6.2} {:>10.1} {:>10.1} {:>8.2}\n",
                        g.group, g.count, g.mean_cavs, g.mean_route_length_m, g.mean_heading_change_deg, g.mean_actors
                    ));
                }
                s
            });
        }
        Cmd::Report { results } => {
            let dir = cli.results_dir(results.as_deref())?;
            let r = client.report(&ReportRequest { results: dir.clone() }).await?;
            if let Some(csv) = &r.scatter_csv {
                std::fs::write(dir.join("scatter.csv"), csv).context("writing scatter.csv")?;
            }
            print(cli.json, &r.report, || r.text.clone());
        }
        Cmd::Serve { .. } => unreachable!("handled before connecting"),
        Cmd::Replay { demo, scenario } => {
            let req = ReplayRequest {
                demo: abs(demo)?,
                scenario: scenario.as_deref().map(abs).transpose()?,
            };
            let r = client.replay(&req).await?;
            print(cli.json, &r, || {
                format!(
                    "{} {}: ds {:.2} rc {:.2} success {}; trace {}\n",
                    r.result.scenario_id,
                    r.result.cav_id,
                    r.result.ds,
                    r.result.rc_pct,
                    r.result.success,
                    if r.identical { "identical" } else { "DIFFERS" }
                )
            });
            if !r.identical {
                bail!("replay does not reproduce the recording");
            }
        }
        Cmd::CompareHuman { demos, results } => {
            let req = CompareHumanRequest {
                demos: demos.iter().map(|d| abs(d)).collect::<Result<_>>()?,
                results: cli.results_dir(results.as_deref())?,
            };
            let r = client.compare_human(&req).await?;
            print(cli.json, &r, || r.render());
        }
    }
    Ok(())
}

async fn gen(cli: &Cli, client: &Client, g: &GenCmd) -> Result<()> {
    match g {
        GenCmd::Propose {
            category,
            count,
            endpoint,
            example,
        } => {
            let examples = example
                .iter()
                .map(|p| std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display())))
                .collect::<Result<_>>()?;
            let req = ProposeRequest {
                category: *category,
                count: *count,
                seed: cli.seed.unwrap_or(0),
                endpoint: endpoint.clone(),
                examples,
            };
            let r = client.propose(&req).await?;
            let out = cli.out("gen")?;
            std::fs::create_dir_all(&out)?;
            let path = out.join("schemas.json");
            std::fs::write(&path, serde_json::to_string_pretty(&r.schemas)?)?;
            print(cli.json, &r, || format!("{} schema(s) written to {}\n", r.schemas.len(), path.display()));
        }
        GenCmd::Instantiate { schemas } => {
            let text = std::fs::read_to_string(schemas).with_context(|| format!("reading {}", schemas.display()))?;
            let schemas: Vec<ScenarioSchema> = serde_json::from_str(&text).context("parsing schemas")?;
            let req = InstantiateRequest {
                schemas,
                out: cli.out("gen/pool")?,
            };
            let r = client.instantiate(&req).await?;
            print(cli.json, &r, || {
                let mut s = format!("{} scenario(s) written under {}\n", r.written.len(), req.out.display());
                for f in &r.failed {
                    s.push_str(&format!("schema {}: {}\n", f.index, f.error));
                }
                s
            });
        }
        GenCmd::Screen { pool, band } => {
            let r = client
                .screen(&ScreenRequest {
                    pool: abs(pool)?,
                    band: band.band()?,
                })
                .await?;
            print(cli.json, &r, || {
                let mut s = format!("{} candidate(s), {} duplicate(s) removed\n", r.pool_size, r.duplicates.len());
                for e in &r.entries {
                    let ttc = e.result.min_ttc.map_or("inf".to_string(), |t| format!("{t:.2}"));
                    let verdict = if e.result.accept { "accept" } else { "reject" };
                    s.push_str(&format!("{:<40} min_ttc {:>6} {verdict}\n", e.id, ttc));
                }
                s
            });
        }
        GenCmd::Export { pool, band, review } => {
            let review = review
                .as_ref()
                .map(|p| std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display())))
                .transpose()?;
            let r = client
                .export(&ExportRequest {
                    pool: abs(pool)?,
                    band: band.band()?,
                    review,
                    out: cli.out("gen/batch")?,
                })
                .await?;
            print(cli.json, &r, || format!("{} of {} accepted\n", r.accepted, r.pool_size));
        }
    }
    Ok(())
}

#[tokio::main]
async fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    if let Cmd::Serve { listen, demo_dir } = &cli.cmd {
        let cfg = ServerConfig {
            token: cli.token.clone(),
            demo_dir: demo_dir.as_deref().map(abs).transpose()?,
            ..Default::default()
        };
        let listener = tokio::net::TcpListener::bind(listen).await?;
        eprintln!("coopbench listening on http://{}", listener.local_addr()?);
        coopbench_server::serve(listener, cfg).await?;
        return Ok(());
    }
    let (client, _local) = match &cli.server {
        Some(url) => (Client::new(url.clone()).with_token(cli.token.clone()), None),
        None => {
            let cfg = ServerConfig {
                token: cli.token.clone(),
                ..Default::default()
            };
            let (addr, task) = coopbench_server::spawn(([127, 0, 0, 1], 0).into(), cfg).await?;
            (Client::new(format!("http://{addr}")).with_token(cli.token.clone()), Some(task))
        }
    };
    dispatch(&cli, &client).await
}
