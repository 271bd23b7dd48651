use crate::{blocking, ApiError, ApiResult};
use axum::Json;
use coopbench_client::{HttpSchemaProposer, HttpTransport};
use coopbench_core::agents::Transport;
use coopbench_core::api::*;
use coopbench_core::bench::{
    compare_human as compare, discover_scenarios, load_records, rebuild_report, replay_demo, run_suite, run_sweep,
    trace_digest, BuiltinSuite, DemonstrationLog, HumanComparison, RunOptions, SuiteOutcome, SweepReport,
    TransportFactory,
};
use coopbench_core::gen::{
    difficulty_screen, duplicate_filter, export_batch, fingerprint, instantiate as build, parse_review, propose as make,
    BatchIndex, Proposer,
};
use coopbench_core::real2sim::{convert_file, ConversionReport, RoleOptions};
use coopbench_core::scenario::{
    parse_lane_graph, parse_scenario_dir, scenario_statistics, serialize_scenario_dir, suite_statistics, LaneGraph,
    Scenario,
};
use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

fn run_options(stop_after: Option<usize>, workers: Option<usize>) -> RunOptions {
    let transports: TransportFactory = Arc::new(|endpoint: &str| Box::new(HttpTransport::new(endpoint)) as Box<dyn Transport>);
    RunOptions {
        stop_after,
        workers,
        transports: Some(transports),
    }
}

pub async fn run(Json(req): Json<RunRequest>) -> ApiResult<SuiteOutcome> {
    blocking(move || {
        let opts = run_options(req.stop_after, req.workers);
        run_suite(&req.config, &opts).map_err(ApiError::bad)
    })
    .await
    .map(Json)
}

pub async fn sweep(Json(req): Json<SweepRequest>) -> ApiResult<SweepReport> {
    blocking(move || {
        let grid = req
            .grid
            .or_else(|| req.config.sweep.clone())
            .ok_or_else(|| ApiError::bad("no sweep grid in the request or the config"))?;
        run_sweep(&req.config, &grid, &run_options(None, req.workers)).map_err(ApiError::bad)
    })
    .await
    .map(Json)
}

pub async fn propose(Json(req): Json<ProposeRequest>) -> ApiResult<ProposeResponse> {
    blocking(move || {
        let schemas = match &req.endpoint {
            None => make(req.category, req.count, &mut Proposer::Template { seed: req.seed }),
            Some(url) => {
                let mut client = HttpSchemaProposer::new(url.clone());
                make(
                    req.category,
                    req.count,
                    &mut Proposer::External {
                        client: &mut client,
                        examples: req.examples.clone(),
                    },
                )
            }
        };
        schemas
            .map(|schemas| ProposeResponse { schemas })
            .map_err(|e| match e {
                coopbench_core::gen::GenError::Proposal { message, raw, .. } if !raw.is_empty() => {
                    ApiError::bad(format!("{message}\nlast response:\n{raw}"))
                }
                e => ApiError::bad(e),
            })
    })
    .await
    .map(Json)
}

pub async fn instantiate(Json(req): Json<InstantiateRequest>) -> ApiResult<InstantiateResponse> {
    blocking(move || {
        let mut written = Vec::new();
        let mut failed = Vec::new();
        for (index, schema) in req.schemas.iter().enumerate() {
            let built = build(schema).and_then(|s| {
                let dir = req.out.join(&s.id);
                serialize_scenario_dir(&s, &dir)?;
                Ok((s.id, dir))
            });
            match built {
                Ok((id, dir)) => written.push(Instantiated { index, id, dir }),
                Err(e) => failed.push(SchemaFailure {
                    index,
                    error: e.to_string(),
                }),
            }
        }
        Ok(InstantiateResponse { written, failed })
    })
    .await
    .map(Json)
}

/// Loads every scenario under `root`, reporting all failures together.
fn load_pool(root: &Path) -> Result<Vec<Scenario>, ApiError> {
    let dirs = discover_scenarios(root).map_err(|e| ApiError::bad(format!("{}: {e}", root.display())))?;
    let mut out = Vec::new();
    let mut problems = Vec::new();
    for d in dirs {
        match parse_scenario_dir(&d) {
            Ok(s) => out.push(s),
            Err(e) => problems.push(format!("{}: {e}", d.display())),
        }
    }
    if !problems.is_empty() {
        return Err(ApiError::bad(problems.join("\n")));
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

fn screened(pool: &[Scenario]) -> (Vec<Scenario>, Vec<String>) {
    let unique = duplicate_filter(pool);
    let kept: BTreeSet<&str> = unique.iter().map(|s| s.id.as_str()).collect();
    let dropped = pool.iter().filter(|s| !kept.contains(s.id.as_str())).map(|s| s.id.clone()).collect();
    (unique, dropped)
}

pub async fn screen(Json(req): Json<ScreenRequest>) -> ApiResult<ScreenResponse> {
    blocking(move || {
        let pool = load_pool(&req.pool)?;
        let (unique, duplicates) = screened(&pool);
        let entries = unique
            .iter()
            .map(|s| ScreenEntry {
                id: s.id.clone(),
                fingerprint: fingerprint(s),
                result: difficulty_screen(s, &req.band),
            })
            .collect();
        Ok(ScreenResponse {
            pool_size: pool.len(),
            duplicates,
            entries,
        })
    })
    .await
    .map(Json)
}

pub async fn export(Json(req): Json<ExportRequest>) -> ApiResult<BatchIndex> {
    blocking(move || {
        let review = match &req.review {
            Some(text) => parse_review(text).map_err(ApiError::bad)?,
            None => Default::default(),
        };
        let pool = load_pool(&req.pool)?;
        let (unique, _) = screened(&pool);
        let batch: Vec<_> = unique
            .into_iter()
            .map(|s| {
                let r = difficulty_screen(&s, &req.band);
                (s, r)
            })
            .collect();
        export_batch(&batch, &req.band, &review, &req.out).map_err(ApiError::bad)
    })
    .await
    .map(Json)
}

fn map_library(extra: Option<&Path>) -> Result<Vec<LaneGraph>, ApiError> {
    let mut lib = coopbench_core::maps::library();
    let Some(dir) = extra else {
        return Ok(lib);
    };
    let entries = std::fs::read_dir(dir).map_err(|e| ApiError::bad(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "lanes"))
        .collect();
    paths.sort();
    for p in paths {
        let text = std::fs::read_to_string(&p).map_err(|e| ApiError::bad(format!("{}: {e}", p.display())))?;
        lib.push(parse_lane_graph(&text).map_err(|e| ApiError::bad(format!("{}: {e}", p.display())))?);
    }
    Ok(lib)
}

pub async fn convert(Json(req): Json<ConvertRequest>) -> ApiResult<ConversionReport> {
    blocking(move || {
        let lib = map_library(req.maps.as_deref())?;
        let opts = RoleOptions { reactive: req.reactive };
        convert_file(&req.log, &lib, &opts, &req.out)
            .map(|(_, report)| report)
            .map_err(ApiError::bad)
    })
    .await
    .map(Json)
}

pub async fn stats(Json(req): Json<StatsRequest>) -> ApiResult<StatsResponse> {
    blocking(move || {
        let mut all = Vec::new();
        for root in &req.roots {
            all.extend(load_pool(root)?);
        }
        for b in &req.builtin {
            all.extend(b.scenarios());
        }
        if all.is_empty() {
            return Err(ApiError::bad("no scenarios selected"));
        }
        let scenarios = all
            .iter()
            .map(|s| ScenarioStatsRow {
                id: s.id.clone(),
                bucket: s.bucket,
                category: s.category,
                stats: scenario_statistics(s),
            })
            .collect();
        Ok(StatsResponse {
            scenarios,
            groups: suite_statistics(&all),
        })
    })
    .await
    .map(Json)
}

pub async fn report(Json(req): Json<ReportRequest>) -> ApiResult<ReportResponse> {
    blocking(move || {
        let report = rebuild_report(&req.results).map_err(ApiError::bad)?;
        Ok(ReportResponse {
            text: report.render(),
            scatter_csv: report.correlation.as_ref().map(|c| c.scatter_csv()),
            report,
        })
    })
    .await
    .map(Json)
}

fn load_demo(path: &Path) -> Result<DemonstrationLog, ApiError> {
    DemonstrationLog::load(path).map_err(ApiError::bad)
}

pub async fn replay(Json(req): Json<ReplayRequest>) -> ApiResult<ReplayResponse> {
    blocking(move || {
        let log = load_demo(&req.demo)?;
        let scenario = match &req.scenario {
            Some(dir) => parse_scenario_dir(dir).map_err(ApiError::bad)?,
            None => BuiltinSuite::find(&log.scenario_id)
                .ok_or_else(|| ApiError::bad(format!("scenario {} is not built in; pass its directory", log.scenario_id)))?,
        };
        let (result, trace) = replay_demo(&log, &scenario).map_err(ApiError::bad)?;
        let digest = trace_digest(&trace);
        Ok(ReplayResponse {
            identical: result == log.outcome && digest == log.trace_digest,
            result,
            trace_digest: digest,
        })
    })
    .await
    .map(Json)
}

pub async fn compare_human(Json(req): Json<CompareHumanRequest>) -> ApiResult<HumanComparison> {
    blocking(move || {
        let demos = req.demos.iter().map(|p| load_demo(p)).collect::<Result<Vec<_>, _>>()?;
        let results: Vec<_> = load_records(&req.results)
            .map_err(ApiError::bad)?
            .into_iter()
            .flat_map(|r| r.results)
            .collect();
        compare(&demos, &results).map_err(ApiError::bad)
    })
    .await
    .map(Json)
}
