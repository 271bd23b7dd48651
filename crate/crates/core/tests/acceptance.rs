//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line.
//! Run with `cargo test -p coopbench-core --test acceptance -- --nocapture`.

use coopbench_core::agents::{wait_graph_acyclic, PolicyKind};
use coopbench_core::bench::{run_suite, BuiltinSuite, RunOptions, SuiteConfig};
use coopbench_core::crafted::{junction_conflict_suite, occluded_crossing_suite, straight_route};
use coopbench_core::gen::{
    difficulty_screen, duplicate_filter, instantiate, propose, DifficultyBand, Proposer,
};
use coopbench_core::geometry::{wrap_angle, OrientedBox, Pose2, Vec2};
use coopbench_core::maps;
use coopbench_core::metrics::{
    ade, ap_at_iou, driving_score, harmonic_mean_ds_sr, iou_bev, pearson, sample_violates, spearman, EpisodeResult,
    InfractionKind, OpenLoopSample,
};
use coopbench_core::real2sim::{
    assign_roles, convert_log, estimate_alignment, synthetic_log, transform_log, AlignmentTransform, RoleOptions,
    SyntheticSpec,
};
use coopbench_core::rng::substream;
use coopbench_core::scenario::{validate_scenario, ActorBehavior, ActorTrack, Category, Scenario};
use coopbench_core::sim::{collision_check, run_episode, Bindings, Episode, EpisodeConfig, EpisodeOutput, DT};
use coopbench_core::v2x::{Channel, ChannelConfig, Payload};
use rand::Rng;
use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

fn verdict(name: &str, ok: bool, detail: String) {
    if ok {
        println!("PASS {name}: {detail}");
    } else {
        println!("FAIL {name}: {detail}");
    }
    assert!(ok, "{name}: {detail}");
}

fn run(s: &Scenario, kind: PolicyKind, cfg: &EpisodeConfig, seed: u64) -> EpisodeOutput {
    run_episode(s, &Bindings::uniform(s, kind), cfg, seed).unwrap()
}

fn twenty_scenarios() -> Vec<Scenario> {
    occluded_crossing_suite()
        .into_iter()
        .map(|c| c.scenario)
        .chain(junction_conflict_suite().into_iter().map(|c| c.scenario))
        .collect()
}

const POLICIES: [PolicyKind; 3] = [PolicyKind::Single, PolicyKind::CoopPerception, PolicyKind::Negotiation];

#[test]
fn determinism() {
    let started = Instant::now();
    let cfg = EpisodeConfig::default();
    let mut mismatched = Vec::new();
    let mut episodes = 0;
    for s in twenty_scenarios() {
        for p in POLICIES {
            let a = run(&s, p.clone(), &cfg, 7);
            let b = run(&s, p.clone(), &cfg, 7);
            episodes += 1;
            if a.trace.to_text() != b.trace.to_text() || a.results != b.results {
                mismatched.push(format!("{}/{p:?}", s.id));
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(
        "determinism",
        mismatched.is_empty() && episodes == 60 && secs < 300.0,
        format!("{episodes} episode pairs, {} differing {mismatched:?}, {secs:.1} s", mismatched.len()),
    );
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn metric_exactness() {
    let cfg = EpisodeConfig::default();
    let mut results: Vec<EpisodeResult> = Vec::new();
    for s in twenty_scenarios() {
        for p in POLICIES {
            results.extend(run(&s, p, &cfg, 0).results);
        }
    }
    let ds_bad = results
        .iter()
        .filter(|r| {
            let ip: f64 = r.infractions.iter().map(|e| e.coefficient).product();
            !close(r.ip, ip, 1e-12) || !close(r.ds, r.rc_pct * ip, 1e-12) || !close(driving_score(r.rc_pct, r.ip), r.ds, 1e-12)
        })
        .count();

    // five hand points
    let x = [1.0, 2.0, 3.0, 4.0, 5.0];
    let y = [2.0, 1.0, 4.0, 3.0, 7.0];
    // mean x 3, mean y 3.4; Sxy = 12, Sxx = 10, Syy = 21.2
    let r_want = 12.0 / (10.0f64 * 21.2).sqrt();
    // ranks of y: 2 1 4 3 5, d = -1 1 -1 1 0, rho = 1 - 6*4/(5*24)
    let rho_want = 1.0 - 24.0 / 120.0;
    let hm_want = 2.0 * 60.0 * 40.0 / 100.0;
    let plan: Vec<Vec2> = x.iter().zip(&y).map(|(a, b)| Vec2::new(*a, *b)).collect();
    let gt: Vec<Vec2> = plan.iter().map(|p| *p + Vec2::new(3.0, 4.0)).collect();
    let checks = [
        ("pearson", pearson(&x, &y), r_want),
        ("spearman", spearman(&x, &y), rho_want),
        ("harmonic", harmonic_mean_ds_sr(60.0, 40.0), hm_want),
        ("harmonic_zero", harmonic_mean_ds_sr(0.0, 0.0), 0.0),
        ("ade", ade(&plan, &gt).unwrap(), 5.0),
    ];
    let off: Vec<_> = checks.iter().filter(|c| !close(c.1, c.2, 1e-9)).collect();
    verdict(
        "metric_exactness",
        ds_bad == 0 && off.is_empty() && !results.is_empty(),
        format!("{} episode results, {ds_bad} with DS != RC*IP, closed-form mismatches {off:?}", results.len()),
    );
}

fn bare_sample() -> OpenLoopSample {
    OpenLoopSample {
        scenario_id: "s".into(),
        cav_id: "c".into(),
        tick: 0,
        gt_boxes: vec![],
        predictions: vec![],
        origin: Vec2::ZERO,
        origin_yaw: 0.0,
        plan: vec![],
        gt_future: vec![],
        others_future: vec![],
        grid_dt: 0.5,
    }
}

/// Plan at 10 m/s along +x; at t = 3 s the plan sits at 30 m, so an object
/// standing at 30 + 10·ttc is reached in exactly `ttc`.
fn ttc_sample(ttc: f64, lateral: f64) -> OpenLoopSample {
    let plan: Vec<Vec2> = (1..=6).map(|k| Vec2::new(5.0 * k as f64, 0.0)).collect();
    let obj = Vec2::new(30.0 + 10.0 * ttc, lateral);
    OpenLoopSample {
        plan: plan.clone(),
        gt_future: plan,
        others_future: vec![vec![obj; 7]],
        ..bare_sample()
    }
}

#[test]
fn threshold_boundaries() {
    let at = !sample_violates(&ttc_sample(0.9, 0.0));
    let below = sample_violates(&ttc_sample(0.899, 0.0));
    let lateral = !sample_violates(&ttc_sample(0.5, 3.5));
    let inside = sample_violates(&ttc_sample(0.5, 3.49));
    let g = OrientedBox::new(Vec2::new(0.0, 0.0), 2.0, 1.0, 0.0);
    let p = OrientedBox::new(Vec2::new(-0.5, 0.0), 1.0, 1.0, 0.0);
    let iou = iou_bev(&g, &p);
    let ap = ap_at_iou(
        &[OpenLoopSample {
            gt_boxes: vec![g],
            predictions: vec![(p, 1.0)],
            ..bare_sample()
        }],
        0.5,
    );
    verdict(
        "threshold_boundaries",
        at && below && lateral && inside && iou == 0.5 && ap == 1.0,
        format!("ttc0.9 clear {at}, ttc0.899 flagged {below}, lateral3.5 clear {lateral}, 3.49 flagged {inside}, iou {iou}, ap {ap}"),
    );
}

#[test]
fn channel_latency_and_noise() {
    // latency over random schedules
    let mut late = 0;
    let mut checked = 0;
    for k in 0..1000u64 {
        let mut rng = substream(k, &["acceptance-schedule"]);
        let cfg = ChannelConfig {
            latency_ticks: 6,
            ..Default::default()
        };
        let mut ch = Channel::new(cfg, k);
        let ids = ["a", "b", "c"];
        for id in ids {
            ch.register(id);
        }
        let n = rng.random_range(1..20);
        let mut plan: BTreeMap<u64, Vec<&str>> = BTreeMap::new();
        for _ in 0..n {
            plan.entry(rng.random_range(0..60)).or_default().push(ids[rng.random_range(0..3)]);
        }
        let mut sent: BTreeMap<(String, u64), u64> = BTreeMap::new();
        for now in 0..80u64 {
            for s in plan.get(&now).into_iter().flatten() {
                let payload = Payload::RouteAnnounce {
                    route: vec![],
                    speed: 0.0,
                    half_length: 2.0,
                };
                let seq = ch.send(s, now, payload);
                sent.insert((s.to_string(), seq), now);
            }
            for r in ids {
                for m in ch.deliver_due(now, r) {
                    checked += 1;
                    if now != sent[&(m.sender.clone(), m.seq)] + 6 {
                        late += 1;
                    }
                }
            }
        }
        for r in ids {
            late += ch.pending(r);
        }
    }

    // noise through send/deliver
    let n = 10_000;
    let cfg = ChannelConfig {
        pos_noise_sigma_m: 0.6,
        rot_noise_sigma_deg: 0.6,
        ..Default::default()
    };
    let mut ch = Channel::new(cfg, 42);
    ch.register("tx");
    ch.register("rx");
    let (mut xs, mut ys, mut yaws) = (Vec::new(), Vec::new(), Vec::new());
    for t in 0..n as u64 {
        ch.send(
            "tx",
            t,
            Payload::PerceptionShare {
                detections: vec![],
                sender_pose: Pose2::new(0.0, 0.0, 0.0),
            },
        );
        for m in ch.deliver_due(t, "rx") {
            if let Payload::PerceptionShare { sender_pose, .. } = m.payload {
                xs.push(sender_pose.x);
                ys.push(sender_pose.y);
                yaws.push(wrap_angle(sender_pose.yaw).to_degrees());
            }
        }
    }
    let stats = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        (m, var.sqrt())
    };
    let mut noise_ok = xs.len() == n;
    let mut detail = String::new();
    for (name, v) in [("x", &xs), ("y", &ys), ("yaw_deg", &yaws)] {
        let (m, sd) = stats(v);
        let ok = (sd - 0.6).abs() <= 0.05 * 0.6 && m.abs() <= 3.0 * 0.6 / (n as f64).sqrt();
        noise_ok &= ok;
        detail.push_str(&format!(" {name} mean {m:+.4} sd {sd:.4};"));
    }
    verdict(
        "channel_latency_and_noise",
        late == 0 && checked > 0 && noise_ok,
        format!("{checked} deliveries over 1000 schedules, {late} off by latency;{detail} {} draws", xs.len()),
    );
}

/// Maximum matching among the top-k predictions for every k, then all-point AP.
fn brute_ap(gt: &[OrientedBox], preds: &[(OrientedBox, f64)], thr: f64) -> f64 {
    if gt.is_empty() {
        return if preds.is_empty() { 1.0 } else { 0.0 };
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].1.total_cmp(&preds[a].1));
    fn best(adj: &[Vec<bool>], i: usize, used: &mut [bool]) -> usize {
        if i == adj.len() {
            return 0;
        }
        let mut m = best(adj, i + 1, used);
        for g in 0..used.len() {
            if adj[i][g] && !used[g] {
                used[g] = true;
                m = m.max(1 + best(adj, i + 1, used));
                used[g] = false;
            }
        }
        m
    }
    let mut curve = Vec::new();
    let mut prev = 0;
    let mut tp = 0.0;
    for k in 1..=order.len() {
        let adj: Vec<Vec<bool>> = order[..k]
            .iter()
            .map(|&p| gt.iter().map(|g| iou_bev(&preds[p].0, g) >= thr).collect())
            .collect();
        let m = best(&adj, 0, &mut vec![false; gt.len()]);
        if m > prev {
            tp += 1.0;
        }
        prev = m;
        curve.push((tp / gt.len() as f64, tp / k as f64));
    }
    let mut area = 0.0;
    let mut r_prev = 0.0;
    for i in 0..curve.len() {
        if curve[i].0 > r_prev {
            let p = curve[i..].iter().map(|c| c.1).fold(0.0, f64::max);
            area += (curve[i].0 - r_prev) * p;
            r_prev = curve[i].0;
        }
    }
    area
}

#[test]
fn ap_against_exhaustive_matching() {
    let mut worst = 0.0f64;
    let mut bad = 0;
    for k in 0..200u64 {
        let mut rng = substream(k, &["acceptance-ap"]);
        let n_gt = rng.random_range(0..=4);
        let mut cells: Vec<usize> = (0..n_gt).map(|_| rng.random_range(0..16)).collect();
        cells.sort();
        cells.dedup();
        let gt: Vec<OrientedBox> = cells
            .iter()
            .map(|c| OrientedBox::new(Vec2::new(2.5 * (c % 4) as f64, 2.5 * (c / 4) as f64), 1.5, 1.0, 0.0))
            .collect();
        let n_pred = rng.random_range(0..=6);
        let preds: Vec<(OrientedBox, f64)> = (0..n_pred)
            .map(|i| {
                let center = if !gt.is_empty() && rng.random_bool(0.6) {
                    gt[rng.random_range(0..gt.len())].center
                        + Vec2::new(rng.random_range(-0.6..0.6), rng.random_range(-0.4..0.4))
                } else {
                    Vec2::new(rng.random_range(-1.0..9.0), rng.random_range(-1.0..9.0))
                };
                let yaw = rng.random_range(-0.3..0.3);
                (OrientedBox::new(center, 1.5, 1.0, yaw), rng.random_range(0.0..1.0) + i as f64 * 1e-9)
            })
            .collect();
        let got = ap_at_iou(
            &[OpenLoopSample {
                gt_boxes: gt.clone(),
                predictions: preds.clone(),
                ..bare_sample()
            }],
            0.5,
        );
        let want = brute_ap(&gt, &preds, 0.5);
        worst = worst.max((got - want).abs());
        if (got - want).abs() > 1e-9 {
            bad += 1;
        }
    }
    verdict("ap_oracle", bad == 0, format!("200 random sets, {bad} off, max |diff| {worst:.2e}"));
}

#[test]
fn controller_tracks_straight_route() {
    let s = straight_route(200.0, 8.0);
    let out = run(&s, PolicyKind::Single, &EpisodeConfig::default(), 0);
    let r = &out.results[0];
    let recs: Vec<_> = out.trace.records_for("cav1").collect();
    let x0 = recs[0].x;
    // cruise section: 30 % to 70 % of the route
    let cruise: Vec<f64> = recs
        .iter()
        .filter(|t| (60.0..=140.0).contains(&(t.x - x0)))
        .map(|t| t.v)
        .collect();
    let (lo, hi) = cruise.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    let binary = recs.iter().all(|t| t.brake == 0.0 || t.brake == 1.0);
    verdict(
        "controller",
        r.rc_pct == 100.0 && r.infractions.is_empty() && !cruise.is_empty() && lo >= 7.5 && hi <= 8.5 && binary,
        format!(
            "rc {} infractions {} cruise speed [{lo:.3}, {hi:.3}] over {} ticks, binary brake {binary}",
            r.rc_pct,
            r.infractions.len(),
            cruise.len()
        ),
    );
}

#[test]
fn occlusion_needs_sharing_and_suffers_from_latency() {
    let clean = EpisodeConfig::default();
    let mut lagged = EpisodeConfig::default();
    lagged.channel.latency_ticks = 6;
    let cases = occluded_crossing_suite();
    let (mut single_ok, mut coop_ok, mut worse_tight, mut tight) = (0, 0, 0, 0);
    let mut detail = Vec::new();
    for c in &cases {
        let single = &run(&c.scenario, PolicyKind::Single, &clean, 0).results[0];
        let coop = &run(&c.scenario, PolicyKind::CoopPerception, &clean, 0).results[0];
        single_ok += single.success as usize;
        coop_ok += coop.success as usize;
        if c.reaction_margin_s < 0.4 {
            tight += 1;
            let late = &run(&c.scenario, PolicyKind::CoopPerception, &lagged, 0).results[0];
            if late.ds < coop.ds {
                worse_tight += 1;
            }
            detail.push(format!("{} {:.2}->{:.2}", c.scenario.id, coop.ds, late.ds));
        }
    }
    let n = cases.len();
    verdict(
        "occlusion_rq1",
        single_ok == 0 && coop_ok == n && worse_tight >= 3,
        format!(
            "single SR {:.0}%, coop SR {:.0}%, latency 6 lowers DS on {worse_tight}/{tight} tight cases [{}]",
            100.0 * single_ok as f64 / n as f64,
            100.0 * coop_ok as f64 / n as f64,
            detail.join(", ")
        ),
    );
}

#[test]
fn negotiation_resolves_junction_conflicts() {
    let cfg = EpisodeConfig::default();
    let mut cyclic_ticks = 0;
    let mut cav_collisions = 0;
    let mut sym_failures = 0;
    let mut sym_detail = Vec::new();
    for c in junction_conflict_suite() {
        let s = &c.scenario;
        let cavs: BTreeSet<&str> = s.cavs.iter().map(|c| c.id.as_str()).collect();
        let neg = run(s, PolicyKind::Negotiation, &cfg, 0);
        let mut by_tick: BTreeMap<u64, Vec<(String, String)>> = BTreeMap::new();
        for e in &neg.wait_edges {
            by_tick.entry(e.tick).or_default().push((e.waiter.clone(), e.holder.clone()));
        }
        cyclic_ticks += by_tick.values().filter(|edges| !wait_graph_acyclic(edges)).count();
        cav_collisions += neg
            .results
            .iter()
            .flat_map(|r| &r.infractions)
            .filter(|e| e.kind == InfractionKind::CollisionVehicle && e.other.as_deref().is_some_and(|o| cavs.contains(o)))
            .count();
        if c.symmetric {
            let coop = run(s, PolicyKind::CoopPerception, &cfg, 0);
            let bad = coop.results.iter().any(|r| {
                r.completion_tick.is_none()
                    || r.infractions.iter().any(|e| e.kind == InfractionKind::CollisionVehicle)
            });
            if bad {
                sym_failures += 1;
            }
            sym_detail.push(format!("{} {}", s.id, if bad { "fails" } else { "ok" }));
        }
    }
    verdict(
        "negotiation_rq2",
        cyclic_ticks == 0 && cav_collisions == 0 && sym_failures >= 1,
        format!(
            "negotiation: {cyclic_ticks} cyclic ticks, {cav_collisions} CAV-CAV collisions; coop on symmetric subset [{}]",
            sym_detail.join(", ")
        ),
    );
}

fn track_at(track: &ActorTrack, t: f64) -> (Vec2, f64) {
    let f = &track.frames;
    let t = t.clamp(f[0].t, f[f.len() - 1].t);
    let i = f.iter().rposition(|fr| fr.t <= t).unwrap();
    if i + 1 == f.len() || f[i].t == t {
        return (Vec2::new(f[i].x, f[i].y), f[i].yaw);
    }
    let (a, b) = (f[i], f[i + 1]);
    let u = (t - a.t) / (b.t - a.t);
    (
        Vec2::new(a.x + u * (b.x - a.x), a.y + u * (b.y - a.y)),
        a.yaw + u * wrap_angle(b.yaw - a.yaw),
    )
}

#[test]
fn real2sim_alignment_and_replay() {
    let graphs = [maps::intersection_4way(90.0), maps::t_junction(90.0), maps::roundabout(16.0, 90.0)];
    let mut recovered = 0;
    for k in 0..100u64 {
        let g = &graphs[k as usize % graphs.len()];
        let mut rng = substream(k, &["acceptance-displacement"]);
        let d = AlignmentTransform::new(
            rng.random_range(-20.0..20.0),
            rng.random_range(-20.0..20.0),
            rng.random_range(-5.0f64..5.0).to_radians(),
        );
        let log = transform_log(&synthetic_log(g, &SyntheticSpec::default(), k), &d);
        if let Ok(a) = estimate_alignment(&log, g) {
            let want = d.inverse();
            let pos = ((a.transform.dx - want.dx).powi(2) + (a.transform.dy - want.dy).powi(2)).sqrt();
            let rot = wrap_angle(a.transform.theta - want.theta).abs().to_degrees();
            if pos <= 0.1 && rot <= 0.5 {
                recovered += 1;
            }
        }
    }

    // replayed actors follow their snapped tracks until they touch something
    let opts = RoleOptions::default();
    let mut worst_pos = 0.0f64;
    let mut worst_yaw = 0.0f64;
    let mut compared = 0;
    for k in 0..6u64 {
        let g = &graphs[k as usize % graphs.len()];
        let d = AlignmentTransform::new(7.0, -4.0, 2.0f64.to_radians());
        let log = transform_log(&synthetic_log(g, &SyntheticSpec::default(), 100 + k), &d);
        let a = estimate_alignment(&log, g).unwrap();
        let (s, _) = convert_log(&log, g, &a, &opts).unwrap();
        let roles = assign_roles(&log, g, &a.transform, &opts);
        let t0 = roles.window.0;
        let snapped: BTreeMap<&str, &ActorTrack> = roles.snapped.iter().map(|t| (t.id.as_str(), &t.track)).collect();
        let replayed: Vec<&str> = s
            .background_actors
            .iter()
            .filter(|a| matches!(a.behavior, ActorBehavior::Replay(_)))
            .map(|a| a.id.as_str())
            .collect();
        let mut ep = Episode::new(&s, &Bindings::uniform(&s, PolicyKind::Single), &EpisodeConfig::default(), 0).unwrap();
        let mut touched: BTreeSet<String> = BTreeSet::new();
        loop {
            let w = ep.world();
            let t = w.tick as f64 * DT;
            for id in &replayed {
                if touched.contains(*id) {
                    continue;
                }
                let (pos, yaw) = if let Some(v) = w.vehicles.get(*id) {
                    (Vec2::new(v.x, v.y), v.yaw)
                } else if let Some(p) = w.pedestrians.get(*id) {
                    (Vec2::new(p.x, p.y), p.heading)
                } else {
                    continue;
                };
                let (want, want_yaw) = track_at(snapped[id], t + t0);
                worst_pos = worst_pos.max(pos.dist(want));
                worst_yaw = worst_yaw.max(wrap_angle(yaw - want_yaw).abs());
                compared += 1;
            }
            for (a, b) in collision_check(w) {
                touched.insert(a);
                touched.insert(b);
            }
            if ep.is_done() {
                break;
            }
            ep.step();
        }
    }
    verdict(
        "real2sim",
        recovered >= 95 && compared > 0 && worst_pos < 1e-6 && worst_yaw < 1e-6,
        format!(
            "{recovered}/100 displacements recovered; replay vs snapped tracks over {compared} actor-ticks: max {worst_pos:.2e} m, {worst_yaw:.2e} rad"
        ),
    );
}

#[test]
fn generation_pipeline() {
    let cats = [Category::PedestrianCrosswalk, Category::RoundaboutNavigation, Category::OvertakingTwoLane];
    let mut built = Vec::new();
    let mut failures = Vec::new();
    for c in cats {
        for schema in propose(c, 50, &mut Proposer::Template { seed: 3 }).unwrap() {
            match instantiate(&schema) {
                Ok(s) if validate_scenario(&s).is_empty() => built.push(s),
                Ok(s) => failures.push(format!("{}: {:?}", s.id, validate_scenario(&s))),
                Err(e) => failures.push(e.to_string()),
            }
        }
    }
    let once = duplicate_filter(&built);
    let twice = duplicate_filter(&once);

    // two CAVs crossing at 8 m/s whose boxes first touch after `ttc` seconds
    let crossing = |ttc: f64| {
        let mut s = straight_route(200.0, 8.0);
        s.map = maps::intersection_4way(90.0);
        let l = s.cavs[0].footprint.length / 2.0;
        let w = s.cavs[0].footprint.width / 2.0;
        let xa0 = (1.75 - w) - l - 8.0 * ttc;
        let yb0 = (-1.75 - w) - l - 8.0;
        let a = coopbench_core::crafted::cav_on("cav1", vec![Vec2::new(xa0, -1.75), Vec2::new(80.0, -1.75)], 8.0, 8.0);
        let b = coopbench_core::crafted::cav_on("cav2", vec![Vec2::new(1.75, yb0), Vec2::new(1.75, 80.0)], 8.0, 8.0);
        s.cavs = vec![a, b];
        s
    };
    let band = DifficultyBand::default();
    let accepted = difficulty_screen(&crossing(1.2), &band);
    // same lane head-on with a 4 m gap at 10 m/s each: 0.2 s
    let mut head_on = straight_route(200.0, 8.0);
    head_on.map = maps::straight_2lane(200.0);
    let gap = 4.0 + head_on.cavs[0].footprint.length;
    head_on.cavs = vec![
        coopbench_core::crafted::cav_on("cav1", vec![Vec2::new(20.0, -1.75), Vec2::new(190.0, -1.75)], 10.0, 8.0),
        coopbench_core::crafted::cav_on("cav2", vec![Vec2::new(20.0 + gap, -1.75), Vec2::new(5.0, -1.75)], 10.0, 8.0),
    ];
    let fast = difficulty_screen(&head_on, &band);
    let mut parallel = head_on.clone();
    parallel.cavs = vec![
        coopbench_core::crafted::cav_on("cav1", vec![Vec2::new(10.0, -1.75), Vec2::new(190.0, -1.75)], 8.0, 8.0),
        coopbench_core::crafted::cav_on("cav2", vec![Vec2::new(190.0, 1.75), Vec2::new(10.0, 1.75)], 8.0, 8.0),
    ];
    let never = difficulty_screen(&parallel, &band);
    let ttc_ok = accepted.accept
        && accepted.min_ttc.is_some_and(|t| (t - 1.2).abs() < 1e-3)
        && !fast.accept
        && fast.min_ttc.is_some_and(|t| (t - 0.2).abs() < 1e-3)
        && !never.accept
        && never.min_ttc.is_none();
    verdict(
        "generation_pipeline",
        built.len() == 150 && failures.is_empty() && once == twice && ttc_ok,
        format!(
            "{} of 150 instantiated and valid {failures:?}; filter {} -> {} -> {}; ttc 1.2 {:?}/{}, 0.2 {:?}/{}, parallel {:?}/{}",
            built.len(),
            built.len(),
            once.len(),
            twice.len(),
            accepted.min_ttc,
            accepted.accept,
            fast.min_ttc,
            fast.accept,
            never.min_ttc,
            never.accept
        ),
    );
}

#[test]
fn interrupted_suite_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_for = |out: &std::path::Path| {
        let mut c = SuiteConfig::new(vec![PolicyKind::Single, PolicyKind::CoopPerception], vec![0], out);
        c.builtin = vec![BuiltinSuite::OccludedCrossing];
        c.workers = 2;
        c
    };
    let full_cfg = cfg_for(&dir.path().join("full"));
    let full = run_suite(&full_cfg, &RunOptions::default()).unwrap();
    let part_cfg = cfg_for(&dir.path().join("part"));
    let half = full.total / 2;
    let first = run_suite(
        &part_cfg,
        &RunOptions {
            stop_after: Some(half),
            ..Default::default()
        },
    )
    .unwrap();
    let summary_early = part_cfg.out.join("summary.txt").exists();
    let second = run_suite(&part_cfg, &RunOptions::default()).unwrap();
    let a = std::fs::read(full_cfg.out.join("summary.txt")).unwrap();
    let b = std::fs::read(part_cfg.out.join("summary.txt")).unwrap();
    verdict(
        "resumability",
        first.executed == half
            && !first.complete
            && !summary_early
            && second.skipped == half
            && second.executed == full.total - half
            && second.complete
            && a == b,
        format!(
            "{} episodes; first pass ran {}, resume ran {} and skipped {}; summary identical {}",
            full.total,
            first.executed,
            second.executed,
            second.skipped,
            a == b
        ),
    );
}
