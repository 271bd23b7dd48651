use coopbench_core::gen::*;
use coopbench_core::geometry::{discrete_frechet, OrientedBox, Pose2, Vec2};
use coopbench_core::maps;
use coopbench_core::scenario::{
    parse_scenario_dir, validate_scenario, Bucket, CavSpec, Category, Footprint, RouteSpec, Scenario, Weather,
};
use proptest::prelude::*;
use std::collections::BTreeMap;

fn two_cavs(map: coopbench_core::scenario::LaneGraph, a: (Vec2, Vec2, f64), b: (Vec2, Vec2, f64)) -> Scenario {
    let cav = |id: &str, (p, q, v): (Vec2, Vec2, f64)| CavSpec {
        id: id.into(),
        spawn: Pose2::new(p.x, p.y, (q - p).angle()),
        spawn_speed: v,
        footprint: Footprint::CAR,
        route: RouteSpec::new(vec![p, q], 8.0),
    };
    Scenario {
        id: "ttc_case".into(),
        bucket: Bucket::Interaction,
        category: Category::PreCrash,
        interactivity: Category::PreCrash.interactivity(),
        weather: Weather::Default,
        max_duration_s: 10.0,
        map,
        cavs: vec![cav("cav1", a), cav("cav2", b)],
        background_actors: vec![],
        static_objects: vec![],
        infrastructure: vec![],
    }
}

/// Crossing built so the boxes first touch at 1.2 s.
fn crossing_1_2() -> Scenario {
    let l = Footprint::CAR.length / 2.0;
    let w = Footprint::CAR.width / 2.0;
    // cav1 eastbound at y = -1.75, cav2 northbound at x = +1.75, both 8 m/s
    let xa0 = (1.75 - w) - l - 8.0 * 1.2;
    let yb0 = (-1.75 - w) - l - 8.0 * 1.0;
    two_cavs(
        maps::intersection_4way(90.0),
        (Vec2::new(xa0, -1.75), Vec2::new(80.0, -1.75), 8.0),
        (Vec2::new(1.75, yb0), Vec2::new(1.75, 80.0), 8.0),
    )
}

/// First contact time found by fine time stepping of the two straight motions.
fn brute_first_contact(s: &Scenario) -> Option<f64> {
    let dt = 1e-4;
    let body = |c: &CavSpec, t: f64| {
        let d = Vec2::from_angle(c.spawn.yaw) * (c.spawn_speed * t);
        OrientedBox::new(c.spawn.position() + d, c.footprint.length, c.footprint.width, c.spawn.yaw)
    };
    (0..(5.0 / dt) as usize)
        .map(|k| k as f64 * dt)
        .find(|&t| body(&s.cavs[0], t).overlaps(&body(&s.cavs[1], t)))
}

#[test]
fn constructed_crossing_has_ttc_1_2() {
    let s = crossing_1_2();
    assert!(validate_scenario(&s).is_empty(), "{:?}", validate_scenario(&s));
    let oracle = brute_first_contact(&s).unwrap();
    assert!((oracle - 1.2).abs() < 2e-4, "oracle {oracle}");
    let r = difficulty_screen(&s, &DifficultyBand::new(0.5, 2.0).unwrap());
    let ttc = r.min_ttc.unwrap();
    assert!((ttc - oracle).abs() < 2e-4, "{ttc} vs {oracle}");
    assert!(r.accept);
    assert!(difficulty_screen(&s, &DifficultyBand::default()).accept);
}

#[test]
fn head_on_four_metres_is_rejected() {
    let x0 = 20.0;
    let gap = 4.0 + Footprint::CAR.length;
    let s = two_cavs(
        maps::straight_2lane(200.0),
        (Vec2::new(x0, -1.75), Vec2::new(190.0, -1.75), 10.0),
        (Vec2::new(x0 + gap, -1.75), Vec2::new(5.0, -1.75), 10.0),
    );
    assert!(validate_scenario(&s).is_empty());
    let r = difficulty_screen(&s, &DifficultyBand::default());
    assert!((r.min_ttc.unwrap() - 0.2).abs() < 1e-9, "{:?}", r.min_ttc);
    assert!(!r.accept);
}

#[test]
fn parallel_lanes_have_infinite_ttc() {
    let s = two_cavs(
        maps::straight_2lane(200.0),
        (Vec2::new(10.0, -1.75), Vec2::new(190.0, -1.75), 8.0),
        (Vec2::new(190.0, 1.75), Vec2::new(10.0, 1.75), 8.0),
    );
    let r = difficulty_screen(&s, &DifficultyBand::new(0.5, 2.0).unwrap());
    assert_eq!(r.min_ttc, None);
    assert!(!r.accept);
}

fn pool(category: Category, n: usize, seed: u64) -> Vec<Scenario> {
    propose(category, n, &mut Proposer::Template { seed })
        .unwrap()
        .iter()
        .map(|s| instantiate(s).unwrap())
        .collect()
}

#[test]
fn duplicates_are_dropped() {
    let s = pool(Category::UnprotectedLeftTurn, 1, 4).remove(0);
    assert_eq!(duplicate_filter(&[s.clone(), s.clone()]).len(), 1);

    // same layout, every CAV spawned 20 m further back along its route
    let mut shifted = s.clone();
    shifted.id.push_str("_b");
    for c in &mut shifted.cavs {
        let w = &mut c.route.waypoints;
        let back = (w[0] - w[1]) * (20.0 / w[0].dist(w[1]));
        w[0] = w[0] + back;
        c.spawn = Pose2::new(w[0].x, w[0].y, c.spawn.yaw);
    }
    assert_eq!(duplicate_filter(&[s.clone(), shifted]).len(), 2);
}

#[test]
fn routes_one_metre_apart_collapse() {
    let mk = |dy: f64| {
        two_cavs(
            maps::straight_2lane(200.0),
            (Vec2::new(10.0, -1.75 + dy), Vec2::new(150.0, -1.75 + dy), 8.0),
            (Vec2::new(150.0, 1.75 + dy), Vec2::new(10.0, 1.75 + dy), 8.0),
        )
    };
    let a = mk(0.0);
    let b = mk(1.0);
    assert_ne!(fingerprint(&a), fingerprint(&b));
    assert_eq!(duplicate_filter(&[a, b]).len(), 1);
}

/// Textbook recursive discrete Frechet distance.
fn frechet_oracle(a: &[Vec2], b: &[Vec2]) -> f64 {
    fn c(i: usize, j: usize, a: &[Vec2], b: &[Vec2], memo: &mut BTreeMap<(usize, usize), f64>) -> f64 {
        if let Some(v) = memo.get(&(i, j)) {
            return *v;
        }
        let d = a[i].dist(b[j]);
        let v = match (i, j) {
            (0, 0) => d,
            (0, _) => c(0, j - 1, a, b, memo).max(d),
            (_, 0) => c(i - 1, 0, a, b, memo).max(d),
            _ => c(i - 1, j, a, b, memo)
                .min(c(i - 1, j - 1, a, b, memo))
                .min(c(i, j - 1, a, b, memo))
                .max(d),
        };
        memo.insert((i, j), v);
        v
    }
    c(a.len() - 1, b.len() - 1, a, b, &mut BTreeMap::new())
}

fn pts() -> impl Strategy<Value = Vec<Vec2>> {
    prop::collection::vec((-20.0..20.0f64, -20.0..20.0f64), 1..7)
        .prop_map(|v| v.into_iter().map(|(x, y)| Vec2::new(x, y)).collect())
}

proptest! {
    #[test]
    fn frechet_matches_recursive_oracle(a in pts(), b in pts()) {
        prop_assert!((discrete_frechet(&a, &b) - frechet_oracle(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn min_ttc_is_translation_invariant(idx in 0usize..6, dx in -500.0..500.0f64, dy in -500.0..500.0f64) {
        let cats = [Category::UnprotectedLeftTurn, Category::HighwayOnRampMerge, Category::PreCrash];
        let s = pool(cats[idx % 3], 1, idx as u64).remove(0);
        let a = min_ttc(&s).0;
        let b = min_ttc(&s.translated(dx, dy)).0;
        match (a, b) {
            (None, None) => {}
            (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-6, "{x} vs {y}"),
            other => prop_assert!(false, "{other:?}"),
        }
    }
}

#[test]
fn filter_is_idempotent_and_deterministic() {
    let mut all = Vec::new();
    for c in [Category::PedestrianCrosswalk, Category::RoundaboutNavigation, Category::OvertakingTwoLane] {
        all.extend(pool(c, 20, 9));
    }
    let again: Vec<Scenario> = [Category::PedestrianCrosswalk, Category::RoundaboutNavigation, Category::OvertakingTwoLane]
        .into_iter()
        .flat_map(|c| pool(c, 20, 9))
        .collect();
    assert_eq!(all, again);
    let once = duplicate_filter(&all);
    let twice = duplicate_filter(&once);
    assert_eq!(once, twice);
}

#[test]
fn export_round_trips_and_honors_review() {
    let band = DifficultyBand::default();
    let scen = pool(Category::IntersectionDeadlockResolution, 6, 2);
    let batch: Vec<(Scenario, ScreenResult)> = scen
        .iter()
        .map(|s| {
            let mut r = difficulty_screen(s, &band);
            r.accept = true;
            (s.clone(), r)
        })
        .collect();
    let mut review = BTreeMap::new();
    review.insert(scen[0].id.clone(), false);
    let dir = tempfile::tempdir().unwrap();
    let index = export_batch(&batch, &band, &review, dir.path()).unwrap();
    assert_eq!(index.pool_size, 6);
    assert_eq!(index.accepted, 5);
    assert!(!index.entries[0].accept && index.entries[0].review == Some(false));
    for e in index.entries.iter().filter(|e| e.accept) {
        let back = parse_scenario_dir(&dir.path().join(e.dir.as_ref().unwrap())).unwrap();
        assert!(validate_scenario(&back).is_empty());
        assert_eq!(fingerprint(&back), e.fingerprint);
    }
    assert!(!dir.path().join(&scen[0].id).exists());
    let text = std::fs::read_to_string(dir.path().join("index.json")).unwrap();
    let parsed: BatchIndex = serde_json::from_str(&text).unwrap();
    assert_eq!(parsed, index);
}
