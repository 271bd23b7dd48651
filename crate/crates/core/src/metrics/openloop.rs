use super::MetricsError;
use crate::geometry::{box_intersection_area, OrientedBox, Vec2};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Violation thresholds for the planning collision rate (strict inequalities).
pub const CR_TTC_S: f64 = 0.9;
pub const CR_LATERAL_M: f64 = 3.5;

/// Oriented-box intersection over union in the ground plane.
pub fn iou_bev(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let inter = box_intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// One open-loop planning frame; trajectories share a 0.5 s grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenLoopSample {
    pub scenario_id: String,
    pub cav_id: String,
    pub tick: u64,
    pub gt_boxes: Vec<OrientedBox>,
    pub predictions: Vec<(OrientedBox, f64)>,
    /// Ego position and heading when the plan was made.
    pub origin: Vec2,
    pub origin_yaw: f64,
    /// Planned positions at t+0.5 … t+3.0.
    pub plan: Vec<Vec2>,
    /// Actual ego positions at the same times.
    pub gt_future: Vec<Vec2>,
    /// Other objects at t, t+0.5 … t+3.0.
    pub others_future: Vec<Vec<Vec2>>,
    pub grid_dt: f64,
}

/// Average precision pooled over samples, greedy score-ranked one-to-one matching
/// with IoU ≥ `threshold`, all-point interpolation.
pub fn ap_at_iou(samples: &[OpenLoopSample], threshold: f64) -> f64 {
    let n_gt: usize = samples.iter().map(|s| s.gt_boxes.len()).sum();
    let mut preds: Vec<(f64, usize, usize)> = Vec::new();
    for (si, s) in samples.iter().enumerate() {
        for (pi, (_, score)) in s.predictions.iter().enumerate() {
            preds.push((*score, si, pi));
        }
    }
    if n_gt == 0 {
        return if preds.is_empty() { 1.0 } else { 0.0 };
    }
    preds.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut tp = Vec::with_capacity(preds.len());
    for &(_, si, pi) in &preds {
        let s = &samples[si];
        let pb = &s.predictions[pi].0;
        let mut best: Option<(f64, usize)> = None;
        for (gi, g) in s.gt_boxes.iter().enumerate() {
            if used.contains(&(si, gi)) {
                continue;
            }
            let iou = iou_bev(pb, g);
            if iou >= threshold && best.is_none_or(|b| iou > b.0) {
                best = Some((iou, gi));
            }
        }
        match best {
            Some((_, gi)) => {
                used.insert((si, gi));
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    all_point_ap(&tp, n_gt)
}

/// Area under the interpolated precision-recall curve for a ranked hit list.
pub(crate) fn all_point_ap(hits: &[bool], n_gt: usize) -> f64 {
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (k, &h) in hits.iter().enumerate() {
        if h {
            tp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for i in 0..recall.len() {
        if recall[i] > prev_r {
            let p_max = precision[i..].iter().copied().fold(0.0, f64::max);
            ap += (recall[i] - prev_r) * p_max;
            prev_r = recall[i];
        }
    }
    ap
}

/// Mean Euclidean distance over aligned trajectories.
pub fn ade(plan: &[Vec2], gt: &[Vec2]) -> Result<f64, MetricsError> {
    if plan.len() != gt.len() || plan.is_empty() {
        return Err(MetricsError::LengthMismatch {
            plan: plan.len(),
            gt: gt.len(),
        });
    }
    Ok(plan.iter().zip(gt).map(|(a, b)| a.dist(*b)).sum::<f64>() / plan.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollisionRateMode {
    #[default]
    PerSample,
    /// A scenario counts once if any of its samples violates.
    PerScenario,
}

/// True when some object, at some grid time, is ahead within the lateral band
/// and closes on the plan with TTC below the threshold.
pub fn sample_violates(s: &OpenLoopSample) -> bool {
    let mut heading = Vec2::from_angle(s.origin_yaw);
    let mut prev = s.origin;
    for (k, pk) in s.plan.iter().enumerate() {
        let step = *pk - prev;
        let len = step.norm();
        if len > 1e-9 {
            heading = step * (1.0 / len);
        }
        let v_plan = len / s.grid_dt;
        prev = *pk;
        let normal = heading.perp();
        for track in &s.others_future {
            let (Some(o), Some(o_prev)) = (track.get(k + 1), track.get(k)) else { continue };
            let rel = *o - *pk;
            let lon = rel.dot(heading);
            let lat = rel.dot(normal).abs();
            if lon <= 0.0 || lat >= CR_LATERAL_M {
                continue;
            }
            let v_obj = (*o - *o_prev) * (1.0 / s.grid_dt);
            let closing = v_plan - v_obj.dot(heading);
            if closing > 0.0 && lon / closing < CR_TTC_S {
                return true;
            }
        }
    }
    false
}

/// Percentage of violating samples (or scenarios).
pub fn collision_rate(samples: &[OpenLoopSample], mode: CollisionRateMode) -> f64 {
    match mode {
        CollisionRateMode::PerSample => {
            if samples.is_empty() {
                return 0.0;
            }
            let v = samples.iter().filter(|s| sample_violates(s)).count();
            100.0 * v as f64 / samples.len() as f64
        }
        CollisionRateMode::PerScenario => {
            let all: BTreeSet<&str> = samples.iter().map(|s| s.scenario_id.as_str()).collect();
            if all.is_empty() {
                return 0.0;
            }
            let bad: BTreeSet<&str> = samples
                .iter()
                .filter(|s| sample_violates(s))
                .map(|s| s.scenario_id.as_str())
                .collect();
            100.0 * bad.len() as f64 / all.len() as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpenLoopMetrics {
    pub ap50: f64,
    pub ade: f64,
    pub cr_pct: f64,
    pub samples: usize,
}

impl OpenLoopMetrics {
    pub fn from_samples(samples: &[OpenLoopSample], mode: CollisionRateMode) -> Self {
        let ades: Vec<f64> = samples.iter().filter_map(|s| ade(&s.plan, &s.gt_future).ok()).collect();
        Self {
            ap50: ap_at_iou(samples, 0.5),
            ade: if ades.is_empty() { 0.0 } else { ades.iter().sum::<f64>() / ades.len() as f64 },
            cr_pct: collision_rate(samples, mode),
            samples: samples.len(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(x: f64, y: f64) -> OrientedBox {
        OrientedBox::new(Vec2::new(x, y), 1.0, 1.0, 0.0)
    }

    #[test]
    fn iou_cases() {
        assert_eq!(iou_bev(&unit(0.0, 0.0), &unit(0.0, 0.0)), 1.0);
        assert!((iou_bev(&unit(0.0, 0.0), &unit(0.5, 0.0)) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou_bev(&unit(0.0, 0.0), &unit(5.0, 0.0)), 0.0);
    }

    fn sample(gt: Vec<OrientedBox>, preds: Vec<(OrientedBox, f64)>) -> OpenLoopSample {
        OpenLoopSample {
            scenario_id: "s".into(),
            cav_id: "c".into(),
            tick: 0,
            gt_boxes: gt,
            predictions: preds,
            origin: Vec2::ZERO,
            origin_yaw: 0.0,
            plan: vec![],
            gt_future: vec![],
            others_future: vec![],
            grid_dt: 0.5,
        }
    }

    #[test]
    fn perfect_prediction() {
        let s = sample(vec![unit(0.0, 0.0)], vec![(unit(0.0, 0.0), 0.9)]);
        assert_eq!(ap_at_iou(&[s], 0.5), 1.0);
    }

    #[test]
    fn iou_exactly_half_matches() {
        // 2x1 box against a unit box sharing its left half: IoU = 1/2 exactly
        let g = OrientedBox::new(Vec2::new(0.0, 0.0), 2.0, 1.0, 0.0);
        let p = OrientedBox::new(Vec2::new(-0.5, 0.0), 1.0, 1.0, 0.0);
        assert_eq!(iou_bev(&g, &p), 0.5);
        assert_eq!(ap_at_iou(&[sample(vec![g], vec![(p, 1.0)])], 0.5), 1.0);
    }

    fn cr_sample(obj: Vec2, v_obj: Vec2) -> OpenLoopSample {
        // plan at 10 m/s along +x
        let plan: Vec<Vec2> = (1..=6).map(|k| Vec2::new(5.0 * k as f64, 0.0)).collect();
        let track: Vec<Vec2> = (0..=6).map(|k| obj + v_obj * (0.5 * k as f64)).collect();
        OpenLoopSample {
            plan: plan.clone(),
            gt_future: plan,
            others_future: vec![track],
            ..sample(vec![], vec![])
        }
    }

    #[test]
    fn ttc_boundary_is_strict() {
        // at t = 3 s the plan is at 30 m: 9 m gap at 10 m/s closing
        assert!(!sample_violates(&cr_sample(Vec2::new(39.0, 0.0), Vec2::ZERO)));
        assert!(sample_violates(&cr_sample(Vec2::new(38.99, 0.0), Vec2::ZERO)));
        assert!(sample_violates(&cr_sample(Vec2::new(38.0, 0.0), Vec2::ZERO)));
        assert!(!sample_violates(&cr_sample(Vec2::new(38.0, 3.5), Vec2::ZERO)));
        assert!(sample_violates(&cr_sample(Vec2::new(38.0, 3.49), Vec2::ZERO)));
    }

    #[test]
    fn ade_cases() {
        let a = vec![Vec2::new(0.0, 0.0), Vec2::new(1.0, 1.0)];
        assert_eq!(ade(&a, &a).unwrap(), 0.0);
        let b: Vec<Vec2> = a.iter().map(|p| *p + Vec2::new(1.0, 0.0)).collect();
        assert_eq!(ade(&a, &b).unwrap(), 1.0);
        assert!(ade(&a, &b[..1]).is_err());
    }

    /// Exhaustive oracle: for every score cutoff, the true-positive count is the size
    /// of a maximum matching among the top-k predictions.
    fn ap_oracle(gt: &[OrientedBox], preds: &[(OrientedBox, f64)], thr: f64) -> f64 {
        let mut order: Vec<usize> = (0..preds.len()).collect();
        order.sort_by(|&a, &b| preds[b].1.total_cmp(&preds[a].1));
        fn max_match(adj: &[Vec<bool>], i: usize, used: &mut Vec<bool>) -> usize {
            if i == adj.len() {
                return 0;
            }
            let mut best = max_match(adj, i + 1, used);
            for g in 0..used.len() {
                if adj[i][g] && !used[g] {
                    used[g] = true;
                    best = best.max(1 + max_match(adj, i + 1, used));
                    used[g] = false;
                }
            }
            best
        }
        let mut hits = vec![];
        let mut prev = 0;
        for k in 1..=order.len() {
            let adj: Vec<Vec<bool>> = order[..k]
                .iter()
                .map(|&p| gt.iter().map(|g| iou_bev(&preds[p].0, g) >= thr).collect())
                .collect();
            let m = max_match(&adj, 0, &mut vec![false; gt.len()]);
            hits.push(m > prev);
            prev = m;
        }
        if gt.is_empty() {
            return if preds.is_empty() { 1.0 } else { 0.0 };
        }
        // interpolated area, written out directly
        let n = gt.len() as f64;
        let mut tp = 0.0;
        let pts: Vec<(f64, f64)> = hits
            .iter()
            .enumerate()
            .map(|(k, &h)| {
                if h {
                    tp += 1.0;
                }
                (tp / n, tp / (k + 1) as f64)
            })
            .collect();
        let mut area = 0.0;
        let mut r_prev = 0.0;
        for (i, &(r, _)) in pts.iter().enumerate() {
            if r > r_prev {
                let p = pts[i..].iter().map(|x| x.1).fold(0.0, f64::max);
                area += (r - r_prev) * p;
                r_prev = r;
            }
        }
        area
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn ap_matches_exhaustive_matching(
            gts in proptest::collection::vec(0usize..16, 0..=4),
            preds in proptest::collection::vec((-1.0..7.0f64, -1.0..7.0f64, 0.0..1.0f64), 0..=6),
        ) {
            // truths on a 4x4 grid with 2 m pitch never overlap
            let mut cells: Vec<usize> = gts;
            cells.sort();
            cells.dedup();
            let gt: Vec<OrientedBox> = cells.iter().map(|c| OrientedBox::new(Vec2::new(2.0 * (c % 4) as f64, 2.0 * (c / 4) as f64), 1.2, 1.0, 0.0)).collect();
            let mut pr: Vec<(OrientedBox, f64)> = preds.iter().enumerate().map(|(i, &(x, y, s))| (OrientedBox::new(Vec2::new(x, y), 1.2, 1.0, 0.1), s + i as f64 * 1e-6)).collect();
            // snap some predictions onto truths so matches happen
            for (i, p) in pr.iter_mut().enumerate() {
                if i % 2 == 0 && !gt.is_empty() {
                    let g = gt[i % gt.len()];
                    p.0 = OrientedBox::new(g.center + Vec2::new(0.1 * (i as f64), 0.05), 1.2, 1.0, 0.05);
                }
            }
            let s = sample(gt.clone(), pr.clone());
            let got = ap_at_iou(std::slice::from_ref(&s), 0.5);
            let want = ap_oracle(&gt, &pr, 0.5);
            prop_assert!((got - want).abs() < 1e-9, "{got} vs {want}");
            // rank invariance under positive rescaling
            let scaled: Vec<(OrientedBox, f64)> = pr.iter().map(|(b, sc)| (*b, sc * 3.7)).collect();
            let got2 = ap_at_iou(&[sample(gt, scaled)], 0.5);
            prop_assert!((got - got2).abs() < 1e-12);
        }

        #[test]
        fn ade_matches_recomputation(pts in proptest::collection::vec((-50.0..50.0f64, -50.0..50.0f64, -50.0..50.0f64, -50.0..50.0f64), 6)) {
            let a: Vec<Vec2> = pts.iter().map(|p| Vec2::new(p.0, p.1)).collect();
            let b: Vec<Vec2> = pts.iter().map(|p| Vec2::new(p.2, p.3)).collect();
            let want = pts.iter().map(|p| ((p.0 - p.2).powi(2) + (p.1 - p.3).powi(2)).sqrt()).sum::<f64>() / 6.0;
            prop_assert!((ade(&a, &b).unwrap() - want).abs() < 1e-12);
        }
    }
}
