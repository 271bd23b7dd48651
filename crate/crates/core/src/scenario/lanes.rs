use crate::geometry::{cumulative_lengths, point_at_station, project_on_polyline, wrap_angle, Vec2};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

/// Road pattern a map crop realizes; used to match generated schemas to maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    #[serde(rename = "intersection_4way")]
    Intersection4way,
    TJunction,
    Roundabout,
    #[serde(rename = "straight_2lane")]
    Straight2lane,
    HighwayRamp,
}

impl Topology {
    pub const ALL: [Topology; 5] = [
        Topology::Intersection4way,
        Topology::TJunction,
        Topology::Roundabout,
        Topology::Straight2lane,
        Topology::HighwayRamp,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Topology::Intersection4way => "intersection_4way",
            Topology::TJunction => "t_junction",
            Topology::Roundabout => "roundabout",
            Topology::Straight2lane => "straight_2lane",
            Topology::HighwayRamp => "highway_ramp",
        }
    }

    pub fn parse(s: &str) -> Option<Topology> {
        Topology::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lane {
    pub id: String,
    centerline: Vec<Vec2>,
    cumulative: Vec<f64>,
    pub width: f64,
    pub speed_limit: f64,
    pub successors: Vec<String>,
    pub predecessors: Vec<String>,
}

impl Lane {
    pub fn new(
        id: impl Into<String>,
        centerline: Vec<Vec2>,
        width: f64,
        speed_limit: f64,
        successors: Vec<String>,
        predecessors: Vec<String>,
    ) -> Self {
        let cumulative = cumulative_lengths(&centerline);
        Self {
            id: id.into(),
            centerline,
            cumulative,
            width,
            speed_limit,
            successors,
            predecessors,
        }
    }

    pub fn centerline(&self) -> &[Vec2] {
        &self.centerline
    }

    pub fn cumulative(&self) -> &[f64] {
        &self.cumulative
    }

    pub fn length(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }

    /// Point and tangent heading at arc length `s` (extrapolates past the end).
    pub fn point_at(&self, s: f64) -> (Vec2, f64) {
        point_at_station(&self.centerline, &self.cumulative, s)
    }

    pub fn is_well_formed(&self) -> bool {
        self.centerline.len() >= 2 && self.length() > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneProjection {
    pub lane_index: usize,
    pub station: f64,
    /// Signed lateral offset, left positive.
    pub offset: f64,
    pub distance: f64,
    pub foot: Vec2,
    /// Tangent heading of the lane at the foot point.
    pub heading: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaneGraph {
    pub map_id: String,
    pub topology: Option<Topology>,
    pub lanes: Vec<Lane>,
    pub crosswalks: Vec<Vec<Vec2>>,
    index: BTreeMap<String, usize>,
}

impl LaneGraph {
    pub fn new(map_id: impl Into<String>, lanes: Vec<Lane>, crosswalks: Vec<Vec<Vec2>>) -> Self {
        let index = lanes
            .iter()
            .enumerate()
            .map(|(i, l)| (l.id.clone(), i))
            .collect();
        Self {
            map_id: map_id.into(),
            topology: None,
            lanes,
            crosswalks,
            index,
        }
    }

    pub fn with_topology(mut self, t: Topology) -> Self {
        self.topology = Some(t);
        self
    }

    pub fn lane(&self, id: &str) -> Option<&Lane> {
        self.index.get(id).map(|&i| &self.lanes[i])
    }

    pub fn lane_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn is_empty(&self) -> bool {
        self.lanes.is_empty()
    }

    /// Lane whose centerline is perpendicularly closest to `p`.
    pub fn nearest(&self, p: Vec2) -> Option<LaneProjection> {
        self.nearest_filtered(p, |_, _| true)
    }

    /// Nearest lane among those whose tangent at the foot point lies within
    /// `max_heading_dev` of `heading`.
    pub fn nearest_with_heading(&self, p: Vec2, heading: f64, max_heading_dev: f64) -> Option<LaneProjection> {
        let mut best: Option<LaneProjection> = None;
        for (li, lane) in self.lanes.iter().enumerate() {
            let pts = lane.centerline();
            for i in 0..pts.len().saturating_sub(1) {
                let a = pts[i];
                let b = pts[i + 1];
                let seg_heading = (b - a).angle();
                if wrap_angle(seg_heading - heading).abs() > max_heading_dev {
                    continue;
                }
                let (t, foot) = crate::geometry::project_on_segment(p, a, b);
                let dist = p.dist(foot);
                if best.map_or(true, |bp| dist < bp.distance) {
                    let side = (b - a).cross(p - foot);
                    let cum = lane.cumulative();
                    best = Some(LaneProjection {
                        lane_index: li,
                        station: cum[i] + (cum[i + 1] - cum[i]) * t,
                        offset: if side >= 0.0 { dist } else { -dist },
                        distance: dist,
                        foot,
                        heading: seg_heading,
                    });
                }
            }
        }
        best
    }

    fn nearest_filtered(&self, p: Vec2, keep: impl Fn(usize, &Lane) -> bool) -> Option<LaneProjection> {
        let mut best: Option<LaneProjection> = None;
        for (li, lane) in self.lanes.iter().enumerate() {
            if !keep(li, lane) || lane.centerline().len() < 2 {
                continue;
            }
            if let Some(pr) = project_on_polyline(p, lane.centerline(), lane.cumulative()) {
                if best.map_or(true, |b| pr.distance < b.distance) {
                    let pts = lane.centerline();
                    let heading = (pts[pr.segment + 1] - pts[pr.segment]).angle();
                    best = Some(LaneProjection {
                        lane_index: li,
                        station: pr.station,
                        offset: pr.offset,
                        distance: pr.distance,
                        foot: pr.foot,
                        heading,
                    });
                }
            }
        }
        best
    }

    /// True when `p` lies within half a lane width of some centerline.
    pub fn on_road(&self, p: Vec2) -> bool {
        self.lanes.iter().any(|lane| {
            lane.centerline().len() >= 2
                && project_on_polyline(p, lane.centerline(), lane.cumulative())
                    .is_some_and(|pr| pr.distance <= 0.5 * lane.width + 1e-9)
        })
    }

    pub fn bounds(&self) -> Option<(Vec2, Vec2)> {
        let mut it = self.lanes.iter().flat_map(|l| l.centerline().iter().copied());
        let first = it.next()?;
        let (mut lo, mut hi) = (first, first);
        for p in it {
            lo = Vec2::new(lo.x.min(p.x), lo.y.min(p.y));
            hi = Vec2::new(hi.x.max(p.x), hi.y.max(p.y));
        }
        Some((lo, hi))
    }
}

/// Projection result in the public `(lane id, s, d)` shape.
pub fn nearest_lane_projection(p: Vec2, g: &LaneGraph) -> Option<(String, f64, f64)> {
    g.nearest(p)
        .map(|pr| (g.lanes[pr.lane_index].id.clone(), pr.station, pr.offset))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn straight() -> LaneGraph {
        LaneGraph::new(
            "m",
            vec![Lane::new(
                "a",
                vec![Vec2::new(0.0, 0.0), Vec2::new(50.0, 0.0), Vec2::new(100.0, 0.0)],
                3.5,
                10.0,
                vec![],
                vec![],
            )],
            vec![],
        )
    }

    #[test]
    fn vertex_projects_to_its_station() {
        let g = straight();
        let (id, s, d) = nearest_lane_projection(Vec2::new(50.0, 0.0), &g).unwrap();
        assert_eq!(id, "a");
        assert_eq!(s, 50.0);
        assert_eq!(d, 0.0);
    }

    #[test]
    fn left_offset_is_positive() {
        let g = straight();
        let (_, s, d) = nearest_lane_projection(Vec2::new(20.0, 1.0), &g).unwrap();
        assert!((s - 20.0).abs() < 1e-12);
        assert!((d - 1.0).abs() < 1e-12);
        let (_, _, d) = nearest_lane_projection(Vec2::new(20.0, -2.0), &g).unwrap();
        assert!((d + 2.0).abs() < 1e-12);
    }

    #[test]
    fn heading_gate_skips_opposing_lane() {
        let mut g = straight();
        g = LaneGraph::new(
            "m",
            vec![
                g.lanes.remove(0),
                Lane::new(
                    "b",
                    vec![Vec2::new(100.0, 3.5), Vec2::new(0.0, 3.5)],
                    3.5,
                    10.0,
                    vec![],
                    vec![],
                ),
            ],
            vec![],
        );
        let p = Vec2::new(30.0, 2.5);
        assert_eq!(g.nearest(p).unwrap().lane_index, 1);
        let gated = g.nearest_with_heading(p, 0.0, 45f64.to_radians()).unwrap();
        assert_eq!(gated.lane_index, 0);
    }
}
