//! Palette geometry: prompt circles, contact-driven mixing and detaching,
//! selection points resolved to mix weights, and the path history of the
//! conditioning used at each generation step.

use serde::{Deserialize, Serialize};

use crate::color::Rgb;
use crate::error::{Error, Result};
use crate::vecmix::{DirectionalAxis, MixWeights, MAX_MIX};

pub const DEFAULT_RADIUS: f64 = 24.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroupId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }

    fn dot(self, o: Point) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn distance(self, o: Point) -> f64 {
        let d = self.sub(o);
        d.dot(d).sqrt()
    }
}

impl From<[f64; 2]> for Point {
    fn from(p: [f64; 2]) -> Self {
        Point::new(p[0], p[1])
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptNode {
    pub id: NodeId,
    pub text: String,
    pub color: Rgb,
    pub center: Point,
    pub radius: f64,
}

/// Two or three mixed prompts, in mixing order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixGroup {
    pub id: GroupId,
    pub members: Vec<NodeId>,
}

/// What a contact gesture did to the group structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContactOutcome {
    Moved,
    Paired(GroupId),
    Joined(GroupId),
    Detached { node: NodeId, group: GroupId },
    Dissolved(GroupId),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PaletteState {
    nodes: Vec<PromptNode>,
    groups: Vec<MixGroup>,
    next_node: u32,
    next_group: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionTarget {
    Node(NodeId),
    Group(GroupId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub target: SelectionTarget,
    /// Prompts the weights refer to, in weight order.
    pub node_ids: Vec<NodeId>,
    /// Selection point after clamping into the gradient region.
    pub point: Point,
    pub weights: MixWeights,
}

impl PaletteState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(
        &mut self,
        text: impl Into<String>,
        color: Rgb,
        center: Point,
        radius: f64,
    ) -> Result<NodeId> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(crate::error::out_of_range("node radius", radius));
        }
        let id = NodeId(self.next_node);
        self.next_node += 1;
        self.nodes.push(PromptNode {
            id,
            text: text.into(),
            color,
            center,
            radius,
        });
        Ok(id)
    }

    /// Checks the structural invariants of a palette built elsewhere, such as
    /// one read back from a project file.
    pub fn check(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for n in &self.nodes {
            if !seen.insert(n.id) || n.id.0 >= self.next_node {
                return Err(Error::UnknownNode(n.id.0));
            }
            if !(n.radius > 0.0 && n.radius.is_finite()) {
                return Err(crate::error::out_of_range("node radius", n.radius));
            }
        }
        let mut grouped = std::collections::HashSet::new();
        let mut group_ids = std::collections::HashSet::new();
        for g in &self.groups {
            if !group_ids.insert(g.id) || g.id.0 >= self.next_group {
                return Err(Error::UnknownGroup(g.id.0));
            }
            if !(2..=MAX_MIX).contains(&g.members.len()) {
                return Err(crate::error::out_of_range("group size", g.members.len()));
            }
            for m in &g.members {
                if !seen.contains(m) || !grouped.insert(*m) {
                    return Err(Error::UnknownNode(m.0));
                }
            }
        }
        Ok(())
    }

    pub fn nodes(&self) -> &[PromptNode] {
        &self.nodes
    }

    pub fn groups(&self) -> &[MixGroup] {
        &self.groups
    }

    pub fn node(&self, id: NodeId) -> Result<&PromptNode> {
        self.nodes
            .iter()
            .find(|n| n.id == id)
            .ok_or(Error::UnknownNode(id.0))
    }

    pub fn group(&self, id: GroupId) -> Result<&MixGroup> {
        self.groups
            .iter()
            .find(|g| g.id == id)
            .ok_or(Error::UnknownGroup(id.0))
    }

    pub fn group_of(&self, node: NodeId) -> Option<&MixGroup> {
        self.groups.iter().find(|g| g.members.contains(&node))
    }

    fn center_of(&self, id: NodeId) -> Point {
        self.node(id).map(|n| n.center).unwrap_or_default()
    }

    /// Moves a node and applies the mixing transitions:
    ///
    /// * a free node whose circle touches a pair's center-to-center segment
    ///   joins that pair;
    /// * otherwise a free node whose circle overlaps another free node forms
    ///   a new pair with it;
    /// * a grouped node dragged onto a fellow member (its center inside the
    ///   fellow's circle) detaches the nearest such fellow. A pair dissolves
    ///   entirely.
    pub fn contact(&mut self, moved: NodeId, new_center: Point) -> Result<ContactOutcome> {
        let idx = self
            .nodes
            .iter()
            .position(|n| n.id == moved)
            .ok_or(Error::UnknownNode(moved.0))?;
        self.nodes[idx].center = new_center;
        let radius = self.nodes[idx].radius;

        if let Some(gi) = self.groups.iter().position(|g| g.members.contains(&moved)) {
            let fellow = self.groups[gi]
                .members
                .iter()
                .copied()
                .filter(|&m| m != moved)
                .map(|m| (m, self.node(m).expect("group members exist")))
                .filter(|(_, n)| new_center.distance(n.center) < n.radius)
                .min_by(|a, b| {
                    new_center
                        .distance(a.1.center)
                        .total_cmp(&new_center.distance(b.1.center))
                })
                .map(|(m, _)| m);
            let Some(fellow) = fellow else {
                return Ok(ContactOutcome::Moved);
            };
            let gid = self.groups[gi].id;
            if self.groups[gi].members.len() > 2 {
                self.groups[gi].members.retain(|&m| m != fellow);
                return Ok(ContactOutcome::Detached {
                    node: fellow,
                    group: gid,
                });
            }
            self.groups.remove(gi);
            return Ok(ContactOutcome::Dissolved(gid));
        }

        let pair = self.groups.iter().position(|g| {
            g.members.len() == 2 && {
                let a = self.center_of(g.members[0]);
                let b = self.center_of(g.members[1]);
                segment_distance(new_center, a, b) <= radius
            }
        });
        if let Some(gi) = pair {
            debug_assert!(self.groups[gi].members.len() < MAX_MIX);
            self.groups[gi].members.push(moved);
            return Ok(ContactOutcome::Joined(self.groups[gi].id));
        }

        let partner = self
            .nodes
            .iter()
            .filter(|n| n.id != moved && self.group_of(n.id).is_none())
            .find(|n| new_center.distance(n.center) <= radius + n.radius)
            .map(|n| n.id);
        if let Some(partner) = partner {
            let id = GroupId(self.next_group);
            self.next_group += 1;
            self.groups.push(MixGroup {
                id,
                members: vec![partner, moved],
            });
            return Ok(ContactOutcome::Paired(id));
        }
        Ok(ContactOutcome::Moved)
    }

    /// Resolves a selection on a node or group.
    pub fn select(&self, target: SelectionTarget, point: Point) -> Result<Selection> {
        match target {
            SelectionTarget::Node(id) => {
                let n = self.node(id)?;
                Ok(Selection {
                    target,
                    node_ids: vec![id],
                    point: n.center,
                    weights: MixWeights::single(),
                })
            }
            SelectionTarget::Group(gid) => {
                let g = self.group(gid)?;
                let centers: Vec<Point> = g.members.iter().map(|&m| self.center_of(m)).collect();
                let weights = weights_at(&centers, point);
                let clamped = centers
                    .iter()
                    .zip(weights.as_slice())
                    .fold(Point::default(), |acc, (c, w)| {
                        Point::new(acc.x + c.x * w, acc.y + c.y * w)
                    });
                Ok(Selection {
                    target,
                    node_ids: g.members.clone(),
                    point: clamped,
                    weights,
                })
            }
        }
    }
}

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let ab = b.sub(a);
    let len2 = ab.dot(ab);
    if len2 == 0.0 {
        return p.distance(a);
    }
    let t = (p.sub(a).dot(ab) / len2).clamp(0.0, 1.0);
    p.distance(Point::new(a.x + t * ab.x, a.y + t * ab.y))
}

fn equal_weights(n: usize) -> MixWeights {
    MixWeights::new(vec![1.0 / n as f64; n]).expect("equal weights are valid")
}

/// Mix weights for a point relative to the member centers of a group.
///
/// Pairs use the orthogonal projection onto the center-to-center segment,
/// clamped to the segment. Triples use barycentric coordinates with negative
/// entries clamped to zero and the rest renormalized. Coincident or collinear
/// centers fall back to equal weights.
pub fn weights_at(centers: &[Point], point: Point) -> MixWeights {
    match centers {
        [_] => MixWeights::single(),
        [a, b] => {
            let ab = b.sub(*a);
            let len2 = ab.dot(ab);
            if len2 == 0.0 || !len2.is_finite() {
                return equal_weights(2);
            }
            let t = (point.sub(*a).dot(ab) / len2).clamp(0.0, 1.0);
            if !t.is_finite() {
                return equal_weights(2);
            }
            MixWeights::new(vec![1.0 - t, t]).expect("projection weights are valid")
        }
        [a, b, c] => {
            let det = (b.y - c.y) * (a.x - c.x) + (c.x - b.x) * (a.y - c.y);
            let scale = [a.sub(*b), b.sub(*c), c.sub(*a)]
                .iter()
                .map(|e| e.dot(*e))
                .fold(0.0, f64::max);
            if !(det.abs() > 1e-12 * scale) || !det.is_finite() {
                return equal_weights(3);
            }
            let l1 = ((b.y - c.y) * (point.x - c.x) + (c.x - b.x) * (point.y - c.y)) / det;
            let l2 = ((c.y - a.y) * (point.x - c.x) + (a.x - c.x) * (point.y - c.y)) / det;
            let l3 = 1.0 - l1 - l2;
            let mut w = [l1, l2, l3].map(|v| if v.is_finite() { v.max(0.0) } else { 0.0 });
            let sum: f64 = w.iter().sum();
            if !(sum > 0.0) {
                return equal_weights(3);
            }
            if sum != 1.0 {
                w.iter_mut().for_each(|v| *v /= sum);
            }
            MixWeights::new(w.to_vec()).unwrap_or_else(|_| equal_weights(3))
        }
        _ => equal_weights(centers.len().clamp(1, MAX_MIX)),
    }
}

/// Conditioning used at one executed generation step, as shown on the palette.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathPoint {
    pub step_index: usize,
    pub node_ids: Vec<NodeId>,
    pub weights: MixWeights,
    pub point: Point,
    pub axis_weights: Vec<(String, f64)>,
    pub display_color: Rgb,
}

/// Dot color: the selection's prompt colors blended by mix weight, then
/// tinted toward each active directional end by the slider magnitude.
pub fn path_color(prompt_colors: &[Rgb], weights: &MixWeights, axes: &[DirectionalAxis]) -> Rgb {
    let blend: Vec<(Rgb, f64)> = prompt_colors
        .iter()
        .copied()
        .zip(weights.as_slice().iter().copied())
        .collect();
    let mut color = Rgb::weighted(&blend);
    for axis in axes {
        if axis.weight > 0.0 {
            color = color.lerp(axis.color_a, axis.weight);
        } else if axis.weight < 0.0 {
            color = color.lerp(axis.color_b, -axis.weight);
        }
    }
    color
}

/// Appends the path point for an executed step and returns it.
pub fn record_path(
    path: &mut Vec<PathPoint>,
    step_index: usize,
    selection: &Selection,
    prompt_colors: &[Rgb],
    axes: &[DirectionalAxis],
) -> PathPoint {
    debug_assert_eq!(
        step_index,
        path.len(),
        "path points are recorded in step order"
    );
    let point = PathPoint::capture(step_index, selection, prompt_colors, axes);
    path.push(point.clone());
    point
}

impl PathPoint {
    pub fn capture(
        step_index: usize,
        selection: &Selection,
        prompt_colors: &[Rgb],
        axes: &[DirectionalAxis],
    ) -> Self {
        PathPoint {
            step_index,
            node_ids: selection.node_ids.clone(),
            weights: selection.weights.clone(),
            point: selection.point,
            axis_weights: axes.iter().map(|a| (a.id.clone(), a.weight)).collect(),
            display_color: path_color(prompt_colors, &selection.weights, axes),
        }
    }
}

/// Path points paired with a flag marking the dot for the current step.
pub fn highlight_current(path: &[PathPoint], cursor: usize) -> Vec<(&PathPoint, bool)> {
    path.iter()
        .map(|p| (p, cursor > 0 && p.step_index + 1 == cursor))
        .collect()
}
