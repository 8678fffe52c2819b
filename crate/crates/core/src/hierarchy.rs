//! Guided hierarchical detection for clicks the full-image pass missed.
//!
//! Around each unmatched click the search builds one proposal per anchor,
//! sized relative to the parent region, and runs the detector on each. A
//! proposal that yields a detection passing the click-match rule becomes a
//! leaf candidate; one that does not is recursed into until the depth limit.
//!
//! Candidates are ranked by effective probability: the raw detection
//! probability times one multiplier per ancestor level (the detector's
//! sub-threshold score for that region, or the configured depth penalty
//! when none is reported). Since every multiplier is at most 1, a region's
//! own multiplier bounds everything its subtree can produce, which is what
//! best-first pruning relies on.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::detector::{detect_region, Crop, Detector};
use crate::matcher;
use crate::model::{
    clamp_box_to_image, BBox, ClickAnnotation, Detection, EngineConfig, ImageRef, PruningMode,
    RefinedAnnotation,
};

const DEDUP_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub anchor_index: usize,
    pub region: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    /// Produced a detection matching the click.
    Accepted,
    /// Recursed into.
    Expanded,
    /// Evaluated at the depth limit without a match.
    Leaf,
    /// Subtree skipped by best-first pruning.
    Pruned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalNode {
    pub region: BBox,
    pub depth: u32,
    pub anchor_index: usize,
    /// Upper bound on the relative value of anything below this node.
    pub priority: f64,
    pub status: NodeStatus,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub detector_failed: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<ProposalNode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<Detection>,
}

impl ProposalNode {
    pub fn count(&self) -> usize {
        1 + self.children.iter().map(ProposalNode::count).sum::<usize>()
    }

    pub fn max_depth(&self) -> u32 {
        self.children
            .iter()
            .map(ProposalNode::max_depth)
            .max()
            .unwrap_or(self.depth)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyTrace {
    pub root_click: u64,
    pub nodes_expanded: usize,
    pub nodes_pruned: usize,
    pub detector_calls: usize,
    pub detector_failures: usize,
    pub tree: Vec<ProposalNode>,
    pub result: RefinedAnnotation,
}

impl HierarchyTrace {
    pub fn nodes_generated(&self) -> usize {
        self.tree.iter().map(ProposalNode::count).sum()
    }
}

/// One proposal per anchor, centered on the click, scaled from the parent
/// region by `context_factor`, clamped into the image. Proposals that
/// coincide after clamping are kept once, first anchor wins.
pub fn make_proposals(
    click: &ClickAnnotation,
    parent_region: &BBox,
    cfg: &EngineConfig,
    img: &ImageRef,
) -> Vec<Proposal> {
    let mut out: Vec<Proposal> = Vec::with_capacity(cfg.anchors.len());
    for (anchor_index, anchor) in cfg.anchors.iter().enumerate() {
        let w = anchor.w_frac * parent_region.w() * cfg.context_factor;
        let h = anchor.h_frac * parent_region.h() * cfg.context_factor;
        let Ok(raw) = BBox::new(click.x, click.y, w, h) else {
            continue;
        };
        let region = clamp_box_to_image(&raw, img);
        if out.iter().any(|p| p.region.approx_eq(&region, DEDUP_TOL)) {
            continue;
        }
        out.push(Proposal {
            anchor_index,
            region,
        });
    }
    out
}

/// Indices of `priorities` in descending order; equal priorities keep
/// their original order.
pub fn expand_order(priorities: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..priorities.len()).collect();
    order.sort_by(|&a, &b| priorities[b].total_cmp(&priorities[a]));
    order
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Expansion {
    pub expanded: Vec<usize>,
    pub pruned: Vec<usize>,
    pub best: Option<f64>,
}

/// Expands siblings in [`expand_order`], stopping as soon as the best value
/// found so far is at least the highest priority left. `expand` returns the
/// best value found under a sibling, if any.
pub fn expand_best_first(
    priorities: &[f64],
    initial_best: Option<f64>,
    mut expand: impl FnMut(usize) -> Option<f64>,
) -> Expansion {
    let order = expand_order(priorities);
    let mut result = Expansion {
        best: initial_best,
        ..Expansion::default()
    };
    for (rank, &i) in order.iter().enumerate() {
        if result.best.is_some_and(|b| b >= priorities[i]) {
            result.pruned.extend_from_slice(&order[rank..]);
            break;
        }
        result.expanded.push(i);
        if let Some(v) = expand(i) {
            result.best = Some(result.best.map_or(v, |b| b.max(v)));
        }
    }
    result
}

/// Multiplier applied to a candidate for passing through a region.
pub fn level_multiplier(score: Option<f64>, reports_sub_threshold: bool, cfg: &EngineConfig) -> f64 {
    match score {
        Some(s) if reports_sub_threshold && s > 0.0 => s.min(1.0),
        _ => cfg.depth_penalty,
    }
}

#[derive(Debug, Clone)]
struct Candidate {
    /// Value relative to the level the candidate is being compared at.
    value: f64,
    depth: u32,
    path: Vec<usize>,
    detection: Detection,
}

/// Higher value wins, then shallower, then earlier in anchor order.
fn better(a: &Candidate, b: &Candidate) -> bool {
    match a.value.total_cmp(&b.value) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => (a.depth, &a.path) < (b.depth, &b.path),
    }
}

fn keep_better(slot: &mut Option<Candidate>, c: Candidate) {
    if slot.as_ref().is_none_or(|cur| better(&c, cur)) {
        *slot = Some(c);
    }
}

struct Search<'a, D: ?Sized> {
    click: &'a ClickAnnotation,
    detector: &'a D,
    cfg: &'a EngineConfig,
    img: &'a ImageRef,
    reports: bool,
    calls: usize,
    failures: usize,
    expanded: usize,
    pruned: usize,
}

impl<D: Detector + ?Sized> Search<'_, D> {
    fn evaluate(&mut self, proposal: &Proposal, depth: u32) -> ProposalNode {
        self.calls += 1;
        let crop = Crop {
            region: proposal.region,
            depth,
        };
        let (outcome, score, failed) = match detect_region(self.detector, self.img, &crop) {
            Ok(out) => {
                let best = out
                    .detections
                    .iter()
                    .filter(|d| matcher::accepts(self.click, d, self.cfg).is_some())
                    .fold(None::<&Detection>, |best, d| match best {
                        Some(b) if b.prob() >= d.prob() => Some(b),
                        _ => Some(d),
                    })
                    .copied();
                (best, out.sub_threshold_score, false)
            }
            Err(_) => {
                self.failures += 1;
                (None, None, true)
            }
        };
        ProposalNode {
            region: proposal.region,
            depth,
            anchor_index: proposal.anchor_index,
            priority: level_multiplier(score, self.reports, self.cfg),
            status: if outcome.is_some() {
                NodeStatus::Accepted
            } else {
                NodeStatus::Leaf
            },
            detector_failed: failed,
            children: Vec::new(),
            outcome,
        }
    }

    /// Evaluates the children of `parent` at `depth` and returns them with
    /// the best candidate below, valued relative to `parent`'s level.
    fn search(&mut self, parent: &BBox, depth: u32, path: &[usize]) -> (Vec<ProposalNode>, Option<Candidate>) {
        let proposals = make_proposals(self.click, parent, self.cfg, self.img);
        let mut nodes: Vec<ProposalNode> = proposals.iter().map(|p| self.evaluate(p, depth)).collect();

        let child_path = |pos: usize| {
            let mut p = path.to_vec();
            p.push(pos);
            p
        };
        let mut best: Option<Candidate> = None;
        for (pos, node) in nodes.iter().enumerate() {
            if let Some(det) = node.outcome {
                keep_better(
                    &mut best,
                    Candidate {
                        value: det.prob(),
                        depth,
                        path: child_path(pos),
                        detection: det,
                    },
                );
            }
        }

        let open: Vec<usize> = (0..nodes.len()).filter(|&i| nodes[i].outcome.is_none()).collect();
        if depth >= self.cfg.max_depth || open.is_empty() {
            self.expanded += nodes.len();
            return (nodes, best);
        }

        let expand = |this: &mut Self, nodes: &mut [ProposalNode], pos: usize, best: &mut Option<Candidate>| {
            let region = nodes[pos].region;
            let (children, found) = this.search(&region, depth + 1, &child_path(pos));
            nodes[pos].children = children;
            nodes[pos].status = NodeStatus::Expanded;
            found.map(|mut c| {
                c.value *= nodes[pos].priority;
                let v = c.value;
                keep_better(best, c);
                v
            })
        };

        match self.cfg.pruning {
            PruningMode::Exhaustive => {
                for &pos in &open {
                    expand(self, &mut nodes, pos, &mut best);
                }
            }
            PruningMode::BestFirst => {
                let priorities: Vec<f64> = open.iter().map(|&i| nodes[i].priority).collect();
                let initial = best.as_ref().map(|c| c.value);
                let plan = expand_best_first(&priorities, initial, |k| {
                    expand(self, &mut nodes, open[k], &mut best)
                });
                for k in plan.pruned {
                    nodes[open[k]].status = NodeStatus::Pruned;
                    self.pruned += 1;
                }
            }
        }
        self.expanded += nodes.iter().filter(|n| n.status != NodeStatus::Pruned).count();
        (nodes, best)
    }
}

/// Searches the proposal tree around `click` for a detection the
/// full-image pass missed.
///
/// `root_score` is the detector's sub-threshold score for the full image;
/// it supplies the multiplier for the top level. Detector errors on a
/// region count as "nothing found there" and are tallied in the trace.
pub fn hierarchical_detect<D: Detector + ?Sized>(
    click: &ClickAnnotation,
    detector: &D,
    cfg: &EngineConfig,
    img: &ImageRef,
    root_score: Option<f64>,
) -> (RefinedAnnotation, HierarchyTrace) {
    let reports = detector.reports_sub_threshold();
    let mut search = Search {
        click,
        detector,
        cfg,
        img,
        reports,
        calls: 0,
        failures: 0,
        expanded: 0,
        pruned: 0,
    };
    let (tree, best) = search.search(&img.full_box(), 1, &[]);
    let root_multiplier = level_multiplier(root_score, reports, cfg);

    let result = match best {
        Some(c) => {
            let effective = (root_multiplier * c.value).min(c.detection.prob());
            let bbox = clamp_box_to_image(&c.detection.bbox().recentered(click.x, click.y), img);
            RefinedAnnotation::recovered(bbox, click.class_id, effective, c.depth, click.sequence)
        }
        None => RefinedAnnotation::unresolved(click),
    };
    let trace = HierarchyTrace {
        root_click: click.sequence,
        nodes_expanded: search.expanded,
        nodes_pruned: search.pruned,
        detector_calls: search.calls,
        detector_failures: search.failures,
        tree,
        result,
    };
    (result, trace)
}
