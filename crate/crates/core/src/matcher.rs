//! Click-to-detection association and the click-driven corrections:
//! re-centering on the click, relabeling, and dropping unclicked detections.

use std::cmp::Ordering;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::model::{
    clamp_box_to_viewport, ClickAnnotation, Detection, EngineConfig, ImageRef, RefinedAnnotation,
    Viewport,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub click: u64,
    pub detection: usize,
    pub distance: f64,
    /// Set when the pair came from the class-mismatch pass.
    pub relabel: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub pairs: Vec<MatchPair>,
    pub unmatched_clicks: Vec<u64>,
    pub unmatched_detections: Vec<usize>,
}

impl MatchResult {
    pub fn pair_for_click(&self, click: u64) -> Option<&MatchPair> {
        self.pairs.iter().find(|p| p.click == click)
    }
}

/// Click distance under which a detection may claim a click. Scales with
/// the geometric mean of the box sides.
pub fn match_threshold(det: &Detection, cfg: &EngineConfig) -> f64 {
    cfg.match_alpha * (det.bbox().w() * det.bbox().h()).sqrt()
}

/// Whether `det` satisfies the same-class, within-threshold rule for `click`.
/// Returns the click-to-center distance when it does.
pub fn accepts(click: &ClickAnnotation, det: &Detection, cfg: &EngineConfig) -> Option<f64> {
    if det.class_id() != click.class_id {
        return None;
    }
    let d = click.distance_to(det.bbox().cx(), det.bbox().cy());
    (d <= match_threshold(det, cfg)).then_some(d)
}

struct Candidate {
    click_pos: usize,
    det: usize,
    distance: f64,
    prob: f64,
    sequence: u64,
}

fn candidate_order(a: &Candidate, b: &Candidate) -> Ordering {
    a.distance
        .total_cmp(&b.distance)
        .then_with(|| b.prob.total_cmp(&a.prob))
        .then_with(|| a.det.cmp(&b.det))
        .then_with(|| a.sequence.cmp(&b.sequence))
}

/// Greedy one-to-one assignment of clicks to detections.
///
/// Same-class candidates within threshold are consumed in ascending
/// distance (ties: higher probability, lower detection index, lower click
/// ordinal). Clicks still unmatched afterwards may claim a wrong-class
/// detection whose box strictly contains the click and whose center is
/// within threshold; those pairs carry `relabel = true`.
pub fn match_clicks(
    clicks: &[ClickAnnotation],
    dets: &[Detection],
    cfg: &EngineConfig,
) -> MatchResult {
    let mut click_used = vec![false; clicks.len()];
    let mut det_used = vec![false; dets.len()];
    let mut pairs = Vec::new();

    let mut same_class = Vec::new();
    for (ci, click) in clicks.iter().enumerate() {
        for (di, det) in dets.iter().enumerate() {
            if let Some(distance) = accepts(click, det, cfg) {
                same_class.push(Candidate {
                    click_pos: ci,
                    det: di,
                    distance,
                    prob: det.prob(),
                    sequence: click.sequence,
                });
            }
        }
    }
    consume(&mut same_class, &mut click_used, &mut det_used, &mut pairs, clicks, false);

    let mut mismatched = Vec::new();
    for (ci, click) in clicks.iter().enumerate().filter(|(ci, _)| !click_used[*ci]) {
        for (di, det) in dets.iter().enumerate().filter(|(di, _)| !det_used[*di]) {
            if det.class_id() == click.class_id
                || !det.bbox().strictly_contains_point(click.x, click.y)
            {
                continue;
            }
            let distance = click.distance_to(det.bbox().cx(), det.bbox().cy());
            if distance <= match_threshold(det, cfg) {
                mismatched.push(Candidate {
                    click_pos: ci,
                    det: di,
                    distance,
                    prob: det.prob(),
                    sequence: click.sequence,
                });
            }
        }
    }
    consume(&mut mismatched, &mut click_used, &mut det_used, &mut pairs, clicks, true);

    let mut unmatched_clicks: Vec<u64> = clicks
        .iter()
        .zip(&click_used)
        .filter(|(_, used)| !**used)
        .map(|(c, _)| c.sequence)
        .collect();
    unmatched_clicks.sort_unstable();
    let unmatched_detections = det_used
        .iter()
        .enumerate()
        .filter(|(_, used)| !**used)
        .map(|(i, _)| i)
        .collect();

    MatchResult {
        pairs,
        unmatched_clicks,
        unmatched_detections,
    }
}

fn consume(
    candidates: &mut [Candidate],
    click_used: &mut [bool],
    det_used: &mut [bool],
    pairs: &mut Vec<MatchPair>,
    clicks: &[ClickAnnotation],
    relabel: bool,
) {
    candidates.sort_by(candidate_order);
    for c in candidates.iter() {
        if click_used[c.click_pos] || det_used[c.det] {
            continue;
        }
        click_used[c.click_pos] = true;
        det_used[c.det] = true;
        pairs.push(MatchPair {
            click: clicks[c.click_pos].sequence,
            detection: c.det,
            distance: c.distance,
            relabel,
        });
    }
}

/// Turns a match into annotations, one per click, ordered by click ordinal.
///
/// Matched detections keep their size but move to the click and take the
/// click's class. Unmatched detections are dropped. Unmatched clicks come
/// back as `Unresolved` placeholders for the hierarchical search.
pub fn apply_corrections(
    clicks: &[ClickAnnotation],
    dets: &[Detection],
    matched: &MatchResult,
    img: &ImageRef,
) -> Vec<RefinedAnnotation> {
    apply_corrections_within(clicks, dets, matched, &img.viewport())
}

/// [`apply_corrections`] against an arbitrary viewport instead of the
/// image bounds.
pub fn apply_corrections_within(
    clicks: &[ClickAnnotation],
    dets: &[Detection],
    matched: &MatchResult,
    viewport: &Viewport,
) -> Vec<RefinedAnnotation> {
    let mut seen = HashSet::new();
    let mut ordered: Vec<&ClickAnnotation> = clicks.iter().filter(|c| seen.insert(c.sequence)).collect();
    ordered.sort_by_key(|c| c.sequence);

    ordered
        .into_iter()
        .map(|click| match matched.pair_for_click(click.sequence) {
            Some(pair) => {
                let det = &dets[pair.detection];
                let recentered = det.bbox().recentered(click.x, click.y);
                RefinedAnnotation::corrected(
                    clamp_box_to_viewport(&recentered, viewport),
                    click.class_id,
                    det.prob(),
                    pair.relabel,
                    click.sequence,
                )
            }
            None => RefinedAnnotation::unresolved(click),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BBox, Provenance};
    use approx::assert_abs_diff_eq;

    fn det(cx: f64, cy: f64, w: f64, h: f64, class: u32, prob: f64) -> Detection {
        Detection::new(BBox::new(cx, cy, w, h).unwrap(), class, prob).unwrap()
    }

    fn cfg() -> EngineConfig {
        EngineConfig::default()
    }

    #[test]
    fn threshold_formula() {
        assert_eq!(match_threshold(&det(0.0, 0.0, 100.0, 100.0, 0, 1.0), &cfg()), 50.0);
        assert_eq!(match_threshold(&det(0.0, 0.0, 9.0, 4.0, 0, 1.0), &cfg()), 3.0);
        // 0.5 * sqrt(1500) = 19.364916731037084
        assert_abs_diff_eq!(
            match_threshold(&det(0.0, 0.0, 50.0, 30.0, 0, 1.0), &cfg()),
            19.364916731037084,
            epsilon = 1e-12
        );
    }

    /// Pair counts are monotone in alpha for the same-class pass only. Here
    /// the wider threshold lets click 0 claim box j in the first pass, which
    /// strands click 1 whose only candidate was relabeling j.
    #[test]
    fn wider_threshold_can_cost_a_relabel_pair() {
        let dets = [det(12.0, 0.0, 30.0, 30.0, 0, 0.9), det(2.0, 0.0, 20.0, 20.0, 1, 0.9)];
        let clicks = [ClickAnnotation::new(0.0, 0.0, 0, 0), ClickAnnotation::new(16.0, 3.0, 1, 1)];
        let narrow = EngineConfig {
            match_alpha: 0.3,
            ..cfg()
        };
        let m = match_clicks(&clicks, &dets, &narrow);
        assert_eq!(m.pairs.len(), 2);
        assert!(m.pairs.iter().all(|p| p.relabel));
        let m = match_clicks(&clicks, &dets, &cfg());
        assert_eq!(m.pairs.len(), 1);
        assert_eq!((m.pairs[0].click, m.pairs[0].detection, m.pairs[0].relabel), (0, 0, false));
    }

    #[test]
    fn no_clicks_leaves_everything_unmatched() {
        let dets = vec![det(10.0, 10.0, 5.0, 5.0, 0, 0.9); 3];
        let m = match_clicks(&[], &dets, &cfg());
        assert!(m.pairs.is_empty());
        assert_eq!(m.unmatched_detections, vec![0, 1, 2]);
        assert!(m.unmatched_clicks.is_empty());
    }

    #[test]
    fn exact_click_matches_at_zero_distance() {
        let dets = vec![det(40.0, 40.0, 20.0, 20.0, 2, 0.7)];
        let m = match_clicks(&[ClickAnnotation::new(40.0, 40.0, 2, 0)], &dets, &cfg());
        assert_eq!(m.pairs.len(), 1);
        assert_eq!(m.pairs[0].distance, 0.0);
        assert!(!m.pairs[0].relabel);
    }

    #[test]
    fn two_clicks_sharing_a_nearest_detection_stay_one_to_one() {
        let dets = vec![det(50.0, 50.0, 40.0, 40.0, 1, 0.9), det(60.0, 50.0, 40.0, 40.0, 1, 0.8)];
        let clicks = [ClickAnnotation::new(52.0, 50.0, 1, 0), ClickAnnotation::new(51.0, 50.0, 1, 1)];
        let m = match_clicks(&clicks, &dets, &cfg());
        assert_eq!(m.pairs.len(), 2);
        // click 1 is closest to det 0 (distance 1) and wins it first
        assert_eq!(m.pair_for_click(1).unwrap().detection, 0);
        assert_eq!(m.pair_for_click(0).unwrap().detection, 1);
    }

    #[test]
    fn coincident_centers_prefer_higher_probability() {
        let dets = vec![det(50.0, 50.0, 40.0, 40.0, 1, 0.6), det(50.0, 50.0, 30.0, 30.0, 1, 0.95)];
        let m = match_clicks(&[ClickAnnotation::new(50.0, 50.0, 1, 0)], &dets, &cfg());
        assert_eq!(m.pairs[0].detection, 1);
        assert_eq!(m.unmatched_detections, vec![0]);
    }

    #[test]
    fn wrong_class_needs_containment_to_relabel() {
        let dets = vec![det(50.0, 50.0, 40.0, 40.0, 3, 0.9)];
        let m = match_clicks(&[ClickAnnotation::new(55.0, 48.0, 7, 0)], &dets, &cfg());
        assert_eq!(m.pairs.len(), 1);
        assert!(m.pairs[0].relabel);

        // within threshold (20) but outside a thin box
        let thin = vec![det(50.0, 50.0, 80.0, 5.0, 3, 0.9)];
        let m = match_clicks(&[ClickAnnotation::new(50.0, 60.0, 7, 0)], &thin, &cfg());
        assert!(m.pairs.is_empty());
        assert_eq!(m.unmatched_clicks, vec![0]);
    }

    #[test]
    fn same_class_pass_runs_before_relabel_pass() {
        let dets = vec![det(50.0, 50.0, 40.0, 40.0, 3, 0.9), det(56.0, 50.0, 40.0, 40.0, 7, 0.5)];
        let m = match_clicks(&[ClickAnnotation::new(50.0, 50.0, 7, 0)], &dets, &cfg());
        assert_eq!(m.pairs[0].detection, 1);
        assert!(!m.pairs[0].relabel);
    }

    #[test]
    fn corrections_recenter_and_relabel() {
        let img = ImageRef::new("i", 200, 200, "").unwrap();
        let dets = vec![det(43.0, 38.0, 20.0, 30.0, 1, 0.9)];
        let clicks = [ClickAnnotation::new(40.0, 40.0, 1, 0)];
        let m = match_clicks(&clicks, &dets, &cfg());
        let out = apply_corrections(&clicks, &dets, &m, &img);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].bbox, Some(BBox::new(40.0, 40.0, 20.0, 30.0).unwrap()));
        assert_eq!(out[0].provenance, Provenance::Confirmed);
        assert_eq!(out[0].effective_prob, 0.9);
        assert_eq!(out[0].depth, 0);

        let dets = vec![det(40.0, 40.0, 30.0, 30.0, 3, 0.8)];
        let clicks = [ClickAnnotation::new(41.0, 40.0, 7, 0)];
        let m = match_clicks(&clicks, &dets, &cfg());
        let out = apply_corrections(&clicks, &dets, &m, &img);
        assert_eq!(out[0].class_id, 7);
        assert_eq!(out[0].provenance, Provenance::Relabeled);
    }

    #[test]
    fn unclicked_detections_are_dropped() {
        let img = ImageRef::new("i", 200, 200, "").unwrap();
        let dets = vec![det(40.0, 40.0, 20.0, 20.0, 1, 0.9), det(150.0, 150.0, 20.0, 20.0, 1, 0.99)];
        let clicks = [ClickAnnotation::new(40.0, 40.0, 1, 0), ClickAnnotation::new(100.0, 20.0, 1, 1)];
        let m = match_clicks(&clicks, &dets, &cfg());
        assert_eq!(m.unmatched_detections, vec![1]);
        let out = apply_corrections(&clicks, &dets, &m, &img);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].provenance, Provenance::Confirmed);
        assert_eq!(out[1].provenance, Provenance::Unresolved);
        assert!(out[1].bbox.is_none());
        assert!(out.iter().all(|a| a.bbox.is_none_or(|b| b.cx() < 150.0)));
    }

    #[test]
    fn corrected_box_is_clamped_at_the_border() {
        let img = ImageRef::new("i", 100, 100, "").unwrap();
        let dets = vec![det(6.0, 50.0, 20.0, 20.0, 1, 0.9)];
        let clicks = [ClickAnnotation::new(2.0, 50.0, 1, 0)];
        let m = match_clicks(&clicks, &dets, &cfg());
        let out = apply_corrections(&clicks, &dets, &m, &img);
        assert_eq!(out[0].bbox.unwrap().cx(), 10.0);
    }
}
