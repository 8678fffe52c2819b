//! Randomized instance generators and independent oracles shared by the
//! integration tests and the acceptance suite.

#![allow(dead_code)]

use oneclick_core::dataset::{synthetic_corpus, SyntheticSpec};
use oneclick_core::hierarchy::hierarchical_detect;
use oneclick_core::matcher::{apply_corrections_within, match_clicks};
use oneclick_core::model::{BBox, ClickAnnotation, Detection, EngineConfig, PruningMode, Viewport};
use oneclick_core::rng;
use oneclick_core::{NoiseProfile, SimulatedDetector};
use rand::Rng;

/// Snaps to a 1/8 pixel grid so translations stay exact in f64.
fn grid(v: f64) -> f64 {
    (v * 8.0).round() / 8.0
}

pub struct MatchInstance {
    pub clicks: Vec<ClickAnnotation>,
    pub dets: Vec<Detection>,
    pub viewport: Viewport,
    pub cfg: EngineConfig,
}

pub fn random_match_instance(seed: u64) -> MatchInstance {
    let mut r = rng::stream(&[seed, 0x006d_6174_6368]);
    let (w, h) = (f64::from(r.random_range(80u32..=400)), f64::from(r.random_range(80u32..=400)));
    let classes = r.random_range(1u32..=3);
    let n_dets = r.random_range(0..=8);
    let dets: Vec<Detection> = (0..n_dets)
        .map(|_| {
            let bw = grid(r.random_range(4.0..w / 2.0));
            let bh = grid(r.random_range(4.0..h / 2.0));
            let cx = grid(r.random_range(0.0..w));
            let cy = grid(r.random_range(0.0..h));
            let prob = grid(r.random_range(0.125..1.0));
            Detection::new(BBox::new(cx, cy, bw, bh).unwrap(), r.random_range(0..classes), prob).unwrap()
        })
        .collect();
    let n_clicks = r.random_range(0..=8);
    let clicks = (0..n_clicks)
        .map(|i| {
            let (x, y) = if !dets.is_empty() && r.random_bool(0.7) {
                let d = &dets[r.random_range(0..dets.len())];
                let s = 0.4 * d.bbox().w().min(d.bbox().h());
                (d.bbox().cx() + r.random_range(-s..=s), d.bbox().cy() + r.random_range(-s..=s))
            } else {
                (r.random_range(0.0..w), r.random_range(0.0..h))
            };
            ClickAnnotation::new(grid(x.clamp(0.0, w)), grid(y.clamp(0.0, h)), r.random_range(0..classes), i as u64)
        })
        .collect();
    let cfg = EngineConfig {
        match_alpha: r.random_range(0.2..1.0),
        ..EngineConfig::default()
    };
    MatchInstance {
        clicks,
        dets,
        viewport: Viewport {
            x0: 0.0,
            y0: 0.0,
            x1: w,
            y1: h,
        },
        cfg,
    }
}

/// No click and no detection appears in two pairs, and the unmatched lists
/// are exactly the complements.
pub fn check_one_to_one(seed: u64) -> Result<(), String> {
    let inst = random_match_instance(seed);
    let m = match_clicks(&inst.clicks, &inst.dets, &inst.cfg);
    let mut clicks: Vec<u64> = m.pairs.iter().map(|p| p.click).collect();
    let mut dets: Vec<usize> = m.pairs.iter().map(|p| p.detection).collect();
    clicks.sort_unstable();
    dets.sort_unstable();
    if clicks.windows(2).any(|w| w[0] == w[1]) {
        return Err(format!("seed {seed}: click used twice"));
    }
    if dets.windows(2).any(|w| w[0] == w[1]) {
        return Err(format!("seed {seed}: detection used twice"));
    }
    let mut all_clicks: Vec<u64> = clicks.iter().chain(&m.unmatched_clicks).copied().collect();
    all_clicks.sort_unstable();
    if all_clicks != (0..inst.clicks.len() as u64).collect::<Vec<_>>() {
        return Err(format!("seed {seed}: clicks not partitioned"));
    }
    let mut all_dets: Vec<usize> = dets.iter().chain(&m.unmatched_detections).copied().collect();
    all_dets.sort_unstable();
    if all_dets != (0..inst.dets.len()).collect::<Vec<_>>() {
        return Err(format!("seed {seed}: detections not partitioned"));
    }
    Ok(())
}

/// Growing the threshold scale never shrinks the number of pairs. With
/// `same_class_only`, relabel pairs are left out of the count.
pub fn check_threshold_monotone_counting(seed: u64, same_class_only: bool) -> Result<(), String> {
    let inst = random_match_instance(seed);
    let mut r = rng::stream(&[seed, 0x0061_6c70_6861]);
    let lo = inst.cfg.match_alpha;
    let hi = lo + r.random_range(0.0..1.0);
    let count = |m: oneclick_core::MatchResult| m.pairs.iter().filter(|p| !(same_class_only && p.relabel)).count();
    let n_lo = count(match_clicks(&inst.clicks, &inst.dets, &inst.cfg));
    let cfg_hi = EngineConfig {
        match_alpha: hi,
        ..inst.cfg.clone()
    };
    let n_hi = count(match_clicks(&inst.clicks, &inst.dets, &cfg_hi));
    if n_hi < n_lo {
        return Err(format!("seed {seed}: alpha {lo} -> {hi} lost pairs ({n_lo} -> {n_hi})"));
    }
    Ok(())
}

pub fn check_threshold_monotone(seed: u64) -> Result<(), String> {
    check_threshold_monotone_counting(seed, false)
}

pub fn check_same_class_threshold_monotone(seed: u64) -> Result<(), String> {
    check_threshold_monotone_counting(seed, true)
}

/// Shifting clicks, detections, and the viewport by the same offset shifts
/// every output box and keeps pairing and provenance.
pub fn check_translation(seed: u64) -> Result<(), String> {
    let inst = random_match_instance(seed);
    let mut r = rng::stream(&[seed, 0x0073_6869_6674]);
    let dx = grid(r.random_range(-500.0..500.0));
    let dy = grid(r.random_range(-500.0..500.0));
    let clicks2: Vec<_> = inst.clicks.iter().map(|c| c.translated(dx, dy)).collect();
    let dets2: Vec<_> = inst.dets.iter().map(|d| d.with_box(d.bbox().translated(dx, dy))).collect();
    let vp2 = inst.viewport.translate(dx, dy);

    let m1 = match_clicks(&inst.clicks, &inst.dets, &inst.cfg);
    let m2 = match_clicks(&clicks2, &dets2, &inst.cfg);
    let key = |m: &oneclick_core::MatchResult| {
        let mut v: Vec<(u64, usize, bool)> = m.pairs.iter().map(|p| (p.click, p.detection, p.relabel)).collect();
        v.sort_unstable();
        v
    };
    if key(&m1) != key(&m2) {
        return Err(format!("seed {seed}: pairing changed under ({dx}, {dy})"));
    }
    let a1 = apply_corrections_within(&inst.clicks, &inst.dets, &m1, &inst.viewport);
    let a2 = apply_corrections_within(&clicks2, &dets2, &m2, &vp2);
    for (p, q) in a1.iter().zip(&a2) {
        if p.provenance != q.provenance || p.class_id != q.class_id || p.source_click != q.source_click {
            return Err(format!("seed {seed}: provenance changed for click {}", p.source_click));
        }
        match (&p.bbox, &q.bbox) {
            (Some(b1), Some(b2)) if b1.translated(dx, dy).approx_eq(b2, 1e-9) => {}
            (None, None) => {}
            _ => return Err(format!("seed {seed}: box not translated for click {}", p.source_click)),
        }
    }
    Ok(())
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Six clicks, six same-class detections, only the intended pairs within
/// reach: the greedy result must equal the single feasible perfect
/// assignment found by trying all 720 permutations.
pub fn check_brute_force(seed: u64) -> Result<(), String> {
    let mut r = rng::stream(&[seed, 0x0062_7275_7465]);
    let cfg = EngineConfig::default();
    let class = r.random_range(0u32..5);
    // 3x2 grid of 120 px cells; boxes at most 40 px, so thresholds stay
    // under 20 px and every cross pair is more than 40 px apart.
    let mut cells: Vec<(f64, f64)> = (0..6).map(|i| (60.0 + 120.0 * (i % 3) as f64, 60.0 + 120.0 * (i / 3) as f64)).collect();
    for i in (1..cells.len()).rev() {
        cells.swap(i, r.random_range(0..=i));
    }
    let mut dets = Vec::new();
    let mut intended = Vec::new();
    for (i, &(gx, gy)) in cells.iter().enumerate() {
        let w = r.random_range(10.0..40.0);
        let h = r.random_range(10.0..40.0);
        let cx = gx + r.random_range(-15.0..15.0);
        let cy = gy + r.random_range(-15.0..15.0);
        dets.push(Detection::new(BBox::new(cx, cy, w, h).unwrap(), class, r.random_range(0.3..1.0)).unwrap());
        let reach = 0.5 * (w * h).sqrt() * 0.999;
        let angle = r.random_range(0.0..std::f64::consts::TAU);
        let dist = r.random_range(0.0..reach);
        intended.push((i, cx + dist * angle.cos(), cy + dist * angle.sin()));
    }
    for i in (1..intended.len()).rev() {
        intended.swap(i, r.random_range(0..=i));
    }
    let clicks: Vec<ClickAnnotation> = intended
        .iter()
        .enumerate()
        .map(|(seq, &(_, x, y))| ClickAnnotation::new(x, y, class, seq as u64))
        .collect();

    let feasible = |c: &ClickAnnotation, d: &Detection| {
        let dist = (c.x - d.bbox().cx()).hypot(c.y - d.bbox().cy());
        d.class_id() == c.class_id && dist <= 0.5 * (d.bbox().w() * d.bbox().h()).sqrt()
    };
    let perfect: Vec<Vec<usize>> = permutations(6)
        .into_iter()
        .filter(|perm| perm.iter().enumerate().all(|(ci, &di)| feasible(&clicks[ci], &dets[di])))
        .collect();
    if perfect.len() != 1 {
        return Err(format!("seed {seed}: instance has {} feasible assignments", perfect.len()));
    }
    let m = match_clicks(&clicks, &dets, &cfg);
    let mut got = vec![usize::MAX; 6];
    for p in &m.pairs {
        got[p.click as usize] = p.detection;
    }
    if got != perfect[0] || m.pairs.iter().any(|p| p.relabel) {
        return Err(format!("seed {seed}: greedy {got:?} vs brute force {:?}", perfect[0]));
    }
    Ok(())
}

pub struct PruningRun {
    pub same_result: bool,
    pub fewer_calls: bool,
    pub exhaustive_calls: usize,
    pub best_first_calls: usize,
}

/// One hierarchical search under both pruning modes on a random noisy scene.
pub fn pruning_run(seed: u64) -> PruningRun {
    let mut r = rng::stream(&[seed, 0x0070_7275_6e65]);
    let spec = SyntheticSpec {
        images: 1,
        ..SyntheticSpec::default()
    };
    let gt = synthetic_corpus(&spec, seed).remove(0);
    let noise = NoiseProfile {
        p_miss: r.random_range(0.2..1.0),
        p_mislabel: r.random_range(0.0..0.3),
        p_false_positive: r.random_range(0.0..2.0),
        center_jitter: r.random_range(0.0..0.1),
        size_jitter: r.random_range(0.0..0.1),
        recover_gain: if r.random_bool(0.5) { 1.6 } else { 1.0 },
        seed,
    };
    let k = r.random_range(3usize..=7);
    let base = EngineConfig {
        max_depth: r.random_range(1u32..=4),
        ..EngineConfig::default()
    }
    .with_anchor_count(k)
    .unwrap();
    let obj = &gt.objects[r.random_range(0..gt.objects.len())];
    let click = ClickAnnotation::new(obj.bbox.cx(), obj.bbox.cy(), obj.class_id, 0);
    let root_score = if r.random_bool(0.5) { Some(r.random_range(0.1..0.45)) } else { None };
    let det = SimulatedDetector::for_ground_truth(&gt, noise).unwrap();

    let run = |pruning| {
        let cfg = EngineConfig { pruning, ..base.clone() };
        hierarchical_detect(&click, &det, &cfg, &gt.image, root_score)
    };
    let (ex, ex_trace) = run(PruningMode::Exhaustive);
    let (bf, bf_trace) = run(PruningMode::BestFirst);
    PruningRun {
        same_result: ex.bbox == bf.bbox && ex.class_id == bf.class_id && ex.effective_prob == bf.effective_prob,
        fewer_calls: bf_trace.detector_calls < ex_trace.detector_calls,
        exhaustive_calls: ex_trace.detector_calls,
        best_first_calls: bf_trace.detector_calls,
    }
}

/// A VOC annotation with random 1-based inclusive corners, plus the boxes
/// it should parse to, computed here from scratch.
pub struct VocCase {
    pub stem: String,
    pub xml: String,
    pub expected: Vec<(String, [f64; 4])>,
    pub size: (u32, u32),
}

pub fn voc_case(index: usize) -> VocCase {
    let mut r = rng::stream(&[index as u64, 0x0076_6f63]);
    let (w, h) = (r.random_range(50u32..=800), r.random_range(50u32..=600));
    let names = ["person", "dog", "car", "bicycle", "chair"];
    let n = r.random_range(0..=5);
    let mut objects = String::new();
    let mut expected = Vec::new();
    for _ in 0..n {
        let name = names[r.random_range(0..names.len())];
        let xmin = r.random_range(1..w);
        let xmax = r.random_range(xmin + 1..=w);
        let ymin = r.random_range(1..h);
        let ymax = r.random_range(ymin + 1..=h);
        objects.push_str(&format!(
            "  <object>\n    <name>{name}</name>\n    <pose>Unspecified</pose>\n    <truncated>0</truncated>\n    <difficult>0</difficult>\n    <bndbox>\n      <xmin>{xmin}</xmin>\n      <ymin>{ymin}</ymin>\n      <xmax>{xmax}</xmax>\n      <ymax>{ymax}</ymax>\n    </bndbox>\n  </object>\n"
        ));
        // Pixel i covers [i-1, i] in continuous coordinates.
        let (left, right) = (f64::from(xmin) - 1.0, f64::from(xmax));
        let (top, bottom) = (f64::from(ymin) - 1.0, f64::from(ymax));
        expected.push((
            name.to_owned(),
            [(left + right) / 2.0, (top + bottom) / 2.0, right - left, bottom - top],
        ));
    }
    let stem = format!("2008_{index:06}");
    let xml = format!(
        "<annotation>\n  <folder>VOC2012</folder>\n  <filename>{stem}.jpg</filename>\n  <size>\n    <width>{w}</width>\n    <height>{h}</height>\n    <depth>3</depth>\n  </size>\n  <segmented>0</segmented>\n{objects}</annotation>\n"
    );
    VocCase {
        stem,
        xml,
        expected,
        size: (w, h),
    }
}

/// Parses one case and compares against the independent conversion.
pub fn check_voc_case(case: &VocCase, parsed: &oneclick_core::GroundTruthImage) -> Result<(), String> {
    if parsed.image.id() != case.stem || (parsed.image.width(), parsed.image.height()) != case.size {
        return Err(format!("{}: image metadata mismatch", case.stem));
    }
    if parsed.objects.len() != case.expected.len() {
        return Err(format!("{}: {} objects, expected {}", case.stem, parsed.objects.len(), case.expected.len()));
    }
    for (obj, (name, [cx, cy, w, h])) in parsed.objects.iter().zip(&case.expected) {
        if parsed.label_table.get(&obj.class_id) != Some(name) {
            return Err(format!("{}: label mismatch for {name}", case.stem));
        }
        let b = &obj.bbox;
        let close = |a: f64, e: f64| (a - e).abs() <= 1e-9;
        if !(close(b.cx(), *cx) && close(b.cy(), *cy) && close(b.w(), *w) && close(b.h(), *h)) {
            return Err(format!("{}: {b:?} vs ({cx}, {cy}, {w}, {h})", case.stem));
        }
    }
    Ok(())
}
