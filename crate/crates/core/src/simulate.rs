//! Batch simulation: synthetic annotators over a dataset, raw versus
//! refined evaluation, and parameter sweeps.
//!
//! Human time is not measurable here; reports carry click counts and
//! detector-call counts instead.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::GroundTruthImage;
use crate::detector::{NoiseProfile, ProfileError, SimulatedDetector};
use crate::engine::{refine_image, RefinementOutcome};
use crate::eval::{evaluate, EvalError, EvalReport};
use crate::model::{ClickAnnotation, EngineConfig, ModelError};
use crate::rng;

pub const IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ModelError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("invalid click model `{0}`, expected `exact` or `jitter:<sigma>`")]
    ClickModel(String),
    #[error("sweep over {param} needs at least one value")]
    EmptySweep { param: SweepParam },
}

/// How synthetic annotators place their clicks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClickModel {
    /// Exactly on the ground-truth center.
    Exact,
    /// Gaussian offset per axis, sigma as a fraction of sqrt(box area).
    Jitter(f64),
}

impl FromStr for ClickModel {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "exact" {
            return Ok(ClickModel::Exact);
        }
        s.strip_prefix("jitter:")
            .and_then(|v| v.parse::<f64>().ok())
            .filter(|v| *v >= 0.0 && v.is_finite())
            .map(ClickModel::Jitter)
            .ok_or_else(|| SimError::ClickModel(s.to_owned()))
    }
}

impl fmt::Display for ClickModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClickModel::Exact => f.write_str("exact"),
            ClickModel::Jitter(s) => write!(f, "jitter:{s}"),
        }
    }
}

const TAG_CLICK: u64 = 0x0063_6c69_636b;

/// One click per ground-truth object, in object order.
pub fn synthesize_clicks(gt: &GroundTruthImage, model: ClickModel, seed: u64) -> Vec<ClickAnnotation> {
    let image_key = rng::hash_str(gt.image.id());
    let (w, h) = (f64::from(gt.image.width()), f64::from(gt.image.height()));
    gt.objects
        .iter()
        .enumerate()
        .map(|(i, obj)| {
            let (mut x, mut y) = (obj.bbox.cx(), obj.bbox.cy());
            if let ClickModel::Jitter(sigma) = model {
                if sigma > 0.0 {
                    let scale = sigma * obj.bbox.area().sqrt();
                    let normal = Normal::new(0.0, scale).expect("positive sigma");
                    let mut r = rng::stream(&[seed, image_key, i as u64, TAG_CLICK]);
                    x = (x + normal.sample(&mut r)).clamp(0.0, w);
                    y = (y + normal.sample(&mut r)).clamp(0.0, h);
                }
            }
            ClickAnnotation::new(x, y, obj.class_id, i as u64)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationParams {
    pub clicks: ClickModel,
    pub noise: NoiseProfile,
    pub engine: EngineConfig,
    /// Overrides the noise and engine seeds and keys click jitter.
    pub seed: u64,
}

impl SimulationParams {
    pub fn new(clicks: ClickModel, noise: NoiseProfile, engine: EngineConfig, seed: u64) -> Self {
        Self {
            clicks,
            noise,
            engine,
            seed,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceTotals {
    pub confirmed: usize,
    pub relabeled: usize,
    pub recovered: usize,
    pub unresolved: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub images: usize,
    pub raw: EvalReport,
    pub refined: EvalReport,
    pub clicks_total: usize,
    pub detector_calls: usize,
    pub provenance: ProvenanceTotals,
    /// Only filled when timing was requested; it would break byte-identical
    /// reports otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<u64>,
}

/// Runs the whole pipeline over `dataset` and evaluates raw detections and
/// refined annotations at IoU 0.5.
pub fn simulate(dataset: &[GroundTruthImage], params: &SimulationParams) -> Result<SimulationReport, SimError> {
    let mut engine = params.engine.clone();
    engine.seed = params.seed;
    engine.validate()?;
    let noise = NoiseProfile {
        seed: params.seed,
        ..params.noise.clone()
    };
    noise.validate()?;

    let outcomes: Vec<(usize, RefinementOutcome)> = dataset
        .par_iter()
        .map(|gt| {
            let clicks = synthesize_clicks(gt, params.clicks, params.seed);
            let detector = SimulatedDetector::for_ground_truth(gt, noise.clone())?;
            Ok((clicks.len(), refine_image(&gt.image, &clicks, &detector, &engine)))
        })
        .collect::<Result<_, ProfileError>>()?;

    let raw: Vec<_> = outcomes.iter().map(|(_, o)| o.raw_detections.clone()).collect();
    let refined: Vec<_> = outcomes.iter().map(|(_, o)| o.annotations.clone()).collect();
    let mut provenance = ProvenanceTotals::default();
    for (_, o) in &outcomes {
        provenance.confirmed += o.stats.confirmed;
        provenance.relabeled += o.stats.relabeled;
        provenance.recovered += o.stats.recovered;
        provenance.unresolved += o.stats.unresolved;
    }
    Ok(SimulationReport {
        images: dataset.len(),
        raw: evaluate(&raw, dataset, IOU_THRESHOLD)?,
        refined: evaluate(&refined, dataset, IOU_THRESHOLD)?,
        clicks_total: outcomes.iter().map(|(n, _)| n).sum(),
        detector_calls: outcomes.iter().map(|(_, o)| o.stats.detector_calls).sum(),
        provenance,
        wall_ms: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    /// Number of default anchors (K).
    Anchors,
    /// Maximum proposal-tree depth (T).
    Depth,
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParam::Anchors => "anchors",
            SweepParam::Depth => "depth",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: u32,
    pub report: SimulationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub param: SweepParam,
    pub rows: Vec<SweepRow>,
}

/// One [`simulate`] run per value of `param`, everything else fixed.
pub fn sweep(
    dataset: &[GroundTruthImage],
    param: SweepParam,
    values: &[u32],
    base: &SimulationParams,
) -> Result<SweepTable, SimError> {
    if values.is_empty() {
        return Err(SimError::EmptySweep { param });
    }
    let rows = values
        .iter()
        .map(|&value| {
            let mut params = base.clone();
            params.engine = match param {
                SweepParam::Anchors => params.engine.with_anchor_count(value as usize)?,
                SweepParam::Depth => EngineConfig {
                    max_depth: value,
                    ..params.engine
                },
            };
            Ok(SweepRow {
                value,
                report: simulate(dataset, &params)?,
            })
        })
        .collect::<Result<_, SimError>>()?;
    Ok(SweepTable { param, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synthetic_corpus, SyntheticSpec};

    #[test]
    fn click_model_parsing() {
        assert_eq!("exact".parse::<ClickModel>().unwrap(), ClickModel::Exact);
        assert_eq!("jitter:0.05".parse::<ClickModel>().unwrap(), ClickModel::Jitter(0.05));
        assert!("jitter:-1".parse::<ClickModel>().is_err());
        assert!("jitter".parse::<ClickModel>().is_err());
        assert!("nearby".parse::<ClickModel>().is_err());
    }

    #[test]
    fn exact_clicks_sit_on_centers() {
        let gt = &synthetic_corpus(&SyntheticSpec::sparse(1), 4)[0];
        for (c, o) in synthesize_clicks(gt, ClickModel::Exact, 0).iter().zip(&gt.objects) {
            assert_eq!((c.x, c.y, c.class_id), (o.bbox.cx(), o.bbox.cy(), o.class_id));
        }
    }

    #[test]
    fn jittered_clicks_are_seeded_and_in_bounds() {
        let gt = &synthetic_corpus(&SyntheticSpec::default(), 4)[0];
        let a = synthesize_clicks(gt, ClickModel::Jitter(0.2), 11);
        assert_eq!(a, synthesize_clicks(gt, ClickModel::Jitter(0.2), 11));
        assert_ne!(a, synthesize_clicks(gt, ClickModel::Jitter(0.2), 12));
        assert!(a.iter().all(|c| gt.image.contains_point(c.x, c.y)));
    }

    #[test]
    fn noiseless_simulation_is_perfect() {
        let data = synthetic_corpus(&SyntheticSpec { images: 8, ..SyntheticSpec::default() }, 1);
        let params = SimulationParams::new(ClickModel::Exact, NoiseProfile::noiseless(), EngineConfig::default(), 5);
        let r = simulate(&data, &params).unwrap();
        assert_eq!(r.refined.map, 1.0);
        assert_eq!(r.refined.recall, 1.0);
        assert_eq!(r.detector_calls, 8);
    }

    #[test]
    fn corrections_alone_cannot_fix_misses() {
        let data = synthetic_corpus(&SyntheticSpec::sparse(10), 1);
        let noise = NoiseProfile {
            p_miss: 1.0,
            recover_gain: 1.0,
            ..NoiseProfile::default()
        };
        let engine = EngineConfig {
            max_depth: 1,
            ..EngineConfig::default()
        };
        let r = simulate(&data, &SimulationParams::new(ClickModel::Exact, noise, engine, 0)).unwrap();
        assert_eq!(r.refined.recall, 0.0);
        assert_eq!(r.raw.recall, 0.0);
    }

    #[test]
    fn single_value_sweep_matches_simulate() {
        let data = synthetic_corpus(&SyntheticSpec::sparse(6), 2);
        let noise = NoiseProfile {
            p_miss: 0.4,
            ..NoiseProfile::default()
        };
        let params = SimulationParams::new(ClickModel::Exact, noise, EngineConfig::default(), 3);
        let table = sweep(&data, SweepParam::Depth, &[3], &params).unwrap();
        assert_eq!(table.rows.len(), 1);
        assert_eq!(table.rows[0].report, simulate(&data, &params).unwrap());
        assert!(matches!(sweep(&data, SweepParam::Anchors, &[], &params), Err(SimError::EmptySweep { .. })));
        assert!(sweep(&data, SweepParam::Anchors, &[9], &params).is_err());
    }
}
