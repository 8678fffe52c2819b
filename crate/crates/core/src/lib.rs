//! One-click annotation engine.
//!
//! Human clicks on object centers drive the refinement of raw detector
//! output: detections get re-centered on the click, relabeled to the
//! click's class, or dropped when nobody clicked them. Clicks that no
//! detection answers trigger a hierarchical search over anchor-shaped
//! proposals around the click.
//!
//! The pipeline for one image is [`engine::refine_image`]; batch runs over a
//! dataset go through [`simulate::simulate`].

pub mod dataset;
pub mod detector;
pub mod engine;
pub mod eval;
pub mod hierarchy;
pub mod matcher;
pub mod model;
pub mod rng;
pub mod simulate;

pub use dataset::{GroundTruthImage, GroundTruthObject, LabelTable};
pub use detector::{Crop, Detector, DetectorError, DetectorOutput, NoiseProfile, SimulatedDetector};
pub use engine::{refine_image, RefinementOutcome, RefinementStats};
pub use eval::{evaluate, EvalReport};
pub use hierarchy::{hierarchical_detect, HierarchyTrace, ProposalNode};
pub use matcher::{apply_corrections, match_clicks, match_threshold, MatchResult};
pub use model::{
    box_iou, clamp_box_to_image, Anchor, BBox, ClickAnnotation, Detection, EngineConfig, ImageRef,
    Provenance, PruningMode, RefinedAnnotation,
};
