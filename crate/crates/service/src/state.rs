//! Sessions and the operations on them. HTTP handlers and journal replay go
//! through the same code, so a replayed session is built exactly like the
//! original.

use std::collections::{BTreeMap, HashMap};
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use oneclick_core::dataset::{export_annotations, load_dataset_dir, DatasetError, ExportedAnnotations, ExportedBox};
use oneclick_core::model::{default_anchors, ModelError};
use oneclick_core::{
    refine_image, ClickAnnotation, EngineConfig, GroundTruthImage, ImageRef, LabelTable, PruningMode,
    RefinementOutcome, SimulatedDetector,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ServiceConfig;
use crate::error::ApiError;
use crate::journal::{Event, Journal, JournalError};

/// Per-request engine overrides accepted by the refine endpoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineOverrides {
    /// Use the first K default anchors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_depth: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub match_alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_factor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_penalty: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pruning: Option<PruningMode>,
}

impl RefineOverrides {
    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }

    pub fn apply(&self, base: &EngineConfig) -> Result<EngineConfig, ApiError> {
        let mut cfg = base.clone();
        if let Some(k) = self.anchor_count {
            cfg.anchors = default_anchors(k).map_err(|e| ApiError::invalid("anchor_count", e.to_string()))?;
        }
        cfg.max_depth = self.max_depth.unwrap_or(cfg.max_depth);
        cfg.match_alpha = self.match_alpha.unwrap_or(cfg.match_alpha);
        cfg.context_factor = self.context_factor.unwrap_or(cfg.context_factor);
        cfg.depth_penalty = self.depth_penalty.unwrap_or(cfg.depth_penalty);
        cfg.pruning = self.pruning.unwrap_or(cfg.pruning);
        cfg.validate().map_err(|e| {
            let field = match &e {
                ModelError::Config { field, .. } => *field,
                _ => "anchor_count",
            };
            ApiError::invalid(field, e.to_string())
        })?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Open,
    Refined,
}

/// What refine returns: the engine outcome plus the exported boxes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefineResult {
    pub session_id: String,
    pub image_id: String,
    pub engine: EngineConfig,
    #[serde(flatten)]
    pub outcome: RefinementOutcome,
    pub boxes: Vec<ExportedBox>,
}

#[derive(Debug)]
pub struct Session {
    pub id: String,
    pub image: ImageRef,
    pub clicks: Vec<ClickAnnotation>,
    pub result: Option<RefineResult>,
}

impl Session {
    pub fn state(&self) -> SessionState {
        if self.result.is_some() {
            SessionState::Refined
        } else {
            SessionState::Open
        }
    }
}

/// Everything the UI needs to redraw a session from scratch.
#[derive(Debug, Clone, Serialize)]
pub struct SessionView<'a> {
    pub session_id: &'a str,
    pub image: &'a ImageRef,
    pub label_table: &'a LabelTable,
    pub clicks: &'a [ClickAnnotation],
    pub state: SessionState,
    pub result: Option<&'a RefineResult>,
}

#[derive(Debug, Error)]
pub enum StartupError {
    #[error("dataset: {0}")]
    Dataset(#[from] DatasetError),
    #[error("journal: {0}")]
    Journal(#[from] JournalError),
    #[error("journal event {index} cannot be replayed: {message}")]
    Replay { index: usize, message: String },
}

pub struct AppState {
    config: ServiceConfig,
    images: BTreeMap<String, GroundTruthImage>,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    /// Latest export per image, from whichever session refined it last.
    annotations: RwLock<HashMap<String, String>>,
    /// Serializes commits; `None` inside means no journal is kept.
    journal: Mutex<Option<Journal>>,
    next_session: AtomicU64,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

impl AppState {
    /// In-memory state over an already loaded dataset, no journal.
    pub fn new(config: ServiceConfig, dataset: Vec<GroundTruthImage>) -> Self {
        Self {
            config,
            images: dataset.into_iter().map(|gt| (gt.image.id().to_owned(), gt)).collect(),
            sessions: RwLock::default(),
            annotations: RwLock::default(),
            journal: Mutex::new(None),
            next_session: AtomicU64::new(1),
        }
    }

    /// Loads the dataset, then replays and reopens the journal if one is
    /// configured.
    pub fn from_config(config: ServiceConfig) -> Result<Self, StartupError> {
        let dataset = load_dataset_dir(&config.dataset_dir)?;
        let journal_path = config.journal.clone();
        let state = Self::new(config, dataset);
        if let Some(path) = journal_path {
            let (journal, events) = Journal::open(&path)?;
            for (index, event) in events.into_iter().enumerate() {
                state.replay(event).map_err(|e| StartupError::Replay {
                    index,
                    message: e.message,
                })?;
            }
            *lock(&state.journal) = Some(journal);
        }
        Ok(state)
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn images(&self) -> impl Iterator<Item = &GroundTruthImage> {
        self.images.values()
    }

    pub fn image(&self, id: &str) -> Result<&GroundTruthImage, ApiError> {
        self.images.get(id).ok_or_else(|| ApiError::not_found("image", id))
    }

    /// File backing an image, if its uri is a plain relative path.
    pub fn image_path(&self, id: &str) -> Result<PathBuf, ApiError> {
        let gt = self.image(id)?;
        let uri = Path::new(gt.image.uri());
        let plain = !gt.image.uri().is_empty() && uri.components().all(|c| matches!(c, Component::Normal(_)));
        if !plain {
            return Err(ApiError::not_found("image file for", id));
        }
        Ok(self.config.image_dir().join(uri))
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.sessions
            .read()
            .expect("session map lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("session", id))
    }

    /// Logs `event`, then applies the change while still holding the log
    /// lock, so log order and application order agree.
    fn commit<T>(&self, event: &Event, apply: impl FnOnce() -> T) -> Result<T, ApiError> {
        let mut journal = lock(&self.journal);
        if let Some(j) = journal.as_mut() {
            j.append(event).map_err(|e| {
                tracing::error!(path = %j.path().display(), error = %e, "journal write failed");
                ApiError::internal(format!("journal write failed: {e}"))
            })?;
        }
        Ok(apply())
    }

    pub fn create_session(&self, image_id: &str) -> Result<String, ApiError> {
        let gt = self.image(image_id)?;
        let id = format!("s{:06}", self.next_session.fetch_add(1, Ordering::Relaxed));
        let event = Event::SessionCreated {
            session_id: id.clone(),
            image_id: image_id.to_owned(),
        };
        self.commit(&event, || self.insert_session(&id, gt))?;
        Ok(id)
    }

    fn insert_session(&self, id: &str, gt: &GroundTruthImage) {
        let session = Session {
            id: id.to_owned(),
            image: gt.image.clone(),
            clicks: Vec::new(),
            result: None,
        };
        self.sessions
            .write()
            .expect("session map lock")
            .insert(id.to_owned(), Arc::new(Mutex::new(session)));
    }

    pub fn add_click(&self, session_id: &str, x: f64, y: f64, class_id: u32) -> Result<u64, ApiError> {
        let handle = self.session(session_id)?;
        let mut s = lock(&handle);
        let (w, h) = (f64::from(s.image.width()), f64::from(s.image.height()));
        if !(0.0..=w).contains(&x) {
            return Err(ApiError::invalid("x", format!("x = {x} is outside [0, {w}]")));
        }
        if !(0.0..=h).contains(&y) {
            return Err(ApiError::invalid("y", format!("y = {y} is outside [0, {h}]")));
        }
        let labels = &self.image(s.image.id())?.label_table;
        if !labels.contains_key(&class_id) {
            return Err(ApiError::invalid("class_id", format!("class {class_id} is not in the label table")));
        }
        let sequence = s.clicks.len() as u64;
        let event = Event::Click {
            session_id: session_id.to_owned(),
            x,
            y,
            class_id,
            sequence,
        };
        self.commit(&event, || {
            s.clicks.push(ClickAnnotation::new(x, y, class_id, sequence));
            s.result = None;
        })?;
        Ok(sequence)
    }

    /// Removes the most recent click and returns its sequence number.
    pub fn undo(&self, session_id: &str) -> Result<u64, ApiError> {
        let handle = self.session(session_id)?;
        let mut s = lock(&handle);
        let Some(last) = s.clicks.last().map(|c| c.sequence) else {
            return Err(ApiError::conflict("no_clicks", "session has no clicks to undo"));
        };
        let event = Event::Undo {
            session_id: session_id.to_owned(),
            sequence: last,
        };
        self.commit(&event, || {
            s.clicks.pop();
            s.result = None;
        })?;
        Ok(last)
    }

    pub fn refine(&self, session_id: &str, overrides: &RefineOverrides) -> Result<RefineResult, ApiError> {
        let handle = self.session(session_id)?;
        let mut s = lock(&handle);
        let engine = overrides.apply(&self.config.engine)?;
        let gt = self.image(s.image.id())?;
        let detector = SimulatedDetector::for_ground_truth(gt, self.config.noise.clone())
            .map_err(|e| ApiError::internal(e.to_string()))?;
        let outcome = refine_image(&s.image, &s.clicks, &detector, &engine);
        let export = export_annotations(&outcome.annotations, &s.image);
        let boxes = serde_json::from_str::<ExportedAnnotations>(&export)
            .map_err(|e| ApiError::internal(e.to_string()))?
            .boxes;
        let result = RefineResult {
            session_id: session_id.to_owned(),
            image_id: s.image.id().to_owned(),
            engine,
            outcome,
            boxes,
        };
        let event = Event::Refine {
            session_id: session_id.to_owned(),
            overrides: overrides.clone(),
        };
        self.commit(&event, || {
            self.annotations
                .write()
                .expect("annotation map lock")
                .insert(s.image.id().to_owned(), export);
            s.result = Some(result.clone());
        })?;
        Ok(result)
    }

    pub fn result(&self, session_id: &str) -> Result<RefineResult, ApiError> {
        let handle = self.session(session_id)?;
        let s = lock(&handle);
        s.result
            .clone()
            .ok_or_else(|| ApiError::conflict("not_refined", format!("session `{session_id}` has not been refined")))
    }

    /// Serialized [`SessionView`] of one session.
    pub fn session_json(&self, session_id: &str) -> Result<serde_json::Value, ApiError> {
        let handle = self.session(session_id)?;
        let s = lock(&handle);
        let view = SessionView {
            session_id: &s.id,
            image: &s.image,
            label_table: &self.image(s.image.id())?.label_table,
            clicks: &s.clicks,
            state: s.state(),
            result: s.result.as_ref(),
        };
        serde_json::to_value(view).map_err(|e| ApiError::internal(e.to_string()))
    }

    pub fn exported(&self, image_id: &str) -> Result<String, ApiError> {
        self.image(image_id)?;
        self.annotations
            .read()
            .expect("annotation map lock")
            .get(image_id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("annotations for image", image_id))
    }

    fn replay(&self, event: Event) -> Result<(), ApiError> {
        match event {
            Event::SessionCreated { session_id, image_id } => {
                let gt = self.image(&image_id)?;
                if let Some(n) = session_id.strip_prefix('s').and_then(|n| n.parse::<u64>().ok()) {
                    self.next_session.fetch_max(n + 1, Ordering::Relaxed);
                }
                self.insert_session(&session_id, gt);
            }
            Event::Click {
                session_id,
                x,
                y,
                class_id,
                sequence,
            } => {
                let got = self.add_click(&session_id, x, y, class_id)?;
                if got != sequence {
                    return Err(ApiError::internal(format!("click replayed as {got}, logged as {sequence}")));
                }
            }
            Event::Undo { session_id, .. } => {
                self.undo(&session_id)?;
            }
            Event::Refine { session_id, overrides } => {
                self.refine(&session_id, &overrides)?;
            }
        }
        Ok(())
    }
}
