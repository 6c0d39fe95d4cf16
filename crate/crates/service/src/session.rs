//! Session state and the operations behind the HTTP API, independent of
//! transport.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock, RwLock};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use guidedseg_core::error::Error as CoreError;
use guidedseg_core::image::RgbImage;
use guidedseg_core::labels::LabelMap;
use guidedseg_core::model::{
    argmax_mask, guidance_from_frames, infer, input_tensor, update_guidance, AnnotationDelta, AnnotationSet, Fusion, Label,
    Locality, ModelParams, Point, QueryCache, SupportFrame, TaskRepresentation,
};
use serde::{Deserialize, Serialize};

use crate::rle;

pub type Scalar = f32;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("{0}")]
    NotFound(String),
    /// `point` indexes the offending entry of an annotation request.
    #[error("{message}")]
    BadRequest { message: String, point: Option<usize> },
    #[error("{0}")]
    Unavailable(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl ServiceError {
    pub fn bad(message: impl Into<String>) -> Self {
        ServiceError::BadRequest { message: message.into(), point: None }
    }
}

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocalityMode {
    /// Spatial guidance while the session holds one frame, pooled otherwise.
    #[default]
    Auto,
    Global,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Limits {
    pub max_frames: usize,
    pub max_sessions: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self { max_frames: 64, max_sessions: 256 }
    }
}

/// A click in image pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Click {
    pub x: usize,
    pub y: usize,
    pub label: Polarity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Polarity {
    #[serde(rename = "+")]
    Positive,
    #[serde(rename = "-")]
    Negative,
}

impl From<Polarity> for Label {
    fn from(p: Polarity) -> Self {
        match p {
            Polarity::Positive => Label::Positive,
            Polarity::Negative => Label::Negative,
        }
    }
}

/// A segmented frame under the session's current guidance.
#[derive(Debug)]
pub struct MaskResult {
    pub mask: LabelMap,
    pub rle: Vec<u32>,
    /// No annotation anywhere (or none the head can use): the mask does not
    /// depend on the support.
    pub degenerate: bool,
    pub infer_ms: f64,
    png: OnceLock<Vec<u8>>,
}

impl MaskResult {
    /// 8-bit grayscale PNG, 255 on the mask.
    pub fn png(&self) -> Result<&[u8]> {
        if let Some(p) = self.png.get() {
            return Ok(p);
        }
        let data = self.mask.data().iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
        let bytes = LabelMap::new(self.mask.height(), self.mask.width(), data)?.to_png()?;
        Ok(self.png.get_or_init(|| bytes))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationCounts {
    pub positive: usize,
    pub negative: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub session_id: String,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub locality: Locality,
    pub annotations: Vec<AnnotationCounts>,
    pub guidance_ms: Option<f64>,
    pub infer_ms: Option<f64>,
    pub created_ms: u64,
    pub updated_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Update {
    pub mask_rle: Vec<u32>,
    pub guidance_ms: f64,
    pub infer_ms: f64,
    pub degenerate: bool,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

pub struct Session {
    id: String,
    size: (usize, usize),
    mode: LocalityMode,
    /// Encoder output and annotations per frame.
    support: Vec<SupportFrame<Scalar>>,
    queries: Vec<QueryCache<Scalar>>,
    rep: TaskRepresentation<Scalar>,
    masks: Mutex<Vec<Option<Arc<MaskResult>>>>,
    guidance_ms: Option<f64>,
    infer_ms: Option<f64>,
    created_ms: u64,
    updated_ms: u64,
}

impl Session {
    fn new(id: String, params: &ModelParams<Scalar>, images: &[RgbImage], mode: LocalityMode, max_frames: usize) -> Result<Self> {
        let first = images.first().ok_or_else(|| ServiceError::bad("a session needs at least one image"))?;
        if images.len() > max_frames {
            return Err(ServiceError::bad(format!("{} frames exceed the limit of {max_frames}", images.len())));
        }
        let size = first.size();
        let now = now_ms();
        let mut s = Self {
            id,
            size,
            mode,
            support: Vec::new(),
            queries: Vec::new(),
            rep: TaskRepresentation::empty(params.config.channels(), (0, 0), Locality::GlobalPool),
            masks: Mutex::new(Vec::new()),
            guidance_ms: None,
            infer_ms: None,
            created_ms: now,
            updated_ms: now,
        };
        for img in images {
            s.push_frame(params, img)?;
        }
        s.rep = guidance_from_frames(params.config.feature_stride, s.locality(), &s.support)?;
        Ok(s)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn frames(&self) -> usize {
        self.support.len()
    }

    pub fn representation(&self) -> &TaskRepresentation<Scalar> {
        &self.rep
    }

    pub fn annotations(&self, frame: usize) -> Option<&AnnotationSet> {
        self.support.get(frame).map(|f| &f.annotations)
    }

    pub fn locality(&self) -> Locality {
        match self.mode {
            LocalityMode::Auto if self.support.len() == 1 => Locality::Identity,
            LocalityMode::Auto | LocalityMode::Global => Locality::GlobalPool,
            LocalityMode::Identity => Locality::Identity,
        }
    }

    fn push_frame(&mut self, params: &ModelParams<Scalar>, image: &RgbImage) -> Result<()> {
        if image.size() != self.size {
            return Err(ServiceError::bad(format!(
                "{}x{} frame in a session of {}x{} frames",
                image.height(),
                image.width(),
                self.size.0,
                self.size.1
            )));
        }
        let input = input_tensor::<Scalar>(image, params.config.feature_stride)?;
        let query = QueryCache::new(params, &input)?;
        let annotations = AnnotationSet::new(self.size.0, self.size.1);
        self.support.push(SupportFrame { features: query.features.clone(), annotations });
        self.queries.push(query);
        self.masks.get_mut().expect("mask cache lock").push(None);
        Ok(())
    }

    fn frame_index(&self, frame: usize) -> Result<usize> {
        if frame < self.support.len() {
            Ok(frame)
        } else {
            Err(ServiceError::NotFound(format!("frame {frame} of a {}-frame session", self.support.len())))
        }
    }

    fn invalidate(&mut self) {
        self.masks.get_mut().expect("mask cache lock").iter_mut().for_each(|m| *m = None);
        self.updated_ms = now_ms();
    }

    /// Validates a click list against the frame size, in order.
    pub fn points(&self, clicks: &[Click]) -> Result<Vec<Point>> {
        let (h, w) = self.size;
        clicks
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if c.x < w && c.y < h {
                    Ok(Point::new(c.y, c.x, c.label.into()))
                } else {
                    Err(ServiceError::BadRequest {
                        message: format!("point {i} at (x={}, y={}) is outside the {w}x{h} image", c.x, c.y),
                        point: Some(i),
                    })
                }
            })
            .collect()
    }

    /// Applies `delta` to one frame and re-derives guidance from the cached
    /// features of every frame. Nothing changes on error.
    pub fn edit(&mut self, params: &ModelParams<Scalar>, frame: usize, delta: &AnnotationDelta) -> Result<f64> {
        let frame = self.frame_index(frame)?;
        let locality = self.locality();
        if locality == Locality::Identity {
            let mut next = self.support[frame].annotations.clone();
            delta.apply(&mut next)?;
            let others = self.support.iter().enumerate().any(|(i, f)| i != frame && !f.annotations.is_empty());
            if others && !next.is_empty() {
                return Err(ServiceError::bad("spatial guidance comes from a single annotated frame"));
            }
        }
        let start = Instant::now();
        let rep = update_guidance(params, locality, &mut self.support, &self.rep, frame, delta)?;
        let guidance_ms = ms_since(start);
        self.rep = rep;
        self.guidance_ms = Some(guidance_ms);
        self.invalidate();
        Ok(guidance_ms)
    }

    fn add_frame(&mut self, params: &ModelParams<Scalar>, image: &RgbImage, max_frames: usize) -> Result<usize> {
        if self.support.len() >= max_frames {
            return Err(ServiceError::bad(format!("session already holds the maximum of {max_frames} frames")));
        }
        let before = self.locality();
        self.push_frame(params, image)?;
        if self.locality() != before {
            self.rep = guidance_from_frames(params.config.feature_stride, self.locality(), &self.support)?;
            self.invalidate();
        }
        self.updated_ms = now_ms();
        Ok(self.support.len() - 1)
    }

    /// The frame segmented under the current guidance; cached until the
    /// guidance changes.
    pub fn mask(&self, params: &ModelParams<Scalar>, frame: usize) -> Result<Arc<MaskResult>> {
        let frame = self.frame_index(frame)?;
        if let Some(m) = &self.masks.lock().expect("mask cache lock")[frame] {
            return Ok(m.clone());
        }
        let start = Instant::now();
        let unannotated = self.support.iter().all(|f| f.annotations.is_empty());
        let (mask, degenerate) = match infer(params, &self.queries[frame], Some(&self.rep)) {
            Ok(logits) => (argmax_mask(&logits)?.crop(self.size.0, self.size.1)?, unannotated),
            Err(CoreError::DegenerateSupport(_)) => (LabelMap::filled(self.size.0, self.size.1, 0), true),
            Err(e) => return Err(e.into()),
        };
        let result = Arc::new(MaskResult {
            rle: rle::encode(&mask),
            mask,
            degenerate,
            infer_ms: ms_since(start),
            png: OnceLock::new(),
        });
        // A concurrent reader may have filled the slot first; both results
        // are identical, keep the stored one.
        let mut cache = self.masks.lock().expect("mask cache lock");
        Ok(cache[frame].get_or_insert(result).clone())
    }

    pub fn summary(&self) -> Summary {
        Summary {
            session_id: self.id.clone(),
            frames: self.support.len(),
            height: self.size.0,
            width: self.size.1,
            locality: self.locality(),
            annotations: self
                .support
                .iter()
                .map(|f| AnnotationCounts {
                    positive: f.annotations.count(Label::Positive),
                    negative: f.annotations.count(Label::Negative),
                })
                .collect(),
            guidance_ms: self.guidance_ms,
            infer_ms: self.infer_ms,
            created_ms: self.created_ms,
            updated_ms: self.updated_ms,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Created {
    pub session_id: String,
    pub frames: usize,
    pub feature_stride: usize,
}

/// Every live session over one shared, read-only checkpoint. Mutations of
/// a session are exclusive; mask reads share the session.
pub struct Store {
    params: Arc<ModelParams<Scalar>>,
    model: String,
    limits: Limits,
    next_id: AtomicU64,
    sessions: Mutex<HashMap<String, Arc<RwLock<Session>>>>,
}

impl Store {
    /// `model` is the name clients pass when creating sessions.
    pub fn new(params: ModelParams<Scalar>, model: impl Into<String>, limits: Limits) -> Result<Self> {
        let cfg = &params.config;
        if cfg.fusion != Fusion::Late || !cfg.is_guided() {
            return Err(ServiceError::Core(CoreError::Unsupported(
                "sessions need a late-fusion guided checkpoint for guidance-only updates".into(),
            )));
        }
        if limits.max_frames == 0 || limits.max_sessions == 0 {
            return Err(ServiceError::Core(CoreError::Config("frame and session limits must be positive".into())));
        }
        Ok(Self {
            params: Arc::new(params),
            model: model.into(),
            limits,
            next_id: AtomicU64::new(1),
            sessions: Mutex::new(HashMap::new()),
        })
    }

    pub fn params(&self) -> &ModelParams<Scalar> {
        &self.params
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    pub fn session(&self, id: &str) -> Result<Arc<RwLock<Session>>> {
        self.sessions
            .lock()
            .expect("session table lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownSession(id.to_string()))
    }

    pub fn create(&self, model: &str, images: &[RgbImage], mode: LocalityMode) -> Result<Created> {
        if model != self.model {
            return Err(ServiceError::NotFound(format!("unknown model {model:?}; this service runs {:?}", self.model)));
        }
        if self.sessions.lock().expect("session table lock").len() >= self.limits.max_sessions {
            return Err(ServiceError::Unavailable(format!("session limit of {} reached", self.limits.max_sessions)));
        }
        let id = format!("s{:016x}", self.next_id.fetch_add(1, Ordering::Relaxed));
        let session = Session::new(id.clone(), &self.params, images, mode, self.limits.max_frames)?;
        let frames = session.frames();
        let mut table = self.sessions.lock().expect("session table lock");
        if table.len() >= self.limits.max_sessions {
            return Err(ServiceError::Unavailable(format!("session limit of {} reached", self.limits.max_sessions)));
        }
        table.insert(id.clone(), Arc::new(RwLock::new(session)));
        Ok(Created { session_id: id, frames, feature_stride: self.params.config.feature_stride })
    }

    pub fn append_frame(&self, id: &str, image: &RgbImage) -> Result<usize> {
        let s = self.session(id)?;
        let mut s = s.write().expect("session lock");
        s.add_frame(&self.params, image, self.limits.max_frames)
    }

    /// Merges clicks into a frame (a repeated pixel takes the new label) and
    /// segments that frame.
    pub fn annotate(&self, id: &str, frame: usize, clicks: &[Click]) -> Result<Update> {
        let s = self.session(id)?;
        let mut s = s.write().expect("session lock");
        let add = s.points(clicks)?;
        let guidance_ms = s.edit(&self.params, frame, &AnnotationDelta { add, ..Default::default() })?;
        let m = s.mask(&self.params, frame)?;
        s.infer_ms = Some(m.infer_ms);
        Ok(Update { mask_rle: m.rle.clone(), guidance_ms, infer_ms: m.infer_ms, degenerate: m.degenerate })
    }

    /// Applies an arbitrary edit; the HTTP API exposes additions and clears.
    pub fn edit(&self, id: &str, frame: usize, delta: &AnnotationDelta) -> Result<f64> {
        let s = self.session(id)?;
        let mut s = s.write().expect("session lock");
        s.edit(&self.params, frame, delta)
    }

    /// Clears one frame's annotations, or every frame's.
    pub fn clear(&self, id: &str, frame: Option<usize>) -> Result<()> {
        let s = self.session(id)?;
        let mut s = s.write().expect("session lock");
        let delta = AnnotationDelta { clear: true, ..Default::default() };
        let frames = match frame {
            Some(f) => vec![s.frame_index(f)?],
            None => (0..s.frames()).collect(),
        };
        for f in frames {
            if !s.support[f].annotations.is_empty() {
                s.edit(&self.params, f, &delta)?;
            }
        }
        Ok(())
    }

    pub fn mask(&self, id: &str, frame: usize) -> Result<Arc<MaskResult>> {
        let s = self.session(id)?;
        let s = s.read().expect("session lock");
        s.mask(&self.params, frame)
    }

    pub fn summary(&self, id: &str) -> Result<Summary> {
        let s = self.session(id)?;
        let s = s.read().expect("session lock");
        Ok(s.summary())
    }
}
