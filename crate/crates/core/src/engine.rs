//! One data root, its store, and the loaded models behind a thread-safe
//! facade.
//!
//! Layout under the root: `db/`, `samples/<person>/`, `models/`, `exports/`,
//! an optional `cohort/` of non-enrolled face chips, and an optional
//! `config.json`.

use crate::attendance::{
    self, AttendanceRecord, RecognitionEvent, Recognizer, Session, SessionSummary,
};
use crate::classifier::HeadHyper;
use crate::config::EngineConfig;
use crate::docstore::FileStore;
use crate::enrollment::{self, CaptureOutcome, CaptureParams, PersonRecord, PersonStatus};
use crate::error::PipelineError;
use crate::haar::HaarCascade;
use crate::image::Image;
use crate::models::{self, ModelBundle, TrainReport, TrainSettings};
use crate::siamese::SiameseHyper;
use chrono::{DateTime, Utc};
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

/// Optional per-run overrides of the configured training hyperparameters.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOverrides {
    pub siamese: Option<SiameseHyper>,
    pub head: Option<HeadHyper>,
}

type KeyedLocks = Mutex<HashMap<String, Arc<Mutex<()>>>>;

pub struct Engine {
    root: PathBuf,
    config: EngineConfig,
    store: Arc<FileStore>,
    cascade: RwLock<Option<Arc<HaarCascade>>>,
    models: RwLock<Option<Arc<ModelBundle>>>,
    person_locks: KeyedLocks,
    session_locks: KeyedLocks,
    training: Mutex<()>,
}

fn keyed(locks: &KeyedLocks, key: &str) -> Arc<Mutex<()>> {
    locks.lock().unwrap_or_else(|e| e.into_inner()).entry(key.to_string()).or_default().clone()
}

fn hold(m: &Mutex<()>) -> MutexGuard<'_, ()> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl Engine {
    /// Opens `root` with `config.json` (or defaults).
    pub fn open(root: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let config = EngineConfig::load(root.as_ref())?;
        Engine::open_with(root, config)
    }

    /// Recovers the store, drops uncounted sample files, and loads whatever
    /// models are present.
    pub fn open_with(root: impl AsRef<Path>, config: EngineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let root = root.as_ref().to_path_buf();
        let store = Arc::new(FileStore::open(root.join("db"))?);
        let engine = Engine {
            cascade: RwLock::new(None),
            models: RwLock::new(None),
            person_locks: Mutex::default(),
            session_locks: Mutex::default(),
            training: Mutex::new(()),
            root,
            config,
            store,
        };
        enrollment::repair_samples(engine.store.as_ref(), &engine.samples_dir())?;
        let cascade = models::load_cascade_file(&engine.models_dir())?;
        *engine.cascade.write().unwrap() = cascade.map(Arc::new);
        let bundle = models::load_bundle(engine.store.as_ref(), &engine.models_dir(), Some(engine.config.theta))?;
        *engine.models.write().unwrap() = bundle.map(Arc::new);
        Ok(engine)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn store(&self) -> &Arc<FileStore> {
        &self.store
    }

    pub fn samples_dir(&self) -> PathBuf {
        self.root.join("samples")
    }

    pub fn models_dir(&self) -> PathBuf {
        self.root.join("models")
    }

    /// Aligned chips of people who are not enrolled, used as extra
    /// negatives in training.
    pub fn cohort_dir(&self) -> PathBuf {
        self.root.join("cohort")
    }

    pub fn exports_dir(&self) -> PathBuf {
        self.root.join("exports")
    }

    pub fn cascade(&self) -> Option<Arc<HaarCascade>> {
        self.cascade.read().unwrap().clone()
    }

    pub fn models(&self) -> Option<Arc<ModelBundle>> {
        self.models.read().unwrap().clone()
    }

    /// Persists `cascade` as the detector and starts using it.
    pub fn install_cascade(&self, cascade: HaarCascade) -> Result<(), PipelineError> {
        models::save_cascade_file(&self.models_dir(), &cascade)?;
        *self.cascade.write().unwrap() = Some(Arc::new(cascade));
        Ok(())
    }

    fn require_cascade(&self) -> Result<Arc<HaarCascade>, PipelineError> {
        self.cascade().ok_or_else(|| PipelineError::ModelsNotReady("no face detector installed".into()))
    }

    pub fn register_person(&self, id: &str, name: &str) -> Result<PersonRecord, PipelineError> {
        enrollment::register_person(self.store.as_ref(), id, name)
    }

    pub fn person(&self, id: &str) -> Result<PersonRecord, PipelineError> {
        enrollment::get_person(self.store.as_ref(), id)
    }

    pub fn persons(&self) -> Result<Vec<PersonRecord>, PipelineError> {
        enrollment::list_persons(self.store.as_ref())
    }

    pub fn capture_sample(&self, person_id: &str, frame: &Image) -> Result<CaptureOutcome, PipelineError> {
        let lock = keyed(&self.person_locks, person_id);
        let _guard = hold(&lock);
        let cascade = self.require_cascade()?;
        let params = CaptureParams {
            cascade: &cascade,
            detect: &self.config.detect,
            nms_iou: self.config.nms_iou,
            chip_side: self.config.chip_side,
        };
        enrollment::capture_sample(self.store.as_ref(), &self.samples_dir(), person_id, frame, params)
    }

    pub fn finalize_enrollment(&self, person_id: &str) -> Result<PersonRecord, PipelineError> {
        let lock = keyed(&self.person_locks, person_id);
        let _guard = hold(&lock);
        enrollment::finalize_enrollment(self.store.as_ref(), person_id, self.config.k_min)
    }

    /// Fails fast with `NotEnoughPersons` when training could not start.
    pub fn check_trainable(&self) -> Result<(), PipelineError> {
        let ready = self.persons()?.iter().filter(|p| p.status == PersonStatus::Ready).count();
        if ready < 2 {
            return Err(PipelineError::NotEnoughPersons(ready));
        }
        Ok(())
    }

    pub fn train(&self, overrides: TrainOverrides) -> Result<TrainReport, PipelineError> {
        self.train_with(overrides, |_, _| {})
    }

    /// Retrains the embedder and head from every ready person's samples and
    /// swaps them in. Only one training run proceeds at a time.
    pub fn train_with(
        &self,
        overrides: TrainOverrides,
        on_epoch: impl FnMut(usize, f64),
    ) -> Result<TrainReport, PipelineError> {
        let _guard = match self.training.try_lock() {
            Ok(g) => g,
            Err(std::sync::TryLockError::WouldBlock) => return Err(PipelineError::TrainingInProgress),
            Err(std::sync::TryLockError::Poisoned(e)) => e.into_inner(),
        };
        let sets = enrollment::build_training_sets(
            self.store.as_ref(),
            &self.samples_dir(),
            self.config.pair_seed,
            &self.config.augment,
            &enrollment::load_cohort(&self.cohort_dir())?,
        )?;
        let settings = TrainSettings {
            embedder_spec: self.config.embedder_spec.clone(),
            siamese: overrides.siamese.unwrap_or(self.config.siamese),
            head: overrides.head.unwrap_or(self.config.head),
            theta: self.config.theta,
        };
        let (bundle, report) = models::train_models(&sets, &settings, on_epoch)?;
        models::save_bundle(self.store.as_ref(), &self.models_dir(), &bundle, &report)?;
        *self.models.write().unwrap() = Some(Arc::new(bundle));
        Ok(report)
    }

    pub fn training_in_progress(&self) -> bool {
        matches!(self.training.try_lock(), Err(std::sync::TryLockError::WouldBlock))
    }

    fn with_recognizer<T>(&self, f: impl FnOnce(&Recognizer<'_>) -> Result<T, PipelineError>) -> Result<T, PipelineError> {
        let cascade = self.require_cascade()?;
        let models = self.models().ok_or_else(|| PipelineError::ModelsNotReady("no trained models".into()))?;
        f(&Recognizer { cascade: &cascade, models: &models, detect: &self.config.detect, nms_iou: self.config.nms_iou })
    }

    /// `debounce_s` defaults to the configured value.
    pub fn start_session(
        &self,
        name: &str,
        debounce_s: Option<u64>,
        started_at: Option<DateTime<Utc>>,
    ) -> Result<Session, PipelineError> {
        let debounce = debounce_s.unwrap_or(self.config.debounce_s);
        self.with_recognizer(|r| attendance::start_session(self.store.as_ref(), r, name, debounce, started_at))
    }

    pub fn process_frame(
        &self,
        session_id: &str,
        frame: &Image,
        timestamp: DateTime<Utc>,
    ) -> Result<Vec<RecognitionEvent>, PipelineError> {
        let lock = keyed(&self.session_locks, session_id);
        let _guard = hold(&lock);
        let session = attendance::get_session(self.store.as_ref(), session_id)?;
        if session.state != attendance::SessionState::Running {
            return Err(PipelineError::SessionNotRunning(session_id.to_string()));
        }
        self.with_recognizer(|r| attendance::process_frame(self.store.as_ref(), r, session_id, frame, timestamp))
    }

    pub fn end_session(&self, session_id: &str, ended_at: Option<DateTime<Utc>>) -> Result<SessionSummary, PipelineError> {
        let lock = keyed(&self.session_locks, session_id);
        let _guard = hold(&lock);
        attendance::end_session(self.store.as_ref(), &self.exports_dir(), session_id, ended_at)
    }

    pub fn session(&self, session_id: &str) -> Result<Session, PipelineError> {
        attendance::get_session(self.store.as_ref(), session_id)
    }

    pub fn sessions(&self) -> Result<Vec<Session>, PipelineError> {
        attendance::list_sessions(self.store.as_ref())
    }

    pub fn session_records(&self, session_id: &str) -> Result<Vec<AttendanceRecord>, PipelineError> {
        self.session(session_id)?;
        attendance::session_records(self.store.as_ref(), session_id)
    }

    pub fn export_csv(&self, session_id: &str) -> Result<Vec<u8>, PipelineError> {
        attendance::export_csv(self.store.as_ref(), session_id)
    }
}
