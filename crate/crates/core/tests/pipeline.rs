use presencia_core::attendance::RecognitionEvent;
use presencia_core::demo;
use presencia_core::engine::{Engine, TrainOverrides};
use presencia_core::error::PipelineError;
use presencia_core::image::Image;
use presencia_core::synth::synthetic_cascade;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

fn enroll_all(engine: &Engine) {
    fs::create_dir_all(engine.cohort_dir()).unwrap();
    for (i, chip) in demo::cohort_chips().iter().enumerate() {
        fs::write(engine.cohort_dir().join(format!("c{i:03}.ppm")), chip.encode_pnm()).unwrap();
    }
    for (k, p) in demo::persons().iter().enumerate() {
        engine.register_person(p.id, p.name).unwrap();
        for frame in demo::enrollment_frames(k) {
            if engine.person(p.id).unwrap().sample_count == engine.config().k_min {
                break;
            }
            match engine.capture_sample(p.id, &Image::from(frame)) {
                Ok(_) | Err(PipelineError::NoFace) | Err(PipelineError::MultipleFaces(_)) => {}
                Err(e) => panic!("{e}"),
            }
        }
        engine.finalize_enrollment(p.id).unwrap();
    }
}

fn run_session(engine: &Engine) -> (String, Vec<RecognitionEvent>) {
    let s = engine.start_session(demo::SESSION_NAME, None, None).unwrap();
    let mut events = Vec::new();
    for f in 0..demo::FRAME_COUNT {
        let frame = Image::from(demo::session_frame(f));
        events.extend(engine.process_frame(&s.session_id, &frame, demo::frame_time(f)).unwrap());
    }
    (s.session_id, events)
}

fn full_run(root: &Path) -> (Engine, String, Vec<RecognitionEvent>) {
    let engine = Engine::open_with(root, demo::config()).unwrap();
    engine.install_cascade(synthetic_cascade(&demo::cascade_recipe()).unwrap()).unwrap();
    enroll_all(&engine);
    engine.train(TrainOverrides::default()).unwrap();
    let (sid, events) = run_session(&engine);
    engine.end_session(&sid, None).unwrap();
    (engine, sid, events)
}

#[test]
fn demo_run_replays_identically_and_stays_consistent() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (engine, sid, events) = full_run(a.path());
    let (engine_b, sid_b, events_b) = full_run(b.path());

    assert_eq!(sid, sid_b);
    assert_eq!(events, events_b);
    let csv = engine.export_csv(&sid).unwrap();
    assert_eq!(csv, engine_b.export_csv(&sid_b).unwrap());
    assert_eq!(fs::read(engine.exports_dir().join(format!("{sid}.csv"))).unwrap(), csv);

    // Each stored count equals that person's marked events.
    let mut marked: BTreeMap<String, u64> = BTreeMap::new();
    for e in &events {
        assert!(!e.marked || e.person_id.is_some());
        if e.marked {
            *marked.entry(e.person_id.clone().unwrap()).or_default() += 1;
        }
    }
    let records = engine.session_records(&sid).unwrap();
    let counts: BTreeMap<String, u64> = records.iter().map(|r| (r.person_id.clone(), r.count)).collect();
    assert_eq!(counts, marked);
    assert_eq!(counts.keys().collect::<Vec<_>>(), ["s001", "s002"]);

    let seqs: Vec<u64> = events.iter().map(|e| e.seq).collect();
    assert_eq!(seqs, (0..events.len() as u64).collect::<Vec<_>>());
    let session = engine.session(&sid).unwrap();
    assert_eq!(session.event_count, events.len() as u64);
    assert_eq!(session.ended_at, events.last().map(|e| e.timestamp));
}

#[test]
fn restart_reloads_models_and_rejects_bad_requests() {
    let dir = tempfile::tempdir().unwrap();
    let (engine, sid, _) = full_run(dir.path());
    let csv = engine.export_csv(&sid).unwrap();
    let probe = Image::from(demo::session_frame(12));
    let before = engine.models().unwrap().recognize(
        &presencia_core::siamese::preprocess(&probe, demo::frame_cast(12)[0].1, demo::CHIP_SIDE).unwrap(),
    );
    drop(engine);

    let engine = Engine::open_with(dir.path(), demo::config()).unwrap();
    assert_eq!(engine.export_csv(&sid).unwrap(), csv);
    let after = engine.models().unwrap().recognize(
        &presencia_core::siamese::preprocess(&probe, demo::frame_cast(12)[0].1, demo::CHIP_SIDE).unwrap(),
    );
    assert_eq!(before.unwrap().prediction, after.unwrap().prediction);

    assert!(matches!(engine.end_session(&sid, None), Err(PipelineError::SessionNotRunning(_))));
    assert!(matches!(
        engine.process_frame(&sid, &probe, demo::frame_time(0)),
        Err(PipelineError::SessionNotRunning(_))
    ));
    let s = engine.start_session("second", Some(0), None).unwrap();
    assert_ne!(s.session_id, sid);
    engine.process_frame(&s.session_id, &probe, demo::frame_time(5)).unwrap();
    assert!(matches!(
        engine.process_frame(&s.session_id, &probe, demo::frame_time(4)),
        Err(PipelineError::NonMonotoneTimestamp { .. })
    ));
    // Zero debounce counts every sighting.
    engine.process_frame(&s.session_id, &probe, demo::frame_time(5)).unwrap();
    let records = engine.session_records(&s.session_id).unwrap();
    assert!(records.iter().all(|r| r.count == 2), "{records:?}");

    let blank = Image::from(presencia_core::image::RgbImage::filled(240, 120, [60, 60, 60]));
    let before = engine.session(&s.session_id).unwrap();
    assert!(engine.process_frame(&s.session_id, &blank, demo::frame_time(9)).unwrap().is_empty());
    assert_eq!(engine.session(&s.session_id).unwrap(), before);

    assert!(matches!(engine.export_csv("session-999999"), Err(PipelineError::SessionNotFound(_))));
}

#[test]
fn sessions_need_models() {
    let dir = tempfile::tempdir().unwrap();
    let engine = Engine::open_with(dir.path(), demo::config()).unwrap();
    assert!(matches!(engine.start_session("x", None, None), Err(PipelineError::ModelsNotReady(_))));
    assert!(matches!(engine.check_trainable(), Err(PipelineError::NotEnoughPersons(0))));
    let frame = Image::from(demo::enrollment_frames(0).remove(0));
    engine.register_person("s001", "Ada").unwrap();
    assert!(matches!(engine.capture_sample("s001", &frame), Err(PipelineError::ModelsNotReady(_))));
}
