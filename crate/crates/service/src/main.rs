use chrono::{DateTime, Utc};
use clap::{Parser, Subcommand};
use presencia_core::classifier::HeadHyper;
use presencia_core::demo;
use presencia_core::engine::{Engine, TrainOverrides};
use presencia_core::error::PipelineError;
use presencia_core::image::decode_pnm;
use presencia_core::siamese::SiameseHyper;
use presencia_core::synth::{synthetic_cascade, CascadeRecipe};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

#[derive(Parser)]
#[command(name = "presencia", version, about = "Face-recognition attendance engine")]
struct Cli {
    /// Data directory holding the store, samples, models and exports.
    #[arg(long, env = "PRESENCIA_DATA_ROOT", default_value = "presencia-data", global = true)]
    data_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Train a face detector on synthetic faces and install it.
    Detector {
        /// JSON recipe overriding the default training set and rounds.
        #[arg(long)]
        recipe: Option<PathBuf>,
    },
    /// Register a person (if new) and capture a sample from every frame in a directory.
    Enroll {
        #[arg(long)]
        id: String,
        #[arg(long)]
        name: String,
        #[arg(long)]
        frames_dir: PathBuf,
    },
    /// Retrain the embedder and classifier from every ready person.
    Train {
        #[arg(long)]
        siamese_epochs: Option<usize>,
        #[arg(long)]
        head_epochs: Option<usize>,
    },
    /// Run a whole session over a directory of frames and write its CSV.
    Session {
        #[arg(long)]
        frames_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "session")]
        name: String,
        #[arg(long)]
        debounce_s: Option<u64>,
        /// Timestamp of the first frame (RFC 3339); defaults to now.
        #[arg(long)]
        start: Option<DateTime<Utc>>,
        /// Time between consecutive frames.
        #[arg(long, default_value_t = 1000)]
        interval_ms: u64,
    },
    /// Write the synthetic demo data set: a data root with its config and
    /// impostor cohort, enrollment frames, and session frames.
    Fixtures {
        #[arg(long)]
        out: PathBuf,
    },
}

fn frame_files(dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("ppm" | "pgm" | "pnm")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(PipelineError::InvalidInput(format!("no .ppm/.pgm/.pnm frames in {}", dir.display())));
    }
    Ok(files)
}

fn enroll(engine: &Engine, id: &str, name: &str, frames_dir: &Path) -> Result<(), PipelineError> {
    match engine.register_person(id, name) {
        Ok(_) => {}
        Err(PipelineError::DuplicateId(_)) => eprintln!("{id} already registered, adding samples"),
        Err(e) => return Err(e),
    }
    for path in frame_files(frames_dir)? {
        let frame = decode_pnm(&fs::read(&path)?)?;
        match engine.capture_sample(id, &frame) {
            Ok(out) => println!("{}: stored, {} samples", path.display(), out.sample_count),
            Err(e @ (PipelineError::NoFace | PipelineError::MultipleFaces(_))) => {
                println!("{}: skipped, {e}", path.display())
            }
            Err(e) => return Err(e),
        }
    }
    let person = engine.finalize_enrollment(id)?;
    println!("{id} ready with {} samples", person.sample_count);
    Ok(())
}

fn train(engine: &Engine, siamese_epochs: Option<usize>, head_epochs: Option<usize>) -> Result<(), PipelineError> {
    let cfg = engine.config();
    let overrides = TrainOverrides {
        siamese: siamese_epochs.map(|epochs| SiameseHyper { epochs, ..cfg.siamese }),
        head: head_epochs.map(|epochs| HeadHyper { epochs, ..cfg.head }),
    };
    let report = engine.train_with(overrides, |epoch, loss| eprintln!("epoch {epoch}: pair loss {loss:.4}"))?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

struct SessionArgs<'a> {
    frames_dir: &'a Path,
    out: &'a Path,
    name: &'a str,
    debounce_s: Option<u64>,
    start: DateTime<Utc>,
    interval_ms: u64,
}

fn session(engine: &Engine, args: SessionArgs<'_>) -> Result<(), PipelineError> {
    let files = frame_files(args.frames_dir)?;
    let s = engine.start_session(args.name, args.debounce_s, None)?;
    for (i, path) in files.iter().enumerate() {
        let frame = decode_pnm(&fs::read(path)?)?;
        let at = args.start + chrono::Duration::milliseconds((i as u64 * args.interval_ms) as i64);
        for e in engine.process_frame(&s.session_id, &frame, at)? {
            let who = e.name.as_deref().unwrap_or("UNKNOWN");
            let mark = if e.marked { " (marked)" } else { "" };
            println!("{} {who} p={:.3}{mark}", path.display(), e.top_prob);
        }
    }
    let summary = engine.end_session(&s.session_id, None)?;
    fs::write(args.out, engine.export_csv(&s.session_id)?)?;
    println!(
        "{}: {} persons marked over {} events, CSV at {}",
        s.session_id,
        summary.persons_marked,
        summary.total_events,
        args.out.display()
    );
    Ok(())
}

fn write_frames(dir: &Path, frames: impl IntoIterator<Item = Vec<u8>>, prefix: &str) -> Result<(), PipelineError> {
    fs::create_dir_all(dir)?;
    for (i, bytes) in frames.into_iter().enumerate() {
        fs::write(dir.join(format!("{prefix}{i:03}.ppm")), bytes)?;
    }
    Ok(())
}

fn fixtures(out: &Path) -> Result<(), PipelineError> {
    let data = out.join("data");
    fs::create_dir_all(&data)?;
    fs::write(data.join("config.json"), serde_json::to_vec_pretty(&demo::config())?)?;
    write_frames(&data.join("cohort"), demo::cohort_chips().iter().map(|c| c.encode_pnm()), "c")?;
    for (k, p) in demo::persons().iter().enumerate() {
        let frames = demo::enrollment_frames(k).into_iter().map(|f| f.encode_pnm());
        write_frames(&out.join("enroll").join(p.id), frames, "frame")?;
    }
    let session = (0..demo::FRAME_COUNT).map(|f| demo::session_frame(f).encode_pnm());
    write_frames(&out.join("session"), session, "frame")?;
    println!("wrote demo data under {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    if let Command::Fixtures { out } = &cli.command {
        return Ok(fixtures(out)?);
    }
    let engine = Engine::open(&cli.data_root)?;
    match cli.command {
        Command::Serve { port, host } => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port)).await?;
                eprintln!("serving {} on http://{}", cli.data_root.display(), listener.local_addr()?);
                let shutdown = async {
                    let _ = tokio::signal::ctrl_c().await;
                };
                presencia::serve(listener, Arc::new(engine), shutdown).await
            })?;
        }
        Command::Detector { recipe } => {
            let recipe: CascadeRecipe = match recipe {
                Some(path) => serde_json::from_slice(&fs::read(path)?)?,
                None => CascadeRecipe::default(),
            };
            let cascade = synthetic_cascade(&recipe)?;
            engine.install_cascade(cascade)?;
            println!("installed detector in {}", engine.models_dir().display());
        }
        Command::Enroll { id, name, frames_dir } => enroll(&engine, &id, &name, &frames_dir)?,
        Command::Train { siamese_epochs, head_epochs } => train(&engine, siamese_epochs, head_epochs)?,
        Command::Session { frames_dir, out, name, debounce_s, start, interval_ms } => session(
            &engine,
            SessionArgs {
                frames_dir: &frames_dir,
                out: &out,
                name: &name,
                debounce_s,
                start: start.unwrap_or_else(Utc::now),
                interval_ms,
            },
        )?,
        Command::Fixtures { .. } => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
