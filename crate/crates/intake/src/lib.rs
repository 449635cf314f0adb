//! Offline intake: documents in, line-JSON collection export out.
//!
//! The export is the same format the gateway accepts on
//! `/admin/collections/{id}/import`, so intake never needs a running gateway.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Parser;
use serde::Serialize;
use tracing::info;
use verde_core::intake::{ingest, read_document, ChunkingConfig, IngestStats};
use verde_core::persistence::Store;
use verde_core::rag::{ExactIndex, VectorIndex};

#[derive(Debug, Clone, Parser)]
#[command(name = "verde-intake", version, about = "Chunk text and markdown files into a collection export")]
pub struct Args {
    /// Collection id the chunks belong to.
    #[arg(long)]
    pub collection: String,
    #[arg(long, default_value_t = 512)]
    pub chunk_size: usize,
    #[arg(long, default_value_t = 64)]
    pub overlap: usize,
    /// Where to write the export. Defaults to `<collection>.jsonl`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// An earlier export to extend. Re-ingested sources replace their old chunks.
    #[arg(long)]
    pub from: Option<PathBuf>,
    #[arg(required = true)]
    pub paths: Vec<PathBuf>,
}

impl Args {
    pub fn out_path(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(format!("{}.jsonl", self.collection)))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum IntakeError {
    #[error("{0}")]
    Usage(String),
    #[error("no readable documents ({} skipped)", .0.skipped)]
    NothingReadable(IngestStats),
    #[error(transparent)]
    Core(#[from] verde_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl IntakeError {
    /// 2 for bad invocations and all-skipped inputs, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            IntakeError::Usage(_) | IntakeError::NothingReadable(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Report {
    pub collection: String,
    #[serde(flatten)]
    pub stats: IngestStats,
    /// Chunks in the written export, including any carried over by `--from`.
    pub chunk_count: usize,
    pub out: PathBuf,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IntakeError + '_ {
    move |source| IntakeError::Io { path: path.to_path_buf(), source }
}

pub fn run(args: &Args) -> Result<Report, IntakeError> {
    let config = ChunkingConfig::new(args.chunk_size, args.overlap).map_err(|e| IntakeError::Usage(e.to_string()))?;
    let index = ExactIndex::new(Store::in_memory())?;
    index.create_collection(&args.collection, &args.collection)?;
    if let Some(base) = &args.from {
        let file = File::open(base).map_err(io_err(base))?;
        let loaded = index.import(&args.collection, BufReader::new(file))?;
        info!(path = %base.display(), chunks = loaded, "loaded existing export");
    }

    let stats = match ingest(&index, &args.paths, &args.collection, &config) {
        Ok(stats) => stats,
        Err(e) if args.paths.iter().all(|p| read_document(p).is_err()) => {
            info!(error = %e, "nothing to ingest");
            return Err(IntakeError::NothingReadable(IngestStats { skipped: args.paths.len(), ..Default::default() }));
        }
        Err(e) => return Err(e.into()),
    };

    let out = args.out_path();
    let file = File::create(&out).map_err(io_err(&out))?;
    let mut writer = BufWriter::new(file);
    let chunk_count = index.export(&args.collection, &mut writer)?;
    writer.flush().map_err(io_err(&out))?;
    Ok(Report { collection: args.collection.clone(), stats, chunk_count, out })
}
