use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::Parser;
use guidedseg_core::model::ModelParams;
use guidedseg_service::{router, Limits, Store};

/// Serves interactive segmentation sessions for one checkpoint.
#[derive(Debug, Parser)]
#[command(name = "guidedseg-serve", version)]
struct Args {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    #[arg(long)]
    ckpt: PathBuf,
    /// Clients name this model when creating sessions; defaults to the
    /// checkpoint's file stem.
    #[arg(long)]
    model: Option<String>,
    #[arg(long, default_value_t = 64)]
    max_frames: usize,
    #[arg(long, default_value_t = 256)]
    max_sessions: usize,
    /// Serves files from this directory on non-API paths.
    #[arg(long = "static")]
    static_dir: Option<PathBuf>,
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    let args = Args::parse();
    let params = match ModelParams::<f32>::load(&args.ckpt) {
        Ok(p) => p,
        Err(e) => {
            tracing::error!("cannot load checkpoint: {e}");
            return ExitCode::from(3);
        }
    };
    let model = args
        .model
        .unwrap_or_else(|| args.ckpt.file_stem().map_or_else(|| "default".into(), |s| s.to_string_lossy().into_owned()));
    let limits = Limits { max_frames: args.max_frames, max_sessions: args.max_sessions };
    let store = match Store::new(params, model.clone(), limits) {
        Ok(s) => Arc::new(s),
        Err(e) => {
            tracing::error!("{e}");
            return ExitCode::from(2);
        }
    };
    let listener = match tokio::net::TcpListener::bind(args.addr).await {
        Ok(l) => l,
        Err(e) => {
            tracing::error!("cannot listen on {}: {e}", args.addr);
            return ExitCode::from(2);
        }
    };
    tracing::info!("serving model {model:?} on http://{}", args.addr);
    let app = router(store, args.static_dir);
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    if let Err(e) = axum::serve(listener, app).with_graceful_shutdown(shutdown).await {
        tracing::error!("server error: {e}");
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}
