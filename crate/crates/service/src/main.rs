use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use oneclick_service::{router, AppState, ServiceConfig};
use tracing_subscriber::EnvFilter;

const DEFAULT_BIND: &str = "127.0.0.1:8080";

fn usage() -> ExitCode {
    eprintln!("usage: oneclick-server <config.json>   (or set ONECLICK_CONFIG)");
    eprintln!("bind address from ONECLICK_BIND, default {DEFAULT_BIND}");
    ExitCode::from(2)
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();

    let Some(config_path) = std::env::args_os()
        .nth(1)
        .or_else(|| std::env::var_os("ONECLICK_CONFIG"))
        .map(PathBuf::from)
    else {
        return usage();
    };
    let config = match ServiceConfig::load(&config_path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    let state = match AppState::from_config(config) {
        Ok(s) => Arc::new(s),
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };

    let bind = std::env::var("ONECLICK_BIND").unwrap_or_else(|_| DEFAULT_BIND.to_owned());
    let listener = match tokio::net::TcpListener::bind(&bind).await {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: cannot bind {bind}: {e}");
            return ExitCode::FAILURE;
        }
    };
    tracing::info!(%bind, images = state.images().count(), "listening");
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    if let Err(e) = axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await {
        eprintln!("error: {e}");
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}
