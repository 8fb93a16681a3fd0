use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use bam_service::server::{router, AppState};
use bam_service::store::SessionStore;
use clap::Parser;

/// Serve live teaching sessions.
#[derive(Parser)]
#[command(name = "bam-serve", version)]
struct Args {
    /// Directory of `*.env` files offered to clients.
    #[arg(short, long, default_value = "environments")]
    environments: PathBuf,
    /// Session storage directory; sessions are kept in memory only if omitted.
    #[arg(short, long)]
    data: Option<PathBuf>,
    #[arg(short, long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Agent tick interval in milliseconds; 0 lets clients step the agent.
    #[arg(long, default_value_t = 300)]
    tick_ms: u64,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    let store = args.data.map(SessionStore::open).transpose()?;
    let state = AppState::from_dir(&args.environments, store, Duration::from_millis(args.tick_ms))
        .with_context(|| format!("loading environments from {}", args.environments.display()))?;
    let listener = tokio::net::TcpListener::bind(args.addr).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state))).await?;
    Ok(())
}
