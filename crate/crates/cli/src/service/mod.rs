//! HTTP service over rendering and segmentation. Scenes and checkpoints are
//! read from a data root and never modified.

mod api;
mod check;
mod session;

use std::net::SocketAddr;
use std::path::PathBuf;

use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

pub use api::{router, AppState, ErrorBody};
pub use check::self_check;
pub use session::{pose_key, Session, Stats};

use crate::args::ServeArgs;
use crate::error::{CliError, CliResult};

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub data_root: PathBuf,
    pub max_resolution: usize,
    pub cache_entries: usize,
}

/// A server running on a background task.
pub struct RunningServer {
    pub addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    handle: JoinHandle<std::io::Result<()>>,
}

impl RunningServer {
    pub async fn stop(mut self) -> std::io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        self.handle.await.map_err(std::io::Error::other)?
    }
}

/// Binds `addr` (port 0 picks a free port) and serves until stopped.
pub async fn start(config: ServiceConfig, addr: SocketAddr) -> std::io::Result<RunningServer> {
    let listener = TcpListener::bind(addr).await?;
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let app = router(AppState::new(config));
    let handle = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await
    });
    Ok(RunningServer {
        addr,
        shutdown: Some(tx),
        handle,
    })
}

async fn termination() {
    let ctrl_c = tokio::signal::ctrl_c();
    #[cfg(unix)]
    {
        let mut term = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate())
            .expect("install SIGTERM handler");
        tokio::select! {
            _ = ctrl_c => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    {
        let _ = ctrl_c.await;
    }
}

pub fn serve(a: &ServeArgs) -> CliResult<()> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| fieldseg::Error::io("tokio runtime", e))?;
    if a.check {
        return rt.block_on(self_check(a.max_resolution, a.cache_entries));
    }
    let config = ServiceConfig {
        data_root: a
            .data_root
            .clone()
            .expect("clap requires --data-root without --check"),
        max_resolution: a.max_resolution,
        cache_entries: a.cache_entries,
    };
    if !config.data_root.is_dir() {
        return Err(fieldseg::Error::io(
            &config.data_root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "data root is not a directory"),
        )
        .into());
    }
    let bind = format!("{}:{}", a.host, a.port);
    rt.block_on(async move {
        let listener = TcpListener::bind(&bind)
            .await
            .map_err(|e| CliError::from(fieldseg::Error::io(&bind, e)))?;
        let local = listener
            .local_addr()
            .map_err(|e| fieldseg::Error::io(&bind, e))?;
        println!("listening on http://{local}");
        axum::serve(listener, router(AppState::new(config)))
            .with_graceful_shutdown(termination())
            .await
            .map_err(|e| fieldseg::Error::io(&bind, e))?;
        eprintln!("shut down");
        Ok(())
    })
}
