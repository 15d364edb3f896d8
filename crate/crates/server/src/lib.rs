//! Network front-ends for the access control service: a TCP port devices
//! join through, and an HTTP admin API with a live event stream.

mod admin;
mod device;

use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::sync::Arc;

use serde::Serialize;
use snap_core::clock::SystemClock;
use snap_core::protocol::StatusEvent;
use snap_core::service::{AuthService, ServiceError};
use snap_core::session::ApId;
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::{broadcast, watch};
use tokio::task::JoinHandle;
use tracing::{info, warn};

pub const DEFAULT_DEVICE_PORT: u16 = 7401;
pub const DEFAULT_ADMIN_PORT: u16 = 7402;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Service(#[from] ServiceError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerConfig {
    pub device_bind: IpAddr,
    pub device_port: u16,
    pub admin_bind: IpAddr,
    pub admin_port: u16,
    pub data_dir: PathBuf,
    /// Drop sessions left over from a previous run before accepting joins.
    pub purge_on_start: bool,
}

impl ServerConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        ServerConfig {
            device_bind: IpAddr::V4(Ipv4Addr::UNSPECIFIED),
            device_port: DEFAULT_DEVICE_PORT,
            admin_bind: IpAddr::V4(Ipv4Addr::LOCALHOST),
            admin_port: DEFAULT_ADMIN_PORT,
            data_dir: data_dir.into(),
            purge_on_start: true,
        }
    }

    /// Both front-ends on loopback with OS-assigned ports.
    pub fn ephemeral(data_dir: impl Into<PathBuf>) -> Self {
        ServerConfig {
            device_bind: IpAddr::V4(Ipv4Addr::LOCALHOST),
            device_port: 0,
            admin_port: 0,
            ..Self::new(data_dir)
        }
    }

    pub fn validate(&self) -> Result<(), ServerError> {
        if self.device_port != 0 && self.device_port == self.admin_port {
            return Err(ServerError::Config(format!(
                "device and admin ports must differ (both {})",
                self.device_port
            )));
        }
        Ok(())
    }
}

/// A status change as seen by live UIs: the event plus the access point it
/// was pushed to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ApEvent {
    pub ap_id: String,
    #[serde(flatten)]
    pub event: StatusEvent,
}

#[derive(Clone)]
pub(crate) struct Shared {
    pub service: Arc<AuthService>,
    pub events: broadcast::Sender<ApEvent>,
    pub shutdown: watch::Receiver<bool>,
}

/// Resolves once shutdown has been requested.
pub(crate) async fn stopped(rx: &mut watch::Receiver<bool>) {
    let _ = rx.wait_for(|s| *s).await;
}

pub struct RunningServer {
    device_addr: SocketAddr,
    admin_addr: SocketAddr,
    service: Arc<AuthService>,
    shutdown: watch::Sender<bool>,
    tasks: Vec<JoinHandle<()>>,
}

impl RunningServer {
    pub fn device_addr(&self) -> SocketAddr {
        self.device_addr
    }

    pub fn admin_addr(&self) -> SocketAddr {
        self.admin_addr
    }

    pub fn service(&self) -> &Arc<AuthService> {
        &self.service
    }

    /// Stops accepting, closes open connections and waits for the tasks.
    pub async fn shutdown(self) {
        let _ = self.shutdown.send(true);
        for task in self.tasks {
            let _ = task.await;
        }
    }
}

/// Opens the data directory, purges stale sessions if configured, binds
/// both listeners and starts serving.
pub async fn start(config: ServerConfig) -> Result<RunningServer, ServerError> {
    config.validate()?;
    let service = AuthService::open(&config.data_dir, Arc::new(SystemClock))?;
    if config.purge_on_start {
        let purged = service.rescan()?;
        service.compact_registry()?;
        info!(purged, "purged sessions from previous run");
    }
    let service = Arc::new(service);

    let (events, _) = broadcast::channel::<ApEvent>(1024);
    let tx = events.clone();
    service.subscribe(move |ap: &ApId, ev: &StatusEvent| {
        // No receivers is fine: nobody is listening yet.
        let _ = tx.send(ApEvent {
            ap_id: ap.to_string(),
            event: ev.clone(),
        });
    });

    let device_addr = SocketAddr::new(config.device_bind, config.device_port);
    let device_listener = TcpListener::bind(device_addr)
        .await
        .map_err(|source| ServerError::Bind { addr: device_addr, source })?;
    let admin_addr = SocketAddr::new(config.admin_bind, config.admin_port);
    let admin_listener = TcpListener::bind(admin_addr)
        .await
        .map_err(|source| ServerError::Bind { addr: admin_addr, source })?;
    let device_addr = device_listener.local_addr().expect("bound listener has an address");
    let admin_addr = admin_listener.local_addr().expect("bound listener has an address");

    let (shutdown_tx, shutdown_rx) = watch::channel(false);
    let shared = Shared {
        service: service.clone(),
        events,
        shutdown: shutdown_rx,
    };

    let device_task = tokio::spawn(device::accept_loop(device_listener, shared.clone()));
    let app = admin::router(shared.clone());
    let mut stop = shared.shutdown.clone();
    let admin_task = tokio::spawn(async move {
        let serve = axum::serve(admin_listener, app).with_graceful_shutdown(async move {
            stopped(&mut stop).await;
        });
        if let Err(e) = serve.await {
            warn!(error = %e, "admin server stopped");
        }
    });
    info!(%device_addr, %admin_addr, data_dir = %config.data_dir.display(), "server started");

    Ok(RunningServer {
        device_addr,
        admin_addr,
        service,
        shutdown: shutdown_tx,
        tasks: vec![device_task, admin_task],
    })
}
