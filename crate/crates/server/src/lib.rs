//! HTTP front ends for the engine, trajectory manager, rollout manager,
//! scheduler and dataloader.
//!
//! Each service gets its own router and listener. [`start`] binds them in
//! dependency order and [`RunningStack::shutdown`] stops them in reverse.

mod control;
mod data;
mod engine;
mod error;
mod sched;
mod traj;

use std::net::SocketAddr;
use std::sync::Arc;

use axum::routing::get;
use axum::{Json, Router};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use rollplane_core::dataloader::StreamingDataloader;
use rollplane_core::engine::{EngineConfig, MockEngine};
use rollplane_core::rollout::{RolloutConfig, RolloutError, RolloutManager};
use rollplane_core::runtime::Runtime;
use rollplane_core::scheduler::{
    CapabilityTag, MultiplexController, ResourceDescriptor, SchedError, Scheduler,
};
use rollplane_core::trajectory::{TrajectoryManager, TrajectoryManagerConfig};

pub use error::ApiError;

/// Handles to the shared core objects.
#[derive(Clone)]
pub struct Services {
    pub engine: Arc<MockEngine>,
    pub trajectories: Arc<TrajectoryManager>,
    pub rollout: Arc<RolloutManager>,
    pub controller: Arc<Mutex<MultiplexController>>,
    pub loader: Arc<StreamingDataloader>,
}

impl Services {
    /// Shares the objects a [`Runtime`] drives.
    pub fn from_runtime(rt: &Runtime) -> Self {
        Services {
            engine: rt.engine().clone(),
            trajectories: rt.trajectories().clone(),
            rollout: rt.rollout().clone(),
            controller: rt.controller().clone(),
            loader: rt.loader().clone(),
        }
    }

    /// A standalone stack with one rollout lane per rollout-capable node.
    pub fn new(
        engine: EngineConfig,
        cluster: Vec<ResourceDescriptor>,
        slots_per_node: usize,
        loader: StreamingDataloader,
    ) -> Result<Self, SetupError> {
        let engine = Arc::new(MockEngine::new(engine));
        let tm = Arc::new(TrajectoryManager::new(
            engine.clone(),
            TrajectoryManagerConfig::default(),
        ));
        let rm = Arc::new(RolloutManager::new(tm.clone(), RolloutConfig::default()));
        for r in &cluster {
            if r.has(CapabilityTag::Rollout) {
                rm.add_lane(r.resource_id.clone(), slots_per_node)?;
            }
        }
        let mut ctl = MultiplexController::new(Scheduler::with_resources(cluster)?);
        ctl.start(0);
        for e in ctl.drain_events() {
            rm.apply_event(e)?;
        }
        Ok(Services {
            engine,
            trajectories: tm,
            rollout: rm,
            controller: Arc::new(Mutex::new(ctl)),
            loader: Arc::new(loader),
        })
    }
}

#[derive(Debug, Error)]
pub enum SetupError {
    #[error(transparent)]
    Sched(#[from] SchedError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Service {
    Engine,
    Trajectory,
    Rollout,
    Scheduler,
    Data,
}

impl Service {
    /// Startup order; each entry depends only on the ones before it.
    pub const ORDER: [Service; 5] = [
        Service::Engine,
        Service::Trajectory,
        Service::Rollout,
        Service::Scheduler,
        Service::Data,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Service::Engine => "engine",
            Service::Trajectory => "trajectory",
            Service::Rollout => "rollout",
            Service::Scheduler => "scheduler",
            Service::Data => "data",
        }
    }
}

#[derive(Debug, Serialize)]
struct Health {
    service: &'static str,
    ready: bool,
}

fn with_health(service: Service, router: Router) -> Router {
    router.route(
        "/health",
        get(move || async move {
            Json(Health {
                service: service.name(),
                ready: true,
            })
        }),
    )
}

pub fn router(service: Service, s: &Services) -> Router {
    let r = match service {
        Service::Engine => engine::router(s.engine.clone()),
        Service::Trajectory => traj::router(s.trajectories.clone()),
        Service::Rollout => control::router(s.rollout.clone()),
        Service::Scheduler => sched::router(s.controller.clone(), s.rollout.clone()),
        Service::Data => data::router(s.loader.clone()),
    };
    with_health(service, r)
}

/// Every endpoint on one router, for in-process use and tests.
pub fn app(s: &Services) -> Router {
    Service::ORDER
        .into_iter()
        .map(|svc| match svc {
            Service::Engine => engine::router(s.engine.clone()),
            Service::Trajectory => traj::router(s.trajectories.clone()),
            Service::Rollout => control::router(s.rollout.clone()),
            Service::Scheduler => sched::router(s.controller.clone(), s.rollout.clone()),
            Service::Data => data::router(s.loader.clone()),
        })
        .fold(Router::new(), Router::merge)
}

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("port conflict: {service} cannot bind {addr}: {source}")]
    PortConflict {
        service: &'static str,
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("{service} failed to start: {source}")]
    Io {
        service: &'static str,
        #[source]
        source: std::io::Error,
    },
}

struct Running {
    service: Service,
    addr: SocketAddr,
    stop: oneshot::Sender<()>,
    task: JoinHandle<std::io::Result<()>>,
}

pub struct RunningStack {
    services: Vec<Running>,
}

impl RunningStack {
    pub fn addr(&self, service: Service) -> Option<SocketAddr> {
        self.services
            .iter()
            .find(|r| r.service == service)
            .map(|r| r.addr)
    }

    pub fn addrs(&self) -> Vec<(Service, SocketAddr)> {
        self.services.iter().map(|r| (r.service, r.addr)).collect()
    }

    /// Stops services in reverse start order and returns that order.
    pub async fn shutdown(mut self) -> Vec<Service> {
        let mut order = Vec::new();
        while let Some(r) = self.services.pop() {
            let _ = r.stop.send(());
            let _ = r.task.await;
            order.push(r.service);
        }
        order
    }
}

/// Binds one listener per service, in [`Service::ORDER`]. A service is only
/// bound after the previous one is accepting connections. On failure every
/// service already started is shut down again.
pub async fn start(
    services: &Services,
    addrs: &[(Service, SocketAddr)],
    mut on_ready: impl FnMut(Service, SocketAddr),
) -> Result<RunningStack, ServeError> {
    let mut stack = RunningStack {
        services: Vec::new(),
    };
    for svc in Service::ORDER {
        let Some(&(_, addr)) = addrs.iter().find(|(s, _)| *s == svc) else {
            continue;
        };
        let listener = match TcpListener::bind(addr).await {
            Ok(l) => l,
            Err(source) => {
                stack.shutdown().await;
                return Err(if source.kind() == std::io::ErrorKind::AddrInUse {
                    ServeError::PortConflict {
                        service: svc.name(),
                        addr,
                        source,
                    }
                } else {
                    ServeError::Io {
                        service: svc.name(),
                        source,
                    }
                });
            }
        };
        let bound = listener.local_addr().map_err(|source| ServeError::Io {
            service: svc.name(),
            source,
        })?;
        let (stop, stopped) = oneshot::channel::<()>();
        let app = router(svc, services);
        let task = tokio::spawn(async move {
            axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = stopped.await;
                })
                .await
        });
        on_ready(svc, bound);
        stack.services.push(Running {
            service: svc,
            addr: bound,
            stop,
            task,
        });
    }
    Ok(stack)
}
