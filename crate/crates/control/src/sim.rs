//! Runs a [`ControlService`] on its own thread. Everything else reaches it
//! by sending closures down one channel, so the simulation stays
//! single-threaded and requests are applied in arrival order.

use std::panic::{self, AssertUnwindSafe};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use spw_core::testbed::{DeliveredSample, TestbedConfig};
use thiserror::Error;
use tokio::sync::{broadcast, oneshot};

use crate::service::{ControlService, ServiceError};

type Job = Box<dyn FnOnce(&mut ControlService) + Send>;

#[derive(Debug, Error)]
#[error("simulation thread has stopped")]
pub struct SimGone;

#[derive(Clone)]
pub struct SimHandle {
    jobs: mpsc::Sender<Job>,
    samples: broadcast::Sender<DeliveredSample>,
}

impl SimHandle {
    /// Builds the service on a new thread. With `auto_tick` set to a rate,
    /// the thread also advances one tick every `1/rate` seconds.
    pub fn spawn(config: TestbedConfig, auto_tick: Option<u32>) -> Result<Self, ServiceError> {
        Self::spawn_with(config, auto_tick, |_| Ok(()))
    }

    /// Like [`SimHandle::spawn`], running `setup` on the fresh service first.
    pub fn spawn_with(
        config: TestbedConfig,
        auto_tick: Option<u32>,
        setup: impl FnOnce(&mut ControlService) -> Result<(), ServiceError> + Send + 'static,
    ) -> Result<Self, ServiceError> {
        let (jobs, rx) = mpsc::channel::<Job>();
        let (samples, _) = broadcast::channel(1024);
        let (ready_tx, ready_rx) = mpsc::channel();
        let out = samples.clone();
        thread::Builder::new()
            .name("spw-sim".into())
            .spawn(move || {
                let mut svc = match ControlService::new(config).and_then(|mut s| setup(&mut s).map(|()| s)) {
                    Ok(s) => {
                        let _ = ready_tx.send(Ok(()));
                        s
                    }
                    Err(e) => {
                        let _ = ready_tx.send(Err(e));
                        return;
                    }
                };
                svc.take_outbox();
                run(&mut svc, rx, &out, auto_tick);
            })
            .expect("spawn simulation thread");
        ready_rx.recv().map_err(|_| ServiceError::Lifecycle("simulation thread died".into()))??;
        Ok(Self { jobs, samples })
    }

    pub async fn call<T: Send + 'static>(&self, f: impl FnOnce(&mut ControlService) -> T + Send + 'static) -> Result<T, SimGone> {
        let (tx, rx) = oneshot::channel();
        self.jobs
            .send(Box::new(move |svc| {
                let _ = tx.send(f(svc));
            }))
            .map_err(|_| SimGone)?;
        rx.await.map_err(|_| SimGone)
    }

    pub fn call_blocking<T: Send + 'static>(&self, f: impl FnOnce(&mut ControlService) -> T + Send + 'static) -> Result<T, SimGone> {
        let (tx, rx) = mpsc::channel();
        self.jobs
            .send(Box::new(move |svc| {
                let _ = tx.send(f(svc));
            }))
            .map_err(|_| SimGone)?;
        rx.recv().map_err(|_| SimGone)
    }

    /// Every sample delivered to the card from now on.
    pub fn subscribe(&self) -> broadcast::Receiver<DeliveredSample> {
        self.samples.subscribe()
    }
}

fn publish(svc: &mut ControlService, out: &broadcast::Sender<DeliveredSample>) {
    for s in svc.take_outbox() {
        // no subscribers is fine
        let _ = out.send(s);
    }
}

fn run(svc: &mut ControlService, rx: mpsc::Receiver<Job>, out: &broadcast::Sender<DeliveredSample>, auto_tick: Option<u32>) {
    let period = auto_tick.map(|rate| Duration::from_secs_f64(1.0 / rate.max(1) as f64));
    let mut next = period.map(|p| Instant::now() + p);
    loop {
        let job = match (period, next) {
            (Some(p), Some(due)) => {
                let now = Instant::now();
                if now >= due {
                    svc.tick(1);
                    publish(svc, out);
                    // don't try to catch up after a stall
                    next = Some(now.checked_sub(p).map_or(due, |t| due.max(t)) + p);
                    continue;
                }
                match rx.recv_timeout(due - now) {
                    Ok(job) => job,
                    Err(mpsc::RecvTimeoutError::Timeout) => continue,
                    Err(mpsc::RecvTimeoutError::Disconnected) => return,
                }
            }
            _ => match rx.recv() {
                Ok(job) => job,
                Err(_) => return,
            },
        };
        // A panicking job drops its reply sender; the caller sees SimGone
        // and the thread keeps serving.
        let _ = panic::catch_unwind(AssertUnwindSafe(|| job(svc)));
        publish(svc, out);
    }
}
