//! One serialized control loop per attached stream.
//!
//! Every 20 ms frame runs the due control ticks with the latest input held,
//! then emits a frame. Trials that see no input for more than 500 ms are
//! abandoned; the next trial starts once input resumes.

use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket};
use futures_util::{SinkExt, StreamExt};
use hilo_core::objective::evaluate;
use hilo_core::protocol::{TraceTrial, TrialKind, TrialSpec};
use tokio::sync::watch;
use tokio::time::{interval, Instant, MissedTickBehavior};

use crate::mapping::ScreenMapping;
use crate::messages::{FrameMessage, Handshake, InputMessage, Phase, FRAME_HZ, GAP_MS};
use crate::{AppliedTrial, Entry, Status};

#[derive(Clone, Copy)]
struct Input {
    position: [f64; 2],
    received: Instant,
}

struct Running<'a> {
    spec: TrialSpec,
    trial: TraceTrial<'a>,
    trace: Vec<[f64; 2]>,
    started: Instant,
}

pub(crate) async fn run(socket: WebSocket, entry: Arc<Entry>) {
    let (mut tx, mut rx) = socket.split();
    let (input_tx, mut input_rx) = watch::channel::<Option<Input>>(None);

    // reader: keep only the latest valid input with monotone client time
    let reader = tokio::spawn(async move {
        let mut last_client = f64::NEG_INFINITY;
        while let Some(Ok(msg)) = rx.next().await {
            let text = match msg {
                Message::Text(t) => t,
                Message::Close(_) => break,
                _ => continue,
            };
            let Ok(input) = serde_json::from_str::<InputMessage>(&text) else {
                continue;
            };
            if !input.is_valid() || input.client_time_ms < last_client {
                continue;
            }
            last_client = input.client_time_ms;
            let _ = input_tx.send(Some(Input {
                position: input.position,
                received: Instant::now(),
            }));
        }
    });

    let session = entry.snapshot();
    let path = session.shared_path();
    let mapping = ScreenMapping::for_path(&path);
    let radius = mapping.radius(session.deadband().radius());
    let gait = session.config.plant.t_gait;
    let control_hz = session.config.control_hz;
    let (discard, weights, scales) = (session.config.discard_s, session.config.weights, session.config.scales());
    let handshake = Handshake {
        kind: "handshake".into(),
        session_id: entry.id.to_string(),
        frame_hz: FRAME_HZ,
        control_hz,
        gap_ms: GAP_MS,
        gait_period_s: gait,
        mapping,
        deadband_radius: radius,
        path: path.points().iter().step_by(5).map(|q| mapping.to_screen(*q)).collect(),
    };
    let text = serde_json::to_string(&handshake).expect("handshake serialises");
    if tx.send(Message::Text(text.into())).await.is_err() {
        reader.abort();
        return;
    }
    drop(session);

    let frame_period = Duration::from_secs_f64(1.0 / FRAME_HZ);
    let gap = Duration::from_millis(GAP_MS);
    let mut ticker = interval(frame_period);
    ticker.set_missed_tick_behavior(MissedTickBehavior::Burst);
    let t0 = Instant::now();
    let mut frame: u64 = 0;
    let mut ticks_owed = 0.0;
    let mut running: Option<Running> = None;
    let mut break_until: Option<Instant> = None;
    // after an abandoned trial, wait for input newer than this
    let mut stalled_at: Option<Instant> = None;
    let mut last_sample_screen: Option<[f64; 2]> = None;

    loop {
        ticker.tick().await;
        if input_rx.has_changed().is_err() {
            // stream closed; an unfinished trial is lost
            if running.take().is_some() {
                entry.invalidated.fetch_add(1, Ordering::SeqCst);
            }
            break;
        }
        let now = Instant::now();
        let input = *input_rx.borrow_and_update();

        if break_until.is_some_and(|t| now >= t) {
            break_until = None;
        }

        let mut finished = None;
        if let Some(r) = running.as_mut() {
            let last_seen = input.map_or(r.started, |i| i.received.max(r.started));
            if now.duration_since(last_seen) > gap || input.is_none() && now.duration_since(r.started) > gap {
                running = None;
                stalled_at = Some(now);
                entry.invalidated.fetch_add(1, Ordering::SeqCst);
                log::info!("session {}: trial abandoned after input gap", entry.id);
            } else if let Some(i) = input {
                ticks_owed += control_hz / FRAME_HZ;
                while ticks_owed >= 1.0 && !r.trial.is_complete() {
                    let sample = r.trial.tick(mapping.to_angles(i.position));
                    r.trace.push(i.position);
                    last_sample_screen = Some(mapping.to_screen(sample.q_act));
                    ticks_owed -= 1.0;
                }
                if r.trial.is_complete() {
                    finished = running.take();
                }
            }
        }

        if let Some(r) = finished {
            let log = r.trial.log();
            let mut s = entry.session.lock().unwrap();
            let generation = s.cma.generation;
            let day = s.day;
            let cost = s.score(&log).map(|c| c.total).unwrap_or(f64::NAN);
            match s.record_trial(&r.spec.kind, &log, None) {
                Ok(()) => {
                    *entry.last_trial.lock().unwrap() = Some(AppliedTrial {
                        kind: r.spec.kind.clone(),
                        decision: r.spec.decision.clone(),
                        trace: r.trace,
                        cost,
                    });
                    entry.persist(&s);
                    if s.cma.generation > generation {
                        break_until = Some(now + Duration::from_secs_f64(s.config.break_s));
                    }
                    if s.day > day {
                        // the operator starts each day
                        entry.started.store(false, Ordering::SeqCst);
                        if s.is_finished() {
                            entry.set_status(Status::Completed);
                        }
                    }
                }
                Err(e) => entry.set_status(Status::Failed(e.to_string())),
            }
        }

        if running.is_none() && break_until.is_none() && entry.started.load(Ordering::SeqCst) {
            let fresh = match (stalled_at, input) {
                (None, _) => true,
                (Some(t), Some(i)) => i.received > t,
                (Some(_), None) => false,
            };
            if fresh {
                let mut s = entry.session.lock().unwrap();
                if s.is_finished() {
                    entry.set_status(Status::Completed);
                } else {
                    match s.next_trial() {
                        Ok(spec) => {
                            let trial = TraceTrial::new(&s, &path, &spec);
                            running = Some(Running {
                                trace: Vec::with_capacity(spec.ticks),
                                spec,
                                trial,
                                started: now,
                            });
                            stalled_at = None;
                            ticks_owed = 0.0;
                        }
                        Err(e) => entry.set_status(Status::Failed(e.to_string())),
                    }
                }
            }
        }

        let phase = match (&running, break_until) {
            (Some(r), _) if matches!(r.spec.kind, TrialKind::Validation { .. }) => Phase::Validation,
            (Some(_), _) => Phase::Running,
            (None, Some(_)) => Phase::Break,
            (None, None) => Phase::Idle,
        };
        entry.set_phase(phase);

        let elapsed = now.duration_since(t0).as_secs_f64();
        let reference = mapping.to_screen(path.at_phase(elapsed / gait));
        let cursor = input.map_or(reference, |i| i.position);
        let (stiffness, remaining_s, running_cost, assisted) = match &running {
            Some(r) => {
                let log = r.trial.log();
                let cost = log
                    .trim_transient(discard)
                    .ok()
                    .and_then(|l| evaluate(&l, &weights, &scales).ok())
                    .map_or(0.0, |c| c.total);
                (r.spec.leg_stiffness, r.trial.remaining_s(), cost, last_sample_screen.unwrap_or(cursor))
            }
            None => ([0.0; 2], 0.0, 0.0, cursor),
        };
        let msg = FrameMessage {
            kind: "frame".into(),
            frame,
            server_time_ms: elapsed * 1e3,
            phase,
            reference,
            cursor,
            assisted,
            deadband_radius: radius,
            stiffness,
            remaining_s,
            running_cost,
            trials_completed: entry.session.lock().unwrap().completed_trials(),
        };
        frame += 1;
        let text = serde_json::to_string(&msg).expect("frame serialises");
        if tx.send(Message::Text(text.into())).await.is_err() {
            if running.take().is_some() {
                entry.invalidated.fetch_add(1, Ordering::SeqCst);
            }
            break;
        }
    }
    entry.set_phase(Phase::Idle);
    reader.abort();
}
