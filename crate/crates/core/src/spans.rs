//! Span construction from an ordered syscall stream.
//!
//! Every event is looked up by its socket key. If a pending entry with the
//! same key and the opposite syscall exists, the event closes that span and
//! the entry is removed; otherwise the event opens a new pending span. A
//! `recv` opens an ingress span, a `send` opens an egress span.

use std::collections::HashMap;

use serde::Serialize;
use thiserror::Error;

use crate::ids::IdSource;
use crate::model::{EventRecord, Protocol, Span, SpanId, SpanKind, Syscall};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BuildError {
    #[error("event {index} at {ts} us precedes the previous event at {prev} us")]
    Ordering { index: usize, ts: u64, prev: u64 },
    #[error("event {index}: unknown pid {pid}")]
    UnknownPid { index: usize, pid: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct PendingKey {
    pub remote_addr: String,
    pub local_addr: String,
    pub protocol: Protocol,
    pub stream_id: Option<u64>,
    pub pid: u32,
}

impl PendingKey {
    pub fn of(event: &EventRecord) -> Self {
        Self {
            remote_addr: event.remote_addr.clone(),
            local_addr: event.local_addr.clone(),
            protocol: event.protocol,
            stream_id: event.stream_id,
            pid: event.pid,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PendingSpan {
    pub key: PendingKey,
    pub span_id: SpanId,
    pub kind: SpanKind,
    pub open_syscall: Syscall,
    pub start_us: u64,
    pub propagated_parent: Option<SpanId>,
    #[serde(skip)]
    peer: Option<String>,
    #[serde(skip)]
    seq: u64,
}

/// Resolves pids to services, and remote endpoints to callee services.
#[derive(Debug, Clone, Default)]
pub struct ServiceMap {
    pub by_pid: HashMap<u32, String>,
    pub by_addr: HashMap<String, String>,
}

impl ServiceMap {
    pub fn from_topology(topo: &crate::model::Topology) -> Self {
        Self {
            by_pid: topo.service_of_pid(),
            by_addr: topo.service_of_addr(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct BuildOutput {
    /// Spans in closing order.
    pub spans: Vec<Span>,
    /// Pendings never closed, in opening order. Includes entries displaced
    /// by a second same-direction opening on their key.
    pub unclosed: Vec<PendingSpan>,
}

/// Replays `events` through the pending map.
///
/// An egress-opening `send` that carries `prop_span_id` keeps that id (the
/// agent allocated it when writing the shared map); an ingress-opening
/// `recv` that carries one records it as the parent.
pub fn build_spans(
    events: &[EventRecord],
    services: &ServiceMap,
    ids: &mut dyn IdSource,
) -> Result<BuildOutput, BuildError> {
    let mut pending: HashMap<PendingKey, PendingSpan> = HashMap::new();
    let mut out = BuildOutput::default();
    let mut prev_ts = 0u64;
    let mut seq = 0u64;

    for (index, ev) in events.iter().enumerate() {
        if ev.timestamp_us < prev_ts {
            return Err(BuildError::Ordering {
                index,
                ts: ev.timestamp_us,
                prev: prev_ts,
            });
        }
        prev_ts = ev.timestamp_us;
        let service = services
            .by_pid
            .get(&ev.pid)
            .ok_or(BuildError::UnknownPid { index, pid: ev.pid })?;

        let key = PendingKey::of(ev);
        let closes = pending
            .get(&key)
            .is_some_and(|p| p.open_syscall == ev.syscall.opposite());
        if closes {
            let p = pending.remove(&key).expect("checked above");
            out.spans.push(Span {
                span_id: p.span_id,
                kind: p.kind,
                service: service.clone(),
                pid: ev.pid,
                start_us: p.start_us,
                end_us: ev.timestamp_us,
                protocol: ev.protocol,
                parent_span_id: p.propagated_parent,
                trace_id: None,
                peer: p.peer,
                duplicate_of: None,
            });
            continue;
        }

        let (kind, span_id, parent, peer) = match ev.syscall {
            Syscall::Recv => (
                SpanKind::Ingress,
                ids.next_span_id(),
                ev.propagated_span_id.clone(),
                None,
            ),
            Syscall::Send => (
                SpanKind::Egress,
                ev.propagated_span_id
                    .clone()
                    .unwrap_or_else(|| ids.next_span_id()),
                None,
                services.by_addr.get(&ev.remote_addr).cloned(),
            ),
        };
        let opened = PendingSpan {
            key: key.clone(),
            span_id,
            kind,
            open_syscall: ev.syscall,
            start_us: ev.timestamp_us,
            propagated_parent: parent,
            peer,
            seq,
        };
        seq += 1;
        if let Some(displaced) = pending.insert(key, opened) {
            out.unclosed.push(displaced);
        }
    }

    let mut rest: Vec<PendingSpan> = pending.into_values().collect();
    out.unclosed.extend(rest.drain(..));
    out.unclosed.sort_by_key(|p| p.seq);
    Ok(out)
}

/// Receiver-side `recv` with a token that no sender registered.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DanglingPropagation {
    pub index: usize,
    pub token: u64,
}

#[derive(Debug, Clone, Default)]
pub struct Propagation {
    pub events: Vec<EventRecord>,
    pub dangling: Vec<DanglingPropagation>,
}

/// Models the shared-map / TCP-option handoff between two services.
///
/// A `send` carrying a token and a span id writes `token -> id` into the
/// shared map; the first later `recv` with that token reads and removes the
/// entry and gets `prop_span_id` set to the sender's id.
pub fn propagate_span_ids(events: &[EventRecord]) -> Propagation {
    let mut shared: HashMap<u64, SpanId> = HashMap::new();
    let mut out = Propagation {
        events: events.to_vec(),
        dangling: Vec::new(),
    };
    for (index, ev) in out.events.iter_mut().enumerate() {
        let Some(token) = ev.token else { continue };
        match ev.syscall {
            Syscall::Send => {
                if let Some(id) = &ev.propagated_span_id {
                    shared.insert(token, id.clone());
                }
            }
            Syscall::Recv => {
                if ev.propagated_span_id.is_some() {
                    continue;
                }
                match shared.remove(&token) {
                    Some(id) => ev.propagated_span_id = Some(id),
                    None => out.dangling.push(DanglingPropagation { index, token }),
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::SequentialIds;

    fn ev(
        remote: &str,
        local: &str,
        syscall: Syscall,
        protocol: Protocol,
        stream: Option<u64>,
        pid: u32,
        ts: u64,
    ) -> EventRecord {
        EventRecord {
            remote_addr: remote.into(),
            local_addr: local.into(),
            syscall,
            protocol,
            stream_id: stream,
            pid,
            timestamp_us: ts,
            propagated_span_id: None,
            token: None,
        }
    }

    fn services() -> ServiceMap {
        let mut m = ServiceMap::default();
        m.by_pid.insert(1, "a".into());
        m.by_pid.insert(2, "b".into());
        m
    }

    #[test]
    fn unanswered_send_is_unclosed() {
        let events = [ev(
            "15.1.1.2:80",
            "10.0.0.1:4444",
            Syscall::Send,
            Protocol::Grpc,
            Some(102),
            1,
            3,
        )];
        let out = build_spans(&events, &services(), &mut SequentialIds::new("S-")).unwrap();
        assert!(out.spans.is_empty());
        assert_eq!(out.unclosed.len(), 1);
        assert_eq!(out.unclosed[0].kind, SpanKind::Egress);
    }

    #[test]
    fn interleaved_streams_make_two_spans() {
        let r = "15.1.1.2:80";
        let l = "10.0.0.1:4444";
        let events = [
            ev(r, l, Syscall::Send, Protocol::Grpc, Some(100), 1, 2),
            ev(r, l, Syscall::Send, Protocol::Grpc, Some(102), 1, 3),
            ev(r, l, Syscall::Recv, Protocol::Grpc, Some(102), 1, 6),
            ev(r, l, Syscall::Recv, Protocol::Grpc, Some(100), 1, 7),
        ];
        let out = build_spans(&events, &services(), &mut SequentialIds::new("S-")).unwrap();
        assert_eq!(out.spans.len(), 2);
        assert_eq!(out.spans[0].span_id.0, "S-02");
        assert_eq!((out.spans[0].start_us, out.spans[0].end_us), (3, 6));
        assert_eq!((out.spans[1].start_us, out.spans[1].end_us), (2, 7));
        assert!(out.unclosed.is_empty());
    }

    #[test]
    fn out_of_order_and_unknown_pid_fail() {
        let a = ev("x", "y", Syscall::Recv, Protocol::Http, None, 1, 10);
        let b = ev("x", "y", Syscall::Send, Protocol::Http, None, 1, 9);
        assert!(matches!(
            build_spans(&[a.clone(), b], &services(), &mut SequentialIds::new("S-")),
            Err(BuildError::Ordering { index: 1, .. })
        ));
        let c = ev("x", "y", Syscall::Recv, Protocol::Http, None, 9, 10);
        assert_eq!(
            build_spans(&[c], &services(), &mut SequentialIds::new("S-")).unwrap_err(),
            BuildError::UnknownPid { index: 0, pid: 9 }
        );
    }

    #[test]
    fn repeated_opening_displaces_pending() {
        let a = ev("x", "y", Syscall::Recv, Protocol::Http, None, 1, 1);
        let b = ev("x", "y", Syscall::Recv, Protocol::Http, None, 1, 2);
        let c = ev("x", "y", Syscall::Send, Protocol::Http, None, 1, 3);
        let out = build_spans(&[a, b, c], &services(), &mut SequentialIds::new("S-")).unwrap();
        assert_eq!(out.spans.len(), 1);
        assert_eq!(out.spans[0].start_us, 2);
        assert_eq!(out.unclosed.len(), 1);
        assert_eq!(2 * out.spans.len() + out.unclosed.len(), 3);
    }

    #[test]
    fn single_request_propagates_parent() {
        let mut send = ev("10.0.0.2:8080", "10.0.0.1:4000", Syscall::Send, Protocol::Http, None, 1, 1);
        send.token = Some(7);
        send.propagated_span_id = Some("eg-1".into());
        let mut recv = ev("10.0.0.1:4000", "10.0.0.2:8080", Syscall::Recv, Protocol::Http, None, 2, 2);
        recv.token = Some(7);
        let reply = ev("10.0.0.1:4000", "10.0.0.2:8080", Syscall::Send, Protocol::Http, None, 2, 3);
        let back = ev("10.0.0.2:8080", "10.0.0.1:4000", Syscall::Recv, Protocol::Http, None, 1, 4);
        let prop = propagate_span_ids(&[send, recv, reply, back]);
        assert!(prop.dangling.is_empty());
        assert_eq!(prop.events[1].propagated_span_id, Some("eg-1".into()));

        let out = build_spans(&prop.events, &services(), &mut SequentialIds::new("S-")).unwrap();
        let ingress = out.spans.iter().find(|s| s.kind == SpanKind::Ingress).unwrap();
        let egress = out.spans.iter().find(|s| s.kind == SpanKind::Egress).unwrap();
        assert_eq!(egress.span_id.0, "eg-1");
        assert_eq!(ingress.parent_span_id.as_ref(), Some(&egress.span_id));
    }

    #[test]
    fn no_tokens_is_identity_and_dangling_is_reported() {
        let plain = vec![ev("x", "y", Syscall::Recv, Protocol::Http, None, 1, 1)];
        assert_eq!(propagate_span_ids(&plain).events, plain);

        let mut orphan = ev("x", "y", Syscall::Recv, Protocol::Http, None, 1, 1);
        orphan.token = Some(3);
        let p = propagate_span_ids(&[orphan]);
        assert_eq!(p.dangling, vec![DanglingPropagation { index: 0, token: 3 }]);
        assert_eq!(p.events[0].propagated_span_id, None);
    }
}
