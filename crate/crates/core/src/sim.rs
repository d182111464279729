//! Synthetic multi-service workloads with ground truth.
//!
//! [`generate`] lays requests out back to back, so no two requests overlap.
//! [`retime`] then rigidly translates whole requests to reach a target
//! concurrency, and [`emit_events`] turns a dataset back into the syscall
//! stream an agent would observe.

use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{IdSource, RandomIds};
use crate::model::{
    EventRecord, GroundTruth, Protocol, ServiceEntry, Span, SpanId, SpanKind, Syscall, Topology,
};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("spec: {0}")]
    Spec(String),
    #[error("parameter: {0}")]
    Parameter(String),
}

/// Delay or duration distribution in microseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum DistSpec {
    Constant { value: f64 },
    Normal { mean: f64, std: f64 },
    Lognormal { mu: f64, sigma: f64 },
    Exponential { rate: f64 },
    Mixture { components: Vec<MixtureComponent> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub dist: DistSpec,
}

// z with P(Z < -z) = 1e-6
const NORMAL_POSITIVE_Z: f64 = 4.753;

impl DistSpec {
    /// Lognormal with the given median.
    pub fn lognormal_median(median_us: f64, sigma: f64) -> Self {
        DistSpec::Lognormal {
            mu: median_us.ln(),
            sigma,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Spec(m));
        match *self {
            DistSpec::Constant { value } if !(value >= 0.0 && value.is_finite()) => {
                bad(format!("constant {value} must be finite and >= 0"))
            }
            DistSpec::Normal { mean, std } if !(std > 0.0 && mean.is_finite() && std.is_finite()) => {
                bad(format!("normal({mean}, {std}): std must be > 0"))
            }
            DistSpec::Normal { mean, std } if mean < NORMAL_POSITIVE_Z * std => bad(format!(
                "normal({mean}, {std}) is negative with probability above 1e-6"
            )),
            DistSpec::Lognormal { mu, sigma } if !(sigma > 0.0 && mu.is_finite() && sigma.is_finite()) => {
                bad(format!("lognormal({mu}, {sigma}): sigma must be > 0"))
            }
            DistSpec::Exponential { rate } if !(rate > 0.0 && rate.is_finite()) => {
                bad(format!("exponential rate {rate} must be > 0"))
            }
            DistSpec::Mixture { ref components } => {
                if components.is_empty() {
                    return bad("mixture without components".into());
                }
                for c in components {
                    if !(c.weight > 0.0 && c.weight.is_finite()) {
                        return bad(format!("mixture weight {} must be > 0", c.weight));
                    }
                    c.dist.validate()?;
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            DistSpec::Constant { value } => *value,
            DistSpec::Normal { mean, std } => Normal::new(*mean, *std).unwrap().sample(rng),
            DistSpec::Lognormal { mu, sigma } => LogNormal::new(*mu, *sigma).unwrap().sample(rng),
            DistSpec::Exponential { rate } => Exp::new(*rate).unwrap().sample(rng),
            DistSpec::Mixture { components } => {
                let total: f64 = components.iter().map(|c| c.weight).sum();
                let mut u = rng.random::<f64>() * total;
                for c in components {
                    if u < c.weight {
                        return c.dist.draw(rng);
                    }
                    u -= c.weight;
                }
                components.last().unwrap().dist.draw(rng)
            }
        }
    }

    /// Rounded sample in whole microseconds; negative draws are redrawn.
    pub fn sample_us(&self, rng: &mut ChaCha8Rng) -> u64 {
        loop {
            let x = self.draw(rng);
            if x >= 0.0 {
                return x.round() as u64;
            }
        }
    }

    pub fn mean_us(&self) -> f64 {
        match self {
            DistSpec::Constant { value } => *value,
            DistSpec::Normal { mean, .. } => *mean,
            DistSpec::Lognormal { mu, sigma } => (mu + sigma * sigma / 2.0).exp(),
            DistSpec::Exponential { rate } => 1.0 / rate,
            DistSpec::Mixture { components } => {
                let total: f64 = components.iter().map(|c| c.weight).sum();
                components.iter().map(|c| c.weight * c.dist.mean_us()).sum::<f64>() / total
            }
        }
    }
}

/// One simulated service. `delays` has one entry per delay position
/// (`calls.len() + 1`); a leaf's single delay is its whole duration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceSpec {
    pub name: String,
    pub pid: u32,
    pub addr: String,
    pub protocol: Protocol,
    #[serde(default)]
    pub calls: Vec<String>,
    pub delays: Vec<DistSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub root: String,
    pub request_count: usize,
    pub seed: u64,
    /// Idle time between consecutive requests of the generated dataset.
    #[serde(default = "default_gap")]
    pub gap_us: u64,
    /// One-way network latency added on both legs of every call.
    pub network: DistSpec,
    #[serde(rename = "service")]
    pub services: Vec<ServiceSpec>,
}

fn default_gap() -> u64 {
    1_000
}

impl WorkloadSpec {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let spec: WorkloadSpec = toml::from_str(text).map_err(|e| SimError::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("workload spec serializes")
    }

    pub fn service(&self, name: &str) -> Option<&ServiceSpec> {
        self.services.iter().find(|s| s.name == name)
    }

    pub fn topology(&self) -> Topology {
        Topology {
            services: self
                .services
                .iter()
                .map(|s| ServiceEntry {
                    name: s.name.clone(),
                    pid: s.pid,
                    addr: s.addr.clone(),
                    protocol: s.protocol,
                    calls: s.calls.clone(),
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.topology()
            .validate()
            .map_err(|e| SimError::Spec(e.to_string()))?;
        let mut addrs = HashSet::new();
        for s in &self.services {
            if !addrs.insert(&s.addr) {
                return Err(SimError::Spec(format!("duplicate addr {}", s.addr)));
            }
            if s.addr.rsplit_once(':').is_none() {
                return Err(SimError::Spec(format!("addr {} is not ip:port", s.addr)));
            }
            if s.delays.len() != s.calls.len() + 1 {
                return Err(SimError::Spec(format!(
                    "{}: {} calls need {} delay specs, got {}",
                    s.name,
                    s.calls.len(),
                    s.calls.len() + 1,
                    s.delays.len()
                )));
            }
            for d in &s.delays {
                d.validate()?;
            }
            for t in &s.calls {
                if self.service(t).is_none() {
                    return Err(SimError::Spec(format!("{}: unknown call target {t}", s.name)));
                }
            }
        }
        self.network.validate()?;
        if self.service(&self.root).is_none() {
            return Err(SimError::Spec(format!("unknown root {}", self.root)));
        }
        // call graph must be acyclic
        fn visit<'a>(
            spec: &'a WorkloadSpec,
            name: &'a str,
            stack: &mut Vec<&'a str>,
        ) -> Result<(), SimError> {
            if stack.contains(&name) {
                return Err(SimError::Spec(format!("call cycle through {name}")));
            }
            stack.push(name);
            for t in &spec.service(name).unwrap().calls {
                visit(spec, t, stack)?;
            }
            stack.pop();
            Ok(())
        }
        visit(self, &self.root, &mut Vec::new())
    }
}

/// Spans of one end-to-end request; the first is the root ingress span.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RequestExtent {
    pub first: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub topology: Topology,
    /// Grouped by request, parents before children within a request.
    pub spans: Vec<Span>,
    pub requests: Vec<RequestExtent>,
    pub ground_truth: GroundTruth,
    pub concurrency_level: u32,
}

impl Dataset {
    pub fn root_spans(&self) -> impl Iterator<Item = &Span> {
        self.requests.iter().map(|r| &self.spans[r.first])
    }

    pub fn spans_of_service<'a>(&'a self, service: &'a str) -> impl Iterator<Item = &'a Span> + 'a {
        self.spans.iter().filter(move |s| s.service == service)
    }
}

struct Generator<'a> {
    spec: &'a WorkloadSpec,
    spans: Vec<Span>,
    truth: GroundTruth,
    used_ids: HashSet<SpanId>,
}

impl Generator<'_> {
    fn fresh_id(&mut self, ids: &mut RandomIds) -> SpanId {
        loop {
            let id = ids.next_span_id();
            if self.used_ids.insert(id.clone()) {
                return id;
            }
        }
    }

    fn request(
        &mut self,
        service: &str,
        t0: u64,
        parent: Option<SpanId>,
        rng: &mut ChaCha8Rng,
        ids: &mut RandomIds,
    ) -> u64 {
        let svc = self.spec.service(service).expect("validated");
        let ingress_id = self.fresh_id(ids);
        let idx = self.spans.len();
        self.spans.push(Span {
            span_id: ingress_id.clone(),
            kind: SpanKind::Ingress,
            service: svc.name.clone(),
            pid: svc.pid,
            start_us: t0,
            end_us: t0,
            protocol: svc.protocol,
            parent_span_id: parent.clone(),
            trace_id: None,
            peer: None,
            duplicate_of: None,
        });
        let mut t = t0 + svc.delays[0].sample_us(rng);
        let mut tuple = Vec::with_capacity(svc.calls.len());
        for (k, target) in svc.calls.iter().enumerate() {
            let callee = self.spec.service(target).expect("validated");
            let egress_id = self.fresh_id(ids);
            let e_idx = self.spans.len();
            self.spans.push(Span {
                span_id: egress_id.clone(),
                kind: SpanKind::Egress,
                service: svc.name.clone(),
                pid: svc.pid,
                start_us: t,
                end_us: t,
                protocol: callee.protocol,
                parent_span_id: None,
                trace_id: None,
                peer: Some(callee.name.clone()),
                duplicate_of: None,
            });
            let there = self.spec.network.sample_us(rng);
            let child_end = self.request(target, t + there, Some(egress_id.clone()), rng, ids);
            let back = self.spec.network.sample_us(rng);
            self.spans[e_idx].end_us = child_end + back;
            tuple.push(egress_id);
            t = child_end + back + svc.delays[k + 1].sample_us(rng);
        }
        self.spans[idx].end_us = t;
        self.truth.intra.insert(ingress_id.clone(), tuple);
        if let Some(p) = parent {
            self.truth.inter.insert(ingress_id, p);
        }
        t
    }
}

/// First request starts here, so retimed offsets never go negative.
const EPOCH_US: u64 = 1_000_000;

/// Generates `request_count` non-overlapping requests.
///
/// Request `r` draws from ChaCha stream `r` of `seed`, so a request's
/// timings do not depend on how many requests precede it.
pub fn generate(spec: &WorkloadSpec) -> Result<Dataset, SimError> {
    spec.validate()?;
    let mut g = Generator {
        spec,
        spans: Vec::new(),
        truth: GroundTruth::default(),
        used_ids: HashSet::new(),
    };
    let mut requests = Vec::with_capacity(spec.request_count);
    let mut cursor = EPOCH_US;
    for r in 0..spec.request_count {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(r as u64);
        let mut ids = RandomIds::with_stream(spec.seed ^ 0x1d5_1d5, r as u64);
        let first = g.spans.len();
        let end = g.request(&spec.root, cursor, None, &mut rng, &mut ids);
        requests.push(RequestExtent {
            first,
            len: g.spans.len() - first,
        });
        cursor = end + spec.gap_us;
    }
    Ok(Dataset {
        topology: spec.topology(),
        spans: g.spans,
        requests,
        ground_truth: g.truth,
        concurrency_level: 1,
    })
}

/// Mean number of requests whose root interval overlaps a given request's
/// root interval, the request itself included.
pub fn mean_overlap(intervals: &[(u64, u64)]) -> f64 {
    if intervals.is_empty() {
        return 0.0;
    }
    let mut starts: Vec<u64> = intervals.iter().map(|i| i.0).collect();
    let mut ends: Vec<u64> = intervals.iter().map(|i| i.1).collect();
    starts.sort_unstable();
    ends.sort_unstable();
    let total: usize = intervals
        .iter()
        .map(|&(s, e)| {
            let started = starts.partition_point(|&x| x <= e);
            let finished = ends.partition_point(|&x| x < s);
            started - finished
        })
        .sum();
    total as f64 / intervals.len() as f64
}

pub fn measure_concurrency(dataset: &Dataset) -> f64 {
    let iv: Vec<(u64, u64)> = dataset.root_spans().map(|s| (s.start_us, s.end_us)).collect();
    mean_overlap(&iv)
}

/// Rigidly shifts every request so the mean root overlap approaches
/// `concurrency`.
///
/// Offsets are `u_r * W` with `u_r` uniform on `[0, 1)`; the window `W` is
/// found by bisection on the measured mean overlap, which is monotone in
/// `W`. Durations and intra-request delays are untouched.
pub fn retime(dataset: &Dataset, concurrency: u32, seed: u64) -> Result<Dataset, SimError> {
    if concurrency == 0 {
        return Err(SimError::Parameter("concurrency must be positive".into()));
    }
    let mut out = dataset.clone();
    out.concurrency_level = concurrency;
    if concurrency == 1 || dataset.requests.is_empty() {
        return Ok(out);
    }
    let lens: Vec<u64> = dataset.root_spans().map(|s| s.duration_us()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit: Vec<f64> = (0..lens.len()).map(|_| rng.random::<f64>()).collect();
    let place = |w: f64| -> Vec<(u64, u64)> {
        unit.iter()
            .zip(&lens)
            .map(|(&u, &l)| {
                let s = (u * w).floor() as u64;
                (s, s + l)
            })
            .collect()
    };
    let target = concurrency as f64;
    let max_len = *lens.iter().max().unwrap() as f64;
    let (mut lo, mut hi) = (0.0f64, 2.0 * lens.len() as f64 * max_len.max(1.0));
    for _ in 0..64 {
        let mid = 0.5 * (lo + hi);
        if mean_overlap(&place(mid)) > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1.0 {
            break;
        }
    }
    let w = if (mean_overlap(&place(lo)) - target).abs() < (mean_overlap(&place(hi)) - target).abs() {
        lo
    } else {
        hi
    };
    let placed = place(w);
    let base = dataset.spans[dataset.requests[0].first].start_us;
    for (req, &(s, _)) in dataset.requests.iter().zip(&placed) {
        let old = dataset.spans[req.first].start_us as i64;
        let shift = (base + s) as i64 - old;
        for span in &mut out.spans[req.first..req.first + req.len] {
            span.start_us = (span.start_us as i64 + shift) as u64;
            span.end_us = (span.end_us as i64 + shift) as u64;
        }
    }
    Ok(out)
}

fn split_addr(addr: &str) -> &str {
    addr.rsplit_once(':').map(|(ip, _)| ip).unwrap_or(addr)
}

fn client_addr(r: usize) -> String {
    let host = r / 60_000;
    format!(
        "100.64.{}.{}:{}",
        host / 250 % 250,
        host % 250 + 1,
        1024 + r % 60_000
    )
}

/// Syscall events an agent would see for `dataset`, sorted by timestamp.
///
/// Every egress `send` carries its span id and a token; the callee's
/// ingress `recv` carries the same token. gRPC calls share one connection
/// per caller/callee pair and get fresh odd stream ids; HTTP calls get a
/// fresh local port each.
pub fn emit_events(dataset: &Dataset) -> Vec<EventRecord> {
    let topo = &dataset.topology;
    let entry: HashMap<&str, (usize, &ServiceEntry)> = topo
        .services
        .iter()
        .enumerate()
        .map(|(i, s)| (s.name.as_str(), (i, s)))
        .collect();
    let index_of: HashMap<&SpanId, usize> = dataset
        .spans
        .iter()
        .enumerate()
        .map(|(i, s)| (&s.span_id, i))
        .collect();
    let request_of: Vec<usize> = {
        let mut v = vec![0; dataset.spans.len()];
        for (r, req) in dataset.requests.iter().enumerate() {
            v[req.first..req.first + req.len].fill(r);
        }
        v
    };

    // caller-side socket of each egress span: (caller local addr, stream, token)
    let mut egress_socket: HashMap<usize, (String, Option<u64>, u64)> = HashMap::new();
    let mut pair_counter: HashMap<(usize, usize), u64> = HashMap::new();
    let mut events: Vec<(u64, EventRecord)> = Vec::with_capacity(dataset.spans.len() * 2);
    let mut token = 0u64;

    let mk = |remote: &str, local: &str, syscall, protocol, stream, pid, ts, prop, token| EventRecord {
        remote_addr: remote.to_owned(),
        local_addr: local.to_owned(),
        syscall,
        protocol,
        stream_id: stream,
        pid,
        timestamp_us: ts,
        propagated_span_id: prop,
        token,
    };

    for (i, span) in dataset.spans.iter().enumerate() {
        let (si, svc) = entry[span.service.as_str()];
        match span.kind {
            SpanKind::Egress => {
                let callee_name = span.peer.as_deref().expect("simulated egress has a peer");
                let (ti, callee) = entry[callee_name];
                let n = pair_counter.entry((si, ti)).or_insert(0);
                let (local, stream) = if callee.protocol.is_multiplexed() {
                    (
                        format!("{}:{}", split_addr(&svc.addr), 30_000 + ti),
                        Some(2 * *n + 1),
                    )
                } else {
                    (
                        format!("{}:{}", split_addr(&svc.addr), 10_000 + *n % 55_000),
                        None,
                    )
                };
                *n += 1;
                token += 1;
                events.push((
                    span.start_us,
                    mk(&callee.addr, &local, Syscall::Send, callee.protocol, stream, svc.pid,
                        span.start_us, Some(span.span_id.clone()), Some(token)),
                ));
                events.push((
                    span.end_us,
                    mk(&callee.addr, &local, Syscall::Recv, callee.protocol, stream, svc.pid,
                        span.end_us, None, None),
                ));
                egress_socket.insert(i, (local, stream, token));
            }
            SpanKind::Ingress => {
                let parent = dataset
                    .ground_truth
                    .inter
                    .get(&span.span_id)
                    .and_then(|p| index_of.get(p));
                let (remote, stream, tok) = match parent.and_then(|p| egress_socket.get(p)) {
                    Some((local, stream, tok)) => (local.clone(), *stream, Some(*tok)),
                    None => {
                        let r = request_of[i];
                        let stream = svc.protocol.is_multiplexed().then_some(2 * r as u64 + 1);
                        (client_addr(r), stream, None)
                    }
                };
                events.push((
                    span.start_us,
                    mk(&remote, &svc.addr, Syscall::Recv, svc.protocol, stream, svc.pid,
                        span.start_us, None, tok),
                ));
                events.push((
                    span.end_us,
                    mk(&remote, &svc.addr, Syscall::Send, svc.protocol, stream, svc.pid,
                        span.end_us, None, None),
                ));
            }
        }
    }
    events.sort_by_key(|(ts, _)| *ts);
    events.into_iter().map(|(_, e)| e).collect()
}

/// Ready-made workloads.
pub mod presets {
    use super::*;

    fn svc(name: &str, pid: u32, port: u16, protocol: Protocol, calls: &[&str], delays: Vec<DistSpec>) -> ServiceSpec {
        ServiceSpec {
            name: name.into(),
            pid,
            addr: format!("10.0.0.{pid}:{port}"),
            protocol,
            calls: calls.iter().map(|s| s.to_string()).collect(),
            delays,
        }
    }

    fn ln(median: f64, sigma: f64) -> DistSpec {
        DistSpec::lognormal_median(median, sigma)
    }

    /// Hotel-reservation shaped topology: `frontend` calls `search`,
    /// `reservation` and `profile`; `search` calls `geo` and `rate` and
    /// finishes with a delay above 10 ms.
    pub fn hotel(request_count: usize, seed: u64) -> WorkloadSpec {
        WorkloadSpec {
            root: "frontend".into(),
            request_count,
            seed,
            gap_us: 1_000,
            network: ln(20.0, 0.3),
            services: vec![
                svc(
                    "frontend",
                    1,
                    5000,
                    Protocol::Http,
                    &["search", "reservation", "profile"],
                    vec![ln(40.0, 0.3), ln(30.0, 0.3), ln(30.0, 0.3), ln(40.0, 0.3)],
                ),
                svc(
                    "search",
                    2,
                    8082,
                    Protocol::Grpc,
                    &["geo", "rate"],
                    vec![ln(30.0, 0.3), ln(30.0, 0.3), ln(10_500.0, 0.1)],
                ),
                svc("geo", 3, 8083, Protocol::Grpc, &[], vec![ln(3_000.0, 0.5)]),
                svc("rate", 4, 8084, Protocol::Grpc, &[], vec![ln(4_000.0, 0.5)]),
                svc("reservation", 5, 8087, Protocol::Grpc, &[], vec![ln(6_000.0, 0.6)]),
                svc("profile", 6, 8081, Protocol::Grpc, &[], vec![ln(5_000.0, 0.6)]),
            ],
        }
    }

    /// Hotel topology whose first frontend delay is bimodal, so fitting
    /// falls through to a Gaussian mixture.
    pub fn hotel_bimodal(request_count: usize, seed: u64) -> WorkloadSpec {
        let mut spec = hotel(request_count, seed);
        spec.services[0].delays[0] = DistSpec::Mixture {
            components: vec![
                MixtureComponent {
                    weight: 0.5,
                    dist: DistSpec::Normal {
                        mean: 30.0,
                        std: 4.0,
                    },
                },
                MixtureComponent {
                    weight: 0.5,
                    dist: DistSpec::Normal {
                        mean: 90.0,
                        std: 8.0,
                    },
                },
            ],
        };
        spec
    }

    /// `a -> b -> c` over HTTP then gRPC.
    pub fn chain(request_count: usize, seed: u64) -> WorkloadSpec {
        WorkloadSpec {
            root: "a".into(),
            request_count,
            seed,
            gap_us: 500,
            network: ln(20.0, 0.3),
            services: vec![
                svc("a", 1, 8080, Protocol::Http, &["b"], vec![ln(50.0, 0.3), ln(50.0, 0.3)]),
                svc("b", 2, 8081, Protocol::Grpc, &["c"], vec![ln(40.0, 0.3), ln(40.0, 0.3)]),
                svc("c", 3, 8082, Protocol::Grpc, &[], vec![ln(2_000.0, 0.5)]),
            ],
        }
    }

    /// A single leaf service.
    pub fn leaf(request_count: usize, seed: u64) -> WorkloadSpec {
        WorkloadSpec {
            root: "leaf".into(),
            request_count,
            seed,
            gap_us: 100,
            network: DistSpec::Constant { value: 10.0 },
            services: vec![svc("leaf", 1, 8080, Protocol::Http, &[], vec![ln(500.0, 0.5)])],
        }
    }

    pub fn by_name(name: &str, request_count: usize, seed: u64) -> Option<WorkloadSpec> {
        match name {
            "hotel" => Some(hotel(request_count, seed)),
            "hotel-bimodal" => Some(hotel_bimodal(request_count, seed)),
            "chain" => Some(chain(request_count, seed)),
            "leaf" => Some(leaf(request_count, seed)),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_workload_has_empty_truth_tuples() {
        let d = generate(&presets::leaf(5, 1)).unwrap();
        assert_eq!(d.spans.len(), 5);
        assert!(d.spans.iter().all(|s| s.kind == SpanKind::Ingress));
        assert_eq!(d.ground_truth.intra.len(), 5);
        assert!(d.ground_truth.intra.values().all(|t| t.is_empty()));
    }

    #[test]
    fn single_hotel_request_layout() {
        let spec = presets::hotel(1, 3);
        let d = generate(&spec).unwrap();
        let fe: Vec<&Span> = d.spans_of_service("frontend").collect();
        assert_eq!(fe.len(), 4);
        assert_eq!(fe.iter().filter(|s| s.kind == SpanKind::Ingress).count(), 1);
        let ingress = fe[0];
        let tuple = &d.ground_truth.intra[&ingress.span_id];
        assert_eq!(tuple.len(), 3);
        // replay the draws and compare to span geometry
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        rng.set_stream(0);
        let fe_spec = spec.service("frontend").unwrap();
        let d1 = fe_spec.delays[0].sample_us(&mut rng);
        let first = d.spans.iter().find(|s| s.span_id == tuple[0]).unwrap();
        assert_eq!(first.start_us - ingress.start_us, d1);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&presets::hotel(200, 9)).unwrap();
        let b = generate(&presets::hotel(200, 9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(emit_events(&a), emit_events(&b));
        let c = generate(&presets::hotel(200, 10)).unwrap();
        assert_ne!(a.spans, c.spans);
    }

    #[test]
    fn generated_requests_do_not_overlap() {
        let d = generate(&presets::hotel(300, 2)).unwrap();
        assert_eq!(measure_concurrency(&d), 1.0);
        assert_eq!(d.concurrency_level, 1);
    }

    #[test]
    fn retime_reaches_target_and_keeps_geometry() {
        let d = generate(&presets::hotel(2000, 4)).unwrap();
        let r = retime(&d, 250, 4).unwrap();
        let measured = measure_concurrency(&r);
        assert!((measured - 250.0).abs() < 25.0, "{measured}");
        for req in &d.requests {
            let a = &d.spans[req.first..req.first + req.len];
            let b = &r.spans[req.first..req.first + req.len];
            let shift = b[0].start_us as i64 - a[0].start_us as i64;
            for (x, y) in a.iter().zip(b) {
                assert_eq!(y.start_us as i64 - x.start_us as i64, shift);
                assert_eq!(y.end_us as i64 - x.end_us as i64, shift);
            }
        }
        assert_eq!(r.ground_truth, d.ground_truth);
        assert_eq!(retime(&d, 250, 4).unwrap(), r);
    }

    #[test]
    fn retime_rejects_zero_and_keeps_level_one() {
        let d = generate(&presets::chain(10, 1)).unwrap();
        assert!(retime(&d, 0, 1).is_err());
        assert_eq!(retime(&d, 1, 1).unwrap().spans, d.spans);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = presets::chain(1, 1);
        s.services[0].delays.pop();
        assert!(generate(&s).is_err());
        let mut s = presets::chain(1, 1);
        s.services[2].calls.push("a".into());
        s.services[2].delays.push(DistSpec::Constant { value: 1.0 });
        assert!(matches!(s.validate(), Err(SimError::Spec(m)) if m.contains("cycle")));
        assert!(DistSpec::Normal { mean: 1.0, std: 1.0 }.validate().is_err());
        assert!(DistSpec::Exponential { rate: 0.0 }.validate().is_err());
    }

    #[test]
    fn one_ingress_span_emits_recv_then_send() {
        let d = generate(&presets::leaf(1, 1)).unwrap();
        let ev = emit_events(&d);
        assert_eq!(ev.len(), 2);
        assert_eq!(ev[0].syscall, Syscall::Recv);
        assert_eq!(ev[1].syscall, Syscall::Send);
        assert_eq!(
            (&ev[0].remote_addr, &ev[0].local_addr, ev[0].pid),
            (&ev[1].remote_addr, &ev[1].local_addr, ev[1].pid)
        );
    }

    #[test]
    fn workload_spec_toml_round_trip() {
        let s = presets::hotel_bimodal(10, 1);
        let back = WorkloadSpec::from_toml(&s.to_toml()).unwrap();
        assert_eq!(back, s);
    }
}
