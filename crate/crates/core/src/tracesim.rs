//! Trace-driven cost simulator.
//!
//! Replays item arrivals against a device profile under an embedding policy.
//! A single worker takes whatever has arrived (up to `max_batch`) whenever it
//! goes idle and runs the batch layer by layer with the same load/compute
//! overlap model as the real pipeline. Nothing here runs the encoder; exits
//! are drawn from a histogram.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::config::parse_key_values;
use crate::datagen::{comment_block, csv_rows};
use crate::encoder::Modality;
use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::scheduler::{flow_shop_makespan, plan_batches};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEvent {
    pub timestamp: f64,
    pub item_id: u64,
    pub modality: Modality,
}

pub const TRACE_HEADER: &str = "timestamp,item_id,modality";

pub fn parse_trace(text: &str) -> Result<Vec<TraceEvent>> {
    let mut out: Vec<TraceEvent> = Vec::new();
    for (line, cols) in csv_rows(text, TRACE_HEADER)? {
        let [ts, id, m] = cols.as_slice() else {
            return Err(Error::Parse { line, msg: format!("expected 3 columns, found {}", cols.len()) });
        };
        let timestamp: f64 = ts.parse().map_err(|e| Error::Parse { line, msg: format!("timestamp: {e}") })?;
        if !timestamp.is_finite() || timestamp < 0.0 {
            return Err(Error::Parse { line, msg: format!("timestamp {timestamp} must be finite and non-negative") });
        }
        let item_id = id.parse().map_err(|e| Error::Parse { line, msg: format!("item_id: {e}") })?;
        let modality = m.parse().map_err(|e: Error| Error::Parse { line, msg: e.to_string() })?;
        if let Some(prev) = out.last() {
            if timestamp < prev.timestamp {
                return Err(Error::Parse { line, msg: format!("timestamp {timestamp} before {}", prev.timestamp) });
            }
        }
        out.push(TraceEvent { timestamp, item_id, modality });
    }
    Ok(out)
}

/// A file with no rows at all (not even a header) is an empty trace.
pub fn load_trace(path: &Path) -> Result<Vec<TraceEvent>> {
    let text = std::fs::read_to_string(path)?;
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    parse_trace(&text)
}

pub fn trace_to_csv(events: &[TraceEvent], header: &str) -> String {
    let mut out = comment_block(header);
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for e in events {
        // `{:?}` on f64 prints the shortest string that parses back exactly
        let _ = writeln!(out, "{:?},{},{}", e.timestamp, e.item_id, e.modality);
    }
    out
}

pub fn save_trace(events: &[TraceEvent], path: &Path, header: &str) -> Result<()> {
    std::fs::write(path, trace_to_csv(events, header))?;
    Ok(())
}

/// Poisson arrivals at `rate` items per second.
pub fn synthetic_trace(n: usize, rate: f64, seed: u64) -> Result<Vec<TraceEvent>> {
    if !(rate.is_finite() && rate > 0.0) {
        return Err(Error::invalid(format!("arrival rate {rate}")));
    }
    let mut rng = Rng::new(seed);
    let mut t = 0.0;
    Ok((0..n as u64)
        .map(|item_id| {
            t += -(1.0 - rng.uniform()).ln() / rate;
            let modality = if rng.below(2) == 0 { Modality::A } else { Modality::B };
            TraceEvent { timestamp: t, item_id, modality }
        })
        .collect())
}

/// Per-layer costs of the simulated device. Defaults are synthetic
/// placeholders sized so the default scenario is compute-heavy but keeps up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeviceProfile {
    pub num_layers: usize,
    pub max_batch: usize,
    /// Seconds to run one layer for one item.
    pub layer_compute_s: f64,
    /// Seconds to bring one layer's weights into memory.
    pub layer_load_s: f64,
    pub layer_compute_j: f64,
    pub layer_load_j: f64,
    pub battery_j: f64,
    pub idle_w: f64,
}

impl Default for DeviceProfile {
    fn default() -> Self {
        Self {
            num_layers: 12,
            max_batch: 32,
            layer_compute_s: 0.02,
            layer_load_s: 0.05,
            layer_compute_j: 0.05,
            layer_load_j: 0.1,
            battery_j: 2000.0,
            idle_w: 0.05,
        }
    }
}

impl DeviceProfile {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.max_batch == 0 {
            return Err(Error::invalid("num_layers and max_batch must be positive"));
        }
        let reals = [
            ("layer_compute_s", self.layer_compute_s),
            ("layer_load_s", self.layer_load_s),
            ("layer_compute_j", self.layer_compute_j),
            ("layer_load_j", self.layer_load_j),
            ("idle_w", self.idle_w),
        ];
        for (k, v) in reals {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{k} = {v} must be finite and non-negative")));
            }
        }
        if !(self.battery_j.is_finite() && self.battery_j > 0.0) {
            return Err(Error::invalid(format!("battery_j = {} must be positive", self.battery_j)));
        }
        Ok(())
    }

    /// `key=value` lines; unspecified keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut p = Self::default();
        for (line, key, value) in parse_key_values(text)? {
            let bad = |e: String| Error::Parse { line, msg: format!("{key}: {e}") };
            match key.as_str() {
                "num_layers" => p.num_layers = value.parse().map_err(|e| bad(format!("{e}")))?,
                "max_batch" => p.max_batch = value.parse().map_err(|e| bad(format!("{e}")))?,
                _ => {
                    let v: f64 = value.parse().map_err(|e| bad(format!("{e}")))?;
                    match key.as_str() {
                        "layer_compute_s" => p.layer_compute_s = v,
                        "layer_load_s" => p.layer_load_s = v,
                        "layer_compute_j" => p.layer_compute_j = v,
                        "layer_load_j" => p.layer_load_j = v,
                        "battery_j" => p.battery_j = v,
                        "idle_w" => p.idle_w = v,
                        _ => return Err(Error::Parse { line, msg: format!("unknown key {key:?}") }),
                    }
                }
            }
        }
        p.validate()?;
        Ok(p)
    }

    pub fn to_text(&self) -> String {
        format!(
            "num_layers={}\nmax_batch={}\nlayer_compute_s={:?}\nlayer_load_s={:?}\nlayer_compute_j={:?}\nlayer_load_j={:?}\nbattery_j={:?}\nidle_w={:?}\n",
            self.num_layers,
            self.max_batch,
            self.layer_compute_s,
            self.layer_load_s,
            self.layer_compute_j,
            self.layer_load_j,
            self.battery_j,
            self.idle_w
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// Exit histogram sampled by inverse CDF.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitDistribution {
    exits: Vec<usize>,
    cumulative: Vec<f64>,
}

impl ExitDistribution {
    pub fn from_histogram(hist: &BTreeMap<usize, usize>) -> Result<Self> {
        let total: usize = hist.values().sum();
        if total == 0 || hist.contains_key(&0) {
            return Err(Error::invalid("exit histogram must be nonempty with exits >= 1"));
        }
        let mut acc = 0usize;
        let mut exits = Vec::new();
        let mut cumulative = Vec::new();
        for (e, c) in hist.iter().filter(|(_, c)| **c > 0) {
            acc += c;
            exits.push(*e);
            cumulative.push(acc as f64 / total as f64);
        }
        Ok(Self { exits, cumulative })
    }

    pub fn point(exit: usize) -> Result<Self> {
        Self::from_histogram(&BTreeMap::from([(exit, 1)]))
    }

    pub fn max_exit(&self) -> usize {
        *self.exits.last().expect("nonempty by construction")
    }

    pub fn mean(&self) -> f64 {
        let mut prev = 0.0;
        let mut m = 0.0;
        for (e, c) in self.exits.iter().zip(&self.cumulative) {
            m += *e as f64 * (c - prev);
            prev = *c;
        }
        m
    }

    pub fn sample(&self, rng: &mut Rng) -> usize {
        let u = rng.uniform();
        let k = self.cumulative.partition_point(|c| *c <= u).min(self.exits.len() - 1);
        self.exits[k]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    FullDepth,
    FixedExit(usize),
    PreExit { n: usize, exits: ExitDistribution, seed: u64 },
}

impl Policy {
    pub fn name(&self) -> String {
        match self {
            Self::FullDepth => "full-depth".into(),
            Self::FixedExit(e) => format!("fixed-exit({e})"),
            Self::PreExit { n, .. } => format!("pre-exit({n})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimReport {
    pub items: usize,
    pub embedded: usize,
    pub dropped: usize,
    /// Time-averaged count of arrived but unfinished items.
    pub mean_backlog: f64,
    pub compute_energy_j: f64,
    pub load_energy_j: f64,
    pub idle_energy_j: f64,
    pub total_energy_j: f64,
    pub charges: u64,
    pub throughput: f64,
    pub busy_s: f64,
    /// Item-layer evaluations performed.
    pub layer_evals: u64,
}

/// Runs one batch: returns (duration, compute energy, load energy, evals).
fn run_batch(exits: &[usize], first_layers: usize, profile: &DeviceProfile) -> (f64, f64, f64, u64) {
    let mut loads = Vec::new();
    let mut computes = Vec::new();
    let mut evals = 0u64;
    let b = exits.len();
    for _ in 0..first_layers {
        loads.push(profile.layer_load_s);
        computes.push(profile.layer_compute_s * b as f64);
        evals += b as u64;
    }
    let groups = plan_batches(exits, b.max(1)).expect("batch size is positive");
    for g in &groups {
        for _ in first_layers..g.exit {
            loads.push(profile.layer_load_s);
            computes.push(profile.layer_compute_s * g.members.len() as f64);
            evals += g.members.len() as u64;
        }
    }
    let duration = flow_shop_makespan(&loads, &computes);
    let compute_j = evals as f64 * profile.layer_compute_j;
    let load_j = loads.len() as f64 * profile.layer_load_j;
    (duration, compute_j, load_j, evals)
}

pub fn simulate(policy: &Policy, trace: &[TraceEvent], profile: &DeviceProfile, horizon: f64) -> Result<SimReport> {
    profile.validate()?;
    let l = profile.num_layers;
    // superficial depth shared by the whole batch, and per-item exits
    let (shared, exits): (usize, Vec<usize>) = match policy {
        Policy::FullDepth => (l, vec![l; trace.len()]),
        Policy::FixedExit(e) => {
            if *e == 0 || *e > l {
                return Err(Error::invalid(format!("fixed exit {e} not in [1, {l}]")));
            }
            (*e, vec![*e; trace.len()])
        }
        Policy::PreExit { n, exits, seed } => {
            if *n == 0 || *n >= l || exits.max_exit() > l {
                return Err(Error::invalid(format!("pre-exit depth {n} / exits up to {} with {l} layers", exits.max_exit())));
            }
            let mut rng = Rng::new(*seed);
            (*n, (0..trace.len()).map(|_| exits.sample(&mut rng).clamp(n + 1, l)).collect())
        }
    };
    let span = trace.last().map_or(0.0, |e| e.timestamp);
    if !(horizon.is_finite() && horizon >= span) {
        return Err(Error::invalid(format!("horizon {horizon} shorter than trace span {span}")));
    }

    let mut report = SimReport {
        items: trace.len(),
        embedded: 0,
        dropped: 0,
        mean_backlog: 0.0,
        compute_energy_j: 0.0,
        load_energy_j: 0.0,
        idle_energy_j: 0.0,
        total_energy_j: 0.0,
        charges: 0,
        throughput: 0.0,
        busy_s: 0.0,
        layer_evals: 0,
    };
    let mut finish = vec![horizon; trace.len()];
    let mut now = 0.0f64;
    let mut next = 0usize;
    while next < trace.len() {
        now = now.max(trace[next].timestamp);
        let mut end = next;
        while end < trace.len() && end - next < profile.max_batch && trace[end].timestamp <= now {
            end += 1;
        }
        let (duration, compute_j, load_j, evals) = run_batch(&exits[next..end], shared.min(l), profile);
        if now + duration > horizon {
            break;
        }
        now += duration;
        for f in &mut finish[next..end] {
            *f = now;
        }
        report.embedded += end - next;
        report.compute_energy_j += compute_j;
        report.load_energy_j += load_j;
        report.busy_s += duration;
        report.layer_evals += evals;
        next = end;
    }
    report.dropped = trace.len() - report.embedded;
    report.idle_energy_j = profile.idle_w * (horizon - report.busy_s).max(0.0);
    report.total_energy_j = report.compute_energy_j + report.load_energy_j + report.idle_energy_j;
    report.charges = (report.total_energy_j / profile.battery_j).ceil() as u64;
    if horizon > 0.0 {
        let waiting: f64 = trace.iter().zip(&finish).map(|(e, f)| f - e.timestamp).sum();
        report.mean_backlog = waiting / horizon;
        report.throughput = report.embedded as f64 / horizon;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub policy: String,
    pub report: SimReport,
    /// Ratios against the first policy.
    pub energy_ratio: f64,
    pub throughput_ratio: f64,
    pub charges_ratio: f64,
}

fn ratio(a: f64, b: f64) -> f64 {
    if a == b {
        1.0
    } else if b == 0.0 {
        f64::INFINITY
    } else {
        a / b
    }
}

pub fn compare(policies: &[Policy], trace: &[TraceEvent], profile: &DeviceProfile, horizon: f64) -> Result<Vec<ComparisonRow>> {
    if policies.len() < 2 {
        return Err(Error::invalid("compare needs at least two policies"));
    }
    let reports = policies
        .iter()
        .map(|p| simulate(p, trace, profile, horizon))
        .collect::<Result<Vec<_>>>()?;
    let base = reports[0];
    Ok(policies
        .iter()
        .zip(reports)
        .map(|(p, r)| ComparisonRow {
            policy: p.name(),
            report: r,
            energy_ratio: ratio(r.total_energy_j, base.total_energy_j),
            throughput_ratio: ratio(r.throughput, base.throughput),
            charges_ratio: ratio(r.charges as f64, base.charges as f64),
        })
        .collect())
}

pub fn comparison_csv(rows: &[ComparisonRow], header: &str) -> String {
    let mut out = comment_block(header);
    out.push_str("policy,items,embedded,dropped,mean_backlog,total_energy_j,charges,throughput,energy_ratio,throughput_ratio\n");
    for r in rows {
        let s = &r.report;
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6},{:.6},{},{:.6},{:.6},{:.6}",
            r.policy, s.items, s.embedded, s.dropped, s.mean_backlog, s.total_energy_j, s.charges, s.throughput, r.energy_ratio, r.throughput_ratio
        );
    }
    out
}

pub fn comparison_jsonl(rows: &[ComparisonRow]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("report fields serialize") + "\n")
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> DeviceProfile {
        DeviceProfile { idle_w: 0.0, ..Default::default() }
    }

    #[test]
    fn empty_trace_costs_nothing() {
        let r = simulate(&Policy::FullDepth, &[], &quiet(), 0.0).unwrap();
        assert_eq!(r.total_energy_j, 0.0);
        assert_eq!(r.charges, 0);
        assert_eq!(r.embedded + r.dropped, 0);
        assert!(parse_trace("").unwrap().is_empty());
    }

    #[test]
    fn trace_parse_errors_carry_line_numbers() {
        let text = "# note\ntimestamp,item_id,modality\n0.5,1,A\n0.25,2,B\n";
        match parse_trace(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_trace("timestamp,item_id,modality\n1,x,A\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_trace("timestamp,item_id,modality\n1,2,Q\n"), Err(Error::Parse { line: 2, .. })));
        let one = parse_trace("timestamp,item_id,modality\n3.5,9,B\n").unwrap();
        assert_eq!(one, vec![TraceEvent { timestamp: 3.5, item_id: 9, modality: Modality::B }]);
    }

    #[test]
    fn synthetic_trace_round_trips() {
        let t = synthetic_trace(1000, 2.0, 5).unwrap();
        assert_eq!(parse_trace(&trace_to_csv(&t, "seed=5")).unwrap(), t);
    }

    #[test]
    fn profile_parsing() {
        let p = DeviceProfile::parse("# device\nlayer_load_s = 0.5\nmax_batch=4\n").unwrap();
        assert_eq!(p.layer_load_s, 0.5);
        assert_eq!(p.max_batch, 4);
        assert_eq!(DeviceProfile::parse(&p.to_text()).unwrap(), p);
        assert!(DeviceProfile::parse("idle_w=-1").is_err());
        assert!(DeviceProfile::parse("warp=9").is_err());
        assert!(DeviceProfile::parse("battery_j=0").is_err());
    }

    #[test]
    fn fixed_exit_at_last_layer_is_full_depth() {
        let t = synthetic_trace(300, 3.0, 1).unwrap();
        let h = t.last().unwrap().timestamp + 10.0;
        let p = DeviceProfile::default();
        assert_eq!(simulate(&Policy::FixedExit(12), &t, &p, h).unwrap(), simulate(&Policy::FullDepth, &t, &p, h).unwrap());
    }

    #[test]
    fn quarter_depth_costs_a_quarter() {
        let t = synthetic_trace(200, 0.5, 2).unwrap();
        let h = t.last().unwrap().timestamp + 100.0;
        let p = DeviceProfile { layer_load_j: 0.0, layer_load_s: 0.0, ..quiet() };
        let pre = Policy::PreExit { n: 2, exits: ExitDistribution::point(3).unwrap(), seed: 1 };
        let full = simulate(&Policy::FullDepth, &t, &p, h).unwrap();
        let early = simulate(&pre, &t, &p, h).unwrap();
        assert_eq!(full.dropped, 0);
        assert!((early.total_energy_j / full.total_energy_j - 0.25).abs() < 0.01);
    }

    #[test]
    fn energy_is_linear_in_layer_costs() {
        let t = synthetic_trace(150, 2.0, 3).unwrap();
        let h = t.last().unwrap().timestamp + 20.0;
        let p = DeviceProfile::default();
        let double = DeviceProfile { layer_compute_j: 2.0 * p.layer_compute_j, layer_load_j: 2.0 * p.layer_load_j, ..p };
        let pol = Policy::PreExit { n: 3, exits: ExitDistribution::from_histogram(&BTreeMap::from([(5, 2), (9, 3)])).unwrap(), seed: 4 };
        let a = simulate(&pol, &t, &p, h).unwrap();
        let b = simulate(&pol, &t, &double, h).unwrap();
        assert_eq!(b.compute_energy_j + b.load_energy_j, 2.0 * (a.compute_energy_j + a.load_energy_j));
        assert_eq!(a.idle_energy_j, b.idle_energy_j);
    }

    #[test]
    fn slow_device_drops_backlog() {
        let t = synthetic_trace(500, 50.0, 6).unwrap();
        let h = t.last().unwrap().timestamp;
        let r = simulate(&Policy::FullDepth, &t, &DeviceProfile::default(), h).unwrap();
        assert!(r.dropped > 0);
        assert_eq!(r.embedded + r.dropped, r.items);
        assert!(simulate(&Policy::FullDepth, &t, &DeviceProfile::default(), h - 1.0).is_err());
    }

    #[test]
    fn compare_against_self_is_unity() {
        let t = synthetic_trace(50, 1.0, 7).unwrap();
        let h = t.last().unwrap().timestamp + 5.0;
        let rows = compare(&[Policy::FullDepth, Policy::FullDepth], &t, &DeviceProfile::default(), h).unwrap();
        assert_eq!(rows[1].energy_ratio, 1.0);
        assert_eq!(rows[1].throughput_ratio, 1.0);
        assert!(compare(&[Policy::FullDepth], &t, &DeviceProfile::default(), h).is_err());
        assert!(comparison_csv(&rows, "x").lines().count() == 4);
    }

    #[test]
    fn distribution_sampling_follows_histogram() {
        let d = ExitDistribution::from_histogram(&BTreeMap::from([(2, 1), (6, 3)])).unwrap();
        assert_eq!(d.mean(), 5.0);
        let mut rng = Rng::new(9);
        let sixes = (0..4000).filter(|_| d.sample(&mut rng) == 6).count();
        assert!((sixes as f64 / 4000.0 - 0.75).abs() < 0.03);
    }
}
