//! Event decoding and event-based scoring.
//!
//! Two scorers share one counting scheme: the collar-based F1 (onset and
//! offset tolerances, greedy one-to-one matching) and an intersection
//! F1 at a single operating point, which keeps the detection and
//! ground-truth tolerance criteria of polyphonic detection scoring.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::ssl::{median_filter, MedianFilterSpec};
use crate::tensor::Tensor;

/// Slack on time comparisons so boundaries computed as `frame × hop`
/// compare as intended.
const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub onset: f64,
    pub offset: f64,
    pub class: usize,
}

impl Event {
    pub fn new(onset: f64, offset: f64, class: usize) -> Result<Self> {
        if !(onset.is_finite() && offset.is_finite()) || onset >= offset || onset < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "event needs 0 ≤ onset < offset, got ({}, {})",
                onset, offset
            )));
        }
        Ok(Self { onset, offset, class })
    }

    pub fn duration(&self) -> f64 {
        self.offset - self.onset
    }

    /// Length of the part of `self` covered by the union of `others`.
    fn covered_by<'a>(&self, others: impl Iterator<Item = &'a Event>) -> f64 {
        let mut parts: Vec<(f64, f64)> = others
            .map(|o| (self.onset.max(o.onset), self.offset.min(o.offset)))
            .filter(|(a, b)| b > a)
            .collect();
        parts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut total = 0.0;
        let mut reach = f64::NEG_INFINITY;
        for (a, b) in parts {
            let start = a.max(reach);
            if b > start {
                total += b - start;
            }
            reach = reach.max(b);
        }
        total
    }
}

/// Events of one clip, sorted by class then onset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventList {
    events: Vec<Event>,
}

impl EventList {
    pub fn new(mut events: Vec<Event>) -> Result<Self> {
        for e in &events {
            Event::new(e.onset, e.offset, e.class)?;
        }
        events.sort_by(|a, b| {
            a.class
                .cmp(&b.class)
                .then(a.onset.total_cmp(&b.onset))
                .then(a.offset.total_cmp(&b.offset))
        });
        Ok(Self { events })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    fn of_class(&self, class: usize) -> Vec<Event> {
        self.events.iter().filter(|e| e.class == class).copied().collect()
    }

    fn max_class(&self) -> Option<usize> {
        self.events.iter().map(|e| e.class).max()
    }
}

/// Threshold (strict `>`), median-filter each class, and turn runs of
/// positive frames into events `[start·hop, (end+1)·hop)`.
pub fn decode_events(strong: &Tensor, threshold: f64, mf: &MedianFilterSpec, hop: f64) -> Result<EventList> {
    if strong.rank() != 2 || strong.shape()[1] != mf.classes() {
        return Err(shape_err!(
            "decoding {:?} with a median filter for {} classes",
            strong.shape(),
            mf.classes()
        ));
    }
    if !(hop > 0.0) {
        return Err(Error::InvalidArgument("hop must be positive".into()));
    }
    let (t, k) = (strong.shape()[0], strong.shape()[1]);
    let mut events = Vec::new();
    for c in 0..k {
        let col: Vec<u8> = (0..t).map(|i| u8::from(strong.data()[i * k + c] > threshold)).collect();
        let smooth = median_filter(&col, mf.windows()[c])?;
        let mut start = None;
        for (i, &v) in smooth.iter().chain(std::iter::once(&0)).enumerate() {
            match (v, start) {
                (1, None) => start = Some(i),
                (0, Some(s)) => {
                    events.push(Event { onset: s as f64 * hop, offset: i as f64 * hop, class: c });
                    start = None;
                }
                _ => {}
            }
        }
    }
    EventList::new(events)
}

/// Rasterizes events onto `frames × classes`: a frame is active when its
/// interval `[t·hop, (t+1)·hop)` overlaps the event.
pub fn encode_events(events: &EventList, frames: usize, hop: f64, classes: usize) -> Result<Tensor> {
    if let Some(c) = events.max_class().filter(|&c| c >= classes) {
        return Err(Error::InvalidArgument(format!("event class {} outside {} classes", c, classes)));
    }
    let mut out = Tensor::zeros(&[frames, classes]);
    for e in events.events() {
        for t in 0..frames {
            let (lo, hi) = (t as f64 * hop, (t + 1) as f64 * hop);
            if hi.min(e.offset) - lo.max(e.onset) > TIME_EPS {
                out.data_mut()[t * classes + e.class] = 1.0;
            }
        }
    }
    Ok(out)
}

/// Per-class tallies. For the collar scorer `tp_hyp == tp_ref` (matches);
/// the intersection scorer counts hypotheses and references separately.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub n_hyp: usize,
    pub tp_hyp: usize,
    pub n_ref: usize,
    pub tp_ref: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp_hyp, self.n_hyp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp_ref, self.n_ref)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    fn add(&mut self, o: &Counts) {
        self.n_hyp += o.n_hyp;
        self.tp_hyp += o.tp_hyp;
        self.n_ref += o.n_ref;
        self.tp_ref += o.tp_ref;
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollarParams {
    /// Onset tolerance in seconds.
    pub collar: f64,
    /// Offset tolerance as a fraction of the reference duration; the
    /// effective offset collar is `max(collar, fraction · duration)`.
    pub offset_fraction: f64,
}

impl Default for CollarParams {
    fn default() -> Self {
        Self { collar: 0.2, offset_fraction: 0.2 }
    }
}

/// Greedy one-to-one matching within one class. References are visited
/// by onset; each takes the earliest-onset unmatched hypothesis inside
/// both tolerances.
fn collar_class_counts(refs: &[Event], hyps: &[Event], p: CollarParams) -> Counts {
    let mut used = vec![false; hyps.len()];
    let mut tp = 0;
    for r in refs {
        let off_collar = p.collar.max(p.offset_fraction * r.duration());
        let hit = hyps.iter().enumerate().position(|(j, h)| {
            !used[j]
                && (h.onset - r.onset).abs() <= p.collar + TIME_EPS
                && (h.offset - r.offset).abs() <= off_collar + TIME_EPS
        });
        if let Some(j) = hit {
            used[j] = true;
            tp += 1;
        }
    }
    Counts { n_hyp: hyps.len(), tp_hyp: tp, n_ref: refs.len(), tp_ref: tp }
}

/// A hypothesis passes when same-class references cover at least `dtc` of
/// its duration; a reference is detected when passing hypotheses cover at
/// least `gtc` of it. Coverage is the length of the union of overlaps.
fn intersection_class_counts(refs: &[Event], hyps: &[Event], dtc: f64, gtc: f64) -> Counts {
    let passing: Vec<&Event> = hyps
        .iter()
        .filter(|h| {
            h.covered_by(refs.iter()) >= dtc * h.duration() - TIME_EPS
        })
        .collect();
    let detected = refs
        .iter()
        .filter(|r| {
            r.covered_by(passing.iter().copied()) >= gtc * r.duration() - TIME_EPS
        })
        .count();
    Counts { n_hyp: hyps.len(), tp_hyp: passing.len(), n_ref: refs.len(), tp_ref: detected }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Criterion {
    Collar(CollarParams),
    Intersection { dtc: f64, gtc: f64 },
}

impl Criterion {
    pub const PSDS1_LIKE: Criterion = Criterion::Intersection { dtc: 0.7, gtc: 0.7 };
    pub const PSDS2_LIKE: Criterion = Criterion::Intersection { dtc: 0.1, gtc: 0.1 };
}

/// Per-class counts accumulated over clips.
pub fn count_events(clips: &[(EventList, EventList)], classes: usize, criterion: Criterion) -> Vec<Counts> {
    let mut out = vec![Counts::default(); classes];
    for (reference, hypothesis) in clips {
        for (c, total) in out.iter_mut().enumerate() {
            let refs = reference.of_class(c);
            let hyps = hypothesis.of_class(c);
            let counts = match criterion {
                Criterion::Collar(p) => collar_class_counts(&refs, &hyps, p),
                Criterion::Intersection { dtc, gtc } => intersection_class_counts(&refs, &hyps, dtc, gtc),
            };
            total.add(&counts);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: String,
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub per_class: Vec<ClassScore>,
    /// Mean F1 over classes that occur in the references or hypotheses.
    pub macro_f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ScoreReport {
    pub fn from_counts(counts: &[Counts], class_names: &[String]) -> Result<Self> {
        if counts.len() != class_names.len() {
            return Err(shape_err!("{} class counts for {} names", counts.len(), class_names.len()));
        }
        let per_class: Vec<ClassScore> = counts
            .iter()
            .zip(class_names)
            .map(|(c, name)| ClassScore {
                class: name.clone(),
                counts: *c,
                precision: c.precision(),
                recall: c.recall(),
                f1: c.f1(),
            })
            .collect();
        let active: Vec<f64> = per_class
            .iter()
            .filter(|s| s.counts.n_ref + s.counts.n_hyp > 0)
            .map(|s| s.f1)
            .collect();
        let macro_f1 = if active.is_empty() { 0.0 } else { active.iter().sum::<f64>() / active.len() as f64 };
        Ok(Self {
            per_class,
            macro_f1,
            tp: counts.iter().map(|c| c.tp_ref).sum(),
            fp: counts.iter().map(|c| c.n_hyp - c.tp_hyp).sum(),
            fn_: counts.iter().map(|c| c.n_ref - c.tp_ref).sum(),
        })
    }
}

fn class_names(n: usize) -> Vec<String> {
    (0..n).map(|c| c.to_string()).collect()
}

fn class_span(a: &EventList, b: &EventList) -> usize {
    a.max_class().max(b.max_class()).map_or(0, |c| c + 1)
}

/// Collar-based F1 of one clip.
pub fn collar_f1(reference: &EventList, hypothesis: &EventList, params: CollarParams) -> ScoreReport {
    let k = class_span(reference, hypothesis);
    let counts = count_events(&[(reference.clone(), hypothesis.clone())], k, Criterion::Collar(params));
    ScoreReport::from_counts(&counts, &class_names(k)).expect("matching lengths")
}

/// Intersection-based F1 of one clip.
pub fn intersection_f1(reference: &EventList, hypothesis: &EventList, dtc: f64, gtc: f64) -> ScoreReport {
    let k = class_span(reference, hypothesis);
    let counts = count_events(&[(reference.clone(), hypothesis.clone())], k, Criterion::Intersection { dtc, gtc });
    ScoreReport::from_counts(&counts, &class_names(k)).expect("matching lengths")
}

/// The three scores reported per system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub psds1_like: ScoreReport,
    pub psds2_like: ScoreReport,
    pub collar: ScoreReport,
}

impl EvaluationReport {
    pub fn compute(
        clips: &[(EventList, EventList)],
        class_names: &[String],
        collar: CollarParams,
    ) -> Result<Self> {
        let k = class_names.len();
        let score = |c: Criterion| ScoreReport::from_counts(&count_events(clips, k, c), class_names);
        Ok(Self {
            psds1_like: score(Criterion::PSDS1_LIKE)?,
            psds2_like: score(Criterion::PSDS2_LIKE)?,
            collar: score(Criterion::Collar(collar))?,
        })
    }

    pub fn summary(&self) -> (f64, f64, f64) {
        (self.psds1_like.macro_f1, self.psds2_like.macro_f1, self.collar.macro_f1)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("report: {}", e)))
    }
}

/// One row of the summary table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub system: String,
    pub psds1_like: f64,
    pub psds2_like: f64,
    pub f1: f64,
}

const TABLE_HEADER: [&str; 4] = ["System", "PSDS1-like", "PSDS2-like", "F1"];

/// Aligned text table with one row per system, six decimals per score.
pub fn render_table(rows: &[(&str, &EvaluationReport)]) -> String {
    let width = rows
        .iter()
        .map(|(n, _)| n.chars().count())
        .chain(std::iter::once(TABLE_HEADER[0].len()))
        .max()
        .unwrap_or(0);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>10}  {:>10}  {:>10}",
        TABLE_HEADER[0], TABLE_HEADER[1], TABLE_HEADER[2], TABLE_HEADER[3]
    );
    for (name, r) in rows {
        let (a, b, c) = r.summary();
        let _ = writeln!(out, "{:<width$}  {:>10.6}  {:>10.6}  {:>10.6}", name, a, b, c);
    }
    out
}

/// Reads back a table produced by [`render_table`]. System names may not
/// contain whitespace runs of two or more.
pub fn parse_table(text: &str) -> Result<Vec<TableRow>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Parse("empty table".into()))?;
    if header.split_whitespace().collect::<Vec<_>>() != TABLE_HEADER {
        return Err(Error::Parse(format!("unexpected table header {:?}", header)));
    }
    lines
        .map(|line| {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() < 4 {
                return Err(Error::Parse(format!("short table row {:?}", line)));
            }
            let n = fields.len();
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Parse(format!("bad score {:?}", s)));
            Ok(TableRow {
                system: fields[..n - 3].join(" "),
                psds1_like: num(fields[n - 3])?,
                psds2_like: num(fields[n - 2])?,
                f1: num(fields[n - 1])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(on: f64, off: f64, c: usize) -> Event {
        Event::new(on, off, c).unwrap()
    }

    fn list(v: &[Event]) -> EventList {
        EventList::new(v.to_vec()).unwrap()
    }

    #[test]
    fn decode_examples() {
        let mf = MedianFilterSpec::uniform(1, 1).unwrap();
        assert!(decode_events(&Tensor::zeros(&[30, 1]), 0.5, &mf, 0.02).unwrap().is_empty());
        let strong = Tensor::from_fn(&[30, 1], |i| if (10..20).contains(&i) { 0.9 } else { 0.1 });
        let ev = decode_events(&strong, 0.5, &mf, 0.02).unwrap();
        assert_eq!(ev.len(), 1);
        assert!((ev.events()[0].onset - 0.20).abs() < 1e-12);
        assert!((ev.events()[0].offset - 0.40).abs() < 1e-12);

        let gap = Tensor::from_fn(&[12, 1], |i| if (2..5).contains(&i) || (6..9).contains(&i) { 1.0 } else { 0.0 });
        assert_eq!(decode_events(&gap, 0.5, &mf, 0.1).unwrap().len(), 2);
        let mf3 = MedianFilterSpec::uniform(1, 3).unwrap();
        let merged = decode_events(&gap, 0.5, &mf3, 0.1).unwrap();
        assert_eq!(merged.len(), 1);
        assert!((merged.events()[0].onset - 0.2).abs() < 1e-12 && (merged.events()[0].offset - 0.9).abs() < 1e-12);
    }

    #[test]
    fn run_reaching_the_last_frame_is_closed() {
        let mf = MedianFilterSpec::uniform(1, 1).unwrap();
        let ev = decode_events(&Tensor::ones(&[5, 1]), 0.5, &mf, 0.5).unwrap();
        assert_eq!(ev.events(), &[ev_at(0.0, 2.5)]);
    }

    fn ev_at(on: f64, off: f64) -> Event {
        Event { onset: on, offset: off, class: 0 }
    }

    #[test]
    fn collar_examples() {
        let r = list(&[ev(1.0, 2.0, 0), ev(3.0, 4.0, 1)]);
        assert_eq!(collar_f1(&r, &r, CollarParams::default()).macro_f1, 1.0);
        assert_eq!(collar_f1(&r, &EventList::default(), CollarParams::default()).macro_f1, 0.0);
        let shifted = list(&[ev(1.3, 2.3, 0)]);
        let single = list(&[ev(1.0, 2.0, 0)]);
        let rep = collar_f1(&single, &shifted, CollarParams::default());
        assert_eq!(rep.per_class[0].f1, 0.0);
        assert_eq!((rep.tp, rep.fp, rep.fn_), (0, 1, 1));
        // long reference: offset collar grows to 20 % of its length
        let long = list(&[ev(0.0, 5.0, 0)]);
        let late_end = list(&[ev(0.1, 5.9, 0)]);
        assert_eq!(collar_f1(&long, &late_end, CollarParams::default()).macro_f1, 1.0);
    }

    #[test]
    fn macro_average_skips_absent_classes() {
        let r = list(&[ev(1.0, 2.0, 0), ev(1.0, 2.0, 2)]);
        let h = list(&[ev(1.0, 2.0, 0)]);
        let rep = collar_f1(&r, &h, CollarParams::default());
        assert_eq!(rep.per_class.len(), 3);
        assert!((rep.macro_f1 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn intersection_examples() {
        let r = list(&[ev(1.0, 3.0, 0)]);
        assert_eq!(intersection_f1(&r, &r, 0.7, 0.7).macro_f1, 1.0);
        let half = list(&[ev(1.0, 2.0, 0)]);
        let rep = intersection_f1(&r, &half, 0.7, 0.7);
        assert_eq!(rep.fn_, 1);
        assert_eq!(rep.per_class[0].counts.tp_hyp, 1);
        assert!((rep.per_class[0].precision - 1.0).abs() < 1e-15 && rep.per_class[0].recall == 0.0);
        let loose = intersection_f1(&r, &half, 0.1, 0.1);
        assert_eq!(loose.macro_f1, 1.0);
    }

    #[test]
    fn encode_then_decode_round_trips() {
        let events = list(&[ev(0.2, 0.6, 0), ev(0.4, 1.0, 1)]);
        let frames = encode_events(&events, 12, 0.1, 2).unwrap();
        let mf = MedianFilterSpec::uniform(2, 1).unwrap();
        let back = decode_events(&frames, 0.5, &mf, 0.1).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in back.events().iter().zip(events.events()) {
            assert!((a.onset - b.onset).abs() < 1e-12 && (a.offset - b.offset).abs() < 1e-12);
        }
        assert!(encode_events(&events, 12, 0.1, 1).is_err());
    }

    #[test]
    fn table_round_trip() {
        let r = list(&[ev(1.0, 2.0, 0)]);
        let h = list(&[ev(1.05, 2.0, 0), ev(5.0, 6.0, 0)]);
        let names = vec!["tone".to_string()];
        let rep = EvaluationReport::compute(&[(r, h)], &names, CollarParams::default()).unwrap();
        let text = render_table(&[("mfdconv cmt", &rep)]);
        let rows = parse_table(&text).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].system, "mfdconv cmt");
        let (a, b, c) = rep.summary();
        assert!((rows[0].psds1_like - a).abs() < 5e-7 && (rows[0].psds2_like - b).abs() < 5e-7 && (rows[0].f1 - c).abs() < 5e-7);
        let back = EvaluationReport::from_json(&rep.to_json().unwrap()).unwrap();
        assert_eq!(back, rep);
        assert!(parse_table("nonsense").is_err());
    }

    #[test]
    fn invalid_events_rejected() {
        assert!(Event::new(2.0, 1.0, 0).is_err());
        assert!(Event::new(1.0, 1.0, 0).is_err());
    }
}
