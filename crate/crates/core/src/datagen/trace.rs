//! Stack-distance trace profiling and synthesis.
//!
//! A trace is profiled into the list of unique accesses (in first-touch
//! order) and the distribution of LRU stack distances, where distance 0 marks
//! a first touch and the most recently used item sits at depth 1. A synthetic
//! trace is then generated by sampling distances from that distribution,
//! restricted to the depths reachable given how many uniques have been
//! emitted so far.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::dense::RngStream;
use crate::error::{Error, Result};

pub type AccessId = u64;

const SUM_TOLERANCE: f64 = 1e-12;

/// Fraction of the target trace length the generator may spend before every
/// unique access has appeared, used for the default first-touch threshold.
pub const WARMUP_FRACTION: f64 = 0.05;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TraceProfile {
    unique: Vec<AccessId>,
    distribution: BTreeMap<usize, f64>,
}

impl TraceProfile {
    pub fn new(unique: Vec<AccessId>, distribution: BTreeMap<usize, f64>) -> Result<Self> {
        let p = Self {
            unique,
            distribution,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((&d, &v)) = self.distribution.iter().find(|(_, &v)| v.is_nan() || v < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "distance {d} has negative probability {v}"
            )));
        }
        if let Some(&max) = self.distribution.keys().next_back() {
            if max > self.unique.len() {
                return Err(Error::InvalidArgument(format!(
                    "distance {max} exceeds the {} unique accesses",
                    self.unique.len()
                )));
            }
        }
        if !self.distribution.is_empty() {
            let total = self.total_mass();
            if (total - 1.0).abs() > SUM_TOLERANCE {
                return Err(Error::InvalidArgument(format!(
                    "distance probabilities sum to {total}, not 1"
                )));
            }
        }
        Ok(())
    }

    pub fn unique(&self) -> &[AccessId] {
        &self.unique
    }

    pub fn distribution(&self) -> &BTreeMap<usize, f64> {
        &self.distribution
    }

    pub fn probability(&self, distance: usize) -> f64 {
        self.distribution.get(&distance).copied().unwrap_or(0.0)
    }

    pub fn total_mass(&self) -> f64 {
        self.distribution.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.unique.is_empty()
    }

    /// Text form: the unique ids space-separated on the first line, then one
    /// `distance probability` pair per line. Probabilities are written in the
    /// shortest form that parses back to the same `f64`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let ids: Vec<String> = self.unique.iter().map(|u| u.to_string()).collect();
        out.push_str(&ids.join(" "));
        out.push('\n');
        for (d, p) in &self.distribution {
            let _ = writeln!(out, "{d} {p}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::read(text.as_bytes(), Path::new("<memory>"))
    }

    pub fn read(reader: impl std::io::Read, source: &Path) -> Result<Self> {
        let parse_err = |line: usize, reason: String| Error::Parse {
            path: source.to_path_buf(),
            line,
            reason,
        };
        let mut lines = BufReader::new(reader).lines();
        let first = match lines.next() {
            Some(l) => l.map_err(|e| Error::io(source, e))?,
            None => return Err(parse_err(1, "missing unique-access line".into())),
        };
        let unique = first
            .split_whitespace()
            .map(|t| t.parse::<AccessId>().map_err(|e| parse_err(1, format!("bad id {t:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let mut distribution = BTreeMap::new();
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let line = line.map_err(|e| Error::io(source, e))?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(d), Some(p), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(parse_err(line_no, format!("expected `distance probability`, got {line:?}")));
            };
            let d: usize = d.parse().map_err(|e| parse_err(line_no, format!("bad distance: {e}")))?;
            let p: f64 = p.parse().map_err(|e| parse_err(line_no, format!("bad probability: {e}")))?;
            if distribution.insert(d, p).is_some() {
                return Err(parse_err(line_no, format!("distance {d} listed twice")));
            }
        }
        Self::new(unique, distribution)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_text().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(f, path)
    }
}

/// Fenwick tree counting marked positions.
struct Fenwick {
    tree: Vec<i64>,
}

impl Fenwick {
    fn new(n: usize) -> Self {
        Self { tree: vec![0; n + 1] }
    }

    fn add(&mut self, pos: usize, delta: i64) {
        let mut i = pos + 1;
        while i < self.tree.len() {
            self.tree[i] += delta;
            i += i & i.wrapping_neg();
        }
    }

    /// Marks in `[0, pos)`.
    fn prefix(&self, pos: usize) -> i64 {
        let mut i = pos;
        let mut s = 0;
        while i > 0 {
            s += self.tree[i];
            i &= i - 1;
        }
        s
    }
}

/// LRU stack distance of every access: 0 for a first touch, otherwise the
/// 1-based depth of the item in the recency stack just before the access.
///
/// Runs in `O(n log n)`: position `t` is marked while it is the latest access
/// of some item, so the depth of a re-access equals the number of marks
/// between its previous access and now, plus one.
pub fn stack_distances(trace: &[AccessId]) -> Vec<usize> {
    let mut marks = Fenwick::new(trace.len());
    let mut last: HashMap<AccessId, usize> = HashMap::new();
    let mut out = Vec::with_capacity(trace.len());
    for (i, &a) in trace.iter().enumerate() {
        let d = match last.insert(a, i) {
            Some(t) => {
                let between = marks.prefix(i) - marks.prefix(t + 1);
                marks.add(t, -1);
                between as usize + 1
            }
            None => 0,
        };
        marks.add(i, 1);
        out.push(d);
    }
    out
}

/// Unique accesses in first-touch order plus the stack-distance distribution.
pub fn profile_trace(trace: &[AccessId]) -> TraceProfile {
    let distances = stack_distances(trace);
    let mut unique = Vec::new();
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for (&a, &d) in trace.iter().zip(&distances) {
        if d == 0 {
            unique.push(a);
        }
        *counts.entry(d).or_default() += 1;
    }
    let n = trace.len() as f64;
    let distribution = counts.into_iter().map(|(d, c)| (d, c as f64 / n)).collect();
    TraceProfile {
        unique,
        distribution,
    }
}

/// Raises the first-touch probability to at least `min_first_touch` and
/// rescales every other distance by `(1 − p₀')/(1 − p₀)`.
pub fn adjust_distribution(profile: &TraceProfile, min_first_touch: f64) -> Result<TraceProfile> {
    if !(0.0..=1.0).contains(&min_first_touch) {
        return Err(Error::InvalidArgument(format!(
            "first-touch threshold must lie in [0, 1], got {min_first_touch}"
        )));
    }
    let p0 = profile.probability(0);
    if min_first_touch <= p0 || p0 >= 1.0 {
        return Ok(profile.clone());
    }
    let scale = (1.0 - min_first_touch) / (1.0 - p0);
    let mut distribution: BTreeMap<usize, f64> = profile
        .distribution
        .iter()
        .filter(|(&d, _)| d != 0)
        .map(|(&d, &p)| (d, p * scale))
        .collect();
    distribution.insert(0, min_first_touch);
    Ok(TraceProfile {
        unique: profile.unique.clone(),
        distribution,
    })
}

/// Threshold that lets a generator of `target_length` accesses reach every
/// unique within roughly [`WARMUP_FRACTION`] of the trace.
pub fn default_first_touch_threshold(profile: &TraceProfile, target_length: usize) -> f64 {
    if target_length == 0 {
        return 0.0;
    }
    (profile.unique.len() as f64 / (WARMUP_FRACTION * target_length as f64)).min(1.0)
}

/// Streaming synthetic trace generator.
#[derive(Clone, Debug)]
pub struct TraceGenerator {
    unseen: VecDeque<AccessId>,
    /// Emitted uniques, most recent last.
    recency: Vec<AccessId>,
    distances: Vec<usize>,
    cumulative: Vec<f64>,
    rng: RngStream,
}

impl TraceGenerator {
    pub fn new(profile: &TraceProfile, rng: RngStream) -> Result<Self> {
        profile.validate()?;
        let mut distances = Vec::with_capacity(profile.distribution.len());
        let mut cumulative = Vec::with_capacity(profile.distribution.len());
        let mut acc = 0.0;
        for (&d, &p) in &profile.distribution {
            acc += p;
            distances.push(d);
            cumulative.push(acc);
        }
        Ok(Self {
            unseen: profile.unique.iter().copied().collect(),
            recency: Vec::with_capacity(profile.unique.len()),
            distances,
            cumulative,
            rng,
        })
    }

    /// Number of distinct accesses emitted so far.
    pub fn seen(&self) -> usize {
        self.recency.len()
    }

    fn sample_distance(&mut self) -> usize {
        let s = self.recency.len();
        let hi = self.distances.partition_point(|&d| d <= s);
        let exclude_first_touch = self.unseen.is_empty() && self.distances.first() == Some(&0);
        let lo = usize::from(exclude_first_touch);
        let upper = if hi > 0 { self.cumulative[hi - 1] } else { 0.0 };
        let lower = if lo > 0 && hi > 0 { self.cumulative[0] } else { 0.0 };
        if hi <= lo || upper - lower <= 0.0 {
            // Nothing reachable carries mass.
            return if self.unseen.is_empty() {
                self.rng.in_range(1, s)
            } else {
                0
            };
        }
        let r = lower + self.rng.next_f64() * (upper - lower);
        let i = lo + self.cumulative[lo..hi].partition_point(|&c| c <= r);
        self.distances[i.min(hi - 1)]
    }

    pub fn next_access(&mut self) -> AccessId {
        let d = self.sample_distance();
        let a = if d == 0 {
            self.unseen.pop_front().expect("first touch with uniques left")
        } else {
            self.recency.remove(self.recency.len() - d)
        };
        self.recency.push(a);
        a
    }
}

/// Synthetic trace of `length` accesses drawn from `profile`.
pub fn generate_trace(profile: &TraceProfile, length: usize, rng: RngStream) -> Result<Vec<AccessId>> {
    if length == 0 {
        return Ok(Vec::new());
    }
    if profile.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot generate a trace from a profile without unique accesses".into(),
        ));
    }
    let mut g = TraceGenerator::new(profile, rng)?;
    Ok((0..length).map(|_| g.next_access()).collect())
}

/// Fraction of accesses that hit an LRU cache holding `capacity` items.
pub fn lru_hit_rate(trace: &[AccessId], capacity: usize) -> f64 {
    if trace.is_empty() || capacity == 0 {
        return 0.0;
    }
    let mut stamp: HashMap<AccessId, u64> = HashMap::new();
    let mut by_age: BTreeMap<u64, AccessId> = BTreeMap::new();
    let mut hits = 0usize;
    for (tick, &a) in trace.iter().enumerate() {
        let tick = tick as u64;
        if let Some(old) = stamp.insert(a, tick) {
            by_age.remove(&old);
            hits += 1;
        } else if stamp.len() > capacity {
            let (_, victim) = by_age.pop_first().expect("cache is non-empty");
            stamp.remove(&victim);
        }
        by_age.insert(tick, a);
    }
    hits as f64 / trace.len() as f64
}

/// `½ Σ |p(d) − q(d)|` over the union of supports.
pub fn total_variation(p: &TraceProfile, q: &TraceProfile) -> f64 {
    let mut keys: Vec<usize> = p.distribution.keys().chain(q.distribution.keys()).copied().collect();
    keys.sort_unstable();
    keys.dedup();
    0.5 * keys
        .into_iter()
        .map(|d| (p.probability(d) - q.probability(d)).abs())
        .sum::<f64>()
}

/// Profile files for each table live at `<dir>/table_<i>.profile`.
pub fn profile_path(dir: &Path, table: usize) -> PathBuf {
    dir.join(format!("table_{table}.profile"))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Literal LRU-stack execution, used as the reference for the Fenwick
    /// implementation.
    fn profile_by_stack(trace: &[AccessId]) -> TraceProfile {
        let mut stack: Vec<AccessId> = Vec::new();
        let mut unique = Vec::new();
        let mut dist: BTreeMap<usize, f64> = BTreeMap::new();
        for &a in trace {
            let d = match stack.iter().rev().position(|&x| x == a) {
                Some(p) => {
                    stack.remove(stack.len() - 1 - p);
                    p + 1
                }
                None => {
                    unique.push(a);
                    0
                }
            };
            *dist.entry(d).or_default() += 1.0 / trace.len() as f64;
            stack.push(a);
        }
        TraceProfile {
            unique,
            distribution: dist,
        }
    }

    const A: AccessId = 10;
    const B: AccessId = 20;

    #[test]
    fn hand_traces() {
        let p = profile_trace(&[A, A, A]);
        assert_eq!(p.unique(), &[A]);
        assert!((p.probability(0) - 1.0 / 3.0).abs() < 1e-12);
        assert!((p.probability(1) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(p.distribution().len(), 2);

        let p = profile_trace(&[A, B, A]);
        assert_eq!(p.unique(), &[A, B]);
        assert!((p.probability(0) - 2.0 / 3.0).abs() < 1e-12);
        assert!((p.probability(2) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(p.distribution().len(), 2);

        let p = profile_trace(&[]);
        assert!(p.unique().is_empty());
        assert!(p.distribution().is_empty());
    }

    #[test]
    fn fenwick_matches_literal_stack() {
        let mut rng = RngStream::new(1);
        for n in [1usize, 2, 10, 500] {
            let tr: Vec<AccessId> = (0..n).map(|_| rng.below(17) as AccessId).collect();
            let fast = profile_trace(&tr);
            let slow = profile_by_stack(&tr);
            assert_eq!(fast.unique(), slow.unique());
            assert_eq!(
                fast.distribution().keys().collect::<Vec<_>>(),
                slow.distribution().keys().collect::<Vec<_>>()
            );
            for (d, p) in slow.distribution() {
                assert!((fast.probability(*d) - p).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn first_emission_is_first_unique() {
        let p = TraceProfile::new(vec![7, 8, 9], [(0, 0.2), (1, 0.3), (3, 0.5)].into()).unwrap();
        for seed in 0..5 {
            let t = generate_trace(&p, 1, RngStream::new(seed)).unwrap();
            assert_eq!(t, vec![7]);
        }
        let p = TraceProfile::new(vec![7], [(1, 1.0)].into()).unwrap();
        assert_eq!(generate_trace(&p, 1, RngStream::new(0)).unwrap(), vec![7]);
    }

    #[test]
    fn single_unique_repeats() {
        let eps = 1e-3;
        let p = TraceProfile::new(vec![A], [(0, eps), (1, 1.0 - eps)].into()).unwrap();
        let t = generate_trace(&p, 50, RngStream::new(3)).unwrap();
        assert!(t.iter().all(|&x| x == A));
    }

    #[test]
    fn empty_profile_cannot_generate() {
        let p = TraceProfile::default();
        assert!(generate_trace(&p, 3, RngStream::new(0)).is_err());
        assert!(generate_trace(&p, 0, RngStream::new(0)).unwrap().is_empty());
    }

    #[test]
    fn exhausted_uniques_leave_the_support() {
        // Every draw asks for a first touch; once both are used the remaining
        // draws fall back to re-references.
        let p = TraceProfile::new(vec![1, 2], [(0, 1.0)].into()).unwrap();
        let t = generate_trace(&p, 20, RngStream::new(4)).unwrap();
        assert_eq!(&t[..2], &[1, 2]);
        assert!(t.iter().all(|&x| x == 1 || x == 2));

        let p = TraceProfile::new(vec![1, 2, 3], [(0, 0.9), (2, 0.1)].into()).unwrap();
        let t = generate_trace(&p, 200, RngStream::new(5)).unwrap();
        let prof = profile_trace(&t);
        assert_eq!(prof.unique(), &[1, 2, 3]);
        assert!(prof.distribution().keys().all(|&d| d == 0 || d == 2));
    }

    #[test]
    fn generated_distances_follow_the_samples() {
        let tr: Vec<AccessId> = {
            let mut rng = RngStream::new(6);
            (0..2000).map(|_| rng.below(30) as AccessId).collect()
        };
        let p = profile_trace(&tr);
        let g = generate_trace(&p, 2000, RngStream::new(7)).unwrap();
        let q = profile_trace(&g);
        assert!(q.unique().len() <= p.unique().len());
        assert!(q.unique().iter().all(|u| p.unique().contains(u)));
        assert_eq!(g.len(), 2000);
    }

    #[test]
    fn adjust_examples() {
        let p = TraceProfile::new(vec![1], [(0, 0.1), (1, 0.9)].into()).unwrap();
        assert_eq!(adjust_distribution(&p, 0.05).unwrap(), p);
        assert_eq!(adjust_distribution(&p, 0.1).unwrap(), p);
        let q = adjust_distribution(&p, 0.2).unwrap();
        assert!((q.probability(0) - 0.2).abs() < 1e-15);
        assert!((q.probability(1) - 0.8).abs() < 1e-15);
        assert!((q.total_mass() - 1.0).abs() < 1e-12);
        assert!(adjust_distribution(&p, 1.5).is_err());
        assert!(adjust_distribution(&p, -0.1).is_err());

        let all_first = TraceProfile::new(vec![1, 2], [(0, 1.0)].into()).unwrap();
        assert_eq!(adjust_distribution(&all_first, 0.5).unwrap(), all_first);
    }

    #[test]
    fn lru_examples() {
        assert_eq!(lru_hit_rate(&[A, A, A, A], 1), 0.75);
        assert_eq!(lru_hit_rate(&[A, B, A], 0), 0.0);
        assert_eq!(lru_hit_rate(&[A, B, A], 1), 0.0);
        assert_eq!(lru_hit_rate(&[A, B, A], 2), 1.0 / 3.0);
        let mut rng = RngStream::new(8);
        let tr: Vec<AccessId> = (0..1000).map(|_| rng.below(40) as AccessId).collect();
        let uniques = profile_trace(&tr).unique().len();
        let expected = (tr.len() - uniques) as f64 / tr.len() as f64;
        assert_eq!(lru_hit_rate(&tr, uniques), expected);
        assert_eq!(lru_hit_rate(&tr, uniques + 10), expected);
    }

    #[test]
    fn lru_agrees_with_stack_distances() {
        let mut rng = RngStream::new(9);
        let tr: Vec<AccessId> = (0..3000).map(|_| rng.below(64) as AccessId).collect();
        let d = stack_distances(&tr);
        for cap in [1usize, 4, 16, 50] {
            let hits = d.iter().filter(|&&x| x >= 1 && x <= cap).count();
            assert_eq!(lru_hit_rate(&tr, cap), hits as f64 / tr.len() as f64);
        }
    }

    #[test]
    fn text_round_trip_is_exact() {
        let mut rng = RngStream::new(10);
        let tr: Vec<AccessId> = (0..777).map(|_| rng.below(1 << 40) as AccessId % 50).collect();
        let p = profile_trace(&tr);
        let back = TraceProfile::from_text(&p.to_text()).unwrap();
        assert_eq!(back, p);
        let empty = TraceProfile::default();
        assert_eq!(TraceProfile::from_text(&empty.to_text()).unwrap(), empty);
    }

    #[test]
    fn malformed_text_reports_line() {
        let err = TraceProfile::from_text("1 2\n0 0.5\n1 oops\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        assert!(TraceProfile::from_text("1\n0 0.5\n").is_err());
        assert!(TraceProfile::from_text("1\n0 0.5\n3 0.5\n").is_err());
    }
}
