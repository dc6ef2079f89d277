//! Check-in and friendship data: parsing, validation, scoping to a city and
//! the global time histograms used as prediction features.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use chrono::{DateTime, Datelike, NaiveDateTime, Timelike, Utc};
use chrono_tz::Tz;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{haversine, GeoPoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub u64);

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl FromStr for UserId {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        s.trim().parse().map(UserId)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckIn {
    pub user: UserId,
    pub time: DateTime<Utc>,
    pub point: GeoPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl BBox {
    pub fn new(lat_min: f64, lat_max: f64, lon_min: f64, lon_max: f64) -> Result<Self> {
        let b = BBox {
            lat_min,
            lat_max,
            lon_min,
            lon_max,
        };
        if !(lat_min < lat_max && lon_min < lon_max) {
            return Err(Error::contract(format!("degenerate bbox {b:?}")));
        }
        let corners = [
            GeoPoint { lat: lat_min, lon: lon_min },
            GeoPoint { lat: lat_max, lon: lon_max },
        ];
        if corners.iter().any(|p| !p.is_valid()) {
            return Err(Error::contract(format!("bbox out of range {b:?}")));
        }
        Ok(b)
    }

    pub fn contains(&self, p: GeoPoint) -> bool {
        (self.lat_min..=self.lat_max).contains(&p.lat) && (self.lon_min..=self.lon_max).contains(&p.lon)
    }

    pub fn contains_bbox(&self, other: &BBox) -> bool {
        self.lat_min <= other.lat_min
            && other.lat_max <= self.lat_max
            && self.lon_min <= other.lon_min
            && other.lon_max <= self.lon_max
    }

    pub fn intersects(&self, other: &BBox) -> bool {
        self.lat_min <= other.lat_max
            && other.lat_min <= self.lat_max
            && self.lon_min <= other.lon_max
            && other.lon_min <= self.lon_max
    }

    /// Corner-to-corner great-circle length.
    pub fn diagonal_m(&self) -> f64 {
        haversine(
            GeoPoint { lat: self.lat_min, lon: self.lon_min },
            GeoPoint { lat: self.lat_max, lon: self.lon_max },
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CityScope {
    pub name: String,
    pub bbox: BBox,
    pub timezone: Tz,
}

impl CityScope {
    /// Local hour and weekday of an instant in the city's timezone.
    pub fn local_slot(&self, t: DateTime<Utc>) -> TimeSlot {
        let local = t.with_timezone(&self.timezone);
        TimeSlot {
            hour: local.hour() as u8,
            weekday: local.weekday().num_days_from_monday() as u8,
        }
    }
}

/// An hour of a week: `weekday` 0 = Monday.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TimeSlot {
    pub hour: u8,
    pub weekday: u8,
}

impl TimeSlot {
    pub fn hour_of_week(&self) -> usize {
        self.weekday as usize * 24 + self.hour as usize
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParseSummary {
    pub lines: usize,
    pub malformed: usize,
    pub out_of_scope: usize,
}

fn parse_time(s: &str) -> Option<DateTime<Utc>> {
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.with_timezone(&Utc));
    }
    ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .map(|n| n.and_utc())
}

fn parse_checkin_line(line: &str) -> Option<CheckIn> {
    let mut fields = line.split('\t');
    let user = fields.next()?.parse().ok()?;
    let time = parse_time(fields.next()?.trim())?;
    let lat: f64 = fields.next()?.trim().parse().ok()?;
    let lon: f64 = fields.next()?.trim().parse().ok()?;
    if fields.next().is_some() {
        return None;
    }
    let point = GeoPoint::new(lat, lon).ok()?;
    Some(CheckIn { user, time, point })
}

/// Parses `uid<TAB>time<TAB>lat<TAB>lon` lines, keeping check-ins inside
/// the scope's bbox. Output is ordered by user, then time; equal
/// timestamps keep input order. Malformed lines are skipped and counted,
/// but more than half malformed is treated as the wrong file.
pub fn parse_checkins<R: BufRead>(reader: R, scope: &CityScope) -> Result<(Vec<CheckIn>, ParseSummary)> {
    let mut summary = ParseSummary::default();
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        summary.lines += 1;
        match parse_checkin_line(&line) {
            Some(c) if scope.bbox.contains(c.point) => out.push(c),
            Some(_) => summary.out_of_scope += 1,
            None => summary.malformed += 1,
        }
    }
    if summary.malformed * 2 > summary.lines {
        return Err(Error::Format(format!(
            "{} of {} check-in lines are malformed",
            summary.malformed, summary.lines
        )));
    }
    out.sort_by_key(|c| (c.user, c.time));
    Ok((out, summary))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeMode {
    /// Lines are follow relations; friendship needs both directions.
    Directed,
    Undirected,
}

impl FromStr for EdgeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "directed" => Ok(EdgeMode::Directed),
            "undirected" => Ok(EdgeMode::Undirected),
            other => Err(Error::config("edges.mode", format!("unknown mode `{other}`"))),
        }
    }
}

/// Undirected, unweighted friendship graph without self-loops.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SocialGraph {
    adj: BTreeMap<UserId, BTreeSet<UserId>>,
}

impl SocialGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, u: UserId) {
        self.adj.entry(u).or_default();
    }

    /// Adds `{a, b}`; self-loops are ignored. Returns whether the edge is new.
    pub fn add_edge(&mut self, a: UserId, b: UserId) -> bool {
        if a == b {
            return false;
        }
        let fresh = self.adj.entry(a).or_default().insert(b);
        self.adj.entry(b).or_default().insert(a);
        fresh
    }

    pub fn contains(&self, u: UserId) -> bool {
        self.adj.contains_key(&u)
    }

    pub fn has_edge(&self, a: UserId, b: UserId) -> bool {
        self.adj.get(&a).is_some_and(|n| n.contains(&b))
    }

    pub fn friends(&self, u: UserId) -> Result<&BTreeSet<UserId>> {
        self.adj.get(&u).ok_or(Error::UnknownUser(u))
    }

    pub fn nodes(&self) -> impl Iterator<Item = UserId> + '_ {
        self.adj.keys().copied()
    }

    pub fn n_nodes(&self) -> usize {
        self.adj.len()
    }

    pub fn n_edges(&self) -> usize {
        self.adj.values().map(BTreeSet::len).sum::<usize>() / 2
    }

    /// Each edge once, as `(smaller, larger)`, in ascending order.
    pub fn edges(&self) -> impl Iterator<Item = (UserId, UserId)> + '_ {
        self.adj
            .iter()
            .flat_map(|(&a, ns)| ns.range(a..).map(move |&b| (a, b)))
            .filter(|(a, b)| a != b)
    }
}

/// Parses two-column id lines. Returns the graph and the number of
/// malformed lines skipped.
pub fn parse_edges<R: BufRead>(reader: R, mode: EdgeMode) -> Result<(SocialGraph, usize)> {
    let mut graph = SocialGraph::new();
    let mut malformed = 0;
    let mut follows: HashSet<(UserId, UserId)> = HashSet::new();
    for line in reader.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split(|c: char| c == '\t' || c == ' ').filter(|s| !s.is_empty());
        let ids = (it.next().map(str::parse), it.next().map(str::parse), it.next());
        let (a, b) = match ids {
            (Some(Ok(a)), Some(Ok(b)), None) => (a, b),
            _ => {
                malformed += 1;
                continue;
            }
        };
        if a == b {
            continue;
        }
        match mode {
            EdgeMode::Undirected => {
                graph.add_edge(a, b);
            }
            EdgeMode::Directed => {
                graph.add_node(a);
                graph.add_node(b);
                if follows.contains(&(b, a)) {
                    graph.add_edge(a, b);
                }
                follows.insert((a, b));
            }
        }
    }
    Ok((graph, malformed))
}

/// The city-scoped check-ins, grouped per user and sorted by time.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub scope: CityScope,
    by_user: BTreeMap<UserId, Vec<CheckIn>>,
}

impl Corpus {
    pub fn new(scope: CityScope, checkins: impl IntoIterator<Item = CheckIn>) -> Self {
        let mut by_user: BTreeMap<UserId, Vec<CheckIn>> = BTreeMap::new();
        for c in checkins {
            by_user.entry(c.user).or_default().push(c);
        }
        for seq in by_user.values_mut() {
            seq.sort_by_key(|c| c.time);
        }
        Corpus { scope, by_user }
    }

    /// `C(u)`: the user's check-ins in chronological order.
    pub fn checkins_of(&self, u: UserId) -> Result<&[CheckIn]> {
        self.by_user.get(&u).map(Vec::as_slice).ok_or(Error::UnknownUser(u))
    }

    /// Number of in-scope check-ins; zero for users without any.
    pub fn count_of(&self, u: UserId) -> usize {
        self.by_user.get(&u).map_or(0, Vec::len)
    }

    pub fn users(&self) -> impl Iterator<Item = UserId> + '_ {
        self.by_user.keys().copied()
    }

    pub fn n_users(&self) -> usize {
        self.by_user.len()
    }

    pub fn n_checkins(&self) -> usize {
        self.by_user.values().map(Vec::len).sum()
    }

    pub fn all(&self) -> impl Iterator<Item = &CheckIn> + '_ {
        self.by_user.values().flatten()
    }

    pub fn points_of(&self, u: UserId) -> impl Iterator<Item = GeoPoint> + '_ {
        self.by_user.get(&u).into_iter().flatten().map(|c| c.point)
    }
}

/// Active-user thresholds. `max` of `None` disables the upper bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActivityFilter {
    pub min: usize,
    pub max: Option<usize>,
}

impl Default for ActivityFilter {
    fn default() -> Self {
        ActivityFilter {
            min: 100,
            max: Some(2000),
        }
    }
}

impl ActivityFilter {
    pub fn new(min: usize, max: Option<usize>) -> Result<Self> {
        if min < 1 {
            return Err(Error::config("filters.min_checkins", "must be at least 1"));
        }
        if max.is_some_and(|m| m <= min) {
            return Err(Error::config("filters.max_checkins", "must exceed min_checkins"));
        }
        Ok(ActivityFilter { min, max })
    }

    pub fn accepts(&self, count: usize) -> bool {
        count >= self.min && self.max.map_or(true, |m| count <= m)
    }
}

pub fn select_active_users(corpus: &Corpus, filter: &ActivityFilter) -> BTreeSet<UserId> {
    corpus
        .by_user
        .iter()
        .filter(|(_, seq)| filter.accepts(seq.len()))
        .map(|(&u, _)| u)
        .collect()
}

/// Check-in counts per local hour and per weekday (Monday first).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TimeHistograms {
    pub by_hour: [u64; 24],
    pub by_day: [u64; 7],
}

impl TimeHistograms {
    pub fn total(&self) -> u64 {
        self.by_hour.iter().sum()
    }

    pub fn add(&mut self, slot: TimeSlot) {
        self.by_hour[slot.hour as usize] += 1;
        self.by_day[slot.weekday as usize] += 1;
    }
}

pub fn time_histograms<'a>(checkins: impl IntoIterator<Item = &'a CheckIn>, scope: &CityScope) -> TimeHistograms {
    let mut h = TimeHistograms::default();
    for c in checkins {
        h.add(scope.local_slot(c.time));
    }
    h
}
