//! Geographic primitives: great-circle distance, centroid-linkage
//! agglomerative clustering of check-in locations, and prediction grid cells.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::hash::{BuildHasherDefault, Hasher};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Default merge cutoff between cluster centroids, in meters.
pub const DEFAULT_CLUSTER_CUTOFF_M: f64 = 500.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        let p = GeoPoint { lat, lon };
        if p.is_valid() {
            Ok(p)
        } else {
            Err(Error::contract(format!("invalid coordinates ({lat}, {lon})")))
        }
    }

    pub fn is_valid(&self) -> bool {
        self.lat.is_finite()
            && self.lon.is_finite()
            && (-90.0..=90.0).contains(&self.lat)
            && (-180.0..=180.0).contains(&self.lon)
    }
}

impl fmt::Display for GeoPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.6}, {:.6})", self.lat, self.lon)
    }
}

/// Point in radians with its latitude cosine cached, so repeated distance
/// evaluations skip the trig for the fixed endpoint.
#[derive(Debug, Clone, Copy)]
struct RadPoint {
    lat: f64,
    lon: f64,
    cos_lat: f64,
}

impl From<GeoPoint> for RadPoint {
    fn from(p: GeoPoint) -> Self {
        let lat = p.lat.to_radians();
        RadPoint {
            lat,
            lon: p.lon.to_radians(),
            cos_lat: lat.cos(),
        }
    }
}

#[inline]
fn rad_distance(a: &RadPoint, b: &RadPoint) -> f64 {
    let s_lat = ((b.lat - a.lat) * 0.5).sin();
    let s_lon = ((b.lon - a.lon) * 0.5).sin();
    let h = s_lat * s_lat + a.cos_lat * b.cos_lat * s_lon * s_lon;
    2.0 * EARTH_RADIUS_M * h.min(1.0).sqrt().asin()
}

/// Great-circle distance in meters.
pub fn haversine(a: GeoPoint, b: GeoPoint) -> f64 {
    rad_distance(&a.into(), &b.into())
}

/// Who a movement profile summarizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OwnerKind {
    Community,
    User,
    FriendSet,
    VirtualCommunity,
    RandomUserSet,
}

impl OwnerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            OwnerKind::Community => "community",
            OwnerKind::User => "user",
            OwnerKind::FriendSet => "friend-set",
            OwnerKind::VirtualCommunity => "virtual-community",
            OwnerKind::RandomUserSet => "random-user-set",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "community" => OwnerKind::Community,
            "user" => OwnerKind::User,
            "friend-set" => OwnerKind::FriendSet,
            "virtual-community" => OwnerKind::VirtualCommunity,
            "random-user-set" => OwnerKind::RandomUserSet,
            _ => return None,
        })
    }
}

/// Frequent movement areas of a member set: one centroid per cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MovementProfile {
    pub owner_kind: OwnerKind,
    pub centroids: Vec<GeoPoint>,
    pub member_counts: Vec<usize>,
}

impl MovementProfile {
    pub fn empty(owner_kind: OwnerKind) -> Self {
        MovementProfile {
            owner_kind,
            centroids: Vec::new(),
            member_counts: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn n_areas(&self) -> usize {
        self.centroids.len()
    }

    pub fn n_points(&self) -> usize {
        self.member_counts.iter().sum()
    }

    /// Shortest distance from `loc` to any centroid; `+inf` when empty.
    pub fn distance_to(&self, loc: GeoPoint) -> f64 {
        let l = RadPoint::from(loc);
        self.centroids
            .iter()
            .map(|c| rad_distance(&l, &RadPoint::from(*c)))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Result of [`agglomerative_cluster`]. Clusters are ordered by their
/// smallest member index; `labels[p]` is the cluster of input point `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct Clusters {
    pub labels: Vec<usize>,
    pub centroids: Vec<GeoPoint>,
    pub member_counts: Vec<usize>,
}

impl Clusters {
    pub fn into_profile(self, owner_kind: OwnerKind) -> MovementProfile {
        MovementProfile {
            owner_kind,
            centroids: self.centroids,
            member_counts: self.member_counts,
        }
    }
}

fn mean_point(points: &[GeoPoint], members: &[usize]) -> GeoPoint {
    let (mut lat, mut lon) = (0.0, 0.0);
    for &m in members {
        lat += points[m].lat;
        lon += points[m].lon;
    }
    let n = members.len() as f64;
    GeoPoint {
        lat: lat / n,
        lon: lon / n,
    }
}

fn merge_sorted(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if a[i] < b[j] {
            out.push(a[i]);
            i += 1;
        } else {
            out.push(b[j]);
            j += 1;
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

/// Multiplicative hash for small integer cell keys.
#[derive(Default)]
struct CellHasher(u64);

impl Hasher for CellHasher {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.write_u64(b as u64);
        }
    }

    fn write_u64(&mut self, v: u64) {
        self.0 = (self.0.rotate_left(5) ^ v).wrapping_mul(0x51_7c_c1_b7_27_22_0a_95);
    }

    fn write_i64(&mut self, v: i64) {
        self.write_u64(v as u64);
    }
}

/// Uniform bucketing of centroids into cells at least one cutoff wide, so
/// every pair closer than the cutoff lies in adjacent cells.
struct Buckets {
    cell_lat: f64,
    cell_lon: f64,
    single: bool,
    cells: HashMap<(i64, i64), Vec<usize>, BuildHasherDefault<CellHasher>>,
}

impl Buckets {
    fn new(points: &[GeoPoint], cutoff: f64) -> Self {
        let lat_deg = (cutoff / EARTH_RADIUS_M).to_degrees() * 1.01;
        let max_abs_lat = points.iter().map(|p| p.lat.abs()).fold(0.0, f64::max);
        let wraps = points.iter().any(|p| p.lon.abs() > 179.0);
        let single = !lat_deg.is_finite() || lat_deg > 0.5 || max_abs_lat > 80.0 || wraps;
        let cell_lon = lat_deg / max_abs_lat.to_radians().cos();
        Buckets {
            cell_lat: lat_deg,
            cell_lon,
            single,
            cells: HashMap::default(),
        }
    }

    fn key(&self, p: GeoPoint) -> (i64, i64) {
        if self.single {
            (0, 0)
        } else {
            (
                (p.lat / self.cell_lat).floor() as i64,
                (p.lon / self.cell_lon).floor() as i64,
            )
        }
    }

    fn insert(&mut self, id: usize, p: GeoPoint) {
        let v = self.cells.entry(self.key(p)).or_default();
        let pos = v.partition_point(|&x| x < id);
        v.insert(pos, id);
    }

    fn remove(&mut self, id: usize, p: GeoPoint) {
        let key = self.key(p);
        if let Some(v) = self.cells.get_mut(&key) {
            if let Ok(pos) = v.binary_search(&id) {
                v.remove(pos);
            }
            if v.is_empty() {
                self.cells.remove(&key);
            }
        }
    }

    /// Calls `f` on every id above `above` in the cells around `p`.
    fn for_each_near(&self, p: GeoPoint, above: Option<usize>, mut f: impl FnMut(usize)) {
        let (ci, cj) = self.key(p);
        let span = if self.single { 0 } else { 1 };
        for di in -span..=span {
            for dj in -span..=span {
                if let Some(v) = self.cells.get(&(ci + di, cj + dj)) {
                    let start = above.map_or(0, |a| v.partition_point(|&x| x <= a));
                    v[start..].iter().for_each(|&id| f(id));
                }
            }
        }
    }
}

#[inline]
fn better(d: f64, k: usize, cur: Option<(f64, usize)>) -> bool {
    match cur {
        None => true,
        Some((bd, bk)) => d < bd || (d == bd && k < bk),
    }
}

fn unit_vector(p: GeoPoint) -> [f64; 3] {
    let (lat, lon) = (p.lat.to_radians(), p.lon.to_radians());
    [lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin()]
}

/// Heap key ordering candidate pairs by distance, then by cluster ids.
#[derive(Clone, Copy, PartialEq)]
struct PairKey(f64, usize, usize);

impl Eq for PairKey {}

impl PartialOrd for PairKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for PairKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0
            .total_cmp(&other.0)
            .then(self.1.cmp(&other.1))
            .then(self.2.cmp(&other.2))
    }
}

struct Agglomerator<'a> {
    points: &'a [GeoPoint],
    cutoff: f64,
    members: Vec<Vec<usize>>,
    centroid: Vec<GeoPoint>,
    rad: Vec<RadPoint>,
    /// Unit vectors of the centroids, for cheap chord lower bounds.
    xyz: Vec<[f64; 3]>,
    is_alive: Vec<bool>,
    /// Nearest alive cluster with a larger id within the cutoff.
    nn: Vec<Option<(f64, usize)>>,
    /// Clusters whose cached neighbour is the indexed cluster.
    pointed_by: Vec<Vec<usize>>,
    heap: BinaryHeap<Reverse<PairKey>>,
    buckets: Buckets,
}

impl<'a> Agglomerator<'a> {
    fn new(points: &'a [GeoPoint], cutoff: f64) -> Self {
        let n = points.len();
        let mut buckets = Buckets::new(points, cutoff);
        for (i, p) in points.iter().enumerate() {
            buckets.insert(i, *p);
        }
        let mut a = Agglomerator {
            points,
            cutoff,
            members: (0..n).map(|i| vec![i]).collect(),
            centroid: points.to_vec(),
            rad: points.iter().map(|&p| p.into()).collect(),
            xyz: points.iter().map(|&p| unit_vector(p)).collect(),
            is_alive: vec![true; n],
            nn: vec![None; n],
            pointed_by: vec![Vec::new(); n],
            heap: BinaryHeap::new(),
            buckets,
        };
        for i in 0..n {
            let found = a.search(i);
            a.set_nn(i, found);
        }
        a
    }

    fn set_nn(&mut self, c: usize, value: Option<(f64, usize)>) {
        if let Some((_, old)) = self.nn[c] {
            let v = &mut self.pointed_by[old];
            if let Some(pos) = v.iter().position(|&x| x == c) {
                v.swap_remove(pos);
            }
        }
        self.nn[c] = value;
        if let Some((d, k)) = value {
            self.pointed_by[k].push(c);
            self.heap.push(Reverse(PairKey(d, c, k)));
        }
    }

    /// Chord length between centroids; never exceeds the arc distance.
    fn chord_lower_bound(&self, a: usize, b: usize) -> f64 {
        let (p, q) = (self.xyz[a], self.xyz[b]);
        let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
        EARTH_RADIUS_M * d2.sqrt() * (1.0 - 1e-9) - 1e-6
    }

    /// Nearest alive cluster with a larger id, strictly within the cutoff.
    fn search(&self, c: usize) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        let rc = self.rad[c];
        self.buckets.for_each_near(self.centroid[c], Some(c), |k| {
            if self.is_alive[k] {
                let bound = best.map_or(self.cutoff, |(bd, _)| bd);
                if self.chord_lower_bound(c, k) > bound {
                    return;
                }
                let d = rad_distance(&rc, &self.rad[k]);
                if d < self.cutoff && better(d, k, best) {
                    best = Some((d, k));
                }
            }
        });
        best
    }

    /// Globally closest pair; stale heap entries are discarded.
    fn closest_pair(&mut self) -> Option<(usize, usize)> {
        while let Some(Reverse(PairKey(d, c, k))) = self.heap.pop() {
            if self.is_alive[c] && self.nn[c] == Some((d, k)) {
                return Some((c, k));
            }
        }
        None
    }

    fn merge(&mut self, i: usize, j: usize) {
        self.buckets.remove(i, self.centroid[i]);
        self.buckets.remove(j, self.centroid[j]);
        let merged = merge_sorted(&self.members[i], &self.members[j]);
        self.members[j] = Vec::new();
        self.is_alive[j] = false;
        self.set_nn(j, None);
        self.centroid[i] = mean_point(self.points, &merged);
        self.rad[i] = self.centroid[i].into();
        self.xyz[i] = unit_vector(self.centroid[i]);
        self.members[i] = merged;
        self.buckets.insert(i, self.centroid[i]);

        let found = self.search(i);
        self.set_nn(i, found);
        let mut stale: Vec<usize> = self.pointed_by[i]
            .iter()
            .chain(&self.pointed_by[j])
            .copied()
            .filter(|&k| k != i && self.is_alive[k])
            .collect();
        stale.sort_unstable();
        stale.dedup();
        for &k in &stale {
            let found = self.search(k);
            self.set_nn(k, found);
        }
        let ri = self.rad[i];
        let mut lower = Vec::new();
        self.buckets.for_each_near(self.centroid[i], None, |k| {
            if k < i && self.is_alive[k] {
                lower.push(k);
            }
        });
        for k in lower {
            if stale.binary_search(&k).is_ok() {
                continue;
            }
            let bound = self.nn[k].map_or(self.cutoff, |(bd, _)| bd);
            if self.chord_lower_bound(k, i) > bound {
                continue;
            }
            let d = rad_distance(&self.rad[k], &ri);
            if d < self.cutoff && better(d, i, self.nn[k]) {
                self.set_nn(k, Some((d, i)));
            }
        }
    }

    fn finish(self) -> Clusters {
        let alive: Vec<usize> = (0..self.points.len()).filter(|&c| self.is_alive[c]).collect();
        let mut labels = vec![0; self.points.len()];
        let mut centroids = Vec::with_capacity(alive.len());
        let mut member_counts = Vec::with_capacity(alive.len());
        for (label, &c) in alive.iter().enumerate() {
            for &m in &self.members[c] {
                labels[m] = label;
            }
            centroids.push(self.centroid[c]);
            member_counts.push(self.members[c].len());
        }
        Clusters {
            labels,
            centroids,
            member_counts,
        }
    }
}

/// Centroid-linkage agglomerative clustering.
///
/// Starting from singletons, the pair of clusters with the smallest centroid
/// distance is merged while that distance is below `cutoff_m`. Ties go to
/// the lexicographically smallest (cluster, cluster) pair, where a cluster is
/// identified by its smallest member index. Centroids are the planar mean of
/// member coordinates, summed in member-index order.
pub fn agglomerative_cluster(points: &[GeoPoint], cutoff_m: f64) -> Result<Clusters> {
    if points.is_empty() {
        return Err(Error::contract("agglomerative_cluster needs at least one point"));
    }
    if let Some(p) = points.iter().find(|p| !p.is_valid()) {
        return Err(Error::contract(format!("invalid point {p}")));
    }
    let mut agg = Agglomerator::new(points, cutoff_m);
    while let Some((i, j)) = agg.closest_pair() {
        agg.merge(i, j);
    }
    Ok(agg.finish())
}

/// Frequent movement areas of a member set's check-in locations. An empty
/// input yields an empty profile.
pub fn frequent_movement_areas(
    points: &[GeoPoint],
    cutoff_m: f64,
    owner_kind: OwnerKind,
) -> MovementProfile {
    if points.is_empty() {
        return MovementProfile::empty(owner_kind);
    }
    match agglomerative_cluster(points, cutoff_m) {
        Ok(c) => c.into_profile(owner_kind),
        // Only invalid coordinates reach here; corpus parsing rejects them.
        Err(_) => MovementProfile::empty(owner_kind),
    }
}

/// Integer cell indices of a lat/lon grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridCell {
    pub i: i64,
    pub j: i64,
}

/// Square lat/lon grid with half-open cells `[k·size, (k+1)·size)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    per_degree: f64,
}

impl Default for Grid {
    fn default() -> Self {
        Grid::new(0.001)
    }
}

impl Grid {
    pub fn new(cell_deg: f64) -> Self {
        let inv = 1.0 / cell_deg;
        // Snap decimal sizes like 0.001 to an exact integer multiplier so
        // boundary inputs land in the upper cell.
        let per_degree = if (inv - inv.round()).abs() < 1e-9 * inv {
            inv.round()
        } else {
            inv
        };
        Grid { per_degree }
    }

    pub fn cell_deg(&self) -> f64 {
        1.0 / self.per_degree
    }

    pub fn cell(&self, p: GeoPoint) -> GridCell {
        GridCell {
            i: (p.lat * self.per_degree).floor() as i64,
            j: (p.lon * self.per_degree).floor() as i64,
        }
    }

    pub fn center(&self, c: GridCell) -> GeoPoint {
        GeoPoint {
            lat: (c.i as f64 + 0.5) / self.per_degree,
            lon: (c.j as f64 + 0.5) / self.per_degree,
        }
    }
}

/// Cell of `p` on the default 0.001° grid.
pub fn grid_cell(p: GeoPoint) -> GridCell {
    Grid::default().cell(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint { lat, lon }
    }

    /// Point `meters` north of the equator/prime-meridian origin.
    fn north(meters: f64) -> GeoPoint {
        pt((meters / EARTH_RADIUS_M).to_degrees(), 0.0)
    }

    #[test]
    fn haversine_examples() {
        let a = pt(40.75, -73.99);
        assert_eq!(haversine(a, a), 0.0);
        // R * pi / 180
        let expected = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
        assert!((haversine(pt(0.0, 0.0), pt(0.0, 1.0)) - 111_194.9).abs() < 1.0);
        assert!((haversine(pt(0.0, 0.0), pt(0.0, 1.0)) - expected).abs() < 1e-6);
        let b = pt(37.77, -122.42);
        assert_eq!(haversine(a, b), haversine(b, a));
    }

    #[test]
    fn two_close_points_merge_to_midpoint() {
        let pts = [north(0.0), north(100.0)];
        let c = agglomerative_cluster(&pts, 500.0).unwrap();
        assert_eq!(c.labels, vec![0, 0]);
        assert_eq!(c.member_counts, vec![2]);
        assert!((haversine(c.centroids[0], north(50.0))).abs() < 1e-6);
    }

    #[test]
    fn far_points_stay_apart() {
        let pts = [north(0.0), north(10_000.0)];
        let c = agglomerative_cluster(&pts, 500.0).unwrap();
        assert_eq!(c.labels, vec![0, 1]);
    }

    #[test]
    fn collinear_trace() {
        // (0,400) merge first; the merged centroid sits 600 m from 800.
        let pts = [north(0.0), north(400.0), north(800.0)];
        let c = agglomerative_cluster(&pts, 500.0).unwrap();
        assert_eq!(c.labels, vec![0, 0, 1]);
        assert!(haversine(c.centroids[0], north(200.0)) < 1e-6);
    }

    #[test]
    fn tie_goes_to_lowest_pair() {
        // 0-1 and 1-2 are both 300 m; (0,1) wins.
        let pts = [north(0.0), north(300.0), north(600.0)];
        let c = agglomerative_cluster(&pts, 400.0).unwrap();
        assert_eq!(c.labels, vec![0, 0, 1]);
    }

    #[test]
    fn empty_input_is_contract_violation() {
        assert!(matches!(
            agglomerative_cluster(&[], 500.0),
            Err(Error::Contract(_))
        ));
        assert!(frequent_movement_areas(&[], 500.0, OwnerKind::Community).is_empty());
    }

    #[test]
    fn single_point_profile() {
        let p = pt(40.7, -74.0);
        let prof = frequent_movement_areas(&[p], 500.0, OwnerKind::Community);
        assert_eq!(prof.centroids, vec![p]);
        assert_eq!(prof.member_counts, vec![1]);
        assert_eq!(prof.distance_to(p), 0.0);
    }

    #[test]
    fn empty_profile_distance_is_infinite() {
        assert_eq!(
            MovementProfile::empty(OwnerKind::User).distance_to(pt(1.0, 1.0)),
            f64::INFINITY
        );
    }

    #[test]
    fn grid_cells() {
        assert_eq!(grid_cell(pt(40.7421, -73.9911)), GridCell { i: 40742, j: -73992 });
        assert_eq!(grid_cell(pt(0.0005, 0.0005)), GridCell { i: 0, j: 0 });
        assert_eq!(grid_cell(pt(0.001, 0.001)), GridCell { i: 1, j: 1 });
        assert_eq!(grid_cell(pt(0.003, -0.003)), GridCell { i: 3, j: -3 });
        let g = Grid::default();
        let c = g.cell(pt(40.7421, -73.9911));
        assert_eq!(g.cell(g.center(c)), c);
    }
}
