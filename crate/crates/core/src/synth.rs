//! Synthetic check-in corpora with planted social groups and
//! group-driven mobility.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, Duration, NaiveDate, TimeZone, Utc};
use chrono_tz::Tz;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::communities::EgoNetwork;
use crate::corpus::{BBox, CheckIn, CityScope, SocialGraph, UserId};
use crate::error::{Error, Result};
use crate::geo::{GeoPoint, EARTH_RADIUS_M};

/// When a group's members meet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupContext {
    /// Weekdays, 9:00 to 17:00.
    Daytime,
    /// Weekday evenings and weekends.
    Leisure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_users: usize,
    pub city: BBox,
    pub timezone: String,
    pub n_neighborhoods: usize,
    pub neighborhood_radius_m: f64,
    /// Probability that a group joined by a user sits in their home
    /// neighborhood.
    pub local_group_prob: f64,
    pub mean_group_size: usize,
    /// Inclusive range of groups per user.
    pub groups_per_user: (usize, usize),
    /// Inclusive range of groups that drive a user's social check-ins.
    pub influencers_per_user: (usize, usize),
    pub p_in: f64,
    pub p_out: f64,
    pub hotspots_per_group: usize,
    /// Distance of a group's hotspots from the group anchor.
    pub hotspot_spread_m: f64,
    /// Standard deviation of check-ins around a hotspot.
    pub jitter_m: f64,
    pub personal_spots: usize,
    /// Share of social check-ins for users with the fewest and most groups.
    pub social_fraction: (f64, f64),
    pub checkins_per_user: (usize, usize),
    pub days: u32,
    pub context_dependent: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 42,
            n_users: 200,
            city: BBox {
                lat_min: 40.55,
                lat_max: 40.90,
                lon_min: -74.05,
                lon_max: -73.75,
            },
            timezone: "America/New_York".into(),
            n_neighborhoods: 6,
            neighborhood_radius_m: 2500.0,
            local_group_prob: 0.3,
            mean_group_size: 10,
            groups_per_user: (3, 6),
            influencers_per_user: (1, 2),
            p_in: 0.5,
            p_out: 0.02,
            hotspots_per_group: 3,
            hotspot_spread_m: 1200.0,
            jitter_m: 80.0,
            personal_spots: 2,
            social_fraction: (0.65, 0.98),
            checkins_per_user: (110, 180),
            days: 182,
            context_dependent: true,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<Tz> {
        let bad = |key: &str, msg: &str| Err(Error::config(format!("synth.{key}"), msg.to_string()));
        if self.n_users == 0 {
            return bad("n_users", "must be positive");
        }
        if !(self.p_in > self.p_out && self.p_out >= 0.0 && self.p_in <= 1.0) {
            return bad("p_in", "need 0 <= p_out < p_in <= 1");
        }
        if !(self.jitter_m > 0.0) {
            return bad("jitter_m", "must be positive");
        }
        let (gl, gh) = self.groups_per_user;
        let (il, ih) = self.influencers_per_user;
        let (cl, ch) = self.checkins_per_user;
        if gl == 0 || gl > gh || il == 0 || il > ih || cl == 0 || cl > ch {
            return bad("groups_per_user", "ranges must be non-empty and start at 1 or more");
        }
        if self.mean_group_size < 2 || self.hotspots_per_group == 0 || self.n_neighborhoods == 0 || self.days == 0 {
            return bad("mean_group_size", "group size >= 2, hotspots, neighborhoods and days >= 1");
        }
        let (sl, sh) = self.social_fraction;
        if !(0.0..=1.0).contains(&sl) || !(0.0..=1.0).contains(&sh) {
            return bad("social_fraction", "fractions must lie in [0, 1]");
        }
        if sl < 1.0 && self.personal_spots == 0 {
            return bad("personal_spots", "needed when social fraction is below 1");
        }
        self.timezone
            .parse::<Tz>()
            .map_err(|_| Error::config("synth.timezone", format!("unknown timezone {:?}", self.timezone)))
    }

    pub fn scope(&self) -> Result<CityScope> {
        Ok(CityScope {
            name: "synthetic".into(),
            bbox: self.city,
            timezone: self.validate()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedGroup {
    pub id: usize,
    pub neighborhood: usize,
    pub context: GroupContext,
    pub members: Vec<UserId>,
    pub hotspots: Vec<GeoPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedUser {
    pub user: UserId,
    pub neighborhood: usize,
    pub groups: Vec<usize>,
    pub influencers: Vec<usize>,
    pub social_fraction: f64,
    pub personal_spots: Vec<GeoPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: SyntheticSpec,
    pub groups: Vec<PlantedGroup>,
    pub users: Vec<PlantedUser>,
    /// Per owner, friends grouped by their lowest shared group; friends
    /// sharing no group are singletons.
    pub partitions: BTreeMap<UserId, Vec<Vec<UserId>>>,
    /// Generating group of each check-in, per user in chronological order;
    /// `None` for personal check-ins.
    pub sources: BTreeMap<UserId, Vec<Option<usize>>>,
}

impl GroundTruth {
    /// Planted check-in counts over a user's groups, in `groups` order.
    pub fn planted_influence(&self, u: UserId) -> Vec<usize> {
        let Some(pu) = self.users.iter().find(|p| p.user == u) else {
            return Vec::new();
        };
        let mut counts = vec![0; pu.groups.len()];
        for g in self.sources.get(&u).into_iter().flatten().flatten() {
            if let Some(i) = pu.groups.iter().position(|x| x == g) {
                counts[i] += 1;
            }
        }
        counts
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub scope: CityScope,
    pub checkins: Vec<CheckIn>,
    pub graph: SocialGraph,
    pub truth: GroundTruth,
}

fn offset(p: GeoPoint, east_m: f64, north_m: f64) -> GeoPoint {
    let dlat = (north_m / EARTH_RADIUS_M).to_degrees();
    let dlon = (east_m / (EARTH_RADIUS_M * p.lat.to_radians().cos())).to_degrees();
    GeoPoint {
        lat: p.lat + dlat,
        lon: p.lon + dlon,
    }
}

fn round6(p: GeoPoint) -> GeoPoint {
    GeoPoint {
        lat: (p.lat * 1e6).round() / 1e6,
        lon: (p.lon * 1e6).round() / 1e6,
    }
}

/// Uniform point within `radius_m` of `center`, resampled until inside
/// `bbox` (falls back to the center).
fn point_in_disk(rng: &mut impl Rng, center: GeoPoint, radius_m: f64, bbox: &BBox) -> GeoPoint {
    for _ in 0..100 {
        let r = radius_m * rng.gen::<f64>().sqrt();
        let a = rng.gen::<f64>() * std::f64::consts::TAU;
        let p = offset(center, r * a.cos(), r * a.sin());
        if bbox.contains(p) {
            return p;
        }
    }
    center
}

fn gaussian_around(rng: &mut impl Rng, center: GeoPoint, sigma_m: f64, bbox: &BBox) -> GeoPoint {
    let n = Normal::new(0.0, sigma_m).expect("positive sigma");
    for _ in 0..100 {
        let p = offset(center, n.sample(rng), n.sample(rng));
        if bbox.contains(p) {
            return p;
        }
    }
    center
}

fn uniform_in(rng: &mut impl Rng, bbox: &BBox) -> GeoPoint {
    GeoPoint {
        lat: rng.gen_range(bbox.lat_min..bbox.lat_max),
        lon: rng.gen_range(bbox.lon_min..bbox.lon_max),
    }
}

fn neighborhood_centers(spec: &SyntheticSpec) -> Vec<GeoPoint> {
    let n = spec.n_neighborhoods;
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let b = &spec.city;
    (0..n)
        .map(|k| {
            let (r, c) = (k / cols, k % cols);
            GeoPoint {
                lat: b.lat_min + (r as f64 + 0.5) / rows as f64 * (b.lat_max - b.lat_min),
                lon: b.lon_min + (c as f64 + 0.5) / cols as f64 * (b.lon_max - b.lon_min),
            }
        })
        .collect()
}

fn local_time(rng: &mut impl Rng, tz: &Tz, start: NaiveDate, days: u32, context: Option<GroupContext>) -> DateTime<Utc> {
    loop {
        let day = start + Duration::days(rng.gen_range(0..days) as i64);
        let weekday = day.weekday_from_monday();
        let hour = match context {
            Some(GroupContext::Daytime) if weekday < 5 => rng.gen_range(9..17),
            Some(GroupContext::Daytime) => continue,
            Some(GroupContext::Leisure) if weekday < 5 => rng.gen_range(18..23),
            Some(GroupContext::Leisure) => rng.gen_range(10..23),
            None => rng.gen_range(7..24),
        };
        let naive = day
            .and_hms_opt(hour, rng.gen_range(0..60), rng.gen_range(0..60))
            .expect("valid clock time");
        if let Some(t) = tz.from_local_datetime(&naive).earliest() {
            return t.with_timezone(&Utc);
        }
    }
}

trait WeekdayFromMonday {
    fn weekday_from_monday(&self) -> u32;
}

impl WeekdayFromMonday for NaiveDate {
    fn weekday_from_monday(&self) -> u32 {
        use chrono::Datelike;
        self.weekday().num_days_from_monday()
    }
}

fn range_incl(rng: &mut impl Rng, (lo, hi): (usize, usize)) -> usize {
    rng.gen_range(lo..=hi)
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    let tz = spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bbox = spec.city;
    let centers = neighborhood_centers(spec);
    let n_users = spec.n_users;
    let user_ids: Vec<UserId> = (0..n_users as u64).map(|i| UserId(1000 + i)).collect();

    let mean_groups = (spec.groups_per_user.0 + spec.groups_per_user.1) as f64 / 2.0;
    let n_groups = ((n_users as f64 * mean_groups / spec.mean_group_size as f64).round() as usize).max(1);
    let mut groups: Vec<PlantedGroup> = (0..n_groups)
        .map(|id| {
            let neighborhood = id % spec.n_neighborhoods;
            let anchor = point_in_disk(&mut rng, centers[neighborhood], spec.neighborhood_radius_m, &bbox);
            let hotspots = (0..spec.hotspots_per_group)
                .map(|_| round6(point_in_disk(&mut rng, anchor, spec.hotspot_spread_m, &bbox)))
                .collect();
            let context = if spec.context_dependent && rng.gen_bool(0.5) {
                GroupContext::Daytime
            } else {
                GroupContext::Leisure
            };
            PlantedGroup {
                id,
                neighborhood,
                context,
                members: Vec::new(),
                hotspots,
            }
        })
        .collect();
    let by_hood: Vec<Vec<usize>> = (0..spec.n_neighborhoods)
        .map(|h| (0..n_groups).filter(|g| g % spec.n_neighborhoods == h).collect())
        .collect();

    let (gl, gh) = spec.groups_per_user;
    let mut users = Vec::with_capacity(n_users);
    for &u in &user_ids {
        let neighborhood = rng.gen_range(0..spec.n_neighborhoods);
        let k = range_incl(&mut rng, spec.groups_per_user).min(n_groups);
        let mut chosen = BTreeSet::new();
        while chosen.len() < k {
            let pool = if rng.gen_bool(spec.local_group_prob) && !by_hood[neighborhood].is_empty() {
                &by_hood[neighborhood]
            } else {
                &by_hood[rng.gen_range(0..spec.n_neighborhoods)]
            };
            if let Some(&g) = pool.choose(&mut rng) {
                chosen.insert(g);
            }
        }
        let groups_of: Vec<usize> = chosen.into_iter().collect();
        for &g in &groups_of {
            groups[g].members.push(u);
        }
        let n_inf = range_incl(&mut rng, spec.influencers_per_user).min(groups_of.len());
        let mut influencers: Vec<usize> = groups_of.choose_multiple(&mut rng, n_inf).copied().collect();
        influencers.sort_unstable();
        let t = if gh > gl {
            (groups_of.len() - gl) as f64 / (gh - gl) as f64
        } else {
            1.0
        };
        let social_fraction = spec.social_fraction.0 + t * (spec.social_fraction.1 - spec.social_fraction.0);
        let personal_spots = (0..spec.personal_spots)
            .map(|_| round6(uniform_in(&mut rng, &bbox)))
            .collect();
        users.push(PlantedUser {
            user: u,
            neighborhood,
            groups: groups_of,
            influencers,
            social_fraction,
            personal_spots,
        });
    }

    let mut graph = SocialGraph::new();
    let group_sets: Vec<BTreeSet<usize>> = users.iter().map(|p| p.groups.iter().copied().collect()).collect();
    for i in 0..n_users {
        graph.add_node(user_ids[i]);
        for j in i + 1..n_users {
            let shared = !group_sets[i].is_disjoint(&group_sets[j]);
            let p = if shared { spec.p_in } else { spec.p_out };
            if rng.gen_bool(p) {
                graph.add_edge(user_ids[i], user_ids[j]);
            }
        }
    }

    let mut partitions = BTreeMap::new();
    for (i, &u) in user_ids.iter().enumerate() {
        let mut parts: BTreeMap<Option<usize>, Vec<UserId>> = BTreeMap::new();
        let mut singles = Vec::new();
        for &f in graph.friends(u)? {
            let j = (f.0 - 1000) as usize;
            match group_sets[i].intersection(&group_sets[j]).next() {
                Some(&g) => parts.entry(Some(g)).or_default().push(f),
                None => singles.push(vec![f]),
            }
        }
        let mut all: Vec<Vec<UserId>> = parts.into_values().collect();
        all.extend(singles);
        partitions.insert(u, all);
    }

    let start = NaiveDate::from_ymd_opt(2015, 1, 5).expect("valid date");
    let mut checkins = Vec::new();
    let mut sources = BTreeMap::new();
    for pu in &users {
        let n = range_incl(&mut rng, spec.checkins_per_user);
        let mut drawn: Vec<(DateTime<Utc>, GeoPoint, Option<usize>)> = (0..n)
            .map(|_| {
                if rng.gen_bool(pu.social_fraction) {
                    let g = *pu.influencers.choose(&mut rng).expect("at least one influencer");
                    let group = &groups[g];
                    let hotspot = *group.hotspots.choose(&mut rng).expect("hotspots");
                    let ctx = spec.context_dependent.then_some(group.context);
                    let t = local_time(&mut rng, &tz, start, spec.days, ctx);
                    (t, gaussian_around(&mut rng, hotspot, spec.jitter_m, &bbox), Some(g))
                } else {
                    let spot = *pu.personal_spots.choose(&mut rng).expect("personal spots");
                    let t = local_time(&mut rng, &tz, start, spec.days, None);
                    (t, gaussian_around(&mut rng, spot, spec.jitter_m, &bbox), None)
                }
            })
            .collect();
        drawn.sort_by_key(|d| d.0);
        sources.insert(pu.user, drawn.iter().map(|d| d.2).collect());
        checkins.extend(drawn.into_iter().map(|(time, p, _)| CheckIn {
            user: pu.user,
            time,
            point: round6(p),
        }));
    }

    Ok(SyntheticCorpus {
        scope: CityScope {
            name: "synthetic".into(),
            bbox,
            timezone: tz,
        },
        checkins,
        graph,
        truth: GroundTruth {
            spec: spec.clone(),
            groups,
            users,
            partitions,
            sources,
        },
    })
}

impl SyntheticCorpus {
    /// Writes `checkins.tsv`, `edges.tsv` and `ground_truth.json`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut c = std::io::BufWriter::new(fs::File::create(dir.join("checkins.tsv"))?);
        for ci in &self.checkins {
            writeln!(
                c,
                "{}\t{}\t{:.6}\t{:.6}",
                ci.user,
                ci.time.format("%Y-%m-%dT%H:%M:%SZ"),
                ci.point.lat,
                ci.point.lon
            )?;
        }
        c.flush()?;
        let mut e = std::io::BufWriter::new(fs::File::create(dir.join("edges.tsv"))?);
        for (a, b) in self.graph.edges() {
            writeln!(e, "{a}\t{b}")?;
        }
        e.flush()?;
        fs::write(dir.join("ground_truth.json"), serde_json::to_vec_pretty(&self.truth)?)?;
        Ok(())
    }
}

/// Graph of `blocks` groups of `size` nodes with the given within- and
/// between-block edge probabilities, plus each node's block.
pub fn planted_partition(blocks: usize, size: usize, p_in: f64, p_out: f64, seed: u64) -> (EgoNetwork, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = blocks * size;
    let labels: Vec<usize> = (0..n).map(|i| i / size).collect();
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            let p = if labels[a] == labels[b] { p_in } else { p_out };
            if rng.gen_bool(p) {
                edges.push((a, b));
            }
        }
    }
    let nodes = (0..n as u64).map(UserId).collect();
    (EgoNetwork::from_edges(UserId(u64::MAX), nodes, edges), labels)
}

/// A user alternating between two places: weekdays 9:00-17:00 near
/// `day`, all other hours near `night`. Returns check-ins sorted by time
/// (local timezone `tz`).
pub fn two_state_user(
    user: UserId,
    day: GeoPoint,
    night: GeoPoint,
    sigma_m: f64,
    n: usize,
    tz: &Tz,
    seed: u64,
) -> Vec<CheckIn> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma_m).expect("positive sigma");
    let start = NaiveDate::from_ymd_opt(2015, 1, 5).expect("valid date");
    let mut out: Vec<CheckIn> = (0..n)
        .map(|_| {
            let d = start + Duration::days(rng.gen_range(0..120));
            let hour = rng.gen_range(0..24);
            let naive = d.and_hms_opt(hour, rng.gen_range(0..60), 0).expect("valid clock time");
            let time = tz
                .from_local_datetime(&naive)
                .earliest()
                .unwrap_or_else(|| tz.from_utc_datetime(&naive))
                .with_timezone(&Utc);
            let working = d.weekday_from_monday() < 5 && (9..17).contains(&hour);
            let base = if working { day } else { night };
            CheckIn {
                user,
                time,
                point: offset(base, noise.sample(&mut rng), noise.sample(&mut rng)),
            }
        })
        .collect();
    out.sort_by_key(|c| c.time);
    out
}

/// `p` moved by the given east and north distances in metres.
pub fn displaced(p: GeoPoint, east_m: f64, north_m: f64) -> GeoPoint {
    offset(p, east_m, north_m)
}
