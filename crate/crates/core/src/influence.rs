//! Influential communities of check-in locations, distance-distribution
//! comparisons against friend and random baselines, and context-filtered
//! influence profiles.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::communities::{community_stats, CommunityPartition, CommunityStats};
use crate::corpus::{BBox, CheckIn, CityScope, Corpus, SocialGraph, UserId};
use crate::derive_seed;
use crate::diversity::{influence_entropy, influence_similarity, InfluenceProfile};
use crate::error::{Error, Result};
use crate::geo::{frequent_movement_areas, GeoPoint, MovementProfile, OwnerKind};

/// Shortest distance between a location and a profile's areas; `+inf`
/// for an empty profile.
pub fn location_community_distance(loc: GeoPoint, profile: &MovementProfile) -> f64 {
    profile.distance_to(loc)
}

/// Index and distance of the closest finite entry; ties go to the lowest
/// index. Infinite entries (empty profiles) are never chosen.
pub fn argmin_finite(distances: &[f64]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &d) in distances.iter().enumerate() {
        if d.is_finite() && best.map_or(true, |(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceAssignment {
    pub user: UserId,
    pub checkin_index: Option<usize>,
    pub distances: Vec<f64>,
    pub influential_index: usize,
    pub influential_distance: f64,
}

/// One community of a user with its movement profile and statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommunityView {
    pub members: Vec<UserId>,
    pub profile: MovementProfile,
    pub stats: CommunityStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserCommunities {
    pub owner: UserId,
    pub communities: Vec<CommunityView>,
}

impl UserCommunities {
    pub fn distances(&self, loc: GeoPoint) -> Vec<f64> {
        self.communities.iter().map(|c| c.profile.distance_to(loc)).collect()
    }

    pub fn has_usable(&self) -> bool {
        self.communities.iter().any(|c| !c.profile.is_empty())
    }
}

fn member_points(corpus: &Corpus, members: &[UserId]) -> Vec<GeoPoint> {
    members.iter().flat_map(|&m| corpus.points_of(m)).collect()
}

/// Corpus, friendship graph and per-user communities with their movement
/// profiles. Friend-set, per-user and virtual-community profiles are
/// computed on first use and cached.
pub struct SocialMobility {
    pub corpus: Corpus,
    pub graph: SocialGraph,
    pub cutoff_m: f64,
    seed: u64,
    virtual_draws: usize,
    users: BTreeMap<UserId, UserCommunities>,
    user_profiles: BTreeMap<UserId, OnceLock<MovementProfile>>,
    friend_sets: BTreeMap<UserId, OnceLock<MovementProfile>>,
    virtuals: BTreeMap<UserId, OnceLock<Vec<Vec<CommunityView>>>>,
}

impl SocialMobility {
    /// Computes community profiles and statistics for every partition.
    /// `seed` drives virtual-community sampling; `virtual_draws` is the
    /// number of size-matched samples kept per community.
    pub fn build(
        corpus: Corpus,
        graph: SocialGraph,
        partitions: &BTreeMap<UserId, CommunityPartition>,
        cutoff_m: f64,
        seed: u64,
        virtual_draws: usize,
    ) -> Result<Self> {
        let users: Vec<(UserId, UserCommunities)> = partitions
            .par_iter()
            .map(|(&u, p)| {
                let communities = p
                    .communities
                    .iter()
                    .map(|members| {
                        let pts = member_points(&corpus, members);
                        let profile = frequent_movement_areas(&pts, cutoff_m, OwnerKind::Community);
                        let stats = community_stats(members, &graph, &corpus, profile.n_areas())?;
                        Ok(CommunityView {
                            members: members.clone(),
                            profile,
                            stats,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((u, UserCommunities { owner: u, communities }))
            })
            .collect::<Result<_>>()?;
        Ok(Self::from_parts(
            corpus,
            graph,
            users.into_iter().collect(),
            cutoff_m,
            seed,
            virtual_draws,
        ))
    }

    /// Assembles from precomputed community views (e.g. loaded from disk).
    pub fn from_parts(
        corpus: Corpus,
        graph: SocialGraph,
        users: BTreeMap<UserId, UserCommunities>,
        cutoff_m: f64,
        seed: u64,
        virtual_draws: usize,
    ) -> Self {
        let user_profiles = corpus.users().map(|u| (u, OnceLock::new())).collect();
        let friend_sets = users.keys().map(|&u| (u, OnceLock::new())).collect();
        let virtuals = users.keys().map(|&u| (u, OnceLock::new())).collect();
        SocialMobility {
            corpus,
            graph,
            cutoff_m,
            seed,
            virtual_draws: virtual_draws.max(1),
            users,
            user_profiles,
            friend_sets,
            virtuals,
        }
    }

    pub fn scope(&self) -> &CityScope {
        &self.corpus.scope
    }

    pub fn users(&self) -> impl Iterator<Item = UserId> + '_ {
        self.users.keys().copied()
    }

    pub fn communities(&self, u: UserId) -> Result<&UserCommunities> {
        self.users.get(&u).ok_or(Error::UnknownUser(u))
    }

    pub fn all_communities(&self) -> &BTreeMap<UserId, UserCommunities> {
        &self.users
    }

    /// Movement profile of one user's own check-ins.
    pub fn user_profile(&self, u: UserId) -> MovementProfile {
        match self.user_profiles.get(&u) {
            Some(cell) => cell
                .get_or_init(|| {
                    let pts: Vec<_> = self.corpus.points_of(u).collect();
                    frequent_movement_areas(&pts, self.cutoff_m, OwnerKind::User)
                })
                .clone(),
            None => MovementProfile::empty(OwnerKind::User),
        }
    }

    fn user_profile_ref(&self, u: UserId) -> Option<&MovementProfile> {
        self.user_profiles.get(&u).map(|cell| {
            cell.get_or_init(|| {
                let pts: Vec<_> = self.corpus.points_of(u).collect();
                frequent_movement_areas(&pts, self.cutoff_m, OwnerKind::User)
            })
        })
    }

    /// Profile of all of `u`'s friends' check-ins clustered together.
    pub fn friend_set_profile(&self, u: UserId) -> Result<&MovementProfile> {
        let cell = self.friend_sets.get(&u).ok_or(Error::UnknownUser(u))?;
        Ok(cell.get_or_init(|| {
            let friends: Vec<UserId> = self
                .graph
                .friends(u)
                .map(|f| f.iter().copied().collect())
                .unwrap_or_default();
            let pts = member_points(&self.corpus, &friends);
            frequent_movement_areas(&pts, self.cutoff_m, OwnerKind::FriendSet)
        }))
    }

    fn view_of(&self, members: Vec<UserId>, kind: OwnerKind) -> Result<CommunityView> {
        let profile = if members.len() == 1 {
            let mut p = self
                .user_profile_ref(members[0])
                .cloned()
                .unwrap_or_else(|| MovementProfile::empty(kind));
            p.owner_kind = kind;
            p
        } else {
            frequent_movement_areas(&member_points(&self.corpus, &members), self.cutoff_m, kind)
        };
        let stats = community_stats(&members, &self.graph, &self.corpus, profile.n_areas())?;
        Ok(CommunityView { members, profile, stats })
    }

    /// For each community of `u`, `virtual_draws` random samples of `u`'s
    /// friends of the same size.
    pub fn virtual_communities(&self, u: UserId) -> Result<&[Vec<CommunityView>]> {
        let cell = self.virtuals.get(&u).ok_or(Error::UnknownUser(u))?;
        if let Some(v) = cell.get() {
            return Ok(v);
        }
        let uc = self.communities(u)?;
        let friends: Vec<UserId> = self.graph.friends(u)?.iter().copied().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, u.0, 0x7669_7274));
        let mut pools = Vec::with_capacity(uc.communities.len());
        for c in &uc.communities {
            let size = c.members.len().min(friends.len());
            let mut pool = Vec::with_capacity(self.virtual_draws);
            for _ in 0..self.virtual_draws {
                let mut members: Vec<UserId> = sample(&mut rng, friends.len(), size)
                    .into_iter()
                    .map(|i| friends[i])
                    .collect();
                members.sort_unstable();
                pool.push(self.view_of(members, OwnerKind::VirtualCommunity)?);
            }
            pools.push(pool);
        }
        Ok(cell.get_or_init(|| pools))
    }

    pub fn influential_community(&self, u: UserId, loc: GeoPoint) -> Result<InfluenceAssignment> {
        let uc = self.communities(u)?;
        let distances = uc.distances(loc);
        let (idx, d) = argmin_finite(&distances).ok_or(Error::NoInfluencer(u))?;
        Ok(InfluenceAssignment {
            user: u,
            checkin_index: None,
            distances,
            influential_index: idx,
            influential_distance: d,
        })
    }

    /// Assignments of all of `u`'s check-ins, in chronological order.
    pub fn assignments(&self, u: UserId) -> Result<Vec<InfluenceAssignment>> {
        let uc = self.communities(u)?;
        if !uc.has_usable() {
            return Err(Error::NoInfluencer(u));
        }
        let seq = self.corpus.checkins_of(u).unwrap_or(&[]);
        Ok(seq
            .iter()
            .enumerate()
            .filter_map(|(i, c)| {
                let mut a = self.influential_community(u, c.point).ok()?;
                a.checkin_index = Some(i);
                Some(a)
            })
            .collect())
    }

    /// Counts of `u`'s check-ins (optionally only those inside `window`)
    /// per influential community.
    pub fn influence_profile(&self, u: UserId, window: Option<&ContextWindow>) -> Result<InfluenceProfile> {
        let uc = self.communities(u)?;
        let mut profile = InfluenceProfile::zeros(u, uc.communities.len());
        let seq = self.corpus.checkins_of(u).unwrap_or(&[]);
        for c in seq {
            if window.is_some_and(|w| !w.contains(c, self.scope())) {
                continue;
            }
            if let Some((idx, _)) = argmin_finite(&uc.distances(c.point)) {
                profile.counts[idx] += 1;
            }
        }
        Ok(profile)
    }

    /// Minimal distance from each of `users`' check-ins to each baseline's
    /// movement areas.
    pub fn distance_cdf_compare(&self, users: &BTreeSet<UserId>, random_k: usize, seed: u64) -> CdfTable {
        let candidates: Vec<UserId> = self.corpus.users().collect();
        let per_user: Vec<[Vec<f64>; 4]> = users
            .par_iter()
            .filter_map(|&u| {
                let uc = self.users.get(&u)?;
                if !uc.has_usable() {
                    return None;
                }
                let seq = self.corpus.checkins_of(u).ok()?;
                let friends = self.friend_set_profile(u).ok()?;
                let virtuals = self.virtual_communities(u).ok()?;
                let others: Vec<UserId> = candidates.iter().copied().filter(|&c| c != u).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u.0, 0x7261_6e64));
                let mut out: [Vec<f64>; 4] = Default::default();
                for c in seq {
                    let p = c.point;
                    out[0].push(uc.distances(p).into_iter().fold(f64::INFINITY, f64::min));
                    out[1].push(friends.distance_to(p));
                    out[2].push(
                        virtuals
                            .iter()
                            .map(|pool| pool[0].profile.distance_to(p))
                            .fold(f64::INFINITY, f64::min),
                    );
                    let k = random_k.min(others.len());
                    let d = sample(&mut rng, others.len(), k)
                        .into_iter()
                        .filter_map(|i| self.user_profile_ref(others[i]))
                        .map(|prof| prof.distance_to(p))
                        .fold(f64::INFINITY, f64::min);
                    out[3].push(d);
                }
                Some(out)
            })
            .collect();
        let mut table = CdfTable::default();
        for (i, b) in Baseline::ALL.iter().enumerate() {
            let mut ds: Vec<f64> = per_user.iter().flat_map(|r| r[i].iter().copied()).collect();
            ds.sort_by(f64::total_cmp);
            table.series.push((*b, ds));
        }
        table
    }

    /// Per-user influence similarity between two windows and mean influence
    /// entropy per window. Users with an empty window are excluded from the
    /// corresponding aggregates.
    pub fn context_report(&self, users: &BTreeSet<UserId>, a: &ContextWindow, b: &ContextWindow) -> ContextReport {
        let rows: Vec<ContextRow> = users
            .par_iter()
            .filter_map(|&u| {
                let uc = self.users.get(&u)?;
                if !uc.has_usable() {
                    return None;
                }
                let all = self.influence_profile(u, None).ok()?;
                let pa = self.influence_profile(u, Some(a)).ok()?;
                let pb = self.influence_profile(u, Some(b)).ok()?;
                Some(ContextRow {
                    user: u,
                    similarity: influence_similarity(&pa, &pb).ok(),
                    entropy_all: influence_entropy(&all).ok(),
                    entropy_a: influence_entropy(&pa).ok(),
                    entropy_b: influence_entropy(&pb).ok(),
                })
            })
            .collect();
        ContextReport::from_rows(rows)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    Communities,
    AllFriends,
    VirtualCommunities,
    RandomUsers,
}

impl Baseline {
    pub const ALL: [Baseline; 4] = [
        Baseline::Communities,
        Baseline::AllFriends,
        Baseline::VirtualCommunities,
        Baseline::RandomUsers,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Baseline::Communities => "communities",
            Baseline::AllFriends => "all-friends",
            Baseline::VirtualCommunities => "virtual-communities",
            Baseline::RandomUsers => "random-users",
        }
    }
}

/// Sorted per-location minimal distances for each baseline.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CdfTable {
    pub series: Vec<(Baseline, Vec<f64>)>,
}

impl CdfTable {
    pub fn distances(&self, b: Baseline) -> &[f64] {
        self.series
            .iter()
            .find(|(k, _)| *k == b)
            .map_or(&[][..], |(_, d)| d.as_slice())
    }

    /// Empirical CDF: fraction of distances `<= d`.
    pub fn cdf(&self, b: Baseline, d: f64) -> f64 {
        let ds = self.distances(b);
        if ds.is_empty() {
            return 0.0;
        }
        ds.partition_point(|&x| x <= d) as f64 / ds.len() as f64
    }

    /// Nearest-rank percentile, `q` in (0, 1].
    pub fn percentile(&self, b: Baseline, q: f64) -> Option<f64> {
        let ds = self.distances(b);
        if ds.is_empty() {
            return None;
        }
        let rank = ((q * ds.len() as f64).ceil() as usize).clamp(1, ds.len());
        Some(ds[rank - 1])
    }

    /// `(baseline, distance_m, cdf)` rows at `step_m` resolution up to
    /// `max_m`.
    pub fn export(&self, step_m: f64, max_m: f64) -> Vec<(Baseline, f64, f64)> {
        let steps = (max_m / step_m).round() as usize;
        let mut rows = Vec::new();
        for (b, _) in &self.series {
            for k in 0..=steps {
                let d = k as f64 * step_m;
                rows.push((*b, d, self.cdf(*b, d)));
            }
        }
        rows
    }
}

/// A temporal or spatial filter on check-ins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ContextWindow {
    /// Local weekdays (0 = Monday) and hours `[start_hour, end_hour)`.
    Temporal {
        name: String,
        weekdays: Vec<u8>,
        start_hour: u8,
        end_hour: u8,
    },
    Spatial { name: String, bbox: BBox },
}

impl ContextWindow {
    pub fn temporal(name: &str, weekdays: &[u8], start_hour: u8, end_hour: u8) -> Result<Self> {
        if start_hour >= end_hour || end_hour > 24 || weekdays.iter().any(|&d| d > 6) {
            return Err(Error::config(
                format!("context.{name}"),
                "hours must satisfy start < end <= 24 and weekdays lie in 0..=6",
            ));
        }
        Ok(ContextWindow::Temporal {
            name: name.to_string(),
            weekdays: weekdays.to_vec(),
            start_hour,
            end_hour,
        })
    }

    pub fn spatial(name: &str, bbox: BBox, city: &BBox) -> Result<Self> {
        if !city.contains_bbox(&bbox) {
            return Err(Error::config(format!("context.{name}"), "region must lie inside the city bbox"));
        }
        Ok(ContextWindow::Spatial {
            name: name.to_string(),
            bbox,
        })
    }

    /// Wednesday 11:00-13:00.
    pub fn lunch() -> Self {
        Self::temporal("lunch", &[2], 11, 13).expect("valid window")
    }

    /// Wednesday 19:00-21:00.
    pub fn dinner() -> Self {
        Self::temporal("dinner", &[2], 19, 21).expect("valid window")
    }

    pub fn name(&self) -> &str {
        match self {
            ContextWindow::Temporal { name, .. } | ContextWindow::Spatial { name, .. } => name,
        }
    }

    pub fn contains(&self, c: &CheckIn, scope: &CityScope) -> bool {
        match self {
            ContextWindow::Temporal {
                weekdays,
                start_hour,
                end_hour,
                ..
            } => {
                let slot = scope.local_slot(c.time);
                weekdays.contains(&slot.weekday) && (*start_hour..*end_hour).contains(&slot.hour)
            }
            ContextWindow::Spatial { bbox, .. } => bbox.contains(c.point),
        }
    }

    pub fn disjoint_from(&self, other: &ContextWindow) -> bool {
        match (self, other) {
            (
                ContextWindow::Temporal {
                    weekdays: wa,
                    start_hour: sa,
                    end_hour: ea,
                    ..
                },
                ContextWindow::Temporal {
                    weekdays: wb,
                    start_hour: sb,
                    end_hour: eb,
                    ..
                },
            ) => !wa.iter().any(|d| wb.contains(d)) || ea <= sb || eb <= sa,
            (ContextWindow::Spatial { bbox: a, .. }, ContextWindow::Spatial { bbox: b, .. }) => !a.intersects(b),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextRow {
    pub user: UserId,
    pub similarity: Option<f64>,
    pub entropy_all: Option<f64>,
    pub entropy_a: Option<f64>,
    pub entropy_b: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextReport {
    pub rows: Vec<ContextRow>,
    pub mean_similarity: Option<f64>,
    pub mean_entropy_all: Option<f64>,
    pub mean_entropy_a: Option<f64>,
    pub mean_entropy_b: Option<f64>,
}

fn mean_of(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl ContextReport {
    pub fn from_rows(rows: Vec<ContextRow>) -> Self {
        ContextReport {
            mean_similarity: mean_of(rows.iter().map(|r| r.similarity)),
            mean_entropy_all: mean_of(rows.iter().map(|r| r.entropy_all)),
            mean_entropy_a: mean_of(rows.iter().map(|r| r.entropy_a)),
            mean_entropy_b: mean_of(rows.iter().map(|r| r.entropy_b)),
            rows,
        }
    }
}
