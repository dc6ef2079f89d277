//! Check-in prediction: instance construction, feature extraction for the
//! community model and its baselines, logistic regression, and the
//! two-state Gaussian mobility baseline.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::communities::CommunityStats;
use crate::corpus::{CheckIn, CityScope, TimeHistograms, TimeSlot, UserId};
use crate::error::{Error, Result};
use crate::geo::{haversine, GeoPoint, Grid, GridCell, MovementProfile, EARTH_RADIUS_M};
use crate::influence::{argmin_finite, CommunityView, SocialMobility, UserCommunities};

/// How the community describing a location is picked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Nearest,
    MaxSize,
    MaxCon,
    Random,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Nearest, Strategy::MaxSize, Strategy::MaxCon, Strategy::Random];

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Nearest => "nearest",
            Strategy::MaxSize => "max-size",
            Strategy::MaxCon => "max-con",
            Strategy::Random => "random",
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::config("strategy", format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    Community(Strategy),
    SampleFriends,
    Friends,
    User,
    UserCommunity,
    Psmm,
}

impl ModelKind {
    /// Identifier used in reports: `community` for the nearest strategy,
    /// `community:<strategy>` otherwise.
    pub fn id(&self) -> String {
        match self {
            ModelKind::Community(Strategy::Nearest) => "community".into(),
            ModelKind::Community(s) => format!("community:{}", s.as_str()),
            ModelKind::SampleFriends => "sample-friends".into(),
            ModelKind::Friends => "friends".into(),
            ModelKind::User => "user".into(),
            ModelKind::UserCommunity => "user-community".into(),
            ModelKind::Psmm => "psmm".into(),
        }
    }

    /// Models whose own movement areas come from the first half of the
    /// user's history.
    pub fn uses_own_history(&self) -> bool {
        matches!(self, ModelKind::User | ModelKind::UserCommunity)
    }

    pub fn feature_names(&self) -> Vec<&'static str> {
        match self {
            ModelKind::Community(_) | ModelKind::SampleFriends => COMMUNITY_FEATURES.to_vec(),
            ModelKind::Friends => FRIENDS_FEATURES.to_vec(),
            ModelKind::User => USER_FEATURES.to_vec(),
            ModelKind::UserCommunity => USER_FEATURES.iter().chain(&COMMUNITY_FEATURES).copied().collect(),
            ModelKind::Psmm => Vec::new(),
        }
    }

    fn tag(&self) -> u64 {
        match self {
            ModelKind::Community(s) => 1 + *s as u64,
            ModelKind::SampleFriends => 10,
            ModelKind::Friends => 11,
            ModelKind::User => 12,
            ModelKind::UserCommunity => 13,
            ModelKind::Psmm => 14,
        }
    }

    pub(crate) fn seed_tag(&self) -> u64 {
        0x6d6f_6465_6c00 + self.tag()
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "community" => ModelKind::Community(Strategy::Nearest),
            "sample-friends" => ModelKind::SampleFriends,
            "friends" => ModelKind::Friends,
            "user" => ModelKind::User,
            "user-community" => ModelKind::UserCommunity,
            "psmm" => ModelKind::Psmm,
            other => match other.strip_prefix("community:") {
                Some(strategy) => ModelKind::Community(strategy.parse()?),
                None => return Err(Error::config("models", format!("unknown model {other:?}"))),
            },
        })
    }
}

pub const COMMUNITY_FEATURES: [&str; 7] = [
    "distance_m",
    "size",
    "n_fma",
    "total_checkins",
    "connectivity",
    "global_hour_checkins",
    "global_day_checkins",
];
pub const FRIENDS_FEATURES: [&str; 3] = ["friends_distance_m", "global_hour_checkins", "global_day_checkins"];
pub const USER_FEATURES: [&str; 3] = ["user_distance_m", "own_day_checkins", "own_hour_checkins"];

/// A candidate place: a grid cell and the point standing for it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub cell: GridCell,
    pub point: GeoPoint,
}

impl Target {
    pub fn of_cell(grid: &Grid, cell: GridCell) -> Self {
        Target {
            cell,
            point: grid.center(cell),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionInstance {
    pub user: UserId,
    /// Index of the originating check-in in the user's sequence.
    pub checkin: usize,
    pub target: Target,
    pub slot: TimeSlot,
    pub visited: bool,
    pub features: Vec<f64>,
}

/// Positive instance for one check-in.
pub fn positive_instance(c: &CheckIn, index: usize, scope: &CityScope, grid: &Grid) -> PredictionInstance {
    PredictionInstance {
        user: c.user,
        checkin: index,
        target: Target::of_cell(grid, grid.cell(c.point)),
        slot: scope.local_slot(c.time),
        visited: true,
        features: Vec::new(),
    }
}

/// A uniformly random cell of the city other than the positive's cell,
/// with the same user and time.
pub fn sample_negative(
    positive: &PredictionInstance,
    scope: &CityScope,
    grid: &Grid,
    rng: &mut impl Rng,
) -> Result<PredictionInstance> {
    let lo = grid.cell(GeoPoint {
        lat: scope.bbox.lat_min,
        lon: scope.bbox.lon_min,
    });
    let hi = grid.cell(GeoPoint {
        lat: scope.bbox.lat_max,
        lon: scope.bbox.lon_max,
    });
    if lo == hi {
        return Err(Error::contract("city must span more than one grid cell"));
    }
    let cell = loop {
        let c = GridCell {
            i: rng.gen_range(lo.i..=hi.i),
            j: rng.gen_range(lo.j..=hi.j),
        };
        if c != positive.target.cell {
            break c;
        }
    };
    Ok(PredictionInstance {
        target: Target::of_cell(grid, cell),
        visited: false,
        features: Vec::new(),
        ..positive.clone()
    })
}

/// One positive per check-in, each followed by its sampled negative.
pub fn balanced_instances(
    checkins: &[CheckIn],
    scope: &CityScope,
    grid: &Grid,
    rng: &mut impl Rng,
) -> Result<Vec<PredictionInstance>> {
    let mut out = Vec::with_capacity(2 * checkins.len());
    for (i, c) in checkins.iter().enumerate() {
        let pos = positive_instance(c, i, scope, grid);
        let neg = sample_negative(&pos, scope, grid, rng)?;
        out.push(pos);
        out.push(neg);
    }
    Ok(out)
}

fn usable(uc: &UserCommunities) -> impl Iterator<Item = (usize, &CommunityView)> {
    uc.communities.iter().enumerate().filter(|(_, c)| !c.profile.is_empty())
}

fn argmax_by(items: impl Iterator<Item = (usize, f64)>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in items {
        if best.map_or(true, |(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Index of the community describing `loc` under `strategy`, among the
/// communities that have movement areas. Ties go to the lowest index.
pub fn choose_community(strategy: Strategy, uc: &UserCommunities, loc: GeoPoint, rng: &mut impl Rng) -> Option<usize> {
    match strategy {
        Strategy::Nearest => argmin_finite(&uc.distances(loc)).map(|(i, _)| i),
        Strategy::MaxSize => argmax_by(usable(uc).map(|(i, c)| (i, c.stats.size as f64))),
        Strategy::MaxCon => argmax_by(usable(uc).map(|(i, c)| (i, c.stats.connectivity))),
        Strategy::Random => {
            let idx: Vec<usize> = usable(uc).map(|(i, _)| i).collect();
            (!idx.is_empty()).then(|| idx[rng.gen_range(0..idx.len())])
        }
    }
}

/// A user's own movement areas and time counts, from the part of their
/// history reserved for it.
#[derive(Debug, Clone, PartialEq)]
pub struct OwnHistory {
    pub profile: MovementProfile,
    pub counts: TimeHistograms,
}

/// Everything feature extraction reads for one user.
pub struct FeatureContext<'a> {
    pub mobility: &'a SocialMobility,
    pub user: UserId,
    pub communities: &'a UserCommunities,
    pub global: &'a TimeHistograms,
    pub own: Option<&'a OwnHistory>,
    /// Replacement for infinite distances.
    pub distance_cap: f64,
}

impl FeatureContext<'_> {
    fn cap(&self, d: f64) -> f64 {
        d.min(self.distance_cap)
    }

    fn time_pair(&self, slot: TimeSlot) -> [f64; 2] {
        [
            self.global.by_hour[slot.hour as usize] as f64,
            self.global.by_day[slot.weekday as usize] as f64,
        ]
    }

    fn community_schema(&self, profile: &MovementProfile, stats: &CommunityStats, inst: &PredictionInstance) -> [f64; 7] {
        let [hour, day] = self.time_pair(inst.slot);
        [
            self.cap(profile.distance_to(inst.target.point)),
            stats.size as f64,
            stats.n_fma as f64,
            stats.total_checkins as f64,
            stats.connectivity,
            hour,
            day,
        ]
    }

    fn user_schema(&self, inst: &PredictionInstance) -> Option<[f64; 3]> {
        let own = self.own?;
        Some([
            self.cap(own.profile.distance_to(inst.target.point)),
            own.counts.by_day[inst.slot.weekday as usize] as f64,
            own.counts.by_hour[inst.slot.hour as usize] as f64,
        ])
    }
}

/// The seven community features of the community picked by `strategy`;
/// `None` when the user has no community with movement areas.
pub fn community_features(
    ctx: &FeatureContext<'_>,
    strategy: Strategy,
    inst: &PredictionInstance,
    rng: &mut impl Rng,
) -> Option<Vec<f64>> {
    let idx = choose_community(strategy, ctx.communities, inst.target.point, rng)?;
    let c = &ctx.communities.communities[idx];
    Some(ctx.community_schema(&c.profile, &c.stats, inst).to_vec())
}

/// Features of a baseline model; `None` when its inputs are unavailable.
pub fn baseline_features(
    kind: ModelKind,
    ctx: &FeatureContext<'_>,
    inst: &PredictionInstance,
    rng: &mut impl Rng,
) -> Option<Vec<f64>> {
    match kind {
        ModelKind::Community(s) => community_features(ctx, s, inst, rng),
        ModelKind::SampleFriends => {
            let idx = choose_community(Strategy::Nearest, ctx.communities, inst.target.point, rng)?;
            let pool = &ctx.mobility.virtual_communities(ctx.user).ok()?[idx];
            let v = &pool[rng.gen_range(0..pool.len())];
            Some(ctx.community_schema(&v.profile, &v.stats, inst).to_vec())
        }
        ModelKind::Friends => {
            let prof = ctx.mobility.friend_set_profile(ctx.user).ok()?;
            let [hour, day] = ctx.time_pair(inst.slot);
            Some(vec![ctx.cap(prof.distance_to(inst.target.point)), hour, day])
        }
        ModelKind::User => ctx.user_schema(inst).map(|u| u.to_vec()),
        ModelKind::UserCommunity => {
            let u = ctx.user_schema(inst)?;
            let c = community_features(ctx, Strategy::Nearest, inst, rng)?;
            Some(u.into_iter().chain(c).collect())
        }
        ModelKind::Psmm => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub lr: f64,
    pub l2: f64,
    pub epochs: usize,
    pub grad_tol: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            lr: 0.1,
            l2: 1e-4,
            epochs: 500,
            grad_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub feature_names: Vec<String>,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

impl LogisticModel {
    /// Untrained model with zero weights and identity standardization.
    pub fn zeros(feature_names: &[&str]) -> Self {
        let d = feature_names.len();
        LogisticModel {
            feature_names: feature_names.iter().map(|s| s.to_string()).collect(),
            weights: vec![0.0; d],
            bias: 0.0,
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    pub fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn predict_proba(&self, x: &[f64]) -> f64 {
        let z = self.standardize(x).iter().zip(&self.weights).map(|(a, w)| a * w).sum::<f64>() + self.bias;
        sigmoid(z)
    }
}

/// Mean negative log-likelihood plus `l2/2·|w|²` (bias unpenalized) and its
/// gradient `(d/dw, d/db)`, on already standardized rows.
pub fn logistic_loss_grad(weights: &[f64], bias: f64, xs: &[Vec<f64>], ys: &[bool], l2: f64) -> (f64, Vec<f64>, f64) {
    let n = xs.len() as f64;
    let mut loss = 0.0;
    let mut gw = vec![0.0; weights.len()];
    let mut gb = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        let z = x.iter().zip(weights).map(|(a, w)| a * w).sum::<f64>() + bias;
        loss += if y { softplus(-z) } else { softplus(z) };
        let r = sigmoid(z) - if y { 1.0 } else { 0.0 };
        for (g, a) in gw.iter_mut().zip(x) {
            *g += r * a;
        }
        gb += r;
    }
    loss /= n;
    gb /= n;
    for (g, w) in gw.iter_mut().zip(weights) {
        *g = *g / n + l2 * w;
    }
    loss += 0.5 * l2 * weights.iter().map(|w| w * w).sum::<f64>();
    (loss, gw, gb)
}

/// Per-column mean and population standard deviation; constant columns
/// get a deviation of 1.
pub fn column_stats(xs: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = xs.first().map_or(0, Vec::len);
    let n = xs.len() as f64;
    let mut mean = vec![0.0; d];
    for x in xs {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for x in xs {
        for ((s, v), m) in var.iter_mut().zip(x).zip(&mean) {
            *s += (v - m).powi(2);
        }
    }
    let std = var
        .into_iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

pub fn train_logistic(xs: &[Vec<f64>], ys: &[bool], names: &[&str], hyper: &Hyper) -> Result<LogisticModel> {
    train_logistic_traced(xs, ys, names, hyper).map(|(m, _)| m)
}

/// Full-batch gradient descent from zero weights; also returns the loss
/// before each step.
pub fn train_logistic_traced(
    xs: &[Vec<f64>],
    ys: &[bool],
    names: &[&str],
    hyper: &Hyper,
) -> Result<(LogisticModel, Vec<f64>)> {
    if xs.len() != ys.len() || xs.iter().any(|x| x.len() != names.len()) {
        return Err(Error::contract("instance rows must match labels and feature names"));
    }
    if xs.len() < 2 || ys.iter().all(|&y| y) || ys.iter().all(|&y| !y) {
        return Err(Error::DegenerateTraining);
    }
    let (mean, std) = column_stats(xs);
    let mut model = LogisticModel {
        mean,
        std,
        ..LogisticModel::zeros(names)
    };
    let zs: Vec<Vec<f64>> = xs.iter().map(|x| model.standardize(x)).collect();
    let mut trace = Vec::with_capacity(hyper.epochs + 1);
    for _ in 0..hyper.epochs {
        let (loss, gw, gb) = logistic_loss_grad(&model.weights, model.bias, &zs, ys, hyper.l2);
        trace.push(loss);
        let norm = (gw.iter().map(|g| g * g).sum::<f64>() + gb * gb).sqrt();
        if norm < hyper.grad_tol {
            return Ok((model, trace));
        }
        for (w, g) in model.weights.iter_mut().zip(&gw) {
            *w -= hyper.lr * g;
        }
        model.bias -= hyper.lr * gb;
    }
    trace.push(logistic_loss_grad(&model.weights, model.bias, &zs, ys, hyper.l2).0);
    Ok((model, trace))
}

pub const PSMM_MIN_CHECKINS: usize = 20;
pub const PSMM_HIT_RADIUS_M: f64 = 1000.0;
const HOURS_PER_WEEK: usize = 168;
const COV_RIDGE: f64 = 1e-6;
const EM_TOL: f64 = 1e-6;
const EM_MAX_ITERS: usize = 200;

/// Local east/north metres around an origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub origin: GeoPoint,
}

impl Plane {
    fn scale(&self) -> (f64, f64) {
        let k = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
        (k * self.origin.lat.to_radians().cos(), k)
    }

    pub fn project(&self, p: GeoPoint) -> [f64; 2] {
        let (sx, sy) = self.scale();
        [(p.lon - self.origin.lon) * sx, (p.lat - self.origin.lat) * sy]
    }

    pub fn unproject(&self, xy: [f64; 2]) -> GeoPoint {
        let (sx, sy) = self.scale();
        GeoPoint {
            lat: self.origin.lat + xy[1] / sy,
            lon: self.origin.lon + xy[0] / sx,
        }
    }
}

/// Bivariate Gaussian in plane metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian2 {
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
}

impl Gaussian2 {
    fn log_density(&self, x: [f64; 2]) -> f64 {
        let [[a, b], [_, d]] = self.cov;
        let det = a * d - b * b;
        let dx = x[0] - self.mean[0];
        let dy = x[1] - self.mean[1];
        let maha = (d * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det;
        -(2.0 * std::f64::consts::PI).ln() - 0.5 * det.ln() - 0.5 * maha
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsmmModel {
    pub plane: Plane,
    pub states: [Gaussian2; 2],
    pub mixing: [f64; 2],
    /// Per hour of week, the weight of each state.
    pub hour_weights: Vec<[f64; 2]>,
}

impl PsmmModel {
    pub fn state_mean(&self, k: usize) -> GeoPoint {
        self.plane.unproject(self.states[k].mean)
    }
}

fn two_means(xs: &[[f64; 2]], rng: &mut impl Rng) -> Vec<usize> {
    let d2 = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    let first = xs[rng.gen_range(0..xs.len())];
    let weights: Vec<f64> = xs.iter().map(|&x| d2(x, first)).collect();
    let total: f64 = weights.iter().sum();
    let second = if total > 0.0 {
        let mut t = rng.gen::<f64>() * total;
        let mut pick = xs.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            if t < *w {
                pick = i;
                break;
            }
            t -= w;
        }
        xs[pick]
    } else {
        xs[rng.gen_range(0..xs.len())]
    };
    let mut centers = [first, second];
    let mut labels = vec![0usize; xs.len()];
    for _ in 0..50 {
        let mut changed = false;
        for (l, &x) in labels.iter_mut().zip(xs) {
            let k = usize::from(d2(x, centers[1]) < d2(x, centers[0]));
            changed |= *l != k;
            *l = k;
        }
        for (k, c) in centers.iter_mut().enumerate() {
            let members: Vec<_> = xs.iter().zip(&labels).filter(|(_, &l)| l == k).map(|(x, _)| *x).collect();
            if !members.is_empty() {
                let n = members.len() as f64;
                *c = [
                    members.iter().map(|m| m[0]).sum::<f64>() / n,
                    members.iter().map(|m| m[1]).sum::<f64>() / n,
                ];
            }
        }
        if !changed {
            break;
        }
    }
    labels
}

fn weighted_gaussian(xs: &[[f64; 2]], w: impl Fn(usize) -> f64) -> Option<(Gaussian2, f64)> {
    let nk: f64 = (0..xs.len()).map(&w).sum();
    if nk < 1e-10 {
        return None;
    }
    let mut mean = [0.0; 2];
    for (i, x) in xs.iter().enumerate() {
        mean[0] += w(i) * x[0];
        mean[1] += w(i) * x[1];
    }
    mean = [mean[0] / nk, mean[1] / nk];
    let mut cov = [[0.0; 2]; 2];
    for (i, x) in xs.iter().enumerate() {
        let d = [x[0] - mean[0], x[1] - mean[1]];
        for r in 0..2 {
            for c in 0..2 {
                cov[r][c] += w(i) * d[r] * d[c];
            }
        }
    }
    for row in &mut cov {
        row.iter_mut().for_each(|v| *v /= nk);
    }
    cov[0][0] += COV_RIDGE;
    cov[1][1] += COV_RIDGE;
    Some((Gaussian2 { mean, cov }, nk))
}

/// Responsibilities and total log-likelihood.
fn e_step(xs: &[[f64; 2]], states: &[Gaussian2; 2], mixing: [f64; 2]) -> (Vec<[f64; 2]>, f64) {
    let mut ll = 0.0;
    let resp = xs
        .iter()
        .map(|&x| {
            let l = [
                mixing[0].ln() + states[0].log_density(x),
                mixing[1].ln() + states[1].log_density(x),
            ];
            let m = l[0].max(l[1]);
            let lse = m + ((l[0] - m).exp() + (l[1] - m).exp()).ln();
            ll += lse;
            [(l[0] - lse).exp(), (l[1] - lse).exp()]
        })
        .collect();
    (resp, ll)
}

pub fn psmm_fit(points: &[GeoPoint], slots: &[TimeSlot], seed: u64) -> Result<PsmmModel> {
    psmm_fit_traced(points, slots, seed).map(|(m, _)| m)
}

/// EM fit of the two-state model; also returns the log-likelihood of
/// every parameter set visited.
pub fn psmm_fit_traced(points: &[GeoPoint], slots: &[TimeSlot], seed: u64) -> Result<(PsmmModel, Vec<f64>)> {
    if points.len() != slots.len() {
        return Err(Error::contract("one time slot per point"));
    }
    if points.len() < PSMM_MIN_CHECKINS {
        return Err(Error::InsufficientData(format!(
            "{} check-ins, need {PSMM_MIN_CHECKINS}",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let plane = Plane {
        origin: GeoPoint {
            lat: points.iter().map(|p| p.lat).sum::<f64>() / n,
            lon: points.iter().map(|p| p.lon).sum::<f64>() / n,
        },
    };
    let xs: Vec<[f64; 2]> = points.iter().map(|&p| plane.project(p)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = two_means(&xs, &mut rng);
    let global = weighted_gaussian(&xs, |_| 1.0).expect("non-empty").0;
    let mut states = [global; 2];
    let mut mixing = [0.5; 2];
    for k in 0..2 {
        let count = labels.iter().filter(|&&l| l == k).count();
        if count >= 2 {
            states[k] = weighted_gaussian(&xs, |i| f64::from(u8::from(labels[i] == k))).expect("members").0;
        } else if let Some(i) = labels.iter().position(|&l| l == k) {
            states[k].mean = xs[i];
        }
        mixing[k] = count.max(1) as f64;
    }
    let total = mixing[0] + mixing[1];
    mixing = [mixing[0] / total, mixing[1] / total];

    let mut trace = Vec::new();
    let (mut resp, mut ll) = e_step(&xs, &states, mixing);
    trace.push(ll);
    for _ in 0..EM_MAX_ITERS {
        for k in 0..2 {
            if let Some((g, nk)) = weighted_gaussian(&xs, |i| resp[i][k]) {
                states[k] = g;
                mixing[k] = nk / n;
            }
        }
        let s = mixing[0] + mixing[1];
        mixing = [mixing[0] / s, mixing[1] / s];
        let (r, new_ll) = e_step(&xs, &states, mixing);
        resp = r;
        trace.push(new_ll);
        let done = (new_ll - ll).abs() < EM_TOL;
        ll = new_ll;
        if done {
            break;
        }
    }

    let mut sums = vec![[0.0f64; 2]; HOURS_PER_WEEK];
    let mut counts = vec![0usize; HOURS_PER_WEEK];
    for (r, s) in resp.iter().zip(slots) {
        let h = s.hour_of_week();
        sums[h][0] += r[0];
        sums[h][1] += r[1];
        counts[h] += 1;
    }
    let hour_weights = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| {
            let denom = c as f64 + 2.0;
            [(s[0] + 1.0) / denom, (s[1] + 1.0) / denom]
        })
        .collect();
    Ok((
        PsmmModel {
            plane,
            states,
            mixing,
            hour_weights,
        },
        trace,
    ))
}

/// Mean of the state weighted higher at the slot's hour of week; ties go to
/// state 0.
pub fn psmm_predict(model: &PsmmModel, slot: TimeSlot) -> GeoPoint {
    let w = model.hour_weights[slot.hour_of_week()];
    model.state_mean(usize::from(w[1] > w[0]))
}

/// Whether a prediction counts as a visit of the candidate.
pub fn psmm_hit(prediction: GeoPoint, candidate: GeoPoint, radius_m: f64) -> bool {
    haversine(prediction, candidate) <= radius_m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::communities::connectivity;
    use crate::corpus::BBox;
    use crate::geo::OwnerKind;

    fn scope() -> CityScope {
        CityScope {
            name: "t".into(),
            bbox: BBox::new(40.70, 40.71, -74.01, -74.00).unwrap(),
            timezone: chrono_tz::UTC,
        }
    }

    fn view(size: usize, conn: f64, centroid: Option<GeoPoint>) -> CommunityView {
        let centroids: Vec<_> = centroid.into_iter().collect();
        CommunityView {
            members: (0..size as u64).map(UserId).collect(),
            profile: MovementProfile {
                owner_kind: OwnerKind::Community,
                member_counts: vec![1; centroids.len()],
                centroids,
            },
            stats: CommunityStats {
                size,
                internal_edges: 0,
                connectivity: conn,
                total_checkins: 0,
                n_fma: 1,
            },
        }
    }

    fn uc(views: Vec<CommunityView>) -> UserCommunities {
        UserCommunities {
            owner: UserId(99),
            communities: views,
        }
    }

    #[test]
    fn negatives_avoid_positive_cell() {
        let grid = Grid::default();
        let s = scope();
        let c = CheckIn {
            user: UserId(1),
            time: chrono::Utc::now(),
            point: GeoPoint { lat: 40.7051, lon: -74.0049 },
        };
        let pos = positive_instance(&c, 0, &s, &grid);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let neg = sample_negative(&pos, &s, &grid, &mut rng).unwrap();
            assert_ne!(neg.target.cell, pos.target.cell);
            assert!(!neg.visited);
            assert_eq!(neg.slot, pos.slot);
        }
        let tiny = CityScope {
            bbox: BBox::new(40.7001, 40.7002, -74.0009, -74.0008).unwrap(),
            ..s
        };
        assert!(sample_negative(&pos, &tiny, &grid, &mut rng).is_err());
    }

    #[test]
    fn balanced_and_deterministic() {
        let grid = Grid::default();
        let s = scope();
        let cs: Vec<CheckIn> = (0..30)
            .map(|k| CheckIn {
                user: UserId(1),
                time: chrono::Utc::now(),
                point: GeoPoint {
                    lat: 40.701 + 0.0002 * k as f64,
                    lon: -74.005,
                },
            })
            .collect();
        let a = balanced_instances(&cs, &s, &grid, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = balanced_instances(&cs, &s, &grid, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().filter(|i| i.visited).count(), 30);
        assert_eq!(a.iter().filter(|i| !i.visited).count(), 30);
    }

    #[test]
    fn strategies() {
        let p = GeoPoint { lat: 40.705, lon: -74.005 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let one = uc(vec![view(4, 0.5, Some(p))]);
        for s in Strategy::ALL {
            assert_eq!(choose_community(s, &one, p, &mut rng), Some(0));
        }
        let two = uc(vec![view(3, 1.0, Some(p)), view(9, 0.2, Some(p))]);
        assert_eq!(choose_community(Strategy::MaxSize, &two, p, &mut rng), Some(1));
        assert_eq!(choose_community(Strategy::MaxCon, &two, p, &mut rng), Some(0));
        assert_eq!(choose_community(Strategy::Nearest, &two, p, &mut rng), Some(0));
        let hollow = uc(vec![view(50, 1.0, None), view(2, 0.1, Some(p))]);
        assert_eq!(choose_community(Strategy::MaxSize, &hollow, p, &mut rng), Some(1));
        assert_eq!(connectivity(4, 6), 1.0);
    }

    #[test]
    fn model_ids_round_trip() {
        for k in [
            ModelKind::Community(Strategy::Nearest),
            ModelKind::Community(Strategy::Random),
            ModelKind::Community(Strategy::MaxCon),
            ModelKind::SampleFriends,
            ModelKind::Friends,
            ModelKind::User,
            ModelKind::UserCommunity,
            ModelKind::Psmm,
        ] {
            assert_eq!(k.id().parse::<ModelKind>().unwrap(), k);
        }
        assert!("community:best".parse::<ModelKind>().is_err());
        assert_eq!(ModelKind::UserCommunity.feature_names().len(), 10);
    }

    #[test]
    fn zero_model_is_indifferent() {
        let m = LogisticModel::zeros(&COMMUNITY_FEATURES);
        assert_eq!(m.predict_proba(&[1e6, -3.0, 0.0, 7.0, 0.5, 1.0, 2.0]), 0.5);
    }

    #[test]
    fn separable_one_dimensional() {
        let xs: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64]).collect();
        let ys: Vec<bool> = (0..40).map(|i| i >= 20).collect();
        let m = train_logistic(&xs, &ys, &["x"], &Hyper::default()).unwrap();
        let acc = xs
            .iter()
            .zip(&ys)
            .filter(|(x, &y)| (m.predict_proba(x) >= 0.5) == y)
            .count();
        assert_eq!(acc, 40);
        assert!(matches!(
            train_logistic(&xs, &vec![true; 40], &["x"], &Hyper::default()),
            Err(Error::DegenerateTraining)
        ));
    }

    #[test]
    fn psmm_single_point() {
        let p = GeoPoint { lat: 40.705, lon: -74.005 };
        let pts = vec![p; 25];
        let slots = vec![TimeSlot { hour: 9, weekday: 1 }; 25];
        let m = psmm_fit(&pts, &slots, 1).unwrap();
        for k in 0..2 {
            assert!(haversine(m.state_mean(k), p) < 1e-6);
        }
        assert!(matches!(psmm_fit(&pts[..19], &slots[..19], 1), Err(Error::InsufficientData(_))));
        assert_eq!(psmm_fit(&pts, &slots, 1).unwrap(), m);
    }

    #[test]
    fn psmm_tie_goes_to_first_state() {
        let mut m = psmm_fit(
            &vec![GeoPoint { lat: 40.705, lon: -74.005 }; 20],
            &vec![TimeSlot { hour: 0, weekday: 0 }; 20],
            1,
        )
        .unwrap();
        m.states[1].mean = [5000.0, 0.0];
        let slot = TimeSlot { hour: 3, weekday: 4 };
        m.hour_weights[slot.hour_of_week()] = [0.5, 0.5];
        assert_eq!(psmm_predict(&m, slot), m.state_mean(0));
        m.hour_weights[slot.hour_of_week()] = [0.1, 0.9];
        assert_eq!(psmm_predict(&m, slot), m.state_mean(1));
        for w in &m.hour_weights {
            assert!((w[0] + w[1] - 1.0).abs() < 1e-12);
        }
    }
}
