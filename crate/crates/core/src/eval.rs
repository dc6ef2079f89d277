//! Splits, classification metrics and experiment reports.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{time_histograms, CheckIn, TimeHistograms, UserId};
use crate::derive_seed;
use crate::diversity::{bucket_edge, bucket_index, community_entropy, pearson_correlation, EntropyParams};
use crate::error::{Error, Result};
use crate::geo::{frequent_movement_areas, haversine, Grid, OwnerKind};
use crate::influence::SocialMobility;
use crate::predict::{
    balanced_instances, baseline_features, psmm_fit, psmm_hit, psmm_predict, train_logistic, FeatureContext, Hyper,
    LogisticModel, ModelKind, OwnHistory, PredictionInstance, PsmmModel, Strategy,
    PSMM_HIT_RADIUS_M,
};

pub const MIN_SPLIT_CHECKINS: usize = 5;

/// Number of leading check-ins used for training: `⌈ratio·n⌉`.
pub fn chronological_split(checkins: &[CheckIn], ratio: f64) -> Result<(&[CheckIn], &[CheckIn])> {
    if checkins.len() < MIN_SPLIT_CHECKINS {
        return Err(Error::InsufficientData(format!(
            "{} check-ins, need {MIN_SPLIT_CHECKINS}",
            checkins.len()
        )));
    }
    let n_train = ((ratio * checkins.len() as f64) - 1e-9).ceil() as usize;
    Ok(checkins.split_at(n_train.min(checkins.len())))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn from_predictions(pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut c = ConfusionCounts::default();
        for (predicted, actual) in pairs {
            match (predicted, actual) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio_or_zero(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn confusion_metrics(c: &ConfusionCounts) -> Result<Metrics> {
    if c.total() == 0 {
        return Err(Error::contract("no scored instances"));
    }
    let precision = ratio_or_zero(c.tp, c.tp + c.fp);
    let recall = ratio_or_zero(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(Metrics {
        accuracy: (c.tp + c.tn) as f64 / c.total() as f64,
        precision,
        recall,
        f1,
    })
}

/// Rank estimate of the area under the ROC curve; tied pairs count half.
pub fn auc(scores: &[(f64, bool)]) -> Result<f64> {
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (mut n_pos, mut n_neg) = (0usize, 0usize);
    // Negatives strictly below the current group, counted twice to keep
    // half-pairs integral.
    let mut twice_wins = 0u128;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        let group_pos = sorted[i..j].iter().filter(|s| s.1).count();
        let group_neg = j - i - group_pos;
        twice_wins += (group_pos * (2 * n_neg + group_neg)) as u128;
        n_pos += group_pos;
        n_neg += group_neg;
        i = j;
    }
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc);
    }
    Ok(twice_wins as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Protocol {
    /// Train on the leading part of each history, test on the rest.
    Chronological,
    /// Shuffled k-fold over check-ins; scores are pooled across folds.
    KFold { folds: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub models: Vec<ModelKind>,
    pub seed: u64,
    pub train_ratio: f64,
    pub cell_deg: f64,
    pub entropy: EntropyParams,
    pub bucket_width: f64,
    pub protocol: Protocol,
    pub hyper: Hyper,
    /// A predicted location within this distance counts as a hit.
    pub hit_radius_m: f64,
    /// Model whose per-user AUC feeds the entropy buckets.
    pub reference: ModelKind,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            models: vec![
                ModelKind::Community(Strategy::Nearest),
                ModelKind::Community(Strategy::MaxSize),
                ModelKind::Community(Strategy::MaxCon),
                ModelKind::Community(Strategy::Random),
                ModelKind::SampleFriends,
                ModelKind::Friends,
                ModelKind::User,
                ModelKind::UserCommunity,
                ModelKind::Psmm,
            ],
            seed: 7,
            train_ratio: 0.8,
            cell_deg: 0.001,
            entropy: EntropyParams::default(),
            bucket_width: 0.2,
            protocol: Protocol::Chronological,
            hyper: Hyper::default(),
            hit_radius_m: PSMM_HIT_RADIUS_M,
            reference: ModelKind::Community(Strategy::Nearest),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserScore {
    pub user: UserId,
    pub auc: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub skipped_instances: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub auc: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl MetricSummary {
    const NAMES: [&'static str; 5] = ["auc", "accuracy", "precision", "recall", "f1"];

    fn values(&self) -> [f64; 5] {
        [self.auc, self.accuracy, self.precision, self.recall, self.f1]
    }

    fn from_fn(f: impl Fn(&dyn Fn(&UserScore) -> f64) -> f64) -> Self {
        MetricSummary {
            auc: f(&|s| s.auc),
            accuracy: f(&|s| s.accuracy),
            precision: f(&|s| s.precision),
            recall: f(&|s| s.recall),
            f1: f(&|s| s.f1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub model: String,
    pub n_users: usize,
    /// Macro averages over users with valid scores.
    pub mean: Option<MetricSummary>,
    /// Population standard deviations across those users.
    pub stddev: Option<MetricSummary>,
    /// Excluded users by reason.
    pub skipped: BTreeMap<String, usize>,
    pub per_user: Vec<UserScore>,
}

impl ModelReport {
    fn from_scores(model: String, per_user: Vec<UserScore>, skipped: BTreeMap<String, usize>) -> Self {
        let n = per_user.len();
        let (mean, stddev) = if n == 0 {
            (None, None)
        } else {
            let mean = MetricSummary::from_fn(|f| per_user.iter().map(f).sum::<f64>() / n as f64);
            let m = mean;
            let stddev = MetricSummary::from_fn(|f| {
                let mu = per_user.iter().map(f).sum::<f64>() / n as f64;
                (per_user.iter().map(|s| (f(s) - mu).powi(2)).sum::<f64>() / n as f64).sqrt()
            });
            (Some(m), Some(stddev))
        };
        ModelReport {
            model,
            n_users: n,
            mean,
            stddev,
            skipped,
            per_user,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub bucket_lo: f64,
    pub bucket_hi: f64,
    pub n_users: usize,
    pub mean_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub n_users_requested: usize,
    pub protocol: Protocol,
    pub models: Vec<ModelReport>,
    pub reference_model: String,
    pub entropy_buckets: Vec<BucketRow>,
    /// Correlation between bucket midpoints and bucket mean AUC.
    pub entropy_auc_pearson: Option<f64>,
    pub notes: Vec<String>,
}

impl EvaluationReport {
    pub fn model(&self, id: &str) -> Option<&ModelReport> {
        self.models.iter().find(|m| m.model == id)
    }

    pub fn mean(&self, id: &str) -> Option<MetricSummary> {
        self.model(id).and_then(|m| m.mean)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["model", "metric", "mean", "stddev", "n_users"])?;
        for m in &self.models {
            let (Some(mean), Some(sd)) = (m.mean, m.stddev) else {
                continue;
            };
            for ((name, mu), s) in MetricSummary::NAMES.iter().zip(mean.values()).zip(sd.values()) {
                out.write_record([m.model.clone(), name.to_string(), mu.to_string(), s.to_string(), m.n_users.to_string()])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_buckets_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["bucket_lo", "bucket_hi", "n_users", "mean_auc"])?;
        for b in &self.entropy_buckets {
            out.write_record([
                b.bucket_lo.to_string(),
                b.bucket_hi.to_string(),
                b.n_users.to_string(),
                b.mean_auc.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

const NEGATIVE_TAG: u64 = 0x6e65_67;
const FOLD_TAG: u64 = 0x666f_6c64;

type ModelOutcome = std::result::Result<UserScore, &'static str>;

struct UserRun<'a> {
    sm: &'a SocialMobility,
    cfg: &'a ExperimentConfig,
    global: &'a TimeHistograms,
    user: UserId,
    checkins: &'a [CheckIn],
    n_train: usize,
    half: usize,
    instances: Vec<PredictionInstance>,
    own: OwnHistory,
}

fn reason(e: &Error) -> &'static str {
    match e {
        Error::InsufficientData(_) => "insufficient-data",
        Error::DegenerateTraining => "degenerate-training",
        Error::UndefinedAuc => "undefined-auc",
        Error::NoInfluencer(_) => "no-influencer",
        _ => "error",
    }
}

impl<'a> UserRun<'a> {
    fn new(
        sm: &'a SocialMobility,
        cfg: &'a ExperimentConfig,
        global: &'a TimeHistograms,
        user: UserId,
    ) -> std::result::Result<Self, &'static str> {
        let grid = Grid::new(cfg.cell_deg);
        let checkins = sm.corpus.checkins_of(user).map_err(|e| reason(&e))?;
        let (train, _) = chronological_split(checkins, cfg.train_ratio).map_err(|e| reason(&e))?;
        let half = checkins.len() / 2;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, user.0, NEGATIVE_TAG));
        let instances = balanced_instances(checkins, sm.scope(), &grid, &mut rng).map_err(|e| reason(&e))?;
        let first_half: Vec<_> = checkins[..half].iter().map(|c| c.point).collect();
        let own = OwnHistory {
            profile: frequent_movement_areas(&first_half, sm.cutoff_m, OwnerKind::User),
            counts: time_histograms(&checkins[..half], sm.scope()),
        };
        Ok(UserRun {
            sm,
            cfg,
            global,
            user,
            checkins,
            n_train: train.len(),
            half,
            instances,
            own,
        })
    }

    fn score(&self, pairs: &[(f64, bool, bool)], n_train: usize, skipped: usize) -> ModelOutcome {
        let scores: Vec<(f64, bool)> = pairs.iter().map(|&(s, _, y)| (s, y)).collect();
        let a = auc(&scores).map_err(|e| reason(&e))?;
        let m = confusion_metrics(&ConfusionCounts::from_predictions(pairs.iter().map(|&(_, p, y)| (p, y))))
            .map_err(|e| reason(&e))?;
        Ok(UserScore {
            user: self.user,
            auc: a,
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            n_train,
            n_test: pairs.len(),
            skipped_instances: skipped,
        })
    }

    fn fit_psmm(&self) -> std::result::Result<PsmmModel, &'static str> {
        let train = &self.checkins[..self.n_train];
        let pts: Vec<_> = train.iter().map(|c| c.point).collect();
        let slots: Vec<_> = train.iter().map(|c| self.sm.scope().local_slot(c.time)).collect();
        let seed = derive_seed(self.cfg.seed, self.user.0, ModelKind::Psmm.seed_tag());
        psmm_fit(&pts, &slots, seed).map_err(|e| reason(&e))
    }

    fn run_psmm(&self) -> ModelOutcome {
        let model = self.fit_psmm()?;
        let pairs: Vec<(f64, bool, bool)> = self
            .instances
            .iter()
            .filter(|i| i.checkin >= self.n_train)
            .map(|i| {
                let pred = psmm_predict(&model, i.slot);
                (-haversine(pred, i.target.point), psmm_hit(pred, i.target.point, self.cfg.hit_radius_m), i.visited)
            })
            .collect();
        self.score(&pairs, self.n_train, 0)
    }

    /// Feature rows aligned with `instances`; `None` where the model has
    /// no influencer for the instance.
    fn feature_rows(&self, kind: ModelKind) -> std::result::Result<Vec<Option<Vec<f64>>>, &'static str> {
        let uc = self.sm.communities(self.user).map_err(|e| reason(&e))?;
        let ctx = FeatureContext {
            mobility: self.sm,
            user: self.user,
            communities: uc,
            global: self.global,
            own: Some(&self.own),
            distance_cap: self.sm.scope().bbox.diagonal_m(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, self.user.0, kind.seed_tag()));
        let rows: Vec<Option<Vec<f64>>> = self
            .instances
            .iter()
            .map(|i| baseline_features(kind, &ctx, i, &mut rng))
            .collect();
        if rows.iter().all(Option::is_none) {
            return Err("no-influencer");
        }
        Ok(rows)
    }

    fn first_usable(&self, kind: ModelKind) -> usize {
        if kind.uses_own_history() {
            self.half
        } else {
            0
        }
    }

    fn fit_logistic(
        &self,
        kind: ModelKind,
        rows: &[Option<Vec<f64>>],
        train: &dyn Fn(usize) -> bool,
    ) -> std::result::Result<LogisticModel, &'static str> {
        let first = self.first_usable(kind);
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for (inst, row) in self.instances.iter().zip(rows) {
            if let (true, Some(x)) = (inst.checkin >= first && train(inst.checkin), row) {
                xs.push(x.clone());
                ys.push(inst.visited);
            }
        }
        train_logistic(&xs, &ys, &kind.feature_names(), &self.cfg.hyper).map_err(|e| reason(&e))
    }

    fn fit(&self, kind: ModelKind) -> std::result::Result<TrainedModel, &'static str> {
        match kind {
            ModelKind::Psmm => self.fit_psmm().map(TrainedModel::Psmm),
            k => {
                let rows = self.feature_rows(k)?;
                let n_train = self.n_train;
                self.fit_logistic(k, &rows, &|c| c < n_train).map(TrainedModel::Logistic)
            }
        }
    }

    fn run_logistic(&self, kind: ModelKind) -> ModelOutcome {
        let rows = self.feature_rows(kind)?;
        let skipped = rows.iter().filter(|r| r.is_none()).count();
        let first = self.first_usable(kind);
        let fit_and_score = |train: &dyn Fn(usize) -> bool, test: &dyn Fn(usize) -> bool| {
            let model = self.fit_logistic(kind, &rows, train)?;
            let n = self
                .instances
                .iter()
                .zip(&rows)
                .filter(|(inst, row)| inst.checkin >= first && train(inst.checkin) && row.is_some())
                .count();
            let pairs: Vec<(f64, bool, bool)> = self
                .instances
                .iter()
                .zip(&rows)
                .filter(|(inst, _)| inst.checkin >= first && test(inst.checkin))
                .filter_map(|(inst, row)| {
                    let p = model.predict_proba(row.as_ref()?);
                    Some((p, p >= 0.5, inst.visited))
                })
                .collect();
            Ok::<_, &'static str>((pairs, n))
        };
        match self.cfg.protocol {
            Protocol::Chronological => {
                let n_train = self.n_train;
                let (pairs, n) = fit_and_score(&|c| c < n_train, &|c| c >= n_train)?;
                self.score(&pairs, n, skipped)
            }
            Protocol::KFold { folds } => {
                let folds = folds.max(2);
                let mut order: Vec<usize> = (first..self.checkins.len()).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, self.user.0, FOLD_TAG));
                order.shuffle(&mut rng);
                let mut fold_of = vec![0usize; self.checkins.len()];
                for (pos, &c) in order.iter().enumerate() {
                    fold_of[c] = pos % folds;
                }
                let mut pooled = Vec::new();
                let mut n_train = 0;
                for f in 0..folds {
                    let (pairs, n) = fit_and_score(&|c| fold_of[c] != f, &|c| fold_of[c] == f)?;
                    pooled.extend(pairs);
                    n_train += n;
                }
                self.score(&pooled, n_train / folds, skipped)
            }
        }
    }

    fn run(&self, kind: ModelKind) -> ModelOutcome {
        match kind {
            ModelKind::Psmm => self.run_psmm(),
            k => self.run_logistic(k),
        }
    }
}

/// Trains and scores every configured model for each user; users that
/// cannot be scored are counted per reason.
pub fn run_experiment(sm: &SocialMobility, users: &BTreeSet<UserId>, cfg: &ExperimentConfig) -> EvaluationReport {
    let global = time_histograms(sm.corpus.all(), sm.scope());
    let outcomes: Vec<(UserId, Vec<ModelOutcome>)> = users
        .par_iter()
        .map(|&u| match UserRun::new(sm, cfg, &global, u) {
            Ok(run) => (u, cfg.models.iter().map(|&k| run.run(k)).collect()),
            Err(r) => (u, vec![Err(r); cfg.models.len()]),
        })
        .collect();

    let mut models = Vec::with_capacity(cfg.models.len());
    for (mi, kind) in cfg.models.iter().enumerate() {
        let mut scores = Vec::new();
        let mut skipped = BTreeMap::new();
        for (_, per_model) in &outcomes {
            match &per_model[mi] {
                Ok(s) => scores.push(s.clone()),
                Err(r) => *skipped.entry(r.to_string()).or_insert(0) += 1,
            }
        }
        models.push(ModelReport::from_scores(kind.id(), scores, skipped));
    }

    let reference = cfg.reference.id();
    let mut notes = Vec::new();
    if users.is_empty() {
        notes.push("no active users".to_string());
    }
    let mut entropy_buckets = Vec::new();
    let mut entropy_auc_pearson = None;
    if let Some(rep) = models.iter().find(|m| m.model == reference) {
        let mut by_bucket: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
        for s in &rep.per_user {
            let Ok(uc) = sm.communities(s.user) else { continue };
            let sizes: Vec<usize> = uc.communities.iter().map(|c| c.members.len()).collect();
            let Ok(h) = community_entropy(&sizes, cfg.entropy) else { continue };
            let e = by_bucket.entry(bucket_index(h, cfg.bucket_width)).or_insert((0, 0.0));
            e.0 += 1;
            e.1 += s.auc;
        }
        entropy_buckets = by_bucket
            .into_iter()
            .map(|(k, (n, sum))| BucketRow {
                bucket_lo: bucket_edge(k, cfg.bucket_width),
                bucket_hi: bucket_edge(k + 1, cfg.bucket_width),
                n_users: n,
                mean_auc: sum / n as f64,
            })
            .collect();
        let mids: Vec<f64> = entropy_buckets.iter().map(|b| 0.5 * (b.bucket_lo + b.bucket_hi)).collect();
        let aucs: Vec<f64> = entropy_buckets.iter().map(|b| b.mean_auc).collect();
        match pearson_correlation(&mids, &aucs) {
            Ok(r) => entropy_auc_pearson = Some(r),
            Err(e) => notes.push(format!("entropy/AUC correlation undefined: {e}")),
        }
    } else {
        notes.push(format!("reference model {reference} not requested"));
    }

    EvaluationReport {
        n_users_requested: users.len(),
        protocol: cfg.protocol,
        models,
        reference_model: reference,
        entropy_buckets,
        entropy_auc_pearson,
        notes,
    }
}

/// A fitted per-user model, as dumped by the training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum TrainedModel {
    Logistic(LogisticModel),
    Psmm(PsmmModel),
}

/// Fits one model per user on the chronological training portion, with
/// the same instances and seeds `run_experiment` uses. Users that cannot
/// be fitted map to the skip reason.
pub fn fit_models(
    sm: &SocialMobility,
    users: &BTreeSet<UserId>,
    kind: ModelKind,
    cfg: &ExperimentConfig,
) -> BTreeMap<UserId, std::result::Result<TrainedModel, String>> {
    let global = time_histograms(sm.corpus.all(), sm.scope());
    users
        .par_iter()
        .map(|&u| {
            let fitted = UserRun::new(sm, cfg, &global, u).and_then(|run| run.fit(kind));
            (u, fitted.map_err(str::to_string))
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}
