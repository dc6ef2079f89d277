mod common;

use chrono_tz::America::New_York;
use comloc::eval::chronological_split;
use comloc::geo::{haversine, GeoPoint};
use comloc::corpus::{CityScope, UserId};
use comloc::predict::{
    logistic_loss_grad, psmm_fit, psmm_fit_traced, psmm_hit, psmm_predict, train_logistic_traced, Hyper,
    PSMM_HIT_RADIUS_M,
};
use comloc::synth::{displaced, two_state_user};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let d = rng.gen_range(1..=7);
        let (xs, ys) = common::logistic_dataset(&mut rng, 60, d);
        let w: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b = rng.gen_range(-1.0..1.0);
        let l2 = [0.0, 1e-4, 0.1][rng.gen_range(0..3)];
        let (_, gw, gb) = logistic_loss_grad(&w, b, &xs, &ys, l2);
        let loss_at = |w: &[f64], b: f64| logistic_loss_grad(w, b, &xs, &ys, l2).0;
        let rel = |analytic: f64, numeric: f64| (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        for j in 0..d {
            let (mut up, mut down) = (w.clone(), w.clone());
            up[j] += h;
            down[j] -= h;
            let numeric = (loss_at(&up, b) - loss_at(&down, b)) / (2.0 * h);
            worst = worst.max(rel(gw[j], numeric));
        }
        let numeric = (loss_at(&w, b + h) - loss_at(&w, b - h)) / (2.0 * h);
        worst = worst.max(rel(gb, numeric));
    }
    assert!(worst < 1e-5, "max relative error {worst}");
}

#[test]
fn gradient_descent_loss_never_increases() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..10 {
        let (xs, ys) = common::logistic_dataset(&mut rng, 200, 5);
        let names = ["a", "b", "c", "d", "e"];
        let (_, trace) = train_logistic_traced(&xs, &ys, &names, &Hyper::default()).unwrap();
        assert!(trace.len() > 1);
        for pair in trace.windows(2) {
            assert!(pair[1] <= pair[0], "loss rose from {} to {}", pair[0], pair[1]);
        }
    }
}

fn scope() -> CityScope {
    CityScope {
        name: "test".into(),
        bbox: comloc::corpus::BBox::new(40.0, 41.5, -74.5, -73.0).unwrap(),
        timezone: New_York,
    }
}

#[test]
fn em_log_likelihood_is_monotone() {
    let day = GeoPoint::new(40.75, -73.98).unwrap();
    for seed in 0..10 {
        let night = displaced(day, 3000.0 + 500.0 * seed as f64, -2000.0);
        let cs = two_state_user(UserId(seed), day, night, 250.0, 150, &New_York, seed);
        let pts: Vec<_> = cs.iter().map(|c| c.point).collect();
        let slots: Vec<_> = cs.iter().map(|c| scope().local_slot(c.time)).collect();
        let (_, trace) = psmm_fit_traced(&pts, &slots, seed).unwrap();
        assert!(trace.len() >= 2);
        for pair in trace.windows(2) {
            assert!(pair[1] >= pair[0] - 1e-8, "log-likelihood fell from {} to {}", pair[0], pair[1]);
        }
    }
}

#[test]
fn two_state_users_are_recovered() {
    let scope = scope();
    let day = GeoPoint::new(40.72, -73.99).unwrap();
    let night = displaced(day, 8000.0, 0.0);
    for seed in 0..5 {
        let cs = two_state_user(UserId(seed), day, night, 200.0, 300, &New_York, 40 + seed);
        let (train, test) = chronological_split(&cs, 0.8).unwrap();
        let pts: Vec<_> = train.iter().map(|c| c.point).collect();
        let slots: Vec<_> = train.iter().map(|c| scope.local_slot(c.time)).collect();
        let model = psmm_fit(&pts, &slots, seed).unwrap();
        let (m0, m1) = (model.state_mean(0), model.state_mean(1));
        let err = (haversine(m0, day).max(haversine(m1, night))).min(haversine(m0, night).max(haversine(m1, day)));
        assert!(err <= 300.0, "seed {seed}: mean error {err} m");
        let hits = test
            .iter()
            .filter(|c| psmm_hit(psmm_predict(&model, scope.local_slot(c.time)), c.point, PSMM_HIT_RADIUS_M))
            .count();
        let acc = hits as f64 / test.len() as f64;
        assert!(acc >= 0.8, "seed {seed}: accuracy {acc}");
    }
}
