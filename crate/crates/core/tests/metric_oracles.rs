use gradcal::metrics::{ada_ece, brier_score, classwise_ece, ece, PredictionSet};
use gradcal::numkit::{one_hot, softmax, ProbVector, RngStream};
use proptest::prelude::*;

/// Straight from the definition: loop over bins, then over samples.
fn brute_ece(conf: &[f64], hit: &[f64], m: usize) -> f64 {
    let n = conf.len() as f64;
    let mut total = 0.0;
    for b in 0..m {
        let lo = b as f64 / m as f64;
        let hi = (b + 1) as f64 / m as f64;
        let members: Vec<usize> = (0..conf.len())
            .filter(|&i| conf[i] >= lo && (conf[i] < hi || (b == m - 1 && conf[i] <= 1.0)))
            .collect();
        if members.is_empty() {
            continue;
        }
        let c = members.iter().map(|&i| conf[i]).sum::<f64>() / members.len() as f64;
        let a = members.iter().map(|&i| hit[i]).sum::<f64>() / members.len() as f64;
        total += members.len() as f64 / n * (a - c).abs();
    }
    total
}

fn brute_ada_ece(conf: &[f64], hit: &[f64], m: usize) -> f64 {
    let n = conf.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| conf[a].partial_cmp(&conf[b]).unwrap().then(hit[a].partial_cmp(&hit[b]).unwrap()).then(a.cmp(&b)));
    let mut total = 0.0;
    let mut start = 0;
    for b in 0..m {
        let size = n / m + usize::from(b < n % m);
        let idx = &order[start..start + size];
        let c = idx.iter().map(|&i| conf[i]).sum::<f64>() / size as f64;
        let a = idx.iter().map(|&i| hit[i]).sum::<f64>() / size as f64;
        total += size as f64 / n as f64 * (a - c).abs();
        start += size;
    }
    total
}

fn random_set(rng: &mut RngStream) -> (PredictionSet, usize) {
    let n = 5 + (rng.uniform() * 46.0) as usize;
    let k = 2 + (rng.uniform() * 4.0) as usize;
    let m = 1 + (rng.uniform() * 5.0) as usize;
    let probs: Vec<ProbVector> = (0..n)
        .map(|_| {
            let logits: Vec<f64> = (0..k).map(|_| 2.0 * rng.normal()).collect();
            softmax(&logits, 1.0).unwrap()
        })
        .collect();
    let labels = (0..n).map(|_| (rng.uniform() * k as f64) as usize).collect();
    (PredictionSet::new(probs, labels).unwrap(), m.min(n))
}

#[test]
fn metrics_agree_with_brute_force() {
    let mut rng = RngStream::new(314);
    for _ in 0..100 {
        let (set, m) = random_set(&mut rng);
        let conf: Vec<f64> = set.probs().iter().map(|p| p.confidence()).collect();
        let hit: Vec<f64> =
            set.probs().iter().zip(set.labels()).map(|(p, &y)| f64::from(u8::from(p.argmax() == y))).collect();
        assert!((ece(&set, m).unwrap().0 - brute_ece(&conf, &hit, m)).abs() < 1e-12);
        assert!((ada_ece(&set, m).unwrap().0 - brute_ada_ece(&conf, &hit, m)).abs() < 1e-12);

        let k = set.num_classes();
        let per_class: f64 = (0..k)
            .map(|j| {
                let pj: Vec<f64> = set.probs().iter().map(|p| p[j]).collect();
                let yj: Vec<f64> = set.labels().iter().map(|&y| f64::from(u8::from(y == j))).collect();
                brute_ece(&pj, &yj, m)
            })
            .sum();
        assert!((classwise_ece(&set, m).unwrap() - per_class / k as f64).abs() < 1e-12);
    }
}

#[test]
fn edge_confidences_land_in_upper_bin() {
    // exactly on an edge goes up; 1.0 stays in the last bin
    let probs = vec![
        ProbVector::new(vec![0.6, 0.4]).unwrap(),
        ProbVector::new(vec![1.0, 0.0]).unwrap(),
    ];
    let set = PredictionSet::new(probs, vec![0, 0]).unwrap();
    let (_, report) = ece(&set, 5).unwrap();
    assert_eq!(report.bins[3].count, 1);
    assert_eq!(report.bins[4].count, 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn metrics_are_permutation_invariant(seed in any::<u64>(), swap_seed in any::<u64>()) {
        let mut rng = RngStream::new(seed);
        let (set, m) = random_set(&mut rng);
        let mut order: Vec<usize> = (0..set.len()).collect();
        RngStream::new(swap_seed).shuffle(&mut order);
        let shuffled = PredictionSet::new(
            order.iter().map(|&i| set.probs()[i].clone()).collect(),
            order.iter().map(|&i| set.labels()[i]).collect(),
        ).unwrap();
        prop_assert!((ece(&set, m).unwrap().0 - ece(&shuffled, m).unwrap().0).abs() < 1e-12);
        prop_assert!((ada_ece(&set, m).unwrap().0 - ada_ece(&shuffled, m).unwrap().0).abs() < 1e-12);
        prop_assert!((classwise_ece(&set, m).unwrap() - classwise_ece(&shuffled, m).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ece_is_bounded(seed in any::<u64>()) {
        let (set, m) = random_set(&mut RngStream::new(seed));
        let e = ece(&set, m).unwrap().0;
        prop_assert!((0.0..=1.0).contains(&e));
    }

    #[test]
    fn brier_is_bounded(logits in prop::collection::vec(-10.0f64..10.0, 2..8), t in 0usize..8) {
        let t = t % logits.len();
        let b = brier_score(&softmax(&logits, 1.0).unwrap(), &one_hot(t, logits.len()).unwrap());
        prop_assert!((0.0..=2.0).contains(&b));
    }
}
