use bood_core::boundary::{estimate_distance, perturb_step, select_boundary, BoundaryConfig, DistanceTable};
use bood_core::latent::{default_class_names, AnchorSet, CosineClassifier, FeatureClassifier, LatentFeature};
use bood_core::nn::Matrix;
use bood_core::par::Exec;
use bood_core::rng::seeded;
use rand::Rng;

fn toy() -> CosineClassifier {
    let anchors = AnchorSet::from_rows(default_class_names(2), &Matrix::identity(2)).unwrap();
    CosineClassifier::new(anchors, 1.0).unwrap()
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Signed-gradient ascent on the 2-anchor problem worked out in polar
/// coordinates: with anchors e1, e2 and t = 1 the logits are (cos θ, sin θ),
/// so the class-0 loss depends on θ alone, with
/// dℓ/dθ = p₁ (sin θ + cos θ) and ∇θ = (−sin θ, cos θ)/r.
fn polar_step(z: [f64; 2], alpha: f64) -> [f64; 2] {
    let (x, y) = (z[0], z[1]);
    let r = x.hypot(y);
    let (s, c) = (y / r, x / r);
    let p1 = 1.0 / (1.0 + (c - s).exp());
    let dtheta = p1 * (s + c);
    let g = [dtheta * -s / r, dtheta * c / r];
    [x + alpha * sign(g[0]), y + alpha * sign(g[1])]
}

fn polar_distance(mut z: [f64; 2], alpha: f64, max_steps: usize) -> (Option<usize>, [f64; 2]) {
    let class0 = |z: [f64; 2]| z[0] >= z[1];
    if !class0(z) {
        return (Some(0), z);
    }
    for k in 1..=max_steps {
        z = polar_step(z, alpha);
        if !class0(z) {
            return (Some(k), z);
        }
    }
    (None, z)
}

#[test]
fn golden_distance_matches_polar_oracle() {
    let (k_ref, z_ref) = polar_distance([1.0, 0.0], 0.015, 100);
    assert_eq!(k_ref, Some(34));
    let (k, z) = estimate_distance(&toy(), &[1.0, 0.0], 0, 0.015, 100).unwrap();
    assert_eq!(k, Some(34));
    assert_eq!(z, z_ref.to_vec());
    // closed form of the same walk: (1 − α(k−1), αk)
    assert!((z[0] - (1.0 - 0.015 * 33.0)).abs() < 1e-12);
    assert!((z[1] - 0.015 * 34.0).abs() < 1e-12);
}

#[test]
fn polar_oracle_agrees_on_random_features() {
    let clf = toy();
    let mut rng = seeded(11);
    for _ in 0..200 {
        let theta: f64 = rng.random_range(-1.2..1.2);
        let r: f64 = rng.random_range(0.3..3.0);
        let z = [r * theta.cos(), r * theta.sin()];
        let step = perturb_step(&clf, &z, 0, 0.015).unwrap();
        assert_eq!(step, polar_step(z, 0.015).to_vec(), "theta {theta}");
        let (k, _) = estimate_distance(&clf, &z, 0, 0.015, 100).unwrap();
        assert_eq!(k, polar_distance(z, 0.015, 100).0);
    }
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0;
        for &t in &idx[i..=j] {
            ranks[t] = r;
        }
        i = j + 1;
    }
    ranks
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn toy_features(seed: u64, n: usize) -> Vec<LatentFeature> {
    let mut rng = seeded(seed);
    (0..n)
        .map(|i| {
            let theta: f64 = rng.random_range(0.0..std::f64::consts::FRAC_PI_4);
            LatentFeature::new(vec![theta.cos(), theta.sin()], 0, i).unwrap()
        })
        .collect()
}

#[test]
fn distance_tracks_angular_margin() {
    let feats = toy_features(5, 50);
    let cfg = BoundaryConfig { alpha: 0.015, max_steps: 100, select_percent: 5.0 };
    let table = DistanceTable::build(&toy(), &feats, &cfg, Exec::default()).unwrap();
    let margins: Vec<f64> = feats.iter().map(|f| std::f64::consts::FRAC_PI_4 - f.z[1].atan2(f.z[0])).collect();
    let ks: Vec<f64> = table.records.iter().map(|r| r.steps.expect("unit features cross") as f64).collect();
    let rho = spearman(&margins, &ks);
    assert!(rho >= 0.9, "spearman {rho}");
    assert!(table.records.iter().all(|r| r.steps.unwrap() >= 1));
}

#[test]
fn misclassified_features_have_zero_distance() {
    let clf = toy();
    for z in [[0.0, 1.0], [0.2, 0.9], [-1.0, 0.5]] {
        let (k, out) = estimate_distance(&clf, &z, 0, 0.015, 100).unwrap();
        assert_eq!(k, Some(0));
        assert_eq!(out, z.to_vec());
    }
}

#[test]
fn ascent_steps_rarely_decrease_the_loss() {
    let clf = toy();
    let (mut steps, mut bad) = (0usize, 0usize);
    for f in toy_features(9, 50) {
        for alpha in [0.005, 0.01, 0.015] {
            let mut z = f.z.clone();
            // the ascent loop of the distance estimate: stop at the flip
            for _ in 0..100 {
                if clf.predict(&z).unwrap() != 0 {
                    break;
                }
                let (before, _) = clf.loss_and_grad(&z, 0).unwrap();
                let next = perturb_step(&clf, &z, 0, alpha).unwrap();
                let (after, _) = clf.loss_and_grad(&next, 0).unwrap();
                steps += 1;
                if next != z && after <= before {
                    bad += 1;
                }
                z = next;
            }
        }
    }
    assert!((bad as f64) <= 0.02 * steps as f64, "{bad} of {steps} steps lowered the loss");
}

#[test]
fn distances_are_bit_deterministic_across_executors() {
    let feats = toy_features(21, 64);
    let cfg = BoundaryConfig::default();
    let a = DistanceTable::build(&toy(), &feats, &cfg, Exec::Sequential).unwrap();
    let b = DistanceTable::build(&toy(), &feats, &cfg, Exec::Parallel).unwrap();
    let c = DistanceTable::build(&toy(), &feats, &cfg, Exec::Parallel).unwrap();
    assert_eq!(a, b);
    assert_eq!(b, c);
    let sel = select_boundary(&a, 10.0).unwrap();
    assert_eq!(sel.len(), 7);
    let ks: Vec<usize> = sel.iter().map(|&i| a.records[i].steps.unwrap()).collect();
    assert!(ks.windows(2).all(|w| w[0] <= w[1]));
}
