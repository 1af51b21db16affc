use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// EER by brute force: FAR and FRR are recounted from scratch at `+∞` and at
/// every distinct score (accept iff `score >= t`), then the first point with
/// `FRR <= FAR` is intersected with the previous one along the diagonal.
/// Returns the rate and whether it fell exactly on an operating point.
pub fn eer_sweep(scores: &[(f64, bool)]) -> (f64, bool) {
    let nt = scores.iter().filter(|s| s.1).count() as f64;
    let nn = scores.len() as f64 - nt;
    let mut thresholds: Vec<f64> = scores.iter().map(|s| s.0).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    thresholds.insert(0, f64::INFINITY);
    let rates = |t: f64| {
        let fa = scores.iter().filter(|s| !s.1 && s.0 >= t).count() as f64 / nn;
        let fr = scores.iter().filter(|s| s.1 && s.0 < t).count() as f64 / nt;
        (fa, fr)
    };
    let mut prev = rates(thresholds[0]);
    for &t in &thresholds[1..] {
        let (fa, fr) = rates(t);
        if fr == fa {
            return (fa, true);
        }
        if fr < fa {
            let (d0, d1) = (prev.1 - prev.0, fr - fa);
            let s = d0 / (d0 - d1);
            return (prev.0 + s * (fa - prev.0), false);
        }
        prev = (fa, fr);
    }
    unreachable!("the lowest threshold accepts everything")
}

/// Mann–Whitney estimate of P(target > non-target), ties counted ½.
pub fn auc_pairwise(scores: &[(f64, bool)]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for a in scores.iter().filter(|s| s.1) {
        for b in scores.iter().filter(|s| !s.1) {
            pairs += 1.0;
            if a.0 > b.0 {
                wins += 1.0;
            } else if a.0 == b.0 {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Random labelled scores with at least one of each class; with `ties` the
/// scores are quantized to a coarse grid so many coincide.
pub fn random_scores(rng: &mut ChaCha8Rng, ties: bool) -> Vec<(f64, bool)> {
    let n = rng.random_range(2..=60);
    let shift = rng.random_range(0.0..2.0);
    let mut out: Vec<(f64, bool)> = (0..n)
        .map(|i| {
            let target = match i {
                0 => true,
                1 => false,
                _ => rng.random::<bool>(),
            };
            let mut s: f64 = rng.random_range(-1.0..1.0) + if target { shift } else { 0.0 };
            if ties {
                s = (s * 4.0).round() / 4.0;
            }
            (s, target)
        })
        .collect();
    out.rotate_left(rng.random_range(0..n));
    out
}
