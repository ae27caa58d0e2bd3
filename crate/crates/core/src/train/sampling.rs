//! Uncertainty-guided choice of supervision points on a logit map.

use rand::seq::index;
use rand::Rng;

/// Picks `n_points` pixel indices: `n_points·oversample` candidates are
/// drawn without replacement (all pixels if that covers the map), the
/// `importance·n_points` candidates with the smallest `|logit|` are kept
/// and the rest are drawn uniformly from the whole map.
pub fn sample_uncertain_points(
    logits: &[f64],
    n_points: usize,
    oversample: f64,
    importance: f64,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let n_pix = logits.len();
    if n_pix == 0 || n_points == 0 {
        return Vec::new();
    }
    let n = if n_points > n_pix {
        log::warn!("{n_points} points requested from {n_pix} pixels; clamping");
        n_pix
    } else {
        n_points
    };
    let n_cand = ((n as f64 * oversample.max(1.0)).ceil() as usize).min(n_pix);
    let mut cand: Vec<usize> = if n_cand == n_pix {
        (0..n_pix).collect()
    } else {
        index::sample(rng, n_pix, n_cand).into_vec()
    };
    let n_imp = ((importance.clamp(0.0, 1.0) * n as f64).round() as usize).min(n);
    cand.sort_by(|&a, &b| logits[a].abs().total_cmp(&logits[b].abs()));
    let mut out: Vec<usize> = cand[..n_imp].to_vec();
    out.extend((n_imp..n).map(|_| rng.gen_range(0..n_pix)));
    out
}
