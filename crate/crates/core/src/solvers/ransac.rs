use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::RansacConfig;
use crate::error::{Error, Result};
use crate::par;

/// Hypotheses drawn per parallel batch. Scoring is batched, selection is not:
/// results are scanned in draw order so early exit matches a one-at-a-time
/// loop exactly.
const BATCH: usize = 32;
const REFIT_ROUNDS: usize = 3;

/// Index permutation sorting correspondences lexicographically by their
/// coordinates. RANSAC runs on the sorted list, so the outcome does not
/// depend on the caller's ordering.
pub fn canonical_order(keys: &[Vec<f64>]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&a, &b| {
        keys[a]
            .iter()
            .zip(&keys[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    idx
}

fn required_iterations(inliers: usize, n: usize, sample_size: usize, confidence: f64) -> usize {
    let w = inliers as f64 / n as f64;
    let p_good = w.powi(sample_size as i32);
    if p_good >= 1.0 {
        return 1;
    }
    if p_good <= 0.0 {
        return usize::MAX;
    }
    let k = (1.0 - confidence).ln() / (1.0 - p_good).ln();
    if k.is_finite() {
        k.ceil().max(1.0) as usize
    } else {
        usize::MAX
    }
}

pub(crate) struct Outcome<H> {
    pub model: H,
    pub inliers: Vec<usize>,
    pub mean_residual: f64,
    pub iterations: usize,
}

/// Generic RANSAC over `n` items. `fit` solves a minimal sample, `refit`
/// solves an inlier set, `residual(h, i)` scores item `i`.
pub(crate) fn run<H, F, R, P>(
    n: usize,
    sample_size: usize,
    cfg: &RansacConfig,
    fit: F,
    residual: R,
    refit: P,
) -> Result<Outcome<H>>
where
    H: Send + Sync,
    F: Fn(&[usize]) -> Option<H> + Sync + Send,
    R: Fn(&H, usize) -> f64 + Sync + Send,
    P: Fn(&[usize]) -> Option<H>,
{
    cfg.validate()?;
    if n < sample_size {
        return Err(Error::InsufficientCorrespondences {
            found: n,
            needed: sample_size,
        });
    }
    let inliers_of = |h: &H| -> Vec<usize> {
        (0..n)
            .filter(|&i| residual(h, i) <= cfg.inlier_threshold)
            .collect()
    };
    let count_of = |h: &H| -> usize {
        (0..n)
            .filter(|&i| residual(h, i) <= cfg.inlier_threshold)
            .count()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(H, usize)> = None;
    let mut needed = cfg.max_iters;
    let mut drawn = 0;
    'outer: while drawn < needed {
        let len = BATCH.min(needed - drawn);
        let samples: Vec<Vec<usize>> = (0..len)
            .map(|_| rand::seq::index::sample(&mut rng, n, sample_size).into_vec())
            .collect();
        let scored = par::map_slice(&samples, |s| {
            fit(s).map(|h| {
                let c = count_of(&h);
                (h, c)
            })
        });
        for hyp in scored {
            drawn += 1;
            if let Some((h, c)) = hyp {
                if best.as_ref().is_none_or(|(_, bc)| c > *bc) {
                    needed = cfg
                        .max_iters
                        .min(required_iterations(c, n, sample_size, cfg.confidence));
                    best = Some((h, c));
                }
            }
            if drawn >= needed {
                break 'outer;
            }
        }
    }

    let best_count = best.as_ref().map_or(0, |(_, c)| *c);
    let Some((mut model, _)) = best.filter(|(_, c)| *c >= cfg.min_inlier_count) else {
        return Err(Error::NoConsensus {
            best: best_count,
            needed: cfg.min_inlier_count,
        });
    };
    let mut inliers = inliers_of(&model);
    for _ in 0..REFIT_ROUNDS {
        let Some(h) = refit(&inliers) else { break };
        let next = inliers_of(&h);
        if next.len() < inliers.len() {
            break;
        }
        let changed = next != inliers;
        model = h;
        inliers = next;
        if !changed {
            break;
        }
    }
    let mean_residual = inliers.iter().map(|&i| residual(&model, i)).sum::<f64>()
        / inliers.len().max(1) as f64;
    Ok(Outcome {
        model,
        inliers,
        mean_residual,
        iterations: drawn,
    })
}
