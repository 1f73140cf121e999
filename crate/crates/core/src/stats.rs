//! Population moments over finite, optionally weighted, samples.
//!
//! Every function here treats its input as the full population (divides by
//! `n`, not `n - 1`), which is what the response-level moment inequalities use.

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn variance(xs: &[f64]) -> f64 {
    covariance(xs, xs)
}

/// Two-pass population covariance.
pub fn covariance(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    if xs.is_empty() {
        return 0.0;
    }
    let mx = mean(xs);
    let my = mean(ys);
    xs.iter()
        .zip(ys)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum::<f64>()
        / xs.len() as f64
}

pub fn weighted_mean(xs: &[f64], ws: &[f64]) -> f64 {
    let total: f64 = ws.iter().sum();
    xs.iter().zip(ws).map(|(x, w)| x * w).sum::<f64>() / total
}

pub fn weighted_covariance(xs: &[f64], ys: &[f64], ws: &[f64]) -> f64 {
    let mx = weighted_mean(xs, ws);
    let my = weighted_mean(ys, ws);
    let total: f64 = ws.iter().sum();
    xs.iter()
        .zip(ys)
        .zip(ws)
        .map(|((x, y), w)| w * (x - mx) * (y - my))
        .sum::<f64>()
        / total
}

pub fn weighted_variance(xs: &[f64], ws: &[f64]) -> f64 {
    weighted_covariance(xs, xs, ws)
}

/// Elementwise product.
pub fn hadamard(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

/// Average ranks (1-based), ties share the mean of their positions.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation. `None` when either side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len());
    let rx = ranks(xs);
    let ry = ranks(ys);
    let vx = variance(&rx);
    let vy = variance(&ry);
    if vx <= 0.0 || vy <= 0.0 {
        return None;
    }
    Some(covariance(&rx, &ry) / (vx * vy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn population_moments() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(mean(&xs), 2.5);
        assert!((variance(&xs) - 1.25).abs() < 1e-15);
        let ys = [2.0, 4.0, 6.0, 8.0];
        assert!((covariance(&xs, &ys) - 2.5).abs() < 1e-15);
    }

    #[test]
    fn weighted_matches_unweighted_for_equal_weights() {
        let xs = [0.3, -1.0, 2.0];
        let ws = [2.0, 2.0, 2.0];
        assert!((weighted_variance(&xs, &ws) - variance(&xs)).abs() < 1e-15);
    }

    #[test]
    fn ranks_handle_ties() {
        assert_eq!(ranks(&[10.0, 20.0, 20.0, 5.0]), vec![2.0, 3.5, 3.5, 1.0]);
    }

    #[test]
    fn spearman_monotone_and_degenerate() {
        let t = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(spearman(&t, &[1.0, 4.0, 9.0, 16.0]), Some(1.0));
        assert_eq!(spearman(&t, &[3.0, 2.0, 1.0, -7.0]), Some(-1.0));
        assert_eq!(spearman(&t, &[1.0; 4]), None);
    }
}
