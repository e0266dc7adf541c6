//! Gaussian expectations by quadrature.
//!
//! Smooth integrands use Gauss–Hermite rules. Integrands with kinks (such as
//! clipping) converge only algebraically under Gauss–Hermite, so they are
//! integrated with composite Gauss–Legendre panels split at the kinks.

use std::f64::consts::PI;
use std::num::NonZeroUsize;

use gauss_quad::{GaussHermite, GaussLegendre};

/// Standard-normal mass beyond this many deviations is below 1e-22.
pub(crate) const TAIL: f64 = 10.0;
/// Widest composite panel, in standard deviations.
const MAX_PANEL: f64 = 2.0;

fn phi(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Nodes and weights with `Σ w f(z) ≈ E f(Z)`, `Z ~ N(0, 1)`.
pub(crate) fn hermite_rule(order: usize) -> Vec<(f64, f64)> {
    let rule = GaussHermite::new(NonZeroUsize::new(order).expect("order is positive"));
    rule.as_node_weight_pairs()
        .iter()
        .map(|&(x, w)| (x * 2f64.sqrt(), w / PI.sqrt()))
        .collect()
}

/// Composite rule for `∫ f(z) φ(z) dz` over `[−TAIL, TAIL]`, with panel edges
/// at every breakpoint inside the range.
pub(crate) fn composite_rule(order: usize, breakpoints: &[f64]) -> Vec<(f64, f64)> {
    let rule = GaussLegendre::new(NonZeroUsize::new(order).expect("order is positive"));
    let base = rule.as_node_weight_pairs();

    let mut edges: Vec<f64> = breakpoints
        .iter()
        .copied()
        .filter(|b| b.is_finite() && b.abs() < TAIL)
        .chain([-TAIL, TAIL])
        .collect();
    edges.sort_by(f64::total_cmp);
    edges.dedup();

    let mut out = Vec::new();
    for w in edges.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b - a <= 0.0 {
            continue;
        }
        let pieces = ((b - a) / MAX_PANEL).ceil().max(1.0) as usize;
        let step = (b - a) / pieces as f64;
        for p in 0..pieces {
            let lo = a + step * p as f64;
            let half = 0.5 * step;
            let mid = lo + half;
            for &(x, wt) in base {
                let z = mid + half * x;
                out.push((z, half * wt * phi(z)));
            }
        }
    }
    out
}

/// `E f(Z)` for standard normal `Z`, choosing the rule by whether `f` has kinks.
pub(crate) fn expect_standard<F: Fn(f64) -> f64>(f: F, kinks: &[f64], order: usize) -> f64 {
    let rule = if kinks.is_empty() {
        hermite_rule(order)
    } else {
        composite_rule(order, kinks)
    };
    rule.iter().map(|&(z, w)| w * f(z)).sum()
}
