//! Distributional checks on finite-width inputs, scores and outputs.

use attnlimit_core::attention::{
    sample_inputs, sample_output_batch, sample_score_batch, AttentionConfig, Coordinate,
    ScalingRule, ScoreIndex,
};
use attnlimit_core::limitlaw::clip_second_moment;
use attnlimit_core::rng;
use attnlimit_core::stats::{ks_two_sample, moments};
use rayon::prelude::*;

fn config(width: usize, heads: usize, scaling: ScalingRule) -> AttentionConfig {
    AttentionConfig {
        width,
        heads,
        scaling,
        ..AttentionConfig::default()
    }
}

#[test]
fn inputs_are_uncorrelated_across_positions() {
    let c = config(4096, 1, ScalingRule::InvSqrtWidth);
    let x = sample_inputs(&c, 31).unwrap();
    let cross = x[0].iter().zip(&x[1]).map(|(a, b)| a * b).sum::<f64>() / 4096.0;
    assert!(cross.abs() <= 0.05, "cross moment {cross}");
}

#[test]
fn clipped_input_moment_matches_closed_form() {
    let c = AttentionConfig {
        clip_c: 1.0,
        ..config(4096, 1, ScalingRule::InvSqrtWidth)
    };
    let x = sample_inputs(&c, 32).unwrap();
    let m = x[0].iter().map(|v| v * v).sum::<f64>() / 4096.0;
    assert!((m - clip_second_moment(1.0).unwrap()).abs() <= 0.02, "{m}");
}

#[test]
fn score_variance_by_scaling() {
    let idx = ScoreIndex::FIRST;
    let sqrt =
        sample_score_batch(&config(256, 1, ScalingRule::InvSqrtWidth), 1, 20_000, idx).unwrap();
    let m = moments(&sqrt).unwrap();
    assert!(
        (0.9..=1.1).contains(&m.variance),
        "1/√n variance {}",
        m.variance
    );
    assert!(m.mean.abs() <= 4.0 * m.variance.sqrt() / 20_000f64.sqrt());

    let lin = sample_score_batch(&config(256, 1, ScalingRule::InvWidth), 1, 20_000, idx).unwrap();
    let m = moments(&lin).unwrap();
    assert!(m.variance <= 0.01, "1/n variance {}", m.variance);
    assert!(m.mean.abs() <= 4.0 * m.variance.sqrt() / 20_000f64.sqrt());
}

#[test]
fn off_diagonal_scores_are_centered() {
    let c = config(128, 2, ScalingRule::InvSqrtWidth);
    for idx in [
        ScoreIndex {
            head: 0,
            row: 0,
            col: 1,
        },
        ScoreIndex {
            head: 1,
            row: 3,
            col: 2,
        },
        ScoreIndex {
            head: 1,
            row: 2,
            col: 2,
        },
    ] {
        let set = sample_score_batch(&c, 8, 20_000, idx).unwrap();
        let m = moments(&set).unwrap();
        assert!(m.mean.abs() <= 4.0 * m.se_mean, "{idx:?}: {}", m.mean);
    }
}

#[test]
fn heads_are_uncorrelated() {
    let c = config(256, 2, ScalingRule::InvSqrtWidth);
    let n = 20_000;
    let pairs: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|k| {
            let seed = attnlimit_core::attention::sample_seed(3, k);
            let s = attnlimit_core::attention::forward(&c, seed, &[Coordinate::FIRST]).unwrap();
            (s.score(0, 0, 0), s.score(1, 0, 0))
        })
        .collect();
    let nf = n as f64;
    let (ma, mb) = pairs
        .iter()
        .fold((0.0, 0.0), |(a, b), p| (a + p.0, b + p.1));
    let (ma, mb) = (ma / nf, mb / nf);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (a, b) in &pairs {
        sab += (a - ma) * (b - mb);
        saa += (a - ma).powi(2);
        sbb += (b - mb).powi(2);
    }
    let corr = sab / (saa * sbb).sqrt();
    assert!(corr.abs() <= 4.0 / nf.sqrt(), "corr {corr}");
}

#[test]
fn score_summands_are_uncorrelated() {
    // Distinct coordinates of q ⊙ k contribute uncorrelated terms to a score.
    let n = 20_000;
    let width = 64;
    let products: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|k| {
            let mut r = rng::stream(rng::derive_seed(&[99, k]), 0);
            let x: Vec<f64> = (0..width).map(|_| rng::normal(&mut r)).collect();
            let row = |r: &mut rng::StreamRng| -> f64 {
                x.iter().map(|v| v * rng::normal(r)).sum::<f64>() / (width as f64).sqrt()
            };
            let (q0, k0, q1, k1) = (row(&mut r), row(&mut r), row(&mut r), row(&mut r));
            (q0 * k0, q1 * k1)
        })
        .collect();
    let nf = n as f64;
    let (ma, mb) = products
        .iter()
        .fold((0.0, 0.0), |(a, b), p| (a + p.0, b + p.1));
    let (ma, mb) = (ma / nf, mb / nf);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (a, b) in &products {
        sab += (a - ma) * (b - mb);
        saa += (a - ma).powi(2);
        sbb += (b - mb).powi(2);
    }
    assert!((sab / (saa * sbb).sqrt()).abs() <= 4.0 / nf.sqrt());
}

#[test]
fn single_full_head_low_rank_matches_standard_scaling() {
    let standard = config(128, 1, ScalingRule::InvSqrtWidth);
    let low_rank = AttentionConfig {
        head_dim: Some(128),
        ..config(128, 1, ScalingRule::InvSqrtHead)
    };
    let a = sample_output_batch(&standard, 10, 10_000, Coordinate::FIRST).unwrap();
    let b = sample_output_batch(&low_rank, 11, 10_000, Coordinate::FIRST).unwrap();
    let d = ks_two_sample(&a, &b).unwrap();
    assert!(d <= 0.02, "KS {d}");
}

#[test]
fn batches_do_not_depend_on_thread_count() {
    let c = config(64, 2, ScalingRule::InvSqrtWidth);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| sample_output_batch(&c, 5, 2_000, Coordinate::new(1, 9)).unwrap())
    };
    assert_eq!(run(1).digest(), run(4).digest());
}
