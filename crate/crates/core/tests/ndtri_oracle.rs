use qsilk::stats::{ndtri, normal_cdf};
use statrs::distribution::{ContinuousCDF, Normal};

// Inverse of statrs' normal CDF by bisection; slow but independent.
fn bisect(p: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).unwrap();
    let upper = p > 0.5;
    let target = if upper { 1.0 - p } else { p };
    let (mut lo, mut hi) = (-40.0f64, 0.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if n.cdf(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let z = 0.5 * (lo + hi);
    if upper {
        -z
    } else {
        z
    }
}

#[test]
fn matches_bisection_across_range() {
    let mut worst = 0.0f64;
    for i in 1..2000 {
        let p = i as f64 / 2000.0;
        worst = worst.max((ndtri(p).unwrap() - bisect(p)).abs());
    }
    for e in 1..=12 {
        for m in [1.0, 2.5, 5.0] {
            let p = m * 10f64.powi(-e);
            worst = worst.max((ndtri(p).unwrap() - bisect(p)).abs());
            worst = worst.max((ndtri(1.0 - p).unwrap() - bisect(1.0 - p)).abs());
        }
    }
    assert!(worst < 1e-9, "max error {worst:e}");
}

#[test]
fn inverts_the_cdf() {
    for i in 0..=1000 {
        let z = -4.7 + 9.4 * i as f64 / 1000.0;
        let back = ndtri(normal_cdf(z)).unwrap();
        assert!((back - z).abs() < 1e-9, "z {z}: {back}");
    }
}

#[test]
fn rejects_outside_open_interval() {
    for p in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
        assert!(ndtri(p).is_err(), "{p}");
    }
}
