use noiseprior_demo::{to_rgba, variance_curve, Session};

#[test]
fn rgba_is_gray_and_opaque() {
    let s = Session::create(32, 1).unwrap();
    let px = s.clean_rgba();
    assert_eq!(px.len(), 32 * 32 * 4);
    for c in px.chunks(4) {
        assert!(c[0] == c[1] && c[1] == c[2] && c[3] == 255);
    }
}

#[test]
fn estimate_marks_the_selection() {
    let mut s = Session::create(256, 4).unwrap();
    s.apply_noise(0.1, 0.03, false, 9).unwrap();
    let e = s.run_estimate(16, 0.1, true).unwrap();
    assert_eq!(e.points.len(), 16 * 16);
    let picked = e.points.iter().filter(|p| p.selected).count();
    assert!((1..=e.points.len()).contains(&picked));
    assert!((e.sigma_s - 0.1).abs() < 0.05, "{}", e.sigma_s);
    assert_eq!((e.true_sigma_s, e.true_sigma_r), (0.1, 0.03));
}

#[test]
fn noise_is_seeded() {
    let mut a = Session::create(64, 2).unwrap();
    let mut b = Session::create(64, 2).unwrap();
    a.apply_noise(0.1, 0.02, true, 5).unwrap();
    b.apply_noise(0.1, 0.02, true, 5).unwrap();
    assert_eq!(a.noisy_rgba(), b.noisy_rgba());
    b.apply_noise(0.1, 0.02, true, 6).unwrap();
    assert_ne!(a.noisy_rgba(), b.noisy_rgba());
}

#[test]
fn bad_inputs_are_errors() {
    assert!(Session::create(8, 0).is_err());
    let mut s = Session::create(32, 0).unwrap();
    assert!(s.apply_noise(-0.1, 0.0, false, 0).is_err());
    assert!(s.run_estimate(16, 0.1, true).is_err());
}

#[test]
fn curve_is_the_variance_line() {
    let c = variance_curve(0.2, 0.1, 5);
    assert_eq!(c.len(), 10);
    assert_eq!(c[0], 0.0);
    assert!((c[1] - 0.01).abs() < 1e-15);
    assert!((c[9] - 0.05).abs() < 1e-15);
    assert_eq!(to_rgba(&noiseprior::image_io::ImagePlane::filled(1, 1, 2.0)), vec![255, 255, 255, 255]);
}
