// Success paths only: building a JsError needs a JS host.

use prvr_wasm_demo::{decay_curve, planted_teacher, soft_targets};

#[test]
fn decay_curve_starts_at_one_and_decays() {
    let c = decay_curve("exponential", 0.95, 1.0, 10).unwrap();
    assert_eq!(c.len(), 11);
    assert_eq!(c[0], 1.0);
    assert!((c[1] - 0.95).abs() < 1e-15);
    assert!(decay_curve("fixed", 1.0, 1.0, 5).unwrap().iter().all(|&v| v == 1.0));
}

#[test]
fn soft_targets_keep_hard_rows_one_hot() {
    let g = vec![1.0, 0.5, 0.2, 0.3, 1.0, 0.1, 0.0, 0.0, 1.0];
    let t = soft_targets(g, 3, 0.34, 0.5, true).unwrap();
    assert_eq!(&t[0..3], &[1.0, 0.0, 0.0]);
    for row in t.chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn clean_teacher_peaks_in_the_moment() {
    let v = planted_teacher(32, 1.0, 0.0, 0.1, 0.25, 3).unwrap();
    let scores = v.scores();
    assert_eq!(scores.len(), 32);
    let peak = (0..32).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
    assert!((v.start()..=v.end()).contains(&peak));
    assert!(v.mv() > 0.0 && v.mv() <= 0.25 + 1e-12);
}
