use factscope_oracle::{naive_silhouette, softmax};

#[test]
fn softmax_is_shift_invariant_and_normalized() {
    let a = softmax(&[1.0, 2.0, 3.0]);
    let b = softmax(&[101.0, 102.0, 103.0]);
    assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
    // e^1 / (e^1 + e^2 + e^3)
    assert!((a[0] - 0.09003057317038046).abs() < 1e-12);
}

#[test]
fn silhouette_hand_computed() {
    // 1-D points {0, 1} and {4, 5}: a = 1, b = 4.5 and 3.5 for the inner points
    let points = vec![vec![0.0], vec![1.0], vec![4.0], vec![5.0]];
    let s = naive_silhouette(&points, &[0, 0, 1, 1]);
    let want = ((1.0 - 1.0 / 4.5) + (1.0 - 1.0 / 3.5)) / 2.0;
    assert!((s - want).abs() < 1e-12, "{s} vs {want}");
}
