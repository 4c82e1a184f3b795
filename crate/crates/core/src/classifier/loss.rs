/// Two-class softmax with the max shifted out.
pub fn softmax2(l: [f64; 2]) -> [f64; 2] {
    let m = l[0].max(l[1]);
    let e = [(l[0] - m).exp(), (l[1] - m).exp()];
    let s = e[0] + e[1];
    [e[0] / s, e[1] / s]
}

/// Mean negative log-likelihood over the batch and its gradient
/// `(softmax − onehot) / n` with respect to the logits.
pub fn cross_entropy(logits: &[[f64; 2]], labels: &[u8]) -> (f64, Vec<[f64; 2]>) {
    assert_eq!(logits.len(), labels.len(), "one label per row of logits");
    assert!(labels.iter().all(|&y| y <= 1), "labels must be 0 or 1");
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (l, &y) in logits.iter().zip(labels) {
        let m = l[0].max(l[1]);
        let lse = m + ((l[0] - m).exp() + (l[1] - m).exp()).ln();
        loss += lse - l[y as usize];
        let p = softmax2(*l);
        let mut g = [p[0] / n, p[1] / n];
        g[y as usize] -= 1.0 / n;
        grad.push(g);
    }
    (loss / n, grad)
}
