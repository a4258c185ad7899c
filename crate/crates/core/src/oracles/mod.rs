//! Straightforward reference implementations that the optimized code is
//! checked against. Written independently of the production paths: plain
//! nested loops, compensated sums, no shared helpers.

pub mod dd;
pub mod precise;

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    compensated_sum(a.iter().zip(b).map(|(x, y)| x * y))
}

/// `log(exp(x[target]) / Σ_{k in support} exp(x[k]))`.
fn log_ratio(x: &[f64], target: usize, support: impl Iterator<Item = usize>) -> f64 {
    let idx: Vec<usize> = support.collect();
    let m = idx.iter().map(|&k| x[k]).fold(f64::NEG_INFINITY, f64::max);
    let denom = compensated_sum(idx.iter().map(|&k| (x[k] - m).exp()));
    x[target] - m - denom.ln()
}

fn similarity_logits(z: &[Vec<f64>], i: usize, tau: f64) -> Vec<f64> {
    z.iter().map(|zj| dot(&z[i], zj) / tau).collect()
}

/// Direct nested-loop cross-correlation with zero padding.
/// `input` is `[c_in][h][w]`, `kernel` is `[c_out][c_in][kh][kw]`.
pub fn conv2d_nested(
    input: &[Vec<Vec<f64>>],
    kernel: &[Vec<Vec<Vec<f64>>>],
    stride: usize,
    pad: usize,
) -> Vec<Vec<Vec<f64>>> {
    let (h, w) = (input[0].len() as isize, input[0][0].len() as isize);
    let (kh, kw) = (kernel[0][0].len(), kernel[0][0][0].len());
    let ho = (h as usize + 2 * pad - kh) / stride + 1;
    let wo = (w as usize + 2 * pad - kw) / stride + 1;
    let mut out = vec![vec![vec![0.0; wo]; ho]; kernel.len()];
    for (o, kern) in kernel.iter().enumerate() {
        for y in 0..ho {
            for x in 0..wo {
                let mut acc = 0.0;
                for (c, plane) in input.iter().enumerate() {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let iy = (y * stride + dy) as isize - pad as isize;
                            let ix = (x * stride + dx) as isize - pad as isize;
                            if iy >= 0 && iy < h && ix >= 0 && ix < w {
                                acc += plane[iy as usize][ix as usize] * kern[c][dy][dx];
                            }
                        }
                    }
                }
                out[o][y][x] = acc;
            }
        }
    }
    out
}

/// AUC by counting every (positive, negative) pair; ties count one half.
pub fn pair_counting_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Mean cross-entropy of `logits` rows against `targets`.
pub fn cross_entropy_mean(logits: &[Vec<f64>], targets: &[usize]) -> f64 {
    let terms = logits
        .iter()
        .zip(targets)
        .map(|(l, &t)| -log_ratio(l, t, 0..l.len()));
    compensated_sum(terms) / logits.len() as f64
}

/// Batch-hard triplet with `ln(1 + exp(x))`, by exhaustive search.
pub fn batch_hard_triplet_softplus(e: &[Vec<f64>], ids: &[usize], margin: f64) -> f64 {
    let dist = |a: &[f64], b: &[f64]| compensated_sum(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y))).sqrt();
    let terms = (0..e.len()).map(|a| {
        let mut far = f64::NEG_INFINITY;
        let mut near = f64::INFINITY;
        for j in 0..e.len() {
            if j == a {
                continue;
            }
            let d = dist(&e[a], &e[j]);
            if ids[j] == ids[a] {
                far = far.max(d);
            } else {
                near = near.min(d);
            }
        }
        let x = far - near + margin;
        if x > 30.0 {
            x + (-x).exp().ln_1p()
        } else {
            x.exp().ln_1p()
        }
    });
    compensated_sum(terms) / e.len() as f64
}

/// SimCLR NT-Xent: views `2k` and `2k + 1` are the only positives. Mean over
/// the `2N` anchors.
pub fn nt_xent(z: &[Vec<f64>], tau: f64) -> f64 {
    let n = z.len();
    let terms = (0..n).map(|i| {
        let logits = similarity_logits(z, i, tau);
        -log_ratio(&logits, i ^ 1, (0..n).filter(|&k| k != i))
    });
    compensated_sum(terms) / n as f64
}

/// Single-label SupCon with every view sharing one class. Mean over anchors.
pub fn supcon_single_label(z: &[Vec<f64>], tau: f64) -> f64 {
    let n = z.len();
    let terms = (0..n).map(|i| {
        let logits = similarity_logits(z, i, tau);
        let inner = compensated_sum(
            (0..n)
                .filter(|&j| j != i)
                .map(|j| log_ratio(&logits, j, (0..n).filter(|&k| k != i))),
        );
        -inner / (n - 1) as f64
    });
    compensated_sum(terms) / n as f64
}

/// The multi-label objective written out literally: a sum over anchors with
/// coefficient `1 / (2 N_y - 1)`, where `N_y` counts source patches (view
/// pairs `2k`, `2k + 1`) whose label tuple equals the anchor's. Anchors with
/// an empty positive sum contribute nothing.
pub fn multilabel_supcon_sum(z: &[Vec<f64>], labels: &[Vec<u64>], tau: f64) -> f64 {
    let n = z.len();
    let terms = (0..n).map(|i| {
        let sources = (0..n / 2).filter(|&k| labels[2 * k] == labels[i]).count();
        let positives: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if positives.is_empty() {
            return 0.0;
        }
        let logits = similarity_logits(z, i, tau);
        let inner = compensated_sum(
            positives
                .iter()
                .map(|&j| log_ratio(&logits, j, (0..n).filter(|&k| k != i))),
        );
        -inner / (2 * sources - 1) as f64
    });
    compensated_sum(terms)
}
