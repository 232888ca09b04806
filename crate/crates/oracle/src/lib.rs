//! Independent, unoptimized reference implementations used by tests.
//!
//! Everything here is written straight from the formulas in f64 with plain
//! loops, sharing nothing with the optimized code except the parameter
//! buffer layout.

use factscope_core::model::Parameters;

fn mat(p: &Parameters, t: factscope_core::model::TensorRange) -> Vec<f64> {
    p.get(t).iter().map(|&x| x as f64).collect()
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = (var + 1e-5).sqrt();
    x.iter().enumerate().map(|(i, v)| (v - mean) / denom * g[i] + b[i]).collect()
}

/// `y = x W + b` with `W` stored row-major `[d_in][d_out]`.
fn affine(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let d_out = b.len();
    let mut y = b.to_vec();
    for (i, xi) in x.iter().enumerate() {
        for o in 0..d_out {
            y[o] += xi * w[i * d_out + o];
        }
    }
    y
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Residual states `[layer][position][d]`, layers `0..=L`, after `hook` has
/// had the chance to rewrite each state `(layer, position)` in place.
pub fn naive_states_with(
    params: &Parameters,
    tokens: &[u32],
    mut hook: impl FnMut(usize, usize, &mut Vec<f64>),
) -> Vec<Vec<Vec<f64>>> {
    let cfg = params.cfg;
    let lay = &params.layout;
    let (d, h) = (cfg.d_model, tokens.len());
    let nh = cfg.n_heads;
    let hd = d / nh;
    let emb = mat(params, lay.tok_emb);
    let pos = mat(params, lay.pos_emb);

    let mut x: Vec<Vec<f64>> =
        (0..h).map(|i| (0..d).map(|c| emb[tokens[i] as usize * d + c] + pos[i * d + c]).collect()).collect();
    for (i, row) in x.iter_mut().enumerate() {
        hook(0, i, row);
    }
    let mut states = vec![x.clone()];

    for (l, w) in lay.layers.iter().enumerate() {
        let (g1, b1) = (mat(params, w.ln1_g), mat(params, w.ln1_b));
        let normed: Vec<Vec<f64>> = x.iter().map(|r| layer_norm(r, &g1, &b1)).collect();
        let (wq, bq) = (mat(params, w.wq), mat(params, w.bq));
        let (wk, bk) = (mat(params, w.wk), mat(params, w.bk));
        let (wv, bv) = (mat(params, w.wv), mat(params, w.bv));
        let q: Vec<Vec<f64>> = normed.iter().map(|r| affine(r, &wq, &bq)).collect();
        let k: Vec<Vec<f64>> = normed.iter().map(|r| affine(r, &wk, &bk)).collect();
        let v: Vec<Vec<f64>> = normed.iter().map(|r| affine(r, &wv, &bv)).collect();
        let mut mixed = vec![vec![0.0; d]; h];
        for i in 0..h {
            for head in 0..nh {
                let cols = head * hd..(head + 1) * hd;
                // causal: only positions t <= i
                let scores: Vec<f64> = (0..=i)
                    .map(|t| cols.clone().map(|c| q[i][c] * k[t][c]).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let a = softmax(&scores);
                for (t, at) in a.iter().enumerate() {
                    for c in cols.clone() {
                        mixed[i][c] += at * v[t][c];
                    }
                }
            }
        }
        let (wo, bo) = (mat(params, w.wo), mat(params, w.bo));
        let (g2, b2) = (mat(params, w.ln2_g), mat(params, w.ln2_b));
        let (w1, bb1) = (mat(params, w.w1), mat(params, w.b1));
        let (w2, bb2) = (mat(params, w.w2), mat(params, w.b2));
        for i in 0..h {
            let att = affine(&mixed[i], &wo, &bo);
            let mid: Vec<f64> = x[i].iter().zip(&att).map(|(a, b)| a + b).collect();
            let hidden: Vec<f64> = affine(&layer_norm(&mid, &g2, &b2), &w1, &bb1).into_iter().map(gelu).collect();
            let out = affine(&hidden, &w2, &bb2);
            x[i] = mid.iter().zip(&out).map(|(a, b)| a + b).collect();
            hook(l + 1, i, &mut x[i]);
        }
        states.push(x.clone());
    }
    states
}

/// φ(state): final layer norm then the head matrix.
pub fn naive_head(params: &Parameters, state: &[f64]) -> Vec<f64> {
    let lay = &params.layout;
    let z = layer_norm(state, &mat(params, lay.lnf_g), &mat(params, lay.lnf_b));
    let head = mat(params, lay.head);
    affine(&z, &head, &vec![0.0; params.cfg.vocab_size])
}

/// Logits at every position of an unmodified run.
pub fn naive_logits(params: &Parameters, tokens: &[u32]) -> Vec<Vec<f64>> {
    let states = naive_states_with(params, tokens, |_, _, _| {});
    states.last().expect("at least the embedding layer").iter().map(|s| naive_head(params, s)).collect()
}

/// Mean silhouette computed from raw points (Euclidean), singleton clusters
/// scoring 0.
pub fn naive_silhouette(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut total = 0.0;
    for i in 0..points.len() {
        let own: Vec<usize> = (0..points.len()).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if own.is_empty() {
            continue;
        }
        let a = own.iter().map(|&j| dist(&points[i], &points[j])).sum::<f64>() / own.len() as f64;
        let mut b = f64::INFINITY;
        let mut others: Vec<usize> = labels.iter().copied().filter(|&l| l != labels[i]).collect();
        others.sort();
        others.dedup();
        for l in others {
            let members: Vec<usize> = (0..points.len()).filter(|&j| labels[j] == l).collect();
            let m = members.iter().map(|&j| dist(&points[i], &points[j])).sum::<f64>() / members.len() as f64;
            b = b.min(m);
        }
        total += (b - a) / a.max(b);
    }
    total / points.len() as f64
}

/// Destroy-then-restore loop from scratch. `noise[k][t]` is the noise added to
/// the embedding of span token `t` in sample `k`. Returns the clean object
/// probability, the mean corrupted probability, and ME `[position][layer−1]`.
pub fn brute_force_mediation(
    params: &Parameters,
    tokens: &[u32],
    span: std::ops::Range<usize>,
    object: u32,
    noise: &[Vec<Vec<f32>>],
) -> (f64, f64, Vec<Vec<f64>>) {
    let h = tokens.len();
    let l = params.cfg.n_layers;
    let prob = |states: &Vec<Vec<Vec<f64>>>| softmax(&naive_head(params, &states[l][h - 1]))[object as usize];
    let clean = naive_states_with(params, tokens, |_, _, _| {});
    let clean_prob = prob(&clean);

    let corrupt = |k: usize, layer: usize, pos: usize, s: &mut Vec<f64>| {
        if layer == 0 && span.contains(&pos) {
            for (x, n) in s.iter_mut().zip(&noise[k][pos - span.start]) {
                *x += *n as f64;
            }
        }
    };
    let mut corrupted = 0.0;
    let mut restored = vec![vec![0.0; l]; h];
    for k in 0..noise.len() {
        corrupted += prob(&naive_states_with(params, tokens, |j, i, s| corrupt(k, j, i, s)));
        for (i, row) in restored.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                let states = naive_states_with(params, tokens, |lj, li, s| {
                    corrupt(k, lj, li, s);
                    if lj == j + 1 && li == i {
                        s.clone_from(&clean[j + 1][i]);
                    }
                });
                *cell += prob(&states);
            }
        }
    }
    let n = noise.len() as f64;
    let corrupted = corrupted / n;
    let me = restored.into_iter().map(|row| row.into_iter().map(|p| p / n - corrupted).collect()).collect();
    (clean_prob, corrupted, me)
}
