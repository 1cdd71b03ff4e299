//! Straight-line reference implementations on plain `Vec` matrices, written
//! without the tape so they can check it.

#![allow(dead_code)]

use std::path::Path;

use numcore::Tensor;
use vqa_core::data::{generate_dataset, load_dataset, Dataset, GeneratorSpec};
use vqa_core::params::ParamStore;
use vqa_core::ModelConfig;

pub type Mat = Vec<Vec<f64>>;

pub fn param_mat(store: &ParamStore, name: &str) -> Mat {
    let t = store.by_name(name).unwrap_or_else(|| panic!("missing {name}"));
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

pub fn param_vec(store: &ParamStore, name: &str) -> Vec<f64> {
    store
        .by_name(name)
        .unwrap_or_else(|| panic!("missing {name}"))
        .data()
        .to_vec()
}

/// Rows of sample `b` of a `[B, n, d]` tensor.
pub fn rows(t: &Tensor, b: usize) -> Mat {
    let (n, d) = (t.shape()[1], t.shape()[2]);
    (0..n)
        .map(|i| t.data()[(b * n + i) * d..(b * n + i + 1) * d].to_vec())
        .collect()
}

pub fn max_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

pub fn linear(x: &Mat, w: &Mat, b: Option<&[f64]>) -> Mat {
    x.iter()
        .map(|row| {
            (0..w[0].len())
                .map(|j| {
                    let mut s = b.map_or(0.0, |b| b[j]);
                    for (k, xv) in row.iter().enumerate() {
                        s += xv * w[k][j];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn layer_norm(x: &Mat, g: &[f64], b: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + eps).sqrt() * g[j] + b[j])
                .collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        (1.0 + x.exp()).ln()
    }
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn map(a: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    a.iter().map(|r| r.iter().map(|&v| f(v)).collect()).collect()
}

pub fn mean_rows(a: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; a[0].len()];
    for r in a {
        for (acc, v) in m.iter_mut().zip(r) {
            *acc += v;
        }
    }
    m.iter().map(|v| v / a.len() as f64).collect()
}

pub fn sinusoid(n: usize, d: usize) -> Mat {
    (0..n)
        .map(|p| {
            (0..d)
                .map(|j| {
                    let angle = p as f64 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
                    if j % 2 == 0 {
                        angle.sin()
                    } else {
                        angle.cos()
                    }
                })
                .collect()
        })
        .collect()
}

/// Multi-head attention; `visible[i][j]` says whether query `i` may see key `j`.
pub fn attention(
    store: &ParamStore,
    name: &str,
    heads: usize,
    q_in: &Mat,
    kv_in: &Mat,
    visible: &dyn Fn(usize, usize) -> bool,
) -> Mat {
    let lin = |x: &Mat, p: &str| lin(store, &format!("{name}.{p}"), x);
    let (q, k, v) = (lin(q_in, "q"), lin(kv_in, "k"), lin(kv_in, "v"));
    let d = q[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..q.len() {
            let keys: Vec<usize> = (0..k.len()).filter(|&j| visible(i, j)).collect();
            let scores: Vec<f64> = keys
                .iter()
                .map(|&j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (w, &j) in e.iter().zip(&keys) {
                for c in cols.clone() {
                    out[i][c] += w / z * v[j][c];
                }
            }
        }
    }
    lin(&out, "o")
}

pub fn norm(store: &ParamStore, name: &str, x: &Mat, eps: f64) -> Mat {
    layer_norm(
        x,
        &param_vec(store, &format!("{name}.g")),
        &param_vec(store, &format!("{name}.b")),
        eps,
    )
}

pub fn lin(store: &ParamStore, name: &str, x: &Mat) -> Mat {
    let b = store.by_name(&format!("{name}.b")).map(|t| t.data().to_vec());
    linear(x, &param_mat(store, &format!("{name}.w")), b.as_deref())
}

pub fn ffn(store: &ParamStore, name: &str, x: &Mat) -> Mat {
    let h = map(&lin(store, &format!("{name}.up"), x), gelu);
    lin(store, &format!("{name}.down"), &h)
}

/// Pre-norm self-attention layer over the first `len` tokens being visible.
pub fn encoder_layer(store: &ParamStore, name: &str, heads: usize, eps: f64, x: &Mat, len: usize) -> Mat {
    let h = norm(store, &format!("{name}.ln1"), x, eps);
    let x = add(
        x,
        &attention(store, &format!("{name}.attn"), heads, &h, &h, &|_, j| j < len),
    );
    let h = norm(store, &format!("{name}.ln2"), &x, eps);
    add(&x, &ffn(store, &format!("{name}.ffn"), &h))
}

/// Text encoder on one unpadded-or-padded row; returns (tokens, pooled).
pub fn text_encoder(store: &ParamStore, cfg: &ModelConfig, ids: &[usize], len: usize) -> (Mat, Vec<f64>) {
    let emb = param_mat(store, "text.embed");
    let pos = sinusoid(ids.len(), cfg.d_model);
    let mut x: Mat = ids
        .iter()
        .enumerate()
        .map(|(p, &id)| emb[id].iter().zip(&pos[p]).map(|(a, b)| a + b).collect())
        .collect();
    for i in 0..cfg.text_layers {
        x = encoder_layer(store, &format!("text.layer{i}"), cfg.heads, cfg.ln_eps, &x, len);
    }
    let x = norm(store, "text.ln", &x, cfg.ln_eps);
    let pooled = mean_rows(&x[..len]);
    (x, pooled)
}

/// Selective scan for one sequence: `x, delta: [T][D]`, `a: [D][N]`,
/// `b, c: [T][N]`, `d_skip: [D]`.
pub fn scan(x: &Mat, delta: &Mat, a: &Mat, b: &Mat, c: &Mat, d_skip: &[f64]) -> Mat {
    let (dn, n) = (a.len(), a[0].len());
    let mut h = vec![vec![0.0; n]; dn];
    let mut y = Vec::with_capacity(x.len());
    for t in 0..x.len() {
        let mut row = vec![0.0; dn];
        for ch in 0..dn {
            for s in 0..n {
                h[ch][s] = (delta[t][ch] * a[ch][s]).exp() * h[ch][s] + delta[t][ch] * b[t][s] * x[t][ch];
                row[ch] += c[t][s] * h[ch][s];
            }
            row[ch] += d_skip[ch] * x[t][ch];
        }
        y.push(row);
    }
    y
}

/// Depthwise causal convolution with kernel `w: [D][W]`.
pub fn causal_conv(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    let width = w[0].len();
    (0..x.len())
        .map(|t| {
            (0..x[0].len())
                .map(|ch| {
                    let mut s = b[ch];
                    for k in 0..width {
                        let back = width - 1 - k;
                        if t >= back {
                            s += w[ch][k] * x[t - back][ch];
                        }
                    }
                    s
                })
                .collect()
        })
        .collect()
}

/// Two-input selective-scan block on one sequence.
pub fn mamba(store: &ParamStore, name: &str, cfg: &ModelConfig, primary: &Mat, gate_src: &Mat) -> Mat {
    let (n, r) = (cfg.d_state, cfg.dt_rank);
    let xi = lin(store, &format!("{name}.in"), primary);
    let xs = map(
        &causal_conv(
            &xi,
            &param_mat(store, &format!("{name}.conv.w")),
            &param_vec(store, &format!("{name}.conv.b")),
        ),
        silu,
    );
    let proj = lin(store, &format!("{name}.x"), &xs);
    let dt: Mat = proj.iter().map(|p| p[..r].to_vec()).collect();
    let bm: Mat = proj.iter().map(|p| p[r..r + n].to_vec()).collect();
    let cm: Mat = proj.iter().map(|p| p[r + n..r + 2 * n].to_vec()).collect();
    let delta = map(&lin(store, &format!("{name}.dt"), &dt), softplus);
    let a = map(&param_mat(store, &format!("{name}.a_log")), |v| -v.exp());
    let y = scan(&xs, &delta, &a, &bm, &cm, &param_vec(store, &format!("{name}.d")));
    let g = map(&lin(store, &format!("{name}.gate"), gate_src), silu);
    let yg: Mat = y
        .iter()
        .zip(&g)
        .map(|(u, v)| u.iter().zip(v).map(|(p, q)| p * q).collect())
        .collect();
    lin(store, &format!("{name}.out"), &yg)
}

pub fn scale_rows(x: &Mat, v: &[f64]) -> Mat {
    x.iter()
        .map(|r| r.iter().zip(v).map(|(a, b)| a * b).collect())
        .collect()
}

/// One interaction block with pooled partners; `len` valid text tokens.
pub fn cmm_block(store: &ParamStore, name: &str, cfg: &ModelConfig, z: &Mat, t: &Mat, len: usize) -> (Mat, Mat) {
    let pz = mean_rows(z);
    let pt = mean_rows(&t[..len]);
    let z2 = add(
        &lin(
            store,
            &format!("{name}.fus_z"),
            &mamba(store, &format!("{name}.mamba_z"), cfg, z, &scale_rows(z, &pt)),
        ),
        z,
    );
    let t2 = add(
        &lin(
            store,
            &format!("{name}.fus_t"),
            &mamba(store, &format!("{name}.mamba_t"), cfg, t, &scale_rows(t, &pz)),
        ),
        t,
    );
    (z2, t2)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Contrastive loss by explicit loops over samples, texts and queries.
pub fn vtc_loop(z: &[Mat], t: &Mat, tau: f64) -> (f64, f64) {
    let bn = z.len();
    let s: Mat = (0..bn)
        .map(|i| {
            (0..bn)
                .map(|j| z[i].iter().map(|q| cosine(q, &t[j])).fold(f64::NEG_INFINITY, f64::max))
                .collect()
        })
        .collect();
    let mut v2t = 0.0;
    let mut t2v = 0.0;
    for i in 0..bn {
        let row: f64 = (0..bn).map(|j| (s[i][j] / tau).exp()).sum();
        let col: f64 = (0..bn).map(|j| (s[j][i] / tau).exp()).sum();
        v2t -= ((s[i][i] / tau).exp() / row).ln();
        t2v -= ((s[i][i] / tau).exp() / col).ln();
    }
    (v2t / bn as f64, t2v / bn as f64)
}

/// Reduced model configuration for fast tests.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch: 8,
        d_model: 8,
        heads: 2,
        image_layers: 1,
        text_layers: 2,
        max_len: 10,
        vocab_size: 40,
        n_queries: 4,
        qformer_layers: 1,
        cmm_blocks: 2,
        d_state: 3,
        d_conv: 3,
        dt_rank: 2,
        decoder_layers: 1,
        max_answer_len: 4,
        n_classes: 11,
        ..ModelConfig::default()
    }
}

/// Small generated dataset at `root`, images `size`×`size`.
pub fn small_dataset(root: &Path, size: usize, train: usize, seed: u64) -> Dataset {
    let spec = GeneratorSpec {
        image_size: size,
        train,
        val: 16,
        test: 32,
        ..GeneratorSpec::default()
    };
    generate_dataset(&spec, seed, root).expect("generate");
    load_dataset(root).expect("load")
}

pub fn tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| scale * rng.random_range(-1.0..1.0))
}
