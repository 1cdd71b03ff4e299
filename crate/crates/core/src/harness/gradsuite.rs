//! Finite-difference gradient checks for every trainable component at
//! reduced width, swept over seeds.

use numcore::{check_gradients, GradCheck, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cifr::{CmmBlock, MambaBlock};
use crate::config::ModelConfig;
use crate::encoders::TokenSeq;
use crate::encoders::{ImageEncoder, TextEncoder, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::ffae::{cls_loss, memory_padding_bias, AnswerBatch, AuxDecoder, Classifier};
use crate::fvta::{vtc_loss, QqFormer, TextContext};
use crate::par::{self, ExecMode};
use crate::params::{Ctx, ParamBuilder, ParamStore};

pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-3;
/// Elements finite-differenced per input tensor.
const PROBE: usize = 3;

pub const CHECKS: [&str; 10] = [
    "image_encoder",
    "text_encoder",
    "qqformer",
    "vtc_loss",
    "selective_scan",
    "mamba_block",
    "cmm_block",
    "classifier",
    "aux_decoder",
    "mask",
];

/// Reduced-width configuration for gradient checks.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        channels: 1,
        patch: 4,
        d_model: 8,
        heads: 2,
        image_layers: 1,
        text_layers: 1,
        mlp_ratio: 2,
        max_len: 5,
        vocab_size: 9,
        n_queries: 3,
        qformer_layers: 1,
        cmm_blocks: 1,
        d_state: 3,
        d_conv: 3,
        expand: 2,
        dt_rank: 2,
        decoder_layers: 1,
        max_answer_len: 3,
        n_classes: 4,
        ..ModelConfig::default()
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| scale * (rng.random::<f64>() * 2.0 - 1.0))
}

fn to_tensor_err(e: Error) -> TensorError {
    match e {
        Error::Tensor(t) => t,
        other => TensorError::Contract {
            op: "gradcheck",
            msg: other.to_string(),
        },
    }
}

/// Random linear readout `Σ r ⊙ out`.
fn readout<'t>(cx: &Ctx<'t>, out: Var<'t>, rng_seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let r = randn(&mut rng, &out.shape(), 1.0);
    Ok(out.mul(cx.constant(r))?.sum())
}

fn check<F>(store: &ParamStore, extra: Vec<Tensor>, build: F) -> Result<GradCheck>
where
    F: for<'t> Fn(&Ctx<'t>, &[Var<'t>]) -> Result<Var<'t>>,
{
    let np = store.len();
    let mut inputs = store.values().to_vec();
    inputs.extend(extra);
    Ok(check_gradients(&inputs, Some(PROBE), STEP, |tape, vars| {
        let cx = Ctx::from_vars(tape, vars[..np].to_vec());
        build(&cx, &vars[np..]).map_err(to_tensor_err)
    })?)
}

/// Moves step-size biases to `softplus⁻¹` of order-one values so the decay
/// parameters carry resolvable gradients.
fn widen_steps(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = store.names().iter().filter(|n| n.ends_with(".dt.b")).cloned().collect();
    for n in names {
        for v in store.by_name_mut(&n).data_mut() {
            *v = rng.random::<f64>() * 2.0 - 1.0;
        }
    }
}

/// Perturbs every parameter so no gradient sits at a symmetric point.
fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    for t in store.values_mut() {
        for x in t.data_mut() {
            *x += scale * (rng.random::<f64>() * 2.0 - 1.0);
        }
    }
}

fn text_batch(rng: &mut ChaCha8Rng, cfg: &ModelConfig, b: usize) -> (Vec<Vec<usize>>, Vec<usize>) {
    let mut ids = Vec::new();
    let mut lens = Vec::new();
    for i in 0..b {
        let len = if i == 0 {
            cfg.max_len
        } else {
            rng.random_range(2..cfg.max_len)
        };
        let mut row: Vec<usize> = (0..len).map(|_| rng.random_range(1..cfg.vocab_size)).collect();
        row.resize(cfg.max_len, PAD);
        ids.push(row);
        lens.push(len);
    }
    (ids, lens)
}

/// Runs one named check at one seed.
pub fn run_check(name: &str, seed: u64) -> Result<GradCheck> {
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(name.len() as u64));
    let mut pb = ParamBuilder::new(seed);
    let (b, d) = (2, cfg.d_model);
    match name {
        "image_encoder" => {
            let enc = ImageEncoder::new(&mut pb, &cfg);
            let mut store = pb.finish();
            jitter(&mut store, &mut rng, 0.1);
            let patches = Tensor::from_fn(&[b, cfg.n_patches(), cfg.patch_dim()], |_| rng.random());
            check(&store, vec![patches], |cx, x| {
                let out = enc.forward_var(cx, x[0])?;
                Ok(readout(cx, out.tokens, seed)?.add(readout(cx, out.pooled, seed + 1)?)?)
            })
        }
        "text_encoder" => {
            let enc = TextEncoder::new(&mut pb, &cfg);
            let mut store = pb.finish();
            jitter(&mut store, &mut rng, 0.1);
            let (ids, lens) = text_batch(&mut rng, &cfg, b);
            check(&store, vec![], |cx, _| {
                let out = enc.forward(cx, &ids, &lens)?;
                Ok(readout(cx, out.tokens, seed)?.add(readout(cx, out.pooled, seed + 1)?)?)
            })
        }
        "qqformer" => {
            let qq = QqFormer::new(&mut pb, &cfg);
            let mut store = pb.finish();
            jitter(&mut store, &mut rng, 0.1);
            let (_, lens) = text_batch(&mut rng, &cfg, b);
            let visual = randn(&mut rng, &[b, cfg.n_patches(), d], 1.0);
            let text = randn(&mut rng, &[b, cfg.max_len, d], 1.0);
            check(&store, vec![visual, text], |cx, x| {
                let z = qq.forward(
                    cx,
                    x[0],
                    Some(TextContext {
                        tokens: x[1],
                        lens: &lens,
                    }),
                )?;
                readout(cx, z, seed)
            })
        }
        "vtc_loss" => {
            let store = pb.finish();
            let (bb, k) = (3, 2);
            // redraw until the max over queries has a clear winner
            let (z, t) = loop {
                let z = randn(&mut rng, &[bb, k, d], 1.0);
                let t = randn(&mut rng, &[bb, d], 1.0);
                if max_margin(&z, &t) > 1e-3 {
                    break (z, t);
                }
            };
            check(&store, vec![z, t], |cx, x| Ok(vtc_loss(cx, x[0], x[1], 0.07)?.total))
        }
        "selective_scan" => {
            let store = pb.finish();
            let (t_len, di, n) = (6, 4, 3);
            let x = randn(&mut rng, &[b, t_len, di], 1.0);
            let delta = Tensor::from_fn(&[b, t_len, di], |_| 0.05 + rng.random::<f64>());
            let a = Tensor::from_fn(&[di, n], |_| -(0.1 + rng.random::<f64>()));
            let bm = randn(&mut rng, &[b, t_len, n], 1.0);
            let cm = randn(&mut rng, &[b, t_len, n], 1.0);
            let dk = randn(&mut rng, &[di], 1.0);
            check(&store, vec![x, delta, a, bm, cm, dk], |cx, v| {
                let y = cx.tape().selective_scan(v[0], v[1], v[2], v[3], v[4], v[5])?;
                readout(cx, y, seed)
            })
        }
        "mamba_block" => {
            let block = MambaBlock::new(&mut pb, "m", &cfg);
            let mut store = pb.finish();
            jitter(&mut store, &mut rng, 0.1);
            widen_steps(&mut store, &mut rng);
            let p = randn(&mut rng, &[b, 5, d], 1.0);
            let g = randn(&mut rng, &[b, 5, d], 1.0);
            check(&store, vec![p, g], |cx, x| {
                readout(cx, block.forward(cx, x[0], x[1])?, seed)
            })
        }
        "cmm_block" => {
            let block = CmmBlock::new(&mut pb, "c", &cfg);
            let mut store = pb.finish();
            jitter(&mut store, &mut rng, 0.1);
            widen_steps(&mut store, &mut rng);
            let (_, lens) = text_batch(&mut rng, &cfg, b);
            let z = randn(&mut rng, &[b, cfg.n_queries, d], 1.0);
            let t = randn(&mut rng, &[b, cfg.max_len, d], 1.0);
            check(&store, vec![z, t], |cx, x| {
                let (z2, t2) = block.forward(cx, x[0], x[1], &lens)?;
                Ok(readout(cx, z2, seed)?.add(readout(cx, t2, seed + 1)?)?)
            })
        }
        "classifier" => {
            let head = Classifier::new(&mut pb, &cfg);
            let mut store = pb.finish();
            jitter(&mut store, &mut rng, 0.1);
            let xf = randn(&mut rng, &[3, 2 * d], 1.0);
            let targets: Vec<usize> = (0..3).map(|_| rng.random_range(0..cfg.n_classes)).collect();
            check(&store, vec![xf], |cx, x| {
                cls_loss(cx, head.forward(cx, x[0])?, &targets)
            })
        }
        "aux_decoder" | "mask" => {
            let dec = AuxDecoder::new(&mut pb, &cfg);
            let mut store = pb.finish();
            jitter(&mut store, &mut rng, 0.1);
            let m = cfg.memory_len();
            // move the mask off its initial value so it carries gradient
            for v in store.by_name_mut("dec.mask").data_mut() {
                *v = 0.5 + rng.random::<f64>();
            }
            let (_, lens) = text_batch(&mut rng, &cfg, b);
            let bias = memory_padding_bias(cfg.n_queries, &lens, cfg.max_len);
            let answers: Vec<TokenSeq> = (0..b)
                .map(|i| {
                    let mut ids = vec![BOS];
                    ids.extend((0..=i).map(|_| rng.random_range(4..cfg.vocab_size)));
                    ids.push(EOS);
                    TokenSeq::new(ids).expect("no padding")
                })
                .collect();
            let ab = AnswerBatch::new(&answers, dec.steps())?;
            let memory = randn(&mut rng, &[b, m, d], 1.0);
            if name == "mask" {
                let mask_only = {
                    let mut sb = ParamBuilder::new(seed);
                    sb.tensor("dec.mask", store.by_name("dec.mask").expect("mask").clone());
                    sb.finish()
                };
                let mask_id = store.id("dec.mask").expect("mask").index();
                let frozen = store.clone();
                return check(&mask_only, vec![memory], |cx, x| {
                    let mut vars: Vec<Var<'_>> =
                        frozen.values().iter().map(|v| cx.tape().constant(v.clone())).collect();
                    vars[mask_id] = cx.p(crate::params::ParamId(0));
                    let full = Ctx::from_vars(cx.tape(), vars);
                    Ok(dec.loss(&full, x[0], bias.as_ref(), &ab, true)?.0)
                });
            }
            check(&store, vec![memory], |cx, x| {
                Ok(dec.loss(cx, x[0], bias.as_ref(), &ab, true)?.0)
            })
        }
        other => Err(Error::Contract(format!("unknown gradient check {other:?}"))),
    }
}

/// Smallest gap between the best and second-best query similarity.
fn max_margin(z: &Tensor, t: &Tensor) -> f64 {
    let (b, k, d) = (z.shape()[0], z.shape()[1], z.shape()[2]);
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut margin = f64::INFINITY;
    for i in 0..b {
        for j in 0..b {
            let tj = &t.data()[j * d..(j + 1) * d];
            let mut sims: Vec<f64> = (0..k)
                .map(|q| {
                    let zq = &z.data()[(i * k + q) * d..(i * k + q + 1) * d];
                    zq.iter().zip(tj).map(|(a, b)| a * b).sum::<f64>() / (norm(zq) * norm(tj))
                })
                .collect();
            sims.sort_by(|a, b| b.total_cmp(a));
            if k > 1 {
                margin = margin.min(sims[0] - sims[1]);
            }
        }
    }
    margin
}

#[derive(Clone, Debug)]
pub struct CheckSummary {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub worst_seed: u64,
    pub seeds: usize,
    pub checked: usize,
}

impl CheckSummary {
    pub fn passes(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

/// Every check over `seeds`, seeds run in parallel.
pub fn run_suite(seeds: &[u64], mode: ExecMode) -> Result<Vec<CheckSummary>> {
    let per_seed = par::try_map(seeds, mode, |&s| {
        CHECKS.iter().map(|name| run_check(name, s)).collect::<Result<Vec<_>>>()
    })?;
    Ok(CHECKS
        .iter()
        .enumerate()
        .map(|(c, &name)| {
            let mut summary = CheckSummary {
                name,
                max_rel_err: 0.0,
                worst_seed: seeds.first().copied().unwrap_or(0),
                seeds: seeds.len(),
                checked: 0,
            };
            for (row, &seed) in per_seed.iter().zip(seeds) {
                let r = &row[c];
                summary.checked += r.checked;
                if r.max_rel_err > summary.max_rel_err {
                    summary.max_rel_err = r.max_rel_err;
                    summary.worst_seed = seed;
                }
            }
            summary
        })
        .collect())
}

pub fn format_suite(rows: &[CheckSummary]) -> String {
    let mut s = format!(
        "{:<16} {:>12} {:>6} {:>8}  result\n",
        "check", "max_rel_err", "seeds", "probes"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<16} {:>12.3e} {:>6} {:>8}  {}\n",
            r.name,
            r.max_rel_err,
            r.seeds,
            r.checked,
            if r.passes() { "ok" } else { "FAIL" }
        ));
    }
    s
}
