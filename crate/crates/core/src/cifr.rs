//! Cross-modal selective-state-space interaction between the query stream
//! and the text stream, and fusion into a single feature vector.

use numcore::ops::sequence::ScanInputs;
use numcore::{Tensor, Var};

use crate::config::{ModelConfig, PartnerMix};
use crate::error::{Error, Result};
use crate::nn::{masked_mean, Linear, Norm};
use crate::params::{Ctx, ParamBuilder, ParamId};

/// One selective-scan block with a separate gate input.
#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub in_proj: Linear,
    pub gate_proj: Linear,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub x_proj: Linear,
    pub dt_proj: Linear,
    pub a_log: ParamId,
    pub d_skip: ParamId,
    pub out_proj: Linear,
    pub d_inner: usize,
    pub d_state: usize,
    pub dt_rank: usize,
}

impl MambaBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: &ModelConfig) -> Self {
        let (d, di, n, r, w) = (cfg.d_model, cfg.d_inner(), cfg.d_state, cfg.dt_rank, cfg.d_conv);
        let conv_w = pb.normal(&format!("{name}.conv.w"), &[di, w], (w as f64).powf(-0.5));
        let conv_b = pb.zeros(&format!("{name}.conv.b"), &[di]);
        let dt_proj = Linear {
            w: pb.normal(&format!("{name}.dt.w"), &[r, di], (r as f64).powf(-0.5)),
            b: Some({
                // softplus⁻¹ of a step size log-uniform in [1e-3, 1e-1]
                let mut rng = pb.rng_for(&format!("{name}.dt.b"));
                let t = Tensor::from_fn(&[di], |_| {
                    let u: f64 = rand::Rng::random_range(&mut rng, 0.0..1.0);
                    let dt = (1e-3f64.ln() + u * (1e-1f64.ln() - 1e-3f64.ln())).exp();
                    dt + (-(-dt).exp_m1()).ln()
                });
                pb.tensor(&format!("{name}.dt.b"), t)
            }),
            d_in: r,
            d_out: di,
        };
        let a_log = pb.tensor(
            &format!("{name}.a_log"),
            Tensor::from_fn(&[di, n], |i| ((i % n + 1) as f64).ln()),
        );
        Self {
            in_proj: Linear::new(pb, &format!("{name}.in"), d, di, false),
            gate_proj: Linear::new(pb, &format!("{name}.gate"), d, di, false),
            conv_w,
            conv_b,
            x_proj: Linear::new(pb, &format!("{name}.x"), di, r + 2 * n, false),
            dt_proj,
            a_log,
            d_skip: pb.ones(&format!("{name}.d"), &[di]),
            out_proj: Linear::new(pb, &format!("{name}.out"), di, d, true),
            d_inner: di,
            d_state: n,
            dt_rank: r,
        }
    }

    /// Conv → SiLU → scan on the in-projected primary stream.
    fn scan_branch<'t>(&self, cx: &Ctx<'t>, xi: Var<'t>) -> Result<Var<'t>> {
        let xs = xi.causal_conv1d(cx.p(self.conv_w), Some(cx.p(self.conv_b)))?.silu();
        let proj = self.x_proj.forward(cx, xs)?;
        let (r, n) = (self.dt_rank, self.d_state);
        let dt = proj.narrow(2, 0, r)?;
        let b = proj.narrow(2, r, n)?;
        let c = proj.narrow(2, r + n, n)?;
        let delta = self.dt_proj.forward(cx, dt)?.softplus();
        let a = cx.p(self.a_log).exp().neg();
        Ok(cx.tape().selective_scan(xs, delta, a, b, c, cx.p(self.d_skip))?)
    }

    /// `primary, gate_src: [B, T, d]`.
    pub fn forward<'t>(&self, cx: &Ctx<'t>, primary: Var<'t>, gate_src: Var<'t>) -> Result<Var<'t>> {
        if primary.shape() != gate_src.shape() {
            return Err(Error::Contract(format!(
                "mamba: primary {:?} and gate {:?} differ in shape",
                primary.shape(),
                gate_src.shape()
            )));
        }
        let y = self.scan_branch(cx, self.in_proj.forward(cx, primary)?)?;
        let g = self.gate_proj.forward(cx, gate_src)?.silu();
        self.out_proj.forward(cx, y.mul(g)?)
    }

    /// Standard single-input block: one fused input projection split into
    /// the scan and gate halves.
    pub fn forward_single<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let w = cx.tape().concat(&[cx.p(self.in_proj.w), cx.p(self.gate_proj.w)], 1)?;
        let xz = x.matmul(w)?;
        let di = self.d_inner;
        let y = self.scan_branch(cx, xz.narrow(2, 0, di)?)?;
        let g = xz.narrow(2, di, di)?.silu();
        self.out_proj.forward(cx, y.mul(g)?)
    }
}

/// Interaction block: each stream is scanned with a gate modulated by the
/// other stream, linearly fused, and added back.
#[derive(Clone, Debug)]
pub struct CmmBlock {
    pub mamba_z: MambaBlock,
    pub mamba_t: MambaBlock,
    pub fus_z: Linear,
    pub fus_t: Linear,
    pub partner: PartnerMix,
}

impl CmmBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            mamba_z: MambaBlock::new(pb, &format!("{name}.mamba_z"), cfg),
            mamba_t: MambaBlock::new(pb, &format!("{name}.mamba_t"), cfg),
            fus_z: Linear::new(pb, &format!("{name}.fus_z"), d, d, true),
            fus_t: Linear::new(pb, &format!("{name}.fus_t"), d, d, true),
            partner: cfg.partner,
        }
    }

    /// `z: [B, K, d]`, `t: [B, L, d]` with `t_lens` valid text tokens.
    pub fn forward<'t>(&self, cx: &Ctx<'t>, z: Var<'t>, t: Var<'t>, t_lens: &[usize]) -> Result<(Var<'t>, Var<'t>)> {
        let (zg, tg) = match self.partner {
            PartnerMix::Pooled => {
                let (b, d) = (z.shape()[0], z.shape()[2]);
                let pz = z.mean_axis(1, true)?;
                let pt = masked_mean(cx, t, t_lens)?.reshape(&[b, 1, d])?;
                (z.mul(pt)?, t.mul(pz)?)
            }
            PartnerMix::Elementwise => {
                if z.shape() != t.shape() {
                    return Err(Error::Contract(format!(
                        "elementwise mixing needs equal shapes, got {:?} and {:?}",
                        z.shape(),
                        t.shape()
                    )));
                }
                (z.mul(t)?, t.mul(z)?)
            }
        };
        let z2 = self.fus_z.forward(cx, self.mamba_z.forward(cx, z, zg)?)?.add(z)?;
        let t2 = self.fus_t.forward(cx, self.mamba_t.forward(cx, t, tg)?)?.add(t)?;
        Ok((z2, t2))
    }
}

/// Pooled fused feature and token memory.
#[derive(Clone, Copy, Debug)]
pub struct FusedFeature<'t> {
    /// `[B, 2d]`: mean query-stream token ‖ masked mean text-stream token.
    pub x_f: Var<'t>,
    /// `[B, K + L, d]`.
    pub memory: Var<'t>,
    pub z: Var<'t>,
    pub t: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct Cifr {
    pub norm_z: Norm,
    pub norm_t: Norm,
    pub blocks: Vec<CmmBlock>,
}

impl Cifr {
    /// With `cmm` disabled the stack only normalizes and pools.
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Self {
        let blocks = if cfg.toggles.cmm {
            (0..cfg.cmm_blocks)
                .map(|i| CmmBlock::new(pb, &format!("cmm.block{i}"), cfg))
                .collect()
        } else {
            Vec::new()
        };
        Self {
            norm_z: Norm::new(pb, "cmm.ln_z", cfg.d_model, cfg.ln_eps),
            norm_t: Norm::new(pb, "cmm.ln_t", cfg.d_model, cfg.ln_eps),
            blocks,
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, z: Var<'t>, t: Var<'t>, t_lens: &[usize]) -> Result<FusedFeature<'t>> {
        let mut z = self.norm_z.forward(cx, z)?;
        let mut t = self.norm_t.forward(cx, t)?;
        for block in &self.blocks {
            (z, t) = block.forward(cx, z, t, t_lens)?;
        }
        let x_f = cx
            .tape()
            .concat(&[z.mean_axis(1, false)?, masked_mean(cx, t, t_lens)?], 1)?;
        let memory = cx.tape().concat(&[z, t], 1)?;
        Ok(FusedFeature { x_f, memory, z, t })
    }
}

/// Upper bound on `|h|` of a selective scan with negative `A`:
/// per channel and state, `max|Δ·B·x| / (1 − max exp(Δ·A))`.
pub fn scan_state_bound(inputs: &ScanInputs<'_>) -> Result<f64> {
    let dims = inputs.dims()?;
    let (t_len, d, n) = (dims.steps, dims.inner, dims.state);
    let mut bound: f64 = 0.0;
    for batch in 0..dims.batch {
        for ch in 0..d {
            for s in 0..n {
                let a = inputs.a.data()[ch * n + s];
                let (mut drive, mut decay) = (0.0f64, 0.0f64);
                for t in 0..t_len {
                    let dt = inputs.delta.data()[(batch * t_len + t) * d + ch];
                    let x = inputs.x.data()[(batch * t_len + t) * d + ch];
                    let b = inputs.b.data()[(batch * t_len + t) * n + s];
                    drive = drive.max((dt * b * x).abs());
                    decay = decay.max((dt * a).exp());
                }
                bound = bound.max(drive / (1.0 - decay));
            }
        }
    }
    Ok(bound)
}
