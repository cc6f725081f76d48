//! Retention kernels: the parallel form `(Q Kᵀ ⊙ D) V`, the recurrent form
//! `s_t = γ s_{t-1} + k_tᵀ v_t, o_t = q_t s_t`, and the pre-norm block that
//! wraps multi-head retention with a feed-forward layer.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tape, Tensor, Var};

/// Projections and decay of one retention head.
#[derive(Clone, Debug)]
pub struct HeadWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub gamma: f64,
}

/// Multi-head retention weights.
#[derive(Clone, Debug)]
pub struct RetentionParams {
    pub heads: Vec<HeadWeights>,
}

impl RetentionParams {
    fn validate(&self, d_model: usize) -> Result<()> {
        if self.heads.is_empty() {
            return dim_err("retention needs at least one head");
        }
        for h in &self.heads {
            check_gamma(h.gamma)?;
            let dh = h.w_q.shape().get(1).copied().unwrap_or(0);
            for w in [&h.w_q, &h.w_k, &h.w_v] {
                if w.shape() != [d_model, dh] {
                    return dim_err(format!(
                        "projection {:?} does not map {d_model} -> {dh}",
                        w.shape()
                    ));
                }
            }
        }
        Ok(())
    }

    /// Total output width (sum of head widths).
    pub fn out_dim(&self) -> usize {
        self.heads.iter().map(|h| h.w_v.shape()[1]).sum()
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma <= 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("decay {gamma} outside (0, 1]")))
    }
}

/// Default per-head decays `γ_h = 1 - 2^(-4-h)`.
pub fn gamma_schedule(heads: usize) -> Vec<f64> {
    (0..heads).map(|h| 1.0 - 2f64.powi(-4 - h as i32)).collect()
}

/// Causal decay mask with `D[i][j] = γ^(i-j)` for `i >= j`, else 0.
pub fn decay_mask(n: usize, gamma: f64) -> Result<Tensor> {
    check_gamma(gamma)?;
    if n == 0 {
        return Err(Error::Domain("decay mask needs n >= 1".into()));
    }
    let mut d = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let mut v = 1.0;
        for j in (0..=i).rev() {
            d.data_mut()[i * n + j] = v;
            v *= gamma;
        }
    }
    Ok(d)
}

/// Single-head parallel retention on the tape.
pub fn retention_head(
    tape: &mut Tape,
    x: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    gamma: f64,
) -> Result<Var> {
    let n = tape.shape(x)[0];
    let q = tape.matmul(x, w_q)?;
    let k = tape.matmul(x, w_k)?;
    let v = tape.matmul(x, w_v)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let mask = tape.constant(decay_mask(n, gamma)?);
    let masked = tape.mul(scores, mask)?;
    tape.matmul(masked, v)
}

/// Parallel form over all heads, concatenated along features: `n × Σ d_head`.
pub fn retention_parallel(x: &Tensor, params: &RetentionParams) -> Result<Tensor> {
    let (n, d) = matrix_dims(x)?;
    params.validate(d)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let mut heads_t = Vec::new();
    for h in &params.heads {
        let (q, k, v) = (
            tape.constant(h.w_q.clone()),
            tape.constant(h.w_k.clone()),
            tape.constant(h.w_v.clone()),
        );
        let o = retention_head(&mut tape, xv, q, k, v, h.gamma)?;
        heads_t.push(tape.transpose(o)?);
    }
    let stacked = tape.concat(&heads_t)?;
    let out = tape.transpose(stacked)?;
    debug_assert_eq!(tape.shape(out), [n, params.out_dim()]);
    Ok(tape.value(out).clone())
}

/// Recurrent form, one step at a time from a zero state.
pub fn retention_recurrent(x: &Tensor, params: &RetentionParams) -> Result<Tensor> {
    let (n, d) = matrix_dims(x)?;
    params.validate(d)?;
    let width = params.out_dim();
    let mut out = Tensor::zeros(&[n, width]);
    let mut col = 0;
    for h in &params.heads {
        let dh = h.w_q.shape()[1];
        let project = |w: &Tensor, t: usize| -> Vec<f64> {
            (0..dh)
                .map(|c| (0..d).map(|i| x.data()[t * d + i] * w.data()[i * dh + c]).sum())
                .collect()
        };
        let mut state = RetentionState::new(dh);
        for t in 0..n {
            let (q, k, v) = (project(&h.w_q, t), project(&h.w_k, t), project(&h.w_v, t));
            let o = state.step(&q, &k, &v, h.gamma);
            out.data_mut()[t * width + col..t * width + col + dh].copy_from_slice(&o);
        }
        col += dh;
    }
    Ok(out)
}

/// Recurrent state `s`, a `d_head × d_head` matrix.
#[derive(Clone, Debug)]
pub struct RetentionState {
    dim: usize,
    s: Vec<f64>,
}

impl RetentionState {
    pub fn new(dim: usize) -> Self {
        RetentionState {
            dim,
            s: vec![0.0; dim * dim],
        }
    }

    /// Advances the state with `(k, v)` and reads it out with `q`.
    pub fn step(&mut self, q: &[f64], k: &[f64], v: &[f64], gamma: f64) -> Vec<f64> {
        let d = self.dim;
        for i in 0..d {
            for j in 0..d {
                self.s[i * d + j] = gamma * self.s[i * d + j] + k[i] * v[j];
            }
        }
        (0..d)
            .map(|j| (0..d).map(|i| q[i] * self.s[i * d + j]).sum())
            .collect()
    }

    pub fn matrix(&self) -> &[f64] {
        &self.s
    }
}

fn matrix_dims(x: &Tensor) -> Result<(usize, usize)> {
    match *x.shape() {
        [n, d] if n >= 1 => Ok((n, d)),
        _ => dim_err(format!("expected a non-empty sequence matrix, got {:?}", x.shape())),
    }
}

struct BlockHead {
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    w_o: ParamId,
    gamma: f64,
}

/// Pre-norm retention block:
/// `y = x + Σ_h Ret_h(LN(x)) W_O,h`, then `y + FFN(LN(y))` with a ×2 ReLU FFN.
pub struct RetentionBlock {
    d_model: usize,
    ln1: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    heads: Vec<BlockHead>,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
}

impl RetentionBlock {
    /// Registers the block's parameters under `prefix`. With `zero_out` the
    /// retention and FFN output projections start at zero, making the block
    /// an identity map.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        gammas: &[f64],
        rng: &mut impl Rng,
        zero_out: bool,
    ) -> Result<Self> {
        let n_heads = gammas.len();
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return dim_err(format!("{d_model} features do not split into {n_heads} heads"));
        }
        for &g in gammas {
            check_gamma(g)?;
        }
        let dh = d_model / n_heads;
        let proj_std = 1.0 / (d_model as f64).sqrt();
        let out_std = if zero_out { 0.0 } else { 0.5 / (d_model as f64).sqrt() };
        let heads = gammas
            .iter()
            .enumerate()
            .map(|(h, &gamma)| BlockHead {
                w_q: store.add_normal(format!("{prefix}.head{h}.w_q"), &[d_model, dh], proj_std, rng),
                w_k: store.add_normal(format!("{prefix}.head{h}.w_k"), &[d_model, dh], proj_std, rng),
                w_v: store.add_normal(format!("{prefix}.head{h}.w_v"), &[d_model, dh], proj_std, rng),
                w_o: store.add_normal(format!("{prefix}.head{h}.w_o"), &[dh, d_model], out_std, rng),
                gamma,
            })
            .collect();
        let hidden = 2 * d_model;
        Ok(RetentionBlock {
            d_model,
            ln1: (
                store.add_full(format!("{prefix}.ln1.gain"), &[d_model], 1.0),
                store.add_zeros(format!("{prefix}.ln1.bias"), &[d_model]),
            ),
            ln2: (
                store.add_full(format!("{prefix}.ln2.gain"), &[d_model], 1.0),
                store.add_zeros(format!("{prefix}.ln2.bias"), &[d_model]),
            ),
            heads,
            ffn_w1: store.add_normal(
                format!("{prefix}.ffn.w1"),
                &[d_model, hidden],
                (2.0 / d_model as f64).sqrt(),
                rng,
            ),
            ffn_b1: store.add_zeros(format!("{prefix}.ffn.b1"), &[hidden]),
            ffn_w2: store.add_normal(
                format!("{prefix}.ffn.w2"),
                &[hidden, d_model],
                if zero_out { 0.0 } else { 0.5 / (hidden as f64).sqrt() },
                rng,
            ),
            ffn_b2: store.add_zeros(format!("{prefix}.ffn.b2"), &[d_model]),
        })
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    /// `x: n × d_model` to `n × d_model`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if g.tape.shape(x).len() != 2 || g.tape.shape(x)[1] != self.d_model {
            return dim_err(format!(
                "retention block expects n×{}, got {:?}",
                self.d_model,
                g.tape.shape(x)
            ));
        }
        let (g1, b1) = (g.p(self.ln1.0), g.p(self.ln1.1));
        let normed = g.tape.layer_norm(x, g1, b1)?;
        let mut y = x;
        for h in &self.heads {
            let (wq, wk, wv, wo) = (g.p(h.w_q), g.p(h.w_k), g.p(h.w_v), g.p(h.w_o));
            let o = retention_head(&mut g.tape, normed, wq, wk, wv, h.gamma)?;
            let proj = g.tape.matmul(o, wo)?;
            y = g.tape.add(y, proj)?;
        }
        let (g2, b2) = (g.p(self.ln2.0), g.p(self.ln2.1));
        let normed = g.tape.layer_norm(y, g2, b2)?;
        let w1 = g.p(self.ffn_w1);
        let hid = g.tape.matmul(normed, w1)?;
        let b1 = g.p(self.ffn_b1);
        let hid = g.tape.add_row(hid, b1)?;
        let hid = g.tape.relu(hid)?;
        let w2 = g.p(self.ffn_w2);
        let out = g.tape.matmul(hid, w2)?;
        let b2 = g.p(self.ffn_b2);
        let out = g.tape.add_row(out, b2)?;
        g.tape.add(y, out)
    }
}
