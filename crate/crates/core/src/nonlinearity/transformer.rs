//! Local cross-attention transformer for the nonlinearity.
//!
//! The model is applied in a weight-sharing fashion once per cell. Cell `k`
//! sees only its own state `u_k`, the rate values `J_k`, `J_{k+1}` on either
//! side, and the conditioning vector, so the Jacobian of the assembled system
//! stays banded by construction. The conditioning vector is concatenated to
//! each token before the first projection. Tanh activations and dynamic-tanh
//! normalization keep the input partials bounded.
//!
//! Derivatives are hand-rolled reverse mode over an explicit per-cell trace;
//! no autodiff framework is involved, which keeps the gradient contract
//! checkable against finite differences.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_inputs, ConditioningVector, NonlinearityModel};
use crate::error::ModelError;
use crate::mesh::{DgP0Field, P1Field};

/// Architecture descriptor. `model_dim` must be divisible by `n_heads`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalTransformerConfig {
    pub model_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub state_dim: usize,
    pub conditioning_dim: usize,
    pub ff_dim: usize,
}

impl LocalTransformerConfig {
    pub fn new(
        model_dim: usize,
        n_blocks: usize,
        n_heads: usize,
        state_dim: usize,
        conditioning_dim: usize,
    ) -> Result<Self, ModelError> {
        if model_dim == 0 || n_blocks == 0 || n_heads == 0 || state_dim == 0 {
            return Err(ModelError::Shape(crate::error::ShapeError::Invalid(
                "transformer dimensions must be positive".into(),
            )));
        }
        if model_dim % n_heads != 0 {
            return Err(ModelError::Shape(crate::error::ShapeError::Invalid(format!(
                "model_dim {model_dim} not divisible by n_heads {n_heads}"
            ))));
        }
        Ok(Self {
            model_dim,
            n_blocks,
            n_heads,
            state_dim,
            conditioning_dim,
            ff_dim: 2 * model_dim,
        })
    }

    /// Laptop-scale defaults: dim 32, one block, two heads.
    pub fn desk(state_dim: usize, conditioning_dim: usize) -> Self {
        Self::new(32, 1, 2, state_dim, conditioning_dim).expect("desk config is valid")
    }

    /// Token count: the cell state, the two rate nodes, plus a dedicated
    /// conditioning token when conditioning is present.
    fn n_tokens(&self) -> usize {
        if self.conditioning_dim > 0 {
            4
        } else {
            3
        }
    }

    fn token_input_dims(&self) -> Vec<usize> {
        let dp = self.state_dim + self.conditioning_dim;
        let mut dims = vec![dp, dp, dp];
        if self.conditioning_dim > 0 {
            dims.push(self.conditioning_dim);
        }
        dims
    }

    pub fn n_params(&self) -> usize {
        let d = self.model_dim;
        let f = self.ff_dim;
        let dyt = 1 + 2 * d;
        let proj: usize = self.token_input_dims().iter().map(|&i| d * i + d).sum();
        let block = dyt + 4 * d * d + d + dyt + f * d + f + d * f + d;
        proj + self.n_blocks * block + dyt + self.state_dim * d + self.state_dim
    }
}

#[derive(Debug, Clone)]
struct DytParams {
    alpha: f64,
    gamma: DVector<f64>,
    beta: DVector<f64>,
}

impl DytParams {
    fn zeros(dim: usize) -> Self {
        Self { alpha: 0.0, gamma: DVector::zeros(dim), beta: DVector::zeros(dim) }
    }
}

#[derive(Debug, Clone)]
struct BlockWeights {
    dyt_attn: DytParams,
    w_q: DMatrix<f64>,
    w_k: DMatrix<f64>,
    w_v: DMatrix<f64>,
    w_o: DMatrix<f64>,
    b_o: DVector<f64>,
    dyt_mlp: DytParams,
    w_1: DMatrix<f64>,
    b_1: DVector<f64>,
    w_2: DMatrix<f64>,
    b_2: DVector<f64>,
}

#[derive(Debug, Clone)]
struct Weights {
    token_w: Vec<DMatrix<f64>>,
    token_b: Vec<DVector<f64>>,
    blocks: Vec<BlockWeights>,
    dyt_out: DytParams,
    w_out: DMatrix<f64>,
    b_out: DVector<f64>,
}

impl Weights {
    fn zeros(cfg: &LocalTransformerConfig) -> Self {
        let d = cfg.model_dim;
        let f = cfg.ff_dim;
        let token_w =
            cfg.token_input_dims().iter().map(|&i| DMatrix::zeros(d, i)).collect::<Vec<_>>();
        let token_b = cfg.token_input_dims().iter().map(|_| DVector::zeros(d)).collect();
        let blocks = (0..cfg.n_blocks)
            .map(|_| BlockWeights {
                dyt_attn: DytParams::zeros(d),
                w_q: DMatrix::zeros(d, d),
                w_k: DMatrix::zeros(d, d),
                w_v: DMatrix::zeros(d, d),
                w_o: DMatrix::zeros(d, d),
                b_o: DVector::zeros(d),
                dyt_mlp: DytParams::zeros(d),
                w_1: DMatrix::zeros(f, d),
                b_1: DVector::zeros(f),
                w_2: DMatrix::zeros(d, f),
                b_2: DVector::zeros(d),
            })
            .collect();
        Self {
            token_w,
            token_b,
            blocks,
            dyt_out: DytParams::zeros(d),
            w_out: DMatrix::zeros(cfg.state_dim, d),
            b_out: DVector::zeros(cfg.state_dim),
        }
    }

    /// Visit every parameter tensor in the fixed packing order.
    fn for_each_slot(&mut self, mut f: impl FnMut(Slot<'_>)) {
        for w in &mut self.token_w {
            f(Slot::Mat(w));
        }
        for b in &mut self.token_b {
            f(Slot::Vec(b));
        }
        for blk in &mut self.blocks {
            f(Slot::Scalar(&mut blk.dyt_attn.alpha));
            f(Slot::Vec(&mut blk.dyt_attn.gamma));
            f(Slot::Vec(&mut blk.dyt_attn.beta));
            f(Slot::Mat(&mut blk.w_q));
            f(Slot::Mat(&mut blk.w_k));
            f(Slot::Mat(&mut blk.w_v));
            f(Slot::Mat(&mut blk.w_o));
            f(Slot::Vec(&mut blk.b_o));
            f(Slot::Scalar(&mut blk.dyt_mlp.alpha));
            f(Slot::Vec(&mut blk.dyt_mlp.gamma));
            f(Slot::Vec(&mut blk.dyt_mlp.beta));
            f(Slot::Mat(&mut blk.w_1));
            f(Slot::Vec(&mut blk.b_1));
            f(Slot::Mat(&mut blk.w_2));
            f(Slot::Vec(&mut blk.b_2));
        }
        f(Slot::Scalar(&mut self.dyt_out.alpha));
        f(Slot::Vec(&mut self.dyt_out.gamma));
        f(Slot::Vec(&mut self.dyt_out.beta));
        f(Slot::Mat(&mut self.w_out));
        f(Slot::Vec(&mut self.b_out));
    }

    fn unpack(cfg: &LocalTransformerConfig, flat: &[f64]) -> Self {
        let mut w = Self::zeros(cfg);
        let mut offset = 0;
        w.for_each_slot(|slot| match slot {
            Slot::Scalar(s) => {
                *s = flat[offset];
                offset += 1;
            }
            Slot::Vec(v) => {
                v.as_mut_slice().copy_from_slice(&flat[offset..offset + v.len()]);
                offset += v.len();
            }
            Slot::Mat(m) => {
                let n = m.len();
                m.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
                offset += n;
            }
        });
        debug_assert_eq!(offset, flat.len());
        w
    }

    fn pack(&mut self, out: &mut Vec<f64>) {
        out.clear();
        self.for_each_slot(|slot| match slot {
            Slot::Scalar(s) => out.push(*s),
            Slot::Vec(v) => out.extend_from_slice(v.as_slice()),
            Slot::Mat(m) => out.extend_from_slice(m.as_slice()),
        });
    }
}

enum Slot<'a> {
    Scalar(&'a mut f64),
    Vec(&'a mut DVector<f64>),
    Mat(&'a mut DMatrix<f64>),
}

// ---------------------------------------------------------------------------
// Forward trace and reverse sweep
// ---------------------------------------------------------------------------

struct DytTrace {
    x: DVector<f64>,
    t: DVector<f64>,
}

fn dyt_forward(p: &DytParams, x: DVector<f64>) -> (DVector<f64>, DytTrace) {
    let t = x.map(|v| (p.alpha * v).tanh());
    let out = DVector::from_fn(x.len(), |i, _| p.gamma[i] * t[i] + p.beta[i]);
    (out, DytTrace { x, t })
}

/// Returns the input gradient; accumulates parameter gradients when given.
fn dyt_backward(
    p: &DytParams,
    tr: &DytTrace,
    dout: &DVector<f64>,
    mut grad: Option<&mut DytParams>,
) -> DVector<f64> {
    let n = dout.len();
    let mut dx = DVector::zeros(n);
    let mut dalpha = 0.0;
    for i in 0..n {
        let dt = p.gamma[i] * dout[i];
        let sech2 = 1.0 - tr.t[i] * tr.t[i];
        dalpha += dt * sech2 * tr.x[i];
        dx[i] = dt * sech2 * p.alpha;
    }
    if let Some(g) = grad.as_deref_mut() {
        g.alpha += dalpha;
        for i in 0..n {
            g.gamma[i] += tr.t[i] * dout[i];
            g.beta[i] += dout[i];
        }
    }
    dx
}

struct AttnTrace {
    dyt: Vec<DytTrace>,
    y: Vec<DVector<f64>>,
    q: Vec<DVector<f64>>,
    k: Vec<DVector<f64>>,
    v: Vec<DVector<f64>>,
    /// Row-softmaxed attention weights, one `n_tok x n_tok` matrix per head.
    weights: Vec<DMatrix<f64>>,
    mixed: Vec<DVector<f64>>,
}

struct BlockTrace {
    attn: AttnTrace,
    x_mid: Vec<DVector<f64>>,
    dyt: Vec<DytTrace>,
    y2: Vec<DVector<f64>>,
    hidden_t: Vec<DVector<f64>>,
}

struct CellTrace {
    inputs: Vec<DVector<f64>>,
    blocks: Vec<BlockTrace>,
    dyt_out: DytTrace,
    y_out: DVector<f64>,
}

fn forward_cell(cfg: &LocalTransformerConfig, w: &Weights, inputs: Vec<DVector<f64>>) -> (DVector<f64>, CellTrace) {
    let n_tok = cfg.n_tokens();
    let heads = cfg.n_heads;
    let dh = cfg.model_dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut x: Vec<DVector<f64>> =
        (0..n_tok).map(|r| &w.token_w[r] * &inputs[r] + &w.token_b[r]).collect();
    let mut blocks = Vec::with_capacity(cfg.n_blocks);
    for blk in &w.blocks {
        // Pre-norm attention.
        let mut dyt_traces = Vec::with_capacity(n_tok);
        let mut y = Vec::with_capacity(n_tok);
        for r in 0..n_tok {
            let (out, tr) = dyt_forward(&blk.dyt_attn, x[r].clone());
            y.push(out);
            dyt_traces.push(tr);
        }
        let q: Vec<DVector<f64>> = y.iter().map(|yr| &blk.w_q * yr).collect();
        let k: Vec<DVector<f64>> = y.iter().map(|yr| &blk.w_k * yr).collect();
        let v: Vec<DVector<f64>> = y.iter().map(|yr| &blk.w_v * yr).collect();

        let mut weights = Vec::with_capacity(heads);
        let mut mixed = vec![DVector::zeros(cfg.model_dim); n_tok];
        for hd in 0..heads {
            let lo = hd * dh;
            let mut a = DMatrix::zeros(n_tok, n_tok);
            for r in 0..n_tok {
                let mut row_max = f64::NEG_INFINITY;
                let mut scores = vec![0.0; n_tok];
                for s in 0..n_tok {
                    let mut dot = 0.0;
                    for i in 0..dh {
                        dot += q[r][lo + i] * k[s][lo + i];
                    }
                    scores[s] = dot * scale;
                    row_max = row_max.max(scores[s]);
                }
                let mut denom = 0.0;
                for s in 0..n_tok {
                    scores[s] = (scores[s] - row_max).exp();
                    denom += scores[s];
                }
                for s in 0..n_tok {
                    a[(r, s)] = scores[s] / denom;
                }
            }
            for r in 0..n_tok {
                for s in 0..n_tok {
                    let ars = a[(r, s)];
                    for i in 0..dh {
                        mixed[r][lo + i] += ars * v[s][lo + i];
                    }
                }
            }
            weights.push(a);
        }

        let x_mid: Vec<DVector<f64>> =
            (0..n_tok).map(|r| &x[r] + &blk.w_o * &mixed[r] + &blk.b_o).collect();

        // Pre-norm MLP.
        let mut dyt2_traces = Vec::with_capacity(n_tok);
        let mut y2 = Vec::with_capacity(n_tok);
        let mut hidden_t = Vec::with_capacity(n_tok);
        let mut x_out = Vec::with_capacity(n_tok);
        for r in 0..n_tok {
            let (out, tr) = dyt_forward(&blk.dyt_mlp, x_mid[r].clone());
            let pre = &blk.w_1 * &out + &blk.b_1;
            let t = pre.map(f64::tanh);
            x_out.push(&x_mid[r] + &blk.w_2 * &t + &blk.b_2);
            hidden_t.push(t);
            y2.push(out);
            dyt2_traces.push(tr);
        }

        blocks.push(BlockTrace {
            attn: AttnTrace { dyt: dyt_traces, y, q, k, v, weights, mixed },
            x_mid,
            dyt: dyt2_traces,
            y2,
            hidden_t,
        });
        x = x_out;
    }

    let (y_out, dyt_out) = dyt_forward(&w.dyt_out, x[0].clone());
    let out = &w.w_out * &y_out + &w.b_out;
    (out, CellTrace { inputs, blocks, dyt_out, y_out })
}

/// Reverse sweep through one cell. Returns gradients on the raw token inputs;
/// parameter gradients are accumulated into `grads` when provided.
fn backward_cell(
    cfg: &LocalTransformerConfig,
    w: &Weights,
    tr: &CellTrace,
    dout: &DVector<f64>,
    mut grads: Option<&mut Weights>,
) -> Vec<DVector<f64>> {
    let n_tok = cfg.n_tokens();
    let heads = cfg.n_heads;
    let dh = cfg.model_dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    if let Some(g) = grads.as_deref_mut() {
        g.w_out.ger(1.0, dout, &tr.y_out, 1.0);
        g.b_out += dout;
    }
    let dy_out = w.w_out.tr_mul(dout);
    let mut dx: Vec<DVector<f64>> = vec![DVector::zeros(cfg.model_dim); n_tok];
    dx[0] = dyt_backward(
        &w.dyt_out,
        &tr.dyt_out,
        &dy_out,
        grads.as_deref_mut().map(|g| &mut g.dyt_out),
    );

    for (bi, blk) in w.blocks.iter().enumerate().rev() {
        let btr = &tr.blocks[bi];

        // MLP branch.
        let mut dx_mid: Vec<DVector<f64>> = Vec::with_capacity(n_tok);
        for r in 0..n_tok {
            let dm = &dx[r];
            let dt = blk.w_2.tr_mul(dm);
            let dpre = DVector::from_fn(cfg.ff_dim, |i, _| {
                dt[i] * (1.0 - btr.hidden_t[r][i] * btr.hidden_t[r][i])
            });
            if let Some(g) = grads.as_deref_mut() {
                let gb = &mut g.blocks[bi];
                gb.w_2.ger(1.0, dm, &btr.hidden_t[r], 1.0);
                gb.b_2 += dm;
                gb.w_1.ger(1.0, &dpre, &btr.y2[r], 1.0);
                gb.b_1 += &dpre;
            }
            let dy2 = blk.w_1.tr_mul(&dpre);
            let dmid_branch = dyt_backward(
                &blk.dyt_mlp,
                &btr.dyt[r],
                &dy2,
                grads.as_deref_mut().map(|g| &mut g.blocks[bi].dyt_mlp),
            );
            dx_mid.push(dm + dmid_branch);
        }

        // Attention branch.
        let atr = &btr.attn;
        let mut dmixed: Vec<DVector<f64>> = Vec::with_capacity(n_tok);
        for r in 0..n_tok {
            if let Some(g) = grads.as_deref_mut() {
                let gb = &mut g.blocks[bi];
                gb.w_o.ger(1.0, &dx_mid[r], &atr.mixed[r], 1.0);
                gb.b_o += &dx_mid[r];
            }
            dmixed.push(blk.w_o.tr_mul(&dx_mid[r]));
        }

        let mut dq = vec![DVector::zeros(cfg.model_dim); n_tok];
        let mut dk = vec![DVector::zeros(cfg.model_dim); n_tok];
        let mut dv = vec![DVector::zeros(cfg.model_dim); n_tok];
        for hd in 0..heads {
            let lo = hd * dh;
            let a = &atr.weights[hd];
            for r in 0..n_tok {
                // dA and the softmax backward on row r.
                let mut da = vec![0.0; n_tok];
                for s in 0..n_tok {
                    let mut dot = 0.0;
                    for i in 0..dh {
                        dot += dmixed[r][lo + i] * atr.v[s][lo + i];
                        dv[s][lo + i] += a[(r, s)] * dmixed[r][lo + i];
                    }
                    da[s] = dot;
                }
                let inner: f64 = (0..n_tok).map(|s| a[(r, s)] * da[s]).sum();
                for s in 0..n_tok {
                    let ds = a[(r, s)] * (da[s] - inner) * scale;
                    for i in 0..dh {
                        dq[r][lo + i] += ds * atr.k[s][lo + i];
                        dk[s][lo + i] += ds * atr.q[r][lo + i];
                    }
                }
            }
        }

        let mut dx_in: Vec<DVector<f64>> = Vec::with_capacity(n_tok);
        for r in 0..n_tok {
            let dy = blk.w_q.tr_mul(&dq[r]) + blk.w_k.tr_mul(&dk[r]) + blk.w_v.tr_mul(&dv[r]);
            if let Some(g) = grads.as_deref_mut() {
                let gb = &mut g.blocks[bi];
                gb.w_q.ger(1.0, &dq[r], &atr.y[r], 1.0);
                gb.w_k.ger(1.0, &dk[r], &atr.y[r], 1.0);
                gb.w_v.ger(1.0, &dv[r], &atr.y[r], 1.0);
            }
            let d_branch = dyt_backward(
                &blk.dyt_attn,
                &atr.dyt[r],
                &dy,
                grads.as_deref_mut().map(|g| &mut g.blocks[bi].dyt_attn),
            );
            dx_in.push(&dx_mid[r] + d_branch);
        }
        dx = dx_in;
    }

    let mut dinputs = Vec::with_capacity(n_tok);
    for r in 0..n_tok {
        if let Some(g) = grads.as_deref_mut() {
            g.token_w[r].ger(1.0, &dx[r], &tr.inputs[r], 1.0);
            g.token_b[r] += &dx[r];
        }
        dinputs.push(w.token_w[r].tr_mul(&dx[r]));
    }
    dinputs
}

// ---------------------------------------------------------------------------
// Public model
// ---------------------------------------------------------------------------

/// Weight-shared per-cell transformer model of the nonlinearity.
#[derive(Debug, Clone)]
pub struct LocalTransformer {
    config: LocalTransformerConfig,
    theta: Vec<f64>,
    weights: Weights,
}

impl LocalTransformer {
    /// Random initialization: hidden weights uniform in
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, DyT at `alpha = 0.5`,
    /// `gamma = 1`, `beta = 0`, and a zero output head so the untrained
    /// model is exactly the zero field.
    pub fn new(config: LocalTransformerConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Weights::zeros(&config);
        for tw in &mut w.token_w {
            init_uniform(tw, &mut rng);
        }
        for blk in &mut w.blocks {
            blk.dyt_attn.alpha = 0.5;
            blk.dyt_attn.gamma.fill(1.0);
            blk.dyt_mlp.alpha = 0.5;
            blk.dyt_mlp.gamma.fill(1.0);
            init_uniform(&mut blk.w_q, &mut rng);
            init_uniform(&mut blk.w_k, &mut rng);
            init_uniform(&mut blk.w_v, &mut rng);
            init_uniform(&mut blk.w_o, &mut rng);
            init_uniform(&mut blk.w_1, &mut rng);
            init_uniform(&mut blk.w_2, &mut rng);
        }
        w.dyt_out.alpha = 0.5;
        w.dyt_out.gamma.fill(1.0);
        // w_out and b_out stay zero.
        let mut theta = Vec::with_capacity(config.n_params());
        w.pack(&mut theta);
        Self { config, theta, weights: Weights::unpack(&config, &theta) }
    }

    /// All parameters zero; evaluates to the zero field.
    pub fn zeros(config: LocalTransformerConfig) -> Self {
        let theta = vec![0.0; config.n_params()];
        Self { config, weights: Weights::unpack(&config, &theta), theta }
    }

    pub fn config(&self) -> &LocalTransformerConfig {
        &self.config
    }

    fn cell_inputs(
        &self,
        u: &DgP0Field,
        j: &P1Field,
        z: &ConditioningVector,
        k: usize,
    ) -> Vec<DVector<f64>> {
        let d = self.config.state_dim;
        let p = self.config.conditioning_dim;
        let make = |vals: Vec<f64>| -> DVector<f64> {
            let mut data = vals;
            data.extend(z.0.iter());
            DVector::from_vec(data)
        };
        let mut tokens = vec![
            make((0..d).map(|c| u.values[(k, c)]).collect()),
            make((0..d).map(|c| j.values[(k, c)]).collect()),
            make((0..d).map(|c| j.values[(k + 1, c)]).collect()),
        ];
        if p > 0 {
            tokens.push(DVector::from_vec(z.0.iter().cloned().collect()));
        }
        tokens
    }

    fn check(&self, u: &DgP0Field, j: &P1Field, z: &ConditioningVector) -> Result<(), ModelError> {
        check_inputs(self.config.state_dim, u, j, z)?;
        if z.dim() != self.config.conditioning_dim {
            return Err(ModelError::Shape(crate::error::ShapeError::StateDim {
                expected: self.config.conditioning_dim,
                got: z.dim(),
            }));
        }
        Ok(())
    }
}

fn init_uniform(m: &mut DMatrix<f64>, rng: &mut ChaCha8Rng) {
    let bound = 1.0 / (m.ncols() as f64).sqrt();
    for v in m.as_mut_slice() {
        *v = rng.random_range(-bound..bound);
    }
}

impl NonlinearityModel for LocalTransformer {
    fn state_dim(&self) -> usize {
        self.config.state_dim
    }

    fn conditioning_dim(&self) -> usize {
        self.config.conditioning_dim
    }

    fn n_params(&self) -> usize {
        self.theta.len()
    }

    fn theta(&self) -> Vec<f64> {
        self.theta.clone()
    }

    fn set_theta(&mut self, theta: &[f64]) -> Result<(), ModelError> {
        if theta.len() != self.theta.len() {
            return Err(ModelError::ParamLength { expected: self.theta.len(), got: theta.len() });
        }
        self.theta.copy_from_slice(theta);
        self.weights = Weights::unpack(&self.config, &self.theta);
        Ok(())
    }

    fn evaluate(
        &self,
        u: &DgP0Field,
        j: &P1Field,
        z: &ConditioningVector,
    ) -> Result<DgP0Field, ModelError> {
        self.check(u, j, z)?;
        let m = u.m_cells();
        let d = self.config.state_dim;
        let mut out = DMatrix::zeros(m, d);
        for k in 0..m {
            let (val, _) = forward_cell(&self.config, &self.weights, self.cell_inputs(u, j, z, k));
            if val.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFiniteOutput);
            }
            for c in 0..d {
                out[(k, c)] = val[c];
            }
        }
        Ok(DgP0Field::new(out))
    }

    fn partials(
        &self,
        u: &DgP0Field,
        j: &P1Field,
        z: &ConditioningVector,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>), ModelError> {
        self.check(u, j, z)?;
        let m = u.m_cells();
        let d = self.config.state_dim;
        let mut du = DMatrix::zeros(m * d, m * d);
        let mut dj = DMatrix::zeros(m * d, (m + 1) * d);
        for k in 0..m {
            let (_, trace) =
                forward_cell(&self.config, &self.weights, self.cell_inputs(u, j, z, k));
            for c in 0..d {
                let mut seed = DVector::zeros(d);
                seed[c] = 1.0;
                let dinputs = backward_cell(&self.config, &self.weights, &trace, &seed, None);
                let row = k * d + c;
                for cc in 0..d {
                    du[(row, k * d + cc)] = dinputs[0][cc];
                    dj[(row, k * d + cc)] = dinputs[1][cc];
                    dj[(row, (k + 1) * d + cc)] = dinputs[2][cc];
                }
            }
        }
        Ok((du, dj))
    }

    fn theta_vjp(
        &self,
        u: &DgP0Field,
        j: &P1Field,
        z: &ConditioningVector,
        cotangent: &DgP0Field,
    ) -> Result<DVector<f64>, ModelError> {
        self.check(u, j, z)?;
        if cotangent.m_cells() != u.m_cells() || cotangent.dim() != u.dim() {
            return Err(ModelError::Shape(crate::error::ShapeError::Invalid(
                "cotangent shape must match the model output".into(),
            )));
        }
        let d = self.config.state_dim;
        let mut grads = Weights::zeros(&self.config);
        for k in 0..u.m_cells() {
            let (_, trace) =
                forward_cell(&self.config, &self.weights, self.cell_inputs(u, j, z, k));
            let seed = DVector::from_fn(d, |c, _| cotangent.values[(k, c)]);
            backward_cell(&self.config, &self.weights, &trace, &seed, Some(&mut grads));
        }
        let mut flat = Vec::with_capacity(self.theta.len());
        grads.pack(&mut flat);
        Ok(DVector::from_vec(flat))
    }
}
