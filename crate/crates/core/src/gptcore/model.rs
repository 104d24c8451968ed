//! Forward and reverse passes.
//!
//! Activations are row-major `N × width` with `N = batch · steps`; row
//! `b · steps + t` is step `t` of window `b`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::linalg::{add_bias, col_sum_acc, mm, mm_nt, mm_tn_acc};
use super::{Block, GptError, ModelCheckpoint, Weights, LN_EPS};

pub enum Mode<'a> {
    /// No dropout; bit-deterministic.
    Eval,
    Train(&'a mut ChaCha8Rng),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Categorical cross-entropy per output dimension.
    CrossEntropy,
    /// Squared error between the decoded expectation and the target bin
    /// center.
    MseDecoded,
}

/// How a per-dimension bin distribution becomes a continuous value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decode {
    /// Center of the most probable bin.
    #[default]
    Argmax,
    /// Probability-weighted mean of bin centers.
    Expectation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    All,
    /// Gradients stop at the output head; backbone gradients stay zero.
    HeadOnly,
}

struct Norm {
    out: Vec<f64>,
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

struct BlockTrace {
    ln1: Norm,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    y: Vec<f64>,
    drop_o: Option<Vec<f64>>,
    ln2: Norm,
    u: Vec<f64>,
    g: Vec<f64>,
    drop_f: Option<Vec<f64>>,
}

/// Everything the reverse pass needs from a forward pass.
pub struct Trace {
    pub batch: usize,
    pub steps: usize,
    z: Vec<f64>,
    drop0: Option<Vec<f64>>,
    blocks: Vec<BlockTrace>,
    lnf: Norm,
    /// Residual stream after each block, `N × embed`.
    pub hidden: Vec<Vec<f64>>,
    /// `N × (output_dim · bins)`.
    pub logits: Vec<f64>,
}

/// Single-window forward result.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// `T × output_dim × bins`, flattened.
    pub logits: Vec<f64>,
    /// Per block, `T × embed`.
    pub hidden: Vec<Vec<f64>>,
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Norm {
    let e = g.len();
    let n = x.len() / e;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; n];
    for r in 0..n {
        let row = &x[r * e..(r + 1) * e];
        let mean = row.iter().sum::<f64>() / e as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / e as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = s;
        for j in 0..e {
            let h = (row[j] - mean) * s;
            xhat[r * e + j] = h;
            out[r * e + j] = h * g[j] + b[j];
        }
    }
    Norm { out, xhat, rstd }
}

fn layer_norm_back(dy: &[f64], norm: &Norm, g: &[f64], dg: &mut [f64], db: &mut [f64]) -> Vec<f64> {
    let e = g.len();
    let mut dx = vec![0.0; dy.len()];
    for (r, &s) in norm.rstd.iter().enumerate() {
        let span = r * e..(r + 1) * e;
        let (dyr, xh) = (&dy[span.clone()], &norm.xhat[span.clone()]);
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for j in 0..e {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            let dxh = dyr[j] * g[j];
            m1 += dxh;
            m2 += dxh * xh[j];
        }
        m1 /= e as f64;
        m2 /= e as f64;
        for j in 0..e {
            dx[span.start + j] = s * (dyr[j] * g[j] - m1 - xh[j] * m2);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4;

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let th = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

fn dropout(x: &mut [f64], p: f64, mode: &mut Mode) -> Option<Vec<f64>> {
    let Mode::Train(rng) = mode else { return None };
    if p == 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = x.iter().map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
    x.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
    Some(mask)
}

fn apply_mask(dx: &mut [f64], mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        dx.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
    }
}

fn linear(x: &[f64], w: &[f64], b: &[f64], n: usize, fan_in: usize) -> Vec<f64> {
    let mut y = mm(x, w, n, fan_in, b.len());
    add_bias(&mut y, b);
    y
}

/// Accumulates `dW`, `db` and returns `dx` for `y = x·W + b`.
fn linear_back(dy: &[f64], x: &[f64], w: &[f64], dw: &mut [f64], db: &mut [f64], n: usize, fan_in: usize) -> Vec<f64> {
    let fan_out = db.len();
    mm_tn_acc(x, dy, n, fan_in, fan_out, dw);
    col_sum_acc(dy, db);
    mm_nt(dy, w, n, fan_out, fan_in)
}

struct Shape {
    batch: usize,
    steps: usize,
    heads: usize,
    dh: usize,
}

impl Shape {
    fn embed(&self) -> usize {
        self.heads * self.dh
    }
}

/// Causal multi-head attention. Returns the merged head outputs and the
/// attention weights laid out `[batch][head][i][j]`.
fn attention(q: &[f64], k: &[f64], v: &[f64], s: &Shape) -> (Vec<f64>, Vec<f64>) {
    let (t, e, dh) = (s.steps, s.embed(), s.dh);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut y = vec![0.0; q.len()];
    let mut probs = vec![0.0; s.batch * s.heads * t * t];
    let mut scores = vec![0.0; t];
    for b in 0..s.batch {
        for h in 0..s.heads {
            let off = h * dh;
            for i in 0..t {
                let qi = &q[(b * t + i) * e + off..][..dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let kj = &k[(b * t + j) * e + off..][..dh];
                    let sc = qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>() * scale;
                    scores[j] = sc;
                    max = max.max(sc);
                }
                let mut sum = 0.0;
                for sc in &mut scores[..=i] {
                    *sc = (*sc - max).exp();
                    sum += *sc;
                }
                let p = &mut probs[((b * s.heads + h) * t + i) * t..][..t];
                let yi = &mut y[(b * t + i) * e + off..][..dh];
                for j in 0..=i {
                    p[j] = scores[j] / sum;
                    let vj = &v[(b * t + j) * e + off..][..dh];
                    yi.iter_mut().zip(vj).for_each(|(o, x)| *o += p[j] * x);
                }
            }
        }
    }
    (y, probs)
}

fn attention_back(dy: &[f64], q: &[f64], k: &[f64], v: &[f64], probs: &[f64], s: &Shape) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (t, e, dh) = (s.steps, s.embed(), s.dh);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; t];
    for b in 0..s.batch {
        for h in 0..s.heads {
            let off = h * dh;
            for i in 0..t {
                let p = &probs[((b * s.heads + h) * t + i) * t..][..t];
                let ri = (b * t + i) * e + off;
                let dyi = &dy[ri..ri + dh];
                let mut dot = 0.0;
                for j in 0..=i {
                    let rj = (b * t + j) * e + off;
                    dp[j] = dyi.iter().zip(&v[rj..rj + dh]).map(|(a, c)| a * c).sum();
                    dot += p[j] * dp[j];
                    dv[rj..rj + dh].iter_mut().zip(dyi).for_each(|(o, g)| *o += p[j] * g);
                }
                for j in 0..=i {
                    let ds = p[j] * (dp[j] - dot) * scale;
                    let rj = (b * t + j) * e + off;
                    for c in 0..dh {
                        dq[ri + c] += ds * k[rj + c];
                        dk[rj + c] += ds * q[ri + c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

impl ModelCheckpoint {
    fn shape(&self, batch: usize, steps: usize) -> Shape {
        Shape {
            batch,
            steps,
            heads: self.config.heads,
            dh: self.config.embed / self.config.heads,
        }
    }

    /// Forward pass over `batch` windows of `steps` raw input rows each,
    /// packed row-major in `inputs`.
    pub fn forward_batch(&self, inputs: &[f64], batch: usize, steps: usize, mut mode: Mode) -> Result<Trace, GptError> {
        let c = &self.config;
        if steps > c.context {
            return Err(GptError::ContextExceeded { t: steps, context: c.context });
        }
        if steps == 0 || batch == 0 {
            return Err(GptError::Shape {
                what: "window steps".into(),
                expected: 1,
                got: 0,
            });
        }
        let n = batch * steps;
        if inputs.len() != n * c.input_dim {
            return Err(GptError::Shape {
                what: "input values".into(),
                expected: n * c.input_dim,
                got: inputs.len(),
            });
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(GptError::NonFinite("input window".into()));
        }
        let shape = self.shape(batch, steps);
        let (e, w) = (c.embed, &self.weights);
        let norm = &self.input_norm;
        let z: Vec<f64> = inputs
            .chunks_exact(c.input_dim)
            .flat_map(|row| row.iter().enumerate().map(|(j, v)| (v - norm.mean[j]) / norm.std[j]))
            .collect();
        let mut x = linear(&z, &w.w_in, &w.b_in, n, c.input_dim);
        for (r, row) in x.chunks_exact_mut(e).enumerate() {
            let p = &w.pos[(r % steps) * e..][..e];
            row.iter_mut().zip(p).for_each(|(v, q)| *v += q);
        }
        let drop0 = dropout(&mut x, c.dropout, &mut mode);
        let mut blocks = Vec::with_capacity(c.layers);
        let mut hidden = Vec::with_capacity(c.layers);
        for blk in &w.blocks {
            let (bt, out) = block_forward(blk, &x, &shape, c.dropout, &mut mode);
            blocks.push(bt);
            hidden.push(out.clone());
            x = out;
        }
        let lnf = layer_norm(&x, &w.lnf_g, &w.lnf_b);
        let logits = linear(&lnf.out, &w.head_w, &w.head_b, n, e);
        Ok(Trace {
            batch,
            steps,
            z,
            drop0,
            blocks,
            lnf,
            hidden,
            logits,
        })
    }

    /// Forward pass over one window of raw input rows.
    pub fn forward(&self, window: &[Vec<f64>], mode: Mode) -> Result<ForwardOutput, GptError> {
        let flat = self.flatten(window)?;
        let tr = self.forward_batch(&flat, 1, window.len(), mode)?;
        Ok(ForwardOutput {
            logits: tr.logits,
            hidden: tr.hidden,
        })
    }

    fn flatten(&self, window: &[Vec<f64>]) -> Result<Vec<f64>, GptError> {
        let d = self.config.input_dim;
        let mut flat = Vec::with_capacity(window.len() * d);
        for row in window {
            if row.len() != d {
                return Err(GptError::Shape {
                    what: "input row width".into(),
                    expected: d,
                    got: row.len(),
                });
            }
            flat.extend_from_slice(row);
        }
        Ok(flat)
    }

    /// Per-dimension softmax of one step's logits.
    pub fn probabilities(&self, step_logits: &[f64]) -> Vec<Vec<f64>> {
        step_logits.chunks_exact(self.config.bins).map(softmax).collect()
    }

    /// Decodes one step's logits to continuous values.
    pub fn decode_step(&self, step_logits: &[f64], decode: Decode) -> Vec<f64> {
        self.probabilities(step_logits)
            .iter()
            .enumerate()
            .map(|(d, p)| match decode {
                Decode::Argmax => self.discretizer.decode_argmax(p, d),
                Decode::Expectation => self.discretizer.decode(p, d),
            })
            .collect()
    }

    /// Loss and gradients for one window in eval mode. `targets[t][d]` is
    /// the bin index of output dimension `d` at step `t`.
    pub fn backward(&self, window: &[Vec<f64>], targets: &[Vec<usize>], loss: LossKind) -> Result<(f64, Weights), GptError> {
        let flat = self.flatten(window)?;
        let tr = self.forward_batch(&flat, 1, window.len(), Mode::Eval)?;
        if targets.len() != window.len() {
            return Err(GptError::Shape {
                what: "target rows".into(),
                expected: window.len(),
                got: targets.len(),
            });
        }
        let flat_t: Vec<usize> = targets.iter().flatten().copied().collect();
        self.backward_batch(&tr, &flat_t, None, loss, Trainable::All)
    }

    /// Loss and gradients from a trace. `targets` holds `N × output_dim`
    /// bin indices; rows with `mask[r] == false` are ignored. The loss is
    /// summed over dimensions and averaged over unmasked rows.
    pub fn backward_batch(
        &self,
        tr: &Trace,
        targets: &[usize],
        mask: Option<&[bool]>,
        loss: LossKind,
        trainable: Trainable,
    ) -> Result<(f64, Weights), GptError> {
        let c = &self.config;
        let (k, dout, e) = (c.bins, c.output_dim, c.embed);
        let n = tr.batch * tr.steps;
        if targets.len() != n * dout {
            return Err(GptError::Shape {
                what: "targets".into(),
                expected: n * dout,
                got: targets.len(),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(GptError::TargetOutOfRange { index: bad, bins: k });
        }
        if mask.is_some_and(|m| m.len() != n) {
            return Err(GptError::Shape {
                what: "loss mask".into(),
                expected: n,
                got: mask.map_or(0, <[bool]>::len),
            });
        }
        let live = |r: usize| mask.is_none_or(|m| m[r]);
        let count = (0..n).filter(|&r| live(r)).count();
        let w = &self.weights;
        let mut g = w.zeros_like();
        if count == 0 {
            return Ok((0.0, g));
        }
        let inv = 1.0 / count as f64;
        let mut total = 0.0;
        let mut dlogits = vec![0.0; tr.logits.len()];
        for r in (0..n).filter(|&r| live(r)) {
            for d in 0..dout {
                let at = (r * dout + d) * k;
                let z = &tr.logits[at..at + k];
                let p = softmax(z);
                let tgt = targets[r * dout + d];
                let dz = &mut dlogits[at..at + k];
                match loss {
                    LossKind::CrossEntropy => {
                        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                        total += lse - z[tgt];
                        for j in 0..k {
                            dz[j] = (p[j] - f64::from(u8::from(j == tgt))) * inv;
                        }
                    }
                    LossKind::MseDecoded => {
                        let pred = self.discretizer.decode(&p, d);
                        let err = pred - self.discretizer.center(d, tgt);
                        total += err * err;
                        let dpred = 2.0 * err * inv;
                        for j in 0..k {
                            dz[j] = p[j] * (self.discretizer.center(d, j) - pred) * dpred;
                        }
                    }
                }
            }
        }
        let dn = linear_back(&dlogits, &tr.lnf.out, &w.head_w, &mut g.head_w, &mut g.head_b, n, e);
        if trainable == Trainable::HeadOnly {
            return Ok((total * inv, g));
        }
        let mut dx = layer_norm_back(&dn, &tr.lnf, &w.lnf_g, &mut g.lnf_g, &mut g.lnf_b);
        let shape = self.shape(tr.batch, tr.steps);
        for ((blk, bt), gb) in w.blocks.iter().zip(&tr.blocks).zip(g.blocks.iter_mut()).rev() {
            dx = block_backward(blk, bt, gb, dx, &shape);
        }
        apply_mask(&mut dx, &tr.drop0);
        for (r, row) in dx.chunks_exact(e).enumerate() {
            let p = &mut g.pos[(r % tr.steps) * e..][..e];
            p.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
        mm_tn_acc(&tr.z, &dx, n, c.input_dim, e, &mut g.w_in);
        col_sum_acc(&dx, &mut g.b_in);
        Ok((total * inv, g))
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = ex.iter().sum();
    ex.into_iter().map(|v| v / sum).collect()
}

fn block_forward(blk: &Block, x: &[f64], s: &Shape, p: f64, mode: &mut Mode) -> (BlockTrace, Vec<f64>) {
    let e = s.embed();
    let n = x.len() / e;
    let ln1 = layer_norm(x, &blk.ln1_g, &blk.ln1_b);
    let q = linear(&ln1.out, &blk.wq, &blk.bq, n, e);
    let k = linear(&ln1.out, &blk.wk, &blk.bk, n, e);
    let v = linear(&ln1.out, &blk.wv, &blk.bv, n, e);
    let (y, probs) = attention(&q, &k, &v, s);
    let mut o = linear(&y, &blk.wo, &blk.bo, n, e);
    let drop_o = dropout(&mut o, p, mode);
    let x1: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
    let ln2 = layer_norm(&x1, &blk.ln2_g, &blk.ln2_b);
    let u = linear(&ln2.out, &blk.w1, &blk.b1, n, e);
    let g: Vec<f64> = u.iter().map(|&v| gelu(v)).collect();
    let mut f = linear(&g, &blk.w2, &blk.b2, n, 4 * e);
    let drop_f = dropout(&mut f, p, mode);
    let out = x1.iter().zip(&f).map(|(a, b)| a + b).collect();
    let bt = BlockTrace {
        ln1,
        q,
        k,
        v,
        probs,
        y,
        drop_o,
        ln2,
        u,
        g,
        drop_f,
    };
    (bt, out)
}

fn block_backward(blk: &Block, bt: &BlockTrace, gb: &mut Block, dout: Vec<f64>, s: &Shape) -> Vec<f64> {
    let e = s.embed();
    let n = dout.len() / e;
    let mut df = dout.clone();
    apply_mask(&mut df, &bt.drop_f);
    let dg = linear_back(&df, &bt.g, &blk.w2, &mut gb.w2, &mut gb.b2, n, 4 * e);
    let du: Vec<f64> = dg.iter().zip(&bt.u).map(|(d, &u)| d * gelu_grad(u)).collect();
    let dm = linear_back(&du, &bt.ln2.out, &blk.w1, &mut gb.w1, &mut gb.b1, n, e);
    let dln2 = layer_norm_back(&dm, &bt.ln2, &blk.ln2_g, &mut gb.ln2_g, &mut gb.ln2_b);
    let dx1: Vec<f64> = dout.iter().zip(&dln2).map(|(a, b)| a + b).collect();
    let mut d_o = dx1.clone();
    apply_mask(&mut d_o, &bt.drop_o);
    let dy = linear_back(&d_o, &bt.y, &blk.wo, &mut gb.wo, &mut gb.bo, n, e);
    let (dq, dk, dv) = attention_back(&dy, &bt.q, &bt.k, &bt.v, &bt.probs, s);
    let mut da = linear_back(&dq, &bt.ln1.out, &blk.wq, &mut gb.wq, &mut gb.bq, n, e);
    let da_k = linear_back(&dk, &bt.ln1.out, &blk.wk, &mut gb.wk, &mut gb.bk, n, e);
    let da_v = linear_back(&dv, &bt.ln1.out, &blk.wv, &mut gb.wv, &mut gb.bv, n, e);
    for ((a, b), c) in da.iter_mut().zip(&da_k).zip(&da_v) {
        *a += b + c;
    }
    let dln1 = layer_norm_back(&da, &bt.ln1, &blk.ln1_g, &mut gb.ln1_g, &mut gb.ln1_b);
    dx1.iter().zip(&dln1).map(|(a, b)| a + b).collect()
}
