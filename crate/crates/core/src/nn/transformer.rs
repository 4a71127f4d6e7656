//! Pre-norm transformer encoder block with multi-head self-attention.

use std::ops::Range;

use rand::Rng;

use super::linalg::{add_bias, column_sums_acc, matmul, matmul_a_bt, matmul_at_b_acc};
use super::network::{dropout_mask, Mode};

const LN_EPS: f64 = 1e-5;
const FF_SLOPE: f64 = 0.01;

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    hidden: usize,
    heads: usize,
    ff: usize,
    dropout: f64,
    ln1_g: Range<usize>,
    ln1_b: Range<usize>,
    wq: Range<usize>,
    bq: Range<usize>,
    wk: Range<usize>,
    bk: Range<usize>,
    wv: Range<usize>,
    bv: Range<usize>,
    wo: Range<usize>,
    bo: Range<usize>,
    ln2_g: Range<usize>,
    ln2_b: Range<usize>,
    w1: Range<usize>,
    b1: Range<usize>,
    w2: Range<usize>,
    b2: Range<usize>,
    end: usize,
    start: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Cache {
    seq: usize,
    ln1_hat: Vec<f64>,
    ln1_rstd: Vec<f64>,
    n1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    ctx: Vec<f64>,
    mask_attn: Option<Vec<f64>>,
    ln2_hat: Vec<f64>,
    ln2_rstd: Vec<f64>,
    n2: Vec<f64>,
    f1: Vec<f64>,
    act: Vec<f64>,
    mask_act: Option<Vec<f64>>,
    mask_out: Option<Vec<f64>>,
}

impl Layout {
    pub(crate) fn new(start: usize, hidden: usize, heads: usize, ff: usize, dropout: f64) -> Self {
        let mut at = start;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let h2 = hidden * hidden;
        let ln1_g = take(hidden);
        let ln1_b = take(hidden);
        let wq = take(h2);
        let bq = take(hidden);
        let wk = take(h2);
        let bk = take(hidden);
        let wv = take(h2);
        let bv = take(hidden);
        let wo = take(h2);
        let bo = take(hidden);
        let ln2_g = take(hidden);
        let ln2_b = take(hidden);
        let w1 = take(hidden * ff);
        let b1 = take(ff);
        let w2 = take(ff * hidden);
        let b2 = take(hidden);
        Self {
            hidden,
            heads,
            ff,
            dropout,
            ln1_g,
            ln1_b,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ln2_g,
            ln2_b,
            w1,
            b1,
            w2,
            b2,
            end: at,
            start,
        }
    }

    pub(crate) fn size(&self) -> usize {
        self.end - self.start
    }

    pub(crate) fn init<R: Rng + ?Sized>(&self, params: &mut [f64], rng: &mut R) {
        params[self.ln1_g.clone()].fill(1.0);
        params[self.ln2_g.clone()].fill(1.0);
        let hb = 1.0 / (self.hidden as f64).sqrt();
        for r in [&self.wq, &self.wk, &self.wv, &self.wo, &self.w1] {
            params[r.clone()].iter_mut().for_each(|p| *p = rng.random_range(-hb..hb));
        }
        let fb = 1.0 / (self.ff as f64).sqrt();
        params[self.w2.clone()].iter_mut().for_each(|p| *p = rng.random_range(-fb..fb));
    }

    #[allow(clippy::too_many_arguments)]
    fn linear(&self, params: &[f64], x: &[f64], rows: usize, w: &Range<usize>, b: &Range<usize>, k: usize, n: usize) -> Vec<f64> {
        let mut y = vec![0.0; rows * n];
        matmul(x, &params[w.clone()], &mut y, rows, k, n, false);
        add_bias(&mut y, &params[b.clone()]);
        y
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn forward<R: Rng + ?Sized>(
        &self,
        params: &[f64],
        x: Vec<f64>,
        rows: usize,
        seq: usize,
        mode: Mode,
        rng: &mut R,
        record: bool,
    ) -> (Vec<f64>, Option<Cache>) {
        let h = self.hidden;
        let active = mode.stochastic() && self.dropout > 0.0;

        let (n1, ln1_hat, ln1_rstd) = layer_norm(&x, h, &params[self.ln1_g.clone()], &params[self.ln1_b.clone()]);
        let q = self.linear(params, &n1, rows, &self.wq, &self.bq, h, h);
        let k = self.linear(params, &n1, rows, &self.wk, &self.bk, h, h);
        let v = self.linear(params, &n1, rows, &self.wv, &self.bv, h, h);
        let (ctx, probs) = attention(&q, &k, &v, rows / seq, seq, self.heads, h);
        let mut attn = self.linear(params, &ctx, rows, &self.wo, &self.bo, h, h);
        let mask_attn = active.then(|| {
            let m = dropout_mask(attn.len(), self.dropout, rng);
            attn.iter_mut().zip(&m).for_each(|(a, m)| *a *= m);
            m
        });
        let x2: Vec<f64> = x.iter().zip(&attn).map(|(a, b)| a + b).collect();

        let (n2, ln2_hat, ln2_rstd) = layer_norm(&x2, h, &params[self.ln2_g.clone()], &params[self.ln2_b.clone()]);
        let f1 = self.linear(params, &n2, rows, &self.w1, &self.b1, h, self.ff);
        let mut act: Vec<f64> = f1.iter().map(|&z| if z > 0.0 { z } else { FF_SLOPE * z }).collect();
        let mask_act = active.then(|| {
            let m = dropout_mask(act.len(), self.dropout, rng);
            act.iter_mut().zip(&m).for_each(|(a, m)| *a *= m);
            m
        });
        let mut f2 = self.linear(params, &act, rows, &self.w2, &self.b2, self.ff, h);
        let mask_out = active.then(|| {
            let m = dropout_mask(f2.len(), self.dropout, rng);
            f2.iter_mut().zip(&m).for_each(|(a, m)| *a *= m);
            m
        });
        let out: Vec<f64> = x2.iter().zip(&f2).map(|(a, b)| a + b).collect();

        let cache = record.then_some(Cache {
            seq,
            ln1_hat,
            ln1_rstd,
            n1,
            q,
            k,
            v,
            probs,
            ctx,
            mask_attn,
            ln2_hat,
            ln2_rstd,
            n2,
            f1,
            act,
            mask_act,
            mask_out,
        });
        (out, cache)
    }

    /// Accumulates parameter gradients into `grads` and returns the input
    /// gradient.
    pub(crate) fn backward(&self, params: &[f64], c: &Cache, dout: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let h = self.hidden;
        let ff = self.ff;
        let rows = dout.len() / h;

        // Feed-forward branch.
        let mut dx2 = dout.to_vec();
        let mut df2 = dout.to_vec();
        apply_mask(&mut df2, &c.mask_out);
        matmul_at_b_acc(&c.act, &df2, &mut grads[self.w2.clone()], rows, ff, h);
        column_sums_acc(&df2, &mut grads[self.b2.clone()]);
        let mut dact = vec![0.0; rows * ff];
        matmul_a_bt(&df2, &params[self.w2.clone()], &mut dact, rows, h, ff, false);
        apply_mask(&mut dact, &c.mask_act);
        dact.iter_mut()
            .zip(&c.f1)
            .for_each(|(g, &z)| *g *= if z > 0.0 { 1.0 } else { FF_SLOPE });
        matmul_at_b_acc(&c.n2, &dact, &mut grads[self.w1.clone()], rows, h, ff);
        column_sums_acc(&dact, &mut grads[self.b1.clone()]);
        let mut dn2 = vec![0.0; rows * h];
        matmul_a_bt(&dact, &params[self.w1.clone()], &mut dn2, rows, ff, h, false);
        layer_norm_backward(
            &dn2,
            &c.ln2_hat,
            &c.ln2_rstd,
            h,
            &params[self.ln2_g.clone()],
            grads,
            (&self.ln2_g, &self.ln2_b),
            &mut dx2,
        );

        // Attention branch.
        let mut dx = dx2.clone();
        let mut dattn = dx2;
        apply_mask(&mut dattn, &c.mask_attn);
        matmul_at_b_acc(&c.ctx, &dattn, &mut grads[self.wo.clone()], rows, h, h);
        column_sums_acc(&dattn, &mut grads[self.bo.clone()]);
        let mut dctx = vec![0.0; rows * h];
        matmul_a_bt(&dattn, &params[self.wo.clone()], &mut dctx, rows, h, h, false);
        let (dq, dk, dv) = attention_backward(&dctx, &c.q, &c.k, &c.v, &c.probs, rows / c.seq, c.seq, self.heads, h);

        let mut dn1 = vec![0.0; rows * h];
        for (d, w, b) in [(&dq, &self.wq, &self.bq), (&dk, &self.wk, &self.bk), (&dv, &self.wv, &self.bv)] {
            matmul_at_b_acc(&c.n1, d, &mut grads[w.clone()], rows, h, h);
            column_sums_acc(d, &mut grads[b.clone()]);
            matmul_a_bt(d, &params[w.clone()], &mut dn1, rows, h, h, true);
        }
        layer_norm_backward(
            &dn1,
            &c.ln1_hat,
            &c.ln1_rstd,
            h,
            &params[self.ln1_g.clone()],
            grads,
            (&self.ln1_g, &self.ln1_b),
            &mut dx,
        );
        dx
    }
}

fn apply_mask(g: &mut [f64], mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        g.iter_mut().zip(m).for_each(|(g, m)| *g *= m);
    }
}

/// Returns `(y, x_hat, rstd)`.
fn layer_norm(x: &[f64], width: usize, gamma: &[f64], beta: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / width;
    let mut y = vec![0.0; x.len()];
    let mut hat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mean = row.iter().sum::<f64>() / width as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = s;
        for i in 0..width {
            let xh = (row[i] - mean) * s;
            hat[r * width + i] = xh;
            y[r * width + i] = gamma[i] * xh + beta[i];
        }
    }
    (y, hat, rstd)
}

#[allow(clippy::too_many_arguments)]
fn layer_norm_backward(
    dy: &[f64],
    hat: &[f64],
    rstd: &[f64],
    width: usize,
    gamma: &[f64],
    grads: &mut [f64],
    (g_range, b_range): (&Range<usize>, &Range<usize>),
    dx_acc: &mut [f64],
) {
    let rows = dy.len() / width;
    let mut dxhat = vec![0.0; width];
    for r in 0..rows {
        let dyr = &dy[r * width..(r + 1) * width];
        let hr = &hat[r * width..(r + 1) * width];
        for i in 0..width {
            grads[g_range.start + i] += dyr[i] * hr[i];
            grads[b_range.start + i] += dyr[i];
            dxhat[i] = dyr[i] * gamma[i];
        }
        let mean_d = dxhat.iter().sum::<f64>() / width as f64;
        let mean_dh = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / width as f64;
        for i in 0..width {
            dx_acc[r * width + i] += rstd[r] * (dxhat[i] - mean_d - hr[i] * mean_dh);
        }
    }
}

/// Scaled dot-product attention per (batch, head). `probs` is laid out as
/// `[batch][head][query][key]`.
fn attention(q: &[f64], k: &[f64], v: &[f64], batch: usize, seq: usize, heads: usize, hidden: usize) -> (Vec<f64>, Vec<f64>) {
    let dk = hidden / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut ctx = vec![0.0; q.len()];
    let mut probs = vec![0.0; batch * heads * seq * seq];
    let mut scores = vec![0.0; seq];
    for b in 0..batch {
        for hd in 0..heads {
            let col = hd * dk;
            for s in 0..seq {
                let qs = &q[(b * seq + s) * hidden + col..][..dk];
                for t in 0..seq {
                    let kt = &k[(b * seq + t) * hidden + col..][..dk];
                    scores[t] = scale * qs.iter().zip(kt).map(|(a, b)| a * b).sum::<f64>();
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for sc in scores.iter_mut() {
                    *sc = (*sc - max).exp();
                    z += *sc;
                }
                let p = &mut probs[((b * heads + hd) * seq + s) * seq..][..seq];
                for t in 0..seq {
                    p[t] = scores[t] / z;
                }
                let out = &mut ctx[(b * seq + s) * hidden + col..][..dk];
                for t in 0..seq {
                    let vt = &v[(b * seq + t) * hidden + col..][..dk];
                    for (o, x) in out.iter_mut().zip(vt) {
                        *o += p[t] * x;
                    }
                }
            }
        }
    }
    (ctx, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    dctx: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    batch: usize,
    seq: usize,
    heads: usize,
    hidden: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dk = hidden / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dkk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; seq];
    for b in 0..batch {
        for hd in 0..heads {
            let col = hd * dk;
            for s in 0..seq {
                let p = &probs[((b * heads + hd) * seq + s) * seq..][..seq];
                let dcs = &dctx[(b * seq + s) * hidden + col..][..dk];
                for t in 0..seq {
                    let row = (b * seq + t) * hidden + col;
                    dp[t] = dcs.iter().zip(&v[row..row + dk]).map(|(a, b)| a * b).sum();
                    for (d, g) in dv[row..row + dk].iter_mut().zip(dcs) {
                        *d += p[t] * g;
                    }
                }
                let inner: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                let qrow = (b * seq + s) * hidden + col;
                for t in 0..seq {
                    let ds = p[t] * (dp[t] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let krow = (b * seq + t) * hidden + col;
                    for d in 0..dk {
                        dq[qrow + d] += ds * k[krow + d];
                        dkk[krow + d] += ds * q[qrow + d];
                    }
                }
            }
        }
    }
    (dq, dkk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_rows_are_distributions() {
        let (batch, seq, heads, hidden) = (2, 3, 2, 4);
        let n = batch * seq * hidden;
        let q: Vec<f64> = (0..n).map(|i| (i as f64 * 0.3).sin()).collect();
        let k: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).cos()).collect();
        let v: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let (_, probs) = attention(&q, &k, &v, batch, seq, heads, hidden);
        for row in probs.chunks(seq) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn single_token_attention_passes_values_through() {
        let q = vec![1.0, -2.0, 0.5, 3.0];
        let k = vec![0.3, 0.1, -0.2, 0.9];
        let v = vec![4.0, 5.0, 6.0, 7.0];
        let (ctx, _) = attention(&q, &k, &v, 1, 1, 2, 4);
        assert_eq!(ctx, v);
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let x = vec![1.0, 2.0, 3.0, 10.0];
        let (y, _, _) = layer_norm(&x, 4, &[1.0; 4], &[0.0; 4]);
        let mean = y.iter().sum::<f64>() / 4.0;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }
}
