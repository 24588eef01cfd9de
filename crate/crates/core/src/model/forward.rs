use super::params::{HeadOffsets, LayerOffsets, MlpOffsets};
use super::{Example, ParamVector, TaskHead, Transformer};
use crate::ops::{axpy, cross_entropy, dot, matmul_a_bt_acc, matmul_acc, matmul_at_b_acc};
use crate::{Error, Result, Scalar};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Logits and attention patterns for one sequence.
#[derive(Clone, Debug)]
pub struct SequenceOutput<T> {
    /// Row-major `n_rows × n_out`: one row per position for next-token
    /// models, a single row for the classifier.
    pub logits: Vec<T>,
    pub n_rows: usize,
    pub n_out: usize,
    /// `attention[layer][head]` is a row-major `n × n` matrix of weights from
    /// query position (row) to key position (column).
    pub attention: Vec<Vec<Vec<T>>>,
}

impl<T: Scalar> SequenceOutput<T> {
    pub fn row(&self, i: usize) -> &[T] {
        &self.logits[i * self.n_out..(i + 1) * self.n_out]
    }
}

struct LnCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

struct HeadCache<T> {
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    p: Vec<T>,
    z: Vec<T>,
}

struct MlpCache<T> {
    ln: Option<LnCache<T>>,
    input: Vec<T>,
    pre: Vec<T>,
    act: Vec<T>,
}

struct LayerCache<T> {
    ln: Option<LnCache<T>>,
    normed: Vec<T>,
    heads: Vec<HeadCache<T>>,
    mlp: Option<MlpCache<T>>,
}

struct SeqCache<T> {
    n: usize,
    layers: Vec<LayerCache<T>>,
    lnf: Option<LnCache<T>>,
    fin: Vec<T>,
    pooled: Vec<T>,
    logits: Vec<T>,
}

fn layer_norm<T: Scalar>(x: &[T], n: usize, d: usize, g: &[T], b: &[T]) -> (Vec<T>, LnCache<T>) {
    let eps = T::of(LN_EPS);
    let inv_d = T::of(1.0 / d as f64);
    let mut y = vec![T::zero(); n * d];
    let mut xhat = vec![T::zero(); n * d];
    let mut rstd = vec![T::zero(); n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let r = (var + eps).sqrt().recip();
        rstd[i] = r;
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[i * d + j] = h;
            y[i * d + j] = h * g[j] + b[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Accumulates `dg`, `db` and returns `dx`.
fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    cache: &LnCache<T>,
    n: usize,
    d: usize,
    g: &[T],
    dg: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    let inv_d = T::of(1.0 / d as f64);
    let mut dx = vec![T::zero(); n * d];
    let mut dxhat = vec![T::zero(); d];
    for i in 0..n {
        let dyr = &dy[i * d..(i + 1) * d];
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for j in 0..d {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let r = cache.rstd[i];
        for j in 0..d {
            dx[i * d + j] = r * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

#[inline]
fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

impl Transformer {
    fn run<T: Scalar>(&self, w: &[T], tokens: &[u32]) -> SeqCache<T> {
        let cfg = &self.config;
        let lay = &self.layout;
        let n = tokens.len();
        let d = cfg.d_model;
        let dh = cfg.d_head;
        let scale = T::of(1.0 / (dh as f64).sqrt());

        let mut x = vec![T::zero(); n * d];
        for (i, &t) in tokens.iter().enumerate() {
            let e = &w[lay.embed + t as usize * d..lay.embed + (t as usize + 1) * d];
            let p = &w[lay.pos + i * d..lay.pos + (i + 1) * d];
            for j in 0..d {
                x[i * d + j] = e[j] + p[j];
            }
        }

        let mut layers = Vec::with_capacity(lay.layers.len());
        for lo in &lay.layers {
            let (normed, ln) = match (lo.ln_g, lo.ln_b) {
                (Some(g), Some(b)) => {
                    let (y, c) = layer_norm(&x, n, d, &w[g..g + d], &w[b..b + d]);
                    (y, Some(c))
                }
                _ => (x.clone(), None),
            };
            let mut heads = Vec::with_capacity(lo.heads.len());
            let mut attn_out = vec![T::zero(); n * d];
            for ho in &lo.heads {
                let mut q = vec![T::zero(); n * dh];
                let mut k = vec![T::zero(); n * dh];
                let mut v = vec![T::zero(); n * dh];
                matmul_acc(&mut q, &normed, &w[ho.q..ho.q + d * dh], n, d, dh);
                matmul_acc(&mut k, &normed, &w[ho.k..ho.k + d * dh], n, d, dh);
                matmul_acc(&mut v, &normed, &w[ho.v..ho.v + d * dh], n, d, dh);
                let mut p = vec![T::zero(); n * n];
                for i in 0..n {
                    let span = if cfg.causal { i + 1 } else { n };
                    let qi = &q[i * dh..(i + 1) * dh];
                    let row = &mut p[i * n..i * n + span];
                    for (j, s) in row.iter_mut().enumerate() {
                        *s = dot(qi, &k[j * dh..(j + 1) * dh]) * scale;
                    }
                    crate::ops::softmax_in_place(row);
                }
                let mut z = vec![T::zero(); n * dh];
                matmul_acc(&mut z, &p, &v, n, n, dh);
                matmul_acc(&mut attn_out, &z, &w[ho.o..ho.o + dh * d], n, dh, d);
                heads.push(HeadCache { q, k, v, p, z });
            }
            for (xi, ai) in x.iter_mut().zip(&attn_out) {
                *xi += *ai;
            }

            let mlp = lo.mlp.as_ref().map(|mo| {
                let m = cfg.d_mlp;
                let (input, ln) = match (mo.ln_g, mo.ln_b) {
                    (Some(g), Some(b)) => {
                        let (y, c) = layer_norm(&x, n, d, &w[g..g + d], &w[b..b + d]);
                        (y, Some(c))
                    }
                    _ => (x.clone(), None),
                };
                let mut pre = vec![T::zero(); n * m];
                for i in 0..n {
                    pre[i * m..(i + 1) * m].copy_from_slice(&w[mo.b_in..mo.b_in + m]);
                }
                matmul_acc(&mut pre, &input, &w[mo.w_in..mo.w_in + d * m], n, d, m);
                let act: Vec<T> = pre.iter().map(|&v| gelu(v)).collect();
                let mut out = vec![T::zero(); n * d];
                for i in 0..n {
                    out[i * d..(i + 1) * d].copy_from_slice(&w[mo.b_out..mo.b_out + d]);
                }
                matmul_acc(&mut out, &act, &w[mo.w_out..mo.w_out + m * d], n, m, d);
                for (xi, oi) in x.iter_mut().zip(&out) {
                    *xi += *oi;
                }
                MlpCache {
                    ln,
                    input,
                    pre,
                    act,
                }
            });
            layers.push(LayerCache {
                ln,
                normed,
                heads,
                mlp,
            });
        }

        let (fin, lnf) = match (lay.lnf_g, lay.lnf_b) {
            (Some(g), Some(b)) => {
                let (y, c) = layer_norm(&x, n, d, &w[g..g + d], &w[b..b + d]);
                (y, Some(c))
            }
            _ => (x, None),
        };
        let n_out = lay.n_out;
        let wo = &w[lay.out_w..lay.out_w + d * n_out];
        let bo = &w[lay.out_b..lay.out_b + n_out];
        let (pooled, logits) = match cfg.task_head {
            TaskHead::NextToken => {
                let mut logits = vec![T::zero(); n * n_out];
                for i in 0..n {
                    logits[i * n_out..(i + 1) * n_out].copy_from_slice(bo);
                }
                matmul_acc(&mut logits, &fin, wo, n, d, n_out);
                (Vec::new(), logits)
            }
            TaskHead::BinaryClassifier => {
                let inv_n = T::of(1.0 / n as f64);
                let mut pooled = vec![T::zero(); d];
                for i in 0..n {
                    axpy(&mut pooled, inv_n, &fin[i * d..(i + 1) * d]);
                }
                let mut logits = bo.to_vec();
                matmul_acc(&mut logits, &pooled, wo, 1, d, n_out);
                (pooled, logits)
            }
        };
        SeqCache {
            n,
            layers,
            lnf,
            fin,
            pooled,
            logits,
        }
    }

    /// Backpropagates `dlogits` (same shape as the cached logits) into `grad`.
    fn backward<T: Scalar>(
        &self,
        w: &[T],
        cache: &SeqCache<T>,
        dlogits: &[T],
        tokens: &[u32],
        grad: &mut [T],
    ) {
        let cfg = &self.config;
        let lay = &self.layout;
        let n = cache.n;
        let d = cfg.d_model;
        let n_out = lay.n_out;
        let wo = &w[lay.out_w..lay.out_w + d * n_out];

        let mut dfin = vec![T::zero(); n * d];
        match cfg.task_head {
            TaskHead::NextToken => {
                matmul_at_b_acc(
                    &mut grad[lay.out_w..lay.out_w + d * n_out],
                    &cache.fin,
                    dlogits,
                    n,
                    d,
                    n_out,
                );
                let db = &mut grad[lay.out_b..lay.out_b + n_out];
                for i in 0..n {
                    axpy(db, T::one(), &dlogits[i * n_out..(i + 1) * n_out]);
                }
                matmul_a_bt_acc(&mut dfin, dlogits, wo, n, n_out, d);
            }
            TaskHead::BinaryClassifier => {
                matmul_at_b_acc(
                    &mut grad[lay.out_w..lay.out_w + d * n_out],
                    &cache.pooled,
                    dlogits,
                    1,
                    d,
                    n_out,
                );
                axpy(&mut grad[lay.out_b..lay.out_b + n_out], T::one(), dlogits);
                let mut dpooled = vec![T::zero(); d];
                matmul_a_bt_acc(&mut dpooled, dlogits, wo, 1, n_out, d);
                let inv_n = T::of(1.0 / n as f64);
                for i in 0..n {
                    axpy(&mut dfin[i * d..(i + 1) * d], inv_n, &dpooled);
                }
            }
        }

        let mut dx = match (&cache.lnf, lay.lnf_g, lay.lnf_b) {
            (Some(c), Some(g), Some(b)) => {
                let (dg, db) = split_two(grad, g, b, d);
                layer_norm_backward(&dfin, c, n, d, &w[g..g + d], dg, db)
            }
            _ => dfin,
        };

        for (lo, lc) in lay.layers.iter().zip(&cache.layers).rev() {
            if let (Some(mo), Some(mc)) = (&lo.mlp, &lc.mlp) {
                self.mlp_backward(w, mo, mc, n, &mut dx, grad);
            }
            self.attention_backward(w, lo, lc, n, &mut dx, grad);
        }

        for (i, (row, &t)) in dx.chunks_exact(d).zip(tokens).enumerate() {
            let p = lay.pos + i * d;
            axpy(&mut grad[p..p + d], T::one(), row);
            let e = lay.embed + t as usize * d;
            axpy(&mut grad[e..e + d], T::one(), row);
        }
    }

    fn mlp_backward<T: Scalar>(
        &self,
        w: &[T],
        mo: &MlpOffsets,
        mc: &MlpCache<T>,
        n: usize,
        dx: &mut [T],
        grad: &mut [T],
    ) {
        let d = self.config.d_model;
        let m = self.config.d_mlp;
        // out = act · W_out + b_out
        matmul_at_b_acc(&mut grad[mo.w_out..mo.w_out + m * d], &mc.act, dx, n, m, d);
        for row in dx.chunks_exact(d) {
            axpy(&mut grad[mo.b_out..mo.b_out + d], T::one(), row);
        }
        let mut dact = vec![T::zero(); n * m];
        matmul_a_bt_acc(&mut dact, dx, &w[mo.w_out..mo.w_out + m * d], n, d, m);
        for (g, &p) in dact.iter_mut().zip(&mc.pre) {
            *g *= gelu_grad(p);
        }
        matmul_at_b_acc(&mut grad[mo.w_in..mo.w_in + d * m], &mc.input, &dact, n, d, m);
        for row in dact.chunks_exact(m) {
            axpy(&mut grad[mo.b_in..mo.b_in + m], T::one(), row);
        }
        let mut dinput = vec![T::zero(); n * d];
        matmul_a_bt_acc(&mut dinput, &dact, &w[mo.w_in..mo.w_in + d * m], n, m, d);
        let dres = match (&mc.ln, mo.ln_g, mo.ln_b) {
            (Some(c), Some(g), Some(b)) => {
                let (dg, db) = split_two(grad, g, b, d);
                layer_norm_backward(&dinput, c, n, d, &w[g..g + d], dg, db)
            }
            _ => dinput,
        };
        for (a, b) in dx.iter_mut().zip(&dres) {
            *a += *b;
        }
    }

    fn attention_backward<T: Scalar>(
        &self,
        w: &[T],
        lo: &LayerOffsets,
        lc: &LayerCache<T>,
        n: usize,
        dx: &mut [T],
        grad: &mut [T],
    ) {
        let cfg = &self.config;
        let d = cfg.d_model;
        let dh = cfg.d_head;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut dnormed = vec![T::zero(); n * d];
        for (ho, hc) in lo.heads.iter().zip(&lc.heads) {
            let HeadOffsets { q, k, v, o } = *ho;
            matmul_at_b_acc(&mut grad[o..o + dh * d], &hc.z, dx, n, dh, d);
            let mut dz = vec![T::zero(); n * dh];
            matmul_a_bt_acc(&mut dz, dx, &w[o..o + dh * d], n, d, dh);

            let mut dq = vec![T::zero(); n * dh];
            let mut dk = vec![T::zero(); n * dh];
            let mut dv = vec![T::zero(); n * dh];
            // z = p · v
            matmul_at_b_acc(&mut dv, &hc.p, &dz, n, n, dh);
            let mut dp = vec![T::zero(); n];
            for i in 0..n {
                let span = if cfg.causal { i + 1 } else { n };
                let dzi = &dz[i * dh..(i + 1) * dh];
                let prow = &hc.p[i * n..i * n + span];
                let mut acc = T::zero();
                for j in 0..span {
                    dp[j] = dot(dzi, &hc.v[j * dh..(j + 1) * dh]);
                    acc += prow[j] * dp[j];
                }
                let qi = &hc.q[i * dh..(i + 1) * dh];
                for j in 0..span {
                    let ds = prow[j] * (dp[j] - acc) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    axpy(&mut dq[i * dh..(i + 1) * dh], ds, &hc.k[j * dh..(j + 1) * dh]);
                    axpy(&mut dk[j * dh..(j + 1) * dh], ds, qi);
                }
            }
            for (off, dmat) in [(q, &dq), (k, &dk), (v, &dv)] {
                matmul_at_b_acc(&mut grad[off..off + d * dh], &lc.normed, dmat, n, d, dh);
                matmul_a_bt_acc(&mut dnormed, dmat, &w[off..off + d * dh], n, dh, d);
            }
        }
        let dres = match (&lc.ln, lo.ln_g, lo.ln_b) {
            (Some(c), Some(g), Some(b)) => {
                let (dg, db) = split_two(grad, g, b, d);
                layer_norm_backward(&dnormed, c, n, d, &w[g..g + d], dg, db)
            }
            _ => dnormed,
        };
        for (a, b) in dx.iter_mut().zip(&dres) {
            *a += *b;
        }
    }

    /// Logits and attention tensors for every example.
    pub fn forward<T: Scalar>(
        &self,
        params: &ParamVector<T>,
        examples: &[Example],
    ) -> Result<Vec<SequenceOutput<T>>> {
        self.check_params(params)?;
        self.check_examples(examples)?;
        Ok(examples
            .iter()
            .map(|ex| {
                let c = self.run(&params.values, &ex.tokens);
                let n_rows = c.logits.len() / self.layout.n_out;
                let attention = c
                    .layers
                    .into_iter()
                    .map(|l| l.heads.into_iter().map(|h| h.p).collect())
                    .collect();
                SequenceOutput {
                    logits: c.logits,
                    n_rows,
                    n_out: self.layout.n_out,
                    attention,
                }
            })
            .collect())
    }

    /// Unweighted negative log-likelihood of every target of every example.
    pub fn per_target_losses<T: Scalar>(
        &self,
        params: &ParamVector<T>,
        examples: &[Example],
    ) -> Result<Vec<Vec<T>>> {
        self.check_params(params)?;
        self.check_examples(examples)?;
        let n_out = self.layout.n_out;
        let mut probs = vec![T::zero(); n_out];
        Ok(examples
            .iter()
            .map(|ex| {
                let c = self.run(&params.values, &ex.tokens);
                ex.targets
                    .iter()
                    .enumerate()
                    .map(|(i, &t)| {
                        cross_entropy(&c.logits[i * n_out..(i + 1) * n_out], t as usize, &mut probs)
                    })
                    .collect()
            })
            .collect())
    }

    /// Weighted mean negative log-likelihood over all targets in `examples`.
    ///
    /// The weighted sum is divided by the number of targets, not the weight
    /// total, so scaling every weight scales the loss.
    pub fn loss<T: Scalar>(&self, params: &ParamVector<T>, examples: &[Example]) -> Result<T> {
        if examples.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let losses = self.per_target_losses(params, examples)?;
        let count: usize = examples.iter().map(|e| e.targets.len()).sum();
        let mut total = T::zero();
        for (ex, ls) in examples.iter().zip(&losses) {
            for (i, &l) in ls.iter().enumerate() {
                total += T::of(ex.weight(i)) * l;
            }
        }
        Ok(total / T::of(count as f64))
    }

    /// Loss and exact gradient. With `restrict_to`, gradient coordinates
    /// outside the mask are exactly zero.
    pub fn loss_and_grad<T: Scalar>(
        &self,
        params: &ParamVector<T>,
        examples: &[Example],
        restrict_to: Option<&[bool]>,
    ) -> Result<(T, ParamVector<T>)> {
        if examples.is_empty() {
            return Err(Error::EmptyBatch);
        }
        self.check_params(params)?;
        self.check_examples(examples)?;
        if let Some(mask) = restrict_to {
            if mask.len() != params.len() {
                return Err(Error::Shape("component mask length".into()));
            }
        }
        let w = &params.values;
        let n_out = self.layout.n_out;
        let count: usize = examples.iter().map(|e| e.targets.len()).sum();
        let inv_count = T::of(1.0 / count as f64);
        let mut grad = vec![T::zero(); w.len()];
        let mut total = T::zero();
        let mut probs = vec![T::zero(); n_out];
        for ex in examples {
            let cache = self.run(w, &ex.tokens);
            let mut dlogits = vec![T::zero(); cache.logits.len()];
            let mut any = false;
            for (i, &t) in ex.targets.iter().enumerate() {
                let wt = T::of(ex.weight(i));
                let row = &cache.logits[i * n_out..(i + 1) * n_out];
                let nll = cross_entropy(row, t as usize, &mut probs);
                total += wt * nll;
                if wt == T::zero() {
                    continue;
                }
                any = true;
                let scale = wt * inv_count;
                let drow = &mut dlogits[i * n_out..(i + 1) * n_out];
                for (k, (dv, &p)) in drow.iter_mut().zip(&probs).enumerate() {
                    *dv = scale * (p - if k == t as usize { T::one() } else { T::zero() });
                }
            }
            if !any {
                continue;
            }
            self.backward(w, &cache, &dlogits, &ex.tokens, &mut grad);
        }
        if let Some(mask) = restrict_to {
            for (g, &m) in grad.iter_mut().zip(mask) {
                if !m {
                    *g = T::zero();
                }
            }
        }
        Ok((total * inv_count, params.with_values(grad)))
    }

    /// Central-difference estimate of the gradient of [`Transformer::loss`].
    pub fn finite_diff_grad<T: Scalar>(
        &self,
        params: &ParamVector<T>,
        examples: &[Example],
        h: T,
    ) -> Result<ParamVector<T>> {
        if !(h > T::zero()) {
            return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
        }
        let mut probe = params.clone();
        let mut grad = vec![T::zero(); params.len()];
        for i in 0..params.len() {
            let orig = probe.values[i];
            probe.values[i] = orig + h;
            let up = self.loss(&probe, examples)?;
            probe.values[i] = orig - h;
            let down = self.loss(&probe, examples)?;
            probe.values[i] = orig;
            grad[i] = (up - down) / (h + h);
        }
        Ok(params.with_values(grad))
    }
}

fn split_two<T>(grad: &mut [T], a: usize, b: usize, len: usize) -> (&mut [T], &mut [T]) {
    debug_assert!(a + len <= b);
    let (lo, hi) = grad.split_at_mut(b);
    (&mut lo[a..a + len], &mut hi[..len])
}
