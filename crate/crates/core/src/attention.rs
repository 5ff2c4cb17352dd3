//! Masked multi-head self-attention over `[V, G]` and the tanh-gated residual.
//!
//! Reductions run in a fixed left-to-right order per output element, so the
//! result is bitwise identical whether rows are computed serially or on the
//! rayon pool.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::masks::AttentionMask;
use crate::rng::CounterRng;
use crate::scalar::Real;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("{} values for a {rows}x{cols} matrix", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    /// Entries drawn from `N(0, scale^2)`.
    pub fn random_normal(rows: usize, cols: usize, scale: f64, rng: &mut CounterRng) -> Self {
        Self {
            rows,
            cols,
            data: (0..rows * cols).map(|_| T::lit(rng.normal() * scale)).collect(),
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matmul(&self, rhs: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != rhs.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        out.data.par_chunks_mut(rhs.cols.max(1)).enumerate().for_each(|(r, orow)| {
            for (k, &a) in self.row(r).iter().enumerate() {
                let brow = rhs.row(k);
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o = *o + a * b;
                }
            }
        });
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenRole {
    Visual,
    Condition,
    Concatenated,
}

/// Token features, one row per token and `d_model` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix<T> {
    pub role: TokenRole,
    pub values: Matrix<T>,
}

impl<T: Real> TokenMatrix<T> {
    pub fn new(role: TokenRole, values: Matrix<T>) -> Self {
        Self { role, values }
    }

    pub fn visual(values: Matrix<T>) -> Self {
        Self::new(TokenRole::Visual, values)
    }

    pub fn condition(values: Matrix<T>) -> Self {
        Self::new(TokenRole::Condition, values)
    }

    pub fn rows(&self) -> usize {
        self.values.rows
    }

    pub fn cols(&self) -> usize {
        self.values.cols
    }

    pub fn concat(v: &TokenMatrix<T>, g: &TokenMatrix<T>) -> Result<TokenMatrix<T>> {
        if v.cols() != g.cols() && g.rows() > 0 {
            return Err(Error::Shape(format!(
                "visual tokens have {} channels, condition tokens {}",
                v.cols(),
                g.cols()
            )));
        }
        let mut data = v.values.data.clone();
        data.extend_from_slice(&g.values.data);
        Ok(Self::new(
            TokenRole::Concatenated,
            Matrix::from_vec(v.rows() + g.rows(), v.cols(), data)?,
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    pub d_model: usize,
    pub heads: usize,
    /// `d_model x d_model`; head `h` uses columns `h*d_h .. (h+1)*d_h`.
    pub w_q: Matrix<T>,
    pub w_k: Matrix<T>,
    pub w_v: Matrix<T>,
    pub w_o: Matrix<T>,
    /// Residual gate; the block is a no-op while it is zero.
    pub omega: T,
}

impl<T: Real> AttentionParams<T> {
    pub fn new(w_q: Matrix<T>, w_k: Matrix<T>, w_v: Matrix<T>, w_o: Matrix<T>, heads: usize, omega: T) -> Result<Self> {
        let d = w_q.rows;
        for (name, w) in [("w_q", &w_q), ("w_k", &w_k), ("w_v", &w_v), ("w_o", &w_o)] {
            if w.rows != d || w.cols != d {
                return Err(Error::Shape(format!("{name} is {}x{}, expected {d}x{d}", w.rows, w.cols)));
            }
        }
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::validation("heads", format!("d_model = {d} is not divisible by {heads} heads")));
        }
        if !omega.is_finite() {
            return Err(Error::validation("omega", "must be finite"));
        }
        Ok(Self {
            d_model: d,
            heads,
            w_q,
            w_k,
            w_v,
            w_o,
            omega,
        })
    }

    /// Fresh projections with `N(0, 1/d_model)` entries and a zero gate.
    pub fn seeded(d_model: usize, heads: usize, seed: u64) -> Result<Self> {
        let root = CounterRng::new(seed);
        let scale = 1.0 / (d_model as f64).sqrt();
        let mut w = (0..4).map(|i| Matrix::random_normal(d_model, d_model, scale, &mut root.split(i)));
        let (q, k, v, o) = (w.next().unwrap(), w.next().unwrap(), w.next().unwrap(), w.next().unwrap());
        Self::new(q, k, v, o, heads, T::zero())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

fn is_masked<T: Real>(v: T) -> bool {
    v <= T::masked_logit()
}

/// `softmax(logits + mask_row)` with max subtraction. Entries whose additive
/// mask is `-inf` (or the most negative finite value) come out exactly zero,
/// as does any weight below [`Real::snap_threshold`].
pub fn masked_softmax<T: Real>(logits: &[T], mask_row: &[T]) -> Result<Vec<T>> {
    masked_softmax_row(logits, mask_row, 0)
}

fn masked_softmax_row<T: Real>(logits: &[T], mask_row: &[T], row: usize) -> Result<Vec<T>> {
    if logits.len() != mask_row.len() {
        return Err(Error::Shape(format!("{} logits, {} mask entries", logits.len(), mask_row.len())));
    }
    let mut max = T::neg_infinity();
    let mut any = false;
    for (&l, &m) in logits.iter().zip(mask_row) {
        if !is_masked(m) {
            any = true;
            max = max.max(l + m);
        }
    }
    if !any {
        return Err(Error::DeadRow(row));
    }
    let mut w: Vec<T> = logits
        .iter()
        .zip(mask_row)
        .map(|(&l, &m)| if is_masked(m) { T::zero() } else { (l + m - max).exp() })
        .collect();
    let sum = w.iter().fold(T::zero(), |a, &b| a + b);
    let snap = T::snap_threshold();
    for x in &mut w {
        *x = *x / sum;
        if *x < snap {
            *x = T::zero();
        }
    }
    Ok(w)
}

/// Gradient of a scalar loss w.r.t. the logits, given the softmax output and
/// the loss gradient w.r.t. the weights: `w_i (g_i - sum_j w_j g_j)`.
pub fn masked_softmax_backward<T: Real>(weights: &[T], grad_weights: &[T]) -> Vec<T> {
    let dot = weights.iter().zip(grad_weights).fold(T::zero(), |a, (&w, &g)| a + w * g);
    weights.iter().zip(grad_weights).map(|(&w, &g)| w * (g - dot)).collect()
}

/// Attention output plus the per-head weight matrices (`(m+n) x (m+n)` each).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput<T> {
    pub output: TokenMatrix<T>,
    pub weights: Vec<Matrix<T>>,
}

pub fn sa_mask<T: Real>(
    v: &TokenMatrix<T>,
    g: &TokenMatrix<T>,
    mask: &AttentionMask,
    params: &AttentionParams<T>,
) -> Result<TokenMatrix<T>> {
    sa_mask_detailed(v, g, mask, params).map(|o| o.output)
}

pub fn sa_mask_detailed<T: Real>(
    v: &TokenMatrix<T>,
    g: &TokenMatrix<T>,
    mask: &AttentionMask,
    params: &AttentionParams<T>,
) -> Result<AttentionOutput<T>> {
    if v.rows() != mask.m() || g.rows() != mask.n() {
        return Err(Error::Shape(format!(
            "mask is for {}+{} tokens, got {}+{}",
            mask.m(),
            mask.n(),
            v.rows(),
            g.rows()
        )));
    }
    if v.cols() != params.d_model {
        return Err(Error::Shape(format!("tokens have {} channels, d_model is {}", v.cols(), params.d_model)));
    }
    let x = TokenMatrix::concat(v, g)?;
    let q = x.values.matmul(&params.w_q)?;
    let k = x.values.matmul(&params.w_k)?;
    let vp = x.values.matmul(&params.w_v)?;
    let n_tok = x.rows();
    let dh = params.head_dim();
    let inv_sqrt = T::one() / T::from_usize(dh).unwrap().sqrt();

    let mask_rows: Vec<Vec<T>> = (0..n_tok).map(|r| mask.additive_row(r)).collect();
    let mut context = Matrix::zeros(n_tok, params.d_model);
    let mut weights = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let cols = h * dh..(h + 1) * dh;
        let rows: Vec<Result<(Vec<T>, Vec<T>)>> = (0..n_tok)
            .into_par_iter()
            .map(|r| {
                let qr = &q.row(r)[cols.clone()];
                let logits: Vec<T> = (0..n_tok)
                    .map(|c| {
                        let kc = &k.row(c)[cols.clone()];
                        qr.iter().zip(kc).fold(T::zero(), |a, (&x, &y)| a + x * y) * inv_sqrt
                    })
                    .collect();
                let w = masked_softmax_row(&logits, &mask_rows[r], r)?;
                let mut ctx = vec![T::zero(); dh];
                for (c, &wc) in w.iter().enumerate() {
                    if wc == T::zero() {
                        continue;
                    }
                    for (o, &val) in ctx.iter_mut().zip(&vp.row(c)[cols.clone()]) {
                        *o = *o + wc * val;
                    }
                }
                Ok((w, ctx))
            })
            .collect();
        let mut wm = Matrix::zeros(n_tok, n_tok);
        for (r, res) in rows.into_iter().enumerate() {
            let (w, ctx) = res?;
            wm.row_mut(r).copy_from_slice(&w);
            context.row_mut(r)[cols.clone()].copy_from_slice(&ctx);
        }
        weights.push(wm);
    }
    let out = context.matmul(&params.w_o)?;
    Ok(AttentionOutput {
        output: TokenMatrix::new(TokenRole::Concatenated, out),
        weights,
    })
}

/// `V + tanh(omega) * sa_out[..m]`; condition-token rows are dropped.
pub fn gated_fuse<T: Real>(v: &TokenMatrix<T>, sa_out: &TokenMatrix<T>, omega: T) -> Result<TokenMatrix<T>> {
    if sa_out.rows() < v.rows() || sa_out.cols() != v.cols() {
        return Err(Error::Shape(format!(
            "cannot fuse {}x{} attention output into {}x{} tokens",
            sa_out.rows(),
            sa_out.cols(),
            v.rows(),
            v.cols()
        )));
    }
    let gate = omega.tanh();
    if gate == T::zero() {
        return Ok(v.clone());
    }
    let n = v.values.data.len();
    let data = v
        .values
        .data
        .iter()
        .zip(&sa_out.values.data[..n])
        .map(|(&a, &b)| a + gate * b)
        .collect();
    Ok(TokenMatrix::new(TokenRole::Visual, Matrix::from_vec(v.rows(), v.cols(), data)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::IndicatorIndex;
    use crate::masks::{build_attention_mask, BackgroundPolicy, ConditionBlockMode};

    const NEG: f64 = f64::NEG_INFINITY;

    #[test]
    fn softmax_examples() {
        assert_eq!(masked_softmax(&[1.0, 1.0], &[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(masked_softmax(&[5.0, 100.0], &[0.0, NEG]).unwrap(), vec![1.0, 0.0]);
        let w = masked_softmax(&[1.0f64, 2.0, 3.0], &[0.0, NEG, 0.0]).unwrap();
        let e2 = 2f64.exp();
        assert!((w[0] - 1.0 / (1.0 + e2)).abs() < 1e-15);
        assert_eq!(w[1], 0.0);
        assert!((w[2] - e2 / (1.0 + e2)).abs() < 1e-15);
        assert!((w[0] - 0.1192).abs() < 1e-4 && (w[2] - 0.8808).abs() < 1e-4);
        // Finite sentinel behaves like -inf.
        let w = masked_softmax(&[1.0f64, 2.0, 3.0], &[0.0, f64::MIN, 0.0]).unwrap();
        assert_eq!(w[1], 0.0);
    }

    #[test]
    fn softmax_errors() {
        assert!(matches!(masked_softmax(&[1.0, 2.0], &[NEG, NEG]), Err(Error::DeadRow(_))));
        assert!(masked_softmax(&[1.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn softmax_f32_masks_exactly() {
        let w = masked_softmax(&[3.0f32, -2.0, 0.5], &[f32::MIN, 0.0, 0.0]).unwrap();
        assert_eq!(w[0], 0.0);
        assert!((w.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let logits = [0.3f64, -1.2, 2.0, 0.7];
        let mask = [0.0, NEG, 0.0, 0.0];
        let c = [1.5, -0.4, 0.9, -2.0];
        let loss = |l: &[f64]| {
            let w = masked_softmax(l, &mask).unwrap();
            w.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>()
        };
        let w = masked_softmax(&logits, &mask).unwrap();
        let grad = masked_softmax_backward(&w, &c);
        for i in 0..4 {
            let h = 1e-6;
            let mut p = logits;
            let mut m = logits;
            p[i] += h;
            m[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-5 * fd.abs().max(1e-3), "{i}: {fd} vs {}", grad[i]);
        }
        assert_eq!(grad[1], 0.0);
    }

    fn open_mask(m: usize, n: usize) -> AttentionMask {
        let idx = IndicatorIndex::from_sets(vec![(1..=n as u64).collect(); m]);
        let order: Vec<u64> = (1..=n as u64).collect();
        build_attention_mask(&idx, &order, BackgroundPolicy::ForegroundOnly, ConditionBlockMode::AllOpen).unwrap()
    }

    #[test]
    fn uniform_attention_averages_rows() {
        let d = 3;
        let params = AttentionParams::new(
            Matrix::zeros(d, d),
            Matrix::zeros(d, d),
            Matrix::identity(d),
            Matrix::identity(d),
            1,
            0.0f64,
        )
        .unwrap();
        let v = TokenMatrix::visual(Matrix::from_vec(3, d, (0..9).map(f64::from).collect()).unwrap());
        let g = TokenMatrix::condition(Matrix::from_vec(1, d, vec![3.0, -1.0, 2.0]).unwrap());
        let out = sa_mask(&v, &g, &open_mask(3, 1), &params).unwrap();
        let mean = [(0.0 + 3.0 + 6.0 + 3.0) / 4.0, (1.0 + 4.0 + 7.0 - 1.0) / 4.0, (2.0 + 5.0 + 8.0 + 2.0) / 4.0];
        for r in 0..4 {
            for c in 0..d {
                assert!((out.values.get(r, c) - mean[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let params = AttentionParams::<f64>::seeded(4, 2, 1).unwrap();
        let v = TokenMatrix::visual(Matrix::zeros(2, 4));
        let g = TokenMatrix::condition(Matrix::zeros(1, 4));
        assert!(sa_mask(&v, &g, &open_mask(3, 1), &params).is_err());
        assert!(AttentionParams::<f64>::seeded(6, 4, 1).is_err());
        let short = TokenMatrix::visual(Matrix::zeros(1, 4));
        assert!(gated_fuse(&v, &short, 0.5).is_err());
    }

    #[test]
    fn zero_gate_is_bitwise_identity() {
        let mut rng = CounterRng::new(9);
        let mut data: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
        data[0] = -0.0;
        let v = TokenMatrix::visual(Matrix::from_vec(3, 4, data).unwrap());
        let sa = TokenMatrix::new(TokenRole::Concatenated, Matrix::random_normal(5, 4, 1.0, &mut rng));
        let out = gated_fuse(&v, &sa, 0.0).unwrap();
        for (a, b) in out.values.data.iter().zip(&v.values.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let sat = gated_fuse(&v, &sa, 20.0).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                let e = v.values.get(r, c) + sa.values.get(r, c);
                assert!((sat.values.get(r, c) - e).abs() < 1e-8);
            }
        }
        let half = gated_fuse(&v, &sa, 0.5).unwrap();
        let t = 0.5f64.tanh();
        assert!((half.values.get(2, 3) - (v.values.get(2, 3) + t * sa.values.get(2, 3))).abs() < 1e-15);
    }
}
