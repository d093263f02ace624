//! Dense linear algebra, activations, losses, Adam, and finite-difference
//! gradient checking.
//!
//! Everything here works in `f64`. Matrices are row-major. Vectors are plain
//! slices so callers can hand in views into larger parameter buffers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Tensor1 = Vec<f64>;

/// Owned row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {}x{} matrix",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Tensor2 { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {} has {} columns, expected {}",
                    i,
                    r.len(),
                    cols
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor2 {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor2::zeros(n, n);
        for i in 0..n {
            t.set(i, i, 1.0);
        }
        t
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn view(&self) -> MatRef<'_> {
        MatRef {
            rows: self.rows,
            cols: self.cols,
            data: &self.data,
        }
    }

    pub fn transpose(&self) -> Tensor2 {
        let mut t = Tensor2::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    pub fn matmul(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Tensor2::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let dst = out.row_mut(i);
                for (d, &b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Borrowed row-major matrix, usually a block of a [`ParamStore`].
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a> {
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [f64],
}

impl<'a> MatRef<'a> {
    pub fn new(rows: usize, cols: usize, data: &'a [f64]) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        MatRef { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &'a [f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `W x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `out += W x`
    pub fn matvec_acc(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            *o += dot(self.row(r), x);
        }
    }

    /// `out += Wᵀ y`
    pub fn matvec_t_acc(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            axpy(yr, self.row(r), out);
        }
    }

    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        self.matvec_t_acc(y, &mut out);
        out
    }
}

/// `grad += a bᵀ` for a row-major `a.len() x b.len()` buffer.
pub fn add_outer(grad: &mut [f64], a: &[f64], b: &[f64]) {
    debug_assert_eq!(grad.len(), a.len() * b.len());
    for (row, &ai) in grad.chunks_exact_mut(b.len()).zip(a) {
        if ai == 0.0 {
            continue;
        }
        axpy(ai, b, row);
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(v: &[f64]) -> Result<Tensor1> {
    if v.is_empty() {
        return Err(Error::Empty("softmax input".into()));
    }
    check_finite(v, "softmax input")?;
    Ok(softmax_unchecked(v))
}

pub(crate) fn softmax_unchecked(v: &[f64]) -> Tensor1 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= s);
    out
}

pub fn log_softmax(v: &[f64]) -> Result<Tensor1> {
    if v.is_empty() {
        return Err(Error::Empty("log_softmax input".into()));
    }
    check_finite(v, "log_softmax input")?;
    let lse = log_sum_exp(v);
    Ok(v.iter().map(|x| x - lse).collect())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)` without overflow.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Softmax cross-entropy `-log softmax(logits)[target]`.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::Empty("cross_entropy logits".into()));
    }
    if target >= logits.len() {
        return Err(Error::OutOfRange(format!(
            "target {} for {} classes",
            target,
            logits.len()
        )));
    }
    check_finite(logits, "cross_entropy logits")?;
    Ok(log_sum_exp(logits) - logits[target])
}

/// Softmax cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy_with_grad(logits: &[f64], target: usize) -> Result<(f64, Tensor1)> {
    let loss = cross_entropy(logits, target)?;
    let mut grad = softmax_unchecked(logits);
    grad[target] -= 1.0;
    Ok((loss, grad))
}

/// Sigmoid cross-entropy for a single logit; `target` must be 0 or 1.
pub fn binary_cross_entropy(logit: f64, target: u8) -> Result<f64> {
    if target > 1 {
        return Err(Error::OutOfRange(format!("binary target {}", target)));
    }
    if !logit.is_finite() {
        return Err(Error::NonFinite("binary_cross_entropy logit".into()));
    }
    Ok(if target == 1 {
        -log_sigmoid(logit)
    } else {
        -log_sigmoid(-logit)
    })
}

pub fn binary_cross_entropy_with_grad(logit: f64, target: u8) -> Result<(f64, f64)> {
    let loss = binary_cross_entropy(logit, target)?;
    Ok((loss, sigmoid(logit) - f64::from(target)))
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!(
            "cosine of lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Gradient of `cos(u, v)` with respect to `v`.
pub fn cosine_grad_wrt_second(u: &[f64], v: &[f64]) -> Result<(f64, Tensor1)> {
    let c = cosine(u, v)?;
    let nu = norm(u);
    let nv = norm(v);
    let g = u
        .iter()
        .zip(v)
        .map(|(ui, vi)| ui / (nu * nv) - c * vi / (nv * nv))
        .collect();
    Ok((c, g))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize, config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len()
        || params.len() != state.m.len()
        || state.m.len() != state.v.len()
    {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Skip coordinates where the one-sided slopes disagree, i.e. the loss
    /// has a kink within one step of the current point.
    pub skip_kinks: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            skip_kinks: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub skipped: usize,
}

/// Compares the analytic gradient returned by `f` at `params` with central
/// differences `(f(θ+h) - f(θ-h)) / 2h`, element by element. The relative
/// error uses `max(|a|, |n|, 1e-8)` as denominator.
pub fn grad_check<F>(mut f: F, params: &[f64], opts: GradCheckOptions) -> GradCheckReport
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (f0, analytic) = f(params);
    assert_eq!(analytic.len(), params.len(), "gradient length mismatch");
    let h = opts.step;
    let mut theta = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: 0,
        skipped: 0,
    };
    for i in 0..params.len() {
        let orig = theta[i];
        theta[i] = orig + h;
        let fp = f(&theta).0;
        theta[i] = orig - h;
        let fm = f(&theta).0;
        theta[i] = orig;
        if opts.skip_kinks {
            let right = (fp - f0) / h;
            let left = (f0 - fm) / h;
            let scale = right.abs().max(left.abs()).max(1.0);
            if (right - left).abs() > 1e-3 * scale {
                report.skipped += 1;
                continue;
            }
        }
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        let rel = (a - numeric).abs() / denom;
        report.checked += 1;
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
    }
    report
}

/// Named blocks laid out in one contiguous buffer, so optimizers and the
/// gradient checker can treat a whole model as a flat vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    blocks: Vec<BlockSpec>,
    data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub trainable: bool,
    pub decay: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockId(pub usize);

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            blocks: Vec::new(),
            data: Vec::new(),
        }
    }

    /// Adds a zero-initialised block. `decay` marks it for L2 regularisation.
    pub fn add(&mut self, name: &str, rows: usize, cols: usize, decay: bool) -> BlockId {
        let offset = self.data.len();
        self.data.resize(offset + rows * cols, 0.0);
        self.blocks.push(BlockSpec {
            name: name.to_string(),
            rows,
            cols,
            offset,
            trainable: true,
            decay,
        });
        BlockId(self.blocks.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn blocks(&self) -> &[BlockSpec] {
        &self.blocks
    }

    pub fn spec(&self, id: BlockId) -> &BlockSpec {
        &self.blocks[id.0]
    }

    pub fn find(&self, name: &str) -> Option<BlockId> {
        self.blocks.iter().position(|b| b.name == name).map(BlockId)
    }

    pub fn set_trainable(&mut self, id: BlockId, trainable: bool) {
        self.blocks[id.0].trainable = trainable;
    }

    pub fn mat(&self, id: BlockId) -> MatRef<'_> {
        let b = &self.blocks[id.0];
        MatRef::new(
            b.rows,
            b.cols,
            &self.data[b.offset..b.offset + b.rows * b.cols],
        )
    }

    pub fn slice(&self, id: BlockId) -> &[f64] {
        let b = &self.blocks[id.0];
        &self.data[b.offset..b.offset + b.rows * b.cols]
    }

    pub fn slice_mut(&mut self, id: BlockId) -> &mut [f64] {
        let b = &self.blocks[id.0];
        &mut self.data[b.offset..b.offset + b.rows * b.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn assign(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "assigning {} values to {} parameters",
                flat.len(),
                self.data.len()
            )));
        }
        self.data.copy_from_slice(flat);
        Ok(())
    }

    /// A zeroed buffer with this store's layout, for gradients.
    pub fn zeros_like(&self) -> ParamStore {
        ParamStore {
            blocks: self.blocks.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    /// Fills a block with `N(0, scale²)` draws.
    pub fn init_normal(&mut self, id: BlockId, scale: f64, rng: &mut crate::dataio::Prng) {
        for v in self.slice_mut(id) {
            *v = scale * rng.normal();
        }
    }

    /// Adds `l2 * θ` to the gradient of every decayed block and zeroes the
    /// gradient of frozen blocks. Returns the penalty `l2/2 ‖θ‖²`.
    pub fn apply_regularisation(&self, grads: &mut ParamStore, l2: f64) -> f64 {
        let mut penalty = 0.0;
        for b in &self.blocks {
            let range = b.offset..b.offset + b.rows * b.cols;
            if !b.trainable {
                grads.data[range].iter_mut().for_each(|g| *g = 0.0);
                continue;
            }
            if b.decay && l2 > 0.0 {
                for (g, &p) in grads.data[range.clone()].iter_mut().zip(&self.data[range]) {
                    *g += l2 * p;
                    penalty += 0.5 * l2 * p * p;
                }
            }
        }
        penalty
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn softmax_uniform() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for x in p {
            assert_abs_diff_eq!(x, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn softmax_known_values() {
        // direct exp/sum
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).collect();
        let s: f64 = e.iter().sum();
        let p = softmax(&[1.0, 2.0, 3.0]).unwrap();
        for (a, b) in p.iter().zip(&e) {
            assert_abs_diff_eq!(*a, b / s, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(p[0], 0.09003, epsilon = 5e-6);
        assert_abs_diff_eq!(p[1], 0.24473, epsilon = 5e-6);
        assert_abs_diff_eq!(p[2], 0.66524, epsilon = 5e-6);
    }

    #[test]
    fn softmax_empty_is_error() {
        assert!(matches!(softmax(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn sigmoid_cases() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_abs_diff_eq!(sigmoid(3f64.ln()), 0.75, epsilon = 1e-15);
        assert!(log_sigmoid(-1000.0).is_finite());
    }

    #[test]
    fn cross_entropy_cases() {
        assert_abs_diff_eq!(
            cross_entropy(&[0.5; 7], 3).unwrap(),
            7f64.ln(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            binary_cross_entropy(0.0, 1).unwrap(),
            2f64.ln(),
            epsilon = 1e-15
        );
        let p = softmax(&[1.0, 2.0, 3.0]).unwrap();
        let ce = cross_entropy(&[1.0, 2.0, 3.0], 2).unwrap();
        assert_abs_diff_eq!(ce, -p[2].ln(), epsilon = 1e-14);
        assert_abs_diff_eq!(ce, 0.40761, epsilon = 5e-6);
        assert!(cross_entropy(&[1.0, 2.0], 2).is_err());
        assert!(binary_cross_entropy(0.0, 2).is_err());
        assert!(binary_cross_entropy(800.0, 0).unwrap().is_finite());
    }

    #[test]
    fn cosine_cases() {
        assert_abs_diff_eq!(
            cosine(&[3.0, 4.0], &[3.0, 4.0]).unwrap(),
            1.0,
            epsilon = 1e-15
        );
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(
            cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap(),
            std::f64::consts::FRAC_1_SQRT_2,
            epsilon = 1e-15
        );
        assert!(matches!(
            cosine(&[0.0, 0.0], &[1.0, 1.0]),
            Err(Error::ZeroNorm)
        ));
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = vec![1.0, -2.0, 3.0];
        let mut st = AdamState::new(3, AdamConfig::default());
        adam_step(&mut p, &[0.0; 3], &mut st).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_unit_gradient() {
        let mut p = vec![0.0];
        let mut st = AdamState::new(
            1,
            AdamConfig {
                lr: 0.1,
                ..AdamConfig::default()
            },
        );
        adam_step(&mut p, &[1.0], &mut st).unwrap();
        // m̂ = v̂ = 1 after bias correction
        assert_abs_diff_eq!(p[0], -0.1 / (1.0 + 1e-8), epsilon = 1e-15);
    }

    #[test]
    fn adam_large_eps_damps_small_gradients() {
        let g = 1e-3;
        let cfg = AdamConfig {
            lr: 0.1,
            eps: 1.0,
            ..AdamConfig::default()
        };
        let mut p = vec![0.0];
        let mut st = AdamState::new(1, cfg);
        adam_step(&mut p, &[g], &mut st).unwrap();
        assert!(p[0].abs() < cfg.lr * g / cfg.eps);
        assert!(p[0].abs() > 0.0);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p = vec![0.0; 2];
        let mut st = AdamState::new(2, AdamConfig::default());
        assert!(adam_step(&mut p, &[0.0; 3], &mut st).is_err());
    }

    #[test]
    fn grad_check_quadratic() {
        let r = grad_check(
            |t| {
                (
                    t.iter().map(|x| x * x).sum(),
                    t.iter().map(|x| 2.0 * x).collect(),
                )
            },
            &[0.3, -1.2, 2.5, 0.0],
            GradCheckOptions::default(),
        );
        assert!(r.max_rel_error < 1e-8, "{:?}", r);
    }

    #[test]
    fn grad_check_detects_wrong_gradient() {
        let r = grad_check(
            |t| {
                (
                    t.iter().map(|x| x * x).sum(),
                    t.iter().map(|x| 3.0 * x).collect(),
                )
            },
            &[0.3, -1.2],
            GradCheckOptions::default(),
        );
        assert!(r.max_rel_error > 0.1);
    }

    #[test]
    fn grad_check_skips_kinks() {
        // |x| at x = 0 has a kink
        let r = grad_check(
            |t| (t[0].abs() + t[1] * t[1], vec![t[0].signum(), 2.0 * t[1]]),
            &[0.0, 0.7],
            GradCheckOptions {
                skip_kinks: true,
                ..Default::default()
            },
        );
        assert_eq!(r.skipped, 1);
        assert!(r.max_rel_error < 1e-8);
    }

    #[test]
    fn matmul_and_transpose() {
        let a = Tensor2::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let b = a.transpose();
        let c = b.matmul(&a).unwrap();
        assert_eq!(c.as_slice(), &[35.0, 44.0, 44.0, 56.0]);
        assert_eq!(a.view().matvec(&[1.0, 1.0]), vec![3.0, 7.0, 11.0]);
        assert_eq!(a.view().matvec_t(&[1.0, 0.0, 1.0]), vec![6.0, 8.0]);
        assert!(a.matmul(&a).is_err());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(v in prop::collection::vec(-1e3f64..1e3, 1..20)) {
            let p = softmax(&v).unwrap();
            let s: f64 = p.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|x| *x >= 0.0));
        }

        #[test]
        fn softmax_shift_invariant(v in prop::collection::vec(-50f64..50.0, 1..10), c in -100f64..100.0) {
            let p = softmax(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn cross_entropy_nonnegative(v in prop::collection::vec(-100f64..100.0, 1..10), t in 0usize..10) {
            let t = t % v.len();
            prop_assert!(cross_entropy(&v, t).unwrap() >= 0.0);
        }

        #[test]
        fn sigmoid_symmetry(x in -700f64..700.0) {
            prop_assert!((sigmoid(-x) - (1.0 - sigmoid(x))).abs() < 1e-15);
        }

        #[test]
        fn cosine_scale_invariant(
            u in prop::collection::vec(0.1f64..10.0, 3),
            v in prop::collection::vec(0.1f64..10.0, 3),
            a in 0.01f64..100.0,
            b in 0.01f64..100.0,
        ) {
            let su: Vec<f64> = u.iter().map(|x| a * x).collect();
            let sv: Vec<f64> = v.iter().map(|x| b * x).collect();
            let c1 = cosine(&u, &v).unwrap();
            prop_assert!((c1 - cosine(&su, &sv).unwrap()).abs() < 1e-12);
            prop_assert!((c1 - cosine(&v, &u).unwrap()).abs() < 1e-15);
        }

        #[test]
        fn adam_is_deterministic(
            p in prop::collection::vec(-5f64..5.0, 1..8),
            g in prop::collection::vec(-5f64..5.0, 8),
        ) {
            let g = &g[..p.len()];
            let run = || {
                let mut q = p.clone();
                let mut st = AdamState::new(q.len(), AdamConfig::default());
                for _ in 0..3 {
                    adam_step(&mut q, g, &mut st).unwrap();
                }
                q
            };
            let a = run();
            let b = run();
            prop_assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
