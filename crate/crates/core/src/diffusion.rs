//! Noise schedule, forward noising, per-token loss and foreground masking.

use serde::{Deserialize, Serialize};

use crate::attention::{Matrix, TokenMatrix, TokenRole};
use crate::error::{Error, Result};
use crate::masks::LossMask;
use crate::rng::CounterRng;
use crate::scalar::Real;

pub const DEFAULT_ALPHA: f64 = 0.5;
pub const LINEAR_BETA_START: f64 = 1e-4;
pub const LINEAR_BETA_END: f64 = 2e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule<T> {
    betas: Vec<T>,
    alpha_bar: Vec<T>,
}

impl<T: Real> NoiseSchedule<T> {
    pub fn new(betas: Vec<T>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::validation("beta", "schedule needs at least one step"));
        }
        if let Some((i, b)) = betas.iter().enumerate().find(|(_, &b)| !(b > T::zero() && b < T::one())) {
            return Err(Error::validation(format!("beta[{i}]"), format!("{b} outside (0, 1)")));
        }
        let mut alpha_bar = Vec::with_capacity(betas.len());
        let mut acc = T::one();
        for &b in &betas {
            acc = acc * (T::one() - b);
            alpha_bar.push(acc);
        }
        Ok(Self { betas, alpha_bar })
    }

    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::validation("steps", "must be >= 1"));
        }
        let denom = (steps.max(2) - 1) as f64;
        Self::new((0..steps).map(|i| T::lit(start + (end - start) * i as f64 / denom)).collect())
    }

    pub fn default_linear(steps: usize) -> Result<Self> {
        Self::linear(steps, LINEAR_BETA_START, LINEAR_BETA_END)
    }

    pub fn constant(steps: usize, beta: f64) -> Result<Self> {
        Self::new(vec![T::lit(beta); steps])
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[T] {
        &self.betas
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::Timestep { t, steps: self.steps() });
        }
        Ok(t - 1)
    }

    /// `beta_t` for `1 <= t <= steps`.
    pub fn beta(&self, t: usize) -> Result<T> {
        Ok(self.betas[self.check(t)?])
    }

    /// `alpha_bar_t = prod_{i <= t} (1 - beta_i)` for `1 <= t <= steps`.
    pub fn alpha_bar(&self, t: usize) -> Result<T> {
        Ok(self.alpha_bar[self.check(t)?])
    }

    pub fn to_json(&self) -> String {
        let file = ScheduleFile {
            steps: self.steps(),
            beta: self.betas.iter().map(|b| format!("{b:?}")).collect(),
        };
        let mut s = serde_json::to_string(&file).expect("infallible");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ScheduleFile = serde_json::from_str(text).map_err(|e| Error::parse("schedule", e.to_string()))?;
        if file.beta.len() != file.steps {
            return Err(Error::parse("schedule.beta", format!("{} values for {} steps", file.beta.len(), file.steps)));
        }
        let betas = file
            .beta
            .iter()
            .enumerate()
            .map(|(i, s)| s.trim().parse::<T>().map_err(|_| Error::parse(format!("schedule.beta[{i}]"), s.clone())))
            .collect::<Result<Vec<T>>>()?;
        Self::new(betas)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleFile {
    steps: usize,
    beta: Vec<String>,
}

/// `z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps`, elementwise.
pub fn forward_noise<T: Real>(
    z0: &TokenMatrix<T>,
    t: usize,
    schedule: &NoiseSchedule<T>,
    eps: &TokenMatrix<T>,
) -> Result<TokenMatrix<T>> {
    if z0.rows() != eps.rows() || z0.cols() != eps.cols() {
        return Err(Error::Shape(format!(
            "noise is {}x{}, latent is {}x{}",
            eps.rows(),
            eps.cols(),
            z0.rows(),
            z0.cols()
        )));
    }
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (T::one() - ab).sqrt());
    let data = z0
        .values
        .data
        .iter()
        .zip(&eps.values.data)
        .map(|(&z, &e)| a * z + b * e)
        .collect();
    Ok(TokenMatrix::new(z0.role, Matrix::from_vec(z0.rows(), z0.cols(), data)?))
}

/// Per-token squared error, summed over channels.
#[derive(Debug, Clone, PartialEq)]
pub struct LossMap<T> {
    pub values: Vec<T>,
}

pub fn per_token_loss<T: Real>(eps_true: &TokenMatrix<T>, eps_pred: &TokenMatrix<T>) -> Result<LossMap<T>> {
    if eps_true.rows() != eps_pred.rows() || eps_true.cols() != eps_pred.cols() {
        return Err(Error::Shape(format!(
            "prediction is {}x{}, target is {}x{}",
            eps_pred.rows(),
            eps_pred.cols(),
            eps_true.rows(),
            eps_true.cols()
        )));
    }
    let values = (0..eps_true.rows())
        .map(|k| {
            eps_true
                .values
                .row(k)
                .iter()
                .zip(eps_pred.values.row(k))
                .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b))
        })
        .collect();
    Ok(LossMap { values })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    /// Mean over selected tokens.
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskedLoss<T> {
    pub value: T,
    /// No token was selected; `value` is zero.
    pub empty_foreground: bool,
}

fn reduce<T: Real>(values: &[T], weights: impl Iterator<Item = bool>, reduction: Reduction) -> MaskedLoss<T> {
    let mut sum = T::zero();
    let mut count = 0usize;
    for (&v, w) in values.iter().zip(weights) {
        if w {
            sum = sum + v;
            count += 1;
        }
    }
    let value = match reduction {
        Reduction::Sum => sum,
        Reduction::Mean if count == 0 => T::zero(),
        Reduction::Mean => sum / T::from_usize(count).unwrap(),
    };
    MaskedLoss {
        value,
        empty_foreground: count == 0,
    }
}

pub fn masked_loss<T: Real>(loss: &LossMap<T>, mask: &LossMask, reduction: Reduction) -> Result<MaskedLoss<T>> {
    if loss.values.len() != mask.len() {
        return Err(Error::Shape(format!("{} loss values, {} mask weights", loss.values.len(), mask.len())));
    }
    Ok(reduce(&loss.values, mask.weights.iter().map(|&w| w == 1), reduction))
}

/// The unmasked loss under the same reduction convention.
pub fn global_loss<T: Real>(loss: &LossMap<T>, reduction: Reduction) -> T {
    reduce(&loss.values, std::iter::repeat(true), reduction).value
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Branch {
    Masked,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynamicLoss<T> {
    pub value: T,
    pub branch: Branch,
    pub p: f64,
}

/// Draws `p ~ U[0, 1)` from `rng`; the masked loss is used iff `p < alpha`.
pub fn dynamic_loss<T: Real>(
    loss: &LossMap<T>,
    mask: &LossMask,
    alpha: f64,
    rng: &mut CounterRng,
    reduction: Reduction,
) -> Result<DynamicLoss<T>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::validation("alpha", format!("{alpha} outside [0, 1]")));
    }
    let p = rng.uniform();
    let (value, branch) = if p < alpha {
        (masked_loss(loss, mask, reduction)?.value, Branch::Masked)
    } else {
        if loss.values.len() != mask.len() {
            return Err(Error::Shape(format!("{} loss values, {} mask weights", loss.values.len(), mask.len())));
        }
        (global_loss(loss, reduction), Branch::Global)
    };
    Ok(DynamicLoss { value, branch, p })
}

/// Audit trail of dynamic-masking decisions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BranchLog {
    pub entries: Vec<(u64, f64, Branch)>,
}

impl BranchLog {
    pub fn record<T>(&mut self, step: u64, d: &DynamicLoss<T>) {
        self.entries.push((step, d.p, d.branch));
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,p,branch\n");
        for (step, p, b) in &self.entries {
            let b = match b {
                Branch::Masked => "masked",
                Branch::Global => "global",
            };
            s.push_str(&format!("{step},{p:?},{b}\n"));
        }
        s
    }
}

/// Per-token affine noise predictor `eps_hat_k = z_k W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ToyDenoiser<T> {
    pub fn seeded(d: usize, seed: u64) -> Self {
        let mut rng = CounterRng::new(seed);
        let scale = 1.0 / (d as f64).sqrt();
        Self {
            weight: Matrix::random_normal(d, d, scale, &mut rng),
            bias: (0..d).map(|_| T::lit(rng.normal() * 0.1)).collect(),
        }
    }

    pub fn predict(&self, z: &TokenMatrix<T>) -> Result<TokenMatrix<T>> {
        let mut out = z.values.matmul(&self.weight)?;
        for r in 0..out.rows {
            for (o, &b) in out.row_mut(r).iter_mut().zip(&self.bias) {
                *o = *o + b;
            }
        }
        Ok(TokenMatrix::new(TokenRole::Visual, out))
    }

    pub fn masked_objective(&self, z: &TokenMatrix<T>, eps: &TokenMatrix<T>, mask: &LossMask) -> Result<T> {
        let l = per_token_loss(eps, &self.predict(z)?)?;
        Ok(masked_loss(&l, mask, Reduction::Mean)?.value)
    }

    /// Analytic gradient of the mean-reduced masked loss: with residual
    /// `R = eps - eps_hat` restricted to selected rows, `dW = -2/|S| Z^T R`
    /// and `db = -2/|S| sum_k R_k`.
    pub fn masked_gradient(&self, z: &TokenMatrix<T>, eps: &TokenMatrix<T>, mask: &LossMask) -> Result<(Matrix<T>, Vec<T>)> {
        if mask.len() != z.rows() {
            return Err(Error::Shape(format!("{} mask weights for {} tokens", mask.len(), z.rows())));
        }
        let d = self.weight.cols;
        let selected = mask.selected();
        if selected == 0 {
            return Ok((Matrix::zeros(self.weight.rows, d), vec![T::zero(); d]));
        }
        let pred = self.predict(z)?;
        let mut resid = Matrix::zeros(z.rows(), d);
        for k in (0..z.rows()).filter(|&k| mask.weights[k] == 1) {
            for c in 0..d {
                resid.set(k, c, eps.values.get(k, c) - pred.values.get(k, c));
            }
        }
        let scale = T::lit(-2.0) / T::from_usize(selected).unwrap();
        let mut zt = Matrix::zeros(z.cols(), z.rows());
        for r in 0..z.rows() {
            for c in 0..z.cols() {
                zt.set(c, r, z.values.get(r, c));
            }
        }
        let mut gw = zt.matmul(&resid)?;
        for v in &mut gw.data {
            *v = *v * scale;
        }
        let gb = (0..d)
            .map(|c| (0..z.rows()).fold(T::zero(), |a, k| a + resid.get(k, c)) * scale)
            .collect();
        Ok((gw, gb))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientReport {
    pub selected: usize,
    pub tokens: usize,
    /// Max |masked gradient - background-zeroed per-token assembly|.
    pub max_abs_diff: f64,
    /// Max relative error of the analytic gradient against central differences.
    pub max_fd_rel_err: f64,
    pub passed: bool,
}

pub const GRADIENT_TOL: f64 = 1e-10;
pub const FD_REL_TOL: f64 = 1e-5;

/// Checks that the masked-loss gradient is exactly the gradient of the
/// global per-token objective with background contributions removed.
///
/// The reference assembles `-2 z_k^T r_k` and `-2 r_k` token by token,
/// zeroes background tokens, and divides by the number of selected tokens.
pub fn gradient_restriction_check<T: Real>(
    toy: &ToyDenoiser<T>,
    z: &TokenMatrix<T>,
    eps: &TokenMatrix<T>,
    mask: &LossMask,
) -> Result<GradientReport> {
    let (gw, gb) = toy.masked_gradient(z, eps, mask)?;
    let d = toy.weight.cols;
    let m = z.rows();
    let pred = toy.predict(z)?;
    let mut ref_w = vec![0.0f64; toy.weight.rows * d];
    let mut ref_b = vec![0.0f64; d];
    for k in 0..m {
        let w = f64::from(mask.weights[k]);
        for c in 0..d {
            let r = (eps.values.get(k, c) - pred.values.get(k, c)).to_f64().unwrap();
            ref_b[c] += w * -2.0 * r;
            for i in 0..toy.weight.rows {
                ref_w[i * d + c] += w * -2.0 * z.values.get(k, i).to_f64().unwrap() * r;
            }
        }
    }
    let sel = mask.selected();
    let norm = if sel == 0 { 0.0 } else { 1.0 / sel as f64 };
    let mut max_abs_diff = 0.0f64;
    for (a, b) in gw.data.iter().zip(&ref_w) {
        max_abs_diff = max_abs_diff.max((a.to_f64().unwrap() - b * norm).abs());
    }
    for (a, b) in gb.iter().zip(&ref_b) {
        max_abs_diff = max_abs_diff.max((a.to_f64().unwrap() - b * norm).abs());
    }

    // Central differences on a handful of weight entries and biases.
    let h = 1e-5;
    let mut max_fd_rel_err = 0.0f64;
    let probes: Vec<(usize, usize)> = (0..toy.weight.rows.min(3)).flat_map(|i| (0..d.min(3)).map(move |c| (i, c))).collect();
    for &(i, c) in &probes {
        let mut plus = toy.clone();
        let mut minus = toy.clone();
        plus.weight.set(i, c, plus.weight.get(i, c) + T::lit(h));
        minus.weight.set(i, c, minus.weight.get(i, c) - T::lit(h));
        let fd = (plus.masked_objective(z, eps, mask)? - minus.masked_objective(z, eps, mask)?).to_f64().unwrap() / (2.0 * h);
        let an = gw.get(i, c).to_f64().unwrap();
        max_fd_rel_err = max_fd_rel_err.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-3));
    }
    for c in 0..d.min(3) {
        let mut plus = toy.clone();
        let mut minus = toy.clone();
        plus.bias[c] = plus.bias[c] + T::lit(h);
        minus.bias[c] = minus.bias[c] - T::lit(h);
        let fd = (plus.masked_objective(z, eps, mask)? - minus.masked_objective(z, eps, mask)?).to_f64().unwrap() / (2.0 * h);
        let an = gb[c].to_f64().unwrap();
        max_fd_rel_err = max_fd_rel_err.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-3));
    }
    Ok(GradientReport {
        selected: sel,
        tokens: m,
        max_abs_diff,
        max_fd_rel_err,
        passed: max_abs_diff <= GRADIENT_TOL && max_fd_rel_err <= FD_REL_TOL,
    })
}
