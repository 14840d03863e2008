//! Exactly differentiable toy policies over an enumerable output space.
//!
//! A [`SplitPolicy`] carries two additive parameter blocks, a backbone `phi`
//! and an adapter `theta`. The model only ever sees their sum, the
//! *effective* parameters:
//!
//! * tabular: one logit per (prompt, output) cell, `L = phi + theta`;
//! * log-linear: a weight vector `w = phi + theta` scored against a fixed
//!   feature map, `L(x, y) = f(x, y) . w`.
//!
//! Log-probabilities always come from a max-shifted log-sum-exp.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Tabular,
    LogLinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamBlock {
    Theta,
    Phi,
    /// Concatenation `[theta; phi]`.
    All,
}

/// Finite output space with per-(prompt, output) correctness labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputSpace {
    prompts: usize,
    outputs: usize,
    labels: Vec<Vec<bool>>,
}

impl OutputSpace {
    pub fn new(labels: Vec<Vec<bool>>) -> Result<Self> {
        let prompts = labels.len();
        if prompts == 0 {
            return Err(Error::Argument("output space needs at least one prompt".into()));
        }
        let outputs = labels[0].len();
        if outputs < 3 {
            return Err(Error::Argument(format!(
                "output space needs at least 3 outputs, got {outputs}"
            )));
        }
        for (x, row) in labels.iter().enumerate() {
            if row.len() != outputs {
                return Err(Error::Argument(format!(
                    "prompt {x} has {} labels, expected {outputs}",
                    row.len()
                )));
            }
            if !row.iter().any(|&c| c) || row.iter().all(|&c| c) {
                return Err(Error::Argument(format!(
                    "prompt {x} must have at least one correct and one incorrect output"
                )));
            }
        }
        Ok(Self {
            prompts,
            outputs,
            labels,
        })
    }

    /// Builds a space from per-prompt lists of correct output indices.
    pub fn from_correct_sets(outputs: usize, correct: &[Vec<usize>]) -> Result<Self> {
        let mut labels = vec![vec![false; outputs]; correct.len()];
        for (x, set) in correct.iter().enumerate() {
            for &y in set {
                if y >= outputs {
                    return Err(Error::Range {
                        what: "output",
                        index: y,
                        limit: outputs,
                    });
                }
                labels[x][y] = true;
            }
        }
        Self::new(labels)
    }

    pub fn prompts(&self) -> usize {
        self.prompts
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn is_correct(&self, x: usize, y: usize) -> bool {
        self.labels[x][y]
    }

    pub fn labels(&self) -> &[Vec<bool>] {
        &self.labels
    }

    pub fn correct_set(&self, x: usize) -> Vec<usize> {
        (0..self.outputs).filter(|&y| self.labels[x][y]).collect()
    }
}

/// The two additive parameter blocks. Both blocks index the same
/// effective coordinates, so `theta.len() == phi.len()`; in the flat layout
/// coordinates `0..n` are theta and `n..2n` are phi.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    theta: Vec<f64>,
    phi: Vec<f64>,
}

impl ParamVector {
    pub fn new(theta: Vec<f64>, phi: Vec<f64>) -> Result<Self> {
        if theta.len() != phi.len() {
            return Err(Error::Argument(format!(
                "theta has {} coordinates but phi has {}",
                theta.len(),
                phi.len()
            )));
        }
        if theta.iter().chain(&phi).any(|v| !v.is_finite()) {
            return Err(Error::Argument("parameters must be finite".into()));
        }
        Ok(Self { theta, phi })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            theta: vec![0.0; n],
            phi: vec![0.0; n],
        }
    }

    /// All weight in the backbone, adapter at zero.
    pub fn from_backbone(phi: Vec<f64>) -> Self {
        let n = phi.len();
        Self {
            theta: vec![0.0; n],
            phi,
        }
    }

    pub fn block_len(&self) -> usize {
        self.theta.len()
    }

    pub fn len(&self) -> usize {
        2 * self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn phi(&self) -> &[f64] {
        &self.phi
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn phi_mut(&mut self) -> &mut [f64] {
        &mut self.phi
    }

    pub fn block(&self, block: ParamBlock) -> Vec<f64> {
        match block {
            ParamBlock::Theta => self.theta.clone(),
            ParamBlock::Phi => self.phi.clone(),
            ParamBlock::All => self.to_flat(),
        }
    }

    /// Which block flat coordinate `i` belongs to.
    pub fn block_of(&self, i: usize) -> Option<ParamBlock> {
        let n = self.theta.len();
        if i < n {
            Some(ParamBlock::Theta)
        } else if i < 2 * n {
            Some(ParamBlock::Phi)
        } else {
            None
        }
    }

    pub fn effective(&self) -> Vec<f64> {
        self.theta.iter().zip(&self.phi).map(|(t, p)| t + p).collect()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.theta.clone();
        v.extend_from_slice(&self.phi);
        v
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if !flat.len().is_multiple_of(2) {
            return Err(Error::Argument(
                "flat parameter vector must have even length".into(),
            ));
        }
        let n = flat.len() / 2;
        Self::new(flat[..n].to_vec(), flat[n..].to_vec())
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().chain(&self.phi).all(|v| v.is_finite())
    }
}

/// Fixed feature map `f(x, y)` of dimension `dim` for every (prompt, output).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    prompts: usize,
    outputs: usize,
    dim: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(prompts: usize, outputs: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Argument("feature dimension must be positive".into()));
        }
        if values.len() != prompts * outputs * dim {
            return Err(Error::Argument(format!(
                "feature map expects {} values, got {}",
                prompts * outputs * dim,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("features must be finite".into()));
        }
        Ok(Self {
            prompts,
            outputs,
            dim,
            values,
        })
    }

    /// One row per (prompt, output), prompt-major.
    pub fn from_rows(prompts: usize, outputs: usize, rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() != prompts * outputs {
            return Err(Error::Argument(format!(
                "feature map expects {} rows, got {}",
                prompts * outputs,
                rows.len()
            )));
        }
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Argument("feature rows must share one dimension".into()));
        }
        Self::new(prompts, outputs, dim, rows.concat())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn prompts(&self) -> usize {
        self.prompts
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn get(&self, x: usize, y: usize) -> &[f64] {
        let start = (x * self.outputs + y) * self.dim;
        &self.values[start..start + self.dim]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.dim).map(<[f64]>::to_vec).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitPolicy {
    kind: PolicyKind,
    prompts: usize,
    outputs: usize,
    params: ParamVector,
    features: Option<FeatureMap>,
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Max-shifted log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let lse = max + sum.ln();
    logits.iter().map(|l| l - lse).collect()
}

impl SplitPolicy {
    pub fn tabular(prompts: usize, outputs: usize, params: ParamVector) -> Result<Self> {
        if prompts == 0 || outputs < 2 {
            return Err(Error::Argument(format!(
                "tabular policy needs prompts >= 1 and outputs >= 2, got {prompts}x{outputs}"
            )));
        }
        if params.block_len() != prompts * outputs {
            return Err(Error::Argument(format!(
                "tabular policy needs {} parameters per block, got {}",
                prompts * outputs,
                params.block_len()
            )));
        }
        Ok(Self {
            kind: PolicyKind::Tabular,
            prompts,
            outputs,
            params,
            features: None,
        })
    }

    /// Tabular policy with the given logits held entirely in the backbone.
    pub fn tabular_from_logits(logits: &[Vec<f64>]) -> Result<Self> {
        let prompts = logits.len();
        let outputs = logits.first().map_or(0, Vec::len);
        if logits.iter().any(|r| r.len() != outputs) {
            return Err(Error::Argument("logit rows must have equal length".into()));
        }
        Self::tabular(prompts, outputs, ParamVector::from_backbone(logits.concat()))
    }

    pub fn log_linear(features: FeatureMap, params: ParamVector) -> Result<Self> {
        if features.outputs < 2 {
            return Err(Error::Argument(
                "log-linear policy needs at least 2 outputs".into(),
            ));
        }
        if params.block_len() != features.dim {
            return Err(Error::Argument(format!(
                "log-linear policy needs {} parameters per block, got {}",
                features.dim,
                params.block_len()
            )));
        }
        Ok(Self {
            kind: PolicyKind::LogLinear,
            prompts: features.prompts,
            outputs: features.outputs,
            params,
            features: Some(features),
        })
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }

    pub fn prompts(&self) -> usize {
        self.prompts
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParamVector) -> Result<()> {
        if params.block_len() != self.params.block_len() {
            return Err(Error::Argument(format!(
                "parameter block length {} does not match policy ({})",
                params.block_len(),
                self.params.block_len()
            )));
        }
        self.params = params;
        Ok(())
    }

    pub fn features(&self) -> Option<&FeatureMap> {
        self.features.as_ref()
    }

    /// Length of one parameter block (= number of effective parameters).
    pub fn block_len(&self) -> usize {
        self.params.block_len()
    }

    /// Same policy with the backbone replaced by `phi`.
    pub fn with_phi(&self, phi: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        out.params = ParamVector::new(self.params.theta.clone(), phi.to_vec())?;
        Ok(out)
    }

    /// Moves the effective parameters by `delta`, applied on the adapter block.
    pub fn shift_effective(&mut self, delta: &[f64]) {
        for (t, d) in self.params.theta.iter_mut().zip(delta) {
            *t += d;
        }
    }

    pub fn same_space(&self, other: &SplitPolicy) -> bool {
        self.kind == other.kind
            && self.prompts == other.prompts
            && self.outputs == other.outputs
            && self.block_len() == other.block_len()
    }

    pub(crate) fn check_prompt(&self, x: usize) -> Result<()> {
        if x >= self.prompts {
            return Err(Error::Range {
                what: "prompt",
                index: x,
                limit: self.prompts,
            });
        }
        Ok(())
    }

    pub(crate) fn check_output(&self, y: usize) -> Result<()> {
        if y >= self.outputs {
            return Err(Error::Range {
                what: "output",
                index: y,
                limit: self.outputs,
            });
        }
        Ok(())
    }

    pub fn logits(&self, x: usize) -> Result<Vec<f64>> {
        self.check_prompt(x)?;
        let theta = &self.params.theta;
        let phi = &self.params.phi;
        Ok(match &self.features {
            None => {
                let row = x * self.outputs;
                (row..row + self.outputs).map(|i| phi[i] + theta[i]).collect()
            }
            Some(f) => {
                let w = self.params.effective();
                (0..self.outputs).map(|y| dot(f.get(x, y), &w)).collect()
            }
        })
    }

    pub fn log_prob_vector(&self, x: usize) -> Result<Vec<f64>> {
        Ok(log_softmax(&self.logits(x)?))
    }

    pub fn prob_vector(&self, x: usize) -> Result<Vec<f64>> {
        Ok(self.log_prob_vector(x)?.into_iter().map(f64::exp).collect())
    }

    pub fn log_prob(&self, x: usize, y: usize) -> Result<f64> {
        self.check_output(y)?;
        Ok(self.log_prob_vector(x)?[y])
    }

    /// Gradient of `log pi(y|x)` with respect to the effective parameters.
    /// Identical to the gradient with respect to either block.
    pub fn effective_grad(&self, x: usize, y: usize) -> Result<Vec<f64>> {
        self.check_output(y)?;
        let p = self.prob_vector(x)?;
        Ok(self.effective_grad_with(x, y, &p))
    }

    pub(crate) fn effective_grad_with(&self, x: usize, y: usize, p: &[f64]) -> Vec<f64> {
        match &self.features {
            None => {
                let mut g = vec![0.0; self.block_len()];
                let row = x * self.outputs;
                for (k, pk) in p.iter().enumerate() {
                    g[row + k] = -pk;
                }
                g[row + y] += 1.0;
                g
            }
            Some(f) => {
                let mean = self.feature_mean(x, p);
                f.get(x, y).iter().zip(&mean).map(|(a, b)| a - b).collect()
            }
        }
    }

    fn feature_mean(&self, x: usize, p: &[f64]) -> Vec<f64> {
        let f = self.features.as_ref().expect("log-linear policy");
        let mut mean = vec![0.0; f.dim];
        for (y, py) in p.iter().enumerate() {
            for (m, v) in mean.iter_mut().zip(f.get(x, y)) {
                *m += py * v;
            }
        }
        mean
    }

    pub fn grad_log_prob(&self, x: usize, y: usize, wrt: ParamBlock) -> Result<Vec<f64>> {
        let g = self.effective_grad(x, y)?;
        Ok(match wrt {
            ParamBlock::Theta | ParamBlock::Phi => g,
            ParamBlock::All => {
                let mut all = g.clone();
                all.extend_from_slice(&g);
                all
            }
        })
    }

    /// `||grad_theta log pi(y|x)||^2`. The tabular case uses the closed form
    /// `1 - 2 p_y + ||p||^2`, so outputs with equal probability get bitwise
    /// equal norms.
    pub fn grad_norm_sq(&self, x: usize, y: usize) -> Result<f64> {
        self.check_output(y)?;
        let p = self.prob_vector(x)?;
        Ok(self.grad_norm_sq_with(x, y, &p))
    }

    pub(crate) fn grad_norm_sq_with(&self, x: usize, y: usize, p: &[f64]) -> f64 {
        match self.kind {
            PolicyKind::Tabular => {
                let sq: f64 = p.iter().map(|v| v * v).sum();
                (1.0 - 2.0 * p[y] + sq).max(0.0)
            }
            PolicyKind::LogLinear => {
                let g = self.effective_grad_with(x, y, p);
                dot(&g, &g)
            }
        }
    }

    /// Hessian of `log pi(y|x)` over one parameter block. It does not depend
    /// on `y`: `-diag(p) + p p^T` on the prompt's row (tabular) or
    /// `-Cov_pi[f]` (log-linear).
    pub fn second_derivative_log_prob(&self, x: usize, y: usize) -> Result<DMatrix<f64>> {
        self.check_output(y)?;
        let p = self.prob_vector(x)?;
        let n = self.block_len();
        let mut h = DMatrix::zeros(n, n);
        match &self.features {
            None => {
                let row = x * self.outputs;
                for i in 0..self.outputs {
                    for j in 0..self.outputs {
                        let diag = if i == j { p[i] } else { 0.0 };
                        h[(row + i, row + j)] = -diag + p[i] * p[j];
                    }
                }
            }
            Some(f) => {
                let mean = self.feature_mean(x, &p);
                for (yy, py) in p.iter().enumerate() {
                    let c: Vec<f64> = f.get(x, yy).iter().zip(&mean).map(|(a, b)| a - b).collect();
                    for i in 0..n {
                        for j in 0..n {
                            h[(i, j)] -= py * c[i] * c[j];
                        }
                    }
                }
            }
        }
        Ok(h)
    }

    /// `H v` for the (y-independent) Hessian of `log pi(.|x)`.
    pub(crate) fn hessian_vector_product(&self, x: usize, p: &[f64], v: &[f64]) -> Vec<f64> {
        match &self.features {
            None => {
                let row = x * self.outputs;
                let vr = &v[row..row + self.outputs];
                let pv = dot(p, vr);
                let mut out = vec![0.0; self.block_len()];
                for k in 0..self.outputs {
                    out[row + k] = -p[k] * vr[k] + p[k] * pv;
                }
                out
            }
            Some(f) => {
                let mean = self.feature_mean(x, p);
                let mut out = vec![0.0; f.dim];
                for (yy, py) in p.iter().enumerate() {
                    let c: Vec<f64> = f.get(x, yy).iter().zip(&mean).map(|(a, b)| a - b).collect();
                    let a = py * dot(&c, v);
                    for (o, ci) in out.iter_mut().zip(&c) {
                        *o -= a * ci;
                    }
                }
                out
            }
        }
    }

    /// Inverse-CDF draw from `pi(.|x)`.
    pub fn sample_with<R: Rng + ?Sized>(&self, x: usize, rng: &mut R) -> Result<usize> {
        let p = self.prob_vector(x)?;
        Ok(inverse_cdf(&p, rng.random::<f64>()))
    }

    pub fn sample(&self, x: usize, seed: u64) -> Result<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(x, &mut rng)
    }

    /// Highest-probability output outside `exclude`; ties go to the lowest index.
    pub fn argmax_output(&self, x: usize, exclude: &[usize]) -> Result<usize> {
        let p = self.prob_vector(x)?;
        argmax_excluding(&p, exclude)
            .ok_or_else(|| Error::Argument(format!("all {} outputs excluded from argmax", self.outputs)))
    }
}

pub(crate) fn inverse_cdf(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, pi) in p.iter().enumerate() {
        if *pi > 0.0 {
            last_positive = i;
        }
        acc += pi;
        if u < acc {
            return i;
        }
    }
    last_positive
}

pub(crate) fn argmax_excluding(p: &[f64], exclude: &[usize]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, pi) in p.iter().enumerate() {
        if exclude.contains(&i) {
            continue;
        }
        match best {
            Some(b) if p[b] >= *pi => {}
            _ => best = Some(i),
        }
    }
    best
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicySnapshot {
    kind: PolicyKind,
    prompts: usize,
    outputs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature_dim: Option<usize>,
    theta: Vec<f64>,
    phi: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<Vec<Vec<f64>>>,
}

impl SplitPolicy {
    pub fn to_json(&self) -> Result<String> {
        let snap = PolicySnapshot {
            kind: self.kind,
            prompts: self.prompts,
            outputs: self.outputs,
            feature_dim: self.features.as_ref().map(|f| f.dim),
            theta: self.params.theta.clone(),
            phi: self.params.phi.clone(),
            features: self.features.as_ref().map(FeatureMap::rows),
        };
        Ok(serde_json::to_string_pretty(&snap)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let snap: PolicySnapshot = serde_json::from_str(s)?;
        let params = ParamVector::new(snap.theta, snap.phi)?;
        match snap.kind {
            PolicyKind::Tabular => {
                if snap.features.is_some() {
                    return Err(Error::Argument("tabular snapshot must not carry features".into()));
                }
                Self::tabular(snap.prompts, snap.outputs, params)
            }
            PolicyKind::LogLinear => {
                let rows = snap
                    .features
                    .ok_or_else(|| Error::Argument("log-linear snapshot needs features".into()))?;
                let fm = FeatureMap::from_rows(snap.prompts, snap.outputs, &rows)?;
                if let Some(d) = snap.feature_dim {
                    if d != fm.dim {
                        return Err(Error::Argument(format!(
                            "feature_dim {d} does not match feature rows ({})",
                            fm.dim
                        )));
                    }
                }
                Self::log_linear(fm, params)
            }
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}
