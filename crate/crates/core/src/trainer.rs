//! SFT, DPO and bilevel SPO training loops (plain gradient descent).

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{accuracy, validate_datasets, PreferenceTriple, SftPair};
use crate::error::{Error, Result};
use crate::objectives::{
    dpo_grad, dpo_loss, ensure_finite, grad_phi_total, grad_theta_total, l2, margin_means,
    penalized_objective, reg_term, sft_grad, sft_loss, LossBreakdown, Weights,
};
use crate::policy::{OutputSpace, SplitPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sft,
    Dpo,
    Spo,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sft" => Ok(Method::Sft),
            "dpo" => Ok(Method::Dpo),
            "spo" => Ok(Method::Spo),
            other => Err(Error::Config(format!(
                "unknown method '{other}' (expected sft, dpo or spo)"
            ))),
        }
    }
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Sft => "sft",
            Method::Dpo => "dpo",
            Method::Spo => "spo",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefCheckpoint {
    /// Reference is the policy before the SFT warm start.
    Init,
    /// Reference is the policy after the SFT warm start.
    PostSft,
}

/// Hyperparameters of a run. `K` and `T` keep their conventional capitals
/// in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpoConfig {
    pub beta: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub eta_theta: f64,
    pub eta_phi: f64,
    pub eta_phi_prime: f64,
    /// Inner SFT descent steps.
    #[serde(rename = "K")]
    pub k: usize,
    /// Outer iterations (minibatch steps).
    #[serde(rename = "T")]
    pub t: usize,
    /// Per-block global-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub batch_size: usize,
    pub seed: u64,
    pub ref_checkpoint: RefCheckpoint,
    /// Full-batch SFT epochs run before training starts.
    pub sft_epochs: usize,
    pub sft_eta: f64,
}

impl Default for SpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            lambda: 1.0,
            gamma: 0.1,
            eta_theta: 0.1,
            eta_phi: 0.1,
            eta_phi_prime: 0.1,
            k: 1,
            t: 200,
            clip_norm: Some(1.0),
            batch_size: 32,
            seed: 0,
            ref_checkpoint: RefCheckpoint::PostSft,
            sft_epochs: 0,
            sft_eta: 0.1,
        }
    }
}

impl SpoConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("beta", self.beta),
            ("eta_theta", self.eta_theta),
            ("eta_phi", self.eta_phi),
            ("eta_phi_prime", self.eta_phi_prime),
            ("sft_eta", self.sft_eta),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        for (name, v) in [("lambda", self.lambda), ("gamma", self.gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        if self.t == 0 {
            return Err(Error::Config("T must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn weights(&self) -> Weights {
        Weights {
            beta: self.beta,
            lambda: self.lambda,
            gamma: self.gamma,
        }
    }
}

/// Scales `g` onto the `max_norm` ball if it lies outside it.
pub fn clip_to_norm(g: &mut [f64], max_norm: Option<f64>) {
    if let Some(c) = max_norm {
        let n = l2(g);
        if n > c {
            let s = c / n;
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// K full-batch gradient steps on a copy of the backbone with the adapter
/// frozen. Returns the final backbone and the SFT loss there.
pub fn inner_sft_descent(
    policy: &SplitPolicy,
    sft_pairs: &[SftPair],
    eta_phi_prime: f64,
    k: usize,
) -> Result<(Vec<f64>, f64)> {
    let mut inner = policy.clone();
    for _ in 0..k {
        let g = sft_grad(&inner, sft_pairs)?;
        for (p, gi) in inner.params_mut().phi_mut().iter_mut().zip(&g) {
            *p -= eta_phi_prime * gi;
        }
    }
    let loss = sft_loss(&inner, sft_pairs)?;
    Ok((inner.params().phi().to_vec(), loss))
}

/// Norms of the two block gradients before clipping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepNorms {
    pub theta: f64,
    pub phi: f64,
}

fn apply(policy: &mut SplitPolicy, mut gt: Vec<f64>, mut gp: Vec<f64>, cfg: &SpoConfig) -> StepNorms {
    let norms = StepNorms {
        theta: l2(&gt),
        phi: l2(&gp),
    };
    clip_to_norm(&mut gt, cfg.clip_norm);
    clip_to_norm(&mut gp, cfg.clip_norm);
    let params = policy.params_mut();
    for (t, g) in params.theta_mut().iter_mut().zip(&gt) {
        *t -= cfg.eta_theta * g;
    }
    for (p, g) in params.phi_mut().iter_mut().zip(&gp) {
        *p -= cfg.eta_phi * g;
    }
    norms
}

/// One outer SPO iteration. Both blocks are updated simultaneously from the
/// pre-step parameters. The breakdown is evaluated before the update.
pub fn spo_step(
    policy: &mut SplitPolicy,
    reference: &SplitPolicy,
    triples: &[PreferenceTriple],
    sft_pairs: &[SftPair],
    cfg: &SpoConfig,
) -> Result<(LossBreakdown, StepNorms)> {
    let w = cfg.weights();
    let (phi_prime, _) = inner_sft_descent(policy, sft_pairs, cfg.eta_phi_prime, cfg.k)?;
    let breakdown = penalized_objective(policy, reference, &phi_prime, triples, sft_pairs, w)?;
    let gt = grad_theta_total(policy, reference, &phi_prime, triples, sft_pairs, w)?;
    let gp = grad_phi_total(policy, reference, triples, sft_pairs, w)?;
    Ok((breakdown, apply(policy, gt, gp, cfg)))
}

/// One DPO gradient step on both blocks. Returns the pre-step DPO loss.
pub fn dpo_step(
    policy: &mut SplitPolicy,
    reference: &SplitPolicy,
    triples: &[PreferenceTriple],
    cfg: &SpoConfig,
) -> Result<(f64, StepNorms)> {
    let loss = dpo_loss(policy, reference, triples, cfg.beta)?;
    let g = dpo_grad(policy, reference, triples, cfg.beta)?;
    ensure_finite(&g, 'a', "DPO margin")?;
    Ok((loss, apply(policy, g.clone(), g, cfg)))
}

/// One SFT gradient step on both blocks. Returns the pre-step SFT loss.
pub fn sft_step(
    policy: &mut SplitPolicy,
    sft_pairs: &[SftPair],
    cfg: &SpoConfig,
) -> Result<(f64, StepNorms)> {
    let loss = sft_loss(policy, sft_pairs)?;
    let g = sft_grad(policy, sft_pairs)?;
    ensure_finite(&g, 'd', "SFT descent")?;
    Ok((loss, apply(policy, g.clone(), g, cfg)))
}

/// Full-batch NLL descent on both blocks for `epochs` epochs, unclipped.
pub fn sft_train(
    policy: &SplitPolicy,
    sft_pairs: &[SftPair],
    eta: f64,
    epochs: usize,
) -> Result<SplitPolicy> {
    let mut out = policy.clone();
    for _ in 0..epochs {
        let g = sft_grad(&out, sft_pairs)?;
        let params = out.params_mut();
        for (t, gi) in params.theta_mut().iter_mut().zip(&g) {
            *t -= eta * gi;
        }
        for (p, gi) in params.phi_mut().iter_mut().zip(&g) {
            *p -= eta * gi;
        }
    }
    Ok(out)
}

/// One row of `train.csv`, evaluated before the step's update. Columns a
/// method does not define are `None`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainRow {
    pub step: usize,
    pub loss_dpo: Option<f64>,
    pub loss_sft: Option<f64>,
    pub loss_sft_star: Option<f64>,
    pub constraint_residual: Option<f64>,
    pub loss_reg: Option<f64>,
    pub loss_total: f64,
    pub z_mean: Option<f64>,
    pub sigma_z_mean: Option<f64>,
    pub accuracy: f64,
    pub grad_norm_theta: f64,
    pub grad_norm_phi: f64,
}

pub const TRAIN_COLUMNS: [&str; 12] = [
    "step",
    "loss_dpo",
    "loss_sft",
    "loss_sft_star",
    "constraint_residual",
    "loss_reg",
    "loss_total",
    "z_mean",
    "sigma_z_mean",
    "accuracy",
    "grad_norm_theta",
    "grad_norm_phi",
];

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub method: Method,
    pub rows: Vec<TrainRow>,
    /// Policy after the SFT warm start, where training began.
    pub initial_policy: SplitPolicy,
    pub reference: SplitPolicy,
    pub final_policy: SplitPolicy,
    pub final_accuracy: f64,
}

/// Datasets of a run and the space they index.
#[derive(Debug, Clone, Copy)]
pub struct Datasets<'a> {
    pub space: &'a OutputSpace,
    pub triples: &'a [PreferenceTriple],
    pub sft_pairs: &'a [SftPair],
}

/// Mean of `pi(y_w|x)` over the distinct preferred (x, y_w) in `triples`.
pub fn mean_preferred_prob(policy: &SplitPolicy, triples: &[PreferenceTriple]) -> Result<f64> {
    let uniq: BTreeSet<(usize, usize)> = triples.iter().map(|t| (t.x, t.y_w)).collect();
    if uniq.is_empty() {
        return Err(Error::Argument("no preferred outputs".into()));
    }
    let mut sum = 0.0;
    for (x, y) in &uniq {
        sum += policy.log_prob(*x, *y)?.exp();
    }
    Ok(sum / uniq.len() as f64)
}

/// Runs the configured SFT warm start and picks the reference checkpoint.
/// Returns `(warmed policy, reference)`.
pub fn warm_start(
    policy: &SplitPolicy,
    sft_pairs: &[SftPair],
    cfg: &SpoConfig,
) -> Result<(SplitPolicy, SplitPolicy)> {
    let warmed = sft_train(policy, sft_pairs, cfg.sft_eta, cfg.sft_epochs)?;
    let reference = match cfg.ref_checkpoint {
        RefCheckpoint::Init => policy.clone(),
        RefCheckpoint::PostSft => warmed.clone(),
    };
    Ok((warmed, reference))
}

/// Seeded epoch-wise minibatch schedule over `n` items.
struct Batcher {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    size: usize,
}

impl Batcher {
    fn new(n: usize, size: usize, seed: u64) -> Self {
        let mut b = Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            pos: 0,
            size: size.min(n).max(1),
        };
        b.order.shuffle(&mut b.rng);
        b
    }

    fn next(&mut self) -> &[usize] {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.size).min(self.order.len());
        let batch = &self.order[self.pos..end];
        self.pos = end;
        batch
    }
}

fn pick<T: Copy>(data: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| data[i]).collect()
}

/// Runs `cfg.t` outer steps of `method`. `observe(step, policy)` sees the
/// policy before every step and once more after the last one.
pub fn train_run(
    method: Method,
    policy: &SplitPolicy,
    data: Datasets<'_>,
    cfg: &SpoConfig,
    mut observe: impl FnMut(usize, &SplitPolicy),
) -> Result<TrainReport> {
    cfg.validate()?;
    if policy.prompts() != data.space.prompts() || policy.outputs() != data.space.outputs() {
        return Err(Error::Argument(format!(
            "policy space {}x{} does not match task space {}x{}",
            policy.prompts(),
            policy.outputs(),
            data.space.prompts(),
            data.space.outputs()
        )));
    }
    validate_datasets(data.space, data.triples, data.sft_pairs)?;
    let needs_triples = method != Method::Sft;
    let needs_sft = method != Method::Dpo || cfg.sft_epochs > 0;
    if needs_triples && data.triples.is_empty() {
        return Err(Error::Argument(format!(
            "{} needs preference triples",
            method.as_str()
        )));
    }
    if needs_sft && data.sft_pairs.is_empty() {
        return Err(Error::Argument(format!("{} needs SFT pairs", method.as_str())));
    }

    let (warmed, reference) = warm_start(policy, data.sft_pairs, cfg)?;
    let mut live = warmed.clone();
    let n_items = if method == Method::Sft {
        data.sft_pairs.len()
    } else {
        data.triples.len()
    };
    let mut batcher = Batcher::new(n_items, cfg.batch_size, cfg.seed);
    let mut rows = Vec::with_capacity(cfg.t);

    for step in 0..cfg.t {
        observe(step, &live);
        let acc = accuracy(&live, data.space)?;
        let idx = batcher.next().to_vec();
        let row = match method {
            Method::Spo => {
                let triples = pick(data.triples, &idx);
                let (b, n) = spo_step(&mut live, &reference, &triples, data.sft_pairs, cfg)?;
                TrainRow {
                    step,
                    loss_dpo: Some(b.dpo),
                    loss_sft: Some(b.sft),
                    loss_sft_star: Some(b.sft_star_estimate),
                    constraint_residual: Some(b.constraint_residual()),
                    loss_reg: Some(b.reg),
                    loss_total: b.total,
                    z_mean: Some(b.z),
                    sigma_z_mean: Some(b.sigma_z),
                    accuracy: acc,
                    grad_norm_theta: n.theta,
                    grad_norm_phi: n.phi,
                }
            }
            Method::Dpo => {
                let triples = pick(data.triples, &idx);
                let (z, s) = margin_means(&live, &reference, &triples, cfg.beta)?;
                let reg = reg_term(&live, &triples)?;
                let sft = (!data.sft_pairs.is_empty())
                    .then(|| sft_loss(&live, data.sft_pairs))
                    .transpose()?;
                let (loss, n) = dpo_step(&mut live, &reference, &triples, cfg)?;
                TrainRow {
                    step,
                    loss_dpo: Some(loss),
                    loss_sft: sft,
                    loss_sft_star: None,
                    constraint_residual: None,
                    loss_reg: Some(reg),
                    loss_total: loss,
                    z_mean: Some(z),
                    sigma_z_mean: Some(s),
                    accuracy: acc,
                    grad_norm_theta: n.theta,
                    grad_norm_phi: n.phi,
                }
            }
            Method::Sft => {
                let pairs = pick(data.sft_pairs, &idx);
                let dpo = if data.triples.is_empty() {
                    None
                } else {
                    let (z, s) = margin_means(&live, &reference, data.triples, cfg.beta)?;
                    Some((dpo_loss(&live, &reference, data.triples, cfg.beta)?, z, s))
                };
                let (loss, n) = sft_step(&mut live, &pairs, cfg)?;
                TrainRow {
                    step,
                    loss_dpo: dpo.map(|d| d.0),
                    loss_sft: Some(loss),
                    loss_sft_star: None,
                    constraint_residual: None,
                    loss_reg: None,
                    loss_total: loss,
                    z_mean: dpo.map(|d| d.1),
                    sigma_z_mean: dpo.map(|d| d.2),
                    accuracy: acc,
                    grad_norm_theta: n.theta,
                    grad_norm_phi: n.phi,
                }
            }
        };
        rows.push(row);
    }
    observe(cfg.t, &live);
    let final_accuracy = accuracy(&live, data.space)?;
    Ok(TrainReport {
        method,
        rows,
        initial_policy: warmed,
        reference,
        final_policy: live,
        final_accuracy,
    })
}
