//! Losses and their analytic gradients.
//!
//! All gradients here are taken with respect to one parameter block. Under
//! the additive split the theta- and phi-gradients of any function of the
//! effective parameters coincide, so most functions return one block-sized
//! vector that serves for either block.

use crate::data::{PreferenceTriple, SftPair};
use crate::error::{Error, Result};
use crate::policy::{dot, ParamBlock, SplitPolicy};

/// Margins are clamped to this magnitude before any sigmoid evaluation.
pub const Z_CLAMP: f64 = 50.0;

/// Below this gradient norm an active hinge is treated as degenerate.
const DEGENERATE_NORM: f64 = 1e-12;

pub fn sigmoid(z: f64) -> f64 {
    let z = z.clamp(-Z_CLAMP, Z_CLAMP);
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-log sigmoid(z) = softplus(-z)`, evaluated without overflow.
pub fn neg_log_sigmoid(z: f64) -> f64 {
    let z = z.clamp(-Z_CLAMP, Z_CLAMP);
    if z >= 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

/// Loss weights shared by the objective and its gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Weights {
    pub beta: f64,
    pub lambda: f64,
    pub gamma: f64,
}

impl Weights {
    pub fn dpo(beta: f64) -> Self {
        Self {
            beta,
            lambda: 0.0,
            gamma: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub dpo: f64,
    pub sft: f64,
    pub sft_star_estimate: f64,
    pub reg: f64,
    pub total: f64,
    /// Batch mean of the margins.
    pub z: f64,
    /// Batch mean of `sigmoid(z_i)`.
    pub sigma_z: f64,
}

impl LossBreakdown {
    pub fn constraint_residual(&self) -> f64 {
        self.sft - self.sft_star_estimate
    }
}

fn check_space(policy: &SplitPolicy, reference: &SplitPolicy) -> Result<()> {
    if !policy.same_space(reference) {
        return Err(Error::Argument(
            "policy and reference policy live on different spaces".into(),
        ));
    }
    Ok(())
}

fn nonempty<T>(batch: &[T], what: &str) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Argument(format!("empty {what} batch")));
    }
    Ok(())
}

pub fn margin_z(
    policy: &SplitPolicy,
    reference: &SplitPolicy,
    t: &PreferenceTriple,
    beta: f64,
) -> Result<f64> {
    check_space(policy, reference)?;
    let lp = policy.log_prob_vector(t.x)?;
    let lr = reference.log_prob_vector(t.x)?;
    policy.check_output(t.y_w)?;
    policy.check_output(t.y_l)?;
    Ok(beta * ((lp[t.y_w] - lr[t.y_w]) - (lp[t.y_l] - lr[t.y_l])))
}

pub fn dpo_loss(
    policy: &SplitPolicy,
    reference: &SplitPolicy,
    triples: &[PreferenceTriple],
    beta: f64,
) -> Result<f64> {
    nonempty(triples, "preference")?;
    let mut sum = 0.0;
    for t in triples {
        sum += neg_log_sigmoid(margin_z(policy, reference, t, beta)?);
    }
    Ok(sum / triples.len() as f64)
}

/// Block gradient of the DPO loss: mean of `-beta (1 - sigma(z)) (g_w - g_l)`.
pub fn dpo_grad(
    policy: &SplitPolicy,
    reference: &SplitPolicy,
    triples: &[PreferenceTriple],
    beta: f64,
) -> Result<Vec<f64>> {
    nonempty(triples, "preference")?;
    let mut grad = vec![0.0; policy.block_len()];
    for t in triples {
        let z = margin_z(policy, reference, t, beta)?;
        let coef = beta * (1.0 - sigmoid(z));
        let p = policy.prob_vector(t.x)?;
        let gw = policy.effective_grad_with(t.x, t.y_w, &p);
        let gl = policy.effective_grad_with(t.x, t.y_l, &p);
        for ((g, a), b) in grad.iter_mut().zip(&gw).zip(&gl) {
            *g -= coef * (a - b);
        }
    }
    scale(&mut grad, 1.0 / triples.len() as f64);
    Ok(grad)
}

pub fn sft_loss(policy: &SplitPolicy, pairs: &[SftPair]) -> Result<f64> {
    nonempty(pairs, "SFT")?;
    let mut sum = 0.0;
    for s in pairs {
        sum -= policy.log_prob(s.x, s.y_w)?;
    }
    Ok(sum / pairs.len() as f64)
}

/// Block gradient of the SFT negative log-likelihood.
pub fn sft_grad(policy: &SplitPolicy, pairs: &[SftPair]) -> Result<Vec<f64>> {
    nonempty(pairs, "SFT")?;
    let mut grad = vec![0.0; policy.block_len()];
    for s in pairs {
        let g = policy.effective_grad(s.x, s.y_w)?;
        for (acc, v) in grad.iter_mut().zip(&g) {
            *acc -= v;
        }
    }
    scale(&mut grad, 1.0 / pairs.len() as f64);
    Ok(grad)
}

/// `(||g_w||, ||g_l||, p)` for one triple.
fn hinge_norms(policy: &SplitPolicy, t: &PreferenceTriple) -> Result<(f64, f64, Vec<f64>)> {
    policy.check_output(t.y_w)?;
    policy.check_output(t.y_l)?;
    let p = policy.prob_vector(t.x)?;
    let nw = policy.grad_norm_sq_with(t.x, t.y_w, &p).sqrt();
    let nl = policy.grad_norm_sq_with(t.x, t.y_l, &p).sqrt();
    Ok((nw, nl, p))
}

/// Mean of `max(0, ||g_l|| - ||g_w||)`. An empty batch contributes zero.
pub fn reg_term(policy: &SplitPolicy, triples: &[PreferenceTriple]) -> Result<f64> {
    if triples.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for t in triples {
        let (nw, nl, _) = hinge_norms(policy, t)?;
        sum += (nl - nw).max(0.0);
    }
    Ok(sum / triples.len() as f64)
}

/// (Sub)gradient of the per-triple hinge. Zero unless `||g_l|| > ||g_w||`.
pub fn reg_gradient(policy: &SplitPolicy, t: &PreferenceTriple, wrt: ParamBlock) -> Result<Vec<f64>> {
    let g = reg_gradient_block(policy, t)?;
    Ok(match wrt {
        ParamBlock::Theta | ParamBlock::Phi => g,
        ParamBlock::All => [g.as_slice(), g.as_slice()].concat(),
    })
}

fn reg_gradient_block(policy: &SplitPolicy, t: &PreferenceTriple) -> Result<Vec<f64>> {
    let (nw, nl, p) = hinge_norms(policy, t)?;
    if nl - nw <= 0.0 {
        return Ok(vec![0.0; policy.block_len()]);
    }
    if nw < DEGENERATE_NORM || nl < DEGENERATE_NORM {
        return Err(Error::DegenerateGradient(format!(
            "gradient norm below {DEGENERATE_NORM:e} with active hinge at prompt {} \
             (||g_w|| = {nw:e}, ||g_l|| = {nl:e}); the policy is near-deterministic",
            t.x
        )));
    }
    let gw = policy.effective_grad_with(t.x, t.y_w, &p);
    let gl = policy.effective_grad_with(t.x, t.y_l, &p);
    let hw = policy.hessian_vector_product(t.x, &p, &gw);
    let hl = policy.hessian_vector_product(t.x, &p, &gl);
    Ok(hl.iter().zip(&hw).map(|(a, b)| a / nl - b / nw).collect())
}

/// Mean per-triple hinge (sub)gradient over a batch.
pub fn reg_gradient_batch(policy: &SplitPolicy, triples: &[PreferenceTriple]) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; policy.block_len()];
    if triples.is_empty() {
        return Ok(grad);
    }
    for t in triples {
        for (acc, v) in grad.iter_mut().zip(reg_gradient_block(policy, t)?) {
            *acc += v;
        }
    }
    scale(&mut grad, 1.0 / triples.len() as f64);
    Ok(grad)
}

/// Penalized single-level objective
/// `L_dpo + lambda (L_sft(theta, phi) - L_sft(theta, phi')) + gamma L_reg`,
/// with `phi'` (the inner solution) held fixed.
pub fn penalized_objective(
    policy: &SplitPolicy,
    reference: &SplitPolicy,
    inner_phi: &[f64],
    triples: &[PreferenceTriple],
    sft_pairs: &[SftPair],
    w: Weights,
) -> Result<LossBreakdown> {
    check_inner(policy, inner_phi)?;
    let dpo = dpo_loss(policy, reference, triples, w.beta)?;
    let sft = sft_loss(policy, sft_pairs)?;
    let sft_star_estimate = sft_loss(&policy.with_phi(inner_phi)?, sft_pairs)?;
    let reg = reg_term(policy, triples)?;
    let (z, sigma_z) = margin_means(policy, reference, triples, w.beta)?;
    Ok(LossBreakdown {
        dpo,
        sft,
        sft_star_estimate,
        reg,
        total: dpo + w.lambda * (sft - sft_star_estimate) + w.gamma * reg,
        z,
        sigma_z,
    })
}

/// Batch means of `z_i` and `sigmoid(z_i)`.
pub fn margin_means(
    policy: &SplitPolicy,
    reference: &SplitPolicy,
    triples: &[PreferenceTriple],
    beta: f64,
) -> Result<(f64, f64)> {
    nonempty(triples, "preference")?;
    let (mut zs, mut ss) = (0.0, 0.0);
    for t in triples {
        let z = margin_z(policy, reference, t, beta)?;
        zs += z;
        ss += sigmoid(z);
    }
    let n = triples.len() as f64;
    Ok((zs / n, ss / n))
}

fn check_inner(policy: &SplitPolicy, inner_phi: &[f64]) -> Result<()> {
    if inner_phi.len() != policy.block_len() {
        return Err(Error::Argument(format!(
            "inner solution has {} coordinates, policy block has {}",
            inner_phi.len(),
            policy.block_len()
        )));
    }
    Ok(())
}

pub(crate) fn ensure_finite(v: &[f64], term: char, name: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteGradient { term, name })
    }
}

/// Adapter gradient:
/// (a) DPO margin term, (b) value-function penalty
/// `lambda (grad L_sft(theta, phi) - grad L_sft(theta, phi'))`,
/// (e) `gamma grad L_reg`.
///
/// The lambda and gamma terms are skipped entirely when their weight is
/// zero, so the result is then bitwise equal to [`dpo_grad`].
pub fn grad_theta_total(
    policy: &SplitPolicy,
    reference: &SplitPolicy,
    inner_phi: &[f64],
    triples: &[PreferenceTriple],
    sft_pairs: &[SftPair],
    w: Weights,
) -> Result<Vec<f64>> {
    check_inner(policy, inner_phi)?;
    let mut g = dpo_grad(policy, reference, triples, w.beta)?;
    ensure_finite(&g, 'a', "DPO margin")?;
    if w.lambda != 0.0 {
        let live = sft_grad(policy, sft_pairs)?;
        let star = sft_grad(&policy.with_phi(inner_phi)?, sft_pairs)?;
        let b: Vec<f64> = live.iter().zip(&star).map(|(a, s)| w.lambda * (a - s)).collect();
        ensure_finite(&b, 'b', "SFT value-function penalty")?;
        add_assign(&mut g, &b);
    }
    if w.gamma != 0.0 {
        add_reg(&mut g, policy, triples, w.gamma)?;
    }
    Ok(g)
}

/// Backbone gradient:
/// (c) DPO margin term, (d) `lambda grad L_sft(theta, phi)`,
/// (e) `gamma grad L_reg`. Zero weights skip their term.
pub fn grad_phi_total(
    policy: &SplitPolicy,
    reference: &SplitPolicy,
    triples: &[PreferenceTriple],
    sft_pairs: &[SftPair],
    w: Weights,
) -> Result<Vec<f64>> {
    let mut g = dpo_grad(policy, reference, triples, w.beta)?;
    ensure_finite(&g, 'c', "DPO margin")?;
    if w.lambda != 0.0 {
        let mut d = sft_grad(policy, sft_pairs)?;
        scale(&mut d, w.lambda);
        ensure_finite(&d, 'd', "SFT descent")?;
        add_assign(&mut g, &d);
    }
    if w.gamma != 0.0 {
        add_reg(&mut g, policy, triples, w.gamma)?;
    }
    Ok(g)
}

fn add_reg(g: &mut [f64], policy: &SplitPolicy, triples: &[PreferenceTriple], gamma: f64) -> Result<()> {
    let mut e = reg_gradient_batch(policy, triples)?;
    scale(&mut e, gamma);
    ensure_finite(&e, 'e', "gradient-norm regularizer")?;
    add_assign(g, &e);
    Ok(())
}

fn scale(v: &mut [f64], s: f64) {
    v.iter_mut().for_each(|x| *x *= s);
}

fn add_assign(a: &mut [f64], b: &[f64]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
}

/// `||v||_2`.
pub fn l2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}
