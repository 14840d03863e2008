//! One-step probability dynamics of DPO: closed-form first-order
//! predictions, the bounds derived from them, and exact measurements.
//!
//! Gradients here are taken with respect to the effective parameters
//! (`theta + phi`), and [`measure_deltas`] applies its single gradient step
//! in those coordinates, so the predictions are the exact first-order terms
//! of the measured changes.

use serde::Serialize;

use crate::data::PreferenceTriple;
use crate::error::Result;
use crate::objectives::{margin_z, sigmoid};
use crate::policy::{dot, SplitPolicy};

/// Everything the closed forms need about one (policy, triple) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Geometry {
    pub z: f64,
    pub sigma_z: f64,
    pub pi_w: f64,
    pub pi_l: f64,
    pub norm_gw_sq: f64,
    pub norm_gl_sq: f64,
    pub dot_wl: f64,
}

impl Geometry {
    pub fn new(
        policy: &SplitPolicy,
        reference: &SplitPolicy,
        t: &PreferenceTriple,
        beta: f64,
    ) -> Result<Self> {
        let z = margin_z(policy, reference, t, beta)?;
        let p = policy.prob_vector(t.x)?;
        let gw = policy.effective_grad_with(t.x, t.y_w, &p);
        let gl = policy.effective_grad_with(t.x, t.y_l, &p);
        Ok(Self {
            z,
            sigma_z: sigmoid(z),
            pi_w: p[t.y_w],
            pi_l: p[t.y_l],
            norm_gw_sq: dot(&gw, &gw),
            norm_gl_sq: dot(&gl, &gl),
            dot_wl: dot(&gw, &gl),
        })
    }

    /// `||g_w||^2 - g_w . g_l`.
    pub fn term_w(&self) -> f64 {
        self.norm_gw_sq - self.dot_wl
    }

    /// `g_w . g_l - ||g_l||^2`.
    pub fn term_l(&self) -> f64 {
        self.dot_wl - self.norm_gl_sq
    }

    /// Common step factor `eta beta (1 - sigma(z))`.
    pub fn kappa(&self, eta: f64, beta: f64) -> f64 {
        eta * beta * (1.0 - self.sigma_z)
    }
}

/// First-order changes `(delta_w, delta_l)` of one DPO step.
pub fn predict_from(g: &Geometry, eta: f64, beta: f64) -> (f64, f64) {
    let k = g.kappa(eta, beta);
    (k * g.pi_w * g.term_w(), k * g.pi_l * g.term_l())
}

pub fn predict_deltas(
    policy: &SplitPolicy,
    reference: &SplitPolicy,
    t: &PreferenceTriple,
    eta: f64,
    beta: f64,
) -> Result<(f64, f64)> {
    Ok(predict_from(
        &Geometry::new(policy, reference, t, beta)?,
        eta,
        beta,
    ))
}

/// The effective-parameter step `eta beta (1 - sigma(z)) (g_w - g_l)` of a
/// batch-1 DPO update.
pub fn dpo_step_direction(
    policy: &SplitPolicy,
    reference: &SplitPolicy,
    t: &PreferenceTriple,
    eta: f64,
    beta: f64,
) -> Result<Vec<f64>> {
    let z = margin_z(policy, reference, t, beta)?;
    let k = eta * beta * (1.0 - sigmoid(z));
    let p = policy.prob_vector(t.x)?;
    let gw = policy.effective_grad_with(t.x, t.y_w, &p);
    let gl = policy.effective_grad_with(t.x, t.y_l, &p);
    Ok(gw.iter().zip(&gl).map(|(a, b)| k * (a - b)).collect())
}

/// `pi_after(.|x) - pi_before(.|x)` for one unclipped DPO step on `t`.
/// The input policy is left untouched.
pub fn measure_deltas(
    policy: &SplitPolicy,
    reference: &SplitPolicy,
    t: &PreferenceTriple,
    eta: f64,
    beta: f64,
) -> Result<Vec<f64>> {
    let before = policy.prob_vector(t.x)?;
    let mut after = policy.clone();
    after.shift_effective(&dpo_step_direction(policy, reference, t, eta, beta)?);
    let after = after.prob_vector(t.x)?;
    Ok(after.iter().zip(&before).map(|(a, b)| a - b).collect())
}

/// `(c1_lower_w, c1_upper_l)`: Cauchy-Schwarz bounds on the predictions.
pub fn corollary1_bounds(g: &Geometry, eta: f64, beta: f64) -> (f64, f64) {
    let k = g.kappa(eta, beta);
    let (nw, nl) = (g.norm_gw_sq.sqrt(), g.norm_gl_sq.sqrt());
    (k * g.pi_w * nw * (nw - nl), k * g.pi_l * nl * (nw - nl))
}

/// `eta beta (1 - sigma(z)) ||sqrt(pi_w) g_w - sqrt(pi_l) g_l||^2`.
///
/// The claimed inequality `delta_w - delta_l >= bound` does not hold in
/// general: the gap equals `-kappa (sqrt(pi_w) - sqrt(pi_l))^2 (g_w . g_l)`,
/// which is negative whenever the gradients are positively aligned and the
/// two probabilities differ. See [`corollary2_gap`].
pub fn corollary2_lower_bound(g: &Geometry, eta: f64, beta: f64) -> f64 {
    let sq = g.pi_w * g.norm_gw_sq - 2.0 * (g.pi_w * g.pi_l).sqrt() * g.dot_wl + g.pi_l * g.norm_gl_sq;
    g.kappa(eta, beta) * sq.max(0.0)
}

/// Closed form of `(delta_w - delta_l) - bound`.
pub fn corollary2_gap(g: &Geometry, eta: f64, beta: f64) -> f64 {
    let s = g.pi_w.sqrt() - g.pi_l.sqrt();
    -g.kappa(eta, beta) * s * s * g.dot_wl
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseLabel {
    /// `||g_w||^2 < g_w . g_l`: the preferred probability falls.
    Case1,
    /// `g_w . g_l < ||g_l||^2` (and not case 1).
    Case2,
    Healthy,
}

impl CaseLabel {
    pub fn classify(g: &Geometry) -> Self {
        if g.term_w() < 0.0 {
            CaseLabel::Case1
        } else if g.term_l() < 0.0 {
            CaseLabel::Case2
        } else {
            CaseLabel::Healthy
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CaseLabel::Case1 => "case1",
            CaseLabel::Case2 => "case2",
            CaseLabel::Healthy => "healthy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepDynamicsReport {
    pub step: usize,
    pub z: f64,
    pub sigma_z: f64,
    pub pi_w: f64,
    pub pi_l: f64,
    pub log_pi_w: f64,
    pub log_pi_l: f64,
    pub norm_gw_sq: f64,
    pub norm_gl_sq: f64,
    pub dot_wl: f64,
    pub term_w: f64,
    pub term_l: f64,
    pub delta_w_pred: f64,
    pub delta_l_pred: f64,
    pub delta_w_meas: f64,
    pub delta_l_meas: f64,
    pub delta_all_meas: Vec<f64>,
    pub c1_lower_w: f64,
    pub c1_upper_l: f64,
    pub c2_lower: f64,
    pub ystar: usize,
    pub pi_ystar: f64,
    pub delta_ystar_meas: f64,
    pub case_label: CaseLabel,
}

impl StepDynamicsReport {
    /// `ln(delta_w_meas) - ln(delta_l_meas)` when both are positive.
    pub fn log_delta_ratio(&self) -> Option<f64> {
        (self.delta_w_meas > 0.0 && self.delta_l_meas > 0.0)
            .then(|| self.delta_w_meas.ln() - self.delta_l_meas.ln())
    }
}

/// Full one-step report, with y* the most likely output outside `exclude`.
pub fn mass_shift_audit(
    policy: &SplitPolicy,
    reference: &SplitPolicy,
    t: &PreferenceTriple,
    eta: f64,
    beta: f64,
    exclude: &[usize],
) -> Result<StepDynamicsReport> {
    let g = Geometry::new(policy, reference, t, beta)?;
    let (delta_w_pred, delta_l_pred) = predict_from(&g, eta, beta);
    let (c1_lower_w, c1_upper_l) = corollary1_bounds(&g, eta, beta);
    let meas = measure_deltas(policy, reference, t, eta, beta)?;
    let lp = policy.log_prob_vector(t.x)?;
    let ystar = policy.argmax_output(t.x, exclude)?;
    Ok(StepDynamicsReport {
        step: 0,
        z: g.z,
        sigma_z: g.sigma_z,
        pi_w: g.pi_w,
        pi_l: g.pi_l,
        log_pi_w: lp[t.y_w],
        log_pi_l: lp[t.y_l],
        norm_gw_sq: g.norm_gw_sq,
        norm_gl_sq: g.norm_gl_sq,
        dot_wl: g.dot_wl,
        term_w: g.term_w(),
        term_l: g.term_l(),
        delta_w_pred,
        delta_l_pred,
        delta_w_meas: meas[t.y_w],
        delta_l_meas: meas[t.y_l],
        c1_lower_w,
        c1_upper_l,
        c2_lower: corollary2_lower_bound(&g, eta, beta),
        ystar,
        pi_ystar: lp[ystar].exp(),
        delta_ystar_meas: meas[ystar],
        delta_all_meas: meas,
        case_label: CaseLabel::classify(&g),
    })
}

/// Runs `steps` batch-1 DPO steps on one triple and reports each step
/// before it is taken. y* excludes y_w and y_l.
pub fn probe_trajectory(
    policy: &SplitPolicy,
    reference: &SplitPolicy,
    t: &PreferenceTriple,
    eta: f64,
    beta: f64,
    steps: usize,
) -> Result<Vec<StepDynamicsReport>> {
    let mut live = policy.clone();
    let mut out = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut r = mass_shift_audit(&live, reference, t, eta, beta, &[t.y_w, t.y_l])?;
        r.step = step;
        out.push(r);
        live.shift_effective(&dpo_step_direction(&live, reference, t, eta, beta)?);
    }
    Ok(out)
}

pub const DYNAMICS_COLUMNS: [&str; 15] = [
    "step",
    "log_pi_w",
    "log_pi_l",
    "z",
    "sigma_z",
    "term_w",
    "term_l",
    "delta_w_pred",
    "delta_l_pred",
    "delta_w_meas",
    "delta_l_meas",
    "log_delta_ratio",
    "pi_ystar",
    "delta_ystar_meas",
    "case_label",
];
