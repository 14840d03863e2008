//! Seeded property suite behind `prefdyn verify`.
//!
//! Every property draws its instances from `instance_rng(seed, stream)`
//! with a stream id unique to (property, instance), so any failing instance
//! can be replayed alone from the report.

use nalgebra::SymmetricEigen;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{random_instance, PreferenceTriple, RandomInstance, SftPair};
use crate::dynamics::{
    corollary1_bounds, corollary2_lower_bound, measure_deltas, predict_from, CaseLabel, Geometry,
};
use crate::error::Result;
use crate::objectives::{
    dpo_grad, dpo_loss, grad_phi_total, grad_theta_total, margin_z, penalized_objective, reg_gradient,
    reg_term, sft_grad, sft_loss, Weights,
};
use crate::par::{instance_rng, map_indexed_with, Execution};
use crate::policy::{ParamBlock, ParamVector, PolicyKind, SplitPolicy};
use crate::trainer::inner_sft_descent;

/// Finite-difference step used by every oracle.
pub const FD_STEP: f64 = 1e-5;

/// Deliberate defects, used to check that the suite notices them.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    /// Flip the sign of the predicted dispreferred change.
    FlipDeltaL,
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub seed: u64,
    pub gradient_instances: usize,
    pub loss_instances: usize,
    pub audit_instances: usize,
    pub tabular_instances: usize,
    pub richardson_instances: usize,
    pub exec: Execution,
    #[doc(hidden)]
    pub mutation: Option<Mutation>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            gradient_instances: 500,
            loss_instances: 200,
            audit_instances: 1000,
            tabular_instances: 10_000,
            richardson_instances: 100,
            exec: Execution::default(),
            mutation: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FailingInstance {
    pub index: usize,
    /// Stream id for `instance_rng(seed, stream)`.
    pub stream: u64,
    pub slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyResult {
    pub property: String,
    pub instances: usize,
    /// Smallest margin by which the property held; negative means violated.
    pub worst_slack: f64,
    pub passed: bool,
    /// Summary statistic where the property is aggregate (e.g. a median).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub statistic: Option<f64>,
    pub failing_count: usize,
    /// First failing instances, capped at [`MAX_DUMPED`].
    pub failing: Vec<FailingInstance>,
}

pub const MAX_DUMPED: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub passed: bool,
    pub properties: Vec<PropertyResult>,
}

impl VerifyReport {
    pub fn property(&self, name: &str) -> Option<&PropertyResult> {
        self.properties.iter().find(|p| p.property == name)
    }
}

fn stream(property: u64, index: usize) -> u64 {
    (property << 32) | index as u64
}

/// Evaluates `slack_of` on `n` seeded instances; the property holds where
/// the slack is nonnegative.
fn per_instance<F>(name: &str, id: u64, n: usize, opts: &VerifyOptions, slack_of: F) -> PropertyResult
where
    F: Fn(&mut ChaCha8Rng, usize) -> f64 + Sync + Send,
{
    let slacks = map_indexed_with(opts.exec, n, |i| {
        let mut rng = instance_rng(opts.seed, stream(id, i));
        slack_of(&mut rng, i)
    });
    summarize(name, id, &slacks, None)
}

fn summarize(name: &str, id: u64, slacks: &[f64], statistic: Option<f64>) -> PropertyResult {
    let mut failing = Vec::new();
    let mut count = 0;
    let mut worst = f64::INFINITY;
    for (i, &s) in slacks.iter().enumerate() {
        if s.is_nan() || s < 0.0 {
            count += 1;
            if failing.len() < MAX_DUMPED {
                failing.push(FailingInstance {
                    index: i,
                    stream: stream(id, i),
                    slack: s,
                });
            }
        }
        worst = if s.is_nan() { f64::NAN } else { worst.min(s) };
    }
    PropertyResult {
        property: name.to_string(),
        instances: slacks.len(),
        worst_slack: worst,
        passed: count == 0,
        statistic,
        failing_count: count,
        failing,
    }
}

fn kind_for(i: usize) -> PolicyKind {
    if i.is_multiple_of(2) {
        PolicyKind::Tabular
    } else {
        PolicyKind::LogLinear
    }
}

/// Central differences of `f` around `x`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Absolute floor of the finite-difference comparisons. Central differences
/// at `FD_STEP` carry roughly `eps |f| / h ~ 1e-11 |f|` of cancellation
/// noise, which dominates for nearly vanishing gradients.
pub const FD_ATOL: f64 = 1e-10;

/// `||a - b|| / ||b||`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    dist(a, b) / b.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Slack of `||an - fd|| <= rtol ||fd|| + FD_ATOL`.
pub fn fd_slack(an: &[f64], fd: &[f64], rtol: f64) -> f64 {
    let nfd = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
    rtol * nfd + FD_ATOL - dist(an, fd)
}

fn with_flat(policy: &SplitPolicy, flat: &[f64]) -> SplitPolicy {
    let mut p = policy.clone();
    p.set_params(ParamVector::from_flat(flat).expect("even length"))
        .expect("same block length");
    p
}

fn with_block(policy: &SplitPolicy, block: ParamBlock, v: &[f64]) -> SplitPolicy {
    let mut p = policy.clone();
    match block {
        ParamBlock::Theta => p.params_mut().theta_mut().copy_from_slice(v),
        ParamBlock::Phi => p.params_mut().phi_mut().copy_from_slice(v),
        ParamBlock::All => return with_flat(policy, v),
    }
    p
}

/// Up to three extra triples and SFT pairs drawn on the instance's space.
fn random_batch(inst: &RandomInstance, rng: &mut ChaCha8Rng) -> (Vec<PreferenceTriple>, Vec<SftPair>) {
    let pol = &inst.policy;
    let mut triples = vec![inst.triple];
    let mut sft = vec![SftPair {
        x: inst.triple.x,
        y_w: inst.triple.y_w,
    }];
    for _ in 0..rng.random_range(0..3) {
        let x = rng.random_range(0..pol.prompts());
        let y_w = rng.random_range(0..pol.outputs());
        let y_l = (y_w + rng.random_range(1..pol.outputs())) % pol.outputs();
        triples.push(PreferenceTriple::new(x, y_w, y_l));
        sft.push(SftPair { x, y_w });
    }
    (triples, sft)
}

/// Hinge gap `||g_l|| - ||g_w||` of the least decisive triple.
fn min_abs_hinge(policy: &SplitPolicy, triples: &[PreferenceTriple]) -> f64 {
    triples
        .iter()
        .map(|t| {
            let a = policy.grad_norm_sq(t.x, t.y_w).unwrap().sqrt();
            let b = policy.grad_norm_sq(t.x, t.y_l).unwrap().sqrt();
            (b - a).abs()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Tolerance for gradient oracles of losses.
pub const LOSS_RTOL: f64 = 1e-5;

pub fn run_suite(opts: &VerifyOptions) -> Result<VerifyReport> {
    let mut props = Vec::new();
    let n_audit = opts.audit_instances;

    props.push(per_instance("normalization", 1, n_audit, opts, |rng, i| {
        let inst = random_instance(kind_for(i), rng);
        (0..inst.policy.prompts())
            .map(|x| {
                let p = inst.policy.prob_vector(x).unwrap();
                let in_range = p.iter().all(|v| (0.0..=1.0).contains(v));
                if in_range {
                    1e-12 - (p.iter().sum::<f64>() - 1.0).abs()
                } else {
                    -1.0
                }
            })
            .fold(f64::INFINITY, f64::min)
    }));

    props.push(per_instance(
        "grad_log_prob_fd",
        2,
        opts.gradient_instances,
        opts,
        |rng, i| {
            let inst = random_instance(kind_for(i), rng);
            let t = inst.triple;
            let pol = &inst.policy;
            let flat = pol.params().to_flat();
            let fd = central_diff(
                |v| with_flat(pol, v).log_prob(t.x, t.y_w).unwrap(),
                &flat,
                FD_STEP,
            );
            let an = pol.grad_log_prob(t.x, t.y_w, ParamBlock::All).unwrap();
            fd_slack(&an, &fd, 1e-6)
        },
    ));

    props.push(per_instance(
        "second_derivative_fd",
        3,
        opts.loss_instances,
        opts,
        |rng, i| {
            let inst = random_instance(kind_for(i), rng);
            let t = inst.triple;
            let pol = &inst.policy;
            let h = pol.second_derivative_log_prob(t.x, t.y_w).unwrap();
            let theta = pol.params().theta().to_vec();
            let n = theta.len();
            let mut fd = Vec::with_capacity(n * n);
            for j in 0..n {
                let mut up = theta.clone();
                let mut down = theta.clone();
                up[j] += FD_STEP;
                down[j] -= FD_STEP;
                let gu = with_block(pol, ParamBlock::Theta, &up)
                    .effective_grad(t.x, t.y_w)
                    .unwrap();
                let gd = with_block(pol, ParamBlock::Theta, &down)
                    .effective_grad(t.x, t.y_w)
                    .unwrap();
                // Column j of the Hessian.
                fd.extend(gu.iter().zip(&gd).map(|(a, b)| (a - b) / (2.0 * FD_STEP)));
            }
            let an: Vec<f64> = h.as_slice().to_vec(); // column-major, matches `fd`
            let asym = (&h - h.transpose()).abs().max();
            let top = SymmetricEigen::new(h.clone()).eigenvalues.max();
            fd_slack(&an, &fd, 1e-4).min(1e-10 - asym).min(1e-10 - top)
        },
    ));

    props.push(per_instance("additive_split", 4, n_audit, opts, |rng, i| {
        let inst = random_instance(kind_for(i), rng);
        let pol = &inst.policy;
        let delta: Vec<f64> = (0..pol.block_len())
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        let mut moved = pol.clone();
        for (k, d) in delta.iter().enumerate() {
            moved.params_mut().theta_mut()[k] += d;
            moved.params_mut().phi_mut()[k] -= d;
        }
        (0..pol.prompts())
            .flat_map(|x| {
                let a = pol.prob_vector(x).unwrap();
                let b = moved.prob_vector(x).unwrap();
                a.into_iter()
                    .zip(b)
                    .map(|(u, v)| 1e-12 - (u - v).abs())
                    .collect::<Vec<_>>()
            })
            .fold(f64::INFINITY, f64::min)
    }));

    props.push(per_instance(
        "tabular_no_displacement",
        5,
        n_audit,
        opts,
        |rng, _| {
            let inst = random_instance(PolicyKind::Tabular, rng);
            let g = Geometry::new(&inst.policy, &inst.reference, &inst.triple, 0.5).unwrap();
            let closed = 1.0 - g.pi_w + g.pi_l;
            // Positive, and equal to the closed form.
            g.term_w().min(1e-12 - (g.term_w() - closed).abs())
        },
    ));

    props.push(per_instance(
        "dpo_grad_fd",
        6,
        opts.loss_instances,
        opts,
        |rng, i| {
            let inst = random_instance(kind_for(i / 2), rng);
            let (triples, _) = random_batch(&inst, rng);
            let beta = rng.random_range(0.1..2.0);
            let block = if i % 2 == 0 {
                ParamBlock::Theta
            } else {
                ParamBlock::Phi
            };
            let x0 = inst.policy.params().block(block);
            let fd = central_diff(
                |v| {
                    dpo_loss(
                        &with_block(&inst.policy, block, v),
                        &inst.reference,
                        &triples,
                        beta,
                    )
                    .unwrap()
                },
                &x0,
                FD_STEP,
            );
            let an = dpo_grad(&inst.policy, &inst.reference, &triples, beta).unwrap();
            fd_slack(&an, &fd, LOSS_RTOL)
        },
    ));

    props.push(per_instance(
        "sft_grad_fd",
        7,
        opts.loss_instances,
        opts,
        |rng, i| {
            let inst = random_instance(kind_for(i / 2), rng);
            let (_, sft) = random_batch(&inst, rng);
            let block = if i % 2 == 0 {
                ParamBlock::Theta
            } else {
                ParamBlock::Phi
            };
            let x0 = inst.policy.params().block(block);
            let fd = central_diff(
                |v| sft_loss(&with_block(&inst.policy, block, v), &sft).unwrap(),
                &x0,
                FD_STEP,
            );
            let an = sft_grad(&inst.policy, &sft).unwrap();
            fd_slack(&an, &fd, LOSS_RTOL)
        },
    ));

    props.push(per_instance(
        "reg_grad_fd",
        8,
        opts.loss_instances,
        opts,
        |rng, i| {
            // Redraw until the hinge is active and away from its kink.
            let (inst, t) = loop {
                let inst = random_instance(kind_for(i / 2), rng);
                let t = inst.triple;
                let p = &inst.policy;
                let gap =
                    p.grad_norm_sq(t.x, t.y_l).unwrap().sqrt() - p.grad_norm_sq(t.x, t.y_w).unwrap().sqrt();
                if gap > 1e-3 {
                    break (inst, t);
                }
            };
            let block = if i % 2 == 0 {
                ParamBlock::Theta
            } else {
                ParamBlock::Phi
            };
            let x0 = inst.policy.params().block(block);
            let fd = central_diff(
                |v| reg_term(&with_block(&inst.policy, block, v), &[t]).unwrap(),
                &x0,
                FD_STEP,
            );
            let an = reg_gradient(&inst.policy, &t, block).unwrap();
            fd_slack(&an, &fd, LOSS_RTOL)
        },
    ));

    props.push(per_instance(
        "objective_grad_fd",
        9,
        opts.loss_instances,
        opts,
        |rng, i| {
            let (inst, triples, sft) = loop {
                let inst = random_instance(kind_for(i / 2), rng);
                let (triples, sft) = random_batch(&inst, rng);
                if min_abs_hinge(&inst.policy, &triples) > 1e-3 {
                    break (inst, triples, sft);
                }
            };
            let w = Weights {
                beta: rng.random_range(0.1..2.0),
                lambda: rng.random_range(0.0..2.0),
                gamma: rng.random_range(0.0..1.0),
            };
            let k = rng.random_range(0..4);
            let (phi_prime, _) = inner_sft_descent(&inst.policy, &sft, 0.1, k).unwrap();
            let block = if i % 2 == 0 {
                ParamBlock::Theta
            } else {
                ParamBlock::Phi
            };
            let x0 = inst.policy.params().block(block);
            let objective = |v: &[f64]| {
                let p = with_block(&inst.policy, block, v);
                penalized_objective(&p, &inst.reference, &phi_prime, &triples, &sft, w)
                    .unwrap()
                    .total
            };
            let fd = central_diff(objective, &x0, FD_STEP);
            let an = match block {
                ParamBlock::Theta => {
                    grad_theta_total(&inst.policy, &inst.reference, &phi_prime, &triples, &sft, w)
                }
                _ => grad_phi_total(&inst.policy, &inst.reference, &triples, &sft, w),
            }
            .unwrap();
            fd_slack(&an, &fd, LOSS_RTOL)
        },
    ));

    props.push(per_instance(
        "dpo_shift_invariance",
        10,
        n_audit,
        opts,
        |rng, _| {
            let inst = random_instance(PolicyKind::Tabular, rng);
            let c = rng.random_range(-20.0..20.0);
            let mut shifted = inst.policy.clone();
            let row = inst.triple.x * shifted.outputs();
            for v in &mut shifted.params_mut().phi_mut()[row..row + inst.policy.outputs()] {
                *v += c;
            }
            let a = dpo_loss(&inst.policy, &inst.reference, &[inst.triple], 0.5).unwrap();
            let b = dpo_loss(&shifted, &inst.reference, &[inst.triple], 0.5).unwrap();
            1e-10 - (a - b).abs()
        },
    ));

    props.push(per_instance("z_antisymmetry", 11, n_audit, opts, |rng, i| {
        let inst = random_instance(kind_for(i), rng);
        let t = inst.triple;
        let swapped = PreferenceTriple::new(t.x, t.y_l, t.y_w);
        let a = margin_z(&inst.policy, &inst.reference, &t, 0.5).unwrap();
        let b = margin_z(&inst.policy, &inst.reference, &swapped, 0.5).unwrap();
        1e-12 - (a + b).abs()
    }));

    // First-order accuracy: the error ratio at eta vs eta/2.
    let eta = 0.01;
    let beta = 0.5;
    let rich: Vec<(f64, f64)> = map_indexed_with(opts.exec, opts.richardson_instances, |i| {
        let mut rng = instance_rng(opts.seed, stream(12, i));
        let inst = random_instance(kind_for(i), &mut rng);
        let t = inst.triple;
        let g = Geometry::new(&inst.policy, &inst.reference, &t, beta).unwrap();
        let err = |e: f64| {
            let m = measure_deltas(&inst.policy, &inst.reference, &t, e, beta).unwrap();
            (m[t.y_w] - predict_from(&g, e, beta).0).abs()
        };
        let m = measure_deltas(&inst.policy, &inst.reference, &t, eta, beta).unwrap();
        (err(eta) / err(eta / 2.0), m.iter().sum::<f64>())
    });
    let mut ratios: Vec<f64> = rich.iter().map(|r| r.0).collect();
    ratios.sort_by(f64::total_cmp);
    let median = median_sorted(&ratios);
    let mut rp = summarize(
        "richardson_order",
        12,
        &[(median - 3.0).min(5.0 - median)],
        Some(median),
    );
    rp.instances = rich.len();
    props.push(rp);

    props.push(per_instance("conservation", 13, n_audit, opts, |rng, i| {
        let inst = random_instance(kind_for(i), rng);
        let eta = rng.random_range(1e-3..1.0);
        let m = measure_deltas(&inst.policy, &inst.reference, &inst.triple, eta, 0.5).unwrap();
        1e-12 - m.iter().sum::<f64>().abs()
    }));

    let mutation = opts.mutation;
    let predicted = move |inst: &RandomInstance, eta: f64, beta: f64| {
        let g = Geometry::new(&inst.policy, &inst.reference, &inst.triple, beta).unwrap();
        let (dw, mut dl) = predict_from(&g, eta, beta);
        if mutation == Some(Mutation::FlipDeltaL) {
            dl = -dl;
        }
        (g, dw, dl)
    };

    props.push(per_instance("corollary1", 14, n_audit, opts, |rng, i| {
        let inst = random_instance(kind_for(i), rng);
        let (eta, beta) = (rng.random_range(1e-3..1.0), rng.random_range(0.1..2.0));
        let (g, dw, dl) = predicted(&inst, eta, beta);
        let (lo, hi) = corollary1_bounds(&g, eta, beta);
        (dw - lo).min(hi - dl) + 1e-12
    }));

    props.push(per_instance("corollary2", 15, n_audit, opts, |rng, i| {
        let inst = random_instance(kind_for(i), rng);
        let (eta, beta) = (rng.random_range(1e-3..1.0), rng.random_range(0.1..2.0));
        let (g, dw, dl) = predicted(&inst, eta, beta);
        (dw - dl) - corollary2_lower_bound(&g, eta, beta) + 1e-12
    }));

    props.push(per_instance(
        "tabular_impossibility",
        16,
        opts.tabular_instances,
        opts,
        |rng, _| {
            let inst = random_instance(PolicyKind::Tabular, rng);
            let g = Geometry::new(&inst.policy, &inst.reference, &inst.triple, 0.5).unwrap();
            if CaseLabel::classify(&g) == CaseLabel::Case1 {
                -1.0
            } else {
                g.term_w()
            }
        },
    ));

    let passed = props.iter().all(|p| p.passed);
    Ok(VerifyReport {
        seed: opts.seed,
        passed,
        properties: props,
    })
}

pub fn median_sorted(v: &[f64]) -> f64 {
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}
