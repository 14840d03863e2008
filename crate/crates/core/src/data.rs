//! Datasets, synthetic tasks and their generators.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::sigmoid;
use crate::policy::{argmax_excluding, dot, FeatureMap, OutputSpace, ParamVector, PolicyKind, SplitPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceTriple {
    pub x: usize,
    pub y_w: usize,
    pub y_l: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftPair {
    pub x: usize,
    pub y_w: usize,
}

impl PreferenceTriple {
    pub fn new(x: usize, y_w: usize, y_l: usize) -> Self {
        Self { x, y_w, y_l }
    }

    pub fn validate(&self, space: Option<&OutputSpace>) -> std::result::Result<(), String> {
        if self.y_w == self.y_l {
            return Err(format!("y_w and y_l are both {}", self.y_w));
        }
        if let Some(s) = space {
            check_indices(s, self.x, &[self.y_w, self.y_l])?;
        }
        Ok(())
    }
}

impl SftPair {
    pub fn validate(&self, space: Option<&OutputSpace>) -> std::result::Result<(), String> {
        if let Some(s) = space {
            check_indices(s, self.x, &[self.y_w])?;
            if !s.is_correct(self.x, self.y_w) {
                return Err(format!(
                    "output {} is not labeled correct for prompt {}",
                    self.y_w, self.x
                ));
            }
        }
        Ok(())
    }
}

fn check_indices(s: &OutputSpace, x: usize, ys: &[usize]) -> std::result::Result<(), String> {
    if x >= s.prompts() {
        return Err(format!("prompt {x} out of range (prompts = {})", s.prompts()));
    }
    for &y in ys {
        if y >= s.outputs() {
            return Err(format!("output {y} out of range (outputs = {})", s.outputs()));
        }
    }
    Ok(())
}

/// Checks a whole dataset against a space, for in-memory inputs.
pub fn validate_datasets(
    space: &OutputSpace,
    triples: &[PreferenceTriple],
    sft_pairs: &[SftPair],
) -> Result<()> {
    for (i, t) in triples.iter().enumerate() {
        t.validate(Some(space))
            .map_err(|m| Error::Argument(format!("triple {i}: {m}")))?;
    }
    for (i, s) in sft_pairs.iter().enumerate() {
        s.validate(Some(space))
            .map_err(|m| Error::Argument(format!("SFT pair {i}: {m}")))?;
    }
    Ok(())
}

fn load_jsonl<T: DeserializeOwned>(
    path: &Path,
    check: impl Fn(&T) -> std::result::Result<(), String>,
) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: T = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        check(&rec).map_err(|message| Error::Validation {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Reads one triple per line. With a space, indices are range-checked too.
pub fn load_triples(path: &Path, space: Option<&OutputSpace>) -> Result<Vec<PreferenceTriple>> {
    load_jsonl(path, |t: &PreferenceTriple| t.validate(space))
}

pub fn load_sft_pairs(path: &Path, space: Option<&OutputSpace>) -> Result<Vec<SftPair>> {
    load_jsonl(path, |s: &SftPair| s.validate(space))
}

pub fn save_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorSpec {
    Random,
    Probe,
    DisplacementProne,
    File,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub space: OutputSpace,
    pub generator: GeneratorSpec,
    /// Present when the task is meant for log-linear policies.
    pub features: Option<FeatureMap>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskFile {
    prompts: usize,
    outputs: usize,
    correct: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<Vec<Vec<f64>>>,
}

impl SyntheticTask {
    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tf: TaskFile = serde_json::from_str(&s)?;
        if tf.correct.len() != tf.prompts {
            return Err(Error::Argument(format!(
                "task declares {} prompts but lists {} correct sets",
                tf.prompts,
                tf.correct.len()
            )));
        }
        let space = OutputSpace::from_correct_sets(tf.outputs, &tf.correct)?;
        let features = tf
            .features
            .map(|rows| FeatureMap::from_rows(tf.prompts, tf.outputs, &rows))
            .transpose()?;
        Ok(Self {
            space,
            generator: GeneratorSpec::File,
            features,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tf = TaskFile {
            prompts: self.space.prompts(),
            outputs: self.space.outputs(),
            correct: (0..self.space.prompts())
                .map(|x| self.space.correct_set(x))
                .collect(),
            features: self.features.as_ref().map(FeatureMap::rows),
        };
        let s = serde_json::to_string_pretty(&tf)?;
        std::fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
    }

    /// Zero-parameter policy matching the task (log-linear iff features exist).
    pub fn zero_policy(&self) -> Result<SplitPolicy> {
        match &self.features {
            Some(f) => SplitPolicy::log_linear(f.clone(), ParamVector::zeros(f.dim())),
            None => SplitPolicy::tabular(
                self.space.prompts(),
                self.space.outputs(),
                ParamVector::zeros(self.space.prompts() * self.space.outputs()),
            ),
        }
    }
}

/// Fraction of prompts whose most likely output is labeled correct
/// (lowest index wins ties).
pub fn accuracy(policy: &SplitPolicy, space: &OutputSpace) -> Result<f64> {
    let mut hits = 0usize;
    for x in 0..space.prompts() {
        let p = policy.prob_vector(x)?;
        let y = argmax_excluding(&p, &[]).expect("nonempty output space");
        if space.is_correct(x, y) {
            hits += 1;
        }
    }
    Ok(hits as f64 / space.prompts() as f64)
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Shape of the probe task: sequences of `length` tokens from a vocabulary
/// of `vocab`, enumerated as atomic outputs. The last token is the answer;
/// answer token 0 is correct.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeParams {
    pub vocab: usize,
    pub length: usize,
    /// Scale of the per-output identity features.
    pub id_scale: f64,
    /// Scale of the shared prefix-token features.
    pub shared_scale: f64,
    pub noise: f64,
    /// Weight per prefix match with the dominant prefix.
    pub kappa: f64,
    /// Extra identity weight on the near-miss output y*.
    pub ystar_bonus: f64,
    /// Shared weight on each dominant prefix token.
    pub prefix_bonus: f64,
}

impl Default for ProbeParams {
    fn default() -> Self {
        Self {
            vocab: 4,
            length: 3,
            id_scale: 1.0,
            shared_scale: 0.7,
            noise: 0.3,
            kappa: 1.0,
            ystar_bonus: 3.0,
            prefix_bonus: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProbeTask {
    pub task: SyntheticTask,
    /// Initial policy, all weight in the backbone.
    pub policy: SplitPolicy,
    pub prefix: Vec<usize>,
    pub ystar: usize,
}

impl ProbeParams {
    pub fn outputs(&self) -> usize {
        self.vocab.pow(self.length as u32)
    }

    /// Token sequence of output `y`, most significant position first.
    pub fn tokens(&self, mut y: usize) -> Vec<usize> {
        let mut t = vec![0; self.length];
        for slot in t.iter_mut().rev() {
            *slot = y % self.vocab;
            y /= self.vocab;
        }
        t
    }

    pub fn index(&self, tokens: &[usize]) -> usize {
        tokens.iter().fold(0, |acc, &t| acc * self.vocab + t)
    }
}

/// Builds the single-prompt probe task and an "SFT-biased" starting policy.
///
/// Features are a scaled identity per output plus a scaled one-hot for each
/// prefix token (all positions but the last). The starting weights favour a
/// random dominant prefix, correct answers on prefixes that resemble it and
/// wrong answers elsewhere, and a single near-miss y* (dominant prefix,
/// wrong answer) that holds the top probability.
pub fn build_probe_task<R: Rng + ?Sized>(params: &ProbeParams, rng: &mut R) -> Result<ProbeTask> {
    let ProbeParams {
        vocab,
        length,
        id_scale,
        shared_scale,
        ..
    } = *params;
    if vocab < 2 || length < 2 {
        return Err(Error::Argument(format!(
            "probe task needs vocab >= 2 and length >= 2, got {vocab} and {length}"
        )));
    }
    let n = params.outputs();
    let prefix_len = length - 1;
    let shared_dim = prefix_len * vocab;
    let dim = n + shared_dim;

    let mut rows = Vec::with_capacity(n);
    for y in 0..n {
        let tokens = params.tokens(y);
        let mut row = vec![0.0; dim];
        row[y] = id_scale;
        for (pos, &tok) in tokens[..prefix_len].iter().enumerate() {
            row[n + pos * vocab + tok] = shared_scale;
        }
        rows.push(row);
    }
    let features = FeatureMap::from_rows(1, n, &rows)?;

    let prefix: Vec<usize> = (0..prefix_len).map(|_| rng.random_range(0..vocab)).collect();
    let answer_star = rng.random_range(1..vocab);

    let mut w_id = vec![0.0; n];
    for (y, w) in w_id.iter_mut().enumerate() {
        let tokens = params.tokens(y);
        let q = tokens[..prefix_len]
            .iter()
            .zip(&prefix)
            .filter(|(a, b)| a == b)
            .count() as f64;
        let bias = if tokens[prefix_len] == 0 {
            params.kappa * q
        } else {
            params.kappa * (prefix_len as f64 - q)
        };
        *w = params.noise * normal(rng) + bias;
    }
    let mut star_tokens = prefix.clone();
    star_tokens.push(answer_star);
    let ystar = params.index(&star_tokens);
    w_id[ystar] += params.ystar_bonus;

    let mut w = Vec::with_capacity(dim);
    w.extend(w_id.iter().map(|v| v / id_scale));
    let mut w_sh = vec![0.0; shared_dim];
    for (pos, &tok) in prefix.iter().enumerate() {
        w_sh[pos * vocab + tok] += params.prefix_bonus;
    }
    w.extend(w_sh.iter().map(|v| v / shared_scale));

    let correct: Vec<usize> = (0..n).filter(|&y| params.tokens(y)[prefix_len] == 0).collect();
    let space = OutputSpace::from_correct_sets(n, &[correct])?;
    let policy = SplitPolicy::log_linear(features.clone(), ParamVector::from_backbone(w))?;
    Ok(ProbeTask {
        task: SyntheticTask {
            space,
            generator: GeneratorSpec::Probe,
            features: Some(features),
        },
        policy,
        prefix,
        ystar,
    })
}

/// Per-prompt sets chosen by [`generate_probe_dataset`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProbeSet {
    pub x: usize,
    pub d_w: Vec<usize>,
    pub d_l: Vec<usize>,
    pub ystar: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeDataset {
    pub sets: Vec<ProbeSet>,
    pub triples: Vec<PreferenceTriple>,
    pub sft_pairs: Vec<SftPair>,
}

/// Sample, filter by label, keep the `top_k` most likely on each side and
/// pair them up. y* (the overall argmax) is kept out of the dispreferred set.
pub fn generate_probe_dataset<R: Rng + ?Sized>(
    policy: &SplitPolicy,
    space: &OutputSpace,
    n_samples: usize,
    top_k: usize,
    rng: &mut R,
) -> Result<ProbeDataset> {
    if top_k == 0 {
        return Err(Error::Argument("top_k must be positive".into()));
    }
    let mut sets = Vec::new();
    let mut triples = Vec::new();
    let mut sft_pairs = Vec::new();
    for x in 0..space.prompts() {
        let p = policy.prob_vector(x)?;
        let mut seen = BTreeSet::new();
        for _ in 0..n_samples {
            seen.insert(policy.sample_with(x, rng)?);
        }
        let ystar = argmax_excluding(&p, &[]).expect("nonempty output space");
        let by_prob = |ys: Vec<usize>| {
            let mut ys = ys;
            // Stable sort keeps lower indices first on ties.
            ys.sort_by(|a, b| p[*b].total_cmp(&p[*a]));
            ys.truncate(top_k);
            ys
        };
        let d_w = by_prob(seen.iter().copied().filter(|&y| space.is_correct(x, y)).collect());
        let d_l = by_prob(
            seen.iter()
                .copied()
                .filter(|&y| !space.is_correct(x, y) && y != ystar)
                .collect(),
        );
        if d_w.len() < top_k || d_l.len() < top_k {
            return Err(Error::Generation(format!(
                "prompt {x}: {n_samples} samples gave {} preferred and {} dispreferred \
                 candidates, need {top_k} each; increase n_samples",
                d_w.len(),
                d_l.len()
            )));
        }
        for &w in &d_w {
            sft_pairs.push(SftPair { x, y_w: w });
            for &l in &d_l {
                triples.push(PreferenceTriple::new(x, w, l));
            }
        }
        sets.push(ProbeSet { x, d_w, d_l, ystar });
    }
    Ok(ProbeDataset {
        sets,
        triples,
        sft_pairs,
    })
}

/// Knobs for [`generate_displacement_prone`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DisplacementParams {
    pub kind: PolicyKind,
    pub outputs: usize,
    pub dim: usize,
    /// Noise scale separating f(y_l) from f(y_w); small means aligned gradients.
    pub correlation_noise: f64,
    pub budget: usize,
    pub warm_epochs: usize,
    pub warm_eta: f64,
    /// Minimum probability of the absorbing output y*.
    pub min_ystar_mass: f64,
}

impl Default for DisplacementParams {
    fn default() -> Self {
        Self {
            kind: PolicyKind::LogLinear,
            outputs: 4,
            dim: 3,
            correlation_noise: 0.3,
            budget: 100_000,
            warm_epochs: 5,
            warm_eta: 0.05,
            min_ystar_mass: 0.3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DisplacementTask {
    pub task: SyntheticTask,
    /// SFT-warm-started policy, all weight in the backbone.
    pub policy: SplitPolicy,
    pub triple: PreferenceTriple,
    pub ystar: usize,
    /// Candidates drawn before the certificate held (1-based).
    pub candidates: usize,
}

/// Searches random single-prompt feature maps for a likelihood-displacement
/// instance. Output 0 is y_w (the only correct output), output 1 is y_l.
///
/// A candidate is certified when, at the warm-started policy with the
/// reference equal to it, `g_w . g_l > ||g_w||^2`, the most likely output
/// other than y_w and y_l holds at least `min_ystar_mass`, and its
/// first-order probability change under a DPO step is positive.
pub fn generate_displacement_prone<R: Rng + ?Sized>(
    params: &DisplacementParams,
    rng: &mut R,
) -> Result<DisplacementTask> {
    if params.kind == PolicyKind::Tabular {
        return Err(Error::Argument(
            "tabular policies always satisfy ||g_w||^2 - g_w.g_l = 1 - p_w + p_l > 0, \
             so no displacement certificate exists"
                .into(),
        ));
    }
    if params.dim < 2 {
        return Err(Error::Argument("feature dimension must be at least 2".into()));
    }
    if params.outputs < 3 {
        return Err(Error::Argument("need at least 3 outputs".into()));
    }
    let (n, d) = (params.outputs, params.dim);
    let (yw, yl) = (0usize, 1usize);
    for c in 0..params.budget {
        let mut rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| normal(rng)).collect()).collect();
        rows[yl] = rows[yw]
            .iter()
            .map(|v| v + params.correlation_noise * normal(rng))
            .collect();
        let mut w: Vec<f64> = (0..d).map(|_| normal(rng)).collect();

        let features = FeatureMap::from_rows(1, n, &rows)?;
        let mut policy = SplitPolicy::log_linear(features.clone(), ParamVector::from_backbone(w.clone()))?;
        for _ in 0..params.warm_epochs {
            let g = policy.effective_grad(0, yw)?;
            for (wi, gi) in w.iter_mut().zip(&g) {
                *wi += params.warm_eta * gi;
            }
            policy.set_params(ParamVector::from_backbone(w.clone()))?;
        }

        let p = policy.prob_vector(0)?;
        let gw = policy.effective_grad_with(0, yw, &p);
        let gl = policy.effective_grad_with(0, yl, &p);
        if dot(&gw, &gw) - dot(&gw, &gl) >= 0.0 {
            continue;
        }
        let ystar = argmax_excluding(&p, &[yw, yl]).expect("at least 3 outputs");
        if p[ystar] < params.min_ystar_mass {
            continue;
        }
        // With the reference equal to the policy, z = 0 and the step factor
        // beta (1 - sigma(0)) is positive, so only the sign below matters.
        let gs = policy.effective_grad_with(0, ystar, &p);
        let diff: Vec<f64> = gw.iter().zip(&gl).map(|(a, b)| a - b).collect();
        if (1.0 - sigmoid(0.0)) * p[ystar] * dot(&gs, &diff) <= 0.0 {
            continue;
        }
        let space = OutputSpace::from_correct_sets(n, &[vec![yw]])?;
        return Ok(DisplacementTask {
            task: SyntheticTask {
                space,
                generator: GeneratorSpec::DisplacementProne,
                features: Some(features),
            },
            policy,
            triple: PreferenceTriple::new(0, yw, yl),
            ystar,
            candidates: c + 1,
        });
    }
    Err(Error::SearchExhausted {
        budget: params.budget,
    })
}

/// A random (policy, reference, triple) for property checks.
#[derive(Debug, Clone)]
pub struct RandomInstance {
    pub policy: SplitPolicy,
    pub reference: SplitPolicy,
    pub triple: PreferenceTriple,
}

/// Draws a random instance: 1 to 3 prompts, 3 to 6 outputs, standard normal
/// parameters in both blocks (log-linear: 2 to 5 features, standard normal
/// features). The reference is the policy with its backbone jittered.
pub fn random_instance<R: Rng + ?Sized>(kind: PolicyKind, rng: &mut R) -> RandomInstance {
    let prompts = rng.random_range(1..=3);
    let outputs = rng.random_range(3..=6);
    let n = match kind {
        PolicyKind::Tabular => prompts * outputs,
        PolicyKind::LogLinear => rng.random_range(2..=5),
    };
    let mut draw = |len: usize, s: f64| -> Vec<f64> { (0..len).map(|_| s * normal(rng)).collect() };
    let params = ParamVector::new(draw(n, 1.0), draw(n, 1.0)).expect("finite draws");
    let jitter = draw(n, 0.5);
    let features = (kind == PolicyKind::LogLinear).then(|| draw(prompts * outputs * n, 1.0));
    let policy = match features {
        Some(values) => SplitPolicy::log_linear(
            FeatureMap::new(prompts, outputs, n, values).expect("valid shape"),
            params,
        ),
        None => SplitPolicy::tabular(prompts, outputs, params),
    }
    .expect("valid shape");
    let mut reference = policy.clone();
    for (p, j) in reference.params_mut().phi_mut().iter_mut().zip(&jitter) {
        *p += j;
    }
    let x = rng.random_range(0..prompts);
    let mut ys: Vec<usize> = (0..outputs).collect();
    ys.shuffle(rng);
    RandomInstance {
        policy,
        reference,
        triple: PreferenceTriple::new(x, ys[0], ys[1]),
    }
}
