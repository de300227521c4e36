//! Loss terms and rewards. Every function returns the value together with
//! what its gradient needs, so the trainer can assemble the joint objective
//! without an autodiff engine.

use crate::error::{invalid, Error, Result};
use crate::hard_attention::{Episode, EpisodeGrads};
use crate::kv::KvMap;
use crate::nn::softmax_backward;
use crate::scalar::{lit, to_f64, Scalar};

/// Which sign the entropy term carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntropyForm {
    /// `β Σ p log p`: minimising it raises entropy (spreads attention).
    Negative,
    /// `−β Σ p log p`: minimising it lowers entropy.
    Literal,
}

impl std::str::FromStr for EntropyForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "negative" => Ok(EntropyForm::Negative),
            "literal" => Ok(EntropyForm::Literal),
            _ => Err(Error::Config(format!("unknown entropy form '{s}' (negative|literal)"))),
        }
    }
}

impl std::fmt::Display for EntropyForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EntropyForm::Negative => "negative",
            EntropyForm::Literal => "literal",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub beta: f64,
    pub delta: f64,
    pub alpha: f64,
    /// Per-step reward weight base: step `k` counts `policy_weight^(k − t)`
    /// towards the return from `t`. 1 gives the plain reward-to-go.
    pub policy_weight: f64,
    pub entropy_form: EntropyForm,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { beta: 1.0, delta: 1.0, alpha: 0.5, policy_weight: 1.0, entropy_form: EntropyForm::Negative }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        if !(self.policy_weight > 0.0 && self.policy_weight <= 1.0) {
            return Err(Error::Config("policy_weight must lie in (0, 1]".into()));
        }
        if !self.beta.is_finite() || !self.delta.is_finite() || self.delta < 0.0 {
            return Err(Error::Config("beta must be finite and delta finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn from_kv(kv: &mut KvMap, prefix: &str, d: Self) -> Result<Self> {
        let k = |s: &str| format!("{prefix}{s}");
        let cfg = LossConfig {
            beta: kv.take_or(&k("beta"), d.beta)?,
            delta: kv.take_or(&k("delta"), d.delta)?,
            alpha: kv.take_or(&k("alpha"), d.alpha)?,
            policy_weight: kv.take_or(&k("policy_weight"), d.policy_weight)?,
            entropy_form: kv.take_or(&k("entropy_form"), d.entropy_form)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write_kv(&self, kv: &mut KvMap, prefix: &str) {
        let k = |s: &str| format!("{prefix}{s}");
        kv.insert(k("beta"), self.beta);
        kv.insert(k("delta"), self.delta);
        kv.insert(k("alpha"), self.alpha);
        kv.insert(k("policy_weight"), self.policy_weight);
        kv.insert(k("entropy_form"), self.entropy_form);
    }
}

/// Entropy regulariser over an attention distribution, with `0 log 0 = 0`.
pub fn entropy_loss<S: Scalar>(probs: &[S], beta: f64, form: EntropyForm) -> S {
    let s: S = probs.iter().filter(|&&p| p > S::zero()).map(|&p| p * p.ln()).sum();
    let b: S = lit(beta);
    match form {
        EntropyForm::Negative => b * s,
        EntropyForm::Literal => -b * s,
    }
}

/// Gradient of [`entropy_loss`] w.r.t. each probability (zero entries get 0).
pub fn entropy_loss_grad<S: Scalar>(probs: &[S], beta: f64, form: EntropyForm) -> Vec<S> {
    let b: S = lit(match form {
        EntropyForm::Negative => beta,
        EntropyForm::Literal => -beta,
    });
    probs.iter().map(|&p| if p > S::zero() { b * (p.ln() + S::one()) } else { S::zero() }).collect()
}

pub fn step_reward(predicted: usize, gt: usize) -> f64 {
    if predicted == gt { 1.0 } else { 0.0 }
}

/// `R_t = Σ_{k ≥ t} w^(k − t) r_k`.
pub fn rewards_to_go(rewards: &[f64], weight: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + weight * acc;
        out[t] = acc;
    }
    out
}

/// REINFORCE surrogate `−Σ_t log π_t (R_t − B_t)`; `B_t` is treated as a
/// constant. Steps without an action pass `None`.
pub fn reinforce_surrogate<S: Scalar>(log_probs: &[Option<S>], returns: &[S], baselines: &[S]) -> S {
    log_probs
        .iter()
        .zip(returns.iter().zip(baselines))
        .filter_map(|(lp, (&r, &b))| lp.map(|lp| -lp * (r - b)))
        .sum()
}

/// Coefficients of `∇ log π_t` in the surrogate's gradient.
pub fn reinforce_coefficients<S: Scalar>(returns: &[S], baselines: &[S]) -> Vec<S> {
    returns.iter().zip(baselines).map(|(&r, &b)| -(r - b)).collect()
}

/// Overlap of two axis-aligned squares of side `side` centred at `a`, `b`.
pub fn box_intersection(a: (f64, f64), b: (f64, f64), side: f64) -> f64 {
    (side - (a.0 - b.0).abs()).max(0.0) * (side - (a.1 - b.1).abs()).max(0.0)
}

/// Mean pairwise overlap between glimpse boxes, as a fraction of box area.
pub fn bbox_overlap_loss(locations: &[(f64, f64)], side: f64) -> Result<f64> {
    if locations.len() < 2 {
        return Err(invalid("bounding-box loss needs at least two locations"));
    }
    if !(side > 0.0) {
        return Err(invalid("box side must be positive"));
    }
    let t = locations.len();
    let pairs = (t * (t - 1) / 2) as f64;
    let mut sum = 0.0;
    for i in 0..t {
        for j in i + 1..t {
            sum += box_intersection(locations[i], locations[j], side);
        }
    }
    Ok(sum / (pairs * side * side))
}

/// Gradient of [`bbox_overlap_loss`] w.r.t. each location (a.e.).
pub fn bbox_overlap_grad(locations: &[(f64, f64)], side: f64) -> Vec<(f64, f64)> {
    let t = locations.len();
    let mut g = vec![(0.0, 0.0); t];
    if t < 2 {
        return g;
    }
    let norm = (t * (t - 1) / 2) as f64 * side * side;
    for i in 0..t {
        for j in i + 1..t {
            let (a, b) = (locations[i], locations[j]);
            let (dx, dy) = (a.0 - b.0, a.1 - b.1);
            let ox = side - dx.abs();
            let oy = side - dy.abs();
            if ox <= 0.0 || oy <= 0.0 {
                continue;
            }
            // d|dx|/d a.x = sign(dx)
            let gx = -dx.signum() * oy / norm;
            let gy = -dy.signum() * ox / norm;
            g[i].0 += gx;
            g[i].1 += gy;
            g[j].0 -= gx;
            g[j].1 -= gy;
        }
    }
    g
}

pub fn score_distance(predicted: usize, gt: usize) -> usize {
    predicted.abs_diff(gt)
}

/// Expected distance `Σ_c p_c |c − GT|` under a predicted distribution.
pub fn expected_score_distance<S: Scalar>(probs: &[S], gt: usize) -> S {
    probs.iter().enumerate().map(|(c, &p)| p * lit(c.abs_diff(gt) as f64)).sum()
}

/// Gradient of [`expected_score_distance`] w.r.t. the logits behind `probs`.
pub fn expected_score_distance_logit_grad<S: Scalar>(probs: &[S], gt: usize) -> Vec<S> {
    let dp: Vec<S> = (0..probs.len()).map(|c| lit(c.abs_diff(gt) as f64)).collect();
    softmax_backward(probs, &dp)
}

/// `−log p[gt]` and its logit gradient `p − onehot(gt)`.
pub fn cross_entropy<S: Scalar>(probs: &[S], gt: usize) -> (S, Vec<S>) {
    let tiny: S = lit(1e-12);
    let loss = -(probs[gt].max(tiny)).ln();
    let grad = probs.iter().enumerate().map(|(c, &p)| if c == gt { p - S::one() } else { p }).collect();
    (loss, grad)
}

/// `L_θ + δ (L_bb + L_s)`.
pub fn hard_attention_loss(l_theta: f64, l_bb: f64, l_s: f64, delta: f64) -> f64 {
    l_theta + delta * (l_bb + l_s)
}

pub fn joint_coefficient(alpha: f64, epoch: usize) -> f64 {
    alpha.powi(epoch as i32)
}

/// `L_HA + α^epoch · L_SA`.
pub fn joint_loss(l_ha: f64, l_sa: f64, alpha: f64, epoch: usize) -> f64 {
    l_ha + joint_coefficient(alpha, epoch) * l_sa
}

/// Per-episode loss breakdown.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpisodeLoss {
    /// REINFORCE surrogate.
    pub policy: f64,
    /// Cross-entropy of the final prediction.
    pub classification: f64,
    /// Squared error of the baseline head.
    pub baseline: f64,
    pub bbox: f64,
    pub score: f64,
    /// Undiscounted sum of step rewards.
    pub reward: f64,
}

impl EpisodeLoss {
    pub fn theta(&self) -> f64 {
        self.policy + self.classification + self.baseline
    }

    pub fn hard_attention(&self, delta: f64) -> f64 {
        hard_attention_loss(self.theta(), self.bbox, self.score, delta)
    }

    pub fn add(&mut self, o: &EpisodeLoss) {
        self.policy += o.policy;
        self.classification += o.classification;
        self.baseline += o.baseline;
        self.bbox += o.bbox;
        self.score += o.score;
        self.reward += o.reward;
    }

    pub fn scale(&mut self, f: f64) {
        self.policy *= f;
        self.classification *= f;
        self.baseline *= f;
        self.bbox *= f;
        self.score *= f;
        self.reward *= f;
    }
}

/// Hard-attention loss of one episode against the tile's weak label, and
/// the upstream gradients that realise it. `box_side` is the glimpse side
/// in normalised tile units. The bounding-box term is evaluated on the
/// policy means (the sampled points carry no gradient).
pub fn episode_objective<S: Scalar>(ep: &Episode<S>, gt: usize, cfg: &LossConfig, box_side: f64) -> (EpisodeLoss, EpisodeGrads<S>) {
    let t = ep.steps.len();
    let classes = ep.steps[0].probs.len();
    let mut grads = EpisodeGrads::zeros(t, classes);
    let rewards: Vec<f64> = ep.steps.iter().map(|s| step_reward(s.prediction, gt)).collect();
    let returns = rewards_to_go(&rewards, cfg.policy_weight);
    let mut loss = EpisodeLoss { reward: rewards.iter().sum(), ..Default::default() };

    let r_s: Vec<S> = returns.iter().map(|&r| lit(r)).collect();
    let b_s: Vec<S> = ep.steps.iter().map(|s| s.baseline).collect();
    let lps: Vec<Option<S>> = ep.steps.iter().map(|s| s.policy.as_ref().map(|p| p.loc_log_prob)).collect();
    loss.policy = to_f64(reinforce_surrogate(&lps, &r_s, &b_s));
    for (i, c) in reinforce_coefficients(&r_s, &b_s).into_iter().enumerate() {
        if lps[i].is_some() {
            grads.d_log_prob[i] = c;
        }
    }

    let inv_t = 1.0 / t as f64;
    for (i, s) in ep.steps.iter().enumerate() {
        let diff = to_f64(s.baseline) - returns[i];
        loss.baseline += diff * diff * inv_t;
        grads.d_baseline[i] = lit(2.0 * diff * inv_t);
    }

    let (ce, d_ce) = cross_entropy(ep.final_probs(), gt);
    loss.classification = to_f64(ce);
    for (a, b) in grads.d_logits[t - 1].iter_mut().zip(&d_ce) {
        *a += *b;
    }

    let delta: S = lit(cfg.delta);
    for (i, s) in ep.steps.iter().enumerate() {
        loss.score += to_f64(expected_score_distance(&s.probs, gt)) * inv_t;
        let g = expected_score_distance_logit_grad(&s.probs, gt);
        for (a, b) in grads.d_logits[i].iter_mut().zip(&g) {
            *a += delta * *b * lit(inv_t);
        }
    }

    if t >= 2 {
        let mut locs = vec![ep.steps[0].loc];
        locs.extend(ep.steps[..t - 1].iter().map(|s| {
            let m = s.policy.as_ref().unwrap().loc_mean;
            (to_f64(m.0), to_f64(m.1))
        }));
        loss.bbox = bbox_overlap_loss(&locs, box_side).unwrap_or(0.0);
        let g = bbox_overlap_grad(&locs, box_side);
        for i in 0..t - 1 {
            grads.d_loc_mean[i] = (delta * lit(g[i + 1].0), delta * lit(g[i + 1].1));
        }
    }
    (loss, grads)
}
