//! Counterfactual advantages, generalized advantage estimation, TD(λ)
//! critic targets and the two training losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::AgentRollout;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageMode {
    /// GAE over one-step counterfactual advantages, TD(λ) targets.
    Sociallight,
    /// Per-step `Q[a] - <π, Q>`, one-step targets.
    RawComa,
    /// State-value actor-critic on the agent's own reward.
    A3cLocal,
    /// State-value actor-critic on the neighborhood reward.
    A3cNeighborhood,
}

impl AdvantageMode {
    pub const ALL: [AdvantageMode; 4] = [
        AdvantageMode::Sociallight,
        AdvantageMode::RawComa,
        AdvantageMode::A3cLocal,
        AdvantageMode::A3cNeighborhood,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AdvantageMode::Sociallight => "sociallight",
            AdvantageMode::RawComa => "raw_coma",
            AdvantageMode::A3cLocal => "a3c_local",
            AdvantageMode::A3cNeighborhood => "a3c_neighborhood",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Whether the critic trains its state-value head rather than the
    /// per-action outputs.
    pub fn uses_value_head(self) -> bool {
        matches!(self, AdvantageMode::A3cLocal | AdvantageMode::A3cNeighborhood)
    }

    /// Whether the critic is conditioned on neighbor actions.
    pub fn uses_neighbor_actions(self) -> bool {
        !self.uses_value_head()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdvantageConfig {
    pub gamma: f64,
    pub delta: f64,
    pub lambda: f64,
    pub mode: AdvantageMode,
    /// Entropy bonus at the start of training.
    pub entropy_coef: f64,
    /// Entropy bonus reached at the end of the episode budget.
    pub entropy_coef_final: f64,
    /// Multiplier applied to rewards before any return computation.
    pub reward_scale: f64,
}

impl Default for AdvantageConfig {
    fn default() -> Self {
        AdvantageConfig {
            gamma: 0.99,
            delta: 0.95,
            lambda: 0.95,
            mode: AdvantageMode::Sociallight,
            entropy_coef: 0.01,
            entropy_coef_final: 0.001,
            reward_scale: 0.01,
        }
    }
}

impl AdvantageConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            out.push(format!("advantage.gamma must be in (0, 1], got {}", self.gamma));
        }
        for (name, v) in [("delta", self.delta), ("lambda", self.lambda)] {
            if !(0.0..=1.0).contains(&v) {
                out.push(format!("advantage.{name} must be in [0, 1], got {v}"));
            }
        }
        for (name, v) in [
            ("entropy_coef", self.entropy_coef),
            ("entropy_coef_final", self.entropy_coef_final),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                out.push(format!("advantage.{name} must be >= 0, got {v}"));
            }
        }
        if !(self.reward_scale > 0.0 && self.reward_scale.is_finite()) {
            out.push(format!("advantage.reward_scale must be > 0, got {}", self.reward_scale));
        }
        out
    }

    /// Linearly annealed entropy coefficient at `progress` in [0, 1].
    pub fn entropy_at(&self, progress: f64) -> f64 {
        let p = progress.clamp(0.0, 1.0);
        self.entropy_coef + (self.entropy_coef_final - self.entropy_coef) * p
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdvantageResult {
    pub advantages: Vec<f64>,
    pub targets: Vec<f64>,
    /// Per-step baseline: `<π, Q>` or the state value.
    pub baselines: Vec<f64>,
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::WidthMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(())
}

/// `<π, Q>`: the critic's value with the agent's own action marginalized.
pub fn counterfactual_baseline(q: &[f64], pi: &[f64]) -> Result<f64> {
    check_len(q, pi)?;
    Ok(q.iter().zip(pi).map(|(a, b)| a * b).sum())
}

pub fn coma_advantage(q: &[f64], pi: &[f64], a: usize) -> Result<f64> {
    let b = counterfactual_baseline(q, pi)?;
    let qa = q.get(a).ok_or(Error::PhaseOutOfRange { phase: a, len: q.len() })?;
    Ok(qa - b)
}

/// `r + γ<π', Q'> - <π, Q>`, with the bootstrap dropped on terminal steps.
pub fn td1_cf_advantage(
    r: f64,
    q_t: &[f64],
    pi_t: &[f64],
    q_next: &[f64],
    pi_next: &[f64],
    gamma: f64,
    terminal: bool,
) -> Result<f64> {
    let head = counterfactual_baseline(q_t, pi_t)?;
    let tail = if terminal {
        0.0
    } else {
        counterfactual_baseline(q_next, pi_next)?
    };
    Ok(r + gamma * tail - head)
}

pub fn nstep_cf_advantage(
    rewards: &[f64],
    q_t: &[f64],
    pi_t: &[f64],
    q_tn: &[f64],
    pi_tn: &[f64],
    gamma: f64,
    n: usize,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    if rewards.len() < n {
        return Err(Error::InvalidArgument(format!(
            "{n}-step advantage needs {n} rewards, got {}",
            rewards.len()
        )));
    }
    let mut ret = 0.0;
    let mut disc = 1.0;
    for &r in &rewards[..n] {
        ret += disc * r;
        disc *= gamma;
    }
    Ok(ret + disc * counterfactual_baseline(q_tn, pi_tn)? - counterfactual_baseline(q_t, pi_t)?)
}

/// `A_t = td_t + γδ A_{t+1}`, `A_T = 0`.
pub fn gae(td: &[f64], gamma: f64, delta: f64) -> Vec<f64> {
    let mut out = vec![0.0; td.len()];
    let mut acc = 0.0;
    for t in (0..td.len()).rev() {
        acc = td[t] + gamma * delta * acc;
        out[t] = acc;
    }
    out
}

/// λ-returns `G_t = r_t + γ((1-λ) v_{t+1} + λ G_{t+1})` with `G_T = v_T`.
///
/// `next_values[t]` is the bootstrap value of the state after step `t`;
/// the last entry is the tail value (0 for a terminal rollout). The final
/// available n-step return absorbs the remaining λ mass.
pub fn lambda_returns(rewards: &[f64], next_values: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    check_len(rewards, next_values)?;
    let t_len = rewards.len();
    let mut out = vec![0.0; t_len];
    let mut g = match next_values.last() {
        Some(&v) => v,
        None => return Ok(out),
    };
    for t in (0..t_len).rev() {
        let v = next_values[t];
        let mix = if t + 1 == t_len { v } else { (1.0 - lambda) * v + lambda * g };
        g = rewards[t] + gamma * mix;
        out[t] = g;
    }
    Ok(out)
}

/// One step of an agent's trajectory as seen by the counterfactual critic.
#[derive(Clone, Copy, Debug)]
pub struct CfStep<'a> {
    pub reward: f64,
    pub q: &'a [f64],
    pub pi: &'a [f64],
}

/// Per-step baselines plus the tail baseline (0 when terminal).
fn cf_baselines(steps: &[CfStep], bootstrap: Option<(&[f64], &[f64])>, terminal: bool) -> Result<(Vec<f64>, f64)> {
    let b = steps
        .iter()
        .map(|s| counterfactual_baseline(s.q, s.pi))
        .collect::<Result<Vec<_>>>()?;
    let tail = if terminal {
        0.0
    } else {
        let (q, pi) = bootstrap
            .ok_or_else(|| Error::InvalidArgument("truncated rollout requires a bootstrap record".into()))?;
        counterfactual_baseline(q, pi)?
    };
    Ok((b, tail))
}

fn shifted(values: &[f64], tail: f64) -> Vec<f64> {
    let mut next: Vec<f64> = values.iter().skip(1).copied().collect();
    next.push(tail);
    next
}

/// GAE over one-step counterfactual advantages.
pub fn gae_cf_advantages(
    steps: &[CfStep],
    bootstrap: Option<(&[f64], &[f64])>,
    terminal: bool,
    gamma: f64,
    delta: f64,
) -> Result<Vec<f64>> {
    let (b, tail) = cf_baselines(steps, bootstrap, terminal)?;
    let next = shifted(&b, tail);
    let td: Vec<f64> = steps
        .iter()
        .zip(b.iter().zip(&next))
        .map(|(s, (h, n))| s.reward + gamma * n - h)
        .collect();
    Ok(gae(&td, gamma, delta))
}

/// TD(λ) critic targets bootstrapped with future counterfactual baselines.
pub fn critic_targets_td_lambda(
    steps: &[CfStep],
    bootstrap: Option<(&[f64], &[f64])>,
    terminal: bool,
    gamma: f64,
    lambda: f64,
) -> Result<Vec<f64>> {
    let (b, tail) = cf_baselines(steps, bootstrap, terminal)?;
    let rewards: Vec<f64> = steps.iter().map(|s| s.reward).collect();
    lambda_returns(&rewards, &shifted(&b, tail), gamma, lambda)
}

pub fn critic_target_td1(
    steps: &[CfStep],
    bootstrap: Option<(&[f64], &[f64])>,
    terminal: bool,
    gamma: f64,
) -> Result<Vec<f64>> {
    critic_targets_td_lambda(steps, bootstrap, terminal, gamma, 0.0)
}

/// `(1/T) Σ (Q_t[a_t] - G_t)^2` and its gradient with respect to each
/// `Q_t` (nonzero only at the taken action).
pub fn critic_loss(q_vecs: &[Vec<f64>], actions: &[usize], targets: &[f64]) -> Result<(f64, Vec<Vec<f64>>)> {
    let t_len = q_vecs.len();
    if actions.len() != t_len || targets.len() != t_len {
        return Err(Error::Shape("critic loss inputs must align".into()));
    }
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(t_len);
    for ((q, &a), &g) in q_vecs.iter().zip(actions).zip(targets) {
        let qa = *q.get(a).ok_or(Error::PhaseOutOfRange { phase: a, len: q.len() })?;
        let err = qa - g;
        loss += err * err;
        let mut d = vec![0.0; q.len()];
        d[a] = 2.0 * err / t_len as f64;
        grads.push(d);
    }
    Ok((loss / t_len.max(1) as f64, grads))
}

pub fn entropy(pi: &[f64]) -> f64 {
    -pi.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// `-Σ log π_t(a_t) A_t - β Σ H(π_t)` and its gradient with respect to
/// each step's softmax logits.
pub fn policy_loss(
    pi_vecs: &[Vec<f64>],
    actions: &[usize],
    advantages: &[f64],
    entropy_coef: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if actions.len() != pi_vecs.len() || advantages.len() != pi_vecs.len() {
        return Err(Error::Shape("policy loss inputs must align".into()));
    }
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(pi_vecs.len());
    for (t, ((pi, &a), &adv)) in pi_vecs.iter().zip(actions).zip(advantages).enumerate() {
        let pa = *pi.get(a).ok_or(Error::PhaseOutOfRange { phase: a, len: pi.len() })?;
        if pa <= 0.0 {
            return Err(Error::NonFinite(format!("step {t}: log of zero probability")));
        }
        let h = entropy(pi);
        loss += -pa.ln() * adv - entropy_coef * h;
        let d = pi
            .iter()
            .enumerate()
            .map(|(k, &p)| {
                let onehot = if k == a { 1.0 } else { 0.0 };
                let ent = if p > 0.0 { p * (p.ln() + h) } else { 0.0 };
                adv * (p - onehot) + entropy_coef * ent
            })
            .collect();
        grads.push(d);
    }
    Ok((loss, grads))
}

/// Advantages and critic targets for one agent's rollout under `cfg.mode`.
pub fn variant_advantages(rollout: &AgentRollout, terminal: bool, cfg: &AdvantageConfig) -> Result<AdvantageResult> {
    let recs = &rollout.records;
    if !terminal && rollout.bootstrap.is_none() {
        return Err(Error::InvalidArgument("truncated rollout requires a bootstrap record".into()));
    }
    let scale = cfg.reward_scale;
    match cfg.mode {
        AdvantageMode::Sociallight | AdvantageMode::RawComa => {
            let steps: Vec<CfStep> = recs
                .iter()
                .map(|r| CfStep {
                    reward: r.neighborhood_reward * scale,
                    q: &r.critic_vec,
                    pi: &r.policy_dist,
                })
                .collect();
            let boot = rollout
                .bootstrap
                .as_ref()
                .map(|b| (b.critic_vec.as_slice(), b.policy_dist.as_slice()));
            let baselines = cf_baselines(&steps, boot, terminal)?.0;
            if cfg.mode == AdvantageMode::Sociallight {
                Ok(AdvantageResult {
                    advantages: gae_cf_advantages(&steps, boot, terminal, cfg.gamma, cfg.delta)?,
                    targets: critic_targets_td_lambda(&steps, boot, terminal, cfg.gamma, cfg.lambda)?,
                    baselines,
                })
            } else {
                let advantages = recs
                    .iter()
                    .map(|r| coma_advantage(&r.critic_vec, &r.policy_dist, r.action))
                    .collect::<Result<Vec<_>>>()?;
                Ok(AdvantageResult {
                    advantages,
                    targets: critic_target_td1(&steps, boot, terminal, cfg.gamma)?,
                    baselines,
                })
            }
        }
        AdvantageMode::A3cLocal | AdvantageMode::A3cNeighborhood => {
            let rewards: Vec<f64> = recs
                .iter()
                .map(|r| {
                    scale
                        * if cfg.mode == AdvantageMode::A3cLocal {
                            r.local_reward
                        } else {
                            r.neighborhood_reward
                        }
                })
                .collect();
            let values: Vec<f64> = recs.iter().map(|r| r.value).collect();
            let tail = match (&rollout.bootstrap, terminal) {
                (_, true) => 0.0,
                (Some(b), false) => b.value,
                (None, false) => unreachable!("checked above"),
            };
            let next = shifted(&values, tail);
            let td: Vec<f64> = rewards
                .iter()
                .zip(values.iter().zip(&next))
                .map(|(r, (v, n))| r + cfg.gamma * n - v)
                .collect();
            Ok(AdvantageResult {
                advantages: gae(&td, cfg.gamma, cfg.delta),
                targets: lambda_returns(&rewards, &next, cfg.gamma, cfg.lambda)?,
                baselines: values,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{BootstrapRecord, TransitionRecord};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn random_dist(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|x| x / s).collect()
    }

    // Direct double sum over the one-step advantages.
    fn gae_oracle(td: &[f64], gamma: f64, delta: f64) -> Vec<f64> {
        (0..td.len())
            .map(|t| {
                (t..td.len())
                    .map(|k| (gamma * delta).powi((k - t) as i32) * td[k])
                    .sum()
            })
            .collect()
    }

    // Explicit mixture of n-step returns with the leftover weight on the
    // longest one.
    fn lambda_oracle(rewards: &[f64], b: &[f64], tail: f64, gamma: f64, lambda: f64) -> Vec<f64> {
        let t_len = rewards.len();
        let value_at = |k: usize| if k == t_len { tail } else { b[k] };
        (0..t_len)
            .map(|t| {
                let max_n = t_len - t;
                let nstep = |n: usize| {
                    (0..n).map(|l| gamma.powi(l as i32) * rewards[t + l]).sum::<f64>()
                        + gamma.powi(n as i32) * value_at(t + n)
                };
                let mut total = 0.0;
                for n in 1..max_n {
                    total += (1.0 - lambda) * lambda.powi(n as i32 - 1) * nstep(n);
                }
                total + lambda.powi(max_n as i32 - 1) * nstep(max_n)
            })
            .collect()
    }

    #[test]
    fn baseline_examples() {
        assert_eq!(counterfactual_baseline(&[1.0, 3.0], &[0.5, 0.5]).unwrap(), 2.0);
        assert_eq!(counterfactual_baseline(&[4.0; 3], &[0.2, 0.3, 0.5]).unwrap(), 4.0);
        assert_eq!(counterfactual_baseline(&[1.0, 7.0, 3.0], &[0.0, 1.0, 0.0]).unwrap(), 7.0);
        assert!(counterfactual_baseline(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn coma_examples() {
        assert_eq!(coma_advantage(&[1.0, 3.0], &[0.5, 0.5], 1).unwrap(), 1.0);
        assert_eq!(coma_advantage(&[2.0, 5.0], &[0.0, 1.0], 1).unwrap(), 0.0);
        assert!(coma_advantage(&[1.0, 3.0], &[0.5, 0.5], 2).is_err());
    }

    #[test]
    fn baseline_has_zero_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let n = rng.random_range(1..=8);
            let pi = random_dist(&mut rng, n);
            let q: Vec<f64> = (0..n).map(|_| rng.random_range(-50.0..50.0)).collect();
            let s: f64 = (0..n).map(|a| pi[a] * coma_advantage(&q, &pi, a).unwrap()).sum();
            assert!(s.abs() < 1e-12, "{s}");
        }
    }

    #[test]
    fn td1_examples() {
        // <π,Q> = 2, <π',Q'> = 4
        let (q, pi) = ([1.0, 3.0], [0.5, 0.5]);
        let (q2, pi2) = ([4.0, 4.0], [0.3, 0.7]);
        let v = td1_cf_advantage(1.0, &q, &pi, &q2, &pi2, 0.9, false).unwrap();
        assert!(close(v, 2.6, 1e-12));
        assert_eq!(td1_cf_advantage(1.0, &q, &pi, &q2, &pi2, 0.9, true).unwrap(), -1.0);
        assert_eq!(td1_cf_advantage(1.0, &q, &pi, &q2, &pi2, 0.0, false).unwrap(), -1.0);
    }

    #[test]
    fn nstep_examples() {
        let (q, pi) = ([1.0, 3.0], [0.5, 0.5]);
        let (q2, pi2) = ([4.0, 4.0], [0.3, 0.7]);
        let v = nstep_cf_advantage(&[1.0, 1.0], &q, &pi, &q2, &pi2, 0.5, 2).unwrap();
        assert!(close(v, 0.5, 1e-12));
        let one = nstep_cf_advantage(&[1.0], &q, &pi, &q2, &pi2, 0.9, 1).unwrap();
        assert_eq!(one, td1_cf_advantage(1.0, &q, &pi, &q2, &pi2, 0.9, false).unwrap());
        let zero = nstep_cf_advantage(&[0.0, 0.0, 0.0], &q, &pi, &q, &pi, 1.0, 3).unwrap();
        assert_eq!(zero, 0.0);
        assert!(nstep_cf_advantage(&[1.0], &q, &pi, &q2, &pi2, 0.9, 2).is_err());
    }

    #[test]
    fn gae_examples() {
        assert_eq!(gae(&[1.0, 2.0], 1.0, 0.5), vec![2.0, 2.0]);
        assert_eq!(gae(&[1.0, -2.0, 3.0], 0.9, 0.0), vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn gae_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let grid = [0.0, 0.5, 0.9, 1.0];
        for _ in 0..50 {
            let t_len = rng.random_range(1..=10);
            let td: Vec<f64> = (0..t_len).map(|_| rng.random_range(-5.0..5.0)).collect();
            for &g in &grid {
                for &d in &grid {
                    for (a, b) in gae(&td, g, d).iter().zip(gae_oracle(&td, g, d)) {
                        assert!(close(*a, b, 1e-10));
                    }
                }
            }
        }
    }

    #[test]
    fn lambda_returns_match_mixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let grid = [0.0, 0.5, 0.9, 1.0];
        for _ in 0..50 {
            let t_len = rng.random_range(1..=10);
            let r: Vec<f64> = (0..t_len).map(|_| rng.random_range(-3.0..3.0)).collect();
            let b: Vec<f64> = (0..t_len).map(|_| rng.random_range(-10.0..10.0)).collect();
            let tail = rng.random_range(-10.0..10.0);
            for &g in &grid[1..] {
                for &l in &grid {
                    let got = lambda_returns(&r, &shifted(&b, tail), g, l).unwrap();
                    for (a, e) in got.iter().zip(lambda_oracle(&r, &b, tail, g, l)) {
                        assert!(close(*a, e, 1e-10), "{a} vs {e}");
                    }
                }
            }
        }
    }

    #[test]
    fn lambda_limits() {
        let r = [1.0, 2.0, 3.0];
        let b = [5.0, 6.0, 7.0];
        let tail = 10.0;
        let g = 0.9;
        let td0 = lambda_returns(&r, &shifted(&b, tail), g, 0.0).unwrap();
        assert_eq!(td0, vec![1.0 + g * 6.0, 2.0 + g * 7.0, 3.0 + g * 10.0]);
        let mc = lambda_returns(&r, &shifted(&b, tail), g, 1.0).unwrap();
        let expect0 = 1.0 + g * 2.0 + g * g * 3.0 + g.powi(3) * tail;
        assert!(close(mc[0], expect0, 1e-12));
    }

    #[test]
    fn truncated_rollout_needs_bootstrap() {
        let q = [1.0, 2.0];
        let pi = [0.5, 0.5];
        let steps = [CfStep { reward: 1.0, q: &q, pi: &pi }];
        assert!(gae_cf_advantages(&steps, None, false, 0.9, 0.9).is_err());
        assert!(gae_cf_advantages(&steps, None, true, 0.9, 0.9).is_ok());
    }

    #[test]
    fn critic_loss_examples() {
        let (l, g) = critic_loss(&[vec![0.0, 1.0, 5.0]], &[1], &[3.0]).unwrap();
        assert_eq!(l, 4.0);
        assert_eq!(g[0], vec![0.0, -4.0, 0.0]);
        let (l, _) = critic_loss(&[vec![3.0], vec![2.0]], &[0, 0], &[3.0, 2.0]).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn critic_loss_gradient_matches_finite_difference() {
        let q = vec![vec![0.3, -1.2, 2.0], vec![1.1, 0.4, -0.7]];
        let actions = [2, 0];
        let targets = [1.5, -0.5];
        let (_, g) = critic_loss(&q, &actions, &targets).unwrap();
        let eps = 1e-6;
        for t in 0..2 {
            for k in 0..3 {
                let mut up = q.clone();
                up[t][k] += eps;
                let mut dn = q.clone();
                dn[t][k] -= eps;
                let fd = (critic_loss(&up, &actions, &targets).unwrap().0
                    - critic_loss(&dn, &actions, &targets).unwrap().0)
                    / (2.0 * eps);
                assert!(close(fd, g[t][k], 1e-6));
            }
        }
    }

    #[test]
    fn policy_loss_examples() {
        let (l, g) = policy_loss(&[vec![0.25; 4]], &[2], &[0.0], 0.0).unwrap();
        assert_eq!(l, 0.0);
        assert!(g[0].iter().all(|&x| x == 0.0));
        let (l, _) = policy_loss(&[vec![0.5, 0.5]], &[0], &[2.0], 0.0).unwrap();
        assert!(close(l, 2.0 * 2f64.ln(), 1e-12));
        assert!(policy_loss(&[vec![1.0, 0.0]], &[1], &[1.0], 0.0).is_err());
    }

    #[test]
    fn entropy_peaks_at_uniform() {
        let u = entropy(&[0.25; 4]);
        assert!(close(u, 4f64.ln(), 1e-12));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            assert!(entropy(&random_dist(&mut rng, 4)) <= u + 1e-12);
        }
    }

    #[test]
    fn policy_gradient_matches_logit_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let n = rng.random_range(2..=5);
            let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let a = rng.random_range(0..n);
            let adv = rng.random_range(-3.0..3.0);
            let beta = rng.random_range(0.0..0.1);
            let loss_at = |z: &[f64]| {
                let p = crate::nn::softmax_rows(z, n);
                policy_loss(&[p], &[a], &[adv], beta).unwrap().0
            };
            let p = crate::nn::softmax_rows(&logits, n);
            let (_, g) = policy_loss(&[p.clone()], &[a], &[adv], beta).unwrap();
            for k in 0..n {
                let mut up = logits.clone();
                up[k] += 1e-6;
                let mut dn = logits.clone();
                dn[k] -= 1e-6;
                let fd = (loss_at(&up) - loss_at(&dn)) / 2e-6;
                assert!(close(fd, g[0][k], 1e-7), "{fd} vs {}", g[0][k]);
            }
            // without entropy the gradient is exactly (π - onehot) A
            let (_, g0) = policy_loss(&[p.clone()], &[a], &[adv], 0.0).unwrap();
            for k in 0..n {
                let e = if k == a { 1.0 } else { 0.0 };
                assert!(close(g0[0][k], (p[k] - e) * adv, 1e-15));
            }
        }
    }

    fn rollout(rng: &mut ChaCha8Rng, t_len: usize, n: usize, truncated: bool) -> AgentRollout {
        let mut records = Vec::new();
        for t in 0..t_len {
            records.push(TransitionRecord {
                t,
                z_aug: vec![],
                action: rng.random_range(0..n),
                neighbor_actions: [None; 4],
                policy_dist: random_dist(rng, n),
                critic_vec: (0..n).map(|_| rng.random_range(-5.0..5.0)).collect(),
                value: rng.random_range(-5.0..5.0),
                local_reward: rng.random_range(-3.0..0.0),
                neighborhood_reward: rng.random_range(-9.0..0.0),
            });
        }
        let bootstrap = truncated.then(|| BootstrapRecord {
            z_aug: vec![],
            neighbor_actions: [None; 4],
            policy_dist: random_dist(rng, n),
            critic_vec: (0..n).map(|_| rng.random_range(-5.0..5.0)).collect(),
            value: rng.random_range(-5.0..5.0),
        });
        AgentRollout { records, bootstrap }
    }

    #[test]
    fn sociallight_collapses_to_one_step_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ro = rollout(&mut rng, 6, 4, true);
        let cfg = AdvantageConfig {
            delta: 0.0,
            lambda: 0.0,
            reward_scale: 1.0,
            ..Default::default()
        };
        let res = variant_advantages(&ro, false, &cfg).unwrap();
        for t in 0..6 {
            let r = &ro.records[t];
            let (qn, pn) = match ro.records.get(t + 1) {
                Some(n) => (&n.critic_vec, &n.policy_dist),
                None => {
                    let b = ro.bootstrap.as_ref().unwrap();
                    (&b.critic_vec, &b.policy_dist)
                }
            };
            let a1 = td1_cf_advantage(r.neighborhood_reward, &r.critic_vec, &r.policy_dist, qn, pn, cfg.gamma, false)
                .unwrap();
            assert!(close(res.advantages[t], a1, 1e-12));
            let g = r.neighborhood_reward + cfg.gamma * counterfactual_baseline(qn, pn).unwrap();
            assert!(close(res.targets[t], g, 1e-12));
        }
    }

    #[test]
    fn raw_coma_differs_by_bootstrap_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ro = rollout(&mut rng, 5, 3, false);
        let base = AdvantageConfig {
            delta: 0.0,
            reward_scale: 1.0,
            ..Default::default()
        };
        let sl = variant_advantages(&ro, true, &base).unwrap();
        let rc = variant_advantages(
            &ro,
            true,
            &AdvantageConfig {
                mode: AdvantageMode::RawComa,
                ..base.clone()
            },
        )
        .unwrap();
        for t in 0..5 {
            let r = &ro.records[t];
            let future = ro.records.get(t + 1).map_or(0.0, |n| {
                counterfactual_baseline(&n.critic_vec, &n.policy_dist).unwrap()
            });
            let expect = r.neighborhood_reward + base.gamma * future - r.critic_vec[r.action];
            assert!(close(sl.advantages[t] - rc.advantages[t], expect, 1e-12));
        }
    }

    #[test]
    fn a3c_local_single_step_is_reward_minus_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ro = rollout(&mut rng, 1, 2, true);
        let cfg = AdvantageConfig {
            gamma: 0.0,
            mode: AdvantageMode::A3cLocal,
            reward_scale: 1.0,
            ..Default::default()
        };
        let res = variant_advantages(&ro, false, &cfg).unwrap();
        let r = &ro.records[0];
        assert!(close(res.advantages[0], r.local_reward - r.value, 1e-12));
        assert!(close(res.targets[0], r.local_reward, 1e-12));
    }

    #[test]
    fn reward_scale_scales_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut ro = rollout(&mut rng, 4, 3, false);
        for r in &mut ro.records {
            r.critic_vec.iter_mut().for_each(|q| *q = 0.0);
        }
        let cfg = |s| AdvantageConfig {
            reward_scale: s,
            ..Default::default()
        };
        let a = variant_advantages(&ro, true, &cfg(1.0)).unwrap();
        let b = variant_advantages(&ro, true, &cfg(0.5)).unwrap();
        for (x, y) in a.targets.iter().zip(&b.targets) {
            assert!(close(0.5 * x, *y, 1e-12));
        }
    }

    #[test]
    fn entropy_schedule_is_linear() {
        let c = AdvantageConfig::default();
        assert_eq!(c.entropy_at(0.0), 0.01);
        assert!(close(c.entropy_at(1.0), 0.001, 1e-15));
        assert!(close(c.entropy_at(0.5), 0.0055, 1e-15));
        assert!(close(c.entropy_at(2.0), 0.001, 1e-15));
    }
}
