//! Rollout workers, gradient computation, training schedules and
//! evaluation sweeps.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::advantage::{critic_loss, entropy, policy_loss, variant_advantages, AdvantageMode};
use crate::config::{ExperimentConfig, Schedule};
use crate::controllers::{sample_action, ActionMode, Controller};
use crate::env::{EnvConfig, Environment, FlowSource, GridEnv};
use crate::error::{Error, Result};
use crate::mdp::{
    augmented_width, encode_neighbor_actions, neighbor_actions, AgentRollout, BootstrapRecord, Observation,
    RolloutBuffer, TransitionRecord,
};
use crate::netmodel::{TrafficNetwork, NUM_SLOTS};
use crate::nn::{
    actor_spec, critic_spec, save_checkpoint, Checkpoint, GradientSet, Mlp, ModelGradients, ModelParams,
    ParameterStore,
};
use crate::sim::EpisodeMetrics;

/// Everything derived from a config that training and evaluation share.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub net: Arc<TrafficNetwork>,
    pub source: FlowSource,
    pub num_actions: usize,
    pub obs_width: usize,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let net = config.network.build()?;
        let source = config.flow_source()?;
        let obs_width = config.observation.width_for(&net);
        let num_actions = net.intersections[0].num_phases();
        config.controller.plan.validate(num_actions)?;
        let exp = Experiment {
            config,
            net: Arc::new(net),
            source,
            num_actions,
            obs_width,
        };
        // surfaces shape problems (mixed phase tables) early
        exp.new_env()?;
        Ok(exp)
    }

    pub fn env_config(&self) -> EnvConfig {
        self.config.env_config()
    }

    pub fn new_env(&self) -> Result<GridEnv> {
        GridEnv::new(Arc::clone(&self.net), self.source.clone(), self.env_config())
    }

    pub fn aug_width(&self) -> usize {
        augmented_width(self.obs_width)
    }

    pub fn mode(&self) -> AdvantageMode {
        self.config.advantage.mode
    }

    pub fn init_params(&self) -> Result<ModelParams> {
        let m = &self.config.model;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.training.seed, u64::MAX, 0));
        let actor = Mlp::init(
            actor_spec(self.aug_width(), &m.actor_hidden, m.activation, self.num_actions),
            &mut rng,
        )?;
        let critic = Mlp::init(
            critic_spec(self.aug_width(), &m.critic_hidden, m.activation, self.num_actions),
            &mut rng,
        )?;
        Ok(ModelParams { actor, critic })
    }

    pub fn network_hash(&self) -> String {
        self.net.digest()
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn derive_seed(base: u64, worker: u64, episode: u64) -> u64 {
    splitmix(base ^ splitmix(worker ^ splitmix(episode)))
}

const EVAL_BIT: u64 = 1 << 63;

/// Seed for a training episode; the top bit is always clear.
pub fn training_seed(base: u64, worker: usize, episode: usize) -> u64 {
    derive_seed(base, worker as u64, episode as u64) & !EVAL_BIT
}

/// Held-out evaluation seeds; the top bit is always set, so they never
/// coincide with training seeds.
pub fn eval_seeds(base: u64, n: usize) -> Vec<u64> {
    (0..n)
        .map(|k| derive_seed(base ^ 0x5EED_E7A1, 0, k as u64) | EVAL_BIT)
        .collect()
}

/// Critic input: augmented observation then the one-hot neighbor actions
/// (all zero for modes whose critic ignores them).
fn critic_input(out: &mut Vec<f64>, z_aug: &[f64], nbr: &[Option<usize>; NUM_SLOTS], num_actions: usize, mode: AdvantageMode) {
    out.extend_from_slice(z_aug);
    if mode.uses_neighbor_actions() {
        out.extend(encode_neighbor_actions(nbr, num_actions));
    } else {
        out.extend(std::iter::repeat_n(0.0, NUM_SLOTS * num_actions));
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Summary of a finished training episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeSummary {
    pub episode: usize,
    pub worker: usize,
    pub seed: u64,
    /// Mean over agents of the undiscounted local-reward return.
    pub mean_return: f64,
    pub metrics: EpisodeMetrics,
}

pub struct RolloutOutcome {
    pub buffer: RolloutBuffer,
    pub finished: Option<EpisodeSummary>,
}

/// A rollout worker with its own simulator instance.
pub struct Worker {
    pub id: usize,
    env: GridEnv,
    rng: ChaCha8Rng,
    feats: Vec<Vec<f64>>,
    next_actions: Option<Vec<usize>>,
    episode: Option<(usize, u64)>,
    ep_return: f64,
}

impl Worker {
    pub fn new(id: usize, exp: &Experiment) -> Result<Self> {
        Ok(Worker {
            id,
            env: exp.new_env()?,
            rng: ChaCha8Rng::seed_from_u64(0),
            feats: Vec::new(),
            next_actions: None,
            episode: None,
            ep_return: 0.0,
        })
    }

    pub fn is_idle(&self) -> bool {
        self.episode.is_none()
    }

    pub fn env(&self) -> &GridEnv {
        &self.env
    }

    /// Resets the simulator for global episode `episode`.
    pub fn begin_episode(&mut self, episode: usize, base_seed: u64) -> Result<()> {
        let seed = training_seed(base_seed, self.id, episode);
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        let obs = self.env.reset(seed)?;
        self.feats = self.env.augmented_features(&obs)?;
        self.next_actions = None;
        self.episode = Some((episode, seed));
        self.ep_return = 0.0;
        Ok(())
    }

    /// Policies, values and (possibly) actions for every agent at the
    /// current state.
    fn evaluate_state(&mut self, params: &ModelParams, mode: AdvantageMode, num_actions: usize) -> Result<StepEval> {
        let n = self.feats.len();
        let flat: Vec<f64> = self.feats.concat();
        let actor = params.actor.forward(&flat, n)?;
        let pis: Vec<Vec<f64>> = (0..n).map(|i| actor.row(i).to_vec()).collect();
        let actions = match self.next_actions.take() {
            Some(a) => a,
            None => pis
                .iter()
                .map(|p| sample_action(p, &mut self.rng))
                .collect::<Result<Vec<_>>>()?,
        };
        let net = self.env.net();
        let mut nbrs = Vec::with_capacity(n);
        let mut input = Vec::with_capacity(n * params.critic.input_width());
        for i in 0..n {
            let nb = neighbor_actions(net, i, &actions)?;
            critic_input(&mut input, &self.feats[i], &nb, num_actions, mode);
            nbrs.push(nb);
        }
        let critic = params.critic.forward(&input, n)?;
        let qs = (0..n).map(|i| critic.row(i)[..num_actions].to_vec()).collect();
        let vs = (0..n).map(|i| critic.row(i)[num_actions]).collect();
        Ok(StepEval {
            pis,
            actions,
            nbrs,
            qs,
            vs,
        })
    }

    /// Runs up to `t_len` steps, stopping early at the episode end.
    pub fn run_rollout(&mut self, params: &ModelParams, exp: &Experiment, t_len: usize) -> Result<RolloutOutcome> {
        let Some((episode, seed)) = self.episode else {
            return Err(Error::InvalidArgument(format!("worker {} has no active episode", self.id)));
        };
        let n = self.env.num_agents();
        let a = exp.num_actions;
        let mode = exp.mode();
        let mut agents: Vec<AgentRollout> = (0..n).map(|_| AgentRollout::default()).collect();
        let mut done = false;
        for t in 0..t_len {
            let ev = self.evaluate_state(params, mode, a)?;
            let step = self.env.step(&ev.actions)?;
            self.ep_return += mean(&step.local_rewards);
            for (i, agent) in agents.iter_mut().enumerate() {
                agent.records.push(TransitionRecord {
                    t,
                    z_aug: std::mem::take(&mut self.feats[i]),
                    action: ev.actions[i],
                    neighbor_actions: ev.nbrs[i],
                    policy_dist: ev.pis[i].clone(),
                    critic_vec: ev.qs[i].clone(),
                    value: ev.vs[i],
                    local_reward: step.local_rewards[i],
                    neighborhood_reward: step.neighborhood_rewards[i],
                });
            }
            self.feats = self.env.augmented_features(&step.observations)?;
            if step.done {
                done = true;
                break;
            }
        }
        if done {
            let summary = EpisodeSummary {
                episode,
                worker: self.id,
                seed,
                mean_return: self.ep_return,
                metrics: self.env.episode_metrics()?,
            };
            self.episode = None;
            return Ok(RolloutOutcome {
                buffer: RolloutBuffer { agents, terminal: true },
                finished: Some(summary),
            });
        }
        // The bootstrap actions are the ones executed at the next step.
        let ev = self.evaluate_state(params, mode, a)?;
        for (i, agent) in agents.iter_mut().enumerate() {
            agent.bootstrap = Some(BootstrapRecord {
                z_aug: self.feats[i].clone(),
                neighbor_actions: ev.nbrs[i],
                policy_dist: ev.pis[i].clone(),
                critic_vec: ev.qs[i].clone(),
                value: ev.vs[i],
            });
        }
        self.next_actions = Some(ev.actions);
        Ok(RolloutOutcome {
            buffer: RolloutBuffer { agents, terminal: false },
            finished: None,
        })
    }
}

struct StepEval {
    pis: Vec<Vec<f64>>,
    actions: Vec<usize>,
    nbrs: Vec<[Option<usize>; NUM_SLOTS]>,
    qs: Vec<Vec<f64>>,
    vs: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct GradientStats {
    pub policy_loss: f64,
    pub critic_loss: f64,
    pub mean_entropy: f64,
}

/// Actor and critic gradients for a rollout, summed over agents and
/// normalized by agent count times rollout length.
pub fn compute_gradients(
    buffer: &RolloutBuffer,
    params: &ModelParams,
    mode: AdvantageMode,
    adv_cfg: &crate::advantage::AdvantageConfig,
    entropy_coef: f64,
) -> Result<(ModelGradients, GradientStats)> {
    let a = params.actor.output_width();
    buffer.validate(a)?;
    let cfg = crate::advantage::AdvantageConfig {
        mode,
        ..adv_cfg.clone()
    };
    let n = buffer.agents.len();
    let t_len = buffer.len();
    let rows = n * t_len;
    if rows == 0 {
        return Ok((ModelGradients::zeros(params), GradientStats::default()));
    }
    let norm = 1.0 / rows as f64;

    let mut results = Vec::with_capacity(n);
    for (i, agent) in buffer.agents.iter().enumerate() {
        let res = variant_advantages(agent, buffer.terminal, &cfg)?;
        for t in 0..t_len {
            if !res.advantages[t].is_finite() || !res.targets[t].is_finite() {
                let r = &agent.records[t];
                return Err(Error::NonFinite(format!(
                    "advantage/target at agent {i} step {t}: action {}, local reward {}, neighborhood reward {}, \
                     policy {:?}, critic {:?}, value {}, advantage {}, target {}",
                    r.action,
                    r.local_reward,
                    r.neighborhood_reward,
                    r.policy_dist,
                    r.critic_vec,
                    r.value,
                    res.advantages[t],
                    res.targets[t]
                )));
            }
        }
        results.push(res);
    }

    let mut actor_in = Vec::with_capacity(rows * params.actor.input_width());
    let mut critic_in = Vec::with_capacity(rows * params.critic.input_width());
    for agent in &buffer.agents {
        for r in &agent.records {
            actor_in.extend_from_slice(&r.z_aug);
            critic_input(&mut critic_in, &r.z_aug, &r.neighbor_actions, a, mode);
        }
    }
    let actor_cache = params.actor.forward(&actor_in, rows)?;
    let critic_cache = params.critic.forward(&critic_in, rows)?;

    let mut d_logits = Vec::with_capacity(rows * a);
    let mut d_critic = Vec::with_capacity(rows * (a + 1));
    let mut stats = GradientStats::default();
    for (i, agent) in buffer.agents.iter().enumerate() {
        let base = i * t_len;
        let pis: Vec<Vec<f64>> = (0..t_len).map(|t| actor_cache.row(base + t).to_vec()).collect();
        let actions: Vec<usize> = agent.records.iter().map(|r| r.action).collect();
        let (pl, g) = policy_loss(&pis, &actions, &results[i].advantages, entropy_coef)?;
        stats.policy_loss += pl * norm;
        stats.mean_entropy += pis.iter().map(|p| entropy(p)).sum::<f64>() * norm;
        for row in g {
            d_logits.extend(row.into_iter().map(|x| x * norm));
        }
        let outs: Vec<Vec<f64>> = (0..t_len).map(|t| critic_cache.row(base + t).to_vec()).collect();
        let idx: Vec<usize> = if mode.uses_value_head() {
            vec![a; t_len]
        } else {
            actions
        };
        let (cl, g) = critic_loss(&outs, &idx, &results[i].targets)?;
        stats.critic_loss += cl / n as f64;
        for row in g {
            d_critic.extend(row.into_iter().map(|x| x / n as f64));
        }
    }
    if !stats.policy_loss.is_finite() || !stats.critic_loss.is_finite() {
        return Err(Error::NonFinite(format!("loss: {stats:?}")));
    }
    let actor = params.actor.backward_from_logits(&actor_cache, &d_logits)?;
    let critic = params.critic.backward(&critic_cache, &d_critic)?;
    Ok((ModelGradients { actor, critic }, stats))
}

/// Metric values as reals so that means over runs share the type.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub mean_return: f64,
    pub avg_queue_length: f64,
    pub avg_speed: f64,
    pub avg_intersection_delay: f64,
    pub avg_cumulative_delay: f64,
    pub avg_trip_time: Option<f64>,
    pub vehicles_entered: f64,
    pub vehicles_exited: f64,
}

impl MetricValues {
    pub fn from_episode(mean_return: f64, m: &EpisodeMetrics) -> Self {
        MetricValues {
            mean_return,
            avg_queue_length: m.avg_queue_length,
            avg_speed: m.avg_speed,
            avg_intersection_delay: m.avg_intersection_delay,
            avg_cumulative_delay: m.avg_cumulative_delay,
            avg_trip_time: m.avg_trip_time,
            vehicles_entered: m.vehicles_entered as f64,
            vehicles_exited: m.vehicles_exited as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub scenario: String,
    pub seed: u64,
    #[serde(flatten)]
    pub values: MetricValues,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub rows: Vec<EvalRow>,
    pub mean: MetricValues,
    /// Sample standard deviation (zero for a single row).
    pub std: MetricValues,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let m = mean(xs);
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64;
    (m, var.sqrt())
}

impl EvalTable {
    pub fn from_rows(rows: Vec<EvalRow>) -> Self {
        let col = |f: &dyn Fn(&MetricValues) -> Option<f64>| -> (Option<f64>, Option<f64>) {
            let xs: Vec<f64> = rows.iter().filter_map(|r| f(&r.values)).collect();
            if xs.is_empty() {
                return (None, None);
            }
            let (m, s) = mean_std(&xs);
            (Some(m), Some(s))
        };
        let full = |f: &dyn Fn(&MetricValues) -> f64| {
            let (m, s) = col(&|v| Some(f(v)));
            (m.unwrap_or(0.0), s.unwrap_or(0.0))
        };
        let ret = full(&|v| v.mean_return);
        let q = full(&|v| v.avg_queue_length);
        let sp = full(&|v| v.avg_speed);
        let idl = full(&|v| v.avg_intersection_delay);
        let cd = full(&|v| v.avg_cumulative_delay);
        let tt = col(&|v| v.avg_trip_time);
        let en = full(&|v| v.vehicles_entered);
        let ex = full(&|v| v.vehicles_exited);
        EvalTable {
            mean: MetricValues {
                mean_return: ret.0,
                avg_queue_length: q.0,
                avg_speed: sp.0,
                avg_intersection_delay: idl.0,
                avg_cumulative_delay: cd.0,
                avg_trip_time: tt.0,
                vehicles_entered: en.0,
                vehicles_exited: ex.0,
            },
            std: MetricValues {
                mean_return: ret.1,
                avg_queue_length: q.1,
                avg_speed: sp.1,
                avg_intersection_delay: idl.1,
                avg_cumulative_delay: cd.1,
                avg_trip_time: tt.1,
                vehicles_entered: en.1,
                vehicles_exited: ex.1,
            },
            rows,
        }
    }
}

/// A flow source evaluated over a list of seeds.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    pub source: FlowSource,
    pub seeds: Vec<u64>,
}

/// Runs one full episode under `controller` and returns its metrics.
pub fn run_episode(
    net: &Arc<TrafficNetwork>,
    source: &FlowSource,
    env_cfg: EnvConfig,
    controller: &Controller,
    seed: u64,
) -> Result<MetricValues> {
    let mut env = GridEnv::new(Arc::clone(net), source.clone(), env_cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut obs: Vec<Observation> = env.reset(seed)?;
    let mut ret = 0.0;
    loop {
        let joint = controller.act(&env, &obs, &mut rng)?;
        let step = env.step(&joint)?;
        ret += mean(&step.local_rewards);
        obs = step.observations;
        if step.done {
            break;
        }
    }
    Ok(MetricValues::from_episode(ret, &env.episode_metrics()?))
}

/// One row per (scenario, seed) plus mean and standard deviation.
pub fn evaluate(
    net: &Arc<TrafficNetwork>,
    env_cfg: EnvConfig,
    controller: &Controller,
    scenarios: &[Scenario],
) -> Result<EvalTable> {
    let mut rows = Vec::new();
    for sc in scenarios {
        for &seed in &sc.seeds {
            rows.push(EvalRow {
                scenario: sc.name.clone(),
                seed,
                values: run_episode(net, &sc.source, env_cfg, controller, seed)?,
            });
        }
    }
    Ok(EvalTable::from_rows(rows))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogKind {
    Train,
    Eval,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub kind: LogKind,
    /// Training episodes completed (for train records, including this one).
    pub episode: usize,
    /// Seconds since training started; null in deterministic mode.
    pub wall_s: Option<f64>,
    pub worker: Option<usize>,
    pub seed: Option<u64>,
    pub version: u64,
    #[serde(flatten)]
    pub values: MetricValues,
}

struct LogSink {
    file: Option<BufWriter<File>>,
    records: Vec<LogRecord>,
}

impl LogSink {
    fn push(&mut self, rec: LogRecord) -> Result<()> {
        if let Some(f) = &mut self.file {
            serde_json::to_writer(&mut *f, &rec).map_err(|e| Error::Io(e.into()))?;
            f.write_all(b"\n")?;
            f.flush()?;
        }
        self.records.push(rec);
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for the log, checkpoints and resolved config.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// OS threads for the async and sync schedules (default: one per worker).
    pub threads: Option<usize>,
}

pub struct TrainOutcome {
    pub log: Vec<LogRecord>,
    pub checkpoint: Checkpoint,
}

pub const LOG_FILE: &str = "train_log.ndjson";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const FINAL_CHECKPOINT_FILE: &str = "final.ckpt";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

struct Trainer<'a> {
    exp: &'a Experiment,
    store: ParameterStore,
    sink: Mutex<LogSink>,
    start: Instant,
    out_dir: Option<PathBuf>,
    eval_seeds: Vec<u64>,
}

impl Trainer<'_> {
    fn wall(&self) -> Option<f64> {
        match self.exp.config.training.schedule {
            Schedule::Deterministic => None,
            _ => Some(self.start.elapsed().as_secs_f64()),
        }
    }

    fn entropy_coef(&self, episodes_done: usize) -> f64 {
        let budget = self.exp.config.training.episodes.max(1);
        self.exp.config.advantage.entropy_at(episodes_done as f64 / budget as f64)
    }

    fn checkpoint(&self, episode: usize) -> Checkpoint {
        let (params, actor_opt, critic_opt, version) = self.store.export();
        Checkpoint {
            config_hash: self.exp.config.hash(),
            network_hash: self.exp.network_hash(),
            episode: episode as u64,
            version,
            rng_seed: self.exp.config.training.seed,
            config: serde_json::to_value(&self.exp.config).expect("config serializes"),
            params,
            actor_opt,
            critic_opt,
        }
    }

    fn save(&self, ck: &Checkpoint, name: &str) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            save_checkpoint(&dir.join(name), ck)?;
        }
        Ok(())
    }

    fn log_train(&self, episodes_done: usize, s: &EpisodeSummary) -> Result<()> {
        let rec = LogRecord {
            kind: LogKind::Train,
            episode: episodes_done,
            wall_s: self.wall(),
            worker: Some(s.worker),
            seed: Some(s.seed),
            version: self.store.version(),
            values: MetricValues::from_episode(s.mean_return, &s.metrics),
        };
        self.sink.lock().unwrap_or_else(|e| e.into_inner()).push(rec)
    }

    /// Greedy evaluation on the held-out seeds, logged and checkpointed.
    fn eval_point(&self, episodes_done: usize) -> Result<()> {
        let snap = self.store.snapshot();
        let controller = Controller::Policy {
            params: Arc::clone(&snap.params),
            mode: ActionMode::Argmax,
        };
        let scenario = Scenario {
            name: "eval".into(),
            source: self.exp.source.clone(),
            seeds: self.eval_seeds.clone(),
        };
        let table = evaluate(&self.exp.net, self.exp.env_config(), &controller, &[scenario])?;
        let rec = LogRecord {
            kind: LogKind::Eval,
            episode: episodes_done,
            wall_s: self.wall(),
            worker: None,
            seed: None,
            version: snap.version,
            values: table.mean,
        };
        self.sink.lock().unwrap_or_else(|e| e.into_inner()).push(rec)?;
        self.save(&self.checkpoint(episodes_done), CHECKPOINT_FILE)
    }

    fn crosses_eval(&self, before: usize, after: usize) -> bool {
        let every = self.exp.config.training.eval_every;
        every > 0 && before / every != after / every
    }

    /// Deterministic and sync schedules: rounds over all active workers.
    fn run_rounds(&self, workers: &mut [Worker], start: usize, threads: usize) -> Result<usize> {
        let cfg = &self.exp.config.training;
        let mut next_episode = start;
        let mut done = start;
        loop {
            for w in workers.iter_mut() {
                if w.is_idle() && next_episode < cfg.episodes {
                    w.begin_episode(next_episode, cfg.seed)
                        .map_err(|e| worker_error(w.id, e))?;
                    next_episode += 1;
                }
            }
            let active: Vec<usize> = (0..workers.len()).filter(|&k| !workers[k].is_idle()).collect();
            if active.is_empty() {
                return Ok(done);
            }
            let entropy_coef = self.entropy_coef(done);
            let mut finished = Vec::new();
            match cfg.schedule {
                Schedule::Deterministic | Schedule::Async => {
                    for &k in &active {
                        let w = &mut workers[k];
                        let snap = self.store.snapshot();
                        let (grads, fin) = self
                            .rollout_and_grad(w, &snap.params, entropy_coef)
                            .map_err(|e| worker_error(w.id, e))?;
                        self.store.apply(&grads, &self.exp.config.optimizer)?;
                        finished.extend(fin);
                    }
                }
                Schedule::Sync => {
                    let snap = self.store.snapshot();
                    let mut selected: Vec<&mut Worker> = workers.iter_mut().filter(|w| !w.is_idle()).collect();
                    let results = parallel_map(&mut selected, threads, |w| {
                        self.rollout_and_grad(w, &snap.params, entropy_coef)
                            .map_err(|e| worker_error(w.id, e))
                    });
                    let mut total: Option<ModelGradients> = None;
                    let count = results.len() as f64;
                    for r in results {
                        let (g, fin) = r?;
                        finished.extend(fin);
                        match &mut total {
                            None => total = Some(g),
                            Some(t) => t.add_scaled(&g, 1.0)?,
                        }
                    }
                    let mut total = total.expect("at least one active worker");
                    total.scale(1.0 / count);
                    self.store.apply(&total, &self.exp.config.optimizer)?;
                }
            }
            for s in finished {
                let before = done;
                done += 1;
                self.log_train(done, &s)?;
                if self.crosses_eval(before, done) {
                    self.eval_point(done)?;
                }
            }
        }
    }

    fn rollout_and_grad(
        &self,
        w: &mut Worker,
        params: &ModelParams,
        entropy_coef: f64,
    ) -> Result<(ModelGradients, Option<EpisodeSummary>)> {
        let out = w.run_rollout(params, self.exp, self.exp.config.training.rollout_len)?;
        let (grads, _) = compute_gradients(&out.buffer, params, self.exp.mode(), &self.exp.config.advantage, entropy_coef)?;
        Ok((grads, out.finished))
    }

    /// Async schedule: each thread drives its share of workers and applies
    /// gradients as soon as they are computed.
    fn run_async(&self, workers: &mut [Worker], start: usize, threads: usize) -> Result<usize> {
        let cfg = &self.exp.config.training;
        let next_episode = AtomicUsize::new(start);
        let done = Mutex::new(start);
        let abort = AtomicBool::new(false);
        let mut groups: Vec<Vec<&mut Worker>> = (0..threads).map(|_| Vec::new()).collect();
        for (k, w) in workers.iter_mut().enumerate() {
            groups[k % threads].push(w);
        }
        let results: Vec<Result<()>> = std::thread::scope(|scope| {
            let handles: Vec<_> = groups
                .into_iter()
                .map(|mut group| {
                    let (next_episode, done, abort) = (&next_episode, &done, &abort);
                    scope.spawn(move || -> Result<()> {
                        let r = (|| -> Result<()> {
                            loop {
                                let mut any = false;
                                for w in group.iter_mut() {
                                    if abort.load(Ordering::SeqCst) {
                                        return Ok(());
                                    }
                                    if w.is_idle() {
                                        let e = next_episode.fetch_add(1, Ordering::SeqCst);
                                        if e >= cfg.episodes {
                                            continue;
                                        }
                                        w.begin_episode(e, cfg.seed).map_err(|err| worker_error(w.id, err))?;
                                    }
                                    any = true;
                                    let progress = *done.lock().unwrap_or_else(|p| p.into_inner());
                                    let snap = self.store.snapshot();
                                    let (grads, fin) = self
                                        .rollout_and_grad(w, &snap.params, self.entropy_coef(progress))
                                        .map_err(|err| worker_error(w.id, err))?;
                                    self.store.apply(&grads, &self.exp.config.optimizer)?;
                                    if let Some(s) = fin {
                                        let (before, after) = {
                                            let mut d = done.lock().unwrap_or_else(|p| p.into_inner());
                                            *d += 1;
                                            self.log_train(*d, &s)?;
                                            (*d - 1, *d)
                                        };
                                        if self.crosses_eval(before, after) {
                                            self.eval_point(after)?;
                                        }
                                    }
                                }
                                if !any {
                                    return Ok(());
                                }
                            }
                        })();
                        if r.is_err() {
                            abort.store(true, Ordering::SeqCst);
                        }
                        r
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::InvalidArgument("worker thread panicked".into()))))
                .collect()
        });
        for r in results {
            r?;
        }
        let d = *done.lock().unwrap_or_else(|p| p.into_inner());
        Ok(d)
    }
}

fn worker_error(worker: usize, e: Error) -> Error {
    match e {
        Error::Worker { .. } => e,
        other => Error::Worker {
            worker,
            source: Box::new(other),
        },
    }
}

/// Applies `f` to every item using up to `threads` scoped threads; results
/// keep the input order.
fn parallel_map<T, R, F>(items: &mut [T], threads: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(&mut T) -> R + Sync,
{
    if threads <= 1 || items.len() <= 1 {
        return items.iter_mut().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks_mut(chunk)
            .map(|c| {
                let f = &f;
                scope.spawn(move || c.iter_mut().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("rollout thread panicked"))
            .collect()
    })
}

/// Trains under the configured schedule. With an `out_dir`, writes the
/// resolved config, the NDJSON log (incrementally, so a crash keeps the
/// partial log), the latest checkpoint at each evaluation and the final one.
pub fn train(exp: &Experiment, opts: TrainOptions) -> Result<TrainOutcome> {
    let cfg = &exp.config.training;
    let (store, start) = match opts.resume {
        Some(ck) => {
            if ck.network_hash != exp.network_hash() {
                return Err(Error::Checkpoint(
                    "checkpoint was trained on a different network".into(),
                ));
            }
            let start = ck.episode as usize;
            (
                ParameterStore::from_parts(ck.params, ck.actor_opt, ck.critic_opt, ck.version),
                start,
            )
        }
        None => (ParameterStore::new(exp.init_params()?), 0),
    };
    let file = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join(RESOLVED_CONFIG_FILE), exp.config.to_json_pretty())?;
            let path = dir.join(LOG_FILE);
            let f = if start == 0 {
                File::create(&path)?
            } else {
                std::fs::OpenOptions::new().create(true).append(true).open(&path)?
            };
            Some(BufWriter::new(f))
        }
        None => None,
    };
    let trainer = Trainer {
        exp,
        store,
        sink: Mutex::new(LogSink {
            file,
            records: Vec::new(),
        }),
        start: Instant::now(),
        out_dir: opts.out_dir.clone(),
        eval_seeds: eval_seeds(cfg.seed, cfg.eval_seeds),
    };
    let nothing_to_do = start >= cfg.episodes;
    if start == 0 && !nothing_to_do {
        trainer.eval_point(0)?;
    }
    let mut workers = (0..cfg.workers)
        .map(|k| Worker::new(k, exp))
        .collect::<Result<Vec<_>>>()?;
    let threads = opts.threads.unwrap_or(cfg.workers).clamp(1, cfg.workers);
    let done = match cfg.schedule {
        Schedule::Async if threads > 1 => trainer.run_async(&mut workers, start, threads)?,
        Schedule::Deterministic => trainer.run_rounds(&mut workers, start, 1)?,
        _ => trainer.run_rounds(&mut workers, start, threads)?,
    };
    let last_eval = trainer
        .sink
        .lock()
        .unwrap_or_else(|e| e.into_inner())
        .records
        .iter()
        .rev()
        .find(|r| r.kind == LogKind::Eval)
        .map(|r| r.episode);
    if last_eval != Some(done) && !nothing_to_do {
        trainer.eval_point(done)?;
    }
    let checkpoint = trainer.checkpoint(done);
    trainer.save(&checkpoint, FINAL_CHECKPOINT_FILE)?;
    let sink = trainer.sink.into_inner().unwrap_or_else(|e| e.into_inner());
    Ok(TrainOutcome {
        log: sink.records,
        checkpoint,
    })
}

/// Reads an NDJSON training log.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: k + 1,
                column: e.column(),
                message: e.to_string(),
            })
        })
        .collect()
}

/// Parameters for `params` from a checkpoint, refusing a network mismatch.
pub fn params_for(exp: &Experiment, ck: &Checkpoint) -> Result<Arc<ModelParams>> {
    if ck.network_hash != exp.network_hash() {
        return Err(Error::Checkpoint(format!(
            "checkpoint network hash {} does not match this network ({}); the road layout or phase table differs",
            ck.network_hash,
            exp.network_hash()
        )));
    }
    if ck.params.actor.input_width() != exp.aug_width() || ck.params.actor.output_width() != exp.num_actions {
        return Err(Error::Checkpoint(
            "checkpoint model shape does not match the observation layout".into(),
        ));
    }
    Ok(Arc::new(ck.params.clone()))
}

/// Sum of squared gradient entries, for diagnostics.
pub fn gradient_norm(g: &ModelGradients) -> (f64, f64) {
    let n = |s: &GradientSet| s.norm();
    (n(&g.actor), n(&g.critic))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::config_from_str;

    fn small(mode: &str, rows: usize, cols: usize, steps: usize) -> Experiment {
        let text = format!(
            r#"
[network]
rows = {rows}
cols = {cols}
[episode]
episode_len_steps = {steps}
[model]
actor_hidden = [16]
critic_hidden = [16]
[training]
episodes = 2
workers = 1
rollout_len = 4
schedule = "deterministic"
eval_seeds = 1
eval_every = 0
[advantage]
mode = "{mode}"
"#
        );
        Experiment::new(config_from_str(&text).unwrap()).unwrap()
    }

    #[test]
    fn seed_sets_are_disjoint() {
        let ev = eval_seeds(3, 5);
        for w in 0..4 {
            for e in 0..200 {
                assert!(!ev.contains(&training_seed(3, w, e)));
            }
        }
        assert_eq!(ev, eval_seeds(3, 5));
    }

    #[test]
    fn single_step_rollout_on_one_intersection() {
        let exp = small("sociallight", 1, 1, 10);
        let params = exp.init_params().unwrap();
        let mut w = Worker::new(0, &exp).unwrap();
        w.begin_episode(0, 0).unwrap();
        let out = w.run_rollout(&params, &exp, 1).unwrap();
        let b = &out.buffer;
        assert_eq!(b.len(), 1);
        assert!(!b.terminal);
        assert_eq!(b.agents[0].records[0].neighbor_actions, [None; 4]);
        assert!(b.agents[0].bootstrap.is_some());
        b.validate(exp.num_actions).unwrap();
    }

    #[test]
    fn neighbor_actions_are_time_aligned() {
        let exp = small("sociallight", 2, 3, 12);
        let params = exp.init_params().unwrap();
        let mut w = Worker::new(0, &exp).unwrap();
        w.begin_episode(0, 9).unwrap();
        let out = w.run_rollout(&params, &exp, 5).unwrap();
        let b = &out.buffer;
        for t in 0..5 {
            let joint: Vec<usize> = b.agents.iter().map(|a| a.records[t].action).collect();
            for (i, a) in b.agents.iter().enumerate() {
                assert_eq!(a.records[t].neighbor_actions, neighbor_actions(&exp.net, i, &joint).unwrap());
            }
        }
        // the bootstrap's neighbor actions are those executed next
        let boot: Vec<_> = b.agents.iter().map(|a| a.bootstrap.clone().unwrap()).collect();
        let next = w.run_rollout(&params, &exp, 1).unwrap();
        for (i, a) in next.buffer.agents.iter().enumerate() {
            assert_eq!(a.records[0].neighbor_actions, boot[i].neighbor_actions);
            assert_eq!(a.records[0].z_aug, boot[i].z_aug);
        }
    }

    #[test]
    fn rollouts_are_reproducible() {
        let exp = small("sociallight", 2, 2, 8);
        let params = exp.init_params().unwrap();
        let run = || {
            let mut w = Worker::new(0, &exp).unwrap();
            w.begin_episode(3, 11).unwrap();
            w.run_rollout(&params, &exp, 8).unwrap().buffer
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert!(a.terminal);
    }

    fn total_loss(buffer: &RolloutBuffer, params: &ModelParams, exp: &Experiment, beta: f64) -> (f64, f64) {
        let (_, s) = compute_gradients(buffer, params, exp.mode(), &exp.config.advantage, beta).unwrap();
        (s.policy_loss, s.critic_loss)
    }

    #[test]
    fn gradients_match_finite_differences_of_total_loss() {
        for mode in ["sociallight", "a3c_neighborhood"] {
            let exp = small(mode, 1, 2, 6);
            let params = exp.init_params().unwrap();
            let mut w = Worker::new(0, &exp).unwrap();
            w.begin_episode(0, 5).unwrap();
            let buffer = w.run_rollout(&params, &exp, 3).unwrap().buffer;
            assert_eq!(buffer.agents.len(), 2);
            let beta = 0.01;
            let (g, _) = compute_gradients(&buffer, &params, exp.mode(), &exp.config.advantage, beta).unwrap();
            let eps = 1e-5;
            let mut worst: f64 = 0.0;
            for (which, grads) in [(0, &g.actor), (1, &g.critic)] {
                for (ti, t) in grads.tensors.iter().enumerate() {
                    for j in 0..t.data.len() {
                        let mut up = params.clone();
                        let mut dn = params.clone();
                        let (pu, pd) = if which == 0 {
                            (&mut up.actor, &mut dn.actor)
                        } else {
                            (&mut up.critic, &mut dn.critic)
                        };
                        pu.params[ti].data[j] += eps;
                        pd.params[ti].data[j] -= eps;
                        let lu = total_loss(&buffer, &up, &exp, beta);
                        let ld = total_loss(&buffer, &dn, &exp, beta);
                        let (fu, fd) = if which == 0 { (lu.0, ld.0) } else { (lu.1, ld.1) };
                        let num = (fu - fd) / (2.0 * eps);
                        let a = t.data[j];
                        worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
                    }
                }
            }
            assert!(worst < 1e-4, "{mode}: {worst}");
        }
    }

    #[test]
    fn duplicated_agents_leave_gradient_unchanged() {
        let exp = small("sociallight", 1, 2, 6);
        let params = exp.init_params().unwrap();
        let mut w = Worker::new(0, &exp).unwrap();
        w.begin_episode(0, 5).unwrap();
        let buffer = w.run_rollout(&params, &exp, 3).unwrap().buffer;
        let mut doubled = buffer.clone();
        doubled.agents.extend(buffer.agents.clone());
        let (g1, _) = compute_gradients(&buffer, &params, exp.mode(), &exp.config.advantage, 0.01).unwrap();
        let (g2, _) = compute_gradients(&doubled, &params, exp.mode(), &exp.config.advantage, 0.01).unwrap();
        for (a, b) in g1.actor.tensors.iter().chain(&g1.critic.tensors).zip(g2.actor.tensors.iter().chain(&g2.critic.tensors)) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn zero_budget_gives_initial_checkpoint_only() {
        let mut exp = small("sociallight", 1, 1, 4);
        exp.config.training.episodes = 0;
        let out = train(&exp, TrainOptions::default()).unwrap();
        assert_eq!(out.checkpoint.episode, 0);
        assert_eq!(out.checkpoint.version, 0);
        assert!(out.log.is_empty());
        assert_eq!(out.checkpoint.params, exp.init_params().unwrap());
    }

    #[test]
    fn deterministic_training_repeats_exactly() {
        let exp = small("sociallight", 2, 2, 8);
        let a = train(&exp, TrainOptions::default()).unwrap();
        let b = train(&exp, TrainOptions::default()).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.log.iter().filter(|r| r.kind == LogKind::Train).count(), 2);
        assert!(a.log.iter().all(|r| r.wall_s.is_none()));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let mut exp = small("a3c_local", 2, 2, 8);
        exp.config.training.episodes = 4;
        // a constant entropy coefficient keeps the schedule budget-independent
        exp.config.advantage.entropy_coef_final = exp.config.advantage.entropy_coef;
        let mut half = exp.clone();
        half.config.training.episodes = 2;
        let first = train(&half, TrainOptions::default()).unwrap();
        let rest = train(
            &exp,
            TrainOptions {
                resume: Some(first.checkpoint.clone()),
                ..Default::default()
            },
        )
        .unwrap();
        let straight = train(&exp, TrainOptions::default()).unwrap();
        assert_eq!(rest.checkpoint.params, straight.checkpoint.params);
        assert_eq!(rest.checkpoint.version, straight.checkpoint.version);
        assert_ne!(straight.checkpoint.params, exp.init_params().unwrap());
    }

    #[test]
    fn sync_schedule_matches_single_worker_deterministic() {
        let mut a = small("sociallight", 2, 2, 8);
        a.config.training.schedule = Schedule::Sync;
        let mut b = a.clone();
        b.config.training.schedule = Schedule::Deterministic;
        let ra = train(&a, TrainOptions::default()).unwrap();
        let rb = train(&b, TrainOptions::default()).unwrap();
        assert_eq!(ra.checkpoint.params, rb.checkpoint.params);
    }

    #[test]
    fn async_schedule_trains_full_budget() {
        let mut exp = small("a3c_neighborhood", 2, 2, 8);
        exp.config.training.schedule = Schedule::Async;
        exp.config.training.workers = 2;
        exp.config.training.episodes = 5;
        let out = train(
            &exp,
            TrainOptions {
                threads: Some(2),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(out.checkpoint.episode, 5);
        assert_eq!(out.log.iter().filter(|r| r.kind == LogKind::Train).count(), 5);
        // two rollouts of 4 steps per 8-step episode
        assert_eq!(out.checkpoint.version, 10);
    }

    #[test]
    fn classical_controllers_evaluate_deterministically() {
        let exp = small("sociallight", 2, 2, 30);
        let sc = Scenario {
            name: "s".into(),
            source: exp.source.clone(),
            seeds: vec![1, 2],
        };
        let ctl = Controller::FixedTime(Default::default());
        let a = evaluate(&exp.net, exp.env_config(), &ctl, std::slice::from_ref(&sc)).unwrap();
        let b = evaluate(&exp.net, exp.env_config(), &ctl, &[sc]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 2);
        let m = (a.rows[0].values.avg_queue_length + a.rows[1].values.avg_queue_length) / 2.0;
        assert!((a.mean.avg_queue_length - m).abs() < 1e-12);
    }
}
