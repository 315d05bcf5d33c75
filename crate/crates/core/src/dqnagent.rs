//! Deep Q-learning decoder: replay memory, Q-network over encoder features,
//! target network and the episodic training loop.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};

use neuralcore::graph::BatchStats;
use neuralcore::tensor::describe_mismatch;
use neuralcore::{Adam, AdamConfig, Checkpoint, Graph, Linear, Mode, ParamSet, RunningStats, Section, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoders::{encoder_param_count, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::marketdata::RawState;
use crate::tradeenv::{Action, Environment};

#[derive(Debug, Clone, PartialEq)]
pub struct Experience {
    pub state: RawState,
    pub action: Action,
    pub reward: f64,
    pub next_state: RawState,
    pub terminal: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Eviction {
    /// Overwrite a uniformly chosen slot once full.
    #[default]
    Random,
    Fifo,
}

#[derive(Debug, Clone)]
pub struct ReplayMemory {
    capacity: usize,
    eviction: Eviction,
    buffer: Vec<Experience>,
    oldest: usize,
}

impl ReplayMemory {
    pub fn new(capacity: usize, eviction: Eviction) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("train.capacity", "replay capacity must be at least 1"));
        }
        Ok(Self {
            capacity,
            eviction,
            buffer: Vec::with_capacity(capacity),
            oldest: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }
    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }
    pub fn capacity(&self) -> usize {
        self.capacity
    }
    pub fn get(&self, i: usize) -> Option<&Experience> {
        self.buffer.get(i)
    }
    pub fn iter(&self) -> impl Iterator<Item = &Experience> {
        self.buffer.iter()
    }

    /// Appends while there is room; afterwards overwrites a slot chosen by the
    /// eviction policy and returns its index.
    pub fn store(&mut self, e: Experience, rng: &mut impl Rng) -> Option<usize> {
        if self.buffer.len() < self.capacity {
            self.buffer.push(e);
            return None;
        }
        let slot = match self.eviction {
            Eviction::Random => rng.random_range(0..self.capacity),
            Eviction::Fifo => {
                let s = self.oldest;
                self.oldest = (self.oldest + 1) % self.capacity;
                s
            }
        };
        self.buffer[slot] = e;
        Some(slot)
    }

    /// `b` slot indices drawn uniformly with replacement, or `None` if the
    /// memory holds fewer than `b` experiences.
    pub fn sample_indices(&self, b: usize, rng: &mut impl Rng) -> Option<Vec<usize>> {
        if b == 0 || self.buffer.len() < b {
            return None;
        }
        Some((0..b).map(|_| rng.random_range(0..self.buffer.len())).collect())
    }

    pub fn sample_batch(&self, b: usize, rng: &mut impl Rng) -> Option<Vec<&Experience>> {
        self.sample_indices(b, rng)
            .map(|idx| idx.into_iter().map(|i| &self.buffer[i]).collect())
    }
}

/// Index of the largest value; the earliest wins ties.
pub fn argmax(q: &[f64; 3]) -> Action {
    let mut best = 0;
    for i in 1..3 {
        if q[i] > q[best] {
            best = i;
        }
    }
    Action::ALL[best]
}

pub const HEAD_HIDDEN: usize = 128;
const EVAL_CHUNK: usize = 64;

/// Encoder followed by `Linear(F, hidden) -> ReLU -> Linear(hidden, 3)`.
/// Encoder and head parameters share one [`ParamSet`] (`encoder.*`, `head.*`).
#[derive(Debug, Clone)]
pub struct QNetwork {
    encoder: Encoder,
    l1: Linear,
    l2: Linear,
    params: ParamSet,
}

impl QNetwork {
    pub fn new(config: EncoderConfig, head_hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut params = ParamSet::new();
        let encoder = Encoder::new(config, "encoder", &mut params, rng)?;
        let (l1, l2) = Self::head(&config, head_hidden)?;
        l1.init(&mut params, rng)?;
        l2.init(&mut params, rng)?;
        Ok(Self {
            encoder,
            l1,
            l2,
            params,
        })
    }

    fn head(config: &EncoderConfig, head_hidden: usize) -> Result<(Linear, Linear)> {
        if head_hidden == 0 {
            return Err(Error::config("train.head_hidden", "must be at least 1"));
        }
        Ok((
            Linear::new("head.linear1", config.output_size(), head_hidden),
            Linear::new("head.linear2", head_hidden, 3),
        ))
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }
    pub fn encoder_mut(&mut self) -> &mut Encoder {
        &mut self.encoder
    }
    pub fn config(&self) -> &EncoderConfig {
        self.encoder.config()
    }
    pub fn head_hidden(&self) -> usize {
        self.l1.out_features
    }
    pub fn params(&self) -> &ParamSet {
        &self.params
    }
    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Learnable scalars of the head alone.
    pub fn head_param_count(&self) -> usize {
        Linear::param_count(self.l1.in_features, self.l1.out_features) + Linear::param_count(self.l2.in_features, 3)
    }

    pub fn param_count(&self) -> usize {
        encoder_param_count(self.config()) + self.head_param_count()
    }

    /// Sets every head weight and bias to zero, which makes all action values equal.
    pub fn zero_head(&mut self) {
        for (name, t) in self.params.iter_mut() {
            if name.starts_with("head.") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Action values `[batch, 3]` on `g`.
    pub fn forward(&self, g: &mut Graph, states: &[&RawState], mode: Mode) -> Result<(Var, Option<BatchStats>)> {
        let (f, stats) = self.encoder.forward(g, &self.params, states, mode)?;
        let h = self.l1.forward(g, &self.params, f)?;
        let h = g.relu(h)?;
        Ok((self.l2.forward(g, &self.params, h)?, stats))
    }

    /// Eval-mode action values for many states, processed in fixed chunks.
    pub fn q_batch(&self, states: &[&RawState]) -> Result<Vec<[f64; 3]>> {
        let mut out = Vec::with_capacity(states.len());
        for chunk in states.chunks(EVAL_CHUNK) {
            let mut g = Graph::new();
            let (q, _) = self.forward(&mut g, chunk, Mode::Eval)?;
            out.extend(g.value(q).data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]));
        }
        Ok(out)
    }

    pub fn q_values(&self, state: &RawState) -> Result<[f64; 3]> {
        Ok(self.q_batch(&[state])?[0])
    }

    /// ε-greedy choice. Always consumes one uniform draw, plus one more when
    /// exploring.
    pub fn select_action(&self, state: &RawState, epsilon: f64, rng: &mut impl Rng) -> Result<Action> {
        if rng.random::<f64>() < epsilon {
            return Ok(Action::ALL[rng.random_range(0..3)]);
        }
        Ok(argmax(&self.q_values(state)?))
    }

    pub fn greedy_policy(&self, states: &[RawState]) -> Result<Vec<Action>> {
        let refs: Vec<&RawState> = states.iter().collect();
        Ok(self.q_batch(&refs)?.iter().map(argmax).collect())
    }

    /// Makes `self` a deep copy of `source`'s parameters and batch-norm
    /// statistics. The step counter is copied too.
    pub fn sync_from(&mut self, source: &QNetwork) -> Result<()> {
        if !self.params.is_sync_compatible(&source.params) {
            return Err(Error::Compatibility(describe_mismatch(&self.params, &source.params)));
        }
        self.params.copy_values_from(&source.params)?;
        if let Some(stats) = source.encoder.running_stats() {
            self.encoder.set_running_stats(stats.clone())?;
        }
        Ok(())
    }
}

/// Bellman targets from the target network:
/// `y = r` for terminal experiences, else `r + γ max_a' Q(s', a'; θ⁻)`.
pub fn compute_targets(batch: &[&Experience], target: &QNetwork, gamma: f64) -> Result<Vec<f64>> {
    let next: Vec<&RawState> = batch.iter().map(|e| &e.next_state).collect();
    let q_next = target.q_batch(&next)?;
    Ok(batch
        .iter()
        .zip(q_next)
        .map(|(e, q)| {
            if e.terminal {
                e.reward
            } else {
                e.reward + gamma * q.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            }
        })
        .collect())
}

/// One Adam step on the mean Huber loss between `Q(s, a; θ)` and the targets.
/// Returns the loss before the update.
pub fn optimize_on_batch(
    policy: &mut QNetwork,
    target: &QNetwork,
    batch: &[&Experience],
    gamma: f64,
    adam: &mut Adam,
) -> Result<f64> {
    let y = compute_targets(batch, target, gamma)?;
    let states: Vec<&RawState> = batch.iter().map(|e| &e.state).collect();
    let actions: Vec<usize> = batch.iter().map(|e| e.action.index()).collect();
    let mut g = Graph::new();
    let (q, stats) = policy.forward(&mut g, &states, Mode::Train)?;
    let q_sa = g.gather(q, &actions)?;
    let y = g.constant(Tensor::from_vec(y));
    let loss = g.huber_loss(q_sa, y)?;
    let value = g.value(loss).item()?;
    g.backward(loss)?;
    g.export_grads(&mut policy.params)?;
    adam.step(&mut policy.params)?;
    if let Some(stats) = stats {
        policy.encoder.commit(&stats);
    }
    Ok(value)
}

/// Samples a batch and optimizes on it; `None` when memory is underfilled.
pub fn optimize_step(
    policy: &mut QNetwork,
    target: &QNetwork,
    memory: &ReplayMemory,
    batch_size: usize,
    gamma: f64,
    adam: &mut Adam,
    rng: &mut impl Rng,
) -> Result<Option<f64>> {
    let Some(batch) = memory.sample_batch(batch_size, rng) else {
        return Ok(None);
    };
    optimize_on_batch(policy, target, &batch, gamma, adam).map(Some)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub episodes: usize,
    pub gamma: f64,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Time constant of the exponential ε decay, in environment steps.
    pub eps_decay: f64,
    pub batch_size: usize,
    pub capacity: usize,
    /// Optimization steps between target-network syncs.
    pub target_sync: usize,
    pub eviction: Eviction,
    pub adam: AdamConfig,
    pub head_hidden: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 50,
            gamma: 0.9,
            eps_start: 0.9,
            eps_end: 0.05,
            eps_decay: 1000.0,
            batch_size: 10,
            capacity: 20,
            target_sync: 500,
            eviction: Eviction::Random,
            adam: AdamConfig::default(),
            head_hidden: HEAD_HIDDEN,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.gamma) {
            return Err(Error::config("train.gamma", format!("{} outside [0, 1]", self.gamma)));
        }
        if !unit(self.eps_start) || !unit(self.eps_end) {
            return Err(Error::config("train.eps_start", "epsilon bounds must lie in [0, 1]"));
        }
        if !(self.eps_decay > 0.0 && self.eps_decay.is_finite()) {
            return Err(Error::config("train.eps_decay", "must be positive"));
        }
        if self.batch_size == 0 || self.batch_size > self.capacity {
            return Err(Error::config(
                "train.batch_size",
                format!("need 1 <= batch {} <= capacity {}", self.batch_size, self.capacity),
            ));
        }
        if self.target_sync == 0 {
            return Err(Error::config("train.target_sync", "must be at least 1"));
        }
        if self.head_hidden == 0 {
            return Err(Error::config("train.head_hidden", "must be at least 1"));
        }
        self.adam.validate().map_err(|e| {
            let field = match e {
                neuralcore::Error::Hyperparameter { name: "eps", .. } => "train.adam_eps".to_string(),
                neuralcore::Error::Hyperparameter { name, .. } => format!("train.{name}"),
                _ => "train.lr".to_string(),
            };
            Error::config(field, e.to_string())
        })
    }

    /// `end + (start - end) exp(-step / decay)`.
    pub fn epsilon(&self, step: u64) -> f64 {
        self.eps_end + (self.eps_start - self.eps_end) * (-(step as f64) / self.eps_decay).exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub episode: usize,
    pub steps: usize,
    /// ε at the end of the episode.
    pub epsilon: f64,
    pub cum_reward: f64,
    /// Mean loss over the episode's optimization steps, if any ran.
    pub mean_loss: Option<f64>,
}

impl EpisodeLog {
    pub const HEADER: &'static str = "episode,steps,epsilon,cum_reward,mean_loss";

    pub fn csv_line(&self) -> String {
        let loss = self.mean_loss.map(|l| l.to_string()).unwrap_or_default();
        format!("{},{},{},{},{}", self.episode, self.steps, self.epsilon, self.cum_reward, loss)
    }
}

pub fn write_training_log(log: &[EpisodeLog], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{}", EpisodeLog::HEADER)?;
    for e in log {
        writeln!(out, "{}", e.csv_line())?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: QNetwork,
    pub target: QNetwork,
    pub adam: Adam,
    pub log: Vec<EpisodeLog>,
    pub env_steps: u64,
    pub optimize_steps: u64,
}

/// Runs the episodic deep Q-learning loop. All randomness (initialization,
/// exploration, replacement, sampling) comes from one generator seeded with
/// `cfg.seed`, so equal inputs give bit-identical results.
pub fn train(
    env: &mut impl Environment,
    encoder: EncoderConfig,
    cfg: &TrainConfig,
    reporter: Option<&LogSender>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    encoder.validate()?;
    if env.state_mode() != encoder.mode {
        return Err(Error::config(
            "encoder.input",
            format!("environment yields {:?} states, encoder expects {:?}", env.state_mode(), encoder.mode),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut policy = QNetwork::new(encoder, cfg.head_hidden, &mut rng)?;
    let mut target = policy.clone();
    let mut adam = Adam::new(cfg.adam)?;
    let mut memory = ReplayMemory::new(cfg.capacity, cfg.eviction)?;
    let mut log = Vec::with_capacity(cfg.episodes);
    let (mut env_steps, mut optimize_steps) = (0u64, 0u64);

    for episode in 0..cfg.episodes {
        let mut state = env.reset()?;
        let (mut steps, mut cum_reward, mut loss_sum, mut losses) = (0, 0.0, 0.0, 0usize);
        loop {
            let action = policy.select_action(&state, cfg.epsilon(env_steps), &mut rng)?;
            let tr = env.step(action)?;
            cum_reward += tr.reward;
            memory.store(
                Experience {
                    state,
                    action,
                    reward: tr.reward,
                    next_state: tr.next_state.clone(),
                    terminal: tr.terminal,
                },
                &mut rng,
            );
            if let Some(loss) = optimize_step(&mut policy, &target, &memory, cfg.batch_size, cfg.gamma, &mut adam, &mut rng)? {
                loss_sum += loss;
                losses += 1;
                optimize_steps += 1;
                if optimize_steps % cfg.target_sync as u64 == 0 {
                    target.sync_from(&policy)?;
                }
            }
            env_steps += 1;
            steps += 1;
            state = tr.next_state;
            if tr.done {
                break;
            }
        }
        let entry = EpisodeLog {
            episode,
            steps,
            epsilon: cfg.epsilon(env_steps),
            cum_reward,
            mean_loss: (losses > 0).then(|| loss_sum / losses as f64),
        };
        if let Some(tx) = reporter {
            tx.send(entry.csv_line());
        }
        log.push(entry);
    }
    Ok(TrainOutcome {
        policy,
        target,
        adam,
        log,
        env_steps,
        optimize_steps,
    })
}

struct Channel {
    queue: Mutex<(VecDeque<String>, bool)>,
    ready: Condvar,
    capacity: usize,
    dropped: AtomicUsize,
}

/// Sending half of a bounded log channel. Sending never waits for the
/// consumer: when the buffer is full the oldest line is discarded.
pub struct LogSender(Arc<Channel>);

pub struct LogReceiver(Arc<Channel>);

pub fn log_channel(capacity: usize) -> (LogSender, LogReceiver) {
    let ch = Arc::new(Channel {
        queue: Mutex::new((VecDeque::with_capacity(capacity), false)),
        ready: Condvar::new(),
        capacity: capacity.max(1),
        dropped: AtomicUsize::new(0),
    });
    (LogSender(ch.clone()), LogReceiver(ch))
}

impl LogSender {
    pub fn send(&self, line: String) {
        let mut q = self.0.queue.lock().unwrap_or_else(|e| e.into_inner());
        if q.0.len() == self.0.capacity {
            q.0.pop_front();
            self.0.dropped.fetch_add(1, Ordering::Relaxed);
        }
        q.0.push_back(line);
        self.0.ready.notify_one();
    }
}

impl Drop for LogSender {
    fn drop(&mut self) {
        let mut q = self.0.queue.lock().unwrap_or_else(|e| e.into_inner());
        q.1 = true;
        self.0.ready.notify_all();
    }
}

impl LogReceiver {
    /// Next line, blocking; `None` once the sender is gone and the buffer is drained.
    pub fn recv(&self) -> Option<String> {
        let mut q = self.0.queue.lock().unwrap_or_else(|e| e.into_inner());
        loop {
            if let Some(line) = q.0.pop_front() {
                return Some(line);
            }
            if q.1 {
                return None;
            }
            q = self.0.ready.wait(q).unwrap_or_else(|e| e.into_inner());
        }
    }

    /// Lines discarded because the buffer was full.
    pub fn dropped(&self) -> usize {
        self.0.dropped.load(Ordering::Relaxed)
    }
}

fn bn_section(name: &str, stats: &RunningStats) -> Section {
    Section {
        name: name.to_string(),
        step_count: 0,
        tensors: vec![
            ("mean".to_string(), Tensor::from_vec(stats.mean.clone())),
            ("var".to_string(), Tensor::from_vec(stats.var.clone())),
        ],
    }
}

/// Policy, target, their batch-norm statistics and the optimizer state.
pub fn to_checkpoint(policy: &QNetwork, target: &QNetwork, adam: Option<&Adam>) -> Checkpoint {
    let mut sections = vec![
        Section::from_params("policy", policy.params()),
        Section::from_params("target", target.params()),
    ];
    for (name, net) in [("policy.bn", policy), ("target.bn", target)] {
        if let Some(stats) = net.encoder().running_stats() {
            sections.push(bn_section(name, stats));
        }
    }
    Checkpoint {
        sections,
        adam: adam.cloned(),
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, policy: &QNetwork, target: &QNetwork, adam: Option<&Adam>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_checkpoint(policy, target, adam).to_bytes()).map_err(|e| Error::io(path, e))
}

/// Restores networks for `config`, rejecting checkpoints whose parameter
/// names or shapes differ from what the config builds.
pub fn from_checkpoint(
    ckpt: &Checkpoint,
    config: EncoderConfig,
    head_hidden: usize,
) -> Result<(QNetwork, QNetwork, Option<Adam>)> {
    let template = QNetwork::new(config, head_hidden, &mut ChaCha8Rng::seed_from_u64(0))?;
    let restore = |name: &str| -> Result<QNetwork> {
        let section = ckpt
            .section(name)
            .ok_or_else(|| Error::Compatibility(format!("checkpoint has no `{name}` section")))?;
        let params = section.to_params()?;
        if !template.params.is_sync_compatible(&params) {
            return Err(Error::Compatibility(format!(
                "{name}: config vs checkpoint: {}",
                describe_mismatch(&template.params, &params)
            )));
        }
        let mut net = template.clone();
        net.params = params;
        if template.encoder.running_stats().is_some() {
            let bn = ckpt
                .section(&format!("{name}.bn"))
                .ok_or_else(|| Error::Compatibility(format!("checkpoint has no `{name}.bn` section")))?;
            let get = |k: &str| {
                bn.get(k)
                    .map(|t| t.data().to_vec())
                    .ok_or_else(|| Error::Compatibility(format!("`{name}.bn` lacks `{k}`")))
            };
            net.encoder.set_running_stats(RunningStats {
                mean: get("mean")?,
                var: get("var")?,
            })?;
        }
        Ok(net)
    };
    Ok((restore("policy")?, restore("target")?, ckpt.adam.clone()))
}

pub fn load_checkpoint(
    path: impl AsRef<Path>,
    config: EncoderConfig,
    head_hidden: usize,
) -> Result<(QNetwork, QNetwork, Option<Adam>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_checkpoint(&Checkpoint::from_bytes(&bytes)?, config, head_hidden)
}
