use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::checkpoint::write_atomic;
use super::metrics::METRICS_VERSION;
use super::{
    build_reflector, Checkpoint, ChildRecord, Environment, EsplConfig, Event, HeaderRecord, IterationRecord,
    MetricsLine, OrchestratorError, Stage, CHECKPOINT_VERSION,
};
use crate::genetic::{maybe_crossover, mutate, Evidence, Outcome};
use crate::policytoy::ToyPolicy;
use crate::population::{select, NodeId, Population, PromptNode};
use crate::reflect::Reflector;
use crate::rollout::{best_prompt, sample_batch, Problem, PromptRef, RolloutBatch, RolloutError, SyntheticSampler};
use crate::seed::StreamKey;

/// Per-prompt tournament score: mean of `V[i][b]` over the problem batch.
pub fn aggregate_tournament_values(batch: &RolloutBatch) -> Vec<f64> {
    batch
        .values
        .iter()
        .map(|row| row.iter().sum::<f64>() / row.len() as f64)
        .collect()
}

/// Plateau detector on the batch mean reward.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub best: Option<f64>,
    pub since_best: u64,
}

impl EarlyStop {
    fn observe(&mut self, reward: f64) {
        if self.best.is_none_or(|b| reward > b) {
            self.best = Some(reward);
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed iterations.
    pub iteration: u64,
    pub population: Population,
    pub policy: Option<ToyPolicy>,
    pub early_stop: EarlyStop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub start_iteration: u64,
    pub end_iteration: u64,
    pub stopped_early: bool,
    pub last_checkpoint: Option<PathBuf>,
}

struct Output {
    dir: PathBuf,
    metrics: BufWriter<File>,
    lines: u64,
}

pub struct Trainer {
    config: EsplConfig,
    env: Environment,
    problems: Vec<Problem>,
    reflector: Box<dyn Reflector>,
    key: StreamKey,
    state: TrainState,
    out: Option<Output>,
}

pub const METRICS_FILE: &str = "metrics.jsonl";

impl Trainer {
    pub fn new(config: EsplConfig, env: Environment, reflector: Box<dyn Reflector>) -> Result<Self, OrchestratorError> {
        config.validate()?;
        let root = config.root_prompt.clone().unwrap_or_else(|| env.default_root_prompt());
        let population = Population::new(root, config.rating.initial_rating(), config.window)
            .map_err(|source| OrchestratorError::Population { iteration: 0, source })?;
        let state = TrainState {
            iteration: 0,
            population,
            policy: env.initial_policy(),
            early_stop: EarlyStop::default(),
        };
        Self::with_state(config, env, reflector, state)
    }

    /// Builds the environment and reflector the config names.
    pub fn from_config(config: EsplConfig) -> Result<Self, OrchestratorError> {
        let env = Environment::from_config(&config)?;
        let reflector = build_reflector(&config, &env)?;
        Self::new(config, env, reflector)
    }

    fn with_state(
        config: EsplConfig,
        env: Environment,
        reflector: Box<dyn Reflector>,
        state: TrainState,
    ) -> Result<Self, OrchestratorError> {
        let problems = env.problems();
        if problems.is_empty() {
            return Err(OrchestratorError::Config("environment has no problems".into()));
        }
        Ok(Self {
            key: StreamKey::root(config.seed),
            config,
            env,
            problems,
            reflector,
            state,
            out: None,
        })
    }

    /// Continues from a checkpoint. With `dir`, the metrics log there is cut
    /// back to what the checkpoint covers and appended to.
    pub fn resume(
        ckpt: Checkpoint,
        env: Environment,
        reflector: Box<dyn Reflector>,
        dir: Option<&Path>,
    ) -> Result<Self, OrchestratorError> {
        if ckpt.config.hash() != ckpt.config_hash {
            return Err(OrchestratorError::Checkpoint("config hash mismatch".into()));
        }
        let mut t = Self::with_state(ckpt.config, env, reflector, ckpt.state)?;
        if let Some(dir) = dir {
            let path = dir.join(METRICS_FILE);
            let kept: Vec<String> = BufReader::new(File::open(&path)?)
                .lines()
                .take(ckpt.metrics_lines as usize)
                .collect::<Result<_, _>>()?;
            if kept.len() as u64 != ckpt.metrics_lines {
                return Err(OrchestratorError::Checkpoint(format!(
                    "{} has {} lines, checkpoint expects {}",
                    path.display(),
                    kept.len(),
                    ckpt.metrics_lines
                )));
            }
            let mut body = kept.join("\n");
            body.push('\n');
            write_atomic(&path, body.as_bytes())?;
            let file = OpenOptions::new().append(true).open(&path)?;
            t.out = Some(Output { dir: dir.to_path_buf(), metrics: BufWriter::new(file), lines: ckpt.metrics_lines });
        }
        Ok(t)
    }

    /// Starts a fresh metrics log in `dir` and checkpoints there.
    pub fn write_to(&mut self, dir: &Path) -> Result<(), OrchestratorError> {
        std::fs::create_dir_all(dir)?;
        let file = File::create(dir.join(METRICS_FILE))?;
        let mut out = Output { dir: dir.to_path_buf(), metrics: BufWriter::new(file), lines: 0 };
        let root = self.state.population.root();
        let header = MetricsLine::Header(HeaderRecord {
            version: METRICS_VERSION,
            config_hash: self.config.hash(),
            seed: self.config.seed,
            rating: self.config.rating.clone(),
            genetic: self.config.genetic.clone(),
            root_id: root.id,
            root_rating: root.rating,
        });
        write_line(&mut out, &header)?;
        self.out = Some(out);
        Ok(())
    }

    pub fn config(&self) -> &EsplConfig {
        &self.config
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn environment(&self) -> &Environment {
        &self.env
    }

    /// Highest-μ prompt; ties go to the lowest id.
    pub fn top_prompt(&self) -> &PromptNode {
        let nodes = self.state.population.nodes();
        let mut best = &nodes[0];
        for n in &nodes[1..] {
            if n.rating.mu() > best.rating.mu() {
                best = n;
            }
        }
        best
    }

    /// Exact expected reward of the top-μ prompt under the current policy,
    /// averaged over every problem. Synthetic environment only.
    pub fn evaluate_top(&self) -> Option<f64> {
        match (&self.env, &self.state.policy) {
            (Environment::Synthetic(env), Some(policy)) => Some(env.evaluate(policy, &self.top_prompt().text)),
            _ => None,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config_hash: self.config.hash(),
            config: self.config.clone(),
            seed: self.config.seed,
            state: self.state.clone(),
            metrics_lines: self.out.as_ref().map_or(0, |o| o.lines),
        }
    }

    fn save_checkpoint(&mut self) -> Result<Option<PathBuf>, OrchestratorError> {
        let ckpt = self.checkpoint();
        match &mut self.out {
            Some(out) => {
                out.metrics.flush()?;
                Ok(Some(ckpt.save(&out.dir)?))
            }
            None => Ok(None),
        }
    }

    fn sample(&self, t: u64, prompts: &[PromptRef<'_>], problems: &[Problem], events: &mut Vec<Event>) -> Result<(RolloutBatch, u32), OrchestratorError> {
        let mut attempt = 0u32;
        loop {
            let key = self.key.purpose("rollout").indices(&[t, u64::from(attempt)]);
            let result: Result<RolloutBatch, RolloutError> = match (&self.env, &self.state.policy) {
                (Environment::Synthetic(env), Some(policy)) => {
                    sample_batch(&SyntheticSampler { env, policy }, prompts, problems, self.config.n, key)
                }
                (Environment::Synthetic(_), None) => {
                    return Err(OrchestratorError::Checkpoint("synthetic state has no policy".into()))
                }
                (Environment::Http { sampler, .. }, _) => sample_batch(sampler, prompts, problems, self.config.n, key),
            };
            attempt += 1;
            match result {
                Ok(batch) => return Ok((batch, attempt)),
                Err(e) if attempt <= self.config.rollout_retries => {
                    log::warn!("iteration {t}: rollout attempt {attempt} failed: {e}");
                    events.push(Event::new(Stage::Rollout, "retry", Some(e.to_string())));
                }
                Err(source) => return Err(OrchestratorError::Rollout { iteration: t, source }),
            }
        }
    }

    pub fn run_iteration(&mut self) -> Result<IterationRecord, OrchestratorError> {
        let t = self.state.iteration;
        let cfg = &self.config;
        let mut events = Vec::new();
        let pop_err = |source| OrchestratorError::Population { iteration: t, source };

        let ids = select(&self.state.population, &cfg.selection_policy(), &mut self.key.purpose("select").index(t).rng());
        events.push(Event::new(Stage::Select, "ok", None));

        let b = cfg.batch_size.min(self.problems.len());
        let picks = index::sample(&mut self.key.purpose("problems").index(t).rng(), self.problems.len(), b);
        let problems: Vec<Problem> = picks.iter().map(|i| self.problems[i].clone()).collect();
        let texts: Vec<String> = ids
            .iter()
            .map(|&id| self.state.population.get(id).map(|n| n.text.clone()))
            .collect::<Result<_, _>>()
            .map_err(pop_err)?;
        let prompts: Vec<PromptRef<'_>> = ids.iter().zip(&texts).map(|(&id, text)| PromptRef { id, text }).collect();
        let (batch, rollout_attempts) = self.sample(t, &prompts, &problems, &mut events)?;
        events.push(Event::new(Stage::Rollout, "ok", None));

        let cfg = &self.config;
        let mut kl = None;
        match (&mut self.state.policy, cfg.rl_enabled) {
            (Some(policy), true) => {
                policy
                    .step(&batch, &cfg.rl)
                    .map_err(|source| OrchestratorError::Policy { iteration: t, source })?;
                events.push(Event::new(Stage::RlUpdate, "ok", None));
            }
            (None, true) => events.push(Event::new(Stage::RlUpdate, "skipped", Some("no trainable policy".into()))),
            (_, false) => events.push(Event::new(Stage::RlUpdate, "disabled", None)),
        }
        if let Some(policy) = &self.state.policy {
            kl = Some(
                policy
                    .kl_to_reference(&batch)
                    .map_err(|source| OrchestratorError::Policy { iteration: t, source })?
                    .0,
            );
        }

        let values = aggregate_tournament_values(&batch);
        let ranking = if ids.len() >= 2 {
            let r = self
                .state
                .population
                .record_tournament(&ids, &values, &cfg.rating)
                .map_err(pop_err)?;
            events.push(Event::new(Stage::RatingUpdate, "ok", None));
            Some(r)
        } else {
            events.push(Event::new(Stage::RatingUpdate, "skipped", Some("single participant".into())));
            None
        };
        let participants: Vec<PromptNode> = ids
            .iter()
            .map(|&id| self.state.population.get(id).cloned())
            .collect::<Result<_, _>>()
            .map_err(pop_err)?;
        let posteriors = participants.iter().map(|n| n.rating).collect();

        let mut children = Vec::new();
        if cfg.evolution_enabled {
            let ev = Evidence {
                batch: &batch,
                participants: &participants,
                problems: &problems,
                backend: self.reflector.as_ref(),
                max_principle_chars: cfg.reflector.max_principle_chars,
            };
            let mutation = mutate(&ev, &cfg.genetic);
            let crossover = maybe_crossover(&ev, &cfg.genetic, &mut self.key.purpose("crossover").index(t).rng());
            for (stage, outcome) in [(Stage::Mutation, mutation), (Stage::Crossover, crossover)] {
                match outcome {
                    Outcome::Child(draft) => {
                        let (origin, parent_ids, rating, text) =
                            (draft.origin, draft.parent_ids.clone(), draft.rating, draft.text.clone());
                        match self.state.population.append(draft, t + 1) {
                            Ok(id) => {
                                events.push(Event::new(stage, "child", Some(id.to_string())));
                                children.push(ChildRecord { id, origin, parent_ids, rating, text });
                            }
                            Err(e) => {
                                log::warn!("iteration {t}: child rejected: {e}");
                                events.push(Event::new(stage, "rejected", Some(e.to_string())));
                            }
                        }
                    }
                    Outcome::NotFired => events.push(Event::new(stage, "not_fired", None)),
                    Outcome::Skipped(why) => events.push(Event::new(stage, "skipped", Some(why))),
                }
            }
        } else {
            events.push(Event::new(Stage::Mutation, "disabled", None));
            events.push(Event::new(Stage::Crossover, "disabled", None));
        }

        let mean_reward = batch.mean_reward();
        self.state.early_stop.observe(mean_reward);
        self.state.iteration = t + 1;
        let record = IterationRecord {
            iteration: t,
            participants: ids,
            problem_ids: batch.problem_ids.clone(),
            values,
            mean_reward,
            rollout_attempts,
            ranking,
            posteriors,
            best_index: best_prompt(&batch),
            children,
            events,
            kl,
        };
        if let Some(out) = &mut self.out {
            write_line(out, &MetricsLine::Iteration(record.clone()))?;
        }
        Ok(record)
    }

    /// Iterates up to the configured budget, checkpointing on schedule and
    /// once at the end.
    pub fn run(&mut self) -> Result<RunSummary, OrchestratorError> {
        let start = self.state.iteration;
        let mut stopped_early = false;
        let mut last_checkpoint = None;
        while self.state.iteration < self.config.iterations {
            self.run_iteration()?;
            let every = self.config.checkpoint_every;
            if every > 0 && self.state.iteration.is_multiple_of(every) {
                last_checkpoint = self.save_checkpoint()?;
            }
            if let Some(patience) = self.config.early_stop_patience {
                if self.state.early_stop.since_best >= patience {
                    log::info!("early stop at iteration {}", self.state.iteration);
                    stopped_early = true;
                    break;
                }
            }
        }
        let already = last_checkpoint
            .as_ref()
            .is_some_and(|p: &PathBuf| p.ends_with(Checkpoint::file_name(self.state.iteration)));
        if !already {
            last_checkpoint = self.save_checkpoint()?.or(last_checkpoint);
        }
        if let Some(out) = &mut self.out {
            out.metrics.flush()?;
        }
        Ok(RunSummary { start_iteration: start, end_iteration: self.state.iteration, stopped_early, last_checkpoint })
    }

    pub fn population(&self) -> &Population {
        &self.state.population
    }

    pub fn rating_of(&self, id: NodeId) -> Option<crate::rating::Rating> {
        self.state.population.get(id).ok().map(|n| n.rating)
    }
}

fn write_line(out: &mut Output, line: &MetricsLine) -> Result<(), OrchestratorError> {
    serde_json::to_writer(&mut out.metrics, line).map_err(std::io::Error::from)?;
    out.metrics.write_all(b"\n")?;
    out.lines += 1;
    Ok(())
}
