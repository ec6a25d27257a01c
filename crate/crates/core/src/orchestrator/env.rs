use std::io::BufReader;
use std::sync::Arc;

use super::{EnvKind, EsplConfig, OrchestratorError};
use crate::policytoy::ToyPolicy;
use crate::reflect::{HttpReflector, MockReflector, Reflector, ReflectorBackend, Templates};
use crate::rollout::{load_problems, ChatSampler, Problem, SyntheticEnv};
use crate::transport::HttpTransport;

/// Where rollouts come from.
pub enum Environment {
    Synthetic(SyntheticEnv),
    Http { problems: Vec<Problem>, sampler: ChatSampler },
}

impl Environment {
    pub fn from_config(cfg: &EsplConfig) -> Result<Self, OrchestratorError> {
        let map = |e: crate::rollout::RolloutError| OrchestratorError::Config(e.to_string());
        match cfg.env.kind {
            EnvKind::Synthetic => {
                let env = match &cfg.env.fixture {
                    Some(path) => SyntheticEnv::open(path).map_err(map)?,
                    None => SyntheticEnv::builtin(),
                };
                Ok(Environment::Synthetic(env))
            }
            EnvKind::Http => {
                let path = cfg
                    .env
                    .problems
                    .as_ref()
                    .ok_or_else(|| OrchestratorError::Config("the http env needs env.problems".into()))?;
                let file = std::fs::File::open(path)
                    .map_err(|e| OrchestratorError::Config(format!("{}: {e}", path.display())))?;
                let problems = load_problems(BufReader::new(file)).map_err(map)?;
                if problems.is_empty() {
                    return Err(OrchestratorError::Config(format!("{} has no problems", path.display())));
                }
                let transport = Arc::new(HttpTransport::new(cfg.env.http.clone())?);
                let sampler = ChatSampler::new(transport, cfg.env.model.clone(), cfg.env.temperature);
                Ok(Environment::Http { problems, sampler })
            }
        }
    }

    pub fn problems(&self) -> Vec<Problem> {
        match self {
            Environment::Synthetic(env) => env.problems(),
            Environment::Http { problems, .. } => problems.clone(),
        }
    }

    pub fn default_root_prompt(&self) -> String {
        match self {
            Environment::Synthetic(env) => env.fixture().root_prompt.clone(),
            Environment::Http { .. } => "You are a helpful assistant that reasons step by step.".into(),
        }
    }

    /// Only the synthetic environment has trainable weights.
    pub fn initial_policy(&self) -> Option<ToyPolicy> {
        match self {
            Environment::Synthetic(env) => Some(ToyPolicy::from_fixture(env.fixture())),
            Environment::Http { .. } => None,
        }
    }

    pub fn lexicon(&self) -> Vec<String> {
        match self {
            Environment::Synthetic(env) => env.lexicon().to_vec(),
            Environment::Http { .. } => Vec::new(),
        }
    }
}

pub fn build_reflector(cfg: &EsplConfig, env: &Environment) -> Result<Box<dyn Reflector>, OrchestratorError> {
    let r = &cfg.reflector;
    Ok(match r.backend {
        ReflectorBackend::Mock => Box::new(MockReflector::new(env.lexicon())),
        ReflectorBackend::Http => {
            let templates = match &r.template_dir {
                Some(dir) => Templates::load(dir)?,
                None => Templates::builtin(),
            };
            let transport = Arc::new(HttpTransport::new(r.http.clone())?);
            Box::new(HttpReflector::new(transport, r.model.clone(), r.temperature, templates))
        }
    })
}
