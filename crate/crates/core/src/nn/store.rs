use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};

use super::{GradientSet, Mlp, OptimizerConfig, RmsPropState};
use crate::error::Result;

/// The shared actor and critic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub actor: Mlp,
    pub critic: Mlp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGradients {
    pub actor: GradientSet,
    pub critic: GradientSet,
}

impl ModelGradients {
    pub fn zeros(params: &ModelParams) -> Self {
        ModelGradients {
            actor: GradientSet::zeros_like(&params.actor.params),
            critic: GradientSet::zeros_like(&params.critic.params),
        }
    }

    pub fn add_scaled(&mut self, other: &ModelGradients, s: f64) -> Result<()> {
        self.actor.add_scaled(&other.actor, s)?;
        self.critic.add_scaled(&other.critic, s)
    }

    pub fn scale(&mut self, s: f64) {
        self.actor.scale(s);
        self.critic.scale(s);
    }
}

/// An immutable view of the parameters at some version.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub params: Arc<ModelParams>,
    pub version: u64,
}

#[derive(Debug)]
struct StoreState {
    params: Arc<ModelParams>,
    actor_opt: RmsPropState,
    critic_opt: RmsPropState,
    version: u64,
}

/// Shared parameters with atomic optimizer applies.
///
/// Readers clone an `Arc` under the lock, so a snapshot never observes a
/// partially applied update: writers copy-on-write when snapshots are live.
#[derive(Debug)]
pub struct ParameterStore {
    state: Mutex<StoreState>,
}

impl ParameterStore {
    pub fn new(params: ModelParams) -> Self {
        let actor_opt = RmsPropState::new(&params.actor.params);
        let critic_opt = RmsPropState::new(&params.critic.params);
        Self::from_parts(params, actor_opt, critic_opt, 0)
    }

    pub fn from_parts(params: ModelParams, actor_opt: RmsPropState, critic_opt: RmsPropState, version: u64) -> Self {
        ParameterStore {
            state: Mutex::new(StoreState {
                params: Arc::new(params),
                actor_opt,
                critic_opt,
                version,
            }),
        }
    }

    fn lock(&self) -> MutexGuard<'_, StoreState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn snapshot(&self) -> Snapshot {
        let st = self.lock();
        Snapshot {
            params: Arc::clone(&st.params),
            version: st.version,
        }
    }

    pub fn version(&self) -> u64 {
        self.lock().version
    }

    /// Applies one RMSProp step to both networks and returns the new version.
    /// On error the store is left untouched.
    pub fn apply(&self, grads: &ModelGradients, cfg: &OptimizerConfig) -> Result<u64> {
        let mut st = self.lock();
        let mut params = (*st.params).clone();
        let mut actor_opt = st.actor_opt.clone();
        let mut critic_opt = st.critic_opt.clone();
        actor_opt.apply(&mut params.actor.params, &grads.actor, cfg)?;
        critic_opt.apply(&mut params.critic.params, &grads.critic, cfg)?;
        st.params = Arc::new(params);
        st.actor_opt = actor_opt;
        st.critic_opt = critic_opt;
        st.version += 1;
        Ok(st.version)
    }

    /// Parameters, optimizer states and version, read atomically.
    pub fn export(&self) -> (ModelParams, RmsPropState, RmsPropState, u64) {
        let st = self.lock();
        (
            (*st.params).clone(),
            st.actor_opt.clone(),
            st.critic_opt.clone(),
            st.version,
        )
    }
}
