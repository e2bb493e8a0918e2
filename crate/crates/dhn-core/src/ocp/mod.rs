//! Receding-horizon economic optimal control: direct transcription of the
//! thermal/hydraulic model into a sparse nonlinear program, move blocking,
//! warm starting, and a primal-dual interior-point solver.

mod ipm;
mod nlp;
mod transcription;

pub use ipm::{solve_nlp, SolveLimits};
pub use nlp::{NlpModel, NlpProblem, NlpSolution, SolveStatus};
pub use transcription::{
    apply_move_blocking, build_ocp, eval_objective, warm_start, MoveBlocking, ObjectiveBreakdown,
    OcpModel, OcpSetup, Trajectory,
};

/// How the complementarity condition q+ q- = 0 on bidirectional pipe pairs
/// is treated inside the NLP.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ComplementarityMode {
    /// q_r >= 0 only, plus a small penalty eps_c * sum q+ q-.
    Penalty { eps_c: f64 },
    /// Relaxed constraints q+ q- <= eps, annealed across restarts.
    Relaxed { eps: f64 },
}

impl Default for ComplementarityMode {
    fn default() -> Self {
        ComplementarityMode::Penalty { eps_c: 1e-3 }
    }
}

/// Tuning knobs of the optimal control problem. Weights follow the paper's
/// ordering: the price term dominates, everything else is regularization.
#[derive(Debug, Clone)]
pub struct OcpOptions {
    /// Prediction horizon N (steps of tau_t).
    pub horizon: usize,
    /// Control horizon N_c <= N; inputs beyond it are pinned.
    pub control_horizon: usize,
    /// Move-blocking block length.
    pub block_len: usize,
    /// Temperature penalty weight (relative to the price scale).
    pub r_temp: f64,
    /// Temperature penalty power p in {1, 2}.
    pub temp_power: u32,
    /// Input-rate penalty weight on successive producer powers.
    pub r_diff: f64,
    /// Terminal storage-temperature tracking weight.
    pub r_sto: f64,
    /// Quadratic slack penalty.
    pub r_slack: f64,
    /// Storage terminal temperature target, as x = T - T_a (K).
    pub storage_target: f64,
    /// Enforce |sum q_charge - sum q_discharge| <= delta over the horizon.
    pub storage_volume_balance: bool,
    /// Volume-balance slack as a fraction of the daily charge volume.
    pub volume_balance_delta: f64,
    /// Complementarity handling for bidirectional pipes.
    pub complementarity: ComplementarityMode,
    /// Add the linear nonnegativity rows of the valve-recovery certificate.
    pub nonnegativity_rows: bool,
    /// Lower bound on loop flows (solver units, keeps logs/derivatives tame).
    pub q_r_min: f64,
    /// Upper bound on loop flows (m^3/s).
    pub q_r_max: f64,
    /// Producer power upper bounds (W), per controllable producer.
    pub p_max: f64,
    /// State (temperature) box as x = T - T_a, in K.
    pub x_min: f64,
    pub x_max: f64,
}

impl Default for OcpOptions {
    fn default() -> Self {
        Self {
            horizon: 32,
            control_horizon: 32,
            block_len: 4,
            r_temp: 1e-4,
            temp_power: 1,
            r_diff: 1e-3,
            r_sto: 1e-2,
            r_slack: 1e4,
            storage_target: 60.0,
            storage_volume_balance: false,
            volume_balance_delta: 0.01,
            complementarity: ComplementarityMode::default(),
            nonnegativity_rows: false,
            q_r_min: 0.0,
            q_r_max: 0.02,
            p_max: 1.2e6,
            x_min: 50.0,
            x_max: 90.0,
        }
    }
}

impl OcpOptions {
    pub fn validate(&self) -> crate::Result<()> {
        use crate::DhnError;
        if self.horizon == 0 {
            return Err(DhnError::Config("horizon must be >= 1".into()));
        }
        if self.control_horizon == 0 || self.control_horizon > self.horizon {
            return Err(DhnError::Config(format!(
                "control horizon {} outside 1..={}",
                self.control_horizon, self.horizon
            )));
        }
        if self.block_len == 0 {
            return Err(DhnError::Config("block length must be >= 1".into()));
        }
        for (name, w) in [
            ("r_temp", self.r_temp),
            ("r_diff", self.r_diff),
            ("r_sto", self.r_sto),
            ("r_slack", self.r_slack),
        ] {
            if w < 0.0 {
                return Err(DhnError::Config(format!("negative weight {name} = {w}")));
            }
        }
        if !(self.temp_power == 1 || self.temp_power == 2) {
            return Err(DhnError::Config(format!(
                "temperature power must be 1 or 2, got {}",
                self.temp_power
            )));
        }
        Ok(())
    }
}
