//! Hyperband search over the hyperparameter grid.
//!
//! Resource is training epochs; every rung retrains its configurations from
//! scratch with the trial's fixed seed and scores them by validation loss.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{rng_from_seed, OptimizerKind};

#[derive(Debug, Error, PartialEq)]
pub enum TuningError {
    #[error("bad hyperband arguments: {0}")]
    BadArgs(String),
    #[error("no trial produced a finite validation loss")]
    NoTrialsRan,
    #[error("empty candidate list for `{0}`")]
    EmptyCandidates(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub batch_size: usize,
    pub sequence_length: usize,
    pub lstm_nodes: usize,
    pub n_layers: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
}

impl HyperParams {
    /// Tuned winner for the joint all-feature model.
    pub fn joint_best() -> Self {
        HyperParams {
            batch_size: 16,
            sequence_length: 26,
            lstm_nodes: 64,
            n_layers: 1,
            learning_rate: 0.001,
            optimizer: OptimizerKind::Adam,
        }
    }

    /// Tuned winners for the per-stop baseline, stops 1-5.
    pub fn per_stop_best(stop_index: usize) -> Option<Self> {
        let (batch_size, lstm_nodes, n_layers, optimizer) = match stop_index {
            1 => (256, 16, 1, OptimizerKind::RmsProp),
            2 => (32, 128, 3, OptimizerKind::Nadam),
            3 => (128, 32, 3, OptimizerKind::Nadam),
            4 => (16, 32, 3, OptimizerKind::RmsProp),
            5 => (128, 16, 1, OptimizerKind::Nadam),
            _ => return None,
        };
        Some(HyperParams {
            batch_size,
            sequence_length: 26,
            lstm_nodes,
            n_layers,
            learning_rate: 0.01,
            optimizer,
        })
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.batch_size == 0 {
            return Err("batch_size must be >= 1".into());
        }
        if self.sequence_length == 0 {
            return Err("sequence_length must be >= 1".into());
        }
        if self.lstm_nodes == 0 {
            return Err("lstm_nodes must be >= 1".into());
        }
        if self.n_layers == 0 {
            return Err("n_layers must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(format!("learning_rate {} must be positive", self.learning_rate));
        }
        Ok(())
    }

    /// `key = value` lines, readable back with [`HyperParams::from_kv`].
    pub fn to_kv_text(&self) -> String {
        format!(
            "hp.batch_size = {}\nhp.sequence_length = {}\nhp.lstm_nodes = {}\nhp.n_layers = {}\nhp.learning_rate = {}\nhp.optimizer = {}\n",
            self.batch_size, self.sequence_length, self.lstm_nodes, self.n_layers, self.learning_rate, self.optimizer
        )
    }

    /// Reads `hp.*` keys, falling back to `defaults` for absent ones.
    pub fn from_kv(kv: &crate::config::KvConfig, defaults: HyperParams) -> Result<Self, crate::config::ConfigError> {
        Ok(HyperParams {
            batch_size: kv.parse_or("hp.batch_size", defaults.batch_size)?,
            sequence_length: kv.parse_or("hp.sequence_length", defaults.sequence_length)?,
            lstm_nodes: kv.parse_or("hp.lstm_nodes", defaults.lstm_nodes)?,
            n_layers: kv.parse_or("hp.n_layers", defaults.n_layers)?,
            learning_rate: kv.parse_or("hp.learning_rate", defaults.learning_rate)?,
            optimizer: kv.parse_or("hp.optimizer", defaults.optimizer)?,
        })
    }
}

impl fmt::Display for HyperParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "batch={} seq={} nodes={} layers={} lr={} opt={}",
            self.batch_size, self.sequence_length, self.lstm_nodes, self.n_layers, self.learning_rate, self.optimizer
        )
    }
}

/// Candidate values per hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub batch_size: Vec<usize>,
    pub sequence_length: Vec<usize>,
    pub lstm_nodes: Vec<usize>,
    pub n_layers: Vec<usize>,
    pub learning_rate: Vec<f64>,
    pub optimizer: Vec<OptimizerKind>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            batch_size: vec![16, 32, 64, 128, 256],
            sequence_length: vec![26, 182],
            lstm_nodes: vec![16, 32, 64, 128, 256],
            n_layers: vec![1, 2, 3],
            learning_rate: vec![0.01, 0.001, 0.0001],
            optimizer: OptimizerKind::ALL.to_vec(),
        }
    }
}

impl SearchSpace {
    pub fn cardinality(&self) -> usize {
        self.batch_size.len()
            * self.sequence_length.len()
            * self.lstm_nodes.len()
            * self.n_layers.len()
            * self.learning_rate.len()
            * self.optimizer.len()
    }

    pub fn validate(&self) -> Result<(), TuningError> {
        let empty = [
            ("batch_size", self.batch_size.is_empty()),
            ("sequence_length", self.sequence_length.is_empty()),
            ("lstm_nodes", self.lstm_nodes.is_empty()),
            ("n_layers", self.n_layers.is_empty()),
            ("learning_rate", self.learning_rate.is_empty()),
            ("optimizer", self.optimizer.is_empty()),
        ];
        match empty.iter().find(|(_, e)| *e) {
            Some((name, _)) => Err(TuningError::EmptyCandidates(name)),
            None => Ok(()),
        }
    }

    /// Overrides lists from `tune.*` keys.
    pub fn from_kv(kv: &crate::config::KvConfig) -> Result<Self, crate::config::ConfigError> {
        let d = SearchSpace::default();
        Ok(SearchSpace {
            batch_size: kv.list("tune.batch_size")?.unwrap_or(d.batch_size),
            sequence_length: kv.list("tune.sequence_length")?.unwrap_or(d.sequence_length),
            lstm_nodes: kv.list("tune.lstm_nodes")?.unwrap_or(d.lstm_nodes),
            n_layers: kv.list("tune.n_layers")?.unwrap_or(d.n_layers),
            learning_rate: kv.list("tune.learning_rate")?.unwrap_or(d.learning_rate),
            optimizer: kv.list("tune.optimizer")?.unwrap_or(d.optimizer),
        })
    }
}

/// Independent uniform draw per field.
pub fn sample_config<R: Rng>(space: &SearchSpace, rng: &mut R) -> HyperParams {
    HyperParams {
        batch_size: *space.batch_size.choose(rng).expect("validated non-empty"),
        sequence_length: *space.sequence_length.choose(rng).expect("validated non-empty"),
        lstm_nodes: *space.lstm_nodes.choose(rng).expect("validated non-empty"),
        n_layers: *space.n_layers.choose(rng).expect("validated non-empty"),
        learning_rate: *space.learning_rate.choose(rng).expect("validated non-empty"),
        optimizer: *space.optimizer.choose(rng).expect("validated non-empty"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rung {
    pub n_configs: usize,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bracket {
    pub s: usize,
    pub n_configs: usize,
    pub initial_epochs: usize,
    pub rungs: Vec<Rung>,
}

impl Bracket {
    pub fn total_epochs(&self) -> usize {
        self.rungs.iter().map(|r| r.n_configs * r.epochs).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HyperbandSchedule {
    pub max_epochs: usize,
    pub eta: usize,
    pub s_max: usize,
    pub brackets: Vec<Bracket>,
}

/// Largest `s` with `eta^s <= r`, in exact integer arithmetic.
fn int_log(r: usize, eta: usize) -> usize {
    let mut s = 0;
    let mut p = eta;
    while p <= r {
        s += 1;
        p = match p.checked_mul(eta) {
            Some(v) => v,
            None => break,
        };
    }
    s
}

/// Brackets `s = s_max ..= 0`. Bracket `s` starts `ceil((s_max+1)/(s+1) * eta^s)`
/// configs at `R * eta^-s` epochs; each rung keeps `floor(n/eta)` and multiplies
/// epochs by `eta`.
pub fn make_schedule(max_epochs: usize, eta: usize) -> Result<HyperbandSchedule, TuningError> {
    if max_epochs < 1 {
        return Err(TuningError::BadArgs(format!("R = {max_epochs} must be >= 1")));
    }
    if eta < 2 {
        return Err(TuningError::BadArgs(format!("eta = {eta} must be >= 2")));
    }
    let s_max = int_log(max_epochs, eta);
    let mut brackets = Vec::with_capacity(s_max + 1);
    for s in (0..=s_max).rev() {
        let eta_s = eta.pow(s as u32);
        let n = ((s_max + 1) * eta_s).div_ceil(s + 1);
        let r = max_epochs / eta_s;
        let mut rungs = Vec::with_capacity(s + 1);
        let mut n_i = n;
        let mut r_i = r;
        for i in 0..=s {
            rungs.push(Rung {
                n_configs: n_i,
                epochs: r_i,
            });
            if i < s {
                n_i /= eta;
                r_i *= eta;
            }
        }
        brackets.push(Bracket {
            s,
            n_configs: n,
            initial_epochs: r,
            rungs,
        });
    }
    Ok(HyperbandSchedule {
        max_epochs,
        eta,
        s_max,
        brackets,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial_id: usize,
    pub config_id: usize,
    pub bracket: usize,
    pub rung: usize,
    pub epochs: usize,
    pub hp: HyperParams,
    /// `+inf` for diverged or failed trials.
    pub val_loss: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperbandOutcome {
    pub best: HyperParams,
    pub best_val_loss: f64,
    /// Index into `trials` of the winning record.
    pub best_trial: usize,
    pub trials: Vec<TrialResult>,
}

/// Trains one configuration for a number of epochs and reports validation loss.
pub trait TrialRunner: Sync {
    fn evaluate(&self, hp: &HyperParams, epochs: usize, seed: u64) -> f64;
}

impl<F> TrialRunner for F
where
    F: Fn(&HyperParams, usize, u64) -> f64 + Sync,
{
    fn evaluate(&self, hp: &HyperParams, epochs: usize, seed: u64) -> f64 {
        self(hp, epochs, seed)
    }
}

pub fn run_hyperband<T: TrialRunner>(
    runner: &T,
    schedule: &HyperbandSchedule,
    space: &SearchSpace,
    master_seed: u64,
) -> Result<HyperbandOutcome, TuningError> {
    space.validate()?;
    let mut rng = rng_from_seed(master_seed);
    let mut trials: Vec<TrialResult> = Vec::new();
    let mut config_id = 0;

    for bracket in &schedule.brackets {
        let mut alive: Vec<(usize, HyperParams, u64)> = (0..bracket.n_configs)
            .map(|_| {
                let hp = sample_config(space, &mut rng);
                let seed: u64 = rng.gen();
                config_id += 1;
                (config_id - 1, hp, seed)
            })
            .collect();

        for (rung_idx, rung) in bracket.rungs.iter().enumerate() {
            let losses: Vec<f64> = alive
                .par_iter()
                .map(|(_, hp, seed)| {
                    let l = runner.evaluate(hp, rung.epochs, *seed);
                    if l.is_finite() {
                        l
                    } else {
                        f64::INFINITY
                    }
                })
                .collect();
            let mut scored: Vec<(f64, usize)> = Vec::with_capacity(alive.len());
            for (k, ((cid, hp, seed), loss)) in alive.iter().zip(&losses).enumerate() {
                trials.push(TrialResult {
                    trial_id: trials.len(),
                    config_id: *cid,
                    bracket: bracket.s,
                    rung: rung_idx,
                    epochs: rung.epochs,
                    hp: *hp,
                    val_loss: *loss,
                    seed: *seed,
                });
                scored.push((*loss, k));
            }
            if rung_idx + 1 < bracket.rungs.len() {
                let keep = bracket.rungs[rung_idx + 1].n_configs;
                scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let survivors: Vec<usize> = scored
                    .iter()
                    .filter(|(l, _)| l.is_finite())
                    .take(keep)
                    .map(|&(_, k)| k)
                    .collect();
                let mut next: Vec<_> = survivors.into_iter().map(|k| alive[k]).collect();
                next.sort_by_key(|c| c.0);
                alive = next;
                if alive.is_empty() {
                    break;
                }
            }
        }
    }

    let (best_trial, best) = trials
        .iter()
        .enumerate()
        .filter(|(_, t)| t.val_loss.is_finite())
        .min_by(|a, b| a.1.val_loss.total_cmp(&b.1.val_loss).then(a.0.cmp(&b.0)))
        .ok_or(TuningError::NoTrialsRan)?;
    Ok(HyperbandOutcome {
        best: best.hp,
        best_val_loss: best.val_loss,
        best_trial,
        trials: trials.clone(),
    })
}

pub const REPORT_HEADER: &str =
    "trial_id,bracket,rung,epochs,batch,seq_len,nodes,layers,lr,optimizer,val_loss,seed,winner";

/// Tuning audit trail as CSV, with the winning trial flagged in the last column.
pub fn write_report<W: Write>(outcome: &HyperbandOutcome, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{REPORT_HEADER}")?;
    for (i, t) in outcome.trials.iter().enumerate() {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            t.trial_id,
            t.bracket,
            t.rung,
            t.epochs,
            t.hp.batch_size,
            t.hp.sequence_length,
            t.hp.lstm_nodes,
            t.hp.n_layers,
            t.hp.learning_rate,
            t.hp.optimizer,
            t.val_loss,
            t.seed,
            u8::from(i == outcome.best_trial)
        )?;
    }
    Ok(())
}

impl FromStr for SearchSpace {
    type Err = crate::config::ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SearchSpace::from_kv(&s.parse()?)
    }
}
