//! Seeded discrete-event simulation of honest replicas on an adversarial
//! network.

pub mod adversary;
pub mod config;
pub mod explore;
pub mod trace;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::Canonical;
use crate::monitor::{Failure, Monitor, Violation};
use crate::types::*;
use crate::validator::{Dest, Outgoing, ValidatorState};

use adversary::{check_injection, Adversary, ScriptError};
use config::{ConfigError, Rational, SimConfig};

pub use explore::{explore, ExploreOptions, ExploreReport};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimEvent {
    /// Every honest validator runs its entry step for view 1.
    Init,
    Deliver { dst: ValidatorId, msg: Message },
    TimerExpire { dst: ValidatorId },
    Inject { to: Dest, msg: Message },
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Script(#[from] ScriptError),
    #[error(transparent)]
    Trace(#[from] trace::TraceError),
    #[error("trace mismatch at step {step}: recorded {recorded}, recomputed {recomputed}")]
    TraceMismatch {
        step: u64,
        recorded: String,
        recomputed: String,
    },
    #[error("trace event at step {step} targets non-honest validator {dst:?}")]
    BadEvent { step: u64, dst: ValidatorId },
    #[error("cannot read trace: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub steps: u64,
    /// Committed blocks per honest validator, genesis excluded.
    pub commits: BTreeMap<ValidatorId, usize>,
    pub first_commit_step: Option<u64>,
    pub warnings: u64,
    pub violations: Vec<Violation>,
    #[serde(skip)]
    pub trace_path: Option<PathBuf>,
}

impl RunReport {
    pub fn is_safe(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn max_chain(&self) -> usize {
        self.commits.values().copied().max().unwrap_or(0)
    }

    pub fn min_commits(&self) -> usize {
        self.commits.values().copied().min().unwrap_or(0)
    }

    pub fn total_commits(&self) -> usize {
        self.commits.values().sum()
    }

    /// Text form. The trace path is deliberately left out so a replayed run
    /// renders byte-identically.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let commits: Vec<String> = self.commits.iter().map(|(v, c)| format!("{}:{c}", v.0)).collect();
        let first = self
            .first_commit_step
            .map(|s| s.to_string())
            .unwrap_or_else(|| "none".into());
        let _ = writeln!(
            s,
            "seed={} steps={} commits=[{}] max_chain={} first_commit_step={} warnings={} violations={}",
            self.seed,
            self.steps,
            commits.join(","),
            self.max_chain(),
            first,
            self.warnings,
            self.violations.len()
        );
        for v in &self.violations {
            let _ = writeln!(s, "{v}");
        }
        s
    }
}

fn hit(rng: &mut ChaCha8Rng, p: Rational) -> bool {
    match p.num {
        0 => false,
        _ if p.num == p.den => true,
        _ => rng.gen_range(0..p.den) < p.num,
    }
}

/// Validators, monitor and bookkeeping shared by `run`, `replay` and
/// `explore`.
#[derive(Clone, Debug)]
pub(crate) struct World {
    pub(crate) validators: Vec<Arc<ValidatorState>>,
    slot: Vec<Option<usize>>,
    pub(crate) monitor: Monitor,
    first_commit_step: Option<u64>,
}

impl World {
    pub(crate) fn new(cfg: &SimConfig) -> World {
        let n = cfg.n();
        let mut slot = vec![None; n];
        let validators: Vec<Arc<ValidatorState>> = cfg
            .honest()
            .into_iter()
            .enumerate()
            .map(|(i, id)| {
                slot[id.index()] = Some(i);
                Arc::new(ValidatorState::new(id, cfg.f, cfg.mutation))
            })
            .collect();
        World {
            validators,
            slot,
            monitor: Monitor::new(cfg.f, &cfg.byzantine),
            first_commit_step: None,
        }
    }

    pub(crate) fn slot(&self, id: ValidatorId) -> Option<usize> {
        self.slot.get(id.index()).copied().flatten()
    }

    pub(crate) fn is_honest(&self, id: ValidatorId) -> bool {
        self.slot.get(id.index()).copied().flatten().is_some()
    }

    /// Applies one event and returns the resulting outbox. `None` if the
    /// event names a validator that is not simulated.
    pub(crate) fn apply(&mut self, event: &SimEvent) -> Option<Vec<Outgoing>> {
        Some(match event {
            SimEvent::Init => self.validators.iter_mut().flat_map(|v| Arc::make_mut(v).bootstrap()).collect(),
            SimEvent::Deliver { dst, msg } => {
                let i = self.slot.get(dst.index()).copied().flatten()?;
                Arc::make_mut(&mut self.validators[i]).handle_message(msg.clone())
            }
            SimEvent::TimerExpire { dst } => {
                let i = self.slot.get(dst.index()).copied().flatten()?;
                Arc::make_mut(&mut self.validators[i]).timer_expire()
            }
            SimEvent::Inject { to, msg } => vec![Outgoing {
                to: *to,
                msg: msg.clone(),
            }],
        })
    }

    /// Records the outbox with the monitor and runs all checks.
    pub(crate) fn observe(&mut self, step: u64, outbox: &[Outgoing]) -> Vec<Violation> {
        let mut failures: Vec<Failure> = Vec::new();
        for o in outbox {
            self.monitor.observe_send(o.msg.src(), &o.msg, &mut failures);
        }
        if self.first_commit_step.is_none() && self.validators.iter().any(|v| v.committed().len() > 1) {
            self.first_commit_step = Some(step);
        }
        self.monitor.check(step, &self.validators, failures).to_vec()
    }

    fn report(&self, seed: u64, steps: u64) -> RunReport {
        RunReport {
            seed,
            steps,
            commits: self
                .validators
                .iter()
                .map(|v| (v.id(), v.committed().len() - 1))
                .collect(),
            first_commit_step: self.first_commit_step,
            warnings: self.monitor.warnings(),
            violations: self.monitor.violations().to_vec(),
            trace_path: None,
        }
    }
}

pub struct Simulation {
    cfg: SimConfig,
    rng: ChaCha8Rng,
    world: World,
    adversary: Adversary,
    pending: Vec<(ValidatorId, Arc<Message>)>,
    honest: Vec<ValidatorId>,
    step: u64,
    started: bool,
    trace: Option<String>,
}

impl Simulation {
    pub fn new(cfg: SimConfig, tracing: bool) -> Result<Simulation, SimError> {
        cfg.validate()?;
        let adversary = Adversary::new(&cfg)?;
        Ok(Self::with_adversary(cfg, adversary, tracing))
    }

    pub fn with_adversary(cfg: SimConfig, adversary: Adversary, tracing: bool) -> Simulation {
        Simulation {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            world: World::new(&cfg),
            honest: cfg.honest(),
            trace: tracing.then(|| trace::header(&cfg)),
            cfg,
            adversary,
            pending: Vec::new(),
            step: 0,
            started: false,
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn validators(&self) -> impl Iterator<Item = &ValidatorState> {
        self.world.validators.iter().map(|v| &**v)
    }

    /// Snapshot of the honest validators, for the pure `check_*` functions.
    pub fn states(&self) -> Vec<ValidatorState> {
        self.validators().cloned().collect()
    }

    pub fn monitor(&self) -> &Monitor {
        &self.world.monitor
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    fn random_honest(&mut self) -> Option<ValidatorId> {
        if self.honest.is_empty() {
            return None;
        }
        let i = self.rng.gen_range(0..self.honest.len());
        Some(self.honest[i])
    }

    fn choose_event(&mut self) -> Option<SimEvent> {
        let step = self.step;
        if self.adversary.has_due(step) || (!self.adversary.is_passive() && hit(&mut self.rng, self.cfg.inject_probability)) {
            if let Some((to, msg)) = self.adversary.next(step, &mut self.rng) {
                return Some(SimEvent::Inject { to, msg });
            }
        }
        if !self.cfg.quiescent_timers && hit(&mut self.rng, self.cfg.timer_probability) {
            if let Some(dst) = self.random_honest() {
                return Some(SimEvent::TimerExpire { dst });
            }
        }
        if !self.pending.is_empty() {
            let i = self.rng.gen_range(0..self.pending.len());
            let (dst, msg) = self.pending.swap_remove(i);
            let msg = Arc::try_unwrap(msg).unwrap_or_else(|m| (*m).clone());
            return Some(SimEvent::Deliver { dst, msg });
        }
        if !self.adversary.script_exhausted() {
            if let Some((to, msg)) = self.adversary.next(u64::MAX, &mut self.rng) {
                return Some(SimEvent::Inject { to, msg });
            }
        }
        if self.cfg.quiescent_timers || !self.cfg.timer_probability.is_zero() {
            return self.random_honest().map(|dst| SimEvent::TimerExpire { dst });
        }
        None
    }

    fn fan_out(&mut self, outbox: &[Outgoing]) {
        for o in outbox {
            let msg = Arc::new(o.msg.clone());
            let push_to = |sim: &mut Simulation, dst: ValidatorId| {
                if hit(&mut sim.rng, sim.cfg.drop_probability) {
                    return;
                }
                sim.pending.push((dst, msg.clone()));
                if hit(&mut sim.rng, sim.cfg.duplicate_probability) {
                    sim.pending.push((dst, msg.clone()));
                }
            };
            match o.to {
                Dest::All => {
                    for k in 0..self.honest.len() {
                        let dst = self.honest[k];
                        push_to(self, dst);
                    }
                }
                Dest::To(dst) => {
                    if self.world.is_honest(dst) {
                        push_to(self, dst);
                    }
                }
            }
        }
    }

    fn execute(&mut self, event: SimEvent) -> bool {
        if let SimEvent::Inject { msg, .. } = &event {
            assert!(
                check_injection(&self.cfg.byzantine, msg).is_ok(),
                "adversary attempted to inject a message with an honest source"
            );
        }
        let outbox = self.world.apply(&event).expect("scheduler only targets honest validators");
        if !self.adversary.is_passive() {
            for o in &outbox {
                self.adversary.observe(&o.msg);
            }
        }
        self.fan_out(&outbox);
        let found = self.world.observe(self.step, &outbox);
        if let Some(t) = &mut self.trace {
            t.push_str(&trace::record_line(self.step, &event, &outbox));
            for v in &found {
                let _ = writeln!(t, "{v}");
            }
        }
        found.is_empty()
    }

    /// Executes one event. Returns false once the run is over: `max_steps`
    /// reached, a violation found, or nothing left to schedule.
    pub fn step(&mut self) -> bool {
        if !self.started {
            self.started = true;
            return self.execute(SimEvent::Init);
        }
        if self.step >= self.cfg.max_steps || !self.world.monitor.violations().is_empty() {
            return false;
        }
        let Some(ev) = self.choose_event() else { return false };
        self.step += 1;
        self.execute(ev)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Runs to `max_steps`, the first violation, or until nothing can happen.
    pub fn run(&mut self) -> RunReport {
        while self.step() {}
        self.world.report(self.cfg.seed, self.step)
    }

    pub fn take_trace(&mut self) -> Option<String> {
        self.trace.take()
    }
}

pub fn run(cfg: &SimConfig) -> Result<RunReport, SimError> {
    Ok(Simulation::new(cfg.clone(), false)?.run())
}

/// Runs with tracing and returns the report with the full trace text.
pub fn run_traced(cfg: &SimConfig) -> Result<(RunReport, String), SimError> {
    let mut sim = Simulation::new(cfg.clone(), true)?;
    let report = sim.run();
    Ok((report, sim.take_trace().unwrap_or_default()))
}

/// Re-executes a recorded trace and checks every outbox against the record.
pub fn replay_str(text: &str) -> Result<RunReport, SimError> {
    let parsed = trace::parse(text)?;
    let cfg = parsed.config;
    cfg.validate()?;
    let mut world = World::new(&cfg);
    let mut last = 0;
    for rec in &parsed.records {
        if let SimEvent::Inject { msg, .. } = &rec.event {
            if check_injection(&cfg.byzantine, msg).is_err() {
                return Err(SimError::TraceMismatch {
                    step: rec.step,
                    recorded: rec.event.canonical(),
                    recomputed: "injection with honest source".into(),
                });
            }
        }
        let outbox = world.apply(&rec.event).ok_or_else(|| SimError::BadEvent {
            step: rec.step,
            dst: match &rec.event {
                SimEvent::Deliver { dst, .. } | SimEvent::TimerExpire { dst } => *dst,
                _ => ValidatorId(u32::MAX),
            },
        })?;
        let recomputed = outbox.canonical();
        if recomputed != rec.outbox {
            return Err(SimError::TraceMismatch {
                step: rec.step,
                recorded: rec.outbox.clone(),
                recomputed,
            });
        }
        world.observe(rec.step, &outbox);
        last = rec.step;
    }
    Ok(world.report(cfg.seed, last))
}

pub fn replay(path: &std::path::Path) -> Result<RunReport, SimError> {
    let text = std::fs::read_to_string(path)?;
    let mut r = replay_str(&text)?;
    r.trace_path = Some(path.to_path_buf());
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn single_validator_commits_alone() {
        let cfg = SimConfig {
            f: 0,
            max_steps: 100,
            ..SimConfig::default()
        };
        let r = run(&cfg).unwrap();
        assert!(r.is_safe());
        assert!(r.commits[&ValidatorId(0)] > 10, "{}", r.render());
    }

    #[test]
    fn honest_run_is_safe_and_live() {
        let cfg = SimConfig {
            seed: 5,
            max_steps: 3000,
            ..SimConfig::default()
        };
        let r = run(&cfg).unwrap();
        assert!(r.is_safe(), "{}", r.render());
        assert!(r.min_commits() >= 1, "{}", r.render());
    }

    #[test]
    fn same_seed_same_trace() {
        let cfg = SimConfig {
            seed: 11,
            max_steps: 400,
            byzantine: BTreeSet::from([ValidatorId(2)]),
            adversary_strategy: config::AdversaryStrategy::Random,
            drop_probability: Rational { num: 1, den: 10 },
            duplicate_probability: Rational { num: 1, den: 10 },
            ..SimConfig::default()
        };
        let (a, ta) = run_traced(&cfg).unwrap();
        let (b, tb) = run_traced(&cfg).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(a, b);
        assert_eq!(run(&cfg).unwrap(), a);
    }

    #[test]
    fn replay_reproduces_report() {
        let cfg = SimConfig {
            seed: 3,
            max_steps: 300,
            byzantine: BTreeSet::from([ValidatorId(0)]),
            adversary_strategy: config::AdversaryStrategy::Equivocator,
            ..SimConfig::default()
        };
        let (r, t) = run_traced(&cfg).unwrap();
        let back = replay_str(&t).unwrap();
        assert_eq!(back.render(), r.render());
    }

    #[test]
    fn tampered_trace_is_detected() {
        let cfg = SimConfig {
            seed: 4,
            max_steps: 50,
            ..SimConfig::default()
        };
        let (_, t) = run_traced(&cfg).unwrap();
        let mut lines: Vec<String> = t.lines().map(String::from).collect();
        let k = lines.iter().position(|l| l.starts_with("step=5 ")).unwrap();
        lines[k] = lines[k].replacen("outbox=[", "outbox=[{\"to\":\"All\",\"msg\":{\"qc\":{}}},", 1);
        let err = replay_str(&(lines.join("\n") + "\n")).unwrap_err();
        assert!(matches!(err, SimError::TraceMismatch { step: 5, .. }), "{err}");
    }
}
