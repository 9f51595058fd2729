//! Campaigns over many seeds and the mutation kill check.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::monitor::{Check, Violation};
use crate::mutation::Mutation;
use crate::sim::config::{AdversaryStrategy, SimConfig};
use crate::sim::explore::{explore, ExploreError, ExploreOptions};
use crate::sim::{run, RunReport, SimError};
use crate::types::*;
use crate::validator::Dest;

#[derive(Clone, Debug)]
pub struct CampaignSpec {
    pub base: SimConfig,
    pub seeds: Range<u64>,
    /// Seed `s` uses `adversaries[s % len]`; empty means the base strategy.
    pub adversaries: Vec<AdversaryStrategy>,
    /// Shift the Byzantine ids by the seed so every position gets a turn.
    pub rotate_byzantine: bool,
    pub jobs: usize,
}

impl CampaignSpec {
    pub fn new(base: SimConfig, seeds: Range<u64>) -> CampaignSpec {
        CampaignSpec {
            base,
            seeds,
            adversaries: Vec::new(),
            rotate_byzantine: false,
            jobs: 1,
        }
    }

    /// The exact configuration executed for `seed`.
    pub fn config_for(&self, seed: u64) -> SimConfig {
        let mut cfg = self.base.clone();
        cfg.seed = seed;
        if !self.adversaries.is_empty() {
            let k = self.adversaries.len() as u64;
            cfg.adversary_strategy = self.adversaries[(seed % k) as usize].clone();
        }
        if self.rotate_byzantine && !cfg.byzantine.is_empty() {
            let n = cfg.n() as u64;
            let shift = (seed / self.adversaries.len().max(1) as u64) % n;
            cfg.byzantine = cfg
                .byzantine
                .iter()
                .map(|b| ValidatorId(((b.0 as u64 + shift) % n) as u32))
                .collect();
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub runs: u64,
    pub violating_runs: u64,
    pub total_commits: u64,
    pub max_chain: usize,
    pub min_steps_to_first_commit: Option<u64>,
    pub max_steps_to_first_commit: Option<u64>,
    /// Runs in which some honest validator never committed.
    pub runs_without_commit: u64,
    pub first_violation: Option<(u64, Violation)>,
    pub violating_seeds: Vec<u64>,
}

impl CampaignSummary {
    pub fn is_safe(&self) -> bool {
        self.violating_runs == 0
    }

    pub fn render(&self) -> String {
        let opt = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_else(|| "none".into());
        let mut s = String::new();
        let _ = writeln!(
            s,
            "campaign runs={} violations={} total_commits={} max_chain={} steps_to_first_commit={}..{} runs_without_commit={}",
            self.runs,
            self.violating_runs,
            self.total_commits,
            self.max_chain,
            opt(self.min_steps_to_first_commit),
            opt(self.max_steps_to_first_commit),
            self.runs_without_commit
        );
        if let Some((seed, v)) = &self.first_violation {
            let _ = writeln!(s, "first_violation seed={seed} {v}");
        }
        s
    }
}

fn pool(jobs: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("thread pool")
}

/// Reports in seed order.
pub fn run_seeds(spec: &CampaignSpec) -> Result<Vec<RunReport>, SimError> {
    spec.base.validate()?;
    pool(spec.jobs).install(|| {
        spec.seeds
            .clone()
            .into_par_iter()
            .map(|s| run(&spec.config_for(s)))
            .collect()
    })
}

pub fn summarize(reports: &[RunReport]) -> CampaignSummary {
    let mut sum = CampaignSummary {
        runs: 0,
        violating_runs: 0,
        total_commits: 0,
        max_chain: 0,
        min_steps_to_first_commit: None,
        max_steps_to_first_commit: None,
        runs_without_commit: 0,
        first_violation: None,
        violating_seeds: Vec::new(),
    };
    for r in reports {
        sum.runs += 1;
        sum.total_commits += r.total_commits() as u64;
        sum.max_chain = sum.max_chain.max(r.max_chain());
        if r.min_commits() == 0 {
            sum.runs_without_commit += 1;
        }
        if let Some(s) = r.first_commit_step {
            sum.min_steps_to_first_commit = Some(sum.min_steps_to_first_commit.map_or(s, |m| m.min(s)));
            sum.max_steps_to_first_commit = Some(sum.max_steps_to_first_commit.map_or(s, |m| m.max(s)));
        }
        if !r.is_safe() {
            sum.violating_runs += 1;
            sum.violating_seeds.push(r.seed);
            if sum.first_violation.is_none() {
                sum.first_violation = Some((r.seed, r.violations[0].clone()));
            }
        }
    }
    sum
}

pub fn campaign(spec: &CampaignSpec) -> Result<CampaignSummary, SimError> {
    Ok(summarize(&run_seeds(spec)?))
}

/// Smallest violating seed in the range, scanning in parallel chunks.
pub fn first_violating_seed(spec: &CampaignSpec) -> Result<Option<RunReport>, SimError> {
    spec.base.validate()?;
    let chunk = (spec.jobs.max(1) * 16) as u64;
    let pool = pool(spec.jobs);
    let mut start = spec.seeds.start;
    while start < spec.seeds.end {
        let end = (start + chunk).min(spec.seeds.end);
        let reports: Result<Vec<RunReport>, SimError> =
            pool.install(|| (start..end).into_par_iter().map(|s| run(&spec.config_for(s))).collect());
        if let Some(r) = reports?.into_iter().find(|r| !r.is_safe()) {
            return Ok(Some(r));
        }
        start = end;
    }
    Ok(None)
}

/// Equivocation by the leader of view 1: conflicting proposals to different
/// validators, Byzantine votes for both and a view-1 timeout.
pub fn equivocation_vocabulary(byz: ValidatorId, n: usize) -> Vec<(Dest, Message)> {
    assert_eq!(leader(View(1), n), byz, "vocabulary assumes the Byzantine validator leads view 1");
    let g = QuorumCert::genesis(n);
    let b = Block::child_of(Block::genesis(), View(1), Payload::tagged(1, byz, 1));
    let bx = Block::child_of(Block::genesis(), View(1), Payload::tagged(1, byz, 2));
    let np = |blk: &Block| Message::NormalProposal {
        block: blk.clone(),
        qc: g.clone(),
        view: View(1),
        src: byz,
    };
    let vote = |blk: &Block| {
        Message::Vote(Vote {
            kind: VoteKind::Normal,
            block: blk.id(),
            view: View(1),
            author: byz,
        })
    };
    let honest: Vec<ValidatorId> = (0..n as u32).map(ValidatorId).filter(|&v| v != byz).collect();
    vec![
        (Dest::To(honest[0]), np(&b)),
        (Dest::To(honest[1]), np(&b)),
        (Dest::To(honest[2]), np(&bx)),
        (Dest::All, vote(&b)),
        (Dest::All, vote(&bx)),
        (
            Dest::All,
            Message::Timeout(TimeoutMsg {
                view: View(1),
                author: byz,
                high_qc: g,
            }),
        ),
    ]
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Kill {
    Campaign { seed: u64, check: Check, adversary: String },
    Explore { depth: usize, check: Check, states: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutantResult {
    pub mutation: Mutation,
    pub kill: Option<Kill>,
}

impl MutantResult {
    pub fn render(&self) -> String {
        match &self.kill {
            Some(Kill::Campaign { seed, check, adversary }) => {
                format!("{} killed by {check} (campaign seed {seed}, {adversary})", self.mutation)
            }
            Some(Kill::Explore { depth, check, states }) => {
                format!("{} killed by {check} (explore depth {depth}, {states} states)", self.mutation)
            }
            None => format!("{} survived", self.mutation),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MutantOptions {
    pub seeds: Range<u64>,
    pub max_steps: u64,
    pub explore_depth: usize,
    pub jobs: usize,
}

impl Default for MutantOptions {
    fn default() -> Self {
        MutantOptions {
            seeds: 0..10_000,
            max_steps: 2000,
            explore_depth: 12,
            jobs: 1,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Explore(#[from] ExploreError),
}

/// Tries to kill one mutation: seeded campaigns with equivocating and
/// vote-splitting adversaries first, then bounded exploration.
pub fn kill_mutant(m: Mutation, opts: &MutantOptions) -> Result<MutantResult, HarnessError> {
    let base = SimConfig {
        f: 1,
        byzantine: BTreeSet::from([ValidatorId(3)]),
        max_steps: opts.max_steps,
        mutation: Some(m),
        ..SimConfig::default()
    };
    let spec = CampaignSpec {
        base: base.clone(),
        seeds: opts.seeds.clone(),
        adversaries: vec![AdversaryStrategy::Equivocator, AdversaryStrategy::VoteSplitter],
        rotate_byzantine: true,
        jobs: opts.jobs,
    };
    if let Some(r) = first_violating_seed(&spec)? {
        return Ok(MutantResult {
            mutation: m,
            kill: Some(Kill::Campaign {
                seed: r.seed,
                check: r.violations[0].check,
                adversary: spec.config_for(r.seed).adversary_strategy.name(),
            }),
        });
    }
    let byz = ValidatorId(1);
    let cfg = SimConfig {
        byzantine: BTreeSet::from([byz]),
        ..base
    };
    let mut eo = ExploreOptions::new(opts.explore_depth);
    eo.timers = true;
    eo.vocabulary = equivocation_vocabulary(byz, cfg.n());
    let r = explore(&cfg, &eo)?;
    Ok(MutantResult {
        mutation: m,
        kill: r.violations.first().map(|v| Kill::Explore {
            depth: opts.explore_depth,
            check: v.check,
            states: r.states,
        }),
    })
}

pub fn kill_all(opts: &MutantOptions) -> Result<Vec<MutantResult>, HarnessError> {
    Mutation::ALL.into_iter().map(|m| kill_mutant(m, opts)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rotation() {
        let spec = CampaignSpec {
            base: SimConfig {
                byzantine: BTreeSet::from([ValidatorId(3)]),
                ..SimConfig::default()
            },
            seeds: 0..8,
            adversaries: AdversaryStrategy::GENERATED.to_vec(),
            rotate_byzantine: true,
            jobs: 1,
        };
        assert_eq!(spec.config_for(0).adversary_strategy, AdversaryStrategy::Passive);
        assert_eq!(spec.config_for(6).adversary_strategy, AdversaryStrategy::Equivocator);
        assert_eq!(spec.config_for(0).byzantine, BTreeSet::from([ValidatorId(3)]));
        assert_eq!(spec.config_for(4).byzantine, BTreeSet::from([ValidatorId(0)]));
        assert_eq!(spec.config_for(7).seed, 7);
    }

    #[test]
    fn summary_is_order_stable() {
        let spec = CampaignSpec {
            base: SimConfig {
                max_steps: 300,
                ..SimConfig::default()
            },
            seeds: 0..6,
            adversaries: Vec::new(),
            rotate_byzantine: false,
            jobs: 2,
        };
        let a = campaign(&spec).unwrap();
        let b = campaign(&CampaignSpec { jobs: 1, ..spec }).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.runs, 6);
        assert!(a.is_safe());
    }
}
