//! Exhaustive bounded exploration of delivery interleavings.
//!
//! Pending deliveries form a multiset that is consumed on delivery. At each
//! node the explorer branches on every distinct pending delivery, on a timer
//! expiry at every honest validator (optional) and on every not-yet-used
//! entry of the adversary vocabulary. Revisits are pruned with a 128-bit
//! fingerprint of the global state that remembers the largest remaining
//! depth already explored from it.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeSet, HashMap};
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::monitor::Violation;
use crate::types::*;
use crate::validator::{Dest, Outgoing};

use super::adversary::{check_injection, load_script, InjectError, ScriptError};
use super::config::{AdversaryStrategy, SimConfig};
use super::{SimEvent, World};

pub const MAX_VOCABULARY: usize = 6;

#[derive(Clone, Debug)]
pub struct ExploreOptions {
    pub depth: usize,
    pub max_states: u64,
    pub timers: bool,
    pub vocabulary: Vec<(Dest, Message)>,
}

impl ExploreOptions {
    pub fn new(depth: usize) -> ExploreOptions {
        ExploreOptions {
            depth,
            max_states: 20_000_000,
            timers: false,
            vocabulary: Vec::new(),
        }
    }

    /// Vocabulary from a scripted adversary file; step numbers are ignored
    /// and every entry is multicast.
    pub fn from_config(cfg: &SimConfig, depth: usize) -> Result<ExploreOptions, ScriptError> {
        let mut o = ExploreOptions::new(depth);
        if let AdversaryStrategy::Scripted(p) = &cfg.adversary_strategy {
            o.vocabulary = load_script(p, &cfg.byzantine)?
                .into_iter()
                .map(|(_, m)| (Dest::All, m))
                .collect();
        }
        Ok(o)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExploreError {
    #[error("vocabulary has {0} entries; at most {MAX_VOCABULARY} are allowed")]
    Vocabulary(usize),
    #[error(transparent)]
    Inject(#[from] InjectError),
    #[error(transparent)]
    Config(#[from] super::config::ConfigError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExploreReport {
    pub depth: usize,
    pub states: u64,
    pub complete: bool,
    pub violations: Vec<Violation>,
    /// Events from the initial state to the first violation.
    pub counterexample: Vec<SimEvent>,
}

impl ExploreReport {
    pub fn render(&self) -> String {
        let mut s = format!(
            "explore depth={} states={} complete={} violations={}\n",
            self.depth,
            self.states,
            self.complete,
            self.violations.len()
        );
        for v in &self.violations {
            s.push_str(&format!("{v}\n"));
        }
        s
    }
}

#[derive(Clone)]
struct Node {
    world: World,
    pending: Vec<(ValidatorId, Message)>,
    used: u8,
    vhash: Vec<u64>,
}

fn hash64<T: Hash + ?Sized>(x: &T) -> u64 {
    let mut h = DefaultHasher::new();
    x.hash(&mut h);
    h.finish()
}

impl Node {
    fn push(&mut self, outbox: &[Outgoing], honest: &[ValidatorId]) {
        for o in outbox {
            match o.to {
                Dest::All => {
                    for &h in honest {
                        self.pending.push((h, o.msg.clone()));
                    }
                }
                Dest::To(d) if honest.contains(&d) => self.pending.push((d, o.msg.clone())),
                Dest::To(_) => {}
            }
        }
    }

    fn fingerprint(&self) -> u128 {
        let mut pend: Vec<u64> = self.pending.iter().map(hash64).collect();
        pend.sort_unstable();
        let mut out = 0u128;
        for salt in [0x5eed_u64, 0xfee1_u64] {
            let mut h = DefaultHasher::new();
            salt.hash(&mut h);
            self.vhash.hash(&mut h);
            pend.hash(&mut h);
            self.used.hash(&mut h);
            self.world.monitor.ledger().hash(&mut h);
            out = (out << 64) | h.finish() as u128;
        }
        out
    }
}

struct Explorer<'a> {
    opts: &'a ExploreOptions,
    honest: Vec<ValidatorId>,
    memo: HashMap<u128, usize>,
    states: u64,
    complete: bool,
    path: Vec<SimEvent>,
    found: Option<(Vec<Violation>, Vec<SimEvent>)>,
}

impl Explorer<'_> {
    fn step(&self, node: &Node, ev: &SimEvent, vocab: Option<usize>, depth_done: usize) -> Node {
        let mut child = node.clone();
        if let Some(j) = vocab {
            child.used |= 1 << j;
        }
        match ev {
            SimEvent::Deliver { dst, msg } => {
                let i = child
                    .pending
                    .iter()
                    .position(|(d, m)| d == dst && m == msg)
                    .expect("delivery comes from the pending set");
                child.pending.swap_remove(i);
            }
            _ => {}
        }
        let outbox = child.world.apply(ev).expect("explorer only targets honest validators");
        if let SimEvent::Deliver { dst, .. } | SimEvent::TimerExpire { dst } = ev {
            let i = child.world.slot(*dst).unwrap();
            child.vhash[i] = hash64(&*child.world.validators[i]);
        }
        child.push(&outbox, &self.honest);
        child.world.observe(depth_done as u64, &outbox);
        child
    }

    fn successors(&self, node: &Node) -> Vec<(SimEvent, Option<usize>)> {
        let mut seen = BTreeSet::new();
        let mut evs = Vec::new();
        for (dst, msg) in &node.pending {
            if seen.insert((*dst, msg)) {
                evs.push((
                    SimEvent::Deliver {
                        dst: *dst,
                        msg: msg.clone(),
                    },
                    None,
                ));
            }
        }
        if self.opts.timers {
            for &h in &self.honest {
                evs.push((SimEvent::TimerExpire { dst: h }, None));
            }
        }
        for (j, (to, msg)) in self.opts.vocabulary.iter().enumerate() {
            if node.used & (1 << j) == 0 {
                evs.push((
                    SimEvent::Inject {
                        to: *to,
                        msg: msg.clone(),
                    },
                    Some(j),
                ));
            }
        }
        evs
    }

    fn dfs(&mut self, node: &Node, remaining: usize) {
        if self.found.is_some() {
            return;
        }
        if self.states >= self.opts.max_states {
            self.complete = false;
            return;
        }
        self.states += 1;
        let v = node.world.monitor.violations();
        if !v.is_empty() {
            self.found = Some((v.to_vec(), self.path.clone()));
            return;
        }
        if remaining == 0 {
            return;
        }
        for (ev, vocab) in self.successors(node) {
            let child = self.step(node, &ev, vocab, self.path.len() + 1);
            let key = child.fingerprint();
            match self.memo.get(&key) {
                Some(&r) if r >= remaining - 1 => continue,
                _ => {
                    self.memo.insert(key, remaining - 1);
                }
            }
            self.path.push(ev);
            self.dfs(&child, remaining - 1);
            self.path.pop();
            if self.found.is_some() {
                return;
            }
        }
    }
}

pub fn explore(cfg: &SimConfig, opts: &ExploreOptions) -> Result<ExploreReport, ExploreError> {
    cfg.validate()?;
    if opts.vocabulary.len() > MAX_VOCABULARY {
        return Err(ExploreError::Vocabulary(opts.vocabulary.len()));
    }
    for (_, m) in &opts.vocabulary {
        check_injection(&cfg.byzantine, m)?;
    }
    let honest = cfg.honest();
    let mut root = Node {
        world: World::new(cfg),
        pending: Vec::new(),
        used: 0,
        vhash: Vec::new(),
    };
    let outbox = root.world.apply(&SimEvent::Init).unwrap();
    root.vhash = root.world.validators.iter().map(|v| hash64(&**v)).collect();
    root.push(&outbox, &honest);
    root.world.observe(0, &outbox);

    let mut ex = Explorer {
        opts,
        honest,
        memo: HashMap::new(),
        states: 0,
        complete: true,
        path: Vec::new(),
        found: None,
    };
    ex.memo.insert(root.fingerprint(), opts.depth);
    ex.dfs(&root, opts.depth);
    let (violations, counterexample) = ex.found.unwrap_or_default();
    Ok(ExploreReport {
        depth: opts.depth,
        states: ex.states,
        complete: ex.complete,
        violations,
        counterexample,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_zero_visits_one_state() {
        let r = explore(&SimConfig::default(), &ExploreOptions::new(0)).unwrap();
        assert_eq!((r.states, r.complete), (1, true));
        assert!(r.violations.is_empty());
    }

    #[test]
    fn honest_initial_proposals_depth_four() {
        let r = explore(&SimConfig::default(), &ExploreOptions::new(4)).unwrap();
        assert!(r.complete);
        assert!(r.violations.is_empty());
        assert!(r.states > 4);
    }

    #[test]
    fn oversized_vocabulary_is_rejected() {
        let cfg = SimConfig {
            byzantine: BTreeSet::from([ValidatorId(3)]),
            ..SimConfig::default()
        };
        let m = Message::Qc {
            qc: QuorumCert::genesis(4),
            src: ValidatorId(3),
        };
        let mut o = ExploreOptions::new(1);
        o.vocabulary = vec![(Dest::All, m); 7];
        assert!(matches!(explore(&cfg, &o), Err(ExploreError::Vocabulary(7))));
    }

    #[test]
    fn budget_exhaustion_marks_incomplete() {
        let mut o = ExploreOptions::new(6);
        o.max_states = 10;
        let r = explore(&SimConfig::default(), &o).unwrap();
        assert!(!r.complete);
        assert_eq!(r.states, 10);
    }
}
