//! Omniscient safety observer.
//!
//! The [`Monitor`] sees every honest send and every certificate an honest
//! validator acts upon, and evaluates the safety checks after each event.
//! Checks are incremental: each event only examines what changed since the
//! previous one. The `check_*` functions compute the same verdicts from
//! scratch and are used by tests and to name the failing check once the
//! incremental path has spotted trouble.

use std::borrow::Borrow;
use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::block_store::BlockTree;
use crate::types::*;
use crate::validator::ValidatorState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    VerifyQuorum,
    BlockchainPrefix,
    QuorumAfterLdcDescendant,
    AncestorClosure,
    CommittedBlocksAncestors,
    VoteBudget,
    CertificateUniqueness,
    StateInvariant,
}

impl Check {
    pub const ALL: [Check; 8] = [
        Check::VerifyQuorum,
        Check::BlockchainPrefix,
        Check::QuorumAfterLdcDescendant,
        Check::AncestorClosure,
        Check::CommittedBlocksAncestors,
        Check::VoteBudget,
        Check::CertificateUniqueness,
        Check::StateInvariant,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Check::VerifyQuorum => "verify_quorum",
            Check::BlockchainPrefix => "blockchain_prefix",
            Check::QuorumAfterLdcDescendant => "quorum_after_ldc_descendant",
            Check::AncestorClosure => "ancestor_closure",
            Check::CommittedBlocksAncestors => "committed_blocks_ancestors",
            Check::VoteBudget => "vote_budget",
            Check::CertificateUniqueness => "certificate_uniqueness",
            Check::StateInvariant => "state_invariant",
        }
    }

    pub fn from_name(s: &str) -> Option<Check> {
        Check::ALL
            .into_iter()
            .find(|c| c.name() == s)
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A failed check, before it is attached to a step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Failure {
    pub check: Check,
    pub detail: String,
}

impl Failure {
    fn new(check: Check, detail: serde_json::Value) -> Failure {
        Failure {
            check,
            detail: detail.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub check: Check,
    pub step: u64,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VIOLATION kind={} step={} detail={}", self.check, self.step, self.detail)
    }
}

/// Everything observed so far. Append-only.
#[derive(Clone, Debug)]
pub struct GlobalLedger {
    n: usize,
    honest: Vec<bool>,
    sent_votes: BTreeSet<Vote>,
    sent_timeouts: BTreeSet<TimeoutMsg>,
    certified: BTreeMap<(View, VoteKind), BTreeMap<BlockId, QuorumCert>>,
    direct_commits: BTreeSet<(ValidatorId, BlockId, View)>,
    global_tree: BlockTree,
    /// Order-independent digest of everything recorded.
    digest: u64,
}

fn item_hash<T: Hash>(tag: u8, item: &T) -> u64 {
    let mut h = DefaultHasher::new();
    tag.hash(&mut h);
    item.hash(&mut h);
    h.finish()
}

impl Hash for GlobalLedger {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.digest.hash(state);
    }
}

impl GlobalLedger {
    pub fn new(f: usize, byzantine: &BTreeSet<ValidatorId>) -> GlobalLedger {
        let n = validator_count(f);
        let mut global_tree = BlockTree::new();
        let g = QuorumCert::genesis(n);
        global_tree.record_certified(&g);
        GlobalLedger {
            n,
            honest: (0..n).map(|i| !byzantine.contains(&ValidatorId(i as u32))).collect(),
            sent_votes: BTreeSet::new(),
            sent_timeouts: BTreeSet::new(),
            certified: BTreeMap::from([((View::GENESIS, g.kind), BTreeMap::from([(g.block, g)]))]),
            direct_commits: BTreeSet::new(),
            global_tree,
            digest: 0,
        }
    }

    pub fn is_honest(&self, id: ValidatorId) -> bool {
        self.honest.get(id.index()).copied().unwrap_or(false)
    }
    pub fn sent_votes(&self) -> &BTreeSet<Vote> {
        &self.sent_votes
    }
    pub fn sent_timeouts(&self) -> &BTreeSet<TimeoutMsg> {
        &self.sent_timeouts
    }
    pub fn certified(&self) -> impl Iterator<Item = &QuorumCert> {
        self.certified.values().flat_map(|m| m.values())
    }
    pub fn direct_commits(&self) -> &BTreeSet<(ValidatorId, BlockId, View)> {
        &self.direct_commits
    }
    pub fn global_tree(&self) -> &BlockTree {
        &self.global_tree
    }

    fn mix(&mut self, tag: u8, item: &impl Hash) {
        self.digest = self.digest.wrapping_add(item_hash(tag, item));
    }

    pub fn record_vote(&mut self, v: Vote) -> bool {
        let h = item_hash(0, &v);
        let new = self.sent_votes.insert(v);
        if new {
            self.digest = self.digest.wrapping_add(h);
        }
        new
    }
    pub fn record_timeout(&mut self, t: TimeoutMsg) -> bool {
        let h = item_hash(1, &t);
        let new = self.sent_timeouts.insert(t);
        if new {
            self.digest = self.digest.wrapping_add(h);
        }
        new
    }
    pub fn record_block(&mut self, b: &Block) {
        if !self.global_tree.contains(b.id()) {
            self.mix(2, &b.id());
        }
        let _ = self.global_tree.insert_block(b.clone());
    }
    /// Returns false if this exact certificate was already recorded.
    pub fn record_certified(&mut self, qc: &QuorumCert) -> bool {
        let slot = self.certified.entry((qc.view, qc.kind)).or_default();
        if slot.contains_key(&qc.block) {
            return false;
        }
        slot.insert(qc.block, qc.clone());
        self.global_tree.record_certified(qc);
        self.mix(3, qc);
        true
    }
    pub fn record_direct_commit(&mut self, who: ValidatorId, block: BlockId, view: View) -> bool {
        let new = self.direct_commits.insert((who, block, view));
        if new {
            self.mix(4, &(who, block, view));
        }
        new
    }

    fn descends(&self, ancestor: BlockId, descendant: BlockId) -> bool {
        self.global_tree.is_ancestor(ancestor, descendant).unwrap_or(false)
    }
}

/// True iff every honest signer of `qc` actually sent the matching vote and
/// at least one signer is honest. The genesis certificate is axiomatic.
pub fn verify_quorum(ledger: &GlobalLedger, qc: &QuorumCert) -> bool {
    if qc.is_genesis(ledger.n) {
        return true;
    }
    let mut honest_signers = 0;
    for &s in &qc.signers {
        if !ledger.is_honest(s) {
            continue;
        }
        honest_signers += 1;
        let vote = Vote {
            kind: qc.kind,
            block: qc.block,
            view: qc.view,
            author: s,
        };
        if !ledger.sent_votes.contains(&vote) {
            return false;
        }
    }
    honest_signers > 0
}

/// Every honest timeout inside a TC was really sent by its author.
pub fn verify_timeouts(ledger: &GlobalLedger, timeouts: &[TimeoutMsg]) -> bool {
    timeouts
        .iter()
        .all(|t| !ledger.is_honest(t.author) || ledger.sent_timeouts.contains(t))
}

fn is_prefix(a: &[BlockId], b: &[BlockId]) -> bool {
    a.len() <= b.len() && b[..a.len()] == *a
}

pub fn check_blockchain_prefix(states: &[ValidatorState]) -> Result<(), Failure> {
    for (i, a) in states.iter().enumerate() {
        for b in &states[i + 1..] {
            let (x, y) = (a.committed(), b.committed());
            if !is_prefix(x, y) && !is_prefix(y, x) {
                return Err(Failure::new(
                    Check::BlockchainPrefix,
                    json!({"a": a.id(), "chain_a": x, "b": b.id(), "chain_b": y}),
                ));
            }
        }
    }
    Ok(())
}

pub fn check_quorum_after_ldc_descendant(ledger: &GlobalLedger) -> Result<(), Failure> {
    for &(who, b, v) in &ledger.direct_commits {
        for (_, blocks) in ledger.certified.range((v.next(), VoteKind::Normal)..) {
            for (&c, qc) in blocks {
                if !ledger.descends(b, c) {
                    return Err(ldc_failure(who, b, v, qc));
                }
            }
        }
    }
    Ok(())
}

fn ldc_failure(who: ValidatorId, b: BlockId, v: View, qc: &QuorumCert) -> Failure {
    Failure::new(
        Check::QuorumAfterLdcDescendant,
        json!({"committer": who, "committed": b, "commit_view": v, "certificate": qc}),
    )
}

pub fn check_ancestor_closure_of(ledger: &GlobalLedger, state: &ValidatorState) -> Result<(), Failure> {
    let set: BTreeSet<BlockId> = state.committed().iter().copied().collect();
    for &b in state.committed() {
        let Some(block) = ledger.global_tree.get(b) else {
            return Err(Failure::new(
                Check::AncestorClosure,
                json!({"validator": state.id(), "unknown": b}),
            ));
        };
        if !block.is_genesis() && !set.contains(&block.parent()) {
            return Err(Failure::new(
                Check::AncestorClosure,
                json!({"validator": state.id(), "committed": b, "missing_parent": block.parent()}),
            ));
        }
    }
    Ok(())
}

pub fn check_ancestor_closure(ledger: &GlobalLedger, states: &[ValidatorState]) -> Result<(), Failure> {
    states.iter().try_for_each(|s| check_ancestor_closure_of(ledger, s))
}

pub fn check_committed_blocks_ancestors_of(ledger: &GlobalLedger, state: &ValidatorState) -> Result<(), Failure> {
    let c = state.committed();
    for (i, &a) in c.iter().enumerate() {
        for &b in &c[i + 1..] {
            if !ledger.descends(a, b) && !ledger.descends(b, a) {
                return Err(Failure::new(
                    Check::CommittedBlocksAncestors,
                    json!({"validator": state.id(), "a": a, "b": b}),
                ));
            }
        }
    }
    Ok(())
}

pub fn check_committed_blocks_ancestors(ledger: &GlobalLedger, states: &[ValidatorState]) -> Result<(), Failure> {
    states
        .iter()
        .try_for_each(|s| check_committed_blocks_ancestors_of(ledger, s))
}

fn budget_failure(prev: &[Vote], v: &Vote) -> Failure {
    Failure::new(Check::VoteBudget, json!({"earlier": prev, "vote": v}))
}

/// At most one optimistic and one normal-or-fallback vote per author and
/// view; an optimistic and a normal vote in one view name the same block.
pub fn check_vote_budget(ledger: &GlobalLedger) -> Result<(), Failure> {
    let mut seen: BTreeMap<(ValidatorId, View), Vec<Vote>> = BTreeMap::new();
    for v in &ledger.sent_votes {
        let prev = seen.entry((v.author, v.view)).or_default();
        if !vote_fits(prev, v) {
            return Err(budget_failure(prev, v));
        }
        prev.push(v.clone());
    }
    Ok(())
}

fn vote_fits(prev: &[Vote], v: &Vote) -> bool {
    prev.iter().all(|p| match (p.kind, v.kind) {
        (VoteKind::Optimistic, VoteKind::Optimistic) => false,
        (VoteKind::Optimistic, VoteKind::Normal) | (VoteKind::Normal, VoteKind::Optimistic) => p.block == v.block,
        (VoteKind::Optimistic, VoteKind::Fallback) | (VoteKind::Fallback, VoteKind::Optimistic) => true,
        _ => false,
    })
}

pub fn check_certificate_uniqueness(ledger: &GlobalLedger) -> Result<(), Failure> {
    for blocks in ledger.certified.values() {
        if blocks.len() > 1 {
            let qcs: Vec<&QuorumCert> = blocks.values().collect();
            return Err(Failure::new(Check::CertificateUniqueness, json!({"certificates": qcs})));
        }
    }
    Ok(())
}

/// Local sanity of one honest replica.
pub fn check_state(state: &ValidatorState) -> Result<(), Failure> {
    let r = state.view();
    let fail = |what: &str| {
        Failure::new(
            Check::StateInvariant,
            json!({"validator": state.id(), "violated": what, "view": r}),
        )
    };
    if state.lock().view >= r {
        return Err(fail("lock.view < view"));
    }
    for (name, v) in [
        ("last_normal_vote <= view", state.last_normal_vote()),
        ("last_optimistic_vote <= view", state.last_optimistic_vote()),
        ("last_fallback_vote <= view", state.last_fallback_vote()),
    ] {
        if v.is_some_and(|v| v > r) {
            return Err(fail(name));
        }
    }
    if state.committed().first() != Some(&Block::genesis_id()) {
        return Err(fail("chain starts at genesis"));
    }
    Ok(())
}

/// All checks from scratch. Used by tests and as a cross-check of
/// [`Monitor`].
pub fn full_check(ledger: &GlobalLedger, states: &[ValidatorState]) -> Vec<Failure> {
    let mut out = Vec::new();
    for qc in ledger.certified() {
        if !verify_quorum(ledger, qc) {
            out.push(Failure::new(Check::VerifyQuorum, json!({"certificate": qc})));
        }
    }
    for s in states {
        if let Err(e) = check_state(s) {
            out.push(e);
        }
    }
    let results = [
        check_blockchain_prefix(states),
        check_quorum_after_ldc_descendant(ledger),
        check_ancestor_closure(ledger, states),
        check_committed_blocks_ancestors(ledger, states),
        check_vote_budget(ledger),
        check_certificate_uniqueness(ledger),
    ];
    out.extend(results.into_iter().filter_map(Result::err));
    out
}

#[derive(Clone, Debug, Default)]
struct Cursor {
    qc: usize,
    evidence: usize,
    direct: usize,
    committed: usize,
}

/// The incremental monitor driven by the simulator.
#[derive(Clone, Debug)]
pub struct Monitor {
    ledger: GlobalLedger,
    cursors: BTreeMap<ValidatorId, Cursor>,
    budgets: BTreeMap<(ValidatorId, View), Vec<Vote>>,
    direct_by_view: BTreeMap<View, BTreeSet<BlockId>>,
    canon: Vec<BlockId>,
    violations: Vec<Violation>,
    flagged: BTreeSet<Check>,
    warnings: u64,
}

impl Monitor {
    pub fn new(f: usize, byzantine: &BTreeSet<ValidatorId>) -> Monitor {
        Monitor {
            ledger: GlobalLedger::new(f, byzantine),
            cursors: BTreeMap::new(),
            budgets: BTreeMap::new(),
            direct_by_view: BTreeMap::new(),
            canon: vec![Block::genesis_id()],
            violations: Vec::new(),
            flagged: BTreeSet::new(),
            warnings: 0,
        }
    }

    pub fn ledger(&self) -> &GlobalLedger {
        &self.ledger
    }
    pub fn violations(&self) -> &[Violation] {
        &self.violations
    }
    /// Same-view certificates of different kinds for different blocks.
    pub fn warnings(&self) -> u64 {
        self.warnings
    }

    /// Records a message sent by `from`, honest or injected.
    pub fn observe_send(&mut self, from: ValidatorId, msg: &Message, pending: &mut Vec<Failure>) {
        if let Some(b) = msg.block() {
            self.ledger.record_block(b);
        }
        if !self.ledger.is_honest(from) {
            return;
        }
        match msg {
            Message::Vote(v) if v.author == from => {
                if self.ledger.record_vote(v.clone()) {
                    let prev = self.budgets.entry((v.author, v.view)).or_default();
                    if !vote_fits(prev, v) {
                        pending.push(budget_failure(prev, v));
                    }
                    prev.push(v.clone());
                }
            }
            Message::Timeout(t) if t.author == from => {
                if t.high_qc.view >= t.view {
                    pending.push(Failure::new(
                        Check::StateInvariant,
                        json!({"violated": "timeout.high_qc.view < timeout.view", "timeout": t}),
                    ));
                }
                self.ledger.record_timeout(t.clone());
            }
            _ => {}
        }
    }

    /// Evaluates every check against what changed since the last call and
    /// returns the violations found at this step.
    pub fn check<S: Borrow<ValidatorState>>(&mut self, step: u64, states: &[S], mut found: Vec<Failure>) -> &[Violation] {
        let before = self.violations.len();
        for s in states {
            self.scan(s.borrow(), &mut found);
        }
        for fl in found {
            // One report per check keeps traces readable once a run is broken.
            if self.flagged.insert(fl.check) {
                self.violations.push(Violation {
                    check: fl.check,
                    step,
                    detail: fl.detail,
                });
            }
        }
        &self.violations[before..]
    }

    fn scan(&mut self, s: &ValidatorState, found: &mut Vec<Failure>) {
        let id = s.id();
        let mut cur = self.cursors.remove(&id).unwrap_or_default();

        for qc in &s.qc_log()[cur.qc..] {
            if !verify_quorum(&self.ledger, qc) {
                found.push(Failure::new(Check::VerifyQuorum, json!({"validator": id, "certificate": qc})));
            }
            self.add_certified(qc, found);
        }
        cur.qc = s.qc_log().len();

        for ts in &s.timeout_evidence()[cur.evidence..] {
            if !verify_timeouts(&self.ledger, ts) {
                found.push(Failure::new(Check::VerifyQuorum, json!({"validator": id, "timeouts": ts})));
            }
        }
        cur.evidence = s.timeout_evidence().len();

        for &(b, v) in &s.direct_commits()[cur.direct..] {
            if self.ledger.record_direct_commit(id, b, v) {
                self.add_direct_commit(id, b, v, found);
            }
        }
        cur.direct = s.direct_commits().len();

        let chain = s.committed();
        let mut broken = false;
        for k in cur.committed.max(1)..chain.len() {
            let parent = self.ledger.global_tree.get(chain[k]).map(Block::parent);
            if parent != Some(chain[k - 1]) {
                broken = true;
            }
            if k < self.canon.len() {
                if self.canon[k] != chain[k] {
                    found.push(Failure::new(
                        Check::BlockchainPrefix,
                        json!({"validator": id, "height": k, "chain": chain, "canonical": self.canon}),
                    ));
                }
            } else {
                self.canon.push(chain[k]);
            }
        }
        cur.committed = chain.len();
        if broken {
            found.extend(check_ancestor_closure_of(&self.ledger, s).err());
            found.extend(check_committed_blocks_ancestors_of(&self.ledger, s).err());
        }

        if let Err(e) = check_state(s) {
            found.push(e);
        }
        self.cursors.insert(id, cur);
    }

    fn add_certified(&mut self, qc: &QuorumCert, found: &mut Vec<Failure>) {
        if !self.ledger.record_certified(qc) {
            return;
        }
        let same = &self.ledger.certified[&(qc.view, qc.kind)];
        if same.len() > 1 {
            let qcs: Vec<&QuorumCert> = same.values().collect();
            found.push(Failure::new(Check::CertificateUniqueness, json!({"certificates": qcs})));
        }
        for k in VoteKind::ALL {
            if k != qc.kind
                && self
                    .ledger
                    .certified
                    .get(&(qc.view, k))
                    .is_some_and(|m| m.keys().any(|&b| b != qc.block))
            {
                self.warnings += 1;
            }
        }
        if let Some((&v, blocks)) = self.direct_by_view.range(..qc.view).next_back() {
            for &b in blocks {
                if !self.ledger.descends(b, qc.block) {
                    let who = self
                        .ledger
                        .direct_commits
                        .iter()
                        .find(|(_, x, y)| *x == b && *y == v)
                        .map(|t| t.0)
                        .unwrap_or(ValidatorId(0));
                    found.push(ldc_failure(who, b, v, qc));
                }
            }
        }
    }

    fn add_direct_commit(&mut self, who: ValidatorId, b: BlockId, v: View, found: &mut Vec<Failure>) {
        if !self.direct_by_view.entry(v).or_default().insert(b) {
            return;
        }
        for (_, blocks) in self.ledger.certified.range((v.next(), VoteKind::Normal)..) {
            for (&c, qc) in blocks {
                if !self.ledger.descends(b, c) {
                    found.push(ldc_failure(who, b, v, qc));
                }
            }
        }
    }
}

/// Renders a failure list for diagnostics.
pub fn describe(failures: &[Failure]) -> String {
    failures
        .iter()
        .map(|f| format!("{}: {}", f.check, f.detail))
        .collect::<Vec<_>>()
        .join("\n")
}
