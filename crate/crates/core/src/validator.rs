//! The honest replica.
//!
//! Every network event is handled run-to-completion. Certificates embedded in
//! a message are processed first (lock, commit, view advance), then the vote
//! rules are evaluated, then the optimistic proposal for the next view is
//! emitted. Proposals that arrive for a future view, or whose parent block is
//! still missing, are parked and re-dispatched once the view is entered or the
//! block tree grows; this is indistinguishable from a later network delivery.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::block_store::{BlockTree, CertRecord, Insertion};
use crate::mutation::Mutation;
use crate::types::*;

/// Where an outgoing message goes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Dest {
    All,
    To(ValidatorId),
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Outgoing {
    pub to: Dest,
    pub msg: Message,
}

/// The certificate a validator used to enter its current view.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Entry {
    Qc(QuorumCert),
    Tc(TimeoutCert),
}

/// `x < v` where `None` sits below every view.
fn below(x: Option<View>, v: View) -> bool {
    x.is_none_or(|x| x < v)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ValidatorState {
    id: ValidatorId,
    f: usize,
    n: usize,
    mutation: Option<Mutation>,

    r_c: View,
    lock: QuorumCert,
    t_l: Option<View>,
    t_r: bool,
    a_n: Option<View>,
    a_o: Option<View>,
    a_f: Option<View>,
    b_o: Option<BlockId>,
    entry: Entry,

    possessed_normal: BTreeSet<View>,
    possessed_fallback: BTreeSet<View>,
    possessed_optimistic: BTreeSet<View>,
    vote_pool: BTreeMap<(View, VoteKind, BlockId), BTreeSet<ValidatorId>>,
    timeout_pool: BTreeMap<View, BTreeMap<ValidatorId, TimeoutMsg>>,
    tree: BlockTree,
    committed: Vec<BlockId>,
    committed_set: BTreeSet<BlockId>,
    direct_commits: Vec<(BlockId, View)>,

    processed_qcs: BTreeSet<QuorumCert>,
    processed_tcs: BTreeSet<(View, QuorumCert)>,
    qc_log: Vec<QuorumCert>,
    timeout_evidence: Vec<Vec<TimeoutMsg>>,

    proposed: BTreeSet<View>,
    opt_proposals: BTreeMap<View, Block>,
    pending_propose: bool,
    deferred: BTreeMap<View, Vec<Message>>,
    payload_counter: u64,
    dropped: u64,

    queue: VecDeque<Message>,
    epoch: u64,
    outbox: Vec<Outgoing>,
}

impl ValidatorState {
    /// A validator in view 1 holding the genesis certificate as its lock.
    pub fn new(id: ValidatorId, f: usize, mutation: Option<Mutation>) -> ValidatorState {
        let n = validator_count(f);
        assert!(id.index() < n, "validator id out of range");
        let genesis_qc = QuorumCert::genesis(n);
        let mut tree = BlockTree::new();
        tree.record_certified(&genesis_qc);
        let g = Block::genesis_id();
        ValidatorState {
            id,
            f,
            n,
            mutation,
            r_c: View(1),
            lock: genesis_qc.clone(),
            t_l: None,
            t_r: false,
            a_n: None,
            a_o: None,
            a_f: None,
            b_o: None,
            entry: Entry::Qc(genesis_qc.clone()),
            possessed_normal: BTreeSet::new(),
            possessed_fallback: BTreeSet::new(),
            possessed_optimistic: BTreeSet::new(),
            vote_pool: BTreeMap::new(),
            timeout_pool: BTreeMap::new(),
            tree,
            committed: vec![g],
            committed_set: BTreeSet::from([g]),
            direct_commits: Vec::new(),
            processed_qcs: BTreeSet::from([genesis_qc.clone()]),
            processed_tcs: BTreeSet::new(),
            qc_log: vec![genesis_qc],
            timeout_evidence: Vec::new(),
            proposed: BTreeSet::new(),
            opt_proposals: BTreeMap::new(),
            pending_propose: leader(View(1), n) == id,
            deferred: BTreeMap::new(),
            payload_counter: 0,
            dropped: 0,
            queue: VecDeque::new(),
            epoch: 0,
            outbox: Vec::new(),
        }
    }

    /// Runs the entry step for view 1: its leader proposes on top of genesis.
    pub fn bootstrap(&mut self) -> Vec<Outgoing> {
        self.try_propose();
        self.take_outbox()
    }

    pub fn id(&self) -> ValidatorId {
        self.id
    }
    pub fn f(&self) -> usize {
        self.f
    }
    pub fn mutation(&self) -> Option<Mutation> {
        self.mutation
    }
    pub fn view(&self) -> View {
        self.r_c
    }
    pub fn lock(&self) -> &QuorumCert {
        &self.lock
    }
    pub fn timeout_view(&self) -> Option<View> {
        self.t_l
    }
    pub fn timer_expired(&self) -> bool {
        self.t_r
    }
    pub fn last_normal_vote(&self) -> Option<View> {
        self.a_n
    }
    pub fn last_optimistic_vote(&self) -> Option<View> {
        self.a_o
    }
    pub fn last_fallback_vote(&self) -> Option<View> {
        self.a_f
    }
    pub fn optimistic_block(&self) -> Option<BlockId> {
        self.b_o
    }
    pub fn entry(&self) -> &Entry {
        &self.entry
    }
    pub fn tree(&self) -> &BlockTree {
        &self.tree
    }
    /// The local blockchain, starting at genesis.
    pub fn committed(&self) -> &[BlockId] {
        &self.committed
    }
    pub fn direct_commits(&self) -> &[(BlockId, View)] {
        &self.direct_commits
    }
    /// Every distinct QC this validator has processed, in processing order.
    pub fn qc_log(&self) -> &[QuorumCert] {
        &self.qc_log
    }
    /// Timeout sets of every TC and weak TC acted upon, in order.
    pub fn timeout_evidence(&self) -> &[Vec<TimeoutMsg>] {
        &self.timeout_evidence
    }
    pub fn dropped_messages(&self) -> u64 {
        self.dropped
    }

    fn qc_threshold(&self) -> usize {
        if self.mutation == Some(Mutation::WeakQuorum) {
            weak_quorum_size(self.f)
        } else {
            quorum_size(self.f)
        }
    }

    fn qc_valid(&self, qc: &QuorumCert) -> bool {
        validate_qc_with_threshold(qc, self.n, self.qc_threshold())
    }

    fn take_outbox(&mut self) -> Vec<Outgoing> {
        std::mem::take(&mut self.outbox)
    }

    fn multicast(&mut self, msg: Message) {
        self.outbox.push(Outgoing { to: Dest::All, msg });
    }

    /// Single dispatch entry point. Returns everything the handler sent.
    pub fn handle_message(&mut self, msg: Message) -> Vec<Outgoing> {
        self.queue.push_back(msg);
        while let Some(m) = self.queue.pop_front() {
            let before = self.epoch;
            self.dispatch(m);
            if self.epoch != before {
                self.on_progress();
            }
        }
        self.take_outbox()
    }

    /// The view timer fired (Boolean timer abstraction).
    pub fn timer_expire(&mut self) -> Vec<Outgoing> {
        self.t_r = true;
        if below(self.t_l, self.r_c) {
            self.send_timeout(self.r_c);
        }
        self.take_outbox()
    }

    fn dispatch(&mut self, m: Message) {
        match m {
            Message::NormalProposal { block, qc, view, src } => self.on_normal_proposal(block, qc, view, src),
            Message::FallbackProposal {
                block,
                qc,
                tc,
                view,
                src,
            } => self.on_fallback_proposal(block, qc, tc, view, src),
            Message::OptimisticProposal { block, view, src } => self.on_optimistic_proposal(block, view, src),
            Message::Vote(v) => self.accumulate_vote(v),
            Message::Timeout(t) => self.accumulate_timeout(t),
            Message::Qc { qc, .. } => {
                if self.qc_valid(&qc) {
                    self.process_qc(&qc);
                } else {
                    self.dropped += 1;
                }
            }
            Message::Tc { tc, .. } => {
                if validate_tc_with_qc_threshold(&tc, self.f, self.qc_threshold()) {
                    self.process_tc(&tc);
                } else {
                    self.dropped += 1;
                }
            }
            Message::WeakTc { wtc, .. } => {
                if validate_weak_tc_with_qc_threshold(&wtc, self.f, self.qc_threshold()) {
                    self.timeout_evidence.push(wtc.timeouts.clone());
                    self.timeout_sync(wtc.view);
                } else {
                    self.dropped += 1;
                }
            }
        }
    }

    /// View changed or the tree grew: retry parked proposals and a parked
    /// leader proposal.
    fn on_progress(&mut self) {
        let stale: Vec<View> = self.deferred.range(..self.r_c).map(|(v, _)| *v).collect();
        for v in stale {
            self.deferred.remove(&v);
        }
        if let Some(ms) = self.deferred.remove(&self.r_c) {
            self.queue.extend(ms);
        }
        self.try_propose();
    }

    fn defer(&mut self, view: View, m: Message) {
        let slot = self.deferred.entry(view).or_default();
        if !slot.contains(&m) {
            slot.push(m);
        }
    }

    /// Inserts a block; `None` if malformed, else whether it is now stored.
    fn store(&mut self, block: &Block) -> Option<bool> {
        match self.tree.insert_block(block.clone()) {
            Err(_) => {
                self.dropped += 1;
                None
            }
            Ok(Insertion::Stored(ids)) => {
                self.epoch += 1;
                for id in ids {
                    if self.tree.is_certified(id) {
                        self.commit_check(id);
                    }
                }
                Some(true)
            }
            Ok(Insertion::Duplicate) => Some(true),
            Ok(Insertion::Orphaned) => Some(false),
        }
    }

    // ---- certificates -------------------------------------------------

    fn process_qc(&mut self, qc: &QuorumCert) {
        if !self.processed_qcs.insert(qc.clone()) {
            return;
        }
        self.qc_log.push(qc.clone());
        if qc.view > self.lock.view {
            self.lock = qc.clone();
        }
        if self.tree.record_certified(qc) == CertRecord::Added {
            self.commit_check(qc.block);
        }
        if qc.view >= self.r_c {
            self.advance_view(qc.view.next(), Entry::Qc(qc.clone()));
        }
    }

    fn process_tc(&mut self, tc: &TimeoutCert) {
        let high = tc_high_qc(tc).clone();
        if !self.processed_tcs.insert((tc.view, high.clone())) {
            return;
        }
        self.timeout_evidence.push(tc.timeouts.clone());
        self.process_qc(&high);
        self.timeout_sync(tc.view);
        if tc.view >= self.r_c {
            self.advance_view(tc.view.next(), Entry::Tc(tc.clone()));
        }
    }

    fn advance_view(&mut self, to: View, via: Entry) {
        if to <= self.r_c {
            return;
        }
        self.r_c = to;
        self.t_r = false;
        self.b_o = None;
        self.epoch += 1;
        match &via {
            Entry::Qc(qc) => self.multicast(Message::Qc {
                qc: qc.clone(),
                src: self.id,
            }),
            Entry::Tc(tc) => self.outbox.push(Outgoing {
                to: Dest::To(leader(to, self.n)),
                msg: Message::Tc {
                    tc: tc.clone(),
                    src: self.id,
                },
            }),
        }
        self.entry = via;
        self.pending_propose = leader(to, self.n) == self.id;
        self.try_propose();
    }

    // ---- commit rules -------------------------------------------------

    fn adjacent(&self, parent_view: View, child_view: View) -> bool {
        if self.mutation == Some(Mutation::NonAdjacentCommit) {
            parent_view < child_view
        } else {
            parent_view.next() == child_view
        }
    }

    /// Direct commit for every certified parent/child pair involving `id`.
    fn commit_check(&mut self, id: BlockId) {
        let Some(block) = self.tree.get(id) else { return };
        let views = self.tree.certified_views(id);
        if views.is_empty() {
            return;
        }
        let mut found = Vec::new();
        if !block.is_genesis() {
            let parent = block.parent();
            for pv in self.tree.certified_views(parent) {
                if views.iter().any(|&cv| self.adjacent(pv, cv)) {
                    found.push((parent, pv));
                }
            }
        }
        let children: Vec<BlockId> = self.tree.children(id).collect();
        for c in children {
            for cv in self.tree.certified_views(c) {
                for &pv in &views {
                    if self.adjacent(pv, cv) {
                        found.push((id, pv));
                    }
                }
            }
        }
        for (b, v) in found {
            self.direct_commit(b, v);
        }
    }

    fn direct_commit(&mut self, block: BlockId, view: View) {
        if !self.direct_commits.contains(&(block, view)) {
            self.direct_commits.push((block, view));
        }
        // Indirect commit: every uncommitted ancestor, oldest first.
        let mut path: Vec<BlockId> = self
            .tree
            .ancestors(block)
            .map(Block::id)
            .take_while(|id| !self.committed_set.contains(id))
            .collect();
        path.reverse();
        for id in path {
            self.committed_set.insert(id);
            self.committed.push(id);
        }
    }

    // ---- proposing ----------------------------------------------------

    fn fresh_block(&mut self, parent: &Block, view: View) -> Block {
        self.payload_counter += 1;
        Block::child_of(parent, view, Payload::tagged(0, self.id, self.payload_counter))
    }

    fn try_propose(&mut self) {
        if !self.pending_propose {
            return;
        }
        let view = self.r_c;
        if leader(view, self.n) != self.id || self.proposed.contains(&view) {
            self.pending_propose = false;
            return;
        }
        let msg = match self.entry.clone() {
            Entry::Qc(qc) => {
                let Some(parent) = self.tree.get(qc.block).cloned() else {
                    return;
                };
                let block = match self.opt_proposals.get(&view) {
                    Some(b) if b.parent() == qc.block => b.clone(),
                    _ => self.fresh_block(&parent, view),
                };
                Message::NormalProposal {
                    block,
                    qc,
                    view,
                    src: self.id,
                }
            }
            Entry::Tc(tc) => {
                let high = tc_high_qc(&tc).clone();
                let Some(parent) = self.tree.get(high.block).cloned() else {
                    return;
                };
                let block = self.fresh_block(&parent, view);
                Message::FallbackProposal {
                    block,
                    qc: high,
                    tc,
                    view,
                    src: self.id,
                }
            }
        };
        self.pending_propose = false;
        self.proposed.insert(view);
        if let Some(b) = msg.block() {
            let b = b.clone();
            self.store(&b);
        }
        self.multicast(msg);
    }

    /// Optimistic proposal for the next view after voting for `voted`.
    fn propose_optimistic_next(&mut self, voted: &Block) {
        let next = voted.view().next();
        if leader(next, self.n) != self.id || self.opt_proposals.contains_key(&next) {
            return;
        }
        let block = self.fresh_block(voted, next);
        self.opt_proposals.insert(next, block.clone());
        self.store(&block);
        self.multicast(Message::OptimisticProposal {
            block,
            view: next,
            src: self.id,
        });
    }

    // ---- voting -------------------------------------------------------

    fn cast(&mut self, kind: VoteKind, block: &Block) {
        self.multicast(Message::Vote(Vote {
            kind,
            block: block.id(),
            view: self.r_c,
            author: self.id,
        }));
    }

    fn has_not_voted(&self, v: View) -> bool {
        below(self.a_n, v) && below(self.a_o, v) && below(self.a_f, v)
    }

    fn on_optimistic_proposal(&mut self, block: Block, view: View, src: ValidatorId) {
        if view != block.view() || src != leader(view, self.n) || view == View::GENESIS {
            self.dropped += 1;
            return;
        }
        let Some(stored) = self.store(&block) else { return };
        if view < self.r_c {
            return;
        }
        if view > self.r_c || !stored {
            self.defer(view, Message::OptimisticProposal { block, view, src });
            return;
        }
        if !self.possessed_optimistic.insert(view) {
            return;
        }
        let r = self.r_c;
        let timeout_ok = self.mutation == Some(Mutation::NoTimeoutGuard) || below(self.t_l, r.prev());
        let lock_ok = self.mutation == Some(Mutation::NoLockCheck)
            || (self.lock.view.next() == r && self.lock.block == block.parent());
        if timeout_ok && lock_ok && self.has_not_voted(r) {
            self.cast(VoteKind::Optimistic, &block);
            self.a_o = Some(r);
            self.b_o = Some(block.id());
            self.propose_optimistic_next(&block);
        }
    }

    fn on_normal_proposal(&mut self, block: Block, qc: QuorumCert, view: View, src: ValidatorId) {
        if view != block.view()
            || src != leader(view, self.n)
            || qc.block != block.parent()
            || view == View::GENESIS
            || !self.qc_valid(&qc)
        {
            self.dropped += 1;
            return;
        }
        self.process_qc(&qc);
        let Some(stored) = self.store(&block) else { return };
        if view < self.r_c {
            return;
        }
        if view > self.r_c || !stored {
            self.defer(view, Message::NormalProposal { block, qc, view, src });
            return;
        }
        if !self.possessed_normal.insert(view) || self.t_r {
            return;
        }
        let r = self.r_c;
        let no_equivocation = self.mutation == Some(Mutation::NoEquivocationGuard)
            || below(self.a_o, r)
            || self.b_o == Some(block.id());
        let send_prepare_n = below(self.a_f, r)
            && below(self.t_l, r)
            && no_equivocation
            && below(self.a_n, r)
            && qc.view.next() == r;
        if send_prepare_n {
            self.cast(VoteKind::Normal, &block);
            self.a_n = Some(r);
            if self.b_o != Some(block.id()) {
                self.propose_optimistic_next(&block);
            }
        }
    }

    fn on_fallback_proposal(&mut self, block: Block, qc: QuorumCert, tc: TimeoutCert, view: View, src: ValidatorId) {
        if view != block.view()
            || src != leader(view, self.n)
            || tc.view.next() != view
            || !self.qc_valid(&qc)
            || !validate_tc_with_qc_threshold(&tc, self.f, self.qc_threshold())
        {
            self.dropped += 1;
            return;
        }
        self.process_tc(&tc);
        self.process_qc(&qc);
        let Some(stored) = self.store(&block) else { return };
        if view < self.r_c {
            return;
        }
        if view > self.r_c || !stored {
            self.defer(
                view,
                Message::FallbackProposal {
                    block,
                    qc,
                    tc,
                    view,
                    src,
                },
            );
            return;
        }
        if !self.possessed_fallback.insert(view) {
            return;
        }
        let r = self.r_c;
        let high = tc_high_qc(&tc);
        let extends_high =
            block.parent() == high.block && qc.block == high.block && qc.view == high.view && qc.kind == high.kind;
        if extends_high && below(self.t_l, r) && below(self.a_n, r) && below(self.a_f, r) {
            self.cast(VoteKind::Fallback, &block);
            self.a_f = Some(r);
            self.propose_optimistic_next(&block);
        }
    }

    fn accumulate_vote(&mut self, vote: Vote) {
        if vote.author.index() >= self.n || vote.view == View::GENESIS {
            self.dropped += 1;
            return;
        }
        let pool_kind = if self.mutation == Some(Mutation::MixedQcKinds) {
            VoteKind::Normal
        } else {
            vote.kind
        };
        let threshold = self.qc_threshold();
        let signers = self.vote_pool.entry((vote.view, pool_kind, vote.block)).or_default();
        if !signers.insert(vote.author) || signers.len() != threshold {
            return;
        }
        let qc = QuorumCert::new(vote.view, vote.block, vote.kind, signers.iter().copied());
        self.process_qc(&qc);
    }

    fn accumulate_timeout(&mut self, t: TimeoutMsg) {
        if t.author.index() >= self.n || t.view == View::GENESIS || !self.qc_valid(&t.high_qc) {
            self.dropped += 1;
            return;
        }
        let view = t.view;
        let pool = self.timeout_pool.entry(view).or_default();
        if pool.contains_key(&t.author) {
            return;
        }
        pool.insert(t.author, t);
        let count = pool.len();
        if count == weak_quorum_size(self.f) {
            let weak: Vec<TimeoutMsg> = pool.values().cloned().collect();
            self.timeout_evidence.push(weak);
            self.timeout_sync(view);
        }
        if count == quorum_size(self.f) {
            let tc = TimeoutCert::new(view, self.timeout_pool[&view].values().cloned());
            self.process_tc(&tc);
        }
    }

    fn timeout_sync(&mut self, view: View) {
        if view >= self.r_c && below(self.t_l, view) {
            self.send_timeout(view);
        }
    }

    fn send_timeout(&mut self, view: View) {
        self.multicast(Message::Timeout(TimeoutMsg {
            view,
            author: self.id,
            high_qc: self.lock.clone(),
        }));
        self.t_l = self.t_l.max(Some(view));
    }
}
