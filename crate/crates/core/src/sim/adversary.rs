//! Byzantine behaviour.
//!
//! The adversary is omniscient: it observes every message sent by anybody.
//! It only ever authors messages under Byzantine identities and only
//! aggregates certificates from votes and timeouts it has actually seen.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::encoding::parse_canonical;
use crate::types::*;
use crate::validator::Dest;

use super::config::{AdversaryStrategy, SimConfig};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum InjectError {
    #[error("injected {kind} claims honest source {src:?}")]
    HonestSource { kind: &'static str, src: ValidatorId },
}

/// The non-forgery boundary: every injected message is authored by a
/// Byzantine validator.
pub fn check_injection(byzantine: &BTreeSet<ValidatorId>, msg: &Message) -> Result<(), InjectError> {
    if byzantine.contains(&msg.src()) {
        Ok(())
    } else {
        Err(InjectError::HonestSource {
            kind: msg.kind_name(),
            src: msg.src(),
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScriptError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error(transparent)]
    Inject(#[from] InjectError),
    #[error("cannot read script: {0}")]
    Io(#[from] std::io::Error),
}

/// Parses `at_step=<int> inject <message>` lines.
pub fn parse_script(text: &str, byzantine: &BTreeSet<ValidatorId>) -> Result<Vec<(u64, Message)>, ScriptError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let syntax = |msg: String| ScriptError::Syntax { line: i + 1, msg };
        let rest = line
            .strip_prefix("at_step=")
            .ok_or_else(|| syntax("expected `at_step=`".into()))?;
        let (step, rest) = rest
            .split_once(char::is_whitespace)
            .ok_or_else(|| syntax("missing `inject`".into()))?;
        let step: u64 = step.parse().map_err(|e| syntax(format!("bad step: {e}")))?;
        let body = rest
            .trim_start()
            .strip_prefix("inject")
            .ok_or_else(|| syntax("missing `inject`".into()))?;
        let msg: Message = parse_canonical(body).map_err(|e| syntax(format!("bad message: {e}")))?;
        check_injection(byzantine, &msg)?;
        out.push((step, msg));
    }
    out.sort_by_key(|(s, _)| *s);
    Ok(out)
}

pub fn render_script(entries: &[(u64, Message)]) -> String {
    use crate::encoding::Canonical;
    entries
        .iter()
        .map(|(s, m)| format!("at_step={s} inject {}\n", m.canonical()))
        .collect()
}

pub fn load_script(path: &Path, byzantine: &BTreeSet<ValidatorId>) -> Result<Vec<(u64, Message)>, ScriptError> {
    parse_script(&std::fs::read_to_string(path)?, byzantine)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Passive,
    Random,
    Equivocator,
    VoteSplitter,
    Scripted,
}

#[derive(Clone, Debug)]
pub struct Adversary {
    kind: Kind,
    f: usize,
    n: usize,
    byz: Vec<ValidatorId>,
    honest: Vec<ValidatorId>,

    blocks: BTreeMap<BlockId, Block>,
    by_view: BTreeMap<View, Vec<BlockId>>,
    proposed_as: BTreeMap<BlockId, VoteKind>,
    qcs: BTreeMap<(View, VoteKind, BlockId), QuorumCert>,
    votes: BTreeMap<(View, VoteKind, BlockId), BTreeSet<ValidatorId>>,
    timeouts: BTreeMap<View, BTreeMap<ValidatorId, TimeoutMsg>>,
    max_view: View,

    equivocated: BTreeSet<(View, u8)>,
    voted: BTreeSet<(ValidatorId, View, VoteKind, BlockId)>,
    timed_out: BTreeSet<(ValidatorId, View)>,
    counter: u64,
    queue: VecDeque<(Dest, Message)>,
    script: VecDeque<(u64, Message)>,
}

impl Adversary {
    pub fn new(cfg: &SimConfig) -> Result<Adversary, ScriptError> {
        let (kind, script) = match &cfg.adversary_strategy {
            _ if cfg.byzantine.is_empty() => (Kind::Passive, Vec::new()),
            AdversaryStrategy::Passive => (Kind::Passive, Vec::new()),
            AdversaryStrategy::Random => (Kind::Random, Vec::new()),
            AdversaryStrategy::Equivocator => (Kind::Equivocator, Vec::new()),
            AdversaryStrategy::VoteSplitter => (Kind::VoteSplitter, Vec::new()),
            AdversaryStrategy::Scripted(p) => (Kind::Scripted, load_script(p, &cfg.byzantine)?),
        };
        Ok(Self::with_script(cfg, kind, script))
    }

    /// A scripted adversary from already-parsed entries.
    pub fn scripted(cfg: &SimConfig, script: Vec<(u64, Message)>) -> Result<Adversary, InjectError> {
        for (_, m) in &script {
            check_injection(&cfg.byzantine, m)?;
        }
        Ok(Self::with_script(cfg, Kind::Scripted, script))
    }

    fn with_script(cfg: &SimConfig, kind: Kind, mut script: Vec<(u64, Message)>) -> Adversary {
        let n = cfg.n();
        script.sort_by_key(|(s, _)| *s);
        let mut a = Adversary {
            kind,
            f: cfg.f,
            n,
            byz: cfg.byzantine.iter().copied().collect(),
            honest: cfg.honest(),
            blocks: BTreeMap::new(),
            by_view: BTreeMap::new(),
            proposed_as: BTreeMap::new(),
            qcs: BTreeMap::new(),
            votes: BTreeMap::new(),
            timeouts: BTreeMap::new(),
            max_view: View(1),
            equivocated: BTreeSet::new(),
            voted: BTreeSet::new(),
            timed_out: BTreeSet::new(),
            counter: 0,
            queue: VecDeque::new(),
            script: script.into(),
        };
        a.learn_block(Block::genesis(), VoteKind::Normal);
        a.learn_qc(&QuorumCert::genesis(n));
        a
    }

    pub fn is_passive(&self) -> bool {
        self.kind == Kind::Passive
    }

    /// A scripted entry is due at `step`.
    pub fn has_due(&self, step: u64) -> bool {
        self.script.front().is_some_and(|(s, _)| *s <= step)
    }

    pub fn script_exhausted(&self) -> bool {
        self.script.is_empty()
    }

    fn learn_block(&mut self, b: &Block, as_kind: VoteKind) {
        if self.blocks.insert(b.id(), b.clone()).is_none() {
            self.by_view.entry(b.view()).or_default().push(b.id());
            self.proposed_as.insert(b.id(), as_kind);
        }
    }

    fn learn_qc(&mut self, qc: &QuorumCert) {
        self.qcs.entry((qc.view, qc.kind, qc.block)).or_insert_with(|| qc.clone());
        self.bump(qc.view.next());
    }

    fn bump(&mut self, v: View) {
        self.max_view = self.max_view.max(v);
    }

    pub fn observe(&mut self, msg: &Message) {
        match msg {
            Message::NormalProposal { block, qc, view, .. } => {
                self.learn_qc(qc);
                self.learn_block(block, VoteKind::Normal);
                self.bump(*view);
            }
            Message::FallbackProposal { block, qc, tc, view, .. } => {
                self.learn_qc(qc);
                for t in &tc.timeouts {
                    self.learn_timeout(t);
                }
                self.learn_block(block, VoteKind::Fallback);
                self.bump(*view);
            }
            Message::OptimisticProposal { block, .. } => self.learn_block(block, VoteKind::Optimistic),
            Message::Vote(v) => {
                let key = (v.view, v.kind, v.block);
                let signers = self.votes.entry(key).or_default();
                signers.insert(v.author);
                if signers.len() >= quorum_size(self.f) && !self.qcs.contains_key(&key) {
                    let qc = QuorumCert::new(v.view, v.block, v.kind, signers.iter().take(quorum_size(self.f)).copied());
                    self.learn_qc(&qc);
                }
                self.bump(v.view);
            }
            Message::Timeout(t) => self.learn_timeout(t),
            Message::Qc { qc, .. } => self.learn_qc(qc),
            Message::Tc { tc, .. } => {
                for t in &tc.timeouts {
                    self.learn_timeout(t);
                }
                self.bump(tc.view.next());
            }
            Message::WeakTc { wtc, .. } => {
                for t in &wtc.timeouts {
                    self.learn_timeout(t);
                }
            }
        }
    }

    fn learn_timeout(&mut self, t: &TimeoutMsg) {
        self.learn_qc(&t.high_qc);
        self.timeouts.entry(t.view).or_default().entry(t.author).or_insert_with(|| t.clone());
        self.bump(t.view);
    }

    /// The next injection, if the strategy has something to send.
    pub fn next(&mut self, step: u64, rng: &mut ChaCha8Rng) -> Option<(Dest, Message)> {
        if self.kind == Kind::Scripted {
            return match self.script.front() {
                Some((s, _)) if *s <= step => self.script.pop_front().map(|(_, m)| (Dest::All, m)),
                _ => None,
            };
        }
        if self.kind == Kind::Passive {
            return None;
        }
        if self.queue.is_empty() {
            match self.kind {
                Kind::Random => self.refill_random(rng),
                Kind::Equivocator => self.refill_equivocator(rng),
                Kind::VoteSplitter => self.refill_splitter(rng),
                Kind::Passive | Kind::Scripted => {}
            }
        }
        self.queue.pop_front()
    }

    fn push(&mut self, to: Dest, msg: Message) {
        debug_assert!(check_injection(&self.byz.iter().copied().collect(), &msg).is_ok());
        self.queue.push_back((to, msg));
    }

    fn payload(&mut self, author: ValidatorId) -> Payload {
        self.counter += 1;
        Payload::tagged(1, author, self.counter)
    }

    fn highest_qc(&self) -> QuorumCert {
        self.qcs
            .values()
            .max_by(|a, b| a.view.cmp(&b.view).then_with(|| b.block.cmp(&a.block)))
            .cloned()
            .expect("genesis is always known")
    }

    fn qc_for_view(&self, v: View) -> Option<QuorumCert> {
        self.qcs.range((v, VoteKind::Normal, BlockId(0))..).find(|(k, _)| k.0 == v).map(|(_, q)| q.clone())
    }

    fn tc_for_view(&self, v: View) -> Option<TimeoutCert> {
        let pool = self.timeouts.get(&v)?;
        (pool.len() >= quorum_size(self.f))
            .then(|| TimeoutCert::new(v, pool.values().take(quorum_size(self.f)).cloned()))
    }

    fn vote(&mut self, author: ValidatorId, kind: VoteKind, block: &Block) {
        if self.voted.insert((author, block.view(), kind, block.id())) {
            self.push(
                Dest::All,
                Message::Vote(Vote {
                    kind,
                    block: block.id(),
                    view: block.view(),
                    author,
                }),
            );
        }
    }

    fn timeout(&mut self, author: ValidatorId, view: View, high_qc: QuorumCert) {
        if view > high_qc.view && self.timed_out.insert((author, view)) {
            self.push(Dest::All, Message::Timeout(TimeoutMsg { view, author, high_qc }));
        }
    }

    /// Splits the honest validators into two non-empty groups when possible.
    fn split(&self, rng: &mut ChaCha8Rng) -> (Vec<ValidatorId>, Vec<ValidatorId>) {
        let mut h = self.honest.clone();
        h.shuffle(rng);
        if h.len() < 2 {
            return (h.clone(), h);
        }
        let cut = rng.gen_range(1..h.len());
        let b = h.split_off(cut);
        (h, b)
    }

    fn send_to(&mut self, group: &[ValidatorId], msg: &Message) {
        for &g in group {
            self.push(Dest::To(g), msg.clone());
        }
    }

    /// Blocks at view `v - 1` or, failing that, the newest block below `v`.
    fn parent_candidates(&self, v: View) -> Vec<Block> {
        if let Some(ids) = self.by_view.get(&v.prev()).filter(|_| v.prev() != View::GENESIS) {
            return ids.iter().map(|id| self.blocks[id].clone()).collect();
        }
        self.by_view
            .range(..v)
            .next_back()
            .map(|(_, ids)| ids.iter().map(|id| self.blocks[id].clone()).collect())
            .unwrap_or_default()
    }

    fn alternative_parent(&self, proper: &Block, v: View, rng: &mut ChaCha8Rng) -> Block {
        let grand = self.blocks.get(&proper.parent()).filter(|_| !proper.is_genesis());
        match (rng.gen_range(0..3), grand) {
            (0, _) => proper.clone(),
            (1, Some(g)) if g.view() < v => g.clone(),
            _ => Block::genesis().clone(),
        }
    }

    fn byz_leader_views(&self) -> Vec<(View, ValidatorId)> {
        let lo = self.max_view.0.saturating_sub(1).max(1);
        (lo..=self.max_view.0 + 1)
            .map(View)
            .filter_map(|v| {
                let l = leader(v, self.n);
                self.byz.contains(&l).then_some((v, l))
            })
            .collect()
    }

    fn refill_equivocator(&mut self, rng: &mut ChaCha8Rng) {
        for (v, l) in self.byz_leader_views() {
            // Stage 0: conflicting optimistic proposals.
            if !self.equivocated.contains(&(v, 0)) {
                let cands = self.parent_candidates(v);
                if let Some(proper) = cands.choose(rng).cloned() {
                    self.equivocated.insert((v, 0));
                    let alt = self.alternative_parent(&proper, v, rng);
                    let p1 = self.payload(l);
                    let p2 = self.payload(l);
                    let b1 = Block::child_of(&proper, v, p1);
                    let b2 = Block::child_of(&alt, v, p2);
                    self.equivocate(rng, VoteKind::Optimistic, &b1, &b2, |b| Message::OptimisticProposal {
                        view: v,
                        block: b.clone(),
                        src: l,
                    });
                    return;
                }
            }
            // Stage 1: conflicting normal proposals once C_{v-1} is known.
            if !self.equivocated.contains(&(v, 1)) {
                if let Some(qc) = self.qc_for_view(v.prev()).filter(|q| self.blocks.contains_key(&q.block)) {
                    self.equivocated.insert((v, 1));
                    if rng.gen_bool(0.5) {
                        let parent = self.blocks[&qc.block].clone();
                        // Reuse the optimistic blocks so honest validators that
                        // opt-voted one of them see the other one here.
                        let mut opts: Vec<Block> = self
                            .by_view
                            .get(&v)
                            .into_iter()
                            .flatten()
                            .map(|id| self.blocks[id].clone())
                            .filter(|b| b.parent() == qc.block && self.byz.contains(&payload_author(b)))
                            .collect();
                        while opts.len() < 2 {
                            let p = self.payload(l);
                            opts.push(Block::child_of(&parent, v, p));
                        }
                        let (b1, b2) = (opts[1].clone(), opts[0].clone());
                        let qc2 = qc.clone();
                        self.equivocate(rng, VoteKind::Normal, &b1, &b2, move |b| Message::NormalProposal {
                            view: v,
                            block: b.clone(),
                            qc: qc2.clone(),
                            src: l,
                        });
                        return;
                    }
                }
            }
            // Stage 2: conflicting fallback proposals once TC_{v-1} is known.
            if !self.equivocated.contains(&(v, 2)) {
                if let Some(tc) = self.tc_for_view(v.prev()) {
                    let high = tc_high_qc(&tc).clone();
                    if let Some(parent) = self.blocks.get(&high.block).cloned() {
                        self.equivocated.insert((v, 2));
                        let p1 = self.payload(l);
                        let p2 = self.payload(l);
                        let b1 = Block::child_of(&parent, v, p1);
                        let b2 = Block::child_of(&parent, v, p2);
                        self.equivocate(rng, VoteKind::Fallback, &b1, &b2, move |b| Message::FallbackProposal {
                            view: v,
                            block: b.clone(),
                            qc: high.clone(),
                            tc: tc.clone(),
                            src: l,
                        });
                        return;
                    }
                }
            }
        }
        self.byzantine_timeouts(rng, false);
    }

    fn equivocate(
        &mut self,
        rng: &mut ChaCha8Rng,
        kind: VoteKind,
        b1: &Block,
        b2: &Block,
        make: impl Fn(&Block) -> Message,
    ) {
        let (g1, g2) = self.split(rng);
        let m1 = make(b1);
        let m2 = make(b2);
        self.observe(&m1);
        self.observe(&m2);
        self.send_to(&g1, &m1);
        self.send_to(&g2, &m2);
        for a in self.byz.clone() {
            self.vote(a, kind, b1);
            self.vote(a, kind, b2);
        }
    }

    /// One timeout per Byzantine validator for the frontier view.
    fn byzantine_timeouts(&mut self, rng: &mut ChaCha8Rng, stale: bool) {
        let v = if rng.gen_bool(0.5) { self.max_view } else { self.max_view.prev().max(View(1)) };
        for a in self.byz.clone() {
            let qc = if stale {
                let old: Vec<QuorumCert> = self.qcs.values().filter(|q| q.view < v).cloned().collect();
                old.choose(rng).cloned().unwrap_or_else(|| QuorumCert::genesis(self.n))
            } else {
                let h = self.highest_qc();
                if h.view < v {
                    h
                } else {
                    match self.qcs.values().filter(|q| q.view < v).max_by_key(|q| q.view) {
                        Some(q) => q.clone(),
                        None => continue,
                    }
                }
            };
            self.timeout(a, v, qc);
        }
    }

    fn refill_splitter(&mut self, rng: &mut ChaCha8Rng) {
        let lo = View(self.max_view.0.saturating_sub(2).max(1));
        let targets: Vec<Block> = self
            .by_view
            .range(lo..)
            .flat_map(|(_, ids)| ids.iter().map(|id| self.blocks[id].clone()))
            .collect();
        for b in &targets {
            let kind = self.proposed_as[&b.id()];
            for a in self.byz.clone() {
                self.vote(a, kind, b);
                if rng.gen_bool(0.25) {
                    let other = *VoteKind::ALL.choose(rng).unwrap();
                    self.vote(a, other, b);
                }
            }
        }
        if self.queue.is_empty() {
            self.byzantine_timeouts(rng, true);
        }
    }

    fn refill_random(&mut self, rng: &mut ChaCha8Rng) {
        let a = *self.byz.choose(rng).unwrap();
        match rng.gen_range(0..7) {
            0 | 1 => {
                let blocks: Vec<Block> = self.blocks.values().filter(|b| !b.is_genesis()).cloned().collect();
                if let Some(b) = blocks.choose(rng) {
                    let kind = *VoteKind::ALL.choose(rng).unwrap();
                    self.voted.remove(&(a, b.view(), kind, b.id()));
                    self.vote(a, kind, b);
                }
            }
            2 => {
                let v = View(self.max_view.0 + rng.gen_range(0..2)).max(View(1));
                let qcs: Vec<QuorumCert> = self.qcs.values().filter(|q| q.view < v).cloned().collect();
                if let Some(q) = qcs.choose(rng).cloned() {
                    self.timed_out.remove(&(a, v));
                    self.timeout(a, v, q);
                }
            }
            3 => {
                let qcs: Vec<QuorumCert> = self.qcs.values().cloned().collect();
                let qc = qcs.choose(rng).unwrap().clone();
                let to = self.random_dest(rng);
                self.push(to, Message::Qc { qc, src: a });
            }
            4 => {
                let full: Vec<View> = self
                    .timeouts
                    .iter()
                    .filter(|(_, p)| p.len() >= quorum_size(self.f))
                    .map(|(v, _)| *v)
                    .collect();
                if let Some(&v) = full.choose(rng) {
                    let tc = self.tc_for_view(v).unwrap();
                    let to = self.random_dest(rng);
                    self.push(to, Message::Tc { tc, src: a });
                }
            }
            5 => {
                let weak: Vec<View> = self
                    .timeouts
                    .iter()
                    .filter(|(_, p)| p.len() >= weak_quorum_size(self.f))
                    .map(|(v, _)| *v)
                    .collect();
                if let Some(&v) = weak.choose(rng) {
                    let wtc = WeakTimeoutCert::new(v, self.timeouts[&v].values().take(weak_quorum_size(self.f)).cloned());
                    self.push(Dest::All, Message::WeakTc { wtc, src: a });
                }
            }
            _ => {
                // A proposal in a Byzantine-led view, on a random known parent.
                if let Some((v, l)) = self.byz_leader_views().choose(rng).copied() {
                    let parents: Vec<Block> = self.blocks.values().filter(|b| b.view() < v).cloned().collect();
                    let parent = parents.choose(rng).unwrap().clone();
                    let p = self.payload(l);
                    let block = Block::child_of(&parent, v, p);
                    let msg = match self.qc_for_view(v.prev()).filter(|q| q.block == parent.id()) {
                        Some(qc) if rng.gen_bool(0.5) => Message::NormalProposal {
                            view: v,
                            block,
                            qc,
                            src: l,
                        },
                        _ => Message::OptimisticProposal { view: v, block, src: l },
                    };
                    let to = self.random_dest(rng);
                    self.push(to, msg);
                }
            }
        }
    }

    fn random_dest(&self, rng: &mut ChaCha8Rng) -> Dest {
        if rng.gen_bool(0.5) {
            Dest::All
        } else {
            Dest::To(*self.honest.choose(rng).unwrap_or(&self.byz[0]))
        }
    }
}

fn payload_author(b: &Block) -> ValidatorId {
    let p = &b.payload().0;
    if p.len() >= 5 && p[0] == 1 {
        ValidatorId(u32::from_be_bytes([p[1], p[2], p[3], p[4]]))
    } else {
        ValidatorId(u32::MAX)
    }
}
