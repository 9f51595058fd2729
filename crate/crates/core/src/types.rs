//! Protocol data types, certificate validity predicates and the leader schedule.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::LazyLock;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

/// A numbered epoch of the protocol. View 0 belongs to the genesis certificate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct View(pub u64);

impl View {
    pub const GENESIS: View = View(0);

    pub fn next(self) -> View {
        View(self.0 + 1)
    }

    /// The previous view, saturating at genesis.
    pub fn prev(self) -> View {
        View(self.0.saturating_sub(1))
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Position of a block in the chain. Genesis has height 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Height(pub u64);

impl Height {
    pub fn next(self) -> Height {
        Height(self.0 + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ValidatorId(pub u32);

impl ValidatorId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ValidatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Number of validators for a fault bound `f`.
pub fn validator_count(f: usize) -> usize {
    3 * f + 1
}

/// Size of a quorum, `2f + 1`.
pub fn quorum_size(f: usize) -> usize {
    2 * f + 1
}

/// Size of a weak certificate, `f + 1`: guarantees at least one honest member.
pub fn weak_quorum_size(f: usize) -> usize {
    f + 1
}

/// Round-robin leader schedule.
pub fn leader(view: View, n: usize) -> ValidatorId {
    assert!(n >= 1, "leader schedule needs at least one validator");
    ValidatorId((view.0 % n as u64) as u32)
}

/// Block identifier: the first 128 bits of a SHA-256 digest over the block's
/// `(height, view, parent, payload)` tuple.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockId(pub u128);

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

impl fmt::Debug for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Eight hex digits are plenty to tell blocks apart in test output.
        write!(f, "#{:08x}", (self.0 >> 96) as u32)
    }
}

impl std::str::FromStr for BlockId {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        u128::from_str_radix(s, 16).map(BlockId)
    }
}

impl Serialize for BlockId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BlockId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Abstract block contents, rendered as hex.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Payload(pub Vec<u8>);

impl Payload {
    /// A payload that is unique per `(author, counter)`; `tag` separates
    /// honest from adversarial producers.
    pub fn tagged(tag: u8, author: ValidatorId, counter: u64) -> Payload {
        let mut bytes = Vec::with_capacity(13);
        bytes.push(tag);
        bytes.extend_from_slice(&author.0.to_be_bytes());
        bytes.extend_from_slice(&counter.to_be_bytes());
        Payload(bytes)
    }
}

impl Serialize for Payload {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut s = String::with_capacity(self.0.len() * 2);
        for b in &self.0 {
            s.push_str(&format!("{b:02x}"));
        }
        serializer.serialize_str(&s)
    }
}

impl<'de> Deserialize<'de> for Payload {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        if s.len() % 2 != 0 {
            return Err(serde::de::Error::custom("odd-length payload hex"));
        }
        (0..s.len())
            .step_by(2)
            .map(|i| u8::from_str_radix(&s[i..i + 2], 16))
            .collect::<Result<Vec<_>, _>>()
            .map(Payload)
            .map_err(serde::de::Error::custom)
    }
}

/// A node of the block tree. The id is always consistent with the contents:
/// blocks can only be built through [`Block::new`] or deserialization, which
/// recomputes and checks it.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "BlockRepr")]
pub struct Block {
    id: BlockId,
    height: Height,
    view: View,
    parent: BlockId,
    payload: Payload,
}

#[derive(Deserialize)]
struct BlockRepr {
    id: BlockId,
    height: Height,
    view: View,
    parent: BlockId,
    payload: Payload,
}

impl TryFrom<BlockRepr> for Block {
    type Error = String;

    fn try_from(r: BlockRepr) -> Result<Self, Self::Error> {
        if r.height == Height(0) {
            let g = Block::genesis();
            if r.id == g.id && r.view == g.view && r.parent == g.parent && r.payload == g.payload {
                return Ok(g.clone());
            }
            return Err("malformed genesis block".into());
        }
        let b = Block::new(r.height, r.view, r.parent, r.payload);
        if b.id != r.id {
            return Err(format!("block id {} does not match its contents", r.id));
        }
        Ok(b)
    }
}

static GENESIS: LazyLock<Block> = LazyLock::new(|| {
    let id = Block::digest(Height(0), View::GENESIS, BlockId(0), &Payload::default());
    Block {
        id,
        height: Height(0),
        view: View::GENESIS,
        parent: id,
        payload: Payload::default(),
    }
});

impl Block {
    pub fn new(height: Height, view: View, parent: BlockId, payload: Payload) -> Block {
        let id = Block::digest(height, view, parent, &payload);
        Block {
            id,
            height,
            view,
            parent,
            payload,
        }
    }

    /// A block extending `parent` at `view`.
    pub fn child_of(parent: &Block, view: View, payload: Payload) -> Block {
        Block::new(parent.height.next(), view, parent.id, payload)
    }

    /// The genesis block: height 0, view 0, parent pointing at itself.
    pub fn genesis() -> &'static Block {
        &GENESIS
    }

    pub fn genesis_id() -> BlockId {
        GENESIS.id
    }

    fn digest(height: Height, view: View, parent: BlockId, payload: &Payload) -> BlockId {
        let mut h = Sha256::new();
        h.update(height.0.to_be_bytes());
        h.update(view.0.to_be_bytes());
        h.update(parent.0.to_be_bytes());
        h.update((payload.0.len() as u64).to_be_bytes());
        h.update(&payload.0);
        let out = h.finalize();
        let mut first = [0u8; 16];
        first.copy_from_slice(&out[..16]);
        BlockId(u128::from_be_bytes(first))
    }

    pub fn id(&self) -> BlockId {
        self.id
    }

    pub fn height(&self) -> Height {
        self.height
    }

    pub fn view(&self) -> View {
        self.view
    }

    pub fn parent(&self) -> BlockId {
        self.parent
    }

    pub fn payload(&self) -> &Payload {
        &self.payload
    }

    pub fn is_genesis(&self) -> bool {
        self.id == GENESIS.id
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VoteKind {
    Normal,
    Fallback,
    Optimistic,
}

impl VoteKind {
    pub const ALL: [VoteKind; 3] = [VoteKind::Normal, VoteKind::Fallback, VoteKind::Optimistic];
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Vote {
    pub kind: VoteKind,
    pub block: BlockId,
    pub view: View,
    pub author: ValidatorId,
}

/// `2f + 1` same-kind votes for one block in one view. Signers are kept as a
/// sorted list so that malformed (duplicated) signer sets stay representable.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct QuorumCert {
    pub view: View,
    pub block: BlockId,
    pub kind: VoteKind,
    pub signers: Vec<ValidatorId>,
}

impl QuorumCert {
    pub fn new(view: View, block: BlockId, kind: VoteKind, signers: impl IntoIterator<Item = ValidatorId>) -> Self {
        let mut signers: Vec<_> = signers.into_iter().collect();
        signers.sort();
        QuorumCert {
            view,
            block,
            kind,
            signers,
        }
    }

    /// The bootstrap certificate for genesis, signed by every validator.
    pub fn genesis(n: usize) -> QuorumCert {
        QuorumCert::new(
            View::GENESIS,
            Block::genesis_id(),
            VoteKind::Normal,
            (0..n as u32).map(ValidatorId),
        )
    }

    pub fn is_genesis(&self, n: usize) -> bool {
        self.view == View::GENESIS
            && self.block == Block::genesis_id()
            && self.signers.len() == n
            && self.signers.iter().enumerate().all(|(i, s)| s.0 as usize == i)
    }
}

/// `⟨timeout, v, lock⟩` message.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TimeoutMsg {
    pub view: View,
    pub author: ValidatorId,
    pub high_qc: QuorumCert,
}

/// `2f + 1` timeouts for one view, sorted by author.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TimeoutCert {
    pub view: View,
    pub timeouts: Vec<TimeoutMsg>,
}

impl TimeoutCert {
    pub fn new(view: View, timeouts: impl IntoIterator<Item = TimeoutMsg>) -> Self {
        let mut timeouts: Vec<_> = timeouts.into_iter().collect();
        timeouts.sort_by_key(|t| t.author);
        TimeoutCert { view, timeouts }
    }
}

/// `f + 1` timeouts for one view: evidence that an honest validator timed out.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WeakTimeoutCert {
    pub view: View,
    pub timeouts: Vec<TimeoutMsg>,
}

impl WeakTimeoutCert {
    pub fn new(view: View, timeouts: impl IntoIterator<Item = TimeoutMsg>) -> Self {
        let mut timeouts: Vec<_> = timeouts.into_iter().collect();
        timeouts.sort_by_key(|t| t.author);
        WeakTimeoutCert { view, timeouts }
    }
}

/// The ten message kinds on the wire. Votes are the three `Vote` kinds.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Message {
    NormalProposal {
        block: Block,
        qc: QuorumCert,
        view: View,
        src: ValidatorId,
    },
    FallbackProposal {
        block: Block,
        qc: QuorumCert,
        tc: TimeoutCert,
        view: View,
        src: ValidatorId,
    },
    OptimisticProposal {
        block: Block,
        view: View,
        src: ValidatorId,
    },
    Vote(Vote),
    Timeout(TimeoutMsg),
    Qc {
        qc: QuorumCert,
        src: ValidatorId,
    },
    Tc {
        tc: TimeoutCert,
        src: ValidatorId,
    },
    WeakTc {
        wtc: WeakTimeoutCert,
        src: ValidatorId,
    },
}

impl Message {
    /// The sender. For votes and timeouts this is the signing author.
    pub fn src(&self) -> ValidatorId {
        match self {
            Message::NormalProposal { src, .. }
            | Message::FallbackProposal { src, .. }
            | Message::OptimisticProposal { src, .. }
            | Message::Qc { src, .. }
            | Message::Tc { src, .. }
            | Message::WeakTc { src, .. } => *src,
            Message::Vote(v) => v.author,
            Message::Timeout(t) => t.author,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Message::NormalProposal { .. } => "normal_proposal",
            Message::FallbackProposal { .. } => "fallback_proposal",
            Message::OptimisticProposal { .. } => "optimistic_proposal",
            Message::Vote(v) => match v.kind {
                VoteKind::Normal => "vote",
                VoteKind::Fallback => "fb_vote",
                VoteKind::Optimistic => "opt_vote",
            },
            Message::Timeout(_) => "timeout",
            Message::Qc { .. } => "qc",
            Message::Tc { .. } => "tc",
            Message::WeakTc { .. } => "weak_tc",
        }
    }

    /// The block carried by a proposal.
    pub fn block(&self) -> Option<&Block> {
        match self {
            Message::NormalProposal { block, .. }
            | Message::FallbackProposal { block, .. }
            | Message::OptimisticProposal { block, .. } => Some(block),
            _ => None,
        }
    }
}

fn distinct_in_range(ids: impl Iterator<Item = ValidatorId>, n: usize) -> Option<usize> {
    let mut seen = BTreeSet::new();
    for id in ids {
        if id.index() >= n || !seen.insert(id) {
            return None;
        }
    }
    Some(seen.len())
}

/// Structural QC validity with an explicit signer threshold.
pub fn validate_qc_with_threshold(qc: &QuorumCert, n: usize, threshold: usize) -> bool {
    if qc.view == View::GENESIS {
        return qc.is_genesis(n);
    }
    distinct_in_range(qc.signers.iter().copied(), n) == Some(threshold)
}

/// True iff the QC has exactly `2f+1` distinct signers from `[0, 3f+1)`, or is
/// the genesis bootstrap certificate.
pub fn validate_qc(qc: &QuorumCert, f: usize) -> bool {
    validate_qc_with_threshold(qc, validator_count(f), quorum_size(f))
}

fn validate_timeouts(view: View, timeouts: &[TimeoutMsg], f: usize, size: usize, qc_threshold: usize) -> bool {
    let n = validator_count(f);
    timeouts.len() == size
        && distinct_in_range(timeouts.iter().map(|t| t.author), n) == Some(size)
        && timeouts.iter().all(|t| t.view == view && validate_qc_with_threshold(&t.high_qc, n, qc_threshold))
}

pub fn validate_tc(tc: &TimeoutCert, f: usize) -> bool {
    validate_tc_with_qc_threshold(tc, f, quorum_size(f))
}

pub fn validate_tc_with_qc_threshold(tc: &TimeoutCert, f: usize, qc_threshold: usize) -> bool {
    validate_timeouts(tc.view, &tc.timeouts, f, quorum_size(f), qc_threshold)
}

pub fn validate_weak_tc(wtc: &WeakTimeoutCert, f: usize) -> bool {
    validate_weak_tc_with_qc_threshold(wtc, f, quorum_size(f))
}

pub fn validate_weak_tc_with_qc_threshold(wtc: &WeakTimeoutCert, f: usize, qc_threshold: usize) -> bool {
    validate_timeouts(wtc.view, &wtc.timeouts, f, weak_quorum_size(f), qc_threshold)
}

/// The highest-ranked QC embedded in a TC: maximal view, ties broken by the
/// smallest block id.
pub fn tc_high_qc(tc: &TimeoutCert) -> &QuorumCert {
    tc.timeouts
        .iter()
        .map(|t| &t.high_qc)
        .max_by(|a, b| a.view.cmp(&b.view).then_with(|| b.block.cmp(&a.block)))
        .expect("a timeout certificate is never empty")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[u32]) -> Vec<ValidatorId> {
        v.iter().copied().map(ValidatorId).collect()
    }

    fn qc(view: u64, block: BlockId, signers: &[u32]) -> QuorumCert {
        QuorumCert {
            view: View(view),
            block,
            kind: VoteKind::Normal,
            signers: ids(signers),
        }
    }

    fn timeout(view: u64, author: u32, high_qc: QuorumCert) -> TimeoutMsg {
        TimeoutMsg {
            view: View(view),
            author: ValidatorId(author),
            high_qc,
        }
    }

    #[test]
    fn leader_is_round_robin() {
        assert_eq!(leader(View(0), 4), ValidatorId(0));
        assert_eq!(leader(View(5), 4), ValidatorId(1));
        assert_eq!(leader(View(7), 7), ValidatorId(0));
    }

    #[test]
    fn qc_validity() {
        assert!(validate_qc(&QuorumCert::genesis(4), 1));
        let b = Block::child_of(Block::genesis(), View(1), Payload::default());
        assert!(validate_qc(&qc(1, b.id(), &[0, 1, 2]), 1));
        assert!(!validate_qc(&qc(1, b.id(), &[0, 0, 1]), 1));
        assert!(!validate_qc(&qc(1, b.id(), &[0, 1]), 1));
        assert!(!validate_qc(&qc(1, b.id(), &[0, 1, 4]), 1));
        // view 0 is reserved for the genesis certificate
        assert!(!validate_qc(&qc(0, b.id(), &[0, 1, 2]), 1));
        assert!(!validate_qc(&qc(0, Block::genesis_id(), &[0, 1, 2]), 1));
    }

    #[test]
    fn tc_validity() {
        let g = QuorumCert::genesis(4);
        let tc = TimeoutCert::new(View(2), (0..3).map(|a| timeout(2, a, g.clone())));
        assert!(validate_tc(&tc, 1));

        let mixed = TimeoutCert {
            view: View(2),
            timeouts: vec![timeout(2, 0, g.clone()), timeout(2, 1, g.clone()), timeout(3, 2, g.clone())],
        };
        assert!(!validate_tc(&mixed, 1));

        let short = TimeoutCert::new(View(2), (0..2).map(|a| timeout(2, a, g.clone())));
        assert!(!validate_tc(&short, 1));

        let dup = TimeoutCert {
            view: View(2),
            timeouts: vec![timeout(2, 0, g.clone()), timeout(2, 0, g.clone()), timeout(2, 1, g.clone())],
        };
        assert!(!validate_tc(&dup, 1));

        let bad_qc = TimeoutCert::new(
            View(2),
            vec![timeout(2, 0, g.clone()), timeout(2, 1, g.clone()), timeout(2, 2, qc(1, BlockId(9), &[0, 1]))],
        );
        assert!(!validate_tc(&bad_qc, 1));

        let weak = WeakTimeoutCert::new(View(2), (0..2).map(|a| timeout(2, a, g.clone())));
        assert!(validate_weak_tc(&weak, 1));
    }

    #[test]
    fn high_qc_selection() {
        let g = QuorumCert::genesis(4);
        let all_genesis = TimeoutCert::new(View(3), (0..3).map(|a| timeout(3, a, g.clone())));
        assert_eq!(tc_high_qc(&all_genesis), &g);

        let b1 = Block::child_of(Block::genesis(), View(1), Payload(vec![1]));
        let b2 = Block::child_of(&b1, View(2), Payload(vec![2]));
        let q1 = qc(1, b1.id(), &[0, 1, 2]);
        let q2 = qc(2, b2.id(), &[0, 1, 2]);
        let tc = TimeoutCert::new(
            View(3),
            vec![timeout(3, 0, g.clone()), timeout(3, 1, q2.clone()), timeout(3, 2, q1)],
        );
        assert_eq!(tc_high_qc(&tc), &q2);
    }

    #[test]
    fn high_qc_tie_breaks_on_smallest_block_id() {
        let x = Block::child_of(Block::genesis(), View(3), Payload(vec![1]));
        let y = Block::child_of(Block::genesis(), View(3), Payload(vec![2]));
        let (lo, hi) = if x.id() < y.id() { (x, y) } else { (y, x) };
        let q_lo = qc(3, lo.id(), &[0, 1, 2]);
        let q_hi = qc(3, hi.id(), &[1, 2, 3]);
        let q_old = qc(1, hi.id(), &[0, 1, 3]);
        let tc = TimeoutCert::new(
            View(4),
            vec![timeout(4, 0, q_hi), timeout(4, 1, q_old), timeout(4, 2, q_lo.clone())],
        );
        assert_eq!(tc_high_qc(&tc), &q_lo);
    }

    #[test]
    fn block_ids_track_contents() {
        let g = Block::genesis();
        assert_eq!(g.parent(), g.id());
        assert_eq!(g.height(), Height(0));
        let a = Block::child_of(g, View(1), Payload(vec![1]));
        let b = Block::child_of(g, View(1), Payload(vec![2]));
        let c = Block::child_of(g, View(2), Payload(vec![1]));
        assert_ne!(a.id(), b.id());
        assert_ne!(a.id(), c.id());
        assert_eq!(a.id(), Block::child_of(g, View(1), Payload(vec![1])).id());
    }

    #[test]
    fn quorum_intersection_by_enumeration() {
        // Any two (2f+1)-subsets of 3f+1 validators share at least f+1 members,
        // so at least one of them is honest.
        for f in 1..=3usize {
            let n = validator_count(f);
            let q = quorum_size(f);
            let quorums: Vec<u32> = (0u32..(1 << n)).filter(|m| m.count_ones() as usize == q).collect();
            let mut min_overlap = usize::MAX;
            for &a in &quorums {
                for &b in &quorums {
                    min_overlap = min_overlap.min((a & b).count_ones() as usize);
                }
            }
            assert_eq!(min_overlap, f + 1, "f={f}");
            // With any f byzantine validators, the overlap keeps an honest member.
            let mut byz_sets = (0u32..(1 << n)).filter(|m| m.count_ones() as usize == f);
            assert!(byz_sets.all(|byz| quorums
                .iter()
                .all(|&a| quorums.iter().all(|&b| (a & b & !byz) != 0))));
        }
    }
}
