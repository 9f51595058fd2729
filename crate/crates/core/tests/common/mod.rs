//! Random handler sequences driven directly against `ValidatorState`,
//! independent of the simulator's scheduler.

#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use moonshot_core::monitor::{check_certificate_uniqueness, check_vote_budget};
use moonshot_core::*;

pub struct SequenceOutcome {
    pub events: usize,
    pub votes: usize,
    pub certificates: usize,
    pub violations: Vec<Violation>,
    pub budget: Result<(), String>,
    pub uniqueness: Result<(), String>,
}

/// Runs `len` random events against `3f + 1` validators. The last `f` are
/// Byzantine and send forged votes, timeouts and proposals.
pub fn random_sequence(seed: u64, f: usize, len: usize) -> SequenceOutcome {
    let n = 3 * f + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let byz: BTreeSet<ValidatorId> = (n - f..n).map(|i| ValidatorId(i as u32)).collect();
    let honest: Vec<ValidatorId> = (0..n - f).map(|i| ValidatorId(i as u32)).collect();
    let mut vals: Vec<ValidatorState> = honest.iter().map(|&id| ValidatorState::new(id, f, None)).collect();
    let mut mon = Monitor::new(f, &byz);
    let mut pending: Vec<(ValidatorId, Message)> = Vec::new();
    let mut blocks = vec![Block::genesis().clone()];
    let mut qcs = vec![QuorumCert::genesis(n)];
    let mut counter = 0u64;

    let deliver = |out: Vec<Outgoing>,
                       from: ValidatorId,
                       pending: &mut Vec<(ValidatorId, Message)>,
                       blocks: &mut Vec<Block>,
                       qcs: &mut Vec<QuorumCert>,
                       found: &mut Vec<monitor::Failure>,
                       mon: &mut Monitor| {
        for o in out {
            mon.observe_send(from, &o.msg, found);
            if let Some(b) = o.msg.block() {
                if !blocks.contains(b) {
                    blocks.push(b.clone());
                }
            }
            if let Message::Qc { qc, .. } = &o.msg {
                if !qcs.contains(qc) {
                    qcs.push(qc.clone());
                }
            }
            match o.to {
                Dest::All => pending.extend(honest.iter().map(|&h| (h, o.msg.clone()))),
                Dest::To(d) if !byz.contains(&d) => pending.push((d, o.msg.clone())),
                Dest::To(_) => {}
            }
        }
    };

    for step in 0..=len as u64 {
        let mut found = Vec::new();
        if step == 0 {
            for i in 0..vals.len() {
                let out = vals[i].bootstrap();
                deliver(out, honest[i], &mut pending, &mut blocks, &mut qcs, &mut found, &mut mon);
            }
        } else {
            let roll = rng.gen_range(0..100);
            if roll < 3 {
                let i = rng.gen_range(0..vals.len());
                let out = vals[i].timer_expire();
                deliver(out, honest[i], &mut pending, &mut blocks, &mut qcs, &mut found, &mut mon);
            } else if roll < 18 && !byz.is_empty() {
                let b = **byz.iter().collect::<Vec<_>>().choose(&mut rng).unwrap();
                let msg = forge(&mut rng, b, n, &blocks, &qcs, &mut counter);
                mon.observe_send(b, &msg, &mut found);
                if let Some(blk) = msg.block() {
                    if !blocks.contains(blk) {
                        blocks.push(blk.clone());
                    }
                }
                if rng.gen_bool(0.5) {
                    pending.extend(honest.iter().map(|&h| (h, msg.clone())));
                } else {
                    pending.push((*honest.choose(&mut rng).unwrap(), msg));
                }
            } else if !pending.is_empty() {
                let (dst, msg) = pending.swap_remove(rng.gen_range(0..pending.len()));
                let i = dst.index();
                let out = vals[i].handle_message(msg);
                deliver(out, dst, &mut pending, &mut blocks, &mut qcs, &mut found, &mut mon);
            }
        }
        mon.check(step, &vals, found);
    }

    let ledger = mon.ledger();
    SequenceOutcome {
        events: len,
        votes: ledger.sent_votes().len(),
        certificates: ledger.certified().count(),
        violations: mon.violations().to_vec(),
        budget: check_vote_budget(ledger).map_err(|e| e.detail),
        uniqueness: check_certificate_uniqueness(ledger).map_err(|e| e.detail),
    }
}

fn forge(
    rng: &mut ChaCha8Rng,
    b: ValidatorId,
    n: usize,
    blocks: &[Block],
    qcs: &[QuorumCert],
    counter: &mut u64,
) -> Message {
    let blk = blocks.choose(rng).unwrap();
    let qc = qcs.choose(rng).unwrap();
    let top = blocks.iter().map(|b| b.view().0).max().unwrap_or(0);
    let view = View(rng.gen_range(top.saturating_sub(1)..=top + 1).max(1));
    match rng.gen_range(0..5) {
        0 | 1 => {
            let kind = *[VoteKind::Normal, VoteKind::Optimistic, VoteKind::Fallback].choose(rng).unwrap();
            Message::Vote(Vote {
                kind,
                block: blk.id(),
                view: blk.view().max(View(1)),
                author: b,
            })
        }
        2 => Message::Timeout(TimeoutMsg {
            view,
            author: b,
            high_qc: qc.clone(),
        }),
        _ => {
            *counter += 1;
            // Proposals only pass the leader check in views `b` leads.
            let mut v = view;
            while leader(v, n) != b {
                v = v.next();
            }
            let parent = blocks.iter().find(|x| x.id() == qc.block).unwrap_or(blk);
            let child = Block::child_of(parent, v, Payload::tagged(1, b, *counter));
            if rng.gen_bool(0.5) {
                Message::OptimisticProposal {
                    block: child,
                    view: v,
                    src: b,
                }
            } else {
                Message::NormalProposal {
                    block: child,
                    qc: qc.clone(),
                    view: v,
                    src: b,
                }
            }
        }
    }
}
