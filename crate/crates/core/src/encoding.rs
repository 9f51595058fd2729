//! Canonical single-line text encoding used in traces, scripts and reports.
//!
//! Every protocol type renders as compact JSON with a fixed field order. Sets
//! are stored sorted in the types themselves, so the rendering of equal values
//! is byte-identical across runs and platforms.

use serde::de::DeserializeOwned;
use serde::Serialize;

pub trait Canonical {
    fn canonical(&self) -> String;
}

impl<T: Serialize + ?Sized> Canonical for T {
    fn canonical(&self) -> String {
        serde_json::to_string(self).expect("protocol types always serialize")
    }
}

pub fn parse_canonical<T: DeserializeOwned>(s: &str) -> Result<T, serde_json::Error> {
    serde_json::from_str(s.trim())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::*;
    use proptest::prelude::*;

    fn arb_qc() -> impl Strategy<Value = QuorumCert> {
        (1u64..50, any::<u128>(), 0usize..3, proptest::collection::btree_set(0u32..7, 0..7)).prop_map(
            |(view, block, kind, signers)| {
                QuorumCert::new(View(view), BlockId(block), VoteKind::ALL[kind], signers.into_iter().map(ValidatorId))
            },
        )
    }

    fn arb_message() -> impl Strategy<Value = Message> {
        let block = (1u64..20, 1u64..20, any::<u128>(), proptest::collection::vec(any::<u8>(), 0..6))
            .prop_map(|(h, v, p, pl)| Block::new(Height(h), View(v), BlockId(p), Payload(pl)));
        prop_oneof![
            (block.clone(), arb_qc(), 0u32..7).prop_map(|(b, qc, src)| Message::NormalProposal {
                view: b.view(),
                block: b,
                qc,
                src: ValidatorId(src)
            }),
            (block, 0u32..7).prop_map(|(b, src)| Message::OptimisticProposal {
                view: b.view(),
                block: b,
                src: ValidatorId(src)
            }),
            (arb_qc(), 0u32..7).prop_map(|(qc, a)| Message::Timeout(TimeoutMsg {
                view: qc.view.next(),
                author: ValidatorId(a),
                high_qc: qc
            })),
            (arb_qc(), 0u32..7).prop_map(|(qc, a)| Message::Vote(Vote {
                kind: qc.kind,
                block: qc.block,
                view: qc.view,
                author: ValidatorId(a)
            })),
            (proptest::collection::vec(arb_qc(), 1..4), 0u32..7).prop_map(|(qcs, src)| Message::Tc {
                tc: TimeoutCert::new(
                    View(9),
                    qcs.into_iter().enumerate().map(|(i, q)| TimeoutMsg {
                        view: View(9),
                        author: ValidatorId(i as u32),
                        high_qc: q
                    })
                ),
                src: ValidatorId(src)
            }),
        ]
    }

    proptest! {
        #[test]
        fn messages_round_trip(m in arb_message()) {
            let text = m.canonical();
            prop_assert!(!text.contains('\n'));
            let back: Message = parse_canonical(&text).unwrap();
            prop_assert_eq!(&back, &m);
            prop_assert_eq!(back.canonical(), text);
        }
    }

    #[test]
    fn tampered_block_id_is_rejected() {
        let b = Block::child_of(Block::genesis(), View(1), Payload(vec![7]));
        let text = b.canonical();
        let id = b.id().to_string();
        let forged = text.replacen(&id, &format!("{:032x}", b.id().0 ^ 1), 1);
        assert!(parse_canonical::<Block>(&forged).is_err());
        assert_eq!(parse_canonical::<Block>(&text).unwrap(), b);
    }

    #[test]
    fn genesis_round_trips() {
        let g = Block::genesis();
        let back: Block = parse_canonical(&g.canonical()).unwrap();
        assert!(back.is_genesis());
    }
}
