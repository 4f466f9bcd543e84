//! The twenty-transaction reference DAG and a replay of it through the box
//! protocol.

use std::collections::BTreeSet;

use crate::boxchain::{BoxError, Boxchain, BoxchainConfig, CapacitySpec, CloseOutcome, Conduct, Standings};
use crate::ledger::{DagLedger, TxId};
use crate::poset::{redundant_edges, PosetError};
use crate::rng::Streams;

pub const FIXTURE_DUMP: &str = include_str!("../data/fixture20.dump");
pub const FIXTURE_TAU: f64 = 10.0;
/// Replay horizon; the sixth box closes on its timer at this instant.
pub const FIXTURE_END: f64 = 60.0;

pub const EXPECTED_BOXES: [&[TxId]; 6] = [
    &[2, 3, 4],
    &[5, 6, 7],
    &[8, 9, 10, 11],
    &[12, 13, 14],
    &[15, 16, 17, 18],
    &[19, 20],
];
pub const EXPECTED_BOXERS: [TxId; 6] = [4, 7, 11, 14, 18, 20];
pub const EXPECTED_TIPS: [TxId; 4] = [15, 18, 19, 20];
pub const EXPECTED_REDUNDANT: [(TxId, TxId); 2] = [(9, 2), (17, 11)];
pub const EXPECTED_WIDTH: usize = 4;
pub const EXPECTED_HEIGHT: usize = 7;

#[derive(Debug)]
pub struct Replay {
    pub ledger: DagLedger,
    pub chain: Boxchain,
    pub standings: Standings,
    pub outcomes: Vec<CloseOutcome>,
}

impl Replay {
    /// Boxers of every closed box, in box order.
    pub fn boxers(&self) -> Vec<TxId> {
        self.chain.boxes().iter().filter_map(|b| b.boxer).collect()
    }

    pub fn closed_boxes(&self) -> Vec<Vec<TxId>> {
        self.chain
            .boxes()
            .iter()
            .filter(|b| b.boxer.is_some())
            .map(|b| b.members.clone())
            .collect()
    }

    pub fn redundant(&self) -> Result<BTreeSet<(TxId, TxId)>, PosetError> {
        let vertices: Vec<TxId> = self.ledger.transactions().map(|t| t.id).collect();
        redundant_edges(&vertices, &self.ledger.edges())
    }
}

/// Feeds the dump's transactions to a fresh box chain in issue order,
/// closing boxes on their timers, and runs the clock to `end`.
pub fn replay(dump: &str, tau: f64, end: f64, seed: u64) -> Result<Replay, BoxError> {
    let ledger = DagLedger::from_dump(dump, 0)?;
    let streams = Streams::new(seed);
    let config = BoxchainConfig {
        tau,
        capacity: CapacitySpec::fixed(u32::MAX as u64)?,
        rate_guard: 0.0,
    };
    let mut chain = Boxchain::new(config, &ledger, streams.stream("capacity"));
    let issuers: BTreeSet<u64> = ledger.transactions().map(|t| t.issuer).collect();
    let mut standings = Standings::new(issuers, 0);
    let mut genesis_rng = streams.stream("genesis");
    let conduct = Conduct::default();
    let mut outcomes = Vec::new();
    let order: Vec<(TxId, f64)> = ledger
        .transactions()
        .filter(|t| !t.is_genesis())
        .map(|t| (t.id, t.issue_time))
        .collect();
    for (id, time) in order {
        outcomes.extend(chain.advance_to(&ledger, time, &mut standings, &mut genesis_rng, &conduct)?);
        chain.assign_to_box(&ledger, id)?;
        chain.two_plus_two_check(&ledger, id)?;
    }
    outcomes.extend(chain.advance_to(&ledger, end, &mut standings, &mut genesis_rng, &conduct)?);
    Ok(Replay {
        ledger,
        chain,
        standings,
        outcomes,
    })
}

/// Replay of the bundled fixture.
pub fn reference_replay(seed: u64) -> Result<Replay, BoxError> {
    replay(FIXTURE_DUMP, FIXTURE_TAU, FIXTURE_END, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replay_reproduces_boxes_and_boxers() {
        let r = reference_replay(1).unwrap();
        let expected: Vec<Vec<TxId>> = EXPECTED_BOXES.iter().map(|b| b.to_vec()).collect();
        assert_eq!(r.closed_boxes(), expected);
        assert_eq!(r.boxers(), EXPECTED_BOXERS);
        // Boxes 1..5 are final, box 6 awaits the next close.
        assert_eq!(r.chain.confirmed().len(), 1 + 17);
        r.chain.verify_chain().unwrap();
    }

    #[test]
    fn structure_of_the_reference_dag() {
        let r = reference_replay(1).unwrap();
        let tips: Vec<TxId> = r.ledger.tips().iter().copied().collect();
        assert_eq!(tips, EXPECTED_TIPS);
        let p = r.ledger.poset().unwrap();
        assert_eq!(p.height(), EXPECTED_HEIGHT);
        let w = p.width();
        assert!(w.exact);
        assert_eq!(w.size, EXPECTED_WIDTH);
        assert_eq!(p.reverse_rank(1).unwrap(), 4);
        assert_eq!(p.rank(9).unwrap(), 3);
        assert_eq!(r.redundant().unwrap(), BTreeSet::from(EXPECTED_REDUNDANT));
    }

    #[test]
    fn every_check_is_legitimate() {
        let r = reference_replay(1).unwrap();
        assert_eq!(r.chain.validations().len(), 19);
        assert!(r
            .chain
            .validations()
            .iter()
            .all(|v| v.verdict == crate::boxchain::Verdict::Legitimate));
        assert!(r.chain.voided().is_empty());
    }
}
