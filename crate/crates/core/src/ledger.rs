//! The primal layer: a DAG of transactions where every transaction approves
//! up to two earlier ones.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt::Write as _;

use rand::seq::IndexedRandom;
use rand::Rng;
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::poset::{Poset, PosetError};

pub type TxId = u64;
pub type AgentId = u64;
/// 256-bit digest.
pub type Digest = [u8; 32];

pub const GENESIS_ID: TxId = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Transaction {
    pub id: TxId,
    pub issuer: AgentId,
    pub payload_digest: Digest,
    /// Two transactions from the same issuer with the same nonce spend the
    /// same funds.
    pub spend_nonce: Option<u64>,
    pub fee: u64,
    pub parents: Vec<TxId>,
    pub issue_time: f64,
    pub is_empty: bool,
}

impl Transaction {
    pub fn is_genesis(&self) -> bool {
        self.parents.is_empty()
    }

    pub fn conflicts_with(&self, other: &Transaction) -> bool {
        self.id != other.id
            && self.issuer == other.issuer
            && self.spend_nonce.is_some()
            && self.spend_nonce == other.spend_nonce
    }
}

/// Digest of a spend: issuer and nonce, big-endian.
pub fn spend_digest(issuer: AgentId, nonce: u64) -> Digest {
    let mut h = Sha256::new();
    h.update(issuer.to_be_bytes());
    h.update(nonce.to_be_bytes());
    h.finalize().into()
}

/// Everything needed to append a transaction with explicitly chosen parents.
#[derive(Debug, Clone, PartialEq)]
pub struct NewTransaction {
    pub issuer: AgentId,
    pub spend_nonce: Option<u64>,
    pub fee: u64,
    pub parents: Vec<TxId>,
    pub issue_time: f64,
    pub is_empty: bool,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LedgerError {
    #[error("unknown transaction {0}")]
    UnknownTransaction(TxId),
    #[error("no eligible tips to approve")]
    NoEligibleTips,
    #[error("fee {fee} below minimum {min}")]
    FeeTooLow { fee: u64, min: u64 },
    #[error("transaction must approve one or two distinct parents, got {0:?}")]
    BadParents(Vec<TxId>),
    #[error("parent {parent} issued after its child (time {time})")]
    ParentFromFuture { parent: TxId, time: f64 },
    #[error("transactions {0} and {1} do not conflict")]
    NotConflicting(TxId, TxId),
    #[error("transaction {0} has no box")]
    Unassigned(TxId),
    #[error("bad dump line {line}: {reason}")]
    BadDump { line: usize, reason: String },
}

/// Read access to box membership, supplied by the dual layer.
pub trait BoxView {
    /// Index of the box currently accepting members.
    fn open_index(&self) -> usize;
    /// Box holding `tx`, 0 for the genesis.
    fn box_of(&self, tx: TxId) -> Option<usize>;
    /// Members of box `index` in join order.
    fn members_of(&self, index: usize) -> Vec<TxId>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConflictOutcome {
    NoConflict,
    RejectLatter,
    WeightTiebreak,
    BoxerAdjudication,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConflictVerdict {
    pub outcome: ConflictOutcome,
    pub rejected: Option<TxId>,
}

impl ConflictVerdict {
    fn reject(outcome: ConflictOutcome, id: TxId) -> Self {
        Self {
            outcome,
            rejected: Some(id),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DagLedger {
    transactions: BTreeMap<TxId, Transaction>,
    children: BTreeMap<TxId, BTreeSet<TxId>>,
    tips: BTreeSet<TxId>,
    genesis: TxId,
    clock: f64,
    next_id: TxId,
    min_fee: u64,
    last_by_issuer: HashMap<AgentId, TxId>,
    spends: HashMap<(AgentId, u64), Vec<TxId>>,
}

impl DagLedger {
    /// A ledger holding only the genesis transaction, issued at time 0.
    pub fn new(genesis_issuer: AgentId, min_fee: u64) -> Self {
        let genesis = Transaction {
            id: GENESIS_ID,
            issuer: genesis_issuer,
            payload_digest: [0; 32],
            spend_nonce: None,
            fee: 0,
            parents: Vec::new(),
            issue_time: 0.0,
            is_empty: false,
        };
        let mut ledger = Self {
            transactions: BTreeMap::new(),
            children: BTreeMap::new(),
            tips: BTreeSet::new(),
            genesis: GENESIS_ID,
            clock: 0.0,
            next_id: GENESIS_ID + 1,
            min_fee,
            last_by_issuer: HashMap::new(),
            spends: HashMap::new(),
        };
        ledger.children.insert(GENESIS_ID, BTreeSet::new());
        ledger.tips.insert(GENESIS_ID);
        ledger.transactions.insert(GENESIS_ID, genesis);
        ledger
    }

    pub fn genesis_id(&self) -> TxId {
        self.genesis
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn min_fee(&self) -> u64 {
        self.min_fee
    }

    pub fn len(&self) -> usize {
        self.transactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transactions.is_empty()
    }

    /// Id the next appended transaction will receive.
    pub fn next_id(&self) -> TxId {
        self.next_id
    }

    pub fn get(&self, id: TxId) -> Result<&Transaction, LedgerError> {
        self.transactions
            .get(&id)
            .ok_or(LedgerError::UnknownTransaction(id))
    }

    pub fn contains(&self, id: TxId) -> bool {
        self.transactions.contains_key(&id)
    }

    /// Transactions in issue order.
    pub fn transactions(&self) -> impl Iterator<Item = &Transaction> {
        self.transactions.values()
    }

    pub fn tips(&self) -> &BTreeSet<TxId> {
        &self.tips
    }

    pub fn is_tip(&self, id: TxId) -> bool {
        self.tips.contains(&id)
    }

    pub fn children(&self, id: TxId) -> Result<&BTreeSet<TxId>, LedgerError> {
        self.children
            .get(&id)
            .ok_or(LedgerError::UnknownTransaction(id))
    }

    pub fn last_by_issuer(&self, issuer: AgentId) -> Option<TxId> {
        self.last_by_issuer.get(&issuer).copied()
    }

    /// Appends a transaction with explicitly chosen parents.
    pub fn insert(&mut self, tx: NewTransaction) -> Result<&Transaction, LedgerError> {
        let mut distinct = tx.parents.clone();
        distinct.sort_unstable();
        distinct.dedup();
        if tx.parents.is_empty() || tx.parents.len() > 2 || distinct.len() != tx.parents.len() {
            return Err(LedgerError::BadParents(tx.parents));
        }
        if !tx.is_empty && tx.fee < self.min_fee {
            return Err(LedgerError::FeeTooLow {
                fee: tx.fee,
                min: self.min_fee,
            });
        }
        for &p in &tx.parents {
            let parent = self.get(p)?;
            if parent.issue_time > tx.issue_time {
                return Err(LedgerError::ParentFromFuture {
                    parent: p,
                    time: tx.issue_time,
                });
            }
        }

        let id = self.next_id;
        self.next_id += 1;
        let payload_digest = match tx.spend_nonce {
            Some(nonce) if !tx.is_empty => spend_digest(tx.issuer, nonce),
            _ => [0; 32],
        };
        for &p in &tx.parents {
            self.children.entry(p).or_default().insert(id);
            self.tips.remove(&p);
        }
        self.children.insert(id, BTreeSet::new());
        self.tips.insert(id);
        self.clock = self.clock.max(tx.issue_time);
        self.last_by_issuer.insert(tx.issuer, id);
        if let (Some(nonce), false) = (tx.spend_nonce, tx.is_empty) {
            self.spends.entry((tx.issuer, nonce)).or_default().push(id);
        }
        let record = Transaction {
            id,
            issuer: tx.issuer,
            payload_digest,
            spend_nonce: if tx.is_empty { None } else { tx.spend_nonce },
            fee: if tx.is_empty { 0 } else { tx.fee },
            parents: tx.parents,
            issue_time: tx.issue_time,
            is_empty: tx.is_empty,
        };
        Ok(self.transactions.entry(id).or_insert(record))
    }

    /// Selects parents for a transaction joining the open box `B_i`.
    ///
    /// Candidates are unapproved members of `B_{i-1}` and `B_{i-2}`; at
    /// least one chosen parent lies in `B_{i-1}`. When `B_{i-1}` has no
    /// tips left its approved members stand in. The issuer's own previous
    /// transaction, when it is a candidate, is always one of the parents.
    /// Transactions with a visible conflicting twin are never chosen. With a
    /// single candidate (the first box after genesis) one parent is
    /// returned.
    pub fn select_tips<V: BoxView, R: Rng + ?Sized>(
        &self,
        view: &V,
        issuer: AgentId,
        rng: &mut R,
    ) -> Result<Vec<TxId>, LedgerError> {
        let open = view.open_index();
        if open == 0 {
            return Err(LedgerError::NoEligibleTips);
        }
        let recent_box = open - 1;
        let older_box = open.checked_sub(2);
        let clean = |id: &TxId| !self.has_visible_conflict(*id);

        let recent_members: Vec<TxId> = view.members_of(recent_box).into_iter().filter(clean).collect();
        let mut recent: Vec<TxId> = recent_members.iter().copied().filter(|id| self.is_tip(*id)).collect();
        if recent.is_empty() {
            recent = recent_members;
        }
        if recent.is_empty() {
            return Err(LedgerError::NoEligibleTips);
        }
        let older: Vec<TxId> = older_box
            .map(|b| {
                view.members_of(b)
                    .into_iter()
                    .filter(|id| self.is_tip(*id) && clean(id))
                    .collect()
            })
            .unwrap_or_default();

        let in_recent = |id: TxId| view.box_of(id) == Some(recent_box);

        if let Some(own) = self.last_by_issuer(issuer) {
            let own_box = view.box_of(own);
            if own_box == Some(recent_box) || (own_box.is_some() && own_box == older_box) {
                let own_recent = own_box == Some(recent_box);
                let partners: Vec<TxId> = recent
                    .iter()
                    .chain(if own_recent { older.iter() } else { [].iter() })
                    .copied()
                    .filter(|&id| id != own)
                    .collect();
                return match partners.choose(rng) {
                    Some(&other) => Ok(vec![own, other]),
                    None if own_recent => Ok(vec![own]),
                    None => Err(LedgerError::NoEligibleTips),
                };
            }
        }

        let pool: Vec<TxId> = recent.iter().chain(older.iter()).copied().collect();
        if pool.len() == 1 {
            return Ok(pool);
        }
        loop {
            let a = pool[rng.random_range(0..pool.len())];
            let b = pool[rng.random_range(0..pool.len())];
            if a != b && (in_recent(a) || in_recent(b)) {
                return Ok(vec![a, b]);
            }
        }
    }

    /// Selects parents and appends a new transaction at time `now`.
    #[allow(clippy::too_many_arguments)]
    pub fn issue_transaction<V: BoxView, R: Rng + ?Sized>(
        &mut self,
        view: &V,
        issuer: AgentId,
        spend_nonce: Option<u64>,
        fee: u64,
        now: f64,
        rng: &mut R,
    ) -> Result<&Transaction, LedgerError> {
        if fee < self.min_fee {
            return Err(LedgerError::FeeTooLow {
                fee,
                min: self.min_fee,
            });
        }
        let parents = self.select_tips(view, issuer, rng)?;
        self.insert(NewTransaction {
            issuer,
            spend_nonce,
            fee,
            parents,
            issue_time: now,
            is_empty: false,
        })
    }

    /// Every transaction that transitively approves `v`, excluding `v`.
    pub fn descendants(&self, v: TxId) -> Result<BTreeSet<TxId>, LedgerError> {
        self.get(v)?;
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::from([v]);
        while let Some(x) = queue.pop_front() {
            for &c in &self.children[&x] {
                if seen.insert(c) {
                    queue.push_back(c);
                }
            }
        }
        Ok(seen)
    }

    /// One plus the number of distinct descendants.
    pub fn cumulative_weight(&self, v: TxId) -> Result<u64, LedgerError> {
        Ok(1 + self.descendants(v)?.len() as u64)
    }

    /// `v` and everything it transitively approves.
    pub fn ancestor_closure(&self, v: TxId) -> Result<BTreeSet<TxId>, LedgerError> {
        self.get(v)?;
        let mut seen = BTreeSet::from([v]);
        let mut queue = VecDeque::from([v]);
        while let Some(x) = queue.pop_front() {
            for &p in &self.transactions[&x].parents {
                if seen.insert(p) {
                    queue.push_back(p);
                }
            }
        }
        Ok(seen)
    }

    /// Other transactions spending the same funds as `id`.
    pub fn conflicts_of(&self, id: TxId) -> Result<Vec<TxId>, LedgerError> {
        let tx = self.get(id)?;
        let Some(nonce) = tx.spend_nonce else {
            return Ok(Vec::new());
        };
        Ok(self.spends[&(tx.issuer, nonce)]
            .iter()
            .copied()
            .filter(|&other| other != id)
            .collect())
    }

    fn has_visible_conflict(&self, id: TxId) -> bool {
        self.conflicts_of(id).map(|c| !c.is_empty()).unwrap_or(false)
    }

    /// Decides which of two conflicting transactions is rejected: the one in
    /// the later box, else the lighter one, else the larger id.
    pub fn detect_conflict<V: BoxView>(
        &self,
        view: &V,
        a: TxId,
        b: TxId,
    ) -> Result<ConflictVerdict, LedgerError> {
        let (ta, tb) = (self.get(a)?, self.get(b)?);
        if !ta.conflicts_with(tb) {
            return Err(LedgerError::NotConflicting(a, b));
        }
        let box_a = view.box_of(a).ok_or(LedgerError::Unassigned(a))?;
        let box_b = view.box_of(b).ok_or(LedgerError::Unassigned(b))?;
        if box_a != box_b {
            let latter = if box_a > box_b { a } else { b };
            return Ok(ConflictVerdict::reject(ConflictOutcome::RejectLatter, latter));
        }
        let (wa, wb) = (self.cumulative_weight(a)?, self.cumulative_weight(b)?);
        if wa != wb {
            let lighter = if wa < wb { a } else { b };
            return Ok(ConflictVerdict::reject(ConflictOutcome::WeightTiebreak, lighter));
        }
        Ok(ConflictVerdict::reject(
            ConflictOutcome::BoxerAdjudication,
            a.max(b),
        ))
    }

    /// Length of the longest approval chain, genesis included. Ids are
    /// issued in topological order so one forward pass suffices.
    pub fn height(&self) -> usize {
        let mut level: HashMap<TxId, usize> = HashMap::with_capacity(self.transactions.len());
        let mut best = 0;
        for tx in self.transactions.values() {
            let h = 1 + tx.parents.iter().map(|p| level[p]).max().unwrap_or(0);
            level.insert(tx.id, h);
            best = best.max(h);
        }
        best
    }

    /// The approval graph as a poset (parents below children).
    pub fn poset(&self) -> Result<Poset, PosetError> {
        Poset::new(
            self.transactions.keys().copied(),
            self.transactions
                .values()
                .flat_map(|tx| tx.parents.iter().map(move |&p| (tx.id, p))),
        )
    }

    /// All `(child, parent)` approval pairs in issue order.
    pub fn edges(&self) -> Vec<(TxId, TxId)> {
        self.transactions
            .values()
            .flat_map(|tx| tx.parents.iter().map(move |&p| (tx.id, p)))
            .collect()
    }

    /// Line-oriented dump, one `tx` record per transaction in issue order.
    pub fn to_dump(&self) -> String {
        let mut out = String::new();
        for tx in self.transactions.values() {
            let parent = |i: usize| {
                tx.parents
                    .get(i)
                    .map_or_else(|| "-".to_string(), |p| p.to_string())
            };
            let _ = writeln!(
                out,
                "tx {} {} {} {} {} {:.6} {}",
                tx.id,
                tx.issuer,
                parent(0),
                parent(1),
                tx.fee,
                tx.issue_time,
                u8::from(tx.is_empty)
            );
        }
        out
    }

    /// Rebuilds a ledger from [`DagLedger::to_dump`] output. Spend nonces are
    /// not part of the dump and come back as `None`.
    pub fn from_dump(text: &str, min_fee: u64) -> Result<Self, LedgerError> {
        let mut ledger: Option<DagLedger> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: &str| LedgerError::BadDump {
                line: lineno + 1,
                reason: reason.to_string(),
            };
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 8 || f[0] != "tx" {
                return Err(bad("expected `tx <id> <issuer> <p1> <p2> <fee> <time> <empty>`"));
            }
            let num = |s: &str| s.parse::<u64>().map_err(|_| bad("bad integer"));
            let opt = |s: &str| -> Result<Option<u64>, LedgerError> {
                if s == "-" {
                    Ok(None)
                } else {
                    num(s).map(Some)
                }
            };
            let id = num(f[1])?;
            let issuer = num(f[2])?;
            let parents: Vec<TxId> = [opt(f[3])?, opt(f[4])?].into_iter().flatten().collect();
            let fee = num(f[5])?;
            let time: f64 = f[6].parse().map_err(|_| bad("bad time"))?;
            let is_empty = match f[7] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("empty flag must be 0 or 1")),
            };
            match ledger.as_mut() {
                None => {
                    if !parents.is_empty() || id != GENESIS_ID {
                        return Err(bad("first record must be the genesis"));
                    }
                    ledger = Some(DagLedger::new(issuer, min_fee));
                }
                Some(l) => {
                    if id != l.next_id() {
                        return Err(bad("ids must be consecutive in issue order"));
                    }
                    l.insert(NewTransaction {
                        issuer,
                        spend_nonce: None,
                        fee,
                        parents,
                        issue_time: time,
                        is_empty,
                    })
                    .map_err(|e| bad(&e.to_string()))?;
                }
            }
        }
        ledger.ok_or(LedgerError::BadDump {
            line: 0,
            reason: "empty dump".into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Streams;

    /// Box membership supplied by hand.
    struct FixedBoxes {
        open: usize,
        boxes: Vec<Vec<TxId>>,
    }

    impl BoxView for FixedBoxes {
        fn open_index(&self) -> usize {
            self.open
        }
        fn box_of(&self, tx: TxId) -> Option<usize> {
            self.boxes.iter().position(|b| b.contains(&tx))
        }
        fn members_of(&self, index: usize) -> Vec<TxId> {
            self.boxes.get(index).cloned().unwrap_or_default()
        }
    }

    fn add(l: &mut DagLedger, issuer: AgentId, parents: &[TxId], t: f64) -> TxId {
        l.insert(NewTransaction {
            issuer,
            spend_nonce: None,
            fee: 1,
            parents: parents.to_vec(),
            issue_time: t,
            is_empty: false,
        })
        .unwrap()
        .id
    }

    /// i1..i7 with i7 -> (i6, i5), i6 -> (i4, i3), i5 -> (i2, i1); i1..i4
    /// hang off the genesis.
    fn seven_node() -> (DagLedger, [TxId; 7]) {
        let mut l = DagLedger::new(0, 0);
        let g = l.genesis_id();
        let i1 = add(&mut l, 1, &[g], 1.0);
        let i2 = add(&mut l, 2, &[g], 2.0);
        let i3 = add(&mut l, 3, &[g], 3.0);
        let i4 = add(&mut l, 4, &[g], 4.0);
        let i5 = add(&mut l, 5, &[i2, i1], 5.0);
        let i6 = add(&mut l, 6, &[i4, i3], 6.0);
        let i7 = add(&mut l, 7, &[i6, i5], 7.0);
        (l, [i1, i2, i3, i4, i5, i6, i7])
    }

    #[test]
    fn ancestor_closure_subset_relations() {
        let (l, [i1, i2, i3, i4, i5, i6, i7]) = seven_node();
        let g = l.genesis_id();
        assert_eq!(l.ancestor_closure(g).unwrap(), BTreeSet::from([g]));
        assert_eq!(
            l.ancestor_closure(i7).unwrap(),
            BTreeSet::from([g, i1, i2, i3, i4, i5, i6, i7])
        );
        assert_eq!(l.ancestor_closure(i5).unwrap(), BTreeSet::from([g, i5, i2, i1]));
        let a5 = l.ancestor_closure(i5).unwrap();
        let a6 = l.ancestor_closure(i6).unwrap();
        assert!(!a5.is_subset(&a6) && !a6.is_subset(&a5));
    }

    #[test]
    fn cumulative_weights() {
        let (l, [.., i5, i6, i7]) = seven_node();
        assert_eq!(l.cumulative_weight(i7).unwrap(), 1);
        assert_eq!(l.cumulative_weight(i5).unwrap(), 2);
        assert_eq!(l.cumulative_weight(i6).unwrap(), 2);
        assert_eq!(l.cumulative_weight(l.genesis_id()).unwrap(), 8);
        assert_eq!(l.cumulative_weight(99), Err(LedgerError::UnknownTransaction(99)));
    }

    #[test]
    fn two_children_no_grandchildren() {
        let mut l = DagLedger::new(0, 0);
        let g = l.genesis_id();
        let a = add(&mut l, 1, &[g], 1.0);
        add(&mut l, 2, &[a], 2.0);
        add(&mut l, 3, &[a], 3.0);
        assert_eq!(l.cumulative_weight(a).unwrap(), 3);
    }

    #[test]
    fn tips_track_unapproved() {
        let (l, [.., i7]) = seven_node();
        assert_eq!(l.tips(), &BTreeSet::from([i7]));
    }

    #[test]
    fn insert_rejects_bad_parents_and_fees() {
        let mut l = DagLedger::new(0, 2);
        let g = l.genesis_id();
        let base = NewTransaction {
            issuer: 1,
            spend_nonce: None,
            fee: 2,
            parents: vec![g, g],
            issue_time: 1.0,
            is_empty: false,
        };
        assert!(matches!(l.insert(base.clone()), Err(LedgerError::BadParents(_))));
        let none = NewTransaction { parents: vec![], ..base.clone() };
        assert!(matches!(l.insert(none), Err(LedgerError::BadParents(_))));
        let cheap = NewTransaction { parents: vec![g], fee: 1, ..base.clone() };
        assert_eq!(l.insert(cheap), Err(LedgerError::FeeTooLow { fee: 1, min: 2 }));
        let ghost = NewTransaction { parents: vec![42], ..base.clone() };
        assert_eq!(l.insert(ghost), Err(LedgerError::UnknownTransaction(42)));
        // Empty transactions are exempt from the fee floor.
        let empty = NewTransaction { parents: vec![g], fee: 0, is_empty: true, ..base };
        assert_eq!(l.insert(empty).unwrap().fee, 0);
    }

    #[test]
    fn select_tips_bootstrap_single_parent() {
        let l = DagLedger::new(0, 0);
        let view = FixedBoxes { open: 1, boxes: vec![vec![GENESIS_ID]] };
        let mut rng = Streams::new(1).stream("tips");
        assert_eq!(l.select_tips(&view, 5, &mut rng).unwrap(), vec![GENESIS_ID]);
    }

    #[test]
    fn select_tips_needs_a_recent_parent() {
        // B0 = {g}, B1 = {2, 3}, B2 = {4, 5} with 4 -> 2 and 5 -> 3 so B1 has no tips.
        // Open box is B3: candidates are tips 4, 5 in B2 and nothing in B1.
        let mut l = DagLedger::new(0, 0);
        let g = l.genesis_id();
        let a = add(&mut l, 1, &[g], 1.0);
        let b = add(&mut l, 2, &[g], 2.0);
        let c = add(&mut l, 3, &[a], 3.0);
        let d = add(&mut l, 4, &[b], 4.0);
        let view = FixedBoxes { open: 3, boxes: vec![vec![g], vec![a, b], vec![c, d]] };
        let mut rng = Streams::new(3).stream("tips");
        for _ in 0..50 {
            let pair = l.select_tips(&view, 99, &mut rng).unwrap();
            assert_eq!(pair.len(), 2);
            assert!(pair.iter().all(|p| [c, d].contains(p)));
        }
        // Add an unapproved B1 member: pairs drawn entirely from B1 must never appear.
        let e = add(&mut l, 5, &[g], 5.0);
        let view = FixedBoxes { open: 3, boxes: vec![vec![g], vec![a, b, e], vec![c, d]] };
        let two_blocks_back = l.tips().iter().filter(|t| **t == e).count();
        assert_eq!(two_blocks_back, 1);
        for _ in 0..200 {
            let pair = l.select_tips(&view, 99, &mut rng).unwrap();
            assert!(pair.iter().any(|p| [c, d].contains(p)), "{pair:?}");
        }
    }

    #[test]
    fn select_tips_deterministic_under_seed() {
        let mut l = DagLedger::new(0, 0);
        let g = l.genesis_id();
        let ids: Vec<TxId> = (0..3).map(|i| add(&mut l, i + 1, &[g], 1.0 + i as f64)).collect();
        let view = FixedBoxes { open: 2, boxes: vec![vec![g], ids.clone()] };
        let draw = || {
            let mut rng = Streams::new(11).stream("tips");
            (0..10).map(|_| l.select_tips(&view, 50, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn issuer_chains_its_own_transactions() {
        let mut l = DagLedger::new(0, 0);
        let g = l.genesis_id();
        let mine = add(&mut l, 7, &[g], 1.0);
        let other = add(&mut l, 8, &[g], 2.0);
        let third = add(&mut l, 9, &[g], 3.0);
        let view = FixedBoxes { open: 2, boxes: vec![vec![g], vec![mine, other, third]] };
        let mut rng = Streams::new(5).stream("tips");
        for _ in 0..20 {
            let parents = l.select_tips(&view, 7, &mut rng).unwrap();
            assert_eq!(parents[0], mine);
            assert_ne!(parents[1], mine);
        }
    }

    #[test]
    fn select_tips_avoids_visible_double_spends() {
        let mut l = DagLedger::new(0, 0);
        let g = l.genesis_id();
        let spend = |nonce| NewTransaction {
            issuer: 3,
            spend_nonce: Some(nonce),
            fee: 0,
            parents: vec![g],
            issue_time: 1.0,
            is_empty: false,
        };
        let a = l.insert(spend(1)).unwrap().id;
        let b = l.insert(spend(1)).unwrap().id;
        let c = add(&mut l, 4, &[g], 2.0);
        let view = FixedBoxes { open: 2, boxes: vec![vec![g], vec![a, b, c]] };
        let mut rng = Streams::new(2).stream("tips");
        assert_eq!(l.select_tips(&view, 10, &mut rng).unwrap(), vec![c]);
    }

    #[test]
    fn conflict_resolution_rules() {
        let mut l = DagLedger::new(0, 0);
        let g = l.genesis_id();
        let spend = |parents: Vec<TxId>, t: f64| NewTransaction {
            issuer: 3,
            spend_nonce: Some(9),
            fee: 0,
            parents,
            issue_time: t,
            is_empty: false,
        };
        let a = l.insert(spend(vec![g], 1.0)).unwrap().id;
        let b = l.insert(spend(vec![g], 2.0)).unwrap().id;
        let plain = add(&mut l, 4, &[g], 3.0);

        let same_box = FixedBoxes { open: 2, boxes: vec![vec![g], vec![a, b, plain]] };
        let tie = l.detect_conflict(&same_box, a, b).unwrap();
        assert_eq!(tie.outcome, ConflictOutcome::BoxerAdjudication);
        assert_eq!(tie.rejected, Some(a.max(b)));
        assert_eq!(l.detect_conflict(&same_box, b, a).unwrap().rejected, Some(a.max(b)));

        // Give `b` more weight: the lighter `a` loses.
        for i in 0..4 {
            add(&mut l, 20 + i, &[b], 4.0 + i as f64);
        }
        let weighted = l.detect_conflict(&same_box, a, b).unwrap();
        assert_eq!(weighted.outcome, ConflictOutcome::WeightTiebreak);
        assert_eq!(weighted.rejected, Some(a));

        let split = FixedBoxes { open: 5, boxes: vec![vec![g], vec![], vec![a], vec![], vec![b]] };
        let latter = l.detect_conflict(&split, a, b).unwrap();
        assert_eq!(latter.outcome, ConflictOutcome::RejectLatter);
        assert_eq!(latter.rejected, Some(b));

        assert_eq!(
            l.detect_conflict(&same_box, a, plain),
            Err(LedgerError::NotConflicting(a, plain))
        );
    }

    #[test]
    fn dump_round_trip() {
        let (l, _) = seven_node();
        let text = l.to_dump();
        assert!(text.starts_with("tx 1 0 - - 0 0.000000 0\n"), "{text}");
        let back = DagLedger::from_dump(&text, 0).unwrap();
        assert_eq!(back.to_dump(), text);
        assert!(matches!(
            DagLedger::from_dump("tx 1 0 - -\n", 0),
            Err(LedgerError::BadDump { line: 1, .. })
        ));
    }
}
