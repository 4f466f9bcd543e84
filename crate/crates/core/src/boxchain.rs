//! The dual layer: a chain of antichain boxes built in real time over the
//! transaction DAG.
//!
//! A box is open while it accepts members. It closes when it holds `M`
//! members or when `τ` has elapsed since it opened, whichever comes first;
//! if `M` is reached implausibly fast the size criterion is ignored and the
//! box runs to `τ`. The last member becomes the boxer. A box-genesis is then
//! drawn among agents in good standing, and it finalizes the previous box:
//! legitimate members become final, illegal ones are voided and their
//! issuers (plus anyone in the closing box who approved them) disabled. The
//! boxer audits the genesis's report before it is committed.
//!
//! Box `0` holds only the genesis transaction and is confirmed from the
//! start. The next box opens the moment its predecessor closes.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::{self, Write as _};

use rand::seq::IndexedRandom;
use rand::Rng;
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::ledger::{AgentId, BoxView, DagLedger, Digest, LedgerError, NewTransaction, TxId};
use crate::rng::StreamRng;
use crate::stochastics::{DiscreteLaw, StochError};

/// Default share of `τ` within which reaching `M` counts as too fast.
pub const DEFAULT_RATE_GUARD: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BoxError {
    #[error("capacity law must live on integers >= 1")]
    BadCapacity,
    #[error(transparent)]
    Distribution(#[from] StochError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("transaction {tx} breaks the box rule: parents in boxes {parent_boxes:?}, open box {open}")]
    RankViolation {
        tx: TxId,
        parent_boxes: Vec<Option<usize>>,
        open: usize,
    },
    #[error("transaction {0} is already in a box")]
    AlreadyAssigned(TxId),
    #[error("no agent in good standing besides the boxer's issuer")]
    NoEligibleGenesis,
    #[error("box {0} has no box-genesis")]
    GenesisAbsent(usize),
    #[error("box {0} is not ready for that step")]
    NotReady(usize),
    #[error("box {0} is already confirmed")]
    AlreadyConfirmed(usize),
    #[error("hash chain broken at box {0}")]
    HashMismatch(usize),
    #[error("boxer of box {box_index} rejects the genesis's confirmation of box {confirmed}")]
    IntegrityAlarm { box_index: usize, confirmed: usize },
    #[error("transaction {0} is not a tip")]
    NotATip(TxId),
    #[error("transaction {0} is not stuck")]
    NotStuck(TxId),
    #[error("unknown box {0}")]
    UnknownBox(usize),
    #[error("bad box dump line {line}: {reason}")]
    BadDump { line: usize, reason: String },
}

/// Distribution of the box capacity `M`, supported on `[l, u]` with `l >= 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct CapacitySpec(DiscreteLaw);

impl CapacitySpec {
    pub fn new(law: DiscreteLaw) -> Result<Self, BoxError> {
        if law.min_value() == 0 {
            return Err(BoxError::BadCapacity);
        }
        Ok(Self(law))
    }

    pub fn fixed(m: u64) -> Result<Self, BoxError> {
        Self::new(DiscreteLaw::degenerate(m))
    }

    pub fn uniform(lo: u64, hi: u64) -> Result<Self, BoxError> {
        Self::new(DiscreteLaw::uniform(lo, hi)?)
    }

    /// Parses `fixed:M`, `uniform:L:U`, or `pmf:v:p,v:p,…`.
    pub fn parse(text: &str) -> Result<Self, BoxError> {
        let bad = || BoxError::Distribution(StochError::BadDistribution(format!("bad capacity {text:?}")));
        let (kind, rest) = text.split_once(':').ok_or_else(bad)?;
        match kind {
            "fixed" => Self::fixed(rest.parse().map_err(|_| bad())?),
            "uniform" => {
                let (lo, hi) = rest.split_once(':').ok_or_else(bad)?;
                Self::uniform(lo.parse().map_err(|_| bad())?, hi.parse().map_err(|_| bad())?)
            }
            "pmf" => Self::new(DiscreteLaw::parse(rest)?),
            _ => Err(bad()),
        }
    }

    pub fn law(&self) -> &DiscreteLaw {
        &self.0
    }

    pub fn max(&self) -> u64 {
        self.0.max_value()
    }
}

impl fmt::Display for CapacitySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pts = self.0.points();
        if pts.len() == 1 {
            return write!(f, "fixed:{}", pts[0].0);
        }
        let parts: Vec<String> = pts.iter().map(|(v, p)| format!("{v}:{p}")).collect();
        write!(f, "pmf:{}", parts.join(","))
    }
}

/// Draws `M` by inverting the capacity cdf at a uniform variate.
pub fn sample_box_capacity<R: Rng + ?Sized>(rng: &mut R, spec: &CapacitySpec) -> u64 {
    spec.law().sample(rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxchainConfig {
    /// Box time limit `τ`, seconds.
    pub tau: f64,
    pub capacity: CapacitySpec,
    /// Reaching `M` within `rate_guard · τ` of opening does not close the box.
    pub rate_guard: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum BoxStatus {
    Open,
    Closing,
    Confirmed,
}

impl BoxStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            BoxStatus::Open => "open",
            BoxStatus::Closing => "closing",
            BoxStatus::Confirmed => "confirmed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AntichainBox {
    pub index: usize,
    /// Join order, which is also the box's internal chain.
    pub members: Vec<TxId>,
    pub join_times: Vec<f64>,
    pub capacity: u64,
    pub boxer: Option<TxId>,
    pub box_genesis: Option<AgentId>,
    pub status: BoxStatus,
    pub opened_at: f64,
    pub closed_at: Option<f64>,
    pub header_hash: Option<Digest>,
    pub prev_header_hash: Digest,
    pub member_digest: Digest,
}

impl AntichainBox {
    fn new(index: usize, capacity: u64, opened_at: f64, prev_header_hash: Digest) -> Self {
        Self {
            index,
            members: Vec::new(),
            join_times: Vec::new(),
            capacity,
            boxer: None,
            box_genesis: None,
            status: BoxStatus::Open,
            opened_at,
            closed_at: None,
            header_hash: None,
            prev_header_hash,
            member_digest: member_digest(&[]),
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Recomputes the header hash from the box's own fields.
    pub fn compute_header_hash(&self) -> Option<Digest> {
        Some(header_hash(
            self.index as u64,
            &self.prev_header_hash,
            &self.members,
            self.boxer?,
            self.box_genesis?,
            self.closed_at?,
        ))
    }
}

/// SHA-256 over `index ‖ prev ‖ members ascending ‖ boxer ‖ genesis ‖
/// closed_at (µs)`, all big-endian fixed width.
pub fn header_hash(
    index: u64,
    prev: &Digest,
    members: &[TxId],
    boxer: TxId,
    genesis: AgentId,
    closed_at: f64,
) -> Digest {
    let mut sorted = members.to_vec();
    sorted.sort_unstable();
    let mut h = Sha256::new();
    h.update(index.to_be_bytes());
    h.update(prev);
    for m in sorted {
        h.update(m.to_be_bytes());
    }
    h.update(boxer.to_be_bytes());
    h.update(genesis.to_be_bytes());
    h.update(micros(closed_at).to_be_bytes());
    h.finalize().into()
}

/// Seconds as fixed-point microseconds.
pub fn micros(seconds: f64) -> u64 {
    (seconds * 1e6).round() as u64
}

fn member_digest(members: &[TxId]) -> Digest {
    let mut h = Sha256::new();
    for m in members {
        h.update(m.to_be_bytes());
    }
    h.finalize().into()
}

pub fn hex(d: &Digest) -> String {
    d.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Legitimate,
    Illegal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValidationReason {
    Clean,
    /// One approval is already implied by the other. Valid but undesirable.
    RedundantApproval,
    Conflict,
    RankViolation,
}

/// Outcome of a member re-checking its dual-layer predecessor's approvals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValidationResult {
    pub checked_tx: TxId,
    pub neighbor_tx: TxId,
    pub verdict: Verdict,
    pub reason: ValidationReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Standing {
    pub score: i64,
    pub disabled: bool,
}

/// Track records used to pick box-geneses.
#[derive(Debug, Clone, PartialEq)]
pub struct Standings {
    agents: BTreeMap<AgentId, Standing>,
    pub threshold: i64,
}

impl Standings {
    pub fn new(agents: impl IntoIterator<Item = AgentId>, threshold: i64) -> Self {
        Self {
            agents: agents
                .into_iter()
                .map(|a| (a, Standing { score: 0, disabled: false }))
                .collect(),
            threshold,
        }
    }

    pub fn get(&self, agent: AgentId) -> Option<Standing> {
        self.agents.get(&agent).copied()
    }

    pub fn is_good(&self, agent: AgentId) -> bool {
        self.agents
            .get(&agent)
            .is_some_and(|s| !s.disabled && s.score >= self.threshold)
    }

    pub fn is_disabled(&self, agent: AgentId) -> bool {
        self.agents.get(&agent).is_some_and(|s| s.disabled)
    }

    pub fn credit(&mut self, agent: AgentId) {
        if let Some(s) = self.agents.get_mut(&agent) {
            if !s.disabled {
                s.score += 1;
            }
        }
    }

    /// Permanently bars the agent from roles and new transactions.
    pub fn disable(&mut self, agent: AgentId) {
        let s = self.agents.entry(agent).or_insert(Standing { score: 0, disabled: false });
        s.disabled = true;
        s.score = i64::MIN;
    }

    pub fn agents(&self) -> impl Iterator<Item = (AgentId, Standing)> + '_ {
        self.agents.iter().map(|(&a, &s)| (a, s))
    }

    pub fn disabled_agents(&self) -> Vec<AgentId> {
        self.agents
            .iter()
            .filter(|(_, s)| s.disabled)
            .map(|(&a, _)| a)
            .collect()
    }
}

/// Agents that misbehave when handed a dual-layer role: as genesis they
/// confirm everything unchecked, as boxer they sign off without auditing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Conduct {
    pub forgers: BTreeSet<AgentId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenesisEntry {
    pub box_index: usize,
    pub agent: AgentId,
    /// Event sequence number at which the agent was drawn.
    pub selected_seq: u64,
    /// Header hashes this genesis acknowledged from later geneses.
    pub sync_log: Vec<Digest>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ChainEvent {
    BoxerFixed { box_index: usize, boxer: TxId, seq: u64 },
    GenesisSelected { box_index: usize, agent: AgentId, seq: u64 },
    Confirmed { box_index: usize, seq: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoidReason {
    Conflict,
    FlaggedByNeighbor,
    ApprovesIllegal,
    IssuerDisabled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfirmationReport {
    /// Box that became final.
    pub confirmed_box: usize,
    /// Box whose genesis performed the confirmation.
    pub by_box: usize,
    pub genesis: Option<AgentId>,
    pub confirmed: Vec<TxId>,
    pub voided: Vec<(TxId, VoidReason)>,
    pub disabled_agents: Vec<AgentId>,
    pub header_hash: Digest,
    pub confirmed_at: f64,
}

/// Everything that happened when one box closed.
#[derive(Debug, Clone, PartialEq)]
pub struct CloseOutcome {
    pub index: usize,
    pub boxer: TxId,
    pub genesis: AgentId,
    pub closed_at: f64,
    pub report: ConfirmationReport,
    /// Unapproved transactions that just fell out of reach.
    pub stuck: Vec<TxId>,
}

#[derive(Debug, Clone)]
pub struct Boxchain {
    config: BoxchainConfig,
    genesis_tx: TxId,
    genesis_hash: Digest,
    // boxes[k] is box k + 1
    boxes: Vec<AntichainBox>,
    box_of: HashMap<TxId, usize>,
    genesis_chain: Vec<GenesisEntry>,
    validations: Vec<ValidationResult>,
    flagged: BTreeSet<TxId>,
    voided: BTreeMap<TxId, VoidReason>,
    confirmed: BTreeMap<TxId, f64>,
    events: Vec<ChainEvent>,
    seq: u64,
    capacity_rng: StreamRng,
}

/// Confirmed members and voided members of an audited box.
type Audit = (Vec<TxId>, Vec<(TxId, VoidReason)>);

impl Boxchain {
    /// A chain whose box 1 opens at time 0 on top of `ledger`'s genesis.
    pub fn new(config: BoxchainConfig, ledger: &DagLedger, mut capacity_rng: StreamRng) -> Self {
        let genesis_tx = ledger.genesis_id();
        let genesis_agent = ledger.get(genesis_tx).map(|t| t.issuer).unwrap_or(0);
        let genesis_hash = header_hash(0, &[0; 32], &[genesis_tx], genesis_tx, genesis_agent, 0.0);
        let capacity = sample_box_capacity(&mut capacity_rng, &config.capacity);
        let mut confirmed = BTreeMap::new();
        confirmed.insert(genesis_tx, 0.0);
        Self {
            config,
            genesis_tx,
            genesis_hash,
            boxes: vec![AntichainBox::new(1, capacity, 0.0, genesis_hash)],
            box_of: HashMap::from([(genesis_tx, 0)]),
            genesis_chain: Vec::new(),
            validations: Vec::new(),
            flagged: BTreeSet::new(),
            voided: BTreeMap::new(),
            confirmed,
            events: Vec::new(),
            seq: 0,
            capacity_rng,
        }
    }

    pub fn config(&self) -> &BoxchainConfig {
        &self.config
    }

    pub fn genesis_hash(&self) -> Digest {
        self.genesis_hash
    }

    /// Boxes 1, 2, … in order; the last one is open.
    pub fn boxes(&self) -> &[AntichainBox] {
        &self.boxes
    }

    pub fn get_box(&self, index: usize) -> Result<&AntichainBox, BoxError> {
        index
            .checked_sub(1)
            .and_then(|k| self.boxes.get(k))
            .ok_or(BoxError::UnknownBox(index))
    }

    fn box_mut(&mut self, index: usize) -> Result<&mut AntichainBox, BoxError> {
        index
            .checked_sub(1)
            .and_then(|k| self.boxes.get_mut(k))
            .ok_or(BoxError::UnknownBox(index))
    }

    fn open_box(&self) -> &AntichainBox {
        self.boxes.last().expect("an open box always exists")
    }

    pub fn closed_count(&self) -> usize {
        self.boxes.len() - 1
    }

    pub fn genesis_chain(&self) -> &[GenesisEntry] {
        &self.genesis_chain
    }

    pub fn validations(&self) -> &[ValidationResult] {
        &self.validations
    }

    pub fn events(&self) -> &[ChainEvent] {
        &self.events
    }

    pub fn is_confirmed(&self, tx: TxId) -> bool {
        self.confirmed.contains_key(&tx)
    }

    pub fn confirmed_at(&self, tx: TxId) -> Option<f64> {
        self.confirmed.get(&tx).copied()
    }

    pub fn confirmed(&self) -> &BTreeMap<TxId, f64> {
        &self.confirmed
    }

    pub fn voided(&self) -> &BTreeMap<TxId, VoidReason> {
        &self.voided
    }

    pub fn is_flagged(&self, tx: TxId) -> bool {
        self.flagged.contains(&tx)
    }

    /// Header hash of the most recent sealed box, or of the genesis box.
    pub fn head_hash(&self) -> Digest {
        self.boxes
            .iter()
            .rev()
            .find_map(|b| b.header_hash)
            .unwrap_or(self.genesis_hash)
    }

    fn header_of(&self, index: usize) -> Option<Digest> {
        if index == 0 {
            Some(self.genesis_hash)
        } else {
            self.get_box(index).ok()?.header_hash
        }
    }

    fn next_seq(&mut self) -> u64 {
        self.seq += 1;
        self.seq
    }

    /// Checks that approving `parents` lands a transaction in the open box:
    /// at least one parent in the previous box and none older than two back.
    pub fn check_parents(&self, tx: TxId, parents: &[TxId]) -> Result<(), BoxError> {
        let open = self.open_index();
        let parent_boxes: Vec<Option<usize>> = parents.iter().map(|p| self.box_of(*p)).collect();
        let covers_previous = parent_boxes.contains(&Some(open - 1));
        let all_recent = parent_boxes
            .iter()
            .all(|b| matches!(b, Some(b) if *b + 2 >= open && *b < open));
        if parents.is_empty() || !covers_previous || !all_recent {
            return Err(BoxError::RankViolation {
                tx,
                parent_boxes,
                open,
            });
        }
        Ok(())
    }

    /// Appends a ledger transaction to the open box. When the box has been
    /// empty past its deadline its clock restarts at this arrival.
    pub fn assign_to_box(&mut self, ledger: &DagLedger, tx: TxId) -> Result<usize, BoxError> {
        if self.box_of.contains_key(&tx) {
            return Err(BoxError::AlreadyAssigned(tx));
        }
        let record = ledger.get(tx)?;
        self.check_parents(tx, &record.parents)?;
        let time = record.issue_time;
        let tau = self.config.tau;
        let open = self.boxes.last_mut().expect("open box");
        if open.members.is_empty() && time - open.opened_at >= tau {
            open.opened_at = time;
        }
        open.members.push(tx);
        open.join_times.push(time);
        open.member_digest = member_digest(&open.members);
        let index = open.index;
        self.box_of.insert(tx, index);
        Ok(index)
    }

    /// Earliest time the open box will close on duration, if it has members.
    pub fn open_deadline(&self) -> Option<f64> {
        let open = self.open_box();
        (!open.members.is_empty()).then_some(open.opened_at + self.config.tau)
    }

    fn size_guarded(&self, b: &AntichainBox) -> bool {
        let m = b.capacity as usize;
        b.join_times
            .get(m.wrapping_sub(1))
            .is_some_and(|&t| t - b.opened_at < self.config.rate_guard * self.config.tau)
    }

    /// Closes the open box if its size or duration criterion is met at
    /// `now`, fixing the boxer and opening the next box. Returns the boxer.
    pub fn maybe_close_box(&mut self, now: f64) -> Option<TxId> {
        let open = self.open_box();
        if open.members.is_empty() {
            return None;
        }
        let by_size = open.members.len() as u64 >= open.capacity && !self.size_guarded(open);
        let by_time = now - open.opened_at >= self.config.tau;
        if !(by_size || by_time) {
            return None;
        }
        let index = open.index;
        let boxer = *open.members.last().expect("nonempty");
        let seq = self.next_seq();
        let capacity = sample_box_capacity(&mut self.capacity_rng, &self.config.capacity);
        let b = self.boxes.last_mut().expect("open box");
        b.status = BoxStatus::Closing;
        b.boxer = Some(boxer);
        b.closed_at = Some(now);
        self.events.push(ChainEvent::BoxerFixed { box_index: index, boxer, seq });
        // Header is sealed once the genesis is known; link is fixed later.
        self.boxes.push(AntichainBox::new(index + 1, capacity, now, [0; 32]));
        Some(boxer)
    }

    /// Draws the box-genesis for a closed box uniformly among agents in good
    /// standing other than the boxer's issuer, then seals the box header.
    pub fn select_box_genesis<R: Rng + ?Sized>(
        &mut self,
        ledger: &DagLedger,
        index: usize,
        rng: &mut R,
        standings: &Standings,
    ) -> Result<AgentId, BoxError> {
        let b = self.get_box(index)?;
        let boxer = b.boxer.ok_or(BoxError::NotReady(index))?;
        if b.box_genesis.is_some() {
            return Err(BoxError::NotReady(index));
        }
        let boxer_issuer = ledger.get(boxer)?.issuer;
        let eligible: Vec<AgentId> = standings
            .agents()
            .filter(|&(a, _)| a != boxer_issuer && standings.is_good(a))
            .map(|(a, _)| a)
            .collect();
        let agent = *eligible.choose(rng).ok_or(BoxError::NoEligibleGenesis)?;
        let seq = self.next_seq();
        let prev = self.header_of(index - 1).ok_or(BoxError::HashMismatch(index))?;
        let b = self.box_mut(index)?;
        b.box_genesis = Some(agent);
        b.prev_header_hash = prev;
        b.header_hash = b.compute_header_hash();
        self.genesis_chain.push(GenesisEntry {
            box_index: index,
            agent,
            selected_seq: seq,
            sync_log: Vec::new(),
        });
        self.events.push(ChainEvent::GenesisSelected { box_index: index, agent, seq });
        Ok(agent)
    }

    fn neighbor_of(&self, tx: TxId) -> Option<TxId> {
        let index = *self.box_of.get(&tx)?;
        if index == 0 {
            return None;
        }
        let b = self.get_box(index).ok()?;
        let pos = b.members.iter().position(|&m| m == tx)?;
        if pos > 0 {
            Some(b.members[pos - 1])
        } else if index == 1 {
            Some(self.genesis_tx)
        } else {
            self.get_box(index - 1).ok()?.boxer
        }
    }

    /// The member's single predecessor in the dual layer: the previous
    /// member of its box, or the previous box's boxer for a first member.
    pub fn dual_predecessor(&self, tx: TxId) -> Option<TxId> {
        self.neighbor_of(tx)
    }

    /// Voided for its own content, or flagged by a neighbor check. A
    /// transaction voided only because its issuer was disabled is not
    /// illegal and does not taint its approvers.
    pub fn is_illegal(&self, tx: TxId) -> bool {
        self.flagged.contains(&tx)
            || self
                .voided
                .get(&tx)
                .is_some_and(|r| *r != VoidReason::IssuerDisabled)
    }

    fn is_conflict_loser(&self, ledger: &DagLedger, tx: TxId) -> Result<bool, BoxError> {
        for other in ledger.conflicts_of(tx)? {
            if self.voided.contains_key(&other) || !self.box_of.contains_key(&other) {
                continue;
            }
            if self.confirmed.contains_key(&other) {
                return Ok(true);
            }
            if ledger.detect_conflict(self, tx, other)?.rejected == Some(tx) {
                return Ok(true);
            }
        }
        Ok(false)
    }

    fn approvals_verdict(&self, ledger: &DagLedger, tx: TxId) -> Result<(Verdict, ValidationReason), BoxError> {
        let record = ledger.get(tx)?;
        if record.is_genesis() {
            return Ok((Verdict::Legitimate, ValidationReason::Clean));
        }
        let parents = &record.parents;
        if parents.len() == 2 && ledger.get(parents[0])?.conflicts_with(ledger.get(parents[1])?) {
            return Ok((Verdict::Illegal, ValidationReason::Conflict));
        }
        for &p in parents {
            if self.is_illegal(p) || self.is_conflict_loser(ledger, p)? {
                return Ok((Verdict::Illegal, ValidationReason::Conflict));
            }
        }
        let own_box = self.box_of.get(&tx).copied().unwrap_or(0);
        let parent_boxes: Vec<Option<usize>> = parents.iter().map(|p| self.box_of(*p)).collect();
        let rank_ok = own_box >= 1
            && parent_boxes.contains(&Some(own_box - 1))
            && parent_boxes
                .iter()
                .all(|b| matches!(b, Some(b) if *b + 2 >= own_box && *b < own_box));
        if !rank_ok {
            return Ok((Verdict::Illegal, ValidationReason::RankViolation));
        }
        if parents.len() == 2 {
            let (a, b) = (parents[0], parents[1]);
            if ledger.ancestor_closure(a)?.contains(&b) || ledger.ancestor_closure(b)?.contains(&a) {
                return Ok((Verdict::Legitimate, ValidationReason::RedundantApproval));
            }
        }
        Ok((Verdict::Legitimate, ValidationReason::Clean))
    }

    /// The 2+2 step: a newly joined member re-verifies its predecessor's two
    /// approvals. Illegal predecessors are flagged for finalization.
    pub fn two_plus_two_check(
        &mut self,
        ledger: &DagLedger,
        new_member: TxId,
    ) -> Result<ValidationResult, BoxError> {
        let neighbor = self
            .neighbor_of(new_member)
            .ok_or(BoxError::NotReady(self.open_index()))?;
        let (verdict, reason) = self.approvals_verdict(ledger, neighbor)?;
        if verdict == Verdict::Illegal {
            self.flagged.insert(neighbor);
        }
        let result = ValidationResult {
            checked_tx: new_member,
            neighbor_tx: neighbor,
            verdict,
            reason,
        };
        self.validations.push(result);
        Ok(result)
    }

    fn audit(
        &self,
        ledger: &DagLedger,
        target: usize,
        standings: &Standings,
    ) -> Result<Audit, BoxError> {
        let mut confirmed = Vec::new();
        let mut voided: Vec<(TxId, VoidReason)> = Vec::new();
        let members = self.get_box(target)?.members.clone();
        for m in members {
            let record = ledger.get(m)?;
            let rejected_parent = record.parents.iter().any(|p| {
                self.is_illegal(*p)
                    || voided
                        .iter()
                        .any(|(v, r)| v == p && *r != VoidReason::IssuerDisabled)
            });
            let reason = if standings.is_disabled(record.issuer) {
                Some(VoidReason::IssuerDisabled)
            } else if self.is_conflict_loser(ledger, m)? {
                Some(VoidReason::Conflict)
            } else if self.flagged.contains(&m) {
                Some(VoidReason::FlaggedByNeighbor)
            } else if rejected_parent {
                Some(VoidReason::ApprovesIllegal)
            } else {
                None
            };
            match reason {
                Some(r) => voided.push((m, r)),
                None => confirmed.push(m),
            }
        }
        Ok((confirmed, voided))
    }

    /// Final confirmation of box `i - 1`, performed by box `i`'s genesis and
    /// countersigned by its boxer.
    pub fn finalize_box(
        &mut self,
        ledger: &DagLedger,
        i: usize,
        standings: &mut Standings,
        conduct: &Conduct,
    ) -> Result<ConfirmationReport, BoxError> {
        let closing = self.get_box(i)?;
        let genesis = closing.box_genesis.ok_or(BoxError::GenesisAbsent(i))?;
        let boxer = closing.boxer.ok_or(BoxError::NotReady(i))?;
        let now = closing.closed_at.ok_or(BoxError::NotReady(i))?;
        let target = i - 1;

        if target == 0 {
            let seq = self.next_seq();
            self.events.push(ChainEvent::Confirmed { box_index: 0, seq });
            return Ok(ConfirmationReport {
                confirmed_box: 0,
                by_box: i,
                genesis: Some(genesis),
                confirmed: vec![self.genesis_tx],
                voided: Vec::new(),
                disabled_agents: Vec::new(),
                header_hash: self.genesis_hash,
                confirmed_at: 0.0,
            });
        }

        let t = self.get_box(target)?;
        if t.status == BoxStatus::Confirmed {
            return Err(BoxError::AlreadyConfirmed(target));
        }
        if t.status != BoxStatus::Closing {
            return Err(BoxError::NotReady(target));
        }
        let header = t.header_hash.ok_or(BoxError::GenesisAbsent(target))?;
        if Some(t.prev_header_hash) != self.header_of(target - 1) || t.compute_header_hash() != Some(header) {
            return Err(BoxError::HashMismatch(target));
        }

        let honest = self.audit(ledger, target, standings)?;
        let report = if conduct.forgers.contains(&genesis) {
            (t.members.clone(), Vec::new())
        } else {
            honest.clone()
        };
        let boxer_issuer = ledger.get(boxer)?.issuer;
        if !conduct.forgers.contains(&boxer_issuer) && report != honest {
            return Err(BoxError::IntegrityAlarm {
                box_index: i,
                confirmed: target,
            });
        }
        let (confirmed, voided) = report;

        let mut disabled = BTreeSet::new();
        for &(v, _) in &voided {
            disabled.insert(ledger.get(v)?.issuer);
        }
        let illegal: BTreeSet<TxId> = voided
            .iter()
            .filter(|(_, r)| *r != VoidReason::IssuerDisabled)
            .map(|(v, _)| *v)
            .collect();
        for m in self.get_box(i)?.members.clone() {
            let record = ledger.get(m)?;
            if record.parents.iter().any(|p| illegal.contains(p)) {
                disabled.insert(record.issuer);
                self.flagged.insert(m);
            }
        }
        for &a in &disabled {
            standings.disable(a);
        }
        for &(v, r) in &voided {
            self.voided.insert(v, r);
        }
        for &c in &confirmed {
            self.confirmed.insert(c, now);
        }
        self.box_mut(target)?.status = BoxStatus::Confirmed;
        // Timestamp synchronization: every earlier genesis logs the new header.
        let position = self
            .genesis_chain
            .iter()
            .position(|g| g.box_index == i)
            .unwrap_or(self.genesis_chain.len());
        for entry in &mut self.genesis_chain[..position] {
            entry.sync_log.push(header);
        }
        let seq = self.next_seq();
        self.events.push(ChainEvent::Confirmed { box_index: target, seq });

        Ok(ConfirmationReport {
            confirmed_box: target,
            by_box: i,
            genesis: Some(genesis),
            confirmed,
            voided,
            disabled_agents: disabled.into_iter().collect(),
            header_hash: header,
            confirmed_at: now,
        })
    }

    /// Tips sitting in the box three back from the open one: two boxes have
    /// formed since, so nothing can approve them any more.
    pub fn stuck_transactions(&self, ledger: &DagLedger) -> Vec<TxId> {
        let Some(index) = self.open_index().checked_sub(3) else {
            return Vec::new();
        };
        if index == 0 {
            return Vec::new();
        }
        self.get_box(index)
            .map(|b| {
                b.members
                    .iter()
                    .copied()
                    .filter(|&m| ledger.is_tip(m) && !self.voided.contains_key(&m) && !self.flagged.contains(&m))
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Issues an empty transaction for the owner of a stuck one; it approves
    /// two eligible tips and joins the open box.
    pub fn issue_empty_transaction<R: Rng + ?Sized>(
        &mut self,
        ledger: &mut DagLedger,
        stuck_tx: TxId,
        now: f64,
        rng: &mut R,
    ) -> Result<TxId, BoxError> {
        if !ledger.is_tip(stuck_tx) {
            return Err(BoxError::NotATip(stuck_tx));
        }
        let index = self.box_of(stuck_tx).ok_or(BoxError::NotStuck(stuck_tx))?;
        if index == 0 || index + 3 > self.open_index() {
            return Err(BoxError::NotStuck(stuck_tx));
        }
        let issuer = ledger.get(stuck_tx)?.issuer;
        let parents = ledger.select_tips(self, issuer, rng)?;
        self.check_parents(ledger.next_id(), &parents)?;
        let id = ledger
            .insert(NewTransaction {
                issuer,
                spend_nonce: None,
                fee: 0,
                parents,
                issue_time: now,
                is_empty: true,
            })?
            .id;
        self.assign_to_box(ledger, id)?;
        Ok(id)
    }

    /// One close step at `now`: boxer, genesis, sealing and finalization.
    pub fn close_cycle<R: Rng + ?Sized>(
        &mut self,
        ledger: &DagLedger,
        now: f64,
        standings: &mut Standings,
        genesis_rng: &mut R,
        conduct: &Conduct,
    ) -> Result<Option<CloseOutcome>, BoxError> {
        let Some(boxer) = self.maybe_close_box(now) else {
            return Ok(None);
        };
        let index = self.open_index() - 1;
        let genesis = self.select_box_genesis(ledger, index, genesis_rng, standings)?;
        let report = self.finalize_box(ledger, index, standings, conduct)?;
        let stuck = self.stuck_transactions(ledger);
        Ok(Some(CloseOutcome {
            index,
            boxer,
            genesis,
            closed_at: now,
            report,
            stuck,
        }))
    }

    /// Closes every box whose duration deadline falls at or before `t`,
    /// each at its own deadline.
    pub fn advance_to<R: Rng + ?Sized>(
        &mut self,
        ledger: &DagLedger,
        t: f64,
        standings: &mut Standings,
        genesis_rng: &mut R,
        conduct: &Conduct,
    ) -> Result<Vec<CloseOutcome>, BoxError> {
        let mut out = Vec::new();
        while let Some(deadline) = self.open_deadline() {
            if deadline > t {
                break;
            }
            match self.close_cycle(ledger, deadline, standings, genesis_rng, conduct)? {
                Some(outcome) => out.push(outcome),
                None => break,
            }
        }
        Ok(out)
    }

    /// Verifies links and recomputes every sealed header.
    pub fn verify_chain(&self) -> Result<(), BoxError> {
        let mut prev = self.genesis_hash;
        for b in &self.boxes {
            let Some(h) = b.header_hash else { break };
            if b.prev_header_hash != prev || b.compute_header_hash() != Some(h) {
                return Err(BoxError::HashMismatch(b.index));
            }
            prev = h;
        }
        Ok(())
    }

    /// Line-oriented dump, one `box` record per box.
    pub fn to_dump(&self) -> String {
        let mut out = String::new();
        for b in &self.boxes {
            let opt = |x: Option<u64>| x.map_or_else(|| "-".to_string(), |v| v.to_string());
            let hash = b.header_hash.map_or_else(|| "-".to_string(), |h| hex(&h));
            let prev = if b.header_hash.is_some() {
                hex(&b.prev_header_hash)
            } else {
                "-".to_string()
            };
            let members: Vec<String> = b.members.iter().map(|m| m.to_string()).collect();
            let _ = writeln!(
                out,
                "box {} {} {} {} {} {} members:{}",
                b.index,
                b.status.as_str(),
                opt(b.boxer),
                opt(b.box_genesis),
                hash,
                prev,
                members.join(",")
            );
        }
        out
    }
}

impl BoxView for Boxchain {
    fn open_index(&self) -> usize {
        self.open_box().index
    }

    fn box_of(&self, tx: TxId) -> Option<usize> {
        self.box_of.get(&tx).copied()
    }

    fn members_of(&self, index: usize) -> Vec<TxId> {
        if index == 0 {
            return vec![self.genesis_tx];
        }
        self.get_box(index).map(|b| b.members.clone()).unwrap_or_default()
    }
}

/// `⌈n / m⌉ + 1`: the most layers `n` transactions can occupy when every
/// closed box holds at least `m` of them, plus the genesis layer.
pub fn height_bound(n: usize, m: u64) -> usize {
    n.div_ceil(m.max(1) as usize) + 1
}

/// The bound is only meaningful for fixed-capacity runs whose closed boxes
/// all reached `m_max`; boxes closed early on duration can exceed it.
pub fn height_bound_check(ledger: &DagLedger, n: usize, m_max: u64) -> bool {
    ledger.height() <= height_bound(n, m_max)
}

/// One parsed line of a box dump.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxRecord {
    pub index: usize,
    pub status: BoxStatus,
    pub boxer: Option<TxId>,
    pub genesis: Option<AgentId>,
    pub hash: Option<String>,
    pub prev_hash: Option<String>,
    pub members: Vec<TxId>,
}

pub fn parse_box_dump(text: &str) -> Result<Vec<BoxRecord>, BoxError> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: &str| BoxError::BadDump {
            line: lineno + 1,
            reason: reason.to_string(),
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 8 || f[0] != "box" {
            return Err(bad("expected 8 fields starting with `box`"));
        }
        let opt_num = |s: &str| -> Result<Option<u64>, BoxError> {
            if s == "-" {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad("bad integer"))
            }
        };
        let opt_str = |s: &str| (s != "-").then(|| s.to_string());
        let status = match f[2] {
            "open" => BoxStatus::Open,
            "closing" => BoxStatus::Closing,
            "confirmed" => BoxStatus::Confirmed,
            _ => return Err(bad("bad status")),
        };
        let members = f[7]
            .strip_prefix("members:")
            .ok_or_else(|| bad("missing members:"))?;
        let members = members
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| bad("bad member id")))
            .collect::<Result<Vec<TxId>, _>>()?;
        out.push(BoxRecord {
            index: f[1].parse().map_err(|_| bad("bad index"))?,
            status,
            boxer: opt_num(f[3])?,
            genesis: opt_num(f[4])?,
            hash: opt_str(f[5]),
            prev_hash: opt_str(f[6]),
            members,
        });
    }
    Ok(out)
}

/// Checks that every sealed record's previous-hash is the hash of the record
/// before it, starting from `genesis_hash`.
pub fn verify_dump_linkage(records: &[BoxRecord], genesis_hash: &Digest) -> Result<(), BoxError> {
    let mut prev = hex(genesis_hash);
    for r in records {
        let (Some(hash), Some(p)) = (&r.hash, &r.prev_hash) else {
            break;
        };
        if *p != prev {
            return Err(BoxError::HashMismatch(r.index));
        }
        prev = hash.clone();
    }
    Ok(())
}
