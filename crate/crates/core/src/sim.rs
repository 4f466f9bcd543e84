//! Event-driven scenario runner: agents issue transactions on their own
//! arrival streams, boxes close on size or timer events, and every reward
//! or fee is booked the moment its event happens.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt::Write as _;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use thiserror::Error;

use crate::boxchain::{
    hex, BoxError, Boxchain, BoxchainConfig, CapacitySpec, CloseOutcome, Conduct, Standings, Verdict,
};
use crate::ledger::{AgentId, BoxView, DagLedger, LedgerError, NewTransaction, TxId};
use crate::rng::{StreamRng, Streams};
use crate::stochastics::{
    attack_success_prob, replicate, sample_nonhomogeneous, wilson_interval, IntensityFunction, Z_99,
};

/// Spacing between consecutive transactions of one burst, seconds.
pub const BURST_SPACING: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("unknown agent {0}")]
    UnknownAgent(AgentId),
    #[error("unknown reward kind {0:?}")]
    UnknownKind(String),
    #[error(transparent)]
    Box(#[from] BoxError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Behavior {
    Honest,
    /// Keeps approving the first tip pair it ever picked.
    Lazy,
    /// Behaves honestly except for double-spending bursts.
    Malicious,
}

impl Behavior {
    pub fn as_str(&self) -> &'static str {
        match self {
            Behavior::Honest => "honest",
            Behavior::Lazy => "lazy",
            Behavior::Malicious => "malicious",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentSpec {
    pub id: AgentId,
    pub behavior: Behavior,
    /// Arrival intensity in transactions per second.
    pub arrivals: IntensityFunction,
    pub standing: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RewardSchedule {
    pub primal_validation: i64,
    pub dual_validation: i64,
    pub genesis_job: i64,
    pub boxer_job: i64,
    pub abnormal_report: i64,
}

impl Default for RewardSchedule {
    fn default() -> Self {
        Self {
            primal_validation: 1,
            dual_validation: 1,
            genesis_job: 10,
            boxer_job: 5,
            abnormal_report: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub horizon: f64,
    pub tau: f64,
    pub capacity: CapacitySpec,
    pub rate_guard: f64,
    pub agents: Vec<AgentSpec>,
    /// Fee per issued transaction, base units.
    pub fee: u64,
    pub rewards: RewardSchedule,
    /// Transactions per malicious burst; the first and last spend the same funds.
    pub burst_size: usize,
    /// Burst start times for every malicious agent.
    pub burst_times: Vec<f64>,
    /// Malicious agents confirm unchecked as genesis and sign anything as boxer.
    pub forge_genesis: bool,
    pub standing_threshold: i64,
}

/// Agents of one behavior sharing a total constant rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentClass {
    pub behavior: Behavior,
    pub count: u64,
    /// Total rate of the class, per second.
    pub rate: f64,
}

impl ScenarioConfig {
    /// A scenario with default schedules and constant-rate agent classes.
    /// Agents are numbered from 1 in class order.
    pub fn from_classes(
        seed: u64,
        horizon: f64,
        tau: f64,
        capacity: CapacitySpec,
        classes: &[AgentClass],
    ) -> Result<Self, SimError> {
        let mut agents = Vec::new();
        for class in classes {
            if class.count == 0 {
                continue;
            }
            let per_agent = class.rate / class.count as f64;
            for _ in 0..class.count {
                agents.push(AgentSpec {
                    id: agents.len() as AgentId + 1,
                    behavior: class.behavior,
                    arrivals: IntensityFunction::constant(per_agent, horizon)
                        .map_err(|e| SimError::Config(e.to_string()))?,
                    standing: 0,
                });
            }
        }
        Ok(Self {
            seed,
            horizon,
            tau,
            capacity,
            rate_guard: crate::boxchain::DEFAULT_RATE_GUARD,
            agents,
            fee: 1,
            rewards: RewardSchedule::default(),
            burst_size: 0,
            burst_times: vec![horizon / 2.0],
            forge_genesis: false,
            standing_threshold: 0,
        })
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad("horizon must be positive");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be positive");
        }
        if !(0.0..=1.0).contains(&self.rate_guard) {
            return bad("rate_guard must lie in [0, 1]");
        }
        if !self.agents.iter().any(|a| a.behavior == Behavior::Honest) {
            return bad("at least one honest agent is required");
        }
        let ids: BTreeSet<AgentId> = self.agents.iter().map(|a| a.id).collect();
        if ids.len() != self.agents.len() || ids.contains(&0) {
            return bad("agent ids must be distinct and nonzero");
        }
        let malicious = self.agents.iter().any(|a| a.behavior == Behavior::Malicious);
        if malicious && self.burst_size == 1 {
            return bad("burst_size must be 0 or at least 2");
        }
        Ok(())
    }

    fn malicious_agents(&self) -> BTreeSet<AgentId> {
        self.agents
            .iter()
            .filter(|a| a.behavior == Behavior::Malicious)
            .map(|a| a.id)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum RewardKind {
    PrimalValidation,
    DualValidation,
    GenesisJob,
    BoxerJob,
    AbnormalReport,
    TxFee,
}

impl RewardKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            RewardKind::PrimalValidation => "primal_validation",
            RewardKind::DualValidation => "dual_validation",
            RewardKind::GenesisJob => "genesis_job",
            RewardKind::BoxerJob => "boxer_job",
            RewardKind::AbnormalReport => "abnormal_report",
            RewardKind::TxFee => "tx_fee",
        }
    }
}

impl FromStr for RewardKind {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        Ok(match s {
            "primal_validation" => RewardKind::PrimalValidation,
            "dual_validation" => RewardKind::DualValidation,
            "genesis_job" => RewardKind::GenesisJob,
            "boxer_job" => RewardKind::BoxerJob,
            "abnormal_report" => RewardKind::AbnormalReport,
            "tx_fee" => RewardKind::TxFee,
            _ => return Err(SimError::UnknownKind(s.to_string())),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardEvent {
    pub time: f64,
    pub agent: AgentId,
    pub kind: RewardKind,
    /// Negative for fees.
    pub amount: i64,
}

/// Append-only log of rewards and fees with running balances.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardLedger {
    rewards: RewardSchedule,
    fee: u64,
    events: Vec<RewardEvent>,
    balances: BTreeMap<AgentId, i64>,
}

impl RewardLedger {
    pub fn new(agents: impl IntoIterator<Item = AgentId>, rewards: RewardSchedule, fee: u64) -> Self {
        Self {
            rewards,
            fee,
            events: Vec::new(),
            balances: agents.into_iter().map(|a| (a, 0)).collect(),
        }
    }

    pub fn amount(&self, kind: RewardKind) -> i64 {
        match kind {
            RewardKind::PrimalValidation => self.rewards.primal_validation,
            RewardKind::DualValidation => self.rewards.dual_validation,
            RewardKind::GenesisJob => self.rewards.genesis_job,
            RewardKind::BoxerJob => self.rewards.boxer_job,
            RewardKind::AbnormalReport => self.rewards.abnormal_report,
            RewardKind::TxFee => -(self.fee as i64),
        }
    }

    /// Books one event at `time` and returns the amount credited.
    pub fn accrue(&mut self, kind: RewardKind, agent: AgentId, time: f64) -> Result<i64, SimError> {
        let amount = self.amount(kind);
        let balance = self.balances.get_mut(&agent).ok_or(SimError::UnknownAgent(agent))?;
        *balance += amount;
        self.events.push(RewardEvent {
            time,
            agent,
            kind,
            amount,
        });
        Ok(amount)
    }

    pub fn events(&self) -> &[RewardEvent] {
        &self.events
    }

    pub fn balances(&self) -> &BTreeMap<AgentId, i64> {
        &self.balances
    }

    pub fn balance(&self, agent: AgentId) -> Option<i64> {
        self.balances.get(&agent).copied()
    }

    /// Balances recomputed from the event log alone.
    pub fn fold(&self) -> BTreeMap<AgentId, i64> {
        let mut out: BTreeMap<AgentId, i64> = self.balances.keys().map(|&a| (a, 0)).collect();
        for e in &self.events {
            *out.entry(e.agent).or_default() += e.amount;
        }
        out
    }

    pub fn total_rewards(&self) -> i64 {
        self.events.iter().filter(|e| e.amount > 0).map(|e| e.amount).sum()
    }

    pub fn total_fees(&self) -> i64 {
        -self.events.iter().filter(|e| e.amount < 0).map(|e| e.amount).sum::<i64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub seed: u64,
    pub issued: u64,
    pub empty_issued: u64,
    /// Transactions refused at box assignment for stale approvals.
    pub rejected: u64,
    /// Arrivals dropped because the agent was disabled.
    pub suppressed: u64,
    pub confirmed: u64,
    pub voided: u64,
    pub mean_latency: f64,
    pub p50_latency: f64,
    pub p95_latency: f64,
    pub attack_attempts: u64,
    pub attack_successes: u64,
    pub takeovers: u64,
    pub double_confirmed: u64,
    pub boxes_closed: u64,
    pub disabled_agents: Vec<AgentId>,
    pub balances: BTreeMap<AgentId, i64>,
    pub total_rewards: i64,
    pub total_fees: i64,
    pub net_issuance: i64,
    pub height: usize,
    pub chain_verified: bool,
    pub final_chain_hash: String,
    /// Set when the run stopped early; metrics are partial.
    pub alarm: Option<String>,
}

impl RunMetrics {
    pub const CSV_HEADER: &'static str = "seed,issued,empty_issued,rejected,suppressed,confirmed,voided,\
mean_latency,p50_latency,p95_latency,attack_attempts,attack_successes,takeovers,double_confirmed,\
boxes_closed,disabled_agents,total_rewards,total_fees,net_issuance,height,chain_verified,final_chain_hash,alarm";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.seed,
            self.issued,
            self.empty_issued,
            self.rejected,
            self.suppressed,
            self.confirmed,
            self.voided,
            fmt_g(self.mean_latency),
            fmt_g(self.p50_latency),
            fmt_g(self.p95_latency),
            self.attack_attempts,
            self.attack_successes,
            self.takeovers,
            self.double_confirmed,
            self.boxes_closed,
            self.disabled_agents.len(),
            self.total_rewards,
            self.total_fees,
            self.net_issuance,
            self.height,
            self.chain_verified,
            self.final_chain_hash,
            self.alarm.as_deref().unwrap_or("").replace(',', ";"),
        )
    }

    /// `name=value` lines, balances last.
    pub fn report(&self) -> String {
        let mut out = String::new();
        let header: Vec<&str> = Self::CSV_HEADER.split(',').collect();
        let row = self.csv_row();
        for (name, value) in header.iter().zip(row.split(',')) {
            let _ = writeln!(out, "{name}={value}");
        }
        for (agent, balance) in &self.balances {
            let _ = writeln!(out, "balance.{agent}={balance}");
        }
        out
    }
}

/// `%.12g`-style formatting: 12 significant digits, no trailing zeros.
pub fn fmt_g(x: f64) -> String {
    fmt_sig(x, 12)
}

pub fn fmt_sig(x: f64, digits: usize) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let sci = format!("{:.*e}", digits - 1, x);
    // Rounding can bump the exponent; read it back from the formatted value.
    let (mantissa, e) = sci.split_once('e').expect("exponent");
    let e: i32 = e.parse().expect("exponent");
    let trim = |s: &str| {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if e < -4 || e >= digits as i32 {
        let sign = if e < 0 { '-' } else { '+' };
        format!("{}e{}{:02}", trim(mantissa), sign, e.abs())
    } else {
        let decimals = (digits as i32 - 1 - e).max(0) as usize;
        trim(&format!("{x:.decimals$}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EventKind {
    Timer { box_index: usize },
    Arrival { agent: AgentId },
    Burst { agent: AgentId, position: usize },
}

impl EventKind {
    // Timers fire before arrivals stamped with the same instant.
    fn class(&self) -> u8 {
        match self {
            EventKind::Timer { .. } => 0,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // Reversed so the max-heap pops the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then(other.kind.class().cmp(&self.kind.class()))
            .then(other.seq.cmp(&self.seq))
    }
}

#[derive(Debug)]
struct AgentState {
    behavior: Behavior,
    rng: StreamRng,
    next_nonce: u64,
    burst_nonce: Option<u64>,
    lazy_pair: Option<Vec<TxId>>,
}

/// A finished run: metrics plus the final ledger and chain for dumps.
#[derive(Debug)]
pub struct ScenarioRun {
    pub metrics: RunMetrics,
    pub ledger: DagLedger,
    pub chain: Boxchain,
    pub rewards: RewardLedger,
    pub standings: Standings,
}

struct Runner<'a> {
    config: &'a ScenarioConfig,
    ledger: DagLedger,
    chain: Boxchain,
    standings: Standings,
    rewards: RewardLedger,
    conduct: Conduct,
    agents: BTreeMap<AgentId, AgentState>,
    genesis_rng: StreamRng,
    queue: BinaryHeap<Event>,
    seq: u64,
    metrics: RunMetrics,
    latencies: Vec<f64>,
    burst_heads: Vec<TxId>,
    halted: bool,
}

/// Runs one scenario to its horizon. An integrity alarm or an empty
/// genesis pool stops the run early with `metrics.alarm` set.
pub fn run_scenario(config: &ScenarioConfig) -> Result<ScenarioRun, SimError> {
    config.validate()?;
    let streams = Streams::new(config.seed);
    let ledger = DagLedger::new(0, config.fee);
    let chain = Boxchain::new(
        BoxchainConfig {
            tau: config.tau,
            capacity: config.capacity.clone(),
            rate_guard: config.rate_guard,
        },
        &ledger,
        streams.stream("capacity"),
    );
    let ids: Vec<AgentId> = config.agents.iter().map(|a| a.id).collect();
    let mut standings = Standings::new(ids.iter().copied(), config.standing_threshold);
    for a in &config.agents {
        for _ in 0..a.standing.max(0) {
            standings.credit(a.id);
        }
    }
    let conduct = Conduct {
        forgers: if config.forge_genesis {
            config.malicious_agents()
        } else {
            BTreeSet::new()
        },
    };
    let mut runner = Runner {
        config,
        ledger,
        chain,
        standings,
        rewards: RewardLedger::new(ids, config.rewards, config.fee),
        conduct,
        agents: BTreeMap::new(),
        genesis_rng: streams.stream("genesis"),
        queue: BinaryHeap::new(),
        seq: 0,
        metrics: RunMetrics {
            seed: config.seed,
            issued: 0,
            empty_issued: 0,
            rejected: 0,
            suppressed: 0,
            confirmed: 0,
            voided: 0,
            mean_latency: 0.0,
            p50_latency: 0.0,
            p95_latency: 0.0,
            attack_attempts: 0,
            attack_successes: 0,
            takeovers: 0,
            double_confirmed: 0,
            boxes_closed: 0,
            disabled_agents: Vec::new(),
            balances: BTreeMap::new(),
            total_rewards: 0,
            total_fees: 0,
            net_issuance: 0,
            height: 1,
            chain_verified: true,
            final_chain_hash: String::new(),
            alarm: None,
        },
        latencies: Vec::new(),
        burst_heads: Vec::new(),
        halted: false,
    };
    for a in &config.agents {
        runner.agents.insert(
            a.id,
            AgentState {
                behavior: a.behavior,
                rng: streams.indexed("agent", a.id),
                next_nonce: 0,
                burst_nonce: None,
                lazy_pair: None,
            },
        );
        let mut arrivals_rng = streams.indexed("arrivals", a.id);
        for t in sample_nonhomogeneous(&a.arrivals, &mut arrivals_rng) {
            if t < config.horizon {
                runner.push(t, EventKind::Arrival { agent: a.id });
            }
        }
        if a.behavior == Behavior::Malicious && config.burst_size >= 2 {
            for &start in &config.burst_times {
                for position in 0..config.burst_size {
                    let t = start + position as f64 * BURST_SPACING;
                    if t < config.horizon {
                        runner.push(t, EventKind::Burst { agent: a.id, position });
                    }
                }
            }
        }
    }
    runner.run()?;
    Ok(runner.finish())
}

impl Runner<'_> {
    fn push(&mut self, time: f64, kind: EventKind) {
        self.seq += 1;
        self.queue.push(Event {
            time,
            seq: self.seq,
            kind,
        });
    }

    fn run(&mut self) -> Result<(), SimError> {
        while let Some(ev) = self.queue.pop() {
            if self.halted || ev.time > self.config.horizon {
                break;
            }
            match ev.kind {
                EventKind::Timer { box_index } => {
                    if self.chain.open_index() == box_index && self.chain.open_deadline() == Some(ev.time) {
                        self.close_boxes(ev.time)?;
                    }
                }
                EventKind::Arrival { agent } => self.issue(agent, ev.time, None)?,
                EventKind::Burst { agent, position } => self.issue(agent, ev.time, Some(position))?,
            }
        }
        Ok(())
    }

    fn schedule_timer(&mut self) {
        let open = self.chain.open_index();
        if self.chain.boxes().last().is_some_and(|b| b.len() == 1) {
            if let Some(deadline) = self.chain.open_deadline() {
                self.push(deadline, EventKind::Timer { box_index: open });
            }
        }
    }

    fn issue(&mut self, agent: AgentId, now: f64, burst: Option<usize>) -> Result<(), SimError> {
        if self.standings.is_disabled(agent) {
            self.metrics.suppressed += 1;
            return Ok(());
        }
        let state = self.agents.get_mut(&agent).ok_or(SimError::UnknownAgent(agent))?;
        let picked = match (&state.behavior, &state.lazy_pair) {
            (Behavior::Lazy, Some(pair)) => Ok(pair.clone()),
            _ => self.ledger.select_tips(&self.chain, agent, &mut state.rng),
        };
        let parents = match picked {
            Ok(p) => p,
            Err(LedgerError::NoEligibleTips) => return Ok(()),
            Err(e) => return Err(e.into()),
        };
        if state.behavior == Behavior::Lazy && state.lazy_pair.is_none() {
            state.lazy_pair = Some(parents.clone());
        }
        if self.chain.check_parents(self.ledger.next_id(), &parents).is_err() {
            self.metrics.rejected += 1;
            return Ok(());
        }
        let last = self.config.burst_size.saturating_sub(1);
        let nonce = match burst {
            Some(p) if p == last => state.burst_nonce.take().unwrap_or(state.next_nonce),
            Some(0) => {
                state.burst_nonce = Some(state.next_nonce);
                state.next_nonce
            }
            _ => state.next_nonce,
        };
        if nonce == state.next_nonce {
            state.next_nonce += 1;
        }
        let id = self
            .ledger
            .insert(NewTransaction {
                issuer: agent,
                spend_nonce: Some(nonce),
                fee: self.config.fee,
                parents,
                issue_time: now,
                is_empty: false,
            })?
            .id;
        self.metrics.issued += 1;
        if burst == Some(0) {
            self.metrics.attack_attempts += 1;
            self.burst_heads.push(id);
        }
        self.rewards.accrue(RewardKind::TxFee, agent, now)?;
        self.rewards.accrue(RewardKind::PrimalValidation, agent, now)?;
        self.join(id, agent, now)?;
        self.close_boxes(now)
    }

    fn join(&mut self, id: TxId, agent: AgentId, now: f64) -> Result<(), SimError> {
        self.chain.assign_to_box(&self.ledger, id)?;
        self.schedule_timer();
        let check = self.chain.two_plus_two_check(&self.ledger, id)?;
        self.rewards.accrue(RewardKind::DualValidation, agent, now)?;
        match check.verdict {
            Verdict::Legitimate => self.standings.credit(agent),
            Verdict::Illegal => {
                self.rewards.accrue(RewardKind::AbnormalReport, agent, now)?;
            }
        }
        Ok(())
    }

    fn close_boxes(&mut self, now: f64) -> Result<(), SimError> {
        loop {
            let step = self.chain.close_cycle(
                &self.ledger,
                now,
                &mut self.standings,
                &mut self.genesis_rng,
                &self.conduct,
            );
            match step {
                Ok(Some(outcome)) => self.on_close(outcome, now)?,
                Ok(None) => return Ok(()),
                Err(e @ (BoxError::IntegrityAlarm { .. } | BoxError::NoEligibleGenesis)) => {
                    self.metrics.alarm = Some(e.to_string());
                    self.halted = true;
                    return Ok(());
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    fn on_close(&mut self, outcome: CloseOutcome, now: f64) -> Result<(), SimError> {
        self.metrics.boxes_closed += 1;
        let boxer_issuer = self.ledger.get(outcome.boxer)?.issuer;
        if !self.standings.is_disabled(boxer_issuer) {
            self.rewards.accrue(RewardKind::BoxerJob, boxer_issuer, now)?;
            self.standings.credit(boxer_issuer);
        }
        self.rewards.accrue(RewardKind::GenesisJob, outcome.genesis, now)?;
        self.standings.credit(outcome.genesis);
        let report = &outcome.report;
        for &tx in &report.confirmed {
            let record = self.ledger.get(tx)?;
            if record.is_genesis() {
                continue;
            }
            self.metrics.confirmed += 1;
            if !record.is_empty {
                self.latencies.push(report.confirmed_at - record.issue_time);
            }
        }
        self.metrics.voided += report.voided.len() as u64;
        for &stuck in &outcome.stuck {
            let issuer = self.ledger.get(stuck)?.issuer;
            if self.standings.is_disabled(issuer) {
                continue;
            }
            let Some(state) = self.agents.get_mut(&issuer) else {
                continue;
            };
            match self.chain.issue_empty_transaction(&mut self.ledger, stuck, now, &mut state.rng) {
                Ok(id) => {
                    self.metrics.empty_issued += 1;
                    self.schedule_timer();
                    self.chain.two_plus_two_check(&self.ledger, id)?;
                }
                Err(BoxError::NotATip(_) | BoxError::NotStuck(_) | BoxError::RankViolation { .. }) => {}
                Err(BoxError::Ledger(LedgerError::NoEligibleTips)) => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    }

    fn finish(mut self) -> ScenarioRun {
        let m = &mut self.metrics;
        self.latencies.sort_by(f64::total_cmp);
        if !self.latencies.is_empty() {
            m.mean_latency = self.latencies.iter().sum::<f64>() / self.latencies.len() as f64;
            m.p50_latency = nearest_rank(&self.latencies, 0.50);
            m.p95_latency = nearest_rank(&self.latencies, 0.95);
        }
        m.double_confirmed = double_confirmed(&self.ledger, &self.chain);
        let malicious = self.config.malicious_agents();
        for &head in &self.burst_heads {
            let Some(index) = self.chain.box_of(head) else { continue };
            let pair = [index, index + 1].map(|i| self.chain.get_box(i).ok().filter(|b| b.boxer.is_some()));
            let [Some(first), Some(second)] = pair else { continue };
            let owned = |b: &crate::boxchain::AntichainBox| {
                b.members
                    .iter()
                    .all(|&m| self.ledger.get(m).is_ok_and(|t| malicious.contains(&t.issuer)))
            };
            if owned(first) && owned(second) {
                m.attack_successes += 1;
                let captured = |b: &crate::boxchain::AntichainBox| b.box_genesis.is_some_and(|g| malicious.contains(&g));
                if captured(first) && captured(second) {
                    m.takeovers += 1;
                }
            }
        }
        m.disabled_agents = self.standings.disabled_agents();
        m.balances = self.rewards.balances().clone();
        m.total_rewards = self.rewards.total_rewards();
        m.total_fees = self.rewards.total_fees();
        m.net_issuance = m.total_rewards - m.total_fees;
        m.height = self.ledger.height();
        m.chain_verified = self.chain.verify_chain().is_ok();
        m.final_chain_hash = hex(&self.chain.head_hash());
        ScenarioRun {
            metrics: self.metrics,
            ledger: self.ledger,
            chain: self.chain,
            rewards: self.rewards,
            standings: self.standings,
        }
    }
}

fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Conflicting pairs with both members final.
pub fn double_confirmed(ledger: &DagLedger, chain: &Boxchain) -> u64 {
    let mut pairs = 0;
    for &tx in chain.confirmed().keys() {
        if let Ok(others) = ledger.conflicts_of(tx) {
            pairs += others.iter().filter(|&&o| o > tx && chain.is_confirmed(o)).count() as u64;
        }
    }
    pairs
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackTrialConfig {
    /// Honest arrival rate, per second.
    pub lambda: f64,
    pub tau: f64,
    pub trials: u64,
    pub honest_agents: u64,
    /// Distinct attacker addresses, all eligible for genesis selection.
    pub attacker_agents: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackEstimate {
    pub trials: u64,
    pub successes: u64,
    pub takeovers: u64,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub takeover_rate: f64,
    pub closed_form: f64,
}

impl AttackEstimate {
    pub fn covers(&self, p: f64) -> bool {
        self.ci_low <= p && p <= self.ci_high
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct TrialTally {
    successes: u64,
    takeovers: u64,
}

/// One attack trial on the box clock. The attacker floods the box the
/// moment it opens, so the size criterion trips inside the rate guard and
/// the box runs for the full `τ`; it does the same to the next box. The
/// attack holds iff no honest transaction arrives during either box.
fn attack_trial<R: Rng + ?Sized>(cfg: &AttackTrialConfig, gap: Option<&Exp<f64>>, rng: &mut R) -> (bool, bool) {
    let boxes_end = [cfg.tau, 2.0 * cfg.tau];
    let mut honest_in = [false; 2];
    if let Some(gap) = gap {
        let first = gap.sample(rng);
        if let Some(b) = boxes_end.iter().position(|&end| first < end) {
            honest_in[b] = true;
        }
    }
    let dominated = !honest_in[0] && !honest_in[1];
    if !dominated {
        return (false, false);
    }
    // Each box-genesis is drawn among everyone but the boxer's issuer, which
    // is an attacker address.
    let pool = cfg.honest_agents + cfg.attacker_agents - 1;
    let captured = pool > 0
        && (0..2).all(|_| rng.random_range(0..pool) < cfg.attacker_agents.saturating_sub(1));
    (true, captured)
}

/// Empirical probability that a burst dominates two back-to-back boxes,
/// with a 99% Wilson interval. Trials are split over fixed leaves so the
/// result does not depend on the thread count.
pub fn run_attack_trials(cfg: &AttackTrialConfig, streams: &Streams) -> Result<AttackEstimate, SimError> {
    if cfg.trials == 0 {
        return Err(SimError::Config("trials must be at least 1".into()));
    }
    if !(cfg.lambda >= 0.0 && cfg.tau > 0.0) {
        return Err(SimError::Config("lambda must be >= 0 and tau > 0".into()));
    }
    if cfg.attacker_agents == 0 {
        return Err(SimError::Config("at least one attacker address is required".into()));
    }
    let gap = (cfg.lambda > 0.0).then(|| Exp::new(cfg.lambda).expect("positive rate"));
    let tally = replicate(
        streams,
        "attack",
        cfg.trials,
        |rng, acc: &mut TrialTally| {
            let (won, captured) = attack_trial(cfg, gap.as_ref(), rng);
            acc.successes += u64::from(won);
            acc.takeovers += u64::from(captured);
        },
        |a, b| TrialTally {
            successes: a.successes + b.successes,
            takeovers: a.takeovers + b.takeovers,
        },
    );
    let (ci_low, ci_high) = wilson_interval(tally.successes, cfg.trials, Z_99);
    Ok(AttackEstimate {
        trials: cfg.trials,
        successes: tally.successes,
        takeovers: tally.takeovers,
        rate: tally.successes as f64 / cfg.trials as f64,
        ci_low,
        ci_high,
        takeover_rate: tally.takeovers as f64 / cfg.trials as f64,
        closed_form: attack_success_prob(cfg.lambda, cfg.tau).map_err(|e| SimError::Config(e.to_string()))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn honest(seed: u64, horizon: f64, tau: f64, capacity: &str, rate_per_min: f64) -> ScenarioConfig {
        ScenarioConfig::from_classes(
            seed,
            horizon,
            tau,
            CapacitySpec::parse(capacity).unwrap(),
            &[AgentClass {
                behavior: Behavior::Honest,
                count: 10,
                rate: rate_per_min / 60.0,
            }],
        )
        .unwrap()
    }

    #[test]
    fn fmt_matches_percent_g() {
        assert_eq!(fmt_g(0.0), "0");
        assert_eq!(fmt_g(30.0), "30");
        assert_eq!(fmt_g(4.14465316), "4.14465316");
        assert_eq!(fmt_g(2.061_153_622_438_558e-9), "2.06115362244e-09");
        assert_eq!(fmt_g(1234567890123.0), "1.23456789012e+12");
        assert_eq!(fmt_g(0.000123), "0.000123");
        assert_eq!(fmt_g(-1.5), "-1.5");
        assert_eq!(fmt_sig(4.539992976e-5, 4), "4.54e-05");
        assert_eq!(fmt_g(999999999999.5), "1e+12");
    }

    #[test]
    fn reward_ledger_books_and_folds() {
        let mut r = RewardLedger::new([1, 2], RewardSchedule::default(), 1);
        assert_eq!(r.accrue(RewardKind::GenesisJob, 1, 0.5).unwrap(), 10);
        assert_eq!(r.accrue(RewardKind::TxFee, 2, 0.7).unwrap(), -1);
        assert_eq!(r.accrue(RewardKind::AbnormalReport, 2, 0.9).unwrap(), 3);
        assert_eq!(r.accrue(RewardKind::BoxerJob, 3, 1.0), Err(SimError::UnknownAgent(3)));
        assert_eq!(r.balance(2), Some(2));
        assert_eq!(&r.fold(), r.balances());
        assert_eq!(r.events().len(), 3);
        assert_eq!("tx_fee".parse::<RewardKind>().unwrap(), RewardKind::TxFee);
        assert!("bribe".parse::<RewardKind>().is_err());
    }

    #[test]
    fn event_order_is_time_then_timer_then_seq() {
        let mut q = BinaryHeap::new();
        q.push(Event { time: 2.0, seq: 1, kind: EventKind::Arrival { agent: 1 } });
        q.push(Event { time: 2.0, seq: 5, kind: EventKind::Timer { box_index: 1 } });
        q.push(Event { time: 1.0, seq: 9, kind: EventKind::Arrival { agent: 2 } });
        q.push(Event { time: 2.0, seq: 3, kind: EventKind::Arrival { agent: 3 } });
        let order: Vec<u64> = std::iter::from_fn(|| q.pop().map(|e| e.seq)).collect();
        assert_eq!(order, vec![9, 5, 1, 3]);
    }

    #[test]
    fn honest_run_is_safe_and_deterministic() {
        let cfg = honest(11, 600.0, 20.0, "fixed:64", 30.0);
        let a = run_scenario(&cfg).unwrap();
        let b = run_scenario(&cfg).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.ledger.to_dump(), b.ledger.to_dump());
        assert_eq!(a.chain.to_dump(), b.chain.to_dump());
        let m = &a.metrics;
        assert!(m.alarm.is_none());
        assert!(m.confirmed > 200, "{m:?}");
        assert_eq!(m.double_confirmed, 0);
        assert!(m.disabled_agents.is_empty());
        assert!(m.chain_verified);
        assert!((m.mean_latency - 30.0).abs() < 3.0, "{}", m.mean_latency);
        assert_eq!(&a.rewards.fold(), a.rewards.balances());
        assert_eq!(m.balances.values().sum::<i64>(), m.net_issuance);
        let other = run_scenario(&honest(12, 600.0, 20.0, "fixed:64", 30.0)).unwrap();
        assert_ne!(other.metrics.final_chain_hash, m.final_chain_hash);
    }

    #[test]
    fn zero_arrivals_close_nothing() {
        let run = run_scenario(&honest(1, 600.0, 20.0, "fixed:64", 0.0)).unwrap();
        assert_eq!(run.metrics.boxes_closed, 0);
        assert_eq!(run.metrics.confirmed, 0);
        assert_eq!(run.metrics.mean_latency, 0.0);
        assert_eq!(run.ledger.len(), 1);
    }

    #[test]
    fn config_validation() {
        let mut cfg = honest(1, 600.0, 20.0, "fixed:8", 30.0);
        cfg.tau = 0.0;
        assert!(matches!(run_scenario(&cfg), Err(SimError::Config(_))));
        let only_lazy = ScenarioConfig::from_classes(
            1,
            60.0,
            10.0,
            CapacitySpec::fixed(4).unwrap(),
            &[AgentClass { behavior: Behavior::Lazy, count: 2, rate: 1.0 }],
        )
        .unwrap();
        assert!(only_lazy.validate().is_err());
    }

    #[test]
    fn lazy_agents_get_rejected() {
        let cfg = ScenarioConfig::from_classes(
            3,
            600.0,
            10.0,
            CapacitySpec::fixed(16).unwrap(),
            &[
                AgentClass { behavior: Behavior::Honest, count: 10, rate: 1.0 },
                AgentClass { behavior: Behavior::Lazy, count: 3, rate: 0.3 },
            ],
        )
        .unwrap();
        let run = run_scenario(&cfg).unwrap();
        assert!(run.metrics.rejected > 0);
        assert_eq!(run.metrics.double_confirmed, 0);
        assert!(run.metrics.alarm.is_none());
    }

    #[test]
    fn malicious_burst_is_caught() {
        let mut cfg = ScenarioConfig::from_classes(
            5,
            300.0,
            10.0,
            CapacitySpec::fixed(16).unwrap(),
            &[
                AgentClass { behavior: Behavior::Honest, count: 10, rate: 1.0 },
                AgentClass { behavior: Behavior::Malicious, count: 2, rate: 0.1 },
            ],
        )
        .unwrap();
        cfg.burst_size = 6;
        cfg.burst_times = vec![100.0, 200.0];
        let run = run_scenario(&cfg).unwrap();
        let m = &run.metrics;
        assert_eq!(m.attack_attempts, 2, "{m:?}");
        assert_eq!(m.double_confirmed, 0);
        assert!(m.voided >= 1);
        assert!(m.disabled_agents.contains(&11) && m.disabled_agents.contains(&12), "{m:?}");
        assert!(m.suppressed > 0 || m.voided > 1);
        assert!(m.attack_successes <= m.attack_attempts);
        assert!(m.chain_verified);
    }

    #[test]
    fn forging_genesis_trips_the_alarm() {
        // Needs a forger as genesis right after a burst, audited by an
        // honest boxer; some seeds get there.
        let alarms: Vec<String> = (1..=20)
            .filter_map(|seed| {
                let mut cfg = ScenarioConfig::from_classes(
                    seed,
                    300.0,
                    10.0,
                    CapacitySpec::fixed(64).unwrap(),
                    &[
                        AgentClass { behavior: Behavior::Honest, count: 2, rate: 1.0 },
                        AgentClass { behavior: Behavior::Malicious, count: 8, rate: 0.2 },
                    ],
                )
                .unwrap();
                cfg.burst_size = 4;
                cfg.burst_times = vec![50.0];
                cfg.forge_genesis = true;
                run_scenario(&cfg).unwrap().metrics.alarm
            })
            .collect();
        assert!(alarms.iter().any(|a| a.contains("rejects")), "{alarms:?}");
    }

    #[test]
    fn attack_trials_edge_cases() {
        let streams = Streams::new(4);
        let cfg = AttackTrialConfig {
            lambda: 0.0,
            tau: 10.0,
            trials: 5000,
            honest_agents: 10,
            attacker_agents: 1,
        };
        let est = run_attack_trials(&cfg, &streams).unwrap();
        assert_eq!(est.rate, 1.0);
        assert_eq!(est.takeovers, 0);
        assert!(run_attack_trials(&AttackTrialConfig { trials: 0, ..cfg }, &streams).is_err());
    }

    #[test]
    fn attack_trials_track_closed_form() {
        let streams = Streams::new(8);
        let cfg = AttackTrialConfig {
            lambda: 0.1,
            tau: 5.0,
            trials: 200_000,
            honest_agents: 20,
            attacker_agents: 20,
        };
        let est = run_attack_trials(&cfg, &streams).unwrap();
        assert!(est.covers((-1.0f64).exp()), "{est:?}");
        assert!(est.takeover_rate < est.rate);
        assert!(est.takeovers > 0);
        let again = run_attack_trials(&cfg, &streams).unwrap();
        assert_eq!(est, again);
    }
}
