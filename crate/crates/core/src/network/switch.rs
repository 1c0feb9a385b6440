//! Switch chassis, line cards and ports with their power states.
//!
//! Line-card sleep is gated on every port of the card being in LPI or off; a
//! port can only be active when its card is active. Entering LPI takes the
//! port's entry latency; waking a port behind a sleeping card waits for the
//! card first.

use serde::Deserialize;

use crate::engine::{SimDuration, SimTime};
use crate::stats::{Energy, Power, PowerMode, ResidencyLedger, TrackedState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PortState {
    Active,
    Lpi,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LineCardState {
    Active,
    Sleep,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SwitchComponent {
    Port(u32),
    LineCard(u32),
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwitchPowerProfile {
    pub chassis_w: f64,
    #[serde(default)]
    pub line_card_active_w: f64,
    #[serde(default)]
    pub line_card_sleep_w: f64,
    pub port_active_w: f64,
    /// Defaults to 10% of `port_active_w`.
    #[serde(default)]
    pub port_lpi_w: Option<f64>,
    #[serde(default)]
    pub port_off_w: f64,
    #[serde(default = "default_lpi_entry_us")]
    pub port_lpi_entry_us: u64,
    #[serde(default = "default_lpi_exit_us")]
    pub port_lpi_exit_us: u64,
    #[serde(default)]
    pub line_card_sleep_entry_us: u64,
    #[serde(default = "default_line_card_wake_us")]
    pub line_card_wake_us: u64,
    /// Ports per line card; all ports on one card when absent.
    #[serde(default)]
    pub ports_per_line_card: Option<u32>,
}

fn default_lpi_entry_us() -> u64 {
    5
}

fn default_lpi_exit_us() -> u64 {
    16
}

fn default_line_card_wake_us() -> u64 {
    1_000
}

pub const LPI_DEFAULT_FRACTION: f64 = 0.1;

impl SwitchPowerProfile {
    /// 14.7 W chassis and 0.23 W per active port, line cards folded into the chassis.
    pub fn reference() -> Self {
        SwitchPowerProfile {
            chassis_w: 14.7,
            line_card_active_w: 0.0,
            line_card_sleep_w: 0.0,
            port_active_w: 0.23,
            port_lpi_w: None,
            port_off_w: 0.0,
            port_lpi_entry_us: default_lpi_entry_us(),
            port_lpi_exit_us: default_lpi_exit_us(),
            line_card_sleep_entry_us: 0,
            line_card_wake_us: default_line_card_wake_us(),
            ports_per_line_card: None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let lpi = self.port_lpi_w.unwrap_or(self.port_active_w * LPI_DEFAULT_FRACTION);
        let all = [self.chassis_w, self.line_card_active_w, self.line_card_sleep_w, self.port_active_w, lpi, self.port_off_w];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err("switch powers must be finite and non-negative".into());
        }
        if lpi > self.port_active_w || self.port_off_w > lpi || self.line_card_sleep_w > self.line_card_active_w {
            return Err("switch power must not increase with sleep depth".into());
        }
        if self.port_lpi_exit_us == 0 || self.line_card_wake_us == 0 {
            return Err("switch wake latencies must be positive".into());
        }
        if self.ports_per_line_card == Some(0) {
            return Err("ports_per_line_card must be positive".into());
        }
        Ok(())
    }

    pub fn tables(&self) -> SwitchPowerTable {
        SwitchPowerTable {
            chassis: Power::from_watts(self.chassis_w),
            card_active: Power::from_watts(self.line_card_active_w),
            card_sleep: Power::from_watts(self.line_card_sleep_w),
            port_active: Power::from_watts(self.port_active_w),
            port_lpi: Power::from_watts(self.port_lpi_w.unwrap_or(self.port_active_w * LPI_DEFAULT_FRACTION)),
            port_off: Power::from_watts(self.port_off_w),
            lpi_entry: SimDuration(self.port_lpi_entry_us),
            lpi_exit: SimDuration(self.port_lpi_exit_us),
            card_sleep_entry: SimDuration(self.line_card_sleep_entry_us),
            card_wake: SimDuration(self.line_card_wake_us),
            ports_per_card: self.ports_per_line_card,
        }
    }
}

/// Integer form of a [`SwitchPowerProfile`].
#[derive(Clone, Debug, PartialEq)]
pub struct SwitchPowerTable {
    pub chassis: Power,
    pub card_active: Power,
    pub card_sleep: Power,
    pub port_active: Power,
    pub port_lpi: Power,
    pub port_off: Power,
    pub lpi_entry: SimDuration,
    pub lpi_exit: SimDuration,
    pub card_sleep_entry: SimDuration,
    pub card_wake: SimDuration,
    pub ports_per_card: Option<u32>,
}

impl SwitchPowerTable {
    pub fn port_power(&self, s: PortState) -> Power {
        match s {
            PortState::Active => self.port_active,
            PortState::Lpi => self.port_lpi,
            PortState::Off => self.port_off,
        }
    }

    pub fn card_power(&self, s: LineCardState) -> Power {
        match s {
            LineCardState::Active => self.card_active,
            LineCardState::Sleep => self.card_sleep,
            LineCardState::Off => Power::ZERO,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Switch {
    ports: Vec<TrackedState<PortState>>,
    cards: Vec<TrackedState<LineCardState>>,
    ports_per_card: u32,
    awake: ResidencyLedger<bool>,
}

impl Switch {
    pub fn new(n_ports: u32, table: &SwitchPowerTable, now: SimTime) -> Switch {
        let per = table.ports_per_card.unwrap_or(n_ports).max(1);
        let n_cards = n_ports.div_ceil(per).max(1);
        Switch {
            ports: (0..n_ports).map(|_| TrackedState::new(PortState::Active, now)).collect(),
            cards: (0..n_cards).map(|_| TrackedState::new(LineCardState::Active, now)).collect(),
            ports_per_card: per,
            awake: ResidencyLedger::new(true, now),
        }
    }

    pub fn port_mode(&self, p: u32) -> PowerMode<PortState> {
        self.ports[p as usize].mode()
    }

    pub fn card_mode(&self, c: u32) -> PowerMode<LineCardState> {
        self.cards[c as usize].mode()
    }

    pub fn card_of(&self, p: u32) -> u32 {
        p / self.ports_per_card
    }

    pub fn n_ports(&self) -> u32 {
        self.ports.len() as u32
    }

    pub fn n_cards(&self) -> u32 {
        self.cards.len() as u32
    }

    fn card_ports(&self, c: u32) -> std::ops::Range<u32> {
        c * self.ports_per_card..((c + 1) * self.ports_per_card).min(self.n_ports())
    }

    pub fn port_ready(&self, p: u32) -> bool {
        self.ports[p as usize].mode().is_steady(PortState::Active)
    }

    /// Awake unless every line card is steadily asleep or off.
    pub fn is_awake(&self) -> bool {
        self.cards.iter().any(|c| !matches!(c.mode(), PowerMode::Steady(LineCardState::Sleep | LineCardState::Off)))
    }

    fn stamp_awake(&mut self, now: SimTime) {
        let a = self.is_awake();
        if self.awake.current() != a {
            self.awake.on_transition(a, now).expect("switch ledger time regression");
        }
    }

    /// Starts waking port `p` (and its card). Returns completions to schedule.
    pub fn wake_port(&mut self, p: u32, table: &SwitchPowerTable, now: SimTime, out: &mut Vec<(SwitchComponent, SimTime)>) {
        let c = self.card_of(p);
        match self.cards[c as usize].mode() {
            PowerMode::Steady(LineCardState::Active) => {}
            PowerMode::Steady(from) => {
                let until = now + table.card_wake;
                self.cards[c as usize].begin(from, LineCardState::Active, until, now);
                out.push((SwitchComponent::LineCard(c), until));
                self.stamp_awake(now);
                return;
            }
            // Port wakes once the card transition completes.
            PowerMode::Transition { .. } => return,
        }
        if let PowerMode::Steady(from @ (PortState::Lpi | PortState::Off)) = self.ports[p as usize].mode() {
            let until = now + table.lpi_exit;
            self.ports[p as usize].begin(from, PortState::Active, until, now);
            out.push((SwitchComponent::Port(p), until));
        }
    }

    /// Starts LPI entry on an idle active port.
    pub fn sleep_port(&mut self, p: u32, table: &SwitchPowerTable, now: SimTime, out: &mut Vec<(SwitchComponent, SimTime)>) -> bool {
        if !self.ports[p as usize].mode().is_steady(PortState::Active) {
            return false;
        }
        if table.lpi_entry.0 == 0 {
            self.ports[p as usize].steady(PortState::Lpi, now);
        } else {
            let until = now + table.lpi_entry;
            self.ports[p as usize].begin(PortState::Active, PortState::Lpi, until, now);
            out.push((SwitchComponent::Port(p), until));
        }
        true
    }

    /// Puts a card to sleep if all of its ports are steadily in LPI or off.
    pub fn try_sleep_card(&mut self, c: u32, table: &SwitchPowerTable, now: SimTime, out: &mut Vec<(SwitchComponent, SimTime)>) -> bool {
        if !self.cards[c as usize].mode().is_steady(LineCardState::Active) {
            return false;
        }
        let idle = self.card_ports(c).all(|p| matches!(self.ports[p as usize].mode(), PowerMode::Steady(PortState::Lpi | PortState::Off)));
        if !idle {
            return false;
        }
        if table.card_sleep_entry.0 == 0 {
            self.cards[c as usize].steady(LineCardState::Sleep, now);
            self.stamp_awake(now);
        } else {
            let until = now + table.card_sleep_entry;
            self.cards[c as usize].begin(LineCardState::Active, LineCardState::Sleep, until, now);
            out.push((SwitchComponent::LineCard(c), until));
        }
        true
    }

    /// Finishes a transition and returns the component's new steady state.
    pub fn complete(&mut self, comp: SwitchComponent, now: SimTime) -> Result<(), String> {
        match comp {
            SwitchComponent::Port(p) => {
                let port = &mut self.ports[p as usize];
                match port.mode() {
                    PowerMode::Transition { to, .. } => port.steady(to, now),
                    m => return Err(format!("port {p} completion in {m:?}")),
                }
            }
            SwitchComponent::LineCard(c) => {
                let card = &mut self.cards[c as usize];
                match card.mode() {
                    PowerMode::Transition { to, .. } => card.steady(to, now),
                    m => return Err(format!("line card {c} completion in {m:?}")),
                }
                self.stamp_awake(now);
            }
        }
        Ok(())
    }

    /// Ports of card `c`.
    pub fn ports_of_card(&self, c: u32) -> std::ops::Range<u32> {
        self.card_ports(c)
    }

    /// Forces every port to a steady state (used for fixed configurations).
    pub fn set_all_ports(&mut self, s: PortState, now: SimTime) {
        for p in &mut self.ports {
            p.steady(s, now);
        }
    }

    pub fn power(&self, table: &SwitchPowerTable) -> Power {
        let ports: Power = self.ports.iter().map(|p| p.mode().power(|s| table.port_power(s))).sum();
        let cards: Power = self.cards.iter().map(|c| c.mode().power(|s| table.card_power(s))).sum();
        table.chassis + cards + ports
    }

    pub fn flush(&mut self, now: SimTime) {
        for p in &mut self.ports {
            p.flush(now);
        }
        for c in &mut self.cards {
            c.flush(now);
        }
        self.awake.flush(now).expect("switch ledger time regression");
    }

    pub fn energy(&self, table: &SwitchPowerTable) -> Energy {
        let ports: Energy = self.ports.iter().map(|p| p.energy(|s| table.port_power(s))).sum();
        let cards: Energy = self.cards.iter().map(|c| c.energy(|s| table.card_power(s))).sum();
        Energy::of(table.chassis, self.awake.total()) + ports + cards
    }

    pub fn awake_time(&self) -> SimDuration {
        self.awake.residency(true)
    }

    pub fn residency_conserved(&self) -> bool {
        self.ports.iter().all(|p| p.ledger().total() == p.ledger().elapsed())
            && self.cards.iter().all(|c| c.ledger().total() == c.ledger().elapsed())
            && self.awake.total() == self.awake.elapsed()
    }

    /// A port may be active or waking only while its card is active.
    pub fn check_invariants(&self) -> Result<(), String> {
        for p in 0..self.n_ports() {
            let card = self.cards[self.card_of(p) as usize].mode();
            let port = self.ports[p as usize].mode();
            if port.target() == PortState::Active && !card.is_steady(LineCardState::Active) {
                return Err(format!("port {p} {port:?} on line card {card:?}"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference() -> SwitchPowerTable {
        SwitchPowerProfile::reference().tables()
    }

    #[test]
    fn reference_all_active() {
        let t = reference();
        let s = Switch::new(24, &t, SimTime(0));
        assert_eq!(s.power(&t), Power::from_watts(20.22));
    }

    #[test]
    fn all_ports_off_is_chassis_only() {
        let t = reference();
        let mut s = Switch::new(24, &t, SimTime(0));
        s.set_all_ports(PortState::Off, SimTime(0));
        assert_eq!(s.power(&t), Power::from_watts(14.7));
    }

    #[test]
    fn half_lpi() {
        let t = reference();
        let mut s = Switch::new(24, &t, SimTime(0));
        let mut out = Vec::new();
        for p in 12..24 {
            s.sleep_port(p, &t, SimTime(0), &mut out);
        }
        for (c, at) in out.drain(..) {
            s.complete(c, at).unwrap();
        }
        assert_eq!(s.power(&t), Power::from_watts(17.736));
    }

    #[test]
    fn power_monotone_in_active_ports() {
        let t = reference();
        let mut s = Switch::new(8, &t, SimTime(0));
        s.set_all_ports(PortState::Off, SimTime(0));
        let mut last = s.power(&t);
        let mut out = Vec::new();
        for p in 0..8 {
            s.wake_port(p, &t, SimTime(0), &mut out);
            s.complete(SwitchComponent::Port(p), SimTime(20)).unwrap();
            let now = s.power(&t);
            assert!(now >= last);
            last = now;
        }
    }

    #[test]
    fn card_sleep_and_wake_sequence() {
        let t = SwitchPowerProfile { ports_per_line_card: Some(2), ..SwitchPowerProfile::reference() }.tables();
        let mut s = Switch::new(4, &t, SimTime(0));
        assert_eq!(s.n_cards(), 2);
        let mut out = Vec::new();
        s.sleep_port(0, &t, SimTime(0), &mut out);
        s.sleep_port(1, &t, SimTime(0), &mut out);
        assert!(!s.try_sleep_card(0, &t, SimTime(0), &mut out), "ports still entering LPI");
        for (c, at) in std::mem::take(&mut out) {
            s.complete(c, at).unwrap();
        }
        assert!(s.try_sleep_card(0, &t, SimTime(5), &mut out));
        assert!(s.is_awake(), "card 1 is still active");
        s.wake_port(0, &t, SimTime(100), &mut out);
        assert_eq!(out, vec![(SwitchComponent::LineCard(0), SimTime(1_100))]);
        s.complete(SwitchComponent::LineCard(0), SimTime(1_100)).unwrap();
        out.clear();
        s.wake_port(0, &t, SimTime(1_100), &mut out);
        assert_eq!(out, vec![(SwitchComponent::Port(0), SimTime(1_116))]);
        s.check_invariants().unwrap();
    }

    #[test]
    fn awake_time_tracks_cards() {
        let t = reference();
        let mut s = Switch::new(2, &t, SimTime(0));
        let mut out = Vec::new();
        s.sleep_port(0, &t, SimTime(0), &mut out);
        s.sleep_port(1, &t, SimTime(0), &mut out);
        for (c, at) in std::mem::take(&mut out) {
            s.complete(c, at).unwrap();
        }
        s.try_sleep_card(0, &t, SimTime(10), &mut out);
        assert!(!s.is_awake());
        s.flush(SimTime(1_000));
        assert_eq!(s.awake_time(), SimDuration(10));
        assert!(s.residency_conserved());
    }

    #[test]
    fn profile_validation() {
        SwitchPowerProfile::reference().validate().unwrap();
        let bad = SwitchPowerProfile { port_lpi_w: Some(1.0), ..SwitchPowerProfile::reference() };
        assert!(bad.validate().is_err());
    }
}
