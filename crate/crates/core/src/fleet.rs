//! PEV population and charging ledger.
//!
//! Each vehicle arrives with a battery deficit `C (1 - soc0)` in kWh and must
//! be fully charged by its departure slot. [`FleetState`] tracks the
//! remaining deficit per vehicle as charge is committed slot by slot.
//!
//! Per-slot charging power `P` is interpreted as the average power over the
//! slot, so the energy banked in one slot is `u_h * P * dt` with `dt` the
//! slot length in hours.

use thiserror::Error;

/// Remaining demand at or below this many kWh counts as "fully charged".
pub const REMAINING_TOL_KWH: f64 = 1e-6;

/// Committed charge may overshoot the remaining demand by at most this many
/// kWh (covers solver round-off); anything larger is a scheduler bug.
pub const OVERCHARGE_TOL_KWH: f64 = 1e-3;

/// One plug-in electric vehicle.
#[derive(Debug, Clone)]
pub struct Pev {
    pub id: u32,
    /// 1-based id of the charging-station bus (must host a generator).
    pub station: usize,
    /// Arrival slot, 1-based.
    pub t_arrive: usize,
    /// Departure slot, 1-based and inclusive; `t_arrive <= t_depart`.
    pub t_depart: usize,
    /// Battery capacity, kWh.
    pub capacity_kwh: f64,
    /// State of charge on arrival, in `[0, 1]`.
    pub soc0: f64,
    /// Charger hardware limit, kW.
    pub p_max_kw: f64,
    /// Charging efficiency in `(0, 1]`.
    pub u_h: f64,
    /// Optional cap on the stay length in slots (departure minus arrival).
    pub max_stay: Option<usize>,
}

impl Pev {
    /// Energy needed to fill the battery: `C (1 - soc0)` in kWh.
    pub fn initial_demand_kwh(&self) -> f64 {
        self.capacity_kwh * (1.0 - self.soc0)
    }

    /// Whether the full demand fits in the stay at the hardware rate limit:
    /// `u_h * p_max * dt * (t_depart - t_arrive + 1) >= C (1 - soc0)`.
    pub fn check_admissible(&self, dt_hours: f64) -> bool {
        let slots = (self.t_depart - self.t_arrive + 1) as f64;
        self.u_h * self.p_max_kw * dt_hours * slots >= self.initial_demand_kwh() - 1e-12
    }

    pub fn validate(&self, t_slots: usize) -> Result<(), FleetError> {
        if self.t_arrive == 0 || self.t_arrive > self.t_depart || self.t_depart > t_slots {
            return Err(FleetError::BadWindow {
                id: self.id,
                t_arrive: self.t_arrive,
                t_depart: self.t_depart,
            });
        }
        if let Some(max_stay) = self.max_stay {
            if self.t_depart - self.t_arrive > max_stay {
                return Err(FleetError::StayTooLong { id: self.id, max_stay });
            }
        }
        if !(self.capacity_kwh > 0.0) {
            return Err(FleetError::BadParameter { id: self.id, what: "capacity" });
        }
        if !(0.0..=1.0).contains(&self.soc0) {
            return Err(FleetError::BadParameter { id: self.id, what: "soc0" });
        }
        if !(self.u_h > 0.0 && self.u_h <= 1.0) {
            return Err(FleetError::BadParameter { id: self.id, what: "u_h" });
        }
        if !(self.p_max_kw >= 0.0) {
            return Err(FleetError::BadParameter { id: self.id, what: "p_max" });
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum FleetError {
    #[error("PEV {id}: arrival/departure window {t_arrive}..{t_depart} is invalid")]
    BadWindow { id: u32, t_arrive: usize, t_depart: usize },
    #[error("PEV {id}: stay exceeds the allowed {max_stay} slots")]
    StayTooLong { id: u32, max_stay: usize },
    #[error("PEV {id}: invalid {what}")]
    BadParameter { id: u32, what: &'static str },
    #[error("PEV {id}: negative charge power {p_kw}")]
    NegativePower { id: u32, p_kw: f64 },
    #[error("PEV {id}: charge power {p_kw} exceeds hardware limit {p_max_kw}")]
    RateLimit { id: u32, p_kw: f64, p_max_kw: f64 },
    #[error("PEV {id}: overcharge by {excess_kwh} kWh beyond remaining demand")]
    Overcharge { id: u32, excess_kwh: f64 },
    #[error("roster line {line}: {message}")]
    Roster { line: usize, message: String },
}

/// Mutable charging ledger over a fixed roster.
#[derive(Debug, Clone)]
pub struct FleetState {
    pevs: Vec<Pev>,
    remaining_kwh: Vec<f64>,
    clock: usize,
}

impl FleetState {
    pub fn new(pevs: Vec<Pev>) -> FleetState {
        let remaining_kwh = pevs.iter().map(Pev::initial_demand_kwh).collect();
        FleetState { pevs, remaining_kwh, clock: 1 }
    }

    pub fn pevs(&self) -> &[Pev] {
        &self.pevs
    }

    pub fn pev(&self, idx: usize) -> &Pev {
        &self.pevs[idx]
    }

    pub fn remaining_kwh(&self, idx: usize) -> f64 {
        self.remaining_kwh[idx]
    }

    pub fn clock(&self) -> usize {
        self.clock
    }

    pub fn set_clock(&mut self, t: usize) {
        self.clock = t;
    }

    /// Indices of PEVs plugged in at slot `t` with demand left, in roster
    /// order.
    pub fn active_set(&self, t: usize) -> Vec<usize> {
        self.pevs
            .iter()
            .enumerate()
            .filter(|(i, p)| {
                p.t_arrive <= t && t <= p.t_depart && self.remaining_kwh[*i] > REMAINING_TOL_KWH
            })
            .map(|(i, _)| i)
            .collect()
    }

    /// End of the prediction horizon: the latest departure among active
    /// PEVs, or `t` itself when none are active.
    pub fn horizon(&self, t: usize) -> usize {
        self.active_set(t)
            .iter()
            .map(|&i| self.pevs[i].t_depart)
            .max()
            .unwrap_or(t)
    }

    /// Book `p_kw` of charging over a slot of `dt_hours` against PEV `idx`.
    /// The banked energy is `u_h * p_kw * dt_hours`; the remaining demand is
    /// clamped to zero when the ledger lands within [`OVERCHARGE_TOL_KWH`].
    pub fn apply_charge(&mut self, idx: usize, p_kw: f64, dt_hours: f64) -> Result<(), FleetError> {
        let pev = &self.pevs[idx];
        if p_kw < 0.0 {
            return Err(FleetError::NegativePower { id: pev.id, p_kw });
        }
        if p_kw > pev.p_max_kw * (1.0 + 1e-9) + 1e-9 {
            return Err(FleetError::RateLimit { id: pev.id, p_kw, p_max_kw: pev.p_max_kw });
        }
        let banked = pev.u_h * p_kw * dt_hours;
        let new_remaining = self.remaining_kwh[idx] - banked;
        if new_remaining < -OVERCHARGE_TOL_KWH {
            return Err(FleetError::Overcharge { id: pev.id, excess_kwh: -new_remaining });
        }
        self.remaining_kwh[idx] = new_remaining.max(0.0);
        Ok(())
    }

    /// Force a PEV out of the ledger (demand zeroed); used when a window
    /// problem is infeasible and a vehicle must be dropped.
    pub fn evict(&mut self, idx: usize) {
        self.remaining_kwh[idx] = 0.0;
    }
}

/// Parse a roster CSV with header
/// `id,station,arrival_slot,departure_slot,capacity_kwh,soc0,pmax_kw,uh`.
pub fn parse_roster_csv(text: &str) -> Result<Vec<Pev>, FleetError> {
    const HEADER: &str = "id,station,arrival_slot,departure_slot,capacity_kwh,soc0,pmax_kw,uh";
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == HEADER => {}
        Some((_, h)) => {
            return Err(FleetError::Roster {
                line: 1,
                message: format!("expected header {HEADER:?}, got {h:?}"),
            })
        }
        None => {
            return Err(FleetError::Roster { line: 1, message: "empty roster".to_string() })
        }
    }
    let mut pevs = Vec::new();
    for (idx, raw) in lines {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 8 {
            return Err(FleetError::Roster {
                line: idx + 1,
                message: format!("expected 8 fields, got {}", fields.len()),
            });
        }
        let field = |i: usize| -> Result<f64, FleetError> {
            fields[i].parse().map_err(|_| FleetError::Roster {
                line: idx + 1,
                message: format!("cannot parse field {}: {:?}", i + 1, fields[i]),
            })
        };
        pevs.push(Pev {
            id: field(0)? as u32,
            station: field(1)? as usize,
            t_arrive: field(2)? as usize,
            t_depart: field(3)? as usize,
            capacity_kwh: field(4)?,
            soc0: field(5)?,
            p_max_kw: field(6)?,
            u_h: field(7)?,
            max_stay: None,
        });
    }
    Ok(pevs)
}

/// Render a roster in the same CSV schema.
pub fn roster_to_csv(pevs: &[Pev]) -> String {
    let mut out =
        String::from("id,station,arrival_slot,departure_slot,capacity_kwh,soc0,pmax_kw,uh\n");
    for p in pevs {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            p.id, p.station, p.t_arrive, p.t_depart, p.capacity_kwh, p.soc0, p.p_max_kw, p.u_h
        ));
    }
    out
}
