use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_LEVELS: usize = 7;
pub const N_ACTIONS: usize = N_LEVELS * N_LEVELS * N_LEVELS;

/// Ventilator setting levels `(Vt, PEEP, FiO2)`, each in `0..7`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActionTriple {
    pub vt: u8,
    pub peep: u8,
    pub fio2: u8,
}

impl ActionTriple {
    pub fn new(vt: u8, peep: u8, fio2: u8) -> Result<Self> {
        for (name, v) in [("vt", vt), ("peep", peep), ("fio2", fio2)] {
            if v as usize >= N_LEVELS {
                return Err(Error::Domain(format!("{name} level {v} outside 0..{N_LEVELS}")));
            }
        }
        Ok(Self { vt, peep, fio2 })
    }

    pub fn components(self) -> [u8; 3] {
        [self.vt, self.peep, self.fio2]
    }

    pub fn from_components(c: [u8; 3]) -> Result<Self> {
        Self::new(c[0], c[1], c[2])
    }

    /// L1 distance over levels.
    pub fn distance(self, other: ActionTriple) -> u32 {
        self.components()
            .iter()
            .zip(other.components())
            .map(|(&a, b)| (a as i32 - b as i32).unsigned_abs())
            .sum()
    }
}

/// Flat action index in `0..343`, `vt·49 + peep·7 + fio2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionIndex(u16);

impl ActionIndex {
    pub fn new(index: usize) -> Result<Self> {
        if index >= N_ACTIONS {
            return Err(Error::Domain(format!("action index {index} outside 0..{N_ACTIONS}")));
        }
        Ok(Self(index as u16))
    }

    pub fn get(self) -> usize {
        self.0 as usize
    }
}

pub fn encode_action(t: ActionTriple) -> Result<ActionIndex> {
    let t = ActionTriple::new(t.vt, t.peep, t.fio2)?;
    Ok(ActionIndex(
        t.vt as u16 * (N_LEVELS * N_LEVELS) as u16 + t.peep as u16 * N_LEVELS as u16 + t.fio2 as u16,
    ))
}

pub fn decode_action(i: ActionIndex) -> Result<ActionTriple> {
    let i = ActionIndex::new(i.get())?.get();
    let vt = i / (N_LEVELS * N_LEVELS);
    let peep = (i / N_LEVELS) % N_LEVELS;
    let fio2 = i % N_LEVELS;
    Ok(ActionTriple {
        vt: vt as u8,
        peep: peep as u8,
        fio2: fio2 as u8,
    })
}

pub fn decode_index(i: usize) -> Result<ActionTriple> {
    decode_action(ActionIndex::new(i)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VentParameter {
    TidalVolume,
    Peep,
    Fio2,
}

/// Seven contiguous half-open intervals `[edges[k], edges[k+1])`.
/// The last interval is closed above at `upper` (which may be infinite).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    pub parameter: VentParameter,
    pub unit: String,
    /// Lower edges of the seven bins.
    pub lower_edges: [f64; N_LEVELS],
    pub upper: f64,
}

impl BinSpec {
    pub fn tidal_volume() -> Self {
        Self {
            parameter: VentParameter::TidalVolume,
            unit: "ml/kg".into(),
            lower_edges: [0.0, 2.5, 5.0, 7.5, 10.0, 12.5, 15.0],
            upper: f64::INFINITY,
        }
    }

    pub fn peep() -> Self {
        Self {
            parameter: VentParameter::Peep,
            unit: "cmH2O".into(),
            lower_edges: [0.0, 5.0, 7.0, 9.0, 11.0, 13.0, 15.0],
            upper: f64::INFINITY,
        }
    }

    pub fn fio2() -> Self {
        Self {
            parameter: VentParameter::Fio2,
            unit: "%".into(),
            lower_edges: [25.0, 30.0, 35.0, 40.0, 45.0, 50.0, 55.0],
            upper: 100.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.lower_edges;
        if e.windows(2).any(|w| !(w[0] < w[1])) || !(self.upper > e[N_LEVELS - 1]) {
            return Err(Error::Config(format!("bin edges for {:?} are not increasing", self.parameter)));
        }
        Ok(())
    }

    pub fn interval(&self, level: usize) -> (f64, f64) {
        let hi = if level + 1 < N_LEVELS {
            self.lower_edges[level + 1]
        } else {
            self.upper
        };
        (self.lower_edges[level], hi)
    }
}

/// Level of the bin containing `value`; interior boundaries belong to the
/// upper bin.
pub fn discretize_setting(value: f64, bins: &BinSpec) -> Result<u8> {
    if !value.is_finite() {
        return Err(Error::Domain(format!("setting value {value} is not finite")));
    }
    if value < 0.0 {
        return Err(Error::Domain(format!("setting value {value} is negative")));
    }
    if value < bins.lower_edges[0] || value > bins.upper {
        return Err(Error::Domain(format!(
            "{value} {} lies outside [{}, {}]",
            bins.unit, bins.lower_edges[0], bins.upper
        )));
    }
    let level = bins.lower_edges.iter().rposition(|&lo| value >= lo).unwrap_or(0);
    Ok(level as u8)
}
