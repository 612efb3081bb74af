//! The six retrieval scenarios: {daytime, nighttime, all-day} × {short-term, long-term}.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

/// Capture spectrum of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "RGB")]
    Rgb,
    #[serde(rename = "IR")]
    Ir,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modality::Rgb => write!(f, "RGB"),
            Modality::Ir => write!(f, "IR"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TimeMoment {
    Daytime,
    Nighttime,
    AllDay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TimeInterval {
    ShortTerm,
    LongTerm,
}

/// A (time-moment, time-interval) pair; six in total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Scenario {
    pub tm: TimeMoment,
    pub ti: TimeInterval,
}

pub const NUM_SCENARIOS: usize = 6;

impl Scenario {
    /// Canonical order: DT-ST, DT-LT, NT-ST, NT-LT, AD-ST, AD-LT.
    pub const ALL: [Scenario; NUM_SCENARIOS] = [
        Scenario { tm: TimeMoment::Daytime, ti: TimeInterval::ShortTerm },
        Scenario { tm: TimeMoment::Daytime, ti: TimeInterval::LongTerm },
        Scenario { tm: TimeMoment::Nighttime, ti: TimeInterval::ShortTerm },
        Scenario { tm: TimeMoment::Nighttime, ti: TimeInterval::LongTerm },
        Scenario { tm: TimeMoment::AllDay, ti: TimeInterval::ShortTerm },
        Scenario { tm: TimeMoment::AllDay, ti: TimeInterval::LongTerm },
    ];

    pub fn index(self) -> usize {
        Scenario::ALL
            .iter()
            .position(|s| *s == self)
            .expect("every scenario is in ALL")
    }

    pub fn from_index(i: usize) -> Scenario {
        Scenario::ALL[i]
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tm = match self.tm {
            TimeMoment::Daytime => "DT",
            TimeMoment::Nighttime => "NT",
            TimeMoment::AllDay => "AD",
        };
        let ti = match self.ti {
            TimeInterval::ShortTerm => "ST",
            TimeInterval::LongTerm => "LT",
        };
        write!(f, "{tm}-{ti}")
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let (tm, ti) = s
            .split_once('-')
            .ok_or_else(|| Error::Config(format!("unknown scenario '{s}'")))?;
        let tm = match tm {
            "DT" => TimeMoment::Daytime,
            "NT" => TimeMoment::Nighttime,
            "AD" => TimeMoment::AllDay,
            _ => return Err(Error::Config(format!("unknown time moment '{tm}'"))),
        };
        let ti = match ti {
            "ST" => TimeInterval::ShortTerm,
            "LT" => TimeInterval::LongTerm,
            _ => return Err(Error::Config(format!("unknown time interval '{ti}'"))),
        };
        Ok(Scenario { tm, ti })
    }
}

impl Serialize for Scenario {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Scenario {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
