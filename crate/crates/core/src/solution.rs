use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::model::{Instance, Schedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Exhaustive,
    Exact,
    GreedyU,
    PtasStar,
    LpRounding,
    Dclevernet,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Exhaustive => "exhaustive",
            Method::Exact => "exact",
            Method::GreedyU => "greedy-u",
            Method::PtasStar => "ptas-star",
            Method::LpRounding => "lp-rounding",
            Method::Dclevernet => "dclevernet",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "exhaustive" => Method::Exhaustive,
            "exact" => Method::Exact,
            "greedy-u" | "greedy" => Method::GreedyU,
            "ptas-star" | "ptas" => Method::PtasStar,
            "lp-rounding" => Method::LpRounding,
            "dclevernet" => Method::Dclevernet,
            other => return Err(format!("unknown method `{other}`")),
        })
    }
}

/// A feasible schedule together with how it was obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub schedule: Schedule,
    pub objective: f64,
    #[serde(with = "duration_secs")]
    pub wall_time: Duration,
    pub method: Method,
    /// Proven optimal (exact methods only).
    pub optimal: bool,
}

impl Solution {
    pub fn from_pairs(
        instance: &Instance,
        pairs: &[(usize, usize)],
        method: Method,
        wall_time: Duration,
        optimal: bool,
    ) -> Self {
        let schedule = Schedule::from_pairs(instance, pairs);
        let objective = crate::model::evaluate_objective(instance, &schedule)
            .expect("pairs reference valid options");
        Self {
            schedule,
            objective,
            wall_time,
            method,
            optimal,
        }
    }
}

mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Ok(Duration::from_secs_f64(secs.max(0.0)))
    }
}
