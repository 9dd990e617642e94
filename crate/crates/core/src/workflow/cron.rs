//! Five-field cron schedules (minute hour day-of-month month day-of-week),
//! evaluated in UTC at minute resolution.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, TimeZone, Timelike, Utc};
use croner::Cron;

use crate::error::{Error, Result};

#[derive(Clone)]
pub struct CronSchedule {
    expr: String,
    cron: Cron,
}

impl fmt::Debug for CronSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CronSchedule({:?})", self.expr)
    }
}

/// Truncates to the start of the minute.
pub fn floor_minute(t: DateTime<Utc>) -> DateTime<Utc> {
    t.with_second(0)
        .and_then(|t| t.with_nanosecond(0))
        .expect("zeroing seconds is always valid")
}

impl CronSchedule {
    pub fn parse(expr: &str) -> Result<Self> {
        let fields = expr.split_whitespace().count();
        if fields != 5 {
            return Err(Error::Validation(format!(
                "cron {expr:?}: expected 5 fields (minute hour dom month dow), got {fields}"
            )));
        }
        let cron = Cron::from_str(expr)
            .map_err(|e| Error::Validation(format!("cron {expr:?}: {e}")))?;
        // Leap days recur within eight years; anything later never fires.
        let start = Utc.with_ymd_and_hms(2000, 1, 1, 0, 0, 0).unwrap();
        match cron.find_next_occurrence(&start, true) {
            Ok(t) if t < Utc.with_ymd_and_hms(2008, 1, 1, 0, 0, 0).unwrap() => {}
            _ => {
                return Err(Error::Validation(format!(
                    "cron {expr:?} can never fire"
                )))
            }
        }
        Ok(CronSchedule {
            expr: expr.to_string(),
            cron,
        })
    }

    pub fn expr(&self) -> &str {
        &self.expr
    }

    /// Whether the schedule fires in the minute containing `t`.
    pub fn matches_minute(&self, t: DateTime<Utc>) -> bool {
        self.cron.is_time_matching(&floor_minute(t)).unwrap_or(false)
    }
}
