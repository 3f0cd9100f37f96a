//! Calendar values and their conversion to fractional years.

use std::fmt;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate, NaiveDateTime, NaiveTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DatetimeValue {
    pub date: NaiveDate,
    pub time: Option<NaiveTime>,
}

impl DatetimeValue {
    pub fn from_ymd(year: i32, month: u32, day: u32) -> Result<Self> {
        let date = NaiveDate::from_ymd_opt(year, month, day)
            .ok_or_else(|| Error::Parse(format!("invalid date {year:04}-{month:02}-{day:02}")))?;
        Ok(Self { date, time: None })
    }

    pub fn with_time(mut self, time: NaiveTime) -> Self {
        self.time = Some(time);
        self
    }

    /// `year + elapsed/days_in_year`, where `elapsed` counts whole days before
    /// the date plus the time of day as a fraction of a day.
    pub fn fractional_year(&self) -> f64 {
        let year = self.date.year();
        let days_in_year = if self.date.leap_year() { 366.0 } else { 365.0 };
        let mut elapsed = self.date.ordinal0() as f64;
        if let Some(t) = self.time {
            elapsed += (t.num_seconds_from_midnight() as f64 + t.nanosecond() as f64 * 1e-9) / 86_400.0;
        }
        year as f64 + elapsed / days_in_year
    }
}

impl FromStr for DatetimeValue {
    type Err = Error;

    /// Accepts ISO-8601 `YYYY-MM-DD`, optionally followed by `THH:MM:SS`
    /// (a space separator and fractional seconds are also accepted).
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Ok(date) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
            return Ok(Self { date, time: None });
        }
        for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M"] {
            if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
                return Ok(Self {
                    date: dt.date(),
                    time: Some(dt.time()),
                });
            }
        }
        Err(Error::Parse(format!("not an ISO-8601 date: {s:?}")))
    }
}

impl fmt::Display for DatetimeValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.time {
            None => write!(f, "{}", self.date.format("%Y-%m-%d")),
            Some(t) => write!(f, "{}T{}", self.date.format("%Y-%m-%d"), t.format("%H:%M:%S")),
        }
    }
}
