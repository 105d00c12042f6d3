//! Hour-resolution UTC timestamps.

use std::fmt;

use chrono::{DateTime, Datelike, NaiveDate, NaiveDateTime, Timelike, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Whole hours since 1970-01-01T00:00:00Z.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub fn from_ymdh(year: i32, month: u32, day: u32, hour: u32) -> Result<Self> {
        let dt = NaiveDate::from_ymd_opt(year, month, day)
            .and_then(|d| d.and_hms_opt(hour, 0, 0))
            .ok_or_else(|| Error::Usage(format!("invalid date {year}-{month}-{day} {hour}h")))?;
        Ok(Self::from_naive(dt))
    }

    fn from_naive(dt: NaiveDateTime) -> Self {
        Timestamp(dt.and_utc().timestamp().div_euclid(3600))
    }

    fn to_datetime(self) -> DateTime<Utc> {
        DateTime::from_timestamp(self.0 * 3600, 0).expect("timestamp in chrono range")
    }

    pub fn year(self) -> i32 {
        self.to_datetime().year()
    }

    pub fn hour_of_day(self) -> u32 {
        self.to_datetime().hour()
    }

    /// 0-based day of year.
    pub fn ordinal0(self) -> u32 {
        self.to_datetime().ordinal0()
    }

    pub fn add_hours(self, hours: i64) -> Self {
        Timestamp(self.0 + hours)
    }

    pub fn hours_since(self, earlier: Timestamp) -> i64 {
        self.0 - earlier.0
    }

    /// `YYYY-MM-DDTHH:MM:SSZ`
    pub fn to_iso(self) -> String {
        self.to_datetime().format("%Y-%m-%dT%H:%M:%SZ").to_string()
    }

    /// Accepts RFC 3339 strings, `YYYY-MM-DDTHH:MM:SS` (taken as UTC) and bare dates.
    pub fn parse_iso(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Usage(format!("cannot parse timestamp `{s}`"));
        let dt = if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
            dt.naive_utc()
        } else if let Ok(dt) = NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S") {
            dt
        } else if let Ok(dt) = NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M") {
            dt
        } else if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
            d.and_hms_opt(0, 0, 0).ok_or_else(bad)?
        } else {
            return Err(bad());
        };
        if dt.minute() != 0 || dt.second() != 0 {
            return Err(Error::Usage(format!("timestamp `{s}` is not on a whole hour")));
        }
        Ok(Self::from_naive(dt))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_iso())
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_iso())
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Timestamp::parse_iso(&s).map_err(serde::de::Error::custom)
    }
}

/// Number of hours in a calendar year.
pub fn hours_in_year(year: i32) -> i64 {
    let leap = (year % 4 == 0 && year % 100 != 0) || year % 400 == 0;
    if leap {
        366 * 24
    } else {
        365 * 24
    }
}
