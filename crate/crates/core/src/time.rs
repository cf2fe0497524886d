//! Hour-resolution local clock time.
//!
//! All timestamps are naive local times in the single zone declared by the
//! workspace configuration. Hourly series are keyed by [`Hour`], a count of
//! whole hours since 1970-01-01T00:00 local.

use std::fmt;

use chrono::{Datelike, NaiveDate, NaiveDateTime, Timelike};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TimeError {
    #[error("unparseable timestamp `{0}`")]
    Unparseable(String),
    #[error("timestamp `{0}` is not aligned to a whole hour")]
    NotHourAligned(String),
}

const FORMATS: &[&str] = &[
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%dT%H:%M",
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%d %H:%M",
];

/// Parse a local timestamp with minute (or second) resolution.
pub fn parse_local(s: &str) -> Result<NaiveDateTime, TimeError> {
    let s = s.trim();
    FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .ok_or_else(|| TimeError::Unparseable(s.to_string()))
}

pub fn format_local(t: &NaiveDateTime) -> String {
    t.format("%Y-%m-%dT%H:%M").to_string()
}

fn epoch() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(1970, 1, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid epoch")
}

/// Whole hours since 1970-01-01T00:00 local time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Hour(pub i64);

impl Hour {
    /// Hour containing `t` (floor).
    pub fn floor(t: &NaiveDateTime) -> Hour {
        let secs = (*t - epoch()).num_seconds();
        Hour(secs.div_euclid(3600))
    }

    /// Smallest hour boundary at or after `t`.
    pub fn ceil(t: &NaiveDateTime) -> Hour {
        let secs = (*t - epoch()).num_seconds();
        Hour(secs.div_euclid(3600) + i64::from(secs.rem_euclid(3600) != 0))
    }

    /// Exact conversion; fails unless minutes and seconds are zero.
    pub fn exact(t: &NaiveDateTime) -> Result<Hour, TimeError> {
        if t.minute() != 0 || t.second() != 0 || t.nanosecond() != 0 {
            return Err(TimeError::NotHourAligned(format_local(t)));
        }
        Ok(Hour::floor(t))
    }

    pub fn parse(s: &str) -> Result<Hour, TimeError> {
        let t = parse_local(s)?;
        Hour::exact(&t).map_err(|_| TimeError::NotHourAligned(s.trim().to_string()))
    }

    pub fn to_datetime(self) -> NaiveDateTime {
        epoch() + chrono::Duration::hours(self.0)
    }

    /// 0 = Monday, 6 = Sunday.
    pub fn weekday(self) -> usize {
        // 1970-01-01 was a Thursday.
        (self.0.div_euclid(24) + 3).rem_euclid(7) as usize
    }

    pub fn hour_of_day(self) -> usize {
        self.0.rem_euclid(24) as usize
    }

    /// Monday 00:00 = 0 … Sunday 23:00 = 167.
    pub fn hour_of_week(self) -> usize {
        self.weekday() * 24 + self.hour_of_day()
    }

    pub fn plus(self, hours: i64) -> Hour {
        Hour(self.0 + hours)
    }

    pub fn hours_since(self, earlier: Hour) -> i64 {
        self.0 - earlier.0
    }
}

impl fmt::Display for Hour {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = self.to_datetime();
        write!(
            f,
            "{:04}-{:02}-{:02}T{:02}:00",
            t.year(),
            t.month(),
            t.day(),
            t.hour()
        )
    }
}

impl Serialize for Hour {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Hour {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Hour::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Half-open hour interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: Hour,
    pub end: Hour,
}

impl Span {
    pub fn new(start: Hour, end: Hour) -> Self {
        Span { start, end }
    }

    pub fn hours(&self) -> i64 {
        self.end.0 - self.start.0
    }

    pub fn contains(&self, h: Hour) -> bool {
        h >= self.start && h < self.end
    }

    pub fn overlap(&self, other: &Span) -> i64 {
        (self.end.min(other.end).0 - self.start.max(other.start).0).max(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = Hour> {
        (self.start.0..self.end.0).map(Hour)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weekday_of_known_dates() {
        // 2022-08-22 was a Monday.
        let h = Hour::parse("2022-08-22T08:00").unwrap();
        assert_eq!(h.weekday(), 0);
        assert_eq!(h.hour_of_week(), 8);
        let sat = Hour::parse("2022-08-27T08:00").unwrap();
        assert_eq!(sat.hour_of_week(), 5 * 24 + 8);
    }

    #[test]
    fn display_round_trips() {
        let h = Hour::parse("2022-02-02T16:00").unwrap();
        assert_eq!(h.to_string(), "2022-02-02T16:00");
        assert_eq!(Hour::parse(&h.to_string()).unwrap(), h);
    }

    #[test]
    fn floor_and_ceil() {
        let t = parse_local("2022-02-02T16:20").unwrap();
        assert_eq!(Hour::floor(&t).to_string(), "2022-02-02T16:00");
        assert_eq!(Hour::ceil(&t).to_string(), "2022-02-02T17:00");
        let on = parse_local("2022-02-02T16:00").unwrap();
        assert_eq!(Hour::ceil(&on), Hour::floor(&on));
        assert!(Hour::exact(&t).is_err());
    }

    #[test]
    fn pre_epoch_hours() {
        let h = Hour::parse("1969-12-31T23:00").unwrap();
        assert_eq!(h.0, -1);
        assert_eq!(h.hour_of_day(), 23);
        assert_eq!(h.weekday(), 2);
    }
}
