use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

/// Source of timestamps written into logs and manifests. A fixed clock makes
/// artifacts byte-reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Clock {
    #[default]
    System,
    /// Seconds since the Unix epoch.
    Fixed(i64),
}

impl Clock {
    /// `SOURCE_DATE_EPOCH` pins the clock when set.
    pub fn from_env() -> Self {
        std::env::var("SOURCE_DATE_EPOCH")
            .ok()
            .and_then(|s| s.trim().parse().ok())
            .map(Clock::Fixed)
            .unwrap_or(Clock::System)
    }

    pub fn now(&self) -> String {
        let t = match self {
            Clock::System => Utc::now(),
            Clock::Fixed(secs) => DateTime::from_timestamp(*secs, 0).unwrap_or_default(),
        };
        t.to_rfc3339_opts(SecondsFormat::Millis, true)
    }
}
