use serde::{Deserialize, Serialize};

use super::MwError;

/// One request/response exchange: client send, server receive, server send,
/// client receive. Client stamps use the client clock, server stamps the
/// server clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncSample {
    pub t1: i64,
    pub t2: i64,
    pub t3: i64,
    pub t4: i64,
}

/// Returns `(offset_ns, delay_ns)`, where `offset` is server clock minus
/// client clock.
pub fn sync_offset(s: &SyncSample) -> Result<(i64, i64), MwError> {
    let delay = (s.t4 - s.t1) - (s.t3 - s.t2);
    if delay < 0 || s.t3 < s.t2 || s.t4 < s.t1 {
        return Err(MwError::NegativeDelay);
    }
    // exact halving of the summed legs; floor keeps it deterministic for odd sums
    let offset = ((s.t2 - s.t1) + (s.t3 - s.t4)).div_euclid(2);
    Ok((offset, delay))
}

/// Minimum-delay filter over a window of samples.
pub fn best_of(samples: &[SyncSample]) -> Option<(i64, i64)> {
    samples.iter().filter_map(|s| sync_offset(s).ok()).min_by_key(|&(_, delay)| delay)
}
