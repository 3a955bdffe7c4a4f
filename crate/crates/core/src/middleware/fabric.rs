use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Addr;
use crate::rng::SimRng;

/// Per-hop delay, uniform on `[mean - jitter, mean + jitter]` milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    pub mean_ms: f64,
    pub jitter_ms: f64,
}

impl Latency {
    pub const fn new(mean_ms: f64, jitter_ms: f64) -> Self {
        Self { mean_ms, jitter_ms }
    }

    pub fn sample_ns(&self, rng: &mut SimRng) -> i64 {
        let j = self.jitter_ms.max(0.0);
        let ms = if j > 0.0 { rng.gen_range(self.mean_ms - j..=self.mean_ms + j) } else { self.mean_ms };
        (ms.max(0.0) * 1e6).round() as i64
    }
}

/// In-process message fabric. Links touching a client use the client hop,
/// everything else the intra-cluster hop.
#[derive(Debug, Clone)]
pub struct Fabric {
    pub client_hop: Latency,
    pub cluster_hop: Latency,
    rng: SimRng,
}

impl Fabric {
    pub fn new(client_hop: Latency, cluster_hop: Latency, rng: SimRng) -> Self {
        Self { client_hop, cluster_hop, rng }
    }

    pub fn delay_ns(&mut self, from: Addr, to: Addr) -> i64 {
        let link = match (from, to) {
            (Addr::Client(_), _) | (_, Addr::Client(_)) => self.client_hop,
            _ => self.cluster_hop,
        };
        link.sample_ns(&mut self.rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn latency_bounds() {
        let mut rng = SimRng::seed_from_u64(1);
        let l = Latency::new(2.0, 0.5);
        for _ in 0..1000 {
            let d = l.sample_ns(&mut rng);
            assert!((1_500_000..=2_500_000).contains(&d));
        }
        assert_eq!(Latency::new(1.0, 0.0).sample_ns(&mut rng), 1_000_000);
    }
}
