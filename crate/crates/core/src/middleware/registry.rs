use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::MwError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Tx,
    Rx,
    Observer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lease {
    pub node_id: String,
    pub lease_id: u64,
    pub role: Role,
    pub endpoint: String,
    pub granted_t_ns: i64,
    pub expiry_t_ns: i64,
}

/// Controller registration with time-bounded leases. At most one live lease
/// per node id; re-registering supersedes the old lease.
#[derive(Debug, Clone)]
pub struct Registry {
    ttl_ns: i64,
    next_id: u64,
    leases: BTreeMap<String, Lease>,
}

impl Registry {
    pub fn new(ttl_ns: i64) -> Self {
        assert!(ttl_ns > 0, "lease ttl must be positive");
        Self { ttl_ns, next_id: 1, leases: BTreeMap::new() }
    }

    pub fn register(&mut self, node_id: &str, role: Role, endpoint: &str, now_ns: i64) -> Lease {
        let lease = Lease {
            node_id: node_id.to_string(),
            lease_id: self.next_id,
            role,
            endpoint: endpoint.to_string(),
            granted_t_ns: now_ns,
            expiry_t_ns: now_ns + self.ttl_ns,
        };
        self.next_id += 1;
        self.leases.insert(node_id.to_string(), lease.clone());
        lease
    }

    pub fn renew(&mut self, node_id: &str, lease_id: u64, now_ns: i64) -> Result<Lease, MwError> {
        match self.leases.get_mut(node_id) {
            Some(l) if l.lease_id == lease_id && l.expiry_t_ns > now_ns => {
                l.expiry_t_ns = now_ns + self.ttl_ns;
                Ok(l.clone())
            }
            _ => Err(MwError::LeaseExpired(node_id.to_string())),
        }
    }

    /// Endpoints of live leases holding `role`, ordered by node id.
    pub fn lookup(&self, role: Role, now_ns: i64) -> Vec<String> {
        self.leases.values().filter(|l| l.role == role && l.expiry_t_ns > now_ns).map(|l| l.endpoint.clone()).collect()
    }

    pub fn live(&self, now_ns: i64) -> Vec<Lease> {
        self.leases.values().filter(|l| l.expiry_t_ns > now_ns).cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const S: i64 = 1_000_000_000;

    #[test]
    fn register_lookup_expire() {
        let mut r = Registry::new(5 * S);
        r.register("rx-1", Role::Rx, "sim://rx-1", 0);
        assert_eq!(r.lookup(Role::Rx, S), vec!["sim://rx-1".to_string()]);
        assert!(r.lookup(Role::Tx, S).is_empty());
        assert!(r.lookup(Role::Rx, 5 * S + 1).is_empty());
    }

    #[test]
    fn renew_extends_and_expired_renew_fails() {
        let mut r = Registry::new(5 * S);
        let l = r.register("tx-1", Role::Tx, "a", 0);
        let l2 = r.renew("tx-1", l.lease_id, 4 * S).unwrap();
        assert_eq!(l2.expiry_t_ns, 9 * S);
        assert_eq!(r.lookup(Role::Tx, 8 * S).len(), 1);
        assert!(matches!(r.renew("tx-1", l.lease_id, 10 * S), Err(MwError::LeaseExpired(_))));
    }

    #[test]
    fn reregister_supersedes() {
        let mut r = Registry::new(5 * S);
        let old = r.register("rx-1", Role::Rx, "a", 0);
        let new = r.register("rx-1", Role::Rx, "b", S);
        assert_ne!(old.lease_id, new.lease_id);
        assert_eq!(r.live(S).len(), 1);
        assert_eq!(r.lookup(Role::Rx, S), vec!["b".to_string()]);
        assert!(r.renew("rx-1", old.lease_id, 2 * S).is_err());
    }
}
