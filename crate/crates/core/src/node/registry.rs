use std::collections::BTreeMap;

use crate::protocol::{LoadReport, PlacementDecision};

/// A worker is unhealthy once this many heartbeat intervals pass without
/// a report.
pub const MISSED_HEARTBEATS: u64 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerEntry {
    pub id: String,
    pub address: String,
    pub load: Option<LoadReport>,
    pub last_seen_ms: u64,
    /// Set when a frame from this worker failed authentication.
    pub compromised: bool,
    /// Executor inside the master process; never times out.
    pub local: bool,
}

#[derive(Debug, Clone)]
pub struct WorkerRegistry {
    entries: BTreeMap<String, WorkerEntry>,
    heartbeat_interval_ms: u64,
}

impl WorkerRegistry {
    pub fn new(heartbeat_interval_ms: u64) -> Self {
        WorkerRegistry { entries: BTreeMap::new(), heartbeat_interval_ms }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&WorkerEntry> {
        self.entries.get(id)
    }

    /// (Re-)registration clears any earlier compromise flag.
    pub fn register(&mut self, id: &str, address: &str, now_ms: u64, local: bool) {
        let last_seen_ms = self.entries.get(id).map_or(now_ms, |e| e.last_seen_ms.max(now_ms));
        self.entries.insert(
            id.to_string(),
            WorkerEntry { id: id.to_string(), address: address.to_string(), load: None, last_seen_ms, compromised: false, local },
        );
    }

    /// Returns false for unknown workers.
    pub fn touch(&mut self, id: &str, now_ms: u64) -> bool {
        match self.entries.get_mut(id) {
            Some(e) => {
                e.last_seen_ms = e.last_seen_ms.max(now_ms);
                true
            }
            None => false,
        }
    }

    pub fn report(&mut self, id: &str, load: LoadReport, now_ms: u64) -> bool {
        if !self.touch(id, now_ms) {
            return false;
        }
        self.entries.get_mut(id).expect("touched above").load = Some(load);
        true
    }

    pub fn mark_compromised(&mut self, id: &str) {
        if let Some(e) = self.entries.get_mut(id) {
            e.compromised = true;
        }
    }

    pub fn is_healthy(&self, e: &WorkerEntry, now_ms: u64) -> bool {
        if e.compromised {
            return false;
        }
        e.local || now_ms.saturating_sub(e.last_seen_ms) <= MISSED_HEARTBEATS * self.heartbeat_interval_ms
    }

    pub fn healthy_ids(&self, now_ms: u64) -> Vec<String> {
        self.entries.values().filter(|e| self.is_healthy(e, now_ms)).map(|e| e.id.clone()).collect()
    }

    pub fn snapshot(&self, now_ms: u64, master_id: &str, master_address: &str) -> Snapshot {
        Snapshot {
            master_id: master_id.to_string(),
            master_address: master_address.to_string(),
            workers: self
                .entries
                .values()
                .map(|e| WorkerView {
                    id: e.id.clone(),
                    address: e.address.clone(),
                    cpu_load: e.load.map(|l| l.cpu_load),
                    healthy: self.is_healthy(e, now_ms),
                    local: e.local,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerView {
    pub id: String,
    pub address: String,
    /// None until the worker has reported once.
    pub cpu_load: Option<f64>,
    pub healthy: bool,
    pub local: bool,
}

/// Immutable registry view that arbitration works from.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub master_id: String,
    pub master_address: String,
    pub workers: Vec<WorkerView>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub decision: PlacementDecision,
    pub target_id: String,
    pub target_address: String,
    pub via_cloud: bool,
}

/// Least-loaded healthy worker under `threshold` (ties to the smallest id),
/// else cloud forwarding through the master if enabled, else the master.
pub fn arbitrate(snap: &Snapshot, threshold: f64, cloud_enabled: bool) -> Placement {
    let best = snap
        .workers
        .iter()
        .filter(|w| w.healthy)
        .filter_map(|w| w.cpu_load.filter(|&l| l < threshold).map(|l| (l, w)))
        .min_by(|(la, a), (lb, b)| la.total_cmp(lb).then_with(|| a.id.cmp(&b.id)));
    match best {
        Some((_, w)) => Placement {
            decision: PlacementDecision::Worker,
            target_id: w.id.clone(),
            target_address: w.address.clone(),
            via_cloud: false,
        },
        None => Placement {
            decision: if cloud_enabled { PlacementDecision::Cloud } else { PlacementDecision::BrokerSelf },
            target_id: snap.master_id.clone(),
            target_address: snap.master_address.clone(),
            via_cloud: cloud_enabled,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn view(id: &str, load: f64) -> WorkerView {
        WorkerView { id: id.into(), address: format!("{id}:1"), cpu_load: Some(load), healthy: true, local: false }
    }

    fn snap(workers: Vec<WorkerView>) -> Snapshot {
        Snapshot { master_id: "m".into(), master_address: "m:1".into(), workers }
    }

    #[test]
    fn least_loaded_worker_wins() {
        let s = snap(vec![view("w1", 0.3), view("w2", 0.7), view("w3", 0.5)]);
        let p = arbitrate(&s, 0.8, false);
        assert_eq!((p.decision, p.target_id.as_str()), (PlacementDecision::Worker, "w1"));
        let tie = snap(vec![view("w2", 0.3), view("w1", 0.3)]);
        assert_eq!(arbitrate(&tie, 0.8, false).target_id, "w1");
    }

    #[test]
    fn overloaded_cluster_falls_back() {
        let s = snap(vec![view("w1", 0.8), view("w2", 0.95)]);
        let p = arbitrate(&s, 0.8, false);
        assert_eq!((p.decision, p.via_cloud, p.target_id.as_str()), (PlacementDecision::BrokerSelf, false, "m"));
        let p = arbitrate(&s, 0.8, true);
        assert_eq!((p.decision, p.via_cloud), (PlacementDecision::Cloud, true));
        assert_eq!(arbitrate(&snap(vec![]), 0.8, false).decision, PlacementDecision::BrokerSelf);
    }

    #[test]
    fn health_flips_after_three_missed_intervals() {
        let mut r = WorkerRegistry::new(500);
        r.register("w1", "a", 1_000, false);
        let at = |r: &WorkerRegistry, now| r.is_healthy(r.get("w1").unwrap(), now);
        assert!(at(&r, 2_500));
        assert!(!at(&r, 2_501));
        assert!(r.report("w1", LoadReport { cpu_load: 0.1, mem_load: 0.1, queue_length: 0, taken_at: 0 }, 2_400));
        assert!(at(&r, 3_900));
        assert!(!at(&r, 3_901));
        // an older timestamp never moves last_seen backwards
        r.touch("w1", 10);
        assert_eq!(r.get("w1").unwrap().last_seen_ms, 2_400);
        assert!(!r.touch("ghost", 0));
    }

    #[test]
    fn compromised_workers_are_skipped() {
        let mut r = WorkerRegistry::new(500);
        r.register("w1", "a", 0, false);
        r.report("w1", LoadReport { cpu_load: 0.1, mem_load: 0.0, queue_length: 0, taken_at: 0 }, 0);
        r.mark_compromised("w1");
        assert_eq!(arbitrate(&r.snapshot(0, "m", "m:1"), 0.8, false).decision, PlacementDecision::BrokerSelf);
        r.register("w1", "a", 0, false);
        assert!(r.healthy_ids(0).contains(&"w1".to_string()));
    }

    fn arb_view() -> impl Strategy<Value = WorkerView> {
        ("w[0-9]{1,2}", prop::option::of(0.0f64..=1.0), any::<bool>()).prop_map(|(id, cpu_load, healthy)| WorkerView {
            address: format!("{id}:9"),
            id,
            cpu_load,
            healthy,
            local: false,
        })
    }

    proptest! {
        #[test]
        fn arbitration_is_a_pure_safe_choice(
            workers in prop::collection::vec(arb_view(), 0..8),
            threshold in 0.05f64..=1.0,
            cloud in any::<bool>(),
        ) {
            let mut workers = workers;
            workers.sort_by(|a, b| a.id.cmp(&b.id));
            workers.dedup_by(|a, b| a.id == b.id);
            let s = snap(workers);
            let p = arbitrate(&s, threshold, cloud);
            prop_assert_eq!(&p, &arbitrate(&s.clone(), threshold, cloud));
            if p.decision == PlacementDecision::Worker {
                let chosen = s.workers.iter().find(|w| w.id == p.target_id).unwrap();
                prop_assert!(chosen.healthy);
                let load = chosen.cpu_load.unwrap();
                prop_assert!(load < threshold);
                for w in s.workers.iter().filter(|w| w.healthy) {
                    if let Some(l) = w.cpu_load {
                        prop_assert!(l >= load || l >= threshold);
                    }
                }
            } else {
                prop_assert!(s.workers.iter().all(|w| !w.healthy || w.cpu_load.is_none_or(|l| l >= threshold)));
                prop_assert_eq!(p.via_cloud, cloud);
            }
        }
    }
}
