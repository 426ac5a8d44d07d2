//! All-Reduce over in-process virtual workers and the alpha-beta cost model
//! for the same algorithms.
//!
//! Numeric reductions run in a fixed order per algorithm so repeated calls
//! are bit-identical. Cost functions assume the `P` participants occupy the
//! first `P` device slots of the topology (node-major, rack-major).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DenseVector;

/// Rack / node / device hierarchy with per-level link parameters.
/// Bandwidths are bytes per second, latencies seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    pub racks: usize,
    pub nodes_per_rack: usize,
    pub devices_per_node: usize,
    pub intra_node_bw: f64,
    pub inter_node_bw: f64,
    pub inter_rack_bw: f64,
    pub intra_node_lat: f64,
    pub inter_node_lat: f64,
    pub inter_rack_lat: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LinkClass {
    IntraNode,
    InterNode,
    InterRack,
}

impl Topology {
    /// Uniform links everywhere; mostly for tests.
    pub fn flat(devices: usize, bw: f64, lat: f64) -> Self {
        Self {
            racks: 1,
            nodes_per_rack: 1,
            devices_per_node: devices,
            intra_node_bw: bw,
            inter_node_bw: bw,
            inter_rack_bw: bw,
            intra_node_lat: lat,
            inter_node_lat: lat,
            inter_rack_lat: lat,
        }
    }

    pub fn total_devices(&self) -> usize {
        self.racks * self.nodes_per_rack * self.devices_per_node
    }

    pub fn devices_per_rack(&self) -> usize {
        self.nodes_per_rack * self.devices_per_node
    }

    pub fn validate(&self) -> Result<()> {
        for (name, n) in [
            ("racks", self.racks),
            ("nodes_per_rack", self.nodes_per_rack),
            ("devices_per_node", self.devices_per_node),
        ] {
            if n == 0 {
                return Err(Error::InvalidArgument(format!("topology.{name} must be >= 1")));
            }
        }
        for (name, bw) in [
            ("intra_node_bw", self.intra_node_bw),
            ("inter_node_bw", self.inter_node_bw),
            ("inter_rack_bw", self.inter_rack_bw),
        ] {
            if !(bw.is_finite() && bw > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "topology.{name} must be a positive bandwidth, got {bw}"
                )));
            }
        }
        for (name, lat) in [
            ("intra_node_lat", self.intra_node_lat),
            ("inter_node_lat", self.inter_node_lat),
            ("inter_rack_lat", self.inter_rack_lat),
        ] {
            if !(lat.is_finite() && lat >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "topology.{name} must be a non-negative latency, got {lat}"
                )));
            }
        }
        Ok(())
    }

    /// `(bandwidth, latency)` of a link class.
    pub fn link(&self, class: LinkClass) -> (f64, f64) {
        match class {
            LinkClass::IntraNode => (self.intra_node_bw, self.intra_node_lat),
            LinkClass::InterNode => (self.inter_node_bw, self.inter_node_lat),
            LinkClass::InterRack => (self.inter_rack_bw, self.inter_rack_lat),
        }
    }

    pub fn node_of(&self, device: usize) -> usize {
        device / self.devices_per_node
    }

    pub fn rack_of(&self, device: usize) -> usize {
        device / self.devices_per_rack()
    }

    /// Slowest link class crossed by a set of devices.
    pub fn span_class(&self, devices: &[usize]) -> LinkClass {
        let Some(&first) = devices.first() else {
            return LinkClass::IntraNode;
        };
        if devices.iter().any(|&d| self.rack_of(d) != self.rack_of(first)) {
            LinkClass::InterRack
        } else if devices.iter().any(|&d| self.node_of(d) != self.node_of(first)) {
            LinkClass::InterNode
        } else {
            LinkClass::IntraNode
        }
    }

    /// Slowest link class when `p` devices occupy the first `p` slots.
    pub fn contiguous_class(&self, p: usize) -> LinkClass {
        if p <= self.devices_per_node {
            LinkClass::IntraNode
        } else if p <= self.devices_per_rack() {
            LinkClass::InterNode
        } else {
            LinkClass::InterRack
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CollectiveAlgorithm {
    Naive,
    #[default]
    Ring,
    Hierarchical,
    PipelinedRing,
}

impl CollectiveAlgorithm {
    pub const ALL: [CollectiveAlgorithm; 4] = [
        CollectiveAlgorithm::Naive,
        CollectiveAlgorithm::Ring,
        CollectiveAlgorithm::Hierarchical,
        CollectiveAlgorithm::PipelinedRing,
    ];
}

/// Placement of virtual workers for hierarchical reduction: worker `p` sits
/// on node `p / devices_per_node`, rack `node / nodes_per_rack`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupLayout {
    pub devices_per_node: usize,
    pub nodes_per_rack: usize,
}

/// Per-worker gradient buffers taking part in one reduction.
#[derive(Debug, Clone)]
pub struct WorkerGroup {
    buffers: Vec<DenseVector>,
    layout: GroupLayout,
}

impl WorkerGroup {
    /// All workers on one node.
    pub fn new(buffers: Vec<DenseVector>) -> Result<Self> {
        let p = buffers.len();
        Self::with_layout(
            buffers,
            GroupLayout {
                devices_per_node: p.max(1),
                nodes_per_rack: 1,
            },
        )
    }

    pub fn with_layout(buffers: Vec<DenseVector>, layout: GroupLayout) -> Result<Self> {
        let first = buffers
            .first()
            .ok_or(Error::Empty("worker group needs at least one worker"))?;
        let dim = first.dim();
        for b in &buffers {
            b.ensure_dim(dim)?;
        }
        if layout.devices_per_node == 0 || layout.nodes_per_rack == 0 {
            return Err(Error::InvalidArgument("group layout counts must be >= 1".into()));
        }
        Ok(Self { buffers, layout })
    }

    pub fn workers(&self) -> usize {
        self.buffers.len()
    }

    pub fn dim(&self) -> usize {
        self.buffers[0].dim()
    }

    pub fn buffers(&self) -> &[DenseVector] {
        &self.buffers
    }

    pub fn layout(&self) -> GroupLayout {
        self.layout
    }
}

/// Segment length used by the pipelined ring.
const PIPELINE_SEGMENT: usize = 256;

/// Arithmetic mean of every worker buffer, reduced in the algorithm's order.
pub fn allreduce_mean(group: &WorkerGroup, algo: CollectiveAlgorithm) -> Result<DenseVector> {
    let p = group.workers() as f64;
    let mut sum = allreduce_sum(group, algo)?;
    for x in &mut sum {
        *x /= p;
    }
    DenseVector::new(sum)
}

/// Elementwise sum of every worker buffer, reduced in the algorithm's order.
pub fn allreduce_sum(group: &WorkerGroup, algo: CollectiveAlgorithm) -> Result<Vec<f64>> {
    let out = match algo {
        CollectiveAlgorithm::Naive => fold(group.buffers.iter().map(|b| b.as_slice()), group.dim()),
        CollectiveAlgorithm::Ring => ring_sum(&group.buffers, 0, group.dim()),
        CollectiveAlgorithm::PipelinedRing => {
            let dim = group.dim();
            let mut out = Vec::with_capacity(dim);
            let mut start = 0;
            while start < dim {
                let end = (start + PIPELINE_SEGMENT).min(dim);
                out.extend(ring_sum(&group.buffers, start, end));
                start = end;
            }
            out
        }
        CollectiveAlgorithm::Hierarchical => hierarchical_sum(group),
    };
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("allreduce"));
    }
    Ok(out)
}

fn fold<'a>(parts: impl Iterator<Item = &'a [f64]>, dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    for (n, part) in parts.enumerate() {
        if n == 0 {
            acc.copy_from_slice(part);
        } else {
            for (a, x) in acc.iter_mut().zip(part) {
                *a += x;
            }
        }
    }
    acc
}

/// Ring reduce-scatter followed by ring all-gather over `[start, end)` of
/// every buffer. In reduce-scatter step `s`, worker `i` passes chunk
/// `(i - s) mod P` to worker `i + 1`, which accumulates it.
fn ring_sum(buffers: &[DenseVector], start: usize, end: usize) -> Vec<f64> {
    let p = buffers.len();
    let len = end - start;
    let mut local: Vec<Vec<f64>> = buffers
        .iter()
        .map(|b| b.as_slice()[start..end].to_vec())
        .collect();
    if p == 1 {
        return local.pop().unwrap();
    }
    let bound = |c: usize| c * len / p;
    let chunk = |c: usize| bound(c)..bound(c + 1);

    for step in 0..p - 1 {
        let sends: Vec<(usize, usize, Vec<f64>)> = (0..p)
            .map(|i| {
                let c = (i + p - step % p) % p;
                ((i + 1) % p, c, local[i][chunk(c)].to_vec())
            })
            .collect();
        for (dst, c, data) in sends {
            for (a, x) in local[dst][chunk(c)].iter_mut().zip(&data) {
                *a += x;
            }
        }
    }
    // worker i now owns the reduced chunk (i + 1) mod P
    for step in 0..p - 1 {
        let sends: Vec<(usize, usize, Vec<f64>)> = (0..p)
            .map(|i| {
                let c = (i + 1 + p - step % p) % p;
                ((i + 1) % p, c, local[i][chunk(c)].to_vec())
            })
            .collect();
        for (dst, c, data) in sends {
            local[dst][chunk(c)].copy_from_slice(&data);
        }
    }
    debug_assert!(local.windows(2).all(|w| w[0] == w[1]));
    local.swap_remove(0)
}

fn hierarchical_sum(group: &WorkerGroup) -> Vec<f64> {
    let dim = group.dim();
    let per_node = group.layout.devices_per_node;
    let node_sums: Vec<Vec<f64>> = group
        .buffers
        .chunks(per_node)
        .map(|node| fold(node.iter().map(|b| b.as_slice()), dim))
        .collect();
    let rack_sums: Vec<Vec<f64>> = node_sums
        .chunks(group.layout.nodes_per_rack)
        .map(|rack| fold(rack.iter().map(|v| v.as_slice()), dim))
        .collect();
    fold(rack_sums.iter().map(|v| v.as_slice()), dim)
}

fn ring_time(p: usize, msg_bytes: f64, bw: f64, lat: f64) -> f64 {
    if p <= 1 {
        return 0.0;
    }
    let steps = (p - 1) as f64;
    2.0 * steps * lat + 2.0 * (steps / p as f64) * msg_bytes / bw
}

/// Modeled seconds for one All-Reduce of `msg_bytes` over `p` devices placed
/// contiguously in `topo`.
///
/// * naive: gather to a root and broadcast back, `2 (P-1) (lat + m/bw)`.
/// * ring / pipelined ring: `2 (P-1) lat + 2 (P-1)/P m/bw` on the slowest link.
/// * hierarchical: ring within each node, then across the nodes of a rack,
///   then across racks, each phase on `m` bytes with its own link class.
///
/// Overlap for the pipelined ring is applied by the simulator, not here.
pub fn comm_cost(
    algo: CollectiveAlgorithm,
    msg_bytes: f64,
    p: usize,
    topo: &Topology,
) -> Result<f64> {
    if p == 0 {
        return Err(Error::InvalidArgument("collective over zero devices".into()));
    }
    if p > topo.total_devices() {
        return Err(Error::Infeasible(format!(
            "{p} devices requested but topology has {}",
            topo.total_devices()
        )));
    }
    let devices: Vec<usize> = (0..p).collect();
    comm_cost_placed(algo, msg_bytes, &devices, topo)
}

/// [`comm_cost`] for an explicit set of device slots.
pub fn comm_cost_placed(
    algo: CollectiveAlgorithm,
    msg_bytes: f64,
    devices: &[usize],
    topo: &Topology,
) -> Result<f64> {
    topo.validate()?;
    if !(msg_bytes.is_finite() && msg_bytes >= 0.0) {
        return Err(Error::InvalidArgument(format!("message size {msg_bytes}")));
    }
    if devices.is_empty() {
        return Err(Error::InvalidArgument("collective over zero devices".into()));
    }
    if let Some(&d) = devices.iter().find(|&&d| d >= topo.total_devices()) {
        return Err(Error::Infeasible(format!(
            "device slot {d} outside a topology of {}",
            topo.total_devices()
        )));
    }
    let p = devices.len();
    if p == 1 {
        return Ok(0.0);
    }
    let (bw, lat) = topo.link(topo.span_class(devices));
    Ok(match algo {
        CollectiveAlgorithm::Naive => 2.0 * (p - 1) as f64 * (lat + msg_bytes / bw),
        CollectiveAlgorithm::Ring | CollectiveAlgorithm::PipelinedRing => {
            ring_time(p, msg_bytes, bw, lat)
        }
        CollectiveAlgorithm::Hierarchical => {
            let mut per_node: BTreeMap<usize, usize> = BTreeMap::new();
            for &d in devices {
                *per_node.entry(topo.node_of(d)).or_default() += 1;
            }
            let mut per_rack: BTreeMap<usize, usize> = BTreeMap::new();
            for &node in per_node.keys() {
                *per_rack.entry(node / topo.nodes_per_rack).or_default() += 1;
            }
            let in_node = per_node.values().copied().max().unwrap_or(1);
            let in_rack = per_rack.values().copied().max().unwrap_or(1);
            let (bi, li) = topo.link(LinkClass::IntraNode);
            let (bn, ln) = topo.link(LinkClass::InterNode);
            let (br, lr) = topo.link(LinkClass::InterRack);
            ring_time(in_node, msg_bytes, bi, li)
                + ring_time(in_rack, msg_bytes, bn, ln)
                + ring_time(per_rack.len(), msg_bytes, br, lr)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> DenseVector {
        DenseVector::new(x.to_vec()).unwrap()
    }

    fn brute_mean(bufs: &[DenseVector]) -> Vec<f64> {
        let dim = bufs[0].dim();
        (0..dim)
            .map(|i| bufs.iter().map(|b| b[i]).sum::<f64>() / bufs.len() as f64)
            .collect()
    }

    #[test]
    fn mean_examples() {
        let g = WorkerGroup::new(vec![v(&[1.0, 3.0]), v(&[3.0, 5.0])]).unwrap();
        for algo in CollectiveAlgorithm::ALL {
            assert_eq!(allreduce_mean(&g, algo).unwrap(), v(&[2.0, 4.0]), "{algo:?}");
        }
        let single = WorkerGroup::new(vec![v(&[0.1, -7.25, 3.3])]).unwrap();
        for algo in CollectiveAlgorithm::ALL {
            assert_eq!(allreduce_mean(&single, algo).unwrap(), v(&[0.1, -7.25, 3.3]));
        }
        let same = WorkerGroup::new(vec![v(&[0.5, -2.0, 8.0]); 4]).unwrap();
        for algo in CollectiveAlgorithm::ALL {
            assert_eq!(allreduce_mean(&same, algo).unwrap(), v(&[0.5, -2.0, 8.0]));
        }
    }

    #[test]
    fn mismatched_dims_rejected() {
        let err = WorkerGroup::new(vec![v(&[1.0]), v(&[1.0, 2.0])]).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
        assert!(WorkerGroup::new(vec![]).is_err());
    }

    #[test]
    fn hierarchical_layout_matches_mean() {
        let mut rng = SeededRng::new(3);
        let bufs: Vec<_> = (0..12)
            .map(|_| DenseVector::new((0..37).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap())
            .collect();
        let expected = brute_mean(&bufs);
        let g = WorkerGroup::with_layout(
            bufs,
            GroupLayout {
                devices_per_node: 3,
                nodes_per_rack: 2,
            },
        )
        .unwrap();
        let got = allreduce_mean(&g, CollectiveAlgorithm::Hierarchical).unwrap();
        for (a, b) in got.as_slice().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn ring_handles_dim_smaller_than_workers() {
        let bufs: Vec<_> = (0..5).map(|i| v(&[i as f64, 1.0])).collect();
        let g = WorkerGroup::new(bufs).unwrap();
        assert_eq!(allreduce_mean(&g, CollectiveAlgorithm::Ring).unwrap(), v(&[2.0, 1.0]));
    }

    #[test]
    fn cost_single_device_is_free() {
        let topo = Topology::flat(4, 12.5e9, 1e-6);
        for algo in CollectiveAlgorithm::ALL {
            assert_eq!(comm_cost(algo, 1e9, 1, &topo).unwrap(), 0.0);
        }
    }

    #[test]
    fn ring_cost_example() {
        let topo = Topology::flat(4, 12.5e9, 1e-6);
        let t = comm_cost(CollectiveAlgorithm::Ring, (1u64 << 30) as f64, 4, &topo).unwrap();
        let expected = 2.0 * 3.0 * 1e-6 + 1.5 * (1u64 << 30) as f64 / 12.5e9;
        assert!((t - expected).abs() < 1e-15);
        assert!((t - 0.1289).abs() < 1e-4);
    }

    #[test]
    fn naive_traffic_grows_linearly_ring_stays_bounded() {
        // Per-worker bytes: naive root moves 2 (P-1) m, ring moves 2 (P-1)/P m.
        let m = 1e8;
        let topo = Topology::flat(16, 1e10, 0.0);
        let mut last_ratio = 0.0;
        for p in [2usize, 4, 8, 16] {
            let naive = comm_cost(CollectiveAlgorithm::Naive, m, p, &topo).unwrap();
            let ring = comm_cost(CollectiveAlgorithm::Ring, m, p, &topo).unwrap();
            let pf = p as f64;
            assert!((naive - 2.0 * (pf - 1.0) * m / 1e10).abs() < 1e-12);
            assert!(ring <= 2.0 * m / 1e10);
            let ratio = naive / ring;
            assert!((ratio - pf).abs() < 1e-9);
            assert!(ratio > last_ratio);
            last_ratio = ratio;
        }
    }

    #[test]
    fn hierarchical_beats_flat_ring_on_slow_uplinks() {
        let topo = Topology {
            racks: 8,
            nodes_per_rack: 1,
            devices_per_node: 8,
            intra_node_bw: 300e9,
            inter_node_bw: 12.5e9,
            inter_rack_bw: 12.5e9,
            intra_node_lat: 1e-6,
            inter_node_lat: 1e-6,
            inter_rack_lat: 1e-6,
        };
        let m = 4e8;
        let flat = comm_cost(CollectiveAlgorithm::Ring, m, 64, &topo).unwrap();
        let hier = comm_cost(CollectiveAlgorithm::Hierarchical, m, 64, &topo).unwrap();
        assert!(hier < flat, "hier {hier} flat {flat}");
    }

    #[test]
    fn placed_cost_uses_member_spread() {
        let topo = Topology {
            racks: 2,
            nodes_per_rack: 2,
            devices_per_node: 4,
            intra_node_bw: 100e9,
            inter_node_bw: 10e9,
            inter_rack_bw: 5e9,
            intra_node_lat: 0.0,
            inter_node_lat: 0.0,
            inter_rack_lat: 0.0,
        };
        let m = 1e9;
        // one device per node across both racks: no intra-node phase
        let strided = comm_cost_placed(CollectiveAlgorithm::Hierarchical, m, &[0, 4, 8, 12], &topo)
            .unwrap();
        let expected = ring_time(2, m, 10e9, 0.0) + ring_time(2, m, 5e9, 0.0);
        assert!((strided - expected).abs() < 1e-12);
        let ring = comm_cost_placed(CollectiveAlgorithm::Ring, m, &[0, 4], &topo).unwrap();
        assert!((ring - ring_time(2, m, 10e9, 0.0)).abs() < 1e-12);
        assert_eq!(
            comm_cost(CollectiveAlgorithm::Hierarchical, m, 16, &topo).unwrap(),
            ring_time(4, m, 100e9, 0.0) + ring_time(2, m, 10e9, 0.0) + ring_time(2, m, 5e9, 0.0)
        );
    }

    #[test]
    fn cost_errors() {
        let mut topo = Topology::flat(4, 1e9, 0.0);
        assert!(matches!(
            comm_cost(CollectiveAlgorithm::Ring, 1.0, 8, &topo),
            Err(Error::Infeasible(_))
        ));
        topo.inter_node_bw = 0.0;
        assert!(comm_cost(CollectiveAlgorithm::Ring, 1.0, 2, &topo).is_err());
    }

    #[test]
    fn span_class_by_placement() {
        let topo = Topology {
            racks: 2,
            nodes_per_rack: 2,
            devices_per_node: 4,
            ..Topology::flat(4, 1e9, 0.0)
        };
        assert_eq!(topo.span_class(&[0, 3]), LinkClass::IntraNode);
        assert_eq!(topo.span_class(&[0, 4]), LinkClass::InterNode);
        assert_eq!(topo.span_class(&[0, 8]), LinkClass::InterRack);
    }

    fn random_group(rng: &mut SeededRng, p: usize, dim: usize) -> Vec<DenseVector> {
        (0..p)
            .map(|_| {
                DenseVector::new((0..dim).map(|_| rng.uniform(-100.0, 100.0)).collect()).unwrap()
            })
            .collect()
    }

    proptest! {
        #[test]
        fn algorithms_are_deterministic(seed in any::<u64>(), p in 1usize..=8, dim in 1usize..64) {
            let mut rng = SeededRng::new(seed);
            let g = WorkerGroup::new(random_group(&mut rng, p, dim)).unwrap();
            for algo in CollectiveAlgorithm::ALL {
                let a = allreduce_mean(&g, algo).unwrap();
                let b = allreduce_mean(&g, algo).unwrap();
                prop_assert_eq!(a, b);
            }
        }

        #[test]
        fn cost_monotone(m1 in 0.0f64..1e9, m2 in 0.0f64..1e9, lat in 0.0f64..1e-3, p in 1usize..=16) {
            let (lo, hi) = if m1 <= m2 { (m1, m2) } else { (m2, m1) };
            let topo = Topology { intra_node_lat: lat, ..Topology::flat(16, 1e10, 0.0) };
            let slower = Topology { intra_node_lat: lat * 2.0, ..topo.clone() };
            for algo in CollectiveAlgorithm::ALL {
                prop_assert!(comm_cost(algo, lo, p, &topo).unwrap() <= comm_cost(algo, hi, p, &topo).unwrap());
                prop_assert!(comm_cost(algo, hi, p, &topo).unwrap() <= comm_cost(algo, hi, p, &slower).unwrap());
            }
            let ring_bw = comm_cost(CollectiveAlgorithm::Ring, hi, p, &Topology::flat(16, 1e10, 0.0)).unwrap();
            prop_assert!(ring_bw <= 2.0 * hi / 1e10 * (1.0 + 1e-12));
        }
    }
}
