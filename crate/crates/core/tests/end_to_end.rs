use parsim_core::collectives::{CollectiveAlgorithm, Topology, WorkerGroup};
use parsim_core::compression::CompressorConfig;
use parsim_core::numerics::{DenseVector, SeededRng};
use parsim_core::simulator::{simulate_run, CostParams};
use parsim_core::strategies::{sync_data_parallel_step, HyperParams, StrategyConfig};
use parsim_core::trainer::{
    chrono_split, evaluate_topk, generate_synthetic, train, EvalSettings, RecModel, TrainSettings,
};
use proptest::prelude::*;

fn cluster() -> Topology {
    Topology {
        racks: 2,
        nodes_per_rack: 2,
        devices_per_node: 4,
        intra_node_bw: 100e9,
        inter_node_bw: 10e9,
        inter_rack_bw: 1e9,
        intra_node_lat: 1e-6,
        inter_node_lat: 5e-6,
        inter_rack_lat: 2e-5,
    }
}

fn costs() -> CostParams {
    CostParams {
        compute_time_per_sample: 1e-3,
        activation_bytes_per_sample: 1e5,
        gradient_bytes: 4e8,
        ..Default::default()
    }
}

#[test]
fn hierarchical_reduction_wins_across_racks() {
    let ring = StrategyConfig::data_parallel(16);
    let hier = StrategyConfig {
        collective: CollectiveAlgorithm::Hierarchical,
        ..ring.clone()
    };
    let r = simulate_run(&ring, &cluster(), &costs(), 512, 2).unwrap();
    let h = simulate_run(&hier, &cluster(), &costs(), 512, 2).unwrap();
    assert!(h.throughput > r.throughput, "{} vs {}", h.throughput, r.throughput);
    assert!(h.comm_share < r.comm_share);
}

#[test]
fn compression_cuts_simulated_communication() {
    let dense = StrategyConfig::data_parallel(8);
    let mut last = simulate_run(&dense, &cluster(), &costs(), 256, 1).unwrap();
    for compressor in [CompressorConfig::TopKFraction(0.1), CompressorConfig::OneBit] {
        let s = StrategyConfig {
            compressor,
            ..dense.clone()
        };
        let r = simulate_run(&s, &cluster(), &costs(), 256, 1).unwrap();
        assert!(r.comm_overhead_ms < last.comm_overhead_ms, "{compressor:?}");
        last = r;
    }
}

#[test]
fn saved_model_evaluates_identically() {
    let data = generate_synthetic(40, 30, 1200, 3).unwrap();
    let split = chrono_split(&data, (0.8, 0.1, 0.1)).unwrap();
    let model = RecModel::init(split.num_users, split.num_items, 6, 3).unwrap();
    let settings = TrainSettings {
        hyper: HyperParams {
            learning_rate: 0.5,
            batch_size: 32,
            steps: 100,
        },
        l2: 1e-3,
        log_every: 50,
        delays: Default::default(),
    };
    let out = train(model, &split, &StrategyConfig::data_parallel(4), &settings, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.psmf");
    out.model.save(&path).unwrap();
    let loaded = RecModel::load(&path).unwrap();
    assert_eq!(loaded.params(), out.model.params());
    let a = evaluate_topk(&out.model, &split, EvalSettings::default(), 9).unwrap();
    let b = evaluate_topk(&loaded, &split, EvalSettings::default(), 9).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #[test]
    fn keeping_every_coordinate_matches_dense(seed in any::<u64>(), p in 1usize..6, dim in 1usize..20) {
        let mut rng = SeededRng::new(seed);
        let grads: Vec<DenseVector> = (0..p)
            .map(|_| DenseVector::new((0..dim).map(|_| rng.uniform(-3.0, 3.0)).collect()).unwrap())
            .collect();
        let params = DenseVector::new((0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let group = WorkerGroup::new(grads).unwrap();
        let dense = sync_data_parallel_step(&group, &params, 0.1, &StrategyConfig::data_parallel(p), &mut Vec::new()).unwrap();
        let full = StrategyConfig { compressor: CompressorConfig::TopK(dim), ..StrategyConfig::data_parallel(p) };
        let mut feedback = Vec::new();
        let kept = sync_data_parallel_step(&group, &params, 0.1, &full, &mut feedback).unwrap();
        prop_assert_eq!(dense, kept);
        prop_assert!(feedback.iter().all(|f| f.residual().max_abs() == 0.0));
    }
}
