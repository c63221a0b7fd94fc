mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use fedplant_core::coordinator::{
    adaptive_weights, fedavg_weights, run_centralized, run_client, run_federated, run_federated_on, run_local_only,
    serve, AlphaCoefficients, FedError, PlantWorker, WeightingMode,
};
use fedplant_core::model::{Activation, ModelArchitecture};
use fedplant_core::transport::wire::error_code;
use fedplant_core::transport::{self, Endpoint, Link, Listener, Message, TransportError};

fn inproc(name: &str) -> Endpoint {
    Endpoint::Inproc(format!("{name}-{}", std::process::id()))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn records_json(records: &[fedplant_core::coordinator::RoundRecord]) -> String {
    records.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect()
}

struct CountingLink {
    inner: Box<dyn Link>,
    updates: Arc<AtomicUsize>,
}

impl Link for CountingLink {
    fn send(&mut self, msg: &Message) -> Result<(), TransportError> {
        if matches!(msg, Message::LocalUpdatePlain { .. } | Message::LocalUpdateMasked { .. }) {
            self.updates.fetch_add(1, Ordering::SeqCst);
        }
        self.inner.send(msg)
    }

    fn recv(&mut self, timeout: Duration) -> Result<Message, TransportError> {
        self.inner.recv(timeout)
    }
}

#[test]
fn three_plants_two_rounds_send_six_updates() {
    let (mut cfg, plants) = common::three_plants();
    cfg.rounds = 2;
    let listener = Listener::bind(&inproc("six-updates")).unwrap();
    let endpoint = listener.endpoint();
    let updates = Arc::new(AtomicUsize::new(0));
    let outcome = std::thread::scope(|s| {
        for p in &plants {
            let worker = PlantWorker::new(p, &cfg);
            let mut link = CountingLink {
                inner: transport::connect(&endpoint, cfg.phase_timeout).unwrap(),
                updates: updates.clone(),
            };
            s.spawn(move || run_client(&mut link, &worker).unwrap());
        }
        serve(&listener, &cfg).unwrap()
    });
    assert_eq!(updates.load(Ordering::SeqCst), 6);
    assert_eq!(outcome.records.len(), 2);
    assert_eq!(outcome.records[1].round, 2);
}

fn rogue_join(endpoint: &Endpoint, plant_id: u32, arch_hash: u64) -> u16 {
    let mut link = transport::connect(endpoint, Duration::from_secs(5)).unwrap();
    link.send(&Message::JoinRequest {
        plant_id,
        arch_hash,
        n_samples: 10,
    })
    .unwrap();
    match link.recv(Duration::from_secs(20)).unwrap() {
        Message::ProtocolError { code, .. } => code,
        other => panic!("expected rejection, got {other:?}"),
    }
}

#[test]
fn bad_joins_are_rejected_and_the_federation_still_runs() {
    let cfg = common::tiny_config(&[(1, "A"), (2, "B")], 1, true);
    let plants = [common::tiny_plant(1, "A", 1), common::tiny_plant(2, "B", 2)];
    let listener = Listener::bind(&inproc("bad-joins")).unwrap();
    let endpoint = listener.endpoint();
    let good_hash = cfg.arch.arch_id().0;
    let other_arch = ModelArchitecture::new(4, vec![7], 1, Activation::Relu).unwrap();
    std::thread::scope(|s| {
        let server_cfg = cfg.clone();
        let server = s.spawn(move || serve(&listener, &server_cfg));
        assert_eq!(rogue_join(&endpoint, 9, good_hash), error_code::UNKNOWN_PLANT);
        assert_eq!(rogue_join(&endpoint, 1, other_arch.arch_id().0), error_code::ARCH_MISMATCH);

        // Plant 1 joins first; a second plant 1 queued behind it is a duplicate.
        let mut first = transport::connect(&endpoint, cfg.phase_timeout).unwrap();
        let worker = PlantWorker::new(&plants[0], &cfg);
        let client = s.spawn(move || run_client(first.as_mut(), &worker));
        assert_eq!(rogue_join(&endpoint, 1, good_hash), error_code::DUPLICATE_PLANT);

        let mut second = transport::connect(&endpoint, cfg.phase_timeout).unwrap();
        let worker = PlantWorker::new(&plants[1], &cfg);
        run_client(second.as_mut(), &worker).unwrap();
        assert_eq!(client.join().unwrap().unwrap(), 1);
        assert_eq!(server.join().unwrap().unwrap().records.len(), 1);
    });
}

#[test]
fn client_with_a_different_architecture_is_refused() {
    let cfg = common::tiny_config(&[(1, "A")], 1, false);
    let plant = common::tiny_plant(1, "A", 1);
    let listener = Listener::bind(&inproc("wrong-arch")).unwrap();
    let endpoint = listener.endpoint();
    let mut short = cfg.clone();
    short.phase_timeout = Duration::from_millis(300);
    std::thread::scope(|s| {
        let server = s.spawn(move || serve(&listener, &short));
        let mut worker = PlantWorker::new(&plant, &cfg);
        worker.arch = ModelArchitecture::new(4, vec![5], 1, Activation::Relu).unwrap();
        let mut link = transport::connect(&endpoint, cfg.phase_timeout).unwrap();
        let err = run_client(link.as_mut(), &worker).unwrap_err();
        assert!(
            matches!(&err, FedError::Transport(TransportError::Remote { code, .. }) if *code == error_code::ARCH_MISMATCH),
            "{err:?}"
        );
        let err = server.join().unwrap().unwrap_err();
        assert!(matches!(err, FedError::Transport(TransportError::Timeout(_))), "{err:?}");
    });
}

#[test]
fn single_plaintext_plant_matches_local_only_bit_for_bit() {
    let mut cfg = common::tiny_config(&[(5, "solo")], 4, false);
    cfg.local.epochs = 3;
    let plants = [common::plant_with_rows(5, "solo", 3, 90)];
    let fed = run_federated(&cfg, &plants).unwrap();
    let local = run_local_only(&cfg, &plants).unwrap();
    let solo = &local["solo"];
    assert_eq!(fed.params, solo.params);
    assert_eq!(fed.metrics["solo"], solo.metrics);
    assert_eq!(fed.records.len(), 4);
    assert!(fed.records.iter().all(|r| r.weights_used["solo"] == 1.0));

    let central = run_centralized(&cfg, &plants).unwrap();
    assert_eq!(central.params, solo.params);
    assert_eq!(central.epochs.len(), 12);
}

#[test]
fn single_secure_plant_stays_within_the_quantization_bound_of_local_only() {
    let cfg = common::tiny_config(&[(5, "solo")], 1, true);
    let plants = [common::plant_with_rows(5, "solo", 3, 90)];
    let fed = run_federated(&cfg, &plants).unwrap();
    let local = run_local_only(&cfg, &plants).unwrap();
    let diff = max_abs_diff(fed.params.values(), local["solo"].params.values());
    assert!(diff <= cfg.quant.error_bound(1), "{diff:e}");
}

#[test]
fn secure_and_plaintext_rounds_agree_within_the_bound() {
    let (mut cfg, plants) = common::three_plants();
    cfg.rounds = 1;
    let secure = run_federated(&cfg, &plants).unwrap();
    cfg.secure = false;
    let plain = run_federated(&cfg, &plants).unwrap();
    let diff = max_abs_diff(secure.params.values(), plain.params.values());
    let tol = cfg.quant.error_bound(3) + 1e-15;
    assert!(diff > 0.0 && diff <= tol, "{diff:e} vs {tol:e}");
    assert_eq!(secure.records[0].weights_used, plain.records[0].weights_used);
}

#[test]
fn zero_learning_rate_leaves_the_global_model_in_place() {
    let (mut cfg, plants) = common::three_plants();
    cfg.rounds = 2;
    cfg.local.learning_rate = 0.0;
    let init = fedplant_core::model::init_params(&cfg.arch, cfg.master_seed);
    for secure in [true, false] {
        cfg.secure = secure;
        let out = run_federated(&cfg, &plants).unwrap();
        let diff = max_abs_diff(out.params.values(), init.values());
        assert!(diff <= cfg.rounds as f64 * cfg.quant.error_bound(3), "secure {secure}: {diff:e}");
    }
}

#[test]
fn reruns_are_identical() {
    let (cfg, plants) = common::three_plants();
    let a = run_federated(&cfg, &plants).unwrap();
    let b = run_federated(&cfg, &plants).unwrap();
    assert_eq!(records_json(&a.records), records_json(&b.records));
    assert_eq!(a.params, b.params);
    assert_eq!(run_centralized(&cfg, &plants).unwrap(), run_centralized(&cfg, &plants).unwrap());
    assert_eq!(run_local_only(&cfg, &plants).unwrap(), run_local_only(&cfg, &plants).unwrap());
}

#[test]
fn tcp_and_inproc_give_identical_records() {
    let (cfg, plants) = common::three_plants();
    let tcp = run_federated_on(&cfg, &plants, &"127.0.0.1:0".parse().unwrap()).unwrap();
    let mem = run_federated(&cfg, &plants).unwrap();
    assert_eq!(records_json(&tcp.records), records_json(&mem.records));
    assert_eq!(tcp.params, mem.params);
}

#[test]
fn records_are_complete() {
    let (cfg, plants) = common::three_plants();
    let out = run_federated(&cfg, &plants).unwrap();
    assert_eq!(out.records.len(), cfg.rounds as usize);
    let counts: Vec<u64> = plants.iter().map(|p| p.prepared.split.train.n_samples() as u64).collect();
    let expected = fedavg_weights(&counts).unwrap();
    for (i, r) in out.records.iter().enumerate() {
        assert_eq!(r.round, i as u32 + 1);
        assert!(r.global_train_mse.is_finite() && r.global_train_mse > 0.0);
        assert_eq!(r.per_plant_test_mse.len(), 3);
        let used: Vec<f64> = r.weights_used.values().copied().collect();
        assert_eq!(used, expected.0);
    }
    assert_eq!(out.metrics["B"].mse, out.records.last().unwrap().per_plant_test_mse["B"]);
}

#[test]
fn alpha_overrides_are_applied_in_plant_order() {
    let (mut cfg, plants) = common::three_plants();
    cfg.rounds = 1;
    cfg.weighting = WeightingMode::Adaptive;
    // Listed out of id order: C, A, B.
    cfg.plants.rotate_right(1);
    cfg.alpha_overrides = Some(vec![8.59, 9.20, 8.87]);
    let out = run_federated(&cfg, &plants).unwrap();
    let counts: Vec<u64> = plants.iter().map(|p| p.prepared.split.train.n_samples() as u64).collect();
    let expected = adaptive_weights(&counts, &AlphaCoefficients(vec![9.20, 8.87, 8.59])).unwrap();
    let used: Vec<f64> = out.records[0].weights_used.values().copied().collect();
    assert_eq!(used, expected.0);
}

#[test]
fn adaptive_weighting_without_overrides_uses_fedavg_first() {
    let (mut cfg, plants) = common::three_plants();
    cfg.weighting = WeightingMode::Adaptive;
    let out = run_federated(&cfg, &plants).unwrap();
    let counts: Vec<u64> = plants.iter().map(|p| p.prepared.split.train.n_samples() as u64).collect();
    let first: Vec<f64> = out.records[0].weights_used.values().copied().collect();
    assert_eq!(first, fedavg_weights(&counts).unwrap().0);
    let later: Vec<f64> = out.records[1].weights_used.values().copied().collect();
    assert_ne!(later, first);
    assert!((later.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
}

#[test]
fn divergence_aborts_the_run() {
    let (mut cfg, plants) = common::three_plants();
    cfg.local.learning_rate = 1e200;
    let err = run_federated(&cfg, &plants).unwrap_err();
    assert!(err.is_divergence(), "{err:?}");
}

#[test]
fn invalid_configs_are_refused() {
    let (cfg, plants) = common::three_plants();
    let mut zero = cfg.clone();
    zero.rounds = 0;
    assert!(matches!(run_federated(&zero, &plants), Err(FedError::Config(_))));
    let mut empty = cfg.clone();
    empty.plants.clear();
    assert!(matches!(run_federated(&empty, &plants), Err(FedError::Config(_))));
    let mut dup = cfg;
    dup.plants[1].id = 1;
    assert!(matches!(run_local_only(&dup, &plants), Err(FedError::Config(_))));
}
