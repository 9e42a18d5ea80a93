//! End-to-end runs over small synthetic tasks, exercising both
//! transports and the baseline trainer through the public engine API.

use gear_core::data::{synth_generate, Dataset};
use gear_core::optim::AdamHyper;
use gear_train::engine::{self, ClockMode, Mode, RunParams, RunTotals, TransportKind};

fn small_dataset() -> Dataset {
    synth_generate(909, 24, 6, 5, 4)
}

fn base_params(run_id: &str) -> RunParams {
    RunParams {
        run_id: run_id.into(),
        mode: Mode::Gear,
        transport: TransportKind::Inproc,
        clock: ClockMode::Logical,
        num_fastgear: 1,
        num_slowgear: 1,
        num_param_servers: 1,
        ttl: 0,
        m: 1,
        seed: 42,
        steps: 40,
        batch_size: 1,
        max_inflight: 2,
        hyper: AdamHyper::default(),
        dense_hidden: vec![8],
        sparse_hidden: vec![10],
        dfv_dim: 4,
        log_messages: false,
    }
}

/// grad_pushes fully decompose into applied updates and dropped batches,
/// and the cache served exactly the requests that reached it.
fn assert_reconciled(t: &RunTotals, m: u64) {
    assert_eq!(t.cache_hits + t.cache_misses, t.infer_requests, "cache traffic: {t:?}");
    assert_eq!(t.dense_forward_count, t.cache_misses, "forwards vs misses: {t:?}");
    assert_eq!(
        t.grad_pushes,
        t.dense_update_count * m + t.dropped_grad_batches,
        "push ledger: {t:?}"
    );
}

#[test]
fn fresh_dfv_single_worker_run_matches_monolithic_baseline() {
    let ds = small_dataset();
    let gear = engine::run(&base_params("eq"), &ds).unwrap();
    let mut p = base_params("eq");
    p.mode = Mode::Nogear;
    let nogear = engine::run(&p, &ds).unwrap();

    assert_eq!(gear.final_params.len(), nogear.final_params.len());
    for (g, n) in gear.final_params.iter().zip(&nogear.final_params) {
        assert_eq!(g.name, n.name);
        let err = gear_refmath::max_rel_err(
            &gear_refmath::widen(g.tensor.data()),
            &gear_refmath::widen(n.tensor.data()),
            1e-6,
        );
        assert!(err <= 1e-5, "{}: rel err {err}", g.name);
    }

    // The per-step losses coincide as well, not just the endpoints.
    let gear_losses: Vec<f32> =
        gear.rows.iter().filter(|r| r.worker == "fastgear-0").map(|r| r.loss.unwrap()).collect();
    let nogear_losses: Vec<f32> = nogear.rows.iter().map(|r| r.loss.unwrap()).collect();
    assert_eq!(gear_losses.len(), nogear_losses.len());
    for (i, (a, b)) in gear_losses.iter().zip(&nogear_losses).enumerate() {
        assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0), "step {i}: {a} vs {b}");
    }
}

#[test]
fn same_seed_reproduces_the_run_exactly() {
    let ds = small_dataset();
    let mut p = base_params("det");
    p.num_slowgear = 2;
    p.ttl = 3;
    p.m = 2;
    p.batch_size = 3;
    p.steps = 15;
    let a = engine::run(&p, &ds).unwrap();
    let b = engine::run(&p, &ds).unwrap();
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.totals, b.totals);
    for (x, y) in a.final_params.iter().zip(&b.final_params) {
        assert_eq!(x.version, y.version);
        assert_eq!(x.tensor.data(), y.tensor.data(), "{}", x.name);
    }

    let mut other = p.clone();
    other.seed = 43;
    let c = engine::run(&other, &ds).unwrap();
    assert_ne!(
        a.final_params[0].tensor.data(),
        c.final_params[0].tensor.data(),
        "different seeds must diverge"
    );
}

#[test]
fn counters_reconcile_across_topologies() {
    let ds = small_dataset();
    for (ttl, m, fgs, sgs, batch) in [(0, 1, 1, 1, 1), (2, 2, 2, 2, 3), (5, 4, 2, 3, 4), (1, 3, 3, 1, 2)] {
        let mut p = base_params("ledger");
        p.ttl = ttl;
        p.m = m;
        p.num_fastgear = fgs;
        p.num_slowgear = sgs;
        p.batch_size = batch;
        p.steps = 12;
        let out = engine::run(&p, &ds).unwrap();
        assert_reconciled(&out.totals, m as u64);
        assert_eq!(out.totals.steps, 12 * fgs as u64);
        assert_eq!(out.totals.skips, 0, "all images are resident, nothing skips");
        assert_eq!(out.totals.grad_pushes, out.totals.steps * batch as u64);
    }
}

#[test]
fn longer_ttl_means_fewer_dense_forwards() {
    let ds = synth_generate(11, 48, 6, 5, 4);
    let mut forwards = Vec::new();
    for ttl in [0, 2, 8] {
        let mut p = base_params("ttl-sweep");
        p.ttl = ttl;
        p.batch_size = 4;
        p.steps = 30;
        let out = engine::run(&p, &ds).unwrap();
        assert_reconciled(&out.totals, 1);
        forwards.push(out.totals.dense_forward_count);
    }
    assert!(
        forwards[0] > forwards[1] && forwards[1] > forwards[2],
        "dense forwards should fall as the cache lives longer: {forwards:?}"
    );
}

#[test]
fn training_actually_learns_the_synthetic_task() {
    let ds = synth_generate(77, 64, 8, 8, 4);
    let mut p = base_params("learn");
    p.ttl = 2;
    p.m = 2;
    p.batch_size = 8;
    p.steps = 250;
    p.dense_hidden = vec![16];
    p.sparse_hidden = vec![16];
    p.hyper = AdamHyper { lr: 3e-3, ..Default::default() };
    let out = engine::run(&p, &ds).unwrap();
    let losses: Vec<f32> =
        out.rows.iter().filter(|r| r.worker == "fastgear-0").map(|r| r.loss.unwrap()).collect();
    let early: f32 = losses[..20].iter().sum::<f32>() / 20.0;
    let late: f32 = losses[losses.len() - 20..].iter().sum::<f32>() / 20.0;
    assert!(
        late < early * 0.5,
        "loss should at least halve over training: early {early}, late {late}"
    );
}

#[test]
fn socket_transport_runs_a_multiworker_topology() {
    let ds = synth_generate(5, 40, 6, 5, 4);
    let mut p = base_params("socket");
    p.transport = TransportKind::Socket;
    p.clock = ClockMode::Wall;
    p.num_fastgear = 2;
    p.num_slowgear = 2;
    p.num_param_servers = 2;
    p.ttl = 3;
    p.m = 2;
    p.batch_size = 3;
    p.steps = 10;
    let out = engine::run(&p, &ds).unwrap();
    assert_reconciled(&out.totals, 2);
    assert_eq!(out.totals.steps, 20);
    assert_eq!(out.totals.grad_pushes, 60);
    assert_eq!(out.final_params.len(), 8, "two stacks of two layers, weight and bias each");
    for w in ["fastgear-0", "fastgear-1", "slowgear-0", "slowgear-1"] {
        assert!(out.rows.iter().any(|r| r.worker == w), "missing rows for {w}");
    }
}

#[test]
fn transports_exchange_identical_message_sequences() {
    // Synchronous single-worker wiring with fresh DFVs: the message
    // content is independent of thread interleavings, so the socket run
    // must produce byte-identical per-receiver transcripts.
    let ds = small_dataset();
    let mut p = base_params("x-transport");
    p.log_messages = true;
    p.steps = 12;
    p.batch_size = 2;

    let inproc = engine::run(&p, &ds).unwrap();
    let mut ps = p.clone();
    ps.transport = TransportKind::Socket;
    let socket = engine::run(&ps, &ds).unwrap();

    let a = inproc.transcripts.expect("inproc transcripts");
    let b = socket.transcripts.expect("socket transcripts");
    assert_eq!(
        a.keys().collect::<Vec<_>>(),
        b.keys().collect::<Vec<_>>(),
        "same set of receivers"
    );
    for (receiver, lanes) in &a {
        let total: usize = lanes.iter().map(Vec::len).sum();
        assert!(total > 0, "{receiver} saw no traffic");
        assert_eq!(lanes, &b[receiver], "receiver {receiver} transcripts differ");
    }
}

#[test]
fn nogear_rejects_gear_only_knob_abuse_gracefully() {
    // The baseline ignores gear topology except for validation; a
    // degenerate dataset still has to be caught.
    let ds = synth_generate(1, 2, 3, 3, 2);
    let mut p = base_params("tiny");
    p.num_fastgear = 5; // more workers than samples
    let err = match engine::run(&p, &ds) {
        Err(e) => e,
        Ok(_) => panic!("oversubscribed topology must be rejected"),
    };
    assert!(err.to_string().contains("cannot feed"), "{err}");
}

#[test]
fn mid_run_failure_keeps_the_metrics_gathered_so_far() {
    // Poke a hole in the dataset: one image id has no dense blob. The
    // baseline hits it partway through an epoch and must hand back the
    // rows for the steps that did complete.
    let mut ds = small_dataset();
    ds.dense_inputs.retain(|(id, _)| *id != 7);
    let mut p = base_params("partial");
    p.mode = Mode::Nogear;
    match engine::run(&p, &ds) {
        Err(gear_train::TrainError::Aborted { worker, reason, rows }) => {
            assert_eq!(worker, "nogear-0");
            assert!(reason.contains("no dense input"), "{reason}");
            assert!(!rows.is_empty(), "completed steps should be kept");
            assert!((rows.len() as u64) < p.steps, "the run must not have finished");
            for (i, row) in rows.iter().enumerate() {
                assert_eq!(row.step, i as u64 + 1);
            }
        }
        Err(other) => panic!("expected an abort with salvaged rows, got {other}"),
        Ok(_) => panic!("a missing dense input must fail the run"),
    }
}
