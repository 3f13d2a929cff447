use std::collections::BTreeSet;
use std::time::Duration;

use sector::apps::{gensort, terasort, IDENTITY};
use sector::client::{JobSpec, Speculation};
use sector::harness::reference::{differential_run, DiffJob, Stage};
use sector::harness::{Cluster, ClusterSpec, FaultAction, FaultScript, SeedFile};
use sector::model::RecordIndex;
use sector::proto::OutputMode;
use sector::transport::NetFaultPlan;

fn sort_seeds(nodes: usize, bytes: u64, copies: usize, seed: u64) -> Vec<SeedFile> {
    gensort::gen_sort_data(nodes, bytes, seed, "/sort")
        .unwrap()
        .into_iter()
        .map(|s| SeedFile {
            nodes: (0..copies).map(|k| (s.node + k) % nodes).collect(),
            path: s.path,
            data: s.data,
            index: Some(s.index),
        })
        .collect()
}

fn converged(c: &Cluster, want: usize) -> bool {
    let m = c.master().state();
    m.files().values().all(|f| {
        f.replicas.iter().filter(|r| m.is_alive(**r)).count() >= want.min(m.alive_slaves().count())
    })
}

#[test]
fn killed_slave_mid_sort_is_retried() {
    let seeds = sort_seeds(4, 100 * 4000, 2, 5);
    let spec = ClusterSpec {
        spe_throughput: 2e5,
        ..ClusterSpec::default()
    }
    .with_seed(9);
    let job = DiffJob::new(
        seeds.iter().map(|s| s.path.clone()).collect(),
        vec![
            Stage::new(terasort::HASH).buckets(4).bounds(40_000, 1 << 20),
            Stage::new(terasort::SORT).per_file(),
        ],
    );
    let script = FaultScript::new().at(0.5, FaultAction::Kill { slave: 2 });
    let r = differential_run(&spec, &seeds, &script, &job).unwrap();
    assert!(r.matched, "{:?}", r.divergence);
    assert!(r.retries >= 1, "{r:?}");
}

#[test]
fn lossy_network_sort_matches_reference() {
    let seeds = sort_seeds(4, 100 * 2000, 1, 6);
    let spec = ClusterSpec {
        net: NetFaultPlan {
            drop: 0.1,
            ..NetFaultPlan::default()
        },
        ..ClusterSpec::default()
    };
    let job = DiffJob::new(
        seeds.iter().map(|s| s.path.clone()).collect(),
        vec![
            Stage::new(terasort::HASH).buckets(6).bounds(30_000, 1 << 20),
            Stage::new(terasort::SORT).per_file(),
        ],
    );
    let r = differential_run(&spec, &seeds, &FaultScript::default(), &job).unwrap();
    assert!(r.matched, "{:?}", r.divergence);
}

#[test]
fn slow_node_is_speculated_around() {
    let seeds = sort_seeds(4, 100 * 6000, 4, 7);
    let spec = ClusterSpec {
        spe_throughput: 3e5,
        ..ClusterSpec::default()
    };
    let inputs: Vec<String> = seeds.iter().map(|s| s.path.clone()).collect();
    let mut js = JobSpec::new(inputs, IDENTITY, OutputMode::Local);
    js.smin = 200_000;
    js.smax = 200_000;
    js.speculation = Speculation::Estimated;
    js.output_prefix = "/a".into();

    let mut base = Cluster::boot(spec.clone(), &seeds).unwrap();
    base.login().unwrap();
    let clean = base.run_job(js.clone()).unwrap();
    assert_eq!(clean.segments, 12);

    let mut c = Cluster::boot(spec, &seeds).unwrap();
    c.login().unwrap();
    c.apply(&FaultAction::Slow { slave: 1, factor: 10.0 }).unwrap();
    let slow = c.run_job(js).unwrap();
    let bound = clean.elapsed() + c.nominal(200_000).mul_f64(1.5);
    assert!(slow.elapsed() <= bound, "{:?} > {:?}", slow.elapsed(), bound);
    assert!(slow.speculated >= 1);
    let mut all = Vec::new();
    for p in slow.collect().unwrap() {
        all.extend(c.download(&p).unwrap().0);
    }
    assert_eq!(all, seeds.iter().flat_map(|s| s.data.clone()).collect::<Vec<u8>>());
}

#[test]
fn local_job_moves_no_bytes_across_racks() {
    let spec = ClusterSpec::racks(2, 2);
    let seeds: Vec<SeedFile> = (0..4)
        .map(|i| SeedFile {
            nodes: vec![i],
            path: format!("/loc/f{i}"),
            data: gensort::generate(i, 100 * 1000, 3).unwrap(),
            index: Some(RecordIndex::fixed_width(1000, 100).unwrap()),
        })
        .collect();
    let mut c = Cluster::boot(spec, &seeds).unwrap();
    c.login().unwrap();
    let mut js = JobSpec::new(seeds.iter().map(|s| s.path.clone()).collect(), IDENTITY, OutputMode::Local);
    js.smin = 100_000;
    js.smax = 100_000;
    let r = c.run_job(js).unwrap();
    assert_eq!(r.segments, 4);
    assert!(r.instants.iter().all(|i| !i.local_feasible || i.local_made));
    assert_eq!(c.cross_rack_slave_bytes(), 0);
}

#[test]
fn replication_converges_and_recovers() {
    let spec = ClusterSpec {
        nodes_per_rack: 5,
        replicas: 3,
        ..ClusterSpec::default()
    };
    let mut c = Cluster::boot(spec, &[]).unwrap();
    c.login().unwrap();
    for i in 0..10u8 {
        c.upload(&format!("/r/f{i}"), vec![i; 5000 + i as usize], None).unwrap();
    }
    let start = c.master().stats().sweeps;
    while !converged(&c, 3) {
        assert!(c.master().stats().sweeps - start <= 3, "not converged within 3 sweeps");
        c.run_for(Duration::from_millis(500)).unwrap();
    }

    let victim = *c.files()["/r/f0"].replicas.iter().next().unwrap();
    let idx = c.slave_index(victim).unwrap();
    c.kill_slave(idx);
    while c.master().state().is_alive(victim) {
        c.run_for(Duration::from_millis(500)).unwrap();
    }
    let detected = c.master().stats().sweeps;
    while !converged(&c, 3) {
        assert!(c.master().stats().sweeps - detected <= 3, "not re-converged within 3 sweeps");
        c.run_for(Duration::from_millis(500)).unwrap();
    }
    for f in c.files().values() {
        let live: BTreeSet<_> = f.replicas.iter().filter(|r| **r != victim).collect();
        assert!(live.len() >= 3, "{}: {:?}", f.path, f.replicas);
    }
}

#[test]
fn master_restart_rebuilds_metadata() {
    let mut c = Cluster::boot(ClusterSpec::default(), &sort_seeds(4, 100 * 500, 2, 8)).unwrap();
    c.login().unwrap();
    c.upload("/m/extra", b"hello".to_vec(), None).unwrap();
    c.run_for(Duration::from_secs(5)).unwrap();
    let before = c.files();
    c.restart_master();
    c.await_registration(Duration::from_secs(60)).unwrap();
    assert_eq!(c.files(), before);
}

#[test]
fn denied_slave_never_registers() {
    let spec = ClusterSpec {
        denied: vec![3],
        ..ClusterSpec::default()
    };
    let mut c = Cluster::boot(spec, &[]).unwrap();
    let denied = c.slaves()[3].addr;
    c.run_for(Duration::from_secs(300)).unwrap();
    assert!(!c.registered().contains(&denied));
    assert!(c.slave(3).stats().register_attempts >= 100, "{:?}", c.slave(3).stats());
    assert_eq!(c.registered().len(), 3);
}
