use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sector::apps::{gensort, invidx, terasort, IDENTITY};
use sector::client::{JobSpec, Speculation};
use sector::harness::reference::{differential_run, run_reference, DataFile, DiffJob, Stage};
use sector::harness::{Cluster, ClusterSpec, FaultAction, FaultScript, SeedFile};
use sector::model::{FileMeta, Location, RecordIndex, SegmentExtent, SphereStream, StreamFile};
use sector::proto::{Mode, OutputMode, Privilege};
use sector::runtime::sim::{NodeSpec, Sim};
use sector::runtime::udp::UdpNode;
use sector::runtime::{Actor, Ctx, HostConfig};
use sector::security::{SecurityState, UserAccount};
use sector::sphere::{segment_stream, SegmentPolicy, DEFAULT_SMAX, DEFAULT_SMIN};
use sector::time::Time;
use sector::transport::{Message, NetFaultPlan};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e<E: std::fmt::Debug>(err: E) -> String {
    format!("{err:?}")
}

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

/// Records sorted by key, ties kept in input order.
fn sorted_records(inputs: &[&[u8]]) -> Vec<u8> {
    let mut recs: Vec<&[u8]> = inputs.iter().flat_map(|d| d.chunks(100)).collect();
    recs.sort_by(|a, b| a[..10].cmp(&b[..10]));
    recs.concat()
}

fn terasort_at_scale() -> Outcome {
    let wall = Instant::now();
    let per_node = (64 << 20) / 100 * 100;
    let seeds = sort_seeds(4, per_node, 1, 2024);
    let paths: Vec<String> = seeds.iter().map(|s| s.path.clone()).collect();
    let mut c = Cluster::boot(ClusterSpec::default(), &seeds).map_err(e)?;
    c.login().map_err(e)?;
    let hash = Stage::new(terasort::HASH).buckets(16);
    let sort = Stage::new(terasort::SORT).per_file();
    let r1 = c.run_job(hash.job_spec(paths.clone(), "/ts/s0")).map_err(e)?;
    let buckets = r1.collect().map_err(e)?;
    check(buckets.len() == 16, format!("{} bucket files", buckets.len()))?;
    let r2 = c.run_job(sort.job_spec(buckets, "/ts/s1")).map_err(e)?;
    let mut got = Vec::new();
    for p in r2.collect().map_err(e)? {
        got.extend(c.download(&p).map_err(e)?.0);
    }
    let inputs: Vec<&[u8]> = seeds.iter().map(|s| s.data.as_slice()).collect();
    let oracle = sorted_records(&inputs);
    check(got.len() == oracle.len(), format!("{} output bytes, want {}", got.len(), oracle.len()))?;
    check(got == oracle, "output is not the sorted permutation of the input")?;
    drop(c);
    let ref_in = seeds
        .iter()
        .map(|s| DataFile {
            path: s.path.clone(),
            data: s.data.clone(),
            index: s.index.clone(),
        })
        .collect();
    let reg = sector::apps::builtin_registry();
    let reference: Vec<u8> = run_reference(&reg, &[hash, sort], ref_in, 4)
        .map_err(e)?
        .into_iter()
        .flat_map(|f| f.data)
        .collect();
    check(got == reference, "output differs from run_reference")?;
    let secs = wall.elapsed().as_secs_f64();
    check(secs < 120.0, format!("took {secs:.1}s"))?;
    Ok(format!("4 x {per_node} bytes sorted exactly, {secs:.1}s wall"))
}

fn inverted_index_example() -> Outcome {
    let seeds = vec![
        SeedFile {
            nodes: vec![0],
            path: "/web/w1".into(),
            data: b"bee cow".to_vec(),
            index: None,
        },
        SeedFile {
            nodes: vec![1],
            path: "/web/w2".into(),
            data: b"bee camel".to_vec(),
            index: None,
        },
    ];
    let mut c = Cluster::boot(ClusterSpec::default(), &seeds).map_err(e)?;
    c.login().map_err(e)?;
    let mut map = JobSpec::new(
        vec!["/web/w1".into(), "/web/w2".into()],
        invidx::MAP,
        OutputMode::Buckets(invidx::BUCKETS),
    );
    map.per_file = true;
    map.output_prefix = "/idx".into();
    let buckets = c.run_job(map).map_err(e)?.collect().map_err(e)?;
    let mut lines = BTreeMap::new();
    for b in [1usize, 2] {
        let mut reduce = JobSpec::new(vec![buckets[b].clone()], invidx::REDUCE, OutputMode::Local);
        reduce.per_file = true;
        reduce.output_prefix = format!("/idx/reduced{b}");
        let out = c.run_job(reduce).map_err(e)?.collect().map_err(e)?;
        check(out.len() == 1, format!("bucket {b}: {} outputs", out.len()))?;
        lines.insert(b, String::from_utf8_lossy(&c.download(&out[0]).map_err(e)?.0).into_owned());
    }
    check(lines[&1] == "bee\tw1,w2\n", format!("bucket 1 = {:?}", lines[&1]))?;
    check(lines[&2] == "camel\tw2\ncow\tw1\n", format!("bucket 2 = {:?}", lines[&2]))?;
    for (b, path) in buckets.iter().enumerate() {
        if b != 1 && b != 2 {
            let (data, _) = c.download(path).map_err(e)?;
            check(data.is_empty(), format!("bucket {b} not empty"))?;
        }
    }
    Ok("bucket 1: bee(w1,w2); bucket 2: camel(w2), cow(w1)".into())
}

/// Best achievable minimum pairwise distance for a `k`-set drawn from
/// `alive` that contains `fixed`.
fn best_min_distance(alive: &[(SocketAddr, Location)], fixed: &[SocketAddr], k: usize) -> u8 {
    let n = alive.len();
    let mut best = 0;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k.min(n) {
            continue;
        }
        let set: Vec<&(SocketAddr, Location)> = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| &alive[i]).collect();
        if !fixed.iter().all(|f| set.iter().any(|(a, _)| a == f)) {
            continue;
        }
        best = best.max(min_distance(&set.iter().map(|(_, l)| l.clone()).collect::<Vec<_>>()));
    }
    best
}

fn min_distance(locs: &[Location]) -> u8 {
    let mut min = u8::MAX;
    for i in 0..locs.len() {
        for j in i + 1..locs.len() {
            let d = if locs[i].dc != locs[j].dc {
                3
            } else if locs[i].rack != locs[j].rack {
                2
            } else {
                1
            };
            min = min.min(d);
        }
    }
    min
}

fn replication_convergence() -> Outcome {
    let spec = ClusterSpec {
        racks_per_dc: 3,
        nodes_per_rack: 2,
        denied: vec![5],
        replicas: 3,
        ..ClusterSpec::default()
    };
    let mut c = Cluster::boot(spec.clone(), &[]).map_err(e)?;
    check(c.registered().len() == 5, "five slaves")?;
    c.login().map_err(e)?;
    let addr_of = |c: &Cluster, id| c.master().state().slave(id).map(|s| s.status.address);
    let loc: BTreeMap<SocketAddr, Location> = (0..5).map(|i| (spec.slave_addr(i), spec.location(i))).collect();
    let mut origin = BTreeMap::new();
    for i in 0..10u8 {
        let path = format!("/rep/f{i}");
        let meta = c.upload(&path, vec![i; 3000 + 17 * i as usize], None).map_err(e)?;
        check(meta.replicas.len() == 1, format!("{path} uploaded with {} replicas", meta.replicas.len()))?;
        origin.insert(path, addr_of(&c, *meta.replicas.iter().next().unwrap()).unwrap());
    }
    let judge = |c: &Cluster| -> Result<bool, String> {
        let alive: Vec<(SocketAddr, Location)> = c
            .master()
            .state()
            .alive_slaves()
            .map(|s| (s.status.address, loc[&s.status.address].clone()))
            .collect();
        for (path, f) in c.files() {
            let live: Vec<SocketAddr> = f
                .replicas
                .iter()
                .filter(|r| c.master().state().is_alive(**r))
                .filter_map(|r| addr_of(c, *r))
                .collect();
            let distinct: BTreeSet<_> = live.iter().collect();
            if live.len() < 3 || distinct.len() != live.len() {
                return Ok(false);
            }
            let fixed: Vec<SocketAddr> = origin.get(&path).filter(|o| live.contains(o)).into_iter().copied().collect();
            let got = min_distance(&live.iter().map(|a| loc[a].clone()).collect::<Vec<_>>());
            if got < best_min_distance(&alive, &fixed, live.len()) {
                return Err(format!("{path}: spread {got} is not maximal"));
            }
        }
        Ok(true)
    };
    let start = c.master().stats().sweeps;
    while !judge(&c)? {
        check(c.master().stats().sweeps - start <= 3, "not converged within 3 sweeps")?;
        c.run_for(Duration::from_millis(250)).map_err(e)?;
    }
    let first = c.master().stats().sweeps - start;
    let victim = c.slave_index(*c.files()["/rep/f0"].replicas.iter().next().unwrap()).unwrap();
    c.kill_slave(victim);
    let vid = c.master().state().slave_by_addr(&spec.slave_addr(victim)).unwrap();
    while c.master().state().is_alive(vid) {
        c.run_for(Duration::from_millis(250)).map_err(e)?;
    }
    let detected = c.master().stats().sweeps;
    while !judge(&c)? {
        check(c.master().stats().sweeps - detected <= 3, "not re-converged within 3 sweeps of detection")?;
        c.run_for(Duration::from_millis(250)).map_err(e)?;
    }
    let second = c.master().stats().sweeps - detected;
    Ok(format!("converged after {first} sweeps; re-converged {second} sweeps after losing slave {victim}"))
}

fn fault_tolerant_equivalence() -> Outcome {
    let mut worst_retries = u64::MAX;
    let mut total_retries = 0;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seeds = sort_seeds(4, 100 * 3000, 2, 100 + seed);
        let spec = ClusterSpec {
            spe_throughput: 2e4,
            net: NetFaultPlan {
                drop: 0.1,
                ..NetFaultPlan::default()
            },
            ..ClusterSpec::default()
        }
        .with_seed(seed);
        let job = DiffJob::new(
            seeds.iter().map(|s| s.path.clone()).collect(),
            vec![
                Stage::new(terasort::HASH).buckets(8).bounds(30_000, 60_000),
                Stage::new(terasort::SORT).per_file(),
            ],
        );
        let victim = rng.gen_range(0..4);
        let at = rng.gen_range(0.2..1.0);
        let script = FaultScript::new().at(at, FaultAction::Kill { slave: victim });
        let r = differential_run(&spec, &seeds, &script, &job).map_err(|x| format!("seed {seed}: {x:?}"))?;
        check(r.matched, format!("seed {seed}: {:?}", r.divergence))?;
        check(r.retries >= 1, format!("seed {seed}: no retry observed (kill slave {victim} at {at:.2}s): {r:?}"))?;
        worst_retries = worst_retries.min(r.retries);
        total_retries += r.retries;
    }
    Ok(format!("50 seeds matched; retries per seed >= {worst_retries}, total {total_retries}"))
}

fn speculation_bound() -> Outcome {
    let seeds = sort_seeds(4, 100 * 6000, 4, 77);
    let spec = ClusterSpec {
        spe_throughput: 3e5,
        ..ClusterSpec::default()
    };
    let mut js = JobSpec::new(seeds.iter().map(|s| s.path.clone()).collect(), IDENTITY, OutputMode::Local);
    js.smin = 200_000;
    js.smax = 200_000;
    js.speculation = Speculation::Estimated;
    let mut base = Cluster::boot(spec.clone(), &seeds).map_err(e)?;
    base.login().map_err(e)?;
    let clean = base.run_job(js.clone()).map_err(e)?;
    let mut c = Cluster::boot(spec, &seeds).map_err(e)?;
    c.login().map_err(e)?;
    c.apply(&FaultAction::Slow { slave: 2, factor: 10.0 }).map_err(e)?;
    let slow = c.run_job(js).map_err(e)?;
    let nominal = c.nominal(200_000);
    let bound = clean.elapsed() + nominal.mul_f64(1.5);
    check(
        slow.elapsed() <= bound,
        format!("{:?} exceeds {:?} + 1.5 x {:?}", slow.elapsed(), clean.elapsed(), nominal),
    )?;
    let paths = slow.collect().map_err(e)?;
    check(paths.len() == clean.segments as usize, "one output per segment")?;
    let mut got = Vec::new();
    for p in &paths {
        got.extend(c.download(p).map_err(e)?.0);
    }
    let want: Vec<u8> = seeds.iter().flat_map(|s| s.data.clone()).collect();
    check(got == want, "output differs from input")?;
    Ok(format!(
        "fault-free {:.2}s, straggler {:.2}s, bound {:.2}s, {} duplicates",
        clean.elapsed().as_secs_f64(),
        slow.elapsed().as_secs_f64(),
        bound.as_secs_f64(),
        slow.speculated
    ))
}

fn segmentation_properties() -> Outcome {
    let p = SegmentPolicy::new(1);
    check(p.smin == 8 << 20 && p.smax == 128 << 20, "default bounds")?;
    check(DEFAULT_SMIN == 8 << 20 && DEFAULT_SMAX == 128 << 20, "default constants")?;
    let strategy = (1u64..300, 30u64..500, 1u64..20).prop_flat_map(|(smin, span, spes)| {
        let smax = smin + span;
        (
            prop::collection::vec(prop::collection::vec(1..=span, 0..50), 1..6),
            Just(smin),
            Just(smax),
            Just(spes),
        )
    });
    let mut runner = TestRunner::new(Config {
        cases: 1000,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&strategy, |(files, smin, smax, spes)| {
            let stream = SphereStream::new(
                files
                    .iter()
                    .enumerate()
                    .map(|(i, sizes)| {
                        let index = RecordIndex::build(sizes.iter().copied()).unwrap();
                        StreamFile {
                            meta: FileMeta {
                                path: format!("/p/f{i}"),
                                size: sizes.iter().sum(),
                                record_count: Some(sizes.len() as u64),
                                replicas: BTreeSet::new(),
                                timestamp: 0,
                            },
                            index: Some(index),
                        }
                    })
                    .collect(),
            );
            let policy = SegmentPolicy {
                spe_count: spes,
                smin,
                smax,
                per_file: false,
            };
            let segs = segment_stream(&stream, &policy, &[]).unwrap();
            for (i, sizes) in files.iter().enumerate() {
                let path = format!("/p/f{i}");
                let offsets: Vec<u64> = std::iter::once(0)
                    .chain(sizes.iter().scan(0, |acc, s| {
                        *acc += s;
                        Some(*acc)
                    }))
                    .collect();
                let mine: Vec<_> = segs.iter().filter(|s| s.file == path).collect();
                let mut rec = 0u64;
                let mut byte = 0u64;
                for (k, s) in mine.iter().enumerate() {
                    let SegmentExtent::Records { records, bytes } = &s.extent else {
                        return Err(TestCaseError::fail("whole-file extent"));
                    };
                    prop_assert_eq!(records.start, rec);
                    prop_assert_eq!(bytes.start, byte);
                    prop_assert!(records.end > records.start);
                    prop_assert_eq!(bytes.start, offsets[records.start as usize]);
                    prop_assert_eq!(bytes.end, offsets[records.end as usize]);
                    let len = bytes.end - bytes.start;
                    if k + 1 < mine.len() {
                        prop_assert!(len >= smin && len <= smax, "segment of {} outside [{}, {}]", len, smin, smax);
                    } else {
                        prop_assert!(len <= smax.max(sizes[records.start as usize]));
                    }
                    rec = records.end;
                    byte = bytes.end;
                }
                prop_assert_eq!(rec, sizes.len() as u64);
                prop_assert_eq!(byte, *offsets.last().unwrap());
            }
            prop_assert_eq!(segs.iter().filter(|s| !s.file.starts_with("/p/f")).count(), 0);
            Ok(())
        })
        .map_err(|f| f.to_string())?;
    Ok("1000 random streams: coverage, no crossing, bounds, alignment; defaults 8 MiB / 128 MiB".into())
}

fn locality() -> Outcome {
    let mut instants = 0;
    let mut feasible = 0;
    for trial in 0..12u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let nfiles = rng.gen_range(2..7);
        let seeds: Vec<SeedFile> = (0..nfiles)
            .map(|i| {
                let mut nodes: Vec<usize> = (0..4).filter(|_| rng.gen_bool(0.4)).collect();
                if nodes.is_empty() {
                    nodes.push(rng.gen_range(0..4));
                }
                let recs = rng.gen_range(200..1200u64);
                SeedFile {
                    nodes,
                    path: format!("/loc/{trial}/f{i}"),
                    data: gensort::generate(i, recs * 100, trial).unwrap(),
                    index: Some(RecordIndex::fixed_width(recs, 100).unwrap()),
                }
            })
            .collect();
        let mut c = Cluster::boot(ClusterSpec::racks(2, 2).with_seed(trial), &seeds).map_err(e)?;
        c.login().map_err(e)?;
        let mut js = JobSpec::new(seeds.iter().map(|s| s.path.clone()).collect(), IDENTITY, OutputMode::Local);
        js.smin = 20_000;
        js.smax = 40_000;
        let r = c.run_job(js).map_err(e)?;
        for i in &r.instants {
            instants += 1;
            feasible += i.local_feasible as u32;
            check(!i.local_feasible || i.local_made, format!("trial {trial}: local pairing skipped at {}us", i.at_micros))?;
        }
    }
    let spec = ClusterSpec::racks(2, 2);
    let seeds: Vec<SeedFile> = (0..4)
        .map(|i| SeedFile {
            nodes: vec![i],
            path: format!("/loc/own{i}"),
            data: gensort::generate(i, 100 * 1000, 9).unwrap(),
            index: Some(RecordIndex::fixed_width(1000, 100).unwrap()),
        })
        .collect();
    let mut c = Cluster::boot(spec, &seeds).map_err(e)?;
    c.login().map_err(e)?;
    let mut js = JobSpec::new(seeds.iter().map(|s| s.path.clone()).collect(), IDENTITY, OutputMode::Local);
    js.smin = 100_000;
    js.smax = 100_000;
    c.run_job(js).map_err(e)?;
    let cross = c.cross_rack_slave_bytes();
    check(cross == 0, format!("{cross} cross-rack bytes"))?;
    Ok(format!("{instants} assignment instants ({feasible} with a local option) all local; 0 cross-rack bytes"))
}

#[derive(Default)]
struct Counter {
    got: Vec<u32>,
}

impl Actor for Counter {
    fn on_message(&mut self, _ctx: &mut Ctx<'_>, _from: SocketAddr, msg: Message) {
        self.got.push(u32::from_be_bytes(msg.payload[..4].try_into().unwrap()));
    }
}

fn socket_fds() -> Option<usize> {
    let dir = std::fs::read_dir("/proc/self/fd").ok()?;
    Some(
        dir.filter_map(|d| std::fs::read_link(d.ok()?.path()).ok())
            .filter(|l| l.to_string_lossy().starts_with("socket:"))
            .count(),
    )
}

fn transport() -> Outcome {
    const N: u32 = 10_000;
    let mut sim = Sim::new(88);
    sim.set_faults(NetFaultPlan {
        drop: 0.3,
        duplicate: 0.1,
        reorder_window: 8,
        latency: None,
    });
    let spec = |i: u8| NodeSpec {
        name: format!("t{i}"),
        msg_addr: SocketAddr::from(([10, 9, 0, i], 6000)),
        data_addr: SocketAddr::from(([10, 9, 0, i], 6001)),
        location: Some(Location::new("dc0", "r0", format!("t{i}"))),
    };
    let a = sim.add_node(spec(1), Box::<Counter>::default());
    let b = sim.add_node(spec(2), Box::<Counter>::default());
    let to = sim.host(b).msg_addr();
    sim.invoke::<Counter, _>(a, |_, ctx| {
        for i in 0..N {
            ctx.send(to, 0x0F00, 0, i.to_be_bytes().to_vec()).unwrap();
        }
    });
    sim.run_until_pred(Time::from_secs(3600), |s| s.actor::<Counter>(b).unwrap().got.len() >= N as usize);
    sim.run_for(Duration::from_secs(30));
    let got = &sim.actor::<Counter>(b).unwrap().got;
    check(got.len() == N as usize, format!("{} delivered", got.len()))?;
    check(got.iter().enumerate().all(|(i, v)| *v == i as u32), "out of order")?;
    let stats = sim.stats();
    check(stats.datagrams_dropped > 0 && stats.datagrams_duplicated > 0, "faults were not exercised")?;

    let before = socket_fds().ok_or("cannot inspect descriptors")?;
    let any: SocketAddr = "127.0.0.1:0".parse().unwrap();
    let hub = UdpNode::spawn(Box::<Counter>::default(), any, any, HostConfig::new(any, any)).map_err(e)?;
    let after_hub = socket_fds().ok_or("cannot inspect descriptors")?;
    let peers: Vec<UdpNode> = (0..3)
        .map(|_| UdpNode::spawn(Box::<Counter>::default(), any, any, HostConfig::new(any, any)).unwrap())
        .collect();
    let hub_addr = hub.msg_addr();
    for p in &peers {
        p.call::<Counter, _>(move |_, ctx| {
            for i in 0..50u32 {
                ctx.send(hub_addr, 0x0F00, 0, i.to_be_bytes().to_vec()).unwrap();
            }
        });
    }
    let deadline = Instant::now() + Duration::from_secs(10);
    while hub.call::<Counter, _>(|c, _| c.got.len()).unwrap_or(0) < 150 {
        check(Instant::now() < deadline, "loopback delivery timed out")?;
        std::thread::sleep(Duration::from_millis(10));
    }
    let after_all = socket_fds().ok_or("cannot inspect descriptors")?;
    check(after_hub - before == 2, format!("node opened {} sockets", after_hub - before))?;
    check(after_all - before == 8, format!("four nodes opened {} sockets", after_all - before))?;
    check(hub.local_endpoints().len() == 2, "hub endpoints")?;
    for p in peers {
        p.stop();
    }
    hub.stop();
    Ok(format!(
        "{N} messages exactly once in order ({} dropped, {} duplicated); 2 sockets per node with 3 peers",
        stats.datagrams_dropped, stats.datagrams_duplicated
    ))
}

fn security() -> Outcome {
    let allowed: SocketAddr = "10.1.1.5:9000".parse().unwrap();
    let outside: SocketAddr = "192.168.0.9:9000".parse().unwrap();
    let acct = UserAccount::new(
        "alice",
        "s3cret",
        b"salt",
        vec![sector::security::IpPattern::exact(allowed.ip())],
        vec![Privilege {
            prefix: "/data".into(),
            mode: Mode::READ,
        }],
    );
    let mut st = SecurityState::new(vec![acct], vec![]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let now = Time::from_secs(1);
    let session = st.verify_user(now, &mut rng, "alice", "s3cret", allowed).map_err(e)?;
    check(session.user == "alice" && session.privileges.len() == 1, "session privileges")?;
    check(st.verify_user(now, &mut rng, "alice", "wrong", allowed).is_err(), "wrong password accepted")?;
    check(st.verify_user(now, &mut rng, "alice", "s3cret", outside).is_err(), "address outside ACL accepted")?;
    let sid = session.session_id;
    check(st.check_access(now, sid, "/data/a.dat", Mode::READ).is_ok(), "read on /data/a.dat denied")?;
    check(st.check_access(now, sid, "/data/a.dat", Mode::WRITE).is_err(), "write on /data/a.dat allowed")?;
    check(st.check_access(now, sid, "/database/x", Mode::READ).is_err(), "/data granted /database")?;

    let spec = ClusterSpec {
        denied: vec![2],
        ..ClusterSpec::default()
    };
    let mut c = Cluster::boot(spec, &[]).map_err(e)?;
    let addr = c.slaves()[2].addr;
    while c.slave(2).stats().register_attempts < 100 {
        check(c.master().state().slave_by_addr(&addr).is_none(), "denied slave entered the slave table")?;
        check(!c.registered().contains(&addr), "denied slave registered")?;
        c.run_for(Duration::from_secs(1)).map_err(e)?;
    }
    check(c.master().state().slave_by_addr(&addr).is_none(), "denied slave entered the slave table")?;
    Ok(format!(
        "3 verify_user and 3 check_access cases; denied slave absent after {} join attempts",
        c.slave(2).stats().register_attempts
    ))
}

fn recovery_by_scan() -> Outcome {
    let mut seeds = sort_seeds(4, 100 * 800, 2, 31);
    seeds.push(SeedFile {
        nodes: vec![0, 1, 3],
        path: "/misc/notes.txt".into(),
        data: b"recover me".to_vec(),
        index: None,
    });
    let mut c = Cluster::boot(ClusterSpec::default(), &seeds).map_err(e)?;
    let snapshot = |c: &Cluster| -> BTreeMap<String, (u64, Option<u64>, BTreeSet<SocketAddr>)> {
        c.files()
            .into_iter()
            .map(|(p, f)| {
                let reps = f
                    .replicas
                    .iter()
                    .filter_map(|r| c.master().state().slave(*r).map(|s| s.status.address))
                    .collect();
                (p, (f.size, f.record_count, reps))
            })
            .collect()
    };
    let before = snapshot(&c);
    check(before.len() == seeds.len(), format!("{} files indexed at boot", before.len()))?;
    c.restart_master();
    c.await_registration(Duration::from_secs(60)).map_err(e)?;
    let after = snapshot(&c);
    check(after == before, "metadata differs after restart")?;
    Ok(format!("{} files with sizes and replica sets rebuilt", after.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("terasort at desk scale", terasort_at_scale),
        ("inverted index example", inverted_index_example),
        ("replication convergence", replication_convergence),
        ("fault-tolerant equivalence", fault_tolerant_equivalence),
        ("speculation bound", speculation_bound),
        ("segmentation properties", segmentation_properties),
        ("scheduling locality", locality),
        ("transport", transport),
        ("security", security),
        ("recovery by scan", recovery_by_scan),
    ];
    let mut failed = 0;
    for (n, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let res = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail} [{secs:.1}s]", n + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why} [{secs:.1}s]", n + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
