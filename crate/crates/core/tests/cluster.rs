use sector::apps::{gensort, invidx, terasort, IDENTITY};
use sector::client::{ClientError, JobSpec, Op, OpResult};
use sector::harness::reference::{differential_run, DiffJob, Stage};
use sector::harness::{Cluster, ClusterSpec, FaultScript, HarnessError, SeedFile};
use sector::model::RecordIndex;
use sector::proto::{FsError, OutputMode};

fn sort_seeds(nodes: usize, bytes: u64, copies: usize) -> Vec<SeedFile> {
    gensort::gen_sort_data(nodes, bytes, 21, "/sort")
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

#[test]
fn upload_download_roundtrip() {
    let mut c = Cluster::boot(ClusterSpec::default(), &[]).unwrap();
    assert_eq!(c.registered().len(), 4);
    c.login().unwrap();
    let data: Vec<u8> = (0..250_000u32).map(|i| (i % 251) as u8).collect();
    let ix = RecordIndex::fixed_width(2500, 100).unwrap();
    let meta = c.upload("/data/a.bin", data.clone(), Some(ix.clone())).unwrap();
    assert_eq!(meta.size, data.len() as u64);
    assert_eq!(meta.record_count, Some(2500));
    let (got, gix) = c.download("/data/a.bin").unwrap();
    assert_eq!(got, data);
    assert_eq!(gix, Some(ix.clone()));
    match c.op(Op::DownloadIndex("/data/a.bin".into())).unwrap() {
        OpResult::Index(i) => assert_eq!(i, ix),
        other => panic!("{other:?}"),
    }
    match c.op(Op::Ls("/data".into())).unwrap() {
        OpResult::Listing(l) => assert_eq!(l.len(), 1),
        other => panic!("{other:?}"),
    }
    assert!(matches!(
        c.op(Op::Upload {
            path: "/data/a.bin".into(),
            data: vec![1],
            index: None
        }),
        Err(HarnessError::Client(ClientError::Fs(FsError::Exists(_))))
    ));
    c.op(Op::Rm("/data/a.bin".into())).unwrap();
    assert!(matches!(
        c.op(Op::Stat("/data/a.bin".into())),
        Err(HarnessError::Client(ClientError::Fs(FsError::NotFound(_))))
    ));
}

#[test]
fn local_identity_job_keeps_segment_order() {
    let seeds = sort_seeds(4, 100 * 2000, 1);
    let mut c = Cluster::boot(ClusterSpec::default(), &seeds).unwrap();
    c.login().unwrap();
    let mut js = JobSpec::new(seeds.iter().map(|s| s.path.clone()).collect(), IDENTITY, OutputMode::Local);
    js.smin = 50_000;
    js.smax = 50_000;
    let report = c.run_job(js).unwrap();
    assert_eq!(report.segments, 16);
    let paths = report.collect().unwrap();
    assert_eq!(paths.len(), 16);
    let mut all = Vec::new();
    for p in &paths {
        all.extend(c.download(p).unwrap().0);
    }
    let want: Vec<u8> = seeds.iter().flat_map(|s| s.data.clone()).collect();
    assert_eq!(all, want);
    assert!(report.instants.iter().all(|i| !i.local_feasible || i.local_made));
}

#[test]
fn small_terasort_matches_reference() {
    let seeds = sort_seeds(4, 100 * 3000, 1);
    let job = DiffJob::new(
        seeds.iter().map(|s| s.path.clone()).collect(),
        vec![
            Stage::new(terasort::HASH).buckets(8).bounds(60_000, 1 << 20),
            Stage::new(terasort::SORT).per_file(),
        ],
    );
    let r = differential_run(&ClusterSpec::default(), &seeds, &FaultScript::default(), &job).unwrap();
    assert!(r.matched, "{:?}", r.divergence);
    assert_eq!(r.stages[1].outputs, 8);
}

#[test]
fn invidx_worked_example() {
    let seeds = vec![
        SeedFile {
            nodes: vec![0],
            path: "/web/w1.html".into(),
            data: b"bee cow".to_vec(),
            index: None,
        },
        SeedFile {
            nodes: vec![1],
            path: "/web/w2.html".into(),
            data: b"bee camel".to_vec(),
            index: None,
        },
    ];
    let mut c = Cluster::boot(ClusterSpec::default(), &seeds).unwrap();
    c.login().unwrap();
    let mut map = JobSpec::new(vec!["/web/w1.html".into(), "/web/w2.html".into()], invidx::MAP, OutputMode::Buckets(invidx::BUCKETS));
    map.per_file = true;
    map.output_prefix = "/idx".into();
    let r = c.run_job(map).unwrap();
    let buckets = r.collect().unwrap();
    assert_eq!(buckets.len(), 27);
    let mut reduce = JobSpec::new(buckets, invidx::REDUCE, OutputMode::Local);
    reduce.per_file = true;
    reduce.output_prefix = "/idx2".into();
    let r = c.run_job(reduce).unwrap();
    let outs = r.collect().unwrap();
    assert_eq!(outs.len(), 2);
    assert_eq!(c.download(&outs[0]).unwrap().0, b"bee\tw1,w2\n");
    assert_eq!(c.download(&outs[1]).unwrap().0, b"camel\tw2\ncow\tw1\n");
}
