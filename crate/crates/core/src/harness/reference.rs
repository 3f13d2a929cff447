//! Serial reference execution and differential comparison.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::client::{JobSpec, Speculation};
use crate::model::{FileMeta, RecordIndex, SegmentExtent, SphereStream, StreamFile};
use crate::proto::OutputMode;
use crate::sphere::engine::run_segment;
use crate::sphere::{segment_stream, SegmentPolicy, UdfRegistry, DEFAULT_SMAX, DEFAULT_SMIN};

use super::{Cluster, ClusterSpec, FaultScript, HarnessError, SeedFile};

/// One stage of a UDF chain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub udf: String,
    #[serde(default)]
    pub buckets: Option<u32>,
    #[serde(default)]
    pub per_file: bool,
    #[serde(default = "default_smin")]
    pub smin: u64,
    #[serde(default = "default_smax")]
    pub smax: u64,
    #[serde(default)]
    pub params: String,
}

fn default_smin() -> u64 {
    DEFAULT_SMIN
}

fn default_smax() -> u64 {
    DEFAULT_SMAX
}

impl Stage {
    pub fn new(udf: impl Into<String>) -> Self {
        Self {
            udf: udf.into(),
            buckets: None,
            per_file: false,
            smin: DEFAULT_SMIN,
            smax: DEFAULT_SMAX,
            params: String::new(),
        }
    }

    pub fn buckets(mut self, b: u32) -> Self {
        self.buckets = Some(b);
        self
    }

    pub fn per_file(mut self) -> Self {
        self.per_file = true;
        self
    }

    pub fn bounds(mut self, smin: u64, smax: u64) -> Self {
        self.smin = smin;
        self.smax = smax;
        self
    }

    fn policy(&self, spe_count: u64) -> SegmentPolicy {
        SegmentPolicy {
            spe_count: spe_count.max(1),
            smin: self.smin,
            smax: self.smax,
            per_file: self.per_file,
        }
    }

    pub fn job_spec(&self, inputs: Vec<String>, output_prefix: &str) -> JobSpec {
        let mut j = JobSpec::new(
            inputs,
            self.udf.clone(),
            match self.buckets {
                Some(b) => OutputMode::Buckets(b),
                None => OutputMode::Local,
            },
        );
        j.output_prefix = output_prefix.to_string();
        j.per_file = self.per_file;
        j.smin = self.smin;
        j.smax = self.smax;
        j.params = self.params.clone().into_bytes();
        j
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataFile {
    pub path: String,
    pub data: Vec<u8>,
    pub index: Option<RecordIndex>,
}

fn stream_of(files: &[DataFile]) -> SphereStream {
    SphereStream::new(
        files
            .iter()
            .map(|f| StreamFile {
                meta: FileMeta {
                    path: f.path.clone(),
                    size: f.data.len() as u64,
                    record_count: f.index.as_ref().map(|i| i.record_count()),
                    replicas: Default::default(),
                    timestamp: 0,
                },
                index: f.index.clone(),
            })
            .collect(),
    )
}

/// Runs `stages` serially over `inputs`, segmenting as for `spe_count` SPEs.
pub fn run_reference(
    registry: &UdfRegistry,
    stages: &[Stage],
    inputs: Vec<DataFile>,
    spe_count: u64,
) -> Result<Vec<DataFile>, HarnessError> {
    let err = |e: String| HarnessError::Reference(e);
    let mut files = inputs;
    for (n, stage) in stages.iter().enumerate() {
        let udf = registry.resolve(&stage.udf).map_err(|e| err(e.to_string()))?;
        let segments = segment_stream(&stream_of(&files), &stage.policy(spe_count), stage.params.as_bytes())
            .map_err(|e| err(e.to_string()))?;
        let by_path: BTreeMap<&str, &DataFile> = files.iter().map(|f| (f.path.as_str(), f)).collect();
        let mut local = Vec::new();
        let mut buckets: BTreeMap<u32, (Vec<u8>, RecordIndex)> = BTreeMap::new();
        for seg in &segments {
            let f = by_path[seg.file.as_str()];
            let (data, index) = match &seg.extent {
                SegmentExtent::Records { records, bytes } => (
                    &f.data[bytes.start as usize..bytes.end as usize],
                    f.index.as_ref().and_then(|i| i.slice(records.clone())),
                ),
                SegmentExtent::WholeFile { .. } => (&f.data[..], f.index.clone()),
            };
            let run = run_segment(udf, seg, data, index.as_ref(), stage.buckets).map_err(|e| err(format!("{e:?}")))?;
            match stage.buckets {
                None => {
                    let out = run.output.into_local();
                    local.push(DataFile {
                        path: format!("/reference/s{n}.out.{:06}", seg.segment_id),
                        data: out.data,
                        index: Some(out.index),
                    });
                }
                Some(_) => {
                    for (b, d) in run.output.into_buckets() {
                        let e = buckets.entry(b).or_default();
                        e.0.extend_from_slice(&d.data);
                        e.1.extend(&d.index);
                    }
                }
            }
        }
        files = match stage.buckets {
            None => local,
            Some(b) => (0..b)
                .map(|i| {
                    let (data, index) = buckets.remove(&i).unwrap_or_default();
                    DataFile {
                        path: format!("/reference/s{n}.bucket.{i}"),
                        data,
                        index: Some(index),
                    }
                })
                .collect(),
        };
    }
    Ok(files)
}

/// Output in comparable form. Bucket files keep segment contributions in
/// arrival order, so bucketed output compares as sorted records per bucket.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Canonical {
    Ordered(Vec<u8>),
    Bucketed(Vec<Vec<Vec<u8>>>),
}

pub fn canonical(files: &[DataFile], bucketed: bool) -> Result<Canonical, String> {
    if !bucketed {
        return Ok(Canonical::Ordered(files.iter().flat_map(|f| f.data.iter().copied()).collect()));
    }
    let mut out = Vec::new();
    for f in files {
        let mut recs: Vec<Vec<u8>> = match &f.index {
            Some(ix) => ix
                .split(&f.data)
                .map_err(|e| format!("{}: {e}", f.path))?
                .into_iter()
                .map(<[u8]>::to_vec)
                .collect(),
            None if f.data.is_empty() => Vec::new(),
            None => return Err(format!("{}: bucket without index", f.path)),
        };
        recs.sort();
        out.push(recs);
    }
    Ok(Canonical::Bucketed(out))
}

/// `None` when equal, otherwise where the two first differ.
pub fn divergence(got: &Canonical, want: &Canonical) -> Option<String> {
    match (got, want) {
        (Canonical::Ordered(a), Canonical::Ordered(b)) => {
            if a == b {
                return None;
            }
            let at = a.iter().zip(b).position(|(x, y)| x != y).unwrap_or(a.len().min(b.len()));
            Some(format!("first difference at byte {at} (lengths {} vs {})", a.len(), b.len()))
        }
        (Canonical::Bucketed(a), Canonical::Bucketed(b)) => {
            if a.len() != b.len() {
                return Some(format!("{} buckets vs {}", a.len(), b.len()));
            }
            for (i, (x, y)) in a.iter().zip(b).enumerate() {
                if x != y {
                    let at = x.iter().zip(y).position(|(p, q)| p != q).unwrap_or(x.len().min(y.len()));
                    return Some(format!("bucket {i}: first difference at sorted record {at} ({} vs {} records)", x.len(), y.len()));
                }
            }
            None
        }
        _ => Some("output modes differ".into()),
    }
}

/// A chained job for differential runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffJob {
    pub inputs: Vec<String>,
    pub stages: Vec<Stage>,
    #[serde(default = "default_prefix")]
    pub output_prefix: String,
    #[serde(default = "default_speculation")]
    pub speculation: Speculation,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
}

fn default_prefix() -> String {
    "/out".into()
}

fn default_speculation() -> Speculation {
    Speculation::Estimated
}

fn default_timeout() -> f64 {
    10.0
}

impl DiffJob {
    pub fn new(inputs: Vec<String>, stages: Vec<Stage>) -> Self {
        Self {
            inputs,
            stages,
            output_prefix: default_prefix(),
            speculation: default_speculation(),
            timeout_secs: default_timeout(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub job_id: u32,
    pub udf: String,
    pub segments: u64,
    pub attempts: u64,
    pub retries: u64,
    pub speculated: u64,
    pub excluded: usize,
    pub elapsed_secs: f64,
    pub outputs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffReport {
    pub seed: u64,
    pub matched: bool,
    pub divergence: Option<String>,
    pub stages: Vec<StageSummary>,
    pub retries: u64,
    pub speculated: u64,
    pub cross_rack_bytes: u64,
    pub elapsed_secs: f64,
    pub output_bytes: u64,
}

/// Runs `job` on a fresh cluster under `script` and compares the result with
/// the serial reference over the same seeded inputs.
pub fn differential_run(
    spec: &ClusterSpec,
    seeds: &[SeedFile],
    script: &FaultScript,
    job: &DiffJob,
) -> Result<DiffReport, HarnessError> {
    let mut cluster = Cluster::boot(spec.clone(), seeds)?;
    cluster.login()?;
    let spe_count = cluster.slaves().iter().filter(|s| s.admitted).count() as u64 * spec.spe_per_node.max(1) as u64;
    let started = cluster.now();
    cluster.arm(script);
    let mut inputs = job.inputs.clone();
    let mut stages = Vec::new();
    let mut failure = None;
    let mut seg_counts = Vec::new();
    for (n, stage) in job.stages.iter().enumerate() {
        let mut js = stage.job_spec(inputs.clone(), &format!("{}/s{n}", job.output_prefix.trim_end_matches('/')));
        js.speculation = job.speculation;
        js.timeout = std::time::Duration::from_secs_f64(job.timeout_secs);
        let id = cluster.submit(crate::client::Op::Job(js));
        let report = match cluster.wait(id)?? {
            crate::client::OpResult::Job(r) => r,
            _ => return Err(crate::client::ClientError::Protocol.into()),
        };
        seg_counts.push(report.segments);
        stages.push(StageSummary {
            job_id: report.job_id,
            udf: stage.udf.clone(),
            segments: report.segments,
            attempts: report.attempts,
            retries: report.retries,
            speculated: report.speculated,
            excluded: report.excluded.len(),
            elapsed_secs: report.elapsed().as_secs_f64(),
            outputs: report.output.len(),
        });
        match report.collect() {
            Ok(paths) => inputs = paths,
            Err(f) => {
                failure = Some(format!("stage {n} failed segments: {f:?}"));
                break;
            }
        }
    }
    let elapsed_secs = (cluster.now() - started).as_secs_f64();
    let mut got_files = Vec::new();
    if failure.is_none() {
        for p in &inputs {
            let (data, index) = cluster.download(p)?;
            got_files.push(DataFile {
                path: p.clone(),
                data,
                index,
            });
        }
    }

    let mut seeded: BTreeMap<&str, &SeedFile> = BTreeMap::new();
    for s in seeds {
        seeded.entry(s.path.as_str()).or_insert(s);
    }
    let ref_inputs = job
        .inputs
        .iter()
        .map(|p| {
            let s = seeded
                .get(crate::model::normalize_path(p).unwrap_or_default().as_str())
                .or_else(|| seeded.get(p.as_str()))
                .ok_or_else(|| HarnessError::Reference(format!("{p} was not seeded")))?;
            Ok(DataFile {
                path: s.path.clone(),
                data: s.data.clone(),
                index: s.index.clone(),
            })
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let want_files = run_reference(cluster.registry(), &job.stages, ref_inputs, spe_count)?;
    let bucketed = job.stages.last().is_some_and(|s| s.buckets.is_some());
    let divergence = match failure {
        Some(f) => Some(f),
        None => {
            let got = canonical(&got_files, bucketed).map_err(HarnessError::Reference)?;
            let want = canonical(&want_files, bucketed).map_err(HarnessError::Reference)?;
            divergence(&got, &want)
        }
    };
    Ok(DiffReport {
        seed: spec.seed,
        matched: divergence.is_none(),
        divergence,
        retries: stages.iter().map(|s| s.retries).sum(),
        speculated: stages.iter().map(|s| s.speculated).sum(),
        stages,
        cross_rack_bytes: cluster.cross_rack_slave_bytes(),
        elapsed_secs,
        output_bytes: got_files.iter().map(|f| f.data.len() as u64).sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::apps::{builtin_registry, gensort, invidx, terasort, IDENTITY};

    #[test]
    fn identity_chain_returns_input() {
        let reg = builtin_registry();
        let data = gensort::generate(0, 100 * 300, 3).unwrap();
        let ix = RecordIndex::fixed_width(300, 100).unwrap();
        let input = DataFile {
            path: "/in/a".into(),
            data: data.clone(),
            index: Some(ix),
        };
        let out = run_reference(&reg, &[Stage::new(IDENTITY).bounds(1000, 5000)], vec![input], 4).unwrap();
        assert!(out.len() > 1);
        assert_eq!(out.iter().flat_map(|f| f.data.clone()).collect::<Vec<u8>>(), data);
    }

    #[test]
    fn terasort_chain_matches_comparison_sort() {
        let reg = builtin_registry();
        let slices = gensort::gen_sort_data(2, 100 * 5000, 5, "/sort").unwrap();
        let inputs: Vec<DataFile> = slices
            .iter()
            .map(|s| DataFile {
                path: s.path.clone(),
                data: s.data.clone(),
                index: Some(s.index.clone()),
            })
            .collect();
        let all: Vec<u8> = slices.iter().flat_map(|s| s.data.clone()).collect();
        let stages = [
            Stage::new(terasort::HASH).buckets(8).bounds(64 * 1024, 1 << 20),
            Stage::new(terasort::SORT).per_file(),
        ];
        let out = run_reference(&reg, &stages, inputs, 4).unwrap();
        let got: Vec<u8> = out.iter().flat_map(|f| f.data.clone()).collect();
        let mut recs: Vec<&[u8]> = all.chunks(100).collect();
        recs.sort();
        assert_eq!(got, recs.concat());
    }

    #[test]
    fn invidx_chain_reproduces_worked_example() {
        let reg = builtin_registry();
        let pages = vec![
            DataFile {
                path: "/web/w1.html".into(),
                data: b"bee cow".to_vec(),
                index: None,
            },
            DataFile {
                path: "/web/w2.html".into(),
                data: b"bee camel".to_vec(),
                index: None,
            },
        ];
        let stages = [Stage::new(invidx::MAP).buckets(invidx::BUCKETS).per_file(), Stage::new(invidx::REDUCE).per_file()];
        let out = run_reference(&reg, &stages, pages, 2).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].data, b"bee\tw1,w2\n");
        assert_eq!(out[1].data, b"camel\tw2\ncow\tw1\n");
    }

    #[test]
    fn divergence_reports_position() {
        let a = Canonical::Ordered(b"abcdef".to_vec());
        let b = Canonical::Ordered(b"abcxef".to_vec());
        assert_eq!(divergence(&a, &a), None);
        assert!(divergence(&a, &b).unwrap().contains("byte 3"));
        let x = Canonical::Bucketed(vec![vec![b"a".to_vec()], vec![]]);
        let y = Canonical::Bucketed(vec![vec![b"a".to_vec()], vec![b"b".to_vec()]]);
        assert!(divergence(&x, &y).unwrap().starts_with("bucket 1"));
    }
}
