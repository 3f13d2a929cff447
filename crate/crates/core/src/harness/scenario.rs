//! TOML scenarios: a cluster, seeded inputs, a fault script and a job.

use serde::{Deserialize, Serialize};

use crate::apps::{gensort, invidx, terasort, IDENTITY};
use crate::model::RecordIndex;

use super::reference::{differential_run, DiffJob, DiffReport, Stage};
use super::{ClusterSpec, FaultScript, HarnessError, SeedFile};

/// Generated or literal input data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputSpec {
    /// One sort slice per slave, each also stored on the next `copies - 1` slaves.
    Gensort {
        bytes_per_node: u64,
        #[serde(default = "one")]
        copies: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default = "sort_dir")]
        dir: String,
    },
    /// An unindexed text file on the given slaves.
    Text { path: String, text: String, nodes: Vec<usize> },
}

fn one() -> usize {
    1
}

fn sort_dir() -> String {
    "/sort".into()
}

/// Built-in job shapes, or an explicit stage list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "app", rename_all = "snake_case")]
pub enum JobShape {
    Terasort {
        #[serde(default = "sixteen")]
        buckets: u32,
        #[serde(default)]
        smin: Option<u64>,
        #[serde(default)]
        smax: Option<u64>,
    },
    Invidx,
    Identity {
        #[serde(default)]
        smin: Option<u64>,
        #[serde(default)]
        smax: Option<u64>,
    },
    Stages { stages: Vec<Stage> },
}

fn sixteen() -> u32 {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub cluster: ClusterSpec,
    #[serde(default)]
    pub inputs: Vec<InputSpec>,
    pub job: JobShape,
    #[serde(default)]
    pub faults: FaultScript,
    /// Runs the scenario once per seed starting at `cluster.seed`.
    #[serde(default = "one_u32")]
    pub seeds: u32,
}

fn one_u32() -> u32 {
    1
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Scenario(e.to_string()))
    }

    pub fn seed_files(&self) -> Result<Vec<SeedFile>, HarnessError> {
        let n = self.cluster.node_count();
        let mut out = Vec::new();
        for input in &self.inputs {
            match input {
                InputSpec::Gensort {
                    bytes_per_node,
                    copies,
                    seed,
                    dir,
                } => {
                    let slices = gensort::gen_sort_data(n, *bytes_per_node, *seed, dir)
                        .map_err(|e| HarnessError::Scenario(e.to_string()))?;
                    for s in slices {
                        out.push(SeedFile {
                            nodes: (0..(*copies).clamp(1, n)).map(|k| (s.node + k) % n).collect(),
                            path: s.path,
                            data: s.data,
                            index: Some(s.index),
                        });
                    }
                }
                InputSpec::Text { path, text, nodes } => out.push(SeedFile {
                    nodes: nodes.clone(),
                    path: path.clone(),
                    data: text.clone().into_bytes(),
                    index: None::<RecordIndex>,
                }),
            }
        }
        Ok(out)
    }

    pub fn diff_job(&self, seeds: &[SeedFile]) -> DiffJob {
        let inputs: Vec<String> = seeds.iter().map(|s| s.path.clone()).collect();
        let bounded = |s: Stage, smin: &Option<u64>, smax: &Option<u64>| {
            let (lo, hi) = (smin.unwrap_or(s.smin), smax.unwrap_or(s.smax));
            s.bounds(lo, hi)
        };
        let stages = match &self.job {
            JobShape::Terasort { buckets, smin, smax } => vec![
                bounded(Stage::new(terasort::HASH).buckets(*buckets), smin, smax),
                Stage::new(terasort::SORT).per_file(),
            ],
            JobShape::Invidx => vec![
                Stage::new(invidx::MAP).buckets(invidx::BUCKETS).per_file(),
                Stage::new(invidx::REDUCE).per_file(),
            ],
            JobShape::Identity { smin, smax } => vec![bounded(Stage::new(IDENTITY), smin, smax)],
            JobShape::Stages { stages } => stages.clone(),
        };
        DiffJob::new(inputs, stages)
    }

    /// Runs every seed and returns one report per seed.
    pub fn run(&self) -> Result<Vec<DiffReport>, HarnessError> {
        let seeds = self.seed_files()?;
        let job = self.diff_job(&seeds);
        (0..self.seeds.max(1))
            .map(|k| {
                let spec = ClusterSpec {
                    seed: self.cluster.seed.wrapping_add(k as u64),
                    ..self.cluster.clone()
                };
                differential_run(&spec, &seeds, &self.faults, &job)
            })
            .collect()
    }
}
