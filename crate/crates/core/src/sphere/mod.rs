//! Sphere compute engine: UDFs, segments, scheduling and bucket handling.

pub mod bucket;
pub mod engine;
pub mod schedule;
pub mod spe;
pub mod segment;
pub mod udf;

pub use schedule::{schedule, speculate, PendingSegment, RunningSegment, Spe, SpeId, SpeculationPolicy};
pub use segment::{segment_stream, SegmentError, SegmentPolicy, DEFAULT_SMAX, DEFAULT_SMIN};
pub use udf::{Emits, Emitter, Granularity, Udf, UdfError, UdfInput, UdfRegistry, UdfSpec};
