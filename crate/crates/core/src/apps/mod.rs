//! Built-in Sphere applications and their serial reference implementations.

pub mod gensort;
pub mod invidx;
pub mod terasort;

use crate::sphere::{Emits, Granularity, UdfRegistry, UdfSpec};

pub const IDENTITY: &str = "identity";

/// A registry holding every built-in UDF.
pub fn builtin_registry() -> UdfRegistry {
    let mut r = UdfRegistry::new();
    register_builtins(&mut r);
    r
}

pub fn register_builtins(r: &mut UdfRegistry) {
    r.register(UdfSpec::new(IDENTITY, Granularity::PerRecord, Emits::Local), |input, out| {
        for (i, rec) in input.records.iter().enumerate() {
            out.emit(rec).map_err(|e| crate::sphere::UdfError::new(i as u64, e))?;
        }
        Ok(())
    })
    .expect("fresh registry");
    terasort::register(r);
    invidx::register(r);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_resolve() {
        let r = builtin_registry();
        let names: Vec<&str> = r.names().collect();
        for n in [IDENTITY, terasort::HASH, terasort::SORT, invidx::MAP, invidx::REDUCE] {
            assert!(names.contains(&n), "{n}");
        }
    }
}
