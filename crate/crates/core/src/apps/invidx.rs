//! Inverted index as two stages: map each page's words into per-letter
//! buckets, then reduce each bucket into sorted `(word, pages)` entries.

use std::collections::{BTreeMap, BTreeSet};

use crate::sphere::{Emits, Emitter, Granularity, UdfError, UdfInput, UdfRegistry, UdfSpec};

pub const MAP: &str = "invidx.map";
pub const REDUCE: &str = "invidx.reduce";
/// One bucket per letter plus an overflow bucket.
pub const BUCKETS: u32 = 27;

/// Lower-cased runs of ASCII letters.
pub fn words(text: &[u8]) -> Vec<String> {
    text.split(|b| !b.is_ascii_alphabetic())
        .filter(|w| !w.is_empty())
        .map(|w| String::from_utf8_lossy(w).to_ascii_lowercase())
        .collect()
}

/// `a` goes to 0, `z` to 25 and anything else to the overflow slot, scaled to `buckets`.
pub fn bucket_of(word: &str, buckets: u32) -> u32 {
    let slot = match word.as_bytes().first() {
        Some(c @ b'a'..=b'z') => (c - b'a') as u64,
        _ => 26,
    };
    (slot * buckets.max(1) as u64 / BUCKETS as u64) as u32
}

pub fn posting(word: &str, page: &str) -> Vec<u8> {
    let mut p = Vec::with_capacity(word.len() + page.len() + 1);
    p.extend_from_slice(word.as_bytes());
    p.push(0);
    p.extend_from_slice(page.as_bytes());
    p
}

pub fn parse_posting(rec: &[u8]) -> Option<(&str, &str)> {
    let at = rec.iter().position(|&b| b == 0)?;
    let word = std::str::from_utf8(&rec[..at]).ok()?;
    let page = std::str::from_utf8(&rec[at + 1..]).ok()?;
    (!word.is_empty() && !page.is_empty()).then_some((word, page))
}

/// One index line.
pub fn entry_line(word: &str, pages: &BTreeSet<String>) -> Vec<u8> {
    let list: Vec<&str> = pages.iter().map(String::as_str).collect();
    format!("{word}\t{}\n", list.join(",")).into_bytes()
}

fn map(input: &UdfInput<'_>, out: &mut Emitter) -> Result<(), UdfError> {
    let page = input.page_name();
    let b = out.bucket_count();
    for (i, rec) in input.records.iter().enumerate() {
        for w in words(rec) {
            out.emit_to(bucket_of(&w, b), &posting(&w, page))
                .map_err(|e| UdfError::new(i as u64, e))?;
        }
    }
    Ok(())
}

fn reduce(input: &UdfInput<'_>, out: &mut Emitter) -> Result<(), UdfError> {
    let mut index: BTreeMap<&str, BTreeSet<String>> = BTreeMap::new();
    for (i, rec) in input.records.iter().enumerate() {
        let (w, p) = parse_posting(rec).ok_or_else(|| UdfError::new(i as u64, "malformed posting"))?;
        index.entry(w).or_default().insert(p.to_string());
    }
    for (w, pages) in index {
        out.emit(&entry_line(w, &pages)).map_err(|e| UdfError::new(0, e))?;
    }
    Ok(())
}

pub fn register(r: &mut UdfRegistry) {
    r.register(UdfSpec::new(MAP, Granularity::PerFile, Emits::Buckets), map)
        .expect("unique name");
    r.register(UdfSpec::new(REDUCE, Granularity::PerSegment, Emits::Local), reduce)
        .expect("unique name");
}

/// Serial oracle: the index of `pages`, split into per-bucket text.
pub fn reference_index(pages: &[(String, Vec<u8>)], buckets: u32) -> BTreeMap<u32, Vec<u8>> {
    let mut index: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for (name, text) in pages {
        for w in words(text) {
            index.entry(w).or_default().insert(name.clone());
        }
    }
    let mut out: BTreeMap<u32, Vec<u8>> = BTreeMap::new();
    for (w, p) in &index {
        out.entry(bucket_of(w, buckets)).or_default().extend(entry_line(w, p));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_map(page: &str, text: &[u8]) -> BTreeMap<u32, Vec<Vec<u8>>> {
        let mut reg = UdfRegistry::new();
        register(&mut reg);
        let recs = [text];
        let input = UdfInput {
            file: page,
            segment_id: 0,
            params: &[],
            records: &recs,
        };
        let mut out = Emitter::buckets(BUCKETS);
        (reg.resolve(MAP).unwrap().func)(&input, &mut out).unwrap();
        out.into_buckets()
            .into_iter()
            .map(|(b, d)| (b, d.index.split(&d.data).unwrap().into_iter().map(<[u8]>::to_vec).collect()))
            .collect()
    }

    fn run_reduce(records: &[Vec<u8>]) -> Result<Vec<u8>, UdfError> {
        let mut reg = UdfRegistry::new();
        register(&mut reg);
        let refs: Vec<&[u8]> = records.iter().map(|r| r.as_slice()).collect();
        let input = UdfInput {
            file: "/idx/1.bucket.1",
            segment_id: 0,
            params: &[],
            records: &refs,
        };
        let mut out = Emitter::local();
        (reg.resolve(REDUCE).unwrap().func)(&input, &mut out)?;
        Ok(out.into_local().data)
    }

    #[test]
    fn worked_example() {
        let w1 = run_map("/web/w1.html", b"bee cow");
        let w2 = run_map("/web/w2.html", b"Bee, camel!");
        assert_eq!(w1[&1], vec![posting("bee", "w1")]);
        assert_eq!(w1[&2], vec![posting("cow", "w1")]);
        assert_eq!(w2[&1], vec![posting("bee", "w2")]);
        assert_eq!(w2[&2], vec![posting("camel", "w2")]);
        let b1 = [w1[&1].clone(), w2[&1].clone()].concat();
        let b2 = [w1[&2].clone(), w2[&2].clone()].concat();
        assert_eq!(run_reduce(&b1).unwrap(), b"bee\tw1,w2\n");
        assert_eq!(run_reduce(&b2).unwrap(), b"camel\tw2\ncow\tw1\n");
        assert!(run_map("/web/empty.html", b"").is_empty());
        assert!(run_reduce(&[]).unwrap().is_empty());
    }

    #[test]
    fn repeated_words_merge() {
        let m = run_map("/p/x.txt", b"ant ant Ant");
        assert_eq!(m[&0].len(), 3);
        assert_eq!(run_reduce(&m[&0]).unwrap(), b"ant\tx\n");
        assert!(run_reduce(&[b"no-separator".to_vec()]).is_err());
    }

    #[test]
    fn buckets_follow_letters() {
        assert_eq!(bucket_of("apple", BUCKETS), 0);
        assert_eq!(bucket_of("zebra", BUCKETS), 25);
        assert_eq!(bucket_of("", BUCKETS), 26);
        assert_eq!(bucket_of("zebra", 1), 0);
        assert_eq!(words(b"It's a DOG-eat-dog 42x"), ["it", "s", "a", "dog", "eat", "dog", "x"]);
    }

    proptest::proptest! {
        /// Map then reduce per bucket equals a direct single-process index.
        #[test]
        fn matches_reference_index(pages in proptest::collection::vec("[a-zA-Z ,.]{0,60}", 1..6)) {
            let named: Vec<(String, Vec<u8>)> = pages.iter().enumerate().map(|(i, t)| (format!("p{i}"), t.as_bytes().to_vec())).collect();
            let mut buckets: BTreeMap<u32, Vec<Vec<u8>>> = BTreeMap::new();
            for (n, t) in &named {
                for (b, recs) in run_map(&format!("/c/{n}.txt"), t) {
                    buckets.entry(b).or_default().extend(recs);
                }
            }
            let got: BTreeMap<u32, Vec<u8>> = buckets.iter().map(|(b, r)| (*b, run_reduce(r).unwrap())).collect();
            proptest::prop_assert_eq!(got, reference_index(&named, BUCKETS));
        }
    }
}
