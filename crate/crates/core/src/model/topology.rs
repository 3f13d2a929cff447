//! Three-level cluster topology: data center, rack, node.

use std::collections::BTreeMap;
use std::fmt;
use std::net::SocketAddr;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelError;

/// Leaf position of a node in the topology tree.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Location {
    pub dc: String,
    pub rack: String,
    pub node: String,
}

impl Location {
    pub fn new(dc: impl Into<String>, rack: impl Into<String>, node: impl Into<String>) -> Self {
        Self {
            dc: dc.into(),
            rack: rack.into(),
            node: node.into(),
        }
    }

    /// 0 same node, 1 same rack, 2 same data center, 3 otherwise.
    pub fn distance(&self, other: &Location) -> u8 {
        if self.dc != other.dc {
            3
        } else if self.rack != other.rack {
            2
        } else if self.node != other.node {
            1
        } else {
            0
        }
    }

    pub fn same_rack(&self, other: &Location) -> bool {
        self.distance(other) <= 1
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.dc, self.rack, self.node)
    }
}

impl FromStr for Location {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split('/').collect();
        if parts.len() != 3 {
            return Err(ModelError::Topology(format!(
                "`{s}` has {} levels, expected dc/rack/node",
                parts.len()
            )));
        }
        if parts.iter().any(|p| p.is_empty()) {
            return Err(ModelError::Topology(format!("`{s}` has an empty level")));
        }
        Ok(Location::new(parts[0], parts[1], parts[2]))
    }
}

/// Distance between optional locations. Unknown locations are maximally far
/// from everything except themselves.
pub fn location_distance(a: Option<&Location>, b: Option<&Location>) -> u8 {
    match (a, b) {
        (Some(a), Some(b)) => a.distance(b),
        _ => 3,
    }
}

/// Node locations keyed by the node's messaging address.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    nodes: BTreeMap<SocketAddr, Location>,
}

impl Topology {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, addr: SocketAddr, loc: Location) -> Result<(), ModelError> {
        if let Some((other, _)) = self.nodes.iter().find(|(a, l)| **l == loc && **a != addr) {
            return Err(ModelError::Topology(format!(
                "location {loc} already assigned to {other}"
            )));
        }
        self.nodes.insert(addr, loc);
        Ok(())
    }

    pub fn location(&self, addr: &SocketAddr) -> Option<&Location> {
        self.nodes.get(addr)
    }

    pub fn distance(&self, a: &SocketAddr, b: &SocketAddr) -> Result<u8, ModelError> {
        let la = self
            .location(a)
            .ok_or_else(|| ModelError::UnknownNode(a.to_string()))?;
        let lb = self
            .location(b)
            .ok_or_else(|| ModelError::UnknownNode(b.to_string()))?;
        Ok(la.distance(lb))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SocketAddr, &Location)> {
        self.nodes.iter()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Parses `<dc>/<rack>/<node> <host:port>` lines. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let mut topo = Topology::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split_whitespace();
            let (Some(loc), Some(addr), None) = (fields.next(), fields.next(), fields.next())
            else {
                return Err(ModelError::Topology(format!(
                    "line {}: expected `<dc>/<rack>/<node> <host:port>`",
                    lineno + 1
                )));
            };
            let loc: Location = loc.parse().map_err(|e: ModelError| {
                ModelError::Topology(format!("line {}: {e}", lineno + 1))
            })?;
            let addr: SocketAddr = addr.parse().map_err(|_| {
                ModelError::Topology(format!("line {}: bad address `{addr}`", lineno + 1))
            })?;
            topo.insert(addr, loc)?;
        }
        Ok(topo)
    }

    pub fn to_config(&self) -> String {
        self.nodes
            .iter()
            .map(|(addr, loc)| format!("{loc} {addr}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn addr(s: &str) -> SocketAddr {
        s.parse().unwrap()
    }

    fn sample() -> Topology {
        Topology::parse(
            "# two data centers\n\
             dc1/rack1/n1 10.0.0.1:6000\n\
             dc1/rack1/n2 10.0.0.2:6000\n\
             dc1/rack2/n3 10.0.0.3:6000\n\
             dc2/rack1/n1 10.1.0.1:6000\n",
        )
        .unwrap()
    }

    #[test]
    fn level_encoding() {
        let t = sample();
        let n1 = addr("10.0.0.1:6000");
        assert_eq!(t.distance(&n1, &n1).unwrap(), 0);
        assert_eq!(t.distance(&n1, &addr("10.0.0.2:6000")).unwrap(), 1);
        assert_eq!(t.distance(&n1, &addr("10.0.0.3:6000")).unwrap(), 2);
        assert_eq!(t.distance(&n1, &addr("10.1.0.1:6000")).unwrap(), 3);
    }

    #[test]
    fn unknown_node_is_an_error() {
        let t = sample();
        assert!(matches!(
            t.distance(&addr("10.0.0.1:6000"), &addr("10.9.9.9:1")),
            Err(ModelError::UnknownNode(_))
        ));
    }

    #[test]
    fn deeper_trees_rejected() {
        assert!(Topology::parse("dc1/row1/rack1/n1 10.0.0.1:6000").is_err());
        assert!(Topology::parse("dc1/n1 10.0.0.1:6000").is_err());
        assert!(Topology::parse("dc1//n1 10.0.0.1:6000").is_err());
    }

    #[test]
    fn duplicate_location_rejected() {
        assert!(Topology::parse("a/b/c 10.0.0.1:1\na/b/c 10.0.0.2:1\n").is_err());
    }

    #[test]
    fn config_roundtrip() {
        let t = sample();
        assert_eq!(Topology::parse(&t.to_config()).unwrap(), t);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn loc() -> impl Strategy<Value = Location> {
            (0u8..3, 0u8..3, 0u8..3)
                .prop_map(|(d, r, n)| Location::new(format!("d{d}"), format!("r{r}"), format!("n{n}")))
        }

        // Depth of the lowest common ancestor, counted from the root.
        fn lca_depth(a: &Location, b: &Location) -> u8 {
            let pa = [&a.dc, &a.rack, &a.node];
            let pb = [&b.dc, &b.rack, &b.node];
            pa.iter().zip(pb.iter()).take_while(|(x, y)| x == y).count() as u8
        }

        proptest! {
            #[test]
            fn distance_is_metric_matching_lca(a in loc(), b in loc(), c in loc()) {
                let d = a.distance(&b);
                prop_assert!(d <= 3);
                prop_assert_eq!(d, b.distance(&a));
                prop_assert_eq!(a.distance(&a), 0);
                prop_assert_eq!(d, 3 - lca_depth(&a, &b));
                prop_assert!(a.distance(&c) <= a.distance(&b).max(b.distance(&c)));
            }
        }
    }
}
