use std::fmt;
use std::net::IpAddr;
use std::str::FromStr;

/// An exact address or a CIDR-style prefix such as `10.0.0.0/24`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IpPattern {
    addr: IpAddr,
    prefix_len: u8,
}

impl IpPattern {
    pub fn exact(addr: IpAddr) -> Self {
        Self {
            addr,
            prefix_len: max_len(&addr),
        }
    }

    pub fn matches(&self, ip: IpAddr) -> bool {
        let (a, b) = match (self.addr, ip) {
            (IpAddr::V4(a), IpAddr::V4(b)) => (a.octets().to_vec(), b.octets().to_vec()),
            (IpAddr::V6(a), IpAddr::V6(b)) => (a.octets().to_vec(), b.octets().to_vec()),
            (IpAddr::V4(a), IpAddr::V6(b)) => match b.to_ipv4_mapped() {
                Some(b) => (a.octets().to_vec(), b.octets().to_vec()),
                None => return false,
            },
            (IpAddr::V6(_), IpAddr::V4(_)) => return false,
        };
        let mut bits = self.prefix_len as usize;
        for (x, y) in a.iter().zip(&b) {
            if bits == 0 {
                break;
            }
            let take = bits.min(8);
            let mask = !0u8 << (8 - take);
            if x & mask != y & mask {
                return false;
            }
            bits -= take;
        }
        true
    }
}

fn max_len(addr: &IpAddr) -> u8 {
    match addr {
        IpAddr::V4(_) => 32,
        IpAddr::V6(_) => 128,
    }
}

impl FromStr for IpPattern {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let (addr, len) = match s.split_once('/') {
            Some((a, l)) => (a, Some(l)),
            None => (s, None),
        };
        let addr: IpAddr = addr.parse().map_err(|_| format!("bad address `{s}`"))?;
        let prefix_len = match len {
            Some(l) => l.parse::<u8>().map_err(|_| format!("bad prefix length in `{s}`"))?,
            None => max_len(&addr),
        };
        if prefix_len > max_len(&addr) {
            return Err(format!("prefix length too long in `{s}`"));
        }
        Ok(Self { addr, prefix_len })
    }
}

impl fmt::Display for IpPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.prefix_len == max_len(&self.addr) {
            write!(f, "{}", self.addr)
        } else {
            write!(f, "{}/{}", self.addr, self.prefix_len)
        }
    }
}
