//! Accounts, sessions, access rules and slave admission.

mod acl;

use std::collections::BTreeMap;
use std::net::{IpAddr, SocketAddr};
use std::time::Duration;

use rand::Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{normalize_path, path_has_prefix};
use crate::proto::{self, AccessDenied, Mode, Msg, Outbox, Privilege, Rejection, SecurityReply, SessionInfo};
use crate::runtime::{Actor, Ctx, Delivery};
use crate::time::Time;
use crate::transport::Message;

pub use acl::IpPattern;

pub const DIGEST_ROUNDS: u32 = 4096;
pub const SESSION_TTL: Duration = Duration::from_secs(8 * 3600);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("duplicate user `{0}`")]
    DuplicateUser(String),
}

/// Salted iterated SHA-256 of a password.
pub fn password_digest(password: &str, salt: &[u8]) -> [u8; 32] {
    let mut h: [u8; 32] = Sha256::new()
        .chain_update(salt)
        .chain_update(password.as_bytes())
        .finalize()
        .into();
    for _ in 1..DIGEST_ROUNDS {
        h = Sha256::new().chain_update(salt).chain_update(h).finalize().into();
    }
    h
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserAccount {
    pub username: String,
    pub password_digest: [u8; 32],
    pub salt: Vec<u8>,
    pub ip_acl: Vec<IpPattern>,
    pub privileges: Vec<Privilege>,
}

impl UserAccount {
    pub fn new(username: &str, password: &str, salt: &[u8], ip_acl: Vec<IpPattern>, privileges: Vec<Privilege>) -> Self {
        Self {
            username: username.to_string(),
            password_digest: password_digest(password, salt),
            salt: salt.to_vec(),
            ip_acl,
            privileges,
        }
    }

    /// Parses `user:pwdigest:salt:ipacl1,ipacl2:/prefix=RW,/other=R`.
    pub fn parse_line(line: &str) -> Result<Self, String> {
        let fields: Vec<&str> = line.splitn(5, ':').collect();
        if fields.len() != 5 {
            return Err("expected 5 colon-separated fields".into());
        }
        let username = fields[0].trim();
        if username.is_empty() {
            return Err("empty user name".into());
        }
        let digest = hex::decode(fields[1].trim()).map_err(|e| format!("digest: {e}"))?;
        let password_digest: [u8; 32] = digest.try_into().map_err(|_| "digest must be 32 bytes".to_string())?;
        let salt = hex::decode(fields[2].trim()).map_err(|e| format!("salt: {e}"))?;
        let ip_acl = fields[3]
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<IpPattern>())
            .collect::<Result<Vec<_>, _>>()?;
        if ip_acl.is_empty() {
            return Err("ip access list is empty".into());
        }
        let privileges = parse_privileges(fields[4])?;
        Ok(Self {
            username: username.to_string(),
            password_digest,
            salt,
            ip_acl,
            privileges,
        })
    }

    pub fn to_line(&self) -> String {
        let acl: Vec<String> = self.ip_acl.iter().map(|p| p.to_string()).collect();
        let privs: Vec<String> = self.privileges.iter().map(|p| format!("{}={}", p.prefix, p.mode)).collect();
        format!(
            "{}:{}:{}:{}:{}",
            self.username,
            hex::encode(self.password_digest),
            hex::encode(&self.salt),
            acl.join(","),
            privs.join(",")
        )
    }
}

pub fn parse_privileges(s: &str) -> Result<Vec<Privilege>, String> {
    let mut out = Vec::new();
    for item in s.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (prefix, mode) = item.split_once('=').ok_or_else(|| format!("privilege `{item}` lacks `=`"))?;
        let prefix = normalize_path(prefix).map_err(|e| e.to_string())?;
        let mode = Mode::parse(mode.trim()).ok_or_else(|| format!("bad mode in `{item}`"))?;
        out.push(Privilege { prefix, mode });
    }
    Ok(out)
}

fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

pub fn parse_accounts(text: &str) -> Result<Vec<UserAccount>, ConfigError> {
    let mut out: Vec<UserAccount> = Vec::new();
    for (line, l) in lines(text) {
        let acct = UserAccount::parse_line(l).map_err(|reason| ConfigError::Parse { line, reason })?;
        if out.iter().any(|a| a.username == acct.username) {
            return Err(ConfigError::DuplicateUser(acct.username));
        }
        out.push(acct);
    }
    Ok(out)
}

pub fn parse_slave_list(text: &str) -> Result<Vec<IpPattern>, ConfigError> {
    lines(text)
        .map(|(line, l)| l.parse().map_err(|reason| ConfigError::Parse { line, reason }))
        .collect()
}

#[derive(Debug, Clone)]
struct Session {
    info: SessionInfo,
    issued_at: Time,
    expires_at: Time,
}

/// The security server's state: accounts, admission list and live sessions.
#[derive(Debug, Clone)]
pub struct SecurityState {
    accounts: BTreeMap<String, UserAccount>,
    slaves: Vec<IpPattern>,
    sessions: BTreeMap<u32, Session>,
    ttl: Duration,
}

impl SecurityState {
    pub fn new(accounts: Vec<UserAccount>, slaves: Vec<IpPattern>) -> Self {
        Self {
            accounts: accounts.into_iter().map(|a| (a.username.clone(), a)).collect(),
            slaves,
            sessions: BTreeMap::new(),
            ttl: SESSION_TTL,
        }
    }

    pub fn with_ttl(mut self, ttl: Duration) -> Self {
        self.ttl = ttl;
        self
    }

    pub fn add_account(&mut self, account: UserAccount) {
        self.accounts.insert(account.username.clone(), account);
    }

    pub fn verify_user(
        &mut self,
        now: Time,
        rng: &mut impl Rng,
        username: &str,
        password: &str,
        client: SocketAddr,
    ) -> Result<SessionInfo, Rejection> {
        self.expire(now);
        let acct = self.accounts.get(username).ok_or(Rejection::BadCredentials)?;
        if password_digest(password, &acct.salt) != acct.password_digest {
            return Err(Rejection::BadCredentials);
        }
        if !acct.ip_acl.iter().any(|p| p.matches(client.ip())) {
            return Err(Rejection::IpNotAllowed);
        }
        let session_id = loop {
            let id: u32 = rng.gen();
            if id != 0 && !self.sessions.contains_key(&id) {
                break id;
            }
        };
        let info = SessionInfo {
            session_id,
            user: acct.username.clone(),
            client,
            privileges: acct.privileges.clone(),
        };
        self.sessions.insert(
            session_id,
            Session {
                info: info.clone(),
                issued_at: now,
                expires_at: now + self.ttl,
            },
        );
        Ok(info)
    }

    pub fn verify_slave(&self, addr: IpAddr) -> bool {
        self.slaves.iter().any(|p| p.matches(addr))
    }

    /// Allows when a rule's prefix covers `path` and grants `mode`.
    ///
    /// Returns the index of the witnessing rule: the longest matching prefix,
    /// first listed on ties.
    pub fn check_access(&mut self, now: Time, session_id: u32, path: &str, mode: Mode) -> Result<usize, AccessDenied> {
        self.expire(now);
        let ttl = self.ttl;
        let s = self.sessions.get_mut(&session_id).ok_or(AccessDenied::SessionInvalid)?;
        s.expires_at = now + ttl;
        match witness(&s.info.privileges, path, mode) {
            Some(i) => {
                log::debug!(
                    "allow {} {mode} {path} by rule {i} ({})",
                    s.info.user,
                    s.info.privileges[i].prefix
                );
                Ok(i)
            }
            None => Err(AccessDenied::NoPrivilege {
                path: path.to_string(),
                mode,
            }),
        }
    }

    pub fn logout(&mut self, session_id: u32) {
        self.sessions.remove(&session_id);
    }

    pub fn session(&self, session_id: u32) -> Option<&SessionInfo> {
        self.sessions.get(&session_id).map(|s| &s.info)
    }

    pub fn session_issued_at(&self, session_id: u32) -> Option<Time> {
        self.sessions.get(&session_id).map(|s| s.issued_at)
    }

    pub fn live_sessions(&self) -> usize {
        self.sessions.len()
    }

    fn expire(&mut self, now: Time) {
        self.sessions.retain(|_, s| s.expires_at > now);
    }
}

/// Index of the rule that grants `mode` on `path`, if any.
pub fn witness(privileges: &[Privilege], path: &str, mode: Mode) -> Option<usize> {
    privileges
        .iter()
        .enumerate()
        .filter(|(_, p)| p.mode.contains(mode) && path_has_prefix(path, &p.prefix))
        .max_by(|(ia, a), (ib, b)| a.prefix.len().cmp(&b.prefix.len()).then(ib.cmp(ia)))
        .map(|(i, _)| i)
}

/// The security server process.
pub struct SecurityServer {
    state: SecurityState,
    psk: Vec<u8>,
    outbox: Outbox,
    rejected_tags: u64,
}

impl SecurityServer {
    pub fn new(state: SecurityState, psk: Vec<u8>) -> Self {
        Self {
            state,
            psk,
            outbox: Outbox::default(),
            rejected_tags: 0,
        }
    }

    pub fn state(&self) -> &SecurityState {
        &self.state
    }

    pub fn rejected_tags(&self) -> u64 {
        self.rejected_tags
    }
}

impl Actor for SecurityServer {
    fn on_message(&mut self, ctx: &mut Ctx<'_>, from: SocketAddr, m: Message) {
        let msg = match proto::decode(&m, Some(&self.psk)) {
            Ok(msg) => msg,
            Err(e) => {
                self.rejected_tags += 1;
                log::warn!("dropping message from {from}: {e}");
                return;
            }
        };
        let now = ctx.now();
        let (req, reply) = match msg {
            Msg::VerifyUser {
                req,
                user,
                password,
                client,
            } => (
                req,
                SecurityReply::User(self.state.verify_user(now, ctx.rng(), &user, &password, client)),
            ),
            Msg::VerifySlave { req, addr } => (req, SecurityReply::Slave(self.state.verify_slave(addr.ip()))),
            Msg::CheckAccess {
                req,
                session,
                path,
                mode,
            } => (req, SecurityReply::Access(self.state.check_access(now, session, &path, mode))),
            Msg::Logout { session } => {
                self.state.logout(session);
                return;
            }
            other => {
                log::warn!("unexpected {:#06x} from {from}", other.code());
                return;
            }
        };
        let psk = self.psk.clone();
        self.outbox.send(ctx, from, &Msg::SecurityReply { req, reply }, 0, Some(&psk));
    }

    fn on_delivery(&mut self, ctx: &mut Ctx<'_>, d: Delivery) {
        self.outbox.on_delivery(ctx, &d);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn alice() -> UserAccount {
        UserAccount::new(
            "alice",
            "s3cret",
            b"salt",
            vec!["10.0.0.0/24".parse().unwrap()],
            vec![Privilege {
                prefix: "/data".into(),
                mode: Mode::READ,
            }],
        )
    }

    fn addr(s: &str) -> SocketAddr {
        s.parse().unwrap()
    }

    #[test]
    fn verify_user_cases() {
        let mut st = SecurityState::new(vec![alice()], vec![]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = st.verify_user(Time::ZERO, &mut rng, "alice", "s3cret", addr("10.0.0.5:9")).unwrap();
        assert_eq!(s.privileges, alice().privileges);
        assert_ne!(s.session_id, 0);
        assert_eq!(
            st.verify_user(Time::ZERO, &mut rng, "alice", "wrong", addr("10.0.0.5:9")),
            Err(Rejection::BadCredentials)
        );
        assert_eq!(
            st.verify_user(Time::ZERO, &mut rng, "alice", "s3cret", addr("10.0.1.5:9")),
            Err(Rejection::IpNotAllowed)
        );
        assert_eq!(
            st.verify_user(Time::ZERO, &mut rng, "bob", "s3cret", addr("10.0.0.5:9")),
            Err(Rejection::BadCredentials)
        );
    }

    #[test]
    fn check_access_cases() {
        let mut st = SecurityState::new(vec![alice()], vec![]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = st.verify_user(Time::ZERO, &mut rng, "alice", "s3cret", addr("10.0.0.5:9")).unwrap();
        let id = s.session_id;
        assert_eq!(st.check_access(Time::ZERO, id, "/data/a.dat", Mode::READ), Ok(0));
        assert!(st.check_access(Time::ZERO, id, "/data/a.dat", Mode::WRITE).is_err());
        assert!(st.check_access(Time::ZERO, id, "/database/x", Mode::READ).is_err());
        assert_eq!(
            st.check_access(Time::ZERO, 12345, "/data/a.dat", Mode::READ),
            Err(AccessDenied::SessionInvalid)
        );
    }

    #[test]
    fn sessions_expire_and_refresh() {
        let mut st = SecurityState::new(vec![alice()], vec![]).with_ttl(Duration::from_secs(10));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let id = st.verify_user(Time::ZERO, &mut rng, "alice", "s3cret", addr("10.0.0.5:9")).unwrap().session_id;
        assert!(st.check_access(Time::from_secs(8), id, "/data/x", Mode::READ).is_ok());
        assert!(st.check_access(Time::from_secs(16), id, "/data/x", Mode::READ).is_ok());
        assert_eq!(
            st.check_access(Time::from_secs(27), id, "/data/x", Mode::READ),
            Err(AccessDenied::SessionInvalid)
        );
    }

    #[test]
    fn session_ids_unique() {
        let mut st = SecurityState::new(vec![alice()], vec![]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..500 {
            let s = st.verify_user(Time::ZERO, &mut rng, "alice", "s3cret", addr("10.0.0.5:9")).unwrap();
            assert!(seen.insert(s.session_id));
        }
        assert_eq!(st.live_sessions(), 500);
    }

    #[test]
    fn account_line_roundtrip() {
        let a = alice();
        let line = a.to_line();
        assert_eq!(UserAccount::parse_line(&line).unwrap(), a);
        let parsed = parse_accounts(&format!("# users\n{line}\n")).unwrap();
        assert_eq!(parsed.len(), 1);
        assert!(parse_accounts(&format!("{line}\n{line}")).is_err());
        assert!(UserAccount::parse_line("bob:00:00::/x=R").is_err());
    }

    #[test]
    fn privilege_prefixes_are_normalized() {
        let p = parse_privileges("/data/=RW, /logs=X").unwrap();
        assert_eq!(p[0].prefix, "/data");
        assert_eq!(p[1].mode, Mode::EXEC);
    }

    #[test]
    fn slave_admission() {
        let st = SecurityState::new(vec![], parse_slave_list("10.0.0.7\n192.168.0.0/16\n").unwrap());
        assert!(st.verify_slave("10.0.0.7".parse().unwrap()));
        assert!(!st.verify_slave("10.0.0.8".parse().unwrap()));
        assert!(st.verify_slave("192.168.4.2".parse().unwrap()));
    }

    #[test]
    fn witness_prefers_longest_prefix() {
        let privs = parse_privileges("/=R,/data=R,/data/raw=RW").unwrap();
        assert_eq!(witness(&privs, "/data/raw/x", Mode::READ), Some(2));
        assert_eq!(witness(&privs, "/data/y", Mode::READ), Some(1));
        assert_eq!(witness(&privs, "/data/y", Mode::WRITE), None);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn comp() -> impl Strategy<Value = String> {
            prop::sample::select(vec!["a", "ab", "data", "database", "x"]).prop_map(String::from)
        }

        fn path() -> impl Strategy<Value = String> {
            prop::collection::vec(comp(), 1..4).prop_map(|c| format!("/{}", c.join("/")))
        }

        fn mode() -> impl Strategy<Value = Mode> {
            prop::sample::select(vec![Mode::READ, Mode::WRITE, Mode::EXEC, Mode::READ.union(Mode::WRITE)])
        }

        fn rule() -> impl Strategy<Value = Privilege> {
            (path(), mode()).prop_map(|(prefix, mode)| Privilege { prefix, mode })
        }

        /// Prefix oracle: split both paths into components and compare.
        fn covers(prefix: &str, path: &str) -> bool {
            let p: Vec<&str> = prefix.split('/').filter(|s| !s.is_empty()).collect();
            let q: Vec<&str> = path.split('/').filter(|s| !s.is_empty()).collect();
            p.len() <= q.len() && p.iter().zip(&q).all(|(a, b)| a == b)
        }

        proptest! {
            #[test]
            fn allow_iff_component_prefix_rule(rules in prop::collection::vec(rule(), 0..5), p in path(), m in mode()) {
                let expect = rules.iter().any(|r| r.mode.contains(m) && covers(&r.prefix, &p));
                let w = witness(&rules, &p, m);
                prop_assert_eq!(w.is_some(), expect);
                if let Some(i) = w {
                    prop_assert!(rules[i].mode.contains(m) && covers(&rules[i].prefix, &p));
                }
            }

            #[test]
            fn adding_rules_is_monotone(rules in prop::collection::vec(rule(), 0..5), extra in rule(), p in path(), m in mode()) {
                let before = witness(&rules, &p, m).is_some();
                let mut more = rules.clone();
                more.push(extra);
                prop_assert!(!before || witness(&more, &p, m).is_some());
            }
        }
    }
}
