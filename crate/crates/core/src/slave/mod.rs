//! The slave: serves slices from its store on master-issued channels and
//! hosts the Sphere processing engines.

pub mod store;

use std::collections::BTreeMap;
use std::fs;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use crate::model::{Location, SlaveId, SlaveStatus};
use crate::proto::{self, Msg, Outbox, TransferKind};
use crate::runtime::{Actor, Ctx, Delivery};
use crate::sphere::spe::{SlaveIo, SpeConfig, SpeHost, SpeStats};
use crate::sphere::UdfRegistry;
use crate::transport::{ChannelEvent, ChannelId, Message};

pub use store::{frame, unframe, SliceStore, StoreError};

const TIMER_HEARTBEAT: u64 = 1;
const TIMER_REGISTER: u64 = 2;

#[derive(Debug, Clone)]
pub struct SlaveSettings {
    pub master: SocketAddr,
    pub location: Option<Location>,
    pub spe_count: u32,
    pub heartbeat_interval: Duration,
    /// Delay between registration attempts while unregistered.
    pub register_retry: Duration,
    pub spe: SpeConfig,
}

impl SlaveSettings {
    pub fn new(master: SocketAddr) -> Self {
        Self {
            master,
            location: None,
            spe_count: 1,
            heartbeat_interval: Duration::from_secs(2),
            register_retry: Duration::from_secs(2),
            spe: SpeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SlaveStats {
    pub register_attempts: u64,
    pub register_denied: u64,
    /// Commands dropped because they did not come from the master.
    pub rejected_commands: u64,
    pub reads_served: u64,
    pub writes_stored: u64,
    pub transfer_failures: u64,
    /// Every data channel this slave opened for file service.
    pub opened_channels: Vec<ChannelId>,
    pub scan_warnings: Vec<String>,
}

enum Transfer {
    Send { kind: TransferKind, path: String },
    Receive { kind: TransferKind, path: String, buf: Vec<u8> },
}

pub struct Slave {
    settings: SlaveSettings,
    store: SliceStore,
    id: Option<SlaveId>,
    outbox: Outbox,
    transfers: BTreeMap<ChannelId, Transfer>,
    spe: SpeHost,
    stats: SlaveStats,
}

impl Slave {
    pub fn new(settings: SlaveSettings, store: SliceStore, registry: Arc<UdfRegistry>) -> Self {
        let spe = SpeHost::new(settings.spe.clone(), registry, settings.location.clone());
        Self {
            settings,
            store,
            id: None,
            outbox: Outbox::default(),
            transfers: BTreeMap::new(),
            spe,
            stats: SlaveStats::default(),
        }
    }

    pub fn id(&self) -> Option<SlaveId> {
        self.id
    }

    pub fn store(&self) -> &SliceStore {
        &self.store
    }

    pub fn stats(&self) -> &SlaveStats {
        &self.stats
    }

    pub fn spe_stats(&self) -> &SpeStats {
        self.spe.stats()
    }

    pub fn active_transfers(&self) -> usize {
        self.transfers.len()
    }

    fn status(&self, ctx: &Ctx<'_>) -> SlaveStatus {
        SlaveStatus {
            id: self.id.unwrap_or(SlaveId(u32::MAX)),
            address: ctx.msg_addr(),
            data_address: ctx.data_addr(),
            location: self.settings.location.clone(),
            free_disk: self.store.free(),
            active_transfers: self.transfers.len() as u32,
            spe_count: self.settings.spe_count,
            alive: true,
        }
    }

    fn send(&mut self, ctx: &mut Ctx<'_>, to: SocketAddr, msg: Msg) {
        self.outbox.send(ctx, to, &msg, 0, None);
    }

    fn register(&mut self, ctx: &mut Ctx<'_>) {
        let (scan, warnings) = self.store.scan();
        for w in &warnings {
            log::warn!("scan: {w}");
        }
        self.stats.scan_warnings = warnings;
        self.stats.register_attempts += 1;
        let status = self.status(ctx);
        let master = self.settings.master;
        self.send(ctx, master, Msg::Register { status, scan });
        let retry = self.settings.register_retry;
        ctx.set_timer(retry, TIMER_REGISTER);
    }

    fn io(&mut self) -> (&mut SpeHost, SlaveIo<'_>) {
        (
            &mut self.spe,
            SlaveIo {
                store: &self.store,
                outbox: &mut self.outbox,
                master: self.settings.master,
            },
        )
    }

    fn on_master(&mut self, ctx: &mut Ctx<'_>, msg: Msg) {
        match msg {
            Msg::RegisterReply { result } => match result {
                Ok(id) => {
                    self.id = Some(id);
                    let (spe, mut io) = self.io();
                    spe.on_registered(ctx, &mut io);
                }
                Err(e) => {
                    self.stats.register_denied += 1;
                    log::warn!("registration refused: {e}");
                }
            },
            Msg::HeartbeatReply { known } => {
                if !known && self.id.is_some() {
                    self.id = None;
                    self.register(ctx);
                }
            }
            Msg::ServeRead {
                channel,
                path,
                index_only,
                peer,
            } => {
                let payload = if index_only {
                    self.store
                        .read_index(&path)
                        .map(|ix| ix.encode())
                        .ok_or_else(|| format!("{path}: no index"))
                } else {
                    self.store
                        .read(&path)
                        .map(|d| frame(&d, self.store.read_index(&path).as_ref()))
                        .map_err(|e| e.to_string())
                };
                self.start_send(ctx, channel, peer, TransferKind::Read, path, payload);
            }
            Msg::CopyOut { channel, path, target } => {
                let payload = self
                    .store
                    .read(&path)
                    .map(|d| frame(&d, self.store.read_index(&path).as_ref()))
                    .map_err(|e| e.to_string());
                self.start_send(ctx, channel, target, TransferKind::CopyOut, path, payload);
            }
            Msg::ServeWrite { channel, path, peer } => self.start_receive(ctx, channel, peer, TransferKind::Write, path),
            Msg::CopyIn { channel, path, source } => self.start_receive(ctx, channel, source, TransferKind::CopyIn, path),
            Msg::FileAck { path } => {
                let (spe, mut io) = self.io();
                spe.on_file_ack(ctx, &mut io, &path);
            }
            Msg::Remove { path } => {
                if let Err(e) = self.store.remove(&path) {
                    log::warn!("remove {path}: {e}");
                }
            }
            Msg::JobGrant {
                job,
                client,
                channels,
                peers,
            } => {
                let (spe, mut io) = self.io();
                spe.on_grant(ctx, &mut io, job, client, channels, peers);
            }
            Msg::JobRevoke { job } => {
                let (spe, mut io) = self.io();
                spe.on_revoke(ctx, &mut io, job);
            }
            other => {
                self.stats.rejected_commands += 1;
                log::warn!("unexpected master message {:#06x}", other.code());
            }
        }
    }

    fn done(&mut self, ctx: &mut Ctx<'_>, channel: ChannelId, kind: TransferKind, path: String, result: Result<proto::ScanEntry, String>) {
        if result.is_err() {
            self.stats.transfer_failures += 1;
        }
        let master = self.settings.master;
        self.send(
            ctx,
            master,
            Msg::TransferDone {
                channel,
                kind,
                path,
                result,
            },
        );
    }

    fn start_send(
        &mut self,
        ctx: &mut Ctx<'_>,
        channel: ChannelId,
        peer: SocketAddr,
        kind: TransferKind,
        path: String,
        payload: Result<Vec<u8>, String>,
    ) {
        if self.transfers.contains_key(&channel) {
            return;
        }
        if let Err(e) = ctx.channel_open(channel, peer) {
            return self.done(ctx, channel, kind, path, Err(e.to_string()));
        }
        self.stats.opened_channels.push(channel);
        match payload {
            Ok(p) => {
                let _ = ctx.channel_send(channel, &p);
                let _ = ctx.channel_finish(channel);
                self.transfers.insert(channel, Transfer::Send { kind, path });
            }
            Err(e) => {
                ctx.channel_abort(channel);
                self.done(ctx, channel, kind, path, Err(e));
            }
        }
    }

    fn start_receive(&mut self, ctx: &mut Ctx<'_>, channel: ChannelId, peer: SocketAddr, kind: TransferKind, path: String) {
        if self.transfers.contains_key(&channel) {
            return;
        }
        if let Err(e) = self.store.local_path(&path) {
            return self.done(ctx, channel, kind, path, Err(e.to_string()));
        }
        if let Err(e) = ctx.channel_open(channel, peer) {
            return self.done(ctx, channel, kind, path, Err(e.to_string()));
        }
        self.stats.opened_channels.push(channel);
        self.transfers.insert(
            channel,
            Transfer::Receive {
                kind,
                path,
                buf: Vec::new(),
            },
        );
    }

    fn on_transfer_event(&mut self, ctx: &mut Ctx<'_>, ev: ChannelEvent) {
        let id = ev.id();
        match ev {
            ChannelEvent::Data { bytes, .. } => {
                if let Some(Transfer::Receive { buf, .. }) = self.transfers.get_mut(&id) {
                    buf.extend_from_slice(&bytes);
                }
            }
            ChannelEvent::Finished { .. } => {
                let Some(Transfer::Receive { kind, path, buf }) = self.transfers.remove(&id) else {
                    return;
                };
                ctx.channel_close(id);
                let result = unframe(buf).and_then(|(data, ix)| self.store.write(&path, &data, ix.as_ref()).map_err(|e| e.to_string()));
                if result.is_ok() {
                    self.stats.writes_stored += 1;
                }
                self.done(ctx, id, kind, path, result);
            }
            ChannelEvent::SendComplete { .. } => {
                let Some(Transfer::Send { kind, path }) = self.transfers.remove(&id) else {
                    return;
                };
                ctx.channel_close(id);
                self.stats.reads_served += 1;
                let entry = self.store.entry(&path).map_err(|e| e.to_string());
                self.done(ctx, id, kind, path, entry);
            }
            ChannelEvent::Failed { error, .. } => {
                let (kind, path) = match self.transfers.remove(&id) {
                    Some(Transfer::Send { kind, path }) | Some(Transfer::Receive { kind, path, .. }) => (kind, path),
                    None => return,
                };
                self.done(ctx, id, kind, path, Err(error.to_string()));
            }
            ChannelEvent::Opened { .. } => {}
        }
    }
}

impl Actor for Slave {
    fn on_start(&mut self, ctx: &mut Ctx<'_>) {
        for area in ["tmp", "work", "spool", "buckets"] {
            if let Ok(d) = self.store.scratch(area) {
                let _ = fs::remove_dir_all(&d);
            }
        }
        self.spe.start(ctx);
        self.register(ctx);
        let hb = self.settings.heartbeat_interval;
        ctx.set_timer(hb, TIMER_HEARTBEAT);
    }

    fn on_message(&mut self, ctx: &mut Ctx<'_>, from: SocketAddr, m: Message) {
        let msg = match proto::decode(&m, None) {
            Ok(msg) => msg,
            Err(e) => {
                log::warn!("dropping message from {from}: {e}");
                return;
            }
        };
        match m.msg_type >> 8 {
            0x03 if from == self.settings.master => self.on_master(ctx, msg),
            0x04 => {
                let (spe, mut io) = self.io();
                if !spe.handle(ctx, &mut io, from, msg) {
                    self.stats.rejected_commands += 1;
                }
            }
            _ => {
                self.stats.rejected_commands += 1;
                log::warn!("rejecting {:#06x} from {from}", m.msg_type);
            }
        }
    }

    fn on_delivery(&mut self, ctx: &mut Ctx<'_>, d: Delivery) {
        self.outbox.on_delivery(ctx, &d);
    }

    fn on_timer(&mut self, ctx: &mut Ctx<'_>, token: u64) {
        let (spe, mut io) = self.io();
        if spe.on_timer(ctx, &mut io, token) {
            return;
        }
        match token {
            TIMER_HEARTBEAT => {
                if self.id.is_some() {
                    let status = self.status(ctx);
                    let master = self.settings.master;
                    self.send(ctx, master, Msg::Heartbeat { status });
                }
                let hb = self.settings.heartbeat_interval;
                ctx.set_timer(hb, TIMER_HEARTBEAT);
            }
            TIMER_REGISTER
                if self.id.is_none() => {
                    self.register(ctx);
                }
            _ => {}
        }
    }

    fn on_channel(&mut self, ctx: &mut Ctx<'_>, ev: ChannelEvent) {
        if self.transfers.contains_key(&ev.id()) {
            return self.on_transfer_event(ctx, ev);
        }
        let (spe, mut io) = self.io();
        if !spe.on_channel(ctx, &mut io, ev) {
            log::debug!("event on unknown channel");
        }
    }
}
