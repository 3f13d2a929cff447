//! Real-network runtime: one host driven by two OS datagram sockets.

use std::io;
use std::net::{SocketAddr, UdpSocket};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crate::time::Time;

use super::{Actor, Ctx, Host, HostConfig, Port};

type Call = Box<dyn FnOnce(&mut dyn Actor, &mut Ctx<'_>) + Send>;

enum Input {
    Datagram(Port, SocketAddr, Vec<u8>),
    Call(Call),
    Stop,
}

/// A running node bound to real sockets.
pub struct UdpNode {
    msg_addr: SocketAddr,
    data_addr: SocketAddr,
    tx: Sender<Input>,
    sockets: [Arc<UdpSocket>; 2],
    driver: Option<JoinHandle<()>>,
}

fn reader(sock: Arc<UdpSocket>, port: Port, tx: Sender<Input>) {
    let mut buf = vec![0u8; 70 * 1024];
    loop {
        match sock.recv_from(&mut buf) {
            Ok((n, from)) => {
                if tx.send(Input::Datagram(port, from, buf[..n].to_vec())).is_err() {
                    return;
                }
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock || e.kind() == io::ErrorKind::TimedOut => {
                if tx.send(Input::Datagram(port, sock_addr(&sock), Vec::new())).is_err() {
                    return;
                }
            }
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) if e.kind() == io::ErrorKind::ConnectionReset => {}
            Err(_) => return,
        }
    }
}

fn sock_addr(sock: &UdpSocket) -> SocketAddr {
    sock.local_addr().unwrap_or_else(|_| SocketAddr::from(([0, 0, 0, 0], 0)))
}

impl UdpNode {
    /// Binds both ports and starts the event loop.
    pub fn spawn(actor: Box<dyn Actor>, msg_bind: SocketAddr, data_bind: SocketAddr, mut config: HostConfig) -> io::Result<Self> {
        let msg_sock = Arc::new(UdpSocket::bind(msg_bind)?);
        let data_sock = Arc::new(UdpSocket::bind(data_bind)?);
        for s in [&msg_sock, &data_sock] {
            s.set_read_timeout(Some(Duration::from_millis(200)))?;
        }
        let msg_addr = msg_sock.local_addr()?;
        let data_addr = data_sock.local_addr()?;
        config.msg_addr = msg_addr;
        config.data_addr = data_addr;
        config.modeled_compute = false;
        if config.seed == 0 {
            config.seed = rand::random();
        }
        let (tx, rx) = mpsc::channel();
        for (sock, port) in [(msg_sock.clone(), Port::Msg), (data_sock.clone(), Port::Data)] {
            let tx = tx.clone();
            thread::spawn(move || reader(sock, port, tx));
        }
        let host = Host::new(actor, config);
        let socks = (msg_sock.clone(), data_sock.clone());
        let driver = thread::spawn(move || drive(host, rx, socks));
        Ok(Self {
            msg_addr,
            data_addr,
            tx,
            sockets: [msg_sock, data_sock],
            driver: Some(driver),
        })
    }

    pub fn msg_addr(&self) -> SocketAddr {
        self.msg_addr
    }

    pub fn data_addr(&self) -> SocketAddr {
        self.data_addr
    }

    /// Local addresses of every socket this node owns.
    pub fn local_endpoints(&self) -> Vec<SocketAddr> {
        self.sockets.iter().map(|s| sock_addr(s)).collect()
    }

    /// Runs `f` on the actor inside the event loop and waits for its result.
    pub fn call<A: Actor, R: Send + 'static>(
        &self,
        f: impl FnOnce(&mut A, &mut Ctx<'_>) -> R + Send + 'static,
    ) -> Option<R> {
        let (rtx, rrx) = mpsc::channel();
        let call: Call = Box::new(move |actor, ctx| {
            let any: &mut dyn std::any::Any = actor;
            if let Some(a) = any.downcast_mut::<A>() {
                let _ = rtx.send(f(a, ctx));
            }
        });
        self.tx.send(Input::Call(call)).ok()?;
        rrx.recv().ok()
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        let _ = self.tx.send(Input::Stop);
        if let Some(h) = self.driver.take() {
            let _ = h.join();
        }
    }

    /// Blocks until the event loop exits.
    pub fn join(mut self) {
        if let Some(h) = self.driver.take() {
            let _ = h.join();
        }
    }
}

impl Drop for UdpNode {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn drive(mut host: Host, rx: Receiver<Input>, socks: (Arc<UdpSocket>, Arc<UdpSocket>)) {
    let epoch = Instant::now();
    let now = || Time::from_micros(epoch.elapsed().as_micros() as u64);
    host.start(now());
    loop {
        flush(&mut host, &socks);
        let wait = match host.next_deadline() {
            Some(t) => Duration::from_micros(t.as_micros().saturating_sub(now().as_micros())),
            None => Duration::from_millis(500),
        };
        match rx.recv_timeout(wait) {
            Ok(Input::Datagram(port, from, bytes)) => {
                if !bytes.is_empty() {
                    host.handle_datagram(now(), port, from, bytes);
                }
            }
            Ok(Input::Call(f)) => host.invoke(now(), f),
            Ok(Input::Stop) => return,
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => return,
        }
        host.tick(now());
    }
}

fn flush(host: &mut Host, socks: &(Arc<UdpSocket>, Arc<UdpSocket>)) {
    while let Some((port, to, bytes)) = host.poll_transmit() {
        let sock = match port {
            Port::Msg => &socks.0,
            Port::Data => &socks.1,
        };
        if let Err(e) = sock.send_to(&bytes, to) {
            log::debug!("send to {to} failed: {e}");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::Message;

    #[derive(Default)]
    struct Sink {
        got: Vec<u8>,
    }

    impl Actor for Sink {
        fn on_message(&mut self, _ctx: &mut Ctx<'_>, _from: SocketAddr, msg: Message) {
            self.got.extend(msg.payload);
        }
    }

    #[test]
    fn two_nodes_exchange_over_loopback() {
        let any: SocketAddr = "127.0.0.1:0".parse().unwrap();
        let cfg = HostConfig::new(any, any);
        let a = UdpNode::spawn(Box::<Sink>::default(), any, any, cfg.clone()).unwrap();
        let b = UdpNode::spawn(Box::<Sink>::default(), any, any, cfg).unwrap();
        assert_eq!(a.local_endpoints().len(), 2);
        let to = b.msg_addr();
        a.call::<Sink, _>(move |_, ctx| {
            for i in 0..20u8 {
                ctx.send(to, 0x20, 0, vec![i]).unwrap();
            }
        })
        .unwrap();
        let deadline = Instant::now() + Duration::from_secs(5);
        loop {
            let got = b.call::<Sink, _>(|s, _| s.got.clone()).unwrap();
            if got.len() == 20 {
                assert_eq!(got, (0..20u8).collect::<Vec<_>>());
                break;
            }
            assert!(Instant::now() < deadline, "timed out");
            thread::sleep(Duration::from_millis(10));
        }
    }
}
