//! Full-mesh TCP broadcast.
//!
//! Every worker listens on its own address and keeps one outgoing connection
//! per peer, each served by a writer thread behind a bounded queue. Frames
//! from one sender travel over one connection, so per-sender order is the
//! TCP stream order.

use std::io::{self, BufReader, BufWriter, Read};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender, SyncSender, TrySendError};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use super::{decode_payload, encode, read_payload, write_frame, Endpoint};
use crate::error::{Error, Result};
use crate::protocol::ModelMessage;

#[derive(Clone, Debug)]
pub struct TcpOptions {
    /// Frames buffered per peer before new ones are dropped.
    pub queue_depth: usize,
    pub connect_attempts: u32,
    pub connect_backoff: Duration,
    pub io_timeout: Duration,
}

impl Default for TcpOptions {
    fn default() -> Self {
        TcpOptions {
            queue_depth: 64,
            connect_attempts: 50,
            connect_backoff: Duration::from_millis(100),
            io_timeout: Duration::from_millis(100),
        }
    }
}

struct PeerLink {
    id: usize,
    tx: SyncSender<Arc<Vec<u8>>>,
    unreachable: Arc<AtomicBool>,
}

pub struct TcpEndpoint {
    worker_id: usize,
    local_addr: SocketAddr,
    peers: Vec<PeerLink>,
    inbox: Mutex<Receiver<ModelMessage>>,
    shutdown: Arc<AtomicBool>,
    threads: Mutex<Vec<JoinHandle<()>>>,
}

impl TcpEndpoint {
    /// Binds `addrs[worker_id]` and treats every other address as a peer.
    pub fn new(worker_id: usize, addrs: &[SocketAddr], opts: TcpOptions) -> Result<Self> {
        let own = *addrs
            .get(worker_id)
            .ok_or_else(|| Error::Transport(format!("no address for worker {worker_id}")))?;
        let listener = TcpListener::bind(own)?;
        let peers = addrs
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != worker_id)
            .map(|(i, a)| (i, *a))
            .collect();
        TcpEndpoint::start(worker_id, listener, peers, opts)
    }

    /// Starts the endpoint on an already bound listener.
    pub fn start(
        worker_id: usize,
        listener: TcpListener,
        peers: Vec<(usize, SocketAddr)>,
        opts: TcpOptions,
    ) -> Result<Self> {
        let local_addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let shutdown = Arc::new(AtomicBool::new(false));
        let (in_tx, in_rx) = mpsc::channel();
        let mut threads = Vec::new();

        {
            let shutdown = Arc::clone(&shutdown);
            let timeout = opts.io_timeout;
            threads.push(thread::spawn(move || accept_loop(listener, in_tx, shutdown, timeout)));
        }

        let mut links = Vec::new();
        for (id, addr) in peers {
            let (tx, rx) = mpsc::sync_channel::<Arc<Vec<u8>>>(opts.queue_depth.max(1));
            let unreachable = Arc::new(AtomicBool::new(false));
            let shutdown = Arc::clone(&shutdown);
            let flag = Arc::clone(&unreachable);
            let opts = opts.clone();
            threads.push(thread::spawn(move || writer_loop(addr, rx, flag, shutdown, opts)));
            links.push(PeerLink { id, tx, unreachable });
        }

        Ok(TcpEndpoint {
            worker_id,
            local_addr,
            peers: links,
            inbox: Mutex::new(in_rx),
            shutdown,
            threads: Mutex::new(threads),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }
}

impl Endpoint for TcpEndpoint {
    fn worker_id(&self) -> usize {
        self.worker_id
    }

    fn broadcast(&self, msg: &ModelMessage) -> Result<()> {
        if self.shutdown.load(Ordering::Acquire) {
            return Err(Error::Transport("endpoint is closed".into()));
        }
        if self.peers.is_empty() {
            return Ok(());
        }
        let frame = Arc::new(encode(msg)?);
        let mut delivered = 0;
        for peer in &self.peers {
            if peer.unreachable.load(Ordering::Acquire) {
                continue;
            }
            match peer.tx.try_send(Arc::clone(&frame)) {
                Ok(()) => delivered += 1,
                Err(TrySendError::Full(_)) => {
                    log::warn!("worker {}: queue to peer {} full, dropping seq {}", self.worker_id, peer.id, msg.seq);
                    delivered += 1;
                }
                Err(TrySendError::Disconnected(_)) => {}
            }
        }
        if delivered == 0 {
            Err(Error::Transport("all peers unreachable".into()))
        } else {
            Ok(())
        }
    }

    fn poll(&self) -> Result<Vec<ModelMessage>> {
        if self.shutdown.load(Ordering::Acquire) {
            return Err(Error::Transport("endpoint is closed".into()));
        }
        let rx = self.inbox.lock().unwrap_or_else(|e| e.into_inner());
        Ok(rx.try_iter().collect())
    }

    fn close(&self) {
        self.shutdown.store(true, Ordering::Release);
    }
}

impl Drop for TcpEndpoint {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::Release);
        let threads = std::mem::take(&mut *self.threads.lock().unwrap_or_else(|e| e.into_inner()));
        for t in threads {
            let _ = t.join();
        }
    }
}

fn accept_loop(listener: TcpListener, inbox: Sender<ModelMessage>, shutdown: Arc<AtomicBool>, timeout: Duration) {
    let mut readers = Vec::new();
    while !shutdown.load(Ordering::Acquire) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let inbox = inbox.clone();
                let shutdown = Arc::clone(&shutdown);
                readers.push(thread::spawn(move || {
                    if let Err(e) = reader_loop(stream, inbox, shutdown, timeout) {
                        log::debug!("connection from {peer} ended: {e}");
                    }
                }));
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
            Err(e) => {
                log::warn!("accept failed: {e}");
                thread::sleep(Duration::from_millis(50));
            }
        }
    }
    for r in readers {
        let _ = r.join();
    }
}

/// Reader that retries timed-out reads until shutdown, so a frame split
/// across timeouts is never torn.
struct PatientReader {
    stream: TcpStream,
    shutdown: Arc<AtomicBool>,
}

impl Read for PatientReader {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        loop {
            match self.stream.read(buf) {
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                    if self.shutdown.load(Ordering::Acquire) {
                        return Err(io::Error::new(io::ErrorKind::ConnectionAborted, "shutdown"));
                    }
                }
                other => return other,
            }
        }
    }
}

fn reader_loop(
    stream: TcpStream,
    inbox: Sender<ModelMessage>,
    shutdown: Arc<AtomicBool>,
    timeout: Duration,
) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(timeout))?;
    let mut reader = BufReader::new(PatientReader { stream, shutdown });
    while let Some(payload) = read_payload(&mut reader)? {
        match decode_payload(&payload) {
            Ok(msg) => {
                if inbox.send(msg).is_err() {
                    break;
                }
            }
            Err(e) => log::warn!("skipping malformed frame: {e}"),
        }
    }
    Ok(())
}

fn connect(addr: SocketAddr, shutdown: &AtomicBool, opts: &TcpOptions) -> Option<TcpStream> {
    let mut backoff = opts.connect_backoff;
    for attempt in 0..opts.connect_attempts {
        if shutdown.load(Ordering::Acquire) {
            return None;
        }
        match TcpStream::connect_timeout(&addr, opts.io_timeout.max(Duration::from_millis(500))) {
            Ok(s) => {
                let _ = s.set_nodelay(true);
                return Some(s);
            }
            Err(e) => {
                log::debug!("connect to {addr} failed (attempt {}): {e}", attempt + 1);
                thread::sleep(backoff);
                backoff = (backoff * 2).min(Duration::from_secs(2));
            }
        }
    }
    None
}

fn writer_loop(
    addr: SocketAddr,
    frames: Receiver<Arc<Vec<u8>>>,
    unreachable: Arc<AtomicBool>,
    shutdown: Arc<AtomicBool>,
    opts: TcpOptions,
) {
    let mut conn: Option<BufWriter<TcpStream>> = None;
    loop {
        let frame = match frames.recv_timeout(opts.io_timeout) {
            Ok(f) => f,
            Err(RecvTimeoutError::Timeout) => {
                if shutdown.load(Ordering::Acquire) {
                    return;
                }
                continue;
            }
            Err(RecvTimeoutError::Disconnected) => return,
        };
        // one reconnect per frame after a write failure
        for _ in 0..2 {
            if conn.is_none() {
                match connect(addr, &shutdown, &opts) {
                    Some(s) => {
                        unreachable.store(false, Ordering::Release);
                        conn = Some(BufWriter::new(s));
                    }
                    None => {
                        if !shutdown.load(Ordering::Acquire) {
                            log::warn!("peer {addr} unreachable, dropping frame");
                            unreachable.store(true, Ordering::Release);
                        }
                        break;
                    }
                }
            }
            let w = conn.as_mut().expect("connected above");
            match write_frame(w, &frame) {
                Ok(()) => break,
                Err(e) => {
                    log::debug!("write to {addr} failed: {e}");
                    conn = None;
                }
            }
        }
        if unreachable.load(Ordering::Acquire) {
            return;
        }
    }
}
