//! TCP transport. One connection per (client process, node); requests are
//! multiplexed over it by correlation id and may complete out of order.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufReader, BufWriter};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::thread;
use std::time::Duration;

use crate::engine::lock;
use crate::ids::NodeId;
use crate::node::Node;
use crate::transport::wire::{read_frame, write_frame, Frame};
use crate::transport::{CallError, CallResult, Request, Transport};

/// Serves one node's objects on a TCP port.
pub struct TcpServer {
    addr: SocketAddr,
    stopped: Arc<AtomicBool>,
    connections: Arc<Mutex<Vec<TcpStream>>>,
}

impl TcpServer {
    pub fn bind(addr: impl ToSocketAddrs, node: Arc<Node>) -> std::io::Result<TcpServer> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stopped = Arc::new(AtomicBool::new(false));
        let connections = Arc::new(Mutex::new(Vec::new()));
        let (stop, conns) = (Arc::clone(&stopped), Arc::clone(&connections));
        thread::Builder::new()
            .name(format!("accept-{}", node.id()))
            .spawn(move || {
                for stream in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        return;
                    }
                    let Ok(stream) = stream else { continue };
                    let _ = stream.set_nodelay(true);
                    if let Ok(clone) = stream.try_clone() {
                        lock(&conns).push(clone);
                    }
                    let node = Arc::clone(&node);
                    thread::spawn(move || serve(stream, node));
                }
            })?;
        Ok(TcpServer {
            addr,
            stopped,
            connections,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(&self) {
        if self.stopped.swap(true, Ordering::SeqCst) {
            return;
        }
        for c in lock(&self.connections).drain(..) {
            let _ = c.shutdown(Shutdown::Both);
        }
        // Unblock the accept loop.
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
    }
}

impl Drop for TcpServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn serve(stream: TcpStream, node: Arc<Node>) {
    let Ok(write_half) = stream.try_clone() else { return };
    let writer = Arc::new(Mutex::new(BufWriter::new(write_half)));
    let mut reader = BufReader::new(stream);
    while let Ok(frame) = read_frame(&mut reader) {
        let (node, writer) = (Arc::clone(&node), Arc::clone(&writer));
        // Requests may block on version conditions, so each gets a thread.
        thread::spawn(move || {
            let result = match frame.to_request() {
                Ok(req) => node.handle(req),
                Err(e) => Err(crate::transport::Fault::Protocol(e.to_string())),
            };
            if let Ok(reply) = Frame::reply(frame.correlation, &result) {
                let _ = write_frame(&mut *lock(&writer), &reply);
            }
        });
    }
}

type Waiters = Arc<Mutex<HashMap<u64, mpsc::Sender<CallResult>>>>;

struct Connection {
    writer: Mutex<BufWriter<TcpStream>>,
    waiters: Waiters,
    alive: Arc<AtomicBool>,
    stream: TcpStream,
}

impl Connection {
    fn open(addr: SocketAddr) -> std::io::Result<Connection> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let waiters: Waiters = Arc::default();
        let alive = Arc::new(AtomicBool::new(true));
        let mut reader = BufReader::new(stream.try_clone()?);
        let (w, a) = (Arc::clone(&waiters), Arc::clone(&alive));
        thread::Builder::new().name(format!("tcp-reader-{addr}")).spawn(move || {
            while let Ok(frame) = read_frame(&mut reader) {
                let result = match frame.to_reply() {
                    Ok(r) => r.map_err(CallError::Fault),
                    Err(e) => Err(CallError::Transport(e.to_string())),
                };
                if let Some(tx) = lock(&w).remove(&frame.correlation) {
                    let _ = tx.send(result);
                }
            }
            a.store(false, Ordering::SeqCst);
            for (_, tx) in lock(&w).drain() {
                let _ = tx.send(Err(CallError::Transport("connection closed".into())));
            }
        })?;
        Ok(Connection {
            writer: Mutex::new(BufWriter::new(stream.try_clone()?)),
            waiters,
            alive,
            stream,
        })
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}

/// Client side of the TCP transport.
pub struct TcpTransport {
    addrs: BTreeMap<NodeId, SocketAddr>,
    connections: Mutex<HashMap<NodeId, Arc<Connection>>>,
    next: AtomicU64,
}

impl TcpTransport {
    pub fn new(addrs: impl IntoIterator<Item = (NodeId, SocketAddr)>) -> Self {
        TcpTransport {
            addrs: addrs.into_iter().collect(),
            connections: Mutex::new(HashMap::new()),
            next: AtomicU64::new(1),
        }
    }

    fn connection(&self, node: NodeId) -> Result<Arc<Connection>, CallError> {
        let mut conns = lock(&self.connections);
        if let Some(c) = conns.get(&node) {
            if c.alive.load(Ordering::SeqCst) {
                return Ok(Arc::clone(c));
            }
        }
        let addr = self
            .addrs
            .get(&node)
            .ok_or_else(|| CallError::Transport(format!("no address for {node}")))?;
        let c = Arc::new(Connection::open(*addr).map_err(|e| CallError::Transport(format!("{addr}: {e}")))?);
        conns.insert(node, Arc::clone(&c));
        Ok(c)
    }
}

impl Transport for TcpTransport {
    fn call(&self, node: NodeId, request: Request) -> CallResult {
        let conn = self.connection(node)?;
        let correlation = self.next.fetch_add(1, Ordering::Relaxed);
        let frame = Frame::request(correlation, &request).map_err(|e| CallError::Transport(e.to_string()))?;
        let (tx, rx) = mpsc::channel();
        lock(&conn.waiters).insert(correlation, tx);
        if let Err(e) = write_frame(&mut *lock(&conn.writer), &frame) {
            lock(&conn.waiters).remove(&correlation);
            return Err(CallError::Transport(e.to_string()));
        }
        if !conn.alive.load(Ordering::SeqCst) {
            // The reader may have drained waiters before we registered.
            if let Some(tx) = lock(&conn.waiters).remove(&correlation) {
                drop(tx);
            }
        }
        rx.recv()
            .unwrap_or_else(|_| Err(CallError::Transport("connection closed".into())))
    }

    fn nodes(&self) -> Vec<NodeId> {
        self.addrs.keys().copied().collect()
    }
}
