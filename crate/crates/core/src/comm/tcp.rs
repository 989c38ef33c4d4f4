//! TCP transport. The server listens; each endpoint dials in, introduces
//! itself with a hello frame and then serves tasks over that one connection.

use std::collections::{HashMap, HashSet};
use std::io::{BufReader, BufWriter};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use super::envelope::{ResultEnvelope, TaskEnvelope};
use super::frame::{read_frame, write_frame, Frame};
use super::transport::{EndpointLink, PendingResult, ResultSender, Transport};
use super::CommError;

const HELLO_TIMEOUT: Duration = Duration::from_secs(10);

struct Connection {
    serial: u64,
    stream: Mutex<TcpStream>,
}

#[derive(Default)]
struct Registry {
    conns: HashMap<String, Arc<Connection>>,
    next_serial: u64,
}

#[derive(Default)]
struct Shared {
    registry: Mutex<Registry>,
    connected: Condvar,
    /// task id -> (endpoint id, reply channel)
    pending: Mutex<HashMap<String, (String, ResultSender)>>,
    dispatched: Mutex<HashSet<String>>,
    /// Endpoints expected to connect; dispatching to one that is absent is
    /// reported as unreachable rather than unknown.
    expected: Mutex<HashSet<String>>,
    closing: AtomicBool,
}

pub struct TcpServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    acceptor: Option<thread::JoinHandle<()>>,
}

impl TcpServer {
    pub fn bind(addr: impl ToSocketAddrs) -> Result<Self, CommError> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared::default());
        let acceptor = {
            let shared = Arc::clone(&shared);
            thread::Builder::new()
                .name("tcp-accept".into())
                .spawn(move || accept_loop(listener, shared))?
        };
        Ok(Self {
            addr,
            shared,
            acceptor: Some(acceptor),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn expect_endpoints(&self, ids: impl IntoIterator<Item = String>) {
        self.shared.expected.lock().expect("lock").extend(ids);
    }

    pub fn connected(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.shared.registry.lock().expect("lock").conns.keys().cloned().collect();
        ids.sort();
        ids
    }

    /// Blocks until every id in `ids` has connected.
    pub fn wait_for_endpoints(&self, ids: &[String], timeout: Duration) -> Result<(), CommError> {
        let deadline = Instant::now() + timeout;
        let mut reg = self.shared.registry.lock().expect("lock");
        loop {
            let missing: Vec<&String> = ids.iter().filter(|id| !reg.conns.contains_key(*id)).collect();
            let Some(first) = missing.first() else {
                return Ok(());
            };
            let now = Instant::now();
            if now >= deadline {
                return Err(CommError::EndpointUnreachable((*first).clone()));
            }
            reg = self.shared.connected.wait_timeout(reg, deadline - now).expect("lock").0;
        }
    }
}

impl Drop for TcpServer {
    fn drop(&mut self) {
        self.shared.closing.store(true, Ordering::SeqCst);
        // Unblock accept() with a throwaway connection.
        let _ = TcpStream::connect(self.addr);
        for conn in self.shared.registry.lock().expect("lock").conns.values() {
            let _ = conn.stream.lock().expect("lock").shutdown(Shutdown::Both);
        }
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    for stream in listener.incoming() {
        if shared.closing.load(Ordering::SeqCst) {
            break;
        }
        let Ok(stream) = stream else { continue };
        let shared = Arc::clone(&shared);
        let _ = thread::Builder::new()
            .name("tcp-conn".into())
            .spawn(move || serve_connection(stream, shared));
    }
}

fn serve_connection(stream: TcpStream, shared: Arc<Shared>) {
    let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_default();
    let _ = stream.set_nodelay(true);
    let _ = stream.set_read_timeout(Some(HELLO_TIMEOUT));
    let Ok(read_half) = stream.try_clone() else { return };
    let mut reader = BufReader::new(read_half);
    let endpoint_id = match read_frame(&mut reader) {
        Ok(Some(Frame::Hello { endpoint_id })) => endpoint_id,
        other => {
            log::warn!("connection from {peer} did not open with a hello: {other:?}");
            return;
        }
    };
    let _ = stream.set_read_timeout(None);
    let conn = {
        let mut reg = shared.registry.lock().expect("lock");
        if shared.closing.load(Ordering::SeqCst) {
            return;
        }
        reg.next_serial += 1;
        let conn = Arc::new(Connection {
            serial: reg.next_serial,
            stream: Mutex::new(stream),
        });
        if let Some(old) = reg.conns.insert(endpoint_id.clone(), Arc::clone(&conn)) {
            let _ = old.stream.lock().expect("lock").shutdown(Shutdown::Both);
        }
        shared.connected.notify_all();
        conn
    };
    log::info!("endpoint {endpoint_id} connected from {peer}");

    loop {
        match read_frame(&mut reader) {
            Ok(Some(Frame::Result(result))) => {
                let entry = shared.pending.lock().expect("lock").remove(&result.task_id);
                match entry {
                    Some((_, reply)) => {
                        let _ = reply.send(Ok(result));
                    }
                    None => log::warn!("endpoint {endpoint_id} sent a result for unknown task {}", result.task_id),
                }
            }
            Ok(Some(other)) => log::warn!("endpoint {endpoint_id} sent an unexpected frame: {other:?}"),
            Ok(None) => break,
            Err(e) => {
                log::warn!("connection to endpoint {endpoint_id} failed: {e}");
                break;
            }
        }
    }

    let mut reg = shared.registry.lock().expect("lock");
    if reg.conns.get(&endpoint_id).is_some_and(|c| c.serial == conn.serial) {
        reg.conns.remove(&endpoint_id);
    }
    drop(reg);
    let mut pending = shared.pending.lock().expect("lock");
    let orphaned: Vec<String> = pending
        .iter()
        .filter(|(_, (ep, _))| *ep == endpoint_id)
        .map(|(t, _)| t.clone())
        .collect();
    for task_id in orphaned {
        if let Some((_, reply)) = pending.remove(&task_id) {
            let _ = reply.send(Err(CommError::EndpointUnreachable(endpoint_id.clone())));
        }
    }
    log::info!("endpoint {endpoint_id} disconnected");
}

impl Transport for TcpServer {
    fn dispatch(&self, endpoint_id: &str, task: TaskEnvelope) -> Result<PendingResult, CommError> {
        {
            let mut dispatched = self.shared.dispatched.lock().expect("lock");
            if !dispatched.insert(task.task_id.clone()) {
                return Err(CommError::DuplicateTask(task.task_id));
            }
        }
        let conn = self.shared.registry.lock().expect("lock").conns.get(endpoint_id).cloned();
        let Some(conn) = conn else {
            return Err(if self.shared.expected.lock().expect("lock").contains(endpoint_id) {
                CommError::EndpointUnreachable(endpoint_id.to_string())
            } else {
                CommError::EndpointUnknown(endpoint_id.to_string())
            });
        };
        let (pending, reply) = PendingResult::new(task.task_id.clone(), endpoint_id.to_string());
        self.shared
            .pending
            .lock()
            .expect("lock")
            .insert(task.task_id.clone(), (endpoint_id.to_string(), reply));
        let written = {
            let stream = conn.stream.lock().expect("lock");
            let mut w = BufWriter::new(&*stream);
            write_frame(&mut w, &Frame::Task(task.clone()))
        };
        if let Err(e) = written {
            self.shared.pending.lock().expect("lock").remove(&task.task_id);
            log::warn!("writing task {} to {endpoint_id} failed: {e}", task.task_id);
            return Err(CommError::EndpointUnreachable(endpoint_id.to_string()));
        }
        Ok(pending)
    }

    fn name(&self) -> &'static str {
        "tcp"
    }
}

/// Endpoint side of the TCP transport.
pub struct TcpEndpointLink {
    endpoint_id: String,
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl TcpEndpointLink {
    /// Connects to the server, retrying until `retry_for` elapses, and sends
    /// the hello frame.
    pub fn connect(addr: &str, endpoint_id: impl Into<String>, retry_for: Duration) -> Result<Self, CommError> {
        let endpoint_id = endpoint_id.into();
        let deadline = Instant::now() + retry_for;
        let stream = loop {
            match TcpStream::connect(addr) {
                Ok(s) => break s,
                Err(e) if Instant::now() < deadline => {
                    log::debug!("connect to {addr} failed ({e}); retrying");
                    thread::sleep(Duration::from_millis(100));
                }
                Err(e) => return Err(CommError::Io(format!("cannot connect to {addr}: {e}"))),
            }
        };
        stream.set_nodelay(true)?;
        let mut writer = stream.try_clone()?;
        write_frame(
            &mut writer,
            &Frame::Hello {
                endpoint_id: endpoint_id.clone(),
            },
        )?;
        Ok(Self {
            endpoint_id,
            reader: BufReader::new(stream),
            writer,
        })
    }
}

impl EndpointLink for TcpEndpointLink {
    fn endpoint_id(&self) -> &str {
        &self.endpoint_id
    }

    fn recv(&mut self) -> Result<Option<TaskEnvelope>, CommError> {
        loop {
            match read_frame(&mut self.reader) {
                Ok(Some(Frame::Task(task))) => return Ok(Some(task)),
                Ok(Some(other)) => log::warn!("ignoring unexpected frame {other:?}"),
                Ok(None) => return Ok(None),
                Err(CommError::Io(e)) => {
                    log::info!("server connection closed: {e}");
                    return Ok(None);
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn send(&mut self, result: ResultEnvelope) -> Result<(), CommError> {
        write_frame(&mut BufWriter::new(&self.writer), &Frame::Result(result))
    }
}
