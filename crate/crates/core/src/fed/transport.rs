use std::io::{ErrorKind, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::time::{Duration, Instant};

use super::codec::{decode_header, decode_message, encode_message, frame_len, Message, HEADER_LEN};
use super::{FedError, NodeSpec, Result};

pub const HELLO_TIMEOUT: Duration = Duration::from_secs(30);
const MAX_FRAME: usize = 1 << 30;

/// Ordered, reliable, message-framed duplex link.
pub trait Connection: Send {
    fn send(&mut self, msg: &Message) -> Result<()>;
    fn recv(&mut self) -> Result<Message>;
    /// Human-readable peer label for diagnostics.
    fn peer(&self) -> String;
}

/// In-process link. Frames go through the wire codec like on TCP.
pub struct InprocConnection {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    label: String,
}

pub fn inproc_pair(label: &str) -> (InprocConnection, InprocConnection) {
    let (a_tx, b_rx) = channel();
    let (b_tx, a_rx) = channel();
    (
        InprocConnection {
            tx: a_tx,
            rx: a_rx,
            label: format!("{label} (client side)"),
        },
        InprocConnection {
            tx: b_tx,
            rx: b_rx,
            label: format!("{label} (server side)"),
        },
    )
}

impl Connection for InprocConnection {
    fn send(&mut self, msg: &Message) -> Result<()> {
        let frame = encode_message(msg)?;
        self.tx.send(frame).map_err(|_| FedError::Transport {
            node: self.label.clone(),
            detail: "peer hung up".into(),
        })
    }

    fn recv(&mut self) -> Result<Message> {
        let frame = self.rx.recv().map_err(|_| FedError::Transport {
            node: self.label.clone(),
            detail: "peer hung up".into(),
        })?;
        Ok(decode_message(&frame)?)
    }

    fn peer(&self) -> String {
        self.label.clone()
    }
}

pub struct TcpConnection {
    stream: TcpStream,
    label: String,
}

impl TcpConnection {
    pub fn new(stream: TcpStream) -> Result<Self> {
        let label = stream
            .peer_addr()
            .map(|a| a.to_string())
            .unwrap_or_else(|_| "unknown peer".into());
        stream.set_nodelay(true).map_err(|e| io_err(&label, e))?;
        Ok(Self { stream, label })
    }

    pub fn set_read_timeout(&self, t: Option<Duration>) -> Result<()> {
        self.stream.set_read_timeout(t).map_err(|e| io_err(&self.label, e))
    }
}

fn io_err(node: &str, e: std::io::Error) -> FedError {
    let detail = match e.kind() {
        ErrorKind::WouldBlock | ErrorKind::TimedOut => "timed out".to_string(),
        ErrorKind::UnexpectedEof => "connection closed".to_string(),
        _ => e.to_string(),
    };
    FedError::Transport {
        node: node.to_string(),
        detail,
    }
}

impl Connection for TcpConnection {
    fn send(&mut self, msg: &Message) -> Result<()> {
        let frame = encode_message(msg)?;
        self.stream.write_all(&frame).map_err(|e| io_err(&self.label, e))?;
        self.stream.flush().map_err(|e| io_err(&self.label, e))
    }

    fn recv(&mut self) -> Result<Message> {
        let mut buf = vec![0u8; HEADER_LEN];
        self.stream.read_exact(&mut buf).map_err(|e| io_err(&self.label, e))?;
        let total = frame_len(&decode_header(&buf)?)?;
        if total > MAX_FRAME {
            return Err(FedError::Protocol(format!("{} announced a {total}-byte frame", self.label)));
        }
        buf.resize(total, 0);
        self.stream
            .read_exact(&mut buf[HEADER_LEN..])
            .map_err(|e| io_err(&self.label, e))?;
        Ok(decode_message(&buf)?)
    }

    fn peer(&self) -> String {
        self.label.clone()
    }
}

/// Connects and announces the node with a Hello.
pub fn connect_tcp(addr: impl ToSocketAddrs, node: &NodeSpec) -> Result<TcpConnection> {
    let stream = TcpStream::connect(addr).map_err(|e| io_err(&format!("server (node {})", node.node_id), e))?;
    let mut conn = TcpConnection::new(stream)?;
    conn.send(&hello(node))?;
    Ok(conn)
}

pub(crate) fn hello(node: &NodeSpec) -> Message {
    Message::Hello {
        node_id: node.node_id,
        task: node.task.clone(),
        sample_count: node.sample_count,
    }
}

/// Validates a Hello against the configured nodes; returns the announced
/// spec or the reason for rejection.
pub(crate) fn register(
    msg: Message,
    expected: &[NodeSpec],
    joined: &[NodeSpec],
) -> std::result::Result<NodeSpec, (Option<u16>, String)> {
    let Message::Hello {
        node_id,
        task,
        sample_count,
    } = msg
    else {
        return Err((None, format!("expected Hello, got {}", msg.kind())));
    };
    if joined.iter().any(|n| n.node_id == node_id) {
        return Err((Some(node_id), format!("node id {node_id} already joined")));
    }
    match expected.iter().find(|n| n.node_id == node_id) {
        None => Err((Some(node_id), format!("node id {node_id} is not configured"))),
        Some(n) if n.task != task => Err((
            Some(node_id),
            format!("node {node_id} announced task {task:?}, configured {:?}", n.task),
        )),
        Some(_) => Ok(NodeSpec {
            node_id,
            task,
            sample_count,
        }),
    }
}

/// Accepts connections until every configured node has said Hello.
/// Duplicate or unknown node ids get a Shutdown and are dropped. Fails if
/// the full set has not joined within `timeout`.
pub fn accept_clients(
    listener: &TcpListener,
    expected: &[NodeSpec],
    timeout: Duration,
) -> Result<Vec<(NodeSpec, Box<dyn Connection>)>> {
    let deadline = Instant::now() + timeout;
    let label = listener
        .local_addr()
        .map(|a| a.to_string())
        .unwrap_or_else(|_| "listener".into());
    listener.set_nonblocking(true).map_err(|e| io_err(&label, e))?;
    let mut joined: Vec<(NodeSpec, Box<dyn Connection>)> = Vec::new();
    while joined.len() < expected.len() {
        let now = Instant::now();
        if now >= deadline {
            let missing: Vec<u16> = expected
                .iter()
                .filter(|n| !joined.iter().any(|(j, _)| j.node_id == n.node_id))
                .map(|n| n.node_id)
                .collect();
            return Err(FedError::Transport {
                node: format!("{missing:?}"),
                detail: format!("no Hello within {timeout:?}"),
            });
        }
        let stream = match listener.accept() {
            Ok((s, _)) => s,
            Err(e) if e.kind() == ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(5));
                continue;
            }
            Err(e) => return Err(io_err(&label, e)),
        };
        stream.set_nonblocking(false).map_err(|e| io_err(&label, e))?;
        let mut conn = TcpConnection::new(stream)?;
        conn.set_read_timeout(Some(deadline.saturating_duration_since(now).max(Duration::from_millis(1))))?;
        let msg = match conn.recv() {
            Ok(m) => m,
            Err(_) => continue,
        };
        let specs: Vec<NodeSpec> = joined.iter().map(|(n, _)| n.clone()).collect();
        match register(msg, expected, &specs) {
            Ok(spec) => {
                conn.set_read_timeout(None)?;
                joined.push((spec, Box::new(conn)));
            }
            Err(_) => {
                let _ = conn.send(&Message::Shutdown { round: 0 });
            }
        }
    }
    joined.sort_by_key(|(n, _)| n.node_id);
    Ok(joined)
}
