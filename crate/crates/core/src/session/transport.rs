use std::io::{BufReader, BufWriter, Write};
use std::net::{Ipv4Addr, TcpListener, TcpStream};
use std::sync::mpsc::{channel, Receiver, Sender};

use crate::control::SessionError;

use super::wire::Frame;

/// Moves frames between the two endpoints. Every implementation carries the
/// same encoded bytes.
pub trait FrameTransport: Send {
    fn send(&mut self, frame: &Frame) -> Result<(), SessionError>;
    fn recv(&mut self) -> Result<Frame, SessionError>;
}

#[derive(Debug)]
pub struct MemoryTransport {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

pub fn memory_pair() -> (MemoryTransport, MemoryTransport) {
    let (a_tx, b_rx) = channel();
    let (b_tx, a_rx) = channel();
    (
        MemoryTransport { tx: a_tx, rx: a_rx },
        MemoryTransport { tx: b_tx, rx: b_rx },
    )
}

impl FrameTransport for MemoryTransport {
    fn send(&mut self, frame: &Frame) -> Result<(), SessionError> {
        self.tx
            .send(frame.encode()?)
            .map_err(|_| SessionError::Transport("peer hung up".into()))
    }

    fn recv(&mut self) -> Result<Frame, SessionError> {
        let bytes = self
            .rx
            .recv()
            .map_err(|_| SessionError::Transport("peer hung up".into()))?;
        Ok(Frame::decode(&bytes)?)
    }
}

#[derive(Debug)]
pub struct TcpTransport {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl TcpTransport {
    pub fn new(stream: TcpStream) -> Result<Self, SessionError> {
        stream.set_nodelay(true).map_err(io_err)?;
        let reader = BufReader::new(stream.try_clone().map_err(io_err)?);
        Ok(Self {
            reader,
            writer: BufWriter::new(stream),
        })
    }
}

fn io_err(e: std::io::Error) -> SessionError {
    SessionError::Transport(e.to_string())
}

/// Two connected endpoints over loopback TCP.
pub fn tcp_pair() -> Result<(TcpTransport, TcpTransport), SessionError> {
    let listener = TcpListener::bind((Ipv4Addr::LOCALHOST, 0)).map_err(io_err)?;
    let addr = listener.local_addr().map_err(io_err)?;
    let client = TcpStream::connect(addr).map_err(io_err)?;
    let (server, _) = listener.accept().map_err(io_err)?;
    Ok((TcpTransport::new(client)?, TcpTransport::new(server)?))
}

impl FrameTransport for TcpTransport {
    fn send(&mut self, frame: &Frame) -> Result<(), SessionError> {
        frame.write_to(&mut self.writer)?;
        self.writer.flush().map_err(io_err)
    }

    fn recv(&mut self) -> Result<Frame, SessionError> {
        Ok(Frame::read_from(&mut self.reader)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Transmitter to receiver.
    Down,
    /// Receiver to transmitter.
    Up,
}

/// Every frame seen at one endpoint, as wire bytes, in order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    pub entries: Vec<(Direction, Vec<u8>)>,
}

impl Transcript {
    /// One line per frame: `down|up <hex>`.
    pub fn to_hex(&self) -> String {
        let mut out = String::new();
        for (dir, bytes) in &self.entries {
            out.push_str(match dir {
                Direction::Down => "down ",
                Direction::Up => "up ",
            });
            for b in bytes {
                out.push_str(&format!("{b:02x}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_hex(text: &str) -> Result<Self, String> {
        let mut entries = Vec::new();
        for (n, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let (dir, hex) = line
                .split_once(' ')
                .ok_or_else(|| format!("line {}: missing direction", n + 1))?;
            let dir = match dir {
                "down" => Direction::Down,
                "up" => Direction::Up,
                other => return Err(format!("line {}: bad direction `{other}`", n + 1)),
            };
            let hex = hex.trim();
            if hex.len() % 2 != 0 {
                return Err(format!("line {}: odd hex length", n + 1));
            }
            let bytes = (0..hex.len())
                .step_by(2)
                .map(|i| {
                    u8::from_str_radix(&hex[i..i + 2], 16)
                        .map_err(|e| format!("line {}: {e}", n + 1))
                })
                .collect::<Result<Vec<u8>, String>>()?;
            entries.push((dir, bytes));
        }
        Ok(Self { entries })
    }

    pub fn frames(&self) -> Result<Vec<(Direction, Frame)>, SessionError> {
        self.entries
            .iter()
            .map(|(d, b)| Ok((*d, Frame::decode(b)?)))
            .collect()
    }
}

/// Wraps a transport and logs the bytes of every frame.
pub struct Recording<T> {
    inner: T,
    transcript: Transcript,
}

impl<T: FrameTransport> Recording<T> {
    pub fn new(inner: T) -> Self {
        Self {
            inner,
            transcript: Transcript::default(),
        }
    }

    pub fn into_transcript(self) -> Transcript {
        self.transcript
    }
}

impl<T: FrameTransport> FrameTransport for Recording<T> {
    fn send(&mut self, frame: &Frame) -> Result<(), SessionError> {
        self.inner.send(frame)?;
        self.transcript
            .entries
            .push((Direction::Up, frame.encode()?));
        Ok(())
    }

    fn recv(&mut self) -> Result<Frame, SessionError> {
        let frame = self.inner.recv()?;
        self.transcript
            .entries
            .push((Direction::Down, frame.encode()?));
        Ok(frame)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::session::wire::FrameKind;

    fn exercise(mut a: impl FrameTransport, mut b: impl FrameTransport) {
        let f = Frame::new(FrameKind::Text, 7, vec![1, 2, 3, 4]);
        a.send(&f).unwrap();
        a.send(&Frame::fin(8)).unwrap();
        assert_eq!(b.recv().unwrap(), f);
        assert_eq!(b.recv().unwrap(), Frame::fin(8));
        b.send(&f).unwrap();
        assert_eq!(a.recv().unwrap(), f);
    }

    #[test]
    fn memory_transport() {
        let (a, b) = memory_pair();
        exercise(a, b);
    }

    #[test]
    fn tcp_transport() {
        let (a, b) = tcp_pair().unwrap();
        exercise(a, b);
    }

    #[test]
    fn hung_up_peer_is_an_error() {
        let (mut a, b) = memory_pair();
        drop(b);
        assert!(matches!(
            a.send(&Frame::fin(0)),
            Err(SessionError::Transport(_))
        ));
        assert!(matches!(a.recv(), Err(SessionError::Transport(_))));
        let (mut a, b) = tcp_pair().unwrap();
        drop(b);
        assert!(a.recv().is_err());
    }

    #[test]
    fn transcript_hex_round_trip() {
        let t = Transcript {
            entries: vec![
                (
                    Direction::Down,
                    Frame::new(FrameKind::Meta, 0, vec![0xab]).encode().unwrap(),
                ),
                (Direction::Up, Frame::fin(2).encode().unwrap()),
            ],
        };
        let hex = t.to_hex();
        assert!(hex.starts_with("down 5351010000010000"));
        assert_eq!(Transcript::from_hex(&hex).unwrap(), t);
        assert!(Transcript::from_hex("sideways 00").is_err());
        assert!(Transcript::from_hex("up 0").is_err());
    }
}
