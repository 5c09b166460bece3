//! Length-prefixed canonical-JSON framing over stream sockets.
//!
//! A frame is a 4-byte big-endian payload length followed by the payload. The
//! same framing carries REE→plane requests, executor traffic and the remote
//! endpoint channel.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::canonical::{to_canonical_bytes, CanonicalError};

pub const MAX_FRAME_LEN: u32 = 16 * 1024 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("frame of {0} bytes exceeds limit")]
    TooLarge(u32),
    #[error("malformed frame payload: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Canonical(#[from] CanonicalError),
    #[error("peer closed the connection")]
    Closed,
}

pub fn write_frame_bytes<W: Write>(w: &mut W, payload: &[u8]) -> Result<(), WireError> {
    let len = u32::try_from(payload.len()).map_err(|_| WireError::TooLarge(u32::MAX))?;
    if len > MAX_FRAME_LEN {
        return Err(WireError::TooLarge(len));
    }
    w.write_all(&len.to_be_bytes())?;
    w.write_all(payload)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame. Returns `Ok(None)` on a clean end of stream at a frame
/// boundary.
pub fn read_frame_bytes<R: Read>(r: &mut R) -> Result<Option<Vec<u8>>, WireError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len);
    if len > MAX_FRAME_LEN {
        return Err(WireError::TooLarge(len));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}

pub fn write_frame<W: Write, T: Serialize>(w: &mut W, msg: &T) -> Result<(), WireError> {
    write_frame_bytes(w, &to_canonical_bytes(msg)?)
}

pub fn read_frame<R: Read, T: DeserializeOwned>(r: &mut R) -> Result<Option<T>, WireError> {
    match read_frame_bytes(r)? {
        Some(bytes) => Ok(Some(serde_json::from_slice(&bytes)?)),
        None => Ok(None),
    }
}

/// Blocking request/response client over one persistent connection.
#[derive(Debug)]
pub struct FrameClient {
    stream: TcpStream,
}

impl FrameClient {
    pub fn connect<A: ToSocketAddrs>(addr: A) -> Result<Self, WireError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self { stream })
    }

    pub fn set_timeout(&self, timeout: Option<Duration>) -> Result<(), WireError> {
        self.stream.set_read_timeout(timeout)?;
        Ok(())
    }

    pub fn call<Req: Serialize, Resp: DeserializeOwned>(&mut self, req: &Req) -> Result<Resp, WireError> {
        write_frame(&mut self.stream, req)?;
        read_frame(&mut self.stream)?.ok_or(WireError::Closed)
    }

    /// Sends raw payload bytes; used to exercise malformed-frame handling.
    pub fn call_raw(&mut self, payload: &[u8]) -> Result<Value, WireError> {
        write_frame_bytes(&mut self.stream, payload)?;
        read_frame(&mut self.stream)?.ok_or(WireError::Closed)
    }
}

/// Handles one decoded frame and produces the reply frame.
pub trait FrameHandler: Send + Sync + 'static {
    fn handle(&self, payload: &[u8]) -> Value;
}

impl<F> FrameHandler for F
where
    F: Fn(&[u8]) -> Value + Send + Sync + 'static,
{
    fn handle(&self, payload: &[u8]) -> Value {
        self(payload)
    }
}

/// Thread-per-connection frame server.
pub struct FrameServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl FrameServer {
    pub fn spawn<A: ToSocketAddrs, H: FrameHandler>(addr: A, handler: H) -> Result<Self, WireError> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let handler = Arc::new(handler);
        let stop_flag = Arc::clone(&stop);
        let accept = std::thread::Builder::new()
            .name(format!("frame-accept-{}", addr.port()))
            .spawn(move || {
                for conn in listener.incoming() {
                    if stop_flag.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = conn else { continue };
                    let handler = Arc::clone(&handler);
                    let _ = std::thread::Builder::new()
                        .name("frame-conn".into())
                        .spawn(move || serve_connection(stream, handler.as_ref()));
                }
            })?;
        Ok(Self {
            addr,
            stop,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        // Unblock the accept loop.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for FrameServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn serve_connection<H: FrameHandler + ?Sized>(mut stream: TcpStream, handler: &H) {
    let _ = stream.set_nodelay(true);
    loop {
        let payload = match read_frame_bytes(&mut stream) {
            Ok(Some(p)) => p,
            Ok(None) | Err(_) => return,
        };
        let reply = handler.handle(&payload);
        if write_frame(&mut stream, &reply).is_err() {
            return;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn frame_layout_is_length_prefixed_big_endian() {
        let mut buf = Vec::new();
        write_frame(&mut buf, &json!({"b": 2, "a": 1})).unwrap();
        assert_eq!(&buf[..4], &[0, 0, 0, 13]);
        assert_eq!(&buf[4..], br#"{"a":1,"b":2}"#);
        let back: Value = read_frame(&mut buf.as_slice()).unwrap().unwrap();
        assert_eq!(back, json!({"a": 1, "b": 2}));
    }

    #[test]
    fn oversized_and_truncated_frames() {
        let mut buf = (MAX_FRAME_LEN + 1).to_be_bytes().to_vec();
        buf.extend_from_slice(b"xx");
        assert!(matches!(
            read_frame_bytes(&mut buf.as_slice()),
            Err(WireError::TooLarge(_))
        ));
        let truncated = [0u8, 0, 0, 9, b'{'];
        assert!(read_frame_bytes(&mut truncated.as_slice()).is_err());
        assert!(read_frame_bytes(&mut [].as_slice()).unwrap().is_none());
    }

    #[test]
    fn server_echoes_over_loopback() {
        let server = FrameServer::spawn("127.0.0.1:0", |p: &[u8]| {
            let v: Value = serde_json::from_slice(p).unwrap_or(Value::Null);
            json!({ "echo": v })
        })
        .unwrap();
        let mut client = FrameClient::connect(server.local_addr()).unwrap();
        let reply: Value = client.call(&json!({"n": 7})).unwrap();
        assert_eq!(reply, json!({"echo": {"n": 7}}));
        let reply: Value = client.call(&json!([1, 2])).unwrap();
        assert_eq!(reply["echo"], json!([1, 2]));
    }
}
