//! Client side of the EPSN/EPSR noise-prediction wire protocol.
//!
//! Request frame (all integers little-endian):
//!
//! ```text
//! "EPSN" | u8 version=1 | u64 id | u32 t | u32 rank | u32 dims[rank] | f32 payload[prod(dims)]
//! ```
//!
//! Response frame:
//!
//! ```text
//! "EPSR" | u8 version | u64 id | u8 status
//!     status 0: u32 rank | u32 dims[rank] | f32 payload
//!     status 1: u32 len  | utf-8 message[len]
//! ```
//!
//! Image tensors travel as rank 3 `[height, width, channels]` in the same
//! row-major, channel-innermost order as [`ImageTensor`].

use std::fmt;
use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::{ImageTensor, Shape};

pub const REQUEST_MAGIC: &[u8; 4] = b"EPSN";
pub const RESPONSE_MAGIC: &[u8; 4] = b"EPSR";
pub const PROTOCOL_VERSION: u8 = 1;

const MAX_RANK: u32 = 8;
const MAX_ELEMENTS: u64 = 1 << 28;
const MAX_MESSAGE: u32 = 1 << 20;

#[derive(Debug, Clone, PartialEq)]
pub struct WireTensor {
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl WireTensor {
    pub fn from_image(x: &ImageTensor) -> Self {
        let s = x.shape();
        Self {
            dims: vec![s.height as u32, s.width as u32, s.channels as u32],
            data: x.as_slice().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_image(&self) -> Result<ImageTensor> {
        let [h, w, c] = self.dims[..] else {
            return Err(Error::Protocol(format!(
                "expected rank 3 tensor, got rank {}",
                self.dims.len()
            )));
        };
        let shape = Shape::new(h as usize, w as usize, c as usize);
        ImageTensor::from_vec(shape, self.data.iter().map(|&v| v as f64).collect())
    }

    fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn read_from(r: &mut impl Read) -> Result<Self> {
        let rank = read_u32(r)?;
        if rank > MAX_RANK {
            return Err(Error::Protocol(format!("rank {rank} exceeds {MAX_RANK}")));
        }
        let dims = (0..rank).map(|_| read_u32(r)).collect::<Result<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
        let count = match count {
            Some(n) if n <= MAX_ELEMENTS => n as usize,
            _ => return Err(Error::Protocol(format!("tensor dims {dims:?} too large"))),
        };
        let mut bytes = vec![0u8; count * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(Self { dims, data })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpsRequest {
    pub id: u64,
    pub t: u32,
    pub tensor: WireTensor,
}

impl EpsRequest {
    pub fn encode(&self) -> Vec<u8> {
        let mut out =
            Vec::with_capacity(21 + 4 * self.tensor.dims.len() + 4 * self.tensor.data.len());
        out.extend_from_slice(REQUEST_MAGIC);
        out.push(PROTOCOL_VERSION);
        out.extend_from_slice(&self.id.to_le_bytes());
        out.extend_from_slice(&self.t.to_le_bytes());
        self.tensor.encode_into(&mut out);
        out
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        read_magic(r, REQUEST_MAGIC)?;
        let version = read_u8(r)?;
        if version != PROTOCOL_VERSION {
            return Err(Error::Protocol(format!("unsupported version {version}")));
        }
        let id = read_u64(r)?;
        let t = read_u32(r)?;
        let tensor = WireTensor::read_from(r)?;
        Ok(Self { id, t, tensor })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EpsResponse {
    Ok { id: u64, tensor: WireTensor },
    Error { id: u64, message: String },
}

impl EpsResponse {
    pub fn id(&self) -> u64 {
        match self {
            EpsResponse::Ok { id, .. } | EpsResponse::Error { id, .. } => *id,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(RESPONSE_MAGIC);
        out.push(PROTOCOL_VERSION);
        out.extend_from_slice(&self.id().to_le_bytes());
        match self {
            EpsResponse::Ok { tensor, .. } => {
                out.push(0);
                tensor.encode_into(&mut out);
            }
            EpsResponse::Error { message, .. } => {
                out.push(1);
                out.extend_from_slice(&(message.len() as u32).to_le_bytes());
                out.extend_from_slice(message.as_bytes());
            }
        }
        out
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        read_magic(r, RESPONSE_MAGIC)?;
        let version = read_u8(r)?;
        if version != PROTOCOL_VERSION {
            return Err(Error::Protocol(format!("unsupported version {version}")));
        }
        let id = read_u64(r)?;
        match read_u8(r)? {
            0 => Ok(EpsResponse::Ok {
                id,
                tensor: WireTensor::read_from(r)?,
            }),
            1 => {
                let len = read_u32(r)?;
                if len > MAX_MESSAGE {
                    return Err(Error::Protocol(format!("error message of {len} bytes")));
                }
                let mut bytes = vec![0u8; len as usize];
                r.read_exact(&mut bytes)?;
                let message = String::from_utf8(bytes)
                    .map_err(|_| Error::Protocol("error message is not utf-8".into()))?;
                Ok(EpsResponse::Error { id, message })
            }
            status => Err(Error::Protocol(format!("unknown status {status}"))),
        }
    }
}

fn read_magic(r: &mut impl Read, expected: &[u8; 4]) -> Result<()> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != expected {
        return Err(Error::Protocol(format!("bad magic {magic:02x?}")));
    }
    Ok(())
}

fn read_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Noise predictor served over TCP. One request is in flight per
/// connection; open several handles for parallel use.
pub struct ExternalDenoiser {
    address: String,
    stream: Mutex<TcpStream>,
    next_id: AtomicU64,
}

impl fmt::Debug for ExternalDenoiser {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExternalDenoiser")
            .field("address", &self.address)
            .finish_non_exhaustive()
    }
}

impl ExternalDenoiser {
    pub fn connect(address: &str) -> Result<Self> {
        let unreachable =
            |e: std::io::Error| Error::Denoiser(format!("cannot reach {address}: {e}"));
        let addr = address
            .to_socket_addrs()
            .map_err(unreachable)?
            .next()
            .ok_or_else(|| Error::Denoiser(format!("{address} resolves to nothing")))?;
        let stream =
            TcpStream::connect_timeout(&addr, Duration::from_secs(10)).map_err(unreachable)?;
        stream.set_nodelay(true)?;
        Ok(Self {
            address: address.to_string(),
            stream: Mutex::new(stream),
            next_id: AtomicU64::new(1),
        })
    }

    pub fn address(&self) -> &str {
        &self.address
    }

    pub fn request(&self, request: &EpsRequest) -> Result<EpsResponse> {
        let mut stream = self
            .stream
            .lock()
            .map_err(|_| Error::Denoiser("connection poisoned".into()))?;
        let lost = |e: Error| match e {
            Error::Io(io) => Error::Protocol(format!("connection to {}: {io}", self.address)),
            other => other,
        };
        stream
            .write_all(&request.encode())
            .and_then(|()| stream.flush())
            .map_err(|e| lost(e.into()))?;
        EpsResponse::read_from(&mut *stream).map_err(lost)
    }
}

impl Denoiser for ExternalDenoiser {
    fn epsilon(
        &self,
        x_t: &ImageTensor,
        t: usize,
        schedule: &NoiseSchedule,
    ) -> Result<ImageTensor> {
        schedule.check_step(t)?;
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let request = EpsRequest {
            id,
            t: t as u32,
            tensor: WireTensor::from_image(x_t),
        };
        match self.request(&request)? {
            EpsResponse::Ok { id: got, .. } | EpsResponse::Error { id: got, .. } if got != id => {
                Err(Error::Protocol(format!(
                    "response id {got} for request {id}"
                )))
            }
            EpsResponse::Error { message, .. } => Err(Error::Denoiser(message)),
            EpsResponse::Ok { tensor, .. } => {
                if tensor.dims != request.tensor.dims {
                    return Err(Error::Protocol(format!(
                        "response dims {:?} for request dims {:?}",
                        tensor.dims, request.tensor.dims
                    )));
                }
                let eps = tensor.to_image()?;
                if !eps.is_finite() {
                    return Err(Error::Denoiser(format!("server returned {}", eps.stats())));
                }
                Ok(eps)
            }
        }
    }
}

/// Answers one connection the way a `--dry-run` server does: every request
/// gets all-zeros of its own shape. Malformed frames get an error response
/// and the connection is closed.
pub fn serve_dry_run_connection(stream: TcpStream) -> Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    loop {
        let mut peek = [0u8; 1];
        if reader.read(&mut peek)? == 0 {
            return Ok(());
        }
        let mut frame = std::io::Read::chain(&peek[..], &mut reader);
        match EpsRequest::read_from(&mut frame) {
            Ok(req) => {
                let tensor = WireTensor {
                    data: vec![0.0; req.tensor.data.len()],
                    dims: req.tensor.dims,
                };
                writer.write_all(&EpsResponse::Ok { id: req.id, tensor }.encode())?;
                writer.flush()?;
            }
            Err(e) => {
                let response = EpsResponse::Error {
                    id: 0,
                    message: e.to_string(),
                };
                writer.write_all(&response.encode())?;
                writer.flush()?;
                return Err(e);
            }
        }
    }
}

/// Accepts connections forever, one thread per connection.
pub fn serve_dry_run(listener: TcpListener) {
    for stream in listener.incoming().flatten() {
        std::thread::spawn(move || {
            let _ = serve_dry_run_connection(stream);
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_request_bytes() {
        let req = EpsRequest {
            id: 0x0102030405060708,
            t: 500,
            tensor: WireTensor {
                dims: vec![1, 2, 1],
                data: vec![1.0, -2.5],
            },
        };
        let expected: Vec<u8> = [
            &b"EPSN"[..],
            &[1],
            &[8, 7, 6, 5, 4, 3, 2, 1],
            &[0xf4, 0x01, 0, 0],
            &[3, 0, 0, 0],
            &[1, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0],
            &[0x00, 0x00, 0x80, 0x3f],
            &[0x00, 0x00, 0x20, 0xc0],
        ]
        .concat();
        assert_eq!(req.encode(), expected);
        assert_eq!(EpsRequest::read_from(&mut &expected[..]).unwrap(), req);
    }

    #[test]
    fn golden_error_response_bytes() {
        let resp = EpsResponse::Error {
            id: 9,
            message: "bad".into(),
        };
        let expected: Vec<u8> = [
            &b"EPSR"[..],
            &[1],
            &[9, 0, 0, 0, 0, 0, 0, 0],
            &[1],
            &[3, 0, 0, 0],
            &b"bad"[..],
        ]
        .concat();
        assert_eq!(resp.encode(), expected);
        assert_eq!(EpsResponse::read_from(&mut &expected[..]).unwrap(), resp);
    }

    #[test]
    fn rejects_malformed_frames() {
        let good = EpsRequest {
            id: 1,
            t: 1,
            tensor: WireTensor {
                dims: vec![2],
                data: vec![0.0, 0.0],
            },
        }
        .encode();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            EpsRequest::read_from(&mut &bad_magic[..]),
            Err(Error::Protocol(_))
        ));

        let mut bad_version = good.clone();
        bad_version[4] = 2;
        assert!(matches!(
            EpsRequest::read_from(&mut &bad_version[..]),
            Err(Error::Protocol(_))
        ));

        let truncated = &good[..good.len() - 1];
        assert!(matches!(
            EpsRequest::read_from(&mut &truncated[..]),
            Err(Error::Io(_))
        ));

        let mut huge_rank = good.clone();
        huge_rank[17..21].copy_from_slice(&100u32.to_le_bytes());
        assert!(matches!(
            EpsRequest::read_from(&mut &huge_rank[..]),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn image_round_trip_through_f32() {
        let x = ImageTensor::from_fn(Shape::new(2, 3, 2), |h, w, c| {
            (h * 6 + w * 2 + c) as f64 * 0.25
        });
        assert_eq!(WireTensor::from_image(&x).to_image().unwrap(), x);
    }
}
