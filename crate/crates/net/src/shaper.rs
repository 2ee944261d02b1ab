//! Token-bucket rate limiting for the outgoing half of a connection.

use std::io::{self, Write};
use std::thread;
use std::time::{Duration, Instant};

/// Bucket capacity in bytes.
pub const BURST_BYTES: usize = 32 << 10;

// Writes are split so no single write outruns the bucket by much.
const CHUNK_BYTES: usize = 4 << 10;

/// A writer that paces its output to `rate_bps` bits per second. With no
/// rate it passes writes straight through.
///
/// The bucket starts empty and holds at most [`BURST_BYTES`] of credit.
/// Writing ahead of the credit puts the bucket into debt, and the writer
/// sleeps until the debt is repaid.
#[derive(Debug)]
pub struct ShapedWriter<W> {
    inner: W,
    bucket: Option<Bucket>,
}

#[derive(Debug)]
struct Bucket {
    bytes_per_sec: f64,
    tokens: f64,
    last: Instant,
}

impl Bucket {
    fn refill(&mut self) {
        let now = Instant::now();
        let earned = now.duration_since(self.last).as_secs_f64() * self.bytes_per_sec;
        self.tokens = (self.tokens + earned).min(BURST_BYTES as f64);
        self.last = now;
    }

    fn spend(&mut self, n: usize) {
        self.refill();
        self.tokens -= n as f64;
        if self.tokens < 0.0 {
            thread::sleep(Duration::from_secs_f64(-self.tokens / self.bytes_per_sec));
            self.refill();
        }
    }
}

impl<W: Write> ShapedWriter<W> {
    /// `rate_bps` must be positive and finite when set.
    pub fn new(inner: W, rate_bps: Option<f64>) -> Self {
        let bucket = rate_bps.map(|bps| {
            assert!(bps > 0.0 && bps.is_finite(), "shaping rate must be positive, got {bps}");
            Bucket {
                bytes_per_sec: bps / 8.0,
                tokens: 0.0,
                last: Instant::now(),
            }
        });
        ShapedWriter { inner, bucket }
    }

    pub fn passthrough(inner: W) -> Self {
        Self::new(inner, None)
    }

    pub fn rate_bps(&self) -> Option<f64> {
        self.bucket.as_ref().map(|b| b.bytes_per_sec * 8.0)
    }

    pub fn get_ref(&self) -> &W {
        &self.inner
    }

    pub fn get_mut(&mut self) -> &mut W {
        &mut self.inner
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

impl<W: Write> Write for ShapedWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        match &mut self.bucket {
            None => self.inner.write(buf),
            Some(bucket) => {
                let n = buf.len().min(CHUNK_BYTES);
                bucket.spend(n);
                self.inner.write_all(&buf[..n])?;
                Ok(n)
            }
        }
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}
