use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

/// Buffers a forward pass touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Buffer {
    Input,
    Codes,
    Scales,
    ZeroPoints,
    /// Fully dequantized `W'`, only materialized by the naive path.
    DequantTemp,
    A,
    B,
    /// Down-projection output `t = x·Aᵀ`.
    Intermediate,
    Output,
}

impl Buffer {
    pub const ALL: [Buffer; 9] = [
        Buffer::Input,
        Buffer::Codes,
        Buffer::Scales,
        Buffer::ZeroPoints,
        Buffer::DequantTemp,
        Buffer::A,
        Buffer::B,
        Buffer::Intermediate,
        Buffer::Output,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Buffer::Input => "input",
            Buffer::Codes => "codes",
            Buffer::Scales => "scales",
            Buffer::ZeroPoints => "zero_points",
            Buffer::DequantTemp => "dequant_temp",
            Buffer::A => "a",
            Buffer::B => "b",
            Buffer::Intermediate => "intermediate",
            Buffer::Output => "output",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Byte-level memory traffic, kernel launches and multiply-accumulates.
///
/// Safe to share across threads; every field only grows until [`reset`].
///
/// [`reset`]: TrafficCounter::reset
#[derive(Debug, Default)]
pub struct TrafficCounter {
    reads: [AtomicU64; 9],
    writes: [AtomicU64; 9],
    kernels: AtomicU64,
    macs: AtomicU64,
}

impl TrafficCounter {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn read(&self, buf: Buffer, bytes: usize) {
        self.reads[buf.index()].fetch_add(bytes as u64, Ordering::Relaxed);
    }

    #[inline]
    pub fn write(&self, buf: Buffer, bytes: usize) {
        self.writes[buf.index()].fetch_add(bytes as u64, Ordering::Relaxed);
    }

    #[inline]
    pub fn launch(&self) {
        self.kernels.fetch_add(1, Ordering::Relaxed);
    }

    #[inline]
    pub fn add_macs(&self, n: usize) {
        self.macs.fetch_add(n as u64, Ordering::Relaxed);
    }

    pub fn reset(&self) {
        for c in self.reads.iter().chain(&self.writes) {
            c.store(0, Ordering::Relaxed);
        }
        self.kernels.store(0, Ordering::Relaxed);
        self.macs.store(0, Ordering::Relaxed);
    }

    pub fn bytes_read(&self) -> u64 {
        self.reads.iter().map(|c| c.load(Ordering::Relaxed)).sum()
    }

    pub fn bytes_written(&self) -> u64 {
        self.writes.iter().map(|c| c.load(Ordering::Relaxed)).sum()
    }

    pub fn kernels_launched(&self) -> u64 {
        self.kernels.load(Ordering::Relaxed)
    }

    pub fn macs(&self) -> u64 {
        self.macs.load(Ordering::Relaxed)
    }

    pub fn read_of(&self, buf: Buffer) -> u64 {
        self.reads[buf.index()].load(Ordering::Relaxed)
    }

    pub fn written_to(&self, buf: Buffer) -> u64 {
        self.writes[buf.index()].load(Ordering::Relaxed)
    }

    pub fn snapshot(&self) -> TrafficSnapshot {
        let per_buffer = Buffer::ALL
            .iter()
            .map(|&b| {
                (
                    b.name().to_string(),
                    BufferTraffic {
                        read: self.read_of(b),
                        written: self.written_to(b),
                    },
                )
            })
            .collect();
        TrafficSnapshot {
            bytes_read: self.bytes_read(),
            bytes_written: self.bytes_written(),
            kernels_launched: self.kernels_launched(),
            macs: self.macs(),
            per_buffer,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BufferTraffic {
    pub read: u64,
    pub written: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrafficSnapshot {
    pub bytes_read: u64,
    pub bytes_written: u64,
    pub kernels_launched: u64,
    pub macs: u64,
    pub per_buffer: BTreeMap<String, BufferTraffic>,
}

impl TrafficSnapshot {
    pub fn buffer(&self, buf: Buffer) -> BufferTraffic {
        self.per_buffer.get(buf.name()).copied().unwrap_or_default()
    }
}
