//! Shared-memory segment between the coordinator and its CPU workers.
//!
//! Layout (little-endian, byte offsets):
//!
//! | offset | type       | field                                        |
//! |--------|------------|----------------------------------------------|
//! | 0      | u32        | magic (`LRA1`)                               |
//! | 4      | u32        | layer index of the current input             |
//! | 8      | u32        | token count `L`                              |
//! | 12     | u32        | hidden size `H`                              |
//! | 16     | atomic u64 | `input_seq`, bumped once per published layer |
//! | 24     | atomic u64 | `output_seq`, bumped once per finished layer |
//! | 32     | u32        | output slots (adapted projections)           |
//! | 36     | u32        | worker count                                 |
//! | 40     | atomic u32 | workers done with the current layer          |
//! | 44     | atomic u32 | fault word (worker index + 1, 0 if healthy)  |
//! | 48     | atomic u32 | shutdown flag                                |
//! | 64     | f32[L×H]   | input region                                 |
//! | 64 + align64(4·L·H) | f32[slots×L×H] | output region, slot-major  |
//!
//! The coordinator writes the input region and then increments `input_seq`
//! with release ordering; nothing else signals a new layer. Workers load
//! `input_seq` with acquire ordering before reading, write only their own
//! rows of the output region, and the last worker to finish a layer bumps
//! `output_seq`. The coordinator may publish again only once
//! `output_seq == input_seq`.

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::ptr;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};

use memmap2::{MmapOptions, MmapRaw};

use super::AssistError;
use crate::core_math::Matrix;

pub const MAGIC: u32 = u32::from_le_bytes(*b"LRA1");
pub const HEADER_BYTES: usize = 52;
pub const REGION_ALIGN: usize = 64;

const OFF_MAGIC: usize = 0;
const OFF_LAYER: usize = 4;
const OFF_TOKENS: usize = 8;
const OFF_HIDDEN: usize = 12;
const OFF_INPUT_SEQ: usize = 16;
const OFF_OUTPUT_SEQ: usize = 24;
const OFF_SLOTS: usize = 32;
const OFF_WORKERS: usize = 36;
const OFF_DONE: usize = 40;
const OFF_FAULT: usize = 44;
const OFF_SHUTDOWN: usize = 48;

fn align_up(n: usize) -> usize {
    n.div_ceil(REGION_ALIGN) * REGION_ALIGN
}

/// Region sizes derived from the header fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentLayout {
    pub token_count: usize,
    pub hidden: usize,
    pub slots: usize,
    pub workers: usize,
}

impl SegmentLayout {
    pub fn input_offset(&self) -> usize {
        align_up(HEADER_BYTES)
    }

    pub fn input_bytes(&self) -> usize {
        self.token_count * self.hidden * 4
    }

    pub fn output_offset(&self) -> usize {
        self.input_offset() + align_up(self.input_bytes())
    }

    pub fn slot_bytes(&self) -> usize {
        self.token_count * self.hidden * 4
    }

    pub fn total_bytes(&self) -> usize {
        self.output_offset() + align_up(self.slots * self.slot_bytes())
    }
}

/// Plain copy of the header's fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub magic: u32,
    pub layer_index: u32,
    pub token_count: u32,
    pub hidden: u32,
    pub input_seq: u64,
    pub output_seq: u64,
}

pub struct ShmSegment {
    map: MmapRaw,
    layout: SegmentLayout,
    path: Option<PathBuf>,
    owner: bool,
}

// SAFETY: all cross-thread access goes through atomics in the header or through
// region writes ordered by them (see module docs).
unsafe impl Send for ShmSegment {}
unsafe impl Sync for ShmSegment {}

impl std::fmt::Debug for ShmSegment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ShmSegment").field("layout", &self.layout).field("path", &self.path).finish()
    }
}

/// Directory for file-backed segments: `/dev/shm` when present, else the temp dir.
pub fn default_shm_dir() -> PathBuf {
    let dev_shm = Path::new("/dev/shm");
    if dev_shm.is_dir() {
        dev_shm.to_path_buf()
    } else {
        std::env::temp_dir()
    }
}

impl ShmSegment {
    /// Creates and initializes a segment. With `path`, the segment is a shared
    /// file mapping other processes can [`open`](Self::open); without, it is an
    /// anonymous mapping shared by threads of this process.
    pub fn create(path: Option<&Path>, layout: SegmentLayout) -> Result<Self, AssistError> {
        if layout.token_count == 0 || layout.hidden == 0 || layout.slots == 0 || layout.workers == 0 {
            return Err(AssistError::Precondition(format!("degenerate segment layout {layout:?}")));
        }
        let len = layout.total_bytes();
        let map = match path {
            Some(p) => {
                let file = OpenOptions::new().read(true).write(true).create(true).truncate(true).open(p)?;
                file.set_len(len as u64)?;
                MmapRaw::map_raw(&file)?
            }
            None => MmapRaw::from(MmapOptions::new().len(len).map_anon()?),
        };
        let seg = Self { map, layout, path: path.map(Path::to_path_buf), owner: true };
        seg.write_u32(OFF_LAYER, 0);
        seg.write_u32(OFF_TOKENS, layout.token_count as u32);
        seg.write_u32(OFF_HIDDEN, layout.hidden as u32);
        seg.write_u32(OFF_SLOTS, layout.slots as u32);
        seg.write_u32(OFF_WORKERS, layout.workers as u32);
        seg.atomic_u64(OFF_INPUT_SEQ).store(0, Ordering::Relaxed);
        seg.atomic_u64(OFF_OUTPUT_SEQ).store(0, Ordering::Relaxed);
        seg.atomic_u32(OFF_DONE).store(0, Ordering::Relaxed);
        seg.atomic_u32(OFF_FAULT).store(0, Ordering::Relaxed);
        seg.atomic_u32(OFF_SHUTDOWN).store(0, Ordering::Relaxed);
        // magic last: an opener that sees it sees a complete header
        seg.atomic_u32(OFF_MAGIC).store(MAGIC, Ordering::Release);
        Ok(seg)
    }

    /// Maps an existing file-backed segment and validates its header.
    pub fn open(path: &Path) -> Result<Self, AssistError> {
        let file = OpenOptions::new().read(true).write(true).open(path)?;
        let len = file.metadata()?.len() as usize;
        if len < align_up(HEADER_BYTES) {
            return Err(AssistError::Protocol(format!("segment {} is only {len} bytes", path.display())));
        }
        let map = MmapRaw::map_raw(&file)?;
        drop::<File>(file);
        let mut seg = Self {
            map,
            layout: SegmentLayout { token_count: 0, hidden: 0, slots: 0, workers: 0 },
            path: Some(path.to_path_buf()),
            owner: false,
        };
        let magic = seg.atomic_u32(OFF_MAGIC).load(Ordering::Acquire);
        if magic != MAGIC {
            return Err(AssistError::Protocol(format!("bad magic {magic:#010x}")));
        }
        seg.layout = SegmentLayout {
            token_count: seg.read_u32(OFF_TOKENS) as usize,
            hidden: seg.read_u32(OFF_HIDDEN) as usize,
            slots: seg.read_u32(OFF_SLOTS) as usize,
            workers: seg.read_u32(OFF_WORKERS) as usize,
        };
        if seg.layout.total_bytes() > len {
            return Err(AssistError::Protocol(format!(
                "header needs {} bytes, segment has {len}",
                seg.layout.total_bytes()
            )));
        }
        Ok(seg)
    }

    pub fn layout(&self) -> SegmentLayout {
        self.layout
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn base(&self) -> *mut u8 {
        self.map.as_mut_ptr()
    }

    fn atomic_u64(&self, off: usize) -> &AtomicU64 {
        debug_assert!(off.is_multiple_of(8) && off + 8 <= self.map.len());
        // SAFETY: in bounds, 8-aligned (mappings are page-aligned), lives as long as `self`.
        unsafe { &*(self.base().add(off) as *const AtomicU64) }
    }

    fn atomic_u32(&self, off: usize) -> &AtomicU32 {
        debug_assert!(off.is_multiple_of(4) && off + 4 <= self.map.len());
        // SAFETY: as above.
        unsafe { &*(self.base().add(off) as *const AtomicU32) }
    }

    fn write_u32(&self, off: usize, v: u32) {
        let bytes = v.to_le_bytes();
        // SAFETY: in bounds of the header.
        unsafe { ptr::copy_nonoverlapping(bytes.as_ptr(), self.base().add(off), 4) }
    }

    fn read_u32(&self, off: usize) -> u32 {
        let mut bytes = [0u8; 4];
        // SAFETY: in bounds of the header.
        unsafe { ptr::copy_nonoverlapping(self.base().add(off), bytes.as_mut_ptr(), 4) }
        u32::from_le_bytes(bytes)
    }

    pub fn header(&self) -> Header {
        Header {
            magic: self.atomic_u32(OFF_MAGIC).load(Ordering::Acquire),
            layer_index: self.read_u32(OFF_LAYER),
            token_count: self.read_u32(OFF_TOKENS),
            hidden: self.read_u32(OFF_HIDDEN),
            input_seq: self.input_seq(),
            output_seq: self.output_seq(),
        }
    }

    pub fn input_seq(&self) -> u64 {
        self.atomic_u64(OFF_INPUT_SEQ).load(Ordering::Acquire)
    }

    pub fn output_seq(&self) -> u64 {
        self.atomic_u64(OFF_OUTPUT_SEQ).load(Ordering::Acquire)
    }

    pub fn layer_index(&self) -> u32 {
        self.read_u32(OFF_LAYER)
    }

    /// Copies `x` into the input region, then signals it with a single
    /// release increment of `input_seq`. Returns the new sequence number.
    pub fn publish_layer_input(&self, layer: u32, x: &Matrix) -> Result<u64, AssistError> {
        let (l, h) = (self.layout.token_count, self.layout.hidden);
        if x.shape() != (l, h) {
            return Err(AssistError::Precondition(format!("layer input is {:?}, segment holds {l}x{h}", x.shape())));
        }
        let input = self.atomic_u64(OFF_INPUT_SEQ).load(Ordering::Relaxed);
        let output = self.output_seq();
        if output != input {
            return Err(AssistError::Protocol(format!(
                "layer {layer} published over unconsumed input (input_seq {input}, output_seq {output})"
            )));
        }
        self.write_u32(OFF_LAYER, layer);
        // SAFETY: region sized from the layout; workers do not read it until the release below.
        unsafe {
            ptr::copy_nonoverlapping(
                x.as_slice().as_ptr() as *const u8,
                self.base().add(self.layout.input_offset()),
                self.layout.input_bytes(),
            );
        }
        let seq = input + 1;
        self.atomic_u64(OFF_INPUT_SEQ).store(seq, Ordering::Release);
        Ok(seq)
    }

    /// Reads input rows `start..start + len`. Callers must have observed the
    /// current `input_seq` first.
    pub fn read_input_rows(&self, start: usize, len: usize) -> Result<Matrix, AssistError> {
        let h = self.layout.hidden;
        self.check_rows(start, len)?;
        let mut data = vec![0.0f32; len * h];
        // SAFETY: bounds checked above.
        unsafe {
            ptr::copy_nonoverlapping(
                self.base().add(self.layout.input_offset() + start * h * 4),
                data.as_mut_ptr() as *mut u8,
                len * h * 4,
            );
        }
        Ok(Matrix::from_vec(len, h, data)?)
    }

    pub fn write_output_rows(&self, slot: usize, start: usize, rows: &Matrix) -> Result<(), AssistError> {
        let h = self.layout.hidden;
        self.check_rows(start, rows.rows())?;
        if slot >= self.layout.slots || rows.cols() != h {
            return Err(AssistError::Precondition(format!("bad output write: slot {slot}, shape {:?}", rows.shape())));
        }
        let off = self.layout.output_offset() + slot * self.layout.slot_bytes() + start * h * 4;
        // SAFETY: bounds checked above; each worker owns disjoint rows.
        unsafe {
            ptr::copy_nonoverlapping(rows.as_slice().as_ptr() as *const u8, self.base().add(off), rows.rows() * h * 4);
        }
        Ok(())
    }

    /// Whole output slot. Callers must have observed `output_seq` first.
    pub fn read_output(&self, slot: usize) -> Result<Matrix, AssistError> {
        if slot >= self.layout.slots {
            return Err(AssistError::Precondition(format!("slot {slot} out of {}", self.layout.slots)));
        }
        let (l, h) = (self.layout.token_count, self.layout.hidden);
        let mut data = vec![0.0f32; l * h];
        let off = self.layout.output_offset() + slot * self.layout.slot_bytes();
        // SAFETY: slot bounds checked above.
        unsafe { ptr::copy_nonoverlapping(self.base().add(off), data.as_mut_ptr() as *mut u8, l * h * 4) }
        Ok(Matrix::from_vec(l, h, data)?)
    }

    fn check_rows(&self, start: usize, len: usize) -> Result<(), AssistError> {
        if len == 0 || start + len > self.layout.token_count {
            return Err(AssistError::Precondition(format!(
                "rows {start}..{} outside 0..{}",
                start + len,
                self.layout.token_count
            )));
        }
        Ok(())
    }

    /// Marks this worker's share of the current layer done. The last of
    /// `workers` to arrive resets the count and bumps `output_seq`.
    pub fn complete_slice(&self) -> bool {
        let done = self.atomic_u32(OFF_DONE).fetch_add(1, Ordering::AcqRel) + 1;
        if done as usize == self.layout.workers {
            self.atomic_u32(OFF_DONE).store(0, Ordering::Relaxed);
            self.atomic_u64(OFF_OUTPUT_SEQ).fetch_add(1, Ordering::Release);
            true
        } else {
            false
        }
    }

    pub fn report_fault(&self, worker: usize) {
        let _ = self.atomic_u32(OFF_FAULT).compare_exchange(0, worker as u32 + 1, Ordering::AcqRel, Ordering::Acquire);
    }

    /// Index of the first worker that reported a fault.
    pub fn fault(&self) -> Option<usize> {
        match self.atomic_u32(OFF_FAULT).load(Ordering::Acquire) {
            0 => None,
            w => Some(w as usize - 1),
        }
    }

    pub fn request_shutdown(&self) {
        self.atomic_u32(OFF_SHUTDOWN).store(1, Ordering::Release);
    }

    pub fn shutdown_requested(&self) -> bool {
        self.atomic_u32(OFF_SHUTDOWN).load(Ordering::Acquire) != 0
    }
}

impl Drop for ShmSegment {
    fn drop(&mut self) {
        if self.owner {
            if let Some(p) = &self.path {
                let _ = std::fs::remove_file(p);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(l: usize, h: usize) -> SegmentLayout {
        SegmentLayout { token_count: l, hidden: h, slots: 1, workers: 1 }
    }

    #[test]
    fn layout_is_aligned() {
        let lay = SegmentLayout { token_count: 3, hidden: 5, slots: 2, workers: 2 };
        assert_eq!(lay.input_offset(), 64);
        assert_eq!(lay.output_offset(), 128);
        assert_eq!(lay.total_bytes(), 128 + 128);
    }

    #[test]
    fn header_bytes_are_little_endian() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("seg");
        let seg = ShmSegment::create(Some(&p), layout(3, 4)).unwrap();
        let x = Matrix::from_vec(3, 4, (0..12).map(|v| v as f32).collect()).unwrap();
        seg.publish_layer_input(7, &x).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[0..4], b"LRA1");
        assert_eq!(&bytes[4..8], &7u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &4u32.to_le_bytes());
        assert_eq!(&bytes[16..24], &1u64.to_le_bytes());
        assert_eq!(&bytes[24..32], &0u64.to_le_bytes());
        assert_eq!(&bytes[64..68], &0.0f32.to_le_bytes());
        assert_eq!(&bytes[68..72], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[108..112], &11.0f32.to_le_bytes());
        drop(seg);
        assert!(!p.exists());
    }

    #[test]
    fn publish_round_trip_and_sequencing() {
        let seg = ShmSegment::create(None, layout(2, 3)).unwrap();
        let x = Matrix::from_vec(2, 3, vec![1.5, -2.0, 3.25, 0.0, 7.0, -1e-3]).unwrap();
        assert_eq!(seg.publish_layer_input(0, &x).unwrap(), 1);
        assert_eq!(seg.read_input_rows(0, 2).unwrap(), x);
        assert!(matches!(seg.publish_layer_input(1, &x), Err(AssistError::Protocol(_))));
        assert!(seg.complete_slice());
        for k in 2..=5u64 {
            assert_eq!(seg.publish_layer_input(k as u32, &x).unwrap(), k);
            seg.complete_slice();
        }
        assert_eq!(seg.header().input_seq, 5);
        assert_eq!(seg.header().output_seq, 5);
    }

    #[test]
    fn consumer_never_sees_torn_input() {
        let seg = std::sync::Arc::new(ShmSegment::create(None, layout(64, 32)).unwrap());
        let rounds = 200u64;
        let consumer = {
            let seg = std::sync::Arc::clone(&seg);
            std::thread::spawn(move || {
                for k in 1..=rounds {
                    while seg.input_seq() < k {
                        std::hint::spin_loop();
                    }
                    let x = seg.read_input_rows(0, 64).unwrap();
                    assert!(x.as_slice().iter().all(|&v| v == k as f32), "torn read at layer {k}");
                    let sum: f32 = x.as_slice().iter().sum();
                    seg.write_output_rows(0, 0, &Matrix::from_vec(1, 32, vec![sum; 32]).unwrap()).unwrap();
                    seg.complete_slice();
                }
            })
        };
        for k in 1..=rounds {
            let x = Matrix::from_vec(64, 32, vec![k as f32; 64 * 32]).unwrap();
            seg.publish_layer_input(k as u32, &x).unwrap();
            while seg.output_seq() < k {
                std::hint::spin_loop();
            }
            assert_eq!(seg.read_output(0).unwrap().get(0, 0), (k * 64 * 32) as f32);
        }
        consumer.join().unwrap();
    }

    #[test]
    fn open_validates() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("seg");
        let seg =
            ShmSegment::create(Some(&p), SegmentLayout { token_count: 4, hidden: 2, slots: 3, workers: 2 }).unwrap();
        let other = ShmSegment::open(&p).unwrap();
        assert_eq!(other.layout(), seg.layout());
        drop(other);
        assert!(p.exists());
        let junk = dir.path().join("junk");
        std::fs::write(&junk, vec![0u8; 128]).unwrap();
        assert!(matches!(ShmSegment::open(&junk), Err(AssistError::Protocol(_))));
    }

    #[test]
    fn last_worker_bumps_output_and_faults_stick() {
        let seg = ShmSegment::create(None, SegmentLayout { token_count: 4, hidden: 2, slots: 1, workers: 3 }).unwrap();
        seg.publish_layer_input(0, &Matrix::zeros(4, 2)).unwrap();
        assert!(!seg.complete_slice());
        assert!(!seg.complete_slice());
        assert_eq!(seg.output_seq(), 0);
        assert!(seg.complete_slice());
        assert_eq!(seg.output_seq(), 1);
        assert_eq!(seg.fault(), None);
        seg.report_fault(2);
        seg.report_fault(0);
        assert_eq!(seg.fault(), Some(2));
    }
}
