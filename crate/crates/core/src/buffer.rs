//! Capacity-bounded replay storage for encoded latent tensors.
//!
//! Eviction rule: when over budget, remove one uniformly-random entry from
//! the class with the most stored samples (ties broken toward the lowest
//! class id, so runs stay reproducible; the rng only picks the sample within
//! the class).

use std::collections::BTreeMap;

use base64::Engine;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pq::{EncodedTensor, PqCodec};
use crate::tensor::LatentTensor;

#[derive(Debug, Clone)]
pub struct BufferEntry {
    pub enc: EncodedTensor,
    pub rehearsal_count: u64,
    pub insert_time: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BufferStats {
    pub class_histogram: BTreeMap<u32, usize>,
    pub total_bytes: usize,
    pub entry_count: usize,
    pub peak_bytes: usize,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    entries: Vec<BufferEntry>,
    capacity_bytes: usize,
    stored_bytes: usize,
    peak_bytes: usize,
    class_histogram: BTreeMap<u32, usize>,
    clock: u64,
}

impl ReplayBuffer {
    pub fn new(capacity_bytes: usize) -> Result<Self> {
        if capacity_bytes == 0 {
            return Err(Error::Config("buffer capacity must be positive".into()));
        }
        Ok(Self {
            entries: Vec::new(),
            capacity_bytes,
            stored_bytes: 0,
            peak_bytes: 0,
            class_histogram: BTreeMap::new(),
            clock: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity_bytes(&self) -> usize {
        self.capacity_bytes
    }

    pub fn stored_bytes(&self) -> usize {
        self.stored_bytes
    }

    pub fn peak_bytes(&self) -> usize {
        self.peak_bytes
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    pub fn entry(&self, index: usize) -> Result<&BufferEntry> {
        self.entries
            .get(index)
            .ok_or_else(|| Error::Usage(format!("buffer index {index} out of range")))
    }

    pub fn label_of(&self, index: usize) -> Result<u32> {
        Ok(self.entry(index)?.enc.label)
    }

    /// Class with the highest count; lowest id wins ties. None when empty.
    pub fn argmax_class(&self) -> Option<u32> {
        self.class_histogram
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(c, _)| *c)
    }

    /// Insert one encoded sample, evicting per the class rule if the budget
    /// is exceeded. Returns the evicted entries (normally zero or one).
    pub fn insert(&mut self, enc: EncodedTensor, rng: &mut ChaCha8Rng) -> Result<Vec<BufferEntry>> {
        let bytes = enc.stored_bytes();
        if bytes > self.capacity_bytes {
            return Err(Error::Config(format!(
                "a single entry ({bytes} B) exceeds buffer capacity ({} B)",
                self.capacity_bytes
            )));
        }
        let label = enc.label;
        self.entries.push(BufferEntry { enc, rehearsal_count: 0, insert_time: self.clock });
        self.clock += 1;
        self.stored_bytes += bytes;
        self.peak_bytes = self.peak_bytes.max(self.stored_bytes);
        *self.class_histogram.entry(label).or_insert(0) += 1;

        let mut evicted = Vec::new();
        // One eviction per insert with uniform entry sizes; the loop only
        // matters if entry sizes ever differ.
        while self.stored_bytes > self.capacity_bytes {
            let target_class = self.argmax_class().expect("non-empty when over budget");
            let candidates: Vec<usize> = self
                .entries
                .iter()
                .enumerate()
                .filter(|(_, e)| e.enc.label == target_class)
                .map(|(i, _)| i)
                .collect();
            let victim = candidates[rng.random_range(0..candidates.len())];
            let entry = self.entries.swap_remove(victim);
            self.stored_bytes -= entry.enc.stored_bytes();
            let count = self.class_histogram.get_mut(&target_class).expect("class present");
            *count -= 1;
            if *count == 0 {
                self.class_histogram.remove(&target_class);
            }
            evicted.push(entry);
        }
        Ok(evicted)
    }

    /// Decode the entries at `indices`, bumping each touched entry's
    /// rehearsal counter (once per occurrence).
    pub fn reconstruct_batch(
        &mut self,
        indices: &[usize],
        codec: &PqCodec,
    ) -> Result<Vec<(LatentTensor, u32)>> {
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            let entry = self
                .entries
                .get_mut(i)
                .ok_or_else(|| Error::Usage(format!("buffer index {i} out of range")))?;
            entry.rehearsal_count += 1;
            let label = entry.enc.label;
            let tensor = codec.decode(&entry.enc)?;
            out.push((tensor, label));
        }
        Ok(out)
    }

    /// Decode without touching rehearsal counters (scoring, base init).
    pub fn decode_entry(&self, index: usize, codec: &PqCodec) -> Result<(LatentTensor, u32)> {
        let entry = self.entry(index)?;
        Ok((codec.decode(&entry.enc)?, entry.enc.label))
    }

    pub fn snapshot_stats(&self) -> BufferStats {
        BufferStats {
            class_histogram: self.class_histogram.clone(),
            total_bytes: self.stored_bytes,
            entry_count: self.entries.len(),
            peak_bytes: self.peak_bytes,
        }
    }

    /// One JSON object per entry: class, base64 codes, rehearsal count.
    pub fn dump_jsonl(&self) -> String {
        let b64 = base64::engine::general_purpose::STANDARD;
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{{\"class\":{},\"codes\":\"{}\",\"rehearsal_count\":{}}}\n",
                e.enc.label,
                b64.encode(&e.enc.codes),
                e.rehearsal_count
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn enc(label: u32, payload: u8) -> EncodedTensor {
        // 2x2 tensor, 4 codebooks -> 16 code bytes + 4 label bytes = 20 B.
        EncodedTensor { codes: vec![payload; 16], rows: 2, cols: 2, n_codebooks: 4, label }
    }

    #[test]
    fn below_capacity_no_eviction() {
        let mut buf = ReplayBuffer::new(100).unwrap();
        let mut rng = seeded(0);
        assert!(buf.insert(enc(3, 0), &mut rng).unwrap().is_empty());
        let stats = buf.snapshot_stats();
        assert_eq!(stats.entry_count, 1);
        assert_eq!(stats.class_histogram[&3], 1);
        assert_eq!(stats.total_bytes, 20);
    }

    #[test]
    fn eviction_comes_from_most_populated_class() {
        // Capacity for exactly 3 entries; counts {A:2, B:1}, insert B.
        let mut buf = ReplayBuffer::new(60).unwrap();
        let mut rng = seeded(1);
        buf.insert(enc(0, 1), &mut rng).unwrap();
        buf.insert(enc(0, 2), &mut rng).unwrap();
        buf.insert(enc(1, 3), &mut rng).unwrap();
        let evicted = buf.insert(enc(1, 4), &mut rng).unwrap();
        assert_eq!(evicted.len(), 1);
        assert_eq!(evicted[0].enc.label, 0);
        let hist = buf.snapshot_stats().class_histogram;
        assert_eq!(hist[&0], 1);
        assert_eq!(hist[&1], 2);
    }

    #[test]
    fn tie_breaks_toward_lowest_class_id() {
        let mut buf = ReplayBuffer::new(40).unwrap();
        let mut rng = seeded(2);
        buf.insert(enc(5, 0), &mut rng).unwrap();
        buf.insert(enc(2, 0), &mut rng).unwrap();
        // counts {2:1, 5:1}; inserting class 7 makes all three tied at 1.
        let evicted = buf.insert(enc(7, 0), &mut rng).unwrap();
        assert_eq!(evicted[0].enc.label, 2);
    }

    #[test]
    fn oversized_entry_is_config_error() {
        let mut buf = ReplayBuffer::new(10).unwrap();
        let mut rng = seeded(3);
        assert!(matches!(buf.insert(enc(0, 0), &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn rehearsal_counters_track_touches() {
        let mut buf = ReplayBuffer::new(1000).unwrap();
        let mut rng = seeded(4);
        let codec = one_dim_codec();
        for k in 0..3 {
            buf.insert(codec.encode(&LatentTensor::zeros(2, 2, 4), k).unwrap(), &mut rng)
                .unwrap();
        }
        buf.reconstruct_batch(&[0, 2, 2], &codec).unwrap();
        assert_eq!(buf.entry(0).unwrap().rehearsal_count, 1);
        assert_eq!(buf.entry(1).unwrap().rehearsal_count, 0);
        assert_eq!(buf.entry(2).unwrap().rehearsal_count, 2);
        assert!(buf.reconstruct_batch(&[9], &codec).is_err());
    }

    fn one_dim_codec() -> PqCodec {
        let cb = ndarray::Array2::from_shape_vec((2, 1), vec![0.0, 1.0]).unwrap();
        PqCodec::from_codebooks(vec![cb.clone(), cb.clone(), cb.clone(), cb], None).unwrap()
    }

    #[test]
    fn reconstruct_then_reencode_is_identical() {
        let codec = one_dim_codec();
        let mut buf = ReplayBuffer::new(1000).unwrap();
        let mut rng = seeded(5);
        let t = LatentTensor::new(ndarray::Array3::from_shape_fn((2, 2, 4), |(i, j, k)| {
            ((i + j + k) % 2) as f64
        }))
        .unwrap();
        let original = codec.encode(&t, 7).unwrap();
        buf.insert(original.clone(), &mut rng).unwrap();
        let batch = buf.reconstruct_batch(&[0], &codec).unwrap();
        let re = codec.encode(&batch[0].0, 7).unwrap();
        assert_eq!(re, original);
    }

    #[test]
    fn empty_buffer_stats_are_zero() {
        let buf = ReplayBuffer::new(50).unwrap();
        let stats = buf.snapshot_stats();
        assert_eq!(stats.entry_count, 0);
        assert_eq!(stats.total_bytes, 0);
        assert!(stats.class_histogram.is_empty());
    }

    #[test]
    fn byte_accounting_is_exact() {
        let mut buf = ReplayBuffer::new(10_000).unwrap();
        let mut rng = seeded(6);
        for i in 0..7 {
            buf.insert(enc(i % 2, 0), &mut rng).unwrap();
        }
        // r*s*n_codebooks + 4 label bytes, times k entries.
        assert_eq!(buf.snapshot_stats().total_bytes, 7 * (2 * 2 * 4 + 4));
    }

    #[test]
    fn balanced_iid_stream_stays_balanced_once_full() {
        let mut buf = ReplayBuffer::new(20 * 31).unwrap(); // 31 entries
        let mut rng = seeded(7);
        let mut stream_rng = seeded(8);
        for _ in 0..3000 {
            let class = stream_rng.random_range(0..4u32);
            buf.insert(enc(class, 0), &mut rng).unwrap();
            assert!(buf.stored_bytes() <= buf.capacity_bytes());
        }
        let hist = buf.snapshot_stats().class_histogram;
        let max = hist.values().max().unwrap();
        let min = hist.values().min().unwrap();
        assert!(max - min <= 1, "histogram {hist:?}");
    }

    #[test]
    fn dump_jsonl_shape() {
        let mut buf = ReplayBuffer::new(100).unwrap();
        let mut rng = seeded(9);
        buf.insert(enc(3, 0xAB), &mut rng).unwrap();
        let dump = buf.dump_jsonl();
        let line: serde_json::Value = serde_json::from_str(dump.lines().next().unwrap()).unwrap();
        assert_eq!(line["class"], 3);
        assert_eq!(line["rehearsal_count"], 0);
        let codes = base64::engine::general_purpose::STANDARD
            .decode(line["codes"].as_str().unwrap())
            .unwrap();
        assert_eq!(codes, vec![0xAB; 16]);
    }
}
