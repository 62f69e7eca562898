//! Cluster topology, sequences and batches, plus the JSONL batch format.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::mask::{MaskDescriptor, MaskError};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid topology: {0}")]
    Topology(String),
    #[error("sequence {seq_id}: {source}")]
    Mask {
        seq_id: String,
        #[source]
        source: MaskError,
    },
    #[error("sequence {0} has zero length")]
    EmptySequence(String),
    #[error("batch holds {total} tokens, budget is {budget}")]
    OverBudget { total: usize, budget: usize },
    #[error("{heads} heads cannot be split into {kv_groups} kv groups")]
    Heads { heads: usize, kv_groups: usize },
    #[error("invalid batch: {0}")]
    Batch(String),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `machines` x `devices_per_machine` devices with a two-tier network.
///
/// Bandwidths are bytes per second in one direction, latencies in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceTopology {
    pub machines: usize,
    pub devices_per_machine: usize,
    pub intra_bw: f64,
    pub inter_bw: f64,
    pub latency_intra: f64,
    pub latency_inter: f64,
    /// Sustained attention throughput of one device, FLOP/s.
    pub device_flops: f64,
}

impl DeviceTopology {
    /// NVSwitch at 600 GB/s bidirectional inside a machine.
    pub const DEFAULT_INTRA_BW: f64 = 300e9;
    /// 4x100 Gbps NICs per machine.
    pub const DEFAULT_INTER_BW: f64 = 50e9;
    pub const DEFAULT_LATENCY_INTRA: f64 = 5e-6;
    pub const DEFAULT_LATENCY_INTER: f64 = 20e-6;
    pub const DEFAULT_DEVICE_FLOPS: f64 = 150e12;

    pub fn new(machines: usize, devices_per_machine: usize) -> Result<Self, ModelError> {
        let topo = DeviceTopology {
            machines,
            devices_per_machine,
            intra_bw: Self::DEFAULT_INTRA_BW,
            inter_bw: Self::DEFAULT_INTER_BW,
            latency_intra: Self::DEFAULT_LATENCY_INTRA,
            latency_inter: Self::DEFAULT_LATENCY_INTER,
            device_flops: Self::DEFAULT_DEVICE_FLOPS,
        };
        topo.validate()?;
        Ok(topo)
    }

    /// A single machine with `devices` devices.
    pub fn flat(devices: usize) -> Result<Self, ModelError> {
        Self::new(1, devices)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.machines == 0 || self.devices_per_machine == 0 {
            return Err(ModelError::Topology(
                "machines and devices_per_machine must be at least 1".into(),
            ));
        }
        let positive = [self.intra_bw, self.inter_bw, self.device_flops];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(ModelError::Topology(
                "bandwidths and throughput must be positive".into(),
            ));
        }
        if !(self.latency_intra >= 0.0 && self.latency_inter >= 0.0) {
            return Err(ModelError::Topology(
                "latencies must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn num_devices(&self) -> usize {
        self.machines * self.devices_per_machine
    }

    pub fn machine_of(&self, device: usize) -> usize {
        device / self.devices_per_machine
    }

    pub fn same_machine(&self, a: usize, b: usize) -> bool {
        self.machine_of(a) == self.machine_of(b)
    }

    /// `(latency, bandwidth)` of the link from `src` to `dst`.
    pub fn link(&self, src: usize, dst: usize) -> (f64, f64) {
        if self.same_machine(src, dst) {
            (self.latency_intra, self.intra_bw)
        } else {
            (self.latency_inter, self.inter_bw)
        }
    }

    /// Time to move one message of `bytes` from `src` to `dst`.
    pub fn message_time(&self, src: usize, dst: usize, bytes: u64) -> f64 {
        let (lat, bw) = self.link(src, dst);
        lat + bytes as f64 / bw
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub seq_id: String,
    pub length: usize,
    pub mask: MaskDescriptor,
}

impl SequenceSpec {
    pub fn new(seq_id: impl Into<String>, length: usize, mask: MaskDescriptor) -> Self {
        SequenceSpec {
            seq_id: seq_id.into(),
            length,
            mask,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.length == 0 {
            return Err(ModelError::EmptySequence(self.seq_id.clone()));
        }
        self.mask
            .validate(self.length)
            .map_err(|source| ModelError::Mask {
                seq_id: self.seq_id.clone(),
                source,
            })
    }
}

/// Attention shape shared by every sequence of a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionShape {
    pub heads: usize,
    pub kv_groups: usize,
    pub head_dim: usize,
    #[serde(default = "default_bytes_per_element")]
    pub bytes_per_element: usize,
}

fn default_bytes_per_element() -> usize {
    2
}

impl AttentionShape {
    /// Eight query heads in two KV groups with head dimension 128.
    pub const GQA_DEFAULT: AttentionShape = AttentionShape {
        heads: 8,
        kv_groups: 2,
        head_dim: 128,
        bytes_per_element: 2,
    };

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.heads == 0 || self.kv_groups == 0 || !self.heads.is_multiple_of(self.kv_groups) {
            return Err(ModelError::Heads {
                heads: self.heads,
                kv_groups: self.kv_groups,
            });
        }
        if self.head_dim == 0 || self.bytes_per_element == 0 {
            return Err(ModelError::Batch(
                "head_dim and bytes_per_element must be positive".into(),
            ));
        }
        Ok(())
    }

    /// KV group serving query head `head`.
    pub fn kv_group_of(&self, head: usize) -> usize {
        head * self.kv_groups / self.heads
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub sequences: Vec<SequenceSpec>,
    pub token_budget: usize,
    pub shape: AttentionShape,
}

impl Batch {
    pub fn new(
        sequences: Vec<SequenceSpec>,
        token_budget: usize,
        shape: AttentionShape,
    ) -> Result<Self, ModelError> {
        let batch = Batch {
            sequences,
            token_budget,
            shape,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.shape.validate()?;
        for s in &self.sequences {
            s.validate()?;
        }
        let total = self.total_tokens();
        if total > self.token_budget {
            return Err(ModelError::OverBudget {
                total,
                budget: self.token_budget,
            });
        }
        Ok(())
    }

    pub fn total_tokens(&self) -> usize {
        self.sequences.iter().map(|s| s.length).sum()
    }
}

/// Header line of a batch JSONL file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchHeader {
    pub heads: usize,
    pub kv_groups: usize,
    pub head_dim: usize,
    pub token_budget: usize,
    #[serde(default = "default_bytes_per_element")]
    pub bytes_per_element: usize,
}

impl BatchHeader {
    pub fn shape(&self) -> AttentionShape {
        AttentionShape {
            heads: self.heads,
            kv_groups: self.kv_groups,
            head_dim: self.head_dim,
            bytes_per_element: self.bytes_per_element,
        }
    }
}

/// A header plus a stream of sequences, not yet cut into batches.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceStream {
    pub header: BatchHeader,
    pub sequences: Vec<SequenceSpec>,
}

impl SequenceStream {
    /// Parse `header\nseq\nseq...`; blank lines are skipped.
    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self, ModelError> {
        let mut header: Option<BatchHeader> = None;
        let mut sequences = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let json = |source| ModelError::Json {
                line: n + 1,
                source,
            };
            match header {
                None => header = Some(serde_json::from_str(&line).map_err(json)?),
                Some(_) => {
                    let seq: SequenceSpec = serde_json::from_str(&line).map_err(json)?;
                    seq.validate()?;
                    sequences.push(seq);
                }
            }
        }
        let header = header.ok_or_else(|| ModelError::Batch("missing header line".into()))?;
        header.shape().validate()?;
        Ok(SequenceStream { header, sequences })
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), ModelError> {
        let to_io = |e: serde_json::Error| ModelError::Io(e.into());
        writeln!(w, "{}", serde_json::to_string(&self.header).map_err(to_io)?)?;
        for s in &self.sequences {
            writeln!(w, "{}", serde_json::to_string(s).map_err(to_io)?)?;
        }
        Ok(())
    }

    /// Treat the whole stream as a single batch.
    pub fn into_batch(self) -> Result<Batch, ModelError> {
        Batch::new(
            self.sequences,
            self.header.token_budget,
            self.header.shape(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topology_basics() {
        let t = DeviceTopology::new(2, 4).unwrap();
        assert_eq!(t.num_devices(), 8);
        assert_eq!(t.machine_of(5), 1);
        assert!(t.same_machine(4, 7));
        assert!(!t.same_machine(3, 4));
        assert!(DeviceTopology::new(0, 4).is_err());
    }

    #[test]
    fn gqa_group_mapping() {
        let s = AttentionShape::GQA_DEFAULT;
        let groups: Vec<_> = (0..8).map(|h| s.kv_group_of(h)).collect();
        assert_eq!(groups, vec![0, 0, 0, 0, 1, 1, 1, 1]);
        let bad = AttentionShape {
            heads: 6,
            kv_groups: 4,
            ..s
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn budget_enforced() {
        let seqs = vec![
            SequenceSpec::new("a", 6, MaskDescriptor::Causal),
            SequenceSpec::new("b", 6, MaskDescriptor::Causal),
        ];
        let err = Batch::new(seqs, 10, AttentionShape::GQA_DEFAULT).unwrap_err();
        assert!(matches!(
            err,
            ModelError::OverBudget {
                total: 12,
                budget: 10
            }
        ));
    }

    #[test]
    fn jsonl_parses_header_and_masks() {
        let text = r#"{"heads": 2, "kv_groups": 1, "head_dim": 4, "token_budget": 100}
{"seq_id": "s0", "length": 10, "mask": {"kind": "causal"}}

{"seq_id": "s1", "length": 8, "mask": {"kind": "lambda", "sink_tokens": 2, "window": 3}}
{"seq_id": "s2", "length": 6, "mask": {"kind": "shared_question", "question_len": 2, "answer_lens": [2, 2]}}
"#;
        let stream = SequenceStream::read_jsonl(text.as_bytes()).unwrap();
        assert_eq!(stream.header.bytes_per_element, 2);
        assert_eq!(stream.sequences.len(), 3);
        let mut out = Vec::new();
        stream.write_jsonl(&mut out).unwrap();
        let again = SequenceStream::read_jsonl(out.as_slice()).unwrap();
        assert_eq!(again, stream);
        let batch = again.into_batch().unwrap();
        assert_eq!(batch.total_tokens(), 24);
    }

    #[test]
    fn jsonl_reports_line_of_bad_sequence() {
        let text =
            "{\"heads\":1,\"kv_groups\":1,\"head_dim\":4,\"token_budget\":9}\n{\"seq_id\":\"x\"}\n";
        match SequenceStream::read_jsonl(text.as_bytes()) {
            Err(ModelError::Json { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
