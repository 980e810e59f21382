//! Analytic model of training memory: retained activations, their
//! gradient maps, parameters and Adam moments, per pass and level.
//!
//! Tensors per encoder level: two blocks of (conv output, batchnorm saved
//! input, batchnorm output, ReLU output), plus the pool output below the
//! bottom level. Decoder levels add the upsampled tensor and the
//! concatenation, and heads add `K`-channel logits. Under checkpointing a
//! level keeps only its boundary tensors (the skip when its decoder runs,
//! the pool output, the decoder output and logits), and the largest
//! gradient-carrying level is counted once more for recompute.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::unet::{NetworkKind, UNetConfig};

/// Bytes of parameters, gradients and the two Adam moments, per element.
const STATE_BYTES_PER_PARAM: u64 = 4 * 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerConfig {
    pub network: UNetConfig,
    pub patch: usize,
    /// Expanded edge for the dual-patch pass.
    #[serde(default)]
    pub expanded: Option<usize>,
    #[serde(default = "one")]
    pub batch: usize,
    /// Half-precision activations.
    #[serde(default)]
    pub mixed_precision: bool,
    /// No gradients for level 1 of the expanded pass.
    #[serde(default = "yes")]
    pub gate_level1: bool,
    #[serde(default = "yes")]
    pub checkpointing: bool,
    /// Expanded-pass decoder stops at level 2.
    #[serde(default = "yes")]
    pub truncate_expanded: bool,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl LedgerConfig {
    pub fn unet(network: UNetConfig, patch: usize) -> Self {
        LedgerConfig {
            network: network.for_kind(NetworkKind::Standard),
            patch,
            expanded: None,
            batch: 1,
            mixed_precision: false,
            gate_level1: true,
            checkpointing: true,
            truncate_expanded: true,
        }
    }

    pub fn meunet(network: UNetConfig, patch: usize, expanded: usize) -> Self {
        LedgerConfig {
            network: network.clone().for_kind(NetworkKind::MeUnet),
            expanded: Some(expanded),
            ..Self::unet(network, patch)
        }
    }

    pub fn with_batch(mut self, batch: usize) -> Self {
        self.batch = batch;
        self
    }

    pub fn with_checkpointing(mut self, on: bool) -> Self {
        self.checkpointing = on;
        self
    }

    /// Bytes per activation element.
    pub fn element_bytes(&self) -> u64 {
        if self.mixed_precision {
            2
        } else {
            4
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.network.check_extent(self.patch)?;
        if let Some(e) = self.expanded {
            self.network.check_extent(e)?;
            if e < self.patch {
                return Err(Error::Config(format!("expanded edge {e} smaller than patch {}", self.patch)));
            }
            if !self.network.aux_head_levels.contains(&2) {
                return Err(Error::Config("an expanded pass needs a head at decoder level 2".into()));
            }
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        Ok(())
    }
}

/// One modeled tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RetainedTensor {
    pub numel: u64,
    pub grad: bool,
}

impl RetainedTensor {
    pub fn act_bytes(&self, b: u64) -> u64 {
        self.numel * b
    }

    pub fn grad_bytes(&self, b: u64) -> u64 {
        if self.grad {
            self.numel * b
        } else {
            0
        }
    }
}

#[derive(Clone, Debug)]
struct Segment {
    level: usize,
    tensors: Vec<RetainedTensor>,
    /// Kept under checkpointing.
    boundary: Vec<RetainedTensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelRow {
    pub pass: String,
    pub level: usize,
    pub act_bytes: u64,
    pub grad_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub rows: Vec<LevelRow>,
    pub activation_bytes: u64,
    pub gradient_bytes: u64,
    /// Parameters, their gradients and both Adam moments.
    pub state_bytes: u64,
    pub grand_total: u64,
}

impl MemoryReport {
    pub fn row(&self, pass: &str, level: usize) -> Option<&LevelRow> {
        self.rows.iter().find(|r| r.pass == pass && r.level == level)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<10} {:>5} {:>16} {:>16}\n", "pass", "level", "act_bytes", "grad_bytes");
        for r in &self.rows {
            let _ = writeln!(s, "{:<10} {:>5} {:>16} {:>16}", r.pass, r.level, r.act_bytes, r.grad_bytes);
        }
        let _ = writeln!(s, "{:<10} {:>5} {:>16} {:>16}", "total", "", self.activation_bytes, self.gradient_bytes);
        let _ = writeln!(s, "state bytes  {}", self.state_bytes);
        let _ = writeln!(s, "grand total  {}", self.grand_total);
        s
    }
}

/// Tensors of one forward pass, grouped by encoder and decoder level.
fn pass_segments(cfg: &LedgerConfig, edge: usize, gated: bool, truncated: bool, heads: &[usize]) -> Vec<Segment> {
    let net = &cfg.network;
    let l_max = net.levels();
    let n = cfg.batch as u64;
    let vox = |l: usize| n * ((edge >> (l - 1)) as u64).pow(3);
    let k = net.num_classes as u64;
    let stop = if truncated { 2 } else { 1 };
    let mut segs = Vec::new();
    for l in 1..=l_max {
        let c = net.encoder_channels[l - 1] as u64;
        let g = !(gated && l == 1);
        let block = RetainedTensor { numel: vox(l) * c, grad: g };
        let mut tensors = vec![block; 8];
        let mut boundary = Vec::new();
        if l < l_max && l >= stop {
            boundary.push(block);
        }
        if l < l_max {
            let pool = RetainedTensor {
                numel: vox(l + 1) * c,
                grad: g,
            };
            tensors.push(pool);
            boundary.push(pool);
        } else {
            boundary.push(block);
        }
        segs.push(Segment { level: l, tensors, boundary });
    }
    for l in (stop..l_max).rev() {
        let below = if l == l_max - 1 {
            net.encoder_channels[l_max - 1]
        } else {
            net.decoder_channels[l]
        } as u64;
        let skip = net.encoder_channels[l - 1] as u64;
        let guide = if net.postconcat { k } else { 0 };
        let t = |numel| RetainedTensor { numel, grad: true };
        let mut tensors = vec![t(vox(l) * below)];
        if guide > 0 {
            tensors.push(RetainedTensor {
                numel: vox(l) * guide,
                grad: false,
            });
        }
        tensors.push(t(vox(l) * (below + skip + guide)));
        let out = t(vox(l) * net.decoder_channels[l - 1] as u64);
        tensors.extend([out; 8]);
        let mut boundary = vec![out];
        if heads.contains(&l) {
            let head = t(vox(l) * k);
            tensors.push(head);
            boundary.push(head);
        }
        segs.push(Segment { level: l, tensors, boundary });
    }
    segs
}

/// Passes executed per training step.
fn passes(cfg: &LedgerConfig) -> Vec<(&'static str, Vec<Segment>)> {
    let mut out = vec![("standard", pass_segments(cfg, cfg.patch, false, false, &[1]))];
    if let Some(e) = cfg.expanded {
        out.push((
            "expanded",
            pass_segments(cfg, e, cfg.gate_level1, cfg.truncate_expanded, &[2]),
        ));
    }
    out
}

pub fn estimate(cfg: &LedgerConfig) -> Result<MemoryReport> {
    cfg.validate()?;
    let b = cfg.element_bytes();
    let mut rows: BTreeMap<(usize, usize), LevelRow> = BTreeMap::new();
    let mut peak: Option<(u64, u64, usize)> = None;
    for (pi, (pass, segs)) in passes(cfg).into_iter().enumerate() {
        for seg in segs {
            let kept = if cfg.checkpointing { &seg.boundary } else { &seg.tensors };
            let row = rows.entry((pi, seg.level)).or_insert_with(|| LevelRow {
                pass: pass.to_string(),
                level: seg.level,
                act_bytes: 0,
                grad_bytes: 0,
            });
            row.act_bytes += kept.iter().map(|t| t.act_bytes(b)).sum::<u64>();
            row.grad_bytes += kept.iter().map(|t| t.grad_bytes(b)).sum::<u64>();
            if cfg.checkpointing && seg.tensors.iter().any(|t| t.grad) {
                let act: u64 = seg.tensors.iter().map(|t| t.act_bytes(b)).sum();
                let grad: u64 = seg.tensors.iter().map(|t| t.grad_bytes(b)).sum();
                if peak.is_none_or(|(a, g, _)| act + grad > a + g) {
                    peak = Some((act, grad, seg.level));
                }
            }
        }
    }
    let mut rows: Vec<LevelRow> = rows.into_values().collect();
    if let Some((act, grad, level)) = peak {
        rows.push(LevelRow {
            pass: "recompute".into(),
            level,
            act_bytes: act,
            grad_bytes: grad,
        });
    }
    let activation_bytes = rows.iter().map(|r| r.act_bytes).sum();
    let gradient_bytes = rows.iter().map(|r| r.grad_bytes).sum();
    let state_bytes = cfg.network.parameter_count() as u64 * STATE_BYTES_PER_PARAM;
    Ok(MemoryReport {
        rows,
        activation_bytes,
        gradient_bytes,
        state_bytes,
        grand_total: activation_bytes + gradient_bytes + state_bytes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelDelta {
    pub pass: String,
    pub level: usize,
    /// `a − b`, activation plus gradient bytes.
    pub delta_bytes: i128,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub ratio: f64,
    pub deltas: Vec<LevelDelta>,
}

impl Comparison {
    pub fn to_table(&self) -> String {
        let mut s = format!("ratio {:.4}\n{:<10} {:>5} {:>18}\n", self.ratio, "pass", "level", "delta_bytes");
        for d in &self.deltas {
            let _ = writeln!(s, "{:<10} {:>5} {:>18}", d.pass, d.level, d.delta_bytes);
        }
        s
    }
}

pub fn compare(a: &MemoryReport, b: &MemoryReport) -> Result<Comparison> {
    if b.grand_total == 0 {
        return Err(Error::Config("cannot compare against an empty report".into()));
    }
    let bytes = |r: &LevelRow| (r.act_bytes + r.grad_bytes) as i128;
    let mut keys: Vec<(String, usize)> = a.rows.iter().chain(&b.rows).map(|r| (r.pass.clone(), r.level)).collect();
    keys.sort();
    keys.dedup();
    let deltas = keys
        .into_iter()
        .map(|(pass, level)| {
            let va = a.row(&pass, level).map_or(0, bytes);
            let vb = b.row(&pass, level).map_or(0, bytes);
            LevelDelta {
                pass,
                level,
                delta_bytes: va - vb,
            }
        })
        .collect();
    Ok(Comparison {
        ratio: a.grand_total as f64 / b.grand_total as f64,
        deltas,
    })
}
