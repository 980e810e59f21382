use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Topology of a U-net. Level 1 is full resolution; level `l` works at
/// `1/2^(l−1)` scale. `decoder_channels[l−1]` is the width of decoder level `l`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub encoder_channels: Vec<usize>,
    pub decoder_channels: Vec<usize>,
    #[serde(default = "one")]
    pub in_channels: usize,
    pub num_classes: usize,
    /// Decoder levels (≥ 2) with an extra segmentation head.
    #[serde(default)]
    pub aux_head_levels: Vec<usize>,
    /// Concatenate stage-1 guidance at the start of every decoder level.
    #[serde(default)]
    pub postconcat: bool,
}

fn one() -> usize {
    1
}

/// The network variants built from one [`UNetConfig`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetworkKind {
    Standard,
    MeUnet,
    PostConcat,
}

impl UNetConfig {
    /// Widths used for full-size volumes: encoder (16,32,64,128,128), decoder (16,16,32,64).
    pub fn full_scale(num_classes: usize) -> Self {
        UNetConfig {
            encoder_channels: vec![16, 32, 64, 128, 128],
            decoder_channels: vec![16, 16, 32, 64],
            in_channels: 1,
            num_classes,
            aux_head_levels: Vec::new(),
            postconcat: false,
        }
    }

    /// Four levels, encoder (8,16,32,64), decoder (8,8,16).
    pub fn desk(num_classes: usize) -> Self {
        UNetConfig {
            encoder_channels: vec![8, 16, 32, 64],
            decoder_channels: vec![8, 8, 16],
            in_channels: 1,
            num_classes,
            aux_head_levels: Vec::new(),
            postconcat: false,
        }
    }

    /// Adapts the topology to a network kind: meU-net gets a head at
    /// decoder level 2, post-concatenation switches guidance inputs on.
    pub fn for_kind(mut self, kind: NetworkKind) -> Self {
        match kind {
            NetworkKind::Standard => {
                self.aux_head_levels.clear();
                self.postconcat = false;
            }
            NetworkKind::MeUnet => {
                self.aux_head_levels = vec![2];
                self.postconcat = false;
            }
            NetworkKind::PostConcat => {
                self.aux_head_levels.clear();
                self.postconcat = true;
            }
        }
        self
    }

    pub fn kind(&self) -> NetworkKind {
        if self.postconcat {
            NetworkKind::PostConcat
        } else if self.aux_head_levels.contains(&2) {
            NetworkKind::MeUnet
        } else {
            NetworkKind::Standard
        }
    }

    pub fn levels(&self) -> usize {
        self.encoder_channels.len()
    }

    /// Spatial extents must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << (self.levels() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.encoder_channels.len();
        if l < 2 {
            return Err(Error::Config(format!("a U-net needs at least 2 levels, got {l}")));
        }
        if self.decoder_channels.len() != l - 1 {
            return Err(Error::Config(format!(
                "{} decoder widths for {l} levels (need {})",
                self.decoder_channels.len(),
                l - 1
            )));
        }
        if self.in_channels == 0
            || self.encoder_channels.iter().chain(&self.decoder_channels).any(|&c| c == 0)
        {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if let Some(&bad) = self.aux_head_levels.iter().find(|&&a| a < 2 || a >= l) {
            return Err(Error::Config(format!(
                "aux head level {bad} outside decoder levels 2..={}",
                l - 1
            )));
        }
        Ok(())
    }

    /// Checks that a patch extent survives every pooling step.
    pub fn check_extent(&self, extent: usize) -> Result<()> {
        if extent == 0 {
            return Err(Error::Config("patch extent must be positive".into()));
        }
        let mut at_level = extent;
        for level in 1..self.levels() {
            if at_level % 2 != 0 {
                return Err(Error::Divisibility {
                    level,
                    extent,
                    divisor: self.divisor(),
                });
            }
            at_level /= 2;
        }
        Ok(())
    }

    /// Input channels of decoder level `level`'s first convolution.
    pub fn decoder_input_channels(&self, level: usize) -> usize {
        let l = self.levels();
        let from_below = if level == l - 1 {
            self.encoder_channels[l - 1]
        } else {
            self.decoder_channels[level]
        };
        from_below + self.encoder_channels[level - 1] + if self.postconcat { self.num_classes } else { 0 }
    }

    /// Closed-form trainable parameter count.
    pub fn parameter_count(&self) -> usize {
        let conv = |cin: usize, cout: usize| 27 * cin * cout + cout;
        let block = |cin: usize, cout: usize| conv(cin, cout) + 2 * cout;
        let mut total = 0;
        let mut cin = self.in_channels;
        for &c in &self.encoder_channels {
            total += block(cin, c) + block(c, c);
            cin = c;
        }
        for level in 1..self.levels() {
            let c = self.decoder_channels[level - 1];
            total += block(self.decoder_input_channels(level), c) + block(c, c);
        }
        total += conv(self.decoder_channels[0], self.num_classes);
        for &a in &self.aux_head_levels {
            total += conv(self.decoder_channels[a - 1], self.num_classes);
        }
        total
    }
}
