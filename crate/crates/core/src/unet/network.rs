use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GuidancePyramid, UNetConfig};
use crate::error::{Error, Result};
use crate::nn::{
    batchnorm3d, conv3d, maxpool3d, relu, upsample_nearest3d, BatchNormState, Mode, RunningStats,
};
use crate::tensor::{no_grad, Element, Parameter, ParameterSet, Tensor};

#[derive(Clone, Copy, Debug)]
struct Conv {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
struct Block {
    conv: Conv,
    scale: usize,
    shift: usize,
    norm: usize,
}

/// Logits of the dual-patch forward.
#[derive(Clone, Debug)]
pub struct DualLogits<T: Element> {
    /// Level-1 logits of the standard patch, `[N, K, P, P, P]`.
    pub standard: Tensor<T>,
    /// Level-2 logits of the expanded patch, `[N, K, E/2, E/2, E/2]`.
    pub expanded: Tensor<T>,
}

/// Parameter values and running statistics, detached from any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkState<T: Element> {
    pub params: Vec<Vec<T>>,
    pub running: Vec<RunningStats>,
}

/// A built U-net: parameters plus wiring.
#[derive(Clone, Debug)]
pub struct Network<T: Element = f32> {
    config: UNetConfig,
    params: ParameterSet<T>,
    norms: Vec<BatchNormState>,
    encoder: Vec<[Block; 2]>,
    decoder: Vec<[Block; 2]>,
    heads: BTreeMap<usize, Conv>,
}

/// Level a parameter belongs to, parsed from its `*.l<level>.*` name.
pub fn parameter_level(name: &str) -> Option<usize> {
    name.split('.').nth(1)?.strip_prefix('l')?.parse().ok()
}

struct Builder<'a, T: Element> {
    params: ParameterSet<T>,
    norms: Vec<BatchNormState>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Element> Builder<'_, T> {
    fn conv(&mut self, prefix: &str, cin: usize, cout: usize) -> Result<Conv> {
        // He-uniform over fan-in
        let fan_in = (cin * 27) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let w: Vec<T> = (0..cout * cin * 27)
            .map(|_| T::from_f64(self.rng.random_range(-bound..bound)))
            .collect();
        let weight = self
            .params
            .push(Parameter::new(format!("{prefix}.weight"), vec![cout, cin, 3, 3, 3], w)?)?;
        let bias = self
            .params
            .push(Parameter::new(format!("{prefix}.bias"), vec![cout], vec![T::zero(); cout])?)?;
        Ok(Conv { weight, bias })
    }

    fn block(&mut self, prefix: &str, i: usize, cin: usize, cout: usize) -> Result<Block> {
        let conv = self.conv(&format!("{prefix}.conv{i}"), cin, cout)?;
        let bn = format!("{prefix}.bn{i}");
        let scale = self
            .params
            .push(Parameter::new(format!("{bn}.scale"), vec![cout], vec![T::one(); cout])?)?;
        let shift = self
            .params
            .push(Parameter::new(format!("{bn}.shift"), vec![cout], vec![T::zero(); cout])?)?;
        self.norms.push(BatchNormState::new(bn, cout));
        Ok(Block {
            conv,
            scale,
            shift,
            norm: self.norms.len() - 1,
        })
    }

    fn level(&mut self, prefix: &str, cin: usize, cout: usize) -> Result<[Block; 2]> {
        Ok([self.block(prefix, 0, cin, cout)?, self.block(prefix, 1, cout, cout)?])
    }
}

impl<T: Element> Network<T> {
    /// Builds a network with seeded He-uniform conv weights, zero biases and
    /// identity batchnorm affines.
    pub fn build(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            params: ParameterSet::new(),
            norms: Vec::new(),
            rng: &mut rng,
        };
        let l = config.levels();
        let mut encoder = Vec::with_capacity(l);
        let mut cin = config.in_channels;
        for (i, &c) in config.encoder_channels.iter().enumerate() {
            encoder.push(b.level(&format!("enc.l{}", i + 1), cin, c)?);
            cin = c;
        }
        // decoder[level - 1] for level in 1..L
        let mut decoder = Vec::with_capacity(l - 1);
        for level in (1..l).rev() {
            let c = config.decoder_channels[level - 1];
            decoder.push(b.level(&format!("dec.l{level}"), config.decoder_input_channels(level), c)?);
        }
        decoder.reverse();
        let mut heads = BTreeMap::new();
        let mut head_levels = vec![1];
        head_levels.extend(config.aux_head_levels.iter().copied());
        head_levels.sort_unstable();
        head_levels.dedup();
        for level in head_levels {
            let conv = b.conv(
                &format!("head.l{level}"),
                config.decoder_channels[level - 1],
                config.num_classes,
            )?;
            heads.insert(level, conv);
        }
        Ok(Network {
            config,
            params: b.params,
            norms: b.norms,
            encoder,
            decoder,
            heads,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet<T> {
        &mut self.params
    }

    pub fn norms(&self) -> &[BatchNormState] {
        &self.norms
    }

    pub fn zero_grads(&self) {
        self.params.zero_grads();
    }

    /// Parameters of resolution level 1 (encoder, decoder and main head).
    pub fn level_one_params(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter().filter(|p| parameter_level(p.name()) == Some(1))
    }

    /// Puts every batchnorm's running statistics at mean 0 / variance 1
    /// and marks them usable in eval mode.
    pub fn init_running_stats(&self) {
        for n in &self.norms {
            let c = n.channels();
            n.set_running(vec![0.0; c], vec![1.0; c]).expect("valid default stats");
        }
    }

    pub fn state(&self) -> NetworkState<T> {
        NetworkState {
            params: self.params.iter().map(|p| p.value().to_vec()).collect(),
            running: self.norms.iter().map(|n| n.running()).collect(),
        }
    }

    pub fn load_state(&mut self, state: &NetworkState<T>) -> Result<()> {
        if state.params.len() != self.params.len() || state.running.len() != self.norms.len() {
            return Err(Error::Data("network state does not match the topology".into()));
        }
        for (p, v) in self.params.iter_mut().zip(&state.params) {
            if v.len() != p.value().numel() {
                return Err(Error::Data(format!("wrong element count for {}", p.name())));
            }
            p.set_data(v.clone())?;
        }
        for (n, r) in self.norms.iter().zip(&state.running) {
            if r.mean.len() != n.channels() || r.var.len() != n.channels() {
                return Err(Error::Data(format!("wrong channel count for {}", n.name)));
            }
            n.restore(r.clone());
        }
        Ok(())
    }

    fn p(&self, slot: usize) -> &Tensor<T> {
        self.params.get(slot).value()
    }

    fn conv(&self, c: Conv, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv3d(x, self.p(c.weight), self.p(c.bias))
    }

    fn block(&self, b: &Block, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.conv(b.conv, x)?;
        let y = batchnorm3d(&y, self.p(b.scale), self.p(b.shift), &self.norms[b.norm], mode)?;
        Ok(relu(&y))
    }

    fn run_level(&self, blocks: &[Block; 2], x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.block(&blocks[0], x, mode)?;
        self.block(&blocks[1], &y, mode)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        match *x.shape() {
            [_, c, d, h, w] if c == self.config.in_channels => {
                for e in [d, h, w] {
                    self.config.check_extent(e)?;
                }
                Ok(())
            }
            _ => Err(Error::InvalidShape {
                op: "unet",
                msg: format!(
                    "expected [N, {}, D, H, W] input, got {:?}",
                    self.config.in_channels,
                    x.shape()
                ),
            }),
        }
    }

    /// Encoder outputs for levels 1..=L. With `gate_first`, level 1 runs
    /// without graph recording.
    fn encode(&self, x: &Tensor<T>, mode: Mode, gate_first: bool) -> Result<Vec<Tensor<T>>> {
        self.check_input(x)?;
        let mut outs = Vec::with_capacity(self.config.levels());
        let first = if gate_first {
            no_grad(|| self.run_level(&self.encoder[0], x, mode))?
        } else {
            self.run_level(&self.encoder[0], x, mode)?
        };
        outs.push(first);
        for blocks in &self.encoder[1..] {
            let pooled = maxpool3d(outs.last().expect("level 1 present"))?;
            outs.push(self.run_level(blocks, &pooled, mode)?);
        }
        Ok(outs)
    }

    /// Decoder outputs for levels `L−1` down to `stop`, keyed by level.
    fn decode(
        &self,
        skips: &[Tensor<T>],
        stop: usize,
        guidance: Option<&GuidancePyramid<T>>,
        mode: Mode,
    ) -> Result<BTreeMap<usize, Tensor<T>>> {
        let l = self.config.levels();
        let mut below = skips[l - 1].clone();
        let mut outs = BTreeMap::new();
        for level in (stop..l).rev() {
            let up = upsample_nearest3d(&below)?;
            let mut parts = vec![up, skips[level - 1].clone()];
            if self.config.postconcat {
                let g = guidance
                    .ok_or_else(|| Error::Config("post-concatenation network needs guidance".into()))?
                    .level(level)?;
                if g.shape()[0] != parts[0].shape()[0] || g.shape()[2..] != parts[0].shape()[2..] {
                    return Err(Error::shape("postconcat guidance", parts[0].shape(), g.shape()));
                }
                parts.push(g.clone());
            }
            let x = Tensor::concat(&parts, 1)?;
            below = self.run_level(&self.decoder[level - 1], &x, mode)?;
            outs.insert(level, below.clone());
        }
        Ok(outs)
    }

    fn head(&self, level: usize, features: &Tensor<T>) -> Result<Tensor<T>> {
        let conv = *self
            .heads
            .get(&level)
            .ok_or_else(|| Error::Config(format!("no segmentation head at level {level}")))?;
        self.conv(conv, features)
    }

    /// Full encoder–decoder pass, level-1 logits.
    pub fn forward_standard(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if self.config.postconcat {
            return Err(Error::Config("post-concatenation network needs guidance; use forward_postconcat".into()));
        }
        let skips = self.encode(x, mode, false)?;
        let dec = self.decode(&skips, 1, None, mode)?;
        self.head(1, &dec[&1])
    }

    /// Logits at level 1 and at every auxiliary head.
    pub fn forward_deep(&self, x: &Tensor<T>, mode: Mode) -> Result<BTreeMap<usize, Tensor<T>>> {
        if self.config.postconcat {
            return Err(Error::Config("post-concatenation network needs guidance".into()));
        }
        let skips = self.encode(x, mode, false)?;
        let dec = self.decode(&skips, 1, None, mode)?;
        self.heads.keys().map(|&l| Ok((l, self.head(l, &dec[&l])?))).collect()
    }

    /// Dual-patch pass. The standard patch runs the whole network with
    /// gradients and is read out at level 1. The expanded patch runs level 1
    /// of the encoder without graph recording, skips decoder level 1 and is
    /// read out at the level-2 head.
    pub fn forward_meunet_dual(&self, standard: &Tensor<T>, expanded: &Tensor<T>, mode: Mode) -> Result<DualLogits<T>> {
        if !self.heads.contains_key(&2) {
            return Err(Error::Config("dual-patch forward needs a head at decoder level 2".into()));
        }
        let (p, e) = (standard.shape().get(2).copied(), expanded.shape().get(2).copied());
        if let (Some(p), Some(e)) = (p, e) {
            if e < p {
                return Err(Error::Config(format!("expanded edge {e} smaller than standard edge {p}")));
            }
        }
        let standard_logits = self.forward_standard(standard, mode)?;
        let skips = self.encode(expanded, mode, true)?;
        let dec = self.decode(&skips, 2, None, mode)?;
        let expanded_logits = self.head(2, &dec[&2])?;
        Ok(DualLogits {
            standard: standard_logits,
            expanded: expanded_logits,
        })
    }

    /// Post-concatenation pass; returns level-1 logits.
    pub fn forward_postconcat(&self, x: &Tensor<T>, guidance: &GuidancePyramid<T>, mode: Mode) -> Result<Tensor<T>> {
        self.forward_postconcat_with_features(x, guidance, mode).map(|(l, _)| l)
    }

    /// Like [`forward_postconcat`](Self::forward_postconcat), also returning
    /// the encoder output of every level.
    pub fn forward_postconcat_with_features(
        &self,
        x: &Tensor<T>,
        guidance: &GuidancePyramid<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        if !self.config.postconcat {
            return Err(Error::Config("network was not built for post-concatenation".into()));
        }
        if guidance.levels() < self.config.levels() - 1 {
            return Err(Error::Config(format!(
                "guidance has {} levels, decoder needs {}",
                guidance.levels(),
                self.config.levels() - 1
            )));
        }
        let skips = self.encode(x, mode, false)?;
        let dec = self.decode(&skips, 1, Some(guidance), mode)?;
        Ok((self.head(1, &dec[&1])?, skips))
    }

    /// Level-1 logits for whichever variant this is; post-concatenation
    /// networks need `guidance`.
    pub fn predict_logits(&self, x: &Tensor<T>, guidance: Option<&GuidancePyramid<T>>, mode: Mode) -> Result<Tensor<T>> {
        match guidance {
            Some(g) if self.config.postconcat => self.forward_postconcat(x, g, mode),
            _ => self.forward_standard(x, mode),
        }
    }
}
