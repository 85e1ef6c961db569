//! Visual tower: a small 3D residual network whose blocks carry channel and
//! temporal squeeze-and-excitation with joint global/local gates.
//!
//! Per-sample feature maps use the convolution layout `[c, f, h, w]`
//! (channels, frames, height, width). Gate matrices for channel SE are
//! indexed `[frame, channel]`; temporal SE gates are `[channel, frame]`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{uniform_fan_in, Bound, ParamId, ParamSet};
use crate::tensor::{Float, Graph, Tensor, Var};

/// Which pooled view produces the SE gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    /// Product of the global and per-slice gates.
    Joint,
    GlobalOnly,
    LocalOnly,
    /// Every gate fixed at one; the block degenerates to a plain residual
    /// block.
    Ones,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeOrder {
    ChannelFirst,
    TemporalFirst,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SEBlockConfig {
    pub reduction: usize,
    pub mode: GateMode,
    pub order: SeOrder,
    pub channel: bool,
    pub temporal: bool,
}

impl Default for SEBlockConfig {
    fn default() -> Self {
        Self {
            reduction: 2,
            mode: GateMode::Joint,
            order: SeOrder::ChannelFirst,
            channel: true,
            temporal: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProSENetConfig {
    /// Volume dimensions `[f, h, w]`.
    pub input: [usize; 3],
    pub stem: usize,
    pub widths: Vec<usize>,
    pub blocks: Vec<usize>,
    pub se: SEBlockConfig,
}

impl Default for ProSENetConfig {
    fn default() -> Self {
        Self {
            input: [8, 96, 96],
            stem: 16,
            widths: vec![16, 32, 64],
            blocks: vec![2, 2, 2],
            se: SEBlockConfig::default(),
        }
    }
}

impl ProSENetConfig {
    pub fn feature_dim(&self) -> usize {
        *self.widths.last().unwrap_or(&self.stem)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input.contains(&0) || self.stem == 0 {
            return Err(Error::Config(format!("invalid visual input {:?}", self.input)));
        }
        if self.widths.is_empty() || self.widths.len() != self.blocks.len() {
            return Err(Error::Config("stage widths and block counts must be nonempty and aligned".into()));
        }
        if self.blocks.contains(&0) || self.widths.contains(&0) {
            return Err(Error::Config("every stage needs at least one block of positive width".into()));
        }
        let r = self.se.reduction;
        if r == 0 {
            return Err(Error::Config("SE reduction ratio must be at least 1".into()));
        }
        if self.se.channel {
            if let Some(w) = self.widths.iter().find(|&&w| w % r != 0) {
                return Err(Error::Config(format!("channel width {w} not divisible by SE ratio {r}")));
            }
        }
        if self.se.temporal && !self.input[0].is_multiple_of(r) {
            return Err(Error::Config(format!(
                "frame count {} not divisible by SE ratio {r}",
                self.input[0]
            )));
        }
        Ok(())
    }
}

/// `p[c]`: mean over frames and both spatial axes.
pub fn channel_squeeze<T: Float>(g: &mut Graph<T>, fm: Var) -> Result<Var> {
    g.mean_over(fm, &[1, 2, 3])
}

/// `sigmoid(W1 · relu(W2 · p))` applied to `p` (`[n]`) or to each row of a
/// `[rows, n]` matrix. `w1`: `[n, n/r]`, `w2`: `[n/r, n]`.
pub fn excitation<T: Float>(g: &mut Graph<T>, p: Var, w1: Var, w2: Var) -> Result<Var> {
    let ps = g.shape(p).to_vec();
    let n = *ps.last().ok_or_else(|| Error::dim("excitation", &ps, g.shape(w2)))?;
    let (s1, s2) = (g.shape(w1).to_vec(), g.shape(w2).to_vec());
    if s2.len() != 2 || s1.len() != 2 || s2[1] != n || s1[0] != n || s1[1] != s2[0] {
        return Err(Error::dim("excitation", &s1, &s2));
    }
    let rows = if ps.len() == 1 { g.reshape(p, &[1, n])? } else { p };
    let w2t = g.transpose(w2)?;
    let hidden = g.matmul(rows, w2t)?;
    let hidden = g.relu(hidden);
    let w1t = g.transpose(w1)?;
    let logits = g.matmul(hidden, w1t)?;
    let gate = g.sigmoid(logits);
    if ps.len() == 1 {
        g.reshape(gate, &[n])
    } else {
        Ok(gate)
    }
}

/// `p_t[f, c]`: spatial mean, frames kept.
pub fn temporal_preserving_pool<T: Float>(g: &mut Graph<T>, fm: Var) -> Result<Var> {
    let cf = g.mean_over(fm, &[2, 3])?;
    g.transpose(cf)
}

/// Per-frame channel gates using the block's shared excitation weights.
pub fn per_frame_gates<T: Float>(g: &mut Graph<T>, pt: Var, w1: Var, w2: Var) -> Result<Var> {
    excitation(g, pt, w1, w2)
}

/// Combine a global gate `[n]` with local gates `[rows, n]`:
/// `G[i, j] = local[i, j] * global[j]` in joint mode.
pub fn joint_gate<T: Float>(g: &mut Graph<T>, global: Var, local: Var, mode: GateMode) -> Result<Var> {
    let ls = g.shape(local).to_vec();
    if ls.len() != 2 || g.shape(global) != [ls[1]] {
        return Err(Error::dim("joint_gate", g.shape(global), &ls));
    }
    match mode {
        GateMode::Joint => g.mul(local, global),
        GateMode::LocalOnly => Ok(local),
        GateMode::GlobalOnly => {
            let ones = g.constant(Tensor::full(ls, T::one()));
            g.mul(ones, global)
        }
        GateMode::Ones => Ok(g.constant(Tensor::full(ls, T::one()))),
    }
}

/// `F_c[j, i, :, :] = F[j, i, :, :] * G[i, j]` for a `[f, c]` gate.
pub fn channel_se_apply<T: Float>(g: &mut Graph<T>, fm: Var, gate: Var) -> Result<Var> {
    let s = g.shape(fm).to_vec();
    if s.len() != 4 || g.shape(gate) != [s[1], s[0]] {
        return Err(Error::dim("channel_se_apply", &s, g.shape(gate)));
    }
    let gt = g.transpose(gate)?;
    let gt = g.reshape(gt, &[s[0], s[1], 1, 1])?;
    g.mul(fm, gt)
}

fn temporal_apply<T: Float>(g: &mut Graph<T>, fm: Var, gate: Var) -> Result<Var> {
    let s = g.shape(fm).to_vec();
    if g.shape(gate) != [s[0], s[1]] {
        return Err(Error::dim("temporal_se_apply", &s, g.shape(gate)));
    }
    let gr = g.reshape(gate, &[s[0], s[1], 1, 1])?;
    g.mul(fm, gr)
}

pub struct SeOutput {
    pub output: Var,
    pub gate: Var,
}

/// Channel SE with global (`p`) and per-frame (`p_t`) descriptors sharing
/// one `(W1, W2)` pair. Gate is `[f, c]`.
pub fn channel_se<T: Float>(g: &mut Graph<T>, fm: Var, w1: Var, w2: Var, mode: GateMode) -> Result<SeOutput> {
    let s = g.shape(fm).to_vec();
    let gate = if mode == GateMode::Ones {
        g.constant(Tensor::full([s[1], s[0]], T::one()))
    } else {
        let p = channel_squeeze(g, fm)?;
        let global = excitation(g, p, w1, w2)?;
        let pt = temporal_preserving_pool(g, fm)?;
        let local = per_frame_gates(g, pt, w1, w2)?;
        joint_gate(g, global, local, mode)?
    };
    let output = channel_se_apply(g, fm, gate)?;
    Ok(SeOutput { output, gate })
}

/// Temporal SE: the frame-axis mirror of [`channel_se`]. Global frame
/// descriptor pools over channels and space; local descriptors keep the
/// channel axis. Gate is `[c, f]`.
pub fn temporal_se<T: Float>(g: &mut Graph<T>, fm: Var, w1: Var, w2: Var, mode: GateMode) -> Result<SeOutput> {
    let s = g.shape(fm).to_vec();
    let f = s[1];
    let r_f = g.shape(w2).first().copied().unwrap_or(0);
    if r_f == 0 || !f.is_multiple_of(r_f) {
        return Err(Error::Config(format!(
            "temporal SE bottleneck {r_f} does not divide frame count {f}"
        )));
    }
    let gate = if mode == GateMode::Ones {
        g.constant(Tensor::full([s[0], f], T::one()))
    } else {
        let p = g.mean_over(fm, &[0, 2, 3])?;
        let global = excitation(g, p, w1, w2)?;
        let local_desc = g.mean_over(fm, &[2, 3])?;
        let local = excitation(g, local_desc, w1, w2)?;
        joint_gate(g, global, local, mode)?
    };
    let output = temporal_apply(g, fm, gate)?;
    Ok(SeOutput { output, gate })
}

/// 3D convolution on a per-sample `[c, f, h, w]` map.
pub fn conv<T: Float>(g: &mut Graph<T>, x: Var, kernel: Var, bias: Var, stride: [usize; 3], padding: [usize; 3]) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let x5 = g.reshape(x, &[1, s[0], s[1], s[2], s[3]])?;
    let y = g.conv3d(x5, kernel, Some(bias), stride, padding)?;
    let ys = g.shape(y).to_vec();
    g.reshape(y, &ys[1..])
}

#[derive(Clone, Debug)]
pub struct ResBlockParams {
    pub conv1: (ParamId, ParamId),
    pub conv2: (ParamId, ParamId),
    pub shortcut: Option<(ParamId, ParamId)>,
    pub channel_se: Option<(ParamId, ParamId)>,
    pub temporal_se: Option<(ParamId, ParamId)>,
    pub stride: [usize; 3],
}

impl ResBlockParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float, R: Rng + ?Sized>(
        prefix: &str,
        c_in: usize,
        c_out: usize,
        frames: usize,
        stride: [usize; 3],
        se: &SEBlockConfig,
        params: &mut ParamSet<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let mut conv_pair = |name: &str, cin: usize, k: usize, gain: f64, params: &mut ParamSet<T>| -> Result<(ParamId, ParamId)> {
            let kernel = params.add(
                format!("{prefix}.{name}.kernel"),
                uniform_fan_in(rng, &[c_out, cin, k, k, k], cin * k * k * k, gain),
                true,
            )?;
            let bias = params.add(format!("{prefix}.{name}.bias"), Tensor::zeros([c_out]), false)?;
            Ok((kernel, bias))
        };
        let conv1 = conv_pair("conv1", c_in, 3, 2f64.sqrt(), params)?;
        let conv2 = conv_pair("conv2", c_out, 3, 0.5, params)?;
        let shortcut = if stride != [1, 1, 1] || c_in != c_out {
            Some(conv_pair("shortcut", c_in, 1, 1.0, params)?)
        } else {
            None
        };
        let r = se.reduction;
        let mut se_pair = |name: &str, n: usize, params: &mut ParamSet<T>| -> Result<(ParamId, ParamId)> {
            let k = n / r;
            let w1 = params.add(format!("{prefix}.{name}.w1"), uniform_fan_in(rng, &[n, k], k, 1.0), true)?;
            let w2 = params.add(format!("{prefix}.{name}.w2"), uniform_fan_in(rng, &[k, n], n, 2f64.sqrt()), true)?;
            Ok((w1, w2))
        };
        let channel_se = if se.channel { Some(se_pair("channel_se", c_out, params)?) } else { None };
        let temporal_se = if se.temporal { Some(se_pair("temporal_se", frames, params)?) } else { None };
        Ok(Self {
            conv1,
            conv2,
            shortcut,
            channel_se,
            temporal_se,
            stride,
        })
    }
}

/// `shortcut(F) + SE(conv(relu(conv(F))))` with the SE stack order and gate
/// mode from `se`.
pub fn se_resblock_forward<T: Float>(
    g: &mut Graph<T>,
    x: Var,
    block: &ResBlockParams,
    p: &Bound,
    se: &SEBlockConfig,
) -> Result<Var> {
    let h = conv(g, x, p[block.conv1.0], p[block.conv1.1], block.stride, [1, 1, 1])?;
    let h = g.relu(h);
    let mut h = conv(g, h, p[block.conv2.0], p[block.conv2.1], [1, 1, 1], [1, 1, 1])?;
    let stages: [bool; 2] = match se.order {
        SeOrder::ChannelFirst => [true, false],
        SeOrder::TemporalFirst => [false, true],
    };
    for is_channel in stages {
        if is_channel {
            if let Some((w1, w2)) = block.channel_se {
                h = channel_se(g, h, p[w1], p[w2], se.mode)?.output;
            }
        } else if let Some((w1, w2)) = block.temporal_se {
            h = temporal_se(g, h, p[w1], p[w2], se.mode)?.output;
        }
    }
    let skip = match block.shortcut {
        Some((k, b)) => conv(g, x, p[k], p[b], block.stride, [0, 0, 0])?,
        None => x,
    };
    g.add(skip, h)
}

/// Parameter handles of the visual tower.
#[derive(Clone, Debug)]
pub struct ProSENet {
    pub config: ProSENetConfig,
    pub stem: (ParamId, ParamId),
    pub blocks: Vec<ResBlockParams>,
}

impl ProSENet {
    pub fn new<T: Float, R: Rng + ?Sized>(config: ProSENetConfig, params: &mut ParamSet<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let stem_k = params.add(
            "visual.stem.kernel",
            uniform_fan_in(rng, &[config.stem, 1, 3, 3, 3], 27, 2f64.sqrt()),
            true,
        )?;
        let stem_b = params.add("visual.stem.bias", Tensor::zeros([config.stem]), false)?;
        let frames = config.input[0];
        let mut blocks = Vec::new();
        let mut c_in = config.stem;
        for (s, (&width, &count)) in config.widths.iter().zip(&config.blocks).enumerate() {
            for b in 0..count {
                let stride = if s > 0 && b == 0 { [1, 2, 2] } else { [1, 1, 1] };
                blocks.push(ResBlockParams::new(
                    &format!("visual.stage{s}.block{b}"),
                    c_in,
                    width,
                    frames,
                    stride,
                    &config.se,
                    params,
                    rng,
                )?);
                c_in = width;
            }
        }
        Ok(Self {
            config,
            stem: (stem_k, stem_b),
            blocks,
        })
    }

    /// Feature `F_I` of shape `[feature_dim]` from a `[f, h, w]` volume.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, volume: Var) -> Result<Var> {
        let s = g.shape(volume).to_vec();
        if s != self.config.input {
            return Err(Error::Config(format!(
                "volume dims {s:?} do not match configured input {:?}",
                self.config.input
            )));
        }
        let x = g.reshape(volume, &[1, s[0], s[1], s[2]])?;
        let x = conv(g, x, p[self.stem.0], p[self.stem.1], [1, 1, 1], [1, 1, 1])?;
        let mut x = g.relu(x);
        for block in &self.blocks {
            x = se_resblock_forward(g, x, block, p, &self.config.se)?;
        }
        g.mean_over(x, &[1, 2, 3])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// `sigmoid(W1 relu(W2 p))` with `w1: [n, k]`, `w2: [k, n]` row-major.
    fn excite(p: &[f64], w1: &[f64], w2: &[f64]) -> Vec<f64> {
        let n = p.len();
        let k = w2.len() / n;
        let hidden: Vec<f64> = (0..k)
            .map(|a| (0..n).map(|j| w2[a * n + j] * p[j]).sum::<f64>().max(0.0))
            .collect();
        (0..n).map(|i| sig((0..k).map(|a| w1[i * k + a] * hidden[a]).sum())).collect()
    }

    /// `[c, f, h, w]` feature map accessor.
    struct Map<'a> {
        d: &'a [f64],
        s: [usize; 4],
    }

    impl Map<'_> {
        fn plane(&self, c: usize, f: usize) -> &[f64] {
            let n = self.s[2] * self.s[3];
            let at = (c * self.s[1] + f) * n;
            &self.d[at..at + n]
        }
    }

    fn mean(x: &[f64]) -> f64 {
        x.iter().sum::<f64>() / x.len() as f64
    }

    /// Joint channel SE then joint temporal SE, one scalar at a time.
    fn se_stack_oracle(fm: &Tensor<f64>, cw: (&[f64], &[f64]), tw: (&[f64], &[f64])) -> Vec<f64> {
        let s: [usize; 4] = fm.shape().try_into().unwrap();
        let [c, f, h, w] = s;
        let m = Map { d: fm.data(), s };
        let p: Vec<f64> = (0..c).map(|ch| (0..f).map(|fr| mean(m.plane(ch, fr))).sum::<f64>() / f as f64).collect();
        let g = excite(&p, cw.0, cw.1);
        let mut fc = vec![0.0; fm.len()];
        for fr in 0..f {
            let pt: Vec<f64> = (0..c).map(|ch| mean(m.plane(ch, fr))).collect();
            let gt = excite(&pt, cw.0, cw.1);
            for ch in 0..c {
                let gate = gt[ch] * g[ch];
                let at = (ch * f + fr) * h * w;
                for (o, &x) in fc[at..at + h * w].iter_mut().zip(m.plane(ch, fr)) {
                    *o = x * gate;
                }
            }
        }
        let mc = Map { d: &fc, s };
        let q: Vec<f64> = (0..f).map(|fr| (0..c).map(|ch| mean(mc.plane(ch, fr))).sum::<f64>() / c as f64).collect();
        let gq = excite(&q, tw.0, tw.1);
        let mut out = vec![0.0; fm.len()];
        for ch in 0..c {
            let row: Vec<f64> = (0..f).map(|fr| mean(mc.plane(ch, fr))).collect();
            let l = excite(&row, tw.0, tw.1);
            for fr in 0..f {
                let gate = l[fr] * gq[fr];
                let at = (ch * f + fr) * h * w;
                for (o, &x) in out[at..at + h * w].iter_mut().zip(mc.plane(ch, fr)) {
                    *o = x * gate;
                }
            }
        }
        out
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol, "entry {i}: {x} vs {y}");
        }
    }

    #[test]
    fn squeeze_and_pool_match_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fm = rand_tensor(&mut rng, &[3, 2, 4, 4]);
        let m = Map { d: fm.data(), s: [3, 2, 4, 4] };
        let mut g = Graph::new();
        let v = g.constant(fm.clone());
        let p = channel_squeeze(&mut g, v).unwrap();
        let want: Vec<f64> = (0..3).map(|c| (mean(m.plane(c, 0)) + mean(m.plane(c, 1))) / 2.0).collect();
        close(g.value(p).data(), &want, 1e-12);

        let pt = temporal_preserving_pool(&mut g, v).unwrap();
        assert_eq!(g.shape(pt), [2, 3]);
        let want: Vec<f64> = (0..2).flat_map(|f| (0..3).map(move |c| (f, c))).map(|(f, c)| mean(m.plane(c, f))).collect();
        close(g.value(pt).data(), &want, 1e-12);

        // the global descriptor is the frame average of the local ones
        let rows = g.mean_over(pt, &[0]).unwrap();
        close(g.value(rows).data(), g.value(p).data(), 1e-12);
    }

    #[test]
    fn squeeze_constant_and_zero_channels() {
        let mut g = Graph::new();
        let five = g.constant(Tensor::full([3, 2, 2, 2], 5.0));
        let p = channel_squeeze(&mut g, five).unwrap();
        assert_eq!(g.value(p).data(), [5.0; 3]);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut t = rand_tensor(&mut rng, &[2, 2, 2, 2]);
        t.data_mut()[..8].iter_mut().for_each(|v| *v = 0.0);
        let v = g.constant(t);
        let p = channel_squeeze(&mut g, v).unwrap();
        assert_eq!(g.value(p).data()[0], 0.0);

        // frame i constant at i
        let frames = g.constant(Tensor::from_fn([2, 3, 2, 2], |i| ((i / 4) % 3) as f64));
        let pt = temporal_preserving_pool(&mut g, frames).unwrap();
        assert_eq!(g.value(pt).data(), [0.0, 0.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn excitation_examples() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::new([4], vec![1.0, -2.0, 0.5, 3.0]).unwrap());
        let w1 = g.constant(Tensor::new([4, 2], vec![1.0, -1.0, 0.5, 2.0, -0.3, 0.0, 0.0, 1.5]).unwrap());
        let w2 = g.constant(Tensor::new([2, 4], vec![0.2, 0.1, -0.4, 0.3, -0.5, 0.0, 1.0, -0.2]).unwrap());
        let out = excitation(&mut g, p, w1, w2).unwrap();
        // hidden = relu([0.2 - 0.2 - 0.2 + 0.9, -0.5 + 0.5 - 0.6]) = [0.7, 0]
        let want = [sig(0.7), sig(0.35), sig(-0.21), sig(0.0)];
        close(g.value(out).data(), &want, 1e-12);
        assert!(g.value(out).data().iter().all(|&x| x > 0.0 && x < 1.0));

        let zero = g.constant(Tensor::zeros([4, 2]));
        let half = excitation(&mut g, p, zero, w2).unwrap();
        assert_eq!(g.value(half).data(), [0.5; 4]);

        let bad = g.constant(Tensor::zeros([3, 2]));
        assert!(matches!(excitation(&mut g, p, bad, w2), Err(Error::Dimension { .. })));
    }

    #[test]
    fn identical_frames_give_the_global_gate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let one = rand_tensor(&mut rng, &[4, 1, 3, 3]);
        let fm = Tensor::from_fn([4, 3, 3, 3], |i| {
            let (c, rest) = (i / 27, i % 9);
            one.data()[c * 9 + rest]
        });
        let mut g = Graph::new();
        let v = g.constant(fm);
        let w1 = g.constant(rand_tensor(&mut rng, &[4, 2]));
        let w2 = g.constant(rand_tensor(&mut rng, &[2, 4]));
        let p = channel_squeeze(&mut g, v).unwrap();
        let global = excitation(&mut g, p, w1, w2).unwrap();
        let pt = temporal_preserving_pool(&mut g, v).unwrap();
        let local = per_frame_gates(&mut g, pt, w1, w2).unwrap();
        for row in g.value(local).data().chunks(4) {
            close(row, g.value(global).data(), 1e-12);
        }
        let zero = g.constant(Tensor::zeros([4, 2]));
        let half = per_frame_gates(&mut g, pt, zero, w2).unwrap();
        assert!(g.value(half).data().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn joint_gate_modes() {
        let mut g = Graph::new();
        let ones = g.constant(Tensor::full([3], 1.0));
        let local = g.constant(Tensor::from_fn([2, 3], |i| 0.1 * (i + 1) as f64));
        let j = joint_gate(&mut g, ones, local, GateMode::Joint).unwrap();
        assert_eq!(g.value(j), g.value(local));

        let half = g.constant(Tensor::full([3], 0.5));
        let half_local = g.constant(Tensor::full([2, 3], 0.5));
        let j = joint_gate(&mut g, half, half_local, GateMode::Joint).unwrap();
        assert!(g.value(j).data().iter().all(|&x| x == 0.25));

        let global = g.constant(Tensor::new([3], vec![0.2, 0.4, 0.6]).unwrap());
        let j = joint_gate(&mut g, global, local, GateMode::GlobalOnly).unwrap();
        assert_eq!(g.value(j).data(), [0.2, 0.4, 0.6, 0.2, 0.4, 0.6]);
        let j = joint_gate(&mut g, global, local, GateMode::LocalOnly).unwrap();
        assert_eq!(g.value(j), g.value(local));
        let j = joint_gate(&mut g, global, local, GateMode::Ones).unwrap();
        assert!(g.value(j).data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn channel_gate_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fm = rand_tensor(&mut rng, &[3, 2, 2, 2]);
        let gate = rand_tensor(&mut rng, &[2, 3]);
        let mut g = Graph::new();
        let v = g.constant(fm.clone());
        let gv = g.constant(gate.clone());
        let out = channel_se_apply(&mut g, v, gv).unwrap();
        let want: Vec<f64> = (0..fm.len())
            .map(|i| {
                let (c, f) = (i / 8, (i / 4) % 2);
                fm.data()[i] * gate.data()[f * 3 + c]
            })
            .collect();
        close(g.value(out).data(), &want, 1e-15);

        let ones = g.constant(Tensor::full([2, 3], 1.0));
        let same = channel_se_apply(&mut g, v, ones).unwrap();
        assert_eq!(g.value(same), &fm);
        let zeros = g.constant(Tensor::zeros([2, 3]));
        let none = channel_se_apply(&mut g, v, zeros).unwrap();
        assert!(g.value(none).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn se_stack_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fm = rand_tensor(&mut rng, &[4, 4, 3, 3]);
        let (c1, c2) = (rand_tensor(&mut rng, &[4, 2]), rand_tensor(&mut rng, &[2, 4]));
        let (t1, t2) = (rand_tensor(&mut rng, &[4, 2]), rand_tensor(&mut rng, &[2, 4]));
        let mut g = Graph::new();
        let v = g.constant(fm.clone());
        let [a, b, c, d] = [&c1, &c2, &t1, &t2].map(|t| g.constant(t.clone()));
        let fc = channel_se(&mut g, v, a, b, GateMode::Joint).unwrap();
        let ft = temporal_se(&mut g, fc.output, c, d, GateMode::Joint).unwrap();
        let want = se_stack_oracle(&fm, (c1.data(), c2.data()), (t1.data(), t2.data()));
        close(g.value(ft.output).data(), &want, 1e-12);
        for gate in [fc.gate, ft.gate] {
            assert!(g.value(gate).data().iter().all(|&x| x > 0.0 && x < 1.0));
        }
    }

    #[test]
    fn zero_excitation_scales_by_a_quarter() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let fm = rand_tensor(&mut rng, &[4, 4, 2, 2]);
        let mut g = Graph::new();
        let v = g.constant(fm.clone());
        let zero = g.constant(Tensor::zeros([4, 2]));
        let w2 = g.constant(rand_tensor(&mut rng, &[2, 4]));
        let quarter = fm.map(|x| 0.25 * x);
        let c = channel_se(&mut g, v, zero, w2, GateMode::Joint).unwrap();
        close(g.value(c.output).data(), quarter.data(), 1e-12);
        let t = temporal_se(&mut g, v, zero, w2, GateMode::Joint).unwrap();
        close(g.value(t.output).data(), quarter.data(), 1e-12);
    }

    #[test]
    fn saturated_temporal_gates_pass_features_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // positive map so relu(W2 p) = sum(p) > 0 and W1 = 1e3 saturates
        let fm = Tensor::from_fn([3, 4, 2, 2], |_| rng.gen_range(0.5..1.0));
        let mut g = Graph::new();
        let v = g.constant(fm.clone());
        let w1 = g.constant(Tensor::full([4, 2], 1e3));
        let w2 = g.constant(Tensor::full([2, 4], 1.0));
        let t = temporal_se(&mut g, v, w1, w2, GateMode::Joint).unwrap();
        assert!(g.value(t.output).max_abs_diff(&fm) < 1e-3);
        let (w1_3, w2_3) = (g.constant(Tensor::zeros([4, 3])), g.constant(Tensor::zeros([3, 4])));
        assert!(matches!(temporal_se(&mut g, v, w1_3, w2_3, GateMode::Joint), Err(Error::Config(_))));
    }

    fn block_fixture(c_in: usize, c_out: usize, stride: [usize; 3], se: &SEBlockConfig, seed: u64) -> (ResBlockParams, ParamSet<f64>) {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = ResBlockParams::new("b", c_in, c_out, 4, stride, se, &mut params, &mut rng).unwrap();
        (block, params)
    }

    #[test]
    fn zeroed_residual_branch_is_identity() {
        let se = SEBlockConfig::default();
        let (block, mut params) = block_fixture(4, 4, [1, 1, 1], &se, 8);
        params.get_mut(block.conv2.0).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&mut rng, &[4, 4, 3, 3]);
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let xv = g.constant(x.clone());
        let y = se_resblock_forward(&mut g, xv, &block, &p, &se).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn ones_mode_equals_plain_block() {
        let se = SEBlockConfig {
            mode: GateMode::Ones,
            ..SEBlockConfig::default()
        };
        let (block, params) = block_fixture(2, 4, [1, 2, 2], &se, 10);
        let plain = ResBlockParams {
            channel_se: None,
            temporal_se: None,
            ..block.clone()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, &[2, 4, 4, 4]);
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let xv = g.constant(x);
        let a = se_resblock_forward(&mut g, xv, &block, &p, &se).unwrap();
        let b = se_resblock_forward(&mut g, xv, &plain, &p, &se).unwrap();
        assert!(g.value(a).max_abs_diff(g.value(b)) <= 1e-6);
    }

    #[test]
    fn stacking_order_matters() {
        let first = SEBlockConfig::default();
        let (block, params) = block_fixture(4, 4, [1, 1, 1], &first, 12);
        let second = SEBlockConfig {
            order: SeOrder::TemporalFirst,
            ..first
        };
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = rand_tensor(&mut rng, &[4, 4, 3, 3]);
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let xv = g.constant(x);
        let a = se_resblock_forward(&mut g, xv, &block, &p, &first).unwrap();
        let b = se_resblock_forward(&mut g, xv, &block, &p, &second).unwrap();
        assert!(g.value(a).max_abs_diff(g.value(b)) > 1e-9);
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        for (mode, order) in [(GateMode::Joint, SeOrder::ChannelFirst), (GateMode::GlobalOnly, SeOrder::TemporalFirst), (GateMode::LocalOnly, SeOrder::ChannelFirst)] {
            let se = SEBlockConfig {
                mode,
                order,
                ..SEBlockConfig::default()
            };
            let (block, params) = block_fixture(2, 4, [1, 2, 2], &se, 14);
            let mut rng = ChaCha8Rng::seed_from_u64(15);
            let x = rand_tensor(&mut rng, &[2, 4, 4, 4]);
            let obj = |g: &mut Graph<f64>, p: &Bound, xs: &[Var]| -> Result<Var> {
                let y = se_resblock_forward(g, xs[0], &block, p, &se)?;
                let w = g.constant(Tensor::from_fn(g.shape(y).to_vec(), |i| (0.37 * i as f64).cos()));
                let y = g.mul(y, w)?;
                Ok(g.sum(y))
            };
            let report = gradcheck::check(&obj, &params, &[x], 1e-4).unwrap();
            assert!(report.max_rel_error <= 1e-4, "{mode:?}: {report:?}");
        }
    }

    #[test]
    fn shared_excitation_gradient_sums_both_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let fm = rand_tensor(&mut rng, &[4, 3, 2, 2]);
        let (w1, w2) = (rand_tensor(&mut rng, &[4, 2]), rand_tensor(&mut rng, &[2, 4]));
        let weights = Tensor::from_fn([4, 3, 2, 2], |i| (0.7 * i as f64).sin());
        // gradient of W2 when only the global (or only the local) path sees
        // the trainable copy
        let grad_w2 = |global_live: bool, local_live: bool| -> Vec<f64> {
            let mut g = Graph::new();
            let v = g.constant(fm.clone());
            let a = g.constant(w1.clone());
            let live = g.param(w2.clone());
            let frozen = g.constant(w2.clone());
            let p = channel_squeeze(&mut g, v).unwrap();
            let global = excitation(&mut g, p, a, if global_live { live } else { frozen }).unwrap();
            let pt = temporal_preserving_pool(&mut g, v).unwrap();
            let local = per_frame_gates(&mut g, pt, a, if local_live { live } else { frozen }).unwrap();
            let gate = joint_gate(&mut g, global, local, GateMode::Joint).unwrap();
            let out = channel_se_apply(&mut g, v, gate).unwrap();
            let wv = g.constant(weights.clone());
            let out = g.mul(out, wv).unwrap();
            let s = g.sum(out);
            g.backward(s).unwrap();
            g.grad(live).unwrap().to_vec()
        };
        let both = grad_w2(true, true);
        let global = grad_w2(true, false);
        let local = grad_w2(false, true);
        let sum: Vec<f64> = global.iter().zip(&local).map(|(a, b)| a + b).collect();
        close(&both, &sum, 1e-12);
        assert!(global.iter().any(|&x| x.abs() > 1e-6) && local.iter().any(|&x| x.abs() > 1e-6));
    }

    #[test]
    fn network_feature_width_and_determinism() {
        for input in [[4, 16, 16], [8, 8, 12]] {
            let config = ProSENetConfig {
                input,
                stem: 4,
                widths: vec![4, 6],
                blocks: vec![1, 1],
                ..ProSENetConfig::default()
            };
            let mut params = ParamSet::<f64>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            let net = ProSENet::new(config, &mut params, &mut rng).unwrap();
            let vol = rand_tensor(&mut rng, &input);
            let run = || {
                let mut g = Graph::new();
                let p = params.bind_frozen(&mut g);
                let v = g.constant(vol.clone());
                let f = net.forward(&mut g, &p, v).unwrap();
                g.value(f).clone()
            };
            let a = run();
            assert_eq!(a.shape(), [6]);
            assert_eq!(a, run());
        }
    }

    #[test]
    fn config_validation() {
        let mut c = ProSENetConfig::default();
        assert!(c.validate().is_ok());
        c.input = [5, 96, 96];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.se.temporal = false;
        assert!(c.validate().is_ok());
        c.widths = vec![16, 33, 64];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
