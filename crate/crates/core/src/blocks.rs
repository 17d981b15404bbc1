//! Channel attention, SalCAR and SplitCAR blocks.
//!
//! Blocks read their weights from the tape by name (`<prefix>.<layer>.w` and
//! `.b`), so the same parameter set can drive several configurations; the
//! `*_params` functions list exactly the tensors a configuration touches.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Architectural switches mirroring the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Toggles {
    pub enable_ca: bool,
    pub enable_saliency_fusion: bool,
    pub enable_skips: bool,
    pub enable_split: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            enable_ca: true,
            enable_saliency_fusion: true,
            enable_skips: true,
            enable_split: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub ca_ratio: usize,
    pub split_count: usize,
    pub leaky_slope: f64,
    pub toggles: Toggles,
}

impl BlockConfig {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            ca_ratio: 16,
            split_count: 32,
            leaky_slope: 0.2,
            toggles: Toggles::default(),
        }
    }

    fn check_common(&self) -> Result<()> {
        if self.in_channels == 0
            || self.out_channels == 0
            || self.ca_ratio == 0
            || self.split_count == 0
        {
            return Err(Error::Config(format!(
                "block widths and ratios must be positive: {self:?}"
            )));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!(
                "leaky slope {} outside (0,1)",
                self.leaky_slope
            )));
        }
        Ok(())
    }

    fn check_ca(&self, channels: usize) -> Result<()> {
        if self.toggles.enable_ca && !channels.is_multiple_of(self.ca_ratio) {
            return Err(Error::Config(format!(
                "channel attention over {channels} channels needs a divisor ratio, got r={}",
                self.ca_ratio
            )));
        }
        Ok(())
    }

    /// Width of each of the two concatenated SalCAR paths.
    fn salcar_half(&self) -> usize {
        if self.toggles.enable_skips {
            self.out_channels / 2
        } else {
            self.out_channels
        }
    }

    pub fn validate_salcar(&self) -> Result<()> {
        self.check_common()?;
        if self.toggles.enable_skips && !self.out_channels.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "SalCAR output width {} must be even to split between its two paths",
                self.out_channels
            )));
        }
        self.check_ca(self.salcar_half())
    }

    fn groups(&self) -> usize {
        if self.toggles.enable_split {
            self.split_count
        } else {
            1
        }
    }

    pub fn validate_splitcar(&self) -> Result<()> {
        self.check_common()?;
        if !self.out_channels.is_multiple_of(self.groups()) {
            return Err(Error::Config(format!(
                "SplitCAR output width {} not divisible by split count {}",
                self.out_channels, self.split_count
            )));
        }
        self.check_ca(self.in_channels)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

impl ParamSpec {
    pub fn is_bias(&self) -> bool {
        self.name.ends_with(".b")
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub(crate) fn conv_spec(
    out: &mut Vec<ParamSpec>,
    prefix: &str,
    cin: usize,
    cout: usize,
    k: usize,
    groups: usize,
) {
    let cg = cin / groups;
    out.push(ParamSpec {
        name: format!("{prefix}.w"),
        shape: vec![cout, cg, k, k],
        fan_in: cg * k * k,
    });
    out.push(ParamSpec {
        name: format!("{prefix}.b"),
        shape: vec![cout],
        fan_in: cg * k * k,
    });
}

pub(crate) fn linear_spec(out: &mut Vec<ParamSpec>, prefix: &str, din: usize, dout: usize) {
    out.push(ParamSpec {
        name: format!("{prefix}.w"),
        shape: vec![dout, din],
        fan_in: din,
    });
    out.push(ParamSpec {
        name: format!("{prefix}.b"),
        shape: vec![dout],
        fan_in: din,
    });
}

pub(crate) fn conv<T: Scalar>(
    tape: &mut Tape<'_, T>,
    prefix: &str,
    x: Var,
    stride: usize,
    groups: usize,
) -> Result<Var> {
    let w = tape.param(&format!("{prefix}.w"))?;
    let b = tape.param(&format!("{prefix}.b"))?;
    tape.conv2d(x, w, Some(b), stride, groups)
}

pub(crate) fn linear<T: Scalar>(tape: &mut Tape<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(&format!("{prefix}.w"))?;
    let b = tape.param(&format!("{prefix}.b"))?;
    tape.linear(x, w, Some(b))
}

pub fn channel_attention_params(prefix: &str, channels: usize, ratio: usize) -> Vec<ParamSpec> {
    let mut v = Vec::new();
    linear_spec(
        &mut v,
        &format!("{prefix}.down"),
        channels,
        channels / ratio,
    );
    linear_spec(&mut v, &format!("{prefix}.up"), channels / ratio, channels);
    v
}

/// `x * sigmoid(up(relu(down(gap(x)))))`, one factor per channel.
pub fn channel_attention<T: Scalar>(
    tape: &mut Tape<'_, T>,
    prefix: &str,
    x: Var,
    ratio: usize,
) -> Result<Var> {
    let c = tape.value(x).nchw()?.1;
    if ratio == 0 || c % ratio != 0 {
        return Err(Error::Config(format!(
            "channel attention over {c} channels needs a divisor ratio, got r={ratio}"
        )));
    }
    let g = tape.global_avg_pool(x)?;
    let d = linear(tape, &format!("{prefix}.down"), g)?;
    let d = tape.relu(d);
    let u = linear(tape, &format!("{prefix}.up"), d)?;
    let s = tape.sigmoid(u);
    tape.mul_channel(x, s)
}

pub fn salcar_params(cfg: &BlockConfig, sal_channels: usize, prefix: &str) -> Vec<ParamSpec> {
    let t = cfg.toggles;
    let half = cfg.salcar_half();
    let fused_in = cfg.in_channels
        + if t.enable_saliency_fusion {
            sal_channels
        } else {
            0
        };
    let mut v = Vec::new();
    conv_spec(&mut v, &format!("{prefix}.conv_in"), fused_in, half, 1, 1);
    if t.enable_ca {
        v.extend(channel_attention_params(
            &format!("{prefix}.ca"),
            half,
            cfg.ca_ratio,
        ));
    }
    conv_spec(&mut v, &format!("{prefix}.conv_a"), half, half, 3, 1);
    conv_spec(&mut v, &format!("{prefix}.conv_b"), half, half, 3, 1);
    if t.enable_skips {
        conv_spec(
            &mut v,
            &format!("{prefix}.skip"),
            cfg.in_channels,
            half,
            1,
            1,
        );
    }
    v
}

/// `Concat{ Conv3(Conv3(x')) + x', Conv1_s2(x) }` with
/// `x' = CA(Conv1(Concat{MaxPool(x), F_sal}))`. Halves the spatial size.
pub fn salcar_block<T: Scalar>(
    tape: &mut Tape<'_, T>,
    cfg: &BlockConfig,
    prefix: &str,
    x: Var,
    f_sal: Option<Var>,
) -> Result<Var> {
    cfg.validate_salcar()?;
    let t = cfg.toggles;
    let slope = T::of(cfg.leaky_slope);
    let pooled = tape.maxpool2(x)?;
    let fused = if t.enable_saliency_fusion {
        let f_sal =
            f_sal.ok_or_else(|| Error::Invalid(format!("{prefix}: saliency features required")))?;
        let (_, _, ph, pw) = tape.value(pooled).nchw()?;
        let (_, _, sh, sw) = tape.value(f_sal).nchw()?;
        if (ph, pw) != (sh, sw) {
            return Err(Error::shape(
                "salcar_block",
                format!("saliency features are {sh}x{sw}, pooled input is {ph}x{pw}"),
            ));
        }
        tape.concat(&[pooled, f_sal])?
    } else {
        pooled
    };
    let h = conv(tape, &format!("{prefix}.conv_in"), fused, 1, 1)?;
    let mut xp = tape.leaky_relu(h, slope)?;
    if t.enable_ca {
        xp = channel_attention(tape, &format!("{prefix}.ca"), xp, cfg.ca_ratio)?;
    }
    let a = conv(tape, &format!("{prefix}.conv_a"), xp, 1, 1)?;
    let a = tape.leaky_relu(a, slope)?;
    let b = conv(tape, &format!("{prefix}.conv_b"), a, 1, 1)?;
    let b = tape.leaky_relu(b, slope)?;
    if !t.enable_skips {
        return Ok(b);
    }
    let res = tape.add(b, xp)?;
    let skip = conv(tape, &format!("{prefix}.skip"), x, 2, 1)?;
    tape.concat(&[res, skip])
}

pub fn splitcar_params(cfg: &BlockConfig, prefix: &str) -> Vec<ParamSpec> {
    let t = cfg.toggles;
    let (c, o) = (cfg.in_channels, cfg.out_channels);
    let mut v = Vec::new();
    if t.enable_ca {
        v.extend(channel_attention_params(
            &format!("{prefix}.ca"),
            c,
            cfg.ca_ratio,
        ));
    }
    conv_spec(&mut v, &format!("{prefix}.branch_a"), c, o, 3, 1);
    conv_spec(&mut v, &format!("{prefix}.branch_b"), o, o, 3, cfg.groups());
    if t.enable_skips {
        conv_spec(&mut v, &format!("{prefix}.proj"), c, o, 1, 1);
    }
    v
}

/// `Concat_i{ Conv3(Conv3(x')) } + Conv1(x')` with `x' = CA(MaxPool(x))`.
///
/// The first convolution of all branches is stored as one dense `C -> O`
/// kernel (branch `i` owns output channels `i*O/s .. (i+1)*O/s`) and the second
/// as a grouped `O -> O` kernel with `s` groups, which is the same function as
/// `s` separate branches concatenated.
pub fn splitcar_block<T: Scalar>(
    tape: &mut Tape<'_, T>,
    cfg: &BlockConfig,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    cfg.validate_splitcar()?;
    let slope = T::of(cfg.leaky_slope);
    let mut xp = tape.maxpool2(x)?;
    if cfg.toggles.enable_ca {
        xp = channel_attention(tape, &format!("{prefix}.ca"), xp, cfg.ca_ratio)?;
    }
    let a = conv(tape, &format!("{prefix}.branch_a"), xp, 1, 1)?;
    let a = tape.leaky_relu(a, slope)?;
    let b = conv(tape, &format!("{prefix}.branch_b"), a, 1, cfg.groups())?;
    let b = tape.leaky_relu(b, slope)?;
    if !cfg.toggles.enable_skips {
        return Ok(b);
    }
    let p = conv(tape, &format!("{prefix}.proj"), xp, 1, 1)?;
    tape.add(b, p)
}
