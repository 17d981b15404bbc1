//! Full forward pass: saliency subnet, Siamese image subnet, JND subnet,
//! feature fusion, the two heads and weighted score pooling.

use std::fmt::Write as _;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::blocks::{self, conv, conv_spec, linear, linear_spec, BlockConfig, ParamSpec, Toggles};
use crate::config::{format_list, parse_bool, parse_kv, parse_list, parse_value};
use crate::dataset::{PatchQuad, SCORE_MAX};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::losses::normalize_weights;
use crate::params::ParameterSet;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Offset added after the weight head's activation to keep weights strictly positive.
pub const WEIGHT_FLOOR: f64 = 1e-6;

/// Prefix of checkpoint entries that are not trainable parameters.
pub const META_PREFIX: &str = "__";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightActivation {
    Softplus,
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub patch_size: usize,
    pub stem: usize,
    pub salcar: Vec<usize>,
    pub splitcar: Vec<usize>,
    pub sal_channels: Vec<usize>,
    pub head_hidden: usize,
    pub ca_ratio: usize,
    pub split_count: usize,
    pub leaky_slope: f64,
    pub weight_activation: WeightActivation,
    pub toggles: Toggles,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            patch_size: 32,
            stem: 32,
            salcar: vec![64, 128],
            splitcar: vec![256, 512],
            sal_channels: vec![32, 64],
            head_hidden: 512,
            ca_ratio: 16,
            split_count: 32,
            leaky_slope: 0.2,
            weight_activation: WeightActivation::Softplus,
            toggles: Toggles::default(),
        }
    }
}

impl NetworkConfig {
    /// Narrow widths for CPU-scale experiments.
    pub fn small() -> Self {
        Self {
            stem: 8,
            salcar: vec![16, 32],
            splitcar: vec![64, 128],
            sal_channels: vec![8, 16],
            ca_ratio: 8,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "small" => Ok(Self::small()),
            _ => Err(Error::Config(format!("unknown network preset `{name}`"))),
        }
    }

    fn block(&self, cin: usize, cout: usize) -> BlockConfig {
        BlockConfig {
            in_channels: cin,
            out_channels: cout,
            ca_ratio: self.ca_ratio,
            split_count: self.split_count,
            leaky_slope: self.leaky_slope,
            toggles: self.toggles,
        }
    }

    fn stages(&self) -> usize {
        self.salcar.len() + self.splitcar.len()
    }

    /// Spatial side of the last feature map.
    pub fn final_side(&self) -> usize {
        self.patch_size >> self.stages()
    }

    fn final_channels(&self) -> usize {
        *self
            .splitcar
            .last()
            .or(self.salcar.last())
            .unwrap_or(&self.stem)
    }

    /// Length of each subnet's feature vector.
    pub fn feature_len(&self) -> usize {
        self.final_channels() * self.final_side() * self.final_side()
    }

    pub fn fused_len(&self) -> usize {
        2 * self.feature_len()
    }

    pub fn validate(&self) -> Result<()> {
        let side = 1usize << self.stages();
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(side) {
            return Err(Error::Config(format!(
                "patch size {} must be a positive multiple of 2^{} for {} halving stages",
                self.patch_size,
                self.stages(),
                self.stages()
            )));
        }
        if self.stem == 0 || self.head_hidden == 0 {
            return Err(Error::Config(
                "stem and head widths must be positive".into(),
            ));
        }
        if self.toggles.enable_saliency_fusion {
            if self.salcar.len() != 2 || self.sal_channels.len() != 2 {
                return Err(Error::Config(format!(
                    "saliency fusion needs exactly two SalCAR stages and two saliency widths, got {} and {}",
                    self.salcar.len(),
                    self.sal_channels.len()
                )));
            }
            if self.sal_channels.contains(&0) {
                return Err(Error::Config("saliency widths must be positive".into()));
            }
        }
        let mut cin = self.stem;
        for &c in &self.salcar {
            self.block(cin, c).validate_salcar()?;
            cin = c;
        }
        for &c in &self.splitcar {
            self.block(cin, c).validate_splitcar()?;
            cin = c;
        }
        Ok(())
    }

    /// Applies one `key = value` setting. Returns false for unknown keys.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "patch_size" => self.patch_size = parse_value(key, value)?,
            "stem" => self.stem = parse_value(key, value)?,
            "salcar" => self.salcar = parse_list(key, value)?,
            "splitcar" => self.splitcar = parse_list(key, value)?,
            "sal_channels" => self.sal_channels = parse_list(key, value)?,
            "head_hidden" => self.head_hidden = parse_value(key, value)?,
            "ca_ratio" => self.ca_ratio = parse_value(key, value)?,
            "split_count" => self.split_count = parse_value(key, value)?,
            "leaky_slope" => self.leaky_slope = parse_value(key, value)?,
            "weight_activation" => {
                self.weight_activation = match value {
                    "softplus" => WeightActivation::Softplus,
                    "sigmoid" => WeightActivation::Sigmoid,
                    _ => {
                        return Err(Error::Config(format!(
                            "unknown weight activation `{value}`"
                        )))
                    }
                }
            }
            "enable_ca" => self.toggles.enable_ca = parse_bool(key, value)?,
            "enable_saliency_fusion" => {
                self.toggles.enable_saliency_fusion = parse_bool(key, value)?
            }
            "enable_skips" => self.toggles.enable_skips = parse_bool(key, value)?,
            "enable_split" => self.toggles.enable_split = parse_bool(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parses a full network config; every key must be known.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_kv(text)? {
            if k == "preset" {
                cfg = Self::preset(&v)?;
            } else if !cfg.apply(&k, &v)? {
                return Err(Error::Config(format!("unknown network key `{k}`")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text form; `from_text(to_text())` round-trips.
    pub fn to_text(&self) -> String {
        let t = self.toggles;
        let mut s = String::new();
        let _ = writeln!(s, "patch_size = {}", self.patch_size);
        let _ = writeln!(s, "stem = {}", self.stem);
        let _ = writeln!(s, "salcar = {}", format_list(&self.salcar));
        let _ = writeln!(s, "splitcar = {}", format_list(&self.splitcar));
        let _ = writeln!(s, "sal_channels = {}", format_list(&self.sal_channels));
        let _ = writeln!(s, "head_hidden = {}", self.head_hidden);
        let _ = writeln!(s, "ca_ratio = {}", self.ca_ratio);
        let _ = writeln!(s, "split_count = {}", self.split_count);
        let _ = writeln!(s, "leaky_slope = {}", self.leaky_slope);
        let act = match self.weight_activation {
            WeightActivation::Softplus => "softplus",
            WeightActivation::Sigmoid => "sigmoid",
        };
        let _ = writeln!(s, "weight_activation = {act}");
        let _ = writeln!(s, "enable_ca = {}", t.enable_ca);
        let _ = writeln!(s, "enable_saliency_fusion = {}", t.enable_saliency_fusion);
        let _ = writeln!(s, "enable_skips = {}", t.enable_skips);
        let _ = writeln!(s, "enable_split = {}", t.enable_split);
        s
    }

    /// First 64 bits of SHA-256 over the canonical text.
    pub fn hash(&self) -> u64 {
        let d = Sha256::digest(self.to_text().as_bytes());
        u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
    }
}

/// Every trainable tensor the configuration uses, in a fixed order.
pub fn param_specs(cfg: &NetworkConfig) -> Vec<ParamSpec> {
    let mut v = Vec::new();
    if cfg.toggles.enable_saliency_fusion {
        let [s1, s2] = [cfg.sal_channels[0], cfg.sal_channels[1]];
        conv_spec(&mut v, "sal.conv1", 1, s1, 3, 1);
        conv_spec(&mut v, "sal.conv2", s1, s1, 3, 1);
        conv_spec(&mut v, "sal.conv3", s1, s2, 3, 1);
        conv_spec(&mut v, "sal.conv4", s2, s2, 3, 1);
    }
    for (prefix, cin) in [("img", 3), ("jnd", 1)] {
        conv_spec(&mut v, &format!("{prefix}.stem"), cin, cfg.stem, 3, 1);
        let mut c = cfg.stem;
        for (i, &o) in cfg.salcar.iter().enumerate() {
            let sal = cfg.sal_channels.get(i).copied().unwrap_or(0);
            v.extend(blocks::salcar_params(
                &cfg.block(c, o),
                sal,
                &format!("{prefix}.salcar{}", i + 1),
            ));
            c = o;
        }
        for (i, &o) in cfg.splitcar.iter().enumerate() {
            v.extend(blocks::splitcar_params(
                &cfg.block(c, o),
                &format!("{prefix}.splitcar{}", i + 1),
            ));
            c = o;
        }
    }
    for head in ["pqp", "pwp"] {
        linear_spec(
            &mut v,
            &format!("{head}.fc1"),
            cfg.fused_len(),
            cfg.head_hidden,
        );
        linear_spec(&mut v, &format!("{head}.fc2"), cfg.head_hidden, 1);
    }
    v
}

/// Initial output bias of the quality head: the middle of the score range.
pub const QUALITY_BIAS_INIT: f32 = (SCORE_MAX / 2.0) as f32;

/// He-uniform weights (`U(-b, b)`, `b = sqrt(6 / fan_in)`); zero biases
/// except the quality head's output, which starts at [`QUALITY_BIAS_INIT`].
pub fn init_params(cfg: &NetworkConfig, seed: u64) -> Result<ParameterSet> {
    cfg.validate()?;
    let mut ps = ParameterSet::new();
    for (i, s) in param_specs(cfg).into_iter().enumerate() {
        let t = if s.name == "pqp.fc2.b" {
            Tensor::full(&s.shape, QUALITY_BIAS_INIT)
        } else if s.is_bias() {
            Tensor::zeros(&s.shape)
        } else {
            let bound = (6.0 / s.fan_in as f64).sqrt() as f32;
            let mut r = rng::stream(seed, &[i as u64]);
            Tensor::from_fn(&s.shape, |_| r.random_range(-bound..bound))
        };
        ps.insert(s.name, t)?;
    }
    Ok(ps)
}

/// Scalar count of trainable tensors (metadata entries excluded).
pub fn count_parameters<T: Scalar>(params: &ParameterSet<T>) -> usize {
    params
        .iter()
        .filter(|(n, _)| !n.starts_with(META_PREFIX))
        .map(|(_, t)| t.len())
        .sum()
}

/// `N` quads stacked along the batch axis.
#[derive(Clone, Debug)]
pub struct QuadBatch<T: Scalar = f32> {
    pub reference: Tensor<T>,
    pub distorted: Tensor<T>,
    pub saliency: Tensor<T>,
    pub jnd: Tensor<T>,
    pub origins: Vec<(usize, usize)>,
}

impl<T: Scalar> QuadBatch<T> {
    pub fn from_quads(quads: &[&PatchQuad]) -> Result<Self> {
        let first = quads
            .first()
            .ok_or_else(|| Error::Invalid("a forward pass needs at least one quad".into()))?;
        let p = first.size();
        let stack = |pick: fn(&PatchQuad) -> &Tensor, ch: usize| -> Result<Tensor<T>> {
            let mut data = Vec::with_capacity(quads.len() * ch * p * p);
            for q in quads {
                let t = pick(q);
                if t.shape() != [ch, p, p] {
                    return Err(Error::shape(
                        "quad batch",
                        format!("patch {:?}, expected [{ch}, {p}, {p}]", t.shape()),
                    ));
                }
                data.extend(t.data().iter().map(|&v| T::of(v as f64)));
            }
            Tensor::new(&[quads.len(), ch, p, p], data)
        };
        Ok(Self {
            reference: stack(|q| &q.ref_patch, 3)?,
            distorted: stack(|q| &q.dst_patch, 3)?,
            saliency: stack(|q| &q.sal_patch, 1)?,
            jnd: stack(|q| &q.jnd_patch, 1)?,
            origins: quads.iter().map(|q| q.origin).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn patch_size(&self) -> usize {
        self.reference.shape()[2]
    }
}

/// `(F_sal1, F_sal2)`: each level is two 3x3 convolutions then a max-pool.
pub fn sal_subnet<T: Scalar>(
    tape: &mut Tape<'_, T>,
    cfg: &NetworkConfig,
    p_sal: Var,
) -> Result<(Var, Var)> {
    let (_, c, h, w) = tape.value(p_sal).nchw()?;
    if c != 1 || h != cfg.patch_size || w != cfg.patch_size {
        return Err(Error::shape(
            "sal_subnet",
            format!(
                "saliency patch is {c}x{h}x{w}, expected 1x{0}x{0}",
                cfg.patch_size
            ),
        ));
    }
    let slope = T::of(cfg.leaky_slope);
    let mut x = p_sal;
    let mut levels = Vec::with_capacity(2);
    for pair in [["sal.conv1", "sal.conv2"], ["sal.conv3", "sal.conv4"]] {
        for name in pair {
            let y = conv(tape, name, x, 1, 1)?;
            x = tape.leaky_relu(y, slope)?;
        }
        x = tape.maxpool2(x)?;
        levels.push(x);
    }
    Ok((levels[0], levels[1]))
}

/// Stem, SalCAR stages, SplitCAR stages, flatten. `prefix` selects the
/// parameter object (`img` is shared by both Siamese branches, `jnd` is separate).
pub fn img_subnet<T: Scalar>(
    tape: &mut Tape<'_, T>,
    cfg: &NetworkConfig,
    prefix: &str,
    x: Var,
    f_sal: Option<(Var, Var)>,
) -> Result<Var> {
    let (_, _, h, w) = tape.value(x).nchw()?;
    if h != cfg.patch_size || w != cfg.patch_size {
        return Err(Error::shape(
            "img_subnet",
            format!("patch is {h}x{w}, expected {0}x{0}", cfg.patch_size),
        ));
    }
    let slope = T::of(cfg.leaky_slope);
    let y = conv(tape, &format!("{prefix}.stem"), x, 1, 1)?;
    let mut y = tape.leaky_relu(y, slope)?;
    let mut c = cfg.stem;
    for (i, &o) in cfg.salcar.iter().enumerate() {
        let fs = f_sal.map(|(a, b)| if i == 0 { a } else { b });
        y = blocks::salcar_block(
            tape,
            &cfg.block(c, o),
            &format!("{prefix}.salcar{}", i + 1),
            y,
            fs,
        )?;
        c = o;
    }
    for (i, &o) in cfg.splitcar.iter().enumerate() {
        y = blocks::splitcar_block(
            tape,
            &cfg.block(c, o),
            &format!("{prefix}.splitcar{}", i + 1),
            y,
        )?;
        c = o;
    }
    tape.flatten(y)
}

/// JND branch: the image-subnet architecture on a 1-channel map with its own weights.
pub fn jnd_subnet<T: Scalar>(
    tape: &mut Tape<'_, T>,
    cfg: &NetworkConfig,
    p_jnd: Var,
    f_sal: Option<(Var, Var)>,
) -> Result<Var> {
    img_subnet(tape, cfg, "jnd", p_jnd, f_sal)
}

/// `Concat{F_ref - F_dst, F_jnd}`.
pub fn fuse<T: Scalar>(tape: &mut Tape<'_, T>, f_ref: Var, f_dst: Var, f_jnd: Var) -> Result<Var> {
    if tape.value(f_ref).shape() != tape.value(f_dst).shape() {
        return Err(Error::shape(
            "fuse",
            format!(
                "reference features {:?} vs distorted {:?}",
                tape.value(f_ref).shape(),
                tape.value(f_dst).shape()
            ),
        ));
    }
    let d = tape.sub(f_ref, f_dst)?;
    tape.concat(&[d, f_jnd])
}

/// `(w, q)`, each `N x 1`: FC, leaky ReLU, FC; the weight head adds a
/// positive activation plus [`WEIGHT_FLOOR`].
pub fn heads<T: Scalar>(
    tape: &mut Tape<'_, T>,
    cfg: &NetworkConfig,
    fused: Var,
) -> Result<(Var, Var)> {
    let slope = T::of(cfg.leaky_slope);
    let mlp = |tape: &mut Tape<'_, T>, head: &str| -> Result<Var> {
        let h = linear(tape, &format!("{head}.fc1"), fused)?;
        let h = tape.leaky_relu(h, slope)?;
        linear(tape, &format!("{head}.fc2"), h)
    };
    let q = mlp(tape, "pqp")?;
    let raw = mlp(tape, "pwp")?;
    let pos = match cfg.weight_activation {
        WeightActivation::Softplus => tape.softplus(raw),
        WeightActivation::Sigmoid => tape.sigmoid(raw),
    };
    let w = tape.add_scalar(pos, T::of(WEIGHT_FLOOR));
    Ok((w, q))
}

/// Handles to the interesting nodes of one recorded forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub f_ref: Var,
    pub f_dst: Var,
    pub f_jnd: Var,
    pub fused: Var,
    pub w: Var,
    pub q: Var,
}

/// Records the full per-quad forward pass of `batch` on `tape`.
pub fn record_forward<T: Scalar>(
    tape: &mut Tape<'_, T>,
    cfg: &NetworkConfig,
    batch: &QuadBatch<T>,
) -> Result<ForwardVars> {
    let r = tape.input(batch.reference.clone());
    let d = tape.input(batch.distorted.clone());
    let j = tape.input(batch.jnd.clone());
    let f_sal = if cfg.toggles.enable_saliency_fusion {
        let s = tape.input(batch.saliency.clone());
        Some(sal_subnet(tape, cfg, s)?)
    } else {
        None
    };
    let f_ref = img_subnet(tape, cfg, "img", r, f_sal)?;
    let f_dst = img_subnet(tape, cfg, "img", d, f_sal)?;
    let f_jnd = jnd_subnet(tape, cfg, j, f_sal)?;
    let fused = fuse(tape, f_ref, f_dst, f_jnd)?;
    let (w, q) = heads(tape, cfg, fused)?;
    Ok(ForwardVars {
        f_ref,
        f_dst,
        f_jnd,
        fused,
        w,
        q,
    })
}

/// `S = sum(w_i q_i) / sum(w_j)`.
pub fn pool_score(w: &[f64], q: &[f64]) -> Result<f64> {
    if w.len() != q.len() {
        return Err(Error::Invalid(format!(
            "{} weights for {} qualities",
            w.len(),
            q.len()
        )));
    }
    if w.is_empty() {
        return Err(Error::Invalid("score pooling over zero patches".into()));
    }
    let wh = normalize_weights(w)?;
    Ok(wh.iter().zip(q).map(|(a, b)| a * b).sum())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub weights: Vec<f64>,
    pub qualities: Vec<f64>,
    pub score: f64,
    pub origins: Vec<(usize, usize)>,
    pub patch_size: usize,
}

/// Quads per tape during inference.
pub const INFERENCE_CHUNK: usize = 32;

/// Scores one image from its quads (inference, no gradients).
pub fn forward_image(
    cfg: &NetworkConfig,
    params: &ParameterSet,
    quads: &[PatchQuad],
    exec: Exec,
) -> Result<ForwardOutput> {
    if quads.is_empty() {
        return Err(Error::Invalid(
            "forward_image needs at least one quad".into(),
        ));
    }
    let chunks: Vec<Vec<&PatchQuad>> = quads
        .chunks(INFERENCE_CHUNK)
        .map(|c| c.iter().collect())
        .collect();
    let parts = exec.try_map(&chunks, |_, chunk| -> Result<(Vec<f64>, Vec<f64>)> {
        let batch = QuadBatch::<f32>::from_quads(chunk)?;
        let mut tape = Tape::with_params(params, false);
        let v = record_forward(&mut tape, cfg, &batch)?;
        let as64 = |t: &Tensor| t.data().iter().map(|&x| x as f64).collect::<Vec<_>>();
        Ok((as64(tape.value(v.w)), as64(tape.value(v.q))))
    })?;
    let (mut weights, mut qualities) = (Vec::new(), Vec::new());
    for (w, q) in parts {
        weights.extend(w);
        qualities.extend(q);
    }
    let score = pool_score(&weights, &qualities)?;
    if !score.is_finite() {
        return Err(Error::NonFinite {
            component: "score".into(),
            detail: format!("pooled score {score}"),
        });
    }
    Ok(ForwardOutput {
        weights,
        qualities,
        score,
        origins: quads.iter().map(|q| q.origin).collect(),
        patch_size: quads[0].size(),
    })
}
