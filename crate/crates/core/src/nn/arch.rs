//! Architecture descriptions: parameter layouts and forward computations for
//! the U-Net, SegNet, residual U-Net and ensemble families.

use std::fmt;

use super::params::{Init, ParamSpec, ParamStore};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Element, Graph, Padding, Var};

const MAX_KERNEL: usize = 31;
const MAX_CHANNELS: usize = 4096;
const MAX_META_LAYERS: usize = 64;

/// Encoder/decoder shape shared by the U-Net style families and SegNet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResUNetConfig {
    /// Odd spatial kernel size of every feature convolution.
    pub kernel_size: usize,
    /// Number of encoder levels (each halves the resolution).
    pub depth: usize,
    /// Channels at the first level; doubled per level.
    pub base_filters: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for ResUNetConfig {
    fn default() -> Self {
        ResUNetConfig {
            kernel_size: 3,
            depth: 3,
            base_filters: 16,
            in_channels: 1,
            out_channels: 1,
        }
    }
}

impl ResUNetConfig {
    pub fn with_kernel(kernel_size: usize) -> Self {
        ResUNetConfig {
            kernel_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size < 3 || self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel_size must be an odd integer >= 3, got {}",
                self.kernel_size
            )));
        }
        if self.depth < 2 {
            return Err(Error::Config(format!("depth must be >= 2, got {}", self.depth)));
        }
        if self.depth > 12 {
            return Err(Error::Config(format!("depth {} is unreasonably large", self.depth)));
        }
        if self.kernel_size > MAX_KERNEL {
            return Err(Error::Config(format!("kernel_size {} exceeds {MAX_KERNEL}", self.kernel_size)));
        }
        for (name, v) in [
            ("base_filters", self.base_filters),
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
        ] {
            if v == 0 || v > MAX_CHANNELS {
                return Err(Error::Config(format!("{name} must be in 1..={MAX_CHANNELS}, got {v}")));
            }
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_filters << level
    }
}

/// Settings of the stacked ensemble.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnsembleConfig {
    /// Depth and width shared by every base; its kernel size is ignored.
    pub base: ResUNetConfig,
    pub base_kernel_sizes: Vec<usize>,
    pub meta_channels: usize,
    /// Hidden 3x3 conv layers before the 1x1 head.
    pub meta_hidden_layers: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            base: ResUNetConfig::default(),
            base_kernel_sizes: vec![3, 5, 7, 9],
            meta_channels: 16,
            meta_hidden_layers: 2,
        }
    }
}

impl EnsembleConfig {
    pub fn base_configs(&self) -> Vec<ResUNetConfig> {
        self.base_kernel_sizes
            .iter()
            .map(|&k| ResUNetConfig {
                kernel_size: k,
                ..self.base
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_kernel_sizes.len() < 2 {
            return Err(Error::Config(format!(
                "an ensemble needs at least 2 bases, got {}",
                self.base_kernel_sizes.len()
            )));
        }
        for cfg in self.base_configs() {
            cfg.validate()?;
        }
        if self.meta_channels == 0 || self.meta_hidden_layers == 0 {
            return Err(Error::Config("meta block needs >= 1 hidden layer and >= 1 channel".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    UNet,
    SegNet,
    ResUNet,
    Ensemble,
    /// Single 1x1 convolution and sigmoid. Handy as an evaluation fixture.
    Logistic,
}

impl Family {
    pub fn tag(self) -> &'static str {
        match self {
            Family::UNet => "unet",
            Family::SegNet => "segnet",
            Family::ResUNet => "resunet",
            Family::Ensemble => "ensemble",
            Family::Logistic => "logistic",
        }
    }

    pub fn parse(tag: &str) -> Result<Family> {
        Ok(match tag {
            "unet" => Family::UNet,
            "segnet" => Family::SegNet,
            "resunet" => Family::ResUNet,
            "ensemble" => Family::Ensemble,
            "logistic" => Family::Logistic,
            other => return Err(Error::Config(format!("unknown model family {other:?}"))),
        })
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Architecture {
    UNet(ResUNetConfig),
    SegNet(ResUNetConfig),
    ResUNet(ResUNetConfig),
    Ensemble {
        bases: Vec<Architecture>,
        meta_channels: usize,
        meta_hidden_layers: usize,
    },
    Logistic,
}

/// Two same-padded convolutions, optionally wrapped in a residual shortcut:
///
/// * plain:    `relu(conv2(relu(conv1(x))))`
/// * residual: `relu(conv2(relu(conv1(x))) + shortcut(x))`, where the
///   shortcut is the identity when channel counts agree and a 1x1
///   convolution otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvBlock {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub residual: bool,
}

impl ConvBlock {
    pub fn new(in_channels: usize, out_channels: usize, kernel_size: usize, residual: bool) -> Result<Self> {
        if kernel_size % 2 == 0 {
            return Err(Error::Config(format!("block kernel must be odd, got {kernel_size}")));
        }
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::Config("block channel counts must be >= 1".into()));
        }
        Ok(ConvBlock {
            in_channels,
            out_channels,
            kernel_size,
            residual,
        })
    }

    fn has_projection(&self) -> bool {
        self.residual && self.in_channels != self.out_channels
    }

    pub fn param_specs(&self, prefix: &str, out: &mut Vec<ParamSpec>) {
        let k = self.kernel_size;
        conv_specs(out, &format!("{prefix}conv1"), self.in_channels, self.out_channels, k, 2.0);
        conv_specs(out, &format!("{prefix}conv2"), self.out_channels, self.out_channels, k, 2.0);
        if self.has_projection() {
            conv_specs(out, &format!("{prefix}shortcut"), self.in_channels, self.out_channels, 1, 1.0);
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, scope: &Scope<'_>, x: Var) -> Result<Var> {
        let h = scope.conv(g, "conv1", x)?;
        let h = g.relu(h);
        let h = scope.conv(g, "conv2", h)?;
        if !self.residual {
            return Ok(g.relu(h));
        }
        let skip = if self.has_projection() {
            scope.conv(g, "shortcut", x)?
        } else {
            x
        };
        let sum = g.add(h, skip)?;
        Ok(g.relu(sum))
    }
}

fn conv_specs(out: &mut Vec<ParamSpec>, name: &str, cin: usize, cout: usize, k: usize, gain: f32) {
    out.push(ParamSpec {
        name: format!("{name}.weight"),
        shape: vec![cout, cin, k, k],
        init: Init::FanIn {
            fan_in: cin * k * k,
            gain,
        },
    });
    out.push(ParamSpec {
        name: format!("{name}.bias"),
        shape: vec![cout],
        init: Init::Zeros,
    });
}

fn up_specs(out: &mut Vec<ParamSpec>, name: &str, cin: usize, cout: usize) {
    out.push(ParamSpec {
        name: format!("{name}.weight"),
        shape: vec![cin, cout, 2, 2],
        init: Init::FanIn { fan_in: cin, gain: 1.0 },
    });
    out.push(ParamSpec {
        name: format!("{name}.bias"),
        shape: vec![cout],
        init: Init::Zeros,
    });
}

/// Name-prefixed view of a parameter store used during a forward pass.
pub struct Scope<'a> {
    params: &'a ParamStore,
    prefix: String,
    overrides: &'a [(String, Var)],
}

impl<'a> Scope<'a> {
    pub fn new(params: &'a ParamStore, prefix: impl Into<String>) -> Self {
        Scope {
            params,
            prefix: prefix.into(),
            overrides: &[],
        }
    }

    /// A scope in which the named parameters resolve to existing graph
    /// variables instead of being bound from the store.
    pub fn with_overrides(params: &'a ParamStore, prefix: impl Into<String>, overrides: &'a [(String, Var)]) -> Self {
        Scope {
            params,
            prefix: prefix.into(),
            overrides,
        }
    }

    pub fn child(&self, name: &str) -> Scope<'a> {
        Scope {
            params: self.params,
            prefix: format!("{}{name}.", self.prefix),
            overrides: self.overrides,
        }
    }

    pub fn bind<T: Element>(&self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        let full = format!("{}{name}", self.prefix);
        if let Some((_, v)) = self.overrides.iter().find(|(n, _)| *n == full) {
            return Ok(*v);
        }
        let t = self
            .params
            .get(&full)
            .ok_or_else(|| Error::Config(format!("missing parameter {full:?}")))?;
        Ok(g.param(&full, t))
    }

    /// Stride-1 "same" convolution using `{name}.weight` / `{name}.bias`.
    pub fn conv<T: Element>(&self, g: &mut Graph<T>, name: &str, x: Var) -> Result<Var> {
        let w = self.bind(g, &format!("{name}.weight"))?;
        let b = self.bind(g, &format!("{name}.bias"))?;
        g.conv2d(x, w, b, 1, Padding::Same)
    }

    pub fn up<T: Element>(&self, g: &mut Graph<T>, name: &str, x: Var) -> Result<Var> {
        let w = self.bind(g, &format!("{name}.weight"))?;
        let b = self.bind(g, &format!("{name}.bias"))?;
        g.conv2d_transpose(x, w, b, 2)
    }
}

impl Architecture {
    pub fn family(&self) -> Family {
        match self {
            Architecture::UNet(_) => Family::UNet,
            Architecture::SegNet(_) => Family::SegNet,
            Architecture::ResUNet(_) => Family::ResUNet,
            Architecture::Ensemble { .. } => Family::Ensemble,
            Architecture::Logistic => Family::Logistic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Architecture::UNet(c) | Architecture::SegNet(c) | Architecture::ResUNet(c) => c.validate(),
            Architecture::Ensemble {
                bases,
                meta_channels,
                meta_hidden_layers,
            } => {
                if bases.len() < 2 {
                    return Err(Error::Config(format!(
                        "an ensemble needs at least 2 bases, got {}",
                        bases.len()
                    )));
                }
                if *meta_channels == 0
                    || *meta_hidden_layers == 0
                    || *meta_channels > MAX_CHANNELS
                    || *meta_hidden_layers > MAX_META_LAYERS
                {
                    return Err(Error::Config(format!(
                        "meta block needs 1..={MAX_META_LAYERS} hidden layers of 1..={MAX_CHANNELS} channels"
                    )));
                }
                for b in bases {
                    if matches!(b, Architecture::Ensemble { .. }) {
                        return Err(Error::Config("ensembles cannot be nested".into()));
                    }
                    b.validate()?;
                    if b.in_channels() != 1 || b.out_channels() != 1 {
                        return Err(shape_err!(
                            "ensemble bases must map 1 channel to 1 channel, got {} -> {}",
                            b.in_channels(),
                            b.out_channels()
                        ));
                    }
                }
                Ok(())
            }
            Architecture::Logistic => Ok(()),
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            Architecture::UNet(c) | Architecture::SegNet(c) | Architecture::ResUNet(c) => c.in_channels,
            _ => 1,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            Architecture::UNet(c) | Architecture::SegNet(c) | Architecture::ResUNet(c) => c.out_channels,
            _ => 1,
        }
    }

    /// Input height and width must be multiples of this.
    pub fn spatial_divisor(&self) -> usize {
        match self {
            Architecture::UNet(c) | Architecture::SegNet(c) | Architecture::ResUNet(c) => 1 << c.depth,
            Architecture::Ensemble { bases, .. } => bases.iter().map(Architecture::spatial_divisor).max().unwrap_or(1),
            Architecture::Logistic => 1,
        }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        self.collect_specs("", &mut out);
        out
    }

    fn collect_specs(&self, prefix: &str, out: &mut Vec<ParamSpec>) {
        match self {
            Architecture::UNet(c) | Architecture::ResUNet(c) => {
                let residual = matches!(self, Architecture::ResUNet(_));
                let k = c.kernel_size;
                let mut cin = c.in_channels;
                for l in 0..c.depth {
                    let block = ConvBlock { in_channels: cin, out_channels: c.width(l), kernel_size: k, residual };
                    block.param_specs(&format!("{prefix}enc{l}."), out);
                    cin = c.width(l);
                }
                let bottleneck = ConvBlock { in_channels: cin, out_channels: c.width(c.depth), kernel_size: k, residual };
                bottleneck.param_specs(&format!("{prefix}bottleneck."), out);
                for l in (0..c.depth).rev() {
                    up_specs(out, &format!("{prefix}up{l}"), c.width(l + 1), c.width(l));
                    let block = ConvBlock {
                        in_channels: 2 * c.width(l),
                        out_channels: c.width(l),
                        kernel_size: k,
                        residual,
                    };
                    block.param_specs(&format!("{prefix}dec{l}."), out);
                }
                conv_specs(out, &format!("{prefix}head"), c.width(0), c.out_channels, 1, 1.0);
            }
            Architecture::SegNet(c) => {
                let k = c.kernel_size;
                let mut cin = c.in_channels;
                for l in 0..c.depth {
                    let plain = ConvBlock { in_channels: cin, out_channels: c.width(l), kernel_size: k, residual: false };
                    plain.param_specs(&format!("{prefix}enc{l}."), out);
                    cin = c.width(l);
                }
                for l in (0..c.depth).rev() {
                    let cout = if l == 0 { c.width(0) } else { c.width(l - 1) };
                    conv_specs(out, &format!("{prefix}dec{l}.conv1"), c.width(l), c.width(l), k, 2.0);
                    conv_specs(out, &format!("{prefix}dec{l}.conv2"), c.width(l), cout, k, 2.0);
                }
                conv_specs(out, &format!("{prefix}head"), c.width(0), c.out_channels, 1, 1.0);
            }
            Architecture::Ensemble {
                bases,
                meta_channels,
                meta_hidden_layers,
            } => {
                for (i, b) in bases.iter().enumerate() {
                    b.collect_specs(&format!("{prefix}base.{i}."), out);
                }
                let mut cin = bases.len();
                for l in 0..*meta_hidden_layers {
                    conv_specs(out, &format!("{prefix}meta.conv{l}"), cin, *meta_channels, 3, 2.0);
                    cin = *meta_channels;
                }
                conv_specs(out, &format!("{prefix}meta.head"), cin, 1, 1, 1.0);
            }
            Architecture::Logistic => conv_specs(out, &format!("{prefix}head"), 1, 1, 1, 1.0),
        }
    }

    fn check_input<T: Element>(&self, g: &Graph<T>, x: Var) -> Result<()> {
        let shape = g.shape(x);
        let [_, c, h, w] = *shape else {
            return Err(shape_err!("model input must be [N, C, H, W], got {shape:?}"));
        };
        if c != self.in_channels() {
            return Err(shape_err!(
                "{} expects {} input channel(s), got {c}",
                self.family(),
                self.in_channels()
            ));
        }
        let d = self.spatial_divisor();
        if h % d != 0 || w % d != 0 {
            return Err(shape_err!(
                "{} input {h}x{w} is not divisible by {d} (2^depth)",
                self.family()
            ));
        }
        Ok(())
    }

    /// Full forward pass, ending in a sigmoid.
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, scope: &Scope<'_>, x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        match self {
            Architecture::UNet(c) | Architecture::ResUNet(c) => {
                let residual = matches!(self, Architecture::ResUNet(_));
                let k = c.kernel_size;
                let mut skips = Vec::with_capacity(c.depth);
                let mut h = x;
                let mut cin = c.in_channels;
                for l in 0..c.depth {
                    let block = ConvBlock { in_channels: cin, out_channels: c.width(l), kernel_size: k, residual };
                    let feat = block.forward(g, &scope.child(&format!("enc{l}")), h)?;
                    skips.push(feat);
                    h = g.maxpool2d(feat)?.0;
                    cin = c.width(l);
                }
                let bottleneck = ConvBlock { in_channels: cin, out_channels: c.width(c.depth), kernel_size: k, residual };
                h = bottleneck.forward(g, &scope.child("bottleneck"), h)?;
                for l in (0..c.depth).rev() {
                    let up = scope.up(g, &format!("up{l}"), h)?;
                    let merged = g.concat_channels(up, skips[l])?;
                    let block = ConvBlock {
                        in_channels: 2 * c.width(l),
                        out_channels: c.width(l),
                        kernel_size: k,
                        residual,
                    };
                    h = block.forward(g, &scope.child(&format!("dec{l}")), merged)?;
                }
                let logits = scope.conv(g, "head", h)?;
                Ok(g.sigmoid(logits))
            }
            Architecture::SegNet(c) => {
                let k = c.kernel_size;
                let mut h = x;
                let mut cin = c.in_channels;
                let mut pools = Vec::with_capacity(c.depth);
                for l in 0..c.depth {
                    let plain = ConvBlock { in_channels: cin, out_channels: c.width(l), kernel_size: k, residual: false };
                    h = plain.forward(g, &scope.child(&format!("enc{l}")), h)?;
                    let size = (g.shape(h)[2], g.shape(h)[3]);
                    let (pooled, idx) = g.maxpool2d(h)?;
                    pools.push((idx, size));
                    h = pooled;
                    cin = c.width(l);
                }
                for l in (0..c.depth).rev() {
                    let (idx, size) = &pools[l];
                    h = g.max_unpool2d(h, idx, *size)?;
                    let dec = scope.child(&format!("dec{l}"));
                    h = dec.conv(g, "conv1", h)?;
                    h = g.relu(h);
                    h = dec.conv(g, "conv2", h)?;
                    h = g.relu(h);
                }
                let logits = scope.conv(g, "head", h)?;
                Ok(g.sigmoid(logits))
            }
            Architecture::Ensemble { bases, .. } => {
                let mut features: Option<Var> = None;
                for (i, base) in bases.iter().enumerate() {
                    let y = base.forward(g, &scope.child(&format!("base.{i}")), x)?;
                    features = Some(match features {
                        None => y,
                        Some(acc) => {
                            if g.shape(acc)[2..] != g.shape(y)[2..] {
                                return Err(shape_err!(
                                    "ensemble base {i} output {:?} does not match {:?}",
                                    g.shape(y),
                                    g.shape(acc)
                                ));
                            }
                            g.concat_channels(acc, y)?
                        }
                    });
                }
                let features = features.ok_or_else(|| Error::Config("ensemble without bases".into()))?;
                self.meta_forward(g, scope, features)
            }
            Architecture::Logistic => {
                let logits = scope.conv(g, "head", x)?;
                Ok(g.sigmoid(logits))
            }
        }
    }

    /// The ensemble's meta block applied to stacked base probability maps.
    pub fn meta_forward<T: Element>(&self, g: &mut Graph<T>, scope: &Scope<'_>, features: Var) -> Result<Var> {
        let Architecture::Ensemble {
            bases,
            meta_hidden_layers,
            ..
        } = self
        else {
            return Err(Error::Config(format!("{} has no meta block", self.family())));
        };
        if g.shape(features).get(1) != Some(&bases.len()) {
            return Err(shape_err!(
                "meta block expects {} stacked channels, got {:?}",
                bases.len(),
                g.shape(features)
            ));
        }
        let meta = scope.child("meta");
        let mut h = features;
        for l in 0..*meta_hidden_layers {
            h = meta.conv(g, &format!("conv{l}"), h)?;
            h = g.relu(h);
        }
        let logits = meta.conv(g, "head", h)?;
        Ok(g.sigmoid(logits))
    }

    /// `key=value` lines describing the architecture; inverse of
    /// [`Architecture::from_description`].
    pub fn describe(&self) -> String {
        match self {
            Architecture::UNet(c) | Architecture::SegNet(c) | Architecture::ResUNet(c) => format!(
                "family={}\nkernel_size={}\ndepth={}\nbase_filters={}\nin_channels={}\nout_channels={}\n",
                self.family(),
                c.kernel_size,
                c.depth,
                c.base_filters,
                c.in_channels,
                c.out_channels
            ),
            Architecture::Ensemble {
                bases,
                meta_channels,
                meta_hidden_layers,
            } => {
                let mut s = format!(
                    "family=ensemble\nbases={}\nmeta_channels={meta_channels}\nmeta_hidden_layers={meta_hidden_layers}\n",
                    bases.len()
                );
                for (i, b) in bases.iter().enumerate() {
                    for line in b.describe().lines() {
                        s.push_str(&format!("base.{i}.{line}\n"));
                    }
                }
                s
            }
            Architecture::Logistic => "family=logistic\n".to_string(),
        }
    }

    pub fn from_description(text: &str) -> Result<Architecture> {
        let pairs: Vec<(&str, &str)> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|l| {
                l.split_once('=')
                    .ok_or_else(|| Error::Config(format!("malformed architecture line {l:?}")))
            })
            .collect::<Result<_>>()?;
        let arch = parse_pairs(&pairs, "")?;
        arch.validate()?;
        Ok(arch)
    }
}

fn parse_pairs(pairs: &[(&str, &str)], prefix: &str) -> Result<Architecture> {
    let get = |key: &str| -> Result<&str> {
        let full = format!("{prefix}{key}");
        pairs
            .iter()
            .find(|(k, _)| *k == full)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Config(format!("architecture description lacks {full:?}")))
    };
    let num = |key: &str| -> Result<usize> {
        let v = get(key)?;
        v.parse()
            .map_err(|_| Error::Config(format!("{prefix}{key}={v:?} is not a non-negative integer")))
    };
    let family = Family::parse(get("family")?)?;
    Ok(match family {
        Family::UNet | Family::SegNet | Family::ResUNet => {
            let cfg = ResUNetConfig {
                kernel_size: num("kernel_size")?,
                depth: num("depth")?,
                base_filters: num("base_filters")?,
                in_channels: num("in_channels")?,
                out_channels: num("out_channels")?,
            };
            match family {
                Family::UNet => Architecture::UNet(cfg),
                Family::SegNet => Architecture::SegNet(cfg),
                _ => Architecture::ResUNet(cfg),
            }
        }
        Family::Ensemble => {
            if !prefix.is_empty() {
                return Err(Error::Config("ensembles cannot be nested".into()));
            }
            let count = num("bases")?;
            if count > 64 {
                return Err(Error::Config(format!("implausible base count {count}")));
            }
            let bases = (0..count)
                .map(|i| parse_pairs(pairs, &format!("base.{i}.")))
                .collect::<Result<Vec<_>>>()?;
            Architecture::Ensemble {
                bases,
                meta_channels: num("meta_channels")?,
                meta_hidden_layers: num("meta_hidden_layers")?,
            }
        }
        Family::Logistic => Architecture::Logistic,
    })
}
