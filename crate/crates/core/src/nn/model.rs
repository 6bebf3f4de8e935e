use super::arch::{Architecture, ConvBlock, EnsembleConfig, Family, ResUNetConfig, Scope};
use super::params::{seeded_rng, ParamStore};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Element, Graph, Tensor, Var};

/// A segmentation network: an architecture plus its named parameters.
///
/// Every family maps `[N, 1, H, W]` to `[N, 1, H, W]` probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: Architecture,
    params: ParamStore,
}

impl Model {
    /// Builds `arch` with seeded fan-in initialization and zero biases.
    pub fn build(arch: Architecture, seed: u64) -> Result<Model> {
        arch.validate()?;
        let params = ParamStore::initialize(&arch.param_specs(), &mut seeded_rng(seed))?;
        Ok(Model { arch, params })
    }

    pub fn residual_unet(cfg: ResUNetConfig, seed: u64) -> Result<Model> {
        Self::build(Architecture::ResUNet(cfg), seed)
    }

    pub fn unet(cfg: ResUNetConfig, seed: u64) -> Result<Model> {
        Self::build(Architecture::UNet(cfg), seed)
    }

    pub fn segnet(cfg: ResUNetConfig, seed: u64) -> Result<Model> {
        Self::build(Architecture::SegNet(cfg), seed)
    }

    /// `sigmoid(weight * x + bias)` per pixel.
    pub fn logistic(weight: f32, bias: f32) -> Result<Model> {
        let mut m = Self::build(Architecture::Logistic, 0)?;
        m.params.get_mut("head.weight").expect("declared").data_mut()[0] = weight;
        m.params.get_mut("head.bias").expect("declared").data_mut()[0] = bias;
        Ok(m)
    }

    /// Stacks trained `bases` under a fresh convolutional meta block. Base
    /// parameters are copied in frozen; only `meta.*` is trainable.
    pub fn ensemble(bases: &[Model], cfg: &EnsembleConfig, seed: u64) -> Result<Model> {
        if bases.len() < 2 {
            return Err(Error::Config(format!(
                "an ensemble needs at least 2 bases, got {}",
                bases.len()
            )));
        }
        if cfg.meta_channels == 0 || cfg.meta_hidden_layers == 0 {
            return Err(Error::Config("meta block needs >= 1 hidden layer and >= 1 channel".into()));
        }
        let arch = Architecture::Ensemble {
            bases: bases.iter().map(|b| b.arch.clone()).collect(),
            meta_channels: cfg.meta_channels,
            meta_hidden_layers: cfg.meta_hidden_layers,
        };
        arch.validate()?;
        let mut model = Self::build(arch, seed)?;
        for (i, base) in bases.iter().enumerate() {
            for (name, t) in base.params.iter() {
                let slot = model
                    .params
                    .get_mut(&format!("base.{i}.{name}"))
                    .ok_or_else(|| shape_err!("base {i} parameter {name} has no slot"))?;
                if slot.shape() != t.shape() {
                    return Err(shape_err!("base {i} parameter {name} has shape {:?}", t.shape()));
                }
                slot.data_mut().copy_from_slice(t.data());
            }
        }
        model.params.set_trainable("base.*", false)?;
        Ok(model)
    }

    /// Reassembles a model from an architecture and a complete parameter set.
    pub fn from_parts(arch: Architecture, params: ParamStore) -> Result<Model> {
        arch.validate()?;
        let specs = arch.param_specs();
        if specs.len() != params.len() {
            return Err(shape_err!(
                "{} declares {} parameters but {} were supplied",
                arch.family(),
                specs.len(),
                params.len()
            ));
        }
        for (spec, (name, t)) in specs.iter().zip(params.iter()) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(shape_err!(
                    "expected parameter {} {:?}, found {name} {:?}",
                    spec.name,
                    spec.shape,
                    t.shape()
                ));
            }
        }
        Ok(Model { arch, params })
    }

    pub fn family(&self) -> Family {
        self.arch.family()
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn set_trainable(&mut self, pattern: &str, trainable: bool) -> Result<usize> {
        self.params.set_trainable(pattern, trainable)
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        self.arch.forward(g, &Scope::new(&self.params, ""), x)
    }

    /// Ensemble only: the meta block applied to `[N, bases, H, W]` stacked
    /// base outputs.
    pub fn meta_forward<T: Element>(&self, g: &mut Graph<T>, features: Var) -> Result<Var> {
        self.arch.meta_forward(g, &Scope::new(&self.params, ""), features)
    }

    /// Inference-mode forward pass.
    pub fn predict(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::<f32>::inference();
        let v = g.leaf(x);
        let y = self.forward(&mut g, v)?;
        Ok(g.tensor(y))
    }

    /// Copies of the ensemble's bases with their current parameters.
    pub fn bases(&self) -> Result<Vec<Model>> {
        let Architecture::Ensemble { bases, .. } = &self.arch else {
            return Err(Error::Config(format!("{} has no bases", self.family())));
        };
        bases
            .iter()
            .enumerate()
            .map(|(i, arch)| {
                let prefix = format!("base.{i}.");
                let mut params = ParamStore::new();
                for (name, t) in self.params.iter() {
                    if let Some(rest) = name.strip_prefix(&prefix) {
                        let mut t = t.clone();
                        t.requires_grad = true;
                        t.grad = None;
                        params.insert(rest, t)?;
                    }
                }
                Model::from_parts(arch.clone(), params)
            })
            .collect()
    }

    pub fn zero_grad(&mut self) {
        self.params.zero_grad();
    }

    /// Adds the gradients the graph computed for bound parameters into each
    /// parameter's `grad` buffer.
    pub fn accumulate_grads(&mut self, g: &Graph<f32>) -> Result<()> {
        for (name, var) in g.bindings() {
            if let Some(grad) = g.grad(*var) {
                let t = self
                    .params
                    .get_mut(name)
                    .ok_or_else(|| Error::Config(format!("graph bound unknown parameter {name:?}")))?;
                if t.requires_grad {
                    t.accumulate_grad(grad)?;
                }
            }
        }
        Ok(())
    }
}

/// A standalone residual block with its own parameters (`conv1`, `conv2`
/// and, when channel counts differ, a 1x1 `shortcut`).
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub block: ConvBlock,
    pub params: ParamStore,
}

impl ResidualBlock {
    pub fn new(in_channels: usize, out_channels: usize, kernel_size: usize, seed: u64) -> Result<Self> {
        let block = ConvBlock::new(in_channels, out_channels, kernel_size, true)?;
        let mut specs = Vec::new();
        block.param_specs("", &mut specs);
        let params = ParamStore::initialize(&specs, &mut seeded_rng(seed))?;
        Ok(ResidualBlock { block, params })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let c = g.shape(x).get(1).copied();
        if c != Some(self.block.in_channels) {
            return Err(shape_err!(
                "residual block expects {} input channels, got shape {:?}",
                self.block.in_channels,
                g.shape(x)
            ));
        }
        self.block.forward(g, &Scope::new(&self.params, ""), x)
    }
}
