//! The four classifiers sharing one DenseNet-style core.
//!
//! Every variant is `front end -> initial conv -> dense blocks separated by
//! transitions -> global average pool -> fully connected (2 outputs)`.

mod preprocess;
mod spec;

pub use preprocess::{mean_std_volumes, stack_time_as_channels};
pub use spec::{ModelSpec, Variant};

use crate::autodiff::{gradcheck, GradcheckConfig, GradcheckReport, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::gru::{ConvGruCell, GruVars};
use crate::nn::{BatchNormConfig, ConvPath, ConvSpec, Mode, PoolSpec};
use crate::tensor::{Real, Rng, Tensor};

/// Slots of a convolution's parameters in the model's [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub spec: ConvSpec,
    pub weight: usize,
    pub bias: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormLayer {
    pub channels: usize,
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: usize,
    pub running_var: usize,
}

/// `batch_norm -> relu -> conv`; the norm is absent when disabled in the spec.
#[derive(Clone, Debug, PartialEq)]
pub struct Composite {
    pub norm: Option<NormLayer>,
    pub conv: ConvLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Front {
    TimeAsChannels,
    MeanStd,
    Recurrent { cell: ConvGruCell, slots: Vec<usize> },
    /// The crop is passed on unchanged as a one-channel 4D map.
    Volume4d,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Front(Front),
    Conv(ConvLayer),
    DenseBlock {
        in_channels: usize,
        out_channels: usize,
        layers: Vec<Composite>,
    },
    Transition {
        step: Composite,
        pool: PoolSpec,
    },
    GlobalAvgPool,
    FullyConnected {
        in_features: usize,
        out_features: usize,
        weight: usize,
        bias: usize,
    },
}

#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub spec: ModelSpec,
    pub layers: Vec<Layer>,
    pub params: ParamStore<T>,
}

/// Logits plus the running statistics a training-mode pass produced,
/// as `(slot, new value)` pairs.
pub struct ForwardOutput<T: Real> {
    pub logits: Var,
    pub running_updates: Vec<(usize, Tensor<T>)>,
}

struct Builder<'a, T: Real> {
    store: &'a mut ParamStore<T>,
    rng: Rng,
    batch_norm: bool,
}

impl<T: Real> Builder<'_, T> {
    fn he(&mut self, name: String, dims: &[usize], fan_in: usize) -> Result<usize> {
        let w = self.rng.normal_tensor(dims, 0.0, (2.0 / fan_in as f64).sqrt())?;
        self.store.add(name, w, true)
    }

    fn conv(&mut self, prefix: &str, spec: ConvSpec) -> Result<ConvLayer> {
        let dims = spec.weight_dims();
        let weight = self.he(format!("{prefix}.weight"), &dims, dims[1..].iter().product())?;
        let bias = if spec.bias {
            Some(self.store.add(format!("{prefix}.bias"), Tensor::zeros(&[spec.out_channels])?, true)?)
        } else {
            None
        };
        Ok(ConvLayer { spec, weight, bias })
    }

    fn norm(&mut self, prefix: &str, channels: usize) -> Result<Option<NormLayer>> {
        if !self.batch_norm {
            return Ok(None);
        }
        let c = [channels];
        Ok(Some(NormLayer {
            channels,
            gamma: self.store.add(format!("{prefix}.gamma"), Tensor::ones(&c)?, true)?,
            beta: self.store.add(format!("{prefix}.beta"), Tensor::zeros(&c)?, true)?,
            running_mean: self.store.add(format!("{prefix}.running_mean"), Tensor::zeros(&c)?, false)?,
            running_var: self.store.add(format!("{prefix}.running_var"), Tensor::ones(&c)?, false)?,
        }))
    }
}

/// Builds a model with He-initialized weights drawn from `spec.seed`.
pub fn build<T: Real>(spec: &ModelSpec) -> Result<Model<T>> {
    spec.validate()?;
    let mut store = ParamStore::new();
    let mut b = Builder {
        store: &mut store,
        rng: Rng::new(spec.seed),
        batch_norm: spec.batch_norm,
    };
    let rank = spec.variant.core_rank();
    let k = spec.kernel;
    // A bias directly ahead of batch norm is cancelled by the mean
    // subtraction, so convs only carry one when normalization is off.
    let bias = !spec.batch_norm;
    let mut layers = Vec::new();

    let front = match spec.variant {
        Variant::Cnn3dTc => Front::TimeAsChannels,
        Variant::Cnn3dMs => Front::MeanStd,
        Variant::Cnn4d => Front::Volume4d,
        Variant::ConvGruCnn3d => {
            let cell = ConvGruCell::new(1, spec.gru_hidden, k)?;
            let slots = cell.init_params("gru", b.store, &mut b.rng)?;
            Front::Recurrent { cell, slots }
        }
    };
    layers.push(Layer::Front(front));

    let mut extents: Vec<usize> = spec.crop[..rank].to_vec();
    let mut stride = vec![spec.initial_stride; rank];
    if rank == 4 {
        stride[3] = 1;
    }
    let stem = ConvSpec {
        rank,
        in_channels: spec.core_input_channels(),
        out_channels: spec.initial_filters,
        kernel: vec![k; rank],
        stride,
        padding: vec![k / 2; rank],
        bias,
    };
    extents = stem.output_extents(&extents)?;
    layers.push(Layer::Conv(b.conv("stem.conv", stem)?));

    let mut channels = spec.initial_filters;
    for block in 0..spec.blocks {
        let in_channels = channels;
        let mut composites = Vec::with_capacity(spec.layers_per_block);
        for l in 0..spec.layers_per_block {
            let prefix = format!("block{block}.layer{l}");
            let norm = b.norm(&format!("{prefix}.bn"), channels)?;
            let conv = b.conv(
                &format!("{prefix}.conv"),
                ConvSpec::cubic(rank, channels, spec.growth_rate, k, 1, k / 2, bias),
            )?;
            composites.push(Composite { norm, conv });
            channels += spec.growth_rate;
        }
        layers.push(Layer::DenseBlock {
            in_channels,
            out_channels: channels,
            layers: composites,
        });
        if block + 1 < spec.blocks {
            let prefix = format!("transition{block}");
            let out = ((channels as f64 * spec.compression).floor() as usize).max(1);
            let norm = b.norm(&format!("{prefix}.bn"), channels)?;
            let conv = b.conv(&format!("{prefix}.conv"), ConvSpec::cubic(rank, channels, out, 1, 1, 0, bias))?;
            // Window 2 on every axis, shrunk to 1 where the map is already a single voxel.
            let window: Vec<usize> = extents.iter().map(|&e| e.min(2)).collect();
            let pool = PoolSpec {
                stride: window.clone(),
                window,
            };
            extents = pool.output_extents(&extents)?;
            layers.push(Layer::Transition {
                step: Composite { norm, conv },
                pool,
            });
            channels = out;
        }
    }

    layers.push(Layer::GlobalAvgPool);
    let weight = b.he("head.fc.weight".into(), &[channels, 2], channels)?;
    let bias = b.store.add("head.fc.bias", Tensor::zeros(&[2])?, true)?;
    layers.push(Layer::FullyConnected {
        in_features: channels,
        out_features: 2,
        weight,
        bias,
    });
    Ok(Model {
        spec: spec.clone(),
        layers,
        params: store,
    })
}

struct Pass<'g, 'v, T: Real> {
    g: &'g mut Graph<T>,
    vars: &'v [Var],
    mode: Mode,
    updates: Vec<(usize, Tensor<T>)>,
}

impl<T: Real> Pass<'_, '_, T> {
    fn conv(&mut self, layer: &ConvLayer, x: Var) -> Result<Var> {
        let bias = layer.bias.map(|s| self.vars[s]);
        self.g.conv(x, self.vars[layer.weight], bias, &layer.spec, ConvPath::Im2col)
    }

    fn composite(&mut self, c: &Composite, x: Var) -> Result<Var> {
        let mut h = x;
        if let Some(n) = &c.norm {
            let v = self.vars;
            let (y, running) = self.g.batch_norm(
                h,
                v[n.gamma],
                v[n.beta],
                v[n.running_mean],
                v[n.running_var],
                self.mode,
                BatchNormConfig::default(),
            )?;
            if let Some((m, var)) = running {
                self.updates.push((n.running_mean, m));
                self.updates.push((n.running_var, var));
            }
            h = y;
        }
        let h = self.g.relu(h);
        self.conv(&c.conv, h)
    }
}

impl<T: Real> Model<T> {
    pub fn build(spec: &ModelSpec) -> Result<Self> {
        build(spec)
    }

    /// Trainable scalar count.
    pub fn param_count(&self) -> usize {
        self.params.trainable_numel()
    }

    /// Expected crop shape for a batch of `n`.
    pub fn input_dims(&self, n: usize) -> Vec<usize> {
        let c = self.spec.crop;
        vec![n, 1, c[0], c[1], c[2], c[3]]
    }

    /// Records the forward pass in `g`. `vars` are the bound parameters
    /// (see [`ParamStore::bind`]) and `x` a crop batch `[N, 1, X, Y, Z, T]`.
    pub fn forward(&self, g: &mut Graph<T>, vars: &[Var], x: &Tensor<T>, mode: Mode) -> Result<ForwardOutput<T>> {
        if vars.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "model has {} parameters, {} vars bound",
                self.params.len(),
                vars.len()
            )));
        }
        let want = self.input_dims(x.dims().first().copied().unwrap_or(0));
        if x.dims() != want.as_slice() {
            return Err(Error::shape(format!(
                "{} expects crops {want:?}, got {}",
                self.spec.variant,
                x.shape()
            )));
        }
        let mut pass = Pass {
            g,
            vars,
            mode,
            updates: Vec::new(),
        };
        let mut h: Option<Var> = None;
        for layer in &self.layers {
            let next = match layer {
                Layer::Front(front) => match front {
                    Front::TimeAsChannels => pass.g.constant(stack_time_as_channels(x)?),
                    Front::MeanStd => pass.g.constant(mean_std_volumes(x)?),
                    Front::Volume4d => pass.g.constant(x.clone()),
                    Front::Recurrent { cell, slots } => {
                        let p: Vec<Var> = slots.iter().map(|&s| vars[s]).collect();
                        let p = GruVars::from_slice(&p)?;
                        let xv = pass.g.constant(x.clone());
                        cell.sequence(pass.g, &p, xv)?
                    }
                },
                Layer::Conv(c) => pass.conv(c, current(h)?)?,
                Layer::DenseBlock { layers, .. } => {
                    let mut cat = current(h)?;
                    for c in layers {
                        let y = pass.composite(c, cat)?;
                        cat = pass.g.concat(&[cat, y], 1)?;
                    }
                    cat
                }
                Layer::Transition { step, pool } => {
                    let y = pass.composite(step, current(h)?)?;
                    pass.g.avg_pool(y, pool)?
                }
                Layer::GlobalAvgPool => pass.g.global_avg_pool(current(h)?)?,
                Layer::FullyConnected { weight, bias, .. } => {
                    pass.g.fully_connected(current(h)?, vars[*weight], vars[*bias])?
                }
            };
            h = Some(next);
        }
        Ok(ForwardOutput {
            logits: current(h)?,
            running_updates: pass.updates,
        })
    }

    /// Eval-mode logits `[N, 2]`; never touches parameters or running stats.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let vars = self.params.bind(&mut g);
        let out = self.forward(&mut g, &vars, x, Mode::Eval)?;
        Ok(g.value(out.logits).clone())
    }

    pub fn apply_running_updates(&mut self, updates: Vec<(usize, Tensor<T>)>) -> Result<()> {
        for (slot, value) in updates {
            self.params.set(slot, value)?;
        }
        Ok(())
    }

    /// Ranks of every convolution in the model, the GRU's included.
    pub fn conv_ranks(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Front(Front::Recurrent { .. }) => out.extend([3; 6]),
                Layer::Conv(c) => out.push(c.spec.rank),
                Layer::DenseBlock { layers, .. } => out.extend(layers.iter().map(|c| c.conv.spec.rank)),
                Layer::Transition { step, .. } => out.push(step.conv.spec.rank),
                _ => {}
            }
        }
        out
    }

    pub fn recurrent_cells(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, Layer::Front(Front::Recurrent { .. })))
            .count()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            layers: self.layers.clone(),
            params: self.params.cast(),
        }
    }
}

fn current(h: Option<Var>) -> Result<Var> {
    h.ok_or_else(|| Error::invalid("model layer list must start with a front end"))
}

/// A tiny spec for gradient checks and tests: 6^3 volumes, 3 time steps.
pub fn micro_spec(variant: Variant, seed: u64) -> ModelSpec {
    ModelSpec {
        variant,
        initial_filters: 3,
        growth_rate: 2,
        layers_per_block: 2,
        blocks: 2,
        compression: 0.5,
        batch_norm: true,
        gru_hidden: 2,
        kernel: 3,
        initial_stride: 1,
        crop: [6, 6, 6, 3],
        seed,
    }
}

/// End-to-end gradient check of `spec` (64-bit) on a two-crop batch with
/// one label per class, training-mode batch norm.
pub fn gradcheck_model(spec: &ModelSpec, config: &GradcheckConfig) -> Result<GradcheckReport> {
    let m = build::<f64>(spec)?;
    let c = spec.crop;
    let x = Rng::new(spec.seed ^ 0x9e37_79b9).normal_tensor(&[2, 1, c[0], c[1], c[2], c[3]], 0.0, 1.0)?;
    gradcheck(
        &m.params,
        |g, v| {
            let out = m.forward(g, v, &x, Mode::Train)?;
            g.softmax_cross_entropy(out.logits, &[0, 1])
        },
        config,
    )
}
