//! Convolutional GRU over the time axis of `[N, Ci, X, Y, Z, T]` input.
//!
//! ```text
//! z   = sigmoid(W_z * x + U_z * h + b_z)
//! r   = sigmoid(W_r * x + U_r * h + b_r)
//! c   = tanh(W_h * x + U_h * (r . h) + b_h)
//! h'  = (1 - z) . h + z . c
//! ```
//!
//! `*` is a 3D convolution with stride 1 and same padding; `.` is elementwise.

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{ConvPath, ConvSpec};
use crate::tensor::{Real, Rng, Tensor};

/// Parameter names within a cell, in storage order.
pub const GRU_PARAM_NAMES: [&str; 9] = ["w_z", "u_z", "w_r", "u_r", "w_h", "u_h", "b_z", "b_r", "b_h"];

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ConvGruCell {
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub kernel: usize,
}

/// The nine cell parameters bound into a graph.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_z: Var,
    pub u_z: Var,
    pub w_r: Var,
    pub u_r: Var,
    pub w_h: Var,
    pub u_h: Var,
    pub b_z: Var,
    pub b_r: Var,
    pub b_h: Var,
}

impl GruVars {
    /// Takes vars in [`GRU_PARAM_NAMES`] order.
    pub fn from_slice(v: &[Var]) -> Result<Self> {
        if v.len() != 9 {
            return Err(Error::invalid(format!("a GRU cell has 9 parameters, got {}", v.len())));
        }
        Ok(GruVars {
            w_z: v[0],
            u_z: v[1],
            w_r: v[2],
            u_r: v[3],
            w_h: v[4],
            u_h: v[5],
            b_z: v[6],
            b_r: v[7],
            b_h: v[8],
        })
    }
}

impl ConvGruCell {
    pub fn new(in_channels: usize, hidden_channels: usize, kernel: usize) -> Result<Self> {
        if in_channels == 0 || hidden_channels == 0 {
            return Err(Error::invalid("GRU channel counts must be >= 1"));
        }
        if kernel % 2 == 0 {
            return Err(Error::invalid(format!("GRU kernel must be odd, got {kernel}")));
        }
        Ok(ConvGruCell {
            in_channels,
            hidden_channels,
            kernel,
        })
    }

    pub fn input_spec(&self) -> ConvSpec {
        ConvSpec::cubic(3, self.in_channels, self.hidden_channels, self.kernel, 1, self.kernel / 2, true)
    }

    pub fn hidden_spec(&self) -> ConvSpec {
        ConvSpec::cubic(3, self.hidden_channels, self.hidden_channels, self.kernel, 1, self.kernel / 2, false)
    }

    /// Shapes in [`GRU_PARAM_NAMES`] order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let w = self.input_spec().weight_dims();
        let u = self.hidden_spec().weight_dims();
        let b = vec![self.hidden_channels];
        vec![w.clone(), u.clone(), w.clone(), u.clone(), w, u, b.clone(), b.clone(), b]
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|d| d.iter().product::<usize>()).sum()
    }

    /// Adds He-initialized weights and zero biases as `{prefix}.{name}`;
    /// returns the slot indices.
    pub fn init_params<T: Real>(&self, prefix: &str, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<Vec<usize>> {
        let mut slots = Vec::with_capacity(9);
        for (name, dims) in GRU_PARAM_NAMES.iter().zip(self.param_shapes()) {
            let value = if name.starts_with('b') {
                Tensor::zeros(&dims)?
            } else {
                let fan_in: usize = dims[1..].iter().product();
                rng.normal_tensor(&dims, 0.0, (2.0 / fan_in as f64).sqrt())?
            };
            slots.push(store.add(format!("{prefix}.{name}"), value, true)?);
        }
        Ok(slots)
    }

    fn check(&self, x: &[usize], h: &[usize]) -> Result<()> {
        if x.len() != 5 || h.len() != 5 || x[0] != h[0] || x[2..] != h[2..] {
            return Err(Error::shape(format!(
                "GRU step needs x [N, Ci, X, Y, Z] and h [N, Ch, X, Y, Z] with equal N and extents, got {x:?} and {h:?}"
            )));
        }
        if x[1] != self.in_channels || h[1] != self.hidden_channels {
            return Err(Error::shape(format!(
                "GRU cell expects {} input and {} hidden channels, got {} and {}",
                self.in_channels, self.hidden_channels, x[1], h[1]
            )));
        }
        Ok(())
    }

    pub fn step<T: Real>(&self, g: &mut Graph<T>, p: &GruVars, x: Var, h: Var) -> Result<Var> {
        self.check(g.value(x).dims(), g.value(h).dims())?;
        let (xs, hs) = (self.input_spec(), self.hidden_spec());
        let path = ConvPath::Im2col;
        let gate = |g: &mut Graph<T>, w: Var, b: Var, u: Var, hin: Var| -> Result<Var> {
            let a = g.conv(x, w, Some(b), &xs, path)?;
            let c = g.conv(hin, u, None, &hs, path)?;
            g.add(a, c)
        };
        let z = gate(g, p.w_z, p.b_z, p.u_z, h)?;
        let z = g.sigmoid(z);
        let r = gate(g, p.w_r, p.b_r, p.u_r, h)?;
        let r = g.sigmoid(r);
        let rh = g.mul(r, h)?;
        let c = gate(g, p.w_h, p.b_h, p.u_h, rh)?;
        let c = g.tanh(c);
        // (1 - z) h + z c, written as h + z (c - h).
        let d = g.sub(c, h)?;
        let zd = g.mul(z, d)?;
        g.add(h, zd)
    }

    /// Folds [`ConvGruCell::step`] over `t = 0..T` from a zero state and
    /// returns the final hidden state `[N, Ch, X, Y, Z]`.
    pub fn sequence<T: Real>(&self, g: &mut Graph<T>, p: &GruVars, x: Var) -> Result<Var> {
        let dims = g.value(x).dims().to_vec();
        if dims.len() != 6 {
            return Err(Error::shape(format!("GRU sequence needs [N, Ci, X, Y, Z, T], got {dims:?}")));
        }
        let mut hdims = dims[..5].to_vec();
        hdims[1] = self.hidden_channels;
        let mut h = g.constant(Tensor::zeros(&hdims)?);
        for t in 0..dims[5] {
            let xt = g.select(x, 5, t)?;
            h = self.step(g, p, xt, h)?;
        }
        Ok(h)
    }
}

fn bind_weights<T: Real>(g: &mut Graph<T>, weights: &[Tensor<T>]) -> Result<GruVars> {
    let vars: Vec<Var> = weights.iter().map(|w| g.constant(w.clone())).collect();
    GruVars::from_slice(&vars)
}

/// One step on plain tensors; `weights` in [`GRU_PARAM_NAMES`] order.
pub fn gru_step<T: Real>(cell: &ConvGruCell, weights: &[Tensor<T>], x: &Tensor<T>, h: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::inference();
    let p = bind_weights(&mut g, weights)?;
    let (x, h) = (g.constant(x.clone()), g.constant(h.clone()));
    let out = cell.step(&mut g, &p, x, h)?;
    Ok(g.value(out).clone())
}

pub fn gru_sequence<T: Real>(cell: &ConvGruCell, weights: &[Tensor<T>], x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::inference();
    let p = bind_weights(&mut g, weights)?;
    let x = g.constant(x.clone());
    let out = cell.sequence(&mut g, &p, x)?;
    Ok(g.value(out).clone())
}
