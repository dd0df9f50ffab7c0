//! The coarse remapping field Ψ: `(u', v', z) → (o, s)`.
//!
//! Parameters live in one flat vector so the optimizer can treat every mode
//! alike. For the MLP each layer stores its weight matrix row-major
//! (`out × in`) followed by its bias.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldMode {
    /// Ψ ≡ (0, 0).
    None,
    /// One `(o, s)` pair shared by every vertex.
    GlobalAffine,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldConfig {
    pub mode: FieldMode,
    pub layers: usize,
    pub width: usize,
    /// Encoding degree for `u'` and `v'`.
    pub m: usize,
    /// Encoding degree for `z`.
    pub k: usize,
    pub sigma_init: f64,
}

impl FieldConfig {
    pub fn none() -> Self {
        FieldConfig {
            mode: FieldMode::None,
            ..Self::mlp_s()
        }
    }

    pub fn global_affine() -> Self {
        FieldConfig {
            mode: FieldMode::GlobalAffine,
            ..Self::mlp_s()
        }
    }

    pub fn mlp(layers: usize, width: usize, m: usize, k: usize) -> Self {
        FieldConfig {
            mode: FieldMode::Mlp,
            layers,
            width,
            m,
            k,
            sigma_init: 0.1,
        }
    }

    pub fn mlp_s() -> Self {
        Self::mlp(2, 16, 3, 5)
    }

    pub fn mlp_m() -> Self {
        Self::mlp(2, 32, 3, 5)
    }

    pub fn mlp_xl() -> Self {
        Self::mlp(4, 128, 6, 16)
    }

    /// Looks up a preset by its command-line name.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "none" => Ok(Self::none()),
            "affine" => Ok(Self::global_affine()),
            "mlp-s" => Ok(Self::mlp_s()),
            "mlp-m" => Ok(Self::mlp_m()),
            "mlp-xl" => Ok(Self::mlp_xl()),
            _ => Err(Error::InvalidArgument(format!(
                "unknown field preset {name:?} (expected none, affine, mlp-s, mlp-m or mlp-xl)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == FieldMode::Mlp && (self.layers == 0 || self.width == 0 || !(self.sigma_init > 0.0)) {
            return Err(Error::InvalidArgument(format!("invalid field config {self:?}")));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        2 * (2 * self.m + 1) + 2 * self.k + 1
    }

    /// `(inputs, outputs)` of every MLP layer.
    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.layers + 1);
        let mut fan_in = self.input_dim();
        for _ in 0..self.layers {
            shapes.push((fan_in, self.width));
            fan_in = self.width;
        }
        shapes.push((fan_in, 2));
        shapes
    }

    pub fn param_count(&self) -> usize {
        match self.mode {
            FieldMode::None => 0,
            FieldMode::GlobalAffine => 2,
            FieldMode::Mlp => self.layer_shapes().iter().map(|(i, o)| o * (i + 1)).sum(),
        }
    }
}

/// Flat parameter vector of Ψ.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldParams {
    pub values: Vec<f64>,
}

/// `(x, sin(2⁰πx), cos(2⁰πx), …, sin(2ⁿ⁻¹πx), cos(2ⁿ⁻¹πx))`.
pub fn positional_encode(x: f64, degree: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * degree + 1);
    out.push(x);
    for i in 0..degree {
        let a = (1u64 << i) as f64 * std::f64::consts::PI * x;
        out.push(a.sin());
        out.push(a.cos());
    }
    out
}

fn encode_derivative(x: f64, degree: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * degree + 1);
    out.push(1.0);
    for i in 0..degree {
        let f = (1u64 << i) as f64 * std::f64::consts::PI;
        out.push(f * (f * x).cos());
        out.push(-f * (f * x).sin());
    }
    out
}

/// Draws initial parameters. MLP entries are `N(0, σ_init²)`; the affine pair
/// starts at zero.
pub fn field_init(config: &FieldConfig, seed: u64) -> Result<FieldParams> {
    config.validate()?;
    let n = config.param_count();
    let values = match config.mode {
        FieldMode::Mlp => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, config.sigma_init).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        }
        _ => vec![0.0; n],
    };
    Ok(FieldParams { values })
}

fn check(params: &FieldParams, config: &FieldConfig) -> Result<()> {
    if params.values.len() != config.param_count() {
        return Err(Error::Shape(format!(
            "{} field parameters, config expects {}",
            params.values.len(),
            config.param_count()
        )));
    }
    Ok(())
}

fn encode(config: &FieldConfig, u: f64, v: f64, z: f64) -> Vec<f64> {
    let mut x = positional_encode(u, config.m);
    x.extend(positional_encode(v, config.m));
    x.extend(positional_encode(z, config.k));
    x
}

/// Post-activation values of every layer, input first.
fn mlp_forward(params: &[f64], config: &FieldConfig, input: Vec<f64>) -> Vec<Vec<f64>> {
    let shapes = config.layer_shapes();
    let mut acts = vec![input];
    let mut off = 0;
    for (l, &(fan_in, fan_out)) in shapes.iter().enumerate() {
        let w = &params[off..off + fan_in * fan_out];
        let b = &params[off + fan_in * fan_out..off + fan_out * (fan_in + 1)];
        off += fan_out * (fan_in + 1);
        let x = acts.last().unwrap();
        let hidden = l + 1 < shapes.len();
        let y = (0..fan_out)
            .map(|r| {
                let s = b[r]
                    + w[r * fan_in..(r + 1) * fan_in]
                        .iter()
                        .zip(x)
                        .map(|(a, c)| a * c)
                        .sum::<f64>();
                if hidden {
                    s.max(0.0)
                } else {
                    s
                }
            })
            .collect();
        acts.push(y);
    }
    acts
}

/// Evaluates Ψ at one point; returns `(o, s)`.
pub fn field_eval(params: &FieldParams, config: &FieldConfig, u: f64, v: f64, z: f64) -> Result<(f64, f64)> {
    check(params, config)?;
    Ok(match config.mode {
        FieldMode::None => (0.0, 0.0),
        FieldMode::GlobalAffine => (params.values[0], params.values[1]),
        FieldMode::Mlp => {
            let acts = mlp_forward(&params.values, config, encode(config, u, v, z));
            let out = acts.last().unwrap();
            (out[0], out[1])
        }
    })
}

/// Accumulates `∂L/∂params` into `grad` given `(∂L/∂o, ∂L/∂s)` at one point,
/// and returns `∂L/∂(u', v', z)`.
pub fn field_backward(
    params: &FieldParams,
    config: &FieldConfig,
    (u, v, z): (f64, f64, f64),
    (g_o, g_s): (f64, f64),
    grad: &mut [f64],
) -> Result<[f64; 3]> {
    check(params, config)?;
    if grad.len() != params.values.len() {
        return Err(Error::Shape("gradient buffer size differs from parameters".into()));
    }
    match config.mode {
        FieldMode::None => return Ok([0.0; 3]),
        FieldMode::GlobalAffine => {
            grad[0] += g_o;
            grad[1] += g_s;
            return Ok([0.0; 3]);
        }
        FieldMode::Mlp => {}
    }
    let shapes = config.layer_shapes();
    let acts = mlp_forward(&params.values, config, encode(config, u, v, z));
    let mut offsets = Vec::with_capacity(shapes.len());
    let mut off = 0;
    for &(i, o) in &shapes {
        offsets.push(off);
        off += o * (i + 1);
    }
    let mut g = vec![g_o, g_s];
    for l in (0..shapes.len()).rev() {
        let (fan_in, fan_out) = shapes[l];
        let off = offsets[l];
        let x = &acts[l];
        if l + 1 < shapes.len() {
            // ReLU: no gradient where the unit was inactive
            for (gi, a) in g.iter_mut().zip(&acts[l + 1]) {
                if *a <= 0.0 {
                    *gi = 0.0;
                }
            }
        }
        let mut gx = vec![0.0; fan_in];
        for r in 0..fan_out {
            let gr = g[r];
            if gr == 0.0 {
                continue;
            }
            let row = off + r * fan_in;
            for c in 0..fan_in {
                grad[row + c] += gr * x[c];
                gx[c] += gr * params.values[row + c];
            }
            grad[off + fan_in * fan_out + r] += gr;
        }
        g = gx;
    }
    let nm = 2 * config.m + 1;
    let du = encode_derivative(u, config.m);
    let dv = encode_derivative(v, config.m);
    let dz = encode_derivative(z, config.k);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    Ok([dot(&g[..nm], &du), dot(&g[nm..2 * nm], &dv), dot(&g[2 * nm..], &dz)])
}
