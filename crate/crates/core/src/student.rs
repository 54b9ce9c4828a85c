//! Trajectory-function student
//!
//! `x_θ(z, t) = c_skip(t)·z + c_out(t)·X_θ(c_in·z, c_noise(t))` with
//! `c_skip = t/T`, `c_out = (T - t)/T`, `c_in = 1/√(σ_data² + T²)` and
//! `c_noise = ln(t)/4`. Since `c_out(T) = 0` the boundary `x_θ(z, T) = z`
//! holds for every parameter vector.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{check_finite, check_len, PidError, Result};
use crate::mlp::{Activation, Mlp, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimeEmbedding {
    /// `c_noise(t)` as one extra input feature.
    Scalar,
    /// `c_noise` plus `sin(2^j c_noise), cos(2^j c_noise)` for `j < frequencies`.
    Fourier { frequencies: usize },
}

impl TimeEmbedding {
    fn width(self) -> usize {
        match self {
            TimeEmbedding::Scalar => 1,
            TimeEmbedding::Fourier { frequencies } => 1 + 2 * frequencies,
        }
    }

    /// Writes the features and their derivative w.r.t. `c_noise`.
    fn write(self, c: f64, feat: &mut [f64], tangent: &mut [f64]) {
        feat[0] = c;
        tangent[0] = 1.0;
        if let TimeEmbedding::Fourier { frequencies } = self {
            for j in 0..frequencies {
                let w = (1u64 << j) as f64;
                let (s, co) = (w * c).sin_cos();
                feat[1 + 2 * j] = s;
                feat[2 + 2 * j] = co;
                tangent[1 + 2 * j] = w * co;
                tangent[2 + 2 * j] = -w * s;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub t_max: f64,
    pub sigma_data: f64,
    pub time_embedding: TimeEmbedding,
}

impl StudentConfig {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, t_max: f64) -> Self {
        StudentConfig {
            input_dim,
            hidden_dims,
            activation: Activation::Silu,
            t_max,
            sigma_data: 0.5,
            time_embedding: TimeEmbedding::Scalar,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(PidError::config("student.input_dim", "must be >= 1"));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(PidError::config(
                "student.hidden_dims",
                "must be a non-empty list of widths >= 1",
            ));
        }
        if !(self.t_max.is_finite() && self.t_max > 0.0) {
            return Err(PidError::config("student.t_max", "must be finite and > 0"));
        }
        if !(self.sigma_data.is_finite() && self.sigma_data > 0.0) {
            return Err(PidError::config("student.sigma_data", "must be finite and > 0"));
        }
        Ok(())
    }

    pub fn network(&self) -> Mlp {
        let mut sizes = vec![self.input_dim + self.time_embedding.width()];
        sizes.extend(&self.hidden_dims);
        sizes.push(self.input_dim);
        Mlp::new(sizes, self.activation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkipCoeffs {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

pub fn skip_coeffs(t: f64, cfg: &StudentConfig) -> Result<SkipCoeffs> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(PidError::Domain(format!("skip coefficients require t > 0, got {t}")));
    }
    let big_t = cfg.t_max;
    Ok(SkipCoeffs {
        c_skip: t / big_t,
        c_out: (big_t - t) / big_t,
        c_in: 1.0 / (cfg.sigma_data * cfg.sigma_data + big_t * big_t).sqrt(),
        c_noise: t.ln() / 4.0,
    })
}

/// Network weights `θ`, stored as one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentParams {
    shapes: Vec<(usize, usize)>,
    theta: Vec<f64>,
}

impl StudentParams {
    pub fn zeros(cfg: &StudentConfig) -> Self {
        let net = cfg.network();
        StudentParams { shapes: net.layer_shapes(), theta: vec![0.0; net.num_params()] }
    }

    /// He-style normal init for hidden layers, `1/fan_in` variance for the
    /// output layer, zero biases.
    pub fn init<R: Rng + ?Sized>(cfg: &StudentConfig, rng: &mut R) -> Self {
        let mut p = Self::zeros(cfg);
        let n_layers = p.shapes.len();
        let mut off = 0;
        for (l, &(out, inp)) in p.shapes.iter().enumerate() {
            let gain = if l + 1 == n_layers { 1.0 } else { 2.0 };
            let std = (gain / inp as f64).sqrt();
            for w in &mut p.theta[off..off + out * inp] {
                let e: f64 = StandardNormal.sample(rng);
                *w = std * e;
            }
            off += out * inp + out;
        }
        p
    }

    pub fn from_flat(cfg: &StudentConfig, theta: Vec<f64>) -> Result<Self> {
        let net = cfg.network();
        check_len("parameter vector", theta.len(), net.num_params())?;
        check_finite("parameter vector", &theta)?;
        Ok(StudentParams { shapes: net.layer_shapes(), theta })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.theta
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn shapes(&self) -> &[(usize, usize)] {
        &self.shapes
    }

    pub fn check_compatible(&self, cfg: &StudentConfig) -> Result<()> {
        if self.shapes != cfg.network().layer_shapes() {
            return Err(PidError::Input(format!(
                "parameter shapes {:?} do not match the student configuration",
                self.shapes
            )));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRepr {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl Serialize for StudentParams {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut off = 0;
        let layers: Vec<LayerRepr> = self
            .shapes
            .iter()
            .map(|&(out, inp)| {
                let weight = self.theta[off..off + out * inp].chunks(inp).map(<[f64]>::to_vec).collect();
                let bias = self.theta[off + out * inp..off + out * inp + out].to_vec();
                off += out * inp + out;
                LayerRepr { weight, bias }
            })
            .collect();
        layers.serialize(s)
    }
}

impl<'de> Deserialize<'de> for StudentParams {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error;
        let layers = Vec::<LayerRepr>::deserialize(d)?;
        let mut shapes = Vec::with_capacity(layers.len());
        let mut theta = Vec::new();
        for (l, layer) in layers.into_iter().enumerate() {
            let out = layer.weight.len();
            let inp = layer.weight.first().map_or(0, Vec::len);
            if out == 0 || inp == 0 || layer.weight.iter().any(|r| r.len() != inp) || layer.bias.len() != out {
                return Err(D::Error::custom(format!("layer {l} has inconsistent shapes")));
            }
            shapes.push((out, inp));
            theta.extend(layer.weight.into_iter().flatten());
            theta.extend(layer.bias);
        }
        if shapes.is_empty() {
            return Err(D::Error::custom("parameter list is empty"));
        }
        if shapes.windows(2).any(|w| w[0].0 != w[1].1) {
            return Err(D::Error::custom("consecutive layer widths do not chain"));
        }
        Ok(StudentParams { shapes, theta })
    }
}

/// Batched student evaluation at rows `(z_r, t_r)`.
#[derive(Debug, Clone)]
pub struct StudentEval {
    tape: Tape,
    coeffs: Vec<SkipCoeffs>,
    times: Vec<f64>,
    /// `x_θ(z_r, t_r)`, one row per sample.
    pub x: Array2<f64>,
    /// `dx_θ/dt` at each row, when requested.
    pub dxdt: Option<Array2<f64>>,
}

impl StudentEval {
    pub fn rows(&self) -> usize {
        self.x.nrows()
    }

    /// Raw network output `X_θ`.
    pub fn network_output(&self) -> &Array2<f64> {
        &self.tape.output
    }
}

pub fn forward_batch(
    params: &StudentParams,
    cfg: &StudentConfig,
    zs: &[&[f64]],
    ts: &[f64],
    with_time_derivative: bool,
) -> Result<StudentEval> {
    check_len("time list", ts.len(), zs.len())?;
    let d = cfg.input_dim;
    let emb = cfg.time_embedding;
    let width = d + emb.width();
    let rows = zs.len();
    let mut input = Array2::zeros((rows, width));
    let mut tangent = Array2::zeros((rows, width));
    let mut coeffs = Vec::with_capacity(rows);
    for (r, (z, &t)) in zs.iter().zip(ts).enumerate() {
        check_len("noise vector", z.len(), d)?;
        let c = skip_coeffs(t, cfg)?;
        let mut row = input.row_mut(r);
        let row = row.as_slice_mut().expect("contiguous row");
        for (dst, zi) in row[..d].iter_mut().zip(z.iter()) {
            *dst = c.c_in * zi;
        }
        let mut trow = tangent.row_mut(r);
        emb.write(c.c_noise, &mut row[d..], &mut trow.as_slice_mut().expect("contiguous row")[d..]);
        coeffs.push(c);
    }

    let net = cfg.network();
    let tape = net.forward(params.as_slice(), input, with_time_derivative.then_some(tangent));
    let big_t = cfg.t_max;
    let mut x = Array2::zeros((rows, d));
    for r in 0..rows {
        let c = &coeffs[r];
        for k in 0..d {
            x[[r, k]] = c.c_skip * zs[r][k] + c.c_out * tape.output[[r, k]];
        }
    }
    let dxdt = tape.output_tangent.as_ref().map(|xt| {
        let mut out = Array2::zeros((rows, d));
        for r in 0..rows {
            let c = &coeffs[r];
            let dnoise = 1.0 / (4.0 * ts[r]);
            for k in 0..d {
                out[[r, k]] = (zs[r][k] - tape.output[[r, k]]) / big_t + c.c_out * xt[[r, k]] * dnoise;
            }
        }
        out
    });
    Ok(StudentEval { tape, coeffs, times: ts.to_vec(), x, dxdt })
}

/// Adds `∂/∂θ [⟨cot_x, x⟩ + ⟨cot_dxdt, dx/dt⟩]` into `grad`.
pub fn backward_batch(
    params: &StudentParams,
    cfg: &StudentConfig,
    eval: &StudentEval,
    cot_x: &Array2<f64>,
    cot_dxdt: Option<&Array2<f64>>,
    grad: &mut [f64],
) {
    let rows = eval.rows();
    let d = cfg.input_dim;
    let big_t = cfg.t_max;
    let mut g_out = Array2::zeros((rows, d));
    let mut g_tan = cot_dxdt.map(|_| Array2::zeros((rows, d)));
    for r in 0..rows {
        let c = &eval.coeffs[r];
        for k in 0..d {
            g_out[[r, k]] = c.c_out * cot_x[[r, k]];
        }
        if let (Some(cd), Some(gt)) = (cot_dxdt, g_tan.as_mut()) {
            let dnoise = 1.0 / (4.0 * eval.times[r]);
            for k in 0..d {
                g_out[[r, k]] -= cd[[r, k]] / big_t;
                gt[[r, k]] = cd[[r, k]] * c.c_out * dnoise;
            }
        }
    }
    cfg.network().backward(params.as_slice(), &eval.tape, g_out, g_tan, grad);
}

pub fn student_forward(params: &StudentParams, cfg: &StudentConfig, z: &[f64], t: f64) -> Result<Vec<f64>> {
    check_finite("noise vector", z)?;
    let eval = forward_batch(params, cfg, &[z], &[t], false)?;
    Ok(eval.x.row(0).to_vec())
}

/// Gradient of `⟨upstream, x_θ(z, t)⟩` with respect to `θ`.
pub fn student_backward(
    params: &StudentParams,
    cfg: &StudentConfig,
    z: &[f64],
    t: f64,
    upstream: &[f64],
) -> Result<Vec<f64>> {
    check_len("upstream cotangent", upstream.len(), cfg.input_dim)?;
    check_finite("upstream cotangent", upstream)?;
    let eval = forward_batch(params, cfg, &[z], &[t], false)?;
    let cot = Array2::from_shape_vec((1, cfg.input_dim), upstream.to_vec()).expect("row shape");
    let mut grad = vec![0.0; params.len()];
    backward_batch(params, cfg, &eval, &cot, None, &mut grad);
    Ok(grad)
}

/// Exact `dx_θ/dt` via forward-mode propagation of the `c_noise` input.
pub fn student_dt_exact(params: &StudentParams, cfg: &StudentConfig, z: &[f64], t: f64) -> Result<Vec<f64>> {
    let eval = forward_batch(params, cfg, &[z], &[t], true)?;
    Ok(eval.dxdt.expect("tangent requested").row(0).to_vec())
}

/// `decay·ema + (1 - decay)·current`, elementwise.
pub fn ema_update(ema: &StudentParams, current: &StudentParams, decay: f64) -> Result<StudentParams> {
    if ema.shapes != current.shapes {
        return Err(PidError::Input("EMA and current parameters differ in shape".into()));
    }
    if !(0.0..=1.0).contains(&decay) {
        return Err(PidError::config("train.ema_decay", "must be in [0, 1]"));
    }
    let theta = ema
        .theta
        .iter()
        .zip(&current.theta)
        .map(|(e, c)| decay * e + (1.0 - decay) * c)
        .collect();
    Ok(StudentParams { shapes: ema.shapes.clone(), theta })
}
