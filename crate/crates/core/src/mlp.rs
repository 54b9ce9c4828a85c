//! Batched dense network over a flat parameter vector.
//!
//! Rows of the input matrix are independent samples. The forward pass can
//! optionally carry one tangent direction per row (forward mode), and the
//! backward pass accepts cotangents for both the primal output and that
//! tangent, which is what differentiating a time derivative w.r.t. the
//! parameters requires.
//!
//! Parameter layout, per layer: weight `[out, in]` row-major, then bias `[out]`.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis, Zip};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `a · sigmoid(a)`
    Silu,
    Tanh,
    /// Piecewise linear; no usable second derivative.
    Relu,
}

impl Activation {
    pub fn is_smooth(self) -> bool {
        !matches!(self, Activation::Relu)
    }

    #[inline]
    fn value(self, a: f64) -> f64 {
        match self {
            Activation::Silu => a / (1.0 + (-a).exp()),
            Activation::Tanh => a.tanh(),
            Activation::Relu => a.max(0.0),
        }
    }

    #[inline]
    fn d1(self, a: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-a).exp());
                s + a * s * (1.0 - s)
            }
            Activation::Tanh => {
                let h = a.tanh();
                1.0 - h * h
            }
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    #[inline]
    fn d2(self, a: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-a).exp());
                s * (1.0 - s) * (2.0 + a * (1.0 - 2.0 * s))
            }
            Activation::Tanh => {
                let h = a.tanh();
                -2.0 * h * (1.0 - h * h)
            }
            Activation::Relu => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    activation: Activation,
}

/// Intermediate values of a batched forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    /// `inputs[l]` feeds layer `l`.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
    input_tangents: Option<Vec<Array2<f64>>>,
    pre_tangents: Option<Vec<Array2<f64>>>,
    pub output: Array2<f64>,
    pub output_tangent: Option<Array2<f64>>,
}

impl Mlp {
    /// `sizes = [in, hidden..., out]`
    pub fn new(sizes: Vec<usize>, activation: Activation) -> Self {
        assert!(sizes.len() >= 2 && sizes.iter().all(|&s| s > 0));
        Mlp { sizes, activation }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    /// `(out, in)` for each layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.sizes.windows(2).map(|w| (w[1], w[0])).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layer_shapes().iter().map(|(o, i)| o * i + o).sum()
    }

    fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        let mut out = Vec::with_capacity(self.num_layers());
        for (o, i) in self.layer_shapes() {
            out.push(acc);
            acc += o * i + o;
        }
        out
    }

    fn weight<'a>(&self, theta: &'a [f64], offset: usize, shape: (usize, usize)) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape(shape, &theta[offset..offset + shape.0 * shape.1]).expect("weight shape")
    }

    pub fn forward(&self, theta: &[f64], input: Array2<f64>, tangent: Option<Array2<f64>>) -> Tape {
        debug_assert_eq!(theta.len(), self.num_params());
        let shapes = self.layer_shapes();
        let offsets = self.offsets();
        let last = self.num_layers() - 1;
        let with_tangent = tangent.is_some();

        let mut inputs = vec![input];
        let mut pre = Vec::with_capacity(last);
        let mut input_tangents = tangent.map(|t| vec![t]);
        let mut pre_tangents = with_tangent.then(Vec::new);

        for (l, (&(out, inp), &off)) in shapes.iter().zip(&offsets).enumerate() {
            let w = self.weight(theta, off, (out, inp));
            let bias = &theta[off + out * inp..off + out * inp + out];
            let h = inputs.last().expect("layer input");
            let rows = h.nrows();
            let mut a = Array2::from_shape_fn((rows, out), |(_, j)| bias[j]);
            general_mat_mul(1.0, h, &w.t(), 1.0, &mut a);
            let a_dot = input_tangents.as_ref().map(|ts| {
                let mut ad = Array2::zeros((rows, out));
                general_mat_mul(1.0, ts.last().expect("tangent"), &w.t(), 0.0, &mut ad);
                ad
            });

            if l == last {
                return Tape {
                    inputs,
                    pre,
                    input_tangents,
                    pre_tangents,
                    output: a,
                    output_tangent: a_dot,
                };
            }

            let act = self.activation;
            let next = a.mapv(|v| act.value(v));
            if let (Some(ad), Some(ts), Some(pts)) = (a_dot, input_tangents.as_mut(), pre_tangents.as_mut()) {
                let mut hd = ad.clone();
                Zip::from(&mut hd).and(&a).for_each(|t, &v| *t *= act.d1(v));
                ts.push(hd);
                pts.push(ad);
            }
            pre.push(a);
            inputs.push(next);
        }
        unreachable!("network has at least one layer")
    }

    /// Accumulates `∂/∂θ [⟨cot_out, output⟩ + ⟨cot_tangent, output_tangent⟩]` into `grad`.
    pub fn backward(
        &self,
        theta: &[f64],
        tape: &Tape,
        cot_out: Array2<f64>,
        cot_tangent: Option<Array2<f64>>,
        grad: &mut [f64],
    ) {
        debug_assert_eq!(grad.len(), self.num_params());
        let shapes = self.layer_shapes();
        let offsets = self.offsets();
        let act = self.activation;
        let mut g_a = cot_out;
        let mut g_ad = match (&tape.input_tangents, cot_tangent) {
            (Some(_), c) => c,
            (None, _) => None,
        };

        for l in (0..self.num_layers()).rev() {
            let (out, inp) = shapes[l];
            let off = offsets[l];
            let h = &tape.inputs[l];
            {
                let (wg, bg) = grad[off..off + out * inp + out].split_at_mut(out * inp);
                let mut wg = ArrayViewMut2::from_shape((out, inp), wg).expect("grad shape");
                general_mat_mul(1.0, &g_a.t(), h, 1.0, &mut wg);
                if let (Some(gad), Some(ts)) = (&g_ad, &tape.input_tangents) {
                    general_mat_mul(1.0, &gad.t(), &ts[l], 1.0, &mut wg);
                }
                for (b, s) in bg.iter_mut().zip(g_a.sum_axis(Axis(0)).iter()) {
                    *b += s;
                }
            }
            if l == 0 {
                break;
            }

            let w = self.weight(theta, off, (out, inp));
            let mut g_h = Array2::zeros((g_a.nrows(), inp));
            general_mat_mul(1.0, &g_a, &w, 0.0, &mut g_h);
            let a = &tape.pre[l - 1];
            match (&g_ad, &tape.pre_tangents) {
                (Some(gad), Some(pts)) => {
                    let mut g_hd = Array2::zeros((gad.nrows(), inp));
                    general_mat_mul(1.0, gad, &w, 0.0, &mut g_hd);
                    let ad = &pts[l - 1];
                    Zip::from(&mut g_h).and(&g_hd).and(a).and(ad).for_each(|gh, &ghd, &v, &vd| {
                        *gh = *gh * act.d1(v) + ghd * act.d2(v) * vd;
                    });
                    Zip::from(&mut g_hd).and(a).for_each(|ghd, &v| *ghd *= act.d1(v));
                    g_ad = Some(g_hd);
                }
                _ => {
                    Zip::from(&mut g_h).and(a).for_each(|gh, &v| *gh *= act.d1(v));
                }
            }
            g_a = g_h;
        }
    }
}
