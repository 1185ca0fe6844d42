use ndarray::{linalg::general_mat_mul, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;

use super::{join, ParamSet, Tensor};
use crate::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-8;

/// Dense map `y = x·Wᵀ (+ b)` over row batches.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, bias: bool, rng: &mut impl Rng) -> Self {
        Linear {
            weight: Tensor::glorot(out_dim, in_dim, rng),
            bias: bias.then(|| Tensor::zeros(&[out_dim])),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = Array2::zeros((x.nrows(), self.out_dim()));
        self.forward_into(x, &mut y.view_mut());
        y
    }

    pub fn forward_into(&self, x: ArrayView2<f64>, y: &mut ArrayViewMut2<f64>) {
        general_mat_mul(1.0, &x, &self.weight.view2().t(), 0.0, y);
        if let Some(b) = &self.bias {
            let bv = b.view1();
            for mut row in y.rows_mut() {
                row += &bv;
            }
        }
    }

    /// Accumulates `dW += dyᵀ·x`, `db += Σ dy`, and optionally `dx += dy·W`.
    pub fn backward(
        &mut self,
        x: ArrayView2<f64>,
        dy: ArrayView2<f64>,
        dx: Option<&mut ArrayViewMut2<f64>>,
    ) {
        general_mat_mul(1.0, &dy.t(), &x, 1.0, &mut self.weight.grad_view2_mut());
        if let Some(b) = &mut self.bias {
            let mut bg = b.grad_view1_mut();
            bg += &dy.sum_axis(Axis(0));
        }
        if let Some(dx) = dx {
            general_mat_mul(1.0, &dy, &self.weight.view2(), 1.0, dx);
        }
    }
}

impl ParamSet for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Row-wise layer normalization with learned gain and shift:
/// `(x − mean) / sqrt(var + ε) ⊙ gain + shift`.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub shift: Tensor,
}

#[derive(Debug, Clone)]
pub struct LayerNormCtx {
    /// Normalized rows before gain/shift.
    pub xhat: Array2<f64>,
    pub inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize, _rng: &mut impl Rng) -> Self {
        let mut gain = Tensor::zeros(&[dim]);
        gain.values_mut().fill(1.0);
        LayerNorm { gain, shift: Tensor::zeros(&[dim]) }
    }

    pub fn dim(&self) -> usize {
        self.gain.len()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, LayerNormCtx) {
        let d = x.ncols();
        let mut xhat = x.to_owned();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d as f64;
            let mut var = 0.0;
            for v in row.iter() {
                var += (v - mean) * (v - mean);
            }
            var /= d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            row.mapv_inplace(|v| (v - mean) * inv);
        }
        let gain = self.gain.view1();
        let shift = self.shift.view1();
        let mut y = xhat.clone();
        for mut row in y.rows_mut() {
            row.zip_mut_with(&gain, |v, &g| *v *= g);
            row += &shift;
        }
        (y, LayerNormCtx { xhat, inv_std })
    }

    /// Accumulates gain/shift gradients and adds the input gradient into `dx`.
    pub fn backward(&mut self, ctx: &LayerNormCtx, dy: ArrayView2<f64>, dx: &mut ArrayViewMut2<f64>) {
        let d = self.dim() as f64;
        let dim = self.dim();
        {
            let mut gg = self.gain.grad_view1_mut();
            for (dyr, xr) in dy.rows().into_iter().zip(ctx.xhat.rows()) {
                for k in 0..dim {
                    gg[k] += dyr[k] * xr[k];
                }
            }
        }
        let gain = self.gain.view1();
        {
            let mut sg = self.shift.grad_view1_mut();
            sg += &dy.sum_axis(Axis(0));
        }
        for ((dyr, xr), (mut dxr, &inv)) in dy
            .rows()
            .into_iter()
            .zip(ctx.xhat.rows())
            .zip(dx.rows_mut().into_iter().zip(&ctx.inv_std))
        {
            // dxhat = dy ⊙ gain; dx = inv_std*(dxhat − mean(dxhat) − xhat·mean(dxhat⊙xhat))
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for k in 0..gain.len() {
                let dxhat = dyr[k] * gain[k];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xr[k];
            }
            let m1 = sum_dxhat / d;
            let m2 = sum_dxhat_xhat / d;
            for k in 0..gain.len() {
                let dxhat = dyr[k] * gain[k];
                dxr[k] += inv * (dxhat - m1 - xr[k] * m2);
            }
        }
    }
}

impl ParamSet for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "gain"), &self.gain);
        f(&join(prefix, "shift"), &self.shift);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "gain"), &mut self.gain);
        f(&join(prefix, "shift"), &mut self.shift);
    }
}

pub fn relu(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Masks `dy` in place using the saved post-activation values.
pub fn relu_backward(saved_out: &Array2<f64>, dy: &mut Array2<f64>) {
    dy.zip_mut_with(saved_out, |g, &y| {
        if y <= 0.0 {
            *g = 0.0;
        }
    });
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpSpec {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub num_hidden_layers: usize,
    pub output_layernorm: bool,
}

impl MlpSpec {
    pub fn encoder(in_dim: usize, hidden: usize) -> Self {
        MlpSpec { in_dim, hidden_dim: hidden, out_dim: hidden, num_hidden_layers: 2, output_layernorm: true }
    }

    pub fn decoder(hidden: usize, out_dim: usize) -> Self {
        MlpSpec { in_dim: hidden, hidden_dim: hidden, out_dim, num_hidden_layers: 2, output_layernorm: false }
    }
}

/// `affine → ReLU` repeated `num_hidden_layers` times, then an affine map to
/// `out_dim`, optionally followed by layer normalization.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Linear>,
    pub out_norm: Option<LayerNorm>,
}

#[derive(Debug)]
pub struct MlpCtx {
    /// Input to each linear layer; `inputs[0]` is the MLP input.
    inputs: Vec<Array2<f64>>,
    ln: Option<LayerNormCtx>,
}

impl Mlp {
    pub fn new(spec: MlpSpec, rng: &mut impl Rng) -> Self {
        assert!(spec.in_dim >= 1 && spec.hidden_dim >= 1 && spec.out_dim >= 1);
        let mut layers = Vec::new();
        let mut cur = spec.in_dim;
        for _ in 0..spec.num_hidden_layers {
            layers.push(Linear::new(cur, spec.hidden_dim, true, rng));
            cur = spec.hidden_dim;
        }
        layers.push(Linear::new(cur, spec.out_dim, true, rng));
        let out_norm = spec.output_layernorm.then(|| LayerNorm::new(spec.out_dim, rng));
        Mlp { spec, layers, out_norm }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, MlpCtx)> {
        if x.ncols() != self.spec.in_dim {
            return Err(Error::Shape(format!(
                "mlp expects {} input features, got {}",
                self.spec.in_dim,
                x.ncols()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_owned();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(cur.view());
            if k + 1 < self.layers.len() {
                relu(&mut y);
            }
            inputs.push(cur);
            cur = y;
        }
        let ln = match &self.out_norm {
            Some(norm) => {
                let (y, ctx) = norm.forward(cur.view());
                cur = y;
                Some(ctx)
            }
            None => None,
        };
        Ok((cur, MlpCtx { inputs, ln }))
    }

    /// Backward pass; optionally accumulates the input gradient.
    pub fn backward(
        &mut self,
        ctx: &MlpCtx,
        dy: ArrayView2<f64>,
        dx: Option<&mut ArrayViewMut2<f64>>,
    ) {
        let mut grad = dy.to_owned();
        if let Some(norm) = &mut self.out_norm {
            let ln_ctx = ctx.ln.as_ref().expect("layer norm context");
            let mut dpre = Array2::zeros(grad.raw_dim());
            norm.backward(ln_ctx, grad.view(), &mut dpre.view_mut());
            grad = dpre;
        }
        for k in (0..self.layers.len()).rev() {
            if k + 1 < self.layers.len() {
                // The input saved for layer k+1 is ReLU(linear_k(...)).
                relu_backward(&ctx.inputs[k + 1], &mut grad);
            }
            let mut dprev = Array2::zeros(ctx.inputs[k].raw_dim());
            let want_input_grad = k > 0 || dx.is_some();
            self.layers[k].backward(
                ctx.inputs[k].view(),
                grad.view(),
                want_input_grad.then_some(&mut dprev.view_mut()),
            );
            grad = dprev;
        }
        if let Some(dx) = dx {
            dx.zip_mut_with(&grad, |a, &b| *a += b);
        }
    }
}

impl ParamSet for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (k, layer) in self.layers.iter().enumerate() {
            layer.visit(&join(prefix, &format!("layer{k}")), f);
        }
        if let Some(norm) = &self.out_norm {
            norm.visit(&join(prefix, "out_norm"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (k, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&join(prefix, &format!("layer{k}")), f);
        }
        if let Some(norm) = &mut self.out_norm {
            norm.visit_mut(&join(prefix, "out_norm"), f);
        }
    }
}
