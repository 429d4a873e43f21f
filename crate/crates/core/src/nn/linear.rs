use ndarray::{Array2, Axis};
use rand::Rng;

use super::{gaussian_matrix, shape_err, NnError, Param, Parameterized};

/// Affine map `X W + b` with `W` of shape `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub weight: Param,
    pub bias: Param,
}

impl LinearLayer {
    /// Gaussian weights with std `1/sqrt(in)`, zero bias.
    pub fn new<R: Rng + ?Sized>(name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        let w = gaussian_matrix(rng, input, output, 1.0 / (input as f64).sqrt());
        Self::from_parts(name, w, Array2::zeros((1, output)), true)
    }

    pub fn from_parts(name: &str, weight: Array2<f64>, bias: Array2<f64>, trainable: bool) -> Self {
        assert_eq!(bias.dim(), (1, weight.ncols()), "bias must be 1 x out");
        let make = if trainable { Param::trainable } else { Param::frozen };
        Self { weight: make(format!("{name}.weight"), weight), bias: make(format!("{name}.bias"), bias) }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn freeze(&mut self) {
        self.weight.freeze();
        self.bias.freeze();
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<(), NnError> {
        if x.ncols() != self.input_dim() {
            return Err(shape_err(self.weight.name(), format!("{} input columns", self.input_dim()), x.ncols()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>, NnError> {
        self.check_input(x)?;
        Ok(x.dot(&self.weight.value) + &self.bias.value)
    }

    /// Accumulates parameter gradients and returns `dL/dX`.
    pub fn backward(&mut self, x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        if let Some(gw) = self.weight.grad_mut() {
            gw.scaled_add(1.0, &x.t().dot(dy));
        }
        if let Some(gb) = self.bias.grad_mut() {
            *gb += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        dy.dot(&self.weight.value.t())
    }
}

impl Parameterized for LinearLayer {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Frozen base layer plus a trainable low-rank residual:
/// `X (W + W_down W_up) + b`, with `W_down: in x r` and `W_up: r x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoRALinear {
    base: LinearLayer,
    pub down: Param,
    pub up: Param,
}

/// Freezes `layer` and attaches a rank-`r` adapter. The down factor is
/// Gaussian with std `1/sqrt(in)`; the up factor starts at zero, so the
/// wrapped layer initially computes exactly the base function.
pub fn lora_wrap<R: Rng + ?Sized>(mut layer: LinearLayer, r: usize, rng: &mut R) -> Result<LoRALinear, NnError> {
    let (i, o) = (layer.input_dim(), layer.output_dim());
    if r == 0 || r >= i.min(o) {
        return Err(NnError::RankTooLarge { r, i, o });
    }
    layer.freeze();
    let prefix = layer
        .weight
        .name()
        .strip_suffix(".weight")
        .unwrap_or(layer.weight.name())
        .to_string();
    let down = Param::trainable(format!("{prefix}.lora_down"), gaussian_matrix(rng, i, r, 1.0 / (i as f64).sqrt()));
    let up = Param::trainable(format!("{prefix}.lora_up"), Array2::zeros((r, o)));
    Ok(LoRALinear { base: layer, down, up })
}

impl LoRALinear {
    pub fn base(&self) -> &LinearLayer {
        &self.base
    }

    pub fn rank(&self) -> usize {
        self.down.value.ncols()
    }

    /// Dense equivalent weight `W + W_down W_up`.
    pub fn merged_weight(&self) -> Array2<f64> {
        &self.base.weight.value + &self.down.value.dot(&self.up.value)
    }

    /// Materializes the adapter into a plain trainable layer.
    pub fn unwrap_merged(&self) -> LinearLayer {
        let name = self.base.weight.name().strip_suffix(".weight").unwrap_or("merged").to_string();
        LinearLayer::from_parts(&name, self.merged_weight(), self.base.bias.value.clone(), true)
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>, NnError> {
        self.base.check_input(x)?;
        let residual = x.dot(&self.down.value).dot(&self.up.value);
        Ok(x.dot(&self.base.weight.value) + residual + &self.base.bias.value)
    }

    pub fn backward(&mut self, x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        let h = x.dot(&self.down.value);
        let dh = dy.dot(&self.up.value.t());
        if let Some(g) = self.up.grad_mut() {
            g.scaled_add(1.0, &h.t().dot(dy));
        }
        if let Some(g) = self.down.grad_mut() {
            g.scaled_add(1.0, &x.t().dot(&dh));
        }
        dy.dot(&self.base.weight.value.t()) + dh.dot(&self.down.value.t())
    }
}

impl Parameterized for LoRALinear {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.base.visit(f);
        f(&self.down);
        f(&self.up);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.base.visit_mut(f);
        f(&mut self.down);
        f(&mut self.up);
    }
}

/// A projection that may or may not carry a LoRA adapter.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq)]
pub enum Projector {
    Plain(LinearLayer),
    LoRA(LoRALinear),
}

impl Projector {
    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>, NnError> {
        match self {
            Projector::Plain(l) => l.forward(x),
            Projector::LoRA(l) => l.forward(x),
        }
    }

    pub fn backward(&mut self, x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        match self {
            Projector::Plain(l) => l.backward(x, dy),
            Projector::LoRA(l) => l.backward(x, dy),
        }
    }

    /// Replaces a plain layer by its LoRA-wrapped version. No-op if already wrapped.
    pub fn attach_lora<R: Rng + ?Sized>(&mut self, r: usize, rng: &mut R) -> Result<(), NnError> {
        if let Projector::Plain(l) = self {
            *self = Projector::LoRA(lora_wrap(l.clone(), r, rng)?);
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Projector::Plain(l) => l.input_dim(),
            Projector::LoRA(l) => l.base.input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Projector::Plain(l) => l.output_dim(),
            Projector::LoRA(l) => l.base.output_dim(),
        }
    }
}

impl Parameterized for Projector {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        match self {
            Projector::Plain(l) => l.visit(f),
            Projector::LoRA(l) => l.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match self {
            Projector::Plain(l) => l.visit_mut(f),
            Projector::LoRA(l) => l.visit_mut(f),
        }
    }
}
