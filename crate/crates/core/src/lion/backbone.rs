use rand::Rng as _;

use crate::deq::Activation;
use crate::error::{Error, Result};
use crate::numerics::{
    add_outer, check_unique_names, cross_entropy_slice, matvec_into, matvec_t_into, softmax, Param, Tensor,
};
use crate::rng::Rng;
use crate::robust_opt::{BatchStats, Trainable};

/// Fully connected map `y = W x + b` with `W` of shape `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Affine {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[output, input]),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn uniform(input: usize, output: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let w = (0..input * output).map(|_| rng.random_range(-bound..bound)).collect();
        let b = (0..output).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            weight: Tensor::from_parts(vec![output, input], w),
            bias: Tensor::from_parts(vec![output], b),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            weight: Tensor::identity(n),
            bias: Tensor::zeros(&[n]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.output_dim()];
        matvec_into(self.weight.data(), self.output_dim(), self.input_dim(), x, &mut out);
        for (o, &b) in out.iter_mut().zip(self.bias.data()) {
            *o += b;
        }
        out
    }

    /// Accumulates `(∂W, ∂b)` into `grads` and returns `Wᵀ gy`.
    pub fn backward(&self, x: &[f64], gy: &[f64], grads: Option<(&mut [f64], &mut [f64])>) -> Vec<f64> {
        if let Some((gw, gb)) = grads {
            add_outer(gw, gy, x);
            for (a, &g) in gb.iter_mut().zip(gy) {
                *a += g;
            }
        }
        let mut gx = vec![0.0; self.input_dim()];
        matvec_t_into(self.weight.data(), self.output_dim(), self.input_dim(), gy, &mut gx);
        gx
    }
}

/// Pretrained feature extractor: affine layers each followed by `activation`.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub layers: Vec<Affine>,
    pub activation: Activation,
    pub frozen: bool,
}

/// Cached activations from one backbone pass; `post[0]` is the input.
#[derive(Debug, Clone)]
pub struct BackboneTrace {
    pub pre: Vec<Vec<f64>>,
    pub post: Vec<Vec<f64>>,
}

impl BackboneTrace {
    pub fn output(&self) -> &[f64] {
        self.post.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl Backbone {
    /// `dims = [d, hidden..., h]`.
    pub fn init(dims: &[usize], activation: Activation, rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Argument("backbone needs at least one layer".into()));
        }
        let layers = dims.windows(2).map(|w| Affine::uniform(w[0], w[1], rng)).collect();
        Ok(Self {
            layers,
            activation,
            frozen: true,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            layers: vec![Affine::identity(n)],
            activation: Activation::Identity,
            frozen: true,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Affine::param_count).sum()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for layer in &self.layers {
            h = layer.apply(&h);
            h.iter_mut().for_each(|v| *v = self.activation.apply(*v));
        }
        h
    }

    pub fn forward_trace(&self, x: &[f64]) -> BackboneTrace {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len() + 1);
        post.push(x.to_vec());
        for layer in &self.layers {
            let p = layer.apply(post.last().unwrap());
            post.push(p.iter().map(|&v| self.activation.apply(v)).collect());
            pre.push(p);
        }
        BackboneTrace { pre, post }
    }

    /// Backpropagates `gy` to the input. Parameter gradients are accumulated
    /// only when `grads` is supplied (one `(∂W, ∂b)` pair per layer).
    pub fn backward(&self, trace: &BackboneTrace, gy: &[f64], mut grads: Option<&mut [(Tensor, Tensor)]>) -> Vec<f64> {
        let mut g = gy.to_vec();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            for (gi, &p) in g.iter_mut().zip(&trace.pre[k]) {
                *gi *= self.activation.derivative(p);
            }
            let slot = grads.as_deref_mut().map(|gs| {
                let (gw, gb) = &mut gs[k];
                (gw.data_mut(), gb.data_mut())
            });
            g = layer.backward(&trace.post[k], &g, slot);
        }
        g
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("backbone.{i}.weight"), &l.weight));
            out.push((format!("backbone.{i}.bias"), &l.bias));
        }
        out
    }
}

/// Which classifier parameters a baseline protocol updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TuneMode {
    Head,
    Bias,
    Full,
}

/// Backbone followed by a linear head: the model used for pretraining and
/// for the head-, bias- and full-tuning baselines.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub backbone: Backbone,
    pub head: Affine,
    pub mode: TuneMode,
}

impl Classifier {
    pub fn new(mut backbone: Backbone, head: Affine, mode: TuneMode) -> Result<Self> {
        if head.input_dim() != backbone.output_dim() {
            return Err(Error::dim(
                "Classifier::new",
                head.weight.shape(),
                &[backbone.output_dim()],
            ));
        }
        backbone.frozen = mode == TuneMode::Head;
        Ok(Self { backbone, head, mode })
    }

    pub fn classes(&self) -> usize {
        self.head.output_dim()
    }

    fn selected(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        match self.mode {
            TuneMode::Head => {}
            TuneMode::Bias => {
                for (i, l) in self.backbone.layers.iter().enumerate() {
                    out.push((format!("backbone.{i}.bias"), &l.bias));
                }
            }
            TuneMode::Full => out.extend(self.backbone.named_tensors()),
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.head.apply(&self.backbone.forward(x))
    }
}

impl Trainable for Classifier {
    fn export_params(&self) -> Vec<Param> {
        self.selected()
            .into_iter()
            .map(|(n, t)| Param::new(n, t.clone()))
            .collect()
    }

    fn import_params(&mut self, params: &[Param]) -> Result<()> {
        let expected = self.selected().len();
        if params.len() != expected {
            return Err(Error::State(format!(
                "expected {expected} parameters, got {}",
                params.len()
            )));
        }
        check_unique_names(params.iter().map(|p| p.name.as_str()))?;
        for p in params {
            let slot = match p.name.as_str() {
                "head.weight" => &mut self.head.weight,
                "head.bias" => &mut self.head.bias,
                name => {
                    if self.backbone.frozen {
                        return Err(Error::State(format!("backbone is frozen, refusing `{name}`")));
                    }
                    backbone_slot(&mut self.backbone, name)?
                }
            };
            if slot.shape() != p.value.shape() {
                return Err(Error::dim("import_params", slot.shape(), p.value.shape()));
            }
            *slot = p.value.clone();
        }
        Ok(())
    }

    fn batch_gradient(&self, xs: &[&[f64]], labels: &[usize]) -> Result<(BatchStats, Vec<Tensor>)> {
        if xs.is_empty() || xs.len() != labels.len() {
            return Err(Error::Argument(format!(
                "batch needs matching non-empty inputs/labels, got {}/{}",
                xs.len(),
                labels.len()
            )));
        }
        let need_backbone = self.mode != TuneMode::Head;
        let mut bb_grads: Vec<(Tensor, Tensor)> = self
            .backbone
            .layers
            .iter()
            .map(|l| (Tensor::zeros_like(&l.weight), Tensor::zeros_like(&l.bias)))
            .collect();
        let mut head_w = Tensor::zeros_like(&self.head.weight);
        let mut head_b = Tensor::zeros_like(&self.head.bias);
        let mut stats = BatchStats::default();
        for (x, &y) in xs.iter().zip(labels) {
            let trace = self.backbone.forward_trace(x);
            let logits = self.head.apply(trace.output());
            stats.record(&logits, y)?;
            let mut g = softmax(&logits);
            g[y] -= 1.0;
            let gz = self
                .head
                .backward(trace.output(), &g, Some((head_w.data_mut(), head_b.data_mut())));
            if need_backbone {
                self.backbone.backward(&trace, &gz, Some(&mut bb_grads));
            }
        }
        let inv = 1.0 / xs.len() as f64;
        let mut grads = Vec::new();
        match self.mode {
            TuneMode::Head => {}
            TuneMode::Bias => grads.extend(bb_grads.into_iter().map(|(_, b)| b)),
            TuneMode::Full => {
                for (w, b) in bb_grads {
                    grads.push(w);
                    grads.push(b);
                }
            }
        }
        grads.push(head_w);
        grads.push(head_b);
        stats.finish();
        Ok((stats, grads.into_iter().map(|g| g.scale(inv)).collect()))
    }

    fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.logits(x))
    }
}

fn backbone_slot<'a>(backbone: &'a mut Backbone, name: &str) -> Result<&'a mut Tensor> {
    let bad = || Error::State(format!("unknown parameter `{name}`"));
    let rest = name.strip_prefix("backbone.").ok_or_else(bad)?;
    let (idx, field) = rest.split_once('.').ok_or_else(bad)?;
    let idx: usize = idx.parse().map_err(|_| bad())?;
    let layer = backbone.layers.get_mut(idx).ok_or_else(bad)?;
    match field {
        "weight" => Ok(&mut layer.weight),
        "bias" => Ok(&mut layer.bias),
        _ => Err(bad()),
    }
}

/// Mean cross-entropy of `logits_fn` over a labelled set.
pub fn mean_loss(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for (l, &y) in logits.iter().zip(labels) {
        total += cross_entropy_slice(l, y)?;
    }
    Ok(total / logits.len().max(1) as f64)
}
