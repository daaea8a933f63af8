use super::backbone::{Affine, Backbone, BackboneTrace};
use super::gate::GatePair;
use crate::deq::{Activation, DeqStack, SolverConfig, StackTrace, DEFAULT_KAPPA, DEFAULT_POWER_ITERS};
use crate::error::{Error, Result};
use crate::numerics::{check_unique_names, dot, softmax, Param, Tensor};
use crate::rng::{self, streams};
use crate::robust_opt::{BatchStats, Trainable};

/// Initial gate logits. Non-zero so both carry a criticality score from the
/// first step; `α ≈ 0.73` favours the unprompted path.
pub const GATE_INIT: GatePair = GatePair {
    g_alpha: 0.5,
    g_beta: -0.5,
};

/// Construction settings for a [`PromptModel`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PromptConfig {
    pub classes: usize,
    /// Cells per prompt block.
    pub layers: usize,
    pub kappa: f64,
    pub activation: Activation,
    pub solver: SolverConfig,
    /// Feed `F(x̃)` to the representation prompt instead of `F(x)`, saving a
    /// backbone pass. Off by default.
    pub single_pass: bool,
    pub power_iters: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            classes: 2,
            layers: 1,
            kappa: DEFAULT_KAPPA,
            activation: Activation::Tanh,
            solver: SolverConfig::default(),
            single_pass: false,
            power_iters: DEFAULT_POWER_ITERS,
        }
    }
}

/// Frozen backbone wrapped by an input prompt block and a representation
/// prompt block, each blended in through a [`GatePair`]:
///
/// ```text
/// x̃ = α₁ x + β₁ P₁(x)
/// z̃ = α₂ F(x̃) + β₂ proj(P₂(F(x)))
/// logits = head(z̃)
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct PromptModel {
    pub p1: DeqStack,
    pub p2: DeqStack,
    pub proj: Affine,
    pub head: Affine,
    pub gate1: GatePair,
    pub gate2: GatePair,
    pub backbone: Backbone,
    pub solver: SolverConfig,
    pub single_pass: bool,
    pub power_iters: usize,
}

struct Trace {
    alpha1: (f64, f64),
    alpha2: (f64, f64),
    p1: StackTrace,
    bb_tilde: BackboneTrace,
    p2: StackTrace,
    r: Vec<f64>,
    z_tilde: Vec<f64>,
    logits: Vec<f64>,
}

impl PromptModel {
    /// Fresh prompt blocks around `backbone`, seeded from `seed`. The head is
    /// zero-initialised, gates start at [`GATE_INIT`]; cells and projection use
    /// `±1/√fan_in`.
    pub fn new(mut backbone: Backbone, cfg: &PromptConfig, seed: u64) -> Result<Self> {
        cfg.solver.validate()?;
        if cfg.classes < 2 {
            return Err(Error::Argument(format!("need at least 2 classes, got {}", cfg.classes)));
        }
        backbone.frozen = true;
        let d = backbone.input_dim();
        let h = backbone.output_dim();
        let mut r = rng::stream(seed, streams::INIT_PROMPT);
        let p1 = DeqStack::init(cfg.layers, d, d, cfg.kappa, cfg.activation, &mut r)?;
        let p2 = DeqStack::init(cfg.layers, h, h, cfg.kappa, cfg.activation, &mut r)?;
        let proj = Affine::uniform(h, h, &mut r);
        Ok(Self {
            p1,
            p2,
            proj,
            head: Affine::zeros(h, cfg.classes),
            gate1: GATE_INIT,
            gate2: GATE_INIT,
            backbone,
            solver: cfg.solver,
            single_pass: cfg.single_pass,
            power_iters: cfg.power_iters,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.backbone.input_dim()
    }

    pub fn repr_dim(&self) -> usize {
        self.backbone.output_dim()
    }

    pub fn classes(&self) -> usize {
        self.head.output_dim()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::dim("PromptModel input", &[self.input_dim()], &[x.len()]));
        }
        Ok(())
    }

    fn blend_input_trace(&self, x: &[f64]) -> Result<((f64, f64), StackTrace, Vec<f64>)> {
        self.check_input(x)?;
        let (a, b) = self.gate1.coeffs();
        let p1 = self.p1.forward(x, &self.solver)?;
        let x_tilde = x.iter().zip(p1.output()).map(|(xi, pi)| a * xi + b * pi).collect();
        Ok(((a, b), p1, x_tilde))
    }

    /// `x̃ = α₁ x + β₁ P₁(x)`.
    pub fn blend_input(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.blend_input_trace(x)?.2)
    }

    /// `z̃ = α₂ F(x̃) + β₂ proj(P₂(z))` with `z = F(x)` (or `F(x̃)` in single-pass mode).
    pub fn blend_repr(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(x)?.z_tilde)
    }

    fn trace(&self, x: &[f64]) -> Result<Trace> {
        let (alpha1, p1, x_tilde) = self.blend_input_trace(x)?;
        let bb_tilde = self.backbone.forward_trace(&x_tilde);
        let z_src = if self.single_pass {
            bb_tilde.output().to_vec()
        } else {
            self.backbone.forward(x)
        };
        let p2 = self.p2.forward(&z_src, &self.solver)?;
        let r = self.proj.apply(p2.output());
        let alpha2 = self.gate2.coeffs();
        let z_tilde: Vec<f64> = bb_tilde
            .output()
            .iter()
            .zip(&r)
            .map(|(f, ri)| alpha2.0 * f + alpha2.1 * ri)
            .collect();
        let logits = self.head.apply(&z_tilde);
        Ok(Trace {
            alpha1,
            alpha2,
            p1,
            bb_tilde,
            p2,
            r,
            z_tilde,
            logits,
        })
    }

    pub fn forward_full(&self, x: &[f64]) -> Result<Tensor> {
        Tensor::vector(self.trace(x)?.logits)
    }

    /// Row-wise forward over an `N × d` batch.
    pub fn forward_batch(&self, xs: &Tensor) -> Result<Tensor> {
        if xs.rank() != 2 {
            return Err(Error::dim("forward_batch", &[0, self.input_dim()], xs.shape()));
        }
        let mut out = Vec::with_capacity(xs.rows() * self.classes());
        for i in 0..xs.rows() {
            out.extend(self.trace(xs.row(i))?.logits);
        }
        Tensor::matrix(xs.rows(), self.classes(), out)
    }

    /// Mean cross-entropy over a batch.
    pub fn loss(&self, xs: &[&[f64]], labels: &[usize]) -> Result<f64> {
        Ok(self.batch_gradient(xs, labels)?.0.loss)
    }

    pub fn trainable_param_count(&self) -> usize {
        self.export_params().iter().map(Param::len).sum()
    }

    fn named_trainables(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (prefix, stack) in [("p1", &self.p1), ("p2", &self.p2)] {
            for (k, c) in stack.cells.iter().enumerate() {
                out.push((format!("{prefix}.{k}.w"), c.w.clone()));
                out.push((format!("{prefix}.{k}.u"), c.u.clone()));
                out.push((format!("{prefix}.{k}.b"), c.b.clone()));
            }
        }
        out.push(("proj.weight".into(), self.proj.weight.clone()));
        out.push(("proj.bias".into(), self.proj.bias.clone()));
        out.push(("head.weight".into(), self.head.weight.clone()));
        out.push(("head.bias".into(), self.head.bias.clone()));
        for (prefix, g) in [("gate1", self.gate1), ("gate2", self.gate2)] {
            out.push((format!("{prefix}.g_alpha"), Tensor::from_parts(vec![], vec![g.g_alpha])));
            out.push((format!("{prefix}.g_beta"), Tensor::from_parts(vec![], vec![g.g_beta])));
        }
        out
    }

    /// Backward pass for one sample; appends gradients into `acc` (aligned
    /// with [`Trainable::export_params`]).
    fn accumulate_sample(&self, x: &[f64], label: usize, acc: &mut [Tensor], stats: &mut BatchStats) -> Result<()> {
        let t = self.trace(x)?;
        stats.record(&t.logits, label)?;
        let mut g_logits = softmax(&t.logits);
        g_logits[label] -= 1.0;

        let n1 = self.p1.layers() * 3;
        let n2 = self.p2.layers() * 3;
        let (i_proj, i_head, i_gate) = (n1 + n2, n1 + n2 + 2, n1 + n2 + 4);

        // head
        let (hw, rest) = acc[i_head..].split_at_mut(1);
        let g_zt = self
            .head
            .backward(&t.z_tilde, &g_logits, Some((hw[0].data_mut(), rest[0].data_mut())));

        // gate 2
        let (a2, b2) = t.alpha2;
        let (ga, gb) = self.gate2.backward(dot(&g_zt, t.bb_tilde.output()), dot(&g_zt, &t.r));
        acc[i_gate + 2].data_mut()[0] += ga;
        acc[i_gate + 3].data_mut()[0] += gb;
        let mut g_a: Vec<f64> = g_zt.iter().map(|g| a2 * g).collect();
        let g_r: Vec<f64> = g_zt.iter().map(|g| b2 * g).collect();

        // projection and representation prompt
        let (pw, rest) = acc[i_proj..].split_at_mut(1);
        let g_q = self
            .proj
            .backward(t.p2.output(), &g_r, Some((pw[0].data_mut(), rest[0].data_mut())));
        let (p2_grads, g_z_src) = self.p2.backward(&t.p2, &g_q, &self.solver)?;
        for (k, g) in p2_grads.iter().enumerate() {
            add_cell_grads(&mut acc[n1 + 3 * k..n1 + 3 * k + 3], g);
        }
        if self.single_pass {
            for (a, z) in g_a.iter_mut().zip(&g_z_src) {
                *a += z;
            }
        }

        // frozen backbone: input cotangent only
        let g_xt = self.backbone.backward(&t.bb_tilde, &g_a, None);

        // gate 1 and input prompt
        let (_, b1) = t.alpha1;
        let (ga, gb) = self.gate1.backward(dot(&g_xt, x), dot(&g_xt, t.p1.output()));
        acc[i_gate].data_mut()[0] += ga;
        acc[i_gate + 1].data_mut()[0] += gb;
        let g_u1: Vec<f64> = g_xt.iter().map(|g| b1 * g).collect();
        let (p1_grads, _) = self.p1.backward(&t.p1, &g_u1, &self.solver)?;
        for (k, g) in p1_grads.iter().enumerate() {
            add_cell_grads(&mut acc[3 * k..3 * k + 3], g);
        }
        Ok(())
    }

    /// `(α₁, α₂)` at the current gate values.
    pub fn alphas(&self) -> (f64, f64) {
        (self.gate1.coeffs().0, self.gate2.coeffs().0)
    }
}

fn add_cell_grads(slots: &mut [Tensor], g: &crate::deq::DeqGrads) {
    for (slot, src) in slots.iter_mut().zip([&g.w, &g.u, &g.b]) {
        for (a, &v) in slot.data_mut().iter_mut().zip(src.data()) {
            *a += v;
        }
    }
}

impl Trainable for PromptModel {
    fn export_params(&self) -> Vec<Param> {
        self.named_trainables()
            .into_iter()
            .map(|(n, t)| Param::new(n, t))
            .collect()
    }

    /// Writes values back and re-projects every cell onto the contraction set.
    fn import_params(&mut self, params: &[Param]) -> Result<()> {
        let expected = self.named_trainables();
        if params.len() != expected.len() {
            return Err(Error::State(format!(
                "expected {} parameters, got {}",
                expected.len(),
                params.len()
            )));
        }
        check_unique_names(params.iter().map(|p| p.name.as_str()))?;
        for (p, (name, cur)) in params.iter().zip(&expected) {
            if &p.name != name {
                return Err(Error::State(format!("expected `{name}`, got `{}`", p.name)));
            }
            if p.value.shape() != cur.shape() {
                return Err(Error::dim("import_params", cur.shape(), p.value.shape()));
            }
        }
        let mut it = params.iter().map(|p| p.value.clone());
        let mut next = || it.next().expect("length checked above");
        for stack in [&mut self.p1, &mut self.p2] {
            for c in &mut stack.cells {
                c.w = next();
                c.u = next();
                c.b = next();
            }
        }
        self.proj.weight = next();
        self.proj.bias = next();
        self.head.weight = next();
        self.head.bias = next();
        for g in [&mut self.gate1, &mut self.gate2] {
            g.g_alpha = next().item();
            g.g_beta = next().item();
        }
        self.p1 = self.p1.spectral_normalize(self.power_iters)?;
        self.p2 = self.p2.spectral_normalize(self.power_iters)?;
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
        let mut acc: Vec<Tensor> = self
            .named_trainables()
            .iter()
            .map(|(_, t)| Tensor::zeros_like(t))
            .collect();
        let mut stats = BatchStats::default();
        for (x, &y) in xs.iter().zip(labels) {
            self.accumulate_sample(x, y, &mut acc, &mut stats)?;
        }
        stats.finish();
        let inv = 1.0 / xs.len() as f64;
        Ok((stats, acc.into_iter().map(|g| g.scale(inv)).collect()))
    }

    fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(x)?.logits)
    }

    fn diagnostics(&self) -> Vec<(&'static str, f64)> {
        let (a1, a2) = self.alphas();
        vec![("alpha1", a1), ("alpha2", a2)]
    }
}
