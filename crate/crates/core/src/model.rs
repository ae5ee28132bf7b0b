//! Multi-task architecture with per-task manifold maps.
//!
//! Every task owns an encoder, a forward map into the shared manifold, an
//! inverse map back to its own latent space, and a regression head. All tasks
//! share one embedder. Stacks are affine layers with `tanh` between them and a
//! linear output layer.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{GateError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaskId(String);

impl TaskId {
    pub fn new(name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if name.is_empty() || !name.is_ascii() || name.contains([',', '\n', '\r']) {
            return Err(GateError::InvalidArgument(format!(
                "task id must be nonempty ASCII without commas, got {name:?}"
            )));
        }
        Ok(Self(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Ordered set of task ids; a task's position is its index everywhere else.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskRegistry {
    ids: Vec<TaskId>,
}

impl TaskRegistry {
    pub fn new(ids: Vec<TaskId>) -> Result<Self> {
        for (i, id) in ids.iter().enumerate() {
            if ids[..i].contains(id) {
                return Err(GateError::InvalidArgument(format!("duplicate task `{id}`")));
            }
        }
        Ok(Self { ids })
    }

    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let ids = names
            .iter()
            .map(|n| TaskId::new(n.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(ids)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[TaskId] {
        &self.ids
    }

    pub fn name(&self, index: usize) -> &str {
        self.ids[index].as_str()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.ids
            .iter()
            .position(|id| id.as_str() == name)
            .ok_or_else(|| GateError::UnknownTask(name.to_string()))
    }
}

/// Layer sizes of the architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// input feature dimension
    pub d_x: usize,
    /// embedding / per-task latent dimension
    pub d_z: usize,
    /// shared manifold dimension
    pub d_m: usize,
    pub embed_hidden: Vec<usize>,
    /// hidden widths for encoders and both manifold maps
    pub map_hidden: Vec<usize>,
    /// hidden widths for the regression heads
    pub head_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_x: 16,
            d_z: 32,
            d_m: 32,
            embed_hidden: vec![64, 64],
            map_hidden: vec![64],
            head_hidden: vec![],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [("d_x", self.d_x), ("d_z", self.d_z), ("d_m", self.d_m)];
        for (name, d) in dims {
            if d == 0 {
                return Err(GateError::config(format!("model.{name}"), "must be positive"));
            }
        }
        for (name, hidden) in [
            ("embed_hidden", &self.embed_hidden),
            ("map_hidden", &self.map_hidden),
            ("head_hidden", &self.head_hidden),
        ] {
            if hidden.contains(&0) {
                return Err(GateError::config(
                    format!("model.{name}"),
                    "hidden widths must be positive",
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `[fan_in, fan_out]`
    pub weight: Tensor,
    /// `[1, fan_out]`
    pub bias: Tensor,
}

impl Dense {
    fn glorot(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-a..=a))
            .collect();
        Self {
            weight: Tensor::matrix(fan_in, fan_out, data).expect("positive dims"),
            bias: Tensor::zeros(vec![1, fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Affine layers with `tanh` on every hidden layer and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

impl Mlp {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(GateError::InvalidModel("stack needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].fan_out() != w[1].fan_in() {
                return Err(GateError::InvalidModel(format!(
                    "layer widths {} and {} do not chain",
                    w[0].fan_out(),
                    w[1].fan_in()
                )));
            }
        }
        for l in &layers {
            if l.bias.shape() != [1, l.fan_out()] {
                return Err(GateError::InvalidModel("bias must be [1, fan_out]".into()));
            }
        }
        Ok(Self { layers })
    }

    /// Glorot-uniform weights, zero biases. `widths` lists every layer
    /// boundary, input first.
    pub fn random(widths: &[usize], rng: &mut ChaCha8Rng) -> Self {
        assert!(widths.len() >= 2);
        let layers = widths
            .windows(2)
            .map(|w| Dense::glorot(w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    /// Single affine layer computing the identity.
    pub fn identity(dim: usize) -> Self {
        Self {
            layers: vec![Dense {
                weight: Tensor::identity(dim),
                bias: Tensor::zeros(vec![1, dim]),
            }],
        }
    }

    pub fn zeros(widths: &[usize]) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| Dense {
                weight: Tensor::zeros(vec![w[0], w[1]]),
                bias: Tensor::zeros(vec![1, w[1]]),
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").fan_out()
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        let mut reg = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let layers = self
            .layers
            .iter()
            .map(|l| (reg(&l.weight), reg(&l.bias)))
            .collect();
        BoundMlp {
            layers,
            input_dim: self.input_dim(),
        }
    }
}

/// An [`Mlp`] whose parameters live on a tape.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    layers: Vec<(Var, Var)>,
    input_dim: usize,
}

impl BoundMlp {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        if tape.value(x).cols() != self.input_dim {
            return Err(GateError::ShapeMismatch {
                op: "mlp input",
                left: tape.value(x).shape().to_vec(),
                right: vec![self.input_dim],
            });
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = tape.matmul(h, w)?;
            h = tape.add_bias(h, b)?;
            if i < last {
                h = tape.tanh(h)?;
            }
        }
        Ok(h)
    }

    fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }
}

/// Encoder, manifold maps and head for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskModules {
    pub encoder: Mlp,
    pub to_manifold: Mlp,
    pub from_manifold: Mlp,
    pub head: Mlp,
}

/// All trainable parameters (θ).
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    registry: TaskRegistry,
    d_x: usize,
    d_z: usize,
    d_m: usize,
    embedder: Mlp,
    tasks: Vec<TaskModules>,
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut w = Vec::with_capacity(hidden.len() + 2);
    w.push(input);
    w.extend_from_slice(hidden);
    w.push(output);
    w
}

impl GateParams {
    /// Random initialization. Each stack draws from one seeded stream in a
    /// fixed order (embedder, then each task's encoder, maps and head).
    pub fn init(config: &ModelConfig, registry: TaskRegistry, seed: u64) -> Result<Self> {
        config.validate()?;
        if registry.is_empty() {
            return Err(GateError::InvalidModel("at least one task is required".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedder = Mlp::random(&widths(config.d_x, &config.embed_hidden, config.d_z), &mut rng);
        let tasks = (0..registry.len())
            .map(|_| TaskModules {
                encoder: Mlp::random(&widths(config.d_z, &config.map_hidden, config.d_z), &mut rng),
                to_manifold: Mlp::random(
                    &widths(config.d_z, &config.map_hidden, config.d_m),
                    &mut rng,
                ),
                from_manifold: Mlp::random(
                    &widths(config.d_m, &config.map_hidden, config.d_z),
                    &mut rng,
                ),
                head: Mlp::random(&widths(config.d_z, &config.head_hidden, 1), &mut rng),
            })
            .collect();
        Ok(Self {
            registry,
            d_x: config.d_x,
            d_z: config.d_z,
            d_m: config.d_m,
            embedder,
            tasks,
        })
    }

    /// Assemble from explicit stacks, checking every dimension.
    pub fn from_parts(
        registry: TaskRegistry,
        embedder: Mlp,
        tasks: Vec<TaskModules>,
    ) -> Result<Self> {
        if registry.is_empty() || registry.len() != tasks.len() {
            return Err(GateError::InvalidModel(format!(
                "{} tasks registered but {} module sets given",
                registry.len(),
                tasks.len()
            )));
        }
        let d_x = embedder.input_dim();
        let d_z = embedder.output_dim();
        let d_m = tasks[0].to_manifold.output_dim();
        for (i, t) in tasks.iter().enumerate() {
            let ok = t.encoder.input_dim() == d_z
                && t.encoder.output_dim() == d_z
                && t.to_manifold.input_dim() == d_z
                && t.to_manifold.output_dim() == d_m
                && t.from_manifold.input_dim() == d_m
                && t.from_manifold.output_dim() == d_z
                && t.head.input_dim() == d_z
                && t.head.output_dim() == 1;
            if !ok {
                return Err(GateError::InvalidModel(format!(
                    "modules of task `{}` do not match d_z={d_z}, d_m={d_m}",
                    registry.name(i)
                )));
            }
        }
        Ok(Self {
            registry,
            d_x,
            d_z,
            d_m,
            embedder,
            tasks,
        })
    }

    pub fn registry(&self) -> &TaskRegistry {
        &self.registry
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.d_x, self.d_z, self.d_m)
    }

    pub fn embedder(&self) -> &Mlp {
        &self.embedder
    }

    pub fn task(&self, index: usize) -> &TaskModules {
        &self.tasks[index]
    }

    pub fn task_mut(&mut self, index: usize) -> &mut TaskModules {
        &mut self.tasks[index]
    }

    fn stacks(&self) -> impl Iterator<Item = &Mlp> {
        std::iter::once(&self.embedder).chain(
            self.tasks
                .iter()
                .flat_map(|t| [&t.encoder, &t.to_manifold, &t.from_manifold, &t.head]),
        )
    }

    /// Every parameter tensor in canonical order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.stacks()
            .flat_map(|m| m.layers.iter().flat_map(|l| [&l.weight, &l.bias]))
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        std::iter::once(&mut self.embedder)
            .chain(self.tasks.iter_mut().flat_map(|t| {
                [
                    &mut t.encoder,
                    &mut t.to_manifold,
                    &mut t.from_manifold,
                    &mut t.head,
                ]
            }))
            .flat_map(|m| m.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]))
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// SHA-256 over the little-endian bytes of every parameter.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in self.tensors() {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }

    /// Put every parameter on `tape`, as leaves when `trainable`, otherwise as
    /// constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundGate {
        BoundGate {
            embedder: self.embedder.bind(tape, trainable),
            tasks: self
                .tasks
                .iter()
                .map(|t| BoundTask {
                    encoder: t.encoder.bind(tape, trainable),
                    to_manifold: t.to_manifold.bind(tape, trainable),
                    from_manifold: t.from_manifold.bind(tape, trainable),
                    head: t.head.bind(tape, trainable),
                })
                .collect(),
        }
    }

    /// Reuse existing tape vars (in [`GateParams::tensors`] order) as the
    /// parameters, e.g. leaves perturbed by a gradient check.
    pub fn bind_vars(&self, tape: &Tape, vars: &[Var]) -> Result<BoundGate> {
        let tensors = self.tensors();
        if vars.len() != tensors.len() {
            return Err(GateError::InvalidArgument(format!(
                "expected {} parameter vars, got {}",
                tensors.len(),
                vars.len()
            )));
        }
        for (v, t) in vars.iter().zip(&tensors) {
            if tape.value(*v).shape() != t.shape() {
                return Err(GateError::ShapeMismatch {
                    op: "bind vars",
                    left: tape.value(*v).shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
        }
        let mut it = vars.iter().copied();
        let mut take = |m: &Mlp| BoundMlp {
            layers: m
                .layers
                .iter()
                .map(|_| (it.next().expect("counted"), it.next().expect("counted")))
                .collect(),
            input_dim: m.input_dim(),
        };
        let embedder = take(&self.embedder);
        let tasks = self
            .tasks
            .iter()
            .map(|t| BoundTask {
                encoder: take(&t.encoder),
                to_manifold: take(&t.to_manifold),
                from_manifold: take(&t.from_manifold),
                head: take(&t.head),
            })
            .collect();
        Ok(BoundGate { embedder, tasks })
    }

    fn input(&self, x: &Tensor, expected: usize, what: &'static str) -> Result<Tensor> {
        let t = match x.shape() {
            [n] => Tensor::matrix(1, *n, x.data().to_vec())?,
            _ => x.clone(),
        };
        if t.shape().len() != 2 || t.cols() != expected {
            return Err(GateError::ShapeMismatch {
                op: what,
                left: x.shape().to_vec(),
                right: vec![expected],
            });
        }
        Ok(t)
    }

    fn eval<F>(&self, x: &Tensor, expected: usize, what: &'static str, f: F) -> Result<Tensor>
    where
        F: FnOnce(&mut Tape, &BoundGate, Var) -> Result<Var>,
    {
        let input = self.input(x, expected, what)?;
        let mut tape = Tape::new();
        let gate = self.bind(&mut tape, false);
        let xv = tape.constant(input);
        let out = f(&mut tape, &gate, xv)?;
        Ok(tape.value(out).clone())
    }

    /// `[B, d_x]` (or a single `[d_x]` vector) to `[B, d_z]`.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        self.eval(x, self.d_x, "embed", |tape, g, xv| g.embed(tape, xv))
    }

    pub fn encode(&self, z: &Tensor, task: &str) -> Result<Tensor> {
        let i = self.registry.index_of(task)?;
        self.eval(z, self.d_z, "encode", |tape, g, zv| g.encode(tape, zv, i))
    }

    pub fn to_manifold(&self, z_task: &Tensor, task: &str) -> Result<Tensor> {
        let i = self.registry.index_of(task)?;
        self.eval(z_task, self.d_z, "to_manifold", |tape, g, v| {
            g.to_manifold(tape, v, i)
        })
    }

    pub fn from_manifold(&self, z_m: &Tensor, task: &str) -> Result<Tensor> {
        let i = self.registry.index_of(task)?;
        self.eval(z_m, self.d_m, "from_manifold", |tape, g, v| {
            g.from_manifold(tape, v, i)
        })
    }

    pub fn head(&self, z_task: &Tensor, task: &str) -> Result<Tensor> {
        let i = self.registry.index_of(task)?;
        self.eval(z_task, self.d_z, "head", |tape, g, v| g.head(tape, v, i))
    }

    /// `h_t(encoder_t(embed(x)))`, one prediction per row.
    pub fn predict_direct(&self, x: &Tensor, target: &str) -> Result<Vec<f64>> {
        let t = self.registry.index_of(target)?;
        let out = self.eval(x, self.d_x, "predict_direct", |tape, g, xv| {
            let z = g.embed(tape, xv)?;
            g.predict_direct(tape, z, t)
        })?;
        Ok(out.into_data())
    }

    /// `h_t(from_manifold_t(to_manifold_s(encoder_s(embed(x)))))`.
    pub fn predict_via_source(&self, x: &Tensor, target: &str, source: &str) -> Result<Vec<f64>> {
        let t = self.registry.index_of(target)?;
        let s = self.registry.index_of(source)?;
        if s == t {
            return Err(GateError::SelfTransfer(source.to_string()));
        }
        let out = self.eval(x, self.d_x, "predict_via_source", |tape, g, xv| {
            let z = g.embed(tape, xv)?;
            let zs = g.encode(tape, z, s)?;
            let zm = g.to_manifold(tape, zs, s)?;
            g.predict_from_manifold(tape, zm, t)
        })?;
        Ok(out.into_data())
    }
}

#[derive(Debug, Clone)]
struct BoundTask {
    encoder: BoundMlp,
    to_manifold: BoundMlp,
    from_manifold: BoundMlp,
    head: BoundMlp,
}

/// [`GateParams`] placed on a tape.
#[derive(Debug, Clone)]
pub struct BoundGate {
    embedder: BoundMlp,
    tasks: Vec<BoundTask>,
}

impl BoundGate {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn embed(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.embedder.forward(tape, x)
    }

    pub fn encode(&self, tape: &mut Tape, z: Var, task: usize) -> Result<Var> {
        self.tasks[task].encoder.forward(tape, z)
    }

    pub fn to_manifold(&self, tape: &mut Tape, z_task: Var, task: usize) -> Result<Var> {
        self.tasks[task].to_manifold.forward(tape, z_task)
    }

    pub fn from_manifold(&self, tape: &mut Tape, z_m: Var, task: usize) -> Result<Var> {
        self.tasks[task].from_manifold.forward(tape, z_m)
    }

    pub fn head(&self, tape: &mut Tape, z_task: Var, task: usize) -> Result<Var> {
        self.tasks[task].head.forward(tape, z_task)
    }

    /// Direct prediction from an embedding batch.
    pub fn predict_direct(&self, tape: &mut Tape, z: Var, target: usize) -> Result<Var> {
        let zt = self.encode(tape, z, target)?;
        self.head(tape, zt, target)
    }

    /// Prediction for `target` from a manifold point.
    pub fn predict_from_manifold(&self, tape: &mut Tape, z_m: Var, target: usize) -> Result<Var> {
        let zt = self.from_manifold(tape, z_m, target)?;
        self.head(tape, zt, target)
    }

    /// Vars in the same order as [`GateParams::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        std::iter::once(&self.embedder)
            .chain(
                self.tasks
                    .iter()
                    .flat_map(|t| [&t.encoder, &t.to_manifold, &t.from_manifold, &t.head]),
            )
            .flat_map(|m| m.vars().collect::<Vec<_>>())
            .collect()
    }
}
