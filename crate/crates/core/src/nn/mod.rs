//! Multi-head residual U-Net with an explicit representation/task split.
//!
//! The encoder has `depth` resolution levels. Every level after the first
//! starts with a stride-2 convolution, followed by `num_res_units` residual
//! units (conv → BN → act → conv → BN, identity skip, act). The decoder
//! mirrors it: each level starts with a stride-2 transposed convolution,
//! concatenates the encoder skip, fuses back to the level width and runs the
//! same residual units. Each task gets a head of exactly two layers, a 3×3
//! conv block and a 1×1 classifier with one output channel, and everything
//! under `head.<task>.` is tagged [`BlockTag::Task`].

mod snapshot;

pub use snapshot::{is_running_stat, BlockTag, ParamSnapshot, SnapshotEntry};

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::tensor::{Activation, BatchNormMode, Element, Gradients, Init, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("input spatial size {dims:?} is not divisible by {factor}")]
    IndivisibleInput { dims: Vec<usize>, factor: usize },
    #[error("input shape {got:?} does not match [N, {channels}, spatial x {rank}]")]
    InputShape {
        got: Vec<usize>,
        channels: usize,
        rank: usize,
    },
    #[error("parameter `{0}` missing from snapshot")]
    MissingName(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),
    #[error("parameter `{name}` has shape {got:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// 2 or 3.
    pub spatial_dims: usize,
    /// Number of resolution levels.
    pub depth: usize,
    /// Channel width of each level.
    pub channels: Vec<usize>,
    /// Residual units per encoder and decoder level.
    pub num_res_units: usize,
    pub in_channels: usize,
    pub tasks: Vec<String>,
    /// Layers per head counted from the output; only 2 is supported.
    pub task_block_layers: usize,
    pub activation: Activation,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            spatial_dims: 2,
            depth: 3,
            channels: vec![8, 16, 32],
            num_res_units: 2,
            in_channels: 1,
            tasks: vec!["liver".into(), "spleen".into()],
            task_block_layers: 2,
            activation: Activation::Relu,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    /// Five-level 3-D configuration with two residual units per level.
    pub fn volumetric() -> Self {
        Self {
            spatial_dims: 3,
            depth: 5,
            channels: vec![16, 32, 64, 128, 256],
            ..Self::default()
        }
    }

    /// Same backbone restricted to a subset of task heads.
    pub fn with_tasks<S: AsRef<str>>(&self, tasks: &[S]) -> Self {
        Self {
            tasks: tasks.iter().map(|t| t.as_ref().to_string()).collect(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if !(2..=3).contains(&self.spatial_dims) {
            return bad(format!("spatial_dims must be 2 or 3, got {}", self.spatial_dims));
        }
        if self.depth < 2 {
            return bad(format!("depth must be at least 2, got {}", self.depth));
        }
        if self.channels.len() != self.depth {
            return bad(format!(
                "{} channel counts given for depth {}",
                self.channels.len(),
                self.depth
            ));
        }
        if self.channels.contains(&0) || self.in_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.tasks.is_empty() {
            return bad("at least one task is required".into());
        }
        let mut seen = BTreeSet::new();
        for t in &self.tasks {
            if t.is_empty() || t.contains('.') || t.contains(char::is_whitespace) {
                return bad(format!("invalid task name `{t}`"));
            }
            if !seen.insert(t) {
                return bad(format!("duplicate task `{t}`"));
            }
        }
        if self.task_block_layers != 2 {
            return bad(format!(
                "task_block_layers must be 2, got {}",
                self.task_block_layers
            ));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("batch-norm eps must be positive and momentum in [0, 1]".into());
        }
        Ok(())
    }

    /// Spatial sizes must be divisible by this factor.
    pub fn size_factor(&self) -> usize {
        1 << (self.depth - 1)
    }
}

#[derive(Clone, Debug)]
struct Param<T: Element> {
    tag: BlockTag,
    tensor: Tensor<T>,
}

/// Representation and per-task parameter names of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub representation: Vec<String>,
    pub tasks: BTreeMap<String, Vec<String>>,
}

/// Which parameters [`Model::apply_snapshot`] overwrites.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Scope {
    All,
    RepresentationOnly,
    Task(String),
}

impl Scope {
    fn contains(&self, tag: &BlockTag) -> bool {
        match self {
            Scope::All => true,
            Scope::RepresentationOnly => tag.is_representation(),
            Scope::Task(t) => tag.task() == Some(t),
        }
    }
}

/// Leaves bound for one forward pass, used to route gradients back.
pub struct ForwardPass {
    pub logits: Var,
    bindings: Vec<(String, Var)>,
}

impl ForwardPass {
    pub fn bound_names(&self) -> impl Iterator<Item = &str> {
        self.bindings.iter().map(|(n, _)| n.as_str())
    }
}

/// Multi-head segmentation network.
#[derive(Clone, Debug)]
pub struct Model<T: Element = f32> {
    config: ModelConfig,
    params: BTreeMap<String, Param<T>>,
}

/// FNV-1a over the name, mixed with the model seed. Per-name seeding makes a
/// parameter's initial value independent of which other heads exist.
fn param_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

struct Ctx<'a, T: Element> {
    tape: &'a mut Tape<T>,
    mode: BatchNormMode,
    bindings: Vec<(String, Var)>,
}

impl<T: Element> Model<T> {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut m = Self {
            config: config.clone(),
            params: BTreeMap::new(),
        };
        let ch = &config.channels;
        for level in 0..config.depth {
            let cin = if level == 0 { config.in_channels } else { ch[level - 1] };
            m.add_conv_block(&format!("enc.{level}.in"), cin, ch[level], 3, false, seed)?;
            for u in 0..config.num_res_units {
                m.add_res_unit(&format!("enc.{level}.res.{u}"), ch[level], seed)?;
            }
        }
        for level in (0..config.depth - 1).rev() {
            m.add_conv_block(&format!("dec.{level}.up"), ch[level + 1], ch[level], 2, true, seed)?;
            m.add_conv_block(&format!("dec.{level}.fuse"), 2 * ch[level], ch[level], 3, false, seed)?;
            for u in 0..config.num_res_units {
                m.add_res_unit(&format!("dec.{level}.res.{u}"), ch[level], seed)?;
            }
        }
        for task in &config.tasks {
            m.add_head(task, seed)?;
        }
        Ok(m)
    }

    fn kernel_shape(&self, lead: [usize; 2], k: usize) -> Vec<usize> {
        let mut s = lead.to_vec();
        s.extend(std::iter::repeat(k).take(self.config.spatial_dims));
        s
    }

    fn insert(&mut self, name: String, tensor: Tensor<T>) {
        let tag = BlockTag::for_name(&name);
        let mut tensor = tensor;
        tensor.set_requires_grad(!is_running_stat(&name));
        self.params.insert(name, Param { tag, tensor });
    }

    fn add_bn(&mut self, prefix: &str, c: usize) -> Result<()> {
        self.insert(format!("{prefix}.gamma"), Tensor::full(&[c], 1.0)?);
        self.insert(format!("{prefix}.beta"), Tensor::zeros(&[c])?);
        self.insert(format!("{prefix}.running_mean"), Tensor::zeros(&[c])?);
        self.insert(format!("{prefix}.running_var"), Tensor::full(&[c], 1.0)?);
        Ok(())
    }

    fn add_conv_block(
        &mut self,
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
        transposed: bool,
        seed: u64,
    ) -> Result<()> {
        let name = format!("{prefix}.conv.weight");
        let shape = if transposed {
            self.kernel_shape([cin, cout], k)
        } else {
            self.kernel_shape([cout, cin], k)
        };
        let w = Tensor::create(
            &shape,
            Init::HeNormal {
                seed: param_seed(seed, &name),
            },
        )?;
        self.insert(name, w);
        self.add_bn(&format!("{prefix}.bn"), cout)
    }

    fn add_res_unit(&mut self, prefix: &str, c: usize, seed: u64) -> Result<()> {
        for i in 1..=2 {
            let name = format!("{prefix}.conv{i}.weight");
            let w = Tensor::create(
                &self.kernel_shape([c, c], 3),
                Init::HeNormal {
                    seed: param_seed(seed, &name),
                },
            )?;
            self.insert(name, w);
            self.add_bn(&format!("{prefix}.bn{i}"), c)?;
        }
        Ok(())
    }

    fn add_head(&mut self, task: &str, seed: u64) -> Result<()> {
        let c = self.config.channels[0];
        self.add_conv_block(&format!("head.{task}.conv"), c, c, 3, false, seed)?;
        let name = format!("head.{task}.classifier.weight");
        let w = Tensor::create(
            &self.kernel_shape([1, c], 1),
            Init::HeNormal {
                seed: param_seed(seed, &name),
            },
        )?;
        self.insert(name, w);
        self.insert(format!("head.{task}.classifier.bias"), Tensor::zeros(&[1])?);
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tasks(&self) -> &[String] {
        &self.config.tasks
    }

    pub fn has_task(&self, task: &str) -> bool {
        self.config.tasks.iter().any(|t| t == task)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).map(|p| &p.tensor)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name).map(|p| &mut p.tensor)
    }

    pub fn tag(&self, name: &str) -> Option<&BlockTag> {
        self.params.get(name).map(|p| &p.tag)
    }

    /// Number of stored scalars, running statistics included.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }

    /// Trainable tensors (running statistics excluded), in name order.
    pub fn trainable_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params
            .iter_mut()
            .filter(|(n, _)| !is_running_stat(n))
            .map(|(n, p)| (n.as_str(), &mut p.tensor))
    }

    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(|p| p.tensor.zero_grad());
    }

    pub fn partition_names(&self) -> Partition {
        let mut representation = Vec::new();
        let mut tasks: BTreeMap<String, Vec<String>> = self
            .config
            .tasks
            .iter()
            .map(|t| (t.clone(), Vec::new()))
            .collect();
        for (name, p) in &self.params {
            match &p.tag {
                BlockTag::Representation => representation.push(name.clone()),
                BlockTag::Task(t) => tasks.entry(t.clone()).or_default().push(name.clone()),
            }
        }
        Partition {
            representation,
            tasks,
        }
    }

    /// Deep copy of every parameter, running statistics included.
    pub fn extract_snapshot(&self) -> ParamSnapshot {
        let entries = self
            .params
            .iter()
            .map(|(name, p)| SnapshotEntry {
                name: name.clone(),
                tag: p.tag.clone(),
                tensor: p.tensor.cast::<f32>().detached(),
            })
            .collect();
        ParamSnapshot::new(entries).expect("model names are unique")
    }

    /// Overwrites every in-scope parameter from `snapshot`. Nothing is
    /// written unless all in-scope names are present with matching shapes.
    pub fn apply_snapshot(&mut self, snapshot: &ParamSnapshot, scope: &Scope) -> Result<()> {
        self.apply_snapshot_filtered(snapshot, scope, true)
    }

    /// As [`Model::apply_snapshot`], optionally leaving running statistics
    /// untouched.
    pub fn apply_snapshot_filtered(
        &mut self,
        snapshot: &ParamSnapshot,
        scope: &Scope,
        include_running_stats: bool,
    ) -> Result<()> {
        if let Scope::Task(t) = scope {
            if !self.has_task(t) {
                return Err(ModelError::UnknownTask(t.clone()));
            }
        }
        let in_scope = |name: &str, p: &Param<T>| {
            scope.contains(&p.tag) && (include_running_stats || !is_running_stat(name))
        };
        let mut missing = None;
        for (name, p) in &self.params {
            if !in_scope(name, p) {
                continue;
            }
            match snapshot.get(name) {
                None => {
                    missing.get_or_insert_with(|| name.clone());
                }
                Some(e) if e.tensor.shape() != p.tensor.shape() => {
                    return Err(ModelError::ShapeMismatch {
                        name: name.clone(),
                        expected: p.tensor.shape().to_vec(),
                        got: e.tensor.shape().to_vec(),
                    })
                }
                Some(_) => {}
            }
        }
        if let Some(name) = missing {
            return Err(ModelError::MissingName(name));
        }
        for (name, p) in self.params.iter_mut() {
            if !(scope.contains(&p.tag) && (include_running_stats || !is_running_stat(name))) {
                continue;
            }
            let src = snapshot.get(name).expect("validated above");
            for (d, &s) in p.tensor.data_mut().iter_mut().zip(src.tensor.data()) {
                *d = T::from_f32(s).expect("f32 converts");
            }
        }
        Ok(())
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let rank = self.config.spatial_dims;
        if shape.len() != rank + 2 || shape[1] != self.config.in_channels {
            return Err(ModelError::InputShape {
                got: shape.to_vec(),
                channels: self.config.in_channels,
                rank,
            });
        }
        let factor = self.config.size_factor();
        if shape[2..].iter().any(|d| d % factor != 0) {
            return Err(ModelError::IndivisibleInput {
                dims: shape[2..].to_vec(),
                factor,
            });
        }
        Ok(())
    }

    fn bind(&self, ctx: &mut Ctx<'_, T>, name: &str) -> Result<Var> {
        let p = &self.params[name];
        let v = ctx.tape.leaf(&p.tensor)?;
        ctx.bindings.push((name.to_string(), v));
        Ok(v)
    }

    fn batch_norm(&mut self, ctx: &mut Ctx<'_, T>, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.bind(ctx, &format!("{prefix}.gamma"))?;
        let beta = self.bind(ctx, &format!("{prefix}.beta"))?;
        let mean_name = format!("{prefix}.running_mean");
        let var_name = format!("{prefix}.running_var");
        let mut mean = self.params[&mean_name].tensor.clone();
        let mut var = self.params[&var_name].tensor.clone();
        let (eps, momentum) = (self.config.bn_eps, self.config.bn_momentum);
        let y = ctx
            .tape
            .batch_norm_nd(x, gamma, beta, &mut mean, &mut var, ctx.mode, eps, momentum)?;
        if ctx.mode == BatchNormMode::Train {
            self.params.get_mut(&mean_name).expect("bn param").tensor = mean;
            self.params.get_mut(&var_name).expect("bn param").tensor = var;
        }
        Ok(y)
    }

    /// conv (or transposed conv) → BN → activation.
    fn conv_block(
        &mut self,
        ctx: &mut Ctx<'_, T>,
        x: Var,
        prefix: &str,
        stride: usize,
        transposed: bool,
    ) -> Result<Var> {
        let w = self.bind(ctx, &format!("{prefix}.conv.weight"))?;
        let y = if transposed {
            ctx.tape.conv_transpose_nd(x, w, None, &[stride], &[0])?
        } else {
            ctx.tape.conv_nd(x, w, None, &[stride], &[1])?
        };
        let y = self.batch_norm(ctx, y, &format!("{prefix}.bn"))?;
        Ok(ctx.tape.activation(y, self.config.activation)?)
    }

    fn res_unit(&mut self, ctx: &mut Ctx<'_, T>, x: Var, prefix: &str) -> Result<Var> {
        let w1 = self.bind(ctx, &format!("{prefix}.conv1.weight"))?;
        let h = ctx.tape.conv_nd(x, w1, None, &[1], &[1])?;
        let h = self.batch_norm(ctx, h, &format!("{prefix}.bn1"))?;
        let h = ctx.tape.activation(h, self.config.activation)?;
        let w2 = self.bind(ctx, &format!("{prefix}.conv2.weight"))?;
        let h = ctx.tape.conv_nd(h, w2, None, &[1], &[1])?;
        let h = self.batch_norm(ctx, h, &format!("{prefix}.bn2"))?;
        let y = ctx.tape.add(x, h)?;
        Ok(ctx.tape.activation(y, self.config.activation)?)
    }

    /// Records a forward pass for `task` on `tape`, binding the touched
    /// parameters as leaves. Only the requested head is bound.
    pub fn forward_on_tape(
        &mut self,
        tape: &mut Tape<T>,
        input: Var,
        task: &str,
        mode: BatchNormMode,
    ) -> Result<ForwardPass> {
        if !self.has_task(task) {
            return Err(ModelError::UnknownTask(task.to_string()));
        }
        self.check_input(tape.value(input)?.shape())?;
        let mut ctx = Ctx {
            tape,
            mode,
            bindings: Vec::new(),
        };
        let (depth, units) = (self.config.depth, self.config.num_res_units);
        let mut skips = Vec::with_capacity(depth);
        let mut x = input;
        for level in 0..depth {
            let stride = if level == 0 { 1 } else { 2 };
            x = self.conv_block(&mut ctx, x, &format!("enc.{level}.in"), stride, false)?;
            for u in 0..units {
                x = self.res_unit(&mut ctx, x, &format!("enc.{level}.res.{u}"))?;
            }
            skips.push(x);
        }
        for level in (0..depth - 1).rev() {
            x = self.conv_block(&mut ctx, x, &format!("dec.{level}.up"), 2, true)?;
            x = ctx.tape.concat_channels(x, skips[level])?;
            x = self.conv_block(&mut ctx, x, &format!("dec.{level}.fuse"), 1, false)?;
            for u in 0..units {
                x = self.res_unit(&mut ctx, x, &format!("dec.{level}.res.{u}"))?;
            }
        }
        x = self.conv_block(&mut ctx, x, &format!("head.{task}.conv"), 1, false)?;
        let w = self.bind(&mut ctx, &format!("head.{task}.classifier.weight"))?;
        let b = self.bind(&mut ctx, &format!("head.{task}.classifier.bias"))?;
        let logits = ctx.tape.conv_nd(x, w, Some(b), &[1], &[0])?;
        Ok(ForwardPass {
            logits,
            bindings: ctx.bindings,
        })
    }

    /// Logits of `task` for `input[N, C, spatial...]`.
    pub fn forward(&mut self, input: &Tensor<T>, task: &str, mode: BatchNormMode) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(input.detached())?;
        let pass = self.forward_on_tape(&mut tape, x, task, mode)?;
        Ok(tape.value(pass.logits)?.clone())
    }

    /// Adds the gradients of the bound leaves into the parameters.
    pub fn accumulate_grads(&mut self, pass: &ForwardPass, grads: &Gradients<T>) -> Result<()> {
        for (name, var) in &pass.bindings {
            if let Some(g) = grads.get(*var)? {
                self.params
                    .get_mut(name)
                    .expect("bound parameter exists")
                    .tensor
                    .accumulate_grad(g.data())?;
            }
        }
        Ok(())
    }
}
