//! Classifier construction and inference.
//!
//! A [`Model`] is a stack of conv/pool/dropout/dense layers (the trunk)
//! feeding one or two logits heads. The defended variants grow a second
//! head `Z'` beside the original head `Z`; the locked variant additionally
//! routes `Z'` through a frozen two-layer lock unit `g` and exposes the
//! combined head `Z* = Z ⊙ g(Z')`, entangling the two heads' input
//! gradients.

mod store;
mod train;

pub use store::{load_weights, save_weights};
pub use train::{fit_cross_entropy, train_epoch, Adam, Batch, EpochMetrics, LossParts, OptimizerCfg};

use serde::{Deserialize, Serialize};

use crate::container::ContainerError;
use crate::rng::SplitMix64;
use crate::tensor::check::{check_gradient, FdOptions, FdReport, LossProbe};
use crate::tensor::{one_hot, Padding, Tape, Tensor, TensorError};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    SpecInvalid(String),
    #[error("layer {index} ({kind}) unsupported here: {reason}")]
    UnsupportedLayer {
        index: usize,
        kind: String,
        reason: String,
    },
    #[error("variant {variant:?} has no {head:?} head")]
    HeadMissing { head: Head, variant: Variant },
    #[error("loss became non-finite at batch {batch_index}; terms: {terms:?}")]
    NanLoss {
        batch_index: usize,
        terms: Vec<(String, f64)>,
    },
    #[error("substitute clone mismatch: {0}")]
    CloneMismatch(String),
    #[error("architecture hash mismatch: stored {stored}, recomputed {actual}")]
    ArchHashMismatch { stored: String, actual: String },
    #[error("weight file malformed: {0}")]
    MalformedStore(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Head selector for losses, gradients and accuracy metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Z,
    ZPrime,
    ZStar,
    /// `ZStar` on the locked variant, `Z` otherwise.
    Main,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Plain,
    DefendedNolock,
    DefendedLocked,
}

impl Variant {
    pub fn is_defended(self) -> bool {
        !matches!(self, Variant::Plain)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// 3x3 (or `kernel`x`kernel`) convolution followed by relu
    Conv { filters: usize, kernel: usize },
    /// 2x2 stride-2 max pooling
    MaxPool,
    Dropout { rate: f64 },
    /// fully connected layer followed by relu
    Dense { units: usize },
}

fn default_padding() -> Padding {
    Padding::Valid
}

/// Architecture description. The logits heads (and the lock unit for the
/// locked variant) are implied by `variant` and `class_count`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// channels, height, width
    pub input_shape: [usize; 3],
    pub class_count: usize,
    pub variant: Variant,
    pub layers: Vec<LayerSpec>,
    #[serde(default = "default_padding")]
    pub padding: Padding,
}

impl ModelSpec {
    /// Desk-scale architecture: two 8-filter conv layers, pool, two
    /// 16-filter conv layers, pool, dense 64, heads. CPU-trainable in
    /// minutes on 28x28 inputs.
    pub fn desk(variant: Variant) -> Self {
        Self {
            input_shape: [1, 28, 28],
            class_count: 10,
            variant,
            layers: vec![
                LayerSpec::Conv { filters: 8, kernel: 3 },
                LayerSpec::Conv { filters: 8, kernel: 3 },
                LayerSpec::MaxPool,
                LayerSpec::Conv { filters: 16, kernel: 3 },
                LayerSpec::Conv { filters: 16, kernel: 3 },
                LayerSpec::MaxPool,
                LayerSpec::Dense { units: 64 },
            ],
            padding: Padding::Valid,
        }
    }

    /// Full-scale oracle: three double-conv blocks (32, 64, 128 filters)
    /// with pooling and dropout 0.2, dense 512, heads. Uses same-padding
    /// so the third block still has spatial extent on 28x28 inputs.
    pub fn full_oracle(input_shape: [usize; 3], variant: Variant) -> Self {
        let mut layers = Vec::new();
        for filters in [32usize, 64, 128] {
            layers.push(LayerSpec::Conv { filters, kernel: 3 });
            layers.push(LayerSpec::Conv { filters, kernel: 3 });
            layers.push(LayerSpec::MaxPool);
            layers.push(LayerSpec::Dropout { rate: 0.2 });
        }
        layers.push(LayerSpec::Dense { units: 512 });
        layers.push(LayerSpec::Dropout { rate: 0.2 });
        Self {
            input_shape,
            class_count: 10,
            variant,
            layers,
            padding: Padding::Same,
        }
    }

    /// Full-scale substitute for 28x28x1 inputs: double-conv blocks of 32
    /// and 64 filters, two dense 200 layers, no dropout.
    pub fn full_substitute_mnist() -> Self {
        Self {
            input_shape: [1, 28, 28],
            class_count: 10,
            variant: Variant::Plain,
            layers: vec![
                LayerSpec::Conv { filters: 32, kernel: 3 },
                LayerSpec::Conv { filters: 32, kernel: 3 },
                LayerSpec::MaxPool,
                LayerSpec::Conv { filters: 64, kernel: 3 },
                LayerSpec::Conv { filters: 64, kernel: 3 },
                LayerSpec::MaxPool,
                LayerSpec::Dense { units: 200 },
                LayerSpec::Dense { units: 200 },
            ],
            padding: Padding::Valid,
        }
    }

    /// Full-scale substitute for 32x32x3 inputs: blocks of 64 and 128
    /// filters, two dense 256 layers, no dropout.
    pub fn full_substitute_cifar10() -> Self {
        Self {
            input_shape: [3, 32, 32],
            class_count: 10,
            variant: Variant::Plain,
            layers: vec![
                LayerSpec::Conv { filters: 64, kernel: 3 },
                LayerSpec::Conv { filters: 64, kernel: 3 },
                LayerSpec::MaxPool,
                LayerSpec::Conv { filters: 128, kernel: 3 },
                LayerSpec::Conv { filters: 128, kernel: 3 },
                LayerSpec::MaxPool,
                LayerSpec::Dense { units: 256 },
                LayerSpec::Dense { units: 256 },
            ],
            padding: Padding::Valid,
        }
    }

    /// Pure linear-softmax model (no trunk layers): logits are a dense map
    /// of the flattened input. Used by closed-form tests.
    pub fn linear(input_shape: [usize; 3], class_count: usize) -> Self {
        Self {
            input_shape,
            class_count,
            variant: Variant::Plain,
            layers: vec![],
            padding: Padding::Valid,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    /// Walks the layer stack checking every shape is realizable; returns
    /// the flattened trunk output width.
    pub fn validate(&self) -> Result<usize, ModelError> {
        if self.class_count < 2 {
            return Err(ModelError::SpecInvalid(format!(
                "class_count {} below 2",
                self.class_count
            )));
        }
        let [mut c, mut h, mut w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(ModelError::SpecInvalid("zero input extent".into()));
        }
        let mut flat: Option<usize> = None;
        for (index, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Conv { filters, kernel } => {
                    if flat.is_some() {
                        return Err(ModelError::UnsupportedLayer {
                            index,
                            kind: "conv".into(),
                            reason: "conv after dense".into(),
                        });
                    }
                    if *filters == 0 || *kernel == 0 || kernel % 2 == 0 {
                        return Err(ModelError::SpecInvalid(format!(
                            "conv layer {index}: filters {filters}, kernel {kernel}"
                        )));
                    }
                    let pad = match self.padding {
                        Padding::Valid => 0,
                        Padding::Same => (kernel - 1) / 2,
                    };
                    let oh = (h + 2 * pad).checked_sub(kernel - 1).unwrap_or(0);
                    let ow = (w + 2 * pad).checked_sub(kernel - 1).unwrap_or(0);
                    if oh == 0 || ow == 0 {
                        return Err(ModelError::SpecInvalid(format!(
                            "conv layer {index}: kernel {kernel} exceeds {h}x{w} input"
                        )));
                    }
                    c = *filters;
                    h = oh;
                    w = ow;
                }
                LayerSpec::MaxPool => {
                    if flat.is_some() {
                        return Err(ModelError::UnsupportedLayer {
                            index,
                            kind: "maxpool".into(),
                            reason: "pool after dense".into(),
                        });
                    }
                    if h < 2 || w < 2 {
                        return Err(ModelError::SpecInvalid(format!(
                            "pool layer {index}: input {h}x{w} below 2x2"
                        )));
                    }
                    h /= 2;
                    w /= 2;
                }
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(rate) {
                        return Err(ModelError::SpecInvalid(format!(
                            "dropout layer {index}: rate {rate}"
                        )));
                    }
                }
                LayerSpec::Dense { units } => {
                    if *units == 0 {
                        return Err(ModelError::SpecInvalid(format!("dense layer {index}: 0 units")));
                    }
                    flat = Some(*units);
                }
            }
        }
        Ok(flat.unwrap_or(c * h * w))
    }

    /// Hex SHA-256 over the canonical spec JSON; identifies an
    /// architecture independently of its weights.
    pub fn arch_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("spec serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Named parameter tensor. Frozen parameters (the lock unit) are never
/// touched by optimizers.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub frozen: bool,
}

/// Logits returned by a forward pass; which heads are present depends on
/// the model variant.
#[derive(Debug, Clone)]
pub struct Heads {
    pub z: Tensor,
    pub z_prime: Option<Tensor>,
    pub z_star: Option<Tensor>,
    variant: Variant,
}

impl Heads {
    pub fn get(&self, head: Head) -> Result<&Tensor, ModelError> {
        let missing = || ModelError::HeadMissing {
            head,
            variant: self.variant,
        };
        match head {
            Head::Z => Ok(&self.z),
            Head::ZPrime => self.z_prime.as_ref().ok_or_else(missing),
            Head::ZStar => self.z_star.as_ref().ok_or_else(missing),
            Head::Main => Ok(self.main()),
        }
    }

    /// The head whose argmax is the model's classification output:
    /// `Z*` for the locked variant, `Z` otherwise.
    pub fn main(&self) -> &Tensor {
        self.z_star.as_ref().unwrap_or(&self.z)
    }

    /// The auxiliary robust-label head, when present.
    pub fn auxiliary(&self) -> Option<&Tensor> {
        self.z_prime.as_ref()
    }
}

/// Lock-unit override used by tests to probe the gradient path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LockMode {
    Normal,
    /// `g` emits all-ones, so `Z* == Z`
    ForceOnes,
    /// `g(Z')` is computed then treated as a constant, severing the
    /// `Z'`-path contribution to the `Z*` input gradient
    Detached,
}

/// Parameter leaves registered on a tape, reusable across several
/// forward passes so gradients of shared weights accumulate correctly.
pub struct ParamBinding {
    leaves: Vec<Tensor>,
    by_name: std::collections::HashMap<String, Tensor>,
}

impl ParamBinding {
    /// Leaves in `Model::params` order.
    pub fn leaves(&self) -> &[Tensor] {
        &self.leaves
    }
}

/// Forward-pass handles on a tape: the heads plus the parameter binding
/// used to produce them.
pub struct TracedModel {
    pub heads: Heads,
    pub binding: ParamBinding,
}

impl TracedModel {
    /// Parameter leaves in `Model::params` order.
    pub fn param_leaves(&self) -> &[Tensor] {
        self.binding.leaves()
    }
}

/// A layer stack with named parameters.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<Param>,
    seed: u64,
}

/// Builds a model with parameters drawn from the seeded generator.
/// Weights use fan-in scaled uniform init, biases start at zero; the lock
/// unit's weights and biases are drawn from uniform(-0.5, 0.5) and frozen.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model, ModelError> {
    let trunk_width = spec.validate()?;
    let mut rng = SplitMix64::derive(seed, 0x6d6f64);
    let mut params = Vec::new();

    fn push_dense(
        params: &mut Vec<Param>,
        name: &str,
        fan_in: usize,
        units: usize,
        rng: &mut SplitMix64,
    ) {
        let bound = (1.0 / fan_in as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * units).map(|_| rng.uniform(-bound, bound)).collect();
        params.push(Param {
            name: format!("{name}.w"),
            tensor: Tensor::new(vec![fan_in, units], w).expect("dense init shape"),
            frozen: false,
        });
        params.push(Param {
            name: format!("{name}.b"),
            tensor: Tensor::zeros(vec![units]),
            frozen: false,
        });
    }

    let [mut c, mut h, mut w] = spec.input_shape;
    let mut flat: Option<usize> = None;
    for (index, layer) in spec.layers.iter().enumerate() {
        match layer {
            LayerSpec::Conv { filters, kernel } => {
                let fan_in = c * kernel * kernel;
                let bound = (1.0 / fan_in as f64).sqrt();
                let wv: Vec<f64> = (0..filters * fan_in).map(|_| rng.uniform(-bound, bound)).collect();
                params.push(Param {
                    name: format!("layer{index}.w"),
                    tensor: Tensor::new(vec![*filters, c, *kernel, *kernel], wv)
                        .expect("conv init shape"),
                    frozen: false,
                });
                params.push(Param {
                    name: format!("layer{index}.b"),
                    tensor: Tensor::zeros(vec![*filters]),
                    frozen: false,
                });
                let pad = match spec.padding {
                    Padding::Valid => 0,
                    Padding::Same => (kernel - 1) / 2,
                };
                c = *filters;
                h = h + 2 * pad - (kernel - 1);
                w = w + 2 * pad - (kernel - 1);
            }
            LayerSpec::MaxPool => {
                h /= 2;
                w /= 2;
            }
            LayerSpec::Dropout { .. } => {}
            LayerSpec::Dense { units } => {
                let fan_in = flat.unwrap_or(c * h * w);
                push_dense(&mut params, &format!("layer{index}"), fan_in, *units, &mut rng);
                flat = Some(*units);
            }
        }
    }
    let _ = trunk_width;
    let trunk_out = flat.unwrap_or(c * h * w);

    push_dense(&mut params, "head_z", trunk_out, spec.class_count, &mut rng);
    if spec.variant.is_defended() {
        push_dense(&mut params, "head_zp", trunk_out, spec.class_count, &mut rng);
    }
    if spec.variant == Variant::DefendedLocked {
        let k = spec.class_count;
        for (li, name) in ["lock0", "lock1"].iter().enumerate() {
            let wv: Vec<f64> = (0..k * k).map(|_| rng.uniform(-0.5, 0.5)).collect();
            let bv: Vec<f64> = (0..k).map(|_| rng.uniform(-0.5, 0.5)).collect();
            let _ = li;
            params.push(Param {
                name: format!("{name}.w"),
                tensor: Tensor::new(vec![k, k], wv).expect("lock init shape"),
                frozen: true,
            });
            params.push(Param {
                name: format!("{name}.b"),
                tensor: Tensor::new(vec![k], bv).expect("lock bias shape"),
                frozen: true,
            });
        }
    }

    Ok(Model {
        spec: spec.clone(),
        params,
        seed,
    })
}

/// How a substitute gets its parameters.
pub enum SubstituteMode<'a> {
    /// independent initialization; the caller trains it on its own data
    Fresh { seed: u64 },
    /// worst case: trunk and `Z`-head parameters copied from the oracle
    WorstCase { oracle: &'a Model },
}

/// Builds an attacker-side substitute. In the worst case the substitute's
/// spec must structurally match the oracle trunk (same layers, padding,
/// input, class count) so parameters can be copied.
pub fn clone_as_substitute(
    substitute_spec: &ModelSpec,
    mode: SubstituteMode<'_>,
) -> Result<Model, ModelError> {
    match mode {
        SubstituteMode::Fresh { seed } => build_model(substitute_spec, seed),
        SubstituteMode::WorstCase { oracle } => {
            let oracle_spec = oracle.spec();
            if substitute_spec.layers != oracle_spec.layers
                || substitute_spec.input_shape != oracle_spec.input_shape
                || substitute_spec.class_count != oracle_spec.class_count
                || substitute_spec.padding != oracle_spec.padding
            {
                return Err(ModelError::CloneMismatch(
                    "substitute spec does not match the oracle trunk".into(),
                ));
            }
            let mut model = build_model(substitute_spec, oracle.seed)?;
            for param in &mut model.params {
                let source = oracle
                    .params
                    .iter()
                    .find(|p| p.name == param.name)
                    .ok_or_else(|| {
                        ModelError::CloneMismatch(format!("oracle lacks parameter {}", param.name))
                    })?;
                if source.tensor.shape() != param.tensor.shape() {
                    return Err(ModelError::CloneMismatch(format!(
                        "parameter {} shaped {:?} vs {:?}",
                        param.name,
                        source.tensor.shape(),
                        param.tensor.shape()
                    )));
                }
                param.tensor = source.tensor.detached();
            }
            Ok(model)
        }
    }
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn variant(&self) -> Variant {
        self.spec.variant
    }

    pub fn class_count(&self) -> usize {
        self.spec.class_count
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Test access: overwrite a parameter tensor (shape must match).
    pub fn set_param(&mut self, name: &str, tensor: Tensor) -> Result<(), ModelError> {
        let param = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| ModelError::CloneMismatch(format!("no parameter {name}")))?;
        if param.tensor.shape() != tensor.shape() {
            return Err(ModelError::CloneMismatch(format!(
                "parameter {name} shaped {:?}, got {:?}",
                param.tensor.shape(),
                tensor.shape()
            )));
        }
        param.tensor = tensor.detached();
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Hash of the architecture plus parameter shapes; stored in weight
    /// files and Classmap provenance.
    pub fn arch_hash(&self) -> String {
        self.spec.arch_hash()
    }

    /// Records the full forward pass on `tape`. `x` must already be a
    /// leaf of `tape` shaped (N, C, H, W).
    pub fn trace(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        lock: LockMode,
    ) -> Result<TracedModel, ModelError> {
        self.trace_with(tape, x, lock, true)
    }

    /// Like [`Model::trace`] with all parameters registered as constants,
    /// so a backward pass computes input gradients only. Attack loops use
    /// this; it skips every weight-gradient kernel.
    pub fn trace_frozen(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        lock: LockMode,
    ) -> Result<TracedModel, ModelError> {
        self.trace_with(tape, x, lock, false)
    }

    fn trace_with(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        lock: LockMode,
        trainable: bool,
    ) -> Result<TracedModel, ModelError> {
        let binding = self.bind_params(tape, trainable);
        let heads = self.forward_with_binding(tape, &binding, x, lock)?;
        Ok(TracedModel { heads, binding })
    }

    /// Registers every parameter as a tape leaf once. Several forward
    /// passes may share one binding; their weight gradients accumulate.
    pub fn bind_params(&self, tape: &mut Tape, trainable: bool) -> ParamBinding {
        let mut leaves = Vec::with_capacity(self.params.len());
        let mut by_name = std::collections::HashMap::new();
        for param in &self.params {
            let leaf = tape.leaf(&param.tensor, trainable && !param.frozen);
            by_name.insert(param.name.clone(), leaf.clone());
            leaves.push(leaf);
        }
        ParamBinding { leaves, by_name }
    }

    /// Runs the layer stack against an existing parameter binding.
    pub fn forward_with_binding(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        x: &Tensor,
        lock: LockMode,
    ) -> Result<Heads, ModelError> {
        let expected = &self.spec.input_shape;
        if x.shape().len() != 4 || x.shape()[1..] != expected[..] {
            return Err(ModelError::SpecInvalid(format!(
                "input shaped {:?}, model expects (N, {}, {}, {})",
                x.shape(),
                expected[0],
                expected[1],
                expected[2]
            )));
        }
        let leaf_of = &binding.by_name;

        let mut cur = x.clone();
        for (index, layer) in self.spec.layers.iter().enumerate() {
            cur = match layer {
                LayerSpec::Conv { .. } => {
                    let w = &leaf_of[&format!("layer{index}.w")];
                    let b = &leaf_of[&format!("layer{index}.b")];
                    let conv = tape.conv2d(&cur, w, b, self.spec.padding)?;
                    tape.relu(&conv)?
                }
                LayerSpec::MaxPool => tape.maxpool(&cur)?,
                LayerSpec::Dropout { rate } => tape.dropout(&cur, *rate)?,
                LayerSpec::Dense { .. } => {
                    let w = &leaf_of[&format!("layer{index}.w")];
                    let b = &leaf_of[&format!("layer{index}.b")];
                    let lin = tape.dense(&cur, w, b)?;
                    tape.relu(&lin)?
                }
            };
        }

        let z = tape.dense(&cur, &leaf_of["head_z.w"], &leaf_of["head_z.b"])?;
        let mut z_prime = None;
        let mut z_star = None;
        if self.spec.variant.is_defended() {
            let zp = tape.dense(&cur, &leaf_of["head_zp.w"], &leaf_of["head_zp.b"])?;
            if self.spec.variant == Variant::DefendedLocked {
                let g = match lock {
                    LockMode::ForceOnes => {
                        let ones = Tensor::filled(z.shape().to_vec(), 1.0);
                        tape.leaf(&ones, false)
                    }
                    LockMode::Detached => {
                        let g_vals = self.lock_values(&zp)?;
                        tape.leaf(&g_vals, false)
                    }
                    LockMode::Normal => {
                        let hidden = tape.dense(&zp, &leaf_of["lock0.w"], &leaf_of["lock0.b"])?;
                        let act = tape.tanh(&hidden)?;
                        tape.dense(&act, &leaf_of["lock1.w"], &leaf_of["lock1.b"])?
                    }
                };
                z_star = Some(tape.mul(&z, &g)?);
            }
            z_prime = Some(zp);
        }

        Ok(Heads {
            z,
            z_prime,
            z_star,
            variant: self.spec.variant,
        })
    }

    /// Lock-unit output for given `Z'` values, computed off-tape.
    fn lock_values(&self, z_prime: &Tensor) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let zp = tape.leaf(z_prime, false);
        let w0 = tape.leaf(&self.param("lock0.w").expect("lock0").tensor, false);
        let b0 = tape.leaf(&self.param("lock0.b").expect("lock0").tensor, false);
        let w1 = tape.leaf(&self.param("lock1.w").expect("lock1").tensor, false);
        let b1 = tape.leaf(&self.param("lock1.b").expect("lock1").tensor, false);
        let hidden = tape.dense(&zp, &w0, &b0)?;
        let act = tape.tanh(&hidden)?;
        Ok(tape.dense(&act, &w1, &b1)?.detached())
    }

    /// Inference pass: all heads the variant exposes, dropout inactive.
    pub fn forward_heads(&self, x: &Tensor) -> Result<Heads, ModelError> {
        self.forward_heads_with(x, LockMode::Normal)
    }

    pub fn forward_heads_with(&self, x: &Tensor, lock: LockMode) -> Result<Heads, ModelError> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(x, false);
        let traced = self.trace(&mut tape, &leaf, lock)?;
        Ok(Heads {
            z: traced.heads.z.detached(),
            z_prime: traced.heads.z_prime.map(|t| t.detached()),
            z_star: traced.heads.z_star.map(|t| t.detached()),
            variant: self.spec.variant,
        })
    }

    /// Main-head argmax labels for a batch.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<u8>, ModelError> {
        let heads = self.forward_heads(x)?;
        let main = heads.main();
        Ok((0..main.shape()[0]).map(|r| main.argmax_row(r) as u8).collect())
    }
}

/// Loss specification for input-gradient computations.
#[derive(Debug, Clone)]
pub enum LossSpec<'a> {
    /// mean softmax cross-entropy of the chosen head against the labels
    CrossEntropy { head: Head, labels: &'a [u8] },
}

/// Gradient of the loss w.r.t. the input batch. The model's weights are
/// read-only; dropout is inactive (inference tape).
pub fn grad_wrt_input(model: &Model, x: &Tensor, loss: &LossSpec) -> Result<Tensor, ModelError> {
    let (grad, _) = loss_and_input_grad(model, x, loss)?;
    Ok(grad)
}

fn loss_and_input_grad(
    model: &Model,
    x: &Tensor,
    loss: &LossSpec,
) -> Result<(Tensor, f64), ModelError> {
    let mut tape = Tape::new();
    let leaf = tape.leaf(x, true);
    let traced = model.trace_frozen(&mut tape, &leaf, LockMode::Normal)?;
    let scalar = build_loss(&mut tape, model, &traced, loss)?;
    let grads = tape.backward(&scalar)?;
    Ok((grads.grad(&leaf)?.detached(), scalar.item()))
}

fn build_loss(
    tape: &mut Tape,
    model: &Model,
    traced: &TracedModel,
    loss: &LossSpec,
) -> Result<Tensor, ModelError> {
    match loss {
        LossSpec::CrossEntropy { head, labels } => {
            let logits = traced.heads.get(*head)?;
            let targets = tape.leaf(&one_hot(labels, model.class_count()), false);
            Ok(tape.cross_entropy_with_logits(logits, &targets)?)
        }
    }
}

/// Compares the analytic input gradient of `loss` against central finite
/// differences on sampled coordinates.
pub fn finite_difference_check(
    model: &Model,
    x: &Tensor,
    loss: &LossSpec,
    step: f64,
    tolerance: f64,
) -> Result<FdReport, ModelError> {
    let analytic = grad_wrt_input(model, x, loss)?;
    let opts = FdOptions {
        step,
        tolerance,
        ..FdOptions::default()
    };
    let report = check_gradient(
        |probe| {
            let mut tape = Tape::new();
            let leaf = tape.leaf(probe, false);
            let traced = model
                .trace(&mut tape, &leaf, LockMode::Normal)
                .map_err(|_| TensorError::NotOnTape)?;
            let scalar = build_loss(&mut tape, model, &traced, loss)
                .map_err(|_| TensorError::NotOnTape)?;
            Ok(LossProbe {
                value: scalar.item(),
                fingerprint: tape.activation_fingerprint(),
            })
        },
        x,
        &analytic,
        &opts,
    )?;
    Ok(report)
}
