//! The two-branch temporal-convolution model and its per-joint rotation
//! discriminators.
//!
//! The dynamic branch reads `(B, 53, T)` inputs (34 keypoint channels, 17
//! confidence channels, 2 root-velocity channels), expands to the trunk
//! width, fuses three parallel kernel sizes, and emits per-frame rotations,
//! a root depth and two contact logits. The static branch shares the input,
//! collapses time with adaptive max pooling, and emits the nine symmetry
//! group lengths through a softplus so symmetry and positivity hold by
//! construction. Each joint gets its own small discriminator over temporal
//! rotation differences.

mod fk_layer;
pub use fk_layer::{
    fk_from_rotations_graph, fk_local_graph, rotations_to_matrices_graph, tpose_offsets_graph,
};

mod checkpoint;
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointExtras};

use ndarray::Array1;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
use revad::{Arr, ParamId, ParamStore, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::INPUT_CHANNELS;
use crate::rotation::Representation;
use crate::topology::JOINT_COUNT;

pub const EQ_MIN_FRAMES: usize = 8;
pub const ES_MIN_FRAMES: usize = 5;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub causal: bool,
    pub representation: Representation,
    pub channel_width: usize,
    pub dropout_rate: f64,
    pub lrelu_slope: f64,
    pub disc_channels: usize,
    /// Leaky rectification between the discriminator convolutions. Off by
    /// default, matching the published layer table's bare convolutions.
    pub disc_lrelu: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            causal: false,
            representation: Representation::Quaternion,
            channel_width: 2048,
            dropout_rate: 0.25,
            lrelu_slope: 0.2,
            disc_channels: 16,
            disc_lrelu: false,
        }
    }
}

impl NetworkConfig {
    pub fn rotation_channels(&self) -> usize {
        self.representation.width() * JOINT_COUNT
    }

    /// Rotations + root depth + two contact logits.
    pub fn eq_out_channels(&self) -> usize {
        self.rotation_channels() + 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_width == 0 || self.disc_channels == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout_rate)));
        }
        Ok(())
    }
}

/// Train mode draws dropout masks and updates batch-norm running statistics;
/// eval mode is deterministic and uses the running statistics.
pub enum ForwardMode<'a> {
    Train(&'a mut ChaCha8Rng),
    Eval,
}

struct ConvBlock {
    w: ParamId,
    b: ParamId,
    gamma: ParamId,
    beta: ParamId,
    running_mean: Array1<f64>,
    running_var: Array1<f64>,
    kernel: usize,
    stride: usize,
    out_ch: usize,
}

impl ConvBlock {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let fan_in = in_ch * kernel;
        let w = store.add_uniform(format!("{name}.w"), &[out_ch, in_ch, kernel], fan_in, rng);
        let b = store.add_uniform(format!("{name}.b"), &[out_ch], fan_in, rng);
        let gamma = store.add(format!("{name}.bn_gamma"), Arr::ones(ndarray::IxDyn(&[out_ch])));
        let beta = store.add(format!("{name}.bn_beta"), Arr::zeros(ndarray::IxDyn(&[out_ch])));
        Self {
            w,
            b,
            gamma,
            beta,
            running_mean: Array1::zeros(out_ch),
            running_var: Array1::ones(out_ch),
            kernel,
            stride,
            out_ch,
        }
    }

    fn padding(&self, causal: bool) -> (usize, usize) {
        if causal {
            (self.kernel - 1, 0)
        } else {
            ((self.kernel - 1) / 2, (self.kernel - 1) / 2)
        }
    }

    fn param_ids(&self) -> [ParamId; 4] {
        [self.w, self.b, self.gamma, self.beta]
    }

    /// Conv -> batch norm -> leaky ReLU -> dropout.
    fn forward(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        cfg: &NetworkConfig,
        mode: &mut ForwardMode,
    ) -> Var {
        let (pad_l, pad_r) = self.padding(cfg.causal);
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.conv1d(x, w, self.stride, pad_l, pad_r);
        let b3 = tape.reshape(b, &[1, self.out_ch, 1]);
        let y = tape.add(y, b3);

        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        let gamma3 = tape.reshape(gamma, &[1, self.out_ch, 1]);
        let beta3 = tape.reshape(beta, &[1, self.out_ch, 1]);
        let normed = match mode {
            ForwardMode::Train(_) => {
                let mu = tape.mean_axes(y, &[0, 2], true);
                let centered = tape.sub(y, mu);
                let sq = tape.square(centered);
                let var = tape.mean_axes(sq, &[0, 2], true);
                let var_eps = tape.add_scalar(var, BN_EPS);
                let denom = tape.sqrt(var_eps);
                let xhat = tape.div(centered, denom);

                // running statistics (unbiased variance, like the usual BN)
                let shape = tape.value(y).shape().to_vec();
                let n = (shape[0] * shape[2]) as f64;
                let mu_val = tape.value(mu).iter().copied().collect::<Vec<f64>>();
                let var_val = tape.value(var).iter().copied().collect::<Vec<f64>>();
                for c in 0..self.out_ch {
                    let unbiased = if n > 1.0 { var_val[c] * n / (n - 1.0) } else { var_val[c] };
                    self.running_mean[c] =
                        (1.0 - BN_MOMENTUM) * self.running_mean[c] + BN_MOMENTUM * mu_val[c];
                    self.running_var[c] =
                        (1.0 - BN_MOMENTUM) * self.running_var[c] + BN_MOMENTUM * unbiased;
                }
                xhat
            }
            ForwardMode::Eval => {
                let rm = tape.constant(
                    self.running_mean.clone().into_shape_with_order((1, self.out_ch, 1)).unwrap().into_dyn(),
                );
                let rv = tape.constant(
                    self.running_var.clone().into_shape_with_order((1, self.out_ch, 1)).unwrap().into_dyn(),
                );
                let centered = tape.sub(y, rm);
                let rv_eps = tape.add_scalar(rv, BN_EPS);
                let denom = tape.sqrt(rv_eps);
                tape.div(centered, denom)
            }
        };
        let scaled = tape.mul(normed, gamma3);
        let shifted = tape.add(scaled, beta3);
        let activated = tape.leaky_relu(shifted, cfg.lrelu_slope);

        match mode {
            ForwardMode::Train(rng) if cfg.dropout_rate > 0.0 => {
                let keep = 1.0 - cfg.dropout_rate;
                let shape = tape.value(activated).raw_dim();
                let mask = Arr::from_shape_fn(shape, |_| {
                    use rand::Rng;
                    if rng.random_range(0.0..1.0) < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                let mask = tape.constant(mask);
                tape.mul(activated, mask)
            }
            _ => activated,
        }
    }
}

struct FinalConv {
    w: ParamId,
    b: ParamId,
    out_ch: usize,
}

impl FinalConv {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, in_ch: usize, out_ch: usize) -> Self {
        let w = store.add_uniform(format!("{name}.w"), &[out_ch, in_ch, 1], in_ch, rng);
        let b = store.add_uniform(format!("{name}.b"), &[out_ch], in_ch, rng);
        Self { w, b, out_ch }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.conv1d(x, w, 1, 0, 0);
        let b3 = tape.reshape(b, &[1, self.out_ch, 1]);
        tape.add(y, b3)
    }
}

pub struct EqGraph {
    expand: ConvBlock,
    branch_k5: ConvBlock,
    branch_k3: ConvBlock,
    branch_k1: ConvBlock,
    head: FinalConv,
}

pub struct EsGraph {
    expand: ConvBlock,
    seq_k5: ConvBlock,
    seq_k3: ConvBlock,
    seq_k1: ConvBlock,
    head: FinalConv,
}

pub struct DiscGraph {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    w3: ParamId,
    b3: ParamId,
}

impl DiscGraph {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, q: usize, hidden: usize) -> Self {
        Self {
            w1: store.add_uniform(format!("{name}.w1"), &[hidden, q, 1], q, rng),
            b1: store.add_uniform(format!("{name}.b1"), &[hidden], q, rng),
            w2: store.add_uniform(format!("{name}.w2"), &[hidden, hidden, 1], hidden, rng),
            b2: store.add_uniform(format!("{name}.b2"), &[hidden], hidden, rng),
            w3: store.add_uniform(format!("{name}.w3"), &[hidden, 1], hidden, rng),
            b3: store.add_uniform(format!("{name}.b3"), &[1], hidden, rng),
        }
    }

    fn param_ids(&self) -> [ParamId; 6] {
        [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]
    }
}

/// Everything trainable plus the architecture description.
pub struct ModelGraph {
    pub config: NetworkConfig,
    pub store: ParamStore,
    pub eq: EqGraph,
    pub es: EsGraph,
    pub discs: Vec<DiscGraph>,
    pub generator_ids: Vec<ParamId>,
    pub discriminator_ids: Vec<ParamId>,
}

impl ModelGraph {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = config.channel_width;
        let q = config.representation.width();

        let eq = EqGraph {
            expand: ConvBlock::new(&mut store, &mut rng, "eq.expand", INPUT_CHANNELS, w, 1, 1),
            branch_k5: ConvBlock::new(&mut store, &mut rng, "eq.branch_k5", w, w, 5, 3),
            branch_k3: ConvBlock::new(&mut store, &mut rng, "eq.branch_k3", w, w, 3, 1),
            branch_k1: ConvBlock::new(&mut store, &mut rng, "eq.branch_k1", w, w, 1, 1),
            head: FinalConv::new(&mut store, &mut rng, "eq.head", w, config.eq_out_channels()),
        };
        let es = EsGraph {
            expand: ConvBlock::new(&mut store, &mut rng, "es.expand", INPUT_CHANNELS, w, 1, 1),
            seq_k5: ConvBlock::new(&mut store, &mut rng, "es.seq_k5", w, w, 5, 1),
            seq_k3: ConvBlock::new(&mut store, &mut rng, "es.seq_k3", w, w, 3, 1),
            seq_k1: ConvBlock::new(&mut store, &mut rng, "es.seq_k1", w, w, 1, 1),
            head: FinalConv::new(&mut store, &mut rng, "es.head", w, crate::topology::GROUP_COUNT),
        };
        let discs: Vec<DiscGraph> = (0..JOINT_COUNT)
            .map(|j| DiscGraph::new(&mut store, &mut rng, &format!("d{j:02}"), q, config.disc_channels))
            .collect();

        let mut generator_ids = Vec::new();
        for blk in [&eq.expand, &eq.branch_k5, &eq.branch_k3, &eq.branch_k1] {
            generator_ids.extend(blk.param_ids());
        }
        generator_ids.extend([eq.head.w, eq.head.b]);
        for blk in [&es.expand, &es.seq_k5, &es.seq_k3, &es.seq_k1] {
            generator_ids.extend(blk.param_ids());
        }
        generator_ids.extend([es.head.w, es.head.b]);
        let discriminator_ids: Vec<ParamId> =
            discs.iter().flat_map(|d| d.param_ids()).collect();

        Ok(Self { config, store, eq, es, discs, generator_ids, discriminator_ids })
    }

    /// Parameter ids of the static branch only (frozen in the gt-skeleton
    /// training variant).
    pub fn es_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for blk in [&self.es.expand, &self.es.seq_k5, &self.es.seq_k3, &self.es.seq_k1] {
            ids.extend(blk.param_ids());
        }
        ids.extend([self.es.head.w, self.es.head.b]);
        ids
    }
}

/// Dynamic-branch outputs, all still attached to the tape.
pub struct EqOutput {
    /// `(B, T, 17, Q)`; unit-normalized per joint when quaternion.
    pub rotations: Var,
    /// `(B, T)` root depth.
    pub depth: Var,
    /// `(B, T, 2)` contact logits.
    pub contact_logits: Var,
}

/// Forward pass of the dynamic branch E_Q.
pub fn eq_forward(
    graph: &mut ModelGraph,
    tape: &mut Tape,
    input: Var,
    mode: &mut ForwardMode,
) -> Result<EqOutput> {
    let shape = tape.value(input).shape().to_vec();
    if shape.len() != 3 || shape[1] != INPUT_CHANNELS {
        return Err(Error::Shape(format!(
            "E_Q input must be (B, {INPUT_CHANNELS}, T), got {shape:?}"
        )));
    }
    let t_len = shape[2];
    if t_len < EQ_MIN_FRAMES {
        return Err(Error::Length(format!(
            "E_Q needs at least {EQ_MIN_FRAMES} frames, got {t_len}"
        )));
    }
    let cfg = graph.config.clone();
    let batch = shape[0];

    let h = graph.eq.expand.forward(tape, &graph.store, input, &cfg, mode);
    let b5 = graph.eq.branch_k5.forward(tape, &graph.store, h, &cfg, mode);
    let b5 = if cfg.causal {
        tape.hold_upsample(b5, graph.eq.branch_k5.stride, t_len)
    } else {
        tape.adaptive_avg_pool1d(b5, t_len)
    };
    let b3 = graph.eq.branch_k3.forward(tape, &graph.store, h, &cfg, mode);
    let b3 = if cfg.causal { b3 } else { tape.adaptive_avg_pool1d(b3, t_len) };
    let b1 = graph.eq.branch_k1.forward(tape, &graph.store, h, &cfg, mode);
    let s = tape.add(b5, b3);
    let s = tape.add(s, b1);
    let y = graph.eq.head.forward(tape, &graph.store, s);

    let q = cfg.representation.width();
    let rot_ch = q * JOINT_COUNT;
    let rot = tape.narrow(y, 1, 0, rot_ch);
    let rot = tape.permute(rot, &[0, 2, 1]);
    let rot = tape.reshape(rot, &[batch, t_len, JOINT_COUNT, q]);
    let rot = if cfg.representation == Representation::Quaternion {
        let sq = tape.square(rot);
        let ss = tape.sum_axes(sq, &[3], true);
        let ss = tape.add_scalar(ss, 1e-12);
        let norm = tape.sqrt(ss);
        tape.div(rot, norm)
    } else {
        rot
    };

    let depth = tape.narrow(y, 1, rot_ch, 1);
    let depth = tape.reshape(depth, &[batch, t_len]);
    let contact = tape.narrow(y, 1, rot_ch + 1, 2);
    let contact = tape.permute(contact, &[0, 2, 1]);

    Ok(EqOutput { rotations: rot, depth, contact_logits: contact })
}

/// Forward pass of the static branch E_S: `(B, 9)` positive group lengths.
pub fn es_forward(
    graph: &mut ModelGraph,
    tape: &mut Tape,
    input: Var,
    mode: &mut ForwardMode,
) -> Result<Var> {
    let shape = tape.value(input).shape().to_vec();
    if shape.len() != 3 || shape[1] != INPUT_CHANNELS {
        return Err(Error::Shape(format!(
            "E_S input must be (B, {INPUT_CHANNELS}, T), got {shape:?}"
        )));
    }
    if shape[2] < ES_MIN_FRAMES {
        return Err(Error::Length(format!(
            "E_S needs at least {ES_MIN_FRAMES} frames, got {}",
            shape[2]
        )));
    }
    let cfg = graph.config.clone();
    let h = graph.es.expand.forward(tape, &graph.store, input, &cfg, mode);
    let h = graph.es.seq_k5.forward(tape, &graph.store, h, &cfg, mode);
    let h = graph.es.seq_k3.forward(tape, &graph.store, h, &cfg, mode);
    let h = graph.es.seq_k1.forward(tape, &graph.store, h, &cfg, mode);
    let p = tape.max_pool_time(h);
    let y = graph.es.head.forward(tape, &graph.store, p);
    let y = tape.reshape(y, &[shape[0], crate::topology::GROUP_COUNT]);
    Ok(tape.softplus(y))
}

/// One joint's discriminator over temporal rotation differences
/// `(B, Q, T-1)`; returns `(B,)` scores.
pub fn d_forward(graph: &ModelGraph, tape: &mut Tape, joint: usize, delta: Var) -> Result<Var> {
    let shape = tape.value(delta).shape().to_vec();
    let q = graph.config.representation.width();
    if shape.len() != 3 || shape[1] != q {
        return Err(Error::Shape(format!(
            "discriminator input must be (B, {q}, T-1), got {shape:?}"
        )));
    }
    let d = &graph.discs[joint];
    let hidden = graph.config.disc_channels;
    let w1 = tape.param(&graph.store, d.w1);
    let b1 = tape.param(&graph.store, d.b1);
    let mut h = tape.conv1d(delta, w1, 1, 0, 0);
    let b1r = tape.reshape(b1, &[1, hidden, 1]);
    h = tape.add(h, b1r);
    if graph.config.disc_lrelu {
        h = tape.leaky_relu(h, graph.config.lrelu_slope);
    }
    let w2 = tape.param(&graph.store, d.w2);
    let b2 = tape.param(&graph.store, d.b2);
    let mut h2 = tape.conv1d(h, w2, 1, 0, 0);
    let b2r = tape.reshape(b2, &[1, hidden, 1]);
    h2 = tape.add(h2, b2r);
    if graph.config.disc_lrelu {
        h2 = tape.leaky_relu(h2, graph.config.lrelu_slope);
    }
    let pooled = tape.mean_axes(h2, &[2], false); // (B, hidden)
    let w3 = tape.param(&graph.store, d.w3);
    let b3 = tape.param(&graph.store, d.b3);
    let y = tape.matmul(pooled, w3); // (B, 1)
    let y = tape.add(y, b3);
    Ok(tape.reshape(y, &[shape[0]]))
}

// --- audit -------------------------------------------------------------------------

/// The architecture's expected tensor shapes, written out independently of
/// the builder so the audit actually cross-checks construction.
pub fn expected_shapes(config: &NetworkConfig) -> Vec<(String, Vec<usize>)> {
    let w = config.channel_width;
    let q = config.representation.width();
    let h = config.disc_channels;
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    let conv_block = |out_vec: &mut Vec<(String, Vec<usize>)>, name: &str, ci: usize, co: usize, k: usize| {
        out_vec.push((format!("{name}.w"), vec![co, ci, k]));
        out_vec.push((format!("{name}.b"), vec![co]));
        out_vec.push((format!("{name}.bn_gamma"), vec![co]));
        out_vec.push((format!("{name}.bn_beta"), vec![co]));
    };
    conv_block(&mut out, "eq.expand", INPUT_CHANNELS, w, 1);
    conv_block(&mut out, "eq.branch_k5", w, w, 5);
    conv_block(&mut out, "eq.branch_k3", w, w, 3);
    conv_block(&mut out, "eq.branch_k1", w, w, 1);
    out.push(("eq.head.w".into(), vec![q * JOINT_COUNT + 3, w, 1]));
    out.push(("eq.head.b".into(), vec![q * JOINT_COUNT + 3]));
    conv_block(&mut out, "es.expand", INPUT_CHANNELS, w, 1);
    conv_block(&mut out, "es.seq_k5", w, w, 5);
    conv_block(&mut out, "es.seq_k3", w, w, 3);
    conv_block(&mut out, "es.seq_k1", w, w, 1);
    out.push(("es.head.w".into(), vec![crate::topology::GROUP_COUNT, w, 1]));
    out.push(("es.head.b".into(), vec![crate::topology::GROUP_COUNT]));
    for j in 0..JOINT_COUNT {
        out.push((format!("d{j:02}.w1"), vec![h, q, 1]));
        out.push((format!("d{j:02}.b1"), vec![h]));
        out.push((format!("d{j:02}.w2"), vec![h, h, 1]));
        out.push((format!("d{j:02}.b2"), vec![h]));
        out.push((format!("d{j:02}.w3"), vec![h, 1]));
        out.push((format!("d{j:02}.b3"), vec![1]));
    }
    out
}

/// Verifies every declared tensor against the expected shape table; the
/// error lists each offending layer.
pub fn shape_audit(graph: &ModelGraph) -> Result<String> {
    let expected = expected_shapes(&graph.config);
    let mut actual: std::collections::HashMap<&str, Vec<usize>> = std::collections::HashMap::new();
    for id in graph.store.ids() {
        actual.insert(graph.store.name(id), graph.store.value(id).shape().to_vec());
    }
    let mut failures = Vec::new();
    let mut report = String::new();
    for (name, shape) in &expected {
        match actual.get(name.as_str()) {
            None => failures.push(format!("{name}: missing")),
            Some(got) if got != shape => {
                failures.push(format!("{name}: declared {shape:?}, actual {got:?}"))
            }
            Some(got) => {
                use std::fmt::Write;
                let _ = writeln!(report, "{name}: {got:?} ok");
            }
        }
    }
    if actual.len() != expected.len() {
        failures.push(format!(
            "parameter count mismatch: table has {}, graph has {}",
            expected.len(),
            actual.len()
        ));
    }
    if failures.is_empty() {
        Ok(report)
    } else {
        Err(Error::Audit(failures.join("\n")))
    }
}

pub fn count_parameters(graph: &ModelGraph) -> usize {
    let ids: Vec<ParamId> = graph.store.ids().collect();
    graph.store.num_elements(&ids)
}

#[cfg(test)]
mod tests;
