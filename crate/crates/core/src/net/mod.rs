//! Dual-head residual embedding network.
//!
//! ```text
//! image ─ stem conv ─ [pre-activation residual blocks]* ─ affine·ReLU ─ GAP ─ linear ─ R
//!                                                                               │
//!                      D (aggregated keypoint descriptor) ── F = ‖αD + (1−α)R̂‖ ─┤
//!                                                                               ├─ fc·ReLU·fc·softmax ─ submap probabilities
//!                                                                               └─ fc·L2 ─ embedding
//! ```
//!
//! Batch normalization is replaced by a learnable per-channel scale and
//! shift so the forward pass is a pure per-sample function and gradients can
//! be checked exactly. Arithmetic is f64; parameter values are kept on the
//! f32 grid so checkpoints round-trip bit-exactly.

mod checkpoint;
mod gradcheck;
pub(crate) mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use gradcheck::{gradient_check, GradCheckOptions, GradCheckReport};

use crate::error::{Error, Result};
use crate::features::DESCRIPTOR_DIM;
use crate::par::Exec;
use crate::raster::ImageTensor;
use crate::train::loss::{contrastive_grad, contrastive_loss, Pair};
use layers::ConvGeom;

const UNIT_TOLERANCE: f64 = 1e-6;
const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// `(height, width)` of the network input.
    pub input_size: (usize, usize),
    pub stem_channels: usize,
    pub channels_per_stage: Vec<usize>,
    pub blocks_per_stage: usize,
    pub embed_dim: usize,
    pub descriptor_dim: usize,
    pub class_hidden: usize,
    pub num_classes: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_size: (32, 32),
            stem_channels: 16,
            channels_per_stage: vec![16, 32, 64],
            blocks_per_stage: 2,
            embed_dim: 128,
            descriptor_dim: DESCRIPTOR_DIM,
            class_hidden: 64,
            num_classes: 8,
            alpha: 0.7,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn desk(num_classes: usize, seed: u64) -> Self {
        NetworkConfig {
            num_classes,
            seed,
            ..Default::default()
        }
    }

    /// Residual-free toy network: stem conv, pooling and the heads.
    pub fn toy(num_classes: usize, seed: u64) -> Self {
        NetworkConfig {
            input_size: (4, 4),
            stem_channels: 3,
            channels_per_stage: vec![],
            blocks_per_stage: 0,
            class_hidden: 8,
            num_classes,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if h == 0 || w == 0 {
            return Err(Error::Config("input size must be positive".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        if self.embed_dim != self.descriptor_dim {
            return Err(Error::Config(format!(
                "embed_dim {} must equal the descriptor dimension {} for fusion",
                self.embed_dim, self.descriptor_dim
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.stem_channels == 0 || self.channels_per_stage.contains(&0) || self.class_hidden == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if !self.channels_per_stage.is_empty() && self.blocks_per_stage == 0 {
            return Err(Error::Config("blocks_per_stage must be positive when stages exist".into()));
        }
        Ok(())
    }

    fn final_channels(&self) -> usize {
        self.channels_per_stage.last().copied().unwrap_or(self.stem_channels)
    }
}

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct ConvIdx {
    param: usize,
    geom: ConvGeom,
}

#[derive(Debug, Clone, Copy)]
struct AffineIdx {
    scale: usize,
    shift: usize,
}

#[derive(Debug, Clone, Copy)]
struct LinearIdx {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct BlockIdx {
    aff1: AffineIdx,
    conv1: ConvIdx,
    aff2: AffineIdx,
    conv2: ConvIdx,
    shortcut: Option<ConvIdx>,
}

#[derive(Debug, Clone)]
struct Layout {
    stem: ConvIdx,
    blocks: Vec<BlockIdx>,
    post: AffineIdx,
    post_hw: (usize, usize),
    proj: LinearIdx,
    cls1: LinearIdx,
    cls2: LinearIdx,
    sim: LinearIdx,
}

/// How a parameter tensor is initialized.
#[derive(Clone, Copy)]
enum Init {
    Normal(f64),
    Const(f64),
}

struct Builder {
    params: Vec<Param>,
    inits: Vec<Init>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        let n = shape.iter().product();
        self.params.push(Param {
            name,
            shape,
            data: vec![0.0; n],
        });
        self.inits.push(init);
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, geom: ConvGeom, gain: f64) -> ConvIdx {
        let std = gain * (2.0 / geom.patch() as f64).sqrt();
        let param = self.add(
            name.to_string(),
            vec![geom.cout, geom.cin, geom.k, geom.k],
            Init::Normal(std),
        );
        ConvIdx { param, geom }
    }

    fn affine(&mut self, name: &str, channels: usize) -> AffineIdx {
        AffineIdx {
            scale: self.add(format!("{name}.scale"), vec![channels], Init::Const(1.0)),
            shift: self.add(format!("{name}.shift"), vec![channels], Init::Const(0.0)),
        }
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize, gain: f64) -> LinearIdx {
        let std = gain * (1.0 / din as f64).sqrt();
        LinearIdx {
            w: self.add(format!("{name}.weight"), vec![dout, din], Init::Normal(std)),
            b: self.add(format!("{name}.bias"), vec![dout], Init::Const(0.0)),
        }
    }
}

fn build_layout(cfg: &NetworkConfig) -> (Vec<Param>, Vec<Init>, Layout) {
    let mut b = Builder {
        params: Vec::new(),
        inits: Vec::new(),
    };
    let (mut h, mut w) = cfg.input_size;
    let stem = b.conv(
        "stem.conv",
        ConvGeom {
            cin: 3,
            cout: cfg.stem_channels,
            k: 3,
            stride: 1,
            pad: 1,
            h,
            w,
        },
        1.0,
    );
    let total_blocks = cfg.channels_per_stage.len() * cfg.blocks_per_stage;
    // Residual branches are damped so activations stay O(1) without normalization.
    let branch_gain = 1.0 / (total_blocks.max(1) as f64).sqrt();
    let mut cin = cfg.stem_channels;
    let mut blocks = Vec::new();
    for (s, &cout) in cfg.channels_per_stage.iter().enumerate() {
        for bi in 0..cfg.blocks_per_stage {
            let stride = if bi == 0 { 2 } else { 1 };
            let name = format!("stage{s}.block{bi}");
            let aff1 = b.affine(&format!("{name}.affine1"), cin);
            let g1 = ConvGeom {
                cin,
                cout,
                k: 3,
                stride,
                pad: 1,
                h,
                w,
            };
            let conv1 = b.conv(&format!("{name}.conv1"), g1, 1.0);
            let (oh, ow) = (g1.out_h(), g1.out_w());
            let aff2 = b.affine(&format!("{name}.affine2"), cout);
            let conv2 = b.conv(
                &format!("{name}.conv2"),
                ConvGeom {
                    cin: cout,
                    cout,
                    k: 3,
                    stride: 1,
                    pad: 1,
                    h: oh,
                    w: ow,
                },
                branch_gain,
            );
            let shortcut = (stride != 1 || cin != cout).then(|| {
                b.conv(
                    &format!("{name}.shortcut"),
                    ConvGeom {
                        cin,
                        cout,
                        k: 1,
                        stride,
                        pad: 0,
                        h,
                        w,
                    },
                    0.5,
                )
            });
            blocks.push(BlockIdx {
                aff1,
                conv1,
                aff2,
                conv2,
                shortcut,
            });
            cin = cout;
            h = oh;
            w = ow;
        }
    }
    let post = b.affine("post", cin);
    let proj = b.linear("proj", cfg.final_channels(), cfg.embed_dim, 1.0);
    let cls1 = b.linear("cls.fc1", cfg.embed_dim, cfg.class_hidden, 2f64.sqrt());
    let cls2 = b.linear("cls.fc2", cfg.class_hidden, cfg.num_classes, 1.0);
    let sim = b.linear("sim.fc", cfg.embed_dim, cfg.embed_dim, 1.0);
    let layout = Layout {
        stem,
        blocks,
        post,
        post_hw: (h, w),
        proj,
        cls1,
        cls2,
        sim,
    };
    (b.params, b.inits, layout)
}

/// Round to the nearest f32, the storage precision of checkpoints.
#[inline]
pub(crate) fn to_f32_grid(v: f64) -> f64 {
    f64::from(v as f32)
}

#[derive(Debug, Clone)]
pub struct Network {
    config: NetworkConfig,
    params: Vec<Param>,
    layout: Layout,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

/// Per-sample forward result.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub class_probs: Vec<f64>,
    pub embedding: Vec<f64>,
    /// Backbone projection before fusion (not normalized).
    pub backbone: Vec<f64>,
    pub fused: Vec<f64>,
}

impl ForwardOutput {
    pub fn predicted_class(&self) -> usize {
        argmax(&self.class_probs)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `F = normalize(α·D + (1−α)·R̂)` with `R̂ = R/‖R‖`.
pub fn fuse(descriptor: &[f64], backbone: &[f64], alpha: f64) -> Result<Vec<f64>> {
    Ok(fuse_parts(descriptor, backbone, alpha)?.fused)
}

struct Fusion {
    r_hat: Vec<f64>,
    r_norm: f64,
    fused: Vec<f64>,
    blend_norm: f64,
}

fn fuse_parts(d: &[f64], r: &[f64], alpha: f64) -> Result<Fusion> {
    if d.len() != r.len() {
        return Err(Error::Shape(format!(
            "descriptor has {} dims, backbone output {}",
            d.len(),
            r.len()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Argument(format!("alpha {alpha} outside [0, 1]")));
    }
    let r_norm = layers::norm(r);
    if r_norm == 0.0 || !r_norm.is_finite() {
        return Err(Error::Degenerate("backbone output has zero norm".into()));
    }
    let r_hat: Vec<f64> = r.iter().map(|v| v / r_norm).collect();
    let blend: Vec<f64> = d
        .iter()
        .zip(&r_hat)
        .map(|(&dv, &rv)| alpha * dv + (1.0 - alpha) * rv)
        .collect();
    let blend_norm = layers::norm(&blend);
    if blend_norm == 0.0 || !blend_norm.is_finite() {
        return Err(Error::Degenerate(
            "fused vector is zero (descriptor opposes backbone output)".into(),
        ));
    }
    Ok(Fusion {
        r_hat,
        r_norm,
        fused: blend.into_iter().map(|v| v / blend_norm).collect(),
        blend_norm,
    })
}

struct BlockTrace {
    x_in: Vec<f64>,
    pre1: Vec<f64>,
    cols1: Vec<f64>,
    y1: Vec<f64>,
    pre2: Vec<f64>,
    cols2: Vec<f64>,
    cols_sc: Option<Vec<f64>>,
}

/// Activations retained for the backward pass.
pub(crate) struct Trace {
    stem_cols: Vec<f64>,
    blocks: Vec<BlockTrace>,
    post_in: Vec<f64>,
    post_pre: Vec<f64>,
    pooled: Vec<f64>,
    fusion: Fusion,
    head_in: Vec<f64>,
    z1: Vec<f64>,
    h1: Vec<f64>,
    sim_norm: f64,
    pub(crate) out: ForwardOutput,
}

/// Parameter gradients, aligned with [`Network::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients(net.params.iter().map(|p| vec![0.0; p.data.len()]).collect())
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.0
            .iter()
            .flatten()
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// One training example for the combined loss.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub image: ImageTensor,
    pub descriptor: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub items: Vec<BatchItem>,
    pub pairs: Vec<Pair>,
}

/// Weights of the combined objective `λ_cls·L_CE + λ_sim·L_con`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_cls: f64,
    pub lambda_sim: f64,
    pub margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_cls: 1.0,
            lambda_sim: 1.0,
            margin: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cross_entropy: f64,
    pub contrastive: f64,
    pub correct: usize,
}

impl Network {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let (mut params, inits, layout) = build_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for (p, init) in params.iter_mut().zip(inits) {
            match init {
                Init::Const(c) => p.data.iter_mut().for_each(|v| *v = c),
                Init::Normal(std) => p.data.iter_mut().for_each(|v| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = to_f32_grid(z * std);
                }),
            }
        }
        Ok(Network {
            config,
            params,
            layout,
        })
    }

    pub(crate) fn from_parts(config: NetworkConfig, loaded: Vec<Param>) -> Result<Self> {
        config.validate()?;
        let (mut params, _, layout) = build_layout(&config);
        if loaded.len() != params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, configuration implies {}",
                loaded.len(),
                params.len()
            )));
        }
        for (dst, src) in params.iter_mut().zip(loaded) {
            if dst.name != src.name || dst.shape != src.shape {
                return Err(Error::Config(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    src.name, src.shape, dst.name, dst.shape
                )));
            }
            dst.data = src.data;
        }
        Ok(Network {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Whether a parameter belongs to the classification head.
    pub fn is_class_head(name: &str) -> bool {
        name.starts_with("cls.")
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn fingerprint(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(encode_checkpoint(self));
        let mut out = [0u8; 32];
        out.copy_from_slice(&digest);
        out
    }

    /// Grow the classification head by `extra` classes. New output rows and
    /// biases start at zero.
    pub fn extend_classes(&mut self, extra: usize) {
        let hidden = self.config.class_hidden;
        let LinearIdx { w, b } = self.layout.cls2;
        self.params[w].data.extend(std::iter::repeat_n(0.0, extra * hidden));
        self.params[w].shape[0] += extra;
        self.params[b].data.extend(std::iter::repeat_n(0.0, extra));
        self.params[b].shape[0] += extra;
        self.config.num_classes += extra;
    }

    fn check_inputs(&self, image: &ImageTensor, descriptor: &[f64]) -> Result<()> {
        let (h, w) = self.config.input_size;
        if image.height != h || image.width != w || image.data.len() != 3 * h * w {
            return Err(Error::Shape(format!(
                "image is {}x{}, network expects {h}x{w}",
                image.height, image.width
            )));
        }
        if descriptor.len() != self.config.descriptor_dim {
            return Err(Error::Shape(format!(
                "descriptor has {} dims, expected {}",
                descriptor.len(),
                self.config.descriptor_dim
            )));
        }
        let n = layers::norm(descriptor);
        if !n.is_finite() || (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::Validation(format!(
                "descriptor must be unit-norm, has norm {n}"
            )));
        }
        Ok(())
    }

    pub fn forward(&self, image: &ImageTensor, descriptor: &[f64]) -> Result<ForwardOutput> {
        Ok(self.forward_trace(image, descriptor)?.out)
    }

    pub(crate) fn forward_trace(&self, image: &ImageTensor, descriptor: &[f64]) -> Result<Trace> {
        self.check_inputs(image, descriptor)?;
        let p = &self.params;
        let l = &self.layout;

        let (mut x, stem_cols) =
            layers::conv_forward(&image.data, &p[l.stem.param].data, &l.stem.geom);

        let mut blocks = Vec::with_capacity(l.blocks.len());
        for blk in &l.blocks {
            let g1 = blk.conv1.geom;
            let plane_in = g1.h * g1.w;
            let pre1 = layers::affine_forward(
                &x,
                &p[blk.aff1.scale].data,
                &p[blk.aff1.shift].data,
                plane_in,
            );
            let r1 = layers::relu(&pre1);
            let (y1, cols1) = layers::conv_forward(&r1, &p[blk.conv1.param].data, &g1);
            let plane_out = g1.pixels();
            let pre2 = layers::affine_forward(
                &y1,
                &p[blk.aff2.scale].data,
                &p[blk.aff2.shift].data,
                plane_out,
            );
            let r2 = layers::relu(&pre2);
            let (mut y2, cols2) =
                layers::conv_forward(&r2, &p[blk.conv2.param].data, &blk.conv2.geom);
            let cols_sc = match &blk.shortcut {
                Some(sc) => {
                    let (s, c) = layers::conv_forward(&r1, &p[sc.param].data, &sc.geom);
                    y2.iter_mut().zip(&s).for_each(|(a, b)| *a += b);
                    Some(c)
                }
                None => {
                    y2.iter_mut().zip(&x).for_each(|(a, b)| *a += b);
                    None
                }
            };
            blocks.push(BlockTrace {
                x_in: x,
                pre1,
                cols1,
                y1,
                pre2,
                cols2,
                cols_sc,
            });
            x = y2;
        }

        let plane = l.post_hw.0 * l.post_hw.1;
        let post_pre = layers::affine_forward(
            &x,
            &p[l.post.scale].data,
            &p[l.post.shift].data,
            plane,
        );
        let pooled: Vec<f64> = post_pre
            .chunks(plane)
            .map(|c| c.iter().map(|v| v.max(0.0)).sum::<f64>() / plane as f64)
            .collect();
        let backbone = layers::linear_forward(&p[l.proj.w].data, &p[l.proj.b].data, &pooled);
        let fusion = fuse_parts(descriptor, &backbone, self.config.alpha)?;

        // The class head sees √dim·F so its inputs have unit scale per component.
        let head_scale = (self.config.embed_dim as f64).sqrt();
        let head_in: Vec<f64> = fusion.fused.iter().map(|v| head_scale * v).collect();
        let z1 = layers::linear_forward(&p[l.cls1.w].data, &p[l.cls1.b].data, &head_in);
        let h1 = layers::relu(&z1);
        let logits = layers::linear_forward(&p[l.cls2.w].data, &p[l.cls2.b].data, &h1);
        let class_probs = layers::softmax(&logits);

        let s = layers::linear_forward(&p[l.sim.w].data, &p[l.sim.b].data, &fusion.fused);
        let sim_norm = layers::norm(&s);
        if sim_norm == 0.0 || !sim_norm.is_finite() {
            return Err(Error::Numerical {
                term: "similarity head norm".into(),
                value: sim_norm,
            });
        }
        let embedding = s.iter().map(|v| v / sim_norm).collect();

        let fused = fusion.fused.clone();
        Ok(Trace {
            stem_cols,
            blocks,
            post_in: x,
            post_pre,
            pooled,
            fusion,
            head_in,
            z1,
            h1,
            sim_norm,
            out: ForwardOutput {
                class_probs,
                embedding,
                backbone,
                fused,
            },
        })
    }

    /// Backpropagate upstream gradients on the logits and the embedding.
    pub(crate) fn backward(&self, t: &Trace, d_logits: &[f64], d_embed: &[f64]) -> Gradients {
        let p = &self.params;
        let l = &self.layout;
        let mut g = Gradients::zeros_like(self);
        let alpha = self.config.alpha;

        // Similarity head.
        let ds = layers::normalize_backward(&t.out.embedding, t.sim_norm, d_embed);
        let (gw, gb) = two_mut(&mut g.0, l.sim.w, l.sim.b);
        let mut d_fused = layers::linear_backward(&p[l.sim.w].data, &t.fusion.fused, &ds, gw, gb);

        // Classification head.
        let (gw, gb) = two_mut(&mut g.0, l.cls2.w, l.cls2.b);
        let dh1 = layers::linear_backward(&p[l.cls2.w].data, &t.h1, d_logits, gw, gb);
        let dz1: Vec<f64> = dh1
            .iter()
            .zip(&t.z1)
            .map(|(&d, &z)| if z > 0.0 { d } else { 0.0 })
            .collect();
        let (gw, gb) = two_mut(&mut g.0, l.cls1.w, l.cls1.b);
        let df = layers::linear_backward(&p[l.cls1.w].data, &t.head_in, &dz1, gw, gb);
        let head_scale = (self.config.embed_dim as f64).sqrt();
        d_fused.iter_mut().zip(&df).for_each(|(a, b)| *a += head_scale * b);

        if alpha == 1.0 {
            // The backbone does not reach the heads.
            return g;
        }

        // Fusion and backbone projection.
        let d_blend = layers::normalize_backward(&t.fusion.fused, t.fusion.blend_norm, &d_fused);
        let d_rhat: Vec<f64> = d_blend.iter().map(|v| (1.0 - alpha) * v).collect();
        let d_r = layers::normalize_backward(&t.fusion.r_hat, t.fusion.r_norm, &d_rhat);
        let (gw, gb) = two_mut(&mut g.0, l.proj.w, l.proj.b);
        let d_pooled = layers::linear_backward(&p[l.proj.w].data, &t.pooled, &d_r, gw, gb);

        // Global average pool and the final affine·ReLU.
        let plane = l.post_hw.0 * l.post_hw.1;
        let mut d_act = vec![0.0; t.post_pre.len()];
        for (c, &dp) in d_pooled.iter().enumerate() {
            let v = dp / plane as f64;
            d_act[c * plane..(c + 1) * plane].iter_mut().for_each(|x| *x = v);
        }
        let (gs, gh) = two_mut(&mut g.0, l.post.scale, l.post.shift);
        let mut dx = layers::affine_relu_backward(
            &d_act,
            &t.post_pre,
            &t.post_in,
            &p[l.post.scale].data,
            plane,
            gs,
            gh,
        );

        for (blk, bt) in l.blocks.iter().zip(&t.blocks).rev() {
            let g1 = blk.conv1.geom;
            // out = conv2(relu(aff2(conv1(relu(aff1(x)))))) + shortcut
            let d_r2 = layers::conv_backward(
                &dx,
                &bt.cols2,
                &p[blk.conv2.param].data,
                &blk.conv2.geom,
                &mut g.0[blk.conv2.param],
            );
            let (gs, gh) = two_mut(&mut g.0, blk.aff2.scale, blk.aff2.shift);
            let d_y1 = layers::affine_relu_backward(
                &d_r2,
                &bt.pre2,
                &bt.y1,
                &p[blk.aff2.scale].data,
                g1.pixels(),
                gs,
                gh,
            );
            let mut d_r1 = layers::conv_backward(
                &d_y1,
                &bt.cols1,
                &p[blk.conv1.param].data,
                &g1,
                &mut g.0[blk.conv1.param],
            );
            let mut d_x_skip = None;
            match (&blk.shortcut, &bt.cols_sc) {
                (Some(sc), Some(cols)) => {
                    let d = layers::conv_backward(
                        &dx,
                        cols,
                        &p[sc.param].data,
                        &sc.geom,
                        &mut g.0[sc.param],
                    );
                    d_r1.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
                }
                _ => d_x_skip = Some(dx),
            }
            let (gs, gh) = two_mut(&mut g.0, blk.aff1.scale, blk.aff1.shift);
            let mut d_x = layers::affine_relu_backward(
                &d_r1,
                &bt.pre1,
                &bt.x_in,
                &p[blk.aff1.scale].data,
                g1.h * g1.w,
                gs,
                gh,
            );
            if let Some(skip) = d_x_skip {
                d_x.iter_mut().zip(&skip).for_each(|(a, b)| *a += b);
            }
            dx = d_x;
        }

        // Stem; the input gradient is not needed.
        let (kk, px) = (l.stem.geom.patch(), l.stem.geom.pixels());
        let gw = &mut g.0[l.stem.param];
        for co in 0..l.stem.geom.cout {
            let drow = &dx[co * px..(co + 1) * px];
            for r in 0..kk {
                let crow = &t.stem_cols[r * px..(r + 1) * px];
                gw[co * kk + r] += drow.iter().zip(crow).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        g
    }

    /// Combined loss without gradients.
    pub fn loss(&self, batch: &Batch, cfg: &LossConfig) -> Result<LossBreakdown> {
        self.loss_with(batch, cfg, Exec::default())
    }

    pub fn loss_with(&self, batch: &Batch, cfg: &LossConfig, exec: Exec) -> Result<LossBreakdown> {
        let outs = exec.map(&batch.items, |it| self.forward(&it.image, &it.descriptor));
        let outs = outs.into_iter().collect::<Result<Vec<_>>>()?;
        combine_loss(&outs, batch, cfg)
    }

    /// Combined loss and its gradient with respect to every parameter.
    pub fn loss_and_gradients(
        &self,
        batch: &Batch,
        cfg: &LossConfig,
    ) -> Result<(LossBreakdown, Gradients)> {
        self.loss_and_gradients_with(batch, cfg, Exec::default())
    }

    pub fn loss_and_gradients_with(
        &self,
        batch: &Batch,
        cfg: &LossConfig,
        exec: Exec,
    ) -> Result<(LossBreakdown, Gradients)> {
        if batch.items.is_empty() {
            return Err(Error::EmptyInput("batch has no items".into()));
        }
        let traces = exec.map(&batch.items, |it| self.forward_trace(&it.image, &it.descriptor));
        let traces = traces.into_iter().collect::<Result<Vec<_>>>()?;
        let outs: Vec<ForwardOutput> = traces.iter().map(|t| t.out.clone()).collect();
        let breakdown = combine_loss(&outs, batch, cfg)?;

        let n = batch.items.len() as f64;
        let d_logits: Vec<Vec<f64>> = batch
            .items
            .iter()
            .zip(&outs)
            .map(|(it, o)| {
                // Softmax-cross-entropy gradient (p − y)/N; the log clamp only
                // matters once p < 1e-12 and is ignored here.
                o.class_probs
                    .iter()
                    .enumerate()
                    .map(|(j, &pj)| {
                        let y = if j == it.label { 1.0 } else { 0.0 };
                        cfg.lambda_cls * (pj - y) / n
                    })
                    .collect()
            })
            .collect();
        let dim = self.config.embed_dim;
        let mut d_embed = vec![vec![0.0; dim]; batch.items.len()];
        if !batch.pairs.is_empty() && cfg.lambda_sim != 0.0 {
            let scale = cfg.lambda_sim / batch.pairs.len() as f64;
            for pair in &batch.pairs {
                let gi = contrastive_grad(
                    &outs[pair.i].embedding,
                    &outs[pair.j].embedding,
                    pair.label,
                    cfg.margin,
                );
                for k in 0..dim {
                    d_embed[pair.i][k] += scale * gi[k];
                    d_embed[pair.j][k] -= scale * gi[k];
                }
            }
        }

        let per_item = exec.map_range(traces.len(), |i| {
            self.backward(&traces[i], &d_logits[i], &d_embed[i])
        });
        let mut total = Gradients::zeros_like(self);
        for g in &per_item {
            total.add_assign(g);
        }
        Ok((breakdown, total))
    }

    /// `θ ← θ − update`, rounded back onto the f32 grid.
    pub(crate) fn apply_update(&mut self, updates: &[Vec<f64>], mask: impl Fn(&str) -> bool) -> Result<()> {
        for (p, u) in self.params.iter_mut().zip(updates) {
            if !mask(&p.name) {
                continue;
            }
            for (v, d) in p.data.iter_mut().zip(u) {
                *v = to_f32_grid(*v - d);
            }
            if let Some(bad) = p.data.iter().find(|v| !v.is_finite()) {
                return Err(Error::Numerical {
                    term: format!("parameter {}", p.name),
                    value: *bad,
                });
            }
        }
        Ok(())
    }
}

fn two_mut(v: &mut [Vec<f64>], a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    assert!(a < b);
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

impl Network {
    /// Sequential loss plus a hash of every non-smooth branch taken: ReLU
    /// signs, active contrastive hinges and the log clamp. Two parameter
    /// settings with equal signatures lie on the same smooth piece.
    pub(crate) fn loss_and_signature(&self, batch: &Batch, cfg: &LossConfig) -> Result<(f64, u64)> {
        use std::hash::{DefaultHasher, Hasher};
        let mut hasher = DefaultHasher::new();
        let mut signs = |v: &[f64]| {
            for chunk in v.chunks(64) {
                let bits = chunk
                    .iter()
                    .enumerate()
                    .fold(0u64, |acc, (i, &x)| acc | (u64::from(x > 0.0) << i));
                hasher.write_u64(bits);
            }
        };
        let mut outs = Vec::with_capacity(batch.items.len());
        for it in &batch.items {
            let t = self.forward_trace(&it.image, &it.descriptor)?;
            for b in &t.blocks {
                signs(&b.pre1);
                signs(&b.pre2);
            }
            signs(&t.post_pre);
            signs(&t.z1);
            outs.push(t.out);
        }
        for pair in &batch.pairs {
            let d = outs[pair.i]
                .embedding
                .iter()
                .zip(&outs[pair.j].embedding)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            hasher.write_u8(u8::from(d < cfg.margin));
        }
        for (o, it) in outs.iter().zip(&batch.items) {
            hasher.write_u8(u8::from(o.class_probs[it.label] < LOG_CLAMP));
        }
        let loss = combine_loss(&outs, batch, cfg)?.total;
        Ok((loss, hasher.finish()))
    }
}

fn combine_loss(outs: &[ForwardOutput], batch: &Batch, cfg: &LossConfig) -> Result<LossBreakdown> {
    let n = outs.len() as f64;
    let mut ce = 0.0;
    let mut correct = 0;
    for (o, it) in outs.iter().zip(&batch.items) {
        let pl = o.class_probs.get(it.label).copied().ok_or_else(|| {
            Error::Shape(format!(
                "label {} outside {} classes",
                it.label,
                o.class_probs.len()
            ))
        })?;
        ce -= pl.max(LOG_CLAMP).ln();
        if o.predicted_class() == it.label {
            correct += 1;
        }
    }
    ce /= n;
    let mut con = 0.0;
    if !batch.pairs.is_empty() {
        for pair in &batch.pairs {
            con += contrastive_loss(
                &outs[pair.i].embedding,
                &outs[pair.j].embedding,
                pair.label,
                cfg.margin,
            );
        }
        con /= batch.pairs.len() as f64;
    }
    if !ce.is_finite() {
        return Err(Error::Numerical {
            term: "cross-entropy".into(),
            value: ce,
        });
    }
    if !con.is_finite() {
        return Err(Error::Numerical {
            term: "contrastive".into(),
            value: con,
        });
    }
    Ok(LossBreakdown {
        total: cfg.lambda_cls * ce + cfg.lambda_sim * con,
        cross_entropy: ce,
        contrastive: con,
        correct,
    })
}

#[cfg(test)]
mod tests;
