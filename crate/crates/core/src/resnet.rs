//! ResNet-18/34/50/101/152 in normal and dilated form: declarative
//! architecture specs, seeded builds, forward passes (pure inference and
//! taped training), and a per-layer audit.
//!
//! The dilated form removes the stride from the entry of the fourth residual
//! stage and applies dilation 3 to its first unit's convolutions (the 3×3s
//! carry the real dilation; 1×1 entries are recorded but inert), which
//! doubles the stage-4 feature-map extent without adding parameters.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, ValueId};
use crate::conv::{conv2d, receptive_field_of_network, ConvSpec, LayerGeometry};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{batch_norm_infer, channel_stats, BatchNormState, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    R18,
    R34,
    R50,
    R101,
    R152,
}

impl Variant {
    pub fn from_depth(depth: usize) -> Result<Self> {
        match depth {
            18 => Ok(Self::R18),
            34 => Ok(Self::R34),
            50 => Ok(Self::R50),
            101 => Ok(Self::R101),
            152 => Ok(Self::R152),
            other => Err(Error::InvalidArg(format!(
                "unknown variant {other}; valid: 18, 34, 50, 101, 152"
            ))),
        }
    }

    pub fn depth(self) -> usize {
        match self {
            Self::R18 => 18,
            Self::R34 => 34,
            Self::R50 => 50,
            Self::R101 => 101,
            Self::R152 => 152,
        }
    }

    /// Residual units per stage.
    pub fn units(self) -> [usize; 4] {
        match self {
            Self::R18 => [2, 2, 2, 2],
            Self::R34 => [3, 4, 6, 3],
            Self::R50 => [3, 4, 6, 3],
            Self::R101 => [3, 4, 23, 3],
            Self::R152 => [3, 8, 36, 3],
        }
    }

    pub fn bottleneck(self) -> bool {
        matches!(self, Self::R50 | Self::R101 | Self::R152)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Basic,
    Bottleneck,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shortcut {
    Identity,
    Projection,
}

/// One residual unit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_ch: usize,
    /// Width of the 3×3 path (equals `out_ch` for basic blocks).
    pub mid_ch: usize,
    pub out_ch: usize,
    /// Stride applied once in this unit (1 everywhere except stage entries).
    pub first_unit_stride: usize,
    /// Dilation factor per conv, length 2 (basic) or 3 (bottleneck).
    pub dilation_per_conv: Vec<usize>,
    pub shortcut: Shortcut,
}

/// Geometry and channel plan of one convolution site.
#[derive(Clone, Copy, Debug)]
pub struct ConvPlan {
    pub in_ch: usize,
    pub out_ch: usize,
    pub spec: ConvSpec,
}

fn conv_plan(in_ch: usize, out_ch: usize, k: usize, stride: usize, dilation: usize) -> ConvPlan {
    // 3×3 and larger kernels pad by the dilation factor to preserve extent
    // at stride 1; 1×1 kernels need none.
    let pad = if k > 1 { dilation * (k / 2) } else { 0 };
    ConvPlan {
        in_ch,
        out_ch,
        spec: ConvSpec::square(k, stride, pad, dilation).expect("static conv plan"),
    }
}

impl BlockSpec {
    fn validate(&self) -> Result<()> {
        let want = match self.kind {
            BlockKind::Basic => 2,
            BlockKind::Bottleneck => 3,
        };
        if self.dilation_per_conv.len() != want {
            return Err(Error::InvalidArg(format!(
                "{:?} block needs {want} dilation entries, got {}",
                self.kind,
                self.dilation_per_conv.len()
            )));
        }
        if self.dilation_per_conv.iter().any(|&l| l == 0) {
            return Err(Error::InvalidArg("dilation must be >= 1".into()));
        }
        // A dilated conv never also strides.
        for (i, &l) in self.dilation_per_conv.iter().enumerate() {
            if l > 1 && self.convs()[i].spec.stride_h > 1 {
                return Err(Error::InvalidArg(format!(
                    "conv {i} has dilation {l} and stride > 1"
                )));
            }
        }
        Ok(())
    }

    /// Main-path convolutions, in order.
    pub fn convs(&self) -> Vec<ConvPlan> {
        let d = &self.dilation_per_conv;
        let s = self.first_unit_stride;
        match self.kind {
            BlockKind::Basic => vec![
                conv_plan(self.in_ch, self.out_ch, 3, s, d[0]),
                conv_plan(self.out_ch, self.out_ch, 3, 1, d[1]),
            ],
            BlockKind::Bottleneck => vec![
                conv_plan(self.in_ch, self.mid_ch, 1, 1, d[0]),
                conv_plan(self.mid_ch, self.mid_ch, 3, s, d[1]),
                conv_plan(self.mid_ch, self.out_ch, 1, 1, d[2]),
            ],
        }
    }

    pub fn projection(&self) -> Option<ConvPlan> {
        match self.shortcut {
            Shortcut::Identity => None,
            Shortcut::Projection => Some(conv_plan(
                self.in_ch,
                self.out_ch,
                1,
                self.first_unit_stride,
                1,
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StemSpec {
    pub in_ch: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub max_pool: bool,
}

/// Full architecture description; `build` turns it into an initialized
/// network.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchSpec {
    pub variant: Option<Variant>,
    pub dilated: bool,
    pub class_count: usize,
    pub width_mult: f64,
    pub batch_norm: bool,
    pub stem: StemSpec,
    pub stages: Vec<Vec<BlockSpec>>,
}

fn scaled(base: usize, width_mult: f64) -> usize {
    ((base as f64 * width_mult).round() as usize).max(1)
}

impl ArchSpec {
    pub fn resnet(
        variant: Variant,
        dilated: bool,
        class_count: usize,
        width_mult: f64,
        batch_norm: bool,
    ) -> Result<Self> {
        let stem_ch = scaled(64, width_mult);
        let mids = [
            scaled(64, width_mult),
            scaled(128, width_mult),
            scaled(256, width_mult),
            scaled(512, width_mult),
        ];
        Self::resnet_with_widths(variant, dilated, class_count, batch_norm, stem_ch, mids)
            .map(|mut a| {
                a.width_mult = width_mult;
                a
            })
    }

    /// Same plan with every stage width given explicitly (used when
    /// reconstructing a network from its serialized tensors).
    pub fn resnet_with_widths(
        variant: Variant,
        dilated: bool,
        class_count: usize,
        batch_norm: bool,
        stem_ch: usize,
        stage_mid_ch: [usize; 4],
    ) -> Result<Self> {
        if class_count == 0 {
            return Err(Error::InvalidArg("class count must be >= 1".into()));
        }
        let bottleneck = variant.bottleneck();
        let kind = if bottleneck {
            BlockKind::Bottleneck
        } else {
            BlockKind::Basic
        };
        let expansion = if bottleneck { 4 } else { 1 };
        let mut stages = Vec::with_capacity(4);
        let mut in_ch = stem_ch;
        for (si, &unit_count) in variant.units().iter().enumerate() {
            let mid = stage_mid_ch[si];
            let out = mid * expansion;
            let mut units = Vec::with_capacity(unit_count);
            for ui in 0..unit_count {
                let is_first = ui == 0;
                // Stage 1 entry never strides (the stem pool already halved);
                // later stage entries stride 2 unless this is the dilated
                // fourth stage, whose entry drops to stride 1.
                let mut stride = if is_first && si > 0 { 2 } else { 1 };
                let conv_n = if bottleneck { 3 } else { 2 };
                let mut dils = vec![1usize; conv_n];
                if dilated && si == 3 && is_first {
                    stride = 1;
                    for d in dils.iter_mut() {
                        *d = 3;
                    }
                }
                let shortcut = if is_first && (in_ch != out || stride != 1) {
                    Shortcut::Projection
                } else {
                    Shortcut::Identity
                };
                let block = BlockSpec {
                    kind,
                    in_ch,
                    mid_ch: mid,
                    out_ch: out,
                    first_unit_stride: stride,
                    dilation_per_conv: dils,
                    shortcut,
                };
                block.validate()?;
                units.push(block);
                in_ch = out;
            }
            stages.push(units);
        }
        Ok(Self {
            variant: Some(variant),
            dilated,
            class_count,
            width_mult: stem_ch as f64 / 64.0,
            batch_norm,
            stem: StemSpec {
                in_ch: 3,
                channels: stem_ch,
                kernel: 7,
                stride: 2,
                pad: 3,
                max_pool: true,
            },
            stages,
        })
    }

    /// A tiny ResNet for gradient checking: 3×3/stride-1 stem without
    /// pooling, one basic unit per listed stage width, later stages
    /// stride 2.
    pub fn miniature(
        stem_ch: usize,
        stage_ch: &[usize],
        class_count: usize,
        dilate_last: bool,
    ) -> Result<Self> {
        if stage_ch.is_empty() {
            return Err(Error::InvalidArg("miniature needs >= 1 stage".into()));
        }
        let mut stages = Vec::new();
        let mut in_ch = stem_ch;
        let last = stage_ch.len() - 1;
        for (si, &ch) in stage_ch.iter().enumerate() {
            let mut stride = if si > 0 { 2 } else { 1 };
            let mut dils = vec![1usize; 2];
            if dilate_last && si == last && si > 0 {
                stride = 1;
                dils = vec![3, 3];
            }
            let shortcut = if in_ch != ch || stride != 1 {
                Shortcut::Projection
            } else {
                Shortcut::Identity
            };
            let block = BlockSpec {
                kind: BlockKind::Basic,
                in_ch,
                mid_ch: ch,
                out_ch: ch,
                first_unit_stride: stride,
                dilation_per_conv: dils,
                shortcut,
            };
            block.validate()?;
            stages.push(vec![block]);
            in_ch = ch;
        }
        Ok(Self {
            variant: None,
            dilated: dilate_last,
            class_count,
            width_mult: stem_ch as f64 / 64.0,
            batch_norm: true,
            stem: StemSpec {
                in_ch: 3,
                channels: stem_ch,
                kernel: 3,
                stride: 1,
                pad: 1,
                max_pool: false,
            },
            stages,
        })
    }

    fn stem_plan(&self) -> ConvPlan {
        ConvPlan {
            in_ch: self.stem.in_ch,
            out_ch: self.stem.channels,
            spec: ConvSpec::square(
                self.stem.kernel,
                self.stem.stride,
                self.stem.pad,
                1,
            )
            .expect("static stem plan"),
        }
    }

    fn head_in_ch(&self) -> usize {
        self.stages
            .last()
            .and_then(|s| s.last())
            .map(|b| b.out_ch)
            .unwrap_or(self.stem.channels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Logits plus any captured activations.
pub struct ForwardTrace {
    pub logits: Tensor<f64>,
    pub activations: BTreeMap<String, Tensor<f64>>,
}

/// Tape handles from a recorded forward pass.
pub struct TapedForward {
    pub logits: ValueId,
    pub named: BTreeMap<String, ValueId>,
    pub params: BTreeMap<String, ValueId>,
    /// Per batch-norm site: (name, batch mean, batch variance) — only in
    /// train mode, for folding into running statistics.
    pub batch_stats: Vec<(String, Vec<f64>, Vec<f64>)>,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// An initialized (or loaded) network: the architecture plan plus its
/// parameters and batch-norm running statistics.
#[derive(Clone, Debug)]
pub struct Network {
    pub arch: ArchSpec,
    pub params: BTreeMap<String, Tensor<f64>>,
    pub bn_state: BTreeMap<String, BatchNormState>,
}

/// Builds one of the five standard variants at full width.
pub fn build(variant: Variant, dilated: bool, class_count: usize, seed: u64) -> Result<Network> {
    let arch = ArchSpec::resnet(variant, dilated, class_count, 1.0, true)?;
    Network::build(arch, seed)
}

impl Network {
    pub fn build(arch: ArchSpec, seed: u64) -> Result<Network> {
        let mut rng = rng::stream(seed, "init");
        let mut params = BTreeMap::new();
        let mut bn_state = BTreeMap::new();

        let add_conv = |params: &mut BTreeMap<String, Tensor<f64>>,
                            bn_state: &mut BTreeMap<String, BatchNormState>,
                            rng: &mut rand_chacha::ChaCha8Rng,
                            name: &str,
                            plan: &ConvPlan|
         -> Result<()> {
            let fan_in = plan.in_ch * plan.spec.kernel_h * plan.spec.kernel_w;
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).map_err(|e| Error::Numeric(e.to_string()))?;
            let n = plan.out_ch * plan.in_ch * plan.spec.kernel_h * plan.spec.kernel_w;
            let w: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
            params.insert(
                format!("{name}.weight"),
                Tensor::new(
                    vec![plan.out_ch, plan.in_ch, plan.spec.kernel_h, plan.spec.kernel_w],
                    w,
                )?,
            );
            if arch.batch_norm {
                let bn = bn_name(name);
                params.insert(format!("{bn}.gamma"), Tensor::filled(vec![plan.out_ch], 1.0)?);
                params.insert(format!("{bn}.beta"), Tensor::zeros(vec![plan.out_ch])?);
                bn_state.insert(bn, BatchNormState::new(plan.out_ch));
            } else {
                params.insert(format!("{name}.bias"), Tensor::zeros(vec![plan.out_ch])?);
            }
            Ok(())
        };

        add_conv(&mut params, &mut bn_state, &mut rng, "stem.conv", &arch.stem_plan())?;
        for (si, stage) in arch.stages.iter().enumerate() {
            for (ui, block) in stage.iter().enumerate() {
                let prefix = format!("s{}.u{}", si + 1, ui + 1);
                for (ci, plan) in block.convs().iter().enumerate() {
                    add_conv(
                        &mut params,
                        &mut bn_state,
                        &mut rng,
                        &format!("{prefix}.conv{}", ci + 1),
                        plan,
                    )?;
                }
                if let Some(proj) = block.projection() {
                    add_conv(&mut params, &mut bn_state, &mut rng, &format!("{prefix}.proj"), &proj)?;
                }
            }
        }

        let d = arch.head_in_ch();
        let k = arch.class_count;
        let std = (2.0 / d as f64).sqrt();
        let normal = Normal::new(0.0, std).map_err(|e| Error::Numeric(e.to_string()))?;
        let w: Vec<f64> = (0..d * k).map(|_| normal.sample(&mut rng)).collect();
        params.insert("fc.weight".to_string(), Tensor::new(vec![d, k], w)?);
        params.insert("fc.bias".to_string(), Tensor::zeros(vec![k])?);

        let _ = rng.gen::<u64>();
        Ok(Network {
            arch,
            params,
            bn_state,
        })
    }

    /// Every parameter name with its shape, plus the batch-norm layer names,
    /// exactly as [`Network::build`] lays them out — no initialization.
    pub fn parameter_plan(arch: &ArchSpec) -> (BTreeMap<String, Vec<usize>>, Vec<String>) {
        let mut shapes = BTreeMap::new();
        let mut bn_layers = Vec::new();
        let mut add_conv = |name: &str, plan: &ConvPlan| {
            shapes.insert(
                format!("{name}.weight"),
                vec![plan.out_ch, plan.in_ch, plan.spec.kernel_h, plan.spec.kernel_w],
            );
            if arch.batch_norm {
                let bn = bn_name(name);
                shapes.insert(format!("{bn}.gamma"), vec![plan.out_ch]);
                shapes.insert(format!("{bn}.beta"), vec![plan.out_ch]);
                bn_layers.push(bn);
            } else {
                shapes.insert(format!("{name}.bias"), vec![plan.out_ch]);
            }
        };
        add_conv("stem.conv", &arch.stem_plan());
        for (si, stage) in arch.stages.iter().enumerate() {
            for (ui, block) in stage.iter().enumerate() {
                let prefix = format!("s{}.u{}", si + 1, ui + 1);
                for (ci, plan) in block.convs().iter().enumerate() {
                    add_conv(&format!("{prefix}.conv{}", ci + 1), plan);
                }
                if let Some(proj) = block.projection() {
                    add_conv(&format!("{prefix}.proj"), &proj);
                }
            }
        }
        shapes.insert(
            "fc.weight".to_string(),
            vec![arch.head_in_ch(), arch.class_count],
        );
        shapes.insert("fc.bias".to_string(), vec![arch.class_count]);
        (shapes, bn_layers)
    }

    /// The same weights under the other geometry (dilated ⇄ normal).
    pub fn with_dilation(&self, dilated: bool) -> Result<Network> {
        let variant = self.arch.variant.ok_or_else(|| {
            Error::InvalidArg("with_dilation requires a standard variant".into())
        })?;
        let mids = [
            self.arch.stages[0][0].mid_ch,
            self.arch.stages[1][0].mid_ch,
            self.arch.stages[2][0].mid_ch,
            self.arch.stages[3][0].mid_ch,
        ];
        let arch = ArchSpec::resnet_with_widths(
            variant,
            dilated,
            self.arch.class_count,
            self.arch.batch_norm,
            self.arch.stem.channels,
            mids,
        )?;
        Ok(Network {
            arch,
            params: self.params.clone(),
            bn_state: self.bn_state.clone(),
        })
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<f64>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::InvalidArg(format!("no parameter {name:?}")))
    }

    /// Trainable parameter element count (running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    fn check_input(&self, x: &Tensor<f64>) -> Result<()> {
        if x.rank() != 4 {
            return Err(Error::Shape(format!(
                "input must be rank 4, got {:?}",
                x.shape()
            )));
        }
        if x.extent(1) != self.arch.stem.in_ch {
            return Err(Error::Shape(format!(
                "input must have {} channels, got {}",
                self.arch.stem.in_ch,
                x.extent(1)
            )));
        }
        if self.arch.stem.max_pool && (x.extent(2) < 32 || x.extent(3) < 32) {
            return Err(Error::Shape(format!(
                "input must be at least 32x32, got {}x{}",
                x.extent(2),
                x.extent(3)
            )));
        }
        Ok(())
    }

    /// Pure inference pass. `capture` records the stem output and every
    /// residual-unit output, with the final one aliased as "last_conv".
    pub fn forward(&self, x: &Tensor<f64>, capture: bool, mode: Mode) -> Result<ForwardTrace> {
        match mode {
            Mode::Infer => self.forward_infer(x, capture),
            Mode::Train => {
                let mut tape = Tape::new();
                let xid = tape.leaf(x.clone());
                let tf = self.forward_taped(&mut tape, xid, Mode::Train, capture)?;
                let mut activations = BTreeMap::new();
                for (name, id) in &tf.named {
                    activations.insert(name.clone(), tape.value(*id).clone());
                }
                Ok(ForwardTrace {
                    logits: tape.value(tf.logits).clone(),
                    activations,
                })
            }
        }
    }

    fn forward_infer(&self, x: &Tensor<f64>, capture: bool) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let mut activations = BTreeMap::new();

        let mut cur = self.conv_bn_infer(x, "stem.conv", &self.arch.stem_plan())?.relu();
        if self.arch.stem.max_pool {
            cur = cur.max_pool2d((3, 3), (2, 2))?;
        }
        if capture {
            activations.insert("stem".to_string(), cur.clone());
        }

        let mut last_name = String::new();
        for (si, stage) in self.arch.stages.iter().enumerate() {
            for (ui, block) in stage.iter().enumerate() {
                let prefix = format!("s{}.u{}", si + 1, ui + 1);
                let mut main = cur.clone();
                let convs = block.convs();
                for (ci, plan) in convs.iter().enumerate() {
                    main = self.conv_bn_infer(&main, &format!("{prefix}.conv{}", ci + 1), plan)?;
                    if ci + 1 < convs.len() {
                        main = main.relu();
                    }
                }
                let shortcut = match block.projection() {
                    Some(proj) => self.conv_bn_infer(&cur, &format!("{prefix}.proj"), &proj)?,
                    None => cur,
                };
                cur = main.add(&shortcut)?.relu();
                if capture {
                    activations.insert(prefix.clone(), cur.clone());
                }
                last_name = prefix;
            }
        }
        if capture && !last_name.is_empty() {
            let last = activations[&last_name].clone();
            activations.insert("last_conv".to_string(), last);
        }

        let pooled = cur.global_avg_pool2d()?.squeeze_spatial()?;
        let logits = pooled.affine(self.param("fc.weight")?, self.param("fc.bias")?)?;
        Ok(ForwardTrace {
            logits,
            activations,
        })
    }

    fn conv_bn_infer(&self, x: &Tensor<f64>, name: &str, plan: &ConvPlan) -> Result<Tensor<f64>> {
        if self.arch.batch_norm {
            let y = conv2d(x, self.param(&format!("{name}.weight"))?, None, &plan.spec)?;
            let bn = bn_name(name);
            let state = self
                .bn_state
                .get(&bn)
                .ok_or_else(|| Error::InvalidArg(format!("no batch-norm state {bn:?}")))?;
            batch_norm_infer(
                &y,
                self.param(&format!("{bn}.gamma"))?,
                self.param(&format!("{bn}.beta"))?,
                state,
                BN_EPS,
            )
        } else {
            conv2d(
                x,
                self.param(&format!("{name}.weight"))?,
                Some(self.param(&format!("{name}.bias"))?),
                &plan.spec,
            )
        }
    }

    /// Records a full forward pass on `tape`. In train mode batch-norm sites
    /// normalize by (and differentiate through) batch statistics, returned
    /// in `batch_stats`; in infer mode running statistics are frozen
    /// constants.
    pub fn forward_taped(
        &self,
        tape: &mut Tape,
        x: ValueId,
        mode: Mode,
        capture: bool,
    ) -> Result<TapedForward> {
        self.check_input(tape.value(x))?;
        let mut param_ids = BTreeMap::new();
        for (name, value) in &self.params {
            param_ids.insert(name.clone(), tape.param(name, value.clone())?);
        }
        let mut batch_stats = Vec::new();
        let mut named = BTreeMap::new();

        let mut cur = self.conv_bn_taped(
            tape,
            x,
            "stem.conv",
            &self.arch.stem_plan(),
            mode,
            &param_ids,
            &mut batch_stats,
        )?;
        cur = tape.relu(cur);
        if self.arch.stem.max_pool {
            cur = tape.max_pool2d(cur, (3, 3), (2, 2))?;
        }
        if capture {
            named.insert("stem".to_string(), cur);
        }

        let mut last_id = cur;
        for (si, stage) in self.arch.stages.iter().enumerate() {
            for (ui, block) in stage.iter().enumerate() {
                let prefix = format!("s{}.u{}", si + 1, ui + 1);
                let mut main = cur;
                let convs = block.convs();
                for (ci, plan) in convs.iter().enumerate() {
                    main = self.conv_bn_taped(
                        tape,
                        main,
                        &format!("{prefix}.conv{}", ci + 1),
                        plan,
                        mode,
                        &param_ids,
                        &mut batch_stats,
                    )?;
                    if ci + 1 < convs.len() {
                        main = tape.relu(main);
                    }
                }
                let shortcut = match block.projection() {
                    Some(proj) => self.conv_bn_taped(
                        tape,
                        cur,
                        &format!("{prefix}.proj"),
                        &proj,
                        mode,
                        &param_ids,
                        &mut batch_stats,
                    )?,
                    None => cur,
                };
                let summed = tape.add(main, shortcut)?;
                cur = tape.relu(summed);
                if capture {
                    named.insert(prefix.clone(), cur);
                }
                last_id = cur;
            }
        }
        if capture {
            named.insert("last_conv".to_string(), last_id);
        }

        let pooled = tape.global_avg_pool2d(cur)?;
        let squeezed = tape.squeeze_spatial(pooled)?;
        let logits = tape.affine(squeezed, param_ids["fc.weight"], param_ids["fc.bias"])?;
        Ok(TapedForward {
            logits,
            named,
            params: param_ids,
            batch_stats,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_bn_taped(
        &self,
        tape: &mut Tape,
        x: ValueId,
        name: &str,
        plan: &ConvPlan,
        mode: Mode,
        param_ids: &BTreeMap<String, ValueId>,
        batch_stats: &mut Vec<(String, Vec<f64>, Vec<f64>)>,
    ) -> Result<ValueId> {
        if self.arch.batch_norm {
            let y = tape.conv2d(x, param_ids[&format!("{name}.weight")], None, plan.spec)?;
            let bn = bn_name(name);
            let (mean, var, train_stats) = match mode {
                Mode::Train => {
                    let (m, v) = channel_stats(tape.value(y))?;
                    batch_stats.push((bn.clone(), m.clone(), v.clone()));
                    (m, v, true)
                }
                Mode::Infer => {
                    let state = self
                        .bn_state
                        .get(&bn)
                        .ok_or_else(|| Error::InvalidArg(format!("no batch-norm state {bn:?}")))?;
                    (state.running_mean.clone(), state.running_var.clone(), false)
                }
            };
            tape.batch_norm(
                y,
                param_ids[&format!("{bn}.gamma")],
                param_ids[&format!("{bn}.beta")],
                mean,
                var,
                BN_EPS,
                train_stats,
            )
        } else {
            tape.conv2d(
                x,
                param_ids[&format!("{name}.weight")],
                Some(param_ids[&format!("{name}.bias")]),
                plan.spec,
            )
        }
    }

    /// Folds train-mode batch statistics into the running statistics.
    pub fn update_bn_state(&mut self, batch_stats: &[(String, Vec<f64>, Vec<f64>)]) -> Result<()> {
        for (name, mean, var) in batch_stats {
            let state = self
                .bn_state
                .get_mut(name)
                .ok_or_else(|| Error::InvalidArg(format!("no batch-norm state {name:?}")))?;
            for c in 0..state.running_mean.len() {
                state.running_mean[c] =
                    (1.0 - BN_MOMENTUM) * state.running_mean[c] + BN_MOMENTUM * mean[c];
                state.running_var[c] =
                    (1.0 - BN_MOMENTUM) * state.running_var[c] + BN_MOMENTUM * var[c];
            }
        }
        Ok(())
    }

    pub fn audit(&self, input_hw: (usize, usize)) -> Result<AuditReport> {
        audit(self, input_hw)
    }
}

fn bn_name(conv_name: &str) -> String {
    match conv_name.strip_suffix(".conv") {
        // "stem.conv" -> "stem.bn"
        Some(base) => format!("{base}.bn"),
        None => match conv_name.rfind(".conv") {
            // "s1.u1.conv2" -> "s1.u1.bn2"
            Some(at) => format!("{}.bn{}", &conv_name[..at], &conv_name[at + 5..]),
            // "s2.u1.proj" -> "s2.u1.projbn"
            None => format!("{conv_name}bn"),
        },
    }
}

/// One row of the audit table.
#[derive(Clone, Debug)]
pub struct LayerRow {
    pub name: String,
    pub kind: &'static str,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub dilation: usize,
    pub params: usize,
    pub output: (usize, usize),
    pub effective_kernel: (usize, usize),
    pub receptive_field: (usize, usize),
    /// False for projection shortcuts, which sit beside the main path and
    /// are excluded from the conv-layer count.
    pub main_path: bool,
}

#[derive(Clone, Debug)]
pub struct AuditReport {
    pub rows: Vec<LayerRow>,
    /// Main-path convolution layers (projections excluded).
    pub conv_count: usize,
    pub fc_count: usize,
    /// Trainable parameters, all layers included.
    pub total_params: usize,
    pub final_receptive_field: (usize, usize),
    /// Output extent of the last convolution.
    pub final_feature: (usize, usize),
    pub stage4_output: (usize, usize),
}

/// Per-layer inventory: kinds, shapes, parameter counts, and the geometry
/// chain from `receptive_field_of_network` over the main path.
pub fn audit(net: &Network, input_hw: (usize, usize)) -> Result<AuditReport> {
    let arch = &net.arch;
    let mut chain: Vec<ConvSpec> = Vec::new();
    let stem_plan = arch.stem_plan();
    chain.push(stem_plan.spec);
    if arch.stem.max_pool {
        chain.push(ConvSpec::square(3, 2, 0, 1)?);
    }
    for stage in &arch.stages {
        for block in stage {
            for plan in block.convs() {
                chain.push(plan.spec);
            }
        }
    }
    let geoms = receptive_field_of_network(input_hw, &chain)?;

    let conv_params = |p: &ConvPlan| {
        let w = p.out_ch * p.in_ch * p.spec.kernel_h * p.spec.kernel_w;
        // Batch-norm gamma+beta when present, otherwise the conv bias.
        w + if arch.batch_norm { 2 * p.out_ch } else { p.out_ch }
    };
    let row_from = |name: String,
                    kind: &'static str,
                    p: &ConvPlan,
                    g: &LayerGeometry,
                    params: usize,
                    main_path: bool| LayerRow {
        name,
        kind,
        in_ch: p.in_ch,
        out_ch: p.out_ch,
        kernel: (p.spec.kernel_h, p.spec.kernel_w),
        stride: (p.spec.stride_h, p.spec.stride_w),
        dilation: p.spec.dilation,
        params,
        output: (g.output_h, g.output_w),
        effective_kernel: g.effective_kernel,
        receptive_field: g.receptive_field,
        main_path,
    };

    let mut rows = Vec::new();
    let mut gi = 0usize;
    rows.push(row_from(
        "stem.conv".into(),
        "conv",
        &stem_plan,
        &geoms[gi],
        conv_params(&stem_plan),
        true,
    ));
    gi += 1;
    if arch.stem.max_pool {
        let pool_plan = ConvPlan {
            in_ch: arch.stem.channels,
            out_ch: arch.stem.channels,
            spec: ConvSpec::square(3, 2, 0, 1)?,
        };
        rows.push(row_from(
            "stem.pool".into(),
            "maxpool",
            &pool_plan,
            &geoms[gi],
            0,
            true,
        ));
        gi += 1;
    }

    let mut conv_count = 1usize;
    let mut stage4_output = (0, 0);
    for (si, stage) in arch.stages.iter().enumerate() {
        for (ui, block) in stage.iter().enumerate() {
            let prefix = format!("s{}.u{}", si + 1, ui + 1);
            // Geometry state entering this unit, for the projection row.
            let entry_geom = geoms[gi - 1];
            for (ci, plan) in block.convs().iter().enumerate() {
                rows.push(row_from(
                    format!("{prefix}.conv{}", ci + 1),
                    "conv",
                    plan,
                    &geoms[gi],
                    conv_params(plan),
                    true,
                ));
                conv_count += 1;
                gi += 1;
            }
            if let Some(proj) = block.projection() {
                let unit_out = geoms[gi - 1];
                let pg = LayerGeometry {
                    output_h: unit_out.output_h,
                    output_w: unit_out.output_w,
                    effective_kernel: (1, 1),
                    receptive_field: entry_geom.receptive_field,
                    jump: unit_out.jump,
                };
                rows.push(row_from(
                    format!("{prefix}.proj"),
                    "conv",
                    &proj,
                    &pg,
                    conv_params(&proj),
                    false,
                ));
            }
        }
        if si == 3 {
            stage4_output = (geoms[gi - 1].output_h, geoms[gi - 1].output_w);
        }
    }

    let last_geom = geoms[geoms.len() - 1];
    let d = arch.head_in_ch();
    rows.push(LayerRow {
        name: "gap".into(),
        kind: "gap",
        in_ch: d,
        out_ch: d,
        kernel: (last_geom.output_h, last_geom.output_w),
        stride: (1, 1),
        dilation: 1,
        params: 0,
        output: (1, 1),
        effective_kernel: (last_geom.output_h, last_geom.output_w),
        receptive_field: input_hw,
        main_path: true,
    });
    rows.push(LayerRow {
        name: "fc".into(),
        kind: "fc",
        in_ch: d,
        out_ch: arch.class_count,
        kernel: (1, 1),
        stride: (1, 1),
        dilation: 1,
        params: d * arch.class_count + arch.class_count,
        output: (1, 1),
        effective_kernel: (1, 1),
        receptive_field: input_hw,
        main_path: true,
    });

    let total_params = net.param_count();
    Ok(AuditReport {
        rows,
        conv_count,
        fc_count: 1,
        total_params,
        final_receptive_field: last_geom.receptive_field,
        final_feature: (last_geom.output_h, last_geom.output_w),
        stage4_output,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mini_input(seed: u64, n: usize, hw: usize) -> Tensor<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let vals: Vec<f64> = (0..n * 3 * hw * hw).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::new(vec![n, 3, hw, hw], vals).unwrap()
    }

    #[test]
    fn resnet18_is_17_convs_and_one_fc() {
        let net = build(Variant::R18, false, 8, 0).unwrap();
        let report = net.audit((224, 224)).unwrap();
        assert_eq!(report.conv_count, 17);
        assert_eq!(report.fc_count, 1);
    }

    #[test]
    fn dilation_adds_no_parameters() {
        for variant in [Variant::R18, Variant::R34, Variant::R50, Variant::R101, Variant::R152] {
            let a = ArchSpec::resnet(variant, false, 8, 0.0625, true).unwrap();
            let b = ArchSpec::resnet(variant, true, 8, 0.0625, true).unwrap();
            let na = Network::build(a, 1).unwrap();
            let nb = Network::build(b, 1).unwrap();
            assert_eq!(na.param_count(), nb.param_count(), "{variant:?}");
        }
    }

    #[test]
    fn dilated_stage4_reports_l3_stride1() {
        let arch = ArchSpec::resnet(Variant::R18, true, 8, 1.0, true).unwrap();
        let first = &arch.stages[3][0];
        assert_eq!(first.first_unit_stride, 1);
        assert_eq!(first.dilation_per_conv, vec![3, 3]);
        let convs = first.convs();
        assert_eq!(convs[0].spec.dilation, 3);
        assert_eq!(convs[0].spec.stride_h, 1);
        assert_eq!(convs[0].spec.pad_h, 3);
        // Remaining stage-4 units stay at l=1.
        assert_eq!(arch.stages[3][1].dilation_per_conv, vec![1, 1]);
        // Bottleneck: all three convs of the first unit carry the entry,
        // with the 1×1s geometrically inert.
        let b = ArchSpec::resnet(Variant::R50, true, 8, 1.0, true).unwrap();
        let first = &b.stages[3][0];
        assert_eq!(first.dilation_per_conv, vec![3, 3, 3]);
        let convs = first.convs();
        assert_eq!(convs[0].spec.effective_kernel(), (1, 1));
        assert_eq!(convs[1].spec.effective_kernel(), (7, 7));
    }

    #[test]
    fn audit_geometry_at_224_and_64() {
        let normal = build(Variant::R18, false, 8, 0).unwrap();
        let dilated = normal.with_dilation(true).unwrap();
        let rn = normal.audit((224, 224)).unwrap();
        let rd = dilated.audit((224, 224)).unwrap();
        assert_eq!(rn.stage4_output, (7, 7));
        assert_eq!(rd.stage4_output, (14, 14));
        let rn = normal.audit((64, 64)).unwrap();
        let rd = dilated.audit((64, 64)).unwrap();
        assert_eq!(rn.stage4_output, (2, 2));
        assert_eq!(rd.stage4_output, (4, 4));
    }

    #[test]
    fn dilated_receptive_field_not_smaller() {
        let normal = build(Variant::R18, false, 8, 0).unwrap();
        let dilated = normal.with_dilation(true).unwrap();
        let rn = normal.audit((224, 224)).unwrap();
        let rd = dilated.audit((224, 224)).unwrap();
        assert!(rd.final_receptive_field.0 >= rn.final_receptive_field.0);
        assert!(rd.final_receptive_field.1 >= rn.final_receptive_field.1);
    }

    #[test]
    fn forward_shapes_and_capture() {
        let arch = ArchSpec::resnet(Variant::R18, false, 8, 0.0625, true).unwrap();
        let net = Network::build(arch, 3).unwrap();
        let x = mini_input(9, 2, 64);
        let trace = net.forward(&x, true, Mode::Infer).unwrap();
        assert_eq!(trace.logits.shape(), &[2, 8]);
        assert!(trace.activations.contains_key("last_conv"));
        assert_eq!(
            trace.activations["last_conv"].shape(),
            trace.activations["s4.u2"].shape()
        );
        assert_eq!(trace.activations["last_conv"].shape()[2], 2);

        let dilated = net.with_dilation(true).unwrap();
        let trace = dilated.forward(&x, true, Mode::Infer).unwrap();
        assert_eq!(trace.activations["last_conv"].shape()[2], 4);
    }

    #[test]
    fn identical_rows_give_identical_logits() {
        let arch = ArchSpec::resnet(Variant::R18, false, 8, 0.0625, true).unwrap();
        let net = Network::build(arch, 3).unwrap();
        let one = mini_input(11, 1, 64);
        let mut two_vals = one.data().to_vec();
        two_vals.extend_from_slice(one.data());
        let two = Tensor::new(vec![2, 3, 64, 64], two_vals).unwrap();
        let trace = net.forward(&two, false, Mode::Infer).unwrap();
        let row0 = &trace.logits.data()[..8];
        let row1 = &trace.logits.data()[8..];
        assert_eq!(row0, row1);
    }

    #[test]
    fn undilating_reproduces_normal_logits_bitwise() {
        let normal = {
            let arch = ArchSpec::resnet(Variant::R18, false, 8, 0.0625, true).unwrap();
            Network::build(arch, 7).unwrap()
        };
        let dilated = {
            let arch = ArchSpec::resnet(Variant::R18, true, 8, 0.0625, true).unwrap();
            Network::build(arch, 7).unwrap()
        };
        let undilated = dilated.with_dilation(false).unwrap();
        let x = mini_input(13, 1, 64);
        let a = normal.forward(&x, false, Mode::Infer).unwrap();
        let b = undilated.forward(&x, false, Mode::Infer).unwrap();
        assert_eq!(a.logits.data(), b.logits.data());
    }

    #[test]
    fn infer_forward_is_pure() {
        let arch = ArchSpec::miniature(4, &[4, 6], 8, false).unwrap();
        let net = Network::build(arch, 5).unwrap();
        let x = mini_input(17, 2, 8);
        let a = net.forward(&x, false, Mode::Infer).unwrap();
        let b = net.forward(&x, false, Mode::Infer).unwrap();
        assert_eq!(a.logits.data(), b.logits.data());
    }

    #[test]
    fn unknown_variant_rejected() {
        assert!(Variant::from_depth(99).is_err());
    }

    #[test]
    fn wrong_channel_count_rejected() {
        let arch = ArchSpec::miniature(4, &[4], 8, false).unwrap();
        let net = Network::build(arch, 5).unwrap();
        let x = Tensor::<f64>::zeros(vec![1, 1, 8, 8]).unwrap();
        assert!(net.forward(&x, false, Mode::Infer).is_err());
    }

    #[test]
    fn builds_are_seed_deterministic() {
        let a = build(Variant::R18, false, 8, 42).unwrap();
        let b = build(Variant::R18, false, 8, 42).unwrap();
        assert_eq!(a.params, b.params);
        let c = build(Variant::R18, false, 8, 43).unwrap();
        assert_ne!(
            a.params["stem.conv.weight"].data(),
            c.params["stem.conv.weight"].data()
        );
    }

    #[test]
    fn taped_train_forward_matches_train_stats() {
        let arch = ArchSpec::miniature(3, &[4], 4, false).unwrap();
        let mut net = Network::build(arch, 5).unwrap();
        let x = mini_input(19, 4, 8);
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let tf = net.forward_taped(&mut tape, xid, Mode::Train, false).unwrap();
        assert_eq!(tape.value(tf.logits).shape(), &[4, 4]);
        assert!(!tf.batch_stats.is_empty());
        net.update_bn_state(&tf.batch_stats).unwrap();
        // Running stats moved off their init values.
        let s = &net.bn_state["stem.bn"];
        assert!(s.running_mean.iter().any(|&m| m != 0.0));
    }

    #[test]
    fn bn_name_scheme() {
        assert_eq!(bn_name("stem.conv"), "stem.bn");
        assert_eq!(bn_name("s1.u2.conv1"), "s1.u2.bn1");
        assert_eq!(bn_name("s4.u1.proj"), "s4.u1.projbn");
    }
}
