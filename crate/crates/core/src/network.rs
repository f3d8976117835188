//! Network assembly: configuration, deterministic parameter store, the
//! encoder/decoder forward pass, and checkpoint serialization.
//!
//! One parameter list drives everything. `param_specs` is the single source
//! of truth for names, shapes, and initializers; building, binding to a
//! tape, counting, and checkpointing all walk the same list, so they cannot
//! drift apart.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layers::{
    create_multi_view, multi_view_fusion, prediction_head, ssh_residual_block, BlockShape,
    BlockVars, HeadVars, ShiftPlacement, ShiftSpec, SkipVars, ViewBatch,
};
use crate::ops::conv::ConvSpec;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Architectural variant. The three planar variants share one parameter
/// layout; `Full3d` widens every kernel to 3x3x3.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Planar kernels, no shift, single view.
    Plain2d,
    /// Planar kernels with slice shifting along x.
    Shift2d,
    /// Planar kernels with shifting, run over three axis-permuted views
    /// that share weights and are fused before the head.
    Shift2dMultiView,
    /// Isotropic 3x3x3 kernels, no shift, single view.
    Full3d,
}

impl Variant {
    pub fn all() -> [Variant; 4] {
        [
            Variant::Plain2d,
            Variant::Shift2d,
            Variant::Shift2dMultiView,
            Variant::Full3d,
        ]
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Plain2d => "plain2d",
            Variant::Shift2d => "shift2d",
            Variant::Shift2dMultiView => "shift2d_multiview",
            Variant::Full3d => "full3d",
        }
    }

    pub fn uses_shift(&self) -> bool {
        matches!(self, Variant::Shift2d | Variant::Shift2dMultiView)
    }

    pub fn multi_view(&self) -> bool {
        matches!(self, Variant::Shift2dMultiView)
    }

    /// Kernel of every residual-block convolution.
    pub fn kernel(&self) -> (usize, usize, usize) {
        match self {
            Variant::Full3d => (3, 3, 3),
            _ => (1, 3, 3),
        }
    }

    /// Stride of each downsampling stage (and the matching upsampling
    /// kernel). Planar variants keep the slice axis at full resolution.
    pub fn down_stride(&self) -> (usize, usize, usize) {
        match self {
            Variant::Full3d => (2, 2, 2),
            _ => (1, 2, 2),
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain2d" => Ok(Variant::Plain2d),
            "shift2d" => Ok(Variant::Shift2d),
            "shift2d_multiview" => Ok(Variant::Shift2dMultiView),
            "full3d" => Ok(Variant::Full3d),
            other => Err(Error::Config(format!(
                "unknown variant `{}` (plain2d, shift2d, shift2d_multiview, full3d)",
                other
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct UNetConfig {
    pub variant: Variant,
    pub in_channels: usize,
    pub num_classes: usize,
    /// Channel width per resolution stage, top first. Length is the stage
    /// count; every stage after the first downsamples by `down_stride`.
    pub stage_widths: Vec<usize>,
    pub shift_fraction: ShiftSpec,
    pub shift_placement: ShiftPlacement,
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.stage_widths.len() < 2 {
            problems.push(format!(
                "stage_widths needs at least two entries (top stage plus one downsampled), got {}",
                self.stage_widths.len()
            ));
        }
        for (i, &w) in self.stage_widths.iter().enumerate() {
            if w == 0 {
                problems.push(format!("stage_widths[{}] is zero", i));
            }
        }
        if self.in_channels == 0 {
            problems.push("in_channels must be at least 1".to_string());
        }
        if self.num_classes < 2 {
            problems.push(format!(
                "num_classes must be at least 2 (background plus one class), got {}",
                self.num_classes
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn describe(&self) -> String {
        format!(
            "{}: stages {:?}, in {}, classes {}, shift {} {}, kernel {:?}, down {:?}",
            self.variant.as_str(),
            self.stage_widths,
            self.in_channels,
            self.num_classes,
            self.shift_fraction,
            self.shift_placement.as_str(),
            self.variant.kernel(),
            self.variant.down_stride(),
        )
    }

    /// Stable identity of this configuration, stored in checkpoints.
    pub fn digest(&self) -> [u8; 32] {
        let widths: Vec<String> = self.stage_widths.iter().map(|w| w.to_string()).collect();
        let canonical = format!(
            "variant={}\nin_channels={}\nnum_classes={}\nstage_widths={}\nshift_fraction={}\nshift_placement={}\n",
            self.variant.as_str(),
            self.in_channels,
            self.num_classes,
            widths.join(","),
            self.shift_fraction,
            self.shift_placement.as_str(),
        );
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        hasher.finalize().into()
    }
}

/// How a parameter tensor starts life.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform on +-sqrt(6 / fan_in).
    KaimingConv { fan_in: usize },
    Ones,
    Zeros,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn conv_spec_entry(name: String, cout: usize, cin: usize, k: (usize, usize, usize)) -> ParamSpec {
    ParamSpec {
        name,
        shape: vec![cout, cin, k.0, k.1, k.2],
        init: Init::KaimingConv { fan_in: cin * k.0 * k.1 * k.2 },
    }
}

fn affine_entries(prefix: &str, channels: usize) -> [ParamSpec; 2] {
    [
        ParamSpec {
            name: format!("{}.gamma", prefix),
            shape: vec![channels],
            init: Init::Ones,
        },
        ParamSpec {
            name: format!("{}.beta", prefix),
            shape: vec![channels],
            init: Init::Zeros,
        },
    ]
}

fn block_entries(
    specs: &mut Vec<ParamSpec>,
    prefix: &str,
    shape: &BlockShape,
) {
    specs.push(conv_spec_entry(
        format!("{}.conv1.weight", prefix),
        shape.out_channels,
        shape.in_channels,
        shape.kernel,
    ));
    specs.extend(affine_entries(&format!("{}.norm1", prefix), shape.out_channels));
    specs.push(conv_spec_entry(
        format!("{}.conv2.weight", prefix),
        shape.out_channels,
        shape.out_channels,
        shape.kernel,
    ));
    specs.extend(affine_entries(&format!("{}.norm2", prefix), shape.out_channels));
    if shape.needs_projection() {
        specs.push(conv_spec_entry(
            format!("{}.skip.weight", prefix),
            shape.out_channels,
            shape.in_channels,
            (1, 1, 1),
        ));
        specs.extend(affine_entries(&format!("{}.skip_norm", prefix), shape.out_channels));
    }
}

/// Geometry of encoder block `i`.
pub(crate) fn enc_block_shape(cfg: &UNetConfig, i: usize) -> BlockShape {
    BlockShape {
        in_channels: if i == 0 { cfg.in_channels } else { cfg.stage_widths[i - 1] },
        out_channels: cfg.stage_widths[i],
        kernel: cfg.variant.kernel(),
        stride: if i == 0 { (1, 1, 1) } else { cfg.variant.down_stride() },
    }
}

/// Geometry of decoder block `i` (consumes upsampled features concatenated
/// with the encoder skip, hence doubled input channels).
pub(crate) fn dec_block_shape(cfg: &UNetConfig, i: usize) -> BlockShape {
    BlockShape {
        in_channels: 2 * cfg.stage_widths[i],
        out_channels: cfg.stage_widths[i],
        kernel: cfg.variant.kernel(),
        stride: (1, 1, 1),
    }
}

/// Complete ordered parameter list for a configuration. Everything that
/// builds, binds, counts, or serializes parameters walks this list.
pub fn param_specs(cfg: &UNetConfig) -> Vec<ParamSpec> {
    let n = cfg.stage_widths.len();
    let w = &cfg.stage_widths;
    let down = cfg.variant.down_stride();
    let mut specs = Vec::new();

    for i in 0..n {
        block_entries(&mut specs, &format!("enc{}", i), &enc_block_shape(cfg, i));
    }
    for i in (0..n - 1).rev() {
        // Transposed conv weights are [C_in, C_out, k]; kernel == stride.
        specs.push(ParamSpec {
            name: format!("dec{}.up.weight", i),
            shape: vec![w[i + 1], w[i], down.0, down.1, down.2],
            init: Init::KaimingConv { fan_in: w[i + 1] * down.0 * down.1 * down.2 },
        });
        block_entries(&mut specs, &format!("dec{}.block", i), &dec_block_shape(cfg, i));
    }
    specs.push(conv_spec_entry("head.conv1.weight".to_string(), w[0], w[0], (1, 1, 1)));
    specs.push(ParamSpec {
        name: "head.conv1.bias".to_string(),
        shape: vec![w[0]],
        init: Init::Zeros,
    });
    specs.push(conv_spec_entry(
        "head.conv2.weight".to_string(),
        cfg.num_classes,
        w[0],
        (1, 1, 1),
    ));
    specs.push(ParamSpec {
        name: "head.conv2.bias".to_string(),
        shape: vec![cfg.num_classes],
        init: Init::Zeros,
    });
    specs
}

/// Named parameter tensors in spec order, with O(1) lookup by name.
#[derive(Debug, Clone)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Self {
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, (name, _))| (name.clone(), i))
            .collect();
        ParamStore { entries, index }
    }

    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = specs
            .iter()
            .map(|spec| {
                let t = match spec.init {
                    Init::KaimingConv { fan_in } => {
                        Tensor::kaiming_uniform(&spec.shape, fan_in, &mut rng)
                    }
                    Init::Ones => Tensor::filled(&spec.shape, 1.0),
                    Init::Zeros => Tensor::zeros(&spec.shape),
                };
                (spec.name.clone(), t)
            })
            .collect();
        ParamStore::from_entries(entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n, t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (&*n, t))
    }
}

/// Tape variables for every parameter, looked up by name during forward.
pub struct Bindings {
    map: HashMap<String, Var>,
}

impl Bindings {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::argument(format!("no bound parameter named `{}`", name)))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }
}

/// Checks an input volume shape against a configuration: rank, channel
/// count, multi-view isotropy, and per-axis divisibility by the total
/// downsampling factor. Lists every violation at once.
pub(crate) fn validate_input_shape(cfg: &UNetConfig, shape: &[usize]) -> Result<()> {
    let mut problems = Vec::new();
    if shape.len() != 5 {
        return Err(Error::shape(format!("input must be [B, C, X, Y, Z], got {:?}", shape)));
    }
    if shape[0] == 0 {
        problems.push("batch is zero".to_string());
    }
    if shape[1] != cfg.in_channels {
        problems.push(format!(
            "input has {} channels, config expects {}",
            shape[1], cfg.in_channels
        ));
    }
    if cfg.variant.multi_view() && !(shape[2] == shape[3] && shape[3] == shape[4]) {
        problems.push(format!(
            "multi-view variant needs an isotropic volume, got {}x{}x{}",
            shape[2], shape[3], shape[4]
        ));
    }
    let downs = cfg.stage_widths.len() - 1;
    let stride = cfg.variant.down_stride();
    let required = |s: usize| if s == 2 { 1usize << downs } else { 1 };
    for (axis, extent, need) in [
        ("x", shape[2], required(stride.0)),
        ("y", shape[3], required(stride.1)),
        ("z", shape[4], required(stride.2)),
    ] {
        if extent == 0 {
            problems.push(format!("{} extent is zero", axis));
        } else if extent % need != 0 {
            problems.push(format!(
                "{} extent {} must be divisible by {} for {} downsampling stages",
                axis, extent, need, downs
            ));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::shape(problems.join("; ")))
    }
}

#[derive(Debug)]
pub struct SshUnet {
    pub cfg: UNetConfig,
    pub params: ParamStore,
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"SSHU";
const CHECKPOINT_VERSION: u32 = 1;

impl SshUnet {
    /// Builds a freshly initialized network. The same seed always yields
    /// bitwise identical parameters.
    pub fn build(cfg: UNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let specs = param_specs(&cfg);
        Ok(SshUnet { cfg, params: ParamStore::init(&specs, seed) })
    }

    /// Binds every parameter onto a tape; `trainable` decides whether the
    /// backward pass will produce gradients for them.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Bindings> {
        let mut map = HashMap::with_capacity(self.params.len());
        for (name, t) in self.params.iter() {
            let v = tape.leaf_data(t.shape(), t.data().to_vec(), trainable)?;
            map.insert(name.clone(), v);
        }
        Ok(Bindings { map })
    }

    fn block_vars(&self, b: &Bindings, prefix: &str, shape: &BlockShape) -> Result<BlockVars> {
        Ok(BlockVars {
            conv1_w: b.var(&format!("{}.conv1.weight", prefix))?,
            norm1_gamma: b.var(&format!("{}.norm1.gamma", prefix))?,
            norm1_beta: b.var(&format!("{}.norm1.beta", prefix))?,
            conv2_w: b.var(&format!("{}.conv2.weight", prefix))?,
            norm2_gamma: b.var(&format!("{}.norm2.gamma", prefix))?,
            norm2_beta: b.var(&format!("{}.norm2.beta", prefix))?,
            skip: if shape.needs_projection() {
                Some(SkipVars {
                    w: b.var(&format!("{}.skip.weight", prefix))?,
                    gamma: b.var(&format!("{}.skip_norm.gamma", prefix))?,
                    beta: b.var(&format!("{}.skip_norm.beta", prefix))?,
                })
            } else {
                None
            },
        })
    }

    /// Runs the network, producing `[B, num_classes, X, Y, Z]` logits.
    pub fn forward(&self, tape: &mut Tape, x: Var, b: &Bindings) -> Result<Var> {
        validate_input_shape(&self.cfg, tape.shape(x))?;
        let cfg = &self.cfg;
        let n = cfg.stage_widths.len();
        let down = cfg.variant.down_stride();
        let shift_opt = if cfg.variant.uses_shift() && !cfg.shift_fraction.is_zero() {
            Some((&cfg.shift_fraction, cfg.shift_placement))
        } else {
            None
        };

        let (mut h, view) = if cfg.variant.multi_view() {
            let vb = create_multi_view(tape, x)?;
            (vb.var, Some(vb.base_batch))
        } else {
            (x, None)
        };

        let mut skips = Vec::with_capacity(n - 1);
        for i in 0..n {
            let shape = enc_block_shape(cfg, i);
            let vars = self.block_vars(b, &format!("enc{}", i), &shape)?;
            h = ssh_residual_block(tape, h, &vars, &shape, shift_opt)?;
            if i < n - 1 {
                skips.push(h);
            }
        }
        for i in (0..n - 1).rev() {
            let up_w = b.var(&format!("dec{}.up.weight", i))?;
            h = tape.conv_transpose(h, up_w, None, ConvSpec::new(down, down))?;
            // Channel order: upsampled decoder features, then encoder skip.
            h = tape.concat(&[h, skips[i]], 1)?;
            let shape = dec_block_shape(cfg, i);
            let vars = self.block_vars(b, &format!("dec{}.block", i), &shape)?;
            h = ssh_residual_block(tape, h, &vars, &shape, shift_opt)?;
        }

        let head = HeadVars {
            conv1_w: b.var("head.conv1.weight")?,
            conv1_b: b.var("head.conv1.bias")?,
            conv2_w: b.var("head.conv2.weight")?,
            conv2_b: b.var("head.conv2.bias")?,
        };
        match view {
            Some(base_batch) => {
                let vb = ViewBatch { var: h, base_batch };
                multi_view_fusion(tape, &vb, &head)
            }
            None => prediction_head(tape, h, &head),
        }
    }

    /// Forward pass outside any training graph; returns the logits tensor.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bindings = self.bind(&mut tape, false)?;
        let xv = tape.leaf(x);
        let y = self.forward(&mut tape, xv, &bindings)?;
        Tensor::from_vec(tape.shape(y), tape.value(y).to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        w.write_all(&self.cfg.digest())?;
        w.write_u32::<LittleEndian>(self.params.len() as u32)?;
        for (name, t) in self.params.iter() {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
            for &d in t.shape() {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            let mut bytes = Vec::with_capacity(t.numel() * 4);
            for &v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&bytes)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Loads a checkpoint written by `save` for the given configuration.
    /// Tensors are verified in order against the config's parameter list,
    /// so a mismatch is reported by tensor name; the config digest is
    /// compared last to catch settings that leave shapes unchanged.
    pub fn load(path: &Path, cfg: UNetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {:?}, not a checkpoint file",
                magic
            )));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {} unsupported (expected {})",
                version, CHECKPOINT_VERSION
            )));
        }
        let mut digest = [0u8; 32];
        r.read_exact(&mut digest)?;
        let count = r.read_u32::<LittleEndian>()? as usize;
        let specs = param_specs(&cfg);
        if count != specs.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, this config expects {}",
                count,
                specs.len()
            )));
        }
        let mut entries = Vec::with_capacity(count);
        for spec in &specs {
            let name_len = r.read_u32::<LittleEndian>()? as usize;
            if name_len > 4096 {
                return Err(Error::Checkpoint(format!(
                    "tensor name length {} is not plausible",
                    name_len
                )));
            }
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::Checkpoint("tensor name is not valid utf-8".to_string()))?;
            if name != spec.name {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` found where `{}` was expected",
                    name, spec.name
                )));
            }
            let rank = r.read_u32::<LittleEndian>()? as usize;
            if rank > 8 {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has rank {}, not plausible",
                    name, rank
                )));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.read_u64::<LittleEndian>()? as usize);
            }
            if dims != spec.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, config expects {:?}",
                    name, dims, spec.shape
                )));
            }
            let numel: usize = dims.iter().product();
            let mut bytes = vec![0u8; numel * 4];
            r.read_exact(&mut bytes)?;
            let data: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push((name, Tensor::from_vec(&spec.shape, data)?));
        }
        if digest != cfg.digest() {
            return Err(Error::Checkpoint(
                "checkpoint was written for a different configuration (tensor layout matches, settings digest does not)"
                    .to_string(),
            ));
        }
        Ok(SshUnet { cfg, params: ParamStore::from_entries(entries) })
    }
}
