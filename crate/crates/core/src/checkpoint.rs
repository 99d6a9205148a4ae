//! Versioned binary checkpoints.
//!
//! Layout: magic "NXN1", format version (u32 LE), manifest length (u64 LE),
//! manifest JSON (architecture + tensor directory), raw little-endian f64
//! payload, trailing CRC32 of all preceding bytes. Tensor offsets are
//! relative to the payload start. Save -> load -> save is byte-identical;
//! the CRC is verified before anything is constructed.

use crate::arch::{BlockDef, ClassifierNet, OdeDef, ResDef, SeqNet, Stage};
use crate::error::{NxnError, Result};
use crate::kernels::Activation;
use crate::linop::{Conv2dOp, DenseOp, OpKind, Padding, SpectralState};
use crate::net::{ParamSet, ParamTensor, Space};
use crate::tableau::builtin;
use crate::tableau::TableauName;
use serde::{Deserialize, Serialize};
use std::path::Path;

const MAGIC: &[u8; 4] = b"NXN1";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArchManifest {
    /// "seq" or "classifier".
    pub model: String,
    /// "nonexp" or "baseline".
    pub family: String,
    pub tableau: String,
    pub activation: String,
    pub h: f64,
    pub budget: f64,
    /// Averaged-wrapper coefficient to use with this net.
    pub alpha: f64,
    /// "image" or "dense".
    pub input_kind: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub lifted: usize,
    pub n_blocks: usize,
    pub kernel: usize,
    pub padding: String,
    pub stage_channels: Vec<usize>,
    pub n_classes: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub len: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub architecture: ArchManifest,
    pub tensors: Vec<TensorMeta>,
}

/// A model plus the wrapper coefficient stored with it.
#[derive(Clone, Debug)]
pub enum Model {
    Seq(SeqNet),
    Classifier(ClassifierNet),
}

impl Model {
    pub fn params(&self) -> &ParamSet {
        match self {
            Model::Seq(n) => &n.params,
            Model::Classifier(n) => &n.params,
        }
    }
}

fn family_str(blocks: &[BlockDef]) -> &'static str {
    if blocks.iter().any(|b| matches!(b, BlockDef::Res(_))) {
        "baseline"
    } else {
        "nonexp"
    }
}

fn padding_str(p: Padding) -> &'static str {
    match p {
        Padding::Zero => "zero",
        Padding::Circular => "circular",
    }
}

fn parse_padding(s: &str) -> Result<Padding> {
    match s {
        "zero" => Ok(Padding::Zero),
        "circular" => Ok(Padding::Circular),
        other => Err(NxnError::Checkpoint(format!("unknown padding {other}"))),
    }
}

fn parse_activation(s: &str) -> Result<Activation> {
    match s {
        "leaky_relu" => Ok(Activation::LeakyRelu),
        "relu" => Ok(Activation::Relu),
        "identity" => Ok(Activation::Identity),
        other => Err(NxnError::Checkpoint(format!("unknown activation {other}"))),
    }
}

fn seq_arch(net: &SeqNet, alpha: f64) -> ArchManifest {
    let (h, budget) = net
        .blocks
        .iter()
        .find_map(|b| match b {
            BlockDef::Ode(d) => Some((d.h, d.budget)),
            BlockDef::Res(_) => None,
        })
        .unwrap_or((net.radius, 2.0 * net.radius));
    let (kernel, padding) = net
        .blocks
        .first()
        .and_then(|b| {
            let id = match b {
                BlockDef::Ode(d) => d.op,
                BlockDef::Res(d) => d.a,
            };
            match net.params.op(id) {
                OpKind::Conv(c) => Some((c.kh, padding_str(c.padding).to_string())),
                OpKind::Dense(_) => None,
            }
        })
        .unwrap_or((0, "zero".to_string()));
    let (input_kind, channels, height, width, dim) = match net.input {
        Space::Image { channels, height, width } => ("image", channels, height, width, 0),
        Space::Dense { dim } => ("dense", 0, 0, 0, dim),
    };
    ArchManifest {
        model: "seq".into(),
        family: family_str(&net.blocks).into(),
        tableau: tableau_name_of(&net.tableau),
        activation: net.act.as_str().into(),
        h,
        budget,
        alpha,
        input_kind: input_kind.into(),
        channels,
        height,
        width,
        dim,
        lifted: net.lifted.channels(),
        n_blocks: net.blocks.len(),
        kernel,
        padding,
        stage_channels: vec![],
        n_classes: 0,
    }
}

fn tableau_name_of(t: &crate::tableau::RKTableau) -> String {
    match t.m {
        1 => "euler".into(),
        2 => "heun".into(),
        4 => "rk4".into(),
        m => format!("m{m}"),
    }
}

fn classifier_arch(net: &ClassifierNet, alpha: f64) -> ArchManifest {
    let blocks = net.all_blocks();
    let (h, budget) = blocks
        .iter()
        .find_map(|b| match b {
            BlockDef::Ode(d) => Some((d.h, d.budget)),
            BlockDef::Res(_) => None,
        })
        .unwrap_or((net.radius, 2.0 * net.radius));
    let stage_channels: Vec<usize> = net
        .stages
        .iter()
        .map(|s| match net.params.op(s.lift) {
            OpKind::Conv(c) => c.out_channels,
            OpKind::Dense(d) => d.rows,
        })
        .collect();
    let blocks_per_stage = net.stages.first().map(|s| s.blocks.len()).unwrap_or(0);
    let (c, hgt, wdt) = net.input;
    ArchManifest {
        model: "classifier".into(),
        family: family_str(&blocks).into(),
        tableau: tableau_name_of(&net.tableau),
        activation: net.act.as_str().into(),
        h,
        budget,
        alpha,
        input_kind: "image".into(),
        channels: c,
        height: hgt,
        width: wdt,
        dim: 0,
        lifted: 0,
        n_blocks: blocks_per_stage,
        kernel: 3,
        padding: "zero".into(),
        stage_channels,
        n_classes: net.n_classes,
    }
}

fn push_tensor(
    metas: &mut Vec<TensorMeta>,
    payload: &mut Vec<u8>,
    name: &str,
    shape: Vec<usize>,
    data: &[f64],
) {
    let offset = payload.len() as u64;
    for v in data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    metas.push(TensorMeta {
        name: name.to_string(),
        shape,
        dtype: "f64".into(),
        offset,
        len: (data.len() * 8) as u64,
    });
}

fn dump_params(params: &ParamSet, metas: &mut Vec<TensorMeta>, payload: &mut Vec<u8>) {
    for id in 0..params.len() {
        let name = params.name(id).to_string();
        match &params.tensors[id].1 {
            ParamTensor::Op(p) => {
                push_tensor(metas, payload, &name, p.op.shape(), p.op.entries());
                push_tensor(metas, payload, &format!("{name}.u"), vec![p.spectral.u.len()], &p.spectral.u);
                push_tensor(metas, payload, &format!("{name}.v"), vec![p.spectral.v.len()], &p.spectral.v);
                push_tensor(metas, payload, &format!("{name}.sigma"), vec![1], &[p.spectral.sigma]);
            }
            ParamTensor::Vec(v) => {
                push_tensor(metas, payload, &name, vec![v.len()], v);
            }
        }
    }
}

/// Serializes a model to the checkpoint byte format.
pub fn save_to_bytes(model: &Model, alpha: f64) -> Vec<u8> {
    let architecture = match model {
        Model::Seq(n) => seq_arch(n, alpha),
        Model::Classifier(n) => classifier_arch(n, alpha),
    };
    let mut metas = Vec::new();
    let mut payload = Vec::new();
    dump_params(model.params(), &mut metas, &mut payload);
    let manifest = Manifest { architecture, tensors: metas };
    let mjson = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(16 + mjson.len() + payload.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(mjson.len() as u64).to_le_bytes());
    out.extend_from_slice(&mjson);
    out.extend_from_slice(&payload);
    let mut h = crc32fast::Hasher::new();
    h.update(&out);
    out.extend_from_slice(&h.finalize().to_le_bytes());
    out
}

pub fn save(model: &Model, alpha: f64, path: &Path) -> Result<()> {
    std::fs::write(path, save_to_bytes(model, alpha))?;
    Ok(())
}

struct TensorReader<'a> {
    metas: &'a [TensorMeta],
    payload: &'a [u8],
    cursor: usize,
}

impl<'a> TensorReader<'a> {
    fn next(&mut self, want_name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let meta = self.metas.get(self.cursor).ok_or_else(|| {
            NxnError::Checkpoint(format!("missing tensor {want_name}"))
        })?;
        if meta.name != want_name {
            return Err(NxnError::Checkpoint(format!(
                "expected tensor {want_name}, found {}",
                meta.name
            )));
        }
        if meta.dtype != "f64" {
            return Err(NxnError::Checkpoint(format!("unsupported dtype {}", meta.dtype)));
        }
        let start = meta.offset as usize;
        let end = start + meta.len as usize;
        if end > self.payload.len() || meta.len % 8 != 0 {
            return Err(NxnError::Checkpoint(format!("tensor {want_name} out of bounds")));
        }
        let mut data = Vec::with_capacity((meta.len / 8) as usize);
        for chunk in self.payload[start..end].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        let expect: usize = meta.shape.iter().product();
        if expect != data.len() {
            return Err(NxnError::Checkpoint(format!(
                "tensor {want_name} shape/len mismatch"
            )));
        }
        self.cursor += 1;
        Ok((meta.shape.clone(), data))
    }

    fn op(&mut self, name: &str, arch: &ArchManifest, height: usize, width: usize) -> Result<(OpKind, SpectralState)> {
        let (shape, data) = self.next(name)?;
        let op = match shape.len() {
            2 => OpKind::Dense(DenseOp::new(shape[0], shape[1], data)?),
            4 => OpKind::Conv(Conv2dOp::new(
                shape[1],
                shape[0],
                shape[2],
                shape[3],
                data,
                parse_padding(&arch.padding)?,
                height,
                width,
            )?),
            _ => return Err(NxnError::Checkpoint(format!("tensor {name} has odd rank"))),
        };
        let (_, u) = self.next(&format!("{name}.u"))?;
        let (_, v) = self.next(&format!("{name}.v"))?;
        let (_, sig) = self.next(&format!("{name}.sigma"))?;
        Ok((op, SpectralState { u, v, sigma: sig[0] }))
    }

    fn vec(&mut self, name: &str) -> Result<Vec<f64>> {
        Ok(self.next(name)?.1)
    }

    fn done(&self) -> Result<()> {
        if self.cursor != self.metas.len() {
            return Err(NxnError::Checkpoint(format!(
                "{} unexpected trailing tensors",
                self.metas.len() - self.cursor
            )));
        }
        Ok(())
    }
}

/// Parses the checkpoint byte format, verifying magic, version and CRC
/// before constructing anything.
pub fn load_from_bytes(bytes: &[u8]) -> Result<(Model, f64)> {
    if bytes.len() < 20 {
        return Err(NxnError::Checkpoint("file truncated".into()));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let mut h = crc32fast::Hasher::new();
    h.update(body);
    if h.finalize() != stored {
        return Err(NxnError::Checkpoint("CRC mismatch".into()));
    }
    if &body[0..4] != MAGIC {
        return Err(NxnError::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(NxnError::Checkpoint(format!("unsupported version {version}")));
    }
    let mlen = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
    if 16 + mlen > body.len() {
        return Err(NxnError::Checkpoint("manifest extends past file".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&body[16..16 + mlen])
        .map_err(|e| NxnError::Checkpoint(format!("manifest parse: {e}")))?;
    let payload = &body[16 + mlen..];
    let arch = &manifest.architecture;
    let act = parse_activation(&arch.activation)?;
    let tname = TableauName::parse(&arch.tableau)?;
    let mut tableau = builtin(tname);
    let radius = tableau
        .radius_or_compute()?
        .finite()
        .ok_or_else(|| NxnError::Checkpoint("tableau radius not finite".into()))?;
    let mut reader = TensorReader { metas: &manifest.tensors, payload, cursor: 0 };
    let alpha = arch.alpha;

    let model = match arch.model.as_str() {
        "seq" => {
            let (input, lifted) = match arch.input_kind.as_str() {
                "image" => (
                    Space::Image { channels: arch.channels, height: arch.height, width: arch.width },
                    Space::Image { channels: arch.lifted, height: arch.height, width: arch.width },
                ),
                "dense" => (Space::Dense { dim: arch.dim }, Space::Dense { dim: arch.lifted }),
                other => return Err(NxnError::Checkpoint(format!("unknown input kind {other}"))),
            };
            let mut params = ParamSet::default();
            let mut blocks = Vec::new();
            for i in 0..arch.n_blocks {
                let name = format!("block{i}.weight");
                let (op, sp) = reader.op(&name, arch, arch.height, arch.width)?;
                let a_id = params.add_op(name.clone(), op, sp);
                let (b_id, bias_name) = if arch.family == "baseline" {
                    let bname = format!("block{i}.bweight");
                    let (bop, bsp) = reader.op(&bname, arch, arch.height, arch.width)?;
                    (Some(params.add_op(bname, bop, bsp)), format!("block{i}.bias"))
                } else {
                    (None, format!("block{i}.bias"))
                };
                let bias = reader.vec(&bias_name)?;
                let bias_id = params.add_vec(bias_name, bias);
                match b_id {
                    Some(b) => blocks.push(BlockDef::Res(ResDef { a: a_id, b, bias: bias_id })),
                    None => blocks.push(BlockDef::Ode(OdeDef {
                        op: a_id,
                        bias: bias_id,
                        h: arch.h,
                        budget: arch.budget,
                    })),
                }
            }
            reader.done()?;
            Model::Seq(SeqNet { input, lifted, tableau, radius, act, blocks, params })
        }
        "classifier" => {
            let mut params = ParamSet::default();
            let mut stages = Vec::new();
            let (mut h_px, mut w_px) = (arch.height, arch.width);
            for (si, _) in arch.stage_channels.iter().enumerate() {
                let lname = format!("stage{si}.lift.weight");
                let (lop, lsp) = reader.op(&lname, arch, h_px, w_px)?;
                let lift = params.add_op(lname, lop, lsp);
                h_px /= 2;
                w_px /= 2;
                let mut blocks = Vec::new();
                for bi in 0..arch.n_blocks {
                    let name = format!("stage{si}.block{bi}.weight");
                    let (op, sp) = reader.op(&name, arch, h_px, w_px)?;
                    let a_id = params.add_op(name, op, sp);
                    let b_id = if arch.family == "baseline" {
                        let bname = format!("stage{si}.block{bi}.bweight");
                        let (bop, bsp) = reader.op(&bname, arch, h_px, w_px)?;
                        Some(params.add_op(bname, bop, bsp))
                    } else {
                        None
                    };
                    let bias_name = format!("stage{si}.block{bi}.bias");
                    let bias = reader.vec(&bias_name)?;
                    let bias_id = params.add_vec(bias_name, bias);
                    match b_id {
                        Some(b) => blocks.push(BlockDef::Res(ResDef { a: a_id, b, bias: bias_id })),
                        None => blocks.push(BlockDef::Ode(OdeDef {
                            op: a_id,
                            bias: bias_id,
                            h: arch.h,
                            budget: arch.budget,
                        })),
                    }
                }
                stages.push(Stage { lift, blocks });
            }
            let (fop, fsp) = reader.op("final.weight", arch, h_px, w_px)?;
            let final_w = params.add_op("final.weight", fop, fsp);
            let fb = reader.vec("final.bias")?;
            let final_b = params.add_vec("final.bias", fb);
            reader.done()?;
            Model::Classifier(ClassifierNet {
                input: (arch.channels, arch.height, arch.width),
                stages,
                final_w,
                final_b,
                n_classes: arch.n_classes,
                tableau,
                radius,
                act,
                params,
            })
        }
        other => return Err(NxnError::Checkpoint(format!("unknown model {other}"))),
    };
    Ok((model, alpha))
}

pub fn load(path: &Path) -> Result<(Model, f64)> {
    let bytes = std::fs::read(path)?;
    load_from_bytes(&bytes)
}

/// Peeks at the manifest without rebuilding the model.
pub fn read_manifest(bytes: &[u8]) -> Result<Manifest> {
    if bytes.len() < 20 {
        return Err(NxnError::Checkpoint("file truncated".into()));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if 16 + mlen > bytes.len() {
        return Err(NxnError::Checkpoint("manifest extends past file".into()));
    }
    serde_json::from_slice(&bytes[16..16 + mlen])
        .map_err(|e| NxnError::Checkpoint(format!("manifest parse: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_seq, Family, SeqSpec};

    fn sample_net() -> SeqNet {
        build_seq(
            &SeqSpec::denoiser(8, 8, 1, 4, 2, TableauName::Heun),
            17,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let net = sample_net();
        let bytes = save_to_bytes(&Model::Seq(net), 0.5);
        let (model, alpha) = load_from_bytes(&bytes).unwrap();
        assert_eq!(alpha, 0.5);
        let again = save_to_bytes(&model, alpha);
        assert_eq!(bytes, again, "save-load-save must be byte identical");
    }

    #[test]
    fn loaded_net_forwards_identically() {
        let net = sample_net();
        let mut rng = crate::rng::stream(3, "ckpt", &[]);
        let inputs: Vec<Vec<f64>> = (0..10).map(|_| crate::rng::gaussian_vec_new(&mut rng, 64)).collect();
        let bytes = save_to_bytes(&Model::Seq(net.clone()), 0.25);
        let (model, _) = load_from_bytes(&bytes).unwrap();
        let Model::Seq(loaded) = model else { panic!("expected seq") };
        for x in &inputs {
            let a = net.forward(x).unwrap();
            let b = loaded.forward(x).unwrap();
            assert_eq!(a, b, "forward outputs must be bitwise equal");
        }
    }

    #[test]
    fn truncation_and_corruption_detected() {
        let net = sample_net();
        let bytes = save_to_bytes(&Model::Seq(net), 0.5);
        let truncated = &bytes[..bytes.len() - 9];
        assert!(load_from_bytes(truncated).is_err());
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0xff;
        match load_from_bytes(&flipped) {
            Err(NxnError::Checkpoint(msg)) => assert!(msg.contains("CRC"), "{msg}"),
            other => panic!("expected CRC failure, got {other:?}"),
        }
    }

    #[test]
    fn classifier_round_trip() {
        let net = crate::arch::build_classifier(
            &crate::arch::ClassifierSpec {
                input: (1, 8, 8),
                stage_channels: vec![4, 8],
                blocks_per_stage: 2,
                n_classes: 2,
                tableau: TableauName::Euler,
                h: None,
                budget: 1.0,
                act: Activation::LeakyRelu,
                family: Family::NonExpansive,
            },
            5,
        )
        .unwrap();
        let bytes = save_to_bytes(&Model::Classifier(net.clone()), 0.5);
        let (model, _) = load_from_bytes(&bytes).unwrap();
        let Model::Classifier(loaded) = model else { panic!("expected classifier") };
        let x = vec![0.3; 64];
        assert_eq!(net.forward(&x).unwrap(), loaded.forward(&x).unwrap());
        let again = save_to_bytes(&Model::Classifier(loaded), 0.5);
        assert_eq!(bytes, again);
    }
}
