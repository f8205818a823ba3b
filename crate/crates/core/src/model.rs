//! The eight component networks, masked imputation and feature embedding.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape, Var};
use crate::data::Batch;
use crate::error::{IdianError, Result};
use crate::nn::{Activation, BoundMlp, DenseLayer, Mlp, NetId, ParamKey, ParamKind};
use crate::rng::{rng_for, NoiseSource};

/// Hidden widths of the component networks. [`ArchSpec::reference`] is the
/// full-size architecture; smaller widths keep desk-scale experiments fast.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSpec {
    pub imputer_hidden: usize,
    pub encoder_hidden: usize,
    pub embed_dim: usize,
    pub decoder_hidden: usize,
    pub shared_hidden: usize,
    pub shared_dim: usize,
    pub discriminator_hidden: usize,
}

impl ArchSpec {
    pub const fn reference() -> Self {
        Self {
            imputer_hidden: 512,
            encoder_hidden: 2048,
            embed_dim: 1024,
            decoder_hidden: 2048,
            shared_hidden: 512,
            shared_dim: 256,
            discriminator_hidden: 512,
        }
    }

    /// Same topology with every width divided by 16.
    pub const fn desk() -> Self {
        Self {
            imputer_hidden: 32,
            encoder_hidden: 128,
            embed_dim: 64,
            decoder_hidden: 128,
            shared_hidden: 32,
            shared_dim: 16,
            discriminator_hidden: 32,
        }
    }

    fn validate(&self) -> Result<()> {
        let all = [
            self.imputer_hidden,
            self.encoder_hidden,
            self.embed_dim,
            self.decoder_hidden,
            self.shared_hidden,
            self.shared_dim,
            self.discriminator_hidden,
        ];
        if all.contains(&0) {
            return Err(IdianError::config("architecture widths must be positive"));
        }
        Ok(())
    }
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self::reference()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdianModel {
    pub source_dim: usize,
    pub target_dim: usize,
    pub n_classes: usize,
    pub arch: ArchSpec,
    /// Whether missing target entries go through the imputation network
    /// (otherwise they stay zero-filled).
    pub uses_imputation: bool,
    nets: Vec<Mlp>,
}

fn slot(id: NetId) -> usize {
    NetId::ALL.iter().position(|n| *n == id).expect("known net")
}

/// `(dims, activations)` of each network.
fn layout(
    id: NetId,
    d_s: usize,
    d_t: usize,
    n_c: usize,
    a: &ArchSpec,
) -> (Vec<usize>, Vec<Activation>) {
    use Activation::*;
    match id {
        NetId::Imputer => (
            vec![d_t, a.imputer_hidden, a.imputer_hidden, a.imputer_hidden, d_t],
            vec![Relu, Relu, Relu, Sigmoid],
        ),
        NetId::SourceEncoder => (vec![d_s, a.encoder_hidden, a.embed_dim], vec![Relu, Identity]),
        NetId::TargetEncoder => (vec![d_t, a.encoder_hidden, a.embed_dim], vec![Relu, Identity]),
        NetId::SourceDecoder => (vec![a.embed_dim, a.decoder_hidden, d_s], vec![Relu, Identity]),
        NetId::TargetDecoder => (vec![a.embed_dim, a.decoder_hidden, d_t], vec![Relu, Identity]),
        NetId::Shared => (
            vec![a.embed_dim, a.shared_hidden, a.shared_dim],
            vec![Relu, Identity],
        ),
        NetId::Discriminator => (
            vec![a.shared_dim, a.discriminator_hidden, 1],
            vec![Relu, Sigmoid],
        ),
        NetId::Classifier => (vec![a.shared_dim, n_c], vec![Softmax]),
    }
}

/// Allocates the reference-size model.
pub fn build_model(d_s: usize, d_t: usize, n_c: usize, init_seed: u64) -> Result<IdianModel> {
    IdianModel::new(d_s, d_t, n_c, ArchSpec::reference(), init_seed)
}

impl IdianModel {
    pub fn new(d_s: usize, d_t: usize, n_c: usize, arch: ArchSpec, init_seed: u64) -> Result<Self> {
        if d_s == 0 || d_t == 0 || n_c == 0 {
            return Err(IdianError::config("d_s, d_t and n_c must be at least 1"));
        }
        arch.validate()?;
        let nets = NetId::ALL
            .iter()
            .enumerate()
            .map(|(i, id)| {
                let (dims, acts) = layout(*id, d_s, d_t, n_c, &arch);
                let mut rng = rng_for(init_seed, "init", i as u64);
                Mlp::random(&dims, &acts, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            source_dim: d_s,
            target_dim: d_t,
            n_classes: n_c,
            arch,
            uses_imputation: true,
            nets,
        })
    }

    pub fn net(&self, id: NetId) -> &Mlp {
        &self.nets[slot(id)]
    }

    pub fn net_mut(&mut self, id: NetId) -> &mut Mlp {
        &mut self.nets[slot(id)]
    }

    pub fn param_count(&self) -> usize {
        self.nets.iter().map(Mlp::param_count).sum()
    }

    /// Every parameter keyed as on the tape (biases as `1 × out`).
    pub fn param_map(&self) -> BTreeMap<ParamKey, Matrix> {
        let mut map = BTreeMap::new();
        for id in NetId::ALL {
            for (k, layer) in self.net(id).layers().iter().enumerate() {
                let key = |kind| ParamKey { net: id, layer: k, kind };
                map.insert(key(ParamKind::Weights), layer.weights.clone());
                map.insert(key(ParamKind::Bias), layer.bias.clone().insert_axis(Axis(0)));
            }
        }
        map
    }

    /// Overwrites the parameters present in `params`; shapes must match.
    pub fn set_params(&mut self, params: &BTreeMap<ParamKey, Matrix>) -> Result<()> {
        for (key, value) in params {
            let net = self.net_mut(key.net);
            let layer = net
                .layers_mut()
                .get_mut(key.layer)
                .ok_or_else(|| IdianError::config(format!("no layer {} in {}", key.layer, key.net.name())))?;
            match key.kind {
                ParamKind::Weights if value.dim() == layer.weights.dim() => layer.weights.assign(value),
                ParamKind::Bias if value.dim() == (1, layer.bias.len()) => {
                    layer.bias.assign(&value.row(0))
                }
                _ => {
                    return Err(IdianError::config(format!(
                        "parameter {key:?} has shape {:?}",
                        value.dim()
                    )))
                }
            }
        }
        Ok(())
    }

    /// Registers every network on the tape.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let bound = NetId::ALL.map(|id| self.net(id).bind(tape, id));
        let take = |id: NetId| bound[slot(id)].clone();
        BoundModel {
            imputer: take(NetId::Imputer),
            source_encoder: take(NetId::SourceEncoder),
            target_encoder: take(NetId::TargetEncoder),
            source_decoder: take(NetId::SourceDecoder),
            target_decoder: take(NetId::TargetDecoder),
            shared: take(NetId::Shared),
            discriminator: take(NetId::Discriminator),
            classifier: take(NetId::Classifier),
        }
    }

    /// Imputes a block of target rows without recording a tape.
    pub fn impute(&self, x: &Matrix, m: &Matrix, noise: &mut NoiseSource, first_index: usize) -> Result<Matrix> {
        check_block(x, m, self.target_dim)?;
        let eps = noise.sample(x.nrows(), x.ncols(), first_index);
        masked_fill(|input| self.net(NetId::Imputer).forward(input), x, m, &eps)
    }

    /// Class probabilities for target rows (zero-filled when imputation is off).
    pub fn predict_target(
        &self,
        x: &Matrix,
        m: &Matrix,
        noise: &mut NoiseSource,
        first_index: usize,
    ) -> Result<Matrix> {
        check_block(x, m, self.target_dim)?;
        let eps = noise.sample(x.nrows(), x.ncols(), first_index);
        self.predict_with_noise(x, m, &eps)
    }

    /// Class probabilities for target rows with explicit imputation noise.
    pub fn predict_with_noise(&self, x: &Matrix, m: &Matrix, eps: &Matrix) -> Result<Matrix> {
        check_block(x, m, self.target_dim)?;
        let filled = if self.uses_imputation {
            masked_fill(|input| self.net(NetId::Imputer).forward(input), x, m, eps)?
        } else {
            x * m
        };
        let f = self.net(NetId::TargetEncoder).forward(&filled)?;
        let h = self.net(NetId::Shared).forward(&f)?;
        self.net(NetId::Classifier).forward(&h)
    }

    pub fn predict_source(&self, x: &Matrix) -> Result<Matrix> {
        let f = self.net(NetId::SourceEncoder).forward(x)?;
        let h = self.net(NetId::Shared).forward(&f)?;
        self.net(NetId::Classifier).forward(&h)
    }
}

fn check_block(x: &Matrix, m: &Matrix, dim: usize) -> Result<()> {
    if x.dim() != m.dim() {
        return Err(IdianError::config(format!(
            "features {:?} and mask {:?} differ in shape",
            x.dim(),
            m.dim()
        )));
    }
    if x.ncols() != dim {
        return Err(IdianError::config(format!(
            "target rows have {} features, model expects {dim}",
            x.ncols()
        )));
    }
    Ok(())
}

/// `x⊙m + g(x⊙m + ε⊙(1-m))⊙(1-m)` with an arbitrary filler network `g`.
pub fn masked_fill<G>(g: G, x: &Matrix, m: &Matrix, eps: &Matrix) -> Result<Matrix>
where
    G: FnOnce(&Matrix) -> Result<Matrix>,
{
    if x.dim() != m.dim() || x.dim() != eps.dim() {
        return Err(IdianError::config("features, mask and noise must share a shape"));
    }
    let keep = x * m;
    let hole = m.mapv(|v| 1.0 - v);
    let input = &keep + &(eps * &hole);
    let filled = g(&input)?;
    if filled.dim() != x.dim() {
        return Err(IdianError::config("imputation network changed the row shape"));
    }
    Ok(keep + filled * hole)
}

/// The model's networks registered on one tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub imputer: BoundMlp,
    pub source_encoder: BoundMlp,
    pub target_encoder: BoundMlp,
    pub source_decoder: BoundMlp,
    pub target_decoder: BoundMlp,
    pub shared: BoundMlp,
    pub discriminator: BoundMlp,
    pub classifier: BoundMlp,
}

/// Taped outputs for one block of rows.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    /// Encoder input: the raw source rows or the imputed target rows.
    pub input: Var,
    /// Domain-specific embedding.
    pub embedding: Var,
    /// Output of the shared extractor.
    pub shared: Var,
}

impl BoundModel {
    pub fn source_block(&self, tape: &mut Tape, x: &Matrix) -> Result<BlockVars> {
        let input = tape.constant(x.clone());
        let embedding = self.source_encoder.forward(tape, input)?;
        let shared = self.shared.forward(tape, embedding)?;
        Ok(BlockVars {
            input,
            embedding,
            shared,
        })
    }

    /// Imputes (or zero-fills when `eps` is `None`) and embeds target rows.
    pub fn target_block(
        &self,
        tape: &mut Tape,
        x: &Matrix,
        m: &Matrix,
        eps: Option<&Matrix>,
    ) -> Result<BlockVars> {
        if x.dim() != m.dim() {
            return Err(IdianError::config("features and mask differ in shape"));
        }
        let keep = x * m;
        let input = match eps {
            Some(eps) => {
                if eps.dim() != x.dim() {
                    return Err(IdianError::config("noise and features differ in shape"));
                }
                let hole = m.mapv(|v| 1.0 - v);
                let noisy = tape.constant(&keep + &(eps * &hole));
                let g = self.imputer.forward(tape, noisy)?;
                let hole = tape.constant(hole);
                let fill = tape.mul(g, hole)?;
                let keep = tape.constant(keep);
                tape.add(keep, fill)?
            }
            None => tape.constant(keep),
        };
        let embedding = self.target_encoder.forward(tape, input)?;
        let shared = self.shared.forward(tape, embedding)?;
        Ok(BlockVars {
            input,
            embedding,
            shared,
        })
    }
}

/// Embeddings of one batch, read off a forward pass.
#[derive(Clone, Debug)]
pub struct Embeddings {
    pub source: Matrix,
    pub target_labeled: Matrix,
    pub target_unlabeled: Matrix,
    pub imputed_labeled: Matrix,
    pub imputed_unlabeled: Matrix,
}

/// Domain-specific embeddings of all three batch blocks.
pub fn embed(model: &IdianModel, batch: &Batch, noise: &mut NoiseSource) -> Result<Embeddings> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let s = bound.source_block(&mut tape, &batch.source.features)?;
    let mut target = |tape: &mut Tape, x: &Matrix, m: &Matrix| -> Result<BlockVars> {
        check_block(x, m, model.target_dim)?;
        let eps = model
            .uses_imputation
            .then(|| noise.sample(x.nrows(), x.ncols(), 0));
        bound.target_block(tape, x, m, eps.as_ref())
    };
    let tl = target(&mut tape, &batch.target_labeled.features, &batch.target_labeled.masks)?;
    let tu = target(
        &mut tape,
        &batch.target_unlabeled.features,
        &batch.target_unlabeled.masks,
    )?;
    Ok(Embeddings {
        source: tape.value(s.embedding).clone(),
        target_labeled: tape.value(tl.embedding).clone(),
        target_unlabeled: tape.value(tu.embedding).clone(),
        imputed_labeled: tape.value(tl.input).clone(),
        imputed_unlabeled: tape.value(tu.input).clone(),
    })
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"IDIANCKP";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub master_seed: u64,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    source_dim: usize,
    target_dim: usize,
    n_classes: usize,
    arch: ArchSpec,
    uses_imputation: bool,
    meta: CheckpointMeta,
    /// Per net: `(in, out, activation)` of each layer.
    layers: Vec<(NetId, Vec<(usize, usize, Activation)>)>,
}

/// Binary checkpoint: magic, version, JSON header, then little-endian f64
/// weights and biases in network/layer order. Round-trips bit-exactly.
pub fn save_checkpoint(model: &IdianModel, meta: &CheckpointMeta, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = CheckpointHeader {
        source_dim: model.source_dim,
        target_dim: model.target_dim,
        n_classes: model.n_classes,
        arch: model.arch,
        uses_imputation: model.uses_imputation,
        meta: meta.clone(),
        layers: NetId::ALL
            .iter()
            .map(|id| {
                let l = model
                    .net(*id)
                    .layers()
                    .iter()
                    .map(|l| (l.in_dim(), l.out_dim(), l.activation))
                    .collect();
                (*id, l)
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| IdianError::Data(e.to_string()))?;
    let mut buf = Vec::with_capacity(header.len() + 8 * model.param_count() + 32);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for id in NetId::ALL {
        for layer in model.net(id).layers() {
            for v in layer.weights.iter().chain(layer.bias.iter()) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    crate::io::write_atomic(path, |f| f.write_all(&buf))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(IdianModel, CheckpointMeta)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| IdianError::io(path, e))?;
    let bad = |msg: &str| IdianError::Data(format!("{}: {msg}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body_start = 20 + header_len;
    if bytes.len() < body_start {
        return Err(bad("truncated header"));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[20..body_start]).map_err(|e| bad(&e.to_string()))?;

    let mut values = bytes[body_start..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut nets = Vec::with_capacity(NetId::ALL.len());
    for (i, id) in NetId::ALL.iter().enumerate() {
        let (hid, shapes) = header
            .layers
            .get(i)
            .ok_or_else(|| bad("missing network in header"))?;
        if hid != id {
            return Err(bad("networks out of order"));
        }
        let mut layers = Vec::with_capacity(shapes.len());
        for &(rows, cols, act) in shapes {
            let w: Vec<f64> = values.by_ref().take(rows * cols).collect();
            let b: Vec<f64> = values.by_ref().take(cols).collect();
            if w.len() != rows * cols || b.len() != cols {
                return Err(bad("truncated parameter data"));
            }
            let weights = Array2::from_shape_vec((rows, cols), w).map_err(|e| bad(&e.to_string()))?;
            layers.push(DenseLayer::new(weights, Array1::from(b), act)?);
        }
        nets.push(Mlp::new(layers)?);
    }
    if values.next().is_some() || (bytes.len() - body_start) % 8 != 0 {
        return Err(bad("trailing bytes after parameters"));
    }
    let model = IdianModel {
        source_dim: header.source_dim,
        target_dim: header.target_dim,
        n_classes: header.n_classes,
        arch: header.arch,
        uses_imputation: header.uses_imputation,
        nets,
    };
    // Shapes must agree with what the header's dims imply.
    for id in NetId::ALL {
        let (dims, _) = layout(id, model.source_dim, model.target_dim, model.n_classes, &model.arch);
        if model.net(id).dims() != dims {
            return Err(bad(&format!("{id} layer shapes disagree with header dims")));
        }
    }
    Ok((model, header.meta))
}
