//! Grid-decoder registration network.
//!
//! A small 3D conv encoder over the stacked (fixed, moving) pair feeds
//! per-scale skip projections that flatten features into a token sequence;
//! a cross-attention decoder then reads the tokens with one query per
//! control point and emits displacement means (and, with the Bayesian head,
//! raw variances) on the requested grid.
//!
//! Every weight shape is independent of the grid size: the grid enters only
//! through the number of queries and their positional encodings, so one
//! checkpoint serves any grid resolution.

pub mod train;

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, TapeFloat};
use crate::error::{Error, Result};
use crate::gridfield::{ControlGrid, GridVec3, GriddedField};
use crate::volume::Volume;

/// Architecture of the toy-scale network.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NetConfig {
    /// Encoder depth; each level halves the spatial dims.
    pub levels: usize,
    /// Channels of the first encoder level; doubled per level.
    pub base_channels: usize,
    /// Decoder (and attention output) width.
    pub decoder_channels: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Sinusoidal frequency pairs per axis; the per-point encoding width is
    /// `6 * pe_freqs`.
    pub pe_freqs: usize,
    /// Whether the head carries raw-variance channels.
    pub bayesian: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            levels: 3,
            base_channels: 8,
            decoder_channels: 64,
            heads: 4,
            head_dim: 16,
            pe_freqs: 8,
            bayesian: true,
        }
    }
}

impl NetConfig {
    /// Token channel width produced by every projector (8C).
    pub fn token_channels(&self) -> usize {
        8 * self.base_channels
    }

    /// Per-point positional-encoding width.
    pub fn pe_channels(&self) -> usize {
        6 * self.pe_freqs
    }

    /// Query width: point encoding plus the appended grid-size embedding.
    pub fn query_channels(&self) -> usize {
        2 * self.pe_channels()
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 1
            || self.base_channels < 1
            || self.decoder_channels < 1
            || self.heads < 1
            || self.head_dim < 1
            || self.pe_freqs < 1
        {
            return Err(Error::InvalidArg("all NetConfig sizes must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// One named tensor with its flat offset into the parameter buffer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat parameter store; the order of `specs` defines the checkpoint layout.
#[derive(Debug, Clone)]
pub struct Parameters<F> {
    pub specs: Vec<ParamSpec>,
    pub data: Vec<F>,
}

impl<F: TapeFloat> Parameters<F> {
    fn tensor(&self, idx: usize) -> ArrayD<F> {
        let spec = &self.specs[idx];
        ArrayD::from_shape_vec(
            IxDyn(&spec.shape),
            self.data[spec.offset..spec.offset + spec.len()].to_vec(),
        )
        .expect("parameter shape consistent")
    }

    pub fn total_len(&self) -> usize {
        self.data.len()
    }

    pub fn as_f32_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&(v.to_f32().unwrap()).to_le_bytes());
        }
        out
    }
}

enum InitKind {
    HeNormal,
    Xavier,
    Zero,
}

struct ParamBuilder<F> {
    specs: Vec<ParamSpec>,
    data: Vec<F>,
    rng: rand_chacha::ChaCha8Rng,
}

impl<F: TapeFloat> ParamBuilder<F> {
    fn new(seed: u64) -> Self {
        ParamBuilder {
            specs: Vec::new(),
            data: Vec::new(),
            rng: crate::rng::stream(seed, "gridnet.init", 0),
        }
    }

    fn push(&mut self, name: &str, shape: &[usize], kind: InitKind) {
        use rand_distr::{Distribution, StandardNormal};
        let len: usize = shape.iter().product();
        let std = match kind {
            InitKind::HeNormal => {
                let fan_in: usize = shape[1..].iter().product();
                (2.0 / fan_in as f64).sqrt()
            }
            InitKind::Xavier => {
                let fan = (shape[0] + shape[shape.len() - 1]) as f64;
                (2.0 / fan).sqrt()
            }
            InitKind::Zero => 0.0,
        };
        let offset = self.data.len();
        for _ in 0..len {
            let v = if std == 0.0 {
                0.0
            } else {
                let n: f64 = StandardNormal.sample(&mut self.rng);
                n * std
            };
            self.data.push(F::from(v).unwrap());
        }
        self.specs.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            offset,
        });
    }
}

/// Deterministic sinusoidal positional encodings over normalized
/// coordinates, cached per grid size.
struct PosEncoder<F> {
    freqs: usize,
    cache: RefCell<HashMap<[usize; 3], Arc<Array2<F>>>>,
    computations: Cell<usize>,
}

impl<F: TapeFloat> PosEncoder<F> {
    fn new(freqs: usize) -> Self {
        PosEncoder {
            freqs,
            cache: RefCell::new(HashMap::new()),
            computations: Cell::new(0),
        }
    }

    /// Encode points with coordinates normalized to roughly [0, 1]: per
    /// axis and frequency, a (sin, cos) pair.
    fn encode(&self, points: &[[f64; 3]]) -> Array2<F> {
        let c = 6 * self.freqs;
        let mut out = Array2::<F>::zeros((points.len(), c));
        for (row, p) in points.iter().enumerate() {
            let mut col = 0;
            for axis in 0..3 {
                for q in 0..self.freqs {
                    let arg = std::f64::consts::PI * (1u64 << q) as f64 * p[axis];
                    out[[row, col]] = F::from(arg.sin()).unwrap();
                    out[[row, col + 1]] = F::from(arg.cos()).unwrap();
                    col += 2;
                }
            }
        }
        out
    }

    /// Query matrix for a grid: point encodings with the grid-size
    /// embedding appended to every row. Cached per grid size.
    fn queries(&self, grid_dims: [usize; 3]) -> Arc<Array2<F>> {
        if let Some(hit) = self.cache.borrow().get(&grid_dims) {
            return hit.clone();
        }
        self.computations.set(self.computations.get() + 1);
        let norm = |i: usize, g: usize| i as f64 / (g - 1) as f64;
        let mut points = Vec::with_capacity(grid_dims.iter().product());
        for k in 0..grid_dims[2] {
            for j in 0..grid_dims[1] {
                for i in 0..grid_dims[0] {
                    points.push([
                        norm(i, grid_dims[0]),
                        norm(j, grid_dims[1]),
                        norm(k, grid_dims[2]),
                    ]);
                }
            }
        }
        let psi = self.encode(&points);
        let phi = self.encode(&[[
            grid_dims[0] as f64 / 16.0,
            grid_dims[1] as f64 / 16.0,
            grid_dims[2] as f64 / 16.0,
        ]]);
        let g = points.len();
        let c = psi.ncols();
        let mut q = Array2::<F>::zeros((g, 2 * c));
        for row in 0..g {
            for col in 0..c {
                q[[row, col]] = psi[[row, col]];
                q[[row, c + col]] = phi[[0, col]];
            }
        }
        let arc = Arc::new(q);
        self.cache.borrow_mut().insert(grid_dims, arc.clone());
        arc
    }
}

/// Multi-head attention projection weights, as plain matrices.
#[derive(Debug, Clone)]
pub struct AttentionWeights<F> {
    pub wq: Array2<F>,
    pub wk: Array2<F>,
    pub wv: Array2<F>,
    pub wo: Array2<F>,
    pub heads: usize,
    pub head_dim: usize,
}

/// Multi-head scaled-dot-product block on the tape. Returns the output node
/// and the per-head attention-matrix nodes (for instrumentation).
#[allow(clippy::too_many_arguments)]
fn attention_block<F: TapeFloat>(
    tape: &mut Tape<F>,
    queries: NodeId,
    tokens: NodeId,
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
    wo: NodeId,
    heads: usize,
    head_dim: usize,
) -> Result<(NodeId, Vec<NodeId>)> {
    let q = tape.matmul(queries, wq)?;
    let k = tape.matmul(tokens, wk)?;
    let v = tape.matmul(tokens, wv)?;
    let scale = F::from(1.0 / (head_dim as f64).sqrt()).unwrap();
    let mut head_outputs = Vec::with_capacity(heads);
    let mut attn_nodes = Vec::with_capacity(heads);
    for h in 0..heads {
        let lo = h * head_dim;
        let hi = lo + head_dim;
        let qh = tape.slice_cols(q, lo, hi)?;
        let kh = tape.slice_cols(k, lo, hi)?;
        let vh = tape.slice_cols(v, lo, hi)?;
        let kt = tape.transpose2(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let scaled = tape.scale(logits, scale);
        let attn = tape.softmax_rows(scaled)?;
        attn_nodes.push(attn);
        head_outputs.push(tape.matmul(attn, vh)?);
    }
    let mut concat = head_outputs[0];
    for &h in &head_outputs[1..] {
        concat = tape.concat_cols(concat, h)?;
    }
    let out = tape.matmul(concat, wo)?;
    Ok((out, attn_nodes))
}

/// Standalone cross-attention evaluation with explicit weights; the same
/// block the decoder uses, exposed for direct testing.
pub fn cross_attention<F: TapeFloat>(
    queries: &Array2<F>,
    tokens: &Array2<F>,
    w: &AttentionWeights<F>,
) -> Result<Array2<F>> {
    let mut tape = Tape::new();
    let q = tape.input(queries.clone().into_dyn());
    let t = tape.input(tokens.clone().into_dyn());
    let wq = tape.input(w.wq.clone().into_dyn());
    let wk = tape.input(w.wk.clone().into_dyn());
    let wv = tape.input(w.wv.clone().into_dyn());
    let wo = tape.input(w.wo.clone().into_dyn());
    let (out, _) = attention_block(&mut tape, q, t, wq, wk, wv, wo, w.heads, w.head_dim)?;
    Ok(tape
        .value(out)
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap())
}

/// Node handles of one forward build.
pub struct ForwardHandles {
    /// Parameter nodes, in `Parameters::specs` order.
    pub params: Vec<NodeId>,
    /// `[G, 3]` displacement means.
    pub mu: NodeId,
    /// `[G, 3]` raw variances (Bayesian head only).
    pub eta: Option<NodeId>,
    /// Attention matrices per decoder level and head.
    pub attention: Vec<NodeId>,
}

/// The network: configuration plus flat parameters and the PE cache.
pub struct GridNet<F> {
    pub cfg: NetConfig,
    pub params: Parameters<F>,
    pub seed: u64,
    pe: PosEncoder<F>,
}

impl<F: TapeFloat> GridNet<F> {
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut b = ParamBuilder::<F>::new(seed);
        let cp = cfg.token_channels();
        let cd = cfg.decoder_channels;
        let hd = cfg.heads * cfg.head_dim;
        // Encoder: stacked pair (2 channels) in, channels double per level.
        let mut in_ch = 2;
        for l in 1..=cfg.levels {
            let out_ch = cfg.base_channels << (l - 1);
            b.push(
                &format!("enc{l}.kernel"),
                &[out_ch, in_ch, 3, 3, 3],
                InitKind::HeNormal,
            );
            b.push(&format!("enc{l}.bias"), &[out_ch], InitKind::Zero);
            in_ch = out_ch;
        }
        // Projectors: map each level to the coarsest spatial dims with
        // stride-2 convs; the coarsest level uses one stride-1 conv.
        for l in 1..=cfg.levels {
            let level_ch = cfg.base_channels << (l - 1);
            let steps = cfg.levels - l;
            if steps == 0 {
                b.push(
                    &format!("proj{l}.0.kernel"),
                    &[cp, level_ch, 3, 3, 3],
                    InitKind::HeNormal,
                );
                b.push(&format!("proj{l}.0.bias"), &[cp], InitKind::Zero);
            } else {
                let mut ch = level_ch;
                for s in 0..steps {
                    b.push(
                        &format!("proj{l}.{s}.kernel"),
                        &[cp, ch, 3, 3, 3],
                        InitKind::HeNormal,
                    );
                    b.push(&format!("proj{l}.{s}.bias"), &[cp], InitKind::Zero);
                    ch = cp;
                }
            }
        }
        // Decoder: per-level attention projections plus the token-state
        // update.
        for l in 1..=cfg.levels {
            b.push(
                &format!("dec{l}.wq"),
                &[cfg.query_channels(), hd],
                InitKind::Xavier,
            );
            b.push(&format!("dec{l}.wk"), &[cp + cd, hd], InitKind::Xavier);
            b.push(&format!("dec{l}.wv"), &[cp + cd, hd], InitKind::Xavier);
            b.push(&format!("dec{l}.wo"), &[hd, cd], InitKind::Xavier);
            b.push(&format!("dec{l}.ws"), &[cp + cd, cd], InitKind::Xavier);
        }
        // Zero-initialized head: training starts at the identity transform.
        let out_ch = if cfg.bayesian { 6 } else { 3 };
        b.push("head.w", &[cd, out_ch], InitKind::Zero);
        Ok(GridNet {
            pe: PosEncoder::new(cfg.pe_freqs),
            params: Parameters {
                specs: b.specs,
                data: b.data,
            },
            cfg,
            seed,
        })
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.specs.iter().position(|s| s.name == name)
    }

    /// Number of positional-encoding computations so far (cache misses).
    pub fn pe_computations(&self) -> usize {
        self.pe.computations.get()
    }

    /// Stack fixed and moving into a `[2, D, H, W]` input tensor.
    pub fn stack_pair(&self, fixed: &Volume, moving: &Volume) -> Result<ArrayD<F>> {
        if fixed.dims() != moving.dims() {
            return Err(Error::DimsMismatch {
                what: "network input pair".into(),
                lhs: fixed.dims(),
                rhs: moving.dims(),
            });
        }
        let [w, h, d] = fixed.dims();
        let div = 1 << self.cfg.levels;
        if w % div != 0 || h % div != 0 || d % div != 0 {
            return Err(Error::InvalidArg(format!(
                "input dims {:?} must be divisible by 2^levels = {div}",
                fixed.dims()
            )));
        }
        let mut arr = ArrayD::<F>::zeros(IxDyn(&[2, d, h, w]));
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    arr[[0, z, y, x]] = F::from(fixed.get(x, y, z)).unwrap();
                    arr[[1, z, y, x]] = F::from(moving.get(x, y, z)).unwrap();
                }
            }
        }
        Ok(arr)
    }

    /// Build the forward graph for one pair at one grid size.
    pub fn build_forward(
        &self,
        tape: &mut Tape<F>,
        input: ArrayD<F>,
        grid_dims: [usize; 3],
    ) -> Result<ForwardHandles> {
        for &g in &grid_dims {
            if g < 2 {
                return Err(Error::GridTooCoarse { got: g });
            }
        }
        let cfg = &self.cfg;
        let param_nodes: Vec<NodeId> = (0..self.params.specs.len())
            .map(|i| tape.input(self.params.tensor(i)))
            .collect();
        let by_name = |name: &str| -> NodeId {
            param_nodes[self
                .param_index(name)
                .unwrap_or_else(|| panic!("missing parameter {name}"))]
        };

        let x0 = tape.input(input);
        // Encoder.
        let mut features = Vec::with_capacity(cfg.levels);
        let mut x = x0;
        for l in 1..=cfg.levels {
            let c = tape.conv3(
                x,
                by_name(&format!("enc{l}.kernel")),
                by_name(&format!("enc{l}.bias")),
                2,
            )?;
            x = tape.relu(c);
            features.push(x);
        }
        // Projected token sequences, one per level, all at the coarsest
        // spatial dims.
        let cp = cfg.token_channels();
        let mut tokens = Vec::with_capacity(cfg.levels);
        for l in 1..=cfg.levels {
            let steps = cfg.levels - l;
            let mut p = features[l - 1];
            if steps == 0 {
                p = tape.conv3(
                    p,
                    by_name(&format!("proj{l}.0.kernel")),
                    by_name(&format!("proj{l}.0.bias")),
                    1,
                )?;
            } else {
                for s in 0..steps {
                    p = tape.conv3(
                        p,
                        by_name(&format!("proj{l}.{s}.kernel")),
                        by_name(&format!("proj{l}.{s}.bias")),
                        2,
                    )?;
                    if s + 1 < steps {
                        p = tape.relu(p);
                    }
                }
            }
            let shape = tape.shape(p).to_vec();
            let n_tokens: usize = shape[1..].iter().product();
            let flat = tape.reshape(p, &[cp, n_tokens])?;
            tokens.push(tape.transpose2(flat)?);
        }

        // Decoder: refine a token state bottom-up, reading the grid queries
        // against each level's (tokens ++ state) sequence.
        let n_tokens = tape.shape(tokens[cfg.levels - 1])[0];
        let queries = tape.input(self.pe.queries(grid_dims).as_ref().clone().into_dyn());
        let mut state = tape.input(ArrayD::zeros(IxDyn(&[n_tokens, cfg.decoder_channels])));
        let mut grid_state: Option<NodeId> = None;
        let mut attention = Vec::new();
        for l in (1..=cfg.levels).rev() {
            let kv = tape.concat_cols(tokens[l - 1], state)?;
            let (y, attn) = attention_block(
                tape,
                queries,
                kv,
                by_name(&format!("dec{l}.wq")),
                by_name(&format!("dec{l}.wk")),
                by_name(&format!("dec{l}.wv")),
                by_name(&format!("dec{l}.wo")),
                cfg.heads,
                cfg.head_dim,
            )?;
            attention.extend(attn);
            grid_state = Some(match grid_state {
                Some(z) => tape.add(z, y)?,
                None => y,
            });
            if l > 1 {
                let s = tape.matmul(kv, by_name(&format!("dec{l}.ws")))?;
                state = tape.relu(s);
            }
        }
        let out = tape.matmul(grid_state.expect("levels ≥ 1"), by_name("head.w"))?;
        let mu = tape.slice_cols(out, 0, 3)?;
        let eta = if cfg.bayesian {
            Some(tape.slice_cols(out, 3, 6)?)
        } else {
            None
        };
        Ok(ForwardHandles {
            params: param_nodes,
            mu,
            eta,
            attention,
        })
    }

    /// Predict a gridded field for a pair (inference).
    pub fn forward(
        &self,
        fixed: &Volume,
        moving: &Volume,
        grid_dims: [usize; 3],
    ) -> Result<GriddedField> {
        let input = self.stack_pair(fixed, moving)?;
        let mut tape = Tape::new();
        let handles = self.build_forward(&mut tape, input, grid_dims)?;
        let grid = ControlGrid::new(fixed.dims(), grid_dims)?;
        let mu = node_to_gridvec(&tape, handles.mu, grid_dims);
        let eta = handles.eta.map(|id| node_to_gridvec(&tape, id, grid_dims));
        GriddedField::new(grid, mu, eta)
    }
}

/// Copy a `[G, 3]` node value into grid-tensor layout.
pub fn node_to_gridvec<F: TapeFloat>(tape: &Tape<F>, id: NodeId, grid_dims: [usize; 3]) -> GridVec3 {
    let value = tape.value(id);
    let g: usize = grid_dims.iter().product();
    let mut out = GridVec3::zeros(grid_dims);
    for gi in 0..g {
        for c in 0..3 {
            out.comps[c][gi] = value[[gi, c]].to_f64().unwrap();
        }
    }
    out
}

/// Pack per-grid-point gradients into `[G, 3]` seed layout.
pub fn gridvec_to_seed<F: TapeFloat>(grad: &GridVec3) -> ArrayD<F> {
    let g = grad.num_points();
    let mut out = ArrayD::<F>::zeros(IxDyn(&[g, 3]));
    for gi in 0..g {
        for c in 0..3 {
            out[[gi, c]] = F::from(grad.comps[c][gi]).unwrap();
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    config: NetConfig,
    seed: u64,
    params: Vec<ParamSpec>,
}

/// Write `<stem>.json` (manifest) and `<stem>.bin` (f32 parameters in
/// manifest order).
pub fn save_checkpoint<F: TapeFloat>(net: &GridNet<F>, path: impl AsRef<Path>) -> Result<()> {
    let stem = path.as_ref().with_extension("");
    let manifest = CheckpointManifest {
        config: net.cfg.clone(),
        seed: net.seed,
        params: net.params.specs.clone(),
    };
    let jp = stem.with_extension("json");
    fs::write(
        &jp,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| Error::io(&jp, e))?;
    let bp = stem.with_extension("bin");
    fs::write(&bp, net.params.as_f32_bytes()).map_err(|e| Error::io(&bp, e))?;
    Ok(())
}

pub fn load_checkpoint<F: TapeFloat>(path: impl AsRef<Path>) -> Result<GridNet<F>> {
    let stem = path.as_ref().with_extension("");
    let jp = stem.with_extension("json");
    let text = fs::read_to_string(&jp).map_err(|e| Error::io(&jp, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::Header {
        path: jp.clone(),
        reason: e.to_string(),
    })?;
    let bp = stem.with_extension("bin");
    let bytes = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    let expected: usize = manifest.params.iter().map(|s| s.len()).sum();
    if bytes.len() != expected * 4 {
        return Err(Error::PayloadSize {
            expected,
            actual: bytes.len() / 4,
        });
    }
    let data: Vec<F> = bytes
        .chunks_exact(4)
        .map(|c| F::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])).unwrap())
        .collect();
    Ok(GridNet {
        pe: PosEncoder::new(manifest.config.pe_freqs),
        params: Parameters {
            specs: manifest.params,
            data,
        },
        cfg: manifest.config,
        seed: manifest.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::make_phantom;
    use ndarray::arr2;
    use rand::Rng;

    fn toy_net(bayesian: bool) -> GridNet<f64> {
        GridNet::new(
            NetConfig {
                base_channels: 4,
                bayesian,
                ..Default::default()
            },
            7,
        )
        .unwrap()
    }

    fn toy_pair(dims: [usize; 3]) -> (Volume, Volume) {
        let (a, _, _) = make_phantom(dims, 1).unwrap();
        let (b, _, _) = make_phantom(dims, 2).unwrap();
        (a, b)
    }

    #[test]
    fn forward_shapes_follow_grid() {
        let net = toy_net(true);
        let (fixed, moving) = toy_pair([16, 16, 16]);
        let f = net.forward(&fixed, &moving, [5, 5, 5]).unwrap();
        assert_eq!(f.mu.dims, [5, 5, 5]);
        assert!(f.is_bayesian());
        let f = net.forward(&fixed, &moving, [10, 10, 10]).unwrap();
        assert_eq!(f.mu.dims, [10, 10, 10]);
    }

    #[test]
    fn zero_head_starts_at_identity() {
        let net = toy_net(true);
        let (fixed, moving) = toy_pair([16, 16, 16]);
        let f = net.forward(&fixed, &moving, [4, 4, 4]).unwrap();
        assert!(f.mu.comps.iter().flatten().all(|&v| v == 0.0));
        let s2 = f.sigma2().unwrap();
        for v in s2.comps.iter().flatten() {
            assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn parameters_unchanged_by_grid_size() {
        let net = toy_net(true);
        let (fixed, moving) = toy_pair([16, 16, 16]);
        let before = net.params.as_f32_bytes();
        for g in [4, 5, 8, 10] {
            net.forward(&fixed, &moving, [g, g, g]).unwrap();
        }
        assert_eq!(before, net.params.as_f32_bytes());
    }

    #[test]
    fn indivisible_dims_rejected() {
        let net = toy_net(false);
        let (fixed, moving) = toy_pair([20, 16, 16]);
        assert!(net.forward(&fixed, &moving, [4, 4, 4]).is_err());
        let (fixed, moving) = toy_pair([16, 16, 16]);
        assert!(net.forward(&fixed, &moving, [1, 4, 4]).is_err());
    }

    #[test]
    fn pe_cache_reuses_encodings() {
        let net = toy_net(false);
        let (fixed, moving) = toy_pair([16, 16, 16]);
        assert_eq!(net.pe_computations(), 0);
        net.forward(&fixed, &moving, [5, 5, 5]).unwrap();
        assert_eq!(net.pe_computations(), 1);
        net.forward(&fixed, &moving, [5, 5, 5]).unwrap();
        assert_eq!(net.pe_computations(), 1);
        net.forward(&fixed, &moving, [8, 8, 8]).unwrap();
        assert_eq!(net.pe_computations(), 2);
    }

    #[test]
    fn pe_values_bounded_and_deterministic() {
        let pe = PosEncoder::<f64>::new(8);
        let a = pe.queries([5, 6, 7]);
        let b = pe.queries([5, 6, 7]);
        assert!(Arc::ptr_eq(&a, &b));
        assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(a.ncols(), 2 * 48);
    }

    #[test]
    fn attention_uniform_when_keys_are_constant() {
        // Zero W_K makes every logit equal: each attention row is uniform
        // and the output is the mean value row, per head.
        let heads = 2;
        let d = 4;
        let n_p = 5;
        let g = 3;
        let c_q = 6;
        let c_t = 7;
        let mut rng = crate::rng::stream(3, "gridnet.attn", 0);
        let rnd = |r: usize, c: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
        };
        let w = AttentionWeights {
            wq: rnd(c_q, heads * d, &mut rng),
            wk: Array2::zeros((c_t, heads * d)),
            wv: rnd(c_t, heads * d, &mut rng),
            wo: Array2::eye(heads * d),
            heads,
            head_dim: d,
        };
        let queries = rnd(g, c_q, &mut rng);
        let tokens = rnd(n_p, c_t, &mut rng);
        let out = cross_attention(&queries, &tokens, &w).unwrap();
        let values = tokens.dot(&w.wv);
        for h in 0..heads {
            for dd in 0..d {
                let col = h * d + dd;
                let mean: f64 = (0..n_p).map(|t| values[[t, col]]).sum::<f64>() / n_p as f64;
                for gi in 0..g {
                    assert!((out[[gi, col]] - mean).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn attention_saturates_on_dominant_logit() {
        // One token's logit lands ≥ 30 above the rest after scaling; its
        // weight takes all the mass.
        let d = 4;
        let w = AttentionWeights::<f64> {
            wq: Array2::eye(d),
            wk: Array2::eye(d),
            wv: Array2::eye(d),
            wo: Array2::eye(d),
            heads: 1,
            head_dim: d,
        };
        let queries = arr2(&[[10.0, 0.0, 0.0, 0.0]]);
        let mut tokens = Array2::zeros((4, d));
        tokens[[2, 0]] = 7.0; // logit 70/sqrt(4) = 35; others 0
        tokens[[2, 1]] = 1.0;
        let out = cross_attention(&queries, &tokens, &w).unwrap();
        assert!((out[[0, 0]] - 7.0).abs() < 1e-9);
        assert!((out[[0, 1]] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn attention_matches_dense_matrix_oracle() {
        // Independent evaluation with plain ndarray ops.
        let (g, n_p, heads, d) = (3, 5, 2, 4);
        let (c_q, c_t) = (6, 7);
        let mut rng = crate::rng::stream(9, "gridnet.attnoracle", 0);
        let rnd = |r: usize, c: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
        };
        let w = AttentionWeights {
            wq: rnd(c_q, heads * d, &mut rng),
            wk: rnd(c_t, heads * d, &mut rng),
            wv: rnd(c_t, heads * d, &mut rng),
            wo: rnd(heads * d, 5, &mut rng),
            heads,
            head_dim: d,
        };
        let queries = rnd(g, c_q, &mut rng);
        let tokens = rnd(n_p, c_t, &mut rng);
        let got = cross_attention(&queries, &tokens, &w).unwrap();

        let q = queries.dot(&w.wq);
        let k = tokens.dot(&w.wk);
        let v = tokens.dot(&w.wv);
        let mut concat = Array2::<f64>::zeros((g, heads * d));
        for h in 0..heads {
            let cols = h * d..(h + 1) * d;
            let qh = q.slice(ndarray::s![.., cols.clone()]);
            let kh = k.slice(ndarray::s![.., cols.clone()]);
            let vh = v.slice(ndarray::s![.., cols.clone()]);
            let mut logits = qh.dot(&kh.t());
            logits.mapv_inplace(|x| x / (d as f64).sqrt());
            for mut row in logits.rows_mut() {
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|x| (x - mx).exp());
                let s = row.sum();
                row.mapv_inplace(|x| x / s);
                assert!((row.sum() - 1.0).abs() < 1e-6);
            }
            let yh = logits.dot(&vh);
            concat.slice_mut(ndarray::s![.., cols]).assign(&yh);
        }
        let want = concat.dot(&w.wo);
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn attention_rows_sum_to_one_in_forward() {
        let net = toy_net(false);
        let (fixed, moving) = toy_pair([16, 16, 16]);
        let input = net.stack_pair(&fixed, &moving).unwrap();
        let mut tape = Tape::new();
        let handles = net.build_forward(&mut tape, input, [3, 4, 5]).unwrap();
        assert_eq!(handles.attention.len(), net.cfg.levels * net.cfg.heads);
        for attn in handles.attention {
            let a = tape.value(attn);
            assert_eq!(a.shape()[0], 3 * 4 * 5);
            for row in a.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let net = toy_net(true);
        let path = dir.path().join("ckpt");
        save_checkpoint(&net, &path).unwrap();
        let loaded: GridNet<f64> = load_checkpoint(&path).unwrap();
        assert_eq!(net.cfg, loaded.cfg);
        assert_eq!(net.params.as_f32_bytes(), loaded.params.as_f32_bytes());
        // The loaded net computes identical outputs.
        let (fixed, moving) = toy_pair([16, 16, 16]);
        let a = net.forward(&fixed, &moving, [5, 5, 5]).unwrap();
        let b = loaded.forward(&fixed, &moving, [5, 5, 5]).unwrap();
        assert_eq!(a.mu, b.mu);
    }
}
