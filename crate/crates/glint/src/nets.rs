//! Field networks: dense MLPs with positional encodings, one shared parameter
//! store per run, and the full set of heads the pipeline trains (SDF, colors,
//! visibility, indirect lobes, specular albedo, BRDF auto-encoder, sharpness).
//!
//! Forward passes run on the tape.  Spatial input gradients (normals, eikonal
//! terms) are emitted as explicit first-order op chains so plain reverse-mode
//! differentiates through them.

use crate::autodiff::{NodeId, PosEnc, Real, Tape, Tensor};
use crate::err::{Error, Result};
use crate::rng::{normal, stream, tag};
use rand::Rng;
use std::collections::HashMap;

pub const LATENT_DIM: usize = 32;
pub const INDIRECT_LOBES: usize = 24;
pub const SDF_SOFTPLUS_BETA: f64 = 100.0;
pub const KAPPA_INIT: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Act {
    /// Smooth trunk activation (softplus with slope `SDF_SOFTPLUS_BETA`);
    /// C¹ everywhere so eikonal training sees continuous second derivatives.
    Softplus,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutTransform {
    None,
    Sigmoid,
    Clamp01,
}

pub type ParamId = usize;

/// Named flat parameter arrays for one run; every network indexes into this.
#[derive(Clone)]
pub struct ParamStore<T: Real> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> ParamStore<T> {
        ParamStore { names: Vec::new(), tensors: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: &str, t: Tensor<T>) -> ParamId {
        assert!(!self.by_name.contains_key(name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.names.push(name.to_string());
        self.tensors.push(t);
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id]
    }

    pub fn set(&mut self, id: ParamId, t: Tensor<T>) {
        assert_eq!(self.tensors[id].shape(), t.shape(), "parameter shape change");
        self.tensors[id] = t;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> std::ops::Range<ParamId> {
        0..self.tensors.len()
    }

    pub fn total_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Fault with the parameter name if any value is non-finite.
    pub fn check_finite(&self, ids: &[ParamId]) -> Result<()> {
        for &id in ids {
            if self.tensors[id].has_non_finite() {
                return Err(Error::NonFinite {
                    what: self.names[id].clone(),
                    detail: "non-finite parameter value".into(),
                });
            }
        }
        Ok(())
    }

    /// Push every parameter onto a tape; `trainable` decides which enter as
    /// gradient-carrying leaves (frozen nets become constants, and backward
    /// skips their subtrees entirely).
    pub fn nodes_on(
        &self,
        tp: &mut Tape<T>,
        trainable: impl Fn(&str) -> bool,
    ) -> Vec<NodeId> {
        self.tensors
            .iter()
            .zip(&self.names)
            .map(|(t, n)| {
                if trainable(n) {
                    tp.param(t.clone())
                } else {
                    tp.constant(t.clone())
                }
            })
            .collect()
    }
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// One raw input group: `dim` columns, encoded with `pe_levels` frequencies
/// (0 = passed through raw).
#[derive(Clone, Copy, Debug)]
pub struct InputSpec {
    pub dim: usize,
    pub pe_levels: usize,
}

impl InputSpec {
    pub fn raw(dim: usize) -> InputSpec {
        InputSpec { dim, pe_levels: 0 }
    }

    pub fn pe(dim: usize, levels: usize) -> InputSpec {
        InputSpec { dim, pe_levels: levels }
    }

    fn enc(&self) -> PosEnc {
        if self.pe_levels == 0 {
            PosEnc::identity(self.dim)
        } else {
            PosEnc::new(self.dim, self.pe_levels)
        }
    }
}

#[derive(Clone, Debug)]
pub struct MlpCfg {
    pub name: String,
    pub inputs: Vec<InputSpec>,
    pub hidden: usize,
    /// Number of hidden layers; one more linear layer maps to `out`.
    pub depth: usize,
    /// Hidden layer whose input is the concatenation [h, encoded inputs].
    pub skip_at: Option<usize>,
    pub out: usize,
    pub act: Act,
    pub transform: OutTransform,
    /// SDF-style initialization to an approximate sphere of this radius.
    pub geometric: Option<f64>,
}

/// An MLP's structure plus its parameter ids in the store.
#[derive(Clone)]
pub struct Mlp {
    pub cfg: MlpCfg,
    encs: Vec<PosEnc>,
    weights: Vec<ParamId>,
    biases: Vec<ParamId>,
}

/// Input to a taped forward: a constant tensor (encoded outside the tape) or
/// an existing node (encoded with a differentiable op when PE applies).
pub enum TapeIn<T: Real> {
    Raw(Tensor<T>),
    Node(NodeId),
}

/// Forward result; keeps the pieces the input-gradient chain needs.
pub struct MlpTrace<T: Real> {
    pub out: NodeId,
    pres: Vec<NodeId>,
    raw0: Option<Tensor<T>>,
    rows: usize,
}

impl Mlp {
    pub fn build<T: Real>(cfg: MlpCfg, store: &mut ParamStore<T>, seed: u64) -> Mlp {
        let encs: Vec<PosEnc> = cfg.inputs.iter().map(|i| i.enc()).collect();
        let enc_total: usize = encs.iter().map(|e| e.encoded_dim()).sum();
        let raw_total: usize = cfg.inputs.iter().map(|i| i.dim).sum();
        let mut rng = stream(seed, &[tag("init"), tag(&cfg.name)]);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..=cfg.depth {
            let (fan_in, fan_out) = layer_dims(&cfg, enc_total, l);
            let mut w = Tensor::<T>::zeros(fan_out, fan_in);
            let mut b = Tensor::<T>::zeros(1, fan_out);
            if let Some(radius) = cfg.geometric {
                geometric_init_layer(
                    &cfg, enc_total, raw_total, l, &mut w, &mut b, radius, &mut rng,
                );
            } else {
                let a = 1.0 / (fan_in as f64).sqrt();
                for v in w.data_mut() {
                    *v = T::of_f64(rng.gen_range(-a..a));
                }
                for v in b.data_mut() {
                    *v = T::of_f64(rng.gen_range(-a..a));
                }
            }
            weights.push(store.add(&format!("{}.l{l}.w", cfg.name), w));
            biases.push(store.add(&format!("{}.l{l}.b", cfg.name), b));
        }
        Mlp { cfg, encs, weights, biases }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.weights.iter().chain(&self.biases).copied().collect()
    }

    pub fn name_prefix(&self) -> String {
        format!("{}.", self.cfg.name)
    }

    /// Encoded input width (what layer 0 consumes).
    pub fn enc_dim(&self) -> usize {
        self.encs.iter().map(|e| e.encoded_dim()).sum()
    }

    pub fn forward<T: Real>(
        &self,
        tp: &mut Tape<T>,
        params: &[NodeId],
        inputs: &[TapeIn<T>],
    ) -> MlpTrace<T> {
        assert_eq!(inputs.len(), self.cfg.inputs.len(), "{}: input group count", self.cfg.name);
        let mut rows = None;
        let mut enc_nodes = Vec::with_capacity(inputs.len());
        let mut raw0 = None;
        for (gi, (inp, enc)) in inputs.iter().zip(&self.encs).enumerate() {
            let node = match inp {
                TapeIn::Raw(t) => {
                    assert_eq!(t.cols(), enc.dim, "{}: group {gi} dim", self.cfg.name);
                    if gi == 0 {
                        raw0 = Some(t.clone());
                    }
                    let e = enc.encode(t);
                    tp.constant(e)
                }
                TapeIn::Node(id) => {
                    if enc.levels == 0 {
                        *id
                    } else {
                        tp.pos_encode(*id, *enc)
                    }
                }
            };
            let r = tp.val(node).rows();
            assert!(rows.is_none() || rows == Some(r), "{}: row mismatch", self.cfg.name);
            rows = Some(r);
            enc_nodes.push(node);
        }
        let enc_cat =
            if enc_nodes.len() == 1 { enc_nodes[0] } else { tp.concat_cols(&enc_nodes) };

        let mut h = enc_cat;
        let mut pres = Vec::with_capacity(self.cfg.depth);
        for l in 0..self.cfg.depth {
            if self.cfg.skip_at == Some(l) && l > 0 {
                h = tp.concat_cols(&[h, enc_cat]);
            }
            let z = tp.matmul_bt(h, params[self.weights[l]]);
            let pre = tp.add_row(z, params[self.biases[l]]);
            pres.push(pre);
            h = match self.cfg.act {
                Act::Softplus => tp.softplus(pre, SDF_SOFTPLUS_BETA),
                Act::Relu => tp.relu(pre),
            };
        }
        let z = tp.matmul_bt(h, params[self.weights[self.cfg.depth]]);
        let mut out = tp.add_row(z, params[self.biases[self.cfg.depth]]);
        out = match self.cfg.transform {
            OutTransform::None => out,
            OutTransform::Sigmoid => tp.sigmoid(out),
            OutTransform::Clamp01 => tp.clamp(out, 0.0, 1.0),
        };
        MlpTrace { out, pres, raw0, rows: rows.unwrap_or(0) }
    }

    /// Emit ∂out[head]/∂x as tape ops (x = input group 0, which must have been
    /// a `Raw` constant).  The chain is built from first-order ops over the
    /// stored pre-activations, so a later backward pass differentiates the
    /// input gradient with respect to every weight.
    pub fn emit_input_grad<T: Real>(
        &self,
        tp: &mut Tape<T>,
        params: &[NodeId],
        trace: &MlpTrace<T>,
        head: usize,
    ) -> Result<NodeId> {
        if head >= self.cfg.out {
            return Err(Error::contract("grad_input", "head index out of range (non-scalar head)"));
        }
        if self.cfg.transform != OutTransform::None {
            return Err(Error::contract("grad_input", "head must be untransformed"));
        }
        if self.cfg.inputs.len() != 1 {
            return Err(Error::contract("grad_input", "single input group required"));
        }
        let raw = trace
            .raw0
            .clone()
            .ok_or_else(|| Error::contract("grad_input", "input group 0 must be a constant"))?;
        let enc = self.encs[0];
        let hidden = self.cfg.hidden;
        let enc_dim = enc.encoded_dim();

        // seed: ∂out_head/∂h_last = row `head` of the output weight matrix
        let mut one_hot = Tensor::<T>::zeros(1, self.cfg.out);
        one_hot.set(0, head, T::one());
        let e = tp.constant(one_hot);
        let w_out = params[self.weights[self.cfg.depth]];
        let seed_row = tp.matmul(e, w_out);
        let mut gup = tp.repeat_row(seed_row, trace.rows);

        let mut genc: Option<NodeId> = None;
        for l in (0..self.cfg.depth).rev() {
            let actp = match self.cfg.act {
                Act::Softplus => {
                    let s = tp.scale_const(trace.pres[l], SDF_SOFTPLUS_BETA);
                    tp.sigmoid(s)
                }
                Act::Relu => tp.step_pos(trace.pres[l]),
            };
            let gpre = tp.mul(gup, actp);
            let gin = tp.matmul(gpre, params[self.weights[l]]);
            if self.cfg.skip_at == Some(l) && l > 0 {
                let gh = tp.slice_cols(gin, 0, hidden);
                let ge = tp.slice_cols(gin, hidden, enc_dim);
                genc = Some(match genc {
                    Some(p) => tp.add(p, ge),
                    None => ge,
                });
                gup = gh;
            } else {
                gup = gin;
            }
        }
        let total = match genc {
            Some(p) => tp.add(p, gup),
            None => gup,
        };
        Ok(tp.pe_backward(total, raw, enc))
    }

    /// Inference forward (no gradients): runs on a throwaway tape.  Faults
    /// with the parameter name if any parameter is non-finite.
    pub fn eval<T: Real>(&self, store: &ParamStore<T>, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        store.check_finite(&self.param_ids())?;
        let mut tp = Tape::new();
        let params = store.nodes_on(&mut tp, |_| false);
        let ins: Vec<TapeIn<T>> = inputs.iter().map(|t| TapeIn::Raw(t.clone())).collect();
        let trace = self.forward(&mut tp, &params, &ins);
        Ok(tp.val(trace.out).clone())
    }

    /// Inference forward plus ∂out[0]/∂x for single-input networks.
    pub fn eval_with_grad<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        store.check_finite(&self.param_ids())?;
        let mut tp = Tape::new();
        let params = store.nodes_on(&mut tp, |_| false);
        let trace = self.forward(&mut tp, &params, &[TapeIn::Raw(x.clone())]);
        let g = self.emit_input_grad(&mut tp, &params, &trace, 0)?;
        Ok((tp.val(trace.out).clone(), tp.val(g).clone()))
    }
}

fn layer_dims(cfg: &MlpCfg, enc_total: usize, l: usize) -> (usize, usize) {
    if l == cfg.depth {
        (cfg.hidden, cfg.out)
    } else if l == 0 {
        (enc_total, cfg.hidden)
    } else if cfg.skip_at == Some(l) {
        (cfg.hidden + enc_total, cfg.hidden)
    } else {
        (cfg.hidden, cfg.hidden)
    }
}

/// Sphere-like start for SDF trunks: s(x) ≈ ‖x‖ − radius at initialization.
/// Raw coordinate columns get variance-preserving noise, sinusoid columns
/// start silent, and the output layer projects with a constant positive mean
/// against a −radius bias.
fn geometric_init_layer<T: Real>(
    cfg: &MlpCfg,
    enc_total: usize,
    raw_total: usize,
    l: usize,
    w: &mut Tensor<T>,
    b: &mut Tensor<T>,
    radius: f64,
    rng: &mut impl Rng,
) {
    let (fan_in, fan_out) = layer_dims(cfg, enc_total, l);
    if l == cfg.depth {
        let mean = std::f64::consts::PI.sqrt() / (fan_in as f64).sqrt();
        for v in w.data_mut() {
            *v = T::of_f64(mean + 1e-4 * normal(rng));
        }
        for v in b.data_mut() {
            *v = T::of_f64(-radius);
        }
        return;
    }
    let std = (2.0 / fan_out as f64).sqrt();
    for v in w.data_mut() {
        *v = T::of_f64(std * normal(rng));
    }
    if l == 0 {
        // silence every sinusoid column; keep raw coordinates
        for r in 0..fan_out {
            for c in raw_total..fan_in {
                w.set(r, c, T::zero());
            }
        }
    } else if cfg.skip_at == Some(l) {
        // concat layout is [h, raw, sinusoids]; silence the sinusoids
        for r in 0..fan_out {
            for c in cfg.hidden + raw_total..fan_in {
                w.set(r, c, T::zero());
            }
        }
    }
}

/// Widths for one run; `paper()` matches the published shapes, `desk()` is the
/// reduced profile used for CPU-scale training runs.
#[derive(Clone, Copy, Debug)]
pub struct ZooCfg {
    pub width: usize,
    pub feat: usize,
    pub dec_width: usize,
}

impl ZooCfg {
    pub fn paper() -> ZooCfg {
        ZooCfg { width: 256, feat: 256, dec_width: 128 }
    }

    pub fn desk() -> ZooCfg {
        ZooCfg { width: 32, feat: 32, dec_width: 32 }
    }
}

/// Every network the pipeline trains, plus the NeuS sharpness scalar.
#[derive(Clone)]
pub struct Zoo<T: Real> {
    pub store: ParamStore<T>,
    pub cfg: ZooCfg,
    /// x → (s, feature)
    pub sdf: Mlp,
    /// (x, n, d, f) → tonemapped RGB in (0,1)
    pub col: Mlp,
    /// (x, n, f) → linear diffuse radiance (raw head)
    pub dif: Mlp,
    /// (x, ω_r, n, f) → linear specular radiance (raw head)
    pub spc: Mlp,
    /// (x, ω_i) → visibility in (0,1)
    pub vis: Mlp,
    /// x → 24 SG lobes (raw 7-tuples, decoded at use sites)
    pub ind: Mlp,
    /// (x, ω_r) → specular albedo scale in (0,1)
    pub salb: Mlp,
    /// x → latent z
    pub benc: Mlp,
    /// z → (albedo rgb, roughness) in (0,1)
    pub bdec: Mlp,
    /// log of the NeuS sharpness; effective κ = exp(·) > 0
    pub log_kappa: ParamId,
}

impl<T: Real> Zoo<T> {
    pub fn build(cfg: ZooCfg, seed: u64) -> Zoo<T> {
        let mut store = ParamStore::new();
        let w = cfg.width;
        let f = cfg.feat;
        let sdf = Mlp::build(
            MlpCfg {
                name: "sdf".into(),
                inputs: vec![InputSpec::pe(3, 6)],
                hidden: w,
                depth: 8,
                skip_at: Some(4),
                out: 1 + f,
                act: Act::Softplus,
                transform: OutTransform::None,
                geometric: Some(0.5),
            },
            &mut store,
            seed,
        );
        let col = Mlp::build(
            MlpCfg {
                name: "col".into(),
                inputs: vec![
                    InputSpec::raw(3),
                    InputSpec::raw(3),
                    InputSpec::pe(3, 4),
                    InputSpec::raw(f),
                ],
                hidden: w,
                depth: 4,
                skip_at: None,
                out: 3,
                act: Act::Relu,
                transform: OutTransform::Sigmoid,
                geometric: None,
            },
            &mut store,
            seed,
        );
        let dif = Mlp::build(
            MlpCfg {
                name: "dif".into(),
                inputs: vec![InputSpec::raw(3), InputSpec::pe(3, 4), InputSpec::raw(f)],
                hidden: w,
                depth: 4,
                skip_at: None,
                out: 3,
                act: Act::Relu,
                transform: OutTransform::None,
                geometric: None,
            },
            &mut store,
            seed,
        );
        let spc = Mlp::build(
            MlpCfg {
                name: "spc".into(),
                inputs: vec![
                    InputSpec::raw(3),
                    InputSpec::pe(3, 4),
                    InputSpec::raw(3),
                    InputSpec::raw(f),
                ],
                hidden: w,
                depth: 4,
                skip_at: None,
                out: 3,
                act: Act::Relu,
                transform: OutTransform::None,
                geometric: None,
            },
            &mut store,
            seed,
        );
        let vis = Mlp::build(
            MlpCfg {
                name: "vis".into(),
                inputs: vec![InputSpec::pe(3, 10), InputSpec::pe(3, 4)],
                hidden: w,
                depth: 4,
                skip_at: None,
                out: 1,
                act: Act::Relu,
                transform: OutTransform::Sigmoid,
                geometric: None,
            },
            &mut store,
            seed,
        );
        let ind = Mlp::build(
            MlpCfg {
                name: "ind".into(),
                inputs: vec![InputSpec::pe(3, 6)],
                hidden: w,
                depth: 4,
                skip_at: None,
                out: INDIRECT_LOBES * 7,
                act: Act::Relu,
                transform: OutTransform::None,
                geometric: None,
            },
            &mut store,
            seed,
        );
        let salb = Mlp::build(
            MlpCfg {
                name: "salb".into(),
                inputs: vec![InputSpec::pe(3, 10), InputSpec::pe(3, 4)],
                hidden: w,
                depth: 4,
                skip_at: None,
                out: 1,
                act: Act::Relu,
                transform: OutTransform::Sigmoid,
                geometric: None,
            },
            &mut store,
            seed,
        );
        let benc = Mlp::build(
            MlpCfg {
                name: "benc".into(),
                inputs: vec![InputSpec::pe(3, 10)],
                hidden: w,
                depth: 4,
                skip_at: None,
                out: LATENT_DIM,
                act: Act::Relu,
                transform: OutTransform::None,
                geometric: None,
            },
            &mut store,
            seed,
        );
        let bdec = Mlp::build(
            MlpCfg {
                name: "bdec".into(),
                inputs: vec![InputSpec::raw(LATENT_DIM)],
                hidden: cfg.dec_width,
                depth: 2,
                skip_at: None,
                out: 4,
                act: Act::Relu,
                transform: OutTransform::Sigmoid,
                geometric: None,
            },
            &mut store,
            seed,
        );
        let log_kappa = store.add("kappa.log", Tensor::scalar(T::of_f64(KAPPA_INIT.ln())));
        Zoo { store, cfg, sdf, col, dif, spc, vis, ind, salb, benc, bdec, log_kappa }
    }

    /// SDF value, feature, and spatial gradient at `x` (inference mode).
    pub fn sdf_eval(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let (out, g) = self.sdf.eval_with_grad(&self.store, x)?;
        let n = x.rows();
        let f = self.cfg.feat;
        let mut s = Tensor::zeros(n, 1);
        let mut feat = Tensor::zeros(n, f);
        {
            let sd = s.data_mut();
            for r in 0..n {
                sd[r] = out.get(r, 0);
            }
        }
        {
            let fd = feat.data_mut();
            for r in 0..n {
                fd[r * f..(r + 1) * f].copy_from_slice(&out.row(r)[1..1 + f]);
            }
        }
        Ok((s, feat, g))
    }

    /// SDF value only (mesh extraction, tracing).
    pub fn sdf_value(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.sdf.eval(&self.store, &[x.clone()])?;
        let n = x.rows();
        let mut s = Tensor::zeros(n, 1);
        let sd = s.data_mut();
        for r in 0..n {
            sd[r] = out.get(r, 0);
        }
        Ok(s)
    }

    pub fn kappa(&self) -> f64 {
        self.store.tensor(self.log_kappa).get(0, 0).as_f64().exp()
    }
}
