//! Complex graph layers: heterogeneous attention, homogeneous attention,
//! fully connected blocks and complex batch normalization.

use std::cell::RefCell;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{CTensor, Tape, Var, LEAKY_SLOPE};
use crate::{Error, Result, C64};

const CKPT_MAGIC: &[u8; 8] = b"PASGNNPR";
const CKPT_VERSION: u32 = 1;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named complex arrays in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<CTensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: CTensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &CTensor {
        &self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: CTensor) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::Shape(format!(
                "{}: {:?} vs {:?}",
                self.names[id.0],
                value.shape(),
                self.values[id.0].shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn values(&self) -> &[CTensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [CTensor] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &CTensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Number of complex scalars.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(CTensor::len).sum()
    }

    /// Overwrites every entry from `arrays`, which must match names and shapes exactly.
    pub fn load_from(&mut self, arrays: &[(String, CTensor)]) -> Result<()> {
        let mut seen = 0;
        for (name, value) in arrays {
            if let Some(id) = self.id(name) {
                self.set(id, value.clone())?;
                seen += 1;
            }
        }
        if seen != self.len() {
            return Err(Error::Format(format!(
                "checkpoint supplies {seen} of {} arrays",
                self.len()
            )));
        }
        Ok(())
    }
}

/// Complex Kaiming normal draw: real and imaginary parts i.i.d. `N(0, 1/(2 fan_in))`.
pub fn kaiming<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> CTensor {
    let sd = (1.0 / (2.0 * fan_in.max(1) as f64)).sqrt();
    let normal = Normal::new(0.0, sd).expect("finite positive deviation");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| C64::new(normal.sample(rng), normal.sample(rng)))
        .collect();
    CTensor::new(shape, data).expect("length matches shape")
}

/// Parameters bound to a tape for one forward pass, plus BN buffers.
pub struct Ctx<'a, 't> {
    vars: Vec<Var<'t>>,
    buffers: &'a ParamStore,
    pub train: bool,
    updates: RefCell<Vec<(ParamId, CTensor)>>,
}

impl<'a, 't> Ctx<'a, 't> {
    /// Registers every parameter as a learnable leaf.
    pub fn bind(tape: &'t Tape, params: &ParamStore, buffers: &'a ParamStore, train: bool) -> Self {
        let vars = params.values().iter().map(|v| tape.param(v.clone())).collect();
        Self::from_vars(vars, buffers, train)
    }

    /// Registers every parameter as a constant.
    pub fn frozen(tape: &'t Tape, params: &ParamStore, buffers: &'a ParamStore, train: bool) -> Self {
        let vars = params.values().iter().map(|v| tape.constant(v.clone())).collect();
        Self::from_vars(vars, buffers, train)
    }

    pub fn from_vars(vars: Vec<Var<'t>>, buffers: &'a ParamStore, train: bool) -> Self {
        Self {
            vars,
            buffers,
            train,
            updates: RefCell::new(Vec::new()),
        }
    }

    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    pub fn buffer(&self, id: ParamId) -> &CTensor {
        self.buffers.get(id)
    }

    /// Running-statistic updates produced by train-mode batch norms.
    pub fn take_updates(&self) -> Vec<(ParamId, CTensor)> {
        std::mem::take(&mut *self.updates.borrow_mut())
    }
}

/// Which parts of a graph layer are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerFlags {
    pub message_passing: bool,
    pub residual: bool,
}

impl Default for LayerFlags {
    fn default() -> Self {
        Self {
            message_passing: true,
            residual: true,
        }
    }
}

fn check_cols(what: &str, x: &Var<'_>, cols: usize) -> Result<()> {
    let s = x.shape();
    if s.len() != 2 || s[1] != cols {
        return Err(Error::Shape(format!("{what}: features {s:?}, expected (rows, {cols})")));
    }
    Ok(())
}

/// Per-head attention logits `Re(a_self . h_i + a_nbr . h_j)`, leaky-rectified.
///
/// `hs` is `(T*Ms, S)`, `hn` is `(T*Mn, S)`; returns `(T, Ms, Mn)` for head `d`.
fn head_logits<'t>(
    hs: Var<'t>,
    hn: Var<'t>,
    a_self: Var<'t>,
    a_nbr: Var<'t>,
    t: usize,
    heads: usize,
    d: usize,
) -> Result<Var<'t>> {
    let s = hs.value().last_dim();
    let w = s / heads;
    let ms = hs.value().len() / s / t;
    let mn = hn.value().len() / s / t;
    let head_score = |h: Var<'t>, a: Var<'t>, m: usize| -> Result<Var<'t>> {
        h.slice_last(d * w, w)?.matmul(a_head(a, s, d, w)?)?.reshape(&[t, m])
    };
    let src = head_score(hs, a_self, ms)?;
    let dst = head_score(hn, a_nbr, mn)?;
    Ok(src.pair_add(dst)?.re().leaky_relu_re(LEAKY_SLOPE))
}

/// Slice of an `(S, 1)` attention vector belonging to head `d`, as `(w, 1)`.
fn a_head<'t>(a: Var<'t>, s: usize, d: usize, w: usize) -> Result<Var<'t>> {
    a.reshape(&[1, s])?.slice_last(d * w, w)?.reshape(&[w, 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeType {
    Bs,
    Ue,
    Ris,
}

impl NodeType {
    pub const ALL: [NodeType; 3] = [NodeType::Bs, NodeType::Ue, NodeType::Ris];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn tag(self) -> &'static str {
        match self {
            NodeType::Bs => "bs",
            NodeType::Ue => "ue",
            NodeType::Ris => "ris",
        }
    }
}

/// Features per node type, each `(T*M_type, S)`; `None` for an absent type.
pub type TypedFeatures<'t> = [Option<Var<'t>>; 3];

/// Heterogeneous attention over the fully connected typed graph.
#[derive(Debug, Clone)]
pub struct Chal {
    pub in_dims: [usize; 3],
    pub out_dim: usize,
    pub heads: usize,
    /// Node types whose updated features are produced.
    pub outputs: [bool; 3],
    w: [ParamId; 3],
    w_res: [Option<ParamId>; 3],
    /// `(self, neighbour)` attention vectors per ordered type pair.
    a: HashMap<(NodeType, NodeType), (ParamId, ParamId)>,
    w_sem: ParamId,
    q_sem: ParamId,
    pub flags: LayerFlags,
}

impl Chal {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        in_dims: [usize; 3],
        out_dim: usize,
        heads: usize,
        outputs: [bool; 3],
        flags: LayerFlags,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || out_dim % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide width {out_dim}")));
        }
        let w_head = out_dim / heads;
        let mut w = [ParamId(0); 3];
        let mut w_res = [None; 3];
        for ty in NodeType::ALL {
            let i = ty.index();
            w[i] = store.add(format!("{prefix}.w.{}", ty.tag()), kaiming(&[in_dims[i], out_dim], in_dims[i], rng))?;
        }
        let mut a = HashMap::new();
        for src in NodeType::ALL {
            for dst in NodeType::ALL {
                if src == dst || !outputs[src.index()] {
                    continue;
                }
                let name = format!("{prefix}.a.{}.{}", src.tag(), dst.tag());
                let a_s = store.add(format!("{name}.self"), kaiming(&[out_dim, 1], 2 * w_head, rng))?;
                let a_n = store.add(format!("{name}.nbr"), kaiming(&[out_dim, 1], 2 * w_head, rng))?;
                a.insert((src, dst), (a_s, a_n));
            }
        }
        let w_sem = store.add(format!("{prefix}.w_sem"), kaiming(&[out_dim, out_dim], out_dim, rng))?;
        let q_sem = store.add(format!("{prefix}.q_sem"), kaiming(&[out_dim, 1], out_dim, rng))?;
        for ty in NodeType::ALL {
            let i = ty.index();
            if outputs[i] {
                w_res[i] = Some(store.add(
                    format!("{prefix}.w_res.{}", ty.tag()),
                    kaiming(&[in_dims[i], out_dim], in_dims[i], rng),
                )?);
            }
        }
        Ok(Self {
            in_dims,
            out_dim,
            heads,
            outputs,
            w,
            w_res,
            a,
            w_sem,
            q_sem,
            flags,
        })
    }

    /// Node-level aggregate `V^{src,dst}` for one ordered type pair, `(T*Ms, S)`.
    fn meta_path<'t>(
        &self,
        ctx: &Ctx<'_, 't>,
        hs: Var<'t>,
        hn: Var<'t>,
        pair: (NodeType, NodeType),
        t: usize,
    ) -> Result<Var<'t>> {
        let s = self.out_dim;
        let w = s / self.heads;
        let mn = hn.value().len() / s / t;
        let ms = hs.value().len() / s / t;
        let mut parts = Vec::with_capacity(self.heads);
        for d in 0..self.heads {
            let att = self.attention(ctx, hs, hn, pair, t, d)?;
            let vals = hn.slice_last(d * w, w)?.reshape(&[t, mn, w])?;
            parts.push(att.bmm(vals)?.crelu().reshape(&[t * ms, w])?);
        }
        Var::concat_last(&parts)
    }

    fn attention<'t>(
        &self,
        ctx: &Ctx<'_, 't>,
        hs: Var<'t>,
        hn: Var<'t>,
        pair: (NodeType, NodeType),
        t: usize,
        d: usize,
    ) -> Result<Var<'t>> {
        let &(a_s, a_n) = self
            .a
            .get(&pair)
            .ok_or_else(|| Error::Shape(format!("no attention for {pair:?}")))?;
        head_logits(hs, hn, ctx.var(a_s), ctx.var(a_n), t, self.heads, d)?.softmax_re(2)
    }

    /// Node-level attention matrices `(T, Ms, Mn)` of every head for one pair.
    pub fn attention_weights<'t>(
        &self,
        ctx: &Ctx<'_, 't>,
        feats: &TypedFeatures<'t>,
        pair: (NodeType, NodeType),
        t: usize,
    ) -> Result<Vec<Var<'t>>> {
        let hs = self.transform(ctx, feats, pair.0)?;
        let hn = self.transform(ctx, feats, pair.1)?;
        match (hs, hn) {
            (Some(hs), Some(hn)) => (0..self.heads).map(|d| self.attention(ctx, hs, hn, pair, t, d)).collect(),
            _ => Err(Error::Shape("attention requested for an absent node type".into())),
        }
    }

    fn transform<'t>(&self, ctx: &Ctx<'_, 't>, feats: &TypedFeatures<'t>, ty: NodeType) -> Result<Option<Var<'t>>> {
        let i = ty.index();
        match feats[i] {
            Some(x) => {
                check_cols("heterogeneous attention", &x, self.in_dims[i])?;
                Ok(Some(x.matmul(ctx.var(self.w[i]))?))
            }
            None => Ok(None),
        }
    }

    /// Semantic weights `(T, |neighbour types|)` from meta-path aggregates.
    fn semantic<'t>(&self, ctx: &Ctx<'_, 't>, paths: &[Var<'t>], t: usize) -> Result<Var<'t>> {
        let s = self.out_dim;
        let mut scores = Vec::with_capacity(paths.len());
        for &v in paths {
            let m = v.value().len() / s / t;
            let z = v.matmul(ctx.var(self.w_sem))?.re().tanh_re();
            let sc = z.matmul(ctx.var(self.q_sem))?.re().reshape(&[t, m])?;
            scores.push(sc.sum_axis(1)?.scale_re(1.0 / m as f64).reshape(&[t, 1])?);
        }
        Var::concat_last(&scores)?.softmax_re(1)
    }

    /// Semantic weights per node type, for inspection.
    pub fn semantic_weights<'t>(
        &self,
        ctx: &Ctx<'_, 't>,
        feats: &TypedFeatures<'t>,
        ty: NodeType,
        t: usize,
    ) -> Result<Option<Var<'t>>> {
        let h = self.transforms(ctx, feats)?;
        let paths = self.paths_for(ctx, &h, ty, t)?;
        if paths.is_empty() {
            return Ok(None);
        }
        Ok(Some(self.semantic(ctx, &paths, t)?))
    }

    fn transforms<'t>(&self, ctx: &Ctx<'_, 't>, feats: &TypedFeatures<'t>) -> Result<TypedFeatures<'t>> {
        Ok([
            self.transform(ctx, feats, NodeType::Bs)?,
            self.transform(ctx, feats, NodeType::Ue)?,
            self.transform(ctx, feats, NodeType::Ris)?,
        ])
    }

    fn paths_for<'t>(&self, ctx: &Ctx<'_, 't>, h: &TypedFeatures<'t>, ty: NodeType, t: usize) -> Result<Vec<Var<'t>>> {
        let mut out = Vec::new();
        let Some(hs) = h[ty.index()].filter(|_| self.outputs[ty.index()]) else {
            return Ok(out);
        };
        for nb in NodeType::ALL {
            if nb == ty {
                continue;
            }
            if let Some(hn) = h[nb.index()] {
                out.push(self.meta_path(ctx, hs, hn, (ty, nb), t)?);
            }
        }
        Ok(out)
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, feats: &TypedFeatures<'t>, t: usize) -> Result<TypedFeatures<'t>> {
        let h = self.transforms(ctx, feats)?;
        let mut out: TypedFeatures<'t> = [None, None, None];
        for ty in NodeType::ALL {
            let i = ty.index();
            let (Some(x), Some(w_res)) = (feats[i], self.w_res[i]) else { continue };
            let mut acc: Option<Var<'t>> = None;
            if self.flags.message_passing {
                let paths = self.paths_for(ctx, &h, ty, t)?;
                if !paths.is_empty() {
                    let beta = self.semantic(ctx, &paths, t)?;
                    for (j, v) in paths.into_iter().enumerate() {
                        let bj = beta.slice_last(j, 1)?.reshape(&[t])?;
                        let term = v.mul_colvec(bj)?;
                        acc = Some(match acc {
                            Some(a) => a.add(term)?,
                            None => term,
                        });
                    }
                }
            }
            if self.flags.residual || acc.is_none() {
                let res = x.matmul(ctx.var(w_res))?;
                let res = if self.flags.residual { res } else { res.scale_re(0.0) };
                acc = Some(match acc {
                    Some(a) => a.add(res)?,
                    None => res,
                });
            }
            out[i] = acc.map(Var::crelu);
        }
        Ok(out)
    }
}

/// Neighbour mask of the link graph over nodes `(b, k)` at index `b*K + k`:
/// links sharing a BS or a UE are adjacent, without self-loops.
pub fn link_graph_mask(b: usize, k: usize) -> Vec<bool> {
    let n = b * k;
    let mut mask = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            let (bi, ki) = (i / k, i % k);
            let (bj, kj) = (j / k, j % k);
            mask[i * n + j] = i != j && (bi == bj || ki == kj);
        }
    }
    mask
}

/// Undirected edge count of the link graph.
pub fn link_graph_edges(b: usize, k: usize) -> usize {
    link_graph_mask(b, k).iter().filter(|&&m| m).count() / 2
}

/// Homogeneous attention over the link graph with a previous-layer and input skip.
#[derive(Debug, Clone)]
pub struct Cgal {
    pub in_dim: usize,
    pub input_dim: usize,
    pub out_dim: usize,
    w: ParamId,
    a_self: ParamId,
    a_nbr: ParamId,
    w_prev: ParamId,
    w_input: ParamId,
    pub flags: LayerFlags,
}

impl Cgal {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        input_dim: usize,
        out_dim: usize,
        flags: LayerFlags,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            in_dim,
            input_dim,
            out_dim,
            w: store.add(format!("{prefix}.w"), kaiming(&[in_dim, out_dim], in_dim, rng))?,
            a_self: store.add(format!("{prefix}.a.self"), kaiming(&[out_dim, 1], 2 * out_dim, rng))?,
            a_nbr: store.add(format!("{prefix}.a.nbr"), kaiming(&[out_dim, 1], 2 * out_dim, rng))?,
            w_prev: store.add(format!("{prefix}.w_prev"), kaiming(&[in_dim, out_dim], in_dim, rng))?,
            w_input: store.add(format!("{prefix}.w_input"), kaiming(&[input_dim, out_dim], input_dim, rng))?,
            flags,
        })
    }

    /// Attention `(T, n, n)` for `x` of shape `(T*n, in_dim)` under `mask` (`n*n`).
    pub fn attention<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>, mask: &Rc<Vec<bool>>, t: usize) -> Result<Var<'t>> {
        check_cols("graph attention", &x, self.in_dim)?;
        let h = x.matmul(ctx.var(self.w))?;
        head_logits(h, h, ctx.var(self.a_self), ctx.var(self.a_nbr), t, 1, 0)?.masked_softmax_last(mask.clone())
    }

    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'_, 't>,
        x: Var<'t>,
        input: Var<'t>,
        mask: &Rc<Vec<bool>>,
        t: usize,
    ) -> Result<Var<'t>> {
        check_cols("graph attention", &x, self.in_dim)?;
        check_cols("graph attention input", &input, self.input_dim)?;
        let rows = x.shape()[0];
        let n = rows / t.max(1);
        if n * t != rows || mask.len() != n * n {
            return Err(Error::Shape(format!("graph attention: {rows} rows, {t} samples, mask {}", mask.len())));
        }
        let mut acc: Option<Var<'t>> = None;
        if self.flags.message_passing {
            let att = self.attention(ctx, x, mask, t)?;
            let h = x.matmul(ctx.var(self.w))?.reshape(&[t, n, self.out_dim])?;
            acc = Some(att.bmm(h)?.crelu().reshape(&[rows, self.out_dim])?);
        }
        if self.flags.residual || acc.is_none() {
            let res = x
                .matmul(ctx.var(self.w_prev))?
                .add(input.matmul(ctx.var(self.w_input))?)?;
            acc = Some(match acc {
                Some(a) => a.add(res)?,
                None => res,
            });
        }
        Ok(acc.expect("at least one branch is evaluated"))
    }
}

/// Complex batch normalization with modulus-variance whitening.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub dim: usize,
    gamma: ParamId,
    beta: ParamId,
    run_mean: ParamId,
    run_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, buffers: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        let one = C64::new(1.0, 0.0);
        Ok(Self {
            dim,
            gamma: store.add(format!("{prefix}.gamma"), CTensor::full(&[dim], one))?,
            beta: store.add(format!("{prefix}.beta"), CTensor::zeros(&[dim]))?,
            run_mean: buffers.add(format!("{prefix}.running_mean"), CTensor::zeros(&[dim]))?,
            run_var: buffers.add(format!("{prefix}.running_var"), CTensor::full(&[dim], one))?,
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>) -> Result<Var<'t>> {
        check_cols("batch norm", &x, self.dim)?;
        let rows = x.shape()[0];
        if rows == 0 {
            return Err(Error::Shape("batch norm over an empty batch".into()));
        }
        let tape = x.tape();
        let (centered, var) = if ctx.train {
            let mu = x.sum_axis(0)?.scale_re(1.0 / rows as f64);
            let centered = x.add_rowvec(mu.neg())?;
            let var = centered.abs2().sum_axis(0)?.scale_re(1.0 / rows as f64);
            let (om, ov) = (ctx.buffer(self.run_mean), ctx.buffer(self.run_var));
            let nm = om.zip_map(&mu.value(), |o, b| o * (1.0 - BN_MOMENTUM) + b * BN_MOMENTUM);
            let nv = ov.zip_map(&var.value(), |o, b| o * (1.0 - BN_MOMENTUM) + b * BN_MOMENTUM);
            ctx.updates.borrow_mut().extend([(self.run_mean, nm), (self.run_var, nv)]);
            (centered, var)
        } else {
            let mu = tape.constant(ctx.buffer(self.run_mean).clone());
            let var = tape.constant(ctx.buffer(self.run_var).clone());
            (x.add_rowvec(mu.neg())?, var)
        };
        let inv = var.add_scalar(C64::new(BN_EPS, 0.0)).sqrt().recip()?;
        centered
            .mul_rowvec(inv)?
            .mul_rowvec(ctx.var(self.gamma))?
            .add_rowvec(ctx.var(self.beta))
    }
}

/// `CReLU(X W + b)` followed by batch norm, or a plain affine map when linear.
#[derive(Debug, Clone)]
pub struct Cfl {
    pub in_dim: usize,
    pub out_dim: usize,
    w: ParamId,
    b: ParamId,
    bn: Option<BatchNorm>,
    linear: bool,
}

impl Cfl {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        buffers: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        batch_norm: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add(format!("{prefix}.w"), kaiming(&[in_dim, out_dim], in_dim, rng))?;
        let b = store.add(format!("{prefix}.b"), CTensor::zeros(&[out_dim]))?;
        let bn = if batch_norm {
            Some(BatchNorm::new(store, buffers, &format!("{prefix}.bn"), out_dim)?)
        } else {
            None
        };
        Ok(Self {
            in_dim,
            out_dim,
            w,
            b,
            bn,
            linear: false,
        })
    }

    /// Affine projection without activation or normalization.
    pub fn linear<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dummy = ParamStore::new();
        let mut layer = Self::new(store, &mut dummy, prefix, in_dim, out_dim, false, rng)?;
        layer.linear = true;
        Ok(layer)
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>) -> Result<Var<'t>> {
        check_cols("fully connected", &x, self.in_dim)?;
        let y = x.matmul(ctx.var(self.w))?.add_rowvec(ctx.var(self.b))?;
        if self.linear {
            return Ok(y);
        }
        let y = y.crelu();
        match &self.bn {
            Some(bn) => bn.forward(ctx, y),
            None => Ok(y),
        }
    }
}

/// A stack of fully connected layers `in -> hidden ... -> out`.
#[derive(Debug, Clone)]
pub struct CflStack {
    layers: Vec<Cfl>,
}

impl CflStack {
    /// `count` layers; with `enabled == false` a single linear projection instead.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        buffers: &mut ParamStore,
        prefix: &str,
        count: usize,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        enabled: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if !enabled {
            return Ok(Self {
                layers: vec![Cfl::linear(store, &format!("{prefix}.0"), in_dim, out_dim, rng)?],
            });
        }
        let mut layers = Vec::with_capacity(count);
        for i in 0..count {
            let din = if i == 0 { in_dim } else { hidden };
            let dout = if i + 1 == count { out_dim } else { hidden };
            layers.push(Cfl::new(store, buffers, &format!("{prefix}.{i}"), din, dout, true, rng)?);
        }
        Ok(Self { layers })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, mut x: Var<'t>) -> Result<Var<'t>> {
        for l in &self.layers {
            x = l.forward(ctx, x)?;
        }
        Ok(x)
    }
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Writes a text header and named complex arrays (interleaved re/im, little-endian).
pub fn write_arrays<'a, W: Write>(
    w: &mut W,
    header: &str,
    arrays: impl IntoIterator<Item = (&'a str, &'a CTensor)>,
) -> Result<()> {
    let arrays: Vec<_> = arrays.into_iter().collect();
    w.write_all(CKPT_MAGIC)?;
    write_u32(w, CKPT_VERSION)?;
    write_u64(w, header.len() as u64)?;
    w.write_all(header.as_bytes())?;
    write_u64(w, arrays.len() as u64)?;
    for (name, t) in arrays {
        write_u32(w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        write_u32(w, t.shape().len() as u32)?;
        for &d in t.shape() {
            write_u64(w, d as u64)?;
        }
        for z in t.data() {
            w.write_all(&z.re.to_le_bytes())?;
            w.write_all(&z.im.to_le_bytes())?;
        }
    }
    Ok(())
}

const MAX_NAME: u32 = 4096;
const MAX_HEADER: u64 = 1 << 20;
const MAX_ENTRIES: u64 = 1 << 24;

/// Inverse of [`write_arrays`].
pub fn read_arrays<R: Read>(r: &mut R) -> Result<(String, Vec<(String, CTensor)>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Format("not a parameter file".into()));
    }
    let version = read_u32(r)?;
    if version != CKPT_VERSION {
        return Err(Error::Format(format!("unsupported parameter file version {version}")));
    }
    let hlen = read_u64(r)?;
    if hlen > MAX_HEADER {
        return Err(Error::Format("header too long".into()));
    }
    let mut header = vec![0u8; hlen as usize];
    r.read_exact(&mut header)?;
    let header = String::from_utf8(header).map_err(|_| Error::Format("header is not UTF-8".into()))?;
    let count = read_u64(r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let nlen = read_u32(r)?;
        if nlen > MAX_NAME {
            return Err(Error::Format("array name too long".into()));
        }
        let mut name = vec![0u8; nlen as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("array name is not UTF-8".into()))?;
        let ndim = read_u32(r)?;
        if ndim > 8 {
            return Err(Error::Format(format!("{name}: {ndim} dimensions")));
        }
        let mut shape = Vec::with_capacity(ndim as usize);
        let mut n: u64 = 1;
        for _ in 0..ndim {
            let d = read_u64(r)?;
            n = n.checked_mul(d).filter(|&n| n <= MAX_ENTRIES).ok_or_else(|| Error::Format(format!("{name}: too large")))?;
            shape.push(d as usize);
        }
        let mut data = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let re = read_f64(r)?;
            let im = read_f64(r)?;
            data.push(C64::new(re, im));
        }
        out.push((name, CTensor::new(&shape, data)?));
    }
    Ok((header, out))
}
